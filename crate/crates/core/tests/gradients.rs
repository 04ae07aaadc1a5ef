//! Full-graph gradient checks against central differences.

mod common;

use milqt::diffcore::gradcheck::check;
use milqt::diffcore::{DenseTensor, Tape};
use milqt::encoders::{gru_encode, GruParams};
use milqt::hypotheses::{FusionOp, HypothesisKind, HypothesisSpec};
use milqt::interaction::InteractionMode;
use milqt::params::ParamStore;
use milqt::trainer::{LossOptions, Model, TrainConfig, TypeSource};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn check_model(config: &TrainConfig, sample_index: usize) -> f64 {
    let bundle = common::toy_bundle(21);
    let model = Model::init(config, &bundle).unwrap();
    let sample = &bundle.samples[sample_index];
    let f_v = bundle.visual(sample).unwrap();
    let opts = LossOptions::from(config);
    let inputs: Vec<DenseTensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let report = check(&inputs, STEP, |tape, vars| {
        let bound = model.params.bind_vars(vars.to_vec())?;
        let graph = model.forward(tape, &bound, &sample.tokens, &f_v)?;
        Ok(model.sample_loss(tape, &graph, sample, &opts)?.total)
    })
    .unwrap();
    assert!(report.coordinates == model.params.num_scalars());
    report.max_rel_err
}

fn with(hyps: Vec<HypothesisSpec>) -> TrainConfig {
    TrainConfig {
        hypotheses: hyps,
        ..common::toy_config()
    }
}

#[test]
fn default_pair_matches_finite_differences() {
    let err = check_model(&common::toy_config(), 0);
    assert!(err < TOL, "max relative error {err}");
}

#[test]
fn every_hypothesis_kind_matches() {
    for kind in [
        HypothesisKind::TopDown,
        HypothesisKind::BilinearLowRank,
        HypothesisKind::Stacked2,
    ] {
        let err = check_model(&with(vec![HypothesisSpec::new(kind)]), 1);
        assert!(err < TOL, "{kind:?}: max relative error {err}");
    }
}

#[test]
fn ewa_groundtruth_and_softmax_gating_match() {
    let config = TrainConfig {
        fusion: FusionOp::Ewa,
        type_source: TypeSource::Groundtruth,
        mil_softmax: true,
        hypotheses: vec![
            HypothesisSpec::new(HypothesisKind::Stacked2),
            HypothesisSpec::with_channels(HypothesisKind::TopDown, 0, 3),
        ],
        ..common::toy_config()
    };
    let err = check_model(&config, 2);
    assert!(err < TOL, "max relative error {err}");
}

#[test]
fn averaging_without_prior_or_type_fusion_matches() {
    let config = TrainConfig {
        interaction: InteractionMode::Averaging,
        prior: false,
        type_fusion: false,
        ..common::toy_config()
    };
    let err = check_model(&config, 3);
    assert!(err < TOL, "max relative error {err}");
}

#[test]
fn stopped_type_gradient_matches() {
    let config = TrainConfig {
        stop_gradient_h: true,
        ..common::toy_config()
    };
    let err = check_model(&config, 4);
    assert!(err < TOL, "max relative error {err}");
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn matvec(m: &DenseTensor, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    (0..rows)
        .map(|i| (0..cols).map(|j| m.values()[i * cols + j] * x[j]).sum())
        .collect()
}

/// Two GRU steps evaluated with plain loops.
#[test]
fn gru_matches_hand_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    GruParams::init(&mut store, &mut rng, "g", 3, 4);
    for (_, t) in store.iter_mut() {
        // Non-zero biases so every term is exercised.
        for v in t.values_mut() {
            *v += 0.05;
        }
    }
    let xs = [vec![0.3, -0.2, 0.5], vec![-0.4, 0.1, 0.2]];

    let p = |n: &str| store.get(&format!("g.{n}")).unwrap();
    let add3 = |a: Vec<f64>, b: Vec<f64>, c: &DenseTensor| -> Vec<f64> {
        a.iter()
            .zip(&b)
            .zip(c.values())
            .map(|((x, y), z)| x + y + z)
            .collect()
    };
    let mut h = vec![0.0; 4];
    for x in &xs {
        let z: Vec<f64> = add3(matvec(p("w_z"), x), matvec(p("u_z"), &h), p("b_z"))
            .into_iter()
            .map(sigmoid)
            .collect();
        let r: Vec<f64> = add3(matvec(p("w_r"), x), matvec(p("u_r"), &h), p("b_r"))
            .into_iter()
            .map(sigmoid)
            .collect();
        let rh: Vec<f64> = r.iter().zip(&h).map(|(a, b)| a * b).collect();
        let cand: Vec<f64> = add3(matvec(p("w_h"), x), matvec(p("u_h"), &rh), p("b_h"))
            .into_iter()
            .map(f64::tanh)
            .collect();
        h = (0..4)
            .map(|i| (1.0 - z[i]) * h[i] + z[i] * cand[i])
            .collect();
    }

    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let gp = GruParams::bind(&bound, "g").unwrap();
    let rows: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let f_w = tape.constant(&DenseTensor::matrix(&rows).unwrap());
    let out = gru_encode(&mut tape, f_w, &gp).unwrap();
    for (a, b) in tape.values(out).iter().zip(&h) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}
