//! Model assembly, AdaMax training, checkpoints and evaluation.

mod adamax;
mod checkpoint;
mod config;
mod model;

pub use adamax::{adamax_step, clip_global_norm, OptimizerState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry};
pub use config::{ModelDims, TrainConfig, TypeSource};
pub use model::{
    argmax, hypothesis_prefix, visual_dim_of, InferenceOptions, LossOptions, Model, ModelSpec,
    SampleGraph, SampleLoss,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{DatasetBundle, SampleRecord};
use crate::diffcore::{DenseTensor, Tape};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::metrics::{MetricsReport, Prediction};

/// Maps `f` over `items` on up to `threads` workers. Output order follows input order.
fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Loss and per-parameter gradients of one question.
pub fn sample_gradients(
    model: &Model,
    bundle: &DatasetBundle,
    sample: &SampleRecord,
    opts: &LossOptions,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    let f_v = bundle.visual(sample)?;
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let graph = model.forward(&mut tape, &bound, &sample.tokens, &f_v)?;
    let loss = model.sample_loss(&mut tape, &graph, sample, opts)?;
    let breakdown = loss.breakdown(&tape, &opts.weights);
    let grads = tape.backward(loss.total)?;
    Ok((breakdown, bound.collect_grads(&grads)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub steps: usize,
    /// Mean per-question loss over the epoch.
    pub loss: LossBreakdown,
    /// Step lines logged during this epoch.
    pub log: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub epochs: Vec<EpochReport>,
    /// One line per logged step.
    pub log: Vec<String>,
    pub steps: usize,
}

pub fn train(config: &TrainConfig, bundle: &DatasetBundle) -> Result<TrainOutcome> {
    train_with(config, bundle, 1, |_, _| {})
}

/// Trains from a fresh initialization. `on_epoch` sees each finished epoch.
///
/// The batch loss is the mean of per-question losses. Per-question gradients
/// are reduced in index order, so results do not depend on `threads`.
pub fn train_with(
    config: &TrainConfig,
    bundle: &DatasetBundle,
    threads: usize,
    mut on_epoch: impl FnMut(&EpochReport, &Model),
) -> Result<TrainOutcome> {
    let mut model = Model::init(config, bundle)?;
    let opts = LossOptions::from(config);
    let mut state = OptimizerState::new(&model.params);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    order_rng.set_stream(1);
    let mut order: Vec<usize> = (0..bundle.samples.len()).collect();
    let mut log = Vec::new();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut step = 0;
    let hyps = model.spec.hypotheses.len();

    for epoch in 0..config.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = LossBreakdown::zero(hyps);
        let mut epoch_log = Vec::new();
        for batch in order.chunks(config.batch_size) {
            step += 1;
            let scale = 1.0 / batch.len() as f64;
            let results = par_map(batch, threads, |&i| {
                sample_gradients(&model, bundle, &bundle.samples[i], &opts)
            });
            let mut batch_loss = LossBreakdown::zero(hyps);
            let mut grads: Vec<Vec<f64>> = model
                .params
                .iter()
                .map(|(_, t)| vec![0.0; t.len()])
                .collect();
            for r in results {
                let (loss, g) = r.map_err(|e| match e {
                    Error::NonFinite(detail) => Error::Divergence { step, detail },
                    e => e,
                })?;
                batch_loss.accumulate(&loss, scale);
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    for (a, b) in acc.iter_mut().zip(gi) {
                        *a += scale * b;
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("non-finite loss ({})", batch_loss.log_line(step)),
                });
            }
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    step,
                    detail: "non-finite gradient".into(),
                });
            }
            if let Some(max) = config.clip_norm {
                clip_global_norm(&mut grads, max);
            }
            adamax_step(&mut model.params, &grads, &mut state, config.learning_rate)?;
            if model.params.iter().any(|(_, t)| !t.is_finite()) {
                return Err(Error::Divergence {
                    step,
                    detail: "non-finite parameter after update".into(),
                });
            }
            if step % config.log_interval == 0 {
                epoch_log.push(batch_loss.log_line(step));
            }
            epoch_loss.accumulate(
                &batch_loss,
                batch.len() as f64 / bundle.samples.len() as f64,
            );
        }
        let report = EpochReport {
            epoch,
            steps: step,
            loss: epoch_loss,
            log: epoch_log,
        };
        log.extend(report.log.iter().cloned());
        on_epoch(&report, &model);
        epochs.push(report);
    }
    Ok(TrainOutcome {
        model,
        epochs,
        log,
        steps: step,
    })
}

/// Everything inference produces for one question.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePrediction {
    pub answer: usize,
    pub qtype: usize,
    /// Final answer scores.
    pub scores: Vec<f64>,
    /// Predicted type distribution.
    pub qtype_probs: Vec<f64>,
}

impl SamplePrediction {
    pub fn prediction(&self) -> Prediction {
        Prediction {
            answer: self.answer,
            qtype: self.qtype,
        }
    }

    /// The `k` best answers, highest score first (lowest index on ties).
    pub fn top_k(&self, k: usize) -> Vec<(usize, f64)> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        idx.into_iter()
            .take(k)
            .map(|i| (i, self.scores[i]))
            .collect()
    }
}

/// Runs inference on one question. `qtype_label` is required when the type source is ground truth.
pub fn predict_one(
    model: &Model,
    tokens: &[usize],
    f_v: &DenseTensor,
    qtype_label: usize,
    opts: &InferenceOptions,
) -> Result<SamplePrediction> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let graph = model.forward(&mut tape, &bound, tokens, f_v)?;
    let scores_var = model.answer_scores(&mut tape, &graph, qtype_label, opts)?;
    let scores = tape.values(scores_var).to_vec();
    let qtype_probs = tape.values(graph.h).to_vec();
    Ok(SamplePrediction {
        answer: argmax(&scores),
        qtype: argmax(&qtype_probs),
        scores,
        qtype_probs,
    })
}

/// Per-question predictions over a bundle, in sample order.
pub fn predict(
    model: &Model,
    bundle: &DatasetBundle,
    opts: &InferenceOptions,
    threads: usize,
) -> Vec<Result<SamplePrediction>> {
    par_map(&bundle.samples, threads, |s| {
        let f_v = bundle.visual(s)?;
        predict_one(model, &s.tokens, &f_v, s.qtype, opts)
    })
}

pub fn evaluate(
    model: &Model,
    bundle: &DatasetBundle,
    opts: &InferenceOptions,
    threads: usize,
) -> Result<MetricsReport> {
    model.check_compatible(bundle)?;
    let preds = predict(model, bundle, opts, threads)
        .into_iter()
        .map(|r| r.map(|p| p.prediction()))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_predictions(bundle, &preds)
}
