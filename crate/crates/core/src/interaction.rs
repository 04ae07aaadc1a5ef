//! Type-gated combination of several hypotheses' answer predictions.
//!
//! With `g: [A x J]` (one column per hypothesis), learnable `w_mil: [P x J]`
//! and the prior `m: [P x A]`, the gate is `S = mᵀ w_mil: [A x J]` and the
//! combined prediction is `ρ_a = Σ_j S[a, j] g[a, j]`.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::text::fmt_real;
use crate::diffcore::{DenseTensor, ReduceKind, Tape, Var};
use crate::error::{Error, Result};
use crate::prior::PriorMatrix;

pub const MIL_WEIGHTS: &str = "mil.w";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InteractionMode {
    /// Prior-gated learnable mixing.
    #[default]
    Learned,
    /// Plain mean over hypotheses.
    Averaging,
    /// First hypothesis only.
    Single,
}

impl FromStr for InteractionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(InteractionMode::Learned),
            "averaging" => Ok(InteractionMode::Averaging),
            "single" => Ok(InteractionMode::Single),
            other => Err(Error::Validation(format!(
                "unknown interaction mode '{other}'"
            ))),
        }
    }
}

/// `w_mil`, shape `[P x J]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionWeights {
    pub w: DenseTensor,
}

impl InteractionWeights {
    /// Every entry `1/J`, so training starts from the averaging baseline.
    pub fn uniform(qtypes: usize, hypotheses: usize) -> Self {
        InteractionWeights {
            w: DenseTensor::filled(&[qtypes, hypotheses], 1.0 / hypotheses as f64),
        }
    }

    pub fn num_qtypes(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn num_hypotheses(&self) -> usize {
        self.w.shape()[1]
    }
}

/// Gate `mᵀ w` (optionally with `w` softmaxed over hypotheses) applied to `g`, summed over `j`.
pub fn mix(
    tape: &mut Tape,
    g: Var,
    w: Var,
    prior: &PriorMatrix,
    softmax_weights: bool,
) -> Result<Var> {
    let (gs, ws) = (tape.shape(g).to_vec(), tape.shape(w).to_vec());
    let (p, a) = (prior.num_qtypes(), prior.num_answers());
    if gs.len() != 2 || ws.len() != 2 || gs[0] != a || ws[0] != p || gs[1] != ws[1] {
        return Err(Error::dim(
            "mix",
            format!("g {gs:?}, w_mil {ws:?}, prior [{p}, {a}]"),
        ));
    }
    let w = if softmax_weights { tape.softmax(w) } else { w };
    let m = tape.constant(prior.matrix());
    let mt = tape.transpose(m)?;
    let gate = tape.matmul(mt, w)?;
    let gated = tape.mul(gate, g)?;
    tape.reduce(gated, ReduceKind::Sum, Some(1))
}

/// Row-wise mean of `g: [A x J]`.
pub fn averaging_baseline(tape: &mut Tape, g: Var) -> Result<Var> {
    if tape.shape(g).len() != 2 {
        return Err(Error::dim(
            "averaging_baseline",
            format!("{:?}", tape.shape(g)),
        ));
    }
    tape.reduce(g, ReduceKind::Mean, Some(1))
}

/// `w_mil` labelled by question type (rows) and hypothesis (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationTable {
    pub qtypes: Vec<String>,
    pub hypotheses: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl CorrelationTable {
    /// Hypothesis with the largest weight for each type (lowest index on ties).
    pub fn argmax_per_type(&self) -> Vec<usize> {
        self.values
            .iter()
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    pub fn render_csv(&self) -> String {
        let mut out = String::from("qtype");
        for h in &self.hypotheses {
            write!(out, ",{h}").unwrap();
        }
        out.push('\n');
        for (name, row) in self.qtypes.iter().zip(&self.values) {
            out.push_str(name);
            for &v in row {
                write!(out, ",{}", fmt_real(v)).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

pub fn correlation_readout(
    w: &InteractionWeights,
    qtypes: &[String],
    hypotheses: &[String],
) -> Result<CorrelationTable> {
    let (p, j) = (w.num_qtypes(), w.num_hypotheses());
    if qtypes.len() != p || hypotheses.len() != j {
        return Err(Error::dim(
            "correlation_readout",
            "label counts do not match w_mil",
        ));
    }
    let values = w.w.values().chunks(j).map(<[f64]>::to_vec).collect();
    Ok(CorrelationTable {
        qtypes: qtypes.to_vec(),
        hypotheses: hypotheses.to_vec(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_prior() -> PriorMatrix {
        PriorMatrix::from_counts(
            &[vec![1, 0], vec![0, 1]],
            vec!["t0".into(), "t1".into()],
            vec!["a0".into(), "a1".into()],
        )
        .unwrap()
    }

    fn g_fixture(tape: &mut Tape) -> Var {
        tape.param(&DenseTensor::matrix(&[&[0.8, 0.2], &[0.1, 0.9]]).unwrap())
    }

    #[test]
    fn identity_gate_picks_diagonal() {
        let mut tape = Tape::new();
        let g = g_fixture(&mut tape);
        let w = tape.param(&DenseTensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
        let rho = mix(&mut tape, g, w, &identity_prior(), false).unwrap();
        assert_eq!(tape.values(rho), &[0.8, 0.9]);
    }

    #[test]
    fn single_hypothesis_with_unit_weights_is_identity() {
        let prior = PriorMatrix::from_counts(
            &[vec![3, 1, 0], vec![1, 1, 2]],
            vec!["t0".into(), "t1".into()],
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        let mut tape = Tape::new();
        let g = tape.param(&DenseTensor::new(&[3, 1], vec![0.3, -1.2, 2.5]).unwrap());
        let w = tape.param(&DenseTensor::ones(&[2, 1]));
        let rho = mix(&mut tape, g, w, &prior, false).unwrap();
        for (r, x) in tape.values(rho).iter().zip([0.3, -1.2, 2.5]) {
            assert!((r - x).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_predictions_mix_to_zero() {
        let mut tape = Tape::new();
        let g = tape.param(&DenseTensor::zeros(&[2, 2]));
        let w = tape.param(&DenseTensor::matrix(&[&[3.0, -1.0], &[0.5, 7.0]]).unwrap());
        let rho = mix(&mut tape, g, w, &identity_prior(), false).unwrap();
        assert_eq!(tape.values(rho), &[0.0, 0.0]);
    }

    #[test]
    fn mix_rejects_bad_shapes() {
        let mut tape = Tape::new();
        let g = g_fixture(&mut tape);
        let w = tape.param(&DenseTensor::ones(&[2, 3]));
        assert!(mix(&mut tape, g, w, &identity_prior(), false).is_err());
    }

    #[test]
    fn averaging_cases() {
        let mut tape = Tape::new();
        let g = g_fixture(&mut tape);
        let avg = averaging_baseline(&mut tape, g).unwrap();
        assert_eq!(tape.values(avg), &[0.5, 0.5]);
        let single = tape.constant(&DenseTensor::new(&[3, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let avg = averaging_baseline(&mut tape, single).unwrap();
        assert_eq!(tape.values(avg), &[1.0, 2.0, 3.0]);
        let constant = tape.constant(&DenseTensor::filled(&[2, 4], 0.25));
        let avg = averaging_baseline(&mut tape, constant).unwrap();
        assert_eq!(tape.values(avg), &[0.25, 0.25]);
    }

    #[test]
    fn readout_of_uniform_init() {
        let w = InteractionWeights::uniform(3, 3);
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let t = correlation_readout(&w, &names, &names).unwrap();
        assert_eq!(t.values.len(), 3);
        assert!(t.values.iter().flatten().all(|&v| v == 1.0 / 3.0));
        assert_eq!(t.argmax_per_type(), vec![0, 0, 0]);
        assert!(t.render_csv().starts_with("qtype,a,b,c\na,"));
    }
}
