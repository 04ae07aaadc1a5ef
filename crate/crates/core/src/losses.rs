//! Soft cross-entropy answer losses, the prior-weighted VQA loss, the
//! question-type loss and their weighted multi-task sum.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::diffcore::text::fmt_real;
use crate::diffcore::{DenseTensor, Tape, Var};
use crate::error::{Error, Result};

/// `(α1, α2, α3)`: weights of the summed hypothesis losses, the VQA loss and
/// the question-type loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub hypotheses: f64,
    pub vqa: f64,
    pub qtype: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            hypotheses: 1.0,
            vqa: 1.0,
            qtype: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(hypotheses: f64, vqa: f64, qtype: f64) -> Result<Self> {
        let w = LossWeights {
            hypotheses,
            vqa,
            qtype,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.hypotheses, self.vqa, self.qtype];
        if all.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::Validation(format!(
                "loss weights must be finite and >= 0, got {all:?}"
            )));
        }
        if all.iter().all(|&a| a == 0.0) {
            return Err(Error::Validation(
                "at least one loss weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// `(ŷ, ĝ) = (m_awn ⊙ y, m_awn ⊙ g)`.
pub fn weight_targets(tape: &mut Tape, m_awn: Var, y: Var, g: Var) -> Result<(Var, Var)> {
    let y_hat = tape.mul(m_awn, y)?;
    let g_hat = tape.mul(m_awn, g)?;
    Ok((y_hat, g_hat))
}

/// `-mean[t log σ(x) + (1 - t) log(1 - σ(x))]` over every entry, logs clamped.
pub fn soft_bce(tape: &mut Tape, targets: Var, logits: Var) -> Result<Var> {
    if tape.shape(targets) != tape.shape(logits) {
        return Err(Error::dim(
            "soft_bce",
            format!(
                "targets {:?} vs logits {:?}",
                tape.shape(targets),
                tape.shape(logits)
            ),
        ));
    }
    let s = tape.sigmoid(logits);
    let log_s = tape.log(s);
    let neg_s = tape.scale(s, -1.0);
    let one_minus_s = tape.shift(neg_s, 1.0);
    let log_1ms = tape.log(one_minus_s);
    let neg_t = tape.scale(targets, -1.0);
    let one_minus_t = tape.shift(neg_t, 1.0);
    let pos = tape.mul(targets, log_s)?;
    let neg = tape.mul(one_minus_t, log_1ms)?;
    let both = tape.add(pos, neg)?;
    let mean = tape.mean(both);
    Ok(tape.scale(mean, -1.0))
}

/// Soft cross-entropy of the prior-weighted targets against the prior-weighted prediction.
pub fn vqa_loss(tape: &mut Tape, y_hat: Var, g_hat: Var) -> Result<Var> {
    soft_bce(tape, y_hat, g_hat)
}

/// Soft cross-entropy of one hypothesis' logits against the unweighted targets.
pub fn hypothesis_loss(tape: &mut Tape, g_j: Var, y: Var) -> Result<Var> {
    soft_bce(tape, y, g_j)
}

/// Mean `-log h[label]` over a `[P]` or `[B x P]` distribution, clamped.
pub fn qtype_loss(tape: &mut Tape, h: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(h).to_vec();
    let (rows, p) = match shape.as_slice() {
        [p] => (1, *p),
        [b, p] => (*b, *p),
        _ => return Err(Error::dim("qtype_loss", format!("{shape:?}"))),
    };
    if labels.len() != rows {
        return Err(Error::dim(
            "qtype_loss",
            format!("{} labels for {rows} rows", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= p) {
        return Err(Error::Validation(format!(
            "question-type label {bad} out of range {p}"
        )));
    }
    let mut mask = vec![0.0; rows * p];
    for (r, &l) in labels.iter().enumerate() {
        mask[r * p + l] = 1.0;
    }
    let mask = tape.constant(&DenseTensor::new(&shape, mask)?);
    let picked = tape.mul(h, mask)?;
    let picked = if rows == 1 {
        tape.sum(picked)
    } else {
        tape.reduce(picked, crate::diffcore::ReduceKind::Sum, Some(1))?
    };
    let logp = tape.log(picked);
    let mean = tape.mean(logp);
    Ok(tape.scale(mean, -1.0))
}

/// Individual loss values and their weighted total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub hypotheses: Vec<f64>,
    pub vqa: f64,
    pub qtype: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `l = α1 Σ l_Hj + α2 l_vqa + α3 l_qt`.
    pub fn new(hypotheses: Vec<f64>, vqa: f64, qtype: f64, weights: &LossWeights) -> Self {
        let total = weights.hypotheses * hypotheses.iter().sum::<f64>()
            + weights.vqa * vqa
            + weights.qtype * qtype;
        LossBreakdown {
            hypotheses,
            vqa,
            qtype,
            total,
        }
    }

    /// Running mean helper: adds `other` scaled by `w`.
    pub fn accumulate(&mut self, other: &LossBreakdown, w: f64) {
        if self.hypotheses.len() < other.hypotheses.len() {
            self.hypotheses.resize(other.hypotheses.len(), 0.0);
        }
        for (a, b) in self.hypotheses.iter_mut().zip(&other.hypotheses) {
            *a += w * b;
        }
        self.vqa += w * other.vqa;
        self.qtype += w * other.qtype;
        self.total += w * other.total;
    }

    pub fn zero(hypotheses: usize) -> Self {
        LossBreakdown {
            hypotheses: vec![0.0; hypotheses],
            vqa: 0.0,
            qtype: 0.0,
            total: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.hypotheses.iter().all(|v| v.is_finite())
            && self.vqa.is_finite()
            && self.qtype.is_finite()
            && self.total.is_finite()
    }

    /// One log line: `step=<n> l_h=<a>,<b> l_vqa=<v> l_qt=<q> total=<t>`.
    pub fn log_line(&self, step: usize) -> String {
        let mut s = format!("step={step} l_h=");
        let hs: Vec<String> = self.hypotheses.iter().map(|&v| fmt_real(v)).collect();
        s.push_str(&hs.join(","));
        write!(
            s,
            " l_vqa={} l_qt={} total={}",
            fmt_real(self.vqa),
            fmt_real(self.qtype),
            fmt_real(self.total)
        )
        .unwrap();
        s
    }
}

pub fn total_loss(
    hypotheses: Vec<f64>,
    vqa: f64,
    qtype: f64,
    weights: &LossWeights,
) -> LossBreakdown {
    LossBreakdown::new(hypotheses, vqa, qtype, weights)
}

/// Tape form of the weighted sum. Terms with zero weight are left off the graph.
pub fn combine(
    tape: &mut Tape,
    hypotheses: &[Var],
    vqa: Option<Var>,
    qtype: Option<Var>,
    weights: &LossWeights,
) -> Result<Var> {
    let mut terms = Vec::new();
    if weights.hypotheses != 0.0 {
        for &l in hypotheses {
            terms.push(tape.scale(l, weights.hypotheses));
        }
    }
    if let (Some(l), true) = (vqa, weights.vqa != 0.0) {
        terms.push(tape.scale(l, weights.vqa));
    }
    if let (Some(l), true) = (qtype, weights.qtype != 0.0) {
        terms.push(tape.scale(l, weights.qtype));
    }
    let mut total = *terms
        .first()
        .ok_or_else(|| Error::Validation("no loss term has a positive weight".into()))?;
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.scalar_value(v)
    }

    #[test]
    fn eq_weighting_example() {
        let mut tape = Tape::new();
        let m = tape.constant(&DenseTensor::vector(&[0.6, 0.5, 0.4]));
        let y = tape.constant(&DenseTensor::vector(&[0.0, 1.0, 0.0]));
        let g = tape.constant(&DenseTensor::vector(&[1.0, 2.0, 3.0]));
        let (yh, gh) = weight_targets(&mut tape, m, y, g).unwrap();
        assert_eq!(tape.values(yh), &[0.0, 0.5, 0.0]);
        assert_eq!(tape.values(gh), &[0.6, 1.0, 1.2000000000000002]);
        let ones = tape.constant(&DenseTensor::ones(&[3]));
        let (yh, gh) = weight_targets(&mut tape, ones, y, g).unwrap();
        assert_eq!(tape.values(yh), tape.values(y));
        assert_eq!(tape.values(gh), tape.values(g));
    }

    #[test]
    fn bce_at_zero_logit() {
        for target in [1.0, 0.5] {
            let mut tape = Tape::new();
            let t = tape.constant(&DenseTensor::vector(&[target]));
            let g = tape.constant(&DenseTensor::vector(&[0.0]));
            let l = vqa_loss(&mut tape, t, g).unwrap();
            assert!((scalar(&tape, l) - LN2).abs() < 1e-15);
        }
    }

    #[test]
    fn bce_saturates_to_zero() {
        let mut tape = Tape::new();
        let t = tape.constant(&DenseTensor::vector(&[1.0]));
        let g = tape.constant(&DenseTensor::vector(&[60.0]));
        let l = vqa_loss(&mut tape, t, g).unwrap();
        assert!(scalar(&tape, l).abs() < 1e-15);
    }

    #[test]
    fn hypothesis_loss_zero_logits_one_hot() {
        let mut tape = Tape::new();
        let y = tape.constant(&DenseTensor::vector(&[0.0, 1.0, 0.0]));
        let g = tape.constant(&DenseTensor::zeros(&[3]));
        let l = hypothesis_loss(&mut tape, g, y).unwrap();
        assert!((scalar(&tape, l) - LN2).abs() < 1e-15);
    }

    #[test]
    fn batch_mean_invariance() {
        let mut tape = Tape::new();
        let y1 = tape.constant(&DenseTensor::vector(&[0.2, 1.0, 0.0]));
        let g1 = tape.constant(&DenseTensor::vector(&[0.3, -0.7, 1.4]));
        let one = hypothesis_loss(&mut tape, g1, y1).unwrap();
        let y2 = tape.stack(&[y1, y1]).unwrap();
        let g2 = tape.stack(&[g1, g1]).unwrap();
        let two = hypothesis_loss(&mut tape, g2, y2).unwrap();
        assert!((scalar(&tape, one) - scalar(&tape, two)).abs() < 1e-15);
    }

    #[test]
    fn qtype_loss_cases() {
        let mut tape = Tape::new();
        let u = tape.constant(&DenseTensor::filled(&[3], 1.0 / 3.0));
        let l = qtype_loss(&mut tape, u, &[2]).unwrap();
        assert!((scalar(&tape, l) - 3f64.ln()).abs() < 1e-15);
        let hot = tape.constant(&DenseTensor::vector(&[0.0, 1.0, 0.0]));
        let l = qtype_loss(&mut tape, hot, &[1]).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);
        let l = qtype_loss(&mut tape, hot, &[0]).unwrap();
        assert_eq!(scalar(&tape, l), -(1e-12f64.ln()));
        assert!(matches!(
            qtype_loss(&mut tape, hot, &[3]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn totals() {
        let w = LossWeights::default();
        assert!((total_loss(vec![0.5], 0.3, 0.2, &w).total - 1.0).abs() < 1e-15);
        let only_vqa = LossWeights::new(0.0, 1.0, 0.0).unwrap();
        assert_eq!(total_loss(vec![0.1, 0.2], 0.3, 0.4, &only_vqa).total, 0.3);
        let doubled = LossWeights::new(2.0, 1.0, 1.0).unwrap();
        assert_eq!(total_loss(vec![0.25], 0.0, 0.0, &doubled).total, 0.5);
    }

    #[test]
    fn weight_validation() {
        assert!(LossWeights::new(-1.0, 1.0, 1.0).is_err());
        assert!(LossWeights::new(0.0, 0.0, 0.0).is_err());
        assert!(LossWeights::new(0.0, 0.0, 1.0).is_ok());
    }

    #[test]
    fn log_line_format() {
        let b = LossBreakdown::new(vec![0.5, 0.25], 0.125, 1.0, &LossWeights::default());
        assert_eq!(
            b.log_line(7),
            "step=7 l_h=0.5,0.25 l_vqa=0.125 l_qt=1 total=1.875"
        );
    }
}
