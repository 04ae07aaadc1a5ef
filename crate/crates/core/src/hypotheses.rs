//! Joint-modality attention mechanisms ("hypotheses").
//!
//! Each kind fuses region features `f_v: [K x D_v]` with the question vector
//! `f_q: [D_h]` into `f_att: [D_f]`:
//!
//! * `TopDown`: `s_k = wᵀ ReLU(W_v f_v[k] ⊙ W_q f_q)`, `α = softmax(s)`,
//!   `f_att = (W_o Σ α_k f_v[k]) ⊙ (W_p f_q)`.
//! * `BilinearLowRank`: `j_k = (U f_v[k]) ⊙ (V f_q)`, `s_k = 1ᵀ j_k`,
//!   `f_att = W_o Σ α_k j_k`.
//! * `Stacked2`: two additive attention hops. Each hop computes
//!   `s_k = wᵀ tanh(W_v f_v[k] + W_q q + b)` and refines the query with
//!   `q ← q + W_c Σ α_k f_v[k]`; `f_att = W_o q` after the second hop.
//!
//! A hypothesis may read only a contiguous window of the visual channels.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{DenseTensor, ReduceKind, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{linear, Bound, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HypothesisKind {
    TopDown,
    BilinearLowRank,
    Stacked2,
}

impl HypothesisKind {
    pub fn name(self) -> &'static str {
        match self {
            HypothesisKind::TopDown => "topdown",
            HypothesisKind::BilinearLowRank => "bilinear_lowrank",
            HypothesisKind::Stacked2 => "stacked2",
        }
    }
}

impl fmt::Display for HypothesisKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HypothesisKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topdown" | "top_down" => Ok(HypothesisKind::TopDown),
            "bilinear_low_rank" | "bilinear_lowrank" | "bilinear" => {
                Ok(HypothesisKind::BilinearLowRank)
            }
            "stacked2" | "stacked" => Ok(HypothesisKind::Stacked2),
            other => Err(Error::Validation(format!(
                "unknown hypothesis kind '{other}'"
            ))),
        }
    }
}

/// Second-level fusion of `f_att` with the question-type feature `f_qt`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionOp {
    /// Element-wise multiplication.
    #[default]
    Ewm,
    /// Element-wise addition.
    Ewa,
}

impl FromStr for FusionOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ewm" | "mul" => Ok(FusionOp::Ewm),
            "ewa" | "add" => Ok(FusionOp::Ewa),
            other => Err(Error::Validation(format!("unknown fusion op '{other}'"))),
        }
    }
}

/// One configured hypothesis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypothesisSpec {
    pub kind: HypothesisKind,
    /// Half-open window `[start, end)` of visual channels this mechanism sees.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<(usize, usize)>,
}

impl HypothesisSpec {
    pub fn new(kind: HypothesisKind) -> Self {
        HypothesisSpec {
            kind,
            channels: None,
        }
    }

    pub fn with_channels(kind: HypothesisKind, start: usize, end: usize) -> Self {
        HypothesisSpec {
            kind,
            channels: Some((start, end)),
        }
    }

    pub fn visible_dim(&self, visual_dim: usize) -> Result<usize> {
        match self.channels {
            None => Ok(visual_dim),
            Some((s, e)) if s < e && e <= visual_dim => Ok(e - s),
            Some((s, e)) => Err(Error::Validation(format!(
                "channel window [{s}, {e}) invalid for {visual_dim} channels"
            ))),
        }
    }

    pub fn label(&self) -> String {
        match self.channels {
            None => self.kind.name().to_string(),
            Some((s, e)) => format!("{}[{s}:{e}]", self.kind.name()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HypothesisDims {
    pub visual: usize,
    pub question: usize,
    pub fusion: usize,
    pub answers: usize,
    /// Width of the attention scoring space.
    pub attention: usize,
    /// Rank of the bilinear factorization.
    pub rank: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct HypothesisOutput {
    pub f_att: Var,
    pub f_att_qt: Var,
    pub logits: Var,
    /// `[K]` for single-hop kinds, `[2 x K]` for `Stacked2`.
    pub attention: Var,
}

fn names(kind: HypothesisKind) -> &'static [&'static str] {
    match kind {
        HypothesisKind::TopDown => &["w_v", "w_q", "w", "w_o", "w_p"],
        HypothesisKind::BilinearLowRank => &["u", "v", "w_o"],
        HypothesisKind::Stacked2 => &[
            "hop0.w_v", "hop0.w_q", "hop0.b", "hop0.w", "hop0.w_c", "hop1.w_v", "hop1.w_q",
            "hop1.b", "hop1.w", "hop1.w_c", "w_o",
        ],
    }
}

/// Adds the mechanism and answer-head parameters of `spec` under `prefix`.
pub fn init_hypothesis<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    spec: &HypothesisSpec,
    dims: &HypothesisDims,
) -> Result<()> {
    let dv = spec.visible_dim(dims.visual)?;
    let (dh, df, da, r) = (dims.question, dims.fusion, dims.attention, dims.rank);
    let mut put = |name: &str, t: DenseTensor| store.insert(format!("{prefix}.{name}"), t);
    let vec_init = |rng: &mut R, n: usize| ParamStore::xavier(rng, 1, n).reshape(&[n]).unwrap();
    match spec.kind {
        HypothesisKind::TopDown => {
            put("w_v", ParamStore::xavier(rng, da, dv));
            put("w_q", ParamStore::xavier(rng, da, dh));
            put("w", vec_init(rng, da));
            put("w_o", ParamStore::xavier(rng, df, dv));
            put("w_p", ParamStore::xavier(rng, df, dh));
        }
        HypothesisKind::BilinearLowRank => {
            put("u", ParamStore::xavier(rng, r, dv));
            put("v", ParamStore::xavier(rng, r, dh));
            put("w_o", ParamStore::xavier(rng, df, r));
        }
        HypothesisKind::Stacked2 => {
            for hop in 0..2 {
                put(&format!("hop{hop}.w_v"), ParamStore::xavier(rng, da, dv));
                put(&format!("hop{hop}.w_q"), ParamStore::xavier(rng, da, dh));
                put(&format!("hop{hop}.b"), DenseTensor::zeros(&[da]));
                put(&format!("hop{hop}.w"), vec_init(rng, da));
                put(&format!("hop{hop}.w_c"), ParamStore::xavier(rng, dh, dv));
            }
            put("w_o", ParamStore::xavier(rng, df, dh));
        }
    }
    put("ans.w", ParamStore::xavier(rng, dims.answers, df));
    put("ans.b", DenseTensor::zeros(&[dims.answers]));
    Ok(())
}

/// Parameter names (without prefix) owned by a hypothesis of `kind`.
pub fn parameter_names(kind: HypothesisKind) -> Vec<String> {
    names(kind)
        .iter()
        .map(|s| s.to_string())
        .chain(["ans.w".to_string(), "ans.b".to_string()])
        .collect()
}

/// Restricts `f_v` to the spec's channel window via a constant selection matrix.
fn visible(tape: &mut Tape, spec: &HypothesisSpec, f_v: Var) -> Result<Var> {
    let dv = tape.shape(f_v)[1];
    match spec.channels {
        None => Ok(f_v),
        Some((s, e)) => {
            spec.visible_dim(dv)?;
            let w = e - s;
            let mut sel = vec![0.0; dv * w];
            for c in 0..w {
                sel[(s + c) * w + c] = 1.0;
            }
            let sel = tape.constant(&DenseTensor::new(&[dv, w], sel)?);
            tape.matmul(f_v, sel)
        }
    }
}

/// `f_v [K x D] · Wᵀ` for `W: [out x D]`, giving `[K x out]`.
fn project_regions(tape: &mut Tape, f_v: Var, w: Var) -> Result<Var> {
    let wt = tape.transpose(w)?;
    tape.matmul(f_v, wt)
}

fn pooled(tape: &mut Tape, alpha: Var, rows: Var) -> Result<Var> {
    tape.matmul(alpha, rows)
}

/// First-level fusion. Returns `(f_att, attention_weights)`.
pub fn first_level_fuse(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    spec: &HypothesisSpec,
    f_v: Var,
    f_q: Var,
) -> Result<(Var, Var)> {
    if tape.shape(f_v).len() != 2 || tape.shape(f_q).len() != 1 {
        return Err(Error::dim(
            "first_level_fuse",
            format!("f_v {:?}, f_q {:?}", tape.shape(f_v), tape.shape(f_q)),
        ));
    }
    let p = |n: &str| bound.var(&format!("{prefix}.{n}"));
    let f_v = visible(tape, spec, f_v)?;
    let k = tape.shape(f_v)[0];
    match spec.kind {
        HypothesisKind::TopDown => {
            let v = project_regions(tape, f_v, p("w_v")?)?;
            let q = tape.matmul(p("w_q")?, f_q)?;
            let q = tape.tile_rows(q, k)?;
            let joint = tape.mul(v, q)?;
            let joint = tape.relu(joint);
            let scores = tape.matmul(joint, p("w")?)?;
            let alpha = tape.softmax(scores);
            let ctx = pooled(tape, alpha, f_v)?;
            let left = tape.matmul(p("w_o")?, ctx)?;
            let right = tape.matmul(p("w_p")?, f_q)?;
            Ok((tape.mul(left, right)?, alpha))
        }
        HypothesisKind::BilinearLowRank => {
            let u = project_regions(tape, f_v, p("u")?)?;
            let v = tape.matmul(p("v")?, f_q)?;
            let v = tape.tile_rows(v, k)?;
            let joint = tape.mul(u, v)?;
            let scores = tape.reduce(joint, ReduceKind::Sum, Some(1))?;
            let alpha = tape.softmax(scores);
            let ctx = pooled(tape, alpha, joint)?;
            Ok((tape.matmul(p("w_o")?, ctx)?, alpha))
        }
        HypothesisKind::Stacked2 => {
            let mut q = f_q;
            let mut alphas = Vec::with_capacity(2);
            for hop in 0..2 {
                let hp = |n: &str| p(&format!("hop{hop}.{n}"));
                let v = project_regions(tape, f_v, hp("w_v")?)?;
                let qa = linear(tape, hp("w_q")?, Some(hp("b")?), q)?;
                let qa = tape.tile_rows(qa, k)?;
                let s = tape.add(v, qa)?;
                let s = tape.tanh(s);
                let scores = tape.matmul(s, hp("w")?)?;
                let alpha = tape.softmax(scores);
                let ctx = pooled(tape, alpha, f_v)?;
                let u = tape.matmul(hp("w_c")?, ctx)?;
                q = tape.add(q, u)?;
                alphas.push(alpha);
            }
            let attention = tape.stack(&alphas)?;
            Ok((tape.matmul(p("w_o")?, q)?, attention))
        }
    }
}

pub fn second_level_fuse(tape: &mut Tape, f_att: Var, f_qt: Var, op: FusionOp) -> Result<Var> {
    if tape.shape(f_att) != tape.shape(f_qt) {
        return Err(Error::dim(
            "second_level_fuse",
            format!(
                "f_att {:?} vs f_qt {:?}",
                tape.shape(f_att),
                tape.shape(f_qt)
            ),
        ));
    }
    match op {
        FusionOp::Ewm => tape.mul(f_att, f_qt),
        FusionOp::Ewa => tape.add(f_att, f_qt),
    }
}

/// Pre-sigmoid answer logits `W f + b`.
pub fn answer_logits(tape: &mut Tape, bound: &Bound, prefix: &str, features: Var) -> Result<Var> {
    let w = bound.var(&format!("{prefix}.ans.w"))?;
    let b = bound.var(&format!("{prefix}.ans.b"))?;
    linear(tape, w, Some(b), features)
}

/// Full per-hypothesis pass. With `f_qt = None` the second-level fusion is skipped
/// and the answer head reads `f_att` directly.
pub fn run_hypothesis(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    spec: &HypothesisSpec,
    f_v: Var,
    f_q: Var,
    f_qt: Option<Var>,
    op: FusionOp,
) -> Result<HypothesisOutput> {
    let (f_att, attention) = first_level_fuse(tape, bound, prefix, spec, f_v, f_q)?;
    let f_att_qt = match f_qt {
        Some(f_qt) => second_level_fuse(tape, f_att, f_qt, op)?,
        None => f_att,
    };
    let logits = answer_logits(tape, bound, prefix, f_att_qt)?;
    Ok(HypothesisOutput {
        f_att,
        f_att_qt,
        logits,
        attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> HypothesisDims {
        HypothesisDims {
            visual: 4,
            question: 5,
            fusion: 6,
            answers: 3,
            attention: 4,
            rank: 3,
        }
    }

    fn setup(spec: &HypothesisSpec) -> ParamStore {
        let mut store = ParamStore::new();
        init_hypothesis(
            &mut store,
            &mut ChaCha8Rng::seed_from_u64(11),
            "hyp0",
            spec,
            &dims(),
        )
        .unwrap();
        store
    }

    fn attention_for(spec: &HypothesisSpec, f_v: &DenseTensor) -> Vec<f64> {
        let store = setup(spec);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let v = tape.constant(f_v);
        let q = tape.constant(&DenseTensor::vector(&[0.2, -0.4, 0.1, 0.9, -0.3]));
        let (_, a) = first_level_fuse(&mut tape, &bound, "hyp0", spec, v, q).unwrap();
        tape.values(a).to_vec()
    }

    const KINDS: [HypothesisKind; 3] = [
        HypothesisKind::TopDown,
        HypothesisKind::BilinearLowRank,
        HypothesisKind::Stacked2,
    ];

    #[test]
    fn single_region_gets_all_attention() {
        let f_v = DenseTensor::new(&[1, 4], vec![0.3, 0.1, -0.2, 0.5]).unwrap();
        for kind in KINDS {
            for a in attention_for(&HypothesisSpec::new(kind), &f_v) {
                assert_eq!(a, 1.0);
            }
        }
    }

    #[test]
    fn identical_regions_get_uniform_attention() {
        let row = [0.3, 0.1, -0.2, 0.5];
        let f_v =
            DenseTensor::new(&[3, 4], row.iter().cycle().take(12).copied().collect()).unwrap();
        for kind in KINDS {
            for a in attention_for(&HypothesisSpec::new(kind), &f_v) {
                assert!((a - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn second_level_ops() {
        let mut tape = Tape::new();
        let a = tape.constant(&DenseTensor::vector(&[1.0, 2.0]));
        let b = tape.constant(&DenseTensor::vector(&[3.0, 4.0]));
        let m = second_level_fuse(&mut tape, a, b, FusionOp::Ewm).unwrap();
        assert_eq!(tape.values(m), &[3.0, 8.0]);
        let ones = tape.constant(&DenseTensor::ones(&[2]));
        let m = second_level_fuse(&mut tape, a, ones, FusionOp::Ewm).unwrap();
        assert_eq!(tape.values(m), &[1.0, 2.0]);
        let zeros = tape.constant(&DenseTensor::zeros(&[2]));
        let s = second_level_fuse(&mut tape, a, zeros, FusionOp::Ewa).unwrap();
        assert_eq!(tape.values(s), &[1.0, 2.0]);
        let c = tape.constant(&DenseTensor::zeros(&[3]));
        assert!(second_level_fuse(&mut tape, a, c, FusionOp::Ewa).is_err());
    }

    #[test]
    fn zero_answer_head_gives_zero_logits() {
        let mut store = setup(&HypothesisSpec::new(HypothesisKind::TopDown));
        store.get_mut("hyp0.ans.w").unwrap().values_mut().fill(0.0);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let f = tape.constant(&DenseTensor::vector(&[1.0, -1.0, 2.0, 0.0, 3.0, 0.5]));
        let g = answer_logits(&mut tape, &bound, "hyp0", f).unwrap();
        assert_eq!(tape.values(g), &[0.0; 3]);
        let s = tape.sigmoid(g);
        assert_eq!(tape.values(s), &[0.5; 3]);
    }

    #[test]
    fn channel_window_validation() {
        let spec = HypothesisSpec::with_channels(HypothesisKind::TopDown, 2, 4);
        assert_eq!(spec.visible_dim(4).unwrap(), 2);
        assert!(HypothesisSpec::with_channels(HypothesisKind::TopDown, 3, 5)
            .visible_dim(4)
            .is_err());
        assert_eq!(spec.label(), "topdown[2:4]");
    }

    #[test]
    fn kinds_parse() {
        for k in KINDS {
            assert_eq!(k.name().parse::<HypothesisKind>().unwrap(), k);
        }
        assert!("ban".parse::<HypothesisKind>().is_err());
        assert_eq!("EWA".parse::<FusionOp>().unwrap(), FusionOp::Ewa);
    }
}
