//! Question encoding (embedding lookup and GRU), the question-type head and
//! frozen visual features.

use rand::Rng;

use crate::data::{DatasetBundle, SampleRecord, PAD};
use crate::diffcore::{DenseTensor, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{linear, Bound, ParamStore};

pub const EMBEDDING: &str = "embed";

/// Seeded random word table of shape `[vocab x width]`; the `PAD` row is zero.
pub fn init_embedding<R: Rng>(store: &mut ParamStore, rng: &mut R, vocab: usize, width: usize) {
    let mut values: Vec<f64> = (0..vocab * width)
        .map(|_| rng.gen_range(-0.1..0.1))
        .collect();
    values[PAD * width..(PAD + 1) * width].fill(0.0);
    store.insert(
        EMBEDDING,
        DenseTensor::new(&[vocab, width], values).expect("embedding extents"),
    );
}

/// `[T x D_w]` word features; `PAD` positions are zero rows.
pub fn embed_question(tape: &mut Tape, tokens: &[usize], table: Var) -> Result<Var> {
    tape.embedding(table, tokens, PAD)
}

/// Gate weights of a single-layer GRU: `w_*: [D_h x D_w]`, `u_*: [D_h x D_h]`, `b_*: [D_h]`.
#[derive(Debug, Clone, Copy)]
pub struct GruParams {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

const GRU_NAMES: [&str; 9] = [
    "w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h",
];

impl GruParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        input: usize,
        hidden: usize,
    ) {
        for gate in ["z", "r", "h"] {
            store.insert(
                format!("{prefix}.w_{gate}"),
                ParamStore::xavier(rng, hidden, input),
            );
            store.insert(
                format!("{prefix}.u_{gate}"),
                ParamStore::xavier(rng, hidden, hidden),
            );
            store.insert(format!("{prefix}.b_{gate}"), DenseTensor::zeros(&[hidden]));
        }
    }

    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        let v = |n: &str| bound.var(&format!("{prefix}.{n}"));
        Ok(GruParams {
            w_z: v(GRU_NAMES[0])?,
            u_z: v(GRU_NAMES[1])?,
            b_z: v(GRU_NAMES[2])?,
            w_r: v(GRU_NAMES[3])?,
            u_r: v(GRU_NAMES[4])?,
            b_r: v(GRU_NAMES[5])?,
            w_h: v(GRU_NAMES[6])?,
            u_h: v(GRU_NAMES[7])?,
            b_h: v(GRU_NAMES[8])?,
        })
    }

    fn hidden(&self, tape: &Tape) -> usize {
        tape.shape(self.b_z)[0]
    }
}

/// Runs the GRU over the rows of `f_w` from a zero state and returns the last state.
///
/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `ĥ = tanh(W_h x + U_h (r ⊙ h) + b_h)`, `h' = (1 - z) ⊙ h + z ⊙ ĥ`.
pub fn gru_encode(tape: &mut Tape, f_w: Var, p: &GruParams) -> Result<Var> {
    let shape = tape.shape(f_w).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::dim("gru_encode", format!("input shape {shape:?}")));
    }
    let mut h = tape.constant(&DenseTensor::zeros(&[p.hidden(tape)]));
    for t in 0..shape[0] {
        let x = tape.select_row(f_w, t)?;
        let z = {
            let a = linear(tape, p.w_z, Some(p.b_z), x)?;
            let b = tape.matmul(p.u_z, h)?;
            let s = tape.add(a, b)?;
            tape.sigmoid(s)
        };
        let r = {
            let a = linear(tape, p.w_r, Some(p.b_r), x)?;
            let b = tape.matmul(p.u_r, h)?;
            let s = tape.add(a, b)?;
            tape.sigmoid(s)
        };
        let cand = {
            let a = linear(tape, p.w_h, Some(p.b_h), x)?;
            let rh = tape.mul(r, h)?;
            let b = tape.matmul(p.u_h, rh)?;
            let s = tape.add(a, b)?;
            tape.tanh(s)
        };
        // (1 - z) ⊙ h + z ⊙ ĥ
        let keep = {
            let neg = tape.scale(z, -1.0);
            let one_minus = tape.shift(neg, 1.0);
            tape.mul(one_minus, h)?
        };
        let write = tape.mul(z, cand)?;
        h = tape.add(keep, write)?;
    }
    Ok(h)
}

/// Two fully connected layers: `D_h -> D_f` with ReLU (the type feature `f_qt`),
/// then `D_f -> P` followed by a softmax (the type distribution `h`).
#[derive(Debug, Clone, Copy)]
pub struct QTypeHead {
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

impl QTypeHead {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        hidden: usize,
        fusion: usize,
        qtypes: usize,
    ) {
        store.insert(
            format!("{prefix}.fc1.w"),
            ParamStore::xavier(rng, fusion, hidden),
        );
        store.insert(format!("{prefix}.fc1.b"), DenseTensor::zeros(&[fusion]));
        store.insert(
            format!("{prefix}.fc2.w"),
            ParamStore::xavier(rng, qtypes, fusion),
        );
        store.insert(format!("{prefix}.fc2.b"), DenseTensor::zeros(&[qtypes]));
    }

    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(QTypeHead {
            fc1_w: bound.var(&format!("{prefix}.fc1.w"))?,
            fc1_b: bound.var(&format!("{prefix}.fc1.b"))?,
            fc2_w: bound.var(&format!("{prefix}.fc2.w"))?,
            fc2_b: bound.var(&format!("{prefix}.fc2.b"))?,
        })
    }
}

/// Returns `(h, f_qt)`.
pub fn qtype_forward(tape: &mut Tape, f_q: Var, head: &QTypeHead) -> Result<(Var, Var)> {
    let pre = linear(tape, head.fc1_w, Some(head.fc1_b), f_q)?;
    let f_qt = tape.relu(pre);
    let logits = linear(tape, head.fc2_w, Some(head.fc2_b), f_qt)?;
    let h = tape.softmax(logits);
    Ok((h, f_qt))
}

/// Region features of `sample`, exactly as stored, for use as a frozen input.
pub fn load_visual(bundle: &DatasetBundle, sample: &SampleRecord) -> Result<DenseTensor> {
    bundle.visual(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gru_store(d_w: usize, d_h: usize, zero: bool) -> ParamStore {
        let mut s = ParamStore::new();
        GruParams::init(&mut s, &mut ChaCha8Rng::seed_from_u64(1), "gru", d_w, d_h);
        if zero {
            for (_, t) in s.iter_mut() {
                t.values_mut().fill(0.0);
            }
        }
        s
    }

    #[test]
    fn zero_gru_stays_at_zero() {
        let store = gru_store(3, 4, true);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let p = GruParams::bind(&bound, "gru").unwrap();
        let x =
            tape.constant(&DenseTensor::new(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.1, 0.2]).unwrap());
        let h = gru_encode(&mut tape, x, &p).unwrap();
        assert_eq!(tape.values(h), &[0.0; 4]);
    }

    #[test]
    fn zero_input_zero_bias_single_step() {
        let store = gru_store(3, 4, false);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let p = GruParams::bind(&bound, "gru").unwrap();
        let x = tape.constant(&DenseTensor::zeros(&[1, 3]));
        let h = gru_encode(&mut tape, x, &p).unwrap();
        assert_eq!(tape.values(h), &[0.0; 4]);
    }

    #[test]
    fn embedding_rows_follow_table() {
        let mut store = ParamStore::new();
        init_embedding(&mut store, &mut ChaCha8Rng::seed_from_u64(2), 5, 3);
        let table = store.get(EMBEDDING).unwrap().clone();
        let mut tape = Tape::new();
        let tv = tape.param(&table);
        let e = embed_question(&mut tape, &[0, 0, 0], tv).unwrap();
        assert!(tape.values(e).iter().all(|&v| v == 0.0));
        let e = embed_question(&mut tape, &[4, 2, 4], tv).unwrap();
        let vals = tape.values(e);
        assert_eq!(&vals[0..3], &table.values()[12..15]);
        assert_eq!(&vals[3..6], &table.values()[6..9]);
        assert_eq!(&vals[0..3], &vals[6..9]);
    }

    #[test]
    fn zero_head_gives_uniform_types() {
        for p in [3, 12] {
            let mut store = ParamStore::new();
            QTypeHead::init(&mut store, &mut ChaCha8Rng::seed_from_u64(0), "qt", 4, 6, p);
            for (_, t) in store.iter_mut() {
                t.values_mut().fill(0.0);
            }
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let head = QTypeHead::bind(&bound, "qt").unwrap();
            let f_q = tape.constant(&DenseTensor::vector(&[0.3, -0.2, 0.9, 1.0]));
            let (h, f_qt) = qtype_forward(&mut tape, f_q, &head).unwrap();
            assert_eq!(tape.shape(h), &[p]);
            assert_eq!(tape.shape(f_qt), &[6]);
            for &x in tape.values(h) {
                assert!((x - 1.0 / p as f64).abs() < 1e-15);
            }
        }
    }
}
