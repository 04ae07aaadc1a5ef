#![allow(dead_code)]

use milqt::data::{gen_synthetic, DatasetBundle, SynthRule, SynthShape};
use milqt::trainer::{ModelDims, TrainConfig};

pub const TOY_SHAPE: SynthShape = SynthShape {
    samples: 12,
    qtypes: 3,
    answers: 5,
    regions: 4,
    visual_dim: 6,
};

pub fn toy_bundle(seed: u64) -> DatasetBundle {
    gen_synthetic(seed, TOY_SHAPE, &SynthRule::default(), "toy.features").unwrap()
}

pub fn toy_dims() -> ModelDims {
    ModelDims {
        embed_dim: 4,
        hidden_dim: 5,
        fusion_dim: 6,
        attention_dim: 4,
        low_rank: 3,
        max_q_len: 12,
    }
}

pub fn toy_config() -> TrainConfig {
    TrainConfig {
        dims: toy_dims(),
        epochs: 1,
        batch_size: 4,
        log_interval: 1,
        ..TrainConfig::default()
    }
}

/// Column-normalized co-occurrence counts written out longhand.
pub fn brute_force_prior(bundle: &DatasetBundle) -> Vec<Vec<f64>> {
    let (p, a) = (bundle.num_qtypes(), bundle.num_answers());
    let mut out = vec![vec![0.0; a]; p];
    for ans in 0..a {
        let mut column = vec![0u64; p];
        for s in &bundle.samples {
            let mut best = 0;
            for (i, &(_, sc)) in s.answer_scores.iter().enumerate() {
                let (b_ans, b_sc) = s.answer_scores[best];
                let (c_ans, _) = s.answer_scores[i];
                if sc > b_sc || (sc == b_sc && c_ans < b_ans) {
                    best = i;
                }
            }
            if s.answer_scores[best].0 == ans {
                column[s.qtype] += 1;
            }
        }
        let total: u64 = column.iter().sum();
        for t in 0..p {
            out[t][ans] = if total == 0 {
                1.0 / p as f64
            } else {
                column[t] as f64 / total as f64
            };
        }
    }
    out
}
