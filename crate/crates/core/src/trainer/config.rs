use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypotheses::{FusionOp, HypothesisKind, HypothesisSpec};
use crate::interaction::InteractionMode;
use crate::losses::LossWeights;

/// Source of the type distribution that weights the answer space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TypeSource {
    /// The question-type head's softmax output.
    #[default]
    Predicted,
    /// One-hot encoding of the labelled type.
    Groundtruth,
}

/// Widths of every layer. `fusion_dim` is shared by `f_att` and `f_qt`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub fusion_dim: usize,
    pub attention_dim: usize,
    pub low_rank: usize,
    pub max_q_len: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            embed_dim: 32,
            hidden_dim: 48,
            fusion_dim: 48,
            attention_dim: 32,
            low_rank: 16,
            max_q_len: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss_weights: LossWeights,
    pub fusion: FusionOp,
    /// Second-level fusion with the type feature; off feeds `f_att` straight to the answer heads.
    pub type_fusion: bool,
    /// Weight the VQA loss (and inference scores) by the type/answer prior.
    pub prior: bool,
    pub type_source: TypeSource,
    pub hypotheses: Vec<HypothesisSpec>,
    pub interaction: InteractionMode,
    /// Softmax `w_mil` over hypotheses before gating.
    pub mil_softmax: bool,
    /// Block gradients from the VQA loss into the type distribution used for weighting.
    pub stop_gradient_h: bool,
    /// Multiply inference scores by the awareness weights.
    pub inference_weighting: bool,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Log a loss line every this many optimizer steps.
    pub log_interval: usize,
    pub dims: ModelDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 30,
            loss_weights: LossWeights::default(),
            fusion: FusionOp::Ewm,
            type_fusion: true,
            prior: true,
            type_source: TypeSource::Predicted,
            hypotheses: vec![
                HypothesisSpec::new(HypothesisKind::TopDown),
                HypothesisSpec::new(HypothesisKind::BilinearLowRank),
            ],
            interaction: InteractionMode::Learned,
            mil_softmax: false,
            stop_gradient_h: false,
            inference_weighting: true,
            clip_norm: Some(5.0),
            log_interval: 10,
            dims: ModelDims::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be >= 1".into()));
        }
        if self.log_interval == 0 {
            return Err(Error::Validation("log interval must be >= 1".into()));
        }
        if self.hypotheses.is_empty() {
            return Err(Error::Validation(
                "at least one hypothesis is required".into(),
            ));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Validation(format!("clip norm must be > 0, got {c}")));
            }
        }
        let d = &self.dims;
        if [
            d.embed_dim,
            d.hidden_dim,
            d.fusion_dim,
            d.attention_dim,
            d.low_rank,
            d.max_q_len,
        ]
        .contains(&0)
        {
            return Err(Error::Validation("model widths must be >= 1".into()));
        }
        self.loss_weights.validate()
    }

    /// Mode actually used: a single hypothesis always runs in `Single`.
    pub fn effective_interaction(&self) -> InteractionMode {
        if self.hypotheses.len() == 1 {
            InteractionMode::Single
        } else {
            self.interaction
        }
    }
}
