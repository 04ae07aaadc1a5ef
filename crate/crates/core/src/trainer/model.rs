//! The assembled network: question encoder, question-type head, the
//! configured hypotheses, the interaction module and the loss graph.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ModelDims, TrainConfig, TypeSource};
use crate::data::{build_soft_target, DatasetBundle, Labels, SampleRecord, Vocabulary};
use crate::diffcore::{DenseTensor, Tape, Var};
use crate::encoders::{
    embed_question, gru_encode, init_embedding, qtype_forward, GruParams, QTypeHead, EMBEDDING,
};
use crate::error::{Error, Result};
use crate::hypotheses::{
    init_hypothesis, run_hypothesis, FusionOp, HypothesisDims, HypothesisOutput, HypothesisSpec,
};
use crate::interaction::{
    averaging_baseline, mix, InteractionMode, InteractionWeights, MIL_WEIGHTS,
};
use crate::losses::{
    combine, hypothesis_loss, qtype_loss, vqa_loss, weight_targets, LossBreakdown, LossWeights,
};
use crate::params::{Bound, ParamStore};
use crate::prior::{awareness, compute_prior, one_hot, PriorMatrix};

const GRU: &str = "gru";
const QTYPE_HEAD: &str = "qt";

pub fn hypothesis_prefix(j: usize) -> String {
    format!("hyp{j}")
}

/// Everything needed to rebuild parameter shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub vocab_size: usize,
    pub qtypes: usize,
    pub answers: usize,
    pub visual_dim: usize,
    pub dims: ModelDims,
    pub hypotheses: Vec<HypothesisSpec>,
    pub fusion: FusionOp,
    pub type_fusion: bool,
    pub interaction: InteractionMode,
    pub mil_softmax: bool,
}

impl ModelSpec {
    pub fn hypothesis_dims(&self) -> HypothesisDims {
        HypothesisDims {
            visual: self.visual_dim,
            question: self.dims.hidden_dim,
            fusion: self.dims.fusion_dim,
            answers: self.answers,
            attention: self.dims.attention_dim,
            rank: self.dims.low_rank,
        }
    }

    pub fn hypothesis_names(&self) -> Vec<String> {
        self.hypotheses.iter().map(HypothesisSpec::label).collect()
    }
}

/// Settings that shape the training loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub weights: LossWeights,
    pub prior: bool,
    pub type_source: TypeSource,
    pub stop_gradient_h: bool,
}

impl From<&TrainConfig> for LossOptions {
    fn from(c: &TrainConfig) -> Self {
        LossOptions {
            weights: c.loss_weights,
            prior: c.prior,
            type_source: c.type_source,
            stop_gradient_h: c.stop_gradient_h,
        }
    }
}

/// Settings that shape answer selection at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub prior: bool,
    pub type_source: TypeSource,
    pub inference_weighting: bool,
}

impl From<&TrainConfig> for InferenceOptions {
    fn from(c: &TrainConfig) -> Self {
        InferenceOptions {
            prior: c.prior,
            type_source: c.type_source,
            inference_weighting: c.inference_weighting,
        }
    }
}

/// Forward-pass handles for one question.
#[derive(Debug, Clone)]
pub struct SampleGraph {
    pub f_q: Var,
    pub h: Var,
    pub f_qt: Var,
    pub hypotheses: Vec<HypothesisOutput>,
    /// `[A x J]` hypothesis logits.
    pub g: Var,
    /// Combined prediction (logits).
    pub rho: Var,
}

/// Loss handles for one question.
#[derive(Debug, Clone)]
pub struct SampleLoss {
    pub hypotheses: Vec<Var>,
    pub vqa: Var,
    pub qtype: Var,
    pub total: Var,
    pub m_awn: Var,
}

impl SampleLoss {
    pub fn breakdown(&self, tape: &Tape, weights: &LossWeights) -> LossBreakdown {
        LossBreakdown::new(
            self.hypotheses
                .iter()
                .map(|&v| tape.scalar_value(v))
                .collect(),
            tape.scalar_value(self.vqa),
            tape.scalar_value(self.qtype),
            weights,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
    /// Computed from the training split only.
    pub prior: PriorMatrix,
    pub vocab: Vocabulary,
    pub answers: Labels,
    pub qtypes: Labels,
    /// Inference settings the model was trained with.
    pub inference: InferenceOptions,
}

/// Visual width shared by every sample of the bundle.
pub fn visual_dim_of(bundle: &DatasetBundle) -> Result<usize> {
    let first = bundle
        .samples
        .first()
        .ok_or_else(|| Error::Validation("empty dataset".into()))?;
    let f = bundle.visual(first)?;
    if f.rank() != 2 {
        return Err(Error::dim(
            "visual",
            format!("feature shape {:?}", f.shape()),
        ));
    }
    Ok(f.shape()[1])
}

impl Model {
    /// Fresh parameters (seeded by `config.seed`) and the prior of `train`.
    pub fn init(config: &TrainConfig, train: &DatasetBundle) -> Result<Self> {
        config.validate()?;
        train.validate()?;
        let spec = ModelSpec {
            vocab_size: train.vocab.len(),
            qtypes: train.num_qtypes(),
            answers: train.num_answers(),
            visual_dim: visual_dim_of(train)?,
            dims: config.dims,
            hypotheses: config.hypotheses.clone(),
            fusion: config.fusion,
            type_fusion: config.type_fusion,
            interaction: config.effective_interaction(),
            mil_softmax: config.mil_softmax,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let d = &spec.dims;
        init_embedding(&mut params, &mut rng, spec.vocab_size, d.embed_dim);
        GruParams::init(&mut params, &mut rng, GRU, d.embed_dim, d.hidden_dim);
        QTypeHead::init(
            &mut params,
            &mut rng,
            QTYPE_HEAD,
            d.hidden_dim,
            d.fusion_dim,
            spec.qtypes,
        );
        let hd = spec.hypothesis_dims();
        for (j, h) in spec.hypotheses.iter().enumerate() {
            init_hypothesis(&mut params, &mut rng, &hypothesis_prefix(j), h, &hd)?;
        }
        if spec.interaction == InteractionMode::Learned {
            let w = InteractionWeights::uniform(spec.qtypes, spec.hypotheses.len());
            params.insert(MIL_WEIGHTS, w.w);
        }
        Ok(Model {
            spec,
            params,
            prior: compute_prior(train)?,
            vocab: train.vocab.clone(),
            answers: train.answers.clone(),
            qtypes: train.qtypes.clone(),
            inference: InferenceOptions::from(config),
        })
    }

    /// Checks that `bundle` is indexed with this model's tables and feature width.
    pub fn check_compatible(&self, bundle: &DatasetBundle) -> Result<()> {
        if bundle.vocab != self.vocab
            || bundle.answers != self.answers
            || bundle.qtypes != self.qtypes
        {
            return Err(Error::Validation(
                "dataset vocabularies differ from the model's (word, answer or question-type table)".into(),
            ));
        }
        if bundle.max_q_len != self.spec.dims.max_q_len {
            return Err(Error::Validation(format!(
                "dataset question length {} differs from the model's {}",
                bundle.max_q_len, self.spec.dims.max_q_len
            )));
        }
        Ok(())
    }

    pub fn interaction_weights(&self) -> Option<InteractionWeights> {
        self.params
            .get(MIL_WEIGHTS)
            .map(|w| InteractionWeights { w: w.clone() })
    }

    /// Forward pass of one question. `f_v` enters as a constant.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: &[usize],
        f_v: &DenseTensor,
    ) -> Result<SampleGraph> {
        if f_v.rank() != 2 || f_v.shape()[1] != self.spec.visual_dim {
            return Err(Error::dim(
                "forward",
                format!(
                    "features {:?}, expected [K x {}]",
                    f_v.shape(),
                    self.spec.visual_dim
                ),
            ));
        }
        let table = bound.var(EMBEDDING)?;
        let f_w = embed_question(tape, tokens, table)?;
        let gru = GruParams::bind(bound, GRU)?;
        let f_q = gru_encode(tape, f_w, &gru)?;
        let head = QTypeHead::bind(bound, QTYPE_HEAD)?;
        let (h, f_qt) = qtype_forward(tape, f_q, &head)?;
        let fv = tape.constant(f_v);

        let type_feature = self.spec.type_fusion.then_some(f_qt);
        let mut hypotheses = Vec::with_capacity(self.spec.hypotheses.len());
        for (j, hs) in self.spec.hypotheses.iter().enumerate() {
            hypotheses.push(run_hypothesis(
                tape,
                bound,
                &hypothesis_prefix(j),
                hs,
                fv,
                f_q,
                type_feature,
                self.spec.fusion,
            )?);
        }
        let logits: Vec<Var> = hypotheses.iter().map(|o| o.logits).collect();
        let stacked = tape.stack(&logits)?;
        let g = tape.transpose(stacked)?;
        let rho = match self.spec.interaction {
            InteractionMode::Single => logits[0],
            InteractionMode::Averaging => averaging_baseline(tape, g)?,
            InteractionMode::Learned => {
                let w = bound.var(MIL_WEIGHTS)?;
                mix(tape, g, w, &self.prior, self.spec.mil_softmax)?
            }
        };
        Ok(SampleGraph {
            f_q,
            h,
            f_qt,
            hypotheses,
            g,
            rho,
        })
    }

    /// Type distribution used to weight answers, per the configured source.
    fn weighting_types(
        &self,
        tape: &mut Tape,
        graph: &SampleGraph,
        qtype: usize,
        source: TypeSource,
        detach: bool,
    ) -> Var {
        match source {
            TypeSource::Predicted if detach => tape.detach(graph.h),
            TypeSource::Predicted => graph.h,
            TypeSource::Groundtruth => tape.constant(&one_hot(qtype, self.spec.qtypes)),
        }
    }

    pub fn awareness_for(
        &self,
        tape: &mut Tape,
        graph: &SampleGraph,
        qtype: usize,
        prior_on: bool,
        source: TypeSource,
        detach: bool,
    ) -> Result<Var> {
        if prior_on {
            let h = self.weighting_types(tape, graph, qtype, source, detach);
            awareness(tape, h, &self.prior)
        } else {
            Ok(tape.constant(&DenseTensor::ones(&[self.spec.answers])))
        }
    }

    /// Multi-task loss of one question on top of its forward graph.
    pub fn sample_loss(
        &self,
        tape: &mut Tape,
        graph: &SampleGraph,
        sample: &SampleRecord,
        opts: &LossOptions,
    ) -> Result<SampleLoss> {
        let y = tape.constant(&build_soft_target(sample, self.spec.answers)?);
        let hypotheses = graph
            .hypotheses
            .iter()
            .map(|o| hypothesis_loss(tape, o.logits, y))
            .collect::<Result<Vec<_>>>()?;
        let m_awn = self.awareness_for(
            tape,
            graph,
            sample.qtype,
            opts.prior,
            opts.type_source,
            opts.stop_gradient_h,
        )?;
        let (y_hat, g_hat) = weight_targets(tape, m_awn, y, graph.rho)?;
        let vqa = vqa_loss(tape, y_hat, g_hat)?;
        let qtype = qtype_loss(tape, graph.h, &[sample.qtype])?;
        let total = combine(tape, &hypotheses, Some(vqa), Some(qtype), &opts.weights)?;
        Ok(SampleLoss {
            hypotheses,
            vqa,
            qtype,
            total,
            m_awn,
        })
    }

    /// Answer scores used for prediction: `m_awn ⊙ σ(ρ)`, or `σ(ρ)` without weighting.
    pub fn answer_scores(
        &self,
        tape: &mut Tape,
        graph: &SampleGraph,
        qtype: usize,
        opts: &InferenceOptions,
    ) -> Result<Var> {
        let probs = tape.sigmoid(graph.rho);
        if opts.prior && opts.inference_weighting {
            let m = self.awareness_for(tape, graph, qtype, true, opts.type_source, true)?;
            tape.mul(m, probs)
        } else {
            Ok(probs)
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }
}
