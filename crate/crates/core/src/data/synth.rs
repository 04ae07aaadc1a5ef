//! Seeded synthetic question/image/answer corpus.
//!
//! Each question type owns a block of candidate answers. One region of each
//! image carries an indicator value of 1.0 on a single channel; which channel
//! fires selects the answer inside the type's block. The remaining entries are
//! uniform noise below [`SynthRule::noise`]. Questions are short templates
//! whose opening word identifies the question type.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{DatasetBundle, FeatureRef, FeatureStore, SampleRecord};
use super::vocab::{tokenize, tokenize_and_pad, Labels, Vocabulary};
use crate::diffcore::DenseTensor;
use crate::error::{Error, Result};

const OPENERS: [&str; 12] = [
    "is", "how", "what", "where", "who", "which", "why", "when", "does", "can", "are", "do",
];
const FILLER: [&str; 10] = [
    "the", "red", "small", "dog", "table", "near", "person", "there", "this", "picture",
];
const VQA_TYPES: [&str; 3] = ["yes_no", "number", "other"];
const TDIUC_TYPES: [&str; 12] = [
    "object_presence",
    "subordinate_object_recognition",
    "counting",
    "color",
    "other_attributes",
    "activity_recognition",
    "sport_recognition",
    "positional_reasoning",
    "scene_classification",
    "sentiment_understanding",
    "object_utilities_and_affordances",
    "absurd",
];

/// Which channels carry a type's indicator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChannelLayout {
    /// Every type writes its indicator starting at channel 0.
    #[default]
    Shared,
    /// Even types use the lower half of the channels, odd types the upper half.
    /// Types sharing a half get disjoint channel ranges.
    SplitByType,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthRule {
    /// Each type's block also admits the first answer of the next type's block.
    pub overlap: bool,
    pub layout: ChannelLayout,
    /// Upper bound of the background noise; must stay below the indicator value 1.0.
    pub noise: f64,
    /// Under `SplitByType`, also plant an indicator of a random type from the
    /// other half, so neither half alone reveals the question's type.
    pub decoy: bool,
}

impl Default for SynthRule {
    fn default() -> Self {
        SynthRule {
            overlap: false,
            layout: ChannelLayout::Shared,
            noise: 0.1,
            decoy: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthShape {
    pub samples: usize,
    pub qtypes: usize,
    pub answers: usize,
    pub regions: usize,
    pub visual_dim: usize,
}

/// Answer blocks and channel offsets implied by a rule at a given shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleTable {
    /// `blocks[p]` lists the answers type `p` may produce, in indicator order.
    pub blocks: Vec<Vec<usize>>,
    /// First indicator channel of each type.
    pub channel_base: Vec<usize>,
}

impl RuleTable {
    pub fn new(shape: &SynthShape, rule: &SynthRule) -> Result<Self> {
        let (p, a, d) = (shape.qtypes, shape.answers, shape.visual_dim);
        if p < 2 || a < 2 || shape.regions < 2 || d < 2 || shape.samples < 2 {
            return Err(Error::Validation(
                "synthetic extents must all be >= 2".into(),
            ));
        }
        if a < p {
            return Err(Error::Validation(format!("need A >= P, got A={a}, P={p}")));
        }
        if !(0.0..1.0).contains(&rule.noise) {
            return Err(Error::Validation("noise must lie in [0, 1)".into()));
        }
        let mut blocks = Vec::with_capacity(p);
        let mut start = 0;
        for t in 0..p {
            let len = a / p + usize::from(t < a % p);
            blocks.push((start..start + len).collect::<Vec<_>>());
            start += len;
        }
        if rule.overlap {
            let firsts: Vec<usize> = blocks.iter().map(|b| b[0]).collect();
            for (t, block) in blocks.iter_mut().enumerate() {
                block.push(firsts[(t + 1) % p]);
            }
        }
        let half = d / 2;
        let channel_base: Vec<usize> = match rule.layout {
            ChannelLayout::Shared => vec![0; p],
            ChannelLayout::SplitByType => {
                // Types of one parity are stacked side by side inside their half.
                let mut next = [0, half];
                (0..p)
                    .map(|t| {
                        let base = next[t % 2];
                        next[t % 2] += blocks[t].len();
                        base
                    })
                    .collect()
            }
        };
        for (t, block) in blocks.iter().enumerate() {
            let limit = match rule.layout {
                ChannelLayout::Shared => d,
                ChannelLayout::SplitByType => half * (1 + t % 2),
            };
            if channel_base[t] + block.len() > limit {
                return Err(Error::Validation(format!(
                    "visual_dim {d} leaves too few indicator channels for {p} types with blocks of {} answers",
                    block.len()
                )));
            }
        }
        Ok(RuleTable {
            blocks,
            channel_base,
        })
    }

    pub fn answer(&self, qtype: usize, slot: usize) -> usize {
        self.blocks[qtype][slot]
    }

    /// Reads the planted slot back out of a feature matrix: the strongest
    /// indicator channel among those the type owns.
    pub fn decode(&self, qtype: usize, features: &DenseTensor) -> usize {
        let (k, d) = (features.shape()[0], features.shape()[1]);
        let base = self.channel_base[qtype];
        let mut best = (0, f64::NEG_INFINITY);
        for slot in 0..self.blocks[qtype].len() {
            for r in 0..k {
                let v = features.values()[r * d + base + slot];
                if v > best.1 {
                    best = (slot, v);
                }
            }
        }
        best.0
    }
}

pub fn qtype_names(p: usize) -> Vec<String> {
    match p {
        3 => VQA_TYPES.iter().map(|s| s.to_string()).collect(),
        12 => TDIUC_TYPES.iter().map(|s| s.to_string()).collect(),
        _ => (0..p).map(|t| format!("type{t}")).collect(),
    }
}

fn opener(qtype: usize) -> String {
    OPENERS
        .get(qtype)
        .map_or_else(|| format!("kind{qtype}"), |s| s.to_string())
}

/// Generates a bundle whose features live in the in-memory store under `feature_file`.
pub fn gen_synthetic(
    seed: u64,
    shape: SynthShape,
    rule: &SynthRule,
    feature_file: &str,
) -> Result<DatasetBundle> {
    let table = RuleTable::new(&shape, rule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut vocab = Vocabulary::new();
    for t in 0..shape.qtypes {
        vocab.insert(&opener(t));
    }
    for w in FILLER {
        vocab.insert(w);
    }
    let qtypes = Labels::from_names(qtype_names(shape.qtypes))?;
    let answers = Labels::from_names((0..shape.answers).map(|a| format!("ans{a}")))?;

    let (k, d) = (shape.regions, shape.visual_dim);
    let mut blocks = Vec::with_capacity(shape.samples);
    let mut samples = Vec::with_capacity(shape.samples);
    for i in 0..shape.samples {
        let qtype = rng.gen_range(0..shape.qtypes);
        let slot = rng.gen_range(0..table.blocks[qtype].len());
        let region = rng.gen_range(0..k);
        let mut values: Vec<f64> = (0..k * d).map(|_| rng.gen::<f64>() * rule.noise).collect();
        values[region * d + table.channel_base[qtype] + slot] = 1.0;
        if rule.decoy && rule.layout == ChannelLayout::SplitByType {
            let others: Vec<usize> = (0..shape.qtypes).filter(|t| t % 2 != qtype % 2).collect();
            let other = *others.choose(&mut rng).expect("at least two types");
            let decoy_slot = rng.gen_range(0..table.blocks[other].len());
            let decoy_region = rng.gen_range(0..k);
            values[decoy_region * d + table.channel_base[other] + decoy_slot] = 1.0;
        }
        blocks.push(DenseTensor::new(&[k, d], values)?);

        let n_fill = rng.gen_range(2..=6);
        let mut words = vec![opener(qtype)];
        words.extend((0..n_fill).map(|_| FILLER.choose(&mut rng).unwrap().to_string()));
        let question = format!("{}?", words.join(" "));
        debug_assert_eq!(tokenize(&question).len(), words.len());

        samples.push(SampleRecord {
            id: format!("q{i:05}"),
            tokens: tokenize_and_pad(&question, &vocab, super::DEFAULT_MAX_Q_LEN),
            question,
            qtype,
            answer_scores: vec![(table.answer(qtype, slot), 1.0)],
            features: FeatureRef::File {
                path: feature_file.to_string(),
                block: i,
            },
        });
    }

    let mut features = FeatureStore::new();
    features.insert(feature_file.to_string(), blocks);
    let bundle = DatasetBundle {
        samples,
        vocab,
        answers,
        qtypes,
        split: "synthetic".into(),
        max_q_len: super::DEFAULT_MAX_Q_LEN,
        features,
    };
    bundle.validate()?;
    Ok(bundle)
}
