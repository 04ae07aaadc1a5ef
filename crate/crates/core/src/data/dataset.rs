use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::vocab::{tokenize, tokenize_and_pad, Labels, Vocabulary};
use crate::diffcore::text::{fmt_real, parse_real, parse_tensor_blocks, render_tensor_blocks};
use crate::diffcore::DenseTensor;
use crate::error::{Error, Result};

pub const DEFAULT_MAX_Q_LEN: usize = 12;

/// Where a sample's `K x D_v` region features live.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureRef {
    /// Block `block` (0-based) of a feature file, path relative to the record file.
    File {
        path: String,
        block: usize,
    },
    Inline(DenseTensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub question: String,
    /// Exactly `max_q_len` indices, right-padded with `PAD`.
    pub tokens: Vec<usize>,
    pub qtype: usize,
    pub answer_scores: Vec<(usize, f64)>,
    pub features: FeatureRef,
}

impl SampleRecord {
    /// Answer with the highest score (lowest index on ties).
    pub fn best_answer(&self) -> usize {
        let mut best = self.answer_scores[0];
        for &(a, s) in &self.answer_scores[1..] {
            if s > best.1 || (s == best.1 && a < best.0) {
                best = (a, s);
            }
        }
        best.0
    }

    pub fn score_of(&self, answer: usize) -> f64 {
        self.answer_scores
            .iter()
            .find(|(a, _)| *a == answer)
            .map_or(0.0, |(_, s)| *s)
    }
}

/// Feature files keyed by the path string used in records.
pub type FeatureStore = BTreeMap<String, Vec<DenseTensor>>;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub samples: Vec<SampleRecord>,
    pub vocab: Vocabulary,
    pub answers: Labels,
    pub qtypes: Labels,
    pub split: String,
    pub max_q_len: usize,
    pub features: FeatureStore,
}

/// Soft target vector of length `num_answers` with each listed score in place.
pub fn build_soft_target(sample: &SampleRecord, num_answers: usize) -> Result<DenseTensor> {
    if sample.answer_scores.is_empty() {
        return Err(Error::Validation(format!(
            "sample '{}' has no answers",
            sample.id
        )));
    }
    let mut y = vec![0.0; num_answers];
    let mut seen = vec![false; num_answers];
    for &(a, s) in &sample.answer_scores {
        if a >= num_answers {
            return Err(Error::Validation(format!(
                "sample '{}': answer index {a} out of range {num_answers}",
                sample.id
            )));
        }
        if seen[a] {
            return Err(Error::Validation(format!(
                "sample '{}': duplicate answer index {a}",
                sample.id
            )));
        }
        seen[a] = true;
        y[a] = s;
    }
    DenseTensor::new(&[num_answers], y)
}

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_optional(path: &Path) -> Result<Option<String>> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(Some(s)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

struct RawRecord<'a> {
    line: usize,
    id: &'a str,
    question: &'a str,
    qtype: &'a str,
    answers: Vec<(&'a str, f64)>,
    features: FeatureRef,
}

fn parse_inline(loc: &str, line: usize, field: &str) -> Result<DenseTensor> {
    let mut it = field.split_whitespace();
    let mut dim = || {
        it.next()
            .and_then(|d| d.parse::<usize>().ok())
            .ok_or_else(|| Error::parse(loc, line, "inline features need 'K D values...'"))
    };
    let (k, d) = (dim()?, dim()?);
    let values = field
        .split_whitespace()
        .skip(2)
        .map(|v| parse_real(v).ok_or_else(|| Error::parse(loc, line, format!("bad value '{v}'"))))
        .collect::<Result<Vec<_>>>()?;
    DenseTensor::new(&[k, d], values).map_err(|e| Error::parse(loc, line, e.to_string()))
}

fn parse_record<'a>(loc: &str, line: usize, text: &'a str) -> Result<RawRecord<'a>> {
    let fields: Vec<&str> = text.split('\t').collect();
    if fields.len() < 5 || fields.len() > 6 {
        return Err(Error::parse(
            loc,
            line,
            format!("expected 5 tab-separated fields, found {}", fields.len()),
        ));
    }
    if fields[0].is_empty() {
        return Err(Error::parse(loc, line, "empty id"));
    }
    if fields[2].is_empty() {
        return Err(Error::parse(loc, line, "empty question type"));
    }
    let mut answers = Vec::new();
    for pair in fields[3].split(';').filter(|p| !p.is_empty()) {
        let (name, score) = pair
            .rsplit_once('=')
            .ok_or_else(|| Error::parse(loc, line, format!("answer '{pair}' lacks '=score'")))?;
        let score = parse_real(score)
            .ok_or_else(|| Error::parse(loc, line, format!("bad score in '{pair}'")))?;
        answers.push((name, score));
    }
    let features = match (fields[4], fields.get(5)) {
        ("inline", Some(inline)) => FeatureRef::Inline(parse_inline(loc, line, inline)?),
        ("inline", None) => return Err(Error::parse(loc, line, "inline features missing")),
        (reference, None) => {
            let (path, block) = reference.rsplit_once('#').ok_or_else(|| {
                Error::parse(loc, line, format!("bad feature reference '{reference}'"))
            })?;
            let block = block.parse::<usize>().map_err(|_| {
                Error::parse(loc, line, format!("bad block index in '{reference}'"))
            })?;
            FeatureRef::File {
                path: path.to_string(),
                block,
            }
        }
        (_, Some(_)) => {
            return Err(Error::parse(
                loc,
                line,
                "sixth field only allowed for inline features",
            ))
        }
    };
    Ok(RawRecord {
        line,
        id: fields[0],
        question: fields[1],
        qtype: fields[2],
        answers,
        features,
    })
}

impl DatasetBundle {
    pub fn num_qtypes(&self) -> usize {
        self.qtypes.len()
    }

    pub fn num_answers(&self) -> usize {
        self.answers.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Number of samples per question type.
    pub fn qtype_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_qtypes()];
        for s in &self.samples {
            h[s.qtype] += 1;
        }
        h
    }

    /// Checks every structural invariant of the bundle.
    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Validation("dataset has no samples".into()));
        }
        if self.num_qtypes() < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 question types, found {}",
                self.num_qtypes()
            )));
        }
        if self.num_answers() < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 candidate answers, found {}",
                self.num_answers()
            )));
        }
        for s in &self.samples {
            if s.qtype >= self.num_qtypes() {
                return Err(Error::Validation(format!(
                    "sample '{}': qtype {} out of range",
                    s.id, s.qtype
                )));
            }
            if s.tokens.len() != self.max_q_len || s.tokens.iter().any(|&t| t >= self.vocab.len()) {
                return Err(Error::Validation(format!(
                    "sample '{}': bad token sequence",
                    s.id
                )));
            }
            if let Some((_, bad)) = s
                .answer_scores
                .iter()
                .find(|(_, sc)| !(0.0..=1.0).contains(sc))
            {
                return Err(Error::Validation(format!(
                    "sample '{}': score {bad} outside [0,1]",
                    s.id
                )));
            }
            build_soft_target(s, self.num_answers())?;
        }
        Ok(())
    }

    /// Region features of a sample.
    pub fn visual(&self, sample: &SampleRecord) -> Result<DenseTensor> {
        match &sample.features {
            FeatureRef::Inline(t) => Ok(t.clone()),
            FeatureRef::File { path, block } => self
                .features
                .get(path)
                .and_then(|blocks| blocks.get(*block))
                .cloned()
                .ok_or_else(|| {
                    Error::MissingBlock(format!("{path}#{block} (sample '{}')", sample.id))
                }),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_with(path, DEFAULT_MAX_Q_LEN)
    }

    /// Loads a record file plus any `.vocab` / `.answers` / `.qtypes` sidecars next to it.
    /// Without a sidecar the table is built from the records in order of first appearance.
    /// Referenced feature files are read eagerly; unreadable ones surface later as
    /// missing blocks.
    pub fn load_with(path: impl AsRef<Path>, max_q_len: usize) -> Result<Self> {
        let path = path.as_ref();
        let loc = path.display().to_string();
        let text = read(path)?;
        let dir = path.parent().unwrap_or(Path::new(""));

        let fixed_vocab = read_optional(&sidecar(path, "vocab"))?
            .map(|s| Labels::parse(&format!("{loc}.vocab"), &s).and_then(Vocabulary::from_labels))
            .transpose()?;
        let fixed_answers = read_optional(&sidecar(path, "answers"))?
            .map(|s| Labels::parse(&format!("{loc}.answers"), &s))
            .transpose()?;
        let fixed_qtypes = read_optional(&sidecar(path, "qtypes"))?
            .map(|s| Labels::parse(&format!("{loc}.qtypes"), &s))
            .transpose()?;

        let raw = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.is_empty())
            .map(|(i, l)| parse_record(&loc, i + 1, l))
            .collect::<Result<Vec<_>>>()?;

        let mut vocab = fixed_vocab.clone().unwrap_or_default();
        let mut answers = fixed_answers.clone().unwrap_or_default();
        let mut qtypes = fixed_qtypes.clone().unwrap_or_default();
        if fixed_vocab.is_none() {
            for r in &raw {
                for w in tokenize(r.question) {
                    vocab.insert(&w);
                }
            }
        }

        let mut samples = Vec::with_capacity(raw.len());
        for r in &raw {
            let qtype = match &fixed_qtypes {
                Some(q) => q.get(r.qtype).ok_or_else(|| {
                    Error::Validation(format!(
                        "line {}: unknown question type '{}'",
                        r.line, r.qtype
                    ))
                })?,
                None => qtypes.insert(r.qtype),
            };
            let mut answer_scores = Vec::with_capacity(r.answers.len());
            for &(name, score) in &r.answers {
                let a = match &fixed_answers {
                    Some(table) => table.get(name).ok_or_else(|| {
                        Error::Validation(format!("line {}: unknown answer '{name}'", r.line))
                    })?,
                    None => answers.insert(name),
                };
                if !(0.0..=1.0).contains(&score) {
                    return Err(Error::Validation(format!(
                        "line {}: score {score} for '{name}' outside [0,1]",
                        r.line
                    )));
                }
                answer_scores.push((a, score));
            }
            if answer_scores.is_empty() {
                return Err(Error::Validation(format!("line {}: no answers", r.line)));
            }
            samples.push(SampleRecord {
                id: r.id.to_string(),
                question: r.question.to_string(),
                tokens: tokenize_and_pad(r.question, &vocab, max_q_len),
                qtype,
                answer_scores,
                features: r.features.clone(),
            });
        }

        let mut features = FeatureStore::new();
        for s in &samples {
            if let FeatureRef::File { path: rel, .. } = &s.features {
                if features.contains_key(rel) {
                    continue;
                }
                let full = dir.join(rel);
                if let Some(text) = read_optional(&full)? {
                    features.insert(
                        rel.clone(),
                        parse_tensor_blocks(&full.display().to_string(), &text)?,
                    );
                }
            }
        }

        let bundle = DatasetBundle {
            samples,
            vocab,
            answers,
            qtypes,
            split: path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            max_q_len,
            features,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Renders the record file exactly as [`DatasetBundle::load`] reads it.
    pub fn render_records(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            let answers: Vec<String> = s
                .answer_scores
                .iter()
                .map(|&(a, sc)| format!("{}={}", self.answers.name(a).unwrap_or("?"), fmt_real(sc)))
                .collect();
            let (feature, inline) = match &s.features {
                FeatureRef::File { path, block } => (format!("{path}#{block}"), None),
                FeatureRef::Inline(t) => {
                    let mut parts = vec![t.shape()[0].to_string(), t.shape()[1].to_string()];
                    parts.extend(t.values().iter().map(|&v| fmt_real(v)));
                    ("inline".to_string(), Some(parts.join(" ")))
                }
            };
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}",
                s.id,
                s.question,
                self.qtypes.name(s.qtype).unwrap_or("?"),
                answers.join(";"),
                feature
            ));
            if let Some(inline) = inline {
                out.push('\t');
                out.push_str(&inline);
            }
            out.push('\n');
        }
        out
    }

    /// Writes the record file, the three sidecars and every feature file in the store.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write(path, &self.render_records())?;
        write(&sidecar(path, "vocab"), &self.vocab.labels().render())?;
        write(&sidecar(path, "answers"), &self.answers.render())?;
        write(&sidecar(path, "qtypes"), &self.qtypes.render())?;
        let dir = path.parent().unwrap_or(Path::new(""));
        for (rel, blocks) in &self.features {
            write(&dir.join(rel), &render_tensor_blocks(blocks))?;
        }
        Ok(())
    }

    /// True when word, answer and type tables all match `other`'s.
    pub fn same_tables(&self, other: &DatasetBundle) -> bool {
        self.vocab == other.vocab && self.answers == other.answers && self.qtypes == other.qtypes
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetBundle> {
    DatasetBundle::load(path)
}

pub fn write_dataset(bundle: &DatasetBundle, path: impl AsRef<Path>) -> Result<()> {
    bundle.write(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(scores: Vec<(usize, f64)>) -> SampleRecord {
        SampleRecord {
            id: "s".into(),
            question: String::new(),
            tokens: vec![0; 12],
            qtype: 0,
            answer_scores: scores,
            features: FeatureRef::Inline(DenseTensor::zeros(&[1, 1])),
        }
    }

    #[test]
    fn soft_target_one_hot() {
        let y = build_soft_target(&sample(vec![(2, 1.0)]), 3).unwrap();
        assert_eq!(y.values(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn soft_target_places_scores() {
        let y = build_soft_target(&sample(vec![(0, 0.3), (1, 0.9)]), 3).unwrap();
        assert_eq!(y.values(), &[0.3, 0.9, 0.0]);
    }

    #[test]
    fn soft_target_rejects_empty_and_duplicates() {
        assert!(matches!(
            build_soft_target(&sample(vec![]), 3),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            build_soft_target(&sample(vec![(1, 0.3), (1, 0.9)]), 3),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn best_answer_prefers_score_then_index() {
        let s = sample(vec![(2, 0.6), (0, 1.0), (1, 1.0)]);
        assert_eq!(s.best_answer(), 0);
        assert_eq!(s.score_of(2), 0.6);
        assert_eq!(s.score_of(5), 0.0);
    }

    #[test]
    fn inline_and_wrong_arity_records() {
        let r = parse_record("f", 3, "q1\twhat\tother\ta=1\tinline\t1 2 0.5 -1").unwrap();
        match r.features {
            FeatureRef::Inline(t) => assert_eq!(t.values(), &[0.5, -1.0]),
            _ => panic!(),
        }
        match parse_record("f", 3, "q1\twhat\tother\ta=1") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{:?}", other.err()),
        }
        assert!(parse_record("f", 1, "q1\twhat\tother\ta=x\tfeat#0").is_err());
        assert!(parse_record("f", 1, "q1\twhat\tother\ta=1\tfeat").is_err());
    }
}
