//! Question-type / answer relational prior and the per-question awareness weights.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::DatasetBundle;
use crate::diffcore::text::{fmt_real, parse_real};
use crate::diffcore::{DenseTensor, Tape, Var};
use crate::error::{Error, Result};

/// Tolerance on `sum(h) == 1` accepted by [`awareness`].
pub const DISTRIBUTION_TOL: f64 = 1e-6;

/// Column-stochastic `P x A` co-occurrence matrix of question types and answers.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMatrix {
    m: DenseTensor,
    qtype_names: Vec<String>,
    answer_names: Vec<String>,
    /// Columns that had no observations and were set to `1/P`.
    fallback: Vec<bool>,
}

impl PriorMatrix {
    /// Normalizes raw integer counts column by column; empty columns become uniform.
    pub fn from_counts(
        counts: &[Vec<u64>],
        qtype_names: Vec<String>,
        answer_names: Vec<String>,
    ) -> Result<Self> {
        let p = counts.len();
        let a = counts.first().map_or(0, Vec::len);
        if p == 0 || a == 0 || counts.iter().any(|row| row.len() != a) {
            return Err(Error::dim(
                "prior",
                "count table must be a non-empty rectangle",
            ));
        }
        if qtype_names.len() != p || answer_names.len() != a {
            return Err(Error::dim(
                "prior",
                "label lists do not match the count table",
            ));
        }
        let mut values = vec![0.0; p * a];
        let mut fallback = vec![false; a];
        for col in 0..a {
            let total: u64 = counts.iter().map(|row| row[col]).sum();
            if total == 0 {
                fallback[col] = true;
                for row in 0..p {
                    values[row * a + col] = 1.0 / p as f64;
                }
            } else {
                for row in 0..p {
                    values[row * a + col] = counts[row][col] as f64 / total as f64;
                }
            }
        }
        Ok(PriorMatrix {
            m: DenseTensor::new(&[p, a], values)?,
            qtype_names,
            answer_names,
            fallback,
        })
    }

    /// Every column equal to `1/P`.
    pub fn uniform(qtype_names: Vec<String>, answer_names: Vec<String>) -> Result<Self> {
        let zeros = vec![vec![0; answer_names.len()]; qtype_names.len()];
        let mut prior = Self::from_counts(&zeros, qtype_names, answer_names)?;
        prior.fallback.iter_mut().for_each(|f| *f = false);
        Ok(prior)
    }

    pub fn matrix(&self) -> &DenseTensor {
        &self.m
    }

    pub fn num_qtypes(&self) -> usize {
        self.m.shape()[0]
    }

    pub fn num_answers(&self) -> usize {
        self.m.shape()[1]
    }

    pub fn get(&self, qtype: usize, answer: usize) -> f64 {
        self.m.at(qtype, answer)
    }

    pub fn qtype_names(&self) -> &[String] {
        &self.qtype_names
    }

    pub fn answer_names(&self) -> &[String] {
        &self.answer_names
    }

    pub fn fallback_mask(&self) -> &[bool] {
        &self.fallback
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let (p, a) = (self.num_qtypes(), self.num_answers());
        (0..a)
            .map(|c| (0..p).map(|r| self.m.values()[r * a + c]).sum())
            .collect()
    }

    pub fn render_csv(&self) -> String {
        let mut out = String::from("qtype\\answer");
        for name in &self.answer_names {
            write!(out, ",{name}").unwrap();
        }
        out.push('\n');
        for (row, name) in self.qtype_names.iter().enumerate() {
            out.push_str(name);
            for col in 0..self.num_answers() {
                write!(out, ",{}", fmt_real(self.get(row, col))).unwrap();
            }
            out.push('\n');
        }
        let fallback: Vec<&str> = self
            .answer_names
            .iter()
            .zip(&self.fallback)
            .filter(|(_, &f)| f)
            .map(|(n, _)| n.as_str())
            .collect();
        if fallback.is_empty() {
            out.push_str("# fallback:\n");
        } else {
            writeln!(out, "# fallback: {}", fallback.join(",")).unwrap();
        }
        out
    }

    pub fn parse_csv(location: &str, text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(location, 1, "empty prior file"))?;
        let mut cols = header.split(',');
        if cols.next() != Some("qtype\\answer") {
            return Err(Error::parse(location, 1, "expected 'qtype\\answer' header"));
        }
        let answer_names: Vec<String> = cols.map(str::to_string).collect();
        if answer_names.is_empty() {
            return Err(Error::parse(location, 1, "no answer columns"));
        }
        let mut qtype_names = Vec::new();
        let mut values = Vec::new();
        let mut fallback_line = None;
        for (i, line) in lines {
            if let Some(rest) = line.strip_prefix("# fallback:") {
                fallback_line = Some((i + 1, rest.trim().to_string()));
                continue;
            }
            if fallback_line.is_some() {
                return Err(Error::parse(
                    location,
                    i + 1,
                    "rows after the fallback line",
                ));
            }
            let mut cells = line.split(',');
            let name = cells.next().unwrap_or_default();
            let row = cells
                .map(|c| {
                    parse_real(c)
                        .ok_or_else(|| Error::parse(location, i + 1, format!("bad value '{c}'")))
                })
                .collect::<Result<Vec<_>>>()?;
            if row.len() != answer_names.len() {
                return Err(Error::parse(
                    location,
                    i + 1,
                    format!("{} values for {} answers", row.len(), answer_names.len()),
                ));
            }
            qtype_names.push(name.to_string());
            values.extend(row);
        }
        let (fline, flist) = fallback_line
            .ok_or_else(|| Error::parse(location, text.lines().count(), "missing fallback line"))?;
        let mut fallback = vec![false; answer_names.len()];
        for name in flist.split(',').filter(|s| !s.is_empty()) {
            let idx = answer_names.iter().position(|a| a == name).ok_or_else(|| {
                Error::parse(location, fline, format!("unknown fallback answer '{name}'"))
            })?;
            fallback[idx] = true;
        }
        if qtype_names.is_empty() {
            return Err(Error::parse(location, 2, "no question-type rows"));
        }
        let m = DenseTensor::new(&[qtype_names.len(), answer_names.len()], values)?;
        Ok(PriorMatrix {
            m,
            qtype_names,
            answer_names,
            fallback,
        })
    }
}

/// Counts (type, answer) co-occurrences over the training questions, then
/// divides each column by its total. A question contributes its
/// highest-scored answer.
pub fn compute_prior(bundle: &DatasetBundle) -> Result<PriorMatrix> {
    if bundle.samples.is_empty() {
        return Err(Error::Validation(
            "cannot compute a prior from zero questions".into(),
        ));
    }
    let (p, a) = (bundle.num_qtypes(), bundle.num_answers());
    let mut counts = vec![vec![0u64; a]; p];
    for s in &bundle.samples {
        if s.qtype >= p || s.answer_scores.iter().any(|&(ans, _)| ans >= a) {
            return Err(Error::Validation(format!(
                "sample '{}' has labels out of range",
                s.id
            )));
        }
        counts[s.qtype][s.best_answer()] += 1;
    }
    PriorMatrix::from_counts(
        &counts,
        bundle.qtypes.names().to_vec(),
        bundle.answers.names().to_vec(),
    )
}

pub fn export_prior(prior: &PriorMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, prior.render_csv()).map_err(|e| Error::io(path, e))
}

pub fn import_prior(path: impl AsRef<Path>) -> Result<PriorMatrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PriorMatrix::parse_csv(&path.display().to_string(), &text)
}

fn check_distribution(h: &[f64]) -> Result<()> {
    let total: f64 = h.iter().sum();
    if h.iter().any(|&x| x < 0.0 || !x.is_finite()) || (total - 1.0).abs() > DISTRIBUTION_TOL {
        return Err(Error::Contract(format!(
            "question-type weights must be a distribution (sum {total})"
        )));
    }
    Ok(())
}

/// `m_awn = h^T m`: the answer weighting implied by a type distribution `h`.
/// Differentiable with respect to `h`.
pub fn awareness(tape: &mut Tape, h: Var, prior: &PriorMatrix) -> Result<Var> {
    if tape.shape(h) != [prior.num_qtypes()] {
        return Err(Error::dim(
            "awareness",
            format!(
                "h shape {:?} for {} types",
                tape.shape(h),
                prior.num_qtypes()
            ),
        ));
    }
    check_distribution(tape.values(h))?;
    let m = tape.constant(prior.matrix());
    tape.matmul(h, m)
}

/// Value-only form of [`awareness`].
pub fn awareness_values(h: &[f64], prior: &PriorMatrix) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let hv = tape.constant(&DenseTensor::new(&[h.len()], h.to_vec())?);
    let out = awareness(&mut tape, hv, prior)?;
    Ok(tape.values(out).to_vec())
}

pub fn one_hot(index: usize, len: usize) -> DenseTensor {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    DenseTensor::new(&[len], v).expect("one_hot: len must be positive")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    fn worked() -> PriorMatrix {
        // qtypes [0,0,1,1], answers [0,1,1,2]
        PriorMatrix::from_counts(
            &[vec![1, 1, 0], vec![0, 1, 1]],
            names("t", 2),
            names("a", 3),
        )
        .unwrap()
    }

    #[test]
    fn worked_matrix() {
        assert_eq!(worked().matrix().values(), &[1.0, 0.5, 0.0, 0.0, 0.5, 1.0]);
        assert_eq!(worked().fallback_mask(), &[false, false, false]);
    }

    #[test]
    fn unseen_answer_falls_back_to_uniform() {
        let p = PriorMatrix::from_counts(&[vec![2, 0], vec![1, 0]], names("t", 2), names("a", 2))
            .unwrap();
        assert_eq!(p.get(0, 1), 0.5);
        assert_eq!(p.get(1, 1), 0.5);
        assert_eq!(p.fallback_mask(), &[false, true]);
    }

    #[test]
    fn equal_frequencies_give_uniform_columns() {
        let p = PriorMatrix::from_counts(
            &[vec![3, 3], vec![3, 3], vec![3, 3]],
            names("t", 3),
            names("a", 2),
        )
        .unwrap();
        assert!(p.matrix().values().iter().all(|&v| v == 1.0 / 3.0));
    }

    #[test]
    fn awareness_worked_example() {
        let m = awareness_values(&[0.6, 0.4], &worked()).unwrap();
        for (got, want) in m.iter().zip([0.6, 0.5, 0.4]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert_eq!(
            awareness_values(&[1.0, 0.0], &worked()).unwrap(),
            vec![1.0, 0.5, 0.0]
        );
    }

    #[test]
    fn awareness_under_uniform_prior_is_constant() {
        let u = PriorMatrix::uniform(names("t", 4), names("a", 5)).unwrap();
        for v in awareness_values(&[0.1, 0.2, 0.3, 0.4], &u).unwrap() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn awareness_rejects_non_distributions() {
        assert!(matches!(
            awareness_values(&[0.6, 0.5], &worked()),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            awareness_values(&[1.2, -0.2], &worked()),
            Err(Error::Contract(_))
        ));
        assert!(awareness_values(&[1.0], &worked()).is_err());
    }

    #[test]
    fn csv_layout_and_round_trip() {
        let p = PriorMatrix::from_counts(
            &[vec![1, 1, 0], vec![0, 1, 0]],
            names("t", 2),
            names("a", 3),
        )
        .unwrap();
        let csv = p.render_csv();
        assert_eq!(
            csv,
            "qtype\\answer,a0,a1,a2\nt0,1,0.5,0.5\nt1,0,0.5,0.5\n# fallback: a2\n"
        );
        let back = PriorMatrix::parse_csv("p", &csv).unwrap();
        assert_eq!(back, p);
        assert!(PriorMatrix::parse_csv("p", "qtype\\answer,a\nt0,x\n# fallback:\n").is_err());
        assert!(PriorMatrix::parse_csv("p", "qtype\\answer,a\nt0,1\n").is_err());
    }
}
