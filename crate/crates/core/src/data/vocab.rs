use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Ordered string table: `index -> name` and its inverse.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Labels {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Labels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut out = Self::new();
        for name in names {
            let name = name.into();
            if out.index.contains_key(&name) {
                return Err(Error::Validation(format!("duplicate entry '{name}'")));
            }
            out.insert(name);
        }
        Ok(out)
    }

    /// Index of `name`, appending it if new.
    pub fn insert(&mut self, name: impl Into<String>) -> usize {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            return i;
        }
        let i = self.names.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        i
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: usize) -> Option<&str> {
        self.names.get(i).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// One entry per line; line number is the index.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for n in &self.names {
            s.push_str(n);
            s.push('\n');
        }
        s
    }

    pub fn parse(location: &str, text: &str) -> Result<Self> {
        let mut out = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                return Err(Error::parse(location, i + 1, "empty entry"));
            }
            if out.get(line).is_some() {
                return Err(Error::parse(
                    location,
                    i + 1,
                    format!("duplicate entry '{line}'"),
                ));
            }
            out.insert(line);
        }
        Ok(out)
    }
}

/// Word vocabulary with `<pad>` at 0 and `<unk>` at 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    labels: Labels,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut labels = Labels::new();
        labels.insert(PAD_TOKEN);
        labels.insert(UNK_TOKEN);
        Vocabulary { labels }
    }

    pub fn from_labels(labels: Labels) -> Result<Self> {
        if labels.name(PAD) != Some(PAD_TOKEN) || labels.name(UNK) != Some(UNK_TOKEN) {
            return Err(Error::Validation(format!(
                "vocabulary must start with {PAD_TOKEN} and {UNK_TOKEN}"
            )));
        }
        Ok(Vocabulary { labels })
    }

    pub fn insert(&mut self, word: &str) -> usize {
        self.labels.insert(word)
    }

    /// Index of `word`, or [`UNK`].
    pub fn lookup(&self, word: &str) -> usize {
        self.labels.get(word).unwrap_or(UNK)
    }

    pub fn word(&self, i: usize) -> Option<&str> {
        self.labels.name(i)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }
}

/// Lowercases, splits on whitespace and strips ASCII punctuation from each word.
pub fn tokenize(question: &str) -> Vec<String> {
    question
        .split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Exactly `max_q_len` indices: the first `max_q_len` words, then `PAD`.
pub fn tokenize_and_pad(question: &str, vocab: &Vocabulary, max_q_len: usize) -> Vec<usize> {
    let mut out: Vec<usize> = tokenize(question)
        .iter()
        .take(max_q_len)
        .map(|w| vocab.lookup(w))
        .collect();
    out.resize(max_q_len, PAD);
    out
}
