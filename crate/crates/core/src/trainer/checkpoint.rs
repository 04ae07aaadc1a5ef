//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.json     model spec, inference options, tensor list
//! <dir>/tensors/<name>.txt
//! <dir>/prior.csv
//! <dir>/vocab.txt  answers.txt  qtypes.txt
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{InferenceOptions, Model, ModelSpec};
use crate::data::{Labels, Vocabulary};
use crate::diffcore::text::{parse_tensor, render_tensor};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::prior::{export_prior, import_prior};

pub const FORMAT: &str = "milqt-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub spec: ModelSpec,
    pub inference: InferenceOptions,
    pub tensors: Vec<TensorEntry>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_labels(path: &Path) -> Result<Labels> {
    Labels::parse(&path.display().to_string(), &read(path)?)
}

pub fn save_checkpoint(model: &Model, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let tensor_dir = dir.join("tensors");
    fs::create_dir_all(&tensor_dir).map_err(|e| Error::io(&tensor_dir, e))?;
    let mut tensors = Vec::with_capacity(model.params.len());
    for (name, t) in model.params.iter() {
        write(&tensor_dir.join(format!("{name}.txt")), &render_tensor(t))?;
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        });
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        version: VERSION,
        spec: model.spec.clone(),
        inference: model.inference,
        tensors,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    write(&dir.join("manifest.json"), &json)?;
    export_prior(&model.prior, dir.join("prior.csv"))?;
    write(&dir.join("vocab.txt"), &model.vocab.labels().render())?;
    write(&dir.join("answers.txt"), &model.answers.render())?;
    write(&dir.join("qtypes.txt"), &model.qtypes.render())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Model> {
    let dir = dir.as_ref();
    let manifest: CheckpointManifest = serde_json::from_str(&read(&dir.join("manifest.json"))?)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Validation(format!(
            "unsupported checkpoint format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let mut params = ParamStore::new();
    for entry in &manifest.tensors {
        let path = dir.join("tensors").join(format!("{}.txt", entry.name));
        let t = parse_tensor(&path.display().to_string(), &read(&path)?)?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Validation(format!(
                "tensor '{}' has shape {:?}, manifest says {:?}",
                entry.name,
                t.shape(),
                entry.shape
            )));
        }
        params.insert(entry.name.clone(), t);
    }
    let vocab = Vocabulary::from_labels(read_labels(&dir.join("vocab.txt"))?)?;
    let answers = read_labels(&dir.join("answers.txt"))?;
    let qtypes = read_labels(&dir.join("qtypes.txt"))?;
    let prior = import_prior(dir.join("prior.csv"))?;
    let spec = manifest.spec;
    if vocab.len() != spec.vocab_size
        || answers.len() != spec.answers
        || qtypes.len() != spec.qtypes
    {
        return Err(Error::Validation(
            "checkpoint tables disagree with its manifest".into(),
        ));
    }
    if prior.qtype_names() != qtypes.names() || prior.answer_names() != answers.names() {
        return Err(Error::Validation(
            "checkpoint prior labels disagree with its tables".into(),
        ));
    }
    Ok(Model {
        spec,
        params,
        prior,
        vocab,
        answers,
        qtypes,
        inference: manifest.inference,
    })
}
