//! Checkpoint files: a version line followed by one JSON document with the
//! configuration, vocabulary and every parameter tensor by name.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{Architecture, Model};
use crate::tensor::Matrix;
use crate::vocab::Vocabulary;

pub const CHECKPOINT_HEADER: &str = "samie-ckpt-v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Body {
    config: ModelConfig,
    architecture: Architecture,
    vocabulary: Vec<String>,
    params: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedTensor {
    name: String,
    value: Matrix,
}

pub fn to_string(model: &Model) -> Result<String> {
    let body = Body {
        config: model.config.clone(),
        architecture: model.arch,
        vocabulary: model.vocab.words().to_vec(),
        params: model
            .params
            .iter()
            .map(|(_, name, value)| NamedTensor {
                name: name.to_string(),
                value: value.clone(),
            })
            .collect(),
    };
    Ok(format!("{CHECKPOINT_HEADER}\n{}\n", serde_json::to_string(&body)?))
}

pub fn from_str(text: &str) -> Result<Model> {
    let (header, json) = text
        .split_once('\n')
        .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
    if header.trim_end() != CHECKPOINT_HEADER {
        return Err(Error::Checkpoint(format!(
            "unsupported header `{header}`, expected `{CHECKPOINT_HEADER}`"
        )));
    }
    let body: Body = serde_json::from_str(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let vocab = Vocabulary::from_words(body.vocabulary);
    Model::from_parts(
        body.config,
        body.architecture,
        vocab,
        body.params.into_iter().map(|t| (t.name, t.value)),
    )
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = to_string(model)?;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_str(&text)
}
