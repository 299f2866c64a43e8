//! Model files are JSON documents with a format tag and version. Parameter
//! tensors are stored row-major; floats are written in shortest round-trip
//! form so save followed by load reproduces every bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::MultiExitModel;
use crate::error::{Error, Result};

pub const MODEL_FORMAT: &str = "exitaudit/multi-exit-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    model: MultiExitModel,
}

#[derive(Serialize)]
struct ModelFileRef<'a> {
    format: &'a str,
    version: u32,
    model: &'a MultiExitModel,
}

pub fn model_to_string(model: &MultiExitModel) -> Result<String> {
    Ok(serde_json::to_string(&ModelFileRef { format: MODEL_FORMAT, version: MODEL_VERSION, model })?)
}

pub fn model_from_str(s: &str) -> Result<MultiExitModel> {
    let file: ModelFile = serde_json::from_str(s)?;
    if file.format != MODEL_FORMAT {
        return Err(Error::Serde(format!("not a model file (format `{}`)", file.format)));
    }
    if file.version != MODEL_VERSION {
        return Err(Error::Serde(format!("unsupported model version {}", file.version)));
    }
    file.model.arch.validate()?;
    Ok(file.model)
}

pub fn save_model(model: &MultiExitModel, path: &Path) -> Result<()> {
    fs::write(path, model_to_string(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<MultiExitModel> {
    model_from_str(&fs::read_to_string(path)?)
}
