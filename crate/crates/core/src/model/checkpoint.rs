use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tokenizer::Vocab;
use super::transformer::Params;
use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor_io::{ensure_dir, read_f32, read_json, write_f32, write_json};

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    config: ModelConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
}

impl Model {
    /// Writes `manifest.json` plus one little-endian `f32` file per tensor.
    pub fn save(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        let mut tensors = Vec::new();
        for (name, shape, values) in self.params.named() {
            let file = format!("{name}.f32");
            write_f32(&dir.join(&file), values.iter().copied())?;
            tensors.push(TensorEntry { name, shape, file });
        }
        write_json(
            &dir.join("manifest.json"),
            &ModelManifest {
                config: self.config.clone(),
                vocab: self.vocab.tokens().to_vec(),
                tensors,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: ModelManifest = read_json(&dir.join("manifest.json"))?;
        manifest
            .config
            .validate()
            .map_err(|e| Error::checkpoint(dir, e.to_string()))?;
        let vocab = Vocab::from_tokens(manifest.vocab).ok_or_else(|| Error::checkpoint(dir, "malformed vocabulary"))?;
        // Shapes come from the config; the manifest must agree with them.
        let mut params = Params::init(&manifest.config, vocab.len());
        let expected: Vec<(String, Vec<usize>)> = params
            .named()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        if expected.len() != manifest.tensors.len() {
            return Err(Error::checkpoint(dir, format!(
                "expected {} tensors, manifest lists {}",
                expected.len(),
                manifest.tensors.len()
            )));
        }
        let mut loaded = Vec::with_capacity(expected.len());
        for ((name, shape), entry) in expected.iter().zip(&manifest.tensors) {
            if &entry.name != name || &entry.shape != shape {
                return Err(Error::checkpoint(dir, format!(
                    "tensor {} {:?} does not match expected {name} {shape:?}",
                    entry.name, entry.shape
                )));
            }
            loaded.push(read_f32(&dir.join(&entry.file), shape.iter().product())?);
        }
        let mut i = 0;
        params.for_each_mut(|_, dst| {
            dst.copy_from_slice(&loaded[i]);
            i += 1;
        });
        Ok(Model::from_parts(manifest.config, vocab, params))
    }
}
