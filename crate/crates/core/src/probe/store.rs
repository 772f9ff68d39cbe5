use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Fingerprint;
use crate::classify::CategoricalSample;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse fingerprint store: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("fingerprint `{prompt_id}` violates an invariant: {reason}")]
    Invariant { prompt_id: String, reason: String },
}

/// All fingerprints of one model, keyed by prompt id in probe order.
#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintStore {
    pub model_id: String,
    fingerprints: IndexMap<String, Fingerprint>,
}

impl FingerprintStore {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            fingerprints: IndexMap::new(),
        }
    }

    /// Adds or replaces the fingerprint for its prompt. The model id is overwritten
    /// with the store's.
    pub fn insert(&mut self, mut fp: Fingerprint) {
        fp.model_id = self.model_id.clone();
        self.fingerprints.insert(fp.prompt_id.clone(), fp);
    }

    pub fn get(&self, prompt_id: &str) -> Option<&Fingerprint> {
        self.fingerprints.get(prompt_id)
    }

    pub fn prompt_ids(&self) -> impl Iterator<Item = &str> {
        self.fingerprints.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Fingerprint> {
        self.fingerprints.values()
    }

    pub fn len(&self) -> usize {
        self.fingerprints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fingerprints.is_empty()
    }

    pub fn total_samples(&self) -> usize {
        self.iter().map(Fingerprint::len).sum()
    }

    /// A copy of this store under another model id.
    pub fn renamed(&self, model_id: impl Into<String>) -> Self {
        let mut out = Self::new(model_id);
        for fp in self.iter() {
            out.insert(fp.clone());
        }
        out
    }

    pub fn to_json_string(&self) -> String {
        let doc = StoreDocument {
            model_id: self.model_id.clone(),
            prompts: self
                .iter()
                .map(|fp| PromptRecord {
                    prompt_id: fp.prompt_id.clone(),
                    vocabulary: fp.vocabulary.clone(),
                    seeds: fp.seeds.clone(),
                    samples: fp.samples.iter().map(|s| s.probs().to_vec()).collect(),
                })
                .collect(),
        };
        let mut text = serde_json::to_string_pretty(&doc).expect("store serializes");
        text.push('\n');
        text
    }

    pub fn from_json_str(text: &str) -> Result<Self, StoreError> {
        let doc: StoreDocument = serde_json::from_str(text)?;
        let mut store = Self::new(doc.model_id);
        for record in doc.prompts {
            if store.get(&record.prompt_id).is_some() {
                return Err(StoreError::Invariant {
                    prompt_id: record.prompt_id,
                    reason: "prompt appears twice in the store".into(),
                });
            }
            let samples = record
                .samples
                .into_iter()
                .enumerate()
                .map(|(i, probs)| {
                    CategoricalSample::new(probs).map_err(|e| StoreError::Invariant {
                        prompt_id: record.prompt_id.clone(),
                        reason: format!("sample {i}: {e}"),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            store.insert(Fingerprint::new(
                store.model_id.clone(),
                record.prompt_id,
                record.vocabulary,
                samples,
                record.seeds,
            )?);
        }
        Ok(store)
    }
}

// Floats go through serde_json's shortest round-trip formatting, which is lossless.
#[derive(Serialize, Deserialize)]
struct StoreDocument {
    model_id: String,
    prompts: Vec<PromptRecord>,
}

#[derive(Serialize, Deserialize)]
struct PromptRecord {
    prompt_id: String,
    vocabulary: String,
    seeds: Vec<u64>,
    samples: Vec<Vec<f64>>,
}

pub fn save_fingerprints(
    store: &FingerprintStore,
    path: impl AsRef<Path>,
) -> Result<(), StoreError> {
    let path = path.as_ref();
    let io_err = |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err)?;
    }
    std::fs::write(path, store.to_json_string()).map_err(io_err)
}

pub fn load_fingerprints(path: impl AsRef<Path>) -> Result<FingerprintStore, StoreError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| StoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    FingerprintStore::from_json_str(&text)
}
