//! Artifact locations inside a run directory.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub struct Workspace {
    pub root: PathBuf,
    manifest_override: Option<PathBuf>,
}

impl Workspace {
    pub fn new(root: &Path, manifest_override: Option<PathBuf>) -> Self {
        Self {
            root: root.to_path_buf(),
            manifest_override,
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn manifest(&self) -> PathBuf {
        self.manifest_override
            .clone()
            .unwrap_or_else(|| self.data_dir().join("manifest.jsonl"))
    }

    pub fn autoencoder_ckpt(&self) -> PathBuf {
        self.root.join("autoencoder.ckpt")
    }

    pub fn autoencoder_meta(&self) -> PathBuf {
        self.root.join("autoencoder.json")
    }

    pub fn distractors(&self) -> PathBuf {
        self.root.join("distractors.jsonl")
    }

    pub fn mining_meta(&self) -> PathBuf {
        self.root.join("mining.json")
    }

    pub fn triplets(&self, split: &str) -> PathBuf {
        self.root.join("triplets").join(format!("{split}.jsonl"))
    }

    pub fn scorer_ckpt(&self) -> PathBuf {
        self.root.join("scorer.ckpt")
    }

    pub fn scorer_meta(&self) -> PathBuf {
        self.root.join("scorer.json")
    }

    pub fn scorer_vocab(&self) -> PathBuf {
        self.root.join("scorer.vocab.json")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn refine_dir(&self) -> PathBuf {
        self.root.join("refine")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.md")
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("malformed JSON in {}", path.display()))
}
