//! Dataset manifests as JSON lines: a header record with the schema
//! version, then one record per shape. Cloud paths are stored relative to
//! the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::attributes::ShapeAttributes;
use super::cloud_io::load_cloud;
use crate::distractors::DistractorSet;
use crate::encoders::text::TextItem;
use crate::error::{Error, Result};
use crate::geometry::ColoredPointCloud;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeRecord {
    pub shape_id: String,
    pub cloud: PathBuf,
    pub class_label: String,
    pub captions: Vec<String>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<ShapeAttributes>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distractors: Option<DistractorSet>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generator: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    /// Directory that relative cloud paths resolve against.
    pub root: PathBuf,
    /// Free-form provenance stored in the header (e.g. generator config).
    pub generator: Option<serde_json::Value>,
    pub records: Vec<ShapeRecord>,
}

/// Caption id used throughout the pipeline: `{shape_id}#{index}`.
pub fn caption_id(shape_id: &str, index: usize) -> String {
    format!("{shape_id}#{index}")
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            ..Default::default()
        }
    }

    pub fn get(&self, shape_id: &str) -> Option<&ShapeRecord> {
        self.records.iter().find(|r| r.shape_id == shape_id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.shape_id.clone()).collect()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ShapeRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn cloud_path(&self, record: &ShapeRecord) -> PathBuf {
        self.root.join(&record.cloud)
    }

    pub fn load_cloud(&self, shape_id: &str) -> Result<ColoredPointCloud> {
        let record = self
            .get(shape_id)
            .ok_or_else(|| Error::NotFound(format!("shape `{shape_id}` in manifest")))?;
        load_cloud(&self.cloud_path(record))
    }

    pub fn class_labels(&self) -> BTreeMap<String, String> {
        self.records
            .iter()
            .map(|r| (r.shape_id.clone(), r.class_label.clone()))
            .collect()
    }

    pub fn captions(&self) -> BTreeMap<String, Vec<TextItem>> {
        self.records
            .iter()
            .map(|r| {
                let items = r
                    .captions
                    .iter()
                    .enumerate()
                    .map(|(i, c)| TextItem::new(caption_id(&r.shape_id, i), c.clone()))
                    .collect();
                (r.shape_id.clone(), items)
            })
            .collect()
    }

    pub fn attributes(&self) -> BTreeMap<String, ShapeAttributes> {
        self.records
            .iter()
            .filter_map(|r| r.attributes.map(|a| (r.shape_id.clone(), a)))
            .collect()
    }

    /// Checks ids for uniqueness and each record for valid attributes plus an existing cloud file.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if r.shape_id.is_empty() {
                return Err(Error::Invalid("record with an empty shape id".into()));
            }
            if !seen.insert(r.shape_id.as_str()) {
                return Err(Error::Invalid(format!(
                    "duplicate shape id `{}`",
                    r.shape_id
                )));
            }
            if let Some(a) = &r.attributes {
                a.validate()
                    .map_err(|e| Error::Invalid(format!("shape `{}`: {e}", r.shape_id)))?;
            }
            let path = self.cloud_path(r);
            if !path.is_file() {
                return Err(Error::NotFound(format!(
                    "cloud file {} for shape `{}`",
                    path.display(),
                    r.shape_id
                )));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let header = Header {
            schema_version: SCHEMA_VERSION,
            generator: self.generator.clone(),
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut manifest = DatasetManifest::new(root);
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let Some((_, first)) = lines.next() else {
            return Ok(manifest);
        };
        let header: Header =
            serde_json::from_str(first).map_err(|e| Error::format(path, format!("header: {e}")))?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported schema version {}", header.schema_version),
            ));
        }
        manifest.generator = header.generator;
        for (n, line) in lines {
            let record: ShapeRecord = serde_json::from_str(line).map_err(|e| {
                let id = serde_json::from_str::<serde_json::Value>(line)
                    .ok()
                    .and_then(|v| {
                        v.get("shape_id")
                            .and_then(|s| s.as_str())
                            .map(str::to_string)
                    })
                    .map(|id| format!(" (shape `{id}`)"))
                    .unwrap_or_default();
                Error::format(path, format!("line {}{id}: {e}", n + 1))
            })?;
            manifest.records.push(record);
        }
        Ok(manifest)
    }
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, manifest.to_jsonl()?).map_err(|e| Error::io(path, e))
}

/// Reads and validates a manifest.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest = DatasetManifest::parse(&text, path)?;
    manifest.validate()?;
    Ok(manifest)
}
