//! Caption refinement. A shape's captions become one rewriting prompt for a
//! completion provider, whose parsed answer is cached by prompt hash.

pub mod provider;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::manifest::DatasetManifest;
use crate::error::{invalid, Error, Result};

pub use provider::{CompletionProvider, LiveConfig, LiveProvider, MockProvider};

pub const DEFAULT_TEMPLATE: &str = "Combine the descriptions above into five improved descriptions of the same \
object. Each one must be a single sentence that mentions its shape, parts, colors and materials, and must not \
contradict the others. Write them as a numbered list.";

/// Caption lines in order, one per line, followed by the template.
pub fn build_refine_prompt(captions: &[String], template: &str) -> Result<String> {
    if captions.is_empty() {
        return Err(invalid!("refinement needs at least one caption"));
    }
    let mut prompt = captions.join("\n");
    prompt.push('\n');
    prompt.push_str(template);
    Ok(prompt)
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineRequest {
    pub shape_id: String,
    pub source_captions: Vec<String>,
    pub request_template: String,
    pub rendered_prompt: String,
}

impl RefineRequest {
    pub fn new(shape_id: impl Into<String>, captions: Vec<String>, template: &str) -> Result<Self> {
        let rendered_prompt = build_refine_prompt(&captions, template)?;
        Ok(Self {
            shape_id: shape_id.into(),
            source_captions: captions,
            request_template: template.to_string(),
            rendered_prompt,
        })
    }
}

/// Strips a leading list marker such as `1.`, `2)`, `-`, `*` or `•`.
fn strip_marker(line: &str) -> &str {
    let line = line.trim();
    if let Some(rest) = line.strip_prefix(['-', '*', '•']) {
        return rest.trim_start();
    }
    let digits = line.len() - line.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits > 0 {
        if let Some(rest) = line[digits..].strip_prefix(['.', ')']) {
            return rest.trim_start();
        }
    }
    line
}

/// Completion text to caption lines: list markers removed, whitespace
/// collapsed, lines shorter than `min_words` dropped, exact duplicates
/// removed keeping the first.
pub fn parse_captions(text: &str, min_words: usize) -> Vec<String> {
    let mut seen = HashSet::new();
    text.lines()
        .map(|l| {
            strip_marker(l)
                .split_whitespace()
                .collect::<Vec<_>>()
                .join(" ")
        })
        .filter(|l| !l.is_empty() && l.split(' ').count() >= min_words)
        .filter(|l| seen.insert(l.clone()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub prompt_sha256: String,
    pub prompt: String,
    pub provider: String,
    pub completion: String,
}

/// Completions stored as `<sha256 of prompt>.json` files.
#[derive(Debug)]
pub struct PromptCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl PromptCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            write_lock: Mutex::new(()),
        })
    }

    pub fn path_for(&self, prompt: &str) -> PathBuf {
        self.dir.join(format!("{}.json", prompt_hash(prompt)))
    }

    /// Stored completion for this exact prompt. Entries whose stored hash or
    /// prompt do not match are reported and treated as misses.
    pub fn get(&self, prompt: &str) -> Result<Option<CacheEntry>> {
        let path = self.path_for(prompt);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let entry: CacheEntry = match serde_json::from_slice(&bytes) {
            Ok(e) => e,
            Err(e) => {
                log::warn!("ignoring unreadable cache entry {}: {e}", path.display());
                return Ok(None);
            }
        };
        let expected = prompt_hash(prompt);
        if entry.prompt_sha256 != expected
            || entry.prompt != prompt
            || prompt_hash(&entry.prompt) != expected
        {
            log::warn!(
                "ignoring cache entry {} with mismatched prompt hash",
                path.display()
            );
            return Ok(None);
        }
        Ok(Some(entry))
    }

    pub fn put(&self, entry: &CacheEntry) -> Result<()> {
        let path = self.dir.join(format!("{}.json", entry.prompt_sha256));
        let tmp = path.with_extension("json.tmp");
        let bytes = serde_json::to_vec_pretty(entry)?;
        let _guard = self.write_lock.lock().expect("cache write lock");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub template: String,
    /// Parsed lines with fewer words are dropped.
    pub min_words: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            template: DEFAULT_TEMPLATE.to_string(),
            min_words: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineResult {
    pub shape_id: String,
    pub refined_captions: Vec<String>,
    pub provider: String,
    pub cached: bool,
    pub prompt_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RefineOutcome {
    Ok(RefineResult),
    Failed { shape_id: String, error: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineRun {
    pub outcomes: BTreeMap<String, RefineOutcome>,
    pub provider_calls: usize,
    pub cache_hits: usize,
}

impl RefineRun {
    pub fn failures(&self) -> usize {
        self.outcomes
            .values()
            .filter(|o| matches!(o, RefineOutcome::Failed { .. }))
            .count()
    }
}

fn refine_one(
    request: &RefineRequest,
    provider: &dyn CompletionProvider,
    cache: Option<&PromptCache>,
    cfg: &RefineConfig,
    calls: &AtomicUsize,
    hits: &AtomicUsize,
) -> Result<RefineResult> {
    let hash = prompt_hash(&request.rendered_prompt);
    let cached = match cache {
        Some(c) => c.get(&request.rendered_prompt)?,
        None => None,
    };
    let (entry, from_cache) = match cached {
        Some(entry) => {
            hits.fetch_add(1, Ordering::Relaxed);
            (entry, true)
        }
        None => {
            calls.fetch_add(1, Ordering::Relaxed);
            let completion = provider.complete(&request.rendered_prompt)?;
            let entry = CacheEntry {
                prompt_sha256: hash.clone(),
                prompt: request.rendered_prompt.clone(),
                provider: provider.id(),
                completion,
            };
            if let Some(c) = cache {
                c.put(&entry)?;
            }
            (entry, false)
        }
    };
    let refined = parse_captions(&entry.completion, cfg.min_words);
    if refined.is_empty() {
        return Err(Error::Provider(format!(
            "no usable caption in provider output for shape `{}`",
            request.shape_id
        )));
    }
    Ok(RefineResult {
        shape_id: request.shape_id.clone(),
        refined_captions: refined,
        provider: entry.provider,
        cached: from_cache,
        prompt_sha256: hash,
    })
}

/// Refines the captions of every shape. Failures become per-shape records
/// and do not stop the run.
pub fn refine_captions(
    manifest: &DatasetManifest,
    provider: &dyn CompletionProvider,
    cache: Option<&PromptCache>,
    cfg: &RefineConfig,
) -> RefineRun {
    let calls = AtomicUsize::new(0);
    let hits = AtomicUsize::new(0);
    let outcomes = manifest
        .records
        .par_iter()
        .map(|r| {
            let result = RefineRequest::new(r.shape_id.clone(), r.captions.clone(), &cfg.template)
                .and_then(|req| refine_one(&req, provider, cache, cfg, &calls, &hits));
            let outcome = match result {
                Ok(res) => RefineOutcome::Ok(res),
                Err(e) => {
                    log::warn!("refinement of `{}` failed: {e}", r.shape_id);
                    RefineOutcome::Failed {
                        shape_id: r.shape_id.clone(),
                        error: e.to_string(),
                    }
                }
            };
            (r.shape_id.clone(), outcome)
        })
        .collect();
    RefineRun {
        outcomes,
        provider_calls: calls.into_inner(),
        cache_hits: hits.into_inner(),
    }
}
