//! Tokenization and the two text embedding providers.
//!
//! The file-backed provider returns precomputed per-token embeddings keyed
//! by caption id and stands in for a frozen pretrained language model. The
//! built-in provider is a small token-embedding table followed by one
//! self-attention layer, trained (or frozen) together with the scorer.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::crosscoherence::attention::{cross_attention, init_attention, AttentionConfig};
use crate::error::{invalid, Error, Result};
use crate::nn::{Graph, ParamStore};

use super::checkpoint::{read_embeddings, write_embeddings};

/// A caption together with the id providers use to look it up.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TextItem {
    pub id: String,
    pub text: String,
}

impl TextItem {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
        }
    }
}

/// Lowercased words of `text`; punctuation separates words and is dropped.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub const OOV_TOKEN: &str = "<oov>";
pub const OOV_ID: usize = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Sorted set of all words in `corpus`, after the OOV entry.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = std::collections::BTreeSet::new();
        for text in corpus {
            set.extend(words(text));
        }
        Self::from_tokens(std::iter::once(OOV_TOKEN.to_string()).chain(set).collect())
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(OOV_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.tokens)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = serde_json::from_str(&text)?;
        if tokens.first().map(String::as_str) != Some(OOV_TOKEN) {
            return Err(Error::format(
                path,
                "vocabulary must start with the OOV token",
            ));
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// Token ids of `text`; unknown words map to [`OOV_ID`].
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let ws = words(text);
    if ws.is_empty() {
        return Err(invalid!("cannot tokenize empty text {text:?}"));
    }
    Ok(ws.iter().map(|w| vocab.id(w)).collect())
}

/// Per-token embeddings with a padding mask (true = real token).
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddingSequence {
    pub embeddings: Array2<f64>,
    pub mask: Vec<bool>,
}

impl TextEmbeddingSequence {
    pub fn new(embeddings: Array2<f64>, mask: Vec<bool>) -> Result<Self> {
        if embeddings.nrows() != mask.len() {
            return Err(Error::Shape(format!(
                "{} embedding rows but {} mask entries",
                embeddings.nrows(),
                mask.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(invalid!("text embedding has no real token"));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("text embedding has non-finite values"));
        }
        Ok(Self { embeddings, mask })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }
}

/// Precomputed embeddings keyed by caption id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FileEmbeddings {
    entries: BTreeMap<String, TextEmbeddingSequence>,
    dim: usize,
}

impl FileEmbeddings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, seq: TextEmbeddingSequence) -> Result<()> {
        if !self.entries.is_empty() && seq.dim() != self.dim {
            return Err(Error::Shape(format!(
                "embedding width {} differs from the file's {}",
                seq.dim(),
                self.dim
            )));
        }
        self.dim = seq.dim();
        self.entries.insert(id.into(), seq);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&TextEmbeddingSequence> {
        self.entries
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("no stored embedding for caption `{id}`")))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TextEmbeddingSequence)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut out = Self::new();
        for (id, emb) in read_embeddings(path)? {
            let mask = vec![true; emb.nrows()];
            let seq = TextEmbeddingSequence::new(emb, mask)
                .map_err(|e| Error::format(path, format!("caption `{id}`: {e}")))?;
            out.insert(id, seq)?;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let records: Vec<(&str, &Array2<f64>)> = self
            .entries
            .iter()
            .map(|(k, v)| (k.as_str(), &v.embeddings))
            .collect();
        write_embeddings(path, &records)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuiltinTextConfig {
    pub dim: usize,
    pub heads: usize,
}

impl Default for BuiltinTextConfig {
    fn default() -> Self {
        Self { dim: 128, heads: 4 }
    }
}

/// Trainable token embeddings plus one self-attention layer, with
/// parameters stored under `text.*`.
#[derive(Debug, Clone, PartialEq)]
pub struct BuiltinTextEncoder {
    pub vocab: Vocabulary,
    pub config: BuiltinTextConfig,
    pub frozen: bool,
}

impl BuiltinTextEncoder {
    fn attention_config(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.config.dim,
            heads: self.config.heads,
            use_residual_norm: true,
        }
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let d = self.config.dim;
        let emb = Array2::from_shape_fn((self.vocab.len(), d), |_| rng.random_range(-1.0..1.0));
        store.insert("text.embedding", emb);
        init_attention(store, "text.self_attn", &self.attention_config(), rng);
    }

    pub fn graph(&self, graph: &mut Graph<'_>, item: &TextItem) -> Result<(Var, Vec<bool>)> {
        let ids = tokenize(&item.text, &self.vocab)?;
        let table = graph.p("text.embedding")?;
        let table_rows = graph.tape.value(table).nrows();
        if table_rows != self.vocab.len() || graph.tape.value(table).ncols() != self.config.dim {
            return Err(Error::Shape(format!(
                "text embedding table is {:?}, vocabulary has {} tokens of width {}",
                graph.tape.value(table).dim(),
                self.vocab.len(),
                self.config.dim
            )));
        }
        let tokens = graph.tape.gather_rows(table, &ids);
        let pos = graph
            .tape
            .constant(positional_encoding(ids.len(), self.config.dim));
        let x = graph.tape.add(tokens, pos);
        let mask = vec![true; ids.len()];
        let y = cross_attention(
            graph,
            "text.self_attn",
            x,
            x,
            Some(&mask),
            &self.attention_config(),
        )?;
        Ok((y, mask))
    }
}

/// Fixed sinusoidal position code.
pub fn positional_encoding(len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, dim), |(pos, i)| {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        let angle = pos as f64 * rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Where per-token text features come from.
#[derive(Debug, Clone, PartialEq)]
pub enum TextProvider {
    File(FileEmbeddings),
    Builtin(BuiltinTextEncoder),
}

impl TextProvider {
    pub fn dim(&self) -> usize {
        match self {
            TextProvider::File(f) => f.dim(),
            TextProvider::Builtin(b) => b.config.dim,
        }
    }

    /// Whether gradients stop at the provider output.
    pub fn is_frozen(&self) -> bool {
        match self {
            TextProvider::File(_) => true,
            TextProvider::Builtin(b) => b.frozen,
        }
    }

    pub fn graph(&self, graph: &mut Graph<'_>, item: &TextItem) -> Result<(Var, Vec<bool>)> {
        match self {
            TextProvider::File(f) => {
                let seq = f.get(&item.id)?;
                Ok((
                    graph.tape.constant(seq.embeddings.clone()),
                    seq.mask.clone(),
                ))
            }
            TextProvider::Builtin(b) => b.graph(graph, item),
        }
    }
}

/// Evaluates the provider on one caption.
pub fn embed_text(
    item: &TextItem,
    provider: &TextProvider,
    params: &ParamStore,
) -> Result<TextEmbeddingSequence> {
    match provider {
        TextProvider::File(f) => f.get(&item.id).cloned(),
        TextProvider::Builtin(_) => {
            let mut graph = Graph::new(params).with_frozen(&[""]);
            let (v, mask) = provider.graph(&mut graph, item)?;
            TextEmbeddingSequence::new(graph.tape.value(v).clone(), mask)
        }
    }
}
