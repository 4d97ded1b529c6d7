//! Evaluation protocols: pairwise reference-versus-distractor accuracy and
//! R-precision over sampled caption sets.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crosscoherence::model::CrossCoherenceModel;
use crate::crosscoherence::train::ShapeSource;
use crate::distractors::{derive_seed, Triplet};
use crate::encoders::text::TextItem;
use crate::error::{invalid, Result};

/// R-precision caption set size: the ground truth plus 152 sampled texts.
pub const DEFAULT_SET_SIZE: usize = 153;

/// Coherence between a shape and a caption; higher is more coherent.
/// Implementations must be deterministic.
pub trait Scorer: Sync {
    fn score(&self, shape_id: &str, text: &TextItem) -> Result<f64>;
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn score(&self, shape_id: &str, text: &TextItem) -> Result<f64> {
        (**self).score(shape_id, text)
    }
}

/// The learned metric behind the scorer interface.
pub struct ModelScorer<'a> {
    pub model: &'a CrossCoherenceModel,
    pub shapes: &'a dyn ShapeSource,
}

impl Scorer for ModelScorer<'_> {
    fn score(&self, shape_id: &str, text: &TextItem) -> Result<f64> {
        self.model.score_pair(&self.shapes.shape(shape_id)?, text)
    }
}

/// Same score for everything.
pub struct ConstantScorer(pub f64);

impl Scorer for ConstantScorer {
    fn score(&self, _: &str, _: &TextItem) -> Result<f64> {
        Ok(self.0)
    }
}

/// Uniform score in `[0, 1)` hashed from the seed and the (shape, caption) ids.
pub struct RandomScorer {
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn score(&self, shape_id: &str, text: &TextItem) -> Result<f64> {
        let key = format!("{shape_id}\u{0}{}", text.id);
        Ok(ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &key)).random())
    }
}

/// Applies `f` to every score of the inner scorer.
pub struct MappedScorer<S, F> {
    pub inner: S,
    pub f: F,
}

impl<S: Scorer, F: Fn(f64) -> f64 + Sync> Scorer for MappedScorer<S, F> {
    fn score(&self, shape_id: &str, text: &TextItem) -> Result<f64> {
        Ok((self.f)(self.inner.score(shape_id, text)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub shape_ids: Vec<String>,
    pub text_ids: Vec<String>,
    /// Score of each candidate; the ground truth comes first.
    pub scores: Vec<f64>,
    pub correct: bool,
    /// The ground truth shared the top score with another candidate.
    pub tie: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub seed: Option<u64>,
    pub set_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    /// Free-form label such as the scorer or data subset.
    pub label: String,
    pub accuracy: f64,
    pub correct: usize,
    pub count: usize,
    pub config: EvalConfig,
    pub items: Vec<ItemRecord>,
}

impl EvalReport {
    fn from_items(protocol: &str, config: EvalConfig, items: Vec<ItemRecord>) -> Self {
        let correct = items.iter().filter(|i| i.correct).count();
        let count = items.len();
        Self {
            protocol: protocol.to_string(),
            label: String::new(),
            accuracy: if count == 0 {
                0.0
            } else {
                correct as f64 / count as f64
            },
            correct,
            count,
            config,
            items,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn ties(&self) -> usize {
        self.items.iter().filter(|i| i.tie).count()
    }
}

/// Ground truth (index 0) must score strictly above every other entry.
fn judge(scores: &[f64]) -> (bool, bool) {
    let best_other = scores[1..]
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    (scores[0] > best_other, scores[0] == best_other)
}

/// Share of two-candidate triplets where the reference outscores the
/// distractor. Exact ties are incorrect.
pub fn eval_pairwise(scorer: &dyn Scorer, triplets: &[Triplet]) -> Result<EvalReport> {
    let items = triplets
        .par_iter()
        .map(|t| {
            t.validate()?;
            if t.shape_ids.len() != 2 {
                return Err(invalid!(
                    "triplet `{}` has {} shapes, pairwise needs 2",
                    t.id,
                    t.shape_ids.len()
                ));
            }
            let text = t.text_item();
            let reference = &t.shape_ids[t.target];
            let distractor = &t.shape_ids[1 - t.target];
            let scores = vec![
                scorer.score(reference, &text)?,
                scorer.score(distractor, &text)?,
            ];
            let (correct, tie) = judge(&scores);
            Ok(ItemRecord {
                item_id: t.id.clone(),
                shape_ids: vec![reference.clone(), distractor.clone()],
                text_ids: vec![t.text_id.clone()],
                scores,
                correct,
                tie,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_items(
        "pairwise",
        EvalConfig {
            seed: None,
            set_size: None,
        },
        items,
    ))
}

/// A shape with one of its true captions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalPair {
    pub shape_id: String,
    pub text: TextItem,
}

/// For every pair, scores the true caption against `set_size − 1` captions
/// sampled without replacement from the pool (excluding any with the same
/// id or identical text) and counts it correct when the true caption wins
/// outright.
pub fn eval_rprecision(
    scorer: &dyn Scorer,
    pairs: &[RetrievalPair],
    pool: &[TextItem],
    set_size: usize,
    seed: u64,
) -> Result<EvalReport> {
    if set_size < 2 {
        return Err(invalid!("set size must be at least 2, got {set_size}"));
    }
    let items = pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let candidates: Vec<&TextItem> = pool
                .iter()
                .filter(|t| t.id != pair.text.id && t.text != pair.text.text)
                .collect();
            if candidates.len() < set_size - 1 {
                return Err(invalid!(
                    "pair `{}`/`{}`: pool has {} usable captions, need {}",
                    pair.shape_id,
                    pair.text.id,
                    candidates.len(),
                    set_size - 1
                ));
            }
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("{i}\u{0}{}", pair.text.id)));
            let mut texts = vec![&pair.text];
            texts.extend(
                sample(&mut rng, candidates.len(), set_size - 1)
                    .into_iter()
                    .map(|k| candidates[k]),
            );
            let scores = texts
                .iter()
                .map(|t| scorer.score(&pair.shape_id, t))
                .collect::<Result<Vec<_>>>()?;
            let (correct, tie) = judge(&scores);
            Ok(ItemRecord {
                item_id: format!("{}/{}", pair.shape_id, pair.text.id),
                shape_ids: vec![pair.shape_id.clone()],
                text_ids: texts.iter().map(|t| t.id.clone()).collect(),
                scores,
                correct,
                tie,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_items(
        "r-precision",
        EvalConfig {
            seed: Some(seed),
            set_size: Some(set_size),
        },
        items,
    ))
}

/// Unique captions of the given pairs, first occurrence order.
pub fn text_pool(pairs: &[RetrievalPair]) -> Vec<TextItem> {
    let mut seen = HashSet::new();
    pairs
        .iter()
        .filter(|p| seen.insert(p.text.id.clone()))
        .map(|p| p.text.clone())
        .collect()
}

/// Plain-text table with one row per report.
pub fn render_table(reports: &[EvalReport]) -> String {
    let rows: Vec<[String; 6]> = reports
        .iter()
        .map(|r| {
            [
                r.protocol.clone(),
                r.label.clone(),
                format!("{:.2}%", 100.0 * r.accuracy),
                format!("{}/{}", r.correct, r.count),
                r.ties().to_string(),
                r.config.set_size.map_or("-".into(), |s| s.to_string()),
            ]
        })
        .collect();
    let header = [
        "protocol", "label", "accuracy", "correct", "ties", "set size",
    ]
    .map(String::from);
    let mut widths = header.clone().map(|h| h.len());
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    for row in std::iter::once(&header).chain(&rows) {
        let cells: Vec<String> = row
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        let _ = writeln!(out, "| {} |", cells.join(" | "));
        if std::ptr::eq(row, &header) {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            let _ = writeln!(out, "|-{}-|", rule.join("-|-"));
        }
    }
    out
}
