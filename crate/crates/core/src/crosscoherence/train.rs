//! Cross-entropy training of the scorer over groups of candidate shapes.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{CrossCoherenceModel, ScorerConfig, ShapeInput};
use crate::distractors::Triplet;
use crate::encoders::text::TextItem;
use crate::error::{invalid, Error, Result};
use crate::nn::{Adam, AdamConfig, GradBuffer};

/// Resolves shape ids to scorer inputs.
pub trait ShapeSource: Sync {
    fn shape(&self, id: &str) -> Result<ShapeInput>;
}

impl ShapeSource for HashMap<String, ShapeInput> {
    fn shape(&self, id: &str) -> Result<ShapeInput> {
        self.get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("shape `{id}`")))
    }
}

/// One training example: a caption with its candidates, one of which matches.
#[derive(Debug, Clone)]
pub struct TrainGroup {
    pub shapes: Vec<ShapeInput>,
    pub text: TextItem,
    pub target: usize,
}

impl TrainGroup {
    pub fn from_triplet(triplet: &Triplet, source: &dyn ShapeSource) -> Result<Self> {
        triplet.validate()?;
        Ok(Self {
            shapes: triplet
                .shape_ids
                .iter()
                .map(|id| source.shape(id))
                .collect::<Result<_>>()?,
            text: triplet.text_item(),
            target: triplet.target,
        })
    }
}

/// Mean cross-entropy of a batch without touching the parameters.
pub fn batch_loss(model: &CrossCoherenceModel, batch: &[TrainGroup]) -> Result<f64> {
    if batch.is_empty() {
        return Err(invalid!("empty batch"));
    }
    let losses = batch
        .par_iter()
        .map(|g| model.group_loss(&g.shapes, &g.text, g.target))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / batch.len() as f64)
}

/// One optimizer update on the mean batch cross-entropy. Returns the loss
/// measured before the update.
pub fn train_step(
    model: &mut CrossCoherenceModel,
    opt: &mut Adam,
    batch: &[TrainGroup],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(invalid!("empty batch"));
    }
    let results = batch
        .par_iter()
        .map(|g| model.group_loss_and_grad(&g.shapes, &g.text, g.target))
        .collect::<Result<Vec<_>>>()?;
    let mut grads = GradBuffer::zeros_like(&model.params);
    let mut total = 0.0;
    for (loss, g) in results {
        total += loss;
        grads.accumulate(g);
    }
    let loss = total / batch.len() as f64;
    if !loss.is_finite() || !grads.all_finite() {
        let texts: Vec<&str> = batch.iter().map(|g| g.text.id.as_str()).collect();
        return Err(Error::Diverged(format!(
            "cross-entropy became {loss} after {} updates (captions {texts:?})",
            opt.steps()
        )));
    }
    grads.scale(1.0 / batch.len() as f64);
    opt.update(&mut model.params, &grads);
    Ok(loss)
}

/// Fraction of (reference, distractor) pairs where the reference scores
/// strictly higher. Every distractor of every triplet counts once.
pub fn pairwise_accuracy(
    model: &CrossCoherenceModel,
    triplets: &[Triplet],
    source: &dyn ShapeSource,
) -> Result<f64> {
    let outcomes = triplets
        .par_iter()
        .map(|t| {
            t.validate()?;
            let text = t.text_item();
            let logits = t
                .shape_ids
                .iter()
                .map(|id| model.score_pair(&source.shape(id)?, &text))
                .collect::<Result<Vec<_>>>()?;
            let reference = logits[t.target];
            let wins = logits
                .iter()
                .enumerate()
                .filter(|&(i, &l)| i != t.target && reference > l)
                .count();
            Ok((wins, logits.len() - 1))
        })
        .collect::<Result<Vec<_>>>()?;
    let (wins, total) = outcomes
        .iter()
        .fold((0, 0), |(w, n), (a, b)| (w + a, n + b));
    if total == 0 {
        return Err(invalid!("no pairs to evaluate"));
    }
    Ok(wins as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Candidates per training group; larger triplets are subsampled to
    /// the reference plus `group_size − 1` random distractors each epoch.
    pub group_size: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-4,
            group_size: 2,
            patience: Some(10),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean pre-update loss over the epoch's batches.
    pub train_loss: f64,
    pub val_accuracy: f64,
    /// Pre-update loss of every batch.
    pub step_losses: Vec<f64>,
}

/// Everything needed to reproduce and audit a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub fit: FitConfig,
    pub scorer: ScorerConfig,
    pub optimizer: AdamConfig,
    pub train_triplets: usize,
    pub val_triplets: usize,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    /// Model with the parameters of the best validation epoch.
    pub model: CrossCoherenceModel,
    pub metadata: RunMetadata,
}

fn sample_group(triplet: &Triplet, group_size: usize, rng: &mut ChaCha8Rng) -> Triplet {
    if triplet.shape_ids.len() <= group_size {
        return triplet.clone();
    }
    let mut others: Vec<usize> = (0..triplet.shape_ids.len())
        .filter(|&i| i != triplet.target)
        .collect();
    others.shuffle(rng);
    let mut chosen = vec![triplet.target];
    chosen.extend_from_slice(&others[..group_size - 1]);
    chosen.shuffle(rng);
    Triplet {
        shape_ids: chosen
            .iter()
            .map(|&i| triplet.shape_ids[i].clone())
            .collect(),
        roles: chosen.iter().map(|&i| triplet.roles[i]).collect(),
        target: chosen
            .iter()
            .position(|&i| i == triplet.target)
            .expect("reference kept"),
        ..triplet.clone()
    }
}

/// Trains the scorer with seeded shuffled mini-batches and keeps the
/// parameters of the epoch with the best validation pairwise accuracy.
pub fn fit(
    mut model: CrossCoherenceModel,
    train: &[Triplet],
    val: &[Triplet],
    source: &dyn ShapeSource,
    config: &FitConfig,
) -> Result<FitOutput> {
    if train.is_empty() || val.is_empty() {
        return Err(invalid!(
            "training needs non-empty splits (train {}, val {})",
            train.len(),
            val.len()
        ));
    }
    if config.batch_size == 0 || config.group_size < 2 || config.epochs == 0 {
        return Err(invalid!(
            "batch size ≥ 1, group size ≥ 2 and epochs ≥ 1 are required"
        ));
    }
    for t in train.iter().chain(val) {
        t.validate()?;
    }
    let optimizer = AdamConfig {
        learning_rate: config.learning_rate,
        ..Default::default()
    };
    let mut opt = Adam::new(optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best = (0, f64::NEG_INFINITY, model.params.clone());
    let mut stale = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut step_losses = Vec::new();
        for chunk in order.chunks(config.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| {
                    TrainGroup::from_triplet(
                        &sample_group(&train[i], config.group_size, &mut rng),
                        source,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            step_losses.push(train_step(&mut model, &mut opt, &batch)?);
        }
        let train_loss = step_losses.iter().sum::<f64>() / step_losses.len() as f64;
        let val_accuracy = pairwise_accuracy(&model, val, source)?;
        log::info!("epoch {epoch}: train loss {train_loss:.4}, val accuracy {val_accuracy:.4}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_accuracy,
            step_losses,
        });
        if val_accuracy > best.1 {
            best = (epoch, val_accuracy, model.params.clone());
            stale = 0;
        } else {
            stale += 1;
            if config.patience.is_some_and(|p| stale >= p) {
                log::info!("no validation improvement for {stale} epochs, stopping");
                break;
            }
        }
    }
    let (best_epoch, best_val_accuracy, params) = best;
    model.params = params;
    let metadata = RunMetadata {
        seed: config.seed,
        fit: config.clone(),
        scorer: model.config.clone(),
        optimizer,
        train_triplets: train.len(),
        val_triplets: val.len(),
        history,
        best_epoch,
        best_val_accuracy,
    };
    Ok(FitOutput { model, metadata })
}
