//! Glue between the stages of a run: distractor mining within splits,
//! triplet construction from manifest records, encoder feature caching
//! and evaluation inputs.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rayon::prelude::*;

use crate::crosscoherence::{CrossCoherenceModel, ShapeInput};
use crate::datasets::{filter_unambiguous, DatasetManifest, Split};
use crate::distractors::{
    build_triplets, compute_latents, mine_distractors, MiningConfig, MiningOutput, Role, Triplet,
};
use crate::encoders::{EncoderConfig, LatentCode, TextItem, Vocabulary};
use crate::error::{invalid, Error, Result};
use crate::nn::ParamStore;
use crate::protocols::RetrievalPair;

pub const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

pub fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

/// Latent codes of every shape in the manifest.
pub fn manifest_latents(
    manifest: &DatasetManifest,
    params: &ParamStore,
    encoder: &EncoderConfig,
) -> Result<BTreeMap<String, LatentCode>> {
    compute_latents(
        &manifest.ids(),
        |id| manifest.load_cloud(id),
        params,
        encoder,
    )
}

/// Mines distractors separately inside each split, so held-out references
/// only ever meet held-out distractors, and stores the sets on the records.
/// Records of skipped classes lose any previous set.
pub fn mine_by_split(
    manifest: &mut DatasetManifest,
    latents: &BTreeMap<String, LatentCode>,
    cfg: &MiningConfig,
) -> Result<Vec<(Split, MiningOutput)>> {
    let mut outputs = Vec::new();
    for split in SPLITS {
        let labels: BTreeMap<String, String> = manifest
            .split(split)
            .map(|r| (r.shape_id.clone(), r.class_label.clone()))
            .collect();
        let codes: BTreeMap<String, LatentCode> = labels
            .keys()
            .map(|id| {
                latents
                    .get(id)
                    .cloned()
                    .map(|c| (id.clone(), c))
                    .ok_or_else(|| Error::NotFound(format!("latent code for shape `{id}`")))
            })
            .collect::<Result<_>>()?;
        outputs.push((split, mine_distractors(&codes, &labels, cfg)?));
    }
    let by_ref: HashMap<&str, _> = outputs
        .iter()
        .flat_map(|(_, o)| o.sets.iter().map(|s| (s.reference_id.as_str(), s)))
        .collect();
    for record in &mut manifest.records {
        record.distractors = by_ref.get(record.shape_id.as_str()).map(|s| (*s).clone());
    }
    Ok(outputs)
}

/// Triplets of one split built from the distractor sets on the records.
pub fn split_triplets(
    manifest: &DatasetManifest,
    split: Split,
    group_size: usize,
    seed: u64,
) -> Result<Vec<Triplet>> {
    let sets: Vec<_> = manifest
        .split(split)
        .filter_map(|r| r.distractors.clone())
        .collect();
    let captions = manifest.captions();
    Ok(build_triplets(&sets, &captions, group_size, seed)?.triplets)
}

/// Splits every triplet into two-candidate items and, when the manifest
/// carries attributes, keeps only those whose caption contradicts the
/// distractor. Returns the items and the number dropped.
pub fn unambiguous_pairs(
    manifest: &DatasetManifest,
    triplets: &[Triplet],
) -> Result<(Vec<Triplet>, usize)> {
    let pairs: Vec<Triplet> = triplets.iter().flat_map(Triplet::pairs).collect();
    let attributes = manifest.attributes();
    if attributes.is_empty() {
        return Ok((pairs, 0));
    }
    filter_unambiguous(pairs, &attributes)
}

/// Two-candidate items whose distractor has the given role.
pub fn pairs_with_role(pairs: &[Triplet], role: Role) -> Vec<Triplet> {
    pairs
        .iter()
        .filter(|p| p.distractor_role() == Some(role))
        .cloned()
        .collect()
}

/// Vocabulary over the captions of the given splits.
pub fn caption_vocabulary(manifest: &DatasetManifest, splits: &[Split]) -> Vocabulary {
    let captions: Vec<&str> = manifest
        .records
        .iter()
        .filter(|r| splits.contains(&r.split))
        .flat_map(|r| r.captions.iter().map(String::as_str))
        .collect();
    Vocabulary::build(captions)
}

/// Scorer inputs for the given shapes. With a frozen encoder the stage-2
/// features are computed once here; otherwise the raw clouds are kept.
pub fn shape_inputs(
    model: &CrossCoherenceModel,
    manifest: &DatasetManifest,
    ids: &[String],
) -> Result<HashMap<String, ShapeInput>> {
    ids.par_iter()
        .map(|id| {
            let cloud = manifest.load_cloud(id)?;
            let input = if model.config.freeze_encoder {
                let features = model
                    .local_features(&cloud)
                    .map_err(|e| invalid!("shape `{id}`: {e}"))?;
                ShapeInput::Features(Arc::new(features))
            } else {
                ShapeInput::Cloud(Arc::new(cloud))
            };
            Ok((id.clone(), input))
        })
        .collect()
}

/// Every shape of a split paired with each of its captions.
pub fn retrieval_pairs(manifest: &DatasetManifest, split: Split) -> Vec<RetrievalPair> {
    let captions = manifest.captions();
    manifest
        .split(split)
        .flat_map(|r| {
            captions[&r.shape_id].iter().map(|t| RetrievalPair {
                shape_id: r.shape_id.clone(),
                text: t.clone(),
            })
        })
        .collect()
}

/// Distinct captions of a split, used as the R-precision pool.
pub fn caption_pool(manifest: &DatasetManifest, split: Split) -> Vec<TextItem> {
    crate::protocols::text_pool(&retrieval_pairs(manifest, split))
}

/// Shape ids referenced by any of the triplets, sorted.
pub fn referenced_ids(triplets: &[Triplet]) -> Vec<String> {
    let mut ids: Vec<String> = triplets
        .iter()
        .flat_map(|t| t.shape_ids.iter().cloned())
        .collect();
    ids.sort();
    ids.dedup();
    ids
}
