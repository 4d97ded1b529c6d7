//! Latent-space distractor mining and triplet construction.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::pointnet::{encode_global, EncoderConfig, LatentCode};
use crate::encoders::text::TextItem;
use crate::error::{invalid, Error, Result};
use crate::geometry::ColoredPointCloud;
use crate::nn::ParamStore;

/// Fewest class members for which two hard and one easy distractor exist.
pub const MIN_CLASS_SIZE: usize = 4;

/// Seed derived from a master seed and a string key.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Global latent code of every shape. `load` is called once per id.
pub fn compute_latents<F>(
    ids: &[String],
    load: F,
    params: &ParamStore,
    encoder: &EncoderConfig,
) -> Result<BTreeMap<String, LatentCode>>
where
    F: Fn(&str) -> Result<ColoredPointCloud> + Sync,
{
    encoder.check_params(params)?;
    ids.par_iter()
        .map(|id| {
            let cloud = load(id).map_err(|e| Error::NotFound(format!("shape `{id}`: {e}")))?;
            let code = encode_global(params, encoder, &cloud)
                .map_err(|e| invalid!("shape `{id}`: {e}"))?;
            Ok((id.clone(), code))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistractorSet {
    pub reference_id: String,
    /// The two nearest same-class shapes, nearest first.
    pub hard_ids: [String; 2],
    pub easy_id: String,
    pub class_label: String,
}

impl DistractorSet {
    pub fn distractors(&self) -> [(&str, Role); 3] {
        [
            (self.hard_ids[0].as_str(), Role::Hard),
            (self.hard_ids[1].as_str(), Role::Hard),
            (self.easy_id.as_str(), Role::Easy),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedClass {
    pub class_label: String,
    pub members: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MiningOutput {
    /// Sorted by reference id.
    pub sets: Vec<DistractorSet>,
    pub skipped: Vec<SkippedClass>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningConfig {
    pub seed: u64,
    /// Easy distractors are drawn from distances strictly above this
    /// percentile of the reference's same-class distances.
    pub easy_percentile: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            easy_percentile: 75.0,
        }
    }
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn mine_one(
    reference: &str,
    class: &str,
    members: &[&str],
    latents: &BTreeMap<String, LatentCode>,
    cfg: &MiningConfig,
) -> DistractorSet {
    let code = &latents[reference];
    // Members are in id order, so a stable sort on distance breaks ties by id.
    let mut others: Vec<(&str, f64)> = members
        .iter()
        .filter(|&&m| m != reference)
        .map(|&m| (m, code.distance(&latents[m])))
        .collect();
    others.sort_by(|a, b| a.1.total_cmp(&b.1));
    let hard = [others[0].0.to_string(), others[1].0.to_string()];
    let mut dists: Vec<f64> = others.iter().map(|o| o.1).collect();
    dists.sort_by(f64::total_cmp);
    let cut = percentile(&dists, cfg.easy_percentile);
    let mut far: Vec<&str> = others[2..]
        .iter()
        .filter(|o| o.1 > cut)
        .map(|o| o.0)
        .collect();
    far.sort_unstable();
    let easy = if far.is_empty() {
        // Farthest non-hard shape; the lowest id wins among equals.
        let max = others[2..]
            .iter()
            .map(|o| o.1)
            .fold(f64::NEG_INFINITY, f64::max);
        others[2..]
            .iter()
            .filter(|o| o.1 == max)
            .map(|o| o.0)
            .min()
            .expect("≥ 1 candidate")
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, reference));
        far[rng.random_range(0..far.len())]
    };
    DistractorSet {
        reference_id: reference.to_string(),
        hard_ids: hard,
        easy_id: easy.to_string(),
        class_label: class.to_string(),
    }
}

/// Two nearest same-class neighbours as hard distractors and one seeded
/// pick among the far same-class shapes as the easy one, for every shape.
pub fn mine_distractors(
    latents: &BTreeMap<String, LatentCode>,
    class_labels: &BTreeMap<String, String>,
    cfg: &MiningConfig,
) -> Result<MiningOutput> {
    let mut classes: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (id, class) in class_labels {
        if !latents.contains_key(id) {
            return Err(Error::NotFound(format!("latent code for shape `{id}`")));
        }
        classes.entry(class.as_str()).or_default().push(id.as_str());
    }
    if let Some(stray) = latents.keys().find(|id| !class_labels.contains_key(*id)) {
        return Err(Error::NotFound(format!("class label for shape `{stray}`")));
    }
    let mut out = MiningOutput::default();
    for (class, members) in &classes {
        if members.len() < MIN_CLASS_SIZE {
            log::warn!(
                "class `{class}` has {} shapes, skipping distractor mining",
                members.len()
            );
            out.skipped.push(SkippedClass {
                class_label: class.to_string(),
                members: members.len(),
                reason: format!("fewer than {MIN_CLASS_SIZE} shapes"),
            });
            continue;
        }
        let sets: Vec<DistractorSet> = members
            .par_iter()
            .map(|r| mine_one(r, class, members, latents, cfg))
            .collect();
        out.sets.extend(sets);
    }
    out.sets.sort_by(|a, b| a.reference_id.cmp(&b.reference_id));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Reference,
    Hard,
    Easy,
}

/// Candidate shapes for one caption with the index of the described one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub id: String,
    pub shape_ids: Vec<String>,
    pub roles: Vec<Role>,
    pub text_id: String,
    pub text: String,
    pub target: usize,
}

impl Triplet {
    pub fn validate(&self) -> Result<()> {
        let bad = |why: String| invalid!("triplet `{}`: {why}", self.id);
        if self.shape_ids.len() < 2 {
            return Err(bad(format!(
                "{} candidates, need at least 2",
                self.shape_ids.len()
            )));
        }
        if self.roles.len() != self.shape_ids.len() {
            return Err(bad(format!(
                "{} roles for {} shapes",
                self.roles.len(),
                self.shape_ids.len()
            )));
        }
        if self.target >= self.shape_ids.len() {
            return Err(bad(format!("target {} out of range", self.target)));
        }
        let refs: Vec<usize> = (0..self.roles.len())
            .filter(|&i| self.roles[i] == Role::Reference)
            .collect();
        if refs != [self.target] {
            return Err(bad("exactly the target must have the reference role".into()));
        }
        Ok(())
    }

    pub fn reference_id(&self) -> &str {
        &self.shape_ids[self.target]
    }

    pub fn text_item(&self) -> TextItem {
        TextItem::new(self.text_id.clone(), self.text.clone())
    }

    /// One two-candidate triplet per distractor, candidate order preserved.
    pub fn pairs(&self) -> Vec<Triplet> {
        (0..self.shape_ids.len())
            .filter(|&i| i != self.target)
            .map(|i| {
                let keep = [self.target.min(i), self.target.max(i)];
                Triplet {
                    id: format!("{}/{}", self.id, self.shape_ids[i]),
                    shape_ids: keep.iter().map(|&k| self.shape_ids[k].clone()).collect(),
                    roles: keep.iter().map(|&k| self.roles[k]).collect(),
                    text_id: self.text_id.clone(),
                    text: self.text.clone(),
                    target: usize::from(self.target > i),
                }
            })
            .collect()
    }

    /// Role of the single distractor of a two-candidate triplet.
    pub fn distractor_role(&self) -> Option<Role> {
        (self.shape_ids.len() == 2).then(|| self.roles[1 - self.target])
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TripletBuild {
    pub triplets: Vec<Triplet>,
    /// References without any caption.
    pub skipped: Vec<String>,
}

/// One triplet per (reference, caption) with `group_size − 1` distractors
/// drawn from the set and the reference at a seeded random position.
pub fn build_triplets(
    sets: &[DistractorSet],
    captions: &BTreeMap<String, Vec<TextItem>>,
    group_size: usize,
    seed: u64,
) -> Result<TripletBuild> {
    if !(2..=4).contains(&group_size) {
        return Err(invalid!(
            "group size must be between 2 and 4, got {group_size}"
        ));
    }
    let mut out = TripletBuild::default();
    for set in sets {
        let texts = match captions.get(&set.reference_id) {
            Some(t) if !t.is_empty() => t,
            _ => {
                log::warn!(
                    "shape `{}` has no caption, no triplets built",
                    set.reference_id
                );
                out.skipped.push(set.reference_id.clone());
                continue;
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &set.reference_id));
        for text in texts {
            let mut pool = set.distractors().to_vec();
            pool.shuffle(&mut rng);
            let mut chosen: Vec<(&str, Role)> = pool[..group_size - 1].to_vec();
            let target = rng.random_range(0..group_size);
            chosen.insert(target, (set.reference_id.as_str(), Role::Reference));
            out.triplets.push(Triplet {
                id: text.id.clone(),
                shape_ids: chosen.iter().map(|c| c.0.to_string()).collect(),
                roles: chosen.iter().map(|c| c.1).collect(),
                text_id: text.id.clone(),
                text: text.text.clone(),
                target,
            });
        }
    }
    Ok(out)
}

/// Writes one JSON record per line.
pub fn save_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

pub fn load_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}
