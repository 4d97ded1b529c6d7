//! The coherence scorer. Projected shape and text tokens pass through
//! bilateral cross-attention before a pooled MLP head scores them.

use std::sync::Arc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{cross_attention, init_attention, AttentionConfig};
use crate::autodiff::{softmax_rows_masked, Var};
use crate::encoders::pointnet::{local_graph, prepare_cloud, EncoderConfig, LocalFeatureSet};
use crate::encoders::text::{TextItem, TextProvider};
use crate::error::{invalid, Error, Result};
use crate::geometry::ColoredPointCloud;
use crate::nn::{init_linear, init_mlp, init_zero_linear, GradBuffer, Graph, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub attention: AttentionConfig,
    /// Number of stacked bilateral blocks.
    pub depth: usize,
    /// Hidden widths of the score head; a final linear layer maps to 1.
    pub head_widths: Vec<usize>,
    pub shape_dim: usize,
    /// Prepend each region's center position to its feature row.
    pub region_positions: bool,
    /// Hidden ReLU layers applied to each shape token before the linear
    /// projection; empty for a purely linear projection.
    pub shape_hidden: Vec<usize>,
    pub text_dim: usize,
    /// Start the last head layer at zero so every group begins uniform.
    pub zero_init_head: bool,
    pub freeze_encoder: bool,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            attention: AttentionConfig::default(),
            depth: 1,
            head_widths: vec![256, 128],
            shape_dim: 256,
            region_positions: true,
            shape_hidden: Vec::new(),
            text_dim: 128,
            zero_init_head: true,
            freeze_encoder: true,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.depth == 0 {
            return Err(invalid!("at least one bilateral block is required"));
        }
        if self.head_widths.contains(&0)
            || self.shape_hidden.contains(&0)
            || self.shape_dim == 0
            || self.text_dim == 0
        {
            return Err(invalid!("scorer widths must be positive"));
        }
        Ok(())
    }

    /// Width of one shape token before projection.
    pub fn shape_token_width(&self) -> usize {
        self.shape_dim + if self.region_positions { 3 } else { 0 }
    }

    fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let d = self.attention.d_model;
        store.insert("cc.shape_norm.shift", Array2::zeros((1, self.shape_dim)));
        store.insert("cc.shape_norm.scale", Array2::ones((1, self.shape_dim)));
        init_mlp(
            store,
            "cc.shape_mlp",
            self.shape_token_width(),
            &self.shape_hidden,
            rng,
        );
        let proj_in = self
            .shape_hidden
            .last()
            .copied()
            .unwrap_or(self.shape_token_width());
        init_linear(store, "cc.shape_proj", proj_in, d, rng);
        init_linear(store, "cc.text_proj", self.text_dim, d, rng);
        for b in 0..self.depth {
            init_attention(
                store,
                &format!("cc.block{b}.shape_to_text"),
                &self.attention,
                rng,
            );
            init_attention(
                store,
                &format!("cc.block{b}.text_to_shape"),
                &self.attention,
                rng,
            );
        }
        init_mlp(store, "cc.head", 2 * d, &self.head_widths, rng);
        let last = self.head_widths.last().copied().unwrap_or(2 * d);
        if self.zero_init_head {
            init_zero_linear(store, "cc.head.out", last, 1);
        } else {
            init_linear(store, "cc.head.out", last, 1, rng);
        }
    }
}

/// Candidate shape for scoring: a raw cloud, or stage-2 features already
/// computed with the (frozen) encoder.
#[derive(Debug, Clone)]
pub enum ShapeInput {
    Cloud(Arc<ColoredPointCloud>),
    Features(Arc<LocalFeatureSet>),
}

/// Logits and softmax probabilities over a group of candidate shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl GroupScore {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let row = Array2::from_shape_vec((1, logits.len()), logits.clone()).expect("row");
        let probabilities = softmax_rows_masked(&row, None).iter().copied().collect();
        Self {
            logits,
            probabilities,
        }
    }

    /// Index of the highest logit, lowest index on ties.
    pub fn prediction(&self) -> usize {
        let mut best = 0;
        for (i, &l) in self.logits.iter().enumerate() {
            if l > self.logits[best] {
                best = i;
            }
        }
        best
    }
}

/// One bilateral block: shape queries over text keys/values (text padding
/// masked) and text queries over shape keys/values.
pub fn bilateral_block(
    graph: &mut Graph<'_>,
    prefix: &str,
    shape: Var,
    text: Var,
    text_mask: &[bool],
    cfg: &AttentionConfig,
) -> Result<(Var, Var)> {
    let shape_att = cross_attention(
        graph,
        &format!("{prefix}.shape_to_text"),
        shape,
        text,
        Some(text_mask),
        cfg,
    )?;
    let text_att = cross_attention(
        graph,
        &format!("{prefix}.text_to_shape"),
        text,
        shape,
        None,
        cfg,
    )?;
    Ok((shape_att, text_att))
}

/// Scorer weights plus the encoders feeding it.
#[derive(Debug, Clone)]
pub struct CrossCoherenceModel {
    pub config: ScorerConfig,
    pub encoder: EncoderConfig,
    pub text: TextProvider,
    /// `encoder.*`, `cc.*` and, for the built-in text provider, `text.*`.
    pub params: ParamStore,
}

impl CrossCoherenceModel {
    /// Fresh scorer. Encoder weights are copied from `encoder_params`
    /// (normally a trained autoencoder) or initialized when absent.
    pub fn new(
        config: ScorerConfig,
        encoder: EncoderConfig,
        text: TextProvider,
        encoder_params: Option<&ParamStore>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        encoder.validate()?;
        if config.shape_dim != encoder.local_width() {
            return Err(Error::Shape(format!(
                "scorer expects {}-wide shape features, encoder produces {}",
                config.shape_dim,
                encoder.local_width()
            )));
        }
        if config.text_dim != text.dim() {
            return Err(Error::Shape(format!(
                "scorer expects {}-wide text features, provider produces {}",
                config.text_dim,
                text.dim()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        match encoder_params {
            Some(src) => {
                encoder.check_params(src)?;
                params.absorb_prefixed(src, "encoder.");
            }
            None => encoder.init_params(&mut params, &mut rng),
        }
        if let TextProvider::Builtin(b) = &text {
            b.init_params(&mut params, &mut rng);
        }
        config.init_params(&mut params, &mut rng);
        Ok(Self {
            config,
            encoder,
            text,
            params,
        })
    }

    /// Rebuilds a model around stored parameters.
    pub fn from_params(
        config: ScorerConfig,
        encoder: EncoderConfig,
        text: TextProvider,
        params: ParamStore,
    ) -> Result<Self> {
        config.validate()?;
        encoder.check_params(&params)?;
        let d = config.attention.d_model;
        params.expect_dim("cc.shape_norm.scale", (1, config.shape_dim))?;
        let proj_in = config
            .shape_hidden
            .last()
            .copied()
            .unwrap_or(config.shape_token_width());
        params.expect_dim("cc.shape_proj.weight", (proj_in, d))?;
        params.expect_dim("cc.text_proj.weight", (config.text_dim, d))?;
        if config.text_dim != text.dim() {
            return Err(Error::Shape(format!(
                "checkpoint expects {}-wide text features, provider produces {}",
                config.text_dim,
                text.dim()
            )));
        }
        Ok(Self {
            config,
            encoder,
            text,
            params,
        })
    }

    pub(crate) fn frozen_prefixes(&self) -> Vec<&'static str> {
        let mut out = vec!["cc.shape_norm."];
        if self.config.freeze_encoder {
            out.push("encoder.");
        }
        if self.text.is_frozen() {
            out.push("text.");
        }
        out
    }

    pub fn graph(&self) -> Graph<'_> {
        Graph::new(&self.params).with_frozen(&self.frozen_prefixes())
    }

    /// Sets the fixed feature standardization (`cc.shape_norm.*`) to the
    /// per-dimension mean and standard deviation over every region of the
    /// given feature sets. Constant dimensions keep scale 1.
    pub fn calibrate_shape_norm(&mut self, sets: &[LocalFeatureSet]) -> Result<()> {
        let d = self.config.shape_dim;
        let rows: usize = sets.iter().map(|s| s.features.nrows()).sum();
        if rows == 0 {
            return Err(invalid!("calibration needs at least one feature row"));
        }
        if let Some(bad) = sets.iter().find(|s| s.features.ncols() != d) {
            return Err(Error::Shape(format!(
                "calibration features are {} wide, scorer expects {d}",
                bad.features.ncols()
            )));
        }
        let mut sum = Array2::<f64>::zeros((1, d));
        let mut sq = Array2::<f64>::zeros((1, d));
        for s in sets {
            for row in s.features.rows() {
                for (j, v) in row.iter().enumerate() {
                    sum[[0, j]] += v;
                    sq[[0, j]] += v * v;
                }
            }
        }
        let n = rows as f64;
        let mean = sum / n;
        let var = (sq / n - &mean * &mean).mapv(|v| v.max(0.0));
        let scale = var.mapv(|v| if v.sqrt() > 1e-8 { 1.0 / v.sqrt() } else { 1.0 });
        self.params.insert("cc.shape_norm.shift", -mean);
        self.params.insert("cc.shape_norm.scale", scale);
        Ok(())
    }

    /// Stage-2 features of a cloud under the current encoder weights.
    pub fn local_features(&self, cloud: &ColoredPointCloud) -> Result<LocalFeatureSet> {
        crate::encoders::pointnet::encode_local(&self.params, &self.encoder, cloud)
    }

    fn shape_node(&self, graph: &mut Graph<'_>, shape: &ShapeInput) -> Result<Var> {
        let (positions, features) = match shape {
            ShapeInput::Cloud(cloud) => {
                let prepared = prepare_cloud(cloud, self.encoder.min_points)?;
                local_graph(graph, &self.encoder, &prepared)?
            }
            ShapeInput::Features(f) => {
                if !self.config.freeze_encoder {
                    return Err(invalid!(
                        "precomputed shape features cannot be used while the encoder is trainable"
                    ));
                }
                if f.features.ncols() != self.config.shape_dim
                    || f.positions.len() != f.features.nrows()
                {
                    return Err(Error::Shape(format!(
                        "shape features are {}x{} with {} positions, scorer expects width {}",
                        f.features.nrows(),
                        f.features.ncols(),
                        f.positions.len(),
                        self.config.shape_dim
                    )));
                }
                (f.positions.clone(), graph.tape.constant(f.features.clone()))
            }
        };
        let shift = graph.p("cc.shape_norm.shift")?;
        let scale = graph.p("cc.shape_norm.scale")?;
        let shifted = graph.tape.add_row(features, shift);
        let features = graph.tape.mul_row(shifted, scale);
        if !self.config.region_positions {
            return Ok(features);
        }
        let pos = Array2::from_shape_fn((positions.len(), 3), |(i, c)| positions[i][c]);
        let pos = graph.tape.constant(pos);
        Ok(graph.tape.concat_cols(&[pos, features]))
    }

    /// Logit node of one (shape, text) pair.
    pub fn pair_logit(
        &self,
        graph: &mut Graph<'_>,
        shape: &ShapeInput,
        text: &TextItem,
    ) -> Result<Var> {
        let shape_feats = self.shape_node(graph, shape)?;
        let (text_feats, mask) = self.text.graph(graph, text)?;
        let hidden = graph.mlp(
            "cc.shape_mlp",
            self.config.shape_hidden.len(),
            shape_feats,
            true,
        )?;
        let mut s = graph.linear("cc.shape_proj", hidden)?;
        let mut t = graph.linear("cc.text_proj", text_feats)?;
        for b in 0..self.config.depth {
            (s, t) = bilateral_block(
                graph,
                &format!("cc.block{b}"),
                s,
                t,
                &mask,
                &self.config.attention,
            )?;
        }
        let shape_pool = graph.tape.mean_rows(s);
        let real = mask.iter().filter(|&&m| m).count() as f64;
        let weights: Vec<f64> = mask
            .iter()
            .map(|&m| if m { 1.0 / real } else { 0.0 })
            .collect();
        let text_pool = graph.tape.weighted_sum_rows(t, &weights);
        let joint = graph.tape.concat_cols(&[shape_pool, text_pool]);
        let h = graph.mlp("cc.head", self.config.head_widths.len(), joint, true)?;
        graph.linear("cc.head.out", h)
    }

    pub fn score_pair(&self, shape: &ShapeInput, text: &TextItem) -> Result<f64> {
        let mut graph = Graph::new(&self.params).with_frozen(&[""]);
        let logit = self.pair_logit(&mut graph, shape, text)?;
        Ok(graph.tape.scalar(logit))
    }

    pub fn score_group(&self, text: &TextItem, shapes: &[ShapeInput]) -> Result<GroupScore> {
        if shapes.len() < 2 {
            return Err(invalid!(
                "a group needs at least 2 candidates, got {}",
                shapes.len()
            ));
        }
        let logits = shapes
            .iter()
            .map(|s| self.score_pair(s, text))
            .collect::<Result<Vec<_>>>()?;
        Ok(GroupScore::from_logits(logits))
    }

    /// Cross-entropy of one group against `target` and its gradient.
    pub fn group_loss_and_grad(
        &self,
        shapes: &[ShapeInput],
        text: &TextItem,
        target: usize,
    ) -> Result<(f64, GradBuffer)> {
        if target >= shapes.len() {
            return Err(invalid!(
                "target {target} out of range for {} candidates",
                shapes.len()
            ));
        }
        let mut graph = self.graph();
        let logits = shapes
            .iter()
            .map(|s| self.pair_logit(&mut graph, s, text))
            .collect::<Result<Vec<_>>>()?;
        let row = graph.tape.concat_cols(&logits);
        let loss = graph.tape.cross_entropy(row, target);
        let value = graph.tape.scalar(loss);
        let mut grads = graph.tape.backward(loss);
        Ok((value, graph.collect(&mut grads)))
    }

    /// Cross-entropy of one group without gradients.
    pub fn group_loss(&self, shapes: &[ShapeInput], text: &TextItem, target: usize) -> Result<f64> {
        if target >= shapes.len() {
            return Err(invalid!(
                "target {target} out of range for {} candidates",
                shapes.len()
            ));
        }
        let score = self.score_group(text, shapes)?;
        Ok(-score.probabilities[target].ln())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::encoders::pointnet::SetAbstractionConfig;
    use crate::encoders::text::{BuiltinTextConfig, BuiltinTextEncoder, Vocabulary};
    use rand::Rng;

    pub(crate) fn tiny_model(seed: u64, zero_head: bool) -> CrossCoherenceModel {
        let encoder = EncoderConfig {
            stage1: SetAbstractionConfig {
                num_centers: 16,
                radius: 0.5,
                group_size: 8,
                mlp_widths: vec![8],
            },
            stage2: SetAbstractionConfig {
                num_centers: 6,
                radius: 0.9,
                group_size: 8,
                mlp_widths: vec![12],
            },
            global_mlp: vec![8],
            min_points: 16,
        };
        let text = TextProvider::Builtin(BuiltinTextEncoder {
            vocab: Vocabulary::build(["a red chair with four legs", "a blue table"]),
            config: BuiltinTextConfig { dim: 8, heads: 2 },
            frozen: true,
        });
        let config = ScorerConfig {
            attention: AttentionConfig {
                d_model: 8,
                heads: 2,
                use_residual_norm: true,
            },
            depth: 1,
            head_widths: vec![8],
            shape_dim: 12,
            region_positions: true,
            shape_hidden: vec![6],
            text_dim: 8,
            zero_init_head: zero_head,
            freeze_encoder: true,
        };
        CrossCoherenceModel::new(config, encoder, text, None, seed).unwrap()
    }

    fn cloud(rng: &mut impl Rng, n: usize) -> Arc<ColoredPointCloud> {
        let points = (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let colors = (0..n)
            .map(|_| {
                [
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                ]
            })
            .collect();
        Arc::new(ColoredPointCloud::new(points, colors).unwrap())
    }

    #[test]
    fn zero_head_scores_zero() {
        let model = tiny_model(1, true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = ShapeInput::Cloud(cloud(&mut rng, 40));
        let t = TextItem::new("t", "a red chair");
        assert_eq!(model.score_pair(&s, &t).unwrap(), 0.0);
    }

    #[test]
    fn scoring_is_deterministic_and_features_match_clouds() {
        let model = tiny_model(2, false);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = cloud(&mut rng, 40);
        let t = TextItem::new("t", "a blue table with four legs");
        let a = model.score_pair(&ShapeInput::Cloud(c.clone()), &t).unwrap();
        let b = model.score_pair(&ShapeInput::Cloud(c.clone()), &t).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let f = Arc::new(model.local_features(&c).unwrap());
        assert_eq!(model.score_pair(&ShapeInput::Features(f), &t).unwrap(), a);
    }

    #[test]
    fn duplicated_candidates_are_uniform() {
        let model = tiny_model(3, false);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = ShapeInput::Cloud(cloud(&mut rng, 40));
        let t = TextItem::new("t", "a red chair");
        let g = model.score_group(&t, &[c.clone(), c.clone(), c]).unwrap();
        for p in &g.probabilities {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(g.prediction(), 0);
    }

    #[test]
    fn group_needs_two_candidates() {
        let model = tiny_model(4, false);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = ShapeInput::Cloud(cloud(&mut rng, 40));
        assert!(model
            .score_group(&TextItem::new("t", "chair"), &[c])
            .is_err());
    }

    #[test]
    fn group_probabilities_sum_to_one() {
        let model = tiny_model(5, false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shapes: Vec<_> = (0..4)
            .map(|_| ShapeInput::Cloud(cloud(&mut rng, 40)))
            .collect();
        let g = model
            .score_group(&TextItem::new("t", "a blue table"), &shapes)
            .unwrap();
        assert!((g.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(g.probabilities.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn argmax_ignores_constant_shift() {
        let base = GroupScore::from_logits(vec![0.3, 1.7, -0.2, 1.7]);
        for shift in [-100.0, -1.5, 0.0, 3.0, 1e6] {
            let shifted = GroupScore::from_logits(base.logits.iter().map(|l| l + shift).collect());
            assert_eq!(shifted.prediction(), base.prediction());
        }
        assert_eq!(base.prediction(), 1);
    }

    #[test]
    fn calibration_standardizes_features_and_stays_frozen() {
        let mut model = tiny_model(6, false);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sets: Vec<_> = (0..5)
            .map(|_| model.local_features(&cloud(&mut rng, 40)).unwrap())
            .collect();
        model.calibrate_shape_norm(&sets).unwrap();
        let shift = model.params.require("cc.shape_norm.shift").unwrap().clone();
        let scale = model.params.require("cc.shape_norm.scale").unwrap().clone();
        let rows: Vec<Vec<f64>> = sets
            .iter()
            .flat_map(|s| {
                s.features
                    .rows()
                    .into_iter()
                    .map(|r| r.to_vec())
                    .collect::<Vec<_>>()
            })
            .collect();
        for j in 0..model.config.shape_dim {
            let z: Vec<f64> = rows
                .iter()
                .map(|r| (r[j] + shift[[0, j]]) * scale[[0, j]])
                .collect();
            let mean = z.iter().sum::<f64>() / z.len() as f64;
            let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.len() as f64;
            assert!(mean.abs() < 1e-9);
            assert!(
                var < 1e-12 || (var - 1.0).abs() < 1e-9,
                "dim {j}: variance {var}"
            );
        }
        let shape = ShapeInput::Features(Arc::new(sets[0].clone()));
        let (_, grads) = model
            .group_loss_and_grad(
                &[shape.clone(), shape],
                &TextItem::new("t", "a red chair"),
                0,
            )
            .unwrap();
        assert!(grads
            .by_name(&model.params, "cc.shape_norm.scale")
            .is_none());
        assert!(grads
            .by_name(&model.params, "cc.shape_proj.weight")
            .is_some());
    }
}
