//! Colored point-cloud autoencoder: the set-abstraction encoder followed by
//! an MLP decoder emitting a fixed number of points with xyz and RGB.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pointnet::{global_graph, local_graph, prepare_cloud, EncoderConfig, LatentCode};
use crate::autodiff::Var;
use crate::error::{invalid, Error, Result};
use crate::geometry::{nearest_neighbors, ColoredPointCloud, Point3};
use crate::nn::{
    init_linear, init_mlp, init_zero_linear, Adam, AdamConfig, GradBuffer, Graph, ParamStore,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub hidden: Vec<usize>,
    pub output_points: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden: vec![1024, 1024],
            output_points: 1024,
        }
    }
}

impl DecoderConfig {
    pub fn desk() -> Self {
        Self {
            hidden: vec![256, 256],
            output_points: 256,
        }
    }

    pub fn init_params(
        &self,
        store: &mut ParamStore,
        latent: usize,
        zero_final: bool,
        rng: &mut impl rand::Rng,
    ) {
        init_mlp(store, "decoder.mlp", latent, &self.hidden, rng);
        let fan_in = self.hidden.last().copied().unwrap_or(latent);
        let out = self.output_points * 6;
        if zero_final {
            init_zero_linear(store, "decoder.out", fan_in, out);
        } else {
            init_linear(store, "decoder.out", fan_in, out, rng);
            if let Some(w) = store.get_mut("decoder.out.weight") {
                *w *= 0.1;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub color_weight: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub zero_final_layer: bool,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            color_weight: 1.0,
            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            zero_final_layer: false,
        }
    }
}

impl AutoencoderConfig {
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.encoder.init_params(&mut store, &mut rng);
        self.decoder.init_params(
            &mut store,
            self.encoder.latent_width(),
            self.zero_final_layer,
            &mut rng,
        );
        store
    }
}

/// Reconstruction loss terms of one cloud.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionLoss {
    pub chamfer: f64,
    pub color: f64,
    pub total: f64,
}

/// Chamfer distance on xyz plus `color_weight` times the mean squared color
/// error over the same nearest-neighbor matches, with its gradient with
/// respect to the predicted M×6 block.
pub fn reconstruction_loss(
    pred: &Array2<f64>,
    target: &ColoredPointCloud,
    color_weight: f64,
) -> (ReconstructionLoss, Array2<f64>) {
    let m = pred.nrows();
    let n = target.len();
    let pred_xyz: Vec<Point3> = (0..m)
        .map(|i| [pred[[i, 0]], pred[[i, 1]], pred[[i, 2]]])
        .collect();
    let pred_rgb: Vec<Point3> = (0..m)
        .map(|i| [pred[[i, 3]], pred[[i, 4]], pred[[i, 5]]])
        .collect();
    let forward = nearest_neighbors(&pred_xyz, &target.points);
    let backward = nearest_neighbors(&target.points, &pred_xyz);

    let mut grad = Array2::zeros((m, 6));
    let (mut chamfer, mut color) = (0.0, 0.0);
    let (wm, wn) = (1.0 / m as f64, 1.0 / n as f64);
    let mut add_pair = |i: usize, tp: &Point3, tc: &Point3, w: f64| {
        for d in 0..3 {
            let dx = pred_xyz[i][d] - tp[d];
            let dc = pred_rgb[i][d] - tc[d];
            chamfer += w * dx * dx;
            color += w * dc * dc;
            grad[[i, d]] += 2.0 * w * dx;
            grad[[i, 3 + d]] += 2.0 * w * color_weight * dc;
        }
    };
    for (i, &(j, _)) in forward.iter().enumerate() {
        add_pair(i, &target.points[j], &target.colors[j], wm);
    }
    for (j, &(i, _)) in backward.iter().enumerate() {
        add_pair(i, &target.points[j], &target.colors[j], wn);
    }
    let loss = ReconstructionLoss {
        chamfer,
        color,
        total: chamfer + color_weight * color,
    };
    (loss, grad)
}

/// Decoder graph: code → M×6 block with sigmoid colors.
pub fn decoder_graph(graph: &mut Graph<'_>, cfg: &DecoderConfig, code: Var) -> Result<Var> {
    let h = graph.mlp("decoder.mlp", cfg.hidden.len(), code, true)?;
    let flat = graph.linear("decoder.out", h)?;
    let block = graph.tape.reshape(flat, cfg.output_points, 6);
    let xyz = graph.tape.slice_cols(block, 0, 3);
    let rgb = graph.tape.slice_cols(block, 3, 6);
    let rgb = graph.tape.sigmoid(rgb);
    Ok(graph.tape.concat_cols(&[xyz, rgb]))
}

fn block_to_cloud(block: &Array2<f64>) -> ColoredPointCloud {
    ColoredPointCloud {
        points: block.outer_iter().map(|r| [r[0], r[1], r[2]]).collect(),
        colors: block
            .outer_iter()
            .map(|r| {
                [
                    r[3].clamp(0.0, 1.0),
                    r[4].clamp(0.0, 1.0),
                    r[5].clamp(0.0, 1.0),
                ]
            })
            .collect(),
    }
}

/// Decodes a latent code into `output_points` colored points.
pub fn decode_cloud(
    params: &ParamStore,
    cfg: &DecoderConfig,
    code: &LatentCode,
) -> Result<ColoredPointCloud> {
    let w = params.require("decoder.out.weight")?;
    if w.ncols() != cfg.output_points * 6 {
        return Err(Error::Shape(format!(
            "decoder emits {} values, config expects {} points",
            w.ncols(),
            cfg.output_points
        )));
    }
    let mut graph = Graph::new(params).with_frozen(&[""]);
    let code = graph
        .tape
        .constant(Array2::from_shape_vec((1, code.0.len()), code.0.clone()).expect("row vector"));
    let block = decoder_graph(&mut graph, cfg, code)?;
    Ok(block_to_cloud(graph.tape.value(block)))
}

/// Loss and parameter gradients of one cloud through encoder and decoder.
pub fn autoencoder_loss_and_grad(
    params: &ParamStore,
    cfg: &AutoencoderConfig,
    cloud: &ColoredPointCloud,
) -> Result<(ReconstructionLoss, GradBuffer)> {
    let prepared = prepare_cloud(cloud, cfg.encoder.min_points)?;
    let mut graph = Graph::new(params);
    let (pos, local) = local_graph(&mut graph, &cfg.encoder, &prepared)?;
    let code = global_graph(&mut graph, &cfg.encoder, &pos, local)?;
    let block = decoder_graph(&mut graph, &cfg.decoder, code)?;
    let (loss, grad) = reconstruction_loss(graph.tape.value(block), &prepared, cfg.color_weight);
    let out = graph.tape.precomputed(block, loss.total, grad);
    let mut grads = graph.tape.backward(out);
    Ok((loss, graph.collect(&mut grads)))
}

/// Reconstruction loss of one cloud under the current parameters.
pub fn autoencoder_loss(
    params: &ParamStore,
    cfg: &AutoencoderConfig,
    cloud: &ColoredPointCloud,
) -> Result<ReconstructionLoss> {
    let prepared = prepare_cloud(cloud, cfg.encoder.min_points)?;
    let mut graph = Graph::new(params).with_frozen(&[""]);
    let (pos, local) = local_graph(&mut graph, &cfg.encoder, &prepared)?;
    let code = global_graph(&mut graph, &cfg.encoder, &pos, local)?;
    let block = decoder_graph(&mut graph, &cfg.decoder, code)?;
    Ok(reconstruction_loss(graph.tape.value(block), &prepared, cfg.color_weight).0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderStep {
    pub step: usize,
    pub loss: ReconstructionLoss,
}

#[derive(Debug, Clone)]
pub struct AutoencoderRun {
    pub params: ParamStore,
    /// Mean batch loss before each update.
    pub history: Vec<AutoencoderStep>,
    /// Mean loss over the whole training set after the last update.
    pub final_loss: ReconstructionLoss,
}

fn mean_loss(losses: &[ReconstructionLoss]) -> ReconstructionLoss {
    let n = losses.len().max(1) as f64;
    let sum = |f: fn(&ReconstructionLoss) -> f64| losses.iter().map(f).sum::<f64>() / n;
    ReconstructionLoss {
        chamfer: sum(|l| l.chamfer),
        color: sum(|l| l.color),
        total: sum(|l| l.total),
    }
}

/// Mean reconstruction loss over a dataset.
pub fn dataset_loss(
    params: &ParamStore,
    cfg: &AutoencoderConfig,
    clouds: &[ColoredPointCloud],
) -> Result<ReconstructionLoss> {
    let losses = clouds
        .par_iter()
        .map(|c| autoencoder_loss(params, cfg, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_loss(&losses))
}

/// Trains encoder and decoder jointly on reconstruction with Adam.
pub fn train_autoencoder(
    clouds: &[ColoredPointCloud],
    cfg: &AutoencoderConfig,
) -> Result<AutoencoderRun> {
    let params = cfg.init_params(cfg.seed);
    train_autoencoder_from(params, clouds, cfg)
}

/// Continues training from existing parameters.
pub fn train_autoencoder_from(
    mut params: ParamStore,
    clouds: &[ColoredPointCloud],
    cfg: &AutoencoderConfig,
) -> Result<AutoencoderRun> {
    if clouds.is_empty() {
        return Err(invalid!("autoencoder training needs at least one cloud"));
    }
    cfg.encoder.validate()?;
    if cfg.batch_size == 0 {
        return Err(invalid!("batch size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ae00);
    let mut opt = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..Default::default()
    });
    let mut order: Vec<usize> = Vec::new();
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(clouds.len()) {
            if order.is_empty() {
                order = (0..clouds.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(order.pop().expect("refilled above"));
        }
        let results = batch
            .par_iter()
            .map(|&i| autoencoder_loss_and_grad(&params, cfg, &clouds[i]))
            .collect::<Result<Vec<_>>>()?;
        let mut grads = GradBuffer::zeros_like(&params);
        let mut losses = Vec::with_capacity(results.len());
        for (loss, g) in results {
            losses.push(loss);
            grads.accumulate(g);
        }
        grads.scale(1.0 / batch.len() as f64);
        let loss = mean_loss(&losses);
        if !loss.total.is_finite() || !grads.all_finite() {
            return Err(Error::Diverged(format!(
                "autoencoder loss became {} at step {step} (chamfer {}, color {})",
                loss.total, loss.chamfer, loss.color
            )));
        }
        history.push(AutoencoderStep { step, loss });
        opt.update(&mut params, &grads);
        if step % 50 == 0 {
            log::debug!("ae step {step}: loss {:.5}", loss.total);
        }
    }
    let final_loss = dataset_loss(&params, cfg, clouds)?;
    Ok(AutoencoderRun {
        params,
        history,
        final_loss,
    })
}
