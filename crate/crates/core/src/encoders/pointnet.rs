//! Set-abstraction point-cloud encoder.
//!
//! Two local stages (sample centers, group neighbors, shared MLP, max-pool)
//! produce the per-region features consumed by the scorer; a third stage
//! pools everything left into one global code used for distractor mining
//! and by the reconstruction autoencoder.

use std::cmp::Ordering;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{invalid, Error, Result};
use crate::geometry::{
    ball_query_positions, farthest_point_sample, normalize_cloud, ColoredPointCloud, Point3,
    MIN_ENCODER_POINTS,
};
use crate::nn::{init_mlp, Graph, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetAbstractionConfig {
    pub num_centers: usize,
    pub radius: f64,
    pub group_size: usize,
    pub mlp_widths: Vec<usize>,
}

impl SetAbstractionConfig {
    pub fn out_width(&self) -> usize {
        *self.mlp_widths.last().expect("validated: non-empty widths")
    }

    fn validate(&self, stage: &str) -> Result<()> {
        if self.num_centers == 0 || self.group_size == 0 {
            return Err(invalid!(
                "{stage}: centers and group size must be at least 1"
            ));
        }
        if !(self.radius > 0.0) {
            return Err(invalid!("{stage}: radius must be positive"));
        }
        if self.mlp_widths.is_empty() || self.mlp_widths.contains(&0) {
            return Err(invalid!(
                "{stage}: MLP widths must be non-empty and positive"
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub stage1: SetAbstractionConfig,
    pub stage2: SetAbstractionConfig,
    /// MLP widths of the global stage; the last width is the latent size.
    pub global_mlp: Vec<usize>,
    pub min_points: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stage1: SetAbstractionConfig {
                num_centers: 512,
                radius: 0.2,
                group_size: 32,
                mlp_widths: vec![64, 64, 128],
            },
            stage2: SetAbstractionConfig {
                num_centers: 128,
                radius: 0.4,
                group_size: 64,
                mlp_widths: vec![128, 128, 256],
            },
            global_mlp: vec![256, 512, 1024],
            min_points: MIN_ENCODER_POINTS,
        }
    }
}

impl EncoderConfig {
    /// Small stack for 512-point clouds; runs comfortably on one CPU core.
    pub fn desk() -> Self {
        Self {
            stage1: SetAbstractionConfig {
                num_centers: 128,
                radius: 0.2,
                group_size: 16,
                mlp_widths: vec![32, 32, 64],
            },
            stage2: SetAbstractionConfig {
                num_centers: 32,
                radius: 0.4,
                group_size: 24,
                mlp_widths: vec![64, 64, 96],
            },
            global_mlp: vec![128, 256],
            min_points: MIN_ENCODER_POINTS,
        }
    }

    pub fn local_width(&self) -> usize {
        self.stage2.out_width()
    }

    pub fn latent_width(&self) -> usize {
        *self
            .global_mlp
            .last()
            .expect("validated: non-empty global MLP")
    }

    pub fn validate(&self) -> Result<()> {
        self.stage1.validate("stage 1")?;
        self.stage2.validate("stage 2")?;
        if self.global_mlp.is_empty() || self.global_mlp.contains(&0) {
            return Err(invalid!("global MLP widths must be non-empty and positive"));
        }
        if self.stage2.num_centers > self.stage1.num_centers {
            return Err(invalid!(
                "stage 2 wants {} centers but stage 1 only produces {}",
                self.stage2.num_centers,
                self.stage1.num_centers
            ));
        }
        Ok(())
    }

    /// Adds freshly initialized `encoder.*` parameters.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        init_mlp(store, "encoder.sa1", 6, &self.stage1.mlp_widths, rng);
        init_mlp(
            store,
            "encoder.sa2",
            3 + self.stage1.out_width(),
            &self.stage2.mlp_widths,
            rng,
        );
        init_mlp(
            store,
            "encoder.sa3",
            3 + self.stage2.out_width(),
            &self.global_mlp,
            rng,
        );
    }

    /// Checks that `store` holds encoder weights shaped for this config.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        let stages: [(&str, usize, &[usize]); 3] = [
            ("encoder.sa1", 6, &self.stage1.mlp_widths),
            (
                "encoder.sa2",
                3 + self.stage1.out_width(),
                &self.stage2.mlp_widths,
            ),
            ("encoder.sa3", 3 + self.stage2.out_width(), &self.global_mlp),
        ];
        for (prefix, input, widths) in stages {
            let mut fan_in = input;
            for (i, &w) in widths.iter().enumerate() {
                store.expect_dim(&format!("{prefix}.{i}.weight"), (fan_in, w))?;
                fan_in = w;
            }
        }
        Ok(())
    }
}

/// Per-region features from the second set-abstraction stage.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeatureSet {
    pub positions: Vec<Point3>,
    pub features: Array2<f64>,
}

/// Global embedding from the third stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode(pub Vec<f64>);

impl LatentCode {
    pub fn distance(&self, other: &LatentCode) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// SplitMix64 finalizer folded over the bit patterns of a point's
/// position and color.
fn point_key(point: &Point3, color: &Point3) -> u64 {
    point
        .iter()
        .chain(color)
        .fold(0x9e37_79b9_7f4a_7c15, |h: u64, v| {
            let mut z = h ^ v.to_bits();
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            z ^ (z >> 31)
        })
}

/// Puts the points in a canonical order and normalizes.
///
/// Every later stage resolves ties by point index, so fixing the order
/// here is what makes the encoder independent of input ordering. The order
/// follows a hash of each point's values (ties broken lexicographically),
/// which keeps it unrelated to position: ball query keeps the first
/// neighbours by index, and a spatial sort would skew every group toward
/// one side of its ball.
pub fn prepare_cloud(cloud: &ColoredPointCloud, min_points: usize) -> Result<ColoredPointCloud> {
    if cloud.len() < min_points {
        return Err(invalid!(
            "cloud has {} points, the encoder needs at least {min_points}",
            cloud.len()
        ));
    }
    let keys: Vec<u64> = cloud
        .points
        .iter()
        .zip(&cloud.colors)
        .map(|(p, c)| point_key(p, c))
        .collect();
    let mut order: Vec<usize> = (0..cloud.len()).collect();
    order.sort_by(|&a, &b| {
        let pa = cloud.points[a].iter().chain(&cloud.colors[a]);
        let pb = cloud.points[b].iter().chain(&cloud.colors[b]);
        keys[a].cmp(&keys[b]).then_with(|| {
            pa.zip(pb)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
        })
    });
    normalize_cloud(&cloud.permuted(&order))
}

/// One set-abstraction stage on the graph.
///
/// Picks `cfg.num_centers` centers by farthest point sampling, groups
/// neighbors by ball query, feeds `[relative position, feature]` rows
/// through the shared MLP `{prefix}.*` and max-pools every group.
pub fn set_abstraction(
    graph: &mut Graph<'_>,
    prefix: &str,
    positions: &[Point3],
    features: Var,
    cfg: &SetAbstractionConfig,
) -> Result<(Vec<Point3>, Var)> {
    let n = positions.len();
    if graph.tape.value(features).nrows() != n {
        return Err(Error::Shape(format!(
            "{prefix}: {n} positions but {} feature rows",
            graph.tape.value(features).nrows()
        )));
    }
    let centers = farthest_point_sample(positions, cfg.num_centers)?;
    let center_pos: Vec<Point3> = centers.iter().map(|&c| positions[c]).collect();
    let groups =
        ball_query_positions(positions, &center_pos, &centers, cfg.radius, cfg.group_size)?;

    let k = cfg.group_size;
    let flat: Vec<usize> = groups.iter().flatten().copied().collect();
    let mut rel = Array2::zeros((flat.len(), 3));
    for (g, group) in groups.iter().enumerate() {
        let c = center_pos[g];
        for (j, &idx) in group.iter().enumerate() {
            let p = positions[idx];
            for d in 0..3 {
                rel[[g * k + j, d]] = p[d] - c[d];
            }
        }
    }
    let rel = graph.tape.constant(rel);
    let gathered = graph.tape.gather_rows(features, &flat);
    let input = graph.tape.concat_cols(&[rel, gathered]);
    let hidden = graph.mlp(prefix, cfg.mlp_widths.len(), input, true)?;
    let pooled = graph.tape.group_max(hidden, k);
    Ok((center_pos, pooled))
}

/// Runs the two local stages on a prepared cloud; returns the stage-2
/// positions and the L×D feature node.
pub fn local_graph(
    graph: &mut Graph<'_>,
    cfg: &EncoderConfig,
    cloud: &ColoredPointCloud,
) -> Result<(Vec<Point3>, Var)> {
    let colors = Array2::from_shape_fn((cloud.len(), 3), |(i, c)| cloud.colors[i][c]);
    let colors = graph.tape.constant(colors);
    let (pos1, f1) = set_abstraction(graph, "encoder.sa1", &cloud.points, colors, &cfg.stage1)?;
    set_abstraction(graph, "encoder.sa2", &pos1, f1, &cfg.stage2)
}

/// Global stage: every remaining point in one group, absolute positions.
pub fn global_graph(
    graph: &mut Graph<'_>,
    cfg: &EncoderConfig,
    positions: &[Point3],
    features: Var,
) -> Result<Var> {
    let pos = Array2::from_shape_fn((positions.len(), 3), |(i, c)| positions[i][c]);
    let pos = graph.tape.constant(pos);
    let input = graph.tape.concat_cols(&[pos, features]);
    let hidden = graph.mlp("encoder.sa3", cfg.global_mlp.len(), input, true)?;
    Ok(graph.tape.group_max(hidden, positions.len()))
}

/// Stage-2 local features of a cloud.
pub fn encode_local(
    params: &ParamStore,
    cfg: &EncoderConfig,
    cloud: &ColoredPointCloud,
) -> Result<LocalFeatureSet> {
    cfg.check_params(params)?;
    let prepared = prepare_cloud(cloud, cfg.min_points)?;
    let mut graph = Graph::new(params).with_frozen(&[""]);
    let (positions, features) = local_graph(&mut graph, cfg, &prepared)?;
    Ok(LocalFeatureSet {
        positions,
        features: graph.tape.value(features).clone(),
    })
}

/// Global latent code of a cloud.
pub fn encode_global(
    params: &ParamStore,
    cfg: &EncoderConfig,
    cloud: &ColoredPointCloud,
) -> Result<LatentCode> {
    cfg.check_params(params)?;
    let prepared = prepare_cloud(cloud, cfg.min_points)?;
    let mut graph = Graph::new(params).with_frozen(&[""]);
    let (positions, features) = local_graph(&mut graph, cfg, &prepared)?;
    let code = global_graph(&mut graph, cfg, &positions, features)?;
    Ok(LatentCode(graph.tape.value(code).iter().copied().collect()))
}
