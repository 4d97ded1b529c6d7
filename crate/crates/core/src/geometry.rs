//! Point-cloud kernels: normalization, farthest point sampling, ball-query
//! grouping and chamfer distance.
//!
//! Everything here is pure and deterministic. Ties are always resolved
//! towards the lowest point index so results do not depend on anything but
//! the input.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub type Point3 = [f64; 3];

/// Minimum number of points a cloud must carry to be encoded.
pub const MIN_ENCODER_POINTS: usize = 16;

/// Points with per-point RGB colors in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColoredPointCloud {
    pub points: Vec<Point3>,
    pub colors: Vec<Point3>,
}

impl ColoredPointCloud {
    /// Builds a cloud, rejecting non-finite values and out-of-range colors.
    pub fn new(points: Vec<Point3>, colors: Vec<Point3>) -> Result<Self> {
        let cloud = Self { points, colors };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() != self.colors.len() {
            return Err(invalid!(
                "{} points but {} colors",
                self.points.len(),
                self.colors.len()
            ));
        }
        for (i, p) in self.points.iter().enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(invalid!("point {i} has a non-finite coordinate"));
            }
        }
        for (i, c) in self.colors.iter().enumerate() {
            if c.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
                return Err(invalid!("color {i} is outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Reorders points and colors so that output `i` is input `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            points: order.iter().map(|&i| self.points[i]).collect(),
            colors: order.iter().map(|&i| self.colors[i]).collect(),
        }
    }
}

pub fn centroid(points: &[Point3]) -> Point3 {
    let n = points.len().max(1) as f64;
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    c.map(|v| v / n)
}

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Centers the cloud at the origin and scales it into the unit sphere.
///
/// A cloud whose points all coincide is moved to the origin with scale 1.
pub fn normalize_cloud(cloud: &ColoredPointCloud) -> Result<ColoredPointCloud> {
    cloud.validate()?;
    let c = centroid(&cloud.points);
    let centered: Vec<Point3> = cloud
        .points
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let max_norm = centered
        .iter()
        .map(|p| dist2(p, &[0.0; 3]).sqrt())
        .fold(0.0, f64::max);
    let scale = if max_norm > 1e-12 { max_norm } else { 1.0 };
    Ok(ColoredPointCloud {
        points: centered.iter().map(|p| p.map(|v| v / scale)).collect(),
        colors: cloud.colors.clone(),
    })
}

/// Greedy max-min subset of `count` point indices.
///
/// Starts from the point farthest from the centroid; every step picks the
/// point whose distance to the selected set is largest.
pub fn farthest_point_sample(points: &[Point3], count: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if count == 0 || count > n {
        return Err(invalid!("cannot sample {count} of {n} points"));
    }
    let c = centroid(points);
    let start = argmax_first(points.iter().map(|p| dist2(p, &c)));
    let mut selected = Vec::with_capacity(count);
    selected.push(start);
    let mut min_d: Vec<f64> = points.iter().map(|p| dist2(p, &points[start])).collect();
    while selected.len() < count {
        let next = argmax_first(min_d.iter().copied());
        selected.push(next);
        let q = points[next];
        for (d, p) in min_d.iter_mut().zip(points) {
            let nd = dist2(p, &q);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(selected)
}

fn argmax_first(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Groups of `k` neighbor indices within `radius` of each center position.
///
/// Neighbors are listed in index order. Short groups repeat their first
/// member; a center with no neighbor at all gets `k` copies of `fallback`.
pub fn ball_query_positions(
    points: &[Point3],
    centers: &[Point3],
    fallback: &[usize],
    radius: f64,
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    if !(radius > 0.0) {
        return Err(invalid!("ball query radius must be positive, got {radius}"));
    }
    if k == 0 {
        return Err(invalid!("ball query group size must be at least 1"));
    }
    let r2 = radius * radius;
    let groups = centers
        .iter()
        .zip(fallback)
        .map(|(c, &own)| {
            let mut group: Vec<usize> = Vec::with_capacity(k);
            for (i, p) in points.iter().enumerate() {
                if dist2(p, c) <= r2 {
                    group.push(i);
                    if group.len() == k {
                        break;
                    }
                }
            }
            let pad = group.first().copied().unwrap_or(own);
            group.resize(k, pad);
            group
        })
        .collect();
    Ok(groups)
}

/// Ball query with centers given as indices into `points`.
pub fn ball_query(
    points: &[Point3],
    centers: &[usize],
    radius: f64,
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    if let Some(&bad) = centers.iter().find(|&&c| c >= points.len()) {
        return Err(invalid!(
            "center index {bad} out of range for {} points",
            points.len()
        ));
    }
    let positions: Vec<Point3> = centers.iter().map(|&c| points[c]).collect();
    ball_query_positions(points, &positions, centers, radius, k)
}

/// For every point of `from`, index of its nearest point in `to`
/// (lowest index on ties) and the squared distance.
pub fn nearest_neighbors(from: &[Point3], to: &[Point3]) -> Vec<(usize, f64)> {
    from.iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (j, q) in to.iter().enumerate() {
                let d = dist2(p, q);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

/// Mean squared nearest distance from `a` to `b` plus the same from `b` to `a`.
pub fn chamfer_distance(a: &[Point3], b: &[Point3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid!("chamfer distance of an empty point set"));
    }
    let ab: f64 = nearest_neighbors(a, b).iter().map(|x| x.1).sum::<f64>() / a.len() as f64;
    let ba: f64 = nearest_neighbors(b, a).iter().map(|x| x.1).sum::<f64>() / b.len() as f64;
    Ok(ab + ba)
}
