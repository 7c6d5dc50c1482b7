//! Deterministic spatial kernels: exact K-nearest-neighbor graphs,
//! farthest-point sampling, Gaussian kernel density estimation,
//! inverse-distance-weighted interpolation, and scene tiling.
//!
//! Everything here is a pure function of its inputs. Coordinates are `f64`
//! throughout; learned features stay in the tensor element type.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

// ── Point cloud ─────────────────────────────────────────────────────────────

/// A set of points with optional per-point feature columns and labels.
#[derive(Clone, Debug)]
pub struct PointCloud {
    /// XYZ positions in meters.
    pub coords: Vec<[f64; 3]>,
    /// Row-major `N × feature_count` feature matrix (possibly zero columns).
    pub features: Vec<f32>,
    pub feature_count: usize,
    /// Class labels in `[0, num_classes)` when the source file carried them.
    pub labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(
        coords: Vec<[f64; 3]>,
        features: Vec<f32>,
        feature_count: usize,
        labels: Option<Vec<u32>>,
    ) -> Result<Self> {
        let n = coords.len();
        if n == 0 {
            return Err(Error::Contract("point cloud must contain at least one point".into()));
        }
        if let Some(bad) = coords
            .iter()
            .position(|c| c.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Data {
                index: bad,
                message: "non-finite coordinate".into(),
            });
        }
        if features.len() != n * feature_count {
            return Err(Error::Contract(format!(
                "feature matrix has {} values, expected {n} × {feature_count}",
                features.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Contract(format!(
                    "{} labels for {n} points",
                    l.len()
                )));
            }
        }
        Ok(PointCloud {
            coords,
            features,
            feature_count,
            labels,
        })
    }

    /// Coordinates only, no features or labels.
    pub fn from_coords(coords: Vec<[f64; 3]>) -> Result<Self> {
        PointCloud::new(coords, Vec::new(), 0, None)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Feature row for point `i`.
    pub fn feature_row(&self, i: usize) -> &[f32] {
        &self.features[i * self.feature_count..(i + 1) * self.feature_count]
    }

    /// New cloud containing the listed points, in the given order.
    /// Indices may repeat.
    pub fn select(&self, indices: &[usize]) -> Result<PointCloud> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Contract(format!(
                "selection index {bad} out of range for {} points",
                self.len()
            )));
        }
        let coords = indices.iter().map(|&i| self.coords[i]).collect();
        let mut features = Vec::with_capacity(indices.len() * self.feature_count);
        for &i in indices {
            features.extend_from_slice(self.feature_row(i));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        PointCloud::new(coords, features, self.feature_count, labels)
    }

    /// Axis-aligned bounding box as (min, max) corners.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for c in &self.coords {
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        (lo, hi)
    }

    /// Copy with coordinates translated so the minimum corner sits at the
    /// origin.
    pub fn recentered_to_min(&self) -> PointCloud {
        let (lo, _) = self.bounds();
        let coords = self
            .coords
            .iter()
            .map(|c| [c[0] - lo[0], c[1] - lo[1], c[2] - lo[2]])
            .collect();
        PointCloud {
            coords,
            features: self.features.clone(),
            feature_count: self.feature_count,
            labels: self.labels.clone(),
        }
    }
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

// ── K-nearest neighbors ─────────────────────────────────────────────────────

/// Exact nearest-neighbor graph: row `i` lists the `k` nearest points to
/// point `i`, self excluded, nearest first.
#[derive(Clone, Debug)]
pub struct KnnGraph {
    /// Row-major `N × k` neighbor indices.
    pub indices: Vec<usize>,
    pub k: usize,
}

impl KnnGraph {
    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn len(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Brute-force exact KNN. Distance ties resolve to the lower index, making
/// the result independent of scan order. Requires `k < N` so that every
/// point has enough candidates once itself is excluded.
pub fn knn_graph(cloud: &PointCloud, k: usize) -> Result<KnnGraph> {
    let n = cloud.len();
    if k == 0 || k >= n {
        return Err(Error::Parameter {
            name: "k",
            message: format!("need 1 ≤ k < N, got k = {k} with N = {n}"),
        });
    }
    let mut indices = vec![0usize; n * k];
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        cand.clear();
        let pi = &cloud.coords[i];
        for (j, pj) in cloud.coords.iter().enumerate() {
            if j != i {
                cand.push((dist2(pi, pj), j));
            }
        }
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
        };
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, cmp);
        }
        cand[..k].sort_unstable_by(cmp);
        for (slot, &(_, j)) in indices[i * k..(i + 1) * k].iter_mut().zip(&cand[..k]) {
            *slot = j;
        }
    }
    Ok(KnnGraph { indices, k })
}

// ── Farthest-point sampling ─────────────────────────────────────────────────

/// Greedy farthest-first traversal: starts at `seed_index`, then repeatedly
/// picks the point whose distance to the selected set is largest (ties to
/// the lower index). Returns `m` indices.
pub fn farthest_point_sample(cloud: &PointCloud, m: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(Error::Parameter {
            name: "m",
            message: format!("need 1 ≤ m ≤ N, got m = {m} with N = {n}"),
        });
    }
    if seed_index >= n {
        return Err(Error::Parameter {
            name: "seed_index",
            message: format!("seed {seed_index} out of range for {n} points"),
        });
    }
    let mut selected = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut current = seed_index;
    selected.push(current);
    taken[current] = true;
    for _ in 1..m {
        let pc = cloud.coords[current];
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (j, d) in min_d2.iter_mut().enumerate() {
            let dj = dist2(&pc, &cloud.coords[j]);
            if dj < *d {
                *d = dj;
            }
            if !taken[j] && *d > best.0 {
                best = (*d, j);
            }
        }
        current = best.1;
        selected.push(current);
        taken[current] = true;
    }
    Ok(selected)
}

// ── Kernel density estimation ───────────────────────────────────────────────

/// Per-point density estimates together with the bandwidth that produced
/// them.
#[derive(Clone, Debug)]
pub struct DensityField {
    pub values: Vec<f64>,
    pub bandwidth: f64,
}

/// Gaussian kernel density over each point's neighbor set:
///
/// `f̂(p_i) = 1 / (n · h · (2π)^{3/2}) · Σ_j exp(−½ ‖(p_i − p_ij) / h‖²)`
///
/// with `n = K` neighbors and bandwidth `h`. Results are floored at a tiny
/// positive value so downstream inverses stay finite.
pub fn kde_density(cloud: &PointCloud, graph: &KnnGraph, bandwidth: f64) -> Result<DensityField> {
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::Parameter {
            name: "bandwidth",
            message: format!("must be a positive real, got {bandwidth}"),
        });
    }
    let n = cloud.len();
    let k = graph.k;
    if graph.indices.len() != n * k {
        return Err(Error::Contract(format!(
            "graph covers {} points but cloud has {n}",
            graph.len()
        )));
    }
    let norm = 1.0 / (k as f64 * bandwidth * (2.0 * std::f64::consts::PI).powf(1.5));
    let inv_h2 = 1.0 / (bandwidth * bandwidth);
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let pi = &cloud.coords[i];
        let mut sum = 0.0f64;
        for &j in graph.row(i) {
            sum += (-0.5 * dist2(pi, &cloud.coords[j]) * inv_h2).exp();
        }
        values.push((norm * sum).max(1e-300));
    }
    Ok(DensityField { values, bandwidth })
}

/// Scale-adaptive default bandwidth: the mean distance to each point's
/// farthest (K-th) listed neighbor, floored at 1e-6 m so coincident clouds
/// stay usable.
pub fn default_bandwidth(cloud: &PointCloud, graph: &KnnGraph) -> f64 {
    let n = cloud.len();
    let mut sum = 0.0f64;
    for i in 0..n {
        let last = graph.row(i)[graph.k - 1];
        sum += dist2(&cloud.coords[i], &cloud.coords[last]).sqrt();
    }
    (sum / n as f64).max(1e-6)
}

// ── Inverse-distance-weighted interpolation ─────────────────────────────────

/// Precomputed interpolation stencil: for each destination point, `k` source
/// indices and their normalized weights.
#[derive(Clone, Debug)]
pub struct IdwPlan {
    /// Row-major `N × k` source indices.
    pub indices: Vec<usize>,
    /// Row-major `N × k` weights; each row sums to 1.
    pub weights: Vec<f64>,
    pub k: usize,
}

/// Build the inverse-distance weighting stencil mapping `src_coords` onto
/// `dst_coords` using each destination's `k` nearest sources and weights
/// `1 / (dist^power + 1e-8)`, normalized per destination.
pub fn idw_plan(
    src_coords: &[[f64; 3]],
    dst_coords: &[[f64; 3]],
    k: usize,
    power: f64,
) -> Result<IdwPlan> {
    let m = src_coords.len();
    if k == 0 || k > m {
        return Err(Error::Parameter {
            name: "k",
            message: format!("need 1 ≤ k ≤ {m} sources, got {k}"),
        });
    }
    let mut indices = Vec::with_capacity(dst_coords.len() * k);
    let mut weights = Vec::with_capacity(dst_coords.len() * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(m);
    let mut raw: Vec<f64> = Vec::with_capacity(k);
    for d in dst_coords {
        cand.clear();
        for (j, s) in src_coords.iter().enumerate() {
            cand.push((dist2(d, s), j));
        }
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
        };
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, cmp);
        }
        cand[..k].sort_unstable_by(cmp);
        raw.clear();
        let mut sum = 0.0f64;
        for &(d2, _) in &cand[..k] {
            let w = 1.0 / (d2.sqrt().powf(power) + 1e-8);
            raw.push(w);
            sum += w;
        }
        for (&w, &(_, j)) in raw.iter().zip(&cand[..k]) {
            indices.push(j);
            weights.push(w / sum);
        }
    }
    Ok(IdwPlan {
        indices,
        weights,
        k,
    })
}

/// Interpolate `src_feats` (row-major `M × feature_count`) onto destination
/// points via a precomputed plan.
pub fn idw_apply<T: Scalar>(plan: &IdwPlan, src_feats: &[T], feature_count: usize) -> Vec<T> {
    let n = plan.indices.len() / plan.k;
    let mut out = vec![T::zero(); n * feature_count];
    for d in 0..n {
        for slot in 0..feature_count {
            let mut acc = 0.0f64;
            for j in 0..plan.k {
                let src = plan.indices[d * plan.k + j];
                acc += plan.weights[d * plan.k + j] * src_feats[src * feature_count + slot].to_f64();
            }
            out[d * feature_count + slot] = T::from_f64(acc);
        }
    }
    out
}

/// One-call inverse-distance interpolation of `src_feats` onto
/// `dst_coords`.
pub fn idw_interpolate<T: Scalar>(
    src_coords: &[[f64; 3]],
    src_feats: &[T],
    feature_count: usize,
    dst_coords: &[[f64; 3]],
    k: usize,
    power: f64,
) -> Result<Vec<T>> {
    if src_feats.len() != src_coords.len() * feature_count {
        return Err(Error::Contract(format!(
            "{} source features for {} points × {feature_count} columns",
            src_feats.len(),
            src_coords.len()
        )));
    }
    let plan = idw_plan(src_coords, dst_coords, k, power)?;
    Ok(idw_apply(&plan, src_feats, feature_count))
}

// ── Scene tiling ────────────────────────────────────────────────────────────

/// Partition a scene into axis-aligned cuboid tiles anchored at the scene's
/// minimum corner. Tiles with fewer than `min_points` points are merged into
/// their most populous horizontal face-neighbor (same vertical cell, ±1 in x
/// or y); undersized tiles with no face-neighbor remain as-is. Every input
/// point lands in exactly one output tile.
pub fn tile_scene(
    cloud: &PointCloud,
    tile_x: f64,
    tile_y: f64,
    tile_z: f64,
    min_points: usize,
) -> Result<Vec<PointCloud>> {
    tile_indices(cloud, tile_x, tile_y, tile_z, min_points)?
        .into_iter()
        .map(|indices| cloud.select(&indices))
        .collect()
}

/// [`tile_scene`] as an index partition: each inner vector lists the input
/// positions of one tile's points, and every position appears exactly once.
/// Use this form when per-point results must be scattered back into the
/// original order.
pub fn tile_indices(
    cloud: &PointCloud,
    tile_x: f64,
    tile_y: f64,
    tile_z: f64,
    min_points: usize,
) -> Result<Vec<Vec<usize>>> {
    if cloud.is_empty() {
        return Err(Error::Parameter {
            name: "cloud",
            message: "cannot tile an empty cloud".into(),
        });
    }
    for (name, v) in [("tile_x", tile_x), ("tile_y", tile_y), ("tile_z", tile_z)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Parameter {
                name,
                message: format!("tile dimension must be positive, got {v}"),
            });
        }
    }
    let (lo, _) = cloud.bounds();
    let mut cells: BTreeMap<(i64, i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, c) in cloud.coords.iter().enumerate() {
        let key = (
            ((c[0] - lo[0]) / tile_x).floor() as i64,
            ((c[1] - lo[1]) / tile_y).floor() as i64,
            ((c[2] - lo[2]) / tile_z).floor() as i64,
        );
        cells.entry(key).or_default().push(i);
    }
    // Repeatedly fold undersized tiles into their largest horizontal
    // face-neighbor. Each merge removes one tile, so this terminates.
    loop {
        let mut merge: Option<((i64, i64, i64), (i64, i64, i64))> = None;
        'scan: for (&key, pts) in &cells {
            if pts.len() >= min_points {
                continue;
            }
            let (x, y, z) = key;
            let mut best: Option<((i64, i64, i64), usize)> = None;
            for nk in [(x - 1, y, z), (x + 1, y, z), (x, y - 1, z), (x, y + 1, z)] {
                if let Some(np) = cells.get(&nk) {
                    let better = match best {
                        None => true,
                        Some((bk, bn)) => np.len() > bn || (np.len() == bn && nk < bk),
                    };
                    if better {
                        best = Some((nk, np.len()));
                    }
                }
            }
            if let Some((target, _)) = best {
                merge = Some((key, target));
                break 'scan;
            }
        }
        match merge {
            Some((src, dst)) => {
                let moved = cells.remove(&src).unwrap();
                cells.get_mut(&dst).unwrap().extend(moved);
            }
            None => break,
        }
    }
    Ok(cells.into_values().collect())
}

// ── Tests ───────────────────────────────────────────────────────────────────
