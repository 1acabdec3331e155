//! Point-set geometry: farthest point sampling, KNN grouping with temporal
//! re-ordering, and group standardization.
//!
//! Everything here is pure f32 arithmetic over (x, y, t) triples in the unit
//! cube, so results are cacheable per sample and exactly reproducible.

use crate::error::{Error, Result};

/// Carried point set at one stage of the hierarchy: raw coordinates plus the
/// per-point feature rows (width 0 before the first stage).
#[derive(Clone, Debug, PartialEq)]
pub struct StageState {
    /// T x 3 raw normalized (x, y, t).
    pub coords: Vec<f32>,
    /// T x D.
    pub feats: Vec<f32>,
    pub t: usize,
    pub d: usize,
}

impl StageState {
    pub fn new(coords: Vec<f32>, feats: Vec<f32>, d: usize) -> Self {
        assert_eq!(coords.len() % 3, 0);
        let t = coords.len() / 3;
        assert_eq!(feats.len(), t * d, "feats must be T x D");
        StageState { coords, feats, t, d }
    }
}

/// Neighborhood structure for one set of centroids.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupTensor {
    /// T' x K neighbor indices into the parent point set, each group sorted
    /// by raw timestamp ascending (ties by index).
    pub indices: Vec<u32>,
    /// T' x K x 3 standardized offsets from the centroid.
    pub rel_coords: Vec<f32>,
    /// Per-group standard deviation actually used (after flooring).
    pub std: Vec<f32>,
    pub k: usize,
}

const STD_FLOOR: f32 = 1e-5;

#[inline]
fn d2(coords: &[f32], i: usize, j: usize) -> f32 {
    let a = &coords[i * 3..i * 3 + 3];
    let b = &coords[j * 3..j * 3 + 3];
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dt = a[2] - b[2];
    dx * dx + dy * dy + dt * dt
}

/// Farthest point sampling over T x 3 coords. The first pick is index 0 (the
/// earliest point, since rows arrive time-sorted); each later pick maximizes
/// the minimum distance to everything already picked, ties to the lowest
/// index. Returns picks in selection order.
pub fn fps(coords: &[f32], t_prime: usize) -> Result<Vec<u32>> {
    assert_eq!(coords.len() % 3, 0);
    let t = coords.len() / 3;
    if t_prime > t {
        return Err(Error::Contract(format!(
            "fps: asked for {t_prime} centroids from {t} points"
        )));
    }
    let mut picks = Vec::with_capacity(t_prime);
    if t_prime == 0 {
        return Ok(picks);
    }
    let mut picked = vec![false; t];
    let mut min_d2 = vec![f32::INFINITY; t];
    let mut last = 0usize;
    picks.push(0u32);
    picked[0] = true;
    for _ in 1..t_prime {
        let mut best = -1.0f32;
        let mut best_i = usize::MAX;
        for i in 0..t {
            if picked[i] {
                continue;
            }
            let d = d2(coords, i, last).min(min_d2[i]);
            min_d2[i] = d;
            // Strict > keeps the lowest index on ties.
            if d > best {
                best = d;
                best_i = i;
            }
        }
        debug_assert!(best_i != usize::MAX);
        picks.push(best_i as u32);
        picked[best_i] = true;
        last = best_i;
    }
    Ok(picks)
}

/// Sort point indices by raw timestamp ascending, ties by index. f32 times
/// here are finite by construction, so the comparison is total.
pub fn sort_indices_by_time(coords: &[f32], indices: &mut [u32]) {
    indices.sort_unstable_by(|&a, &b| {
        let ta = coords[a as usize * 3 + 2];
        let tb = coords[b as usize * 3 + 2];
        ta.partial_cmp(&tb).unwrap().then(a.cmp(&b))
    });
}

/// Permute a stage state so raw t is ascending (ties by row index). Returns
/// the sorted state and the permutation applied (new row i = old row perm[i]).
pub fn sort_centroids_by_time(s: &StageState) -> (StageState, Vec<u32>) {
    let mut perm: Vec<u32> = (0..s.t as u32).collect();
    sort_indices_by_time(&s.coords, &mut perm);
    let mut coords = Vec::with_capacity(s.coords.len());
    let mut feats = Vec::with_capacity(s.feats.len());
    for &p in &perm {
        let p = p as usize;
        coords.extend_from_slice(&s.coords[p * 3..p * 3 + 3]);
        feats.extend_from_slice(&s.feats[p * s.d..(p + 1) * s.d]);
    }
    (StageState::new(coords, feats, s.d), perm)
}

/// K nearest neighbors of each centroid by Euclidean distance in (x, y, t),
/// the centroid itself eligible, distance ties to the lowest index. Each
/// group is then re-sorted by raw timestamp so downstream sequence ops see
/// temporal order. Also standardizes per-group offsets.
pub fn group(coords: &[f32], centroids: &[u32], k: usize) -> Result<GroupTensor> {
    assert_eq!(coords.len() % 3, 0);
    let t = coords.len() / 3;
    if k > t {
        return Err(Error::Contract(format!(
            "knn: asked for {k} neighbors from {t} points"
        )));
    }
    assert!(k > 0, "knn: k must be positive");
    let mut indices = Vec::with_capacity(centroids.len() * k);
    let mut rel_coords = Vec::with_capacity(centroids.len() * k * 3);
    let mut stds = Vec::with_capacity(centroids.len());
    let mut scratch: Vec<(f32, u32)> = Vec::with_capacity(t);
    for &c in centroids {
        let c = c as usize;
        scratch.clear();
        for i in 0..t {
            scratch.push((d2(coords, i, c), i as u32));
        }
        let cmp = |a: &(f32, u32), b: &(f32, u32)| {
            a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
        };
        if k < t {
            scratch.select_nth_unstable_by(k - 1, cmp);
        }
        let mut chosen: Vec<u32> = scratch[..k].iter().map(|&(_, i)| i).collect();
        // Selection order is arbitrary beyond the pivot; fix it, then order
        // the group temporally.
        chosen.sort_unstable_by(|&a, &b| {
            cmp(&(d2(coords, a as usize, c), a), &(d2(coords, b as usize, c), b))
        });
        sort_indices_by_time(coords, &mut chosen);
        let (rel, std) = standardize_group(coords, &chosen, c as u32);
        indices.extend_from_slice(&chosen);
        rel_coords.extend_from_slice(&rel);
        stds.push(std);
    }
    Ok(GroupTensor {
        indices,
        rel_coords,
        std: stds,
        k,
    })
}

/// Offsets from the centroid divided by the scalar sample standard deviation
/// of the group's 3n pooled raw coordinates (3n - 1 denominator), floored at
/// 1e-5. Returns (rel offsets K x 3, std used).
pub fn standardize_group(coords: &[f32], members: &[u32], centroid: u32) -> (Vec<f32>, f32) {
    let n = members.len();
    assert!(n >= 1);
    let mut mean = 0.0f64;
    for &m in members {
        for a in 0..3 {
            mean += coords[m as usize * 3 + a] as f64;
        }
    }
    let total = (3 * n) as f64;
    mean /= total;
    let mut ss = 0.0f64;
    for &m in members {
        for a in 0..3 {
            let d = coords[m as usize * 3 + a] as f64 - mean;
            ss += d * d;
        }
    }
    // Sample variance of the pooled coordinate values.
    let std = if n > 1 {
        (ss / (total - 1.0)).sqrt() as f32
    } else {
        0.0
    };
    let std = std.max(STD_FLOOR);
    let c = centroid as usize;
    let mut rel = Vec::with_capacity(n * 3);
    for &m in members {
        let m = m as usize;
        for a in 0..3 {
            rel.push((coords[m * 3 + a] - coords[c * 3 + a]) / std);
        }
    }
    (rel, std)
}

/// Assemble the grouped input rows [rel (3) || neighbor feats (D) || centroid
/// feats (D)] as plain data. The trainable path rebuilds this on the tape
/// from the same indices; this function exists for tests and inspection.
pub fn knn_group(
    coords: &[f32],
    feats: &[f32],
    d: usize,
    centroids: &[u32],
    k: usize,
) -> Result<(GroupTensor, Vec<f32>)> {
    let g = group(coords, centroids, k)?;
    let mut out = Vec::with_capacity(centroids.len() * k * (3 + 2 * d));
    for (gi, &c) in centroids.iter().enumerate() {
        let cfeat = &feats[c as usize * d..(c as usize + 1) * d];
        for kk in 0..k {
            let m = g.indices[gi * k + kk] as usize;
            out.extend_from_slice(&g.rel_coords[(gi * k + kk) * 3..(gi * k + kk) * 3 + 3]);
            out.extend_from_slice(&feats[m * d..(m + 1) * d]);
            out.extend_from_slice(cfeat);
        }
    }
    Ok((g, out))
}

/// Geometry of one stage, cacheable because it depends only on coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct StageGeom {
    /// Centroid indices into the parent point set, temporally sorted.
    pub centroids: Vec<u32>,
    pub groups: GroupTensor,
    pub t_prime: usize,
}

/// Run FPS + temporal sort + grouping for a whole stage stack. `coords` is
/// the N x 3 sample; each stage halves (or otherwise shrinks) the point count
/// per `stage_sizes`.
pub fn prepare_stages(coords: &[f32], stage_sizes: &[usize], k: usize) -> Result<Vec<StageGeom>> {
    let mut cur = coords.to_vec();
    let mut out = Vec::with_capacity(stage_sizes.len());
    for &size in stage_sizes {
        let mut centroids = fps(&cur, size)?;
        sort_indices_by_time(&cur, &mut centroids);
        let groups = group(&cur, &centroids, k)?;
        let mut next = Vec::with_capacity(size * 3);
        for &c in &centroids {
            next.extend_from_slice(&cur[c as usize * 3..c as usize * 3 + 3]);
        }
        out.push(StageGeom {
            centroids,
            groups,
            t_prime: size,
        });
        cur = next;
    }
    Ok(out)
}
