//! Plug-in entropy and mutual-information estimates between adjacent frames.
//!
//! Patches are mapped to discrete symbols with a k-means codebook; two frames are
//! paired positionally (`a_i` with `b_i`), so re-ordering a frame changes the joint
//! distribution but not the marginals. All quantities are in nats.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::{align_clip, FeatureVolume};
use crate::error::{AtaError, Result};

pub const DEFAULT_SYMBOLS: usize = 16;
pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    k: usize,
    dim: usize,
    centroids: Vec<f64>,
    seed: u64,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    /// Codebook from explicit centroids (row-major `k × dim`).
    pub fn from_centroids(dim: usize, centroids: Vec<f64>) -> Result<Self> {
        if dim == 0 || centroids.is_empty() || centroids.len() % dim != 0 {
            return Err(AtaError::shape(
                "codebook",
                format!("{} values for width {dim}", centroids.len()),
            ));
        }
        let k = centroids.len() / dim;
        if k < 2 {
            return Err(AtaError::invalid("codebook needs at least two symbols"));
        }
        Ok(Self {
            k,
            dim,
            centroids,
            seed: 0,
        })
    }

    fn nearest(&self, x: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for i in 0..self.k {
            let d = sq_dist(x, self.centroid(i));
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }
}

/// Positional symbols for one frame.
pub type LabelSequence = Vec<usize>;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means with k-means++ seeding over `patches` (`n × dim`, row-major).
pub fn fit_codebook(patches: &[f64], dim: usize, k: usize, seed: u64) -> Result<Codebook> {
    if dim == 0 || patches.is_empty() || patches.len() % dim != 0 {
        return Err(AtaError::shape(
            "fit_codebook",
            format!("{} values for width {dim}", patches.len()),
        ));
    }
    if k < 2 {
        return Err(AtaError::invalid("codebook needs at least two symbols"));
    }
    let rows: Vec<&[f64]> = patches.chunks(dim).collect();
    let mut distinct: Vec<Vec<u64>> = rows
        .iter()
        .map(|r| r.iter().map(|v| v.to_bits()).collect())
        .collect();
    distinct.sort();
    distinct.dedup();
    if distinct.len() < k {
        return Err(AtaError::invalid(format!(
            "{} distinct patches for {k} symbols",
            distinct.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rows.len();
    let mut centroids: Vec<f64> = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(rows[rng.gen_range(0..n)]);
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        // total > 0 because fewer than k distinct centroids cover all points
        let mut target = rng.gen::<f64>() * total;
        let mut pick = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            if target < w {
                pick = i;
                break;
            }
            target -= w;
            pick = i;
        }
        centroids.extend_from_slice(rows[pick]);
        let c = &centroids[centroids.len() - dim..];
        for (i, r) in rows.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, c));
        }
    }

    let mut cb = Codebook {
        k,
        dim,
        centroids,
        seed,
    };
    let mut assign = vec![0usize; n];
    for _ in 0..KMEANS_MAX_ITERS {
        for (i, r) in rows.iter().enumerate() {
            assign[i] = cb.nearest(r).0;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, r) in rows.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i] * dim..(assign[i] + 1) * dim].iter_mut().zip(*r) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let new: Vec<f64> = if counts[c] == 0 {
                // empty cluster: restart at the point farthest from its centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(rows[a], cb.centroid(assign[a]))
                            .total_cmp(&sq_dist(rows[b], cb.centroid(assign[b])))
                            .then(b.cmp(&a))
                    })
                    .expect("non-empty");
                rows[far].to_vec()
            } else {
                sums[c * dim..(c + 1) * dim]
                    .iter()
                    .map(|s| s / counts[c] as f64)
                    .collect()
            };
            shift = shift.max(sq_dist(&new, cb.centroid(c)).sqrt());
            cb.centroids[c * dim..(c + 1) * dim].copy_from_slice(&new);
        }
        if shift < KMEANS_TOL {
            break;
        }
    }
    Ok(cb)
}

/// Nearest-centroid label per patch; ties go to the lower index.
pub fn quantize(frame: &[f64], cb: &Codebook) -> Result<LabelSequence> {
    if frame.is_empty() || frame.len() % cb.dim() != 0 {
        return Err(AtaError::shape(
            "quantize",
            format!("{} values for width {}", frame.len(), cb.dim()),
        ));
    }
    Ok(frame.chunks(cb.dim()).map(|p| cb.nearest(p).0).collect())
}

fn counts(a: &[usize]) -> Vec<usize> {
    let k = a.iter().max().map_or(0, |m| m + 1);
    let mut c = vec![0; k];
    for &x in a {
        c[x] += 1;
    }
    c
}

/// Plug-in entropy of the empirical label distribution.
pub fn entropy(a: &[usize]) -> f64 {
    let n = a.len() as f64;
    -counts(a)
        .into_iter()
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

/// `H(B | A)` from the empirical joint of positional pairs `(a_i, b_i)`.
pub fn conditional_entropy(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(AtaError::shape(
            "conditional_entropy",
            format!("lengths {} and {}", a.len(), b.len()),
        ));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let ca = counts(a);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut joint = vec![0usize; ca.len() * kb];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * kb + y] += 1;
    }
    let n = a.len() as f64;
    let mut h = 0.0;
    for (x, &cx) in ca.iter().enumerate() {
        if cx == 0 {
            continue;
        }
        for &cxy in &joint[x * kb..(x + 1) * kb] {
            if cxy == 0 {
                continue;
            }
            h -= cxy as f64 / n * (cxy as f64 / cx as f64).ln();
        }
    }
    Ok(h)
}

/// `MI(A; B) = H(B) − H(B | A)`.
pub fn mutual_information(a: &[usize], b: &[usize]) -> Result<f64> {
    Ok(entropy(b) - conditional_entropy(a, b)?)
}

/// Frame-averaged information terms over all adjacent pairs of a clip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdjacentInfo {
    pub mi: f64,
    pub h_prev: f64,
    pub h_curr: f64,
    pub h_cond: f64,
}

/// Averages MI and entropies over pairs `(t − 1, t)` of positionally paired labels.
pub fn clip_adjacent_info(x: &FeatureVolume, cb: &Codebook) -> Result<AdjacentInfo> {
    let t_len = x.t_len();
    if t_len < 2 {
        return Err(AtaError::invalid(format!(
            "adjacent-frame MI needs at least two frames, got {t_len}"
        )));
    }
    if x.c() != cb.dim() {
        return Err(AtaError::shape(
            "clip_adjacent_mi",
            format!("volume width {} vs codebook width {}", x.c(), cb.dim()),
        ));
    }
    let labels: Vec<LabelSequence> = (0..t_len)
        .map(|t| quantize(x.frame(t), cb))
        .collect::<Result<_>>()?;
    let mut acc = AdjacentInfo {
        mi: 0.0,
        h_prev: 0.0,
        h_curr: 0.0,
        h_cond: 0.0,
    };
    for t in 1..t_len {
        let (a, b) = (&labels[t - 1], &labels[t]);
        acc.mi += mutual_information(a, b)?;
        acc.h_prev += entropy(a);
        acc.h_curr += entropy(b);
        acc.h_cond += conditional_entropy(a, b)?;
    }
    let pairs = (t_len - 1) as f64;
    Ok(AdjacentInfo {
        mi: acc.mi / pairs,
        h_prev: acc.h_prev / pairs,
        h_curr: acc.h_curr / pairs,
        h_cond: acc.h_cond / pairs,
    })
}

/// Mean adjacent-frame mutual information of `x` under codebook `cb`.
pub fn clip_adjacent_mi(x: &FeatureVolume, cb: &Codebook) -> Result<f64> {
    Ok(clip_adjacent_info(x, cb)?.mi)
}

/// Adjacent-frame information before and after alignment, sharing one codebook.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentInfoReport {
    pub before: AdjacentInfo,
    pub after: AdjacentInfo,
}

/// Fits a `k`-symbol codebook on all patches of `x`, then measures MI on the clip as
/// given and on its aligned version.
pub fn alignment_mi_report(x: &FeatureVolume, k: usize, seed: u64) -> Result<AlignmentInfoReport> {
    let cb = fit_codebook(x.values(), x.c(), k, seed)?;
    let (aligned, _) = align_clip(x)?;
    Ok(AlignmentInfoReport {
        before: clip_adjacent_info(x, &cb)?,
        after: clip_adjacent_info(&aligned, &cb)?,
    })
}
