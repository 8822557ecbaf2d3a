//! Frame-by-frame alignment of a clip along its optimal patch matchings, and the
//! exact inverse.
//!
//! Frame `t` is matched against the *already aligned* frame `t − 1`, so the
//! recorded permutations chain: each one maps frame `t` onto frame 0's layout.

use serde::{Deserialize, Serialize};

use crate::error::{AtaError, Result};
use crate::matching::{cosine_similarity_matrix, solve_assignment_exact};
use crate::permutation::Permutation;

/// Dense `[T, H, W, C]` feature array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    t_len: usize,
    h: usize,
    w: usize,
    c: usize,
    values: Vec<f64>,
}

impl FeatureVolume {
    pub fn new(t_len: usize, h: usize, w: usize, c: usize, values: Vec<f64>) -> Result<Self> {
        if t_len == 0 || h == 0 || w == 0 || c == 0 {
            return Err(AtaError::invalid(format!(
                "volume dimensions must be positive, got [{t_len}, {h}, {w}, {c}]"
            )));
        }
        if values.len() != t_len * h * w * c {
            return Err(AtaError::shape(
                "feature_volume",
                format!(
                    "[{t_len}, {h}, {w}, {c}] needs {} values, got {}",
                    t_len * h * w * c,
                    values.len()
                ),
            ));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(AtaError::NonFinite {
                op: "feature_volume",
                node: None,
            });
        }
        Ok(Self {
            t_len,
            h,
            w,
            c,
            values,
        })
    }

    pub fn zeros(t_len: usize, h: usize, w: usize, c: usize) -> Result<Self> {
        Self::new(t_len, h, w, c, vec![0.0; t_len * h * w * c])
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn c(&self) -> usize {
        self.c
    }

    /// Patches per frame.
    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.t_len, self.h, self.w, self.c]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Frame `t` as `[HW × C]` rows.
    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.hw() * self.c;
        &self.values[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        let n = self.hw() * self.c;
        &mut self.values[t * n..(t + 1) * n]
    }

    pub fn patch(&self, t: usize, p: usize) -> &[f64] {
        let start = (t * self.hw() + p) * self.c;
        &self.values[start..start + self.c]
    }

    /// Applies `perms[t]` (gather convention) to each frame.
    pub fn permute_frames(&self, perms: &[Permutation]) -> Result<Self> {
        if perms.len() != self.t_len {
            return Err(AtaError::shape(
                "permute_frames",
                format!("{} permutations for {} frames", perms.len(), self.t_len),
            ));
        }
        let mut out = self.clone();
        for (t, p) in perms.iter().enumerate() {
            if p.len() != self.hw() {
                return Err(AtaError::shape(
                    "permute_frames",
                    format!("permutation of {} for {} patches", p.len(), self.hw()),
                ));
            }
            let g = p.gather_rows(self.frame(t), self.c)?;
            out.frame_mut(t).copy_from_slice(&g);
        }
        Ok(out)
    }
}

/// One gather permutation per frame; entry 0 is always the identity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentPlan {
    perms: Vec<Permutation>,
}

impl AlignmentPlan {
    pub fn new(perms: Vec<Permutation>) -> Result<Self> {
        let Some(first) = perms.first() else {
            return Err(AtaError::invalid("alignment plan needs at least one frame"));
        };
        let n = first.len();
        if !first.is_identity() {
            return Err(AtaError::invalid("plan entry 0 must be the identity"));
        }
        if perms.iter().any(|p| p.len() != n) {
            return Err(AtaError::invalid("plan permutations differ in length"));
        }
        Ok(Self { perms })
    }

    pub fn identity(t_len: usize, hw: usize) -> Self {
        Self {
            perms: vec![Permutation::identity(hw); t_len],
        }
    }

    pub fn perms(&self) -> &[Permutation] {
        &self.perms
    }

    pub fn t_len(&self) -> usize {
        self.perms.len()
    }

    pub fn hw(&self) -> usize {
        self.perms[0].len()
    }

    pub fn inverse_perms(&self) -> Vec<Permutation> {
        self.perms.iter().map(Permutation::inverse).collect()
    }

    /// Row gather map over a flattened `[T·HW]` token axis.
    pub fn token_gather(&self) -> Vec<usize> {
        flatten(&self.perms)
    }

    /// Inverse of [`Self::token_gather`].
    pub fn token_scatter(&self) -> Vec<usize> {
        flatten(&self.inverse_perms())
    }
}

fn flatten(perms: &[Permutation]) -> Vec<usize> {
    let hw = perms[0].len();
    perms
        .iter()
        .enumerate()
        .flat_map(|(t, p)| p.map().iter().map(move |&m| t * hw + m))
        .collect()
}

/// Computes the chained alignment plan for `[T·HW × C]` token rows.
///
/// Similarities are taken on L2-normalised copies and never enter differentiation.
pub fn compute_plan(tokens: &[f64], t_len: usize, hw: usize, c: usize) -> Result<AlignmentPlan> {
    if t_len == 0 || hw == 0 || c == 0 || tokens.len() != t_len * hw * c {
        return Err(AtaError::shape(
            "compute_plan",
            format!("{} values for [{t_len}, {hw}, {c}]", tokens.len()),
        ));
    }
    let frame = hw * c;
    let mut perms = Vec::with_capacity(t_len);
    perms.push(Permutation::identity(hw));
    let mut prev_aligned = tokens[..frame].to_vec();
    for t in 1..t_len {
        let curr = &tokens[t * frame..(t + 1) * frame];
        let s = cosine_similarity_matrix(&prev_aligned, curr, c)?;
        let p = solve_assignment_exact(&s)?;
        prev_aligned = p.gather_rows(curr, c)?;
        perms.push(p);
    }
    AlignmentPlan::new(perms)
}

/// Aligns every frame to its already-aligned predecessor; frame 0 is untouched.
pub fn align_clip(x: &FeatureVolume) -> Result<(FeatureVolume, AlignmentPlan)> {
    let plan = compute_plan(x.values(), x.t_len(), x.hw(), x.c())?;
    let aligned = x.permute_frames(plan.perms())?;
    Ok((aligned, plan))
}

/// Restores the original spatial order: frame `t` is gathered by `perms[t]⁻¹`.
pub fn dealign_clip(aligned: &FeatureVolume, plan: &AlignmentPlan) -> Result<FeatureVolume> {
    if plan.t_len() != aligned.t_len() || plan.hw() != aligned.hw() {
        return Err(AtaError::shape(
            "dealign_clip",
            format!(
                "plan for [{}, {}] applied to volume {:?}",
                plan.t_len(),
                plan.hw(),
                aligned.dims()
            ),
        ));
    }
    aligned.permute_frames(&plan.inverse_perms())
}

/// One-hot `n × n` matrix of `p`; row and column sums are all 1.
pub fn permutation_matrix(p: &Permutation) -> Vec<Vec<u8>> {
    p.to_matrix()
}
