//! Closed-form multiply-accumulate counts for one encoder block.
//!
//! Each attention path is split into its projections (`q`, `k`, `v`, output) and
//! its core (query-key scores and the weighted sum of values). The attention
//! figure compared across variants is the core; projections are reported next to
//! it. Matching cost is kept apart in `assignment` as `T·(HW)³` units.

use serde::Serialize;

use super::{ModelConfig, Variant};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PathFlops {
    pub qkv: u64,
    pub scores: u64,
    pub weighted_sum: u64,
    pub out: u64,
}

impl PathFlops {
    /// Attention over `groups` independent groups of `len` tokens each.
    fn grouped(groups: u64, len: u64, d: u64) -> Self {
        let tokens = groups * len;
        Self {
            qkv: 3 * tokens * d * d,
            scores: groups * len * len * d,
            weighted_sum: groups * len * len * d,
            out: tokens * d * d,
        }
    }

    pub fn core(&self) -> u64 {
        self.scores + self.weighted_sum
    }

    pub fn projections(&self) -> u64 {
        self.qkv + self.out
    }

    pub fn total(&self) -> u64 {
        self.core() + self.projections()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FlopReport {
    /// The variant's temporal operator; holds joint attention for the joint variant.
    pub temporal: PathFlops,
    pub spatial: PathFlops,
    /// Patch-matching cost, `T·(HW)³`.
    pub assignment: u64,
}

impl FlopReport {
    /// Attention-core multiply-accumulates over every path.
    pub fn attention(&self) -> u64 {
        self.temporal.core() + self.spatial.core()
    }

    pub fn projections(&self) -> u64 {
        self.temporal.projections() + self.spatial.projections()
    }
}

fn dims(config: &ModelConfig) -> (u64, u64, u64) {
    (config.t_len as u64, config.hw() as u64, config.d as u64)
}

fn spatial_path(config: &ModelConfig) -> PathFlops {
    let (t, hw, d) = dims(config);
    PathFlops::grouped(t, hw, d)
}

/// Per-block counts for `variant` on the grid and width of `config`.
pub fn count_flops(config: &ModelConfig, variant: Variant) -> FlopReport {
    let (t, hw, d) = dims(config);
    let temporal = PathFlops::grouped(hw, t, d);
    match variant {
        Variant::Averaging => FlopReport {
            temporal: PathFlops::default(),
            spatial: spatial_path(config),
            assignment: 0,
        },
        Variant::Temporal => FlopReport {
            temporal,
            spatial: spatial_path(config),
            assignment: 0,
        },
        Variant::Ata => FlopReport {
            temporal,
            spatial: spatial_path(config),
            assignment: t * hw * hw * hw,
        },
        Variant::Joint => FlopReport {
            temporal: PathFlops::grouped(1, t * hw, d),
            spatial: PathFlops::default(),
            assignment: 0,
        },
    }
}

/// Per-block counts for spatial attention alone.
pub fn count_spatial_flops(config: &ModelConfig) -> FlopReport {
    FlopReport {
        temporal: PathFlops::default(),
        spatial: spatial_path(config),
        assignment: 0,
    }
}
