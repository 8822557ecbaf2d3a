//! A small factorized video transformer with interchangeable temporal operators.
//!
//! Tokens of a `[T, H, W, d]` clip are kept as a `[T·HW, d]` matrix with row
//! `t·HW + p`. Each block applies the variant's temporal operator, then spatial
//! attention within frames (omitted for joint attention), then an MLP, all as
//! pre-norm residual updates. The head mean-pools every token.

mod flops;
mod layers;
mod params;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{AtaError, Result};

pub use flops::{count_flops, count_spatial_flops, FlopReport, PathFlops};
pub use layers::{
    ata_block_temporal, averaging_temporal, forward_classifier, forward_on_tape, joint_attention,
    patch_embed, spatial_attention, temporal_attention, ForwardOptions, ForwardOutput,
    TemporalHook,
};
pub use params::{AttentionParams, BlockParams, MlpParams, ModelParams, NormParams};
pub use train::{evaluate, train, train_with, Dataset, EpochMetrics, Example, TrainHyper, TrainOutcome};

pub const DEFAULT_D: usize = 64;
pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_DEPTH: usize = 2;
pub const DEFAULT_MAX_JOINT_TOKENS: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Residual update by the per-location temporal mean.
    Averaging,
    /// 1D attention across frames at each spatial location.
    Temporal,
    /// Attention over all space-time tokens at once.
    Joint,
    /// Temporal attention along aligned routes.
    Ata,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Averaging,
        Variant::Temporal,
        Variant::Joint,
        Variant::Ata,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Averaging => "averaging",
            Variant::Temporal => "temporal",
            Variant::Joint => "joint",
            Variant::Ata => "ata",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = AtaError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| AtaError::invalid(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub t_len: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    pub variant: Variant,
    pub classes: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_joint_tokens")]
    pub max_joint_tokens: usize,
}

fn default_d() -> usize {
    DEFAULT_D
}

fn default_heads() -> usize {
    DEFAULT_HEADS
}

fn default_depth() -> usize {
    DEFAULT_DEPTH
}

fn default_max_joint_tokens() -> usize {
    DEFAULT_MAX_JOINT_TOKENS
}

impl ModelConfig {
    /// Desk-scale defaults for the given grid and variant.
    pub fn new(t_len: usize, h: usize, w: usize, c_in: usize, variant: Variant, classes: usize) -> Self {
        Self {
            t_len,
            h,
            w,
            c_in,
            d: DEFAULT_D,
            heads: DEFAULT_HEADS,
            depth: DEFAULT_DEPTH,
            variant,
            classes,
            seed: 0,
            max_joint_tokens: DEFAULT_MAX_JOINT_TOKENS,
        }
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn tokens(&self) -> usize {
        self.t_len * self.hw()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.t_len, self.h, self.w, self.c_in, self.d, self.heads, self.classes];
        if dims.contains(&0) {
            return Err(AtaError::invalid(format!(
                "model sizes must be positive: T={} H={} W={} c_in={} d={} heads={} classes={}",
                self.t_len, self.h, self.w, self.c_in, self.d, self.heads, self.classes
            )));
        }
        if self.d % self.heads != 0 {
            return Err(AtaError::invalid(format!(
                "d={} is not divisible by heads={}",
                self.d, self.heads
            )));
        }
        if self.depth == 0 {
            return Err(AtaError::invalid("depth must be at least 1"));
        }
        Ok(())
    }
}
