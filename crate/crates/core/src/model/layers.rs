use std::sync::Arc;

use super::params::{AttentionParams, MlpParams, ModelParams, NormParams};
use super::{ModelConfig, Variant};
use crate::alignment::{compute_plan, AlignmentPlan, FeatureVolume};
use crate::error::{AtaError, Result};
use crate::numerics::{Grouping, Tape, Tensor, Var, LAYER_NORM_EPS};

/// Test hook for the temporal residual sub-block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TemporalHook {
    #[default]
    None,
    /// The temporal sub-block returns its input unchanged.
    Identity,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    /// One plan per block for the ATA variant, replacing the computed ones.
    pub frozen_plans: Option<&'a [AlignmentPlan]>,
    pub zero_positions: bool,
    pub temporal_hook: TemporalHook,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[1, classes]`
    pub logits: Var,
    /// Plans used by ATA blocks, in block order; empty for other variants.
    pub plans: Vec<AlignmentPlan>,
}

/// Row groupings and index maps shared by every block of one clip shape.
struct Grid {
    t_len: usize,
    hw: usize,
    temporal: Arc<Grouping>,
    spatial: Arc<Grouping>,
}

impl Grid {
    fn new(t_len: usize, hw: usize) -> Result<Self> {
        let rows = t_len * hw;
        Ok(Self {
            t_len,
            hw,
            temporal: Arc::new(Grouping::strided(rows, hw)?),
            spatial: Arc::new(Grouping::contiguous(rows, hw)?),
        })
    }

    fn rows(&self) -> usize {
        self.t_len * self.hw
    }

    /// `[rows × rows]` operator taking the temporal mean at each location.
    fn mean_operator(&self) -> Tensor {
        let n = self.rows();
        let mut m = Tensor::zeros(&[n, n]);
        let w = 1.0 / self.t_len as f64;
        for t in 0..self.t_len {
            for p in 0..self.hw {
                for s in 0..self.t_len {
                    m.data_mut()[(t * self.hw + p) * n + s * self.hw + p] = w;
                }
            }
        }
        m
    }
}

fn norm(tape: &mut Tape, x: Var, p: &NormParams<Var>) -> Result<Var> {
    tape.layer_norm(x, p.gamma, p.beta, LAYER_NORM_EPS)
}

/// Multi-head attention over `grouping` followed by the output projection.
fn attention_core(
    tape: &mut Tape,
    n: Var,
    p: &AttentionParams<Var>,
    grouping: Arc<Grouping>,
    heads: usize,
) -> Result<Var> {
    let q = tape.matmul(n, p.q)?;
    let k = tape.matmul(n, p.k)?;
    let v = tape.matmul(n, p.v)?;
    let a = tape.grouped_attention(q, k, v, grouping, heads)?;
    tape.matmul(a, p.out)
}

/// `x + attention(norm(x))`.
fn attention_update(
    tape: &mut Tape,
    x: Var,
    ln: &NormParams<Var>,
    p: &AttentionParams<Var>,
    grouping: Arc<Grouping>,
    heads: usize,
) -> Result<Var> {
    let n = norm(tape, x, ln)?;
    let delta = attention_core(tape, n, p, grouping, heads)?;
    tape.add(x, delta)
}

/// Temporal sub-block along aligned routes: the plan comes from the values of
/// `norm(x)` and is never differentiated; tokens are gathered onto frame 0's
/// layout, updated, and scattered back.
#[allow(clippy::too_many_arguments)]
fn ata_update(
    tape: &mut Tape,
    x: Var,
    ln: &NormParams<Var>,
    p: &AttentionParams<Var>,
    grid: &Grid,
    heads: usize,
    frozen: Option<&AlignmentPlan>,
    hook: TemporalHook,
) -> Result<(Var, AlignmentPlan)> {
    let plan = match frozen {
        Some(plan) => {
            if plan.t_len() != grid.t_len || plan.hw() != grid.hw {
                return Err(AtaError::shape(
                    "ata",
                    format!(
                        "frozen plan for [{}, {}] on a [{}, {}] grid",
                        plan.t_len(),
                        plan.hw(),
                        grid.t_len,
                        grid.hw
                    ),
                ));
            }
            plan.clone()
        }
        None => {
            let n = norm(tape, x, ln)?;
            let nv = tape.value(n);
            compute_plan(nv.data(), grid.t_len, grid.hw, nv.last_dim())?
        }
    };
    let aligned = tape.index_rows(x, plan.token_gather().into())?;
    let updated = match hook {
        TemporalHook::None => {
            attention_update(tape, aligned, ln, p, grid.temporal.clone(), heads)?
        }
        TemporalHook::Identity => aligned,
    };
    let out = tape.index_rows(updated, plan.token_scatter().into())?;
    Ok((out, plan))
}

fn averaging_update(tape: &mut Tape, x: Var, ln: &NormParams<Var>, mean: Var) -> Result<Var> {
    let n = norm(tape, x, ln)?;
    let delta = tape.matmul(mean, n)?;
    tape.add(x, delta)
}

fn mlp_update(tape: &mut Tape, x: Var, ln: &NormParams<Var>, p: &MlpParams<Var>) -> Result<Var> {
    let n = norm(tape, x, ln)?;
    let h = tape.matmul(n, p.w1)?;
    let h = tape.add_bias(h, p.b1)?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, p.w2)?;
    let h = tape.add_bias(h, p.b2)?;
    tape.add(x, h)
}

fn check_clip(clip: &FeatureVolume, config: &ModelConfig) -> Result<()> {
    let expected = [config.t_len, config.h, config.w, config.c_in];
    if clip.dims() != expected {
        return Err(AtaError::shape(
            "model",
            format!("clip {:?} for a model expecting {expected:?}", clip.dims()),
        ));
    }
    Ok(())
}

fn tokens(clip: &FeatureVolume) -> Result<Tensor> {
    Tensor::new(vec![clip.t_len() * clip.hw(), clip.c()], clip.values().to_vec())
}

fn embed(
    tape: &mut Tape,
    clip: &FeatureVolume,
    p: &ModelParams<Var>,
    grid: &Grid,
    zero_positions: bool,
) -> Result<Var> {
    let x = tape.constant(tokens(clip)?);
    let h = tape.matmul(x, p.embed_w)?;
    let h = tape.add_bias(h, p.embed_b)?;
    if zero_positions {
        return Ok(h);
    }
    let rows = grid.rows();
    let spatial: Arc<[usize]> = (0..rows).map(|r| r % grid.hw).collect();
    let temporal: Arc<[usize]> = (0..rows).map(|r| r / grid.hw).collect();
    let ps = tape.index_rows(p.pos_spatial, spatial)?;
    let pt = tape.index_rows(p.pos_temporal, temporal)?;
    let h = tape.add(h, ps)?;
    tape.add(h, pt)
}

/// Builds the classifier graph for one clip on `tape`.
pub fn forward_on_tape(
    tape: &mut Tape,
    clip: &FeatureVolume,
    params: &ModelParams<Var>,
    config: &ModelConfig,
    opts: &ForwardOptions<'_>,
) -> Result<ForwardOutput> {
    config.validate()?;
    check_clip(clip, config)?;
    if params.blocks.len() != config.depth {
        return Err(AtaError::shape(
            "model",
            format!("{} blocks for depth {}", params.blocks.len(), config.depth),
        ));
    }
    if let Some(frozen) = opts.frozen_plans {
        if frozen.len() != config.depth {
            return Err(AtaError::invalid(format!(
                "{} frozen plans for depth {}",
                frozen.len(),
                config.depth
            )));
        }
    }
    if config.variant == Variant::Joint && config.tokens() > config.max_joint_tokens {
        return Err(AtaError::TooLarge(format!(
            "joint attention over {} tokens exceeds the limit of {}",
            config.tokens(),
            config.max_joint_tokens
        )));
    }
    let grid = Grid::new(config.t_len, config.hw())?;
    let joint = Arc::new(Grouping::single(grid.rows()));
    let mean = match config.variant {
        Variant::Averaging => Some(tape.constant(grid.mean_operator())),
        _ => None,
    };
    let missing = |what: &str| AtaError::shape("model", format!("block has no {what} parameters"));

    let mut x = embed(tape, clip, params, &grid, opts.zero_positions)?;
    let mut plans = Vec::new();
    for (bi, block) in params.blocks.iter().enumerate() {
        let identity = opts.temporal_hook == TemporalHook::Identity;
        x = match config.variant {
            Variant::Averaging if identity => x,
            Variant::Averaging => {
                averaging_update(tape, x, &block.temporal_norm, mean.expect("built above"))?
            }
            Variant::Temporal | Variant::Joint if identity => x,
            Variant::Temporal => {
                let a = block.temporal.as_ref().ok_or_else(|| missing("temporal"))?;
                attention_update(tape, x, &block.temporal_norm, a, grid.temporal.clone(), config.heads)?
            }
            Variant::Joint => {
                let a = block.temporal.as_ref().ok_or_else(|| missing("joint"))?;
                attention_update(tape, x, &block.temporal_norm, a, joint.clone(), config.heads)?
            }
            Variant::Ata => {
                let a = block.temporal.as_ref().ok_or_else(|| missing("temporal"))?;
                let frozen = opts.frozen_plans.map(|f| &f[bi]);
                let (out, plan) = ata_update(
                    tape,
                    x,
                    &block.temporal_norm,
                    a,
                    &grid,
                    config.heads,
                    frozen,
                    opts.temporal_hook,
                )?;
                plans.push(plan);
                out
            }
        };
        if let (Some(ln), Some(a)) = (&block.spatial_norm, &block.spatial) {
            x = attention_update(tape, x, ln, a, grid.spatial.clone(), config.heads)?;
        }
        x = mlp_update(tape, x, &block.mlp_norm, &block.mlp)?;
    }
    let n = norm(tape, x, &params.final_norm)?;
    let pooled = tape.mean_rows(n)?;
    let logits = tape.matmul(pooled, params.head_w)?;
    let logits = tape.add_bias(logits, params.head_b)?;
    Ok(ForwardOutput { logits, plans })
}

fn constant_params(tape: &mut Tape, params: &ModelParams) -> ModelParams<Var> {
    params.map(|_, t| tape.constant(t.clone()))
}

/// Class logits for one clip.
pub fn forward_classifier(
    clip: &FeatureVolume,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Vec<f64>> {
    params.check(config)?;
    let mut tape = Tape::new();
    let vars = constant_params(&mut tape, params);
    let out = forward_on_tape(&mut tape, clip, &vars, config, &ForwardOptions::default())?;
    Ok(tape.value(out.logits).data().to_vec())
}

/// Shared linear map per patch plus separable spatial and temporal embeddings.
pub fn patch_embed(
    clip: &FeatureVolume,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<FeatureVolume> {
    config.validate()?;
    check_clip(clip, config)?;
    params.check(config)?;
    let grid = Grid::new(config.t_len, config.hw())?;
    let mut tape = Tape::new();
    let vars = constant_params(&mut tape, params);
    let h = embed(&mut tape, clip, &vars, &grid, false)?;
    to_volume(&tape, h, clip)
}

fn to_volume(tape: &Tape, v: Var, like: &FeatureVolume) -> Result<FeatureVolume> {
    let t = tape.value(v);
    FeatureVolume::new(like.t_len(), like.h(), like.w(), t.last_dim(), t.data().to_vec())
}

fn check_width(op: &'static str, x: &FeatureVolume, a: &AttentionParams, heads: usize) -> Result<()> {
    let d = x.c();
    for w in [&a.q, &a.k, &a.v, &a.out] {
        if w.shape() != [d, d] {
            return Err(AtaError::shape(
                op,
                format!("projection {:?} for width {d}", w.shape()),
            ));
        }
    }
    if heads == 0 || d % heads != 0 {
        return Err(AtaError::invalid(format!("width {d} not divisible by {heads} heads")));
    }
    Ok(())
}

fn volume_update(
    op: &'static str,
    x: &FeatureVolume,
    ln: &NormParams,
    a: &AttentionParams,
    heads: usize,
    grouping: impl FnOnce(&Grid) -> Arc<Grouping>,
) -> Result<FeatureVolume> {
    check_width(op, x, a, heads)?;
    let grid = Grid::new(x.t_len(), x.hw())?;
    let mut tape = Tape::new();
    let xv = tape.constant(tokens(x)?);
    let lnv = NormParams {
        gamma: tape.constant(ln.gamma.clone()),
        beta: tape.constant(ln.beta.clone()),
    };
    let av = constant_attention(&mut tape, a);
    let out = attention_update(&mut tape, xv, &lnv, &av, grouping(&grid), heads)?;
    to_volume(&tape, out, x)
}

fn constant_attention(tape: &mut Tape, a: &AttentionParams) -> AttentionParams<Var> {
    AttentionParams {
        q: tape.constant(a.q.clone()),
        k: tape.constant(a.k.clone()),
        v: tape.constant(a.v.clone()),
        out: tape.constant(a.out.clone()),
    }
}

/// Pre-norm residual attention across frames at each spatial location.
pub fn temporal_attention(
    x: &FeatureVolume,
    ln: &NormParams,
    a: &AttentionParams,
    heads: usize,
) -> Result<FeatureVolume> {
    volume_update("temporal_attention", x, ln, a, heads, |g| g.temporal.clone())
}

/// Pre-norm residual attention among the patches of each frame.
pub fn spatial_attention(
    x: &FeatureVolume,
    ln: &NormParams,
    a: &AttentionParams,
    heads: usize,
) -> Result<FeatureVolume> {
    volume_update("spatial_attention", x, ln, a, heads, |g| g.spatial.clone())
}

/// Pre-norm residual attention over every space-time token.
pub fn joint_attention(
    x: &FeatureVolume,
    ln: &NormParams,
    a: &AttentionParams,
    heads: usize,
    max_tokens: usize,
) -> Result<FeatureVolume> {
    let n = x.t_len() * x.hw();
    if n > max_tokens {
        return Err(AtaError::TooLarge(format!(
            "joint attention over {n} tokens exceeds the limit of {max_tokens}"
        )));
    }
    volume_update("joint_attention", x, ln, a, heads, |g| {
        Arc::new(Grouping::single(g.rows()))
    })
}

/// Every frame replaced by the per-location mean over time.
pub fn averaging_temporal(x: &FeatureVolume) -> Result<FeatureVolume> {
    let (t_len, frame) = (x.t_len(), x.hw() * x.c());
    let mut mean = vec![0.0; frame];
    for t in 0..t_len {
        for (m, v) in mean.iter_mut().zip(x.frame(t)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= t_len as f64);
    FeatureVolume::new(t_len, x.h(), x.w(), x.c(), mean.repeat(t_len))
}

/// Temporal attention along aligned routes, returned in the original layout
/// together with the plan that was used.
pub fn ata_block_temporal(
    x: &FeatureVolume,
    ln: &NormParams,
    a: &AttentionParams,
    heads: usize,
    hook: TemporalHook,
) -> Result<(FeatureVolume, AlignmentPlan)> {
    check_width("ata_block_temporal", x, a, heads)?;
    let grid = Grid::new(x.t_len(), x.hw())?;
    let mut tape = Tape::new();
    let xv = tape.constant(tokens(x)?);
    let lnv = NormParams {
        gamma: tape.constant(ln.gamma.clone()),
        beta: tape.constant(ln.beta.clone()),
    };
    let av = constant_attention(&mut tape, a);
    let (out, plan) = ata_update(&mut tape, xv, &lnv, &av, &grid, heads, None, hook)?;
    Ok((to_volume(&tape, out, x)?, plan))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{finite_diff_check, sdp_attention};
    use crate::permutation::Permutation;
    use crate::synthdata::{gen_static, random_permutation};

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = scale * rng.gen_range(-1.0..1.0));
        t
    }

    fn random_attention(rng: &mut ChaCha8Rng, d: usize) -> (NormParams, AttentionParams) {
        let ln = NormParams {
            gamma: Tensor::ones(&[d]),
            beta: Tensor::zeros(&[d]),
        };
        let s = 1.0 / (d as f64).sqrt();
        let a = AttentionParams {
            q: randn(rng, &[d, d], s),
            k: randn(rng, &[d, d], s),
            v: randn(rng, &[d, d], s),
            out: randn(rng, &[d, d], s),
        };
        (ln, a)
    }

    fn random_volume(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> FeatureVolume {
        let [t, h, w, c] = dims;
        let v = (0..t * h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureVolume::new(t, h, w, c, v).unwrap()
    }

    fn small_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            t_len: 3,
            h: 2,
            w: 2,
            c_in: 3,
            d: 4,
            heads: 2,
            depth: 1,
            variant,
            classes: 3,
            seed: 11,
            max_joint_tokens: 64,
        }
    }

    /// Per-token `x + out(v(norm(x)))`, computed without the tape.
    fn single_token_oracle(x: &FeatureVolume, a: &AttentionParams) -> Vec<f64> {
        let d = x.c();
        let mul = |row: &[f64], m: &Tensor| -> Vec<f64> {
            (0..d)
                .map(|j| (0..d).map(|i| row[i] * m.data()[i * d + j]).sum())
                .collect()
        };
        let mut out = Vec::new();
        for row in x.values().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let n: Vec<f64> = row
                .iter()
                .map(|v| (v - mean) / (var + LAYER_NORM_EPS).sqrt())
                .collect();
            let y = mul(&mul(&n, &a.v), &a.out);
            out.extend(row.iter().zip(&y).map(|(r, y)| r + y));
        }
        out
    }

    #[test]
    fn patch_embed_cases() {
        let mut cfg = small_config(Variant::Temporal);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clip = random_volume(&mut rng, [3, 2, 2, 3]);
        let mut p = ModelParams::init(&cfg).unwrap();
        p.embed_w = Tensor::zeros(&[3, 4]);
        p.pos_spatial = Tensor::zeros(&[4, 4]);
        p.pos_temporal = Tensor::zeros(&[3, 4]);
        let z = patch_embed(&clip, &p, &cfg).unwrap();
        assert!(z.values().iter().all(|&v| v == 0.0));

        cfg.c_in = 4;
        let clip4 = random_volume(&mut rng, [3, 2, 2, 4]);
        let mut p = ModelParams::init(&cfg).unwrap();
        p.embed_w = Tensor::identity(4);
        p.pos_spatial = Tensor::zeros(&[4, 4]);
        p.pos_temporal = Tensor::zeros(&[3, 4]);
        assert_eq!(patch_embed(&clip4, &p, &cfg).unwrap(), clip4);

        let cfg = ModelConfig {
            t_len: 4,
            c_in: 3,
            d: 8,
            ..small_config(Variant::Temporal)
        };
        let p = ModelParams::init(&cfg).unwrap();
        let x = random_volume(&mut rng, [4, 2, 2, 3]);
        assert_eq!(patch_embed(&x, &p, &cfg).unwrap().dims(), [4, 2, 2, 8]);
        assert!(patch_embed(&clip4, &p, &cfg).is_err());
    }

    #[test]
    fn positions_are_separable() {
        let cfg = small_config(Variant::Temporal);
        let mut p = ModelParams::init(&cfg).unwrap();
        p.embed_w = Tensor::zeros(&[3, 4]);
        let clip = FeatureVolume::zeros(3, 2, 2, 3).unwrap();
        let e = patch_embed(&clip, &p, &cfg).unwrap();
        for t in 0..3 {
            for q in 0..4 {
                for j in 0..4 {
                    let expect = p.pos_spatial.data()[q * 4 + j] + p.pos_temporal.data()[t * 4 + j];
                    assert_eq!(e.patch(t, q)[j], expect);
                }
            }
        }
    }

    #[test]
    fn single_frame_temporal_attention_is_per_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (ln, a) = random_attention(&mut rng, 4);
        let x = random_volume(&mut rng, [1, 2, 3, 4]);
        let y = temporal_attention(&x, &ln, &a, 2).unwrap();
        let oracle = single_token_oracle(&x, &a);
        for (u, v) in y.values().iter().zip(&oracle) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_frames_give_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (ln, a) = random_attention(&mut rng, 4);
        let frame = random_volume(&mut rng, [1, 2, 2, 4]);
        let x = FeatureVolume::new(3, 2, 2, 4, frame.values().repeat(3)).unwrap();
        for y in [
            temporal_attention(&x, &ln, &a, 2).unwrap(),
            ata_block_temporal(&x, &ln, &a, 2, TemporalHook::None).unwrap().0,
        ] {
            assert_eq!(y.frame(0), y.frame(1));
            assert_eq!(y.frame(0), y.frame(2));
        }
    }

    #[test]
    fn temporal_attention_is_time_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (ln, a) = random_attention(&mut rng, 4);
        let x = random_volume(&mut rng, [4, 2, 2, 4]);
        let order = [2, 0, 3, 1];
        let reorder = |v: &FeatureVolume| {
            let vals: Vec<f64> = order.iter().flat_map(|&t| v.frame(t).to_vec()).collect();
            FeatureVolume::new(4, 2, 2, 4, vals).unwrap()
        };
        let direct = reorder(&temporal_attention(&x, &ln, &a, 2).unwrap());
        let permuted = temporal_attention(&reorder(&x), &ln, &a, 2).unwrap();
        for (u, v) in direct.values().iter().zip(permuted.values()) {
            assert!((u - v).abs() <= 1e-10);
        }
    }

    #[test]
    fn spatial_attention_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (ln, a) = random_attention(&mut rng, 4);
        // H·W = 1 is single-token attention
        let x = random_volume(&mut rng, [3, 1, 1, 4]);
        let y = spatial_attention(&x, &ln, &a, 1).unwrap();
        for (u, v) in y.values().iter().zip(&single_token_oracle(&x, &a)) {
            assert!((u - v).abs() < 1e-12);
        }
        // frames are processed independently
        let x = random_volume(&mut rng, [3, 2, 2, 4]);
        let y = spatial_attention(&x, &ln, &a, 2).unwrap();
        let mut vals = x.frame(2).to_vec();
        vals.extend_from_slice(x.frame(1));
        vals.extend_from_slice(x.frame(0));
        let xr = FeatureVolume::new(3, 2, 2, 4, vals).unwrap();
        let yr = spatial_attention(&xr, &ln, &a, 2).unwrap();
        assert_eq!(yr.frame(0), y.frame(2));
        assert_eq!(yr.frame(2), y.frame(0));
    }

    /// Two-token case through single-head `sdp_attention` on explicit projections.
    fn two_token_oracle(x: &FeatureVolume, ln: &NormParams, a: &AttentionParams) -> Vec<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(tokens(x).unwrap());
        let g = tape.constant(ln.gamma.clone());
        let b = tape.constant(ln.beta.clone());
        let n = tape.layer_norm(xv, g, b, LAYER_NORM_EPS).unwrap();
        let [q, k, v, o] = [&a.q, &a.k, &a.v, &a.out].map(|w| tape.constant(w.clone()));
        let (q, k, v) = (
            tape.matmul(n, q).unwrap(),
            tape.matmul(n, k).unwrap(),
            tape.matmul(n, v).unwrap(),
        );
        let att = sdp_attention(&mut tape, q, k, v).unwrap();
        let y = tape.matmul(att, o).unwrap();
        let y = tape.add(xv, y).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn two_token_cases_match_sdp_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (ln, a) = random_attention(&mut rng, 4);
        let x = random_volume(&mut rng, [1, 1, 2, 4]);
        let oracle = two_token_oracle(&x, &ln, &a);
        let s = spatial_attention(&x, &ln, &a, 1).unwrap();
        let j = joint_attention(&x, &ln, &a, 1, 16).unwrap();
        for ((u, v), w) in s.values().iter().zip(j.values()).zip(&oracle) {
            assert!((u - w).abs() < 1e-12 && (v - w).abs() < 1e-12);
        }
        let xt = FeatureVolume::new(2, 1, 1, 4, x.values().to_vec()).unwrap();
        let t = temporal_attention(&xt, &ln, &a, 1).unwrap();
        for (u, w) in t.values().iter().zip(&oracle) {
            assert!((u - w).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_attention_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (ln, a) = random_attention(&mut rng, 4);
        let x = random_volume(&mut rng, [1, 2, 3, 4]);
        let j = joint_attention(&x, &ln, &a, 2, 64).unwrap();
        let s = spatial_attention(&x, &ln, &a, 2).unwrap();
        assert!(j.max_abs_diff_for_test(&s) < 1e-12);

        let frame = random_volume(&mut rng, [1, 1, 1, 4]);
        let same = FeatureVolume::new(2, 2, 2, 4, frame.values().repeat(8)).unwrap();
        let y = joint_attention(&same, &ln, &a, 2, 64).unwrap();
        let first = y.patch(0, 0).to_vec();
        for t in 0..2 {
            for p in 0..4 {
                assert_eq!(y.patch(t, p), &first[..]);
            }
        }
        assert!(matches!(
            joint_attention(&same, &ln, &a, 2, 7),
            Err(AtaError::TooLarge(_))
        ));
    }

    #[test]
    fn averaging_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_volume(&mut rng, [1, 2, 2, 3]);
        assert_eq!(averaging_temporal(&x).unwrap(), x);
        let v: Vec<f64> = random_volume(&mut rng, [1, 2, 2, 3]).into_values();
        let mut vals = v.clone();
        vals.extend(v.iter().map(|a| -a));
        let y = averaging_temporal(&FeatureVolume::new(2, 2, 2, 3, vals).unwrap()).unwrap();
        assert!(y.values().iter().all(|&a| a == 0.0));
        let s = FeatureVolume::new(3, 1, 1, 1, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(averaging_temporal(&s).unwrap().values(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn averaging_operator_matches_volume_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_volume(&mut rng, [3, 2, 2, 2]);
        let grid = Grid::new(3, 4).unwrap();
        let mut tape = Tape::new();
        let m = tape.constant(grid.mean_operator());
        let xv = tape.constant(tokens(&x).unwrap());
        let y = tape.matmul(m, xv).unwrap();
        let expect = averaging_temporal(&x).unwrap();
        for (u, v) in tape.value(y).data().iter().zip(expect.values()) {
            assert!((u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn ata_identity_hook_round_trips_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (ln, a) = random_attention(&mut rng, 4);
        let x = random_volume(&mut rng, [4, 3, 3, 4]);
        let (y, plan) = ata_block_temporal(&x, &ln, &a, 2, TemporalHook::Identity).unwrap();
        assert_eq!(y, x);
        assert!(plan.perms().iter().skip(1).any(|p| !p.is_identity()));
    }

    #[test]
    fn ata_matches_temporal_on_static_clips() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (ln, a) = random_attention(&mut rng, 8);
        let x = gen_static(4, 3, 3, 8, 2).unwrap().volume;
        let (y, plan) = ata_block_temporal(&x, &ln, &a, 2, TemporalHook::None).unwrap();
        assert!(plan.perms().iter().all(Permutation::is_identity));
        assert_eq!(y, temporal_attention(&x, &ln, &a, 2).unwrap());
    }

    #[test]
    fn ata_is_shuffle_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for seed in 0..10 {
            let (ln, a) = random_attention(&mut rng, 8);
            let x = gen_static(5, 3, 3, 8, seed).unwrap().volume;
            let shuffles: Vec<Permutation> = (0..5)
                .map(|t| {
                    if t == 0 {
                        Permutation::identity(9)
                    } else {
                        random_permutation(9, &mut rng)
                    }
                })
                .collect();
            let xs = x.permute_frames(&shuffles).unwrap();
            let (ys, _) = ata_block_temporal(&xs, &ln, &a, 2, TemporalHook::None).unwrap();
            let expect = temporal_attention(&x, &ln, &a, 2)
                .unwrap()
                .permute_frames(&shuffles)
                .unwrap();
            assert!(ys.max_abs_diff_for_test(&expect) <= 1e-9);
        }
    }

    #[test]
    fn classifier_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for v in Variant::ALL {
            let cfg = small_config(v);
            let mut p = ModelParams::init(&cfg).unwrap();
            let clip = random_volume(&mut rng, [3, 2, 2, 3]);
            let logits = forward_classifier(&clip, &p, &cfg).unwrap();
            assert_eq!(logits.len(), 3);
            assert_eq!(forward_classifier(&clip, &p, &cfg).unwrap(), logits);
            p.head_w = Tensor::zeros(&[4, 3]);
            assert_eq!(forward_classifier(&clip, &p, &cfg).unwrap(), vec![0.0; 3]);
        }
    }

    #[test]
    fn ata_equals_temporal_model_on_static_clips() {
        let t = small_config(Variant::Temporal);
        let a = small_config(Variant::Ata);
        let p = ModelParams::init(&t).unwrap();
        let clip = gen_static(3, 2, 2, 3, 4).unwrap().volume;
        let lt = forward_classifier(&clip, &p, &t).unwrap();
        let la = forward_classifier(&clip, &p, &a).unwrap();
        for (x, y) in lt.iter().zip(&la) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    fn model_loss(
        tape: &mut Tape,
        vars: &[Var],
        template: &ModelParams,
        clip: &FeatureVolume,
        cfg: &ModelConfig,
        plans: Option<&[AlignmentPlan]>,
    ) -> Result<Var> {
        let pv = template.with_values(vars.to_vec())?;
        let opts = ForwardOptions {
            frozen_plans: plans,
            ..Default::default()
        };
        let out = forward_on_tape(tape, clip, &pv, cfg, &opts)?;
        tape.cross_entropy(out.logits, &[1])
    }

    #[test]
    fn full_ata_model_passes_finite_differences() {
        let mut cfg = small_config(Variant::Ata);
        cfg.depth = 2;
        let p = ModelParams::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let clip = random_volume(&mut rng, [3, 2, 2, 3]);
        let mut tape = Tape::new();
        let vars = constant_params(&mut tape, &p);
        let plans = forward_on_tape(&mut tape, &clip, &vars, &cfg, &ForwardOptions::default())
            .unwrap()
            .plans;
        let flat: Vec<Tensor> = p.named().into_iter().map(|(_, t)| t.clone()).collect();
        let err = finite_diff_check(
            |tape, vars| model_loss(tape, vars, &p, &clip, &cfg, Some(&plans)),
            &flat,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn every_ata_parameter_receives_a_gradient() {
        let cfg = ModelConfig {
            depth: 2,
            ..small_config(Variant::Ata)
        };
        let p = ModelParams::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let clip = random_volume(&mut rng, [3, 2, 2, 3]);
        let mut tape = Tape::new();
        let vars = p.map(|_, t| tape.param(t.clone()));
        let out = forward_on_tape(&mut tape, &clip, &vars, &cfg, &ForwardOptions::default()).unwrap();
        let loss = tape.cross_entropy(out.logits, &[2]).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (name, v) in vars.named() {
            let g = grads.get(*v).unwrap_or_else(|| panic!("{name} has no gradient"));
            assert!(g.is_finite(), "{name}");
            assert!(g.data().iter().any(|&x| x != 0.0), "{name} gradient is zero");
        }
    }

    #[test]
    fn frozen_plans_are_validated() {
        let cfg = small_config(Variant::Ata);
        let p = ModelParams::init(&cfg).unwrap();
        let clip = FeatureVolume::zeros(3, 2, 2, 3).unwrap();
        let mut tape = Tape::new();
        let vars = constant_params(&mut tape, &p);
        let wrong = [AlignmentPlan::identity(3, 9)];
        let opts = ForwardOptions {
            frozen_plans: Some(&wrong),
            ..Default::default()
        };
        assert!(forward_on_tape(&mut tape, &clip, &vars, &cfg, &opts).is_err());
    }

    impl FeatureVolume {
        fn max_abs_diff_for_test(&self, other: &FeatureVolume) -> f64 {
            assert_eq!(self.dims(), other.dims());
            self.values()
                .iter()
                .zip(other.values())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        }
    }
}
