use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, Variant};
use crate::error::{AtaError, Result};
use crate::numerics::Tensor;

const POSITION_AMPLITUDE: f64 = 0.5;
const MLP_EXPANSION: usize = 4;

/// Standard deviation of `U(±1/√fan_in)`, used for MLP and head weights.
fn dense_std(fan_in: usize) -> f64 {
    1.0 / (3.0 * fan_in as f64).sqrt()
}

/// Bias-free multi-head attention projections, each `[d, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T = Tensor> {
    pub q: T,
    pub k: T,
    pub v: T,
    pub out: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<T = Tensor> {
    pub gamma: T,
    pub beta: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<T = Tensor> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

/// One encoder block. The temporal slot holds the joint attention for the joint
/// variant and has no projections for averaging; spatial attention is absent for
/// the joint variant.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T = Tensor> {
    pub temporal_norm: NormParams<T>,
    pub temporal: Option<AttentionParams<T>>,
    pub spatial_norm: Option<NormParams<T>>,
    pub spatial: Option<AttentionParams<T>>,
    pub mlp_norm: NormParams<T>,
    pub mlp: MlpParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    /// `[c_in, d]`
    pub embed_w: T,
    /// `[d]`
    pub embed_b: T,
    /// `[HW, d]`
    pub pos_spatial: T,
    /// `[T, d]`
    pub pos_temporal: T,
    pub blocks: Vec<BlockParams<T>>,
    pub final_norm: NormParams<T>,
    /// `[d, classes]`
    pub head_w: T,
    /// `[classes]`
    pub head_b: T,
}

type Visit<'a, 's, T, U> = dyn FnMut(&str, &'s T) -> Result<U> + 'a;

impl<T> AttentionParams<T> {
    fn try_map<'s, U>(&'s self, prefix: &str, f: &mut Visit<'_, 's, T, U>) -> Result<AttentionParams<U>> {
        Ok(AttentionParams {
            q: f(&format!("{prefix}.q"), &self.q)?,
            k: f(&format!("{prefix}.k"), &self.k)?,
            v: f(&format!("{prefix}.v"), &self.v)?,
            out: f(&format!("{prefix}.out"), &self.out)?,
        })
    }
}

impl<T> NormParams<T> {
    fn try_map<'s, U>(&'s self, prefix: &str, f: &mut Visit<'_, 's, T, U>) -> Result<NormParams<U>> {
        Ok(NormParams {
            gamma: f(&format!("{prefix}.gamma"), &self.gamma)?,
            beta: f(&format!("{prefix}.beta"), &self.beta)?,
        })
    }
}

impl<T> MlpParams<T> {
    fn try_map<'s, U>(&'s self, prefix: &str, f: &mut Visit<'_, 's, T, U>) -> Result<MlpParams<U>> {
        Ok(MlpParams {
            w1: f(&format!("{prefix}.w1"), &self.w1)?,
            b1: f(&format!("{prefix}.b1"), &self.b1)?,
            w2: f(&format!("{prefix}.w2"), &self.w2)?,
            b2: f(&format!("{prefix}.b2"), &self.b2)?,
        })
    }
}

impl<T> BlockParams<T> {
    fn try_map<'s, U>(&'s self, prefix: &str, f: &mut Visit<'_, 's, T, U>) -> Result<BlockParams<U>> {
        Ok(BlockParams {
            temporal_norm: self.temporal_norm.try_map(&format!("{prefix}.temporal_norm"), f)?,
            temporal: self
                .temporal
                .as_ref()
                .map(|a| a.try_map(&format!("{prefix}.temporal"), f))
                .transpose()?,
            spatial_norm: self
                .spatial_norm
                .as_ref()
                .map(|n| n.try_map(&format!("{prefix}.spatial_norm"), f))
                .transpose()?,
            spatial: self
                .spatial
                .as_ref()
                .map(|a| a.try_map(&format!("{prefix}.spatial"), f))
                .transpose()?,
            mlp_norm: self.mlp_norm.try_map(&format!("{prefix}.mlp_norm"), f)?,
            mlp: self.mlp.try_map(&format!("{prefix}.mlp"), f)?,
        })
    }
}

impl<T> ModelParams<T> {
    /// Visits every entry in a fixed order with its dotted name.
    pub fn try_map<'s, U>(&'s self, f: &mut Visit<'_, 's, T, U>) -> Result<ModelParams<U>> {
        Ok(ModelParams {
            embed_w: f("embed.w", &self.embed_w)?,
            embed_b: f("embed.b", &self.embed_b)?,
            pos_spatial: f("pos.spatial", &self.pos_spatial)?,
            pos_temporal: f("pos.temporal", &self.pos_temporal)?,
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.try_map(&format!("blocks.{i}"), f))
                .collect::<Result<_>>()?,
            final_norm: self.final_norm.try_map("final_norm", f)?,
            head_w: f("head.w", &self.head_w)?,
            head_b: f("head.b", &self.head_b)?,
        })
    }

    pub fn map<'s, U>(&'s self, mut f: impl FnMut(&str, &'s T) -> U) -> ModelParams<U> {
        self.try_map(&mut |n, t| Ok(f(n, t)))
            .expect("infallible visitor")
    }

    /// Entries in visiting order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.map(|n, t| out.push((n.to_string(), t)));
        out
    }

    pub fn len(&self) -> usize {
        let mut n = 0;
        self.map(|_, _| n += 1);
        n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rebuilds the same structure from values listed in visiting order.
    pub fn with_values<U>(&self, values: Vec<U>) -> Result<ModelParams<U>> {
        let expected = self.len();
        if values.len() != expected {
            return Err(AtaError::invalid(format!(
                "{} values for {expected} parameters",
                values.len()
            )));
        }
        let mut it = values.into_iter();
        Ok(self.map(|_, _| it.next().expect("length checked")))
    }
}

/// Learned positions start from a fixed multi-frequency sine/cosine code of each
/// coordinate, frequencies `π/2, π/4, ...`; unused trailing columns are zero.
fn sinusoid_code(coords: &[Vec<f64>], d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[coords.len(), d]);
    for (r, c) in coords.iter().enumerate() {
        let per_axis = d / (2 * c.len());
        let row = &mut t.data_mut()[r * d..(r + 1) * d];
        let mut col = 0;
        for &v in c {
            for k in 0..per_axis {
                let f = std::f64::consts::PI / 2f64.powi(k as i32 + 1);
                row[col] = POSITION_AMPLITUDE * (v * f).sin();
                row[col + 1] = POSITION_AMPLITUDE * (v * f).cos();
                col += 2;
            }
        }
    }
    t
}

impl ModelParams<Tensor> {
    /// Seeded initialisation: scaled Gaussian weights, zero biases, unit gains,
    /// and small positional embeddings.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut gauss = |shape: &[usize], std: f64| -> Tensor {
            let n = Normal::new(0.0, std).expect("positive std");
            let mut t = Tensor::zeros(shape);
            t.data_mut().iter_mut().for_each(|v| *v = n.sample(&mut rng));
            t
        };
        let proj_std = 1.0 / (d as f64).sqrt();
        let attention = |g: &mut dyn FnMut(&[usize], f64) -> Tensor| AttentionParams {
            q: g(&[d, d], proj_std),
            k: g(&[d, d], proj_std),
            v: g(&[d, d], proj_std),
            out: g(&[d, d], proj_std),
        };
        let norm = || NormParams {
            gamma: Tensor::ones(&[d]),
            beta: Tensor::zeros(&[d]),
        };

        let embed_w = gauss(&[config.c_in, d], 1.0 / (config.c_in as f64).sqrt());
        let cells: Vec<Vec<f64>> = (0..config.hw())
            .map(|p| vec![(p / config.w) as f64, (p % config.w) as f64])
            .collect();
        let frames: Vec<Vec<f64>> = (0..config.t_len).map(|t| vec![t as f64]).collect();
        let pos_spatial = sinusoid_code(&cells, d);
        let pos_temporal = sinusoid_code(&frames, d);
        let mut blocks = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            let temporal = match config.variant {
                Variant::Averaging => None,
                _ => Some(attention(&mut gauss)),
            };
            let (spatial_norm, spatial) = match config.variant {
                Variant::Joint => (None, None),
                _ => (Some(norm()), Some(attention(&mut gauss))),
            };
            let hidden = MLP_EXPANSION * d;
            let mlp = MlpParams {
                w1: gauss(&[d, hidden], dense_std(d)),
                b1: Tensor::zeros(&[hidden]),
                w2: gauss(&[hidden, d], dense_std(hidden)),
                b2: Tensor::zeros(&[d]),
            };
            blocks.push(BlockParams {
                temporal_norm: norm(),
                temporal,
                spatial_norm,
                spatial,
                mlp_norm: norm(),
                mlp,
            });
        }
        let head_w = gauss(&[d, config.classes], dense_std(d));
        Ok(Self {
            embed_w,
            embed_b: Tensor::zeros(&[d]),
            pos_spatial,
            pos_temporal,
            blocks,
            final_norm: norm(),
            head_w,
            head_b: Tensor::zeros(&[config.classes]),
        })
    }

    /// Checks every shape against `config`.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        let reference = Self::init(&ModelConfig {
            seed: 0,
            ..config.clone()
        })?;
        if reference.len() != self.len() {
            return Err(AtaError::shape(
                "model_params",
                format!(
                    "{} tensors for a {}-variant model with {} tensors",
                    self.len(),
                    config.variant.name(),
                    reference.len()
                ),
            ));
        }
        for ((name, a), (_, b)) in self.named().into_iter().zip(reference.named()) {
            if a.shape() != b.shape() {
                return Err(AtaError::shape(
                    "model_params",
                    format!("{name} is {:?}, expected {:?}", a.shape(), b.shape()),
                ));
            }
        }
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layouts_per_variant() {
        let mut c = ModelConfig::new(3, 2, 2, 5, Variant::Ata, 4);
        c.d = 8;
        c.heads = 2;
        c.depth = 2;
        let p = ModelParams::init(&c).unwrap();
        // embed 4 + 2 × (2 + 4 + 2 + 4 + 2 + 4) + 2 + 2
        assert_eq!(p.len(), 44);
        assert_eq!(p.named()[0].0, "embed.w");
        assert!(p.check(&c).is_ok());

        c.variant = Variant::Joint;
        assert_eq!(ModelParams::init(&c).unwrap().len(), 4 + 2 * 12 + 4);
        c.variant = Variant::Averaging;
        assert_eq!(ModelParams::init(&c).unwrap().len(), 4 + 2 * 14 + 4);
        assert!(p.check(&c).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let mut c = ModelConfig::new(2, 2, 2, 3, Variant::Temporal, 2);
        c.d = 4;
        c.heads = 1;
        let a = ModelParams::init(&c).unwrap();
        assert_eq!(a, ModelParams::init(&c).unwrap());
        c.seed = 1;
        assert_ne!(a, ModelParams::init(&c).unwrap());
    }

    #[test]
    fn with_values_round_trips() {
        let mut c = ModelConfig::new(2, 1, 2, 3, Variant::Averaging, 2);
        c.d = 4;
        c.heads = 2;
        let p = ModelParams::init(&c).unwrap();
        let flat: Vec<Tensor> = p.named().into_iter().map(|(_, t)| t.clone()).collect();
        assert_eq!(p.with_values(flat).unwrap(), p);
        assert!(p.with_values(vec![Tensor::scalar(0.0)]).is_err());
    }
}
