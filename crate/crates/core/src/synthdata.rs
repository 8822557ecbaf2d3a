//! Seeded synthetic clips with known correspondences.
//!
//! Patch vectors are standard normal draws, rejection-sampled so that every pair has
//! cosine distance at least [`MIN_COSINE_GAP`]; noise-free matchings are then unique.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::alignment::FeatureVolume;
use crate::error::{AtaError, Result};
use crate::permutation::Permutation;

pub const MIN_COSINE_GAP: f64 = 0.1;
pub const MAX_REJECTIONS: usize = 1000;
pub const MOTION_NOISE_STD: f64 = 0.05;
pub const MOTION_CLASSES: usize = 4;
/// Fraction of a motion dataset used for training.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub volume: FeatureVolume,
    /// Per-frame gather maps that realign each frame onto frame 0's layout.
    pub truth_perms: Option<Vec<Permutation>>,
    pub label: Option<usize>,
    pub seed: u64,
}

/// Direction of content motion for each motion class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    pub fn from_label(label: usize) -> Option<Self> {
        Self::ALL.get(label).copied()
    }

    /// Per-step content displacement `(dx, dy)`; `dy > 0` moves content down.
    pub fn step(self) -> (i64, i64) {
        match self {
            Direction::Up => (0, -1),
            Direction::Down => (0, 1),
            Direction::Left => (-1, 0),
            Direction::Right => (1, 0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionDataset {
    pub train: Vec<SyntheticClip>,
    pub val: Vec<SyntheticClip>,
}

fn check_dims(t: usize, h: usize, w: usize, c: usize) -> Result<()> {
    if t == 0 || h == 0 || w == 0 || c == 0 {
        return Err(AtaError::invalid(format!(
            "clip dimensions must be positive, got [{t}, {h}, {w}, {c}]"
        )));
    }
    Ok(())
}

/// `n` Gaussian vectors of width `c` with pairwise cosine distance ≥ [`MIN_COSINE_GAP`].
pub fn distinct_patches(n: usize, c: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let mut out: Vec<f64> = Vec::with_capacity(n * c);
    let mut norms: Vec<f64> = Vec::with_capacity(n);
    let mut rejections = 0;
    while norms.len() < n {
        let cand: Vec<f64> = (0..c).map(|_| StandardNormal.sample(rng)).collect();
        let norm = cand.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ok = norm > 1e-6
            && out.chunks(c).zip(&norms).all(|(p, &pn)| {
                let cos = p.iter().zip(&cand).map(|(a, b)| a * b).sum::<f64>() / (pn * norm);
                1.0 - cos >= MIN_COSINE_GAP
            });
        if ok {
            out.extend_from_slice(&cand);
            norms.push(norm);
        } else {
            rejections += 1;
            if rejections > MAX_REJECTIONS {
                return Err(AtaError::GenerationFailed(format!(
                    "{n} patches of width {c} after {MAX_REJECTIONS} rejections"
                )));
            }
        }
    }
    Ok(out)
}

pub fn random_permutation(n: usize, rng: &mut impl Rng) -> Permutation {
    let mut m: Vec<usize> = (0..n).collect();
    m.shuffle(rng);
    Permutation::new(m).expect("shuffled range is a bijection")
}

/// One distinct-patch frame repeated `t` times.
pub fn gen_static(t: usize, h: usize, w: usize, c: usize, seed: u64) -> Result<SyntheticClip> {
    gen_shifted(t, h, w, c, 0, 0, seed)
}

/// Base frame cyclically translated by `(t·dx, t·dy)` at frame `t`.
pub fn gen_shifted(
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    dx: i64,
    dy: i64,
    seed: u64,
) -> Result<SyntheticClip> {
    check_dims(t, h, w, c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = distinct_patches(h * w, c, &mut rng)?;
    let mut values = Vec::with_capacity(t * h * w * c);
    let mut truth = Vec::with_capacity(t);
    for ti in 0..t {
        let (ox, oy) = (ti as i64 * dx, ti as i64 * dy);
        // frame[y][x] = base[y − oy][x − ox]
        let src: Vec<usize> = (0..h * w)
            .map(|q| {
                let (y, x) = ((q / w) as i64, (q % w) as i64);
                let sy = (y - oy).rem_euclid(h as i64) as usize;
                let sx = (x - ox).rem_euclid(w as i64) as usize;
                sy * w + sx
            })
            .collect();
        let frame_map = Permutation::new(src)?;
        values.extend(frame_map.gather_rows(&base, c)?);
        // aligned[j] = frame[truth[j]] = base[j]
        truth.push(frame_map.inverse());
    }
    Ok(SyntheticClip {
        volume: FeatureVolume::new(t, h, w, c, values)?,
        truth_perms: Some(truth),
        label: None,
        seed,
    })
}

/// Applies independent uniform shuffles to every frame except frame 0.
pub fn gen_shuffled(base: &SyntheticClip, seed: u64) -> Result<SyntheticClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = base.volume.hw();
    let shuffles: Vec<Permutation> = (0..base.volume.t_len())
        .map(|t| {
            if t == 0 {
                Permutation::identity(hw)
            } else {
                random_permutation(hw, &mut rng)
            }
        })
        .collect();
    gen_shuffled_with(base, &shuffles, seed)
}

/// Shuffles frame `t` by `shuffles[t]` (gather convention) and updates the truths.
pub fn gen_shuffled_with(
    base: &SyntheticClip,
    shuffles: &[Permutation],
    seed: u64,
) -> Result<SyntheticClip> {
    let volume = base.volume.permute_frames(shuffles)?;
    let truth_perms = match &base.truth_perms {
        Some(truth) => Some(
            truth
                .iter()
                .zip(shuffles)
                .map(|(tr, sh)| {
                    // new[q] = old[sh[q]]  ⇒  new truth = sh⁻¹ ∘ old truth
                    let inv = sh.inverse();
                    Permutation::new(tr.map().iter().map(|&m| inv.map()[m]).collect())
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    Ok(SyntheticClip {
        volume,
        truth_perms,
        label: base.label,
        seed,
    })
}

/// One motion clip: a `h × w` window sliding over a larger distinct-patch canvas so
/// that content moves one patch per frame in `dir`, plus Gaussian noise.
pub fn gen_motion_clip(
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    dir: Direction,
    shuffled: bool,
    seed: u64,
) -> Result<SyntheticClip> {
    check_dims(t, h, w, c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dx, dy) = dir.step();
    let span = t as i64 - 1;
    let ch = h + (span * dy.abs()) as usize;
    let cw = w + (span * dx.abs()) as usize;
    let canvas = distinct_patches(ch * cw, c, &mut rng)?;
    let noise = Normal::new(0.0, MOTION_NOISE_STD).expect("valid std");
    let offset = |step: i64, ti: usize| -> usize {
        // content moves by +step per frame ⇒ the window moves by −step
        if step >= 0 {
            ((span - ti as i64) * step) as usize
        } else {
            (ti as i64 * -step) as usize
        }
    };
    let mut values = Vec::with_capacity(t * h * w * c);
    for ti in 0..t {
        let (ox, oy) = (offset(dx, ti), offset(dy, ti));
        let mut frame = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                let src = ((y + oy) * cw + (x + ox)) * c;
                frame.extend(canvas[src..src + c].iter().map(|v| v + noise.sample(&mut rng)));
            }
        }
        if shuffled && ti > 0 {
            frame = random_permutation(h * w, &mut rng).gather_rows(&frame, c)?;
        }
        values.extend(frame);
    }
    Ok(SyntheticClip {
        volume: FeatureVolume::new(t, h, w, c, values)?,
        truth_perms: None,
        label: Some(Direction::ALL.iter().position(|&d| d == dir).expect("known")),
        seed,
    })
}

/// Balanced four-direction dataset split 80/20 into train and validation.
#[allow(clippy::too_many_arguments)]
pub fn gen_motion_dataset(
    n_clips: usize,
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    classes: usize,
    shuffled: bool,
    seed: u64,
) -> Result<MotionDataset> {
    check_dims(t, h, w, c)?;
    if classes != MOTION_CLASSES {
        return Err(AtaError::invalid(format!(
            "motion datasets have {MOTION_CLASSES} classes, got {classes}"
        )));
    }
    if n_clips < 2 {
        return Err(AtaError::invalid("motion dataset needs at least two clips"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clips = Vec::with_capacity(n_clips);
    for i in 0..n_clips {
        let clip_seed: u64 = rng.gen();
        let dir = Direction::ALL[i % MOTION_CLASSES];
        clips.push(gen_motion_clip(t, h, w, c, dir, shuffled, clip_seed)?);
    }
    let n_train = ((n_clips as f64 * TRAIN_FRACTION).round() as usize).clamp(1, n_clips - 1);
    let val = clips.split_off(n_train);
    Ok(MotionDataset { train: clips, val })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{align_clip, dealign_clip};

    fn min_cosine_distance(values: &[f64], c: usize) -> f64 {
        let rows: Vec<&[f64]> = values.chunks(c).collect();
        let mut worst = f64::INFINITY;
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let dot: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| a * b).sum();
                let ni = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
                let nj = rows[j].iter().map(|v| v * v).sum::<f64>().sqrt();
                worst = worst.min(1.0 - dot / (ni * nj));
            }
        }
        worst
    }

    #[test]
    fn static_clip_properties() {
        let clip = gen_static(4, 3, 3, 8, 7).unwrap();
        assert!(min_cosine_distance(clip.volume.frame(0), 8) >= MIN_COSINE_GAP);
        let (aligned, plan) = align_clip(&clip.volume).unwrap();
        assert_eq!(aligned, clip.volume);
        assert!(plan.perms().iter().all(Permutation::is_identity));
        assert_eq!(gen_static(4, 3, 3, 8, 7).unwrap(), clip);
        assert_ne!(gen_static(4, 3, 3, 8, 8).unwrap(), clip);
    }

    #[test]
    fn zero_shift_is_static() {
        assert_eq!(
            gen_shifted(3, 2, 2, 4, 0, 0, 5).unwrap(),
            gen_static(3, 2, 2, 4, 5).unwrap()
        );
    }

    #[test]
    fn impossible_gap_is_reported() {
        // 1-channel vectors are all collinear
        assert!(matches!(
            gen_static(2, 2, 2, 1, 0),
            Err(AtaError::GenerationFailed(_))
        ));
        assert!(gen_static(0, 2, 2, 4, 0).is_err());
    }

    #[test]
    fn shift_hand_case() {
        let clip = gen_shifted(2, 1, 3, 4, 1, 0, 3).unwrap();
        let f0: Vec<&[f64]> = clip.volume.frame(0).chunks(4).collect();
        let f1: Vec<&[f64]> = clip.volume.frame(1).chunks(4).collect();
        assert_eq!(f1, vec![f0[2], f0[0], f0[1]]);
        let (_, plan) = align_clip(&clip.volume).unwrap();
        assert_eq!(plan.perms()[1].map(), &[1, 2, 0]);
        assert_eq!(clip.truth_perms.as_ref().unwrap()[1].map(), &[1, 2, 0]);
    }

    #[test]
    fn shifted_truth_is_recovered() {
        for seed in 0..20 {
            let clip = gen_shifted(5, 4, 3, 8, 1, -2, seed).unwrap();
            let (aligned, plan) = align_clip(&clip.volume).unwrap();
            assert_eq!(Some(plan.perms().to_vec()), clip.truth_perms);
            for t in 0..5 {
                assert_eq!(aligned.frame(t), clip.volume.frame(0));
            }
        }
    }

    #[test]
    fn shuffle_truths_compose() {
        let base = gen_shifted(4, 3, 3, 8, 1, 1, 11).unwrap();
        let ident = vec![Permutation::identity(9); 4];
        assert_eq!(gen_shuffled_with(&base, &ident, base.seed).unwrap(), base);

        let mut labelled = base.clone();
        labelled.label = Some(2);
        let shuffled = gen_shuffled(&labelled, 99).unwrap();
        assert_eq!(shuffled.label, Some(2));
        let truth = shuffled.truth_perms.clone().unwrap();
        // applying the truths reproduces the untranslated base in every frame
        let restored = shuffled.volume.permute_frames(&truth).unwrap();
        for t in 0..4 {
            assert_eq!(restored.frame(t), base.volume.frame(0));
        }
        let (_, plan) = align_clip(&shuffled.volume).unwrap();
        assert_eq!(plan.perms(), truth.as_slice());
        let (aligned, plan) = align_clip(&shuffled.volume).unwrap();
        assert_eq!(dealign_clip(&aligned, &plan).unwrap(), shuffled.volume);
    }

    #[test]
    fn motion_window_moves_content() {
        // patch at (x, y) in frame 0 reappears at (x + dx, y + dy) in frame 1, up to noise
        for dir in Direction::ALL {
            let clip = gen_motion_clip(3, 2, 3, 6, dir, false, 4).unwrap();
            let (dx, dy) = dir.step();
            let v = &clip.volume;
            for y in 0..2i64 {
                for x in 0..3i64 {
                    let (ny, nx) = (y + dy, x + dx);
                    if !(0..2).contains(&ny) || !(0..3).contains(&nx) {
                        continue;
                    }
                    let a = v.patch(0, (y * 3 + x) as usize);
                    let b = v.patch(1, (ny * 3 + nx) as usize);
                    let err = a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
                    assert!(err < 0.6, "{dir:?}: {err}");
                }
            }
        }
    }

    #[test]
    fn motion_dataset_is_balanced_and_deterministic() {
        let ds = gen_motion_dataset(50, 3, 2, 2, 6, 4, true, 1).unwrap();
        assert_eq!(ds.train.len(), 40);
        assert_eq!(ds.val.len(), 10);
        let mut counts = [0usize; 4];
        for c in ds.train.iter().chain(&ds.val) {
            counts[c.label.unwrap()] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1);
        assert_eq!(gen_motion_dataset(50, 3, 2, 2, 6, 4, true, 1).unwrap(), ds);
        assert!(gen_motion_dataset(50, 3, 2, 2, 6, 3, true, 1).is_err());
    }
}
