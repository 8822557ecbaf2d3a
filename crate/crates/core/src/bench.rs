//! Wall-clock scaling of the assignment solvers.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{AtaError, Result};
use crate::matching::{solve_assignment_exact, solve_assignment_greedy, SimilarityMatrix};

pub const DEFAULT_SIZES: [usize; 4] = [32, 64, 128, 256];

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub n: usize,
    /// Median seconds per solve.
    pub exact_secs: f64,
    pub greedy_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub exact_slope: f64,
    pub greedy_slope: f64,
}

/// Uniform similarities in `[-1, 1)`.
pub fn random_similarity(n: usize, rng: &mut impl Rng) -> SimilarityMatrix {
    let values = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    SimilarityMatrix::new(n, values).expect("square by construction")
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(AtaError::invalid("slope fit needs at least two paired points"));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(AtaError::invalid("slope fit needs positive finite values"));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(AtaError::invalid("slope fit needs distinct sizes"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

/// Times both solvers on `reps` seeded matrices per size and fits log-log slopes.
pub fn bench_solvers(sizes: &[usize], reps: usize, seed: u64) -> Result<BenchReport> {
    if sizes.len() < 2 {
        return Err(AtaError::invalid("bench needs at least two sizes"));
    }
    if let Some(&n) = sizes.iter().find(|&&n| n < 2) {
        return Err(AtaError::invalid(format!("bench size {n} is below 2")));
    }
    if reps == 0 {
        return Err(AtaError::invalid("bench needs at least one repetition"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let mut exact = Vec::with_capacity(reps);
        let mut greedy = Vec::with_capacity(reps);
        // one untimed solve warms caches and the allocator
        solve_assignment_exact(&random_similarity(n, &mut rng))?;
        for _ in 0..reps {
            let s = random_similarity(n, &mut rng);
            let start = Instant::now();
            std::hint::black_box(solve_assignment_exact(&s)?);
            exact.push(start.elapsed().as_secs_f64());
            let start = Instant::now();
            std::hint::black_box(solve_assignment_greedy(&s)?);
            greedy.push(start.elapsed().as_secs_f64());
        }
        rows.push(BenchRow {
            n,
            exact_secs: median(exact),
            greedy_secs: median(greedy),
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let exact: Vec<f64> = rows.iter().map(|r| r.exact_secs.max(1e-9)).collect();
    let greedy: Vec<f64> = rows.iter().map(|r| r.greedy_secs.max(1e-9)).collect();
    Ok(BenchReport {
        exact_slope: loglog_slope(&xs, &exact)?,
        greedy_slope: loglog_slope(&xs, &greedy)?,
        rows,
    })
}
