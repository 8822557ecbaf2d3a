//! Cosine similarity between adjacent frames and maximum-similarity perfect matching.
//!
//! Convention: `S[i][j]` compares patch `i` of the earlier frame with patch `j` of
//! the later frame. A matching is a [`Permutation`] `p` that places later-frame
//! patch `p[j]` at slot `j`, so its score is `Σ_j S[j][p[j]]`.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{AtaError, Result};
pub use crate::permutation::Permutation;

/// Norms below this are treated as zero vectors.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Reduced costs within this bound count as tight when breaking ties.
const TIE_TOLERANCE: f64 = 1e-10;

/// Largest size accepted by [`solve_assignment_bruteforce`].
pub const BRUTEFORCE_MAX_N: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || values.len() != n * n {
            return Err(AtaError::shape(
                "similarity_matrix",
                format!("{} values for n = {n}", values.len()),
            ));
        }
        Ok(Self { n, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(AtaError::shape("similarity_matrix", "matrix is not square"));
        }
        Self::new(n, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn check_finite(&self) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(AtaError::NonFinite {
                op: "solve_assignment",
                node: None,
            })
        }
    }
}

/// `S[i][j] = cos(prev_i, curr_j)` for two `[n × channels]` row-major frames.
///
/// Rows or columns belonging to vectors with norm below [`DEGENERATE_NORM`] are zero.
pub fn cosine_similarity_matrix(
    prev: &[f64],
    curr: &[f64],
    channels: usize,
) -> Result<SimilarityMatrix> {
    if channels == 0
        || prev.is_empty()
        || prev.len() != curr.len()
        || prev.len() % channels != 0
    {
        return Err(AtaError::shape(
            "cosine_similarity_matrix",
            format!(
                "frames of {} and {} values with {channels} channels",
                prev.len(),
                curr.len()
            ),
        ));
    }
    let n = prev.len() / channels;
    let a = normalized_rows(prev, channels);
    let b = normalized_rows(curr, channels);
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        let ai = &a[i * channels..(i + 1) * channels];
        for j in 0..n {
            let bj = &b[j * channels..(j + 1) * channels];
            values[i * n + j] = ai.iter().zip(bj).map(|(x, y)| x * y).sum();
        }
    }
    SimilarityMatrix::new(n, values)
}

fn normalized_rows(x: &[f64], channels: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(channels) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < DEGENERATE_NORM {
            row.iter_mut().for_each(|v| *v = 0.0);
        } else {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

/// Total similarity `Σ_j S[j][p[j]]` of the pairs selected by `p`.
pub fn matching_score(s: &SimilarityMatrix, p: &Permutation) -> Result<f64> {
    if p.len() != s.n() {
        return Err(AtaError::shape(
            "matching_score",
            format!("permutation of {} for n = {}", p.len(), s.n()),
        ));
    }
    Ok(p.map()
        .iter()
        .enumerate()
        .map(|(j, &m)| s.get(j, m))
        .sum())
}

/// Maximum-score matching via the Hungarian method on `cost = 1 − S`.
///
/// Among optimal matchings the lexicographically smallest map is returned.
pub fn solve_assignment_exact(s: &SimilarityMatrix) -> Result<Permutation> {
    s.check_finite()?;
    let n = s.n();
    let cost: Vec<f64> = s.values().iter().map(|v| 1.0 - v).collect();
    let (mut row_to_col, u, v) = hungarian(&cost, n);
    lexicographic_refine(&cost, n, &u, &v, &mut row_to_col);
    Permutation::new(row_to_col)
}

/// Shortest-augmenting-path Hungarian algorithm, O(n³).
///
/// Returns the row→column assignment and the dual potentials `u` (rows), `v` (columns)
/// with `cost[i][j] − u[i] − v[j] ≥ 0`, equality on assigned pairs.
fn hungarian(cost: &[f64], n: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    // 1-based internally; index 0 is the virtual source column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        col_owner[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[col_owner[j] - 1] = j - 1;
    }
    (row_to_col, u[1..].to_vec(), v[1..].to_vec())
}

/// Moves an optimal assignment to the lexicographically smallest optimal one.
///
/// Every optimal assignment is a perfect matching of the tight subgraph
/// `{(i, j) : cost[i][j] − u[i] − v[j] ≈ 0}`, so rows are fixed in order to the
/// smallest column that still admits a perfect completion inside that subgraph.
fn lexicographic_refine(
    cost: &[f64],
    n: usize,
    u: &[f64],
    v: &[f64],
    row_to_col: &mut [usize],
) {
    let tight: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| {
                    j == row_to_col[i] || cost[i * n + j] - u[i] - v[j] <= TIE_TOLERANCE
                })
                .collect()
        })
        .collect();
    let mut col_to_row = vec![0; n];
    for (i, &j) in row_to_col.iter().enumerate() {
        col_to_row[j] = i;
    }
    let mut col_fixed = vec![false; n];
    let mut visited = vec![false; n];
    for i in 0..n {
        for &k in &tight[i] {
            if col_fixed[k] {
                continue;
            }
            if k == row_to_col[i] {
                break;
            }
            // Row `i` takes column `k`; its old column becomes the free target and the
            // displaced owner of `k` must reach it along an alternating path.
            let target = row_to_col[i];
            let displaced = col_to_row[k];
            visited.iter_mut().for_each(|x| *x = false);
            col_fixed[k] = true;
            let mut path = Vec::new();
            let found = alternating_path(
                displaced,
                target,
                &tight,
                &col_to_row,
                &col_fixed,
                &mut visited,
                &mut path,
            );
            col_fixed[k] = false;
            if found {
                // path holds (row, new column) pairs, starting at `displaced`.
                for &(r, c) in &path {
                    row_to_col[r] = c;
                    col_to_row[c] = r;
                }
                row_to_col[i] = k;
                col_to_row[k] = i;
                break;
            }
        }
        col_fixed[row_to_col[i]] = true;
    }
}

fn alternating_path(
    row: usize,
    target: usize,
    tight: &[Vec<usize>],
    col_to_row: &[usize],
    col_fixed: &[bool],
    visited: &mut [bool],
    path: &mut Vec<(usize, usize)>,
) -> bool {
    // Iterative DFS; each stack frame is (row, next candidate position).
    let mut stack: Vec<(usize, usize)> = vec![(row, 0)];
    while let Some(&mut (r, ref mut pos)) = stack.last_mut() {
        if *pos >= tight[r].len() {
            stack.pop();
            path.pop();
            continue;
        }
        let c = tight[r][*pos];
        *pos += 1;
        if col_fixed[c] || visited[c] {
            continue;
        }
        visited[c] = true;
        path.push((r, c));
        if c == target {
            return true;
        }
        stack.push((col_to_row[c], 0));
    }
    path.clear();
    false
}

/// Exhaustive search in lexicographic order; the first strict improvement wins ties.
pub fn solve_assignment_bruteforce(s: &SimilarityMatrix) -> Result<Permutation> {
    let n = s.n();
    if n > BRUTEFORCE_MAX_N {
        return Err(AtaError::TooLarge(format!(
            "brute force limited to n <= {BRUTEFORCE_MAX_N}, got {n}"
        )));
    }
    s.check_finite()?;
    let mut current: Vec<usize> = (0..n).collect();
    let mut best = current.clone();
    let mut best_score = score_of(s, &current);
    while next_permutation(&mut current) {
        let sc = score_of(s, &current);
        if sc > best_score + 1e-12 {
            best_score = sc;
            best.copy_from_slice(&current);
        }
    }
    Permutation::new(best)
}

fn score_of(s: &SimilarityMatrix, map: &[usize]) -> f64 {
    map.iter().enumerate().map(|(j, &m)| s.get(j, m)).sum()
}

fn next_permutation(a: &mut [usize]) -> bool {
    let n = a.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && a[i - 1] >= a[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while a[j] <= a[i - 1] {
        j -= 1;
    }
    a.swap(i - 1, j);
    a[i..].reverse();
    true
}

/// Maps `f64` to `u64` preserving `total_cmp` order.
fn order_key(v: f64) -> u64 {
    let b = v.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

/// Repeatedly takes the largest remaining pair; ties go to the smaller `(i, j)`.
pub fn solve_assignment_greedy(s: &SimilarityMatrix) -> Result<Permutation> {
    let n = s.n();
    // each row's columns by descending value, then ascending index
    let ranked: Vec<Vec<(u64, usize)>> = (0..n)
        .map(|i| {
            let mut row: Vec<(u64, usize)> = (0..n).map(|j| (!order_key(s.get(i, j)), j)).collect();
            row.sort_unstable();
            row
        })
        .collect();
    let mut next = vec![0usize; n];
    // min-heap on (negated value, row, column) holds each unmatched row's best column
    let mut heap: BinaryHeap<Reverse<(u64, usize, usize)>> =
        ranked.iter().enumerate().map(|(i, r)| Reverse((r[0].0, i, r[0].1))).collect();
    let mut col_used = vec![false; n];
    let mut map = vec![0; n];
    while let Some(Reverse((_, i, j))) = heap.pop() {
        if col_used[j] {
            next[i] += 1;
            let (key, j) = ranked[i][next[i]];
            heap.push(Reverse((key, i, j)));
            continue;
        }
        col_used[j] = true;
        map[i] = j;
    }
    Permutation::new(map)
}
