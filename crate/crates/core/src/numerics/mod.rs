//! Dense tensors, a reverse-mode tape, and a central-difference gradient oracle.

mod tape;
mod tensor;

pub use tape::{Gradients, Grouping, Tape, Var};
pub use tensor::Tensor;


use crate::error::{AtaError, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `softmax(q·kᵀ/√d)·v` for a single head, composed from tape primitives.
pub fn sdp_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let (n, d) = tape.value(q).dims2("sdp_attention")?;
    for other in [k, v] {
        let s = tape.value(other).shape();
        if s != [n, d] {
            return Err(AtaError::shape(
                "sdp_attention",
                format!("q is [{n}x{d}], got {s:?}"),
            ));
        }
    }
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt())?;
    let weights = tape.softmax_lastdim(logits)?;
    tape.matmul(weights, v)
}

/// Compares tape gradients of `f` at `params` against central differences with step `h`.
///
/// Returns `max |g_ad − g_fd| / max(1, |g_fd|)` over every parameter entry.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(AtaError::invalid(format!("step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.param(p.clone())).collect();
        let l = f(&mut t, &vs)?;
        let val = t.value(l);
        if !val.is_scalar() {
            return Err(AtaError::NonScalarLoss(val.shape().to_vec()));
        }
        let y = val.item();
        if !y.is_finite() {
            return Err(AtaError::NonFinite {
                op: "finite_diff_check",
                node: None,
            });
        }
        Ok(y)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst: f64 = 0.0;
    for (pi, var) in vars.iter().enumerate() {
        let ad = grads.get_or_zeros(*var, &params[pi]);
        for e in 0..params[pi].numel() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[e] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = (ad.data()[e] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::permutation::Permutation;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = t.constant(randn(&mut rng, &[3, 2]));
        let i3 = t.constant(Tensor::identity(3));
        let out = t.matmul(i3, b).unwrap();
        assert_eq!(t.value(out), t.value(b));

        let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let ones = t.constant(Tensor::ones(&[2, 1]));
        let out = t.matmul(a, ones).unwrap();
        assert_eq!(t.value(out).data(), &[3.0, 7.0]);

        let z = t.constant(Tensor::zeros(&[2, 4]));
        let out = t.matmul(a, z).unwrap();
        assert!(t.value(out).data().iter().all(|&v| v == 0.0));

        assert!(matches!(t.matmul(a, b), Err(AtaError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1, 3]));
        let y = t.softmax_lastdim(x).unwrap();
        assert!(close(t.value(y).data(), &[1.0 / 3.0; 3], 1e-15));

        let x = t.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        let y = t.softmax_lastdim(x).unwrap();
        assert!(close(t.value(y).data(), &[1.0, 0.0], 1e-15));

        let x = t.constant(
            Tensor::new(vec![3], vec![1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap(),
        );
        let y = t.softmax_lastdim(x).unwrap();
        assert!(close(t.value(y).data(), &[1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0], 1e-15));
    }

    #[test]
    fn softmax_rows_sum_to_one_at_large_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut t = Tape::new();
        let raw: Vec<f64> = (0..64 * 9).map(|_| rng.gen_range(-1e3..1e3)).collect();
        let x = t.constant(Tensor::new(vec![64, 9], raw).unwrap());
        let y = t.softmax_lastdim(x).unwrap();
        for row in t.value(y).data().chunks(9) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::new();
        let g = t.constant(Tensor::ones(&[2]));
        let b = t.constant(Tensor::zeros(&[2]));
        let x = t.constant(Tensor::filled(&[3, 2], 4.2));
        let y = t.layer_norm(x, g, b, LAYER_NORM_EPS).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));

        // [1,-1]: mean 0, variance 1 → 1/sqrt(1+eps)
        let x = t.constant(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
        let y = t.layer_norm(x, g, b, LAYER_NORM_EPS).unwrap();
        let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!(close(t.value(y).data(), &[expect, -expect], 1e-15));

        let g0 = t.constant(Tensor::zeros(&[2]));
        let beta = t.constant(Tensor::new(vec![2], vec![0.3, -0.7]).unwrap());
        let x = t.constant(Tensor::new(vec![2, 2], vec![1.0, 5.0, -2.0, 3.0]).unwrap());
        let y = t.layer_norm(x, g0, beta, LAYER_NORM_EPS).unwrap();
        assert_eq!(t.value(y).data(), &[0.3, -0.7, 0.3, -0.7]);

        let bad = t.constant(Tensor::ones(&[3]));
        assert!(t.layer_norm(x, bad, beta, LAYER_NORM_EPS).is_err());
    }

    #[test]
    fn sdp_attention_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let q = t.constant(randn(&mut rng, &[1, 4]));
        let k = t.constant(randn(&mut rng, &[1, 4]));
        let v = t.constant(randn(&mut rng, &[1, 4]));
        let o = sdp_attention(&mut t, q, k, v).unwrap();
        assert!(close(t.value(o).data(), t.value(v).data(), 1e-15));

        // identical keys → uniform weights → mean of v rows
        let q = t.constant(randn(&mut rng, &[3, 2]));
        let krow = [0.4, -1.2];
        let k = t.constant(Tensor::new(vec![3, 2], krow.repeat(3)).unwrap());
        let vt = randn(&mut rng, &[3, 2]);
        let mean: Vec<f64> = (0..2)
            .map(|c| (0..3).map(|r| vt.data()[r * 2 + c]).sum::<f64>() / 3.0)
            .collect();
        let v = t.constant(vt);
        let o = sdp_attention(&mut t, q, k, v).unwrap();
        for row in t.value(o).data().chunks(2) {
            assert!(close(row, &mean, 1e-12));
        }

        // d = 1: q = [1], keys [2, 0] → logits (2, 0), weight on first = σ(2)
        let q = t.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let k = t.constant(Tensor::new(vec![2, 1], vec![2.0, 0.0]).unwrap());
        let v = t.constant(Tensor::new(vec![2, 1], vec![10.0, -4.0]).unwrap());
        let o = sdp_attention(&mut t, q, k, v).unwrap();
        let s = 1.0 / (1.0 + (-2.0f64).exp());
        let expect = s * 10.0 + (1.0 - s) * -4.0;
        assert!(close(t.value(o).data(), &[expect, expect], 1e-12));

        let bad = t.constant(Tensor::zeros(&[2, 3]));
        assert!(sdp_attention(&mut t, q, bad, v).is_err());
    }

    #[test]
    fn grouped_attention_matches_composite_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, d, heads) = (6, 4, 2);
        let (qt, kt, vt) = (
            randn(&mut rng, &[n, d]),
            randn(&mut rng, &[n, d]),
            randn(&mut rng, &[n, d]),
        );
        let mut t = Tape::new();
        let (q, k, v) = (
            t.constant(qt.clone()),
            t.constant(kt.clone()),
            t.constant(vt.clone()),
        );
        let grouping = Arc::new(Grouping::strided(n, 2).unwrap());
        let fused = t.grouped_attention(q, k, v, grouping.clone(), heads).unwrap();
        let fused = t.value(fused).clone();

        let dh = d / heads;
        for g in grouping.groups() {
            for h in 0..heads {
                let pick = |src: &Tensor| {
                    let mut rows = Vec::new();
                    for &r in g {
                        rows.push(src.data()[r * d + h * dh..r * d + (h + 1) * dh].to_vec());
                    }
                    Tensor::from_rows(&rows).unwrap()
                };
                let mut t2 = Tape::new();
                let (q2, k2, v2) = (
                    t2.constant(pick(&qt)),
                    t2.constant(pick(&kt)),
                    t2.constant(pick(&vt)),
                );
                let o = sdp_attention(&mut t2, q2, k2, v2).unwrap();
                for (a, &r) in g.iter().enumerate() {
                    let got = &fused.data()[r * d + h * dh..r * d + (h + 1) * dh];
                    let want = &t2.value(o).data()[a * dh..(a + 1) * dh];
                    assert!(close(got, want, 1e-13));
                }
            }
        }
    }

    #[test]
    fn gather_rows_examples() {
        let rows = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut t = Tape::new();
        let x = t.constant(rows.clone());
        let id = t.gather_rows(x, &Permutation::identity(3)).unwrap();
        assert_eq!(t.value(id), &rows);

        let sigma = Permutation::new(vec![2, 0, 1]).unwrap();
        let y = t.gather_rows(x, &sigma).unwrap();
        assert_eq!(t.value(y).data(), &[5.0, 6.0, 1.0, 2.0, 3.0, 4.0]);
        let back = t.gather_rows(y, &sigma.inverse()).unwrap();
        assert_eq!(t.value(back), &rows);

        assert!(t.gather_rows(x, &Permutation::identity(2)).is_err());
    }

    #[test]
    fn backward_examples() {
        let x0 = Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let mut t = Tape::new();
        let x = t.param(x0.clone());
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);

        let mut t = Tape::new();
        let x = t.param(x0.clone());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        let g = t.backward(s).unwrap();
        let twice: Vec<f64> = x0.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.get(x).unwrap().data(), twice.as_slice());

        assert!(matches!(t.backward(sq), Err(AtaError::NonScalarLoss(_))));
    }

    #[test]
    fn gather_backward_scatters_through_inverse() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros(&[3, 1]));
        let sigma = Permutation::new(vec![2, 0, 1]).unwrap();
        let y = t.gather_rows(x, &sigma).unwrap();
        let w = t.constant(Tensor::new(vec![3, 1], vec![1.0, 10.0, 100.0]).unwrap());
        let p = t.mul(y, w).unwrap();
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap();
        // y[j] = x[σ(j)] so dx[σ(j)] = w[j]
        assert_eq!(g.get(x).unwrap().data(), &[10.0, 100.0, 1.0]);
    }

    #[test]
    fn non_finite_is_reported_with_op() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::filled(&[1, 1], f64::MAX));
        let err = t.scale(x, 10.0).unwrap_err();
        assert_eq!(
            err,
            AtaError::NonFinite {
                op: "scale",
                node: Some(1)
            }
        );
    }

    #[test]
    fn finite_diff_linear_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = randn(&mut rng, &[3, 3]);
        let x = randn(&mut rng, &[3, 3]);
        let err = finite_diff_check(
            |t, p| {
                let m = t.matmul(p[0], p[1])?;
                let m = t.scale(m, 0.5)?;
                t.sum(m)
            },
            &[w, x],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-10, "err = {err}");
    }

    #[test]
    fn finite_diff_softmax_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = randn(&mut rng, &[4, 5]);
        let x = randn(&mut rng, &[3, 4]);
        let err = finite_diff_check(
            |t, p| {
                let logits = t.matmul(p[1], p[0])?;
                t.cross_entropy(logits, &[0, 4, 2])
            },
            &[w, x],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn finite_diff_rejects_bad_step() {
        assert!(finite_diff_check(|t, p| t.sum(p[0]), &[Tensor::ones(&[1])], 0.0).is_err());
    }

    #[test]
    fn every_primitive_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = randn(&mut rng, &[4, 6]);
        let b = randn(&mut rng, &[4, 6]);
        let gamma = randn(&mut rng, &[6]);
        let beta = randn(&mut rng, &[6]);
        let w = randn(&mut rng, &[6, 6]);
        let weights = randn(&mut rng, &[4, 6]);
        let perm = Permutation::new(vec![3, 1, 0, 2]).unwrap();

        type Case = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
        let cases: Vec<(&str, Case)> = vec![
            ("matmul", Box::new(|t: &mut Tape, p: &[Var]| {
                let bt = t.transpose(p[1])?;
                let m = t.matmul(p[0], bt)?;
                let m = t.mul(m, m)?;
                t.sum(m)
            })),
            ("add_sub_mul", Box::new(|t: &mut Tape, p: &[Var]| {
                let s = t.add(p[0], p[1])?;
                let d = t.sub(p[0], p[1])?;
                let m = t.mul(s, d)?;
                let m = t.add_scalar(m, 0.3)?;
                let m = t.mul(m, m)?;
                t.sum(m)
            })),
            ("softmax", Box::new(move |t: &mut Tape, p: &[Var]| {
                let y = t.softmax_lastdim(p[0])?;
                let c = t.constant(Tensor::new(vec![4, 6], (0..24).map(|i| i as f64 * 0.1).collect())?);
                let m = t.mul(y, c)?;
                t.sum(m)
            })),
            ("layer_norm", Box::new(|t: &mut Tape, p: &[Var]| {
                let y = t.layer_norm(p[0], p[2], p[3], LAYER_NORM_EPS)?;
                let m = t.mul(y, p[1])?;
                t.sum(m)
            })),
            ("gelu_bias", Box::new(|t: &mut Tape, p: &[Var]| {
                let y = t.add_bias(p[0], p[3])?;
                let y = t.gelu(y)?;
                let m = t.mul(y, p[1])?;
                t.sum(m)
            })),
            ("gather_mean", Box::new(move |t: &mut Tape, p: &[Var]| {
                let y = t.gather_rows(p[0], &perm)?;
                let y = t.matmul(y, p[4])?;
                let y = t.mul(y, p[1])?;
                let m = t.mean_rows(y)?;
                let m = t.reshape(m, vec![6])?;
                let m = t.mul(m, m)?;
                t.sum(m)
            })),
            ("attention", Box::new(move |t: &mut Tape, p: &[Var]| {
                let g = Arc::new(Grouping::contiguous(4, 2)?);
                let o = t.grouped_attention(p[0], p[1], p[5], g, 2)?;
                let o = t.mul(o, o)?;
                t.sum(o)
            })),
            ("sdp_attention", Box::new(|t: &mut Tape, p: &[Var]| {
                let o = sdp_attention(t, p[0], p[1], p[5])?;
                let o = t.mul(o, o)?;
                t.sum(o)
            })),
        ];
        let params = [a, b, gamma, beta, w, weights];
        for (name, f) in cases {
            let err = finite_diff_check(f, &params, 1e-6).unwrap();
            assert!(err < 1e-6, "{name}: {err}");
        }
    }
}
