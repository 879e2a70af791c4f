//! Composite operations built from the tape primitives.

use super::graph::{DeadRows, Graph, Var};
use super::real::Real;
use super::tensor::Tensor;
use super::NumericsError;

/// Affine map along the trailing axis: `x · W + b`.
///
/// `x` may have any rank >= 1 as long as its trailing extent equals the row
/// count of `w`; leading extents are flattened for the product and restored
/// afterwards.
pub fn linear<T: Real>(
    g: &Graph<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
) -> Result<Var, NumericsError> {
    let x_shape = g.shape(x);
    let (w_in, w_out) = {
        let ws = g.shape(w);
        match ws.as_slice() {
            &[i, o] => (i, o),
            other => {
                return Err(NumericsError::ShapeMismatch {
                    op: "linear",
                    detail: format!("weight must be rank-2, got {other:?}"),
                })
            }
        }
    };
    let &trailing = x_shape.last().ok_or_else(|| {
        NumericsError::InvalidShape("linear input must have rank >= 1".into())
    })?;
    if trailing != w_in {
        return Err(NumericsError::ShapeMismatch {
            op: "linear",
            detail: format!("input trailing extent {trailing} != weight rows {w_in}"),
        });
    }
    let lead: usize = x_shape[..x_shape.len() - 1].iter().product::<usize>().max(1);
    let x2 = g.reshape(x, vec![lead, w_in])?;
    let mut y = g.matmul(x2, false, w, false)?;
    if let Some(bias) = b {
        y = g.add_bias(y, bias)?;
    }
    let mut out_shape = x_shape[..x_shape.len() - 1].to_vec();
    out_shape.push(w_out);
    if out_shape.len() == 1 {
        out_shape.insert(0, 1);
    }
    g.reshape(y, out_shape)
}

/// Result of scaled dot-product attention: the mixed values and the
/// row-stochastic weight matrix.
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Var,
}

/// `softmax(Q Kᵀ / √d_k + mask) · V` with the weights exposed.
///
/// The mask is additive: finite entries are added to the logits, `-inf`
/// forbids the pair outright. Rows with no allowed entry follow `dead_rows`.
pub fn masked_scaled_attention<T: Real>(
    g: &Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Tensor<T>>,
    dead_rows: DeadRows,
) -> Result<AttentionOutput, NumericsError> {
    let (lq, dq) = {
        let s = g.shape(q);
        (s[0], s[1])
    };
    let sk = g.shape(k);
    let sv = g.shape(v);
    if sk.len() != 2 || sv.len() != 2 || sk[1] != dq || sv[0] != sk[0] {
        return Err(NumericsError::ShapeMismatch {
            op: "masked_scaled_attention",
            detail: format!("q {lq}x{dq}, k {sk:?}, v {sv:?}"),
        });
    }
    let scores = g.matmul(q, false, k, true)?;
    let scaled = g.scale(scores, 1.0 / (dq as f64).sqrt())?;
    let weights = g.masked_softmax(scaled, mask, dead_rows)?;
    let output = g.matmul(weights, false, v, false)?;
    Ok(AttentionOutput { output, weights })
}

#[cfg(test)]
mod tests {
    use super::super::graph::{DeadRows, Graph};
    use super::super::real::c;
    use super::super::tensor::Tensor;
    use super::*;

    fn graph() -> Graph<f64> {
        Graph::new()
    }

    #[test]
    fn linear_broadcasts_bias_over_zero_input() {
        let g = graph();
        let x = g.constant(Tensor::zeros(vec![4, 3])).unwrap();
        let w = g
            .constant(Tensor::from_fn(vec![3, 2], |i| i as f64))
            .unwrap();
        let b = g.constant(Tensor::new(vec![2], vec![0.5, -1.5]).unwrap()).unwrap();
        let y = linear(&g, x, w, Some(b)).unwrap();
        let v = g.value(y);
        assert_eq!(v.shape(), &[4, 2]);
        for r in 0..4 {
            assert_eq!(v.get2(r, 0), 0.5);
            assert_eq!(v.get2(r, 1), -1.5);
        }
    }

    #[test]
    fn linear_identity_weight_passes_input_through() {
        let g = graph();
        let x = g
            .constant(Tensor::from_fn(vec![2, 3], |i| i as f64 * 0.3 - 0.4))
            .unwrap();
        let eye = Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let w = g.constant(eye).unwrap();
        let b = g.constant(Tensor::zeros(vec![3])).unwrap();
        let y = linear(&g, x, w, Some(b)).unwrap();
        assert!(g.value(y).bit_eq(&g.value(x)));
    }

    #[test]
    fn linear_matches_triple_loop_oracle() {
        let g = graph();
        let xv = Tensor::from_fn(vec![2, 3], |i| (i as f64 + 1.0) * 0.21);
        let wv = Tensor::from_fn(vec![3, 2], |i| (i as f64 - 2.5) * 0.17);
        let bv = Tensor::new(vec![2], vec![0.05, -0.07]).unwrap();
        let x = g.constant(xv.clone()).unwrap();
        let w = g.constant(wv.clone()).unwrap();
        let b = g.constant(bv.clone()).unwrap();
        let y = g.value(linear(&g, x, w, Some(b)).unwrap());
        for r in 0..2 {
            for cidx in 0..2 {
                let mut want = bv.data()[cidx];
                for k in 0..3 {
                    want += xv.get2(r, k) * wv.get2(k, cidx);
                }
                assert!((y.get2(r, cidx) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn linear_rejects_shape_mismatch() {
        let g = graph();
        let x = g.constant(Tensor::zeros(vec![2, 4])).unwrap();
        let w = g.constant(Tensor::zeros(vec![3, 2])).unwrap();
        assert!(linear(&g, x, w, None).is_err());
    }

    #[test]
    fn attention_uniform_for_zero_queries_and_keys() {
        let g = graph();
        let q = g.constant(Tensor::zeros(vec![4, 2])).unwrap();
        let k = g.constant(Tensor::zeros(vec![4, 2])).unwrap();
        let v = g
            .constant(Tensor::from_fn(vec![4, 2], |i| i as f64))
            .unwrap();
        let out = masked_scaled_attention(&g, q, k, v, None, DeadRows::Error).unwrap();
        let w = g.value(out.weights);
        for r in 0..4 {
            for j in 0..4 {
                assert!((w.get2(r, j) - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn attention_diagonal_mask_returns_values() {
        let g = graph();
        let n = 3;
        let q = g
            .constant(Tensor::from_fn(vec![n, 2], |i| i as f64 * 0.4))
            .unwrap();
        let k = g
            .constant(Tensor::from_fn(vec![n, 2], |i| i as f64 * -0.2))
            .unwrap();
        let vv = Tensor::from_fn(vec![n, 2], |i| (i * i) as f64 * 0.1);
        let v = g.constant(vv.clone()).unwrap();
        let mask = Tensor::from_fn(vec![n, n], |i| {
            let (r, c_) = (i / n, i % n);
            if r == c_ {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        });
        let out = masked_scaled_attention(&g, q, k, v, Some(&mask), DeadRows::Error).unwrap();
        let w = g.value(out.weights);
        for r in 0..n {
            for j in 0..n {
                let want = if r == j { 1.0 } else { 0.0 };
                assert_eq!(w.get2(r, j), want);
            }
        }
        assert!(g.value(out.output).bit_eq(&vv));
    }

    #[test]
    fn attention_matches_direct_softmax_oracle() {
        let g = graph();
        let qv = Tensor::from_fn(vec![3, 2], |i| ((i * 7 + 3) % 11) as f64 * 0.13 - 0.5);
        let kv = Tensor::from_fn(vec![3, 2], |i| ((i * 5 + 1) % 13) as f64 * 0.11 - 0.6);
        let vv = Tensor::from_fn(vec![3, 2], |i| ((i * 3 + 2) % 7) as f64 * 0.19 - 0.4);
        let q = g.constant(qv.clone()).unwrap();
        let k = g.constant(kv.clone()).unwrap();
        let v = g.constant(vv.clone()).unwrap();
        let out = masked_scaled_attention(&g, q, k, v, None, DeadRows::Error).unwrap();

        // Direct softmax-then-matmul computation, no shared code path.
        let scale = 1.0 / (2.0f64).sqrt();
        let mut want = [[0.0; 2]; 3];
        for r in 0..3 {
            let logits: Vec<f64> = (0..3)
                .map(|j| {
                    scale * (qv.get2(r, 0) * kv.get2(j, 0) + qv.get2(r, 1) * kv.get2(j, 1))
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..3 {
                let p = exps[j] / z;
                want[r][0] += p * vv.get2(j, 0);
                want[r][1] += p * vv.get2(j, 1);
            }
        }
        let got = g.value(out.output);
        for r in 0..3 {
            for cidx in 0..2 {
                assert!((got.get2(r, cidx) - want[r][cidx]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_errors_on_fully_masked_row() {
        let g = graph();
        let q = g.constant(Tensor::zeros(vec![2, 2])).unwrap();
        let k = g.constant(Tensor::zeros(vec![2, 2])).unwrap();
        let v = g.constant(Tensor::zeros(vec![2, 2])).unwrap();
        let mask = Tensor::from_fn(vec![2, 2], |i| {
            if i < 2 {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        });
        let res = masked_scaled_attention(&g, q, k, v, Some(&mask), DeadRows::Error);
        assert!(matches!(
            res,
            Err(NumericsError::FullyMaskedRow { row: 1 })
        ));
    }

    #[test]
    fn softmax_shift_invariance_on_allowed_entries() {
        // Adding one finite constant to every allowed entry of a mask row
        // leaves the weights unchanged; this is why a "1 for allowed" and a
        // "0 for allowed" additive encoding are interchangeable.
        let g = graph();
        let scores = Tensor::from_fn(vec![3, 3], |i| (i as f64 * 0.37).sin());
        let base = Tensor::from_fn(vec![3, 3], |i| {
            if i % 2 == 0 {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        });
        let shifted = base.map(|m| if m.is_finite() { m + 17.25 } else { m });
        let s1 = g.constant(scores.clone()).unwrap();
        let w1 = g.masked_softmax(s1, Some(&base), DeadRows::Error).unwrap();
        let s2 = g.constant(scores).unwrap();
        let w2 = g.masked_softmax(s2, Some(&shifted), DeadRows::Error).unwrap();
        assert!(g.value(w1).max_abs_diff(&g.value(w2)).unwrap() < 1e-6);
    }

    #[test]
    fn gelu_fixed_points_and_bounds() {
        let g = graph();
        let x = g
            .constant(Tensor::new(vec![1, 5], vec![0.0, 1.0, -3.0, 8.0, -0.5]).unwrap())
            .unwrap();
        let y = g.value(g.gelu(x).unwrap());
        assert_eq!(y.data()[0], 0.0);
        // gelu(1) = Φ(1); the reference value comes from an independent
        // power-series erf evaluation.
        let phi1 = 0.5 * (1.0 + erf_series(1.0 / std::f64::consts::SQRT_2));
        assert!((y.data()[1] - phi1).abs() < 1e-12);
        for (i, &xi) in [0.0f64, 1.0, -3.0, 8.0, -0.5].iter().enumerate() {
            let yi = y.data()[i];
            if xi >= 0.0 {
                assert!((0.0..=xi).contains(&yi));
            } else {
                assert!((xi..=0.0).contains(&yi));
            }
        }
    }

    /// Maclaurin series for erf, truncated once terms fall below 1e-18.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        let mut n = 0usize;
        while term.abs() > 1e-18 {
            n += 1;
            term *= -x * x / n as f64;
            sum += term / (2 * n + 1) as f64;
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    }

    #[test]
    fn layer_norm_zeroes_constant_rows() {
        let g = graph();
        let x = g.constant(Tensor::full(vec![2, 4], 3.7)).unwrap();
        let gain = g.constant(Tensor::full(vec![4], 1.0)).unwrap();
        let off = g.constant(Tensor::zeros(vec![4])).unwrap();
        let y = g.value(g.layer_norm(x, gain, off, 1e-5).unwrap());
        for &v in y.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_gain_zero_gives_offset() {
        let g = graph();
        let x = g
            .constant(Tensor::from_fn(vec![2, 4], |i| i as f64))
            .unwrap();
        let gain = g.constant(Tensor::zeros(vec![4])).unwrap();
        let off = g.constant(Tensor::full(vec![4], -2.5)).unwrap();
        let y = g.value(g.layer_norm(x, gain, off, 1e-5).unwrap());
        for &v in y.data() {
            assert_eq!(v, -2.5);
        }
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let g = graph();
        let row: Vec<f64> = (0..6).map(|i| ((i * 13 + 5) % 17) as f64 * 0.3 - 1.1).collect();
        let x = g.constant(Tensor::new(vec![1, 6], row.clone()).unwrap()).unwrap();
        let gain = g.constant(Tensor::full(vec![6], 1.0)).unwrap();
        let off = g.constant(Tensor::zeros(vec![6])).unwrap();
        let y = g.value(g.layer_norm(x, gain, off, 1e-5).unwrap());

        let mean: f64 = row.iter().sum::<f64>() / 6.0;
        let var: f64 = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 6.0;
        for j in 0..6 {
            let want = (row[j] - mean) / (var + 1e-5).sqrt();
            assert!((y.data()[j] - want).abs() < 1e-12);
        }
        // Normalized output has mean ~0 and variance ~1.
        let m: f64 = y.data().iter().sum::<f64>() / 6.0;
        let v: f64 = y.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / 6.0;
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_scale_invariance() {
        let g = graph();
        let base = vec![2.0, -1.0, 0.5, 3.0, -2.5];
        let gain = g.constant(Tensor::full(vec![5], 1.0)).unwrap();
        let off = g.constant(Tensor::zeros(vec![5])).unwrap();
        let x1 = g.constant(Tensor::new(vec![1, 5], base.clone()).unwrap()).unwrap();
        let y1 = g.value(g.layer_norm(x1, gain, off, 1e-5).unwrap());
        let scaled: Vec<f64> = base.iter().map(|x| x * 37.5).collect();
        let x2 = g.constant(Tensor::new(vec![1, 5], scaled).unwrap()).unwrap();
        let y2 = g.value(g.layer_norm(x2, gain, off, 1e-5).unwrap());
        assert!(y1.max_abs_diff(&y2).unwrap() < 1e-5);
    }

    #[test]
    fn finite_check_rejects_overflowing_op() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(vec![1, 2], 1e20)).unwrap();
        let y = g.matmul(x, false, g.constant(Tensor::full(vec![2, 1], 1e20)).unwrap(), false);
        assert!(matches!(y, Err(NumericsError::NonFinite { .. })));
    }

    #[test]
    fn scalar_cast_helper_round_trips() {
        let x: f32 = c(0.25);
        assert_eq!(x, 0.25f32);
    }
}
