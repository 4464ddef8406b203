//! Pure (non-differentiable) forms of the core numeric ops. The graph module
//! builds its fused nodes on top of these; they are also usable directly for
//! inference and verification.

use std::cell::RefCell;
use std::collections::HashMap;

use super::tensor::{Real, Tensor};

thread_local! {
    /// `(sin, cos)` of `m * theta_i` per head dimension and integer position.
    /// The attention ops hit identical angles for every sequence of every
    /// step, so the trig is computed once per thread and reread.
    static ROTARY_SINCOS: RefCell<HashMap<usize, Vec<Vec<(f64, f64)>>>> =
        RefCell::new(HashMap::new());
}

fn with_sincos<T>(d_head: usize, pos: usize, f: impl FnOnce(&[(f64, f64)]) -> T) -> T {
    ROTARY_SINCOS.with(|cell| {
        let mut map = cell.borrow_mut();
        let rows = map.entry(d_head).or_default();
        if rows.len() <= pos {
            let freqs = rotary_freqs(d_head);
            while rows.len() <= pos {
                let m = rows.len() as f64;
                rows.push(
                    freqs
                        .iter()
                        .map(|&theta| {
                            let angle = m * theta;
                            (angle.sin(), angle.cos())
                        })
                        .collect(),
                );
            }
        }
        f(&rows[pos])
    })
}

fn rotate_row_cached<R: Real>(row: &mut [R], sincos: &[(f64, f64)], invert: bool) {
    for (i, &(sin, cos)) in sincos.iter().enumerate() {
        let sin = if invert { -sin } else { sin };
        let (sin, cos) = (R::from_f64(sin), R::from_f64(cos));
        let (a, b) = (row[2 * i], row[2 * i + 1]);
        row[2 * i] = a * cos - b * sin;
        row[2 * i + 1] = a * sin + b * cos;
    }
}

/// Row-wise softmax with the usual max-shift for stability.
pub fn softmax_rows<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    assert!(x.all_finite(), "softmax over non-finite input");
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_row_in_place(out.row_mut(r));
    }
    out
}

/// In-place softmax over one slice.
pub fn softmax_row_in_place<R: Real>(row: &mut [R]) {
    let max = row.iter().copied().fold(row[0], R::max);
    let mut sum = R::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Rotation angles for a head dimension: `theta_i = 10000^(-2i/d_head)` for
/// the `i`-th coordinate pair.
pub fn rotary_freqs(d_head: usize) -> Vec<f64> {
    assert!(d_head % 2 == 0, "rotary needs an even head dimension");
    (0..d_head / 2)
        .map(|i| 10000f64.powf(-2.0 * i as f64 / d_head as f64))
        .collect()
}

/// Applies rotary position embedding: at position `m`, each coordinate pair
/// `(x_{2i}, x_{2i+1})` is rotated by the angle `m * theta_i`.
pub fn apply_rotary<R: Real>(x: &Tensor<R>, positions: &[usize]) -> Tensor<R> {
    assert_eq!(x.rows(), positions.len(), "one position per row");
    let d = x.cols();
    let mut out = x.clone();
    for (r, &pos) in positions.iter().enumerate() {
        with_sincos(d, pos, |sc| rotate_row_cached(out.row_mut(r), sc, false));
    }
    out
}

/// Undoes [`apply_rotary`] in place (rotation by `-m * theta_i` per row);
/// used by the attention backward pass.
pub fn unapply_rotary<R: Real>(x: &mut Tensor<R>, positions: &[usize]) {
    assert_eq!(x.rows(), positions.len(), "one position per row");
    let d = x.cols();
    for (r, &pos) in positions.iter().enumerate() {
        with_sincos(d, pos, |sc| rotate_row_cached(x.row_mut(r), sc, true));
    }
}

/// Rotates one row by `m * theta_i` per pair; `m` may be negative, which
/// inverts the rotation (used by the attention backward pass).
pub fn rotate_row<R: Real>(row: &mut [R], m: f64, freqs: &[f64]) {
    for (i, &theta) in freqs.iter().enumerate() {
        let angle = m * theta;
        let (sin, cos) = (R::from_f64(angle.sin()), R::from_f64(angle.cos()));
        let (a, b) = (row[2 * i], row[2 * i + 1]);
        row[2 * i] = a * cos - b * sin;
        row[2 * i + 1] = a * sin + b * cos;
    }
}

/// Single-head causal attention over `[seq, d_head]` inputs with scale
/// `1/sqrt(d_head)`. Rotary embedding, if wanted, is applied by the caller.
pub fn causal_attention<R: Real>(q: &Tensor<R>, k: &Tensor<R>, v: &Tensor<R>) -> Tensor<R> {
    let (probs, _) = causal_attention_probs(q, k);
    let mut out = Tensor::zeros(v.rows(), v.cols());
    super::tensor::matmul_acc(&mut out, &probs, v);
    out
}

/// The masked, scaled softmax weights of causal attention, returned as a
/// `[seq, seq]` lower-triangular row-stochastic matrix together with the
/// scale that was applied. Shared by the forward pass and the backward
/// recomputation.
pub fn causal_attention_probs<R: Real>(q: &Tensor<R>, k: &Tensor<R>) -> (Tensor<R>, R) {
    assert_eq!(q.shape(), k.shape(), "attention q/k shape mismatch");
    let seq = q.rows();
    let scale = R::from_f64(1.0 / (q.cols() as f64).sqrt());
    let mut probs = Tensor::zeros(seq, seq);
    for t in 0..seq {
        let q_row = q.row(t);
        let logits = probs.row_mut(t);
        for (s, logit) in logits.iter_mut().enumerate().take(t + 1) {
            *logit = super::tensor::dot(q_row, k.row(s)) * scale;
        }
        softmax_row_in_place(&mut logits[..t + 1]);
    }
    (probs, scale)
}

/// GELU with the tanh approximation.
pub fn gelu<R: Real>(x: R) -> R {
    gelu_parts(x).0
}

/// `(gelu(x), tanh(u(x)))`. The tanh dominates the cost, and the backward
/// pass can reuse it instead of recomputing.
pub fn gelu_parts<R: Real>(x: R) -> (R, R) {
    let c = R::from_f64(0.7978845608028654); // sqrt(2/pi)
    let k = R::from_f64(0.044715);
    let half = R::from_f64(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    (half * x * (R::ONE + t), t)
}

/// Derivative of [`gelu`].
pub fn gelu_grad<R: Real>(x: R) -> R {
    gelu_grad_cached(x, gelu_parts(x).1)
}

/// Derivative of [`gelu`] given the tanh saved by the forward pass.
pub fn gelu_grad_cached<R: Real>(x: R, t: R) -> R {
    let c = R::from_f64(0.7978845608028654);
    let k = R::from_f64(0.044715);
    let half = R::from_f64(0.5);
    let three = R::from_f64(3.0);
    let du = c * (R::ONE + three * k * x * x);
    half * (R::ONE + t) + half * x * (R::ONE - t * t) * du
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<R: Real>(x: R) -> R {
    if x > R::ZERO {
        x + (R::ONE + (-x).exp()).ln()
    } else {
        (R::ONE + x.exp()).ln()
    }
}

/// Logistic sigmoid.
pub fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::ZERO {
        R::ONE / (R::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::ONE + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_symmetric_and_shifted_rows() {
        let x = Tensor::<f64>::from_f64(2, 2, &[0.0, 0.0, 0.0, 3f64.ln()]);
        let s = softmax_rows(&x);
        assert!((s.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((s.get(0, 1) - 0.5).abs() < 1e-15);
        assert!((s.get(1, 0) - 0.25).abs() < 1e-15);
        assert!((s.get(1, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn rotary_identity_at_position_zero() {
        let x = Tensor::<f64>::from_f64(1, 6, &[1.0, -2.0, 0.5, 3.0, 0.1, 0.2]);
        let y = apply_rotary(&x, &[0]);
        assert_eq!(x, y);
    }

    #[test]
    fn rotary_unit_vector_at_position_one() {
        // d_head=2 gives theta_0 = 1, so position 1 rotates by one radian.
        let x = Tensor::<f64>::from_f64(1, 2, &[1.0, 0.0]);
        let y = apply_rotary(&x, &[1]);
        assert!((y.get(0, 0) - 0.5403023058681398).abs() < 1e-12);
        assert!((y.get(0, 1) - 0.8414709848078965).abs() < 1e-12);
    }

    #[test]
    fn attention_uniform_under_zero_logits() {
        let q = Tensor::<f64>::zeros(2, 4);
        let k = Tensor::<f64>::zeros(2, 4);
        let v = Tensor::<f64>::from_f64(2, 4, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let out = causal_attention(&q, &k, &v);
        assert_eq!(out.row(0), v.row(0));
        for d in 0..4 {
            let mean = (v.get(0, d) + v.get(1, d)) / 2.0;
            assert!((out.get(1, d) - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_single_position_passes_value_through() {
        let q = Tensor::<f64>::from_f64(1, 2, &[0.3, -0.7]);
        let k = Tensor::<f64>::from_f64(1, 2, &[1.0, 2.0]);
        let v = Tensor::<f64>::from_f64(1, 2, &[5.0, -5.0]);
        assert_eq!(causal_attention(&q, &k, &v), v);
    }

    #[test]
    fn gelu_grad_matches_finite_differences() {
        let h = 1e-6;
        for &x in &[-3.0f64, -1.0, -0.1, 0.0, 0.5, 2.0, 4.0] {
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - num).abs() < 1e-8, "x={x}");
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            vals in proptest::collection::vec(-30.0f64..30.0, 1..40),
        ) {
            let x = Tensor::<f64>::from_f64(1, vals.len(), &vals);
            let s = softmax_rows(&x);
            let sum: f64 = s.data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(s.data().iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn softmax_shift_invariance(
            vals in proptest::collection::vec(-20.0f64..20.0, 2..16),
            c in -50.0f64..50.0,
        ) {
            let x = Tensor::<f64>::from_f64(1, vals.len(), &vals);
            let shifted: Vec<f64> = vals.iter().map(|v| v + c).collect();
            let y = Tensor::<f64>::from_f64(1, vals.len(), &shifted);
            let (sx, sy) = (softmax_rows(&x), softmax_rows(&y));
            for (a, b) in sx.data().iter().zip(sy.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn rotary_relative_position_property(
            q in proptest::collection::vec(-2.0f64..2.0, 8),
            k in proptest::collection::vec(-2.0f64..2.0, 8),
            m in 0usize..64,
            n in 0usize..64,
        ) {
            // <R_m q, R_n k> depends only on m - n.
            let qt = Tensor::<f64>::from_f64(1, 8, &q);
            let kt = Tensor::<f64>::from_f64(1, 8, &k);
            let rq = apply_rotary(&qt, &[m]);
            let rk = apply_rotary(&kt, &[n]);
            let lhs: f64 = rq.data().iter().zip(rk.data()).map(|(a, b)| a * b).sum();

            let freqs = rotary_freqs(8);
            let mut q_rel = qt.clone();
            rotate_row(q_rel.row_mut(0), m as f64 - n as f64, &freqs);
            let rhs: f64 = q_rel.data().iter().zip(kt.data()).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }

        #[test]
        fn rotation_preserves_norm(
            x in proptest::collection::vec(-3.0f64..3.0, 16),
            pos in 0usize..512,
        ) {
            let xt = Tensor::<f64>::from_f64(1, 16, &x);
            let y = apply_rotary(&xt, &[pos]);
            let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny: f64 = y.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((nx - ny).abs() < 1e-9);
        }
    }
}
