//! Stateless array operations shared by the tape and by direct callers.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::layout::AttentionMask;

/// Scaled dot-product attention where only mask-allowed keys take part.
///
/// Row `i` of the output is `Σ_j softmax_j(q_i·k_j/√d) v_j` over the keys
/// with `mask.allowed(i, j)`; masked keys receive exactly zero weight.
pub fn masked_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &AttentionMask,
) -> Result<Tensor> {
    attention_forward(q, k, v, 1, Some(mask)).map(|(out, _)| out)
}

/// Attention with every key visible.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    attention_forward(q, k, v, 1, None).map(|(out, _)| out)
}

/// Multi-head attention forward pass. Returns the output and the dense
/// `heads × nq × nk` probability table (zeros at masked positions) for the
/// backward pass.
pub(crate) fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask: Option<&AttentionMask>,
) -> Result<(Tensor, Vec<f64>)> {
    let (nq, d) = (q.rows(), q.cols());
    let nk = k.rows();
    if k.cols() != d || v.cols() != d || v.rows() != nk {
        return Err(Error::Shape(format!(
            "attention q {nq}x{d}, k {}x{}, v {}x{}",
            nk,
            k.cols(),
            v.rows(),
            v.cols()
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!("width {d} not divisible by {heads} heads")));
    }
    if let Some(m) = mask {
        if m.rows() != nq || m.cols() != nk {
            return Err(Error::Shape(format!(
                "mask {}x{} for attention {nq}x{nk}",
                m.rows(),
                m.cols()
            )));
        }
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let visible = |i: usize, j: usize| mask.is_none_or(|m| m.allowed(i, j));

    let mut out = vec![0.0; nq * d];
    let mut probs = vec![0.0; heads * nq * nk];
    let mut scores = vec![0.0; nk];
    for i in 0..nq {
        if !(0..nk).any(|j| visible(i, j)) {
            return Err(Error::FullyMaskedRow { row: i });
        }
        let qi = q.row(i);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = &qi[cols.clone()];
            let mut max = f64::NEG_INFINITY;
            for j in 0..nk {
                if !visible(i, j) {
                    continue;
                }
                let kh = &k.row(j)[cols.clone()];
                let mut s = 0.0;
                for t in 0..dh {
                    s += qh[t] * kh[t];
                }
                s *= scale;
                scores[j] = s;
                if s > max {
                    max = s;
                }
            }
            let mut denom = 0.0;
            for j in 0..nk {
                if visible(i, j) {
                    let e = (scores[j] - max).exp();
                    scores[j] = e;
                    denom += e;
                }
            }
            let prow = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            let orow = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
            for j in 0..nk {
                if !visible(i, j) {
                    continue;
                }
                let p = scores[j] / denom;
                prow[j] = p;
                let vh = &v.row(j)[cols.clone()];
                for t in 0..dh {
                    orow[t] += p * vh[t];
                }
            }
        }
    }
    Ok((Tensor::raw(nq, d, out), probs))
}

/// Gradients of multi-head attention with respect to `q`, `k` and `v`.
pub(crate) fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    probs: &[f64],
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (nq, d) = (q.rows(), q.cols());
    let nk = k.rows();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = Tensor::zeros(nq, d);
    let mut gk = Tensor::zeros(nk, d);
    let mut gv = Tensor::zeros(nk, d);
    let mut dp = vec![0.0; nk];
    for h in 0..heads {
        let c0 = h * dh;
        for i in 0..nq {
            let prow = &probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            let go = &grad_out.row(i)[c0..c0 + dh];
            let mut dot = 0.0;
            for j in 0..nk {
                let p = prow[j];
                if p == 0.0 {
                    dp[j] = 0.0;
                    continue;
                }
                let vh = &v.row(j)[c0..c0 + dh];
                let mut s = 0.0;
                for t in 0..dh {
                    s += go[t] * vh[t];
                }
                dp[j] = s;
                dot += p * s;
                let gvr = &mut gv.row_mut(j)[c0..c0 + dh];
                for t in 0..dh {
                    gvr[t] += p * go[t];
                }
            }
            for j in 0..nk {
                let p = prow[j];
                if p == 0.0 {
                    continue;
                }
                let ds = p * (dp[j] - dot) * scale;
                let kh = &k.row(j)[c0..c0 + dh];
                let qh = &q.row(i)[c0..c0 + dh];
                {
                    let gqr = &mut gq.row_mut(i)[c0..c0 + dh];
                    for t in 0..dh {
                        gqr[t] += ds * kh[t];
                    }
                }
                let gkr = &mut gk.row_mut(j)[c0..c0 + dh];
                for t in 0..dh {
                    gkr[t] += ds * qh[t];
                }
            }
        }
    }
    (gq, gk, gv)
}

/// Averages consecutive windows of `window` rows. The last window may be
/// shorter; it is averaged over the rows it actually holds.
pub fn avg_pool_rows(f: &Tensor, window: usize) -> Result<Tensor> {
    if window < 1 {
        return Err(Error::InvalidArgument("pooling window must be at least 1".into()));
    }
    let (l, d) = (f.rows(), f.cols());
    let out_rows = l.div_ceil(window);
    let mut out = vec![0.0; out_rows * d];
    for j in 0..out_rows {
        let start = j * window;
        let end = ((j + 1) * window).min(l);
        let orow = &mut out[j * d..(j + 1) * d];
        for r in start..end {
            for (o, x) in orow.iter_mut().zip(f.row(r)) {
                *o += x;
            }
        }
        let n = (end - start) as f64;
        orow.iter_mut().for_each(|o| *o /= n);
    }
    Ok(Tensor::raw(out_rows, d, out))
}

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Per-row loop written independently of `attention_forward`: collects the
    /// visible keys first, then applies a textbook softmax.
    fn brute_force_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &AttentionMask) -> Tensor {
        let d = q.cols();
        let mut out = Tensor::zeros(q.rows(), d);
        for i in 0..q.rows() {
            let keys: Vec<usize> = (0..k.rows()).filter(|&j| mask.allowed(i, j)).collect();
            let logits: Vec<f64> = keys
                .iter()
                .map(|&j| {
                    q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>()
                        / (d as f64).sqrt()
                })
                .collect();
            let z: f64 = logits.iter().map(|s| s.exp()).sum();
            for (n, &j) in keys.iter().enumerate() {
                let w = logits[n].exp() / z;
                for t in 0..d {
                    out.set(i, t, out.get(i, t) + w * v.get(j, t));
                }
            }
        }
        out
    }

    #[test]
    fn single_key_returns_value() {
        let one = Tensor::full(1, 1, 1.0);
        let v = Tensor::full(1, 1, 3.5);
        let m = AttentionMask::full(1, 1);
        assert_eq!(masked_attention(&one, &one, &v, &m).unwrap(), v);
    }

    #[test]
    fn masked_key_gets_zero_weight() {
        let q = Tensor::from_rows(1, 2, vec![0.3, -1.0]).unwrap();
        let k = Tensor::from_rows(2, 2, vec![1.0, 2.0, -4.0, 0.5]).unwrap();
        let v = Tensor::from_rows(2, 2, vec![7.0, -2.0, 100.0, 100.0]).unwrap();
        let m = AttentionMask::from_fn(1, 2, |_, j| j == 0);
        let out = masked_attention(&q, &k, &v, &m).unwrap();
        assert_eq!(out.data(), &[7.0, -2.0]);
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let t = Tensor::full(2, 2, 1.0);
        let m = AttentionMask::from_fn(2, 2, |i, _| i == 0);
        assert!(matches!(
            masked_attention(&t, &t, &t, &m),
            Err(Error::FullyMaskedRow { row: 1 })
        ));
    }

    #[test]
    fn matches_brute_force_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let q = Tensor::randn(4, 4, 1.0, &mut rng);
            let k = Tensor::randn(4, 4, 1.0, &mut rng);
            let v = Tensor::randn(4, 4, 1.0, &mut rng);
            let m = AttentionMask::from_fn(4, 4, |i, j| j <= i);
            let a = masked_attention(&q, &k, &v, &m).unwrap();
            let b = brute_force_attention(&q, &k, &v, &m);
            assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }

    #[test]
    fn all_true_mask_is_bitwise_unmasked() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = Tensor::randn(3, 6, 1.0, &mut rng);
        let k = Tensor::randn(5, 6, 1.0, &mut rng);
        let v = Tensor::randn(5, 6, 1.0, &mut rng);
        let m = AttentionMask::full(3, 5);
        assert_eq!(masked_attention(&q, &k, &v, &m).unwrap(), attention(&q, &k, &v).unwrap());
    }

    #[test]
    fn pooling_examples() {
        let f = Tensor::from_rows(4, 1, vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(avg_pool_rows(&f, 2).unwrap().data(), &[1.5, 3.5]);
        assert_eq!(avg_pool_rows(&f, 1).unwrap(), f);
        assert!(avg_pool_rows(&f, 0).is_err());

        let g = Tensor::from_rows(5, 2, (0..10).map(f64::from).collect()).unwrap();
        let p = avg_pool_rows(&g, 2).unwrap();
        // brute force: windows {0,1}, {2,3}, {4}
        let expect = [
            (g.get(0, 0) + g.get(1, 0)) / 2.0,
            (g.get(0, 1) + g.get(1, 1)) / 2.0,
            (g.get(2, 0) + g.get(3, 0)) / 2.0,
            (g.get(2, 1) + g.get(3, 1)) / 2.0,
            g.get(4, 0),
            g.get(4, 1),
        ];
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &expect);
    }
}
