//! Forward kernels on plain tensors.
//!
//! These are the value-level definitions; [`super::graph::Graph`] reuses them
//! and adds the matching backward passes.

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Floor applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Default epsilon for layer normalisation.
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.dims2()?;
    let (k2, m) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let out = matmul_raw(a.data(), b.data(), n, k, m);
    Tensor::new(&[n, m], out)
}

/// `[n,k] x [k,m]` on raw slices.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T b` where `a` is `[k,n]` and `b` is `[k,m]`.
pub(crate) fn matmul_tn_raw(a: &[f64], b: &[f64], k: usize, n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for p in 0..k {
        let arow = &a[p * n..(p + 1) * n];
        let brow = &b[p * m..(p + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a b^T` where `a` is `[n,k]` and `b` is `[m,k]`.
pub(crate) fn matmul_nt_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            out[i * m + j] = dot(arow, brow);
        }
    }
    out
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// In-place max-subtracted softmax of one slice.
pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// In-place log-softmax of one slice.
pub(crate) fn log_softmax_in_place(x: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in x.iter_mut() {
        *v -= lse;
    }
}

/// Softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    let mut buf = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = src[base + k * inner];
            }
            softmax_in_place(&mut buf);
            for (k, b) in buf.iter().enumerate() {
                out[base + k * inner] = *b;
            }
        }
    }
    Tensor::new(shape, out)
}

/// Softmax of a plain slice.
pub fn softmax_vec(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    softmax_in_place(&mut v);
    v
}

/// Per-row normalisation over the last axis followed by an elementwise affine map.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let d = *x.shape().last().expect("rank >= 1");
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    let (y, _, _) = layer_norm_raw(x.data(), gain.data(), bias.data(), d, eps);
    Tensor::new(x.shape(), y)
}

/// Returns `(output, normalised input, reciprocal std per row)`.
pub(crate) fn layer_norm_raw(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    d: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gain[j] + bias[j];
        }
    }
    (y, xhat, rstd)
}

/// Cosine similarity between every row of `a` and every row of `b`.
pub fn cosine_sim_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, d) = a.dims2()?;
    let (m, d2) = b.dims2()?;
    if d != d2 {
        return Err(Error::shape("cosine_sim_matrix", a.shape(), b.shape()));
    }
    let an = normalize_rows_raw(a.data(), d, 0)?;
    let bn = normalize_rows_raw(b.data(), d, n)?;
    Tensor::new(&[n, m], matmul_nt_raw(&an, &bn, n, d, m))
}

/// L2-normalises each `d`-length chunk. `row_offset` shifts the row index
/// reported in a zero-norm error.
pub(crate) fn normalize_rows_raw(x: &[f64], d: usize, row_offset: usize) -> Result<Vec<f64>> {
    let mut out = x.to_vec();
    for (r, chunk) in out.chunks_exact_mut(d).enumerate() {
        let n = norm(chunk);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroNorm {
                row: r + row_offset,
            });
        }
        for v in chunk.iter_mut() {
            *v /= n;
        }
    }
    Ok(out)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = norm(a);
    if na == 0.0 {
        return Err(Error::ZeroNorm { row: 0 });
    }
    let nb = norm(b);
    if nb == 0.0 {
        return Err(Error::ZeroNorm { row: 1 });
    }
    Ok(dot(a, b) / (na * nb))
}

/// Negative log-probability of label `y` under a probability row.
pub fn cross_entropy(p: &[f64], y: usize) -> Result<f64> {
    if y >= p.len() {
        return Err(Error::LabelOutOfRange {
            label: y,
            classes: p.len(),
        });
    }
    Ok(-p[y].max(PROB_FLOOR).ln())
}

/// Index of the maximum, smallest index on ties.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_times_matrix() {
        let m = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 4.0]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &m).unwrap(), m);
    }

    #[test]
    fn matmul_forced_arithmetic() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&Tensor::new(&[2], vec![0.0, 0.0]).unwrap(), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::new(&[2], vec![1000.0, 0.0]).unwrap(), 0).unwrap();
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-300);
        assert!(matches!(
            softmax(&Tensor::zeros(&[2, 2]), 2),
            Err(Error::InvalidAxis { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn softmax_along_first_axis_sums_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[4, 3, 2], 2.0, &mut rng);
        let s = softmax(&x, 1).unwrap();
        for o in 0..4 {
            for i in 0..2 {
                let total: f64 = (0..3).map(|k| s.data()[o * 6 + k * 2 + i]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_cases() {
        let g = Tensor::ones(&[3]);
        let b = Tensor::zeros(&[3]);
        let y = layer_norm(&Tensor::full(&[1, 3], 7.0), &g, &b, LAYER_NORM_EPS).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

        let x = Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap();
        let y = layer_norm(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), 1e-300).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && (y.data()[1] + 1.0).abs() < 1e-12);

        assert!(layer_norm(&x, &g, &b, 1e-5).is_err());
    }

    #[test]
    fn cosine_cases() {
        let s = cosine_sim_matrix(&Tensor::identity(3), &Tensor::identity(3)).unwrap();
        assert_eq!(s, Tensor::identity(3));

        let a = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[1, 2], vec![-1.0, -2.0]).unwrap();
        assert!((cosine_sim_matrix(&a, &b).unwrap().item() + 1.0).abs() < 1e-15);

        let z = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            cosine_sim_matrix(&a, &z),
            Err(Error::ZeroNorm { row: 2 })
        ));
    }

    #[test]
    fn cosine_matches_naive_pair_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let s = cosine_sim_matrix(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let (x, y) = (a.row(i), b.row(j));
                let mut d = 0.0;
                let mut nx = 0.0;
                let mut ny = 0.0;
                for k in 0..8 {
                    d += x[k] * y[k];
                    nx += x[k] * x[k];
                    ny += y[k] * y[k];
                }
                let naive = d / (nx.sqrt() * ny.sqrt());
                assert!((s.get2(i, j) - naive).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn cross_entropy_cases() {
        assert!((cross_entropy(&[0.5, 0.5], 0).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(cross_entropy(&[0.0, 1.0], 1).unwrap(), 0.0);
        assert!((cross_entropy(&[1.0, 0.0], 1).unwrap() - (-PROB_FLOOR.ln())).abs() < 1e-12);
        assert!(matches!(
            cross_entropy(&[1.0], 1),
            Err(Error::LabelOutOfRange { label: 1, classes: 1 })
        ));
    }

    #[test]
    fn argmax_prefers_smaller_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }
}
