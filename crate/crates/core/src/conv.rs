//! Circular (periodic) 2D convolution kernels: forward pass and the
//! vector-Jacobian products for input, weights and bias.
//!
//! Layout: input `[c_in, n, n]`, weights `[c_out, c_in, k, k]`, bias
//! `[c_out]`, output `[c_out, n, n]`. Cross-correlation convention with the
//! kernel centred on the output point, wrapping at the grid edges.

use crate::error::{QgError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub n: usize,
}

impl ConvShape {
    pub fn infer(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Self> {
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 3 || xs[1] != xs[2] {
            return Err(QgError::Shape(format!(
                "convolution input must be [c, n, n], got {xs:?}"
            )));
        }
        if ws.len() != 4 || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(QgError::Shape(format!(
                "convolution weights must be [o, c, k, k] with odd k, got {ws:?}"
            )));
        }
        if ws[1] != xs[0] {
            return Err(QgError::Shape(format!(
                "weights expect {} input channels, input has {}",
                ws[1], xs[0]
            )));
        }
        if b.shape() != [ws[0]] {
            return Err(QgError::Shape(format!(
                "bias must be [{}], got {:?}",
                ws[0],
                b.shape()
            )));
        }
        Ok(Self {
            c_in: xs[0],
            c_out: ws[0],
            kernel: ws[2],
            n: xs[1],
        })
    }

    fn patch_rows(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }
}

/// Unfold periodic patches into a `[c_in·k·k, n·n]` matrix.
fn im2col(x: &[f64], s: &ConvShape) -> Vec<f64> {
    let (n, k) = (s.n, s.kernel);
    let half = k / 2;
    let cols = n * n;
    let mut out = vec![0.0; s.patch_rows() * cols];
    for c in 0..s.c_in {
        let plane = &x[c * cols..(c + 1) * cols];
        for p in 0..k {
            for q in 0..k {
                let row = (c * k + p) * k + q;
                let dst = &mut out[row * cols..(row + 1) * cols];
                let shift = (q + n - half) % n;
                for i in 0..n {
                    let src_row = &plane[((i + n + p - half) % n) * n..][..n];
                    let d = &mut dst[i * n..(i + 1) * n];
                    // d[j] = src_row[(j + shift) % n]
                    let (head, tail) = d.split_at_mut(n - shift);
                    head.copy_from_slice(&src_row[shift..]);
                    tail.copy_from_slice(&src_row[..shift]);
                }
            }
        }
    }
    out
}

/// Fold a patch-matrix cotangent back onto the input grid (adjoint of im2col).
fn col2im(cols_grad: &[f64], s: &ConvShape) -> Vec<f64> {
    let (n, k) = (s.n, s.kernel);
    let half = k / 2;
    let cols = n * n;
    let mut out = vec![0.0; s.c_in * cols];
    for c in 0..s.c_in {
        let plane = &mut out[c * cols..(c + 1) * cols];
        for p in 0..k {
            for q in 0..k {
                let row = (c * k + p) * k + q;
                let src = &cols_grad[row * cols..(row + 1) * cols];
                let shift = (q + n - half) % n;
                for i in 0..n {
                    let dst_row = &mut plane[((i + n + p - half) % n) * n..][..n];
                    let g = &src[i * n..(i + 1) * n];
                    for j in 0..n - shift {
                        dst_row[j + shift] += g[j];
                    }
                    for j in n - shift..n {
                        dst_row[j + shift - n] += g[j];
                    }
                }
            }
        }
    }
    out
}

/// `c = a·b (+ c when accumulate)`, all row-major with `a: m×k`, `b: k×n`.
/// `a_t`/`b_t` read the corresponding operand transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above and strides describe
    // row-major (or transposed row-major) layouts within those bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let s = ConvShape::infer(x, w, b)?;
    let cols = im2col(x.data(), &s);
    let npts = s.n * s.n;
    let mut out = vec![0.0; s.c_out * npts];
    for (o, chunk) in out.chunks_mut(npts).enumerate() {
        chunk.fill(b.data()[o]);
    }
    gemm(
        s.c_out,
        s.patch_rows(),
        npts,
        w.data(),
        false,
        &cols,
        false,
        &mut out,
        true,
    );
    Tensor::new(vec![s.c_out, s.n, s.n], out)
}

/// Cotangents `(dx, dw, db)` for output cotangent `gy`.
pub fn backward(x: &Tensor, w: &Tensor, b: &Tensor, gy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let s = ConvShape::infer(x, w, b)?;
    let npts = s.n * s.n;
    if gy.len() != s.c_out * npts {
        return Err(QgError::Shape("convolution output cotangent".into()));
    }
    let cols = im2col(x.data(), &s);
    let rows = s.patch_rows();

    let mut dw = vec![0.0; s.c_out * rows];
    gemm(s.c_out, npts, rows, gy.data(), false, &cols, true, &mut dw, false);

    let db: Vec<f64> = gy.data().chunks(npts).map(|c| c.iter().sum()).collect();

    let mut dcols = vec![0.0; rows * npts];
    gemm(rows, s.c_out, npts, w.data(), true, gy.data(), false, &mut dcols, false);
    let dx = col2im(&dcols, &s);

    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::new(b.shape().to_vec(), db)?,
    ))
}

/// `max(x, 0)`, letting NaN through so that blow-ups stay visible; the
/// backward pass uses the subgradient `1[x > 0]`.
pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| if v < 0.0 { 0.0 } else { v }).collect();
    Tensor::new(x.shape().to_vec(), data).expect("relu shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct sextuple loop with explicit modular indexing.
    fn naive(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
        let s = ConvShape::infer(x, w, b).unwrap();
        let (n, k) = (s.n as isize, s.kernel as isize);
        let half = k / 2;
        let mut out = vec![0.0; s.c_out * s.n * s.n];
        for o in 0..s.c_out {
            for i in 0..n {
                for j in 0..n {
                    let mut acc = b.data()[o];
                    for c in 0..s.c_in {
                        for p in 0..k {
                            for q in 0..k {
                                let ii = (i + p - half).rem_euclid(n) as usize;
                                let jj = (j + q - half).rem_euclid(n) as usize;
                                let widx = ((o * s.c_in + c) * s.kernel + p as usize) * s.kernel
                                    + q as usize;
                                acc += w.data()[widx] * x.data()[(c * s.n + ii) * s.n + jj];
                            }
                        }
                    }
                    out[(o * s.n + i as usize) * s.n + j as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(vec![3, 8, 8], &mut rng);
        let w = random(vec![2, 3, 5, 5], &mut rng);
        let b = random(vec![2], &mut rng);
        let y = forward(&x, &w, &b).unwrap();
        let reference = naive(&x, &w, &b);
        for (a, r) in y.data().iter().zip(&reference) {
            assert!((a - r).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <J·(dx, dw, db), gy> == <(dx, dw, db), J^T gy> for the bilinear map.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(vec![2, 8, 8], &mut rng);
        let w = random(vec![3, 2, 3, 3], &mut rng);
        let b = random(vec![3], &mut rng);
        let gy = random(vec![3, 8, 8], &mut rng);
        let (dx, dw, db) = backward(&x, &w, &b, &gy).unwrap();
        let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(u, v)| u * v).sum::<f64>();
        let zero_b = Tensor::zeros(vec![3]);
        let zero_w = Tensor::zeros(vec![3, 2, 3, 3]);

        let lhs_x = dot(forward(&x, &w, &zero_b).unwrap().data(), gy.data());
        assert!((lhs_x - dot(x.data(), dx.data())).abs() < 1e-10);
        assert!((lhs_x - dot(w.data(), dw.data())).abs() < 1e-10);
        let lhs_b = dot(forward(&x, &zero_w, &b).unwrap().data(), gy.data());
        assert!((lhs_b - dot(b.data(), db.data())).abs() < 1e-10);
    }

    #[test]
    fn rejects_mismatched_channels() {
        let x = Tensor::zeros(vec![2, 8, 8]);
        let w = Tensor::zeros(vec![1, 3, 5, 5]);
        let b = Tensor::zeros(vec![1]);
        assert!(forward(&x, &w, &b).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn input_gradient_is_the_adjoint(
            seed in 0u64..10_000,
            c_in in 1usize..4,
            c_out in 1usize..4,
            k in prop::sample::select(vec![1usize, 3, 5]),
            n in prop::sample::select(vec![6usize, 8, 10]),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(vec![c_in, n, n], &mut rng);
            let w = random(vec![c_out, c_in, k, k], &mut rng);
            let b = Tensor::zeros(vec![c_out]);
            let gy = random(vec![c_out, n, n], &mut rng);
            let (dx, dw, _) = backward(&x, &w, &b, &gy).unwrap();
            let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(u, v)| u * v).sum::<f64>();
            let lhs = dot(forward(&x, &w, &b).unwrap().data(), gy.data());
            let scale = 1e-12 * (n * n * c_in * k * k * c_out) as f64;
            prop_assert!((lhs - dot(x.data(), dx.data())).abs() <= scale);
            prop_assert!((lhs - dot(w.data(), dw.data())).abs() <= scale);
        }
    }
}
