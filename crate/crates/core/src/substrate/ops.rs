//! Differentiable primitives: affine maps, ReLU, cosine similarity and its
//! log-safe remap. Each op comes with an explicit backward companion; models
//! compose these by hand and accumulate gradients into a
//! [`super::store::Gradients`].
//!
//! Slice-level helpers (`dot`, `matvec_into`, ...) are the allocation-free
//! hot paths; the `Tensor`-level wrappers are the public contract.

use crate::error::{Error, Result};

use super::tensor::{Tensor1, Tensor2};

/// Clamp bounds shared by `sim_hat` and the log-based losses.
pub const SIM_EPS: f64 = 1e-7;

/// Dot product with four-lane unrolling. The summation order is fixed, so
/// results are deterministic across runs.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    (s0 + s1) + (s2 + s3) + tail
}

/// y += alpha * x
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for i in 0..x.len() {
        y[i] += alpha * x[i];
    }
}

/// out = W x + b, where `w` is row-major `out_dim x in_dim`.
#[inline]
pub fn matvec_into(w: &[f64], in_dim: usize, x: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(x.len(), in_dim);
    debug_assert_eq!(w.len(), out.len() * in_dim);
    for (r, o) in out.iter_mut().enumerate() {
        *o = b[r] + dot(&w[r * in_dim..(r + 1) * in_dim], x);
    }
}

/// gx += W^T gy; gw += gy ⊗ x; gb += gy.
#[inline]
pub fn matvec_backward_into(
    w: &[f64],
    in_dim: usize,
    x: &[f64],
    gy: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    gx: Option<&mut [f64]>,
) {
    let out_dim = gy.len();
    debug_assert_eq!(w.len(), out_dim * in_dim);
    for r in 0..out_dim {
        let g = gy[r];
        if g != 0.0 {
            axpy(g, x, &mut gw[r * in_dim..(r + 1) * in_dim]);
        }
        gb[r] += g;
    }
    if let Some(gx) = gx {
        for r in 0..out_dim {
            let g = gy[r];
            if g != 0.0 {
                axpy(g, &w[r * in_dim..(r + 1) * in_dim], gx);
            }
        }
    }
}

#[inline]
pub fn relu_into(x: &[f64], out: &mut [f64]) {
    for i in 0..x.len() {
        out[i] = if x[i] > 0.0 { x[i] } else { 0.0 };
    }
}

/// gx += gy ⊙ 1[x > 0]; the subgradient at exactly 0 is 0.
#[inline]
pub fn relu_backward_into(x: &[f64], gy: &[f64], gx: &mut [f64]) {
    for i in 0..x.len() {
        if x[i] > 0.0 {
            gx[i] += gy[i];
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// y = W x + b.
pub fn affine(x: &Tensor1, w: &Tensor2, b: &Tensor1) -> Result<Tensor1> {
    if w.cols() != x.len() || w.rows() != b.len() {
        return Err(Error::Shape(format!(
            "affine: W is {}x{}, |x|={}, |b|={}",
            w.rows(),
            w.cols(),
            x.len(),
            b.len()
        )));
    }
    let mut out = Tensor1::zeros(w.rows());
    matvec_into(w.data(), w.cols(), x.data(), b.data(), out.data_mut());
    Ok(out)
}

/// Gradients of `affine` w.r.t. all three inputs given the output gradient.
pub fn affine_backward(
    x: &Tensor1,
    w: &Tensor2,
    gy: &Tensor1,
) -> Result<(Tensor2, Tensor1, Tensor1)> {
    if w.cols() != x.len() || w.rows() != gy.len() {
        return Err(Error::Shape("affine_backward: dims".into()));
    }
    let mut gw = Tensor2::zeros(w.rows(), w.cols());
    let mut gb = Tensor1::zeros(w.rows());
    let mut gx = Tensor1::zeros(x.len());
    matvec_backward_into(
        w.data(),
        w.cols(),
        x.data(),
        gy.data(),
        gw.data_mut(),
        gb.data_mut(),
        Some(gx.data_mut()),
    );
    Ok((gw, gx, gb))
}

/// Elementwise max(0, x).
pub fn relu(x: &Tensor1) -> Tensor1 {
    let mut out = Tensor1::zeros(x.len());
    relu_into(x.data(), out.data_mut());
    out
}

pub fn relu_backward(x: &Tensor1, gy: &Tensor1) -> Tensor1 {
    let mut gx = Tensor1::zeros(x.len());
    relu_backward_into(x.data(), gy.data(), gx.data_mut());
    gx
}

fn check_sim_inputs(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine_sim: |a|={} |b|={}",
            a.len(),
            b.len()
        )));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("cosine_sim: zero-norm input".into()));
    }
    Ok((na, nb))
}

/// a·b / (‖a‖‖b‖), in [-1, 1].
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = check_sim_inputs(a, b)?;
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Gradients of cosine similarity w.r.t. both vectors, scaled by `g`.
/// Accumulates into `ga`/`gb`.
pub fn cosine_sim_backward(
    a: &[f64],
    b: &[f64],
    g: f64,
    ga: &mut [f64],
    gb: &mut [f64],
) -> Result<()> {
    let (na, nb) = check_sim_inputs(a, b)?;
    let ab = dot(a, b);
    let inv = 1.0 / (na * nb);
    let cos = ab * inv;
    // d cos / da_i = b_i/(‖a‖‖b‖) − cos·a_i/‖a‖²
    let ca = cos / (na * na);
    let cb = cos / (nb * nb);
    for i in 0..a.len() {
        ga[i] += g * (b[i] * inv - ca * a[i]);
        gb[i] += g * (a[i] * inv - cb * b[i]);
    }
    Ok(())
}

/// Log-safe similarity: (1 + cos(a,b)) / 2, clamped to [1e-7, 1-1e-7].
///
/// Raw cosine can be non-positive and would blow up the log-based losses;
/// this remap keeps every similarity strictly inside (0, 1).
pub fn sim_hat(a: &[f64], b: &[f64]) -> Result<f64> {
    let c = cosine_sim(a, b)?;
    Ok(((1.0 + c) / 2.0).clamp(SIM_EPS, 1.0 - SIM_EPS))
}

/// Backward of [`sim_hat`]: zero in the clamped region, otherwise half of the
/// cosine gradient. Accumulates into `ga`/`gb`.
pub fn sim_hat_backward(
    a: &[f64],
    b: &[f64],
    g: f64,
    ga: &mut [f64],
    gb: &mut [f64],
) -> Result<()> {
    let c = cosine_sim(a, b)?;
    let raw = (1.0 + c) / 2.0;
    if raw <= SIM_EPS || raw >= 1.0 - SIM_EPS {
        return Ok(());
    }
    cosine_sim_backward(a, b, 0.5 * g, ga, gb)
}

/// Tensor-level wrappers used by tests and by the public contract.
pub fn cosine_sim_t(a: &Tensor1, b: &Tensor1) -> Result<f64> {
    cosine_sim(a.data(), b.data())
}

pub fn sim_hat_t(a: &Tensor1, b: &Tensor1) -> Result<f64> {
    sim_hat(a.data(), b.data())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(v: &[f64]) -> Tensor1 {
        Tensor1::new(v.to_vec()).unwrap()
    }

    #[test]
    fn affine_diagonal_map() {
        let x = t1(&[1.0, 0.0]);
        let w = Tensor2::new(2, 2, vec![2.0, 0.0, 0.0, 3.0]).unwrap();
        let b = t1(&[0.0, 0.0]);
        assert_eq!(affine(&x, &w, &b).unwrap().data(), &[2.0, 0.0]);
    }

    #[test]
    fn affine_zero_input_returns_bias() {
        let x = t1(&[0.0, 0.0]);
        let w = Tensor2::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = t1(&[5.0, -1.0]);
        assert_eq!(affine(&x, &w, &b).unwrap().data(), &[5.0, -1.0]);
    }

    #[test]
    fn affine_dimension_mismatch() {
        let x = t1(&[1.0, 2.0, 3.0]);
        let w = Tensor2::new(2, 2, vec![1.0; 4]).unwrap();
        let b = t1(&[0.0, 0.0]);
        assert!(matches!(affine(&x, &w, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn relu_basic() {
        assert_eq!(relu(&t1(&[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu(&t1(&[-3.0, -0.5])).data(), &[0.0, 0.0]);
    }

    #[test]
    fn cosine_identical_orthogonal_antiparallel() {
        let a = t1(&[3.0, 4.0]);
        assert!((cosine_sim_t(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let e1 = t1(&[1.0, 0.0]);
        let e2 = t1(&[0.0, 1.0]);
        assert!(cosine_sim_t(&e1, &e2).unwrap().abs() < 1e-12);
        let p = t1(&[1.0, 1.0]);
        let q = t1(&[-1.0, -1.0]);
        assert!((cosine_sim_t(&p, &q).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_is_domain_error() {
        let z = t1(&[0.0, 0.0]);
        let a = t1(&[1.0, 0.0]);
        assert!(matches!(cosine_sim_t(&z, &a), Err(Error::Domain(_))));
    }

    #[test]
    fn sim_hat_clamps_and_maps() {
        let a = t1(&[2.0, -1.0, 0.5]);
        assert!((sim_hat_t(&a, &a).unwrap() - (1.0 - SIM_EPS)).abs() < 1e-15);
        let e1 = t1(&[1.0, 0.0]);
        let e2 = t1(&[0.0, 1.0]);
        assert!((sim_hat_t(&e1, &e2).unwrap() - 0.5).abs() < 1e-12);
        let p = t1(&[1.0, 1.0]);
        let q = t1(&[-2.0, -2.0]);
        assert!((sim_hat_t(&p, &q).unwrap() - SIM_EPS).abs() < 1e-15);
    }

    #[test]
    fn cosine_is_symmetric() {
        let mut rng = crate::rng::Rng::new(3);
        for _ in 0..20 {
            let a = Tensor1::gaussian(5, 1.0, &mut rng);
            let b = Tensor1::gaussian(5, 1.0, &mut rng);
            let ab = cosine_sim_t(&a, &b).unwrap();
            let ba = cosine_sim_t(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-14);
        }
    }

    #[test]
    fn relu_gradient_matches_finite_differences() {
        // Check d sum(relu(x)) / dx away from the kink.
        let x = t1(&[-1.5, 0.7, 2.0, -0.2]);
        let gy = t1(&[1.0; 4]);
        let gx = relu_backward(&x, &gy);
        let h = 1e-4;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let fd = (relu(&xp).data().iter().sum::<f64>()
                - relu(&xm).data().iter().sum::<f64>())
                / (2.0 * h);
            assert!((gx.data()[i] - fd).abs() < 1e-8, "coord {i}");
        }
    }
}
