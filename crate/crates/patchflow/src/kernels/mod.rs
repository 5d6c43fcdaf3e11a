//! Homogeneous convolution kernels of degree `1 - n` and their derivatives.
//!
//! A kernel here is a map `k : R^n \ {0} -> R^n` with `k(lambda x) =
//! lambda^{1-n} k(x)`. Velocity fields are produced by convolving a density
//! with `k`; the gradient components `d_i k_j` (degree `-n`, zero sphere
//! mean) drive the principal-value machinery and the hessian components
//! (degree `-n-1`) the hypersingular one.

mod sphere;

pub use sphere::{sphere_integrals, SphereIntegrals, SphereRule};

use crate::math::MAX_N;
use crate::scalar::Scalar;
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("unknown kernel name `{0}`")]
    UnknownName(String),
    #[error("kernel `{name}` is not defined in dimension {n}")]
    DimensionMismatch { name: String, n: usize },
    #[error("dimension {0} out of supported range 2..={max}", max = MAX_N)]
    UnsupportedDimension(usize),
    #[error("sphere quadrature did not converge: refinement still changes c by {achieved:e}")]
    NonConvergent { achieved: f64 },
    #[error("sphere rule needs at least 64 nodes, got {0}")]
    TooFewNodes(usize),
}

type Profile<S> = Arc<dyn Fn(&[S], &mut [S]) + Send + Sync>;

#[derive(Clone)]
pub enum Family<S> {
    /// `K_BS(x) = (-x_2, x_1) / (2 pi |x|^2)`, the perpendicular gradient of
    /// the planar Newtonian potential. Divergence free.
    BiotSavart,
    /// `K_Ag(x) = -grad N(x) = -x / (n w_n |x|^n)` with `N` the fundamental
    /// solution of the Laplacian. `div v = -rho`.
    Aggregation,
    /// `a * K_Ag + b * K_BS` in the plane.
    Mixed2d { a: S, b: S },
    /// Custom kernel given by its sphere profile `g`: the kernel is the
    /// homogeneous extension `k(x) = |x|^{1-n} g(x/|x|)`; derivatives come
    /// from finite differences on the sphere rescaled by exact homogeneity.
    Profile(Profile<S>),
}

#[derive(Clone)]
pub struct KernelSpec<S> {
    n: usize,
    name: String,
    family: Family<S>,
}

impl<S> fmt::Debug for KernelSpec<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KernelSpec({}, n={})", self.name, self.n)
    }
}

/// Volume of the unit ball in `R^n`.
pub fn unit_ball_volume<S: Scalar>(n: usize) -> S {
    // w_n = 2 pi / n * w_{n-2}, w_0 = 1, w_1 = 2
    let mut w = if n % 2 == 0 { S::one() } else { S::of(2.0) };
    let mut m = if n % 2 == 0 { 0 } else { 1 };
    while m < n {
        m += 2;
        w = w * S::of(2.0) * S::PI() / S::of_usize(m);
    }
    w
}

/// Surface measure of the unit sphere `S^{n-1}`.
pub fn unit_sphere_area<S: Scalar>(n: usize) -> S {
    S::of_usize(n) * unit_ball_volume::<S>(n)
}

/// Resolve a builtin kernel by registry name.
///
/// Names: `biot_savart` (n = 2), `aggregation` (n >= 2). The two-parameter
/// family `mixed2d` is constructed through [`KernelSpec::mixed2d`].
pub fn builtin_kernel<S: Scalar>(name: &str, n: usize) -> Result<KernelSpec<S>, KernelError> {
    if !(2..=MAX_N).contains(&n) {
        return Err(KernelError::UnsupportedDimension(n));
    }
    match name {
        "biot_savart" => {
            if n != 2 {
                return Err(KernelError::DimensionMismatch {
                    name: name.into(),
                    n,
                });
            }
            Ok(KernelSpec {
                n: 2,
                name: name.into(),
                family: Family::BiotSavart,
            })
        }
        "aggregation" => Ok(KernelSpec {
            n,
            name: name.into(),
            family: Family::Aggregation,
        }),
        other => Err(KernelError::UnknownName(other.into())),
    }
}

impl<S: Scalar> KernelSpec<S> {
    pub fn mixed2d(a: S, b: S) -> Self {
        KernelSpec {
            n: 2,
            name: format!("mixed2d(a={a},b={b})"),
            family: Family::Mixed2d { a, b },
        }
    }

    /// Kernel from a sphere profile `g : S^{n-1} -> R^n`.
    pub fn from_profile(
        name: impl Into<String>,
        n: usize,
        g: impl Fn(&[S], &mut [S]) + Send + Sync + 'static,
    ) -> Result<Self, KernelError> {
        if !(2..=MAX_N).contains(&n) {
            return Err(KernelError::UnsupportedDimension(n));
        }
        Ok(KernelSpec {
            n,
            name: name.into(),
            family: Family::Profile(Arc::new(g)),
        })
    }

    pub fn dimension(&self) -> usize {
        self.n
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn family(&self) -> &Family<S> {
        &self.family
    }

    /// `k(x)`, for `x != 0`. `out` has length `n`.
    #[inline]
    pub fn evaluate(&self, x: &[S], out: &mut [S]) {
        let n = self.n;
        debug_assert_eq!(x.len(), n);
        debug_assert_eq!(out.len(), n);
        match &self.family {
            Family::BiotSavart => {
                let r2 = x[0] * x[0] + x[1] * x[1];
                let c = S::of(0.5) * S::FRAC_1_PI() / r2;
                out[0] = -x[1] * c;
                out[1] = x[0] * c;
            }
            Family::Aggregation => {
                let b = self.agg_coeff();
                let rmn = self.r_pow_neg(x, n); // |x|^{-n}
                for j in 0..n {
                    out[j] = -b * x[j] * rmn;
                }
            }
            Family::Mixed2d { a, b } => {
                let r2 = x[0] * x[0] + x[1] * x[1];
                let cbs = *b * S::of(0.5) * S::FRAC_1_PI() / r2;
                let cag = *a * S::of(0.5) * S::FRAC_1_PI() / r2;
                out[0] = -x[1] * cbs - x[0] * cag;
                out[1] = x[0] * cbs - x[1] * cag;
            }
            Family::Profile(g) => {
                let r = crate::math::norm(x);
                let mut u = [S::zero(); MAX_N];
                for i in 0..n {
                    u[i] = x[i] / r;
                }
                g(&u[..n], out);
                // degree 1-n extension
                let scale = r.powi(-(n as i32 - 1));
                for v in out.iter_mut() {
                    *v = *v * scale;
                }
            }
        }
    }

    /// Gradient matrix: `out[i*n + j] = d_i k_j (x)`.
    #[inline]
    pub fn gradient(&self, x: &[S], out: &mut [S]) {
        let n = self.n;
        debug_assert_eq!(out.len(), n * n);
        match &self.family {
            Family::BiotSavart => {
                let r2 = x[0] * x[0] + x[1] * x[1];
                let inv2 = S::one() / r2;
                let inv4 = inv2 * inv2;
                let c = S::of(0.5) * S::FRAC_1_PI();
                let e = [-x[1], x[0]];
                // P[i][j] = d_i e_j
                let p = [S::zero(), S::one(), -S::one(), S::zero()];
                let two = S::of(2.0);
                for i in 0..2 {
                    for j in 0..2 {
                        out[i * 2 + j] = c * (p[i * 2 + j] * inv2 - two * e[j] * x[i] * inv4);
                    }
                }
            }
            Family::Aggregation => {
                let b = self.agg_coeff();
                let rmn = self.r_pow_neg(x, n);
                let r2 = x.iter().map(|&v| v * v).sum::<S>();
                let nn = S::of_usize(n);
                for i in 0..n {
                    for j in 0..n {
                        let delta = if i == j { S::one() } else { S::zero() };
                        out[i * n + j] = -b * rmn * (delta - nn * x[i] * x[j] / r2);
                    }
                }
            }
            Family::Mixed2d { a, b } => {
                let mut gbs = [S::zero(); 4];
                let mut gag = [S::zero(); 4];
                let bs: KernelSpec<S> = KernelSpec {
                    n: 2,
                    name: String::new(),
                    family: Family::BiotSavart,
                };
                let ag: KernelSpec<S> = KernelSpec {
                    n: 2,
                    name: String::new(),
                    family: Family::Aggregation,
                };
                bs.gradient(x, &mut gbs);
                ag.gradient(x, &mut gag);
                for k in 0..4 {
                    out[k] = *a * gag[k] + *b * gbs[k];
                }
            }
            Family::Profile(_) => {
                // d_i k_j is homogeneous of degree -n: evaluate on the unit
                // sphere by central differences, rescale exactly.
                let r = crate::math::norm(x);
                let mut u = [S::zero(); MAX_N];
                for i in 0..n {
                    u[i] = x[i] / r;
                }
                let step = S::of(1e-5);
                let mut plus = [S::zero(); MAX_N];
                let mut minus = [S::zero(); MAX_N];
                let scale = r.powi(-(n as i32));
                for i in 0..n {
                    let mut xp = u;
                    let mut xm = u;
                    xp[i] += step;
                    xm[i] -= step;
                    self.evaluate(&xp[..n], &mut plus[..n]);
                    self.evaluate(&xm[..n], &mut minus[..n]);
                    for j in 0..n {
                        out[i * n + j] = scale * (plus[j] - minus[j]) / (S::of(2.0) * step);
                    }
                }
            }
        }
    }

    /// Hessian tensor: `out[(l*n + i)*n + j] = d_l d_i k_j (x)`.
    pub fn hessian(&self, x: &[S], out: &mut [S]) {
        let n = self.n;
        debug_assert_eq!(out.len(), n * n * n);
        match &self.family {
            Family::BiotSavart => {
                let r2 = x[0] * x[0] + x[1] * x[1];
                let inv4 = S::one() / (r2 * r2);
                let inv6 = inv4 / r2;
                let c = S::of(0.5) * S::FRAC_1_PI();
                let e = [-x[1], x[0]];
                let p = [S::zero(), S::one(), -S::one(), S::zero()];
                let two = S::of(2.0);
                let eight = S::of(8.0);
                for l in 0..2 {
                    for i in 0..2 {
                        for j in 0..2 {
                            let delta_il = if i == l { S::one() } else { S::zero() };
                            out[(l * 2 + i) * 2 + j] = c
                                * (-two * p[i * 2 + j] * x[l] * inv4
                                    - two * (p[l * 2 + j] * x[i] + e[j] * delta_il) * inv4
                                    + eight * e[j] * x[i] * x[l] * inv6);
                        }
                    }
                }
            }
            Family::Aggregation => {
                let b = self.agg_coeff();
                let r2 = x.iter().map(|&v| v * v).sum::<S>();
                let rmn2 = self.r_pow_neg(x, n + 2);
                let nn = S::of_usize(n);
                let np2 = S::of_usize(n + 2);
                for l in 0..n {
                    for i in 0..n {
                        for j in 0..n {
                            let d_ij = if i == j { S::one() } else { S::zero() };
                            let d_li = if l == i { S::one() } else { S::zero() };
                            let d_lj = if l == j { S::one() } else { S::zero() };
                            out[(l * n + i) * n + j] = b
                                * nn
                                * rmn2
                                * (x[l] * d_ij + x[j] * d_li + x[i] * d_lj
                                    - np2 * x[i] * x[j] * x[l] / r2);
                        }
                    }
                }
            }
            Family::Mixed2d { a, b } => {
                let mut hbs = [S::zero(); 8];
                let mut hag = [S::zero(); 8];
                let bs: KernelSpec<S> = KernelSpec {
                    n: 2,
                    name: String::new(),
                    family: Family::BiotSavart,
                };
                let ag: KernelSpec<S> = KernelSpec {
                    n: 2,
                    name: String::new(),
                    family: Family::Aggregation,
                };
                bs.hessian(x, &mut hbs);
                ag.hessian(x, &mut hag);
                for k in 0..8 {
                    out[k] = *a * hag[k] + *b * hbs[k];
                }
            }
            Family::Profile(_) => {
                // degree -n-1: central differences of the gradient on the
                // sphere, rescaled exactly.
                let r = crate::math::norm(x);
                let mut u = [S::zero(); MAX_N];
                for i in 0..n {
                    u[i] = x[i] / r;
                }
                let step = S::of(1e-4);
                let scale = r.powi(-(n as i32 + 1));
                let mut gp = vec![S::zero(); n * n];
                let mut gm = vec![S::zero(); n * n];
                for l in 0..n {
                    let mut xp = u;
                    let mut xm = u;
                    xp[l] += step;
                    xm[l] -= step;
                    self.gradient(&xp[..n], &mut gp);
                    self.gradient(&xm[..n], &mut gm);
                    for i in 0..n {
                        for j in 0..n {
                            out[(l * n + i) * n + j] =
                                scale * (gp[i * n + j] - gm[i * n + j]) / (S::of(2.0) * step);
                        }
                    }
                }
            }
        }
    }

    /// Fused `k(x)` and `d_i k_j(x)` evaluation; shares the radial powers in
    /// the builtin closed forms (the N-body loops call this per pair).
    #[inline]
    pub fn eval_and_grad(&self, x: &[S], kv: &mut [S], gv: &mut [S]) {
        let n = self.n;
        match &self.family {
            Family::BiotSavart => {
                let r2 = x[0] * x[0] + x[1] * x[1];
                let inv2 = S::one() / r2;
                let c = S::of(0.5) * S::FRAC_1_PI();
                let cinv2 = c * inv2;
                let e0 = -x[1];
                let e1 = x[0];
                kv[0] = e0 * cinv2;
                kv[1] = e1 * cinv2;
                let inv4 = inv2 * inv2;
                let two = S::of(2.0);
                gv[0] = -two * c * e0 * x[0] * inv4;
                gv[1] = c * (inv2 - two * e1 * x[0] * inv4);
                gv[2] = c * (-inv2 - two * e0 * x[1] * inv4);
                gv[3] = -two * c * e1 * x[1] * inv4;
            }
            Family::Aggregation => {
                let b = self.agg_coeff();
                let r2 = x.iter().map(|&v| v * v).sum::<S>();
                let rmn = self.r_pow_neg(x, n);
                let brmn = b * rmn;
                let nn_r2 = S::of_usize(n) / r2;
                for j in 0..n {
                    kv[j] = -brmn * x[j];
                }
                for i in 0..n {
                    for j in 0..n {
                        let delta = if i == j { S::one() } else { S::zero() };
                        gv[i * n + j] = -brmn * (delta - nn_r2 * x[i] * x[j]);
                    }
                }
            }
            _ => {
                self.evaluate(x, kv);
                self.gradient(x, gv);
            }
        }
    }

    #[inline]
    fn agg_coeff(&self) -> S {
        S::one() / (S::of_usize(self.n) * unit_ball_volume::<S>(self.n))
    }

    /// `|x|^{-p}` without going through `powf` for the small even cases.
    #[inline]
    fn r_pow_neg(&self, x: &[S], p: usize) -> S {
        let r2 = x.iter().map(|&v| v * v).sum::<S>();
        match p {
            2 => S::one() / r2,
            3 => S::one() / (r2 * r2.sqrt()),
            4 => S::one() / (r2 * r2),
            5 => S::one() / (r2 * r2 * r2.sqrt()),
            _ => r2.powf(-S::of_usize(p) / S::of(2.0)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn biot_savart_reference_value() {
        let k: KernelSpec<f64> = builtin_kernel("biot_savart", 2).unwrap();
        let mut out = [0.0; 2];
        k.evaluate(&[1.0, 0.0], &mut out);
        assert_close(out[0], 0.0, 1e-15);
        assert_close(out[1], 1.0 / (2.0 * std::f64::consts::PI), 1e-15);
    }

    #[test]
    fn aggregation_reference_value() {
        let k: KernelSpec<f64> = builtin_kernel("aggregation", 3).unwrap();
        let mut out = [0.0; 3];
        k.evaluate(&[1.0, 0.0, 0.0], &mut out);
        assert_close(out[0], -1.0 / (4.0 * std::f64::consts::PI), 1e-15);
        assert_close(out[1], 0.0, 1e-15);
        assert_close(out[2], 0.0, 1e-15);
    }

    #[test]
    fn unknown_and_incompatible_names_error() {
        assert!(builtin_kernel::<f64>("vortex", 2).is_err());
        assert!(builtin_kernel::<f64>("biot_savart", 3).is_err());
        assert!(builtin_kernel::<f64>("aggregation", 1).is_err());
    }

    fn homogeneity_residual(k: &KernelSpec<f64>, x: &[f64], lambda: f64) -> f64 {
        let n = k.dimension();
        let xs: Vec<f64> = x.iter().map(|v| v * lambda).collect();
        let mut k1 = vec![0.0; n];
        let mut k2 = vec![0.0; n];
        k.evaluate(&xs, &mut k1);
        k.evaluate(x, &mut k2);
        let scale = lambda.powi(1 - n as i32);
        let num: f64 = k1
            .iter()
            .zip(&k2)
            .map(|(a, b)| (a - scale * b).powi(2))
            .sum::<f64>()
            .sqrt();
        let den: f64 = crate::math::norm(&k2).max(1e-300);
        num / (scale * den)
    }

    #[test]
    fn builtins_are_homogeneous_of_degree_one_minus_n() {
        let cases: Vec<KernelSpec<f64>> = vec![
            builtin_kernel("biot_savart", 2).unwrap(),
            builtin_kernel("aggregation", 2).unwrap(),
            builtin_kernel("aggregation", 3).unwrap(),
            builtin_kernel("aggregation", 4).unwrap(),
            KernelSpec::mixed2d(1.0, 1.0),
        ];
        let x2 = [0.3, -0.7];
        let x3 = [0.3, -0.7, 0.45];
        let x4 = [0.3, -0.7, 0.45, 0.2];
        for k in &cases {
            let x: &[f64] = match k.dimension() {
                2 => &x2,
                3 => &x3,
                _ => &x4,
            };
            for lambda in [0.5, 2.0, 10.0] {
                assert!(
                    homogeneity_residual(k, x, lambda) <= 1e-12,
                    "kernel {} lambda {lambda}",
                    k.name()
                );
            }
        }
    }

    /// Gradient and hessian satisfy the scaling identities of degree -n and
    /// -n-1 respectively.
    #[test]
    fn derivative_homogeneity() {
        let cases: Vec<KernelSpec<f64>> = vec![
            builtin_kernel("biot_savart", 2).unwrap(),
            builtin_kernel("aggregation", 3).unwrap(),
            KernelSpec::mixed2d(0.4, -1.3),
        ];
        for k in &cases {
            let n = k.dimension();
            let x: Vec<f64> = (0..n).map(|i| 0.4 + 0.3 * i as f64).collect();
            for lambda in [0.5, 2.0, 10.0f64] {
                let xs: Vec<f64> = x.iter().map(|v| v * lambda).collect();
                let mut g1 = vec![0.0; n * n];
                let mut g2 = vec![0.0; n * n];
                k.gradient(&xs, &mut g1);
                k.gradient(&x, &mut g2);
                let s = lambda.powi(-(n as i32));
                for (a, b) in g1.iter().zip(&g2) {
                    assert!((a - s * b).abs() <= 1e-12 * (s * b.abs()).max(1e-6));
                }
                let mut h1 = vec![0.0; n * n * n];
                let mut h2 = vec![0.0; n * n * n];
                k.hessian(&xs, &mut h1);
                k.hessian(&x, &mut h2);
                let s = lambda.powi(-(n as i32) - 1);
                for (a, b) in h1.iter().zip(&h2) {
                    assert!((a - s * b).abs() <= 1e-12 * (s * b.abs()).max(1e-6));
                }
            }
        }
    }

    /// Central finite differences of `evaluate` at |x| = 1 reproduce
    /// `gradient`, and of `gradient` reproduce `hessian`.
    #[test]
    fn derivatives_consistent_with_finite_differences() {
        let cases: Vec<KernelSpec<f64>> = vec![
            builtin_kernel("biot_savart", 2).unwrap(),
            builtin_kernel("aggregation", 2).unwrap(),
            builtin_kernel("aggregation", 3).unwrap(),
            KernelSpec::mixed2d(1.0, 2.0),
        ];
        let step = 1e-5;
        for k in &cases {
            let n = k.dimension();
            let mut x: Vec<f64> = (0..n).map(|i| 1.0 + 0.2 * i as f64).collect();
            let r = crate::math::norm(&x);
            for v in &mut x {
                *v /= r;
            }
            let mut grad = vec![0.0; n * n];
            k.gradient(&x, &mut grad);
            let mut plus = vec![0.0; n];
            let mut minus = vec![0.0; n];
            for i in 0..n {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += step;
                xm[i] -= step;
                k.evaluate(&xp, &mut plus);
                k.evaluate(&xm, &mut minus);
                for j in 0..n {
                    let fd = (plus[j] - minus[j]) / (2.0 * step);
                    let scale = grad[i * n + j].abs().max(1e-3);
                    assert!(
                        (fd - grad[i * n + j]).abs() <= 1e-6 * scale,
                        "kernel {} entry ({i},{j})",
                        k.name()
                    );
                }
            }
            let mut hess = vec![0.0; n * n * n];
            k.hessian(&x, &mut hess);
            let mut gp = vec![0.0; n * n];
            let mut gm = vec![0.0; n * n];
            for l in 0..n {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[l] += step;
                xm[l] -= step;
                k.gradient(&xp, &mut gp);
                k.gradient(&xm, &mut gm);
                for i in 0..n {
                    for j in 0..n {
                        let fd = (gp[i * n + j] - gm[i * n + j]) / (2.0 * step);
                        let scale = hess[(l * n + i) * n + j].abs().max(1e-2);
                        assert!(
                            (fd - hess[(l * n + i) * n + j]).abs() <= 1e-5 * scale,
                            "kernel {} entry ({l},{i},{j})",
                            k.name()
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn fused_eval_matches_separate_calls() {
        let cases: Vec<KernelSpec<f64>> = vec![
            builtin_kernel("biot_savart", 2).unwrap(),
            builtin_kernel("aggregation", 2).unwrap(),
            builtin_kernel("aggregation", 3).unwrap(),
            KernelSpec::mixed2d(0.3, 1.1),
        ];
        for k in &cases {
            let n = k.dimension();
            let x: Vec<f64> = (0..n).map(|i| 0.7 - 0.4 * i as f64).collect();
            let mut kv1 = vec![0.0; n];
            let mut gv1 = vec![0.0; n * n];
            let mut kv2 = vec![0.0; n];
            let mut gv2 = vec![0.0; n * n];
            k.evaluate(&x, &mut kv1);
            k.gradient(&x, &mut gv1);
            k.eval_and_grad(&x, &mut kv2, &mut gv2);
            for (a, b) in kv1.iter().zip(&kv2) {
                assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0), "{}", k.name());
            }
            for (a, b) in gv1.iter().zip(&gv2) {
                assert!((a - b).abs() <= 1e-14 * a.abs().max(1.0), "{}", k.name());
            }
        }
    }

    /// A profile kernel reproducing Biot-Savart agrees with the closed form.
    #[test]
    fn profile_kernel_matches_builtin() {
        let bs: KernelSpec<f64> = builtin_kernel("biot_savart", 2).unwrap();
        let prof = KernelSpec::from_profile("bs_profile", 2, |u: &[f64], out: &mut [f64]| {
            let c = 1.0 / (2.0 * std::f64::consts::PI);
            out[0] = -u[1] * c;
            out[1] = u[0] * c;
        })
        .unwrap();
        let x = [0.6, -1.1];
        let mut a = [0.0; 2];
        let mut b = [0.0; 2];
        bs.evaluate(&x, &mut a);
        prof.evaluate(&x, &mut b);
        assert_close(a[0], b[0], 1e-12);
        assert_close(a[1], b[1], 1e-12);
        let mut ga = [0.0; 4];
        let mut gb = [0.0; 4];
        bs.gradient(&x, &mut ga);
        prof.gradient(&x, &mut gb);
        for k in 0..4 {
            assert_close(ga[k], gb[k], 1e-5 * ga[k].abs().max(1.0));
        }
    }
}
