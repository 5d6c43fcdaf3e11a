//! Quadrature on the unit sphere `S^{n-1}` and the kernel surface integrals
//! used by the principal-value and hypersingular operators.

use super::{unit_sphere_area, KernelError, KernelSpec};
use crate::math::{pairwise_sum, MAX_N};
use crate::scalar::Scalar;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A fixed quadrature rule on `S^{n-1}`: flat node coordinates plus one
/// weight per node. Every rule produced here is antipodally symmetric, which
/// makes odd integrands cancel in exact pairs.
pub struct SphereRule<S> {
    pub n: usize,
    pub nodes: Vec<S>,
    pub weights: Vec<S>,
}

impl<S: Scalar> SphereRule<S> {
    /// Build a rule with roughly `node_count` nodes.
    ///
    /// `n = 2`: uniform angles (spectrally accurate for smooth integrands).
    /// `n = 3`: Gauss–Legendre in the polar cosine crossed with uniform
    /// azimuth. `n >= 4`: seeded Monte Carlo directions, symmetrized.
    pub fn new(n: usize, node_count: usize) -> Result<Self, KernelError> {
        if node_count < 64 {
            return Err(KernelError::TooFewNodes(node_count));
        }
        if !(2..=MAX_N).contains(&n) {
            return Err(KernelError::UnsupportedDimension(n));
        }
        match n {
            2 => {
                let m = (node_count + 1) & !1; // even
                let w = S::of(2.0) * S::PI() / S::of_usize(m);
                let mut nodes = Vec::with_capacity(2 * m);
                for i in 0..m {
                    let theta = S::of(2.0) * S::PI() * S::of_usize(i) / S::of_usize(m);
                    nodes.push(theta.cos());
                    nodes.push(theta.sin());
                }
                Ok(SphereRule {
                    n,
                    nodes,
                    weights: vec![w; m],
                })
            }
            3 => {
                // p polar nodes x 2p azimuthal, total 2p^2 ~ node_count
                let p = (((node_count as f64) / 2.0).sqrt().ceil() as usize).max(6);
                let m = 2 * p;
                let (mu, wmu) = gauss_legendre::<S>(p);
                let wphi = S::of(2.0) * S::PI() / S::of_usize(m);
                let mut nodes = Vec::with_capacity(3 * p * m);
                let mut weights = Vec::with_capacity(p * m);
                for a in 0..p {
                    let c = mu[a];
                    let s = (S::one() - c * c).sqrt();
                    for b in 0..m {
                        let phi = S::of(2.0) * S::PI() * S::of_usize(b) / S::of_usize(m);
                        nodes.push(s * phi.cos());
                        nodes.push(s * phi.sin());
                        nodes.push(c);
                        weights.push(wmu[a] * wphi);
                    }
                }
                Ok(SphereRule { n, nodes, weights })
            }
            _ => {
                let half = node_count.div_ceil(2);
                let mut rng = ChaCha8Rng::seed_from_u64(0x5048_4552_4500 + n as u64);
                let mut nodes = Vec::with_capacity(2 * half * n);
                let w = unit_sphere_area::<S>(n) / S::of_usize(2 * half);
                for _ in 0..half {
                    // normalized Gaussian direction
                    let mut v = [0.0f64; MAX_N];
                    loop {
                        let mut r2 = 0.0;
                        for x in v[..n].iter_mut() {
                            // Box-Muller
                            let u1: f64 = rng.gen_range(1e-12..1.0);
                            let u2: f64 = rng.gen();
                            *x = (-2.0 * u1.ln()).sqrt()
                                * (2.0 * std::f64::consts::PI * u2).cos();
                            r2 += *x * *x;
                        }
                        if r2 > 1e-12 {
                            let r = r2.sqrt();
                            for x in v[..n].iter_mut() {
                                *x /= r;
                            }
                            break;
                        }
                    }
                    for &x in &v[..n] {
                        nodes.push(S::of(x));
                    }
                    for &x in &v[..n] {
                        nodes.push(S::of(-x));
                    }
                }
                Ok(SphereRule {
                    n,
                    nodes,
                    weights: vec![w; 2 * half],
                })
            }
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn node(&self, q: usize) -> &[S] {
        &self.nodes[q * self.n..(q + 1) * self.n]
    }

    /// Integrate `f` over the sphere with the fixed pairwise reduction order.
    pub fn integrate(&self, f: impl Fn(&[S]) -> S) -> S {
        pairwise_sum(self.len(), &|q| f(self.node(q)) * self.weights[q])
    }
}

/// Surface integrals of a kernel over `S^{n-1}`.
///
/// Flat layouts: `c[i*n + j] = int k_j(s) s_i dsigma`; `xi[((k*n + i)*n +
/// j)*n + l] = int d_i k_j(a) a_k a_l dsigma`; `zero_mean_residual[i*n + j] =
/// int d_i k_j dsigma` (must vanish for the singular-integral operators to be
/// well defined).
pub struct SphereIntegrals<S> {
    pub n: usize,
    pub c: Vec<S>,
    pub xi: Vec<S>,
    pub zero_mean_residual: Vec<S>,
    pub quadrature_nodes: usize,
    /// Max change of a `c` entry when the node count is doubled.
    pub refinement_delta: S,
}

impl<S: Scalar> SphereIntegrals<S> {
    /// Trace of `c`, the constant in `div v = tr(c) * rho` for kernels whose
    /// gradient trace vanishes pointwise off the origin.
    pub fn divergence_constant(&self) -> S {
        (0..self.n).map(|i| self.c[i * self.n + i]).sum()
    }
}

fn integrals_at<S: Scalar>(kernel: &KernelSpec<S>, rule: &SphereRule<S>) -> (Vec<S>, Vec<S>, Vec<S>) {
    let n = kernel.dimension();
    let mut kv = vec![S::zero(); n];
    let mut grad = vec![S::zero(); n * n];
    // accumulate per-node contributions into per-entry pairwise trees
    let count = rule.len();
    let mut kvals = vec![S::zero(); count * n];
    let mut gvals = vec![S::zero(); count * n * n];
    for q in 0..count {
        let s = rule.node(q);
        kernel.evaluate(s, &mut kv);
        kernel.gradient(s, &mut grad);
        kvals[q * n..(q + 1) * n].copy_from_slice(&kv);
        gvals[q * n * n..(q + 1) * n * n].copy_from_slice(&grad);
    }
    let mut c = vec![S::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            c[i * n + j] = pairwise_sum(count, &|q| {
                kvals[q * n + j] * rule.node(q)[i] * rule.weights[q]
            });
        }
    }
    let mut residual = vec![S::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            residual[i * n + j] =
                pairwise_sum(count, &|q| gvals[q * n * n + i * n + j] * rule.weights[q]);
        }
    }
    let mut xi = vec![S::zero(); n * n * n * n];
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                for l in 0..n {
                    xi[((k * n + i) * n + j) * n + l] = pairwise_sum(count, &|q| {
                        let a = rule.node(q);
                        gvals[q * n * n + i * n + j] * a[k] * a[l] * rule.weights[q]
                    });
                }
            }
        }
    }
    (c, xi, residual)
}

/// Compute the sphere integrals with `node_count` nodes and verify stability
/// under refinement by recomputing at twice the resolution.
///
/// For `n <= 3` (deterministic rules) the refined `c` must agree to `1e-8`;
/// the looser stochastic rules in higher dimension only record the observed
/// delta.
pub fn sphere_integrals<S: Scalar>(
    kernel: &KernelSpec<S>,
    node_count: usize,
) -> Result<SphereIntegrals<S>, KernelError> {
    let n = kernel.dimension();
    let coarse = SphereRule::new(n, node_count)?;
    let fine = SphereRule::new(n, node_count * 2)?;
    let (c, xi, residual) = integrals_at(kernel, &coarse);
    let (c2, _, _) = integrals_at(kernel, &fine);
    let mut delta = S::zero();
    for (a, b) in c.iter().zip(&c2) {
        delta = delta.max((*a - *b).abs());
    }
    if n <= 3 && delta > S::of(1e-8) {
        return Err(KernelError::NonConvergent {
            achieved: delta.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(SphereIntegrals {
        n,
        c: c2,
        xi,
        zero_mean_residual: residual,
        quadrature_nodes: fine.len(),
        refinement_delta: delta,
    })
}

/// Gauss–Legendre nodes and weights on `[-1, 1]` by Newton iteration on the
/// three-term recurrence.
pub fn gauss_legendre<S: Scalar>(p: usize) -> (Vec<S>, Vec<S>) {
    let mut nodes = vec![S::zero(); p];
    let mut weights = vec![S::zero(); p];
    for i in 0..p {
        // Chebyshev-like initial guess
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (p as f64 + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            // evaluate P_p and P'_p at x
            let mut p0 = 1.0f64;
            let mut p1 = x;
            for k in 2..=p {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            pp = p as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / pp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = S::of(x);
        weights[i] = S::of(2.0 / ((1.0 - x * x) * pp * pp));
    }
    nodes.reverse();
    weights.reverse();
    (nodes, weights)
}
