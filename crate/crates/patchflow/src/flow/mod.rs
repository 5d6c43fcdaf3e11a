//! Lagrangian flow-map evolution.
//!
//! The state carries particle positions `X(alpha, t)` together with the
//! Jacobians `DX = dX_j/dalpha_i`, advanced by the coupled system
//!
//! ```text
//! dX/dt  = v(X),          v = k * rho
//! dDX/dt = DX . grad v(X)
//! ```
//!
//! with `grad v` assembled from the PV gradient sum plus the sphere-matrix
//! delta term `c_{ij} rho`. Initialization is cut-cell: boundary cells of
//! the patch carry their overlap volume as quadrature weight and sit at the
//! overlap centroid, which removes the dominant O(h) boundary error of a
//! plain lattice sum.

mod inverse;

pub use inverse::{inverse_flow, transported_density, FlowHistory, InverseResult};

use crate::fields::{Aabb, GridField, ScalarField};
use crate::kernels::KernelSpec;
use crate::math::{determinant, pairwise_sum_multi, sequential_sum_multi, MAX_N};
use crate::scalar::Scalar;
use crate::singular::{QuadratureConfig, Summation};
use rayon::prelude::*;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("orientation lost: det DX = {det:e} at particle {particle}")]
    OrientationLost { particle: usize, det: f64 },
    #[error("flow history too short: {0} frames")]
    HistoryTooShort(usize),
    #[error("flow history times are not uniformly spaced")]
    NonUniformTimes,
    #[error(transparent)]
    Field(#[from] crate::fields::FieldError),
}

/// Analytic initial patch; used for cut-cell weights and for the near-field
/// subdivision of tracer velocities.
#[derive(Clone, Debug)]
pub enum PatchShape<S> {
    Ball { center: Vec<S>, radius: S },
    Annulus { center: Vec<S>, inner: S, outer: S },
}

impl<S: Scalar> PatchShape<S> {
    pub fn contains(&self, x: &[S]) -> bool {
        match self {
            PatchShape::Ball { center, radius } => {
                crate::math::dist(x, center) <= *radius
            }
            PatchShape::Annulus { center, inner, outer } => {
                let r = crate::math::dist(x, center);
                r >= *inner && r <= *outer
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    Rk4,
    Euler,
    Picard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JacobianMode {
    /// Integrate `dDX/dt = DX . grad v(X)` alongside the positions.
    Variational,
    /// Recompute `DX` from neighboring particles after each step.
    FiniteDifference,
}

#[derive(Clone, Copy, Debug)]
pub struct TimeIntegratorConfig<S> {
    /// Step size; the sign is the time direction.
    pub dt: S,
    pub scheme: Scheme,
    pub picard_iterations: usize,
    pub jacobian_mode: JacobianMode,
}

impl<S: Scalar> TimeIntegratorConfig<S> {
    pub fn rk4(dt: S) -> Self {
        TimeIntegratorConfig {
            dt,
            scheme: Scheme::Rk4,
            picard_iterations: 8,
            jacobian_mode: JacobianMode::Variational,
        }
    }
}

/// Near-field refinement for tracer velocities: source cells within
/// `near_field_cells` reference cells of the tracer are subdivided
/// `subdiv^n`-fold through the linearized flow map with the analytic patch
/// indicator deciding sub-cell membership.
#[derive(Clone, Copy, Debug)]
pub struct TracerConfig {
    pub near_field_cells: i64,
    pub subdiv: usize,
}

impl Default for TracerConfig {
    fn default() -> Self {
        TracerConfig {
            near_field_cells: 4,
            subdiv: 12,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FlowState<S> {
    pub n: usize,
    pub h: S,
    pub t: S,
    /// Lower corner of the reference lattice (cell q occupies
    /// `origin + lattice_q * h .. + h`).
    pub origin: Vec<S>,
    /// Reference positions (cell centers; overlap centroids at the patch
    /// boundary).
    pub alpha: Vec<S>,
    pub x: Vec<S>,
    /// Row-major Jacobians, `dx[q*n*n + i*n + j] = dX_j/dalpha_i`.
    pub dx: Vec<S>,
    pub det_dx: Vec<S>,
    pub rho0: Vec<S>,
    /// Quadrature weight: cell volume `h^n`, or the patch-overlap volume at
    /// boundary cells.
    pub weight: Vec<S>,
    /// Integer lattice coordinates of each particle's cell.
    pub lattice: Vec<i64>,
    pub patch: Option<PatchShape<S>>,
    /// Cell-centered coverage fractions on the full reference lattice, for
    /// density reconstruction by interpolation.
    pub rho0_grid: Option<GridField<S>>,
    pub tracer_alpha: Vec<S>,
    pub tracer_x: Vec<S>,
}

impl<S: Scalar> FlowState<S> {
    /// Cut-cell initialization of an indicator patch on a uniform lattice of
    /// spacing `h` over `extent`. Cells are classified by `subdiv^n`
    /// sub-sampling; fully exterior cells are dropped.
    pub fn init_patch(
        n: usize,
        h: S,
        extent: &Aabb<S>,
        shape: PatchShape<S>,
        subdiv: usize,
    ) -> Self {
        let sub = subdiv.max(1);
        let subcells = sub.pow(n as u32);
        let mut dims = [0usize; MAX_N];
        for i in 0..n {
            let span = (extent.hi[i] - extent.lo[i]) / h;
            dims[i] = (span.to_f64().unwrap_or(0.0) - 1e-9).ceil() as usize;
        }
        let cell_count: usize = dims[..n].iter().product();
        let hn = h.powi(n as i32);
        let mut st = FlowState {
            n,
            h,
            t: S::zero(),
            origin: extent.lo.clone(),
            alpha: Vec::new(),
            x: Vec::new(),
            dx: Vec::new(),
            det_dx: Vec::new(),
            rho0: Vec::new(),
            weight: Vec::new(),
            lattice: Vec::new(),
            patch: Some(shape),
            rho0_grid: None,
            tracer_alpha: Vec::new(),
            tracer_x: Vec::new(),
        };
        let shape = st.patch.as_ref().unwrap().clone();
        let mut grid_vals = vec![S::zero(); cell_count];
        let mut idx = [0usize; MAX_N];
        for cell in 0..cell_count {
            let mut lo = [S::zero(); MAX_N];
            for i in 0..n {
                lo[i] = extent.lo[i] + S::of_usize(idx[i]) * h;
            }
            // sub-sample the cell against the indicator
            let hs = h / S::of_usize(sub);
            let mut inside = 0usize;
            let mut centroid = [S::zero(); MAX_N];
            let mut sidx = [0usize; MAX_N];
            for _ in 0..subcells {
                let mut p = [S::zero(); MAX_N];
                for i in 0..n {
                    p[i] = lo[i] + (S::of_usize(sidx[i]) + S::of(0.5)) * hs;
                }
                if shape.contains(&p[..n]) {
                    inside += 1;
                    for i in 0..n {
                        centroid[i] += p[i];
                    }
                }
                for i in (0..n).rev() {
                    sidx[i] += 1;
                    if sidx[i] < sub {
                        break;
                    }
                    sidx[i] = 0;
                }
            }
            let frac = S::of_usize(inside) / S::of_usize(subcells);
            grid_vals[cell] = frac;
            if inside > 0 {
                for i in 0..n {
                    centroid[i] /= S::of_usize(inside);
                }
                st.alpha.extend_from_slice(&centroid[..n]);
                st.x.extend_from_slice(&centroid[..n]);
                for i in 0..n {
                    for j in 0..n {
                        st.dx.push(if i == j { S::one() } else { S::zero() });
                    }
                }
                st.det_dx.push(S::one());
                st.rho0.push(S::one());
                st.weight.push(frac * hn);
                for i in 0..n {
                    st.lattice.push(idx[i] as i64);
                }
            }
            for i in (0..n).rev() {
                idx[i] += 1;
                if idx[i] < dims[i] {
                    break;
                }
                idx[i] = 0;
            }
        }
        let mut grid_origin = extent.lo.clone();
        for (i, o) in grid_origin.iter_mut().enumerate() {
            *o = *o + h * S::of(0.5);
            let _ = i;
        }
        st.rho0_grid = Some(GridField {
            n,
            dims: dims[..n].to_vec(),
            origin: grid_origin,
            h,
            comps: 1,
            data: grid_vals,
        });
        st
    }

    /// State from scattered initial samples (unit weights `h^n`, no analytic
    /// patch, lattice indices from the nearest cell).
    pub fn init_from_samples(n: usize, h: S, points: Vec<S>, values: Vec<S>) -> Self {
        let count = values.len();
        let hn = h.powi(n as i32);
        let mut dx = Vec::with_capacity(count * n * n);
        let mut lattice = Vec::with_capacity(count * n);
        for q in 0..count {
            for i in 0..n {
                for j in 0..n {
                    dx.push(if i == j { S::one() } else { S::zero() });
                }
                let c = (points[q * n + i] / h).floor().to_f64().unwrap_or(0.0) as i64;
                lattice.push(c);
            }
        }
        FlowState {
            n,
            h,
            t: S::zero(),
            origin: vec![S::zero(); n],
            alpha: points.clone(),
            x: points,
            dx,
            det_dx: vec![S::one(); count],
            rho0: values,
            weight: vec![hn; count],
            lattice,
            patch: None,
            rho0_grid: None,
            tracer_alpha: Vec::new(),
            tracer_x: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.det_dx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.det_dx.is_empty()
    }

    pub fn position(&self, q: usize) -> &[S] {
        &self.x[q * self.n..(q + 1) * self.n]
    }

    pub fn jacobian(&self, q: usize) -> &[S] {
        &self.dx[q * self.n * self.n..(q + 1) * self.n * self.n]
    }

    /// Add a material tracer at reference position `alpha` (only meaningful
    /// at t = 0, where X = alpha).
    pub fn add_tracer(&mut self, alpha: &[S]) {
        debug_assert_eq!(alpha.len(), self.n);
        self.tracer_alpha.extend_from_slice(alpha);
        self.tracer_x.extend_from_slice(alpha);
    }

    /// Source mass of each particle: `rho0 * det DX * weight`.
    pub fn masses(&self) -> Vec<S> {
        (0..self.len())
            .map(|q| self.rho0[q] * self.det_dx[q] * self.weight[q])
            .collect()
    }

    /// Current density as a Lagrangian sample field (value `rho0`, weight
    /// `w * det DX` at the particle image).
    pub fn density_field(&self) -> Result<ScalarField<S>, FlowError> {
        let weights: Vec<S> = (0..self.len())
            .map(|q| self.weight[q] * self.det_dx[q])
            .collect();
        Ok(ScalarField::from_samples(self.n, self.x.clone(), self.rho0.clone(), self.h)?
            .with_weights(weights))
    }

    pub fn support_measure(&self) -> S {
        let thr = S::of(crate::fields::SUPPORT_THRESHOLD);
        crate::math::pairwise_sum(self.len(), &|q| {
            if self.rho0[q].abs() > thr {
                self.weight[q] * self.det_dx[q]
            } else {
                S::zero()
            }
        })
    }

    fn check_orientation(&self) -> Result<(), FlowError> {
        for (q, &d) in self.det_dx.iter().enumerate() {
            if d <= S::zero() {
                return Err(FlowError::OrientationLost {
                    particle: q,
                    det: d.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        Ok(())
    }
}

const FUSED: usize = MAX_N * (MAX_N + 1);

fn dets_of<S: Scalar>(n: usize, dx: &[S]) -> Result<Vec<S>, FlowError> {
    let nn = n * n;
    let count = dx.len() / nn;
    let mut dets = Vec::with_capacity(count);
    for q in 0..count {
        let d = determinant(&dx[q * nn..(q + 1) * nn], n);
        if d <= S::zero() {
            return Err(FlowError::OrientationLost {
                particle: q,
                det: d.to_f64().unwrap_or(f64::NAN),
            });
        }
        dets.push(d);
    }
    Ok(dets)
}

/// Plain velocity sum `v(x) = sum_q k(x - X_q) rho0_q det DX_q w_q`, the
/// discrete form of the functional `F`; coincident source terms are skipped
/// (PV convention).
pub fn velocity_from_state<S: Scalar>(
    s: &FlowState<S>,
    k: &KernelSpec<S>,
    targets: &[S],
    qcfg: &QuadratureConfig,
) -> Result<Vec<S>, FlowError> {
    s.check_orientation()?;
    let n = s.n;
    let masses = s.masses();
    let count = targets.len() / n;
    let out: Vec<Vec<S>> = (0..count)
        .into_par_iter()
        .map(|ti| {
            let x = &targets[ti * n..(ti + 1) * n];
            let acc = sum_multi::<S, MAX_N>(qcfg, s.len(), &|q, acc: &mut [S; MAX_N]| {
                let p = s.position(q);
                let mut d = [S::zero(); MAX_N];
                let mut r2 = S::zero();
                for i in 0..n {
                    d[i] = x[i] - p[i];
                    r2 += d[i] * d[i];
                }
                if r2 == S::zero() || masses[q] == S::zero() {
                    return;
                }
                let mut kv = [S::zero(); MAX_N];
                k.evaluate(&d[..n], &mut kv[..n]);
                for i in 0..n {
                    acc[i] += kv[i] * masses[q];
                }
            });
            acc[..n].to_vec()
        })
        .collect();
    Ok(out.concat())
}

#[inline]
fn sum_multi<S: Scalar, const M: usize>(
    qcfg: &QuadratureConfig,
    len: usize,
    f: &impl Fn(usize, &mut [S; M]),
) -> [S; M] {
    match qcfg.summation {
        Summation::PairwiseTree => pairwise_sum_multi(len, f),
        Summation::Sequential => sequential_sum_multi(len, f),
    }
}

/// Fused velocity + velocity-gradient evaluation at the particle images.
///
/// Returns `(v, g)` with `g[q*n*n + r*n + j] = d_r v_j (X_q)` assembled as
/// the PV gradient sum plus the delta term `c_{rj} rho(X_q)`.
///
/// The builtin kernels are odd with an even gradient, so for them the
/// double sum runs over unordered pairs (half the kernel evaluations,
/// serial deterministic order); other kernels fall back to the per-target
/// reduction.
pub fn velocity_and_gradient<S: Scalar>(
    s: &FlowState<S>,
    k: &KernelSpec<S>,
    c: &[S],
    x: &[S],
    masses: &[S],
    qcfg: &QuadratureConfig,
) -> (Vec<S>, Vec<S>) {
    let n = s.n;
    let nn = n * n;
    let eps = qcfg.epsilon(s.h);
    let eps2 = eps * eps;
    let fast = match k.family() {
        crate::kernels::Family::BiotSavart if n == 2 => Some(vg_bs2(x, masses, eps2)),
        crate::kernels::Family::Aggregation => Some(vg_agg(n, x, masses, eps2)),
        _ => None,
    };
    if let Some((v, mut g)) = fast {
        for p in 0..s.len() {
            for e in 0..nn {
                g[p * nn + e] += c[e] * s.rho0[p];
            }
        }
        return (v, g);
    }
    velocity_and_gradient_generic(s, k, c, x, masses, qcfg, eps2)
}

/// Symmetric pair loop for the 2D Biot-Savart kernel.
fn vg_bs2<S: Scalar>(x: &[S], m: &[S], eps2: S) -> (Vec<S>, Vec<S>) {
    let count = m.len();
    let cst = S::of(0.5) / S::PI();
    let mut v = vec![S::zero(); 2 * count];
    let mut g = vec![S::zero(); 4 * count];
    for p in 0..count {
        let xp0 = x[2 * p];
        let xp1 = x[2 * p + 1];
        let mp = m[p];
        let mut vp0 = S::zero();
        let mut vp1 = S::zero();
        let mut gp = [S::zero(); 4];
        for q in p + 1..count {
            let d0 = xp0 - x[2 * q];
            let d1 = xp1 - x[2 * q + 1];
            let r2 = d0 * d0 + d1 * d1;
            if r2 == S::zero() {
                continue;
            }
            let inv = S::one() / r2;
            let k0 = -cst * d1 * inv;
            let k1 = cst * d0 * inv;
            let mq = m[q];
            vp0 += k0 * mq;
            vp1 += k1 * mq;
            // k(-d) = -k(d)
            v[2 * q] -= k0 * mp;
            v[2 * q + 1] -= k1 * mp;
            if r2 > eps2 {
                // grad k(-d) = grad k(d)
                let inv2 = inv * inv;
                let g00 = (cst + cst) * d0 * d1 * inv2;
                let g01 = cst * (inv - (d0 * d0 + d0 * d0) * inv2);
                let g10 = cst * ((d1 * d1 + d1 * d1) * inv2 - inv);
                let g11 = -g00;
                gp[0] += g00 * mq;
                gp[1] += g01 * mq;
                gp[2] += g10 * mq;
                gp[3] += g11 * mq;
                g[4 * q] += g00 * mp;
                g[4 * q + 1] += g01 * mp;
                g[4 * q + 2] += g10 * mp;
                g[4 * q + 3] += g11 * mp;
            }
        }
        v[2 * p] += vp0;
        v[2 * p + 1] += vp1;
        for e in 0..4 {
            g[4 * p + e] += gp[e];
        }
    }
    (v, g)
}

/// Symmetric pair loop for the aggregation kernel, any dimension.
fn vg_agg<S: Scalar>(n: usize, x: &[S], m: &[S], eps2: S) -> (Vec<S>, Vec<S>) {
    let count = m.len();
    let nn = n * n;
    let b = S::one() / (S::of_usize(n) * crate::kernels::unit_ball_volume::<S>(n));
    let nf = S::of_usize(n);
    let mut v = vec![S::zero(); n * count];
    let mut g = vec![S::zero(); nn * count];
    let mut d = [S::zero(); MAX_N];
    for p in 0..count {
        let mp = m[p];
        let mut vp = [S::zero(); MAX_N];
        let mut gp = [S::zero(); MAX_N * MAX_N];
        for q in p + 1..count {
            let mut r2 = S::zero();
            for i in 0..n {
                d[i] = x[p * n + i] - x[q * n + i];
                r2 += d[i] * d[i];
            }
            if r2 == S::zero() {
                continue;
            }
            let inv = S::one() / r2;
            // r^{-n}
            let rn = match n {
                2 => inv,
                3 => inv / r2.sqrt(),
                4 => inv * inv,
                _ => r2.powf(-S::of_usize(n) / S::of(2.0)),
            };
            let kb = -b * rn;
            let mq = m[q];
            for i in 0..n {
                let ki = kb * d[i];
                vp[i] += ki * mq;
                v[q * n + i] -= ki * mp;
            }
            if r2 > eps2 {
                for i in 0..n {
                    for j in 0..n {
                        let delta = if i == j { S::one() } else { S::zero() };
                        let gij = kb * (delta - nf * d[i] * d[j] * inv);
                        gp[i * n + j] += gij * mq;
                        g[q * nn + i * n + j] += gij * mp;
                    }
                }
            }
        }
        for i in 0..n {
            v[p * n + i] += vp[i];
        }
        for e in 0..nn {
            g[p * nn + e] += gp[e];
        }
    }
    (v, g)
}

fn velocity_and_gradient_generic<S: Scalar>(
    s: &FlowState<S>,
    k: &KernelSpec<S>,
    c: &[S],
    x: &[S],
    masses: &[S],
    qcfg: &QuadratureConfig,
    eps2: S,
) -> (Vec<S>, Vec<S>) {
    let n = s.n;
    let nn = n * n;
    let count = s.len();
    let rows: Vec<([S; FUSED], Vec<S>)> = (0..count)
        .into_par_iter()
        .map(|p| {
            let xp = &x[p * n..(p + 1) * n];
            let acc = sum_multi::<S, FUSED>(qcfg, count, &|q, acc: &mut [S; FUSED]| {
                if q == p || masses[q] == S::zero() {
                    return;
                }
                let xq = &x[q * n..(q + 1) * n];
                let mut d = [S::zero(); MAX_N];
                let mut r2 = S::zero();
                for i in 0..n {
                    d[i] = xp[i] - xq[i];
                    r2 += d[i] * d[i];
                }
                if r2 == S::zero() {
                    return;
                }
                let mut kv = [S::zero(); MAX_N];
                let mut gv = [S::zero(); MAX_N * MAX_N];
                k.eval_and_grad(&d[..n], &mut kv[..n], &mut gv[..nn]);
                let m = masses[q];
                for i in 0..n {
                    acc[i] += kv[i] * m;
                }
                if r2 > eps2 {
                    for e in 0..nn {
                        acc[MAX_N + e] += gv[e] * m;
                    }
                }
            });
            let mut g = vec![S::zero(); nn];
            for r in 0..n {
                for j in 0..n {
                    g[r * n + j] = acc[MAX_N + r * n + j] + c[r * n + j] * s.rho0[p];
                }
            }
            (acc, g)
        })
        .collect();
    let mut v = vec![S::zero(); count * n];
    let mut g = vec![S::zero(); count * nn];
    for (p, (acc, gp)) in rows.into_iter().enumerate() {
        v[p * n..(p + 1) * n].copy_from_slice(&acc[..n]);
        g[p * nn..(p + 1) * nn].copy_from_slice(&gp);
    }
    (v, g)
}

/// Velocity at an off-lattice target with near-field subdivision: source
/// cells within `near_field_cells` reference cells of `alpha_t` are split
/// `subdiv^n`-fold through the linearized map `X_q + (a - alpha_q) DX_q`,
/// with the analytic patch indicator deciding sub-cell membership.
#[allow(clippy::too_many_arguments)]
pub fn refined_velocity<S: Scalar>(
    s: &FlowState<S>,
    k: &KernelSpec<S>,
    x: &[S],
    dx: &[S],
    dets: &[S],
    target: &[S],
    alpha_t: &[S],
    cfg: &TracerConfig,
) -> Vec<S> {
    let n = s.n;
    let nn = n * n;
    let h = s.h;
    let patch = match &s.patch {
        Some(p) => p,
        None => {
            // no analytic shape: plain sum
            let mut v = vec![S::zero(); n];
            let mut kv = [S::zero(); MAX_N];
            for q in 0..s.len() {
                let mut d = [S::zero(); MAX_N];
                let mut r2 = S::zero();
                for i in 0..n {
                    d[i] = target[i] - x[q * n + i];
                    r2 += d[i] * d[i];
                }
                if r2 == S::zero() {
                    continue;
                }
                k.evaluate(&d[..n], &mut kv[..n]);
                let m = s.rho0[q] * dets[q] * s.weight[q];
                for i in 0..n {
                    v[i] += kv[i] * m;
                }
            }
            return v;
        }
    };
    let mut cell_t = [0i64; MAX_N];
    for i in 0..n {
        cell_t[i] = ((alpha_t[i] - s.origin[i]) / h)
            .floor()
            .to_f64()
            .unwrap_or(0.0) as i64;
    }
    let sub = cfg.subdiv.max(1);
    let subcells = sub.pow(n as u32);
    let hs = h / S::of_usize(sub);
    let wsub = hs.powi(n as i32);
    let mut v = vec![S::zero(); n];
    let mut kv = [S::zero(); MAX_N];
    for q in 0..s.len() {
        let near = (0..n)
            .all(|i| (s.lattice[q * n + i] - cell_t[i]).abs() <= cfg.near_field_cells);
        if !near {
            let mut d = [S::zero(); MAX_N];
            let mut r2 = S::zero();
            for i in 0..n {
                d[i] = target[i] - x[q * n + i];
                r2 += d[i] * d[i];
            }
            if r2 == S::zero() {
                continue;
            }
            k.evaluate(&d[..n], &mut kv[..n]);
            let m = s.rho0[q] * dets[q] * s.weight[q];
            for i in 0..n {
                v[i] += kv[i] * m;
            }
            continue;
        }
        let dxq = &dx[q * nn..(q + 1) * nn];
        let aq = &s.alpha[q * n..(q + 1) * n];
        let xq = &x[q * n..(q + 1) * n];
        let mut lo = [S::zero(); MAX_N];
        for i in 0..n {
            lo[i] = s.origin[i] + S::of_usize(s.lattice[q * n + i] as usize) * h;
        }
        let m = s.rho0[q] * dets[q] * wsub;
        let mut sidx = [0usize; MAX_N];
        for _ in 0..subcells {
            let mut a = [S::zero(); MAX_N];
            for i in 0..n {
                a[i] = lo[i] + (S::of_usize(sidx[i]) + S::of(0.5)) * hs;
            }
            for i in (0..n).rev() {
                sidx[i] += 1;
                if sidx[i] < sub {
                    break;
                }
                sidx[i] = 0;
            }
            if !patch.contains(&a[..n]) {
                continue;
            }
            let mut d = [S::zero(); MAX_N];
            let mut r2 = S::zero();
            for j in 0..n {
                let mut xs = xq[j];
                for i in 0..n {
                    xs += (a[i] - aq[i]) * dxq[i * n + j];
                }
                d[j] = target[j] - xs;
                r2 += d[j] * d[j];
            }
            if r2 == S::zero() {
                continue;
            }
            k.evaluate(&d[..n], &mut kv[..n]);
            for i in 0..n {
                v[i] += kv[i] * m;
            }
        }
    }
    v
}

struct Deriv<S> {
    vx: Vec<S>,
    vdx: Vec<S>,
    vtx: Vec<S>,
}

/// RHS of the extended ODE at a stage `(x, dx, tracer_x)`.
fn eval_stage<S: Scalar>(
    s: &FlowState<S>,
    k: &KernelSpec<S>,
    c: &[S],
    x: &[S],
    dx: &[S],
    tx: &[S],
    variational: bool,
    frozen_dets: Option<&[S]>,
    qcfg: &QuadratureConfig,
    tracer_cfg: &TracerConfig,
) -> Result<Deriv<S>, FlowError> {
    let n = s.n;
    let nn = n * n;
    let dets = match frozen_dets {
        Some(d) => d.to_vec(),
        None => dets_of(n, dx)?,
    };
    let masses: Vec<S> = (0..s.len())
        .map(|q| s.rho0[q] * dets[q] * s.weight[q])
        .collect();
    let (vx, g) = velocity_and_gradient(s, k, c, x, &masses, qcfg);
    let mut vdx = vec![S::zero(); s.len() * nn];
    if variational {
        for p in 0..s.len() {
            let dxp = &dx[p * nn..(p + 1) * nn];
            let gp = &g[p * nn..(p + 1) * nn];
            for i in 0..n {
                for j in 0..n {
                    let mut acc = S::zero();
                    for r in 0..n {
                        acc += dxp[i * n + r] * gp[r * n + j];
                    }
                    vdx[p * nn + i * n + j] = acc;
                }
            }
        }
    }
    let tracer_count = tx.len() / n.max(1);
    let mut vtx = vec![S::zero(); tx.len()];
    for tr in 0..tracer_count {
        let v = refined_velocity(
            s,
            k,
            x,
            dx,
            &dets,
            &tx[tr * n..(tr + 1) * n],
            &s.tracer_alpha[tr * n..(tr + 1) * n],
            tracer_cfg,
        );
        vtx[tr * n..(tr + 1) * n].copy_from_slice(&v);
    }
    Ok(Deriv { vx, vdx, vtx })
}

fn axpy<S: Scalar>(out: &mut [S], base: &[S], scale: S, d: &[S]) {
    for ((o, &b), &v) in out.iter_mut().zip(base).zip(d) {
        *o = b + scale * v;
    }
}

/// Recompute Jacobians by lattice finite differences of the positions
/// (central where both neighbors exist, one-sided at the support boundary,
/// previous value where the particle is isolated along an axis).
fn fd_jacobian<S: Scalar>(s: &FlowState<S>, x: &[S], prev_dx: &[S]) -> Vec<S> {
    let n = s.n;
    let nn = n * n;
    let mut map: HashMap<[i64; MAX_N], usize> = HashMap::with_capacity(s.len());
    for q in 0..s.len() {
        let mut key = [0i64; MAX_N];
        for i in 0..n {
            key[i] = s.lattice[q * n + i];
        }
        map.insert(key, q);
    }
    let mut dx = prev_dx.to_vec();
    for q in 0..s.len() {
        let mut key = [0i64; MAX_N];
        for i in 0..n {
            key[i] = s.lattice[q * n + i];
        }
        for i in 0..n {
            let mut kp = key;
            let mut km = key;
            kp[i] += 1;
            km[i] -= 1;
            let qp = map.get(&kp).copied();
            let qm = map.get(&km).copied();
            let (a, b) = match (qp, qm) {
                (Some(a), Some(b)) => (a, b),
                (Some(a), None) => (a, q),
                (None, Some(b)) => (q, b),
                (None, None) => continue,
            };
            // reference spacing between the actual alpha samples (centroids
            // are not exactly h apart at the boundary)
            let da = s.alpha[a * n + i] - s.alpha[b * n + i];
            if da == S::zero() {
                continue;
            }
            for j in 0..n {
                dx[q * nn + i * n + j] = (x[a * n + j] - x[b * n + j]) / da;
            }
        }
    }
    dx
}

/// Advance the state by one step of the configured scheme.
pub fn step<S: Scalar>(
    s: &FlowState<S>,
    k: &KernelSpec<S>,
    c: &[S],
    tcfg: &TimeIntegratorConfig<S>,
    qcfg: &QuadratureConfig,
    tracer_cfg: &TracerConfig,
) -> Result<FlowState<S>, FlowError> {
    s.check_orientation()?;
    if tcfg.scheme == Scheme::Picard {
        let res = picard_iterate(s, k, c, tcfg.dt, tcfg.picard_iterations, qcfg)?;
        return Ok(res.state);
    }
    let variational = tcfg.jacobian_mode == JacobianMode::Variational;
    let frozen = (!variational).then(|| s.det_dx.clone());
    let dt = tcfg.dt;
    let mut out = s.clone();
    let ev = |x: &[S], dx: &[S], tx: &[S]| {
        eval_stage(
            s,
            k,
            c,
            x,
            dx,
            tx,
            variational,
            frozen.as_deref(),
            qcfg,
            tracer_cfg,
        )
    };
    match tcfg.scheme {
        Scheme::Euler => {
            let d1 = ev(&s.x, &s.dx, &s.tracer_x)?;
            axpy(&mut out.x, &s.x, dt, &d1.vx);
            axpy(&mut out.dx, &s.dx, dt, &d1.vdx);
            axpy(&mut out.tracer_x, &s.tracer_x, dt, &d1.vtx);
        }
        Scheme::Rk4 => {
            let half = dt * S::of(0.5);
            let d1 = ev(&s.x, &s.dx, &s.tracer_x)?;
            let mut x2 = s.x.clone();
            let mut dx2 = s.dx.clone();
            let mut tx2 = s.tracer_x.clone();
            axpy(&mut x2, &s.x, half, &d1.vx);
            axpy(&mut dx2, &s.dx, half, &d1.vdx);
            axpy(&mut tx2, &s.tracer_x, half, &d1.vtx);
            let d2 = ev(&x2, &dx2, &tx2)?;
            axpy(&mut x2, &s.x, half, &d2.vx);
            axpy(&mut dx2, &s.dx, half, &d2.vdx);
            axpy(&mut tx2, &s.tracer_x, half, &d2.vtx);
            let d3 = ev(&x2, &dx2, &tx2)?;
            axpy(&mut x2, &s.x, dt, &d3.vx);
            axpy(&mut dx2, &s.dx, dt, &d3.vdx);
            axpy(&mut tx2, &s.tracer_x, dt, &d3.vtx);
            let d4 = ev(&x2, &dx2, &tx2)?;
            let sixth = dt / S::of(6.0);
            let two = S::of(2.0);
            for idx in 0..s.x.len() {
                out.x[idx] = s.x[idx]
                    + sixth * (d1.vx[idx] + two * (d2.vx[idx] + d3.vx[idx]) + d4.vx[idx]);
            }
            for idx in 0..s.dx.len() {
                out.dx[idx] = s.dx[idx]
                    + sixth * (d1.vdx[idx] + two * (d2.vdx[idx] + d3.vdx[idx]) + d4.vdx[idx]);
            }
            for idx in 0..s.tracer_x.len() {
                out.tracer_x[idx] = s.tracer_x[idx]
                    + sixth * (d1.vtx[idx] + two * (d2.vtx[idx] + d3.vtx[idx]) + d4.vtx[idx]);
            }
        }
        Scheme::Picard => unreachable!(),
    }
    if !variational {
        out.dx = fd_jacobian(s, &out.x, &s.dx);
    }
    out.det_dx = dets_of(s.n, &out.dx)?;
    out.t = s.t + dt;
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct PicardResult<S> {
    /// Successive sup-distances `d_j = max_alpha |X^{(j+1)} - X^{(j)}|` at
    /// the horizon.
    pub distances: Vec<S>,
    /// Three consecutive increasing distances were observed.
    pub diverged: bool,
    pub state: FlowState<S>,
}

/// Picard iteration `X^{(j+1)} = X(t) + int F(X^{(j)})` on the extended
/// `(X, DX)` pair over the horizon `dt`, collocated at `{0, dt/2, dt}` with
/// fourth-order cumulative quadrature (Simpson at the endpoint).
pub fn picard_iterate<S: Scalar>(
    s: &FlowState<S>,
    k: &KernelSpec<S>,
    c: &[S],
    dt: S,
    iterations: usize,
    qcfg: &QuadratureConfig,
) -> Result<PicardResult<S>, FlowError> {
    s.check_orientation()?;
    let n = s.n;
    // constant initial guess along the horizon
    let mut xs = [s.x.clone(), s.x.clone(), s.x.clone()];
    let mut dxs = [s.dx.clone(), s.dx.clone(), s.dx.clone()];
    let mut distances = Vec::with_capacity(iterations);
    let mut increases = 0usize;
    let mut diverged = false;
    let tracer: Vec<S> = Vec::new();
    for _ in 0..iterations {
        let mut fx = Vec::with_capacity(3);
        let mut fdx = Vec::with_capacity(3);
        for m in 0..3 {
            let d = eval_stage(
                s,
                k,
                c,
                &xs[m],
                &dxs[m],
                &tracer,
                true,
                None,
                qcfg,
                &TracerConfig::default(),
            )?;
            fx.push(d.vx);
            fdx.push(d.vdx);
        }
        // cumulative quadrature: quadratic rule to the midpoint, Simpson to
        // the endpoint
        let w_mid = [
            dt * S::of(5.0 / 24.0),
            dt * S::of(8.0 / 24.0),
            -dt * S::of(1.0 / 24.0),
        ];
        let w_end = [dt / S::of(6.0), dt * S::of(4.0 / 6.0), dt / S::of(6.0)];
        let combine = |base: &[S], f: &[Vec<S>], w: &[S; 3]| -> Vec<S> {
            let mut out = base.to_vec();
            for m in 0..3 {
                for (o, &v) in out.iter_mut().zip(&f[m]) {
                    *o += w[m] * v;
                }
            }
            out
        };
        let new_x1 = combine(&s.x, &fx, &w_mid);
        let new_dx1 = combine(&s.dx, &fdx, &w_mid);
        let new_x2 = combine(&s.x, &fx, &w_end);
        let new_dx2 = combine(&s.dx, &fdx, &w_end);
        let mut d = S::zero();
        for q in 0..s.len() {
            d = d.max(crate::math::dist(
                &new_x2[q * n..(q + 1) * n],
                &xs[2][q * n..(q + 1) * n],
            ));
        }
        if let Some(&prev) = distances.last() {
            if d > prev {
                increases += 1;
                if increases >= 3 {
                    diverged = true;
                }
            } else {
                increases = 0;
            }
        }
        distances.push(d);
        xs[1] = new_x1;
        dxs[1] = new_dx1;
        xs[2] = new_x2;
        dxs[2] = new_dx2;
    }
    let mut state = s.clone();
    state.x = xs[2].clone();
    state.dx = dxs[2].clone();
    state.det_dx = dets_of(n, &state.dx)?;
    state.t = s.t + dt;
    Ok(PicardResult {
        distances,
        diverged,
        state,
    })
}

/// The discrete functional `F(X)` evaluated on explicit `(x, dx)` arrays
/// (used by the finite-difference Gâteaux oracle).
pub fn functional_f<S: Scalar>(
    s: &FlowState<S>,
    k: &KernelSpec<S>,
    x: &[S],
    dx: &[S],
    qcfg: &QuadratureConfig,
) -> Vec<S> {
    let n = s.n;
    let nn = n * n;
    let count = s.len();
    let dets: Vec<S> = (0..count)
        .map(|q| determinant(&dx[q * nn..(q + 1) * nn], n))
        .collect();
    (0..count)
        .into_par_iter()
        .flat_map_iter(|p| {
            let xp = &x[p * n..(p + 1) * n];
            let acc = sum_multi::<S, MAX_N>(qcfg, count, &|q, acc: &mut [S; MAX_N]| {
                if q == p {
                    return;
                }
                let mut d = [S::zero(); MAX_N];
                let mut r2 = S::zero();
                for i in 0..n {
                    d[i] = xp[i] - x[q * n + i];
                    r2 += d[i] * d[i];
                }
                if r2 == S::zero() {
                    return;
                }
                let mut kv = [S::zero(); MAX_N];
                k.evaluate(&d[..n], &mut kv[..n]);
                let m = s.rho0[q] * dets[q] * s.weight[q];
                for i in 0..n {
                    acc[i] += kv[i] * m;
                }
            });
            acc[..n].to_vec().into_iter()
        })
        .collect()
}

/// Directional derivative `F'(X) Y = I + II` per particle:
///
/// ```text
/// I_j  = sum grad k_j (X - X') . (Y - Y') rho0' det DX' w'
/// II_j = sum k_j (X - X') rho0' w' * d/deps det(DX' + eps DY')
/// ```
///
/// The difference factor in `I` makes the integrand integrable, so no PV
/// exclusion is applied; the coincident term is skipped.
pub fn directional_derivative_f<S: Scalar>(
    s: &FlowState<S>,
    k: &KernelSpec<S>,
    y: &[S],
    dy: &[S],
    qcfg: &QuadratureConfig,
) -> Vec<S> {
    let n = s.n;
    let nn = n * n;
    let count = s.len();
    let ddet: Vec<S> = (0..count)
        .map(|q| {
            crate::math::det_derivative(
                &s.dx[q * nn..(q + 1) * nn],
                &dy[q * nn..(q + 1) * nn],
                n,
            )
        })
        .collect();
    (0..count)
        .into_par_iter()
        .flat_map_iter(|p| {
            let xp = &s.x[p * n..(p + 1) * n];
            let yp = &y[p * n..(p + 1) * n];
            let acc = sum_multi::<S, MAX_N>(qcfg, count, &|q, acc: &mut [S; MAX_N]| {
                if q == p {
                    return;
                }
                let mut d = [S::zero(); MAX_N];
                let mut r2 = S::zero();
                for i in 0..n {
                    d[i] = xp[i] - s.x[q * n + i];
                    r2 += d[i] * d[i];
                }
                if r2 == S::zero() {
                    return;
                }
                let mut kv = [S::zero(); MAX_N];
                let mut gv = [S::zero(); MAX_N * MAX_N];
                k.eval_and_grad(&d[..n], &mut kv[..n], &mut gv[..nn]);
                let m1 = s.rho0[q] * s.det_dx[q] * s.weight[q];
                let m2 = s.rho0[q] * s.weight[q] * ddet[q];
                for j in 0..n {
                    let mut term_i = S::zero();
                    for r in 0..n {
                        term_i += gv[r * n + j] * (yp[r] - y[q * n + r]);
                    }
                    acc[j] += term_i * m1 + kv[j] * m2;
                }
            });
            acc[..n].to_vec().into_iter()
        })
        .collect()
}

pub use crate::math::det_derivative;
