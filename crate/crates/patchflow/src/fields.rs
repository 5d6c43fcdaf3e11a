//! Compactly supported sampled fields, numerical Hölder norms, support
//! measure, and the binary/CSV snapshot formats.
//!
//! Seminorm estimators inspect a finite, deterministic pair set, so they are
//! certified lower bounds of the continuum seminorms; the pair-set-level
//! inequalities (algebra, composition) hold exactly.

use crate::math::{dist, MAX_N};
use crate::scalar::Scalar;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Values with magnitude above this count as support.
pub const SUPPORT_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("field has no samples")]
    Empty,
    #[error("points/values length mismatch: {points} points vs {values} values")]
    LengthMismatch { points: usize, values: usize },
    #[error("gamma must lie in (0,1), got {0}")]
    BadGamma(f64),
    #[error("pair budget {budget} below sample count {count}")]
    BudgetTooSmall { budget: usize, count: usize },
    #[error("grid needs at least 3 nodes per axis, got {0}")]
    GridTooSmall(usize),
    #[error("spacing must be positive")]
    BadSpacing,
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: not a PFLD file")]
    BadMagic { path: String },
}

fn io_err(path: &Path, source: std::io::Error) -> FieldError {
    FieldError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Axis-aligned box.
#[derive(Clone, Debug)]
pub struct Aabb<S> {
    pub lo: Vec<S>,
    pub hi: Vec<S>,
}

impl<S: Scalar> Aabb<S> {
    pub fn new(lo: Vec<S>, hi: Vec<S>) -> Self {
        debug_assert_eq!(lo.len(), hi.len());
        Aabb { lo, hi }
    }

    pub fn cube(n: usize, half_width: S) -> Self {
        Aabb {
            lo: vec![-half_width; n],
            hi: vec![half_width; n],
        }
    }

    pub fn contains(&self, x: &[S]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&v, (&lo, &hi))| v >= lo && v <= hi)
    }

    pub fn volume(&self) -> S {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&lo, &hi)| (hi - lo).max(S::zero()))
            .fold(S::one(), |a, b| a * b)
    }

    /// Smallest box containing the listed sample points.
    pub fn hull(n: usize, points: &[S], select: impl Fn(usize) -> bool) -> Option<Self> {
        let count = points.len() / n;
        let mut lo = vec![S::infinity(); n];
        let mut hi = vec![S::neg_infinity(); n];
        let mut any = false;
        for q in 0..count {
            if !select(q) {
                continue;
            }
            any = true;
            for i in 0..n {
                let v = points[q * n + i];
                lo[i] = lo[i].min(v);
                hi[i] = hi[i].max(v);
            }
        }
        any.then_some(Aabb { lo, hi })
    }
}

/// Scalar samples at scattered locations with a reference spacing `h`.
///
/// Per-sample quadrature weights default to `h^n`; Lagrangian callers attach
/// `h^n det DX_q` (or cut-cell overlap volumes) instead.
#[derive(Clone, Debug)]
pub struct ScalarField<S> {
    n: usize,
    points: Vec<S>,
    values: Vec<S>,
    h: S,
    weights: Option<Vec<S>>,
    support_box: Aabb<S>,
}

impl<S: Scalar> ScalarField<S> {
    pub fn from_samples(
        n: usize,
        points: Vec<S>,
        values: Vec<S>,
        h: S,
    ) -> Result<Self, FieldError> {
        if values.is_empty() {
            return Err(FieldError::Empty);
        }
        if points.len() != values.len() * n {
            return Err(FieldError::LengthMismatch {
                points: points.len() / n.max(1),
                values: values.len(),
            });
        }
        if h <= S::zero() {
            return Err(FieldError::BadSpacing);
        }
        let thr = S::of(SUPPORT_THRESHOLD);
        let support_box = Aabb::hull(n, &points, |q| values[q].abs() > thr)
            .unwrap_or_else(|| Aabb::new(vec![S::zero(); n], vec![S::zero(); n]));
        Ok(ScalarField {
            n,
            points,
            values,
            h,
            weights: None,
            support_box,
        })
    }

    /// Sample `f` at the cell centers of a uniform grid of spacing `h`
    /// covering `extent`.
    pub fn from_grid(
        n: usize,
        h: S,
        extent: &Aabb<S>,
        f: impl Fn(&[S]) -> S,
    ) -> Result<Self, FieldError> {
        if h <= S::zero() {
            return Err(FieldError::BadSpacing);
        }
        let mut dims = [0usize; MAX_N];
        for i in 0..n {
            let span = (extent.hi[i] - extent.lo[i]) / h;
            // guard against 44.000000000001-type rounding of the cell count
            dims[i] = (span.to_f64().unwrap_or(0.0) - 1e-9).ceil() as usize;
            if dims[i] == 0 {
                return Err(FieldError::Empty);
            }
        }
        let count: usize = dims[..n].iter().product();
        let mut points = Vec::with_capacity(count * n);
        let mut values = Vec::with_capacity(count);
        let mut idx = [0usize; MAX_N];
        let mut x = [S::zero(); MAX_N];
        for _ in 0..count {
            for i in 0..n {
                x[i] = extent.lo[i] + (S::of_usize(idx[i]) + S::of(0.5)) * h;
            }
            points.extend_from_slice(&x[..n]);
            values.push(f(&x[..n]));
            // odometer increment, last axis fastest
            for i in (0..n).rev() {
                idx[i] += 1;
                if idx[i] < dims[i] {
                    break;
                }
                idx[i] = 0;
            }
        }
        Self::from_samples(n, points, values, h)
    }

    pub fn with_weights(mut self, weights: Vec<S>) -> Self {
        debug_assert_eq!(weights.len(), self.values.len());
        self.weights = Some(weights);
        self
    }

    pub fn dimension(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn spacing(&self) -> S {
        self.h
    }

    pub fn point(&self, q: usize) -> &[S] {
        &self.points[q * self.n..(q + 1) * self.n]
    }

    pub fn points(&self) -> &[S] {
        &self.points
    }

    pub fn value(&self, q: usize) -> S {
        self.values[q]
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn support_box(&self) -> &Aabb<S> {
        &self.support_box
    }

    /// Quadrature weight of sample `q` (`h^n` unless overridden).
    pub fn weight(&self, q: usize) -> S {
        match &self.weights {
            Some(w) => w[q],
            None => self.h.powi(self.n as i32),
        }
    }

    pub fn sup_norm(&self) -> S {
        crate::math::max_abs(&self.values)
    }
}

/// Lebesgue measure of the numerical support: sum of quadrature weights over
/// samples with `|value| > SUPPORT_THRESHOLD`.
pub fn support_measure<S: Scalar>(f: &ScalarField<S>) -> S {
    let thr = S::of(SUPPORT_THRESHOLD);
    crate::math::pairwise_sum(f.len(), &|q| {
        if f.value(q).abs() > thr {
            f.weight(q)
        } else {
            S::zero()
        }
    })
}

#[derive(Clone, Copy, Debug)]
pub struct HolderEstimate<S> {
    pub sup_norm: S,
    /// Max difference quotient over the inspected pair set: a certified
    /// lower bound of the true seminorm.
    pub seminorm_gamma: S,
    pub gamma: S,
    pub pair_budget: usize,
}

impl<S: Scalar> HolderEstimate<S> {
    /// `||f||_gamma = ||f||_sup + |f|_gamma`.
    pub fn norm(&self) -> S {
        self.sup_norm + self.seminorm_gamma
    }
}

/// Deterministic pair set: all pairs when they fit the budget, otherwise all
/// pairs within `3h` plus a seeded uniform sample of far pairs. Enlarging
/// the budget only ever adds pairs, so the estimate is monotone in it.
fn pair_max_quotient<S: Scalar>(
    f: &ScalarField<S>,
    gamma: S,
    pair_budget: usize,
    seed: u64,
) -> S {
    let m = f.len();
    let total = m * (m - 1) / 2;
    let quotient = |q: usize, r: usize| -> S {
        let d = dist(f.point(q), f.point(r));
        if d == S::zero() {
            S::zero()
        } else {
            (f.value(q) - f.value(r)).abs() / d.powf(gamma)
        }
    };
    if total <= pair_budget {
        return (0..m)
            .into_par_iter()
            .map(|q| {
                let mut best = S::zero();
                for r in q + 1..m {
                    best = best.max(quotient(q, r));
                }
                best
            })
            .reduce(S::zero, S::max);
    }
    // near pairs via cell buckets of size 3h
    let cell = S::of(3.0) * f.spacing();
    let n = f.dimension();
    let key = |x: &[S]| -> [i64; MAX_N] {
        let mut k = [0i64; MAX_N];
        for i in 0..n {
            k[i] = (x[i] / cell).floor().to_f64().unwrap_or(0.0) as i64;
        }
        k
    };
    let mut buckets: HashMap<[i64; MAX_N], Vec<usize>> = HashMap::new();
    for q in 0..m {
        buckets.entry(key(f.point(q))).or_default().push(q);
    }
    let offsets = 3usize.pow(n as u32);
    let near = (0..m)
        .into_par_iter()
        .map(|q| {
            let kq = key(f.point(q));
            let mut best = S::zero();
            for code in 0..offsets {
                let mut kk = kq;
                let mut c = code;
                for item in kk.iter_mut().take(n) {
                    *item += (c % 3) as i64 - 1;
                    c /= 3;
                }
                if let Some(list) = buckets.get(&kk) {
                    for &r in list {
                        if r > q && dist(f.point(q), f.point(r)) <= cell {
                            best = best.max(quotient(q, r));
                        }
                    }
                }
            }
            best
        })
        .reduce(S::zero, S::max);
    // seeded far-pair sample, prefix-stable in the budget
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut far = S::zero();
    for _ in 0..pair_budget {
        let q = rng.gen_range(0..m);
        let r = rng.gen_range(0..m);
        if q != r {
            far = far.max(quotient(q, r));
        }
    }
    near.max(far)
}

/// Numerical Hölder norm data of a sampled field.
pub fn estimate_holder<S: Scalar>(
    f: &ScalarField<S>,
    gamma: S,
    pair_budget: usize,
) -> Result<HolderEstimate<S>, FieldError> {
    estimate_holder_seeded(f, gamma, pair_budget, 0)
}

pub fn estimate_holder_seeded<S: Scalar>(
    f: &ScalarField<S>,
    gamma: S,
    pair_budget: usize,
    seed: u64,
) -> Result<HolderEstimate<S>, FieldError> {
    if f.is_empty() {
        return Err(FieldError::Empty);
    }
    if gamma <= S::zero() || gamma >= S::one() {
        return Err(FieldError::BadGamma(gamma.to_f64().unwrap_or(f64::NAN)));
    }
    if pair_budget < f.len() {
        return Err(FieldError::BudgetTooSmall {
            budget: pair_budget,
            count: f.len(),
        });
    }
    Ok(HolderEstimate {
        sup_norm: f.sup_norm(),
        seminorm_gamma: pair_max_quotient(f, gamma, pair_budget, seed),
        gamma,
        pair_budget,
    })
}

/// Vector field sampled on a structured grid (node-major, component-minor
/// storage; axis 0 is the slowest index).
#[derive(Clone, Debug)]
pub struct GridField<S> {
    pub n: usize,
    pub dims: Vec<usize>,
    pub origin: Vec<S>,
    pub h: S,
    pub comps: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> GridField<S> {
    pub fn sample(
        n: usize,
        dims: Vec<usize>,
        origin: Vec<S>,
        h: S,
        comps: usize,
        f: impl Fn(&[S], &mut [S]),
    ) -> Self {
        let count: usize = dims.iter().product();
        let mut data = vec![S::zero(); count * comps];
        let mut idx = [0usize; MAX_N];
        let mut x = [S::zero(); MAX_N];
        for node in 0..count {
            for i in 0..n {
                x[i] = origin[i] + S::of_usize(idx[i]) * h;
            }
            f(&x[..n], &mut data[node * comps..(node + 1) * comps]);
            for i in (0..n).rev() {
                idx[i] += 1;
                if idx[i] < dims[i] {
                    break;
                }
                idx[i] = 0;
            }
        }
        GridField {
            n,
            dims,
            origin,
            h,
            comps,
            data,
        }
    }

    pub fn node_count(&self) -> usize {
        self.dims.iter().product()
    }

    fn flat(&self, idx: &[usize]) -> usize {
        let mut f = 0;
        for i in 0..self.n {
            f = f * self.dims[i] + idx[i];
        }
        f
    }

    fn unflatten(&self, mut node: usize, idx: &mut [usize]) {
        for i in (0..self.n).rev() {
            idx[i] = node % self.dims[i];
            node /= self.dims[i];
        }
    }

    pub fn node_point(&self, node: usize, out: &mut [S]) {
        let mut idx = [0usize; MAX_N];
        self.unflatten(node, &mut idx[..self.n]);
        for i in 0..self.n {
            out[i] = self.origin[i] + S::of_usize(idx[i]) * self.h;
        }
    }

    /// Multilinear interpolation, clamped to the grid.
    pub fn value_multilinear(&self, x: &[S], out: &mut [S]) {
        let n = self.n;
        let mut base = [0usize; MAX_N];
        let mut frac = [S::zero(); MAX_N];
        for i in 0..n {
            let s = (x[i] - self.origin[i]) / self.h;
            let max_cell = self.dims[i] - 2;
            let cell = s.floor().to_f64().unwrap_or(0.0).max(0.0) as usize;
            base[i] = cell.min(max_cell);
            frac[i] = (s - S::of_usize(base[i])).max(S::zero()).min(S::one());
        }
        for v in out.iter_mut() {
            *v = S::zero();
        }
        for corner in 0..(1usize << n) {
            let mut w = S::one();
            let mut idx = [0usize; MAX_N];
            for i in 0..n {
                if corner >> i & 1 == 1 {
                    idx[i] = base[i] + 1;
                    w = w * frac[i];
                } else {
                    idx[i] = base[i];
                    w = w * (S::one() - frac[i]);
                }
            }
            let node = self.flat(&idx[..n]);
            for c in 0..self.comps {
                out[c] += w * self.data[node * self.comps + c];
            }
        }
    }

    /// Finite-difference gradient: central in the interior, one-sided on the
    /// boundary. Output component layout `j * comps + c` for `d_j F_c`.
    pub fn gradient(&self) -> Result<GridField<S>, FieldError> {
        if let Some(&d) = self.dims.iter().find(|&&d| d < 3) {
            return Err(FieldError::GridTooSmall(d));
        }
        let count = self.node_count();
        let gcomps = self.n * self.comps;
        let mut data = vec![S::zero(); count * gcomps];
        let mut idx = [0usize; MAX_N];
        let two_h = S::of(2.0) * self.h;
        for node in 0..count {
            self.unflatten(node, &mut idx[..self.n]);
            for j in 0..self.n {
                let d = self.dims[j];
                let i = idx[j];
                let (plus, minus, denom) = if i == 0 {
                    (1usize, 0usize, self.h)
                } else if i == d - 1 {
                    (d - 1, d - 2, self.h)
                } else {
                    (i + 1, i - 1, two_h)
                };
                let mut ip = idx;
                let mut im = idx;
                ip[j] = plus;
                im[j] = minus;
                let np = self.flat(&ip[..self.n]);
                let nm = self.flat(&im[..self.n]);
                for c in 0..self.comps {
                    data[node * gcomps + j * self.comps + c] =
                        (self.data[np * self.comps + c] - self.data[nm * self.comps + c]) / denom;
                }
            }
        }
        Ok(GridField {
            n: self.n,
            dims: self.dims.clone(),
            origin: self.origin.clone(),
            h: self.h,
            comps: gcomps,
            data,
        })
    }
}

/// `(||grad F||_sup, |grad F|_gamma)` of a grid-sampled vector field, both as
/// componentwise maxima of finite-difference gradients.
pub fn estimate_grad_norms<S: Scalar>(
    f: &GridField<S>,
    gamma: S,
) -> Result<(S, S), FieldError> {
    let grad = f.gradient()?;
    let sup = crate::math::max_abs(&grad.data);
    let count = grad.node_count();
    let mut points = vec![S::zero(); count * grad.n];
    for node in 0..count {
        let mut x = [S::zero(); MAX_N];
        grad.node_point(node, &mut x[..grad.n]);
        points[node * grad.n..(node + 1) * grad.n].copy_from_slice(&x[..grad.n]);
    }
    let budget = count.max(1_000_000);
    let mut sem = S::zero();
    for c in 0..grad.comps {
        let values: Vec<S> = (0..count).map(|q| grad.data[q * grad.comps + c]).collect();
        let comp = ScalarField::from_samples(grad.n, points.clone(), values, grad.h)?;
        let est = estimate_holder(&comp, gamma, budget)?;
        sem = sem.max(est.seminorm_gamma);
    }
    Ok((sup, sem))
}

/// `|F|_{1,gamma} = |F(0)| + ||grad F||_sup + |grad F|_gamma`, the origin
/// value by multilinear interpolation when 0 is not a node.
pub fn holder_c1_norm<S: Scalar>(f: &GridField<S>, gamma: S) -> Result<S, FieldError> {
    let (sup, sem) = estimate_grad_norms(f, gamma)?;
    let mut at0 = vec![S::zero(); f.comps];
    f.value_multilinear(&vec![S::zero(); f.n], &mut at0);
    Ok(crate::math::norm(&at0) + sup + sem)
}

/// Write a field snapshot: magic `PFLD`, little-endian `u32` dimension,
/// `u64` count, then `count * n` coordinates and `count` values as `f64`.
pub fn write_pfld(path: &Path, n: usize, points: &[f64], values: &[f64]) -> Result<(), FieldError> {
    debug_assert_eq!(points.len(), values.len() * n);
    let mut buf = Vec::with_capacity(16 + 8 * (points.len() + values.len()));
    buf.extend_from_slice(b"PFLD");
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for &v in points.iter().chain(values) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, &buf).map_err(|e| io_err(path, e))
}

/// Read a PFLD snapshot; returns `(n, points, values)`. Extra trailing bytes
/// (extension blocks) are ignored here and exposed through the second tuple
/// slot of [`read_pfld_ext`].
pub fn read_pfld(path: &Path) -> Result<(usize, Vec<f64>, Vec<f64>), FieldError> {
    let (n, points, values, _) = read_pfld_ext(path)?;
    Ok((n, points, values))
}

pub fn read_pfld_ext(
    path: &Path,
) -> Result<(usize, Vec<f64>, Vec<f64>, Vec<u8>), FieldError> {
    let mut file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut header = [0u8; 16];
    file.read_exact(&mut header).map_err(|e| io_err(path, e))?;
    if &header[..4] != b"PFLD" {
        return Err(FieldError::BadMagic {
            path: path.display().to_string(),
        });
    }
    let n = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
    let mut rest = Vec::new();
    file.read_to_end(&mut rest).map_err(|e| io_err(path, e))?;
    let need = 8 * count * (n + 1);
    if rest.len() < need {
        return Err(io_err(
            path,
            std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "truncated PFLD body"),
        ));
    }
    let mut doubles = rest[..need]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let points: Vec<f64> = doubles.by_ref().take(count * n).collect();
    let values: Vec<f64> = doubles.collect();
    Ok((n, points, values, rest[need..].to_vec()))
}

/// CSV form `x_1,..,x_n,value` with full round-trip precision, for small
/// fields.
pub fn write_field_csv(path: &Path, n: usize, points: &[f64], values: &[f64]) -> Result<(), FieldError> {
    let mut out = String::new();
    for i in 1..=n {
        out.push_str(&format!("x{i},"));
    }
    out.push_str("value\n");
    for (q, v) in values.iter().enumerate() {
        for i in 0..n {
            out.push_str(&format!("{:?},", points[q * n + i]));
        }
        out.push_str(&format!("{v:?}\n"));
    }
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_samples(f: impl Fn(f64) -> f64, m: usize) -> ScalarField<f64> {
        let h = 2.0 / (m - 1) as f64;
        let points: Vec<f64> = (0..m).map(|i| -1.0 + i as f64 * h).collect();
        let values: Vec<f64> = points.iter().map(|&x| f(x)).collect();
        ScalarField::from_samples(1, points, values, h).unwrap()
    }

    #[test]
    fn constant_field_norms() {
        let f = line_samples(|_| 1.0, 41);
        let est = estimate_holder(&f, 0.5, 10_000).unwrap();
        assert_eq!(est.sup_norm, 1.0);
        assert_eq!(est.seminorm_gamma, 0.0);
    }

    /// `|x|^{1/2}` has exact C^{1/2} seminorm 1 on [-1,1], attained through
    /// the origin; brute-force all-pairs oracle on 201 samples.
    #[test]
    fn sqrt_abs_seminorm_near_one() {
        let m = 201;
        let f = line_samples(|x| x.abs().sqrt(), m);
        // independent oracle: plain double loop
        let mut oracle = 0.0f64;
        for q in 0..m {
            for r in q + 1..m {
                let d = (f.point(q)[0] - f.point(r)[0]).abs();
                if d > 0.0 {
                    oracle = oracle.max((f.value(q) - f.value(r)).abs() / d.sqrt());
                }
            }
        }
        let est = estimate_holder(&f, 0.5, m * m).unwrap();
        assert!((est.seminorm_gamma - oracle).abs() < 1e-14);
        assert!((est.seminorm_gamma - 1.0).abs() < 0.05, "{}", est.seminorm_gamma);
        assert!(est.seminorm_gamma <= 1.0 + 1e-12); // lower bound property
    }

    /// A jump sampled at spacing h has difference quotient h^{-gamma} over
    /// the adjacent pair: the estimator detects non-Hölder growth.
    #[test]
    fn jump_seminorm_grows_as_h_shrinks() {
        let m = 201; // spacing 0.01 on [-1,1]
        let f = line_samples(|x| if (0.0..=1.0).contains(&x) { 1.0 } else { 0.0 }, m);
        let est = estimate_holder(&f, 0.5, m * m).unwrap();
        // 1/sqrt(0.01) = 10 up to the rounding of the spacing itself
        assert!(est.seminorm_gamma >= 10.0 * (1.0 - 1e-12), "{}", est.seminorm_gamma);
    }

    #[test]
    fn holder_rejects_bad_inputs() {
        let f = line_samples(|x| x, 11);
        assert!(estimate_holder(&f, 1.5, 1000).is_err());
        assert!(estimate_holder(&f, 0.5, 5).is_err());
    }

    #[test]
    fn seminorm_monotone_in_budget() {
        // 2D cloud big enough that small budgets trigger the sampled path
        let mut points = Vec::new();
        let mut values = Vec::new();
        let m = 40;
        for i in 0..m {
            for j in 0..m {
                let x = i as f64 * 0.05;
                let y = j as f64 * 0.05;
                points.push(x);
                points.push(y);
                values.push((3.0 * x).sin() * (2.0 * y).cos());
            }
        }
        let f = ScalarField::from_samples(2, points, values, 0.05).unwrap();
        let mut prev = 0.0;
        for budget in [1600, 10_000, 100_000, 2_000_000] {
            let est = estimate_holder(&f, 0.4, budget).unwrap();
            assert!(
                est.seminorm_gamma >= prev - 1e-15,
                "budget {budget}: {} < {prev}",
                est.seminorm_gamma
            );
            prev = est.seminorm_gamma;
        }
    }

    #[test]
    fn grad_norms_identity_and_linear() {
        let f = GridField::<f64>::sample(2, vec![21, 21], vec![-1.0, -1.0], 0.1, 2, |x, out| {
            out.copy_from_slice(x);
        });
        let (sup, sem) = estimate_grad_norms(&f, 0.5).unwrap();
        assert!((sup - 1.0).abs() < 1e-12);
        assert!(sem < 1e-10);

        let a: [[f64; 2]; 2] = [[0.3, -1.7], [0.9, 0.4]];
        let g = GridField::sample(2, vec![21, 21], vec![-1.0, -1.0], 0.1, 2, |x, out| {
            for (i, o) in out.iter_mut().enumerate() {
                *o = a[i][0] * x[0] + a[i][1] * x[1];
            }
        });
        let (sup, sem) = estimate_grad_norms(&g, 0.5).unwrap();
        assert!((sup - 1.7).abs() < 1e-12);
        assert!(sem < 1e-9);
    }

    #[test]
    fn grad_norms_sin_field() {
        // F = (sin x1, x2); ||grad F|| = 1, attained at x1 = 0
        let h = 1e-2;
        let half = (std::f64::consts::PI / h).floor() as usize;
        let d = 2 * half + 1; // node exactly at the origin
        let o = -(half as f64) * h;
        let f = GridField::sample(2, vec![d, 31], vec![o, -0.15], h, 2, |x, out| {
            out[0] = x[0].sin();
            out[1] = x[1];
        });
        let grad = f.gradient().unwrap();
        let sup = crate::math::max_abs(&grad.data);
        assert!((sup - 1.0).abs() < 1e-4, "{sup}");
    }

    #[test]
    fn grad_norms_reject_tiny_grid() {
        let f = GridField::sample(2, vec![2, 5], vec![0.0, 0.0], 0.1, 1, |_, out| {
            out[0] = 0.0;
        });
        assert!(f.gradient().is_err());
    }

    #[test]
    fn multilinear_interpolation_reproduces_linear_fields() {
        let f = GridField::sample(2, vec![11, 11], vec![-1.0, -1.0], 0.2, 1, |x, out| {
            out[0] = 2.0 * x[0] - 3.0 * x[1] + 0.5;
        });
        let mut out = [0.0];
        for probe in [[0.13f64, -0.41], [0.0, 0.0], [-0.95, 0.77]] {
            f.value_multilinear(&probe, &mut out);
            let exact = 2.0 * probe[0] - 3.0 * probe[1] + 0.5;
            assert!((out[0] - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn support_measure_ball_volumes() {
        let ball3 = ScalarField::from_grid(3, 0.05, &Aabb::cube(3, 1.2), |x| {
            if crate::math::norm(x) <= 1.0 {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let vol = support_measure(&ball3);
        let exact = 4.0 * std::f64::consts::PI / 3.0;
        assert!((vol - exact).abs() < 0.01 * exact, "{vol} vs {exact}");

        let disk = ScalarField::from_grid(2, 0.02, &Aabb::cube(2, 1.1), |x| {
            if crate::math::norm(x) <= 1.0 {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let area = support_measure(&disk);
        assert!(
            (area - std::f64::consts::PI).abs() < 0.005 * std::f64::consts::PI,
            "{area}"
        );
    }

    #[test]
    fn support_measure_zero_field() {
        let f = line_samples(|_| 0.0, 11);
        assert_eq!(support_measure(&f), 0.0);
    }

    #[test]
    fn support_box_tracks_nonzero_samples() {
        let f = line_samples(|x| if x.abs() <= 0.5 { 1.0 } else { 0.0 }, 201);
        let b = f.support_box();
        assert!(b.lo[0] >= -0.51 && b.lo[0] <= -0.49);
        assert!(b.hi[0] >= 0.49 && b.hi[0] <= 0.51);
    }

    #[test]
    fn pfld_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.pfld");
        let points = vec![0.1, 0.2, -0.3, 0.4, 1.0e-17, -5.5];
        let values = vec![1.0, std::f64::consts::PI, -0.0];
        write_pfld(&path, 2, &points, &values).unwrap();
        let (n, p2, v2) = read_pfld(&path).unwrap();
        assert_eq!(n, 2);
        assert_eq!(points, p2);
        assert_eq!(
            values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            v2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn pfld_rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pfld");
        std::fs::write(&path, b"NOPExxxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(read_pfld(&path), Err(FieldError::BadMagic { .. })));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        fn field_from(vals: &[f64]) -> ScalarField<f64> {
            let h = 0.1;
            let points: Vec<f64> = (0..vals.len()).map(|i| i as f64 * h).collect();
            ScalarField::from_samples(1, points, vals.to_vec(), h).unwrap()
        }

        proptest! {
            /// Pair-set algebra inequality: sem(fg) <= sup|f| sem(g) +
            /// sem(f) sup|g| over the same (all-pairs) set.
            #[test]
            fn algebra_inequality(
                f in prop::collection::vec(-2.0..2.0f64, 5..25),
                g_seed in 0u64..1000,
            ) {
                let m = f.len();
                let mut rng = ChaCha8Rng::seed_from_u64(g_seed);
                let g: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let fg: Vec<f64> = f.iter().zip(&g).map(|(a, b)| a * b).collect();
                let gamma = 0.5;
                let budget = m * m;
                let ef = estimate_holder(&field_from(&f), gamma, budget).unwrap();
                let eg = estimate_holder(&field_from(&g), gamma, budget).unwrap();
                let efg = estimate_holder(&field_from(&fg), gamma, budget).unwrap();
                let bound = ef.sup_norm * eg.seminorm_gamma + ef.seminorm_gamma * eg.sup_norm;
                prop_assert!(efg.seminorm_gamma <= bound * (1.0 + 1e-12) + 1e-14);
            }

            /// Pair-set composition inequality: sem(f o X) <= |f|_gamma *
            /// Lip(X)^gamma with the Lipschitz quotient over the same pairs.
            #[test]
            fn composition_inequality(
                xvals in prop::collection::vec(-3.0..3.0f64, 5..20),
                scale in 0.1..4.0f64,
            ) {
                let m = xvals.len();
                let gamma = 0.5f64;
                // f(u) = |u|^{1/2} * scale has |f|_gamma <= scale on the range
                let fvals: Vec<f64> = xvals.iter().map(|&x| scale * x.abs().sqrt()).collect();
                let comp = field_from(&fvals);
                let xmap = field_from(&xvals);
                let ecomp = estimate_holder(&comp, gamma, m * m).unwrap();
                // max Lipschitz quotient of X over the same pair set
                let mut lip = 0.0f64;
                for q in 0..m {
                    for r in q + 1..m {
                        let d = (xmap.point(q)[0] - xmap.point(r)[0]).abs();
                        if d > 0.0 {
                            lip = lip.max((xvals[q] - xvals[r]).abs() / d);
                        }
                    }
                }
                let bound = scale * lip.powf(gamma);
                prop_assert!(ecomp.seminorm_gamma <= bound * (1.0 + 1e-10) + 1e-12);
            }
        }
    }
}
