//! Time-series monitors for the a priori estimates: norm envelopes,
//! support growth, bilipschitz constants and the Gronwall comparison.
//!
//! Violations are recorded as flags on the offending row, never as errors:
//! a monitored bound failing is data, not a crash.

use crate::fields::estimate_holder_seeded;
use crate::flow::{velocity_and_gradient, FlowState};
use crate::kernels::{KernelSpec, SphereIntegrals};
use crate::scalar::Scalar;
use crate::singular::QuadratureConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("time series length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty record list")]
    Empty,
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// One monitored row; field order is the CSV column order.
#[derive(Clone, Debug)]
#[allow(non_snake_case)]
pub struct DiagnosticsRecord<S> {
    pub t: S,
    /// `max_q max_ij |DX_q[i][j]|`.
    pub grad_X_sup: S,
    /// Pairwise Hölder-γ seminorm estimate over the DX components.
    pub grad_X_holder: S,
    pub grad_v_sup: S,
    /// Measure of the current support, `R(t)^n`.
    pub support: S,
    /// Drift `|X(alpha*, t) - alpha*|` of the particle starting nearest the
    /// origin.
    pub x0_drift: S,
    /// `max(Lip, 1/coLip)` over the sampled pair set.
    pub bilipschitz_M: S,
    /// `exp(int_0^t grad_v_sup)`, trapezoid in time.
    pub gronwall_envelope: S,
    /// `int_0^t |rho_0|_gamma exp((1+2 gamma) int_0^s grad_v_sup) ds`
    /// with the outer constant taken as 1.
    pub G_t: S,
    pub flags: Vec<String>,
}

#[derive(Clone, Copy, Debug)]
pub struct DiagnosticsConfig<S> {
    pub gamma: S,
    /// Multiplicative slack on the asserted inequalities.
    pub slack: S,
    /// Pair samples for the Hölder / bilipschitz estimates.
    pub pair_budget: usize,
    pub seed: u64,
}

impl<S: Scalar> Default for DiagnosticsConfig<S> {
    fn default() -> Self {
        DiagnosticsConfig {
            gamma: S::of(0.5),
            slack: S::of(1.0 + 1e-2),
            pair_budget: 1 << 14,
            seed: 0,
        }
    }
}

struct InitData<S> {
    support0: S,
    rho0_sup: S,
    rho0_holder: S,
    origin_particle: usize,
}

/// Running tracker: owns the time integrals so each `record` call only needs
/// the current state.
pub struct Diagnostics<S> {
    pub cfg: DiagnosticsConfig<S>,
    init: Option<InitData<S>>,
    records: Vec<DiagnosticsRecord<S>>,
    int_grad_x: S,
    int_grad_v: S,
    g_accum: S,
}

impl<S: Scalar> Diagnostics<S> {
    pub fn new(cfg: DiagnosticsConfig<S>) -> Self {
        Diagnostics {
            cfg,
            init: None,
            records: Vec::new(),
            int_grad_x: S::zero(),
            int_grad_v: S::zero(),
            g_accum: S::zero(),
        }
    }

    pub fn records(&self) -> &[DiagnosticsRecord<S>] {
        &self.records
    }

    /// Compute all monitored quantities for the current state, check the
    /// a priori inequalities and append the row.
    pub fn record(
        &mut self,
        s: &FlowState<S>,
        k: &KernelSpec<S>,
        si: &SphereIntegrals<S>,
        qcfg: &QuadratureConfig,
    ) -> DiagnosticsRecord<S> {
        let n = s.n;
        let nn = n * n;
        let count = s.len();
        let mut grad_x_sup = S::zero();
        for &e in &s.dx {
            grad_x_sup = grad_x_sup.max(e.abs());
        }
        let masses = s.masses();
        let (_, g) = velocity_and_gradient(s, k, &si.c, &s.x, &masses, qcfg);
        let mut grad_v_sup = S::zero();
        for &e in &g {
            grad_v_sup = grad_v_sup.max(e.abs());
        }
        let support = s.support_measure();

        if self.init.is_none() {
            let mut best = (S::infinity(), 0usize);
            for q in 0..count {
                let r = crate::math::norm(&s.alpha[q * n..(q + 1) * n]);
                if r < best.0 {
                    best = (r, q);
                }
            }
            let mut rho0_sup = S::zero();
            for &v in &s.rho0 {
                rho0_sup = rho0_sup.max(v.abs());
            }
            let rho0_holder = match ScalarFieldOfRho0::build(s) {
                Some(f) => {
                    estimate_holder_seeded(&f, self.cfg.gamma, self.cfg.pair_budget, self.cfg.seed)
                        .map(|e| e.seminorm_gamma)
                        .unwrap_or(S::zero())
                }
                None => S::zero(),
            };
            self.init = Some(InitData {
                support0: support,
                rho0_sup,
                rho0_holder,
                origin_particle: best.1,
            });
        }
        let init = self.init.as_ref().unwrap();
        let q0 = init.origin_particle;
        let x0_drift = crate::math::dist(s.position(q0), &s.alpha[q0 * n..(q0 + 1) * n]);

        // gradient Hölder seminorm over the DX components, sampled pairs
        let mut grad_x_holder = S::zero();
        for e in 0..nn {
            let comp: Vec<S> = (0..count).map(|q| s.dx[q * nn + e]).collect();
            if let Ok(f) =
                crate::fields::ScalarField::from_samples(n, s.alpha.clone(), comp, s.h)
            {
                if let Ok(est) = estimate_holder_seeded(
                    &f,
                    self.cfg.gamma,
                    self.cfg.pair_budget,
                    self.cfg.seed ^ (e as u64 + 1),
                ) {
                    grad_x_holder = grad_x_holder.max(est.seminorm_gamma);
                }
            }
        }

        let bilipschitz_m = self.bilipschitz(s);

        // trapezoid accumulation against the previous row
        let (envelope, g_t) = match self.records.last() {
            None => (S::one(), S::zero()),
            Some(prev) => {
                let dt = s.t - prev.t;
                let half = dt * S::of(0.5);
                self.int_grad_v += half * (prev.grad_v_sup + grad_v_sup);
                self.int_grad_x += half * (prev.grad_X_sup + grad_x_sup);
                let gexp = S::one() + S::of(2.0) * self.cfg.gamma;
                let g_now = init.rho0_holder * (gexp * self.int_grad_v).exp();
                let g_prev = init.rho0_holder
                    * (gexp * (self.int_grad_v - half * (prev.grad_v_sup + grad_v_sup))).exp();
                self.g_accum += half * (g_prev + g_now);
                (self.int_grad_v.exp(), self.g_accum)
            }
        };

        let mut flags = Vec::new();
        if grad_x_sup > self.cfg.slack * envelope {
            flags.push("gronwall".to_string());
        }
        let hadamard = S::of_usize(n).powf(S::of_usize(n) / S::of(2.0));
        if support > hadamard * init.support0 * grad_x_sup.powi(n as i32) {
            flags.push("support_growth".to_string());
        }
        // c(n) is unquantified in the estimate; monitored with c = 1
        if x0_drift
            > init.support0.powf(S::one() / S::of_usize(n)) * init.rho0_sup * self.int_grad_x
            && x0_drift > S::of(1e-12)
        {
            flags.push("x0_drift".to_string());
        }
        if si.divergence_constant().abs() < S::of(1e-10)
            && bilipschitz_m > self.cfg.slack * envelope
        {
            flags.push("bilipschitz".to_string());
        }

        let rec = DiagnosticsRecord {
            t: s.t,
            grad_X_sup: grad_x_sup,
            grad_X_holder: grad_x_holder,
            grad_v_sup,
            support,
            x0_drift,
            bilipschitz_M: bilipschitz_m,
            gronwall_envelope: envelope,
            G_t: g_t,
            flags,
        };
        self.records.push(rec.clone());
        rec
    }

    /// Sampled pair quotients `|X_p - X_q| / |alpha_p - alpha_q|`; returns
    /// `max(sup quotient, 1/inf quotient, 1)`.
    fn bilipschitz(&self, s: &FlowState<S>) -> S {
        let n = s.n;
        let count = s.len();
        if count < 2 {
            return S::one();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x62_6c69_7073);
        let mut hi = S::one();
        let mut lo = S::one();
        for _ in 0..self.cfg.pair_budget {
            let p = rng.gen_range(0..count);
            let q = rng.gen_range(0..count);
            if p == q {
                continue;
            }
            let da = crate::math::dist(
                &s.alpha[p * n..(p + 1) * n],
                &s.alpha[q * n..(q + 1) * n],
            );
            if da == S::zero() {
                continue;
            }
            let dx = crate::math::dist(s.position(p), s.position(q));
            let quot = dx / da;
            hi = hi.max(quot);
            if quot > S::zero() {
                lo = lo.min(quot);
            }
        }
        hi.max(S::one() / lo)
    }

    /// Least-squares residual of a linear fit to `log grad_v_sup` over the
    /// recorded rows (the exponential bound's logarithm); `None` with fewer
    /// than three rows or nonpositive values.
    pub fn grad_v_log_fit_residual(&self) -> Option<S> {
        let m = self.records.len();
        if m < 3 {
            return None;
        }
        let mut xs = Vec::with_capacity(m);
        let mut ys = Vec::with_capacity(m);
        for r in &self.records {
            if r.grad_v_sup <= S::zero() {
                return None;
            }
            xs.push(r.t);
            ys.push(r.grad_v_sup.ln());
        }
        let sm = S::of_usize(m);
        let mx = xs.iter().copied().sum::<S>() / sm;
        let my = ys.iter().copied().sum::<S>() / sm;
        let mut sxx = S::zero();
        let mut sxy = S::zero();
        for i in 0..m {
            sxx += (xs[i] - mx) * (xs[i] - mx);
            sxy += (xs[i] - mx) * (ys[i] - my);
        }
        let slope = if sxx > S::zero() { sxy / sxx } else { S::zero() };
        let mut res = S::zero();
        for i in 0..m {
            let fit = my + slope * (xs[i] - mx);
            res = res.max((ys[i] - fit).abs());
        }
        Some(res)
    }
}

// rho0 over the reference positions, for the one-time seminorm estimate
struct ScalarFieldOfRho0;

impl ScalarFieldOfRho0 {
    fn build<S: Scalar>(s: &FlowState<S>) -> Option<crate::fields::ScalarField<S>> {
        crate::fields::ScalarField::from_samples(s.n, s.alpha.clone(), s.rho0.clone(), s.h).ok()
    }
}

/// Max over the grid of `u(t) / (n(t) exp int_0^t f)`, trapezoid
/// accumulation; the Gronwall lemma predicts a value at most 1 when
/// `u <= n + int f u` holds.
pub fn gronwall_compare<S: Scalar>(
    u: &[S],
    n_t: &[S],
    f: &[S],
    dt: S,
) -> Result<S, DiagnosticsError> {
    if u.len() != n_t.len() {
        return Err(DiagnosticsError::LengthMismatch(u.len(), n_t.len()));
    }
    if u.len() != f.len() {
        return Err(DiagnosticsError::LengthMismatch(u.len(), f.len()));
    }
    if u.is_empty() {
        return Err(DiagnosticsError::Empty);
    }
    let mut acc = S::zero();
    let mut best = S::neg_infinity();
    for i in 0..u.len() {
        if i > 0 {
            acc += dt * S::of(0.5) * (f[i - 1] + f[i]);
        }
        best = best.max(u[i] / (n_t[i] * acc.exp()));
    }
    Ok(best)
}

pub const CSV_COLUMNS: &str =
    "t,grad_X_sup,grad_X_holder,grad_v_sup,support,x0_drift,bilipschitz_M,gronwall_envelope,G_t,flags";

/// CSV with the versioned header `pfdiag_v1,<columns>`; floats are written
/// in shortest round-trip form so they parse back bit-identically.
pub fn emit_csv<S: Scalar>(
    records: &[DiagnosticsRecord<S>],
    path: &Path,
) -> Result<(), DiagnosticsError> {
    if records.is_empty() {
        return Err(DiagnosticsError::Empty);
    }
    let text = render_csv(records);
    std::fs::write(path, text).map_err(|source| DiagnosticsError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn render_csv<S: Scalar>(records: &[DiagnosticsRecord<S>]) -> String {
    let mut out = String::new();
    out.push_str("pfdiag_v1,");
    out.push_str(CSV_COLUMNS);
    out.push('\n');
    for r in records {
        let mut row = String::new();
        let f = |v: S| format!("{:?}", v.to_f64().unwrap_or(f64::NAN));
        row.push_str(&f(r.t));
        for v in [
            r.grad_X_sup,
            r.grad_X_holder,
            r.grad_v_sup,
            r.support,
            r.x0_drift,
            r.bilipschitz_M,
            r.gronwall_envelope,
            r.G_t,
        ] {
            row.push(',');
            row.push_str(&f(v));
        }
        row.push(',');
        row.push_str(&r.flags.join(";"));
        out.push_str(&row);
        out.push('\n');
    }
    out
}
