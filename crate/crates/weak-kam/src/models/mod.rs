//! Tonelli Lagrangian models: evaluation, Legendre duality, critical values.
//!
//! A model is anything implementing [`Lagrangian`]: an action rate
//! L(x, v, t) on T^d x R^d x R that is convex and superlinear in v. Both
//! properties are hypotheses that [`check_tonelli_witnesses`] tests on
//! samples rather than enforcing symbolically. Mechanical models
//! (L = |v|^2/2 - V) expose their potential so solvers can take fast paths
//! and so the Mane critical value reduces to `max V`.

pub mod flow;
pub mod library;

use crate::error::{Error, Result};
use crate::grid::{GridTorus, Point, MAX_DIM};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Time structure of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ModelKind {
    Autonomous,
    Periodic { period: f64 },
    /// Converges to a periodic model at exponential rate `rate`.
    AsymptoticallyPeriodic { period: f64, rate: f64 },
}

impl ModelKind {
    /// Period used for slicing and window arithmetic; autonomous models are
    /// treated as 1-periodic.
    pub fn period(&self) -> f64 {
        match self {
            ModelKind::Autonomous => 1.0,
            ModelKind::Periodic { period } => *period,
            ModelKind::AsymptoticallyPeriodic { period, .. } => *period,
        }
    }

    pub fn nominal_rate(&self) -> Option<f64> {
        match self {
            ModelKind::AsymptoticallyPeriodic { rate, .. } => Some(*rate),
            _ => None,
        }
    }
}

/// An evaluable Tonelli Lagrangian on the flat torus T^d.
pub trait Lagrangian: Send + Sync {
    fn dim(&self) -> usize;

    /// Coordinate period of the underlying torus.
    fn side(&self) -> f64;

    fn kind(&self) -> ModelKind;

    /// Radius k of the a-priori velocity ball B(k).
    fn velocity_bound(&self) -> f64;

    /// Action rate L(x, v, t).
    fn eval(&self, x: Point, v: Point, t: f64) -> f64;

    /// For mechanical models L = |v|^2/2 - V(x, t): the potential V.
    fn potential(&self, _x: Point, _t: f64) -> Option<f64> {
        None
    }

    /// Gradient of the potential, when available analytically.
    fn potential_gradient(&self, _x: Point, _t: f64) -> Option<Point> {
        None
    }

    /// Closed-form Hamiltonian H(x, p, t) when known; the numeric Legendre
    /// supremum is then only a cross-check.
    fn hamiltonian_closed_form(&self, _x: Point, _p: Point, _t: f64) -> Option<f64> {
        None
    }

    /// E-L acceleration when available analytically (mechanical: -grad V).
    fn acceleration(&self, x: Point, _v: Point, t: f64) -> Option<Point> {
        self.potential_gradient(x, t).map(|g| {
            let mut a = [0.0; MAX_DIM];
            for i in 0..self.dim() {
                a[i] = -g[i];
            }
            a
        })
    }

    /// Periodic limit model for asymptotically periodic families.
    fn limit_model(&self) -> Option<&dyn Lagrangian> {
        None
    }

    /// True when the model carries a term linear in position, which is not
    /// single-valued on the torus; HJ and barrier solves must reject it.
    fn has_linear_drift(&self) -> bool {
        false
    }
}

/// Hamiltonian via closed form when present, otherwise the numeric Legendre
/// supremum.
pub fn hamiltonian(model: &dyn Lagrangian, x: Point, p: Point, t: f64, tol: f64) -> Result<f64> {
    if let Some(h) = model.hamiltonian_closed_form(x, p, t) {
        return Ok(h);
    }
    legendre_numeric(model, x, p, t, tol)
}

/// Numeric Legendre transform: sup over v in B(k) of `<p, v> - L(x, v, t)`,
/// computed by a coarse scan over the ball refined by per-axis ternary
/// search. Errors with [`Error::DualBoundExceeded`] when the maximizer sits
/// on the boundary of the ball.
pub fn legendre_numeric(
    model: &dyn Lagrangian,
    x: Point,
    p: Point,
    t: f64,
    tol: f64,
) -> Result<f64> {
    let d = model.dim();
    let k = model.velocity_bound();
    let objective = |v: Point| {
        let mut pv = 0.0;
        for a in 0..d {
            pv += p[a] * v[a];
        }
        pv - model.eval(x, v, t)
    };

    // Coarse scan over a lattice of the cube [-k, k]^d (the objective is
    // concave in v, so the cube scan also covers the inscribed ball).
    const COARSE: usize = 17;
    let step = 2.0 * k / (COARSE - 1) as f64;
    let mut best_v = [0.0; MAX_DIM];
    let mut best = f64::NEG_INFINITY;
    let lattice = (COARSE as u64).pow(d as u32);
    for q in 0..lattice {
        let mut v = [0.0; MAX_DIM];
        let mut rest = q;
        for va in v.iter_mut().take(d) {
            *va = -k + (rest % COARSE as u64) as f64 * step;
            rest /= COARSE as u64;
        }
        let f = objective(v);
        if f > best {
            best = f;
            best_v = v;
        }
    }

    // Per-axis ternary refinement, a few coordinate-descent rounds.
    let rounds = 3;
    for _ in 0..rounds {
        for a in 0..d {
            let mut lo = (best_v[a] - step).max(-k);
            let mut hi = (best_v[a] + step).min(k);
            while hi - lo > tol {
                let m1 = lo + (hi - lo) / 3.0;
                let m2 = hi - (hi - lo) / 3.0;
                let mut v1 = best_v;
                v1[a] = m1;
                let mut v2 = best_v;
                v2[a] = m2;
                if objective(v1) < objective(v2) {
                    lo = m1;
                } else {
                    hi = m2;
                }
            }
            best_v[a] = 0.5 * (lo + hi);
            let f = objective(best_v);
            if f > best {
                best = f;
            }
        }
    }

    let margin = step.max(10.0 * tol);
    for a in 0..d {
        if best_v[a].abs() >= k - margin {
            let mut speed = 0.0;
            for va in best_v.iter().take(d) {
                speed += va * va;
            }
            return Err(Error::DualBoundExceeded {
                speed: speed.sqrt(),
                bound: k,
            });
        }
    }
    Ok(best)
}

/// Spec-facing Legendre transform: closed form when the model has one, and
/// the numeric supremum otherwise.
pub fn legendre_transform(
    model: &dyn Lagrangian,
    x: Point,
    p: Point,
    t: f64,
    tol: f64,
) -> Result<f64> {
    hamiltonian(model, x, p, t, tol)
}

/// How a Mane critical value estimate was produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CriticalMethod {
    MechanicalMaxV,
    LongTimeAverage,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CriticalValueEstimate {
    pub value: f64,
    pub method: CriticalMethod,
    pub uncertainty: f64,
}

/// Estimate the Mane critical value c(L).
///
/// Autonomous mechanical models use `c = max V` directly (exact up to grid
/// sampling of V). Everything else falls back to the long-time average
/// `-min_x T_{Nc T} 0(x) / (Nc T)` with the uncertainty taken as the gap
/// between the estimates at horizons Nc and Nc/2.
pub fn estimate_critical_value(
    model: &dyn Lagrangian,
    horizon_periods: usize,
    grid: &GridTorus,
    params: &crate::semigroup::SolverParams,
    tol_c: f64,
) -> Result<CriticalValueEstimate> {
    if model.has_linear_drift() {
        return Err(Error::NonzeroDrift {
            index: 0,
            value: f64::NAN,
        });
    }
    let mechanical = model.potential([0.0; MAX_DIM], 0.0).is_some();
    if mechanical && matches!(model.kind(), ModelKind::Autonomous) {
        let mut max_v = f64::NEG_INFINITY;
        for i in 0..grid.node_count() {
            let v = model
                .potential(grid.node_point(i), 0.0)
                .expect("mechanical model");
            max_v = max_v.max(v);
        }
        return Ok(CriticalValueEstimate {
            value: max_v,
            method: CriticalMethod::MechanicalMaxV,
            uncertainty: 0.0,
        });
    }

    let period = model.kind().period();
    let n_half = (horizon_periods / 2).max(1);
    let estimate_at = |periods: usize| -> Result<f64> {
        let zero = crate::grid::ValueField::constant(
            *grid,
            crate::grid::TimePoint::new(0.0, period)?,
            0.0,
        );
        let evolved =
            crate::semigroup::lax_oleinik_apply(&zero, model, 0.0, periods as f64 * period, params)?;
        Ok(-evolved.min_value() / (periods as f64 * period))
    };
    let full = estimate_at(horizon_periods.max(2))?;
    let half = estimate_at(n_half)?;
    let uncertainty = (full - half).abs();
    if uncertainty > tol_c {
        return Err(Error::NotConverged {
            uncertainty,
            tol: tol_c,
        });
    }
    Ok(CriticalValueEstimate {
        value: full,
        method: CriticalMethod::LongTimeAverage,
        uncertainty,
    })
}

/// Wrapper model `L - c`; subtracting the critical value normalizes
/// `c(L) = 0` so that barrier and limit computations stabilize.
///
/// The wrapper does not forward `limit_model`: shift the limit separately
/// when a normalized asymptotic family is needed.
pub struct CriticalShift {
    inner: Arc<dyn Lagrangian>,
    shift: f64,
}

impl CriticalShift {
    pub fn new(inner: Arc<dyn Lagrangian>, shift: f64) -> Arc<Self> {
        Arc::new(Self { inner, shift })
    }
}

impl Lagrangian for CriticalShift {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn side(&self) -> f64 {
        self.inner.side()
    }
    fn kind(&self) -> ModelKind {
        self.inner.kind()
    }
    fn velocity_bound(&self) -> f64 {
        self.inner.velocity_bound()
    }
    fn eval(&self, x: Point, v: Point, t: f64) -> f64 {
        self.inner.eval(x, v, t) - self.shift
    }
    fn potential(&self, x: Point, t: f64) -> Option<f64> {
        self.inner.potential(x, t).map(|v| v + self.shift)
    }
    fn potential_gradient(&self, x: Point, t: f64) -> Option<Point> {
        self.inner.potential_gradient(x, t)
    }
    fn hamiltonian_closed_form(&self, x: Point, p: Point, t: f64) -> Option<f64> {
        self.inner
            .hamiltonian_closed_form(x, p, t)
            .map(|h| h + self.shift)
    }
    fn acceleration(&self, x: Point, v: Point, t: f64) -> Option<Point> {
        self.inner.acceleration(x, v, t)
    }
    fn has_linear_drift(&self) -> bool {
        self.inner.has_linear_drift()
    }
}

/// Sampled witnesses of the Tonelli hypotheses: strict midpoint convexity
/// and superlinearity in v, checked at seeded random (x, t) probes.
pub fn check_tonelli_witnesses(model: &dyn Lagrangian, samples: usize, seed: u64) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let d = model.dim();
    let k = model.velocity_bound();
    let period = model.kind().period();
    let tol = 1e-9;
    for _ in 0..samples {
        let mut x = [0.0; MAX_DIM];
        for xa in x.iter_mut().take(d) {
            *xa = rng.gen_range(0.0..model.side());
        }
        let t = rng.gen_range(0.0..4.0 * period);
        for a in 0..d {
            let v1r = rng.gen_range(-0.9 * k..0.9 * k - 0.2 * k);
            let v3r = v1r + rng.gen_range(0.1 * k..0.2 * k);
            let mk = |s: f64| {
                let mut v = [0.0; MAX_DIM];
                v[a] = s;
                model.eval(x, v, t)
            };
            let mid = mk(0.5 * (v1r + v3r));
            let chord = 0.5 * (mk(v1r) + mk(v3r));
            if mid >= chord + tol {
                return Err(Error::Invalid(format!(
                    "convexity witness failed on axis {a}: L(mid) = {mid} >= chord {chord}"
                )));
            }
            let rate_at = |s: f64| mk(s) / s.abs();
            if rate_at(k) <= rate_at(0.5 * k) {
                return Err(Error::Invalid(format!(
                    "superlinearity witness failed on axis {a}"
                )));
            }
        }
    }
    Ok(())
}

/// Default velocity bound `k = 2 (1 + sqrt(2 M))` with M the largest slow
/// action rate |L(x, 0, t)| over a coarse probe.
pub fn default_velocity_bound(
    dim: usize,
    side: f64,
    period: f64,
    eval: impl Fn(Point, Point, f64) -> f64,
) -> f64 {
    let mut m = 0.0f64;
    let probes = 64usize;
    for i in 0..probes {
        let mut x = [0.0; MAX_DIM];
        x[0] = side * i as f64 / probes as f64;
        if dim > 1 {
            x[1] = side * ((i * 7) % probes) as f64 / probes as f64;
        }
        if dim > 2 {
            x[2] = side * ((i * 13) % probes) as f64 / probes as f64;
        }
        for j in 0..8 {
            let t = period * j as f64 / 8.0;
            m = m.max(eval(x, [0.0; MAX_DIM], t).abs());
        }
    }
    2.0 * (1.0 + (2.0 * m).sqrt())
}
