//! Built-in model families and the JSON model-specification format.
//!
//! The library covers the free model, the pendulum family
//! `v^2/2 - kappa (cos(2 pi x) - 1)`, its periodically forced variant, and
//! the asymptotically periodic family `L = Lbar - e^{-rho t} W(x)` with a
//! configurable spatial Fourier profile W.

use super::{default_velocity_bound, Lagrangian, ModelKind};
use crate::error::{Error, Result};
use crate::grid::{Point, MAX_DIM};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::sync::Arc;

/// Free motion `L = |v|^2 / 2` on T^d.
#[derive(Debug, Clone)]
pub struct FreeModel {
    dim: usize,
    side: f64,
    velocity_bound: f64,
}

impl FreeModel {
    pub fn new(dim: usize, side: f64, velocity_bound: f64) -> Self {
        Self {
            dim,
            side,
            velocity_bound,
        }
    }
}

impl Lagrangian for FreeModel {
    fn dim(&self) -> usize {
        self.dim
    }
    fn side(&self) -> f64 {
        self.side
    }
    fn kind(&self) -> ModelKind {
        ModelKind::Autonomous
    }
    fn velocity_bound(&self) -> f64 {
        self.velocity_bound
    }
    fn eval(&self, _x: Point, v: Point, _t: f64) -> f64 {
        let mut ke = 0.0;
        for va in v.iter().take(self.dim) {
            ke += va * va;
        }
        0.5 * ke
    }
    fn potential(&self, _x: Point, _t: f64) -> Option<f64> {
        Some(0.0)
    }
    fn potential_gradient(&self, _x: Point, _t: f64) -> Option<Point> {
        Some([0.0; MAX_DIM])
    }
    fn hamiltonian_closed_form(&self, _x: Point, p: Point, _t: f64) -> Option<f64> {
        let mut s = 0.0;
        for pa in p.iter().take(self.dim) {
            s += pa * pa;
        }
        Some(0.5 * s)
    }
}

/// Pendulum family on T^1 (side 1):
/// `L = v^2/2 - V(x, t)` with
/// `V(x, t) = kappa (cos(2 pi x) - 1) (1 + delta sin(2 pi t / T)) + offset`.
///
/// With `offset = 0` the potential maximum is 0 at x = 0 for every t, so the
/// critical value is 0 by construction and x = 0 carries the Aubry set.
#[derive(Debug, Clone)]
pub struct PendulumModel {
    pub kappa: f64,
    pub delta: f64,
    pub period: f64,
    pub offset: f64,
    velocity_bound: f64,
}

impl PendulumModel {
    pub fn autonomous(kappa: f64) -> Self {
        Self::forced(kappa, 0.0, 1.0)
    }

    pub fn forced(kappa: f64, delta: f64, period: f64) -> Self {
        assert!(delta.abs() < 1.0, "forcing must keep the potential sign");
        let bound = default_velocity_bound(1, 1.0, period, |x, v, t| {
            let vv = (TAU * x[0]).cos() - 1.0;
            0.5 * v[0] * v[0] - kappa * vv * (1.0 + delta * (TAU * t / period).sin())
        });
        Self {
            kappa,
            delta,
            period,
            offset: 0.0,
            velocity_bound: bound,
        }
    }

    /// Same well shifted by a constant: `V += offset` (moves the critical
    /// value to `offset`).
    pub fn with_potential_offset(kappa: f64, offset: f64) -> Self {
        let mut m = Self::autonomous(kappa);
        m.offset = offset;
        m
    }

    pub fn with_velocity_bound(mut self, k: f64) -> Self {
        self.velocity_bound = k;
        self
    }

    #[inline]
    fn well(&self, x: f64, t: f64) -> f64 {
        let modulation = if self.delta == 0.0 {
            1.0
        } else {
            1.0 + self.delta * (TAU * t / self.period).sin()
        };
        self.kappa * ((TAU * x).cos() - 1.0) * modulation + self.offset
    }
}

impl Lagrangian for PendulumModel {
    fn dim(&self) -> usize {
        1
    }
    fn side(&self) -> f64 {
        1.0
    }
    fn kind(&self) -> ModelKind {
        if self.delta == 0.0 {
            ModelKind::Autonomous
        } else {
            ModelKind::Periodic {
                period: self.period,
            }
        }
    }
    fn velocity_bound(&self) -> f64 {
        self.velocity_bound
    }
    fn eval(&self, x: Point, v: Point, t: f64) -> f64 {
        0.5 * v[0] * v[0] - self.well(x[0], t)
    }
    fn potential(&self, x: Point, t: f64) -> Option<f64> {
        Some(self.well(x[0], t))
    }
    fn potential_gradient(&self, x: Point, t: f64) -> Option<Point> {
        let modulation = if self.delta == 0.0 {
            1.0
        } else {
            1.0 + self.delta * (TAU * t / self.period).sin()
        };
        let mut g = [0.0; MAX_DIM];
        g[0] = -TAU * self.kappa * (TAU * x[0]).sin() * modulation;
        Some(g)
    }
    fn hamiltonian_closed_form(&self, x: Point, p: Point, t: f64) -> Option<f64> {
        Some(0.5 * p[0] * p[0] + self.well(x[0], t))
    }
}

/// Spatial Fourier profile `W(x) = sum amp cos(2 pi mode x / side + phase)`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SpatialFourier {
    pub terms: Vec<FourierTerm>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct FourierTerm {
    pub amplitude: f64,
    pub mode: u32,
    #[serde(default)]
    pub phase: f64,
}

impl SpatialFourier {
    pub fn single(amplitude: f64, mode: u32) -> Self {
        Self {
            terms: vec![FourierTerm {
                amplitude,
                mode,
                phase: 0.0,
            }],
        }
    }

    pub fn eval(&self, x: f64, side: f64) -> f64 {
        self.terms
            .iter()
            .map(|t| t.amplitude * (TAU * t.mode as f64 * x / side + t.phase).cos())
            .sum()
    }

    pub fn derivative(&self, x: f64, side: f64) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let w = TAU * t.mode as f64 / side;
                -t.amplitude * w * (w * x + t.phase).sin()
            })
            .sum()
    }
}

/// Asymptotically periodic family `L(x, v, t) = Lbar(x, v, t) - e^{-rho t} W(x)`.
///
/// The limit model must be mechanical on T^1; the perturbation joins the
/// potential as `V = Vbar + e^{-rho t} W`.
pub struct AsymptoticModel {
    limit: Arc<dyn Lagrangian>,
    rho: f64,
    w: SpatialFourier,
}

impl AsymptoticModel {
    pub fn new(limit: Arc<dyn Lagrangian>, rho: f64, w: SpatialFourier) -> Result<Self> {
        if !(rho > 0.0) {
            return Err(Error::Invalid(format!("decay rate rho = {rho} must be > 0")));
        }
        if limit.potential([0.0; MAX_DIM], 0.0).is_none() {
            return Err(Error::Invalid(
                "asymptotic family requires a mechanical limit model".into(),
            ));
        }
        Ok(Self { limit, rho, w })
    }

    fn decay(&self, t: f64) -> f64 {
        (-self.rho * t).exp()
    }
}

impl Lagrangian for AsymptoticModel {
    fn dim(&self) -> usize {
        self.limit.dim()
    }
    fn side(&self) -> f64 {
        self.limit.side()
    }
    fn kind(&self) -> ModelKind {
        ModelKind::AsymptoticallyPeriodic {
            period: self.limit.kind().period(),
            rate: self.rho,
        }
    }
    fn velocity_bound(&self) -> f64 {
        self.limit.velocity_bound()
    }
    fn eval(&self, x: Point, v: Point, t: f64) -> f64 {
        self.limit.eval(x, v, t) - self.decay(t) * self.w.eval(x[0], self.side())
    }
    fn potential(&self, x: Point, t: f64) -> Option<f64> {
        self.limit
            .potential(x, t)
            .map(|vb| vb + self.decay(t) * self.w.eval(x[0], self.side()))
    }
    fn potential_gradient(&self, x: Point, t: f64) -> Option<Point> {
        self.limit.potential_gradient(x, t).map(|mut g| {
            g[0] += self.decay(t) * self.w.derivative(x[0], self.side());
            g
        })
    }
    fn hamiltonian_closed_form(&self, x: Point, p: Point, t: f64) -> Option<f64> {
        self.limit
            .hamiltonian_closed_form(x, p, t)
            .map(|h| h + self.decay(t) * self.w.eval(x[0], self.side()))
    }
    fn limit_model(&self) -> Option<&dyn Lagrangian> {
        Some(self.limit.as_ref())
    }
}

// ---------------------------------------------------------------------------
// JSON model specification
// ---------------------------------------------------------------------------

/// File-loadable model description. Only library families plus parameters
/// are supported; custom analytic families are out of scope.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelSpec {
    pub family: String,
    #[serde(default)]
    pub kind: Option<String>,
    #[serde(default)]
    pub period: Option<f64>,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub params: serde_json::Map<String, serde_json::Value>,
    #[serde(default)]
    pub velocity_bound: Option<f64>,
}

impl ModelSpec {
    pub fn free() -> Self {
        Self {
            family: "free".into(),
            kind: None,
            period: None,
            rho: None,
            params: Default::default(),
            velocity_bound: None,
        }
    }

    fn param(&self, key: &str, default: f64) -> f64 {
        self.params
            .get(key)
            .and_then(|v| v.as_f64())
            .unwrap_or(default)
    }

    pub fn build(&self) -> Result<Arc<dyn Lagrangian>> {
        let period = self.period.unwrap_or(1.0);
        if !(period > 0.0) {
            return Err(Error::Invalid(format!("period {period} must be > 0")));
        }
        let model: Arc<dyn Lagrangian> = match self.family.as_str() {
            "free" => {
                let dim = self.param("dim", 1.0) as usize;
                let side = self.param("side", 1.0);
                let k = self.velocity_bound.unwrap_or(2.0);
                Arc::new(FreeModel::new(dim, side, k))
            }
            "pendulum" => {
                let kappa = self.param("kappa", 1.0);
                let mut m = PendulumModel::autonomous(kappa);
                if let Some(k) = self.velocity_bound {
                    m = m.with_velocity_bound(k);
                }
                Arc::new(m)
            }
            "forced_pendulum" => {
                let kappa = self.param("kappa", 1.0);
                let delta = self.param("delta", 0.2);
                let mut m = PendulumModel::forced(kappa, delta, period);
                if let Some(k) = self.velocity_bound {
                    m = m.with_velocity_bound(k);
                }
                Arc::new(m)
            }
            "asymptotic_pendulum" => {
                let kappa = self.param("kappa", 1.0);
                let delta = self.param("delta", 0.2);
                let rho = self
                    .rho
                    .ok_or_else(|| Error::Invalid("asymptotic_pendulum requires rho".into()))?;
                let w_amp = self.param("w_amp", 0.3);
                let w_mode = self.param("w_mode", 1.0) as u32;
                let mut limit = PendulumModel::forced(kappa, delta, period);
                if let Some(k) = self.velocity_bound {
                    limit = limit.with_velocity_bound(k);
                }
                Arc::new(AsymptoticModel::new(
                    Arc::new(limit),
                    rho,
                    SpatialFourier::single(w_amp, w_mode),
                )?)
            }
            other => {
                return Err(Error::Invalid(format!("unknown model family '{other}'")));
            }
        };
        if let Some(kind) = &self.kind {
            let declared_ok = matches!(
                (kind.as_str(), model.kind()),
                ("autonomous", ModelKind::Autonomous)
                    | ("periodic", ModelKind::Periodic { .. })
                    | ("asymptotically_periodic", ModelKind::AsymptoticallyPeriodic { .. })
            );
            if !declared_ok {
                return Err(Error::Invalid(format!(
                    "declared kind '{kind}' does not match family '{}'",
                    self.family
                )));
            }
        }
        Ok(model)
    }
}
