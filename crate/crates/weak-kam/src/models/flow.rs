//! Euler-Lagrange flow integration and monodromy analysis.
//!
//! Trajectories are integrated with the classical 4th-order one-step method
//! on the first-order system (x, v), with coordinates tracked on the
//! covering space R^d (never wrapped). Mechanical models supply the
//! acceleration -grad V analytically; anything else falls through to a
//! finite-difference Euler-Lagrange right-hand side.

use super::Lagrangian;
use crate::error::{Error, Result};
use crate::grid::{Point, MAX_DIM};
use nalgebra::{Complex, DMatrix, DVector};

/// Integrated curve with lifted (covering space) coordinates.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<(Point, Point)>,
    pub lifted: bool,
}

impl Trajectory {
    pub fn start(&self) -> (Point, Point) {
        self.states[0]
    }

    pub fn end(&self) -> (Point, Point) {
        *self.states.last().expect("non-empty trajectory")
    }

    /// Check the speed-limit invariant |dx| <= k |dt| + tol on every segment.
    pub fn validate(&self, dim: usize, velocity_bound: f64, tol: f64) -> Result<()> {
        for i in 1..self.states.len() {
            let dt = (self.times[i] - self.times[i - 1]).abs();
            let mut dx = 0.0;
            for a in 0..dim {
                let d = self.states[i].0[a] - self.states[i - 1].0[a];
                dx += d * d;
            }
            let dx = dx.sqrt();
            if dx > velocity_bound * dt + tol {
                return Err(Error::Invalid(format!(
                    "segment {i} moved {dx:.3e} in {dt:.3e}, above the speed limit"
                )));
            }
        }
        Ok(())
    }
}

#[inline]
fn speed(v: &Point, dim: usize) -> f64 {
    let mut s = 0.0;
    for va in v.iter().take(dim) {
        s += va * va;
    }
    s.sqrt()
}

/// Acceleration: analytic when the model provides one, otherwise the
/// finite-difference Euler-Lagrange system
/// `(d2L/dv2) a = dL/dx - (d2L/dvdx) v - (d2L/dvdt)`.
fn acceleration(model: &dyn Lagrangian, x: Point, v: Point, t: f64) -> Point {
    if let Some(a) = model.acceleration(x, v, t) {
        return a;
    }
    fd_acceleration(model, x, v, t)
}

fn fd_acceleration(model: &dyn Lagrangian, x: Point, v: Point, t: f64) -> Point {
    let d = model.dim();
    let hx = 1e-5 * model.side();
    let hv = 1e-4 * (1.0 + speed(&v, d));
    let ht = 1e-5;
    let l = |x: Point, v: Point, t: f64| model.eval(x, v, t);

    // dL/dx by central differences.
    let mut dl_dx = DVector::zeros(d);
    for a in 0..d {
        let mut xp = x;
        xp[a] += hx;
        let mut xm = x;
        xm[a] -= hx;
        dl_dx[a] = (l(xp, v, t) - l(xm, v, t)) / (2.0 * hx);
    }

    // Hessian in v and the mixed second derivatives.
    let mut mass = DMatrix::zeros(d, d);
    let mut mixed_x = DMatrix::zeros(d, d); // d2L / dv_a dx_b
    let mut mixed_t = DVector::zeros(d);
    for a in 0..d {
        for b in 0..d {
            let mut vpp = v;
            let mut vpm = v;
            let mut vmp = v;
            let mut vmm = v;
            if a == b {
                vpp[a] += hv;
                vmm[a] -= hv;
                mass[(a, b)] = (l(x, vpp, t) - 2.0 * l(x, v, t) + l(x, vmm, t)) / (hv * hv);
            } else {
                vpp[a] += hv;
                vpp[b] += hv;
                vpm[a] += hv;
                vpm[b] -= hv;
                vmp[a] -= hv;
                vmp[b] += hv;
                vmm[a] -= hv;
                vmm[b] -= hv;
                mass[(a, b)] =
                    (l(x, vpp, t) - l(x, vpm, t) - l(x, vmp, t) + l(x, vmm, t)) / (4.0 * hv * hv);
            }
            let mut vp = v;
            vp[a] += hv;
            let mut vm = v;
            vm[a] -= hv;
            let mut xp = x;
            xp[b] += hx;
            let mut xm = x;
            xm[b] -= hx;
            mixed_x[(a, b)] = (l(xp, vp, t) - l(xm, vp, t) - l(xp, vm, t) + l(xm, vm, t))
                / (4.0 * hv * hx);
        }
        let mut vp = v;
        vp[a] += hv;
        let mut vm = v;
        vm[a] -= hv;
        mixed_t[a] = (l(x, vp, t + ht) - l(x, vm, t + ht) - l(x, vp, t - ht) + l(x, vm, t - ht))
            / (4.0 * hv * ht);
    }

    let mut rhs = dl_dx - mixed_t;
    let vvec = DVector::from_fn(d, |a, _| v[a]);
    rhs -= &mixed_x * vvec;
    let sol = mass
        .lu()
        .solve(&rhs)
        .unwrap_or_else(|| DVector::zeros(d));
    let mut out = [0.0; MAX_DIM];
    for a in 0..d {
        out[a] = sol[a];
    }
    out
}

struct StepOutput {
    x: Point,
    v: Point,
    action: f64,
}

/// One RK4 step of the augmented system (x, v, action).
fn rk4_step(model: &dyn Lagrangian, x: Point, v: Point, t: f64, dt: f64) -> StepOutput {
    let d = model.dim();
    let f = |x: Point, v: Point, t: f64| -> (Point, Point, f64) {
        (v, acceleration(model, x, v, t), model.eval(x, v, t))
    };
    let add = |x: Point, dx: Point, s: f64| -> Point {
        let mut out = x;
        for a in 0..d {
            out[a] += s * dx[a];
        }
        out
    };

    let (k1x, k1v, k1a) = f(x, v, t);
    let (k2x, k2v, k2a) = f(add(x, k1x, 0.5 * dt), add(v, k1v, 0.5 * dt), t + 0.5 * dt);
    let (k3x, k3v, k3a) = f(add(x, k2x, 0.5 * dt), add(v, k2v, 0.5 * dt), t + 0.5 * dt);
    let (k4x, k4v, k4a) = f(add(x, k3x, dt), add(v, k3v, dt), t + dt);

    let mut nx = x;
    let mut nv = v;
    for a in 0..d {
        nx[a] += dt / 6.0 * (k1x[a] + 2.0 * k2x[a] + 2.0 * k3x[a] + k4x[a]);
        nv[a] += dt / 6.0 * (k1v[a] + 2.0 * k2v[a] + 2.0 * k3v[a] + k4v[a]);
    }
    StepOutput {
        x: nx,
        v: nv,
        action: dt / 6.0 * (k1a + 2.0 * k2a + 2.0 * k3a + k4a),
    }
}

/// Integrate the Euler-Lagrange flow from `t0` to `t1` (either direction)
/// recording every step. `dt` is the unsigned step size.
pub fn el_flow_span(
    model: &dyn Lagrangian,
    start: (Point, Point),
    t0: f64,
    t1: f64,
    dt: f64,
) -> Result<Trajectory> {
    if !(dt > 0.0) {
        return Err(Error::Invalid(format!("dt = {dt} must be > 0")));
    }
    let span = t1 - t0;
    let steps = (span.abs() / dt).round().max(1.0) as usize;
    let signed_dt = span / steps as f64;
    let bound = model.velocity_bound();
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let (mut x, mut v) = start;
    times.push(t0);
    states.push((x, v));
    for i in 0..steps {
        let t = t0 + i as f64 * signed_dt;
        let out = rk4_step(model, x, v, t, signed_dt);
        x = out.x;
        v = out.v;
        let sp = speed(&v, model.dim());
        if sp > 10.0 * bound {
            return Err(Error::BlowUp {
                t: t + signed_dt,
                speed: sp,
                bound,
            });
        }
        times.push(t0 + (i + 1) as f64 * signed_dt);
        states.push((x, v));
    }
    Ok(Trajectory {
        times,
        states,
        lifted: true,
    })
}

/// Forward Euler-Lagrange flow (the spec-facing entry point).
pub fn el_flow(
    model: &dyn Lagrangian,
    start: (Point, Point),
    t0: f64,
    t1: f64,
    dt: f64,
) -> Result<Trajectory> {
    if !(t1 > t0) {
        return Err(Error::Invalid(format!("need t1 > t0, got [{t0}, {t1}]")));
    }
    el_flow_span(model, start, t0, t1, dt)
}

/// Endpoint of the flow plus the action integral along the way, with the
/// action accumulated by the same 4th-order stages.
pub fn flow_with_action(
    model: &dyn Lagrangian,
    start: (Point, Point),
    t0: f64,
    t1: f64,
    dt: f64,
) -> Result<((Point, Point), f64)> {
    if !(dt > 0.0) {
        return Err(Error::Invalid(format!("dt = {dt} must be > 0")));
    }
    let span = t1 - t0;
    let steps = (span.abs() / dt).round().max(1.0) as usize;
    let signed_dt = span / steps as f64;
    let bound = model.velocity_bound();
    let (mut x, mut v) = start;
    let mut action = 0.0;
    for i in 0..steps {
        let t = t0 + i as f64 * signed_dt;
        let out = rk4_step(model, x, v, t, signed_dt);
        x = out.x;
        v = out.v;
        action += out.action;
        let sp = speed(&v, model.dim());
        if sp > 10.0 * bound {
            return Err(Error::BlowUp {
                t: t + signed_dt,
                speed: sp,
                bound,
            });
        }
    }
    Ok(((x, v), action))
}

/// Flow endpoint only.
pub fn flow_map(
    model: &dyn Lagrangian,
    start: (Point, Point),
    t0: f64,
    t1: f64,
    dt: f64,
) -> Result<(Point, Point)> {
    Ok(flow_with_action(model, start, t0, t1, dt)?.0)
}

fn closure_gap(model: &dyn Lagrangian, a: (Point, Point), b: (Point, Point)) -> f64 {
    let d = model.dim();
    let side = model.side();
    let mut s = 0.0;
    for i in 0..d {
        let mut dx = (a.0[i] - b.0[i]).rem_euclid(side);
        if dx > 0.5 * side {
            dx = side - dx;
        }
        let dv = a.1[i] - b.1[i];
        s += dx * dx + dv * dv;
    }
    s.sqrt()
}

/// Eigenvalues of the monodromy matrix of a T-periodic orbit, computed from
/// the finite-difference Jacobian of the time-T map (central differences
/// with step `h_var`). Fails with [`Error::NotPeriodic`] when the orbit does
/// not close to within `tol_per`.
pub fn monodromy_eigenvalues(
    model: &dyn Lagrangian,
    period: f64,
    orbit_start: (Point, Point),
    dt: f64,
    h_var: f64,
    tol_per: f64,
) -> Result<Vec<Complex<f64>>> {
    let d = model.dim();
    let end = flow_map(model, orbit_start, 0.0, period, dt)?;
    let gap = closure_gap(model, end, orbit_start);
    if gap > tol_per {
        return Err(Error::NotPeriodic { gap, tol: tol_per });
    }

    let n = 2 * d;
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let perturb = |sign: f64| -> Result<(Point, Point)> {
            let mut s = orbit_start;
            if j < d {
                s.0[j] += sign * h_var;
            } else {
                s.1[j - d] += sign * h_var;
            }
            flow_map(model, s, 0.0, period, dt)
        };
        let plus = perturb(1.0)?;
        let minus = perturb(-1.0)?;
        for i in 0..d {
            jac[(i, j)] = (plus.0[i] - minus.0[i]) / (2.0 * h_var);
            jac[(d + i, j)] = (plus.1[i] - minus.1[i]) / (2.0 * h_var);
        }
    }
    Ok(jac.complex_eigenvalues().iter().copied().collect())
}

/// Smallest distance of any eigenvalue modulus from 1; the orbit counts as
/// hyperbolic when this margin clears the configured tolerance.
pub fn hyperbolic_margin(eigenvalues: &[Complex<f64>]) -> f64 {
    eigenvalues
        .iter()
        .map(|l| (l.norm() - 1.0).abs())
        .fold(f64::INFINITY, f64::min)
}

/// Locate a T-periodic orbit by damped Newton single-shooting on
/// `phi_T(z) - z`, starting from `guess`.
pub fn find_periodic_orbit(
    model: &dyn Lagrangian,
    period: f64,
    guess: (Point, Point),
    dt: f64,
    tol_per: f64,
) -> Result<(Point, Point)> {
    let d = model.dim();
    let n = 2 * d;
    let mut z = guess;
    for _ in 0..25 {
        let end = flow_map(model, z, 0.0, period, dt)?;
        let gap = closure_gap(model, end, z);
        if gap <= tol_per {
            return Ok(z);
        }
        // Jacobian of the residual map by central differences.
        let h = 1e-6 * (1.0 + speed(&z.1, d));
        let mut jac = DMatrix::zeros(n, n);
        let mut res = DVector::zeros(n);
        for i in 0..d {
            res[i] = end.0[i] - z.0[i];
            res[d + i] = end.1[i] - z.1[i];
        }
        for j in 0..n {
            let shoot = |sign: f64| -> Result<(Point, Point)> {
                let mut s = z;
                if j < d {
                    s.0[j] += sign * h;
                } else {
                    s.1[j - d] += sign * h;
                }
                flow_map(model, s, 0.0, period, dt)
            };
            let plus = shoot(1.0)?;
            let minus = shoot(-1.0)?;
            for i in 0..d {
                jac[(i, j)] = (plus.0[i] - minus.0[i]) / (2.0 * h);
                jac[(d + i, j)] = (plus.1[i] - minus.1[i]) / (2.0 * h);
            }
            jac[(j, j)] -= 1.0;
        }
        let step = jac
            .lu()
            .solve(&res)
            .ok_or_else(|| Error::NotPeriodic { gap, tol: tol_per })?;
        for i in 0..d {
            z.0[i] -= 0.9 * step[i];
            z.1[i] -= 0.9 * step[d + i];
        }
    }
    let end = flow_map(model, z, 0.0, period, dt)?;
    let gap = closure_gap(model, end, z);
    if gap <= tol_per {
        Ok(z)
    } else {
        Err(Error::NotPeriodic { gap, tol: tol_per })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::library::{FreeModel, PendulumModel};
    use crate::models::ModelKind;
    use std::f64::consts::PI;

    #[test]
    fn free_motion_translates() {
        let m = FreeModel::new(1, 1.0, 2.0);
        let traj = el_flow(&m, ([0.0; MAX_DIM], [0.25, 0.0, 0.0]), 0.0, 1.0, 1e-3).unwrap();
        let (x, v) = traj.end();
        assert!((x[0] - 0.25).abs() < 1e-12);
        assert!((v[0] - 0.25).abs() < 1e-12);
        traj.validate(1, 2.0, 1e-9).unwrap();
    }

    #[test]
    fn pendulum_equilibria_are_fixed() {
        let m = PendulumModel::autonomous(1.0);
        for &x0 in &[0.0, 0.5] {
            let traj = el_flow(&m, ([x0, 0.0, 0.0], [0.0; MAX_DIM]), 0.0, 1.0, 1e-3).unwrap();
            let (x, v) = traj.end();
            assert!((x[0] - x0).abs() < 1e-12, "equilibrium at {x0} drifted");
            assert!(v[0].abs() < 1e-12);
        }
    }

    #[test]
    fn energy_conservation_on_unit_time() {
        let m = PendulumModel::autonomous(1.0);
        let energy = |x: f64, v: f64| 0.5 * v * v + ((2.0 * PI * x).cos() - 1.0);
        let traj = el_flow(&m, ([0.25, 0.0, 0.0], [0.3, 0.0, 0.0]), 0.0, 1.0, 1e-3).unwrap();
        let e0 = energy(0.25, 0.3);
        let drift = traj
            .states
            .iter()
            .map(|(x, v)| (energy(x[0], v[0]) - e0).abs())
            .fold(0.0, f64::max);
        assert!(drift <= 1e-8, "energy drift {drift:.3e}");
    }

    #[test]
    fn fourth_order_step_refinement() {
        let m = PendulumModel::autonomous(1.0);
        let start = ([0.21, 0.0, 0.0], [0.4, 0.0, 0.0]);
        let endpoint = |dt: f64| {
            let (x, _) = el_flow(&m, start, 0.0, 1.0, dt).unwrap().end();
            x[0]
        };
        let coarse = (endpoint(0.02) - endpoint(0.01)).abs();
        let fine = (endpoint(0.01) - endpoint(0.005)).abs();
        assert!(
            coarse <= 16.5 * fine && coarse >= 10.0 * fine,
            "refinement ratio {:.2} outside the 4th-order window",
            coarse / fine
        );
    }

    /// Strip the analytic shortcuts off a model to force the
    /// finite-difference Euler-Lagrange path.
    struct OpaqueView<M: Lagrangian>(M);
    impl<M: Lagrangian> Lagrangian for OpaqueView<M> {
        fn dim(&self) -> usize {
            self.0.dim()
        }
        fn side(&self) -> f64 {
            self.0.side()
        }
        fn kind(&self) -> ModelKind {
            self.0.kind()
        }
        fn velocity_bound(&self) -> f64 {
            self.0.velocity_bound()
        }
        fn eval(&self, x: Point, v: Point, t: f64) -> f64 {
            self.0.eval(x, v, t)
        }
    }

    #[test]
    fn finite_difference_path_matches_analytic() {
        let m = PendulumModel::forced(1.0, 0.2, 1.0);
        let opaque = OpaqueView(PendulumModel::forced(1.0, 0.2, 1.0));
        let start = ([0.3, 0.0, 0.0], [0.5, 0.0, 0.0]);
        let (xa, va) = el_flow(&m, start, 0.0, 1.0, 1e-3).unwrap().end();
        let (xf, vf) = el_flow(&opaque, start, 0.0, 1.0, 1e-3).unwrap().end();
        assert!((xa[0] - xf[0]).abs() < 1e-5, "{} vs {}", xa[0], xf[0]);
        assert!((va[0] - vf[0]).abs() < 1e-4);
    }

    #[test]
    fn monodromy_of_shear_is_unit() {
        let m = FreeModel::new(1, 1.0, 2.0);
        let eigs =
            monodromy_eigenvalues(&m, 1.0, ([0.3, 0.0, 0.0], [0.0; MAX_DIM]), 1e-3, 1e-6, 1e-9)
                .unwrap();
        for l in &eigs {
            assert!((l.norm() - 1.0).abs() < 1e-6, "shear eigenvalue {l}");
        }
    }

    #[test]
    fn monodromy_saddle_splits() {
        // Oracle: linearized exponents +-2 pi at the potential maximum, so
        // the period-1 multipliers are e^{2 pi} and e^{-2 pi}.
        let m = PendulumModel::autonomous(1.0);
        let eigs =
            monodromy_eigenvalues(&m, 1.0, ([0.0; MAX_DIM], [0.0; MAX_DIM]), 1e-4, 1e-7, 1e-9)
                .unwrap();
        let mut mags: Vec<f64> = eigs.iter().map(|l| l.norm()).collect();
        mags.sort_by(f64::total_cmp);
        let expect_small = (-2.0 * PI).exp();
        let expect_large = (2.0 * PI).exp();
        assert!((mags[0] - expect_small).abs() / expect_small < 0.01, "{mags:?}");
        assert!((mags[1] - expect_large).abs() / expect_large < 0.01, "{mags:?}");
        assert!(hyperbolic_margin(&eigs) > 0.5);
    }

    #[test]
    fn monodromy_center_on_unit_circle() {
        // kappa = 0.5 keeps omega T away from a full turn.
        let m = PendulumModel::autonomous(0.5);
        let eigs =
            monodromy_eigenvalues(&m, 1.0, ([0.5, 0.0, 0.0], [0.0; MAX_DIM]), 1e-4, 1e-6, 1e-9)
                .unwrap();
        let omega = 2.0 * PI * 0.5f64.sqrt();
        for l in &eigs {
            assert!((l.norm() - 1.0).abs() < 1e-4, "center eigenvalue {l}");
            assert!((l.arg().abs() - omega).abs() < 1e-3);
        }
        assert!(hyperbolic_margin(&eigs) < 1e-4, "center is not hyperbolic");
    }

    #[test]
    fn monodromy_rejects_non_periodic_start() {
        let m = PendulumModel::autonomous(1.0);
        let res =
            monodromy_eigenvalues(&m, 1.0, ([0.25, 0.0, 0.0], [0.0; MAX_DIM]), 1e-3, 1e-6, 1e-9);
        assert!(matches!(res, Err(Error::NotPeriodic { .. })));
    }

    #[test]
    fn shooting_recovers_equilibrium() {
        let m = PendulumModel::autonomous(1.0);
        let z = find_periodic_orbit(
            &m,
            1.0,
            ([1e-3, 0.0, 0.0], [-1e-3, 0.0, 0.0]),
            1e-3,
            1e-10,
        )
        .unwrap();
        assert!(z.0[0].abs() < 1e-8 && z.1[0].abs() < 1e-8, "{z:?}");
    }

    #[test]
    fn action_integral_of_free_motion() {
        let m = FreeModel::new(1, 1.0, 2.0);
        let (_, action) =
            flow_with_action(&m, ([0.0; MAX_DIM], [0.5, 0.0, 0.0]), 0.0, 2.0, 1e-3).unwrap();
        // Integral of v^2/2 over [0, 2] at v = 0.5.
        assert!((action - 0.25).abs() < 1e-12);
    }
}
