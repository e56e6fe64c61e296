//! Gradient-graph extraction and Hausdorff-distance diagnostics.
//!
//! A value field contributes one graph point (x, tau, p, e) per node where
//! it looks differentiable: p is the central-difference gradient and
//! e = -H(x, p, tau) via the Hamilton-Jacobi identity (no time differencing
//! across the coarse slice grid). Non-differentiability is detected by the
//! jump between forward and backward differences; the tolerance is reported
//! with every artifact so borderline flags stay auditable. The adherence of
//! a finite numerical graph is the point cloud itself; closure effects are
//! represented by refining the grid, not by synthesizing limit points.

use crate::error::{Error, Result};
use crate::grid::{GridTorus, Point, TimePoint, ValueField, MAX_DIM};
use crate::models::{hamiltonian, Lagrangian};
use crate::semigroup::SolverParams;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// One sampled point of a gradient graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphPoint {
    pub x: Point,
    /// Fractional time of the slice the point was sampled from.
    pub tau: f64,
    pub p: Point,
    /// Energy component, -H(x, p, tau).
    pub e: f64,
}

/// Which object a graph was built from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GraphSource {
    Evolved { epoch: usize },
    Limit,
}

/// Point cloud of (x, tau, p, e) samples with the flags of the nodes that
/// were rejected as non-differentiable.
#[derive(Debug, Clone)]
pub struct GradientGraph {
    pub points: Vec<GraphPoint>,
    pub source: GraphSource,
    pub dim: usize,
    pub side: f64,
    pub period: f64,
    pub tol_nd: f64,
    /// Flagged nodes per slice, kept for the CSV export.
    pub flagged: Vec<(Point, f64)>,
}

/// Default non-differentiability tolerance: `max(10 h, 0.05 Lip)`.
pub fn default_nondiff_tolerance(field: &ValueField) -> f64 {
    let h = field.grid.spacing();
    (10.0 * h).max(0.05 * field.lipschitz_estimate())
}

/// Flag nodes where any axis shows a forward/backward difference jump above
/// `tol_nd`.
pub fn detect_differentiability(field: &ValueField, tol_nd: f64) -> Vec<bool> {
    let g = &field.grid;
    let n = g.points_per_axis;
    let h = g.spacing();
    let mut mask = vec![false; g.node_count()];
    for flat in 0..g.node_count() {
        let idx = g.unflatten(flat);
        for a in 0..g.dim {
            let mut up = idx;
            up[a] = (idx[a] + 1) % n;
            let mut dn = idx;
            dn[a] = (idx[a] + n - 1) % n;
            let fwd = (field.values[g.flatten(up)] - field.values[flat]) / h;
            let bwd = (field.values[flat] - field.values[g.flatten(dn)]) / h;
            if (fwd - bwd).abs() > tol_nd {
                mask[flat] = true;
                break;
            }
        }
    }
    mask
}

/// Central-difference gradient at a node.
fn node_gradient(field: &ValueField, flat: usize) -> Point {
    let g = &field.grid;
    let n = g.points_per_axis;
    let h = g.spacing();
    let idx = g.unflatten(flat);
    let mut p = [0.0; MAX_DIM];
    for a in 0..g.dim {
        let mut up = idx;
        up[a] = (idx[a] + 1) % n;
        let mut dn = idx;
        dn[a] = (idx[a] + n - 1) % n;
        p[a] = (field.values[g.flatten(up)] - field.values[g.flatten(dn)]) / (2.0 * h);
    }
    p
}

/// Build the gradient graph of a single field. The model evaluates the
/// energy component at the field's own absolute time; `tau` on the points
/// is the fractional slice time.
pub fn build_gradient_graph_field(
    field: &ValueField,
    model: &dyn Lagrangian,
    tol_nd: f64,
    source: GraphSource,
) -> Result<GradientGraph> {
    let g = field.grid;
    let mask = detect_differentiability(field, tol_nd);
    let t_abs = field.time.raw;
    let tau = field.time.fractional();
    let entries: Result<Vec<Option<GraphPoint>>> = (0..g.node_count())
        .into_par_iter()
        .map(|flat| {
            if mask[flat] {
                return Ok(None);
            }
            let x = g.node_point(flat);
            let p = node_gradient(field, flat);
            let e = -hamiltonian(model, x, p, t_abs, 1e-8)?;
            Ok(Some(GraphPoint { x, tau, p, e }))
        })
        .collect();
    let mut points = Vec::new();
    for entry in entries?.into_iter() {
        if let Some(pt) = entry {
            points.push(pt);
        }
    }
    let flagged = (0..g.node_count())
        .filter(|&i| mask[i])
        .map(|i| (g.node_point(i), tau))
        .collect();
    Ok(GradientGraph {
        points,
        source,
        dim: g.dim,
        side: g.side,
        period: field.time.period,
        tol_nd,
        flagged,
    })
}

/// Graph of a periodic solution: the union of its slice graphs.
pub fn build_gradient_graph(
    solution: &crate::barrier::PeriodicSolution,
    model: &dyn Lagrangian,
    tol_nd: f64,
    source: GraphSource,
) -> Result<GradientGraph> {
    let mut combined: Option<GradientGraph> = None;
    for slice in &solution.slices {
        let part = build_gradient_graph_field(slice, model, tol_nd, source)?;
        match &mut combined {
            None => combined = Some(part),
            Some(acc) => {
                acc.points.extend(part.points);
                acc.flagged.extend(part.flagged);
            }
        }
    }
    combined.ok_or_else(|| Error::Invalid("periodic solution has no slices".into()))
}

/// Product metric on (x, tau, p, e): torus metric on x, circle metric on
/// tau, Euclidean on p and e, with configurable weights.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProductMetric {
    pub side: f64,
    pub period: f64,
    /// Weights for (x, tau, p, e).
    pub weights: [f64; 4],
}

impl ProductMetric {
    pub fn new(side: f64, period: f64) -> Self {
        Self {
            side,
            period,
            weights: [1.0; 4],
        }
    }

    #[inline]
    fn dist2(&self, a: &GraphPoint, b: &GraphPoint, dim: usize) -> f64 {
        let mut dx2 = 0.0;
        for i in 0..dim {
            let mut d = (a.x[i] - b.x[i]).rem_euclid(self.side);
            if d > 0.5 * self.side {
                d = self.side - d;
            }
            dx2 += d * d;
        }
        let mut dtau = (a.tau - b.tau).rem_euclid(self.period);
        if dtau > 0.5 * self.period {
            dtau = self.period - dtau;
        }
        let mut dp2 = 0.0;
        for i in 0..dim {
            let d = a.p[i] - b.p[i];
            dp2 += d * d;
        }
        let de = a.e - b.e;
        let w = &self.weights;
        w[0] * w[0] * dx2 + w[1] * w[1] * dtau * dtau + w[2] * w[2] * dp2 + w[3] * w[3] * de * de
    }
}

/// Directed Hausdorff distance sup_{a in A} d(a, B).
fn directed_hausdorff(
    a: &[GraphPoint],
    b: &[GraphPoint],
    metric: &ProductMetric,
    dim: usize,
) -> f64 {
    let worst2 = a
        .par_iter()
        .with_min_len(16)
        .map(|pa| {
            let mut best = f64::INFINITY;
            for pb in b {
                let d2 = metric.dist2(pa, pb, dim);
                if d2 < best {
                    best = d2;
                }
            }
            best
        })
        .reduce(|| 0.0, f64::max);
    worst2.sqrt()
}

/// Symmetric Hausdorff distance between two clouds in the product metric.
/// Brute force; the cloud sizes this toolkit produces stay far below the
/// point where bucketing would pay off.
pub fn hausdorff_distance(
    a: &[GraphPoint],
    b: &[GraphPoint],
    metric: &ProductMetric,
    dim: usize,
) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let ab = directed_hausdorff(a, b, metric, dim);
    let ba = directed_hausdorff(b, a, metric, dim);
    Ok(ab.max(ba))
}

pub fn graph_hausdorff(a: &GradientGraph, b: &GradientGraph) -> Result<f64> {
    let metric = ProductMetric::new(a.side, a.period);
    hausdorff_distance(&a.points, &b.points, &metric, a.dim)
}

/// Velocities attaining the discrete backward minimum at (x, t).
#[derive(Debug, Clone)]
pub struct MinimizerSet {
    pub x: Point,
    pub t: f64,
    /// One representative velocity per cluster.
    pub velocities: Vec<Point>,
    pub cardinality: usize,
}

/// Scan initial velocities over B(k), shoot backward over [0, t] ending at
/// x, and cluster the velocities whose action lands within `tol_min` of the
/// minimum. Cluster radius is two velocity-grid cells.
pub fn minimizer_set(
    phi: &ValueField,
    model: &dyn Lagrangian,
    x: Point,
    t: f64,
    params: &SolverParams,
    tol_min: f64,
) -> Result<MinimizerSet> {
    if !(t > 0.0) {
        return Err(Error::Invalid("need t > 0".into()));
    }
    let d = model.dim();
    if d != 1 {
        return Err(Error::Invalid(
            "minimizer scans are implemented for one-dimensional models".into(),
        ));
    }
    let k = params.velocity_bound;
    let samples = 241usize;
    let dv = 2.0 * k / (samples - 1) as f64;
    let flow_dt = (params.dt / 4.0).min(1e-3);
    let costs: Result<Vec<f64>> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let v0 = -k + i as f64 * dv;
            let state = (x, [v0, 0.0, 0.0]);
            match crate::models::flow::flow_with_action(model, state, t, 0.0, flow_dt) {
                Ok(((y, _), action_back)) => {
                    // Backward integration accumulates the negated action.
                    let action = -action_back;
                    Ok(phi.interpolate(phi.grid.wrap_point(y)) + action)
                }
                Err(Error::BlowUp { .. }) => Ok(f64::INFINITY),
                Err(e) => Err(e),
            }
        })
        .collect();
    let costs = costs?;
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(Error::Invalid("no admissible backward shot".into()));
    }

    // Cluster the near-minimal velocities with a two-cell gap rule.
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for (i, &c) in costs.iter().enumerate() {
        if c <= min + tol_min {
            match clusters.last_mut() {
                Some(last) if i - last.last().copied().unwrap_or(0) <= 2 => last.push(i),
                _ => clusters.push(vec![i]),
            }
        }
    }
    let velocities: Vec<Point> = clusters
        .iter()
        .map(|cluster| {
            // Representative: the best sample of the cluster.
            let &best = cluster
                .iter()
                .min_by(|&&a, &&b| costs[a].total_cmp(&costs[b]))
                .expect("non-empty cluster");
            [-k + best as f64 * dv, 0.0, 0.0]
        })
        .collect();
    Ok(MinimizerSet {
        x,
        t,
        cardinality: velocities.len(),
        velocities,
    })
}

/// Hausdorff distances between the evolved renormalized graphs and the
/// graph of the limit solution, at the requested epochs.
///
/// The evolved graphs take their energy component from the full model at
/// absolute time; the limit graph uses the model's periodic limit (or the
/// model itself when stationary).
pub fn graph_convergence(
    model: &dyn Lagrangian,
    phi: &ValueField,
    epochs: &[usize],
    w: &crate::barrier::PeriodicSolution,
    params: &SolverParams,
    tol_nd: f64,
) -> Result<Vec<(usize, f64)>> {
    if epochs.is_empty() {
        return Err(Error::Invalid("no epochs requested".into()));
    }
    let limit_model = model.limit_model().unwrap_or(model);
    let limit_graph = build_gradient_graph(w, limit_model, tol_nd, GraphSource::Limit)?;

    let period = model.kind().period();
    let slice_times: Vec<f64> = w.slices.iter().map(|s| s.time.fractional()).collect();
    let mut record: Vec<f64> = Vec::new();
    for &n in epochs {
        for &tau in &slice_times {
            record.push(n as f64 * period + tau);
        }
    }
    let horizon = record.iter().copied().fold(0.0f64, f64::max);
    let fields = crate::semigroup::evolve_recording(phi, model, 0.0, horizon, params, &record)?;

    let metric = ProductMetric::new(limit_graph.side, limit_graph.period);
    let mut out = Vec::with_capacity(epochs.len());
    for (i, &n) in epochs.iter().enumerate() {
        let mut cloud: Vec<GraphPoint> = Vec::new();
        for j in 0..slice_times.len() {
            let f = crate::semigroup::renormalize(fields[i * slice_times.len() + j].clone());
            let g =
                build_gradient_graph_field(&f, model, tol_nd, GraphSource::Evolved { epoch: n })?;
            cloud.extend(g.points);
        }
        let d = hausdorff_distance(&cloud, &limit_graph.points, &metric, limit_graph.dim)?;
        out.push((n, d));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

impl GradientGraph {
    /// CSV rows `x...,tau,p...,e,nondiff`; flagged nodes are exported with
    /// empty gradient columns for auditability.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let mut header = String::new();
        for a in 0..self.dim {
            let _ = write!(header, "x{a},");
        }
        header.push_str("tau,");
        for a in 0..self.dim {
            let _ = write!(header, "p{a},");
        }
        header.push_str("e,nondiff");
        let _ = writeln!(out, "{header}");
        for pt in &self.points {
            for a in 0..self.dim {
                let _ = write!(out, "{},", pt.x[a]);
            }
            let _ = write!(out, "{},", pt.tau);
            for a in 0..self.dim {
                let _ = write!(out, "{},", pt.p[a]);
            }
            let _ = writeln!(out, "{},0", pt.e);
        }
        for (x, tau) in &self.flagged {
            for a in 0..self.dim {
                let _ = write!(out, "{},", x[a]);
            }
            let _ = write!(out, "{tau},");
            for _ in 0..self.dim {
                let _ = write!(out, ",");
            }
            let _ = writeln!(out, ",1");
        }
        out
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            source: &'a GraphSource,
            dim: usize,
            side: f64,
            period: f64,
            tol_nd: f64,
            weights: [f64; 4],
            points: Vec<[f64; 8]>,
            flagged: Vec<[f64; 4]>,
        }
        let doc = Doc {
            source: &self.source,
            dim: self.dim,
            side: self.side,
            period: self.period,
            tol_nd: self.tol_nd,
            weights: [1.0; 4],
            points: self
                .points
                .iter()
                .map(|p| {
                    [
                        p.x[0], p.x[1], p.x[2], p.tau, p.p[0], p.p[1], p.p[2], p.e,
                    ]
                })
                .collect(),
            flagged: self
                .flagged
                .iter()
                .map(|(x, tau)| [x[0], x[1], x[2], *tau])
                .collect(),
        };
        serde_json::to_string(&doc).expect("graph serialization")
    }
}
