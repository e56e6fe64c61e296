//! Grids on flat tori, time-on-circle arithmetic and field storage.
//!
//! Every solver in this crate works on a uniform grid over the flat torus
//! T^d = (R / side Z)^d with d <= 3. Fields are stored flat (row-major,
//! axis 0 fastest) and interpolated multilinearly with periodic wrap, so
//! interpolation never leaves the range of the node values. That bound is
//! what the non-expansiveness of the minimization operators rests on.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Maximum supported spatial dimension.
pub const MAX_DIM: usize = 3;

/// Hard cap on the total node count of a single grid.
pub const MAX_NODES: usize = 1 << 22;

/// A point (or velocity, or covector) on the torus; only the first
/// `dim` entries are meaningful.
pub type Point = [f64; MAX_DIM];

/// Uniform grid on the flat torus T^d with the quotient Euclidean metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridTorus {
    /// Spatial dimension, 1..=3.
    pub dim: usize,
    /// Nodes per axis.
    pub points_per_axis: usize,
    /// Period of each coordinate (1.0 for dimensionless angles, 2*pi for phases).
    pub side: f64,
}

impl GridTorus {
    pub fn new(dim: usize, points_per_axis: usize, side: f64) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::InvalidGrid(format!("dim {dim} not in 1..=3")));
        }
        if points_per_axis < 8 {
            return Err(Error::InvalidGrid(format!(
                "points_per_axis {points_per_axis} < 8"
            )));
        }
        if !(side > 0.0) || !side.is_finite() {
            return Err(Error::InvalidGrid(format!("side {side} must be positive")));
        }
        let count = points_per_axis
            .checked_pow(dim as u32)
            .filter(|&c| c <= MAX_NODES)
            .ok_or_else(|| {
                Error::InvalidGrid(format!(
                    "{points_per_axis}^{dim} exceeds the node budget {MAX_NODES}"
                ))
            })?;
        let _ = count;
        Ok(Self {
            dim,
            points_per_axis,
            side,
        })
    }

    /// Grid spacing per axis.
    #[inline]
    pub fn spacing(&self) -> f64 {
        self.side / self.points_per_axis as f64
    }

    /// Total node count n^d.
    #[inline]
    pub fn node_count(&self) -> usize {
        self.points_per_axis.pow(self.dim as u32)
    }

    /// Wrap a coordinate into the fundamental domain [0, side).
    #[inline]
    pub fn wrap_coord(&self, x: f64) -> f64 {
        let w = x.rem_euclid(self.side);
        // rem_euclid can return `side` itself for tiny negative inputs.
        if w >= self.side {
            0.0
        } else {
            w
        }
    }

    /// Wrap a point into [0, side)^d.
    #[inline]
    pub fn wrap_point(&self, x: Point) -> Point {
        let mut out = [0.0; MAX_DIM];
        for a in 0..self.dim {
            out[a] = self.wrap_coord(x[a]);
        }
        out
    }

    /// Signed shortest displacement per axis from `from` to `to`,
    /// each component in (-side/2, side/2].
    #[inline]
    pub fn displacement(&self, from: Point, to: Point) -> Point {
        let half = 0.5 * self.side;
        let mut d = [0.0; MAX_DIM];
        for a in 0..self.dim {
            let mut delta = (to[a] - from[a]).rem_euclid(self.side);
            if delta > half {
                delta -= self.side;
            }
            d[a] = delta;
        }
        d
    }

    /// Euclidean length of the shortest representative difference.
    #[inline]
    pub fn distance(&self, a: Point, b: Point) -> f64 {
        let d = self.displacement(a, b);
        let mut s = 0.0;
        for v in d.iter().take(self.dim) {
            s += v * v;
        }
        s.sqrt()
    }

    /// Multi-index of a flat index (axis 0 fastest).
    #[inline]
    pub fn unflatten(&self, flat: usize) -> [usize; MAX_DIM] {
        let n = self.points_per_axis;
        let mut idx = [0usize; MAX_DIM];
        let mut rest = flat;
        for a in 0..self.dim {
            idx[a] = rest % n;
            rest /= n;
        }
        idx
    }

    /// Flat index of a multi-index.
    #[inline]
    pub fn flatten(&self, idx: [usize; MAX_DIM]) -> usize {
        let n = self.points_per_axis;
        let mut flat = 0usize;
        for a in (0..self.dim).rev() {
            flat = flat * n + idx[a];
        }
        flat
    }

    /// Coordinates of the node with the given flat index.
    #[inline]
    pub fn node_point(&self, flat: usize) -> Point {
        let idx = self.unflatten(flat);
        let h = self.spacing();
        let mut p = [0.0; MAX_DIM];
        for a in 0..self.dim {
            p[a] = idx[a] as f64 * h;
        }
        p
    }

    /// Wrapped index arithmetic on one axis.
    #[inline]
    pub fn wrap_index(&self, i: isize) -> usize {
        let n = self.points_per_axis as isize;
        i.rem_euclid(n) as usize
    }
}

/// Point in time tracked together with its period.
///
/// `raw = fractional + integer_part` with `0 <= fractional < period`,
/// `integer_part` an integer multiple of the period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimePoint {
    pub raw: f64,
    pub period: f64,
}

impl TimePoint {
    pub fn new(raw: f64, period: f64) -> Result<Self> {
        if !(period > 0.0) {
            return Err(Error::Invalid(format!("time period {period} must be > 0")));
        }
        Ok(Self { raw, period })
    }

    /// Fractional part `[t] = t mod period`.
    #[inline]
    pub fn fractional(&self) -> f64 {
        let f = self.raw.rem_euclid(self.period);
        if f >= self.period {
            0.0
        } else {
            f
        }
    }

    /// Integer part `{t} = raw - [t]`, a multiple of the period.
    #[inline]
    pub fn integer_part(&self) -> f64 {
        self.raw - self.fractional()
    }

    /// Distance on the time circle of circumference `period`.
    #[inline]
    pub fn circle_distance(&self, other_fractional: f64) -> f64 {
        let mut d = (self.fractional() - other_fractional).abs() % self.period;
        if d > 0.5 * self.period {
            d = self.period - d;
        }
        d
    }
}

/// Grid-sampled scalar function on T^d at one time stamp.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    pub grid: GridTorus,
    pub time: TimePoint,
    pub values: Vec<f64>,
}

impl ValueField {
    pub fn new(grid: GridTorus, time: TimePoint, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(Error::InvalidGrid(format!(
                "value count {} != node count {}",
                values.len(),
                grid.node_count()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid("non-finite field value".into()));
        }
        Ok(Self { grid, time, values })
    }

    /// Constant field.
    pub fn constant(grid: GridTorus, time: TimePoint, c: f64) -> Self {
        Self {
            grid,
            time,
            values: vec![c; grid.node_count()],
        }
    }

    /// Field sampled from a closure of the node coordinates.
    pub fn from_fn(grid: GridTorus, time: TimePoint, mut f: impl FnMut(Point) -> f64) -> Self {
        let values = (0..grid.node_count())
            .map(|i| f(grid.node_point(i)))
            .collect();
        Self { grid, time, values }
    }

    /// Maximum over grid edges of |du| / h. Recomputed on every call so it
    /// can never go stale.
    pub fn lipschitz_estimate(&self) -> f64 {
        let g = &self.grid;
        let n = g.points_per_axis;
        let h = g.spacing();
        let mut worst = 0.0f64;
        for flat in 0..g.node_count() {
            let idx = g.unflatten(flat);
            for a in 0..g.dim {
                let mut up = idx;
                up[a] = (idx[a] + 1) % n;
                let d = (self.values[g.flatten(up)] - self.values[flat]).abs() / h;
                worst = worst.max(d);
            }
        }
        worst
    }

    /// Multilinear interpolation with periodic wrap; exact at nodes and
    /// bounded by the node extrema.
    pub fn interpolate(&self, x: Point) -> f64 {
        interpolate(&self.grid, &self.values, x)
    }

    /// Sup-norm distance to another field on the same grid.
    pub fn sup_distance(&self, other: &ValueField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Minimum over grid nodes.
    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Multilinear interpolation over raw storage (used by hot loops that work
/// on borrowed slices rather than whole fields).
#[inline]
pub fn interpolate(grid: &GridTorus, values: &[f64], x: Point) -> f64 {
    let n = grid.points_per_axis;
    let h = grid.spacing();
    let mut base = [0usize; MAX_DIM];
    let mut frac = [0.0f64; MAX_DIM];
    for a in 0..grid.dim {
        let xa = grid.wrap_coord(x[a]);
        let s = xa / h;
        let mut i = s.floor() as isize;
        let mut f = s - i as f64;
        // Guard the xa == side boundary produced by rounding.
        if i as usize >= n {
            i = 0;
            f = 0.0;
        }
        base[a] = i as usize;
        frac[a] = f;
    }
    let corners = 1usize << grid.dim;
    let mut acc = 0.0;
    for corner in 0..corners {
        let mut w = 1.0;
        let mut idx = [0usize; MAX_DIM];
        for a in 0..grid.dim {
            if corner >> a & 1 == 1 {
                idx[a] = (base[a] + 1) % n;
                w *= frac[a];
            } else {
                idx[a] = base[a];
                w *= 1.0 - frac[a];
            }
        }
        if w != 0.0 {
            acc += w * values[grid.flatten(idx)];
        }
    }
    acc
}

/// Extrema over grid nodes with argmin/argmax tie-broken by lowest flat index.
pub struct FieldExtrema {
    pub min: f64,
    pub argmin: usize,
    pub max: f64,
    pub argmax: usize,
}

pub fn field_extrema(field: &ValueField) -> FieldExtrema {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut argmin = 0;
    let mut argmax = 0;
    for (i, &v) in field.values.iter().enumerate() {
        if v < min {
            min = v;
            argmin = i;
        }
        if v > max {
            max = v;
            argmax = i;
        }
    }
    FieldExtrema {
        min,
        argmin,
        max,
        argmax,
    }
}

/// Shortest-representative torus distance between two points (convenience
/// wrapper over [`GridTorus::distance`]; inputs are wrapped first).
pub fn torus_distance(a: Point, b: Point, grid: &GridTorus) -> f64 {
    grid.distance(grid.wrap_point(a), grid.wrap_point(b))
}

// ---------------------------------------------------------------------------
// Serialization: CSV with a `# grid ...` header line, and a JSON twin.
// ---------------------------------------------------------------------------

impl ValueField {
    /// CSV format: `# grid d=<d> n=<n_g> side=<side> time=<raw> period=<T>`
    /// then one `flat_index,value` row per node.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 24 + 80);
        let _ = writeln!(
            out,
            "# grid d={} n={} side={} time={} period={}",
            self.grid.dim,
            self.grid.points_per_axis,
            self.grid.side,
            self.time.raw,
            self.time.period
        );
        for (i, v) in self.values.iter().enumerate() {
            let _ = writeln!(out, "{i},{v}");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty field CSV".into()))?;
        let mut d = None;
        let mut n = None;
        let mut side = None;
        let mut time = None;
        let mut period = None;
        for tok in header.trim_start_matches('#').split_whitespace() {
            if let Some((k, v)) = tok.split_once('=') {
                let parse = |v: &str| -> Result<f64> {
                    v.parse()
                        .map_err(|_| Error::Format(format!("bad header number {v}")))
                };
                match k {
                    "d" => d = Some(parse(v)? as usize),
                    "n" => n = Some(parse(v)? as usize),
                    "side" => side = Some(parse(v)?),
                    "time" => time = Some(parse(v)?),
                    "period" => period = Some(parse(v)?),
                    _ => {}
                }
            }
        }
        let (d, n, side, time, period) = match (d, n, side, time, period) {
            (Some(a), Some(b), Some(c), Some(e), Some(f)) => (a, b, c, e, f),
            _ => return Err(Error::Format("incomplete field CSV header".into())),
        };
        let grid = GridTorus::new(d, n, side)?;
        let mut values = vec![0.0; grid.node_count()];
        let mut seen = 0usize;
        for line in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (i, v) = line
                .split_once(',')
                .ok_or_else(|| Error::Format(format!("bad field CSV row: {line}")))?;
            let i: usize = i
                .parse()
                .map_err(|_| Error::Format(format!("bad index {i}")))?;
            let v: f64 = v
                .parse()
                .map_err(|_| Error::Format(format!("bad value {v}")))?;
            if i >= values.len() {
                return Err(Error::Format(format!("index {i} out of range")));
            }
            values[i] = v;
            seen += 1;
        }
        if seen != values.len() {
            return Err(Error::Format(format!(
                "field CSV has {seen} rows, expected {}",
                values.len()
            )));
        }
        ValueField::new(grid, TimePoint::new(time, period)?, values)
    }

    pub fn to_json(&self) -> String {
        let doc = FieldJson {
            grid: self.grid,
            time: self.time,
            values: self.values.clone(),
        };
        serde_json::to_string(&doc).expect("field serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: FieldJson =
            serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        ValueField::new(doc.grid, doc.time, doc.values)
    }
}

#[derive(Serialize, Deserialize)]
struct FieldJson {
    grid: GridTorus,
    time: TimePoint,
    values: Vec<f64>,
}
