//! Doss-Sussman flow `eta(t, x, y) = y + int_t^T <g(s, x, eta(s, x, y)), o dB_s>`,
//! its inverse `eps(t, x, .)` and the transformed coefficients that remove the
//! backward noise from the equation.
//!
//! The flow is integrated backward from `T` with one Heun step per increment
//! of `B`. The Heun map is differentiated exactly (second-order forward mode
//! in the variables `(y, x_1, .., x_d)`), so the tabulated derivatives are the
//! derivatives of the discrete flow itself.

use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;

use crate::coefficients::{CoefficientSet, NoiseCoefficient, ZeroNoise};
use crate::error::{Error, Result};
use crate::geometry::Domain;
use crate::noise::{Increments, TimeGrid};
use crate::reflected_sde::SdeSpec;

const ROOT_TOL: f64 = 1e-13;

/// Value, gradient and Hessian in the variables `(y, x_1, .., x_d)`.
#[derive(Clone, Debug)]
struct Jet {
    v: f64,
    g: Vec<f64>,
    h: Vec<f64>,
}

impl Jet {
    fn seed_y(y: f64, m: usize) -> Jet {
        let mut g = vec![0.0; m];
        g[0] = 1.0;
        Jet {
            v: y,
            g,
            h: vec![0.0; m * m],
        }
    }

    fn axpy(&mut self, a: f64, other: &Jet) {
        self.v += a * other.v;
        self.g
            .iter_mut()
            .zip(&other.g)
            .for_each(|(s, o)| *s += a * o);
        self.h
            .iter_mut()
            .zip(&other.h)
            .for_each(|(s, o)| *s += a * o);
    }

    fn zero(m: usize) -> Jet {
        Jet {
            v: 0.0,
            g: vec![0.0; m],
            h: vec![0.0; m * m],
        }
    }
}

/// `sum_k g_k(t, x, E) dB_k` as a jet, by the second-order chain rule.
fn noise_jet(g: &dyn NoiseCoefficient, t: f64, x: &[f64], e: &Jet, db: &[f64]) -> Jet {
    let m = e.g.len();
    let mut out = Jet::zero(m);
    for (k, &b) in db.iter().enumerate() {
        if b == 0.0 {
            continue;
        }
        let nj = g.jet(t, x, e.v, k);
        let mut comp = Jet::zero(m);
        comp.v = nj.g;
        for j in 0..m {
            comp.g[j] = nj.gy * e.g[j] + if j >= 1 { nj.gx[j - 1] } else { 0.0 };
        }
        for j in 0..m {
            for l in 0..m {
                let mut v = nj.gyy * e.g[j] * e.g[l] + nj.gy * e.h[j * m + l];
                if j >= 1 {
                    v += nj.gxy[j - 1] * e.g[l];
                }
                if l >= 1 {
                    v += nj.gxy[l - 1] * e.g[j];
                }
                if j >= 1 && l >= 1 {
                    v += nj.gxx[(j - 1) * (m - 1) + (l - 1)];
                }
                comp.h[j * m + l] = v;
            }
        }
        out.axpy(b, &comp);
    }
    out
}

/// One backward Heun step from `t_hi` to `t_lo`.
fn heun_step(
    g: &dyn NoiseCoefficient,
    t_hi: f64,
    t_lo: f64,
    x: &[f64],
    e: &Jet,
    db: &[f64],
) -> Jet {
    let a = noise_jet(g, t_hi, x, e, db);
    let mut pred = e.clone();
    pred.axpy(1.0, &a);
    let b = noise_jet(g, t_lo, x, &pred, db);
    let mut next = e.clone();
    next.axpy(0.5, &a);
    next.axpy(0.5, &b);
    next
}

/// Where the flow is tabulated in `x`.
#[derive(Clone, Debug, PartialEq)]
pub enum XSamples {
    /// `g` does not depend on `x`; one column serves every `x`.
    Invariant,
    /// Tensor grid, one strictly increasing coordinate list per axis.
    Grid(Vec<Vec<f64>>),
}

/// Flow and derivatives at one tabulation point or interpolated.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowValues {
    pub eta: f64,
    pub dy: f64,
    pub dyy: f64,
    pub dx: Vec<f64>,
    /// `d x d`, row-major.
    pub dxx: Vec<f64>,
    pub dxy: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct FlowField {
    grid: TimeGrid,
    d: usize,
    x_axes: Option<Vec<Vec<f64>>>,
    y: Vec<f64>,
    data: Vec<f64>,
    n_cols: usize,
    pub b_stream: u64,
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.len() >= 2 && v.windows(2).all(|w| w[0] < w[1]) && v.iter().all(|x| x.is_finite())
}

/// Solves the flow for every tabulation point on the nodes of `grid`.
pub fn solve_flow(
    g: &dyn NoiseCoefficient,
    grid: &TimeGrid,
    b: &Increments,
    d: usize,
    x_samples: XSamples,
    y_samples: Vec<f64>,
    b_stream: u64,
) -> Result<FlowField> {
    if b.n_steps() != grid.n_steps() || b.dim() != g.dim() {
        return Err(Error::Dimension(format!(
            "B is {}x{}, grid has {} steps and g has {} components",
            b.n_steps(),
            b.dim(),
            grid.n_steps(),
            g.dim()
        )));
    }
    if !strictly_increasing(&y_samples) {
        return Err(Error::InvalidParameter(
            "y samples must be at least two strictly increasing values".into(),
        ));
    }
    if g.dim() > 1 {
        log::warn!(
            "flow with {} noise components: the pathwise solution assumes commuting vector fields",
            g.dim()
        );
    }
    let x_axes = match x_samples {
        XSamples::Grid(axes) if g.depends_on_x() => {
            if axes.len() != d || !axes.iter().all(|a| strictly_increasing(a)) {
                return Err(Error::InvalidParameter(format!(
                    "x grid needs {d} strictly increasing axes with two or more points"
                )));
            }
            Some(axes)
        }
        XSamples::Invariant if g.depends_on_x() => {
            return Err(Error::InvalidParameter(
                "g depends on x: an x grid is required".into(),
            ))
        }
        _ => None,
    };
    let cols: Vec<Vec<f64>> = match &x_axes {
        None => vec![vec![0.0; d]],
        Some(axes) => tensor_points(axes),
    };
    let n_cols = cols.len();
    let n_y = y_samples.len();
    let m = d + 1;
    let stride = 1 + m + m * m;
    let n_nodes = grid.n_steps() + 1;

    let columns: Vec<Vec<f64>> = (0..n_cols * n_y)
        .into_par_iter()
        .map(|cy| {
            let x = &cols[cy / n_y];
            let mut e = Jet::seed_y(y_samples[cy % n_y], m);
            let mut out = vec![0.0; n_nodes * stride];
            let mut store = |node: usize, e: &Jet| {
                let o = node * stride;
                out[o] = e.v;
                out[o + 1..o + 1 + m].copy_from_slice(&e.g);
                out[o + 1 + m..o + stride].copy_from_slice(&e.h);
            };
            store(n_nodes - 1, &e);
            for i in (0..grid.n_steps()).rev() {
                e = heun_step(g, grid.time(i + 1), grid.time(i), x, &e, b.row(i));
                store(i, &e);
            }
            out
        })
        .collect();
    let mut data = vec![0.0; n_nodes * n_cols * n_y * stride];
    for (cy, col) in columns.iter().enumerate() {
        for node in 0..n_nodes {
            let o = (node * n_cols * n_y + cy) * stride;
            data[o..o + stride].copy_from_slice(&col[node * stride..(node + 1) * stride]);
        }
    }
    Ok(FlowField {
        grid: *grid,
        d,
        x_axes,
        y: y_samples,
        data,
        n_cols,
        b_stream,
    })
}

pub(crate) fn tensor_points(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut pts = vec![Vec::new()];
    for axis in axes.iter().rev() {
        let mut next = Vec::with_capacity(pts.len() * axis.len());
        for &a in axis {
            for p in &pts {
                let mut q = vec![a];
                q.extend_from_slice(p);
                next.push(q);
            }
        }
        pts = next;
    }
    pts
}

/// Index `j` and weight `w` such that `v = (1 - w) knots[j] + w knots[j + 1]`.
fn locate(knots: &[f64], v: f64, what: &'static str) -> Result<(usize, f64)> {
    let (lo, hi) = (knots[0], knots[knots.len() - 1]);
    let slack = 1e-12 * (hi - lo);
    if !(v >= lo - slack && v <= hi + slack) {
        return Err(Error::OutsideTable {
            what,
            value: v,
            lo,
            hi,
        });
    }
    let v = v.clamp(lo, hi);
    let j = match knots.binary_search_by(|k| k.partial_cmp(&v).unwrap()) {
        Ok(j) => j.min(knots.len() - 2),
        Err(j) => j - 1,
    };
    Ok((j, (v - knots[j]) / (knots[j + 1] - knots[j])))
}

fn hermite(p0: f64, p1: f64, m0: f64, m1: f64, h: f64, s: f64) -> f64 {
    let s2 = s * s;
    let s3 = s2 * s;
    (2.0 * s3 - 3.0 * s2 + 1.0) * p0
        + (s3 - 2.0 * s2 + s) * h * m0
        + (-2.0 * s3 + 3.0 * s2) * p1
        + (s3 - s2) * h * m1
}

fn hermite_slope(p0: f64, p1: f64, m0: f64, m1: f64, h: f64, s: f64) -> f64 {
    let s2 = s * s;
    ((6.0 * s2 - 6.0 * s) * p0
        + (3.0 * s2 - 4.0 * s + 1.0) * h * m0
        + (-6.0 * s2 + 6.0 * s) * p1
        + (3.0 * s2 - 2.0 * s) * h * m1)
        / h
}

impl FlowField {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn y_samples(&self) -> &[f64] {
        &self.y
    }

    pub fn x_invariant(&self) -> bool {
        self.x_axes.is_none()
    }

    fn stride(&self) -> usize {
        let m = self.d + 1;
        1 + m + m * m
    }

    fn raw(&self, node: usize, col: usize, yi: usize) -> &[f64] {
        let s = self.stride();
        let o = ((node * self.n_cols + col) * self.y.len() + yi) * s;
        &self.data[o..o + s]
    }

    /// Tabulated values at a node, column and y sample.
    pub fn at(&self, node: usize, col: usize, yi: usize) -> FlowValues {
        let d = self.d;
        let m = d + 1;
        let r = self.raw(node, col, yi);
        let hess = &r[1 + m..];
        FlowValues {
            eta: r[0],
            dy: r[1],
            dyy: hess[0],
            dx: r[2..1 + m].to_vec(),
            dxx: (0..d * d)
                .map(|ab| hess[(ab / d + 1) * m + ab % d + 1])
                .collect(),
            dxy: (0..d).map(|a| hess[a + 1]).collect(),
        }
    }

    pub fn n_columns(&self) -> usize {
        self.n_cols
    }

    /// Interpolation weights over (node, column) for a query `(t, x)`.
    fn corners(&self, t: f64, x: &[f64]) -> Result<Vec<(usize, usize, f64)>> {
        if x.len() != self.d {
            return Err(Error::Dimension(format!(
                "x has {} coordinates, flow is tabulated in {}",
                x.len(),
                self.d
            )));
        }
        let nodes: Vec<f64> = (0..=self.grid.n_steps())
            .map(|i| self.grid.time(i))
            .collect();
        let (ti, tw) = match self.grid.node_of(t) {
            Some(i) if (self.grid.time(i) - t).abs() <= 1e-12 * (1.0 + t.abs()) => (
                i.min(nodes.len() - 2),
                if i == nodes.len() - 1 { 1.0 } else { 0.0 },
            ),
            _ => locate(&nodes, t, "t")?,
        };
        let mut time_w = vec![(ti, 1.0 - tw)];
        if tw != 0.0 {
            time_w.push((ti + 1, tw));
        }
        let mut col_w = vec![(0usize, 1.0)];
        if let Some(axes) = &self.x_axes {
            let mut stride = 1;
            let mut strides = vec![0; self.d];
            for a in (0..self.d).rev() {
                strides[a] = stride;
                stride *= axes[a].len();
            }
            for a in 0..self.d {
                let (j, w) = locate(&axes[a], x[a], "x")?;
                let mut next = Vec::with_capacity(col_w.len() * 2);
                for &(c, cw) in &col_w {
                    next.push((c + j * strides[a], cw * (1.0 - w)));
                    if w != 0.0 {
                        next.push((c + (j + 1) * strides[a], cw * w));
                    }
                }
                col_w = next;
            }
        }
        let mut out = Vec::with_capacity(time_w.len() * col_w.len());
        for &(node, a) in &time_w {
            for &(col, b) in &col_w {
                if a * b != 0.0 {
                    out.push((node, col, a * b));
                }
            }
        }
        Ok(out)
    }

    /// Interpolated flow: cubic Hermite in `y` (Catmull-Rom for the second derivatives), linear in `x` and `t`.
    pub fn eval(&self, t: f64, x: &[f64], y: f64) -> Result<FlowValues> {
        let corners = self.corners(t, x)?;
        let (j, s) = locate(&self.y, y, "y")?;
        let h = self.y[j + 1] - self.y[j];
        let d = self.d;
        let mut out = FlowValues {
            eta: 0.0,
            dy: 0.0,
            dyy: 0.0,
            dx: vec![0.0; d],
            dxx: vec![0.0; d * d],
            dxy: vec![0.0; d],
        };
        let ny = self.y.len();
        for (node, col, w) in corners {
            let a = self.at(node, col, j);
            let b = self.at(node, col, j + 1);
            let before = (j > 0).then(|| self.at(node, col, j - 1));
            let after = (j + 2 < ny).then(|| self.at(node, col, j + 2));
            out.eta += w * hermite(a.eta, b.eta, a.dy, b.dy, h, s);
            out.dy += w * hermite(a.dy, b.dy, a.dyy, b.dyy, h, s);
            let cr = |f: &dyn Fn(&FlowValues) -> f64| -> f64 {
                let (fa, fb) = (f(&a), f(&b));
                let ma = match &before {
                    Some(p) => (fb - f(p)) / (self.y[j + 1] - self.y[j - 1]),
                    None => (fb - fa) / h,
                };
                let mb = match &after {
                    Some(q) => (f(q) - fa) / (self.y[j + 2] - self.y[j]),
                    None => (fb - fa) / h,
                };
                hermite(fa, fb, ma, mb, h, s)
            };
            out.dyy += w * cr(&|v| v.dyy);
            for k in 0..d {
                out.dx[k] += w * hermite(a.dx[k], b.dx[k], a.dxy[k], b.dxy[k], h, s);
                out.dxy[k] += w * cr(&|v| v.dxy[k]);
            }
            for k in 0..d * d {
                out.dxx[k] += w * cr(&|v| v.dxx[k]);
            }
        }
        Ok(out)
    }

    /// `eps(t, x, v)`: the `y` with `eta(t, x, y) = v` on the interpolated table.
    pub fn inverse(&self, t: f64, x: &[f64], v: f64) -> Result<f64> {
        let corners = self.corners(t, x)?;
        let ny = self.y.len();
        let knot = |yi: usize| -> (f64, f64) {
            corners.iter().fold((0.0, 0.0), |(e, s), &(node, col, w)| {
                let r = self.raw(node, col, yi);
                (e + w * r[0], s + w * r[1])
            })
        };
        let knots: Vec<(f64, f64)> = (0..ny).map(knot).collect();
        for (i, &(e, s)) in knots.iter().enumerate() {
            if !(s > 0.0) || (i > 0 && !(e > knots[i - 1].0)) {
                return Err(Error::NonMonotoneFlow(s));
            }
        }
        let etas: Vec<f64> = knots.iter().map(|k| k.0).collect();
        let (j, _) = locate(&etas, v, "eta")?;
        let (lo_y, hi_y) = (self.y[j], self.y[j + 1]);
        let h = hi_y - lo_y;
        let ((p0, m0), (p1, m1)) = (knots[j], knots[j + 1]);
        let f = |y: f64| hermite(p0, p1, m0, m1, h, (y - lo_y) / h) - v;
        let df = |y: f64| hermite_slope(p0, p1, m0, m1, h, (y - lo_y) / h);
        let (mut a, mut b) = (lo_y, hi_y);
        if f(a) >= 0.0 {
            return Ok(a);
        }
        if f(b) <= 0.0 {
            return Ok(b);
        }
        let mut y = lo_y + h * (v - p0) / (p1 - p0);
        for _ in 0..200 {
            let fy = f(y);
            if fy.abs() <= ROOT_TOL * (1.0 + v.abs()) {
                return Ok(y);
            }
            if fy < 0.0 {
                a = y;
            } else {
                b = y;
            }
            let slope = df(y);
            let mut next = y - fy / slope;
            if !(next > a && next < b) {
                next = 0.5 * (a + b);
            }
            if b - a <= 4.0 * f64::EPSILON * (a.abs() + b.abs()) {
                return Ok(next);
            }
            y = next;
        }
        Ok(y)
    }

    /// Smallest tabulated `D_y eta`.
    pub fn min_dy(&self) -> f64 {
        let s = self.stride();
        self.data
            .chunks_exact(s)
            .map(|r| r[1])
            .fold(f64::INFINITY, f64::min)
    }

    /// Whether `eta` is strictly increasing in `y` at every node and column.
    pub fn is_monotone(&self) -> bool {
        let ny = self.y.len();
        (0..=self.grid.n_steps()).all(|node| {
            (0..self.n_cols).all(|col| {
                (1..ny).all(|yi| self.raw(node, col, yi)[0] > self.raw(node, col, yi - 1)[0])
            })
        })
    }

    /// Columns `t, x_1..x_d, y, eta, d_eta_dy` (no `x` columns for an `x`-invariant flow).
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let points = match &self.x_axes {
            Some(axes) => tensor_points(axes),
            None => vec![Vec::new()],
        };
        let xs: Vec<String> = (1..=points[0].len()).map(|k| format!("x_{k},")).collect();
        writeln!(out, "t,{}y,eta,d_eta_dy", xs.concat())?;
        for node in 0..=self.grid.n_steps() {
            for (col, x) in points.iter().enumerate() {
                let xcols: String = x.iter().map(|v| format!("{v:.17e},")).collect();
                for (yi, y) in self.y.iter().enumerate() {
                    let r = self.raw(node, col, yi);
                    writeln!(
                        out,
                        "{:.17e},{xcols}{y:.17e},{:.17e},{:.17e}",
                        self.grid.time(node),
                        r[0],
                        r[1]
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// Inverse flow on a set of target values: `values[(node * n_cols + col) * n_v + k]`,
/// `None` where the query failed (reported in `failures`).
#[derive(Clone, Debug)]
pub struct InverseTable {
    pub v_samples: Vec<f64>,
    pub values: Vec<Option<f64>>,
    pub failures: Vec<String>,
}

pub fn invert_flow(field: &FlowField, v_samples: &[f64]) -> InverseTable {
    let points = match &field.x_axes {
        Some(axes) => tensor_points(axes),
        None => vec![vec![0.0; field.d]],
    };
    let mut values = Vec::new();
    let mut failures = Vec::new();
    for node in 0..=field.grid.n_steps() {
        let t = field.grid.time(node);
        for x in &points {
            for &v in v_samples {
                match field.inverse(t, x, v) {
                    Ok(y) => values.push(Some(y)),
                    Err(e) => {
                        failures.push(format!("t = {t}, x = {x:?}, v = {v}: {e}"));
                        values.push(None);
                    }
                }
            }
        }
    }
    InverseTable {
        v_samples: v_samples.to_vec(),
        values,
        failures,
    }
}

/// `|S - I - 1/2 sum_i (g D_y g)(t_{i+1}, x, eta_{i+1}) dB_i^2|` along the flow started at `y0` (scalar `B`),
/// with `S` the trapezoid Stratonovich sum over consecutive flow nodes and `I` the right-node sum.
/// The correction uses the realized quadratic variation of `B`, which leaves only the O(dt)
/// discretisation error of the flow.
pub fn conversion_residual(
    g: &dyn NoiseCoefficient,
    grid: &TimeGrid,
    b: &Increments,
    x: &[f64],
    y0: f64,
) -> Result<f64> {
    if b.dim() != 1 || g.dim() != 1 || b.n_steps() != grid.n_steps() {
        return Err(Error::Dimension(
            "the conversion residual needs a scalar B on the flow grid".into(),
        ));
    }
    let m = x.len() + 1;
    let mut e = Jet::seed_y(y0, m);
    let mut gv = [0.0];
    let (mut strat, mut ito, mut corr) = (0.0, 0.0, 0.0);
    for i in (0..grid.n_steps()).rev() {
        let db = b.row(i)[0];
        let (t_hi, t_lo) = (grid.time(i + 1), grid.time(i));
        let right = e.v;
        e = heun_step(g, t_hi, t_lo, x, &e, b.row(i));
        g.eval(t_hi, x, right, &[], &mut gv);
        let g_hi = gv[0];
        g.eval(t_lo, x, e.v, &[], &mut gv);
        let g_lo = gv[0];
        let jet = g.jet(t_hi, x, right, 0);
        strat += 0.5 * (g_hi + g_lo) * db;
        ito += g_hi * db;
        corr += 0.5 * jet.g * jet.gy * db * db;
    }
    Ok((strat - ito - corr).abs())
}

/// Records the first out-of-table evaluation made from inside a coefficient closure.
#[derive(Debug, Default)]
pub struct RangeGuard {
    tripped: AtomicBool,
    first: Mutex<Option<Error>>,
}

/// A copy of the errors flow evaluation can raise, keeping their kind.
fn replicate(err: &Error) -> Error {
    match err {
        Error::OutsideTable { what, value, lo, hi } => Error::OutsideTable {
            what,
            value: *value,
            lo: *lo,
            hi: *hi,
        },
        Error::NonMonotoneFlow(v) => Error::NonMonotoneFlow(*v),
        Error::At { context, source } => replicate(source).at(context.clone()),
        other => Error::InvalidParameter(other.to_string()),
    }
}

impl RangeGuard {
    fn record(&self, err: &Error) {
        if !self.tripped.swap(true, Ordering::SeqCst) {
            *self.first.lock().unwrap() = Some(replicate(err));
        }
    }

    pub fn tripped(&self) -> bool {
        self.tripped.load(Ordering::SeqCst)
    }

    pub fn message(&self) -> Option<String> {
        self.first.lock().unwrap().as_ref().map(|e| e.to_string())
    }

    fn take_error(&self) -> Option<Error> {
        self.first.lock().unwrap().as_ref().map(replicate)
    }
}

/// Coefficients `(f~, phi~, 0, h~, l)` of the problem without backward noise.
#[derive(Clone)]
pub struct TransformedCoefficients {
    pub coeffs: CoefficientSet,
    pub guard: Arc<RangeGuard>,
    inner: Arc<TransformParts>,
}

struct TransformParts {
    original: CoefficientSet,
    /// `g = 0`: the flow is the identity and the coefficients pass through unchanged.
    identity: bool,
    field: Arc<FlowField>,
    domain: Domain,
    sde: SdeSpec,
}

impl TransformParts {
    fn f_tilde(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> Result<f64> {
        if self.identity {
            return Ok(self.original.f(t, x, y, z));
        }
        let fv = self.field.eval(t, x, y)?;
        let d = x.len();
        let mut sigma = vec![0.0; d * d];
        let mut drift = vec![0.0; d];
        self.sde.diffusion(x, &mut sigma);
        self.sde.drift(x, &mut drift);
        // sigma^T D_x eta and sigma^T D_xy eta
        let st = |v: &[f64]| -> Vec<f64> {
            (0..d)
                .map(|j| (0..d).map(|i| sigma[i * d + j] * v[i]).sum())
                .collect()
        };
        let s_dx = st(&fv.dx);
        let s_dxy = st(&fv.dxy);
        let arg_z: Vec<f64> = (0..d).map(|j| s_dx[j] + fv.dy * z[j]).collect();
        let g = &self.original.noise;
        let gdg: f64 = (0..g.dim())
            .map(|k| {
                let j = g.jet(t, x, fv.eta, k);
                j.g * j.gy
            })
            .sum();
        let mut lx = 0.0;
        for i in 0..d {
            lx += drift[i] * fv.dx[i];
            for j in 0..d {
                let a: f64 = (0..d).map(|k| sigma[i * d + k] * sigma[j * d + k]).sum();
                lx += 0.5 * a * fv.dxx[i * d + j];
            }
        }
        let cross: f64 = s_dxy.iter().zip(z).map(|(a, b)| a * b).sum();
        let z2: f64 = z.iter().map(|v| v * v).sum();
        Ok(
            (self.original.f(t, x, fv.eta, &arg_z) - 0.5 * gdg + lx + cross + 0.5 * fv.dyy * z2)
                / fv.dy,
        )
    }

    fn phi_tilde(&self, t: f64, x: &[f64], y: f64) -> Result<f64> {
        if self.identity {
            return Ok(self.original.phi(t, x, y));
        }
        let fv = self.field.eval(t, x, y)?;
        let mut n = vec![0.0; x.len()];
        self.domain.grad_psi(x, &mut n);
        let norm = n.iter().map(|v| v * v).sum::<f64>().sqrt();
        let push: f64 = fv.dx.iter().zip(&n).map(|(a, b)| a * b / norm).sum();
        Ok((self.original.phi(t, x, fv.eta) + push) / fv.dy)
    }

    fn h_tilde(&self, t: f64, x: &[f64]) -> Result<Option<f64>> {
        match self.original.h(t, x) {
            Some(h) if self.identity => Ok(Some(h)),
            Some(h) => Ok(Some(self.field.inverse(t, x, h)?)),
            None => Ok(None),
        }
    }
}

impl TransformedCoefficients {
    pub fn f_tilde(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> Result<f64> {
        self.inner.f_tilde(t, x, y, z)
    }

    pub fn phi_tilde(&self, t: f64, x: &[f64], y: f64) -> Result<f64> {
        self.inner.phi_tilde(t, x, y)
    }

    pub fn h_tilde(&self, t: f64, x: &[f64]) -> Result<Option<f64>> {
        self.inner.h_tilde(t, x)
    }

    /// Replaces a result by the first range error hit inside the coefficients, if any.
    pub fn guarded<T>(&self, r: Result<T>) -> Result<T> {
        match self.guard.take_error() {
            Some(e) => Err(e.at("transformed coefficient evaluated outside the flow table")),
            None => r,
        }
    }
}

/// Builds `f~`, `phi~` and `h~` from the flow; `l` is unchanged since the flow is the identity at `T`.
pub fn transform_coefficients(
    coeffs: &CoefficientSet,
    field: Arc<FlowField>,
    domain: &Domain,
    sde: &SdeSpec,
) -> Result<TransformedCoefficients> {
    if coeffs.noise.depends_on_z() {
        return Err(Error::NoiseDependsOnZ);
    }
    if field.dim() != coeffs.d || domain.dim() != coeffs.d || sde.dim() != coeffs.d {
        return Err(Error::Dimension(
            "flow, domain, dynamics and coefficients must share the state dimension".into(),
        ));
    }
    let inner = Arc::new(TransformParts {
        original: coeffs.clone(),
        identity: coeffs.noise.is_zero(),
        field,
        domain: domain.clone(),
        sde: sde.clone(),
    });
    let guard = Arc::new(RangeGuard::default());
    let (pf, gf) = (inner.clone(), guard.clone());
    let (pp, gp) = (inner.clone(), guard.clone());
    let mut out = CoefficientSet::zero(coeffs.d, coeffs.ell())
        .with_constants(coeffs.constants)
        .with_driver(move |t, x, y, z| {
            pf.f_tilde(t, x, y, z).unwrap_or_else(|e| {
                gf.record(&e);
                f64::NAN
            })
        })
        .with_boundary(move |t, x, y| {
            pp.phi_tilde(t, x, y).unwrap_or_else(|e| {
                gp.record(&e);
                f64::NAN
            })
        })
        .with_noise(Arc::new(ZeroNoise(coeffs.ell())));
    out.terminal = coeffs.terminal.clone();
    if coeffs.obstacle.is_some() {
        let (ph, gh) = (inner.clone(), guard.clone());
        out = out.with_obstacle(move |t, x| match ph.h_tilde(t, x) {
            Ok(Some(v)) => v,
            Ok(None) => f64::NEG_INFINITY,
            Err(e) => {
                gh.record(&e);
                f64::NAN
            }
        });
    }
    Ok(TransformedCoefficients {
        coeffs: out,
        guard,
        inner,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{AffineNoise, FnNoise};
    use crate::noise::Channel;

    fn setup(n: usize, seed: u64) -> (TimeGrid, Increments) {
        let grid = TimeGrid::new(0.0, 1.0, n).unwrap();
        let b = Increments::sample(&grid, 1, seed, Channel::Backward, 0).unwrap();
        (grid, b)
    }

    fn ys(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect()
    }

    #[test]
    fn zero_field_is_identity() {
        let (grid, b) = setup(32, 1);
        let f = solve_flow(
            &ZeroNoise(1),
            &grid,
            &b,
            1,
            XSamples::Invariant,
            ys(-1.0, 1.0, 5),
            0,
        )
        .unwrap();
        for node in 0..=32 {
            for yi in 0..5 {
                let v = f.at(node, 0, yi);
                assert_eq!(v.eta, f.y_samples()[yi]);
                assert_eq!(v.dy, 1.0);
            }
        }
        assert_eq!(f.inverse(0.5, &[0.3], 0.25).unwrap(), 0.25);
    }

    #[test]
    fn additive_flow_is_exact() {
        let (grid, b) = setup(64, 2);
        let g = AffineNoise::constant(vec![1.0]);
        let f = solve_flow(&g, &grid, &b, 1, XSamples::Invariant, ys(-1.0, 1.0, 3), 0).unwrap();
        let tails = b.tail_sums();
        for node in 0..=64 {
            for yi in 0..3 {
                assert!(
                    (f.at(node, 0, yi).eta - (f.y_samples()[yi] + tails[node][0])).abs() < 1e-13
                );
            }
        }
    }

    #[test]
    fn exponential_flow_and_inverse() {
        let (grid, b) = setup(4096, 3);
        let g = AffineNoise::linear(vec![1.0]);
        let f = solve_flow(&g, &grid, &b, 1, XSamples::Invariant, ys(0.5, 2.0, 31), 0).unwrap();
        let tails = b.tail_sums();
        let mut worst: f64 = 0.0;
        for node in (0..=4096).step_by(64) {
            for (yi, y) in f.y_samples().iter().enumerate() {
                let exact = y * tails[node][0].exp();
                worst = worst.max(((f.at(node, 0, yi).eta - exact) / exact).abs());
            }
        }
        assert!(worst <= 1e-3, "{worst}");
        let t = grid.time(1000);
        for y in [0.6, 0.77, 1.3, 1.99] {
            let eta = f.eval(t, &[0.0], y).unwrap().eta;
            assert!((f.inverse(t, &[0.0], eta).unwrap() - y).abs() <= 1e-8);
        }
        let v = 1.1;
        let exact = v * (-tails[1000][0]).exp();
        assert!(((f.inverse(t, &[0.0], v).unwrap() - exact) / exact).abs() < 1e-3);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let (grid, b) = setup(200, 4);
        let g = FnNoise {
            ell: 1,
            f: Arc::new(|_, x, y, out| out[0] = 0.4 * (y + 0.5 * x[0]).sin()),
            x_dependent: true,
        };
        let axis: Vec<f64> = ys(-1.0, 1.0, 3);
        let h = 1e-3;
        let (x0, y0) = (0.0, 0.3);
        let f = solve_flow(
            &g,
            &grid,
            &b,
            1,
            XSamples::Grid(vec![axis]),
            vec![y0 - h, y0, y0 + h],
            0,
        )
        .unwrap();
        let fx = solve_flow(
            &g,
            &grid,
            &b,
            1,
            XSamples::Grid(vec![vec![x0 - h, x0, x0 + h]]),
            vec![y0 - 1.0, y0, y0 + 1.0],
            0,
        )
        .unwrap();
        for node in [0, 50, 199] {
            let c = f.at(node, 1, 1);
            let (m, p) = (f.at(node, 1, 0), f.at(node, 1, 2));
            assert!(((p.eta - m.eta) / (2.0 * h) - c.dy).abs() < 1e-5);
            assert!(((p.eta - 2.0 * c.eta + m.eta) / (h * h) - c.dyy).abs() < 1e-3);
            assert!(((p.dx[0] - m.dx[0]) / (2.0 * h) - c.dxy[0]).abs() < 1e-5);
            let cx = fx.at(node, 1, 1);
            let (mx, px) = (fx.at(node, 0, 1), fx.at(node, 2, 1));
            assert!(((px.eta - mx.eta) / (2.0 * h) - cx.dx[0]).abs() < 1e-5);
            assert!(((px.eta - 2.0 * cx.eta + mx.eta) / (h * h) - cx.dxx[0]).abs() < 1e-3);
        }
    }

    #[test]
    fn range_guards() {
        let (grid, b) = setup(16, 5);
        let g = AffineNoise::linear(vec![0.5]);
        let f = solve_flow(&g, &grid, &b, 1, XSamples::Invariant, ys(0.2, 5.0, 9), 0).unwrap();
        assert!(matches!(
            f.eval(0.5, &[0.0], 30.0),
            Err(Error::OutsideTable { what: "y", .. })
        ));
        assert!(matches!(
            f.eval(1.5, &[0.0], 1.0),
            Err(Error::OutsideTable { what: "t", .. })
        ));
        assert!(matches!(
            f.inverse(0.5, &[0.0], 100.0),
            Err(Error::OutsideTable { what: "eta", .. })
        ));
        let table = invert_flow(&f, &[1.0, 100.0]);
        assert_eq!(table.failures.len(), 17);
        assert!(table.values.iter().step_by(2).all(|v| v.is_some()));
    }

    #[test]
    fn conversion_residual_trivial_cases() {
        let (grid, b) = setup(128, 6);
        let c = AffineNoise::constant(vec![0.7]);
        assert_eq!(
            conversion_residual(&c, &grid, &b, &[0.0], 1.0).unwrap(),
            0.0
        );
        let lin = AffineNoise::linear(vec![1.0]);
        let zero = Increments::zeros(128, 1);
        assert_eq!(
            conversion_residual(&lin, &grid, &zero, &[0.0], 1.0).unwrap(),
            0.0
        );
    }

    #[test]
    fn transform_of_zero_noise_is_identity() {
        let (grid, b) = setup(10, 7);
        let dom = Domain::interval(-2.0, 2.0).unwrap();
        let sde = SdeSpec::brownian(1, 1.0).unwrap();
        let cs = CoefficientSet::zero(1, 1)
            .with_driver(|t, x, y, z| t + x[0] * y - z[0] * z[0])
            .with_boundary(|_, x, y| x[0] - y)
            .with_obstacle(|t, x| x[0] * t - 0.3);
        let field = Arc::new(
            solve_flow(
                &ZeroNoise(1),
                &grid,
                &b,
                1,
                XSamples::Invariant,
                ys(-5.0, 5.0, 21),
                0,
            )
            .unwrap(),
        );
        let tc = transform_coefficients(&cs, field, &dom, &sde).unwrap();
        for (t, x, y, z) in [
            (0.1, 0.5, 1.2, 0.3),
            (0.7, -1.9, -4.0, 2.0),
            (1.0, 2.0, 0.0, -1.0),
        ] {
            assert!((tc.coeffs.f(t, &[x], y, &[z]) - cs.f(t, &[x], y, &[z])).abs() < 1e-12);
            assert!((tc.coeffs.phi(t, &[x], y) - cs.phi(t, &[x], y)).abs() < 1e-12);
            assert!((tc.coeffs.h(t, &[x]).unwrap() - cs.h(t, &[x]).unwrap()).abs() < 1e-12);
        }
        assert!(!tc.guard.tripped());
    }

    #[test]
    fn transform_of_linear_noise() {
        // g(y) = y, f = 0, z = 0: f~ = -(1/2) eta / D_y eta, which equals -(1/2) y for the exponential flow
        let (grid, b) = setup(256, 8);
        let dom = Domain::interval(-2.0, 2.0).unwrap();
        let sde = SdeSpec::brownian(1, 1.0).unwrap();
        let cs = CoefficientSet::zero(1, 1).with_noise(Arc::new(AffineNoise::linear(vec![1.0])));
        let field = Arc::new(
            solve_flow(
                cs.noise.as_ref(),
                &grid,
                &b,
                1,
                XSamples::Invariant,
                ys(0.1, 4.0, 40),
                0,
            )
            .unwrap(),
        );
        let tc = transform_coefficients(&cs, field.clone(), &dom, &sde).unwrap();
        let t = grid.time(100);
        for y in [0.5, 1.0, 2.5] {
            let fv = field.eval(t, &[0.0], y).unwrap();
            let ft = tc.f_tilde(t, &[0.0], y, &[0.0]).unwrap();
            assert!((ft + 0.5 * fv.eta / fv.dy).abs() < 1e-12);
            assert!((ft + 0.5 * y).abs() < 1e-3 * y);
        }
        assert!(tc.f_tilde(t, &[0.0], 50.0, &[0.0]).is_err());
        assert!(tc.coeffs.f(t, &[0.0], 50.0, &[0.0]).is_nan());
        assert!(tc.guard.tripped());
        let err = tc.guarded(Ok(())).unwrap_err();
        assert!(!err.is_validation(), "{err}");
    }
}
