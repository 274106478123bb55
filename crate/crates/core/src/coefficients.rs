//! Data of the reflected generalized BDSDE: terminal function, drivers,
//! noise coefficient, obstacle and the structural constants.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TerminalFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// `f(t, x, y, z)`.
pub type DriverFn = Arc<dyn Fn(f64, &[f64], f64, &[f64]) -> f64 + Send + Sync>;
/// `phi(t, x, y)`.
pub type BoundaryFn = Arc<dyn Fn(f64, &[f64], f64) -> f64 + Send + Sync>;
/// `h(t, x)`.
pub type ObstacleFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

/// Value and derivatives of one component of `g` at `(t, x, y)`, used by the flow equations.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NoiseJet {
    pub g: f64,
    pub gy: f64,
    pub gyy: f64,
    pub gx: Vec<f64>,
    /// `d x d`, row-major.
    pub gxx: Vec<f64>,
    pub gxy: Vec<f64>,
}

/// The backward-noise coefficient `g(t, x, y, z)` with values in `R^l`.
pub trait NoiseCoefficient: Send + Sync {
    fn dim(&self) -> usize;

    fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64], out: &mut [f64]);

    fn depends_on_z(&self) -> bool {
        false
    }

    fn depends_on_x(&self) -> bool {
        true
    }

    fn is_zero(&self) -> bool {
        false
    }

    /// Derivatives of component `k` at `z = 0`; central finite differences unless overridden.
    fn jet(&self, t: f64, x: &[f64], y: f64, k: usize) -> NoiseJet {
        let d = x.len();
        let zero = vec![0.0; d];
        let mut buf = vec![0.0; self.dim()];
        let mut at = |x: &[f64], y: f64| {
            self.eval(t, x, y, &zero, &mut buf);
            buf[k]
        };
        let hy = 1e-4 * (1.0 + y.abs());
        let g = at(x, y);
        let (gp, gm) = (at(x, y + hy), at(x, y - hy));
        let mut jet = NoiseJet {
            g,
            gy: (gp - gm) / (2.0 * hy),
            gyy: (gp - 2.0 * g + gm) / (hy * hy),
            gx: vec![0.0; d],
            gxx: vec![0.0; d * d],
            gxy: vec![0.0; d],
        };
        if !self.depends_on_x() {
            return jet;
        }
        let mut xs = x.to_vec();
        for i in 0..d {
            let hi = 1e-4 * (1.0 + x[i].abs());
            xs[i] = x[i] + hi;
            let (p0, pp, pm) = (at(&xs, y), at(&xs, y + hy), at(&xs, y - hy));
            xs[i] = x[i] - hi;
            let (m0, mp, mm) = (at(&xs, y), at(&xs, y + hy), at(&xs, y - hy));
            xs[i] = x[i];
            jet.gx[i] = (p0 - m0) / (2.0 * hi);
            jet.gxx[i * d + i] = (p0 - 2.0 * g + m0) / (hi * hi);
            jet.gxy[i] = ((pp - pm) - (mp - mm)) / (4.0 * hi * hy);
            for j in 0..i {
                let hj = 1e-4 * (1.0 + x[j].abs());
                let mut corner = |si: f64, sj: f64| {
                    xs[i] = x[i] + si * hi;
                    xs[j] = x[j] + sj * hj;
                    let v = at(&xs, y);
                    xs[i] = x[i];
                    xs[j] = x[j];
                    v
                };
                let v = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0)
                    + corner(-1.0, -1.0))
                    / (4.0 * hi * hj);
                jet.gxx[i * d + j] = v;
                jet.gxx[j * d + i] = v;
            }
        }
        jet
    }
}

/// `g = 0`.
#[derive(Clone, Copy, Debug)]
pub struct ZeroNoise(pub usize);

impl NoiseCoefficient for ZeroNoise {
    fn dim(&self) -> usize {
        self.0
    }

    fn eval(&self, _: f64, _: &[f64], _: f64, _: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }

    fn depends_on_x(&self) -> bool {
        false
    }

    fn is_zero(&self) -> bool {
        true
    }

    fn jet(&self, _: f64, x: &[f64], _: f64, _: usize) -> NoiseJet {
        let d = x.len();
        NoiseJet {
            gx: vec![0.0; d],
            gxx: vec![0.0; d * d],
            gxy: vec![0.0; d],
            ..Default::default()
        }
    }
}

/// `g_k = a_y[k] y + <a_z[k], z> + offset[k]`; `a_z` is `l x d`, row-major, or empty.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineNoise {
    pub a_y: Vec<f64>,
    pub a_z: Vec<f64>,
    pub offset: Vec<f64>,
}

impl AffineNoise {
    pub fn constant(offset: Vec<f64>) -> Self {
        AffineNoise {
            a_y: vec![0.0; offset.len()],
            a_z: Vec::new(),
            offset,
        }
    }

    pub fn linear(a_y: Vec<f64>) -> Self {
        let ell = a_y.len();
        AffineNoise {
            a_y,
            a_z: Vec::new(),
            offset: vec![0.0; ell],
        }
    }

    /// Lipschitz constant of `g` in `z` (operator norm bound by the Frobenius norm).
    pub fn z_lipschitz(&self) -> f64 {
        self.a_z.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl NoiseCoefficient for AffineNoise {
    fn dim(&self) -> usize {
        self.offset.len()
    }

    fn eval(&self, _: f64, _: &[f64], y: f64, z: &[f64], out: &mut [f64]) {
        let d = z.len();
        for k in 0..out.len() {
            let mut v = self.a_y[k] * y + self.offset[k];
            if !self.a_z.is_empty() {
                v += (0..d).map(|j| self.a_z[k * d + j] * z[j]).sum::<f64>();
            }
            out[k] = v;
        }
    }

    fn depends_on_z(&self) -> bool {
        self.a_z.iter().any(|&v| v != 0.0)
    }

    fn depends_on_x(&self) -> bool {
        false
    }

    fn is_zero(&self) -> bool {
        !self.depends_on_z() && self.a_y.iter().chain(&self.offset).all(|&v| v == 0.0)
    }

    fn jet(&self, _: f64, x: &[f64], y: f64, k: usize) -> NoiseJet {
        let d = x.len();
        NoiseJet {
            g: self.a_y[k] * y + self.offset[k],
            gy: self.a_y[k],
            gyy: 0.0,
            gx: vec![0.0; d],
            gxx: vec![0.0; d * d],
            gxy: vec![0.0; d],
        }
    }
}

pub type NoiseFn = Arc<dyn Fn(f64, &[f64], f64, &mut [f64]) + Send + Sync>;

/// A `z`-independent coefficient `g(t, x, y)` given by a closure; derivatives by finite differences.
#[derive(Clone)]
pub struct FnNoise {
    pub ell: usize,
    pub f: NoiseFn,
    pub x_dependent: bool,
}

impl NoiseCoefficient for FnNoise {
    fn dim(&self) -> usize {
        self.ell
    }

    fn eval(&self, t: f64, x: &[f64], y: f64, _: &[f64], out: &mut [f64]) {
        (self.f)(t, x, y, out)
    }

    fn depends_on_x(&self) -> bool {
        self.x_dependent
    }
}

/// Declared structural constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constants {
    pub c: f64,
    #[serde(rename = "K")]
    pub k: f64,
    pub beta: f64,
    pub alpha: f64,
    #[serde(default)]
    pub mu: f64,
}

impl Default for Constants {
    fn default() -> Self {
        Constants {
            c: 1.0,
            k: 1.0,
            beta: -1.0,
            alpha: 0.5,
            mu: 0.0,
        }
    }
}

impl Constants {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "beta must be negative, got {}",
                self.beta
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.c > 0.0) || !(self.k > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "c and K must be positive, got c = {}, K = {}",
                self.c, self.k
            )));
        }
        if !self.mu.is_finite() {
            return Err(Error::InvalidParameter("mu must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct CoefficientSet {
    pub d: usize,
    pub terminal: TerminalFn,
    pub driver: DriverFn,
    pub boundary: BoundaryFn,
    pub noise: Arc<dyn NoiseCoefficient>,
    pub obstacle: Option<ObstacleFn>,
    pub constants: Constants,
}

impl fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("d", &self.d)
            .field("ell", &self.noise.dim())
            .field("obstacle", &self.obstacle.is_some())
            .field("constants", &self.constants)
            .finish()
    }
}

impl CoefficientSet {
    /// Everything zero: `l = f = phi = g = 0`, no obstacle.
    pub fn zero(d: usize, ell: usize) -> Self {
        CoefficientSet {
            d,
            terminal: Arc::new(|_| 0.0),
            driver: Arc::new(|_, _, _, _| 0.0),
            boundary: Arc::new(|_, _, _| 0.0),
            noise: Arc::new(ZeroNoise(ell)),
            obstacle: None,
            constants: Constants::default(),
        }
    }

    pub fn with_terminal(mut self, l: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.terminal = Arc::new(l);
        self
    }

    pub fn with_driver(
        mut self,
        f: impl Fn(f64, &[f64], f64, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.driver = Arc::new(f);
        self
    }

    pub fn with_boundary(
        mut self,
        phi: impl Fn(f64, &[f64], f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.boundary = Arc::new(phi);
        self
    }

    pub fn with_noise(mut self, g: Arc<dyn NoiseCoefficient>) -> Self {
        self.noise = g;
        self
    }

    pub fn with_obstacle(mut self, h: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.obstacle = Some(Arc::new(h));
        self
    }

    pub fn without_obstacle(mut self) -> Self {
        self.obstacle = None;
        self
    }

    pub fn with_constants(mut self, constants: Constants) -> Self {
        self.constants = constants;
        self
    }

    pub fn ell(&self) -> usize {
        self.noise.dim()
    }

    pub fn l(&self, x: &[f64]) -> f64 {
        (self.terminal)(x)
    }

    pub fn f(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64 {
        (self.driver)(t, x, y, z)
    }

    pub fn phi(&self, t: f64, x: &[f64], y: f64) -> f64 {
        (self.boundary)(t, x, y)
    }

    pub fn h(&self, t: f64, x: &[f64]) -> Option<f64> {
        self.obstacle.as_ref().map(|h| h(t, x))
    }

    /// Spot checks of the structural hypotheses on sampled arguments.
    pub fn check_structure(
        &self,
        t_samples: &[f64],
        x_samples: &[Vec<f64>],
        y_samples: &[f64],
        t_end: f64,
    ) -> StructureReport {
        let beta = self.constants.beta;
        let mut monotonicity_excess = f64::NEG_INFINITY;
        for &t in t_samples {
            for x in x_samples {
                for (i, &y1) in y_samples.iter().enumerate() {
                    for &y2 in &y_samples[..i] {
                        let dy = y1 - y2;
                        let lhs = dy * (self.phi(t, x, y1) - self.phi(t, x, y2));
                        monotonicity_excess =
                            monotonicity_excess.max((lhs - beta * dy * dy) / (dy * dy));
                    }
                }
            }
        }
        let terminal_excess = self.obstacle.as_ref().map(|h| {
            x_samples
                .iter()
                .map(|x| h(t_end, x) - self.l(x))
                .fold(f64::NEG_INFINITY, f64::max)
        });
        StructureReport {
            monotonicity_excess,
            terminal_excess,
        }
    }
}

/// Worst violations found by [`CoefficientSet::check_structure`]; non-positive values mean no violation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StructureReport {
    /// `max (<y1 - y2, phi(y1) - phi(y2)> - beta |y1 - y2|^2) / |y1 - y2|^2`.
    pub monotonicity_excess: f64,
    /// `max_x h(T, x) - l(x)`, when an obstacle is present.
    pub terminal_excess: Option<f64>,
}
