//! Smooth bounded domains described by a level function `psi`.
//!
//! Sign convention: `psi > 0` in the open domain, `psi = 0` on the boundary and
//! `psi < 0` outside. The gradient of `psi` on the boundary points into the
//! domain, so the normalized gradient is the inward unit normal used by the
//! reflection term and by Neumann conditions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance of the ellipsoid closest-point root finder.
const PROJECTION_RTOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Ball {
        center: Vec<f64>,
        radius: f64,
    },
    Ellipsoid {
        center: Vec<f64>,
        semi_axes: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    shape: Shape,
    boundary_tol: f64,
}

impl Domain {
    pub fn new(shape: Shape) -> Result<Self> {
        match &shape {
            Shape::Ball { center, radius } => {
                if center.is_empty() {
                    return Err(Error::Dimension(
                        "ball center must have at least one coordinate".into(),
                    ));
                }
                if !(*radius > 0.0 && radius.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "ball radius must be positive, got {radius}"
                    )));
                }
            }
            Shape::Ellipsoid { center, semi_axes } => {
                if center.is_empty() || center.len() != semi_axes.len() {
                    return Err(Error::Dimension(format!(
                        "ellipsoid center has {} coordinates but {} semi-axes",
                        center.len(),
                        semi_axes.len()
                    )));
                }
                if semi_axes.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
                    return Err(Error::InvalidParameter(
                        "ellipsoid semi-axes must be positive".into(),
                    ));
                }
            }
        }
        let mut domain = Domain {
            shape,
            boundary_tol: 0.0,
        };
        domain.boundary_tol = 1e-8 * domain.diameter();
        Ok(domain)
    }

    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        Self::new(Shape::Ball { center, radius })
    }

    pub fn ellipsoid(center: Vec<f64>, semi_axes: Vec<f64>) -> Result<Self> {
        Self::new(Shape::Ellipsoid { center, semi_axes })
    }

    /// The open interval `(lo, hi)` as a one-dimensional ball.
    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        if !(hi > lo) {
            return Err(Error::InvalidParameter(format!(
                "empty interval ({lo}, {hi})"
            )));
        }
        Self::ball(vec![0.5 * (lo + hi)], 0.5 * (hi - lo))
    }

    pub fn with_boundary_tol(mut self, tol: f64) -> Self {
        self.boundary_tol = tol;
        self
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn boundary_tol(&self) -> f64 {
        self.boundary_tol
    }

    pub fn dim(&self) -> usize {
        self.center().len()
    }

    pub fn center(&self) -> &[f64] {
        match &self.shape {
            Shape::Ball { center, .. } | Shape::Ellipsoid { center, .. } => center,
        }
    }

    pub fn diameter(&self) -> f64 {
        match &self.shape {
            Shape::Ball { radius, .. } => 2.0 * radius,
            Shape::Ellipsoid { semi_axes, .. } => {
                2.0 * semi_axes.iter().cloned().fold(0.0, f64::max)
            }
        }
    }

    pub fn psi(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        match &self.shape {
            Shape::Ball { center, radius } => radius - dist(x, center),
            Shape::Ellipsoid { center, semi_axes } => {
                let q: f64 = x
                    .iter()
                    .zip(center)
                    .zip(semi_axes)
                    .map(|((xi, ci), ai)| ((xi - ci) / ai).powi(2))
                    .sum();
                // scaled so that psi behaves like a length near the boundary
                0.5 * min_axis(semi_axes) * (1.0 - q)
            }
        }
    }

    /// Gradient of `psi`. For a ball it is the unit vector pointing to the
    /// center (zero at the center itself).
    pub fn grad_psi(&self, x: &[f64], out: &mut [f64]) {
        match &self.shape {
            Shape::Ball { center, .. } => {
                let r = dist(x, center);
                for ((o, xi), ci) in out.iter_mut().zip(x).zip(center) {
                    *o = if r > 0.0 { -(xi - ci) / r } else { 0.0 };
                }
            }
            Shape::Ellipsoid { center, semi_axes } => {
                let s = min_axis(semi_axes);
                for (((o, xi), ci), ai) in out.iter_mut().zip(x).zip(center).zip(semi_axes) {
                    *o = -s * (xi - ci) / (ai * ai);
                }
            }
        }
    }

    pub fn in_closure(&self, x: &[f64]) -> bool {
        self.psi(x) >= -self.boundary_tol
    }

    pub fn on_boundary(&self, x: &[f64]) -> bool {
        self.psi(x).abs() <= self.boundary_tol
    }

    /// Inward unit normal at a boundary point.
    pub fn inward_normal(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "point has {} coordinates, domain has {}",
                x.len(),
                self.dim()
            )));
        }
        let psi = self.psi(x);
        if psi.abs() > self.boundary_tol {
            return Err(Error::NotOnBoundary {
                psi,
                tol: self.boundary_tol,
            });
        }
        let mut n = vec![0.0; x.len()];
        self.grad_psi(x, &mut n);
        let norm = n.iter().map(|v| v * v).sum::<f64>().sqrt();
        n.iter_mut().for_each(|v| *v /= norm);
        Ok(n)
    }

    /// Closest point of the closed domain and the distance moved.
    pub fn project_to_closure(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let mut out = x.to_vec();
        let moved = self.project_in_place(&mut out);
        (out, moved)
    }

    /// In-place variant of [`Domain::project_to_closure`]; returns the displacement length.
    /// Points within the boundary tolerance count as inside, so projecting twice
    /// changes nothing.
    pub fn project_in_place(&self, x: &mut [f64]) -> f64 {
        if self.in_closure(x) {
            return 0.0;
        }
        match &self.shape {
            Shape::Ball { center, radius } => {
                let r = dist(x, center);
                for (xi, ci) in x.iter_mut().zip(center) {
                    *xi = ci + (*xi - ci) * (radius / r);
                }
                r - radius
            }
            Shape::Ellipsoid { center, semi_axes } => {
                let y: Vec<f64> = x.iter().zip(center).map(|(xi, ci)| xi - ci).collect();
                let lambda = ellipsoid_multiplier(&y, semi_axes);
                let mut moved = 0.0;
                for (i, xi) in x.iter_mut().enumerate() {
                    let a2 = semi_axes[i] * semi_axes[i];
                    let p = a2 * y[i] / (a2 + lambda);
                    moved += (p - y[i]).powi(2);
                    *xi = center[i] + p;
                }
                moved.sqrt()
            }
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(u, v)| (u - v).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn min_axis(axes: &[f64]) -> f64 {
    axes.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Lagrange multiplier of the closest-point problem for an exterior point `y`
/// (relative to the center): the root `lambda > 0` of
/// `sum_i (a_i y_i / (a_i^2 + lambda))^2 = 1`, found by Newton's method
/// safeguarded with bisection.
fn ellipsoid_multiplier(y: &[f64], axes: &[f64]) -> f64 {
    let residual = |lambda: f64| -> (f64, f64) {
        let mut f = -1.0;
        let mut df = 0.0;
        for (yi, ai) in y.iter().zip(axes) {
            let a2 = ai * ai;
            let den = a2 + lambda;
            let t = ai * yi / den;
            f += t * t;
            df -= 2.0 * t * t / den;
        }
        (f, df)
    };
    let norm_y = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut lo = 0.0;
    let mut hi = axes.iter().cloned().fold(0.0, f64::max) * norm_y;
    let mut lambda = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (f, df) = residual(lambda);
        if f > 0.0 {
            lo = lambda;
        } else {
            hi = lambda;
        }
        let mut next = lambda - f / df;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - lambda).abs() <= PROJECTION_RTOL * (1.0 + lambda)
            || hi - lo <= PROJECTION_RTOL * (1.0 + hi)
        {
            return next;
        }
        lambda = next;
    }
    lambda
}
