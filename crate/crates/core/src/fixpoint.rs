//! Picard iteration for a noise coefficient depending on `(y, z)`, measured
//! in the exponentially weighted norm of the contraction argument, and an
//! empirical check of the comparison theorem.

use std::sync::Arc;

use rayon::prelude::*;

use crate::bdsde::{self, BackwardSolution, Scheme, SolverOptions};
use crate::coefficients::{CoefficientSet, Constants};
use crate::error::{Error, Result};
use crate::reflected_sde::PathEnsemble;

/// Weights of `c E int e^{mu s + beta A} |Y|^2 ds + b E int e^{mu s + beta A} |Y|^2 dA + E int e^{mu s + beta A} |Z|^2 ds`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormWeights {
    pub mu: f64,
    /// Exponent of the local-time weight (the declared `beta`, non-positive).
    pub beta: f64,
    pub alpha_prime: f64,
    pub c_bar: f64,
    pub beta_bar: f64,
}

impl NormWeights {
    /// `c_bar = c / alpha`, `beta_bar = |beta| / alpha'` and
    /// `mu = alpha' c / alpha + c / (1 - alpha') + 1 - alpha'`;
    /// `alpha'` defaults to `(1 + alpha) / 2`.
    pub fn from_constants(constants: &Constants, alpha_prime: Option<f64>) -> Result<Self> {
        constants.validate()?;
        let alpha = constants.alpha;
        let ap = alpha_prime.unwrap_or(0.5 * (1.0 + alpha));
        if !(ap > alpha && ap < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha' must lie in (alpha, 1) = ({alpha}, 1), got {ap}"
            )));
        }
        let c = constants.c;
        Ok(NormWeights {
            mu: ap * c / alpha + c / (1.0 - ap) + 1.0 - ap,
            beta: constants.beta,
            alpha_prime: ap,
            c_bar: c / alpha,
            beta_bar: constants.beta.abs() / ap,
        })
    }

    pub fn with_mu(mut self, mu: f64) -> Self {
        self.mu = mu;
        self
    }

    /// The contraction factor `alpha / alpha'` predicted for the squared norm.
    pub fn predicted_ratio(&self, alpha: f64) -> f64 {
        alpha / self.alpha_prime
    }
}

/// Squared weighted norm of `(Y_a - Y_b, Z_a - Z_b)`, discretized on the grid and averaged over paths.
pub fn weighted_distance(
    a: &BackwardSolution,
    b: &BackwardSolution,
    weights: &NormWeights,
    ens: &PathEnsemble,
) -> Result<f64> {
    if a.n_paths != b.n_paths
        || a.grid != b.grid
        || a.start_node != b.start_node
        || a.d != b.d
        || ens.n_paths() != a.n_paths
        || ens.grid != a.grid
    {
        return Err(Error::Dimension(
            "solutions and paths do not share the same shape".into(),
        ));
    }
    let dt = a.grid.dt();
    let n = a.n_paths;
    let per_path: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|p| {
            let mut s = 0.0;
            for i in a.start_node..a.n_steps() {
                let w = (weights.mu * a.grid.time(i) + weights.beta * ens.a(p, i)).exp();
                let dy = a.y(p, i) - b.y(p, i);
                let dz2: f64 = a
                    .z(p, i)
                    .iter()
                    .zip(b.z(p, i))
                    .map(|(u, v)| (u - v).powi(2))
                    .sum();
                s += w
                    * (weights.c_bar * dy * dy * dt
                        + weights.beta_bar * dy * dy * ens.da(p, i)
                        + dz2 * dt);
            }
            s
        })
        .collect();
    Ok(crate::regression::chunked_sum(n, 1, |r, acc| acc[0] += per_path[r])[0] / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PicardOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Ratios are reported only when the previous distance exceeds this.
    pub noise_floor: f64,
}

impl Default for PicardOptions {
    fn default() -> Self {
        PicardOptions {
            tol: 1e-4,
            max_iter: 20,
            noise_floor: 1e-14,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PicardReport {
    /// `||Phi^k - Phi^{k-1}||^2` for `k = 1, 2, ...`.
    pub distances: Vec<f64>,
    pub ratios: Vec<f64>,
    pub converged: bool,
    /// Number of iterations after the initial solve.
    pub iterations: usize,
    pub predicted_ratio: f64,
}

/// `g(t_{i+1}, X_{i+1}, Y_{i+1}, Z_{i+1})` of the previous iterate; `Z_N` is taken as `Z_{N-1}`.
fn noise_values(
    coeffs: &CoefficientSet,
    ens: &PathEnsemble,
    prev: Option<&BackwardSolution>,
) -> Vec<Vec<f64>> {
    let n = ens.n_paths();
    let ell = ens.ell();
    let d = ens.d();
    let n_steps = ens.n_steps();
    (0..n_steps)
        .into_par_iter()
        .map(|i| {
            let t = ens.grid.time(i + 1);
            let mut out = vec![0.0; n * ell];
            let zero = vec![0.0; d];
            for p in 0..n {
                let (y, z) = match prev {
                    Some(s) => (s.y(p, i + 1), s.z(p, (i + 1).min(n_steps - 1))),
                    None => (0.0, zero.as_slice()),
                };
                coeffs
                    .noise
                    .eval(t, ens.x(p, i + 1), y, z, &mut out[p * ell..(p + 1) * ell]);
            }
            out
        })
        .collect()
}

/// Iterates `(Y, Z) -> Phi(Y, Z)`, where `Phi` solves the equation with `g` frozen at the previous iterate,
/// starting from `Phi(0, 0)`. The obstacle, when present, is enforced by the direct scheme.
pub fn picard_solve(
    coeffs: &CoefficientSet,
    ens: &PathEnsemble,
    opts: &SolverOptions,
    weights: &NormWeights,
    picard: &PicardOptions,
) -> Result<(BackwardSolution, PicardReport)> {
    coeffs.constants.validate()?;
    let scheme = if coeffs.obstacle.is_some() {
        Scheme::Direct
    } else {
        Scheme::Generalized
    };
    let mut current = bdsde::solve_with_noise(
        coeffs,
        ens,
        scheme,
        opts,
        Some(&noise_values(coeffs, ens, None)),
    )?;
    let mut report = PicardReport {
        distances: Vec::new(),
        ratios: Vec::new(),
        converged: false,
        iterations: 0,
        predicted_ratio: weights.predicted_ratio(coeffs.constants.alpha),
    };
    for k in 1..=picard.max_iter {
        let next = bdsde::solve_with_noise(
            coeffs,
            ens,
            scheme,
            opts,
            Some(&noise_values(coeffs, ens, Some(&current))),
        )?;
        let dist = weighted_distance(&next, &current, weights, ens)?;
        if let Some(&prev) = report.distances.last() {
            if prev > picard.noise_floor {
                report.ratios.push(dist / prev);
            }
        }
        report.distances.push(dist);
        report.iterations = k;
        current = next;
        if dist < picard.tol {
            report.converged = true;
            break;
        }
    }
    if !report.converged {
        log::warn!(
            "Picard iteration did not reach {} within {} iterations",
            picard.tol,
            picard.max_iter
        );
    }
    Ok((current, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonReport {
    /// Paths with `Y_a - Y_b > threshold`, per node.
    pub violations: Vec<usize>,
    pub total_violations: usize,
    /// `max (Y_a - Y_b)` over paths and solved nodes.
    pub worst: f64,
    pub threshold: f64,
}

fn same_noise(a: &CoefficientSet, b: &CoefficientSet) -> bool {
    Arc::as_ptr(&a.noise) as *const () == Arc::as_ptr(&b.noise) as *const ()
}

/// Solves both problems on the same paths and counts ordering violations of `Y_a <= Y_b`
/// beyond three times the larger scheme tolerance.
pub fn comparison_check(
    a: &CoefficientSet,
    b: &CoefficientSet,
    ens: &PathEnsemble,
    opts: &SolverOptions,
) -> Result<ComparisonReport> {
    if !same_noise(a, b) {
        return Err(Error::DifferentNoise);
    }
    if a.obstacle.is_some() || b.obstacle.is_some() {
        return Err(Error::ObstacleNotAllowed);
    }
    comparison_scan(a, b, ens, Scheme::Generalized, opts)
}

/// The same count for any scheme, without the hypotheses of the comparison theorem.
pub fn comparison_scan(
    a: &CoefficientSet,
    b: &CoefficientSet,
    ens: &PathEnsemble,
    scheme: Scheme,
    opts: &SolverOptions,
) -> Result<ComparisonReport> {
    let (sa, sb) = rayon::join(
        || bdsde::solve(a, ens, scheme, opts),
        || bdsde::solve(b, ens, scheme, opts),
    );
    let (sa, sb) = (sa?, sb?);
    let threshold = 3.0 * sa.tolerance().max(sb.tolerance());
    let mut violations = vec![0; sa.n_steps() + 1];
    let mut worst = f64::NEG_INFINITY;
    for (i, count) in violations.iter_mut().enumerate().skip(sa.start_node) {
        for (ya, yb) in sa.y_node(i).iter().zip(sb.y_node(i)) {
            let gap = ya - yb;
            worst = worst.max(gap);
            if gap > threshold {
                *count += 1;
            }
        }
    }
    Ok(ComparisonReport {
        total_violations: violations.iter().sum(),
        violations,
        worst,
        threshold,
    })
}
