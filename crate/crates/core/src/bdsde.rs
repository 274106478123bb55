//! Backward least-squares Monte Carlo for the generalized, penalized and
//! reflected BDSDE, conditioned on one frozen backward path `B`.
//!
//! At step `i` (from `N - 1` down to the starting node):
//!
//! ```text
//! Z_i = E_i[(Y_{i+1} - mean Y_{i+1}) dW_i] / dt
//! C_i = E_i[Y_{i+1} + f(t_{i+1}, X_{i+1}, Y_{i+1}, Z_i) dt + phi(t_{i+1}, X_{i+1}, Y_{i+1}) dA_i
//!           + <g(t_{i+1}, X_{i+1}, Y_{i+1}), dB_i>]
//! ```
//!
//! where `E_i` is the regression on the basis evaluated at `X_i`. The scheme
//! then maps the continuation value `C_i` to `Y_i` and the increment `dK_i`.
//! Every coefficient sees the right-node state, so a Doss-Sussman change of
//! variable `Y = eta(t, X, V)` commutes exactly with one backward step.
//! The optional inner pass re-evaluates `f(t_i, X_i, Y_i, Z_i)` and
//! `phi(t_{i+1}, X_{i+1}, Y_i)` at the fresh estimate.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientSet;
use crate::error::{Error, Result};
use crate::reflected_sde::PathEnsemble;
use crate::regression::{self, BasisSpec, Design, Projector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    /// `Y = C + n dt (C - h)^-`; refused when `n dt` exceeds the stiffness cap.
    Explicit,
    /// `Y = C + n dt (Y - h)^-`, solved in closed form.
    Implicit,
    /// Explicit below the stiffness cap, implicit above it.
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scheme {
    /// No constraint: `Y = C`. The obstacle, if any, still enters the basis.
    Generalized,
    /// Driver `f + n (y - h)^-`, with `dK = n dt (Y - h)^-`.
    Penalized { n: f64, mode: PenaltyMode },
    /// `Y = max(C, h)`, `dK = Y - C`.
    Direct,
}

impl Scheme {
    pub fn label(&self) -> String {
        match self {
            Scheme::Generalized => "generalized".into(),
            Scheme::Penalized { n, .. } => format!("penalized(n={n})"),
            Scheme::Direct => "direct".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub basis: BasisSpec,
    /// Re-evaluate `f` and `phi` at the fresh `Y_i` once per step.
    pub picard_pass: bool,
    pub stiffness_cap: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            basis: BasisSpec::default(),
            picard_pass: false,
            stiffness_cap: 0.5,
        }
    }
}

/// Per-path, per-node samples of `(Y, Z, K)`.
#[derive(Clone, Debug)]
pub struct BackwardSolution {
    pub grid: crate::noise::TimeGrid,
    pub start_node: usize,
    pub n_paths: usize,
    pub d: usize,
    pub scheme: Scheme,
    pub options: SolverOptions,
    pub b_stream: u64,
    y: Vec<f64>,
    z: Vec<f64>,
    dk: Vec<f64>,
    k: Vec<f64>,
    /// Regression standard error of the continuation value at each step (0 before the start).
    pub node_se: Vec<f64>,
    pub node_condition: Vec<f64>,
}

impl BackwardSolution {
    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    pub fn y(&self, path: usize, node: usize) -> f64 {
        self.y[node * self.n_paths + path]
    }

    /// `Y` of every path at `node`.
    pub fn y_node(&self, node: usize) -> &[f64] {
        &self.y[node * self.n_paths..(node + 1) * self.n_paths]
    }

    pub fn z(&self, path: usize, step: usize) -> &[f64] {
        let o = (step * self.n_paths + path) * self.d;
        &self.z[o..o + self.d]
    }

    pub fn k(&self, path: usize, node: usize) -> f64 {
        self.k[node * self.n_paths + path]
    }

    pub fn dk(&self, path: usize, step: usize) -> f64 {
        self.dk[step * self.n_paths + path]
    }

    pub fn mean_y(&self, node: usize) -> f64 {
        regression::shifted_mean(self.y_node(node))
    }

    pub fn sd_y(&self, node: usize) -> f64 {
        sd(self.y_node(node))
    }

    pub fn mean_k(&self, node: usize) -> f64 {
        regression::shifted_mean(&self.k[node * self.n_paths..(node + 1) * self.n_paths])
    }

    /// `Y` at the starting node (identical on every path).
    pub fn start_value(&self) -> f64 {
        self.mean_y(self.start_node)
    }

    /// Regression standard error at the starting node. It ignores the error carried over
    /// from later nodes, so it understates the Monte Carlo error of [`BackwardSolution::start_value`].
    pub fn start_standard_error(&self) -> f64 {
        self.node_se.get(self.start_node).copied().unwrap_or(0.0)
    }

    /// Largest regression standard error over the solved steps.
    pub fn tolerance(&self) -> f64 {
        self.node_se[self.start_node..]
            .iter()
            .cloned()
            .fold(0.0, f64::max)
    }

    /// Per node: `time, mean_y, sd_y, mean_k, skorokhod` where the last column is
    /// the path average of `(Y_i - h_i) dK_i` (empty without an obstacle).
    pub fn write_summary_csv<W: Write>(
        &self,
        ens: &PathEnsemble,
        coeffs: &CoefficientSet,
        mut out: W,
    ) -> Result<()> {
        writeln!(out, "node,time,mean_y,sd_y,mean_k,skorokhod")?;
        for i in 0..=self.n_steps() {
            let t = self.grid.time(i);
            let sk = if coeffs.obstacle.is_some() && i < self.n_steps() && i >= self.start_node {
                format!("{:.17e}", self.skorokhod_term(ens, coeffs, i))
            } else {
                String::new()
            };
            writeln!(
                out,
                "{i},{t:.17e},{:.17e},{:.17e},{:.17e},{sk}",
                self.mean_y(i),
                self.sd_y(i),
                self.mean_k(i)
            )?;
        }
        Ok(())
    }

    fn skorokhod_term(&self, ens: &PathEnsemble, coeffs: &CoefficientSet, step: usize) -> f64 {
        let t = self.grid.time(step);
        let terms: Vec<f64> = (0..self.n_paths)
            .map(|p| {
                let dk = self.dk(p, step);
                if dk == 0.0 {
                    0.0
                } else {
                    (self.y(p, step) - coeffs.h(t, ens.x(p, step)).unwrap_or(f64::NEG_INFINITY))
                        * dk
                }
            })
            .collect();
        regression::shifted_mean(&terms)
    }

    fn check_paths(&self, ens: &PathEnsemble) -> Result<()> {
        if ens.n_paths() != self.n_paths
            || ens.grid != self.grid
            || ens.start_node != self.start_node
        {
            return Err(Error::Dimension(
                "solution and path ensemble do not match".into(),
            ));
        }
        Ok(())
    }
}

fn sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = regression::shifted_mean(v);
    let ss = regression::chunked_sum(v.len(), 1, |r, acc| acc[0] += (v[r] - m).powi(2))[0];
    (ss / (v.len() - 1) as f64).sqrt()
}

/// Solves without enforcing the obstacle.
pub fn solve_generalized(
    coeffs: &CoefficientSet,
    ens: &PathEnsemble,
    opts: &SolverOptions,
) -> Result<BackwardSolution> {
    solve(coeffs, ens, Scheme::Generalized, opts)
}

/// Solves with the penalized driver `f + n (y - h)^-`.
pub fn solve_penalized(
    coeffs: &CoefficientSet,
    n: f64,
    mode: PenaltyMode,
    ens: &PathEnsemble,
    opts: &SolverOptions,
) -> Result<BackwardSolution> {
    solve(coeffs, ens, Scheme::Penalized { n, mode }, opts)
}

/// Solves the reflected equation by projecting each continuation value on `{y >= h}`.
pub fn solve_reflected_direct(
    coeffs: &CoefficientSet,
    ens: &PathEnsemble,
    opts: &SolverOptions,
) -> Result<BackwardSolution> {
    solve(coeffs, ens, Scheme::Direct, opts)
}

/// Dispatches on the scheme; `g` must not depend on `z`.
pub fn solve(
    coeffs: &CoefficientSet,
    ens: &PathEnsemble,
    scheme: Scheme,
    opts: &SolverOptions,
) -> Result<BackwardSolution> {
    if coeffs.noise.depends_on_z() {
        return Err(Error::NoiseDependsOnZ);
    }
    solve_with_noise(coeffs, ens, scheme, opts, None)
}

/// Backward sweep. `g_values[i]` (`n_paths x l`), when given, replaces
/// `g(t_{i+1}, X_{i+1}, Y_{i+1})` in step `i`.
pub(crate) fn solve_with_noise(
    coeffs: &CoefficientSet,
    ens: &PathEnsemble,
    scheme: Scheme,
    opts: &SolverOptions,
    g_values: Option<&[Vec<f64>]>,
) -> Result<BackwardSolution> {
    opts.basis.validate()?;
    if coeffs.d != ens.d() || coeffs.ell() != ens.ell() {
        return Err(Error::Dimension(format!(
            "coefficients are for d = {}, l = {}; paths have d = {}, l = {}",
            coeffs.d,
            coeffs.ell(),
            ens.d(),
            ens.ell()
        )));
    }
    let grid = ens.grid;
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let n = ens.n_paths();
    let d = ens.d();
    let ell = ens.ell();
    let start = ens.start_node;

    let penalty = match scheme {
        Scheme::Generalized => None,
        Scheme::Penalized { n: level, mode } => {
            if coeffs.obstacle.is_none() {
                return Err(Error::MissingObstacle);
            }
            if !(level >= 0.0) || !level.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "penalization level must be finite and >= 0, got {level}"
                )));
            }
            let n_dt = level * dt;
            let implicit = match mode {
                PenaltyMode::Explicit if n_dt > opts.stiffness_cap => {
                    return Err(Error::StiffPenalty {
                        n_dt,
                        cap: opts.stiffness_cap,
                    })
                }
                PenaltyMode::Explicit => false,
                PenaltyMode::Implicit => true,
                PenaltyMode::Auto => n_dt > opts.stiffness_cap,
            };
            Some((n_dt, implicit))
        }
        Scheme::Direct => {
            if coeffs.obstacle.is_none() {
                return Err(Error::MissingObstacle);
            }
            None
        }
    };
    if let Some(gv) = g_values {
        if gv.len() != n_steps || gv.iter().any(|v| v.len() != n * ell) {
            return Err(Error::Dimension(
                "precomputed noise values have the wrong shape".into(),
            ));
        }
    }

    let mut y = vec![0.0; (n_steps + 1) * n];
    let mut z = vec![0.0; n_steps * n * d];
    let mut dk = vec![0.0; n_steps * n];
    let mut node_se = vec![0.0; n_steps];
    let mut node_condition = vec![1.0; n_steps];

    y[n_steps * n..]
        .par_iter_mut()
        .enumerate()
        .for_each(|(p, v)| *v = coeffs.l(ens.x(p, n_steps)));

    let apply = |c: f64, h: Option<f64>| -> (f64, f64) {
        match (scheme, h) {
            (Scheme::Direct, Some(h)) => {
                let v = c.max(h);
                (v, v - c)
            }
            (Scheme::Penalized { .. }, Some(h)) => {
                let (n_dt, implicit) = penalty.unwrap();
                if c >= h || n_dt == 0.0 {
                    (c, 0.0)
                } else if implicit {
                    let v = (c + n_dt * h) / (1.0 + n_dt);
                    (v, n_dt * (h - v))
                } else {
                    let push = n_dt * (h - c);
                    (c + push, push)
                }
            }
            _ => (c, 0.0),
        }
    };

    for i in (start..n_steps).rev() {
        let t_i = grid.time(i);
        let t_next = grid.time(i + 1);
        let mut states = Vec::with_capacity(n * d);
        for p in 0..n {
            states.extend_from_slice(ens.x(p, i));
        }
        let h_i: Option<Vec<f64>> = coeffs.obstacle.as_ref().map(|h| {
            (0..n)
                .into_par_iter()
                .map(|p| h(t_i, ens.x(p, i)))
                .collect()
        });
        let design = Design::build(&states, d, opts.basis.degree, h_i.as_deref());
        let (y_prev, y_rest) = y.split_at_mut((i + 1) * n);
        let y_next = &y_rest[..n];
        let y_here = &mut y_prev[i * n..];

        let ybar = regression::shifted_mean(y_next);
        let z_rhs: Vec<Vec<f64>> = (0..d)
            .map(|k| {
                (0..n)
                    .into_par_iter()
                    .map(|p| (y_next[p] - ybar) * ens.dw(p, i)[k] / dt)
                    .collect()
            })
            .collect();
        let proj = Projector::new(&design, &opts.basis, i)?;
        log::trace!(
            "node {i}: {} basis columns retained, condition {:.2e}",
            proj.retained,
            proj.condition
        );
        let mut z_i = vec![0.0; n * d];
        for (k, rhs) in z_rhs.iter().enumerate() {
            for (p, v) in proj.apply(rhs).0.iter().enumerate() {
                z_i[p * d + k] = *v;
            }
        }

        // the g-term and the right-node part of the target do not change in the inner pass
        let db = ens.db(i);
        let noise_term: Vec<f64> = if g_values.is_none() && coeffs.noise.is_zero() {
            vec![0.0; n]
        } else {
            (0..n)
                .into_par_iter()
                .map_init(
                    || vec![0.0; ell],
                    |gbuf, p| {
                        match g_values {
                            Some(gv) => gbuf.copy_from_slice(&gv[i][p * ell..(p + 1) * ell]),
                            None => {
                                coeffs
                                    .noise
                                    .eval(t_next, ens.x(p, i + 1), y_next[p], &[], gbuf)
                            }
                        }
                        gbuf.iter().zip(db).map(|(g, b)| g * b).sum::<f64>()
                    },
                )
                .collect()
        };
        let target = |y_eval: &[f64], inner: bool| -> Vec<f64> {
            (0..n)
                .into_par_iter()
                .map(|p| {
                    let zp = &z_i[p * d..(p + 1) * d];
                    let da = ens.da(p, i);
                    let drift = if inner {
                        coeffs.f(t_i, ens.x(p, i), y_eval[p], zp)
                    } else {
                        coeffs.f(t_next, ens.x(p, i + 1), y_eval[p], zp)
                    };
                    let mut v = y_next[p] + drift * dt + noise_term[p];
                    if da != 0.0 {
                        v += coeffs.phi(t_next, ens.x(p, i + 1), y_eval[p]) * da;
                    }
                    v
                })
                .collect()
        };

        let mut tgt = target(y_next, false);
        let (mut fitted, mut se) = proj.apply(&tgt);
        let mut step_y = vec![0.0; n];
        let mut step_dk = vec![0.0; n];
        let project = |c: &[f64], out_y: &mut [f64], out_dk: &mut [f64]| {
            out_y
                .par_iter_mut()
                .zip(out_dk.par_iter_mut())
                .enumerate()
                .for_each(|(p, (yv, kv))| {
                    let (v, push) = apply(c[p], h_i.as_ref().map(|h| h[p]));
                    *yv = v;
                    *kv = push;
                });
        };
        project(&fitted, &mut step_y, &mut step_dk);
        if opts.picard_pass {
            tgt = target(&step_y, true);
            (fitted, se) = proj.apply(&tgt);
            project(&fitted, &mut step_y, &mut step_dk);
        }
        y_here[..n].copy_from_slice(&step_y);
        dk[i * n..(i + 1) * n].copy_from_slice(&step_dk);
        z[i * n * d..(i + 1) * n * d].copy_from_slice(&z_i);
        node_se[i] = se;
        node_condition[i] = proj.condition;
    }

    for i in 0..start {
        let (head, tail) = y.split_at_mut(start * n);
        head[i * n..(i + 1) * n].copy_from_slice(&tail[..n]);
    }

    let mut k = vec![0.0; (n_steps + 1) * n];
    for i in 0..n_steps {
        for p in 0..n {
            k[(i + 1) * n + p] = k[i * n + p] + dk[i * n + p];
        }
    }

    Ok(BackwardSolution {
        grid,
        start_node: start,
        n_paths: n,
        d,
        scheme,
        options: *opts,
        b_stream: ens.b_stream,
        y,
        z,
        dk,
        k,
        node_se,
        node_condition,
    })
}

/// `|E sum_i (Y_i - h(t_i, X_i)) dK_i|`: zero for the direct scheme, `O(1/n)` for the penalized one.
pub fn skorokhod_residual(
    sol: &BackwardSolution,
    ens: &PathEnsemble,
    coeffs: &CoefficientSet,
) -> Result<f64> {
    if coeffs.obstacle.is_none() {
        return Err(Error::MissingObstacle);
    }
    sol.check_paths(ens)?;
    let total: f64 = (sol.start_node..sol.n_steps())
        .map(|i| sol.skorokhod_term(ens, coeffs, i))
        .sum();
    Ok(total.abs())
}

/// `min_{paths, nodes >= start} (Y_i - h(t_i, X_i))`.
pub fn min_obstacle_gap(
    sol: &BackwardSolution,
    ens: &PathEnsemble,
    coeffs: &CoefficientSet,
) -> Result<f64> {
    let h = coeffs.obstacle.as_ref().ok_or(Error::MissingObstacle)?;
    sol.check_paths(ens)?;
    Ok((sol.start_node..=sol.n_steps())
        .flat_map(|i| {
            let t = sol.grid.time(i);
            (0..sol.n_paths).map(move |p| sol.y(p, i) - h(t, ens.x(p, i)))
        })
        .fold(f64::INFINITY, f64::min))
}

/// `max_{paths, nodes} |Y_a - Y_b|` for two solutions on the same paths.
pub fn sup_distance(a: &BackwardSolution, b: &BackwardSolution) -> Result<f64> {
    if a.y.len() != b.y.len() || a.start_node != b.start_node {
        return Err(Error::Dimension("solutions have different shapes".into()));
    }
    Ok(a.y[a.start_node * a.n_paths..]
        .iter()
        .zip(&b.y[b.start_node * b.n_paths..])
        .map(|(u, v)| (u - v).abs())
        .fold(0.0, f64::max))
}
