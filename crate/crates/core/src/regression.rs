//! Least-squares estimation of conditional expectations on a polynomial basis.
//!
//! Every reduction over paths is split into fixed-size chunks whose partial
//! sums are combined in chunk order, so the result is independent of how
//! many threads ran the chunks.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CHUNK: usize = 1024;
const PIVOT_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisSpec {
    /// Highest total degree of the polynomial part.
    pub degree: usize,
    /// Ridge added to the unit diagonal of the correlation matrix.
    pub ridge: f64,
    /// Largest admissible condition number of the retained columns.
    pub max_condition: f64,
}

impl Default for BasisSpec {
    fn default() -> Self {
        BasisSpec {
            degree: 3,
            ridge: 1e-8,
            max_condition: 1e10,
        }
    }
}

impl BasisSpec {
    pub fn with_degree(degree: usize) -> Self {
        BasisSpec {
            degree,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.degree > 8 {
            return Err(Error::InvalidParameter(format!(
                "basis degree {} is above the supported maximum 8",
                self.degree
            )));
        }
        if !(self.ridge >= 0.0) || !(self.max_condition > 1.0) {
            return Err(Error::InvalidParameter(
                "ridge must be >= 0 and max_condition > 1".into(),
            ));
        }
        Ok(())
    }
}

/// Exponent vectors of all monomials in `d` variables with total degree `1..=degree`, graded.
pub(crate) fn monomials(d: usize, degree: usize) -> Vec<Vec<u32>> {
    fn rec(d: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if cur.len() == d {
            if left == 0 {
                out.push(cur.clone());
            }
            return;
        }
        for e in (0..=left).rev() {
            cur.push(e);
            rec(d, left - e, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    for total in 1..=degree as u32 {
        rec(d, total, &mut Vec::with_capacity(d), &mut out);
    }
    out
}

/// Deterministic chunked sum of per-row vector contributions of width `width`.
pub(crate) fn chunked_sum<F>(n: usize, width: usize, row: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let partials: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; width];
            for r in c * CHUNK..((c + 1) * CHUNK).min(n) {
                row(r, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; width];
    for part in partials {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    total
}

/// Mean computed around the first value, exact when all values coincide.
pub(crate) fn shifted_mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let v0 = v[0];
    let s = chunked_sum(v.len(), 1, |r, acc| acc[0] += v[r] - v0)[0];
    v0 + s / v.len() as f64
}

/// Row-major `n x p` design matrix of basis functions evaluated on the paths.
pub(crate) struct Design {
    pub n: usize,
    pub p: usize,
    pub data: Vec<f64>,
}

impl Design {
    /// Standardized monomials of the state plus optional extra columns (the obstacle value).
    pub fn build(states: &[f64], d: usize, degree: usize, extra: Option<&[f64]>) -> Design {
        let n = states.len() / d;
        let mons = monomials(d, degree);
        let (mut mean, mut sd) = (vec![0.0; d], vec![0.0; d]);
        for k in 0..d {
            let col: Vec<f64> = (0..n).map(|r| states[r * d + k]).collect();
            mean[k] = shifted_mean(&col);
            let ss = chunked_sum(n, 1, |r, acc| acc[0] += (col[r] - mean[k]).powi(2))[0];
            sd[k] = (ss / n as f64).sqrt();
        }
        let p = mons.len() + usize::from(extra.is_some());
        let mut data = vec![0.0; n * p];
        data.par_chunks_mut(p.max(1)).enumerate().for_each_init(
            || vec![0.0; d],
            |z, (r, row)| {
                if p == 0 {
                    return;
                }
                for k in 0..d {
                    z[k] = if sd[k] > 0.0 {
                        (states[r * d + k] - mean[k]) / sd[k]
                    } else {
                        0.0
                    };
                }
                for (j, m) in mons.iter().enumerate() {
                    row[j] = m
                        .iter()
                        .zip(z.iter())
                        .map(|(&e, &zk)| zk.powi(e as i32))
                        .product();
                }
                if let Some(h) = extra {
                    row[p - 1] = h[r];
                }
            },
        );
        Design { n, p, data }
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.p..(r + 1) * self.p]
    }
}

/// Least-squares projection onto the intercept and the retained design columns,
/// factored once and applied to any number of right-hand sides.
pub(crate) struct Projector<'a> {
    design: &'a Design,
    col_mean: Vec<f64>,
    kept: Vec<usize>,
    scale: Vec<f64>,
    factor: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    pub retained: usize,
    pub condition: f64,
}

impl<'a> Projector<'a> {
    pub fn new(design: &'a Design, basis: &BasisSpec, step: usize) -> Result<Self> {
        let n = design.n;
        let p = design.p;
        let col_mean: Vec<f64> = chunked_sum(n, p, |r, acc| {
            for (a, v) in acc.iter_mut().zip(design.row(r)) {
                *a += v;
            }
        })
        .into_iter()
        .map(|s| s / n as f64)
        .collect();

        // centered Gram matrix, upper triangle, row-major p x p
        let sums = chunked_sum(n, p * p, |r, acc| {
            let row = design.row(r);
            for i in 0..p {
                let ci = row[i] - col_mean[i];
                for j in i..p {
                    acc[i * p + j] += ci * (row[j] - col_mean[j]);
                }
            }
        });
        let gram = |i: usize, j: usize| {
            if i <= j {
                sums[i * p + j]
            } else {
                sums[j * p + i]
            }
        };

        let mut kept: Vec<usize> = Vec::new();
        let mut chol: Vec<Vec<f64>> = Vec::new();
        for j in 0..p {
            let var = gram(j, j) / n as f64;
            if !(var > 1e-22 * (1.0 + col_mean[j] * col_mean[j])) {
                continue;
            }
            // pivoted Cholesky on the correlation matrix: keep j if it is not (numerically) spanned
            let corr = |a: usize, b: usize| gram(a, b) / (gram(a, a) * gram(b, b)).sqrt();
            let mut l_row = Vec::with_capacity(kept.len());
            for (a, &ka) in kept.iter().enumerate() {
                let s: f64 = (0..a).map(|b| chol[a][b] * l_row[b]).sum();
                l_row.push((corr(j, ka) - s) / chol[a][a]);
            }
            let pivot = 1.0 - l_row.iter().map(|v| v * v).sum::<f64>();
            if pivot > PIVOT_TOL {
                l_row.push(pivot.sqrt());
                chol.push(l_row);
                kept.push(j);
            }
        }

        let q = kept.len();
        let scale: Vec<f64> = kept.iter().map(|&j| gram(j, j).sqrt()).collect();
        let mut condition = 1.0;
        let mut factor = None;
        if q > 0 {
            let corr =
                DMatrix::from_fn(q, q, |a, b| gram(kept[a], kept[b]) / (scale[a] * scale[b]));
            let eig = corr.clone().symmetric_eigenvalues();
            let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
            condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
            if condition > basis.max_condition {
                return Err(Error::RankDeficient { step, condition });
            }
            let regularized = corr + DMatrix::identity(q, q) * basis.ridge;
            factor = Some(
                regularized
                    .cholesky()
                    .ok_or(Error::RankDeficient { step, condition })?,
            );
        }
        Ok(Projector {
            design,
            col_mean,
            kept,
            scale,
            factor,
            retained: q,
            condition,
        })
    }

    /// Fitted values and the standard error of the fit for one right-hand side.
    pub fn apply(&self, rhs: &[f64]) -> (Vec<f64>, f64) {
        let n = self.design.n;
        debug_assert_eq!(rhs.len(), n);
        let q = self.kept.len();
        let rhs_mean = shifted_mean(rhs);
        let mut beta = vec![0.0; q];
        if let Some(factor) = &self.factor {
            let cross = chunked_sum(n, q, |r, acc| {
                let row = self.design.row(r);
                let c = rhs[r] - rhs_mean;
                for (a, &j) in self.kept.iter().enumerate() {
                    acc[a] += (row[j] - self.col_mean[j]) * c;
                }
            });
            let c = DVector::from_fn(q, |a, _| cross[a] / self.scale[a]);
            let sol = factor.solve(&c);
            for a in 0..q {
                beta[a] = sol[a] / self.scale[a];
            }
        }
        let fitted: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|r| {
                let row = self.design.row(r);
                let mut v = 0.0;
                for (a, &j) in self.kept.iter().enumerate() {
                    v += beta[a] * (row[j] - self.col_mean[j]);
                }
                rhs_mean + v
            })
            .collect();
        let dof = (n as f64 - q as f64 - 1.0).max(1.0);
        let rss = chunked_sum(n, 1, |r, acc| acc[0] += (rhs[r] - fitted[r]).powi(2))[0];
        let se = (rss / dof).sqrt() * ((q as f64 + 1.0) / n as f64).sqrt();
        (fitted, se)
    }
}
