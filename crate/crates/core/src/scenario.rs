//! Built-in scenarios and their configuration.
//!
//! A configuration names a built-in coefficient set, overrides some of its
//! numeric parameters and fixes grids, seeds and the scheme. Unknown keys,
//! unknown built-ins and unknown parameters are all rejected.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bdsde::{PenaltyMode, Scheme, SolverOptions};
use crate::coefficients::{AffineNoise, CoefficientSet, Constants};
use crate::error::{Error, Result};
use crate::field::{FieldLayout, Problem};
use crate::geometry::{Domain, Shape};
use crate::noise::TimeGrid;
use crate::reflected_sde::SdeSpec;

pub const BUILTINS: [&str; 6] = [
    "heat",
    "american_put",
    "linear_fk",
    "neumann_drift",
    "exp_noise_flow",
    "picard_z",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub t_end: f64,
    pub n_steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            t_end: 1.0,
            n_steps: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartConfig {
    pub t: f64,
    pub x: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SchemeConfig {
    Generalized,
    Penalized {
        n: f64,
        #[serde(default = "implicit")]
        mode: PenaltyMode,
    },
    Direct,
}

fn implicit() -> PenaltyMode {
    PenaltyMode::Implicit
}

impl From<SchemeConfig> for Scheme {
    fn from(s: SchemeConfig) -> Scheme {
        match s {
            SchemeConfig::Generalized => Scheme::Generalized,
            SchemeConfig::Penalized { n, mode } => Scheme::Penalized { n, mode },
            SchemeConfig::Direct => Scheme::Direct,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub n_t: usize,
    pub n_x: usize,
    pub lo: Option<Vec<f64>>,
    pub hi: Option<Vec<f64>>,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            n_t: 11,
            n_x: 21,
            lo: None,
            hi: None,
        }
    }
}

/// Tabulation range of the flow in `y`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub y_lo: f64,
    pub y_hi: f64,
    pub n_y: usize,
    /// Points per axis of the x grid when `g` depends on `x`.
    pub n_x: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            y_lo: -10.0,
            y_hi: 10.0,
            n_y: 201,
            n_x: 21,
        }
    }
}

impl FlowConfig {
    pub fn y_samples(&self) -> Vec<f64> {
        (0..self.n_y)
            .map(|k| self.y_lo + (self.y_hi - self.y_lo) * k as f64 / (self.n_y - 1) as f64)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub builtin: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    /// Replaces the built-in domain.
    #[serde(default)]
    pub domain: Option<Shape>,
    /// Switches the obstacle on or off; the built-in default otherwise.
    #[serde(default)]
    pub obstacle: Option<bool>,
    #[serde(default)]
    pub constants: Option<Constants>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub start: Option<StartConfig>,
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default = "default_b")]
    pub n_b_scenarios: usize,
    /// Direct with an obstacle, generalized without, when absent.
    #[serde(default)]
    pub scheme: Option<SchemeConfig>,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub field: FieldConfig,
    #[serde(default)]
    pub flow: FlowConfig,
    /// Output directory.
    #[serde(default)]
    pub out: Option<String>,
}

fn default_paths() -> usize {
    10_000
}

fn default_b() -> usize {
    3
}

impl ScenarioConfig {
    pub fn new(builtin: &str) -> Self {
        ScenarioConfig {
            builtin: builtin.into(),
            params: BTreeMap::new(),
            domain: None,
            obstacle: None,
            constants: None,
            grid: GridConfig::default(),
            start: None,
            n_paths: default_paths(),
            n_b_scenarios: default_b(),
            scheme: None,
            solver: SolverOptions::default(),
            seed: 0,
            field: FieldConfig::default(),
            flow: FlowConfig::default(),
            out: None,
        }
    }

    pub fn with_param(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.into(), value);
        self
    }
}

pub type ExactFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

/// A validated configuration turned into a problem.
#[derive(Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub problem: Problem,
    pub start_t: f64,
    pub start_x: Vec<f64>,
    pub scheme: Scheme,
    /// Closed-form `u(t, x)` when one is known for this configuration.
    pub exact: Option<ExactFn>,
}

struct Params<'a> {
    name: &'a str,
    given: &'a BTreeMap<String, f64>,
    allowed: Vec<&'static str>,
}

impl Params<'_> {
    fn get(&mut self, key: &'static str, default: f64) -> f64 {
        self.allowed.push(key);
        self.given.get(key).copied().unwrap_or(default)
    }

    fn positive(&mut self, key: &'static str, default: f64) -> Result<f64> {
        let v = self.get(key, default);
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "{}: parameter `{key}` must be positive, got {v}",
                self.name
            )));
        }
        Ok(v)
    }

    fn finish(self) -> Result<()> {
        match self
            .given
            .keys()
            .find(|k| !self.allowed.contains(&k.as_str()))
        {
            Some(k) => Err(Error::InvalidParameter(format!(
                "unknown parameter `{k}` for built-in `{}` (known: {})",
                self.name,
                self.allowed.join(", ")
            ))),
            None => Ok(()),
        }
    }
}

struct Parts {
    domain: Domain,
    sde: SdeSpec,
    coeffs: CoefficientSet,
    x0: Vec<f64>,
    field_lo: Vec<f64>,
    field_hi: Vec<f64>,
    exact: Option<ExactFn>,
    /// Obstacle used when the toggle is on.
    obstacle: Option<Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>>,
    obstacle_default: bool,
}

fn builtin(name: &str, p: &mut Params, t_end: f64) -> Result<Parts> {
    match name {
        "heat" => {
            let d = p.get("dim", 1.0);
            if !(d >= 1.0 && d.fract() == 0.0 && d <= 3.0) {
                return Err(Error::InvalidParameter(format!(
                    "heat: parameter `dim` must be 1, 2 or 3, got {d}"
                )));
            }
            let d = d as usize;
            let sigma = p.positive("sigma", 2f64.sqrt())?;
            let radius = p.positive("radius", 20.0)?;
            let level = p.get("obstacle_level", -0.5);
            let rate = 0.5 * sigma * sigma * d as f64;
            Ok(Parts {
                domain: Domain::ball(vec![0.0; d], radius)?,
                sde: SdeSpec::brownian(d, sigma)?,
                coeffs: CoefficientSet::zero(d, 1).with_terminal(|x| x.iter().sum::<f64>().cos()),
                x0: vec![0.0; d],
                field_lo: vec![-2.0; d],
                field_hi: vec![2.0; d],
                exact: Some(Arc::new(move |t, x| {
                    (-rate * (t_end - t)).exp() * x.iter().sum::<f64>().cos()
                })),
                obstacle: Some(Arc::new(move |_, _| level)),
                obstacle_default: false,
            })
        }
        "linear_fk" => {
            let a = p.get("a", 0.5);
            let radius = p.positive("radius", 10.0)?;
            Ok(Parts {
                domain: Domain::interval(-radius, radius)?,
                sde: SdeSpec::brownian(1, 1.0)?,
                coeffs: CoefficientSet::zero(1, 1)
                    .with_terminal(|x| x[0] * x[0])
                    .with_driver(move |_, _, y, _| a * y),
                x0: vec![0.0],
                field_lo: vec![-1.0],
                field_hi: vec![1.0],
                exact: Some(Arc::new(move |t, x| {
                    (a * (t_end - t)).exp() * (x[0] * x[0] + (t_end - t))
                })),
                obstacle: None,
                obstacle_default: false,
            })
        }
        "american_put" => {
            let r = p.get("rate", 0.05);
            let sigma = p.positive("sigma", 0.2)?;
            let strike = p.positive("strike", 1.0)?;
            let s0 = p.positive("spot", 1.0)?;
            let hi = p.positive("upper", 11.0)?;
            let payoff = move |x: &[f64]| (strike - x[0]).max(0.0);
            Ok(Parts {
                // the geometric dynamics keep the price positive; the interval only bounds it
                domain: Domain::interval(-hi + 2.0 * strike, hi)?,
                sde: SdeSpec::geometric(r, sigma)?,
                coeffs: CoefficientSet::zero(1, 1)
                    .with_terminal(payoff)
                    .with_driver(move |_, _, y, _| -r * y),
                x0: vec![s0],
                field_lo: vec![0.5 * strike],
                field_hi: vec![1.5 * strike],
                exact: None,
                obstacle: Some(Arc::new(move |_, x| payoff(x))),
                obstacle_default: true,
            })
        }
        "neumann_drift" => {
            let drift = p.get("drift", 0.3);
            let sigma = p.positive("sigma", 1.0)?;
            let level = p.get("level", 1.0);
            let slope = p.get("slope", 0.5);
            let h_level = p.get("obstacle_level", level - 1.0);
            Ok(Parts {
                domain: Domain::interval(0.0, 1.0)?,
                sde: SdeSpec::constant(vec![drift], vec![sigma])?,
                coeffs: CoefficientSet::zero(1, 1)
                    .with_terminal(move |x| level + slope * x[0])
                    .with_driver(move |_, _, _, _| -slope * drift)
                    .with_boundary(move |_, x, y| -y + level - slope + 3.0 * slope * x[0]),
                x0: vec![0.5],
                field_lo: vec![0.0],
                field_hi: vec![1.0],
                exact: Some(Arc::new(move |_, x| level + slope * x[0])),
                obstacle: Some(Arc::new(move |_, _| h_level)),
                obstacle_default: false,
            })
        }
        "exp_noise_flow" => {
            let linear = p.get("noise_linear", 1.0);
            let offset = p.get("noise_const", 0.0);
            let decay = p.get("decay", 0.0);
            let level = p.get("obstacle_level", 0.8);
            Ok(Parts {
                domain: Domain::interval(-3.0, 3.0)?,
                sde: SdeSpec::brownian(1, 1.0)?,
                coeffs: CoefficientSet::zero(1, 1)
                    .with_terminal(|x| 1.0 + 0.5 * x[0].cos())
                    .with_driver(move |_, _, y, _| -decay * y)
                    .with_noise(Arc::new(AffineNoise {
                        a_y: vec![linear],
                        a_z: Vec::new(),
                        offset: vec![offset],
                    })),
                x0: vec![0.0],
                field_lo: vec![-2.0],
                field_hi: vec![2.0],
                exact: None,
                obstacle: Some(Arc::new(move |_, _| level)),
                obstacle_default: false,
            })
        }
        "picard_z" => {
            let a_y = p.get("noise_linear", 0.05);
            let a_z = p.get("noise_z", 0.125f64.sqrt());
            Ok(Parts {
                domain: Domain::interval(-10.0, 10.0)?,
                sde: SdeSpec::brownian(1, 1.0)?,
                coeffs: CoefficientSet::zero(1, 1)
                    .with_terminal(|x| x[0].sin())
                    .with_noise(Arc::new(AffineNoise {
                        a_y: vec![a_y],
                        a_z: vec![a_z],
                        offset: vec![0.0],
                    })),
                x0: vec![0.0],
                field_lo: vec![-2.0],
                field_hi: vec![2.0],
                exact: None,
                obstacle: None,
                obstacle_default: false,
            })
        }
        other => Err(Error::InvalidParameter(format!(
            "unknown built-in `{other}` (known: {})",
            BUILTINS.join(", ")
        ))),
    }
}

impl Scenario {
    /// Validates every parameter before anything is simulated.
    pub fn from_config(config: ScenarioConfig) -> Result<Scenario> {
        let grid = TimeGrid::new(0.0, config.grid.t_end, config.grid.n_steps)?;
        if config.n_paths < 2 {
            return Err(Error::InvalidParameter("n_paths must be at least 2".into()));
        }
        if config.n_b_scenarios < 1 {
            return Err(Error::InvalidParameter(
                "n_b_scenarios must be at least 1".into(),
            ));
        }
        config.solver.basis.validate()?;
        if !(config.flow.y_lo < config.flow.y_hi) || config.flow.n_y < 2 || config.flow.n_x < 2 {
            return Err(Error::InvalidParameter(
                "flow range needs y_lo < y_hi, n_y >= 2 and n_x >= 2".into(),
            ));
        }
        let mut params = Params {
            name: &config.builtin,
            given: &config.params,
            allowed: Vec::new(),
        };
        let parts = builtin(&config.builtin, &mut params, grid.t_end())?;
        params.finish()?;

        let default_constants = match config.builtin.as_str() {
            "picard_z" => Constants {
                c: 0.005,
                alpha: 0.25,
                ..Constants::default()
            },
            _ => Constants::default(),
        };
        let constants = config.constants.unwrap_or(default_constants);
        constants.validate()?;

        let domain = match &config.domain {
            Some(shape) => Domain::new(shape.clone())?,
            None => parts.domain,
        };
        let mut coeffs = parts.coeffs.with_constants(constants);
        let with_obstacle = config.obstacle.unwrap_or(parts.obstacle_default);
        let mut exact = parts.exact;
        if with_obstacle {
            let h = parts.obstacle.ok_or_else(|| {
                Error::InvalidParameter(format!("built-in `{}` has no obstacle", config.builtin))
            })?;
            coeffs = coeffs.with_obstacle(move |t, x| h(t, x));
            exact = None;
        }
        if config.domain.is_some() {
            exact = None;
        }
        let scheme: Scheme = match config.scheme {
            Some(s) => s.into(),
            None if with_obstacle => Scheme::Direct,
            None => Scheme::Generalized,
        };
        if matches!(scheme, Scheme::Penalized { .. } | Scheme::Direct) && !with_obstacle {
            return Err(Error::MissingObstacle);
        }
        if let Scheme::Penalized { n, .. } = scheme {
            if !(n >= 0.0 && n.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "penalization level must be finite and >= 0, got {n}"
                )));
            }
        }
        let (start_t, start_x) = match &config.start {
            Some(s) => (s.t, s.x.clone()),
            None => (0.0, parts.x0),
        };
        let problem = Problem {
            domain,
            sde: parts.sde,
            coeffs,
            grid,
        };
        problem.validate()?;
        if start_x.len() != problem.domain.dim() {
            return Err(Error::Dimension(format!(
                "start point has {} coordinates, domain {}",
                start_x.len(),
                problem.domain.dim()
            )));
        }
        if !problem.domain.in_closure(&start_x) {
            return Err(Error::StartOutsideDomain {
                psi: problem.domain.psi(&start_x),
            });
        }
        if grid.node_of(start_t).is_none() {
            return Err(Error::StartNotOnGrid(start_t));
        }
        let d = problem.domain.dim();
        let lo = config
            .field
            .lo
            .clone()
            .unwrap_or(if d == parts.field_lo.len() {
                parts.field_lo
            } else {
                vec![-1.0; d]
            });
        let hi = config
            .field
            .hi
            .clone()
            .unwrap_or(if d == parts.field_hi.len() {
                parts.field_hi
            } else {
                vec![1.0; d]
            });
        if lo.len() != d || hi.len() != d || lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
            return Err(Error::InvalidParameter(
                "field bounds need one lo < hi pair per dimension".into(),
            ));
        }
        let config = ScenarioConfig {
            field: FieldConfig {
                lo: Some(lo),
                hi: Some(hi),
                ..config.field
            },
            ..config
        };
        Ok(Scenario {
            config,
            problem,
            start_t,
            start_x,
            scheme,
            exact,
        })
    }

    pub fn start_node(&self) -> usize {
        self.problem.grid.node_of(self.start_t).unwrap()
    }

    pub fn field_layout(&self) -> Result<FieldLayout> {
        let f = &self.config.field;
        FieldLayout::uniform(
            &self.problem.grid,
            f.n_t,
            f.lo.as_deref().unwrap(),
            f.hi.as_deref().unwrap(),
            f.n_x,
        )
    }

    /// The same problem with `l + delta` and `f + delta`, sharing the noise coefficient.
    pub fn shifted_coefficients(&self, delta: f64) -> CoefficientSet {
        let base = self.problem.coeffs.clone();
        let (l, f) = (base.terminal.clone(), base.driver.clone());
        base.with_terminal(move |x| l(x) + delta)
            .with_driver(move |t, x, y, z| f(t, x, y, z) + delta)
    }
}
