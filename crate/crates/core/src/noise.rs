//! Brownian drivers on a uniform time grid and the discrete stochastic
//! integrals built on them.
//!
//! Two independent Brownian motions are used: `W` (forward, dimension `d`)
//! drives the state, `B` (backward, dimension `l`) is the noise of the
//! backward equation. Increments are drawn from a counter-based generator
//! (ChaCha8 keyed by `(seed, channel)`, stream selected by `stream_id`), so
//! the increments of a given stream never depend on which other streams were
//! generated, in which order, or on how many workers generated them.
//!
//! Backward Itô sums evaluate the integrand at the right node `t_{i+1}` of
//! each step; [`RightNodeSamples`] is the only way to pass an integrand to
//! [`backward_ito_integral`].

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

const DUMP_MAGIC: &[u8; 4] = b"RBDS";
const DUMP_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    t_start: f64,
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::InvalidGrid("at least one step is required".into()));
        }
        if !(t_end > t_start) || !t_start.is_finite() || !t_end.is_finite() {
            return Err(Error::InvalidGrid(format!(
                "need t_start < t_end, got [{t_start}, {t_end}]"
            )));
        }
        Ok(TimeGrid {
            t_start,
            t_end,
            n_steps,
        })
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t_start) / self.n_steps as f64
    }

    pub fn time(&self, node: usize) -> f64 {
        if node == self.n_steps {
            self.t_end
        } else {
            self.t_start + node as f64 * self.dt()
        }
    }

    /// Index of the node at time `t`, if `t` is a node up to rounding.
    pub fn node_of(&self, t: f64) -> Option<usize> {
        let s = (t - self.t_start) / self.dt();
        let k = s.round();
        if k < 0.0 || k > self.n_steps as f64 || (s - k).abs() > 1e-9 {
            None
        } else {
            Some(k as usize)
        }
    }

    /// Grid with the same horizon and `n_steps / factor` steps.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.n_steps.is_multiple_of(factor) {
            return Err(Error::InvalidGrid(format!(
                "{} steps cannot be coarsened by {factor}",
                self.n_steps
            )));
        }
        TimeGrid::new(self.t_start, self.t_end, self.n_steps / factor)
    }
}

/// Which Brownian motion a stream belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    Forward,
    Backward,
}

impl Channel {
    fn tag(self) -> u64 {
        match self {
            Channel::Forward => 0x5746_4f52,
            Channel::Backward => 0x4241_434b,
        }
    }
}

/// Gaussian increments of one Brownian path, `n_steps x dim`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Increments {
    dim: usize,
    data: Vec<f64>,
}

impl Increments {
    pub fn from_vec(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Dimension(format!(
                "{} values do not form rows of width {dim}",
                data.len()
            )));
        }
        Ok(Increments { dim, data })
    }

    pub fn zeros(n_steps: usize, dim: usize) -> Self {
        Increments {
            dim,
            data: vec![0.0; n_steps * dim],
        }
    }

    /// Draws the increments of stream `stream_id` on `channel`.
    pub fn sample(
        grid: &TimeGrid,
        dim: usize,
        seed: u64,
        channel: Channel,
        stream_id: u64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Dimension(
                "Brownian dimension must be at least 1".into(),
            ));
        }
        let mut rng = stream_rng(seed, channel, stream_id);
        let sd = grid.dt().sqrt();
        let data = (0..grid.n_steps() * dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                sd * z
            })
            .collect();
        Ok(Increments { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_steps(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, step: usize) -> &[f64] {
        &self.data[step * self.dim..(step + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Sums groups of `factor` consecutive increments: the same path seen on a coarser grid.
    pub fn aggregate(&self, factor: usize) -> Result<Self> {
        let n = self.n_steps();
        if factor == 0 || !n.is_multiple_of(factor) {
            return Err(Error::InvalidGrid(format!(
                "{n} steps cannot be aggregated by {factor}"
            )));
        }
        let mut data = vec![0.0; n / factor * self.dim];
        for step in 0..n {
            let dst = step / factor;
            for k in 0..self.dim {
                data[dst * self.dim + k] += self.data[step * self.dim + k];
            }
        }
        Ok(Increments {
            dim: self.dim,
            data,
        })
    }

    /// `B_T - B_{t_node}` component-wise, summed backward from the terminal node.
    pub fn tail_sum(&self, node: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for step in (node..self.n_steps()).rev() {
            for (o, v) in out.iter_mut().zip(self.row(step)) {
                *o += v;
            }
        }
        out
    }

    /// `B_T - B_{t_i}` for every node `i = 0..=N`, accumulated backward.
    pub fn tail_sums(&self) -> Vec<Vec<f64>> {
        let n = self.n_steps();
        let mut out = vec![vec![0.0; self.dim]; n + 1];
        for step in (0..n).rev() {
            for k in 0..self.dim {
                out[step][k] = out[step + 1][k] + self.data[step * self.dim + k];
            }
        }
        out
    }
}

fn stream_rng(seed: u64, channel: Channel, stream_id: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&channel.tag().to_le_bytes());
    key[16..24].copy_from_slice(b"rbdsde01");
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream_id);
    rng
}

/// Forward and backward increments of one seeded stream.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBundle {
    pub grid: TimeGrid,
    pub w: Increments,
    pub b: Increments,
    pub seed: u64,
    pub stream_id: u64,
}

impl PathBundle {
    pub fn d(&self) -> usize {
        self.w.dim()
    }

    pub fn ell(&self) -> usize {
        self.b.dim()
    }

    /// Writes the little-endian binary dump used for cross-implementation replay.
    ///
    /// Layout: `"RBDS"`, version (u32), N, d, l, seed, stream_id (u64 each),
    /// t_start, t_end (f64), then the `N x d` forward and `N x l` backward
    /// increments, row-major.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(DUMP_MAGIC)?;
        out.write_all(&DUMP_VERSION.to_le_bytes())?;
        for v in [
            self.grid.n_steps() as u64,
            self.d() as u64,
            self.ell() as u64,
            self.seed,
            self.stream_id,
        ] {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in [self.grid.t_start(), self.grid.t_end()] {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in self.w.as_slice().iter().chain(self.b.as_slice()) {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(Error::Format("bad magic, expected \"RBDS\"".into()));
        }
        let mut b4 = [0u8; 4];
        input.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != DUMP_VERSION {
            return Err(Error::Format(format!("unsupported dump version {version}")));
        }
        let mut b8 = [0u8; 8];
        let mut read_u64 = |input: &mut R| -> Result<u64> {
            input.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let n = read_u64(&mut input)? as usize;
        let d = read_u64(&mut input)? as usize;
        let ell = read_u64(&mut input)? as usize;
        let seed = read_u64(&mut input)?;
        let stream_id = read_u64(&mut input)?;
        let t_start = f64::from_bits(read_u64(&mut input)?);
        let t_end = f64::from_bits(read_u64(&mut input)?);
        let grid = TimeGrid::new(t_start, t_end, n)?;
        let mut read_block = |len: usize| -> Result<Vec<f64>> {
            let mut bytes = vec![0u8; len * 8];
            input.read_exact(&mut bytes)?;
            Ok(bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let w = Increments::from_vec(d, read_block(n * d)?)?;
        let b = Increments::from_vec(ell, read_block(n * ell)?)?;
        Ok(PathBundle {
            grid,
            w,
            b,
            seed,
            stream_id,
        })
    }
}

/// Draws `W` and `B` for stream `stream_id`.
pub fn sample_bundle(
    grid: &TimeGrid,
    d: usize,
    ell: usize,
    seed: u64,
    stream_id: u64,
) -> Result<PathBundle> {
    Ok(PathBundle {
        grid: *grid,
        w: Increments::sample(grid, d, seed, Channel::Forward, stream_id)?,
        b: Increments::sample(grid, ell, seed, Channel::Backward, stream_id)?,
        seed,
        stream_id,
    })
}

/// Integrand of a backward Itô sum: row `i` holds the value at node `t_{i+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct RightNodeSamples {
    dim: usize,
    values: Vec<f64>,
}

impl RightNodeSamples {
    /// From values at every node `0..=N` (`(N + 1) x dim`); node 0 is dropped.
    pub fn from_node_values(dim: usize, node_values: &[f64]) -> Result<Self> {
        if dim == 0 || !node_values.len().is_multiple_of(dim) || node_values.len() < 2 * dim {
            return Err(Error::Dimension(
                "node values must cover at least two nodes".into(),
            ));
        }
        Ok(RightNodeSamples {
            dim,
            values: node_values[dim..].to_vec(),
        })
    }

    /// Evaluates `f(node, t_node, out)` at the right node of every step.
    pub fn from_fn(grid: &TimeGrid, dim: usize, mut f: impl FnMut(usize, f64, &mut [f64])) -> Self {
        let mut values = vec![0.0; grid.n_steps() * dim];
        for (step, row) in values.chunks_exact_mut(dim).enumerate() {
            f(step + 1, grid.time(step + 1), row);
        }
        RightNodeSamples { dim, values }
    }

    pub fn constant(grid: &TimeGrid, value: &[f64]) -> Self {
        Self::from_fn(grid, value.len(), |_, _, out| out.copy_from_slice(value))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_steps(&self) -> usize {
        self.values.len() / self.dim
    }

    /// Value at node `step + 1`.
    pub fn at_step(&self, step: usize) -> &[f64] {
        &self.values[step * self.dim..(step + 1) * self.dim]
    }
}

fn check_range(from: usize, to: usize, n_steps: usize) -> Result<()> {
    if from > to || to > n_steps {
        return Err(Error::StepRange { from, to, n_steps });
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

/// `sum_{i=from}^{to-1} <v(t_{i+1}), dB_i>`, accumulated from the latest step backward.
pub fn backward_ito_integral(
    integrand: &RightNodeSamples,
    b: &Increments,
    from: usize,
    to: usize,
) -> Result<f64> {
    if integrand.dim() != b.dim() || integrand.n_steps() != b.n_steps() {
        return Err(Error::Dimension(format!(
            "integrand is {}x{}, increments are {}x{}",
            integrand.n_steps(),
            integrand.dim(),
            b.n_steps(),
            b.dim()
        )));
    }
    check_range(from, to, b.n_steps())?;
    Ok((from..to)
        .rev()
        .map(|i| dot(integrand.at_step(i), b.row(i)))
        .sum())
}

/// Backward Stratonovich sum of a state-dependent integrand along `states`
/// (one scalar state per node). Each step evaluates `g` at the midpoint time and
/// at the average of the right-node state and the Euler predictor
/// `y_{i+1} + <g(t_{i+1}, y_{i+1}), dB_i>`.
pub fn backward_stratonovich_integral<G>(
    g: G,
    states: &[f64],
    grid: &TimeGrid,
    b: &Increments,
    from: usize,
    to: usize,
) -> Result<f64>
where
    G: Fn(f64, f64, &mut [f64]),
{
    if states.len() != b.n_steps() + 1 || grid.n_steps() != b.n_steps() {
        return Err(Error::Dimension(format!(
            "{} states for {} steps of increments",
            states.len(),
            b.n_steps()
        )));
    }
    check_range(from, to, b.n_steps())?;
    let mut gv = vec![0.0; b.dim()];
    let mut total = 0.0;
    for i in (from..to).rev() {
        let db = b.row(i);
        let right = states[i + 1];
        g(grid.time(i + 1), right, &mut gv);
        let predictor = right + dot(&gv, db);
        g(
            0.5 * (grid.time(i) + grid.time(i + 1)),
            0.5 * (right + predictor),
            &mut gv,
        );
        total += dot(&gv, db);
    }
    Ok(total)
}
