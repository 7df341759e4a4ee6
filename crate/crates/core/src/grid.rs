//! Uniform time grids and loss paths living on them.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// A uniform grid `t_i = i·dt`, `i = 0..=n_steps`, covering `[0, horizon]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpec", into = "GridSpec")]
pub struct TimeGrid {
    horizon: f64,
    dt: f64,
    n_steps: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSpec {
    horizon: f64,
    dt: f64,
}

impl TryFrom<GridSpec> for TimeGrid {
    type Error = crate::Error;
    fn try_from(s: GridSpec) -> Result<Self> {
        TimeGrid::new(s.horizon, s.dt)
    }
}

impl From<TimeGrid> for GridSpec {
    fn from(g: TimeGrid) -> Self {
        GridSpec {
            horizon: g.horizon,
            dt: g.dt,
        }
    }
}

impl TimeGrid {
    /// Builds the grid; `horizon` must be an integer multiple of `dt` up to
    /// a relative error of `1e-9`.
    pub fn new(horizon: f64, dt: f64) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return invalid(format!("horizon must be positive, got {horizon}"));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return invalid(format!("dt must be positive, got {dt}"));
        }
        let n = (horizon / dt).round();
        if n < 1.0 || (n * dt - horizon).abs() > 1e-9 * horizon {
            return invalid(format!("horizon {horizon} is not a multiple of dt {dt}"));
        }
        Ok(Self {
            horizon,
            dt,
            n_steps: n as usize,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of grid points, `n_steps + 1`.
    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n_steps).map(|i| self.time(i))
    }

    /// Index of the grid point closest to `t`, clamped to the grid.
    pub fn index_of(&self, t: f64) -> usize {
        let i = (t / self.dt).round();
        if i <= 0.0 {
            0
        } else {
            (i as usize).min(self.n_steps)
        }
    }
}

/// A nondecreasing path with values in `[0, 1]` sampled on a [`TimeGrid`],
/// read as a right-continuous step function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LossRepr", into = "LossRepr")]
pub struct LossPath {
    grid: TimeGrid,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LossRepr {
    grid: TimeGrid,
    values: Vec<f64>,
}

impl TryFrom<LossRepr> for LossPath {
    type Error = crate::Error;
    fn try_from(r: LossRepr) -> Result<Self> {
        LossPath::new(r.grid, r.values)
    }
}

impl From<LossPath> for LossRepr {
    fn from(l: LossPath) -> Self {
        LossRepr {
            grid: l.grid,
            values: l.values,
        }
    }
}

impl LossPath {
    pub fn new(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return invalid(format!(
                "loss path has {} values, grid has {} points",
                values.len(),
                grid.len()
            ));
        }
        for (i, &v) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return invalid(format!("loss value {v} at index {i} outside [0,1]"));
            }
            if i > 0 && v < values[i - 1] {
                return invalid(format!("loss path decreases at index {i}"));
            }
        }
        Ok(Self { grid, values })
    }

    /// The constant path `value` (used as a Picard starting guess).
    pub fn constant(grid: TimeGrid, value: f64) -> Result<Self> {
        Self::new(grid, vec![value; grid.len()])
    }

    pub fn zero(grid: TimeGrid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn terminal(&self) -> f64 {
        *self.values.last().expect("grid has at least two points")
    }

    /// Value at time `t` of the right-continuous step interpolation.
    pub fn at(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return self.values[0];
        }
        let i = ((t / self.grid.dt()) + 1e-9).floor() as usize;
        self.values[i.min(self.values.len() - 1)]
    }

    /// `sup_t |self_t − other_t|` over the grid.
    pub fn sup_distance(&self, other: &LossPath) -> f64 {
        sup_distance(&self.values, &other.values)
    }

    /// Increments `L_i − L_{i−1}`, `i = 1..=n_steps`.
    pub fn increments(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values.windows(2).enumerate().map(|(i, w)| (i + 1, w[1] - w[0]))
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

pub(crate) fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
