//! Finite measures on `[0, ∞)` with piecewise-linear distribution functions.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Absolute slack allowed above unit total mass.
const MASS_SLACK: f64 = 1e-12;

/// A finite measure on `[0, ∞)` whose distribution function `F` is
/// piecewise linear between `breakpoints` and constant outside them.
///
/// Equivalently the measure has a piecewise-constant density. `F` starts
/// at zero at the first breakpoint, so the measure has no atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MeasureRepr", into = "MeasureRepr")]
pub struct Measure1D {
    breakpoints: Vec<f64>,
    cdf: Vec<f64>,
    sup_density: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MeasureRepr {
    breakpoints: Vec<f64>,
    cdf: Vec<f64>,
}

impl TryFrom<MeasureRepr> for Measure1D {
    type Error = crate::Error;
    fn try_from(r: MeasureRepr) -> Result<Self> {
        Measure1D::new(r.breakpoints, r.cdf)
    }
}

impl From<Measure1D> for MeasureRepr {
    fn from(m: Measure1D) -> Self {
        MeasureRepr {
            breakpoints: m.breakpoints,
            cdf: m.cdf,
        }
    }
}

impl Measure1D {
    /// Builds a measure from its distribution function sampled at the
    /// breakpoints.
    pub fn new(breakpoints: Vec<f64>, mut cdf: Vec<f64>) -> Result<Self> {
        if breakpoints.len() < 2 {
            return invalid("a measure needs at least two breakpoints");
        }
        if breakpoints.len() != cdf.len() {
            return invalid(format!(
                "{} breakpoints but {} cdf values",
                breakpoints.len(),
                cdf.len()
            ));
        }
        if breakpoints.iter().chain(&cdf).any(|v| !v.is_finite()) {
            return invalid("breakpoints and cdf values must be finite");
        }
        if breakpoints[0] < 0.0 {
            return invalid(format!("first breakpoint {} is negative", breakpoints[0]));
        }
        if breakpoints.windows(2).any(|w| w[1] <= w[0]) {
            return invalid("breakpoints must be strictly increasing");
        }
        if cdf[0].abs() > 1e-15 {
            return invalid(format!(
                "cdf starts at {} > 0: atoms are not supported",
                cdf[0]
            ));
        }
        cdf[0] = 0.0;
        if cdf.windows(2).any(|w| w[1] < w[0]) {
            return invalid("cdf must be nondecreasing");
        }
        let mass = *cdf.last().unwrap();
        if !(mass > 0.0 && mass <= 1.0 + MASS_SLACK) {
            return invalid(format!("total mass {mass} outside (0, 1]"));
        }
        let sup_density = breakpoints
            .windows(2)
            .zip(cdf.windows(2))
            .map(|(x, f)| (f[1] - f[0]) / (x[1] - x[0]))
            .fold(0.0, f64::max);
        Ok(Self {
            breakpoints,
            cdf,
            sup_density,
        })
    }

    /// Builds a measure with density `densities[j]` on
    /// `[breakpoints[j], breakpoints[j+1])`.
    pub fn from_densities(breakpoints: Vec<f64>, densities: &[f64]) -> Result<Self> {
        if densities.len() + 1 != breakpoints.len() {
            return invalid(format!(
                "{} cells need {} breakpoints, got {}",
                densities.len(),
                densities.len() + 1,
                breakpoints.len()
            ));
        }
        if densities.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return invalid("densities must be finite and nonnegative");
        }
        let mut cdf = Vec::with_capacity(breakpoints.len());
        cdf.push(0.0);
        for (j, d) in densities.iter().enumerate() {
            let prev = cdf[j];
            cdf.push(prev + d * (breakpoints[j + 1] - breakpoints[j]));
        }
        Self::new(breakpoints, cdf)
    }

    /// The uniform probability measure on `[a, b]`.
    pub fn uniform(a: f64, b: f64) -> Result<Self> {
        if !(b > a) {
            return invalid(format!("uniform needs a < b, got [{a}, {b}]"));
        }
        Self::new(vec![a, b], vec![0.0, 1.0])
    }

    /// Builds a measure from density values sampled at the points `xs`,
    /// using the mean of the two endpoint values on each cell. Negative
    /// samples are clipped to zero.
    pub fn from_density_samples(xs: &[f64], values: &[f64]) -> Result<Self> {
        if xs.len() != values.len() {
            return invalid("density samples and abscissae differ in length");
        }
        let cells: Vec<f64> = values
            .windows(2)
            .map(|w| 0.5 * (w[0].max(0.0) + w[1].max(0.0)))
            .collect();
        Self::from_densities(xs.to_vec(), &cells)
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn cdf_values(&self) -> &[f64] {
        &self.cdf
    }

    pub fn total_mass(&self) -> f64 {
        *self.cdf.last().unwrap()
    }

    /// Maximum of the density, `‖V‖_∞`.
    pub fn sup_density(&self) -> f64 {
        self.sup_density
    }

    /// Cells `(left, right, density)` in increasing order.
    pub fn segments(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.breakpoints
            .windows(2)
            .zip(self.cdf.windows(2))
            .map(|(x, f)| (x[0], x[1], (f[1] - f[0]) / (x[1] - x[0])))
    }

    /// Distribution function `F(x) = μ([0, x])`.
    pub fn cdf(&self, x: f64) -> f64 {
        let bp = &self.breakpoints;
        if x <= bp[0] {
            return 0.0;
        }
        if x >= bp[bp.len() - 1] {
            return self.total_mass();
        }
        // first index with bp[j] > x, so x ∈ [bp[j-1], bp[j])
        let j = bp.partition_point(|&b| b <= x);
        let (x0, x1) = (bp[j - 1], bp[j]);
        let (f0, f1) = (self.cdf[j - 1], self.cdf[j]);
        // the cap keeps F monotone in floating point across breakpoints
        (f0 + (f1 - f0) * (x - x0) / (x1 - x0)).min(f1)
    }

    /// Right-continuous density.
    pub fn density(&self, x: f64) -> f64 {
        let bp = &self.breakpoints;
        if x < bp[0] || x >= bp[bp.len() - 1] {
            return 0.0;
        }
        let j = bp.partition_point(|&b| b <= x);
        (self.cdf[j] - self.cdf[j - 1]) / (bp[j] - bp[j - 1])
    }

    /// Mass of `(a, b]`; zero when `b ≤ a`.
    pub fn interval_mass(&self, a: f64, b: f64) -> f64 {
        if b > a {
            (self.cdf(b) - self.cdf(a)).max(0.0)
        } else {
            0.0
        }
    }

    /// Generalised inverse of `F` on `[0, total_mass]`: the smallest `x`
    /// with `F(x) ≥ u`.
    pub fn quantile(&self, u: f64) -> f64 {
        let m = self.total_mass();
        let bp = &self.breakpoints;
        if u <= 0.0 {
            return bp[0];
        }
        if u >= m {
            // last point where F first reaches the total mass
            let j = self.cdf.partition_point(|&f| f < m);
            return bp[j];
        }
        // first j with cdf[j] ≥ u; cdf[j-1] < u so the cell has positive slope
        let j = self.cdf.partition_point(|&f| f < u);
        let (f0, f1) = (self.cdf[j - 1], self.cdf[j]);
        let (x0, x1) = (bp[j - 1], bp[j]);
        (x0 + (x1 - x0) * (u - f0) / (f1 - f0)).min(x1)
    }

    /// The measure `A ↦ μ(A + shift)` restricted to `[0, ∞)`: its
    /// distribution function is `F(x + shift) − F(shift)`.
    pub fn shifted_left(&self, shift: f64) -> Result<Self> {
        if shift < 0.0 {
            return invalid(format!("shift must be nonnegative, got {shift}"));
        }
        if shift == 0.0 {
            return Ok(self.clone());
        }
        let base = self.cdf(shift);
        let mut bps = Vec::with_capacity(self.breakpoints.len() + 1);
        let mut cdf = Vec::with_capacity(self.breakpoints.len() + 1);
        if shift > self.breakpoints[0] {
            bps.push(0.0);
            cdf.push(0.0);
        }
        for (&b, &f) in self.breakpoints.iter().zip(&self.cdf) {
            if b > shift {
                bps.push(b - shift);
                cdf.push((f - base).max(0.0));
            }
        }
        if bps.len() < 2 {
            return invalid(format!("no mass remains after shifting by {shift}"));
        }
        Self::new(bps, cdf)
    }

    /// The same shape rescaled to total mass `mass`.
    pub fn with_mass(&self, mass: f64) -> Result<Self> {
        let k = mass / self.total_mass();
        Self::new(
            self.breakpoints.clone(),
            self.cdf.iter().map(|f| f * k).collect(),
        )
    }
}
