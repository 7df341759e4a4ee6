//! Driving noise: random stream policy, driver specifications and sampled
//! driver ensembles.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::TimeGrid;

/// Stream reserved for initial positions.
pub const INITIAL_STREAM: u64 = 0;
/// Stream reserved for a sampled common-noise path.
pub const COMMON_STREAM: u64 = 1;

/// Deterministic assignment of independent random streams.
///
/// Stream `i` is the ChaCha8 keystream keyed by `master_seed` with stream
/// id `i`, so its output depends only on `(master_seed, i)` and never on
/// how work is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngPolicy {
    pub master_seed: u64,
}

impl RngPolicy {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    pub fn stream(&self, i: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(i);
        rng
    }

    /// Stream owned by particle or driver path `index`.
    pub fn path_stream(&self, index: usize) -> ChaCha8Rng {
        self.stream(2 + index as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverKind {
    /// `Z = B`.
    Brownian,
    /// `Z = √(1−ρ²) B + ρ β` for a common path `β`.
    BrownianPlusPath,
    /// `Z = β`, a deterministic path.
    FixedPath,
}

/// Specification of the driver `Z`, optionally with an additive
/// deterministic drift `A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverSpec {
    pub kind: DriverKind,
    #[serde(default)]
    pub rho: f64,
    /// Common path `β` on the grid; sampled from [`COMMON_STREAM`] when
    /// absent for [`DriverKind::BrownianPlusPath`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub common_path: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<Vec<f64>>,
}

impl Default for DriverSpec {
    fn default() -> Self {
        Self::brownian()
    }
}

impl DriverSpec {
    pub fn brownian() -> Self {
        Self {
            kind: DriverKind::Brownian,
            rho: 0.0,
            common_path: None,
            drift: None,
        }
    }

    pub fn with_common_noise(rho: f64, common_path: Option<Vec<f64>>) -> Self {
        Self {
            kind: DriverKind::BrownianPlusPath,
            rho,
            common_path,
            drift: None,
        }
    }

    pub fn fixed_path(path: Vec<f64>) -> Self {
        Self {
            kind: DriverKind::FixedPath,
            rho: 0.0,
            common_path: Some(path),
            drift: None,
        }
    }

    pub fn with_drift(mut self, drift: Vec<f64>) -> Self {
        self.drift = Some(drift);
        self
    }

    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        if !(0.0..1.0).contains(&self.rho) {
            return invalid(format!("rho must be in [0,1), got {}", self.rho));
        }
        if self.kind == DriverKind::Brownian && self.rho != 0.0 {
            return invalid("rho must be 0 for a plain Brownian driver");
        }
        if self.kind == DriverKind::FixedPath && self.common_path.is_none() {
            return invalid("a fixed-path driver needs a path");
        }
        for (name, p) in [("common path", &self.common_path), ("drift", &self.drift)] {
            if let Some(p) = p {
                if p.len() != grid.len() {
                    return invalid(format!(
                        "{name} has {} points, grid has {}",
                        p.len(),
                        grid.len()
                    ));
                }
                if p[0] != 0.0 {
                    return invalid(format!("{name} must start at 0"));
                }
                if p.iter().any(|v| !v.is_finite()) {
                    return invalid(format!("{name} must be finite"));
                }
            }
        }
        Ok(())
    }

    /// Standard deviation of the idiosyncratic Brownian increment per step.
    pub fn idiosyncratic_scale(&self, grid: &TimeGrid) -> f64 {
        match self.kind {
            DriverKind::FixedPath => 0.0,
            _ => (1.0 - self.rho * self.rho).sqrt() * grid.dt().sqrt(),
        }
    }

    /// The increments shared by every path, one per step: the common-noise
    /// contribution plus the drift.
    pub fn common_increments(&self, grid: &TimeGrid, policy: &RngPolicy) -> Vec<f64> {
        let n = grid.n_steps();
        let mut inc = vec![0.0; n];
        match self.kind {
            DriverKind::Brownian => {}
            DriverKind::BrownianPlusPath => {
                let path = match &self.common_path {
                    Some(p) => p.clone(),
                    None => sample_brownian_path(grid, &mut policy.stream(COMMON_STREAM)),
                };
                for (i, d) in inc.iter_mut().enumerate() {
                    *d = self.rho * (path[i + 1] - path[i]);
                }
            }
            DriverKind::FixedPath => {
                let path = self.common_path.as_ref().expect("validated");
                for (i, d) in inc.iter_mut().enumerate() {
                    *d = path[i + 1] - path[i];
                }
            }
        }
        if let Some(a) = &self.drift {
            for (i, d) in inc.iter_mut().enumerate() {
                *d += a[i + 1] - a[i];
            }
        }
        inc
    }
}

/// A standard Brownian path on `grid` drawn from `rng`.
pub fn sample_brownian_path(grid: &TimeGrid, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = grid.dt().sqrt();
    let mut path = Vec::with_capacity(grid.len());
    let mut z = 0.0;
    path.push(z);
    for _ in 0..grid.n_steps() {
        let xi: f64 = StandardNormal.sample(rng);
        z += s * xi;
        path.push(z);
    }
    path
}

/// Where a [`DriverEnsemble`] came from; enough to regenerate it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub spec: DriverSpec,
    pub n_paths: usize,
}

/// `M` driver paths on a shared grid, path `j` drawn from stream `2 + j`.
#[derive(Debug, Clone)]
pub struct DriverEnsemble {
    grid: TimeGrid,
    n_paths: usize,
    data: Vec<f64>,
    provenance: Option<Provenance>,
}

impl DriverEnsemble {
    pub fn generate(spec: &DriverSpec, grid: TimeGrid, n_paths: usize, seed: u64) -> Result<Self> {
        spec.validate(&grid)?;
        if n_paths == 0 {
            return invalid("a driver ensemble needs at least one path");
        }
        let policy = RngPolicy::new(seed);
        let common = spec.common_increments(&grid, &policy);
        let scale = spec.idiosyncratic_scale(&grid);
        let stride = grid.len();
        let mut data = vec![0.0; n_paths * stride];
        data.par_chunks_mut(stride).enumerate().for_each(|(j, path)| {
            let mut rng = policy.path_stream(j);
            let mut z = 0.0;
            for (i, c) in common.iter().enumerate() {
                let xi: f64 = if scale > 0.0 { StandardNormal.sample(&mut rng) } else { 0.0 };
                z += scale * xi + c;
                path[i + 1] = z;
            }
        });
        Ok(Self {
            grid,
            n_paths,
            data,
            provenance: Some(Provenance {
                seed,
                spec: spec.clone(),
                n_paths,
            }),
        })
    }

    /// Wraps explicitly given paths (each starting at zero).
    pub fn from_paths(grid: TimeGrid, paths: Vec<Vec<f64>>) -> Result<Self> {
        if paths.is_empty() {
            return invalid("a driver ensemble needs at least one path");
        }
        let mut data = Vec::with_capacity(paths.len() * grid.len());
        for p in &paths {
            if p.len() != grid.len() || p[0] != 0.0 {
                return invalid("driver paths must match the grid and start at 0");
            }
            data.extend_from_slice(p);
        }
        Ok(Self {
            grid,
            n_paths: paths.len(),
            data,
            provenance: None,
        })
    }

    pub fn regenerate(p: &Provenance, grid: TimeGrid) -> Result<Self> {
        Self::generate(&p.spec, grid, p.n_paths, p.seed)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn path(&self, j: usize) -> &[f64] {
        let s = self.grid.len();
        &self.data[j * s..(j + 1) * s]
    }

    pub fn paths(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.grid.len())
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    /// Splits the ensemble into `k` contiguous batches of (nearly) equal size.
    pub fn batches(&self, k: usize) -> Vec<DriverEnsemble> {
        let k = k.clamp(1, self.n_paths);
        let s = self.grid.len();
        (0..k)
            .map(|b| {
                let lo = b * self.n_paths / k;
                let hi = (b + 1) * self.n_paths / k;
                DriverEnsemble {
                    grid: self.grid,
                    n_paths: hi - lo,
                    data: self.data[lo * s..hi * s].to_vec(),
                    provenance: None,
                }
            })
            .collect()
    }
}
