//! Synthetic point observations: location sampling, the bilinear observation
//! operator, state-proportional noise, and the RMSE-band column filter.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, SpaceTimeField, Stencil};
use crate::rng;

/// Attempts allowed per requested column before the filter gives up.
pub const FILTER_BUDGET_FACTOR: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObsPoint {
    pub x: f64,
    pub t: f64,
    pub d: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservationSet {
    pub points: Vec<ObsPoint>,
    pub stencils: Vec<Stencil>,
    pub seed: u64,
}

impl ObservationSet {
    /// Builds the set, computing stencils from the grid.
    pub fn new(grid: &Grid, points: Vec<ObsPoint>, seed: u64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::param("observation set needs at least one point"));
        }
        let stencils = points
            .iter()
            .map(|p| {
                if !(p.sigma >= 0.0) {
                    return Err(Error::param(format!("negative noise std {}", p.sigma)));
                }
                grid.stencil(p.x, p.t)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ObservationSet { points, stencils, seed })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn data(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.d).collect()
    }

    pub fn noise_variances(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.sigma * p.sigma).collect()
    }

    pub fn locations(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (p.x, p.t)).collect()
    }

    /// `H f`.
    pub fn apply(&self, field: &SpaceTimeField) -> Vec<f64> {
        self.stencils.iter().map(|s| s.apply(field.values())).collect()
    }

    /// `H^T v` with the same stencils.
    pub fn apply_transpose(&self, grid: Grid, v: &[f64]) -> SpaceTimeField {
        let mut out = SpaceTimeField::zeros(grid);
        for (s, &vm) in self.stencils.iter().zip(v) {
            s.deposit(out.values_mut(), vm);
        }
        out
    }

    /// Same points with the measured values replaced.
    pub fn with_data(&self, d: &[f64]) -> Result<Self> {
        if d.len() != self.len() {
            return Err(Error::Shape {
                what: "data column",
                expected: self.len(),
                got: d.len(),
            });
        }
        let mut out = self.clone();
        for (p, &v) in out.points.iter_mut().zip(d) {
            p.d = v;
        }
        Ok(out)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "t", "d", "sigma"])?;
        for p in &self.points {
            w.serialize((p.x, p.t, p.d, p.sigma))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(grid: &Grid, path: &Path, seed: u64) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let points = r
            .deserialize::<(f64, f64, f64, f64)>()
            .map(|row| row.map(|(x, t, d, sigma)| ObsPoint { x, t, d, sigma }))
            .collect::<Result<Vec<_>, _>>()?;
        ObservationSet::new(grid, points, seed)
    }
}

/// `m` points i.i.d. uniform over the grid's space-time rectangle.
pub fn sample_locations(grid: &Grid, m: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut r = rng::stream(seed, 0x10c);
    (0..m)
        .map(|_| {
            let x = r.random_range(grid.x_min..grid.x_max);
            let t = r.random_range(grid.t_min..grid.t_max);
            (x, t)
        })
        .collect()
}

/// Bilinear interpolation of `field` at each `(x, t)`.
pub fn interpolate(field: &SpaceTimeField, points: &[(f64, f64)]) -> Result<Vec<f64>> {
    points
        .iter()
        .map(|&(x, t)| Ok(field.grid().stencil(x, t)?.apply(field.values())))
        .collect()
}

/// One noisy draw with `sigma_m = sigma_level * |H_m truth|`.
pub fn generate_observations(
    truth: &SpaceTimeField,
    locations: &[(f64, f64)],
    sigma_level: f64,
    seed: u64,
) -> Result<ObservationSet> {
    if !(sigma_level >= 0.0) {
        return Err(Error::param(format!("noise level must be >= 0, got {sigma_level}")));
    }
    let at = interpolate(truth, locations)?;
    let sigma: Vec<f64> = at.iter().map(|v| sigma_level * v.abs()).collect();
    let mut r = rng::stream(seed, 0xda7a);
    let d = noisy_column(&at, &sigma, &mut r);
    let points = locations
        .iter()
        .zip(d.iter().zip(&sigma))
        .map(|(&(x, t), (&d, &s))| ObsPoint { x, t, d, sigma: s })
        .collect();
    ObservationSet::new(truth.grid(), points, seed)
}

fn noisy_column(at: &[f64], sigma: &[f64], r: &mut impl Rng) -> Vec<f64> {
    at.iter()
        .zip(sigma)
        .map(|(&v, &s)| {
            let z: f64 = StandardNormal.sample(r);
            v + s * z
        })
        .collect()
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().max(1) as f64;
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n).sqrt()
}

/// RMSE statistics from the calibration draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmseBand {
    pub mean: f64,
    pub std: f64,
    pub draws: usize,
}

impl RmseBand {
    pub fn lo(&self) -> f64 {
        self.mean - self.std
    }

    pub fn hi(&self) -> f64 {
        self.mean + self.std
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo() && v <= self.hi()
    }
}

/// `M x n_keep` data matrix of band-accepted noisy draws at fixed locations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataMatrix {
    pub locations: Vec<(f64, f64)>,
    pub truth_at: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Accepted columns, each of length `M`.
    pub columns: Vec<Vec<f64>>,
    pub band: RmseBand,
    pub attempts: usize,
    pub seed: u64,
}

impl DataMatrix {
    pub fn n_obs(&self) -> usize {
        self.locations.len()
    }

    pub fn column_rmse(&self, j: usize) -> f64 {
        rmse(&self.columns[j], &self.truth_at)
    }

    pub fn observation_set(&self, grid: &Grid, j: usize) -> Result<ObservationSet> {
        let points = self
            .locations
            .iter()
            .zip(&self.columns[j])
            .zip(&self.sigma)
            .map(|((&(x, t), &d), &sigma)| ObsPoint { x, t, d, sigma })
            .collect();
        ObservationSet::new(grid, points, rng::derive_seed(self.seed, j as u64))
    }

    /// One CSV: `x, t, truth, sigma, d_0, d_1, ...`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "x,t,truth,sigma")?;
        for j in 0..self.columns.len() {
            write!(f, ",d_{j}")?;
        }
        writeln!(f)?;
        for m in 0..self.n_obs() {
            let (x, t) = self.locations[m];
            write!(f, "{x},{t},{},{}", self.truth_at[m], self.sigma[m])?;
            for col in &self.columns {
                write!(f, ",{}", col[m])?;
            }
            writeln!(f)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Draws `n_mc` noisy columns to estimate the RMSE mean and standard deviation,
/// then keeps the first `n_keep` fresh draws whose RMSE lies within one
/// standard deviation of the mean.
pub fn calibrate_and_filter(
    truth: &SpaceTimeField,
    locations: &[(f64, f64)],
    sigma_level: f64,
    n_mc: usize,
    n_keep: usize,
    seed: u64,
) -> Result<DataMatrix> {
    if n_keep == 0 || n_mc < n_keep {
        return Err(Error::param(format!(
            "need n_mc >= n_keep >= 1, got n_mc = {n_mc}, n_keep = {n_keep}"
        )));
    }
    if !(sigma_level >= 0.0) {
        return Err(Error::param(format!("noise level must be >= 0, got {sigma_level}")));
    }
    let at = interpolate(truth, locations)?;
    let sigma: Vec<f64> = at.iter().map(|v| sigma_level * v.abs()).collect();
    let draw = |k: usize| {
        let mut r = rng::stream(seed, k as u64);
        noisy_column(&at, &sigma, &mut r)
    };

    let rmses: Vec<f64> = (0..n_mc).into_par_iter().map(|k| rmse(&draw(k), &at)).collect();
    let mean = rmses.iter().sum::<f64>() / n_mc as f64;
    let var = if n_mc > 1 {
        rmses.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n_mc - 1) as f64
    } else {
        0.0
    };
    let band = RmseBand {
        mean,
        std: var.sqrt(),
        draws: n_mc,
    };

    let budget = FILTER_BUDGET_FACTOR * n_keep;
    let mut columns = Vec::with_capacity(n_keep);
    let mut attempts = 0;
    // Fresh draws continue the stream index after the calibration block.
    let chunk = n_keep.max(64);
    while columns.len() < n_keep && attempts < budget {
        let end = (attempts + chunk).min(budget);
        let batch: Vec<Vec<f64>> = (attempts..end).into_par_iter().map(|k| draw(n_mc + k)).collect();
        for col in batch {
            attempts += 1;
            if band.contains(rmse(&col, &at)) {
                columns.push(col);
                if columns.len() == n_keep {
                    break;
                }
            }
        }
    }
    if columns.len() < n_keep {
        return Err(Error::FilterExhausted {
            accepted: columns.len(),
            required: n_keep,
            attempts,
        });
    }
    Ok(DataMatrix {
        locations: locations.to_vec(),
        truth_at: at,
        sigma,
        columns,
        band,
        attempts,
        seed,
    })
}
