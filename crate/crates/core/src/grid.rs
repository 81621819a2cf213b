//! Space-time grid, fields over it, and the bilinear point stencil shared by
//! the observation operator and the adjoint impulse deposition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform finite-volume grid: `nx` cells on `[x_min, x_max]` and `nt` time
/// levels spanning `[t_min, t_max]` inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub x_min: f64,
    pub x_max: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub nx: usize,
    pub nt: usize,
}

impl Grid {
    pub fn new(x_min: f64, x_max: f64, t_min: f64, t_max: f64, nx: usize, nt: usize) -> Result<Self> {
        let grid = Grid {
            x_min,
            x_max,
            t_min,
            t_max,
            nx,
            nt,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.nt < 2 {
            return Err(Error::InvalidGrid(format!(
                "need nx >= 2 and nt >= 2, got nx = {}, nt = {}",
                self.nx, self.nt
            )));
        }
        let finite = [self.x_min, self.x_max, self.t_min, self.t_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x_max <= self.x_min || self.t_max <= self.t_min {
            return Err(Error::InvalidGrid(format!(
                "degenerate extent x in [{}, {}], t in [{}, {}]",
                self.x_min, self.x_max, self.t_min, self.t_max
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.nx as f64
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        (self.t_max - self.t_min) / (self.nt - 1) as f64
    }

    /// Number of space-time values, `nx * nt`.
    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.nt
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn x_center(&self, i: usize) -> f64 {
        self.x_min + (i as f64 + 0.5) * self.dx()
    }

    #[inline]
    pub fn t_level(&self, n: usize) -> f64 {
        self.t_min + n as f64 * self.dt()
    }

    pub fn x_centers(&self) -> Vec<f64> {
        (0..self.nx).map(|i| self.x_center(i)).collect()
    }

    pub fn t_levels(&self) -> Vec<f64> {
        (0..self.nt).map(|n| self.t_level(n)).collect()
    }

    /// Courant number `|u| dt / dx`.
    #[inline]
    pub fn courant(&self, u: f64) -> f64 {
        u.abs() * self.dt() / self.dx()
    }

    pub fn check_cfl(&self, u: f64) -> Result<()> {
        let courant = self.courant(u);
        if !courant.is_finite() || courant > 1.0 {
            return Err(Error::Cfl { courant });
        }
        Ok(())
    }

    pub fn contains(&self, x: f64, t: f64) -> bool {
        x >= self.x_min && x <= self.x_max && t >= self.t_min && t <= self.t_max
    }

    /// Bilinear interpolation stencil at `(x, t)` over cell centers and time
    /// levels. Points in the half cell next to either wall take the nearest
    /// center value in x.
    pub fn stencil(&self, x: f64, t: f64) -> Result<Stencil> {
        if !self.contains(x, t) {
            return Err(Error::OutsideDomain { x, t });
        }
        let xi = ((x - self.x_min) / self.dx() - 0.5).clamp(0.0, (self.nx - 1) as f64);
        let i0 = (xi.floor() as usize).min(self.nx - 2);
        let wx = xi - i0 as f64;

        let tau = (t - self.t_min) / self.dt();
        let n0 = (tau.floor() as usize).min(self.nt - 2);
        let wt = (tau - n0 as f64).clamp(0.0, 1.0);

        let idx = |n: usize, i: usize| n * self.nx + i;
        Ok(Stencil {
            entries: [
                (idx(n0, i0), (1.0 - wt) * (1.0 - wx)),
                (idx(n0, i0 + 1), (1.0 - wt) * wx),
                (idx(n0 + 1, i0), wt * (1.0 - wx)),
                (idx(n0 + 1, i0 + 1), wt * wx),
            ],
        })
    }
}

/// Sparse convex weights onto flat field indices (`level * nx + cell`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stencil {
    pub entries: [(usize, f64); 4],
}

impl Stencil {
    pub fn apply(&self, values: &[f64]) -> f64 {
        self.entries.iter().map(|&(k, w)| w * values[k]).sum()
    }

    /// Adds `scale * H^T` into `target`.
    pub fn deposit(&self, target: &mut [f64], scale: f64) {
        for &(k, w) in &self.entries {
            target[k] += scale * w;
        }
    }

    pub fn weight_sum(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum()
    }

    /// Latest time level carrying nonzero weight.
    pub fn last_level(&self, nx: usize) -> usize {
        self.entries
            .iter()
            .filter(|e| e.1 != 0.0)
            .map(|e| e.0 / nx)
            .max()
            .unwrap_or(0)
    }
}

/// A scalar field over the full grid, stored level-major (`nt` rows of `nx`).
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField {
    grid: Grid,
    values: Vec<f64>,
}

impl SpaceTimeField {
    pub fn zeros(grid: Grid) -> Self {
        SpaceTimeField {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn from_values(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape {
                what: "field values",
                expected: grid.len(),
                got: values.len(),
            });
        }
        Ok(SpaceTimeField { grid, values })
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for n in 0..grid.nt {
            let t = grid.t_level(n);
            for i in 0..grid.nx {
                values.push(f(grid.x_center(i), t));
            }
        }
        SpaceTimeField { grid, values }
    }

    #[inline]
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn at(&self, n: usize, i: usize) -> f64 {
        self.values[n * self.grid.nx + i]
    }

    #[inline]
    pub fn level(&self, n: usize) -> &[f64] {
        let nx = self.grid.nx;
        &self.values[n * nx..(n + 1) * nx]
    }

    #[inline]
    pub fn level_mut(&mut self, n: usize) -> &mut [f64] {
        let nx = self.grid.nx;
        &mut self.values[n * nx..(n + 1) * nx]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_grid(&self, other: &SpaceTimeField) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::Shape {
                what: "field grid",
                expected: self.grid.len(),
                got: other.grid.len(),
            });
        }
        Ok(())
    }

    /// Plain Euclidean inner product of the value arrays.
    pub fn dot(&self, other: &SpaceTimeField) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    /// Quadrature inner product with cell measure `dx * dt`.
    pub fn weighted_dot(&self, other: &SpaceTimeField) -> f64 {
        self.dot(other) * self.grid.dx() * self.grid.dt()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &SpaceTimeField) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn scaled(&self, scale: f64) -> SpaceTimeField {
        SpaceTimeField {
            grid: self.grid,
            values: self.values.iter().map(|v| v * scale).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Grid {
        Grid::new(30.0, 45.0, 0.0, 20.0, 10, 9).unwrap()
    }

    #[test]
    fn spacing() {
        let g = grid();
        assert!((g.dx() - 1.5).abs() < 1e-15);
        assert!((g.dt() - 2.5).abs() < 1e-15);
        assert!((g.x_center(0) - 30.75).abs() < 1e-12);
        assert_eq!(g.t_level(8), 20.0);
    }

    #[test]
    fn rejects_degenerate() {
        assert!(Grid::new(0.0, 1.0, 0.0, 1.0, 1, 5).is_err());
        assert!(Grid::new(0.0, 1.0, 0.0, 1.0, 5, 1).is_err());
        assert!(Grid::new(1.0, 1.0, 0.0, 1.0, 5, 5).is_err());
    }

    #[test]
    fn stencil_is_convex_and_reproduces_nodes() {
        let g = grid();
        let f = SpaceTimeField::from_fn(g, |x, t| x * 3.0 - t);
        let s = g.stencil(g.x_center(4), g.t_level(3)).unwrap();
        assert!((s.weight_sum() - 1.0).abs() < 1e-15);
        assert!((s.apply(f.values()) - f.at(3, 4)).abs() < 1e-12);
        for &(x, t) in &[(30.0, 0.0), (45.0, 20.0), (30.1, 19.9), (37.3, 11.1)] {
            let s = g.stencil(x, t).unwrap();
            assert!((s.weight_sum() - 1.0).abs() < 1e-14);
            assert!(s.entries.iter().all(|e| e.1 >= 0.0));
        }
        assert!(g.stencil(29.9, 1.0).is_err());
        assert!(g.stencil(31.0, 20.1).is_err());
    }
}
