//! Model-error covariance models and their action on adjoint fields.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, SpaceTimeField};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelError {
    /// Delta-correlated (white) error of intensity `sigma_f2`.
    Isotropic { sigma_f2: f64 },
    /// Gaussian in space, exponential in time.
    NonIsotropic { sigma_f2: f64, l_f: f64, tau_f: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    #[serde(flatten)]
    pub model: ModelError,
    /// Initial-condition error variance; zero treats the initial state as exact.
    #[serde(default)]
    pub ci_variance: f64,
}

impl CovarianceSpec {
    pub fn isotropic(sigma_f2: f64) -> Self {
        CovarianceSpec {
            model: ModelError::Isotropic { sigma_f2 },
            ci_variance: 0.0,
        }
    }

    pub fn non_isotropic(sigma_f2: f64, l_f: f64, tau_f: f64) -> Self {
        CovarianceSpec {
            model: ModelError::NonIsotropic { sigma_f2, l_f, tau_f },
            ci_variance: 0.0,
        }
    }

    pub fn with_ci(mut self, ci_variance: f64) -> Self {
        self.ci_variance = ci_variance;
        self
    }

    pub fn sigma_f2(&self) -> f64 {
        match self.model {
            ModelError::Isotropic { sigma_f2 } | ModelError::NonIsotropic { sigma_f2, .. } => sigma_f2,
        }
    }

    /// Same shape, different variance.
    pub fn with_sigma_f2(mut self, v: f64) -> Self {
        match &mut self.model {
            ModelError::Isotropic { sigma_f2 } | ModelError::NonIsotropic { sigma_f2, .. } => *sigma_f2 = v,
        }
        self
    }

    pub fn is_isotropic(&self) -> bool {
        matches!(self.model, ModelError::Isotropic { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.sigma_f2()) || !ok(self.ci_variance) {
            return Err(Error::param(format!(
                "variances must be finite and >= 0: sigma_f2 = {}, ci = {}",
                self.sigma_f2(),
                self.ci_variance
            )));
        }
        if let ModelError::NonIsotropic { l_f, tau_f, .. } = self.model {
            if !(l_f > 0.0 && l_f.is_finite() && tau_f > 0.0 && tau_f.is_finite()) {
                return Err(Error::param(format!(
                    "correlation scales must be positive: l_f = {l_f}, tau_f = {tau_f}"
                )));
            }
        }
        Ok(())
    }
}

/// `sigma_f2 exp(-|x-x'|^2 / (2 l_f^2)) exp(-|t-t'| / tau_f)`.
pub fn kernel_eval(sigma_f2: f64, l_f: f64, tau_f: f64, x: f64, t: f64, xp: f64, tp: f64) -> f64 {
    sigma_f2 * (-(x - xp).powi(2) / (2.0 * l_f * l_f)).exp() * (-(t - tp).abs() / tau_f).exp()
}

/// `C_f` bound to a grid, with the separable kernel factors precomputed.
#[derive(Debug, Clone)]
pub struct CovarianceOperator {
    spec: CovarianceSpec,
    grid: Grid,
    // (K_t, K_x) for the non-isotropic kernel.
    factors: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

impl CovarianceOperator {
    pub fn new(spec: CovarianceSpec, grid: Grid) -> Result<Self> {
        spec.validate()?;
        let factors = match spec.model {
            ModelError::Isotropic { .. } => None,
            ModelError::NonIsotropic { l_f, tau_f, .. } => {
                let xs = grid.x_centers();
                let ts = grid.t_levels();
                let kx = DMatrix::from_fn(grid.nx, grid.nx, |i, j| {
                    (-(xs[i] - xs[j]).powi(2) / (2.0 * l_f * l_f)).exp()
                });
                let kt = DMatrix::from_fn(grid.nt, grid.nt, |n, m| (-(ts[n] - ts[m]).abs() / tau_f).exp());
                Some((kt, kx))
            }
        };
        Ok(CovarianceOperator { spec, grid, factors })
    }

    pub fn spec(&self) -> &CovarianceSpec {
        &self.spec
    }

    /// `C_f . lam`. White noise gives `sigma_f2 lam`; the smooth kernel is
    /// integrated by midpoint quadrature with cell measure `dx dt`.
    pub fn apply_cf(&self, lam: &SpaceTimeField) -> Result<SpaceTimeField> {
        if *lam.grid() != self.grid {
            return Err(Error::Shape {
                what: "covariance operand grid",
                expected: self.grid.len(),
                got: lam.grid().len(),
            });
        }
        let s2 = self.spec.sigma_f2();
        match &self.factors {
            None => Ok(lam.scaled(s2)),
            Some((kt, kx)) => {
                let g = self.grid;
                // Level-major storage read column-major is the nx x nt transpose.
                let lam_t = DMatrix::from_column_slice(g.nx, g.nt, lam.values());
                let out_t = (kx * lam_t * kt) * (s2 * g.dx() * g.dt());
                SpaceTimeField::from_values(g, out_t.as_slice().to_vec())
            }
        }
    }

    /// `C_i o lam0` for an isotropic initial-condition error.
    pub fn apply_ci(&self, lam0: &[f64]) -> Result<Vec<f64>> {
        apply_ci(&self.spec, lam0, self.grid.nx)
    }
}

pub fn apply_cf(spec: &CovarianceSpec, lam: &SpaceTimeField) -> Result<SpaceTimeField> {
    CovarianceOperator::new(*spec, *lam.grid())?.apply_cf(lam)
}

pub fn apply_ci(spec: &CovarianceSpec, lam0: &[f64], nx: usize) -> Result<Vec<f64>> {
    if lam0.len() != nx {
        return Err(Error::Shape {
            what: "initial adjoint",
            expected: nx,
            got: lam0.len(),
        });
    }
    Ok(lam0.iter().map(|v| spec.ci_variance * v).collect())
}
