//! Representer solution of the weak-constraint variational problem: one
//! backward and one forward solve per datum, then an `M x M` linear system.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::covariance::{CovarianceOperator, CovarianceSpec};
use crate::error::{Error, Result};
use crate::grid::SpaceTimeField;
use crate::observation::ObservationSet;
use crate::transport::{AdjointField, Advection, Impulse};

/// Above this many stored field values, representers are recomputed on demand.
pub const DEFAULT_FIELD_BUDGET: usize = 32_000_000;

/// Backward impulse solve for datum `m`, then the forward solve driven by
/// `C_f . alpha_m` from the initial state `C_i o alpha_m(., 0)`.
pub fn compute_representer_pair(
    adv: &Advection,
    cov: &CovarianceOperator,
    obs: &ObservationSet,
    m: usize,
) -> Result<(AdjointField, SpaceTimeField)> {
    let p = obs
        .points
        .get(m)
        .ok_or_else(|| Error::param(format!("datum index {m} out of range (M = {})", obs.len())))?;
    representer_at(adv, cov, p.x, p.t)
}

fn representer_at(adv: &Advection, cov: &CovarianceOperator, x: f64, t: f64) -> Result<(AdjointField, SpaceTimeField)> {
    let alpha = adv.solve_adjoint(&[Impulse { x, t, amplitude: 1.0 }])?;
    let forcing = cov.apply_cf(&alpha.field)?;
    let init = cov.apply_ci(&alpha.initial)?;
    let r = adv.solve_forward(None, Some(&forcing), &init)?;
    Ok((alpha, r))
}

/// `R[(m1, m2)] = r_{m1}(x_{m2}, t_{m2})`, before symmetrization.
fn gather_matrix(obs: &ObservationSet, fields: &[SpaceTimeField]) -> DMatrix<f64> {
    let m = obs.len();
    let mut r = DMatrix::zeros(m, m);
    for (m1, f) in fields.iter().enumerate() {
        for (m2, v) in obs.apply(f).into_iter().enumerate() {
            r[(m1, m2)] = v;
        }
    }
    r
}

fn relative_asymmetry(r: &DMatrix<f64>) -> f64 {
    (r - r.transpose()).norm() / (1.0 + r.norm())
}

fn symmetrize(r: &DMatrix<f64>) -> DMatrix<f64> {
    (r + r.transpose()) * 0.5
}

/// Penalty functionals at the optimum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Penalties {
    /// `beta^T C_eps beta`, the weighted data misfit.
    pub data: f64,
    /// `beta^T R beta`, the weighted model and initial-condition misfit.
    pub model: f64,
    /// `h^T P^-1 h`.
    pub total: f64,
}

/// The `M x M` problem `P beta = h` with `P = R + C_eps`.
#[derive(Debug, Clone)]
pub struct DataSpace {
    r: DMatrix<f64>,
    c_eps: DVector<f64>,
    h: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    beta: DVector<f64>,
    asymmetry: f64,
}

impl DataSpace {
    /// Symmetrizes `r`, factors `P` and solves for `beta` with one step of
    /// iterative refinement.
    pub fn new(r: DMatrix<f64>, c_eps: DVector<f64>, h: DVector<f64>) -> Result<Self> {
        let m = h.len();
        if r.nrows() != m || r.ncols() != m {
            return Err(Error::Shape {
                what: "representer matrix",
                expected: m * m,
                got: r.len(),
            });
        }
        if c_eps.len() != m {
            return Err(Error::Shape {
                what: "data covariance",
                expected: m,
                got: c_eps.len(),
            });
        }
        if !r.iter().all(|v| v.is_finite()) || !h.iter().all(|v| v.is_finite()) {
            return Err(Error::Degenerate("non-finite representer matrix or misfit".into()));
        }
        let asymmetry = relative_asymmetry(&r);
        let r = symmetrize(&r);
        let mut p = r.clone();
        for k in 0..m {
            p[(k, k)] += c_eps[k];
        }
        let chol = Cholesky::new(p.clone()).ok_or_else(|| {
            Error::Degenerate("P = R + C_eps is not positive definite (no noise and no model error?)".into())
        })?;
        let mut beta = chol.solve(&h);
        let resid = &h - &p * &beta;
        beta += chol.solve(&resid);
        if !beta.iter().all(|v| v.is_finite()) {
            return Err(Error::Degenerate("non-finite representer coefficients".into()));
        }
        Ok(DataSpace {
            r,
            c_eps,
            h,
            chol,
            beta,
            asymmetry,
        })
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn c_eps(&self) -> &DVector<f64> {
        &self.c_eps
    }

    pub fn h(&self) -> &DVector<f64> {
        &self.h
    }

    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    /// `||R - R^T||_F / (1 + ||R||_F)` of the matrix as assembled.
    pub fn asymmetry(&self) -> f64 {
        self.asymmetry
    }

    pub fn p(&self) -> DMatrix<f64> {
        let mut p = self.r.clone();
        for k in 0..self.len() {
            p[(k, k)] += self.c_eps[k];
        }
        p
    }

    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    pub fn p_inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn penalties(&self) -> Penalties {
        let b = &self.beta;
        let data = b.iter().zip(self.c_eps.iter()).map(|(bk, s2)| s2 * bk * bk).sum();
        let model = b.dot(&(&self.r * b));
        let total = self.h.dot(b);
        Penalties { data, model, total }
    }

    /// `q_hat - d` at the data, which equals `-C_eps beta`.
    pub fn fitted_residuals(&self) -> DVector<f64> {
        self.beta.component_mul(&self.c_eps).map(|v| -v)
    }

    /// Diagonal of the influence matrix `R P^-1`.
    pub fn influence_diag(&self) -> DVector<f64> {
        let pinv = self.p_inverse();
        DVector::from_iterator(self.len(), (0..self.len()).map(|k| 1.0 - self.c_eps[k] * pinv[(k, k)]))
    }

    /// Per-datum cross-validation terms `w_k ((q_hat_k - d_k) / (1 - (R P^-1)_kk))^2`,
    /// evaluated as `(beta_k / (P^-1)_kk)^2 / sigma_k^2` which avoids the
    /// cancellation in `1 - (R P^-1)_kk`.
    pub fn gcv_terms(&self) -> Result<Vec<f64>> {
        let pinv = self.p_inverse();
        (0..self.len())
            .map(|k| {
                let s2 = self.c_eps[k];
                if s2 == 0.0 {
                    return Err(Error::InterpolatingDatum { index: k });
                }
                let loo = self.beta[k] / pinv[(k, k)];
                Ok(loo * loo / s2)
            })
            .collect()
    }

    pub fn gcv(&self) -> Result<f64> {
        let terms = self.gcv_terms()?;
        Ok(terms.iter().sum::<f64>() / terms.len() as f64)
    }

    /// Ratio of extreme eigenvalues of `P`.
    pub fn condition_estimate(&self) -> f64 {
        let eig = SymmetricEigen::new(self.p()).eigenvalues;
        let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        if min <= 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }
}

/// Representer fields as a sum of scaled, shared component sets, or a
/// recipe to recompute them.
#[derive(Debug, Clone)]
pub enum RepresenterFields {
    Stored(Vec<(f64, Arc<Vec<SpaceTimeField>>)>),
    Streaming {
        adv: Advection,
        cov: CovarianceOperator,
        locations: Vec<(f64, f64)>,
    },
}

impl RepresenterFields {
    /// `sum_m c_m r_m`.
    pub fn combine(&self, coef: &[f64], out: &mut SpaceTimeField) -> Result<()> {
        match self {
            RepresenterFields::Stored(parts) => {
                for (scale, fields) in parts {
                    if *scale == 0.0 {
                        continue;
                    }
                    for (c, f) in coef.iter().zip(fields.iter()) {
                        out.axpy(scale * c, f);
                    }
                }
            }
            RepresenterFields::Streaming { adv, cov, locations } => {
                for (c, &(x, t)) in coef.iter().zip(locations) {
                    let (_, r) = representer_at(adv, cov, x, t)?;
                    out.axpy(*c, &r);
                }
            }
        }
        Ok(())
    }

    /// Field of representer `m`.
    pub fn field(&self, m: usize, template: &SpaceTimeField) -> Result<SpaceTimeField> {
        let mut coef = vec![0.0; self.len()];
        coef[m] = 1.0;
        let mut out = SpaceTimeField::zeros(*template.grid());
        self.combine(&coef, &mut out)?;
        Ok(out)
    }

    pub fn len(&self) -> usize {
        match self {
            RepresenterFields::Stored(parts) => parts.first().map_or(0, |p| p.1.len()),
            RepresenterFields::Streaming { locations, .. } => locations.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An assembled assimilation: first guess, data-space solution and the
/// representer fields needed to map back to the grid.
#[derive(Debug, Clone)]
pub struct RepresenterSystem {
    pub spec: CovarianceSpec,
    pub q_f: SpaceTimeField,
    pub data: DataSpace,
    pub fields: RepresenterFields,
}

impl RepresenterSystem {
    pub fn beta(&self) -> &DVector<f64> {
        self.data.beta()
    }

    pub fn r(&self) -> &DMatrix<f64> {
        self.data.r()
    }

    pub fn penalties(&self) -> Penalties {
        self.data.penalties()
    }

    pub fn summary(&self) -> SystemSummary {
        SystemSummary {
            spec: self.spec,
            n_obs: self.data.len(),
            penalties: self.penalties(),
            condition: self.data.condition_estimate(),
            asymmetry: self.data.asymmetry(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SystemSummary {
    pub spec: CovarianceSpec,
    pub n_obs: usize,
    pub penalties: Penalties,
    pub condition: f64,
    pub asymmetry: f64,
}

fn misfit(obs: &ObservationSet, q_f: &SpaceTimeField) -> DVector<f64> {
    let hq = obs.apply(q_f);
    DVector::from_iterator(obs.len(), obs.points.iter().zip(hq).map(|(p, v)| p.d - v))
}

fn noise(obs: &ObservationSet) -> DVector<f64> {
    DVector::from_vec(obs.noise_variances())
}

/// All representer pairs for the given covariance, as an independent parallel
/// map over data. Only the forward fields are kept.
pub fn representer_fields(
    adv: &Advection,
    cov: &CovarianceOperator,
    obs: &ObservationSet,
) -> Result<Vec<SpaceTimeField>> {
    obs.points
        .par_iter()
        .map(|p| representer_at(adv, cov, p.x, p.t).map(|(_, r)| r))
        .collect()
}

/// Full assembly from scratch; keeps the fields when they fit in `budget` values.
pub fn assemble_system_with_budget(
    adv: &Advection,
    spec: &CovarianceSpec,
    obs: &ObservationSet,
    q_f: &SpaceTimeField,
    budget: usize,
) -> Result<RepresenterSystem> {
    q_f.same_grid(&SpaceTimeField::zeros(*adv.grid()))?;
    let cov = CovarianceOperator::new(*spec, *adv.grid())?;
    let h = misfit(obs, q_f);
    let c_eps = noise(obs);
    if obs.len() * adv.grid().len() <= budget {
        let fields = representer_fields(adv, &cov, obs)?;
        let r = gather_matrix(obs, &fields);
        Ok(RepresenterSystem {
            spec: *spec,
            q_f: q_f.clone(),
            data: DataSpace::new(r, c_eps, h)?,
            fields: RepresenterFields::Stored(vec![(1.0, Arc::new(fields))]),
        })
    } else {
        let mut r = DMatrix::zeros(obs.len(), obs.len());
        let rows: Vec<Vec<f64>> = obs
            .points
            .par_iter()
            .map(|p| representer_at(adv, &cov, p.x, p.t).map(|(_, f)| obs.apply(&f)))
            .collect::<Result<_>>()?;
        for (m1, row) in rows.into_iter().enumerate() {
            for (m2, v) in row.into_iter().enumerate() {
                r[(m1, m2)] = v;
            }
        }
        Ok(RepresenterSystem {
            spec: *spec,
            q_f: q_f.clone(),
            data: DataSpace::new(r, c_eps, h)?,
            fields: RepresenterFields::Streaming {
                adv: *adv,
                cov,
                locations: obs.locations(),
            },
        })
    }
}

pub fn assemble_system(
    adv: &Advection,
    spec: &CovarianceSpec,
    obs: &ObservationSet,
    q_f: &SpaceTimeField,
) -> Result<RepresenterSystem> {
    assemble_system_with_budget(adv, spec, obs, q_f, DEFAULT_FIELD_BUDGET)
}

/// `q_hat = q_F + sum_m beta_m r_m`.
pub fn optimal_estimate(sys: &RepresenterSystem) -> Result<SpaceTimeField> {
    let mut out = sys.q_f.clone();
    sys.fields.combine(sys.beta().as_slice(), &mut out)?;
    Ok(out)
}

pub fn penalties(sys: &RepresenterSystem) -> Penalties {
    sys.penalties()
}

/// Data misfit evaluated directly on an estimate, skipping exact data.
pub fn data_penalty_direct(q_hat: &SpaceTimeField, obs: &ObservationSet) -> f64 {
    obs.apply(q_hat)
        .iter()
        .zip(&obs.points)
        .filter(|(_, p)| p.sigma > 0.0)
        .map(|(v, p)| ((v - p.d) / p.sigma).powi(2))
        .sum()
}

/// Model penalty from the discrete residual `e^n = dq^{n+1} - A dq^n`,
/// `dq = q_hat - q_F`, weighted by `dx / (dt sigma_f2)`, plus the
/// initial-condition term `dx / ci |dq^0|^2`. Isotropic covariances only.
pub fn model_penalty_residual(
    adv: &Advection,
    spec: &CovarianceSpec,
    q_hat: &SpaceTimeField,
    q_f: &SpaceTimeField,
) -> Result<f64> {
    if !spec.is_isotropic() {
        return Err(Error::param("residual model penalty needs an isotropic covariance"));
    }
    q_hat.same_grid(q_f)?;
    let g = *adv.grid();
    let mut dq = q_hat.clone();
    dq.axpy(-1.0, q_f);
    let mut pred = vec![0.0; g.nx];
    let mut acc = 0.0;
    for n in 0..g.nt - 1 {
        adv.step(dq.level(n), &mut pred);
        acc += dq
            .level(n + 1)
            .iter()
            .zip(&pred)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
    }
    let mut total = 0.0;
    if acc > 0.0 {
        total += acc * g.dx() / (g.dt() * spec.sigma_f2());
    }
    let ic: f64 = dq.level(0).iter().map(|v| v * v).sum();
    if ic > 0.0 {
        total += ic * g.dx() / spec.ci_variance;
    }
    Ok(total)
}

/// Unit-variance representer fields for isotropic covariances at fixed data
/// locations: `R(sigma_f2, ci) = sigma_f2 R_f + ci R_i`.
#[derive(Debug, Clone)]
pub struct IsotropicBasis {
    locations: Vec<(f64, f64)>,
    forcing: Arc<Vec<SpaceTimeField>>,
    initial: Option<Arc<Vec<SpaceTimeField>>>,
    r_f: DMatrix<f64>,
    r_i: Option<DMatrix<f64>>,
}

impl IsotropicBasis {
    /// `with_initial` also builds the initial-condition component.
    pub fn new(adv: &Advection, obs: &ObservationSet, with_initial: bool) -> Result<Self> {
        let g = *adv.grid();
        let unit_f = CovarianceOperator::new(CovarianceSpec::isotropic(1.0), g)?;
        let unit_i = CovarianceOperator::new(CovarianceSpec::isotropic(0.0).with_ci(1.0), g)?;
        let pairs: Vec<(SpaceTimeField, Option<SpaceTimeField>)> = obs
            .points
            .par_iter()
            .map(|p| {
                let alpha = adv.solve_adjoint(&[Impulse {
                    x: p.x,
                    t: p.t,
                    amplitude: 1.0,
                }])?;
                let f = adv.solve_forward(None, Some(&unit_f.apply_cf(&alpha.field)?), &vec![0.0; g.nx])?;
                let i = if with_initial {
                    Some(adv.solve_forward(None, None, &unit_i.apply_ci(&alpha.initial)?)?)
                } else {
                    None
                };
                Ok((f, i))
            })
            .collect::<Result<_>>()?;
        let (forcing, initial): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let r_f = gather_matrix(obs, &forcing);
        let initial: Option<Vec<SpaceTimeField>> = initial.into_iter().collect();
        let r_i = initial.as_ref().map(|f| gather_matrix(obs, f));
        Ok(IsotropicBasis {
            locations: obs.locations(),
            forcing: Arc::new(forcing),
            initial: initial.map(Arc::new),
            r_f,
            r_i,
        })
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn locations(&self) -> &[(f64, f64)] {
        &self.locations
    }

    /// Unit-variance model-error block of `R`, as assembled.
    pub fn r_f(&self) -> &DMatrix<f64> {
        &self.r_f
    }

    fn check(&self, spec: &CovarianceSpec, obs: &ObservationSet) -> Result<()> {
        spec.validate()?;
        if !spec.is_isotropic() {
            return Err(Error::param("isotropic basis used with a non-isotropic covariance"));
        }
        if spec.ci_variance > 0.0 && self.r_i.is_none() {
            return Err(Error::param("basis was built without the initial-condition component"));
        }
        if obs.locations() != self.locations {
            return Err(Error::param("observation locations differ from the basis"));
        }
        Ok(())
    }

    pub fn matrix(&self, spec: &CovarianceSpec) -> DMatrix<f64> {
        let mut r = &self.r_f * spec.sigma_f2();
        if let Some(ri) = &self.r_i {
            if spec.ci_variance > 0.0 {
                r += ri * spec.ci_variance;
            }
        }
        r
    }

    /// Data-space solve only; no field work.
    pub fn data_space(&self, spec: &CovarianceSpec, obs: &ObservationSet, q_f: &SpaceTimeField) -> Result<DataSpace> {
        self.check(spec, obs)?;
        self.data_space_from_misfit(spec, noise(obs), misfit(obs, q_f))
    }

    pub fn data_space_from_misfit(
        &self,
        spec: &CovarianceSpec,
        c_eps: DVector<f64>,
        h: DVector<f64>,
    ) -> Result<DataSpace> {
        DataSpace::new(self.matrix(spec), c_eps, h)
    }

    pub fn system(
        &self,
        spec: &CovarianceSpec,
        obs: &ObservationSet,
        q_f: &SpaceTimeField,
    ) -> Result<RepresenterSystem> {
        let data = self.data_space(spec, obs, q_f)?;
        let mut parts = vec![(spec.sigma_f2(), self.forcing.clone())];
        if let Some(i) = &self.initial {
            parts.push((spec.ci_variance, i.clone()));
        }
        Ok(RepresenterSystem {
            spec: *spec,
            q_f: q_f.clone(),
            data,
            fields: RepresenterFields::Stored(parts),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::observation::ObsPoint;
    use crate::transport::{BoundaryKind, SourceParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, m: usize, sigma: f64) -> (Advection, ObservationSet, SpaceTimeField) {
        let g = Grid::new(30.0, 45.0, 0.0, 20.0, 12, 20).unwrap();
        let adv = Advection::new(g, 1.0, BoundaryKind::Periodic).unwrap();
        let src = SourceParams {
            s0: 100.0,
            k0: 0.5,
            alpha0: 10.0,
            x0: 33.0,
            ..SourceParams::ZERO
        };
        let q_f = adv.solve_forward(Some(&src), None, &vec![0.0; g.nx]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..m)
            .map(|_| ObsPoint {
                x: rng.random_range(30.0..45.0),
                t: rng.random_range(0.0..20.0),
                d: rng.random_range(0.0..10.0),
                sigma: sigma * rng.random_range(0.5..1.5),
            })
            .collect();
        (adv, ObservationSet::new(&g, points, seed).unwrap(), q_f)
    }

    #[test]
    fn zero_covariance_kills_representers() {
        let (adv, obs, q_f) = setup(1, 4, 1.0);
        let cov = CovarianceOperator::new(CovarianceSpec::isotropic(0.0), *adv.grid()).unwrap();
        let (alpha, r) = compute_representer_pair(&adv, &cov, &obs, 2).unwrap();
        assert!(r.values().iter().all(|&v| v == 0.0));
        assert!(alpha.field.values().iter().any(|&v| v != 0.0));
        let sys = assemble_system(&adv, &CovarianceSpec::isotropic(0.0), &obs, &q_f).unwrap();
        assert!(sys.r().iter().all(|&v| v == 0.0));
        let pen = sys.penalties();
        assert_eq!(pen.model, 0.0);
        let direct: f64 = sys
            .data
            .h()
            .iter()
            .zip(&obs.points)
            .map(|(h, p)| h * h / (p.sigma * p.sigma))
            .sum();
        assert!((pen.data - direct).abs() <= 1e-12 * direct);
        for (b, (h, p)) in sys.beta().iter().zip(sys.data.h().iter().zip(&obs.points)) {
            assert!((b - h / (p.sigma * p.sigma)).abs() <= 1e-12 * b.abs());
        }
    }

    #[test]
    fn adjoint_vanishes_after_datum() {
        let (adv, obs, _) = setup(2, 3, 1.0);
        let cov = CovarianceOperator::new(CovarianceSpec::isotropic(1.0), *adv.grid()).unwrap();
        let g = *adv.grid();
        for m in 0..obs.len() {
            let (alpha, _) = compute_representer_pair(&adv, &cov, &obs, m).unwrap();
            for n in 0..g.nt {
                if g.t_level(n) > obs.points[m].t {
                    assert!(alpha.field.level(n).iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn consistent_data_gives_zero_coefficients() {
        let (adv, obs, q_f) = setup(3, 5, 0.5);
        let obs = obs.with_data(&obs.apply(&q_f)).unwrap();
        let sys = assemble_system(&adv, &CovarianceSpec::isotropic(0.7), &obs, &q_f).unwrap();
        assert!(sys.beta().iter().all(|&b| b == 0.0));
        assert_eq!(optimal_estimate(&sys).unwrap(), q_f);
        let pen = sys.penalties();
        assert_eq!((pen.data, pen.model, pen.total), (0.0, 0.0, 0.0));
    }

    #[test]
    fn estimate_fits_data_as_predicted() {
        let (adv, obs, q_f) = setup(4, 6, 0.8);
        let spec = CovarianceSpec::isotropic(2.0);
        let sys = assemble_system(&adv, &spec, &obs, &q_f).unwrap();
        assert!(sys.data.asymmetry() < 1e-10);
        let q_hat = optimal_estimate(&sys).unwrap();
        let at = obs.apply(&q_hat);
        for ((v, p), b) in at.iter().zip(&obs.points).zip(sys.beta().iter()) {
            let expect = p.d - p.sigma * p.sigma * b;
            assert!((v - expect).abs() <= 1e-10 * expect.abs().max(1.0), "{v} vs {expect}");
        }
        let pen = sys.penalties();
        assert!((pen.data + pen.model - pen.total).abs() <= 1e-10 * pen.total);
        let direct = data_penalty_direct(&q_hat, &obs);
        assert!((direct - pen.data).abs() <= 1e-6 * pen.data);
        let resid = model_penalty_residual(&adv, &spec, &q_hat, &q_f).unwrap();
        assert!(
            (resid - pen.model).abs() <= 1e-8 * pen.model,
            "{resid} vs {}",
            pen.model
        );
    }

    #[test]
    fn streaming_matches_stored() {
        let (adv, obs, q_f) = setup(5, 5, 1.0);
        let spec = CovarianceSpec::non_isotropic(0.4, 2.0, 3.0).with_ci(0.3);
        let stored = assemble_system(&adv, &spec, &obs, &q_f).unwrap();
        let streamed = assemble_system_with_budget(&adv, &spec, &obs, &q_f, 0).unwrap();
        assert!(matches!(streamed.fields, RepresenterFields::Streaming { .. }));
        let a = optimal_estimate(&stored).unwrap();
        let b = optimal_estimate(&streamed).unwrap();
        assert!(a
            .values()
            .iter()
            .zip(b.values())
            .all(|(x, y)| (x - y).abs() <= 1e-12 * x.abs().max(1.0)));
    }

    #[test]
    fn isotropic_basis_matches_direct_assembly() {
        let (adv, obs, q_f) = setup(6, 6, 1.0);
        let basis = IsotropicBasis::new(&adv, &obs, true).unwrap();
        for &(s, ci) in &[(0.1, 0.0), (1.0, 0.5), (10.0, 2.0)] {
            let spec = CovarianceSpec::isotropic(s).with_ci(ci);
            let a = assemble_system(&adv, &spec, &obs, &q_f).unwrap();
            let b = basis.system(&spec, &obs, &q_f).unwrap();
            let diff = (a.r() - b.r()).norm() / a.r().norm();
            assert!(diff < 1e-12, "{diff}");
            let qa = optimal_estimate(&a).unwrap();
            let qb = optimal_estimate(&b).unwrap();
            let e = qa
                .values()
                .iter()
                .zip(qb.values())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(e < 1e-9 * qa.norm(), "{e}");
        }
    }

    #[test]
    fn penalties_match_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = 6;
        let a = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
        let r = &a * a.transpose();
        let c = DVector::from_fn(m, |_, _| rng.random_range(0.1..2.0));
        let h = DVector::from_fn(m, |_, _| rng.random_range(-3.0..3.0));
        let ds = DataSpace::new(r.clone(), c.clone(), h.clone()).unwrap();
        let pinv = (&r + DMatrix::from_diagonal(&c)).try_inverse().unwrap();
        let ph = &pinv * &h;
        let data = ph.dot(&(DMatrix::from_diagonal(&c) * &ph));
        let model = ph.dot(&(&r * &ph));
        let total = h.dot(&ph);
        let pen = ds.penalties();
        assert!((pen.data - data).abs() <= 1e-12 * data);
        assert!((pen.model - model).abs() <= 1e-12 * model);
        assert!((pen.total - total).abs() <= 1e-12 * total);
        assert!((pen.data + pen.model - pen.total).abs() <= 1e-10 * pen.total);
    }

    #[test]
    fn degenerate_system_reported() {
        let m = 3;
        let r = DMatrix::zeros(m, m);
        let c = DVector::zeros(m);
        let h = DVector::from_element(m, 1.0);
        assert!(matches!(DataSpace::new(r, c, h), Err(Error::Degenerate(_))));
    }

    #[test]
    fn gcv_rejects_exact_datum() {
        let r = DMatrix::identity(2, 2);
        let c = DVector::from_vec(vec![1.0, 0.0]);
        let ds = DataSpace::new(r, c, DVector::from_vec(vec![1.0, 2.0])).unwrap();
        assert!(matches!(ds.gcv(), Err(Error::InterpolatingDatum { index: 1 })));
    }

    #[test]
    fn prior_limit() {
        let (adv, obs, q_f) = setup(8, 5, 1.0);
        for &s in &[1e-8, 1e-10] {
            let sys = assemble_system(&adv, &CovarianceSpec::isotropic(s), &obs, &q_f).unwrap();
            let mut d = optimal_estimate(&sys).unwrap();
            d.axpy(-1.0, &q_f);
            assert!(d.norm() < 1e-4 * q_f.norm());
        }
    }
}
