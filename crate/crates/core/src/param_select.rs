//! Choosing the model-error covariance hyperparameters: L-curve corner, GCV
//! minimization and the chi-squared moment condition, for the single variance
//! of the isotropic covariance and for the (variance, length, time scale)
//! triple of the separable kernel.

use std::path::Path;
use std::sync::{Arc, Mutex};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{CovarianceSpec, ModelError};
use crate::error::{Error, Result};
use crate::grid::SpaceTimeField;
use crate::observation::ObservationSet;
use crate::optimize::{self, SimplexOptions};
use crate::representer::{assemble_system_with_budget, DataSpace, IsotropicBasis};
use crate::transport::Advection;

pub const MAX_RUNS_1D: usize = 60;
pub const MAX_RUNS_MULTI: usize = 200;
pub const GOLDEN_TOL: f64 = 1e-3;
pub const CHI2_TOL: f64 = 1e-6;
pub const CHI2_MULTI_TOL: f64 = 1e-3;
const COARSE_POINTS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    LCurve,
    Gcv,
    Chi2,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::LCurve, Method::Gcv, Method::Chi2];

    pub fn name(self) -> &'static str {
        match self {
            Method::LCurve => "lcurve",
            Method::Gcv => "gcv",
            Method::Chi2 => "chi2",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lcurve" | "l-curve" | "l_curve" => Ok(Method::LCurve),
            "gcv" => Ok(Method::Gcv),
            "chi2" | "chi-squared" => Ok(Method::Chi2),
            other => Err(Error::param(format!("unknown selection method `{other}`"))),
        }
    }
}

/// Search box for the separable kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchBox {
    pub sigma_f2: (f64, f64),
    pub l_f: (f64, f64),
    pub tau_f: (f64, f64),
}

impl Default for SearchBox {
    fn default() -> Self {
        SearchBox {
            sigma_f2: (1e-6, 9.0),
            l_f: (1.0, 15.0),
            tau_f: (1.0, 20.0),
        }
    }
}

impl SearchBox {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.sigma_f2;
        if !(a > 0.0 && a.is_finite() && b.is_finite() && b >= a) {
            return Err(Error::param(format!(
                "variance bounds must satisfy 0 < lo <= hi, got [{a}, {b}]"
            )));
        }
        for (name, (a, b)) in [("l_f", self.l_f), ("tau_f", self.tau_f)] {
            if !(a > 0.0 && b.is_finite() && b >= a) {
                return Err(Error::param(format!(
                    "{name} bounds must satisfy 0 < lo <= hi, got [{a}, {b}]"
                )));
            }
        }
        Ok(())
    }

    /// Optimizer coordinates `(ln sigma_f2, l_f, tau_f)`.
    fn lower(&self) -> [f64; 3] {
        [self.sigma_f2.0.ln(), self.l_f.0, self.tau_f.0]
    }

    fn upper(&self) -> [f64; 3] {
        [self.sigma_f2.1.ln(), self.l_f.1, self.tau_f.1]
    }

    pub fn contains(&self, p: &Params) -> bool {
        let inside = |v: f64, (a, b): (f64, f64)| v >= a * (1.0 - 1e-12) && v <= b * (1.0 + 1e-12);
        inside(p.sigma_f2, self.sigma_f2)
            && p.l_f.is_none_or(|l| inside(l, self.l_f))
            && p.tau_f.is_none_or(|t| inside(t, self.tau_f))
    }
}

/// Geometric grid of `n` points on `[lo, hi]`.
pub fn geometric_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1).max(1) as f64).exp())
        .collect()
}

/// Selected hyperparameters; `l_f`/`tau_f` only for the separable kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub sigma_f2: f64,
    pub l_f: Option<f64>,
    pub tau_f: Option<f64>,
}

impl Params {
    pub fn of(spec: &CovarianceSpec) -> Self {
        match spec.model {
            ModelError::Isotropic { sigma_f2 } => Params {
                sigma_f2,
                l_f: None,
                tau_f: None,
            },
            ModelError::NonIsotropic { sigma_f2, l_f, tau_f } => Params {
                sigma_f2,
                l_f: Some(l_f),
                tau_f: Some(tau_f),
            },
        }
    }
}

/// One assimilation run made during a search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sample {
    pub sigma_f2: f64,
    pub l_f: Option<f64>,
    pub tau_f: Option<f64>,
    pub j_data: f64,
    pub j_model: f64,
    pub j_total: f64,
    /// Criterion value: GCV, the chi-squared residual or the curvature.
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    pub samples: Vec<Sample>,
    /// L-curve only: point of maximum curvature and sharpest-turn point.
    pub max_curvature: Option<f64>,
    pub corner_angle: Option<f64>,
    /// Multi-parameter only: final simplex spread in `(ln sigma_f2, l_f, tau_f)`.
    pub simplex_spread: Option<Vec<f64>>,
    /// Chi-squared only: `J_hat - M` at the returned parameters.
    pub chi2_residual: Option<f64>,
    /// Data left out of the GCV sum by the noise floor.
    pub excluded_data: usize,
    pub failed_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionResult {
    pub method: Method,
    pub params: Params,
    pub spec: CovarianceSpec,
    pub diagnostics: Diagnostics,
    pub flags: Vec<String>,
    pub runs: usize,
    pub iterations: usize,
}

impl SelectionResult {
    pub fn flagged(&self, flag: &str) -> bool {
        self.flags.iter().any(|f| f == flag)
    }

    /// Sampled curve as CSV, one row per assimilation run.
    pub fn write_curve_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["sigma_f2", "l_f", "tau_f", "j_data", "j_model", "j_total", "value"])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for s in &self.diagnostics.samples {
            w.write_record([
                format!("{:e}", s.sigma_f2),
                opt(s.l_f),
                opt(s.tau_f),
                format!("{:e}", s.j_data),
                format!("{:e}", s.j_model),
                format!("{:e}", s.j_total),
                format!("{:e}", s.value),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

enum Engine {
    Basis(Arc<IsotropicBasis>),
    Assemble(Advection, SpaceTimeField),
}

/// One data column together with the machinery to run assimilations on it.
pub struct SelectionProblem {
    engine: Engine,
    base: CovarianceSpec,
    obs: ObservationSet,
    c_eps: DVector<f64>,
    h: DVector<f64>,
    gcv_floor: f64,
}

impl SelectionProblem {
    /// Isotropic `base` builds an [`IsotropicBasis`]; the separable kernel
    /// re-assembles representers for every run.
    pub fn new(adv: &Advection, obs: &ObservationSet, q_f: &SpaceTimeField, base: CovarianceSpec) -> Result<Self> {
        let engine = if base.is_isotropic() {
            Engine::Basis(Arc::new(IsotropicBasis::new(adv, obs, base.ci_variance > 0.0)?))
        } else {
            Engine::Assemble(*adv, q_f.clone())
        };
        Self::build(engine, obs, q_f, base)
    }

    /// Reuses a basis built for the same data locations.
    pub fn with_basis(
        basis: Arc<IsotropicBasis>,
        obs: &ObservationSet,
        q_f: &SpaceTimeField,
        base: CovarianceSpec,
    ) -> Result<Self> {
        if !base.is_isotropic() {
            return Err(Error::param("a shared basis needs an isotropic base covariance"));
        }
        if basis.locations() != obs.locations() {
            return Err(Error::param("observation locations differ from the basis"));
        }
        Self::build(Engine::Basis(basis), obs, q_f, base)
    }

    fn build(engine: Engine, obs: &ObservationSet, q_f: &SpaceTimeField, base: CovarianceSpec) -> Result<Self> {
        base.validate()?;
        if obs.is_empty() {
            return Err(Error::param("selection needs at least one datum"));
        }
        let hq = obs.apply(q_f);
        let h = DVector::from_iterator(obs.len(), obs.points.iter().zip(hq).map(|(p, v)| p.d - v));
        Ok(SelectionProblem {
            engine,
            base,
            obs: obs.clone(),
            c_eps: DVector::from_vec(obs.noise_variances()),
            h,
            gcv_floor: 0.0,
        })
    }

    /// Data whose noise std is at most `floor` times the largest one are left
    /// out of the GCV sum (they still enter the assimilation).
    pub fn with_gcv_floor(mut self, floor: f64) -> Self {
        self.gcv_floor = floor.max(0.0);
        self
    }

    pub fn n_obs(&self) -> usize {
        self.h.len()
    }

    pub fn base(&self) -> &CovarianceSpec {
        &self.base
    }

    pub fn misfit(&self) -> &DVector<f64> {
        &self.h
    }

    pub fn observations(&self) -> &ObservationSet {
        &self.obs
    }

    /// One assimilation in data space.
    pub fn data_space(&self, spec: &CovarianceSpec) -> Result<DataSpace> {
        match &self.engine {
            Engine::Basis(b) => b.data_space_from_misfit(spec, self.c_eps.clone(), self.h.clone()),
            Engine::Assemble(adv, q_f) => {
                spec.validate()?;
                Ok(assemble_system_with_budget(adv, spec, &self.obs, q_f, 0)?.data)
            }
        }
    }

    fn included(&self) -> Vec<bool> {
        if self.gcv_floor == 0.0 {
            return vec![true; self.c_eps.len()];
        }
        let cut = self.gcv_floor * self.c_eps.iter().cloned().fold(0.0, f64::max).sqrt();
        self.c_eps.iter().map(|s2| s2.sqrt() > cut).collect()
    }

    pub fn excluded_from_gcv(&self) -> usize {
        self.included().iter().filter(|b| !**b).count()
    }

    fn spec_at(&self, x: &[f64]) -> CovarianceSpec {
        let s2 = x[0].exp();
        match (self.base.model, x.len()) {
            (ModelError::NonIsotropic { .. }, 3) => {
                CovarianceSpec::non_isotropic(s2, x[1], x[2]).with_ci(self.base.ci_variance)
            }
            _ => self.base.with_sigma_f2(s2),
        }
    }
}

fn gcv_from(ds: &DataSpace, include: &[bool]) -> Result<f64> {
    let pinv = ds.p_inverse();
    let mut acc = 0.0;
    let mut n = 0usize;
    for k in 0..ds.len() {
        if !include[k] {
            continue;
        }
        let s2 = ds.c_eps()[k];
        if s2 == 0.0 {
            return Err(Error::InterpolatingDatum { index: k });
        }
        let loo = ds.beta()[k] / pinv[(k, k)];
        acc += loo * loo / s2;
        n += 1;
    }
    if n == 0 {
        return Err(Error::param("every datum is below the GCV noise floor"));
    }
    Ok(acc / n as f64)
}

fn sample(spec: &CovarianceSpec, ds: &DataSpace, value: f64) -> Sample {
    let p = ds.penalties();
    let q = Params::of(spec);
    Sample {
        sigma_f2: q.sigma_f2,
        l_f: q.l_f,
        tau_f: q.tau_f,
        j_data: p.data,
        j_model: p.model,
        j_total: p.total,
        value,
    }
}

/// GCV for one hyperparameter setting, from a single assembled system.
pub fn gcv_eval(problem: &SelectionProblem, spec: &CovarianceSpec) -> Result<f64> {
    gcv_from(&problem.data_space(spec)?, &problem.included())
}

/// `J_hat = h^T P^-1 h` for one setting.
pub fn chi2_eval(problem: &SelectionProblem, spec: &CovarianceSpec) -> Result<f64> {
    Ok(problem.data_space(spec)?.penalties().total)
}

/// Curvature of the planar curve `(x(s), y(s))` by three-point finite
/// differences on a possibly nonuniform parameter grid. Ends are NaN.
pub fn curvature(x: &[f64], y: &[f64], s: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut k = vec![f64::NAN; n];
    for i in 1..n.saturating_sub(1) {
        let (h1, h2) = (s[i] - s[i - 1], s[i + 1] - s[i]);
        let d1 = |f: &[f64]| {
            -h2 / (h1 * (h1 + h2)) * f[i - 1] + (h2 - h1) / (h1 * h2) * f[i] + h1 / (h2 * (h1 + h2)) * f[i + 1]
        };
        let d2 = |f: &[f64]| 2.0 * (f[i - 1] / (h1 * (h1 + h2)) - f[i] / (h1 * h2) + f[i + 1] / (h2 * (h1 + h2)));
        let (xp, yp, xpp, ypp) = (d1(x), d1(y), d2(x), d2(y));
        let speed = (xp * xp + yp * yp).powf(1.5);
        k[i] = if speed > 0.0 {
            (xp * ypp - yp * xpp) / speed
        } else {
            0.0
        };
    }
    k
}

/// Index of the corner: the largest interior local maximum of curvature,
/// falling back to the global maximum. The flag reports the fallback.
pub fn corner_index(k: &[f64]) -> Option<(usize, bool)> {
    let n = k.len();
    let mut best: Option<usize> = None;
    for i in 2..n.saturating_sub(2) {
        if k[i].is_finite() && k[i - 1] < k[i] && k[i] >= k[i + 1] && best.is_none_or(|b| k[i] > k[b]) {
            best = Some(i);
        }
    }
    if let Some(i) = best {
        return Some((i, false));
    }
    (0..n)
        .filter(|&i| k[i].is_finite())
        .max_by(|&a, &b| k[a].total_cmp(&k[b]))
        .map(|i| (i, true))
}

/// Interior point with the sharpest angle between the chords to the two ends.
pub fn corner_angle_index(x: &[f64], y: &[f64]) -> Option<usize> {
    let n = x.len();
    if n < 3 {
        return None;
    }
    let angle = |i: usize| {
        let (ax, ay) = (x[0] - x[i], y[0] - y[i]);
        let (bx, by) = (x[n - 1] - x[i], y[n - 1] - y[i]);
        let c = (ax * bx + ay * by) / ((ax * ax + ay * ay).sqrt() * (bx * bx + by * by).sqrt());
        c.clamp(-1.0, 1.0).acos()
    };
    (1..n - 1)
        .filter(|&i| angle(i).is_finite())
        .min_by(|&a, &b| angle(a).total_cmp(&angle(b)))
}

/// L-curve over a geometric grid of variances (other hyperparameters from the
/// base covariance). The curve is `(ln J_data, ln(sigma_f2 J_model))`.
pub fn lcurve_select(problem: &SelectionProblem, sigma_grid: &[f64]) -> Result<SelectionResult> {
    if sigma_grid.len() < 5 {
        return Err(Error::param("the L-curve needs at least 5 grid points"));
    }
    if sigma_grid.windows(2).any(|w| !(w[1] > w[0])) || !(sigma_grid[0] > 0.0) {
        return Err(Error::param("L-curve grid must be positive and strictly increasing"));
    }
    let samples: Vec<Sample> = sigma_grid
        .par_iter()
        .map(|&s2| {
            let spec = problem.base.with_sigma_f2(s2);
            let ds = problem.data_space(&spec)?;
            Ok(sample(&spec, &ds, f64::NAN))
        })
        .collect::<Result<_>>()?;
    let mut x = Vec::with_capacity(samples.len());
    let mut y = Vec::with_capacity(samples.len());
    for s in &samples {
        let (a, b) = (s.j_data.ln(), (s.sigma_f2 * s.j_model).ln());
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFinitePenalty { sigma_f2: s.sigma_f2 });
        }
        x.push(a);
        y.push(b);
    }
    let s: Vec<f64> = sigma_grid.iter().map(|v| v.ln()).collect();
    let k = curvature(&x, &y, &s);
    let (i, fallback) = corner_index(&k).ok_or_else(|| Error::Degenerate("flat L-curve".into()))?;
    let global = (0..k.len())
        .filter(|&j| k[j].is_finite())
        .max_by(|&a, &b| k[a].total_cmp(&k[b]));
    let mut flags = Vec::new();
    if fallback {
        flags.push("no_interior_curvature_maximum".to_string());
    }
    if i <= 1 || i + 2 >= sigma_grid.len() {
        flags.push("at_grid_edge".to_string());
    }
    let samples: Vec<Sample> = samples
        .into_iter()
        .zip(&k)
        .map(|(s, &kv)| Sample { value: kv, ..s })
        .collect();
    let spec = problem.base.with_sigma_f2(sigma_grid[i]);
    Ok(SelectionResult {
        method: Method::LCurve,
        params: Params::of(&spec),
        spec,
        diagnostics: Diagnostics {
            max_curvature: global.map(|g| sigma_grid[g]),
            corner_angle: corner_angle_index(&x, &y).map(|j| sigma_grid[j]),
            samples,
            excluded_data: 0,
            ..Default::default()
        },
        flags,
        runs: sigma_grid.len(),
        iterations: 1,
    })
}

struct Recorder<'a> {
    problem: &'a SelectionProblem,
    log: Mutex<Vec<Sample>>,
    failures: Mutex<usize>,
}

impl<'a> Recorder<'a> {
    fn new(problem: &'a SelectionProblem) -> Self {
        Recorder {
            problem,
            log: Mutex::new(Vec::new()),
            failures: Mutex::new(0),
        }
    }

    fn run(&self, spec: &CovarianceSpec, crit: impl Fn(&DataSpace) -> Result<f64>) -> f64 {
        let out = self.problem.data_space(spec).and_then(|ds| crit(&ds).map(|v| (v, ds)));
        match out {
            Ok((v, ds)) => {
                self.log.lock().expect("log lock").push(sample(spec, &ds, v));
                v
            }
            Err(_) => {
                *self.failures.lock().expect("failure lock") += 1;
                f64::INFINITY
            }
        }
    }

    fn finish(self, sort: bool) -> (Vec<Sample>, usize) {
        let mut log = self.log.into_inner().expect("log lock");
        if sort {
            log.sort_by(|a, b| {
                a.sigma_f2
                    .total_cmp(&b.sigma_f2)
                    .then(a.l_f.unwrap_or(0.0).total_cmp(&b.l_f.unwrap_or(0.0)))
                    .then(a.tau_f.unwrap_or(0.0).total_cmp(&b.tau_f.unwrap_or(0.0)))
            });
        }
        (log, self.failures.into_inner().expect("failure lock"))
    }
}

fn check_bounds(lo: f64, hi: f64) -> Result<()> {
    if !(lo > 0.0 && hi.is_finite() && hi >= lo) {
        return Err(Error::param(format!(
            "variance bounds must be positive and finite, got [{lo}, {hi}]"
        )));
    }
    Ok(())
}

/// Back from `ln sigma_f2`, returning the bounds exactly at the ends.
fn from_log(x: f64, a: f64, b: f64, bounds: (f64, f64)) -> f64 {
    if x <= a {
        bounds.0
    } else if x >= b {
        bounds.1
    } else {
        x.exp().clamp(bounds.0, bounds.1)
    }
}

fn bound_flags(x: f64, lo: f64, hi: f64, tol: f64, flags: &mut Vec<String>) {
    if (x - lo).abs() <= tol {
        flags.push("at_lower_bound".into());
    }
    if (hi - x).abs() <= tol {
        flags.push("at_upper_bound".into());
    }
}

/// Golden-section minimization of GCV over `ln sigma_f2`.
pub fn gcv_select_1d(problem: &SelectionProblem, bounds: (f64, f64)) -> Result<SelectionResult> {
    check_bounds(bounds.0, bounds.1)?;
    let include = problem.included();
    let rec = Recorder::new(problem);
    let (a, b) = (bounds.0.ln(), bounds.1.ln());
    let r = optimize::golden_section(
        |x| rec.run(&problem.base.with_sigma_f2(x.exp()), |ds| gcv_from(ds, &include)),
        a,
        b,
        GOLDEN_TOL,
        MAX_RUNS_1D,
        COARSE_POINTS,
    );
    let (samples, failed) = rec.finish(false);
    if !r.f.is_finite() {
        return Err(Error::Degenerate(
            "GCV was not finite anywhere in the search interval".into(),
        ));
    }
    let mut flags = Vec::new();
    if !r.bracketed {
        flags.push("bracket_fallback".into());
    }
    if r.hit_cap {
        flags.push("run_cap".into());
    }
    bound_flags(r.x, a, b, GOLDEN_TOL, &mut flags);
    let spec = problem.base.with_sigma_f2(from_log(r.x, a, b, bounds));
    Ok(SelectionResult {
        method: Method::Gcv,
        params: Params::of(&spec),
        spec,
        diagnostics: Diagnostics {
            samples,
            excluded_data: problem.excluded_from_gcv(),
            failed_runs: failed,
            ..Default::default()
        },
        flags,
        runs: r.evals,
        iterations: r.evals,
    })
}

/// Bisection on `ln sigma_f2` for `J_hat = M`.
pub fn chi2_select_1d(problem: &SelectionProblem, bounds: (f64, f64)) -> Result<SelectionResult> {
    check_bounds(bounds.0, bounds.1)?;
    let m = problem.n_obs() as f64;
    let rec = Recorder::new(problem);
    let (a, b) = (bounds.0.ln(), bounds.1.ln());
    let r = optimize::bisect_decreasing(
        |x| {
            let j = rec.run(&problem.base.with_sigma_f2(x.exp()), |ds| Ok(ds.penalties().total - m));
            j + m
        },
        m,
        a,
        b,
        CHI2_TOL * m,
        MAX_RUNS_1D,
    );
    let (samples, failed) = rec.finish(false);
    if !r.value.is_finite() {
        return Err(Error::Degenerate(
            "chi-squared functional was not finite at the search bounds".into(),
        ));
    }
    let mut flags = Vec::new();
    if !r.bracketed {
        flags.push(
            if r.x == a {
                "no_bracket_below_m"
            } else {
                "no_bracket_above_m"
            }
            .into(),
        );
    } else if !r.converged {
        flags.push("not_converged".into());
    }
    let spec = problem.base.with_sigma_f2(from_log(r.x, a, b, bounds));
    Ok(SelectionResult {
        method: Method::Chi2,
        params: Params::of(&spec),
        spec,
        diagnostics: Diagnostics {
            samples,
            chi2_residual: Some(r.value - m),
            failed_runs: failed,
            ..Default::default()
        },
        flags,
        runs: r.evals,
        iterations: r.evals.saturating_sub(2),
    })
}

fn multi(
    problem: &SelectionProblem,
    bx: &SearchBox,
    method: Method,
    objective: &(dyn Fn(&DataSpace) -> Result<f64> + Sync),
    opts: SimplexOptions,
) -> Result<(SelectionResult, f64)> {
    bx.validate()?;
    if problem.base.is_isotropic() {
        return Err(Error::param(
            "multi-parameter selection needs a non-isotropic base covariance",
        ));
    }
    let rec = Recorder::new(problem);
    let f = |x: &[f64]| rec.run(&problem.spec_at(x), objective);
    let (lo, hi) = (bx.lower(), bx.upper());
    let ms = optimize::multi_start(&f, &optimize::inset_starts(&lo, &hi), &lo, &hi, opts);
    let (samples, failed) = rec.finish(true);
    if !ms.best.f.is_finite() {
        return Err(Error::Degenerate(
            "criterion was not finite at any sampled point".into(),
        ));
    }
    let mut flags = Vec::new();
    if ms.stalled {
        flags.push("no_start_improved".into());
    }
    if !ms.best.converged {
        flags.push("not_converged".into());
    }
    for (i, name) in ["sigma_f2", "l_f", "tau_f"].iter().enumerate() {
        let tol = 1e-6 * (hi[i] - lo[i]).max(1.0);
        if hi[i] > lo[i] && ((ms.best.x[i] - lo[i]).abs() <= tol || (hi[i] - ms.best.x[i]).abs() <= tol) {
            flags.push(format!("{name}_at_bound"));
        }
    }
    let spec = problem.spec_at(&ms.best.x);
    let res = SelectionResult {
        method,
        params: Params::of(&spec),
        spec,
        diagnostics: Diagnostics {
            samples,
            simplex_spread: Some(ms.best.spread.clone()),
            excluded_data: if method == Method::Gcv {
                problem.excluded_from_gcv()
            } else {
                0
            },
            failed_runs: failed,
            ..Default::default()
        },
        flags,
        runs: ms.evals,
        iterations: ms.evals,
    };
    Ok((res, ms.best.f))
}

/// Multi-start simplex minimization of GCV over `(ln sigma_f2, l_f, tau_f)`.
pub fn gcv_select_multi(problem: &SelectionProblem, bx: &SearchBox) -> Result<SelectionResult> {
    let include = problem.included();
    let obj = move |ds: &DataSpace| gcv_from(ds, &include);
    multi(
        problem,
        bx,
        Method::Gcv,
        &obj,
        SimplexOptions {
            max_evals: MAX_RUNS_MULTI,
            ..Default::default()
        },
    )
    .map(|r| r.0)
}

/// Minimizes `((J_hat - M) / M)^2` over the box. The condition is one equation
/// in three unknowns, so the answer is a point on a solution set; the final
/// simplex spread is reported.
pub fn chi2_select_multi(problem: &SelectionProblem, bx: &SearchBox) -> Result<SelectionResult> {
    let m = problem.n_obs() as f64;
    let obj = move |ds: &DataSpace| Ok(((ds.penalties().total - m) / m).powi(2));
    let opts = SimplexOptions {
        max_evals: MAX_RUNS_MULTI,
        ftol: 1e-3,
        atol: 1e-12,
        ..Default::default()
    };
    let (mut res, f) = multi(problem, bx, Method::Chi2, &obj, opts)?;
    let resid = res
        .diagnostics
        .samples
        .iter()
        .find(|s| {
            Params {
                sigma_f2: s.sigma_f2,
                l_f: s.l_f,
                tau_f: s.tau_f,
            } == res.params
        })
        .map(|s| s.j_total - m)
        .unwrap_or(f.sqrt() * m);
    res.diagnostics.chi2_residual = Some(resid);
    if resid.abs() > CHI2_MULTI_TOL * m {
        res.flags.push("residual_above_threshold".into());
    }
    Ok(res)
}

/// Dispatch for the single-variance searches.
pub fn select_1d(
    problem: &SelectionProblem,
    method: Method,
    bounds: (f64, f64),
    lcurve_points: usize,
) -> Result<SelectionResult> {
    match method {
        Method::LCurve => lcurve_select(problem, &geometric_grid(bounds.0, bounds.1, lcurve_points)),
        Method::Gcv => gcv_select_1d(problem, bounds),
        Method::Chi2 => chi2_select_1d(problem, bounds),
    }
}

/// Dispatch for the separable-kernel searches; the L-curve has no
/// multi-parameter form.
pub fn select_multi(problem: &SelectionProblem, method: Method, bx: &SearchBox) -> Result<SelectionResult> {
    match method {
        Method::LCurve => Err(Error::param("the L-curve is only defined for a single variance")),
        Method::Gcv => gcv_select_multi(problem, bx),
        Method::Chi2 => chi2_select_multi(problem, bx),
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

    fn setup(m: usize, seed: u64) -> (Advection, ObservationSet, SpaceTimeField) {
        let g = Grid::new(30.0, 45.0, 0.0, 20.0, 12, 20).unwrap();
        let adv = Advection::new(g, 1.0, BoundaryKind::Periodic).unwrap();
        let src = SourceParams {
            s0: 100.0,
            k0: 0.5,
            alpha0: 10.0,
            x0: 33.0,
            ..SourceParams::ZERO
        };
        let truth = adv.solve_forward(Some(&src), None, &vec![0.0; g.nx]).unwrap();
        let fg = SourceParams { k0: 0.8, ..src };
        let q_f = adv.solve_forward(Some(&fg), None, &vec![0.0; g.nx]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<(f64, f64)> = (0..m)
            .map(|_| (rng.random_range(30.0..45.0), rng.random_range(2.0..20.0)))
            .collect();
        let at = crate::observation::interpolate(&truth, &pts).unwrap();
        let points = pts
            .iter()
            .zip(at)
            .map(|(&(x, t), v)| ObsPoint {
                x,
                t,
                d: v + 0.3 * rng.random_range(-1.0..1.0),
                sigma: 0.3,
            })
            .collect();
        (adv, ObservationSet::new(&g, points, seed).unwrap(), q_f)
    }

    #[test]
    fn collinear_points_have_zero_curvature() {
        let k = curvature(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0], &[0.0, 0.5, 1.5]);
        assert!(k[1].abs() < 1e-12);
    }

    #[test]
    fn circle_curvature() {
        let s: Vec<f64> = (0..50).map(|i| i as f64 * 0.02).collect();
        let x: Vec<f64> = s.iter().map(|t| 2.0 * t.cos()).collect();
        let y: Vec<f64> = s.iter().map(|t| 2.0 * t.sin()).collect();
        let k = curvature(&x, &y, &s);
        assert!((k[20] - 0.5).abs() < 1e-3);
    }

    #[test]
    fn corner_prefers_interior_maximum() {
        let k = [f64::NAN, 0.1, 0.5, 0.2, 0.3, 0.9, f64::NAN];
        assert_eq!(corner_index(&k), Some((2, false)));
        let k = [f64::NAN, 0.1, 0.2, 0.3, 0.4, 0.5, f64::NAN];
        assert_eq!(corner_index(&k), Some((5, true)));
    }

    #[test]
    fn prior_only_gcv() {
        let (adv, obs, q_f) = setup(5, 3);
        let p = SelectionProblem::new(&adv, &obs, &q_f, CovarianceSpec::isotropic(0.0)).unwrap();
        let g = gcv_eval(&p, &CovarianceSpec::isotropic(0.0)).unwrap();
        let want: f64 = p
            .misfit()
            .iter()
            .zip(obs.noise_variances())
            .map(|(h, s2)| h * h / s2)
            .sum::<f64>()
            / 5.0;
        assert!((g - want).abs() <= 1e-12 * want);
    }

    #[test]
    fn gcv_matches_grid_scan() {
        let (adv, obs, q_f) = setup(8, 5);
        let p = SelectionProblem::new(&adv, &obs, &q_f, CovarianceSpec::isotropic(1.0)).unwrap();
        let r = gcv_select_1d(&p, (1e-4, 1e2)).unwrap();
        let grid = geometric_grid(1e-4, 1e2, 400);
        let vals: Vec<f64> = grid
            .iter()
            .map(|&s| gcv_eval(&p, &CovarianceSpec::isotropic(s)).unwrap())
            .collect();
        let i = (0..grid.len()).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
        let step = (1e6f64).ln() / 399.0;
        assert!(
            (r.params.sigma_f2.ln() - grid[i].ln()).abs() <= step + 1e-3,
            "{:?} vs {}",
            r.params,
            grid[i]
        );
        assert!(r.runs <= MAX_RUNS_1D);
        assert_eq!(r.runs, r.diagnostics.samples.len());
    }

    #[test]
    fn chi2_converges_or_flags() {
        let (adv, obs, q_f) = setup(8, 7);
        let p = SelectionProblem::new(&adv, &obs, &q_f, CovarianceSpec::isotropic(1.0)).unwrap();
        let r = chi2_select_1d(&p, (1e-6, 1e3)).unwrap();
        let res = r.diagnostics.chi2_residual.unwrap();
        if r.flags.is_empty() {
            assert!(res.abs() <= 1e-6 * 8.0);
        } else {
            assert!(r.flags[0].starts_with("no_bracket"));
        }
    }

    #[test]
    fn chi2_zero_misfit_is_flagged() {
        let (adv, obs, q_f) = setup(5, 9);
        let exact = obs.with_data(&obs.apply(&q_f)).unwrap();
        let p = SelectionProblem::new(&adv, &exact, &q_f, CovarianceSpec::isotropic(1.0)).unwrap();
        let r = chi2_select_1d(&p, (1e-4, 1e2)).unwrap();
        assert!(r.flagged("no_bracket_below_m"));
        assert_eq!(r.params.sigma_f2, 1e-4);
    }

    #[test]
    fn lcurve_shift_invariance() {
        let s: Vec<f64> = (0..30).map(|i| i as f64 * 0.3).collect();
        let x: Vec<f64> = s.iter().map(|t| (-t).exp() + 0.01 * t).collect();
        let y: Vec<f64> = s.iter().map(|t| t.exp() * 1e-3 + 0.05 * t).collect();
        let k1 = curvature(&x, &y, &s);
        let xs: Vec<f64> = x.iter().map(|v| v + 3.7).collect();
        let ys: Vec<f64> = y.iter().map(|v| v - 1.2).collect();
        let k2 = curvature(&xs, &ys, &s);
        assert_eq!(corner_index(&k1), corner_index(&k2));
    }

    #[test]
    fn lcurve_rejects_short_grid() {
        let (adv, obs, q_f) = setup(4, 1);
        let p = SelectionProblem::new(&adv, &obs, &q_f, CovarianceSpec::isotropic(1.0)).unwrap();
        assert!(lcurve_select(&p, &[1.0, 2.0, 3.0, 4.0]).is_err());
        assert!(lcurve_select(&p, &[1.0, 2.0, 2.0, 4.0, 5.0]).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
    }
}
