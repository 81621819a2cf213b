//! Twin experiments: a truth run, perturbed first guesses, band-filtered
//! synthetic data, hyperparameter selection over every data column, and the
//! RMSE summaries.

use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::covariance::CovarianceSpec;
use crate::error::{Error, Result};
use crate::grid::{Grid, SpaceTimeField};
use crate::observation::{calibrate_and_filter, rmse, sample_locations, DataMatrix, ObservationSet};
use crate::param_select::{self, Method, Params, SearchBox, SelectionProblem, SelectionResult};
use crate::representer::{assemble_system, optimal_estimate, IsotropicBasis};
use crate::rng;
use crate::transport::{Advection, BoundaryKind, SourceParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    Isotropic,
    NonIsotropic,
}

impl std::str::FromStr for CovarianceKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "isotropic" => Ok(CovarianceKind::Isotropic),
            "non_isotropic" | "non-isotropic" => Ok(CovarianceKind::NonIsotropic),
            other => Err(Error::param(format!("unknown covariance kind `{other}`"))),
        }
    }
}

/// How columns get their first guess. `shared` gives every column the first
/// draw, `median` the draw with the median full-grid RMSE among a fixed
/// number of candidates, `per_member` each column its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstGuessMode {
    Shared,
    Median,
    PerMember,
}

/// Standard deviations of the first-guess decay-rate perturbations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    pub k0: f64,
    pub k1: f64,
    pub alpha0: f64,
    pub alpha1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: u8,
    pub covariance: CovarianceKind,
    pub bc: BoundaryKind,
    pub wind: f64,
    pub x_range: (f64, f64),
    pub t_range: (f64, f64),
    pub nx: usize,
    pub nt: usize,
    /// True emission source.
    pub source: SourceParams,
    /// Noise std as a fraction of the true value at each datum.
    pub noise_level: f64,
    pub perturbation: Perturbation,
    pub n_obs: usize,
    pub n_columns: usize,
    /// Draws used to calibrate the RMSE acceptance band.
    pub n_mc: usize,
    /// GCV and chi-squared estimates outside this band are dropped.
    pub outlier_band: (f64, f64),
    pub first_guess: FirstGuessMode,
    /// Draws the median first guess is picked from.
    pub first_guess_candidates: usize,
    /// Relative noise-std floor below which data leave the GCV sum.
    pub gcv_floor: f64,
    /// Variance bounds of the single-parameter searches and the L-curve grid.
    pub sigma_bounds: (f64, f64),
    pub lcurve_points: usize,
    pub search_box: SearchBox,
    pub seed: u64,
    /// Dotted keys that differ from the preset; filled in on load.
    #[serde(default)]
    pub overrides: Vec<String>,
}

pub const MASTER_SEED: u64 = 20_250_101;

impl ExperimentConfig {
    /// Defaults for experiments 1 to 4.
    pub fn preset(id: u8, covariance: CovarianceKind) -> Result<Self> {
        // (bc, S1, k1, alpha1, noise, sd k0, sd k1, sd alpha0, sd alpha1, band)
        let row = match id {
            1 => (
                BoundaryKind::Periodic,
                0.0,
                0.0,
                0.0,
                0.7,
                0.2,
                0.0,
                0.2,
                0.0,
                (0.35, 0.7),
            ),
            2 => (
                BoundaryKind::NoFlux,
                50.0,
                0.25,
                5.0,
                0.6,
                0.2,
                0.2,
                0.2,
                0.2,
                (0.003, 0.7),
            ),
            3 => (
                BoundaryKind::Periodic,
                0.0,
                0.0,
                0.0,
                0.3,
                0.5,
                0.0,
                0.7,
                0.0,
                (0.8, 10.0),
            ),
            4 => (
                BoundaryKind::NoFlux,
                50.0,
                0.25,
                5.0,
                0.2,
                0.6,
                0.5,
                0.5,
                0.5,
                (0.5, 6.0),
            ),
            _ => return Err(Error::param(format!("experiment id must be 1..4, got {id}"))),
        };
        let (bc, s1, k1, alpha1, noise, sk0, sk1, sa0, sa1, band) = row;
        let (nx, nt, n_obs, n_columns) = match covariance {
            CovarianceKind::Isotropic => (200, 445, 49, 500),
            CovarianceKind::NonIsotropic => (51, 113, 30, 1),
        };
        Ok(ExperimentConfig {
            id,
            covariance,
            bc,
            wind: 1.0,
            x_range: (30.0, 45.0),
            t_range: (0.0, 20.0),
            nx,
            nt,
            source: SourceParams {
                s0: 100.0,
                k0: 0.5,
                alpha0: 10.0,
                x0: 33.0,
                s1,
                k1,
                alpha1,
                x1: 40.0,
            },
            noise_level: noise,
            perturbation: Perturbation {
                k0: sk0,
                k1: sk1,
                alpha0: sa0,
                alpha1: sa1,
            },
            n_obs,
            n_columns,
            n_mc: 100_000,
            outlier_band: band,
            first_guess: FirstGuessMode::Median,
            first_guess_candidates: 101,
            gcv_floor: 1e-3,
            sigma_bounds: (1e-6, 1e2),
            lcurve_points: 100,
            search_box: SearchBox::default(),
            seed: MASTER_SEED + id as u64,
            overrides: Vec::new(),
        })
    }

    /// Overlays a (possibly partial) JSON object on the preset named by its
    /// `id` and `covariance` keys, recording every changed key.
    pub fn from_value(v: &Value) -> Result<Self> {
        let obj = v.as_object().ok_or_else(|| Error::Config {
            key: ".".into(),
            message: "config must be a JSON object".into(),
        })?;
        let id = match obj.get("id") {
            None => 1,
            Some(x) => x
                .as_u64()
                .filter(|i| (1..=4).contains(i))
                .ok_or_else(|| Error::Config {
                    key: "id".into(),
                    message: format!("expected an experiment id 1..4, got {x}"),
                })? as u8,
        };
        let kind = match obj.get("covariance") {
            None => CovarianceKind::Isotropic,
            Some(x) => serde_json::from_value(x.clone()).map_err(|e| Error::Config {
                key: "covariance".into(),
                message: e.to_string(),
            })?,
        };
        let preset = serde_json::to_value(Self::preset(id, kind)?)?;
        let mut merged = preset.clone();
        merge(&mut merged, v);
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(&merged).map_err(|e| Error::Config {
            key: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        let mut changed = Vec::new();
        diff("", &preset, &merged, &mut changed);
        changed.retain(|k| k != "overrides");
        cfg.overrides = changed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(s)?;
        Self::from_value(&v)
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(
            self.x_range.0,
            self.x_range.1,
            self.t_range.0,
            self.t_range.1,
            self.nx,
            self.nt,
        )
    }

    pub fn advection(&self) -> Result<Advection> {
        Advection::new(self.grid()?, self.wind, self.bc)
    }

    /// Base covariance for the searches; the initial state is exact.
    pub fn base_covariance(&self) -> CovarianceSpec {
        match self.covariance {
            CovarianceKind::Isotropic => CovarianceSpec::isotropic(1.0),
            CovarianceKind::NonIsotropic => CovarianceSpec::non_isotropic(1.0, 3.0, 5.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(Error::Config {
                key: key.into(),
                message,
            })
        };
        if !(1..=4).contains(&self.id) {
            return bad("id", format!("must be 1..4, got {}", self.id));
        }
        if self.n_obs == 0 {
            return bad("n_obs", "must be at least 1".into());
        }
        if self.n_columns == 0 || self.n_mc < self.n_columns {
            return bad(
                "n_mc",
                format!("need n_mc >= n_columns >= 1, got {} and {}", self.n_mc, self.n_columns),
            );
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return bad(
                "noise_level",
                format!("must be finite and >= 0, got {}", self.noise_level),
            );
        }
        let p = self.perturbation;
        if [p.k0, p.k1, p.alpha0, p.alpha1]
            .iter()
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return bad("perturbation", "standard deviations must be finite and >= 0".into());
        }
        let (lo, hi) = self.outlier_band;
        if !(lo <= hi) {
            return bad("outlier_band", format!("lower end {lo} exceeds upper end {hi}"));
        }
        let (lo, hi) = self.sigma_bounds;
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return bad("sigma_bounds", format!("need 0 < lo < hi, got [{lo}, {hi}]"));
        }
        if self.lcurve_points < 5 {
            return bad("lcurve_points", "need at least 5".into());
        }
        if self.first_guess_candidates == 0 {
            return bad("first_guess_candidates", "need at least 1".into());
        }
        if !(self.gcv_floor >= 0.0 && self.gcv_floor < 1.0) {
            return bad("gcv_floor", format!("must lie in [0, 1), got {}", self.gcv_floor));
        }
        self.search_box.validate().map_err(|e| Error::Config {
            key: "search_box".into(),
            message: e.to_string(),
        })?;
        self.source.validate().map_err(|e| Error::Config {
            key: "source".into(),
            message: e.to_string(),
        })?;
        self.grid().map_err(|e| Error::Config {
            key: "nx".into(),
            message: e.to_string(),
        })?;
        // CFL violations keep their own error kind
        self.advection()?;
        Ok(())
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

fn diff(prefix: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => diff(&path, u, v, out),
                    _ => out.push(path),
                }
            }
        }
        _ if a != b => out.push(prefix.to_string()),
        _ => {}
    }
}

/// Sets a dotted key in a JSON object; the value is parsed as JSON when it
/// can be, and taken as a string otherwise.
pub fn apply_override(v: &mut Value, key: &str, raw: &str) -> Result<()> {
    if key.is_empty() || key.split('.').any(|p| p.is_empty()) {
        return Err(Error::Config {
            key: key.into(),
            message: "empty path segment".into(),
        });
    }
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = v;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        if !cur.is_object() {
            *cur = Value::Object(Default::default());
        }
        let obj = cur.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            obj.insert(p.to_string(), parsed);
            return Ok(());
        }
        cur = obj
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// A first-guess source draw; `clipped` counts decay rates cut back to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FirstGuessDraw {
    pub source: SourceParams,
    pub clipped: usize,
}

/// `k ~ N(k, sd_k^2)`, `alpha ~ N(alpha, sd_alpha^2)`, negative draws set to 0.
pub fn draw_first_guess(truth: &SourceParams, p: &Perturbation, rng: &mut impl Rng) -> FirstGuessDraw {
    let mut clipped = 0;
    let mut perturb = |mean: f64, sd: f64| {
        let z: f64 = rng.sample(StandardNormal);
        let v = mean + sd * z;
        if v < 0.0 {
            clipped += 1;
            0.0
        } else {
            v
        }
    };
    let k0 = perturb(truth.k0, p.k0);
    let alpha0 = perturb(truth.alpha0, p.alpha0);
    let k1 = perturb(truth.k1, p.k1);
    let alpha1 = perturb(truth.alpha1, p.alpha1);
    FirstGuessDraw {
        source: SourceParams {
            k0,
            alpha0,
            k1,
            alpha1,
            ..*truth
        },
        clipped,
    }
}

const LOCATIONS: u64 = 1;
const DATA: u64 = 2;
const FIRST_GUESS: u64 = 3;

/// Everything an ensemble run needs, built deterministically from the seed.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub adv: Advection,
    pub truth: SpaceTimeField,
    pub data: DataMatrix,
    /// One first-guess draw per column, or the median candidates.
    pub first_guess_draws: Vec<FirstGuessDraw>,
    /// Full-grid RMSE of each draw.
    pub first_guess_rmse: Vec<f64>,
    /// Draw shared by every column, if the mode shares one.
    pub shared_draw: Option<usize>,
    shared_field: Option<SpaceTimeField>,
}

impl Experiment {
    pub fn grid(&self) -> &Grid {
        self.adv.grid()
    }

    fn draw_index(&self, column: usize) -> usize {
        self.shared_draw.unwrap_or(column)
    }

    pub fn first_guess_source(&self, column: usize) -> SourceParams {
        self.first_guess_draws[self.draw_index(column)].source
    }

    pub fn first_guess_field(&self, column: usize) -> Result<SpaceTimeField> {
        match &self.shared_field {
            Some(f) => Ok(f.clone()),
            None => self.solve(&self.first_guess_source(column)),
        }
    }

    /// RMSE of the first guess used for `column`.
    pub fn first_guess_error(&self, column: usize) -> f64 {
        self.first_guess_rmse[self.draw_index(column)]
    }

    fn solve(&self, src: &SourceParams) -> Result<SpaceTimeField> {
        self.adv.solve_forward(Some(src), None, &vec![0.0; self.grid().nx])
    }

    pub fn observations(&self, column: usize) -> Result<ObservationSet> {
        self.data.observation_set(self.grid(), column)
    }

    /// Decay rates clipped at zero among the draws actually used.
    pub fn clipped_draws(&self) -> usize {
        match self.shared_draw {
            Some(i) => self.first_guess_draws[i].clipped,
            None => self.first_guess_draws.iter().map(|d| d.clipped).sum(),
        }
    }
}

/// Index of the median of `v` (lower median for even lengths).
fn median_index(v: &[f64]) -> usize {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    idx[(v.len() - 1) / 2]
}

/// Truth run, data matrix and first-guess draws.
pub fn build_experiment(cfg: &ExperimentConfig) -> Result<Experiment> {
    cfg.validate()?;
    let adv = cfg.advection()?;
    let g = *adv.grid();
    let zero = vec![0.0; g.nx];
    let truth = adv.solve_forward(Some(&cfg.source), None, &zero)?;
    let locations = sample_locations(&g, cfg.n_obs, rng::derive_seed(cfg.seed, LOCATIONS));
    let data = calibrate_and_filter(
        &truth,
        &locations,
        cfg.noise_level,
        cfg.n_mc,
        cfg.n_columns,
        rng::derive_seed(cfg.seed, DATA),
    )?;

    let fg_seed = rng::derive_seed(cfg.seed, FIRST_GUESS);
    let n_draws = match cfg.first_guess {
        FirstGuessMode::Median => cfg.n_columns.max(cfg.first_guess_candidates),
        _ => cfg.n_columns,
    };
    let draws: Vec<FirstGuessDraw> = (0..n_draws)
        .map(|j| draw_first_guess(&cfg.source, &cfg.perturbation, &mut rng::stream(fg_seed, j as u64)))
        .collect();
    let first_guess_rmse: Vec<f64> = draws
        .par_iter()
        .map(|d| {
            adv.solve_forward(Some(&d.source), None, &zero)
                .map(|f| rmse(f.values(), truth.values()))
        })
        .collect::<Result<_>>()?;
    let shared_draw = match cfg.first_guess {
        FirstGuessMode::Shared => Some(0),
        FirstGuessMode::Median => Some(median_index(&first_guess_rmse[..cfg.first_guess_candidates.max(1)])),
        FirstGuessMode::PerMember => None,
    };
    let mut exp = Experiment {
        config: cfg.clone(),
        adv,
        truth,
        data,
        first_guess_draws: draws,
        first_guess_rmse,
        shared_draw,
        shared_field: None,
    };
    if let Some(i) = shared_draw {
        exp.shared_field = Some(exp.solve(&exp.first_guess_draws[i].source)?);
    }
    Ok(exp)
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, std, n })
    }
}

/// RMSE of each field against the truth over the full grid.
pub fn rmse_report(truth: &SpaceTimeField, fields: &[SpaceTimeField]) -> Result<Option<Stat>> {
    let mut v = Vec::with_capacity(fields.len());
    for f in fields {
        f.same_grid(truth)?;
        v.push(rmse(f.values(), truth.values()));
    }
    Ok(Stat::of(&v))
}

/// RMSE of every data column against the truth at the data locations.
pub fn data_rmse(data: &DataMatrix) -> Option<Stat> {
    Stat::of(&(0..data.columns.len()).map(|j| data.column_rmse(j)).collect::<Vec<_>>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnEstimate {
    pub column: usize,
    pub params: Params,
    pub runs: usize,
    pub flags: Vec<String>,
    pub retained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnFailure {
    pub column: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub covariance: CovarianceKind,
    pub estimates: Vec<ColumnEstimate>,
    pub failures: Vec<ColumnFailure>,
    /// Band applied to the estimates, if any.
    pub band: Option<(f64, f64)>,
    /// Variance over the retained estimates.
    pub sigma_f2: Option<Stat>,
    pub l_f: Option<Stat>,
    pub tau_f: Option<Stat>,
    /// Column whose estimate drives the assimilation-quality numbers.
    pub source_column: Option<usize>,
    pub assimilated_rmse: Option<Stat>,
    pub max_runs: usize,
}

impl MethodReport {
    pub fn retained(&self) -> usize {
        self.estimates.iter().filter(|e| e.retained).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub experiment: u8,
    pub covariance: CovarianceKind,
    pub seed: u64,
    pub n_columns: usize,
    pub first_guess_mode: FirstGuessMode,
    /// RMSE of the first guess used for the first column.
    pub first_guess_rmse: f64,
    /// RMSE spread over all first-guess draws.
    pub first_guess_ensemble_rmse: Option<Stat>,
    pub data_rmse: Option<Stat>,
    pub clipped_draws: usize,
    pub filter_attempts: usize,
    pub methods: Vec<MethodReport>,
    pub overrides: Vec<String>,
}

impl EnsembleReport {
    pub fn method(&self, m: Method, kind: CovarianceKind) -> Option<&MethodReport> {
        self.methods.iter().find(|r| r.method == m && r.covariance == kind)
    }

    /// Long-format table of the hyperparameter estimates.
    pub fn write_estimates_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record([
            "experiment",
            "covariance",
            "method",
            "quantity",
            "mean",
            "std",
            "retained",
            "total",
            "failures",
        ])?;
        let kind = |k: CovarianceKind| {
            if k == CovarianceKind::Isotropic {
                "isotropic"
            } else {
                "non_isotropic"
            }
        };
        for m in &self.methods {
            for (name, s) in [("sigma_f2", m.sigma_f2), ("l_f", m.l_f), ("tau_f", m.tau_f)] {
                let Some(s) = s else { continue };
                w.write_record([
                    self.experiment.to_string(),
                    kind(m.covariance).to_string(),
                    m.method.name().to_string(),
                    name.to_string(),
                    format!("{:e}", s.mean),
                    format!("{:e}", s.std),
                    m.retained().to_string(),
                    m.estimates.len().to_string(),
                    m.failures.len().to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Long-format RMSE table: first guess, data and each method.
    pub fn write_rmse_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["experiment", "estimate", "mean", "std", "n"])?;
        let mut row = |name: String, s: Stat| {
            w.write_record([
                self.experiment.to_string(),
                name,
                format!("{:e}", s.mean),
                format!("{:e}", s.std),
                s.n.to_string(),
            ])
        };
        row(
            "first_guess".into(),
            Stat {
                mean: self.first_guess_rmse,
                std: 0.0,
                n: 1,
            },
        )?;
        if let Some(s) = self.first_guess_ensemble_rmse {
            row("first_guess_ensemble".into(), s)?;
        }
        if let Some(s) = self.data_rmse {
            row("data".into(), s)?;
        }
        for m in &self.methods {
            if let Some(s) = m.assimilated_rmse {
                let suffix = if m.covariance == CovarianceKind::Isotropic {
                    "isotropic"
                } else {
                    "non_isotropic"
                };
                row(format!("{}_{suffix}", m.method.name()), s)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Every per-column estimate.
    pub fn write_samples_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record([
            "method",
            "covariance",
            "column",
            "sigma_f2",
            "l_f",
            "tau_f",
            "runs",
            "retained",
            "flags",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for m in &self.methods {
            for e in &m.estimates {
                w.write_record([
                    m.method.name().to_string(),
                    format!("{:?}", m.covariance).to_lowercase(),
                    e.column.to_string(),
                    format!("{:e}", e.params.sigma_f2),
                    opt(e.params.l_f),
                    opt(e.params.tau_f),
                    e.runs.to_string(),
                    e.retained.to_string(),
                    e.flags.join(";"),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Selection on one column with the experiment's settings.
pub fn select_column(
    exp: &Experiment,
    basis: Option<&Arc<IsotropicBasis>>,
    column: usize,
    method: Method,
    kind: CovarianceKind,
) -> Result<SelectionResult> {
    let cfg = &exp.config;
    let obs = exp.observations(column)?;
    let q_f = exp.first_guess_field(column)?;
    match kind {
        CovarianceKind::Isotropic => {
            let base = CovarianceSpec::isotropic(1.0);
            let problem = match basis {
                Some(b) => SelectionProblem::with_basis(b.clone(), &obs, &q_f, base)?,
                None => SelectionProblem::new(&exp.adv, &obs, &q_f, base)?,
            };
            param_select::select_1d(
                &problem.with_gcv_floor(cfg.gcv_floor),
                method,
                cfg.sigma_bounds,
                cfg.lcurve_points,
            )
        }
        CovarianceKind::NonIsotropic => {
            let problem = SelectionProblem::new(&exp.adv, &obs, &q_f, CovarianceSpec::non_isotropic(1.0, 3.0, 5.0))?;
            param_select::select_multi(&problem.with_gcv_floor(cfg.gcv_floor), method, &cfg.search_box)
        }
    }
}

/// `q_hat` for one column under the given covariance.
pub fn assimilate_column(
    exp: &Experiment,
    basis: Option<&Arc<IsotropicBasis>>,
    column: usize,
    spec: &CovarianceSpec,
) -> Result<SpaceTimeField> {
    let obs = exp.observations(column)?;
    let q_f = exp.first_guess_field(column)?;
    let sys = match basis {
        Some(b) if spec.is_isotropic() => b.system(spec, &obs, &q_f)?,
        _ => assemble_system(&exp.adv, spec, &obs, &q_f)?,
    };
    optimal_estimate(&sys)
}

fn spec_of(p: &Params) -> CovarianceSpec {
    match (p.l_f, p.tau_f) {
        (Some(l), Some(t)) => CovarianceSpec::non_isotropic(p.sigma_f2, l, t),
        _ => CovarianceSpec::isotropic(p.sigma_f2),
    }
}

fn method_report(
    exp: &Experiment,
    basis: Option<&Arc<IsotropicBasis>>,
    method: Method,
    kind: CovarianceKind,
) -> Result<MethodReport> {
    let cfg = &exp.config;
    let n = cfg.n_columns;
    let results: Vec<Result<SelectionResult>> = (0..n)
        .into_par_iter()
        .map(|j| select_column(exp, basis, j, method, kind))
        .collect();
    let band = if method == Method::LCurve || kind == CovarianceKind::NonIsotropic {
        None
    } else {
        Some(cfg.outlier_band)
    };
    let mut estimates = Vec::new();
    let mut failures = Vec::new();
    for (j, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => {
                let retained = band.is_none_or(|(lo, hi)| s.params.sigma_f2 >= lo && s.params.sigma_f2 <= hi);
                estimates.push(ColumnEstimate {
                    column: j,
                    params: s.params,
                    runs: s.runs,
                    flags: s.flags,
                    retained,
                });
            }
            Err(e) => failures.push(ColumnFailure {
                column: j,
                error: e.to_string(),
            }),
        }
    }
    let kept: Vec<&ColumnEstimate> = estimates.iter().filter(|e| e.retained).collect();
    let stat =
        |f: &dyn Fn(&Params) -> Option<f64>| Stat::of(&kept.iter().filter_map(|e| f(&e.params)).collect::<Vec<_>>());
    let sigma_f2 = stat(&|p| Some(p.sigma_f2));
    let l_f = stat(&|p| p.l_f);
    let tau_f = stat(&|p| p.tau_f);
    let max_runs = estimates.iter().map(|e| e.runs).max().unwrap_or(0);

    // parameters from the first column (or the first one that succeeded)
    let source = estimates.first().map(|e| (e.column, spec_of(&e.params)));
    let assimilated_rmse = match source {
        Some((_, spec)) => {
            let vals: Vec<f64> = (0..n)
                .into_par_iter()
                .map(|j| assimilate_column(exp, basis, j, &spec).map(|q| rmse(q.values(), exp.truth.values())))
                .collect::<Result<_>>()?;
            Stat::of(&vals)
        }
        None => None,
    };
    Ok(MethodReport {
        method,
        covariance: kind,
        estimates,
        failures,
        band,
        sigma_f2,
        l_f,
        tau_f,
        source_column: source.map(|s| s.0),
        assimilated_rmse,
        max_runs,
    })
}

/// Selection over every column for each method, outlier filtering and RMSEs.
/// Separable-kernel experiments also run the single-variance searches on the
/// same data for comparison.
pub fn run_ensemble(cfg: &ExperimentConfig, methods: &[Method]) -> Result<EnsembleReport> {
    if methods.is_empty() {
        return Err(Error::param("at least one selection method is required"));
    }
    let exp = build_experiment(cfg)?;
    run_ensemble_on(&exp, methods)
}

pub fn run_ensemble_on(exp: &Experiment, methods: &[Method]) -> Result<EnsembleReport> {
    let cfg = &exp.config;
    let basis = Arc::new(IsotropicBasis::new(&exp.adv, &exp.observations(0)?, false)?);
    let mut reports = Vec::new();
    let iso_methods: Vec<Method> = match cfg.covariance {
        CovarianceKind::Isotropic => methods.to_vec(),
        CovarianceKind::NonIsotropic => methods.iter().copied().filter(|m| *m != Method::LCurve).collect(),
    };
    if cfg.covariance == CovarianceKind::NonIsotropic {
        for &m in &iso_methods {
            reports.push(method_report(exp, None, m, CovarianceKind::NonIsotropic)?);
        }
    }
    for &m in &iso_methods {
        reports.push(method_report(exp, Some(&basis), m, CovarianceKind::Isotropic)?);
    }

    Ok(EnsembleReport {
        experiment: cfg.id,
        covariance: cfg.covariance,
        seed: cfg.seed,
        n_columns: cfg.n_columns,
        first_guess_mode: cfg.first_guess,
        first_guess_rmse: exp.first_guess_error(0),
        first_guess_ensemble_rmse: Stat::of(&exp.first_guess_rmse),
        data_rmse: data_rmse(&exp.data),
        clipped_draws: exp.clipped_draws(),
        filter_attempts: exp.data.attempts,
        methods: reports,
        overrides: cfg.overrides.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn small(id: u8) -> ExperimentConfig {
        let mut c = ExperimentConfig::preset(id, CovarianceKind::Isotropic).unwrap();
        c.nx = 30;
        c.nt = 60;
        c.n_obs = 12;
        c.n_columns = 4;
        c.n_mc = 2000;
        c.lcurve_points = 30;
        c
    }

    #[test]
    fn presets_follow_the_table() {
        let c = ExperimentConfig::preset(1, CovarianceKind::Isotropic).unwrap();
        assert_eq!(c.bc, BoundaryKind::Periodic);
        assert_eq!(c.source.s1, 0.0);
        assert_eq!(c.source.x0, 33.0);
        assert_eq!(c.noise_level, 0.7);
        assert_eq!((c.nx, c.nt, c.n_obs, c.n_columns), (200, 445, 49, 500));
        let c = ExperimentConfig::preset(4, CovarianceKind::NonIsotropic).unwrap();
        assert_eq!(c.bc, BoundaryKind::NoFlux);
        assert_eq!((c.source.s1, c.source.k1, c.source.alpha1), (50.0, 0.25, 5.0));
        assert_eq!((c.nx, c.nt, c.n_obs, c.n_columns), (51, 113, 30, 1));
        assert_eq!(c.outlier_band, (0.5, 6.0));
        assert!(ExperimentConfig::preset(5, CovarianceKind::Isotropic).is_err());
    }

    #[test]
    fn overrides_are_recorded() {
        let c =
            ExperimentConfig::from_value(&json!({"id": 3, "noise_level": 0.5, "perturbation": {"k0": 0.1}})).unwrap();
        assert_eq!(c.id, 3);
        assert_eq!(c.noise_level, 0.5);
        assert_eq!(c.perturbation.alpha0, 0.7);
        assert_eq!(
            c.overrides,
            vec!["noise_level".to_string(), "perturbation.k0".to_string()]
        );
    }

    #[test]
    fn unknown_key_is_named() {
        let e = ExperimentConfig::from_value(&json!({"id": 1, "perturbation": {"kk": 0.1}})).unwrap_err();
        match e {
            Error::Config { key, .. } => assert_eq!(key, "perturbation.kk"),
            other => panic!("{other:?}"),
        }
        let e = ExperimentConfig::from_value(&json!({"id": 1, "noise_level": "x"})).unwrap_err();
        assert!(
            matches!(e, Error::Config { ref key, .. } if key == "noise_level"),
            "{e:?}"
        );
    }

    #[test]
    fn dotted_override() {
        let mut v = json!({"id": 2});
        apply_override(&mut v, "search_box.l_f", "[2, 10]").unwrap();
        apply_override(&mut v, "first_guess", "per_member").unwrap();
        let c = ExperimentConfig::from_value(&v).unwrap();
        assert_eq!(c.search_box.l_f, (2.0, 10.0));
        assert_eq!(c.first_guess, FirstGuessMode::PerMember);
    }

    #[test]
    fn cfl_violation_is_rejected() {
        let e = ExperimentConfig::from_value(&json!({"id": 1, "nx": 400})).unwrap_err();
        assert!(matches!(e, Error::Cfl { .. }), "{e:?}");
    }

    #[test]
    fn clipped_draws_are_zero() {
        let truth = SourceParams {
            k0: 0.1,
            ..SourceParams::ZERO
        };
        let p = Perturbation {
            k0: 100.0,
            k1: 0.0,
            alpha0: 0.0,
            alpha1: 0.0,
        };
        let mut r = rng::stream(1, 0);
        let mut clipped = 0;
        for _ in 0..50 {
            let d = draw_first_guess(&truth, &p, &mut r);
            assert!(d.source.k0 >= 0.0);
            clipped += d.clipped;
        }
        assert!(clipped > 0);
    }

    #[test]
    fn perfect_model_keeps_the_truth() {
        let mut c = small(1);
        c.perturbation = Perturbation {
            k0: 0.0,
            k1: 0.0,
            alpha0: 0.0,
            alpha1: 0.0,
        };
        c.noise_level = 0.0;
        let exp = build_experiment(&c).unwrap();
        assert_eq!(exp.first_guess_field(0).unwrap(), exp.truth);
        // sigma = 0 data and an exact model: any variance keeps q_hat = q_F
        let q = assimilate_column(&exp, None, 0, &CovarianceSpec::isotropic(0.5)).unwrap();
        let err = q
            .values()
            .iter()
            .zip(exp.truth.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn perfect_model_pushes_variance_down() {
        // same data, with and without first-guess error
        let c = small(3);
        let mut exact = c.clone();
        exact.perturbation = Perturbation {
            k0: 0.0,
            k1: 0.0,
            alpha0: 0.0,
            alpha1: 0.0,
        };
        let (a, b) = (build_experiment(&c).unwrap(), build_experiment(&exact).unwrap());
        for m in [Method::Gcv, Method::Chi2] {
            let mean = |e: &Experiment| {
                (0..c.n_columns)
                    .map(|j| {
                        select_column(e, None, j, m, CovarianceKind::Isotropic)
                            .unwrap()
                            .params
                            .sigma_f2
                    })
                    .sum::<f64>()
                    / c.n_columns as f64
            };
            let (perturbed, perfect) = (mean(&a), mean(&b));
            assert!(perfect < 0.1 * perturbed, "{m:?}: {perfect} vs {perturbed}");
        }
    }

    #[test]
    fn rmse_report_basics() {
        let g = Grid::new(0.0, 1.0, 0.0, 1.0, 4, 3).unwrap();
        let t = SpaceTimeField::from_fn(g, |x, t| x + t);
        let s = rmse_report(&t, std::slice::from_ref(&t)).unwrap().unwrap();
        assert_eq!(s.mean, 0.0);
        let off = SpaceTimeField::from_fn(g, |x, t| x + t - 2.5);
        let s = rmse_report(&t, &[off]).unwrap().unwrap();
        assert!((s.mean - 2.5).abs() < 1e-12);
    }

    #[test]
    fn ensemble_is_deterministic_and_size_one_matches_single_run() {
        let mut c = small(1);
        c.n_columns = 1;
        c.n_mc = 500;
        let a = run_ensemble(&c, &[Method::Gcv, Method::Chi2]).unwrap();
        let b = run_ensemble(&c, &[Method::Gcv, Method::Chi2]).unwrap();
        assert_eq!(a, b);
        let exp = build_experiment(&c).unwrap();
        let single = select_column(&exp, None, 0, Method::Gcv, CovarianceKind::Isotropic).unwrap();
        let rep = a.method(Method::Gcv, CovarianceKind::Isotropic).unwrap();
        assert_eq!(rep.estimates[0].params, single.params);
    }

    #[test]
    fn csv_tables_have_rows() {
        let c = small(2);
        let r = run_ensemble(&c, &Method::ALL).unwrap();
        let mut buf = Vec::new();
        r.write_rmse_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().count() >= 4, "{text}");
        let mut buf = Vec::new();
        r.write_samples_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap().lines().count(),
            1 + 3 * 4 - r.methods.iter().map(|m| m.failures.len()).sum::<usize>()
        );
    }
}
