use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use repvar_core::covariance::CovarianceSpec;
use repvar_core::experiment::{self, CovarianceKind, EnsembleReport, ExperimentConfig};
use repvar_core::observation::rmse;
use repvar_core::oracle;
use repvar_core::param_select::Method;
use repvar_core::representer::{assemble_system, optimal_estimate, IsotropicBasis};
use repvar_core::transport::Advection;
use repvar_core::{Error, Result};

mod provenance;

use provenance::Provenance;

#[derive(Parser, Debug)]
#[command(
    name = "repvar",
    version,
    about = "Representer-method 4D-Var with model-error covariance selection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Truth run and the filtered synthetic data matrix.
    GenerateData(Common),
    /// Optimal estimate for given hyperparameters on one data column.
    Assimilate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sigma_f2: f64,
        /// Separable kernel length scale (non-isotropic only).
        #[arg(long)]
        l_f: Option<f64>,
        #[arg(long)]
        tau_f: Option<f64>,
        #[arg(long, default_value_t = 0)]
        column: usize,
    },
    /// Hyperparameter selection on one data column.
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = MethodArg::Gcv)]
        method: MethodArg,
        #[arg(long, default_value_t = 0)]
        column: usize,
    },
    /// Selection over every column with outlier filtering and RMSE tables.
    Ensemble {
        #[command(flatten)]
        common: Common,
        /// Repeatable; all three when omitted.
        #[arg(long, value_enum)]
        method: Vec<MethodArg>,
    },
    /// Tables from one or more saved ensemble reports.
    Report {
        /// `report.json` files written by `ensemble`.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long, env = "REPVAR_OUTPUT_DIR", default_value = "out")]
        output: PathBuf,
    },
    /// Oracle equivalence and invariant checks.
    Validate {
        #[arg(long, value_enum, default_value_t = Size::Tiny)]
        size: Size,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        threads: Option<usize>,
    },
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (JSON, partial configs overlay the preset).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "REPVAR_OUTPUT_DIR", default_value = "out")]
    output: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    experiment: Option<u8>,
    #[arg(long, value_enum)]
    covariance: Option<KindArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Dotted-key override, e.g. `--set search_box.l_f=[2,10]`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum MethodArg {
    Lcurve,
    Gcv,
    Chi2,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Lcurve => Method::LCurve,
            MethodArg::Gcv => Method::Gcv,
            MethodArg::Chi2 => Method::Chi2,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum KindArg {
    Isotropic,
    NonIsotropic,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Size {
    Tiny,
}

/// Failure after startup; carries its own exit status.
#[derive(Debug)]
enum Failure {
    Core(Error),
    Validation(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Core(e) => match e {
                Error::Config { .. } | Error::Json(_) | Error::InvalidParameter(_) | Error::InvalidGrid(_) => 3,
                Error::Cfl { .. } => 4,
                Error::NonFinitePenalty { .. }
                | Error::InterpolatingDatum { .. }
                | Error::Degenerate(_)
                | Error::FilterExhausted { .. }
                | Error::TooLarge { .. } => 5,
                Error::Io(_) | Error::Csv(_) => 6,
                _ => 1,
            },
            Failure::Validation(_) => 7,
        }
    }

    fn to_json(&self) -> Value {
        let (kind, key, message) = match self {
            Failure::Core(e) => {
                let kind = match e {
                    Error::Config { .. } | Error::Json(_) => "config",
                    Error::InvalidParameter(_) | Error::InvalidGrid(_) => "invalid_parameter",
                    Error::Cfl { .. } => "cfl",
                    Error::NonFinitePenalty { .. } | Error::InterpolatingDatum { .. } | Error::Degenerate(_) => {
                        "selection"
                    }
                    Error::FilterExhausted { .. } => "data_filter",
                    Error::TooLarge { .. } => "too_large",
                    Error::Io(_) | Error::Csv(_) => "io",
                    _ => "internal",
                };
                let key = match e {
                    Error::Config { key, .. } => Some(key.clone()),
                    _ => None,
                };
                (kind, key, e.to_string())
            }
            Failure::Validation(n) => ("validation", None, format!("{n} check(s) failed")),
        };
        json!({ "error": kind, "key": key, "message": message, "exit_code": self.code() })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.to_json());
            ExitCode::from(f.code())
        }
    }
}

fn set_threads(n: Option<usize>) -> Result<()> {
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::param(format!("thread pool: {e}")))?;
    }
    Ok(())
}

/// Config file (or an empty object) with flag and `--set` overrides applied.
fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut v = match &c.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text).map_err(|e| Error::Config {
                key: ".".into(),
                message: format!("{}: {e}", path.display()),
            })?
        }
        None => json!({}),
    };
    if let Some(id) = c.experiment {
        experiment::apply_override(&mut v, "id", &id.to_string())?;
    }
    if let Some(k) = c.covariance {
        let name = match k {
            KindArg::Isotropic => "isotropic",
            KindArg::NonIsotropic => "non_isotropic",
        };
        experiment::apply_override(&mut v, "covariance", &format!("\"{name}\""))?;
    }
    if let Some(s) = c.seed {
        experiment::apply_override(&mut v, "seed", &s.to_string())?;
    }
    for kv in &c.set {
        let (k, val) = kv.split_once('=').ok_or_else(|| Error::Config {
            key: kv.clone(),
            message: "expected KEY=VALUE".into(),
        })?;
        experiment::apply_override(&mut v, k.trim(), val.trim())?;
    }
    ExperimentConfig::from_value(&v)
}

fn prepare(c: &Common, command: &str) -> Result<(ExperimentConfig, Provenance)> {
    set_threads(c.threads)?;
    let cfg = load_config(c)?;
    std::fs::create_dir_all(&c.output)?;
    let prov = Provenance::new(&cfg, command)?;
    prov.write_json(&c.output.join("config.json"), serde_json::to_value(&cfg)?)?;
    Ok((cfg, prov))
}

fn run(cmd: Command) -> std::result::Result<(), Failure> {
    match cmd {
        Command::GenerateData(c) => {
            let (cfg, prov) = prepare(&c, "generate-data")?;
            let exp = experiment::build_experiment(&cfg)?;
            let out = &c.output;
            prov.write_csv_with(&out.join("data.csv"), |p| exp.data.write_csv(p))?;
            let band = exp.data.band;
            prov.write_json(
                &out.join("data_summary.json"),
                json!({
                    "n_obs": exp.data.n_obs(),
                    "n_columns": exp.data.columns.len(),
                    "band": band,
                    "filter_attempts": exp.data.attempts,
                    "first_guess_rmse": exp.first_guess_error(0),
                    "first_guess_source": exp.first_guess_source(0),
                    "data_rmse": experiment::data_rmse(&exp.data),
                }),
            )?;
            println!("wrote {}", out.join("data.csv").display());
        }
        Command::Assimilate {
            common,
            sigma_f2,
            l_f,
            tau_f,
            column,
        } => {
            let (cfg, prov) = prepare(&common, "assimilate")?;
            let spec = match (l_f, tau_f) {
                (None, None) => CovarianceSpec::isotropic(sigma_f2),
                (Some(l), Some(t)) => CovarianceSpec::non_isotropic(sigma_f2, l, t),
                _ => return Err(Error::param("--l-f and --tau-f go together").into()),
            };
            spec.validate()?;
            let exp = experiment::build_experiment(&cfg)?;
            check_column(column, cfg.n_columns)?;
            let obs = exp.observations(column)?;
            let q_f = exp.first_guess_field(column)?;
            let sys = assemble_system(&exp.adv, &spec, &obs, &q_f)?;
            let q_hat = optimal_estimate(&sys)?;
            let out = &common.output;
            prov.write_csv_with(&out.join("q_hat.csv"), |p| {
                write_field_csv(p, &exp.adv, &[("q_hat", &q_hat), ("q_f", &q_f), ("truth", &exp.truth)])
            })?;
            prov.write_json(
                &out.join("summary.json"),
                json!({
                    "column": column,
                    "spec": spec,
                    "penalties": sys.penalties(),
                    "rmse_assimilated": rmse(q_hat.values(), exp.truth.values()),
                    "rmse_first_guess": rmse(q_f.values(), exp.truth.values()),
                    "data_rmse": exp.data.column_rmse(column),
                }),
            )?;
            println!("wrote {}", out.join("q_hat.csv").display());
        }
        Command::Select { common, method, column } => {
            let (cfg, prov) = prepare(&common, "select")?;
            let exp = experiment::build_experiment(&cfg)?;
            check_column(column, cfg.n_columns)?;
            let basis = match cfg.covariance {
                CovarianceKind::Isotropic => Some(std::sync::Arc::new(IsotropicBasis::new(
                    &exp.adv,
                    &exp.observations(column)?,
                    false,
                )?)),
                CovarianceKind::NonIsotropic => None,
            };
            let r = experiment::select_column(&exp, basis.as_ref(), column, method.into(), cfg.covariance)?;
            let out = &common.output;
            prov.write_csv_with(&out.join("curve.csv"), |p| r.write_curve_csv(p))?;
            let mut v = serde_json::to_value(&r)?;
            v["column"] = json!(column);
            prov.write_json(&out.join("selection.json"), v)?;
            println!(
                "{}",
                serde_json::to_string(
                    &json!({"method": r.method, "params": r.params, "runs": r.runs, "flags": r.flags})
                )?
            );
        }
        Command::Ensemble { common, method } => {
            let (cfg, prov) = prepare(&common, "ensemble")?;
            let methods: Vec<Method> = if method.is_empty() {
                Method::ALL.to_vec()
            } else {
                method.into_iter().map(Method::from).collect()
            };
            let report = experiment::run_ensemble(&cfg, &methods)?;
            let out = &common.output;
            prov.write_csv_buf(&out.join("estimates.csv"), |w| report.write_estimates_csv(w))?;
            prov.write_csv_buf(&out.join("rmse.csv"), |w| report.write_rmse_csv(w))?;
            prov.write_csv_buf(&out.join("samples.csv"), |w| report.write_samples_csv(w))?;
            prov.write_json(&out.join("report.json"), serde_json::to_value(&report)?)?;
            print!("{}", render_tables(std::slice::from_ref(&report)));
        }
        Command::Report { input, output } => {
            let mut reports = Vec::new();
            for path in &input {
                let text = std::fs::read_to_string(path)?;
                let v: Value = serde_json::from_str(&text).map_err(Error::from)?;
                let body = v.get("result").cloned().unwrap_or(v);
                let r: EnsembleReport = serde_path_to_error::deserialize(&body).map_err(|e| Error::Config {
                    key: e.path().to_string(),
                    message: format!("{}: {}", path.display(), e.inner()),
                })?;
                reports.push(r);
            }
            reports.sort_by_key(|r| (r.experiment, r.covariance == CovarianceKind::NonIsotropic));
            std::fs::create_dir_all(&output)?;
            let text = render_tables(&reports);
            std::fs::write(output.join("tables.md"), &text)?;
            print!("{text}");
        }
        Command::Validate {
            size: Size::Tiny,
            seed,
            threads,
        } => {
            set_threads(threads)?;
            let suite = oracle::tiny_suite(seed)?;
            let checks = oracle::validate_suite(&suite)?;
            let failed = checks.iter().filter(|c| !c.passed).count();
            for c in &checks {
                println!(
                    "{} {} (error {:.3e}, tolerance {:.0e})",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.error,
                    c.tolerance
                );
            }
            println!("{} checks, {} failed", checks.len(), failed);
            if failed > 0 {
                return Err(Failure::Validation(failed));
            }
        }
    }
    Ok(())
}

fn check_column(column: usize, n: usize) -> Result<()> {
    if column >= n {
        return Err(Error::Config {
            key: "column".into(),
            message: format!("column {column} out of range, dataset has {n}"),
        });
    }
    Ok(())
}

fn write_field_csv(path: &Path, adv: &Advection, fields: &[(&str, &repvar_core::grid::SpaceTimeField)]) -> Result<()> {
    let g = adv.grid();
    let mut w = csv::Writer::from_path(path)?;
    let mut head = vec!["t".to_string(), "x".to_string()];
    head.extend(fields.iter().map(|(n, _)| n.to_string()));
    w.write_record(&head)?;
    for n in 0..g.nt {
        for i in 0..g.nx {
            let mut row = vec![format!("{}", g.t_level(n)), format!("{}", g.x_center(i))];
            row.extend(fields.iter().map(|(_, f)| format!("{:e}", f.at(n, i))));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn fmt_stat(s: Option<experiment::Stat>) -> String {
    match s {
        Some(s) if s.n > 1 => format!("{:.4} ({:.4})", s.mean, s.std),
        Some(s) => format!("{:.6}", s.mean),
        None => "-".into(),
    }
}

/// Markdown tables shaped like the variance and RMSE summaries.
fn render_tables(reports: &[EnsembleReport]) -> String {
    let mut s = String::new();
    s.push_str("| expt | kind | method | sigma_f2 | l_f | tau_f | retained | assimilated RMSE |\n|---|---|---|---|---|---|---|---|\n");
    for r in reports {
        for m in &r.methods {
            let kind = if m.covariance == CovarianceKind::Isotropic {
                "iso"
            } else {
                "non-iso"
            };
            s.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {}/{} | {} |\n",
                r.experiment,
                kind,
                m.method.name(),
                fmt_stat(m.sigma_f2),
                fmt_stat(m.l_f),
                fmt_stat(m.tau_f),
                m.retained(),
                m.estimates.len(),
                fmt_stat(m.assimilated_rmse)
            ));
        }
    }
    s.push_str("\n| expt | first guess | first-guess draws | data |\n|---|---|---|---|\n");
    for r in reports {
        s.push_str(&format!(
            "| {} | {:.4} | {} | {} |\n",
            r.experiment,
            r.first_guess_rmse,
            fmt_stat(r.first_guess_ensemble_rmse),
            fmt_stat(r.data_rmse)
        ));
    }
    s
}
