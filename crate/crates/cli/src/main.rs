mod config;
mod ingest;
mod report;

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;
use survref::fit_hybrid::{bootstrap_se, population_summaries};
use survref::simulate::{apply_selection, generate_community, PRESETS};
use survref::{
    community_curve, fit_hybrid, maximize_full, project_progression, run_study, Dataset, FitConfig, Method,
    ProjectionConfig, SimulationDesign,
};

use config::RunConfig;
use report::{DataSummary, FitBlock, FitBody, ProjectBody, Report, SimulateBody};

/// Input or configuration problems; mapped to exit code 2.
#[derive(Debug)]
pub struct UsageError(String);

impl UsageError {
    pub fn msg(msg: impl Into<String>) -> Self {
        UsageError(msg.into())
    }
}

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

impl From<anyhow::Error> for UsageError {
    fn from(e: anyhow::Error) -> Self {
        UsageError(format!("{e:#}"))
    }
}

#[derive(Parser)]
#[command(name = "survref", version)]
#[command(about = "Progression-time estimation from clinic referral cohorts")]
struct Cli {
    /// Worker threads for replications, bootstrap and projection runs.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// JSON run configuration (flat keys; unknown keys are rejected).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Log level.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Full,
    Hybrid,
    Both,
}

impl MethodArg {
    fn methods(self) -> Vec<Method> {
        match self {
            MethodArg::Full => vec![Method::Full],
            MethodArg::Hybrid => vec![Method::Hybrid],
            MethodArg::Both => vec![Method::Full, Method::Hybrid],
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fit a referral cohort and write a JSON report.
    Fit {
        /// CSV with columns id,r,x,delta,u,z1..zp.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = MethodArg::Both)]
        method: MethodArg,
        /// Report path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed for the bootstrap.
        #[arg(long)]
        seed: Option<u64>,
        /// Bootstrap replicates for the hybrid fit (0 disables).
        #[arg(long)]
        bootstrap: Option<usize>,
        /// Study close date (YYYY-MM-DD); derives u from a `y` column of initiation dates.
        #[arg(long)]
        d2: Option<NaiveDate>,
    },
    /// Run a simulation study and write its summary table as CSV.
    Simulate {
        /// Scenario preset.
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long, value_enum, default_value_t = MethodArg::Both)]
        method: MethodArg,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Summary CSV path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write the selected sample of replicate 0 as an input CSV and skip the study.
        #[arg(long)]
        sample: Option<PathBuf>,
    },
    /// Fit, then project the community progression rate at a horizon.
    Project {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = MethodArg::Hybrid)]
        method: MethodArg,
        /// Output directory for projection.json and curve.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Years since initiation.
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        d2: Option<NaiveDate>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log_level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match e.chain().find_map(|c| c.downcast_ref::<survref::Error>()) {
        Some(err) if err.is_convergence() => 3,
        Some(_) => 2,
        None => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(t) = cli.threads {
        cfg.threads = Some(t);
    }
    cfg.validate()?;
    if let Some(t) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Fit {
            data,
            method,
            out,
            seed,
            bootstrap,
            d2,
        } => {
            if let Some(s) = seed {
                cfg.seed = Some(s);
            }
            if let Some(b) = bootstrap {
                cfg.bootstrap_reps = Some(b);
            }
            run_fit(&cfg, &data, method, out.as_deref(), d2)
        }
        Command::Simulate {
            scenario,
            method,
            reps,
            seed,
            out,
            report,
            sample,
        } => {
            if scenario.is_some() {
                cfg.scenario = scenario;
            }
            if reps.is_some() {
                cfg.reps = reps;
            }
            if seed.is_some() {
                cfg.seed = seed;
            }
            run_simulate(&mut cfg, method, out.as_deref(), report.as_deref(), sample.as_deref())
        }
        Command::Project {
            data,
            method,
            out,
            seed,
            horizon,
            runs,
            d2,
        } => {
            if seed.is_some() {
                cfg.seed = seed;
            }
            if horizon.is_some() {
                cfg.horizon = horizon;
            }
            if runs.is_some() {
                cfg.projection_runs = runs;
            }
            run_project(&cfg, &data, method, &out, d2)
        }
    }
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let mut w = open_output(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn data_summary(path: &Path, data: &Dataset) -> DataSummary {
    DataSummary {
        path: path.display().to_string(),
        n_records: data.len(),
        n_events: data.n_events(),
        n_covariates: data.n_covariates(),
    }
}

fn hybrid_block(data: &Dataset, fit_cfg: &FitConfig, cfg: &RunConfig) -> Result<FitBlock> {
    let fit = fit_hybrid(data, fit_cfg)?;
    let population = population_summaries(data, &fit.state.weights)?;
    let bootstrap = match cfg.bootstrap_reps.unwrap_or(0) {
        0 => None,
        reps => {
            let Some(seed) = cfg.seed else {
                bail!(UsageError::msg("the bootstrap needs a seed (--seed or `seed` in the config)"));
            };
            info!("bootstrap: {reps} replicates");
            Some(bootstrap_se(data, fit_cfg, &fit.estimate, reps, seed)?)
        }
    };
    Ok(FitBlock::from_hybrid(&fit, population, bootstrap.as_ref()))
}

fn run_fit(cfg: &RunConfig, path: &Path, method: MethodArg, out: Option<&Path>, d2: Option<NaiveDate>) -> Result<()> {
    let data = ingest::ingest_dataset(path, d2)?;
    let fit_cfg = cfg.fit_config()?;
    let mut fits = Vec::new();
    for m in method.methods() {
        info!("fitting {m:?}");
        let block = match m {
            Method::Full => FitBlock::from_estimate(&maximize_full(&data, &fit_cfg)?),
            Method::Hybrid => hybrid_block(&data, &fit_cfg, cfg)?,
        };
        fits.push(block);
    }
    let body = FitBody {
        data: data_summary(path, &data),
        settings: &fit_cfg,
        fits,
    };
    write_json(&Report::new("fit", cfg.seed, cfg, body), out)
}

fn run_simulate(
    cfg: &mut RunConfig,
    method: MethodArg,
    out: Option<&Path>,
    report_path: Option<&Path>,
    sample: Option<&Path>,
) -> Result<()> {
    let Some(name) = cfg.scenario.clone() else {
        bail!(UsageError::msg(format!(
            "a scenario is required (--scenario or `scenario` in the config); one of {}",
            PRESETS.join(", ")
        )));
    };
    let mut design = SimulationDesign::preset(&name)?;
    if let Some(f) = cfg.family {
        design.fit_family = f;
    }
    if cfg.knots.is_some() || cfg.partition.is_some() {
        design.working_knots = cfg.knots()?;
    }
    let seed = *cfg.seed.get_or_insert(design.seed);
    let reps = *cfg.reps.get_or_insert(design.replications);

    if let Some(path) = sample {
        let community = generate_community(&design, seed, 0)?;
        let data = apply_selection(&community, design.recruitment_cutoff, design.censoring_time)?;
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        return ingest::write_dataset(&data, BufWriter::new(file));
    }

    let methods = method.methods();
    info!("running {reps} replications of {name}");
    let study = run_study(&design, &methods, reps, seed)?;
    let mut csv = Vec::new();
    study.write_csv(&mut csv)?;
    let mut w = open_output(out)?;
    w.write_all(&csv)?;
    w.flush()?;
    if let Some(path) = report_path {
        let failures = methods
            .iter()
            .map(|&m| {
                let n = study.row(m, &study.names[0]).map_or(0, |r| r.n_fail);
                (m, n)
            })
            .collect();
        let body = SimulateBody {
            scenario: name,
            reps,
            methods,
            csv: String::from_utf8(csv)?,
            mean_n_hat: study.mean_n_hat(),
            sd_n_hat: study.sd_n_hat(),
            failures,
        };
        write_json(&Report::new("simulate", Some(seed), cfg, body), Some(path))?;
    }
    Ok(())
}

fn run_project(cfg: &RunConfig, path: &Path, method: MethodArg, out: &Path, d2: Option<NaiveDate>) -> Result<()> {
    let Some(seed) = cfg.seed else {
        bail!(UsageError::msg("projection needs a seed (--seed or `seed` in the config)"));
    };
    let method = match method {
        MethodArg::Full => Method::Full,
        MethodArg::Hybrid => Method::Hybrid,
        MethodArg::Both => bail!(UsageError::msg("projection uses a single fit; choose full or hybrid")),
    };
    let data = ingest::ingest_dataset(path, d2)?;
    let fit_cfg = cfg.fit_config()?;
    let (estimate, block) = match method {
        Method::Full => {
            let est = maximize_full(&data, &fit_cfg)?;
            let block = FitBlock::from_estimate(&est);
            (est, block)
        }
        Method::Hybrid => {
            let fit = fit_hybrid(&data, &fit_cfg)?;
            let population = population_summaries(&data, &fit.state.weights)?;
            let block = FitBlock::from_hybrid(&fit, population, None);
            (fit.estimate, block)
        }
    };
    let defaults = ProjectionConfig::default();
    let proj_cfg = ProjectionConfig {
        horizon: cfg.horizon.unwrap_or(defaults.horizon),
        runs: cfg.projection_runs.unwrap_or(defaults.runs),
        seed,
        community_size: cfg.community_size,
        min_inclusion: fit_cfg.min_inclusion,
    };
    let summary = project_progression(&estimate, &data, &proj_cfg)?;
    let curve = community_curve(&estimate, &data, &proj_cfg)?;

    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let curve_path = out.join("curve.csv");
    let mut w = BufWriter::new(File::create(&curve_path).with_context(|| format!("creating {}", curve_path.display()))?);
    curve.write_csv(&mut w)?;
    w.flush()?;
    let body = ProjectBody {
        data: data_summary(path, &data),
        settings: &fit_cfg,
        projection_settings: &proj_cfg,
        fit: block,
        projection: &summary,
        curve_csv: "curve.csv".into(),
    };
    write_json(&Report::new("project", Some(seed), cfg, body), Some(&out.join("projection.json")))
}
