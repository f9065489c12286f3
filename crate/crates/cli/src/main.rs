//! `ratedp` command line: run experiments and grids, recompute metrics from
//! persisted runs, emit plot data, generate spike files, validate configs.
//!
//! Exit codes: 0 success, 1 validation failure, 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ratedp::data::{generate_split, save_spike_file, TaskSpec};
use ratedp::error::Error;
use ratedp::eval;
use ratedp::experiment::{
    emit_plot_data, expand_grid, forecast_study, operating_point_study, run_experiment, run_grid,
    spec_from_run, summarize, to_csv, validate_spec, ExperimentSpec, PlotKind,
};
use ratedp::lif::LifConfig;
use ratedp::sensitivity::comparison_csv;

#[derive(Parser)]
#[command(
    name = "ratedp",
    version,
    about = "Rate-aware federated spiking networks under DP-SGD"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment spec and print its summary row.
    Run(RunArgs),
    /// Run every cell of a grid file and write summary.csv.
    Grid(GridArgs),
    /// Recompute the summary of persisted runs.
    Metrics(MetricsArgs),
    /// Emit plot-ready CSV from persisted runs.
    PlotData(PlotArgs),
    /// Write a synthetic spike file.
    GenData(GenArgs),
    /// Validate spec or grid files and list every violation.
    Validate(ValidateArgs),
    /// Forecast-versus-simulation and single-neuron sensitivity tables.
    Sensitivity(SensitivityArgs),
}

/// Overrides of spec fields.
#[derive(Args, Default)]
struct Overrides {
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    k_clients: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Dirichlet concentration.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    partition_seed: Option<u64>,
    /// Enables DP with this target epsilon.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    clip_c: Option<f64>,
    /// Disables DP.
    #[arg(long, conflicts_with = "epsilon")]
    no_dp: bool,
}

impl Overrides {
    fn apply(&self, s: &mut ExperimentSpec) {
        if let Some(v) = self.seed {
            s.seed = v;
        }
        if let Some(v) = self.rounds {
            s.fed.rounds = v;
        }
        if let Some(v) = self.k_clients {
            s.fed.k_clients = v;
        }
        if let Some(v) = self.epochs {
            s.fed.epochs = v;
        }
        if let Some(v) = self.batch_size {
            s.fed.batch_size = v;
        }
        if let Some(v) = self.lr {
            s.fed.lr = v;
        }
        if let Some(v) = self.alpha {
            s.fed.alpha = v;
        }
        if let Some(v) = self.partition_seed {
            s.fed.partition_seed = v;
        }
        if let Some(v) = self.epsilon {
            s.dp.enabled = true;
            s.dp.epsilon = v;
        }
        if let Some(v) = self.clip_c {
            s.dp.clip_c = v;
        }
        if self.no_dp {
            s.dp.enabled = false;
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Experiment spec (TOML).
    spec: PathBuf,
    /// Directory receiving the run directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Persisted DP-free run to pair with for RMSE, |dlambda| and tau.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Overwrite an existing run directory with the same id and config.
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct GridArgs {
    grid: PathBuf,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long)]
    force: bool,
    /// Master seed of every cell.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct MetricsArgs {
    /// Run directories to summarize.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    LayerRatesByEps,
    ClientHistograms,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    /// Task spec (TOML); defaults apply to missing fields.
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    /// Split index; distinct splits are independent draws.
    #[arg(long, default_value_t = 0)]
    split: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(required = true)]
    files: Vec<PathBuf>,
    /// Treat the files as grid files.
    #[arg(long)]
    grid: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum StudyKind {
    Forecast,
    OperatingPoint,
}

#[derive(Args)]
struct SensitivityArgs {
    #[arg(long, value_enum)]
    kind: StudyKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Monte-Carlo draws (forecast) or trials (operating point).
    #[arg(long, default_value_t = 500)]
    draws: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Validation(Vec<String>),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Validation(v) => Failure::Validation(v),
            e => Failure::Runtime(e),
        }
    }
}

type CliResult = Result<(), Failure>;

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| {
        Failure::Runtime(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn emit(text: &str, out: Option<&Path>) -> CliResult {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| {
            Failure::Runtime(Error::Io {
                path: p.to_path_buf(),
                source: e,
            })
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_spec(path: &Path) -> Result<ExperimentSpec, Failure> {
    validate_spec(&read(path)?).map_err(|v| {
        Failure::Validation(
            v.into_iter()
                .map(|m| format!("{}: {m}", path.display()))
                .collect(),
        )
    })
}

fn cmd_run(a: RunArgs) -> CliResult {
    let mut spec = load_spec(&a.spec)?;
    a.overrides.apply(&mut spec);
    let reference_logs = match &a.reference {
        Some(dir) => {
            let rs = spec_from_run(dir)?;
            if rs.dp.enabled {
                return Err(Failure::Validation(vec![format!(
                    "reference run {} has DP enabled",
                    dir.display()
                )]));
            }
            spec.reference = Some(rs.id);
            Some(eval::read_logs(dir)?)
        }
        None if spec.metrics => {
            return Err(Failure::Validation(vec![format!(
                "{} requests paired metrics; pass --reference <run dir> of {}",
                a.spec.display(),
                spec.reference.as_deref().unwrap_or("the reference")
            )]))
        }
        None => None,
    };
    spec.validate()?;
    fs::create_dir_all(&a.out).map_err(|e| {
        Failure::Runtime(Error::Io {
            path: a.out.clone(),
            source: e,
        })
    })?;
    let out = run_experiment(&spec, Some(&a.out), a.force)?;
    let row = summarize(&spec, &out.logs, reference_logs.as_deref())?;
    eprintln!("run directory: {}", out.dir.as_ref().unwrap().display());
    emit(&to_csv(&[row])?, None)
}

fn cmd_grid(a: GridArgs) -> CliResult {
    let mut specs = expand_grid(&read(&a.grid)?).map_err(|v| {
        Failure::Validation(
            v.into_iter()
                .map(|m| format!("{}: {m}", a.grid.display()))
                .collect(),
        )
    })?;
    if let Some(seed) = a.seed {
        specs.iter_mut().for_each(|s| s.seed = seed);
    }
    fs::create_dir_all(&a.out).map_err(|e| {
        Failure::Runtime(Error::Io {
            path: a.out.clone(),
            source: e,
        })
    })?;
    let g = run_grid(&specs, Some(&a.out), a.force)?;
    eprintln!(
        "summary: {}",
        a.out.join(ratedp::experiment::SUMMARY_FILE).display()
    );
    emit(&g.summary_csv, None)
}

fn cmd_metrics(a: MetricsArgs) -> CliResult {
    let reference = a.reference.as_deref().map(eval::read_logs).transpose()?;
    let mut rows = Vec::new();
    for dir in &a.runs {
        let spec = spec_from_run(dir)?;
        let logs = eval::read_logs(dir)?;
        rows.push(summarize(&spec, &logs, reference.as_deref())?);
    }
    emit(&to_csv(&rows)?, a.out.as_deref())
}

fn cmd_plot(a: PlotArgs) -> CliResult {
    let kind = match a.kind {
        Kind::LayerRatesByEps => PlotKind::LayerRatesByEps,
        Kind::ClientHistograms => PlotKind::ClientHistograms,
    };
    emit(&emit_plot_data(&a.runs, kind)?, a.out.as_deref())
}

fn cmd_gen(a: GenArgs) -> CliResult {
    let mut task: TaskSpec = match &a.task {
        Some(p) => toml::from_str(&read(p)?)
            .map_err(|e| Failure::Validation(vec![format!("{}: {e}", p.display())]))?,
        None => TaskSpec::default(),
    };
    if let Some(s) = a.seed {
        task.seed = s;
    }
    if let Some(n) = a.samples_per_class {
        task.samples_per_class = n;
    }
    let bad = task.violations();
    if !bad.is_empty() {
        return Err(Failure::Validation(bad));
    }
    let ds = generate_split(&task, a.split)?;
    save_spike_file(&ds, &a.out)?;
    eprintln!(
        "wrote {} samples x {} steps x {} channels to {}",
        ds.len(),
        ds.steps(),
        ds.channels(),
        a.out.display()
    );
    Ok(())
}

fn cmd_validate(a: ValidateArgs) -> CliResult {
    let mut bad = Vec::new();
    for f in &a.files {
        let text = read(f)?;
        let result = if a.grid {
            expand_grid(&text).map(|cells| format!("{} cells", cells.len()))
        } else {
            validate_spec(&text).map(|s| format!("spec {}", s.id))
        };
        match result {
            Ok(what) => println!("{}: ok ({what})", f.display()),
            Err(v) => bad.extend(v.into_iter().map(|m| format!("{}: {m}", f.display()))),
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Failure::Validation(bad))
    }
}

fn cmd_sensitivity(a: SensitivityArgs) -> CliResult {
    let csv = match a.kind {
        StudyKind::Forecast => {
            let rows = forecast_study(
                &[(0.5, 1.0), (1.0, 1.0), (2.0, 0.5), (1.0, 2.0)],
                0.1,
                a.draws,
                a.seed,
            )?;
            comparison_csv(&rows)?
        }
        StudyKind::OperatingPoint => {
            let mus = [0.04, 0.07, 0.1, 0.13, 0.2];
            let vars = [0.001, 0.004, 0.01, 0.03, 0.1];
            to_csv(&operating_point_study(
                &LifConfig::default(),
                &mus,
                &vars,
                400,
                a.draws,
                a.seed,
            )?)?
        }
    };
    emit(&csv, a.out.as_deref())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Grid(a) => cmd_grid(a),
        Cmd::Metrics(a) => cmd_metrics(a),
        Cmd::PlotData(a) => cmd_plot(a),
        Cmd::GenData(a) => cmd_gen(a),
        Cmd::Validate(a) => cmd_validate(a),
        Cmd::Sensitivity(a) => cmd_sensitivity(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(v)) => {
            eprintln!("validation failed:");
            for m in v {
                eprintln!("  {m}");
            }
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
