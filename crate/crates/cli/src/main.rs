//! `wsad`: prepare datasets, run multi-seed experiments, ablations and label
//! sweeps, and generate synthetic data.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use wsad_core::dataset::{load_dataset, Dataset, SplitConfig};
use wsad_core::experiment::{
    ablate, read_reports, replay, run_experiment, sweep_labels, write_outputs, DataSource,
    ExperimentSpec, MetricRecord, RunReport, Suite,
};
use wsad_core::scorer::FactorMask;
use wsad_core::synth::SynthConfig;
use wsad_core::trainer::Variant;

/// Label budgets swept when `--n-labeled` is not given.
const SWEEP_BUDGETS: [usize; 4] = [30, 60, 90, 120];

#[derive(Parser)]
#[command(
    name = "wsad",
    version,
    about = "Weakly-supervised anomaly detection experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Preprocess a CSV into a binary dataset cache.
    Prepare(PrepareArgs),
    /// Train and evaluate over several seeds.
    Run(ExperimentArgs),
    /// Compare variants of one ablation suite.
    Ablate {
        #[arg(long, value_parser = parse_suite)]
        suite: Suite,
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Repeat the experiment for each labeled-anomaly budget.
    SweepLabels(ExperimentArgs),
    /// Write a synthetic manifold dataset as CSV.
    SynthGen(SynthArgs),
    /// Re-run every report stored in a `.json` results file.
    Replay {
        report: PathBuf,
        #[arg(long, env = "WSAD_OUT_DIR", default_value = "results")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct PrepareArgs {
    /// Raw CSV, or an existing `.bin` cache.
    #[arg(long)]
    dataset: PathBuf,
    /// TOML schema describing the label and column types.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Cache path; defaults to the dataset path with a `.bin` extension.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// CSV file, `.bin` cache, or `synthetic` for the bundled generator.
    #[arg(long)]
    dataset: String,
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Output directory for tables and records.
    #[arg(long, env = "WSAD_OUT_DIR", default_value = "results")]
    out: PathBuf,
    /// Base seed; run i uses seed + i.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    a0: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Labeled anomalies per run; a comma-separated list for sweeps.
    #[arg(long, value_delimiter = ',')]
    n_labeled: Vec<usize>,
    #[arg(long)]
    contamination: Option<f64>,
    /// Encoding factors fed to the scorer, e.g. `h,r,e` or `e`.
    #[arg(long, value_parser = parse_factors)]
    factors: Option<FactorMask>,
    /// full, no-pretrain, no-error-term, first-layer-error or reconstruction-only.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long)]
    stage1_epochs: Option<usize>,
    #[arg(long)]
    stage2_epochs: Option<usize>,
    /// Learning rate for both stages.
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    normals: Option<usize>,
    #[arg(long)]
    anomalies: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    intrinsic_dim: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse().map_err(|e: wsad_core::Error| e.to_string())
}

fn parse_factors(s: &str) -> Result<FactorMask, String> {
    s.parse().map_err(|e: wsad_core::Error| e.to_string())
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: wsad_core::Error| e.to_string())
}

impl ExperimentArgs {
    fn source(&self) -> DataSource {
        if self.dataset == "synthetic" {
            DataSource::Synthetic(SynthConfig::default())
        } else {
            DataSource::File {
                path: PathBuf::from(&self.dataset),
                schema: self.schema.clone(),
            }
        }
    }

    fn spec(&self, default_budgets: &[usize]) -> ExperimentSpec {
        let mut spec = ExperimentSpec::new(self.source());
        let t = &mut spec.train;
        set(&mut t.seed, self.seed);
        set(&mut t.margin, self.a0);
        set(&mut t.lambda, self.lambda);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.factors, self.factors);
        set(&mut t.variant, self.variant);
        set(&mut t.stage1_epochs, self.stage1_epochs);
        set(&mut t.stage2_epochs, self.stage2_epochs);
        set(&mut t.pretrain_lr, self.lr);
        set(&mut t.joint_lr, self.lr);
        set(&mut spec.n_runs, self.runs);
        set(&mut spec.contamination, self.contamination);
        spec.label_budgets = if self.n_labeled.is_empty() {
            default_budgets.to_vec()
        } else {
            self.n_labeled.clone()
        };
        spec.out_dir = Some(self.out.clone());
        spec
    }
}

fn default_budget() -> [usize; 1] {
    [SplitConfig::default().n_labeled]
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn describe(ds: &Dataset) -> String {
    format!(
        "D={} N={} anomalies={} ({:.2}%)",
        ds.dim(),
        ds.len(),
        ds.n_anomalies(),
        100.0 * ds.n_anomalies() as f64 / ds.len() as f64
    )
}

fn is_cache(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "bin")
}

fn prepare(args: &PrepareArgs) -> Result<()> {
    let ds = load_dataset(&args.dataset, args.schema.as_deref())?;
    println!("{}: {}", args.dataset.display(), describe(&ds));
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.dataset.with_extension("bin"));
    if is_cache(&args.dataset) && out == args.dataset {
        println!("already prepared");
        return Ok(());
    }
    if out.exists() && Dataset::load_cache(&out).is_ok_and(|old| old == ds) {
        println!("{} is up to date", out.display());
        return Ok(());
    }
    ds.save_cache(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn load(spec: &ExperimentSpec) -> Result<Dataset> {
    let ds = spec.data.load()?;
    println!("{}: {}", spec.data.name(), describe(&ds));
    Ok(ds)
}

fn emit(
    spec_out: &Path,
    stem: &str,
    records: &[MetricRecord],
    table: &str,
    reports: &[RunReport],
) -> Result<()> {
    print!("{table}");
    let files = write_outputs(spec_out, stem, records, table, reports)
        .with_context(|| format!("writing results to {}", spec_out.display()))?;
    println!(
        "wrote {}, {}, {}",
        files.metrics.display(),
        files.table.display(),
        files.reports.display()
    );
    Ok(())
}

fn synth_gen(args: &SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig::default();
    set(&mut cfg.normals, args.normals);
    set(&mut cfg.anomalies, args.anomalies);
    set(&mut cfg.dim, args.dim);
    set(&mut cfg.intrinsic_dim, args.intrinsic_dim);
    set(&mut cfg.noise, args.noise);
    set(&mut cfg.seed, args.seed);
    let table = cfg.generate_table()?;
    let file =
        File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut w = BufWriter::new(file);
    table.write_csv(&mut w)?;
    w.flush()?;
    println!(
        "wrote {} ({} rows, {} anomalies, {} features)",
        args.out.display(),
        cfg.normals + cfg.anomalies,
        cfg.anomalies,
        cfg.dim
    );
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(args) => prepare(&args),
        Command::Run(args) => {
            let spec = args.spec(&default_budget());
            let ds = load(&spec)?;
            let report = run_experiment(&spec, &ds)?;
            let stem = format!("{}-run", spec.data.name());
            emit(
                &args.out,
                &stem,
                &report.metric_records(),
                &report.to_text(),
                std::slice::from_ref(&report),
            )
        }
        Command::Ablate { suite, exp } => {
            let spec = exp.spec(&default_budget());
            let ds = load(&spec)?;
            let table = ablate(&spec, &ds, suite)?;
            let stem = format!("{}-{suite}", spec.data.name());
            emit(
                &exp.out,
                &stem,
                &table.metric_records(),
                &table.to_text(),
                &table.reports,
            )
        }
        Command::SweepLabels(args) => {
            let spec = args.spec(&SWEEP_BUDGETS);
            let ds = load(&spec)?;
            let sweep = sweep_labels(&spec, &ds)?;
            let stem = format!("{}-labels", spec.data.name());
            emit(
                &args.out,
                &stem,
                &sweep.metric_records(),
                &sweep.to_text(),
                &sweep.comparison.reports,
            )
        }
        Command::SynthGen(args) => synth_gen(&args),
        Command::Replay { report, out } => {
            let stored = read_reports(&report)?;
            let mut fresh = Vec::with_capacity(stored.len());
            for r in &stored {
                let again = replay(r)?;
                let same = again.metric_records() == r.metric_records();
                println!(
                    "{}: {}",
                    r.name,
                    if same { "reproduced" } else { "DIFFERS" }
                );
                fresh.push(again);
            }
            let records: Vec<MetricRecord> =
                fresh.iter().flat_map(RunReport::metric_records).collect();
            let table: String = fresh.iter().map(RunReport::to_text).collect();
            let stem = report.file_stem().map_or_else(
                || "replay".into(),
                |s| format!("{}-replay", s.to_string_lossy()),
            );
            emit(&out, &stem, &records, &table, &fresh)
        }
    }
}

/// 2 for bad arguments or configuration, 3 for unreadable or invalid data,
/// 4 for training divergence, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<wsad_core::Error>() {
            return match e.root() {
                _ if e.is_divergence() => 4,
                _ if e.is_data_error() => 3,
                wsad_core::Error::InvalidConfig(_) | wsad_core::Error::InvalidArgument(_) => 2,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stdout)
        .format(|buf, record| {
            if record.level() == log::Level::Info {
                writeln!(buf, "{}", record.args())
            } else {
                writeln!(
                    buf,
                    "{}: {}",
                    record.level().as_str().to_lowercase(),
                    record.args()
                )
            }
        })
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
