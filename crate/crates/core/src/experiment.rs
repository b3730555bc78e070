//! Multi-seed runs, ablation suites and label-budget sweeps.
//!
//! Run `i` of an experiment uses seed `base + i`, where the base is the
//! training config's seed. That seed drives both the train/test split and the
//! model, so a [`RunReport`] (data source, resolved config, seeds) is enough to
//! replay every number in it.

use std::fmt::{self, Write as _};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_dataset, make_weak_split, Dataset, SplitConfig};
use crate::error::{Error, Result};
use crate::losses::DEFAULT_MARGIN;
use crate::metrics::{aggregate_runs, evaluate, mean_std, Aggregate, EvalResult, MeanStd};
use crate::numerics::Rng;
use crate::scorer::FactorMask;
use crate::synth::SynthConfig;
use crate::trainer::{fit, StageTimings, TrainConfig, Variant};

/// Where an experiment's rows come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    /// A CSV (with optional TOML schema) or a prepared `.bin` cache.
    File {
        path: PathBuf,
        schema: Option<PathBuf>,
    },
    Synthetic(SynthConfig),
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::File { path, schema } => load_dataset(path, schema.as_deref()),
            DataSource::Synthetic(cfg) => cfg.generate(),
        }
    }

    /// Short name used to label outputs.
    pub fn name(&self) -> String {
        match self {
            DataSource::File { path, .. } => path
                .file_stem()
                .map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned()),
            DataSource::Synthetic(_) => "synthetic".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub data: DataSource,
    /// Training settings; `train.seed` is the base seed of run 0.
    pub train: TrainConfig,
    pub n_runs: usize,
    /// Labeled-anomaly budgets. Single runs and ablations use the first.
    pub label_budgets: Vec<usize>,
    pub contamination: f64,
    pub test_fraction: f64,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn new(data: DataSource) -> Self {
        let split = SplitConfig::default();
        Self {
            data,
            train: TrainConfig::default(),
            n_runs: 10,
            label_budgets: vec![split.n_labeled],
            contamination: split.contamination,
            test_fraction: split.test_fraction,
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_runs == 0 {
            return Err(Error::InvalidConfig("need at least one run".into()));
        }
        if self.label_budgets.is_empty() {
            return Err(Error::InvalidConfig("label budget grid is empty".into()));
        }
        self.train.validate()?;
        self.split(self.label_budgets[0]).validate()
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_runs as u64)
            .map(|i| self.train.seed.wrapping_add(i))
            .collect()
    }

    fn split(&self, n_labeled: usize) -> SplitConfig {
        SplitConfig {
            n_labeled,
            contamination: self.contamination,
            test_fraction: self.test_fraction,
        }
    }
}

/// One seed's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    /// Labeled anomalies actually used after clamping.
    pub n_labeled: usize,
    pub hidden_anomalies: usize,
    pub eval: EvalResult,
    pub timings: StageTimings,
}

/// Everything needed to reproduce a group of runs, plus their results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub data: DataSource,
    pub config: TrainConfig,
    pub split: SplitConfig,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunRecord>,
    pub aggregate: Aggregate,
}

/// Line-delimited result record. Timings are left out so that repeated runs
/// produce identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
pub enum MetricRecord {
    Run {
        experiment: String,
        run: usize,
        seed: u64,
        n_labeled: usize,
        auc_roc: f64,
        auc_pr: f64,
        n_pos: usize,
        n_neg: usize,
    },
    Aggregate {
        experiment: String,
        runs: usize,
        auc_roc_mean: f64,
        auc_roc_std: f64,
        auc_pr_mean: f64,
        auc_pr_std: f64,
    },
    Curve {
        experiment: String,
        budget: usize,
        n_labeled: usize,
        auc_roc_mean: f64,
        auc_roc_std: f64,
        auc_pr_mean: f64,
        auc_pr_std: f64,
    },
}

impl RunReport {
    pub fn metric_records(&self) -> Vec<MetricRecord> {
        let mut out: Vec<MetricRecord> = self
            .runs
            .iter()
            .map(|r| MetricRecord::Run {
                experiment: self.name.clone(),
                run: r.run,
                seed: r.seed,
                n_labeled: r.n_labeled,
                auc_roc: r.eval.auc_roc,
                auc_pr: r.eval.auc_pr,
                n_pos: r.eval.n_pos,
                n_neg: r.eval.n_neg,
            })
            .collect();
        out.push(MetricRecord::Aggregate {
            experiment: self.name.clone(),
            runs: self.aggregate.runs,
            auc_roc_mean: self.aggregate.auc_roc.mean,
            auc_roc_std: self.aggregate.auc_roc.std,
            auc_pr_mean: self.aggregate.auc_pr.mean,
            auc_pr_std: self.aggregate.auc_pr.std,
        });
        out
    }

    /// Per-run table followed by the mean ± deviation line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} ({} runs)", self.name, self.runs.len());
        let _ = writeln!(
            s,
            "{:>4} {:>20} {:>8} {:>8} {:>8} {:>9} {:>9}",
            "run", "seed", "labeled", "AUC-ROC", "AUC-PR", "stage1 s", "stage2 s"
        );
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{:>4} {:>20} {:>8} {:>8.4} {:>8.4} {:>9.2} {:>9.2}",
                r.run,
                r.seed,
                r.n_labeled,
                r.eval.auc_roc,
                r.eval.auc_pr,
                r.timings.pretrain_seconds,
                r.timings.joint_seconds
            );
        }
        let _ = writeln!(
            s,
            "mean AUC-ROC {}  AUC-PR {}",
            pm(&self.aggregate.auc_roc),
            pm(&self.aggregate.auc_pr)
        );
        s
    }
}

fn pm(m: &MeanStd) -> String {
    format!("{:.3}±{:.3}", m.mean, m.std)
}

/// Writes records as one JSON object per line.
pub fn write_jsonl<W: Write>(mut w: W, records: &[MetricRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn run_one(
    ds: &Dataset,
    split_cfg: &SplitConfig,
    cfg: &TrainConfig,
    run: usize,
    seed: u64,
) -> Result<RunRecord> {
    let inner = || -> Result<RunRecord> {
        let split = make_weak_split(ds, split_cfg, &mut Rng::new(seed))?;
        let cfg = TrainConfig {
            seed,
            ..cfg.clone()
        };
        let fitted = fit(&ds.features, &split, &cfg)?;
        let scores = fitted.model.predict_scores(&ds.rows(&split.test))?;
        let eval = evaluate(&scores, &ds.labels_of(&split.test))?;
        log::info!(
            "run={run} seed={seed} auc_roc={:.6} auc_pr={:.6}",
            eval.auc_roc,
            eval.auc_pr
        );
        Ok(RunRecord {
            run,
            seed,
            n_labeled: split.n_labeled,
            hidden_anomalies: split.hidden_anomalies,
            eval,
            timings: fitted.timings,
        })
    };
    inner().map_err(|e| Error::Run {
        run,
        seed,
        error: Box::new(e),
    })
}

/// A named group of runs: one config, one split setting, many seeds.
struct Job {
    name: String,
    config: TrainConfig,
    split: SplitConfig,
}

/// Runs every (job, seed) pair in parallel and assembles reports in job order.
fn run_jobs(
    data: &DataSource,
    ds: &Dataset,
    jobs: Vec<Job>,
    seeds: &[u64],
) -> Result<Vec<RunReport>> {
    for job in &jobs {
        job.config.validate()?;
        job.split.validate()?;
    }
    let cells: Vec<(usize, usize)> = (0..jobs.len())
        .flat_map(|j| (0..seeds.len()).map(move |r| (j, r)))
        .collect();
    let records = cells
        .par_iter()
        .map(|&(j, r)| run_one(ds, &jobs[j].split, &jobs[j].config, r, seeds[r]))
        .collect::<Result<Vec<_>>>()?;
    let mut records = records.into_iter();
    jobs.into_iter()
        .map(|job| {
            let runs: Vec<RunRecord> = records.by_ref().take(seeds.len()).collect();
            let evals: Vec<EvalResult> = runs.iter().map(|r| r.eval).collect();
            Ok(RunReport {
                name: job.name,
                data: data.clone(),
                config: job.config,
                split: job.split,
                seeds: seeds.to_vec(),
                runs,
                aggregate: aggregate_runs(&evals)?,
            })
        })
        .collect()
}

/// `n_runs` fresh splits and fits with the first label budget.
pub fn run_experiment(spec: &ExperimentSpec, ds: &Dataset) -> Result<RunReport> {
    spec.validate()?;
    let job = Job {
        name: spec.data.name(),
        config: spec.train.clone(),
        split: spec.split(spec.label_budgets[0]),
    };
    Ok(run_jobs(&spec.data, ds, vec![job], &spec.seeds())?.remove(0))
}

/// Re-executes a report from its stored source, config and seeds.
pub fn replay(report: &RunReport) -> Result<RunReport> {
    let ds = report.data.load()?;
    replay_on(report, &ds)
}

/// [`replay`] against an already-loaded dataset.
pub fn replay_on(report: &RunReport, ds: &Dataset) -> Result<RunReport> {
    let job = Job {
        name: report.name.clone(),
        config: report.config.clone(),
        split: report.split,
    };
    Ok(run_jobs(&report.data, ds, vec![job], &report.seeds)?.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Factors,
    ReconstructionOnly,
    LossTerm,
    MarginGrid,
    LambdaGrid,
    Pretrain,
    ErrorInjection,
}

pub const MARGIN_GRID: [f64; 9] = [0.1, 1.0, 3.0, 4.0, DEFAULT_MARGIN, 6.0, 7.0, 10.0, 20.0];
pub const LAMBDA_GRID: [f64; 5] = [0.1, 0.5, 1.0, 5.0, 10.0];

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::Factors,
        Suite::ReconstructionOnly,
        Suite::LossTerm,
        Suite::MarginGrid,
        Suite::LambdaGrid,
        Suite::Pretrain,
        Suite::ErrorInjection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Factors => "factors",
            Suite::ReconstructionOnly => "reconstructed-only",
            Suite::LossTerm => "loss-term",
            Suite::MarginGrid => "a0-grid",
            Suite::LambdaGrid => "lambda-grid",
            Suite::Pretrain => "pretrain",
            Suite::ErrorInjection => "e-injection",
        }
    }

    /// Labeled configs, each differing from `base` only along this suite's axis.
    pub fn variants(self, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        let with_variant = |v: Variant| TrainConfig {
            variant: v,
            ..base.clone()
        };
        let full = || with_variant(Variant::default());
        match self {
            Suite::Factors => ["h", "r", "e", "h,r", "h,e", "r,e", "h,r,e"]
                .iter()
                .map(|m| {
                    let factors: FactorMask = m.parse().expect("static mask");
                    let cfg = TrainConfig {
                        factors,
                        variant: Variant {
                            reconstruction_only: false,
                            ..base.variant
                        },
                        ..base.clone()
                    };
                    (format!("{{{m}}}"), cfg)
                })
                .collect(),
            Suite::ReconstructionOnly => vec![
                ("three factors".into(), full()),
                (
                    "reconstruction".into(),
                    with_variant(Variant {
                        reconstruction_only: true,
                        ..Variant::default()
                    }),
                ),
            ],
            Suite::LossTerm => vec![
                ("with error term".into(), full()),
                (
                    "without error term".into(),
                    with_variant(Variant {
                        no_error_term: true,
                        ..Variant::default()
                    }),
                ),
            ],
            Suite::MarginGrid => MARGIN_GRID
                .iter()
                .map(|&a| {
                    let cfg = TrainConfig {
                        margin: a,
                        ..base.clone()
                    };
                    (format!("a0={a}"), cfg)
                })
                .collect(),
            Suite::LambdaGrid => LAMBDA_GRID
                .iter()
                .map(|&l| {
                    let cfg = TrainConfig {
                        lambda: l,
                        ..base.clone()
                    };
                    (format!("lambda={l}"), cfg)
                })
                .collect(),
            Suite::Pretrain => vec![
                ("pretrained".into(), full()),
                (
                    "end-to-end".into(),
                    with_variant(Variant {
                        no_pretrain: true,
                        ..Variant::default()
                    }),
                ),
            ],
            Suite::ErrorInjection => vec![
                ("every layer".into(), full()),
                (
                    "first layer".into(),
                    with_variant(Variant {
                        first_layer_error_only: true,
                        ..Variant::default()
                    }),
                ),
            ],
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Suite::ALL.iter().map(|x| x.name()).collect();
                Error::invalid(format!(
                    "unknown ablation suite {s:?} (expected one of {})",
                    known.join(", ")
                ))
            })
    }
}

/// Several reports side by side, one column per report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub title: String,
    pub reports: Vec<RunReport>,
}

impl Comparison {
    pub fn to_text(&self) -> String {
        let cells = |f: fn(&Aggregate) -> &MeanStd| -> Vec<String> {
            self.reports.iter().map(|r| pm(f(&r.aggregate))).collect()
        };
        let header: Vec<String> = self.reports.iter().map(|r| r.name.clone()).collect();
        let rows = [
            ("AUC-ROC", cells(|a| &a.auc_roc)),
            ("AUC-PR", cells(|a| &a.auc_pr)),
        ];
        let widths: Vec<usize> = header
            .iter()
            .enumerate()
            .map(|(i, h)| {
                rows.iter()
                    .map(|r| r.1[i].len())
                    .max()
                    .unwrap_or(0)
                    .max(h.len())
            })
            .collect();
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.title);
        let _ = write!(s, "{:<8}", "");
        for (h, w) in header.iter().zip(&widths) {
            let _ = write!(s, "  {h:>w$}");
        }
        s.push('\n');
        for (label, vals) in &rows {
            let _ = write!(s, "{label:<8}");
            for (v, w) in vals.iter().zip(&widths) {
                let _ = write!(s, "  {v:>w$}");
            }
            s.push('\n');
        }
        s
    }

    pub fn metric_records(&self) -> Vec<MetricRecord> {
        self.reports
            .iter()
            .flat_map(RunReport::metric_records)
            .collect()
    }
}

/// Runs every variant of `suite`, keeping every other setting of `spec`.
pub fn ablate(spec: &ExperimentSpec, ds: &Dataset, suite: Suite) -> Result<Comparison> {
    spec.validate()?;
    let split = spec.split(spec.label_budgets[0]);
    let jobs = suite
        .variants(&spec.train)
        .into_iter()
        .map(|(name, config)| Job {
            name,
            config,
            split,
        })
        .collect();
    Ok(Comparison {
        title: format!("{}: {} ablation", spec.data.name(), suite),
        reports: run_jobs(&spec.data, ds, jobs, &spec.seeds())?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub budget: usize,
    /// Smallest number of labels actually used across runs.
    pub n_labeled: usize,
    pub auc_roc: MeanStd,
    pub auc_pr: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSweep {
    pub comparison: Comparison,
    pub curve: Vec<CurvePoint>,
}

impl LabelSweep {
    pub fn metric_records(&self) -> Vec<MetricRecord> {
        let mut out = self.comparison.metric_records();
        let name = self
            .comparison
            .reports
            .first()
            .map_or_else(String::new, |r| r.data.name());
        out.extend(self.curve.iter().map(|p| MetricRecord::Curve {
            experiment: name.clone(),
            budget: p.budget,
            n_labeled: p.n_labeled,
            auc_roc_mean: p.auc_roc.mean,
            auc_roc_std: p.auc_roc.std,
            auc_pr_mean: p.auc_pr.mean,
            auc_pr_std: p.auc_pr.std,
        }));
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = self.comparison.to_text();
        let _ = writeln!(
            s,
            "\n{:>7} {:>8} {:>14} {:>14}",
            "budget", "labeled", "AUC-ROC", "AUC-PR"
        );
        for p in &self.curve {
            let _ = writeln!(
                s,
                "{:>7} {:>8} {:>14} {:>14}",
                p.budget,
                p.n_labeled,
                pm(&p.auc_roc),
                pm(&p.auc_pr)
            );
        }
        s
    }
}

/// One experiment per label budget, same seeds throughout.
pub fn sweep_labels(spec: &ExperimentSpec, ds: &Dataset) -> Result<LabelSweep> {
    spec.validate()?;
    let available = ds.n_anomalies();
    let jobs = spec
        .label_budgets
        .iter()
        .map(|&budget| {
            if budget > available {
                log::warn!("label budget {budget} exceeds the {available} anomalies in the data; it will be clamped");
            }
            Job {
                name: format!("labels={budget}"),
                config: spec.train.clone(),
                split: spec.split(budget),
            }
        })
        .collect();
    let reports = run_jobs(&spec.data, ds, jobs, &spec.seeds())?;
    let curve = reports
        .iter()
        .zip(&spec.label_budgets)
        .map(|(r, &budget)| {
            let rocs: Vec<f64> = r.runs.iter().map(|x| x.eval.auc_roc).collect();
            let prs: Vec<f64> = r.runs.iter().map(|x| x.eval.auc_pr).collect();
            Ok(CurvePoint {
                budget,
                n_labeled: r.runs.iter().map(|x| x.n_labeled).min().unwrap_or(0),
                auc_roc: mean_std(&rocs)?,
                auc_pr: mean_std(&prs)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabelSweep {
        comparison: Comparison {
            title: format!("{}: label budget sweep", spec.data.name()),
            reports,
        },
        curve,
    })
}

/// Files produced by [`write_outputs`].
#[derive(Debug, Clone)]
pub struct OutputFiles {
    pub metrics: PathBuf,
    pub table: PathBuf,
    pub reports: PathBuf,
}

/// Writes `<stem>.jsonl` (metric records), `<stem>.txt` (table) and
/// `<stem>.json` (full reports for replay) into `dir`.
pub fn write_outputs(
    dir: &Path,
    stem: &str,
    records: &[MetricRecord],
    table: &str,
    reports: &[RunReport],
) -> Result<OutputFiles> {
    std::fs::create_dir_all(dir)?;
    let files = OutputFiles {
        metrics: dir.join(format!("{stem}.jsonl")),
        table: dir.join(format!("{stem}.txt")),
        reports: dir.join(format!("{stem}.json")),
    };
    let mut buf = Vec::new();
    write_jsonl(&mut buf, records)?;
    std::fs::write(&files.metrics, buf)?;
    std::fs::write(&files.table, table)?;
    std::fs::write(&files.reports, serde_json::to_vec_pretty(reports)?)?;
    Ok(files)
}

/// Reads reports written by [`write_outputs`].
pub fn read_reports(path: &Path) -> Result<Vec<RunReport>> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
