//! Two-stage training.
//!
//! Stage 1 fits the autoencoder alone on the unlabeled pool with an RMSE
//! objective. Stage 2 trains autoencoder and scorer end to end on balanced
//! batches: half drawn from the unlabeled pool (taken as normal, without
//! replacement within an epoch) and half from the labeled anomalies (with
//! replacement, so the few labels are oversampled). An epoch of stage 2 is
//! one pass over the unlabeled pool.
//!
//! Each stage stops at its epoch cap or once the epoch-mean training loss
//! fails to improve by `min_improvement` for `patience` consecutive epochs.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::dataset::WeakLabelSplit;
use crate::encoder::{AutoencoderArch, AutoencoderParams, EncodingGrads};
use crate::error::{Error, Result};
use crate::losses::{joint_loss, pretrain_loss, LossTerms, DEFAULT_LAMBDA, DEFAULT_MARGIN};
use crate::model::Model;
use crate::numerics::{
    Matrix, OptimizerConfig, OptimizerKind, OptimizerState, Parameters, Rng, RngState,
};
use crate::scorer::{FactorMask, ScoreNetParams, ScorerLayout};

/// Log target for per-epoch `key=value` progress lines.
pub const PROGRESS_TARGET: &str = "wsad::progress";

const INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const CHECKPOINT_MAGIC: &[u8; 8] = b"WSADCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Ablation switches. Any combination may be set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Variant {
    /// Skip stage 1; the autoencoder starts from its random initialization.
    pub no_pretrain: bool,
    /// Drop the reconstruction-error term from the joint loss.
    pub no_error_term: bool,
    /// Feed `e` once as an input column instead of into every layer.
    pub first_layer_error_only: bool,
    /// Score the reconstruction `x̂` with a plain MLP.
    pub reconstruction_only: bool,
}

impl Variant {
    pub const NAMES: [&'static str; 5] = [
        "full",
        "no-pretrain",
        "no-error-term",
        "first-layer-error",
        "reconstruction-only",
    ];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.no_pretrain, "no-pretrain"),
            (self.no_error_term, "no-error-term"),
            (self.first_layer_error_only, "first-layer-error"),
            (self.reconstruction_only, "reconstruction-only"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if names.is_empty() {
            f.write_str("full")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut v = Variant::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "full" => {}
                "no-pretrain" => v.no_pretrain = true,
                "no-error-term" => v.no_error_term = true,
                "first-layer-error" => v.first_layer_error_only = true,
                "reconstruction-only" => v.reconstruction_only = true,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown variant '{other}' (expected one of {})",
                        Variant::NAMES.join(", ")
                    )))
                }
            }
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Score margin for labeled anomalies.
    pub margin: f64,
    /// Weight of the reconstruction-error term.
    pub lambda: f64,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub pretrain_lr: f64,
    pub joint_lr: f64,
    pub optimizer: OptimizerKind,
    /// Epochs without improvement before a stage stops; 0 disables.
    pub patience: usize,
    pub min_improvement: f64,
    pub seed: u64,
    pub factors: FactorMask,
    pub variant: Variant,
    pub scorer_hidden: Vec<usize>,
    /// Encoder hidden widths; the decoder mirrors them.
    pub encoder_hidden: Option<Vec<usize>>,
    pub latent_dim: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            lambda: DEFAULT_LAMBDA,
            batch_size: 256,
            stage1_epochs: 100,
            stage2_epochs: 200,
            pretrain_lr: 1e-3,
            joint_lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            patience: 10,
            min_improvement: 1e-5,
            seed: 0,
            factors: FactorMask::ALL,
            variant: Variant::default(),
            scorer_hidden: vec![64, 32],
            encoder_hidden: None,
            latent_dim: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return bad(format!(
                "batch size must be even and at least 2, got {}",
                self.batch_size
            ));
        }
        if self.factors.is_empty() {
            return bad("factor mask must not be empty".into());
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return bad(format!("margin must be positive, got {}", self.margin));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        for (name, lr) in [("pretrain", self.pretrain_lr), ("joint", self.joint_lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("{name} learning rate must be positive, got {lr}"));
            }
        }
        if self.scorer_hidden.contains(&0) {
            return bad("scorer hidden widths must be positive".into());
        }
        if self.variant.reconstruction_only && self.variant.first_layer_error_only {
            return bad("reconstruction-only and first-layer-error variants are exclusive".into());
        }
        Ok(())
    }

    pub fn arch(&self, input_dim: usize) -> AutoencoderArch {
        let mut arch = AutoencoderArch::default_for(input_dim);
        if let Some(h) = &self.encoder_hidden {
            arch.hidden = h.clone();
        }
        if let Some(d) = self.latent_dim {
            arch.latent_dim = d;
        }
        arch
    }

    pub fn layout(&self) -> ScorerLayout {
        if self.variant.reconstruction_only {
            ScorerLayout::reconstruction_only()
        } else {
            ScorerLayout::from_mask(self.factors, self.variant.first_layer_error_only)
        }
    }

    /// Lambda actually applied; zero when the error term is switched off.
    pub fn effective_lambda(&self) -> f64 {
        if self.variant.no_error_term {
            0.0
        } else {
            self.lambda
        }
    }

    fn optimizer_config(&self, lr: f64) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            ..OptimizerConfig::default()
        }
        .with_lr(lr)
    }

    /// Fresh, untrained model for `input_dim` features.
    pub fn init_model(&self, input_dim: usize) -> Result<Model> {
        self.validate()?;
        let arch = self.arch(input_dim);
        let mut rng = Rng::new(self.seed).fork(INIT_STREAM);
        let ae = AutoencoderParams::new(&arch, &mut rng)?;
        let scorer = ScoreNetParams::new(
            self.layout(),
            input_dim,
            arch.latent_dim,
            &self.scorer_hidden,
            &mut rng,
        )?;
        Model::new(ae, scorer)
    }
}

/// Row indices for one stage-2 step; the first half is treated as normal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BalancedBatch {
    pub unlabeled: Vec<usize>,
    pub anomalies: Vec<usize>,
}

impl BalancedBatch {
    pub fn len(&self) -> usize {
        self.unlabeled.len() + self.anomalies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn indices(&self) -> Vec<usize> {
        self.unlabeled
            .iter()
            .chain(&self.anomalies)
            .copied()
            .collect()
    }

    pub fn labels(&self) -> Vec<bool> {
        let mut y = vec![false; self.unlabeled.len()];
        y.resize(self.len(), true);
        y
    }
}

fn check_pools(split: &WeakLabelSplit) -> Result<()> {
    if split.train_labeled_anomalies.is_empty() {
        return Err(Error::InvalidConfig(
            "no labeled anomalies: training without labels is not supported".into(),
        ));
    }
    if split.train_unlabeled.is_empty() {
        return Err(Error::InvalidConfig(
            "unlabeled training pool is empty".into(),
        ));
    }
    Ok(())
}

fn draw_anomalies(pool: &[usize], n: usize, rng: &mut Rng) -> Vec<usize> {
    (0..n).map(|_| pool[rng.below(pool.len())]).collect()
}

/// One balanced batch drawn uniformly: unlabeled rows without replacement,
/// anomalies with replacement. A pool smaller than half the batch is used
/// whole, with the anomaly half shrunk to match.
pub fn sample_balanced_batch(
    split: &WeakLabelSplit,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<BalancedBatch> {
    check_pools(split)?;
    if batch_size < 2 || batch_size % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "batch size must be even and at least 2, got {batch_size}"
        )));
    }
    let mut pool = split.train_unlabeled.clone();
    let half = (batch_size / 2).min(pool.len());
    for i in 0..half {
        let j = i + rng.below(pool.len() - i);
        pool.swap(i, j);
    }
    pool.truncate(half);
    let anomalies = draw_anomalies(&split.train_labeled_anomalies, half, rng);
    Ok(BalancedBatch {
        unlabeled: pool,
        anomalies,
    })
}

/// The balanced batches of one stage-2 epoch: the shuffled unlabeled pool cut
/// into half-batches, each paired with as many anomaly draws.
pub fn epoch_batches(
    split: &WeakLabelSplit,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<BalancedBatch>> {
    check_pools(split)?;
    let half = batch_size / 2;
    if half == 0 {
        return Err(Error::InvalidConfig(format!(
            "batch size must be even and at least 2, got {batch_size}"
        )));
    }
    let mut order = split.train_unlabeled.clone();
    rng.shuffle(&mut order);
    Ok(order
        .chunks(half)
        .map(|chunk| BalancedBatch {
            unlabeled: chunk.to_vec(),
            anomalies: draw_anomalies(&split.train_labeled_anomalies, chunk.len(), rng),
        })
        .collect())
}

/// Gradients of one joint step.
#[derive(Debug, Clone)]
pub struct JointStep {
    pub grads: Model,
    pub terms: LossTerms,
    /// Loss gradient on each sample's reconstruction error from the
    /// error term alone (already scaled by lambda).
    pub error_term_grads: Vec<f64>,
}

/// Joint loss and its gradient for every parameter of `model` on one batch.
pub fn joint_gradients(
    model: &Model,
    x: &Matrix,
    labels: &[bool],
    cfg: &TrainConfig,
) -> Result<JointStep> {
    let fwd = model.forward(x)?;
    let loss = joint_loss(
        &fwd.scoring.scores,
        &fwd.encoding.errors,
        labels,
        cfg.margin,
        cfg.effective_lambda(),
    )?;
    let sb = model.scorer.backward(&fwd.scoring, &loss.dscores)?;
    let m = model.autoencoder.input_dim();
    let d = model.autoencoder.latent_dim();
    let mut up = model.scorer.layout.split_grads(&sb.input, sb.errors, m, d);
    up.e = Some(match up.e.take() {
        Some(mut de) => {
            for (g, l) in de.iter_mut().zip(&loss.derrors) {
                *g += l;
            }
            de
        }
        None => loss.derrors.clone(),
    });
    let ab = model.autoencoder.backward(&fwd.encoding, &up)?;
    Ok(JointStep {
        grads: Model {
            autoencoder: ab.params,
            scorer: sb.params,
        },
        terms: loss.terms,
        error_term_grads: loss.derrors,
    })
}

/// Autoencoder gradient contributed by the error term alone.
pub fn error_term_param_grads(
    model: &Model,
    x: &Matrix,
    step: &JointStep,
) -> Result<AutoencoderParams> {
    let fwd = model.autoencoder.forward(x)?;
    let up = EncodingGrads {
        e: Some(step.error_term_grads.clone()),
        ..EncodingGrads::default()
    };
    Ok(model.autoencoder.backward(&fwd, &up)?.params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Joint,
    Done,
}

impl Stage {
    fn number(self) -> u8 {
        match self {
            Stage::Pretrain => 1,
            Stage::Joint => 2,
            Stage::Done => 3,
        }
    }

    fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::Pretrain),
            2 => Ok(Stage::Joint),
            3 => Ok(Stage::Done),
            _ => Err(Error::data(format!("unknown training stage {n}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub loss: f64,
    pub deviation: Option<f64>,
    pub error: Option<f64>,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "stage={} epoch={} loss={:.9}",
            self.stage, self.epoch, self.loss
        )?;
        if let (Some(d), Some(e)) = (self.deviation, self.error) {
            write!(f, " deviation={d:.9} error={e:.9}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Plateau {
    best: f64,
    stale: usize,
}

impl Plateau {
    fn new() -> Self {
        Self {
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records an epoch loss; true once the stage should stop.
    fn observe(&mut self, loss: f64, min_improvement: f64, patience: usize) -> bool {
        if self.best - loss >= min_improvement {
            self.best = loss;
            self.stale = 0;
        } else {
            self.best = self.best.min(loss);
            self.stale += 1;
        }
        patience > 0 && self.stale >= patience
    }
}

/// Wall-clock seconds and epochs run per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub pretrain_seconds: f64,
    pub joint_seconds: f64,
    pub pretrain_epochs: usize,
    pub joint_epochs: usize,
}

/// Resumable training state, advanced one epoch at a time.
pub struct Trainer<'a> {
    features: &'a Matrix,
    split: &'a WeakLabelSplit,
    cfg: TrainConfig,
    model: Model,
    optimizer: OptimizerState,
    stage: Stage,
    epoch: usize,
    plateau: Plateau,
    rng: Rng,
    history: Vec<EpochLog>,
    timings: StageTimings,
}

impl<'a> Trainer<'a> {
    pub fn new(features: &'a Matrix, split: &'a WeakLabelSplit, cfg: TrainConfig) -> Result<Self> {
        let model = cfg.init_model(features.cols())?;
        let mut t = Self::assemble(features, split, cfg, model)?;
        let first = if t.cfg.variant.no_pretrain {
            Stage::Joint
        } else {
            Stage::Pretrain
        };
        t.enter(first);
        Ok(t)
    }

    fn assemble(
        features: &'a Matrix,
        split: &'a WeakLabelSplit,
        cfg: TrainConfig,
        model: Model,
    ) -> Result<Self> {
        check_pools(split)?;
        if let Some(&i) = split
            .train_unlabeled
            .iter()
            .chain(&split.train_labeled_anomalies)
            .find(|&&i| i >= features.rows())
        {
            return Err(Error::invalid(format!(
                "split references row {i} but the data has {} rows",
                features.rows()
            )));
        }
        let optimizer = OptimizerState::new(cfg.optimizer_config(cfg.pretrain_lr), &[]);
        Ok(Self {
            features,
            split,
            rng: Rng::new(cfg.seed).fork(TRAIN_STREAM),
            cfg,
            model,
            optimizer,
            stage: Stage::Done,
            epoch: 0,
            plateau: Plateau::new(),
            history: Vec::new(),
            timings: StageTimings::default(),
        })
    }

    fn enter(&mut self, stage: Stage) {
        let (stage, cap) = match stage {
            Stage::Pretrain => (Stage::Pretrain, self.cfg.stage1_epochs),
            Stage::Joint => (Stage::Joint, self.cfg.stage2_epochs),
            Stage::Done => (Stage::Done, 0),
        };
        if stage != Stage::Done && cap == 0 {
            let next = if stage == Stage::Pretrain {
                Stage::Joint
            } else {
                Stage::Done
            };
            return self.enter(next);
        }
        self.stage = stage;
        self.epoch = 0;
        self.plateau = Plateau::new();
        self.optimizer = match stage {
            Stage::Pretrain => OptimizerState::for_params(
                self.cfg.optimizer_config(self.cfg.pretrain_lr),
                &self.model.autoencoder,
            ),
            _ => OptimizerState::for_params(
                self.cfg.optimizer_config(self.cfg.joint_lr),
                &self.model,
            ),
        };
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn history(&self) -> &[EpochLog] {
        &self.history
    }

    pub fn timings(&self) -> StageTimings {
        self.timings
    }

    /// Runs one epoch of the current stage; `None` once training is done.
    pub fn step_epoch(&mut self) -> Result<Option<EpochLog>> {
        let started = Instant::now();
        let log = match self.stage {
            Stage::Done => return Ok(None),
            Stage::Pretrain => self.pretrain_epoch()?,
            Stage::Joint => self.joint_epoch()?,
        };
        let elapsed = started.elapsed().as_secs_f64();
        match self.stage {
            Stage::Pretrain => {
                self.timings.pretrain_seconds += elapsed;
                self.timings.pretrain_epochs += 1;
            }
            _ => {
                self.timings.joint_seconds += elapsed;
                self.timings.joint_epochs += 1;
            }
        }
        log::info!(target: PROGRESS_TARGET, "seed={} {log}", self.cfg.seed);
        self.history.push(log);
        self.epoch += 1;
        let (cap, next) = match self.stage {
            Stage::Pretrain => (self.cfg.stage1_epochs, Stage::Joint),
            _ => (self.cfg.stage2_epochs, Stage::Done),
        };
        let plateaued = self
            .plateau
            .observe(log.loss, self.cfg.min_improvement, self.cfg.patience);
        if self.epoch >= cap || plateaued {
            self.enter(next);
        }
        Ok(Some(log))
    }

    fn diverged(&self, loss: f64) -> Error {
        Error::Divergence {
            stage: self.stage.number(),
            epoch: self.epoch,
            loss,
        }
    }

    fn pretrain_epoch(&mut self) -> Result<EpochLog> {
        let mut order = self.split.train_unlabeled.clone();
        self.rng.shuffle(&mut order);
        let (mut total, mut rows) = (0.0, 0usize);
        for chunk in order.chunks(self.cfg.batch_size) {
            let x = self.features.select_rows(chunk);
            let fwd = self.model.autoencoder.forward(&x)?;
            let (loss, grad) = pretrain_loss(&fwd.residual)?;
            if !loss.is_finite() {
                return Err(self.diverged(loss));
            }
            let up = EncodingGrads {
                reconstruction: Some(grad),
                ..EncodingGrads::default()
            };
            let back = self.model.autoencoder.backward(&fwd, &up)?;
            self.optimizer
                .update(&mut self.model.autoencoder, &back.params)?;
            total += loss * chunk.len() as f64;
            rows += chunk.len();
        }
        let loss = total / rows as f64;
        if !loss.is_finite() || !self.model.autoencoder.is_finite() {
            return Err(self.diverged(loss));
        }
        Ok(EpochLog {
            stage: 1,
            epoch: self.epoch,
            loss,
            deviation: None,
            error: None,
        })
    }

    fn joint_epoch(&mut self) -> Result<EpochLog> {
        let batches = epoch_batches(self.split, self.cfg.batch_size, &mut self.rng)?;
        let (mut total, mut deviation, mut error, mut rows) = (0.0, 0.0, 0.0, 0usize);
        for batch in &batches {
            debug_assert_eq!(batch.unlabeled.len(), batch.anomalies.len());
            let x = self.features.select_rows(&batch.indices());
            let step = joint_gradients(&self.model, &x, &batch.labels(), &self.cfg)?;
            if !step.terms.total.is_finite() {
                return Err(self.diverged(step.terms.total));
            }
            self.optimizer.update(&mut self.model, &step.grads)?;
            let n = batch.len() as f64;
            total += step.terms.total * n;
            deviation += step.terms.deviation * n;
            error += step.terms.error * n;
            rows += batch.len();
        }
        let n = rows as f64;
        let loss = total / n;
        if !loss.is_finite() || !self.model.is_finite() {
            return Err(self.diverged(loss));
        }
        Ok(EpochLog {
            stage: 2,
            epoch: self.epoch,
            loss,
            deviation: Some(deviation / n),
            error: Some(error / n),
        })
    }

    /// Runs until the current stage changes.
    pub fn finish_stage(&mut self) -> Result<()> {
        let stage = self.stage;
        while self.stage == stage && self.step_epoch()?.is_some() {}
        Ok(())
    }

    pub fn run(mut self) -> Result<Fitted> {
        while self.step_epoch()?.is_some() {}
        Ok(Fitted {
            model: self.model,
            history: self.history,
            timings: self.timings,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            stage: self.stage,
            epoch: self.epoch,
            plateau_best: self.plateau.best,
            plateau_stale: self.plateau.stale,
            rng: self.rng.state(),
            optimizer: self.optimizer.clone(),
            model: self.model.clone(),
        }
    }

    /// Continues from a checkpoint taken on the same data and split.
    pub fn resume(
        features: &'a Matrix,
        split: &'a WeakLabelSplit,
        ckpt: Checkpoint,
    ) -> Result<Self> {
        ckpt.config.validate()?;
        if ckpt.model.input_dim() != features.cols() {
            return Err(Error::shape(
                "checkpoint features",
                (features.rows(), features.cols()),
                (features.rows(), ckpt.model.input_dim()),
            ));
        }
        let mut t = Self::assemble(features, split, ckpt.config, ckpt.model)?;
        t.stage = ckpt.stage;
        t.epoch = ckpt.epoch;
        t.plateau = Plateau {
            best: ckpt.plateau_best,
            stale: ckpt.plateau_stale,
        };
        t.rng = Rng::from_state(ckpt.rng);
        let expected = match t.stage {
            Stage::Pretrain => t.model.autoencoder.shapes(),
            _ => t.model.shapes(),
        };
        if ckpt.optimizer.config.kind == OptimizerKind::Adam
            && t.stage != Stage::Done
            && ckpt
                .optimizer
                .first_moment
                .iter()
                .map(|m| m.shape())
                .collect::<Vec<_>>()
                != expected
        {
            return Err(Error::data(
                "checkpoint optimizer state does not match the model",
            ));
        }
        t.optimizer = ckpt.optimizer;
        Ok(t)
    }
}

/// A trained model with its training record.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub model: Model,
    pub history: Vec<EpochLog>,
    pub timings: StageTimings,
}

/// Full two-stage training on one split.
pub fn fit(features: &Matrix, split: &WeakLabelSplit, cfg: &TrainConfig) -> Result<Fitted> {
    Trainer::new(features, split, cfg.clone())?.run()
}

/// Stage 1 only: the autoencoder after pretraining on the unlabeled pool.
pub fn pretrain(
    features: &Matrix,
    split: &WeakLabelSplit,
    cfg: &TrainConfig,
) -> Result<AutoencoderParams> {
    let cfg = TrainConfig {
        variant: Variant {
            no_pretrain: false,
            ..cfg.variant
        },
        ..cfg.clone()
    };
    let mut t = Trainer::new(features, split, cfg)?;
    if t.stage == Stage::Pretrain {
        t.finish_stage()?;
    }
    Ok(t.model.autoencoder)
}

/// Stage 2 only, starting from a given autoencoder.
pub fn train_joint(
    features: &Matrix,
    split: &WeakLabelSplit,
    pretrained: AutoencoderParams,
    cfg: &TrainConfig,
) -> Result<Model> {
    let mut model = cfg.init_model(features.cols())?;
    if pretrained.tensors().iter().map(|t| t.shape()).ne(model
        .autoencoder
        .tensors()
        .iter()
        .map(|t| t.shape()))
    {
        return Err(Error::InvalidConfig(
            "pretrained autoencoder does not match the configured architecture".into(),
        ));
    }
    model.autoencoder = pretrained;
    let mut t = Trainer::assemble(features, split, cfg.clone(), model)?;
    t.enter(Stage::Joint);
    Ok(t.run()?.model)
}

/// Training state at an epoch boundary.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub stage: Stage,
    pub epoch: usize,
    plateau_best: f64,
    plateau_stale: usize,
    rng: RngState,
    optimizer: OptimizerState,
    pub model: Model,
}

impl Checkpoint {
    /// Magic and version, stage and epoch, plateau tracker, RNG position,
    /// optimizer settings and moments, JSON config, then the model container.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u8(self.stage.number());
        w.u64(self.epoch as u64);
        w.f64(self.plateau_best);
        w.u64(self.plateau_stale as u64);
        w.u64(self.rng.seed);
        w.u64(self.rng.stream);
        w.u128(self.rng.word_pos);
        let opt = &self.optimizer;
        w.u8(match opt.config.kind {
            OptimizerKind::Adam => 0,
            OptimizerKind::Sgd => 1,
        });
        for v in [
            opt.config.lr,
            opt.config.beta1,
            opt.config.beta2,
            opt.config.eps,
        ] {
            w.f64(v);
        }
        w.u64(opt.step);
        w.u32(opt.first_moment.len() as u32);
        for m in opt.first_moment.iter().chain(&opt.second_moment) {
            w.matrix(m);
        }
        let config = serde_json::to_vec(&self.config)?;
        w.u64(config.len() as u64);
        w.bytes(&config);
        let model = self.model.to_bytes();
        w.u64(model.len() as u64);
        w.bytes(&model);
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::data("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::data(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let stage = Stage::from_number(r.u8()?)?;
        let epoch = r.u64()? as usize;
        let plateau_best = r.f64()?;
        let plateau_stale = r.u64()? as usize;
        let rng = RngState {
            seed: r.u64()?,
            stream: r.u64()?,
            word_pos: r.u128()?,
        };
        let kind = match r.u8()? {
            0 => OptimizerKind::Adam,
            1 => OptimizerKind::Sgd,
            other => return Err(Error::data(format!("unknown optimizer tag {other}"))),
        };
        let config = OptimizerConfig {
            kind,
            lr: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        };
        let step = r.u64()?;
        let n = r.u32()? as usize;
        let first_moment = (0..n).map(|_| r.matrix()).collect::<Result<Vec<_>>>()?;
        let second_moment = (0..n).map(|_| r.matrix()).collect::<Result<Vec<_>>>()?;
        let len = r.u64()? as usize;
        let train_config: TrainConfig = serde_json::from_slice(r.take(len)?)?;
        let len = r.u64()? as usize;
        let model = Model::from_bytes(r.take(len)?)?;
        r.finish()?;
        Ok(Self {
            config: train_config,
            stage,
            epoch,
            plateau_best,
            plateau_stale,
            rng,
            optimizer: OptimizerState {
                config,
                step,
                first_moment,
                second_moment,
            },
            model,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_weak_split, Dataset, SplitConfig};
    use crate::metrics::auc_roc;
    use crate::numerics::{Activation, Dense};

    fn split_of(unlabeled: Vec<usize>, labeled: Vec<usize>) -> WeakLabelSplit {
        WeakLabelSplit {
            train_unlabeled: unlabeled,
            n_labeled: labeled.len(),
            n_labeled_requested: labeled.len(),
            train_labeled_anomalies: labeled,
            test: Vec::new(),
            contamination_rate: 0.0,
            hidden_anomalies: 0,
            seed: 0,
        }
    }

    // Normals on a line in R^3, anomalies pushed off it.
    fn line_data(normals: usize, anomalies: usize, seed: u64) -> Dataset {
        let mut rng = Rng::new(seed);
        let mut data = Vec::new();
        for i in 0..normals + anomalies {
            let t = rng.uniform(0.1, 0.9);
            let mut row = [t, 1.0 - t, 0.5 * t];
            if i >= normals {
                row[2] += 0.6;
                row[0] = rng.uniform(0.0, 1.0);
            }
            data.extend(row.iter().map(|v| v + 0.01 * rng.normal()));
        }
        let n = normals + anomalies;
        Dataset::new(
            Matrix::from_vec(n, 3, data).unwrap(),
            (0..n).map(|i| i >= normals).collect(),
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 32,
            stage1_epochs: 5,
            stage2_epochs: 5,
            scorer_hidden: vec![8, 4],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                batch_size: 7,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                margin: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                lambda: -1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                joint_lr: 0.0,
                ..TrainConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = TrainConfig {
            factors: "h,e".parse().unwrap(),
            variant: "no-pretrain,no-error-term".parse().unwrap(),
            ..TrainConfig::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"factors\":\"h,e\""));
        assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn variant_names() {
        for name in Variant::NAMES {
            assert_eq!(name.parse::<Variant>().unwrap().to_string(), name);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }

    #[test]
    fn balanced_batch_halves() {
        let split = split_of((0..100).collect(), vec![100, 101, 102]);
        let mut rng = Rng::new(0);
        let b = sample_balanced_batch(&split, 8, &mut rng).unwrap();
        assert_eq!((b.unlabeled.len(), b.anomalies.len()), (4, 4));
        let mut u = b.unlabeled.clone();
        u.sort_unstable();
        u.dedup();
        assert_eq!(u.len(), 4);
        assert_eq!(
            b.labels(),
            vec![false, false, false, false, true, true, true, true]
        );
    }

    #[test]
    fn small_labeled_pool_repeats() {
        let split = split_of((0..100).collect(), vec![200, 201]);
        let b = sample_balanced_batch(&split, 64, &mut Rng::new(1)).unwrap();
        assert_eq!(b.anomalies.len(), 32);
        assert!(b.anomalies.iter().all(|i| [200, 201].contains(i)));
    }

    #[test]
    fn empty_labeled_pool_is_error() {
        let split = split_of((0..10).collect(), vec![]);
        let err = sample_balanced_batch(&split, 8, &mut Rng::new(0)).unwrap_err();
        assert!(err.to_string().contains("without labels"));
    }

    #[test]
    fn epoch_covers_unlabeled_once() {
        let split = split_of((0..37).collect(), vec![50, 51]);
        let batches = epoch_batches(&split, 10, &mut Rng::new(3)).unwrap();
        assert_eq!(batches.len(), 8);
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.unlabeled.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..37).collect::<Vec<_>>());
        assert!(batches
            .iter()
            .all(|b| b.unlabeled.len() == b.anomalies.len()));
    }

    #[test]
    fn zero_pretrain_epochs_keep_init() {
        let ds = line_data(60, 6, 0);
        let split = split_of((0..60).collect(), (60..66).collect());
        let cfg = TrainConfig {
            stage1_epochs: 0,
            ..small_cfg()
        };
        let ae = pretrain(&ds.features, &split, &cfg).unwrap();
        assert_eq!(ae, cfg.init_model(3).unwrap().autoencoder);
    }

    #[test]
    fn linear_autoencoder_recovers_rank_one_data() {
        let mut rng = Rng::new(5);
        let n = 200;
        let data: Vec<f64> = (0..n)
            .flat_map(|_| {
                let t = rng.uniform(-1.0, 1.0);
                [t, 0.5 * t]
            })
            .collect();
        let x = Matrix::from_vec(n, 2, data).unwrap();
        let split = split_of((0..n).collect(), vec![0]);
        let cfg = TrainConfig {
            encoder_hidden: Some(vec![]),
            latent_dim: Some(1),
            stage1_epochs: 400,
            patience: 0,
            batch_size: 32,
            pretrain_lr: 1e-2,
            ..TrainConfig::default()
        };
        let init = cfg.init_model(2).unwrap().autoencoder;
        assert!(init
            .encoder
            .iter()
            .chain(&init.decoder)
            .all(|l| l.activation == Activation::Identity));
        let rmse =
            |ae: &AutoencoderParams| pretrain_loss(&ae.forward(&x).unwrap().residual).unwrap().0;
        let before = rmse(&init);
        let after = rmse(&pretrain(&x, &split, &cfg).unwrap());
        assert!(after < 0.01 * before, "{before} -> {after}");
    }

    #[test]
    fn no_pretrain_skips_stage_one() {
        let ds = line_data(60, 6, 0);
        let split = split_of((0..60).collect(), (60..66).collect());
        let cfg = TrainConfig {
            variant: "no-pretrain".parse().unwrap(),
            ..small_cfg()
        };
        let fitted = fit(&ds.features, &split, &cfg).unwrap();
        assert!(fitted.history.iter().all(|l| l.stage == 2));
        assert_eq!(fitted.timings.pretrain_epochs, 0);
    }

    #[test]
    fn error_only_factor_trains() {
        let ds = line_data(60, 6, 0);
        let split = split_of((0..60).collect(), (60..66).collect());
        let cfg = TrainConfig {
            factors: "e".parse().unwrap(),
            stage2_epochs: 40,
            patience: 0,
            ..small_cfg()
        };
        let fitted = fit(&ds.features, &split, &cfg).unwrap();
        assert_eq!(fitted.model.scorer.input_dim(), 0);
        let first = fitted.history.iter().find(|l| l.stage == 2).unwrap().loss;
        assert!(fitted.history.last().unwrap().loss < first);
    }

    #[test]
    fn no_error_term_leaves_error_path_silent() {
        let ds = line_data(40, 4, 2);
        let cfg = TrainConfig {
            variant: "no-error-term".parse().unwrap(),
            ..small_cfg()
        };
        let model = cfg.init_model(3).unwrap();
        let idx: Vec<usize> = (0..44).collect();
        let x = ds.features.select_rows(&idx);
        let step = joint_gradients(&model, &x, &ds.labels, &cfg).unwrap();
        assert!(step.error_term_grads.iter().all(|&g| g == 0.0));
        let g = error_term_param_grads(&model, &x, &step).unwrap();
        assert!(g.tensors().iter().all(|t| t.max_abs() == 0.0));
        assert_eq!(step.terms.total, step.terms.deviation);
    }

    #[test]
    fn silent_injection_with_zero_lambda_sends_nothing_to_error() {
        let ds = line_data(40, 4, 3);
        let cfg = TrainConfig {
            lambda: 0.0,
            ..small_cfg()
        };
        let mut model = cfg.init_model(3).unwrap();
        for l in &mut model.scorer.layers {
            l.inject.as_mut().unwrap().fill(0.0);
        }
        let fwd = model.forward(&ds.features).unwrap();
        let loss = joint_loss(
            &fwd.scoring.scores,
            &fwd.encoding.errors,
            &ds.labels,
            cfg.margin,
            0.0,
        )
        .unwrap();
        let sb = model.scorer.backward(&fwd.scoring, &loss.dscores).unwrap();
        assert!(sb.errors.unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        use crate::numerics::{finite_diff_grad, max_relative_error};
        let ds = line_data(10, 3, 8);
        let variants = [
            "full",
            "first-layer-error",
            "reconstruction-only",
            "no-error-term",
        ];
        for (i, v) in variants.iter().enumerate() {
            let cfg = TrainConfig {
                variant: v.parse().unwrap(),
                margin: 0.05,
                lambda: 0.7,
                scorer_hidden: vec![5, 3],
                seed: i as u64,
                ..TrainConfig::default()
            };
            let mut model = cfg.init_model(3).unwrap();
            let mut rng = Rng::new(40 + i as u64);
            for t in model.tensors_mut() {
                if t.rows() == 1 {
                    for v in t.as_mut_slice() {
                        *v = rng.uniform(-0.2, 0.2);
                    }
                }
            }
            let step = joint_gradients(&model, &ds.features, &ds.labels, &cfg).unwrap();
            let numeric = finite_diff_grad(&model, 1e-6, |m| {
                joint_gradients(m, &ds.features, &ds.labels, &cfg)
                    .unwrap()
                    .terms
                    .total
            })
            .unwrap();
            let err = max_relative_error(&numeric, &step.grads.tensors());
            assert!(err < 1e-4, "{v}: rel err {err}");
        }
    }

    #[test]
    fn anomalies_score_higher_after_training() {
        let ds = line_data(300, 30, 11);
        let mut rng = Rng::new(4);
        let split = make_weak_split(
            &ds,
            &SplitConfig {
                n_labeled: 10,
                contamination: 0.0,
                test_fraction: 0.2,
            },
            &mut rng,
        )
        .unwrap();
        let cfg = TrainConfig {
            batch_size: 64,
            stage1_epochs: 30,
            stage2_epochs: 30,
            ..TrainConfig::default()
        };
        let fitted = fit(&ds.features, &split, &cfg).unwrap();
        let scores = fitted.model.predict_scores(&ds.rows(&split.test)).unwrap();
        let labels = ds.labels_of(&split.test);
        let mean = |want: bool| {
            let v: Vec<f64> = scores
                .iter()
                .zip(&labels)
                .filter(|p| *p.1 == want)
                .map(|p| *p.0)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(true) > mean(false));
        assert!(auc_roc(&scores, &labels).unwrap() > 0.9);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = line_data(80, 8, 1);
        let split = split_of((0..80).collect(), (80..88).collect());
        let a = fit(&ds.features, &split, &small_cfg()).unwrap();
        let b = fit(&ds.features, &split, &small_cfg()).unwrap();
        assert_eq!(a.model, b.model);
        let c = fit(
            &ds.features,
            &split,
            &TrainConfig {
                seed: 1,
                ..small_cfg()
            },
        )
        .unwrap();
        assert_ne!(a.model, c.model);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let ds = line_data(80, 8, 1);
        let split = split_of((0..80).collect(), (80..88).collect());
        let cfg = small_cfg();
        let straight = fit(&ds.features, &split, &cfg).unwrap();
        for stop in [2, 5, 7] {
            let mut t = Trainer::new(&ds.features, &split, cfg.clone()).unwrap();
            for _ in 0..stop {
                t.step_epoch().unwrap();
            }
            let bytes = t.checkpoint().to_bytes().unwrap();
            let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
            let resumed = Trainer::resume(&ds.features, &split, ckpt)
                .unwrap()
                .run()
                .unwrap();
            assert_eq!(resumed.model, straight.model, "stop after {stop}");
        }
    }

    #[test]
    fn divergence_reports_stage() {
        let ds = line_data(40, 4, 0);
        let split = split_of((0..40).collect(), (40..44).collect());
        let cfg = TrainConfig {
            stage1_epochs: 1,
            ..small_cfg()
        };
        let mut t = Trainer::new(&ds.features, &split, cfg).unwrap();
        t.model.autoencoder.decoder[0] = Dense::from_parts(
            Matrix::filled(
                t.model.autoencoder.decoder[0].out_dim(),
                t.model.autoencoder.decoder[0].in_dim(),
                f64::MAX,
            ),
            Matrix::filled(1, t.model.autoencoder.decoder[0].out_dim(), f64::MAX),
            Activation::Relu,
        )
        .unwrap();
        let err = t.step_epoch().unwrap_err();
        assert!(
            matches!(
                err,
                Error::Divergence {
                    stage: 1,
                    epoch: 0,
                    ..
                }
            ),
            "{err}"
        );
    }
}
