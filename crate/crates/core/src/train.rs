//! Two-step training: alternating-optimization initialization, then joint
//! refinement with early stopping, wrapped in a restart policy.
//!
//! Every epoch is a shuffled pass of mini-batches over the training entries.
//! Mini-batch gradients are scaled by `|train| / |batch|` so that the summed
//! loss keeps the same step scale at any batch size.
//!
//! Initialization runs, in order:
//!
//! 1. `warmstart_epochs` epochs on the CP block alone (skipped when `R = 0`);
//! 2. up to `ao_max_iters` rounds of: head block with the CP block frozen, then
//!    CP block with the head frozen, `ao_epochs_per_block` epochs each. A round
//!    ends the loop early when the validation stopping rule fires.
//!
//! Refinement updates both blocks jointly with fresh optimizer state.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cp::CpFactors;
use crate::error::{Error, Result};
use crate::head::{Activation, NonlinearHead, NonlinearParams};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::model::{batch_gradient, JuliaModel};
use crate::optim::{OptimizerKind, Stepper};
use crate::rng::{derive_rng, Rng, Stream};
use crate::tensor::{DatasetSplit, SparseTensor};

/// Seed offset between restart attempts.
pub const RESTART_SEED_STRIDE: u64 = 1_000_003;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitStrategy {
    /// CP warm start followed by alternating block updates.
    #[default]
    Ao,
    /// Joint updates from the random initialization for the same number of epochs.
    Naive,
}

impl std::str::FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ao" => Ok(InitStrategy::Ao),
            "naive" => Ok(InitStrategy::Naive),
            other => Err(Error::invalid(format!("unknown init strategy '{other}' (expected ao|naive)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_linear: f64,
    pub lr_nonlinear: f64,
    pub batch_size: usize,
    pub warmstart_epochs: usize,
    pub ao_max_iters: usize,
    pub ao_epochs_per_block: usize,
    pub max_epochs: usize,
    pub early_stop_rel_tol: f64,
    /// Consecutive below-tolerance epochs needed to stop.
    pub patience: usize,
    pub max_restarts: usize,
    pub seed: u64,
    /// Record no wall-clock times, so reports are reproducible byte for byte.
    pub deterministic: bool,
    pub optimizer: OptimizerKind,
    pub init: InitStrategy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_linear: 0.005,
            lr_nonlinear: 0.005,
            batch_size: 1024,
            warmstart_epochs: 5,
            ao_max_iters: 20,
            ao_epochs_per_block: 1,
            max_epochs: 500,
            early_stop_rel_tol: 1e-4,
            patience: 1,
            max_restarts: 10,
            seed: 0,
            deterministic: false,
            optimizer: OptimizerKind::Adam,
            init: InitStrategy::Ao,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [("lr-linear", self.lr_linear), ("lr-nonlinear", self.lr_nonlinear)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch-size must be at least 1"));
        }
        if !(self.early_stop_rel_tol > 0.0) {
            return Err(Error::invalid("early-stop-rel-tol must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::invalid("patience must be at least 1"));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// Seed of restart attempt `k` (attempt 0 uses `seed` itself).
    pub fn attempt_seed(&self, k: usize) -> u64 {
        self.seed.wrapping_add((k as u64).wrapping_mul(RESTART_SEED_STRIDE))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmstart,
    Ao,
    Naive,
    Refine,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Warmstart => "warmstart",
            Phase::Ao => "ao",
            Phase::Naive => "naive",
            Phase::Refine => "refine",
        }
    }
}

/// Which parameters an epoch updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Linear,
    Nonlinear,
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub block: Block,
    pub train_loss: f64,
    pub val_rmse: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub restarts: usize,
    pub attempt_seeds: Vec<u64>,
    /// Validation RFE of every attempt, `None` where undefined.
    pub attempt_rfe: Vec<Option<f64>>,
    pub success: bool,
    pub val_metrics: Option<MetricsReport>,
    pub test_metrics: Option<MetricsReport>,
}

impl TrainReport {
    pub fn epochs(&self) -> usize {
        self.history.len()
    }

    pub fn seconds(&self) -> f64 {
        self.history.iter().map(|r| r.seconds).sum()
    }

    /// `epoch,phase,train_loss,val_rmse,seconds`; an empty `val_rmse` means no validation set.
    pub fn write_history_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epoch,phase,train_loss,val_rmse,seconds")?;
        for r in &self.history {
            let val = r.val_rmse.map(|v| v.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{},{}", r.epoch, r.phase.as_str(), r.train_loss, val, r.seconds)?;
        }
        Ok(())
    }

    pub fn history_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_history_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV is UTF-8")
    }

    /// Final metrics, restart count and success flag.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "success": self.success,
            "restarts": self.restarts,
            "attempt_seeds": self.attempt_seeds,
            "attempt_rfe": self.attempt_rfe,
            "epochs": self.epochs(),
            "seconds": self.seconds(),
            "val_metrics": self.val_metrics,
            "test_metrics": self.test_metrics,
        })
    }
}

/// Before/after notification around each block epoch, for instrumentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockEvent {
    pub phase: Phase,
    pub block: Block,
    /// 1-based AO round, 0 outside the AO loop.
    pub ao_iter: usize,
    pub after: bool,
}

type Observer<'a, H> = Box<dyn FnMut(&BlockEvent, &JuliaModel<H>) + 'a>;

/// Relative-change stopping rule on a loss sequence.
#[derive(Clone, Debug)]
pub struct EarlyStop {
    tol: f64,
    patience: usize,
    prev: Option<f64>,
    streak: usize,
}

impl EarlyStop {
    pub fn new(tol: f64, patience: usize) -> Self {
        Self { tol, patience: patience.max(1), prev: None, streak: 0 }
    }

    /// Feeds the next loss; true once `|L_t - L_{t-1}| / L_{t-1} < tol` held `patience` times in a row.
    pub fn update(&mut self, loss: f64) -> bool {
        if let Some(prev) = self.prev {
            let rel = if prev > 0.0 {
                (loss - prev).abs() / prev
            } else if loss == prev {
                0.0
            } else {
                f64::INFINITY
            };
            if rel < self.tol {
                self.streak += 1;
            } else {
                self.streak = 0;
            }
        }
        self.prev = Some(loss);
        self.streak >= self.patience
    }
}

/// One training run over a fixed split. Keeps the shuffle stream, epoch
/// counter and history across phases.
pub struct Trainer<'a, H: NonlinearHead = NonlinearParams> {
    data: &'a SparseTensor,
    train: Vec<usize>,
    val: &'a [usize],
    cfg: TrainConfig,
    shuffle: Rng,
    report: TrainReport,
    observer: Option<Observer<'a, H>>,
    warned_no_val: bool,
}

impl<'a, H: NonlinearHead> Trainer<'a, H> {
    pub fn new(data: &'a SparseTensor, split: &'a DatasetSplit, cfg: &TrainConfig) -> Result<Self> {
        Self::from_positions(data, split.train.clone(), &split.val, cfg)
    }

    fn from_positions(data: &'a SparseTensor, train: Vec<usize>, val: &'a [usize], cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::invalid("no training entries"));
        }
        if let Some(&p) = train.iter().chain(val).find(|&&p| p >= data.nnz()) {
            return Err(Error::invalid(format!("split position {p} >= {} entries", data.nnz())));
        }
        Ok(Self {
            data,
            train,
            val,
            cfg: cfg.clone(),
            shuffle: derive_rng(cfg.seed, Stream::Shuffle),
            report: TrainReport::default(),
            observer: None,
            warned_no_val: false,
        })
    }

    /// Installs a callback run before and after every block epoch.
    pub fn set_observer(&mut self, observer: impl FnMut(&BlockEvent, &JuliaModel<H>) + 'a) {
        self.observer = Some(Box::new(observer));
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    pub fn into_report(self) -> TrainReport {
        self.report
    }

    fn check_model(&self, model: &JuliaModel<H>) -> Result<()> {
        if model.shape() != self.data.shape() {
            return Err(Error::dims(format!(
                "model shape {:?} differs from data shape {:?}",
                model.shape(),
                self.data.shape()
            )));
        }
        Ok(())
    }

    fn notify(&mut self, event: BlockEvent, model: &JuliaModel<H>) {
        if let Some(obs) = self.observer.as_mut() {
            obs(&event, model);
        }
    }

    /// One shuffled mini-batch pass. Returns the stopping statistic: the
    /// validation loss, or the training loss when there is no validation set.
    fn epoch(
        &mut self,
        model: &mut JuliaModel<H>,
        phase: Phase,
        block: Block,
        ao_iter: usize,
        linear: &mut Stepper,
        nonlinear: &mut Stepper,
    ) -> Result<f64> {
        let start = Instant::now();
        self.notify(BlockEvent { phase, block, ao_iter, after: false }, model);

        let want_cp = matches!(block, Block::Linear | Block::Joint) && model.cp.rank() > 0;
        let want_head = matches!(block, Block::Nonlinear | Block::Joint) && model.head.is_some();
        self.train.shuffle(&mut self.shuffle);
        let n_train = self.train.len() as f64;
        let mut flat_cp = if want_cp { model.cp.flatten() } else { Vec::new() };
        let mut flat_head = match (&model.head, want_head) {
            (Some(h), true) => h.flatten(),
            _ => Vec::new(),
        };
        for batch in self.train.chunks(self.cfg.batch_size) {
            let scale = n_train / batch.len() as f64;
            let g = batch_gradient(model, self.data, batch, want_cp, want_head, scale);
            if !g.loss.is_finite() {
                return Err(Error::Divergence {
                    block: block_name(block).into(),
                    detail: "non-finite batch loss".into(),
                });
            }
            if want_cp {
                linear.step("linear", &mut flat_cp, &g.cp, self.cfg.lr_linear)?;
                model.cp.unflatten(&flat_cp)?;
            }
            if want_head {
                nonlinear.step("nonlinear", &mut flat_head, &g.head, self.cfg.lr_nonlinear)?;
                if let Some(h) = model.head.as_mut() {
                    h.unflatten(&flat_head)?;
                }
            }
        }

        let train_loss = model.loss_at(self.data, &self.train);
        if !train_loss.is_finite() {
            return Err(Error::Divergence {
                block: block_name(block).into(),
                detail: "non-finite training loss".into(),
            });
        }
        let (val_rmse, stat) = if self.val.is_empty() {
            if !self.warned_no_val && phase != Phase::Warmstart {
                log::warn!("empty validation set; stopping rules fall back to the training loss");
                self.warned_no_val = true;
            }
            (None, train_loss)
        } else {
            let val_loss = model.loss_at(self.data, self.val);
            if !val_loss.is_finite() {
                return Err(Error::Divergence {
                    block: block_name(block).into(),
                    detail: "non-finite validation loss".into(),
                });
            }
            (Some((val_loss / self.val.len() as f64).sqrt()), val_loss)
        };
        let seconds = if self.cfg.deterministic { 0.0 } else { start.elapsed().as_secs_f64() };
        let epoch = self.report.history.len() + 1;
        log::debug!("epoch {epoch} {} {:?}: train loss {train_loss:.6e}, val rmse {val_rmse:?}", phase.as_str(), block);
        self.report.history.push(EpochRecord { epoch, phase, block, train_loss, val_rmse, seconds });

        self.notify(BlockEvent { phase, block, ao_iter, after: true }, model);
        Ok(stat)
    }

    fn steppers(&self, model: &JuliaModel<H>) -> (Stepper, Stepper) {
        (
            Stepper::new(self.cfg.optimizer, model.num_linear_params()),
            Stepper::new(self.cfg.optimizer, model.num_head_params()),
        )
    }

    /// Warm start plus alternating block updates.
    pub fn ao_initialize(&mut self, model: &mut JuliaModel<H>) -> Result<()> {
        self.check_model(model)?;
        let (mut linear, mut nonlinear) = self.steppers(model);
        let has_cp = model.cp.rank() > 0;
        let has_head = model.head.is_some();
        if has_cp && self.cfg.warmstart_epochs > 0 {
            // the warm start fits g alone, so the head is detached meanwhile
            let head = model.head.take();
            let mut warm = JuliaModel::new(model.shape().to_vec(), model.cp.clone(), None)?;
            let result = (0..self.cfg.warmstart_epochs).try_for_each(|_| {
                self.epoch(&mut warm, Phase::Warmstart, Block::Linear, 0, &mut linear, &mut nonlinear).map(drop)
            });
            model.cp = warm.cp;
            model.head = head;
            result?;
        }
        if !has_head {
            return Ok(());
        }
        let mut stop = EarlyStop::new(self.cfg.early_stop_rel_tol, self.cfg.patience);
        for t in 1..=self.cfg.ao_max_iters {
            let mut stat = 0.0;
            for _ in 0..self.cfg.ao_epochs_per_block {
                stat = self.epoch(model, Phase::Ao, Block::Nonlinear, t, &mut linear, &mut nonlinear)?;
            }
            if has_cp {
                for _ in 0..self.cfg.ao_epochs_per_block {
                    stat = self.epoch(model, Phase::Ao, Block::Linear, t, &mut linear, &mut nonlinear)?;
                }
            }
            if self.cfg.ao_epochs_per_block > 0 && stop.update(stat) {
                log::debug!("AO loop stopped after {t} rounds");
                break;
            }
        }
        Ok(())
    }

    /// Joint updates for as many epochs as AO initialization would spend.
    pub fn naive_initialize(&mut self, model: &mut JuliaModel<H>) -> Result<()> {
        self.check_model(model)?;
        let (mut linear, mut nonlinear) = self.steppers(model);
        let epochs = naive_budget(&self.cfg, model.cp.rank() > 0, model.head.is_some());
        for _ in 0..epochs {
            self.epoch(model, Phase::Naive, Block::Joint, 0, &mut linear, &mut nonlinear)?;
        }
        Ok(())
    }

    /// Joint refinement until the relative validation change drops below tolerance.
    pub fn refine(&mut self, model: &mut JuliaModel<H>) -> Result<()> {
        self.check_model(model)?;
        let (mut linear, mut nonlinear) = self.steppers(model);
        let mut stop = EarlyStop::new(self.cfg.early_stop_rel_tol, self.cfg.patience);
        for _ in 0..self.cfg.max_epochs {
            let stat = self.epoch(model, Phase::Refine, Block::Joint, 0, &mut linear, &mut nonlinear)?;
            if stop.update(stat) {
                break;
            }
        }
        Ok(())
    }

    /// Initialization (per `cfg.init`) followed by refinement, with final metrics.
    pub fn fit(&mut self, model: &mut JuliaModel<H>) -> Result<()> {
        match self.cfg.init {
            InitStrategy::Ao => self.ao_initialize(model)?,
            InitStrategy::Naive => self.naive_initialize(model)?,
        }
        self.refine(model)?;
        self.report.val_metrics = metrics_at(model, self.data, self.val);
        Ok(())
    }
}

/// Epoch count of the naive phase matching AO initialization's budget.
pub fn naive_budget(cfg: &TrainConfig, has_cp: bool, has_head: bool) -> usize {
    let warm = if has_cp { cfg.warmstart_epochs } else { 0 };
    let blocks = if has_head { 1 + usize::from(has_cp) } else { 0 };
    warm + cfg.ao_max_iters * cfg.ao_epochs_per_block * blocks
}

fn block_name(block: Block) -> &'static str {
    match block {
        Block::Linear => "linear",
        Block::Nonlinear => "nonlinear",
        Block::Joint => "joint",
    }
}

fn metrics_at<H: NonlinearHead>(
    model: &JuliaModel<H>,
    data: &SparseTensor,
    positions: &[usize],
) -> Option<MetricsReport> {
    if positions.is_empty() {
        return None;
    }
    let pred = model.predictions_at(data, positions);
    let truth: Vec<f64> = positions.iter().map(|&p| data.value(p)).collect();
    compute_metrics(&pred, &truth).ok()
}

/// Runs `epochs` linear-block epochs over every entry of `train`.
pub(crate) fn warmstart_factors(
    factors: CpFactors,
    train: &SparseTensor,
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<CpFactors> {
    let mut model: JuliaModel = JuliaModel::new(train.shape().to_vec(), factors, None)?;
    let mut trainer = Trainer::from_positions(train, (0..train.nnz()).collect(), &[], cfg)?;
    let (mut linear, mut nonlinear) = trainer.steppers(&model);
    for _ in 0..epochs {
        trainer.epoch(&mut model, Phase::Warmstart, Block::Linear, 0, &mut linear, &mut nonlinear)?;
    }
    Ok(model.cp)
}

/// AO initialization of `model` on `split`.
pub fn ao_initialize<H: NonlinearHead>(
    mut model: JuliaModel<H>,
    data: &SparseTensor,
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<JuliaModel<H>> {
    Trainer::new(data, split, cfg)?.ao_initialize(&mut model)?;
    Ok(model)
}

/// Joint refinement of an already initialized model.
pub fn refine<H: NonlinearHead>(
    mut model: JuliaModel<H>,
    data: &SparseTensor,
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<(JuliaModel<H>, TrainReport)> {
    let mut trainer = Trainer::new(data, split, cfg)?;
    trainer.refine(&mut model)?;
    Ok((model, trainer.into_report()))
}

/// Single attempt: initialization plus refinement, with validation and test metrics.
pub fn train<H: NonlinearHead>(
    mut model: JuliaModel<H>,
    data: &SparseTensor,
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<(JuliaModel<H>, TrainReport)> {
    let mut trainer = Trainer::new(data, split, cfg)?;
    trainer.fit(&mut model)?;
    let mut report = trainer.into_report();
    report.test_metrics = metrics_at(&model, data, &split.test);
    report.attempt_seeds = vec![cfg.seed];
    Ok((model, report))
}

/// Trains a JULIA `R/F` model, restarting from fresh seeds while validation RFE ≥ 1.
pub fn train_with_restarts(
    data: &SparseTensor,
    split: &DatasetSplit,
    r: usize,
    f: usize,
    activation: Activation,
    cfg: &TrainConfig,
) -> Result<(JuliaModel, TrainReport)> {
    let shape = data.shape().to_vec();
    train_with_restarts_using(data, split, cfg, |seed| JuliaModel::initialize(&shape, r, f, activation, seed))
}

/// Restart policy over an arbitrary model constructor.
///
/// Attempt `k` uses seed `cfg.seed + k * 1_000_003` for both initialization and
/// shuffling. Returns the first attempt with validation RFE < 1, otherwise the
/// attempt with the lowest RFE and `success = false`. Attempts that diverge
/// count as failures; an error is returned only if every attempt diverged.
pub fn train_with_restarts_using<H: NonlinearHead>(
    data: &SparseTensor,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    make_model: impl Fn(u64) -> Result<JuliaModel<H>>,
) -> Result<(JuliaModel<H>, TrainReport)> {
    cfg.validate()?;
    let mut seeds = Vec::new();
    let mut rfes = Vec::new();
    let mut best: Option<(f64, JuliaModel<H>, TrainReport)> = None;
    let mut last_err = None;
    for k in 0..=cfg.max_restarts {
        let seed = cfg.attempt_seed(k);
        seeds.push(seed);
        let attempt_cfg = cfg.with_seed(seed);
        let model = make_model(seed)?;
        let (model, mut report) = match train(model, data, split, &attempt_cfg) {
            Ok(out) => out,
            Err(e @ Error::Divergence { .. }) => {
                log::warn!("attempt {k} (seed {seed}) diverged: {e}");
                rfes.push(None);
                last_err = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        // validation RFE decides; without a validation set fall back to training entries
        let rfe = match &report.val_metrics {
            Some(m) => m.rfe,
            None => metrics_at(&model, data, &split.train).and_then(|m| m.rfe),
        };
        rfes.push(rfe);
        let score = rfe.unwrap_or(f64::INFINITY);
        if score < 1.0 {
            report.success = true;
            report.restarts = k;
            report.attempt_seeds = seeds;
            report.attempt_rfe = rfes;
            return Ok((model, report));
        }
        log::info!("attempt {k} (seed {seed}) unsuccessful: validation RFE {rfe:?}");
        if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
            best = Some((score, model, report));
        }
    }
    match best {
        Some((_, model, mut report)) => {
            report.success = false;
            report.restarts = cfg.max_restarts;
            report.attempt_seeds = seeds;
            report.attempt_rfe = rfes;
            Ok((model, report))
        }
        None => Err(last_err.expect("at least one attempt ran")),
    }
}
