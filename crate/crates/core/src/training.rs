//! Training loop, composite loss and evaluation.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::config::KvConfig;
use crate::data::{SplitAssignment, SplitName, SplitRatios, TrialSet};
pub use crate::ensemble::LipschitzBudget;
use crate::ensemble::{BranchId, Model, ModelConfig};
use crate::error::{LelError, Result};
use crate::lgca::Mode;
use crate::metrics::{self, Metrics};
use crate::optim::Adam;
use crate::spectral::{project_store, TRAIN_POWER_ITERS, TRAIN_POWER_TOL};

/// Probability floor of the cross-entropy terms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Search ranges of the hyperparameter table.
pub const LR_GRID: [f64; 3] = [1e-4, 3e-4, 1e-3];
pub const EPOCH_GRID: [usize; 3] = [50, 100, 150];
pub const BATCH_GRID: [usize; 3] = [32, 64, 128];
pub const BUDGET_GRID: [f64; 3] = [0.5, 1.0, 1.5];
/// Sensitivity sweep: uniform budget constant × epochs.
pub const SENSITIVITY_K: [f64; 3] = [0.1, 1.0, 10.0];
pub const SENSITIVITY_EPOCHS: [usize; 3] = [30, 50, 100];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FloatMode {
    /// Inputs and parameters rounded to single precision after every update.
    F32,
    F64,
}

impl fmt::Display for FloatMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FloatMode::F32 => "f32",
            FloatMode::F64 => "f64",
        })
    }
}

impl FromStr for FloatMode {
    type Err = LelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(FloatMode::F32),
            "f64" => Ok(FloatMode::F64),
            _ => Err(LelError::Config(format!("float mode must be f32 or f64, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub budget: LipschitzBudget,
    pub seed: u64,
    pub float_mode: FloatMode,
    pub ratios: SplitRatios,
    /// Epochs after which the best-so-far model is kept as a snapshot.
    pub snapshot_epochs: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            dropout: 0.3,
            epochs: 100,
            batch_size: 128,
            budget: LipschitzBudget::default(),
            seed: 0,
            float_mode: FloatMode::F64,
            ratios: SplitRatios::default(),
            snapshot_epochs: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.budget.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(LelError::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(LelError::Config("epochs and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(LelError::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let snaps: Vec<String> = self.snapshot_epochs.iter().map(|e| e.to_string()).collect();
        vec![
            ("learning_rate", self.learning_rate.to_string()),
            ("dropout", self.dropout.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("l_s", self.budget.l_s.to_string()),
            ("l_att", self.budget.l_att.to_string()),
            ("l_affine", self.budget.l_affine.to_string()),
            ("l_linear", self.budget.l_linear.to_string()),
            ("seed", self.seed.to_string()),
            ("float_mode", self.float_mode.to_string()),
            ("train_ratio", self.ratios.train.to_string()),
            ("val_ratio", self.ratios.val.to_string()),
            ("test_ratio", self.ratios.test.to_string()),
            ("snapshot_epochs", snaps.join(",")),
        ]
    }

    pub fn apply_kv(&mut self, kv: &mut KvConfig) -> Result<()> {
        kv.take_into("learning_rate", &mut self.learning_rate)?;
        kv.take_into("dropout", &mut self.dropout)?;
        kv.take_into("epochs", &mut self.epochs)?;
        kv.take_into("batch_size", &mut self.batch_size)?;
        if let Some(k) = kv.take::<f64>("lip_k")? {
            self.budget = LipschitzBudget::uniform(k);
        }
        kv.take_into("l_s", &mut self.budget.l_s)?;
        kv.take_into("l_att", &mut self.budget.l_att)?;
        kv.take_into("l_affine", &mut self.budget.l_affine)?;
        kv.take_into("l_linear", &mut self.budget.l_linear)?;
        kv.take_into("seed", &mut self.seed)?;
        kv.take_into("float_mode", &mut self.float_mode)?;
        kv.take_into("train_ratio", &mut self.ratios.train)?;
        kv.take_into("val_ratio", &mut self.ratios.val)?;
        kv.take_into("test_ratio", &mut self.ratios.test)?;
        match kv.take::<String>("snapshot_epochs")? {
            Some(s) if s.trim().is_empty() => self.snapshot_epochs.clear(),
            Some(s) => {
                self.snapshot_epochs = s
                    .split(',')
                    .map(|e| {
                        e.trim()
                            .parse()
                            .map_err(|_| LelError::Config(format!("bad snapshot epoch {e:?}")))
                    })
                    .collect::<Result<_>>()?
            }
            None => {}
        }
        Ok(())
    }

    /// Architecture for `set` under this configuration.
    pub fn model_config(&self, set: &TrialSet) -> ModelConfig {
        let mut m = ModelConfig::new(set.n_channels(), set.n_samples(), set.n_classes, set.sampling_rate());
        m.budget = self.budget;
        m.dropout = self.dropout;
        m.seed = self.seed;
        m
    }
}

fn check_labels(labels: &[usize], k: usize) -> Result<()> {
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(LelError::Contract(format!("label {y} is out of range for K = {k}")));
    }
    Ok(())
}

/// `CE(fused) + ¼ Σ CE(branch_i)` inside a graph. The fused posterior must
/// already be built from stop-gradient branch outputs.
pub fn composite_loss_graph(g: &mut Graph, fused: Var, branches: &[Var], labels: &[usize]) -> Result<Var> {
    let k = g.shape(fused)[1];
    check_labels(labels, k)?;
    let mut loss = g.nll(fused, labels, PROB_FLOOR);
    let mut sum = None;
    for &b in branches {
        let l = g.nll(b, labels, PROB_FLOOR);
        sum = Some(match sum {
            None => l,
            Some(s) => g.add(s, l),
        });
    }
    if let Some(s) = sum {
        let s = g.scale(s, 1.0 / branches.len() as f64);
        loss = g.add(loss, s);
    }
    Ok(loss)
}

/// Plain value of the composite loss.
pub fn composite_loss(fused: &Array2<f64>, branches: &[Array2<f64>], labels: &[usize]) -> Result<f64> {
    check_labels(labels, fused.ncols())?;
    for (i, p) in std::iter::once(fused).chain(branches).enumerate() {
        if p.nrows() != labels.len() {
            return Err(LelError::Shape(format!(
                "input {i} has {} rows for {} labels",
                p.nrows(),
                labels.len()
            )));
        }
        for row in p.rows() {
            if row.iter().any(|&v| !(v >= 0.0)) || (row.sum() - 1.0).abs() > 1e-6 {
                return Err(LelError::Contract(format!(
                    "input {i} is not on the probability simplex"
                )));
            }
        }
    }
    let branch_mean = branches
        .iter()
        .map(|b| metrics::nll(b, labels, PROB_FLOOR))
        .sum::<f64>()
        / branches.len().max(1) as f64;
    Ok(metrics::nll(fused, labels, PROB_FLOOR) + branch_mean)
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub val_f1: f64,
    /// Fusion weights `softmax(α)` at the end of the epoch.
    pub w: [f64; 4],
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub best_val_loss: f64,
    pub steps: usize,
}

impl TrainReport {
    /// One JSON record per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).unwrap() + "\n")
            .collect()
    }
}

/// Best-so-far model at a given epoch.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub epoch: usize,
    pub best_epoch: usize,
    pub model: Model,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation model.
    pub model: Model,
    pub report: TrainReport,
    pub snapshots: Vec<Snapshot>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub fused: Metrics,
    pub branches: Vec<(String, Metrics)>,
    pub loss: f64,
    pub n: usize,
}

impl EvalReport {
    pub fn branch_accuracy(&self, id: BranchId) -> f64 {
        self.branches[id.index()].1.accuracy
    }
}

/// Checks that `model` can consume `set`.
pub fn check_compatible(model: &Model, set: &TrialSet) -> Result<()> {
    let c = &model.config;
    if set.is_empty() {
        return Err(LelError::Contract("dataset is empty".into()));
    }
    if set.n_channels() != c.n_channels || set.n_samples() != c.n_samples || set.n_classes != c.n_classes {
        return Err(LelError::Contract(format!(
            "checkpoint expects C={}, T={}, K={}; dataset has C={}, T={}, K={}",
            c.n_channels,
            c.n_samples,
            c.n_classes,
            set.n_channels(),
            set.n_samples(),
            set.n_classes
        )));
    }
    Ok(())
}

/// Metrics of the fused model and of each branch on `indices`.
pub fn evaluate(model: &Model, set: &TrialSet, indices: &[usize]) -> Result<EvalReport> {
    check_compatible(model, set)?;
    if indices.is_empty() {
        return Err(LelError::Contract("evaluation split is empty".into()));
    }
    let batch = set.batch(indices);
    let pred = model.predict_chunked(&batch.data, 256)?;
    let fused = metrics::evaluate_probs(&pred.fused, &batch.labels)?;
    let branches = BranchId::ALL
        .iter()
        .zip(&pred.branches)
        .map(|(id, p)| Ok((id.to_string(), metrics::evaluate_probs(p, &batch.labels)?)))
        .collect::<Result<Vec<_>>>()?;
    let loss = composite_loss(&pred.fused, &pred.branches, &batch.labels)?;
    Ok(EvalReport {
        fused,
        branches,
        loss,
        n: indices.len(),
    })
}

pub fn evaluate_split(model: &Model, set: &TrialSet, split: &SplitAssignment, name: SplitName) -> Result<EvalReport> {
    split.audit(set)?;
    evaluate(model, set, &split.indices(set, name))
}

fn quantize_model(model: &mut Model, ids: &[crate::params::ParamId]) {
    for &id in ids {
        model.store.value_mut(id).mapv_inplace(|v| v as f32 as f64);
    }
}

/// Trains `model` on the training split, selecting the epoch with the best
/// validation accuracy (ties: lower validation loss, then earlier epoch).
pub fn train_model(
    mut model: Model,
    set: &TrialSet,
    split: &SplitAssignment,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_compatible(&model, set)?;
    split.audit(set)?;
    let train_idx = split.indices(set, SplitName::Train);
    let val_idx = split.indices(set, SplitName::Val);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(LelError::Split(
            "training and validation splits must be non-empty".into(),
        ));
    }
    let val_batch = set.batch(&val_idx);
    let val_data = match cfg.float_mode {
        FloatMode::F32 => val_batch.data.mapv(|v| v as f32 as f64),
        FloatMode::F64 => val_batch.data.clone(),
    };
    if cfg.float_mode == FloatMode::F32 {
        let all: Vec<_> = model.store.ids().collect();
        quantize_model(&mut model, &all);
    }

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4452_4f50);
    let mut opt = Adam::new(cfg.learning_rate);
    let mut report = TrainReport {
        best_val_acc: f64::NEG_INFINITY,
        best_val_loss: f64::INFINITY,
        ..TrainReport::default()
    };
    let mut best = model.clone();
    let mut snapshots = Vec::new();
    let mut order = train_idx.clone();

    for epoch in 1..=cfg.epochs {
        order.copy_from_slice(&train_idx);
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = set.batch(chunk);
            let data = match cfg.float_mode {
                FloatMode::F32 => batch.data.mapv(|v| v as f32 as f64),
                FloatMode::F64 => batch.data,
            };
            let mut g = Graph::new();
            let x = g.constant(data.into_dyn());
            let vars = model.forward_graph(&mut g, x, Mode::Train(&mut dropout_rng))?;
            let loss = composite_loss_graph(&mut g, vars.fused, &vars.branches, &batch.labels)?;
            let lv = g.value(loss).iter().next().copied().unwrap_or(f64::NAN);
            if !lv.is_finite() {
                return Err(LelError::Divergence { epoch, step, loss: lv });
            }
            let grads = g.backward(loss, None).params(&g);
            if grads.iter().any(|(_, a)| a.iter().any(|v| !v.is_finite())) {
                return Err(LelError::Divergence { epoch, step, loss: lv });
            }
            let changed = opt.step(&mut model.store, &grads);
            project_store(&mut model.store, Some(&changed), TRAIN_POWER_ITERS, TRAIN_POWER_TOL)?;
            if cfg.float_mode == FloatMode::F32 {
                quantize_model(&mut model, &changed);
            }
            loss_sum += lv * chunk.len() as f64;
            report.steps += 1;
        }

        let pred = model.predict_chunked(&val_data, 256)?;
        let m = metrics::evaluate_probs(&pred.fused, &val_batch.labels)?;
        let val_loss = composite_loss(&pred.fused, &pred.branches, &val_batch.labels)?;
        let w = model.fusion_weights();
        report.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            val_loss,
            val_acc: m.accuracy,
            val_f1: m.macro_f1,
            w: [w[0], w[1], w[2], w[3]],
        });
        let better =
            m.accuracy > report.best_val_acc || (m.accuracy == report.best_val_acc && val_loss < report.best_val_loss);
        if better {
            report.best_val_acc = m.accuracy;
            report.best_val_loss = val_loss;
            report.best_epoch = epoch;
            best = model.clone();
        }
        if cfg.snapshot_epochs.contains(&epoch) {
            snapshots.push(Snapshot {
                epoch,
                best_epoch: report.best_epoch,
                model: best.clone(),
            });
        }
    }
    Ok(TrainOutcome {
        model: best,
        report,
        snapshots,
    })
}

/// Builds a model from `cfg` and trains it.
pub fn train(set: &TrialSet, split: &SplitAssignment, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let model = Model::new(cfg.model_config(set))?;
    train_model(model, set, split, cfg)
}

/// One cell of the budget × epochs sensitivity grid.
#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub k: f64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub test: Metrics,
}

/// For every budget constant in `ks`, trains once for `max(epochs)` epochs
/// and evaluates the best-validation model reached by each epoch count.
/// Without a learning-rate schedule this equals separate runs per count.
/// Budget constants train on separate threads; each run is seeded, so the
/// cells do not depend on scheduling.
pub fn sensitivity_sweep(
    set: &TrialSet,
    split: &SplitAssignment,
    base: &TrainConfig,
    ks: &[f64],
    epochs: &[usize],
) -> Result<Vec<SweepCell>> {
    let max_e = epochs.iter().copied().max().unwrap_or(0);
    let test_idx = split.indices(set, SplitName::Test);
    let run = |k: f64| -> Result<Vec<SweepCell>> {
        let cfg = TrainConfig {
            budget: LipschitzBudget::uniform(k),
            epochs: max_e,
            snapshot_epochs: epochs.to_vec(),
            ..base.clone()
        };
        let out = train(set, split, &cfg)?;
        out.snapshots
            .iter()
            .map(|snap| {
                Ok(SweepCell {
                    k,
                    epochs: snap.epoch,
                    best_epoch: snap.best_epoch,
                    best_val_acc: out.report.epochs[snap.best_epoch - 1].val_acc,
                    test: evaluate(&snap.model, set, &test_idx)?.fused,
                })
            })
            .collect()
    };
    let per_k: Vec<Result<Vec<SweepCell>>> = std::thread::scope(|s| {
        let handles: Vec<_> = ks.iter().map(|&k| s.spawn(move || run(k))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    let mut cells = Vec::new();
    for r in per_k {
        cells.extend(r?);
    }
    Ok(cells)
}
