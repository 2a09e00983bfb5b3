//! The `lel` command line: synth, train, eval, verify, stream, export.
//!
//! Every subcommand writes its outputs into `--out` together with `run.cfg`,
//! an exact `key = value` echo of the effective configuration.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::{concatenate, Array2, Axis};
use serde::Serialize;

use crate::checkpoint;
use crate::config::{render, KvConfig};
use crate::container::{load_dataset, save_dataset, Container, DType};
use crate::data::{band_power_oracle_accuracy, split_trials, synth_dataset, SplitName, SynthSpec, TrialSet};
use crate::ensemble::{LipschitzBudget, Model};
use crate::error::{LelError, Result};
use crate::export::{self, ExportKind, DEFAULT_ATTENTION_BLEND};
use crate::stream::stream_evaluate;
use crate::training::{
    self, evaluate, sensitivity_sweep, FloatMode, TrainConfig, BATCH_GRID, BUDGET_GRID, EPOCH_GRID, LR_GRID,
    SENSITIVITY_EPOCHS,
};
use crate::verification::{probe_pool, verify_model, VerifyConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_FORMAT: i32 = 4;
pub const EXIT_CONTRACT: i32 = 5;
pub const EXIT_DIVERGENCE: i32 = 6;
pub const EXIT_NUMERIC: i32 = 7;
pub const EXIT_DATA: i32 = 8;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  verification found a bound or gradient check failure
  2  usage or configuration error (unknown key, bad value, unknown export kind)
  3  missing or unwritable file
  4  malformed container, manifest or checkpoint
  5  shape or contract mismatch (checkpoint vs dataset, window vs recording)
  6  training diverged (non-finite loss)
  7  numeric domain error (non-finite values, power iteration failure)
  8  invalid dataset, synthetic spec or split";

/// Maps an error to its documented exit code.
pub fn exit_code(e: &LelError) -> i32 {
    match e {
        LelError::Config(_) | LelError::ParameterDomain(_) => EXIT_USAGE,
        LelError::Io { .. } => EXIT_IO,
        LelError::Format(_) => EXIT_FORMAT,
        LelError::Contract(_) | LelError::Shape(_) => EXIT_CONTRACT,
        LelError::Divergence { .. } => EXIT_DIVERGENCE,
        LelError::NumericDomain { .. } | LelError::NoConvergence { .. } => EXIT_NUMERIC,
        LelError::BandTooNarrow { .. }
        | LelError::InvalidBand { .. }
        | LelError::InvalidSpec(_)
        | LelError::Split(_)
        | LelError::DeficientClasses { .. }
        | LelError::Leakage { .. } => EXIT_DATA,
    }
}

#[derive(Debug, Parser)]
#[command(name = "lel", version, about = "Lipschitz-constrained EEG ensemble", after_help = EXIT_CODES)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and print its band-power oracle accuracy.
    Synth(SynthArgs),
    /// Train a model, or run the sensitivity (--lip-K) or hyperparameter (--grid) sweep.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Check spectral norms, empirical Lipschitz bounds and gradients.
    Verify(VerifyArgs),
    /// Causal sliding-window evaluation of a long recording.
    Stream(StreamArgs),
    /// Export ROC points, channel connectivity or fusion weights.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Also write a continuous recording of this many samples.
    #[arg(long)]
    pub stream_samples: Option<usize>,
    /// Class of the continuous recording.
    #[arg(long, default_value_t = 0)]
    pub stream_class: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset container; falls back to the `data` config key.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub float_mode: Option<FloatMode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Sensitivity sweep over these uniform budget constants (comma separated).
    #[arg(long = "lip-K", value_delimiter = ',')]
    pub lip_k: Option<Vec<f64>>,
    /// Epoch counts of the sensitivity sweep.
    #[arg(long, value_delimiter = ',')]
    pub sweep_epochs: Option<Vec<usize>>,
    /// Sweep the learning rate, epoch, batch size and budget grid.
    #[arg(long)]
    pub grid: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// train, val, test or all.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub float_mode: Option<FloatMode>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset whose windows seed the probe pool (standard-normal windows otherwise).
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `[C × L]` recording container, or a dataset whose windows are joined in order.
    #[arg(long)]
    pub recording: PathBuf,
    /// Window length; defaults to the model input length.
    #[arg(long)]
    pub window: Option<usize>,
    /// Hop between windows; defaults to the window length.
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// roc, connectivity or fusion_weights.
    #[arg(long)]
    pub kind: String,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| LelError::io(path, e))
}

fn make_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LelError::io(dir, e))
}

fn load_kv(path: Option<&Path>) -> Result<KvConfig> {
    path.map_or_else(|| Ok(KvConfig::default()), KvConfig::load)
}

fn to_json(v: &impl Serialize) -> String {
    serde_json::to_string_pretty(v).expect("report types serialize") + "\n"
}

pub fn synth_spec_from_kv(kv: &mut KvConfig) -> Result<SynthSpec> {
    let mut s = SynthSpec::default();
    kv.take_into("n_classes", &mut s.n_classes)?;
    kv.take_into("n_channels", &mut s.n_channels)?;
    kv.take_into("n_samples", &mut s.n_samples)?;
    kv.take_into("sampling_rate", &mut s.sampling_rate)?;
    kv.take_into("boost_db", &mut s.boost_db)?;
    kv.take_into("noise_exponent", &mut s.noise_exponent)?;
    kv.take_into("trials_per_class", &mut s.trials_per_class)?;
    kv.take_into("n_subjects", &mut s.n_subjects)?;
    kv.take_into("windows_per_trial", &mut s.windows_per_trial)?;
    kv.take_into("seed", &mut s.seed)?;
    Ok(s)
}

pub fn synth_spec_pairs(s: &SynthSpec) -> Vec<(&'static str, String)> {
    vec![
        ("n_classes", s.n_classes.to_string()),
        ("n_channels", s.n_channels.to_string()),
        ("n_samples", s.n_samples.to_string()),
        ("sampling_rate", s.sampling_rate.to_string()),
        ("boost_db", s.boost_db.to_string()),
        ("noise_exponent", s.noise_exponent.to_string()),
        ("trials_per_class", s.trials_per_class.to_string()),
        ("n_subjects", s.n_subjects.to_string()),
        ("windows_per_trial", s.windows_per_trial.to_string()),
        ("seed", s.seed.to_string()),
    ]
}

/// Writes a `[C × L]` recording; the metadata holds the sampling rate and label.
pub fn save_recording(path: &Path, x: &Array2<f64>, sampling_rate: f64, label: Option<usize>) -> Result<()> {
    let mut metadata = format!("sampling_rate\t{sampling_rate}\n");
    if let Some(y) = label {
        metadata.push_str(&format!("label\t{y}\n"));
    }
    let c = Container {
        dtype: DType::F32,
        shape: vec![x.nrows(), x.ncols()],
        data: x.iter().copied().collect(),
        metadata,
    };
    write_file(path, c.encode()?)
}

/// Reads a recording container, or joins the windows of a dataset container
/// along time.
pub fn load_recording(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| LelError::io(path, e))?;
    let (c, _) = Container::decode(&bytes)?;
    match c.shape.len() {
        2 => Array2::from_shape_vec((c.shape[0], c.shape[1]), c.data).map_err(|e| LelError::Format(e.to_string())),
        3 => {
            let set = load_dataset(path)?;
            let views: Vec<_> = set.recordings.iter().map(|r| r.samples.view()).collect();
            concatenate(Axis(1), &views).map_err(|e| LelError::Shape(e.to_string()))
        }
        r => Err(LelError::Format(format!("recording must be rank 2 or 3, got rank {r}"))),
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<i32> {
    let mut kv = load_kv(a.common.config.as_deref())?;
    let mut spec = synth_spec_from_kv(&mut kv)?;
    kv.finish()?;
    if let Some(s) = a.common.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let set = synth_dataset(&spec)?;
    let oracle = band_power_oracle_accuracy(&set, &spec)?;
    make_out(&a.common.out)?;
    save_dataset(&a.common.out.join("dataset.leld"), &set)?;
    let mut echo = synth_spec_pairs(&spec);
    if let Some(n) = a.stream_samples {
        if a.stream_class >= spec.n_classes {
            return Err(LelError::Config(format!(
                "stream class {} >= K = {}",
                a.stream_class, spec.n_classes
            )));
        }
        let long = SynthSpec {
            n_samples: n,
            trials_per_class: 1,
            n_subjects: 1,
            windows_per_trial: 1,
            seed: spec.seed ^ 0x5354_5245,
            ..spec.clone()
        };
        let rec = synth_dataset(&long)?
            .recordings
            .into_iter()
            .find(|r| r.label == a.stream_class)
            .expect("one trial per class");
        save_recording(
            &a.common.out.join("recording.leld"),
            &rec.samples,
            spec.sampling_rate,
            Some(rec.label),
        )?;
        echo.push(("stream_samples", n.to_string()));
        echo.push(("stream_class", a.stream_class.to_string()));
    }
    write_file(&a.common.out.join("run.cfg"), render(&echo))?;
    println!("windows: {}", set.len());
    println!("oracle accuracy: {oracle:.4}");
    Ok(EXIT_OK)
}

fn train_config(a: &TrainArgs, kv: &mut KvConfig) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    cfg.apply_kv(kv)?;
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    if let Some(m) = a.float_mode {
        cfg.float_mode = m;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct GridCell {
    learning_rate: f64,
    batch_size: usize,
    budget: f64,
    epochs: usize,
    best_epoch: usize,
    val_acc: f64,
    test_acc: f64,
    test_macro_f1: f64,
}

pub fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let mut kv = load_kv(a.common.config.as_deref())?;
    let data: PathBuf = match (&a.data, kv.take::<String>("data")?) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => p.into(),
        (None, None) => return Err(LelError::Config("no dataset: pass --data or set `data`".into())),
    };
    let mut cfg = train_config(a, &mut kv)?;
    let set = load_dataset(&data)?;
    let mut model_cfg = cfg.model_config(&set);
    model_cfg.apply_kv(&mut kv)?;
    kv.finish()?;
    // budget keys land in the model config; keep the training echo in sync
    cfg.budget = model_cfg.budget;
    let split = split_trials(&set, cfg.ratios, cfg.seed)?;
    let out = &a.common.out;
    make_out(out)?;
    let mut echo = vec![("data", data.display().to_string())];
    echo.extend(cfg.to_pairs());
    echo.extend(model_cfg.to_pairs().into_iter().filter(|(k, _)| {
        !matches!(
            *k,
            "n_channels"
                | "n_samples"
                | "n_classes"
                | "sampling_rate"
                | "l_s"
                | "l_att"
                | "l_affine"
                | "l_linear"
                | "dropout"
        )
    }));
    write_file(&out.join("run.cfg"), render(&echo))?;
    let test_idx = split.indices(&set, SplitName::Test);

    if let Some(ks) = &a.lip_k {
        let epochs = a.sweep_epochs.clone().unwrap_or(SENSITIVITY_EPOCHS.to_vec());
        let cells = sensitivity_sweep(&set, &split, &cfg, ks, &epochs)?;
        let roc_dir = out.join("roc");
        make_out(&roc_dir)?;
        let mut lines = String::new();
        for c in &cells {
            write_file(
                &roc_dir.join(format!("K{}_E{}.tsv", c.k, c.epochs)),
                export::roc_tsv(&c.test),
            )?;
            lines.push_str(
                &serde_json::to_string(&serde_json::json!({
                    "k": c.k, "epochs": c.epochs, "best_epoch": c.best_epoch,
                    "val_acc": c.best_val_acc, "test_acc": c.test.accuracy, "test_macro_f1": c.test.macro_f1,
                }))
                .unwrap(),
            );
            lines.push('\n');
            println!("K={:<5} epochs={:<4} test acc {:.4}", c.k, c.epochs, c.test.accuracy);
        }
        write_file(&out.join("sweep.jsonl"), lines)?;
        return Ok(EXIT_OK);
    }

    if a.grid {
        let max_e = *EPOCH_GRID.iter().max().unwrap();
        let mut lines = String::new();
        for lr in LR_GRID {
            for bs in BATCH_GRID {
                for l in BUDGET_GRID {
                    let c = TrainConfig {
                        learning_rate: lr,
                        batch_size: bs,
                        budget: LipschitzBudget::uniform(l),
                        epochs: max_e,
                        snapshot_epochs: EPOCH_GRID.to_vec(),
                        ..cfg.clone()
                    };
                    let mut mc = model_cfg.clone();
                    mc.budget = c.budget;
                    let res = training::train_model(Model::new(mc)?, &set, &split, &c)?;
                    for s in &res.snapshots {
                        let test = evaluate(&s.model, &set, &test_idx)?.fused;
                        let cell = GridCell {
                            learning_rate: lr,
                            batch_size: bs,
                            budget: l,
                            epochs: s.epoch,
                            best_epoch: s.best_epoch,
                            val_acc: res.report.epochs[s.best_epoch - 1].val_acc,
                            test_acc: test.accuracy,
                            test_macro_f1: test.macro_f1,
                        };
                        lines.push_str(&serde_json::to_string(&cell).unwrap());
                        lines.push('\n');
                        println!(
                            "lr={lr:e} batch={bs} L={l} epochs={}: val {:.4} test {:.4}",
                            s.epoch, cell.val_acc, cell.test_acc
                        );
                    }
                }
            }
        }
        write_file(&out.join("grid.jsonl"), lines)?;
        return Ok(EXIT_OK);
    }

    let model = Model::new(model_cfg)?;
    let res = training::train_model(model, &set, &split, &cfg)?;
    write_file(&out.join("report.jsonl"), res.report.to_jsonl())?;
    let test = evaluate(&res.model, &set, &test_idx)?;
    checkpoint::save(out, &res.model, Some(&render(&echo)), Some(&to_json(&test)))?;
    println!(
        "best epoch {} (val acc {:.4}); test acc {:.4}, macro F1 {:.4}",
        res.report.best_epoch, res.report.best_val_acc, test.fused.accuracy, test.fused.macro_f1
    );
    Ok(EXIT_OK)
}

fn split_name(s: &str) -> Result<Option<SplitName>> {
    match s {
        "train" => Ok(Some(SplitName::Train)),
        "val" => Ok(Some(SplitName::Val)),
        "test" => Ok(Some(SplitName::Test)),
        "all" => Ok(None),
        _ => Err(LelError::Config(format!(
            "split must be train, val, test or all, got {s:?}"
        ))),
    }
}

/// Split settings recorded in a checkpoint's training echo.
fn checkpoint_split(dir: &Path, set: &TrialSet) -> Result<crate::data::SplitAssignment> {
    let mut cfg = TrainConfig::default();
    let p = dir.join(checkpoint::TRAIN_CONFIG_FILE);
    if p.exists() {
        let mut kv = KvConfig::load(&p)?;
        cfg.seed = kv.take("seed")?.unwrap_or(cfg.seed);
        cfg.ratios.train = kv.take("train_ratio")?.unwrap_or(cfg.ratios.train);
        cfg.ratios.val = kv.take("val_ratio")?.unwrap_or(cfg.ratios.val);
        cfg.ratios.test = kv.take("test_ratio")?.unwrap_or(cfg.ratios.test);
    }
    split_trials(set, cfg.ratios, cfg.seed)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    load_kv(a.common.config.as_deref())?.finish()?;
    let (model, reset) = checkpoint::load(&a.checkpoint)?;
    let mut set = load_dataset(&a.data)?;
    training::check_compatible(&model, &set)?;
    let which = split_name(&a.split)?;
    let mut split = checkpoint_split(&a.checkpoint, &set)?;
    if let Some(s) = a.common.seed {
        split = split_trials(&set, split.ratios, s)?;
    }
    if a.float_mode == Some(FloatMode::F32) {
        set.recordings
            .iter_mut()
            .for_each(|r| r.samples.mapv_inplace(|v| v as f32 as f64));
    }
    let idx = match which {
        Some(n) => split.indices(&set, n),
        None => (0..set.len()).collect(),
    };
    let report = evaluate(&model, &set, &idx)?;
    make_out(&a.common.out)?;
    let echo = vec![
        ("checkpoint", a.checkpoint.display().to_string()),
        ("data", a.data.display().to_string()),
        ("split", a.split.clone()),
        ("split_seed", split.seed.to_string()),
        ("float_mode", a.float_mode.unwrap_or(FloatMode::F64).to_string()),
    ];
    write_file(&a.common.out.join("run.cfg"), render(&echo))?;
    write_file(&a.common.out.join("eval.json"), to_json(&report))?;
    for r in reset {
        eprintln!("warning: zero-norm gain {r} reset to ones");
    }
    println!(
        "{} windows: accuracy {:.4}, macro F1 {:.4}",
        report.n, report.fused.accuracy, report.fused.macro_f1
    );
    for (name, m) in &report.branches {
        println!("  {name:<15} {:.4}", m.accuracy);
    }
    Ok(EXIT_OK)
}

pub fn cmd_verify(a: &VerifyArgs) -> Result<i32> {
    let mut kv = load_kv(a.common.config.as_deref())?;
    let mut cfg = VerifyConfig::default();
    kv.take_into("n_pairs", &mut cfg.probe.n_pairs)?;
    kv.take_into("power_iters", &mut cfg.power_iters)?;
    kv.take_into("power_tol", &mut cfg.power_tol)?;
    kv.take_into("tol", &mut cfg.tol)?;
    kv.take_into("grad_h", &mut cfg.grad.h)?;
    kv.take_into("grad_tol", &mut cfg.grad.tol)?;
    if let Some(n) = kv.take::<usize>("grad_max_coords")? {
        cfg.grad.max_coords = Some(n);
    }
    kv.finish()?;
    if let Some(s) = a.common.seed {
        cfg.probe.seed = s;
        cfg.grad.seed = s;
    }
    let (model, reset) = checkpoint::load(&a.checkpoint)?;
    let windows = match &a.data {
        Some(p) => {
            let set = load_dataset(p)?;
            training::check_compatible(&model, &set)?;
            let n = set.len().min(64);
            set.batch(&(0..n).collect::<Vec<_>>()).data
        }
        None => ndarray::Array3::zeros((8, model.config.n_channels, model.config.n_samples)),
    };
    let pool = probe_pool(&windows.into_dyn(), cfg.probe.seed);
    let report = verify_model(&model, &pool, &cfg)?;
    make_out(&a.common.out)?;
    let echo = vec![
        ("checkpoint", a.checkpoint.display().to_string()),
        (
            "data",
            a.data.as_ref().map_or(String::new(), |p| p.display().to_string()),
        ),
        ("n_pairs", cfg.probe.n_pairs.to_string()),
        ("seed", cfg.probe.seed.to_string()),
        ("power_iters", cfg.power_iters.to_string()),
        ("power_tol", cfg.power_tol.to_string()),
        ("tol", cfg.tol.to_string()),
        ("grad_h", cfg.grad.h.to_string()),
        ("grad_tol", cfg.grad.tol.to_string()),
        (
            "grad_max_coords",
            cfg.grad.max_coords.map_or("all".into(), |n| n.to_string()),
        ),
    ];
    write_file(&a.common.out.join("run.cfg"), render(&echo))?;
    write_file(&a.common.out.join("verify.jsonl"), report.to_jsonl())?;
    for r in reset {
        eprintln!("warning: zero-norm gain {r} reset to ones");
    }
    print!("{}", report.to_table());
    if report.pass() {
        println!("verification passed");
        Ok(EXIT_OK)
    } else {
        for f in report.failures() {
            eprintln!("FAIL {f}");
        }
        Ok(EXIT_VERIFY_FAILED)
    }
}

pub fn cmd_stream(a: &StreamArgs) -> Result<i32> {
    load_kv(a.common.config.as_deref())?.finish()?;
    let (model, _) = checkpoint::load(&a.checkpoint)?;
    let rec = load_recording(&a.recording)?;
    let window = a.window.unwrap_or(model.config.n_samples);
    let stride = a.stride.unwrap_or(window);
    let out = stream_evaluate(&model, &rec, window, stride)?;
    make_out(&a.common.out)?;
    let echo = vec![
        ("checkpoint", a.checkpoint.display().to_string()),
        ("recording", a.recording.display().to_string()),
        ("window", window.to_string()),
        ("stride", stride.to_string()),
    ];
    write_file(&a.common.out.join("run.cfg"), render(&echo))?;
    write_file(&a.common.out.join("stream.jsonl"), out.to_jsonl())?;
    write_file(&a.common.out.join("latency.json"), to_json(&out.latency))?;
    println!(
        "{} windows; majority class {:?}; latency mean {:.3} ms, p95 {:.3} ms",
        out.rows.len(),
        out.majority(),
        out.latency.mean_ms,
        out.latency.p95_ms
    );
    Ok(EXIT_OK)
}

pub fn cmd_export(a: &ExportArgs) -> Result<i32> {
    let kind: ExportKind = a.kind.parse()?;
    let mut kv = load_kv(a.common.config.as_deref())?;
    let mut blend = DEFAULT_ATTENTION_BLEND;
    kv.take_into("connectivity_blend", &mut blend)?;
    kv.finish()?;
    let (model, _) = checkpoint::load(&a.checkpoint)?;
    let set = load_dataset(&a.data)?;
    training::check_compatible(&model, &set)?;
    let mut split = checkpoint_split(&a.checkpoint, &set)?;
    if let Some(s) = a.common.seed {
        split = split_trials(&set, split.ratios, s)?;
    }
    let test_idx = split.indices(&set, SplitName::Test);
    let out = &a.common.out;
    make_out(out)?;
    let echo = vec![
        ("checkpoint", a.checkpoint.display().to_string()),
        ("data", a.data.display().to_string()),
        ("kind", kind.to_string()),
        ("split_seed", split.seed.to_string()),
        ("connectivity_blend", blend.to_string()),
    ];
    write_file(&out.join("run.cfg"), render(&echo))?;
    match kind {
        ExportKind::Roc => {
            let r = evaluate(&model, &set, &test_idx)?;
            write_file(&out.join("roc_fused.tsv"), export::roc_tsv(&r.fused))?;
            for (name, m) in &r.branches {
                write_file(&out.join(format!("roc_{name}.tsv")), export::roc_tsv(m))?;
            }
        }
        ExportKind::Connectivity => {
            for (k, m) in export::connectivity(&model, &set, &test_idx, blend)?
                .into_iter()
                .enumerate()
            {
                match m {
                    Some(m) => write_file(&out.join(format!("connectivity_class{k}.tsv")), export::matrix_tsv(&m))?,
                    None => eprintln!("warning: class {k} has no test windows"),
                }
            }
        }
        ExportKind::FusionWeights => write_file(
            &out.join("fusion_weights.json"),
            to_json(&export::fusion_weights(&model)),
        )?,
    }
    println!("wrote {kind} export to {}", out.display());
    Ok(EXIT_OK)
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let res = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Stream(a) => cmd_stream(a),
        Command::Export(a) => cmd_export(a),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn parses_sweep_flags() {
        let cli = Cli::try_parse_from([
            "lel",
            "train",
            "--data",
            "d.leld",
            "--out",
            "o",
            "--lip-K",
            "0.1,1,10",
            "--epochs",
            "5",
            "--float-mode",
            "f32",
        ])
        .unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        assert_eq!(a.lip_k, Some(vec![0.1, 1.0, 10.0]));
        assert_eq!(a.float_mode, Some(FloatMode::F32));
    }

    #[test]
    fn exit_codes_are_distinct() {
        let codes = [
            EXIT_OK,
            EXIT_VERIFY_FAILED,
            EXIT_USAGE,
            EXIT_IO,
            EXIT_FORMAT,
            EXIT_CONTRACT,
            EXIT_DIVERGENCE,
            EXIT_NUMERIC,
            EXIT_DATA,
        ];
        let set: std::collections::BTreeSet<_> = codes.iter().collect();
        assert_eq!(set.len(), codes.len());
        assert_eq!(
            exit_code(&LelError::Divergence {
                epoch: 1,
                step: 0,
                loss: f64::NAN
            }),
            EXIT_DIVERGENCE
        );
    }

    #[test]
    fn synth_spec_keys_round_trip() {
        let s = SynthSpec {
            boost_db: 9.5,
            n_classes: 3,
            ..SynthSpec::default()
        };
        let mut kv = KvConfig::parse(&render(&synth_spec_pairs(&s))).unwrap();
        assert_eq!(synth_spec_from_kv(&mut kv).unwrap(), s);
        kv.finish().unwrap();
    }
}
