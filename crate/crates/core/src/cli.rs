//! Command-line front end. Configuration precedence is flags, then a config
//! file (`--config`), then built-in defaults; `MTPP_SEED` replaces the default seed.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::ctx_attention::{mark_loglik, sequence_mark_loglik, train_marks, EncoderConfig, MarkModel, TrainOptions};
use crate::error::{Error, Result};
use crate::event_data::{format_record, load_sequences, write_dataset, Event, EventSequence, LoadOptions};
use crate::generative::{dtpp_intensity, make_synthetic, SplitCounts, SyntheticKind};
use crate::inference::{benchmark_inference, rollout_batch, BenchmarkOptions};
use crate::io::{load_mark_model, load_mixture, read_json, write_atomic, write_json};
use crate::lognorm_mix::{collect_gaps, fit_em, time_loglik, EmOptions, MixtureParams};
use crate::metrics::{
    bootstrap_ci, bootstrap_ci_with, next_event_predictions, otd, rmse_star, CountWindow, MetricReport,
};

/// Effective configuration of one invocation. Echoed into every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub subcommand: String,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub mix: Option<PathBuf>,
    pub enc: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub num_marks: Option<usize>,
    pub jitter: bool,

    pub kind: String,
    pub rate: f64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub seq_len: usize,

    pub components: usize,
    pub em_max_iter: usize,
    pub em_tol: f64,

    pub layers: usize,
    pub d_model: usize,
    pub d_qk: Option<usize>,
    pub n_heads: usize,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub seed: u64,

    pub mode: String,
    pub horizon: usize,
    pub n_samples: usize,
    pub c_del: Vec<f64>,
    pub count_window: CountWindow,
    pub n_resamples: usize,
    pub level: f64,
    pub repeats: usize,

    pub grid_d: Vec<usize>,
    pub grid_l: Vec<usize>,

    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            subcommand: String::new(),
            train: None,
            dev: None,
            test: None,
            mix: None,
            enc: None,
            out: None,
            num_marks: None,
            jitter: false,
            kind: "hawkes1".into(),
            rate: 1.0,
            n_train: 1024,
            n_dev: 256,
            n_test: 512,
            seq_len: 64,
            components: 16,
            em_max_iter: 500,
            em_tol: 1e-8,
            layers: 2,
            d_model: 32,
            d_qk: None,
            n_heads: 1,
            epochs: 200,
            batch_size: 8,
            lr: 1e-3,
            patience: 10,
            seed: 0,
            mode: "next".into(),
            horizon: 20,
            n_samples: 1,
            c_del: vec![0.5, 1.0, 2.0, 4.0],
            count_window: CountWindow::TrueSpan,
            n_resamples: 1000,
            level: 0.95,
            repeats: 5,
            grid_d: vec![4, 8, 16, 32, 64, 128],
            grid_l: vec![1, 2, 3],
            threads: None,
        }
    }
}

impl RunConfig {
    fn defaults_from_env() -> Result<Self> {
        let mut cfg = Self::default();
        if let Ok(seed) = std::env::var("MTPP_SEED") {
            cfg.seed = seed
                .trim()
                .parse()
                .map_err(|_| Error::Usage(format!("MTPP_SEED must be an unsigned integer, got {seed:?}")))?;
        }
        Ok(cfg)
    }

    /// Reads a config file: either a bare config object or any output
    /// document carrying a `run_config` entry. Missing fields keep `base`.
    fn merge_file(base: Self, path: &Path) -> Result<Self> {
        let doc: Value = read_json(path)?;
        let overrides = match doc.get("run_config") {
            Some(inner) => inner.clone(),
            None => doc,
        };
        let Value::Object(overrides) = overrides else {
            return Err(Error::Usage(format!("{}: config must be an object", path.display())));
        };
        let Value::Object(mut merged) = serde_json::to_value(base)? else {
            unreachable!("RunConfig serializes to an object")
        };
        merged.extend(overrides);
        Ok(serde_json::from_value(Value::Object(merged))?)
    }

    fn encoder_config(&self, num_marks: usize, layers: usize, d_model: usize) -> EncoderConfig {
        let mut c = EncoderConfig::new(num_marks, layers, d_model);
        c.d_qk = self.d_qk.unwrap_or(d_model);
        c.n_heads = self.n_heads;
        c.seed = self.seed;
        c
    }

    fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            patience: self.patience,
            seed: self.seed,
        }
    }

    fn synthetic_kind(&self) -> Result<SyntheticKind> {
        Ok(match self.kind.as_str() {
            "hawkes1" => SyntheticKind::Hawkes1,
            "hawkes2" => SyntheticKind::Hawkes2,
            "poisson" => SyntheticKind::Poisson { rate: self.rate },
            "cyclic_marks" => SyntheticKind::CyclicMarks {
                num_marks: self.num_marks.unwrap_or(3),
            },
            other => {
                return Err(Error::Usage(format!(
                    "unknown kind {other:?} (expected hawkes1, hawkes2, poisson or cyclic_marks)"
                )))
            }
        })
    }
}

#[derive(Parser)]
#[command(name = "dtpp", version, about = "Decomposable transformer point processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Sample {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Fit the inter-event time mixture.
    FitTimes {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        times: TimeArgs,
    },
    /// Train the mark classifier.
    FitMarks {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        encoder: EncoderArgs,
        #[command(flatten)]
        training: TrainArgs,
    },
    /// Score held-out data.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Predict next events or long horizons.
    Predict {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        eval: EvalArgs,
        /// `next` or `horizon`.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Time batched rollout against thinning rollout.
    Benchmark {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Sweep model width and depth, selecting by dev log-likelihood.
    GridSearch {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        training: TrainArgs,
        #[arg(long = "d-grid", value_delimiter = ',')]
        d_grid: Option<Vec<usize>>,
        #[arg(long = "l-grid", value_delimiter = ',')]
        l_grid: Option<Vec<usize>>,
        #[arg(long = "n-heads")]
        n_heads: Option<usize>,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// JSON config file, or any output document with an embedded `run_config`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for parallel sections.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    /// hawkes1, hawkes2, poisson or cyclic_marks.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long = "n-train")]
    n_train: Option<usize>,
    #[arg(long = "n-dev")]
    n_dev: Option<usize>,
    #[arg(long = "n-test")]
    n_test: Option<usize>,
    #[arg(long = "seq-len")]
    seq_len: Option<usize>,
    /// Poisson rate.
    #[arg(long)]
    rate: Option<f64>,
    /// Number of marks (cyclic_marks).
    #[arg(long = "K")]
    num_marks: Option<usize>,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Mark alphabet size; inferred from the data when omitted.
    #[arg(long = "K")]
    num_marks: Option<usize>,
    /// Separate tied timestamps instead of rejecting them.
    #[arg(long)]
    jitter: bool,
}

#[derive(Args)]
struct TimeArgs {
    /// Mixture components.
    #[arg(long = "M")]
    components: Option<usize>,
    #[arg(long = "max-iter")]
    max_iter: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Args)]
struct EncoderArgs {
    #[arg(long = "L")]
    layers: Option<usize>,
    #[arg(long = "d-model")]
    d_model: Option<usize>,
    #[arg(long = "d-qk")]
    d_qk: Option<usize>,
    #[arg(long = "n-heads")]
    n_heads: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    mix: Option<PathBuf>,
    #[arg(long)]
    enc: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Horizon length.
    #[arg(long = "P")]
    horizon: Option<usize>,
    #[arg(long = "n-samples")]
    n_samples: Option<usize>,
    /// OTD deletion costs, in units of the mean inter-event time.
    #[arg(long = "c-del", value_delimiter = ',')]
    c_del: Option<Vec<f64>>,
    #[arg(long = "n-resamples")]
    n_resamples: Option<usize>,
    #[arg(long)]
    level: Option<f64>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

impl CommonArgs {
    fn base(&self) -> Result<RunConfig> {
        let cfg = RunConfig::defaults_from_env()?;
        match &self.config {
            Some(path) => RunConfig::merge_file(cfg, path),
            None => Ok(cfg),
        }
    }

    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.seed, self.seed);
        set_opt(&mut cfg.out, self.out.clone());
        set_opt(&mut cfg.threads, self.threads);
    }
}

impl DataArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        set_opt(&mut cfg.train, self.train.clone());
        set_opt(&mut cfg.dev, self.dev.clone());
        set_opt(&mut cfg.test, self.test.clone());
        set_opt(&mut cfg.num_marks, self.num_marks);
        cfg.jitter |= self.jitter;
    }
}

impl EvalArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.horizon, self.horizon);
        set(&mut cfg.n_samples, self.n_samples);
        set(&mut cfg.c_del, self.c_del.clone());
        set(&mut cfg.n_resamples, self.n_resamples);
        set(&mut cfg.level, self.level);
    }
}

impl TrainArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.epochs, self.epochs);
        set(&mut cfg.batch_size, self.batch_size);
        set(&mut cfg.lr, self.lr);
        set(&mut cfg.patience, self.patience);
    }
}

impl ModelArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        set_opt(&mut cfg.mix, self.mix.clone());
        set_opt(&mut cfg.enc, self.enc.clone());
    }
}

fn effective_config(command: &Command) -> Result<RunConfig> {
    let (name, common) = match command {
        Command::Sample { common, .. } => ("sample", common),
        Command::FitTimes { common, .. } => ("fit-times", common),
        Command::FitMarks { common, .. } => ("fit-marks", common),
        Command::Eval { common, .. } => ("eval", common),
        Command::Predict { common, .. } => ("predict", common),
        Command::Benchmark { common, .. } => ("benchmark", common),
        Command::GridSearch { common, .. } => ("grid-search", common),
    };
    let mut cfg = common.base()?;
    cfg.subcommand = name.to_string();
    common.apply(&mut cfg);
    match command {
        Command::Sample { synth, .. } => {
            set(&mut cfg.kind, synth.kind.clone());
            set(&mut cfg.n_train, synth.n_train);
            set(&mut cfg.n_dev, synth.n_dev);
            set(&mut cfg.n_test, synth.n_test);
            set(&mut cfg.seq_len, synth.seq_len);
            set(&mut cfg.rate, synth.rate);
            set_opt(&mut cfg.num_marks, synth.num_marks);
        }
        Command::FitTimes { data, times, .. } => {
            data.apply(&mut cfg);
            set(&mut cfg.components, times.components);
            set(&mut cfg.em_max_iter, times.max_iter);
            set(&mut cfg.em_tol, times.tol);
        }
        Command::FitMarks {
            data,
            encoder,
            training,
            ..
        } => {
            data.apply(&mut cfg);
            training.apply(&mut cfg);
            set(&mut cfg.layers, encoder.layers);
            set(&mut cfg.d_model, encoder.d_model);
            set_opt(&mut cfg.d_qk, encoder.d_qk);
            set(&mut cfg.n_heads, encoder.n_heads);
        }
        Command::Eval { data, models, eval, .. } => {
            data.apply(&mut cfg);
            models.apply(&mut cfg);
            eval.apply(&mut cfg);
        }
        Command::Predict {
            data,
            models,
            eval,
            mode,
            ..
        } => {
            data.apply(&mut cfg);
            models.apply(&mut cfg);
            eval.apply(&mut cfg);
            set(&mut cfg.mode, mode.clone());
        }
        Command::Benchmark {
            data,
            models,
            eval,
            repeats,
            ..
        } => {
            data.apply(&mut cfg);
            models.apply(&mut cfg);
            eval.apply(&mut cfg);
            set(&mut cfg.repeats, *repeats);
        }
        Command::GridSearch {
            data,
            training,
            d_grid,
            l_grid,
            n_heads,
            ..
        } => {
            data.apply(&mut cfg);
            training.apply(&mut cfg);
            set(&mut cfg.grid_d, d_grid.clone());
            set(&mut cfg.grid_l, l_grid.clone());
            set(&mut cfg.n_heads, *n_heads);
        }
    }
    Ok(cfg)
}

fn require<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Usage(format!("missing required --{flag}")))
}

fn out_path(cfg: &RunConfig, default: &str) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_timing(path: &Path, start: Instant, extra: Value) -> Result<()> {
    let mut doc = json!({ "elapsed_secs": start.elapsed().as_secs_f64() });
    if let (Value::Object(d), Value::Object(e)) = (&mut doc, extra) {
        d.extend(e);
    }
    write_json(&sidecar(path, ".timing.json"), &doc)
}

/// Loaded splits with the resolved mark alphabet size.
struct Splits {
    num_marks: usize,
    train: Vec<EventSequence>,
    dev: Vec<EventSequence>,
    test: Vec<EventSequence>,
}

fn load_splits(cfg: &RunConfig, model_marks: Option<usize>) -> Result<Splits> {
    let opts = LoadOptions {
        jitter: cfg.jitter,
        seed: cfg.seed,
    };
    let declared = cfg.num_marks.or(model_marks);
    let limit = declared.unwrap_or(usize::MAX);
    let load = |p: &Option<PathBuf>| -> Result<Vec<EventSequence>> {
        match p {
            Some(path) => {
                let (seqs, report) = load_sequences(path, limit, &opts)?;
                if report.jittered_events > 0 {
                    log::info!("{}: jittered {} event(s)", path.display(), report.jittered_events);
                }
                Ok(seqs)
            }
            None => Ok(Vec::new()),
        }
    };
    let (train, dev, test) = (load(&cfg.train)?, load(&cfg.dev)?, load(&cfg.test)?);
    let num_marks = match declared {
        Some(k) => k,
        None => train
            .iter()
            .chain(&dev)
            .chain(&test)
            .filter_map(EventSequence::max_mark)
            .max()
            .map_or(1, |m| m + 1),
    };
    if let Some(m) = model_marks {
        if m != num_marks {
            return Err(Error::Usage(format!("data declare K={num_marks} but the models use K={m}")));
        }
    }
    Ok(Splits {
        num_marks,
        train,
        dev,
        test,
    })
}

fn load_models(cfg: &RunConfig) -> Result<(MixtureParams, MarkModel)> {
    let mix = load_mixture(require(&cfg.mix, "mix")?)?;
    let enc = load_mark_model(require(&cfg.enc, "enc")?)?;
    if mix.num_marks() != enc.num_marks() {
        return Err(Error::Usage(format!(
            "mixture has K={} but the encoder has K={}",
            mix.num_marks(),
            enc.num_marks()
        )));
    }
    Ok((mix, enc))
}

fn cmd_sample(cfg: &RunConfig) -> Result<()> {
    let start = Instant::now();
    let kind = cfg.synthetic_kind()?;
    let counts = SplitCounts {
        train: cfg.n_train,
        dev: cfg.n_dev,
        test: cfg.n_test,
    };
    let ds = make_synthetic(kind, counts, cfg.seq_len, cfg.seed)?;
    let dir = out_path(cfg, "data");
    let mut tokens = serde_json::Map::new();
    for name in ["train", "dev", "test"] {
        let seqs = ds.split(name).unwrap_or_default();
        write_dataset(&dir.join(format!("{name}.jsonl")), seqs)?;
        tokens.insert(name.into(), json!(ds.token_count(name)));
    }
    let manifest = dir.join("manifest.json");
    write_json(
        &manifest,
        &json!({ "run_config": cfg, "num_marks": ds.num_marks(), "tokens": tokens }),
    )?;
    write_timing(&manifest, start, json!({}))?;
    println!("wrote {} ({} marks)", dir.display(), ds.num_marks());
    Ok(())
}

fn cmd_fit_times(cfg: &RunConfig) -> Result<()> {
    let start = Instant::now();
    require(&cfg.train, "train")?;
    let data = load_splits(cfg, None)?;
    let opts = EmOptions {
        components: cfg.components,
        seed: cfg.seed,
        max_iter: cfg.em_max_iter,
        tol: cfg.em_tol,
    };
    let mix = fit_em(&collect_gaps(&data.train), data.num_marks, &opts)?;
    let n: usize = data.train.iter().map(EventSequence::len).sum();
    let ll: f64 = data.train.iter().map(|s| time_loglik(&mix, s)).sum();
    let out = out_path(cfg, "mix.json");
    write_json(
        &out,
        &json!({ "run_config": cfg, "mixture": mix, "train_time_loglik_per_event": ll / n.max(1) as f64 }),
    )?;
    write_timing(&out, start, json!({}))?;
    println!("time log-likelihood/event on train: {:.6}", ll / n.max(1) as f64);
    Ok(())
}

fn cmd_fit_marks(cfg: &RunConfig) -> Result<()> {
    let start = Instant::now();
    require(&cfg.train, "train")?;
    require(&cfg.dev, "dev")?;
    let data = load_splits(cfg, None)?;
    let init = MarkModel::init(cfg.encoder_config(data.num_marks, cfg.layers, cfg.d_model))?;
    let report = train_marks(init, &data.train, &data.dev, &cfg.train_options())?;
    let out = out_path(cfg, "enc.json");
    write_json(
        &out,
        &json!({
            "run_config": cfg,
            "model": report.model,
            "dev_curve": report.dev_curve,
            "best_epoch": report.best_epoch,
            "epochs_run": report.epochs_run,
            "diverged": report.diverged,
        }),
    )?;
    write_timing(&out, start, json!({ "epochs_run": report.epochs_run }))?;
    if report.diverged {
        return Err(Error::Diverged {
            epoch: report.epochs_run + 1,
        });
    }
    println!(
        "best dev mark log-likelihood/event {:.6} at epoch {}",
        report.dev_curve[report.best_epoch], report.best_epoch
    );
    Ok(())
}

/// Splits each sequence into a history and its final `p` events.
fn horizon_split(seqs: &[EventSequence], p: usize) -> (Vec<Vec<Event>>, Vec<Vec<Event>>) {
    seqs.iter()
        .filter(|s| s.len() > p)
        .map(|s| {
            let (h, f) = s.events().split_at(s.len() - p);
            (h.to_vec(), f.to_vec())
        })
        .unzip()
}

fn mean_gap(seqs: &[EventSequence]) -> f64 {
    let (sum, n) = seqs
        .iter()
        .filter(|s| !s.is_empty())
        .fold((0.0, 0usize), |(a, n), s| (a + s.last_time(), n + s.len()));
    if n == 0 {
        1.0
    } else {
        sum / n as f64
    }
}

/// Metric reports for held-out data, in a fixed order.
pub fn evaluate(
    cfg: &RunConfig,
    mix: &MixtureParams,
    enc: &MarkModel,
    test: &[EventSequence],
) -> Result<Vec<MetricReport>> {
    if test.is_empty() {
        return Err(Error::Usage("the test split is empty".into()));
    }
    let (level, n_res, seed) = (cfg.level, cfg.n_resamples, cfg.seed);
    let mut reports = Vec::new();

    let counts: Vec<f64> = test.iter().map(|s| s.len() as f64).collect();
    let time_ll: Vec<f64> = test.iter().map(|s| time_loglik(mix, s)).collect();
    let mark_ll: Vec<f64> = test
        .iter()
        .map(|s| sequence_mark_loglik(enc, s))
        .collect::<Result<_>>()?;
    let total_ll: Vec<f64> = time_ll.iter().zip(&mark_ll).map(|(a, b)| a + b).collect();
    for (name, values) in [
        ("loglik_per_event", &total_ll),
        ("time_loglik_per_event", &time_ll),
        ("mark_loglik_per_event", &mark_ll),
    ] {
        let ratio = |idx: &[usize]| {
            let num: f64 = idx.iter().map(|&i| values[i]).sum();
            let den: f64 = idx.iter().map(|&i| counts[i]).sum();
            num / den.max(1.0)
        };
        reports.push(bootstrap_ci_with(name, values, ratio, level, n_res, seed)?);
    }

    let pairs = next_event_predictions(mix, enc, test)?;
    if !pairs.is_empty() {
        let sq: Vec<f64> = pairs.iter().map(|(p, t)| (p.time - t.time).powi(2)).collect();
        let rmse = |idx: &[usize]| (idx.iter().map(|&i| sq[i]).sum::<f64>() / idx.len() as f64).sqrt();
        reports.push(bootstrap_ci_with("rmse", &sq, rmse, level, n_res, seed)?);
        let wrong: Vec<f64> = pairs
            .iter()
            .map(|(p, t)| if p.mark == t.mark { 0.0 } else { 100.0 })
            .collect();
        reports.push(bootstrap_ci("error_rate", &wrong, level, n_res, seed)?);
    }

    if cfg.horizon > 0 {
        let (histories, truths) = horizon_split(test, cfg.horizon);
        if !histories.is_empty() {
            let preds = rollout_batch(mix, enc, &histories, cfg.horizon)?;
            let pred_events: Vec<&[Event]> = preds.iter().map(|h| h.events.as_slice()).collect();
            let unit = mean_gap(test);
            let per_seq: Vec<f64> = pred_events
                .iter()
                .zip(&truths)
                .map(|(p, t)| {
                    cfg.c_del.iter().map(|c| otd(p, t, c * unit)).sum::<f64>() / cfg.c_del.len().max(1) as f64
                })
                .collect();
            reports.push(bootstrap_ci("avg_otd", &per_seq, level, n_res, seed)?);
            let sq: Vec<f64> = pred_events
                .iter()
                .zip(&truths)
                .map(|(p, t)| {
                    let r = rmse_star(&[p], &[t], enc.num_marks(), cfg.count_window)?;
                    Ok(r * r)
                })
                .collect::<Result<_>>()?;
            let stat = |idx: &[usize]| (idx.iter().map(|&i| sq[i]).sum::<f64>() / idx.len() as f64).sqrt();
            reports.push(bootstrap_ci_with("rmse_star", &sq, stat, level, n_res, seed)?);
        }
    }
    Ok(reports)
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let start = Instant::now();
    require(&cfg.test, "test")?;
    let (mix, enc) = load_models(cfg)?;
    let data = load_splits(cfg, Some(enc.num_marks()))?;
    let reports = evaluate(cfg, &mix, &enc, &data.test)?;
    println!("{:<24} {:>14} {:>14} {:>14}", "metric", "point", "ci_low", "ci_high");
    for r in &reports {
        println!("{:<24} {:>14.6} {:>14.6} {:>14.6}", r.name, r.point, r.ci_low, r.ci_high);
    }
    let out = out_path(cfg, "report.json");
    write_json(&out, &json!({ "run_config": cfg, "metrics": reports }))?;
    write_timing(&out, start, json!({}))?;
    Ok(())
}

fn cmd_predict(cfg: &RunConfig) -> Result<()> {
    let start = Instant::now();
    require(&cfg.test, "test")?;
    let (mix, enc) = load_models(cfg)?;
    let data = load_splits(cfg, Some(enc.num_marks()))?;
    let mut lines = String::new();
    match cfg.mode.as_str() {
        "next" => {
            for seq in &data.test {
                let pairs = next_event_predictions(&mix, &enc, std::slice::from_ref(seq))?;
                let preds: Vec<Event> = pairs.into_iter().map(|(p, _)| p).collect();
                lines.push_str(&format_record(&preds, None));
                lines.push('\n');
            }
        }
        "horizon" => {
            if cfg.horizon == 0 {
                return Err(Error::Usage("--P must be >= 1".into()));
            }
            let (histories, _) = horizon_split(&data.test, cfg.horizon);
            for h in rollout_batch(&mix, &enc, &histories, cfg.horizon)? {
                lines.push_str(&format_record(&h.events, None));
                lines.push('\n');
            }
        }
        other => return Err(Error::Usage(format!("unknown --mode {other:?} (expected next or horizon)"))),
    }
    let out = out_path(cfg, "predictions.jsonl");
    write_atomic(&out, lines.as_bytes())?;
    write_json(&sidecar(&out, ".config.json"), &json!({ "run_config": cfg }))?;
    write_timing(&out, start, json!({}))?;
    Ok(())
}

fn cmd_benchmark(cfg: &RunConfig) -> Result<()> {
    require(&cfg.test, "test")?;
    let (mix, enc) = load_models(cfg)?;
    let data = load_splits(cfg, Some(enc.num_marks()))?;
    let histories: Vec<&[Event]> = data.test.iter().map(|s| s.events()).collect();
    let opts = BenchmarkOptions {
        repeats: cfg.repeats,
        n_samples: cfg.n_samples,
        seed: cfg.seed,
    };
    let model = dtpp_intensity(&mix, &enc);
    let report = benchmark_inference(&mix, &enc, &model, &histories, cfg.horizon, &opts)?;
    println!(
        "rollout {:.4}s ± {:.4}  thinning {:.4}s ± {:.4}  speedup {}",
        report.rollout_mean,
        report.rollout_std,
        report.thinning_mean,
        report.thinning_std,
        report.speedup.map_or("n/a".to_string(), |s| format!("{s:.1}x"))
    );
    let out = out_path(cfg, "benchmark.json");
    write_json(&out, &json!({ "run_config": cfg, "report": report }))
}

fn cmd_grid_search(cfg: &RunConfig) -> Result<()> {
    let start = Instant::now();
    require(&cfg.train, "train")?;
    require(&cfg.dev, "dev")?;
    let data = load_splits(cfg, None)?;
    let dev_events = data.dev.iter().map(EventSequence::len).sum::<usize>().max(1) as f64;
    let mut results = Vec::new();
    let mut best: Option<(f64, MarkModel)> = None;
    for &layers in &cfg.grid_l {
        for &d in &cfg.grid_d {
            let mut ecfg = cfg.encoder_config(data.num_marks, layers, d);
            ecfg.d_qk = d;
            let report = train_marks(MarkModel::init(ecfg)?, &data.train, &data.dev, &cfg.train_options())?;
            let dev_ll = mark_loglik(&report.model, &data.dev)? / dev_events;
            log::info!("L={layers} D={d}: dev mark log-likelihood/event {dev_ll:.6}");
            results.push(json!({
                "layers": layers,
                "d_model": d,
                "dev_loglik_per_event": dev_ll,
                "best_epoch": report.best_epoch,
                "diverged": report.diverged,
            }));
            if best.as_ref().is_none_or(|(b, _)| dev_ll > *b) {
                best = Some((dev_ll, report.model));
            }
        }
    }
    let Some((best_ll, model)) = best else {
        return Err(Error::Usage("empty grid".into()));
    };
    let out = out_path(cfg, "grid.json");
    write_json(
        &out,
        &json!({
            "run_config": cfg,
            "results": results,
            "best": { "layers": model.config.layers, "d_model": model.config.d_model, "dev_loglik_per_event": best_ll },
            "model": model,
        }),
    )?;
    write_timing(&out, start, json!({}))?;
    println!(
        "best L={} D={} dev mark log-likelihood/event {best_ll:.6}",
        model.config.layers, model.config.d_model
    );
    Ok(())
}

fn dispatch(command: &Command, cfg: &RunConfig) -> Result<()> {
    match command {
        Command::Sample { .. } => cmd_sample(cfg),
        Command::FitTimes { .. } => cmd_fit_times(cfg),
        Command::FitMarks { .. } => cmd_fit_marks(cfg),
        Command::Eval { .. } => cmd_eval(cfg),
        Command::Predict { .. } => cmd_predict(cfg),
        Command::Benchmark { .. } => cmd_benchmark(cfg),
        Command::GridSearch { .. } => cmd_grid_search(cfg),
    }
}

/// Runs the CLI on `args` (without the program name) and returns the exit status:
/// 0 on success, 2 on usage errors, 1 on any other failure.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let argv = std::iter::once(OsString::from("dtpp")).chain(args.into_iter().map(Into::into));
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = effective_config(&cli.command).and_then(|cfg| {
        let mut pool = rayon::ThreadPoolBuilder::new();
        if let Some(n) = cfg.threads {
            pool = pool.num_threads(n);
        }
        let pool = pool
            .build()
            .map_err(|e| Error::Usage(format!("cannot start {:?} worker threads: {e}", cfg.threads)))?;
        pool.install(|| dispatch(&cli.command, &cfg))
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Usage(_)) {
                2
            } else {
                1
            }
        }
    }
}
