//! `minnet` command line: train, eval, robustness, probe, count-params.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use minnet::checkpoint::Checkpoint;
use minnet::config::{parse_kv, RunConfig, DATA_DIR_ENV};
use minnet::data::{self, ChannelStats, ImageRecord, NUM_CLASSES};
use minnet::eval::{self, SqCache};
use minnet::model::{build, Model};
use minnet::train::{self, TrainData};

/// Seeds of the synthetic train and test sets; fixed so every model seed
/// sees the same images.
pub const SYNTHETIC_TRAIN_SEED: u64 = 0x5eed_0001;
pub const SYNTHETIC_TEST_SEED: u64 = 0x5eed_0002;

#[derive(Debug, Parser)]
#[command(name = "minnet", version, about = "Min-block networks on Cifar-10")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints plus the epoch log.
    Train(Opts),
    /// Test error of a checkpoint on the clean test set.
    Eval(Opts),
    /// Error and POCP over JPEG qualities.
    Robustness(Opts),
    /// Hyperselectivity probe of every Min-block channel.
    Probe(Opts),
    /// Number of learnable parameters.
    CountParams(Opts),
}

/// Flags shared by every command; each one overrides the config key of the
/// same name.
#[derive(Debug, Args, Default)]
pub struct Opts {
    /// key = value file; flags and the environment override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra key=value override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    /// DenseNet depth L = 6N + 4.
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub q: Option<usize>,
    /// Substitute Min-blocks.
    #[arg(long)]
    pub min: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub base_width: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Use the seeded synthetic image set.
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Comma-separated JPEG qualities.
    #[arg(long)]
    pub qualities: Option<String>,
    #[arg(long)]
    pub probe_layer: Option<String>,
    /// Comma-separated perturbation sizes.
    #[arg(long)]
    pub probe_eps: Option<String>,
}

impl Opts {
    fn flag_layer(&self) -> Result<Vec<(String, String)>> {
        let mut kv: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                kv.push((k.to_string(), v));
            }
        };
        let s = |v: &Option<PathBuf>| v.as_ref().map(|p| p.display().to_string());
        put("family", self.family.clone());
        put("n", self.n.map(|v| v.to_string()));
        put("k", self.k.map(|v| v.to_string()));
        put("depth", self.depth.map(|v| v.to_string()));
        put("alpha", self.alpha.map(|v| v.to_string()));
        put("q", self.q.map(|v| v.to_string()));
        put("min", self.min.then(|| "true".into()));
        put("seed", self.seed.map(|v| v.to_string()));
        put("base_width", self.base_width.map(|v| v.to_string()));
        put("epochs", self.epochs.map(|v| v.to_string()));
        put("batch_size", self.batch_size.map(|v| v.to_string()));
        put("lr", self.lr.map(|v| v.to_string()));
        put("data_dir", s(&self.data_dir));
        put("synthetic", self.synthetic.then(|| "true".into()));
        put("out_dir", s(&self.out_dir));
        put("checkpoint", s(&self.checkpoint));
        put("cache_dir", s(&self.cache_dir));
        put("qualities", self.qualities.clone());
        put("probe_layer", self.probe_layer.clone());
        put("probe_eps", self.probe_eps.clone());
        for pair in &self.set {
            let (k, v) = pair.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {pair:?}"))?;
            kv.push((k.trim().replace('-', "_"), v.trim().to_string()));
        }
        Ok(kv)
    }

    /// File, then environment, then flags.
    pub fn resolve(&self, env_data_dir: Option<String>) -> Result<RunConfig> {
        let mut layers = Vec::new();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            layers.push(parse_kv(&text).with_context(|| format!("parsing {}", path.display()))?);
        }
        if let Some(dir) = env_data_dir.filter(|d| !d.is_empty()) {
            layers.push(vec![("data_dir".into(), dir)]);
        }
        layers.push(self.flag_layer()?);
        Ok(RunConfig::from_layers(&layers)?)
    }
}

/// Parse `args` (program name first) and run the command.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    let env_dir = std::env::var(DATA_DIR_ENV).ok();
    let (opts, cmd): (&Opts, fn(&RunConfig, &mut dyn Write) -> Result<()>) = match &cli.command {
        Command::Train(o) => (o, cmd_train),
        Command::Eval(o) => (o, cmd_eval),
        Command::Robustness(o) => (o, cmd_robustness),
        Command::Probe(o) => (o, cmd_probe),
        Command::CountParams(o) => (o, cmd_count_params),
    };
    let cfg = opts.resolve(env_dir)?;
    cmd(&cfg, out)
}

/// Train and test records plus the label of their source.
pub fn load_data(cfg: &RunConfig) -> Result<(Vec<ImageRecord>, Vec<ImageRecord>, String)> {
    let classes = cfg.model.num_classes;
    let (mut tr, mut te, source) = match (&cfg.data.dir, cfg.data.synthetic) {
        (Some(dir), false) => {
            let (tr, te) =
                data::load_cifar10(dir).with_context(|| format!("loading Cifar-10 from {}", dir.display()))?;
            (tr, te, format!("cifar10:{}", dir.display()))
        }
        (None, false) => bail!("no data: set data_dir, {DATA_DIR_ENV}, or synthetic = true"),
        (_, true) => {
            if classes > NUM_CLASSES {
                bail!("synthetic data has at most {NUM_CLASSES} classes");
            }
            let tr = data::synthetic_dataset(cfg.data.synthetic_train, classes, SYNTHETIC_TRAIN_SEED)?;
            let te = data::synthetic_dataset(cfg.data.synthetic_test, classes, SYNTHETIC_TEST_SEED)?;
            (tr, te, "synthetic".to_string())
        }
    };
    if cfg.data.train_limit > 0 {
        tr.truncate(cfg.data.train_limit);
    }
    if cfg.data.test_limit > 0 {
        te.truncate(cfg.data.test_limit);
    }
    Ok((tr, te, source))
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    fs::write(cfg.out_dir.join("config.txt"), cfg.echo()).context("writing effective config")?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join("final.mnck"))
}

fn load_model(cfg: &RunConfig) -> Result<Model<f32>> {
    let path = checkpoint_path(cfg);
    let ck = Checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(ck.to_model()?)
}

fn stats_of(train: &[ImageRecord]) -> Result<ChannelStats> {
    Ok(data::compute_channel_stats(train)?)
}

pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let (tr, te, source) = load_data(cfg)?;
    prepare_out(cfg)?;
    let stats = stats_of(&tr)?;
    let mut model = build::<f32>(&cfg.model)?;
    writeln!(out, "data: {source} ({} train, {} test)", tr.len(), te.len())?;
    writeln!(out, "model: {} blocks, {} parameters", model.plan.kinds().len(), model.count_params())?;
    let report = train::train(&mut model, TrainData { train: &tr, test: &te, stats: &stats }, &cfg.train, |e| {
        log::info!(
            "epoch {} lr {} loss {:.4} test error {}",
            e.epoch,
            e.lr,
            e.train_loss,
            e.test_error.map(|v| format!("{v:.4}")).unwrap_or_default()
        );
    })?;
    let mut w = create(&cfg.out_dir.join("train_log.csv"))?;
    train::write_log_csv(&report.log, &mut w)?;
    w.flush()?;
    Checkpoint::from_model(&model, cfg.train.epochs as u64).save(&cfg.out_dir.join("final.mnck"))?;
    let mut best = model.clone();
    let best_epoch = match &report.best {
        Some(b) => {
            best.params = b.params.clone();
            best.buffers = b.buffers.clone();
            b.epoch
        }
        None => cfg.train.epochs,
    };
    Checkpoint::from_model(&best, best_epoch as u64).save(&cfg.out_dir.join("best.mnck"))?;
    match (report.final_test_error(), &report.best) {
        (Some(f), Some(b)) => {
            writeln!(out, "final test error: {f:.4}")?;
            writeln!(out, "min test error: {:.4} (epoch {})", b.test_error, b.epoch)?;
        }
        _ => writeln!(out, "no epochs run; wrote initial weights")?,
    }
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let model = load_model(cfg)?;
    let (tr, te, source) = load_data(cfg)?;
    prepare_out(cfg)?;
    let stats = stats_of(&tr)?;
    let preds = eval::predict_records(&model, &te, &stats)?;
    let set = eval::PredictionSet::new(model.spec.family.to_string(), 100, preds, model.spec.num_classes)?;
    let mut w = create(&cfg.out_dir.join("predictions_q100.csv"))?;
    eval::write_predictions_csv(&mut w, &set, &te)?;
    w.flush()?;
    let wrong = set.predictions.iter().zip(&te).filter(|(p, r)| **p != r.label()).count();
    writeln!(out, "data: {source}")?;
    writeln!(out, "test error: {:.4}", wrong as f64 / te.len().max(1) as f64)?;
    Ok(())
}

pub fn cmd_robustness(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let model = load_model(cfg)?;
    let (tr, te, source) = load_data(cfg)?;
    prepare_out(cfg)?;
    let stats = stats_of(&tr)?;
    let cache = SqCache::new(cfg.cache_dir.clone().unwrap_or_else(|| cfg.out_dir.join("sq_cache")));
    let mut hits = 0;
    for &q in cfg.qualities.iter().filter(|&&q| q != 100) {
        if cache.get_or_build(&te, q)?.1 {
            hits += 1;
        }
    }
    let results = eval::sweep(&model, &te, &stats, &cfg.qualities, Some(&cache))?;
    let rows: Vec<_> = results.iter().map(|(r, _)| *r).collect();
    let mut w = create(&cfg.out_dir.join("robustness.csv"))?;
    eval::write_robustness_csv(&mut w, &rows)?;
    w.flush()?;
    for (_, set) in &results {
        let mut w = create(&cfg.out_dir.join(format!("predictions_q{:03}.csv", set.q)))?;
        eval::write_predictions_csv(&mut w, set, &te)?;
        w.flush()?;
    }
    writeln!(out, "data: {source}")?;
    writeln!(out, "S_Q cache: {hits} of {} sets reused", cfg.qualities.iter().filter(|&&q| q != 100).count())?;
    writeln!(out, "{:>4} {:>10} {:>8}", "Q", "error", "POCP")?;
    for r in &rows {
        writeln!(out, "{:>4} {:>10.4} {:>8.4}", r.q, r.test_error, r.pocp)?;
    }
    Ok(())
}

pub fn cmd_probe(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let model = if cfg.checkpoint.is_some() || checkpoint_path(cfg).exists() {
        load_model(cfg)?
    } else {
        writeln!(out, "no checkpoint; probing freshly initialized weights")?;
        build::<f32>(&cfg.model)?
    };
    prepare_out(cfg)?;
    let summary = eval::probe_model(&model, &cfg.probe_layer, &cfg.probe_eps)?;
    let mut w = create(&cfg.out_dir.join("probe.csv"))?;
    summary.write_csv(&mut w)?;
    w.flush()?;
    writeln!(out, "channels: {}", summary.reports.len())?;
    writeln!(out, "non-degenerate: {:.4}", 1.0 - summary.degenerate_fraction())?;
    writeln!(out, "hyperselective among non-degenerate: {:.4}", summary.hyperselective_fraction())?;
    Ok(())
}

pub fn cmd_count_params(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let model = build::<f32>(&cfg.model)?;
    writeln!(out, "{}", model.count_params())?;
    Ok(())
}
