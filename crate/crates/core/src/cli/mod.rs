//! Command-line front end. Library code reports typed errors; only
//! [`main`](crate::cli::run) callers turn them into exit codes.

mod ablate;
mod manifest;
pub mod overlay;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{self, infer_layout, Dataset, FeatureSet, SyntheticSpec};
use crate::error::Error;
use crate::model::{ModelConfig, ViTree};
use crate::tensor::{Graph, Mode, SelectionGrad};
use crate::train::checkpoint::{load_checkpoint, save_checkpoint};
use crate::train::{evaluate, metrics_row, Examples, LossMode, Optimizer, TrainConfig, Trainer, METRICS_HEADER};
use crate::tree::LeafStrategy;

pub use manifest::{git_blob_sha256, Manifest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_INTERNAL: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "vitree", version, about = "Hard-patch, hard-path neural decision trees")]
pub struct Cli {
    #[command(flatten)]
    pub shared: Shared,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Shared {
    /// Seed for data generation, initialisation, shuffling and dropout.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON config file; explicit flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic train/test dataset pair.
    Gen(GenArgs),
    /// Train a model and write a checkpoint plus per-epoch metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Export decision traces and overlay images for individual samples.
    Explain(ExplainArgs),
    /// Run the leaf-strategy, depth and loss ablations.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    /// Grid as ROWSxCOLS.
    #[arg(long, value_parser = parse_grid)]
    pub grid: Option<(usize, usize)>,
    #[arg(long)]
    pub tile: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Signature tiles per class.
    #[arg(long)]
    pub signatures: Option<usize>,
    /// Pixel noise standard deviation.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub distractors: Option<usize>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelFlags {
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub strategy: Option<LeafStrategy>,
    #[arg(long)]
    pub selection_grad: Option<SelectionGrad>,
    #[arg(long)]
    pub tau_select: Option<f64>,
    #[arg(long)]
    pub tau_path: Option<f64>,
    /// Add a cross-entropy term on the mixed prediction so the ratio trains.
    #[arg(long)]
    pub train_mix: bool,
    #[arg(long)]
    pub model_dim: Option<usize>,
    #[arg(long)]
    pub encoder_layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub node_hidden: Option<usize>,
    /// Override the grid inferred from the dataset, as ROWSxCOLS.
    #[arg(long, value_parser = parse_grid)]
    pub grid: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// `adam` or `sgd`.
    #[arg(long, value_parser = parse_optimizer)]
    pub optimizer: Option<Optimizer>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// `both`, `vit-only` or `leaf-only`.
    #[arg(long)]
    pub loss: Option<LossMode>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Training data (dataset or feature file).
    #[arg(long)]
    pub train: PathBuf,
    /// Optional held-out data evaluated after every epoch.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Continue from a checkpoint until `--epochs` epochs are complete.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train_flags: TrainFlags,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// First sample to explain.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Number of consecutive samples to explain.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Output pixels per input pixel in the overlay.
    #[arg(long, default_value_t = 8)]
    pub scale: usize,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    /// Comma-separated depths for the depth sweep.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6")]
    pub depths: Vec<usize>,
    /// Comma-separated strategies for the strategy sweep.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "mean,prob-soft,prob-hard,learn-soft,learn-hard"
    )]
    pub strategies: Vec<LeafStrategy>,
    /// Skip the loss-ablation rows.
    #[arg(long)]
    pub no_loss_ablation: bool,
    /// Worker threads; each cell stays single-threaded.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train_flags: TrainFlags,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("grid {s:?} is not ROWSxCOLS"))?;
    let r: usize = r.trim().parse().map_err(|_| format!("bad grid rows in {s:?}"))?;
    let c: usize = c.trim().parse().map_err(|_| format!("bad grid cols in {s:?}"))?;
    if r == 0 || c == 0 {
        return Err(format!("grid {s:?} has an empty side"));
    }
    Ok((r, c))
}

fn parse_optimizer(s: &str) -> Result<Optimizer, String> {
    match s {
        "adam" => Ok(Optimizer::default()),
        "sgd" => Ok(Optimizer::Sgd),
        _ => Err(format!("unknown optimizer {s:?} (adam or sgd)")),
    }
}

/// Everything a run can be configured with. Config files hold any subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub spec: SyntheticSpec,
    pub train_size: usize,
    pub test_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            spec: SyntheticSpec::default(),
            train_size: 2000,
            test_size: 500,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn base_config(shared: &Shared) -> anyhow::Result<RunConfig> {
    let mut cfg = match &shared.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str::<RunConfig>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = shared.seed {
        cfg.data.spec.seed = seed;
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

impl ModelFlags {
    fn apply(&self, m: &mut ModelConfig, train: &mut TrainConfig) {
        let t = &mut m.tree;
        set(&mut t.depth, self.depth);
        set(&mut t.strategy, self.strategy);
        set(&mut t.selection_grad, self.selection_grad);
        set(&mut t.tau_select, self.tau_select);
        set(&mut t.tau_path, self.tau_path);
        set(&mut t.node_hidden, self.node_hidden);
        let b = &mut m.backbone;
        set(&mut b.model_dim, self.model_dim);
        set(&mut b.encoder_layers, self.encoder_layers);
        set(&mut b.head_count, self.heads);
        if self.train_mix {
            train.train_mix = true;
        }
    }
}

impl TrainFlags {
    fn apply(&self, t: &mut TrainConfig) {
        set(&mut t.epochs, self.epochs);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.learning_rate, self.lr);
        set(&mut t.weight_decay, self.weight_decay);
        set(&mut t.optimizer, self.optimizer);
        set(&mut t.loss, self.loss);
        if self.grad_clip.is_some() {
            t.grad_clip_norm = self.grad_clip;
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// A dataset or feature file, told apart by its magic bytes.
#[derive(Debug, Clone)]
pub enum LoadedData {
    Patches(Dataset),
    Features(FeatureSet),
}

impl LoadedData {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let head = fs::read(path)
            .with_context(|| format!("reading {}", path.display()))?
            .into_iter()
            .take(4)
            .collect::<Vec<u8>>();
        let loaded = if head == b"VTFT" {
            LoadedData::Features(data::load_feature_set(path)?)
        } else {
            LoadedData::Patches(data::load_dataset(path)?)
        };
        Ok(loaded)
    }

    pub fn examples(&self) -> Examples<'_> {
        match self {
            LoadedData::Patches(d) => Examples::from_dataset(d),
            LoadedData::Features(f) => Examples::from_features(f),
        }
    }

    /// Fills in the model fields the data dictates: input width, grid and
    /// class count.
    pub fn shape_model(&self, m: &mut ModelConfig, grid: Option<(usize, usize)>) -> anyhow::Result<()> {
        let (k, classes) = match self {
            LoadedData::Patches(d) => (d.patch_count, d.classes),
            LoadedData::Features(f) => (f.patch_count, f.classes),
        };
        let (rows, cols) = match (grid, self) {
            (Some(g), _) => g,
            (None, LoadedData::Patches(d)) => {
                let l = d.layout()?;
                (l.rows, l.cols)
            }
            (None, LoadedData::Features(_)) => {
                let l = infer_layout(k, 1)?;
                (l.rows, l.cols)
            }
        };
        if rows * cols != k {
            return Err(Error::dim(format!("grid {rows}x{cols} does not hold {k} patches")).into());
        }
        let b = &mut m.backbone;
        b.grid_rows = rows;
        b.grid_cols = cols;
        b.class_count = classes;
        match self {
            LoadedData::Patches(d) => b.patch_dim = d.patch_dim,
            LoadedData::Features(f) => b.model_dim = f.feature_dim,
        }
        Ok(())
    }
}

/// Maps an error chain onto the documented exit codes.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => EXIT_USAGE,
        Some(Error::Numeric(_)) => EXIT_NUMERIC,
        Some(
            Error::Dimension(_)
            | Error::Label { .. }
            | Error::EmptyInput(_)
            | Error::Format { .. }
            | Error::UnsupportedVersion { .. }
            | Error::Checksum(_)
            | Error::OutOfRange { .. }
            | Error::Io(_)
            | Error::Json(_),
        ) => EXIT_DATA,
        Some(Error::Graph(_) | Error::Contract(_)) => EXIT_INTERNAL,
        None if err.downcast_ref::<std::io::Error>().is_some() => EXIT_DATA,
        None => EXIT_INTERNAL,
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let started = Instant::now();
    fs::create_dir_all(&cli.shared.out).with_context(|| format!("creating {}", cli.shared.out.display()))?;
    let mut manifest = match &cli.command {
        Command::Gen(a) => cmd_gen(&cli.shared, a)?,
        Command::Train(a) => cmd_train(&cli.shared, a)?,
        Command::Eval(a) => cmd_eval(&cli.shared, a)?,
        Command::Explain(a) => cmd_explain(&cli.shared, a)?,
        Command::Ablate(a) => ablate::cmd_ablate(&cli.shared, a)?,
    };
    manifest.wall_time_s = started.elapsed().as_secs_f64();
    manifest.write(&cli.shared.out)?;
    Ok(())
}

fn cmd_gen(shared: &Shared, a: &GenArgs) -> anyhow::Result<Manifest> {
    let mut cfg = base_config(shared)?;
    let d = &mut cfg.data;
    if let Some((r, c)) = a.grid {
        d.spec.rows = r;
        d.spec.cols = c;
    }
    set(&mut d.spec.tile, a.tile);
    set(&mut d.spec.channels, a.channels);
    set(&mut d.spec.classes, a.classes);
    set(&mut d.spec.signatures, a.signatures);
    set(&mut d.spec.noise, a.noise);
    set(&mut d.spec.distractors, a.distractors);
    set(&mut d.train_size, a.train_size);
    set(&mut d.test_size, a.test_size);
    if d.spec.signatures + d.spec.distractors > d.spec.patch_count() {
        bail!(Error::Config(format!(
            "--signatures ({}) + --distractors ({}) exceed the {} cells of --grid {}x{}",
            d.spec.signatures,
            d.spec.distractors,
            d.spec.patch_count(),
            d.spec.rows,
            d.spec.cols
        )));
    }
    let (train, test) = data::generate(&d.spec, d.train_size, d.test_size)?;
    let mut manifest = Manifest::new("gen", &cfg.data, cfg.data.spec.seed)?;
    for (name, ds) in [("train.vtds", &train), ("test.vtds", &test)] {
        let path = shared.out.join(name);
        data::save_dataset(&path, ds)?;
        manifest.add_artifact(&path)?;
    }
    Ok(manifest)
}

fn cmd_train(shared: &Shared, a: &TrainArgs) -> anyhow::Result<Manifest> {
    let train_data = LoadedData::load(&a.train)?;
    let test_data = a.test.as_deref().map(LoadedData::load).transpose()?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let mut t = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            set(&mut t.config.epochs, a.train_flags.epochs);
            t
        }
        None => {
            let mut cfg = base_config(shared)?;
            a.model.apply(&mut cfg.model, &mut cfg.train);
            a.train_flags.apply(&mut cfg.train);
            train_data.shape_model(&mut cfg.model, a.model.grid)?;
            let (model, store) = ViTree::new(&cfg.model)?;
            Trainer::new(model, store, cfg.train)?
        }
    };
    let train_ex = train_data.examples();
    let test_ex = test_data.as_ref().map(LoadedData::examples);
    train_ex.check_model(&trainer.model)?;
    if let Some(t) = &test_ex {
        t.check_model(&trainer.model)?;
    }
    let metrics_path = shared.out.join("metrics.csv");
    let mut csv = format!("{METRICS_HEADER}\n");
    trainer.fit(&train_ex, test_ex.as_ref(), |_, m| {
        let row = metrics_row(m);
        eprintln!("{row}");
        csv.push_str(&row);
        csv.push('\n');
        Ok(())
    })?;
    fs::write(&metrics_path, &csv)?;
    let ckpt = shared.out.join("checkpoint.vtck");
    save_checkpoint(&ckpt, &trainer)?;
    let resolved = RunConfig {
        data: DataConfig::default(),
        model: trainer.model.config().clone(),
        train: trainer.config.clone(),
    };
    let mut manifest = Manifest::new("train", &resolved, trainer.config.seed)?;
    manifest.add_artifact(&metrics_path)?;
    manifest.add_checkpoint(&ckpt)?;
    Ok(manifest)
}

fn cmd_eval(shared: &Shared, a: &EvalArgs) -> anyhow::Result<Manifest> {
    let trainer = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let data = LoadedData::load(&a.data)?;
    let metrics = evaluate(&trainer.model, &trainer.store, &data.examples())?;
    let path = shared.out.join("eval.json");
    fs::write(&path, serde_json::to_string_pretty(&metrics)?)?;
    println!(
        "acc_v {:.4} acc_t {:.4} acc_combined {:.4} faithfulness {}",
        metrics.acc_v,
        metrics.acc_t,
        metrics.acc_combined,
        metrics.faithfulness.map(|f| format!("{f:.4}")).unwrap_or_else(|| "n/a".into())
    );
    let mut manifest = Manifest::new("eval", trainer.model.config(), trainer.config.seed)?;
    manifest.add_input_checkpoint(&a.checkpoint)?;
    manifest.add_artifact(&path)?;
    Ok(manifest)
}

fn cmd_explain(shared: &Shared, a: &ExplainArgs) -> anyhow::Result<Manifest> {
    let trainer = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let data = LoadedData::load(&a.data)?;
    let examples = data.examples();
    examples.check_model(&trainer.model)?;
    if a.count == 0 || a.scale == 0 {
        bail!(Error::Config("--count and --scale must be at least 1".into()));
    }
    let end = a.index.checked_add(a.count).unwrap_or(usize::MAX);
    if end > examples.len() {
        bail!(Error::OutOfRange {
            index: end - 1,
            len: examples.len()
        });
    }
    let mut manifest = Manifest::new("explain", trainer.model.config(), trainer.config.seed)?;
    manifest.add_input_checkpoint(&a.checkpoint)?;
    for i in a.index..end {
        let trace = explain_one(&trainer, &examples, i)?;
        let json_path = shared.out.join(format!("trace_{i}.json"));
        fs::write(&json_path, serde_json::to_string_pretty(&trace)?)?;
        manifest.add_artifact(&json_path)?;
        if let LoadedData::Patches(ds) = &data {
            let layout = ds.layout()?;
            let image = overlay::render(&ds.samples[i].patches, &layout, &trace.path, a.scale)?;
            let ppm_path = shared.out.join(format!("overlay_{i}.ppm"));
            fs::write(&ppm_path, image.to_ppm())?;
            manifest.add_artifact(&ppm_path)?;
        }
    }
    Ok(manifest)
}

/// Eval-mode trace for a single sample.
pub fn explain_one(trainer: &Trainer, examples: &Examples<'_>, index: usize) -> crate::Result<crate::tree::DecisionTrace> {
    let (x, labels) = examples.batch(&[index])?;
    let mut g = Graph::new(Mode::eval());
    let input = g.input(x);
    let out = trainer.model.forward(&mut g, &trainer.store, input, examples.kind())?;
    let mut traces = trainer.model.traces(&g, &trainer.store, &out, &[index], &labels)?;
    Ok(traces.remove(0))
}
