//! The `kip` command line.
//!
//! Every run reads defaults, then an optional `--config` file, then flags.
//! Outputs go to the `--out` directory. Exit status is 0 on success, 2 for
//! bad configuration or unreadable inputs, 3 for failures while computing.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use crate::analysis::{
    contiguous_bands, gradient_distance_matrix, image_rows, linear_dim, linear_dim_from_gram, subsample_eval_kernels,
    twonn_id, twonn_id_from_distances, DEFAULT_DISCARD_FRACTION, DEFAULT_VARIANCE_THRESHOLD,
};
use crate::checkpoint::Checkpoint;
use crate::config::{parse_config, Settings, Workers};
use crate::datasets::{load_cifar10_dir, load_mnist_dir, synthetic_blobs, Split};
use crate::distill::{best_snapshot, init_support, kip_train_with, label_solve, DistillConfig, Snapshot, SupportSet};
use crate::distrib::{worker_connect, Distributed, WorkerExit, WorkerPool};
use crate::error::Error;
use crate::images::{Dataset, Preprocessing};
use crate::kernel_grad::{KernelBackend, Local};
use crate::kernels::{KernelKind, KernelSpec};
use crate::krr::{accuracy, krr_loss, krr_predict, LabelMatrix};
use crate::linalg::{SymMatrix, DEFAULT_RCOND};
use crate::preprocess::{standard_normalize, zca_apply, zca_fit, ZcaTransform};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// A failed command and the exit status it maps to.
#[derive(Debug)]
pub enum Failure {
    Config(Error),
    Runtime(Error),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(e) | Failure::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidSpec(_) | Error::Checkpoint(_) | Error::InsufficientClassExamples { .. } => {
                Failure::Config(e)
            }
            other => Failure::Runtime(other),
        }
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

/// Marks errors from reading inputs as configuration problems.
trait Input<T> {
    fn input(self) -> Outcome<T>;
}

impl<T> Input<T> for crate::Result<T> {
    fn input(self) -> Outcome<T> {
        self.map_err(Failure::Config)
    }
}

#[derive(Parser, Debug)]
#[command(name = "kip", version, about = "Dataset distillation with infinite-width neural kernels")]
pub struct Cli {
    /// key = value settings file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Repeat for more logging.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

/// Settings shared by every data-handling command.
#[derive(Args, Debug, Default, Clone)]
pub struct Common {
    /// mnist, cifar10, blobs, or a directory holding MNIST or CIFAR-10 files.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub data_dir: Option<String>,
    /// Keep only the first n training images.
    #[arg(long)]
    pub train_size: Option<String>,
    /// Keep only the first n evaluation images.
    #[arg(long)]
    pub test_size: Option<String>,
    /// fc, convvec, convnet, or a full name such as convnet3-nngp.
    #[arg(long)]
    pub kernel: Option<String>,
    #[arg(long)]
    pub depth: Option<String>,
    /// ntk or nngp.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub weight_variance: Option<String>,
    #[arg(long)]
    pub bias_variance: Option<String>,
    #[arg(long)]
    pub filter_size: Option<String>,
    /// ZCA regularization strength, or off.
    #[arg(long)]
    pub zca: Option<String>,
    #[arg(long)]
    pub lambda0: Option<String>,
    /// A thread count, or host:port[*count] to serve remote workers.
    #[arg(long)]
    pub workers: Option<String>,
    /// Tile size for blockwise kernel assembly.
    #[arg(long)]
    pub block: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
}

impl Common {
    fn pairs(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("kernel", &self.kernel),
            ("depth", &self.depth),
            ("kind", &self.kind),
            ("weight_variance", &self.weight_variance),
            ("bias_variance", &self.bias_variance),
            ("filter_size", &self.filter_size),
            ("dataset", &self.dataset),
            ("data_dir", &self.data_dir),
            ("train_size", &self.train_size),
            ("test_size", &self.test_size),
            ("zca", &self.zca),
            ("lambda0", &self.lambda0),
            ("workers", &self.workers),
            ("block", &self.block),
            ("seed", &self.seed),
            ("out", &self.out),
        ]
    }
}

#[derive(Args, Debug, Clone)]
pub struct DistillArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub imgs_per_class: Option<String>,
    #[arg(long)]
    pub steps: Option<String>,
    /// Target batch size.
    #[arg(long)]
    pub batch: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    /// Share of each target batch to augment, or off.
    #[arg(long)]
    pub augment: Option<String>,
    #[arg(long)]
    pub train_labels: bool,
    /// Treat the ridge as constant when differentiating.
    #[arg(long)]
    pub freeze_lambda: bool,
    /// Comma-separated kernels sampled with --kernel each step.
    #[arg(long)]
    pub kernel_pool: Option<String>,
    #[arg(long)]
    pub checkpoint_every: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Learn a support set with Kernel Inducing Points.
    Distill(DistillArgs),
    /// Replace a support's labels with the least-norm loss minimizer.
    LabelSolve {
        #[command(flatten)]
        common: Common,
        /// A checkpoint file, or natural[:imgs-per-class] for a random subset.
        #[arg(long)]
        support: String,
        #[arg(long)]
        imgs_per_class: Option<String>,
    },
    /// KRR accuracy of a checkpoint's support.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Dimension, spectral and subsampling analyses.
    Analyze {
        #[command(subcommand)]
        what: Analysis,
    },
    /// Compute kernel blocks for a served pool.
    Worker {
        #[arg(long)]
        connect: String,
        /// Seconds without any frame before disconnecting.
        #[arg(long, default_value_t = 600)]
        idle_timeout: u64,
    },
}

#[derive(Subcommand, Debug)]
pub enum Analysis {
    /// TwoNN intrinsic dimension of each checkpoint's support images.
    Id {
        #[command(flatten)]
        common: Common,
        /// Checkpoint files or directories of them.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_DISCARD_FRACTION)]
        discard: f64,
    },
    /// Principal components needed for a share of the variance.
    Lindim {
        #[command(flatten)]
        common: Common,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_VARIANCE_THRESHOLD)]
        threshold: f64,
    },
    /// TwoNN and linear dimensions in the NTK gradient metric.
    Graddim {
        #[command(flatten)]
        common: Common,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_DISCARD_FRACTION)]
        discard: f64,
        #[arg(long, default_value_t = DEFAULT_VARIANCE_THRESHOLD)]
        threshold: f64,
    },
    /// Ridgeless accuracy through contiguous eigenvalue bands.
    Spectral {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 5)]
        bands: usize,
    },
    /// Accuracy of class-balanced random subsets of the support.
    Subsample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "0.25,0.5,0.75,1")]
        fractions: String,
        #[arg(long, default_value_t = 5)]
        trials: usize,
    },
}

/// Parses `args` and runs the command, returning the exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.code()
        }
    }
}

fn settings(config: &Option<PathBuf>, flags: &[(&str, &Option<String>)]) -> Outcome<Settings> {
    let mut s = Settings::default();
    if let Some(path) = config {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Config(Error::Config(format!("cannot read {}: {e}", path.display()))))?;
        s.apply(&parse_config(&text)?)?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            s.set(k, v)?;
        }
    }
    s.validate()?;
    Ok(s)
}

pub fn run(cli: Cli) -> Outcome {
    let cfg = &cli.config;
    match cli.command {
        Command::Distill(a) => {
            let mut flags = a.common.pairs();
            let train_labels = a.train_labels.then(|| "true".to_string());
            let freeze = a.freeze_lambda.then(|| "true".to_string());
            flags.extend([
                ("imgs_per_class", &a.imgs_per_class),
                ("steps", &a.steps),
                ("batch", &a.batch),
                ("lr", &a.lr),
                ("augment", &a.augment),
                ("kernel_pool", &a.kernel_pool),
                ("checkpoint_every", &a.checkpoint_every),
                ("train_labels", &train_labels),
                ("freeze_lambda", &freeze),
            ]);
            distill(&settings(cfg, &flags)?)
        }
        Command::LabelSolve {
            common,
            support,
            imgs_per_class,
        } => {
            let mut flags = common.pairs();
            flags.push(("imgs_per_class", &imgs_per_class));
            label_solve_cmd(&settings(cfg, &flags)?, &support)
        }
        Command::Eval {
            common,
            checkpoint,
            split,
        } => eval(&settings(cfg, &common.pairs())?, &checkpoint, split),
        Command::Analyze { what } => analyze(cfg, what),
        Command::Worker { connect, idle_timeout } => {
            match worker_connect(connect.as_str(), Duration::from_secs(idle_timeout.max(1))).map_err(Failure::Runtime)? {
                WorkerExit::Shutdown => log::info!("server shut down"),
                WorkerExit::IdleTimeout => log::warn!("no work for {idle_timeout}s, exiting"),
            }
            Ok(())
        }
    }
}

/// Train and evaluation splits after preprocessing.
pub struct Data {
    pub train: Dataset,
    pub test: Dataset,
    pub zca: Option<ZcaTransform>,
}

fn truncate(d: Dataset, n: usize) -> Dataset {
    if n == 0 || n >= d.len() {
        d
    } else {
        d.select(&(0..n).collect::<Vec<_>>())
    }
}

/// Loads the raw train and test splits named by the settings.
pub fn load_raw(s: &Settings) -> Outcome<(Dataset, Dataset)> {
    let (train, test) = match s.dataset.as_str() {
        "blobs" => (
            synthetic_blobs(10, 50, (8, 8, 1), 6.0, s.seed).input()?,
            synthetic_blobs(10, 20, (8, 8, 1), 6.0, s.seed.wrapping_add(1)).input()?,
        ),
        "mnist" => {
            let dir = s.data_dir.join("mnist");
            (load_mnist_dir(&dir, Split::Train).input()?, load_mnist_dir(&dir, Split::Test).input()?)
        }
        "cifar10" => {
            let dir = s.data_dir.join("cifar-10-batches-bin");
            (load_cifar10_dir(&dir, Split::Train).input()?, load_cifar10_dir(&dir, Split::Test).input()?)
        }
        other => {
            let dir = Path::new(other);
            if dir.join("train-images-idx3-ubyte").exists() {
                (load_mnist_dir(dir, Split::Train).input()?, load_mnist_dir(dir, Split::Test).input()?)
            } else if dir.join("data_batch_1.bin").exists() {
                (load_cifar10_dir(dir, Split::Train).input()?, load_cifar10_dir(dir, Split::Test).input()?)
            } else {
                return Err(Failure::Config(Error::Config(format!(
                    "dataset {other:?} is neither a known name nor a directory of MNIST or CIFAR-10 files"
                ))));
            }
        }
    };
    Ok((truncate(train, s.train_size), truncate(test, s.test_size)))
}

/// Loaded data under `pre`: ZCA with a fitted transform, or per-channel
/// standardization with the training statistics.
pub fn prepare(train: Dataset, test: Dataset, pre: Preprocessing, zca: Option<ZcaTransform>) -> Outcome<Data> {
    match pre {
        Preprocessing::Zca { lambda } => {
            let t = match zca {
                Some(t) => t,
                None => zca_fit(&train.images, lambda).map_err(Failure::Runtime)?,
            };
            let tr = zca_apply(&t, &train.images).input()?;
            let te = zca_apply(&t, &test.images).input()?;
            Ok(Data {
                train: train.with_images(tr),
                test: test.with_images(te),
                zca: Some(t),
            })
        }
        Preprocessing::Standard => {
            let tr = standard_normalize(&train.images, &train.images).input()?;
            let te = standard_normalize(&train.images, &test.images).input()?;
            Ok(Data {
                train: train.with_images(tr),
                test: test.with_images(te),
                zca: None,
            })
        }
        Preprocessing::Raw => Ok(Data { train, test, zca: None }),
    }
}

fn preprocessing(s: &Settings) -> Preprocessing {
    match s.zca {
        Some(lambda) => Preprocessing::Zca { lambda },
        None => Preprocessing::Standard,
    }
}

/// Runs `f` with the kernel backend the settings ask for.
fn with_backend<T>(s: &Settings, f: impl FnOnce(&dyn KernelBackend) -> Outcome<T>) -> Outcome<T> {
    match &s.workers {
        Workers::Local(1) if s.block.is_none() => f(&Local),
        Workers::Local(n) => {
            let pool = WorkerPool::local(*n);
            f(&Distributed {
                pool: &pool,
                block: s.block,
            })
        }
        Workers::Remote { addr, count } => {
            let pool = WorkerPool::serve(addr.as_str(), Duration::from_secs(1))
                .map_err(|e| Failure::Config(Error::Config(format!("cannot listen on {addr}: {e}"))))?;
            let bound = pool.local_addr().expect("served pool has an address");
            eprintln!("listening on {bound}, waiting for {count} worker(s)");
            pool.wait_for_workers(*count, Duration::from_secs(300)).map_err(Failure::Runtime)?;
            f(&Distributed {
                pool: &pool,
                block: s.block,
            })
        }
    }
}

/// KRR predictions of `support` on `eval` and their accuracy.
fn krr_accuracy(
    backend: &dyn KernelBackend,
    support: &SupportSet,
    eval: &Dataset,
    spec: &KernelSpec,
    lambda0: f64,
) -> crate::Result<f64> {
    let kss = SymMatrix::symmetrized(backend.kernel_matrix(&support.images, &support.images, spec)?);
    let kts = backend.kernel_matrix(&eval.images, &support.images, spec)?;
    let pred = krr_predict(&kts, &kss, &support.labels, lambda0)?;
    Ok(accuracy(&pred, &eval.labels))
}

fn create_out(s: &Settings) -> Outcome<()> {
    fs::create_dir_all(&s.out)
        .map_err(|e| Failure::Config(Error::Config(format!("cannot create {}: {e}", s.out.display()))))
}

fn csv_writer(path: &Path) -> Outcome<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Failure::Runtime(Error::Io(e.into())))
}

fn csv_err(e: csv::Error) -> Failure {
    Failure::Runtime(Error::Io(e.into()))
}

fn fmt_loss(loss: f64) -> String {
    if loss.is_finite() {
        format!("{loss:e}")
    } else {
        String::new()
    }
}

pub fn distill(s: &Settings) -> Outcome {
    let (train, test) = load_raw(s)?;
    let data = prepare(train, test, preprocessing(s), None)?;
    let mut support = init_support(&data.train, s.imgs_per_class, s.seed)?;
    support.train_labels = s.train_labels;
    let cfg = DistillConfig {
        lambda0: s.lambda0,
        learning_rate: s.lr,
        steps: s.steps,
        target_batch_size: s.batch,
        augment: s.augment.is_some(),
        augment_fraction: s.augment.unwrap_or(0.0),
        train_labels: s.train_labels,
        kernel_pool: s.pool(),
        checkpoint_every: s.checkpoint_every,
        seed: s.seed,
        freeze_lambda: s.freeze_lambda,
    };
    cfg.validate()?;
    create_out(s)?;
    let mut metrics = csv_writer(&s.out.join("metrics.csv"))?;
    metrics.write_record(["step", "loss", "test_accuracy"]).map_err(csv_err)?;
    let spec = s.kernel;
    let (trajectory, accuracies) = with_backend(s, |backend| {
        let mut accuracies = Vec::new();
        let mut hook = |snap: &Snapshot| -> crate::Result<()> {
            let acc = krr_accuracy(backend, &snap.support, &data.test, &spec, s.lambda0)?;
            log::info!("step {}: loss {} accuracy {acc:.4}", snap.step, fmt_loss(snap.loss));
            metrics
                .write_record([snap.step.to_string(), fmt_loss(snap.loss), format!("{acc}")])
                .and_then(|_| metrics.flush().map_err(Into::into))
                .map_err(|e| Error::Io(e.into()))?;
            Checkpoint::new(&spec, &cfg, snap, data.zca.as_ref()).save(s.out.join(format!("ckpt_{:06}.kip", snap.step)))?;
            accuracies.push(acc);
            Ok(())
        };
        let t = kip_train_with(backend, &support, &data.train, &cfg, &mut hook).map_err(Failure::Runtime)?;
        Ok((t, accuracies))
    })?;
    let best = best_snapshot(&trajectory).expect("trajectory holds the initial snapshot");
    Checkpoint::new(&spec, &cfg, best, data.zca.as_ref())
        .save(s.out.join("best.kip"))
        .map_err(Failure::Runtime)?;
    println!(
        "initial accuracy {:.4}, final accuracy {:.4}, best checkpoint at step {}",
        accuracies[0],
        accuracies[accuracies.len() - 1],
        best.step
    );
    Ok(())
}

/// A checkpoint and the data prepared the way its support was.
fn checkpoint_data(s: &Settings, path: &Path) -> Outcome<(Checkpoint, SupportSet, Data, KernelSpec)> {
    let ckpt = Checkpoint::load(path).map_err(|e| match e {
        Error::Io(io) => Failure::Config(Error::Config(format!("cannot read {}: {io}", path.display()))),
        other => Failure::Config(other),
    })?;
    let support = ckpt.support().input()?;
    let (train, test) = load_raw(s)?;
    let data = prepare(train, test, ckpt.header.preprocessing, ckpt.zca().input()?)?;
    if !data.train.images.same_shape(&support.images) || data.train.classes != support.labels.classes() {
        return Err(Failure::Config(Error::Config(format!(
            "checkpoint {} does not match dataset {}",
            path.display(),
            s.dataset
        ))));
    }
    let spec = if s.kernel_explicit { s.kernel } else { ckpt.header.spec };
    Ok((ckpt, support, data, spec))
}

pub fn label_solve_cmd(s: &Settings, source: &str) -> Outcome {
    let (support, data, spec, config, zca) = if let Some(rest) = source.strip_prefix("natural") {
        let ipc = match rest.strip_prefix(':') {
            Some(n) => n
                .parse()
                .map_err(|_| Failure::Config(Error::Config(format!("bad support {source:?}"))))?,
            None if rest.is_empty() => s.imgs_per_class,
            None => return Err(Failure::Config(Error::Config(format!("bad support {source:?}")))),
        };
        let (train, test) = load_raw(s)?;
        let data = prepare(train, test, preprocessing(s), None)?;
        let support = init_support(&data.train, ipc, s.seed)?;
        let config = DistillConfig {
            lambda0: s.lambda0,
            steps: 0,
            kernel_pool: vec![s.kernel],
            seed: s.seed,
            ..DistillConfig::default()
        };
        let zca = data.zca.clone();
        (support, data, s.kernel, config, zca)
    } else {
        let (ckpt, support, data, spec) = checkpoint_data(s, Path::new(source))?;
        let zca = data.zca.clone();
        (support, data, spec, ckpt.header.config, zca)
    };
    create_out(s)?;
    let (before, after, loss_before, loss_after, solved) = with_backend(s, |b| {
        let go = || -> crate::Result<_> {
            let xs = &support.images;
            let kss = SymMatrix::symmetrized(b.kernel_matrix(xs, xs, &spec)?);
            let kts = b.kernel_matrix(&data.train.images, xs, &spec)?;
            let yt = LabelMatrix::centered_one_hot(&data.train.labels, data.train.classes)?;
            let labels = label_solve(&kss, &kts, &yt, s.lambda0, DEFAULT_RCOND)?;
            let loss_before = krr_loss(&kss, &kts, &support.labels, &yt, s.lambda0)?;
            let loss_after = krr_loss(&kss, &kts, &labels, &yt, s.lambda0)?;
            let mut solved = support.clone();
            solved.labels = labels;
            let before = krr_accuracy(b, &support, &data.test, &spec, s.lambda0)?;
            let after = krr_accuracy(b, &solved, &data.test, &spec, s.lambda0)?;
            Ok((before, after, loss_before, loss_after, solved))
        };
        go().map_err(Failure::Runtime)
    })?;
    let snap = Snapshot {
        step: 0,
        loss: loss_after,
        support: solved,
    };
    Checkpoint::new(&spec, &config, &snap, zca.as_ref())
        .save(s.out.join("label_solve.kip"))
        .map_err(Failure::Runtime)?;
    let mut w = csv_writer(&s.out.join("label_solve.csv"))?;
    w.write_record(["labels", "train_loss", "test_accuracy"]).map_err(csv_err)?;
    w.write_record(["original", &format!("{loss_before:e}"), &format!("{before}")]).map_err(csv_err)?;
    w.write_record(["solved", &format!("{loss_after:e}"), &format!("{after}")]).map_err(csv_err)?;
    w.flush().map_err(|e| Failure::Runtime(e.into()))?;
    println!("accuracy {after:.4} (original labels {before:.4})");
    Ok(())
}

pub fn eval(s: &Settings, path: &Path, split: SplitArg) -> Outcome {
    let (ckpt, support, data, spec) = checkpoint_data(s, path)?;
    let target = match split {
        SplitArg::Test => &data.test,
        SplitArg::Train => &data.train,
    };
    let acc = with_backend(s, |b| krr_accuracy(b, &support, target, &spec, s.lambda0).map_err(Failure::Runtime))?;
    create_out(s)?;
    let mut w = csv_writer(&s.out.join("eval.csv"))?;
    w.write_record(["checkpoint", "step", "kernel", "split", "images", "accuracy"]).map_err(csv_err)?;
    w.write_record([
        path.display().to_string(),
        ckpt.header.step.to_string(),
        spec.to_string(),
        format!("{split:?}").to_lowercase(),
        target.len().to_string(),
        format!("{acc}"),
    ])
    .map_err(csv_err)?;
    w.flush().map_err(|e| Failure::Runtime(e.into()))?;
    println!("accuracy {acc:.4}");
    Ok(())
}

/// Checkpoint files named directly or found in directories, ordered by step.
fn checkpoint_files(paths: &[PathBuf]) -> Outcome<Vec<(PathBuf, Checkpoint)>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let entries = fs::read_dir(p).map_err(|e| Failure::Config(Error::Config(format!("{}: {e}", p.display()))))?;
            let mut found: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("ckpt_") && n.ends_with(".kip")))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(Failure::Config(Error::Config("no checkpoints found".into())));
    }
    let mut out = Vec::new();
    for f in files {
        let c = Checkpoint::load(&f).map_err(|e| Failure::Config(Error::Checkpoint(format!("{}: {e}", f.display()))))?;
        out.push((f, c));
    }
    out.sort_by_key(|(f, c)| (c.header.step, f.clone()));
    Ok(out)
}

fn analyze(cfg: &Option<PathBuf>, what: Analysis) -> Outcome {
    match what {
        Analysis::Id {
            common,
            checkpoints,
            discard,
        } => {
            let s = settings(cfg, &common.pairs())?;
            per_checkpoint(&s, &checkpoints, "id.csv", &["twonn_id"], |_, support| {
                Ok(vec![twonn_id(&image_rows(&support.images), discard)?])
            })
        }
        Analysis::Lindim {
            common,
            checkpoints,
            threshold,
        } => {
            let s = settings(cfg, &common.pairs())?;
            per_checkpoint(&s, &checkpoints, "lindim.csv", &["linear_dim"], |_, support| {
                Ok(vec![linear_dim(&image_rows(&support.images), threshold)? as f64])
            })
        }
        Analysis::Graddim {
            common,
            checkpoints,
            discard,
            threshold,
        } => {
            let s = settings(cfg, &common.pairs())?;
            let explicit = s.kernel_explicit.then_some(s.kernel);
            per_checkpoint(&s, &checkpoints, "graddim.csv", &["gradient_id", "gradient_linear_dim"], |ckpt, support| {
                let spec = explicit.unwrap_or(ckpt.header.spec).with_kind(KernelKind::Ntk);
                let dist = gradient_distance_matrix(&support.images, &spec)?;
                let theta = SymMatrix::symmetrized(crate::kernels::kernel_matrix(&support.images, &support.images, &spec)?);
                Ok(vec![
                    twonn_id_from_distances(dist.matrix(), discard)?,
                    linear_dim_from_gram(&theta, threshold)? as f64,
                ])
            })
        }
        Analysis::Spectral {
            common,
            checkpoint,
            bands,
        } => {
            let s = settings(cfg, &common.pairs())?;
            let (_, support, data, spec) = checkpoint_data(&s, &checkpoint)?;
            if bands == 0 || bands > support.len() {
                return Err(Failure::Config(Error::Config(format!(
                    "bands must be between 1 and the support size {}",
                    support.len()
                ))));
            }
            let report = with_backend(&s, |b| {
                let go = || -> crate::Result<_> {
                    let xs = &support.images;
                    let kss = SymMatrix::symmetrized(b.kernel_matrix(xs, xs, &spec)?);
                    let kts = b.kernel_matrix(&data.test.images, xs, &spec)?;
                    crate::analysis::spectral_band_accuracy(
                        &kss,
                        &kts,
                        &support.labels,
                        &data.test.labels,
                        &contiguous_bands(support.len(), bands),
                    )
                };
                go().map_err(Failure::Runtime)
            })?;
            create_out(&s)?;
            let mut w = csv_writer(&s.out.join("spectral.csv"))?;
            w.write_record(["band", "start", "end", "accuracy", "relative_change"]).map_err(csv_err)?;
            w.write_record(["all", "0", &support.len().to_string(), &format!("{}", report.full_accuracy), "0"])
                .map_err(csv_err)?;
            for (i, b) in report.bands.iter().enumerate() {
                w.write_record([
                    i.to_string(),
                    b.band.start.to_string(),
                    b.band.end.to_string(),
                    format!("{}", b.accuracy),
                    format!("{}", b.relative_change),
                ])
                .map_err(csv_err)?;
            }
            w.flush().map_err(|e| Failure::Runtime(e.into()))?;
            println!("full-spectrum accuracy {:.4}", report.full_accuracy);
            Ok(())
        }
        Analysis::Subsample {
            common,
            checkpoint,
            fractions,
            trials,
        } => {
            let s = settings(cfg, &common.pairs())?;
            let fractions: Vec<f64> = fractions
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .ok()
                .filter(|v: &Vec<f64>| !v.is_empty() && v.iter().all(|f| *f > 0.0 && *f <= 1.0))
                .ok_or_else(|| Failure::Config(Error::Config(format!("bad fractions {fractions:?}"))))?;
            if trials == 0 {
                return Err(Failure::Config(Error::Config("trials must be at least 1".into())));
            }
            let (_, support, data, spec) = checkpoint_data(&s, &checkpoint)?;
            let stats = with_backend(&s, |b| {
                let go = || -> crate::Result<_> {
                    let xs = &support.images;
                    let kss = SymMatrix::symmetrized(b.kernel_matrix(xs, xs, &spec)?);
                    let kts = b.kernel_matrix(&data.test.images, xs, &spec)?;
                    subsample_eval_kernels(&kss, &kts, &support.labels, &data.test.labels, &fractions, trials, s.lambda0, s.seed)
                };
                go().map_err(Failure::Runtime)
            })?;
            create_out(&s)?;
            let mut w = csv_writer(&s.out.join("subsample.csv"))?;
            w.write_record(["keep_fraction", "mean_accuracy", "std_accuracy", "relative_drop", "trials"])
                .map_err(csv_err)?;
            for st in &stats {
                w.write_record([
                    format!("{}", st.keep_fraction),
                    format!("{}", st.mean_accuracy),
                    format!("{}", st.std_accuracy),
                    format!("{}", st.relative_drop),
                    st.trials.len().to_string(),
                ])
                .map_err(csv_err)?;
            }
            w.flush().map_err(|e| Failure::Runtime(e.into()))?;
            Ok(())
        }
    }
}

/// Writes one CSV row of `columns` per checkpoint.
fn per_checkpoint(
    s: &Settings,
    paths: &[PathBuf],
    file: &str,
    columns: &[&str],
    f: impl Fn(&Checkpoint, &SupportSet) -> crate::Result<Vec<f64>>,
) -> Outcome {
    let files = checkpoint_files(paths)?;
    create_out(s)?;
    let mut w = csv_writer(&s.out.join(file))?;
    let mut header = vec!["checkpoint", "step"];
    header.extend_from_slice(columns);
    w.write_record(&header).map_err(csv_err)?;
    for (path, ckpt) in &files {
        let support = ckpt.support().input()?;
        let values = f(ckpt, &support).map_err(Failure::Runtime)?;
        let mut row = vec![path.display().to_string(), ckpt.header.step.to_string()];
        row.extend(values.iter().map(|v| format!("{v}")));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Failure::Runtime(e.into()))?;
    Ok(())
}

