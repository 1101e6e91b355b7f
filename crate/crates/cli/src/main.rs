use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use icbs_core::checkpoint::{self, Checkpoint, TrainingMeta};
use icbs_core::config::{parse_config, parse_override, RunConfig};
use icbs_core::data::{load_idx, synthetic_blobs, Dataset, Split};
use icbs_core::nn::{Mlp, Plateau, TrainOptions};
use icbs_core::pruner::{baseline_from_config, fraction_optimized, EpochRecord, Pruner};
use icbs_core::runlog::{report_csv, timing_line, RunLog, RunSummary};
use icbs_core::scoring::ScoringSpec;
use icbs_core::solver::{brute_force, solve_csa, SaSchedule};
use icbs_core::{Error, QcboProblem};

#[derive(Parser)]
#[command(name = "icbs", version, about = "Combinatorial pruning of small feedforward classifiers")]
struct Cli {
    /// Run on a single thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a fresh network with SGD and write a checkpoint.
    Train(TrainArgs),
    /// One-shot pruning by a scoring method.
    PruneBaseline(PruneArgs),
    /// Iterative block-wise pruning.
    PruneIcbs(PruneArgs),
    /// Print validation loss and accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Merge run logs into one CSV.
    Report(ReportArgs),
    /// Solve a dumped block problem.
    Solve(SolveArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Directory with the four standard Fashion-MNIST IDX files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, requires = "train_labels")]
    train_images: Option<PathBuf>,
    #[arg(long)]
    train_labels: Option<PathBuf>,
    /// Validation images (IDX).
    #[arg(long, requires = "labels")]
    images: Option<PathBuf>,
    /// Validation labels (IDX).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Use Gaussian blobs generated from this seed instead of files.
    #[arg(long, conflicts_with_all = ["data_dir", "train_images", "images"])]
    synthetic: Option<u64>,
    #[arg(long, default_value_t = 5000)]
    synthetic_train: usize,
    #[arg(long, default_value_t = 1000)]
    synthetic_valid: usize,
    #[arg(long, default_value_t = 784)]
    synthetic_dim: usize,
    #[arg(long, default_value_t = 10)]
    synthetic_classes: usize,
}

const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
const VALID_IMAGES: &str = "t10k-images-idx3-ubyte";
const VALID_LABELS: &str = "t10k-labels-idx1-ubyte";

impl DataArgs {
    fn synthetic_split(&self, seed: u64) -> (Dataset, Dataset) {
        synthetic_blobs(
            seed,
            self.synthetic_train + self.synthetic_valid,
            self.synthetic_classes,
            self.synthetic_dim,
        )
        .split_off(self.synthetic_valid)
    }

    fn pick(&self, explicit: &Option<PathBuf>, name: &str) -> Result<PathBuf, Error> {
        match (explicit, &self.data_dir) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(d)) => Ok(d.join(name)),
            (None, None) => Err(Error::Config {
                key: "data".into(),
                detail: "give --data-dir, explicit IDX paths, or --synthetic".into(),
            }),
        }
    }

    fn train(&self) -> Result<Dataset, Error> {
        if let Some(seed) = self.synthetic {
            return Ok(self.synthetic_split(seed).0);
        }
        let images = self.pick(&self.train_images, TRAIN_IMAGES)?;
        let labels = self.pick(&self.train_labels, TRAIN_LABELS)?;
        load_idx(&images, &labels, Split::Train)
    }

    fn valid(&self) -> Result<Dataset, Error> {
        if let Some(seed) = self.synthetic {
            return Ok(self.synthetic_split(seed).1);
        }
        let images = self.pick(&self.images, VALID_IMAGES)?;
        let labels = self.pick(&self.labels, VALID_LABELS)?;
        load_idx(&images, &labels, Split::Valid)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', default_value = "512,512")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stop once the training loss has not improved for this many epochs.
    #[arg(long)]
    plateau_patience: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    plateau_tol: f64,
}

#[derive(Args)]
struct PruneArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Trained checkpoint directory (left untouched).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Scoring method for prune-baseline; defaults to `init_method`.
    #[arg(long)]
    method: Option<ScoringSpec>,
    /// Also write every block problem under `<out>/problems`.
    #[arg(long)]
    dump_problems: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 4096)]
    batch_size: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Run logs (`run.jsonl`) or output directories containing one.
    #[arg(required = true)]
    logs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SolveArgs {
    problem: PathBuf,
    /// Enumerate every feasible assignment instead of annealing.
    #[arg(long)]
    exact: bool,
    #[arg(long, default_value_t = 500)]
    sweeps: usize,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Output directory assembled under a temporary name and moved into place
/// only once everything has been written.
struct Staged {
    tmp: PathBuf,
    out: PathBuf,
}

impl Staged {
    fn new(out: &Path, inputs: &[&Path]) -> Result<Self, Error> {
        for input in inputs {
            if same_path(out, input) {
                return Err(Error::Config {
                    key: "out".into(),
                    detail: format!("{} is an input; refusing to overwrite it", out.display()),
                });
            }
        }
        let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
        let tmp = parent.join(format!(".{name}.partial-{}", std::process::id()));
        let _ = fs::remove_dir_all(&tmp);
        fs::create_dir_all(&tmp).map_err(|e| Error::Io {
            path: tmp.clone(),
            source: e,
        })?;
        Ok(Self {
            tmp,
            out: out.to_path_buf(),
        })
    }

    fn path(&self) -> &Path {
        &self.tmp
    }

    fn commit(self) -> Result<(), Error> {
        if self.out.exists() {
            fs::remove_dir_all(&self.out).map_err(|e| Error::Io {
                path: self.out.clone(),
                source: e,
            })?;
        }
        let res = fs::rename(&self.tmp, &self.out).map_err(|e| Error::Io {
            path: self.out.clone(),
            source: e,
        });
        std::mem::forget(self);
        res
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.tmp);
    }
}

fn same_path(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn train(args: &TrainArgs) -> Result<(), Error> {
    let train = args.data.train()?;
    let valid = args.data.valid()?;
    let mut dims = vec![train.dim()];
    dims.extend(&args.hidden);
    dims.push(train.num_classes());
    let staged = Staged::new(&args.out, &[])?;
    let mut model = Mlp::new(&dims, args.seed);
    let opts = TrainOptions {
        epochs: args.epochs,
        lr: args.lr,
        batch_size: args.batch_size,
        seed: args.seed,
        plateau: args.plateau_patience.map(|patience| Plateau {
            patience,
            rel_tol: args.plateau_tol,
        }),
    };
    let started = Instant::now();
    let report = model.train_sgd(&train, &opts)?;
    let (loss, acc) = model.evaluate(&valid, 4096)?;
    checkpoint::save(
        staged.path(),
        &Checkpoint {
            model,
            init_seed: args.seed,
            training: Some(TrainingMeta::new(&opts, &report)),
            mask: None,
        },
    )?;
    write(
        &staged.path().join("timing.jsonl"),
        &timing_line("train", started.elapsed().as_secs_f64()),
    )?;
    staged.commit()?;
    println!(
        "epochs {} train_loss {} valid_loss {loss} valid_accuracy {acc}",
        report.epochs_run, report.final_loss
    );
    Ok(())
}

fn run_config(args: &PruneArgs) -> Result<RunConfig, Error> {
    let mut overrides = args
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(seed) = args.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    parse_config(args.config.as_deref(), &overrides)
}

fn load_trained(path: &Path) -> Result<Checkpoint, Error> {
    let ck = checkpoint::load(path)?;
    if ck.mask.is_some() {
        return Err(Error::Checkpoint(format!(
            "{} is already pruned; start from a trained checkpoint",
            path.display()
        )));
    }
    Ok(ck)
}

fn prune(args: &PruneArgs, iterative: bool) -> Result<(), Error> {
    let cfg = run_config(args)?;
    let ck = load_trained(&args.checkpoint)?;
    let train = args.data.train()?;
    let valid = args.data.valid()?;
    let staged = Staged::new(&args.out, &[&args.checkpoint])?;
    let started = Instant::now();
    let n_weights = ck.model.num_weights();
    let mut timing = String::new();

    let (model, mask, epochs, initial, summary_method, scope, total_steps, skipped) = if iterative {
        let mut pruner = Pruner::new(ck.model.clone(), &train, cfg.clone())?;
        if args.dump_problems {
            let dir = staged.path().join("problems");
            fs::create_dir_all(&dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            pruner.dump_problems_to(dir);
        }
        let initial = pruner.model().evaluate(&valid, cfg.batch_size_evaluation)?;
        let mut epochs = Vec::new();
        for e in 1..=cfg.num_epochs {
            let rec = pruner.epoch(e, &valid)?;
            eprintln!(
                "epoch {e}: loss {:.6} accuracy {:.4} skipped {} ({:.1}s)",
                rec.loss, rec.accuracy, rec.skipped, rec.wall_seconds
            );
            timing.push_str(&timing_line(&format!("epoch {e}"), rec.wall_seconds));
            epochs.push(rec);
        }
        let skipped = pruner.skipped();
        let (model, state) = pruner.into_parts();
        let scope = cfg.selection_method.scope.to_string();
        (model, state.mask().to_vec(), epochs, initial, "icbs".to_string(), scope, cfg.total_steps(), skipped)
    } else {
        let spec = args.method.unwrap_or(cfg.init_method);
        let mut model = ck.model.clone();
        let state = baseline_from_config(&mut model, &train, spec, &cfg)?;
        let (loss, accuracy) = model.evaluate(&valid, cfg.batch_size_evaluation)?;
        let rec = EpochRecord {
            epoch: 0,
            loss,
            accuracy,
            steps: 0,
            skipped: 0,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        (
            model,
            state.mask().to_vec(),
            vec![rec],
            (loss, accuracy),
            spec.method.to_string(),
            spec.scope.to_string(),
            0,
            0,
        )
    };

    let last = epochs.last().map_or(initial, |r| (r.loss, r.accuracy));
    let pruned = mask.iter().filter(|&&b| b).count();
    let log = RunLog {
        summary: RunSummary {
            method: summary_method,
            scope,
            density: cfg.density,
            seed: cfg.seed,
            num_weights: n_weights,
            pruned,
            total_steps,
            block_size: cfg.block_size,
            fraction_of_weights_optimized: fraction_optimized(total_steps, cfg.block_size, n_weights),
            steps_skipped: skipped,
            initial_loss: initial.0,
            initial_accuracy: initial.1,
            final_loss: last.0,
            final_accuracy: last.1,
            config: Some(cfg.clone()),
        },
        epochs,
    };
    checkpoint::save(
        staged.path(),
        &Checkpoint {
            model,
            init_seed: ck.init_seed,
            training: ck.training,
            mask: Some(mask),
        },
    )?;
    write(&staged.path().join("config.cfg"), &cfg.to_text())?;
    write(&staged.path().join("run.jsonl"), &log.to_jsonl())?;
    timing.push_str(&timing_line("total", started.elapsed().as_secs_f64()));
    write(&staged.path().join("timing.jsonl"), &timing)?;
    staged.commit()?;
    println!("loss {} accuracy {}", last.0, last.1);
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<(), Error> {
    let ck = checkpoint::load(&args.checkpoint)?;
    let valid = args.data.valid()?;
    let (loss, acc) = ck.model.evaluate(&valid, args.batch_size)?;
    println!("loss {loss} accuracy {acc}");
    Ok(())
}

fn report(args: &ReportArgs) -> Result<(), Error> {
    let mut runs = Vec::new();
    for p in &args.logs {
        let path = if p.is_dir() { p.join("run.jsonl") } else { p.clone() };
        let text = fs::read_to_string(&path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        runs.push(RunLog::parse(&text)?);
    }
    let csv = report_csv(&runs);
    let tmp = args.out.with_extension("csv.partial");
    write(&tmp, &csv)?;
    fs::rename(&tmp, &args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    Ok(())
}

fn solve(args: &SolveArgs) -> Result<(), Error> {
    let text = fs::read_to_string(&args.problem).map_err(|e| Error::Io {
        path: args.problem.clone(),
        source: e,
    })?;
    let problem = QcboProblem::from_dump(&text)?;
    let sol = if args.exact {
        brute_force(&problem)?
    } else {
        let schedule = SaSchedule {
            sweeps: args.sweeps,
            restarts: args.restarts,
            seed: args.seed,
            ..SaSchedule::default()
        };
        solve_csa(&problem, &schedule)?
    };
    println!("{}", sol.to_line());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.sequential {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .expect("thread pool is configured once");
    }
    let res = match &cli.command {
        Command::Train(a) => train(a),
        Command::PruneBaseline(a) => prune(a, false),
        Command::PruneIcbs(a) => prune(a, true),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
        Command::Solve(a) => solve(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
