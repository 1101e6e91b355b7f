//! The iterative pruning loop and one-shot baselines.

use std::path::PathBuf;
use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::block::{build_qcbo, select_block, Block};
use crate::config::RunConfig;
use crate::data::{sample_batch, Dataset};
use crate::error::{Error, Result};
use crate::nn::{Batch, Mlp};
use crate::rng::{self, Rng, Stream};
use crate::scoring::{score, score_tensor, Method, ScoringSpec, TensorStats};
use crate::solver::solve_csa;
use crate::state::PruneState;

/// Validation metrics at the end of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based; 0 is used for one-shot results.
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub steps: usize,
    pub skipped: usize,
    /// Kept out of the run log so that logs are reproducible.
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    Applied {
        layer: usize,
        n: usize,
        k: usize,
        /// Block members whose status changed.
        flips: usize,
        /// Scaled objective of the applied assignment.
        objective: f64,
        degenerate: bool,
    },
    /// No usable candidates in `layer`; the step still counts.
    Skipped { layer: usize },
}

/// Samples a layer with probability proportional to `log10(size)`, where
/// layers of fewer than ten weights get weight one.
pub fn pick_layer(sizes: &[usize], rng: &mut Rng) -> usize {
    let weights: Vec<f64> = sizes.iter().map(|&s| (s as f64).log10().max(1.0)).collect();
    WeightedIndex::new(&weights)
        .expect("at least one layer")
        .sample(rng)
}

/// `min(1, total_steps · n / N)`.
pub fn fraction_optimized(total_steps: usize, block_size: usize, num_weights: usize) -> f64 {
    (total_steps as f64 * block_size as f64 / num_weights as f64).min(1.0)
}

/// The calibration batch drawn for run `seed`, capped at the dataset size.
pub fn calibration_batch(train: &Dataset, size: usize, seed: u64) -> Result<Batch> {
    let mut rng = rng::stream(seed, Stream::Calibration);
    sample_batch(train, size.min(train.len()), &mut rng)
}

/// One-shot pruning: score every weight and prune the lowest
/// `⌈(1 − d)·N⌉`.
pub fn baseline_prune(
    model: &mut Mlp,
    spec: ScoringSpec,
    density: f64,
    calib: Option<&Batch>,
    rng: &mut Rng,
) -> Result<PruneState> {
    let scores = score(spec, model, calib, rng)?;
    PruneState::init(model, &scores, density)
}

/// One-shot baseline with the same calibration batch and random stream a
/// pruning run with this config would use.
pub fn baseline_from_config(
    model: &mut Mlp,
    train: &Dataset,
    spec: ScoringSpec,
    cfg: &RunConfig,
) -> Result<PruneState> {
    let calib = if spec.method.needs_calibration() {
        Some(calibration_batch(train, cfg.batch_size_calibration, cfg.seed)?)
    } else {
        None
    };
    let mut rng = rng::stream(cfg.seed, Stream::RandomScores);
    baseline_prune(model, spec, cfg.density, calib.as_ref(), &mut rng)
}

/// A pruning run in progress. Construction performs the initial pruning
/// and fixing; [`Pruner::step`] then advances one block at a time.
pub struct Pruner<'a> {
    cfg: RunConfig,
    model: Mlp,
    state: PruneState,
    train: &'a Dataset,
    batch_rng: Rng,
    layer_rng: Rng,
    solver_rng: Rng,
    score_rng: Rng,
    steps: usize,
    skipped: usize,
    dump_dir: Option<PathBuf>,
}

impl<'a> Pruner<'a> {
    pub fn new(mut model: Mlp, train: &'a Dataset, cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let calib = if cfg.init_method.method.needs_calibration() {
            Some(calibration_batch(train, cfg.batch_size_calibration, cfg.seed)?)
        } else {
            None
        };
        let mut score_rng = rng::stream(cfg.seed, Stream::RandomScores);
        let scores = score(cfg.init_method, &model, calib.as_ref(), &mut score_rng)?;
        let mut state = PruneState::init(&mut model, &scores, cfg.density)?;
        state.set_tabu_frac(cfg.tabu_frac);
        state.fix_weights(&scores, cfg.fix_frac_prune, cfg.fix_frac_keep);
        Ok(Self {
            batch_rng: rng::stream(cfg.seed, Stream::PruningBatch),
            layer_rng: rng::stream(cfg.seed, Stream::Layer),
            solver_rng: rng::stream(cfg.seed, Stream::Solver),
            score_rng,
            cfg,
            model,
            state,
            train,
            steps: 0,
            skipped: 0,
            dump_dir: None,
        })
    }

    /// Writes each step's problem to `dir/step_NNNNNN.txt`.
    pub fn dump_problems_to(&mut self, dir: PathBuf) {
        self.dump_dir = Some(dir);
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Mlp {
        &self.model
    }

    pub fn state(&self) -> &PruneState {
        &self.state
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn into_parts(self) -> (Mlp, PruneState) {
        (self.model, self.state)
    }

    pub fn step(&mut self) -> Result<StepOutcome> {
        let size = self.cfg.batch_size_pruning.min(self.train.len());
        let batch = sample_batch(self.train, size, &mut self.batch_rng)?;
        let layer = pick_layer(&self.model.tensor_sizes(), &mut self.layer_rng);
        let solver_seed: u64 = self.solver_rng.random();
        self.steps += 1;

        let trace = self.model.trace(&batch)?;
        let stats = match self.cfg.selection_method.method {
            Method::Gradient => TensorStats {
                gradient: Some(trace.layer_grad(layer)),
                activations: None,
            },
            Method::Wanda => TensorStats {
                gradient: None,
                activations: Some(trace.activation_stats(layer)),
            },
            Method::Random | Method::Magnitude => TensorStats::default(),
        };
        let scores = score_tensor(self.cfg.selection_method, &self.model, layer, &stats, &mut self.score_rng)?;
        let Some(sel) = select_block(&self.state, &scores, layer, self.cfg.block_size) else {
            self.skipped += 1;
            return Ok(StepOutcome::Skipped { layer });
        };

        let block = Block::assemble(&self.model, &self.state, &trace, sel.indices.clone());
        let problem = build_qcbo(&block, self.cfg.grad_multiplier, self.cfg.ridge_multiplier);
        if let Some(dir) = &self.dump_dir {
            let path = dir.join(format!("step_{:06}.txt", self.steps));
            std::fs::write(&path, problem.to_dump()).map_err(|e| Error::io(&path, e))?;
        }
        let incumbent = sel.incumbent();
        let degenerate = problem.is_degenerate();
        let x = if degenerate {
            incumbent.clone()
        } else {
            solve_csa(&problem, &self.cfg.schedule(solver_seed))?.x
        };
        let objective = problem.objective(&x);
        self.state.apply_solution(&mut self.model, &sel.indices, &x)?;
        self.state.tabu_push(layer, &sel.indices);
        Ok(StepOutcome::Applied {
            layer,
            n: sel.indices.len(),
            k: sel.k,
            flips: x.iter().zip(&incumbent).filter(|(a, b)| a != b).count(),
            objective,
            degenerate,
        })
    }

    /// Runs `num_steps` steps and evaluates on `valid`.
    pub fn epoch(&mut self, epoch: usize, valid: &Dataset) -> Result<EpochRecord> {
        let start = Instant::now();
        let skipped_before = self.skipped;
        for _ in 0..self.cfg.num_steps {
            self.step()?;
        }
        let (loss, accuracy) = self.model.evaluate(valid, self.cfg.batch_size_evaluation)?;
        Ok(EpochRecord {
            epoch,
            loss,
            accuracy,
            steps: self.cfg.num_steps,
            skipped: self.skipped - skipped_before,
            wall_seconds: start.elapsed().as_secs_f64(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct IcbsResult {
    pub model: Mlp,
    pub state: PruneState,
    /// Validation loss and accuracy right after the initial pruning.
    pub initial: (f64, f64),
    pub epochs: Vec<EpochRecord>,
}

/// Full run: initial pruning, fixing, then `num_epochs` epochs.
/// `on_epoch` sees every record as soon as it is available.
pub fn run_icbs(
    model: Mlp,
    train: &Dataset,
    valid: &Dataset,
    cfg: &RunConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<IcbsResult> {
    let mut pruner = Pruner::new(model, train, cfg.clone())?;
    let initial = pruner.model().evaluate(valid, cfg.batch_size_evaluation)?;
    let mut epochs = Vec::with_capacity(cfg.num_epochs);
    for e in 1..=cfg.num_epochs {
        let rec = pruner.epoch(e, valid)?;
        on_epoch(&rec);
        epochs.push(rec);
    }
    let (model, state) = pruner.into_parts();
    Ok(IcbsResult {
        model,
        state,
        initial,
        epochs,
    })
}
