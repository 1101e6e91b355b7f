//! Run configuration and its flat `key = value` file format.
//!
//! ```text
//! # garment.cfg
//! density = 0.1
//! num_steps = 100
//! init_method = Magnitude (per layer)
//! ```
//!
//! Keys carry the parameter names used throughout the pruner. `n`, `alpha`,
//! `lambda` and `d` are accepted as short aliases.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{Method, Scope, ScoringSpec};
use crate::solver::SaSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub density: f64,
    pub num_epochs: usize,
    pub num_steps: usize,
    pub init_method: ScoringSpec,
    pub selection_method: ScoringSpec,
    pub block_size: usize,
    pub num_restarts: usize,
    pub batch_size_evaluation: usize,
    pub batch_size_pruning: usize,
    pub batch_size_calibration: usize,
    pub grad_multiplier: f64,
    pub ridge_multiplier: f64,
    pub tabu_frac: f64,
    pub fix_frac_prune: f64,
    pub fix_frac_keep: f64,
    pub seed: u64,
    pub sa_sweeps: usize,
    pub sa_t_init: Option<f64>,
    pub sa_t_final: f64,
}

impl RunConfig {
    /// Garment-classifier defaults at the given density.
    pub fn garment(density: f64) -> Self {
        Self {
            density,
            num_epochs: 10,
            num_steps: 300,
            init_method: ScoringSpec::new(Method::Magnitude, Scope::PerLayer),
            selection_method: ScoringSpec::new(Method::Gradient, Scope::PerLayer),
            block_size: 1024,
            num_restarts: 10,
            batch_size_evaluation: 4096,
            batch_size_pruning: 2000,
            batch_size_calibration: 4096,
            grad_multiplier: 0.75,
            ridge_multiplier: 0.001,
            tabu_frac: 0.40,
            fix_frac_prune: 0.42,
            fix_frac_keep: 0.35,
            seed: 0,
            sa_sweeps: 500,
            sa_t_init: None,
            sa_t_final: 1e-3,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.num_epochs * self.num_steps
    }

    /// Solver schedule for one step, seeded with `seed`.
    pub fn schedule(&self, seed: u64) -> SaSchedule {
        SaSchedule {
            sweeps: self.sa_sweeps,
            t_init: self.sa_t_init,
            t_final: self.sa_t_final,
            restarts: self.num_restarts,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0 && self.density < 1.0) {
            return Err(Error::config("density", format!("{} is outside (0, 1)", self.density)));
        }
        if self.block_size < 2 {
            return Err(Error::config("block_size", "must be at least 2"));
        }
        for (key, v) in [
            ("tabu_frac", self.tabu_frac),
            ("fix_frac_prune", self.fix_frac_prune),
            ("fix_frac_keep", self.fix_frac_keep),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(key, format!("{v} is outside [0, 1)")));
            }
        }
        for (key, v) in [
            ("num_restarts", self.num_restarts),
            ("batch_size_evaluation", self.batch_size_evaluation),
            ("batch_size_pruning", self.batch_size_pruning),
            ("batch_size_calibration", self.batch_size_calibration),
            ("sa_sweeps", self.sa_sweeps),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        for (key, v) in [
            ("grad_multiplier", self.grad_multiplier),
            ("ridge_multiplier", self.ridge_multiplier),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(key, format!("{v} must be finite and non-negative")));
            }
        }
        if !(self.sa_t_final > 0.0) {
            return Err(Error::config("sa_t_final", "must be positive"));
        }
        if let Some(t) = self.sa_t_init {
            if !(t >= self.sa_t_final) {
                return Err(Error::config("sa_t_init", "must be at least sa_t_final"));
            }
        }
        Ok(())
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = canonical_key(key).ok_or_else(|| Error::config(key, "unknown key"))?;
        let bad = |detail: String| Error::config(key, detail);
        let float = || value.parse::<f64>().map_err(|e| bad(format!("`{value}`: {e}")));
        let int = || value.parse::<usize>().map_err(|e| bad(format!("`{value}`: {e}")));
        let spec = || value.parse::<ScoringSpec>().map_err(|e| bad(e.to_string()));
        match key {
            "density" => self.density = float()?,
            "num_epochs" => self.num_epochs = int()?,
            "num_steps" => self.num_steps = int()?,
            "init_method" => self.init_method = spec()?,
            "selection_method" => self.selection_method = spec()?,
            "block_size" => self.block_size = int()?,
            "num_restarts" => self.num_restarts = int()?,
            "batch_size_evaluation" => self.batch_size_evaluation = int()?,
            "batch_size_pruning" => self.batch_size_pruning = int()?,
            "batch_size_calibration" => self.batch_size_calibration = int()?,
            "grad_multiplier" => self.grad_multiplier = float()?,
            "ridge_multiplier" => self.ridge_multiplier = float()?,
            "tabu_frac" => self.tabu_frac = float()?,
            "fix_frac_prune" => self.fix_frac_prune = float()?,
            "fix_frac_keep" => self.fix_frac_keep = float()?,
            "seed" => self.seed = value.parse().map_err(|e| bad(format!("`{value}`: {e}")))?,
            "sa_sweeps" => self.sa_sweeps = int()?,
            "sa_t_init" => {
                self.sa_t_init = match value {
                    "auto" | "None" => None,
                    _ => Some(float()?),
                }
            }
            "sa_t_final" => self.sa_t_final = float()?,
            _ => unreachable!(),
        }
        Ok(())
    }

    /// Flat `key = value` rendering that [`parse_config_str`] reads back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("density", self.density.to_string());
        line("num_epochs", self.num_epochs.to_string());
        line("num_steps", self.num_steps.to_string());
        line("init_method", self.init_method.to_string());
        line("selection_method", self.selection_method.to_string());
        line("block_size", self.block_size.to_string());
        line("num_restarts", self.num_restarts.to_string());
        line("batch_size_evaluation", self.batch_size_evaluation.to_string());
        line("batch_size_pruning", self.batch_size_pruning.to_string());
        line("batch_size_calibration", self.batch_size_calibration.to_string());
        line("grad_multiplier", self.grad_multiplier.to_string());
        line("ridge_multiplier", self.ridge_multiplier.to_string());
        line("tabu_frac", self.tabu_frac.to_string());
        line("fix_frac_prune", self.fix_frac_prune.to_string());
        line("fix_frac_keep", self.fix_frac_keep.to_string());
        line("seed", self.seed.to_string());
        line("sa_sweeps", self.sa_sweeps.to_string());
        line(
            "sa_t_init",
            self.sa_t_init.map_or_else(|| "auto".to_string(), |t| t.to_string()),
        );
        line("sa_t_final", self.sa_t_final.to_string());
        s
    }
}

const KEYS: &[&str] = &[
    "density",
    "num_epochs",
    "num_steps",
    "init_method",
    "selection_method",
    "block_size",
    "num_restarts",
    "batch_size_evaluation",
    "batch_size_pruning",
    "batch_size_calibration",
    "grad_multiplier",
    "ridge_multiplier",
    "tabu_frac",
    "fix_frac_prune",
    "fix_frac_keep",
    "seed",
    "sa_sweeps",
    "sa_t_init",
    "sa_t_final",
];

fn canonical_key(key: &str) -> Option<&'static str> {
    let key = match key {
        "d" => "density",
        "n" => "block_size",
        "alpha" => "grad_multiplier",
        "lambda" => "ridge_multiplier",
        k => k,
    };
    KEYS.iter().copied().find(|&k| k == key)
}

/// Splits `key=value` (as given on a command line).
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| Error::config(arg, "expected key=value"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(line, format!("line {}: expected key = value", lineno + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Resolves a config from file text plus overrides applied in order.
/// `density` has no default and must appear in one of them.
pub fn parse_config_str(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::garment(f64::NAN);
    for (k, v) in parse_lines(text)?.iter().chain(overrides) {
        cfg.set(k, v)?;
    }
    if cfg.density.is_nan() {
        return Err(Error::config("density", "required"));
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    parse_config_str(&text, overrides)
}
