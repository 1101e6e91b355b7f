//! One-shot weight scores and extreme-score selection.
//!
//! Raw scores are turned into fractional ranks within a group (a whole
//! tensor, one output row, or one input column) so that groups of different
//! scale can be compared under a single global count.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{Batch, Mlp};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Random,
    Magnitude,
    Gradient,
    Wanda,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    PerLayer,
    PerOutput,
    PerInput,
}

impl Method {
    pub fn needs_calibration(self) -> bool {
        matches!(self, Method::Gradient | Method::Wanda)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Random => "random",
            Method::Magnitude => "magnitude",
            Method::Gradient => "gradient",
            Method::Wanda => "wanda",
        }
    }
}

impl Scope {
    pub fn as_str(self) -> &'static str {
        match self {
            Scope::PerLayer => "per_layer",
            Scope::PerOutput => "per_output",
            Scope::PerInput => "per_input",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "random" => Ok(Method::Random),
            "magnitude" => Ok(Method::Magnitude),
            "gradient" => Ok(Method::Gradient),
            "wanda" => Ok(Method::Wanda),
            other => Err(format!("unknown scoring method `{other}`")),
        }
    }
}

impl FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let norm: String = s
            .trim()
            .to_ascii_lowercase()
            .chars()
            .map(|c| if c == ' ' || c == '-' { '_' } else { c })
            .collect();
        match norm.as_str() {
            "per_layer" | "layer" => Ok(Scope::PerLayer),
            "per_output" | "output" => Ok(Scope::PerOutput),
            "per_input" | "input" => Ok(Scope::PerInput),
            other => Err(format!("unknown scope `{other}`")),
        }
    }
}

/// A scoring method together with its aggregation scope, written
/// `magnitude:per_layer` or `Magnitude (per layer)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringSpec {
    pub method: Method,
    pub scope: Scope,
}

impl ScoringSpec {
    pub const fn new(method: Method, scope: Scope) -> Self {
        Self { method, scope }
    }
}

impl fmt::Display for ScoringSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.method, self.scope)
    }
}

impl FromStr for ScoringSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let (m, sc) = if let Some((m, rest)) = s.split_once('(') {
            (m, rest.trim_end_matches(')'))
        } else if let Some((m, sc)) = s.split_once(':') {
            (m, sc)
        } else {
            (s, "per_layer")
        };
        Ok(Self {
            method: m.parse()?,
            scope: sc.parse()?,
        })
    }
}

/// Scores for a contiguous range of global weight indices starting at
/// `offset`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    pub values: Vec<f64>,
    pub offset: usize,
    pub method: Method,
    pub scope: Scope,
    pub normalized: bool,
}

impl ScoreVector {
    #[inline]
    pub fn get(&self, index: usize) -> f64 {
        self.values[index - self.offset]
    }

    pub fn covers(&self, index: usize) -> bool {
        index >= self.offset && index < self.offset + self.values.len()
    }
}

/// Batch statistics one tensor's scores may need.
#[derive(Clone, Debug, Default)]
pub struct TensorStats {
    /// Mean loss gradient at the current weights, `out × in`.
    pub gradient: Option<Matrix>,
    /// Batch mean of squared inputs per column.
    pub activations: Option<Vec<f64>>,
}

/// Raw Table-style score of every weight in `tensor`, row-major.
///
/// Scores use the original weights, so a currently pruned weight is scored
/// by what restoring it would bring back rather than by its present zero.
pub fn raw_tensor_scores(
    method: Method,
    model: &Mlp,
    tensor: usize,
    stats: &TensorStats,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let w0 = &model.original_weights()[tensor];
    let cols = w0.cols();
    let out = match method {
        Method::Random => (0..w0.as_slice().len()).map(|_| rng.random::<f64>()).collect(),
        Method::Magnitude => w0.as_slice().iter().map(|w| w.abs()).collect(),
        Method::Gradient => {
            let g = stats.gradient.as_ref().ok_or(Error::MissingGradient)?;
            w0.as_slice().iter().zip(g.as_slice()).map(|(w, g)| (w * g).abs()).collect()
        }
        Method::Wanda => {
            let a = stats.activations.as_ref().ok_or(Error::MissingActivations)?;
            w0.as_slice()
                .iter()
                .enumerate()
                .map(|(i, w)| (w * a[i % cols]).abs())
                .collect()
        }
    };
    Ok(out)
}

/// Replaces raw scores by fractional ranks `r / group_len` in `[0, 1)`.
/// Ties inside a group are ordered by position.
pub fn rank_within_groups(raw: &[f64], rows: usize, cols: usize, scope: Scope) -> Vec<f64> {
    let mut out = vec![0.0; raw.len()];
    let mut rank_group = |members: &mut Vec<usize>| {
        members.sort_by(|&a, &b| raw[a].total_cmp(&raw[b]).then(a.cmp(&b)));
        let len = members.len() as f64;
        for (r, &i) in members.iter().enumerate() {
            out[i] = r as f64 / len;
        }
    };
    match scope {
        Scope::PerLayer => rank_group(&mut (0..raw.len()).collect()),
        Scope::PerOutput => {
            for r in 0..rows {
                rank_group(&mut (r * cols..(r + 1) * cols).collect());
            }
        }
        Scope::PerInput => {
            for c in 0..cols {
                rank_group(&mut (0..rows).map(|r| r * cols + c).collect());
            }
        }
    }
    out
}

/// Rank-normalized scores for a single tensor.
pub fn score_tensor(
    spec: ScoringSpec,
    model: &Mlp,
    tensor: usize,
    stats: &TensorStats,
    rng: &mut Rng,
) -> Result<ScoreVector> {
    let raw = raw_tensor_scores(spec.method, model, tensor, stats, rng)?;
    let w = &model.original_weights()[tensor];
    Ok(ScoreVector {
        values: rank_within_groups(&raw, w.rows(), w.cols(), spec.scope),
        offset: model.tensor_range(tensor).start,
        method: spec.method,
        scope: spec.scope,
        normalized: true,
    })
}

/// Rank-normalized scores for every prunable weight. Gradient and Wanda
/// statistics come from `calib`.
pub fn score(spec: ScoringSpec, model: &Mlp, calib: Option<&Batch>, rng: &mut Rng) -> Result<ScoreVector> {
    let n = model.num_tensors();
    let mut stats = vec![TensorStats::default(); n];
    match spec.method {
        Method::Gradient => {
            let calib = calib.filter(|b| !b.is_empty()).ok_or(Error::EmptyDataset)?;
            let trace = model.trace(calib)?;
            for (t, s) in stats.iter_mut().enumerate() {
                s.gradient = Some(trace.layer_grad(t));
            }
        }
        Method::Wanda => {
            let calib = calib.filter(|b| !b.is_empty()).ok_or(Error::EmptyDataset)?;
            let acts = model
                .forward(calib, true)?
                .activations
                .ok_or(Error::MissingActivations)?;
            for (s, a) in stats.iter_mut().zip(acts) {
                s.activations = Some(a);
            }
        }
        Method::Random | Method::Magnitude => {}
    }
    let mut values = Vec::with_capacity(model.num_weights());
    for (t, s) in stats.iter().enumerate() {
        values.extend(score_tensor(spec, model, t, s, rng)?.values);
    }
    Ok(ScoreVector {
        values,
        offset: 0,
        method: spec.method,
        scope: spec.scope,
        normalized: true,
    })
}

fn by_score_then_index(scores: &ScoreVector, a: usize, b: usize) -> Ordering {
    scores.get(a).total_cmp(&scores.get(b)).then(a.cmp(&b))
}

/// The `count` lowest-scoring members of `within`, ties broken by ascending
/// index, in ascending score order.
pub fn lowest_k(scores: &ScoreVector, count: usize, within: &[usize]) -> Vec<usize> {
    assert!(count <= within.len(), "count exceeds candidate set");
    let mut v = within.to_vec();
    if count < v.len() && count > 0 {
        v.select_nth_unstable_by(count - 1, |&a, &b| by_score_then_index(scores, a, b));
    }
    v.truncate(count);
    v.sort_by(|&a, &b| by_score_then_index(scores, a, b));
    v
}

/// Mirror of [`lowest_k`]: highest scores first, ties by ascending index.
pub fn highest_k(scores: &ScoreVector, count: usize, within: &[usize]) -> Vec<usize> {
    assert!(count <= within.len(), "count exceeds candidate set");
    let cmp = |&a: &usize, &b: &usize| scores.get(b).total_cmp(&scores.get(a)).then(a.cmp(&b));
    let mut v = within.to_vec();
    if count < v.len() && count > 0 {
        v.select_nth_unstable_by(count - 1, cmp);
    }
    v.truncate(count);
    v.sort_by(cmp);
    v
}
