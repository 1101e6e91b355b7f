//! Solvers for cardinality-constrained binary quadratic problems.
//!
//! [`solve_csa`] is a multi-restart simulated annealer that never leaves the
//! feasible set: every move swaps one selected variable with one unselected
//! variable. [`brute_force`] enumerates all feasible points and serves as the
//! reference for small problems.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::block::QcboProblem;
use crate::error::{Error, Result};

/// Largest problem [`brute_force`] accepts.
pub const BRUTE_FORCE_LIMIT: usize = 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaSchedule {
    /// Sweeps per restart; one sweep proposes `n` swaps.
    pub sweeps: usize,
    /// Starting temperature; `None` uses the largest coefficient magnitude.
    pub t_init: Option<f64>,
    pub t_final: f64,
    pub restarts: usize,
    /// Restart `r` is seeded with `seed + r`.
    pub seed: u64,
}

impl Default for SaSchedule {
    fn default() -> Self {
        Self {
            sweeps: 500,
            t_init: None,
            t_final: 1e-3,
            restarts: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub x: Vec<bool>,
    pub objective: f64,
}

impl Solution {
    pub fn ones(&self) -> usize {
        self.x.iter().filter(|&&b| b).count()
    }

    /// `x` as a `0`/`1` string followed by the objective.
    pub fn to_line(&self) -> String {
        let bits: String = self.x.iter().map(|&b| if b { '1' } else { '0' }).collect();
        format!("{bits} {:e}", self.objective)
    }
}

struct Restart {
    x: Vec<bool>,
    best: f64,
    /// Minimum of the running objective over every visited point.
    #[cfg_attr(not(test), allow(dead_code))]
    min_visited: f64,
}

fn anneal(problem: &QcboProblem, q: &[f64], schedule: &SaSchedule, t_init: f64, seed: u64) -> Restart {
    let n = problem.n;
    let k = problem.k;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut ones = perm[..k].to_vec();
    let mut zeros = perm[k..].to_vec();
    let mut x = vec![false; n];
    for &i in &ones {
        x[i] = true;
    }
    // field[i] = linear[i] + Σ_j q[i][j]·x[j]
    let mut field = problem.linear.clone();
    for &j in &ones {
        let row = &q[j * n..(j + 1) * n];
        for (f, v) in field.iter_mut().zip(row) {
            *f += v;
        }
    }
    let mut energy = problem.objective(&x);
    let mut best = energy;
    let mut best_x = x.clone();
    let mut min_visited = energy;

    let ratio = schedule.t_final / t_init;
    let span = schedule.sweeps.saturating_sub(1).max(1) as f64;
    for sweep in 0..schedule.sweeps {
        let temp = t_init * ratio.powf(sweep as f64 / span);
        for _ in 0..n {
            let a = rng.random_range(0..k);
            let b = rng.random_range(0..n - k);
            let (i, j) = (ones[a], zeros[b]);
            let delta = field[j] - field[i] - q[i * n + j];
            if delta > 0.0 && rng.random::<f64>() >= (-delta / temp).exp() {
                continue;
            }
            ones[a] = j;
            zeros[b] = i;
            x[i] = false;
            x[j] = true;
            let (ri, rj) = (&q[i * n..(i + 1) * n], &q[j * n..(j + 1) * n]);
            for ((f, vi), vj) in field.iter_mut().zip(ri).zip(rj) {
                *f += vj - vi;
            }
            energy += delta;
            min_visited = min_visited.min(energy);
            if energy < best {
                best = energy;
                best_x.copy_from_slice(&x);
            }
        }
    }
    Restart {
        best: problem.objective(&best_x),
        x: best_x,
        min_visited,
    }
}

fn check_cardinality(problem: &QcboProblem) -> Result<()> {
    if problem.k == 0 || problem.k >= problem.n {
        return Err(Error::InfeasibleCardinality {
            n: problem.n,
            k: problem.k,
        });
    }
    Ok(())
}

/// Best of `schedule.restarts` independent anneals, each from a random
/// feasible point with geometric cooling. Restarts run on the rayon pool;
/// the reduction takes the lowest objective and, among equals, the lowest
/// restart ordinal, so the result does not depend on thread count.
pub fn solve_csa(problem: &QcboProblem, schedule: &SaSchedule) -> Result<Solution> {
    check_cardinality(problem)?;
    let q = problem.dense_quad();
    let t_init = schedule
        .t_init
        .unwrap_or_else(|| problem.max_abs_coefficient())
        .max(schedule.t_final);
    let runs: Vec<Restart> = (0..schedule.restarts.max(1) as u64)
        .into_par_iter()
        .map(|r| anneal(problem, &q, schedule, t_init, schedule.seed.wrapping_add(r)))
        .collect();
    let best = runs
        .into_iter()
        .reduce(|acc, r| if r.best < acc.best { r } else { acc })
        .unwrap();
    Ok(Solution {
        objective: best.best,
        x: best.x,
    })
}

/// Calls `f` on every `k`-subset of `0..n` as a bitmask, in increasing
/// numeric order.
fn for_each_subset(n: usize, k: usize, mut f: impl FnMut(u32)) {
    if k == 0 {
        f(0);
        return;
    }
    let limit = 1u64 << n;
    let mut v: u64 = (1u64 << k) - 1;
    while v < limit {
        f(v as u32);
        let t = v | (v - 1);
        v = (t + 1) | (((!t & (t + 1)) - 1) >> (v.trailing_zeros() + 1));
    }
}

fn bits(mask: u32, n: usize) -> Vec<bool> {
    (0..n).map(|i| mask >> i & 1 == 1).collect()
}

fn lex_less(a: &[bool], b: &[bool]) -> bool {
    a < b
}

/// Exact optimum over all `C(n, k)` feasible points. Ties go to the
/// lexicographically smallest `x` (with `x₀` most significant).
pub fn brute_force(problem: &QcboProblem) -> Result<Solution> {
    if problem.n > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge {
            n: problem.n,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    if problem.k > problem.n {
        return Err(Error::InfeasibleCardinality {
            n: problem.n,
            k: problem.k,
        });
    }
    let mut best: Option<Solution> = None;
    for_each_subset(problem.n, problem.k, |mask| {
        let x = bits(mask, problem.n);
        let e = problem.objective(&x);
        let better = match &best {
            None => true,
            Some(b) => e < b.objective || (e == b.objective && lex_less(&x, &b.x)),
        };
        if better {
            best = Some(Solution { x, objective: e });
        }
    });
    Ok(best.unwrap())
}

/// Unconstrained quadratic binary problem
/// `min offset + Σ linearᵢxᵢ + Σᵢ<ⱼ quadᵢⱼxᵢxⱼ`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuboProblem {
    pub n: usize,
    pub linear: Vec<f64>,
    pub quad: Vec<(usize, usize, f64)>,
    pub offset: f64,
}

impl QuboProblem {
    pub fn objective(&self, x: &[bool]) -> f64 {
        let mut e = self.offset;
        for (c, &xi) in self.linear.iter().zip(x) {
            if xi {
                e += c;
            }
        }
        for &(i, j, v) in &self.quad {
            if x[i] && x[j] {
                e += v;
            }
        }
        e
    }
}

/// Adds `penalty·(Σx − k)²` expanded into the coefficients, including the
/// constant `penalty·k²` so feasible points keep their objective.
pub fn to_qubo(problem: &QcboProblem, penalty: f64) -> QuboProblem {
    let n = problem.n;
    let k = problem.k as f64;
    let linear = problem
        .linear
        .iter()
        .map(|c| c + penalty * (1.0 - 2.0 * k))
        .collect();
    let mut dense = vec![0.0; n * n];
    for &(i, j, v) in &problem.quad {
        dense[i * n + j] += v;
    }
    let mut quad = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            quad.push((i, j, dense[i * n + j] + 2.0 * penalty));
        }
    }
    QuboProblem {
        n,
        linear,
        quad,
        offset: penalty * k * k,
    }
}

/// Exact optimum over all `2ⁿ` assignments, same tie rule as [`brute_force`].
pub fn brute_force_qubo(problem: &QuboProblem) -> Result<Solution> {
    if problem.n > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge {
            n: problem.n,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let mut best: Option<Solution> = None;
    for mask in 0..(1u64 << problem.n) {
        let x = bits(mask as u32, problem.n);
        let e = problem.objective(&x);
        let better = match &best {
            None => true,
            Some(b) => e < b.objective || (e == b.objective && lex_less(&x, &b.x)),
        };
        if better {
            best = Some(Solution { x, objective: e });
        }
    }
    Ok(best.unwrap())
}
