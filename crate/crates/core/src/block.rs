//! Per-step block assembly and the block-level quadratic problem.
//!
//! For a block of `n` weights with original values `w0`, offsets
//! `Δw = wc − w0`, gradient `g` and Hessian `H` at the current weights, the
//! objective over the binary prune indicators `x` is
//!
//! ```text
//!   Σᵢ [−α·w0ᵢgᵢ + Σⱼ w0ᵢHᵢⱼΔwⱼ + λ(2Δwᵢw0ᵢ + w0ᵢ²) + ½w0ᵢ²Hᵢᵢ] xᵢ
//! + Σᵢ<ⱼ w0ᵢHᵢⱼw0ⱼ xᵢxⱼ
//! ```
//!
//! subject to `Σx = k`. The diagonal quadratic terms are folded into the
//! linear ones because `xᵢ² = xᵢ`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{Mlp, Trace};
use crate::scoring::{highest_k, lowest_k, ScoreVector};
use crate::state::PruneState;

/// Coefficients with magnitude at or below this are dropped after scaling.
pub const COEFF_THRESHOLD: f64 = 1e-12;

/// `(1/m)·AᵀA` for an `m × n` matrix of per-sample gradients. The result is
/// exactly symmetric.
pub fn estimate_hessian(per_sample: &Matrix) -> Matrix {
    let m = per_sample.rows();
    assert!(m >= 1, "need at least one sample");
    let mut h = per_sample.t_matmul(per_sample, 1.0 / m as f64);
    let n = h.rows();
    for i in 0..n {
        for j in 0..i {
            h[(i, j)] = h[(j, i)];
        }
    }
    h
}

#[derive(Clone, Debug)]
pub struct Block {
    pub indices: Vec<usize>,
    pub w0: Vec<f64>,
    pub dw: Vec<f64>,
    pub grad: Vec<f64>,
    pub hess: Matrix,
    pub k: usize,
}

impl Block {
    /// Gathers weights, offsets, gradient and Hessian estimate for `indices`
    /// from a trace of the current model.
    pub fn assemble(model: &Mlp, state: &PruneState, trace: &Trace, indices: Vec<usize>) -> Self {
        let w0: Vec<f64> = indices.iter().map(|&i| model.original(i)).collect();
        let dw: Vec<f64> = indices
            .iter()
            .zip(&w0)
            .map(|(&i, w)| model.weight(i) - w)
            .collect();
        let k = indices.iter().filter(|&&i| state.is_pruned(i)).count();
        let grad = trace.grad_mean(&indices);
        let hess = estimate_hessian(&trace.per_sample(&indices));
        Self {
            indices,
            w0,
            dw,
            grad,
            hess,
            k,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// A block chosen for optimization: `k` pruned members first, then the kept
/// ones.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub k: usize,
}

impl Selection {
    /// The block's current assignment.
    pub fn incumbent(&self) -> Vec<bool> {
        (0..self.indices.len()).map(|j| j < self.k).collect()
    }
}

/// Picks the `k = ⌈n/2⌉` highest-scoring pruned and `n − k` lowest-scoring
/// kept candidates of `layer`, excluding fixed and tabu weights.
///
/// When either side runs short the block shrinks to
/// `n' = 2·min(available_pruned, available_kept)` with `k' = n'/2`; `None`
/// means fewer than two usable candidates and the step is skipped.
pub fn select_block(state: &PruneState, scores: &ScoreVector, layer: usize, n: usize) -> Option<Selection> {
    let pruned = state.candidates(layer, true);
    let kept = state.candidates(layer, false);
    let mut k = n.div_ceil(2);
    let mut n = n;
    if pruned.len() < k || kept.len() < n - k {
        n = 2 * pruned.len().min(kept.len());
        k = n / 2;
    }
    if n < 2 {
        return None;
    }
    let mut indices = highest_k(scores, k, &pruned);
    indices.extend(lowest_k(scores, n - k, &kept));
    Some(Selection { indices, k })
}

/// Coefficients before scaling and thresholding. `quad` is dense with only
/// the strict upper triangle meaningful.
#[derive(Clone, Debug)]
pub struct RawCoefficients {
    pub linear: Vec<f64>,
    pub quad: Matrix,
}

pub fn raw_coefficients(block: &Block, alpha: f64, lambda: f64) -> RawCoefficients {
    let n = block.len();
    let (w0, dw, h) = (&block.w0, &block.dw, &block.hess);
    let mut linear = vec![0.0; n];
    let mut quad = Matrix::zeros(n, n);
    for i in 0..n {
        let row = h.row(i);
        let coupling: f64 = row.iter().zip(dw).map(|(hij, d)| hij * d).sum();
        linear[i] = -alpha * w0[i] * block.grad[i]
            + w0[i] * coupling
            + lambda * (2.0 * dw[i] * w0[i] + w0[i] * w0[i])
            + 0.5 * w0[i] * row[i] * w0[i];
        for j in i + 1..n {
            quad[(i, j)] = w0[i] * row[j] * w0[j];
        }
    }
    RawCoefficients { linear, quad }
}

/// Cardinality-constrained binary quadratic problem
/// `min Σ linearᵢxᵢ + Σ quadᵢⱼxᵢxⱼ  s.t.  Σx = k`.
#[derive(Clone, Debug, PartialEq)]
pub struct QcboProblem {
    pub n: usize,
    pub k: usize,
    pub linear: Vec<f64>,
    /// Nonzero couplings `(i, j, value)` with `i < j`, sorted.
    pub quad: Vec<(usize, usize, f64)>,
    /// Factor the raw coefficients were multiplied by.
    pub scale: f64,
}

impl QcboProblem {
    /// Scales so that the mean magnitude of the nonzero coefficients is one,
    /// then drops anything at or below [`COEFF_THRESHOLD`].
    pub fn from_raw(raw: &RawCoefficients, k: usize) -> Self {
        let n = raw.linear.len();
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut visit = |c: f64| {
            if c != 0.0 {
                sum += c.abs();
                count += 1;
            }
        };
        raw.linear.iter().for_each(|&c| visit(c));
        for i in 0..n {
            for j in i + 1..n {
                visit(raw.quad[(i, j)]);
            }
        }
        let scale = if count > 0 && sum > 0.0 { count as f64 / sum } else { 1.0 };
        let keep = |c: f64| {
            let v = c * scale;
            if v.abs() <= COEFF_THRESHOLD {
                0.0
            } else {
                v
            }
        };
        let linear = raw.linear.iter().map(|&c| keep(c)).collect();
        let mut quad = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let v = keep(raw.quad[(i, j)]);
                if v != 0.0 {
                    quad.push((i, j, v));
                }
            }
        }
        Self {
            n,
            k,
            linear,
            quad,
            scale,
        }
    }

    /// True when every coefficient was dropped; any feasible point is optimal.
    pub fn is_degenerate(&self) -> bool {
        self.quad.is_empty() && self.linear.iter().all(|&c| c == 0.0)
    }

    pub fn objective(&self, x: &[bool]) -> f64 {
        assert_eq!(x.len(), self.n, "assignment length mismatch");
        let mut e = 0.0;
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

    pub fn max_abs_coefficient(&self) -> f64 {
        self.linear
            .iter()
            .copied()
            .chain(self.quad.iter().map(|q| q.2))
            .fold(0.0, |m, c| m.max(c.abs()))
    }

    /// Symmetric dense coupling matrix with a zero diagonal.
    pub fn dense_quad(&self) -> Vec<f64> {
        let mut q = vec![0.0; self.n * self.n];
        for &(i, j, v) in &self.quad {
            q[i * self.n + j] = v;
            q[j * self.n + i] = v;
        }
        q
    }

    /// Text dump: `n`, `k` and `scale` header lines, then one `i j value`
    /// line per nonzero coefficient, with `i == j` for linear terms.
    pub fn to_dump(&self) -> String {
        let mut s = String::new();
        writeln!(s, "n {}", self.n).unwrap();
        writeln!(s, "k {}", self.k).unwrap();
        writeln!(s, "scale {:e}", self.scale).unwrap();
        for (i, c) in self.linear.iter().enumerate() {
            if *c != 0.0 {
                writeln!(s, "{i} {i} {c:e}").unwrap();
            }
        }
        for &(i, j, v) in &self.quad {
            writeln!(s, "{i} {j} {v:e}").unwrap();
        }
        s
    }

    pub fn from_dump(text: &str) -> Result<Self> {
        let mut n = None;
        let mut k = None;
        let mut scale = 1.0;
        let mut terms = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let err = |detail: String| Error::Dump {
                line: lineno + 1,
                detail,
            };
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["n", v] => n = Some(v.parse::<usize>().map_err(|e| err(e.to_string()))?),
                ["k", v] => k = Some(v.parse::<usize>().map_err(|e| err(e.to_string()))?),
                ["scale", v] => scale = v.parse::<f64>().map_err(|e| err(e.to_string()))?,
                [i, j, v] => {
                    let i: usize = i.parse().map_err(|e: std::num::ParseIntError| err(e.to_string()))?;
                    let j: usize = j.parse().map_err(|e: std::num::ParseIntError| err(e.to_string()))?;
                    let v: f64 = v.parse().map_err(|e: std::num::ParseFloatError| err(e.to_string()))?;
                    terms.push((lineno + 1, i, j, v));
                }
                _ => return Err(err(format!("unrecognized line `{line}`"))),
            }
        }
        let n = n.ok_or(Error::Dump {
            line: 0,
            detail: "missing `n` header".into(),
        })?;
        let k = k.ok_or(Error::Dump {
            line: 0,
            detail: "missing `k` header".into(),
        })?;
        let mut linear = vec![0.0; n];
        let mut quad = Vec::new();
        for (line, i, j, v) in terms {
            if i >= n || j >= n {
                return Err(Error::Dump {
                    line,
                    detail: format!("index out of range for n={n}"),
                });
            }
            if i == j {
                linear[i] += v;
            } else {
                quad.push((i.min(j), i.max(j), v));
            }
        }
        quad.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        quad.dedup_by(|b, a| {
            if (a.0, a.1) == (b.0, b.1) {
                a.2 += b.2;
                true
            } else {
                false
            }
        });
        Ok(Self {
            n,
            k,
            linear,
            quad,
            scale,
        })
    }
}

/// Scaled and thresholded block problem.
pub fn build_qcbo(block: &Block, alpha: f64, lambda: f64) -> QcboProblem {
    QcboProblem::from_raw(&raw_coefficients(block, alpha, lambda), block.k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Dense;
    use crate::scoring::{Method, Scope};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn random_block(rng: &mut ChaCha8Rng, n: usize, k: usize, pruned_offsets: bool) -> Block {
        let a = random_matrix(rng, 3 * n, n);
        let w0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dw = (0..n)
            .map(|i| if pruned_offsets && i < k { -w0[i] } else { 0.0 })
            .collect();
        Block {
            indices: (0..n).collect(),
            grad: (0..n).map(|_| rng.random_range(-0.5..0.5)).collect(),
            hess: estimate_hessian(&a),
            w0,
            dw,
            k,
        }
    }

    /// The block objective summed term by term, constant dropped.
    fn direct_objective(b: &Block, alpha: f64, lambda: f64, x: &[bool]) -> f64 {
        let n = b.len();
        let xf: Vec<f64> = x.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        let mut e = 0.0;
        for i in 0..n {
            e += -alpha * b.w0[i] * b.grad[i] * xf[i];
            for j in 0..n {
                e += b.w0[i] * b.hess[(i, j)] * b.dw[j] * xf[i];
                e += 0.5 * b.w0[i] * b.hess[(i, j)] * b.w0[j] * xf[i] * xf[j];
            }
            e += lambda * (2.0 * b.dw[i] * b.w0[i] + b.w0[i] * b.w0[i]) * xf[i];
        }
        e
    }

    #[test]
    fn hessian_of_identity_is_half_identity() {
        let h = estimate_hessian(&Matrix::identity(2));
        assert_eq!(h, Matrix::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.5]]));
    }

    #[test]
    fn zero_column_gives_zero_row_and_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = random_matrix(&mut rng, 6, 4);
        for s in 0..6 {
            a[(s, 2)] = 0.0;
        }
        let h = estimate_hessian(&a);
        for i in 0..4 {
            assert_eq!(h[(2, i)], 0.0);
            assert_eq!(h[(i, 2)], 0.0);
        }
    }

    #[test]
    fn hessian_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_matrix(&mut rng, 5, 3);
        let h = estimate_hessian(&a);
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for r in 0..5 {
                    s += a[(r, i)] * a[(r, j)];
                }
                assert!((h[(i, j)] - s / 5.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_offsets_recover_the_one_shot_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random_block(&mut rng, 5, 2, false);
        let (alpha, lambda) = (0.75, 0.001);
        let raw = raw_coefficients(&b, alpha, lambda);
        for i in 0..5 {
            let want = -alpha * b.w0[i] * b.grad[i]
                + lambda * b.w0[i] * b.w0[i]
                + 0.5 * b.w0[i] * b.hess[(i, i)] * b.w0[i];
            assert!((raw.linear[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn stored_objective_matches_direct_sum_on_all_assignments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = random_block(&mut rng, 3, 1, true);
        let p = build_qcbo(&b, 0.75, 0.001);
        for bits in 0u32..8 {
            let x: Vec<bool> = (0..3).map(|i| bits >> i & 1 == 1).collect();
            let got = p.objective(&x) / p.scale;
            let want = direct_objective(&b, 0.75, 0.001, &x);
            assert!((got - want).abs() < 1e-9, "{bits}: {got} vs {want}");
        }
    }

    #[test]
    fn all_zero_assignment_has_zero_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = random_block(&mut rng, 4, 2, true);
        let p = build_qcbo(&b, 0.75, 0.001);
        assert_eq!(p.objective(&[false; 4]), 0.0);
        let mut x = [false; 4];
        x[2] = true;
        assert_eq!(p.objective(&x), p.linear[2]);
    }

    #[test]
    fn scaling_gives_unit_mean_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = random_block(&mut rng, 6, 3, true);
        let p = build_qcbo(&b, 0.75, 0.001);
        let mags: Vec<f64> = p
            .linear
            .iter()
            .copied()
            .chain(p.quad.iter().map(|q| q.2))
            .filter(|c| *c != 0.0)
            .map(f64::abs)
            .collect();
        let mean = mags.iter().sum::<f64>() / mags.len() as f64;
        assert!((mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tiny_coefficients_are_dropped() {
        let raw = RawCoefficients {
            linear: vec![1.0, 1e-14, -1.0],
            quad: Matrix::from_rows(&[vec![0.0, 1e-15, 1.0], vec![0.0, 0.0, 0.0], vec![0.0; 3]]),
        };
        let p = QcboProblem::from_raw(&raw, 1);
        assert_eq!(p.linear[1], 0.0);
        assert_eq!(p.quad.len(), 1);
        assert!(!p.is_degenerate());
        let empty = RawCoefficients {
            linear: vec![0.0; 3],
            quad: Matrix::zeros(3, 3),
        };
        assert!(QcboProblem::from_raw(&empty, 1).is_degenerate());
    }

    #[test]
    fn dump_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = random_block(&mut rng, 5, 2, true);
        let p = build_qcbo(&b, 0.75, 0.001);
        let q = QcboProblem::from_dump(&p.to_dump()).unwrap();
        assert_eq!(p, q);
        assert!(QcboProblem::from_dump("n 2\nk 1\n0 5 1.0\n").is_err());
        assert!(QcboProblem::from_dump("k 1\n").is_err());
    }

    fn layer_state(scores: Vec<f64>, weights: Vec<f64>, density: f64) -> (Mlp, PruneState, ScoreVector) {
        let n = weights.len();
        let mut m = Mlp::from_layers(vec![Dense::new(Matrix::from_vec(1, n, weights), vec![0.0], false)]);
        let sv = ScoreVector {
            values: scores,
            offset: 0,
            method: Method::Gradient,
            scope: Scope::PerLayer,
            normalized: true,
        };
        let s = PruneState::init(&mut m, &sv, density).unwrap();
        (m, s, sv)
    }

    #[test]
    fn selection_takes_highest_pruned_and_lowest_kept() {
        // init prunes {a=0, b=1} via magnitude-like scores, keeps {c=2, d=3}
        let (_, s, _) = layer_state(vec![0.1, 0.2, 0.8, 0.9], vec![1.0; 4], 0.5);
        let sel = ScoreVector {
            values: vec![0.9, 0.1, 0.2, 0.8],
            offset: 0,
            method: Method::Gradient,
            scope: Scope::PerLayer,
            normalized: true,
        };
        let b = select_block(&s, &sel, 0, 2).unwrap();
        assert_eq!(b.indices, vec![0, 2]);
        assert_eq!(b.k, 1);
        assert_eq!(b.incumbent(), vec![true, false]);
    }

    #[test]
    fn block_size_1024_means_k_512() {
        let n = 4096;
        let (_, s, sv) = layer_state((0..n).map(|i| i as f64).collect(), vec![1.0; n], 0.5);
        let b = select_block(&s, &sv, 0, 1024).unwrap();
        assert_eq!((b.indices.len(), b.k), (1024, 512));
    }

    #[test]
    fn exhausted_side_shrinks_the_block() {
        let (_, mut s, sv) = layer_state((0..10).map(|i| i as f64).collect(), vec![1.0; 10], 0.7);
        // 3 pruned (0,1,2), 7 kept
        let b = select_block(&s, &sv, 0, 8).unwrap();
        assert_eq!((b.indices.len(), b.k), (6, 3));
        s.set_tabu_frac(0.5);
        s.tabu_push(0, &[0, 1, 2]);
        assert!(select_block(&s, &sv, 0, 8).is_none());
    }

    proptest! {
        #[test]
        fn hessian_is_symmetric_psd(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, 7, 5);
            let h = estimate_hessian(&a);
            for i in 0..5 {
                for j in 0..5 {
                    prop_assert!((h[(i, j)] - h[(j, i)]).abs() <= 1e-12);
                }
            }
            for _ in 0..10 {
                let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mut q = 0.0;
                for i in 0..5 {
                    for j in 0..5 {
                        q += x[i] * h[(i, j)] * x[j];
                    }
                }
                prop_assert!(q >= -1e-10);
            }
        }
    }
}
