//! Which weights are pruned, fixed, or tabu.
//!
//! Invariants kept by every mutating method:
//! - `pruned_count == popcount(mask) == target_pruned`
//! - fixed-prune weights are pruned and fixed-keep weights are kept
//! - a mask bit is set exactly when the model weight is zero by pruning;
//!   a clear bit means the weight holds its original value
//! - no tabu queue exceeds its capacity

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::scoring::{highest_k, lowest_k, ScoreVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fixed {
    Free,
    Prune,
    Keep,
}

const EPS: f64 = 1e-9;

/// `⌈frac · count⌉`, tolerant of products like `0.3 · 10 = 3.0000000000000004`.
pub fn ceil_frac(frac: f64, count: usize) -> usize {
    let x = frac * count as f64;
    let r = x.round();
    if (x - r).abs() <= EPS * r.max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// `⌊frac · count⌋` with the same tolerance as [`ceil_frac`].
pub fn floor_frac(frac: f64, count: usize) -> usize {
    let x = frac * count as f64;
    let r = x.round();
    if (x - r).abs() <= EPS * r.max(1.0) {
        r as usize
    } else {
        x.floor() as usize
    }
}

/// Number of weights to prune for density `d`: `⌈(1 − d)·N⌉`.
pub fn target_pruned(num_weights: usize, density: f64) -> usize {
    ceil_frac(1.0 - density, num_weights)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TabuList {
    queue: VecDeque<usize>,
    capacity: usize,
}

impl TabuList {
    pub fn new(capacity: usize) -> Self {
        Self {
            queue: VecDeque::new(),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &usize> {
        self.queue.iter()
    }
}

#[derive(Clone, Debug)]
pub struct PruneState {
    mask: Vec<bool>,
    fixed: Vec<Fixed>,
    tabu: Vec<TabuList>,
    tabu_hits: Vec<u32>,
    layer_ranges: Vec<std::ops::Range<usize>>,
    pruned_count: usize,
    target_pruned: usize,
}

impl PruneState {
    /// Prunes the `⌈(1 − d)·N⌉` lowest-scoring weights and zeroes them in
    /// `model`. Tabu capacities start at zero; see [`Self::set_tabu_frac`].
    pub fn init(model: &mut Mlp, scores: &ScoreVector, density: f64) -> Result<Self> {
        if !(density > 0.0 && density < 1.0) {
            return Err(Error::config("density", format!("{density} is outside (0, 1)")));
        }
        let n = model.num_weights();
        assert!(scores.offset == 0 && scores.values.len() == n, "scores must cover every weight");
        let target = target_pruned(n, density);
        let all: Vec<usize> = (0..n).collect();
        let mut mask = vec![false; n];
        for i in lowest_k(scores, target, &all) {
            mask[i] = true;
            model.set_weight(i, 0.0);
        }
        let layer_ranges: Vec<_> = (0..model.num_tensors()).map(|t| model.tensor_range(t)).collect();
        Ok(Self {
            mask,
            fixed: vec![Fixed::Free; n],
            tabu: layer_ranges.iter().map(|_| TabuList::new(0)).collect(),
            tabu_hits: vec![0; n],
            layer_ranges,
            pruned_count: target,
            target_pruned: target,
        })
    }

    /// Rebuilds a state from a stored mask, e.g. after loading a checkpoint.
    pub fn from_mask(model: &Mlp, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), model.num_weights());
        let pruned = mask.iter().filter(|&&b| b).count();
        let layer_ranges: Vec<_> = (0..model.num_tensors()).map(|t| model.tensor_range(t)).collect();
        Self {
            fixed: vec![Fixed::Free; mask.len()],
            tabu: layer_ranges.iter().map(|_| TabuList::new(0)).collect(),
            tabu_hits: vec![0; mask.len()],
            layer_ranges,
            pruned_count: pruned,
            target_pruned: pruned,
            mask,
        }
    }

    /// Sets each layer's tabu capacity to `⌊frac · layer_size⌋`, trimming
    /// existing queues from the oldest end.
    pub fn set_tabu_frac(&mut self, frac: f64) {
        for layer in 0..self.tabu.len() {
            let cap = floor_frac(frac, self.layer_ranges[layer].len());
            self.tabu[layer].capacity = cap;
            self.evict(layer);
        }
    }

    /// Fixes the lowest-scoring `⌊frac_prune · pruned⌋` of the pruned set to
    /// stay pruned and the highest-scoring `⌊frac_keep · kept⌋` of the kept
    /// set to stay kept.
    pub fn fix_weights(&mut self, scores: &ScoreVector, frac_prune: f64, frac_keep: f64) {
        let (pruned, kept): (Vec<usize>, Vec<usize>) =
            (0..self.mask.len()).filter(|&i| self.fixed[i] == Fixed::Free).partition(|&i| self.mask[i]);
        for i in lowest_k(scores, floor_frac(frac_prune, pruned.len()), &pruned) {
            self.fixed[i] = Fixed::Prune;
        }
        for i in highest_k(scores, floor_frac(frac_keep, kept.len()), &kept) {
            self.fixed[i] = Fixed::Keep;
        }
    }

    pub fn num_weights(&self) -> usize {
        self.mask.len()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_ranges.len()
    }

    pub fn layer_range(&self, layer: usize) -> std::ops::Range<usize> {
        self.layer_ranges[layer].clone()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    #[inline]
    pub fn is_pruned(&self, index: usize) -> bool {
        self.mask[index]
    }

    #[inline]
    pub fn fixed(&self, index: usize) -> Fixed {
        self.fixed[index]
    }

    pub fn fixed_prune(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.fixed.len()).filter(|&i| self.fixed[i] == Fixed::Prune)
    }

    pub fn fixed_keep(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.fixed.len()).filter(|&i| self.fixed[i] == Fixed::Keep)
    }

    pub fn pruned_count(&self) -> usize {
        self.pruned_count
    }

    pub fn target_pruned(&self) -> usize {
        self.target_pruned
    }

    pub fn density(&self) -> f64 {
        1.0 - self.pruned_count as f64 / self.mask.len() as f64
    }

    pub fn tabu(&self, layer: usize) -> &TabuList {
        &self.tabu[layer]
    }

    #[inline]
    pub fn is_tabu(&self, index: usize) -> bool {
        self.tabu_hits[index] > 0
    }

    fn evict(&mut self, layer: usize) {
        let list = &mut self.tabu[layer];
        while list.queue.len() > list.capacity {
            let old = list.queue.pop_front().unwrap();
            self.tabu_hits[old] -= 1;
        }
    }

    /// Appends to the layer's FIFO, evicting the oldest entries over capacity.
    pub fn tabu_push(&mut self, layer: usize, indices: &[usize]) {
        for &i in indices {
            debug_assert!(self.layer_ranges[layer].contains(&i));
            self.tabu[layer].queue.push_back(i);
            self.tabu_hits[i] += 1;
        }
        self.evict(layer);
    }

    pub fn tabu_filter(&self, candidates: &[usize]) -> Vec<usize> {
        candidates.iter().copied().filter(|&i| !self.is_tabu(i)).collect()
    }

    /// Free, non-tabu members of `layer` that are currently pruned (or kept).
    pub fn candidates(&self, layer: usize, pruned: bool) -> Vec<usize> {
        self.layer_ranges[layer]
            .clone()
            .filter(|&i| self.mask[i] == pruned && self.fixed[i] == Fixed::Free && !self.is_tabu(i))
            .collect()
    }

    /// Prunes `block[j]` where `x[j]` is set and restores it otherwise. The
    /// solution must prune exactly as many block members as are pruned now;
    /// on any violation the state and model are left untouched.
    pub fn apply_solution(&mut self, model: &mut Mlp, block: &[usize], x: &[bool]) -> Result<()> {
        if block.len() != x.len() {
            return Err(Error::SolutionLength {
                expected: block.len(),
                got: x.len(),
            });
        }
        if let Some(&i) = block.iter().find(|&&i| self.fixed[i] != Fixed::Free) {
            return Err(Error::FixedIndex(i));
        }
        let expected = block.iter().filter(|&&i| self.mask[i]).count();
        let got = x.iter().filter(|&&b| b).count();
        if expected != got {
            return Err(Error::Cardinality { expected, got });
        }
        for (&i, &prune) in block.iter().zip(x) {
            if prune == self.mask[i] {
                continue;
            }
            self.mask[i] = prune;
            model.set_weight(i, if prune { 0.0 } else { model.original(i) });
        }
        Ok(())
    }

    /// Full consistency check against the model.
    pub fn audit(&self, model: &Mlp) -> Result<(), String> {
        let pop = self.mask.iter().filter(|&&b| b).count();
        if pop != self.pruned_count || pop != self.target_pruned {
            return Err(format!(
                "popcount {pop}, ledger {}, target {}",
                self.pruned_count, self.target_pruned
            ));
        }
        for i in 0..self.mask.len() {
            match (self.fixed[i], self.mask[i]) {
                (Fixed::Prune, false) => return Err(format!("fixed-prune weight {i} is kept")),
                (Fixed::Keep, true) => return Err(format!("fixed-keep weight {i} is pruned")),
                _ => {}
            }
        }
        let wc = model.current_flat();
        let w0 = model.original_flat();
        for i in 0..self.mask.len() {
            let want = if self.mask[i] { 0.0 } else { w0[i] };
            if wc[i].to_bits() != want.to_bits() && !(wc[i] == 0.0 && want == 0.0) {
                return Err(format!("weight {i} is {} but mask expects {want}", wc[i]));
            }
        }
        for (l, t) in self.tabu.iter().enumerate() {
            if t.len() > t.capacity {
                return Err(format!("tabu list {l} holds {} > capacity {}", t.len(), t.capacity));
            }
        }
        Ok(())
    }
}
