//! Choosing which heads or blocks to replace.
//!
//! The variance criterion streams every head's energy matrix through a
//! one-pass Welford accumulator and scores a head by the summed pointwise
//! standard deviation: a head whose energies do not move with the input is a
//! fixed linear operator on its values and a natural replacement candidate.
//! Gating is the learned alternative, relaxing a top-`p` mask over per-block
//! logits with Gumbel noise.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dropin::{block_attention, BlockOp};
use crate::error::{config_err, shape_err, Error, Result};
use crate::tensor::{derive_seed, open_unit, shifted, ShiftSet, Tensor};
use crate::vit::{block_forward_with, mhsa_forward, model_forward_observed, BlockParams, Model, ModelConfig};

/// Entrywise running mean and sum of squared deviations, kept in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct WelfordState {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl WelfordState {
    pub fn new(len: usize) -> Self {
        WelfordState {
            count: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn m2(&self) -> &[f64] {
        &self.m2
    }

    pub fn update(&mut self, sample: &Tensor) -> Result<()> {
        if sample.len() != self.mean.len() {
            return Err(shape_err!("welford sample has {} entries, state has {}", sample.len(), self.mean.len()));
        }
        self.count += 1;
        let inv = 1.0 / self.count as f64;
        for ((mean, m2), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(sample.data()) {
            let x = x as f64;
            let delta = x - *mean;
            *mean += delta * inv;
            *m2 += delta * (x - *mean);
        }
        Ok(())
    }

    /// Same recurrence on an `f64` sample.
    pub fn update_f64(&mut self, sample: &[f64]) -> Result<()> {
        if sample.len() != self.mean.len() {
            return Err(shape_err!("welford sample has {} entries, state has {}", sample.len(), self.mean.len()));
        }
        self.count += 1;
        let inv = 1.0 / self.count as f64;
        for ((mean, m2), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(sample) {
            let delta = x - *mean;
            *mean += delta * inv;
            *m2 += delta * (x - *mean);
        }
        Ok(())
    }

    /// Population standard deviation, `sqrt(M2 / N)`, entrywise.
    pub fn finalize(&self) -> Result<Vec<f64>> {
        match self.count {
            0 => Err(Error::Empty("welford state has no samples")),
            1 => Ok(vec![0.0; self.m2.len()]),
            n => Ok(self.m2.iter().map(|&m| (m.max(0.0) / n as f64).sqrt()).collect()),
        }
    }
}

/// Head score `Sigma_h`: the sum of all entries of the pointwise std.
pub fn sigma_head(sigma: &[f64]) -> f64 {
    sigma.iter().sum()
}

/// Block score `Sigma_b`: the mean of its head scores.
pub fn sigma_block(head_scores: &[f64]) -> Result<f64> {
    if head_scores.is_empty() {
        return Err(Error::Empty("block has no head scores"));
    }
    Ok(head_scores.iter().sum::<f64>() / head_scores.len() as f64)
}

/// Variance-criterion scores of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    /// `per_head[b][h]`.
    pub per_head: Vec<Vec<f64>>,
    pub per_block: Vec<f64>,
    pub samples: usize,
}

impl Scores {
    /// Head scores flattened block-major, the indexing scattered plans use.
    pub fn flat_heads(&self) -> Vec<f64> {
        self.per_head.iter().flatten().copied().collect()
    }
}

/// Runs the model once per sample and streams each head's energies through
/// its own accumulator. Only `2 n^2` doubles per head are kept.
pub fn score_model(model: &Model, samples: &[Tensor]) -> Result<Scores> {
    if samples.is_empty() {
        return Err(Error::Empty("scoring needs at least one sample"));
    }
    let cfg = &model.config;
    let n = cfg.tokens();
    let mut states = vec![vec![WelfordState::new(n * n); cfg.n_heads]; cfg.n_blocks];
    for x in samples {
        let mut failure = None;
        model_forward_observed(x, model, &mut |b, h, e| {
            if let Err(err) = states[b][h].update(e) {
                failure.get_or_insert(err);
            }
        })?;
        if let Some(err) = failure {
            return Err(err);
        }
    }
    let per_head = states
        .iter()
        .map(|block| block.iter().map(|s| Ok(sigma_head(&s.finalize()?))).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let per_block = per_head.iter().map(|h| sigma_block(h)).collect::<Result<Vec<_>>>()?;
    Ok(Scores {
        per_head,
        per_block,
        samples: samples.len(),
    })
}

/// Outcome of checking locality (L), translation invariance (TI) and input
/// invariance (II) on sampled energy matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub locality: bool,
    pub translation_invariance: bool,
    pub input_invariance: bool,
}

/// Checks the three conv-like properties on `n x n` energies of one head
/// over an `m x m` grid. TI compares only positions whose shifted target is
/// on the grid.
pub fn check_properties(samples: &[Tensor], grid: usize, shifts: &ShiftSet, tol: f32) -> Result<PropertyReport> {
    let first = samples.first().ok_or(Error::Empty("no energy samples"))?;
    let n = grid * grid;
    for e in samples {
        if e.shape() != [n, n] {
            return Err(shape_err!("energy {:?} does not match a {grid}x{grid} grid", e.shape()));
        }
    }
    let half = shifts.half();
    let locality = samples.iter().all(|e| {
        (0..n).all(|q| {
            let (i, j) = ((q / grid) as isize, (q % grid) as isize);
            (0..n).all(|key| {
                let (u, v) = ((key / grid) as isize, (key % grid) as isize);
                let local = (u - i).abs() <= half && (v - j).abs() <= half;
                local || e.data()[q * n + key].abs() <= tol
            })
        })
    });
    let translation_invariance = samples.iter().all(|e| {
        shifts.offsets().iter().all(|&(dy, dx)| {
            let mut lo = f32::INFINITY;
            let mut hi = f32::NEG_INFINITY;
            for i in 0..grid {
                for j in 0..grid {
                    if let Some((u, v)) = shifted(i, j, dy, dx, grid, grid) {
                        let val = e.data()[(i * grid + j) * n + u * grid + v];
                        lo = lo.min(val);
                        hi = hi.max(val);
                    }
                }
            }
            hi - lo <= tol || lo > hi
        })
    });
    let input_invariance = (0..n * n).all(|idx| {
        let reference = first.data()[idx];
        let (lo, hi) = samples.iter().fold((reference, reference), |(lo, hi), e| {
            let v = e.data()[idx];
            (lo.min(v), hi.max(v))
        });
        hi - lo <= tol
    });
    Ok(PropertyReport {
        locality,
        translation_invariance,
        input_invariance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    Blockwise,
    Scattered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionOrder {
    /// Smallest scores first: the most input-invariant candidates.
    Lowest,
    /// Largest scores first, for the worst-candidate ablation.
    Highest,
}

impl std::str::FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blockwise" => Ok(SelectionMode::Blockwise),
            "scattered" => Ok(SelectionMode::Scattered),
            _ => Err(config_err!("unknown selection mode '{s}' (expected blockwise or scattered)")),
        }
    }
}

impl std::str::FromStr for SelectionOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lowest" => Ok(SelectionOrder::Lowest),
            "highest" => Ok(SelectionOrder::Highest),
            _ => Err(config_err!("unknown selection order '{s}' (expected lowest or highest)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadRef {
    pub block: usize,
    pub head: usize,
}

impl HeadRef {
    pub fn new(block: usize, head: usize) -> Self {
        HeadRef { block, head }
    }
}

/// Which heads to replace. A blockwise plan lists its blocks and every head
/// of them; a scattered plan lists heads only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionPlan {
    pub mode: SelectionMode,
    pub order: SelectionOrder,
    pub budget: usize,
    pub blocks: Vec<usize>,
    pub heads: Vec<HeadRef>,
}

/// Indices sorted by score (ascending for `Lowest`, descending for
/// `Highest`), ties to the lower index.
pub fn rank(scores: &[f64], order: SelectionOrder) -> Result<Vec<usize>> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(config_err!("scores must be finite"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        let by_score = match order {
            SelectionOrder::Lowest => scores[a].total_cmp(&scores[b]),
            SelectionOrder::Highest => scores[b].total_cmp(&scores[a]),
        };
        by_score.then(a.cmp(&b))
    });
    Ok(idx)
}

/// Picks `budget` targets: blocks (scores per block) for `Blockwise`, heads
/// (scores flattened block-major) for `Scattered`.
pub fn select(scores: &[f64], budget: usize, mode: SelectionMode, order: SelectionOrder, n_heads: usize) -> Result<SelectionPlan> {
    if budget > scores.len() {
        return Err(config_err!("budget {budget} exceeds the {} candidates", scores.len()));
    }
    if n_heads == 0 {
        return Err(config_err!("n_heads must be positive"));
    }
    let picked: Vec<usize> = rank(scores, order)?.into_iter().take(budget).collect();
    Ok(match mode {
        SelectionMode::Blockwise => SelectionPlan::from_blocks(&picked, order, n_heads),
        SelectionMode::Scattered => {
            let heads = picked.iter().map(|&i| HeadRef::new(i / n_heads, i % n_heads)).collect();
            SelectionPlan::from_heads(heads, order)
        }
    })
}

impl SelectionPlan {
    pub fn empty(mode: SelectionMode, order: SelectionOrder) -> Self {
        SelectionPlan {
            mode,
            order,
            budget: 0,
            blocks: Vec::new(),
            heads: Vec::new(),
        }
    }

    pub fn from_blocks(blocks: &[usize], order: SelectionOrder, n_heads: usize) -> Self {
        let heads = blocks
            .iter()
            .flat_map(|&b| (0..n_heads).map(move |h| HeadRef::new(b, h)))
            .collect();
        SelectionPlan {
            mode: SelectionMode::Blockwise,
            order,
            budget: blocks.len(),
            blocks: blocks.to_vec(),
            heads,
        }
    }

    pub fn from_heads(heads: Vec<HeadRef>, order: SelectionOrder) -> Self {
        SelectionPlan {
            mode: SelectionMode::Scattered,
            order,
            budget: heads.len(),
            blocks: Vec::new(),
            heads,
        }
    }

    pub fn blockwise(block_scores: &[f64], budget: usize, order: SelectionOrder, cfg: &ModelConfig) -> Result<Self> {
        if block_scores.len() != cfg.n_blocks {
            return Err(shape_err!("{} block scores for {} blocks", block_scores.len(), cfg.n_blocks));
        }
        select(block_scores, budget, SelectionMode::Blockwise, order, cfg.n_heads)
    }

    pub fn scattered(head_scores: &[f64], budget: usize, order: SelectionOrder, cfg: &ModelConfig) -> Result<Self> {
        if head_scores.len() != cfg.total_heads() {
            return Err(shape_err!("{} head scores for {} heads", head_scores.len(), cfg.total_heads()));
        }
        select(head_scores, budget, SelectionMode::Scattered, order, cfg.n_heads)
    }

    /// Covered heads in ascending order.
    pub fn covered(&self) -> Vec<HeadRef> {
        let mut heads = self.heads.clone();
        heads.sort();
        heads
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for h in &self.heads {
            if h.block >= cfg.n_blocks || h.head >= cfg.n_heads {
                return Err(config_err!("plan head ({}, {}) outside the model", h.block, h.head));
            }
            if !seen.insert(*h) {
                return Err(config_err!("plan lists head ({}, {}) twice", h.block, h.head));
            }
        }
        match self.mode {
            SelectionMode::Scattered => {
                if !self.blocks.is_empty() || self.heads.len() != self.budget {
                    return Err(config_err!("scattered plan must list exactly `budget` heads and no blocks"));
                }
            }
            SelectionMode::Blockwise => {
                if self.blocks.len() != self.budget {
                    return Err(config_err!("blockwise plan lists {} blocks for budget {}", self.blocks.len(), self.budget));
                }
                if *self != SelectionPlan::from_blocks(&self.blocks, self.order, cfg.n_heads) {
                    return Err(config_err!("blockwise plan must cover every head of its blocks"));
                }
                let mut blocks = self.blocks.clone();
                blocks.sort_unstable();
                blocks.dedup();
                if blocks.len() != self.blocks.len() || blocks.last().is_some_and(|&b| b >= cfg.n_blocks) {
                    return Err(config_err!("blockwise plan has duplicate or out-of-range blocks"));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Gating
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub logits: Vec<f64>,
    pub budget: usize,
    pub tau0: f64,
    pub tau_end: f64,
    pub steps: usize,
    pub seed: u64,
}

impl GateParams {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 || self.budget > self.logits.len() {
            return Err(config_err!("gate budget must be in 1..={}", self.logits.len()));
        }
        if !(self.tau0 > 0.0 && self.tau_end > 0.0) {
            return Err(config_err!("temperatures must be positive"));
        }
        if self.logits.iter().any(|w| !w.is_finite()) {
            return Err(config_err!("gate logits must be finite"));
        }
        Ok(())
    }
}

/// One-hot mask of the `p` largest entries, ties to the lower index.
pub fn hard_topk_gate(w: &[f64], p: usize) -> Result<Vec<f64>> {
    if p > w.len() {
        return Err(config_err!("cannot keep {p} of {} entries", w.len()));
    }
    let mut mask = vec![0.0; w.len()];
    for i in rank(w, SelectionOrder::Highest)?.into_iter().take(p) {
        mask[i] = 1.0;
    }
    Ok(mask)
}

/// Standard Gumbel draws `-log(-log u)`, seeded.
pub fn gumbel_noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| -libm::log(-libm::log(open_unit(&mut rng)))).collect()
}

/// `w + g` with seeded Gumbel noise.
pub fn perturb(w: &[f64], seed: u64) -> Vec<f64> {
    w.iter().zip(gumbel_noise(w.len(), seed)).map(|(a, g)| a + g).collect()
}

/// Relaxed top-`p` selection of already-perturbed logits.
///
/// Runs `p` rounds of softmax without replacement. Each round hands out one
/// unit of mass in proportion to `remaining_i * exp(z_i / tau)`, where
/// `remaining_i = 1 - w~_i` plays the role of the suppression factor. An item
/// that would receive more than it has left is filled to exactly 1 and the
/// rest of the round is redistributed, so every weight stays in `[0, 1]` and
/// the total is exactly `p`. The first round is a plain softmax.
pub fn relax_perturbed(z: &[f64], p: usize, tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(config_err!("temperature must be positive, got {tau}"));
    }
    if p > z.len() {
        return Err(config_err!("cannot keep {p} of {} entries", z.len()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(config_err!("logits must be finite"));
    }
    let order = rank(z, SelectionOrder::Highest)?;
    let mut weights = vec![0.0f64; z.len()];
    for _ in 0..p {
        let live: Vec<usize> = order.iter().copied().filter(|&i| weights[i] < 1.0).collect();
        let remaining = |i: usize| 1.0 - weights[i];
        let mut filled = 0.0;
        let mut grant = vec![0.0f64; z.len()];
        for t in 0..live.len() {
            let pivot = z[live[t]];
            let rest: f64 = live[t..]
                .iter()
                .map(|&i| remaining(i) * ((z[i] - pivot) / tau).exp())
                .sum();
            let lambda = (1.0 - filled) / rest;
            if lambda <= 1.0 || t + 1 == live.len() {
                let lambda = lambda.min(1.0);
                for &i in &live[t..] {
                    grant[i] = remaining(i) * lambda * ((z[i] - pivot) / tau).exp();
                }
                break;
            }
            grant[live[t]] = remaining(live[t]);
            filled += remaining(live[t]);
        }
        for (w, g) in weights.iter_mut().zip(&grant) {
            *w = (*w + g).min(1.0);
        }
    }
    Ok(weights)
}

/// Gumbel top-`p` relaxation of logits `w` at temperature `tau`.
pub fn gumbel_topk_relax(w: &[f64], p: usize, tau: f64, seed: u64) -> Result<Vec<f64>> {
    relax_perturbed(&perturb(w, seed), p, tau)
}

/// Exponential schedule `tau0 * (tau_end / tau0)^(step / total)`.
pub fn anneal_tau(step: usize, total_steps: usize, tau0: f64, tau_end: f64) -> Result<f64> {
    if !(tau0 > 0.0 && tau_end > 0.0) {
        return Err(config_err!("temperatures must be positive"));
    }
    if total_steps == 0 || step >= total_steps {
        return Ok(tau_end);
    }
    if step == 0 {
        return Ok(tau0);
    }
    Ok(tau0 * (tau_end / tau0).powf(step as f64 / total_steps as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateStep {
    pub step: usize,
    pub tau: f64,
    pub relaxed: Vec<f64>,
    pub hard: Vec<f64>,
    /// `||relaxed - hard||_1` on the same perturbed logits.
    pub l1: f64,
}

/// Anneals the temperature over `steps + 1` points (both endpoints included)
/// and records the relaxed and hard masks at each. Step `t` draws its noise
/// from `derive_seed(seed, t)`.
pub fn gate_trace(params: &GateParams) -> Result<Vec<GateStep>> {
    params.validate()?;
    (0..=params.steps)
        .map(|t| {
            let tau = anneal_tau(t, params.steps, params.tau0, params.tau_end)?;
            let z = perturb(&params.logits, derive_seed(params.seed, t as u64));
            let relaxed = relax_perturbed(&z, params.budget, tau)?;
            let hard = hard_topk_gate(&z, params.budget)?;
            let l1 = relaxed.iter().zip(&hard).map(|(a, b)| (a - b).abs()).sum();
            Ok(GateStep {
                step: t,
                tau,
                relaxed,
                hard,
                l1,
            })
        })
        .collect()
}

/// Block forward whose attention sublayer blends MhSA and a replacement:
/// `(1 - w) MhSA + w replacement`. At `w = 0` or `w = 1` only the taken branch
/// is evaluated.
pub fn gated_block_forward(x: &Tensor, block: &BlockParams, replacement: &BlockOp, gate: f32, grid: usize) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&gate) {
        return Err(config_err!("gate weight {gate} outside [0, 1]"));
    }
    block_forward_with(x, block, |z| {
        if gate == 0.0 {
            mhsa_forward(z, block)
        } else if gate == 1.0 {
            block_attention(z, block, replacement, grid)
        } else {
            mhsa_forward(z, block)?.axpby(1.0 - gate, &block_attention(z, block, replacement, grid)?, gate)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dropin::{replace_heads, init_params, HybridModel, Variant};
    use crate::tensor::{seeded_fill, Distribution};
    use crate::vit::{block_forward, synthetic_inputs};

    fn two_pass(stream: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let n = stream.len() as f64;
        let len = stream[0].len();
        let mean: Vec<f64> = (0..len).map(|i| stream.iter().map(|s| s[i]).sum::<f64>() / n).collect();
        let std = (0..len)
            .map(|i| (stream.iter().map(|s| (s[i] - mean[i]).powi(2)).sum::<f64>() / n).sqrt())
            .collect();
        (mean, std)
    }

    #[test]
    fn welford_examples() {
        let mut s = WelfordState::new(3);
        assert!(s.finalize().is_err());
        let a = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        s.update(&a).unwrap();
        assert_eq!(s.finalize().unwrap(), vec![0.0; 3]);
        s.update(&a).unwrap();
        assert!(s.m2().iter().all(|&m| m == 0.0));

        let mut s = WelfordState::new(2);
        s.update_f64(&[0.0, 0.0]).unwrap();
        s.update_f64(&[2.0, 2.0]).unwrap();
        assert_eq!(s.mean(), &[1.0, 1.0]);
        assert_eq!(s.m2().iter().map(|m| m / 1.0).collect::<Vec<_>>(), vec![2.0, 2.0]);
        assert_eq!(s.finalize().unwrap(), vec![1.0, 1.0]);

        let mut s = WelfordState::new(1);
        for i in 0..10 {
            s.update_f64(&[if i % 2 == 0 { 1.0 } else { -1.0 }]).unwrap();
        }
        assert!((s.finalize().unwrap()[0] - 1.0).abs() < 1e-15);
        assert!(s.update_f64(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn welford_matches_two_pass_with_large_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stream: Vec<Vec<f64>> = (0..1000)
            .map(|_| (0..4).map(|_| 1e6 + 2.0 * open_unit(&mut rng) - 1.0).collect())
            .collect();
        let mut s = WelfordState::new(4);
        for x in &stream {
            s.update_f64(x).unwrap();
        }
        let (mean, std) = two_pass(&stream);
        for (a, b) in s.mean().iter().zip(&mean) {
            assert!((a - b).abs() <= 1e-10 * b.abs());
        }
        for (a, b) in s.finalize().unwrap().iter().zip(&std) {
            assert!((a - b).abs() <= 1e-10 * b.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn sigma_examples() {
        assert_eq!(sigma_head(&[0.0; 16]), 0.0);
        assert_eq!(sigma_head(&vec![1.0; 4096]), 4096.0);
        assert_eq!(sigma_block(&[3.5, 3.5, 3.5]).unwrap(), 3.5);
        assert_eq!(sigma_block(&[0.0, 2.0]).unwrap(), 1.0);
        assert!(sigma_block(&[]).is_err());
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            n_blocks: 3,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            grid: 4,
            kernel: 3,
            ffn_mult: 2,
            pre_norm: true,
        }
    }

    #[test]
    fn score_model_examples() {
        let cfg = small_cfg();
        let mut model = Model::init(&cfg, 4).unwrap();
        let samples = synthetic_inputs(&cfg, 6, 5).unwrap();
        let single = score_model(&model, &samples[..1]).unwrap();
        assert!(single.flat_heads().iter().all(|&s| s == 0.0));

        model.blocks[1].w_q = Tensor::zeros(&[8, 8]);
        let a = score_model(&model, &samples).unwrap();
        let b = score_model(&model, &samples).unwrap();
        assert_eq!(a, b);
        assert!(a.per_head[1].iter().all(|&s| s <= 1e-9));
        assert_eq!(rank(&a.per_block, SelectionOrder::Lowest).unwrap()[0], 1);
        assert!(score_model(&model, &[]).is_err());
    }

    #[test]
    fn property_examples() {
        let grid = 4;
        let shifts = ShiftSet::new(3).unwrap();
        let uniform = Tensor::full(&[16, 16], 1.0 / 16.0);
        let r = check_properties(&[uniform.clone(), uniform], grid, &shifts, 1e-6).unwrap();
        assert_eq!((r.locality, r.translation_invariance, r.input_invariance), (false, true, true));

        let r = check_properties(&[Tensor::eye(16)], grid, &shifts, 0.0).unwrap();
        assert_eq!((r.locality, r.translation_invariance, r.input_invariance), (true, true, true));

        let random: Vec<Tensor> = (0..2)
            .map(|s| seeded_fill(&[16, 16], s, Distribution::Uniform { low: 0.0, high: 1.0 }).unwrap())
            .collect();
        let r = check_properties(&random, grid, &shifts, 1e-3).unwrap();
        assert!(!r.locality && !r.translation_invariance && !r.input_invariance);
    }

    #[test]
    fn select_examples() {
        let lowest = SelectionOrder::Lowest;
        let plan = select(&[3.0, 1.0, 2.0], 1, SelectionMode::Blockwise, lowest, 2).unwrap();
        assert_eq!(plan.blocks, vec![1]);
        assert_eq!(plan.heads, vec![HeadRef::new(1, 0), HeadRef::new(1, 1)]);
        let plan = select(&[1.0, 1.0, 1.0], 2, SelectionMode::Blockwise, lowest, 1).unwrap();
        assert_eq!(plan.blocks, vec![0, 1]);
        for order in [SelectionOrder::Lowest, SelectionOrder::Highest] {
            let mut all = select(&[0.3, 0.1, 0.2], 3, SelectionMode::Blockwise, order, 1).unwrap().blocks;
            all.sort();
            assert_eq!(all, vec![0, 1, 2]);
        }
        let plan = select(&[0.5, 0.1, 0.4, 0.2], 2, SelectionMode::Scattered, SelectionOrder::Highest, 2).unwrap();
        assert_eq!(plan.heads, vec![HeadRef::new(0, 0), HeadRef::new(1, 0)]);
        assert!(plan.blocks.is_empty());
        assert!(select(&[1.0], 2, SelectionMode::Blockwise, lowest, 1).is_err());
        assert!(select(&[f64::NAN], 1, SelectionMode::Blockwise, lowest, 1).is_err());
    }

    #[test]
    fn plan_validation() {
        let cfg = small_cfg();
        let good = SelectionPlan::blockwise(&[0.0, 1.0, 2.0], 2, SelectionOrder::Lowest, &cfg).unwrap();
        good.validate(&cfg).unwrap();
        let mut partial = good.clone();
        partial.heads.pop();
        assert!(partial.validate(&cfg).is_err());
        let dup = SelectionPlan::from_heads(vec![HeadRef::new(0, 0), HeadRef::new(0, 0)], SelectionOrder::Lowest);
        assert!(dup.validate(&cfg).is_err());
        let outside = SelectionPlan::from_heads(vec![HeadRef::new(5, 0)], SelectionOrder::Lowest);
        assert!(outside.validate(&cfg).is_err());
    }

    #[test]
    fn hard_gate_examples() {
        assert_eq!(hard_topk_gate(&[0.1, 0.9, 0.5], 1).unwrap(), vec![0.0, 1.0, 0.0]);
        assert_eq!(hard_topk_gate(&[0.1, 0.9, 0.5], 3).unwrap(), vec![1.0; 3]);
        assert_eq!(hard_topk_gate(&[1.0, 1.0, 1.0], 2).unwrap(), vec![1.0, 1.0, 0.0]);
        assert!(hard_topk_gate(&[1.0], 2).is_err());
    }

    #[test]
    fn relaxation_stays_in_unit_box() {
        // Plain softmax-without-replacement would overshoot 1 here.
        let w = relax_perturbed(&[0.0, -2.1972245773362196], 2, 1.0).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-12 && (w[1] - 1.0).abs() < 1e-12);
        let w = relax_perturbed(&[3.0, 0.0, 2.0, -1.0], 2, 1.0).unwrap();
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let first = relax_perturbed(&[1.0, 2.0, 3.0], 1, 0.5).unwrap();
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| (v / 0.5).exp()).collect();
        let total: f64 = e.iter().sum();
        for (a, b) in first.iter().zip(&e) {
            assert!((a - b / total).abs() < 1e-12);
        }
        assert!(relax_perturbed(&[1.0], 1, 0.0).is_err());
    }

    #[test]
    fn gumbel_examples() {
        let w = [0.0, 5.0, -5.0, 10.0, 2.0];
        let z = perturb(&w, 9);
        let relaxed = relax_perturbed(&z, 2, 0.01).unwrap();
        let hard = hard_topk_gate(&z, 2).unwrap();
        for (a, b) in relaxed.iter().zip(&hard) {
            assert!((a - b).abs() <= 1e-2);
        }
        assert_eq!(gumbel_topk_relax(&w, 2, 0.5, 3).unwrap(), gumbel_topk_relax(&w, 2, 0.5, 3).unwrap());
        for v in gumbel_topk_relax(&w, 5, 0.5, 3).unwrap() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn anneal_examples() {
        assert_eq!(anneal_tau(0, 10, 4.0, 0.05).unwrap(), 4.0);
        assert_eq!(anneal_tau(10, 10, 4.0, 0.05).unwrap(), 0.05);
        assert!((anneal_tau(5, 10, 4.0, 0.05).unwrap() - (4.0f64 * 0.05).sqrt()).abs() < 1e-9);
        assert!(anneal_tau(1, 10, -1.0, 0.05).is_err());
    }

    #[test]
    fn gated_forward_examples() {
        let cfg = small_cfg();
        let model = Model::init(&cfg, 6).unwrap();
        let block = &model.blocks[0];
        let plan = SelectionPlan::from_blocks(&[0], SelectionOrder::Lowest, cfg.n_heads);
        let params = init_params(&cfg, &plan, Variant::EnsDw, 7, false).unwrap();
        let hybrid = replace_heads(&HybridModel::from_model(model.clone()), &plan, &params).unwrap();
        let op = &hybrid.ops[0];
        let x = &synthetic_inputs(&cfg, 1, 8).unwrap()[0];
        let base = block_forward(x, block).unwrap();
        let repl = block_forward_with(x, block, |z| block_attention(z, block, op, cfg.grid)).unwrap();
        assert!(gated_block_forward(x, block, op, 0.0, cfg.grid).unwrap().bitwise_eq(&base));
        assert!(gated_block_forward(x, block, op, 1.0, cfg.grid).unwrap().bitwise_eq(&repl));
        assert!(gated_block_forward(x, block, op, 1.5, cfg.grid).is_err());
    }
}
