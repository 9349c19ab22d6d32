//! Analytic FLOP and parameter accounting, plus a wall-clock harness.
//!
//! Conventions: one multiply-accumulate is 2 FLOPs; softmax, normalisation,
//! biases and reshapes are not counted. Full-convolution kernels are priced
//! at materialised-convolution FLOPs but stored unfolded, so their parameters
//! are `W_V`, `W_O` and the `k x k` kernels.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dropin::{block_attention, init_params, replace_heads, BlockOp, DropinParams, HeadOp, HybridModel, Variant};
use crate::error::{config_err, Error, Result};
use crate::select::{SelectionMode, SelectionOrder, SelectionPlan};
use crate::tensor::{derive_seed, seeded_fill, Distribution, Tensor};
use crate::vit::{BlockParams, ModelConfig};

/// Attention-sublayer formulations priced per block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CostVariant {
    #[serde(rename = "mhsa")]
    Mhsa,
    #[serde(rename = "convfull-all")]
    ConvFullAll,
    #[serde(rename = "dw-all")]
    DwAll,
    #[serde(rename = "ens-convfull")]
    EnsConvFull,
    #[serde(rename = "ens-dw")]
    EnsDw,
}

impl CostVariant {
    pub const ALL: [CostVariant; 5] = [
        CostVariant::Mhsa,
        CostVariant::ConvFullAll,
        CostVariant::DwAll,
        CostVariant::EnsConvFull,
        CostVariant::EnsDw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CostVariant::Mhsa => "MhSA",
            CostVariant::ConvFullAll => "ConvFull_all",
            CostVariant::DwAll => "DW_all",
            CostVariant::EnsConvFull => "EnsConvFull",
            CostVariant::EnsDw => "EnsDW",
        }
    }

    /// A whole block replaced with the given drop-in variant.
    pub fn replacing(variant: Variant) -> Self {
        match variant {
            Variant::ConvFull => CostVariant::ConvFullAll,
            Variant::Dw => CostVariant::DwAll,
            Variant::EnsConvFull => CostVariant::EnsConvFull,
            Variant::EnsDw => CostVariant::EnsDw,
        }
    }
}

impl fmt::Display for CostVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CostVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mhsa" => Ok(CostVariant::Mhsa),
            "convfull" | "convfull-all" | "convfull_all" => Ok(CostVariant::ConvFullAll),
            "dw" | "dw-all" | "dw_all" => Ok(CostVariant::DwAll),
            "ens-convfull" | "ensconvfull" => Ok(CostVariant::EnsConvFull),
            "ens-dw" | "ensdw" => Ok(CostVariant::EnsDw),
            _ => Err(config_err!("unknown cost variant '{s}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub flops: u64,
    pub params: u64,
    /// Coarse peak of live intermediates, in bytes of `f32`.
    pub activation_bytes: u64,
}

impl Counts {
    fn checked_add(self, other: Counts) -> Result<Counts> {
        Ok(Counts {
            flops: add(self.flops, other.flops)?,
            params: add(self.params, other.params)?,
            activation_bytes: self.activation_bytes.max(other.activation_bytes),
        })
    }
}

fn overflow() -> Error {
    config_err!("cost counter overflow")
}

fn add(a: u64, b: u64) -> Result<u64> {
    a.checked_add(b).ok_or_else(overflow)
}

/// Product of factors with overflow detection.
fn prod(factors: &[usize]) -> Result<u64> {
    factors
        .iter()
        .try_fold(1u64, |acc, &f| acc.checked_mul(f as u64))
        .ok_or_else(overflow)
}

fn sum(terms: &[Result<u64>]) -> Result<u64> {
    terms.iter().try_fold(0u64, |acc, t| match t {
        Ok(v) => add(acc, *v),
        Err(_) => Err(overflow()),
    })
}

struct Dims {
    n: usize,
    d: usize,
    dh: usize,
    nh: usize,
    k2: usize,
}

impl Dims {
    fn of(cfg: &ModelConfig) -> Self {
        Dims {
            n: cfg.tokens(),
            d: cfg.d_model,
            dh: cfg.d_head,
            nh: cfg.n_heads,
            k2: cfg.kernel * cfg.kernel,
        }
    }
}

/// Closed-form cost of one block's attention sublayer.
pub fn flops_params(variant: CostVariant, cfg: &ModelConfig) -> Result<Counts> {
    let Dims { n, d, dh, nh, k2 } = Dims::of(cfg);
    let counts = match variant {
        CostVariant::Mhsa => Counts {
            flops: sum(&[prod(&[2, n, d, d, 4]), prod(&[2, n, n, d, 2])])?,
            params: prod(&[4, d, d])?,
            activation_bytes: 4 * sum(&[prod(&[5, n, d]), prod(&[nh, n, n])])?,
        },
        CostVariant::ConvFullAll => Counts {
            flops: sum(&[prod(&[2, n, k2, d, d]), prod(&[2, n, d, d])])?,
            params: sum(&[prod(&[2, d, d]), prod(&[nh, k2])])?,
            activation_bytes: 4 * prod(&[2, n, d])?,
        },
        CostVariant::DwAll => Counts {
            flops: sum(&[prod(&[2, n, d, d]), prod(&[2, n, k2, d]), prod(&[2, n, d, d])])?,
            params: sum(&[prod(&[2, d, d]), prod(&[k2, d])])?,
            activation_bytes: 4 * prod(&[3, n, d])?,
        },
        CostVariant::EnsConvFull => Counts {
            flops: sum(&[prod(&[2, n, k2, d, dh]), prod(&[2, n, dh, d])])?,
            params: sum(&[prod(&[2, d, d]), Ok(nh as u64), Ok(k2 as u64)])?,
            activation_bytes: 4 * sum(&[prod(&[n, dh]), prod(&[n, d])])?,
        },
        CostVariant::EnsDw => Counts {
            flops: sum(&[prod(&[2, n, d, dh]), prod(&[2, n, k2, dh]), prod(&[2, n, dh, d])])?,
            params: sum(&[prod(&[2, d, d]), Ok(nh as u64), prod(&[k2, dh])])?,
            activation_bytes: 4 * sum(&[prod(&[2, n, dh]), prod(&[n, d])])?,
        },
    };
    Ok(counts)
}

/// Cost of a single head (including its share of `W_O`) in a per-head layout.
/// `None` prices the original attention head.
pub fn head_cost(variant: Option<Variant>, cfg: &ModelConfig) -> Result<Counts> {
    let Dims { n, d, dh, k2, .. } = Dims::of(cfg);
    let counts = match variant {
        None => Counts {
            flops: sum(&[prod(&[3, 2, n, d, dh]), prod(&[2, 2, n, n, dh]), prod(&[2, n, dh, d])])?,
            params: prod(&[4, d, dh])?,
            activation_bytes: 4 * sum(&[prod(&[4, n, dh]), prod(&[n, n])])?,
        },
        Some(Variant::Dw) => Counts {
            flops: sum(&[prod(&[2, n, d, dh]), prod(&[2, n, k2, dh]), prod(&[2, n, dh, d])])?,
            params: sum(&[prod(&[2, d, dh]), prod(&[k2, dh])])?,
            activation_bytes: 4 * prod(&[2, n, dh])?,
        },
        Some(Variant::ConvFull) => Counts {
            flops: sum(&[prod(&[2, n, k2, d, dh]), prod(&[2, n, dh, d])])?,
            params: sum(&[prod(&[2, d, dh]), Ok(k2 as u64)])?,
            activation_bytes: 4 * prod(&[n, dh])?,
        },
        Some(v) => return Err(config_err!("{v} replaces whole blocks, not single heads")),
    };
    Ok(counts)
}

/// Feed-forward cost per block: two matmuls, parameters include biases.
pub fn ffn_cost(cfg: &ModelConfig) -> Result<Counts> {
    let (n, d, h) = (cfg.tokens(), cfg.d_model, cfg.ffn_hidden());
    Ok(Counts {
        flops: prod(&[2, n, d, h, 2])?,
        params: sum(&[prod(&[2, d, h]), Ok(h as u64), Ok(d as u64)])?,
        activation_bytes: 4 * prod(&[n, h])?,
    })
}

/// What a block's attention sublayer is made of.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BlockLayout {
    /// One entry per head; `None` keeps the attention head.
    Heads { replaced: Vec<Option<Variant>> },
    Ensembled { variant: Variant },
}

impl BlockLayout {
    pub fn baseline(n_heads: usize) -> Self {
        BlockLayout::Heads {
            replaced: vec![None; n_heads],
        }
    }

    pub fn of(op: &BlockOp) -> Self {
        match op {
            BlockOp::Heads(heads) => BlockLayout::Heads {
                replaced: heads
                    .iter()
                    .map(|h| match h {
                        HeadOp::Attention => None,
                        HeadOp::Dropin(k) => Some(k.variant()),
                    })
                    .collect(),
            },
            BlockOp::Ensembled(p) => BlockLayout::Ensembled { variant: p.variant },
        }
    }

    fn label(&self) -> String {
        match self {
            BlockLayout::Ensembled { variant } => CostVariant::replacing(*variant).name().to_string(),
            BlockLayout::Heads { replaced } => {
                let count = replaced.iter().filter(|r| r.is_some()).count();
                if count == 0 {
                    return CostVariant::Mhsa.name().to_string();
                }
                let first = replaced.iter().flatten().next().copied().expect("count > 0");
                let uniform = replaced.iter().flatten().all(|&v| v == first);
                if count == replaced.len() && uniform {
                    CostVariant::replacing(first).name().to_string()
                } else {
                    format!("mixed ({count}/{} heads replaced)", replaced.len())
                }
            }
        }
    }
}

/// Attention cost of one block. A fully replaced per-head block prices at
/// exactly the matching block variant.
pub fn block_cost(layout: &BlockLayout, cfg: &ModelConfig) -> Result<Counts> {
    match layout {
        BlockLayout::Ensembled { variant } => flops_params(CostVariant::replacing(*variant), cfg),
        BlockLayout::Heads { replaced } => {
            if replaced.len() != cfg.n_heads {
                return Err(config_err!("{} head entries for {} heads", replaced.len(), cfg.n_heads));
            }
            replaced
                .iter()
                .try_fold(Counts::default(), |acc, v| acc.checked_add(head_cost(*v, cfg)?))
                .map(|mut c| {
                    // Heads run one after another; the peak is one head's worth
                    // plus the concatenated output.
                    c.activation_bytes += 4 * (cfg.tokens() * cfg.d_model) as u64;
                    c
                })
        }
    }
}

/// Block layouts produced by applying `plan` with `variant` to a plain model.
pub fn plan_layouts(cfg: &ModelConfig, plan: &SelectionPlan, variant: Variant) -> Result<Vec<BlockLayout>> {
    plan.validate(cfg)?;
    let mut layouts = vec![BlockLayout::baseline(cfg.n_heads); cfg.n_blocks];
    if variant.is_ensembled() {
        if plan.mode != SelectionMode::Blockwise {
            return Err(config_err!("ensembled variants replace whole blocks and need a blockwise plan"));
        }
        for &b in &plan.blocks {
            layouts[b] = BlockLayout::Ensembled { variant };
        }
    } else {
        for t in &plan.heads {
            if let BlockLayout::Heads { replaced } = &mut layouts[t.block] {
                replaced[t.head] = Some(variant);
            }
        }
    }
    Ok(layouts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCost {
    pub block: usize,
    pub layout: String,
    pub attention: Counts,
    pub ffn: Counts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub attention_flops: u64,
    pub attention_params: u64,
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub config: ModelConfig,
    /// Per-block attention costs of each formulation at this config.
    pub variants: Vec<(CostVariant, Counts)>,
    pub blocks: Vec<BlockCost>,
    pub totals: Totals,
    pub baseline: Totals,
    /// Percent change versus the all-MhSA model (negative is cheaper).
    pub flops_delta_pct: f64,
    pub params_delta_pct: f64,
    /// Attention FLOP reduction restricted to blocks that changed, in percent.
    pub replaced_attention_reduction_pct: f64,
}

fn totals(blocks: &[BlockCost]) -> Result<Totals> {
    let mut t = Totals {
        attention_flops: 0,
        attention_params: 0,
        flops: 0,
        params: 0,
    };
    for b in blocks {
        t.attention_flops = add(t.attention_flops, b.attention.flops)?;
        t.attention_params = add(t.attention_params, b.attention.params)?;
        t.flops = add(t.flops, add(b.attention.flops, b.ffn.flops)?)?;
        t.params = add(t.params, add(b.attention.params, b.ffn.params)?)?;
    }
    Ok(t)
}

fn pct(new: u64, old: u64) -> f64 {
    if old == 0 {
        0.0
    } else {
        (new as f64 - old as f64) / old as f64 * 100.0
    }
}

pub fn cost_report(cfg: &ModelConfig, layouts: &[BlockLayout]) -> Result<CostReport> {
    cfg.validate()?;
    if layouts.len() != cfg.n_blocks {
        return Err(config_err!("{} block layouts for {} blocks", layouts.len(), cfg.n_blocks));
    }
    let ffn = ffn_cost(cfg)?;
    let mhsa = flops_params(CostVariant::Mhsa, cfg)?;
    let blocks = layouts
        .iter()
        .enumerate()
        .map(|(b, layout)| {
            Ok(BlockCost {
                block: b,
                layout: layout.label(),
                attention: block_cost(layout, cfg)?,
                ffn,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let base_blocks: Vec<BlockCost> = (0..cfg.n_blocks)
        .map(|b| BlockCost {
            block: b,
            layout: CostVariant::Mhsa.name().to_string(),
            attention: mhsa,
            ffn,
        })
        .collect();
    let totals_now = totals(&blocks)?;
    let baseline = totals(&base_blocks)?;
    let baseline_layout = BlockLayout::baseline(cfg.n_heads);
    let changed: Vec<&BlockCost> = blocks
        .iter()
        .zip(layouts)
        .filter(|(_, l)| **l != baseline_layout)
        .map(|(b, _)| b)
        .collect();
    let changed_flops = changed.iter().map(|b| b.attention.flops).sum::<u64>();
    let replaced_attention_reduction_pct = -pct(changed_flops, mhsa.flops * changed.len() as u64);
    Ok(CostReport {
        config: cfg.clone(),
        variants: CostVariant::ALL
            .iter()
            .map(|&v| Ok((v, flops_params(v, cfg)?)))
            .collect::<Result<_>>()?,
        blocks,
        flops_delta_pct: pct(totals_now.flops, baseline.flops),
        params_delta_pct: pct(totals_now.params, baseline.params),
        replaced_attention_reduction_pct,
        totals: totals_now,
        baseline,
    })
}

/// Cost of a plain model after applying `plan` with `variant`.
pub fn model_cost_report(cfg: &ModelConfig, plan: &SelectionPlan, variant: Variant) -> Result<CostReport> {
    cost_report(cfg, &plan_layouts(cfg, plan, variant)?)
}

pub fn hybrid_cost_report(model: &HybridModel) -> Result<CostReport> {
    let layouts: Vec<BlockLayout> = model.ops.iter().map(BlockLayout::of).collect();
    cost_report(model.config(), &layouts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub budget: usize,
    pub blocks: Vec<usize>,
    pub flops: u64,
    pub params: u64,
}

/// Whole-model cost for blockwise budgets `0..=n_b`, replacing blocks in
/// `ranking` order (block index order when `None`).
pub fn budget_sweep(cfg: &ModelConfig, variant: Variant, ranking: Option<&[usize]>) -> Result<Vec<SweepPoint>> {
    let default: Vec<usize> = (0..cfg.n_blocks).collect();
    let ranking = ranking.unwrap_or(&default);
    if ranking.len() != cfg.n_blocks {
        return Err(config_err!("ranking lists {} of {} blocks", ranking.len(), cfg.n_blocks));
    }
    (0..=cfg.n_blocks)
        .map(|budget| {
            let blocks = ranking[..budget].to_vec();
            let plan = SelectionPlan::from_blocks(&blocks, SelectionOrder::Lowest, cfg.n_heads);
            let report = model_cost_report(cfg, &plan, variant)?;
            Ok(SweepPoint {
                budget,
                blocks,
                flops: report.totals.flops,
                params: report.totals.params,
            })
        })
        .collect()
}

/// Aligned plain-text table of the per-variant block costs.
pub fn variant_table(report: &CostReport) -> String {
    let mut out = format!("{:<14} {:>10} {:>12} {:>12}\n", "variant", "GFLOPs", "params (M)", "act (MB)");
    for (v, c) in &report.variants {
        out.push_str(&format!(
            "{:<14} {:>10.4} {:>12.4} {:>12.3}\n",
            v.name(),
            c.flops as f64 / 1e9,
            c.params as f64 / 1e6,
            c.activation_bytes as f64 / 1e6
        ));
    }
    out.push_str(&format!(
        "\nmodel: {:.4} GFLOPs ({:+.2}% vs MhSA), {:.4} M params ({:+.2}%)\n",
        report.totals.flops as f64 / 1e9,
        report.flops_delta_pct,
        report.totals.params as f64 / 1e6,
        report.params_delta_pct
    ));
    out
}

// ---------------------------------------------------------------------------
// Wall clock
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchStats {
    pub reps: usize,
    pub warmup: usize,
    /// Seconds.
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

/// Times `f` after `warmup` discarded calls.
pub fn bench<T>(mut f: impl FnMut() -> Result<T>, warmup: usize, reps: usize) -> Result<BenchStats> {
    if reps == 0 {
        return Err(config_err!("bench needs at least one repetition"));
    }
    for _ in 0..warmup {
        std::hint::black_box(f()?);
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        std::hint::black_box(f()?);
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(BenchStats {
        reps,
        warmup,
        median: percentile(&times, 0.5),
        p10: percentile(&times, 0.1),
        p90: percentile(&times, 0.9),
    })
}

/// A random block together with the attention sublayer of `variant`.
pub fn bench_fixture(cfg: &ModelConfig, variant: CostVariant, seed: u64) -> Result<(BlockParams, BlockOp, Tensor)> {
    cfg.validate()?;
    let block = BlockParams::init(cfg, derive_seed(seed, 0))?;
    let op = match variant {
        CostVariant::Mhsa => BlockOp::attention(cfg.n_heads),
        other => {
            let dropin = match other {
                CostVariant::ConvFullAll => Variant::ConvFull,
                CostVariant::DwAll => Variant::Dw,
                CostVariant::EnsConvFull => Variant::EnsConvFull,
                _ => Variant::EnsDw,
            };
            let single = ModelConfig {
                n_blocks: 1,
                ..cfg.clone()
            };
            let plan = SelectionPlan::from_blocks(&[0], SelectionOrder::Lowest, cfg.n_heads);
            let params = init_params(&single, &plan, dropin, seed, false)?;
            layout_op(&params)
        }
    };
    let x = seeded_fill(
        &[cfg.tokens(), cfg.d_model],
        derive_seed(seed, 1),
        Distribution::Gaussian { mean: 0.0, std: 1.0 },
    )?;
    Ok((block, op, x))
}

fn layout_op(params: &[DropinParams]) -> BlockOp {
    match &params[0] {
        DropinParams::Block(p) => BlockOp::Ensembled(p.clone()),
        DropinParams::Head(_) => BlockOp::Heads(
            params
                .iter()
                .map(|p| match p {
                    DropinParams::Head(k) => HeadOp::Dropin(k.clone()),
                    DropinParams::Block(_) => unreachable!("init_params never mixes kinds"),
                })
                .collect(),
        ),
    }
}

/// Times one block's attention sublayer under `variant`.
pub fn bench_block(cfg: &ModelConfig, variant: CostVariant, seed: u64, warmup: usize, reps: usize) -> Result<BenchStats> {
    let (block, op, x) = bench_fixture(cfg, variant, seed)?;
    bench(|| block_attention(&x, &block, &op, cfg.grid), warmup, reps)
}

/// Times a full hybrid forward pass.
pub fn bench_model(model: &HybridModel, x: &Tensor, warmup: usize, reps: usize) -> Result<BenchStats> {
    bench(|| model.forward(x), warmup, reps)
}

/// Applies a plan to a model for timing; a thin wrapper kept next to the
/// benchmark so the CLI and tests build identical hybrids.
pub fn planned_hybrid(model: &HybridModel, plan: &SelectionPlan, variant: Variant, seed: u64) -> Result<HybridModel> {
    let params = init_params(model.config(), plan, variant, seed, false)?;
    replace_heads(model, plan, &params)
}
