//! Convolutional drop-in replacements for attention heads.
//!
//! Four formulations are supported:
//!
//! * [`Variant::ConvFull`]: one `k x k` kernel per head folded into the value
//!   projection and applied as a full convolution.
//! * [`Variant::Dw`]: value projection followed by a per-channel depthwise
//!   convolution (one `k x k` filter per head channel).
//! * [`Variant::EnsConvFull`] / [`Variant::EnsDw`]: all heads of a block are
//!   merged into one effective head through softmax weights `gamma`, then
//!   replaced by the full or depthwise formulation.
//!
//! Kernels can be drawn at random or fitted by exact least squares against
//! the outputs of a teacher model (see [`fit_params`]).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::lstsq::{NormalEquations, Solution};
use crate::select::{HeadRef, SelectionMode, SelectionPlan};
use crate::tensor::{conv2d, dwconv2d, matmul, named_seed, seeded_fill, shifted, Distribution, ShiftSet, Tensor};
use crate::vit::{block_forward_with, head_attention_with_energy, BlockParams, Model, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "convfull")]
    ConvFull,
    #[serde(rename = "dw")]
    Dw,
    #[serde(rename = "ens-convfull")]
    EnsConvFull,
    #[serde(rename = "ens-dw")]
    EnsDw,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::ConvFull, Variant::Dw, Variant::EnsConvFull, Variant::EnsDw];

    pub fn is_ensembled(self) -> bool {
        matches!(self, Variant::EnsConvFull | Variant::EnsDw)
    }

    pub fn is_depthwise(self) -> bool {
        matches!(self, Variant::Dw | Variant::EnsDw)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::ConvFull => "convfull",
            Variant::Dw => "dw",
            Variant::EnsConvFull => "ens-convfull",
            Variant::EnsDw => "ens-dw",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| config_err!("unknown variant '{s}' (expected convfull, dw, ens-convfull or ens-dw)"))
    }
}

/// Kernel of a single replaced head.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadKernel {
    /// `k x k`, shared across the head's channels and folded into `W_V`.
    Shared(Tensor),
    /// `k x k x d_h`, one filter per channel.
    Depthwise(Tensor),
}

impl HeadKernel {
    pub fn tensor(&self) -> &Tensor {
        match self {
            HeadKernel::Shared(t) | HeadKernel::Depthwise(t) => t,
        }
    }

    pub fn variant(&self) -> Variant {
        match self {
            HeadKernel::Shared(_) => Variant::ConvFull,
            HeadKernel::Depthwise(_) => Variant::Dw,
        }
    }

    fn check(&self, k: usize, d_head: usize) -> Result<()> {
        let expect: &[usize] = match self {
            HeadKernel::Shared(_) => &[k, k],
            HeadKernel::Depthwise(_) => &[k, k, d_head],
        };
        if self.tensor().shape() != expect {
            return Err(shape_err!("{} kernel {:?}, expected {expect:?}", self.variant(), self.tensor().shape()));
        }
        Ok(())
    }
}

/// Parameters of an ensembled block replacement.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleParams {
    pub variant: Variant,
    /// Head logits, length `n_h`.
    pub gamma: Tensor,
    /// `k x k` for `EnsConvFull`, `k x k x d_h` for `EnsDw`.
    pub kernel: Tensor,
}

impl EnsembleParams {
    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if !self.variant.is_ensembled() {
            return Err(config_err!("{} is not an ensembled variant", self.variant));
        }
        if self.gamma.shape() != [cfg.n_heads] {
            return Err(shape_err!("gamma {:?}, expected [{}]", self.gamma.shape(), cfg.n_heads));
        }
        let k = cfg.kernel;
        let expect: Vec<usize> = if self.variant.is_depthwise() {
            vec![k, k, cfg.d_head]
        } else {
            vec![k, k]
        };
        if self.kernel.shape() != expect {
            return Err(shape_err!("{} kernel {:?}, expected {expect:?}", self.variant, self.kernel.shape()));
        }
        Ok(())
    }
}

/// Replacement parameters for one plan target: a head for per-head variants,
/// a whole block for ensembled ones.
#[derive(Debug, Clone, PartialEq)]
pub enum DropinParams {
    Head(HeadKernel),
    Block(EnsembleParams),
}

impl DropinParams {
    pub fn variant(&self) -> Variant {
        match self {
            DropinParams::Head(k) => k.variant(),
            DropinParams::Block(p) => p.variant,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadOp {
    Attention,
    Dropin(HeadKernel),
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockOp {
    Heads(Vec<HeadOp>),
    Ensembled(EnsembleParams),
}

impl BlockOp {
    pub fn attention(n_heads: usize) -> Self {
        BlockOp::Heads(vec![HeadOp::Attention; n_heads])
    }

    pub fn is_baseline(&self) -> bool {
        matches!(self, BlockOp::Heads(h) if h.iter().all(|op| *op == HeadOp::Attention))
    }
}

/// `W^{Vh}[r][s] = K[r][s] * W_V[:, h, :]`, shaped `k x k x d x d_h`.
pub fn fold_full_kernel(kernel: &Tensor, value_slice: &Tensor) -> Result<Tensor> {
    let (kh, kw) = kernel.dims2()?;
    let (d, dh) = value_slice.dims2()?;
    let mut out = Vec::with_capacity(kh * kw * d * dh);
    for &kv in kernel.data() {
        out.extend(value_slice.data().iter().map(|&w| kv * w));
    }
    Tensor::new(&[kh, kw, d, dh], out)
}

/// Full-convolution head: `Conv(X, W^{Vh})` on an `m x m x d` grid.
pub fn attn_conv_full(x: &Tensor, folded: &Tensor) -> Result<Tensor> {
    conv2d(x, folded)
}

/// Depthwise head: `Conv_DW(X W_V[:, h, :], K)` on an `m x m x d` grid.
pub fn attn_dw(x: &Tensor, value_slice: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (rows, cols, d) = x.dims3()?;
    let (vd, dh) = value_slice.dims2()?;
    if vd != d {
        return Err(shape_err!("value slice has {vd} rows, input has {d} channels"));
    }
    let values = matmul(&x.reshape(&[rows * cols, d])?, value_slice)?;
    dwconv2d(&values.reshape(&[rows, cols, dh])?, kernel)
}

fn softmax_f64(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&g| (g as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax-weighted merge of the per-head value slices and output row
/// groups: `(W^{Ve}, W^{Oe})`, shaped `d x d_h` and `d_h x d`.
pub fn ensemble_weights(gamma: &Tensor, block: &BlockParams) -> Result<(Tensor, Tensor)> {
    if gamma.shape() != [block.n_heads] {
        return Err(shape_err!("gamma {:?}, expected [{}]", gamma.shape(), block.n_heads));
    }
    let weights = softmax_f64(gamma.data());
    let d = block.d_model();
    let dh = block.d_head();
    let mut w_ve = vec![0.0f64; d * dh];
    let mut w_oe = vec![0.0f64; dh * d];
    for (h, &s) in weights.iter().enumerate() {
        for (acc, &w) in w_ve.iter_mut().zip(block.value_slice(h)?.data()) {
            *acc += s * w as f64;
        }
        for (acc, &w) in w_oe.iter_mut().zip(block.output_group(h)?.data()) {
            *acc += s * w as f64;
        }
    }
    let to_f32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect();
    Ok((Tensor::new(&[d, dh], to_f32(w_ve))?, Tensor::new(&[dh, d], to_f32(w_oe))?))
}

fn grid_of(x: &Tensor, grid: usize) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    if n != grid * grid {
        return Err(shape_err!("{n} tokens do not form a {grid}x{grid} grid"));
    }
    x.reshape(&[grid, grid, d])
}

/// Ensembled depthwise block: `Conv_DW(X W^{Ve}, K^e) W^{Oe}` on `n x d` tokens.
pub fn mhsa_dw_ensembled(x: &Tensor, w_ve: &Tensor, kernel: &Tensor, w_oe: &Tensor, grid: usize) -> Result<Tensor> {
    let conv = attn_dw(&grid_of(x, grid)?, w_ve, kernel)?;
    let (_, _, dh) = conv.dims3()?;
    matmul(&conv.reshape(&[grid * grid, dh])?, w_oe)
}

/// Ensembled full-convolution block: `Conv(X, fold(K, W^{Ve})) W^{Oe}`.
pub fn mhsa_conv_ensembled(x: &Tensor, w_ve: &Tensor, kernel: &Tensor, w_oe: &Tensor, grid: usize) -> Result<Tensor> {
    let conv = attn_conv_full(&grid_of(x, grid)?, &fold_full_kernel(kernel, w_ve)?)?;
    let (_, _, dh) = conv.dims3()?;
    matmul(&conv.reshape(&[grid * grid, dh])?, w_oe)
}

/// Output of a replaced head on `n x d` (already normalised) tokens.
pub fn head_dropin(x: &Tensor, block: &BlockParams, h: usize, kernel: &HeadKernel, grid: usize) -> Result<Tensor> {
    let xg = grid_of(x, grid)?;
    let value_slice = block.value_slice(h)?;
    let out = match kernel {
        HeadKernel::Shared(k) => attn_conv_full(&xg, &fold_full_kernel(k, &value_slice)?)?,
        HeadKernel::Depthwise(k) => attn_dw(&xg, &value_slice, k)?,
    };
    let dh = block.d_head();
    out.reshape(&[grid * grid, dh])
}

pub fn ensembled_forward(x: &Tensor, block: &BlockParams, params: &EnsembleParams, grid: usize) -> Result<Tensor> {
    let (w_ve, w_oe) = ensemble_weights(&params.gamma, block)?;
    if params.variant.is_depthwise() {
        mhsa_dw_ensembled(x, &w_ve, &params.kernel, &w_oe, grid)
    } else {
        mhsa_conv_ensembled(x, &w_ve, &params.kernel, &w_oe, grid)
    }
}

/// Per-head outputs of a per-head block layout, before `W_O`.
fn head_outputs(x: &Tensor, block: &BlockParams, heads: &[HeadOp], grid: usize) -> Result<Vec<Tensor>> {
    heads
        .iter()
        .enumerate()
        .map(|(h, op)| match op {
            HeadOp::Attention => Ok(head_attention_with_energy(x, block, h)?.0),
            HeadOp::Dropin(k) => head_dropin(x, block, h, k, grid),
        })
        .collect()
}

/// The attention sublayer of a (possibly) modified block. With every head
/// set to `Attention` this performs exactly the same arithmetic as
/// `vit::mhsa_forward`.
pub fn block_attention(x: &Tensor, block: &BlockParams, op: &BlockOp, grid: usize) -> Result<Tensor> {
    match op {
        BlockOp::Heads(heads) => {
            if heads.len() != block.n_heads {
                return Err(config_err!("{} head ops for {} heads", heads.len(), block.n_heads));
            }
            matmul(&Tensor::hconcat(&head_outputs(x, block, heads, grid)?)?, &block.w_o)
        }
        BlockOp::Ensembled(p) => ensembled_forward(x, block, p, grid),
    }
}

/// A base model with some attention heads or blocks swapped for
/// convolutional replacements.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridModel {
    pub base: Model,
    pub ops: Vec<BlockOp>,
}

impl HybridModel {
    pub fn from_model(base: Model) -> Self {
        let ops = base.blocks.iter().map(|b| BlockOp::attention(b.n_heads)).collect();
        HybridModel { base, ops }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.base.config
    }

    pub fn is_baseline(&self) -> bool {
        self.ops.iter().all(BlockOp::is_baseline)
    }

    fn block_step(&self, b: usize, x: &Tensor) -> Result<Tensor> {
        let block = &self.base.blocks[b];
        block_forward_with(x, block, |z| block_attention(z, block, &self.ops[b], self.config().grid))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_trace(x)?.pop().expect("at least one block"))
    }

    /// Output of every block in order.
    pub fn forward_trace(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.base.check_input(x)?;
        let mut x = x.add(&self.base.pos_embed)?;
        let mut trace = Vec::with_capacity(self.ops.len());
        for b in 0..self.ops.len() {
            x = self.block_step(b, &x)?;
            trace.push(x.clone());
        }
        Ok(trace)
    }

    /// The normalised input that each block's attention sublayer receives.
    pub fn attention_inputs(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.base.check_input(x)?;
        let mut x = x.add(&self.base.pos_embed)?;
        let mut inputs = Vec::with_capacity(self.ops.len());
        for b in 0..self.ops.len() {
            let block = &self.base.blocks[b];
            inputs.push(if block.pre_norm { block.norm1.forward(&x)? } else { x.clone() });
            x = self.block_step(b, &x)?;
        }
        Ok(inputs)
    }

    /// Current output of head `h` of block `b` (before `W_O`). Heads inside
    /// an ensembled block report their original attention.
    pub fn head_output(&self, z: &Tensor, b: usize, h: usize) -> Result<Tensor> {
        let block = &self.base.blocks[b];
        match &self.ops[b] {
            BlockOp::Heads(heads) => match &heads[h] {
                HeadOp::Attention => Ok(head_attention_with_energy(z, block, h)?.0),
                HeadOp::Dropin(k) => head_dropin(z, block, h, k, self.config().grid),
            },
            BlockOp::Ensembled(_) => Ok(head_attention_with_energy(z, block, h)?.0),
        }
    }

    pub fn replaced_heads(&self) -> Vec<HeadRef> {
        let mut out = Vec::new();
        for (b, op) in self.ops.iter().enumerate() {
            match op {
                BlockOp::Heads(heads) => {
                    for (h, op) in heads.iter().enumerate() {
                        if matches!(op, HeadOp::Dropin(_)) {
                            out.push(HeadRef::new(b, h));
                        }
                    }
                }
                BlockOp::Ensembled(_) => {
                    out.extend((0..self.config().n_heads).map(|h| HeadRef::new(b, h)));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = self.config();
        if self.ops.len() != cfg.n_blocks || self.base.blocks.len() != cfg.n_blocks {
            return Err(config_err!("hybrid layout covers {} of {} blocks", self.ops.len(), cfg.n_blocks));
        }
        for op in &self.ops {
            match op {
                BlockOp::Heads(heads) => {
                    if heads.len() != cfg.n_heads {
                        return Err(config_err!("{} head ops for {} heads", heads.len(), cfg.n_heads));
                    }
                    for head in heads {
                        if let HeadOp::Dropin(k) = head {
                            k.check(cfg.kernel, cfg.d_head)?;
                        }
                    }
                }
                BlockOp::Ensembled(p) => p.check(cfg)?,
            }
        }
        Ok(())
    }
}

/// Swaps the plan's targets for the given replacements. Per-head variants
/// take one `DropinParams::Head` per plan head (in plan order); ensembled
/// variants take one `DropinParams::Block` per plan block and require a
/// blockwise plan.
pub fn replace_heads(model: &HybridModel, plan: &SelectionPlan, params: &[DropinParams]) -> Result<HybridModel> {
    let cfg = model.config().clone();
    plan.validate(&cfg)?;
    let mut out = model.clone();
    let ensembled = params.iter().any(|p| matches!(p, DropinParams::Block(_)));
    if ensembled {
        if plan.mode != SelectionMode::Blockwise {
            return Err(config_err!("ensembled variants replace whole blocks and need a blockwise plan"));
        }
        if params.len() != plan.blocks.len() {
            return Err(config_err!("{} block parameters for {} planned blocks", params.len(), plan.blocks.len()));
        }
        for (&b, p) in plan.blocks.iter().zip(params) {
            let DropinParams::Block(p) = p else {
                return Err(config_err!("cannot mix per-head and ensembled parameters"));
            };
            p.check(&cfg)?;
            out.ops[b] = BlockOp::Ensembled(p.clone());
        }
    } else {
        if params.len() != plan.heads.len() {
            return Err(config_err!("{} head parameters for {} planned heads", params.len(), plan.heads.len()));
        }
        for (target, p) in plan.heads.iter().zip(params) {
            let DropinParams::Head(kernel) = p else { unreachable!() };
            kernel.check(cfg.kernel, cfg.d_head)?;
            if let BlockOp::Ensembled(_) = out.ops[target.block] {
                out.ops[target.block] = BlockOp::attention(cfg.n_heads);
            }
            let BlockOp::Heads(heads) = &mut out.ops[target.block] else { unreachable!() };
            heads[target.head] = HeadOp::Dropin(kernel.clone());
        }
    }
    Ok(out)
}

/// Archive name of a per-head replacement kernel.
pub fn head_kernel_name(b: usize, h: usize) -> String {
    format!("dropin.block{b}.head{h}.K")
}

pub fn block_kernel_name(b: usize) -> String {
    format!("dropin.block{b}.K")
}

pub fn block_gamma_name(b: usize) -> String {
    format!("dropin.block{b}.gamma")
}

/// Random kernels, `gaussian(0, 1/k)` per entry, and zero `gamma`.
///
/// Shared kernels are drawn from the head's kernel name so a `ConvFull`
/// replacement and a `shared` depthwise one built from the same seed carry the
/// same `k x k` pattern.
pub fn init_params(cfg: &ModelConfig, plan: &SelectionPlan, variant: Variant, seed: u64, shared: bool) -> Result<Vec<DropinParams>> {
    let k = cfg.kernel;
    let dist = Distribution::Gaussian {
        mean: 0.0,
        std: 1.0 / k as f32,
    };
    if variant.is_ensembled() {
        if plan.mode != SelectionMode::Blockwise {
            return Err(config_err!("ensembled variants replace whole blocks and need a blockwise plan"));
        }
        return plan
            .blocks
            .iter()
            .map(|&b| {
                let shape: Vec<usize> = if variant.is_depthwise() { vec![k, k, cfg.d_head] } else { vec![k, k] };
                Ok(DropinParams::Block(EnsembleParams {
                    variant,
                    gamma: Tensor::zeros(&[cfg.n_heads]),
                    kernel: seeded_fill(&shape, named_seed(seed, &block_kernel_name(b)), dist)?,
                }))
            })
            .collect();
    }
    plan.heads
        .iter()
        .map(|t| {
            let name_seed = named_seed(seed, &head_kernel_name(t.block, t.head));
            let kernel = match (variant, shared) {
                (Variant::ConvFull, _) => HeadKernel::Shared(seeded_fill(&[k, k], name_seed, dist)?),
                (_, true) => HeadKernel::Depthwise(replicate_channels(&seeded_fill(&[k, k], name_seed, dist)?, cfg.d_head)?),
                (_, false) => HeadKernel::Depthwise(seeded_fill(&[k, k, cfg.d_head], name_seed, dist)?),
            };
            Ok(DropinParams::Head(kernel))
        })
        .collect()
}

/// Copies a `k x k` kernel into every channel of a `k x k x c` kernel.
pub fn replicate_channels(kernel: &Tensor, channels: usize) -> Result<Tensor> {
    let (kh, kw) = kernel.dims2()?;
    let data = kernel.data().iter().flat_map(|&v| std::iter::repeat(v).take(channels)).collect();
    Tensor::new(&[kh, kw, channels], data)
}

/// Energy matrix on an `m x m` grid that satisfies locality, translation
/// invariance and input invariance for the given `k x k` kernel:
/// `E[(i,j),(i+dy,j+dx)] = K[dy][dx]` for on-grid targets, zero elsewhere.
pub fn conv_like_energy(kernel: &Tensor, grid: usize) -> Result<Tensor> {
    let (k, k2) = kernel.dims2()?;
    if k != k2 {
        return Err(shape_err!("kernel must be square"));
    }
    let shifts = ShiftSet::new(k)?;
    let n = grid * grid;
    let mut e = vec![0.0f32; n * n];
    for i in 0..grid {
        for j in 0..grid {
            for (tap, &(dy, dx)) in shifts.offsets().iter().enumerate() {
                if let Some((u, v)) = shifted(i, j, dy, dx, grid, grid) {
                    e[(i * grid + j) * n + u * grid + v] = kernel.data()[tap];
                }
            }
        }
    }
    Tensor::new(&[n, n], e)
}

/// Reads the `k x k` kernel of a conv-like energy matrix at the grid centre.
pub fn read_shared_kernel(energy: &Tensor, grid: usize, k: usize) -> Result<Tensor> {
    let shifts = ShiftSet::new(k)?;
    let n = grid * grid;
    if energy.shape() != [n, n] {
        return Err(shape_err!("energy {:?} does not match a {grid}x{grid} grid", energy.shape()));
    }
    let c = grid / 2;
    let data = shifts
        .offsets()
        .iter()
        .map(|&(dy, dx)| {
            shifted(c, c, dy, dx, grid, grid)
                .map(|(u, v)| energy.data()[(c * grid + c) * n + u * grid + v])
                .ok_or_else(|| config_err!("grid {grid} too small for kernel {k}"))
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(&[k, k], data)
}

// ---------------------------------------------------------------------------
// Least-squares fitting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct KernelFit {
    pub kernel: Tensor,
    /// Sum of squared residuals with the fitted kernel.
    pub objective: f64,
    /// Sum of squared residuals with the zero kernel.
    pub zero_objective: f64,
    /// Number of normal systems that needed the ridge fallback.
    pub ridged: usize,
}

fn check_pairs(values: &[Tensor], targets: &[Tensor]) -> Result<(usize, usize, usize)> {
    let first = values.first().ok_or(Error::Empty("fit samples"))?;
    if values.len() != targets.len() {
        return Err(shape_err!("{} value grids vs {} targets", values.len(), targets.len()));
    }
    let dims = first.dims3()?;
    for v in values {
        if v.dims3()? != dims {
            return Err(shape_err!("value grids must share a shape"));
        }
    }
    Ok(dims)
}

/// Shifted value features at one position: `feat[tap * c + ch]`.
fn gather_taps(v: &Tensor, shifts: &ShiftSet, i: usize, j: usize, feat: &mut [f64]) {
    let (rows, cols, c) = v.dims3().expect("grid");
    feat.fill(0.0);
    for (tap, &(dy, dx)) in shifts.offsets().iter().enumerate() {
        if let Some((y, x)) = shifted(i, j, dy, dx, rows, cols) {
            let src = &v.data()[(y * cols + x) * c..(y * cols + x + 1) * c];
            for (f, &s) in feat[tap * c..(tap + 1) * c].iter_mut().zip(src) {
                *f = s as f64;
            }
        }
    }
}

/// Loss `sum ||T - Conv_DW(V, K)||_F^2` over samples and its gradient with
/// respect to `K` (`k x k x c`). Evaluated in `f64`.
pub fn fit_loss_and_grad(kernel: &Tensor, values: &[Tensor], targets: &[Tensor]) -> Result<(f64, Tensor)> {
    let (rows, cols, c) = check_pairs(values, targets)?;
    let (k, _, kc) = kernel.dims3()?;
    if kc != c {
        return Err(shape_err!("kernel has {kc} channels, values have {c}"));
    }
    let shifts = ShiftSet::new(k)?;
    let taps = shifts.len();
    let kd: Vec<f64> = kernel.data().iter().map(|&v| v as f64).collect();
    let mut grad = vec![0.0f64; taps * c];
    let mut loss = 0.0f64;
    let mut feat = vec![0.0f64; taps * c];
    for (v, t) in values.iter().zip(targets) {
        if t.len() != rows * cols * c {
            return Err(shape_err!("target {:?} does not match values", t.shape()));
        }
        for i in 0..rows {
            for j in 0..cols {
                gather_taps(v, &shifts, i, j, &mut feat);
                let tgt = &t.data()[(i * cols + j) * c..(i * cols + j + 1) * c];
                for ch in 0..c {
                    let pred: f64 = (0..taps).map(|tap| kd[tap * c + ch] * feat[tap * c + ch]).sum();
                    let resid = tgt[ch] as f64 - pred;
                    loss += resid * resid;
                    for tap in 0..taps {
                        grad[tap * c + ch] -= 2.0 * resid * feat[tap * c + ch];
                    }
                }
            }
        }
    }
    let grad = Tensor::new(kernel.shape(), grad.into_iter().map(|g| g as f32).collect())?;
    Ok((loss, grad))
}

fn squared_norm(ts: &[Tensor]) -> f64 {
    ts.iter().flat_map(|t| t.data()).map(|&v| (v as f64).powi(2)).sum()
}

/// Exact per-channel least squares for a depthwise kernel: for each channel,
/// solves the `k^2 x k^2` normal equations of
/// `min_K sum ||T[.., c] - Conv_DW(V, K)[.., c]||^2`.
///
/// `values` and `targets` are `m x m x c` grids.
pub fn fit_depthwise(values: &[Tensor], targets: &[Tensor], k: usize) -> Result<KernelFit> {
    let (rows, cols, c) = check_pairs(values, targets)?;
    let shifts = ShiftSet::new(k)?;
    let taps = shifts.len();
    let mut systems = vec![NormalEquations::new(taps); c];
    let mut feat = vec![0.0f64; taps * c];
    let mut f = vec![0.0f64; taps];
    for (v, t) in values.iter().zip(targets) {
        if t.len() != rows * cols * c {
            return Err(shape_err!("target {:?} does not match values", t.shape()));
        }
        for i in 0..rows {
            for j in 0..cols {
                gather_taps(v, &shifts, i, j, &mut feat);
                for (ch, system) in systems.iter_mut().enumerate() {
                    for tap in 0..taps {
                        f[tap] = feat[tap * c + ch];
                    }
                    system.add(&f, t.data()[(i * cols + j) * c + ch] as f64);
                }
            }
        }
    }
    let mut kernel = vec![0.0f32; taps * c];
    let mut ridged = 0;
    for (ch, system) in systems.iter().enumerate() {
        let sol = system.solve();
        ridged += sol.ridged as usize;
        for tap in 0..taps {
            kernel[tap * c + ch] = sol.x[tap] as f32;
        }
    }
    let kernel = Tensor::new(&[k, k, c], kernel)?;
    let (objective, _) = fit_loss_and_grad(&kernel, values, targets)?;
    Ok(KernelFit {
        kernel,
        objective,
        zero_objective: squared_norm(targets),
        ridged,
    })
}

/// Normal equations for convolutions followed by an optional output mixing
/// matrix `W` (`c x d`): minimises `sum ||T - U W||^2` where `U` is the
/// depthwise (or channel-shared) convolution of `V`. Targets are passed
/// pre-multiplied as `R = T W^T` together with the Gram matrix `G = W W^T`;
/// without `W` both reduce to the identity case.
fn solve_mixed(values: &[Tensor], rtargets: &[Tensor], gram: Option<&[f64]>, k: usize, shared: bool) -> Result<Solution> {
    let (rows, cols, c) = check_pairs(values, rtargets)?;
    let shifts = ShiftSet::new(k)?;
    let taps = shifts.len();
    let dim = if shared { taps } else { taps * c };
    let g = |a: usize, b: usize| match gram {
        Some(g) => g[a * c + b],
        None => (a == b) as u8 as f64,
    };
    let mut ne = NormalEquations::new(dim);
    let mut feat = vec![0.0f64; taps * c];
    for (v, r) in values.iter().zip(rtargets) {
        for i in 0..rows {
            for j in 0..cols {
                gather_taps(v, &shifts, i, j, &mut feat);
                let rt = &r.data()[(i * cols + j) * c..(i * cols + j + 1) * c];
                for t1 in 0..taps {
                    for c1 in 0..c {
                        let f1 = feat[t1 * c + c1];
                        if f1 == 0.0 {
                            continue;
                        }
                        let row = if shared { t1 } else { t1 * c + c1 };
                        ne.add_rhs(row, f1 * rt[c1] as f64);
                        for t2 in 0..taps {
                            for c2 in 0..c {
                                let gv = g(c1, c2);
                                if gv == 0.0 {
                                    continue;
                                }
                                let col = if shared { t2 } else { t2 * c + c2 };
                                ne.add_matrix(row, col, f1 * feat[t2 * c + c2] * gv);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ne.solve())
}

/// Least-squares `k x k` kernel shared across channels:
/// `min_K sum ||T - sum_o K_o shift_o(V)||^2`.
pub fn fit_shared(values: &[Tensor], targets: &[Tensor], k: usize) -> Result<KernelFit> {
    let (_, _, c) = check_pairs(values, targets)?;
    let sol = solve_mixed(values, targets, None, k, true)?;
    let kernel = Tensor::new(&[k, k], sol.x.iter().map(|&v| v as f32).collect())?;
    let (objective, _) = fit_loss_and_grad(&replicate_channels(&kernel, c)?, values, targets)?;
    Ok(KernelFit {
        kernel,
        objective,
        zero_objective: squared_norm(targets),
        ridged: sol.ridged as usize,
    })
}

fn mixed_objective(values: &[Tensor], targets: &[Tensor], conv_kernel: &Tensor, w_oe: &Tensor) -> Result<f64> {
    let mut total = 0.0;
    for (v, t) in values.iter().zip(targets) {
        let (rows, cols, c) = v.dims3()?;
        let u = dwconv2d(v, conv_kernel)?.reshape(&[rows * cols, c])?;
        let y = matmul(&u, w_oe)?;
        total += t
            .data()
            .iter()
            .zip(y.data())
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>();
    }
    Ok(total)
}

/// Least-squares kernel for an ensembled block: targets are `n x d` block
/// attention outputs, `values` the `m x m x d_h` grids of `X W^{Ve}`.
pub fn fit_ensembled(values: &[Tensor], targets: &[Tensor], w_oe: &Tensor, k: usize, depthwise: bool) -> Result<KernelFit> {
    let (rows, cols, c) = check_pairs(values, targets)?;
    let w_t = w_oe.transpose()?;
    let gram: Vec<f64> = {
        let (wc, d) = w_oe.dims2()?;
        if wc != c {
            return Err(shape_err!("W_Oe has {wc} rows, values have {c} channels"));
        }
        let wd = w_oe.data();
        let mut g = vec![0.0; c * c];
        for a in 0..c {
            for b in 0..c {
                g[a * c + b] = (0..d).map(|j| wd[a * d + j] as f64 * wd[b * d + j] as f64).sum();
            }
        }
        g
    };
    let rtargets = targets
        .iter()
        .map(|t| matmul(t, &w_t)?.reshape(&[rows, cols, c]))
        .collect::<Result<Vec<_>>>()?;
    let sol = solve_mixed(values, &rtargets, Some(&gram), k, !depthwise)?;
    let flat: Vec<f32> = sol.x.iter().map(|&v| v as f32).collect();
    let (kernel, conv_kernel) = if depthwise {
        let t = Tensor::new(&[k, k, c], flat)?;
        (t.clone(), t)
    } else {
        let t = Tensor::new(&[k, k], flat)?;
        let rep = replicate_channels(&t, c)?;
        (t, rep)
    };
    Ok(KernelFit {
        objective: mixed_objective(values, targets, &conv_kernel, w_oe)?,
        zero_objective: squared_norm(targets),
        kernel,
        ridged: sol.ridged as usize,
    })
}

/// Plain gradient descent on [`fit_loss_and_grad`]; exists to exercise the
/// analytic gradient, the closed form in [`fit_depthwise`] is what the
/// pipeline uses.
pub fn descend_depthwise(init: &Tensor, values: &[Tensor], targets: &[Tensor], steps: usize, step_size: f32) -> Result<Tensor> {
    let mut kernel = init.clone();
    for _ in 0..steps {
        let (_, grad) = fit_loss_and_grad(&kernel, values, targets)?;
        kernel = kernel.axpby(1.0, &grad, -step_size)?;
    }
    Ok(kernel)
}

/// Fits the kernel of one head against the teacher's current output for that
/// head. Values and targets come from running `teacher` on `samples`.
pub fn fit_kernels(teacher: &HybridModel, target: HeadRef, samples: &[Tensor], depthwise: bool) -> Result<KernelFit> {
    if samples.is_empty() {
        return Err(Error::Empty("fit_kernels needs at least one sample"));
    }
    let inputs = samples
        .iter()
        .map(|x| Ok(teacher.attention_inputs(x)?.swap_remove(target.block)))
        .collect::<Result<Vec<_>>>()?;
    fit_head_from_inputs(teacher, target, &inputs, depthwise)
}

fn fit_head_from_inputs(teacher: &HybridModel, target: HeadRef, inputs: &[Tensor], depthwise: bool) -> Result<KernelFit> {
    let cfg = teacher.config();
    let m = cfg.grid;
    let block = teacher
        .base
        .blocks
        .get(target.block)
        .ok_or_else(|| config_err!("block {} out of range", target.block))?;
    let value_slice = block.value_slice(target.head)?;
    let mut values = Vec::with_capacity(inputs.len());
    let mut targets = Vec::with_capacity(inputs.len());
    for z in inputs {
        values.push(matmul(z, &value_slice)?.reshape(&[m, m, cfg.d_head])?);
        targets.push(teacher.head_output(z, target.block, target.head)?.reshape(&[m, m, cfg.d_head])?);
    }
    if depthwise {
        fit_depthwise(&values, &targets, cfg.kernel)
    } else {
        fit_shared(&values, &targets, cfg.kernel)
    }
}

fn fit_block_from_inputs(teacher: &HybridModel, b: usize, inputs: &[Tensor], variant: Variant, gamma: &Tensor) -> Result<KernelFit> {
    let cfg = teacher.config();
    let m = cfg.grid;
    let block = &teacher.base.blocks[b];
    let (w_ve, w_oe) = ensemble_weights(gamma, block)?;
    let mut values = Vec::with_capacity(inputs.len());
    let mut targets = Vec::with_capacity(inputs.len());
    for z in inputs {
        values.push(matmul(z, &w_ve)?.reshape(&[m, m, cfg.d_head])?);
        targets.push(block_attention(z, block, &teacher.ops[b], m)?);
    }
    fit_ensembled(&values, &targets, &w_oe, cfg.kernel, variant.is_depthwise())
}

/// Fitted replacement parameters for every plan target, plus one fit record
/// per target. Ensembled blocks use `gamma = 0`.
pub fn fit_params(teacher: &HybridModel, plan: &SelectionPlan, variant: Variant, samples: &[Tensor]) -> Result<(Vec<DropinParams>, Vec<KernelFit>)> {
    if samples.is_empty() {
        return Err(Error::Empty("fitting needs at least one sample"));
    }
    let cfg = teacher.config().clone();
    plan.validate(&cfg)?;
    // Per-block attention inputs, gathered once per sample.
    let mut inputs: Vec<Vec<Tensor>> = vec![Vec::with_capacity(samples.len()); cfg.n_blocks];
    for x in samples {
        for (b, z) in teacher.attention_inputs(x)?.into_iter().enumerate() {
            inputs[b].push(z);
        }
    }
    let mut params = Vec::new();
    let mut fits = Vec::new();
    if variant.is_ensembled() {
        if plan.mode != SelectionMode::Blockwise {
            return Err(config_err!("ensembled variants replace whole blocks and need a blockwise plan"));
        }
        let gamma = Tensor::zeros(&[cfg.n_heads]);
        for &b in &plan.blocks {
            let fit = fit_block_from_inputs(teacher, b, &inputs[b], variant, &gamma)?;
            params.push(DropinParams::Block(EnsembleParams {
                variant,
                gamma: gamma.clone(),
                kernel: fit.kernel.clone(),
            }));
            fits.push(fit);
        }
    } else {
        for &t in &plan.heads {
            let fit = fit_head_from_inputs(teacher, t, &inputs[t.block], variant.is_depthwise())?;
            params.push(DropinParams::Head(if variant.is_depthwise() {
                HeadKernel::Depthwise(fit.kernel.clone())
            } else {
                HeadKernel::Shared(fit.kernel.clone())
            }));
            fits.push(fit);
        }
    }
    Ok((params, fits))
}
