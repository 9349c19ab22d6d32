//! Exact ViT forward path: per-head projections, attention energies,
//! multi-head self-attention and pre-norm residual blocks.
//!
//! Tokens are laid out row-major over an `m x m` grid, so an `n x c` token
//! matrix and an `m x m x c` feature map share the same buffer.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::tensor::{derive_seed, matmul, matmul_nt, named_seed, seeded_fill, softmax_rows, Distribution, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    /// Grid side `m`; the token count is `m * m`.
    pub grid: usize,
    /// Replacement kernel size.
    pub kernel: usize,
    pub ffn_mult: usize,
    #[serde(default = "default_pre_norm")]
    pub pre_norm: bool,
}

fn default_pre_norm() -> bool {
    true
}

impl ModelConfig {
    /// The default desk-scale model.
    pub fn desk() -> Self {
        ModelConfig {
            n_blocks: 6,
            n_heads: 4,
            d_model: 64,
            d_head: 16,
            grid: 8,
            kernel: 3,
            ffn_mult: 4,
            pre_norm: true,
        }
    }

    /// ViT-Large-like shape at a 24x24 token grid. Used for cost accounting
    /// and single-block benchmarks.
    pub fn vitl_shape() -> Self {
        ModelConfig {
            n_blocks: 24,
            n_heads: 16,
            d_model: 1024,
            d_head: 64,
            grid: 24,
            kernel: 3,
            ffn_mult: 4,
            pre_norm: true,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "vitl-shape" => Some(Self::vitl_shape()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.n_heads == 0 || self.d_head == 0 || self.grid == 0 {
            return Err(config_err!("block, head, head-dim and grid sizes must be positive"));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(config_err!(
                "d_model ({}) must equal n_heads * d_head ({} * {})",
                self.d_model,
                self.n_heads,
                self.d_head
            ));
        }
        if self.kernel % 2 == 0 {
            return Err(config_err!("kernel size must be odd, got {}", self.kernel));
        }
        if self.grid < self.kernel {
            return Err(config_err!("grid ({}) must be >= kernel ({})", self.grid, self.kernel));
        }
        if self.ffn_mult == 0 {
            return Err(config_err!("ffn_mult must be positive"));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    pub fn total_heads(&self) -> usize {
        self.n_blocks * self.n_heads
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_mult * self.d_model
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub scale: Tensor,
    pub shift: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Weights of one transformer block. Head `h` owns columns
/// `[h*d_h, (h+1)*d_h)` of `w_q`, `w_k`, `w_v` and the same row range of `w_o`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub n_heads: usize,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ffn: FeedForward,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub pre_norm: bool,
}

impl BlockParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let hidden = cfg.ffn_hidden();
        let gauss = Distribution::Gaussian {
            mean: 0.0,
            std: 1.0 / (d as f32).sqrt(),
        };
        let w = |name: &str, shape: &[usize]| seeded_fill(shape, named_seed(seed, name), gauss);
        Ok(BlockParams {
            n_heads: cfg.n_heads,
            w_q: w("w_q", &[d, d])?,
            w_k: w("w_k", &[d, d])?,
            w_v: w("w_v", &[d, d])?,
            w_o: w("w_o", &[d, d])?,
            ffn: FeedForward {
                w1: w("ffn.w1", &[d, hidden])?,
                b1: Tensor::zeros(&[hidden]),
                w2: w("ffn.w2", &[hidden, d])?,
                b2: Tensor::zeros(&[d]),
            },
            norm1: LayerNorm::identity(d),
            norm2: LayerNorm::identity(d),
            pre_norm: cfg.pre_norm,
        })
    }

    pub fn d_model(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn d_head(&self) -> usize {
        self.d_model() / self.n_heads
    }

    fn check_head(&self, h: usize) -> Result<()> {
        if h >= self.n_heads {
            return Err(config_err!("head index {h} out of range (n_heads = {})", self.n_heads));
        }
        Ok(())
    }

    /// `W_V[:, h, :]`, shaped `d x d_h`.
    pub fn value_slice(&self, h: usize) -> Result<Tensor> {
        self.check_head(h)?;
        let dh = self.d_head();
        self.w_v.columns(h * dh, (h + 1) * dh)
    }

    /// Row group `h` of `W_O`, shaped `d_h x d`.
    pub fn output_group(&self, h: usize) -> Result<Tensor> {
        self.check_head(h)?;
        let dh = self.d_head();
        self.w_o.rows(h * dh, (h + 1) * dh)
    }
}

impl LayerNorm {
    pub fn identity(d: usize) -> Self {
        LayerNorm {
            scale: Tensor::full(&[d], 1.0),
            shift: Tensor::zeros(&[d]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, d) = x.dims2()?;
        if self.scale.len() != d || self.shift.len() != d {
            return Err(shape_err!("layer norm width {} vs input width {d}", self.scale.len()));
        }
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks_exact(d) {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for ((&v, &g), &b) in row.iter().zip(self.scale.data()).zip(self.shift.data()) {
                out.push(((v as f64 - mean) * inv) as f32 * g + b);
            }
        }
        Tensor::new(x.shape(), out)
    }
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, c) = x.dims2()?;
    if bias.len() != c {
        return Err(shape_err!("bias width {} vs {c}", bias.len()));
    }
    let data = x
        .data()
        .chunks_exact(c)
        .flat_map(|row| row.iter().zip(bias.data()).map(|(&v, &b)| v + b))
        .collect();
    Tensor::new(x.shape(), data)
}

impl FeedForward {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let hidden = add_bias(&matmul(x, &self.w1)?, &self.b1)?.map("gelu", gelu)?;
        add_bias(&matmul(&hidden, &self.w2)?, &self.b2)
    }
}

/// Query, key and value of head `h`: `X W[:, h, :]` for each projection.
pub fn qkv_project(x: &Tensor, block: &BlockParams, h: usize) -> Result<(Tensor, Tensor, Tensor)> {
    block.check_head(h)?;
    let dh = block.d_head();
    let cols = (h * dh, (h + 1) * dh);
    let q = matmul(x, &block.w_q.columns(cols.0, cols.1)?)?;
    let k = matmul(x, &block.w_k.columns(cols.0, cols.1)?)?;
    let v = matmul(x, &block.w_v.columns(cols.0, cols.1)?)?;
    Ok((q, k, v))
}

/// Row-stochastic energy matrix `softmax(Q K^T / sqrt(d_h))`.
pub fn head_energy(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (_, dh) = q.dims2()?;
    let logits = matmul_nt(q, k)?.scale(1.0 / (dh as f32).sqrt())?;
    softmax_rows(&logits)
}

/// One head's output together with its energy matrix.
pub fn head_attention_with_energy(x: &Tensor, block: &BlockParams, h: usize) -> Result<(Tensor, Tensor)> {
    let (q, k, v) = qkv_project(x, block, h)?;
    let energy = head_energy(&q, &k)?;
    let out = matmul(&energy, &v)?;
    Ok((out, energy))
}

pub fn head_attention(x: &Tensor, block: &BlockParams, h: usize) -> Result<Tensor> {
    Ok(head_attention_with_energy(x, block, h)?.0)
}

/// Attention written over grid coordinates: output `(i, j)` is the
/// energy-weighted sum of every value position `(u, v)` on the grid.
pub fn explicit_attention(energy: &Tensor, values: &Tensor) -> Result<Tensor> {
    let (rows, cols, dh) = values.dims3()?;
    let n = rows * cols;
    if energy.shape() != [n, n] {
        return Err(shape_err!(
            "energy {:?} does not match a {rows}x{cols} grid",
            energy.shape()
        ));
    }
    let e = energy.data();
    let v = values.data();
    let mut out = vec![0.0f32; n * dh];
    for i in 0..rows {
        for j in 0..cols {
            let query = i * cols + j;
            let acc = &mut out[query * dh..(query + 1) * dh];
            for u in 0..rows {
                for w in 0..cols {
                    let key = u * cols + w;
                    let weight = e[query * n + key];
                    for (o, &val) in acc.iter_mut().zip(&v[key * dh..(key + 1) * dh]) {
                        *o += weight * val;
                    }
                }
            }
        }
    }
    Tensor::new(&[rows, cols, dh], out)
}

/// Multi-head self-attention: concatenated heads times `W_O`. The observer,
/// if any, sees each head's energy matrix in head order.
pub fn mhsa_forward_observed(
    x: &Tensor,
    block: &BlockParams,
    mut observe: Option<&mut dyn FnMut(usize, &Tensor)>,
) -> Result<Tensor> {
    let mut heads = Vec::with_capacity(block.n_heads);
    for h in 0..block.n_heads {
        let (out, energy) = head_attention_with_energy(x, block, h)?;
        if let Some(f) = observe.as_mut() {
            f(h, &energy);
        }
        heads.push(out);
    }
    matmul(&Tensor::hconcat(&heads)?, &block.w_o)
}

pub fn mhsa_forward(x: &Tensor, block: &BlockParams) -> Result<Tensor> {
    mhsa_forward_observed(x, block, None)
}

/// `sum_h Att^h(X) W_O[h-th row group]`, algebraically equal to
/// [`mhsa_forward`].
pub fn mhsa_forward_head_sum(x: &Tensor, block: &BlockParams) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for h in 0..block.n_heads {
        let part = matmul(&head_attention(x, block, h)?, &block.output_group(h)?)?;
        total = Some(match total {
            None => part,
            Some(acc) => acc.add(&part)?,
        });
    }
    Ok(total.expect("n_heads >= 1"))
}

/// Pre-norm residual block with a caller-supplied attention sublayer:
/// `X + attn(norm1(X))`, then `+ FFN(norm2(.))`.
pub fn block_forward_with(
    x: &Tensor,
    block: &BlockParams,
    attention: impl FnOnce(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let normed = if block.pre_norm { block.norm1.forward(x)? } else { x.clone() };
    let x = x.add(&attention(&normed)?)?;
    let normed = if block.pre_norm { block.norm2.forward(&x)? } else { x.clone() };
    x.add(&block.ffn.forward(&normed)?)
}

pub fn block_forward(x: &Tensor, block: &BlockParams) -> Result<Tensor> {
    block_forward_with(x, block, |h| mhsa_forward(h, block))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// Additive positional table, `n x d`, applied once at the input.
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockParams>,
}

impl Model {
    /// Seeded model with `gaussian(0, 1/sqrt(d))` weights. Block `b` draws
    /// from `derive_seed(seed, b)`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let pos_embed = seeded_fill(
            &[config.tokens(), config.d_model],
            named_seed(seed, "pos_embed"),
            Distribution::Gaussian {
                mean: 0.0,
                std: 1.0 / (config.d_model as f32).sqrt(),
            },
        )?;
        let blocks = (0..config.n_blocks)
            .map(|b| BlockParams::init(config, derive_seed(seed, b as u64)))
            .collect::<Result<_>>()?;
        Ok(Model {
            config: config.clone(),
            pos_embed,
            blocks,
        })
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let expect = [self.config.tokens(), self.config.d_model];
        if x.shape() != expect {
            return Err(shape_err!("model input {:?}, expected {expect:?}", x.shape()));
        }
        Ok(())
    }
}

/// Runs the model, reporting every `(block, head, energy)` to the observer.
pub fn model_forward_observed(
    x: &Tensor,
    model: &Model,
    observe: &mut dyn FnMut(usize, usize, &Tensor),
) -> Result<Tensor> {
    model.check_input(x)?;
    let mut x = x.add(&model.pos_embed)?;
    for (b, block) in model.blocks.iter().enumerate() {
        let mut per_head = |h: usize, e: &Tensor| observe(b, h, e);
        x = block_forward_with(&x, block, |normed| {
            mhsa_forward_observed(normed, block, Some(&mut per_head))
        })?;
    }
    Ok(x)
}

pub fn model_forward(x: &Tensor, model: &Model) -> Result<Tensor> {
    model.check_input(x)?;
    let mut x = x.add(&model.pos_embed)?;
    for block in &model.blocks {
        x = block_forward(&x, block)?;
    }
    Ok(x)
}

/// Seeded `gaussian(0, 1)` token grids; sample `i` uses `derive_seed(seed, i)`.
pub fn synthetic_inputs(cfg: &ModelConfig, count: usize, seed: u64) -> Result<Vec<Tensor>> {
    (0..count)
        .map(|i| {
            seeded_fill(
                &[cfg.tokens(), cfg.d_model],
                derive_seed(seed, i as u64),
                Distribution::Gaussian { mean: 0.0, std: 1.0 },
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn small_cfg(n_heads: usize, d_head: usize, grid: usize) -> ModelConfig {
        ModelConfig {
            n_blocks: 2,
            n_heads,
            d_model: n_heads * d_head,
            d_head,
            grid,
            kernel: grid.min(3) | 1,
            ffn_mult: 2,
            pre_norm: true,
        }
    }

    fn input(cfg: &ModelConfig, seed: u64) -> Tensor {
        synthetic_inputs(cfg, 1, seed).unwrap().pop().unwrap()
    }

    fn zero_block(cfg: &ModelConfig) -> BlockParams {
        let d = cfg.d_model;
        let hidden = cfg.ffn_hidden();
        BlockParams {
            n_heads: cfg.n_heads,
            w_q: Tensor::zeros(&[d, d]),
            w_k: Tensor::zeros(&[d, d]),
            w_v: Tensor::zeros(&[d, d]),
            w_o: Tensor::zeros(&[d, d]),
            ffn: FeedForward {
                w1: Tensor::zeros(&[d, hidden]),
                b1: Tensor::zeros(&[hidden]),
                w2: Tensor::zeros(&[hidden, d]),
                b2: Tensor::zeros(&[d]),
            },
            norm1: LayerNorm::identity(d),
            norm2: LayerNorm::identity(d),
            pre_norm: false,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::desk().validate().is_ok());
        assert!(ModelConfig::vitl_shape().validate().is_ok());
        let mut bad = ModelConfig::desk();
        bad.d_head = 15;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad = ModelConfig::desk();
        bad.kernel = 4;
        assert!(bad.validate().is_err());
        let mut bad = ModelConfig::desk();
        bad.grid = 2;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn qkv_zero_input_and_selector_weights() {
        let cfg = small_cfg(2, 3, 3);
        let block = BlockParams::init(&cfg, 1).unwrap();
        let (q, k, v) = qkv_project(&Tensor::zeros(&[9, 6]), &block, 1).unwrap();
        for t in [q, k, v] {
            assert!(t.data().iter().all(|&x| x == 0.0));
        }
        // Head 0 query slice selects the first d_h input columns.
        let mut w_q = vec![0.0; 36];
        for i in 0..3 {
            w_q[i * 6 + i] = 1.0;
        }
        let block = BlockParams {
            w_q: Tensor::new(&[6, 6], w_q).unwrap(),
            ..block
        };
        let x = input(&cfg, 2);
        let (q, _, _) = qkv_project(&x, &block, 0).unwrap();
        assert!(q.bitwise_eq(&x.columns(0, 3).unwrap()));
        assert!(matches!(qkv_project(&x, &block, 2), Err(Error::Config(_))));
    }

    #[test]
    fn qkv_matches_slice_then_matmul() {
        let cfg = small_cfg(4, 4, 4);
        let block = BlockParams::init(&cfg, 3).unwrap();
        let x = input(&cfg, 4);
        for h in 0..4 {
            let (q, k, v) = qkv_project(&x, &block, h).unwrap();
            let full_q = matmul(&x, &block.w_q).unwrap().columns(h * 4, h * 4 + 4).unwrap();
            let full_k = matmul(&x, &block.w_k).unwrap().columns(h * 4, h * 4 + 4).unwrap();
            assert!(q.max_abs_diff(&full_q).unwrap() < 1e-6);
            assert!(k.max_abs_diff(&full_k).unwrap() < 1e-6);
            assert!(v.bitwise_eq(&matmul(&x, &block.value_slice(h).unwrap()).unwrap()));
        }
    }

    #[test]
    fn energy_is_uniform_for_zero_query_or_key() {
        let q = Tensor::zeros(&[5, 3]);
        let k = crate::tensor::seeded_fill(&[5, 3], 1, Distribution::Gaussian { mean: 0.0, std: 1.0 }).unwrap();
        for e in [head_energy(&q, &k).unwrap(), head_energy(&k, &q).unwrap()] {
            assert!(e.data().iter().all(|&v| (v - 0.2).abs() < 1e-7));
        }
    }

    #[test]
    fn energy_matches_two_step_oracle() {
        let g = |s| crate::tensor::seeded_fill(&[4, 3], s, Distribution::Gaussian { mean: 0.0, std: 1.0 }).unwrap();
        let (q, k) = (g(5), g(6));
        let e = head_energy(&q, &k).unwrap();
        for i in 0..4 {
            let logits: Vec<f64> = (0..4)
                .map(|j| (0..3).map(|t| q.at(&[i, t]) as f64 * k.at(&[j, t]) as f64).sum::<f64>() / 3f64.sqrt())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for j in 0..4 {
                assert!((e.at(&[i, j]) as f64 - logits[j].exp() / z).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn uniform_energy_averages_values_and_single_token_passes_through() {
        let cfg = small_cfg(2, 3, 3);
        let mut block = BlockParams::init(&cfg, 7).unwrap();
        block.w_q = Tensor::zeros(&[6, 6]);
        let x = input(&cfg, 8);
        let out = head_attention(&x, &block, 1).unwrap();
        let (_, _, v) = qkv_project(&x, &block, 1).unwrap();
        for c in 0..3 {
            let mean = (0..9).map(|r| v.at(&[r, c]) as f64).sum::<f64>() / 9.0;
            for r in 0..9 {
                assert!((out.at(&[r, c]) as f64 - mean).abs() < 1e-6);
            }
        }

        let one = small_cfg(2, 3, 1);
        let block = BlockParams::init(&one, 9).unwrap();
        let x = input(&one, 10);
        let (_, _, v) = qkv_project(&x, &block, 0).unwrap();
        assert!(head_attention(&x, &block, 0).unwrap().bitwise_eq(&v));
    }

    #[test]
    fn explicit_attention_examples() {
        let v = crate::tensor::seeded_fill(&[3, 3, 2], 11, Distribution::Gaussian { mean: 0.0, std: 1.0 }).unwrap();
        assert!(explicit_attention(&Tensor::eye(9), &v).unwrap().bitwise_eq(&v));
        let uniform = Tensor::full(&[9, 9], 1.0 / 9.0);
        let out = explicit_attention(&uniform, &v).unwrap();
        for c in 0..2 {
            let mean = (0..9).map(|p| v.data()[p * 2 + c]).sum::<f32>() / 9.0;
            for p in 0..9 {
                assert!((out.data()[p * 2 + c] - mean).abs() < 1e-6);
            }
        }
        assert!(matches!(
            explicit_attention(&Tensor::eye(8), &v),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn explicit_attention_matches_head_attention() {
        let cfg = small_cfg(2, 4, 5);
        let block = BlockParams::init(&cfg, 12).unwrap();
        let x = input(&cfg, 13);
        let (out, e) = head_attention_with_energy(&x, &block, 1).unwrap();
        let (_, _, v) = qkv_project(&x, &block, 1).unwrap();
        let grid = explicit_attention(&e, &v.reshape(&[5, 5, 4]).unwrap()).unwrap();
        assert!(grid.reshape(&[25, 4]).unwrap().max_abs_diff(&out).unwrap() <= 1e-6);
    }

    #[test]
    fn mhsa_identity_output_and_head_sum() {
        let cfg = small_cfg(2, 4, 3);
        let mut block = BlockParams::init(&cfg, 14).unwrap();
        let x = input(&cfg, 15);
        let concat = Tensor::hconcat(&[
            head_attention(&x, &block, 0).unwrap(),
            head_attention(&x, &block, 1).unwrap(),
        ])
        .unwrap();
        let a = mhsa_forward(&x, &block).unwrap();
        let b = mhsa_forward_head_sum(&x, &block).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-5);
        block.w_o = Tensor::eye(8);
        assert!(mhsa_forward(&x, &block).unwrap().bitwise_eq(&concat));
    }

    #[test]
    fn mhsa_single_head() {
        let cfg = small_cfg(1, 6, 3);
        let block = BlockParams::init(&cfg, 16).unwrap();
        let x = input(&cfg, 17);
        let expect = matmul(&head_attention(&x, &block, 0).unwrap(), &block.w_o).unwrap();
        assert!(mhsa_forward(&x, &block).unwrap().bitwise_eq(&expect));
    }

    #[test]
    fn zero_block_is_identity_residual() {
        let cfg = small_cfg(2, 4, 3);
        let mut model = Model::init(&cfg, 18).unwrap();
        model.blocks = vec![zero_block(&cfg), zero_block(&cfg)];
        let x = input(&cfg, 19);
        let y = model_forward(&x, &model).unwrap();
        assert!(y.bitwise_eq(&x.add(&model.pos_embed).unwrap()));
    }

    #[test]
    fn block_with_zero_ffn_is_attention_residual() {
        let cfg = small_cfg(2, 4, 3);
        let mut block = BlockParams::init(&cfg, 20).unwrap();
        block.ffn.w1 = Tensor::zeros(&[8, 16]);
        block.ffn.w2 = Tensor::zeros(&[16, 8]);
        let x = input(&cfg, 21);
        let expect = x.add(&mhsa_forward(&block.norm1.forward(&x).unwrap(), &block).unwrap()).unwrap();
        assert!(block_forward(&x, &block).unwrap().bitwise_eq(&expect));
    }

    #[test]
    fn model_is_composition_of_blocks() {
        let cfg = small_cfg(2, 4, 3);
        let model = Model::init(&cfg, 22).unwrap();
        let x = input(&cfg, 23);
        let manual = block_forward(
            &block_forward(&x.add(&model.pos_embed).unwrap(), &model.blocks[0]).unwrap(),
            &model.blocks[1],
        )
        .unwrap();
        assert!(model_forward(&x, &model).unwrap().bitwise_eq(&manual));
        let mut seen = Vec::new();
        let observed = model_forward_observed(&x, &model, &mut |b, h, e| {
            seen.push((b, h, e.shape().to_vec()));
        })
        .unwrap();
        assert!(observed.bitwise_eq(&manual));
        assert_eq!(seen.len(), 4);
        assert_eq!(seen[3], (1, 1, vec![9, 9]));
    }

    #[test]
    fn layer_norm_normalises_rows() {
        let x = crate::tensor::seeded_fill(&[3, 16], 24, Distribution::Gaussian { mean: 3.0, std: 2.0 }).unwrap();
        let y = LayerNorm::identity(16).forward(&x).unwrap();
        for row in y.data().chunks(16) {
            let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
