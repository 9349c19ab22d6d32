//! Single-file model archive.
//!
//! Layout: the magic `DWVTAR01`, a little-endian `u64` manifest length, the
//! JSON manifest, then every tensor as little-endian `f32` in manifest order.
//! Output is a pure function of the content, so identical runs write
//! identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dropin::{block_gamma_name, block_kernel_name, head_kernel_name, BlockOp, EnsembleParams, HeadKernel, HeadOp, HybridModel, Variant};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{BlockParams, FeedForward, LayerNorm, Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"DWVTAR01";
pub const FORMAT_VERSION: u32 = 1;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Provenance of an artifact: the command that produced it and its inputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Arguments as given, keyed by flag name.
    pub args: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArchiveContent {
    /// Shape only, for cost accounting without weights.
    ConfigOnly(ModelConfig),
    Model(HybridModel),
}

impl ArchiveContent {
    pub fn config(&self) -> &ModelConfig {
        match self {
            ArchiveContent::ConfigOnly(c) => c,
            ArchiveContent::Model(m) => m.config(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub content: ArchiveContent,
    pub run: RunManifest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Kind {
    ConfigOnly,
    Model,
    Hybrid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob, in `f32` elements.
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LayoutEntry {
    /// Per head: `"attention"`, `"convfull"` or `"dw"`.
    Heads { heads: Vec<String> },
    Ensembled { variant: Variant },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    kind: Kind,
    config: ModelConfig,
    #[serde(default)]
    layout: Vec<LayoutEntry>,
    #[serde(default)]
    tensors: Vec<TensorEntry>,
    run: RunManifest,
}

struct Writer {
    entries: Vec<TensorEntry>,
    blob: Vec<u8>,
    offset: usize,
}

impl Writer {
    fn push(&mut self, name: String, t: &Tensor) {
        self.entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: self.offset,
        });
        self.offset += t.len();
        for v in t.data() {
            self.blob.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn block_tensors(b: usize, block: &BlockParams) -> Vec<(String, &Tensor)> {
    vec![
        (format!("block{b}.w_q"), &block.w_q),
        (format!("block{b}.w_k"), &block.w_k),
        (format!("block{b}.w_v"), &block.w_v),
        (format!("block{b}.w_o"), &block.w_o),
        (format!("block{b}.ffn.w1"), &block.ffn.w1),
        (format!("block{b}.ffn.b1"), &block.ffn.b1),
        (format!("block{b}.ffn.w2"), &block.ffn.w2),
        (format!("block{b}.ffn.b2"), &block.ffn.b2),
        (format!("block{b}.norm1.scale"), &block.norm1.scale),
        (format!("block{b}.norm1.shift"), &block.norm1.shift),
        (format!("block{b}.norm2.scale"), &block.norm2.scale),
        (format!("block{b}.norm2.shift"), &block.norm2.shift),
    ]
}

pub fn to_bytes(archive: &Archive) -> Result<Vec<u8>> {
    let mut w = Writer {
        entries: Vec::new(),
        blob: Vec::new(),
        offset: 0,
    };
    let (kind, config, layout) = match &archive.content {
        ArchiveContent::ConfigOnly(cfg) => (Kind::ConfigOnly, cfg.clone(), Vec::new()),
        ArchiveContent::Model(m) => {
            m.validate()?;
            w.push("pos_embed".into(), &m.base.pos_embed);
            for (b, block) in m.base.blocks.iter().enumerate() {
                for (name, t) in block_tensors(b, block) {
                    w.push(name, t);
                }
            }
            let mut layout = Vec::new();
            for (b, op) in m.ops.iter().enumerate() {
                layout.push(match op {
                    BlockOp::Heads(heads) => {
                        let mut names = Vec::new();
                        for (h, op) in heads.iter().enumerate() {
                            names.push(match op {
                                HeadOp::Attention => "attention".to_string(),
                                HeadOp::Dropin(k) => {
                                    w.push(head_kernel_name(b, h), k.tensor());
                                    k.variant().name().to_string()
                                }
                            });
                        }
                        LayoutEntry::Heads { heads: names }
                    }
                    BlockOp::Ensembled(p) => {
                        w.push(block_gamma_name(b), &p.gamma);
                        w.push(block_kernel_name(b), &p.kernel);
                        LayoutEntry::Ensembled { variant: p.variant }
                    }
                });
            }
            let kind = if m.is_baseline() { Kind::Model } else { Kind::Hybrid };
            (kind, m.config().clone(), layout)
        }
    };
    let manifest = Manifest {
        format: "dwvit-archive".into(),
        version: FORMAT_VERSION,
        kind,
        config,
        layout,
        tensors: w.entries,
        run: archive.run.clone(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + w.blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&w.blob);
    Ok(out)
}

struct Reader<'a> {
    entries: std::collections::HashMap<&'a str, &'a TensorEntry>,
    blob: &'a [u8],
}

impl Reader<'_> {
    fn take(&self, name: &str) -> Result<Tensor> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| format_err(format!("missing tensor '{name}'")))?;
        let len: usize = e.shape.iter().product();
        let start = e.offset.checked_mul(4).ok_or_else(|| format_err("tensor offset overflow"))?;
        let end = start
            .checked_add(len * 4)
            .filter(|&end| end <= self.blob.len())
            .ok_or_else(|| format_err(format!("tensor '{name}' runs past the end of the archive")))?;
        let data = self.blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        Tensor::new(&e.shape, data).map_err(|err| format_err(format!("tensor '{name}': {err}")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Archive> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(format_err("not a dwvit archive (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json_end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| format_err("manifest length exceeds archive size"))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[16..json_end]).map_err(|e| format_err(format!("bad manifest: {e}")))?;
    if manifest.version != FORMAT_VERSION {
        return Err(format_err(format!("unsupported archive version {}", manifest.version)));
    }
    manifest.config.validate()?;
    let cfg = manifest.config.clone();
    if manifest.kind == Kind::ConfigOnly {
        return Ok(Archive {
            content: ArchiveContent::ConfigOnly(cfg),
            run: manifest.run,
        });
    }
    let r = Reader {
        entries: manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect(),
        blob: &bytes[json_end..],
    };
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for b in 0..cfg.n_blocks {
        let t = |suffix: &str| r.take(&format!("block{b}.{suffix}"));
        blocks.push(BlockParams {
            n_heads: cfg.n_heads,
            w_q: t("w_q")?,
            w_k: t("w_k")?,
            w_v: t("w_v")?,
            w_o: t("w_o")?,
            ffn: FeedForward {
                w1: t("ffn.w1")?,
                b1: t("ffn.b1")?,
                w2: t("ffn.w2")?,
                b2: t("ffn.b2")?,
            },
            norm1: LayerNorm {
                scale: t("norm1.scale")?,
                shift: t("norm1.shift")?,
            },
            norm2: LayerNorm {
                scale: t("norm2.scale")?,
                shift: t("norm2.shift")?,
            },
            pre_norm: cfg.pre_norm,
        });
    }
    let base = Model {
        config: cfg.clone(),
        pos_embed: r.take("pos_embed")?,
        blocks,
    };
    let mut model = HybridModel::from_model(base);
    if !manifest.layout.is_empty() {
        if manifest.layout.len() != cfg.n_blocks {
            return Err(format_err("layout does not cover every block"));
        }
        for (b, entry) in manifest.layout.iter().enumerate() {
            model.ops[b] = match entry {
                LayoutEntry::Heads { heads } => BlockOp::Heads(
                    heads
                        .iter()
                        .enumerate()
                        .map(|(h, name)| match name.as_str() {
                            "attention" => Ok(HeadOp::Attention),
                            "convfull" => Ok(HeadOp::Dropin(HeadKernel::Shared(r.take(&head_kernel_name(b, h))?))),
                            "dw" => Ok(HeadOp::Dropin(HeadKernel::Depthwise(r.take(&head_kernel_name(b, h))?))),
                            other => Err(format_err(format!("unknown head op '{other}'"))),
                        })
                        .collect::<Result<_>>()?,
                ),
                LayoutEntry::Ensembled { variant } => BlockOp::Ensembled(EnsembleParams {
                    variant: *variant,
                    gamma: r.take(&block_gamma_name(b))?,
                    kernel: r.take(&block_kernel_name(b))?,
                }),
            };
        }
    }
    model.validate().map_err(|e| format_err(e.to_string()))?;
    Ok(Archive {
        content: ArchiveContent::Model(model),
        run: manifest.run,
    })
}

pub fn write_archive(path: &Path, archive: &Archive) -> Result<()> {
    fs::write(path, to_bytes(archive)?)?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    from_bytes(&fs::read(path)?)
}
