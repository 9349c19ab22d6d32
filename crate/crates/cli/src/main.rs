//! `dwvit`: generate, score, plan, replace, verify, cost, bench and gate.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or configuration
//! error, 3 I/O or format error.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use dwvit_core::archive::{read_archive, write_archive, Archive, ArchiveContent, RunManifest};
use dwvit_core::cost::{
    bench_block, bench_model, budget_sweep, cost_report, hybrid_cost_report, model_cost_report, plan_layouts, variant_table,
    BlockLayout, CostVariant,
};
use dwvit_core::dropin::{
    attn_conv_full, attn_dw, conv_like_energy, fit_params, fold_full_kernel, head_dropin, init_params, replace_heads,
    replicate_channels, BlockOp, HeadKernel, HeadOp, HybridModel, Variant,
};
use dwvit_core::select::{gate_trace, hard_topk_gate, rank, score_model, GateParams, SelectionMode, SelectionOrder, SelectionPlan};
use dwvit_core::tensor::matmul;
use dwvit_core::vit::{explicit_attention, head_attention_with_energy, synthetic_inputs, Model, ModelConfig};
use dwvit_core::{Error as CoreError, Tensor};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("verification failed: {0}")]
    Verify(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Verify(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Core(e) => match e {
                CoreError::Config(_) | CoreError::Shape(_) | CoreError::Empty(_) => 2,
                CoreError::NonFinite(_) => 1,
                CoreError::Format(_) | CoreError::Io(_) | CoreError::Json(_) => 3,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Parser)]
#[command(name = "dwvit", version, about = "Depthwise-convolution drop-in replacements for ViT attention heads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded model archive (config-only for vitl-shape).
    Gen(GenArgs),
    /// Score every head by the variance of its attention energies.
    Score(ScoreArgs),
    /// Turn a score report into a selection plan.
    Plan(PlanArgs),
    /// Swap the planned heads for convolutional replacements.
    Replace(ReplaceArgs),
    /// Compare a hybrid against a reference and run the exactness checks.
    Verify(VerifyArgs),
    /// Analytic FLOP and parameter report.
    Cost(CostArgs),
    /// Wall-clock benchmark.
    Bench(BenchArgs),
    /// Anneal the Gumbel top-k gate over block logits.
    Gate(GateArgs),
}

#[derive(Args, Serialize)]
struct GenArgs {
    /// `desk`, `vitl-shape`, or a JSON config file.
    #[arg(long, default_value = "desk")]
    config: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write shape only, no weights.
    #[arg(long)]
    config_only: bool,
    /// Blocks whose query projection is zeroed (input-invariant heads).
    #[arg(long, value_delimiter = ',')]
    zero_query_blocks: Vec<usize>,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 256)]
    samples: usize,
    /// Seed for synthetic `gaussian(0, 1)` samples.
    #[arg(long, default_value_t = 0, conflicts_with = "data")]
    seed: u64,
    /// Raw little-endian f32 token grids, `n * d` values per sample.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ModeArg {
    Blockwise,
    Scattered,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum OrderArg {
    Lowest,
    Highest,
}

#[derive(Args, Serialize)]
struct PlanArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    budget: usize,
    #[arg(long, value_enum, default_value = "blockwise")]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "lowest")]
    order: OrderArg,
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct ReplaceArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    /// convfull, dw, ens-convfull or ens-dw.
    #[arg(long)]
    variant: String,
    /// Fit kernels by least squares against the input model.
    #[arg(long, conflicts_with = "init_seed")]
    fit: bool,
    /// Seed for random kernels when not fitting.
    #[arg(long)]
    init_seed: Option<u64>,
    /// One k x k kernel shared by all channels of a depthwise head.
    #[arg(long)]
    shared: bool,
    /// Fitting samples.
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct VerifyArgs {
    /// Reference model.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    hybrid: PathBuf,
    #[arg(long, default_value_t = 8)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum FormatArg {
    Json,
    Table,
}

#[derive(Args, Serialize)]
struct Shape {
    /// `desk`, `vitl-shape`, or a JSON config file.
    #[arg(long, conflicts_with = "model")]
    config: Option<String>,
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct CostArgs {
    #[command(flatten)]
    shape: Shape,
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, default_value = "dw")]
    variant: String,
    #[arg(long, value_enum, default_value = "json")]
    format: FormatArg,
    /// Whole-model cost for every blockwise budget 0..=n_b.
    #[arg(long)]
    sweep: bool,
    /// Score report giving the block order for the sweep.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct BenchArgs {
    #[command(flatten)]
    shape: Shape,
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, default_value = "dw")]
    variant: String,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct GateArgs {
    #[command(flatten)]
    shape: Shape,
    /// Score report; gate logits are the standardised negative block scores.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    budget: usize,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 4.0)]
    tau0: f64,
    #[arg(long, default_value_t = 0.05)]
    tau_end: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

fn manifest(command: &str, args: &impl Serialize) -> RunManifest {
    let args = match serde_json::to_value(args) {
        Ok(Value::Object(map)) => map,
        _ => Default::default(),
    };
    RunManifest {
        tool: "dwvit".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        args,
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn load_archive(path: &Path) -> Result<Archive> {
    read_archive(path).map_err(|e| match e {
        CoreError::Io(err) => io_err(path, err),
        CoreError::Format(msg) => io_err(path, msg),
        other => CliError::Io(format!("{}: {other}", path.display())),
    })
}

fn load_model(path: &Path) -> Result<HybridModel> {
    match load_archive(path)?.content {
        ArchiveContent::Model(m) => Ok(m),
        ArchiveContent::ConfigOnly(_) => Err(usage(format!("{} holds a config only, this command needs weights", path.display()))),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| io_err(path, e))
}

fn resolve_config(spec: &str) -> Result<ModelConfig> {
    let cfg = match ModelConfig::preset(spec) {
        Some(cfg) => cfg,
        None => {
            let path = Path::new(spec);
            if !path.exists() {
                return Err(usage(format!("unknown config '{spec}' (expected desk, vitl-shape or a JSON file)")));
            }
            read_json(path)?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Config plus weights if the source has them.
fn resolve_shape(shape: &Shape) -> Result<(ModelConfig, Option<HybridModel>)> {
    match (&shape.config, &shape.model) {
        (Some(spec), None) => Ok((resolve_config(spec)?, None)),
        (None, Some(path)) => match load_archive(path)?.content {
            ArchiveContent::ConfigOnly(cfg) => Ok((cfg, None)),
            ArchiveContent::Model(m) => Ok((m.config().clone(), Some(m))),
        },
        (None, None) => Err(usage("one of --config or --model is required")),
        (Some(_), Some(_)) => Err(usage("--config and --model are mutually exclusive")),
    }
}

fn parse_variant(s: &str) -> Result<Variant> {
    s.parse::<Variant>().map_err(|e| usage(e.to_string()))
}

fn emit(out: Option<&Path>, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    emit_text(out, &text)
}

fn emit_text(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| io_err(path, e)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Io(e.to_string())),
    }
}

fn write_model(path: &Path, archive: &Archive) -> Result<()> {
    write_archive(path, archive).map_err(|e| io_err(path, e))
}

#[derive(Deserialize)]
struct PlanFile {
    plan: SelectionPlan,
}

#[derive(Deserialize)]
struct ScoreFile {
    scores: dwvit_core::select::Scores,
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let cfg = resolve_config(&args.config)?;
    let run = manifest("gen", args);
    let config_only = args.config_only || args.config == "vitl-shape";
    let content = if config_only {
        if !args.zero_query_blocks.is_empty() {
            return Err(usage("--zero-query-blocks needs weights, not a config-only archive"));
        }
        ArchiveContent::ConfigOnly(cfg)
    } else {
        let mut model = Model::init(&cfg, args.seed)?;
        for &b in &args.zero_query_blocks {
            let block = model
                .blocks
                .get_mut(b)
                .ok_or_else(|| usage(format!("block {b} out of range (n_blocks = {})", cfg.n_blocks)))?;
            block.w_q = Tensor::zeros(&[cfg.d_model, cfg.d_model]);
        }
        ArchiveContent::Model(HybridModel::from_model(model))
    };
    write_model(&args.out, &Archive { content, run })
}

fn read_samples(path: &Path, cfg: &ModelConfig, limit: usize) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let per = cfg.tokens() * cfg.d_model * 4;
    if bytes.is_empty() || bytes.len() % per != 0 {
        return Err(io_err(path, format!("expected a whole number of {per}-byte samples, got {} bytes", bytes.len())));
    }
    bytes
        .chunks_exact(per)
        .take(limit)
        .map(|chunk| {
            let data = chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            Tensor::new(&[cfg.tokens(), cfg.d_model], data).map_err(|e| io_err(path, e))
        })
        .collect()
}

fn cmd_score(args: &ScoreArgs) -> Result<()> {
    if args.samples == 0 {
        return Err(usage("--samples must be at least 1"));
    }
    let model = load_model(&args.model)?;
    if !model.is_baseline() {
        return Err(usage("score expects a model without replacements"));
    }
    let cfg = model.config().clone();
    let (samples, source) = match &args.data {
        Some(path) => (read_samples(path, &cfg, args.samples)?, json!({"kind": "file", "path": path})),
        None => (synthetic_inputs(&cfg, args.samples, args.seed)?, json!({"kind": "synthetic", "seed": args.seed, "distribution": "gaussian(0, 1)"})),
    };
    let scores = score_model(&model.base, &samples)?;
    let ranked_blocks = rank(&scores.per_block, SelectionOrder::Lowest)?;
    let ranked_heads: Vec<[usize; 2]> = rank(&scores.flat_heads(), SelectionOrder::Lowest)?
        .into_iter()
        .map(|i| [i / cfg.n_heads, i % cfg.n_heads])
        .collect();
    emit(
        args.out.as_deref(),
        &json!({
            "run": manifest("score", args),
            "criterion": {
                "statistic": "sum of pointwise std of attention energies",
                "convention": "population",
                "samples": samples.len(),
                "source": source,
            },
            "scores": scores,
            "ranked_blocks": ranked_blocks,
            "ranked_heads": ranked_heads,
        }),
    )
}

fn cmd_plan(args: &PlanArgs) -> Result<()> {
    let report: ScoreFile = read_json(&args.report)?;
    let n_heads = report.scores.per_head.first().map_or(0, Vec::len);
    let order = match args.order {
        OrderArg::Lowest => SelectionOrder::Lowest,
        OrderArg::Highest => SelectionOrder::Highest,
    };
    let plan = match args.mode {
        ModeArg::Blockwise => dwvit_core::select::select(&report.scores.per_block, args.budget, SelectionMode::Blockwise, order, n_heads)?,
        ModeArg::Scattered => dwvit_core::select::select(&report.scores.flat_heads(), args.budget, SelectionMode::Scattered, order, n_heads)?,
    };
    emit(args.out.as_deref(), &json!({"run": manifest("plan", args), "plan": plan}))
}

fn cmd_replace(args: &ReplaceArgs) -> Result<()> {
    let variant = parse_variant(&args.variant)?;
    if args.shared && variant != Variant::Dw {
        return Err(usage("--shared applies to the dw variant only"));
    }
    if args.fit && args.shared {
        return Err(usage("--shared kernels are drawn, not fitted; use --variant convfull to fit a shared kernel"));
    }
    let model = load_model(&args.model)?;
    let plan = read_json::<PlanFile>(&args.plan)?.plan;
    let cfg = model.config().clone();
    let (params, fits) = if args.fit {
        if args.samples == 0 {
            return Err(usage("--samples must be at least 1"));
        }
        let samples = synthetic_inputs(&cfg, args.samples, args.seed)?;
        let (params, fits) = fit_params(&model, &plan, variant, &samples)?;
        let summary: Vec<Value> = fits
            .iter()
            .map(|f| json!({"objective": f.objective, "zero_objective": f.zero_objective, "ridged": f.ridged}))
            .collect();
        (params, Some(summary))
    } else {
        (init_params(&cfg, &plan, variant, args.init_seed.unwrap_or(0), args.shared)?, None)
    };
    let hybrid = replace_heads(&model, &plan, &params)?;
    write_model(
        &args.out,
        &Archive {
            content: ArchiveContent::Model(hybrid),
            run: manifest("replace", args),
        },
    )?;
    if let Some(fits) = fits {
        emit(None, &json!({"fits": fits}))?;
    }
    Ok(())
}

/// Max abs difference between the two models' block outputs, and the first
/// block whose output differs by more than `tol`.
fn compare_forward(reference: &HybridModel, hybrid: &HybridModel, samples: &[Tensor], tol: f32) -> Result<(f32, Option<usize>)> {
    let mut worst = 0.0f32;
    let mut first_bad: Option<usize> = None;
    for x in samples {
        let a = reference.forward_trace(x)?;
        let b = hybrid.forward_trace(x)?;
        for (blk, (ya, yb)) in a.iter().zip(&b).enumerate() {
            let diff = ya.max_abs_diff(yb)?;
            if diff > tol {
                first_bad = Some(first_bad.map_or(blk, |f| f.min(blk)));
            }
            if blk + 1 == a.len() {
                worst = worst.max(diff);
            }
        }
    }
    Ok((worst, first_bad))
}

/// Structural checks on every replaced head, evaluated on each sample's
/// normalised block inputs.
struct HeadChecks {
    shared_reduction: f32,
    conv_like: f32,
}

fn check_replaced_heads(hybrid: &HybridModel, inputs: &[Vec<Tensor>]) -> Result<HeadChecks> {
    let cfg = hybrid.config();
    let m = cfg.grid;
    let mut checks = HeadChecks {
        shared_reduction: 0.0,
        conv_like: 0.0,
    };
    for (b, op) in hybrid.ops.iter().enumerate() {
        let BlockOp::Heads(heads) = op else { continue };
        let block = &hybrid.base.blocks[b];
        for (h, head) in heads.iter().enumerate() {
            let HeadOp::Dropin(kernel) = head else { continue };
            let w = block.value_slice(h)?;
            for per_block in inputs {
                let z = &per_block[b];
                let grid = z.reshape(&[m, m, cfg.d_model])?;
                let out = head_dropin(z, block, h, kernel, m)?.reshape(&[m, m, cfg.d_head])?;
                let values = matmul(z, &w)?.reshape(&[m, m, cfg.d_head])?;
                if let HeadKernel::Shared(k) = kernel {
                    let dw = attn_dw(&grid, &w, &replicate_channels(k, cfg.d_head)?)?;
                    let full = attn_conv_full(&grid, &fold_full_kernel(k, &w)?)?;
                    checks.shared_reduction = checks.shared_reduction.max(dw.max_abs_diff(&full)?);
                }
                // Each channel's filter defines a conv-like energy matrix;
                // attention with it must reproduce that channel exactly.
                for c in 0..cfg.d_head {
                    let k = match kernel {
                        HeadKernel::Shared(k) => k.clone(),
                        HeadKernel::Depthwise(k) => {
                            let taps = cfg.kernel * cfg.kernel;
                            Tensor::new(&[cfg.kernel, cfg.kernel], (0..taps).map(|t| k.data()[t * cfg.d_head + c]).collect())?
                        }
                    };
                    let channel = Tensor::new(&[m, m, 1], (0..m * m).map(|p| values.data()[p * cfg.d_head + c]).collect())?;
                    let exact = explicit_attention(&conv_like_energy(&k, m)?, &channel)?;
                    let got = Tensor::new(&[m, m, 1], (0..m * m).map(|p| out.data()[p * cfg.d_head + c]).collect())?;
                    checks.conv_like = checks.conv_like.max(exact.max_abs_diff(&got)?);
                }
            }
        }
    }
    Ok(checks)
}

fn explicit_oracle(model: &HybridModel, inputs: &[Vec<Tensor>]) -> Result<f32> {
    let cfg = model.config();
    let m = cfg.grid;
    let mut worst = 0.0f32;
    for per_block in inputs.iter().take(2) {
        for (b, block) in model.base.blocks.iter().enumerate() {
            for h in 0..cfg.n_heads {
                let z = &per_block[b];
                let (out, energy) = head_attention_with_energy(z, block, h)?;
                let values = matmul(z, &block.value_slice(h)?)?.reshape(&[m, m, cfg.d_head])?;
                let exact = explicit_attention(&energy, &values)?.reshape(&[m * m, cfg.d_head])?;
                worst = worst.max(exact.max_abs_diff(&out)?);
            }
        }
    }
    Ok(worst)
}

fn cmd_verify(args: &VerifyArgs) -> Result<()> {
    if args.samples == 0 {
        return Err(usage("--samples must be at least 1"));
    }
    let reference = load_model(&args.model)?;
    let hybrid = load_model(&args.hybrid)?;
    if reference.config() != hybrid.config() {
        return Err(usage("--model and --hybrid have different configs"));
    }
    let samples = synthetic_inputs(hybrid.config(), args.samples, args.seed)?;
    let (forward_diff, first_bad) = compare_forward(&reference, &hybrid, &samples, args.tol as f32)?;
    let inputs = samples.iter().map(|x| hybrid.attention_inputs(x)).collect::<std::result::Result<Vec<_>, _>>()?;
    let heads = check_replaced_heads(&hybrid, &inputs)?;
    let oracle = explicit_oracle(&hybrid, &inputs)?;
    let checks = [
        ("forward_equivalence", forward_diff as f64, args.tol),
        ("channel_shared_reduction", heads.shared_reduction as f64, 1e-5),
        ("conv_like_exactness", heads.conv_like as f64, 1e-5),
        ("explicit_attention_oracle", oracle as f64, 1e-6),
    ];
    let failed: Vec<&str> = checks.iter().filter(|(_, v, t)| v > t).map(|(n, _, _)| *n).collect();
    let report = json!({
        "run": manifest("verify", args),
        "replaced_heads": hybrid.replaced_heads().len(),
        "checks": checks
            .iter()
            .map(|(name, value, tol)| json!({"check": name, "max_abs_diff": value, "tol": tol, "pass": value <= tol}))
            .collect::<Vec<_>>(),
        "first_diverging_block": first_bad,
        "pass": failed.is_empty(),
    });
    emit(args.out.as_deref(), &report)?;
    if failed.is_empty() {
        Ok(())
    } else {
        let located = first_bad.map_or(String::new(), |b| format!(" (outputs first diverge at block {b})"));
        Err(CliError::Verify(format!("{}{located}", failed.join(", "))))
    }
}

fn block_ranking(report: Option<&PathBuf>, n_blocks: usize) -> Result<Option<Vec<usize>>> {
    let Some(path) = report else { return Ok(None) };
    let scores = read_json::<ScoreFile>(path)?.scores;
    if scores.per_block.len() != n_blocks {
        return Err(usage(format!("report scores {} blocks, model has {n_blocks}", scores.per_block.len())));
    }
    Ok(Some(rank(&scores.per_block, SelectionOrder::Lowest)?))
}

fn cmd_cost(args: &CostArgs) -> Result<()> {
    let (cfg, model) = resolve_shape(&args.shape)?;
    let variant = parse_variant(&args.variant)?;
    let report = match (&args.plan, &model) {
        (Some(plan), _) => model_cost_report(&cfg, &read_json::<PlanFile>(plan)?.plan, variant)?,
        (None, Some(m)) => hybrid_cost_report(m)?,
        (None, None) => cost_report(&cfg, &vec![BlockLayout::baseline(cfg.n_heads); cfg.n_blocks])?,
    };
    let sweep = if args.sweep {
        let ranking = block_ranking(args.report.as_ref(), cfg.n_blocks)?;
        Some(budget_sweep(&cfg, variant, ranking.as_deref())?)
    } else {
        None
    };
    match args.format {
        FormatArg::Json => emit(
            args.out.as_deref(),
            &json!({"run": manifest("cost", args), "report": report, "sweep": sweep}),
        ),
        FormatArg::Table => {
            let mut text = variant_table(&report);
            if let Some(sweep) = sweep {
                text.push_str(&format!("\n{:>6} {:>12} {:>12}\n", "budget", "GFLOPs", "params (M)"));
                for p in sweep {
                    text.push_str(&format!("{:>6} {:>12.4} {:>12.4}\n", p.budget, p.flops as f64 / 1e9, p.params as f64 / 1e6));
                }
            }
            emit_text(args.out.as_deref(), &text)
        }
    }
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    if args.reps == 0 {
        return Err(usage("--reps must be at least 1"));
    }
    let (cfg, model) = resolve_shape(&args.shape)?;
    let variant = parse_variant(&args.variant)?;
    let results = match model {
        None => {
            let mut rows = Vec::new();
            for v in [CostVariant::Mhsa, CostVariant::DwAll, CostVariant::EnsDw, CostVariant::EnsConvFull] {
                let stats = bench_block(&cfg, v, args.seed, args.warmup, args.reps)?;
                rows.push(json!({"target": format!("block/{}", v.name()), "stats": stats}));
            }
            rows
        }
        Some(model) => {
            let x = &synthetic_inputs(&cfg, 1, args.seed)?[0];
            let mut rows = vec![json!({"target": "model/input", "stats": bench_model(&model, x, args.warmup, args.reps)?})];
            if let Some(plan) = &args.plan {
                let plan = read_json::<PlanFile>(plan)?.plan;
                plan_layouts(&cfg, &plan, variant)?;
                let hybrid = replace_heads(&model, &plan, &init_params(&cfg, &plan, variant, args.seed, false)?)?;
                rows.push(json!({
                    "target": format!("model/planned-{}", variant.name()),
                    "stats": bench_model(&hybrid, x, args.warmup, args.reps)?,
                }));
            }
            rows
        }
    };
    emit(args.out.as_deref(), &json!({"run": manifest("bench", args), "results": results}))
}

/// Standardised negative block scores, so low-variance blocks get high logits.
fn gate_logits(report: Option<&PathBuf>, n_blocks: usize) -> Result<Vec<f64>> {
    let Some(path) = report else { return Ok(vec![0.0; n_blocks]) };
    let scores = read_json::<ScoreFile>(path)?.scores.per_block;
    if scores.len() != n_blocks {
        return Err(usage(format!("report scores {} blocks, model has {n_blocks}", scores.len())));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let std = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(scores.iter().map(|s| if std > 0.0 { -(s - mean) / std } else { 0.0 }).collect())
}

fn cmd_gate(args: &GateArgs) -> Result<()> {
    let (cfg, _) = resolve_shape(&args.shape)?;
    let params = GateParams {
        logits: gate_logits(args.report.as_ref(), cfg.n_blocks)?,
        budget: args.budget,
        tau0: args.tau0,
        tau_end: args.tau_end,
        steps: args.steps,
        seed: args.seed,
    };
    let trace = gate_trace(&params)?;
    // The learned set is reused as a blockwise plan: top-p of the logits.
    let mask = hard_topk_gate(&params.logits, params.budget)?;
    let blocks: Vec<usize> = rank(&params.logits, SelectionOrder::Highest)?
        .into_iter()
        .filter(|&b| mask[b] == 1.0)
        .collect();
    let plan = SelectionPlan::from_blocks(&blocks, SelectionOrder::Lowest, cfg.n_heads);
    emit(
        args.out.as_deref(),
        &json!({"run": manifest("gate", args), "params": params, "trace": trace, "plan": plan}),
    )
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Score(a) => cmd_score(a),
        Command::Plan(a) => cmd_plan(a),
        Command::Replace(a) => cmd_replace(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Cost(a) => cmd_cost(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Gate(a) => cmd_gate(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dwvit: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
