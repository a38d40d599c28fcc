//! Command-line front end: `gen`, `compress`, `inspect`, `attn`, `selftest`.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data errors.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::attention::{project_heatmap, AttentionConfig, ToyBlock};
use crate::cascade::{
    run_pipeline, run_spatiotemporal, PipelineConfig, PipelineError, PipelineOutcome, StageKind,
    StageSpec,
};
use crate::cluster::cluster_tokens;
use crate::io::{
    load_pipeline_config, load_tokens, render_report_text, save_heatmap_pgm, save_heatmap_text,
    save_report, save_tokens, ReportFormat,
};
use crate::merge::{compress_stage, TokenSet};
use crate::rope::{sections_gcd, RopeConfig};
use crate::selftest::run_selftest;
use crate::synth::{gen_synthetic, Pattern, SynthSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

/// Spatial retention used when no stage flags or config are given.
const DEFAULT_SPATIAL_RATIO: f64 = 0.45;

struct Failure {
    code: i32,
    message: String,
}

fn usage(message: impl ToString) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.to_string(),
    }
}

fn data(message: impl ToString) -> Failure {
    Failure {
        code: EXIT_DATA,
        message: message.to_string(),
    }
}

#[derive(Parser)]
#[command(
    name = "ppe",
    version,
    about = "Visual token compression with position-preserving rotary ids"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a seeded token file
    Gen(GenArgs),
    /// Run a compression pipeline and write a report
    Compress(CompressArgs),
    /// Print statistics of a token file
    Inspect(InspectArgs),
    /// Run the attention probe and emit a heatmap
    Attn(AttnArgs),
    /// Run the built-in invariant suite
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output token file
    #[arg(long, default_value = "tokens.ptok")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Grid dimensions as TxHxW
    #[arg(long, default_value = "1x8x8")]
    dims: String,
    /// Embedding width
    #[arg(long, default_value_t = 16)]
    width: usize,
    /// Embedding layout: blobs | stripes | uniform-noise
    #[arg(long, default_value = "blobs")]
    pattern: String,
    /// Cluster count for the blobs pattern
    #[arg(long, default_value_t = 4)]
    blobs: usize,
    /// Regime count for the stripes pattern
    #[arg(long, default_value_t = 4)]
    regimes: usize,
}

#[derive(Args)]
struct CompressArgs {
    /// Input token file
    input: PathBuf,
    /// Pipeline config document (flags below override it)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single spatial stage at this retention ratio
    #[arg(long)]
    ratio: Option<f64>,
    /// In-model cascade: comma-separated ratios, `t:` prefix for temporal
    #[arg(long)]
    stages: Option<String>,
    /// Temporal event ratio; runs the spatiotemporal pipeline
    #[arg(long)]
    temporal_ratio: Option<f64>,
    /// Carried positions per compressed token
    #[arg(long)]
    capacity: Option<usize>,
    /// Rope sections, e.g. 16,24,24
    #[arg(long)]
    sections: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report path (default: next to the input)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report format: structured | text
    #[arg(long, default_value = "structured")]
    format: String,
}

#[derive(Args)]
struct InspectArgs {
    /// Token file to inspect
    input: PathBuf,
    /// Output format: text | structured
    #[arg(long, default_value = "text")]
    format: String,
}

#[derive(Args)]
struct AttnArgs {
    /// Input token file
    input: PathBuf,
    /// Compress at this ratio before probing
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    capacity: Option<usize>,
    /// Rope sections, e.g. 16,24,24
    #[arg(long)]
    sections: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Heatmap path; a .pgm extension selects the graymap writer
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_dims(text: &str) -> Result<(u32, u32, u32), Failure> {
    let parts: Vec<&str> = text.split('x').collect();
    if parts.len() != 3 {
        return Err(usage(format!("--dims expects TxHxW, got {text:?}")));
    }
    let mut dims = [0u32; 3];
    for (slot, part) in dims.iter_mut().zip(&parts) {
        *slot = part
            .parse()
            .map_err(|_| usage(format!("bad dimension {part:?} in --dims")))?;
    }
    Ok((dims[0], dims[1], dims[2]))
}

fn parse_usize_list(text: &str) -> Result<Vec<usize>, Failure> {
    text.split(',')
        .map(|part| {
            part.trim()
                .parse()
                .map_err(|_| usage(format!("bad integer {part:?} in list")))
        })
        .collect()
}

fn parse_stage_list(text: &str) -> Result<Vec<StageSpec>, Failure> {
    text.split(',')
        .enumerate()
        .map(|(block, item)| {
            let item = item.trim();
            let (kind, rest) = if let Some(rest) = item.strip_prefix("t:") {
                (StageKind::Temporal, rest)
            } else if let Some(rest) = item.strip_prefix("s:") {
                (StageKind::Spatial, rest)
            } else {
                (StageKind::Spatial, item)
            };
            let ratio: f64 = rest
                .parse()
                .map_err(|_| usage(format!("bad stage ratio {rest:?}")))?;
            Ok(StageSpec::after(block, kind, ratio))
        })
        .collect()
}

fn resolve_seed(flag: Option<u64>, config_seed: Option<u64>) -> Result<u64, Failure> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    if let Some(seed) = config_seed {
        return Ok(seed);
    }
    match std::env::var("PPE_SEED") {
        Ok(value) => value.parse().map_err(|_| {
            usage(format!(
                "PPE_SEED must be an unsigned integer, got {value:?}"
            ))
        }),
        Err(_) => Ok(0),
    }
}

fn default_rope_for(tokens: &TokenSet) -> RopeConfig {
    if tokens.grid_extent.t > 1 {
        RopeConfig::default_3d()
    } else {
        RopeConfig::default_2d()
    }
}

fn build_rope(
    tokens: &TokenSet,
    sections: Option<&str>,
    capacity: Option<usize>,
) -> Result<RopeConfig, Failure> {
    match (sections, capacity) {
        (None, None) => Ok(default_rope_for(tokens)),
        (Some(list), capacity) => {
            let sections = parse_usize_list(list)?;
            let capacity = capacity.unwrap_or_else(|| sections_gcd(&sections));
            RopeConfig::new(sections, 10_000.0, capacity).map_err(usage)
        }
        (None, Some(capacity)) => {
            let base = default_rope_for(tokens);
            RopeConfig::new(base.sections().to_vec(), base.freq_base(), capacity).map_err(usage)
        }
    }
}

fn parse_report_format(text: &str) -> Result<ReportFormat, Failure> {
    match text {
        "structured" => Ok(ReportFormat::Structured),
        "text" => Ok(ReportFormat::Text),
        other => Err(usage(format!(
            "--format must be text or structured, got {other:?}"
        ))),
    }
}

fn pipeline_failure(err: PipelineError) -> Failure {
    match err {
        PipelineError::BadRatio(_) | PipelineError::BadPlacement => usage(err),
        other => data(other),
    }
}

fn run_gen(args: GenArgs) -> Result<(), Failure> {
    let (t, h, w) = parse_dims(&args.dims)?;
    let pattern = match args.pattern.as_str() {
        "blobs" => Pattern::Blobs { count: args.blobs },
        "stripes" => Pattern::Stripes {
            regimes: args.regimes,
        },
        "uniform-noise" => Pattern::UniformNoise,
        other => {
            return Err(usage(format!(
                "--pattern must be blobs, stripes or uniform-noise, got {other:?}"
            )))
        }
    };
    let seed = resolve_seed(args.seed, None)?;
    let spec = SynthSpec {
        t,
        h,
        w,
        embed_width: args.width,
        pattern,
        seed,
    };
    let tokens = gen_synthetic(&spec).map_err(usage)?;
    save_tokens(&tokens, &args.out).map_err(data)?;
    println!(
        "wrote {} tokens ({}x{}x{}, width {}) to {}",
        tokens.len(),
        t,
        h,
        w,
        args.width,
        args.out.display()
    );
    Ok(())
}

fn run_compress(args: CompressArgs) -> Result<(), Failure> {
    if args.stages.is_some() && (args.ratio.is_some() || args.temporal_ratio.is_some()) {
        return Err(usage(
            "--stages cannot be combined with --ratio or --temporal-ratio",
        ));
    }
    let format = parse_report_format(&args.format)?;
    let tokens = load_tokens(&args.input).map_err(data)?;

    let file_config = match &args.config {
        Some(path) => Some(load_pipeline_config(path).map_err(data)?),
        None => None,
    };
    let seed = resolve_seed(args.seed, file_config.as_ref().map(|c| c.seed))?;
    let mut config = match file_config {
        Some(mut cfg) => {
            if args.sections.is_some() || args.capacity.is_some() {
                cfg.rope = build_rope(&tokens, args.sections.as_deref(), args.capacity)?;
            }
            cfg
        }
        None => PipelineConfig::new(
            build_rope(&tokens, args.sections.as_deref(), args.capacity)?,
            seed,
        ),
    };
    config.seed = seed;

    let from_config_file = args.config.is_some();
    let outcome: PipelineOutcome = if let Some(temporal_ratio) = args.temporal_ratio {
        let spatial_ratio = args.ratio.unwrap_or(DEFAULT_SPATIAL_RATIO);
        run_spatiotemporal(&tokens, temporal_ratio, spatial_ratio, &config)
            .map_err(pipeline_failure)?
    } else {
        if let Some(stages) = &args.stages {
            config.stages = parse_stage_list(stages)?;
        } else if let Some(ratio) = args.ratio {
            config.stages = vec![StageSpec::before(StageKind::Spatial, ratio)];
        } else if !from_config_file {
            // Bare `compress` runs the default single spatial stage.
            config.stages = vec![StageSpec::before(StageKind::Spatial, DEFAULT_SPATIAL_RATIO)];
        }
        run_pipeline(&tokens, &config).map_err(pipeline_failure)?
    };

    let out_path = args
        .out
        .unwrap_or_else(|| args.input.with_extension("report.toml"));
    save_report(&outcome.report, &out_path, format).map_err(data)?;
    print!("{}", render_report_text(&outcome.report));
    println!("report written to {}", out_path.display());
    for (i, ms) in outcome.report.stage_wall_ms.iter().enumerate() {
        eprintln!("stage {i} wall time: {ms:.3} ms");
    }
    Ok(())
}

#[derive(Serialize)]
struct InspectSummary {
    tokens: usize,
    grid: [u32; 3],
    embed_width: usize,
    norm_min: f64,
    norm_mean: f64,
    norm_max: f64,
}

fn run_inspect(args: InspectArgs) -> Result<(), Failure> {
    let format = parse_report_format(&args.format)?;
    let tokens = load_tokens(&args.input).map_err(data)?;
    let norms: Vec<f64> = tokens
        .tokens
        .iter()
        .map(|t| t.embedding.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let summary = InspectSummary {
        tokens: tokens.len(),
        grid: [
            tokens.grid_extent.t,
            tokens.grid_extent.h,
            tokens.grid_extent.w,
        ],
        embed_width: tokens
            .tokens
            .first()
            .map(|t| t.embedding.len())
            .unwrap_or(0),
        norm_min: norms.iter().copied().fold(f64::INFINITY, f64::min),
        norm_mean: if norms.is_empty() {
            0.0
        } else {
            norms.iter().sum::<f64>() / norms.len() as f64
        },
        norm_max: norms.iter().copied().fold(0.0, f64::max),
    };
    match format {
        ReportFormat::Structured => {
            let text = toml::to_string(&summary).map_err(|e| data(e.to_string()))?;
            print!("{text}");
        }
        ReportFormat::Text => {
            println!(
                "tokens: {} grid: {}x{}x{} width: {}",
                summary.tokens,
                summary.grid[0],
                summary.grid[1],
                summary.grid[2],
                summary.embed_width
            );
            if summary.tokens > 0 {
                println!(
                    "embedding norms: min {:.6} mean {:.6} max {:.6}",
                    summary.norm_min, summary.norm_mean, summary.norm_max
                );
            }
        }
    }
    Ok(())
}

fn run_attn(args: AttnArgs) -> Result<(), Failure> {
    let tokens = load_tokens(&args.input).map_err(data)?;
    if tokens.is_empty() {
        return Err(data("attention probe needs at least one token"));
    }
    let rope = build_rope(&tokens, args.sections.as_deref(), args.capacity)?;
    let seed = resolve_seed(args.seed, None)?;
    let probed = match args.ratio {
        Some(ratio) => {
            let assignment = cluster_tokens(&tokens.embeddings(), ratio).map_err(|e| {
                if matches!(e, crate::cluster::ClusterError::BadRatio(_)) {
                    usage(e)
                } else {
                    data(e)
                }
            })?;
            compress_stage(&tokens, &assignment, &rope).map_err(data)?
        }
        None => tokens,
    };
    let cfg = AttentionConfig::new(2, rope, None).map_err(usage)?;
    let block = ToyBlock::seeded(cfg, probed.tokens[0].embedding.len(), seed);
    let map = block.scores(&probed).map_err(data)?;
    let heatmap = project_heatmap(&map, &probed).map_err(data)?;

    let out_path = args
        .out
        .unwrap_or_else(|| args.input.with_extension("heatmap.txt"));
    if out_path.extension().is_some_and(|e| e == "pgm") {
        save_heatmap_pgm(&heatmap, &out_path).map_err(data)?;
    } else {
        save_heatmap_text(&heatmap, &out_path).map_err(data)?;
    }

    let entropy = map.row_entropy();
    let variance = map.row_variance();
    let mean = |series: &[Vec<f64>]| {
        let total: f64 = series.iter().flatten().sum();
        let count: usize = series.iter().map(|s| s.len()).sum();
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    };
    println!(
        "tokens: {} entropy mean: {:.6} variance mean: {:.9}",
        probed.len(),
        mean(&entropy),
        mean(&variance)
    );
    println!(
        "heatmap: {} nonzero cells of {} written to {}",
        heatmap.nonzero_cells(),
        heatmap.data().len(),
        out_path.display()
    );
    Ok(())
}

fn run_selftest_cmd(args: SelftestArgs) -> Result<(), Failure> {
    let seed = resolve_seed(args.seed, None)?;
    let checks = run_selftest(seed);
    let mut failed = 0usize;
    for result in &checks {
        let verdict = if result.passed { "PASS" } else { "FAIL" };
        println!("{verdict} {} — {}", result.name, result.detail);
        if !result.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(data(format!("{failed} of {} checks failed", checks.len())));
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}

/// Parses `argv` and dispatches; returns the process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    EXIT_OK
                }
                _ => EXIT_USAGE,
            };
            let _ = err.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Gen(args) => run_gen(args),
        Command::Compress(args) => run_compress(args),
        Command::Inspect(args) => run_inspect(args),
        Command::Attn(args) => run_attn(args),
        Command::Selftest(args) => run_selftest_cmd(args),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            failure.code
        }
    }
}
