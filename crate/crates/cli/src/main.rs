use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use forestseg::cloud::{voxel_labels_from_points, voxelize};
use forestseg::io::{read_cloud, read_labels, write_cloud, write_labels_tsv, PointLabels};
use forestseg::isa::{select_queries_fps, select_queries_isa, selection_stats, FpsMetric, StartRule};
use forestseg::losses::gradcheck::{run_gradcheck, DEFAULT_INSTANCES};
use forestseg::merging::{merge_blocks, parse_block_files, MergeConfig, MergeStrategy};
use forestseg::metrics::{aggregate, evaluate, EvalReport};
use forestseg::pipeline::{finish, BlockOutput, PipelineConfig};
use forestseg::synth::{generate_forest, oracle_embeddings, ForestParams};
use forestseg::tiling::{cylinder_crop, XyBounds};
use forestseg::{ErrorKind, PointCloud};

const THREADS_ENV: &str = "FORESTSEG_THREADS";

#[derive(Parser)]
#[command(name = "forestseg", version, about = "Tree instance and semantic segmentation of forest point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled forest plot.
    Synth(SynthArgs),
    /// Tile, predict per block, merge and (with ground truth) evaluate.
    Pipeline(PipelineArgs),
    /// Pick query voxels inside one cylinder block.
    SelectQueries(SelectArgs),
    /// Merge per-block mask files into per-point instance ids.
    Merge(MergeArgs),
    /// Score predicted labels against ground truth.
    Evaluate(EvaluateArgs),
    /// Check analytic loss gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Flat `key = value` parameter file; defaults apply to missing keys.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Overrides the seed from the parameter file.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the tree count from the parameter file.
    #[arg(long)]
    n_trees: Option<usize>,
    /// Output cloud, `.ply` or TSV by extension.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, ValueEnum)]
enum PredictorKind {
    Oracle,
    File,
}

#[derive(Args)]
struct PipelineArgs {
    /// Input cloud; ground-truth labels enable evaluation.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "oracle")]
    predictor: PredictorKind,
    /// Block mask JSON files for `--predictor file` (repeatable).
    #[arg(long = "masks")]
    masks: Vec<PathBuf>,
    /// JSON config; command-line flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    stride: Option<f64>,
    #[arg(long)]
    voxel_resolution: Option<f64>,
    #[arg(long)]
    k_queries: Option<usize>,
    #[arg(long)]
    binary_threshold: Option<f64>,
    #[arg(long)]
    nms_iou: Option<f64>,
    #[arg(long)]
    score_threshold: Option<f64>,
    #[arg(long)]
    boundary_margin: Option<f64>,
    #[arg(long)]
    match_iou: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker count (0 = automatic); capped by FORESTSEG_THREADS.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    split_prob: Option<f64>,
    #[arg(long)]
    merge_prob: Option<f64>,
    #[arg(long)]
    drop_prob: Option<f64>,
    #[arg(long)]
    point_noise: Option<f64>,
    #[arg(long)]
    score_sigma: Option<f64>,
    /// Per-point `semantic`/`instance` table.
    #[arg(long)]
    labels_out: Option<PathBuf>,
    /// JSON report; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, ValueEnum)]
enum MethodArg {
    Isa,
    Fps,
}

#[derive(Args)]
struct SelectArgs {
    /// Labeled input cloud; labels drive the oracle embeddings.
    #[arg(long)]
    input: PathBuf,
    /// Block center as `x,y`; defaults to the middle of the cloud.
    #[arg(long, value_parser = parse_xy)]
    center: Option<[f64; 2]>,
    #[arg(long, default_value_t = forestseg::tiling::DEFAULT_RADIUS)]
    radius: f64,
    #[arg(long, default_value_t = forestseg::cloud::DEFAULT_VOXEL_RESOLUTION)]
    voxel_resolution: f64,
    #[arg(long, default_value_t = forestseg::isa::DEFAULT_QUERY_COUNT)]
    k_queries: usize,
    #[arg(long, value_enum, default_value = "isa")]
    method: MethodArg,
    #[arg(long, default_value_t = forestseg::isa::DEFAULT_TREE_THRESHOLD)]
    binary_threshold: f64,
    /// Oracle embedding noise σ.
    #[arg(long, default_value_t = forestseg::pipeline::DEFAULT_EMBEDDING_NOISE)]
    embedding_noise: f64,
    /// Seeds the embedding noise; the first query is the lowest voxel index.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, ValueEnum)]
enum StrategyArg {
    Nms,
    Overlap,
}

#[derive(Args)]
struct MergeArgs {
    /// Cloud the mask point ids index into.
    #[arg(long)]
    input: PathBuf,
    /// Block mask JSON files (repeatable; each holds one block or an array).
    #[arg(long = "blocks", required = true)]
    blocks: Vec<PathBuf>,
    #[arg(long, default_value_t = forestseg::merging::DEFAULT_NMS_IOU)]
    nms_iou: f64,
    #[arg(long, default_value_t = forestseg::merging::DEFAULT_SCORE_THRESHOLD)]
    score_threshold: f64,
    #[arg(long, default_value_t = forestseg::merging::DEFAULT_BOUNDARY_MARGIN)]
    boundary_margin: f64,
    #[arg(long)]
    no_boundary_discard: bool,
    #[arg(long, value_enum, default_value = "nms")]
    strategy: StrategyArg,
    #[arg(long, default_value_t = 0.5)]
    overlap_threshold: f64,
    /// Per-point label table.
    #[arg(long)]
    out: PathBuf,
    /// JSON summary; stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predicted labels (repeatable, paired in order with --gt).
    #[arg(long = "pred", required = true)]
    pred: Vec<PathBuf>,
    /// Ground-truth labels or labeled cloud.
    #[arg(long = "gt", required = true)]
    gt: Vec<PathBuf>,
    #[arg(long, default_value_t = forestseg::metrics::DEFAULT_MATCH_IOU)]
    iou: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = DEFAULT_INSTANCES)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_xy(s: &str) -> std::result::Result<[f64; 2], String> {
    let (x, y) = s.split_once(',').ok_or("expected `x,y`")?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    Ok([p(x)?, p(y)?])
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn load_cloud(path: &Path) -> Result<PointCloud> {
    read_cloud(path).with_context(|| format!("reading {}", path.display()))
}

/// Applies the FORESTSEG_THREADS cap to a requested worker count.
fn capped_threads(requested: usize) -> Result<usize> {
    let cap = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| forestseg::Error::InvalidConfig(format!("{THREADS_ENV}=`{v}` is not a count")))?,
        ),
        Err(_) => None,
    };
    Ok(match (requested, cap) {
        (r, None) => r,
        (_, Some(0)) => requested,
        (0, Some(c)) => c,
        (r, Some(c)) => r.min(c),
    })
}

#[derive(Serialize)]
struct SynthSummary<'a> {
    out: &'a Path,
    points: usize,
    trees: usize,
    understory_trees: usize,
    params: &'a ForestParams,
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut params = match &a.params {
        Some(p) => ForestParams::parse(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => ForestParams::default(),
    };
    if let Some(s) = a.seed {
        params.seed = s;
    }
    if let Some(n) = a.n_trees {
        params.n_trees = n;
    }
    let forest = generate_forest(&params)?;
    write_cloud(&a.out, &forest.cloud).with_context(|| format!("writing {}", a.out.display()))?;
    emit_json(
        &SynthSummary {
            out: &a.out,
            points: forest.cloud.len(),
            trees: forest.trees.len(),
            understory_trees: forest.trees.iter().filter(|t| t.understory).count(),
            params: &params,
        },
        None,
    )
}

fn pipeline_config(a: &PipelineArgs) -> Result<PipelineConfig> {
    let mut c = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<PipelineConfig>(&text)
                .map_err(|e| forestseg::Error::InvalidConfig(format!("{}: {e}", p.display())))?
        }
        None => PipelineConfig::default(),
    };
    macro_rules! set {
        ($($field:ident).+ <- $flag:ident) => {
            if let Some(v) = a.$flag {
                c.$($field).+ = v;
            }
        };
    }
    set!(radius <- radius);
    set!(stride <- stride);
    set!(voxel_resolution <- voxel_resolution);
    set!(k_queries <- k_queries);
    set!(binary_threshold <- binary_threshold);
    set!(nms_iou <- nms_iou);
    set!(score_threshold <- score_threshold);
    set!(boundary_margin <- boundary_margin);
    set!(match_iou <- match_iou);
    set!(seed <- seed);
    set!(threads <- threads);
    set!(corruption.split_prob <- split_prob);
    set!(corruption.merge_prob <- merge_prob);
    set!(corruption.drop_prob <- drop_prob);
    set!(corruption.point_noise <- point_noise);
    set!(corruption.score_sigma <- score_sigma);
    c.threads = capped_threads(c.threads)?;
    c.validate()?;
    Ok(c)
}

fn read_block_files(paths: &[PathBuf]) -> Result<Vec<forestseg::BlockPrediction>> {
    let mut blocks = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        blocks.extend(parse_block_files(&text).with_context(|| format!("parsing {}", p.display()))?);
    }
    Ok(blocks)
}

fn cmd_pipeline(a: PipelineArgs) -> Result<()> {
    let config = pipeline_config(&a)?;
    let cloud = load_cloud(&a.input)?;
    let output = match a.predictor {
        PredictorKind::Oracle => {
            if !a.masks.is_empty() {
                bail!(forestseg::Error::InvalidConfig("--masks requires --predictor file".into()));
            }
            forestseg::run_oracle_pipeline(&cloud, &config)?
        }
        PredictorKind::File => {
            if a.masks.is_empty() {
                bail!(forestseg::Error::InvalidConfig("--predictor file needs at least one --masks file".into()));
            }
            let outputs: Vec<BlockOutput> = read_block_files(&a.masks)?
                .into_iter()
                .map(|prediction| BlockOutput { prediction, selection: None })
                .collect();
            finish(&cloud, &outputs, &config)?
        }
    };
    if let Some(path) = &a.labels_out {
        let labels = PointLabels { semantic: output.semantic.clone(), instance: output.instance.clone() };
        std::fs::write(path, write_labels_tsv(&labels)).with_context(|| format!("writing {}", path.display()))?;
    }
    emit_json(&output.report, a.out.as_deref())
}

#[derive(Serialize)]
struct SelectReport {
    center: [f64; 2],
    radius: f64,
    block_points: usize,
    voxels: usize,
    selection: forestseg::QuerySelection,
    /// Voxel centers of the queries, in selection order.
    query_positions: Vec<[f64; 3]>,
    stats: forestseg::SelectionStats,
}

fn cmd_select_queries(a: SelectArgs) -> Result<()> {
    let cloud = load_cloud(&a.input)?;
    let center = match a.center {
        Some(c) => c,
        None => {
            let b = XyBounds::of(&cloud).ok_or(forestseg::Error::EmptyInput("input cloud is empty"))?;
            [(b.min[0] + b.max[0]) / 2.0, (b.min[1] + b.max[1]) / 2.0]
        }
    };
    let block = cylinder_crop(&cloud, center, a.radius)?;
    let sub = cloud.subset(&block.point_indices);
    let vox = voxelize(&sub, a.voxel_resolution)?;
    let gt = voxel_labels_from_points(&vox, &sub)?;
    let selection = match a.method {
        MethodArg::Isa => {
            let field = oracle_embeddings(
                &vox,
                &gt,
                a.embedding_noise,
                forestseg::pipeline::DEFAULT_EMBEDDING_SEPARATION,
                0.0,
                a.seed,
            )?;
            select_queries_isa(&field, a.k_queries, a.binary_threshold, StartRule::LowestIndex, FpsMetric::L2)?
        }
        MethodArg::Fps => select_queries_fps(&vox, a.k_queries, StartRule::LowestIndex)?,
    };
    let stats = selection_stats(&selection, &gt)?;
    let query_positions = selection.voxel_indices.iter().map(|&v| vox.voxel_center(v)).collect();
    emit_json(
        &SelectReport {
            center,
            radius: a.radius,
            block_points: block.point_indices.len(),
            voxels: vox.num_voxels(),
            selection,
            query_positions,
            stats,
        },
        a.out.as_deref(),
    )
}

#[derive(Serialize)]
struct MergeSummary {
    blocks: usize,
    points: usize,
    stages: forestseg::merging::StageCounts,
    semantic: bool,
}

fn cmd_merge(a: MergeArgs) -> Result<()> {
    let cloud = load_cloud(&a.input)?;
    let blocks = read_block_files(&a.blocks)?;
    let config = MergeConfig {
        nms_iou_threshold: a.nms_iou,
        score_threshold: a.score_threshold,
        boundary_margin: a.boundary_margin,
        block_radius: blocks.iter().map(|b| b.geometry.radius).fold(f64::INFINITY, f64::min),
        discard_boundary: !a.no_boundary_discard,
        strategy: match a.strategy {
            StrategyArg::Nms => MergeStrategy::ScoreNms,
            StrategyArg::Overlap => MergeStrategy::Overlap { threshold: a.overlap_threshold },
        },
    };
    let merged = merge_blocks(&blocks, cloud.positions(), &config)?;
    let labels = PointLabels { semantic: merged.semantic.clone(), instance: merged.instance };
    std::fs::write(&a.out, write_labels_tsv(&labels)).with_context(|| format!("writing {}", a.out.display()))?;
    emit_json(
        &MergeSummary {
            blocks: blocks.len(),
            points: cloud.len(),
            stages: merged.stages,
            semantic: merged.semantic.is_some(),
        },
        a.report.as_deref(),
    )
}

#[derive(Serialize)]
struct MultiPlotReport {
    plots: Vec<EvalReport>,
    aggregate: forestseg::metrics::Aggregate,
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    if a.pred.len() != a.gt.len() {
        bail!(forestseg::Error::InvalidConfig(format!(
            "{} --pred files but {} --gt files; they are paired in order",
            a.pred.len(),
            a.gt.len()
        )));
    }
    let mut reports = Vec::with_capacity(a.pred.len());
    for (p, g) in a.pred.iter().zip(&a.gt) {
        let pred = read_labels(p).with_context(|| format!("reading {}", p.display()))?;
        let gt = read_labels(g).with_context(|| format!("reading {}", g.display()))?;
        let sem = match (&pred.semantic, &gt.semantic) {
            (Some(ps), Some(gs)) => Some((ps.as_slice(), gs.as_slice())),
            _ => None,
        };
        reports.push(
            evaluate(&pred.instance, &gt.instance, sem, a.iou)
                .with_context(|| format!("evaluating {} against {}", p.display(), g.display()))?,
        );
    }
    if reports.len() == 1 {
        emit_json(&reports[0], a.out.as_deref())
    } else {
        let aggregate = aggregate(&reports)?;
        emit_json(&MultiPlotReport { plots: reports, aggregate }, a.out.as_deref())
    }
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    if a.instances == 0 {
        bail!(forestseg::Error::InvalidConfig("--instances must be > 0".into()));
    }
    let report = run_gradcheck(a.instances, a.seed);
    emit_json(&report, a.out.as_deref())?;
    if !report.all_pass {
        bail!(GradcheckFailed);
    }
    Ok(())
}

#[derive(Debug)]
struct GradcheckFailed;

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("gradient check failed")
    }
}

impl std::error::Error for GradcheckFailed {}

/// 2 for bad input, 3 for infeasible configuration, 4 for internal failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<forestseg::Error>() {
            return match e.kind() {
                ErrorKind::Input => 2,
                ErrorKind::Config => 3,
                ErrorKind::Internal => 4,
            };
        }
        if cause.downcast_ref::<GradcheckFailed>().is_some() {
            return 4;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<serde_json::Error>().is_some() {
            return 2;
        }
    }
    4
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Pipeline(a) => cmd_pipeline(a),
        Command::SelectQueries(a) => cmd_select_queries(a),
        Command::Merge(a) => cmd_merge(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
