use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use adaflow::attention::{attention_cost, select_kv_tokens, CostReport, DEFAULT_BUDGET_FRAMES};
use adaflow::error::{Error, Result};
use adaflow::keyframes::{select_keyframes, KeyframeMode, KeyframeSchedule};
use adaflow::partition::{
    adaptive_partition, yt_diagnostic, BoundaryMode, ClipPartition, PartitionParams,
};
use adaflow::pipeline::{
    consistency_metrics, correspondences_for, read_json, run_pipeline, synth_video, write_json,
    AttentionMode, Motion, PipelineConfig, SyntheticSpec,
};
use adaflow::similarity::{FeatureVolume, HeatmapCache};
use adaflow::tensor_store::{tensor_read, tensor_write};

#[derive(Parser)]
#[command(name = "adaflow", version, about = "Adaptive long-video editing core")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature volume with known scenes and motion.
    Synth(SynthArgs),
    /// Split a feature volume into clips.
    Partition(PartitionArgs),
    /// Draw one keyframe per clip per timestep.
    Keyframes(KeyframesArgs),
    /// KV token selection and cost report per timestep.
    Slim(SlimArgs),
    /// Run the full editing pipeline.
    Run(RunArgs),
    /// Consistency of an edited volume.
    Metrics(MetricsArgs),
    /// y–t slice of a frame volume with clip boundaries.
    Yt(YtArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Full spec as TOML or JSON; overrides the flags below.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Comma-separated scene lengths.
    #[arg(long, value_delimiter = ',', default_value = "10,10")]
    scenes: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    h: usize,
    #[arg(long, default_value_t = 8)]
    w: usize,
    #[arg(long, default_value_t = 16)]
    d: usize,
    #[arg(long, default_value_t = 0.9)]
    floor: f64,
    #[arg(long, default_value_t = 0.2)]
    ceiling: f64,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// `identity`, `shift:ROWS,COLS` or `block:SIZE`.
    #[arg(long, default_value = "identity")]
    motion: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Ground truth (scene starts and per-frame permutations) as JSON.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct PartitionArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value_t = 0.75)]
    ms: f64,
    #[arg(long, default_value_t = 0.6)]
    ws: f64,
    #[arg(long, default_value_t = 42)]
    window: usize,
    #[arg(long, default_value_t = 21)]
    step: usize,
    #[arg(long, value_enum, default_value_t = BoundaryMode::Literal)]
    boundary: BoundaryMode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct KeyframesArgs {
    #[arg(long)]
    partition: PathBuf,
    #[arg(long, default_value_t = 50)]
    timesteps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Always pick each clip's first frame.
    #[arg(long)]
    fixed_keyframes: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SlimArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    keyframes: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BUDGET_FRAMES)]
    budget_frames: usize,
    #[arg(long, default_value_t = 8)]
    d_head: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// `full-esa` runs the brute-force reference instead of slimmed attention.
    #[arg(long, value_enum)]
    oracle: Option<AttentionMode>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    /// Edited volume `n × h × w × c`.
    #[arg(long)]
    edited: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    partition: PathBuf,
    #[arg(long)]
    keyframes: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct YtArgs {
    /// Frame or feature volume `n × h × w × c`.
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    partition: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Boundary list as JSON.
    #[arg(long)]
    boundaries: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Partition(a) => partition(a),
        Command::Keyframes(a) => keyframes(a),
        Command::Slim(a) => slim(a),
        Command::Run(a) => run(a),
        Command::Metrics(a) => metrics(a),
        Command::Yt(a) => yt(a),
    }
}

fn parse_motion(s: &str) -> Result<Motion> {
    let bad = || Error::Config(format!("unknown motion `{s}`"));
    let num = |v: &str| v.trim().parse::<usize>().map_err(|_| bad());
    match s.split_once(':') {
        None if s == "identity" => Ok(Motion::Identity),
        Some(("shift", rest)) => {
            let (r, c) = rest.split_once(',').ok_or_else(bad)?;
            Ok(Motion::CyclicShift {
                rows: num(r)?,
                cols: num(c)?,
            })
        }
        Some(("block", b)) => Ok(Motion::BlockPermutation { block: num(b)? }),
        _ => Err(bad()),
    }
}

/// Writes a line to stdout, tolerating a closed pipe.
fn emit(line: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn load_config_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    } else {
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

fn load_features(path: &Path) -> Result<FeatureVolume> {
    tensor_read(path).and_then(FeatureVolume::from_tensor)
}

fn load_partition(path: &Path) -> Result<ClipPartition> {
    let p: ClipPartition = read_json(path)?;
    ClipPartition::new(p.n, p.starts)
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(path) => load_config_file(path)?,
        None => SyntheticSpec {
            n: a.scenes.iter().sum(),
            h: a.h,
            w: a.w,
            d: a.d,
            scene_lengths: a.scenes.clone(),
            floor: a.floor,
            ceiling: a.ceiling,
            motion: parse_motion(&a.motion)?,
            noise: a.noise,
            seed: a.seed,
        },
    };
    let video = synth_video(&spec)?;
    tensor_write(video.features.tensor(), &a.out)?;
    if let Some(path) = &a.truth {
        #[derive(Serialize)]
        struct Truth<'a> {
            scene_starts: &'a [usize],
            permutations: &'a [Vec<usize>],
        }
        write_json(
            path,
            &Truth {
                scene_starts: &video.scene_starts,
                permutations: &video.permutations,
            },
        )?;
    }
    Ok(())
}

fn partition(a: PartitionArgs) -> Result<()> {
    let params = PartitionParams {
        window: a.window,
        step: a.step,
        mean_threshold: a.ms,
        window_threshold: a.ws,
        boundary: a.boundary,
    };
    params.validate()?;
    let features = load_features(&a.features)?;
    let cache = HeatmapCache::new(Arc::new(features));
    let part = adaptive_partition(&cache, &params)?;
    write_json(&a.out, &part)
}

fn keyframes(a: KeyframesArgs) -> Result<()> {
    let part = load_partition(&a.partition)?;
    let mode = if a.fixed_keyframes {
        KeyframeMode::Fixed
    } else {
        KeyframeMode::Uniform
    };
    let schedule = select_keyframes(&part, a.timesteps, a.seed, mode)?;
    write_json(&a.out, &schedule)
}

#[derive(Serialize)]
struct SlimStep {
    t: usize,
    keyframes: Vec<usize>,
    cost: CostReport,
    /// Retained tokens per keyframe ordinal, one row per query.
    kept_per_frame: Vec<Vec<usize>>,
}

fn slim(a: SlimArgs) -> Result<()> {
    if a.budget_frames == 0 {
        return Err(Error::Config("budget-frames must be >= 1".into()));
    }
    let features = load_features(&a.features)?;
    let schedule: KeyframeSchedule = read_json(&a.keyframes)?;
    let hw = features.tokens_per_frame();
    let n = features.n();
    let cache = HeatmapCache::new(Arc::new(features));
    let mut steps = Vec::with_capacity(schedule.timesteps);
    for t in 0..schedule.timesteps {
        let keys = schedule.at(t).to_vec();
        if let Some(&bad) = keys.iter().find(|&&f| f >= n) {
            return Err(Error::Index(format!(
                "keyframe {bad} at timestep {t} >= {n} frames"
            )));
        }
        let m = keys.len();
        let per_query = attention_cost(m, hw, a.budget_frames, a.d_head, a.heads)?;
        let mut cost = CostReport::default();
        let mut kept_per_frame = Vec::with_capacity(m);
        for q in 0..m {
            let sel = select_kv_tokens(q, &keys, &cache, a.budget_frames)
                .map_err(|e| e.in_stage("selection", format!("timestep {t} query {q}")))?;
            kept_per_frame.push(sel.kept_per_frame());
            cost.accumulate(&per_query);
        }
        steps.push(SlimStep {
            t,
            keyframes: keys,
            cost,
            kept_per_frame,
        });
    }
    write_json(&a.report, &steps)
}

fn run(a: RunArgs) -> Result<()> {
    let mut config: PipelineConfig = load_config_file(&a.config)?;
    if let Some(mode) = a.oracle {
        config.attention = mode;
    }
    config.validate()?;
    let out = run_pipeline(&config)?;
    if let Some(dir) = &a.out_dir {
        out.write(dir)?;
    }
    let r = &out.report;
    emit(&format!(
        "frames {} clips {} timesteps {} kv ratio {:.6} peak kv tokens {} consistency {}",
        r.n,
        r.clips,
        r.timesteps,
        r.total_cost.ratio,
        r.kv.peak_tokens,
        r.consistency
            .mean
            .map_or_else(|| "n/a".to_string(), |m| format!("{m:.6}")),
    ));
    Ok(())
}

fn metrics(a: MetricsArgs) -> Result<()> {
    let edited = tensor_read(&a.edited)?;
    let features = load_features(&a.features)?;
    let part = load_partition(&a.partition)?;
    let schedule = match &a.keyframes {
        Some(path) => read_json(path)?,
        None => KeyframeSchedule {
            timesteps: 1,
            schedule: vec![part.starts.clone()],
        },
    };
    let corr = correspondences_for(&features, &part, &schedule)?;
    let report = consistency_metrics(&edited, &corr, &part)?;
    match &a.out {
        Some(path) => write_json(path, &report),
        None => {
            emit(&serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(())
        }
    }
}

fn yt(a: YtArgs) -> Result<()> {
    let frames = tensor_read(&a.frames)?;
    let part = load_partition(&a.partition)?;
    let plot = yt_diagnostic(&frames, &part)?;
    tensor_write(&plot.image, &a.out)?;
    match &a.boundaries {
        Some(path) => write_json(path, &serde_json::json!({ "boundaries": plot.boundaries })),
        None => {
            emit(&serde_json::json!({ "boundaries": plot.boundaries }).to_string());
            Ok(())
        }
    }
}
