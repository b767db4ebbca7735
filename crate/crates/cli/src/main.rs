//! `semloc`: build dense semantic maps, localize queries against them and
//! report accuracy.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use semloc::config::{load_buckets, PipelineConfig};
use semloc::eval::{evaluate_by_condition, render_report, BucketSets};
use semloc::io::{read_cameras, read_map, write_bytes, write_map, Dataset};
use semloc::map::{build_map, filter_depth_maps};
use semloc::pipeline::{Estimates, Localizer};
use semloc::synth::{SceneSpec, SyntheticScene};
use semloc::Error;

#[derive(Parser, Debug)]
#[command(
    name = "semloc",
    version,
    about = "Visual localization against a dense semantic map"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        /// Scene spec (TOML); the built-in street scene when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the scene without descriptor noise.
        #[arg(long)]
        noiseless: bool,
    },
    /// Build the dense semantic map of a dataset's database images.
    BuildMap {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Map file; a build log is written next to it as `<out>.log`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Localize every query of a dataset.
    Localize {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Estimates file (JSON).
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Compare estimates against ground truth.
    Evaluate {
        #[arg(long)]
        estimates: PathBuf,
        /// Camera file with ground-truth query poses.
        #[arg(long)]
        ground_truth: PathBuf,
        /// Bucket file (TOML with `day` and `night` lists); defaults otherwise.
        #[arg(long)]
        buckets: Option<PathBuf>,
        /// Writes `<out>.txt` and `<out>.json`.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    top_k_day: Option<usize>,
    #[arg(long)]
    top_k_night: Option<usize>,
}

fn load_config(path: Option<&Path>) -> semloc::Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn synth(
    spec: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    noiseless: bool,
) -> semloc::Result<()> {
    let mut spec = match spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            SceneSpec::from_toml(&text)?
        }
        None if noiseless => SceneSpec::noiseless(),
        None => SceneSpec::street(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let scene = SyntheticScene::generate(&spec)?;
    scene.dataset.store(out)?;
    write_bytes(&out.join("scene.toml"), spec.to_toml().as_bytes())?;
    info!(
        "synthetic dataset: {} database images, {} queries, {} anchors -> {}",
        scene.dataset.database.len(),
        scene.dataset.queries.len(),
        scene.anchors.len(),
        out.display()
    );
    Ok(())
}

fn build(dataset: &Path, config: Option<&Path>, out: &Path) -> semloc::Result<()> {
    let cfg = load_config(config)?;
    let mut ds = Dataset::load(dataset)?;
    let (map, stats) = build_map(&mut ds.database, &cfg.map)?;
    write_map(out, &map)?;

    let mut log = String::new();
    let _ = writeln!(log, "database images: {}", ds.database.len());
    let _ = writeln!(log, "valid depth pixels: {}", stats.depth_pixels_raw);
    let _ = writeln!(log, "after depth filter: {}", stats.depth_pixels_filtered);
    let _ = writeln!(log, "fused points: {}", stats.fused_points);
    let _ = writeln!(log, "labeled points: {}", stats.labeled_points);
    let _ = writeln!(
        log,
        "after removing unstable classes: {}",
        stats.stable_points
    );
    if map.is_empty() {
        let msg = "map is empty: no point survived filtering, labeling and unstable-class removal";
        warn!("{msg}");
        let _ = writeln!(log, "warning: {msg}");
    }
    let log_path = PathBuf::from(format!("{}.log", out.display()));
    write_bytes(&log_path, log.as_bytes())?;
    for line in log.lines() {
        info!("{line}");
    }
    Ok(())
}

fn localize(
    dataset: &Path,
    map: &Path,
    config: Option<&Path>,
    out: &Path,
    o: &Overrides,
) -> semloc::Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(k) = o.top_k_day {
        cfg.retrieval.top_k_day = k;
    }
    if let Some(k) = o.top_k_night {
        cfg.retrieval.top_k_night = k;
    }
    cfg.validate()?;
    let mut ds = Dataset::load(dataset)?;
    let map = read_map(map)?;
    if map.is_empty() {
        warn!("map is empty: semantic scores will all be zero");
    }
    filter_depth_maps(&mut ds.database, &cfg.map.depth_filter)?;
    let localizer = Localizer::new(&ds.database, &map, &ds.families, &cfg)?;
    let estimates = localizer.localize_all(&ds.queries)?;
    let failed = estimates
        .queries
        .iter()
        .filter(|q| q.pose.is_none())
        .count();
    info!(
        "localized {}/{} queries",
        estimates.queries.len() - failed,
        estimates.queries.len()
    );
    for q in estimates.queries.iter().filter(|q| q.pose.is_none()) {
        info!(
            "query {}: {}",
            q.id,
            q.failure.as_deref().unwrap_or("failed")
        );
    }
    let json = serde_json::to_string_pretty(&estimates).expect("estimates serialize");
    write_bytes(out, json.as_bytes())
}

fn evaluate(
    estimates: &Path,
    ground_truth: &Path,
    buckets: Option<&Path>,
    out: &Path,
) -> semloc::Result<()> {
    let text = std::fs::read_to_string(estimates).map_err(|e| Error::Io {
        path: estimates.to_path_buf(),
        source: e,
    })?;
    let est: Estimates = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: estimates.to_path_buf(),
        message: e.to_string(),
    })?;
    let gt = read_cameras(ground_truth)?
        .into_iter()
        .map(|c| (c.id, c.pose))
        .collect();
    let buckets = match buckets {
        Some(p) => load_buckets(p)?,
        None => BucketSets::default(),
    };
    let reports = evaluate_by_condition(&est.poses()?, &gt, &est.conditions(), &buckets)?;
    let rendered = render_report(&reports);
    let json = serde_json::to_string_pretty(&reports).expect("reports serialize");
    write_bytes(&out.with_extension("txt"), rendered.as_bytes())?;
    write_bytes(&out.with_extension("json"), json.as_bytes())?;
    for line in rendered.lines() {
        info!("{line}");
    }
    Ok(())
}

fn run(cli: Cli) -> semloc::Result<()> {
    match &cli.command {
        Command::Synth {
            spec,
            out,
            seed,
            noiseless,
        } => synth(spec.as_deref(), out, *seed, *noiseless),
        Command::BuildMap {
            dataset,
            config,
            out,
        } => build(dataset, config.as_deref(), out),
        Command::Localize {
            dataset,
            map,
            config,
            out,
            overrides,
        } => localize(dataset, map, config.as_deref(), out, overrides),
        Command::Evaluate {
            estimates,
            ground_truth,
            buckets,
            out,
        } => evaluate(estimates, ground_truth, buckets.as_deref(), out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();

    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 1 })
        }
    }
}
