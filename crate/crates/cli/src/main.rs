use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dvm_core::eval::{accuracy_with_diameter, default_area_scale, euclidean_error, geodesic_error};
use dvm_core::geodesics::geodesic_matrix;
use dvm_core::geometry::normalize_cloud;
use dvm_core::io::{self, PixelIndex};
use dvm_core::projection::{render_views, Axis, ProjectionRecord};
use dvm_core::solver::ViewFeatures;
use dvm_core::{
    match_pair, DenseMap, FeatureImage, GeodesicMatrix, GroundTruth, MatchMode, MatchResult, PointCloud, RunConfig,
};
use log::{info, warn};

#[derive(Parser)]
#[command(name = "dvm", version, about = "Dense correspondence between non-rigid point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the three depth-colored views of a cloud (PNG) and their pixel records (DVPR).
    Project {
        cloud: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compute the all-pairs heat-method geodesic matrix (DVGM).
    Geodesics {
        cloud: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Laplacian neighbours (defaults to the config value).
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Register source onto target; writes PREFIX.map, PREFIX.dvtx and PREFIX.log.
    Register(RegisterArgs),
    /// Register, then evaluate the map against ground truth.
    Match {
        #[command(flatten)]
        register: RegisterArgs,
        /// Ground-truth file (line i = true target index of source point i).
        #[arg(long)]
        gt: PathBuf,
        #[command(flatten)]
        metrics: MetricArgs,
    },
    /// Evaluate a map file against ground truth.
    Eval {
        map: PathBuf,
        gt: PathBuf,
        target: PathBuf,
        /// Target geodesic matrix; adds the geodesic_error row.
        #[arg(long)]
        geodesics: Option<PathBuf>,
        #[command(flatten)]
        metrics: MetricArgs,
    },
}

#[derive(Args)]
struct RegisterArgs {
    source: PathBuf,
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Directory holding {z,x,y}.dvfm and optionally {z,x,y}.dvpr for the source.
    #[arg(long)]
    features_source: Option<PathBuf>,
    #[arg(long)]
    features_target: Option<PathBuf>,
    #[arg(long)]
    geodesics_source: Option<PathBuf>,
    #[arg(long)]
    geodesics_target: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct MetricArgs {
    /// Accuracy tolerances as fractions of the target diameter.
    #[arg(long, value_delimiter = ',', default_value = "0.01")]
    eps: Vec<f64>,
    /// Normaliser for geodesic error (defaults to the target bounding-box diagonal).
    #[arg(long)]
    area_scale: Option<f64>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    Partial,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Format {
    Text,
    Tsv,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_project(cloud: &Path, out: &Path, height: Option<usize>, width: Option<usize>, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let cloud = io::read_cloud(cloud).with_context(|| format!("reading {}", cloud.display()))?;
    let (h, w) = (height.unwrap_or(cfg.image_height), width.unwrap_or(cfg.image_width));
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    // The matcher lifts features from the normalized cloud, so the views are rendered from it too.
    let (normalized, _) = normalize_cloud(&cloud);
    for (axis, (image, rec)) in Axis::ALL.iter().zip(render_views(&normalized, h, w)?) {
        io::write_png(&out.join(format!("{}.png", axis.name())), &image)?;
        io::write_binary(&out.join(format!("{}.dvpr", axis.name())), &PixelIndex(rec.pixels))?;
    }
    info!("wrote 3 views of {} points to {}", cloud.len(), out.display());
    Ok(())
}

fn cmd_geodesics(cloud: &Path, out: &Path, k: Option<usize>, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let cloud = io::read_cloud(cloud).with_context(|| format!("reading {}", cloud.display()))?;
    let m = geodesic_matrix(&cloud, k.unwrap_or(cfg.geodesic_k), cfg.geodesic_time_scale)?;
    io::write_binary(out, &m)?;
    Ok(())
}

/// Loads per-view features; `None` when any DVFM file is absent.
fn load_view_features(dir: &Path) -> Result<Option<ViewFeatures>> {
    let mut images = Vec::with_capacity(3);
    let mut records = Vec::with_capacity(3);
    for axis in Axis::ALL {
        let fm = dir.join(format!("{}.dvfm", axis.name()));
        if !fm.exists() {
            warn!("{} not found", fm.display());
            return Ok(None);
        }
        let image: FeatureImage = io::read_binary(&fm).with_context(|| format!("reading {}", fm.display()))?;
        let pr = dir.join(format!("{}.dvpr", axis.name()));
        if pr.exists() {
            let px: PixelIndex = io::read_binary(&pr).with_context(|| format!("reading {}", pr.display()))?;
            let mut rec = ProjectionRecord::from_pixels(image.height, image.width, px.0)
                .with_context(|| format!("{} does not fit {}", pr.display(), fm.display()))?;
            rec.axis = axis;
            records.push(rec);
        }
        images.push(image);
    }
    let records = match records.len() {
        0 => None,
        3 => Some(records.try_into().unwrap()),
        _ => bail!("{}: projection records must be given for all three views or none", dir.display()),
    };
    Ok(Some(ViewFeatures { images: images.try_into().unwrap(), records }))
}

fn run_register(args: &RegisterArgs) -> Result<(PointCloud, MatchResult)> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(m) = args.mode {
        cfg.solver.mode = match m {
            ModeArg::Full => MatchMode::Full,
            ModeArg::Partial => MatchMode::Partial,
        };
    }
    if let Some(seed) = args.seed {
        cfg.solver.seed = seed;
    }
    let source = io::read_cloud(&args.source).with_context(|| format!("reading {}", args.source.display()))?;
    let target = io::read_cloud(&args.target).with_context(|| format!("reading {}", args.target.display()))?;

    let mut options = cfg.match_options();
    let sf = args.features_source.as_deref().map(load_view_features).transpose()?.flatten();
    let tf = args.features_target.as_deref().map(load_view_features).transpose()?.flatten();
    match (sf, tf) {
        (Some(s), Some(t)) => {
            options.source_features = Some(s);
            options.target_features = Some(t);
        }
        _ => warn!("visual features unavailable for source or target; matching with positional encoding only"),
    }
    let read_geo = |p: &Option<PathBuf>| -> Result<Option<GeodesicMatrix>> {
        p.as_deref()
            .map(|p| io::read_binary(p).with_context(|| format!("reading {}", p.display())))
            .transpose()
    };
    options.source_geodesics = read_geo(&args.geodesics_source)?;
    options.target_geodesics = read_geo(&args.geodesics_target)?;

    let result = match_pair(&source, &target, &options, &cfg.solver)?;
    let prefix = args.out.as_os_str();
    let with_ext = |ext: &str| {
        let mut p = prefix.to_owned();
        p.push(ext);
        PathBuf::from(p)
    };
    io::write_dense_map(&with_ext(".map"), &result.map)?;
    io::write_binary(&with_ext(".dvtx"), &result.report.transforms)?;
    io::write_atomic(&with_ext(".log"), result.report.to_log().as_bytes())?;
    info!(
        "{} outer iterations in {:.2?}, converged={}",
        result.report.history.len(),
        result.report.wall_time,
        result.report.converged
    );
    Ok((target, result))
}

fn metrics_table(
    map: &DenseMap,
    gt: &GroundTruth,
    target: &PointCloud,
    geodesics: Option<&GeodesicMatrix>,
    args: &MetricArgs,
) -> Result<String> {
    let mut rows = vec![("euclidean_error".to_string(), euclidean_error(map, gt, target)?)];
    let diameter = target.diameter();
    for &eps in &args.eps {
        rows.push((format!("accuracy@{eps}"), accuracy_with_diameter(map, gt, target, eps, diameter)?));
    }
    if let Some(m) = geodesics {
        if m.len() != target.len() {
            bail!("geodesic matrix has {} rows, target has {} points", m.len(), target.len());
        }
        let scale = args.area_scale.unwrap_or_else(|| default_area_scale(target));
        rows.push(("geodesic_error".to_string(), geodesic_error(map, gt, m, scale)?));
    }
    let mut out = String::new();
    match args.format {
        Format::Tsv => {
            out.push_str("metric\tvalue\n");
            for (k, v) in rows {
                writeln!(out, "{k}\t{v}")?;
            }
        }
        Format::Text => {
            let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
            for (k, v) in rows {
                writeln!(out, "{k:<width$}  {v:.6}")?;
            }
        }
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Project { cloud, out, height, width, config } => {
            cmd_project(&cloud, &out, height, width, config.as_deref())
        }
        Command::Geodesics { cloud, out, k, config } => cmd_geodesics(&cloud, &out, k, config.as_deref()),
        Command::Register(args) => run_register(&args).map(|_| ()),
        Command::Match { register, gt, metrics } => {
            let (target, result) = run_register(&register)?;
            let gt = io::read_ground_truth(&gt, target.len())?;
            print!("{}", metrics_table(&result.map, &gt, &target, None, &metrics)?);
            Ok(())
        }
        Command::Eval { map, gt, target, geodesics, metrics } => {
            let target = io::read_cloud(&target).with_context(|| format!("reading {}", target.display()))?;
            let map = io::read_dense_map(&map, target.len())?;
            let gt = io::read_ground_truth(&gt, target.len())?;
            let geo: Option<GeodesicMatrix> = geodesics.as_deref().map(io::read_binary).transpose()?;
            print!("{}", metrics_table(&map, &gt, &target, geo.as_ref(), &metrics)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(raw) = std::env::var("DVM_THREADS") {
        match raw.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    warn!("could not size thread pool: {e}");
                }
            }
            _ => warn!("ignoring DVM_THREADS={raw}: expected a positive integer"),
        }
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
