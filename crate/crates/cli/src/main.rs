//! `cloudloc` command-line interface. Every subcommand reads the optional
//! `--config` JSON; flags override its fields.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cloudloc_core::config::Config;
use cloudloc_core::descfile::{read_desc2d, read_desc3d, write_desc2d};
use cloudloc_core::eval::pipeline::{self, extract_cloud, extract_image, load_desc2d_dir, mine_training_set};
use cloudloc_core::eval::synth::{read_ground_truth, synth_generate, write_scene};
use cloudloc_core::eval::{evaluate, format_csv, format_table};
use cloudloc_core::geometry::CameraIntrinsics;
use cloudloc_core::matcher::{match_descriptors, DescriptorMatcher, ForestParams};
use cloudloc_core::mining::{read_training_set, write_training_set, TrackStore};
use cloudloc_core::pointcloud::{read_ply, sor_filter, write_ply, PlyFormat};
use cloudloc_core::pose::{localize, LocalizationResult};
use cloudloc_core::{Error, Result};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "cloudloc", version, about = "Camera localization in dense point clouds")]
struct Cli {
    /// JSON configuration with per-stage sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Statistical outlier removal on a PLY cloud.
    Filter(FilterArgs),
    /// Harris keypoints and RIFT descriptors from a PLY cloud.
    Extract3d(Extract3dArgs),
    /// SIFT keypoints and descriptors from a PGM/PPM image.
    Extract2d(Extract2dArgs),
    /// Builds a labeled training set from tracks and descriptor files.
    Mine(MineArgs),
    /// Trains and validates the descriptor matcher.
    Train(TrainArgs),
    /// Scores image descriptors against cloud descriptors.
    Match(MatchArgs),
    /// Estimates the pose of one query image.
    Localize(LocalizeArgs),
    /// Error statistics for a directory of localization results.
    Evaluate(EvaluateArgs),
    /// Writes a synthetic scene.
    Synth(SynthArgs),
    /// Runs every stage in a work directory.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    stddev_mult: Option<f64>,
    #[arg(long)]
    ascii: bool,
}

#[derive(Args)]
struct Extract3dArgs {
    #[arg(long)]
    cloud: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Where to write spacing and keypoint counts. Defaults to `<out>.json`.
    #[arg(long)]
    info: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct Extract2dArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    contrast_thresh: Option<f32>,
}

#[derive(Args)]
struct MineArgs {
    #[arg(long)]
    tracks: PathBuf,
    #[arg(long)]
    cloud_desc: PathBuf,
    /// Directory of `<image id>.dsc` files.
    #[arg(long)]
    desc2d_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Dense cloud spacing used for unset thresholds.
    #[arg(long)]
    spacing: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Replaces the configured grid with a single forest of this size.
    #[arg(long)]
    trees: Option<usize>,
    #[arg(long, requires = "trees")]
    features_per_split: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    cloud_desc: PathBuf,
    #[arg(long)]
    image_desc: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
}

#[derive(Args)]
struct LocalizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    cloud_desc: PathBuf,
    #[arg(long, conflicts_with = "image_desc", required_unless_present = "image_desc")]
    image: Option<PathBuf>,
    #[arg(long)]
    image_desc: Option<PathBuf>,
    #[arg(long)]
    intrinsics: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory of `<query id>.json` localization results.
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    ground_truth: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    workdir: PathBuf,
    /// Generate a synthetic scene from the `synth` section and run on it.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    tracks: Option<PathBuf>,
    #[arg(long)]
    cloud: Option<PathBuf>,
    #[arg(long)]
    cloud_desc: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    desc2d: Option<PathBuf>,
    #[arg(long)]
    ground_truth: Option<PathBuf>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    match cli.command {
        Command::Filter(a) => {
            config.filter.k = a.k.unwrap_or(config.filter.k);
            config.filter.stddev_mult = a.stddev_mult.unwrap_or(config.filter.stddev_mult);
            let cloud = read_ply(&a.input)?;
            let result = sor_filter(&cloud, &config.filter)?;
            log::info!("removed {} of {} points", result.removed.len(), cloud.len());
            let format = if a.ascii { PlyFormat::Ascii } else { PlyFormat::BinaryLittleEndian };
            write_ply(&result.cloud, &a.output, format)
        }
        Command::Extract3d(a) => {
            config.extract3d.threshold = a.threshold.unwrap_or(config.extract3d.threshold);
            let info = a.info.unwrap_or_else(|| cloudloc_core::mining::sidecar_path(&a.out));
            let summary = extract_cloud(&a.cloud, &config.extract3d, &a.out, &info)?;
            log::info!("{} usable descriptors of {} keypoints", summary.usable, summary.keypoints);
            Ok(())
        }
        Command::Extract2d(a) => {
            config.extract2d.contrast_thresh = a.contrast_thresh.unwrap_or(config.extract2d.contrast_thresh);
            let set = extract_image(&a.image, &config.extract2d)?;
            log::info!("{} keypoints with valid descriptors", set.len());
            write_desc2d(&a.out, &set)
        }
        Command::Mine(a) => {
            config.mining.alpha = a.alpha.or(config.mining.alpha);
            config.mining.beta = a.beta.or(config.mining.beta);
            config.mining.seed = a.seed.unwrap_or(config.mining.seed);
            let tracks = TrackStore::load(&a.tracks)?;
            let desc3d = read_desc3d(&a.cloud_desc)?;
            let ids = tracks.images.iter().filter(|i| !i.query).map(|i| i.id.as_str());
            let desc2d = load_desc2d_dir(&a.desc2d_dir, ids)?;
            let (set, meta) = mine_training_set(&tracks, &desc3d, &desc2d, &config.mining, a.spacing)?;
            write_training_set(&a.out, &set, &meta)
        }
        Command::Train(a) => {
            if let Some(n_trees) = a.trees {
                config.train.grid = vec![ForestParams {
                    n_trees,
                    features_per_split: a.features_per_split,
                    ..Default::default()
                }];
            }
            config.train.seed = a.seed.unwrap_or(config.train.seed);
            let data = read_training_set(&a.data)?;
            let (model, report) = pipeline::train_matcher(&data, &config.train)?;
            log::info!("held-out accuracy {:.4} with {:?}", report.accuracy, report.chosen);
            model.save(&a.out)
        }
        Command::Match(a) => {
            config.matching.tau = a.tau.unwrap_or(config.matching.tau);
            config.matching.top_k = a.top_k.unwrap_or(config.matching.top_k);
            let model = DescriptorMatcher::load(&a.model)?;
            let cloud = read_desc3d(&a.cloud_desc)?;
            let query = read_desc2d(&a.image_desc)?;
            let matches = match_descriptors(&model, &query, &cloud, &config.matching, None)?;
            write_json(&a.out, &matches)
        }
        Command::Localize(a) => {
            config.localize.seed = a.seed.unwrap_or(config.localize.seed);
            let model = DescriptorMatcher::load(&a.model)?;
            let cloud = read_desc3d(&a.cloud_desc)?;
            let query = match (&a.image, &a.image_desc) {
                (Some(img), _) => extract_image(img, &config.extract2d)?,
                (None, Some(desc)) => read_desc2d(desc)?,
                (None, None) => unreachable!("clap requires one of them"),
            };
            let k = read_intrinsics(&a.intrinsics)?;
            let result = localize(&query, &model, &cloud, &k, &config.matching, &config.localize)?;
            log::info!("{} with {} inliers of {} matches", result.status, result.inliers.len(), result.matches);
            write_json(&a.out, &result)
        }
        Command::Evaluate(a) => {
            let mut results = Vec::new();
            let entries = fs::read_dir(&a.results).map_err(|e| io_err(&a.results, e))?;
            let mut paths: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            paths.sort();
            for p in paths {
                let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
                let r: LocalizationResult = serde_json::from_str(&text)?;
                results.push((id, r));
            }
            let gt = read_ground_truth(&a.ground_truth)?;
            let (summary, records) = evaluate(&results, &gt)?;
            let mut report = BTreeMap::new();
            report.insert("summary", serde_json::to_value(&summary)?);
            report.insert("records", serde_json::to_value(&records)?);
            write_json(&a.out, &report)?;
            let table = format_table(&summary);
            if let Some(t) = &a.table {
                fs::write(t, &table).map_err(|e| io_err(t, e))?;
            }
            if let Some(c) = &a.csv {
                fs::write(c, format_csv(&summary)).map_err(|e| io_err(c, e))?;
            }
            print!("{table}");
            Ok(())
        }
        Command::Synth(a) => {
            let scene = synth_generate(&config.synth, a.seed)?;
            write_scene(&scene, &a.out)?;
            log::info!(
                "{} landmarks, {} distractors, {} images",
                scene.landmarks.len(),
                scene.distractors.len(),
                scene.tracks.images.len()
            );
            Ok(())
        }
        Command::Pipeline(a) => {
            let inputs = &mut config.inputs;
            for (flag, slot) in [
                (a.tracks, &mut inputs.tracks),
                (a.cloud, &mut inputs.cloud),
                (a.cloud_desc, &mut inputs.cloud_desc),
                (a.images, &mut inputs.images),
                (a.desc2d, &mut inputs.desc2d),
                (a.ground_truth, &mut inputs.ground_truth),
            ] {
                if flag.is_some() {
                    *slot = flag;
                }
            }
            let outcome = if a.synthetic {
                pipeline::run_synthetic(&config, a.seed, &a.workdir)?.1
            } else {
                pipeline::run_pipeline(&config, &a.workdir)?
            };
            print!("{}", format_table(&outcome.report.summary));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_invalid_input() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
