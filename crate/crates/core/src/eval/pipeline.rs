//! Runs filter, extraction, mining, training, localization and evaluation in
//! a work directory. Every stage persists its outputs together with a stamp
//! holding a digest of its configuration and inputs; a rerun skips stages
//! whose stamp still matches.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Config, TrainConfig};
use crate::descfile::{read_desc2d, read_desc3d, write_desc2d, write_desc3d, DescSet2D, DescSet3D};
use crate::error::{Error, Result};
use crate::eval::synth::{self, read_ground_truth, SyntheticScene};
use crate::eval::{evaluate, format_csv, format_table, ErrorRecord, ErrorSummary};
use crate::features2d::{load_image, sift, SiftParams, SIFT_DIM};
use crate::features3d::{extract_features3d, Features3dConfig};
use crate::geometry::CameraPose;
use crate::matcher::{validate_split, DescriptorMatcher, ValidationReport};
use crate::mining::{
    build_training_set, build_zeta, expand_one_to_one, read_training_set, sidecar_path, strip_query_points,
    write_training_set, MiningConfig, TrackStore, TrainingMeta, TrainingSet,
};
use crate::par;
use crate::pointcloud::{read_ply, sor_filter, write_ply, PlyFormat};
use crate::pose::{localize, LocalizationResult};

pub const FILTERED_CLOUD: &str = "filtered.ply";
pub const CLOUD_DESC: &str = "cloud.dsc";
pub const CLOUD_INFO: &str = "cloud.json";
pub const DESC2D_DIR: &str = "desc2d";
pub const TRAINING_SET: &str = "training.trs";
pub const MODEL: &str = "model.json";
pub const VALIDATION: &str = "validation.json";
pub const RESULTS_DIR: &str = "results";
pub const REPORT: &str = "report.json";
pub const TABLE_TXT: &str = "table.txt";
pub const TABLE_CSV: &str = "table.csv";
pub const STAMPS_DIR: &str = "stamps";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ran,
    /// Outputs and stamp were up to date.
    Cached,
    /// Inputs were supplied precomputed.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub status: StageStatus,
}

/// Machine-readable result of a run. Contains no timings, so identical
/// inputs give identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub summary: ErrorSummary,
    pub records: Vec<ErrorRecord>,
    pub training: Option<TrainingMeta>,
    pub validation: Option<ValidationReport>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub report: PipelineReport,
    pub stages: Vec<StageRecord>,
}

/// Spacing and counts from the 3D extraction stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CloudInfo {
    pub spacing: f64,
    pub keypoints: usize,
    pub usable: usize,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Loads `<dir>/<id>.dsc` for every image id given.
pub fn load_desc2d_dir<'a>(dir: &Path, ids: impl IntoIterator<Item = &'a str>) -> Result<BTreeMap<String, DescSet2D>> {
    ids.into_iter()
        .map(|id| Ok((id.to_string(), read_desc2d(dir.join(format!("{id}.dsc")))?)))
        .collect()
}

/// Training pairs from the non-query part of `tracks`. `spacing` resolves
/// unset mining thresholds.
pub fn mine_training_set(
    tracks: &TrackStore,
    desc3d: &DescSet3D,
    desc2d: &BTreeMap<String, DescSet2D>,
    config: &MiningConfig,
    spacing: Option<f64>,
) -> Result<(TrainingSet, TrainingMeta)> {
    let params = config.resolve(spacing)?;
    let query_ids: Vec<String> = tracks.images.iter().filter(|i| i.query).map(|i| i.id.clone()).collect();
    let training = strip_query_points(tracks, &query_ids);
    let mut by_index = BTreeMap::new();
    for (i, img) in training.images.iter().enumerate().filter(|(_, i)| !i.query) {
        let set = desc2d
            .get(&img.id)
            .ok_or_else(|| Error::Precondition(format!("no 2D descriptors for image {}", img.id)))?;
        by_index.insert(i, set.clone());
    }
    let zeta = build_zeta(&desc3d.positions, &training.positions(), params.alpha)?;
    let expansion = expand_one_to_one(&zeta, &training, &by_index, params.pixel_tol)?;
    build_training_set(&zeta, &expansion, &by_index, desc3d, &params)
}

pub fn train_matcher(data: &TrainingSet, config: &TrainConfig) -> Result<(DescriptorMatcher, ValidationReport)> {
    validate_split(data, config.holdout_fraction, &config.grid, config.seed)
}

/// Localizes every query image of `tracks`, in track order.
pub fn localize_queries(
    tracks: &TrackStore,
    desc2d: &BTreeMap<String, DescSet2D>,
    matcher: &DescriptorMatcher,
    cloud: &DescSet3D,
    config: &Config,
) -> Result<Vec<(String, LocalizationResult)>> {
    let queries: Vec<_> = tracks.images.iter().filter(|i| i.query).collect();
    let results = par::map_slice(&queries, |img| {
        let set = desc2d
            .get(&img.id)
            .ok_or_else(|| Error::Precondition(format!("no 2D descriptors for query {}", img.id)))?;
        let r = localize(set, matcher, cloud, &img.intrinsics, &config.matching, &config.localize)?;
        log::info!("{}: {} with {} inliers of {} matches", img.id, r.status, r.inliers.len(), r.matches);
        Ok((img.id.clone(), r))
    });
    results.into_iter().collect()
}

/// Ground truth from a file if given, otherwise the query poses stored in
/// the track store.
pub fn ground_truth(tracks: &TrackStore, path: Option<&Path>) -> Result<BTreeMap<String, CameraPose>> {
    match path {
        Some(p) => read_ground_truth(p),
        None => Ok(tracks.images.iter().filter(|i| i.query).map(|i| (i.id.clone(), i.pose)).collect()),
    }
}

struct Fingerprint(Sha256);

impl Fingerprint {
    fn new(stage: &str) -> Self {
        let mut h = Sha256::new();
        h.update(stage.as_bytes());
        Fingerprint(h)
    }

    fn config(mut self, value: &impl Serialize) -> Result<Self> {
        self.0.update(serde_json::to_vec(value)?);
        Ok(self)
    }

    fn text(mut self, s: &str) -> Self {
        self.0.update((s.len() as u64).to_le_bytes());
        self.0.update(s.as_bytes());
        self
    }

    fn file(mut self, path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.0.update((bytes.len() as u64).to_le_bytes());
        self.0.update(&bytes);
        Ok(self)
    }

    fn finish(self) -> String {
        self.0.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

struct Runner<'a> {
    work: &'a Path,
    stages: Vec<StageRecord>,
}

impl Runner<'_> {
    fn stamp_path(&self, stage: &str) -> PathBuf {
        self.work.join(STAMPS_DIR).join(format!("{stage}.sha256"))
    }

    /// Runs `body` unless the stamp for `stage` equals `fingerprint` and
    /// every output exists.
    fn stage(
        &mut self,
        stage: &'static str,
        fingerprint: String,
        outputs: &[PathBuf],
        body: impl FnOnce() -> Result<()>,
    ) -> Result<String> {
        let stamp = self.stamp_path(stage);
        let fresh = fs::read_to_string(&stamp).is_ok_and(|s| s.trim() == fingerprint) && outputs.iter().all(|p| p.exists());
        let status = if fresh {
            log::info!("stage {stage}: up to date");
            StageStatus::Cached
        } else {
            log::info!("stage {stage}: running");
            let _ = fs::remove_file(&stamp);
            body().map_err(|e| Error::Stage {
                stage,
                source: Box::new(e),
            })?;
            write_text(&stamp, &fingerprint)?;
            StageStatus::Ran
        };
        self.stages.push(StageRecord {
            stage: stage.into(),
            status,
        });
        Ok(fingerprint)
    }

    fn skipped(&mut self, stage: &'static str) {
        self.stages.push(StageRecord {
            stage: stage.into(),
            status: StageStatus::Skipped,
        });
    }
}

fn stage_err(stage: &'static str) -> impl Fn(Error) -> Error {
    move |e| Error::Stage {
        stage,
        source: Box::new(e),
    }
}

/// Runs every stage into `work` and writes the report, the aligned text
/// table and the CSV table there.
pub fn run_pipeline(config: &Config, work: impl AsRef<Path>) -> Result<PipelineOutcome> {
    let work = work.as_ref();
    create_dir(&work.join(STAMPS_DIR))?;
    let inputs = &config.inputs;
    let tracks_path = inputs
        .tracks
        .clone()
        .ok_or_else(|| Error::InvalidParameter("inputs.tracks is required".into()))?;
    let tracks = TrackStore::load(&tracks_path)?;
    let tracks_fp = Fingerprint::new("tracks").file(&tracks_path)?.finish();
    let mut run = Runner { work, stages: Vec::new() };

    // 3D side.
    let (cloud_desc_path, cloud_fp, spacing) = match (&inputs.cloud, &inputs.cloud_desc) {
        (Some(cloud), _) => {
            let filtered = work.join(FILTERED_CLOUD);
            let fp = Fingerprint::new("filter").config(&config.filter)?.file(cloud)?.finish();
            let fp = run.stage("filter", fp, std::slice::from_ref(&filtered), || {
                let raw = read_ply(cloud)?;
                let result = sor_filter(&raw, &config.filter)?;
                log::info!("filter removed {} of {} points", result.removed.len(), raw.len());
                write_ply(&result.cloud, &filtered, PlyFormat::BinaryLittleEndian)
            })?;
            let desc = work.join(CLOUD_DESC);
            let info = work.join(CLOUD_INFO);
            let fp = Fingerprint::new("extract3d").config(&config.extract3d)?.text(&fp).finish();
            let fp = run.stage("extract3d", fp, &[desc.clone(), info.clone()], || {
                extract_cloud(&filtered, &config.extract3d, &desc, &info).map(drop)
            })?;
            let info: CloudInfo = read_json(&info)?;
            (desc, fp, Some(info.spacing))
        }
        (None, Some(desc)) => {
            run.skipped("filter");
            run.skipped("extract3d");
            (desc.clone(), Fingerprint::new("cloud_desc").file(desc)?.finish(), None)
        }
        (None, None) => return Err(Error::InvalidParameter("set inputs.cloud or inputs.cloud_desc".into())),
    };

    // 2D side.
    let ids: Vec<&str> = tracks.images.iter().map(|i| i.id.as_str()).collect();
    let (desc2d_dir, images_fp) = match (&inputs.images, &inputs.desc2d) {
        (Some(images), _) => {
            let out = work.join(DESC2D_DIR);
            let mut fp = Fingerprint::new("extract2d").config(&config.extract2d)?.text(&tracks_fp);
            let paths: Vec<PathBuf> = ids.iter().map(|id| images.join(format!("{id}.{}", inputs.image_ext))).collect();
            for p in &paths {
                fp = fp.file(p)?;
            }
            let outputs: Vec<PathBuf> = ids.iter().map(|id| out.join(format!("{id}.dsc"))).collect();
            let fp = run.stage("extract2d", fp.finish(), &outputs, || {
                create_dir(&out)?;
                extract_images(&paths, &outputs, &config.extract2d)
            })?;
            (out, fp)
        }
        (None, Some(dir)) => {
            run.skipped("extract2d");
            let mut fp = Fingerprint::new("desc2d");
            for id in &ids {
                fp = fp.file(&dir.join(format!("{id}.dsc")))?;
            }
            (dir.clone(), fp.finish())
        }
        (None, None) => return Err(Error::InvalidParameter("set inputs.images or inputs.desc2d".into())),
    };

    // Mining and training.
    let trs = work.join(TRAINING_SET);
    let mine_fp = Fingerprint::new("mine")
        .config(&config.mining)?
        .text(&tracks_fp)
        .text(&cloud_fp)
        .text(&images_fp)
        .finish();
    let mine_fp = run.stage("mine", mine_fp, &[trs.clone(), sidecar_path(&trs)], || {
        let desc3d = read_desc3d(&cloud_desc_path)?;
        let desc2d = load_desc2d_dir(&desc2d_dir, tracks.images.iter().filter(|i| !i.query).map(|i| i.id.as_str()))?;
        let (set, meta) = mine_training_set(&tracks, &desc3d, &desc2d, &config.mining, spacing)?;
        write_training_set(&trs, &set, &meta)
    })?;
    let model_path = work.join(MODEL);
    let validation_path = work.join(VALIDATION);
    let train_fp = Fingerprint::new("train").config(&config.train)?.text(&mine_fp).finish();
    let train_fp = run.stage("train", train_fp, &[model_path.clone(), validation_path.clone()], || {
        let data = read_training_set(&trs)?;
        let (model, report) = train_matcher(&data, &config.train)?;
        log::info!("chose {:?} with held-out accuracy {:.4}", report.chosen, report.accuracy);
        model.save(&model_path)?;
        write_json(&validation_path, &report)
    })?;

    // Localization.
    let results_dir = work.join(RESULTS_DIR);
    let query_ids: Vec<&str> = tracks.images.iter().filter(|i| i.query).map(|i| i.id.as_str()).collect();
    let result_paths: Vec<PathBuf> = query_ids.iter().map(|id| results_dir.join(format!("{id}.json"))).collect();
    let loc_fp = Fingerprint::new("localize")
        .config(&config.matching)?
        .config(&config.localize)?
        .text(&train_fp)
        .text(&cloud_fp)
        .text(&images_fp)
        .text(&tracks_fp)
        .finish();
    let loc_fp = run.stage("localize", loc_fp, &result_paths, || {
        create_dir(&results_dir)?;
        let matcher = DescriptorMatcher::load(&model_path)?;
        let cloud = read_desc3d(&cloud_desc_path)?;
        let desc2d = load_desc2d_dir(&desc2d_dir, query_ids.iter().copied())?;
        for ((_, r), path) in localize_queries(&tracks, &desc2d, &matcher, &cloud, config)?.iter().zip(&result_paths) {
            write_json(path, r)?;
        }
        Ok(())
    })?;

    // Evaluation.
    let report_path = work.join(REPORT);
    let mut eval_fp = Fingerprint::new("evaluate").text(&loc_fp).text(&tracks_fp);
    if let Some(gt) = &inputs.ground_truth {
        eval_fp = eval_fp.file(gt)?;
    }
    let outputs = [report_path.clone(), work.join(TABLE_TXT), work.join(TABLE_CSV)];
    run.stage("evaluate", eval_fp.finish(), &outputs, || {
        let gt = ground_truth(&tracks, inputs.ground_truth.as_deref())?;
        let results = query_ids
            .iter()
            .zip(&result_paths)
            .map(|(id, p)| Ok((id.to_string(), read_json::<LocalizationResult>(p)?)))
            .collect::<Result<Vec<_>>>()?;
        let (summary, records) = evaluate(&results, &gt)?;
        let side = sidecar_path(&trs);
        let report = PipelineReport {
            training: Some(read_json(&side)?),
            validation: Some(read_json(&validation_path)?),
            summary,
            records,
        };
        write_json(&report_path, &report)?;
        write_text(&outputs[1], &format_table(&report.summary))?;
        write_text(&outputs[2], &format_csv(&report.summary))
    })?;
    let report: PipelineReport = read_json(&report_path).map_err(stage_err("evaluate"))?;
    write_json(&work.join("stages.json"), &run.stages)?;
    Ok(PipelineOutcome {
        report,
        stages: run.stages,
    })
}

/// Reads a cloud, extracts 3D features and writes the descriptor file plus
/// a summary with the cloud spacing.
pub fn extract_cloud(cloud: &Path, config: &Features3dConfig, desc_out: &Path, info_out: &Path) -> Result<CloudInfo> {
    let cloud = read_ply(cloud)?;
    let features = extract_features3d(&cloud, config)?;
    let dim = config.distance_bins * config.gradient_bins;
    let set = DescSet3D::from_features(&features.keypoints, &features.descriptors, dim)?;
    write_desc3d(desc_out, &set)?;
    let info = CloudInfo {
        spacing: features.spacing,
        keypoints: features.keypoints.len(),
        usable: set.len(),
    };
    write_json(info_out, &info)?;
    Ok(info)
}

/// SIFT on one image, keeping keypoints with valid descriptors.
pub fn extract_image(path: &Path, params: &SiftParams) -> Result<DescSet2D> {
    let image = load_image(path)?;
    let (kps, descs) = sift(&image, params)?;
    DescSet2D::from_features(&kps, &descs, SIFT_DIM)
}

fn extract_images(paths: &[PathBuf], outputs: &[PathBuf], params: &SiftParams) -> Result<()> {
    let done = par::map_range(paths.len(), |i| {
        let set = extract_image(&paths[i], params)?;
        write_desc2d(&outputs[i], &set)
    });
    done.into_iter().collect()
}

/// Generates a synthetic scene into `<work>/scene` and runs the pipeline on
/// it. An unset mining `alpha` becomes a thousandth of the scene diameter,
/// since the scene has exact track positions.
pub fn run_synthetic(config: &Config, seed: u64, work: impl AsRef<Path>) -> Result<(SyntheticScene, PipelineOutcome)> {
    let work = work.as_ref();
    let scene = synth::synth_generate(&config.synth, seed).map_err(stage_err("synth"))?;
    let dir = work.join("scene");
    synth::write_scene(&scene, &dir)?;
    let mut config = config.clone();
    config.inputs = crate::config::Inputs {
        cloud_desc: Some(dir.join(synth::CLOUD_DESC_FILE)),
        tracks: Some(dir.join(synth::TRACKS_FILE)),
        desc2d: Some(dir.join(synth::DESC2D_DIR)),
        ground_truth: Some(dir.join(synth::GROUND_TRUTH_FILE)),
        ..Default::default()
    };
    if config.mining.alpha.is_none() {
        config.mining.alpha = Some(1e-3 * scene.diameter());
    }
    let outcome = run_pipeline(&config, work)?;
    Ok((scene, outcome))
}
