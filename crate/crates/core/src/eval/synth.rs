//! Seeded synthetic scenes with known camera poses.
//!
//! Each landmark carries a code of four symbols from an alphabet of eight,
//! expanded to a 160-value signature: the first 128 values are the one-hot
//! code repeated four times, the last 32 the one-hot code once. Image
//! descriptors are noisy copies of the first part, cloud descriptors of the
//! second, so true pairs agree symbol by symbol. Distractors are extra cloud
//! keypoints at random places that reuse the code of a real landmark.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::descfile::{write_desc2d, write_desc3d, DescSet2D, DescSet3D};
use crate::error::{Error, Result};
use crate::features2d::{Keypoint2D, SIFT_DIM};
use crate::geometry::{project, CameraIntrinsics, CameraPose, Pixel, Vec3};
use crate::mining::{Observation, TrackImage, TrackPoint, TrackStore};
use crate::par;

pub const CODE_LEN: usize = 4;
pub const ALPHABET: usize = 8;
pub const CODE_DIM: usize = CODE_LEN * ALPHABET;
pub const SIGNATURE_DIM: usize = SIFT_DIM + CODE_DIM;
/// Distinct codes available.
pub const MAX_LANDMARKS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub landmarks: usize,
    /// Distractor count as a fraction of `landmarks`.
    pub distractor_fraction: f64,
    pub train_views: usize,
    pub query_views: usize,
    pub sigma_2d: f64,
    pub sigma_3d: f64,
    /// Gaussian noise on observed pixels.
    pub pixel_noise: f64,
    /// Landmarks are uniform in a cube of this half side around the origin.
    pub half_extent: f64,
    pub camera_distance: f64,
    /// Observations kept per view, sampled from the visible landmarks.
    pub max_observations: usize,
    pub min_visible: usize,
    pub max_attempts: usize,
    pub intrinsics: CameraIntrinsics,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            landmarks: 2000,
            distractor_fraction: 0.3,
            train_views: 30,
            query_views: 10,
            sigma_2d: 0.05,
            sigma_3d: 0.05,
            pixel_noise: 0.5,
            half_extent: 10.0,
            camera_distance: 35.0,
            max_observations: 200,
            min_visible: 50,
            max_attempts: 20,
            intrinsics: CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).expect("valid intrinsics"),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(format!("synthetic scene: {msg}")));
        if self.landmarks == 0 || self.landmarks > MAX_LANDMARKS {
            return bad(&format!("landmarks must be in 1..={MAX_LANDMARKS}"));
        }
        if !(self.distractor_fraction >= 0.0) {
            return bad("distractor_fraction must be non-negative");
        }
        if !(self.sigma_2d >= 0.0 && self.sigma_3d >= 0.0 && self.pixel_noise >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        if !(self.half_extent > 0.0 && self.camera_distance > 0.0) {
            return bad("half_extent and camera_distance must be positive");
        }
        if self.max_observations == 0 || self.max_attempts == 0 {
            return bad("max_observations and max_attempts must be positive");
        }
        if self.min_visible > self.max_observations {
            return bad("min_visible exceeds max_observations");
        }
        Ok(())
    }

    pub fn distractors(&self) -> usize {
        (self.distractor_fraction * self.landmarks as f64).round() as usize
    }
}

pub type Code = [u8; CODE_LEN];

/// Full signature of a code.
pub fn signature(code: &Code) -> Vec<f64> {
    let mut onehot = [0.0; CODE_DIM];
    for (row, &symbol) in code.iter().enumerate() {
        onehot[row * ALPHABET + symbol as usize] = 1.0;
    }
    let mut sig: Vec<f64> = (0..SIFT_DIM).map(|i| onehot[i % CODE_DIM]).collect();
    sig.extend_from_slice(&onehot);
    sig
}

fn gaussian(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("sigma is finite and non-negative")
}

/// Image half of the signature plus noise, unit length.
pub fn descriptor_2d(code: &Code, sigma: f64, rng: &mut impl Rng) -> Vec<f32> {
    let noise = gaussian(sigma);
    let mut v: Vec<f64> = signature(code)[..SIFT_DIM].iter().map(|s| s + noise.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v.into_iter().map(|x| x as f32).collect()
}

/// Cloud half of the signature plus noise, clamped at zero, each group of
/// `ALPHABET` values summing to one.
pub fn descriptor_3d(code: &Code, sigma: f64, rng: &mut impl Rng) -> Vec<f32> {
    let noise = gaussian(sigma);
    let mut v: Vec<f64> = signature(code)[SIFT_DIM..].iter().map(|s| (s + noise.sample(rng)).max(0.0)).collect();
    for row in v.chunks_mut(ALPHABET) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|x| *x /= s);
        } else {
            row.fill(1.0 / ALPHABET as f64);
        }
    }
    v.into_iter().map(|x| x as f32).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub config: SynthConfig,
    pub seed: u64,
    pub landmarks: Vec<Vec3>,
    pub codes: Vec<Code>,
    /// Distractor positions and the landmark whose code each one copies.
    pub distractors: Vec<(Vec3, usize)>,
    /// Training views first, then queries. Observations index `landmarks`.
    pub tracks: TrackStore,
    /// Per image id, one keypoint per observation in landmark order.
    pub desc2d: BTreeMap<String, DescSet2D>,
    /// Landmarks first, then distractors.
    pub desc3d: DescSet3D,
}

impl SyntheticScene {
    pub fn query_ids(&self) -> Vec<String> {
        self.tracks.images.iter().filter(|i| i.query).map(|i| i.id.clone()).collect()
    }

    pub fn ground_truth(&self) -> BTreeMap<String, CameraPose> {
        self.tracks.images.iter().filter(|i| i.query).map(|i| (i.id.clone(), i.pose)).collect()
    }

    /// Diagonal of the landmarks' bounding box.
    pub fn diameter(&self) -> f64 {
        bounding_diagonal(&self.landmarks)
    }
}

pub fn bounding_diagonal(points: &[Vec3]) -> f64 {
    let Some(first) = points.first() else { return 0.0 };
    let (lo, hi) = points.iter().fold((*first, *first), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
    (hi - lo).norm()
}

struct View {
    pose: CameraPose,
    /// (landmark, observed pixel)
    seen: Vec<(usize, Pixel)>,
}

fn sample_view(config: &SynthConfig, landmarks: &[Vec3], rng: &mut impl Rng) -> Option<View> {
    let k = &config.intrinsics;
    let noise = gaussian(config.pixel_noise);
    let azimuth = rng.random_range(0.0..std::f64::consts::TAU);
    let elevation = rng.random_range(-15.0f64..45.0).to_radians();
    let distance = config.camera_distance * rng.random_range(0.8..1.2);
    let eye = distance * Vec3::new(elevation.cos() * azimuth.cos(), elevation.cos() * azimuth.sin(), elevation.sin());
    let h = 0.2 * config.half_extent;
    let target = Vec3::new(rng.random_range(-h..h), rng.random_range(-h..h), rng.random_range(-h..h));
    let pose = CameraPose::look_at(&eye, &target, &Vec3::z()).ok()?;
    let mut visible = Vec::new();
    for (i, p) in landmarks.iter().enumerate() {
        let (du, dv) = (noise.sample(rng), noise.sample(rng));
        let Some(px) = project(&pose, k, p) else { continue };
        let seen = Pixel::new(px.u + du, px.v + dv);
        if k.contains(&px) && k.contains(&seen) {
            visible.push((i, seen));
        }
    }
    if visible.len() < config.min_visible {
        return None;
    }
    if visible.len() > config.max_observations {
        let mut keep = index::sample(rng, visible.len(), config.max_observations).into_vec();
        keep.sort_unstable();
        visible = keep.into_iter().map(|i| visible[i]).collect();
    }
    Some(View { pose, seen: visible })
}

/// Generates a scene. The same config and seed always give the same scene.
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<SyntheticScene> {
    config.validate()?;
    let mut rng = par::rng_stream(seed, 0);
    let e = config.half_extent;
    let cube = |rng: &mut rand_chacha::ChaCha8Rng| {
        Vec3::new(rng.random_range(-e..e), rng.random_range(-e..e), rng.random_range(-e..e))
    };
    let landmarks: Vec<Vec3> = (0..config.landmarks).map(|_| cube(&mut rng)).collect();
    let mut all_codes: Vec<u16> = (0..MAX_LANDMARKS as u16).collect();
    all_codes.shuffle(&mut rng);
    let codes: Vec<Code> = all_codes[..config.landmarks]
        .iter()
        .map(|&c| std::array::from_fn(|d| ((c >> (3 * d)) & 7) as u8))
        .collect();
    let distractors: Vec<(Vec3, usize)> = (0..config.distractors())
        .map(|_| (cube(&mut rng), rng.random_range(0..config.landmarks)))
        .collect();

    let total_views = config.train_views + config.query_views;
    let mut views = Vec::with_capacity(total_views);
    for v in 0..total_views {
        let mut attempts = 0;
        let view = loop {
            if let Some(view) = sample_view(config, &landmarks, &mut rng) {
                break view;
            }
            attempts += 1;
            if attempts >= config.max_attempts {
                return Err(Error::Precondition(format!(
                    "view {v} saw fewer than {} landmarks in {} attempts",
                    config.min_visible, config.max_attempts
                )));
            }
        };
        views.push(view);
    }

    let mut images = Vec::with_capacity(total_views);
    let mut points: Vec<TrackPoint> = landmarks
        .iter()
        .map(|p| TrackPoint {
            position: [p.x, p.y, p.z],
            observations: Vec::new(),
        })
        .collect();
    let mut desc2d = BTreeMap::new();
    for (v, view) in views.iter().enumerate() {
        let query = v >= config.train_views;
        let id = if query {
            format!("query_{:03}", v - config.train_views)
        } else {
            format!("train_{v:03}")
        };
        let mut set = DescSet2D {
            dim: SIFT_DIM,
            ..Default::default()
        };
        for &(l, px) in &view.seen {
            points[l].observations.push(Observation { image: v, u: px.u, v: px.v });
            set.keypoints.push(Keypoint2D {
                u: px.u,
                v: px.v,
                scale: 1.6,
                orientation: 0.0,
            });
            set.values.extend(descriptor_2d(&codes[l], config.sigma_2d, &mut rng));
        }
        desc2d.insert(id.clone(), set);
        images.push(TrackImage {
            id,
            pose: view.pose,
            intrinsics: config.intrinsics,
            query,
        });
    }

    let mut desc3d = DescSet3D {
        dim: CODE_DIM,
        ..Default::default()
    };
    for (p, code) in landmarks.iter().zip(&codes) {
        desc3d.positions.push(*p);
        desc3d.values.extend(descriptor_3d(code, config.sigma_3d, &mut rng));
    }
    for (p, twin) in &distractors {
        desc3d.positions.push(*p);
        desc3d.values.extend(descriptor_3d(&codes[*twin], config.sigma_3d, &mut rng));
    }

    Ok(SyntheticScene {
        config: *config,
        seed,
        landmarks,
        codes,
        distractors,
        tracks: TrackStore { images, points },
        desc2d,
        desc3d,
    })
}

pub const TRACKS_FILE: &str = "tracks.json";
pub const CLOUD_DESC_FILE: &str = "cloud.dsc";
pub const DESC2D_DIR: &str = "desc2d";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const SCENE_FILE: &str = "scene.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneInfo {
    pub config: SynthConfig,
    pub seed: u64,
    pub diameter: f64,
    pub landmarks: usize,
    pub distractors: usize,
}

pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<BTreeMap<String, CameraPose>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes the track store, descriptor files, ground-truth query poses and a
/// scene summary under `dir`.
pub fn write_scene(scene: &SyntheticScene, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let desc_dir = dir.join(DESC2D_DIR);
    fs::create_dir_all(&desc_dir).map_err(|e| Error::io(&desc_dir, e))?;
    scene.tracks.save(dir.join(TRACKS_FILE))?;
    write_desc3d(dir.join(CLOUD_DESC_FILE), &scene.desc3d)?;
    for (id, set) in &scene.desc2d {
        write_desc2d(desc_dir.join(format!("{id}.dsc")), set)?;
    }
    write_json(&dir.join(GROUND_TRUTH_FILE), &scene.ground_truth())?;
    write_json(
        &dir.join(SCENE_FILE),
        &SceneInfo {
            config: scene.config,
            seed: scene.seed,
            diameter: scene.diameter(),
            landmarks: scene.landmarks.len(),
            distractors: scene.distractors.len(),
        },
    )
}
