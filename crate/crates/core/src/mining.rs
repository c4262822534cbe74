//! Training data for the descriptor matcher: joining cloud keypoints to
//! reconstructed track points, expanding them to one pair per observing 2D
//! keypoint, and sampling distant pairs as negatives.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::descfile::{DescSet2D, DescSet3D};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, CameraPose, Vec3};
use crate::par;
use crate::pointcloud::{KdTree, SpatialIndex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackImage {
    pub id: String,
    pub pose: CameraPose,
    pub intrinsics: CameraIntrinsics,
    #[serde(default)]
    pub query: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub image: usize,
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub position: [f64; 3],
    pub observations: Vec<Observation>,
}

/// Reconstructed points with their image observations, plus per-image poses.
/// Observations refer to images by position in `images`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrackStore {
    pub images: Vec<TrackImage>,
    pub points: Vec<TrackPoint>,
}

impl TrackStore {
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for img in &self.images {
            if !ids.insert(img.id.as_str()) {
                return Err(Error::InvalidParameter(format!("duplicate image id {}", img.id)));
            }
        }
        for (i, p) in self.points.iter().enumerate() {
            for o in &p.observations {
                let img = self
                    .images
                    .get(o.image)
                    .ok_or_else(|| Error::InvalidParameter(format!("point {i} observed in unknown image {}", o.image)))?;
                let k = &img.intrinsics;
                if !(o.u >= 0.0 && o.v >= 0.0 && o.u < k.width as f64 && o.v < k.height as f64) {
                    return Err(Error::InvalidParameter(format!(
                        "point {i}: observation ({}, {}) outside image {}",
                        o.u, o.v, img.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn image_index(&self, id: &str) -> Option<usize> {
        self.images.iter().position(|i| i.id == id)
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.points.iter().map(|p| Vec3::from(p.position)).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let store: TrackStore = serde_json::from_str(&text)?;
        store.validate()?;
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Removes points seen only by query images and drops query observations
/// from the rest. Image entries are kept so indices stay valid.
pub fn strip_query_points(tracks: &TrackStore, query_ids: &[String]) -> TrackStore {
    let query: BTreeSet<usize> = query_ids.iter().filter_map(|id| tracks.image_index(id)).collect();
    let points = tracks
        .points
        .iter()
        .filter_map(|p| {
            let kept: Vec<Observation> = p.observations.iter().filter(|o| !query.contains(&o.image)).copied().collect();
            let only_query = !p.observations.is_empty() && kept.is_empty();
            (!only_query).then_some(TrackPoint {
                position: p.position,
                observations: kept,
            })
        })
        .collect();
    TrackStore {
        images: tracks.images.clone(),
        points,
    }
}

/// Pairs `(i, j)` of cloud keypoint `i` and track point `j` closer than
/// `alpha`, sorted.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CorrespondenceIndex {
    pub pairs: Vec<(usize, usize)>,
}

pub fn build_zeta(keys3d: &[Vec3], sparse: &[Vec3], alpha: f64) -> Result<CorrespondenceIndex> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidParameter("alpha must be positive".into()));
    }
    let index = SpatialIndex::from_vec3(sparse);
    let per_key = par::map_slice(keys3d, |k| index.within3(k, alpha));
    let pairs = per_key
        .into_iter()
        .enumerate()
        .flat_map(|(i, nn)| nn.into_iter().map(move |n| (i, n.index)))
        .collect();
    Ok(CorrespondenceIndex { pairs })
}

/// A 3D keypoint joined to one 2D keypoint that observes its track point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub key3d: usize,
    pub sparse: usize,
    pub image: usize,
    pub key2d: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Expansion {
    pub triples: Vec<Triple>,
    /// Observations without a 2D keypoint within tolerance.
    pub skipped: usize,
}

/// For every pair in `zeta` and every observation of its track point, finds
/// the nearest 2D keypoint of that image within `pixel_tol` and emits one
/// triple. `keypoints` maps image index to that image's descriptor set.
pub fn expand_one_to_one(
    zeta: &CorrespondenceIndex,
    tracks: &TrackStore,
    keypoints: &BTreeMap<usize, DescSet2D>,
    pixel_tol: f64,
) -> Result<Expansion> {
    if zeta.pairs.iter().any(|&(_, j)| j >= tracks.points.len()) {
        return Err(Error::InvalidParameter("correspondence refers to a missing track point".into()));
    }
    let trees: BTreeMap<usize, KdTree<2>> = keypoints
        .iter()
        .map(|(&img, set)| (img, KdTree::new(set.keypoints.iter().map(|k| [k.u, k.v]).collect())))
        .collect();
    let per_pair = par::map_slice(&zeta.pairs, |&(i, j)| {
        let mut found = Vec::new();
        let mut skipped = 0;
        for o in &tracks.points[j].observations {
            let hit = trees
                .get(&o.image)
                .and_then(|t| t.nearest(&[o.u, o.v]))
                .filter(|n| n.distance <= pixel_tol);
            match hit {
                Some(n) => found.push(Triple {
                    key3d: i,
                    sparse: j,
                    image: o.image,
                    key2d: n.index,
                }),
                None => skipped += 1,
            }
        }
        (found, skipped)
    });
    let mut out = Expansion::default();
    for (found, skipped) in per_pair {
        out.triples.extend(found);
        out.skipped += skipped;
    }
    if out.skipped > 0 {
        log::info!("{} observations had no 2D keypoint within {pixel_tol} px", out.skipped);
    }
    Ok(out)
}

/// Mining thresholds. `alpha` and `beta` default to multiples of the dense
/// cloud's median point spacing when left unset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningConfig {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub negative_ratio: f64,
    pub pixel_tol: f64,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            alpha: None,
            beta: None,
            negative_ratio: 1.0,
            pixel_tol: 2.0,
            seed: 0,
        }
    }
}

/// Fully resolved mining thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiningParams {
    pub alpha: f64,
    pub beta: f64,
    pub negative_ratio: f64,
    pub pixel_tol: f64,
    pub seed: u64,
}

impl MiningConfig {
    pub fn resolve(&self, spacing: Option<f64>) -> Result<MiningParams> {
        let alpha = match (self.alpha, spacing) {
            (Some(a), _) => a,
            (None, Some(s)) => 2.0 * s,
            (None, None) => return Err(Error::InvalidParameter("alpha unset and cloud spacing unknown".into())),
        };
        let beta = self.beta.unwrap_or(10.0 * alpha);
        let p = MiningParams {
            alpha,
            beta,
            negative_ratio: self.negative_ratio,
            pixel_tol: self.pixel_tol,
            seed: self.seed,
        };
        p.validate()?;
        Ok(p)
    }
}

impl MiningParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.beta > self.alpha) || !(self.negative_ratio > 0.0) || !(self.pixel_tol >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "mining needs alpha > 0, beta > alpha, negative_ratio > 0, pixel_tol >= 0 (got {self:?})"
            )));
        }
        Ok(())
    }
}

/// A negative pair: the 2D keypoint of `source` against 3D keypoint `key3d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Negative {
    pub source: Triple,
    pub key3d: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Negatives {
    pub pairs: Vec<Negative>,
    /// Requested minus produced.
    pub shortfall: usize,
}

const NEGATIVE_ATTEMPTS_PER_SAMPLE: usize = 50;

/// Samples `round(ratio * |triples|)` pairs of (a triple's 2D keypoint, a
/// uniformly drawn 3D keypoint) whose 3D keypoint lies more than `beta` from
/// the triple's own 3D keypoint.
pub fn generate_negatives(triples: &[Triple], keys3d: &[Vec3], params: &MiningParams, rng: &mut impl Rng) -> Negatives {
    let wanted = (params.negative_ratio * triples.len() as f64).round() as usize;
    let mut out = Negatives::default();
    if triples.is_empty() || keys3d.is_empty() {
        out.shortfall = wanted;
        return out;
    }
    let budget = wanted.saturating_mul(NEGATIVE_ATTEMPTS_PER_SAMPLE);
    let mut attempts = 0;
    while out.pairs.len() < wanted && attempts < budget {
        attempts += 1;
        let source = triples[rng.random_range(0..triples.len())];
        let key3d = rng.random_range(0..keys3d.len());
        if (keys3d[key3d] - keys3d[source.key3d]).norm() > params.beta {
            out.pairs.push(Negative { source, key3d });
        }
    }
    out.shortfall = wanted - out.pairs.len();
    if out.shortfall > 0 {
        log::warn!("only {} of {wanted} negatives are more than beta = {} apart", out.pairs.len(), params.beta);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub image: usize,
    pub key2d: usize,
    pub key3d: usize,
}

/// Labeled concatenated descriptors, 2D part first. Features are row-major.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingSet {
    pub dim: usize,
    pub features: Vec<f32>,
    pub labels: Vec<bool>,
    pub provenance: Vec<Provenance>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    /// Rows `idx` in that order.
    pub fn subset(&self, idx: &[usize]) -> TrainingSet {
        let mut out = TrainingSet {
            dim: self.dim,
            ..Default::default()
        };
        for &i in idx {
            out.features.extend_from_slice(self.row(i));
            out.labels.push(self.labels[i]);
            if let Some(p) = self.provenance.get(i) {
                out.provenance.push(*p);
            }
        }
        out
    }

    pub fn push(&mut self, feature: &[f32], label: bool, provenance: Provenance) -> Result<()> {
        if feature.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: feature.len() });
        }
        self.features.extend_from_slice(feature);
        self.labels.push(label);
        self.provenance.push(provenance);
        Ok(())
    }
}

/// Counts and thresholds recorded next to a training set file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub params: MiningParams,
    pub positives: usize,
    pub negatives: usize,
    pub negative_shortfall: usize,
    pub skipped_observations: usize,
    pub zeta_pairs: usize,
    /// Fraction of 3D keypoints that appear in at least one pair.
    pub keypoint_retention: f64,
    pub dim: usize,
    #[serde(default)]
    pub extractor: serde_json::Value,
}

/// Positives from `triples`, negatives sampled with `params`, shuffled under
/// the seed.
pub fn build_training_set(
    zeta: &CorrespondenceIndex,
    expansion: &Expansion,
    desc2d: &BTreeMap<usize, DescSet2D>,
    desc3d: &DescSet3D,
    params: &MiningParams,
) -> Result<(TrainingSet, TrainingMeta)> {
    params.validate()?;
    let dim2 = match desc2d.values().next() {
        Some(s) => s.dim,
        None if expansion.triples.is_empty() => 0,
        None => return Err(Error::Precondition("no 2D descriptors".into())),
    };
    if let Some(s) = desc2d.values().find(|s| s.dim != dim2) {
        return Err(Error::DimensionMismatch { expected: dim2, got: s.dim });
    }
    let dim = dim2 + desc3d.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let negatives = generate_negatives(&expansion.triples, &desc3d.positions, params, &mut rng);
    let mut set = TrainingSet {
        dim,
        ..Default::default()
    };
    let mut feature = Vec::with_capacity(dim);
    let mut add = |t: &Triple, key3d: usize, label: bool, set: &mut TrainingSet| -> Result<()> {
        let s2 = desc2d
            .get(&t.image)
            .ok_or_else(|| Error::Precondition(format!("no 2D descriptors for image {}", t.image)))?;
        if t.key2d >= s2.len() || key3d >= desc3d.len() {
            return Err(Error::Precondition("triple refers to a missing descriptor".into()));
        }
        feature.clear();
        feature.extend_from_slice(s2.row(t.key2d));
        feature.extend_from_slice(desc3d.row(key3d));
        set.push(
            &feature,
            label,
            Provenance {
                image: t.image,
                key2d: t.key2d,
                key3d,
            },
        )
    };
    for t in &expansion.triples {
        add(t, t.key3d, true, &mut set)?;
    }
    for n in &negatives.pairs {
        add(&n.source, n.key3d, false, &mut set)?;
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut rng);
    let set = set.subset(&order);
    let retained: BTreeSet<usize> = zeta.pairs.iter().map(|p| p.0).collect();
    let meta = TrainingMeta {
        params: *params,
        positives: expansion.triples.len(),
        negatives: negatives.pairs.len(),
        negative_shortfall: negatives.shortfall,
        skipped_observations: expansion.skipped,
        zeta_pairs: zeta.pairs.len(),
        keypoint_retention: if desc3d.is_empty() {
            0.0
        } else {
            retained.len() as f64 / desc3d.len() as f64
        },
        dim,
        extractor: serde_json::Value::Null,
    };
    log::info!(
        "training set: {} positives, {} negatives, {:.1}% of 3D keypoints in zeta",
        meta.positives,
        meta.negatives,
        100.0 * meta.keypoint_retention
    );
    Ok((set, meta))
}

const TRS_MAGIC: &[u8; 4] = b"TRS1";

/// `TRS1` binary: magic, count `u64`, dim `u32`, then per record a label
/// byte and `dim` `f32` values, little endian.
pub fn encode_training_set(set: &TrainingSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + set.len() * (1 + 4 * set.dim));
    out.extend_from_slice(TRS_MAGIC);
    out.extend_from_slice(&(set.len() as u64).to_le_bytes());
    out.extend_from_slice(&(set.dim as u32).to_le_bytes());
    for i in 0..set.len() {
        out.push(set.labels[i] as u8);
        for v in set.row(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_training_set(data: &[u8]) -> Result<TrainingSet> {
    if data.len() < 16 || &data[..4] != TRS_MAGIC {
        return Err(Error::parse("TRS1", "byte 0", "missing TRS1 header"));
    }
    let count = u64::from_le_bytes(data[4..12].try_into().expect("length checked")) as usize;
    let dim = u32::from_le_bytes(data[12..16].try_into().expect("length checked")) as usize;
    let record = 1 + 4 * dim;
    if count.checked_mul(record).and_then(|b| b.checked_add(16)) != Some(data.len()) {
        return Err(Error::parse(
            "TRS1",
            format!("byte {}", data.len()),
            format!("header declares {count} records of {record} bytes"),
        ));
    }
    let mut set = TrainingSet {
        dim,
        features: Vec::with_capacity(count * dim),
        labels: Vec::with_capacity(count),
        provenance: Vec::new(),
    };
    for rec in data[16..].chunks_exact(record) {
        set.labels.push(match rec[0] {
            0 => false,
            1 => true,
            other => return Err(Error::parse("TRS1", "record", format!("label byte {other}"))),
        });
        set.features
            .extend(rec[1..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("chunk of 4"))));
    }
    Ok(set)
}

/// The JSON sidecar lives next to the binary with `.json` appended.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_training_set(path: impl AsRef<Path>, set: &TrainingSet, meta: &TrainingMeta) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_training_set(set)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(meta)?).map_err(|e| Error::io(&side, e))
}

pub fn read_training_set(path: impl AsRef<Path>) -> Result<TrainingSet> {
    let path = path.as_ref();
    decode_training_set(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
