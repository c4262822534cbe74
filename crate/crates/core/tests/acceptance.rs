//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero on any failure not listed in `KNOWN_FAILURES`.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use nalgebra::UnitQuaternion;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use cloudloc_core::config::Config;
use cloudloc_core::descfile::DescSet2D;
use cloudloc_core::eval::pipeline::run_synthetic;
use cloudloc_core::eval::synth::{descriptor_2d, descriptor_3d, Code, ALPHABET, CODE_LEN, SIGNATURE_DIM};
use cloudloc_core::eval::{Percentiles, PERCENTILES};
use cloudloc_core::features2d::Keypoint2D;
use cloudloc_core::features3d::{detect_harris3d, extract_rift, HarrisParams, Keypoint3D, RiftParams};
use cloudloc_core::geometry::{bearing, project, rotation_error_deg, CameraIntrinsics, CameraPose, Pixel, Rotation, Vec3};
use cloudloc_core::matcher::{validate_split, DescriptorMatcher, ForestParams};
use cloudloc_core::mining::{build_zeta, expand_one_to_one, CorrespondenceIndex, Observation, TrackImage, TrackPoint, TrackStore, TrainingSet};
use cloudloc_core::pointcloud::{estimate_normals, intensity_and_gradient, sor_filter, PointCloud, SorParams};
use cloudloc_core::pose::{mlesac_pose, p3p_solve, Correspondence, MlesacConfig};

/// Criteria that cannot pass as stated. They still run and print FAIL.
const KNOWN_FAILURES: &[u32] = &[8];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
}

fn random_unit(rng: &mut impl Rng) -> Vec3 {
    let n = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v = Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng));
        if v.norm() > 1e-6 {
            return v.normalize();
        }
    }
}

fn random_rotation(rng: &mut impl Rng) -> Rotation {
    let axis = random_unit(rng);
    Rotation::from_axis_angle(&axis, rng.random_range(0.0..std::f64::consts::PI))
}

/// Geodesic angle in degrees via atan2, precise at small angles.
fn angle_deg(a: &Rotation, b: &Rotation) -> f64 {
    let m = a.matrix() * b.matrix().transpose();
    let w = m - m.transpose();
    let s = Vec3::new(w[(2, 1)], w[(0, 2)], w[(1, 0)]).norm() / 2.0;
    let c = (m.trace() - 1.0) / 2.0;
    s.atan2(c).to_degrees()
}

fn random_pixel(rng: &mut impl Rng, k: &CameraIntrinsics) -> Pixel {
    Pixel::new(rng.random_range(0.0..k.width as f64), rng.random_range(0.0..k.height as f64))
}

/// World point seen at `px` at camera depth `z`.
fn back_project(pose: &CameraPose, k: &CameraIntrinsics, px: &Pixel, z: f64) -> Vec3 {
    let pc = Vec3::new((px.u - k.cx) / k.fx * z, (px.v - k.cy) / k.fy * z, z);
    pose.rotation.transpose().apply(&pc) + pose.center
}

fn p3p_correctness() -> Outcome {
    const N: usize = 10_000;
    let k = intrinsics();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let (mut hits, mut worst_px) = (0, 0.0f64);
    for _ in 0..N {
        let pose = CameraPose::new(random_rotation(&mut rng), Vec3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)));
        let pixels: [Pixel; 3] = std::array::from_fn(|_| random_pixel(&mut rng, &k));
        let world: [Vec3; 3] = std::array::from_fn(|i| back_project(&pose, &k, &pixels[i], rng.random_range(2.0..20.0)));
        let bearings = pixels.map(|p| bearing(&k, &p));
        let Ok(solutions) = p3p_solve(&bearings, &world) else { continue };
        let t = pose.translation();
        let mut found = false;
        for s in &solutions {
            for (w, px) in world.iter().zip(&pixels) {
                let e = project(s, &k, w).map_or(f64::INFINITY, |q| q.distance(px));
                worst_px = worst_px.max(e);
            }
            let rel = (s.translation() - t).norm() / t.norm();
            found |= angle_deg(&pose.rotation, &s.rotation) <= 1e-6 && rel <= 1e-6;
        }
        hits += found as usize;
    }
    let secs = start.elapsed().as_secs_f64();
    let rate = hits as f64 / N as f64;
    outcome(
        rate >= 0.999 && worst_px <= 1e-6 && secs < 10.0,
        format!("{hits}/{N} recovered ({:.2}%), worst reprojection {worst_px:.2e} px, {secs:.2} s", 100.0 * rate),
    )
}

fn mlesac_robustness() -> Outcome {
    const TRIALS: u64 = 100;
    let k = intrinsics();
    // Cube with a 20-unit diagonal.
    let half = 10.0 / 3f64.sqrt();
    let start = Instant::now();
    let mut good = 0;
    let mut worst = (0.0f64, 0.0f64);
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let eye = random_unit(&mut rng) * rng.random_range(25.0..35.0);
        let pose = CameraPose::look_at(&eye, &Vec3::zeros(), &Vec3::z()).unwrap();
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut corr = Vec::new();
        while corr.len() < 100 {
            let w = Vec3::new(rng.random_range(-half..half), rng.random_range(-half..half), rng.random_range(-half..half));
            let Some(p) = project(&pose, &k, &w) else { continue };
            let px = Pixel::new(p.u + noise.sample(&mut rng), p.v + noise.sample(&mut rng));
            if k.contains(&px) {
                corr.push(Correspondence::new(&k, px, w, corr.len()));
            }
        }
        while corr.len() < 200 {
            let w = Vec3::new(rng.random_range(-half..half), rng.random_range(-half..half), rng.random_range(-half..half));
            let px = random_pixel(&mut rng, &k);
            corr.push(Correspondence::new(&k, px, w, corr.len()));
        }
        corr.shuffle(&mut rng);
        let config = MlesacConfig {
            seed: trial,
            ..Default::default()
        };
        let r = mlesac_pose(&corr, &k, &config).unwrap();
        if let Some(est) = r.pose {
            let pe = (est.center - pose.center).norm();
            let re = angle_deg(&pose.rotation, &est.rotation);
            worst = (worst.0.max(pe), worst.1.max(re));
            good += (pe < 0.2 && re < 0.5) as usize;
        } else {
            worst = (f64::INFINITY, f64::INFINITY);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        good as f64 >= 0.95 * TRIALS as f64 && secs < 60.0,
        format!("{good}/{TRIALS} within 0.2 units and 0.5 deg (worst {:.3} units, {:.3} deg), {secs:.2} s", worst.0, worst.1),
    )
}

fn rotation_metric() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let (a1, a2) = (random_unit(&mut rng), random_unit(&mut rng));
        let (t1, t2) = (rng.random_range(0.0..std::f64::consts::PI), rng.random_range(0.0..std::f64::consts::PI));
        let qg = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(a1), t1);
        let qp = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(a2), t2);
        let d = qg * qp.inverse();
        let oracle = (2.0 * d.imag().norm().atan2(d.w.abs())).to_degrees();
        let got = rotation_error_deg(&Rotation::from_axis_angle(&a1, t1), &Rotation::from_axis_angle(&a2, t2));
        worst = worst.max((got - oracle).abs());
    }
    let quarter = rotation_error_deg(&Rotation::identity(), &Rotation::from_axis_angle(&Vec3::z(), std::f64::consts::FRAC_PI_2));
    let quarter_err = (quarter - 90.0).abs();
    outcome(
        worst <= 1e-7 && quarter_err <= 1e-9,
        format!("worst deviation from quaternion oracle {worst:.2e} deg over 10000 pairs, 90 deg case off by {quarter_err:.1e}"),
    )
}

fn dist(a: &Vec3, b: &Vec3) -> f64 {
    ((a.x - b.x) * (a.x - b.x) + (a.y - b.y) * (a.y - b.y) + (a.z - b.z) * (a.z - b.z)).sqrt()
}

fn random_points(rng: &mut impl Rng, n: usize, extent: f64) -> Vec<Vec3> {
    (0..n)
        .map(|_| Vec3::new(rng.random_range(0.0..extent), rng.random_range(0.0..extent), rng.random_range(0.0..extent)))
        .collect()
}

fn mining_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut zeta_ok = 0;
    for instance in 0..50 {
        // The first instance has the largest size.
        let (nk, ns) = if instance == 0 { (300, 500) } else { (rng.random_range(1..=300), rng.random_range(1..=500)) };
        let keys = random_points(&mut rng, nk, 5.0);
        let sparse = random_points(&mut rng, ns, 5.0);
        let alpha = rng.random_range(0.05..1.0);
        let mut brute = Vec::new();
        for (i, a) in keys.iter().enumerate() {
            for (j, b) in sparse.iter().enumerate() {
                if dist(a, b) < alpha {
                    brute.push((i, j));
                }
            }
        }
        let got: BTreeSet<(usize, usize)> = build_zeta(&keys, &sparse, alpha).unwrap().pairs.into_iter().collect();
        zeta_ok += (got == brute.into_iter().collect()) as usize;
    }

    let k = intrinsics();
    let tol = 2.0;
    let mut expand_ok = 0;
    const STORES: usize = 20;
    for _ in 0..STORES {
        let n_images = rng.random_range(1..6);
        let images = (0..n_images)
            .map(|i| TrackImage {
                id: format!("img{i}"),
                pose: CameraPose::identity(),
                intrinsics: k,
                query: false,
            })
            .collect();
        let mut keypoints: BTreeMap<usize, DescSet2D> = BTreeMap::new();
        let mut points = Vec::new();
        for _ in 0..rng.random_range(1..80) {
            let mut observations = Vec::new();
            for image in 0..n_images {
                if rng.random_bool(0.6) {
                    let o = Observation {
                        image,
                        u: rng.random_range(0.0..640.0),
                        v: rng.random_range(0.0..480.0),
                    };
                    // Some observations get a nearby keypoint, some a distant one.
                    let set = keypoints.entry(image).or_insert_with(|| DescSet2D { dim: 1, ..Default::default() });
                    let off = if rng.random_bool(0.7) { rng.random_range(0.0..1.5) } else { rng.random_range(3.0..40.0) };
                    let a = rng.random_range(0.0..std::f64::consts::TAU);
                    set.keypoints.push(Keypoint2D { u: o.u + off * a.cos(), v: o.v + off * a.sin(), scale: 1.6, orientation: 0.0 });
                    set.values.push(0.0);
                    observations.push(o);
                }
            }
            points.push(TrackPoint { position: [0.0; 3], observations });
        }
        let tracks = TrackStore { images, points };
        let zeta = CorrespondenceIndex {
            pairs: (0..rng.random_range(0..200)).map(|i| (i, rng.random_range(0..tracks.points.len()))).collect(),
        };
        // Counting oracle: one triple per (pair, observation) with some keypoint
        // of that image within tolerance, pointing at the nearest one.
        let mut expected = BTreeSet::new();
        let mut skipped = 0;
        for &(i, j) in &zeta.pairs {
            for o in &tracks.points[j].observations {
                let near = keypoints.get(&o.image).and_then(|set| {
                    set.keypoints
                        .iter()
                        .enumerate()
                        .map(|(n, kp)| (n, (kp.u - o.u).hypot(kp.v - o.v)))
                        .min_by(|a, b| a.1.total_cmp(&b.1))
                        .filter(|(_, d)| *d <= tol)
                });
                match near {
                    Some((n, _)) => {
                        expected.insert((i, j, o.image, n));
                    }
                    None => skipped += 1,
                }
            }
        }
        let got = expand_one_to_one(&zeta, &tracks, &keypoints, tol).unwrap();
        let got_set: BTreeSet<_> = got.triples.iter().map(|t| (t.key3d, t.sparse, t.image, t.key2d)).collect();
        expand_ok += (got.triples.len() == expected.len() && got_set == expected && got.skipped == skipped) as usize;
    }
    outcome(
        zeta_ok == 50 && expand_ok == STORES,
        format!("zeta equal on {zeta_ok}/50 instances, expansion counts equal on {expand_ok}/{STORES} track stores"),
    )
}

fn random_code(rng: &mut impl Rng) -> Code {
    std::array::from_fn(|_| rng.random_range(0..ALPHABET as u8))
}

fn matcher_sanity() -> Outcome {
    const PER_CLASS: usize = 5000;
    let sigma = 0.05;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut codes = BTreeSet::new();
    while codes.len() < 1000 {
        codes.insert(random_code(&mut rng));
    }
    let codes: Vec<Code> = codes.into_iter().collect();
    let mut data = TrainingSet {
        dim: SIGNATURE_DIM,
        ..Default::default()
    };
    for label in [true, false] {
        for _ in 0..PER_CLASS {
            let a = rng.random_range(0..codes.len());
            let b = if label {
                a
            } else {
                (a + rng.random_range(1..codes.len())) % codes.len()
            };
            data.features.extend(descriptor_2d(&codes[a], sigma, &mut rng));
            data.features.extend(descriptor_3d(&codes[b], sigma, &mut rng));
            data.labels.push(label);
        }
    }
    assert_eq!(CODE_LEN * ALPHABET + 128, data.dim);
    let grid = [ForestParams {
        n_trees: 50,
        features_per_split: Some(40),
        ..Default::default()
    }];
    let start = Instant::now();
    let (model, report) = validate_split(&data, 0.15, &grid, 0).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let reloaded = DescriptorMatcher::from_json(&model.to_json().unwrap()).unwrap();
    let mut worst_ulps = 0u64;
    for i in 0..data.len() {
        let (a, b) = (model.predict(data.row(i)).unwrap(), reloaded.predict(data.row(i)).unwrap());
        worst_ulps = worst_ulps.max(a.to_bits().abs_diff(b.to_bits()));
    }
    outcome(
        report.accuracy >= 0.95 && worst_ulps <= 1,
        format!("held-out accuracy {:.4}, round trip within {worst_ulps} ulp on {} rows, {secs:.1} s", report.accuracy, data.len()),
    )
}

fn sor_reference(points: &[Vec3], k: usize, mult: f64) -> Vec<usize> {
    let n = points.len();
    let d: Vec<f64> = (0..n)
        .map(|i| {
            let mut all: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist(&points[i], &points[j])).collect();
            all.sort_by(f64::total_cmp);
            all[..k].iter().sum::<f64>() / k as f64
        })
        .collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let std = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    (0..n).filter(|&i| d[i] > mean + mult * std).collect()
}

fn sor_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let grid: Vec<(usize, f64)> = [1, 4, 8, 16, 32].iter().flat_map(|&k| [0.5, 1.0, 2.0].map(|m| (k, m))).collect();
    let (mut equal, mut total) = (0, 0);
    for _ in 0..20 {
        let blob = Normal::new(0.0, 1.0).unwrap();
        let mut pts: Vec<Vec3> = (0..450).map(|_| Vec3::new(blob.sample(&mut rng), blob.sample(&mut rng), blob.sample(&mut rng))).collect();
        pts.extend(random_points(&mut rng, 50, 12.0).into_iter().map(|p| p - Vec3::repeat(6.0)));
        let cloud = PointCloud::from_points(pts);
        for &(k, mult) in &grid {
            let got = sor_filter(&cloud, &SorParams { k, stddev_mult: mult }).unwrap();
            equal += (got.removed == sor_reference(&cloud.points, k, mult)) as usize;
            total += 1;
        }
    }
    outcome(equal == total, format!("{equal}/{total} (cloud, k, mult) cases identical to the O(N^2) reference"))
}

fn end_to_end() -> Outcome {
    let mut config = Config::default();
    config.train.grid = vec![ForestParams {
        n_trees: 50,
        features_per_split: Some(40),
        ..Default::default()
    }];
    let seed = 7;
    let a = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let (scene, run) = match run_synthetic(&config, seed, a.path()) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("pipeline failed: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let s = &run.report.summary;
    let diameter = scene.diameter();
    let pos = s.position.map_or(f64::INFINITY, |p| p.median);
    let rot = s.rotation.map_or(f64::INFINITY, |p| p.median);
    let b = tempfile::tempdir().unwrap();
    let again = run_synthetic(&config, seed, b.path()).map(|(_, r)| r.report);
    let deterministic = again.is_ok_and(|r| r == run.report)
        && std::fs::read(a.path().join("report.json")).ok() == std::fs::read(b.path().join("report.json")).ok();
    outcome(
        s.localized as f64 >= 0.9 * s.total as f64 && pos < 0.01 * diameter && rot < 1.0 && deterministic && secs < 300.0,
        format!(
            "{}/{} localized, median position {pos:.4} ({:.3}% of diameter {diameter:.1}), median rotation {rot:.3} deg, deterministic {deterministic}, {secs:.0} s",
            s.localized,
            s.total,
            100.0 * pos / diameter
        ),
    )
}

fn percentile_fixture() -> Outcome {
    let values = [0.086, 0.12, 0.15, 0.21, 0.48];
    let p = Percentiles::of(&values).unwrap();
    let got = [p.p25, p.p50, p.p75, p.p90, p.p95];
    outcome(got == values, format!("P{PERCENTILES:?} = {got:?}, expected {values:?}"))
}

fn textured_cloud(rng: &mut impl Rng) -> PointCloud {
    // Jittered cube surface with smooth color variation plus noise.
    let steps = 14;
    let h = 2.0 / steps as f64;
    let mut pts = Vec::new();
    for i in 0..=steps {
        for j in 0..=steps {
            for l in 0..=steps {
                if [i, j, l].iter().any(|&c| c == 0 || c == steps) {
                    let j3 = Vec3::new(rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01));
                    pts.push(Vec3::new(i as f64 * h - 1.0, j as f64 * h - 1.0, l as f64 * h - 1.0) + j3);
                }
            }
        }
    }
    let colors = pts
        .iter()
        .map(|p| {
            let v = 127.0 + 60.0 * (3.0 * p.x).sin() + 40.0 * (2.0 * p.y + p.z).cos() + rng.random_range(-20.0..20.0);
            [v as u8, (v * 0.8) as u8, rng.random()]
        })
        .collect();
    estimate_normals(&PointCloud::from_points(pts), 10, &Vec3::zeros()).unwrap().cloud.with_colors(colors).unwrap()
}

fn rift_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cloud = textured_cloud(&mut rng);
    let index = cloud.index();
    let field = intensity_and_gradient(&cloud, 12).unwrap();
    let harris = HarrisParams {
        radius: 0.3,
        threshold: -0.035,
        nms_radius: 0.6,
    };
    let mut kps = detect_harris3d(&cloud, &index, &harris).unwrap();
    kps.extend((0..cloud.len()).step_by(41).map(|i| Keypoint3D {
        position: cloud.points[i],
        source_index: i,
        saliency: 0.0,
    }));
    let params = RiftParams::new(0.6);
    let desc = extract_rift(&cloud, &field, &index, &kps, &params).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let q = random_rotation(&mut rng);
        let rotated = cloud.transformed(|p| q.apply(p), |n| q.apply(n));
        let rindex = rotated.index();
        let rfield = intensity_and_gradient(&rotated, 12).unwrap();
        let rkps: Vec<Keypoint3D> = kps.iter().map(|k| Keypoint3D { position: q.apply(&k.position), ..*k }).collect();
        let rdesc = extract_rift(&rotated, &rfield, &rindex, &rkps, &params).unwrap();
        for (a, b) in desc.iter().zip(&rdesc) {
            let l2 = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            worst = worst.max(l2);
        }
    }
    outcome(worst <= 1e-6, format!("{} keypoints, worst L2 difference {worst:.2e} over 20 rotations", kps.len()))
}

type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "P3P correctness", p3p_correctness),
        (2, "MLESAC robustness", mlesac_robustness),
        (3, "rotation error metric", rotation_metric),
        (4, "mining exactness", mining_exactness),
        (5, "matcher sanity", matcher_sanity),
        (6, "SOR exactness", sor_exactness),
        (7, "end-to-end synthetic localization", end_to_end),
        (8, "percentile fixture", percentile_fixture),
        (9, "RIFT rotation invariance", rift_invariance),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut unexpected = Vec::new();
    for (id, name, run) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let o = run();
        let known = KNOWN_FAILURES.contains(&id);
        let tag = match (o.pass, known) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        println!("[{tag}] {id}. {name}: {}", o.detail);
        if o.pass == known {
            unexpected.push(id);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected outcome for criteria {unexpected:?}");
        std::process::exit(1);
    }
}
