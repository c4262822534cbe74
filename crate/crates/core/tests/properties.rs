use proptest::prelude::*;

use cloudloc_core::descfile::{decode_desc3d, encode_desc3d, DescSet3D};
use cloudloc_core::geometry::{position_error, project, rotation_error_deg, CameraIntrinsics, CameraPose, Rotation, Vec3};
use cloudloc_core::mining::build_zeta;
use cloudloc_core::pointcloud::{read_ply_from, sor_filter, write_ply_to, PlyFormat, PointCloud, SorParams, SpatialIndex};

fn vec3(range: f64) -> impl Strategy<Value = Vec3> {
    (-range..range, -range..range, -range..range).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn rotation() -> impl Strategy<Value = Rotation> {
    vec3(std::f64::consts::PI).prop_map(|w| Rotation::exp(&w))
}

fn dist(a: &Vec3, b: &Vec3) -> f64 {
    ((a.x - b.x) * (a.x - b.x) + (a.y - b.y) * (a.y - b.y) + (a.z - b.z) * (a.z - b.z)).sqrt()
}

proptest! {
    #[test]
    fn knn_matches_linear_scan(pts in prop::collection::vec(vec3(10.0), 1..200), q in vec3(12.0), k in 1usize..20) {
        let index = SpatialIndex::from_vec3(&pts);
        let got: Vec<f64> = index.knn3(&q, k).iter().map(|n| n.distance).collect();
        let mut all: Vec<f64> = pts.iter().map(|p| dist(p, &q)).collect();
        all.sort_by(f64::total_cmp);
        all.truncate(k);
        prop_assert_eq!(got, all);
    }

    #[test]
    fn radius_search_matches_linear_scan(pts in prop::collection::vec(vec3(5.0), 1..200), q in vec3(6.0), r in 0.01f64..4.0) {
        let got: Vec<usize> = SpatialIndex::from_vec3(&pts).within3(&q, r).iter().map(|n| n.index).collect();
        let want: Vec<usize> = (0..pts.len()).filter(|&i| dist(&pts[i], &q) < r).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn zeta_pairs_are_sorted_and_within_alpha(
        keys in prop::collection::vec(vec3(3.0), 0..60),
        sparse in prop::collection::vec(vec3(3.0), 0..60),
        alpha in 0.01f64..2.0,
    ) {
        let zeta = build_zeta(&keys, &sparse, alpha).unwrap();
        prop_assert!(zeta.pairs.windows(2).all(|w| w[0] < w[1]));
        for &(i, j) in &zeta.pairs {
            prop_assert!(dist(&keys[i], &sparse[j]) < alpha);
        }
    }

    #[test]
    fn rotation_error_is_a_metric(a in rotation(), b in rotation(), c in rotation()) {
        let ab = rotation_error_deg(&a, &b);
        prop_assert!((0.0..=180.0).contains(&ab));
        prop_assert!((ab - rotation_error_deg(&b, &a)).abs() < 1e-6);
        prop_assert!(ab <= rotation_error_deg(&a, &c) + rotation_error_deg(&c, &b) + 1e-6);
        // Invariant under a common change of world frame.
        prop_assert!((ab - rotation_error_deg(&a.compose(&c), &b.compose(&c))).abs() < 1e-6);
    }

    #[test]
    fn pose_round_trips_through_rt(r in rotation(), c in vec3(50.0)) {
        let pose = CameraPose::new(r, c);
        let back = CameraPose::from_rt(pose.rotation, &pose.translation());
        prop_assert!(position_error(&back.center, &c) < 1e-9 * (1.0 + c.norm()));
    }

    #[test]
    fn projection_follows_the_camera_frame(r in rotation(), c in vec3(10.0), pc in vec3(5.0)) {
        let k = CameraIntrinsics::new(400.0, 420.0, 300.0, 200.0, 600, 400).unwrap();
        let pose = CameraPose::new(r, c);
        let world = r.transpose().apply(&pc) + c;
        match project(&pose, &k, &world) {
            Some(px) => {
                prop_assert!(pc.z > 0.0);
                prop_assert!((px.u - (400.0 * pc.x / pc.z + 300.0)).abs() < 1e-6 * (1.0 + px.u.abs()));
                prop_assert!((px.v - (420.0 * pc.y / pc.z + 200.0)).abs() < 1e-6 * (1.0 + px.v.abs()));
            }
            None => prop_assert!(pc.z <= 1e-9),
        }
    }

    #[test]
    fn sor_keeps_the_complement(pts in prop::collection::vec(vec3(5.0), 3..120), k in 1usize..8, mult in 0.1f64..3.0) {
        prop_assume!(k < pts.len());
        let cloud = PointCloud::from_points(pts.clone());
        let out = sor_filter(&cloud, &SorParams { k, stddev_mult: mult }).unwrap();
        prop_assert!(out.removed.windows(2).all(|w| w[0] < w[1]));
        let kept: Vec<Vec3> = (0..pts.len()).filter(|i| out.removed.binary_search(i).is_err()).map(|i| pts[i]).collect();
        prop_assert_eq!(out.cloud.points, kept);
    }

    #[test]
    fn binary_ply_round_trips(pts in prop::collection::vec(vec3(100.0), 0..50), seed in any::<u8>()) {
        let colors: Vec<[u8; 3]> = (0..pts.len()).map(|i| [seed.wrapping_add(i as u8), 7, 200]).collect();
        let cloud = PointCloud::from_points(pts).with_colors(colors).unwrap();
        let mut buf = Vec::new();
        write_ply_to(&cloud, PlyFormat::BinaryLittleEndian, &mut buf).unwrap();
        let back = read_ply_from(&buf).unwrap();
        prop_assert_eq!(back.points, cloud.points);
        prop_assert_eq!(back.colors, cloud.colors);
    }

    #[test]
    fn desc3d_round_trips(rows in prop::collection::vec((vec3(10.0), prop::collection::vec(-1.0f32..1.0, 4)), 0..30)) {
        let set = DescSet3D {
            dim: 4,
            positions: rows.iter().map(|r| r.0).collect(),
            values: rows.iter().flat_map(|r| r.1.clone()).collect(),
        };
        prop_assert_eq!(decode_desc3d(&encode_desc3d(&set)).unwrap(), set);
    }
}
