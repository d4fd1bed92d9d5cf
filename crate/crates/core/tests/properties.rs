//! Randomized invariants across the pipeline modules.

use proptest::prelude::*;

use sonocc::extraction::{marching_cubes, smooth, OccupancyGrid};
use sonocc::geometry::{frame_rays, normalize_to_unit_cube, Pose, Ray, TrajectoryKind};
use sonocc::linalg::{Mat3, Vec3};
use sonocc::metrics::compute_metrics;
use sonocc::network::{checkpoint_to_string, EncodingConfig, InputKind, NetworkConfig, OccupancyModel};
use sonocc::phantom::AcousticProperties;
use sonocc::training::{loss, loss_grad, read_dataset, subsample, write_dataset, AcousticSample, LossKind};
use sonocc::transmittance::{transmittance_along, TransmittanceParams};

fn vec3(range: std::ops::Range<f64>) -> impl Strategy<Value = Vec3<f64>> {
    (range.clone(), range.clone(), range).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn sample() -> impl Strategy<Value = AcousticSample<f64>> {
    (vec3(0.0..1.0), (0.0..100.0f64, 0.0..1.0f64, 0.0..1.0f64), 0u8..2, 0.0..1.0f64, 0u8..4, 0u32..50, 0u32..64, 0.0..1.0f64)
        .prop_map(|(x, (a, b, p), label, t, sweep, frame, line, depth)| AcousticSample {
            x,
            theta: AcousticProperties::new(a, b, p),
            label,
            transmittance: t,
            sweep: TrajectoryKind::from_code(sweep).unwrap(),
            frame_id: frame,
            scanline_id: line,
            depth,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dataset_roundtrip(samples in prop::collection::vec(sample(), 0..40)) {
        let path = std::env::temp_dir().join(format!("sonocc-prop-{}-{}.bin", std::process::id(), samples.len()));
        write_dataset(&path, &samples).unwrap();
        let back: Vec<AcousticSample<f64>> = read_dataset(&path).unwrap();
        std::fs::remove_file(&path).ok();
        prop_assert_eq!(back, samples);
    }

    #[test]
    fn ray_directions_are_unit(d in vec3(-5.0..5.0), depth in 0.0..3.0f64) {
        prop_assume!(d.norm() > 1e-6);
        let r = Ray::new(Vec3::zero(), d, depth).unwrap();
        prop_assert!((r.direction().norm() - 1.0).abs() < 1e-12);
        prop_assert!((r.at(depth) - r.direction() * depth).norm() < 1e-12);
    }

    #[test]
    fn frame_rays_share_direction_and_face(axis in vec3(-1.0..1.0), angle in -3.0..3.0f64,
                                           t in vec3(-1.0..1.0), n in 1usize..20, aperture in 0.1..2.0f64) {
        prop_assume!(axis.norm() > 1e-3);
        let pose = Pose::new(Mat3::rotation(axis.normalized().unwrap(), angle), t).unwrap();
        let rays = frame_rays(&pose, n, aperture, 1.0).unwrap();
        prop_assert_eq!(rays.len(), n);
        for r in &rays {
            prop_assert!((r.direction() - pose.beam_direction()).norm() < 1e-12);
            // Origins lie on the face plane through the pose translation.
            prop_assert!((r.origin - pose.translation).dot(pose.beam_direction()).abs() < 1e-12);
            prop_assert!((r.origin - pose.translation).norm() <= aperture / 2.0 + 1e-12);
        }
    }

    #[test]
    fn transmittance_is_monotone_and_bounded(slabs in prop::collection::vec((0.0..1.0f64, 0.0..30.0f64, 0.0..1.0f64), 1..6),
                                             t0 in 0.1..1.0f64) {
        let field = |p: Vec3<f64>| {
            let mut a = AcousticProperties::new(0.2, 0.01, 0.5);
            for &(start, alpha, beta) in &slabs {
                if p.z >= start && p.z < start + 0.1 {
                    a = AcousticProperties::new(alpha, beta, 0.5);
                }
            }
            a
        };
        let ray = Ray::new(Vec3::new(0.5, 0.5, 0.0), Vec3::unit_z(), 1.0).unwrap();
        let params = TransmittanceParams { step: 1.0 / 256.0, t0, ..Default::default() };
        let prof = transmittance_along(&ray, field, &params).unwrap();
        prop_assert!(prof.values[0] <= t0);
        for w in prof.values.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        prop_assert!(prof.values.iter().all(|&v| (0.0..=t0).contains(&v)));
    }

    #[test]
    fn unit_cube_normalization_inverts(points in prop::collection::vec(vec3(-50.0..50.0), 2..30)) {
        let lo = points.iter().fold(f64::INFINITY, |m, p| m.min(p.min_element()));
        let hi = points.iter().fold(f64::NEG_INFINITY, |m, p| m.max(p.max_element()));
        prop_assume!(hi - lo > 1e-6);
        let (unit, tf) = normalize_to_unit_cube(&points).unwrap();
        for (u, p) in unit.iter().zip(&points) {
            prop_assert!(u.as_array().iter().all(|&c| (0.0..=1.0).contains(&c)));
            prop_assert!((tf.apply_inverse(*u) - *p).norm() < 1e-9 * (1.0 + p.norm()));
        }
    }

    #[test]
    fn metrics_symmetric_and_scale_equivariant(a in prop::collection::vec(vec3(0.0..1.0), 1..60),
                                               b in prop::collection::vec(vec3(0.0..1.0), 1..60),
                                               s in 0.1..10.0f64) {
        let ab = compute_metrics(&a, &b);
        let ba = compute_metrics(&b, &a);
        prop_assert_eq!(ab.hd, ba.hd);
        for (x, y) in [(ab.cd, ba.cd), (ab.mad, ba.mad), (ab.rmse, ba.rmse)] {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x));
        }
        let scale = |v: &[Vec3<f64>]| v.iter().map(|&p| p * s).collect::<Vec<_>>();
        let scaled = compute_metrics(&scale(&a), &scale(&b));
        for (x, y) in [(scaled.cd, ab.cd), (scaled.hd, ab.hd), (scaled.mad, ab.mad), (scaled.rmse, ab.rmse)] {
            prop_assert!((x - s * y).abs() <= 1e-9 * (1.0 + s * y));
        }
        prop_assert!(ab.hd >= ab.mad && ab.rmse >= ab.mad * (1.0 - 1e-12));
    }

    #[test]
    fn subsample_keeps_rounded_fraction_per_frame(per_frame in prop::collection::vec(1usize..200, 1..5),
                                                  fraction in 0.01..1.0f64, seed in any::<u64>()) {
        let mut samples = Vec::new();
        for (f, &n) in per_frame.iter().enumerate() {
            for i in 0..n {
                samples.push(AcousticSample {
                    x: Vec3::splat(0.5),
                    theta: AcousticProperties::new(0.0, 0.0, 0.0),
                    label: 0,
                    transmittance: 1.0,
                    sweep: TrajectoryKind::Row,
                    frame_id: f as u32,
                    scanline_id: i as u32,
                    depth: 0.0,
                });
            }
        }
        let sub = subsample(&samples, fraction, seed).unwrap();
        for (f, &n) in per_frame.iter().enumerate() {
            let kept = sub.iter().filter(|s| s.frame_id == f as u32).count();
            prop_assert_eq!(kept, (fraction * n as f64).round() as usize);
        }
        prop_assert_eq!(subsample(&samples, fraction, seed).unwrap(), sub);
    }

    #[test]
    fn loss_is_nonnegative_and_gradient_signed(p in 0.0..1.0f64, t in 0.0..1.0f64, y in 0u8..2) {
        for kind in [LossKind::AttenuationCompensated, LossKind::PlainBce] {
            let l = loss(p, y, t, 1e-6, kind);
            let g = loss_grad(p, y, t, 1e-6, kind);
            prop_assert!(l >= 0.0 && l.is_finite());
            // Raising p lowers the loss of positives and raises it for negatives.
            let signed = if y == 1 { g <= 0.0 } else { g >= 0.0 };
            prop_assert!(signed);
        }
    }

    #[test]
    fn smoothing_respects_bounds(values in prop::collection::vec(-1.0..1.0f64, 125), sigma in 0.0..3.0f64, radius in 0usize..4) {
        let grid = OccupancyGrid::unit_cube([5, 5, 5], values.clone()).unwrap();
        let out = smooth(&grid, sigma, radius).unwrap();
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(out.values.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn marching_cubes_vertices_interpolate_edges(values in prop::collection::vec(-1.0..1.0f64, 216)) {
        let n = 6;
        let grid = OccupancyGrid::unit_cube([n; 3], values).unwrap();
        let mesh = marching_cubes(&grid, 0.0);
        let h = 1.0 / (n - 1) as f64;
        for tri in &mesh.triangles {
            prop_assert!(tri.iter().all(|&i| (i as usize) < mesh.vertices.len()));
        }
        for t in 0..mesh.triangles.len() {
            prop_assert!(mesh.triangle_area(t) > 1e-12);
        }
        for v in &mesh.vertices {
            // Locate the lattice edge holding the vertex and re-interpolate.
            let c = v.as_array().map(|x| x / h);
            let axis = (0..3).find(|&d| (c[d] - c[d].round()).abs() > 1e-9).unwrap_or(0);
            let mut lo = c.map(|x| x.round() as usize);
            lo[axis] = (c[axis].floor() as usize).min(n - 2);
            let mut hi = lo;
            hi[axis] += 1;
            let (va, vb) = (grid.get(lo[0], lo[1], lo[2]), grid.get(hi[0], hi[1], hi[2]));
            prop_assert!((va > 0.0) != (vb > 0.0), "vertex edge must straddle the level");
            let t = c[axis] - lo[axis] as f64;
            prop_assert!((va + t * (vb - va)).abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoint_text_roundtrip(hidden in 1usize..4, width in 1usize..8, freqs in 0usize..4, seed in any::<u64>(), coords in any::<bool>()) {
        let cfg = NetworkConfig {
            input_kind: if coords { InputKind::Coordinates } else { InputKind::AcousticFeatures },
            encoding: EncodingConfig { num_frequencies: freqs, include_input: true },
            hidden_layers: hidden,
            hidden_width: width,
            skip_at: None,
            input_scale: [100.0, 1.0, 1.0],
        };
        let m = OccupancyModel::<f64>::new(cfg, seed).unwrap();
        let path = std::env::temp_dir().join(format!("sonocc-prop-ckpt-{}-{seed}.json", std::process::id()));
        std::fs::write(&path, checkpoint_to_string(&m)).unwrap();
        let back = sonocc::network::load_checkpoint::<f64>(&path).unwrap();
        std::fs::remove_file(&path).ok();
        prop_assert_eq!(back, m);
    }
}
