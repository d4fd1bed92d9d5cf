//! Synthetic phantoms: analytic solids carrying per-tissue acoustic properties.
//!
//! A [`PhantomSpec`] plays the role of a fitted acoustic-property field. The
//! field is homogeneous per tissue up to deterministic, position-hashed
//! Gaussian jitter, and exactly one tissue is the occupied ("bone") class.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::{marching_cubes, OccupancyGrid, TriangleMesh};
use crate::linalg::Vec3;
use crate::real::Real;
use crate::training::AcousticSample;

/// Attenuation (`alpha`, per unit length), reflection (`beta`) and scattering (`phi`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct AcousticProperties<T> {
    pub alpha: T,
    pub beta: T,
    pub phi: T,
}

impl<T: Real> AcousticProperties<T> {
    pub fn new(alpha: T, beta: T, phi: T) -> Self {
        Self { alpha, beta, phi }
    }

    pub fn as_array(&self) -> [T; 3] {
        [self.alpha, self.beta, self.phi]
    }

    pub fn cast<U: Real>(&self) -> AcousticProperties<U> {
        AcousticProperties {
            alpha: U::lit(self.alpha.as_f64()),
            beta: U::lit(self.beta.as_f64()),
            phi: U::lit(self.phi.as_f64()),
        }
    }

    /// Combined loss rate `alpha + beta` integrated by the transmittance model.
    pub fn extinction(&self) -> T {
        self.alpha + self.beta
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    Sphere { center: Vec3<f64>, radius: f64 },
    /// Axis-aligned box.
    Box { center: Vec3<f64>, half_extents: Vec3<f64> },
    Capsule { a: Vec3<f64>, b: Vec3<f64>, radius: f64 },
    UnionGroup { members: Vec<Primitive> },
}

impl Primitive {
    /// Signed distance, negative inside.
    pub fn signed_distance(&self, p: Vec3<f64>) -> f64 {
        match self {
            Self::Sphere { center, radius } => (p - *center).norm() - radius,
            Self::Box { center, half_extents } => {
                let q = (p - *center).map(f64::abs) - *half_extents;
                q.max(Vec3::zero()).norm() + q.max_element().min(0.0)
            }
            Self::Capsule { a, b, radius } => {
                let ab = *b - *a;
                let len2 = ab.norm_squared();
                let t = if len2 > 0.0 { ((p - *a).dot(ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
                (p - (*a + ab * t)).norm() - radius
            }
            Self::UnionGroup { members } => {
                members.iter().map(|m| m.signed_distance(p)).fold(f64::INFINITY, f64::min)
            }
        }
    }

    /// Conservative bounding box.
    pub fn bounds(&self) -> (Vec3<f64>, Vec3<f64>) {
        match self {
            Self::Sphere { center, radius } => (*center - Vec3::splat(*radius), *center + Vec3::splat(*radius)),
            Self::Box { center, half_extents } => (*center - *half_extents, *center + *half_extents),
            Self::Capsule { a, b, radius } => {
                (a.min(*b) - Vec3::splat(*radius), a.max(*b) + Vec3::splat(*radius))
            }
            Self::UnionGroup { members } => members.iter().map(Primitive::bounds).fold(
                (Vec3::splat(f64::INFINITY), Vec3::splat(f64::NEG_INFINITY)),
                |(lo, hi), (a, b)| (lo.min(a), hi.max(b)),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Solid {
    pub primitive: Primitive,
    pub tissue: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tissue {
    pub properties: AcousticProperties<f64>,
    #[serde(default)]
    pub occupied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub solids: Vec<Solid>,
    pub tissues: BTreeMap<String, Tissue>,
    pub background: AcousticProperties<f64>,
    /// Per-channel standard deviation of the feature jitter (alpha, beta, phi).
    pub noise_sigma: [f64; 3],
    /// Upper clamp for alpha; also the scale used to normalize it for the network.
    pub alpha_max: f64,
}

/// Which tissue governs a point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region<'a> {
    Background,
    Tissue(&'a str),
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let occupied = self.tissues.values().filter(|t| t.occupied).count();
        if occupied != 1 {
            return Err(Error::config("phantom.tissues", format!("exactly one tissue must be occupied, found {occupied}")));
        }
        if !(self.alpha_max > 0.0) {
            return Err(Error::config("phantom.alpha_max", "must be > 0"));
        }
        if self.noise_sigma.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::config("phantom.noise_sigma", "entries must be >= 0"));
        }
        let check_props = |field: String, p: &AcousticProperties<f64>| -> Result<()> {
            if !(0.0..=self.alpha_max).contains(&p.alpha) {
                return Err(Error::config(format!("{field}.alpha"), format!("must lie in [0, {}]", self.alpha_max)));
            }
            if !(0.0..=1.0).contains(&p.beta) {
                return Err(Error::config(format!("{field}.beta"), "must lie in [0, 1]"));
            }
            if !(0.0..=1.0).contains(&p.phi) {
                return Err(Error::config(format!("{field}.phi"), "must lie in [0, 1]"));
            }
            Ok(())
        };
        check_props("phantom.background".into(), &self.background)?;
        for (name, t) in &self.tissues {
            check_props(format!("phantom.tissues.{name}.properties"), &t.properties)?;
        }
        for (i, s) in self.solids.iter().enumerate() {
            if !self.tissues.contains_key(&s.tissue) {
                return Err(Error::config(format!("phantom.solids[{i}].tissue"), format!("unknown tissue `{}`", s.tissue)));
            }
            let (lo, hi) = s.primitive.bounds();
            if lo.min_element() < 0.0 || hi.max_element() > 1.0 {
                return Err(Error::config(format!("phantom.solids[{i}]"), "solid must lie inside the unit cube"));
            }
        }
        Ok(())
    }

    pub fn occupied_tissue(&self) -> Option<&str> {
        self.tissues.iter().find(|(_, t)| t.occupied).map(|(n, _)| n.as_str())
    }

    fn is_occupied(&self, tissue: &str) -> bool {
        self.tissues.get(tissue).is_some_and(|t| t.occupied)
    }

    /// Signed distance to the occupied region (negative inside).
    pub fn signed_distance(&self, p: Vec3<f64>) -> f64 {
        self.solids
            .iter()
            .filter(|s| self.is_occupied(&s.tissue))
            .map(|s| s.primitive.signed_distance(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Occupied solids win; otherwise the last listed containing solid, else background.
    pub fn region_at(&self, p: Vec3<f64>) -> Region<'_> {
        let mut region = Region::Background;
        for s in &self.solids {
            if s.primitive.signed_distance(p) < 0.0 {
                if self.is_occupied(&s.tissue) {
                    return Region::Tissue(&s.tissue);
                }
                region = Region::Tissue(&s.tissue);
            }
        }
        region
    }

    /// Noise-free properties at `p`.
    pub fn mean_properties(&self, p: Vec3<f64>) -> AcousticProperties<f64> {
        match self.region_at(p) {
            Region::Background => self.background,
            Region::Tissue(name) => self.tissues[name].properties,
        }
    }

    pub fn occupancy_at<T: Real>(&self, x: Vec3<T>) -> u8 {
        u8::from(self.signed_distance(x.cast()) < 0.0)
    }

    /// Tissue properties at `x` plus zero-mean Gaussian jitter, clamped to the
    /// valid ranges. The jitter depends only on `(rng_seed, x)`.
    pub fn features_at<T: Real>(&self, x: Vec3<T>, rng_seed: u64) -> AcousticProperties<T> {
        let p: Vec3<f64> = x.cast();
        let mean = self.mean_properties(p);
        let mut v = mean.as_array();
        if self.noise_sigma.iter().any(|&s| s > 0.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(point_seed(rng_seed, p));
            for (c, s) in v.iter_mut().zip(self.noise_sigma) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *c += s * z;
            }
        }
        AcousticProperties::new(
            T::lit(v[0].clamp(0.0, self.alpha_max)),
            T::lit(v[1].clamp(0.0, 1.0)),
            T::lit(v[2].clamp(0.0, 1.0)),
        )
    }

    /// Analytic occupancy plus a marching-cubes surface of the occupied region.
    pub fn ground_truth(&self, resolution: usize) -> Result<GroundTruth<'_>> {
        if resolution < 2 {
            return Err(Error::invalid("ground-truth resolution must be >= 2"));
        }
        let grid = OccupancyGrid::from_fn([resolution; 3], |p: Vec3<f64>| -self.signed_distance(p));
        Ok(GroundTruth { phantom: self, surface_mesh: marching_cubes(&grid, 0.0), cell_size: grid.spacing.max_element() })
    }
}

pub struct GroundTruth<'a> {
    phantom: &'a PhantomSpec,
    pub surface_mesh: TriangleMesh<f64>,
    pub cell_size: f64,
}

impl GroundTruth<'_> {
    pub fn occupancy(&self, x: Vec3<f64>) -> u8 {
        self.phantom.occupancy_at(x)
    }
}

/// Mixes a seed with the exact bit pattern of a point.
fn point_seed(seed: u64, p: Vec3<f64>) -> u64 {
    let mut h = splitmix(seed ^ 0x5eed_0f_ac0u64);
    for c in p.as_array() {
        // +0.0 and -0.0 hash alike
        h = splitmix(h ^ (c + 0.0).to_bits());
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Emulates annotation and tracking error.
///
/// Each label flips independently with probability `flip_rate`; every frame
/// (sweep, frame id) receives one rigid offset with norm at most `pose_noise`.
/// Features are left untouched; see [`refresh_features`] to re-query them at
/// the displaced positions.
pub fn perturb_labels<T: Real>(
    samples: &[AcousticSample<T>],
    flip_rate: f64,
    pose_noise: f64,
    rng_seed: u64,
) -> Result<Vec<AcousticSample<T>>> {
    if !(0.0..0.5).contains(&flip_rate) {
        return Err(Error::invalid("flip_rate must lie in [0, 0.5)"));
    }
    if !(pose_noise >= 0.0) {
        return Err(Error::invalid("pose_noise must be >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(rng_seed ^ 0xf11b));
    let mut offsets = BTreeMap::new();
    Ok(samples
        .iter()
        .map(|s| {
            let mut out = s.clone();
            if flip_rate > 0.0 && rng.gen_bool(flip_rate) {
                out.label = 1 - out.label;
            }
            if pose_noise > 0.0 {
                let key = (s.sweep.code(), s.frame_id);
                let offset = *offsets.entry(key).or_insert_with(|| frame_offset(rng_seed, key, pose_noise));
                out.x = out.x + offset.cast();
            }
            out
        })
        .collect())
}

fn frame_offset(seed: u64, (sweep, frame): (u8, u32), magnitude: f64) -> Vec3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ ((sweep as u64) << 40) ^ frame as u64));
    let dir: [f64; 3] = UnitSphere.sample(&mut rng);
    Vec3::from(dir) * (magnitude * rng.gen::<f64>())
}

/// Re-evaluates `theta` at each sample's (possibly displaced) position.
pub fn refresh_features<T: Real>(samples: &mut [AcousticSample<T>], phantom: &PhantomSpec, rng_seed: u64) {
    for s in samples {
        let clamped = s.x.map(|c| c.max(T::zero()).min(T::one()));
        s.theta = phantom.features_at(clamped, rng_seed);
    }
}

/// Ready-made phantoms.
pub mod presets {
    use super::*;

    fn tissue(alpha: f64, beta: f64, phi: f64, occupied: bool) -> Tissue {
        Tissue { properties: AcousticProperties::new(alpha, beta, phi), occupied }
    }

    fn aabb(center: [f64; 3], half: [f64; 3]) -> Primitive {
        Primitive::Box { center: center.into(), half_extents: half.into() }
    }

    /// Single occupied sphere in a quiet background.
    pub fn sphere(center: [f64; 3], radius: f64) -> PhantomSpec {
        PhantomSpec {
            solids: vec![Solid {
                primitive: Primitive::Sphere { center: center.into(), radius },
                tissue: "bone".into(),
            }],
            tissues: BTreeMap::from([("bone".to_string(), tissue(40.0, 0.9, 0.2, true))]),
            background: AcousticProperties::new(0.5, 0.05, 0.5),
            noise_sigma: [0.0; 3],
            alpha_max: 100.0,
        }
    }

    /// Vertebra-like solid: a capsule body with a spinous process pointing at
    /// the probe and a transverse bar, under a muscle layer.
    ///
    /// `variant` 0 is the reference shape; other values shift proportions and
    /// tissue properties to give a second member of the same family.
    pub fn vertebra(variant: u32) -> PhantomSpec {
        let (body_r, body_len, spine_h, bar_w, bone, muscle) = match variant {
            0 => (0.14, 0.16, 0.12, 0.30, tissue(40.0, 0.90, 0.20, true), tissue(3.0, 0.20, 0.70, false)),
            _ => (0.12, 0.22, 0.10, 0.26, tissue(28.0, 0.70, 0.30, true), tissue(4.0, 0.26, 0.62, false)),
        };
        let body = Primitive::Capsule {
            a: Vec3::new(0.5 - body_len / 2.0, 0.5, 0.55),
            b: Vec3::new(0.5 + body_len / 2.0, 0.5, 0.55),
            radius: body_r,
        };
        let spine_bottom = 0.55 - body_r + 0.02;
        let spinous = aabb([0.5, 0.5, spine_bottom - spine_h], [0.05, 0.04, spine_h]);
        let transverse = aabb([0.5, 0.5, 0.55 - body_r * 0.5], [0.06, bar_w, 0.04]);
        PhantomSpec {
            solids: vec![
                Solid { primitive: aabb([0.5, 0.5, 0.1], [0.5, 0.5, 0.04]), tissue: "muscle".into() },
                Solid {
                    primitive: Primitive::UnionGroup { members: vec![body, spinous, transverse] },
                    tissue: "bone".into(),
                },
            ],
            tissues: BTreeMap::from([("bone".to_string(), bone), ("muscle".to_string(), muscle)]),
            background: if variant == 0 {
                AcousticProperties::new(0.5, 0.05, 0.45)
            } else {
                AcousticProperties::new(0.8, 0.08, 0.40)
            },
            noise_sigma: [1.0, 0.02, 0.03],
            alpha_max: 100.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::TrajectoryKind;

    fn sphere() -> PhantomSpec {
        presets::sphere([0.5, 0.5, 0.5], 0.25)
    }

    #[test]
    fn presets_validate() {
        sphere().validate().unwrap();
        presets::vertebra(0).validate().unwrap();
        presets::vertebra(1).validate().unwrap();
    }

    #[test]
    fn two_occupied_tissues_rejected() {
        let mut p = sphere();
        p.tissues.insert("extra".into(), Tissue { properties: p.background, occupied: true });
        assert!(p.validate().is_err());
    }

    #[test]
    fn sphere_center_and_outside() {
        let p = sphere();
        assert_eq!(p.occupancy_at(Vec3::<f64>::splat(0.5)), 1);
        assert_eq!(p.occupancy_at(Vec3::<f64>::new(0.05, 0.05, 0.05)), 0);
    }

    #[test]
    fn boundary_shell_is_half_inside() {
        // Points drawn uniformly in a thin shell straddling the radius.
        let p = sphere();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let h = 1e-3;
        let inside = (0..n)
            .filter(|_| {
                let d: [f64; 3] = UnitSphere.sample(&mut rng);
                let r = 0.25 + rng.gen_range(-h..h);
                p.occupancy_at(Vec3::splat(0.5) + Vec3::from(d) * r) == 1
            })
            .count();
        let frac = inside as f64 / n as f64;
        assert!((frac - 0.5).abs() <= 0.05, "fraction inside {frac}");
    }

    #[test]
    fn noiseless_features_are_tissue_triples() {
        let p = sphere();
        let inside = p.features_at(Vec3::<f64>::splat(0.5), 3);
        assert_eq!(inside, p.tissues["bone"].properties);
        let outside = p.features_at(Vec3::<f64>::splat(0.02), 3);
        assert_eq!(outside, p.background);
    }

    #[test]
    fn jitter_has_requested_std() {
        let mut p = sphere();
        let s = [0.5, 0.02, 0.03];
        p.noise_sigma = s;
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut sums = [[0.0f64; 2]; 3];
        for _ in 0..n {
            let x = Vec3::new(rng.gen_range(0.45..0.55), rng.gen_range(0.45..0.55), rng.gen_range(0.45..0.55));
            let f = p.features_at::<f64>(x, 99).as_array();
            for c in 0..3 {
                sums[c][0] += f[c];
                sums[c][1] += f[c] * f[c];
            }
        }
        for c in 0..3 {
            let mean = sums[c][0] / n as f64;
            let std = (sums[c][1] / n as f64 - mean * mean).sqrt();
            assert!((0.9 * s[c]..=1.1 * s[c]).contains(&std), "channel {c}: std {std}");
        }
    }

    #[test]
    fn features_deterministic_per_seed() {
        let p = presets::vertebra(0);
        let x = Vec3::<f64>::new(0.41, 0.52, 0.33);
        assert_eq!(p.features_at(x, 5), p.features_at(x, 5));
        assert_ne!(p.features_at(x, 5), p.features_at(x, 6));
        let xf: Vec3<f32> = x.cast();
        let a: AcousticProperties<f64> = p.features_at(xf, 5).cast();
        let b = p.features_at(xf.cast::<f64>(), 5);
        assert!((a.alpha - b.alpha).abs() < 1e-5);
    }

    #[test]
    fn homogeneous_without_noise() {
        let mut p = presets::vertebra(0);
        p.noise_sigma = [0.0; 3];
        let bone = p.tissues["bone"].properties;
        for z in [0.45, 0.5, 0.55, 0.6] {
            assert_eq!(p.features_at(Vec3::<f64>::new(0.5, 0.5, z), 1), bone);
        }
    }

    #[test]
    fn occupancy_matches_sdf_sign_on_grid() {
        let p = presets::vertebra(0);
        let n = 64;
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let x = Vec3::new(i as f64, j as f64, k as f64) * (1.0 / (n - 1) as f64);
                    let sd = p.solids[1].primitive.signed_distance(x);
                    assert_eq!(p.occupancy_at(x), u8::from(sd < 0.0));
                }
            }
        }
    }

    #[test]
    fn primitive_distances() {
        let b = Primitive::Box { center: Vec3::splat(0.5), half_extents: Vec3::splat(0.1) };
        assert!((b.signed_distance(Vec3::new(0.8, 0.5, 0.5)) - 0.2).abs() < 1e-12);
        assert!((b.signed_distance(Vec3::splat(0.5)) + 0.1).abs() < 1e-12);
        let c = Primitive::Capsule { a: Vec3::new(0.2, 0.5, 0.5), b: Vec3::new(0.8, 0.5, 0.5), radius: 0.1 };
        assert!((c.signed_distance(Vec3::new(0.5, 0.5, 0.7)) - 0.1).abs() < 1e-12);
        assert!((c.signed_distance(Vec3::new(0.95, 0.5, 0.5)) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn ground_truth_vertices_near_surface() {
        let p = sphere();
        let gt = p.ground_truth(48).unwrap();
        assert!(!gt.surface_mesh.triangles.is_empty());
        for v in &gt.surface_mesh.vertices {
            assert!(p.signed_distance(*v).abs() < gt.cell_size);
        }
    }

    fn samples(n: usize) -> Vec<AcousticSample<f64>> {
        (0..n)
            .map(|i| AcousticSample {
                x: Vec3::splat(0.5),
                theta: AcousticProperties::new(1.0, 0.1, 0.1),
                label: (i % 2) as u8,
                transmittance: 1.0,
                sweep: TrajectoryKind::Row,
                frame_id: (i / 100) as u32,
                scanline_id: 0,
                depth: 0.5,
            })
            .collect()
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let s = samples(500);
        assert_eq!(perturb_labels(&s, 0.0, 0.0, 1).unwrap(), s);
    }

    #[test]
    fn flip_count_is_binomial() {
        let s = samples(10_000);
        let out = perturb_labels(&s, 0.1, 0.0, 42).unwrap();
        let flipped = s.iter().zip(&out).filter(|(a, b)| a.label != b.label).count();
        assert!((900..=1100).contains(&flipped), "{flipped}");
        assert!(perturb_labels(&s, 0.5, 0.0, 1).is_err());
    }

    #[test]
    fn pose_noise_bounded_and_rigid_per_frame() {
        let s = samples(1000);
        let delta = 0.01;
        let out = perturb_labels(&s, 0.0, delta, 3).unwrap();
        for frame in 0..10u32 {
            let d: Vec<_> = s
                .iter()
                .zip(&out)
                .filter(|(a, _)| a.frame_id == frame)
                .map(|(a, b)| b.x - a.x)
                .collect();
            assert!(d[0].norm() <= delta);
            assert!(d.iter().all(|v| (*v - d[0]).norm() < 1e-15));
        }
    }
}
