//! Probe poses, sweep trajectories, scanline rays and unit-cube normalization.
//!
//! Probe-local axes: `x` is the elevation (sweep) direction, `y` runs along
//! the transducer face, `z` is the beam axis. A probe with identity rotation
//! sits on the `z = min` face of its extent and fires towards `+z`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat3, Vec3};
use crate::real::Real;

/// Tilt applied by the tilted sweeps, in degrees.
pub const TILT_DEGREES: f64 = 10.0;

/// Tolerance used when validating rotations and unit directions.
const ORTHO_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct Pose<T> {
    pub rotation: Mat3<T>,
    pub translation: Vec3<T>,
}

impl<T: Real> Pose<T> {
    pub fn new(rotation: Mat3<T>, translation: Vec3<T>) -> Result<Self> {
        let tol = T::lit(ORTHO_TOL).max(T::epsilon() * T::lit(16.0));
        if rotation.orthonormality_error() > tol {
            return Err(Error::invalid("pose rotation is not orthonormal"));
        }
        if (rotation.determinant() - T::one()).abs() > tol {
            return Err(Error::invalid("pose rotation has determinant != +1"));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zero() }
    }

    pub fn transform_point(&self, p: Vec3<T>) -> Vec3<T> {
        self.rotation.mul_vec(p) + self.translation
    }

    pub fn transform_vector(&self, v: Vec3<T>) -> Vec3<T> {
        self.rotation.mul_vec(v)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation.mul_mat(&other.rotation),
            translation: self.transform_point(other.translation),
        }
    }

    pub fn beam_direction(&self) -> Vec3<T> {
        self.rotation.column(2)
    }

    pub fn lateral_direction(&self) -> Vec3<T> {
        self.rotation.column(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray<T> {
    pub origin: Vec3<T>,
    direction: Vec3<T>,
    pub max_depth: T,
}

impl<T: Real> Ray<T> {
    /// Normalizes `direction`; fails on a zero direction or negative depth.
    pub fn new(origin: Vec3<T>, direction: Vec3<T>, max_depth: T) -> Result<Self> {
        let direction = direction.normalized().ok_or_else(|| Error::invalid("ray direction is zero"))?;
        if !(max_depth >= T::zero()) {
            return Err(Error::invalid("ray max_depth must be >= 0"));
        }
        Ok(Self { origin, direction, max_depth })
    }

    pub fn direction(&self) -> Vec3<T> {
        self.direction
    }

    pub fn at(&self, depth: T) -> Vec3<T> {
        self.origin + self.direction * depth
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct Aabb<T> {
    pub min: Vec3<T>,
    pub max: Vec3<T>,
}

impl<T: Real> Aabb<T> {
    pub fn new(min: Vec3<T>, max: Vec3<T>) -> Self {
        Self { min, max }
    }

    pub fn unit() -> Self {
        Self::new(Vec3::zero(), Vec3::splat(T::one()))
    }

    pub fn size(&self) -> Vec3<T> {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3<T> {
        (self.min + self.max) * T::lit(0.5)
    }

    pub fn contains(&self, p: Vec3<T>) -> bool {
        p.x >= self.min.x
            && p.y >= self.min.y
            && p.z >= self.min.z
            && p.x <= self.max.x
            && p.y <= self.max.y
            && p.z <= self.max.z
    }

    pub fn contains_box(&self, other: &Self) -> bool {
        self.contains(other.min) && self.contains(other.max)
    }

    pub fn has_volume(&self) -> bool {
        let s = self.size();
        s.x > T::zero() && s.y > T::zero() && s.z > T::zero()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrajectoryKind {
    Row,
    Column,
    TiltedMinus10,
    TiltedPlus10,
}

impl TrajectoryKind {
    pub const ALL: [Self; 4] = [Self::Row, Self::Column, Self::TiltedMinus10, Self::TiltedPlus10];

    /// Stable numeric code used in dataset files.
    pub fn code(self) -> u8 {
        match self {
            Self::Row => 0,
            Self::Column => 1,
            Self::TiltedMinus10 => 2,
            Self::TiltedPlus10 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }

    /// World axis the frames advance along.
    pub fn sweep_axis<T: Real>(self) -> Vec3<T> {
        match self {
            Self::Column => Vec3::unit_y(),
            _ => Vec3::unit_x(),
        }
    }

    fn tilt_degrees(self) -> f64 {
        match self {
            Self::TiltedMinus10 => -TILT_DEGREES,
            Self::TiltedPlus10 => TILT_DEGREES,
            _ => 0.0,
        }
    }

    /// Orientation shared by every frame of the sweep.
    pub fn frame_rotation<T: Real>(self) -> Mat3<T> {
        let base = match self {
            // Exact quarter turn about z; the trigonometric form leaves
            // 1e-17 residues that push boundary rays out of the cube.
            Self::Column => Mat3::from_columns(Vec3::unit_y(), -Vec3::unit_x(), Vec3::unit_z()),
            _ => Mat3::identity(),
        };
        let tilt = self.tilt_degrees();
        if tilt == 0.0 {
            base
        } else {
            Mat3::rotation(self.sweep_axis(), T::lit(tilt.to_radians())).mul_mat(&base)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanTrajectory<T> {
    pub kind: TrajectoryKind,
    pub frames: Vec<Pose<T>>,
    pub scanlines_per_frame: usize,
    pub samples_per_scanline: usize,
    /// Transducer face width.
    pub aperture: T,
    /// Imaging depth along the beam.
    pub depth: T,
}

/// Serializable description of one sweep, as stored in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    pub frames: usize,
    pub extent: Aabb<f64>,
    pub scanlines_per_frame: usize,
    pub samples_per_scanline: usize,
}

impl TrajectorySpec {
    pub fn build<T: Real>(&self) -> Result<ScanTrajectory<T>> {
        if self.scanlines_per_frame == 0 || self.samples_per_scanline == 0 {
            return Err(Error::invalid("scanline and sample counts must be >= 1"));
        }
        let extent = Aabb::new(self.extent.min.cast(), self.extent.max.cast());
        let mut t = make_trajectory(self.kind, self.frames, extent)?;
        t.scanlines_per_frame = self.scanlines_per_frame;
        t.samples_per_scanline = self.samples_per_scanline;
        Ok(t)
    }
}

/// Evenly spaced parallel frames sweeping `extent`.
///
/// Frames advance along the sweep axis from `extent.min` to `extent.max`
/// inclusive (a single frame sits at the center) and each probe rests on the
/// `z = min` face, centered across the other horizontal axis. The returned
/// trajectory uses 32 scanlines and 64 samples per scanline; callers usually
/// go through [`TrajectorySpec::build`] to set those.
pub fn make_trajectory<T: Real>(
    kind: TrajectoryKind,
    n_frames: usize,
    extent: Aabb<T>,
) -> Result<ScanTrajectory<T>> {
    if n_frames == 0 {
        return Err(Error::invalid("trajectory needs at least one frame"));
    }
    if !extent.has_volume() {
        return Err(Error::invalid("trajectory extent has zero volume"));
    }
    if !Aabb::unit().contains_box(&extent) {
        return Err(Error::invalid("trajectory extent must lie inside the unit cube"));
    }
    let rotation = kind.frame_rotation::<T>();
    let center = extent.center();
    let size = extent.size();
    let (sweep_lo, sweep_len, aperture) = match kind {
        TrajectoryKind::Column => (extent.min.y, size.y, size.x),
        _ => (extent.min.x, size.x, size.y),
    };
    let frames = (0..n_frames)
        .map(|i| {
            let s = if n_frames == 1 {
                sweep_lo + sweep_len * T::lit(0.5)
            } else {
                sweep_lo + sweep_len * T::lit(i as f64 / (n_frames - 1) as f64)
            };
            let translation = match kind {
                TrajectoryKind::Column => Vec3::new(center.x, s, extent.min.z),
                _ => Vec3::new(s, center.y, extent.min.z),
            };
            Pose { rotation, translation }
        })
        .collect();
    Ok(ScanTrajectory {
        kind,
        frames,
        scanlines_per_frame: 32,
        samples_per_scanline: 64,
        aperture,
        depth: size.z,
    })
}

impl<T: Real> ScanTrajectory<T> {
    pub fn frame_rays(&self, frame: usize) -> Result<Vec<Ray<T>>> {
        let pose = self.frames.get(frame).ok_or_else(|| Error::invalid(format!("frame {frame} out of range")))?;
        frame_rays(pose, self.scanlines_per_frame, self.aperture, self.depth)
    }

    /// Depths of the labelled nodes along every scanline (cell centers).
    pub fn sample_depths(&self) -> Vec<T> {
        let n = self.samples_per_scanline;
        let step = self.depth / T::lit(n as f64);
        (0..n).map(|j| step * (T::lit(j as f64) + T::lit(0.5))).collect()
    }
}

/// Parallel scanlines of a linear-array probe.
///
/// Origins are cell-centered across a face of width `aperture`, so an odd
/// count always places one ray on the face center.
pub fn frame_rays<T: Real>(pose: &Pose<T>, scanlines: usize, aperture: T, depth: T) -> Result<Vec<Ray<T>>> {
    if scanlines == 0 {
        return Err(Error::invalid("scanlines must be >= 1"));
    }
    if !(depth > T::zero()) {
        return Err(Error::invalid("depth must be > 0"));
    }
    let dir = pose.beam_direction();
    let lateral = pose.lateral_direction();
    (0..scanlines)
        .map(|i| {
            let offset = (T::lit((i as f64 + 0.5) / scanlines as f64) - T::lit(0.5)) * aperture;
            Ray::new(pose.translation + lateral * offset, dir, depth)
        })
        .collect()
}

/// Uniform scale plus translation, `p' = scale * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct Similarity<T> {
    pub scale: T,
    pub translation: Vec3<T>,
}

impl<T: Real> Similarity<T> {
    pub fn identity() -> Self {
        Self { scale: T::one(), translation: Vec3::zero() }
    }

    pub fn apply(&self, p: Vec3<T>) -> Vec3<T> {
        p * self.scale + self.translation
    }

    pub fn inverse(&self) -> Self {
        let s = T::one() / self.scale;
        Self { scale: s, translation: -self.translation * s }
    }

    pub fn apply_inverse(&self, p: Vec3<T>) -> Vec3<T> {
        (p - self.translation) * (T::one() / self.scale)
    }
}

/// Maps `points` into `[0,1]³` with one isotropic scale.
///
/// The bounding box minimum lands on the origin and the longest side spans
/// exactly `[0, 1]`.
pub fn normalize_to_unit_cube<T: Real>(points: &[Vec3<T>]) -> Result<(Vec<Vec3<T>>, Similarity<T>)> {
    let first = *points.first().ok_or_else(|| Error::invalid("no points to normalize"))?;
    let (lo, hi) = points.iter().fold((first, first), |(lo, hi), &p| (lo.min(p), hi.max(p)));
    let longest = (hi - lo).max_element();
    if !(longest > T::zero()) {
        return Err(Error::invalid("cannot normalize identical points"));
    }
    let scale = T::one() / longest;
    let transform = Similarity { scale, translation: -lo * scale };
    let out = points
        .iter()
        .map(|&p| transform.apply(p).map(|c| c.max(T::zero()).min(T::one())))
        .collect();
    Ok((out, transform))
}
