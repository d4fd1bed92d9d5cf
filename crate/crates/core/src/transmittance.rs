//! Beam transmittance: the fraction of energy left at depth `x` after
//! attenuation and reflection losses upstream of it,
//!
//! ```text
//! T(x) = T(0) · exp(-∫₀^{x-ε} β(n) dn) · exp(-∫₀^{x-ε} α(n) dn)
//! ```
//!
//! Both integrals share one quadrature grid, so they are accumulated together
//! as the integral of `α + β`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Ray;
use crate::linalg::Vec3;
use crate::phantom::AcousticProperties;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrature {
    #[default]
    Midpoint,
    Trapezoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransmittanceParams {
    /// Quadrature cell length along the beam.
    pub step: f64,
    /// Integration stops this far before the sample; `None` means one step.
    pub epsilon: Option<f64>,
    pub t0: f64,
    pub quadrature: Quadrature,
    /// Samples below this transmittance count as acoustic shadow.
    pub shadow_threshold: f64,
}

impl Default for TransmittanceParams {
    fn default() -> Self {
        Self { step: 1.0 / 512.0, epsilon: None, t0: 1.0, quadrature: Quadrature::Midpoint, shadow_threshold: 0.05 }
    }
}

impl TransmittanceParams {
    pub fn epsilon(&self) -> f64 {
        self.epsilon.unwrap_or(self.step)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) {
            return Err(Error::config("transmittance.step", "must be > 0"));
        }
        let eps = self.epsilon();
        if !(0.0..2.0 * self.step).contains(&eps) {
            return Err(Error::config("transmittance.epsilon", "must lie in [0, 2·step)"));
        }
        if !(self.t0 > 0.0 && self.t0 <= 1.0) {
            return Err(Error::config("transmittance.t0", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.shadow_threshold) {
            return Err(Error::config("transmittance.shadow_threshold", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransmittanceProfile<T> {
    pub ray: Ray<T>,
    pub depths: Vec<T>,
    pub values: Vec<T>,
    pub t0: T,
}

/// Integrates the field along `ray` and returns `T` on the quadrature nodes
/// `0, step, 2·step, …, max_depth`.
pub fn transmittance_along<T, F>(ray: &Ray<T>, field: F, params: &TransmittanceParams) -> Result<TransmittanceProfile<T>>
where
    T: Real,
    F: Fn(Vec3<T>) -> AcousticProperties<T>,
{
    params.validate()?;
    let step = T::lit(params.step);
    let eps = T::lit(params.epsilon());
    let t0 = T::lit(params.t0);
    let rate = |d: T| field(ray.at(d)).extinction().max(T::zero());

    let cells = (ray.max_depth.as_f64() / params.step).ceil().max(0.0) as usize;
    let mut depths = Vec::with_capacity(cells + 1);
    let mut cumulative = Vec::with_capacity(cells + 1);
    depths.push(T::zero());
    cumulative.push(T::zero());
    let mut acc = T::zero();
    let half = T::lit(0.5);
    for k in 0..cells {
        let a = T::lit(k as f64) * step;
        let b = (a + step).min(ray.max_depth);
        let h = b - a;
        let contrib = match params.quadrature {
            Quadrature::Midpoint => h * rate(a + h * half),
            Quadrature::Trapezoid => h * half * (rate(a) + rate(b)),
        };
        acc += contrib;
        depths.push(b);
        cumulative.push(acc);
    }

    let integral_to = |s: T| -> T {
        if s <= T::zero() {
            return T::zero();
        }
        interpolate(&depths, &cumulative, s)
    };
    let values = depths.iter().map(|&d| t0 * (-integral_to(d - eps)).exp()).collect();
    Ok(TransmittanceProfile { ray: *ray, depths, values, t0 })
}

/// Linear interpolation on an ascending node list, clamped at both ends.
fn interpolate<T: Real>(xs: &[T], ys: &[T], x: T) -> T {
    let last = xs.len() - 1;
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[last] {
        return ys[last];
    }
    let hi = xs.partition_point(|&v| v < x);
    if xs[hi] == x {
        return ys[hi];
    }
    let lo = hi - 1;
    let w = (x - xs[lo]) / (xs[hi] - xs[lo]);
    ys[lo] + (ys[hi] - ys[lo]) * w
}

/// Transmittance at an arbitrary depth by linear interpolation on the profile.
pub fn transmittance_at<T: Real>(sample_depth: T, profile: &TransmittanceProfile<T>) -> Result<T> {
    let slack = T::epsilon() * T::lit(64.0) * profile.ray.max_depth.max(T::one());
    if !(sample_depth >= -slack && sample_depth <= profile.ray.max_depth + slack) {
        return Err(Error::invalid(format!(
            "depth {sample_depth} outside ray extent [0, {}]",
            profile.ray.max_depth
        )));
    }
    Ok(interpolate(&profile.depths, &profile.values, sample_depth))
}
