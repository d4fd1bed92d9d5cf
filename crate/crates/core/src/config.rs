//! Run configuration: one TOML file per experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, TrajectoryKind, TrajectorySpec};
use crate::metrics::DEFAULT_SAMPLES;
use crate::network::NetworkConfig;
use crate::phantom::{presets, PhantomSpec};
use crate::training::{ShadowLabeling, TrainConfig};
use crate::transmittance::TransmittanceParams;

/// Floating-point width used for training and extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarKind {
    #[default]
    F32,
    F64,
}

/// How the simulated scans are turned into supervision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationParams {
    pub labeling: ShadowLabeling,
    /// Probability of flipping each label.
    pub label_flip_rate: f64,
    /// Maximum rigid offset applied per frame, unit-cube units.
    pub pose_noise: f64,
}

impl Default for SimulationParams {
    fn default() -> Self {
        Self { labeling: ShadowLabeling::Exclude, label_flip_rate: 0.0, pose_noise: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractionParams {
    /// Nodes per axis.
    pub resolution: usize,
    /// Gaussian sigma in cells; 0 disables smoothing.
    pub smoothing_sigma: f64,
    pub smoothing_radius: usize,
    /// Level in the shifted (`p - 0.5`) field.
    pub iso: f64,
    /// Ground-truth mesh resolution.
    pub ground_truth_resolution: usize,
}

impl Default for ExtractionParams {
    fn default() -> Self {
        Self { resolution: 64, smoothing_sigma: 1.0, smoothing_radius: 3, iso: 0.0, ground_truth_resolution: 128 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsParams {
    pub n_points: usize,
    /// Physical edge length of the unit cube; reports are in millimetres.
    pub mm_per_unit: f64,
}

impl Default for MetricsParams {
    fn default() -> Self {
        Self { n_points: DEFAULT_SAMPLES, mm_per_unit: 100.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneParams {
    pub fraction: f64,
    pub iterations: usize,
    /// Overrides `train.learning_rate` during fine-tuning.
    pub learning_rate: Option<f64>,
}

impl Default for FinetuneParams {
    fn default() -> Self {
        Self { fraction: 0.01, iterations: 100, learning_rate: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationParams {
    /// Training seeds; each method runs once per seed.
    pub seeds: Vec<u64>,
    /// Label fraction of the weakly supervised rows, largest first.
    pub weak_fractions: Vec<f64>,
}

impl Default for AblationParams {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2], weak_fractions: vec![0.1, 0.05] }
    }
}

/// Everything one experiment needs; every stochastic step derives from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub scalar: ScalarKind,
    pub phantom: PhantomSpec,
    /// Second phantom of the same family, used as the fine-tuning target.
    #[serde(default)]
    pub transfer_phantom: Option<PhantomSpec>,
    pub trajectories: Vec<TrajectorySpec>,
    #[serde(default)]
    pub simulation: SimulationParams,
    #[serde(default)]
    pub transmittance: TransmittanceParams,
    pub network: NetworkConfig,
    /// Coordinate-input baseline.
    pub baseline_network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub finetune: FinetuneParams,
    #[serde(default)]
    pub extraction: ExtractionParams,
    #[serde(default)]
    pub metrics: MetricsParams,
    #[serde(default)]
    pub ablation: AblationParams,
}

fn fail<T>(field: impl Into<String>, message: impl Into<String>) -> Result<T> {
    Err(Error::config(field, message))
}

fn in_section(section: &str, err: Error) -> Error {
    match err {
        Error::Config { field, message } => {
            let rest = field.split_once('.').map_or(field.as_str(), |(_, r)| r);
            Error::config(format!("{section}.{rest}"), message)
        }
        Error::InvalidArgument(message) => Error::config(section, message),
        other => other,
    }
}

impl RunConfig {
    /// Four sweeps (row, column, both tilts) over the whole cube.
    pub fn multiview(frames: usize) -> Vec<TrajectorySpec> {
        TrajectoryKind::ALL
            .iter()
            .map(|&kind| TrajectorySpec {
                kind,
                frames,
                extent: Aabb::unit(),
                scanlines_per_frame: 32,
                samples_per_scanline: 64,
            })
            .collect()
    }

    /// Laptop-scale ablation: 5k iterations, 64³ grid, three seeds.
    pub fn desk() -> Self {
        let phantom = presets::vertebra(0);
        Self {
            name: "desk".into(),
            seed: 0,
            output_dir: PathBuf::from("runs/desk"),
            scalar: ScalarKind::F32,
            network: NetworkConfig::acoustic(phantom.alpha_max),
            baseline_network: NetworkConfig::coordinates(),
            transfer_phantom: Some(presets::vertebra(1)),
            phantom,
            trajectories: Self::multiview(16),
            simulation: SimulationParams { labeling: ShadowLabeling::Annotator, ..Default::default() },
            transmittance: TransmittanceParams::default(),
            train: TrainConfig { iterations: 5_000, batch_size: 64, learning_rate: 5e-4, ..Default::default() },
            finetune: FinetuneParams { learning_rate: Some(1e-4), ..Default::default() },
            extraction: ExtractionParams::default(),
            metrics: MetricsParams { n_points: 10_000, ..Default::default() },
            ablation: AblationParams::default(),
        }
    }

    /// Full schedule: 50k iterations with the default optimizer settings.
    pub fn paper_scale() -> Self {
        let mut c = Self::desk();
        c.name = "paper-scale".into();
        c.output_dir = PathBuf::from("runs/paper-scale");
        c.trajectories = Self::multiview(32);
        c.train = TrainConfig { batch_size: 256, ..Default::default() };
        c.finetune.learning_rate = None;
        c.extraction.resolution = 128;
        c.metrics = MetricsParams::default();
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper-scale" | "paper_scale" => Ok(Self::paper_scale()),
            other => Err(Error::invalid(format!("unknown preset `{other}` (expected desk or paper-scale)"))),
        }
    }

    /// Checks every section; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return fail("name", "must not be empty");
        }
        self.phantom.validate()?;
        if let Some(p) = &self.transfer_phantom {
            p.validate().map_err(|e| in_section("transfer_phantom", e))?;
        }
        if self.trajectories.is_empty() {
            return fail("trajectories", "at least one trajectory is required");
        }
        for (i, t) in self.trajectories.iter().enumerate() {
            t.build::<f64>().map_err(|e| in_section(&format!("trajectories[{i}]"), e))?;
        }
        let sim = &self.simulation;
        if !(0.0..0.5).contains(&sim.label_flip_rate) {
            return fail("simulation.label_flip_rate", "must lie in [0, 0.5)");
        }
        if !(sim.pose_noise >= 0.0 && sim.pose_noise.is_finite()) {
            return fail("simulation.pose_noise", "must be a finite value >= 0");
        }
        self.transmittance.validate()?;
        self.network.validate()?;
        if self.network.input_kind != crate::network::InputKind::AcousticFeatures {
            return fail("network.input_kind", "must be acoustic_features");
        }
        self.baseline_network.validate().map_err(|e| in_section("baseline_network", e))?;
        if self.baseline_network.input_kind != crate::network::InputKind::Coordinates {
            return fail("baseline_network.input_kind", "must be coordinates");
        }
        self.train.validate()?;
        let ft = &self.finetune;
        if !(ft.fraction > 0.0 && ft.fraction <= 1.0) {
            return fail("finetune.fraction", "must lie in (0, 1]");
        }
        if ft.learning_rate.is_some_and(|lr| !(lr > 0.0 && lr.is_finite())) {
            return fail("finetune.learning_rate", "must be > 0");
        }
        let ex = &self.extraction;
        if ex.resolution < 2 {
            return fail("extraction.resolution", "must be >= 2");
        }
        if ex.ground_truth_resolution < 2 {
            return fail("extraction.ground_truth_resolution", "must be >= 2");
        }
        if !(ex.smoothing_sigma >= 0.0 && ex.smoothing_sigma.is_finite()) {
            return fail("extraction.smoothing_sigma", "must be a finite value >= 0");
        }
        if !ex.iso.is_finite() || ex.iso.abs() >= 0.5 {
            return fail("extraction.iso", "must lie in (-0.5, 0.5)");
        }
        if self.metrics.n_points == 0 {
            return fail("metrics.n_points", "must be >= 1");
        }
        if !(self.metrics.mm_per_unit > 0.0 && self.metrics.mm_per_unit.is_finite()) {
            return fail("metrics.mm_per_unit", "must be > 0");
        }
        if self.ablation.seeds.is_empty() {
            return fail("ablation.seeds", "at least one seed is required");
        }
        if self.ablation.weak_fractions.is_empty() {
            return fail("ablation.weak_fractions", "at least one fraction is required");
        }
        if let Some(f) = self.ablation.weak_fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
            return fail("ablation.weak_fractions", format!("{f} is outside (0, 1]"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::invalid(format!("cannot serialize config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format("<config>", e.to_string()))
    }

    /// Parses and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}
