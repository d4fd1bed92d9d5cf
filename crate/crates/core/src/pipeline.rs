//! End-to-end commands over a [`RunConfig`]: simulate, train, finetune,
//! extract, evaluate and ablate. Every command leaves a JSON manifest next to
//! its outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{MetricsParams, RunConfig, ScalarKind};
use crate::error::{Error, Result};
use crate::extraction::{marching_cubes, read_mesh, sample_grid, smooth, write_mesh, PhantomField, TriangleMesh};
use crate::geometry::Similarity;
use crate::linalg::Vec3;
use crate::metrics::{mesh_metrics, MetricsReport};
use crate::network::{load_checkpoint, save_checkpoint, NetworkConfig, OccupancyModel};
use crate::phantom::{perturb_labels, PhantomSpec};
use crate::real::Real;
use crate::training::{
    finetune, read_dataset, subsample, train, write_dataset, AcousticSample, LossKind, LossTrace, TrainConfig,
    TrainingSet,
};

pub const DATASET_FILE: &str = "dataset.bin";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.ply";
pub const TRANSFER_DATASET_FILE: &str = "transfer_dataset.bin";
pub const TRANSFER_GROUND_TRUTH_FILE: &str = "transfer_ground_truth.ply";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_RUNS_FILE: &str = "ablation_runs.csv";

/// Which phantom of the config a command works on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Primary,
    Transfer,
}

impl Target {
    pub fn label(self) -> &'static str {
        match self {
            Self::Primary => "A",
            Self::Transfer => "B",
        }
    }
}

impl RunConfig {
    pub fn target_phantom(&self, target: Target) -> Result<&PhantomSpec> {
        match target {
            Target::Primary => Ok(&self.phantom),
            Target::Transfer => self
                .transfer_phantom
                .as_ref()
                .ok_or_else(|| Error::config("transfer_phantom", "required for transfer targets")),
        }
    }

    /// Seed of the feature jitter for `target`.
    pub fn target_seed(&self, target: Target) -> u64 {
        match target {
            Target::Primary => self.seed,
            Target::Transfer => self.seed ^ 0x7472_616e_7366_6572,
        }
    }

    /// Maps unit-cube coordinates to millimetres (`unit = scale · mm + t`).
    pub fn mm_transform(&self) -> Similarity<f64> {
        Similarity { scale: 1.0 / self.metrics.mm_per_unit, translation: Vec3::zero() }
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }
}

/// Reconstruction variants compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// Acoustic-feature input with the transmittance-scaled loss.
    #[serde(rename = "UltrON")]
    UltrOn,
    /// Coordinate input with plain cross-entropy.
    #[serde(rename = "ON")]
    On,
    /// Acoustic-feature input with plain cross-entropy.
    #[serde(rename = "UltrON-PlainBCE")]
    UltrOnPlainBce,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Self::UltrOn => "UltrON",
            Self::On => "ON",
            Self::UltrOnPlainBce => "UltrON-PlainBCE",
        }
    }

    pub fn loss_kind(self) -> LossKind {
        match self {
            Self::UltrOn => LossKind::AttenuationCompensated,
            Self::On | Self::UltrOnPlainBce => LossKind::PlainBce,
        }
    }

    pub fn network(self, cfg: &RunConfig) -> &NetworkConfig {
        match self {
            Self::On => &cfg.baseline_network,
            Self::UltrOn | Self::UltrOnPlainBce => &cfg.network,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Provenance record; identical manifests imply identical outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_hash: Option<String>,
    pub seed: u64,
    pub scalar: Option<ScalarKind>,
    /// File name → SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub details: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    pub fn new(command: &str, cfg: Option<&RunConfig>, seed: u64) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: cfg.map(RunConfig::hash).transpose()?,
            seed,
            scalar: cfg.map(|c| c.scalar),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            details: BTreeMap::new(),
        })
    }

    fn key(path: &Path) -> String {
        path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(Self::key(path), hash_file(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(Self::key(path), hash_file(path)?);
        Ok(())
    }

    pub fn detail(&mut self, key: &str, value: impl Serialize) {
        self.details.insert(key.into(), serde_json::to_value(value).expect("manifest details serialize"));
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// `<file>.manifest.json` beside an output file.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    output.with_file_name(name)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parent_dir(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

macro_rules! with_scalar {
    ($kind:expr, $f:ident ( $($arg:expr),* $(,)? )) => {
        match $kind {
            ScalarKind::F32 => $f::<f32>($($arg),*),
            ScalarKind::F64 => $f::<f64>($($arg),*),
        }
    };
}

/// Simulated supervision for `target`, including configured label noise.
pub fn simulate_samples<T: Real>(cfg: &RunConfig, target: Target) -> Result<Vec<AcousticSample<T>>> {
    let phantom = cfg.target_phantom(target)?;
    let seed = cfg.target_seed(target);
    let trajectories = cfg.trajectories.iter().map(|t| t.build::<T>()).collect::<Result<Vec<_>>>()?;
    let samples = crate::training::build_dataset(&trajectories, phantom, &cfg.transmittance, cfg.simulation.labeling, seed)?;
    let sim = &cfg.simulation;
    if sim.label_flip_rate > 0.0 || sim.pose_noise > 0.0 {
        perturb_labels(&samples, sim.label_flip_rate, sim.pose_noise, seed)
    } else {
        Ok(samples)
    }
}

pub fn ground_truth_mesh(cfg: &RunConfig, target: Target) -> Result<TriangleMesh<f64>> {
    Ok(cfg.target_phantom(target)?.ground_truth(cfg.extraction.ground_truth_resolution)?.surface_mesh)
}

/// Writes the dataset and ground-truth mesh of every configured phantom.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<Manifest> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    let mut manifest = Manifest::new("simulate", Some(cfg), cfg.seed)?;
    let mut targets = vec![(Target::Primary, DATASET_FILE, GROUND_TRUTH_FILE)];
    if cfg.transfer_phantom.is_some() {
        targets.push((Target::Transfer, TRANSFER_DATASET_FILE, TRANSFER_GROUND_TRUTH_FILE));
    }
    let tf = cfg.mm_transform();
    for (target, data_name, gt_name) in targets {
        let samples = simulate_samples::<f64>(cfg, target)?;
        let data_path = dir.join(data_name);
        write_dataset(&data_path, &samples)?;
        manifest.add_output(&data_path)?;
        manifest.detail(&format!("{data_name}.samples"), samples.len());
        let gt_path = dir.join(gt_name);
        write_mesh(&gt_path, &ground_truth_mesh(cfg, target)?, Some(&tf))?;
        manifest.add_output(&gt_path)?;
    }
    manifest.write(&dir.join("simulate.manifest.json"))?;
    Ok(manifest)
}

/// Fresh model for `method`, trained on `fraction` of the labels per frame.
pub fn train_method<T: Real>(
    cfg: &RunConfig,
    samples: &[AcousticSample<T>],
    method: Method,
    fraction: f64,
    seed: u64,
) -> Result<(OccupancyModel<T>, LossTrace)> {
    let tcfg = TrainConfig { loss_kind: method.loss_kind(), supervision_fraction: fraction, ..cfg.train.clone() };
    train_with(method.network(cfg), samples, &tcfg, seed)
}

fn train_with<T: Real>(
    network: &NetworkConfig,
    samples: &[AcousticSample<T>],
    tcfg: &TrainConfig,
    seed: u64,
) -> Result<(OccupancyModel<T>, LossTrace)> {
    tcfg.validate()?;
    let model = OccupancyModel::new(network.clone(), seed)?;
    let subset = subsample(samples, tcfg.supervision_fraction, seed)?;
    let set = TrainingSet::encode(&model, &subset);
    train(model, &set, tcfg, seed)
}

/// Network family for [`cmd_train`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Acoustic,
    Baseline,
}

fn train_file<T: Real>(cfg: &RunConfig, dataset: &Path, kind: ModelKind, checkpoint: &Path) -> Result<Manifest> {
    let samples = read_dataset::<T>(dataset)?;
    let network = match kind {
        ModelKind::Acoustic => &cfg.network,
        ModelKind::Baseline => &cfg.baseline_network,
    };
    let (model, trace) = train_with(network, &samples, &cfg.train, cfg.seed)?;
    parent_dir(checkpoint)?;
    save_checkpoint(&model, checkpoint)?;
    let trace_path = checkpoint.with_extension("loss.csv");
    write_text(&trace_path, &trace.to_csv())?;
    let mut m = Manifest::new("train", Some(cfg), cfg.seed)?;
    m.add_input(dataset)?;
    m.add_output(checkpoint)?;
    m.add_output(&trace_path)?;
    m.detail("model", kind);
    m.detail("loss_kind", cfg.train.loss_kind);
    m.detail("supervision_fraction", cfg.train.supervision_fraction);
    m.detail("labels_available", samples.len());
    m.detail("labels_used", subsample(&samples, cfg.train.supervision_fraction, cfg.seed)?.len());
    m.detail("iterations", cfg.train.iterations);
    m.write(&manifest_path(checkpoint))?;
    Ok(m)
}

/// Trains on a dataset file and writes the checkpoint plus `<stem>.loss.csv`.
pub fn cmd_train(cfg: &RunConfig, dataset: &Path, kind: ModelKind, checkpoint: &Path) -> Result<Manifest> {
    cfg.validate()?;
    with_scalar!(cfg.scalar, train_file(cfg, dataset, kind, checkpoint))
}

/// Fine-tuning with the config's fraction, iterations and learning rate.
pub fn finetune_model<T: Real>(
    cfg: &RunConfig,
    model: OccupancyModel<T>,
    samples: &[AcousticSample<T>],
    seed: u64,
) -> Result<(OccupancyModel<T>, LossTrace)> {
    let ft = &cfg.finetune;
    let tcfg = TrainConfig { learning_rate: ft.learning_rate.unwrap_or(cfg.train.learning_rate), ..cfg.train.clone() };
    finetune(model, samples, ft.fraction, ft.iterations, &tcfg, seed)
}

fn finetune_file<T: Real>(cfg: &RunConfig, checkpoint: &Path, dataset: &Path, out: &Path) -> Result<Manifest> {
    let model = load_checkpoint::<T>(checkpoint)?;
    let samples = read_dataset::<T>(dataset)?;
    let (tuned, trace) = finetune_model(cfg, model, &samples, cfg.seed)?;
    parent_dir(out)?;
    save_checkpoint(&tuned, out)?;
    let trace_path = out.with_extension("loss.csv");
    write_text(&trace_path, &trace.to_csv())?;
    let mut m = Manifest::new("finetune", Some(cfg), cfg.seed)?;
    m.add_input(checkpoint)?;
    m.add_input(dataset)?;
    m.add_output(out)?;
    m.add_output(&trace_path)?;
    m.detail("fraction", cfg.finetune.fraction);
    m.detail("iterations", cfg.finetune.iterations);
    m.write(&manifest_path(out))?;
    Ok(m)
}

pub fn cmd_finetune(cfg: &RunConfig, checkpoint: &Path, dataset: &Path, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    with_scalar!(cfg.scalar, finetune_file(cfg, checkpoint, dataset, out))
}

/// Samples the model over the target phantom's field, smooths and meshes it.
pub fn extract_mesh<T: Real>(cfg: &RunConfig, model: &OccupancyModel<T>, target: Target) -> Result<TriangleMesh<T>> {
    let field = PhantomField { phantom: cfg.target_phantom(target)?, seed: cfg.target_seed(target) };
    let ex = &cfg.extraction;
    let grid = sample_grid(model, &field, [ex.resolution; 3])?;
    let grid = smooth(&grid, ex.smoothing_sigma, ex.smoothing_radius)?;
    Ok(marching_cubes(&grid, T::lit(ex.iso)))
}

fn extract_file<T: Real>(cfg: &RunConfig, checkpoint: &Path, target: Target, out: &Path) -> Result<Manifest> {
    let model = load_checkpoint::<T>(checkpoint)?;
    let mesh = extract_mesh(cfg, &model, target)?;
    parent_dir(out)?;
    write_mesh(out, &mesh, Some(&cfg.mm_transform()))?;
    let mut m = Manifest::new("extract", Some(cfg), cfg.seed)?;
    m.add_input(checkpoint)?;
    m.add_output(out)?;
    m.detail("target", target);
    m.detail("triangles", mesh.triangles.len());
    m.write(&manifest_path(out))?;
    Ok(m)
}

/// Writes the extracted surface as PLY or OBJ (by extension).
pub fn cmd_extract(cfg: &RunConfig, checkpoint: &Path, target: Target, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    with_scalar!(cfg.scalar, extract_file(cfg, checkpoint, target, out))
}

/// Millimetre metrics against the ground truth. A prediction without surface
/// area scores infinity instead of failing.
pub fn score_mesh<T: Real>(
    params: &MetricsParams,
    pred: &TriangleMesh<T>,
    gt: &TriangleMesh<f64>,
    seed: u64,
) -> Result<MetricsReport> {
    if !(pred.surface_area().as_f64() > 0.0) {
        return Ok(MetricsReport::unbounded(params.n_points, seed));
    }
    Ok(mesh_metrics(pred, gt, params.n_points, seed)?.scaled(params.mm_per_unit))
}

/// Compares two mesh files. Distances are in millimetres when the reference
/// carries a unit-cube transform, otherwise in file units.
pub fn cmd_evaluate(mesh: &Path, gt: &Path, n_points: usize, seed: u64) -> Result<MetricsReport> {
    let (pred, _) = read_mesh(mesh)?;
    let (reference, tf) = read_mesh(gt)?;
    let mm_per_unit = tf.map_or(1.0, |t| 1.0 / t.scale);
    Ok(mesh_metrics(&pred, &reference, n_points, seed)?.scaled(mm_per_unit))
}

/// One method/fraction combination over all ablation seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: Method,
    pub fraction: f64,
    pub runs: Vec<MetricsReport>,
    /// Per-metric median over `runs`.
    pub median: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub phantom: String,
    pub dataset_hash: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// One row per method with per-metric medians; `seed` is the base seed.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", MetricsReport::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.median.csv_row(&self.phantom, r.method.label(), r.fraction));
        }
        s
    }

    /// Every individual run.
    pub fn runs_csv(&self) -> String {
        let mut s = format!("{}\n", MetricsReport::CSV_HEADER);
        for r in &self.rows {
            for run in &r.runs {
                let _ = writeln!(s, "{}", run.csv_row(&self.phantom, r.method.label(), r.fraction));
            }
        }
        s
    }

    pub fn row(&self, method: Method, fraction: f64) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.method == method && r.fraction == fraction)
    }
}

/// Rows compared by the ablation: dense baseline, the weak UltrON
/// fractions, and plain cross-entropy at the largest weak fraction.
pub fn ablation_plan(cfg: &RunConfig) -> Vec<(Method, f64)> {
    let weak = &cfg.ablation.weak_fractions;
    let mut plan = vec![(Method::On, 1.0)];
    plan.extend(weak.iter().map(|&f| (Method::UltrOn, f)));
    plan.push((Method::UltrOnPlainBce, weak[0]));
    plan
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn median_report(runs: &[MetricsReport], seed: u64) -> MetricsReport {
    let pick = |f: fn(&MetricsReport) -> f64| median(&mut runs.iter().map(f).collect::<Vec<_>>());
    MetricsReport {
        cd: pick(|r| r.cd),
        hd: pick(|r| r.hd),
        mad: pick(|r| r.mad),
        rmse: pick(|r| r.rmse),
        n_points: runs[0].n_points,
        seed,
    }
}

/// Trained models of one ablation, indexed like `report.rows[i]` then seed.
pub struct AblationOutcome<T> {
    pub report: AblationReport,
    pub models: Vec<Vec<OccupancyModel<T>>>,
}

/// Trains, extracts and scores every planned row for every seed.
pub fn run_ablation<T: Real>(
    cfg: &RunConfig,
    samples: &[AcousticSample<T>],
    gt: &TriangleMesh<f64>,
    dataset_hash: &str,
) -> Result<AblationOutcome<T>> {
    let mut rows = Vec::new();
    let mut models = Vec::new();
    for (method, fraction) in ablation_plan(cfg) {
        let mut runs = Vec::new();
        let mut row_models = Vec::new();
        for &seed in &cfg.ablation.seeds {
            let (model, _) = train_method(cfg, samples, method, fraction, seed)?;
            let mesh = extract_mesh(cfg, &model, Target::Primary)?;
            runs.push(score_mesh(&cfg.metrics, &mesh, gt, seed)?);
            row_models.push(model);
        }
        rows.push(AblationRow { method, fraction, median: median_report(&runs, cfg.seed), runs });
        models.push(row_models);
    }
    let report = AblationReport { phantom: Target::Primary.label().into(), dataset_hash: dataset_hash.into(), rows };
    Ok(AblationOutcome { report, models })
}

fn ablate_typed<T: Real>(cfg: &RunConfig) -> Result<AblationReport> {
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    let samples64 = simulate_samples::<f64>(cfg, Target::Primary)?;
    let data_path = dir.join(DATASET_FILE);
    write_dataset(&data_path, &samples64)?;
    let samples = read_dataset::<T>(&data_path)?;
    let dataset_hash = hash_file(&data_path)?;
    let gt = ground_truth_mesh(cfg, Target::Primary)?;
    let gt_path = dir.join(GROUND_TRUTH_FILE);
    write_mesh(&gt_path, &gt, Some(&cfg.mm_transform()))?;

    let report = run_ablation(cfg, &samples, &gt, &dataset_hash)?.report;
    let table = dir.join(ABLATION_FILE);
    let runs = dir.join(ABLATION_RUNS_FILE);
    write_text(&table, &report.to_csv())?;
    write_text(&runs, &report.runs_csv())?;

    let mut m = Manifest::new("ablate", Some(cfg), cfg.seed)?;
    m.inputs.insert(DATASET_FILE.into(), dataset_hash.clone());
    m.add_output(&gt_path)?;
    m.add_output(&table)?;
    m.add_output(&runs)?;
    let rows: Vec<_> = report
        .rows
        .iter()
        .map(|r| {
            serde_json::json!({
                "method": r.method.label(),
                "fraction": r.fraction,
                "seeds": cfg.ablation.seeds,
                "dataset_hash": dataset_hash,
            })
        })
        .collect();
    m.detail("rows", rows);
    m.write(&dir.join("ablate.manifest.json"))?;
    Ok(report)
}

/// Runs the ablation on the primary phantom and writes `ablation.csv`
/// (medians) and `ablation_runs.csv` (every seed).
pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblationReport> {
    cfg.validate()?;
    with_scalar!(cfg.scalar, ablate_typed(cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::TrajectoryKind;

    fn tiny_config(dir: &Path) -> RunConfig {
        let mut c = RunConfig::desk();
        c.output_dir = dir.to_path_buf();
        c.trajectories = RunConfig::multiview(2);
        for t in &mut c.trajectories {
            t.scanlines_per_frame = 4;
            t.samples_per_scanline = 16;
        }
        c.network.hidden_layers = 2;
        c.network.hidden_width = 8;
        c.network.skip_at = None;
        c.baseline_network.hidden_layers = 2;
        c.baseline_network.hidden_width = 8;
        c.baseline_network.skip_at = None;
        c.train.iterations = 5;
        c.train.batch_size = 8;
        c.extraction.resolution = 8;
        c.extraction.ground_truth_resolution = 16;
        c.metrics.n_points = 64;
        c.ablation.seeds = vec![3];
        c
    }

    fn scratch(name: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("sonocc-pipe-{name}-{}", std::process::id()));
        std::fs::remove_dir_all(&d).ok();
        d
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(median(&mut [1.0, f64::INFINITY, 2.0]), 2.0);
    }

    #[test]
    fn plan_has_four_rows() {
        let plan = ablation_plan(&RunConfig::desk());
        assert_eq!(plan, vec![(Method::On, 1.0), (Method::UltrOn, 0.1), (Method::UltrOn, 0.05), (Method::UltrOnPlainBce, 0.1)]);
    }

    #[test]
    fn simulate_covers_all_sweeps() {
        let dir = scratch("sim");
        let cfg = tiny_config(&dir);
        let m = cmd_simulate(&cfg).unwrap();
        let samples = read_dataset::<f64>(&dir.join(DATASET_FILE)).unwrap();
        let sweeps: std::collections::BTreeSet<_> = samples.iter().map(|s| s.sweep).collect();
        assert_eq!(sweeps.len(), 4);
        assert!(sweeps.contains(&TrajectoryKind::TiltedMinus10));
        assert!(m.outputs.contains_key(TRANSFER_DATASET_FILE));
        let (gt, tf) = read_mesh(&dir.join(GROUND_TRUTH_FILE)).unwrap();
        assert!(gt.is_watertight());
        assert_eq!(tf, Some(cfg.mm_transform()));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn train_extract_evaluate_chain() {
        let dir = scratch("chain");
        let mut cfg = tiny_config(&dir);
        cfg.train.supervision_fraction = 0.5;
        cmd_simulate(&cfg).unwrap();
        let ckpt = dir.join("model.json");
        let m = cmd_train(&cfg, &dir.join(DATASET_FILE), ModelKind::Acoustic, &ckpt).unwrap();
        assert!(dir.join("model.loss.csv").exists());
        let used = m.details["labels_used"].as_u64().unwrap();
        let avail = m.details["labels_available"].as_u64().unwrap();
        assert!(used * 2 <= avail + 32 && used > 0);

        let tuned = dir.join("tuned.json");
        cmd_finetune(&cfg, &ckpt, &dir.join(TRANSFER_DATASET_FILE), &tuned).unwrap();
        let before = load_checkpoint::<f32>(&ckpt).unwrap();
        let after = load_checkpoint::<f32>(&tuned).unwrap();
        let n = before.layers.len();
        assert_eq!(before.layers[n - 2..], after.layers[n - 2..]);

        let mesh = dir.join("mesh.obj");
        cmd_extract(&cfg, &ckpt, Target::Primary, &mesh).unwrap();
        assert!(manifest_path(&mesh).exists());
        let gt = dir.join(GROUND_TRUTH_FILE);
        let r = cmd_evaluate(&gt, &gt, 500, 1).unwrap();
        assert_eq!((r.cd, r.hd), (0.0, 0.0));
        assert!(matches!(cmd_evaluate(&dir.join("nope.ply"), &gt, 10, 0), Err(Error::Io { .. })));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn ablate_writes_four_rows() {
        let dir = scratch("ablate");
        let cfg = tiny_config(&dir);
        let report = cmd_ablate(&cfg).unwrap();
        let csv = std::fs::read_to_string(dir.join(ABLATION_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert_eq!(report.rows.len(), 4);
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("ablate.manifest.json")).unwrap()).unwrap();
        let rows = manifest.details["rows"].as_array().unwrap();
        assert!(rows.iter().all(|r| r["dataset_hash"] == report.dataset_hash.as_str()));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn missing_transfer_phantom_is_a_config_error() {
        let mut cfg = RunConfig::desk();
        cfg.transfer_phantom = None;
        assert!(matches!(cfg.target_phantom(Target::Transfer), Err(Error::Config { .. })));
    }
}
