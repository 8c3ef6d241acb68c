//! Experiment configuration (TOML). Unknown keys are rejected.

use std::path::{Path, PathBuf};

use phaseuq::learner::TrainConfig;
use phaseuq::optics::LedArrayGeometry;
use phaseuq::recon::{LedOrder, SfpmConfig, SfpmInit};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;
use crate::rundir::normalize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; block seeds default to fixed offsets of it.
    #[serde(default)]
    pub seed: u64,
    pub geometry: GeometryBlock,
    pub optics: OpticsBlock,
    #[serde(default)]
    pub phantom: PhantomBlock,
    #[serde(default)]
    pub noise: NoiseBlock,
    #[serde(default)]
    pub sfpm: SfpmBlock,
    #[serde(default)]
    pub dpc: DpcBlock,
    #[serde(default)]
    pub preprocess: PreprocessBlock,
    #[serde(default)]
    pub train: TrainBlock,
    #[serde(default)]
    pub analysis: AnalysisBlock,
    #[serde(default)]
    pub paths: PathsBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryBlock {
    pub rows: usize,
    pub cols: usize,
    pub pitch_led_mm: f64,
    pub height_mm: f64,
    pub wavelength_um: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpticsBlock {
    pub na_obj: f64,
    /// Outer NA of the darkfield annulus; defaults to the array's maximum.
    #[serde(default)]
    pub na_max: Option<f64>,
    pub hires_size: usize,
    pub detector_size: usize,
    pub hires_pitch_um: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    GaussianBumps,
    ResolutionTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomBlock {
    pub kind: PhantomKind,
    pub count: usize,
    pub amplitude: [f64; 2],
    pub sigma_px: [f64; 2],
    /// Maximum phase in radians.
    pub peak: f64,
    pub largest_period_px: usize,
    /// Phase below `background_level · peak` counts as background.
    pub background_level: f64,
    pub seed: Option<u64>,
}

impl Default for PhantomBlock {
    fn default() -> Self {
        Self {
            kind: PhantomKind::GaussianBumps,
            count: 12,
            amplitude: [0.3, 1.0],
            sigma_px: [3.0, 8.0],
            peak: 1.0,
            largest_period_px: 16,
            background_level: 0.01,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    None,
    Poisson,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseBlock {
    pub kind: NoiseKind,
    /// Photon count per unit intensity (poisson) or standard deviation (gaussian).
    pub level: f64,
    pub seed: Option<u64>,
}

impl Default for NoiseBlock {
    fn default() -> Self {
        Self { kind: NoiseKind::None, level: 0.0, seed: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    Flat,
    UpsampledBrightfield,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SfpmBlock {
    pub epochs: usize,
    pub step: f64,
    pub init: InitKind,
}

impl Default for SfpmBlock {
    fn default() -> Self {
        Self { epochs: 50, step: 1.0, init: InitKind::UpsampledBrightfield }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpcBlock {
    pub beta: f64,
}

impl Default for DpcBlock {
    fn default() -> Self {
        Self { beta: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessBlock {
    pub opening_radius: usize,
    pub clip_fraction: f64,
    pub patch_size: usize,
    pub stride: usize,
    /// Patches starting in the last fraction of the frame width are held out.
    pub test_fraction: f64,
}

impl Default for PreprocessBlock {
    fn default() -> Self {
        Self { opening_radius: 32, clip_fraction: 0.001, patch_size: 32, stride: 16, test_fraction: 0.25 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnsembleMode {
    DeepEnsemble,
    McDropout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainBlock {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub ensemble_size: usize,
    pub mode: EnsembleMode,
    pub seed: Option<u64>,
}

impl Default for TrainBlock {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            learning_rate: d.learning_rate,
            beta1: d.beta1,
            beta2: d.beta2,
            epsilon: d.epsilon,
            batch_size: d.batch_size,
            epochs: d.epochs,
            dropout_rate: d.dropout_rate,
            ensemble_size: d.ensemble_size,
            mode: EnsembleMode::DeepEnsemble,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpsilonPolicy {
    BackgroundNoise,
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisBlock {
    pub epsilon_policy: EpsilonPolicy,
    /// Required for the explicit policy (normalized phase units).
    pub epsilon: Option<f64>,
    /// ε = multiplier · σ_background under the background-noise policy.
    pub epsilon_multiplier: f64,
    pub target_p: f64,
    pub delta_p: f64,
    pub min_count: usize,
    pub bound_tolerance: f64,
}

impl Default for AnalysisBlock {
    fn default() -> Self {
        Self {
            epsilon_policy: EpsilonPolicy::BackgroundNoise,
            epsilon: None,
            epsilon_multiplier: 3.0,
            target_p: 0.95,
            delta_p: 0.04,
            min_count: 100,
            bound_tolerance: 1e-6,
        }
    }
}

/// Run directories consumed by later stages; relative paths resolve
/// against the config file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsBlock {
    pub simulation: Option<PathBuf>,
    pub sfpm: Option<PathBuf>,
    pub preprocess: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub predict: Option<PathBuf>,
    pub analyze: Option<PathBuf>,
}

const PHANTOM_SEED_OFFSET: u64 = 0;
const NOISE_SEED_OFFSET: u64 = 1;
const TRAIN_SEED_OFFSET: u64 = 2;

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(single_line(&e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::MissingArtifact(format!("config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization, so formatting and comments
    /// in the source file do not matter.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    /// `--seed` replaces the master seed and every block seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.phantom.seed = None;
        self.noise.seed = None;
        self.train.seed = None;
    }

    pub fn phantom_seed(&self) -> u64 {
        self.phantom.seed.unwrap_or(self.seed.wrapping_add(PHANTOM_SEED_OFFSET))
    }

    pub fn noise_seed(&self) -> u64 {
        self.noise.seed.unwrap_or(self.seed.wrapping_add(NOISE_SEED_OFFSET))
    }

    pub fn train_seed(&self) -> u64 {
        self.train.seed.unwrap_or(self.seed.wrapping_add(TRAIN_SEED_OFFSET))
    }

    pub fn geometry(&self) -> Result<LedArrayGeometry, CliError> {
        let g = &self.geometry;
        Ok(LedArrayGeometry::new(g.rows, g.cols, g.pitch_led_mm, g.height_mm, g.wavelength_um)?)
    }

    pub fn na_max(&self) -> Result<f64, CliError> {
        Ok(self.optics.na_max.unwrap_or(self.geometry()?.max_na()))
    }

    pub fn detector_pitch(&self) -> f64 {
        self.optics.hires_pitch_um * (self.optics.hires_size / self.optics.detector_size) as f64
    }

    pub fn sfpm_config(&self) -> SfpmConfig {
        SfpmConfig {
            epochs: self.sfpm.epochs,
            step: self.sfpm.step,
            order: LedOrder::AscendingNa,
            init: match self.sfpm.init {
                InitKind::Flat => SfpmInit::Flat,
                InitKind::UpsampledBrightfield => SfpmInit::UpsampledBrightfield,
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            batch_size: t.batch_size,
            epochs: t.epochs,
            dropout_rate: t.dropout_rate,
            seed: self.train_seed(),
            ensemble_size: t.ensemble_size,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.geometry()?;
        let o = &self.optics;
        if !(o.na_obj > 0.0 && o.na_obj < 1.0) {
            return bad(format!("optics.na_obj {} must be in (0, 1)", o.na_obj));
        }
        if o.detector_size < 2 || !o.detector_size.is_multiple_of(2) || !o.hires_size.is_multiple_of(o.detector_size) {
            return bad("optics.detector_size must be even and divide optics.hires_size".into());
        }
        if !(o.hires_pitch_um > 0.0) {
            return bad("optics.hires_pitch_um must be > 0".into());
        }
        if let Some(m) = o.na_max {
            if !(m > o.na_obj) {
                return bad("optics.na_max must exceed optics.na_obj".into());
            }
        }
        let p = &self.phantom;
        if p.amplitude[0] > p.amplitude[1] || p.sigma_px[0] > p.sigma_px[1] || !(p.sigma_px[0] > 0.0) {
            return bad("phantom ranges must be ordered and positive".into());
        }
        if !(p.peak > 0.0) || !(0.0..1.0).contains(&p.background_level) {
            return bad("phantom.peak must be > 0 and background_level in [0, 1)".into());
        }
        if self.noise.kind != NoiseKind::None && !(self.noise.level > 0.0) {
            return bad("noise.level must be > 0".into());
        }
        self.sfpm_config().validate()?;
        if !(self.dpc.beta >= 0.0) {
            return bad("dpc.beta must be >= 0".into());
        }
        let pp = &self.preprocess;
        if pp.opening_radius == 0 || pp.stride == 0 || pp.patch_size < 2 || pp.patch_size > o.hires_size {
            return bad("preprocess: radius, stride >= 1 and 2 <= patch_size <= hires_size".into());
        }
        if !(0.0..0.5).contains(&pp.clip_fraction) || !(0.0..1.0).contains(&pp.test_fraction) {
            return bad("preprocess: clip_fraction in [0, 0.5), test_fraction in [0, 1)".into());
        }
        self.train_config().validate()?;
        if self.train.mode == EnsembleMode::McDropout && !(self.train.dropout_rate > 0.0) {
            return bad("train.dropout_rate must be > 0 in mc-dropout mode".into());
        }
        let a = &self.analysis;
        phaseuq::uqstats::bin_count(a.delta_p)?;
        if !(0.0..1.0).contains(&a.target_p) || !(a.bound_tolerance > 0.0) || !(a.epsilon_multiplier > 0.0) {
            return bad("analysis: target_p in [0, 1), bound_tolerance > 0, epsilon_multiplier > 0".into());
        }
        if a.epsilon_policy == EpsilonPolicy::Explicit && !a.epsilon.is_some_and(|e| e >= 0.0) {
            return bad("analysis.epsilon (>= 0) is required by the explicit policy".into());
        }
        Ok(())
    }

    /// Small built-in experiment used by `demo`.
    pub fn demo() -> Self {
        Self {
            seed: 7,
            geometry: GeometryBlock { rows: 11, cols: 11, pitch_led_mm: 3.0, height_mm: 80.0, wavelength_um: 0.5 },
            optics: OpticsBlock { na_obj: 0.1, na_max: None, hires_size: 64, detector_size: 16, hires_pitch_um: 0.46875 },
            phantom: PhantomBlock { count: 6, sigma_px: [2.0, 4.0], ..PhantomBlock::default() },
            noise: NoiseBlock { kind: NoiseKind::Poisson, level: 3e3, seed: None },
            sfpm: SfpmBlock { epochs: 30, ..SfpmBlock::default() },
            dpc: DpcBlock::default(),
            preprocess: PreprocessBlock { opening_radius: 16, patch_size: 16, stride: 8, ..PreprocessBlock::default() },
            train: TrainBlock {
                learning_rate: 2e-3,
                batch_size: 4,
                epochs: 300,
                dropout_rate: 0.0,
                ensemble_size: 4,
                ..TrainBlock::default()
            },
            analysis: AnalysisBlock::default(),
            paths: PathsBlock::default(),
        }
    }
}

/// Resolves a configured path against the config file's directory.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        normalize(p)
    } else {
        normalize(&base.join(p))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn single_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_config_roundtrips_and_validates() {
        let d = ExperimentConfig::demo();
        d.validate().unwrap();
        let back = ExperimentConfig::from_toml(&d.to_toml()).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.hash(), d.hash());
        assert_eq!(d.hash().len(), 64);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = ExperimentConfig::demo().to_toml();
        text.push_str("\n[extra]\nx = 1\n");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(CliError::Config(_))));
        let typo = ExperimentConfig::demo().to_toml().replace("na_obj", "na_objective");
        assert!(matches!(ExperimentConfig::from_toml(&typo), Err(CliError::Config(_))));
    }

    #[test]
    fn seeds_and_overrides() {
        let mut d = ExperimentConfig::demo();
        d.train.seed = Some(99);
        assert_eq!(d.train_seed(), 99);
        d.override_seed(3);
        assert_eq!((d.phantom_seed(), d.noise_seed(), d.train_seed()), (3, 4, 5));
    }

    #[test]
    fn numeric_constraints() {
        let mut d = ExperimentConfig::demo();
        d.analysis.delta_p = 0.03;
        assert!(d.validate().is_err());
        let mut d = ExperimentConfig::demo();
        d.optics.detector_size = 24;
        assert!(d.validate().is_err());
        let mut d = ExperimentConfig::demo();
        d.analysis.epsilon_policy = EpsilonPolicy::Explicit;
        assert!(d.validate().is_err());
        d.analysis.epsilon = Some(0.05);
        d.validate().unwrap();
    }
}
