//! Run configuration: one TOML document with a section per module, a master
//! seed, and a content hash recorded in every output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control_plane::ControlLoopConfig;
use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureMap};
use crate::fusion::FusionConfig;
use crate::key_selection::{SignatureEncoder, DEFAULT_BUCKET_EDGES, DEFAULT_SELECTION_CAP};
use crate::pipeline::{Preset, ResourceModel, RunMode};
use crate::quantization::{FixedPointFormat, OverflowPolicy};
use crate::symbolic::DEFAULT_S_MAX;
use crate::workload::{WorkloadSpec, DEFAULT_SPLIT};

/// Version of the artifact layout written next to every result.
pub const SCHEMA_VERSION: &str = "1.0";

fn q16_8() -> FixedPointFormat {
    FixedPointFormat::new(16, 8).expect("q16.8 is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureSection {
    pub kind: FeatureKind,
    pub m: usize,
    /// Clip bound `C` for the clipped kind.
    pub clip_bound: f64,
}

impl Default for FeatureSection {
    fn default() -> Self {
        Self {
            kind: FeatureKind::PositiveRandomFeatures,
            m: 16,
            clip_bound: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizationSection {
    pub format_s: FixedPointFormat,
    pub format_z: FixedPointFormat,
    pub policy: OverflowPolicy,
}

impl Default for QuantizationSection {
    fn default() -> Self {
        Self {
            format_s: q16_8(),
            format_z: q16_8(),
            policy: OverflowPolicy::Checked,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowSection {
    /// `L`, tokens kept in the local ring.
    pub capacity: usize,
    /// `N_t` cap on selected keys.
    pub cap: usize,
}

impl Default for WindowSection {
    fn default() -> Self {
        Self {
            capacity: 8,
            cap: DEFAULT_SELECTION_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlobalIndexSection {
    /// Centroid tokens built from training keys.
    pub k: usize,
    /// Coordinates below this magnitude bucket are wildcards in entry
    /// patterns.
    pub min_bucket: u8,
    pub bucket_edges: [f64; 7],
    /// Load a saved index instead of building one.
    pub path: Option<PathBuf>,
}

impl Default for GlobalIndexSection {
    fn default() -> Self {
        Self {
            k: 16,
            min_bucket: 2,
            bucket_edges: DEFAULT_BUCKET_EDGES,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RulesSection {
    /// Rule file; the built-in rule set when absent.
    pub path: Option<PathBuf>,
    /// Confidence a training example needs to ground rules.
    pub theta_high: f64,
    pub table_format: FixedPointFormat,
    pub drop_to_fit: bool,
    pub s_max: f64,
    pub fit_iters: usize,
    pub l2: f64,
}

impl Default for RulesSection {
    fn default() -> Self {
        Self {
            path: None,
            theta_high: 0.9,
            table_format: q16_8(),
            drop_to_fit: false,
            s_max: DEFAULT_S_MAX,
            fit_iters: 200,
            l2: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub preset: Preset,
    pub mode: RunMode,
    pub jobs: usize,
    /// Trace CSV; a generated workload when absent.
    pub trace: Option<PathBuf>,
    pub split: [f64; 3],
    /// Feature and value norms are clipped to these radii before use.
    pub r: f64,
    pub r_v: f64,
    /// Fit `alpha`, `beta` on validation instead of using the fusion section.
    pub fit_fusion: bool,
    pub bootstrap_resamples: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            preset: Preset::Cascade,
            mode: RunMode::Analysis,
            jobs: 1,
            trace: None,
            split: DEFAULT_SPLIT,
            r: 3.0,
            r_v: 2.0,
            fit_fusion: true,
            bootstrap_resamples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheorySection {
    pub kernel_c: f64,
    pub kernel_eps: f64,
    pub kernel_delta: f64,
    pub kernel_pairs: usize,
    pub kernel_reps: usize,
    pub kernel_d: usize,
    /// Pairs are drawn inside a ball of this radius.
    pub kernel_radius: f64,
    pub spectral_instances: usize,
    pub spectral_t_max: usize,
    pub spectral_d_max: usize,
    pub spectral_m: usize,
    pub quant_runs: usize,
    pub quant_format: FixedPointFormat,
    pub quant_m: usize,
    pub quant_d_v: usize,
    pub quant_t: u64,
    pub coverage_instances: usize,
    pub coverage_t: usize,
    pub coverage_d: usize,
    pub coverage_alpha_max: f64,
    pub coverage_tol: f64,
    pub coverage_pass_rate: f64,
    pub ema_p: f64,
    pub ema_eta: f64,
    pub ema_steps: u64,
    pub ema_centroids: usize,
}

impl Default for TheorySection {
    fn default() -> Self {
        Self {
            kernel_c: 1.0,
            kernel_eps: 0.1,
            kernel_delta: 0.05,
            kernel_pairs: 200,
            kernel_reps: 20,
            kernel_d: 4,
            kernel_radius: 0.1,
            spectral_instances: 50,
            spectral_t_max: 16,
            spectral_d_max: 4,
            spectral_m: 64,
            quant_runs: 100,
            quant_format: FixedPointFormat::new(16, 10).expect("q16.10 is valid"),
            quant_m: 8,
            quant_d_v: 2,
            quant_t: 64,
            coverage_instances: 200,
            coverage_t: 32,
            coverage_d: 4,
            coverage_alpha_max: 0.2,
            coverage_tol: 1e-9,
            coverage_pass_rate: 0.95,
            ema_p: 0.3,
            ema_eta: 0.1,
            ema_steps: 10_000,
            ema_centroids: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed. Workload, feature map, clustering and splits derive
    /// their seeds from it.
    pub seed: u64,
    pub features: FeatureSection,
    pub quantization: QuantizationSection,
    pub window: WindowSection,
    pub global_index: GlobalIndexSection,
    pub rules: RulesSection,
    pub fusion: FusionConfig,
    pub resources: ResourceModel,
    pub cadence: ControlLoopConfig,
    pub workload: WorkloadSpec,
    pub simulate: SimulateSection,
    pub theory: TheorySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 7,
            features: FeatureSection::default(),
            quantization: QuantizationSection::default(),
            window: WindowSection::default(),
            global_index: GlobalIndexSection::default(),
            rules: RulesSection::default(),
            fusion: FusionConfig::default(),
            resources: ResourceModel::default(),
            cadence: ControlLoopConfig::default(),
            workload: WorkloadSpec::default(),
            simulate: SimulateSection::default(),
            theory: TheorySection::default(),
        };
        c.propagate_seed();
        c
    }
}

/// Offsets that keep derived seeds apart.
const FEATURE_SEED: u64 = 0x6665_6174;
const SPLIT_SEED: u64 = 0x7370_6c74;
const CLUSTER_SEED: u64 = 0x636c_7573;
const BOOTSTRAP_SEED: u64 = 0x626f_6f74;
const THEORY_SEED: u64 = 0x7468_6579;

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.propagate_seed();
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Apply `section.key = value` overrides, one `key=value` string each.
    /// Values are read as TOML and fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc: toml::Table = toml::from_str(&self.to_toml()).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let (key, raw) = (key.trim(), raw.trim());
            let value = toml::from_str::<toml::Table>(&format!("x = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("x"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let mut path: Vec<&str> = key.split('.').collect();
            let leaf = path
                .pop()
                .filter(|k| !k.is_empty())
                .ok_or_else(|| Error::Config(format!("empty key in `{o}`")))?;
            let mut table = &mut doc;
            for part in path {
                table = table
                    .entry(part)
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a section")))?;
            }
            table.insert(leaf.to_string(), value);
        }
        let text = toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.propagate_seed();
    }

    fn propagate_seed(&mut self) {
        self.workload.seed = self.seed;
        self.cadence.seed = self.seed;
    }

    pub fn feature_seed(&self) -> u64 {
        self.seed ^ FEATURE_SEED
    }

    pub fn split_seed(&self) -> u64 {
        self.seed ^ SPLIT_SEED
    }

    pub fn cluster_seed(&self) -> u64 {
        self.seed ^ CLUSTER_SEED
    }

    pub fn bootstrap_seed(&self) -> u64 {
        self.seed ^ BOOTSTRAP_SEED
    }

    pub fn theory_seed(&self) -> u64 {
        self.seed ^ THEORY_SEED
    }

    /// Seed of the flow-key hash.
    pub fn hash_seed(&self) -> u64 {
        self.seed
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        self.resources.validate()?;
        self.cadence.validate()?;
        self.workload.validate()?;
        if self.features.m == 0 {
            return Err(Error::Config("features.m must be positive".into()));
        }
        if self.quantization.format_s.total_bits() < self.quantization.format_z.total_bits() {
            return Err(Error::Config(
                "quantization.format_s must be at least as wide as format_z".into(),
            ));
        }
        if self.simulate.jobs == 0 {
            return Err(Error::Config("simulate.jobs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.rules.theta_high) {
            return Err(Error::Config("rules.theta_high must lie in [0, 1]".into()));
        }
        if !(self.simulate.r > 0.0 && self.simulate.r_v > 0.0) {
            return Err(Error::Config("simulate.r and simulate.r_v must be positive".into()));
        }
        SignatureEncoder::new(self.global_index.bucket_edges)?;
        Ok(())
    }

    pub fn feature_map(&self, d: usize) -> Result<FeatureMap> {
        let m = if self.features.kind == FeatureKind::Identity {
            d
        } else {
            self.features.m
        };
        FeatureMap::new(self.features.kind, m, d, self.feature_seed(), self.features.clip_bound)
    }

    pub fn encoder(&self) -> Result<SignatureEncoder> {
        SignatureEncoder::new(self.global_index.bucket_edges)
    }

    /// Canonical JSON of the resolved config.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON, hex.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}
