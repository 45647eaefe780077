//! Run configuration: TOML with optional sections, unknown keys rejected.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use lipgate::datagen::{CtProtocol, Task};
use lipgate::models::{Activation, ArchKind, ArchSpec, TrainConfig};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: String,
    pub seed: u64,
    pub arch: ArchSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub uncertainty: UncertaintySection,
    pub paths: PathsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSection {
    /// Defaults to the task's network (automap or unet-residual).
    pub kind: Option<String>,
    pub fc1_width: Option<usize>,
    pub conv_filters: usize,
    pub conv_kernel: usize,
    pub out_kernel: Option<usize>,
    pub dropout_p: f64,
    pub input_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: Option<f64>,
    pub rms_decay: f64,
    pub momentum: f64,
    pub batch_size: Option<usize>,
    pub epochs: usize,
    /// Epochs per ensemble member; defaults to `epochs`.
    pub ensemble_epochs: Option<usize>,
    pub l2_lambda: f64,
    pub l1_gamma: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n: usize,
    pub train_count: usize,
    pub id_test_count: usize,
    pub ood_test_count: usize,
    pub base_seed: u64,
    pub augment: bool,
    /// Defaults to the task's training noise.
    pub noise_fraction: Option<f64>,
    pub ct_views: usize,
    pub ct_factor: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintySection {
    pub noise_fraction: f64,
    pub k: usize,
    pub iterations: usize,
    pub ensemble_size: usize,
    pub pairwise_lo: f64,
    pub pairwise_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: "automap".into(),
            seed: 0,
            arch: ArchSection::default(),
            train: TrainSection::default(),
            data: DataSection::default(),
            uncertainty: UncertaintySection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl Default for ArchSection {
    fn default() -> Self {
        Self {
            kind: None,
            fc1_width: None,
            conv_filters: 16,
            conv_kernel: 5,
            out_kernel: None,
            dropout_p: 0.0,
            input_scale: None,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::automap();
        Self {
            learning_rate: None,
            rms_decay: t.rms_decay,
            momentum: t.momentum,
            batch_size: None,
            epochs: t.epochs,
            ensemble_epochs: None,
            l2_lambda: t.l2_lambda,
            l1_gamma: t.l1_gamma,
            epsilon: t.epsilon,
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        let ct = CtProtocol::default();
        Self {
            n: 32,
            train_count: 2000,
            id_test_count: 500,
            ood_test_count: 500,
            base_seed: 0,
            augment: true,
            noise_fraction: None,
            ct_views: ct.full_views,
            ct_factor: ct.factor,
        }
    }
}

impl Default for UncertaintySection {
    fn default() -> Self {
        Self {
            noise_fraction: lipgate::uncertainty::DEFAULT_NOISE_FRACTION,
            k: lipgate::uncertainty::DEFAULT_VARIANCE_DRAWS,
            iterations: lipgate::uncertainty::DEFAULT_MC_ITERATIONS,
            ensemble_size: lipgate::uncertainty::DEFAULT_ENSEMBLE_SIZE,
            pairwise_lo: 0.10,
            pairwise_hi: 0.15,
        }
    }
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("run") }
    }
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn task(&self) -> Result<Task> {
        Task::parse(&self.task).ok_or_else(|| bad(format!("unknown task `{}`", self.task)))
    }

    pub fn arch_kind(&self) -> Result<ArchKind> {
        match &self.arch.kind {
            Some(k) => ArchKind::parse(k).ok_or_else(|| bad(format!("unknown arch kind `{k}`"))),
            None => Ok(match self.task()? {
                Task::Automap => ArchKind::Automap,
                Task::Denoise | Task::Ct => ArchKind::UnetResidual,
            }),
        }
    }

    /// Architecture for `kind`, with the section's overrides applied.
    pub fn arch_spec_for(&self, kind: ArchKind) -> Result<ArchSpec> {
        let n = self.data.n;
        let a = &self.arch;
        let mut spec = match kind {
            ArchKind::Automap => ArchSpec::automap(n),
            ArchKind::AutomapDropout => ArchSpec::automap_dropout(n, a.dropout_p),
            ArchKind::UnetResidual => ArchSpec::unet(n),
        };
        spec.conv_filters = a.conv_filters;
        spec.conv_kernel = a.conv_kernel;
        if let Some(w) = a.fc1_width {
            spec.fc1_width = w;
        }
        if let Some(k) = a.out_kernel {
            spec.out_kernel = k;
        }
        if let Some(s) = a.input_scale {
            spec.input_scale = s;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn arch_spec(&self) -> Result<ArchSpec> {
        self.arch_spec_for(self.arch_kind()?)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let base = TrainConfig::for_arch(self.arch_kind()?);
        let t = &self.train;
        let cfg = TrainConfig {
            learning_rate: t.learning_rate.unwrap_or(base.learning_rate),
            rms_decay: t.rms_decay,
            momentum: t.momentum,
            batch_size: t.batch_size.unwrap_or(base.batch_size),
            epochs: t.epochs,
            l2_lambda: t.l2_lambda,
            l1_gamma: t.l1_gamma,
            epsilon: t.epsilon,
            seed: lipgate::seed::derive(self.seed, 0x7452_4149),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn ct_protocol(&self) -> CtProtocol {
        CtProtocol {
            full_views: self.data.ct_views,
            factor: self.data.ct_factor,
            noise_frac: self.train_noise().unwrap_or(0.10),
        }
    }

    pub fn train_noise(&self) -> Result<f64> {
        Ok(self.data.noise_fraction.unwrap_or(self.task()?.default_noise()))
    }

    /// Checks every field that later stages read.
    pub fn validate(&self) -> Result<()> {
        let task = self.task()?;
        self.arch_spec()?;
        self.train_config()?;
        let d = &self.data;
        if d.train_count == 0 || d.id_test_count == 0 || d.ood_test_count == 0 {
            return Err(bad("dataset counts must be positive"));
        }
        let noise = self.train_noise()?;
        if !(0.0..1.0).contains(&noise) {
            return Err(bad(format!("data.noise_fraction {noise} outside [0, 1)")));
        }
        if task == Task::Ct && (d.ct_factor == 0 || d.ct_views == 0 || d.ct_views % d.ct_factor != 0) {
            return Err(bad(format!("ct_factor {} must divide ct_views {}", d.ct_factor, d.ct_views)));
        }
        let u = &self.uncertainty;
        if !(u.noise_fraction > 0.0 && u.noise_fraction.is_finite()) {
            return Err(bad("uncertainty.noise_fraction must be positive"));
        }
        if u.k < 2 || u.iterations < 2 || u.ensemble_size < 2 {
            return Err(bad("k, iterations and ensemble_size must be at least 2"));
        }
        if !(u.pairwise_lo >= 0.0 && u.pairwise_hi > u.pairwise_lo) {
            return Err(bad("need 0 <= pairwise_lo < pairwise_hi"));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
            self.data.base_seed = s;
        }
        self
    }
}

/// Architecture description stored inside checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredArch {
    pub kind: String,
    pub n: usize,
    pub fc1_width: usize,
    pub conv_filters: usize,
    pub conv_kernel: usize,
    pub out_kernel: usize,
    pub dropout_p: f64,
    pub input_scale: f64,
    pub activations: Vec<String>,
    pub model_seed: u64,
}

impl StoredArch {
    pub fn new(spec: &ArchSpec, model_seed: u64) -> Self {
        Self {
            kind: spec.kind.name().into(),
            n: spec.n,
            fc1_width: spec.fc1_width,
            conv_filters: spec.conv_filters,
            conv_kernel: spec.conv_kernel,
            out_kernel: spec.out_kernel,
            dropout_p: spec.dropout_p,
            input_scale: spec.input_scale,
            activations: spec.activations.iter().map(|a| a.name().to_string()).collect(),
            model_seed,
        }
    }

    pub fn spec(&self) -> Result<ArchSpec> {
        let kind = ArchKind::parse(&self.kind).ok_or_else(|| CliError::Format(format!("unknown arch `{}`", self.kind)))?;
        let activations = self
            .activations
            .iter()
            .map(|a| Activation::parse(a).ok_or_else(|| CliError::Format(format!("unknown activation `{a}`"))))
            .collect::<Result<Vec<_>>>()?;
        let spec = ArchSpec {
            kind,
            n: self.n,
            fc1_width: self.fc1_width,
            conv_filters: self.conv_filters,
            conv_kernel: self.conv_kernel,
            out_kernel: self.out_kernel,
            dropout_p: self.dropout_p,
            input_scale: self.input_scale,
            activations,
        };
        spec.validate()?;
        Ok(spec)
    }
}
