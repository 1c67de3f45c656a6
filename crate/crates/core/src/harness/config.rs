//! Experiment configuration, read from and written to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::network::{Activation, NetworkShape, TeacherConfig};
use crate::optim::OptimizerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    SynthTheorem,
    SynthSweep,
    Mnist,
    CertifyLemma1,
    CertifyLemma2,
    CertifyGeometry,
}

impl ExperimentKind {
    pub fn dir_name(self) -> &'static str {
        match self {
            ExperimentKind::SynthTheorem => "synth-theorem",
            ExperimentKind::SynthSweep => "synth-sweep",
            ExperimentKind::Mnist => "mnist",
            ExperimentKind::CertifyLemma1 => "certify-lemma1",
            ExperimentKind::CertifyLemma2 => "certify-lemma2",
            ExperimentKind::CertifyGeometry => "certify-geometry",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TraceFormat {
    #[default]
    Csv,
    Jsonl,
}

impl TraceFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TraceFormat::Csv => "csv",
            TraceFormat::Jsonl => "jsonl",
        }
    }
}

/// Settings of the depth sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub depths: Vec<usize>,
    /// Width of every hidden and output layer.
    pub width: usize,
    /// Input dimension.
    pub input_dim: usize,
    /// Condition number of `W_1★`, hence of `Y★`.
    pub kappa: f64,
    /// Target `dist²(t) ≤ epsilon · dist²(0)`.
    pub epsilon: f64,
    /// Depth at which the κ-doubling pair is run (skipped when `None`).
    pub kappa_pair_depth: Option<usize>,
    /// Allowed spread of the normalized iteration ratio.
    pub band: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            depths: vec![2, 3, 4, 5, 6],
            width: 4,
            input_dim: 6,
            kappa: 2.0,
            epsilon: 1e-8,
            kappa_pair_depth: Some(3),
            band: 4.0,
        }
    }
}

/// Settings of the classification comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MnistConfig {
    pub depths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub mu_grid: Vec<f64>,
    pub gamma_grid: Vec<f64>,
    pub iters: usize,
    /// Number of training samples used (the first `subset` of the file).
    pub subset: usize,
    pub zca: bool,
    pub zca_eps: f64,
    /// Train on a synthetic set of the same shape when no files are given.
    pub synthetic_fallback: bool,
    /// Threshold = factor × the larger best final loss of a compared pair.
    pub threshold_factor: f64,
}

impl Default for MnistConfig {
    fn default() -> Self {
        MnistConfig {
            depths: vec![3, 4],
            activations: vec![Activation::Linear, Activation::Relu],
            mu_grid: vec![1e-3, 3e-3, 1e-2, 3e-2, 1e-1],
            gamma_grid: vec![1.0, 10.0, 100.0],
            iters: 200,
            subset: 10_000,
            zca: false,
            zca_eps: 1e-2,
            synthetic_fallback: true,
            threshold_factor: 1.5,
        }
    }
}

/// Settings of the sampling certification suites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CertifyConfig {
    pub depths: Vec<usize>,
    /// Largest width drawn for a sampled network.
    pub max_dim: usize,
    /// Samples per depth (lemma suites) or in total (geometry).
    pub samples: usize,
    /// Sample count for the gradient-scale RCG probe.
    pub n_points: usize,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        CertifyConfig {
            depths: vec![2, 3, 4],
            max_dim: 8,
            samples: 100,
            n_points: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Layer widths `d_0..d_N` for the single-shape experiments.
    pub dims: Vec<usize>,
    pub n_samples: usize,
    pub seeds: Vec<u64>,
    pub loss: LossKind,
    pub activation: Activation,
    pub optimizer: OptimizerConfig,
    pub teacher: TeacherConfig,
    pub out_dir: PathBuf,
    pub format: TraceFormat,
    /// Parallel cells; 0 uses every available core.
    pub workers: usize,
    pub mnist_images: Option<PathBuf>,
    pub mnist_labels: Option<PathBuf>,
    pub sweep: SweepConfig,
    pub mnist: MnistConfig,
    pub certify: CertifyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: ExperimentKind::SynthTheorem,
            dims: vec![6, 8, 8, 10],
            n_samples: 12,
            seeds: (1..=20).collect(),
            loss: LossKind::ScaledMse,
            activation: Activation::Linear,
            optimizer: OptimizerConfig::default(),
            teacher: TeacherConfig::default(),
            out_dir: PathBuf::from("out"),
            format: TraceFormat::Csv,
            workers: 0,
            mnist_images: None,
            mnist_labels: None,
            sweep: SweepConfig::default(),
            mnist: MnistConfig::default(),
            certify: CertifyConfig::default(),
        }
    }
}

/// `[784, 100, 100, …, 50, 10]` for `depth ≥ 3` layers.
pub fn mnist_dims(depth: usize) -> Result<Vec<usize>> {
    if depth < 3 {
        return Err(Error::Config(format!(
            "the classification architecture needs at least 3 layers, got {depth}"
        )));
    }
    let mut dims = vec![784];
    dims.extend(std::iter::repeat_n(100, depth - 2));
    dims.extend([50, 10]);
    Ok(dims)
}

pub fn mnist_shape(depth: usize, activation: Activation) -> Result<NetworkShape> {
    NetworkShape::auto(mnist_dims(depth)?, activation)
}

impl ExperimentConfig {
    pub fn for_kind(kind: ExperimentKind) -> Self {
        let mut cfg = ExperimentConfig {
            kind,
            ..Self::default()
        };
        match kind {
            ExperimentKind::SynthSweep => cfg.seeds = vec![1, 2, 3],
            ExperimentKind::Mnist => {
                cfg.loss = LossKind::SoftmaxCe;
                cfg.seeds = vec![1];
            }
            ExperimentKind::CertifyLemma1 => cfg.seeds = vec![1],
            ExperimentKind::CertifyLemma2 => {
                cfg.seeds = vec![1];
                cfg.certify.depths = vec![2, 3];
                cfg.certify.samples = 50;
            }
            ExperimentKind::CertifyGeometry => {
                cfg.seeds = vec![1];
                cfg.certify.max_dim = 10;
                cfg.certify.samples = 1000;
            }
            ExperimentKind::SynthTheorem => cfg.optimizer.max_iters = 20_000,
        }
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        self.optimizer.validate()?;
        match self.kind {
            ExperimentKind::SynthTheorem => {
                NetworkShape::columns(self.dims.clone(), self.activation)?;
                if self.n_samples == 0 {
                    return Err(Error::Config("n_samples must be positive".into()));
                }
            }
            ExperimentKind::SynthSweep => {
                let s = &self.sweep;
                if s.depths.is_empty() || s.depths.contains(&0) || s.depths.contains(&1) {
                    return Err(Error::Config(format!("sweep depths must be >= 2, got {:?}", s.depths)));
                }
                if s.width == 0 || s.input_dim < s.width {
                    return Err(Error::Config("sweep needs 0 < width <= input_dim".into()));
                }
                if !(s.epsilon > 0.0 && s.epsilon < 1.0) || !(s.kappa >= 1.0) || !(s.band >= 1.0) {
                    return Err(Error::Config("sweep needs 0 < epsilon < 1, kappa >= 1, band >= 1".into()));
                }
            }
            ExperimentKind::Mnist => {
                let m = &self.mnist;
                for &n in &m.depths {
                    mnist_dims(n)?;
                }
                if m.depths.is_empty() || m.activations.is_empty() || m.mu_grid.is_empty() || m.gamma_grid.is_empty() {
                    return Err(Error::Config("mnist grids must be nonempty".into()));
                }
                if m.subset == 0 || m.iters == 0 {
                    return Err(Error::Config("mnist subset and iters must be positive".into()));
                }
                if m.mu_grid.iter().chain(&m.gamma_grid).any(|&v| !(v > 0.0)) {
                    return Err(Error::Config("mnist grid values must be positive".into()));
                }
                if !(m.threshold_factor >= 1.0) {
                    return Err(Error::Config("threshold_factor must be >= 1".into()));
                }
                if self.loss != LossKind::SoftmaxCe {
                    return Err(Error::Config("mnist experiments train with softmax-ce".into()));
                }
            }
            ExperimentKind::CertifyLemma1 | ExperimentKind::CertifyLemma2 | ExperimentKind::CertifyGeometry => {
                let c = &self.certify;
                if c.max_dim < 2 || c.samples == 0 {
                    return Err(Error::Config("certify needs max_dim >= 2 and samples > 0".into()));
                }
                if self.kind != ExperimentKind::CertifyGeometry && c.depths.iter().any(|&n| n < 2) {
                    return Err(Error::Config("certify depths must be >= 2".into()));
                }
            }
        }
        Ok(())
    }

    pub fn kind_dir(&self) -> PathBuf {
        self.out_dir.join(self.kind.dir_name())
    }
}
