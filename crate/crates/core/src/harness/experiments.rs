//! Teacher–student contraction runs, the depth sweep and the classification
//! comparison. Each pipeline persists its traces plus a manifest, then builds
//! its report from those files only (see [`super::report`]).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{mnist_shape, ExperimentConfig, ExperimentKind, TraceFormat};
use super::mnist::{self, MnistDataset};
use super::report::{self, MnistReport, SweepReport, TheoremReport};
use super::{par_map, sub_seed, traces, write_json};
use crate::error::{Error, Result};
use crate::losses::{LossKind, LossModel};
use crate::matcore;
use crate::metrics;
use crate::network::{self, Activation, InitScheme, NetworkShape, Odlnn, TeacherConfig, TeacherInstance};
use crate::optim::{self, Algorithm, OptimizerConfig, RunTrace, Target};

/// Bisection steps allowed when calibrating the initial perturbation.
pub const CALIBRATION_STEPS: usize = 50;
/// `dist²` reduction the contraction run has to reach.
pub const TARGET_REDUCTION: f64 = 1e-12;

/// A near-teacher student whose measured `dist²` is within the basin.
#[derive(Debug, Clone)]
pub struct Calibrated {
    pub student: Odlnn,
    pub magnitude: f64,
    pub dist_sq: f64,
}

/// Largest perturbation magnitude (found by bisection) whose student lies
/// within `radius` of the teacher. The perturbation direction is fixed by
/// `seed`, so only the magnitude varies.
pub fn calibrate(instance: &TeacherInstance, radius: f64, seed: u64) -> Result<Calibrated> {
    if !(radius > 0.0) {
        return Err(Error::Calibration(format!("basin radius must be positive, got {radius}")));
    }
    let shape = instance.teacher.shape();
    let eval = |m: f64| -> Result<(Odlnn, f64)> {
        let s = network::init_student(
            shape,
            InitScheme::NearTeacher {
                teacher: &instance.teacher,
                magnitude: m,
            },
            seed,
        )?;
        let d = metrics::dist_sq(&s, instance)?.dist_sq;
        Ok((s, d))
    };
    let mut hi = radius.sqrt();
    let mut best: Option<Calibrated> = None;
    let mut lo = 0.0;
    for _ in 0..CALIBRATION_STEPS {
        let (s, d) = eval(hi)?;
        if d > radius {
            break;
        }
        best = Some(Calibrated {
            student: s,
            magnitude: hi,
            dist_sq: d,
        });
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..CALIBRATION_STEPS {
        let mid = 0.5 * (lo + hi);
        let (s, d) = eval(mid)?;
        if d <= radius {
            lo = mid;
            best = Some(Calibrated {
                student: s,
                magnitude: mid,
                dist_sq: d,
            });
        } else {
            hi = mid;
        }
    }
    best.filter(|c| c.magnitude > 0.0).ok_or_else(|| {
        Error::Calibration(format!(
            "no positive magnitude within dist² <= {radius:e} after {CALIBRATION_STEPS} bisection steps"
        ))
    })
}

/// `⌈log(reduction) / log(rate)⌉`, or `usize::MAX` when the rate is not a
/// contraction.
pub fn horizon(rate: f64, reduction: f64) -> usize {
    if !(rate > 0.0 && rate < 1.0) {
        return usize::MAX;
    }
    (reduction.ln() / rate.ln()).ceil() as usize
}

fn trace_name(stem: &str, format: TraceFormat) -> String {
    format!("{stem}.{}", format.extension())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremCell {
    pub seed: u64,
    pub dims: Vec<usize>,
    pub theorem_rate: f64,
    pub basin_radius: f64,
    pub magnitude: f64,
    pub horizon: usize,
    /// Iterations actually allowed (the horizon, capped by `max_iters`).
    pub iter_cap: usize,
    pub trace: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremManifest {
    pub cells: Vec<TheoremCell>,
}

fn theorem_seed(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<TheoremCell> {
    let shape = NetworkShape::columns(cfg.dims.clone(), cfg.activation)?;
    let inst = network::make_teacher_with(&shape, cfg.n_samples.max(cfg.dims[0]), &cfg.teacher, seed)?;
    let model = LossModel::for_kind(cfg.loss);
    let radius = metrics::basin_radius(&inst, &model)?;
    let cal = calibrate(&inst, radius, sub_seed(seed, 1))?;
    let base = OptimizerConfig::theorem(&inst, &model)?;
    let rate = optim::theorem_rate(&inst, &model, &base)?;
    let h = horizon(rate, TARGET_REDUCTION);
    let opt = OptimizerConfig {
        max_iters: h.min(cfg.optimizer.max_iters),
        stop_tol: TARGET_REDUCTION,
        re_retract_every: cfg.optimizer.re_retract_every,
        record_wall_time: cfg.optimizer.record_wall_time,
        ..base
    };
    let trace = optim::run(&cal.student, &inst, &model, &opt)?;
    let name = trace_name(&format!("seed-{seed}"), cfg.format);
    traces::emit_traces(&trace, cfg.format, &dir.join(&name))?;
    Ok(TheoremCell {
        seed,
        dims: cfg.dims.clone(),
        theorem_rate: rate,
        basin_radius: radius,
        magnitude: cal.magnitude,
        horizon: h,
        iter_cap: opt.max_iters,
        trace: name,
    })
}

pub fn run_synth_theorem(cfg: &ExperimentConfig) -> Result<TheoremReport> {
    expect_kind(cfg, ExperimentKind::SynthTheorem)?;
    let dir = prepare_dir(cfg)?;
    let cells = par_map(cfg.workers, cfg.seeds.clone(), |seed| theorem_seed(cfg, seed, &dir))?
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    write_json(&dir.join(report::MANIFEST), &TheoremManifest { cells })?;
    let rep = report::theorem_report(&dir)?;
    write_json(&dir.join(report::REPORT), &rep)?;
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub depth: usize,
    pub kappa: f64,
    pub seed: u64,
    pub dims: Vec<usize>,
    pub epsilon: f64,
    /// Set when the run failed; the partial trace is still persisted.
    pub error: Option<String>,
    pub trace: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub epsilon: f64,
    pub kappa: f64,
    pub band: f64,
    pub pair_depth: Option<usize>,
    pub cells: Vec<SweepCell>,
}

fn sweep_cell(cfg: &ExperimentConfig, depth: usize, kappa: f64, seed: u64, dir: &Path) -> Result<SweepCell> {
    let s = &cfg.sweep;
    let mut dims = vec![s.input_dim];
    dims.extend(std::iter::repeat_n(s.width, depth));
    let shape = NetworkShape::columns(dims.clone(), Activation::Linear)?;
    let teacher_cfg = TeacherConfig {
        kappa: Some(kappa),
        ..cfg.teacher
    };
    let inst = network::make_teacher_with(&shape, cfg.n_samples.max(s.input_dim), &teacher_cfg, seed)?;
    let model = LossModel::scaled_mse();
    let radius = metrics::basin_radius(&inst, &model)?;
    let cal = calibrate(&inst, radius, sub_seed(seed, 1))?;
    let opt = OptimizerConfig {
        max_iters: cfg.optimizer.max_iters,
        stop_tol: s.epsilon,
        re_retract_every: cfg.optimizer.re_retract_every,
        record_wall_time: cfg.optimizer.record_wall_time,
        ..OptimizerConfig::theorem(&inst, &model)?
    };
    let name = trace_name(&format!("N{depth}-kappa{kappa}-seed{seed}"), cfg.format);
    let (trace, error) = match optim::run(&cal.student, &inst, &model, &opt) {
        Ok(t) => (t, None),
        Err(Error::Divergence { iter, detail, partial }) => (*partial, Some(format!("diverged at {iter}: {detail}"))),
        Err(e) => (RunTrace::default(), Some(e.to_string())),
    };
    traces::emit_traces(&trace, cfg.format, &dir.join(&name))?;
    Ok(SweepCell {
        depth,
        kappa,
        seed,
        dims,
        epsilon: s.epsilon,
        error,
        trace: name,
    })
}

pub fn run_synth_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    expect_kind(cfg, ExperimentKind::SynthSweep)?;
    let dir = prepare_dir(cfg)?;
    let s = &cfg.sweep;
    let mut jobs = Vec::new();
    for &n in &s.depths {
        for &seed in &cfg.seeds {
            jobs.push((n, s.kappa, seed));
        }
    }
    if let Some(n) = s.kappa_pair_depth {
        for &seed in &cfg.seeds {
            if !s.depths.contains(&n) {
                jobs.push((n, s.kappa, seed));
            }
            jobs.push((n, 2.0 * s.kappa, seed));
        }
    }
    let cells = par_map(cfg.workers, jobs, |(n, k, seed)| sweep_cell(cfg, n, k, seed, &dir))?
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let manifest = SweepManifest {
        epsilon: s.epsilon,
        kappa: s.kappa,
        band: s.band,
        pair_depth: s.kappa_pair_depth,
        cells,
    };
    write_json(&dir.join(report::MANIFEST), &manifest)?;
    let rep = report::sweep_report(&dir)?;
    write_json(&dir.join(report::REPORT), &rep)?;
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MnistCell {
    pub algorithm: Algorithm,
    pub activation: Activation,
    pub depth: usize,
    pub mu: f64,
    /// `None` for GD, which uses `mu` on every layer.
    pub gamma: Option<f64>,
    pub diverged: bool,
    pub trace: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MnistManifest {
    pub source: String,
    pub samples: usize,
    pub threshold_factor: f64,
    pub cells: Vec<MnistCell>,
}

/// The configured dataset, or the synthetic stand-in when allowed.
pub fn mnist_data(cfg: &ExperimentConfig) -> Result<(MnistDataset, String)> {
    let m = &cfg.mnist;
    let (data, source) = match (&cfg.mnist_images, &cfg.mnist_labels) {
        (Some(i), Some(l)) => (mnist::load_mnist_idx(i, l)?.subset(m.subset), format!("idx:{}", i.display())),
        (None, None) if m.synthetic_fallback => (
            mnist::synthetic_classification(m.subset, sub_seed(cfg.seeds[0], 7)),
            "synthetic".to_string(),
        ),
        _ => {
            return Err(Error::Config(
                "MNIST data missing: pass both --mnist-images and --mnist-labels (IDX files, e.g. \
                 train-images-idx3-ubyte and train-labels-idx1-ubyte); nothing is downloaded"
                    .into(),
            ))
        }
    };
    let data = if m.zca {
        MnistDataset {
            images: matcore::zca_whiten(&data.images, m.zca_eps)?,
            labels: data.labels,
        }
    } else {
        data
    };
    Ok((data, source))
}

pub fn run_mnist(cfg: &ExperimentConfig) -> Result<MnistReport> {
    expect_kind(cfg, ExperimentKind::Mnist)?;
    if cfg.loss != LossKind::SoftmaxCe {
        return Err(Error::Config("mnist experiments train with softmax-ce".into()));
    }
    let (data, source) = mnist_data(cfg)?;
    let dir = prepare_dir(cfg)?;
    let m = &cfg.mnist;
    let seed = cfg.seeds[0];
    let mut jobs = Vec::new();
    for &depth in &m.depths {
        for &act in &m.activations {
            for &mu in &m.mu_grid {
                jobs.push((Algorithm::Gd, act, depth, mu, None));
                for &g in &m.gamma_grid {
                    jobs.push((Algorithm::Rgd, act, depth, mu, Some(g)));
                }
            }
        }
    }
    let model = LossModel::softmax_ce();
    let cells = par_map(cfg.workers, jobs, |(alg, act, depth, mu, gamma)| -> Result<MnistCell> {
        let shape = mnist_shape(depth, act)?;
        let scheme = match alg {
            Algorithm::Gd => InitScheme::Orthogonal,
            Algorithm::Rgd => InitScheme::UniformFanIn,
        };
        let net = network::init_student(&shape, scheme, sub_seed(seed, depth as u64))?;
        let opt = OptimizerConfig {
            mu,
            gamma: gamma.unwrap_or(1.0),
            max_iters: m.iters,
            stop_tol: 0.0,
            algorithm: alg,
            gd_use_gamma: false,
            theorem_mode: false,
            ..cfg.optimizer.clone()
        };
        let (trace, diverged) = match optim::run(&net, Target::data(&data.images, &data.labels), &model, &opt) {
            Ok(t) => (t, false),
            Err(Error::Divergence { partial, .. }) => (*partial, true),
            Err(e) => return Err(e),
        };
        let alg_name = match alg {
            Algorithm::Gd => "gd",
            Algorithm::Rgd => "rgd",
        };
        let act_name = match act {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
        };
        let stem = match gamma {
            Some(g) => format!("{alg_name}-{act_name}-N{depth}-mu{mu}-gamma{g}"),
            None => format!("{alg_name}-{act_name}-N{depth}-mu{mu}"),
        };
        let name = trace_name(&stem, cfg.format);
        traces::emit_traces(&trace, cfg.format, &dir.join(&name))?;
        Ok(MnistCell {
            algorithm: alg,
            activation: act,
            depth,
            mu,
            gamma,
            diverged,
            trace: name,
        })
    })?
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let manifest = MnistManifest {
        source,
        samples: data.len(),
        threshold_factor: m.threshold_factor,
        cells,
    };
    write_json(&dir.join(report::MANIFEST), &manifest)?;
    let rep = report::mnist_report(&dir)?;
    write_json(&dir.join(report::REPORT), &rep)?;
    Ok(rep)
}

fn expect_kind(cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<()> {
    if cfg.kind != kind {
        return Err(Error::Config(format!("expected a {kind:?} config, got {:?}", cfg.kind)));
    }
    cfg.validate()
}

pub(crate) fn prepare_dir(cfg: &ExperimentConfig) -> Result<std::path::PathBuf> {
    let dir = cfg.kind_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horizon_formula() {
        assert_eq!(horizon(0.5, 0.25), 2);
        assert_eq!(horizon(0.9, 1e-12), 263);
        assert_eq!(horizon(1.0, 1e-12), usize::MAX);
    }

    #[test]
    fn calibration_lands_inside_basin() {
        let shape = NetworkShape::columns(vec![5, 3, 3], Activation::Linear).unwrap();
        let inst = network::make_teacher(&shape, 5, 3).unwrap();
        let r = metrics::basin_radius(&inst, &LossModel::scaled_mse()).unwrap();
        let c = calibrate(&inst, r, 9).unwrap();
        assert!(c.dist_sq <= r && c.dist_sq > 0.5 * r, "{} vs {r}", c.dist_sq);
        assert!(calibrate(&inst, 0.0, 9).is_err());
    }

    #[test]
    fn missing_data_is_explained() {
        let mut cfg = ExperimentConfig::for_kind(ExperimentKind::Mnist);
        cfg.mnist.synthetic_fallback = false;
        let err = mnist_data(&cfg).unwrap_err().to_string();
        assert!(err.contains("--mnist-images"), "{err}");
    }
}
