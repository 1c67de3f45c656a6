//! Riemannian gradient descent with separate rates for the free layer and
//! the Stiefel layers, a Euclidean gradient descent baseline, and the
//! per-iteration trace.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, LossModel};
use crate::matcore::Matrix;
use crate::metrics;
use crate::network::{self, Odlnn, TeacherInstance};
use crate::stiefel::{self, StiefelPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Rgd,
    Gd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Step size of the constrained layers.
    pub mu: f64,
    /// `W_1` moves with step `mu * gamma`.
    pub gamma: f64,
    pub max_iters: usize,
    /// Stop once the tracked quantity (`dist²` with a teacher, loss
    /// otherwise) falls to `stop_tol` times its initial value.
    pub stop_tol: f64,
    pub algorithm: Algorithm,
    /// Re-retract every constrained layer onto the manifold this often
    /// (0 disables).
    pub re_retract_every: usize,
    /// Apply `gamma` to `W_1` in the GD baseline too.
    pub gd_use_gamma: bool,
    /// Compare every contraction ratio against [`theorem_rate`].
    pub theorem_mode: bool,
    /// Record elapsed wall time; off by default so traces are reproducible.
    pub record_wall_time: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            mu: 1e-2,
            gamma: 1.0,
            max_iters: 1000,
            stop_tol: 0.0,
            algorithm: Algorithm::Rgd,
            re_retract_every: 100,
            gd_use_gamma: false,
            theorem_mode: false,
            record_wall_time: false,
        }
    }
}

/// Largest step size covered by the linear convergence guarantee:
/// `2β / ((9N − 5)‖Y★‖²)`.
pub fn theorem_max_mu(instance: &TeacherInstance, model: &LossModel) -> Result<f64> {
    let (_, beta) = model.constants()?;
    let n = instance.teacher.depth() as f64;
    Ok(2.0 * beta / ((9.0 * n - 5.0) * instance.spec_norm_y.powi(2)))
}

impl OptimizerConfig {
    /// RGD at the largest guaranteed step with `γ = ‖Y★‖²`.
    pub fn theorem(instance: &TeacherInstance, model: &LossModel) -> Result<Self> {
        Ok(OptimizerConfig {
            mu: theorem_max_mu(instance, model)?,
            gamma: instance.spec_norm_y.powi(2),
            algorithm: Algorithm::Rgd,
            theorem_mode: true,
            ..OptimizerConfig::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.mu.is_finite()) || !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "need finite mu >= 0 and gamma > 0 (mu={}, gamma={})",
                self.mu, self.gamma
            )));
        }
        if !(self.stop_tol >= 0.0) {
            return Err(Error::Config(format!("stop_tol must be >= 0, got {}", self.stop_tol)));
        }
        Ok(())
    }

    fn validate_theorem(&self, instance: &TeacherInstance, model: &LossModel) -> Result<()> {
        let max_mu = theorem_max_mu(instance, model)?;
        let s2 = instance.spec_norm_y.powi(2);
        if self.mu > max_mu * (1.0 + 1e-12) || self.mu <= 0.0 {
            return Err(Error::Config(format!(
                "theorem mode needs 0 < mu <= {max_mu:e}, got {:e}",
                self.mu
            )));
        }
        if (self.gamma - s2).abs() > 1e-12 * s2 {
            return Err(Error::Config(format!(
                "theorem mode needs gamma = ‖Y*‖² = {s2:e}, got {:e}",
                self.gamma
            )));
        }
        if self.algorithm != Algorithm::Rgd {
            return Err(Error::Config("theorem mode applies to RGD only".into()));
        }
        Ok(())
    }
}

/// `1 − α μ σ²_min(Y★) / (8(2N − 1))`.
pub fn theorem_rate(instance: &TeacherInstance, model: &LossModel, cfg: &OptimizerConfig) -> Result<f64> {
    let (alpha, _) = model.constants()?;
    let n = instance.teacher.depth() as f64;
    Ok(1.0 - alpha * cfg.mu * instance.sigma_min_y.powi(2) / (8.0 * (2.0 * n - 1.0)))
}

/// Training inputs and targets, with the generating teacher when known.
#[derive(Debug, Clone, Copy)]
pub struct Target<'a> {
    pub x: &'a Matrix,
    pub y: &'a Matrix,
    pub teacher: Option<&'a TeacherInstance>,
}

impl<'a> Target<'a> {
    pub fn data(x: &'a Matrix, y: &'a Matrix) -> Self {
        Target { x, y, teacher: None }
    }
}

impl<'a> From<&'a TeacherInstance> for Target<'a> {
    fn from(t: &'a TeacherInstance) -> Self {
        Target {
            x: &t.x,
            y: &t.y_star,
            teacher: Some(t),
        }
    }
}

fn ensure_finite_grads(grads: &[Matrix], iter: usize, trace: &RunTrace) -> Result<()> {
    if grads.iter().all(|g| g.iter().all(|v| v.is_finite())) {
        Ok(())
    } else {
        Err(Error::Divergence {
            iter,
            detail: "non-finite gradient".into(),
            partial: Box::new(trace.clone()),
        })
    }
}

fn apply_rgd(net: &Odlnn, grads: &[Matrix], cfg: &OptimizerConfig) -> Result<Odlnn> {
    let w1 = net.w1() - &grads[0] * (cfg.mu * cfg.gamma);
    let constrained = net
        .constrained()
        .iter()
        .zip(&grads[1..])
        .map(|(p, g)| {
            let t = stiefel::project_tangent(p, g)?.mat;
            stiefel::polar_retract(p, &(p.mat() - t * cfg.mu))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Odlnn::from_parts(net.shape().clone(), w1, constrained))
}

fn apply_gd(net: &Odlnn, grads: &[Matrix], cfg: &OptimizerConfig) -> Result<Odlnn> {
    let rate1 = if cfg.gd_use_gamma { cfg.mu * cfg.gamma } else { cfg.mu };
    let w1 = net.w1() - &grads[0] * rate1;
    let constrained = net
        .constrained()
        .iter()
        .zip(&grads[1..])
        .map(|(p, g)| StiefelPoint::new_unchecked(p.mat() - g * cfg.mu, p.orientation()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Odlnn::from_parts(net.shape().clone(), w1, constrained))
}

fn gradients(net: &Odlnn, target: &Target<'_>, model: &LossModel) -> Result<(Matrix, Vec<Matrix>)> {
    network::forward_and_gradients(net, target.x, |y| losses::loss_grad(model, y, target.y))
}

fn step_once(net: &Odlnn, grads: &[Matrix], cfg: &OptimizerConfig) -> Result<Odlnn> {
    match cfg.algorithm {
        Algorithm::Rgd => apply_rgd(net, grads, cfg),
        Algorithm::Gd => apply_gd(net, grads, cfg),
    }
}

fn single_step<'a>(
    net: &Odlnn,
    target: impl Into<Target<'a>>,
    model: &LossModel,
    cfg: &OptimizerConfig,
    algorithm: Algorithm,
) -> Result<Odlnn> {
    cfg.validate()?;
    let target = target.into();
    let (_, grads) = gradients(net, &target, model)?;
    if !grads.iter().all(|g| g.iter().all(|v| v.is_finite())) {
        return Err(Error::Divergence {
            iter: 0,
            detail: "non-finite gradient".into(),
            partial: Box::default(),
        });
    }
    step_once(net, &grads, &OptimizerConfig { algorithm, ..cfg.clone() })
}

/// One Riemannian step: `W_1 ← W_1 − μγ∇_1`, and for `i ≥ 2`
/// `W_i ← Retr(W_i − μ P_T(∇_i))`.
pub fn rgd_step<'a>(
    net: &Odlnn,
    target: impl Into<Target<'a>>,
    model: &LossModel,
    cfg: &OptimizerConfig,
) -> Result<Odlnn> {
    single_step(net, target, model, cfg, Algorithm::Rgd)
}

/// One plain gradient step on every layer; feasibility is not maintained.
pub fn gd_step<'a>(
    net: &Odlnn,
    target: impl Into<Target<'a>>,
    model: &LossModel,
    cfg: &OptimizerConfig,
) -> Result<Odlnn> {
    single_step(net, target, model, cfg, Algorithm::Gd)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub loss: f64,
    pub dist_sq: Option<f64>,
    pub output_err_sq: Option<f64>,
    pub grad_norms: Vec<f64>,
    pub contraction_ratio: Option<f64>,
    pub wall_ms: f64,
}

impl TraceRecord {
    pub fn grad_norm_total(&self) -> f64 {
        self.grad_norms.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Tolerance,
    #[default]
    MaxIters,
}

#[derive(Debug, Clone, Default)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
    /// Contraction factor checked against, in theorem mode.
    pub theorem_rate: Option<f64>,
    /// Iterations whose `dist²` ratio exceeded the theorem factor.
    pub violations: usize,
    pub stop: StopReason,
    pub final_net: Option<Odlnn>,
}

impl RunTrace {
    pub fn dist_series(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.dist_sq).collect()
    }

    pub fn loss_series(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Receives every record as soon as it is produced.
pub trait RecordSink {
    fn record(&mut self, rec: &TraceRecord);
}

impl RecordSink for () {
    fn record(&mut self, _: &TraceRecord) {}
}

impl<F: FnMut(&TraceRecord)> RecordSink for F {
    fn record(&mut self, rec: &TraceRecord) {
        self(rec)
    }
}

pub fn run<'a>(
    net0: &Odlnn,
    target: impl Into<Target<'a>>,
    model: &LossModel,
    cfg: &OptimizerConfig,
) -> Result<RunTrace> {
    run_with_sink(net0, target, model, cfg, &mut ())
}

pub fn run_with_sink<'a>(
    net0: &Odlnn,
    target: impl Into<Target<'a>>,
    model: &LossModel,
    cfg: &OptimizerConfig,
    sink: &mut dyn RecordSink,
) -> Result<RunTrace> {
    cfg.validate()?;
    let target = target.into();
    let mut trace = RunTrace::default();
    if cfg.theorem_mode {
        let inst = target
            .teacher
            .ok_or_else(|| Error::Config("theorem mode needs a teacher".into()))?;
        cfg.validate_theorem(inst, model)?;
        trace.theorem_rate = Some(theorem_rate(inst, model, cfg)?);
    }

    let start = Instant::now();
    let mut net = net0.clone();
    let mut rotations: Option<Vec<Matrix>> = None;
    let mut reference: Option<f64> = None;
    let mut prev_dist: Option<f64> = None;

    for iter in 0..=cfg.max_iters {
        let (y, grads) = gradients(&net, &target, model).map_err(|e| match e {
            Error::Numerical { detail, .. } => Error::Divergence {
                iter,
                detail,
                partial: Box::new(trace.clone()),
            },
            other => other,
        })?;
        let loss = losses::loss_value(model, &y, target.y)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                iter,
                detail: format!("loss is {loss}"),
                partial: Box::new(trace),
            });
        }
        ensure_finite_grads(&grads, iter, &trace)?;

        let (dist_sq, output_err_sq) = match target.teacher {
            Some(inst) => {
                let al = metrics::align_from(
                    &net,
                    &inst.teacher,
                    inst.spec_norm_y,
                    rotations.as_deref(),
                    metrics::DEFAULT_MAX_SWEEPS,
                    metrics::DEFAULT_TOL,
                )?;
                rotations = Some(al.rotations);
                (Some(al.dist_sq), Some((&y - &inst.y_star).norm_squared()))
            }
            None => (None, None),
        };
        let contraction_ratio = match (dist_sq, prev_dist) {
            (Some(d), Some(p)) if p > 0.0 => Some(d / p),
            _ => None,
        };
        if let (Some(rate), Some(d), Some(p), Some(d0)) = (trace.theorem_rate, dist_sq, prev_dist, reference) {
            if d > rate * p + 1e-12 * d0 {
                trace.violations += 1;
            }
        }
        let rec = TraceRecord {
            iter,
            loss,
            dist_sq,
            output_err_sq,
            grad_norms: grads.iter().map(|g| g.norm()).collect(),
            contraction_ratio,
            wall_ms: if cfg.record_wall_time {
                start.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            },
        };
        sink.record(&rec);
        trace.records.push(rec);

        let tracked = dist_sq.unwrap_or(loss);
        let d0 = *reference.get_or_insert(tracked);
        prev_dist = dist_sq;
        if tracked == 0.0 || tracked <= cfg.stop_tol * d0 {
            trace.stop = StopReason::Tolerance;
            break;
        }
        if iter == cfg.max_iters {
            break;
        }

        net = step_once(&net, &grads, cfg).map_err(|e| match e {
            Error::RetractionSingular { sigma_min } => Error::Divergence {
                iter,
                detail: format!("retraction singular (sigma_min = {sigma_min:e})"),
                partial: Box::new(trace.clone()),
            },
            other => other,
        })?;
        if cfg.algorithm == Algorithm::Rgd
            && cfg.re_retract_every > 0
            && (iter + 1) % cfg.re_retract_every == 0
        {
            let cleaned = net
                .constrained()
                .iter()
                .map(stiefel::re_retract)
                .collect::<Result<Vec<_>>>()?;
            net = Odlnn::from_parts(net.shape().clone(), net.w1().clone(), cleaned);
        }
    }
    trace.final_net = Some(net);
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{make_teacher, Activation, NetworkShape};

    fn teacher() -> TeacherInstance {
        let shape = NetworkShape::columns(vec![5, 3, 3, 3], Activation::Linear).unwrap();
        make_teacher(&shape, 10, 1).unwrap()
    }

    #[test]
    fn theorem_rate_examples() {
        let mut inst = teacher();
        inst.sigma_min_y = 1.0;
        inst.spec_norm_y = 1.0;
        let model = LossModel::scaled_mse();
        let cfg = OptimizerConfig {
            mu: 1e-2,
            ..OptimizerConfig::default()
        };
        assert!((theorem_rate(&inst, &model, &cfg).unwrap() - 0.999875).abs() < 1e-15);
        let tcfg = OptimizerConfig::theorem(&inst, &model).unwrap();
        assert!((tcfg.mu - 1.0 / 22.0).abs() < 1e-15);
        let expect = 1.0 - 0.5 * (1.0 / 22.0) / 40.0;
        assert!((theorem_rate(&inst, &model, &tcfg).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn theorem_rate_increases_with_depth() {
        let model = LossModel::scaled_mse();
        let cfg = OptimizerConfig {
            mu: 1e-2,
            ..OptimizerConfig::default()
        };
        let mut prev = 0.0;
        for n in 2..=6 {
            let mut dims = vec![4];
            dims.extend(std::iter::repeat_n(3, n));
            let shape = NetworkShape::columns(dims, Activation::Linear).unwrap();
            let mut inst = make_teacher(&shape, 8, 2).unwrap();
            inst.sigma_min_y = 1.0;
            let r = theorem_rate(&inst, &model, &cfg).unwrap();
            assert!(r > prev);
            prev = r;
        }
    }

    #[test]
    fn teacher_is_stationary() {
        let inst = teacher();
        let model = LossModel::scaled_mse();
        let cfg = OptimizerConfig::theorem(&inst, &model).unwrap();
        let next = rgd_step(&inst.teacher, &inst, &model, &cfg).unwrap();
        assert!((next.w1() - inst.teacher.w1()).amax() < 1e-15);
        for (a, b) in next.constrained().iter().zip(inst.teacher.constrained()) {
            assert!((a.mat() - b.mat()).amax() < 1e-14);
        }
        let trace = run(&inst.teacher, &inst, &model, &cfg).unwrap();
        assert_eq!(trace.records.len(), 1);
        assert_eq!(trace.records[0].loss, 0.0);
        assert_eq!(trace.stop, StopReason::Tolerance);
    }

    #[test]
    fn zero_step_is_retraction_fixed_point() {
        let inst = teacher();
        let model = LossModel::scaled_mse();
        let shape = inst.teacher.shape().clone();
        let net = network::init_student(&shape, network::InitScheme::Orthogonal, 3).unwrap();
        let cfg = OptimizerConfig {
            mu: 0.0,
            ..OptimizerConfig::default()
        };
        let next = rgd_step(&net, &inst, &model, &cfg).unwrap();
        assert_eq!(next.w1(), net.w1());
        for (a, b) in next.constrained().iter().zip(net.constrained()) {
            assert!((a.mat() - b.mat()).amax() < 1e-12);
        }
    }

    #[test]
    fn scalar_chain_gd_recursion() {
        let shape = NetworkShape::columns(vec![1, 1, 1], Activation::Linear).unwrap();
        let (mut a, mut b) = (0.4, 0.9);
        let y_star = 0.5;
        let x = Matrix::from_element(1, 1, 1.0);
        let y = Matrix::from_element(1, 1, y_star);
        let model = LossModel::scaled_mse();
        let cfg = OptimizerConfig {
            mu: 0.1,
            algorithm: Algorithm::Gd,
            ..OptimizerConfig::default()
        };
        let mut net = Odlnn::new_unchecked(
            shape.clone(),
            Matrix::from_element(1, 1, a),
            vec![Matrix::from_element(1, 1, b)],
        )
        .unwrap();
        for _ in 0..5 {
            net = gd_step(&net, Target::data(&x, &y), &model, &cfg).unwrap();
            let r = b * a - y_star;
            let (na, nb) = (a - 0.1 * b * r, b - 0.1 * a * r);
            a = na;
            b = nb;
            assert!((net.w1()[(0, 0)] - a).abs() < 1e-15);
            assert!((net.layer(2)[(0, 0)] - b).abs() < 1e-15);
        }
    }

    #[test]
    fn gd_breaks_orthonormality_rgd_keeps_it() {
        let inst = teacher();
        let model = LossModel::scaled_mse();
        let shape = inst.teacher.shape().clone();
        let net = network::init_student(&shape, network::InitScheme::Orthogonal, 5).unwrap();
        let cfg = OptimizerConfig {
            mu: 0.1,
            ..OptimizerConfig::default()
        };
        let gd = gd_step(&net, &inst, &model, &cfg).unwrap();
        assert!(gd.max_defect() > 1e-6);
        let rgd = rgd_step(&net, &inst, &model, &cfg).unwrap();
        assert!(rgd.max_defect() < 1e-8);
    }

    #[test]
    fn theorem_mode_rejects_large_steps() {
        let inst = teacher();
        let model = LossModel::scaled_mse();
        let mut cfg = OptimizerConfig::theorem(&inst, &model).unwrap();
        cfg.mu *= 2.0;
        assert!(run(&inst.teacher, &inst, &model, &cfg).is_err());
    }

    #[test]
    fn sink_sees_every_record() {
        let inst = teacher();
        let model = LossModel::scaled_mse();
        let shape = inst.teacher.shape().clone();
        let net = network::init_student(&shape, network::InitScheme::Orthogonal, 5).unwrap();
        let cfg = OptimizerConfig {
            max_iters: 7,
            ..OptimizerConfig::default()
        };
        let mut seen = Vec::new();
        let mut sink = |r: &TraceRecord| seen.push(r.iter);
        let trace = run_with_sink(&net, &inst, &model, &cfg, &mut sink).unwrap();
        assert_eq!(seen, (0..=7).collect::<Vec<_>>());
        assert_eq!(trace.records.len(), 8);
    }

    #[test]
    fn divergence_carries_partial_trace() {
        let inst = teacher();
        let model = LossModel::scaled_mse();
        let shape = inst.teacher.shape().clone();
        let net = network::init_student(&shape, network::InitScheme::Orthogonal, 6).unwrap();
        let cfg = OptimizerConfig {
            mu: 1e200,
            gamma: 1e200,
            max_iters: 50,
            algorithm: Algorithm::Gd,
            ..OptimizerConfig::default()
        };
        match run(&net, &inst, &model, &cfg) {
            Err(Error::Divergence { partial, .. }) => assert!(!partial.records.is_empty()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
