//! Gauge-invariant distance between a student and the teacher, and numerical
//! certificates for the distance sandwich and the Riemannian regularity
//! inequality.
//!
//! The distance is
//!
//! ```text
//! dist²(W, W★) = min_{R_1..R_{N-1} ∈ O(d_i)}  Σ_{i≥2} ‖Y★‖² ‖W_i − R_iᵀ W_i★ R_{i−1}‖_F²
//!                                            + ‖W_1 − R_1ᵀ W_1★‖_F²
//! ```
//!
//! with `R_0 = I` and `R_N = I`. It is minimised by block-coordinate descent:
//! each `R_i` appears in exactly two terms and, with the others fixed, its
//! optimum is an orthogonal Procrustes solution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, LossModel};
use crate::matcore::{self, Matrix};
use crate::network::{self, Activation, Odlnn, TeacherInstance};
use crate::stiefel;

pub const DEFAULT_MAX_SWEEPS: usize = 200;
pub const DEFAULT_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct AlignmentResult {
    /// `R_1..R_{N−1}`.
    pub rotations: Vec<Matrix>,
    pub dist_sq: f64,
    /// Weighted objective terms for layers `1..=N`.
    pub per_layer_residuals: Vec<f64>,
    pub converged: bool,
    pub sweeps_used: usize,
    /// Objective after initialisation and after every sweep.
    pub trace: Vec<f64>,
}

fn check_same_shape(w: &Odlnn, w_star: &Odlnn) -> Result<()> {
    if w.shape().dims() != w_star.shape().dims() {
        return Err(Error::InvalidShape {
            op: "align_and_distance",
            detail: format!(
                "student dims {:?} vs teacher dims {:?}",
                w.shape().dims(),
                w_star.shape().dims()
            ),
        });
    }
    Ok(())
}

/// `R_iᵀ W_i★ R_{i−1}` for layer `i` (1-based).
fn aligned_teacher_layer(w_star: &Odlnn, rot: &[Matrix], i: usize) -> Matrix {
    let n = w_star.depth();
    let mut m = w_star.layer(i).clone();
    if i >= 2 {
        m = m * &rot[i - 2];
    }
    if i < n {
        m = rot[i - 1].transpose() * m;
    }
    m
}

/// Per-layer weighted terms of the distance objective.
pub fn objective_terms(w: &Odlnn, w_star: &Odlnn, scale: f64, rot: &[Matrix]) -> Vec<f64> {
    let c = scale * scale;
    (1..=w.depth())
        .map(|i| {
            let d = (w.layer(i) - aligned_teacher_layer(w_star, rot, i)).norm_squared();
            if i == 1 {
                d
            } else {
                c * d
            }
        })
        .collect()
}

/// `W_i − R_iᵀ W_i★ R_{i−1}` for every layer.
pub fn layer_deviations(w: &Odlnn, w_star: &Odlnn, rot: &[Matrix]) -> Vec<Matrix> {
    (1..=w.depth())
        .map(|i| w.layer(i) - aligned_teacher_layer(w_star, rot, i))
        .collect()
}

fn procrustes(m: &Matrix) -> Result<Matrix> {
    let dec = matcore::svd(m)?;
    Ok(dec.u * dec.vt)
}

/// Optimal `R_i` with all other rotations fixed.
fn block_update(w: &Odlnn, w_star: &Odlnn, c: f64, rot: &[Matrix], i: usize) -> Result<Matrix> {
    let n = w.depth();
    // Layer i term: ⟨R_i, A_i W_iᵀ⟩ with A_i = W_i★ R_{i−1}.
    let mut a = w_star.layer(i).clone();
    if i >= 2 {
        a = a * &rot[i - 2];
    }
    let weight = if i == 1 { 1.0 } else { c };
    let mut m = a * w.layer(i).transpose() * weight;
    // Layer i+1 term: ⟨R_i, Bᵀ W_{i+1}⟩ with B = R_{i+1}ᵀ W_{i+1}★.
    let mut b = w_star.layer(i + 1).clone();
    if i + 1 < n {
        b = rot[i].transpose() * b;
    }
    m += b.transpose() * w.layer(i + 1) * c;
    procrustes(&m)
}

/// Top-down sequential solve: `R_{N−1}` from layer N alone, then each lower
/// rotation from the layer above it. Exact on the gauge orbit of a
/// column-orthonormal chain.
fn greedy_init(w: &Odlnn, w_star: &Odlnn, c: f64) -> Result<Vec<Matrix>> {
    let n = w.depth();
    let mut rot: Vec<Matrix> = (1..n)
        .map(|i| Matrix::identity(w.shape().dims()[i], w.shape().dims()[i]))
        .collect();
    for i in (1..n).rev() {
        let mut b = w_star.layer(i + 1).clone();
        if i + 1 < n {
            b = rot[i].transpose() * b;
        }
        let mut m = b.transpose() * w.layer(i + 1);
        if i == 1 {
            m = m * c + w_star.layer(1) * w.layer(1).transpose();
        }
        rot[i - 1] = procrustes(&m)?;
    }
    Ok(rot)
}

pub fn align_and_distance(
    w: &Odlnn,
    w_star: &Odlnn,
    y_star_norm: f64,
    max_sweeps: usize,
    tol: f64,
) -> Result<AlignmentResult> {
    align_from(w, w_star, y_star_norm, None, max_sweeps, tol)
}

/// As [`align_and_distance`], optionally warm-started from earlier rotations.
pub fn align_from(
    w: &Odlnn,
    w_star: &Odlnn,
    y_star_norm: f64,
    warm: Option<&[Matrix]>,
    max_sweeps: usize,
    tol: f64,
) -> Result<AlignmentResult> {
    check_same_shape(w, w_star)?;
    let n = w.depth();
    let c = y_star_norm * y_star_norm;
    let total = |rot: &[Matrix]| objective_terms(w, w_star, y_star_norm, rot).iter().sum::<f64>();

    let mut rot: Vec<Matrix> = match warm {
        Some(r) if r.len() == n - 1 => r.to_vec(),
        _ => {
            let identity: Vec<Matrix> = (1..n)
                .map(|i| Matrix::identity(w.shape().dims()[i], w.shape().dims()[i]))
                .collect();
            let greedy = greedy_init(w, w_star, c)?;
            if total(&greedy) < total(&identity) {
                greedy
            } else {
                identity
            }
        }
    };
    let mut obj = total(&rot);
    if !obj.is_finite() {
        return Err(Error::Numerical {
            op: "align_and_distance",
            detail: "non-finite objective".into(),
        });
    }
    let mut trace = vec![obj];
    let mut converged = obj == 0.0;
    let mut sweeps = 0;
    while !converged && sweeps < max_sweeps {
        for i in 1..n {
            rot[i - 1] = block_update(w, w_star, c, &rot, i)?;
        }
        sweeps += 1;
        let next = total(&rot);
        if !next.is_finite() {
            return Err(Error::Numerical {
                op: "align_and_distance",
                detail: format!("non-finite objective after sweep {sweeps}"),
            });
        }
        trace.push(next);
        converged = next == 0.0 || (obj - next) <= tol * obj;
        obj = next;
    }
    let per_layer_residuals = objective_terms(w, w_star, y_star_norm, &rot);
    Ok(AlignmentResult {
        dist_sq: per_layer_residuals.iter().sum(),
        rotations: rot,
        per_layer_residuals,
        converged,
        sweeps_used: sweeps,
        trace,
    })
}

/// Distance to the teacher of `instance` with default sweep settings.
pub fn dist_sq(w: &Odlnn, instance: &TeacherInstance) -> Result<AlignmentResult> {
    align_and_distance(w, &instance.teacher, instance.spec_norm_y, DEFAULT_MAX_SWEEPS, DEFAULT_TOL)
}

/// `lhs ≥ rhs` up to a relative slack of `rel` and a tiny absolute floor.
pub fn holds_ge(lhs: f64, rhs: f64, rel: f64, abs: f64) -> bool {
    lhs >= rhs - rel * rhs.abs() - abs
}

const SANDWICH_REL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lemma1Check {
    pub lower_ok: bool,
    pub upper_ok: bool,
    /// `‖Y−Y★‖² / (dist² / ((16N−8)κ²))`; at least 1 when the lower bound holds.
    pub lower_ratio: Option<f64>,
    /// `‖Y−Y★‖² / ((9N/4) dist²)`; at most 1 when the upper bound holds.
    pub upper_ratio: Option<f64>,
    pub output_err_sq: f64,
    pub dist_sq: f64,
}

fn abs_floor(instance: &TeacherInstance) -> f64 {
    1e-24 * instance.spec_norm_y.powi(2).max(1.0)
}

/// Evaluates both sides of the sandwich for a given `dist²`.
pub fn lemma1_sandwich(n_layers: usize, instance: &TeacherInstance, output_err_sq: f64, dist_sq: f64) -> Lemma1Check {
    let nf = n_layers as f64;
    let lower_rhs = dist_sq / ((16.0 * nf - 8.0) * instance.kappa_y.powi(2));
    let upper_rhs = 9.0 * nf / 4.0 * dist_sq;
    let floor = abs_floor(instance);
    Lemma1Check {
        lower_ok: holds_ge(output_err_sq, lower_rhs, SANDWICH_REL_TOL, floor),
        upper_ok: holds_ge(upper_rhs, output_err_sq, SANDWICH_REL_TOL, floor),
        lower_ratio: (lower_rhs > 0.0).then(|| output_err_sq / lower_rhs),
        upper_ratio: (upper_rhs > 0.0).then(|| output_err_sq / upper_rhs),
        output_err_sq,
        dist_sq,
    }
}

pub fn check_lemma1(w: &Odlnn, instance: &TeacherInstance) -> Result<Lemma1Check> {
    let s2 = instance.spec_norm_y.powi(2);
    let w1_norm = matcore::spectral_norm(w.w1())?;
    if w1_norm * w1_norm > 2.25 * s2 * (1.0 + 1e-12) {
        return Err(Error::Precondition(format!(
            "‖W_1‖² = {:.6e} exceeds (9/4)‖Y*‖² = {:.6e}",
            w1_norm * w1_norm,
            2.25 * s2
        )));
    }
    let y = network::forward(w, &instance.x)?;
    let err = (y - &instance.y_star).norm_squared();
    let al = dist_sq(w, instance)?;
    Ok(lemma1_sandwich(w.depth(), instance, err, al.dist_sq))
}

/// `α β σ²_min(Y★) / (9 (2N−1)(N²−1))`.
pub fn basin_radius(instance: &TeacherInstance, model: &LossModel) -> Result<f64> {
    let (alpha, beta) = model.constants()?;
    let n = instance.teacher.depth() as f64;
    Ok(alpha * beta * instance.sigma_min_y.powi(2) / (9.0 * (2.0 * n - 1.0) * (n * n - 1.0)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegularityReport {
    /// Descent correlation `Σ_{i≥2}⟨D_i, P_T(∇_i g)⟩ + ⟨D_1, ∇_1 g⟩`.
    pub lhs: f64,
    /// Lower bound required by the regularity condition.
    pub rhs: f64,
    pub dist_sq: f64,
    /// `Σ_{i≥2}‖P_T(∇_i g)‖² + ‖Y★‖²‖∇_1 g‖²`.
    pub grad_energy: f64,
    /// `Σ_{i≥2}⟨P⊥(D_i), ∇_i g⟩`.
    pub cross_term_t: f64,
    pub residual_h_norm_sq: f64,
    /// `9N(N−1) dist⁴ / (8‖Y★‖²)`.
    pub h_bound: f64,
    pub satisfied: bool,
    pub in_region: bool,
    /// `lhs − (⟨∇L(Y) − ∇L(Y★), Y − Y★ + H⟩ − T)`; zero up to rounding.
    pub identity_gap: f64,
    /// `‖∇_1 g‖² ≤ ‖ΔL‖²` and `‖∇_i g‖² ≤ (9/4)‖Y★‖²‖ΔL‖²` for `i ≥ 2`.
    pub gradient_bounds_ok: bool,
}

impl RegularityReport {
    pub fn h_slack(&self) -> Option<f64> {
        (self.h_bound > 0.0).then(|| self.residual_h_norm_sq / self.h_bound)
    }
}

pub fn check_regularity(w: &Odlnn, instance: &TeacherInstance, model: &LossModel) -> Result<RegularityReport> {
    if w.shape().activation() != Activation::Linear {
        return Err(Error::Precondition(
            "regularity certificate requires a linear network".into(),
        ));
    }
    let (alpha, beta) = model.constants()?;
    let n = w.depth();
    let nf = n as f64;
    let s2 = instance.spec_norm_y.powi(2);
    let kappa2 = instance.kappa_y.powi(2);
    let x = &instance.x;
    let y_star = &instance.y_star;

    let al = dist_sq(w, instance)?;
    let dist = al.dist_sq;
    let devs = layer_deviations(w, &instance.teacher, &al.rotations);

    let (y, grads) =
        network::forward_and_gradients(w, x, |y| losses::loss_grad(model, y, y_star))?;
    let grad_at_star = losses::loss_grad(model, y_star, y_star)?;
    let d_l = losses::loss_grad(model, &y, y_star)? - &grad_at_star;
    let d_l_sq = d_l.norm_squared();

    let mut lhs = matcore::frob_inner(&devs[0], &grads[0]);
    let mut grad_energy = s2 * grads[0].norm_squared();
    let mut t = 0.0;
    let mut bounds_ok = grads[0].norm_squared() <= d_l_sq * (1.0 + 1e-9) + 1e-300;
    for (k, p) in w.constrained().iter().enumerate() {
        let i = k + 1;
        let pt = stiefel::project_tangent(p, &grads[i])?.mat;
        lhs += matcore::frob_inner(&devs[i], &pt);
        grad_energy += pt.norm_squared();
        let dn = stiefel::project_normal(p, &devs[i])?;
        t += matcore::frob_inner(&dn, &grads[i]);
        bounds_ok &= grads[i].norm_squared() <= 2.25 * s2 * d_l_sq * (1.0 + 1e-9) + 1e-300;
    }
    let rhs = alpha / (16.0 * (2.0 * nf - 1.0) * kappa2) * dist
        + beta / ((9.0 * nf - 5.0) * s2) * grad_energy;

    // H = Σ_i W_N⋯W_{i+1} D_i W_{i−1}⋯W_1 X − (Y − Y★)
    let mut h = y_star - &y;
    let mut prefix = x.clone();
    for i in 1..=n {
        let mut term = &devs[i - 1] * &prefix;
        for j in i + 1..=n {
            term = w.layer(j) * term;
        }
        h += term;
        prefix = w.layer(i) * prefix;
    }
    let residual_h_norm_sq = h.norm_squared();
    let h_bound = 9.0 * nf * (nf - 1.0) / (8.0 * s2) * dist * dist;
    let err = &y - y_star;
    let identity_gap = lhs - (matcore::frob_inner(&d_l, &(err + &h)) - t);

    let satisfied = lhs >= rhs - 1e-9 * rhs.abs().max(1.0);
    Ok(RegularityReport {
        lhs,
        rhs,
        dist_sq: dist,
        grad_energy,
        cross_term_t: t,
        residual_h_norm_sq,
        h_bound,
        satisfied,
        in_region: dist <= basin_radius(instance, model)?,
        identity_gap,
        gradient_bounds_ok: bounds_ok,
    })
}
