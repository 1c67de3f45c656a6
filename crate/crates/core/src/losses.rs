//! Output losses and the restricted correlated gradient (RCG) constants.

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::{self, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// `½‖Y − Y★‖_F²`
    ScaledMse,
    /// Mean softmax cross-entropy over columns, `Y★` one-hot.
    SoftmaxCe,
}

/// A loss together with its RCG constants, when known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossModel {
    pub kind: LossKind,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
}

impl LossModel {
    /// Scaled MSE, which satisfies the RCG inequality with equality at α = β = ½.
    pub fn scaled_mse() -> Self {
        LossModel {
            kind: LossKind::ScaledMse,
            alpha: Some(0.5),
            beta: Some(0.5),
        }
    }

    /// Cross-entropy; constants must be probed with [`probe_rcg`].
    pub fn softmax_ce() -> Self {
        LossModel {
            kind: LossKind::SoftmaxCe,
            alpha: None,
            beta: None,
        }
    }

    pub fn for_kind(kind: LossKind) -> Self {
        match kind {
            LossKind::ScaledMse => Self::scaled_mse(),
            LossKind::SoftmaxCe => Self::softmax_ce(),
        }
    }

    pub fn with_constants(self, alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0) {
            return Err(Error::Precondition(format!(
                "RCG constants must be positive, got alpha={alpha}, beta={beta}"
            )));
        }
        if alpha * beta > 0.25 * (1.0 + 1e-12) {
            return Err(Error::Precondition(format!(
                "RCG constants violate alpha*beta <= 1/4 (alpha={alpha}, beta={beta})"
            )));
        }
        Ok(LossModel {
            alpha: Some(alpha),
            beta: Some(beta),
            ..self
        })
    }

    /// `(α, β)`, or an error when the constants were never populated.
    pub fn constants(&self) -> Result<(f64, f64)> {
        match (self.alpha, self.beta) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(Error::Precondition(format!(
                "{:?} loss has no RCG constants; probe them first",
                self.kind
            ))),
        }
    }
}

fn check_pair(op: &'static str, model: &LossModel, y: &Matrix, y_star: &Matrix) -> Result<()> {
    if y.shape() != y_star.shape() {
        return Err(Error::shape(op, y, y_star));
    }
    if model.kind == LossKind::SoftmaxCe {
        check_one_hot(y_star)?;
    }
    Ok(())
}

pub fn check_one_hot(labels: &Matrix) -> Result<()> {
    for (j, col) in labels.column_iter().enumerate() {
        let ones = col.iter().filter(|&&v| v == 1.0).count();
        let zeros = col.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != col.len() {
            return Err(Error::Labels(format!("column {j} is not one-hot")));
        }
    }
    Ok(())
}

/// Column-wise `log Σ exp`.
fn log_sum_exp_columns(y: &Matrix) -> Vec<f64> {
    y.column_iter()
        .map(|c| {
            let m = c.max();
            m + c.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        })
        .collect()
}

pub fn softmax_columns(y: &Matrix) -> Matrix {
    let lse = log_sum_exp_columns(y);
    Matrix::from_fn(y.nrows(), y.ncols(), |i, j| (y[(i, j)] - lse[j]).exp())
}

pub fn loss_value(model: &LossModel, y: &Matrix, y_star: &Matrix) -> Result<f64> {
    check_pair("loss_value", model, y, y_star)?;
    Ok(match model.kind {
        LossKind::ScaledMse => 0.5 * (y - y_star).norm_squared(),
        LossKind::SoftmaxCe => {
            let lse = log_sum_exp_columns(y);
            let n = y.ncols() as f64;
            let mut total = 0.0;
            for (j, col) in y_star.column_iter().enumerate() {
                for (i, &t) in col.iter().enumerate() {
                    if t != 0.0 {
                        total += t * (lse[j] - y[(i, j)]);
                    }
                }
            }
            total / n
        }
    })
}

pub fn loss_grad(model: &LossModel, y: &Matrix, y_star: &Matrix) -> Result<Matrix> {
    check_pair("loss_grad", model, y, y_star)?;
    Ok(match model.kind {
        LossKind::ScaledMse => y - y_star,
        LossKind::SoftmaxCe => (softmax_columns(y) - y_star) / (y.ncols() as f64),
    })
}

/// Terms of the RCG inequality for one pair: `(⟨Δg, ΔY⟩, ‖ΔY‖², ‖Δg‖²)`.
pub fn rcg_terms(model: &LossModel, y_star: &Matrix, y1: &Matrix, y2: &Matrix) -> Result<(f64, f64, f64)> {
    let dg = loss_grad(model, y1, y_star)? - loss_grad(model, y2, y_star)?;
    let dy = y1 - y2;
    Ok((matcore::frob_inner(&dg, &dy), dy.norm_squared(), dg.norm_squared()))
}

/// Largest common value `α = β` for which the RCG inequality holds on every
/// sampled pair in the ball of radius `region_radius` around `y_star`.
pub fn probe_rcg(
    model: &LossModel,
    y_star: &Matrix,
    region_radius: f64,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if !(region_radius > 0.0) || samples < 2 {
        return Err(Error::Probe(format!(
            "need radius > 0 and samples >= 2 (got {region_radius}, {samples})"
        )));
    }
    let mut rng = matcore::rng_from_seed(seed);
    let unit = Uniform::new(0.0f64, 1.0).expect("valid range");
    let (r, c) = y_star.shape();
    let draw = |rng: &mut matcore::Rng| -> Matrix {
        let d = matcore::gaussian(r, c, rng);
        let scale = region_radius * unit.sample(rng) / d.norm().max(f64::MIN_POSITIVE);
        y_star + d * scale
    };
    let mut best = f64::INFINITY;
    let mut usable = 0usize;
    for _ in 0..samples {
        let y1 = draw(&mut rng);
        let y2 = draw(&mut rng);
        let (inner, dy2, dg2) = rcg_terms(model, y_star, &y1, &y2)?;
        if dy2 + dg2 == 0.0 {
            continue;
        }
        usable += 1;
        best = best.min(inner / (dy2 + dg2));
    }
    if usable == 0 {
        return Err(Error::Probe("every sampled pair was degenerate".into()));
    }
    if !(best > 0.0) {
        return Err(Error::Probe(format!(
            "no positive constant certifies the sample (best ratio {best:e})"
        )));
    }
    // Cauchy–Schwarz caps the common value at ½; clip rounding overshoot.
    let a = best.min(0.5);
    Ok((a, a))
}
