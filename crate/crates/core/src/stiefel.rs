//! Stiefel manifold geometry: tangent/normal projections, polar retraction
//! and seeded perturbation.
//!
//! St(m, n) = {C ∈ ℝᵐˣⁿ : CᵀC = Iₙ}. A row-orthonormal matrix (CCᵀ = I) is
//! stored as-is with [`Orientation::Row`] and handled as its transpose, a
//! point of St(n, m). Every formula below is written once, in the
//! column-orthonormal frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::{self, Matrix};

/// Feasibility tolerance on `‖CᵀC − I‖_F` in the column frame.
pub const ORTHONORMAL_TOL: f64 = 1e-10;

/// Relative singular value floor below which a retraction input is rejected.
const RETRACTION_RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Column,
    Row,
}

impl Orientation {
    /// Column orientation when the layer does not shrink, row otherwise.
    pub fn for_layer(d_in: usize, d_out: usize) -> Self {
        if d_out >= d_in {
            Orientation::Column
        } else {
            Orientation::Row
        }
    }

    pub fn is_feasible(self, rows: usize, cols: usize) -> bool {
        match self {
            Orientation::Column => rows >= cols,
            Orientation::Row => cols >= rows,
        }
    }

    fn to_frame(self, m: &Matrix) -> Matrix {
        match self {
            Orientation::Column => m.clone(),
            Orientation::Row => m.transpose(),
        }
    }

    fn from_frame(self, m: Matrix) -> Matrix {
        match self {
            Orientation::Column => m,
            Orientation::Row => m.transpose(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StiefelPoint {
    mat: Matrix,
    orientation: Orientation,
}

impl StiefelPoint {
    pub fn new(mat: Matrix, orientation: Orientation) -> Result<Self> {
        let p = Self::new_unchecked(mat, orientation)?;
        let defect = p.defect();
        if defect > ORTHONORMAL_TOL {
            return Err(Error::Precondition(format!(
                "matrix is not {orientation:?}-orthonormal (defect {defect:e})"
            )));
        }
        Ok(p)
    }

    /// Accepts any matrix of a feasible shape; used for iterates that are
    /// not kept on the manifold (plain gradient descent).
    pub fn new_unchecked(mat: Matrix, orientation: Orientation) -> Result<Self> {
        let (r, c) = mat.shape();
        if !orientation.is_feasible(r, c) {
            return Err(Error::InvalidShape {
                op: "StiefelPoint",
                detail: format!("{r}x{c} cannot be {orientation:?}-orthonormal"),
            });
        }
        Ok(StiefelPoint { mat, orientation })
    }

    pub fn mat(&self) -> &Matrix {
        &self.mat
    }

    pub fn into_mat(self) -> Matrix {
        self.mat
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mat.shape()
    }

    /// The point as a column-orthonormal matrix.
    pub fn frame(&self) -> Matrix {
        self.orientation.to_frame(&self.mat)
    }

    pub fn defect(&self) -> f64 {
        matcore::orthonormality_defect(&self.frame())
    }
}

#[derive(Debug, Clone)]
pub struct TangentVector {
    pub mat: Matrix,
    pub base: StiefelPoint,
}

impl TangentVector {
    /// `‖AᵀC + CᵀA‖_F` in the column frame; zero for a true tangent vector.
    pub fn tangency_defect(&self) -> f64 {
        let a = self.base.orientation.to_frame(&self.mat);
        let c = self.base.frame();
        let s = a.transpose() * &c;
        (&s + s.transpose()).norm()
    }
}

fn check_shape(op: &'static str, c: &StiefelPoint, b: &Matrix) -> Result<()> {
    if c.mat.shape() != b.shape() {
        return Err(Error::shape(op, &c.mat, b));
    }
    Ok(())
}

/// `B − ½C(BᵀC + CᵀB)` in the column frame.
fn tangent_in_frame(c: &Matrix, b: &Matrix) -> Matrix {
    let btc = b.transpose() * c;
    let sym = &btc + btc.transpose();
    b - c * sym * 0.5
}

pub fn project_tangent(c: &StiefelPoint, b: &Matrix) -> Result<TangentVector> {
    check_shape("project_tangent", c, b)?;
    let o = c.orientation;
    let a = tangent_in_frame(&c.frame(), &o.to_frame(b));
    Ok(TangentVector {
        mat: o.from_frame(a),
        base: c.clone(),
    })
}

pub fn project_normal(c: &StiefelPoint, b: &Matrix) -> Result<Matrix> {
    let t = project_tangent(c, b)?;
    Ok(b - t.mat)
}

/// Polar retraction `Ĉ(ĈᵀĈ)^{-1/2}`, evaluated as `UVᵀ` from the thin SVD
/// of the candidate.
pub fn polar_retract(c: &StiefelPoint, candidate: &Matrix) -> Result<StiefelPoint> {
    check_shape("polar_retract", c, candidate)?;
    let o = c.orientation;
    let frame = o.to_frame(candidate);
    let q = polar_factor(&frame)?;
    Ok(StiefelPoint {
        mat: o.from_frame(q),
        orientation: o,
    })
}

/// Orthonormal polar factor `UVᵀ` of a tall full-column-rank matrix.
pub fn polar_factor(tall: &Matrix) -> Result<Matrix> {
    let dec = matcore::svd(tall).map_err(|e| match e {
        Error::Numerical { .. } => Error::RetractionSingular { sigma_min: f64::NAN },
        other => other,
    })?;
    let hi = dec.s[0];
    let lo = *dec.s.last().expect("nonempty");
    if !(lo > RETRACTION_RANK_TOL * hi.max(1.0)) {
        return Err(Error::RetractionSingular { sigma_min: lo });
    }
    Ok(dec.u * dec.vt)
}

/// Re-project a point onto the manifold to remove accumulated rounding drift.
pub fn re_retract(c: &StiefelPoint) -> Result<StiefelPoint> {
    polar_retract(c, &c.mat)
}

/// Retraction of `c + magnitude·Δ` for a random unit-Frobenius tangent `Δ`.
pub fn perturb_on_manifold_with(
    c: &StiefelPoint,
    magnitude: f64,
    rng: &mut matcore::Rng,
) -> Result<StiefelPoint> {
    if !(magnitude >= 0.0) {
        return Err(Error::Precondition(format!(
            "perturbation magnitude must be >= 0, got {magnitude}"
        )));
    }
    let (r, cols) = c.shape();
    let g = matcore::gaussian(r, cols, rng);
    if magnitude == 0.0 {
        return Ok(c.clone());
    }
    let t = project_tangent(c, &g)?.mat;
    let norm = t.norm();
    // St(m, m) with m = 1 has a zero-dimensional tangent space.
    if norm < 1e-300 {
        return Ok(c.clone());
    }
    let step = &c.mat + t * (magnitude / norm);
    polar_retract(c, &step)
}

pub fn perturb_on_manifold(c: &StiefelPoint, magnitude: f64, seed: u64) -> Result<StiefelPoint> {
    perturb_on_manifold_with(c, magnitude, &mut matcore::rng_from_seed(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::{gaussian, random_orthonormal, rng_from_seed};

    fn col_point(m: usize, n: usize, seed: u64) -> StiefelPoint {
        StiefelPoint::new(random_orthonormal(m, n, seed).unwrap(), Orientation::Column).unwrap()
    }

    #[test]
    fn tangent_vector_is_unchanged() {
        let c = StiefelPoint::new(Matrix::from_column_slice(2, 1, &[1.0, 0.0]), Orientation::Column)
            .unwrap();
        let b = Matrix::from_column_slice(2, 1, &[0.0, 1.0]);
        assert_eq!(project_tangent(&c, &b).unwrap().mat, b);
    }

    #[test]
    fn base_point_projects_to_zero_tangent() {
        let c = col_point(5, 3, 1);
        let t = project_tangent(&c, c.mat()).unwrap();
        assert!(t.mat.amax() < 1e-14);
        let n = project_normal(&c, c.mat()).unwrap();
        assert!((n - c.mat()).amax() < 1e-14);
    }

    #[test]
    fn random_projection_matches_formula_and_is_tangent() {
        let c = col_point(5, 3, 2);
        let b = gaussian(5, 3, &mut rng_from_seed(3));
        let t = project_tangent(&c, &b).unwrap();
        let cm = c.mat();
        let direct = &b - cm * (b.transpose() * cm + cm.transpose() * &b) * 0.5;
        assert!((&t.mat - direct).amax() < 1e-14);
        assert!(t.tangency_defect() < 1e-12);
        let n = project_normal(&c, &b).unwrap();
        assert!(matcore::frob_inner(&n, &t.mat).abs() < 1e-10);
        assert!((b.norm_squared() - t.mat.norm_squared() - n.norm_squared()).abs() < 1e-10);
        let tn = project_normal(&c, &t.mat).unwrap();
        assert!(tn.amax() < 1e-12);
    }

    #[test]
    fn row_orientation_is_transposed_column() {
        let q = random_orthonormal(6, 4, 5).unwrap();
        let row = StiefelPoint::new(q.transpose(), Orientation::Row).unwrap();
        let col = StiefelPoint::new(q.clone(), Orientation::Column).unwrap();
        let b = gaussian(4, 6, &mut rng_from_seed(6));
        let tr = project_tangent(&row, &b).unwrap().mat;
        let tc = project_tangent(&col, &b.transpose()).unwrap().mat;
        assert_eq!(tr, tc.transpose());
        let cand = q.transpose() + &b * 0.1;
        let rr = polar_retract(&row, &cand).unwrap();
        let rc = polar_retract(&col, &cand.transpose()).unwrap();
        assert_eq!(rr.mat().clone(), rc.mat().transpose());
    }

    #[test]
    fn retraction_fixed_point_and_scale_invariance() {
        let c = col_point(5, 3, 7);
        let r = polar_retract(&c, c.mat()).unwrap();
        assert!((r.mat() - c.mat()).amax() < 1e-12);
        let r2 = polar_retract(&c, &(c.mat() * 2.0)).unwrap();
        assert!((r2.mat() - c.mat()).amax() < 1e-12);
    }

    #[test]
    fn rank_deficient_candidate_is_rejected() {
        let c = col_point(3, 2, 8);
        let mut bad = c.mat().clone();
        let first = bad.column(0).clone_owned();
        bad.set_column(1, &first);
        assert!(matches!(
            polar_retract(&c, &bad),
            Err(Error::RetractionSingular { .. })
        ));
    }

    #[test]
    fn perturbation_behaviour() {
        let c = col_point(6, 3, 9);
        assert_eq!(perturb_on_manifold(&c, 0.0, 1).unwrap(), c);
        for &m in &[1e-3, 1e-1] {
            let p = perturb_on_manifold(&c, m, 4).unwrap();
            assert!(p.defect() < 1e-10);
            assert!((p.mat() - c.mat()).norm() <= 2.0 * m);
        }
        assert_eq!(
            perturb_on_manifold(&c, 0.1, 4).unwrap(),
            perturb_on_manifold(&c, 0.1, 4).unwrap()
        );
    }

    #[test]
    fn infeasible_orientation_rejected() {
        assert!(StiefelPoint::new_unchecked(Matrix::zeros(2, 3), Orientation::Column).is_err());
        assert!(StiefelPoint::new(Matrix::zeros(3, 2), Orientation::Column).is_err());
    }
}
