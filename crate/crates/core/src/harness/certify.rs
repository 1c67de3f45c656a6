//! Sampling certification suites. Every sample becomes one JSON line with
//! its slacks (used fraction of the allowed budget, ≤ 1 passes) and flags;
//! a summary with the worst slack closes the run.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ExperimentKind};
use super::experiments::{calibrate, prepare_dir};
use super::{par_map, sub_seed, write_json};
use crate::error::{Error, Result};
use crate::losses::LossModel;
use crate::matcore::{self, Matrix};
use crate::metrics;
use crate::network::{self, Activation, InitScheme, NetworkShape, TeacherInstance};
use crate::stiefel::{self, Orientation, StiefelPoint};

pub const STREAM: &str = "stream.jsonl";
pub const SUMMARY: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertRecord {
    pub suite: String,
    pub seed: u64,
    pub depth: usize,
    pub dims: Vec<usize>,
    pub slacks: BTreeMap<String, f64>,
    pub flags: BTreeMap<String, bool>,
    pub pass: bool,
}

impl CertRecord {
    fn new(suite: &str, seed: u64, depth: usize, dims: Vec<usize>) -> Self {
        CertRecord {
            suite: suite.to_string(),
            seed,
            depth,
            dims,
            slacks: BTreeMap::new(),
            flags: BTreeMap::new(),
            pass: true,
        }
    }

    fn slack(&mut self, name: &str, v: f64) {
        self.slacks.insert(name.to_string(), v);
    }

    fn flag(&mut self, name: &str, ok: bool) {
        self.flags.insert(name.to_string(), ok);
        self.pass &= ok;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertSummary {
    pub suite: String,
    pub total: usize,
    pub passed: usize,
    /// Largest value of every slack over the suite.
    pub worst_slack: BTreeMap<String, f64>,
    pub pass: bool,
}

pub fn summarize(suite: &str, records: &[CertRecord]) -> CertSummary {
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    for r in records {
        for (k, &v) in &r.slacks {
            let e = worst.entry(k.clone()).or_insert(f64::NEG_INFINITY);
            // NaN slacks must surface as the worst value.
            if v.is_nan() || v > *e {
                *e = v;
            }
        }
    }
    let passed = records.iter().filter(|r| r.pass).count();
    CertSummary {
        suite: suite.to_string(),
        total: records.len(),
        passed,
        worst_slack: worst,
        pass: !records.is_empty() && passed == records.len(),
    }
}

/// Widths `d_0 ≥ d_1 = … = d_N` drawn up to `max_dim`.
fn random_dims(depth: usize, max_dim: usize, rng: &mut matcore::Rng) -> Vec<usize> {
    let width = rng.random_range(2..=max_dim.clamp(2, 6));
    let input = rng.random_range(width..=max_dim.max(width));
    let mut dims = vec![input];
    dims.extend(std::iter::repeat_n(width, depth));
    dims
}

fn teacher_for(depth: usize, max_dim: usize, seed: u64) -> Result<(TeacherInstance, matcore::Rng)> {
    let mut rng = matcore::rng_from_seed(seed);
    let dims = random_dims(depth, max_dim, &mut rng);
    let shape = NetworkShape::columns(dims.clone(), Activation::Linear)?;
    let inst = network::make_teacher(&shape, dims[0] + rng.random_range(0..=4), sub_seed(seed, 1))?;
    Ok((inst, rng))
}

pub fn lemma1_sample(depth: usize, max_dim: usize, seed: u64) -> Result<CertRecord> {
    let (inst, mut rng) = teacher_for(depth, max_dim, seed)?;
    let mut magnitude = 10f64.powf(rng.random_range(-3.0..-0.3));
    let mut rec = CertRecord::new("lemma1", seed, depth, inst.teacher.shape().dims().to_vec());
    loop {
        let student = network::init_student(
            inst.teacher.shape(),
            InitScheme::NearTeacher {
                teacher: &inst.teacher,
                magnitude,
            },
            sub_seed(seed, 2),
        )?;
        match metrics::check_lemma1(&student, &inst) {
            Ok(chk) => {
                rec.slack("lower_usage", chk.lower_ratio.map_or(0.0, |r| 1.0 / r));
                rec.slack("upper_usage", chk.upper_ratio.unwrap_or(0.0));
                rec.slack("dist_sq", chk.dist_sq);
                rec.flag("lower_bound", chk.lower_ok);
                rec.flag("upper_bound", chk.upper_ok);
                return Ok(rec);
            }
            // Shrink until the student satisfies the norm precondition.
            Err(Error::Precondition(_)) if magnitude > 1e-8 => magnitude *= 0.5,
            Err(e) => return Err(e),
        }
    }
}

pub fn lemma2_sample(depth: usize, max_dim: usize, seed: u64) -> Result<CertRecord> {
    let (inst, mut rng) = teacher_for(depth, max_dim, seed)?;
    let model = LossModel::scaled_mse();
    let radius = metrics::basin_radius(&inst, &model)?;
    let cal = calibrate(&inst, radius, sub_seed(seed, 2))?;
    let fraction = rng.random_range(0.05..=1.0);
    let student = network::init_student(
        inst.teacher.shape(),
        InitScheme::NearTeacher {
            teacher: &inst.teacher,
            magnitude: fraction * cal.magnitude,
        },
        sub_seed(seed, 2),
    )?;
    let r = metrics::check_regularity(&student, &inst, &model)?;
    let mut rec = CertRecord::new("lemma2", seed, depth, inst.teacher.shape().dims().to_vec());
    rec.slack("regularity_usage", if r.lhs > 0.0 { r.rhs / r.lhs } else { f64::INFINITY });
    rec.slack("h_usage", r.h_slack().unwrap_or(0.0));
    rec.slack("identity_gap", r.identity_gap.abs() / r.lhs.abs().max(1e-300));
    rec.slack("dist_usage", r.dist_sq / radius);
    rec.flag("regularity", r.satisfied);
    rec.flag("h_bound", r.residual_h_norm_sq <= r.h_bound * (1.0 + 1e-9) + 1e-30);
    rec.flag("in_region", r.in_region);
    rec.flag("gradient_bounds", r.gradient_bounds_ok);
    Ok(rec)
}

/// Tolerances of the geometry suite.
pub const TANGENT_TOL: f64 = 1e-12;
pub const PYTHAGORAS_TOL: f64 = 1e-10;
pub const RETRACTION_TOL: f64 = 1e-10;
pub const TWO_ROUTE_TOL: f64 = 1e-9;

/// Polar factor through the inverse square root of the Gram matrix, the
/// route independent of the SVD one.
pub fn polar_by_gram(tall: &Matrix) -> Result<Matrix> {
    let gram = tall.transpose() * tall;
    Ok(tall * matcore::inv_sqrt_spd(&gram)?)
}

fn frame(m: &Matrix, o: Orientation) -> Matrix {
    match o {
        Orientation::Column => m.clone(),
        Orientation::Row => m.transpose(),
    }
}

pub fn geometry_sample(max_dim: usize, seed: u64) -> Result<CertRecord> {
    let mut rng = matcore::rng_from_seed(seed);
    let m = rng.random_range(1..=max_dim);
    let n = rng.random_range(1..=m);
    let o = if rng.random_bool(0.5) { Orientation::Column } else { Orientation::Row };
    let store = |q: Matrix| match o {
        Orientation::Column => q,
        Orientation::Row => q.transpose(),
    };
    let c = StiefelPoint::new(store(matcore::random_orthonormal_with(m, n, &mut rng)?), o)?;
    let other = StiefelPoint::new(store(matcore::random_orthonormal_with(m, n, &mut rng)?), o)?;
    let (r, k) = c.shape();
    let b = matcore::gaussian(r, k, &mut rng);

    let t = stiefel::project_tangent(&c, &b)?;
    let tt = stiefel::project_tangent(&c, &t.mat)?;
    let nrm = stiefel::project_normal(&c, &b)?;
    let tangency = t.tangency_defect();
    let idempotence = (&tt.mat - &t.mat).norm();
    let pythagoras = (b.norm_squared() - t.mat.norm_squared() - nrm.norm_squared()).abs();

    // A retraction candidate one tangent step away from `c`.
    let step = rng.random_range(1e-3..2.0) / t.mat.norm().max(1e-300);
    let cand = c.mat() + &t.mat * step;
    let ret = stiefel::polar_retract(&c, &cand)?;
    let orth = ret.defect();
    let gram_route = frame(&cand, o);
    let two_route = (frame(ret.mat(), o) - polar_by_gram(&gram_route)?).norm();
    let mut nonexpansive_excess = f64::NEG_INFINITY;
    for target in [c.mat(), other.mat()] {
        let after = (ret.mat() - target).norm();
        let before = (&cand - target).norm();
        nonexpansive_excess = nonexpansive_excess.max(after - before);
    }

    let mut rec = CertRecord::new("geometry", seed, 0, vec![m, n]);
    rec.slack("tangency", tangency / TANGENT_TOL);
    rec.slack("idempotence", idempotence / TANGENT_TOL);
    rec.slack("pythagoras", pythagoras / PYTHAGORAS_TOL);
    rec.slack("orthonormality", orth / RETRACTION_TOL);
    rec.slack("two_route", two_route / TWO_ROUTE_TOL);
    rec.slack("nonexpansive_excess", nonexpansive_excess);
    rec.flag("tangency", tangency <= TANGENT_TOL);
    rec.flag("idempotence", idempotence <= TANGENT_TOL);
    rec.flag("pythagoras", pythagoras <= PYTHAGORAS_TOL);
    rec.flag("orthonormality", orth <= RETRACTION_TOL);
    rec.flag("two_route", two_route <= TWO_ROUTE_TOL);
    rec.flag("nonexpansive", nonexpansive_excess <= 1e-12);
    Ok(rec)
}

/// Runs the suite selected by `cfg.kind`, writing the JSONL stream and the
/// summary under the experiment directory.
pub fn run_certify(cfg: &ExperimentConfig) -> Result<CertSummary> {
    cfg.validate()?;
    let c = &cfg.certify;
    let base = cfg.seeds[0];
    let (suite, jobs): (&str, Vec<(usize, u64)>) = match cfg.kind {
        ExperimentKind::CertifyLemma1 | ExperimentKind::CertifyLemma2 => (
            if cfg.kind == ExperimentKind::CertifyLemma1 { "lemma1" } else { "lemma2" },
            c.depths
                .iter()
                .flat_map(|&n| (0..c.samples).map(move |k| (n, sub_seed(base, (n * 1_000_000 + k) as u64))))
                .collect(),
        ),
        ExperimentKind::CertifyGeometry => (
            "geometry",
            (0..c.samples).map(|k| (0, sub_seed(base, k as u64))).collect(),
        ),
        other => return Err(Error::Config(format!("{other:?} is not a certification suite"))),
    };
    let kind = cfg.kind;
    let max_dim = c.max_dim;
    let records = par_map(cfg.workers, jobs, |(depth, seed)| match kind {
        ExperimentKind::CertifyLemma1 => lemma1_sample(depth, max_dim, seed),
        ExperimentKind::CertifyLemma2 => lemma2_sample(depth, max_dim, seed),
        _ => geometry_sample(max_dim, seed),
    })?
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let dir = prepare_dir(cfg)?;
    write_stream(&dir.join(STREAM), &records)?;
    let summary = summarize(suite, &records);
    write_json(&dir.join(SUMMARY), &summary)?;
    Ok(summary)
}

pub fn write_stream(path: &Path, records: &[CertRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Trace(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_samples_pass() {
        for seed in 0..50 {
            let r = geometry_sample(10, seed).unwrap();
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn lemma_samples_pass() {
        for seed in 0..5 {
            assert!(lemma1_sample(3, 8, seed).unwrap().pass);
            assert!(lemma2_sample(2, 8, seed).unwrap().pass);
        }
    }

    #[test]
    fn summary_tracks_worst_and_failures() {
        let mut a = CertRecord::new("s", 0, 2, vec![]);
        a.slack("x", 0.5);
        let mut b = CertRecord::new("s", 1, 2, vec![]);
        b.slack("x", 0.7);
        b.flag("ok", false);
        let s = summarize("s", &[a, b]);
        assert_eq!((s.total, s.passed, s.pass), (2, 1, false));
        assert_eq!(s.worst_slack["x"], 0.7);
    }
}
