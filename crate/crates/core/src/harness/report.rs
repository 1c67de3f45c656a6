//! Reports built purely from persisted manifests and trace files, so they can
//! be regenerated without re-training.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentKind;
use super::experiments::{MnistCell, MnistManifest, SweepManifest, TheoremManifest, TARGET_REDUCTION};
use super::fit::{fit_log_linear, LogLinearFit};
use super::traces::{read_traces, TraceRow};
use super::{read_json, write_json};
use crate::error::{Error, Result};
use crate::network::Activation;
use crate::optim::Algorithm;

pub const MANIFEST: &str = "manifest.json";
pub const REPORT: &str = "report.json";
/// Smallest acceptable R² of the log-linear fit.
pub const MIN_R_SQUARED: f64 = 0.99;

fn load_rows(dir: &Path, name: &str) -> Result<Vec<TraceRow>> {
    read_traces(&dir.join(name))
}

/// Iterations `t ≥ 1` with `d_t > rate·d_{t−1} + 1e-12·d_0`.
pub fn count_violations(dist: &[f64], rate: f64) -> usize {
    let Some(&d0) = dist.first() else { return 0 };
    dist.windows(2).filter(|w| w[1] > rate * w[0] + 1e-12 * d0).count()
}

/// First iteration with `d_t ≤ fraction·d_0`.
pub fn first_below(dist: &[f64], fraction: f64) -> Option<usize> {
    let d0 = *dist.first()?;
    dist.iter().position(|&d| d <= fraction * d0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremSeedReport {
    pub seed: u64,
    pub theorem_rate: f64,
    pub violations: usize,
    pub fit: Option<LogLinearFit>,
    /// Fitted per-step ratio is at most the theorem factor.
    pub fit_within_rate: bool,
    pub iters_to_target: Option<usize>,
    pub horizon: usize,
    pub iter_cap: usize,
    pub reached_within_horizon: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub seeds: Vec<TheoremSeedReport>,
    pub total_violations: usize,
    pub min_r_squared: Option<f64>,
    pub all_fits_within_rate: bool,
    pub all_reached: bool,
    pub pass: bool,
}

pub fn theorem_report(dir: &Path) -> Result<TheoremReport> {
    let manifest: TheoremManifest = read_json(&dir.join(MANIFEST))?;
    let mut seeds = Vec::new();
    for cell in &manifest.cells {
        let rows = load_rows(dir, &cell.trace)?;
        let dist: Vec<f64> = rows.iter().filter_map(|r| r.dist_sq).collect();
        let fit = fit_log_linear(&dist);
        let iters = first_below(&dist, TARGET_REDUCTION);
        seeds.push(TheoremSeedReport {
            seed: cell.seed,
            theorem_rate: cell.theorem_rate,
            violations: count_violations(&dist, cell.theorem_rate),
            fit_within_rate: fit.is_some_and(|f| f.ratio <= cell.theorem_rate),
            fit,
            iters_to_target: iters,
            horizon: cell.horizon,
            iter_cap: cell.iter_cap,
            reached_within_horizon: iters.is_some_and(|t| t <= cell.horizon),
        });
    }
    let total_violations = seeds.iter().map(|s| s.violations).sum();
    let min_r_squared = seeds
        .iter()
        .map(|s| s.fit.map_or(f64::NEG_INFINITY, |f| f.r_squared))
        .reduce(f64::min);
    let all_fits_within_rate = seeds.iter().all(|s| s.fit_within_rate);
    let all_reached = seeds.iter().all(|s| s.reached_within_horizon);
    Ok(TheoremReport {
        pass: !seeds.is_empty()
            && total_violations == 0
            && min_r_squared.is_some_and(|r| r >= MIN_R_SQUARED)
            && all_fits_within_rate
            && all_reached,
        seeds,
        total_violations,
        min_r_squared,
        all_fits_within_rate,
        all_reached,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub depth: usize,
    pub kappa: f64,
    /// Mean iterations to ε over the seeds that reached it.
    pub mean_iters: Option<f64>,
    pub failed_seeds: Vec<u64>,
    /// `mean_iters / (N² κ² log(1/ε))`.
    pub ratio: Option<f64>,
    /// `ratio` divided by its value at the smallest depth.
    pub normalized_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    pub monotone_in_depth: bool,
    pub within_band: bool,
    /// Iterations at `(pair_depth, κ)` and `(pair_depth, 2κ)`.
    pub kappa_pair: Option<(Option<f64>, Option<f64>)>,
    pub kappa_doubling_slower: Option<bool>,
    pub pass: bool,
}

pub fn sweep_report(dir: &Path) -> Result<SweepReport> {
    let manifest: SweepManifest = read_json(&dir.join(MANIFEST))?;
    let log_inv_eps = (1.0 / manifest.epsilon).ln();
    let mut keys: Vec<(usize, f64)> = Vec::new();
    for c in &manifest.cells {
        if !keys.iter().any(|&(n, k)| n == c.depth && k == c.kappa) {
            keys.push((c.depth, c.kappa));
        }
    }
    let mut points = Vec::new();
    for (depth, kappa) in keys {
        let mut iters = Vec::new();
        let mut failed = Vec::new();
        for c in manifest.cells.iter().filter(|c| c.depth == depth && c.kappa == kappa) {
            let rows = load_rows(dir, &c.trace)?;
            let dist: Vec<f64> = rows.iter().filter_map(|r| r.dist_sq).collect();
            match (c.error.is_none(), first_below(&dist, manifest.epsilon)) {
                (true, Some(t)) => iters.push(t as f64),
                _ => failed.push(c.seed),
            }
        }
        let mean_iters = (failed.is_empty() && !iters.is_empty()).then(|| iters.iter().sum::<f64>() / iters.len() as f64);
        let n = depth as f64;
        points.push(SweepPoint {
            depth,
            kappa,
            ratio: mean_iters.map(|t| t / (n * n * kappa * kappa * log_inv_eps)),
            mean_iters,
            failed_seeds: failed,
            normalized_ratio: None,
        });
    }
    let mut main: Vec<&mut SweepPoint> = points.iter_mut().filter(|p| p.kappa == manifest.kappa).collect();
    main.sort_by_key(|p| p.depth);
    let base = main.first().and_then(|p| p.ratio);
    for p in main.iter_mut() {
        p.normalized_ratio = match (p.ratio, base) {
            (Some(r), Some(b)) if b > 0.0 => Some(r / b),
            _ => None,
        };
    }
    let monotone_in_depth = main.iter().all(|p| p.mean_iters.is_some())
        && main.windows(2).all(|w| w[0].mean_iters <= w[1].mean_iters);
    let within_band = main.iter().all(|p| {
        p.normalized_ratio
            .is_some_and(|r| r <= manifest.band && r >= 1.0 / manifest.band)
    });
    let find = |n: usize, k: f64| points.iter().find(|p| p.depth == n && p.kappa == k).and_then(|p| p.mean_iters);
    let kappa_pair = manifest
        .pair_depth
        .map(|n| (find(n, manifest.kappa), find(n, 2.0 * manifest.kappa)));
    let kappa_doubling_slower = kappa_pair.map(|pair| matches!(pair, (Some(a), Some(b)) if b > a));
    Ok(SweepReport {
        pass: monotone_in_depth && within_band && kappa_doubling_slower.unwrap_or(true),
        points,
        monotone_in_depth,
        within_band,
        kappa_pair,
        kappa_doubling_slower,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellBest {
    pub algorithm: Algorithm,
    pub activation: Activation,
    pub depth: usize,
    pub mu: f64,
    pub gamma: Option<f64>,
    pub final_loss: f64,
    pub trace: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub claim: String,
    pub faster: String,
    pub slower: String,
    pub threshold: f64,
    pub iters_faster: Option<usize>,
    pub iters_slower: Option<usize>,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MnistReport {
    pub source: String,
    pub samples: usize,
    pub best: Vec<CellBest>,
    pub comparisons: Vec<Comparison>,
    pub pass: bool,
}

fn cell_label(b: &CellBest) -> String {
    format!("{:?}({:?}, N={})", b.algorithm, b.activation, b.depth).to_lowercase()
}

fn iters_to(losses: &[f64], threshold: f64) -> Option<usize> {
    losses.iter().position(|&l| l <= threshold)
}

pub fn mnist_report(dir: &Path) -> Result<MnistReport> {
    let manifest: MnistManifest = read_json(&dir.join(MANIFEST))?;
    let mut groups: Vec<(Algorithm, Activation, usize)> = Vec::new();
    for c in &manifest.cells {
        let key = (c.algorithm, c.activation, c.depth);
        if !groups.contains(&key) {
            groups.push(key);
        }
    }
    let mut best: Vec<(CellBest, Vec<f64>)> = Vec::new();
    for key in groups {
        let mut chosen: Option<(CellBest, Vec<f64>)> = None;
        let cells: Vec<&MnistCell> = manifest
            .cells
            .iter()
            .filter(|c| (c.algorithm, c.activation, c.depth) == key && !c.diverged)
            .collect();
        for c in cells {
            let losses: Vec<f64> = load_rows(dir, &c.trace)?.iter().map(|r| r.loss).collect();
            let Some(&last) = losses.last() else { continue };
            if chosen.as_ref().is_none_or(|(b, _)| last < b.final_loss) {
                chosen = Some((
                    CellBest {
                        algorithm: c.algorithm,
                        activation: c.activation,
                        depth: c.depth,
                        mu: c.mu,
                        gamma: c.gamma,
                        final_loss: last,
                        trace: c.trace.clone(),
                    },
                    losses,
                ));
            }
        }
        if let Some(b) = chosen {
            best.push(b);
        }
    }
    let find = |alg: Algorithm, act: Activation, n: usize| {
        best.iter()
            .find(|(b, _)| b.algorithm == alg && b.activation == act && b.depth == n)
    };
    let compare = |claim: &str, fast: &(CellBest, Vec<f64>), slow: &(CellBest, Vec<f64>)| {
        let threshold = manifest.threshold_factor * fast.0.final_loss.max(slow.0.final_loss);
        let a = iters_to(&fast.1, threshold);
        let b = iters_to(&slow.1, threshold);
        Comparison {
            claim: claim.to_string(),
            faster: cell_label(&fast.0),
            slower: cell_label(&slow.0),
            threshold,
            iters_faster: a,
            iters_slower: b,
            holds: match (a, b) {
                (Some(a), Some(b)) => a < b,
                (Some(_), None) => true,
                _ => false,
            },
        }
    };
    let mut depths: Vec<usize> = best.iter().map(|(b, _)| b.depth).collect();
    depths.sort_unstable();
    depths.dedup();
    let mut comparisons = Vec::new();
    for &n in &depths {
        if let (Some(r), Some(g)) = (
            find(Algorithm::Rgd, Activation::Linear, n),
            find(Algorithm::Gd, Activation::Linear, n),
        ) {
            comparisons.push(compare("rgd beats gd (linear)", r, g));
        }
    }
    for alg in [Algorithm::Rgd, Algorithm::Gd] {
        for act in [Activation::Linear, Activation::Relu] {
            for w in depths.windows(2) {
                if let (Some(a), Some(b)) = (find(alg, act, w[0]), find(alg, act, w[1])) {
                    comparisons.push(compare("shallower converges faster", a, b));
                }
            }
        }
        for &n in &depths {
            if let (Some(l), Some(r)) = (find(alg, Activation::Linear, n), find(alg, Activation::Relu, n)) {
                comparisons.push(compare("linear converges faster than relu", l, r));
            }
        }
    }
    Ok(MnistReport {
        source: manifest.source.clone(),
        samples: manifest.samples,
        pass: !comparisons.is_empty() && comparisons.iter().all(|c| c.holds),
        best: best.into_iter().map(|(b, _)| b).collect(),
        comparisons,
    })
}

/// Regenerates `report.json` for every experiment directory under `out_dir`
/// that has a manifest. Returns the directories processed.
pub fn rebuild_reports(out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut done = Vec::new();
    for kind in [ExperimentKind::SynthTheorem, ExperimentKind::SynthSweep, ExperimentKind::Mnist] {
        let dir = out_dir.join(kind.dir_name());
        if !dir.join(MANIFEST).exists() {
            continue;
        }
        match kind {
            ExperimentKind::SynthTheorem => write_json(&dir.join(REPORT), &theorem_report(&dir)?)?,
            ExperimentKind::SynthSweep => write_json(&dir.join(REPORT), &sweep_report(&dir)?)?,
            _ => write_json(&dir.join(REPORT), &mnist_report(&dir)?)?,
        }
        done.push(dir);
    }
    if done.is_empty() {
        return Err(Error::Config(format!(
            "no experiment manifests found under {}",
            out_dir.display()
        )));
    }
    Ok(done)
}
