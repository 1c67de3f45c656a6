//! Least-squares fit of `log v(t) = a + b·t` for geometric decay rates.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLinearFit {
    pub intercept: f64,
    pub slope: f64,
    pub r_squared: f64,
    /// `exp(slope)`, the fitted per-step ratio.
    pub ratio: f64,
    pub points: usize,
}

/// Fits over `(t, values[t])` for the strictly positive values; `None` with
/// fewer than two usable points.
pub fn fit_log_linear(values: &[f64]) -> Option<LogLinearFit> {
    let pts: Vec<(f64, f64)> = values
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 0.0 && v.is_finite())
        .map(|(t, v)| (t as f64, v.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r_squared = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    Some(LogLinearFit {
        intercept,
        slope,
        r_squared,
        ratio: slope.exp(),
        points: pts.len(),
    })
}
