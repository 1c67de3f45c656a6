//! Experiment front end: configuration, the synthetic and classification
//! pipelines, certification suites, trace files and reports.

pub mod certify;
pub mod config;
pub mod experiments;
pub mod fit;
pub mod mnist;
pub mod report;
pub mod traces;

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub use certify::{run_certify, CertRecord, CertSummary};
pub use config::{ExperimentConfig, ExperimentKind, TraceFormat};
pub use experiments::{run_mnist, run_synth_sweep, run_synth_theorem};
pub use mnist::{load_mnist_idx, MnistDataset};
pub use traces::{emit_traces, read_traces, TraceRow};

/// Independent stream `stream` derived from `seed` (splitmix64 finaliser).
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-preserving parallel map on a pool of `workers` threads (0 = all
/// cores). Results come back in input order whatever the scheduling.
pub fn par_map<T, R, F>(workers: usize, items: Vec<T>, f: F) -> Result<Vec<R>>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| items.into_par_iter().map(f).collect()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Trace(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Trace(format!("{}: {e}", path.display())))
}
