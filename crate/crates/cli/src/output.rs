//! Artifact writers: CSV tables, checkpoints and run manifests.
//!
//! Files carry no timestamps and floats print in shortest-roundtrip form, so
//! re-running a command with the same seed and config reproduces every
//! artifact byte for byte. Metric and experiment tables encode a hash of the
//! resolved config in their file names.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use sfd_core::error::Result;
use sfd_core::eval::SweepPoint;
use sfd_core::solver::SolveTrace;

pub const MANIFEST_VERSION: u32 = 1;

/// First eight hex characters of the SHA-256 of the resolved config JSON.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let text = serde_json::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(text.as_bytes());
    digest[..4].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_file(dir: &Path, name: &str, content: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, content)?;
    Ok(path)
}

/// `chain_id,x_0..x_{d-1}` rows.
pub fn samples_csv(samples: &[f64], dim: usize) -> String {
    let mut out = String::from("chain_id");
    for j in 0..dim {
        let _ = write!(out, ",x_{j}");
    }
    out.push('\n');
    for (chain, chunk) in samples.chunks_exact(dim).enumerate() {
        let _ = write!(out, "{chain}");
        for v in chunk {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// `chain_id,step_index,t,x_0..x_{d-1}` rows, step 0 at the highest noise.
pub fn trace_csv(trace: &SolveTrace) -> String {
    let mut out = String::from("chain_id,step_index,t");
    for j in 0..trace.dim {
        let _ = write!(out, ",x_{j}");
    }
    out.push('\n');
    for chain in 0..trace.n_chains {
        for (step, (t, batch)) in trace.points.iter().enumerate() {
            let _ = write!(out, "{chain},{step},{t}");
            for j in 0..trace.dim {
                let _ = write!(out, ",{}", batch[chain * trace.dim + j]);
            }
            out.push('\n');
        }
    }
    out
}

/// `steps,nfe,sliced_w` rows.
pub fn metrics_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("steps,nfe,sliced_w\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.steps, p.nfe, p.sliced_w);
    }
    out
}

/// Projected trajectories: `chain_id,step_index,t,p_0..`.
pub fn projection_csv(proj: &sfd_core::eval::ProjectedTraces) -> String {
    let mut out = String::from("chain_id,step_index,t");
    for j in 0..proj.components {
        let _ = write!(out, ",p_{j}");
    }
    out.push('\n');
    for (chain, steps) in proj.chains.iter().enumerate() {
        for (step, coords) in steps.iter().enumerate() {
            let _ = write!(out, "{chain},{step},{}", proj.times[step]);
            for v in coords {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    out
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub version: u32,
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

impl Manifest {
    pub fn new<T: Serialize>(command: &str, seed: u64, config: &T) -> Self {
        Manifest {
            version: MANIFEST_VERSION,
            command: command.to_string(),
            seed,
            config: serde_json::to_value(config).expect("config serializes"),
            outputs: Vec::new(),
            extra: serde_json::Value::Null,
        }
    }

    pub fn record(&mut self, path: &Path) {
        self.outputs
            .push(path.file_name().unwrap().to_string_lossy().into_owned());
    }

    pub fn with_extra(&mut self, value: serde_json::Value) {
        self.extra = value;
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_file(dir, "manifest.json", &text)
    }
}
