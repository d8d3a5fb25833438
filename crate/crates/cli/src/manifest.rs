//! Run manifests and content hashing.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;

use neurok_core::io_util;

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const TIMINGS_FILE: &str = "timings.json";

/// Everything needed to replay a command. Holds no wall-clock data so that
/// a seeded re-run writes the same bytes.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Input path as given -> content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output path relative to the output directory -> content hash.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            schema_version: 1,
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            seed,
            config: serde_json::to_value(config)?,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), hash_path(path)?);
        Ok(())
    }

    /// Records every file under `out` (except the manifest and timings).
    pub fn collect_outputs(&mut self, out: &Path) -> Result<()> {
        for (rel, h) in hash_tree(out)? {
            if rel != MANIFEST_FILE && rel != TIMINGS_FILE {
                self.outputs.insert(rel, h);
            }
        }
        Ok(())
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        io_util::write_json(&out.join(MANIFEST_FILE), self)?;
        Ok(())
    }
}

/// Named stage durations, written next to the manifest.
pub struct Timings {
    start: Instant,
    last: Instant,
    stages: Vec<(String, f64)>,
}

impl Timings {
    pub fn start() -> Self {
        let now = Instant::now();
        Self { start: now, last: now, stages: Vec::new() }
    }

    pub fn lap(&mut self, name: &str) {
        let now = Instant::now();
        self.stages.push((name.to_string(), (now - self.last).as_secs_f64()));
        self.last = now;
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        let stages: BTreeMap<_, _> = self.stages.iter().cloned().collect();
        let v = serde_json::json!({ "total_seconds": self.start.elapsed().as_secs_f64(), "stages": stages });
        io_util::write_json(&out.join(TIMINGS_FILE), &v)?;
        Ok(())
    }
}

/// SHA-256 of a file, or of the sorted `(relative path, hash)` listing of a directory.
pub fn hash_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        let listing: String = hash_tree(path)?.into_iter().map(|(p, h)| format!("{p} {h}\n")).collect();
        Ok(io_util::sha256_hex(listing.as_bytes()))
    } else {
        Ok(io_util::file_sha256(path)?)
    }
}

fn hash_tree(root: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).with_context(|| format!("reading {}", dir.display()))? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root)?.to_string_lossy().replace('\\', "/");
                out.insert(rel, io_util::file_sha256(&p)?);
            }
        }
    }
    Ok(out)
}
