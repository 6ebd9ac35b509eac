// SPDX-License-Identifier: MIT OR Apache-2.0

//! `run_all`: every stage in order, skipping outputs that already exist.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::io::{read_json, write_json};
use super::layout::BASE_TAG;
use super::stages::{
    cmd_eval, cmd_extract, cmd_forge, cmd_gen, cmd_probe, cmd_select, cmd_table, cmd_train, forged_path, table_methods,
    Run,
};
use crate::error::{Error, Result};
use crate::nanolm::FORMAT_VERSION;
use crate::taskgen::Split;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub versions: BTreeMap<String, String>,
    pub artifacts: Vec<ArtifactEntry>,
    /// Wall-clock seconds per stage in this invocation; 0 when skipped.
    pub timing: BTreeMap<String, f64>,
}

impl RunManifest {
    /// Everything except timing.
    pub fn same_outputs(&self, other: &RunManifest) -> bool {
        self.config_hash == other.config_hash && self.versions == other.versions && self.artifacts == other.artifacts
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Every file under the output directory except the manifest itself.
pub fn inventory(root: &Path) -> Result<Vec<ArtifactEntry>> {
    let mut files = Vec::new();
    collect_files(root, &mut files)?;
    let mut out = Vec::new();
    for path in files {
        let rel: Vec<String> = path
            .strip_prefix(root)
            .expect("collected under root")
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect();
        let rel = rel.join("/");
        if rel == "manifest.json" || rel.ends_with(".tmp") {
            continue;
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        out.push(ArtifactEntry {
            path: rel,
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

struct Stages<'a> {
    run: &'a Run,
    timing: BTreeMap<String, f64>,
}

impl Stages<'_> {
    fn stage(&mut self, name: &str, f: impl FnOnce(&Run) -> Result<()>) -> Result<()> {
        let t0 = Instant::now();
        f(self.run).map_err(|e| Error::Stage {
            stage: name.to_string(),
            source: Box::new(e),
        })?;
        *self.timing.entry(name.to_string()).or_default() += t0.elapsed().as_secs_f64();
        Ok(())
    }
}

/// Runs gen, train, select, forge, extract, probe, eval and table, skipping
/// any artifact already on disk. Refuses a directory made by another config.
pub fn run_all(run: &Run) -> Result<RunManifest> {
    let l = &run.layout;
    let c = &run.config;
    if l.config().exists() {
        let stored: ExperimentConfig = read_json(&l.config())?;
        if stored.hash()? != c.hash()? {
            return Err(Error::Config(format!(
                "{} holds a run with a different config",
                l.root().display()
            )));
        }
    }
    let mut s = Stages {
        run,
        timing: ["gen", "train", "select", "forge", "extract", "probe", "eval", "table"]
            .into_iter()
            .map(|k| (k.to_string(), 0.0))
            .collect(),
    };

    if Split::ALL.iter().any(|&sp| !l.split(sp).exists()) || !l.config().exists() {
        log::info!("gen");
        s.stage("gen", cmd_gen)?;
    }
    if !l.checkpoint(BASE_TAG).exists() {
        log::info!("train");
        s.stage("train", cmd_train)?;
    }

    let mut base_splits = vec![Split::EasyCal, c.variance_split, Split::HardVal];
    base_splits.extend(&c.eval_splits);
    base_splits.sort();
    base_splits.dedup();
    let missing = |tag: &str, sp: Split| c.positions.iter().any(|&p| !l.records(tag, sp, p).exists());
    for &sp in &base_splits {
        if missing(BASE_TAG, sp) {
            log::info!("extract base/{sp}");
            s.stage("extract", |r| cmd_extract(r, BASE_TAG, sp, None))?;
        }
    }

    if !c.methods.dropout_rates.is_empty() && !l.selection().exists() {
        log::info!("select");
        s.stage("select", |r| cmd_select(r).map(|_| ()))?;
    }

    let methods = table_methods(run)?;
    for m in methods.iter().filter(|m| m.tag != BASE_TAG) {
        if !forged_path(run, &m.tag)?.exists() {
            log::info!("forge {}", m.tag);
            s.stage("forge", |r| cmd_forge(r, &m.tag))?;
        }
        let mut splits = vec![Split::EasyCal];
        splits.extend(&c.eval_splits);
        for sp in splits {
            if missing(&m.tag, sp) {
                log::info!("extract {}/{sp}", m.tag);
                s.stage("extract", |r| cmd_extract(r, &m.tag, sp, None))?;
            }
        }
    }

    for m in &methods {
        for &pos in &c.positions {
            if !l.probe(&m.tag, pos).exists() {
                s.stage("probe", |r| cmd_probe(r, &m.tag, pos))?;
            }
            for &sp in &c.eval_splits {
                if !l.report(&m.tag, sp, pos).exists() || !l.reliability(&m.tag, sp, pos).exists() {
                    s.stage("eval", |r| cmd_eval(r, &m.tag, sp, pos).map(|_| ()))?;
                }
            }
        }
    }
    if !l.table().exists() || !l.agreement().exists() {
        s.stage("table", cmd_table)?;
    }

    let manifest = RunManifest {
        config_hash: c.hash()?,
        versions: BTreeMap::from([
            ("aulab".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("checkpoint_format".to_string(), FORMAT_VERSION.to_string()),
        ]),
        artifacts: inventory(l.root())?,
        timing: s.timing,
    };
    write_json(&l.manifest(), &manifest)?;
    Ok(manifest)
}
