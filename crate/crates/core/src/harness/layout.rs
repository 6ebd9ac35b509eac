// SPDX-License-Identifier: MIT OR Apache-2.0

//! Where every artifact lives under the output directory.

use std::path::{Path, PathBuf};

use crate::probe::Position;
use crate::taskgen::Split;

pub const BASE_TAG: &str = "base";

#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn split(&self, split: Split) -> PathBuf {
        self.root.join("data").join(format!("{split}.jsonl"))
    }

    pub fn model_dir(&self, tag: &str) -> PathBuf {
        self.root.join("models").join(tag)
    }

    /// Checkpoint manifest; its presence marks a finished checkpoint.
    pub fn checkpoint(&self, tag: &str) -> PathBuf {
        self.model_dir(tag).join("manifest.json")
    }

    pub fn weights(&self, tag: &str) -> PathBuf {
        self.model_dir(tag).join("weights.bin")
    }

    pub fn loss_trace(&self) -> PathBuf {
        self.model_dir(BASE_TAG).join("loss.jsonl")
    }

    pub fn unlearn_trace(&self, tag: &str) -> PathBuf {
        self.model_dir(tag).join("trace.jsonl")
    }

    /// Dropout variants are a spec over the base weights, never weights.
    pub fn variant_spec(&self, tag: &str) -> PathBuf {
        self.model_dir(tag).join("variant.json")
    }

    pub fn records(&self, tag: &str, split: Split, position: Position) -> PathBuf {
        self.root
            .join("records")
            .join(tag)
            .join(format!("{split}.{position}.jsonl"))
    }

    pub fn sweep_csv(&self, position: Position) -> PathBuf {
        self.root.join("select").join(format!("sweep.{position}.csv"))
    }

    pub fn selection(&self) -> PathBuf {
        self.root.join("select").join("selected.json")
    }

    pub fn probe(&self, tag: &str, position: Position) -> PathBuf {
        self.root.join("probes").join(format!("{tag}.{position}.json"))
    }

    pub fn report(&self, tag: &str, split: Split, position: Position) -> PathBuf {
        self.root
            .join("reports")
            .join(tag)
            .join(format!("{split}.{position}.json"))
    }

    pub fn reliability(&self, tag: &str, split: Split, position: Position) -> PathBuf {
        self.root
            .join("reports")
            .join(tag)
            .join(format!("{split}.{position}.reliability.csv"))
    }

    pub fn table(&self) -> PathBuf {
        self.root.join("table.csv")
    }

    pub fn agreement(&self) -> PathBuf {
        self.root.join("agreement.csv")
    }
}
