// SPDX-License-Identifier: MIT OR Apache-2.0

//! The file-based experiment pipeline: gen, train, select, forge, extract,
//! probe, eval, table. Every stage is a function of the config and the files
//! earlier stages wrote, so any stage can be rerun on its own.

pub mod config;
pub mod io;
pub mod layout;
pub mod run;
pub mod stages;

pub use config::{ExperimentConfig, MethodGrid};
pub use layout::{Layout, BASE_TAG};
pub use run::{run_all, ArtifactEntry, RunManifest};
pub use stages::{
    cmd_eval, cmd_extract, cmd_forge, cmd_gen, cmd_probe, cmd_select, cmd_table, cmd_train, load_base, read_selection,
    resolve, table_methods, ModelRef, Run, Selection, SweepPoint, TableMethod, VariantSpec,
};
