// SPDX-License-Identifier: MIT OR Apache-2.0

//! One function per pipeline stage. Each reads its inputs from disk, fails
//! with [`Error::Dependency`] when an earlier stage has not run, and writes
//! its outputs atomically.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::io::{read_json, read_jsonl, write_atomic, write_json, write_jsonl};
use super::layout::{Layout, BASE_TAG};
use crate::error::{Error, Result};
use crate::forge::{
    dropout_variant, unlearn_grad_ascent, unlearn_npo, unlearn_rmu, ModelHandle, SteeringVector, UncertaintyMethod,
    Unlearned,
};
use crate::metrics::{agreement_filter, evaluate, reliability_csv, EvalReport};
use crate::nanolm::{corpus_from_examples, init_model, load_checkpoint, save_checkpoint, train_lm, ModelParams};
use crate::probe::{extract_all, score_dataset, train_probe, HiddenRecord, Position, Probe, Source};
use crate::select::{select, sweep, sweep_csv};
use crate::taskgen::{self, make_splits, Family, McqExample, Split, Vocab};

/// A validated config bound to an output directory.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: ExperimentConfig,
    pub layout: Layout,
    pub vocab: Vocab,
}

impl Run {
    pub fn new(config: ExperimentConfig, out: impl AsRef<Path>) -> Result<Self> {
        config.validate()?;
        let vocab = Vocab::new(&config.corpus.symbols);
        Ok(Run {
            config,
            layout: Layout::new(out.as_ref()),
            vocab,
        })
    }
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Dependency {
            stage: stage.into(),
            path: path.to_path_buf(),
        })
    }
}

/// How a dropout variant is materialized: the base weights plus this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub method: UncertaintyMethod,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub tag: String,
    pub variance: f64,
    pub hard_val_brier: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub position: Position,
    pub variance_split: Split,
    pub tag: String,
    pub method: UncertaintyMethod,
    pub variance: f64,
    pub sweep: Vec<SweepPoint>,
}

/// Anything `--method` can name.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelRef {
    Base,
    Unlearned(UncertaintyMethod),
    Dropout(UncertaintyMethod),
}

/// A row group of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableMethod {
    /// Tag with the hyperparameter stripped, e.g. `grad-ascent`.
    pub name: String,
    pub tag: String,
}

pub fn read_selection(run: &Run) -> Result<Selection> {
    let path = run.layout.selection();
    require(&path, "select")?;
    read_json(&path)
}

fn ablation(run: &Run, sel: &Selection) -> Option<UncertaintyMethod> {
    let UncertaintyMethod::Dropout { rate, .. } = sel.method else {
        return None;
    };
    run.config
        .methods
        .ablation_site
        .map(|site| UncertaintyMethod::Dropout { site, rate })
}

pub fn resolve(run: &Run, tag: &str) -> Result<ModelRef> {
    if tag == BASE_TAG {
        return Ok(ModelRef::Base);
    }
    let m = &run.config.methods;
    if let Some(u) = m.unlearning().into_iter().find(|u| u.tag() == tag) {
        return Ok(ModelRef::Unlearned(u));
    }
    if let Some(d) = m.dropout_grid().into_iter().find(|d| d.tag() == tag) {
        return Ok(ModelRef::Dropout(d));
    }
    if m.ablation_site.is_some() && tag.starts_with("dropout-") {
        let sel = read_selection(run)?;
        if let Some(a) = ablation(run, &sel).filter(|a| a.tag() == tag) {
            return Ok(ModelRef::Dropout(a));
        }
    }
    Err(Error::Config(format!(
        "unknown method `{tag}`; configured: {}",
        known_tags(run).join(", ")
    )))
}

fn known_tags(run: &Run) -> Vec<String> {
    let m = &run.config.methods;
    std::iter::once(BASE_TAG.to_string())
        .chain(m.unlearning().iter().map(UncertaintyMethod::tag))
        .chain(m.dropout_grid().iter().map(UncertaintyMethod::tag))
        .collect()
}

/// Base, each unlearning method, then the selected dropout rate and its
/// site ablation. Needs the selection when a dropout grid is configured.
pub fn table_methods(run: &Run) -> Result<Vec<TableMethod>> {
    let row = |tag: String| TableMethod {
        name: tag.split('@').next().unwrap_or(&tag).to_string(),
        tag,
    };
    let mut out = vec![row(BASE_TAG.into())];
    out.extend(run.config.methods.unlearning().iter().map(|u| row(u.tag())));
    if !run.config.methods.dropout_rates.is_empty() {
        let sel = read_selection(run)?;
        out.push(row(sel.tag.clone()));
        if let Some(a) = ablation(run, &sel) {
            out.push(row(a.tag()));
        }
    }
    Ok(out)
}

fn load_split(run: &Run, split: Split) -> Result<Vec<McqExample>> {
    let path = run.layout.split(split);
    require(&path, "gen")?;
    taskgen::read_jsonl(&path)
}

pub fn load_base(run: &Run) -> Result<ModelParams> {
    require(&run.layout.checkpoint(BASE_TAG), "train")?;
    Ok(load_checkpoint(&run.layout.model_dir(BASE_TAG))?.0)
}

/// Writes every split as JSONL.
pub fn cmd_gen(run: &Run) -> Result<()> {
    write_json(&run.layout.config(), &run.config)?;
    for (split, examples) in make_splits(&run.config.corpus)? {
        taskgen::write_jsonl(&run.layout.split(split), &examples)?;
    }
    Ok(())
}

/// Trains the base model to saturation on `lm_train`.
pub fn cmd_train(run: &Run) -> Result<()> {
    let c = &run.config;
    let examples = load_split(run, Split::LmTrain)?;
    let corpus = corpus_from_examples(&examples, &run.vocab, c.lm_last_k)?;
    let init = init_model(&c.model, c.model.seed)?;
    let out = train_lm(&init, &corpus, &c.lm)?;
    if let Some(last) = out.trace.last() {
        log::info!("base model trained, final loss {:.4}", last.loss);
    }
    write_jsonl(&run.layout.loss_trace(), &out.trace)?;
    save_checkpoint(&run.layout.model_dir(BASE_TAG), &out.params, Some(&out.optimizer))
}

fn forget_and_retain(run: &Run) -> Result<(Vec<McqExample>, Vec<McqExample>)> {
    let forget = load_split(run, Split::LmTrain)?
        .into_iter()
        .filter(|e| e.family == Family::Fact)
        .collect();
    Ok((forget, load_split(run, Split::Retain)?))
}

/// Builds one modified model: unlearned weights plus trace, or a dropout spec.
pub fn cmd_forge(run: &Run, tag: &str) -> Result<()> {
    let dir = run.layout.model_dir(tag);
    match resolve(run, tag)? {
        ModelRef::Base => Err(Error::Config("the base model is built by `train`, not `forge`".into())),
        ModelRef::Dropout(method) => write_json(
            &run.layout.variant_spec(tag),
            &VariantSpec {
                method,
                seed: run.config.methods.dropout_seed,
            },
        ),
        ModelRef::Unlearned(method) => {
            let base = load_base(run)?;
            let (forget, retain) = forget_and_retain(run)?;
            let c = &run.config;
            let out: Unlearned = match &method {
                UncertaintyMethod::GradAscent(g) => {
                    unlearn_grad_ascent(&base, &run.vocab, &forget, &retain, g, &c.stop)?
                }
                UncertaintyMethod::Npo(n) => unlearn_npo(&base, &base, &run.vocab, &forget, &retain, n, &c.stop)?,
                UncertaintyMethod::Rmu(r) => {
                    let u = SteeringVector::new(base.config.d_model, c.methods.steering_seed)?;
                    unlearn_rmu(&base, &base, &run.vocab, &forget, &retain, r, &u, &c.stop)?
                }
                UncertaintyMethod::Dropout { .. } => unreachable!("resolved as a dropout variant"),
            };
            log::info!(
                "{tag}: stopped by {} at step {}, kept step {}",
                out.stop_reason,
                out.trace.last().map_or(0, |p| p.step),
                out.kept_step
            );
            write_jsonl(&run.layout.unlearn_trace(tag), &out.trace)?;
            save_checkpoint(&dir, &out.params, None)
        }
    }
}

/// The file whose presence means `tag` has been built.
pub fn forged_path(run: &Run, tag: &str) -> Result<PathBuf> {
    Ok(match resolve(run, tag)? {
        ModelRef::Base => run.layout.checkpoint(BASE_TAG),
        ModelRef::Unlearned(_) => run.layout.checkpoint(tag),
        ModelRef::Dropout(_) => run.layout.variant_spec(tag),
    })
}

/// Records for `tag` on `split`, for the given positions (all configured
/// positions when `None`). One answering pass serves every position.
pub fn cmd_extract(run: &Run, tag: &str, split: Split, position: Option<Position>) -> Result<()> {
    let model = resolve(run, tag)?;
    let base = load_base(run)?;
    let dataset = load_split(run, split)?;
    let unlearned;
    let handle = match &model {
        ModelRef::Base => ModelHandle::base(&base),
        ModelRef::Unlearned(_) => {
            require(&run.layout.checkpoint(tag), "forge")?;
            unlearned = load_checkpoint(&run.layout.model_dir(tag))?.0;
            ModelHandle::modified(&unlearned, tag)
        }
        ModelRef::Dropout(_) => {
            let path = run.layout.variant_spec(tag);
            require(&path, "forge")?;
            let spec: VariantSpec = read_json(&path)?;
            let UncertaintyMethod::Dropout { site, rate } = spec.method else {
                return Err(Error::Contract(format!("{} is not a dropout spec", path.display())));
            };
            dropout_variant(&base, site, rate, spec.seed)?
        }
    };
    let [pre, post] = extract_all(&handle, &run.vocab, &dataset)?;
    for (pos, records) in [(Position::Pre, pre), (Position::Post, post)] {
        if position.map_or(run.config.positions.contains(&pos), |p| p == pos) {
            write_jsonl(&run.layout.records(tag, split, pos), &records)?;
        }
    }
    Ok(())
}

fn load_records(run: &Run, tag: &str, split: Split, position: Position) -> Result<Vec<HiddenRecord>> {
    let path = run.layout.records(tag, split, position);
    require(&path, "extract")?;
    read_jsonl(&path)
}

/// Fits the probe for `tag` on that model's own `easy_cal` records.
pub fn cmd_probe(run: &Run, tag: &str, position: Position) -> Result<()> {
    resolve(run, tag)?;
    let records = load_records(run, tag, Split::EasyCal, position)?;
    let probe = train_probe(&records, &run.config.probe)?;
    write_json(&run.layout.probe(tag, position), &probe)
}

/// Dropout sweep: forge and extract every grid point that is missing,
/// fit probes, measure variance on base records and pick the maximum.
pub fn cmd_select(run: &Run) -> Result<Selection> {
    let c = &run.config;
    let grid = c.methods.dropout_grid();
    if grid.is_empty() {
        return Err(Error::Config("no dropout grid configured".into()));
    }
    for m in &grid {
        let tag = m.tag();
        if !run.layout.variant_spec(&tag).exists() {
            cmd_forge(run, &tag)?;
        }
        if c.positions
            .iter()
            .any(|&p| !run.layout.records(&tag, Split::EasyCal, p).exists())
        {
            cmd_extract(run, &tag, Split::EasyCal, None)?;
        }
    }
    let mut chosen = None;
    for &pos in &c.positions {
        let easy = load_records(run, BASE_TAG, c.variance_split, pos)?;
        let hard_val = load_records(run, BASE_TAG, Split::HardVal, pos)?;
        let cands = sweep(
            &grid,
            |m| load_records(run, &m.tag(), Split::EasyCal, pos),
            &easy,
            Some(&hard_val),
            &c.probe,
        )?;
        write_atomic(&run.layout.sweep_csv(pos), sweep_csv(&cands).as_bytes())?;
        if pos == c.select_position {
            let best = &cands[select(&cands)?];
            chosen = Some(Selection {
                position: pos,
                variance_split: c.variance_split,
                tag: best.tag.clone(),
                method: best.method.clone(),
                variance: best.variance,
                sweep: cands
                    .iter()
                    .map(|k| SweepPoint {
                        tag: k.tag.clone(),
                        variance: k.variance,
                        hard_val_brier: k.hard_val_brier,
                    })
                    .collect(),
            });
        }
    }
    let sel = chosen.expect("validate() guarantees select_position is configured");
    log::info!("selected {} (variance {:.5})", sel.tag, sel.variance);
    write_json(&run.layout.selection(), &sel)?;
    Ok(sel)
}

/// Applies the `tag` probe to base-model records of `split`.
pub fn cmd_eval(run: &Run, tag: &str, split: Split, position: Position) -> Result<EvalReport> {
    resolve(run, tag)?;
    let probe_path = run.layout.probe(tag, position);
    require(&probe_path, "probe")?;
    let probe: Probe = read_json(&probe_path)?;
    let records = load_records(run, BASE_TAG, split, position)?;
    if let Some(r) = records
        .iter()
        .find(|r| r.source != Source::Base || r.position != position)
    {
        return Err(Error::Contract(format!(
            "evaluation needs base-model {position} records; {} is {:?}/{}",
            r.example_id, r.source, r.position
        )));
    }
    let (p, y) = score_dataset(&probe, &records)?;
    let report = evaluate(split.as_str(), &p, &y, &run.config.ece)?;
    write_json(&run.layout.report(tag, split, position), &report)?;
    write_atomic(
        &run.layout.reliability(tag, split, position),
        reliability_csv(&report.reliability_bins).as_bytes(),
    )?;
    Ok(report)
}

/// `table.csv` over split x position x method, and `agreement.csv`.
pub fn cmd_table(run: &Run) -> Result<()> {
    let c = &run.config;
    let methods = table_methods(run)?;
    let mut table = String::from("split,position,method,tag,n,accuracy,brier,ece,auroc\n");
    for &split in &c.eval_splits {
        for &pos in &c.positions {
            for m in &methods {
                let path = run.layout.report(&m.tag, split, pos);
                require(&path, "eval")?;
                let r: EvalReport = read_json(&path)?;
                let auroc = r.auroc.map(|a| a.to_string()).unwrap_or_default();
                table.push_str(&format!(
                    "{split},{pos},{},{},{},{},{},{},{auroc}\n",
                    m.name, m.tag, r.n, r.accuracy, r.brier, r.ece
                ));
            }
        }
    }
    write_atomic(&run.layout.table(), table.as_bytes())?;
    write_atomic(&run.layout.agreement(), agreement_table(run, &methods)?.as_bytes())
}

/// Per-model accuracy on each split, before and after keeping only the
/// questions every model gets equally right or wrong.
fn agreement_table(run: &Run, methods: &[TableMethod]) -> Result<String> {
    let c = &run.config;
    let mut out = String::from("split,model,n,n_agree,accuracy,accuracy_on_agreed\n");
    for &split in &c.eval_splits {
        let mut labels = std::collections::BTreeMap::new();
        for m in methods {
            let recs = load_records(run, &m.tag, split, c.select_position)?;
            labels.insert(m.tag.clone(), recs.iter().map(|r| r.label).collect::<Vec<u8>>());
        }
        let keep = agreement_filter(&labels)?;
        for m in methods {
            let y = &labels[&m.tag];
            let acc = taskgen::accuracy(y);
            let kept: Vec<u8> = keep.iter().map(|&i| y[i]).collect();
            let agreed = if kept.is_empty() {
                String::new()
            } else {
                taskgen::accuracy(&kept).to_string()
            };
            out.push_str(&format!(
                "{split},{},{},{},{acc},{agreed}\n",
                m.tag,
                y.len(),
                keep.len()
            ));
        }
    }
    Ok(out)
}
