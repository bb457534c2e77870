//! File-backed stages of a run. Every stage reads its inputs from, and
//! writes its outputs below, the run directory:
//!
//! ```text
//! <out>/data/                     manifest.json, <site>/images.u8, <site>/masks.u8
//! <out>/flow/                     flow.json, log.json, summary.json
//! <out>/harmonizer/               harmonizer.json, log.json, summary.json
//! <out>/segmenter/                segmenter.json, log.json, summary.json
//! <out>/adapt/<site>/             harmonizer.json, trace.json, summary.json
//! <out>/report/                   metrics.json, table.txt
//! ```
//!
//! Stages never write into another stage's directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::adapt::{adapt, AdaptTargets, CriterionKind, StopReason, TraceRecord};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::experiment::{run_experiment, ExperimentModels, MetricsReport};
use crate::flow::FlowModel;
use crate::flow_train::train_flow;
use crate::harmonizer::{pretrain_harmonizer, Harmonizer};
use crate::rng::child_seed;
use crate::seg::{train_segmenter, Segmenter};
use crate::synth::{build_sites, load_sites, save_sites, DomainDataset, Split};

/// Precision of every pipeline model.
pub type Real = f32;

pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn flow(&self) -> PathBuf {
        self.root.join("flow")
    }

    pub fn harmonizer(&self) -> PathBuf {
        self.root.join("harmonizer")
    }

    pub fn segmenter(&self) -> PathBuf {
        self.root.join("segmenter")
    }

    pub fn adapted(&self, site: &str) -> PathBuf {
        self.root.join("adapt").join(site)
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

/// Summary written next to every trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub stage: String,
    pub seed: u64,
    pub architecture_tag: String,
    pub checksum: String,
    /// Stage-specific scalar results.
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptSummary {
    pub site: String,
    pub criterion: CriterionKind,
    pub stop_step: usize,
    pub reason: StopReason,
    pub source_bpd_ref: f64,
    pub flow_checksum: String,
    pub checksum: String,
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_json<D: DeserializeOwned>(path: &Path, what: &str) -> Result<D> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(format!("{what} ({})", path.display())),
        _ => Error::io(path, e),
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(format!("{what} ({})", path.display())))
    }
}

fn make_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Run seed after applying the deterministic flag.
pub fn effective_seed(cfg: &RunConfig) -> u64 {
    if cfg.deterministic {
        return cfg.seed;
    }
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0);
    child_seed(cfg.seed ^ nanos, "nondeterministic")
}

/// Generates the sites. An existing non-empty directory is an error unless
/// `force` is set, in which case it is replaced.
pub fn synth_data(cfg: &RunConfig, force: bool) -> Result<PathBuf> {
    let dir = Layout::new(&cfg.out).data();
    if dir.exists() && fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?.next().is_some() {
        if !force {
            return Err(Error::Config(format!("{} is not empty; pass --force to regenerate", dir.display())));
        }
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let seed = child_seed(cfg.seed, "data");
    let sites = build_sites(seed, &cfg.data.sites)?;
    save_sites(&dir, seed, &sites)?;
    info!("wrote {} sites to {}", sites.len(), dir.display());
    Ok(dir)
}

pub fn load_data(cfg: &RunConfig) -> Result<Vec<DomainDataset>> {
    let dir = Layout::new(&cfg.out).data();
    require(&dir.join("manifest.json"), "dataset manifest")?;
    load_sites(&dir)
}

fn site<'a>(sites: &'a [DomainDataset], id: &str) -> Result<&'a DomainDataset> {
    sites.iter().find(|s| s.domain_id == id).ok_or_else(|| Error::MissingArtifact(format!("site {id} in the dataset")))
}

fn summary(stage: &str, seed: u64, tag: String, checksum: String, metrics: &[(&str, f64)]) -> ModelSummary {
    ModelSummary {
        stage: stage.into(),
        seed,
        architecture_tag: tag,
        checksum,
        metrics: metrics.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    }
}

pub fn train_flow_stage(cfg: &RunConfig) -> Result<ModelSummary> {
    let sites = load_data(cfg)?;
    let src = site(&sites, &cfg.data.source)?;
    let dir = Layout::new(&cfg.out).flow();
    make_dir(&dir)?;
    let seed = child_seed(effective_seed(cfg), "flow");
    let mut train = cfg.flow.train.clone();
    train.seed = seed;
    let arch = cfg.flow.arch.build(src.height, src.width);
    let out = train_flow::<Real>(arch, src, &train, Some(&dir))?;
    out.model.save(dir.join("flow.json"))?;
    write_json(&dir.join("log.json"), &out.log)?;
    let last_val = out.log.last().map_or(out.initial_val_bpd, |r| r.val_bpd);
    let s = summary(
        "flow",
        seed,
        out.model.config().tag(),
        out.model.params().checksum(),
        &[("source_bpd_ref", out.source_bpd_ref), ("initial_val_bpd", out.initial_val_bpd), ("val_bpd", last_val)],
    );
    write_json(&dir.join("summary.json"), &s)?;
    Ok(s)
}

pub fn train_harmonizer_stage(cfg: &RunConfig) -> Result<ModelSummary> {
    let sites = load_data(cfg)?;
    let src = site(&sites, &cfg.data.source)?;
    let dir = Layout::new(&cfg.out).harmonizer();
    make_dir(&dir)?;
    let seed = child_seed(effective_seed(cfg), "harmonizer");
    let mut train = cfg.harmonizer.train.clone();
    train.seed = seed;
    let out = pretrain_harmonizer::<Real>(cfg.harmonizer.arch.clone(), src, &train, Some(&dir))?;
    out.net.save(dir.join("harmonizer.json"))?;
    write_json(&dir.join("log.json"), &out.log)?;
    let s = summary(
        "harmonizer",
        seed,
        out.net.config().tag(),
        out.net.params().checksum(),
        &[("identity_mse", out.identity_mse), ("heldout_mse", out.heldout_mse)],
    );
    write_json(&dir.join("summary.json"), &s)?;
    Ok(s)
}

pub fn train_segmenter_stage(cfg: &RunConfig) -> Result<ModelSummary> {
    let sites = load_data(cfg)?;
    let src = site(&sites, &cfg.data.source)?;
    let dir = Layout::new(&cfg.out).segmenter();
    make_dir(&dir)?;
    let seed = child_seed(effective_seed(cfg), "segmenter");
    let mut train = cfg.segmenter.train.clone();
    train.seed = seed;
    let out = train_segmenter::<Real>(cfg.segmenter.arch.clone(), src, &train)?;
    out.net.save(dir.join("segmenter.json"))?;
    write_json(&dir.join("log.json"), &out.log)?;
    let s = summary("segmenter", seed, out.net.config().tag(), out.net.params().checksum(), &[("val_dsc", out.val_dsc)]);
    write_json(&dir.join("summary.json"), &s)?;
    Ok(s)
}

/// Loads a model and checks it against the checksum of its stage summary.
fn load_checked<M>(dir: &Path, file: &str, what: &str, load: impl FnOnce(&Path) -> Result<M>, checksum: impl FnOnce(&M) -> String) -> Result<(M, ModelSummary)> {
    let path = dir.join(file);
    require(&path, what)?;
    let s: ModelSummary = read_json(&dir.join("summary.json"), &format!("{what} summary"))?;
    let m = load(&path)?;
    let actual = checksum(&m);
    if actual != s.checksum {
        return Err(Error::Integrity(format!("{what} checksum {actual} differs from its summary {}", s.checksum)));
    }
    Ok((m, s))
}

pub fn load_flow(cfg: &RunConfig) -> Result<(FlowModel<Real>, ModelSummary)> {
    load_checked(&Layout::new(&cfg.out).flow(), "flow.json", "trained flow", |p| FlowModel::load(p), |m| {
        m.params().checksum()
    })
}

pub fn load_harmonizer(cfg: &RunConfig) -> Result<(Harmonizer<Real>, ModelSummary)> {
    load_checked(&Layout::new(&cfg.out).harmonizer(), "harmonizer.json", "pretrained harmonizer", |p| Harmonizer::load(p), |m| {
        m.params().checksum()
    })
}

pub fn load_segmenter(cfg: &RunConfig) -> Result<(Segmenter<Real>, ModelSummary)> {
    load_checked(&Layout::new(&cfg.out).segmenter(), "segmenter.json", "trained segmenter", |p| Segmenter::load(p), |m| {
        m.params().checksum()
    })
}

/// Adapts the pretrained harmonizer to every target site. The segmenter is
/// loaded when present (or required by the criterion) and is used for the
/// entropy and, with labels, DSC columns of the trace.
pub fn adapt_stage(cfg: &RunConfig) -> Result<Vec<AdaptSummary>> {
    let sites = load_data(cfg)?;
    let (flow, flow_sum) = load_flow(cfg)?;
    let (init, _) = load_harmonizer(cfg)?;
    let needs_seg = matches!(cfg.adaptation.criterion.kind, CriterionKind::EntropyPlateau | CriterionKind::OracleBest);
    let seg = if needs_seg || Layout::new(&cfg.out).segmenter().join("segmenter.json").exists() {
        Some(load_segmenter(cfg)?.0)
    } else {
        None
    };
    let source_bpd_ref = *flow_sum
        .metrics
        .get("source_bpd_ref")
        .ok_or_else(|| Error::Integrity("flow summary lacks source_bpd_ref".into()))?;
    let flow_before = flow.params().checksum();
    let seg_before = seg.as_ref().map(|s| s.params().checksum());
    let seed = child_seed(effective_seed(cfg), "adapt");
    let mut out = Vec::new();
    for id in cfg.target_ids() {
        let target = site(&sites, &id)?;
        let all: Vec<usize> = (0..target.len()).collect();
        let pool = target.batch::<Real>(&all).to_continuous();
        let test = target.split_batch::<Real>(Split::Test).to_continuous();
        let masks = target.split_masks(Split::Test);
        let labelled = (cfg.adaptation.criterion.kind == CriterionKind::OracleBest).then_some((&test, masks.as_slice()));
        let mut acfg = cfg.adaptation.clone();
        acfg.seed = child_seed(seed, &id);
        let res = adapt(&init, &flow, &AdaptTargets { pool: &pool, labelled }, source_bpd_ref, seg.as_ref(), &acfg)?;
        let dir = Layout::new(&cfg.out).adapted(&id);
        make_dir(&dir)?;
        res.net.save(dir.join("harmonizer.json"))?;
        write_json(&dir.join("trace.json"), &res.trace)?;
        let s = AdaptSummary {
            site: id.clone(),
            criterion: acfg.criterion.kind,
            stop_step: res.stop_step,
            reason: res.reason.clone(),
            source_bpd_ref,
            flow_checksum: flow.params().checksum(),
            checksum: res.net.params().checksum(),
        };
        write_json(&dir.join("summary.json"), &s)?;
        info!("adapted {} stop {} ({:?})", id, res.stop_step, res.reason);
        if let StopReason::NumericFailure { step } = res.reason {
            return Err(Error::NonFiniteLoss { what: "adaptation loss", batch: step });
        }
        out.push(s);
    }
    if flow.params().checksum() != flow_before || seg.as_ref().map(|s| s.params().checksum()) != seg_before {
        return Err(Error::Integrity("a frozen model changed during adaptation".into()));
    }
    Ok(out)
}

/// Reads the trace written by [`adapt_stage`] for `site`.
pub fn load_trace(cfg: &RunConfig, site: &str) -> Result<Vec<TraceRecord>> {
    read_json(&Layout::new(&cfg.out).adapted(site).join("trace.json"), &format!("adaptation trace for {site}"))
}

pub fn evaluate_stage(cfg: &RunConfig) -> Result<MetricsReport> {
    let sites = load_data(cfg)?;
    let (seg, _) = load_segmenter(cfg)?;
    let methods = &cfg.evaluation.methods;
    let pretrained = if methods.contains(&crate::experiment::Method::Pretrained) {
        Some(load_harmonizer(cfg)?.0)
    } else {
        None
    };
    let ids = cfg.target_ids();
    let mut adapted_nets = BTreeMap::new();
    if methods.contains(&crate::experiment::Method::Adapted) {
        for id in &ids {
            let dir = Layout::new(&cfg.out).adapted(id);
            let (net, _) = load_checked_adapted(&dir, id)?;
            adapted_nets.insert(id.clone(), net);
        }
    }
    let models = ExperimentModels {
        segmenter: &seg,
        pretrained: pretrained.as_ref(),
        adapted: adapted_nets.iter().map(|(k, v)| (k.clone(), v)).collect(),
    };
    let targets: Vec<DomainDataset> = ids.iter().map(|id| site(&sites, id).cloned()).collect::<Result<_>>()?;
    let report = run_experiment(site(&sites, &cfg.data.source)?, &targets, methods, &models)?;
    let dir = Layout::new(&cfg.out).report();
    make_dir(&dir)?;
    write_json(&dir.join("metrics.json"), &report)?;
    let table = report.table();
    fs::write(dir.join("table.txt"), &table).map_err(|e| Error::io(dir.join("table.txt"), e))?;
    info!("report written to {}", dir.display());
    Ok(report)
}

fn load_checked_adapted(dir: &Path, id: &str) -> Result<(Harmonizer<Real>, AdaptSummary)> {
    let path = dir.join("harmonizer.json");
    require(&path, &format!("adapted harmonizer for {id}"))?;
    let s: AdaptSummary = read_json(&dir.join("summary.json"), &format!("adaptation summary for {id}"))?;
    let net = Harmonizer::load(&path)?;
    if net.params().checksum() != s.checksum {
        return Err(Error::Integrity(format!("adapted harmonizer for {id} differs from its summary")));
    }
    Ok((net, s))
}

/// Every stage in order.
pub fn run_all(cfg: &RunConfig, force: bool) -> Result<MetricsReport> {
    synth_data(cfg, force)?;
    train_flow_stage(cfg)?;
    train_harmonizer_stage(cfg)?;
    train_segmenter_stage(cfg)?;
    adapt_stage(cfg)?;
    evaluate_stage(cfg)
}
