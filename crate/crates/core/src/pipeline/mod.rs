//! End-to-end runs driven by a [`RunConfig`]: data generation, training,
//! studies and the HTML report, all writing into one output directory.
//!
//! ```text
//! <out>/data/pairs.jsonl
//! <out>/checkpoints/{base,tuned}.{actd,json}
//! <out>/training/{pretrain,tuning}.json, training.csv, training.svg
//! <out>/studies/<study>.{csv,svg} ...
//! <out>/report.html
//! <out>/manifest.json
//! ```

mod config;
mod studies;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_jsonl, sample, write_jsonl, PreferenceDataset, Provenance, Split};
use crate::error::{Error, Result};
use crate::io::{load_checkpoint, save_checkpoint, write_atomic};
use crate::model::Parameters;
use crate::report::{fmt_num, render_html, LineChart, LineSeries, Section, SectionBody, Table};
use crate::tuning::{dpo_tune, pretrain, record_margins, CorpusSource, TrainReport};

pub use config::{
    AnalysisConfig, AnalysisSplit, DatasetSource, ModelSection, RunConfig, Study, TrainSection, SCHEMA_VERSION,
};
pub use studies::StudyOutcome;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub provenance: Provenance,
    pub checksum: String,
    pub n_pairs: usize,
    pub n_train: usize,
    pub n_eval: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: RunConfig,
    /// Checkpoint name to parameter checksum.
    pub checkpoints: BTreeMap<String, String>,
    pub dataset: Option<DatasetRecord>,
    /// Stage or study name to the files it wrote, relative to the output
    /// directory.
    pub files: BTreeMap<String, Vec<String>>,
    /// Stage or study name to seconds.
    pub wall_times: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

impl RunManifest {
    fn fresh(cfg: &RunConfig) -> Self {
        Self {
            tool_version: TOOL_VERSION.to_string(),
            config: cfg.clone(),
            checkpoints: BTreeMap::new(),
            dataset: None,
            files: BTreeMap::new(),
            wall_times: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }
}

pub const MANIFEST: &str = "manifest.json";
pub const LOCK: &str = ".alignlab.lock";

/// Exclusive ownership of an output directory for the life of the value.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// An output directory held for one command.
pub struct RunDir {
    root: PathBuf,
    manifest: RunManifest,
    _lock: DirLock,
}

impl RunDir {
    pub fn open(root: &Path, cfg: &RunConfig) -> Result<Self> {
        let lock = DirLock::acquire(root)?;
        let mut manifest = match fs::read_to_string(root.join(MANIFEST)) {
            Ok(text) => serde_json::from_str(&text).unwrap_or_else(|_| RunManifest::fresh(cfg)),
            Err(_) => RunManifest::fresh(cfg),
        };
        manifest.config = cfg.clone();
        manifest.tool_version = TOOL_VERSION.to_string();
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            _lock: lock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn write(&mut self, stage: &str, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_atomic(&path, bytes)?;
        self.record(stage, rel);
        Ok(path)
    }

    fn record(&mut self, stage: &str, rel: &str) {
        let list = self.manifest.files.entry(stage.to_string()).or_default();
        if !list.iter().any(|f| f == rel) {
            list.push(rel.to_string());
        }
    }

    fn reset_stage(&mut self, stage: &str) {
        self.manifest.files.remove(stage);
    }

    /// Writes the manifest; called last by every command.
    pub fn finish(mut self) -> Result<RunManifest> {
        for list in self.manifest.files.values_mut() {
            list.sort();
        }
        let bytes = serde_json::to_vec_pretty(&self.manifest)?;
        write_atomic(&self.root.join(MANIFEST), &bytes)?;
        Ok(self.manifest)
    }
}

/// Builds the dataset described by the config.
pub fn build_dataset(cfg: &RunConfig) -> Result<PreferenceDataset> {
    let mc = cfg.model_config();
    match &cfg.dataset {
        DatasetSource::Synthetic { n_pairs } => generate_synthetic(cfg.seed, *n_pairs, &mc),
        DatasetSource::Jsonl { path, sample: n } => {
            if !path.is_file() {
                return Err(Error::Missing {
                    what: "dataset file",
                    path: path.clone(),
                });
            }
            let ds = load_jsonl(path, &mc, cfg.seed)?;
            match n {
                Some(n) => sample(&ds, *n, cfg.seed),
                None => Ok(ds),
            }
        }
    }
}

fn dataset_record(ds: &PreferenceDataset) -> DatasetRecord {
    DatasetRecord {
        provenance: ds.provenance().clone(),
        checksum: ds.checksum(),
        n_pairs: ds.len(),
        n_train: ds.iter_split(Split::Train).count(),
        n_eval: ds.iter_split(Split::Eval).count(),
    }
}

/// Writes the dataset as JSONL.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    let mut dir = RunDir::open(out, cfg)?;
    let start = Instant::now();
    let ds = build_dataset(cfg)?;
    let rel = "data/pairs.jsonl";
    let path = out.join(rel);
    fs::create_dir_all(path.parent().expect("has parent")).map_err(|e| Error::io(out, e))?;
    write_jsonl(&ds, &path)?;
    dir.reset_stage("gen-data");
    dir.record("gen-data", rel);
    dir.manifest.dataset = Some(dataset_record(&ds));
    dir.manifest.wall_times.insert("gen-data".into(), start.elapsed().as_secs_f64());
    dir.finish()
}

fn training_table(pre: &TrainReport, dpo: &TrainReport) -> Table {
    let mut t = Table::new(["phase", "step", "loss", "grad_norm"]);
    for (phase, r) in [("pretrain", pre), ("tuning", dpo)] {
        for (i, (l, g)) in r.losses.iter().zip(&r.grad_norms).enumerate() {
            t.push(vec![phase.into(), i.to_string(), fmt_num(*l), fmt_num(*g)]);
        }
    }
    t
}

/// Pretrains the base, preference-tunes a copy, writes both checkpoints and
/// the training reports.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    let mut dir = RunDir::open(out, cfg)?;
    let ds = build_dataset(cfg)?;
    let mc = cfg.model_config();
    ds.check_fits(&mc)?;
    dir.reset_stage("train");

    let start = Instant::now();
    let grammar = match ds.provenance() {
        Provenance::Synthetic { grammar, .. } => Some(grammar.as_ref().clone()),
        _ => None,
    };
    let corpus = match &grammar {
        Some(g) => CorpusSource::Grammar(g),
        None => CorpusSource::Pairs(&ds),
    };
    log::info!("pretraining {} steps", cfg.pretrain.steps);
    let (base, mut pre_report) = pretrain(&mc, &cfg.pretrain_config(), &corpus, cfg.corpus_seed())?;
    record_margins(&base, &ds, &mut pre_report)?;
    dir.manifest.wall_times.insert("pretrain".into(), start.elapsed().as_secs_f64());

    let start = Instant::now();
    log::info!("preference tuning {} steps", cfg.tuning.steps);
    let (tuned, dpo_report) = dpo_tune(&base, &ds, &cfg.tuning_config())?;
    dir.manifest.wall_times.insert("tuning".into(), start.elapsed().as_secs_f64());

    let ckpt = out.join("checkpoints");
    let base_info = serde_json::json!({
        "stage": "pretrain",
        "train_config": cfg.pretrain_config(),
        "corpus": if grammar.is_some() { "synthetic grammar, preference-neutral continuations" } else { "dataset pairs, coin-flip completion" },
        "corpus_seed": cfg.corpus_seed(),
    });
    let tuned_info = serde_json::json!({
        "stage": "dpo",
        "train_config": cfg.tuning_config(),
        "reference_checksum": base.checksum(),
        "dataset_checksum": ds.checksum(),
    });
    save_checkpoint(&base, &ckpt, "base", base_info)?;
    save_checkpoint(&tuned, &ckpt, "tuned", tuned_info)?;
    for f in ["base.actd", "base.json", "tuned.actd", "tuned.json"] {
        dir.record("train", &format!("checkpoints/{f}"));
    }
    dir.manifest.checkpoints.insert("base".into(), base.checksum());
    dir.manifest.checkpoints.insert("tuned".into(), tuned.checksum());
    dir.manifest.dataset = Some(dataset_record(&ds));

    dir.write("train", "training/pretrain.json", &serde_json::to_vec_pretty(&pre_report)?)?;
    dir.write("train", "training/tuning.json", &serde_json::to_vec_pretty(&dpo_report)?)?;
    let table = training_table(&pre_report, &dpo_report);
    dir.write("train", "training/training.csv", &table.to_csv()?)?;
    let series = |name: &str, r: &TrainReport| LineSeries {
        name: name.into(),
        xs: (0..r.losses.len()).map(|i| i as f64).collect(),
        ys: r.losses.clone(),
    };
    let chart = LineChart {
        title: "Training loss".into(),
        x_label: "step".into(),
        y_label: "loss".into(),
        series: vec![series("pretrain", &pre_report), series("tuning", &dpo_report)],
    };
    dir.write("train", "training/training.svg", chart.render().as_bytes())?;
    log::info!(
        "eval margin base {:.3} tuned {:.3}",
        pre_report.eval_margin.unwrap_or(f64::NAN),
        dpo_report.eval_margin.unwrap_or(f64::NAN)
    );
    dir.finish()
}

/// Loads both checkpoints written by [`cmd_train`].
pub fn load_models(out: &Path) -> Result<(Parameters, Parameters)> {
    let ckpt = out.join("checkpoints");
    let (base, _) = load_checkpoint(&ckpt.join("base.json"))?;
    let (tuned, _) = load_checkpoint(&ckpt.join("tuned.json"))?;
    Ok((base, tuned))
}

fn analysis_set(cfg: &RunConfig, ds: &PreferenceDataset) -> Result<PreferenceDataset> {
    match cfg.analysis.split {
        AnalysisSplit::All => Ok(ds.clone()),
        AnalysisSplit::Train => ds.subset(Split::Train),
        AnalysisSplit::Eval => ds.subset(Split::Eval),
    }
}

/// Runs the selected studies against the checkpoints in `out`.
pub fn cmd_study(cfg: &RunConfig, out: &Path, selection: &[Study]) -> Result<RunManifest> {
    let mut dir = RunDir::open(out, cfg)?;
    let (base, tuned) = load_models(out)?;
    if !base.config().same_shape(&cfg.model_config()) {
        return Err(Error::Config(
            "checkpoints in the output directory were trained with a different model shape".into(),
        ));
    }
    let ds = build_dataset(cfg)?;
    if let Some(rec) = &dir.manifest.dataset {
        if rec.checksum != ds.checksum() {
            return Err(Error::Config(
                "dataset differs from the one recorded for these checkpoints".into(),
            ));
        }
    }
    let set = analysis_set(cfg, &ds)?;
    let studies = Study::expand(selection);
    let mut ctx = studies::StudyContext::new(&base, &tuned, &set, cfg);
    for s in studies {
        let start = Instant::now();
        log::info!("study {}", s.name());
        let outcome = ctx.run(s)?;
        dir.reset_stage(s.name());
        for (rel, bytes) in &outcome.files {
            dir.write(s.name(), rel, bytes)?;
        }
        for w in &outcome.warnings {
            log::warn!("{w}");
            if !dir.manifest.warnings.contains(w) {
                dir.manifest.warnings.push(w.clone());
            }
        }
        dir.manifest.wall_times.insert(s.name().into(), start.elapsed().as_secs_f64());
    }
    dir.finish()
}

fn study_section(out: &Path, manifest: Option<&RunManifest>, stage: &str, title: &str) -> Section {
    let files = manifest.and_then(|m| m.files.get(stage));
    let body = match files {
        Some(files) if files.iter().all(|f| out.join(f).is_file()) => {
            let mut svgs = Vec::new();
            let mut tables = Vec::new();
            for f in files {
                let path = out.join(f);
                if f.ends_with(".svg") {
                    if let Ok(s) = fs::read_to_string(&path) {
                        svgs.push(s);
                    }
                } else if f.ends_with(".csv") {
                    if let Ok(t) = Table::read(&path) {
                        tables.push((f.clone(), t));
                    }
                }
            }
            SectionBody::Run { svgs, tables }
        }
        _ => SectionBody::NotRun,
    };
    Section {
        title: title.to_string(),
        body,
    }
}

/// Renders `report.html` from whatever the output directory holds.
pub fn cmd_report(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    if !out.is_dir() {
        return Err(Error::Missing {
            what: "output directory",
            path: out.to_path_buf(),
        });
    }
    let mut dir = RunDir::open(out, cfg)?;
    let start = Instant::now();
    let manifest_on_disk: Option<RunManifest> = fs::read_to_string(out.join(MANIFEST))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let m = manifest_on_disk.as_ref();
    let mut sections = vec![study_section(out, m, "train", "Training")];
    for s in Study::EACH {
        sections.push(study_section(out, m, s.name(), studies::title(s)));
    }
    let manifest_text = m.map(|m| serde_json::to_string_pretty(m).expect("manifest serializes"));
    let html = render_html("Alignment localization run", &sections, manifest_text.as_deref());
    dir.reset_stage("report");
    dir.write("report", "report.html", html.as_bytes())?;
    dir.manifest.wall_times.insert("report".into(), start.elapsed().as_secs_f64());
    dir.finish()
}

/// `gen-data`, `train`, `study` and `report` in sequence.
pub fn cmd_run(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    cmd_gen_data(cfg, out)?;
    cmd_train(cfg, out)?;
    cmd_study(cfg, out, &cfg.studies)?;
    cmd_report(cfg, out)
}
