use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribution::{TargetMode, TokenConvention};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::LassoObjective;
use crate::tuning::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Study {
    Sweep,
    Direction,
    Controls,
    Alpha,
    Variants,
    Lowrank,
    Attribute,
    All,
}

impl Study {
    pub const EACH: [Study; 7] = [
        Study::Sweep,
        Study::Direction,
        Study::Controls,
        Study::Alpha,
        Study::Variants,
        Study::Lowrank,
        Study::Attribute,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Study::Sweep => "sweep",
            Study::Direction => "direction",
            Study::Controls => "controls",
            Study::Alpha => "alpha",
            Study::Variants => "variants",
            Study::Lowrank => "lowrank",
            Study::Attribute => "attribute",
            Study::All => "all",
        }
    }

    pub fn parse(s: &str) -> Result<Study> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown study {s:?}")))
    }

    /// Expands `All` and removes duplicates, keeping pipeline order.
    pub fn expand(list: &[Study]) -> Vec<Study> {
        if list.contains(&Study::All) {
            return Study::EACH.to_vec();
        }
        Study::EACH.iter().copied().filter(|s| list.contains(s)).collect()
    }
}

/// Model shape; the initialization seed comes from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = ModelConfig::default();
        Self {
            n_layers: c.n_layers,
            d_model: c.d_model,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
            vocab_size: c.vocab_size,
            max_seq_len: c.max_seq_len,
        }
    }
}

/// Optimizer settings; the batch-order seed comes from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    pub gradient_clip: f64,
}

fn default_beta() -> f64 {
    0.1
}

impl TrainSection {
    fn from_config(c: TrainConfig) -> Self {
        Self {
            learning_rate: c.learning_rate,
            steps: c.steps,
            batch_size: c.batch_size,
            beta: c.beta,
            gradient_clip: c.gradient_clip,
        }
    }

    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            steps: self.steps,
            batch_size: self.batch_size,
            beta: self.beta,
            gradient_clip: self.gradient_clip,
            seed,
        }
    }
}

fn default_pretrain() -> TrainSection {
    TrainSection::from_config(TrainConfig::pretrain_default())
}

fn default_tuning() -> TrainSection {
    TrainSection::from_config(TrainConfig::dpo_default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic {
        n_pairs: usize,
    },
    Jsonl {
        path: PathBuf,
        /// Stratified subsample size; `None` keeps every valid line.
        #[serde(default)]
        sample: Option<usize>,
    },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic { n_pairs: 80 }
    }
}

/// Which pairs the studies run on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisSplit {
    #[default]
    All,
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub split: AnalysisSplit,
    pub alphas: Vec<f64>,
    /// Defaults to powers of two up to `d_model`, plus `d_model`.
    pub ranks: Option<Vec<usize>>,
    /// Defaults to the sweep's peak layer.
    pub low_rank_layer: Option<usize>,
    pub center: bool,
    pub token_convention: TokenConvention,
    pub target_mode: TargetMode,
    pub objective: LassoObjective,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            split: AnalysisSplit::All,
            alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            ranks: None,
            low_rank_layer: None,
            center: true,
            token_convention: TokenConvention::default(),
            target_mode: TargetMode::default(),
            objective: LassoObjective::Normalized,
        }
    }
}

impl AnalysisConfig {
    pub fn ranks_for(&self, d_model: usize) -> Vec<usize> {
        match &self.ranks {
            Some(r) => r.clone(),
            None => {
                let mut r: Vec<usize> = std::iter::successors(Some(1usize), |k| Some(k * 2))
                    .take_while(|&k| k < d_model)
                    .collect();
                r.push(d_model);
                r
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: u32,
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default = "default_pretrain")]
    pub pretrain: TrainSection,
    #[serde(default = "default_tuning")]
    pub tuning: TrainSection,
    #[serde(default)]
    pub dataset: DatasetSource,
    #[serde(default = "default_studies")]
    pub studies: Vec<Study>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

fn default_studies() -> Vec<Study> {
    vec![Study::All]
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA_VERSION,
            seed: 0,
            model: ModelSection::default(),
            pretrain: default_pretrain(),
            tuning: default_tuning(),
            dataset: DatasetSource::default(),
            studies: default_studies(),
            output_dir: default_output(),
            analysis: AnalysisConfig::default(),
        }
    }
}

/// Seed streams derived from the run seed.
pub(crate) mod streams {
    pub const CORPUS: u64 = 0x636f_7270_7573;
    pub const DPO: u64 = 0x0064_706f;
}

impl RunConfig {
    /// Parses and validates a config file. Relative dataset paths are
    /// resolved against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Missing {
                    what: "config file",
                    path: path.to_path_buf(),
                }
            } else {
                Error::io(path, e)
            }
        })?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let DatasetSource::Jsonl { path: p, .. } = &mut cfg.dataset {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema {} is not supported (expected {SCHEMA_VERSION})",
                self.schema
            )));
        }
        if self.studies.is_empty() {
            return Err(Error::Config("study selection is empty".into()));
        }
        let mc = self.model_config();
        mc.validate().map_err(|e| Error::Config(e.to_string()))?;
        for (name, t) in [("pretrain", &self.pretrain), ("tuning", &self.tuning)] {
            t.with_seed(0)
                .validate()
                .map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        if self.pretrain.steps == 0 {
            return Err(Error::Config("pretrain: steps must be at least 1".into()));
        }
        match &self.dataset {
            DatasetSource::Synthetic { n_pairs } if *n_pairs < 2 => {
                return Err(Error::Config("dataset: n_pairs must be at least 2".into()));
            }
            DatasetSource::Jsonl { path, .. } if !path.is_file() => {
                return Err(Error::Missing {
                    what: "dataset file",
                    path: path.clone(),
                });
            }
            _ => {}
        }
        let a = &self.analysis;
        if a.alphas.iter().any(|x| !(0.0..=1.0).contains(x)) || !a.alphas.contains(&0.0) || !a.alphas.contains(&1.0) {
            return Err(Error::Config("analysis.alphas must lie in [0, 1] and include 0 and 1".into()));
        }
        if let Some(k) = a.ranks_for(mc.d_model).iter().find(|&&k| k == 0 || k > mc.d_model) {
            return Err(Error::Config(format!("analysis.ranks: {k} outside [1, {}]", mc.d_model)));
        }
        if let Some(l) = a.low_rank_layer.filter(|&l| l >= mc.n_layers) {
            return Err(Error::Config(format!("analysis.low_rank_layer {l} outside model")));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            n_layers: m.n_layers,
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            vocab_size: m.vocab_size,
            max_seq_len: m.max_seq_len,
            seed: self.seed,
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        self.pretrain.with_seed(self.seed)
    }

    pub fn tuning_config(&self) -> TrainConfig {
        self.tuning.with_seed(self.seed ^ streams::DPO)
    }

    pub fn corpus_seed(&self) -> u64 {
        self.seed ^ streams::CORPUS
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"schema":1,"seed":3}"#).unwrap();
        assert_eq!(cfg.model_config(), ModelConfig { seed: 3, ..ModelConfig::default() });
        assert_eq!(Study::expand(&cfg.studies).len(), 7);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = |f: &dyn Fn(&mut RunConfig)| {
            let mut c = RunConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(&|c| c.schema = 2));
        assert!(bad(&|c| c.studies.clear()));
        assert!(bad(&|c| c.model.n_heads = 5));
        assert!(bad(&|c| c.pretrain.steps = 0));
        assert!(bad(&|c| c.tuning.beta = 0.0));
        assert!(bad(&|c| c.analysis.alphas = vec![0.5, 1.0]));
        assert!(bad(&|c| c.analysis.ranks = Some(vec![65])));
        assert!(bad(&|c| {
            c.dataset = DatasetSource::Jsonl {
                path: "/definitely/not/here.jsonl".into(),
                sample: None,
            }
        }));
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"schema":1,"seed":0,"sede":1}"#).is_err());
    }

    #[test]
    fn study_names() {
        assert_eq!(Study::parse("lowrank").unwrap(), Study::Lowrank);
        assert!(Study::parse("nope").is_err());
        assert_eq!(Study::expand(&[Study::Attribute, Study::Sweep]), vec![Study::Sweep, Study::Attribute]);
    }

    #[test]
    fn default_ranks() {
        assert_eq!(AnalysisConfig::default().ranks_for(64), vec![1, 2, 4, 8, 16, 32, 64]);
        assert_eq!(AnalysisConfig::default().ranks_for(12), vec![1, 2, 4, 8, 12]);
    }
}
