//! Preference pairs: synthetic generation, JSONL ingestion and seeded
//! stratified sampling.

mod grammar;
mod jsonl;

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use grammar::{Style, StyleGrammar, BOS, SEP};
pub use jsonl::{decode_text, encode_tokens, load_jsonl, write_jsonl, ALPHABET};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TokenSequence};

/// Fraction of pairs assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: TokenSequence,
    pub chosen: TokenSequence,
    pub rejected: TokenSequence,
    pub tag: String,
}

impl PreferencePair {
    pub fn new(prompt: TokenSequence, chosen: TokenSequence, rejected: TokenSequence, tag: impl Into<String>) -> Result<Self> {
        if chosen == rejected {
            return Err(Error::Dataset("chosen and rejected completions are identical".into()));
        }
        Ok(Self {
            prompt,
            chosen,
            rejected,
            tag: tag.into(),
        })
    }

    /// Both `prompt + chosen` and `prompt + rejected` fit in `max_seq_len`.
    pub fn fits(&self, max_seq_len: usize) -> bool {
        self.prompt.len() + self.chosen.len().max(self.rejected.len()) <= max_seq_len
    }

    /// The same pair with chosen and rejected exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            prompt: self.prompt.clone(),
            chosen: self.rejected.clone(),
            rejected: self.chosen.clone(),
            tag: self.tag.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Provenance {
    Synthetic { seed: u64, n_pairs: usize, grammar: Box<StyleGrammar> },
    File { path: String, skipped_lines: usize, split_seed: u64 },
    Sample { parent: Box<Provenance>, parent_checksum: String, seed: u64, n: usize },
    Subset { parent: Box<Provenance>, selection: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDataset {
    pairs: Vec<PreferencePair>,
    split: Vec<Split>,
    provenance: Provenance,
}

impl PreferenceDataset {
    pub fn new(pairs: Vec<PreferencePair>, split: Vec<Split>, provenance: Provenance) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Dataset("dataset has no pairs".into()));
        }
        if split.len() != pairs.len() {
            return Err(Error::Dataset(format!("{} split labels for {} pairs", split.len(), pairs.len())));
        }
        Ok(Self { pairs, split, provenance })
    }

    pub fn pairs(&self) -> &[PreferencePair] {
        &self.pairs
    }

    pub fn split_labels(&self) -> &[Split] {
        &self.split
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter_split(&self, which: Split) -> impl Iterator<Item = &PreferencePair> {
        self.pairs.iter().zip(&self.split).filter(move |(_, s)| **s == which).map(|(p, _)| p)
    }

    /// New dataset holding only one split (labels preserved).
    pub fn subset(&self, which: Split) -> Result<Self> {
        let pairs: Vec<_> = self.iter_split(which).cloned().collect();
        let split = vec![which; pairs.len()];
        Self::new(
            pairs,
            split,
            Provenance::Subset {
                parent: Box::new(self.provenance.clone()),
                selection: format!("{which:?}").to_lowercase(),
            },
        )
    }

    /// Every pair fits the context window of `config`.
    pub fn check_fits(&self, config: &ModelConfig) -> Result<()> {
        match self.pairs.iter().position(|p| !p.fits(config.max_seq_len)) {
            Some(i) => Err(Error::Dataset(format!("pair {i} does not fit context {}", config.max_seq_len))),
            None => Ok(()),
        }
    }

    /// SHA-256 of the pairs and split labels.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.pairs).expect("pairs serialize"));
        h.update(serde_json::to_vec(&self.split).expect("split serializes"));
        hex::encode(h.finalize())
    }
}

/// Seeded 75/25 split: a shuffled prefix of `round(n * 0.75)` pairs is train.
pub fn assign_split(n: usize, seed: u64) -> Vec<Split> {
    let n_train = ((n as f64) * TRAIN_FRACTION).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7370_6c69_74));
    let mut out = vec![Split::Eval; n];
    for &i in &idx[..n_train] {
        out[i] = Split::Train;
    }
    out
}

/// Generates `n_pairs` pairs with distinct prompts from the seeded grammar.
pub fn generate_synthetic(seed: u64, n_pairs: usize, config: &ModelConfig) -> Result<PreferenceDataset> {
    if n_pairs < 2 {
        return Err(Error::Dataset(format!("need at least 2 pairs, got {n_pairs}")));
    }
    let grammar = StyleGrammar::new(seed, config)?;
    let capacity = grammar.capacity();
    if n_pairs as u128 > capacity {
        return Err(Error::Dataset(format!(
            "{n_pairs} pairs exceed the grammar capacity of {capacity} distinct prompts"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prompts: Vec<TokenSequence> = if (n_pairs as u128) * 4 > capacity {
        let mut all = grammar.enumerate_prompts();
        all.shuffle(&mut rng);
        all.truncate(n_pairs);
        all
    } else {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(n_pairs);
        while out.len() < n_pairs {
            let p = grammar.sample_prompt(&mut rng);
            if seen.insert(p.clone()) {
                out.push(p);
            }
        }
        out
    };
    let mut pairs = Vec::with_capacity(n_pairs);
    for prompt in prompts {
        let style = grammar.preferred_style(&prompt).expect("grammar prompt");
        let chosen = grammar.sample_completion(style, &mut rng);
        let rejected = grammar.sample_completion(style.other(), &mut rng);
        let tag = match style {
            Style::A => "prefers_a",
            Style::B => "prefers_b",
        };
        pairs.push(PreferencePair::new(prompt, chosen, rejected, tag)?);
    }
    let split = assign_split(n_pairs, seed);
    PreferenceDataset::new(
        pairs,
        split,
        Provenance::Synthetic {
            seed,
            n_pairs,
            grammar: Box::new(grammar),
        },
    )
}

/// Seeded sampling without replacement, stratified by tag. Each pair keeps
/// its split label from the parent.
pub fn sample(ds: &PreferenceDataset, n: usize, seed: u64) -> Result<PreferenceDataset> {
    if n > ds.len() {
        return Err(Error::Dataset(format!("cannot sample {n} pairs from {}", ds.len())));
    }
    if n == 0 {
        return Err(Error::Dataset("sample size must be at least 1".into()));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in ds.pairs.iter().enumerate() {
        groups.entry(p.tag.as_str()).or_default().push(i);
    }
    let total = ds.len() as f64;
    // Largest-remainder allocation of n across tags.
    let mut quotas: Vec<(usize, f64)> = groups
        .values()
        .map(|g| {
            let exact = n as f64 * g.len() as f64 / total;
            (exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut left = n - quotas.iter().map(|q| q.0).sum::<usize>();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].1.total_cmp(&quotas[a].1));
    for &g in &order {
        if left == 0 {
            break;
        }
        quotas[g].0 += 1;
        left -= 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(n);
    for (members, (quota, _)) in groups.values().zip(&quotas) {
        let mut m = members.clone();
        m.shuffle(&mut rng);
        picked.extend_from_slice(&m[..*quota]);
    }
    picked.shuffle(&mut rng);
    PreferenceDataset::new(
        picked.iter().map(|&i| ds.pairs[i].clone()).collect(),
        picked.iter().map(|&i| ds.split[i]).collect(),
        Provenance::Sample {
            parent: Box::new(ds.provenance.clone()),
            parent_checksum: ds.checksum(),
            seed,
            n,
        },
    )
}
