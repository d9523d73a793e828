//! Flat parameter storage with a named-tensor layout.
//!
//! Every weight lives in one contiguous `Vec<f64>`; gradients use the same
//! layout, so optimizers and checksums work on plain slices.
//!
//! Initialization (all draws from one ChaCha8 stream seeded by
//! `ModelConfig::seed`, in layout order):
//! - token embedding: N(0, 1)
//! - norm gains: 1
//! - query/key/value and first feed-forward matrices: N(0, 1/d_in)
//! - attention output and second feed-forward matrices: N(0, 1/(2 L d_in))
//! - unembedding: N(0, 1/d_model)

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerOffsets {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ff_norm: usize,
    pub w1: usize,
    pub w2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub tok_emb: usize,
    pub layers: Vec<LayerOffsets>,
    pub final_norm: usize,
    pub unembed: usize,
    pub specs: Vec<TensorSpec>,
    pub total: usize,
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Self {
        let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
        let mut specs = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let spec = TensorSpec { name, shape, offset };
            offset += spec.len();
            let at = spec.offset;
            specs.push(spec);
            at
        };
        let tok_emb = push("tok_emb".into(), vec![v, d]);
        let mut layers = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            layers.push(LayerOffsets {
                attn_norm: push(format!("layers.{l}.attn_norm"), vec![d]),
                wq: push(format!("layers.{l}.wq"), vec![d, d]),
                wk: push(format!("layers.{l}.wk"), vec![d, d]),
                wv: push(format!("layers.{l}.wv"), vec![d, d]),
                wo: push(format!("layers.{l}.wo"), vec![d, d]),
                ff_norm: push(format!("layers.{l}.ff_norm"), vec![d]),
                w1: push(format!("layers.{l}.w1"), vec![d, f]),
                w2: push(format!("layers.{l}.w2"), vec![f, d]),
            });
        }
        let final_norm = push("final_norm".into(), vec![d]);
        let unembed = push("unembed".into(), vec![d, v]);
        let total = specs.iter().map(TensorSpec::len).sum();
        Self {
            tok_emb,
            layers,
            final_norm,
            unembed,
            specs,
            total,
        }
    }
}

/// Immutable model weights.
#[derive(Debug, Clone)]
pub struct Parameters {
    config: ModelConfig,
    pub(crate) layout: Layout,
    data: Vec<f64>,
}

impl PartialEq for Parameters {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.data == other.data
    }
}

impl Parameters {
    /// Wraps a flat vector laid out for `config`.
    pub fn from_flat(config: ModelConfig, data: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if data.len() != layout.total {
            return Err(Error::Shape(format!(
                "{} parameters supplied, layout needs {}",
                data.len(),
                layout.total
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "parameters",
                index,
            });
        }
        Ok(Self { config, layout, data })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor_specs(&self) -> &[TensorSpec] {
        &self.layout.specs
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .specs
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.data[s.range()])
    }

    /// Copy with `f` applied to the flat weights (used by optimizers and
    /// tests; the original is never touched).
    pub fn map_flat(&self, f: impl FnOnce(&mut [f64])) -> Result<Self> {
        let mut data = self.data.clone();
        f(&mut data);
        Self::from_flat(self.config.clone(), data)
    }

    /// SHA-256 over the config JSON and the little-endian weight bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Closed-form parameter count for `config`.
pub fn parameter_count(c: &ModelConfig) -> usize {
    Layout::new(c).total
}

/// Seeded scaled-Gaussian initialization.
pub fn init_params(config: &ModelConfig) -> Result<Parameters> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut data = vec![0.0; layout.total];
    let residual_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
    for spec in &layout.specs {
        let short = spec.name.rsplit('.').next().unwrap_or(&spec.name);
        let std = match short {
            "tok_emb" => 1.0,
            "attn_norm" | "ff_norm" | "final_norm" => {
                data[spec.range()].fill(1.0);
                continue;
            }
            "wq" | "wk" | "wv" | "w1" | "unembed" => 1.0 / (spec.shape[0] as f64).sqrt(),
            "wo" | "w2" => residual_scale / (spec.shape[0] as f64).sqrt(),
            other => unreachable!("unknown tensor {other}"),
        };
        for v in &mut data[spec.range()] {
            let z: f64 = rng.sample(StandardNormal);
            *v = z * std;
        }
    }
    Parameters::from_flat(config.clone(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bits() {
        let c = ModelConfig::default();
        assert_eq!(init_params(&c).unwrap().checksum(), init_params(&c).unwrap().checksum());
    }

    #[test]
    fn different_seed_different_bits() {
        let a = init_params(&ModelConfig::default()).unwrap();
        let b = init_params(&ModelConfig { seed: 1, ..ModelConfig::default() }).unwrap();
        assert_ne!(a.checksum(), b.checksum());
    }

    #[test]
    fn count_matches_shape_arithmetic() {
        let c = ModelConfig::default();
        let (v, d, f, l) = (64, 64, 256, 8);
        // embedding + per-layer (two gains, four DxD, two DxF) + final gain + unembedding
        let expected = v * d + l * (2 * d + 4 * d * d + 2 * d * f) + d + d * v;
        assert_eq!(parameter_count(&c), expected);
        assert_eq!(init_params(&c).unwrap().len(), expected);
    }

    #[test]
    fn named_tensors_cover_the_flat_vector() {
        let p = init_params(&ModelConfig::default()).unwrap();
        let mut next = 0;
        for s in p.tensor_specs() {
            assert_eq!(s.offset, next);
            next += s.len();
        }
        assert_eq!(next, p.len());
        assert!(p.tensor("final_norm").unwrap().iter().all(|g| *g == 1.0));
    }

    #[test]
    fn from_flat_rejects_bad_input() {
        let c = ModelConfig::default();
        assert!(Parameters::from_flat(c.clone(), vec![0.0; 3]).is_err());
        let mut data = vec![0.0; parameter_count(&c)];
        data[7] = f64::NAN;
        assert!(Parameters::from_flat(c, data).is_err());
    }
}
