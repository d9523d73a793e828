#![allow(dead_code)]

use alignlab::data::{generate_synthetic, PreferenceDataset, StyleGrammar};
use alignlab::model::{init_params, ModelConfig, Parameters};
use alignlab::tuning::{dpo_tune, pretrain, CorpusSource, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 3,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 64,
        max_seq_len: 64,
        seed,
    }
}

pub fn jitter(p: &Parameters, seed: u64, scale: f64) -> Parameters {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    p.map_flat(|w| w.iter_mut().for_each(|x| *x += scale * (rng.random::<f64>() - 0.5)))
        .unwrap()
}

/// An untrained base and a randomly perturbed copy standing in for the
/// tuned model.
pub fn perturbed_pair(seed: u64, n_pairs: usize) -> (Parameters, Parameters, PreferenceDataset) {
    let cfg = small_config(seed);
    let base = init_params(&cfg).unwrap();
    let tuned = jitter(&base, seed + 100, 0.2);
    let ds = generate_synthetic(seed, n_pairs, &cfg).unwrap();
    (base, tuned, ds)
}

/// A briefly pretrained and preference-tuned pair on the small config.
pub fn trained_pair(seed: u64, n_pairs: usize) -> (Parameters, Parameters, PreferenceDataset) {
    let cfg = small_config(seed);
    let grammar = StyleGrammar::new(seed, &cfg).unwrap();
    let pt = TrainConfig {
        steps: 60,
        batch_size: 8,
        seed,
        ..TrainConfig::pretrain_default()
    };
    let (base, _) = pretrain(&cfg, &pt, &CorpusSource::Grammar(&grammar), seed ^ 7).unwrap();
    let ds = generate_synthetic(seed, n_pairs, &cfg).unwrap();
    let tc = TrainConfig {
        steps: 80,
        seed,
        ..TrainConfig::dpo_default()
    };
    let (tuned, _) = dpo_tune(&base, &ds, &tc).unwrap();
    (base, tuned, ds)
}
