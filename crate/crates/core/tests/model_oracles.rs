mod common;

use alignlab::data::{generate_synthetic, PreferencePair};
use alignlab::model::{delta_log_p, forward, init_params, log_prob_completion, ModelConfig, Parameters, TokenSequence};
use proptest::prelude::*;

fn rms(x: &[f64], g: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = 1.0 / (ms + 1e-5).sqrt();
    x.iter().zip(g).map(|(v, g)| v * s * g).collect()
}

/// Row vector times a row-major `rows x cols` matrix.
fn vecmat(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..cols {
            out[j] += xi * w[i * cols + j];
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

#[test]
fn one_token_single_layer_matches_hand_forward() {
    let cfg = ModelConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_ff: 12,
        vocab_size: 10,
        max_seq_len: 4,
        seed: 21,
    };
    let p = common::jitter(&init_params(&cfg).unwrap(), 3, 0.5);
    let t = |n: &str| p.tensor(n).unwrap();
    let (d, f, v) = (8, 12, 10);
    for tok in 0..v {
        let emb = &t("tok_emb")[tok * d..(tok + 1) * d];
        // Position 0 has sin(0) = 0 on even and cos(0) = 1 on odd dimensions.
        let x: Vec<f64> = emb.iter().enumerate().map(|(j, e)| e + (j % 2) as f64).collect();
        // A single token attends only to itself.
        let a = rms(&x, t("layers.0.attn_norm"));
        let attn = vecmat(&vecmat(&a, t("layers.0.wv"), d), t("layers.0.wo"), d);
        let mid = add(&x, &attn);
        let b = rms(&mid, t("layers.0.ff_norm"));
        let hidden: Vec<f64> = vecmat(&b, t("layers.0.w1"), f).into_iter().map(gelu).collect();
        let post = add(&mid, &vecmat(&hidden, t("layers.0.w2"), d));
        let logits = vecmat(&rms(&post, t("final_norm")), t("unembed"), v);

        let out = forward(&p, &TokenSequence::new(vec![tok as u32]).unwrap(), None).unwrap();
        for j in 0..d {
            assert!((out.trace.layer(0).get(0, j) - post[j]).abs() < 1e-12);
        }
        for j in 0..v {
            assert!((out.logits.get(0, j) - logits[j]).abs() < 1e-12, "token {tok} logit {j}");
        }
    }
}

#[test]
fn single_token_completion_is_log_softmax_of_last_prompt_row() {
    let cfg = common::small_config(4);
    let p = init_params(&cfg).unwrap();
    let prompt = TokenSequence::new(vec![1, 5, 9, 2]).unwrap();
    for tok in [0u32, 7, 63] {
        let completion = TokenSequence::new(vec![tok]).unwrap();
        let got = log_prob_completion(&p, &prompt, &completion, None).unwrap();
        let logits = forward(&p, &prompt, None).unwrap().logits;
        let row = logits.row(3);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        let expect = (row[tok as usize].exp() / z).ln();
        assert!((got - expect).abs() < 1e-12);
    }
}

fn uniform(cfg: &ModelConfig) -> Parameters {
    let p = init_params(cfg).unwrap();
    let range = p.tensor_specs().iter().find(|s| s.name == "unembed").unwrap().range();
    p.map_flat(|w| w[range].fill(0.0)).unwrap()
}

#[test]
fn uniform_logits_give_length_identity_and_zero_margin() {
    let cfg = common::small_config(5);
    let p = uniform(&cfg);
    let ds = generate_synthetic(5, 8, &cfg).unwrap();
    let ln_v = (cfg.vocab_size as f64).ln();
    for pair in ds.pairs() {
        let lp = log_prob_completion(&p, &pair.prompt, &pair.chosen, None).unwrap();
        assert!((lp + pair.chosen.len() as f64 * ln_v).abs() < 1e-12);
        let same_len = PreferencePair::new(
            pair.prompt.clone(),
            pair.chosen.clone(),
            TokenSequence::new(pair.chosen.tokens().iter().map(|t| (t + 1) % 64).collect()).unwrap(),
            "",
        )
        .unwrap();
        assert!(delta_log_p(&p, &same_len, None).unwrap().abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn later_tokens_never_change_earlier_outputs(
        toks in prop::collection::vec(0u32..64, 2..20),
        tail in prop::collection::vec(0u32..64, 1..10),
        seed in 0u64..8,
    ) {
        let p = init_params(&common::small_config(seed)).unwrap();
        let short = forward(&p, &TokenSequence::new(toks.clone()).unwrap(), None).unwrap();
        let mut longer = toks.clone();
        longer.extend(&tail);
        let long = forward(&p, &TokenSequence::new(longer).unwrap(), None).unwrap();
        for t in 0..toks.len() {
            for (a, b) in short.logits.row(t).iter().zip(long.logits.row(t)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            for l in 0..3 {
                for (a, b) in short.trace.layer(l).row(t).iter().zip(long.trace.layer(l).row(t)) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn log_probs_are_nonpositive_and_finite(toks in prop::collection::vec(0u32..64, 2..30), seed in 0u64..8) {
        let p = init_params(&common::small_config(seed)).unwrap();
        let (a, b) = toks.split_at(toks.len() / 2);
        let lp = log_prob_completion(&p, &TokenSequence::new(a.to_vec()).unwrap(), &TokenSequence::new(b.to_vec()).unwrap(), None).unwrap();
        prop_assert!(lp.is_finite() && lp <= 0.0);
    }
}
