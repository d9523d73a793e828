//! Base/tuned model pair: next-token pretraining on a preference-neutral
//! corpus, then DPO against the frozen base with clipped plain SGD.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PreferenceDataset, PreferencePair, Split, StyleGrammar};
use crate::error::{Error, Result};
use crate::model::{
    backward, completion_log_prob, delta_log_p, forward, forward_with_cache, init_params, log_prob_completion,
    ModelConfig, Parameters, TokenSequence,
};
use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// DPO temperature; unused by pretraining.
    #[serde(default = "default_beta")]
    pub beta: f64,
    pub gradient_clip: f64,
    pub seed: u64,
}

fn default_beta() -> f64 {
    0.1
}

impl TrainConfig {
    pub fn pretrain_default() -> Self {
        Self {
            learning_rate: 0.3,
            steps: 400,
            batch_size: 16,
            beta: default_beta(),
            gradient_clip: 1.0,
            seed: 0,
        }
    }

    pub fn dpo_default() -> Self {
        Self {
            learning_rate: 0.3,
            steps: 500,
            batch_size: 8,
            beta: default_beta(),
            gradient_clip: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be > 0, got {}", self.beta)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if !(self.gradient_clip > 0.0) {
            return Err(Error::InvalidArgument("gradient_clip must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    /// Global gradient norm before clipping, per step.
    pub grad_norms: Vec<f64>,
    /// Mean Δlog p over the training split of the evaluation dataset.
    pub train_margin: Option<f64>,
    pub eval_margin: Option<f64>,
    pub wall_time_secs: f64,
}

/// Where pretraining sequences come from. Both sources are neutral with
/// respect to the preference: completions are a fair coin flip between the
/// two candidate styles or the two stored completions.
#[derive(Debug, Clone)]
pub enum CorpusSource<'a> {
    Grammar(&'a StyleGrammar),
    Pairs(&'a PreferenceDataset),
}

impl CorpusSource<'_> {
    fn draw(&self, rng: &mut ChaCha8Rng) -> TokenSequence {
        match self {
            CorpusSource::Grammar(g) => {
                let (p, c) = g.sample_neutral_sequence(rng);
                p.concat(&c)
            }
            CorpusSource::Pairs(ds) => {
                let pair = &ds.pairs()[rng.random_range(0..ds.len())];
                if rng.random_bool(0.5) {
                    pair.prompt.concat(&pair.chosen)
                } else {
                    pair.prompt.concat(&pair.rejected)
                }
            }
        }
    }
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Next-token cross-entropy summed over positions; accumulates the gradient
/// of `scale * sum` into `grad`. Returns the summed loss and token count.
fn lm_loss_and_grad(params: &Parameters, seq: &TokenSequence, scale: f64, grad: &mut [f64]) -> Result<(f64, usize)> {
    let (out, cache) = forward_with_cache(params, seq)?;
    let t_len = seq.len();
    let v = params.config().vocab_size;
    let mut dlogits = Matrix::zeros(t_len, v);
    let mut loss = 0.0;
    for t in 0..t_len - 1 {
        let target = seq.tokens()[t + 1] as usize;
        let p = softmax_row(out.logits.row(t));
        loss -= p[target].max(f64::MIN_POSITIVE).ln();
        let row = dlogits.row_mut(t);
        for (g, pv) in row.iter_mut().zip(&p) {
            *g = scale * pv;
        }
        row[target] -= scale;
    }
    backward(params, &cache, &dlogits, grad);
    Ok((loss, t_len - 1))
}

/// `log p(completion | prompt)` and, into `grad`, `coef * d/dθ` of it.
fn completion_log_prob_grad(
    params: &Parameters,
    prompt: &TokenSequence,
    completion: &TokenSequence,
    coef: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let seq = prompt.concat(completion);
    let max = params.config().max_seq_len;
    if seq.len() > max {
        return Err(Error::ContextOverflow { len: seq.len(), max });
    }
    let (out, cache) = forward_with_cache(params, &seq)?;
    let lp = completion_log_prob(&out.logits, prompt.len(), completion);
    let mut dlogits = Matrix::zeros(seq.len(), params.config().vocab_size);
    for (t, &tok) in completion.tokens().iter().enumerate() {
        let pos = prompt.len() + t - 1;
        let p = softmax_row(out.logits.row(pos));
        let row = dlogits.row_mut(pos);
        for (g, pv) in row.iter_mut().zip(&p) {
            *g = -coef * pv;
        }
        row[tok as usize] += coef;
    }
    backward(params, &cache, &dlogits, grad);
    Ok(lp)
}

fn clip(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

fn sgd_step(params: &Parameters, grad: &[f64], lr: f64) -> Result<Parameters> {
    params.map_flat(|w| {
        for (x, g) in w.iter_mut().zip(grad) {
            *x -= lr * g;
        }
    })
}

/// Mean Δlog p over the given pairs.
pub fn mean_margin<'a>(params: &Parameters, pairs: impl IntoIterator<Item = &'a PreferencePair>) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0;
    for p in pairs {
        sum += delta_log_p(params, p, None)?;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Fills the margin fields of `report` from `ds`.
pub fn record_margins(params: &Parameters, ds: &PreferenceDataset, report: &mut TrainReport) -> Result<()> {
    report.train_margin = Some(mean_margin(params, ds.iter_split(Split::Train))?);
    report.eval_margin = Some(mean_margin(params, ds.iter_split(Split::Eval))?);
    Ok(())
}

/// Next-token pretraining from a seeded initialization.
pub fn pretrain(
    config: &ModelConfig,
    tc: &TrainConfig,
    corpus: &CorpusSource<'_>,
    corpus_seed: u64,
) -> Result<(Parameters, TrainReport)> {
    tc.validate()?;
    if tc.steps == 0 {
        return Err(Error::InvalidArgument("pretraining needs at least one step".into()));
    }
    let start = Instant::now();
    let mut params = init_params(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(corpus_seed);
    let mut losses = Vec::with_capacity(tc.steps);
    let mut norms = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let batch: Vec<TokenSequence> = (0..tc.batch_size).map(|_| corpus.draw(&mut rng)).collect();
        let n_tokens: usize = batch.iter().map(|s| s.len() - 1).sum();
        let scale = 1.0 / n_tokens as f64;
        let mut grad = vec![0.0; params.len()];
        let mut total = 0.0;
        for seq in &batch {
            total += lm_loss_and_grad(&params, seq, scale, &mut grad)?.0;
        }
        let loss = total / n_tokens as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss, partial_losses: losses });
        }
        losses.push(loss);
        norms.push(clip(&mut grad, tc.gradient_clip));
        params = sgd_step(&params, &grad, tc.learning_rate)?;
    }
    Ok((
        params,
        TrainReport {
            losses,
            grad_norms: norms,
            train_margin: None,
            eval_margin: None,
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Mean next-token cross-entropy of `params` on `n` fresh corpus sequences.
pub fn corpus_cross_entropy(params: &Parameters, corpus: &CorpusSource<'_>, n: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut loss = 0.0;
    let mut count = 0;
    for _ in 0..n {
        let seq = corpus.draw(&mut rng);
        let out = forward(params, &seq, None)?;
        for t in 0..seq.len() - 1 {
            let p = softmax_row(out.logits.row(t));
            loss -= p[seq.tokens()[t + 1] as usize].ln();
            count += 1;
        }
    }
    Ok(loss / count as f64)
}

/// DPO loss and gradient with respect to the policy parameters:
/// `-log σ(β [(log π(y+) - log π_ref(y+)) - (log π(y-) - log π_ref(y-))])`.
pub fn dpo_loss(policy: &Parameters, reference: &Parameters, pair: &PreferencePair, beta: f64) -> Result<(f64, Vec<f64>)> {
    let ref_chosen = log_prob_completion(reference, &pair.prompt, &pair.chosen, None)?;
    let ref_rejected = log_prob_completion(reference, &pair.prompt, &pair.rejected, None)?;
    let mut grad = vec![0.0; policy.len()];
    let loss = dpo_loss_with_reference(policy, pair, beta, (ref_chosen, ref_rejected), &mut grad)?;
    Ok((loss, grad))
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// DPO loss for one pair given precomputed reference log-probs; accumulates
/// its gradient into `grad`.
fn dpo_loss_with_reference(
    policy: &Parameters,
    pair: &PreferencePair,
    beta: f64,
    reference: (f64, f64),
    grad: &mut [f64],
) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be > 0, got {beta}")));
    }
    // The logit z needs both policy log-probs before the gradient scale is
    // known, so the backward passes run with a unit coefficient into scratch
    // buffers and are combined afterwards.
    let mut g_chosen = vec![0.0; grad.len()];
    let mut g_rejected = vec![0.0; grad.len()];
    let lp_c = completion_log_prob_grad(policy, &pair.prompt, &pair.chosen, 1.0, &mut g_chosen)?;
    let lp_r = completion_log_prob_grad(policy, &pair.prompt, &pair.rejected, 1.0, &mut g_rejected)?;
    let z = beta * ((lp_c - reference.0) - (lp_r - reference.1));
    let loss = softplus(-z);
    // dL/dz = -σ(-z)
    let coef = -beta * sigmoid(-z);
    for ((g, c), r) in grad.iter_mut().zip(&g_chosen).zip(&g_rejected) {
        *g += coef * (c - r);
    }
    Ok(loss)
}

/// Preference-tunes a copy of `base` on the training split of `ds`.
pub fn dpo_tune(base: &Parameters, ds: &PreferenceDataset, tc: &TrainConfig) -> Result<(Parameters, TrainReport)> {
    tc.validate()?;
    let start = Instant::now();
    let train: Vec<&PreferencePair> = ds.iter_split(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Dataset("no training pairs for preference tuning".into()));
    }
    let references: Vec<(f64, f64)> = train
        .iter()
        .map(|p| {
            Ok((
                log_prob_completion(base, &p.prompt, &p.chosen, None)?,
                log_prob_completion(base, &p.prompt, &p.rejected, None)?,
            ))
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut policy = base.clone();
    let mut losses = Vec::with_capacity(tc.steps);
    let mut norms = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let mut batch = Vec::with_capacity(tc.batch_size);
        while batch.len() < tc.batch_size.min(train.len()) {
            if cursor == order.len() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let mut grad = vec![0.0; policy.len()];
        let mut total = 0.0;
        for &i in &batch {
            total += dpo_loss_with_reference(&policy, train[i], tc.beta, references[i], &mut grad)?;
        }
        let scale = 1.0 / batch.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss, partial_losses: losses });
        }
        losses.push(loss);
        norms.push(clip(&mut grad, tc.gradient_clip));
        policy = sgd_step(&policy, &grad, tc.learning_rate)?;
    }
    let mut report = TrainReport {
        losses,
        grad_norms: norms,
        train_margin: None,
        eval_margin: None,
        wall_time_secs: 0.0,
    };
    record_margins(&policy, ds, &mut report)?;
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((policy, report))
}
