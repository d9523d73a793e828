//! Minimal pre-norm decoder-only transformer.
//!
//! Blocks are `x + Attn(RMSNorm(x))` followed by `x + FF(RMSNorm(x))` with a
//! GELU feed-forward, fixed sinusoidal positions and a final RMSNorm before
//! the unembedding. The residual stream after block `l` is what the trace
//! records and what a [`PatchPlan`] rewrites.

mod config;
mod forward;
mod ops;
mod params;

use serde::{Deserialize, Serialize};

pub use config::ModelConfig;
pub use forward::{backward, forward, forward_with_cache, ForwardCache, ForwardOutput};
pub use params::{init_params, parameter_count, Parameters, TensorSpec};

use crate::data::PreferencePair;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Non-empty list of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(tokens: Vec<u32>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("token sequence must be non-empty".into()));
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `self` followed by `other`.
    pub fn concat(&self, other: &TokenSequence) -> TokenSequence {
        let mut v = self.0.clone();
        v.extend_from_slice(&other.0);
        TokenSequence(v)
    }
}

/// Residual-stream states captured during one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    /// Embedding output (token + position), `seq_len x d_model`.
    pub pre: Matrix,
    /// `layers[l]`: residual stream after block `l`, post-patch.
    pub layers: Vec<Matrix>,
}

impl ActivationTrace {
    pub fn layer(&self, l: usize) -> &Matrix {
        &self.layers[l]
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }
}

/// How a patch rewrites the residual stream at the patched layer.
#[derive(Debug, Clone, PartialEq)]
pub enum PatchAction {
    /// `h <- (1 - alpha) h + alpha r`
    Replace(Matrix),
    /// `h <- h + alpha r`
    Add(Matrix),
}

impl PatchAction {
    pub fn matrix(&self) -> &Matrix {
        match self {
            PatchAction::Replace(m) | PatchAction::Add(m) => m,
        }
    }
}

/// One in-flight intervention on the residual stream after `layer`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPlan {
    pub layer: usize,
    pub action: PatchAction,
    pub alpha: f64,
    /// `None` patches every position.
    pub positions: Option<Vec<usize>>,
}

impl PatchPlan {
    /// Full replacement of every position.
    pub fn replace(layer: usize, replacement: Matrix) -> Self {
        Self {
            layer,
            action: PatchAction::Replace(replacement),
            alpha: 1.0,
            positions: None,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_positions(mut self, positions: Vec<usize>) -> Self {
        self.positions = Some(positions);
        self
    }
}

/// Sum of next-token log-probabilities of `completion` over the given
/// logits, where the completion starts at `prompt_len`.
pub fn completion_log_prob(logits: &Matrix, prompt_len: usize, completion: &TokenSequence) -> f64 {
    completion
        .tokens()
        .iter()
        .enumerate()
        .map(|(t, &tok)| ops::log_softmax(logits.row(prompt_len + t - 1))[tok as usize])
        .sum()
}

fn check_fits(params: &Parameters, prompt: &TokenSequence, completion: &TokenSequence) -> Result<()> {
    let len = prompt.len() + completion.len();
    let max = params.config().max_seq_len;
    if len > max {
        return Err(Error::ContextOverflow { len, max });
    }
    Ok(())
}

/// Teacher-forced `log p(completion | prompt)`.
pub fn log_prob_completion(
    params: &Parameters,
    prompt: &TokenSequence,
    completion: &TokenSequence,
    plan: Option<&PatchPlan>,
) -> Result<f64> {
    check_fits(params, prompt, completion)?;
    let out = forward(params, &prompt.concat(completion), plan)?;
    Ok(completion_log_prob(&out.logits, prompt.len(), completion))
}

/// Preference margin `log p(chosen | prompt) - log p(rejected | prompt)`
/// with the same plan applied to both runs.
pub fn delta_log_p(params: &Parameters, pair: &PreferencePair, plan: Option<&PatchPlan>) -> Result<f64> {
    delta_log_p_with(params, pair, plan, plan)
}

/// Preference margin with a separate plan for the chosen and rejected runs.
pub fn delta_log_p_with(
    params: &Parameters,
    pair: &PreferencePair,
    chosen_plan: Option<&PatchPlan>,
    rejected_plan: Option<&PatchPlan>,
) -> Result<f64> {
    let chosen = log_prob_completion(params, &pair.prompt, &pair.chosen, chosen_plan)?;
    let rejected = log_prob_completion(params, &pair.prompt, &pair.rejected, rejected_plan)?;
    Ok(chosen - rejected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 11,
            max_seq_len: 12,
            seed: 5,
        }
    }

    fn seq(v: &[u32]) -> TokenSequence {
        TokenSequence::new(v.to_vec()).unwrap()
    }

    #[test]
    fn empty_sequence_rejected() {
        assert!(TokenSequence::new(vec![]).is_err());
    }

    #[test]
    fn overflow_and_bad_tokens_rejected() {
        let p = init_params(&tiny()).unwrap();
        assert!(matches!(
            forward(&p, &seq(&[1; 13]), None),
            Err(Error::ContextOverflow { len: 13, max: 12 })
        ));
        assert!(forward(&p, &seq(&[11]), None).is_err());
        assert!(log_prob_completion(&p, &seq(&[1; 8]), &seq(&[2; 5]), None).is_err());
    }

    #[test]
    fn plan_shape_mismatch_rejected() {
        let p = init_params(&tiny()).unwrap();
        let s = seq(&[1, 2, 3]);
        assert!(forward(&p, &s, Some(&PatchPlan::replace(0, Matrix::zeros(2, 8)))).is_err());
        assert!(forward(&p, &s, Some(&PatchPlan::replace(3, Matrix::zeros(3, 8)))).is_err());
        assert!(forward(&p, &s, Some(&PatchPlan::replace(0, Matrix::zeros(3, 7)))).is_err());
        let bad_alpha = PatchPlan::replace(0, Matrix::zeros(3, 8)).with_alpha(1.5);
        assert!(forward(&p, &s, Some(&bad_alpha)).is_err());
    }

    #[test]
    fn alpha_zero_is_bit_exact_noop() {
        let p = init_params(&tiny()).unwrap();
        let s = seq(&[1, 4, 2, 9]);
        let base = forward(&p, &s, None).unwrap();
        let plan = PatchPlan::replace(1, Matrix::from_fn(4, 8, |r, c| (r * c) as f64)).with_alpha(0.0);
        let patched = forward(&p, &s, Some(&plan)).unwrap();
        assert_eq!(base.logits, patched.logits);
    }

    #[test]
    fn self_patch_is_identity() {
        let p = init_params(&tiny()).unwrap();
        let s = seq(&[3, 1, 4, 1, 5]);
        let base = forward(&p, &s, None).unwrap();
        for l in 0..3 {
            let plan = PatchPlan::replace(l, base.trace.layer(l).clone());
            let patched = forward(&p, &s, Some(&plan)).unwrap();
            assert!(base.logits.max_abs_diff(&patched.logits) < 1e-12);
        }
    }

    #[test]
    fn patch_leaves_earlier_layers_untouched() {
        let p = init_params(&tiny()).unwrap();
        let s = seq(&[3, 1, 4, 1, 5]);
        let base = forward(&p, &s, None).unwrap();
        let plan = PatchPlan::replace(2, Matrix::zeros(5, 8));
        let patched = forward(&p, &s, Some(&plan)).unwrap();
        assert_eq!(base.trace.pre, patched.trace.pre);
        assert_eq!(base.trace.layers[..2], patched.trace.layers[..2]);
        assert_eq!(patched.trace.layers[2], Matrix::zeros(5, 8));
    }

    #[test]
    fn position_subset_only_touches_listed_rows() {
        let p = init_params(&tiny()).unwrap();
        let s = seq(&[3, 1, 4, 1, 5]);
        let base = forward(&p, &s, None).unwrap();
        let plan = PatchPlan {
            layer: 0,
            action: PatchAction::Add(Matrix::from_fn(5, 8, |_, _| 1.0)),
            alpha: 0.5,
            positions: Some(vec![3]),
        };
        let patched = forward(&p, &s, Some(&plan)).unwrap();
        let (a, b) = (base.trace.layer(0), patched.trace.layer(0));
        for r in 0..5 {
            for c in 0..8 {
                let expect = if r == 3 { a.get(r, c) + 0.5 } else { a.get(r, c) };
                assert_eq!(b.get(r, c), expect);
            }
        }
        // Causal masking: rows before the patched position are unaffected downstream.
        for r in 0..3 {
            assert_eq!(base.logits.row(r), patched.logits.row(r));
        }
    }

    #[test]
    fn log_prob_bounds() {
        let p = init_params(&tiny()).unwrap();
        let lp = log_prob_completion(&p, &seq(&[1, 2, 3]), &seq(&[4, 5]), None).unwrap();
        assert!(lp <= 0.0 && lp.is_finite());
    }
}
