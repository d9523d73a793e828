//! Seeded prompt grammar with a hidden "preferred style" rule.
//!
//! Token layout for vocabulary size `V` (with `p = (V - 2) / 4` prompt
//! symbols and `s = (V - 2 - p) / 2` tokens per style):
//!
//! ```text
//! 0            BOS
//! 1            SEP (end of prompt)
//! 2 .. 2+p     prompt symbols
//! 2+p .. +s    style A
//! .. +s        style B
//! ```
//!
//! Prompts are `BOS x_1 .. x_n SEP` where `x_1` is uniform and each next
//! symbol is drawn from a fixed random successor set of its predecessor.
//! Completions are `completion_len` tokens from one style. The preferred
//! style of a prompt is a fixed, balanced, seeded function of its final
//! symbol; a completion satisfies the rule when all its tokens come from the
//! preferred style.

use std::ops::Range;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TokenSequence};

pub const BOS: u32 = 0;
pub const SEP: u32 = 1;

/// Response style.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    A,
    B,
}

impl Style {
    pub fn other(self) -> Style {
        match self {
            Style::A => Style::B,
            Style::B => Style::A,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleGrammar {
    pub seed: u64,
    pub prompt_symbols: Range<u32>,
    pub style_a: Range<u32>,
    pub style_b: Range<u32>,
    pub min_prompt_len: usize,
    pub max_prompt_len: usize,
    pub completion_len: usize,
    pub branching: usize,
    /// Successor set of each prompt symbol, indexed from `prompt_symbols.start`.
    pub successors: Vec<Vec<u32>>,
    /// Preferred style keyed by final prompt symbol.
    pub preferred: Vec<Style>,
}

const MIN_PROMPT: usize = 3;
const MAX_PROMPT: usize = 6;
const COMPLETION: usize = 4;
const BRANCHING: usize = 3;

impl StyleGrammar {
    pub fn new(seed: u64, config: &ModelConfig) -> Result<Self> {
        let v = config.vocab_size;
        if v < 10 || v > u32::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "synthetic grammar needs a vocabulary of at least 10 tokens, got {v}"
            )));
        }
        let p = (v - 2) / 4;
        let s = (v - 2 - p) / 2;
        let max_seq = 2 + MAX_PROMPT + COMPLETION;
        if config.max_seq_len < max_seq {
            return Err(Error::InvalidArgument(format!(
                "synthetic sequences need max_seq_len >= {max_seq}, got {}",
                config.max_seq_len
            )));
        }
        let ps = 2..(2 + p) as u32;
        let style_a = ps.end..ps.end + s as u32;
        let style_b = style_a.end..style_a.end + s as u32;

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_616d_6d61_72);
        let symbols: Vec<u32> = ps.clone().collect();
        let branching = BRANCHING.min(p);
        let successors = symbols
            .iter()
            .map(|_| {
                let mut pick: Vec<u32> = symbols.choose_multiple(&mut rng, branching).copied().collect();
                pick.sort_unstable();
                pick
            })
            .collect();
        let mut preferred: Vec<Style> = (0..p).map(|i| if i % 2 == 0 { Style::A } else { Style::B }).collect();
        preferred.shuffle(&mut rng);

        Ok(Self {
            seed,
            prompt_symbols: ps,
            style_a,
            style_b,
            min_prompt_len: MIN_PROMPT,
            max_prompt_len: MAX_PROMPT,
            completion_len: COMPLETION,
            branching,
            successors,
            preferred,
        })
    }

    pub fn style_tokens(&self, style: Style) -> Range<u32> {
        match style {
            Style::A => self.style_a.clone(),
            Style::B => self.style_b.clone(),
        }
    }

    /// Number of distinct prompts the grammar can produce.
    pub fn capacity(&self) -> u128 {
        let p = self.prompt_symbols.len() as u128;
        let b = self.branching as u128;
        (self.min_prompt_len..=self.max_prompt_len)
            .map(|len| p * b.pow(len as u32 - 1))
            .sum()
    }

    /// Preferred style for a full prompt (`BOS .. SEP`).
    pub fn preferred_style(&self, prompt: &TokenSequence) -> Option<Style> {
        let t = prompt.tokens();
        if t.len() < 3 || t[t.len() - 1] != SEP {
            return None;
        }
        let last = t[t.len() - 2];
        self.prompt_symbols
            .contains(&last)
            .then(|| self.preferred[(last - self.prompt_symbols.start) as usize])
    }

    /// The style rule: every completion token is from the preferred style.
    pub fn satisfies(&self, prompt: &TokenSequence, completion: &TokenSequence) -> bool {
        match self.preferred_style(prompt) {
            Some(style) => {
                let range = self.style_tokens(style);
                completion.tokens().iter().all(|t| range.contains(t))
            }
            None => false,
        }
    }

    pub fn sample_prompt(&self, rng: &mut impl Rng) -> TokenSequence {
        let len = rng.random_range(self.min_prompt_len..=self.max_prompt_len);
        let mut tokens = Vec::with_capacity(len + 2);
        tokens.push(BOS);
        let mut sym = rng.random_range(self.prompt_symbols.clone());
        tokens.push(sym);
        for _ in 1..len {
            let next = &self.successors[(sym - self.prompt_symbols.start) as usize];
            sym = *next.choose(rng).expect("non-empty successor set");
            tokens.push(sym);
        }
        tokens.push(SEP);
        TokenSequence::new(tokens).expect("non-empty")
    }

    /// Every prompt the grammar can produce, in lexicographic order.
    pub fn enumerate_prompts(&self) -> Vec<TokenSequence> {
        let mut out = Vec::new();
        let mut stack: Vec<Vec<u32>> = self.prompt_symbols.clone().map(|s| vec![s]).collect();
        stack.reverse();
        while let Some(path) = stack.pop() {
            if path.len() >= self.min_prompt_len {
                let mut t = vec![BOS];
                t.extend_from_slice(&path);
                t.push(SEP);
                out.push(TokenSequence::new(t).expect("non-empty"));
            }
            if path.len() < self.max_prompt_len {
                let last = *path.last().expect("non-empty path");
                for &n in self.successors[(last - self.prompt_symbols.start) as usize].iter().rev() {
                    let mut p = path.clone();
                    p.push(n);
                    stack.push(p);
                }
            }
        }
        out
    }

    pub fn sample_completion(&self, style: Style, rng: &mut impl Rng) -> TokenSequence {
        let range = self.style_tokens(style);
        let tokens = (0..self.completion_len).map(|_| rng.random_range(range.clone())).collect();
        TokenSequence::new(tokens).expect("completion_len >= 1")
    }

    /// One preference-neutral training sequence: a prompt followed by a
    /// completion whose style is a fair coin flip.
    pub fn sample_neutral_sequence(&self, rng: &mut impl Rng) -> (TokenSequence, TokenSequence) {
        let prompt = self.sample_prompt(rng);
        let style = if rng.random_bool(0.5) { Style::A } else { Style::B };
        let completion = self.sample_completion(style, rng);
        (prompt, completion)
    }
}
