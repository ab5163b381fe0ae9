//! Autoregressive token policies with a value head.

mod checkpoint;
mod sampling;
mod tabular;
mod transformer;

use std::sync::Arc;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, TrainerState, CHECKPOINT_MAGIC,
};
pub use sampling::{sample_batch, sample_sequence, SampleRequest, Sampled};
pub use tabular::TabularPolicy;
pub use transformer::{ModelConfig, TransformerPolicy};

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::stats;
use crate::tape::{Segment, Tape, Var};
use crate::tensor::Tensor;

/// Prompt plus generated tokens, optionally right-padded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<u32>,
    prompt_len: usize,
    valid_len: usize,
}

impl TokenSequence {
    pub fn new(tokens: Vec<u32>, prompt_len: usize) -> Result<Self> {
        let valid_len = tokens.len();
        Self::with_valid_len(tokens, prompt_len, valid_len)
    }

    pub fn with_valid_len(tokens: Vec<u32>, prompt_len: usize, valid_len: usize) -> Result<Self> {
        if prompt_len > valid_len || valid_len > tokens.len() {
            return Err(Error::usage(format!(
                "token sequence needs prompt ({prompt_len}) <= valid ({valid_len}) <= length ({})",
                tokens.len()
            )));
        }
        Ok(TokenSequence {
            tokens,
            prompt_len,
            valid_len,
        })
    }

    pub fn prompt(tokens: Vec<u32>) -> Self {
        let n = tokens.len();
        TokenSequence {
            tokens,
            prompt_len: n,
            valid_len: n,
        }
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn valid(&self) -> &[u32] {
        &self.tokens[..self.valid_len]
    }

    pub fn prompt_tokens(&self) -> &[u32] {
        &self.tokens[..self.prompt_len]
    }

    pub fn generated(&self) -> &[u32] {
        &self.tokens[self.prompt_len..self.valid_len]
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn valid_len(&self) -> usize {
        self.valid_len
    }

    /// Appends `pad` until the sequence is `len` tokens long.
    pub fn padded(mut self, pad: u32, len: usize) -> Self {
        while self.tokens.len() < len {
            self.tokens.push(pad);
        }
        self
    }

    /// Checks ids against the vocabulary, the context window and PAD placement.
    pub fn validate(&self, vocab: usize, context: usize, pad: Option<u32>) -> Result<()> {
        if self.valid_len > context {
            return Err(Error::usage(format!(
                "sequence of {} tokens exceeds context {context}",
                self.valid_len
            )));
        }
        if let Some(bad) = self.tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::usage(format!(
                "token id {bad} outside vocabulary of {vocab}"
            )));
        }
        if let Some(pad) = pad {
            if self.valid().contains(&pad) {
                return Err(Error::usage("PAD inside the valid part of a sequence"));
            }
            if self.tokens[self.valid_len..].iter().any(|&t| t != pad) {
                return Err(Error::usage("non-PAD token after the valid length"));
            }
        }
        Ok(())
    }
}

/// Logits and values of several sequences packed row-wise on one tape.
#[derive(Clone, Debug)]
pub struct PackedOutput {
    /// `[rows, vocab]`; row `t` of a segment is the next-token distribution after token `t`.
    pub logits: Var,
    /// `[rows]`; value of the state ending at that row.
    pub values: Var,
    pub segments: Vec<Segment>,
}

/// A causal next-token policy with a scalar value head.
pub trait Policy<S: Scalar>: Clone + Send + Sync {
    /// Number of actions (output tokens).
    fn vocab_size(&self) -> usize;
    /// Accepted input ids are `0..input_vocab_size()`.
    fn input_vocab_size(&self) -> usize {
        self.vocab_size()
    }
    fn context_len(&self) -> usize;
    fn params(&self) -> &ParameterStore<S>;
    fn params_mut(&mut self) -> &mut ParameterStore<S>;

    /// Forward over sequences packed back to back; uses `params` in place of the
    /// policy's own store so callers can evaluate perturbed copies.
    fn forward_with(
        &self,
        params: &ParameterStore<S>,
        tape: &mut Tape<S>,
        sequences: &[&[u32]],
    ) -> Result<PackedOutput>;

    fn forward_packed(&self, tape: &mut Tape<S>, sequences: &[&[u32]]) -> Result<PackedOutput> {
        self.forward_with(self.params(), tape, sequences)
    }
}

pub(crate) fn check_inputs<S: Scalar, P: Policy<S>>(
    policy: &P,
    sequences: &[&[u32]],
) -> Result<Vec<Segment>> {
    if sequences.is_empty() {
        return Err(Error::usage("forward on an empty batch"));
    }
    let mut segments = Vec::with_capacity(sequences.len());
    let mut start = 0;
    for seq in sequences {
        if seq.is_empty() {
            return Err(Error::usage("forward on an empty sequence"));
        }
        if seq.len() > policy.context_len() {
            return Err(Error::usage(format!(
                "sequence of {} tokens exceeds context {}",
                seq.len(),
                policy.context_len()
            )));
        }
        if let Some(bad) = seq
            .iter()
            .find(|&&t| t as usize >= policy.input_vocab_size())
        {
            return Err(Error::usage(format!("token id {bad} outside vocabulary")));
        }
        segments.push(Segment {
            start,
            len: seq.len(),
        });
        start += seq.len();
    }
    Ok(segments)
}

/// Per-position logits and values of one sequence (valid positions only).
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput<S> {
    pub logits: Tensor<S>,
    pub values: Tensor<S>,
}

/// Runs the policy on the valid part of one sequence.
pub fn forward<S: Scalar, P: Policy<S>>(
    policy: &P,
    sequence: &TokenSequence,
) -> Result<PolicyOutput<S>> {
    if sequence.valid_len() > policy.context_len() {
        return Err(Error::usage(format!(
            "sequence of {} tokens exceeds context {}",
            sequence.valid_len(),
            policy.context_len()
        )));
    }
    let mut tape = Tape::new();
    let out = policy.forward_packed(&mut tape, &[sequence.valid()])?;
    Ok(PolicyOutput {
        logits: tape.value(out.logits).clone(),
        values: tape.value(out.values).clone(),
    })
}

/// Statistics of the policy at the state preceding one generated token.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionStats {
    pub log_prob: f64,
    pub distribution: Vec<f64>,
    pub entropy: f64,
    pub value: f64,
}

/// For each token position `p ≥ 1` in `positions`, statistics of the state `tokens[..p]`
/// and of the action `tokens[p]`.
pub fn sequence_stats<S: Scalar>(
    output: &PolicyOutput<S>,
    sequence: &TokenSequence,
    positions: impl IntoIterator<Item = usize>,
) -> Result<Vec<PositionStats>> {
    positions
        .into_iter()
        .map(|p| {
            if p == 0 || p >= sequence.valid_len() || p > output.logits.rows() {
                return Err(Error::usage(format!(
                    "position {p} outside the generated range"
                )));
            }
            let row: Vec<f64> = output
                .logits
                .row(p - 1)
                .iter()
                .map(|v| v.as_f64())
                .collect();
            let distribution = stats::softmax(&row);
            let action = sequence.tokens()[p] as usize;
            let log_prob = distribution[action].max(crate::tape::LOG_FLOOR).ln();
            let entropy = stats::entropy(&distribution);
            Ok(PositionStats {
                log_prob,
                entropy,
                value: output.values.values()[p - 1].as_f64(),
                distribution,
            })
        })
        .collect()
}

/// Immutable copy of a policy taken at some point in training.
#[derive(Clone, Debug)]
pub struct FrozenPolicy<P> {
    inner: Arc<P>,
}

impl<P> FrozenPolicy<P> {
    pub fn policy(&self) -> &P {
        &self.inner
    }
}

/// Freezes the current parameters as a reference policy.
pub fn snapshot_reference<P: Clone>(policy: &P) -> FrozenPolicy<P> {
    FrozenPolicy {
        inner: Arc::new(policy.clone()),
    }
}
