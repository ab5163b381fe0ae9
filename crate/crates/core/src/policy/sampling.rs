use rand::Rng;

use super::{Policy, TokenSequence};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stats;
use crate::tape::{Tape, LOG_FLOOR};

/// One prompt to continue, with its generation budget.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRequest {
    pub prompt: Vec<u32>,
    pub budget: usize,
}

/// A sampled continuation and `log π(a_t | s_t)` for each generated token.
#[derive(Clone, Debug, PartialEq)]
pub struct Sampled {
    pub sequence: TokenSequence,
    pub log_probs: Vec<f64>,
}

/// Draws an index from `probs` using one uniform variate.
fn draw<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_nonzero = i;
        }
        cumulative += p;
        if u < cumulative {
            return i;
        }
    }
    last_nonzero
}

/// Samples continuations for a batch of prompts at temperature 1.
///
/// Each request draws only from its own generator `rngs[i]`, so the result for a
/// request does not depend on which other requests share the batch.
pub fn sample_batch<S: Scalar, P: Policy<S>, R: Rng>(
    policy: &P,
    requests: &[SampleRequest],
    stop: Option<u32>,
    rngs: &mut [R],
) -> Result<Vec<Sampled>> {
    if rngs.len() != requests.len() {
        return Err(Error::usage("one random generator per request is required"));
    }
    for r in requests {
        if r.prompt.is_empty() {
            return Err(Error::usage("cannot sample from an empty prompt"));
        }
        if r.budget == 0 {
            return Err(Error::usage("generation budget must be at least 1"));
        }
        if r.prompt.len() + r.budget > policy.context_len() {
            return Err(Error::usage(format!(
                "prompt ({}) plus budget ({}) exceeds context {}",
                r.prompt.len(),
                r.budget,
                policy.context_len()
            )));
        }
    }
    let mut tokens: Vec<Vec<u32>> = requests.iter().map(|r| r.prompt.clone()).collect();
    let mut log_probs: Vec<Vec<f64>> = vec![Vec::new(); requests.len()];
    let mut active: Vec<usize> = (0..requests.len()).collect();

    while !active.is_empty() {
        let mut tape = Tape::new();
        let slices: Vec<&[u32]> = active.iter().map(|&i| tokens[i].as_slice()).collect();
        let out = policy.forward_packed(&mut tape, &slices)?;
        let logits = tape.value(out.logits);
        let picks: Vec<(usize, u32, f64)> = active
            .iter()
            .zip(&out.segments)
            .map(|(&i, seg)| {
                let row: Vec<f64> = logits
                    .row(seg.start + seg.len - 1)
                    .iter()
                    .map(|v| v.as_f64())
                    .collect();
                let probs = stats::softmax(&row);
                let action = draw(&probs, &mut rngs[i]);
                (i, action as u32, probs[action].max(LOG_FLOOR).ln())
            })
            .collect();
        drop(tape);
        for (i, action, lp) in picks {
            tokens[i].push(action);
            log_probs[i].push(lp);
        }
        active.retain(|&i| {
            let generated = log_probs[i].len();
            generated < requests[i].budget && Some(*tokens[i].last().expect("non-empty")) != stop
        });
    }

    requests
        .iter()
        .zip(tokens)
        .zip(log_probs)
        .map(|((r, toks), lps)| {
            Ok(Sampled {
                sequence: TokenSequence::new(toks, r.prompt.len())?,
                log_probs: lps,
            })
        })
        .collect()
}

/// Samples one continuation of `prompt` until `stop` is emitted or `budget` tokens are generated.
pub fn sample_sequence<S: Scalar, P: Policy<S>, R: Rng>(
    policy: &P,
    prompt: &TokenSequence,
    stop: Option<u32>,
    budget: usize,
    rng: &mut R,
) -> Result<Sampled> {
    let request = SampleRequest {
        prompt: prompt.valid().to_vec(),
        budget,
    };
    let mut out = sample_batch(
        policy,
        std::slice::from_ref(&request),
        stop,
        std::slice::from_mut(rng),
    )?;
    Ok(out.remove(0))
}
