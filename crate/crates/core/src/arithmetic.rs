//! Synthetic arithmetic simplification task.
//!
//! An instance draws `n` digits and repeatedly merges two uniformly chosen terms
//! until a single integer remains. Each merge is one episode step: the model sees
//! every earlier expression (teacher forcing) and must write the next one.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest integer with its own token.
pub const MAX_TERM: u32 = 45;
pub const PLUS: u32 = 46;
/// Separates expressions in a prompt and ends every generation.
pub const EQUALS: u32 = 47;
pub const PAD: u32 = 48;
pub const VOCAB_SIZE: usize = 49;
pub const DEFAULT_TERMS: usize = 5;
/// Context window of the policy network.
pub const CONTEXT_LEN: usize = 64;

/// One generated problem: digits, the simplification chain and which term
/// positions were merged at each step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArithmeticInstance {
    pub coefficients: Vec<u32>,
    /// `chain[0]` is the coefficients; `chain[k]` has one term fewer than `chain[k - 1]`.
    pub chain: Vec<Vec<u32>>,
    /// `trace[k]` is the `(left, right)` index pair of `chain[k]` merged into `chain[k + 1]`.
    pub trace: Vec<(usize, usize)>,
}

impl ArithmeticInstance {
    /// Number of episode steps (merges).
    pub fn steps(&self) -> usize {
        self.trace.len()
    }

    pub fn answer(&self) -> u32 {
        self.chain.last().expect("chain is never empty")[0]
    }

    /// Checks the chain invariants: term counts, conservation and merge placement.
    pub fn validate(&self) -> Result<()> {
        let n = self.coefficients.len();
        if n < 2
            || self.chain.len() != n
            || self.trace.len() != n - 1
            || self.chain[0] != self.coefficients
        {
            return Err(Error::config("malformed arithmetic instance"));
        }
        let total: u32 = self.coefficients.iter().sum();
        for (k, (&(a, b), pair)) in self.trace.iter().zip(self.chain.windows(2)).enumerate() {
            let (prev, next) = (&pair[0], &pair[1]);
            if a >= b || b >= prev.len() || next.len() + 1 != prev.len() {
                return Err(Error::config(format!("bad merge at step {}", k + 1)));
            }
            let mut expected = prev.clone();
            expected[a] += expected[b];
            expected.remove(b);
            if &expected != next || next.iter().sum::<u32>() != total {
                return Err(Error::config(format!(
                    "chain step {} does not follow its trace",
                    k + 1
                )));
            }
        }
        Ok(())
    }
}

/// Draws `n` digits in `0..=9` and a uniformly random merge order.
///
/// The merged sum replaces the left term of the pair; the right term is removed.
pub fn generate_instance<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Result<ArithmeticInstance> {
    if n < 2 {
        return Err(Error::usage(
            "an arithmetic instance needs at least two terms",
        ));
    }
    let coefficients: Vec<u32> = (0..n).map(|_| rng.random_range(0..=9)).collect();
    let mut chain = vec![coefficients.clone()];
    let mut trace = Vec::with_capacity(n - 1);
    while chain.last().expect("non-empty").len() > 1 {
        let prev = chain.last().expect("non-empty");
        let m = prev.len();
        // unordered pairs (a < b) enumerated row by row
        let mut k = rng.random_range(0..m * (m - 1) / 2);
        let mut a = 0;
        while k >= m - 1 - a {
            k -= m - 1 - a;
            a += 1;
        }
        let b = a + 1 + k;
        let mut next = prev.clone();
        next[a] += next[b];
        next.remove(b);
        trace.push((a, b));
        chain.push(next);
    }
    Ok(ArithmeticInstance {
        coefficients,
        chain,
        trace,
    })
}

/// Token ids of `t1 + t2 + ... + tk`.
pub fn render_tokens(terms: &[u32]) -> Result<Vec<u32>> {
    if terms.is_empty() {
        return Err(Error::usage("cannot render an empty expression"));
    }
    if let Some(bad) = terms.iter().find(|&&t| t > MAX_TERM) {
        return Err(Error::usage(format!(
            "term {bad} has no token (max {MAX_TERM})"
        )));
    }
    let mut out = Vec::with_capacity(terms.len() * 2 - 1);
    for (i, &t) in terms.iter().enumerate() {
        if i > 0 {
            out.push(PLUS);
        }
        out.push(t);
    }
    Ok(out)
}

/// Parses `INT ('+' INT)*`; anything else is invalid (`None`).
pub fn parse_expression(tokens: &[u32]) -> Option<Vec<u32>> {
    if tokens.len().is_multiple_of(2) {
        return None;
    }
    let mut terms = Vec::with_capacity(tokens.len() / 2 + 1);
    for (i, &t) in tokens.iter().enumerate() {
        if i % 2 == 0 {
            if t > MAX_TERM {
                return None;
            }
            terms.push(t);
        } else if t != PLUS {
            return None;
        }
    }
    Some(terms)
}

pub fn evaluate_sum(terms: &[u32]) -> i64 {
    terms.iter().map(|&t| i64::from(t)).sum()
}

/// `2 / (1 + exp(|generated − target| / 10))`.
pub fn reward_for_value(generated: i64, target: i64) -> f64 {
    let diff = (generated - target).unsigned_abs() as f64;
    2.0 / (1.0 + (diff / 10.0).exp())
}

/// The expression part of a generation: everything before the first `=`.
pub fn strip_stop(generated: &[u32]) -> &[u32] {
    match generated.iter().position(|&t| t == EQUALS) {
        Some(i) => &generated[..i],
        None => generated,
    }
}

/// Value of a generation, or `None` when it does not parse.
pub fn generated_value(generated: &[u32]) -> Option<i64> {
    parse_expression(strip_stop(generated)).map(|terms| evaluate_sum(&terms))
}

/// Programmed reward of a generation against the target value; 0 for invalid output.
pub fn reward(generated: &[u32], target: i64) -> f64 {
    generated_value(generated).map_or(0.0, |g| reward_for_value(g, target))
}

/// Teacher-forced prompt for one step and the expression it must produce.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodeStep {
    pub step: usize,
    pub prompt: Vec<u32>,
    pub target: Vec<u32>,
    /// Tokens of the target plus the stop token.
    pub budget: usize,
}

impl EpisodeStep {
    pub fn target_value(&self) -> i64 {
        evaluate_sum(&self.target)
    }
}

/// Prompt `Y_0 = Y_1 = ... = Y_{i-1} =` and target `Y_i`, for `1 <= i <= steps`.
pub fn build_episode(instance: &ArithmeticInstance, i: usize) -> Result<EpisodeStep> {
    if i == 0 || i > instance.steps() {
        return Err(Error::usage(format!(
            "step {i} outside 1..={}",
            instance.steps()
        )));
    }
    let mut prompt = Vec::new();
    for expr in &instance.chain[..i] {
        prompt.extend(render_tokens(expr)?);
        prompt.push(EQUALS);
    }
    let target = instance.chain[i].clone();
    let budget = render_tokens(&target)?.len() + 1;
    assert!(
        prompt.len() + budget <= CONTEXT_LEN,
        "episode exceeds the context window"
    );
    Ok(EpisodeStep {
        step: i,
        prompt,
        target,
        budget,
    })
}

/// Full chain rendered as `Y_0 = Y_1 = ... = Y_last =`, the supervised training sequence.
pub fn render_chain(instance: &ArithmeticInstance) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for expr in &instance.chain {
        out.extend(render_tokens(expr)?);
        out.push(EQUALS);
    }
    Ok(out)
}

/// Longest prompt (in tokens) over all steps of any `n`-term instance.
///
/// Every term is one token, so lengths depend only on term counts.
pub fn max_prompt_len(n: usize) -> usize {
    (2..=n).map(|terms| 2 * terms).sum()
}

/// Number of digit tuples of length `n` with each sum `0..=9n`.
pub fn sum_counts(n: usize) -> Vec<u64> {
    let mut counts = vec![1u64];
    for _ in 0..n {
        let mut next = vec![0u64; counts.len() + 9];
        for (s, &c) in counts.iter().enumerate() {
            for d in 0..=9 {
                next[s + d] += c;
            }
        }
        counts = next;
    }
    counts
}

/// Expected final-step reward of always answering `answer`, by exhaustive
/// enumeration of all `10^n` digit tuples.
pub fn constant_answer_reward(answer: i64, n: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0u64;
    let mut digits = vec![0u32; n];
    loop {
        let s: i64 = digits.iter().map(|&d| i64::from(d)).sum();
        total += reward_for_value(answer, s);
        count += 1;
        let mut k = 0;
        loop {
            if k == n {
                return total / count as f64;
            }
            digits[k] += 1;
            if digits[k] <= 9 {
                break;
            }
            digits[k] = 0;
            k += 1;
        }
    }
}

/// Final-step reward of the constant-23 policy over the five-digit task.
pub fn naive_baseline_reward() -> f64 {
    constant_answer_reward(23, DEFAULT_TERMS)
}

/// Writes one JSON object per line.
pub fn write_dataset<W: Write>(out: &mut W, instances: &[ArithmeticInstance]) -> Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut *out, inst)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Vec<ArithmeticInstance>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: ArithmeticInstance = serde_json::from_str(&line)
            .map_err(|e| Error::config(format!("dataset line {}: {e}", i + 1)))?;
        inst.validate()
            .map_err(|e| Error::config(format!("dataset line {}: {e}", i + 1)))?;
        out.push(inst);
    }
    Ok(out)
}

/// Human-readable form, e.g. `6 + 17 + 1 + 3`.
pub fn format_tokens(tokens: &[u32]) -> String {
    tokens
        .iter()
        .map(|&t| match t {
            PLUS => "+".to_string(),
            EQUALS => "=".to_string(),
            PAD => "<pad>".to_string(),
            n => n.to_string(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Inverse of [`format_tokens`]; integers above [`MAX_TERM`] are rejected.
pub fn tokenize_text(text: &str) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    let spaced = text.replace('+', " + ").replace('=', " = ");
    for word in spaced.split_whitespace() {
        let tok = match word {
            "+" => PLUS,
            "=" => EQUALS,
            "<pad>" => PAD,
            n => {
                let v: u32 = n
                    .parse()
                    .map_err(|_| Error::usage(format!("unknown token `{n}`")))?;
                if v > MAX_TERM {
                    return Err(Error::usage(format!("integer {v} has no token")));
                }
                v
            }
        };
        out.push(tok);
    }
    Ok(out)
}
