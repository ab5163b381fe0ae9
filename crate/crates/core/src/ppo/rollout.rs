use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{derive_seed, PPOConfig};
use crate::env::{Environment, Episode};
use crate::error::{Error, Result};
use crate::policy::{sample_batch, FrozenPolicy, Policy, SampleRequest, TokenSequence};
use crate::stats;
use crate::tape::Tape;

/// Sequences sampled together in one batched forward. Fixed so results do not
/// depend on the worker count.
const SAMPLE_CHUNK: usize = 16;

/// One episode step and everything PPO needs about its generated positions.
/// Per-position vectors are indexed by generated token.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutSequence {
    pub episode: Episode,
    pub sequence: TokenSequence,
    pub old_log_probs: Vec<f64>,
    pub reference_log_probs: Vec<f64>,
    /// Row-major `[generated, vocab]` reference distributions; empty without a reference.
    pub reference_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
    /// Entropy of the sampling policy at each generated position (nats).
    pub entropies: Vec<f64>,
    pub answer: Option<i64>,
}

impl RolloutSequence {
    pub fn generated_len(&self) -> usize {
        self.sequence.generated().len()
    }

    /// Episode reward (the only nonzero per-position reward).
    pub fn reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// `true` at generated positions of the full token sequence.
    pub fn generation_mask(&self) -> Vec<bool> {
        let p = self.sequence.prompt_len();
        (0..self.sequence.valid_len()).map(|i| i >= p).collect()
    }
}

/// Batch statistics measured under the sampling policy.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutStats {
    pub mean_reward: f64,
    /// Mean reward of final-step episodes, if the batch has any.
    pub final_reward: Option<f64>,
    /// Mean over instances of the summed step rewards.
    pub episode_return: f64,
    pub mean_entropy: f64,
    pub batch_entropy: f64,
    pub mean_kl: f64,
    pub valid_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBatch {
    pub sequences: Vec<RolloutSequence>,
    pub stats: RolloutStats,
}

impl RolloutBatch {
    pub fn positions(&self) -> usize {
        self.sequences
            .iter()
            .map(RolloutSequence::generated_len)
            .sum()
    }
}

/// One-step TD advantages `R_t + V(s_{t+1}) − V(s_t)` with `V(terminal) = 0`,
/// and value targets `R_t + V(s_{t+1})`.
pub fn compute_advantages(rewards: &[f64], values: &[f64]) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(rewards.len(), values.len(), "rewards and values must align");
    let targets: Vec<f64> = (0..rewards.len())
        .map(|t| rewards[t] + values.get(t + 1).copied().unwrap_or(0.0))
        .collect();
    let advantages = targets.iter().zip(values).map(|(g, v)| g - v).collect();
    (advantages, targets)
}

/// Subtracts the mean and divides by `std + 1e-8` over all positions of the batch.
pub fn whiten(sequences: &mut [RolloutSequence]) {
    let all: Vec<f64> = sequences
        .iter()
        .flat_map(|s| s.advantages.iter().copied())
        .collect();
    if all.is_empty() {
        return;
    }
    let mean = stats::mean(&all);
    let var = all.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / all.len() as f64;
    let scale = 1.0 / (var.sqrt() + 1e-8);
    for s in sequences {
        for a in &mut s.advantages {
            *a = (*a - mean) * scale;
        }
    }
}

/// Per generated position: distribution, value of the state before it, action log-prob.
struct Evaluated {
    distributions: Vec<Vec<f64>>,
    values: Vec<f64>,
    log_probs: Vec<f64>,
}

fn evaluate<P: Policy<f32>>(policy: &P, sequences: &[&TokenSequence]) -> Result<Vec<Evaluated>> {
    let mut tape = Tape::new();
    let slices: Vec<&[u32]> = sequences.iter().map(|s| s.valid()).collect();
    let out = policy.forward_packed(&mut tape, &slices)?;
    let logits = tape.value(out.logits);
    let values = tape.value(out.values);
    Ok(sequences
        .iter()
        .zip(&out.segments)
        .map(|(s, seg)| {
            let mut e = Evaluated {
                distributions: Vec::new(),
                values: Vec::new(),
                log_probs: Vec::new(),
            };
            for p in s.prompt_len()..s.valid_len() {
                let row = seg.start + p - 1;
                let dist = stats::softmax(
                    &logits
                        .row(row)
                        .iter()
                        .map(|&v| v as f64)
                        .collect::<Vec<_>>(),
                );
                let action = s.tokens()[p] as usize;
                e.log_probs
                    .push(dist[action].max(crate::tape::LOG_FLOOR).ln());
                e.values.push(values.values()[row] as f64);
                e.distributions.push(dist);
            }
            e
        })
        .collect())
}

fn chunked<T: Send, F>(n: usize, f: F) -> Result<Vec<T>>
where
    F: Fn(std::ops::Range<usize>) -> Result<Vec<T>> + Sync + Send,
{
    let chunks: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(SAMPLE_CHUNK)
        .map(|s| s..(s + SAMPLE_CHUNK).min(n))
        .collect();
    let parts: Vec<Result<Vec<T>>> = chunks.into_par_iter().map(f).collect();
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Samples `episodes` with the current policy and scores them.
///
/// Sequence `i` at `step` draws from its own stream keyed by `(seed, step, i)`.
pub fn collect_rollouts<P: Policy<f32>, E: Environment + ?Sized>(
    policy: &P,
    reference: Option<&FrozenPolicy<P>>,
    env: &E,
    config: &PPOConfig,
    step: u64,
) -> Result<RolloutBatch> {
    if policy.vocab_size() != env.vocab_size() {
        return Err(Error::config(format!(
            "policy vocabulary {} does not match environment vocabulary {}",
            policy.vocab_size(),
            env.vocab_size()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[step, 0]));
    let episodes = env.sample_episodes(config.batch_size, &mut rng)?;
    rollouts_for(policy, reference, env, config, step, episodes)
}

/// Scores a fixed list of episodes (used for evaluation as well as training).
pub fn rollouts_for<P: Policy<f32>, E: Environment + ?Sized>(
    policy: &P,
    reference: Option<&FrozenPolicy<P>>,
    env: &E,
    config: &PPOConfig,
    step: u64,
    episodes: Vec<Episode>,
) -> Result<RolloutBatch> {
    let n = episodes.len();
    let stop = env.stop_token();
    let sampled = chunked(n, |range| {
        let requests: Vec<SampleRequest> = episodes[range.clone()]
            .iter()
            .map(|e| SampleRequest {
                prompt: e.prompt.clone(),
                budget: e.budget,
            })
            .collect();
        let mut rngs: Vec<ChaCha8Rng> = range
            .clone()
            .map(|i| ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[step, 1, i as u64])))
            .collect();
        let samples = sample_batch(policy, &requests, stop, &mut rngs)?;
        let seqs: Vec<&TokenSequence> = samples.iter().map(|s| &s.sequence).collect();
        let current = evaluate(policy, &seqs)?;
        let refs = match reference {
            Some(r) => Some(evaluate(r.policy(), &seqs)?),
            None => None,
        };
        let mut out = Vec::with_capacity(samples.len());
        for (k, (sample, cur)) in samples.into_iter().zip(current).enumerate() {
            out.push((
                sample.sequence,
                cur,
                refs.as_ref()
                    .map(|r| &r[k])
                    .map(|r| (r.log_probs.clone(), r.distributions.concat())),
            ));
        }
        Ok(out)
    })?;

    let mut sequences = Vec::with_capacity(n);
    let mut all_dists: Vec<Vec<f64>> = Vec::new();
    let mut kls = Vec::new();
    for (i, (episode, (sequence, cur, reference))) in episodes.into_iter().zip(sampled).enumerate()
    {
        let generated = sequence.generated();
        let reward = env.reward(&episode, generated)?;
        if !reward.is_finite() {
            return Err(Error::non_finite(format!("reward of sequence {i}")));
        }
        let answer = env.answer(generated);
        let mut rewards = vec![0.0; generated.len()];
        *rewards.last_mut().expect("budget is at least one") = reward;
        let (advantages, value_targets) = compute_advantages(&rewards, &cur.values);
        let entropies: Vec<f64> = cur
            .distributions
            .iter()
            .map(|d| stats::entropy(d))
            .collect();
        let (reference_log_probs, reference_probs) = reference.unwrap_or_default();
        if !reference_probs.is_empty() {
            let v = cur.distributions[0].len();
            for (r, d) in reference_probs.chunks(v).zip(&cur.distributions) {
                kls.push(stats::kl_divergence(r, d));
            }
        }
        all_dists.extend(cur.distributions);
        sequences.push(RolloutSequence {
            episode,
            sequence,
            old_log_probs: cur.log_probs,
            reference_log_probs,
            reference_probs,
            values: cur.values,
            rewards,
            advantages,
            value_targets,
            entropies,
            answer,
        });
    }
    if config.whiten_advantages {
        whiten(&mut sequences);
    }
    let stats = batch_stats(&sequences, &all_dists, &kls);
    Ok(RolloutBatch { sequences, stats })
}

fn batch_stats(sequences: &[RolloutSequence], dists: &[Vec<f64>], kls: &[f64]) -> RolloutStats {
    let rewards: Vec<f64> = sequences.iter().map(RolloutSequence::reward).collect();
    let finals: Vec<f64> = sequences
        .iter()
        .filter(|s| s.episode.is_final)
        .map(RolloutSequence::reward)
        .collect();
    let mut returns: std::collections::BTreeMap<usize, f64> = Default::default();
    for s in sequences {
        *returns.entry(s.episode.instance).or_default() += s.reward();
    }
    let entropies: Vec<f64> = sequences
        .iter()
        .flat_map(|s| s.entropies.iter().copied())
        .collect();
    let valid = sequences.iter().filter(|s| s.answer.is_some()).count();
    RolloutStats {
        mean_reward: stats::mean(&rewards),
        final_reward: (!finals.is_empty()).then(|| stats::mean(&finals)),
        episode_return: stats::mean(&returns.into_values().collect::<Vec<_>>()),
        mean_entropy: stats::mean(&entropies),
        batch_entropy: stats::entropy(&stats::mean_distribution(dists.iter().map(Vec::as_slice))),
        mean_kl: if kls.is_empty() {
            0.0
        } else {
            stats::mean(kls)
        },
        valid_fraction: valid as f64 / sequences.len().max(1) as f64,
    }
}
