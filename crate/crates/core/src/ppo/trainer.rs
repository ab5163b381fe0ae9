use serde::Serialize;

use super::losses::{composite_loss, gather_rows, LossInputs};
use super::rollout::{collect_rollouts, RolloutBatch, RolloutSequence};
use super::PPOConfig;
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::policy::{snapshot_reference, FrozenPolicy, Policy, TrainerState};
use crate::scalar::Scalar;
use crate::tape::Tape;

/// Loss components of the last optimization pass plus diagnostics.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub clip_objective: f64,
    /// Raw `KL(π_ref ‖ π_θ)`; the penalty applied is `β_KL` times this.
    pub kl_penalty: f64,
    /// Mean per-state entropy `H̄`.
    pub entropy_bonus: f64,
    /// Batch-mean entropy `H(π̄)`.
    pub batch_entropy_bonus: f64,
    pub value_loss: f64,
    pub total: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub mean_kl: f64,
    pub mean_entropy: f64,
    pub batch_entropy: f64,
}

struct Prepared<'a> {
    sequences: Vec<&'a [u32]>,
    rows: Vec<usize>,
    actions: Vec<usize>,
    inputs: LossInputs,
}

fn prepare<'a>(sequences: &[&'a RolloutSequence]) -> Prepared<'a> {
    let mut p = Prepared {
        sequences: Vec::new(),
        rows: Vec::new(),
        actions: Vec::new(),
        inputs: LossInputs::default(),
    };
    let mut start = 0;
    for s in sequences {
        let tokens = s.sequence.valid();
        for (pos, &t) in tokens.iter().enumerate().skip(s.sequence.prompt_len()) {
            p.rows.push(start + pos - 1);
            p.actions.push(t as usize);
        }
        start += tokens.len();
        p.sequences.push(tokens);
        p.inputs.old_log_probs.extend(&s.old_log_probs);
        p.inputs.advantages.extend(&s.advantages);
        p.inputs.value_targets.extend(&s.value_targets);
        p.inputs.reference_probs.extend(&s.reference_probs);
    }
    p
}

/// Runs `config.epochs` passes of the composite loss over `batch`, updating the
/// policy after each minibatch. Returns the breakdown of the final pass.
pub fn train_step<P: Policy<f32>>(
    policy: &mut P,
    batch: &RolloutBatch,
    config: &PPOConfig,
    beta_kl: f64,
) -> Result<LossBreakdown> {
    config.validate()?;
    if batch.sequences.is_empty() {
        return Err(Error::usage("empty rollout batch"));
    }
    let adam = config.adam();
    let n = batch.sequences.len();
    let minibatches = config.minibatches.min(n);
    let mut last = LossBreakdown::default();
    for _ in 0..config.epochs {
        let mut sums = LossBreakdown::default();
        for mb in 0..minibatches {
            let members: Vec<&RolloutSequence> = batch
                .sequences
                .iter()
                .skip(mb)
                .step_by(minibatches)
                .collect();
            let prep = prepare(&members);
            let mut tape = Tape::new();
            let out = policy.forward_packed(&mut tape, &prep.sequences)?;
            let rows = gather_rows(&mut tape, &out, &prep.rows, &prep.actions)?;
            let terms = composite_loss(&mut tape, &rows, &prep.inputs, config, beta_kl)?;

            let item = |v| tape.value(v).values()[0].as_f64();
            let new_lp = tape.value(rows.action_log_probs).values();
            let mut ratio_sum = 0.0;
            let mut clipped = 0usize;
            for (&lp, old) in new_lp.iter().zip(&prep.inputs.old_log_probs) {
                let r = (f64::from(lp) - old).exp();
                ratio_sum += r;
                if (r - 1.0).abs() > config.clip_range {
                    clipped += 1;
                }
            }
            let m = new_lp.len() as f64;
            let w = 1.0 / minibatches as f64;
            sums.clip_objective += w * item(terms.clip);
            sums.kl_penalty += w * terms.kl.map_or(0.0, item);
            sums.entropy_bonus += w * item(terms.entropy);
            sums.batch_entropy_bonus += w * terms.batch_entropy.map_or(0.0, item);
            sums.value_loss += w * item(terms.value);
            sums.total += w * item(terms.total);
            sums.mean_ratio += w * ratio_sum / m;
            sums.clip_fraction += w * clipped as f64 / m;

            tape.backward(terms.total, policy.params_mut())?;
            if config.max_grad_norm > 0.0 {
                policy.params_mut().clip_grad_norm(config.max_grad_norm);
            }
            policy.params_mut().adam_step(&adam)?;
        }
        last = sums;
    }
    last.mean_kl = batch.stats.mean_kl;
    last.mean_entropy = batch.stats.mean_entropy;
    last.batch_entropy = batch.stats.batch_entropy;
    Ok(last)
}

/// Metrics of one training step, in the order they are logged.
pub type Record = Vec<(&'static str, f64)>;

/// PPO on an environment with a frozen initial-policy reference.
pub struct PpoTrainer<P: Policy<f32>, E: Environment> {
    policy: P,
    reference: FrozenPolicy<P>,
    env: E,
    config: PPOConfig,
    beta_kl: f64,
    step: u64,
}

impl<P: Policy<f32>, E: Environment> PpoTrainer<P, E> {
    pub fn new(policy: P, env: E, config: PPOConfig) -> Result<Self> {
        let reference = snapshot_reference(&policy);
        let beta_kl = config.beta_kl;
        Self::resume(
            policy,
            reference,
            env,
            config,
            TrainerState {
                step: 0,
                beta_kl,
                optimizer_step: 0,
            },
        )
    }

    /// Continues from saved trainer state; the step counter picks up where it stopped.
    pub fn resume(
        policy: P,
        reference: FrozenPolicy<P>,
        env: E,
        config: PPOConfig,
        state: TrainerState,
    ) -> Result<Self> {
        config.validate()?;
        if policy.vocab_size() != env.vocab_size() {
            return Err(Error::config("policy and environment vocabularies differ"));
        }
        Ok(PpoTrainer {
            policy,
            reference,
            env,
            config,
            beta_kl: state.beta_kl,
            step: state.step,
        })
    }

    pub fn policy(&self) -> &P {
        &self.policy
    }

    pub fn reference(&self) -> &FrozenPolicy<P> {
        &self.reference
    }

    pub fn env(&self) -> &E {
        &self.env
    }

    pub fn config(&self) -> &PPOConfig {
        &self.config
    }

    pub fn beta_kl(&self) -> f64 {
        self.beta_kl
    }

    /// Completed steps.
    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            step: self.step,
            beta_kl: self.beta_kl,
            optimizer_step: self.policy.params().optimizer_state().step,
        }
    }

    /// Collects one rollout batch and optimizes on it.
    pub fn step(&mut self) -> Result<(RolloutBatch, LossBreakdown)> {
        let step = self.step + 1;
        let batch = collect_rollouts(
            &self.policy,
            Some(&self.reference),
            &self.env,
            &self.config,
            step,
        )?;
        let losses = train_step(&mut self.policy, &batch, &self.config, self.beta_kl)?;
        self.beta_kl = self
            .config
            .update_beta_kl(self.beta_kl, batch.stats.mean_kl);
        self.step = step;
        Ok((batch, losses))
    }

    /// Runs one step and flattens its metrics.
    pub fn step_record(&mut self) -> Result<Record> {
        let beta = self.beta_kl;
        let (batch, l) = self.step()?;
        Ok(ppo_record(&batch, &l, beta))
    }
}

/// Flat metrics for one PPO step; `beta_kl` is the coefficient used for it.
pub fn ppo_record(batch: &RolloutBatch, l: &LossBreakdown, beta_kl: f64) -> Record {
    let s = &batch.stats;
    let mut r = vec![("mean_reward", s.mean_reward)];
    if let Some(f) = s.final_reward {
        r.push(("final_reward", f));
    }
    r.extend([
        ("episode_return", s.episode_return),
        ("mean_entropy", s.mean_entropy),
        ("batch_entropy", s.batch_entropy),
        ("kl", s.mean_kl),
        ("clip_fraction", l.clip_fraction),
        ("mean_ratio", l.mean_ratio),
        ("valid_fraction", s.valid_fraction),
        ("clip_objective", l.clip_objective),
        ("kl_penalty", l.kl_penalty),
        ("entropy_bonus", l.entropy_bonus),
        ("batch_entropy_bonus", l.batch_entropy_bonus),
        ("value_loss", l.value_loss),
        ("loss", l.total),
        ("beta_kl", beta_kl),
    ]);
    r
}
