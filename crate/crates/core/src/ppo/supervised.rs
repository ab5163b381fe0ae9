//! Next-token baseline on rendered simplification chains.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::derive_seed;
use super::trainer::Record;
use crate::arithmetic::{self, ArithmeticInstance};
use crate::env::{ArithmeticEnv, Environment};
use crate::error::{Error, Result};
use crate::params::AdamConfig;
use crate::policy::{sample_batch, Policy, SampleRequest, TokenSequence};
use crate::scalar::Scalar;
use crate::stats;
use crate::tape::{Tape, Var};

/// Mean next-token cross-entropy over the valid (non-PAD) positions of `batch`.
pub fn supervised_loss<S: Scalar, P: Policy<S>>(
    tape: &mut Tape<S>,
    policy: &P,
    batch: &[TokenSequence],
) -> Result<Var> {
    let slices: Vec<&[u32]> = batch.iter().map(TokenSequence::valid).collect();
    if slices.iter().any(|s| s.len() < 2) {
        return Err(Error::usage(
            "supervised sequences need at least two tokens",
        ));
    }
    let out = policy.forward_packed(tape, &slices)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (s, seg) in slices.iter().zip(&out.segments) {
        for t in 0..s.len() - 1 {
            rows.push(seg.start + t);
            targets.push(s[t + 1] as usize);
        }
    }
    tape.cross_entropy(out.logits, &rows, &targets)
}

/// One optimizer step on the next-token loss; returns the loss before the update.
pub fn supervised_step<P: Policy<f32>>(
    policy: &mut P,
    batch: &[TokenSequence],
    adam: &AdamConfig,
    max_grad_norm: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = supervised_loss(&mut tape, policy, batch)?;
    let value = f64::from(tape.value(loss).values()[0]);
    tape.backward(loss, policy.params_mut())?;
    if max_grad_norm > 0.0 {
        policy.params_mut().clip_grad_norm(max_grad_norm);
    }
    policy.params_mut().adam_step(adam)?;
    Ok(value)
}

/// Loss without updating (validation).
pub fn evaluate_loss<P: Policy<f32>>(policy: &P, batch: &[TokenSequence]) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = supervised_loss(&mut tape, policy, batch)?;
    Ok(f64::from(tape.value(loss).values()[0]))
}

/// Supervised-mode settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedConfig {
    pub train_instances: usize,
    pub validation_instances: usize,
    /// Chains per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    /// Optional JSONL dataset; generated from the seed when absent.
    pub dataset: Option<std::path::PathBuf>,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            train_instances: 4096,
            validation_instances: 256,
            batch_size: 32,
            learning_rate: 1e-3,
            max_grad_norm: 1.0,
            dataset: None,
        }
    }
}

impl SupervisedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_instances == 0 || self.validation_instances == 0 || self.batch_size == 0 {
            return Err(Error::config(
                "supervised instance counts and batch_size must be positive",
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("supervised.learning_rate must be positive"));
        }
        Ok(())
    }
}

/// Generates `count` instances from one seeded stream.
pub fn generate_dataset(count: usize, terms: usize, seed: u64) -> Result<Vec<ArithmeticInstance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| arithmetic::generate_instance(&mut rng, terms))
        .collect()
}

/// Teacher-forced training on full chains with periodic validation.
pub struct SupervisedTrainer<P: Policy<f32>> {
    policy: P,
    train: Vec<TokenSequence>,
    validation: Vec<ArithmeticInstance>,
    validation_sequences: Vec<TokenSequence>,
    config: SupervisedConfig,
    env: ArithmeticEnv,
    seed: u64,
    step: u64,
}

impl<P: Policy<f32>> SupervisedTrainer<P> {
    pub fn new(
        policy: P,
        train: &[ArithmeticInstance],
        validation: Vec<ArithmeticInstance>,
        config: SupervisedConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() || validation.is_empty() {
            return Err(Error::config(
                "supervised training needs training and validation instances",
            ));
        }
        let render =
            |i: &ArithmeticInstance| Ok(TokenSequence::prompt(arithmetic::render_chain(i)?));
        let train = train.iter().map(render).collect::<Result<Vec<_>>>()?;
        let validation_sequences = validation.iter().map(render).collect::<Result<Vec<_>>>()?;
        let env = ArithmeticEnv::new(validation[0].coefficients.len())?;
        Ok(SupervisedTrainer {
            policy,
            train,
            validation,
            validation_sequences,
            config,
            env,
            seed,
            step: 0,
        })
    }

    pub fn policy(&self) -> &P {
        &self.policy
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn set_steps_done(&mut self, step: u64) {
        self.step = step;
    }

    pub fn step(&mut self) -> Result<f64> {
        self.step += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[self.step, 2]));
        let batch: Vec<TokenSequence> = (0..self.config.batch_size)
            .map(|_| self.train[rng.random_range(0..self.train.len())].clone())
            .collect();
        let adam = AdamConfig {
            learning_rate: self.config.learning_rate,
            ..AdamConfig::default()
        };
        supervised_step(&mut self.policy, &batch, &adam, self.config.max_grad_norm)
    }

    pub fn validation_loss(&self) -> Result<f64> {
        evaluate_loss(&self.policy, &self.validation_sequences)
    }

    /// Mean reward of sampled answers to the final step of every validation instance.
    pub fn final_answer_reward(&self) -> Result<f64> {
        let episodes: Vec<_> = self
            .validation
            .iter()
            .enumerate()
            .map(|(i, inst)| {
                self.env
                    .episodes_for(inst, i)
                    .map(|mut e| e.pop().expect("at least one step"))
            })
            .collect::<Result<_>>()?;
        let requests: Vec<SampleRequest> = episodes
            .iter()
            .map(|e| SampleRequest {
                prompt: e.prompt.clone(),
                budget: e.budget,
            })
            .collect();
        let mut rngs: Vec<ChaCha8Rng> = (0..requests.len())
            .map(|i| ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[self.step, 3, i as u64])))
            .collect();
        let samples = sample_batch(&self.policy, &requests, self.env.stop_token(), &mut rngs)?;
        let rewards = episodes
            .iter()
            .zip(&samples)
            .map(|(e, s)| self.env.reward(e, s.sequence.generated()))
            .collect::<Result<Vec<_>>>()?;
        Ok(stats::mean(&rewards))
    }

    /// Runs one step; validation metrics are added when `evaluate` is set.
    pub fn step_record(&mut self, evaluate: bool) -> Result<Record> {
        let loss = self.step()?;
        let mut r = vec![("loss", loss)];
        if evaluate {
            r.push(("validation_loss", self.validation_loss()?));
            r.push(("mean_reward", self.final_answer_reward()?));
        }
        Ok(r)
    }
}
