//! Episodic environments: a prompt, a generation budget and a programmed reward.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::arithmetic::{self, ArithmeticInstance};
use crate::error::{Error, Result};

/// One prompt to continue plus bookkeeping for metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub prompt: Vec<u32>,
    pub budget: usize,
    /// Index of the task instance within the batch.
    pub instance: usize,
    /// 1-based step within the instance.
    pub step: usize,
    pub is_final: bool,
    /// Value the reward compares against, when the task has one.
    pub target: Option<i64>,
}

pub trait Environment: Send + Sync {
    fn vocab_size(&self) -> usize;
    /// Generation ends after this token (it is kept in the sequence).
    fn stop_token(&self) -> Option<u32>;
    /// Samples `count` episodes. Multi-step tasks contribute whole instances.
    fn sample_episodes(&self, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Episode>>;
    fn reward(&self, episode: &Episode, generated: &[u32]) -> Result<f64>;
    /// Numeric answer encoded by a generation, if the task has one.
    fn answer(&self, _generated: &[u32]) -> Option<i64> {
        None
    }
}

/// Arithmetic simplification with teacher forcing: every instance yields one
/// episode per merge step.
#[derive(Clone, Debug)]
pub struct ArithmeticEnv {
    terms: usize,
}

impl ArithmeticEnv {
    pub fn new(terms: usize) -> Result<Self> {
        if terms < 2 {
            return Err(Error::config("arithmetic task needs at least two terms"));
        }
        if arithmetic::max_prompt_len(terms) + 2 * terms > arithmetic::CONTEXT_LEN {
            return Err(Error::config(format!(
                "{terms} terms do not fit the context window"
            )));
        }
        Ok(ArithmeticEnv { terms })
    }

    pub fn terms(&self) -> usize {
        self.terms
    }

    pub fn steps_per_instance(&self) -> usize {
        self.terms - 1
    }

    pub fn episodes_for(
        &self,
        instance: &ArithmeticInstance,
        index: usize,
    ) -> Result<Vec<Episode>> {
        (1..=instance.steps())
            .map(|i| {
                let ep = arithmetic::build_episode(instance, i)?;
                Ok(Episode {
                    target: Some(ep.target_value()),
                    prompt: ep.prompt,
                    budget: ep.budget,
                    instance: index,
                    step: i,
                    is_final: i == instance.steps(),
                })
            })
            .collect()
    }
}

impl Environment for ArithmeticEnv {
    fn vocab_size(&self) -> usize {
        arithmetic::VOCAB_SIZE
    }

    fn stop_token(&self) -> Option<u32> {
        Some(arithmetic::EQUALS)
    }

    fn sample_episodes(&self, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Episode>> {
        let per = self.steps_per_instance();
        let instances = count.div_ceil(per);
        let mut out = Vec::with_capacity(instances * per);
        for index in 0..instances {
            let inst = arithmetic::generate_instance(rng, self.terms)?;
            out.extend(self.episodes_for(&inst, index)?);
        }
        out.truncate(count);
        Ok(out)
    }

    fn reward(&self, episode: &Episode, generated: &[u32]) -> Result<f64> {
        let target = episode
            .target
            .ok_or_else(|| Error::usage("arithmetic episode without a target"))?;
        Ok(arithmetic::reward(generated, target))
    }

    fn answer(&self, generated: &[u32]) -> Option<i64> {
        arithmetic::generated_value(generated)
    }
}

/// Contextual bandit: the prompt is a single context token, the policy emits one
/// action token and receives `rewards[context][action]`.
#[derive(Clone, Debug)]
pub struct BanditEnv {
    rewards: Vec<Vec<f64>>,
}

impl BanditEnv {
    pub fn new(rewards: Vec<Vec<f64>>) -> Result<Self> {
        let actions = rewards.first().map_or(0, Vec::len);
        if rewards.is_empty() || actions < 2 || rewards.iter().any(|r| r.len() != actions) {
            return Err(Error::config(
                "bandit needs a rectangular reward table with at least two actions",
            ));
        }
        if rewards.iter().flatten().any(|r| !r.is_finite()) {
            return Err(Error::config("bandit rewards must be finite"));
        }
        Ok(BanditEnv { rewards })
    }

    pub fn contexts(&self) -> usize {
        self.rewards.len()
    }

    pub fn actions(&self) -> usize {
        self.rewards[0].len()
    }

    pub fn rewards(&self) -> &[Vec<f64>] {
        &self.rewards
    }

    /// Action with the highest reward in each context.
    pub fn best_actions(&self) -> Vec<usize> {
        self.rewards
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &r)| {
                        if r > best.1 {
                            (i, r)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect()
    }
}

impl Environment for BanditEnv {
    fn vocab_size(&self) -> usize {
        self.actions()
    }

    fn stop_token(&self) -> Option<u32> {
        None
    }

    fn sample_episodes(&self, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Episode>> {
        Ok((0..count)
            .map(|i| {
                let ctx = rng.random_range(0..self.contexts());
                Episode {
                    prompt: vec![ctx as u32],
                    budget: 1,
                    instance: i,
                    step: 1,
                    is_final: true,
                    target: None,
                }
            })
            .collect())
    }

    fn reward(&self, episode: &Episode, generated: &[u32]) -> Result<f64> {
        let ctx = episode.prompt[0] as usize;
        let action = *generated
            .first()
            .ok_or_else(|| Error::usage("bandit episode without an action"))?
            as usize;
        self.rewards
            .get(ctx)
            .and_then(|row| row.get(action))
            .copied()
            .ok_or_else(|| {
                Error::usage(format!("action {action} in context {ctx} is out of range"))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn arithmetic_batches_hold_whole_instances() {
        let env = ArithmeticEnv::new(5).unwrap();
        let eps = env
            .sample_episodes(64, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert_eq!(eps.len(), 64);
        assert_eq!(eps.iter().filter(|e| e.is_final).count(), 16);
        for chunk in eps.chunks(4) {
            let steps: Vec<usize> = chunk.iter().map(|e| e.step).collect();
            assert_eq!(steps, vec![1, 2, 3, 4]);
            assert!(chunk.iter().all(|e| e.instance == chunk[0].instance));
            assert!(chunk.iter().all(|e| e.target == chunk[0].target));
            assert_eq!(chunk[3].budget, 2);
        }
    }

    #[test]
    fn arithmetic_reward_uses_the_target() {
        let env = ArithmeticEnv::new(5).unwrap();
        let ep = Episode {
            prompt: vec![1],
            budget: 2,
            instance: 0,
            step: 4,
            is_final: true,
            target: Some(27),
        };
        assert_eq!(env.reward(&ep, &[27, arithmetic::EQUALS]).unwrap(), 1.0);
        assert_eq!(env.reward(&ep, &[arithmetic::PLUS]).unwrap(), 0.0);
        assert_eq!(env.answer(&[20, arithmetic::PLUS, 7]), Some(27));
    }

    #[test]
    fn bandit_rewards_and_validation() {
        let env = BanditEnv::new(vec![vec![1.0, 0.0, 0.5], vec![0.0, 1.0, 0.5]]).unwrap();
        assert_eq!(env.best_actions(), vec![0, 1]);
        let ep = Episode {
            prompt: vec![1],
            budget: 1,
            instance: 0,
            step: 1,
            is_final: true,
            target: None,
        };
        assert_eq!(env.reward(&ep, &[1]).unwrap(), 1.0);
        assert!(env.reward(&ep, &[3]).is_err());
        assert!(BanditEnv::new(vec![vec![1.0]]).is_err());
        assert!(BanditEnv::new(vec![vec![1.0, f64::NAN]]).is_err());
    }
}
