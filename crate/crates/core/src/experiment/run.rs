use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::config::{Mode, RunConfig, Task, MAX_CONFIG_SEED};
use super::metrics::{read_metrics, write_plotdata, write_summary, MetricsWriter, Series};
use crate::arithmetic::{self, ArithmeticInstance};
use crate::env::{ArithmeticEnv, BanditEnv, Environment};
use crate::error::{Error, Result};
use crate::game::{ExternalEngine, GameEnv};
use crate::policy::{
    load_checkpoint, save_checkpoint, snapshot_reference, Policy, TabularPolicy, TrainerState,
    TransformerPolicy,
};
use crate::ppo::{
    derive_seed, generate_dataset, rollouts_for, PPOConfig, PpoTrainer, Record, RolloutBatch,
    SupervisedTrainer,
};
use crate::stats;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const PLOTDATA_FILE: &str = "plotdata.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

/// Stream indices for seeds derived from the run seed.
const MODEL_STREAM: u64 = 1;
const TRAIN_DATA_STREAM: u64 = 2;
const VALIDATION_STREAM: u64 = 3;
const EVAL_STREAM: u64 = 4;

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub build_id: String,
    /// Checkpoint to continue from; its step counter is kept.
    pub resume: Option<PathBuf>,
    /// Extra header fields (e.g. the swept coefficient).
    pub header_extra: Option<Value>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub steps: u64,
    pub series: Series,
}

/// Task vocabulary and derived model seed filled in.
pub fn resolve(config: &RunConfig) -> RunConfig {
    let mut c = config.clone();
    c.model.seed = config_seed(derive_seed(config.seed, &[MODEL_STREAM, config.model.seed]));
    match c.task {
        Task::Arithmetic => c.model.vocab_size = arithmetic::VOCAB_SIZE,
        Task::GameExternal => c.model.vocab_size = c.game.vocabulary.len(),
        Task::BanditSanity => {}
    }
    c
}

/// Clears the top bit so the seed fits a TOML integer.
fn config_seed(seed: u64) -> u64 {
    seed & MAX_CONFIG_SEED
}

trait Runner {
    fn step(&mut self, evaluate: bool) -> Result<Record>;
    fn steps_done(&self) -> u64;
    /// Writes a checkpoint; `false` when the policy has no checkpoint format.
    fn save(&self, path: &Path) -> Result<bool>;
}

/// Scores `episodes` with one sampled generation each.
pub fn evaluate_episodes<P: Policy<f32>, E: Environment + ?Sized>(
    policy: &P,
    env: &E,
    episodes: Vec<crate::env::Episode>,
    seed: u64,
) -> Result<RolloutBatch> {
    let config = PPOConfig {
        seed,
        batch_size: episodes.len().max(2),
        whiten_advantages: false,
        ..PPOConfig::default()
    };
    rollouts_for(policy, None, env, &config, 0, episodes)
}

/// Most frequent answer among final-step episodes (ties go to the smaller value).
pub fn modal_final_answer(batch: &RolloutBatch) -> Option<i64> {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for s in batch.sequences.iter().filter(|s| s.episode.is_final) {
        if let Some(a) = s.answer {
            *counts.entry(a).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .fold(None, |best: Option<(i64, usize)>, (a, c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((a, c)),
        })
        .map(|(a, _)| a)
}

/// Evaluation metrics of a rollout batch, prefixed `eval_`.
pub fn eval_record(batch: &RolloutBatch) -> Record {
    let s = &batch.stats;
    let mut r = vec![("eval_reward", s.mean_reward)];
    if let Some(f) = s.final_reward {
        r.push(("eval_final_reward", f));
    }
    if let Some(a) = modal_final_answer(batch) {
        r.push(("eval_modal_answer", a as f64));
    }
    r.push(("eval_entropy", s.mean_entropy));
    r.push(("eval_valid_fraction", s.valid_fraction));
    r
}

/// Teacher-forced episodes (every step) of `count` fresh arithmetic instances.
pub fn arithmetic_eval_episodes(
    env: &ArithmeticEnv,
    count: usize,
    seed: u64,
) -> Result<Vec<crate::env::Episode>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for i in 0..count {
        let inst = arithmetic::generate_instance(&mut rng, env.terms())?;
        out.extend(env.episodes_for(&inst, i)?);
    }
    Ok(out)
}

type EvalFn<P, E> = Box<dyn Fn(&P, &E) -> Result<Record>>;

struct PpoRunner<P: Policy<f32>, E: Environment> {
    trainer: PpoTrainer<P, E>,
    eval: EvalFn<P, E>,
    save: fn(&PpoTrainer<P, E>, &Path) -> Result<bool>,
}

impl<P: Policy<f32>, E: Environment> Runner for PpoRunner<P, E> {
    fn step(&mut self, evaluate: bool) -> Result<Record> {
        let mut r = self.trainer.step_record()?;
        if evaluate {
            r.extend((self.eval)(self.trainer.policy(), self.trainer.env())?);
        }
        Ok(r)
    }

    fn steps_done(&self) -> u64 {
        self.trainer.steps_done()
    }

    fn save(&self, path: &Path) -> Result<bool> {
        (self.save)(&self.trainer, path)
    }
}

fn save_transformer<E: Environment>(
    t: &PpoTrainer<TransformerPolicy<f32>, E>,
    path: &Path,
) -> Result<bool> {
    save_checkpoint(path, t.policy(), Some(t.reference().policy()), &t.state())?;
    Ok(true)
}

struct SupervisedRunner {
    trainer: SupervisedTrainer<TransformerPolicy<f32>>,
}

impl Runner for SupervisedRunner {
    fn step(&mut self, evaluate: bool) -> Result<Record> {
        self.trainer.step_record(evaluate)
    }

    fn steps_done(&self) -> u64 {
        self.trainer.steps_done()
    }

    fn save(&self, path: &Path) -> Result<bool> {
        let state = TrainerState {
            step: self.trainer.steps_done(),
            beta_kl: 0.0,
            optimizer_step: self.trainer.policy().params().optimizer_state().step,
        };
        save_checkpoint(path, self.trainer.policy(), None, &state)?;
        Ok(true)
    }
}

type StartState = (
    TransformerPolicy<f32>,
    Option<TransformerPolicy<f32>>,
    Option<TrainerState>,
);

fn transformer_start(config: &RunConfig, resume: Option<&Path>) -> Result<StartState> {
    match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.policy.config().vocab_size != config.model.vocab_size {
                return Err(Error::config(
                    "checkpoint vocabulary does not match the task",
                ));
            }
            Ok((ck.policy, ck.reference, Some(ck.trainer)))
        }
        None => Ok((TransformerPolicy::new(config.model.clone())?, None, None)),
    }
}

fn ppo_transformer<E: Environment + 'static>(
    config: &RunConfig,
    env: E,
    resume: Option<&Path>,
    eval: EvalFn<TransformerPolicy<f32>, E>,
) -> Result<Box<dyn Runner>> {
    let (policy, reference, state) = transformer_start(config, resume)?;
    let ppo = config.resolved_ppo();
    let trainer = match state {
        Some(state) => {
            let reference = snapshot_reference(&reference.unwrap_or_else(|| policy.clone()));
            PpoTrainer::resume(policy, reference, env, ppo, state)?
        }
        None => PpoTrainer::new(policy, env, ppo)?,
    };
    Ok(Box::new(PpoRunner {
        trainer,
        eval,
        save: save_transformer::<E>,
    }))
}

fn load_or_generate(config: &RunConfig) -> Result<Vec<ArithmeticInstance>> {
    match &config.supervised.dataset {
        Some(path) => {
            let file = std::fs::File::open(path).map_err(|e| {
                Error::config(format!("supervised.dataset {}: {e}", path.display()))
            })?;
            arithmetic::read_dataset(std::io::BufReader::new(file))
        }
        None => generate_dataset(
            config.supervised.train_instances,
            config.arithmetic.terms,
            derive_seed(config.seed, &[TRAIN_DATA_STREAM]),
        ),
    }
}

fn build_runner(config: &RunConfig, resume: Option<&Path>) -> Result<Box<dyn Runner>> {
    match (config.task, config.mode) {
        (Task::Arithmetic, Mode::Ppo) => {
            let env = ArithmeticEnv::new(config.arithmetic.terms)?;
            let count = config.arithmetic.eval_instances;
            let seed = derive_seed(config.seed, &[EVAL_STREAM]);
            let eval = Box::new(move |p: &TransformerPolicy<f32>, e: &ArithmeticEnv| {
                let episodes = arithmetic_eval_episodes(e, count, seed)?;
                Ok(eval_record(&evaluate_episodes(p, e, episodes, seed)?))
            });
            ppo_transformer(config, env, resume, eval)
        }
        (Task::Arithmetic, Mode::Supervised) => {
            let (policy, _, state) = transformer_start(config, resume)?;
            let train = load_or_generate(config)?;
            let validation = generate_dataset(
                config.supervised.validation_instances,
                config.arithmetic.terms,
                derive_seed(config.seed, &[VALIDATION_STREAM]),
            )?;
            let mut trainer = SupervisedTrainer::new(
                policy,
                &train,
                validation,
                config.supervised.clone(),
                config.seed,
            )?;
            if let Some(s) = state {
                trainer.set_steps_done(s.step);
            }
            Ok(Box::new(SupervisedRunner { trainer }))
        }
        (Task::GameExternal, _) => {
            let g = &config.game;
            if config.model.context_len < g.budget + 1 {
                return Err(Error::config("model.context_len must exceed game.budget"));
            }
            let engine = ExternalEngine::new(
                &g.command[0],
                g.command[1..].to_vec(),
                Duration::from_secs_f64(g.timeout_secs),
            );
            let env = GameEnv::new(Arc::new(engine), g, config.seed)?;
            let seed = derive_seed(config.seed, &[EVAL_STREAM]);
            let batch = config.ppo.batch_size;
            let eval = Box::new(move |p: &TransformerPolicy<f32>, e: &GameEnv| {
                let episodes = e.sample_episodes(batch, &mut ChaCha8Rng::seed_from_u64(seed))?;
                Ok(eval_record(&evaluate_episodes(p, e, episodes, seed)?))
            });
            ppo_transformer(config, env, resume, eval)
        }
        (Task::BanditSanity, _) => {
            if resume.is_some() {
                return Err(Error::usage(
                    "bandit runs have no checkpoint to resume from",
                ));
            }
            let env = BanditEnv::new(config.bandit.rewards.clone())?;
            let policy = TabularPolicy::<f32>::new(env.contexts(), env.actions())?;
            let trainer = PpoTrainer::new(policy, env, config.resolved_ppo())?;
            let eval = Box::new(|p: &TabularPolicy<f32>, e: &BanditEnv| Ok(bandit_record(p, e)));
            Ok(Box::new(PpoRunner {
                trainer,
                eval,
                save: |_, _| Ok(false),
            }))
        }
    }
}

/// Mean probability of each context's best action and mean per-context entropy.
pub fn bandit_record(policy: &TabularPolicy<f32>, env: &BanditEnv) -> Record {
    let best = env.best_actions();
    let dists: Vec<Vec<f64>> = (0..env.contexts())
        .map(|c| policy.distribution(c))
        .collect();
    let p_best = dists
        .iter()
        .zip(&best)
        .map(|(d, &b)| d[b])
        .collect::<Vec<_>>();
    let h = dists.iter().map(|d| stats::entropy(d)).collect::<Vec<_>>();
    vec![
        ("eval_best_action_prob", stats::mean(&p_best)),
        ("eval_context_entropy", stats::mean(&h)),
    ]
}

fn finalize(out_dir: &Path, half_life: f64) -> Result<Series> {
    let (_, series) = read_metrics(&out_dir.join(METRICS_FILE))?;
    write_summary(&out_dir.join(SUMMARY_FILE), &series)?;
    write_plotdata(&out_dir.join(PLOTDATA_FILE), &series, half_life)?;
    Ok(series)
}

/// Runs training to `config.steps`, writing the metrics stream, summary, plot
/// data and checkpoints into `out_dir`.
pub fn train(
    config: &RunConfig,
    out_dir: &Path,
    options: &RunOptions,
    progress: &mut dyn FnMut(u64, &Record),
) -> Result<RunOutcome> {
    config.validate()?;
    let config = resolve(config);
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::config(format!("output directory {}: {e}", out_dir.display())))?;
    let mut runner = build_runner(&config, options.resume.as_deref())?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut writer = if options.resume.is_some() && metrics_path.exists() {
        MetricsWriter::resume(&metrics_path, runner.steps_done())?
    } else {
        let mut header =
            json!({ "build": options.build_id, "config": serde_json::to_value(&config)? });
        if let Some(extra) = &options.header_extra {
            header["sweep"] = extra.clone();
        }
        MetricsWriter::create(&metrics_path, &header)?
    };
    let checkpoint = out_dir.join(CHECKPOINT_FILE);

    while runner.steps_done() < config.steps {
        let next = runner.steps_done() + 1;
        let evaluate =
            config.eval_interval > 0 && (next % config.eval_interval == 0 || next == config.steps);
        let record = match runner.step(evaluate) {
            Ok(r) => r,
            Err(e) => {
                drop(writer);
                finalize(out_dir, config.smoothing_half_life)?;
                return Err(e);
            }
        };
        let step = runner.steps_done();
        writer.record(step, &record)?;
        progress(step, &record);
        if config.checkpoint_interval > 0 && step % config.checkpoint_interval == 0 {
            runner.save(&checkpoint)?;
        }
    }
    runner.save(&checkpoint)?;
    drop(writer);
    let series = finalize(out_dir, config.smoothing_half_life)?;
    Ok(RunOutcome {
        out_dir: out_dir.to_path_buf(),
        steps: runner.steps_done(),
        series,
    })
}

/// Directory name of one sweep point.
pub fn sweep_dir_name(key: &str, value: &toml::Value) -> String {
    format!("{key}={value}").replace(['/', '"', ' '], "_")
}

/// Runs `config` once per value of `key`, each with a seed derived from the base
/// seed and the value's index.
pub fn sweep(
    config: &RunConfig,
    key: &str,
    values: &[toml::Value],
    out_root: &Path,
    options: &RunOptions,
    progress: &mut dyn FnMut(&str, u64, &Record),
) -> Result<Vec<RunOutcome>> {
    if values.is_empty() {
        return Err(Error::usage("sweep needs at least one value"));
    }
    let mut outcomes = Vec::with_capacity(values.len());
    for (i, v) in values.iter().enumerate() {
        let mut c = config.with_override(key, v.clone())?;
        c.seed = config_seed(derive_seed(config.seed, &[i as u64]));
        let name = sweep_dir_name(key, v);
        let opts = RunOptions {
            header_extra: Some(
                json!({ "param": key, "value": serde_json::to_value(v)?, "index": i }),
            ),
            ..options.clone()
        };
        outcomes.push(train(&c, &out_root.join(&name), &opts, &mut |s, r| {
            progress(&name, s, r)
        })?);
    }
    Ok(outcomes)
}
