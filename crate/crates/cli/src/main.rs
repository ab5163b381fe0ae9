use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use frl_core::arithmetic::{self, ArithmeticInstance};
use frl_core::env::ArithmeticEnv;
use frl_core::experiment::{self, Record, RunConfig, RunOptions};
use frl_core::game::{evaluate_game, ExternalEngine, LocalEvaluator, PlayoutEvaluator, ToyEngine};
use frl_core::policy::load_checkpoint;
use frl_core::ppo::generate_dataset;
use frl_core::Error;

const BUILD_ID: &str = env!("FRL_BUILD_ID");

#[derive(Parser)]
#[command(
    name = "frl",
    version,
    about = "PPO with programmed rewards: training and evaluation harness"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file for gen-data). Falls back to FRL_OUT_DIR.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for rollouts and playouts. Falls back to FRL_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the configured number of training steps.
    #[arg(long, global = true)]
    steps: Option<u64>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train and write metrics, summary, plot data and a checkpoint.
    Train {
        /// Continue from this checkpoint; the step counter carries on.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on fresh arithmetic instances.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 256)]
        instances: usize,
    },
    /// Evaluate reward functions on given inputs.
    RewardCheck {
        /// Target value for an arithmetic generation.
        #[arg(long)]
        target: Option<i64>,
        /// Game description to score instead.
        #[arg(long)]
        game: Option<String>,
        /// Engine command for --game (default: built-in toy engine).
        #[arg(long, num_args = 1.., allow_hyphen_values = true)]
        engine: Vec<String>,
        #[arg(long, default_value_t = 100)]
        playouts: usize,
        #[arg(long, default_value_t = 500)]
        turn_cap: usize,
        /// JSON-lines file of {"generated": .., "target": ..} or {"game": ..} cases.
        #[arg(long)]
        cases: Option<PathBuf>,
        /// Generated expression text, e.g. `23 + 4 =`.
        generated: Vec<String>,
    },
    /// Write arithmetic instances as JSON lines.
    GenData {
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = arithmetic::DEFAULT_TERMS)]
        terms: usize,
    },
    /// Expected final-step reward of a constant answer (the naive policy by default).
    Baseline {
        #[arg(long, default_value_t = 23)]
        answer: i64,
        #[arg(long, default_value_t = arithmetic::DEFAULT_TERMS)]
        terms: usize,
    },
    /// Train once per value of a config key, each in its own directory.
    Sweep {
        /// Dotted config key, e.g. `ppo.beta_bent`.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Serve the toy engine over the JSON-lines protocol on stdin/stdout.
    EngineServer {
        /// Artificial delay before each response.
        #[arg(long, default_value_t = 0)]
        delay_ms: u64,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config(_) | Error::Usage(_)) => 2,
            CliError::Core(Error::NonFinite { .. }) => 3,
            CliError::Core(Error::Infrastructure(_)) => 4,
            CliError::Core(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn env_override<T: std::str::FromStr>(flag: Option<T>, var: &str) -> Result<Option<T>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(var) {
        Ok(v) if !v.is_empty() => v
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{var}: cannot parse `{v}`"))),
        _ => Ok(None),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("--config is required".into()))?;
    let mut config = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(steps) = cli.steps {
        config.steps = steps;
    }
    config.validate()?;
    Ok(config)
}

fn out_dir(cli: &Cli, config: &RunConfig) -> Result<PathBuf> {
    let task = serde_json::to_value(config.task)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default();
    Ok(env_override(cli.out.clone(), "FRL_OUT_DIR")?
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(format!("runs/{task}-seed{}", config.seed))))
}

fn progress(total: u64) -> impl FnMut(&str, u64, &Record) {
    let every = (total / 20).max(1);
    move |label, step, record| {
        if step % every == 0 || step == total {
            let fields: Vec<String> = record
                .iter()
                .take(4)
                .map(|(k, v)| format!("{k}={v:.4}"))
                .collect();
            eprintln!("{label}step {step}/{total} {}", fields.join(" "));
        }
    }
}

fn train(cli: &Cli, resume: Option<PathBuf>) -> Result<()> {
    let config = load_config(cli)?;
    let out = out_dir(cli, &config)?;
    let options = RunOptions {
        build_id: BUILD_ID.into(),
        resume,
        header_extra: None,
    };
    let mut report = progress(config.steps);
    let outcome = experiment::train(&config, &out, &options, &mut |s, r| report("", s, r))?;
    println!("{}", outcome.out_dir.display());
    Ok(())
}

fn eval(cli: &Cli, checkpoint: &Path, instances: usize) -> Result<()> {
    let terms = match &cli.config {
        Some(_) => load_config(cli)?.arithmetic.terms,
        None => arithmetic::DEFAULT_TERMS,
    };
    let seed = cli.seed.unwrap_or(0);
    let ck = load_checkpoint(checkpoint)?;
    let env = ArithmeticEnv::new(terms)?;
    let episodes = experiment::arithmetic_eval_episodes(&env, instances, seed)?;
    let batch = experiment::evaluate_episodes(&ck.policy, &env, episodes, seed)?;
    let mut report = serde_json::Map::new();
    report.insert("checkpoint".into(), checkpoint.display().to_string().into());
    report.insert("trained_steps".into(), ck.trainer.step.into());
    report.insert("instances".into(), instances.into());
    for (k, v) in experiment::eval_record(&batch) {
        report.insert(k.into(), serde_json::json!(v));
    }
    report.insert(
        "naive_baseline".into(),
        serde_json::json!(arithmetic::naive_baseline_reward()),
    );
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    if let Some(dir) = env_override(cli.out.clone(), "FRL_OUT_DIR")? {
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("eval.json"), format!("{text}\n"))?;
    }
    println!("{text}");
    Ok(())
}

fn arithmetic_reward(text: &str, target: i64) -> f64 {
    arithmetic::tokenize_text(text).map_or(0.0, |tokens| arithmetic::reward(&tokens, target))
}

fn game_reward(
    description: &str,
    engine: &[String],
    playouts: usize,
    turn_cap: usize,
    seed: u64,
) -> Result<f64> {
    let evaluator: Arc<dyn PlayoutEvaluator> = match engine.split_first() {
        Some((cmd, args)) => Arc::new(ExternalEngine::new(
            cmd,
            args.to_vec(),
            ExternalEngine::DEFAULT_TIMEOUT,
        )),
        None => Arc::new(LocalEvaluator { engine: ToyEngine }),
    };
    Ok(evaluate_game(evaluator.as_ref(), description, playouts, turn_cap, seed)?.reward())
}

#[allow(clippy::too_many_arguments)]
fn reward_check(
    cli: &Cli,
    target: Option<i64>,
    game: Option<&str>,
    engine: &[String],
    playouts: usize,
    turn_cap: usize,
    cases: Option<&Path>,
    generated: &[String],
) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    if let Some(path) = cases {
        let file = std::fs::File::open(path)?;
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let case: serde_json::Value = serde_json::from_str(&line).map_err(Error::from)?;
            let reward = if let Some(desc) = case.get("game").and_then(|v| v.as_str()) {
                game_reward(desc, engine, playouts, turn_cap, seed)?
            } else {
                let text = case.get("generated").and_then(|v| v.as_str());
                let target = case.get("target").and_then(|v| v.as_i64());
                match (text, target) {
                    (Some(t), Some(y)) => arithmetic_reward(t, y),
                    _ => {
                        return Err(CliError::Usage(format!(
                            "case {}: needs `game` or `generated` and `target`",
                            i + 1
                        )))
                    }
                }
            };
            println!("{reward:?}");
        }
        return Ok(());
    }
    if let Some(desc) = game {
        println!("{:?}", game_reward(desc, engine, playouts, turn_cap, seed)?);
        return Ok(());
    }
    let target = target
        .ok_or_else(|| CliError::Usage("reward-check needs --target, --game or --cases".into()))?;
    println!("{:?}", arithmetic_reward(&generated.join(" "), target));
    Ok(())
}

fn gen_data(cli: &Cli, count: usize, terms: usize) -> Result<()> {
    let instances: Vec<ArithmeticInstance> = generate_dataset(count, terms, cli.seed.unwrap_or(0))?;
    match env_override(cli.out.clone(), "FRL_OUT_DIR")? {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            let mut file = std::io::BufWriter::new(std::fs::File::create(&path)?);
            arithmetic::write_dataset(&mut file, &instances)?;
            file.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            arithmetic::write_dataset(&mut lock, &instances)?;
        }
    }
    Ok(())
}

fn parse_value(text: &str) -> Result<toml::Value> {
    let doc: toml::Table = toml::from_str(&format!("v = {text}"))
        .or_else(|_| toml::from_str(&format!("v = {:?}", text)))
        .map_err(|e| CliError::Usage(format!("bad sweep value `{text}`: {e}")))?;
    Ok(doc["v"].clone())
}

fn sweep(cli: &Cli, param: &str, values: &[String]) -> Result<()> {
    let config = load_config(cli)?;
    let out = out_dir(cli, &config)?;
    let mut parsed = Vec::with_capacity(values.len());
    for v in values {
        let mut value = parse_value(v.trim())?;
        if let toml::Value::Integer(i) = value {
            if config.with_override(param, value.clone()).is_err() {
                value = toml::Value::Float(i as f64);
            }
        }
        parsed.push(value);
    }
    let options = RunOptions {
        build_id: BUILD_ID.into(),
        resume: None,
        header_extra: None,
    };
    let mut report = progress(config.steps);
    let outcomes = experiment::sweep(
        &config,
        param,
        &parsed,
        &out,
        &options,
        &mut |name, s, r| report(&format!("[{name}] "), s, r),
    )?;
    for o in outcomes {
        println!("{}", o.out_dir.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = env_override(cli.threads, "FRL_THREADS")? {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Cmd::Train { resume } => train(&cli, resume.clone()),
        Cmd::Eval {
            checkpoint,
            instances,
        } => eval(&cli, checkpoint, *instances),
        Cmd::RewardCheck {
            target,
            game,
            engine,
            playouts,
            turn_cap,
            cases,
            generated,
        } => reward_check(
            &cli,
            *target,
            game.as_deref(),
            engine,
            *playouts,
            *turn_cap,
            cases.as_deref(),
            generated,
        ),
        Cmd::GenData { count, terms } => gen_data(&cli, *count, *terms),
        Cmd::Baseline { answer, terms } => {
            println!("{:?}", arithmetic::constant_answer_reward(*answer, *terms));
            Ok(())
        }
        Cmd::Sweep { param, values } => sweep(&cli, param, values),
        Cmd::EngineServer { delay_ms } => {
            let stdin = std::io::stdin();
            let stdout = std::io::stdout();
            frl_core::game::serve(
                ToyEngine,
                stdin.lock(),
                stdout.lock(),
                Duration::from_millis(*delay_ms),
            )?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
