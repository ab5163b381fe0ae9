use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate_game, PlayoutEvaluator, DEFAULT_PLAYOUTS, DEFAULT_TURN_CAP};
use crate::env::{Environment, Episode};
use crate::error::{Error, Result};

/// Words of the toy description language. Token 0 starts every prompt and
/// token 1 ends a description.
pub const DEFAULT_GAME_VOCABULARY: &[&str] = &[
    "<start>",
    "<end>",
    ";",
    "players",
    "turns",
    "moves",
    "result",
    "fault-on-move",
    "draw",
    "first",
    "last",
    "random",
    "never",
    "0",
    "1",
    "2",
    "3",
    "4",
    "5",
    "10",
    "50",
    "100",
    "1000",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GameEnvConfig {
    /// Engine command speaking the JSON-lines protocol.
    pub command: Vec<String>,
    pub timeout_secs: f64,
    pub playouts: usize,
    pub turn_cap: usize,
    /// Maximum description length in tokens.
    pub budget: usize,
    pub vocabulary: Vec<String>,
}

impl Default for GameEnvConfig {
    fn default() -> Self {
        GameEnvConfig {
            command: Vec::new(),
            timeout_secs: 120.0,
            playouts: DEFAULT_PLAYOUTS,
            turn_cap: DEFAULT_TURN_CAP,
            budget: 16,
            vocabulary: DEFAULT_GAME_VOCABULARY
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

/// Generates a game description token by token; the reward is the aggregate
/// fitness of the finished description.
pub struct GameEnv {
    evaluator: Arc<dyn PlayoutEvaluator>,
    vocabulary: Vec<String>,
    playouts: usize,
    turn_cap: usize,
    budget: usize,
    seed: u64,
    cache: Mutex<HashMap<String, f64>>,
}

impl GameEnv {
    pub fn new(
        evaluator: Arc<dyn PlayoutEvaluator>,
        config: &GameEnvConfig,
        seed: u64,
    ) -> Result<Self> {
        if config.vocabulary.len() < 3 {
            return Err(Error::config(
                "game.vocabulary needs a start token, an end token and words",
            ));
        }
        if config.budget == 0 || config.playouts == 0 || config.turn_cap == 0 {
            return Err(Error::config(
                "game.budget, game.playouts and game.turn_cap must be positive",
            ));
        }
        Ok(GameEnv {
            evaluator,
            vocabulary: config.vocabulary.clone(),
            playouts: config.playouts,
            turn_cap: config.turn_cap,
            budget: config.budget,
            seed,
            cache: Mutex::new(HashMap::new()),
        })
    }

    /// Description text of generated tokens (the end token and anything after it dropped).
    pub fn render(&self, generated: &[u32]) -> String {
        generated
            .iter()
            .take_while(|&&t| t != 1)
            .map(|&t| self.vocabulary.get(t as usize).map_or("?", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn score(&self, description: &str) -> Result<f64> {
        if let Some(&r) = self.cache.lock().expect("cache lock").get(description) {
            return Ok(r);
        }
        let r = evaluate_game(
            self.evaluator.as_ref(),
            description,
            self.playouts,
            self.turn_cap,
            self.seed,
        )?
        .reward();
        self.cache
            .lock()
            .expect("cache lock")
            .insert(description.to_string(), r);
        Ok(r)
    }
}

impl Environment for GameEnv {
    fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }

    fn stop_token(&self) -> Option<u32> {
        Some(1)
    }

    fn sample_episodes(&self, count: usize, _rng: &mut ChaCha8Rng) -> Result<Vec<Episode>> {
        Ok((0..count)
            .map(|i| Episode {
                prompt: vec![0],
                budget: self.budget,
                instance: i,
                step: 1,
                is_final: true,
                target: None,
            })
            .collect())
    }

    fn reward(&self, _episode: &Episode, generated: &[u32]) -> Result<f64> {
        self.score(&self.render(generated))
    }
}
