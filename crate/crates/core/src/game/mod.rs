//! Game-fitness reward from compilation and uniform-random playouts.

mod env;
mod external;
mod toy;

pub use env::{GameEnv, GameEnvConfig, DEFAULT_GAME_VOCABULARY};
pub use external::{serve, ExternalEngine, Request, Response};
pub use toy::{ToyEngine, ToyGame, ToyMatch};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ppo::derive_seed;

pub const DEFAULT_PLAYOUTS: usize = 100;
pub const DEFAULT_TURN_CAP: usize = 500;

/// Final state of a finished match.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Winner(usize),
    Draw,
}

/// An engine crashed while applying a move.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("runtime fault: {0}")]
pub struct RuntimeFault(pub String);

/// What any game backend must provide.
pub trait GameEngine: Send + Sync {
    type Game: Send + Sync;
    type Match: Send;

    /// Parses and checks a description; the error is the compiler message.
    fn compile(&self, description: &str) -> std::result::Result<Self::Game, String>;
    fn player_count(&self, game: &Self::Game) -> usize;
    fn new_match(&self, game: &Self::Game, seed: u64) -> Self::Match;
    fn legal_move_count(&self, m: &Self::Match) -> usize;
    fn apply_uniform_random_move(
        &self,
        m: &mut Self::Match,
        rng: &mut ChaCha8Rng,
    ) -> std::result::Result<(), RuntimeFault>;
    fn is_terminal(&self, m: &Self::Match) -> bool;
    fn outcome(&self, m: &Self::Match) -> Option<Outcome>;
}

/// Counts over a set of playouts. Every attempted playout is exactly one of:
/// a win, a draw, capped (not terminated) or faulted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlayoutStats {
    pub attempted: u64,
    pub wins: Vec<u64>,
    pub draws: u64,
    pub terminated: u64,
    pub faults: u64,
    /// Playouts whose very first move attempt faulted.
    pub first_move_faults: u64,
    pub turn_cap: u64,
}

impl PlayoutStats {
    pub fn empty(players: usize, turn_cap: usize) -> Self {
        PlayoutStats {
            attempted: 0,
            wins: vec![0; players],
            draws: 0,
            terminated: 0,
            faults: 0,
            first_move_faults: 0,
            turn_cap: turn_cap as u64,
        }
    }

    pub fn capped(&self) -> u64 {
        self.attempted - self.terminated - self.faults
    }

    pub fn merge(mut self, other: &PlayoutStats) -> Self {
        self.attempted += other.attempted;
        for (a, b) in self.wins.iter_mut().zip(&other.wins) {
            *a += b;
        }
        self.draws += other.draws;
        self.terminated += other.terminated;
        self.faults += other.faults;
        self.first_move_faults += other.first_move_faults;
        self
    }

    pub fn is_consistent(&self) -> bool {
        let wins: u64 = self.wins.iter().sum();
        wins + self.draws == self.terminated && self.terminated + self.faults <= self.attempted
    }
}

fn play_one<E: GameEngine>(engine: &E, game: &E::Game, turn_cap: usize, seed: u64) -> PlayoutStats {
    let mut stats = PlayoutStats::empty(engine.player_count(game), turn_cap);
    stats.attempted = 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = engine.new_match(game, derive_seed(seed, &[1]));
    for turn in 0..turn_cap {
        if engine.is_terminal(&m) {
            break;
        }
        let faulted = engine.legal_move_count(&m) == 0
            || engine.apply_uniform_random_move(&mut m, &mut rng).is_err();
        if faulted {
            stats.faults = 1;
            stats.first_move_faults = u64::from(turn == 0);
            return stats;
        }
    }
    if engine.is_terminal(&m) {
        match engine.outcome(&m) {
            Some(Outcome::Winner(p)) if p < stats.wins.len() => {
                stats.terminated = 1;
                stats.wins[p] = 1;
            }
            Some(Outcome::Draw) => {
                stats.terminated = 1;
                stats.draws = 1;
            }
            // a terminal match without a valid outcome is an engine fault
            _ => stats.faults = 1,
        }
    }
    stats
}

/// Plays `playouts` matches with uniformly random moves. Playout `i` is seeded
/// by `(seed, i)`, so the result does not depend on scheduling.
pub fn run_playouts<E: GameEngine>(
    engine: &E,
    game: &E::Game,
    playouts: usize,
    turn_cap: usize,
    seed: u64,
) -> PlayoutStats {
    let empty = PlayoutStats::empty(engine.player_count(game), turn_cap);
    (0..playouts)
        .into_par_iter()
        .map(|i| play_one(engine, game, turn_cap, derive_seed(seed, &[i as u64])))
        .collect::<Vec<_>>()
        .iter()
        .fold(empty, PlayoutStats::merge)
}

/// `1 − max |winrate_i − winrate_j|`, winrates over attempted playouts.
pub fn balance(stats: &PlayoutStats) -> f64 {
    if stats.attempted == 0 || stats.wins.is_empty() {
        return 0.0;
    }
    let n = stats.attempted as f64;
    let max = stats.wins.iter().max().copied().unwrap_or(0) as f64 / n;
    let min = stats.wins.iter().min().copied().unwrap_or(0) as f64 / n;
    1.0 - (max - min)
}

/// Fraction of attempted playouts that reached a terminal state within the cap.
pub fn completion_rate(stats: &PlayoutStats) -> f64 {
    if stats.attempted == 0 {
        return 0.0;
    }
    stats.terminated as f64 / stats.attempted as f64
}

/// `1 − draws / attempted`.
pub fn decisiveness(stats: &PlayoutStats) -> f64 {
    if stats.attempted == 0 {
        return 0.0;
    }
    1.0 - stats.draws as f64 / stats.attempted as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameMetrics {
    pub compiled: bool,
    pub playable: bool,
    pub balance: f64,
    pub completion: f64,
    pub decisiveness: f64,
}

impl GameMetrics {
    pub fn not_compiled() -> Self {
        GameMetrics {
            compiled: false,
            playable: false,
            balance: 0.0,
            completion: 0.0,
            decisiveness: 0.0,
        }
    }

    pub fn from_stats(stats: &PlayoutStats, playable: bool) -> Self {
        GameMetrics {
            compiled: true,
            playable,
            balance: balance(stats),
            completion: completion_rate(stats),
            decisiveness: decisiveness(stats),
        }
    }

    pub fn reward(&self) -> f64 {
        aggregate_reward(self)
    }
}

/// 0 if not compiled, 0.1 if not playable, else `(B^⅓ + F^⅓ + D^⅓) / 3`.
pub fn aggregate_reward(m: &GameMetrics) -> f64 {
    if !m.compiled {
        0.0
    } else if !m.playable {
        0.1
    } else {
        (m.balance.cbrt() + m.completion.cbrt() + m.decisiveness.cbrt()) / 3.0
    }
}

/// Compile result plus playouts, as reported by an evaluator.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub compiled: bool,
    pub playable: bool,
    pub stats: Option<PlayoutStats>,
}

impl Evaluation {
    pub fn metrics(&self) -> GameMetrics {
        match (&self.stats, self.compiled) {
            (Some(s), true) => GameMetrics::from_stats(s, self.playable),
            _ => GameMetrics::not_compiled(),
        }
    }
}

/// Anything that can score a description: a local engine or an external process.
pub trait PlayoutEvaluator: Send + Sync {
    fn evaluate(
        &self,
        description: &str,
        playouts: usize,
        turn_cap: usize,
        seed: u64,
    ) -> Result<Evaluation>;
}

/// `C`: whether the engine accepts the description.
pub fn evaluate_compilability<V: PlayoutEvaluator + ?Sized>(
    evaluator: &V,
    description: &str,
) -> Result<bool> {
    Ok(evaluator.evaluate(description, 0, 0, 0)?.compiled)
}

/// Runs an in-process engine.
#[derive(Clone, Debug, Default)]
pub struct LocalEvaluator<E> {
    pub engine: E,
}

impl<E: GameEngine> PlayoutEvaluator for LocalEvaluator<E> {
    fn evaluate(
        &self,
        description: &str,
        playouts: usize,
        turn_cap: usize,
        seed: u64,
    ) -> Result<Evaluation> {
        let Ok(game) = self.engine.compile(description) else {
            return Ok(Evaluation {
                compiled: false,
                playable: false,
                stats: None,
            });
        };
        let stats = run_playouts(&self.engine, &game, playouts, turn_cap, seed);
        Ok(Evaluation {
            compiled: true,
            playable: stats.first_move_faults == 0,
            stats: Some(stats),
        })
    }
}

/// Scores a description end to end.
pub fn evaluate_game<V: PlayoutEvaluator + ?Sized>(
    evaluator: &V,
    description: &str,
    playouts: usize,
    turn_cap: usize,
    seed: u64,
) -> Result<GameMetrics> {
    Ok(evaluator
        .evaluate(description, playouts, turn_cap, seed)?
        .metrics())
}
