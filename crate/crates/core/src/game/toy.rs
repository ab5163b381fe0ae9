//! A configurable engine with constructed outcomes, for testing the fitness metrics.
//!
//! Descriptions are `key value` statements separated by newlines or `;`:
//!
//! ```text
//! players 2        # at least 2
//! turns 4          # game ends after this many moves, or `never`
//! moves 3          # legal moves per turn; 0 makes every move a fault
//! result draw      # draw | first | last | random
//! fault-on-move 2  # optional: the engine crashes on this (1-based) move
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GameEngine, Outcome, RuntimeFault};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResultRule {
    Draw,
    First,
    Last,
    /// Winner drawn uniformly per match.
    Random,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToyGame {
    pub players: usize,
    pub turns: Option<u64>,
    pub moves: usize,
    pub result: ResultRule,
    pub fault_on_move: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct ToyMatch {
    game: ToyGame,
    moves_made: u64,
    random_winner: usize,
    outcome: Option<Outcome>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ToyEngine;

impl ToyEngine {
    pub fn always_draw_after(k: u64) -> String {
        format!("players 2; turns {k}; result draw")
    }

    pub fn first_player_wins_in(k: u64) -> String {
        format!("players 2; turns {k}; result first")
    }

    pub fn never_ends() -> String {
        "players 2; turns never; result draw".to_string()
    }
}

fn parse_count(key: &str, value: &str) -> std::result::Result<u64, String> {
    value
        .parse()
        .map_err(|_| format!("`{key}` expects a non-negative integer, got `{value}`"))
}

impl GameEngine for ToyEngine {
    type Game = ToyGame;
    type Match = ToyMatch;

    fn compile(&self, description: &str) -> std::result::Result<ToyGame, String> {
        let mut game = ToyGame {
            players: 2,
            turns: None,
            moves: 3,
            result: ResultRule::Draw,
            fault_on_move: None,
        };
        let mut seen_turns = false;
        let mut seen_result = false;
        for stmt in description
            .split(['\n', ';'])
            .map(str::trim)
            .filter(|s| !s.is_empty())
        {
            let words: Vec<&str> = stmt.split_whitespace().collect();
            let [key, value] = words[..] else {
                return Err(format!("expected `key value`, got `{stmt}`"));
            };
            match key {
                "players" => {
                    game.players = parse_count(key, value)? as usize;
                    if game.players < 2 {
                        return Err("a game needs at least two players".into());
                    }
                }
                "turns" => {
                    seen_turns = true;
                    game.turns = if value == "never" {
                        None
                    } else {
                        Some(parse_count(key, value)?)
                    };
                }
                "moves" => game.moves = parse_count(key, value)? as usize,
                "result" => {
                    seen_result = true;
                    game.result = match value {
                        "draw" => ResultRule::Draw,
                        "first" => ResultRule::First,
                        "last" => ResultRule::Last,
                        "random" => ResultRule::Random,
                        other => return Err(format!("unknown result rule `{other}`")),
                    }
                }
                "fault-on-move" => game.fault_on_move = Some(parse_count(key, value)?),
                other => return Err(format!("unknown statement `{other}`")),
            }
        }
        if !seen_turns || !seen_result {
            return Err("a game needs `turns` and `result`".into());
        }
        Ok(game)
    }

    fn player_count(&self, game: &ToyGame) -> usize {
        game.players
    }

    fn new_match(&self, game: &ToyGame, seed: u64) -> ToyMatch {
        let random_winner = ChaCha8Rng::seed_from_u64(seed).random_range(0..game.players);
        let mut m = ToyMatch {
            game: game.clone(),
            moves_made: 0,
            random_winner,
            outcome: None,
        };
        if game.turns == Some(0) {
            m.outcome = Some(m.final_outcome());
        }
        m
    }

    fn legal_move_count(&self, m: &ToyMatch) -> usize {
        if m.outcome.is_some() {
            0
        } else {
            m.game.moves
        }
    }

    fn apply_uniform_random_move(
        &self,
        m: &mut ToyMatch,
        rng: &mut ChaCha8Rng,
    ) -> std::result::Result<(), RuntimeFault> {
        if m.outcome.is_some() {
            return Err(RuntimeFault("move after the end of the game".into()));
        }
        if m.game.moves == 0 {
            return Err(RuntimeFault("no legal moves".into()));
        }
        if m.game.fault_on_move == Some(m.moves_made + 1) {
            return Err(RuntimeFault(format!("crash on move {}", m.moves_made + 1)));
        }
        let _choice = rng.random_range(0..m.game.moves);
        m.moves_made += 1;
        if m.game.turns.is_some_and(|t| m.moves_made >= t) {
            m.outcome = Some(m.final_outcome());
        }
        Ok(())
    }

    fn is_terminal(&self, m: &ToyMatch) -> bool {
        m.outcome.is_some()
    }

    fn outcome(&self, m: &ToyMatch) -> Option<Outcome> {
        m.outcome
    }
}

impl ToyMatch {
    fn final_outcome(&self) -> Outcome {
        match self.game.result {
            ResultRule::Draw => Outcome::Draw,
            ResultRule::First => Outcome::Winner(0),
            ResultRule::Last => Outcome::Winner(self.game.players - 1),
            ResultRule::Random => Outcome::Winner(self.random_winner),
        }
    }

    pub fn moves_made(&self) -> u64 {
        self.moves_made
    }
}
