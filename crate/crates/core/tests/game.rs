use std::io::Cursor;
use std::time::Duration;

use frl_core::game::{
    aggregate_reward, balance, completion_rate, decisiveness, evaluate_compilability,
    evaluate_game, run_playouts, serve, GameEngine, GameMetrics, LocalEvaluator, PlayoutEvaluator,
    PlayoutStats, Response, ToyEngine,
};
use proptest::prelude::*;

fn stats(wins: Vec<u64>, draws: u64, terminated: u64, attempted: u64) -> PlayoutStats {
    PlayoutStats {
        attempted,
        wins,
        draws,
        terminated,
        faults: 0,
        first_move_faults: 0,
        turn_cap: 500,
    }
}

fn metrics(b: f64, f: f64, d: f64) -> GameMetrics {
    GameMetrics {
        compiled: true,
        playable: true,
        balance: b,
        completion: f,
        decisiveness: d,
    }
}

#[test]
fn balance_anchors() {
    assert_eq!(balance(&stats(vec![50, 50], 0, 100, 100)), 1.0);
    assert_eq!(balance(&stats(vec![100, 0], 0, 100, 100)), 0.0);
    assert_eq!(balance(&stats(vec![75, 25], 0, 100, 100)), 0.5);
}

#[test]
fn completion_and_decisiveness() {
    let s = stats(vec![60, 40], 0, 100, 100);
    assert_eq!((completion_rate(&s), decisiveness(&s)), (1.0, 1.0));
    assert_eq!(completion_rate(&stats(vec![0, 0], 0, 0, 100)), 0.0);
    assert_eq!(decisiveness(&stats(vec![40, 33], 27, 100, 100)), 0.73);
}

#[test]
fn aggregate_short_circuits_and_formula() {
    assert_eq!(aggregate_reward(&GameMetrics::not_compiled()), 0.0);
    assert_eq!(
        aggregate_reward(&GameMetrics {
            playable: false,
            ..metrics(1.0, 1.0, 1.0)
        }),
        0.1
    );
    assert_eq!(aggregate_reward(&metrics(0.512, 1.0, 0.729)), 0.9);
    assert_eq!(aggregate_reward(&metrics(0.0, 0.0, 0.0)), 0.0);
}

proptest! {
    #[test]
    fn balance_ignores_player_labels(mut wins in prop::collection::vec(0u64..40, 2..6), rot in 0usize..6) {
        let total: u64 = wins.iter().sum();
        let before = balance(&stats(wins.clone(), 0, total, total.max(1)));
        let k = rot % wins.len();
        wins.rotate_left(k);
        wins.reverse();
        let after = balance(&stats(wins, 0, total, total.max(1)));
        prop_assert_eq!(before, after);
        prop_assert!((0.0..=1.0).contains(&before));
    }

    #[test]
    fn aggregate_is_monotone_and_bounded(b in 0.0f64..1.0, f in 0.0f64..1.0, d in 0.0f64..1.0, step in 0.0f64..0.5) {
        let base = aggregate_reward(&metrics(b, f, d));
        prop_assert!((0.0..=1.0).contains(&base));
        prop_assert!(aggregate_reward(&metrics((b + step).min(1.0), f, d)) >= base);
        prop_assert!(aggregate_reward(&metrics(b, (f + step).min(1.0), d)) >= base);
        prop_assert!(aggregate_reward(&metrics(b, f, (d + step).min(1.0))) >= base);
    }
}

fn local() -> LocalEvaluator<ToyEngine> {
    LocalEvaluator { engine: ToyEngine }
}

#[test]
fn constructed_engines() {
    let e = ToyEngine;
    let g = e.compile(&ToyEngine::always_draw_after(4)).unwrap();
    let s = run_playouts(&e, &g, 100, 500, 1);
    assert_eq!((s.draws, s.terminated, s.attempted), (100, 100, 100));

    let g = e.compile(&ToyEngine::first_player_wins_in(3)).unwrap();
    let s = run_playouts(&e, &g, 100, 500, 1);
    assert_eq!(s.wins, vec![100, 0]);

    let g = e.compile(&ToyEngine::never_ends()).unwrap();
    let s = run_playouts(&e, &g, 100, 500, 1);
    assert_eq!((s.terminated, s.capped()), (0, 100));
}

#[test]
fn compilability() {
    let ev = local();
    assert!(evaluate_compilability(&ev, "players 2; turns 4; result draw").unwrap());
    for bad in [
        "players 2; turns 4",
        "players one; turns 4; result draw",
        "jump 3",
        "players 1; turns 2; result draw",
        "",
    ] {
        assert!(!evaluate_compilability(&ev, bad).unwrap(), "{bad}");
    }
    assert_eq!(
        evaluate_game(&ev, "turns 4", 10, 500, 0).unwrap().reward(),
        0.0
    );
}

#[test]
fn faults_split_into_playability_and_completion() {
    let ev = local();
    let first = evaluate_game(&ev, "turns 5; result first; fault-on-move 1", 20, 500, 0).unwrap();
    assert!(first.compiled && !first.playable);
    assert_eq!(first.reward(), 0.1);
    let no_moves = evaluate_game(&ev, "turns 5; result first; moves 0", 20, 500, 0).unwrap();
    assert!(!no_moves.playable);

    let later = ev
        .evaluate("turns 5; result first; fault-on-move 3", 20, 500, 0)
        .unwrap();
    assert!(later.playable);
    let s = later.stats.unwrap();
    assert_eq!((s.faults, s.terminated), (20, 0));
    assert_eq!(later_metrics(&s), (0.0, 1.0));
}

fn later_metrics(s: &PlayoutStats) -> (f64, f64) {
    (completion_rate(s), decisiveness(s))
}

#[test]
fn random_winners_are_reproducible_and_schedule_independent() {
    let e = ToyEngine;
    let g = e.compile("players 3; turns 7; result random").unwrap();
    let a = run_playouts(&e, &g, 300, 500, 42);
    let serial = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| run_playouts(&e, &g, 300, 500, 42));
    let wide = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap()
        .install(|| run_playouts(&e, &g, 300, 500, 42));
    assert_eq!(a, serial);
    assert_eq!(a, wide);
    assert!(a.is_consistent());
    assert_eq!(a.wins.iter().sum::<u64>(), 300);
    assert!(a.wins.iter().all(|&w| w > 60));
}

#[test]
fn cap_limits_long_games() {
    let m = evaluate_game(&local(), "turns 600; result first", 10, 500, 0).unwrap();
    assert_eq!(m.completion, 0.0);
    assert_eq!(m.decisiveness, 1.0);
    assert_eq!(m.balance, 1.0);
}

#[test]
fn server_answers_protocol_lines() {
    let input = concat!(
        r#"{"cmd":"evaluate","description":"turns 3; result first","playouts":10,"turn_cap":500,"seed":1}"#,
        "\n",
        r#"{"cmd":"evaluate","description":"nonsense","playouts":10,"turn_cap":500,"seed":1}"#,
        "\n",
        r#"{"cmd":"dance","description":"","playouts":1,"turn_cap":1,"seed":1}"#,
        "\nnot json\n"
    );
    let mut out = Vec::new();
    serve(ToyEngine, Cursor::new(input), &mut out, Duration::ZERO).unwrap();
    let lines: Vec<Response> = String::from_utf8(out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].compiled && lines[0].playable);
    assert_eq!(lines[0].wins, vec![10, 0]);
    assert_eq!(lines[0].terminated, 10);
    assert!(!lines[1].compiled);
    assert!(lines[2].error.is_some());
    assert!(lines[3].error.is_some());
}
