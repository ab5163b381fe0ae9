use frl_core::arithmetic::{EQUALS, PAD, VOCAB_SIZE};
use frl_core::policy::{
    forward, load_checkpoint, sample_batch, sample_sequence, save_checkpoint, sequence_stats,
    snapshot_reference, ModelConfig, Policy, SampleRequest, TabularPolicy, TokenSequence,
    TrainerState, TransformerPolicy,
};
use frl_core::stats;
use frl_core::{AdamConfig, Error, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy() -> TransformerPolicy<f32> {
    TransformerPolicy::new(ModelConfig::toy(7)).unwrap()
}

fn seq(tokens: &[u32]) -> TokenSequence {
    TokenSequence::prompt(tokens.to_vec())
}

#[test]
fn logits_are_causal() {
    let p = toy();
    let a = forward(&p, &seq(&[3, 46, 4, 47, 7, 46, 1])).unwrap();
    let b = forward(&p, &seq(&[3, 46, 4, 47, 9, 9, 9])).unwrap();
    for r in 0..4 {
        assert_eq!(a.logits.row(r), b.logits.row(r), "row {r}");
        assert_eq!(a.values.values()[r], b.values.values()[r]);
    }
    assert_ne!(a.logits.row(5), b.logits.row(5));
}

#[test]
fn packed_batch_matches_single_sequences() {
    let p = toy();
    let x: &[u32] = &[1, 46, 2, 47];
    let y: &[u32] = &[5, 46, 6, 46, 7, 47, 12];
    let mut tape = Tape::new();
    let out = p.forward_packed(&mut tape, &[x, y]).unwrap();
    let packed = tape.value(out.logits).clone();
    let single = forward(&p, &seq(y)).unwrap();
    for r in 0..y.len() {
        for (a, b) in packed.row(x.len() + r).iter().zip(single.logits.row(r)) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn initial_entropy_is_near_uniform() {
    let p = toy();
    let out = forward(&p, &seq(&[6, 46, 9, 46, 8, 47])).unwrap();
    let ln_v = (VOCAB_SIZE as f64).ln();
    for r in 0..out.logits.rows() {
        let row: Vec<f64> = out.logits.row(r).iter().map(|&v| v as f64).collect();
        let h = stats::entropy(&stats::softmax(&row));
        assert!((h - ln_v).abs() < 0.1 * ln_v, "row {r}: {h}");
    }
    let full = TransformerPolicy::<f32>::new(ModelConfig::default()).unwrap();
    let out = forward(&full, &seq(&[6, 46, 9, 47])).unwrap();
    let row: Vec<f64> = out.logits.row(3).iter().map(|&v| v as f64).collect();
    assert!((stats::entropy(&stats::softmax(&row)) - ln_v).abs() < 0.1 * ln_v);
}

#[test]
fn forward_is_deterministic_and_validates() {
    let p = toy();
    let s = seq(&[1, 2, 3]);
    assert_eq!(forward(&p, &s).unwrap(), forward(&p, &s).unwrap());
    assert!(matches!(forward(&p, &seq(&[49])), Err(Error::Usage(_))));
    assert!(matches!(forward(&p, &seq(&[0; 65])), Err(Error::Usage(_))));
    assert!(TransformerPolicy::<f32>::new(ModelConfig {
        width: 30,
        heads: 4,
        ..ModelConfig::toy(0)
    })
    .is_err());
}

#[test]
fn padding_is_validated() {
    let s = TokenSequence::with_valid_len(vec![1, 46, 2, PAD, PAD], 1, 3).unwrap();
    s.validate(VOCAB_SIZE, 64, Some(PAD)).unwrap();
    assert_eq!(s.generated(), &[46, 2]);
    let bad = TokenSequence::with_valid_len(vec![1, PAD, 2], 1, 3).unwrap();
    assert!(bad.validate(VOCAB_SIZE, 64, Some(PAD)).is_err());
    assert!(TokenSequence::new(vec![1], 2).is_err());
    let padded = seq(&[1, 2]).padded(PAD, 4);
    assert_eq!(padded.tokens(), &[1, 2, PAD, PAD]);
    assert_eq!(padded.valid(), &[1, 2]);
}

#[test]
fn one_hot_policy_always_samples_its_action() {
    let mut logits = vec![0.0f32; 3];
    logits[2] = 1e4;
    let p = TabularPolicy::<f32>::with_logits(1, 3, logits).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        let s = sample_sequence(&p, &seq(&[0]), None, 1, &mut rng).unwrap();
        assert_eq!(s.sequence.generated(), &[2]);
        assert!(s.log_probs[0].abs() < 1e-9);
    }
}

#[test]
fn budget_caps_generation_and_stop_ends_it() {
    let p = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let s = sample_sequence(&p, &seq(&[1, 47]), None, 3, &mut rng).unwrap();
        assert_eq!(s.sequence.generated().len(), 3);
        let s = sample_sequence(&p, &seq(&[1, 47]), Some(EQUALS), 6, &mut rng).unwrap();
        let g = s.sequence.generated();
        assert!(g.len() <= 6);
        assert!(!g[..g.len() - 1].contains(&EQUALS));
        assert!(g.len() == 6 || g.last() == Some(&EQUALS));
    }
    assert!(sample_sequence(&p, &seq(&[1]), None, 0, &mut rng).is_err());
    assert!(sample_sequence(&p, &seq(&[1; 62]), None, 3, &mut rng).is_err());
}

#[test]
fn seeded_sampling_reproduces_and_ignores_batch_mates() {
    let p = toy();
    let prompt = vec![6, 46, 9, 47];
    let go = |extra: bool| {
        let mut reqs = vec![SampleRequest {
            prompt: prompt.clone(),
            budget: 5,
        }];
        let mut rngs = vec![ChaCha8Rng::seed_from_u64(99)];
        if extra {
            reqs.push(SampleRequest {
                prompt: vec![1, 2, 3],
                budget: 2,
            });
            rngs.push(ChaCha8Rng::seed_from_u64(5));
        }
        sample_batch(&p, &reqs, None, &mut rngs).unwrap().remove(0)
    };
    let a = go(false);
    assert_eq!(a, go(false));
    let b = go(true);
    assert_eq!(a.sequence, b.sequence);
    for (x, y) in a.log_probs.iter().zip(&b.log_probs) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn sampled_log_probs_match_recomputed_stats() {
    let p = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = sample_sequence(&p, &seq(&[3, 46, 4, 47]), None, 5, &mut rng).unwrap();
    let out = forward(&p, &s.sequence).unwrap();
    let st = sequence_stats(&out, &s.sequence, 4..9).unwrap();
    for (a, b) in st.iter().zip(&s.log_probs) {
        assert!((a.log_prob - b).abs() < 1e-5);
        assert!((a.distribution.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert!(sequence_stats(&out, &s.sequence, [0]).is_err());
}

fn nudge(p: &mut TransformerPolicy<f32>) {
    let mut tape = Tape::new();
    let out = p.forward_packed(&mut tape, &[&[1, 2, 3]]).unwrap();
    let loss = tape.cross_entropy(out.logits, &[0, 1], &[7, 7]).unwrap();
    tape.backward(loss, p.params_mut()).unwrap();
    p.params_mut().adam_step(&AdamConfig::default()).unwrap();
}

#[test]
fn reference_snapshot_is_frozen() {
    let mut p = toy();
    let reference = snapshot_reference(&p);
    let s = seq(&[1, 2, 3]);
    let dist = |q: &TransformerPolicy<f32>| {
        let out = forward(q, &s).unwrap();
        stats::softmax(
            &out.logits
                .row(2)
                .iter()
                .map(|&v| v as f64)
                .collect::<Vec<_>>(),
        )
    };
    assert_eq!(
        stats::kl_divergence(&dist(reference.policy()), &dist(&p)),
        0.0
    );
    nudge(&mut p);
    assert!(stats::kl_divergence(&dist(reference.policy()), &dist(&p)) > 0.0);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run/model.ckpt");
    let mut p = toy();
    let reference = p.clone();
    nudge(&mut p);
    let state = TrainerState {
        step: 12,
        beta_kl: 0.3,
        optimizer_step: 0,
    };
    save_checkpoint(&path, &p, Some(&reference), &state).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert!(bytes.starts_with(b"FRLCKPT1\n"));

    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.trainer.step, 12);
    assert_eq!(ck.trainer.beta_kl, 0.3);
    assert_eq!(ck.trainer.optimizer_step, 1);
    for ((n1, a), (n2, b)) in ck.policy.params().iter().zip(p.params().iter()) {
        assert_eq!(n1, n2);
        assert_eq!(a.values(), b.values());
    }
    assert_eq!(
        ck.policy.params().optimizer_state(),
        p.params().optimizer_state()
    );
    let r = ck.reference.unwrap();
    for ((_, a), (_, b)) in r.params().iter().zip(reference.params().iter()) {
        assert_eq!(a.values(), b.values());
    }
    let s = seq(&[4, 46, 5, 47]);
    assert_eq!(forward(&ck.policy, &s).unwrap(), forward(&p, &s).unwrap());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &toy(), None, &TrainerState::default()).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let truncated = dir.path().join("truncated.ckpt");
    std::fs::write(&truncated, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(
        load_checkpoint(&truncated),
        Err(Error::Checkpoint { .. })
    ));

    let magic = dir.path().join("magic.ckpt");
    let mut b = bytes.clone();
    b[0] = b'X';
    std::fs::write(&magic, &b).unwrap();
    assert!(matches!(
        load_checkpoint(&magic),
        Err(Error::Checkpoint { .. })
    ));

    let extra = dir.path().join("extra.ckpt");
    let mut b = bytes.clone();
    b.extend_from_slice(&[0, 0, 0, 0]);
    std::fs::write(&extra, &b).unwrap();
    assert!(matches!(
        load_checkpoint(&extra),
        Err(Error::Checkpoint { .. })
    ));
}

#[test]
fn cast_to_f64_preserves_outputs() {
    let p = toy();
    let q = p.cast::<f64>();
    let s = seq(&[6, 46, 9, 46, 8, 47]);
    let a = forward(&p, &s).unwrap();
    let b = forward(&q, &s).unwrap();
    for (x, y) in a.logits.values().iter().zip(b.logits.values()) {
        assert!((*x as f64 - y).abs() < 1e-4);
    }
}
