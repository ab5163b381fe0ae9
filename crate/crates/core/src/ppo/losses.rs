//! Loss terms on the autodiff tape. Every function takes rows already restricted
//! to generated positions, so prompt and PAD states never enter a loss.

use crate::error::{Error, Result};
use crate::policy::PackedOutput;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::PPOConfig;

/// Policy quantities at the selected state rows.
#[derive(Clone, Copy, Debug)]
pub struct PolicyRows {
    /// `[m, vocab]` log-probabilities.
    pub log_probs: Var,
    /// `[m, vocab]` probabilities.
    pub probs: Var,
    /// `[m]` log-probability of the action taken at each state.
    pub action_log_probs: Var,
    /// `[m]` value estimates.
    pub values: Var,
}

/// Selects state rows of a packed forward and the actions taken from them.
pub fn gather_rows<S: Scalar>(
    tape: &mut Tape<S>,
    out: &PackedOutput,
    rows: &[usize],
    actions: &[usize],
) -> Result<PolicyRows> {
    let logits = tape.gather(out.logits, rows)?;
    let log_probs = tape.log_softmax(logits)?;
    let probs = tape.exp(log_probs)?;
    let action_log_probs = tape.pick(log_probs, actions)?;
    let values = tape.gather(out.values, rows)?;
    Ok(PolicyRows {
        log_probs,
        probs,
        action_log_probs,
        values,
    })
}

fn vector<S: Scalar>(tape: &mut Tape<S>, xs: &[f64]) -> Result<Var> {
    tape.constant(Tensor::new(
        vec![xs.len()],
        xs.iter().map(|&x| S::of(x)).collect(),
    )?)
}

fn aligned(name: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::config(format!("{name}: {a} rows but {b} inputs")));
    }
    Ok(())
}

/// Clipped surrogate `mean(min(r·Â, clip(r, 1−ε, 1+ε)·Â))` with `r = exp(new − old)`.
pub fn loss_clip<S: Scalar>(
    tape: &mut Tape<S>,
    new_log_probs: Var,
    old_log_probs: &[f64],
    advantages: &[f64],
    epsilon: f64,
) -> Result<Var> {
    let m = tape.value(new_log_probs).len();
    aligned("loss_clip", m, old_log_probs.len())?;
    aligned("loss_clip", m, advantages.len())?;
    let old = vector(tape, old_log_probs)?;
    let adv = vector(tape, advantages)?;
    let diff = tape.sub(new_log_probs, old)?;
    let ratio = tape.exp(diff)?;
    let unclipped = tape.mul(ratio, adv)?;
    let bounded = tape.clamp(ratio, 1.0 - epsilon, 1.0 + epsilon)?;
    let clipped = tape.mul(bounded, adv)?;
    let surrogate = tape.minimum(unclipped, clipped)?;
    tape.mean(surrogate)
}

/// Mean over states of the full-distribution `KL(π_ref ‖ π_θ)`; `reference` is
/// row-major `[m, vocab]` probabilities.
pub fn loss_kl<S: Scalar>(tape: &mut Tape<S>, log_probs: Var, reference: &[f64]) -> Result<Var> {
    let shape = tape.shape(log_probs).to_vec();
    aligned("loss_kl", tape.value(log_probs).len(), reference.len())?;
    let m = shape[0];
    let n = reference.len() / m;
    let neg_entropy: Vec<f64> = reference
        .chunks(n)
        .map(|row| row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum())
        .collect();
    let p_ref = tape.constant(Tensor::new(
        shape,
        reference.iter().map(|&x| S::of(x)).collect(),
    )?)?;
    let weighted = tape.mul(p_ref, log_probs)?;
    let cross = tape.sum_rows(weighted)?;
    let neg_entropy = vector(tape, &neg_entropy)?;
    let per_state = tape.sub(neg_entropy, cross)?;
    tape.mean(per_state)
}

/// Mean per-state entropy `−(1/m) Σ_t Σ_a π log π`.
pub fn loss_entropy<S: Scalar>(tape: &mut Tape<S>, probs: Var, log_probs: Var) -> Result<Var> {
    let m = tape.value(probs).rows();
    let plogp = tape.mul(probs, log_probs)?;
    let total = tape.sum(plogp)?;
    tape.scale(total, -1.0 / m as f64)
}

/// Entropy of the batch-mean distribution `H(π̄)`.
pub fn loss_batch_entropy<S: Scalar>(tape: &mut Tape<S>, probs: Var) -> Result<Var> {
    if tape.value(probs).rows() < 2 {
        return Err(Error::usage("batch entropy needs at least two states"));
    }
    let mean = tape.mean_rows(probs)?;
    let log_mean = tape.log(mean)?;
    let plogp = tape.mul(mean, log_mean)?;
    let total = tape.sum(plogp)?;
    tape.scale(total, -1.0)
}

/// Mean squared error of values against targets.
pub fn loss_value<S: Scalar>(tape: &mut Tape<S>, values: Var, targets: &[f64]) -> Result<Var> {
    aligned("loss_value", tape.value(values).len(), targets.len())?;
    let t = vector(tape, targets)?;
    let diff = tape.sub(values, t)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}

/// Per-state data the composite loss needs besides the network outputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossInputs {
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
    /// Row-major `[m, vocab]` reference probabilities; empty without a reference.
    pub reference_probs: Vec<f64>,
}

/// Tape nodes of each loss component.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub clip: Var,
    pub kl: Option<Var>,
    pub entropy: Var,
    pub batch_entropy: Option<Var>,
    pub value: Var,
    pub total: Var,
}

fn component<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { op } => Error::NonFinite {
            op: format!("{name} loss ({op})"),
        },
        other => other,
    })
}

/// `−clip − β_ENT·H̄ − β_BENT·H(π̄) + β_KL·KL + c_v·MSE`.
pub fn composite_loss<S: Scalar>(
    tape: &mut Tape<S>,
    rows: &PolicyRows,
    inputs: &LossInputs,
    config: &PPOConfig,
    beta_kl: f64,
) -> Result<LossTerms> {
    let clip = component(
        "clip",
        loss_clip(
            tape,
            rows.action_log_probs,
            &inputs.old_log_probs,
            &inputs.advantages,
            config.clip_range,
        ),
    )?;
    let entropy = component("entropy", loss_entropy(tape, rows.probs, rows.log_probs))?;
    let batch_entropy = if tape.value(rows.probs).rows() >= 2 {
        Some(component(
            "batch entropy",
            loss_batch_entropy(tape, rows.probs),
        )?)
    } else if config.beta_bent > 0.0 {
        return Err(Error::usage("batch entropy needs at least two states"));
    } else {
        None
    };
    let kl = if inputs.reference_probs.is_empty() {
        None
    } else {
        Some(component(
            "kl",
            loss_kl(tape, rows.log_probs, &inputs.reference_probs),
        )?)
    };
    let value = component(
        "value",
        loss_value(tape, rows.values, &inputs.value_targets),
    )?;

    let mut total = component("total", tape.scale(clip, -1.0))?;
    let mut add = |tape: &mut Tape<S>, term: Var, coef: f64| -> Result<()> {
        if coef != 0.0 {
            let scaled = tape.scale(term, coef)?;
            total = tape.add(total, scaled)?;
        }
        Ok(())
    };
    component("total", add(tape, entropy, -config.beta_ent))?;
    if let Some(b) = batch_entropy {
        component("total", add(tape, b, -config.beta_bent))?;
    }
    if let (Some(k), true) = (kl, config.kl_enabled) {
        component("total", add(tape, k, beta_kl))?;
    }
    component("total", add(tape, value, config.value_coef))?;
    Ok(LossTerms {
        clip,
        kl,
        entropy,
        batch_entropy,
        value,
        total,
    })
}
