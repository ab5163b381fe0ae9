//! Finite-difference validation of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Outcome of [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates_checked: usize,
}

/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn eval<S: Scalar, F>(loss_fn: &F, store: &ParameterStore<S>) -> Result<f64>
where
    F: Fn(&mut Tape<S>, &ParameterStore<S>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    tape.value(loss)
        .item()
        .map(Scalar::as_f64)
        .ok_or_else(|| Error::usage("loss function must return a scalar"))
}

/// Compares backpropagated gradients against central differences of step `step`
/// on `samples` randomly chosen coordinates (all of them if `samples` exceeds the count).
///
/// Run it with `S = f64`; in `f32` the central difference is dominated by rounding.
pub fn grad_check<S: Scalar, F>(
    store: &ParameterStore<S>,
    loss_fn: F,
    samples: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<S>, &ParameterStore<S>) -> Result<Var>,
{
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, &analytic_store)?;
    let base = tape
        .value(loss)
        .item()
        .ok_or_else(|| Error::usage("loss function must return a scalar"))?
        .as_f64();
    tape.backward(loss, &mut analytic_store)?;
    drop(tape);

    if eval(&loss_fn, store)?.to_bits() != base.to_bits() {
        return Err(Error::usage(
            "loss function is not deterministic: re-evaluation differs",
        ));
    }

    let coords: Vec<(ParamId, usize)> = store
        .ids()
        .flat_map(|id| (0..store.get(id).len()).map(move |j| (id, j)))
        .collect();
    if coords.is_empty() {
        return Err(Error::usage("grad_check on an empty parameter store"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<usize> = if samples >= coords.len() {
        (0..coords.len()).collect()
    } else {
        let mut picked = sample(&mut rng, coords.len(), samples).into_vec();
        picked.sort_unstable();
        picked
    };

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        coordinates_checked: 0,
    };
    for &c in &chosen {
        let (id, j) = coords[c];
        let original = probe.get(id).values()[j];
        probe.get_mut(id).values_mut()[j] = S::of(original.as_f64() + step);
        let plus = eval(&loss_fn, &probe)?;
        probe.get_mut(id).values_mut()[j] = S::of(original.as_f64() - step);
        let minus = eval(&loss_fn, &probe)?;
        probe.get_mut(id).values_mut()[j] = original;

        let numeric = (plus - minus) / (2.0 * step);
        let analytic = analytic_store.get(id).grad().map_or(0.0, |g| g[j].as_f64());
        let err = relative_error(analytic, numeric);
        report.coordinates_checked += 1;
        if err > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = err;
            report.worst = Some((store.name(id).to_string(), j));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use std::cell::Cell;

    fn store() -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.add(
            "w",
            Tensor::new(vec![2, 3], vec![0.3, -1.2, 0.7, 2.0, -0.1, 0.4]).unwrap(),
        )
        .unwrap();
        s
    }

    #[test]
    fn sum_of_squares_is_exact() {
        let s = store();
        let report = grad_check(
            &s,
            |tape, store| {
                let w = tape.param(store, store.id("w").unwrap())?;
                let sq = tape.square(w)?;
                tape.sum(sq)
            },
            100,
            1e-3,
            7,
        )
        .unwrap();
        assert_eq!(report.coordinates_checked, 6);
        assert!(report.max_relative_error < 1e-6, "{report:?}");
    }

    #[test]
    fn nondeterministic_loss_is_rejected() {
        let s = store();
        let calls = Cell::new(0.0);
        let result = grad_check(
            &s,
            |tape, store| {
                calls.set(calls.get() + 1.0);
                let w = tape.param(store, store.id("w").unwrap())?;
                let shifted = tape.offset(w, calls.get())?;
                tape.sum(shifted)
            },
            3,
            1e-3,
            1,
        );
        assert!(matches!(result, Err(Error::Usage(_))));
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // clamp has a zero gradient outside the interval, so a finite difference
        // straddling the boundary disagrees.
        let mut s = ParameterStore::new();
        s.add("w", Tensor::from_vec(vec![1.0])).unwrap();
        let report = grad_check(
            &s,
            |tape, store| {
                let w = tape.param(store, store.id("w").unwrap())?;
                let c = tape.clamp(w, -5.0, 1.0)?;
                tape.sum(c)
            },
            1,
            1e-3,
            1,
        )
        .unwrap();
        assert!(report.max_relative_error > 0.1);
    }
}
