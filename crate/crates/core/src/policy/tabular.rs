use super::{check_inputs, PackedOutput, Policy};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Softmax policy over a logit table indexed by the first token of the sequence
/// (the bandit context), with a per-context value.
#[derive(Clone, Debug)]
pub struct TabularPolicy<S> {
    contexts: usize,
    actions: usize,
    context_len: usize,
    store: ParameterStore<S>,
    logits: ParamId,
    values: ParamId,
}

impl<S: Scalar> TabularPolicy<S> {
    /// All logits and values start at zero (uniform policy).
    pub fn new(contexts: usize, actions: usize) -> Result<Self> {
        Self::with_logits(contexts, actions, vec![S::zero(); contexts * actions])
    }

    pub fn with_logits(contexts: usize, actions: usize, logits: Vec<S>) -> Result<Self> {
        if contexts == 0 || actions < 2 {
            return Err(Error::config(
                "tabular policy needs a context and at least two actions",
            ));
        }
        let mut store = ParameterStore::new();
        let logits = store.add("logits", Tensor::new(vec![contexts, actions], logits)?)?;
        let values = store.add("values", Tensor::zeros(vec![contexts, 1]))?;
        Ok(TabularPolicy {
            contexts,
            actions,
            context_len: 8,
            store,
            logits,
            values,
        })
    }

    pub fn contexts(&self) -> usize {
        self.contexts
    }

    /// Current action distribution for one context.
    pub fn distribution(&self, context: usize) -> Vec<f64> {
        let row: Vec<f64> = self
            .store
            .get(self.logits)
            .row(context)
            .iter()
            .map(|v| v.as_f64())
            .collect();
        crate::stats::softmax(&row)
    }
}

impl<S: Scalar> Policy<S> for TabularPolicy<S> {
    fn vocab_size(&self) -> usize {
        self.actions
    }

    fn input_vocab_size(&self) -> usize {
        self.actions.max(self.contexts)
    }

    fn context_len(&self) -> usize {
        self.context_len
    }

    fn params(&self) -> &ParameterStore<S> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParameterStore<S> {
        &mut self.store
    }

    fn forward_with(
        &self,
        params: &ParameterStore<S>,
        tape: &mut Tape<S>,
        sequences: &[&[u32]],
    ) -> Result<PackedOutput> {
        let segments = check_inputs(self, sequences)?;
        let mut rows = Vec::new();
        for seq in sequences {
            let ctx = seq[0] as usize;
            if ctx >= self.contexts {
                return Err(Error::usage(format!(
                    "context token {ctx} outside {} contexts",
                    self.contexts
                )));
            }
            rows.extend(std::iter::repeat_n(ctx, seq.len()));
        }
        let table = tape.param(params, self.logits)?;
        let logits = tape.embedding(table, &rows)?;
        let vtable = tape.param(params, self.values)?;
        let values = tape.embedding(vtable, &rows)?;
        let values = tape.reshape(values, vec![rows.len()])?;
        Ok(PackedOutput {
            logits,
            values,
            segments,
        })
    }
}
