use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{check_inputs, PackedOutput, Policy};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Shape of the decoder-only policy network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub value_hidden: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 49,
            context_len: 64,
            layers: 4,
            width: 128,
            heads: 4,
            value_hidden: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Two layers of width 64; trains in a few minutes on one CPU core.
    pub fn toy(seed: u64) -> Self {
        ModelConfig {
            layers: 2,
            width: 64,
            heads: 4,
            value_hidden: 64,
            seed,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("context_len", self.context_len),
            ("layers", self.layers),
            ("width", self.width),
            ("heads", self.heads),
            ("value_hidden", self.value_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model.{name} must be positive")));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "model.width ({}) must be divisible by model.heads ({})",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct BlockIds {
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    attn_proj_w: ParamId,
    attn_proj_b: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
    fc_w: ParamId,
    fc_b: ParamId,
    mlp_proj_w: ParamId,
    mlp_proj_b: ParamId,
}

#[derive(Clone, Debug)]
struct LayerIds {
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<BlockIds>,
    lnf_gamma: ParamId,
    lnf_beta: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    value_fc_w: ParamId,
    value_fc_b: ParamId,
    value_out_w: ParamId,
    value_out_b: ParamId,
}

/// Pre-norm GPT-style decoder with learned positional embeddings and a
/// one-hidden-layer value head on the final hidden state.
#[derive(Clone, Debug)]
pub struct TransformerPolicy<S> {
    config: ModelConfig,
    store: ParameterStore<S>,
    ids: LayerIds,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal<S: Scalar>(&mut self, shape: Vec<usize>, std: f64) -> Tensor<S> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("positive std");
        let values = (0..n).map(|_| S::of(dist.sample(&mut self.rng))).collect();
        Tensor::new(shape, values).expect("shape matches")
    }
}

impl<S: Scalar> TransformerPolicy<S> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let mut store = ParameterStore::new();
        let (v, c, d, h) = (
            config.vocab_size,
            config.context_len,
            config.width,
            config.value_hidden,
        );
        let std = 0.02;
        let resid_std = std / (2.0 * config.layers as f64).sqrt();
        let ones = |n| Tensor::<S>::full(vec![n], S::one());
        let zeros = |n| Tensor::<S>::zeros(vec![n]);

        let tok_emb = store.add("tok_emb", init.normal(vec![v, d], std))?;
        let pos_emb = store.add("pos_emb", init.normal(vec![c, d], std))?;
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |s: &str| format!("block{l}.{s}");
            blocks.push(BlockIds {
                ln1_gamma: store.add(p("ln1.gamma"), ones(d))?,
                ln1_beta: store.add(p("ln1.beta"), zeros(d))?,
                qkv_w: store.add(p("attn.qkv.w"), init.normal(vec![d, 3 * d], std))?,
                qkv_b: store.add(p("attn.qkv.b"), zeros(3 * d))?,
                attn_proj_w: store.add(p("attn.proj.w"), init.normal(vec![d, d], resid_std))?,
                attn_proj_b: store.add(p("attn.proj.b"), zeros(d))?,
                ln2_gamma: store.add(p("ln2.gamma"), ones(d))?,
                ln2_beta: store.add(p("ln2.beta"), zeros(d))?,
                fc_w: store.add(p("mlp.fc.w"), init.normal(vec![d, 4 * d], std))?,
                fc_b: store.add(p("mlp.fc.b"), zeros(4 * d))?,
                mlp_proj_w: store.add(p("mlp.proj.w"), init.normal(vec![4 * d, d], resid_std))?,
                mlp_proj_b: store.add(p("mlp.proj.b"), zeros(d))?,
            });
        }
        let ids = LayerIds {
            tok_emb,
            pos_emb,
            blocks,
            lnf_gamma: store.add("ln_f.gamma", ones(d))?,
            lnf_beta: store.add("ln_f.beta", zeros(d))?,
            head_w: store.add("head.w", init.normal(vec![d, v], std))?,
            head_b: store.add("head.b", zeros(v))?,
            value_fc_w: store.add(
                "value.fc.w",
                init.normal(vec![d, h], 1.0 / (d as f64).sqrt()),
            )?,
            value_fc_b: store.add("value.fc.b", zeros(h))?,
            value_out_w: store.add("value.out.w", init.normal(vec![h, 1], 0.01))?,
            value_out_b: store.add("value.out.b", zeros(1))?,
        };
        Ok(TransformerPolicy { config, store, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Replaces all parameters; names and shapes must match the architecture.
    pub fn load_params(&mut self, params: ParameterStore<S>) -> Result<()> {
        if params.len() != self.store.len() {
            return Err(Error::config(
                "parameter count does not match the architecture",
            ));
        }
        for ((name, t), (other_name, other)) in self.store.iter().zip(params.iter()) {
            if name != other_name || t.shape() != other.shape() {
                return Err(Error::config(format!(
                    "parameter `{other_name}` {:?} does not match `{name}` {:?}",
                    other.shape(),
                    t.shape()
                )));
            }
        }
        self.store = params;
        Ok(())
    }

    /// Same architecture and weights at another precision.
    pub fn cast<T: Scalar>(&self) -> TransformerPolicy<T> {
        TransformerPolicy {
            config: self.config.clone(),
            store: self.store.cast(),
            ids: self.ids.clone(),
        }
    }
}

impl<S: Scalar> Policy<S> for TransformerPolicy<S> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn context_len(&self) -> usize {
        self.config.context_len
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
        let ids = &self.ids;
        let token_ids: Vec<usize> = sequences
            .iter()
            .flat_map(|s| s.iter().map(|&t| t as usize))
            .collect();
        let positions: Vec<usize> = sequences.iter().flat_map(|s| 0..s.len()).collect();

        let tok_table = tape.param(params, ids.tok_emb)?;
        let pos_table = tape.param(params, ids.pos_emb)?;
        let tok = tape.embedding(tok_table, &token_ids)?;
        let pos = tape.embedding(pos_table, &positions)?;
        let mut x = tape.add(tok, pos)?;

        for b in &ids.blocks {
            let g = tape.param(params, b.ln1_gamma)?;
            let be = tape.param(params, b.ln1_beta)?;
            let h = tape.layer_norm(x, g, be)?;
            let w = tape.param(params, b.qkv_w)?;
            let bias = tape.param(params, b.qkv_b)?;
            let qkv = tape.matmul(h, w)?;
            let qkv = tape.add_row(qkv, bias)?;
            let att = tape.causal_attention(qkv, &segments, self.config.heads)?;
            let w = tape.param(params, b.attn_proj_w)?;
            let bias = tape.param(params, b.attn_proj_b)?;
            let att = tape.matmul(att, w)?;
            let att = tape.add_row(att, bias)?;
            x = tape.add(x, att)?;

            let g = tape.param(params, b.ln2_gamma)?;
            let be = tape.param(params, b.ln2_beta)?;
            let h = tape.layer_norm(x, g, be)?;
            let w = tape.param(params, b.fc_w)?;
            let bias = tape.param(params, b.fc_b)?;
            let f = tape.matmul(h, w)?;
            let f = tape.add_row(f, bias)?;
            let f = tape.gelu(f)?;
            let w = tape.param(params, b.mlp_proj_w)?;
            let bias = tape.param(params, b.mlp_proj_b)?;
            let f = tape.matmul(f, w)?;
            let f = tape.add_row(f, bias)?;
            x = tape.add(x, f)?;
        }

        let g = tape.param(params, ids.lnf_gamma)?;
        let be = tape.param(params, ids.lnf_beta)?;
        let h = tape.layer_norm(x, g, be)?;
        let w = tape.param(params, ids.head_w)?;
        let bias = tape.param(params, ids.head_b)?;
        let logits = tape.matmul(h, w)?;
        let logits = tape.add_row(logits, bias)?;

        let w = tape.param(params, ids.value_fc_w)?;
        let bias = tape.param(params, ids.value_fc_b)?;
        let v = tape.matmul(h, w)?;
        let v = tape.add_row(v, bias)?;
        let v = tape.gelu(v)?;
        let w = tape.param(params, ids.value_out_w)?;
        let bias = tape.param(params, ids.value_out_b)?;
        let v = tape.matmul(v, w)?;
        let v = tape.add_row(v, bias)?;
        let rows = token_ids.len();
        let values = tape.reshape(v, vec![rows])?;
        Ok(PackedOutput {
            logits,
            values,
            segments,
        })
    }
}
