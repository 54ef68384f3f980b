//! The language model: token and learned position embeddings, a stack of
//! post-norm blocks and a linear output head.

use std::ops::Range;

use rand::Rng;

use super::config::ModelConfig;
use super::HarnessError;
use crate::attention::{transformer_block_segments, xavier_uniform, AttentionTrace, BlockParams, BlockVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub blocks: Vec<BlockParams>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Tape handles of a registered model.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub token_embedding: Var,
    pub position_embedding: Var,
    pub blocks: Vec<BlockVars>,
    pub head_w: Var,
    pub head_b: Var,
}

impl ModelVars {
    /// Handles in [`Model::named_tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.token_embedding, self.position_embedding];
        for b in &self.blocks {
            out.extend(b.vars());
        }
        out.extend([self.head_w, self.head_b]);
        out
    }
}

pub struct Forward {
    pub vars: ModelVars,
    /// `N×V` logits for the row-stacked batch.
    pub logits: Var,
    /// Row range of each sequence inside the stack.
    pub segments: Vec<Range<usize>>,
    /// `traces[layer][sequence][head]`.
    pub traces: Vec<Vec<Vec<AttentionTrace>>>,
}

impl Model {
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<Self, HarnessError> {
        config.validate()?;
        let (v, d, l) = (config.vocab_size, config.d_model, config.max_seq_len);
        if v < 2 {
            return Err(HarnessError::Config(format!("vocab_size {v} is too small")));
        }
        let token_embedding = xavier_uniform(rng, &[v, d], v, d);
        let position_embedding = xavier_uniform(rng, &[l, d], l, d);
        let blocks = (0..config.n_layers)
            .map(|_| BlockParams::init(rng, d, config.n_heads, config.d_ff))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            config: config.clone(),
            token_embedding,
            position_embedding,
            blocks,
            head_w: xavier_uniform(rng, &[d, v], d, v),
            head_b: Tensor::zeros(&[v]),
        })
    }

    /// Parameters under stable path names, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named_tensors().into_iter().map(|(n, t)| (format!("blocks.{i}.{n}"), t)));
        }
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let token_embedding = tape.leaf(self.token_embedding.clone(), trainable);
        let position_embedding = tape.leaf(self.position_embedding.clone(), trainable);
        let blocks = self.blocks.iter().map(|b| b.register_leaves(tape, trainable)).collect();
        let head_w = tape.leaf(self.head_w.clone(), trainable);
        let head_b = tape.leaf(self.head_b.clone(), trainable);
        ModelVars {
            token_embedding,
            position_embedding,
            blocks,
            head_w,
            head_b,
        }
    }

    /// Runs the model over a batch of input id sequences.
    pub fn forward(&self, tape: &mut Tape, inputs: &[&[usize]], trainable: bool) -> Result<Forward, HarnessError> {
        if inputs.is_empty() || inputs.iter().any(|s| s.is_empty()) {
            return Err(HarnessError::Data("forward pass over an empty sequence".into()));
        }
        let max_len = self.config.max_seq_len;
        if let Some(s) = inputs.iter().find(|s| s.len() > max_len) {
            return Err(HarnessError::Data(format!(
                "sequence of length {} exceeds max_seq_len {max_len}",
                s.len()
            )));
        }
        let vars = self.register(tape, trainable);
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(inputs.len());
        for seq in inputs {
            let start = ids.len();
            ids.extend_from_slice(seq);
            positions.extend(0..seq.len());
            segments.push(start..ids.len());
        }
        let tok = tape.embedding(vars.token_embedding, &ids)?;
        let pos = tape.embedding(vars.position_embedding, &positions)?;
        let mut x = tape.add(tok, pos)?;
        let attention = self.config.attention();
        let mut traces = Vec::with_capacity(self.blocks.len());
        for block in &vars.blocks {
            let (out, t) = transformer_block_segments(tape, x, block, &attention, &segments)?;
            x = out;
            traces.push(t);
        }
        let logits = tape.matmul(x, vars.head_w)?;
        let logits = tape.add_row_bias(logits, vars.head_b)?;
        Ok(Forward {
            vars,
            logits,
            segments,
            traces,
        })
    }
}
