//! Transformer encoder and encoder-decoder stacks over token ids.

use std::cell::RefCell;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::beam::StepScorer;
use crate::corpus::SPECIALS;
use crate::model::{ModelError, ModelResult};
use crate::numerics::graph::log_softmax_rows;
use crate::numerics::layers::{
    causal_mask, key_padding_mask, positional_encoding, Embedding, Linear, TransformerDecoderLayer, TransformerEncoderLayer, MASKED,
};
use crate::numerics::{Graph, Init, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Longest accepted input (and output) sequence.
    pub max_len: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 4,
            ff_dim: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            max_len: 64,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> ModelResult<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(ModelError::InvalidArgument(format!(
                "model dim {} must be a positive multiple of the head count {}",
                self.dim, self.heads
            )));
        }
        if self.max_len == 0 {
            return Err(ModelError::InvalidArgument("max_len must be positive".into()));
        }
        Ok(())
    }
}

/// Token embedding scaled by `sqrt(dim)` plus sinusoidal positions.
fn embed_positions(g: &mut Graph, emb: &Embedding, ids: &[usize]) -> ModelResult<Var> {
    let x = emb.forward(g, ids)?;
    let x = g.scale(x, (emb.dim as f64).sqrt())?;
    let pe = g.constant(positional_encoding(ids.len(), emb.dim))?;
    Ok(g.add(x, pe)?)
}

/// Encoded source: states `[n, dim]` and the flags of padded positions.
#[derive(Debug, Clone)]
pub struct Memory {
    pub states: Var,
    pub is_pad: Vec<bool>,
}

impl Memory {
    fn mask(&self, queries: usize) -> Option<Tensor> {
        self.is_pad.iter().any(|&p| p).then(|| key_padding_mask(queries, &self.is_pad))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformerEncoder {
    pub embedding: Embedding,
    pub layers: Vec<TransformerEncoderLayer>,
    pub max_len: usize,
}

impl TransformerEncoder {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, cfg: &TransformerConfig, rng: &mut ChaCha8Rng) -> Self {
        let embedding = Embedding::new(store, &format!("{name}.embed"), vocab, cfg.dim, Init::ScaledNormal, rng);
        let layers = (0..cfg.encoder_layers)
            .map(|i| TransformerEncoderLayer::new(store, &format!("{name}.layer{i}"), cfg.dim, cfg.heads, cfg.ff_dim, rng))
            .collect();
        Self {
            embedding,
            layers,
            max_len: cfg.max_len,
        }
    }

    /// Encodes `ids`, masking PAD positions out of every attention.
    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> ModelResult<Memory> {
        if ids.is_empty() {
            return Err(ModelError::InvalidArgument("cannot encode an empty sequence".into()));
        }
        if ids.len() > self.max_len {
            return Err(ModelError::InputTooLong {
                len: ids.len(),
                max: self.max_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.embedding.count) {
            return Err(ModelError::InvalidArgument(format!("token id {bad} outside the input vocabulary")));
        }
        let is_pad: Vec<bool> = ids.iter().map(|&i| i == SPECIALS.pad).collect();
        if is_pad.iter().all(|&p| p) {
            return Err(ModelError::InvalidArgument("input is entirely padding".into()));
        }
        let mut mem = Memory {
            states: embed_positions(g, &self.embedding, ids)?,
            is_pad,
        };
        let mask = mem.mask(ids.len());
        for layer in &self.layers {
            mem.states = layer.forward(g, mem.states, mask.as_ref())?;
        }
        Ok(mem)
    }

    /// State of the last non-padded position, `[1, dim]`.
    pub fn last_state(&self, g: &mut Graph, mem: &Memory) -> ModelResult<Var> {
        let last = mem.is_pad.iter().rposition(|&p| !p).expect("checked non-empty");
        Ok(g.row(mem.states, last)?)
    }
}

/// Encoder-decoder with its own target vocabulary. Target ids 0, 1 and 2
/// are PAD, BOS and EOS.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Seq2SeqTransformer {
    pub encoder: TransformerEncoder,
    pub target_embedding: Embedding,
    pub decoder: Vec<TransformerDecoderLayer>,
    pub output: Linear,
    pub max_len: usize,
}

/// Additive row mask removing PAD and BOS from the output distribution.
fn output_mask(vocab: usize) -> Tensor {
    let mut t = Tensor::zeros(1, vocab);
    t.set(0, SPECIALS.pad, MASKED);
    t.set(0, SPECIALS.bos, MASKED);
    t
}

impl Seq2SeqTransformer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        source_vocab: usize,
        target_vocab: usize,
        cfg: &TransformerConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let encoder = TransformerEncoder::new(store, &format!("{name}.enc"), source_vocab, cfg, rng);
        let target_embedding = Embedding::new(store, &format!("{name}.dec.embed"), target_vocab, cfg.dim, Init::ScaledNormal, rng);
        let decoder = (0..cfg.decoder_layers)
            .map(|i| TransformerDecoderLayer::new(store, &format!("{name}.dec.layer{i}"), cfg.dim, cfg.heads, cfg.ff_dim, rng))
            .collect();
        let output = Linear::new(store, &format!("{name}.out"), cfg.dim, target_vocab, true, Init::ScaledNormal, rng);
        Self {
            encoder,
            target_embedding,
            decoder,
            output,
            max_len: cfg.max_len,
        }
    }

    pub fn target_vocab(&self) -> usize {
        self.output.output
    }

    /// Logits `[t, V]` for the tokens following each prefix of `inputs`,
    /// where `inputs` starts with BOS. PAD and BOS are masked out.
    pub fn decode_logits(&self, g: &mut Graph, mem: &Memory, inputs: &[usize]) -> ModelResult<Var> {
        if inputs.len() > self.max_len + 1 {
            return Err(ModelError::InputTooLong {
                len: inputs.len() - 1,
                max: self.max_len,
            });
        }
        let mut x = embed_positions(g, &self.target_embedding, inputs)?;
        let causal = causal_mask(inputs.len());
        let mem_mask = mem.mask(inputs.len());
        for layer in &self.decoder {
            x = layer.forward(g, x, mem.states, &causal, mem_mask.as_ref())?;
        }
        let logits = self.output.forward(g, x)?;
        let mask = g.constant(output_mask(self.target_vocab()))?;
        Ok(g.add(logits, mask)?)
    }

    /// Per-step log-probabilities `[t+1, 1]` of `target` followed by EOS
    /// (`with_eos`) under teacher forcing.
    pub fn target_log_probs(&self, g: &mut Graph, source: &[usize], target: &[usize], with_eos: bool) -> ModelResult<Var> {
        let mem = self.encoder.forward(g, source)?;
        let mut inputs = Vec::with_capacity(target.len() + 1);
        inputs.push(SPECIALS.bos);
        inputs.extend_from_slice(target);
        let mut gold = target.to_vec();
        if with_eos {
            gold.push(SPECIALS.eos);
        } else {
            inputs.pop();
        }
        if gold.is_empty() {
            return Err(ModelError::InvalidArgument("nothing to score".into()));
        }
        let logits = self.decode_logits(g, &mem, &inputs)?;
        let lp = g.log_softmax_rows(logits)?;
        Ok(g.pick(lp, &gold)?)
    }

    /// Mean cross-entropy of `target` + EOS.
    pub fn loss(&self, g: &mut Graph, source: &[usize], target: &[usize]) -> ModelResult<Var> {
        let lp = self.target_log_probs(g, source, target, true)?;
        let m = g.mean(lp)?;
        Ok(g.scale(m, -1.0)?)
    }

    /// Teacher-forced argmax predictions for `target` + EOS.
    pub fn teacher_forced_argmax(&self, store: &ParamStore, source: &[usize], target: &[usize]) -> ModelResult<Vec<usize>> {
        let mut g = Graph::new(store);
        let mem = self.encoder.forward(&mut g, source)?;
        let mut inputs = vec![SPECIALS.bos];
        inputs.extend_from_slice(target);
        let logits = self.decode_logits(&mut g, &mem, &inputs)?;
        let t = g.value(logits);
        Ok((0..t.rows()).map(|r| t.argmax_row(r)).collect())
    }

    pub fn scorer<'s>(&'s self, store: &'s ParamStore, source: &[usize]) -> ModelResult<TransformerScorer<'s>> {
        let mut g = Graph::new(store);
        let memory = self.encoder.forward(&mut g, source)?;
        Ok(TransformerScorer {
            model: self,
            graph: RefCell::new(g),
            memory,
        })
    }
}

/// Step-wise view of a [`Seq2SeqTransformer`] for one source sequence. The
/// source is encoded once; each step re-runs the decoder over the prefix.
pub struct TransformerScorer<'s> {
    model: &'s Seq2SeqTransformer,
    graph: RefCell<Graph<'s>>,
    memory: Memory,
}

impl StepScorer for TransformerScorer<'_> {
    type State = ();

    fn start(&self) -> ModelResult<()> {
        Ok(())
    }

    fn step(&self, _: &(), prefix: &[usize]) -> ModelResult<(Vec<f64>, ())> {
        let mut inputs = Vec::with_capacity(prefix.len() + 1);
        inputs.push(SPECIALS.bos);
        inputs.extend_from_slice(prefix);
        let logits = {
            let mut g = self.graph.borrow_mut();
            let v = self.model.decode_logits(&mut g, &self.memory, &inputs)?;
            let t = g.value(v);
            Tensor::row(t.row_slice(t.rows() - 1).to_vec())
        };
        Ok((log_softmax_rows(&logits).into_data(), ()))
    }
}
