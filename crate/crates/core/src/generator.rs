//! Response generators: a dual-encoder pointer-generator conditioned on a
//! latent sentence, and a Transformer reading the post followed by a POS
//! sequence.

use std::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::beam::{beam_search, DecodeOptions, StepScorer};
use crate::corpus::{encode, PosTagSet, Tokens, Vocabulary, SPECIALS};
use crate::model::{
    checkpoint_config, save_checkpoint, train_loop, vocab_from_words, word_ids, ModelError, ModelResult, Parameterized, TrainOptions,
    TrainReport,
};
use crate::numerics::layers::{BiGru, Embedding, GruCell, Linear, RECURRENT_INIT};
use crate::numerics::{Adam, Checkpoint, Graph, ParamId, ParamStore, Tensor, Var};
use crate::seq2seq::{Seq2SeqTransformer, TransformerConfig};

/// Additive attention `e_i = v · tanh(W_h h_i + W_s s + b)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionLayer {
    pub w_h: ParamId,
    pub w_s: ParamId,
    pub b: ParamId,
    pub v: ParamId,
}

impl AttentionLayer {
    pub fn new(store: &mut ParamStore, name: &str, source_dim: usize, state_dim: usize, attn_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w_h: store.register(format!("{name}.w_h"), source_dim, attn_dim, RECURRENT_INIT, rng),
            w_s: store.register(format!("{name}.w_s"), state_dim, attn_dim, RECURRENT_INIT, rng),
            b: store.register(format!("{name}.b"), 1, attn_dim, RECURRENT_INIT, rng),
            v: store.register(format!("{name}.v"), attn_dim, 1, RECURRENT_INIT, rng),
        }
    }

    /// The state-independent part `H W_h + b`, computed once per source.
    pub fn keys(&self, g: &mut Graph, states: Var) -> ModelResult<Var> {
        let w = g.param(self.w_h);
        let b = g.param(self.b);
        let k = g.matmul(states, w)?;
        Ok(g.add(k, b)?)
    }

    /// Weights `[1, n]` and context `[1, source_dim]` for decoder state `s`.
    pub fn attend_keys(&self, g: &mut Graph, keys: Var, states: Var, s: Var) -> ModelResult<(Var, Var)> {
        let ws = g.param(self.w_s);
        let q = g.matmul(s, ws)?;
        let e = g.add(keys, q)?;
        let e = g.tanh(e)?;
        let v = g.param(self.v);
        let e = g.matmul(e, v)?;
        let e = g.transpose(e)?;
        let alpha = g.softmax_rows(e)?;
        let ctx = g.matmul(alpha, states)?;
        Ok((alpha, ctx))
    }

    pub fn attend(&self, g: &mut Graph, states: Var, s: Var) -> ModelResult<(Var, Var)> {
        let keys = self.keys(g, states)?;
        self.attend_keys(g, keys, states, s)
    }
}

/// Output distribution over the preset vocabulary plus the latent
/// sentence's out-of-vocabulary tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedVocabDistribution {
    pub preset_probs: Vec<f64>,
    pub oov_probs: Vec<f64>,
    pub p_gen: f64,
}

impl ExtendedVocabDistribution {
    pub fn l_copy(&self) -> f64 {
        1.0 - self.p_gen
    }

    pub fn total(&self) -> f64 {
        self.preset_probs.iter().chain(&self.oov_probs).sum()
    }

    pub fn prob(&self, ext_id: usize) -> f64 {
        let v = self.preset_probs.len();
        if ext_id < v {
            self.preset_probs[ext_id]
        } else {
            self.oov_probs[ext_id - v]
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.preset_probs.iter().chain(&self.oov_probs).copied().collect()
    }
}

/// `P(w) = p_gen · P_vocab(w) + (1 − p_gen) · Σ_{i: z_i = w} α_i`, where
/// `latent_ext` holds the extended id of every latent position.
pub fn mix_extended(p_vocab: &[f64], attention: &[f64], latent_ext: &[usize], n_oov: usize, p_gen: f64) -> ExtendedVocabDistribution {
    let v = p_vocab.len();
    let mut preset: Vec<f64> = p_vocab.iter().map(|p| p_gen * p).collect();
    let mut oov = vec![0.0; n_oov];
    let l_copy = 1.0 - p_gen;
    for (&id, &a) in latent_ext.iter().zip(attention) {
        if id < v {
            preset[id] += l_copy * a;
        } else {
            oov[id - v] += l_copy * a;
        }
    }
    ExtendedVocabDistribution {
        preset_probs: preset,
        oov_probs: oov,
        p_gen,
    }
}

/// A response generator conditioned on a post and a latent sequence.
pub trait ResponseGenerator: Parameterized + Sync {
    /// Whether the latent sequence is a POS-tag sequence (else a sentence).
    fn latent_is_pos(&self) -> bool;

    /// Mean per-token negative log-likelihood of `response` + EOS.
    fn loss(&self, g: &mut Graph, post: &[String], latent: &[String], response: &[String]) -> ModelResult<Var>;

    fn generate(&self, post: &[String], latent: &[String], beam: usize, max_len: usize) -> ModelResult<Tokens>;

    /// Teacher-forced (correct, total) argmax predictions over `response` + EOS.
    fn token_accuracy(&self, post: &[String], latent: &[String], response: &[String]) -> ModelResult<(usize, usize)>;

    fn model_kind(&self) -> &'static str;
    fn checkpoint(&self, optimizer: Option<&Adam>, epoch: usize) -> ModelResult<Checkpoint>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointerConfig {
    pub vocabulary: Tokens,
    pub embed_dim: usize,
    /// Hidden size of each direction of both encoders.
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub attn_dim: usize,
}

/// Per-example encodings shared by every decoding step.
#[derive(Debug, Clone)]
pub struct PointerSource {
    post_states: Var,
    post_keys: Var,
    latent_states: Var,
    latent_keys: Var,
    initial: Var,
    /// `[m, V + n_oov]` one-hot rows mapping latent positions to ids.
    copy_map: Option<Var>,
    pub latent_ext: Vec<usize>,
    pub oov: Tokens,
}

/// Values of one decoding step.
#[derive(Debug, Clone, Copy)]
pub struct PointerStep {
    pub state: Var,
    pub p_vocab: Var,
    pub p_gen: Var,
    pub latent_attention: Var,
    pub post_attention: Var,
}

#[derive(Debug, Clone)]
pub struct PointerGeneratorModel {
    pub config: PointerConfig,
    vocab: Vocabulary,
    store: ParamStore,
    embedding: Embedding,
    post_encoder: BiGru,
    latent_encoder: BiGru,
    init: Linear,
    decoder: GruCell,
    attn_post: AttentionLayer,
    attn_latent: AttentionLayer,
    output: Linear,
    w_gen: Linear,
    /// Replaces the learned generation probability when set.
    pub force_p_gen: Option<f64>,
}

impl PointerGeneratorModel {
    pub const KIND: &'static str = "pointer-generator";

    pub fn new(config: PointerConfig, seed: u64) -> ModelResult<Self> {
        let vocab = vocab_from_words(config.vocabulary.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (e, h, s, a) = (config.embed_dim, config.encoder_hidden, config.decoder_hidden, config.attn_dim);
        let s_rng = &mut rng;
        let embedding = Embedding::new(&mut store, "gen.embed", vocab.len(), e, RECURRENT_INIT, s_rng);
        let post_encoder = BiGru::new(&mut store, "gen.post", e, h, s_rng);
        let latent_encoder = BiGru::new(&mut store, "gen.latent", e, h, s_rng);
        let init = Linear::new(&mut store, "gen.init", 2 * h, s, true, RECURRENT_INIT, s_rng);
        let decoder = GruCell::new(&mut store, "gen.decoder", e, s, s_rng);
        let attn_post = AttentionLayer::new(&mut store, "gen.attn_post", 2 * h, s, a, s_rng);
        let attn_latent = AttentionLayer::new(&mut store, "gen.attn_latent", 2 * h, s, a, s_rng);
        let output = Linear::new(&mut store, "gen.out", s + 4 * h, vocab.len(), true, RECURRENT_INIT, s_rng);
        let w_gen = Linear::new(&mut store, "gen.w_gen", s + 4 * h, 1, true, RECURRENT_INIT, s_rng);
        Ok(Self {
            config,
            vocab,
            store,
            embedding,
            post_encoder,
            latent_encoder,
            init,
            decoder,
            attn_post,
            attn_latent,
            output,
            w_gen,
            force_p_gen: None,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> ModelResult<Self> {
        let mut m = Self::new(checkpoint_config(ck, Self::KIND)?, 0)?;
        m.store.load_values(&ck.params)?;
        Ok(m)
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn attention_post(&self) -> &AttentionLayer {
        &self.attn_post
    }

    pub fn encode_source(&self, g: &mut Graph, post: &[String], latent: &[String]) -> ModelResult<PointerSource> {
        if post.is_empty() || latent.is_empty() {
            return Err(ModelError::InvalidArgument("post and latent sentence must be non-empty".into()));
        }
        let x = self.embedding.forward(g, &word_ids(&self.vocab, post))?;
        let pe = self.post_encoder.encode(g, x)?;
        let enc = encode(&self.vocab, latent);
        let z = self.embedding.forward(g, &enc.ids)?;
        let ze = self.latent_encoder.encode(g, z)?;
        let post_keys = self.attn_post.keys(g, pe.states)?;
        let latent_keys = self.attn_latent.keys(g, ze.states)?;
        let init = self.init.forward(g, pe.last)?;
        let initial = g.tanh(init)?;
        let latent_ext = enc.extended_ids(latent, &self.vocab);
        Ok(PointerSource {
            post_states: pe.states,
            post_keys,
            latent_states: ze.states,
            latent_keys,
            initial,
            copy_map: None,
            latent_ext,
            oov: enc.oov,
        })
    }

    fn extended_len(&self, src: &PointerSource) -> usize {
        self.vocab.len() + src.oov.len()
    }

    fn copy_map(&self, g: &mut Graph, src: &mut PointerSource) -> ModelResult<Var> {
        if let Some(m) = src.copy_map {
            return Ok(m);
        }
        let mut t = Tensor::zeros(src.latent_ext.len(), self.extended_len(src));
        for (i, &id) in src.latent_ext.iter().enumerate() {
            t.set(i, id, 1.0);
        }
        let m = g.constant(t)?;
        src.copy_map = Some(m);
        Ok(m)
    }

    /// Advances the decoder by feeding `prev` (an extended id) and returns
    /// the step's distributions.
    pub fn step(&self, g: &mut Graph, src: &PointerSource, prev: usize, state: Var) -> ModelResult<PointerStep> {
        let input = if prev < self.vocab.len() { prev } else { SPECIALS.unk };
        let x = self.embedding.forward(g, &[input])?;
        let s = self.decoder.step(g, x, state)?;
        let (post_attention, c_p) = self.attn_post.attend_keys(g, src.post_keys, src.post_states, s)?;
        let (latent_attention, c_z) = self.attn_latent.attend_keys(g, src.latent_keys, src.latent_states, s)?;
        let feat = g.concat_cols(&[s, c_p, c_z])?;
        let logits = self.output.forward(g, feat)?;
        let p_vocab = g.softmax_rows(logits)?;
        let p_gen = match self.force_p_gen {
            Some(p) => g.scalar(p)?,
            None => {
                let z = self.w_gen.forward(g, feat)?;
                g.sigmoid(z)?
            }
        };
        Ok(PointerStep {
            state: s,
            p_vocab,
            p_gen,
            latent_attention,
            post_attention,
        })
    }

    /// The extended distribution `[1, V + n_oov]` as a differentiable value.
    pub fn mixed(&self, g: &mut Graph, src: &mut PointerSource, st: &PointerStep) -> ModelResult<Var> {
        let n_oov = src.oov.len();
        let gen = g.mul(st.p_vocab, st.p_gen)?;
        let gen = if n_oov > 0 {
            let z = g.constant(Tensor::zeros(1, n_oov))?;
            g.concat_cols(&[gen, z])?
        } else {
            gen
        };
        let map = self.copy_map(g, src)?;
        let copy = g.matmul(st.latent_attention, map)?;
        let l_copy = g.affine(st.p_gen, -1.0, 1.0)?;
        let copy = g.mul(copy, l_copy)?;
        Ok(g.add(gen, copy)?)
    }

    /// Reads a step's distribution out of the graph.
    pub fn step_distribution(&self, g: &Graph, src: &PointerSource, st: &PointerStep) -> ExtendedVocabDistribution {
        mix_extended(
            g.value(st.p_vocab).data(),
            g.value(st.latent_attention).data(),
            &src.latent_ext,
            src.oov.len(),
            g.value(st.p_gen).item(),
        )
    }

    /// Extended target ids: vocabulary words, then copyable OOV tokens of
    /// the latent sentence, anything else as UNK.
    pub fn target_ids(&self, src: &PointerSource, response: &[String]) -> Vec<usize> {
        response
            .iter()
            .map(|t| match self.vocab.id(t) {
                Some(id) => id,
                None => src.oov.iter().position(|o| o == t).map_or(SPECIALS.unk, |k| self.vocab.len() + k),
            })
            .collect()
    }

    /// Distributions at every teacher-forced step of `response` + EOS.
    pub fn teacher_forced_distributions(
        &self,
        post: &[String],
        latent: &[String],
        response: &[String],
    ) -> ModelResult<Vec<ExtendedVocabDistribution>> {
        let mut g = Graph::new(&self.store);
        let src = self.encode_source(&mut g, post, latent)?;
        let targets = self.target_ids(&src, response);
        let mut state = src.initial;
        let mut prev = SPECIALS.bos;
        let mut out = Vec::with_capacity(targets.len() + 1);
        for &t in targets.iter().chain(std::iter::once(&SPECIALS.eos)) {
            let st = self.step(&mut g, &src, prev, state)?;
            out.push(self.step_distribution(&g, &src, &st));
            state = st.state;
            prev = t;
        }
        Ok(out)
    }

    pub fn scorer<'s>(&'s self, post: &[String], latent: &[String]) -> ModelResult<PointerScorer<'s>> {
        let mut g = Graph::new(&self.store);
        let src = self.encode_source(&mut g, post, latent)?;
        Ok(PointerScorer {
            model: self,
            graph: RefCell::new(g),
            src,
        })
    }

    fn realize(&self, src: &PointerSource, ids: &[usize]) -> Tokens {
        ids.iter()
            .map(|&i| match self.vocab.token(i) {
                Some(t) => t.to_string(),
                None => src.oov[i - self.vocab.len()].clone(),
            })
            .collect()
    }

    pub fn decode_options(beam: usize, max_len: usize) -> DecodeOptions {
        DecodeOptions {
            beam,
            max_len,
            eos: SPECIALS.eos,
            banned: vec![SPECIALS.pad, SPECIALS.bos],
        }
    }
}

/// Step-wise view of the pointer-generator for one (post, latent) input.
/// Log-probabilities cover the extended vocabulary; zero-probability ids
/// come out as negative infinity and are never chosen.
pub struct PointerScorer<'s> {
    model: &'s PointerGeneratorModel,
    graph: RefCell<Graph<'s>>,
    src: PointerSource,
}

impl PointerScorer<'_> {
    pub fn source(&self) -> &PointerSource {
        &self.src
    }

    /// The full distribution for the step following `prefix`.
    pub fn distribution(&self, state: Var, prefix: &[usize]) -> ModelResult<(ExtendedVocabDistribution, Var)> {
        let mut g = self.graph.borrow_mut();
        let prev = prefix.last().copied().unwrap_or(SPECIALS.bos);
        let st = self.model.step(&mut g, &self.src, prev, state)?;
        Ok((self.model.step_distribution(&g, &self.src, &st), st.state))
    }
}

impl StepScorer for PointerScorer<'_> {
    type State = Var;

    fn start(&self) -> ModelResult<Var> {
        Ok(self.src.initial)
    }

    fn step(&self, state: &Var, prefix: &[usize]) -> ModelResult<(Vec<f64>, Var)> {
        let (d, s) = self.distribution(*state, prefix)?;
        Ok((d.to_vec().into_iter().map(f64::ln).collect(), s))
    }
}

impl Parameterized for PointerGeneratorModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

/// Floor inside the log of the pointer loss, keeping `ln P` finite when a
/// target has no mass.
const LOG_FLOOR: f64 = 1e-12;

impl ResponseGenerator for PointerGeneratorModel {
    fn latent_is_pos(&self) -> bool {
        false
    }

    fn loss(&self, g: &mut Graph, post: &[String], latent: &[String], response: &[String]) -> ModelResult<Var> {
        let mut src = self.encode_source(g, post, latent)?;
        let targets = self.target_ids(&src, response);
        let mut state = src.initial;
        let mut prev = SPECIALS.bos;
        let mut picked = Vec::with_capacity(targets.len() + 1);
        for &t in targets.iter().chain(std::iter::once(&SPECIALS.eos)) {
            let st = self.step(g, &src, prev, state)?;
            let p = self.mixed(g, &mut src, &st)?;
            let pt = g.pick(p, &[t])?;
            let pt = g.affine(pt, 1.0, LOG_FLOOR)?;
            picked.push(g.log(pt)?);
            state = st.state;
            prev = t;
        }
        let all = g.concat_rows(&picked)?;
        let m = g.mean(all)?;
        Ok(g.scale(m, -1.0)?)
    }

    fn generate(&self, post: &[String], latent: &[String], beam: usize, max_len: usize) -> ModelResult<Tokens> {
        let scorer = self.scorer(post, latent)?;
        let h = beam_search(&scorer, &Self::decode_options(beam, max_len))?;
        Ok(self.realize(&scorer.src, &h.tokens))
    }

    fn token_accuracy(&self, post: &[String], latent: &[String], response: &[String]) -> ModelResult<(usize, usize)> {
        let dists = self.teacher_forced_distributions(post, latent, response)?;
        let mut g = Graph::new(&self.store);
        let src = self.encode_source(&mut g, post, latent)?;
        let mut targets = self.target_ids(&src, response);
        targets.push(SPECIALS.eos);
        let hits = dists
            .iter()
            .zip(&targets)
            .filter(|(d, &t)| crate::numerics::argmax(&d.to_vec()) == t)
            .count();
        Ok((hits, targets.len()))
    }

    fn model_kind(&self) -> &'static str {
        Self::KIND
    }

    fn checkpoint(&self, optimizer: Option<&Adam>, epoch: usize) -> ModelResult<Checkpoint> {
        save_checkpoint(self, Self::KIND, &self.config, optimizer, epoch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcatConfig {
    pub vocabulary: Tokens,
    pub tags: Tokens,
    pub transformer: TransformerConfig,
}

/// Transformer reading `[post, SEP, pos]`. Input ids: words `0..V`, the
/// separator `V`, tag `k` at `V + 1 + k`.
#[derive(Debug, Clone)]
pub struct ConcatTransformerModel {
    pub config: ConcatConfig,
    vocab: Vocabulary,
    tagset: PosTagSet,
    store: ParamStore,
    net: Seq2SeqTransformer,
}

impl ConcatTransformerModel {
    pub const KIND: &'static str = "concat-transformer";

    pub fn new(config: ConcatConfig, seed: u64) -> ModelResult<Self> {
        config.transformer.validate()?;
        let vocab = vocab_from_words(config.vocabulary.clone())?;
        let tagset = PosTagSet::new(config.tags.clone()).map_err(|e| ModelError::InvalidArgument(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = Seq2SeqTransformer::new(
            &mut store,
            "gen.seq2seq",
            vocab.len() + 1 + tagset.len(),
            vocab.len(),
            &config.transformer,
            &mut rng,
        );
        Ok(Self {
            config,
            vocab,
            tagset,
            store,
            net,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> ModelResult<Self> {
        let mut m = Self::new(checkpoint_config(ck, Self::KIND)?, 0)?;
        m.store.load_values(&ck.params)?;
        Ok(m)
    }

    pub fn separator(&self) -> usize {
        self.vocab.len()
    }

    pub fn source_ids(&self, post: &[String], pos: &[String]) -> ModelResult<Vec<usize>> {
        let mut ids = word_ids(&self.vocab, post);
        ids.push(self.separator());
        for t in pos {
            let k = self.tagset.id(t).ok_or_else(|| ModelError::UnknownTag(t.clone()))?;
            ids.push(self.vocab.len() + 1 + k);
        }
        if ids.len() > self.net.max_len {
            return Err(ModelError::InputTooLong {
                len: ids.len(),
                max: self.net.max_len,
            });
        }
        Ok(ids)
    }

    pub fn scorer<'s>(&'s self, post: &[String], pos: &[String]) -> ModelResult<crate::seq2seq::TransformerScorer<'s>> {
        self.net.scorer(&self.store, &self.source_ids(post, pos)?)
    }
}

impl Parameterized for ConcatTransformerModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl ResponseGenerator for ConcatTransformerModel {
    fn latent_is_pos(&self) -> bool {
        true
    }

    fn loss(&self, g: &mut Graph, post: &[String], latent: &[String], response: &[String]) -> ModelResult<Var> {
        let src = self.source_ids(post, latent)?;
        self.net.loss(g, &src, &word_ids(&self.vocab, response))
    }

    fn generate(&self, post: &[String], latent: &[String], beam: usize, max_len: usize) -> ModelResult<Tokens> {
        let scorer = self.scorer(post, latent)?;
        // the decoder cannot read past its position limit
        let max_len = max_len.min(self.net.max_len);
        let h = beam_search(&scorer, &PointerGeneratorModel::decode_options(beam, max_len))?;
        Ok(self.vocab.decode(&h.tokens))
    }

    fn token_accuracy(&self, post: &[String], latent: &[String], response: &[String]) -> ModelResult<(usize, usize)> {
        let src = self.source_ids(post, latent)?;
        let mut gold = word_ids(&self.vocab, response);
        let pred = self.net.teacher_forced_argmax(&self.store, &src, &gold)?;
        gold.push(SPECIALS.eos);
        Ok((pred.iter().zip(&gold).filter(|(a, b)| a == b).count(), gold.len()))
    }

    fn model_kind(&self) -> &'static str {
        Self::KIND
    }

    fn checkpoint(&self, optimizer: Option<&Adam>, epoch: usize) -> ModelResult<Checkpoint> {
        save_checkpoint(self, Self::KIND, &self.config, optimizer, epoch)
    }
}

/// One teacher-forcing example for a generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GenExample {
    pub post: Tokens,
    pub latent: Tokens,
    pub response: Tokens,
}

pub fn pretrain_generator<G: ResponseGenerator>(
    model: &mut G,
    examples: &[GenExample],
    opts: &TrainOptions,
    optimizer: &mut Adam,
) -> ModelResult<TrainReport> {
    train_loop(model, examples.len(), opts, optimizer, |m, g, i| {
        let e = &examples[i];
        m.loss(g, &e.post, &e.latent, &e.response)
    })
}

/// Pooled teacher-forced token accuracy over `examples`.
pub fn generator_accuracy<G: ResponseGenerator + ?Sized>(model: &G, examples: &[GenExample]) -> ModelResult<f64> {
    let (mut hits, mut total) = (0, 0);
    for e in examples {
        let (h, t) = model.token_accuracy(&e.post, &e.latent, &e.response)?;
        hits += h;
        total += t;
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::LrSchedule;

    fn toks(s: &str) -> Tokens {
        s.split_whitespace().map(str::to_owned).collect()
    }

    fn pointer(words: &str, seed: u64) -> PointerGeneratorModel {
        PointerGeneratorModel::new(
            PointerConfig {
                vocabulary: toks(words),
                embed_dim: 8,
                encoder_hidden: 6,
                decoder_hidden: 8,
                attn_dim: 6,
            },
            seed,
        )
        .unwrap()
    }

    fn opts(epochs: usize, rate: f64) -> TrainOptions {
        TrainOptions {
            epochs,
            batch_size: 1,
            schedule: LrSchedule::Constant { rate },
            clip: Some(5.0),
            seed: 1,
            adam: Default::default(),
        }
    }

    #[test]
    fn hand_evaluated_mixture() {
        // latent [a, b, a] with a = id 0, b = id 1
        let d = mix_extended(&[0.1, 0.2, 0.7], &[0.5, 0.3, 0.2], &[0, 1, 0], 0, 0.4);
        assert!((d.prob(0) - 0.46).abs() < 1e-12);
        assert!((d.total() - 1.0).abs() < 1e-12);
        assert_eq!(d.p_gen + d.l_copy(), 1.0);
    }

    #[test]
    fn mixture_limits() {
        let pv = [0.25, 0.25, 0.5];
        let d = mix_extended(&pv, &[1.0], &[3], 1, 1.0);
        assert_eq!(d.preset_probs, pv.to_vec());
        assert_eq!(d.oov_probs, vec![0.0]);
        let d = mix_extended(&pv, &[1.0], &[3], 1, 0.0);
        assert_eq!(d.oov_probs, vec![1.0]);
        assert_eq!(d.preset_probs, vec![0.0; 3]);
    }

    #[test]
    fn single_position_attention_is_the_state() {
        let m = pointer("a b", 0);
        let mut g = Graph::new(m.store());
        let h = g
            .constant(Tensor::row(vec![0.3, -0.2, 0.1, 0.5, 0.9, -1.0, 0.2, 0.4, 0.0, 0.1, 0.2, 0.3]))
            .unwrap();
        let s = g.constant(Tensor::filled(1, 8, 0.1)).unwrap();
        let (alpha, ctx) = m.attention_post().attend(&mut g, h, s).unwrap();
        assert_eq!(g.value(alpha).data(), &[1.0]);
        assert_eq!(g.value(ctx), g.value(h));
    }

    #[test]
    fn graph_mixture_matches_closed_form() {
        let m = pointer("a b c", 3);
        let post = toks("a b zz");
        let latent = toks("c qq a qq");
        let mut g = Graph::new(m.store());
        let mut src = m.encode_source(&mut g, &post, &latent).unwrap();
        assert_eq!(src.oov, toks("qq"));
        let mut state = src.initial;
        for prev in [SPECIALS.bos, 4, 7] {
            let st = m.step(&mut g, &src, prev, state).unwrap();
            let p = m.mixed(&mut g, &mut src, &st).unwrap();
            let closed = m.step_distribution(&g, &src, &st);
            assert_eq!(g.value(p).len(), 8);
            for (a, b) in g.value(p).data().iter().zip(closed.to_vec()) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!((closed.total() - 1.0).abs() < 1e-9);
            state = st.state;
        }
    }

    #[test]
    fn pure_copy_emits_latent_tokens_only() {
        let mut m = pointer("a b c", 5);
        m.force_p_gen = Some(0.0);
        let latent = toks("b zz");
        let out = m.generate(&toks("a c"), &latent, 3, 5).unwrap();
        assert!(!out.is_empty());
        assert!(out.iter().all(|t| latent.contains(t)), "{out:?}");
    }

    #[test]
    fn pointer_overfits_and_copies_oov_words() {
        let mut m = pointer("hi there friend", 7);
        let ex = vec![
            GenExample {
                post: toks("hi"),
                latent: toks("there bob"),
                response: toks("hi bob"),
            },
            GenExample {
                post: toks("there"),
                latent: toks("friend"),
                response: toks("there friend"),
            },
        ];
        let mut opt = Adam::new(m.store(), Default::default());
        let rep = pretrain_generator(&mut m, &ex, &opts(150, 0.02), &mut opt).unwrap();
        assert!(rep.losses.last().unwrap() < &0.1, "{:?}", rep.losses.last());
        assert_eq!(generator_accuracy(&m, &ex).unwrap(), 1.0);
        for e in &ex {
            assert_eq!(m.generate(&e.post, &e.latent, 1, 6).unwrap(), e.response);
            assert_eq!(m.generate(&e.post, &e.latent, 4, 6).unwrap(), e.response);
        }
    }

    #[test]
    fn initial_loss_is_near_uniform() {
        let words: Vec<String> = (0..60).map(|i| format!("w{i}")).collect();
        let mut m = pointer(&words.join(" "), 2);
        m.force_p_gen = Some(1.0);
        let mut g = Graph::new(m.store());
        let l = m.loss(&mut g, &toks("w1 w2"), &toks("w3"), &toks("w4 w5 w6")).unwrap();
        let uniform = (m.vocabulary().len() as f64).ln();
        assert!((g.value(l).item() - uniform).abs() < 0.1 * uniform);
    }

    fn concat(seed: u64) -> ConcatTransformerModel {
        ConcatTransformerModel::new(
            ConcatConfig {
                vocabulary: toks("a b c d"),
                tags: toks("n v"),
                transformer: TransformerConfig {
                    dim: 16,
                    heads: 2,
                    ff_dim: 32,
                    encoder_layers: 1,
                    decoder_layers: 1,
                    max_len: 8,
                },
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn concat_input_layout_and_limits() {
        let m = concat(0);
        assert_eq!(m.source_ids(&toks("a zz"), &toks("v n")).unwrap(), vec![4, 3, 8, 10, 9]);
        assert!(matches!(m.source_ids(&toks("a"), &toks("q")), Err(ModelError::UnknownTag(_))));
        assert!(matches!(
            m.source_ids(&toks("a b c d a b"), &toks("n v")),
            Err(ModelError::InputTooLong { len: 9, max: 8 })
        ));
    }

    #[test]
    fn concat_model_follows_the_pos_sequence() {
        let mut m = concat(1);
        let ex = vec![
            GenExample {
                post: toks("a"),
                latent: toks("n"),
                response: toks("b"),
            },
            GenExample {
                post: toks("a"),
                latent: toks("v n"),
                response: toks("c b"),
            },
            GenExample {
                post: toks("d"),
                latent: toks("n"),
                response: toks("d"),
            },
            GenExample {
                post: toks("d"),
                latent: toks("v n"),
                response: toks("c d"),
            },
        ];
        let mut opt = Adam::new(m.store(), Default::default());
        pretrain_generator(&mut m, &ex, &opts(80, 0.01), &mut opt).unwrap();
        assert_eq!(generator_accuracy(&m, &ex).unwrap(), 1.0);
        for e in &ex {
            assert_eq!(m.generate(&e.post, &e.latent, 3, 5).unwrap(), e.response);
        }
    }
}
