//! Latent sequence predictors: a biGRU sentence classifier, a Transformer
//! POS-sequence classifier and a Transformer POS-sequence generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::beam::{beam_search, DecodeOptions};
use crate::corpus::{PosTagSet, Tokens, Vocabulary, SPECIALS};
use crate::eval::LatentKind;
use crate::model::{
    checkpoint_config, save_checkpoint, train_loop, vocab_from_words, word_ids, ModelError, ModelResult, Parameterized, TrainOptions,
    TrainReport,
};
use crate::numerics::graph::softmax_rows;
use crate::numerics::layers::{Activation, BiGru, Embedding, Mlp, RECURRENT_INIT};
use crate::numerics::{argmax, Adam, Checkpoint, Graph, Init, ParamStore, Tensor, Var};
use crate::seq2seq::{Seq2SeqTransformer, TransformerConfig, TransformerEncoder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChoiceMode {
    #[default]
    Argmax,
    Sample,
}

/// A chosen (or generated) latent sequence with its log-probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentDecision {
    pub kind: LatentKind,
    /// Candidate label for the classifier kinds.
    pub index: Option<usize>,
    pub sequence: Tokens,
    pub log_prob: f64,
    /// Per-position log-probabilities for generated sequences, the end
    /// token's included when one was emitted.
    pub step_log_probs: Vec<f64>,
}

/// Picks an index from `dist`. Sampling uses `dist^(1/temperature)`
/// renormalised; the returned log-probability is always taken from `dist`.
pub fn choose_latent(dist: &[f64], mode: ChoiceMode, temperature: f64, rng: &mut ChaCha8Rng) -> ModelResult<(usize, f64)> {
    if dist.is_empty() {
        return Err(ModelError::InvalidArgument("empty distribution".into()));
    }
    let index = match mode {
        ChoiceMode::Argmax => argmax(dist),
        ChoiceMode::Sample => sample_index(dist, temperature, rng)?,
    };
    Ok((index, dist[index].ln()))
}

pub(crate) fn sample_index(dist: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> ModelResult<usize> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(ModelError::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let weights: Vec<f64> = if temperature == 1.0 {
        dist.to_vec()
    } else {
        dist.iter().map(|p| p.powf(1.0 / temperature)).collect()
    };
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut last = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            if u < *w {
                return Ok(i);
            }
            u -= w;
            last = i;
        }
    }
    Ok(last)
}

/// A classifier over a fixed candidate set of latent sequences.
pub trait LatentClassifier: Parameterized + Sync {
    fn kind(&self) -> LatentKind;
    fn candidates(&self) -> &[Tokens];
    fn vocabulary(&self) -> &Vocabulary;

    /// Class log-probabilities `[1, K]` for `post`.
    fn class_log_probs(&self, g: &mut Graph, post: &[String]) -> ModelResult<Var>;

    fn num_classes(&self) -> usize {
        self.candidates().len()
    }

    fn distribution(&self, post: &[String]) -> ModelResult<Vec<f64>> {
        let mut g = Graph::new(self.store());
        let lp = self.class_log_probs(&mut g, post)?;
        Ok(g.value(lp).data().iter().map(|v| v.exp()).collect())
    }

    fn decide_class(&self, post: &[String], mode: ChoiceMode, temperature: f64, rng: &mut ChaCha8Rng) -> ModelResult<LatentDecision> {
        let dist = self.distribution(post)?;
        let (index, log_prob) = choose_latent(&dist, mode, temperature, rng)?;
        Ok(LatentDecision {
            kind: self.kind(),
            index: Some(index),
            sequence: self.candidates()[index].clone(),
            log_prob,
            step_log_probs: vec![log_prob],
        })
    }
}

/// Any latent predictor, as seen by training and inference drivers.
pub trait LatentPredictor: Parameterized + Sync {
    fn kind(&self) -> LatentKind;

    fn decide(&self, post: &[String], mode: ChoiceMode, temperature: f64, rng: &mut ChaCha8Rng) -> ModelResult<LatentDecision>;

    /// Log-probability `[1, 1]` of `decision` under the current parameters.
    fn decision_log_prob(&self, g: &mut Graph, post: &[String], decision: &LatentDecision) -> ModelResult<Var>;

    fn model_kind(&self) -> &'static str;
    fn checkpoint(&self, optimizer: Option<&Adam>, epoch: usize) -> ModelResult<Checkpoint>;
}

fn classifier_log_prob<C: LatentClassifier + ?Sized>(c: &C, g: &mut Graph, post: &[String], d: &LatentDecision) -> ModelResult<Var> {
    let index = d
        .index
        .ok_or_else(|| ModelError::InvalidArgument("decision has no candidate index".into()))?;
    if index >= c.num_classes() {
        return Err(ModelError::Label {
            label: index,
            classes: c.num_classes(),
        });
    }
    let lp = c.class_log_probs(g, post)?;
    Ok(g.pick(lp, &[index])?)
}

fn check_candidates(candidates: &[Tokens]) -> ModelResult<()> {
    if candidates.is_empty() || candidates.iter().any(Vec::is_empty) {
        return Err(ModelError::InvalidArgument("candidates must be non-empty sequences".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentencePredictorConfig {
    pub vocabulary: Tokens,
    pub candidates: Vec<Tokens>,
    pub embed_dim: usize,
    pub hidden: usize,
    pub mlp_hidden: usize,
}

/// biGRU post encoder followed by a three-layer classifier over the
/// latent sentence candidates.
#[derive(Debug, Clone)]
pub struct LatentSentencePredictor {
    pub config: SentencePredictorConfig,
    vocab: Vocabulary,
    store: ParamStore,
    embedding: Embedding,
    encoder: BiGru,
    classifier: Mlp,
}

impl LatentSentencePredictor {
    pub const KIND: &'static str = "latent-sentence-predictor";

    pub fn new(config: SentencePredictorConfig, seed: u64) -> ModelResult<Self> {
        check_candidates(&config.candidates)?;
        let vocab = vocab_from_words(config.vocabulary.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embedding = Embedding::new(&mut store, "pred.embed", vocab.len(), config.embed_dim, RECURRENT_INIT, &mut rng);
        let encoder = BiGru::new(&mut store, "pred.encoder", config.embed_dim, config.hidden, &mut rng);
        let classifier = Mlp::new(
            &mut store,
            "pred.classifier",
            &[2 * config.hidden, config.mlp_hidden, config.mlp_hidden, config.candidates.len()],
            Activation::Tanh,
            RECURRENT_INIT,
            &mut rng,
        );
        Ok(Self {
            config,
            vocab,
            store,
            embedding,
            encoder,
            classifier,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> ModelResult<Self> {
        let mut m = Self::new(checkpoint_config(ck, Self::KIND)?, 0)?;
        m.store.load_values(&ck.params)?;
        Ok(m)
    }

    /// Zeroes the final classifier layer, which makes every prediction uniform.
    pub fn zero_output_layer(&mut self) {
        let last = self.classifier.layers.last().expect("three layers");
        for id in std::iter::once(last.weight).chain(last.bias) {
            self.store.value_mut(id).data_mut().fill(0.0);
        }
    }
}

impl Parameterized for LatentSentencePredictor {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl LatentClassifier for LatentSentencePredictor {
    fn kind(&self) -> LatentKind {
        LatentKind::Sentence
    }

    fn candidates(&self) -> &[Tokens] {
        &self.config.candidates
    }

    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn class_log_probs(&self, g: &mut Graph, post: &[String]) -> ModelResult<Var> {
        if post.is_empty() {
            return Err(ModelError::InvalidArgument("empty post".into()));
        }
        let x = self.embedding.forward(g, &word_ids(&self.vocab, post))?;
        let enc = self.encoder.encode(g, x)?;
        let logits = self.classifier.forward(g, enc.last)?;
        Ok(g.log_softmax_rows(logits)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosSamplerConfig {
    pub vocabulary: Tokens,
    pub candidates: Vec<Tokens>,
    pub transformer: TransformerConfig,
    pub mlp_hidden: usize,
}

/// Transformer post encoder; the state at the last non-padded position
/// feeds a classifier over the POS-sequence candidates.
#[derive(Debug, Clone)]
pub struct LatentPosSampler {
    pub config: PosSamplerConfig,
    vocab: Vocabulary,
    store: ParamStore,
    encoder: TransformerEncoder,
    classifier: Mlp,
}

impl LatentPosSampler {
    pub const KIND: &'static str = "latent-pos-sampler";

    pub fn new(config: PosSamplerConfig, seed: u64) -> ModelResult<Self> {
        check_candidates(&config.candidates)?;
        config.transformer.validate()?;
        let vocab = vocab_from_words(config.vocabulary.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = TransformerEncoder::new(&mut store, "pred.encoder", vocab.len(), &config.transformer, &mut rng);
        let classifier = Mlp::new(
            &mut store,
            "pred.classifier",
            &[config.transformer.dim, config.mlp_hidden, config.candidates.len()],
            Activation::Tanh,
            Init::ScaledNormal,
            &mut rng,
        );
        Ok(Self {
            config,
            vocab,
            store,
            encoder,
            classifier,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> ModelResult<Self> {
        let mut m = Self::new(checkpoint_config(ck, Self::KIND)?, 0)?;
        m.store.load_values(&ck.params)?;
        Ok(m)
    }

    pub fn zero_output_layer(&mut self) {
        let last = self.classifier.layers.last().expect("two layers");
        for id in std::iter::once(last.weight).chain(last.bias) {
            self.store.value_mut(id).data_mut().fill(0.0);
        }
    }

    /// Class log-probabilities for an already-encoded (possibly padded) id
    /// sequence.
    pub fn class_log_probs_ids(&self, g: &mut Graph, ids: &[usize]) -> ModelResult<Var> {
        let mem = self.encoder.forward(g, ids)?;
        let last = self.encoder.last_state(g, &mem)?;
        let logits = self.classifier.forward(g, last)?;
        Ok(g.log_softmax_rows(logits)?)
    }
}

impl Parameterized for LatentPosSampler {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl LatentClassifier for LatentPosSampler {
    fn kind(&self) -> LatentKind {
        LatentKind::PosSampled
    }

    fn candidates(&self) -> &[Tokens] {
        &self.config.candidates
    }

    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn class_log_probs(&self, g: &mut Graph, post: &[String]) -> ModelResult<Var> {
        self.class_log_probs_ids(g, &word_ids(&self.vocab, post))
    }
}

macro_rules! classifier_predictor {
    ($ty:ty) => {
        impl LatentPredictor for $ty {
            fn kind(&self) -> LatentKind {
                LatentClassifier::kind(self)
            }

            fn decide(&self, post: &[String], mode: ChoiceMode, temperature: f64, rng: &mut ChaCha8Rng) -> ModelResult<LatentDecision> {
                self.decide_class(post, mode, temperature, rng)
            }

            fn decision_log_prob(&self, g: &mut Graph, post: &[String], decision: &LatentDecision) -> ModelResult<Var> {
                classifier_log_prob(self, g, post, decision)
            }

            fn model_kind(&self) -> &'static str {
                Self::KIND
            }

            fn checkpoint(&self, optimizer: Option<&Adam>, epoch: usize) -> ModelResult<Checkpoint> {
                save_checkpoint(self, Self::KIND, &self.config, optimizer, epoch)
            }
        }
    };
}

classifier_predictor!(LatentSentencePredictor);
classifier_predictor!(LatentPosSampler);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosGeneratorConfig {
    pub vocabulary: Tokens,
    pub tags: Tokens,
    pub transformer: TransformerConfig,
    /// Longest generated tag sequence, end token included.
    pub max_len: usize,
}

/// Number of reserved target ids (PAD, BOS, EOS) ahead of the tags.
pub const TAG_OFFSET: usize = 3;

/// Transformer encoder-decoder from posts to POS-tag sequences.
#[derive(Debug, Clone)]
pub struct LatentPosGenerator {
    pub config: PosGeneratorConfig,
    vocab: Vocabulary,
    tagset: PosTagSet,
    store: ParamStore,
    net: Seq2SeqTransformer,
}

impl LatentPosGenerator {
    pub const KIND: &'static str = "latent-pos-generator";

    pub fn new(config: PosGeneratorConfig, seed: u64) -> ModelResult<Self> {
        config.transformer.validate()?;
        let vocab = vocab_from_words(config.vocabulary.clone())?;
        let tagset = PosTagSet::new(config.tags.clone()).map_err(|e| ModelError::InvalidArgument(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = Seq2SeqTransformer::new(
            &mut store,
            "pred.seq2seq",
            vocab.len(),
            TAG_OFFSET + tagset.len(),
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

    pub fn tagset(&self) -> &PosTagSet {
        &self.tagset
    }

    fn tag_ids(&self, tags: &[String]) -> ModelResult<Vec<usize>> {
        tags.iter()
            .map(|t| {
                self.tagset
                    .id(t)
                    .map(|i| i + TAG_OFFSET)
                    .ok_or_else(|| ModelError::UnknownTag(t.clone()))
            })
            .collect()
    }

    fn tags_of(&self, ids: &[usize]) -> Tokens {
        ids.iter()
            .map(|&i| self.tagset.tag(i - TAG_OFFSET).expect("decoder emits tags only").to_string())
            .collect()
    }

    fn decode_options(&self, beam: usize, max_len: usize) -> DecodeOptions {
        DecodeOptions {
            beam,
            max_len,
            eos: SPECIALS.eos,
            banned: vec![SPECIALS.pad, SPECIALS.bos],
        }
    }

    /// Greedy (`beam == 1`) or beam decoding of a tag sequence.
    pub fn generate_pos(&self, post: &[String], beam: usize, max_len: usize) -> ModelResult<LatentDecision> {
        let scorer = self.net.scorer(&self.store, &word_ids(&self.vocab, post))?;
        let h = beam_search(&scorer, &self.decode_options(beam, max_len))?;
        Ok(LatentDecision {
            kind: LatentKind::PosGenerated,
            index: None,
            sequence: self.tags_of(&h.tokens),
            log_prob: h.log_prob,
            step_log_probs: h.step_log_probs,
        })
    }

    /// Ancestral sampling, one tag at a time.
    pub fn sample_pos(&self, post: &[String], max_len: usize, temperature: f64, rng: &mut ChaCha8Rng) -> ModelResult<LatentDecision> {
        use crate::beam::StepScorer;
        let scorer = self.net.scorer(&self.store, &word_ids(&self.vocab, post))?;
        let mut ids = Vec::new();
        let mut steps = Vec::new();
        for _ in 0..max_len {
            let (lp, ()) = scorer.step(&(), &ids)?;
            let dist: Vec<f64> = lp
                .iter()
                .enumerate()
                .map(|(i, v)| if i == SPECIALS.pad || i == SPECIALS.bos { 0.0 } else { v.exp() })
                .collect();
            let id = sample_index(&dist, temperature, rng)?;
            steps.push(lp[id]);
            if id == SPECIALS.eos {
                break;
            }
            ids.push(id);
        }
        Ok(LatentDecision {
            kind: LatentKind::PosGenerated,
            index: None,
            sequence: self.tags_of(&ids),
            log_prob: steps.iter().sum(),
            step_log_probs: steps,
        })
    }

    /// Teacher-forced per-step log-probabilities `[n, 1]` of `tags`, plus
    /// the end token when `with_eos`.
    pub fn sequence_log_probs(&self, g: &mut Graph, post: &[String], tags: &[String], with_eos: bool) -> ModelResult<Var> {
        let ids = self.tag_ids(tags)?;
        self.net.target_log_probs(g, &word_ids(&self.vocab, post), &ids, with_eos)
    }

    pub fn loss(&self, g: &mut Graph, post: &[String], tags: &[String]) -> ModelResult<Var> {
        let ids = self.tag_ids(tags)?;
        self.net.loss(g, &word_ids(&self.vocab, post), &ids)
    }

    /// Teacher-forced (correct, total) predictions over `tags` + EOS.
    pub fn token_accuracy(&self, post: &[String], tags: &[String]) -> ModelResult<(usize, usize)> {
        let mut gold = self.tag_ids(tags)?;
        let pred = self.net.teacher_forced_argmax(&self.store, &word_ids(&self.vocab, post), &gold)?;
        gold.push(SPECIALS.eos);
        Ok((pred.iter().zip(&gold).filter(|(a, b)| a == b).count(), gold.len()))
    }
}

impl Parameterized for LatentPosGenerator {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl LatentPredictor for LatentPosGenerator {
    fn kind(&self) -> LatentKind {
        LatentKind::PosGenerated
    }

    /// Argmax decodes greedily; sampling draws each tag in turn.
    fn decide(&self, post: &[String], mode: ChoiceMode, temperature: f64, rng: &mut ChaCha8Rng) -> ModelResult<LatentDecision> {
        match mode {
            ChoiceMode::Argmax => self.generate_pos(post, 1, self.config.max_len),
            ChoiceMode::Sample => self.sample_pos(post, self.config.max_len, temperature, rng),
        }
    }

    fn decision_log_prob(&self, g: &mut Graph, post: &[String], decision: &LatentDecision) -> ModelResult<Var> {
        let with_eos = decision.step_log_probs.len() > decision.sequence.len();
        if decision.sequence.is_empty() && !with_eos {
            return Ok(g.scalar(0.0)?);
        }
        let lp = self.sequence_log_probs(g, post, &decision.sequence, with_eos)?;
        Ok(g.sum(lp)?)
    }

    fn model_kind(&self) -> &'static str {
        Self::KIND
    }

    fn checkpoint(&self, optimizer: Option<&Adam>, epoch: usize) -> ModelResult<Checkpoint> {
        save_checkpoint(self, Self::KIND, &self.config, optimizer, epoch)
    }
}

/// One classifier training example.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassExample {
    pub post: Tokens,
    pub label: usize,
}

/// Cross-entropy pretraining of a classifier on labelled posts.
pub fn pretrain_predictor<C: LatentClassifier>(
    model: &mut C,
    examples: &[ClassExample],
    opts: &TrainOptions,
    optimizer: &mut Adam,
) -> ModelResult<TrainReport> {
    let k = model.num_classes();
    if let Some(e) = examples.iter().find(|e| e.label >= k) {
        return Err(ModelError::Label {
            label: e.label,
            classes: k,
        });
    }
    train_loop(model, examples.len(), opts, optimizer, |m, g, i| {
        let lp = m.class_log_probs(g, &examples[i].post)?;
        let picked = g.pick(lp, &[examples[i].label])?;
        Ok(g.scale(picked, -1.0)?)
    })
}

/// Fraction of examples whose argmax class equals the label.
pub fn classification_accuracy<C: LatentClassifier>(model: &C, examples: &[ClassExample]) -> ModelResult<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for e in examples {
        if argmax(&model.distribution(&e.post)?) == e.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// A post paired with the tag sequence to generate.
#[derive(Debug, Clone, PartialEq)]
pub struct PosExample {
    pub post: Tokens,
    pub tags: Tokens,
}

pub fn pretrain_pos_generator(
    model: &mut LatentPosGenerator,
    examples: &[PosExample],
    opts: &TrainOptions,
    optimizer: &mut Adam,
) -> ModelResult<TrainReport> {
    for e in examples {
        model.tag_ids(&e.tags)?;
    }
    train_loop(model, examples.len(), opts, optimizer, |m, g, i| {
        m.loss(g, &examples[i].post, &examples[i].tags)
    })
}

/// Softmax of a plain logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    softmax_rows(&Tensor::row(logits.to_vec())).into_data()
}
