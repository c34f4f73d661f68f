//! End-to-end commands over a run directory: data preparation, pretraining,
//! joint training, generation and evaluation.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    join_tokens, load_corpus, tokenize, Corpus, CorpusError, LexiconTagger, LoadOptions, PosTagSet, TokenScheme, Tokens, Vocabulary,
};
use crate::eval::{dump_from_tsv, dump_to_tsv, evaluate, EvalError, EvalOptions, EvalReport, GenerationRow, LatentKind, Smoothing};
use crate::generator::{
    generator_accuracy, pretrain_generator, ConcatConfig, ConcatTransformerModel, GenExample, PointerConfig, PointerGeneratorModel,
    ResponseGenerator,
};
use crate::latentspace::{
    build_pos_candidates, build_sentence_candidates, label_dataset, labels_from_tsv, labels_to_tsv, AlignScoring, BagOfWordsEncoder,
    LabelSource, LabeledExample, LatentError, PosCandidateSet, SentenceCandidateConfig, SentenceCandidateSet,
};
use crate::model::{checkpoint_kind, vocab_words, ModelError, Parameterized, TrainOptions, TrainReport};
use crate::numerics::{Adam, Checkpoint, LrSchedule, NumericsError};
use crate::predictor::{
    classification_accuracy, pretrain_pos_generator, pretrain_predictor, ChoiceMode, ClassExample, LatentPosGenerator, LatentPosSampler,
    LatentPredictor, LatentSentencePredictor, PosExample, PosGeneratorConfig, PosSamplerConfig, SentencePredictorConfig,
};
use crate::rl::{
    edit_distance_csv, events_from_jsonl, events_to_jsonl, joint_train_epoch, summarize_epochs, EpochSummary, JointConfig, JointState,
    RlError, TrainingEvent,
};
use crate::seq2seq::TransformerConfig;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {what} not found", path.display())]
    Missing { path: PathBuf, what: String },
    #[error("{0}")]
    Data(String),
    #[error("numerical fault: {0}")]
    Numerical(String),
}

impl PipelineError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) | PipelineError::Missing { .. } => 2,
            PipelineError::Data(_) => 3,
            PipelineError::Numerical(_) => 4,
        }
    }
}

impl From<CorpusError> for PipelineError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io { path, source } if source.kind() == std::io::ErrorKind::NotFound => PipelineError::Missing {
                path: path.into(),
                what: "corpus".into(),
            },
            e => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<LatentError> for PipelineError {
    fn from(e: LatentError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<NumericsError> for PipelineError {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::Checkpoint(m) => PipelineError::Data(format!("checkpoint: {m}")),
            e => PipelineError::Numerical(e.to_string()),
        }
    }
}

impl From<ModelError> for PipelineError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Numerics(n) => n.into(),
            e => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<RlError> for PipelineError {
    fn from(e: RlError) -> Self {
        match e {
            RlError::Config(m) => PipelineError::Usage(m),
            RlError::Model(m) => m.into(),
            RlError::StaleEpisode { .. } => PipelineError::Numerical(e.to_string()),
            e => PipelineError::Data(e.to_string()),
        }
    }
}

pub type PipelineResult<T> = Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    LatentSentence,
    SamplePos,
    GeneratePos,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::LatentSentence => "latent-sentence",
            Variant::SamplePos => "sample-pos",
            Variant::GeneratePos => "generate-pos",
        }
    }

    pub fn is_pos(self) -> bool {
        self != Variant::LatentSentence
    }

    fn predictor_kind(self) -> &'static str {
        match self {
            Variant::LatentSentence => LatentSentencePredictor::KIND,
            Variant::SamplePos => LatentPosSampler::KIND,
            Variant::GeneratePos => LatentPosGenerator::KIND,
        }
    }

    fn generator_kind(self) -> &'static str {
        match self {
            Variant::LatentSentence => PointerGeneratorModel::KIND,
            _ => ConcatTransformerModel::KIND,
        }
    }

    /// Beam width used at test time.
    pub fn default_beam(self) -> usize {
        match self {
            Variant::LatentSentence => 4,
            _ => 3,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "latent-sentence" => Ok(Variant::LatentSentence),
            "sample-pos" => Ok(Variant::SamplePos),
            "generate-pos" => Ok(Variant::GeneratePos),
            _ => Err(PipelineError::Usage(format!(
                "unknown variant `{s}` (expected latent-sentence, sample-pos or generate-pos)"
            ))),
        }
    }
}

/// Layer sizes of every model in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub embed_dim: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub attn_dim: usize,
    pub mlp_hidden: usize,
    pub transformer: TransformerConfig,
    /// Longest tag sequence the POS generator emits.
    pub pos_max_len: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            encoder_hidden: 32,
            decoder_hidden: 64,
            attn_dim: 32,
            mlp_hidden: 64,
            transformer: TransformerConfig::default(),
            pos_max_len: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSettings {
    /// Defaults to the variant's beam width.
    pub beam: Option<usize>,
    pub max_len: usize,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self { beam: None, max_len: 30 }
    }
}

fn default_max_vocab() -> usize {
    50_000
}

fn default_min_freq() -> usize {
    1
}

fn default_kmeans_iters() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: Variant,
    pub corpus: PathBuf,
    /// Directory holding every artifact of the run.
    pub out_dir: PathBuf,
    #[serde(default)]
    pub scheme: TokenScheme,
    #[serde(default = "default_max_vocab")]
    pub max_vocab: usize,
    #[serde(default = "default_min_freq")]
    pub min_freq: usize,
    /// Number of latent sentence candidates.
    #[serde(default)]
    pub k_s: Option<usize>,
    /// Number of k-means clusters the sentence candidates are drawn from.
    #[serde(default)]
    pub clusters: Option<usize>,
    /// Number of latent POS candidates.
    #[serde(default)]
    pub k_p: Option<usize>,
    #[serde(default = "default_kmeans_iters")]
    pub kmeans_iters: usize,
    #[serde(default)]
    pub model: ModelDims,
    /// The run seed replaces the seed given here.
    #[serde(default)]
    pub pretrain_predictor: Option<TrainOptions>,
    /// The run seed replaces the seed given here.
    #[serde(default)]
    pub pretrain_generator: Option<TrainOptions>,
    /// The run seed replaces the seed given here.
    #[serde(default)]
    pub joint: JointConfig,
    #[serde(default)]
    pub decode: DecodeSettings,
    #[serde(default)]
    pub smoothing: Smoothing,
}

/// Command-line replacements for config fields.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub variant: Option<Variant>,
    pub corpus: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub k_s: Option<usize>,
    pub clusters: Option<usize>,
    pub k_p: Option<usize>,
    pub joint_epochs: Option<usize>,
    pub beam: Option<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> PipelineResult<Self> {
        serde_json::from_str(text).map_err(|e| PipelineError::Usage(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path, overrides: &Overrides) -> PipelineResult<Self> {
        let text = fs::read_to_string(path).map_err(|_| PipelineError::Missing {
            path: path.to_path_buf(),
            what: "config file".into(),
        })?;
        let mut cfg = Self::from_json(&text)?;
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.variant {
            self.variant = v;
        }
        if let Some(v) = &o.corpus {
            self.corpus = v.clone();
        }
        if let Some(v) = &o.out_dir {
            self.out_dir = v.clone();
        }
        if o.k_s.is_some() {
            self.k_s = o.k_s;
        }
        if o.clusters.is_some() {
            self.clusters = o.clusters;
        }
        if o.k_p.is_some() {
            self.k_p = o.k_p;
        }
        if let Some(v) = o.joint_epochs {
            self.joint.epochs = v;
        }
        if o.beam.is_some() {
            self.decode.beam = o.beam;
        }
    }

    /// Checks field consistency without touching any file.
    pub fn validate(&self) -> PipelineResult<()> {
        let usage = |m: &str| Err(PipelineError::Usage(m.to_string()));
        match self.variant {
            Variant::LatentSentence => {
                if self.k_p.is_some() {
                    return usage("k_p applies only to the POS variants");
                }
                match (self.k_s, self.clusters) {
                    (Some(k), Some(c)) if k > 0 && c > 0 && c <= k => {}
                    (Some(_), Some(_)) => return usage("k_s and clusters must be positive with clusters <= k_s"),
                    _ => return usage("the latent-sentence variant needs k_s and clusters"),
                }
            }
            _ => {
                if self.k_s.is_some() || self.clusters.is_some() {
                    return usage("k_s and clusters apply only to the latent-sentence variant");
                }
                match self.k_p {
                    Some(k) if k > 0 => {}
                    _ => return usage("the POS variants need a positive k_p"),
                }
            }
        }
        if self.max_vocab <= crate::corpus::NUM_SPECIALS {
            return usage("max_vocab must exceed the number of reserved tokens");
        }
        if self.decode.max_len == 0 || self.decode.beam == Some(0) {
            return usage("decode beam and max_len must be positive");
        }
        self.model.transformer.validate().map_err(|e| PipelineError::Usage(e.to_string()))?;
        if self.model.pos_max_len == 0 || self.model.pos_max_len > self.model.transformer.max_len {
            return usage("pos_max_len must be positive and at most the transformer max_len");
        }
        for o in [&self.pretrain_predictor, &self.pretrain_generator].into_iter().flatten() {
            o.validate().map_err(|e| PipelineError::Usage(e.to_string()))?;
        }
        self.joint_config().validate()?;
        Ok(())
    }

    pub fn joint_config(&self) -> JointConfig {
        JointConfig {
            seed: self.seed,
            ..self.joint.clone()
        }
    }

    pub fn beam(&self) -> usize {
        self.decode.beam.unwrap_or(self.variant.default_beam())
    }

    fn predictor_options(&self) -> TrainOptions {
        let base = self.pretrain_predictor.clone().unwrap_or_else(|| match self.variant {
            Variant::LatentSentence => default_options(LrSchedule::EpochDecay { base: 0.002, decay: 0.5 }),
            _ => default_options(self.noam()),
        });
        TrainOptions { seed: self.seed, ..base }
    }

    fn generator_options(&self) -> TrainOptions {
        let base = self.pretrain_generator.clone().unwrap_or_else(|| match self.variant {
            Variant::LatentSentence => default_options(LrSchedule::EpochDecay { base: 0.0002, decay: 0.5 }),
            _ => default_options(self.noam()),
        });
        TrainOptions { seed: self.seed, ..base }
    }

    fn noam(&self) -> LrSchedule {
        LrSchedule::Noam {
            d_model: self.model.transformer.dim,
            warmup: 8000,
            factor: 1.0,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

fn default_options(schedule: LrSchedule) -> TrainOptions {
    TrainOptions {
        epochs: 10,
        batch_size: 32,
        schedule,
        clip: Some(5.0),
        seed: 0,
        adam: Default::default(),
    }
}

pub const VOCAB_FILE: &str = "vocab.txt";
pub const TAGS_FILE: &str = "tags.txt";
pub const POSTS_FILE: &str = "posts.txt";
pub const CANDIDATES_FILE: &str = "candidates.jsonl";
pub const LABELS_FILE: &str = "labels.tsv";
pub const PREDICTOR_CKPT: &str = "predictor.json";
pub const GENERATOR_CKPT: &str = "generator.json";
pub const JOINT_PREDICTOR_CKPT: &str = "predictor.joint.json";
pub const JOINT_GENERATOR_CKPT: &str = "generator.joint.json";
pub const JOINT_STATE: &str = "joint_state.json";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const EPOCHS_FILE: &str = "joint_epochs.csv";
pub const EDIT_CURVE_FILE: &str = "edit_distance.csv";
pub const GENERATIONS_FILE: &str = "generations.tsv";
pub const REPORT_FILE: &str = "report.json";
pub const SWEEP_FILE: &str = "sweep.csv";

fn write(path: &Path, contents: &str) -> PipelineResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| PipelineError::Data(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}

fn read(path: &Path, what: &str) -> PipelineResult<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => PipelineError::Missing {
            path: path.to_path_buf(),
            what: what.to_string(),
        },
        _ => PipelineError::Data(format!("{}: {e}", path.display())),
    })
}

fn load_ckpt(path: &Path, what: &str) -> PipelineResult<Checkpoint> {
    if !path.exists() {
        return Err(PipelineError::Missing {
            path: path.to_path_buf(),
            what: what.to_string(),
        });
    }
    Ok(Checkpoint::load(path)?)
}

fn save_ckpt(ck: &Checkpoint, path: &Path) -> PipelineResult<()> {
    write(path, &ck.to_json()?)
}

fn read_corpus(cfg: &RunConfig, vocabulary: Option<Vocabulary>, tagset: Option<PosTagSet>) -> PipelineResult<Corpus> {
    let fallback = LexiconTagger::default();
    let opts = LoadOptions {
        scheme: cfg.scheme,
        max_vocab: cfg.max_vocab,
        min_freq: cfg.min_freq,
        tagger: Some(&fallback),
        vocabulary,
        tagset,
        ..LoadOptions::default()
    };
    Ok(load_corpus(&cfg.corpus, &opts)?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrepareSummary {
    pub pairs: usize,
    pub examples: usize,
    pub vocabulary: usize,
    pub tags: usize,
    pub candidates: usize,
    /// Examples per candidate label.
    pub label_counts: Vec<usize>,
}

/// Builds the candidate set and labels every `(post, response)` example.
pub fn prepare(cfg: &RunConfig) -> PipelineResult<PrepareSummary> {
    cfg.validate()?;
    let corpus = read_corpus(cfg, None, None)?;
    let (candidates_jsonl, labels, k) = match cfg.variant {
        Variant::LatentSentence => {
            let k_s = cfg.k_s.expect("validated");
            let encoder = BagOfWordsEncoder::new(corpus.vocabulary.clone());
            let responses: Vec<Tokens> = corpus.responses().cloned().collect();
            let cands = build_sentence_candidates(
                &responses,
                &encoder,
                SentenceCandidateConfig {
                    clusters: cfg.clusters.expect("validated"),
                    size: k_s,
                    max_iters: cfg.kmeans_iters,
                    seed: cfg.seed,
                },
            )?;
            let labels = label_dataset(
                &corpus,
                LabelSource::Sentence {
                    candidates: &cands,
                    encoder: &encoder,
                },
            )?;
            (cands.to_jsonl(), labels, k_s)
        }
        _ => {
            let k_p = cfg.k_p.expect("validated");
            let cands = build_pos_candidates(corpus.response_pos(), k_p)?;
            let labels = label_dataset(
                &corpus,
                LabelSource::Pos {
                    candidates: &cands,
                    scoring: AlignScoring::default(),
                },
            )?;
            (cands.to_jsonl(), labels, k_p)
        }
    };
    let posts: String = corpus.pairs.iter().map(|p| join_tokens(&p.post, cfg.scheme) + "\n").collect();
    write(&cfg.path(VOCAB_FILE), &corpus.vocabulary.to_text())?;
    write(&cfg.path(TAGS_FILE), &corpus.tagset.to_text())?;
    write(&cfg.path(POSTS_FILE), &posts)?;
    write(&cfg.path(CANDIDATES_FILE), &candidates_jsonl)?;
    write(&cfg.path(LABELS_FILE), &labels_to_tsv(&labels))?;
    let mut label_counts = vec![0; k];
    for l in &labels {
        label_counts[l.label] += 1;
    }
    Ok(PrepareSummary {
        pairs: corpus.pairs.len(),
        examples: corpus.num_examples(),
        vocabulary: corpus.vocabulary.len(),
        tags: corpus.tagset.len(),
        candidates: k,
        label_counts,
    })
}

/// Outputs of [`prepare`] read back with the corpus they describe.
pub struct Prepared {
    pub corpus: Corpus,
    pub candidates: Vec<Tokens>,
    pub labels: Vec<LabeledExample>,
}

pub fn load_prepared(cfg: &RunConfig) -> PipelineResult<Prepared> {
    let vocab = Vocabulary::from_text(&read(&cfg.path(VOCAB_FILE), "prepared vocabulary (run `prepare` first)")?)?;
    let tags = PosTagSet::from_text(&read(&cfg.path(TAGS_FILE), "prepared tag set (run `prepare` first)")?)?;
    let cand_text = read(&cfg.path(CANDIDATES_FILE), "candidate set (run `prepare` first)")?;
    let labels = labels_from_tsv(&read(&cfg.path(LABELS_FILE), "label file (run `prepare` first)")?)?;
    let corpus = read_corpus(cfg, Some(vocab), Some(tags))?;
    let candidates = match cfg.variant {
        Variant::LatentSentence => {
            let encoder = BagOfWordsEncoder::new(corpus.vocabulary.clone());
            SentenceCandidateSet::from_jsonl(&cand_text, &encoder)?.entries
        }
        _ => PosCandidateSet::from_jsonl(&cand_text)?.entries,
    };
    for l in &labels {
        let ok = corpus.pairs.get(l.pair_idx).is_some_and(|p| l.response_idx < p.responses.len()) && l.label < candidates.len();
        if !ok {
            return Err(PipelineError::Data(format!(
                "label file does not match the corpus at pair {} response {}",
                l.pair_idx, l.response_idx
            )));
        }
    }
    Ok(Prepared {
        corpus,
        candidates,
        labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Predictor,
    Generator,
}

impl FromStr for Which {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "predictor" => Ok(Which::Predictor),
            "generator" => Ok(Which::Generator),
            _ => Err(PipelineError::Usage(format!(
                "unknown model `{s}` (expected predictor or generator)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSummary {
    pub losses: Vec<f64>,
    /// Label accuracy for classifiers, teacher-forced token accuracy for
    /// sequence models, on the training examples.
    pub accuracy: f64,
}

fn loss_csv(report: &TrainReport) -> String {
    let mut out = String::from("epoch,loss\n");
    for (e, l) in report.losses.iter().enumerate() {
        out.push_str(&format!("{e},{l}\n"));
    }
    out
}

fn class_examples(p: &Prepared) -> Vec<ClassExample> {
    p.labels
        .iter()
        .map(|l| ClassExample {
            post: p.corpus.pairs[l.pair_idx].post.clone(),
            label: l.label,
        })
        .collect()
}

/// Generator training triples: the labelled candidate sentence, or the
/// response's own tag sequence.
pub fn generator_examples(variant: Variant, p: &Prepared) -> Vec<GenExample> {
    p.labels
        .iter()
        .map(|l| {
            let pair = &p.corpus.pairs[l.pair_idx];
            let latent = match variant {
                Variant::LatentSentence => p.candidates[l.label].clone(),
                _ => pair.response_pos[l.response_idx].clone(),
            };
            GenExample {
                post: pair.post.clone(),
                latent,
                response: pair.responses[l.response_idx].clone(),
            }
        })
        .collect()
}

fn generator_seed(seed: u64) -> u64 {
    seed.wrapping_add(1)
}

pub fn pretrain(cfg: &RunConfig, which: Which) -> PipelineResult<PretrainSummary> {
    cfg.validate()?;
    let p = load_prepared(cfg)?;
    let words = vocab_words(&p.corpus.vocabulary);
    let dims = &cfg.model;
    let (ck, report, accuracy) = match which {
        Which::Predictor => {
            let opts = cfg.predictor_options();
            match cfg.variant {
                Variant::LatentSentence => {
                    let mut m = LatentSentencePredictor::new(
                        SentencePredictorConfig {
                            vocabulary: words,
                            candidates: p.candidates.clone(),
                            embed_dim: dims.embed_dim,
                            hidden: dims.encoder_hidden,
                            mlp_hidden: dims.mlp_hidden,
                        },
                        cfg.seed,
                    )?;
                    let ex = class_examples(&p);
                    let mut adam = Adam::new(m.store(), opts.adam);
                    let r = pretrain_predictor(&mut m, &ex, &opts, &mut adam)?;
                    let acc = classification_accuracy(&m, &ex)?;
                    (m.checkpoint(Some(&adam), opts.epochs)?, r, acc)
                }
                Variant::SamplePos => {
                    let mut m = LatentPosSampler::new(
                        PosSamplerConfig {
                            vocabulary: words,
                            candidates: p.candidates.clone(),
                            transformer: dims.transformer.clone(),
                            mlp_hidden: dims.mlp_hidden,
                        },
                        cfg.seed,
                    )?;
                    let ex = class_examples(&p);
                    let mut adam = Adam::new(m.store(), opts.adam);
                    let r = pretrain_predictor(&mut m, &ex, &opts, &mut adam)?;
                    let acc = classification_accuracy(&m, &ex)?;
                    (m.checkpoint(Some(&adam), opts.epochs)?, r, acc)
                }
                Variant::GeneratePos => {
                    let mut m = LatentPosGenerator::new(
                        PosGeneratorConfig {
                            vocabulary: words,
                            tags: p.corpus.tagset.tags().to_vec(),
                            transformer: dims.transformer.clone(),
                            max_len: dims.pos_max_len,
                        },
                        cfg.seed,
                    )?;
                    let ex: Vec<PosExample> = p
                        .labels
                        .iter()
                        .map(|l| PosExample {
                            post: p.corpus.pairs[l.pair_idx].post.clone(),
                            tags: p.corpus.pairs[l.pair_idx].response_pos[l.response_idx].clone(),
                        })
                        .collect();
                    let mut adam = Adam::new(m.store(), opts.adam);
                    let r = pretrain_pos_generator(&mut m, &ex, &opts, &mut adam)?;
                    let (mut hits, mut total) = (0, 0);
                    for e in &ex {
                        let (h, t) = m.token_accuracy(&e.post, &e.tags)?;
                        hits += h;
                        total += t;
                    }
                    let acc = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
                    (m.checkpoint(Some(&adam), opts.epochs)?, r, acc)
                }
            }
        }
        Which::Generator => {
            let opts = cfg.generator_options();
            let ex = generator_examples(cfg.variant, &p);
            match cfg.variant {
                Variant::LatentSentence => {
                    let mut m = PointerGeneratorModel::new(
                        PointerConfig {
                            vocabulary: words,
                            embed_dim: dims.embed_dim,
                            encoder_hidden: dims.encoder_hidden,
                            decoder_hidden: dims.decoder_hidden,
                            attn_dim: dims.attn_dim,
                        },
                        generator_seed(cfg.seed),
                    )?;
                    let mut adam = Adam::new(m.store(), opts.adam);
                    let r = pretrain_generator(&mut m, &ex, &opts, &mut adam)?;
                    let acc = generator_accuracy(&m, &ex)?;
                    (m.checkpoint(Some(&adam), opts.epochs)?, r, acc)
                }
                _ => {
                    let mut m = ConcatTransformerModel::new(
                        ConcatConfig {
                            vocabulary: words,
                            tags: p.corpus.tagset.tags().to_vec(),
                            transformer: dims.transformer.clone(),
                        },
                        generator_seed(cfg.seed),
                    )?;
                    let mut adam = Adam::new(m.store(), opts.adam);
                    let r = pretrain_generator(&mut m, &ex, &opts, &mut adam)?;
                    let acc = generator_accuracy(&m, &ex)?;
                    (m.checkpoint(Some(&adam), opts.epochs)?, r, acc)
                }
            }
        }
    };
    let (ck_name, csv_name) = match which {
        Which::Predictor => (PREDICTOR_CKPT, "predictor_loss.csv"),
        Which::Generator => (GENERATOR_CKPT, "generator_loss.csv"),
    };
    save_ckpt(&ck, &cfg.path(ck_name))?;
    write(&cfg.path(csv_name), &loss_csv(&report))?;
    Ok(PretrainSummary {
        losses: report.losses,
        accuracy,
    })
}

pub fn load_predictor(cfg: &RunConfig, ck: &Checkpoint) -> PipelineResult<Box<dyn LatentPredictor>> {
    let kind = checkpoint_kind(ck).unwrap_or("?");
    if kind != cfg.variant.predictor_kind() {
        return Err(PipelineError::Usage(format!(
            "checkpoint holds a `{kind}` model but the {} variant uses `{}`",
            cfg.variant,
            cfg.variant.predictor_kind()
        )));
    }
    Ok(match cfg.variant {
        Variant::LatentSentence => Box::new(LatentSentencePredictor::from_checkpoint(ck)?),
        Variant::SamplePos => Box::new(LatentPosSampler::from_checkpoint(ck)?),
        Variant::GeneratePos => Box::new(LatentPosGenerator::from_checkpoint(ck)?),
    })
}

pub fn load_generator(cfg: &RunConfig, ck: &Checkpoint) -> PipelineResult<Box<dyn ResponseGenerator>> {
    let kind = checkpoint_kind(ck).unwrap_or("?");
    if kind != cfg.variant.generator_kind() {
        return Err(PipelineError::Usage(format!(
            "checkpoint holds a `{kind}` model but the {} variant uses `{}`",
            cfg.variant,
            cfg.variant.generator_kind()
        )));
    }
    Ok(match cfg.variant {
        Variant::LatentSentence => Box::new(PointerGeneratorModel::from_checkpoint(ck)?),
        _ => Box::new(ConcatTransformerModel::from_checkpoint(ck)?),
    })
}

fn epochs_csv(epochs: &[EpochSummary]) -> String {
    let mut out = String::from("epoch,mean_q,mean_gen_loss\n");
    for e in epochs {
        out.push_str(&format!("{},{},{}\n", e.epoch, e.mean_q, e.mean_gen_loss));
    }
    out
}

fn save_joint(
    cfg: &RunConfig,
    predictor: &dyn LatentPredictor,
    generator: &dyn ResponseGenerator,
    state: &JointState,
    events: &[TrainingEvent],
) -> PipelineResult<()> {
    save_ckpt(&predictor.checkpoint(None, state.epoch)?, &cfg.path(JOINT_PREDICTOR_CKPT))?;
    save_ckpt(&generator.checkpoint(None, state.epoch)?, &cfg.path(JOINT_GENERATOR_CKPT))?;
    let state_json = serde_json::to_string(state).map_err(|e| PipelineError::Data(e.to_string()))?;
    write(&cfg.path(JOINT_STATE), &state_json)?;
    let epochs = summarize_epochs(events);
    write(&cfg.path(EVENTS_FILE), &events_to_jsonl(events))?;
    write(&cfg.path(EPOCHS_FILE), &epochs_csv(&epochs))?;
    write(&cfg.path(EDIT_CURVE_FILE), &edit_distance_csv(&epochs))
}

/// Joint fine-tuning up to `cfg.joint.epochs`, from the pretrained
/// checkpoints or, with `resume`, from the last saved joint state.
/// Artifacts are rewritten after every epoch.
pub fn train_joint(cfg: &RunConfig, resume: bool) -> PipelineResult<Vec<EpochSummary>> {
    cfg.validate()?;
    let p = load_prepared(cfg)?;
    let joint = cfg.joint_config();
    let (pred_path, gen_path) = if resume {
        (JOINT_PREDICTOR_CKPT, JOINT_GENERATOR_CKPT)
    } else {
        (PREDICTOR_CKPT, GENERATOR_CKPT)
    };
    let mut predictor = load_predictor(cfg, &load_ckpt(&cfg.path(pred_path), "predictor checkpoint")?)?;
    let mut generator = load_generator(cfg, &load_ckpt(&cfg.path(gen_path), "generator checkpoint")?)?;
    let (mut state, mut events) = if resume {
        let state: JointState = serde_json::from_str(&read(&cfg.path(JOINT_STATE), "joint training state")?)
            .map_err(|e| PipelineError::Data(format!("joint state: {e}")))?;
        let events = events_from_jsonl(&read(&cfg.path(EVENTS_FILE), "training event log")?)
            .map_err(|e| PipelineError::Data(format!("event log: {e}")))?;
        (state, events)
    } else {
        (JointState::new(predictor.store(), generator.store(), &joint), Vec::new())
    };
    let tagger = LexiconTagger::from_pairs(&p.corpus.pairs);
    let mut ran = false;
    while state.epoch < joint.epochs {
        let (ev, _) = joint_train_epoch(predictor.as_mut(), generator.as_mut(), &p.corpus.pairs, &tagger, &joint, &mut state)?;
        events.extend(ev);
        save_joint(cfg, predictor.as_ref(), generator.as_ref(), &state, &events)?;
        ran = true;
    }
    if !ran && !resume {
        save_joint(cfg, predictor.as_ref(), generator.as_ref(), &state, &events)?;
    }
    Ok(summarize_epochs(&events))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrained,
    Joint,
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pretrained" => Ok(Stage::Pretrained),
            "joint" => Ok(Stage::Joint),
            _ => Err(PipelineError::Usage(format!("unknown stage `{s}` (expected pretrained or joint)"))),
        }
    }
}

/// Generates one response per input post, choosing the most probable
/// latent sequence. Returns the dump path and its rows.
pub fn generate(
    cfg: &RunConfig,
    input: Option<&Path>,
    output: Option<&Path>,
    stage: Stage,
) -> PipelineResult<(PathBuf, Vec<GenerationRow>)> {
    cfg.validate()?;
    let input = input.map_or_else(|| cfg.path(POSTS_FILE), Path::to_path_buf);
    let text = read(&input, "input posts")?;
    let posts: Vec<Tokens> = text
        .lines()
        .enumerate()
        .map(|(i, l)| tokenize(l, cfg.scheme).map_err(|_| PipelineError::Data(format!("{}: line {} is empty", input.display(), i + 1))))
        .collect::<PipelineResult<_>>()?;
    let (pred_path, gen_path) = match stage {
        Stage::Pretrained => (PREDICTOR_CKPT, GENERATOR_CKPT),
        Stage::Joint => (JOINT_PREDICTOR_CKPT, JOINT_GENERATOR_CKPT),
    };
    let predictor = load_predictor(cfg, &load_ckpt(&cfg.path(pred_path), "predictor checkpoint")?)?;
    let generator = load_generator(cfg, &load_ckpt(&cfg.path(gen_path), "generator checkpoint")?)?;
    let beam = cfg.beam();
    let rows: Vec<GenerationRow> = posts
        .par_iter()
        .enumerate()
        .map(|(i, post)| -> PipelineResult<GenerationRow> {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let d = predictor.decide(post, ChoiceMode::Argmax, 1.0, &mut rng)?;
            let response = generator.generate(post, &d.sequence, beam, cfg.decode.max_len)?;
            Ok(GenerationRow {
                pair_id: i,
                kind: d.kind,
                latent: d.sequence,
                response,
            })
        })
        .collect::<PipelineResult<_>>()?;
    let out = output.map_or_else(|| cfg.path(GENERATIONS_FILE), Path::to_path_buf);
    write(&out, &dump_to_tsv(&rows))?;
    Ok((out, rows))
}

/// A generation dump with the label it is reported under.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DumpSpec {
    pub label: String,
    pub path: PathBuf,
}

impl FromStr for DumpSpec {
    type Err = PipelineError;

    /// `LABEL=PATH`, or a bare path labelled by its file stem.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (label, path) = match s.split_once('=') {
            Some((l, p)) if !l.is_empty() && !p.is_empty() => (l.to_string(), PathBuf::from(p)),
            _ => {
                let path = PathBuf::from(s);
                let label = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .ok_or_else(|| PipelineError::Usage(format!("`{s}` is not a dump path")))?;
                (label, path)
            }
        };
        Ok(Self { label, path })
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Scores every dump against the corpus. A single dump is reported to
/// `output` (default `report.json`); several dumps produce one
/// `report_<label>.json` each plus a side-by-side `sweep.csv`. The edit
/// distance curve is re-emitted from the event log when one exists.
pub fn evaluate_dumps(cfg: &RunConfig, dumps: &[DumpSpec], output: Option<&Path>) -> PipelineResult<Vec<(String, EvalReport)>> {
    cfg.validate()?;
    if dumps.is_empty() {
        return Err(PipelineError::Usage("no generation dump given".into()));
    }
    let corpus = read_corpus(cfg, None, None)?;
    let tagger = LexiconTagger::from_pairs(&corpus.pairs);
    let opts = EvalOptions { smoothing: cfg.smoothing };
    let mut out = Vec::new();
    for d in dumps {
        let rows = dump_from_tsv(&read(&d.path, "generation dump")?)?;
        let report = evaluate(&rows, &corpus, &tagger, opts)?;
        out.push((d.label.clone(), report));
    }
    if let [(_, report)] = out.as_slice() {
        let path = output.map_or_else(|| cfg.path(REPORT_FILE), Path::to_path_buf);
        write(&path, &report.to_json())?;
    } else {
        let mut sweep = String::from("label,bleu1,bleu2,bleu3,bleu4,overlap1,edit_distance,n\n");
        for (label, r) in &out {
            write(&cfg.path(&format!("report_{label}.json")), &r.to_json())?;
            sweep.push_str(&format!(
                "{label},{},{},{},{},{},{},{}\n",
                r.bleu[0],
                r.bleu[1],
                r.bleu[2],
                r.bleu[3],
                fmt_opt(r.overlap[0]),
                fmt_opt(r.edit_distance),
                r.n
            ));
        }
        write(&output.map_or_else(|| cfg.path(SWEEP_FILE), Path::to_path_buf), &sweep)?;
    }
    let events_path = cfg.path(EVENTS_FILE);
    if events_path.exists() {
        let events =
            events_from_jsonl(&read(&events_path, "training event log")?).map_err(|e| PipelineError::Data(format!("event log: {e}")))?;
        write(&cfg.path(EDIT_CURVE_FILE), &edit_distance_csv(&summarize_epochs(&events)))?;
    }
    Ok(out)
}

/// Latent kind produced by a variant's predictor.
pub fn variant_kind(v: Variant) -> LatentKind {
    match v {
        Variant::LatentSentence => LatentKind::Sentence,
        Variant::SamplePos => LatentKind::PosSampled,
        Variant::GeneratePos => LatentKind::PosGenerated,
    }
}
