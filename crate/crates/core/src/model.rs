//! Pieces shared by the predictor and generator models: the error type,
//! training options, a generic pretraining loop and checkpoint plumbing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Tokens, Vocabulary, NUM_SPECIALS, SPECIALS};
use crate::numerics::{Adam, AdamConfig, Checkpoint, Graph, LrSchedule, NumericsError, ParamStore, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("input of length {len} exceeds the maximum of {max}")]
    InputTooLong { len: usize, max: usize },
    #[error("tag `{0}` is not in the tag set")]
    UnknownTag(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type ModelResult<T> = Result<T, ModelError>;

/// Something that owns a parameter store.
pub trait Parameterized {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
}

/// Word ids with out-of-vocabulary tokens folded to UNK.
pub fn word_ids(vocab: &Vocabulary, tokens: &[String]) -> Vec<usize> {
    tokens.iter().map(|t| vocab.id(t).unwrap_or(SPECIALS.unk)).collect()
}

/// Serializable form of a vocabulary: its non-reserved tokens in order.
pub fn vocab_words(vocab: &Vocabulary) -> Tokens {
    vocab.tokens()[NUM_SPECIALS..].to_vec()
}

pub fn vocab_from_words(words: Tokens) -> ModelResult<Vocabulary> {
    Vocabulary::from_tokens(words).map_err(|e| ModelError::Checkpoint(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    /// Examples whose gradients are summed before each optimizer step.
    pub batch_size: usize,
    pub schedule: LrSchedule,
    /// Global gradient-norm clip, if any.
    pub clip: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl TrainOptions {
    pub fn validate(&self) -> ModelResult<()> {
        if self.batch_size == 0 {
            return Err(ModelError::InvalidArgument("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
    pub steps: u64,
}

/// Runs `epochs` passes of minibatch Adam over `n` examples in a seeded
/// shuffled order. `loss` builds the scalar loss of example `i`.
pub fn train_loop<M, F>(model: &mut M, n: usize, opts: &TrainOptions, optimizer: &mut Adam, loss: F) -> ModelResult<TrainReport>
where
    M: Parameterized,
    F: for<'a> Fn(&M, &mut Graph<'a>, usize) -> ModelResult<Var>,
{
    opts.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(opts.batch_size) {
            for &i in batch {
                let grads = {
                    let mut g = Graph::new(model.store());
                    let l = loss(model, &mut g, i)?;
                    total += g.value(l).item();
                    g.backward(l)?
                };
                model.store_mut().accumulate(&grads);
            }
            let store = model.store_mut();
            if let Some(c) = opts.clip {
                store.clip_grad_norm(c);
            }
            let lr = opts.schedule.rate(optimizer.step + 1, epoch);
            optimizer.step(store, lr)?;
        }
        losses.push(if n == 0 { 0.0 } else { total / n as f64 });
    }
    Ok(TrainReport {
        losses,
        steps: optimizer.step,
    })
}

/// Checkpoint `model` field layout shared by all models.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec<C> {
    pub kind: String,
    pub config: C,
}

pub fn save_checkpoint<M: Parameterized, C: Serialize>(
    model: &M,
    kind: &str,
    config: &C,
    optimizer: Option<&Adam>,
    epoch: usize,
) -> ModelResult<Checkpoint> {
    let spec = ModelSpec {
        kind: kind.to_string(),
        config,
    };
    let value = serde_json::to_value(&spec).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    Ok(Checkpoint::capture(value, model.store(), optimizer, epoch))
}

/// Reads the config of a checkpoint written for `kind`.
pub fn checkpoint_config<C: DeserializeOwned>(ck: &Checkpoint, kind: &str) -> ModelResult<C> {
    let spec: ModelSpec<C> = serde_json::from_value(ck.model.clone()).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    if spec.kind != kind {
        return Err(ModelError::Checkpoint(format!(
            "checkpoint holds a `{}` model, expected `{kind}`",
            spec.kind
        )));
    }
    Ok(spec.config)
}

pub fn checkpoint_kind(ck: &Checkpoint) -> Option<&str> {
    ck.model.get("kind").and_then(|k| k.as_str())
}
