//! Joint fine-tuning: REINFORCE on the latent predictor with a max-F1 bag
//! reward, cross-entropy on the generator.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DialoguePair, PosTagger, Tokens};
use crate::eval::{normalized_edit_distance, LatentKind};
use crate::generator::ResponseGenerator;
use crate::model::{ModelError, Parameterized};
use crate::numerics::{Adam, AdamConfig, Gradients, Graph, LrSchedule, NumericsError, ParamStore};
use crate::predictor::{ChoiceMode, LatentDecision, LatentPredictor};

#[derive(Debug, Error)]
pub enum RlError {
    #[error("empty bag of references")]
    EmptyBag,
    #[error("episode log-probability {recorded} no longer matches the model ({current})")]
    StaleEpisode { recorded: f64, current: f64 },
    #[error("{0:?} decisions cannot be used here")]
    WrongKind(LatentKind),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<NumericsError> for RlError {
    fn from(e: NumericsError) -> Self {
        RlError::Model(e.into())
    }
}

pub type RlResult<T> = Result<T, RlError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    #[default]
    Word,
    Char,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RewardSpec {
    pub granularity: Granularity,
}

fn units(tokens: &[String], g: Granularity) -> Vec<String> {
    match g {
        Granularity::Word => tokens.to_vec(),
        Granularity::Char => tokens.iter().flat_map(|t| t.chars().map(String::from)).collect(),
    }
}

/// Multiset-overlap F1 between a hypothesis and one reference.
pub fn f1_reward(hyp: &[String], reference: &[String], spec: RewardSpec) -> f64 {
    let h = units(hyp, spec.granularity);
    let r = units(reference, spec.granularity);
    if h.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in &r {
        *counts.entry(w).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for w in &h {
        if let Some(c) = counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / h.len() as f64;
    let rc = overlap as f64 / r.len() as f64;
    2.0 * p * rc / (p + rc)
}

/// Best reward over the bag and the index of the reference achieving it
/// (lowest index on ties).
pub fn episode_reward(generated: &[String], bag: &[Tokens], spec: RewardSpec) -> RlResult<(f64, usize)> {
    if bag.is_empty() {
        return Err(RlError::EmptyBag);
    }
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, r) in bag.iter().enumerate() {
        let q = f1_reward(generated, r, spec);
        if q > best.0 {
            best = (q, i);
        }
    }
    Ok(best)
}

/// One rollout: the latent decision, the generated response and its reward.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub pair_idx: usize,
    pub decision: LatentDecision,
    pub generated: Tokens,
    pub q: f64,
    pub best_ref: usize,
}

/// Records of a step must agree with the live model to this tolerance.
const STALE_TOL: f64 = 1e-9;

fn policy_gradient<P: LatentPredictor + ?Sized>(
    predictor: &P,
    post: &[String],
    decision: &LatentDecision,
    advantage: f64,
) -> RlResult<(Gradients, f64)> {
    let mut g = Graph::new(predictor.store());
    let lp = predictor.decision_log_prob(&mut g, post, decision)?;
    let current = g.value(lp).item();
    if (current - decision.log_prob).abs() > STALE_TOL * (1.0 + current.abs()) {
        return Err(RlError::StaleEpisode {
            recorded: decision.log_prob,
            current,
        });
    }
    let loss = g.scale(lp, -advantage)?;
    let value = g.value(loss).item();
    Ok((g.backward(loss)?, value))
}

/// Gradient of `−A · log p(ẑ | post)` for a selected candidate, where `A`
/// is the episode return (minus any baseline).
pub fn reinforce_select_update<P: LatentPredictor + ?Sized>(
    predictor: &P,
    post: &[String],
    decision: &LatentDecision,
    advantage: f64,
) -> RlResult<(Gradients, f64)> {
    match decision.kind {
        LatentKind::Sentence | LatentKind::PosSampled => policy_gradient(predictor, post, decision, advantage),
        k => Err(RlError::WrongKind(k)),
    }
}

/// Gradient of `−A · Σ_j log p(ẑ_j | ẑ_<j, post)` for a generated tag
/// sequence; every position receives the same return.
pub fn reinforce_generate_update<P: LatentPredictor + ?Sized>(
    predictor: &P,
    post: &[String],
    decision: &LatentDecision,
    advantage: f64,
) -> RlResult<(Gradients, f64)> {
    match decision.kind {
        LatentKind::PosGenerated => policy_gradient(predictor, post, decision, advantage),
        k => Err(RlError::WrongKind(k)),
    }
}

/// Gradient contribution for any decision kind.
pub fn reinforce_update<P: LatentPredictor + ?Sized>(
    predictor: &P,
    post: &[String],
    decision: &LatentDecision,
    advantage: f64,
) -> RlResult<(Gradients, f64)> {
    policy_gradient(predictor, post, decision, advantage)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Baseline {
    #[default]
    None,
    /// Exponential moving average of past mean rewards.
    MovingAverage { decay: f64 },
}

fn default_predictor_lr() -> f64 {
    1e-5
}

fn one() -> f64 {
    1.0
}

fn default_generator_schedule() -> LrSchedule {
    LrSchedule::Constant { rate: 1e-4 }
}

fn default_clip() -> Option<f64> {
    Some(5.0)
}

fn default_epochs() -> usize {
    10
}

fn default_episodes() -> usize {
    1
}

fn default_beam() -> usize {
    1
}

fn default_max_len() -> usize {
    20
}

fn default_sample() -> ChoiceMode {
    ChoiceMode::Sample
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_predictor_lr")]
    pub predictor_lr: f64,
    /// Multiplies the predictor learning rate once per epoch.
    #[serde(default = "one")]
    pub predictor_decay: f64,
    #[serde(default = "default_generator_schedule")]
    pub generator_schedule: LrSchedule,
    #[serde(default = "default_clip")]
    pub clip: Option<f64>,
    #[serde(default = "default_sample")]
    pub sample_mode: ChoiceMode,
    #[serde(default = "one")]
    pub temperature: f64,
    #[serde(default)]
    pub baseline: Baseline,
    #[serde(default = "default_episodes")]
    pub episodes_per_step: usize,
    /// Beam width used to generate the rollout response.
    #[serde(default = "default_beam")]
    pub beam: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub reward: RewardSpec,
    #[serde(default = "yes")]
    pub train_generator: bool,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub seed: u64,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self::new(default_epochs(), 0)
    }
}

impl JointConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            predictor_lr: default_predictor_lr(),
            predictor_decay: 1.0,
            generator_schedule: default_generator_schedule(),
            clip: default_clip(),
            sample_mode: ChoiceMode::Sample,
            temperature: 1.0,
            baseline: Baseline::None,
            episodes_per_step: 1,
            beam: 1,
            max_len: default_max_len(),
            reward: RewardSpec::default(),
            train_generator: true,
            adam: AdamConfig::default(),
            seed,
        }
    }

    pub fn validate(&self) -> RlResult<()> {
        if !(self.predictor_lr >= 0.0 && self.predictor_lr.is_finite()) {
            return Err(RlError::Config("predictor_lr must be non-negative".into()));
        }
        if self.episodes_per_step == 0 || self.max_len == 0 || self.beam == 0 {
            return Err(RlError::Config("episodes_per_step, beam and max_len must be positive".into()));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(RlError::Config("temperature must be positive".into()));
        }
        if let Baseline::MovingAverage { decay } = self.baseline {
            if !(0.0..1.0).contains(&decay) {
                return Err(RlError::Config("baseline decay must be in [0, 1)".into()));
            }
        }
        Ok(())
    }

    pub fn predictor_rate(&self, epoch: usize) -> f64 {
        self.predictor_lr * self.predictor_decay.powi(epoch as i32)
    }
}

/// Everything besides model parameters needed to resume joint training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    /// Next epoch to run.
    pub epoch: usize,
    pub step: u64,
    pub baseline: Option<f64>,
    pub predictor_optimizer: Adam,
    pub generator_optimizer: Adam,
}

impl JointState {
    pub fn new(predictor: &ParamStore, generator: &ParamStore, cfg: &JointConfig) -> Self {
        Self {
            epoch: 0,
            step: 0,
            baseline: None,
            predictor_optimizer: Adam::new(predictor, cfg.adam),
            generator_optimizer: Adam::new(generator, cfg.adam),
        }
    }
}

/// One log record per optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrainingEvent {
    pub step: u64,
    pub epoch: usize,
    pub mean_q: f64,
    pub gen_loss: f64,
    pub pred_lr: f64,
    pub mean_edit_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_q: f64,
    pub mean_gen_loss: f64,
    pub mean_edit_distance: Option<f64>,
}

pub fn events_to_jsonl(events: &[TrainingEvent]) -> String {
    events
        .iter()
        .map(|e| serde_json::to_string(e).expect("event serializes") + "\n")
        .collect()
}

/// Per-epoch `epoch,mean_edit_distance` rows; epochs without a defined
/// distance are left blank.
pub fn edit_distance_csv(epochs: &[EpochSummary]) -> String {
    let mut out = String::from("epoch,mean_edit_distance\n");
    for e in epochs {
        match e.mean_edit_distance {
            Some(d) => out.push_str(&format!("{},{}\n", e.epoch, d)),
            None => out.push_str(&format!("{},\n", e.epoch)),
        }
    }
    out
}

/// Seeded generator of episode `pair` in `epoch`; independent of how
/// rollouts are scheduled across threads.
pub fn episode_rng(seed: u64, epoch: usize, pair: usize, pairs: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream((epoch as u64) * (pairs as u64) + pair as u64);
    r
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Latent-vs-response mismatch of one episode: tags of the response against
/// a POS latent, tokens against a sentence latent.
pub fn episode_edit_distance(kind: LatentKind, latent: &[String], generated: &[String], tagger: &dyn PosTagger) -> Option<f64> {
    if latent.is_empty() {
        return None;
    }
    let resp = if kind.is_pos() {
        if generated.is_empty() {
            Vec::new()
        } else {
            tagger.tag(generated)
        }
    } else {
        generated.to_vec()
    };
    normalized_edit_distance(&resp, latent).ok()
}

/// Samples a latent, generates a response and scores it against the bag.
pub fn rollout<P, G>(
    predictor: &P,
    generator: &G,
    pairs: &[DialoguePair],
    pair_idx: usize,
    cfg: &JointConfig,
    rng: &mut ChaCha8Rng,
) -> RlResult<Episode>
where
    P: LatentPredictor + ?Sized,
    G: ResponseGenerator + ?Sized,
{
    let pair = &pairs[pair_idx];
    let decision = predictor.decide(&pair.post, cfg.sample_mode, cfg.temperature, rng)?;
    let generated = generator.generate(&pair.post, &decision.sequence, cfg.beam, cfg.max_len)?;
    let (q, best_ref) = episode_reward(&generated, &pair.responses, cfg.reward)?;
    Ok(Episode {
        pair_idx,
        decision,
        generated,
        q,
        best_ref,
    })
}

/// Runs one epoch of joint training over `pairs` in order, advancing `state`.
pub fn joint_train_epoch<P, G>(
    predictor: &mut P,
    generator: &mut G,
    pairs: &[DialoguePair],
    tagger: &dyn PosTagger,
    cfg: &JointConfig,
    state: &mut JointState,
) -> RlResult<(Vec<TrainingEvent>, EpochSummary)>
where
    P: LatentPredictor + ?Sized,
    G: ResponseGenerator + ?Sized,
{
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(RlError::Config("no training pairs".into()));
    }
    let epoch = state.epoch;
    let pred_lr = cfg.predictor_rate(epoch);
    let mut events = Vec::new();
    let idx: Vec<usize> = (0..pairs.len()).collect();
    for chunk in idx.chunks(cfg.episodes_per_step) {
        let episodes: Vec<Episode> = {
            let (p, g) = (&*predictor, &*generator);
            chunk
                .par_iter()
                .map(|&i| {
                    let mut rng = episode_rng(cfg.seed, epoch, i, pairs.len());
                    rollout(p, g, pairs, i, cfg, &mut rng)
                })
                .collect::<RlResult<_>>()?
        };
        let k = episodes.len() as f64;
        let mean_q = episodes.iter().map(|e| e.q).sum::<f64>() / k;
        let baseline = match cfg.baseline {
            Baseline::None => 0.0,
            Baseline::MovingAverage { .. } => state.baseline.unwrap_or(0.0),
        };

        if pred_lr > 0.0 {
            for e in &episodes {
                let (grads, _) = reinforce_update(&*predictor, &pairs[e.pair_idx].post, &e.decision, e.q - baseline)?;
                predictor.store_mut().accumulate(&grads);
            }
            let store = predictor.store_mut();
            store.scale_grads(1.0 / k);
            if let Some(c) = cfg.clip {
                store.clip_grad_norm(c);
            }
            state.predictor_optimizer.step(store, pred_lr)?;
        }
        if let Baseline::MovingAverage { decay } = cfg.baseline {
            state.baseline = Some(match state.baseline {
                Some(b) => decay * b + (1.0 - decay) * mean_q,
                None => mean_q,
            });
        }

        let mut gen_loss = 0.0;
        for e in &episodes {
            let pair = &pairs[e.pair_idx];
            let grads = {
                let mut g = Graph::new(generator.store());
                let l = generator.loss(&mut g, &pair.post, &e.decision.sequence, &pair.responses[e.best_ref])?;
                gen_loss += g.value(l).item();
                g.backward(l)?
            };
            if cfg.train_generator {
                generator.store_mut().accumulate(&grads);
            }
        }
        gen_loss /= k;
        if cfg.train_generator {
            let store = generator.store_mut();
            store.scale_grads(1.0 / k);
            if let Some(c) = cfg.clip {
                store.clip_grad_norm(c);
            }
            let lr = cfg.generator_schedule.rate(state.generator_optimizer.step + 1, epoch);
            state.generator_optimizer.step(store, lr)?;
        }

        state.step += 1;
        events.push(TrainingEvent {
            step: state.step,
            epoch,
            mean_q,
            gen_loss,
            pred_lr,
            mean_edit_distance: mean(
                episodes
                    .iter()
                    .filter_map(|e| episode_edit_distance(e.decision.kind, &e.decision.sequence, &e.generated, tagger)),
            ),
        });
    }
    state.epoch += 1;
    let summary = summarize_epochs(&events).remove(0);
    Ok((events, summary))
}

/// Per-epoch means of the step records, in epoch order.
pub fn summarize_epochs(events: &[TrainingEvent]) -> Vec<EpochSummary> {
    let mut out: Vec<EpochSummary> = Vec::new();
    for chunk in events.chunk_by(|a, b| a.epoch == b.epoch) {
        out.push(EpochSummary {
            epoch: chunk[0].epoch,
            mean_q: mean(chunk.iter().map(|e| e.mean_q)).unwrap_or(0.0),
            mean_gen_loss: mean(chunk.iter().map(|e| e.gen_loss)).unwrap_or(0.0),
            mean_edit_distance: mean(chunk.iter().filter_map(|e| e.mean_edit_distance)),
        });
    }
    out
}

pub fn events_from_jsonl(text: &str) -> Result<Vec<TrainingEvent>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct JointLog {
    pub events: Vec<TrainingEvent>,
    pub epochs: Vec<EpochSummary>,
}

/// Runs epochs `state.epoch..cfg.epochs`.
pub fn joint_train<P, G>(
    predictor: &mut P,
    generator: &mut G,
    pairs: &[DialoguePair],
    tagger: &dyn PosTagger,
    cfg: &JointConfig,
    state: &mut JointState,
) -> RlResult<JointLog>
where
    P: LatentPredictor + ?Sized,
    G: ResponseGenerator + ?Sized,
{
    let mut log = JointLog::default();
    while state.epoch < cfg.epochs {
        let (ev, summary) = joint_train_epoch(predictor, generator, pairs, tagger, cfg, state)?;
        log.events.extend(ev);
        log.epochs.push(summary);
    }
    Ok(log)
}

/// A context-free softmax policy over `K` arms, for exercising the
/// estimator in isolation.
#[derive(Debug, Clone)]
pub struct SoftmaxBandit {
    store: ParamStore,
    logits: crate::numerics::ParamId,
}

impl SoftmaxBandit {
    pub fn new(logits: &[f64]) -> Self {
        let mut store = ParamStore::new();
        let id = store.insert("bandit.logits".into(), crate::numerics::Tensor::row(logits.to_vec()));
        Self { store, logits: id }
    }

    pub fn probabilities(&self) -> Vec<f64> {
        crate::predictor::softmax(self.store.value(self.logits).data())
    }

    pub fn logits(&self) -> &[f64] {
        self.store.value(self.logits).data()
    }

    pub fn logits_id(&self) -> crate::numerics::ParamId {
        self.logits
    }
}

impl Parameterized for SoftmaxBandit {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl LatentPredictor for SoftmaxBandit {
    fn kind(&self) -> LatentKind {
        LatentKind::PosSampled
    }

    fn decide(&self, _: &[String], mode: ChoiceMode, temperature: f64, rng: &mut ChaCha8Rng) -> crate::model::ModelResult<LatentDecision> {
        let (index, log_prob) = crate::predictor::choose_latent(&self.probabilities(), mode, temperature, rng)?;
        Ok(LatentDecision {
            kind: LatentKind::PosSampled,
            index: Some(index),
            sequence: vec![format!("arm{index}")],
            log_prob,
            step_log_probs: vec![log_prob],
        })
    }

    fn decision_log_prob(&self, g: &mut Graph, _: &[String], d: &LatentDecision) -> crate::model::ModelResult<crate::numerics::Var> {
        let index = d
            .index
            .ok_or_else(|| ModelError::InvalidArgument("decision has no candidate index".into()))?;
        let l = g.param(self.logits);
        let lp = g.log_softmax_rows(l)?;
        Ok(g.pick(lp, &[index])?)
    }

    fn model_kind(&self) -> &'static str {
        "softmax-bandit"
    }

    fn checkpoint(&self, optimizer: Option<&Adam>, epoch: usize) -> crate::model::ModelResult<crate::numerics::Checkpoint> {
        crate::model::save_checkpoint(self, "softmax-bandit", &self.logits().to_vec(), optimizer, epoch)
    }
}
