//! Length-normalised beam search over any step-wise scorer.

use crate::model::ModelResult;

/// An autoregressive model exposed one step at a time.
pub trait StepScorer {
    /// Decoder state reached after consuming a prefix.
    type State: Clone;

    fn start(&self) -> ModelResult<Self::State>;

    /// Log-probabilities over output ids for the token following `prefix`,
    /// plus the state shared by every extension of `prefix`.
    fn step(&self, state: &Self::State, prefix: &[usize]) -> ModelResult<(Vec<f64>, Self::State)>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeOptions {
    pub beam: usize,
    /// Maximum number of decoding steps; the end token counts as a step.
    pub max_len: usize,
    pub eos: usize,
    /// Ids that are never emitted.
    pub banned: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Emitted ids, end token excluded.
    pub tokens: Vec<usize>,
    /// Log-probability of every step taken, the end token's included.
    pub step_log_probs: Vec<f64>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Accumulated log-probability divided by the number of steps taken.
    pub fn score(&self) -> f64 {
        self.log_prob / self.step_log_probs.len().max(1) as f64
    }
}

struct Live<S> {
    hyp: Hypothesis,
    state: S,
}

/// Keeps the `beam` best partial sequences by accumulated log-probability
/// at every step. Ended and length-capped sequences compete on
/// [`Hypothesis::score`]; ties go to the one found first.
pub fn beam_search<S: StepScorer>(scorer: &S, opts: &DecodeOptions) -> ModelResult<Hypothesis> {
    let beam = opts.beam.max(1);
    let mut live = vec![Live {
        hyp: Hypothesis {
            tokens: Vec::new(),
            step_log_probs: Vec::new(),
            log_prob: 0.0,
            finished: false,
        },
        state: scorer.start()?,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..opts.max_len {
        let mut cands: Vec<(usize, usize, f64, f64)> = Vec::new();
        let mut next_states = Vec::with_capacity(live.len());
        for (li, l) in live.iter().enumerate() {
            let (logp, st) = scorer.step(&l.state, &l.hyp.tokens)?;
            next_states.push(st);
            for (id, &lp) in logp.iter().enumerate() {
                if lp.is_finite() && !opts.banned.contains(&id) {
                    cands.push((li, id, lp, l.hyp.log_prob + lp));
                }
            }
        }
        // stable: equal totals keep parent-then-id order
        cands.sort_by(|a, b| b.3.total_cmp(&a.3));
        cands.truncate(beam);
        let mut next = Vec::with_capacity(cands.len());
        for (li, id, lp, total) in cands {
            let parent = &live[li].hyp;
            let mut step_log_probs = parent.step_log_probs.clone();
            step_log_probs.push(lp);
            if id == opts.eos {
                finished.push(Hypothesis {
                    tokens: parent.tokens.clone(),
                    step_log_probs,
                    log_prob: total,
                    finished: true,
                });
            } else {
                let mut tokens = parent.tokens.clone();
                tokens.push(id);
                next.push(Live {
                    hyp: Hypothesis {
                        tokens,
                        step_log_probs,
                        log_prob: total,
                        finished: false,
                    },
                    state: next_states[li].clone(),
                });
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    let pool = finished.into_iter().chain(live.into_iter().map(|l| l.hyp));
    let mut best: Option<Hypothesis> = None;
    for h in pool {
        if best.as_ref().is_none_or(|b| h.score() > b.score()) {
            best = Some(h);
        }
    }
    Ok(best.unwrap_or(Hypothesis {
        tokens: Vec::new(),
        step_log_probs: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }))
}

pub fn greedy<S: StepScorer>(scorer: &S, opts: &DecodeOptions) -> ModelResult<Hypothesis> {
    beam_search(scorer, &DecodeOptions { beam: 1, ..opts.clone() })
}
