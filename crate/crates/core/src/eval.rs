//! Automatic evaluation: corpus BLEU, n-gram overlap with the latent
//! sentence, and normalised edit distance to the latent POS sequence.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, PosTagger, Tokens};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input")]
    EmptyInput,
    #[error("BLEU order must be in 1..=4, got {0}")]
    BadOrder(usize),
    #[error("{hyps} hypotheses but {refs} reference bags")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("pair id {0} is not in the corpus")]
    Alignment(usize),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Smoothing {
    #[default]
    None,
    /// Adds one to numerator and denominator of every order above 1.
    AddOne,
}

/// Corpus-level BLEU-`max_n` in percent.
///
/// N-gram counts are clipped by their maximum count in any single reference
/// of the bag; the brevity penalty uses, per sentence, the reference length
/// closest to the hypothesis length (the shorter one on ties).
pub fn bleu(hyps: &[Tokens], refs: &[Vec<Tokens>], max_n: usize, smoothing: Smoothing) -> Result<f64, EvalError> {
    if !(1..=4).contains(&max_n) {
        return Err(EvalError::BadOrder(max_n));
    }
    if hyps.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if hyps.len() != refs.len() {
        return Err(EvalError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (hyp, bag) in hyps.iter().zip(refs) {
        if bag.is_empty() {
            return Err(EvalError::EmptyInput);
        }
        hyp_len += hyp.len();
        ref_len += bag
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
            .expect("bag non-empty");
        for n in 1..=max_n {
            let counts = ngram_counts(hyp, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in bag {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in counts {
                matched[n - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let (m, t) = match smoothing {
            Smoothing::AddOne if n > 0 => (matched[n] as f64 + 1.0, total[n] as f64 + 1.0),
            _ => (matched[n] as f64, total[n] as f64),
        };
        if m == 0.0 || t == 0.0 {
            return Ok(0.0);
        }
        log_sum += (m / t).ln();
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * (log_sum / max_n as f64).exp())
}

/// Percentage of distinct response n-grams that also occur in the latent
/// sentence; `None` when the response is shorter than `n`.
pub fn ngram_overlap(response: &[String], latent: &[String], n: usize) -> Option<f64> {
    if n == 0 || response.len() < n {
        return None;
    }
    let resp: HashSet<&[String]> = response.windows(n).collect();
    let lat: HashSet<&[String]> = if latent.len() >= n {
        latent.windows(n).collect()
    } else {
        HashSet::new()
    };
    let shared = resp.iter().filter(|g| lat.contains(*g)).count();
    Some(100.0 * shared as f64 / resp.len() as f64)
}

/// Unit-cost Levenshtein distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance from the response's tags to the selected sequence, divided
/// by the selected sequence's length.
pub fn normalized_edit_distance<T: PartialEq>(response: &[T], selected: &[T]) -> Result<f64, EvalError> {
    if selected.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    Ok(levenshtein(response, selected) as f64 / selected.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentKind {
    Sentence,
    PosSampled,
    PosGenerated,
}

impl LatentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LatentKind::Sentence => "sentence",
            LatentKind::PosSampled => "pos-sampled",
            LatentKind::PosGenerated => "pos-generated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sentence" => Some(LatentKind::Sentence),
            "pos-sampled" => Some(LatentKind::PosSampled),
            "pos-generated" => Some(LatentKind::PosGenerated),
            _ => None,
        }
    }

    pub fn is_pos(self) -> bool {
        !matches!(self, LatentKind::Sentence)
    }
}

/// One line of a generation dump.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationRow {
    pub pair_id: usize,
    pub kind: LatentKind,
    pub latent: Tokens,
    pub response: Tokens,
}

/// Tab-separated `pair_id, latent kind, latent sequence, response`; token
/// sequences are space-joined.
pub fn dump_to_tsv(rows: &[GenerationRow]) -> String {
    let mut out = String::new();
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            r.pair_id,
            r.kind.as_str(),
            r.latent.join(" "),
            r.response.join(" ")
        )
        .expect("write to string");
    }
    out
}

pub fn dump_from_tsv(text: &str) -> Result<Vec<GenerationRow>, EvalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let err = |message: String| EvalError::Parse { line: i + 1, message };
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 4 {
                return Err(err(format!("expected 4 fields, found {}", f.len())));
            }
            let split = |s: &str| s.split_whitespace().map(str::to_owned).collect::<Tokens>();
            Ok(GenerationRow {
                pair_id: f[0].parse().map_err(|e| err(format!("pair id: {e}")))?,
                kind: LatentKind::parse(f[1]).ok_or_else(|| err(format!("unknown latent kind `{}`", f[1])))?,
                latent: split(f[2]),
                response: split(f[3]),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// BLEU-1..4 in percent.
    pub bleu: [f64; 4],
    /// Mean n-gram overlap with latent sentences for n = 1..4, in percent;
    /// `null` when no row has a latent sentence long enough.
    pub overlap: [Option<f64>; 4],
    /// Mean normalised edit distance between each response and its latent
    /// sequence (tags for POS latents, tokens for sentence latents).
    pub edit_distance: Option<f64>,
    pub n: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, EvalError> {
        serde_json::from_str(s).map_err(|e| EvalError::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    pub smoothing: Smoothing,
}

/// Scores a generation dump against the reference bags of `corpus`.
pub fn evaluate(rows: &[GenerationRow], corpus: &Corpus, tagger: &dyn PosTagger, opts: EvalOptions) -> Result<EvalReport, EvalError> {
    if rows.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut hyps = Vec::with_capacity(rows.len());
    let mut refs = Vec::with_capacity(rows.len());
    for r in rows {
        let pair = corpus.pairs.get(r.pair_id).ok_or(EvalError::Alignment(r.pair_id))?;
        hyps.push(r.response.clone());
        refs.push(pair.responses.clone());
    }
    let mut bleu_scores = [0.0; 4];
    for (n, slot) in bleu_scores.iter_mut().enumerate() {
        *slot = bleu(&hyps, &refs, n + 1, opts.smoothing)?;
    }

    let mut overlap = [None; 4];
    for (n, slot) in overlap.iter_mut().enumerate() {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| r.kind == LatentKind::Sentence)
            .filter_map(|r| ngram_overlap(&r.response, &r.latent, n + 1))
            .collect();
        if !vals.is_empty() {
            *slot = Some(vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }

    let dists: Vec<f64> = rows
        .iter()
        .filter(|r| !r.latent.is_empty())
        .map(|r| {
            let resp = if r.kind.is_pos() {
                if r.response.is_empty() {
                    Vec::new()
                } else {
                    tagger.tag(&r.response)
                }
            } else {
                r.response.clone()
            };
            normalized_edit_distance(&resp, &r.latent)
        })
        .collect::<Result<_, _>>()?;
    let edit_distance = (!dists.is_empty()).then(|| dists.iter().sum::<f64>() / dists.len() as f64);

    Ok(EvalReport {
        bleu: bleu_scores,
        overlap,
        edit_distance,
        n: rows.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DialoguePair, LexiconTagger, PosTagSet, Split, Vocabulary};
    use proptest::prelude::*;

    fn toks(s: &str) -> Tokens {
        s.split_whitespace().map(str::to_owned).collect()
    }

    /// Edit distance straight from its recursive definition.
    fn recursive_distance(a: &[String], b: &[String]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = recursive_distance(ra, rb) + usize::from(x != y);
                let del = recursive_distance(ra, b) + 1;
                let ins = recursive_distance(a, rb) + 1;
                sub.min(del).min(ins)
            }
        }
    }

    #[test]
    fn bleu_hand_cases() {
        let hyps = vec![toks("a b c d"), toks("x y z")];
        let refs = vec![vec![toks("q"), toks("a b c d")], vec![toks("x y z")]];
        for n in 1..=4 {
            assert!((bleu(&hyps, &refs, n, Smoothing::None).unwrap() - 100.0).abs() < 1e-9);
        }
        let b1 = bleu(&[toks("a b c d")], &[vec![toks("a b x y")]], 1, Smoothing::None).unwrap();
        assert!((b1 - 50.0).abs() < 1e-9);
        assert!(matches!(bleu(&[], &[], 1, Smoothing::None), Err(EvalError::EmptyInput)));
        assert!(bleu(&hyps, &refs, 5, Smoothing::None).is_err());
    }

    #[test]
    fn bleu_clipping_and_brevity() {
        // "the the the" vs "the cat": clipped unigram precision 1/3
        let b = bleu(&[toks("the the the")], &[vec![toks("the cat")]], 1, Smoothing::None).unwrap();
        assert!((b - 100.0 / 3.0).abs() < 1e-9);
        // short hypothesis: BP = exp(1 - 4/2)
        let b = bleu(&[toks("a b")], &[vec![toks("a b c d")]], 1, Smoothing::None).unwrap();
        assert!((b - 100.0 * (-1.0f64).exp()).abs() < 1e-9);
        // closest reference length is used
        let b = bleu(&[toks("a b")], &[vec![toks("a b c d"), toks("a b x")]], 1, Smoothing::None).unwrap();
        assert!((b - 100.0 * (1.0 - 1.5f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn smoothing_rescues_missing_higher_orders() {
        let hyps = vec![toks("a b")];
        let refs = vec![vec![toks("b a")]];
        assert_eq!(bleu(&hyps, &refs, 2, Smoothing::None).unwrap(), 0.0);
        assert!(bleu(&hyps, &refs, 2, Smoothing::AddOne).unwrap() > 0.0);
    }

    #[test]
    fn overlap_cases() {
        assert_eq!(ngram_overlap(&toks("a b c"), &toks("b c d"), 2), Some(50.0));
        for n in 1..=3 {
            assert_eq!(ngram_overlap(&toks("b c"), &toks("a b c d"), n.min(2)), Some(100.0));
        }
        assert_eq!(ngram_overlap(&toks("a"), &toks("a"), 2), None);
        assert_eq!(ngram_overlap(&toks("a a b"), &toks("a"), 1), Some(50.0));
    }

    #[test]
    fn edit_distance_cases() {
        assert_eq!(normalized_edit_distance(&toks("n v"), &toks("n v")).unwrap(), 0.0);
        assert_eq!(normalized_edit_distance(&toks("n"), &toks("n v")).unwrap(), 0.5);
        assert!(normalized_edit_distance(&toks("n"), &[]).is_err());
    }

    #[test]
    fn edit_distance_matches_recursion_exhaustively_for_short_pairs() {
        let alphabet = ["n", "v"];
        let mut seqs: Vec<Tokens> = vec![Vec::new()];
        for len in 1..=4 {
            for code in 0..(1usize << len) {
                seqs.push((0..len).map(|i| alphabet[(code >> i) & 1].to_string()).collect());
            }
        }
        for a in &seqs {
            for b in &seqs {
                assert_eq!(levenshtein(a, b), recursive_distance(a, b));
            }
        }
    }

    fn toy_corpus() -> Corpus {
        Corpus {
            pairs: vec![
                DialoguePair::new(toks("hi"), vec![toks("hello there"), toks("hey")], vec![toks("i r"), toks("i")]).unwrap(),
                DialoguePair::new(toks("bye"), vec![toks("see you")], vec![toks("v r")]).unwrap(),
            ],
            vocabulary: Vocabulary::specials_only(),
            tagset: PosTagSet::new(toks("i r v x")).unwrap(),
            split: Split::Test,
        }
    }

    #[test]
    fn self_evaluation_is_perfect() {
        let c = toy_corpus();
        let tagger = LexiconTagger::from_pairs(&c.pairs);
        let rows = vec![
            GenerationRow {
                pair_id: 0,
                kind: LatentKind::PosSampled,
                latent: toks("i r"),
                response: toks("hello there"),
            },
            GenerationRow {
                pair_id: 1,
                kind: LatentKind::PosSampled,
                latent: toks("v r"),
                response: toks("see you"),
            },
        ];
        let rep = evaluate(&rows, &c, &tagger, EvalOptions::default()).unwrap();
        // two-token responses have no trigrams
        assert_eq!(rep.bleu, [100.0, 100.0, 0.0, 0.0]);
        assert_eq!(rep.edit_distance, Some(0.0));
        assert_eq!(rep.overlap, [None; 4]);
        let back = EvalReport::from_json(&rep.to_json()).unwrap();
        assert_eq!(back, rep);
    }

    #[test]
    fn empty_generation_counts_with_zero_precision() {
        let c = toy_corpus();
        let tagger = LexiconTagger::from_pairs(&c.pairs);
        let rows = vec![
            GenerationRow {
                pair_id: 0,
                kind: LatentKind::Sentence,
                latent: toks("hello there"),
                response: toks("hello there"),
            },
            GenerationRow {
                pair_id: 1,
                kind: LatentKind::Sentence,
                latent: toks("see you"),
                response: Vec::new(),
            },
        ];
        let rep = evaluate(&rows, &c, &tagger, EvalOptions::default()).unwrap();
        assert_eq!(rep.n, 2);
        // 2 matched unigrams of 2 hypothesis tokens, but BP = exp(1 - 4/2)
        assert!((rep.bleu[0] - 100.0 * (-1.0f64).exp()).abs() < 1e-9);
        assert_eq!(rep.overlap[0], Some(100.0));
        assert_eq!(rep.edit_distance, Some(0.5));
    }

    #[test]
    fn unknown_pair_ids_fail_alignment() {
        let c = toy_corpus();
        let rows = vec![GenerationRow {
            pair_id: 7,
            kind: LatentKind::Sentence,
            latent: toks("a"),
            response: toks("a"),
        }];
        assert!(matches!(
            evaluate(&rows, &c, &LexiconTagger::default(), EvalOptions::default()),
            Err(EvalError::Alignment(7))
        ));
    }

    #[test]
    fn dump_round_trip() {
        let rows = vec![
            GenerationRow {
                pair_id: 3,
                kind: LatentKind::PosGenerated,
                latent: toks("n v"),
                response: toks("dogs run"),
            },
            GenerationRow {
                pair_id: 4,
                kind: LatentKind::Sentence,
                latent: toks("x"),
                response: Vec::new(),
            },
        ];
        assert_eq!(dump_from_tsv(&dump_to_tsv(&rows)).unwrap(), rows);
        assert!(dump_from_tsv("1\tweird\ta\tb\n").is_err());
    }

    fn word() -> impl Strategy<Value = String> {
        prop_oneof![Just("a"), Just("b"), Just("c"), Just("d")].prop_map(str::to_owned)
    }

    proptest! {
        #[test]
        fn edit_distance_metric_axioms(
            a in proptest::collection::vec(word(), 0..7),
            b in proptest::collection::vec(word(), 0..7),
            c in proptest::collection::vec(word(), 0..7),
        ) {
            prop_assert_eq!(levenshtein(&a, &a), 0);
            prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
            prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
            prop_assert_eq!(levenshtein(&a, &b), recursive_distance(&a, &b));
        }

        #[test]
        fn overlap_is_a_percentage(
            r in proptest::collection::vec(word(), 1..8),
            l in proptest::collection::vec(word(), 0..8),
            n in 1usize..5,
        ) {
            if let Some(v) = ngram_overlap(&r, &l, n) {
                prop_assert!((0.0..=100.0).contains(&v));
                let all_in = r.windows(n).all(|g| l.windows(n).any(|h| h == g));
                prop_assert_eq!(v == 100.0, all_in);
            } else {
                prop_assert!(r.len() < n);
            }
        }

        #[test]
        fn bleu_is_a_percentage(
            hyps in proptest::collection::vec(proptest::collection::vec(word(), 1..8), 1..5),
            refs in proptest::collection::vec(proptest::collection::vec(word(), 1..8), 1..5),
        ) {
            let bags: Vec<Vec<Tokens>> = hyps.iter().enumerate().map(|(i, _)| vec![refs[i % refs.len()].clone()]).collect();
            for n in 1..=4 {
                let b = bleu(&hyps, &bags, n, Smoothing::None).unwrap();
                prop_assert!((0.0..=100.0 + 1e-9).contains(&b));
            }
        }
    }
}
