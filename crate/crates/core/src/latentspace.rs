//! Candidate latent sequences and classification labels for predictor
//! pretraining.
//!
//! Two label spaces are supported:
//!
//! * latent sentences: responses are encoded, clustered with k-means, and an
//!   equal share of each cluster (the members nearest the centroid) forms the
//!   candidate set; a response is labelled with its Euclidean-nearest
//!   candidate;
//! * latent POS sequences: the most frequent tag sequences form the
//!   candidate set; a response is labelled with the candidate whose global
//!   alignment score (normalised by the longer length) is highest.
//!
//! Every tie resolves to the lowest candidate index.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Tokens, Vocabulary};

#[derive(Debug, Error)]
pub enum LatentError {
    #[error("{clusters} clusters requested from {distinct} distinct points")]
    InsufficientPoints { clusters: usize, distinct: usize },
    #[error("{requested} candidates requested but only {available} distinct sequences exist")]
    InsufficientCandidates { requested: usize, available: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Maps a token sequence into a fixed-dimension real vector.
pub trait SentenceEncoder: Sync {
    fn dim(&self) -> usize;
    fn encode(&self, tokens: &[String]) -> Vec<f64>;
}

/// L2-normalised bag-of-words counts over a vocabulary (OOV counts as UNK).
#[derive(Debug, Clone)]
pub struct BagOfWordsEncoder {
    vocab: Vocabulary,
}

impl BagOfWordsEncoder {
    pub fn new(vocab: Vocabulary) -> Self {
        Self { vocab }
    }
}

impl SentenceEncoder for BagOfWordsEncoder {
    fn dim(&self) -> usize {
        self.vocab.len()
    }

    fn encode(&self, tokens: &[String]) -> Vec<f64> {
        let mut v = vec![0.0; self.vocab.len()];
        let unk = self.vocab.specials().unk;
        for t in tokens {
            v[self.vocab.id(t).unwrap_or(unk)] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row of `centers` (lowest index on ties) and its
/// squared distance.
fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Within-cluster sum of squares after every assignment step.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn sse(&self) -> f64 {
        self.sse_history.last().copied().unwrap_or(0.0)
    }
}

/// Lloyd's algorithm with k-means++ seeding. An empty cluster keeps its
/// previous centroid.
pub fn kmeans(points: &[Vec<f64>], clusters: usize, max_iters: usize, seed: u64) -> Result<KMeansResult, LatentError> {
    if clusters == 0 {
        return Err(LatentError::InvalidArgument("at least one cluster is required".into()));
    }
    let dim = points.first().map_or(0, Vec::len);
    if points.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
        return Err(LatentError::InvalidArgument("points must share one dimension and be finite".into()));
    }
    let distinct: HashSet<Vec<u64>> = points.iter().map(|p| p.iter().map(|v| v.to_bits()).collect()).collect();
    if clusters > distinct.len() {
        return Err(LatentError::InsufficientPoints {
            clusters,
            distinct: distinct.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centroids[0])).collect();
    while centroids.len() < clusters {
        let total: f64 = d2.iter().sum();
        let mut target = rng.gen::<f64>() * total;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            pick = Some(i);
            if target < w {
                break;
            }
            target -= w;
        }
        let c = points[pick.expect("a point at positive distance exists")].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &c));
        }
        centroids.push(c);
    }

    let assign = |centroids: &[Vec<f64>]| -> (Vec<usize>, f64) {
        let near: Vec<(usize, f64)> = points.par_iter().map(|p| nearest(p, centroids)).collect();
        let sse = near.iter().map(|&(_, d)| d).sum();
        (near.into_iter().map(|(i, _)| i).collect(), sse)
    };

    let mut assignment: Vec<usize> = Vec::new();
    let mut sse_history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters.max(1) {
        let (next, sse) = assign(&centroids);
        sse_history.push(sse);
        iterations += 1;
        if next == assignment {
            converged = true;
            break;
        }
        assignment = next;
        let mut sums = vec![vec![0.0; dim]; clusters];
        let mut counts = vec![0usize; clusters];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                *c = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
    }
    if !converged {
        let (last, sse) = assign(&centroids);
        sse_history.push(sse);
        assignment = last;
    }
    Ok(KMeansResult {
        centroids,
        assignment,
        sse_history,
        iterations,
    })
}

/// Candidate latent sentences, grouped by cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceCandidateSet {
    pub entries: Vec<Tokens>,
    pub encodings: Vec<Vec<f64>>,
    pub cluster_of: Vec<usize>,
}

impl SentenceCandidateSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (idx, (tokens, &cluster)) in self.entries.iter().zip(&self.cluster_of).enumerate() {
            let rec = SentenceRecord {
                idx,
                tokens: tokens.clone(),
                cluster: Some(cluster),
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Reads a candidate file, re-encoding every entry with `encoder`.
    pub fn from_jsonl(text: &str, encoder: &dyn SentenceEncoder) -> Result<Self, LatentError> {
        let mut entries = Vec::new();
        let mut cluster_of = Vec::new();
        for (line, rec) in parse_indexed::<SentenceRecord>(text)? {
            if rec.idx != entries.len() {
                return Err(LatentError::Parse {
                    line,
                    message: format!("expected idx {}, found {}", entries.len(), rec.idx),
                });
            }
            entries.push(rec.tokens);
            cluster_of.push(rec.cluster.unwrap_or(0));
        }
        let encodings = entries.iter().map(|e| encoder.encode(e)).collect();
        Ok(Self {
            entries,
            encodings,
            cluster_of,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SentenceRecord {
    idx: usize,
    tokens: Tokens,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cluster: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PosRecord {
    idx: usize,
    pos: Tokens,
    #[serde(default)]
    count: usize,
}

fn parse_indexed<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<(usize, T)>, LatentError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map(|r| (i + 1, r)).map_err(|e| LatentError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Parameters for [`build_sentence_candidates`].
#[derive(Debug, Clone, Copy)]
pub struct SentenceCandidateConfig {
    pub clusters: usize,
    pub size: usize,
    pub max_iters: usize,
    pub seed: u64,
}

/// Clusters the distinct responses and takes, from each cluster, the members
/// nearest its centroid.
///
/// Each cluster's quota is `size / clusters`; the remainder goes one apiece
/// to the largest clusters. A cluster smaller than its quota gives its unused
/// share to the largest clusters that still have members left.
pub fn build_sentence_candidates(
    responses: &[Tokens],
    encoder: &dyn SentenceEncoder,
    cfg: SentenceCandidateConfig,
) -> Result<SentenceCandidateSet, LatentError> {
    if cfg.size == 0 || cfg.clusters == 0 {
        return Err(LatentError::InvalidArgument("candidate and cluster counts must be positive".into()));
    }
    if cfg.clusters > cfg.size {
        return Err(LatentError::InvalidArgument(format!(
            "{} clusters cannot share {} candidates",
            cfg.clusters, cfg.size
        )));
    }
    let mut seen = HashSet::new();
    let distinct: Vec<&Tokens> = responses.iter().filter(|r| seen.insert(*r)).collect();
    if distinct.len() < cfg.size {
        return Err(LatentError::InsufficientCandidates {
            requested: cfg.size,
            available: distinct.len(),
        });
    }
    let encodings: Vec<Vec<f64>> = distinct.par_iter().map(|r| encoder.encode(r)).collect();
    let km = kmeans(&encodings, cfg.clusters, cfg.max_iters, cfg.seed)?;

    let mut members: Vec<Vec<(f64, usize)>> = vec![Vec::new(); cfg.clusters];
    for (i, (&c, e)) in km.assignment.iter().zip(&encodings).enumerate() {
        members[c].push((squared_distance(e, &km.centroids[c]), i));
    }
    for m in &mut members {
        m.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    }

    let mut by_size: Vec<usize> = (0..cfg.clusters).collect();
    by_size.sort_by(|&a, &b| members[b].len().cmp(&members[a].len()).then(a.cmp(&b)));
    let mut quota = vec![cfg.size / cfg.clusters; cfg.clusters];
    for &c in by_size.iter().take(cfg.size % cfg.clusters) {
        quota[c] += 1;
    }
    let mut shortfall = 0;
    for (q, m) in quota.iter_mut().zip(&members) {
        if *q > m.len() {
            shortfall += *q - m.len();
            *q = m.len();
        }
    }
    while shortfall > 0 {
        for &c in &by_size {
            if shortfall > 0 && quota[c] < members[c].len() {
                quota[c] += 1;
                shortfall -= 1;
            }
        }
    }

    let mut out = SentenceCandidateSet {
        entries: Vec::with_capacity(cfg.size),
        encodings: Vec::with_capacity(cfg.size),
        cluster_of: Vec::with_capacity(cfg.size),
    };
    for (c, m) in members.iter().enumerate() {
        for &(_, i) in m.iter().take(quota[c]) {
            out.entries.push(distinct[i].clone());
            out.encodings.push(encodings[i].clone());
            out.cluster_of.push(c);
        }
    }
    Ok(out)
}

/// Candidate index with the smallest Euclidean distance to `encoding`.
pub fn nearest_sentence_label(encoding: &[f64], cands: &SentenceCandidateSet) -> usize {
    nearest(encoding, &cands.encodings).0
}

/// Linear-gap global alignment scoring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignScoring {
    pub matched: f64,
    pub mismatch: f64,
    pub gap: f64,
}

impl Default for AlignScoring {
    fn default() -> Self {
        Self {
            matched: 1.0,
            mismatch: 0.0,
            gap: 0.0,
        }
    }
}

/// Needleman–Wunsch global alignment score.
pub fn align_score<T: PartialEq>(a: &[T], b: &[T], scoring: AlignScoring) -> Result<f64, LatentError> {
    if a.is_empty() || b.is_empty() {
        return Err(LatentError::EmptyInput);
    }
    let m = b.len();
    let mut prev: Vec<f64> = (0..=m).map(|j| j as f64 * scoring.gap).collect();
    let mut cur = vec![0.0; m + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = (i + 1) as f64 * scoring.gap;
        for (j, y) in b.iter().enumerate() {
            let sub = if x == y { scoring.matched } else { scoring.mismatch };
            cur[j + 1] = (prev[j] + sub).max(prev[j + 1] + scoring.gap).max(cur[j] + scoring.gap);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// Alignment score divided by the longer of the two lengths.
pub fn normalized_align_score<T: PartialEq>(a: &[T], b: &[T], scoring: AlignScoring) -> Result<f64, LatentError> {
    Ok(align_score(a, b, scoring)? / a.len().max(b.len()) as f64)
}

/// Candidate POS sequences ordered by descending corpus frequency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PosCandidateSet {
    pub entries: Vec<Tokens>,
    pub frequency: Vec<usize>,
}

impl PosCandidateSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (idx, (pos, &count)) in self.entries.iter().zip(&self.frequency).enumerate() {
            let rec = PosRecord {
                idx,
                pos: pos.clone(),
                count,
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, LatentError> {
        let mut out = PosCandidateSet {
            entries: Vec::new(),
            frequency: Vec::new(),
        };
        for (line, rec) in parse_indexed::<PosRecord>(text)? {
            if rec.idx != out.entries.len() {
                return Err(LatentError::Parse {
                    line,
                    message: format!("expected idx {}, found {}", out.entries.len(), rec.idx),
                });
            }
            if rec.pos.is_empty() {
                return Err(LatentError::Parse {
                    line,
                    message: "empty POS sequence".into(),
                });
            }
            out.entries.push(rec.pos);
            out.frequency.push(rec.count);
        }
        Ok(out)
    }
}

/// The `size` most frequent distinct sequences; ties keep first-occurrence
/// order.
pub fn build_pos_candidates<'a, I>(sequences: I, size: usize) -> Result<PosCandidateSet, LatentError>
where
    I: IntoIterator<Item = &'a Tokens>,
{
    let mut counts: HashMap<&Tokens, (usize, usize)> = HashMap::new();
    for (i, s) in sequences.into_iter().enumerate() {
        counts.entry(s).or_insert((0, i)).0 += 1;
    }
    if counts.len() < size {
        return Err(LatentError::InsufficientCandidates {
            requested: size,
            available: counts.len(),
        });
    }
    let mut ranked: Vec<(&Tokens, usize, usize)> = counts.into_iter().map(|(s, (c, first))| (s, c, first)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    ranked.truncate(size);
    Ok(PosCandidateSet {
        entries: ranked.iter().map(|(s, _, _)| (*s).clone()).collect(),
        frequency: ranked.iter().map(|&(_, c, _)| c).collect(),
    })
}

/// Candidate with the highest length-normalised alignment score.
pub fn nearest_pos_label(pos: &[String], cands: &PosCandidateSet, scoring: AlignScoring) -> Result<usize, LatentError> {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in cands.entries.iter().enumerate() {
        let s = normalized_align_score(pos, c, scoring)?;
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub pair_idx: usize,
    pub response_idx: usize,
    pub label: usize,
}

#[derive(Clone, Copy)]
pub enum LabelSource<'a> {
    Sentence {
        candidates: &'a SentenceCandidateSet,
        encoder: &'a dyn SentenceEncoder,
    },
    Pos {
        candidates: &'a PosCandidateSet,
        scoring: AlignScoring,
    },
}

/// One labelled example per `(post, response)` in corpus order.
pub fn label_dataset(corpus: &Corpus, source: LabelSource<'_>) -> Result<Vec<LabeledExample>, LatentError> {
    let slots: Vec<(usize, usize)> = corpus
        .pairs
        .iter()
        .enumerate()
        .flat_map(|(p, pair)| (0..pair.responses.len()).map(move |r| (p, r)))
        .collect();
    slots
        .par_iter()
        .map(|&(p, r)| {
            let pair = &corpus.pairs[p];
            let label = match source {
                LabelSource::Sentence { candidates, encoder } => nearest_sentence_label(&encoder.encode(&pair.responses[r]), candidates),
                LabelSource::Pos { candidates, scoring } => nearest_pos_label(&pair.response_pos[r], candidates, scoring)?,
            };
            Ok(LabeledExample {
                pair_idx: p,
                response_idx: r,
                label,
            })
        })
        .collect()
}

/// Tab-separated `pair_id, response_idx, label`, one example per line.
pub fn labels_to_tsv(labels: &[LabeledExample]) -> String {
    let mut out = String::new();
    for l in labels {
        writeln!(out, "{}\t{}\t{}", l.pair_idx, l.response_idx, l.label).expect("write to string");
    }
    out
}

pub fn labels_from_tsv(text: &str) -> Result<Vec<LabeledExample>, LatentError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let err = |message: String| LatentError::Parse { line: i + 1, message };
            let fields: Vec<&str> = l.split('\t').collect();
            if fields.len() != 3 {
                return Err(err(format!("expected 3 fields, found {}", fields.len())));
            }
            let num = |s: &str| s.trim().parse::<usize>().map_err(|e| err(e.to_string()));
            Ok(LabeledExample {
                pair_idx: num(fields[0])?,
                response_idx: num(fields[1])?,
                label: num(fields[2])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DialoguePair, PosTagSet, Split};
    use proptest::prelude::*;

    fn toks(s: &str) -> Tokens {
        s.split_whitespace().map(str::to_owned).collect()
    }

    /// Minimum within-cluster SSE over every assignment into `k` non-empty
    /// clusters, by enumeration.
    fn brute_force_partition(points: &[Vec<f64>], k: usize) -> (f64, Vec<usize>) {
        let n = points.len();
        let mut best = (f64::INFINITY, Vec::new());
        let total = k.pow(n as u32);
        for code in 0..total {
            let mut labels = Vec::with_capacity(n);
            let mut c = code;
            for _ in 0..n {
                labels.push(c % k);
                c /= k;
            }
            if (0..k).any(|j| !labels.contains(&j)) {
                continue;
            }
            let mut sse = 0.0;
            for j in 0..k {
                let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == j).map(|(p, _)| p).collect();
                let dim = members[0].len();
                let mean: Vec<f64> = (0..dim)
                    .map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64)
                    .collect();
                sse += members.iter().map(|p| squared_distance(p, &mean)).sum::<f64>();
            }
            if sse < best.0 {
                best = (sse, labels);
            }
        }
        best
    }

    #[test]
    fn kmeans_degenerate_single_cluster() {
        let pts = vec![vec![2.0, 3.0]; 5];
        let km = kmeans(&pts, 1, 10, 0).unwrap();
        assert_eq!(km.centroids, vec![vec![2.0, 3.0]]);
        assert!(km.assignment.iter().all(|&a| a == 0));
    }

    #[test]
    fn kmeans_two_clusters_match_partition_oracle() {
        let pts = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 0.0], vec![10.0, 1.0]];
        let (best_sse, labels) = brute_force_partition(&pts, 2);
        assert_eq!(best_sse, 1.0);
        assert_eq!(labels[0], labels[1]);
        assert_eq!(labels[2], labels[3]);
        for seed in 0..5 {
            let km = kmeans(&pts, 2, 50, seed).unwrap();
            assert!((km.sse() - best_sse).abs() < 1e-12, "seed {seed}: {km:?}");
            let mut cents = km.centroids.clone();
            cents.sort_by(|a, b| a[0].total_cmp(&b[0]));
            assert_eq!(cents, vec![vec![0.0, 0.5], vec![10.0, 0.5]]);
        }
    }

    #[test]
    fn kmeans_needs_enough_distinct_points() {
        let pts = vec![vec![0.0], vec![1.0], vec![1.0]];
        assert!(matches!(
            kmeans(&pts, 3, 10, 0),
            Err(LatentError::InsufficientPoints { clusters: 3, distinct: 2 })
        ));
    }

    fn one_hot_encoder() -> BagOfWordsEncoder {
        BagOfWordsEncoder::new(Vocabulary::from_tokens(toks("a b c d e f")).unwrap())
    }

    #[test]
    fn sentence_candidates_exhaustive_selection() {
        let resp = vec![toks("a a"), toks("a b"), toks("e f"), toks("f f"), toks("a a")];
        let enc = one_hot_encoder();
        let cfg = SentenceCandidateConfig {
            clusters: 2,
            size: 4,
            max_iters: 20,
            seed: 7,
        };
        let set = build_sentence_candidates(&resp, &enc, cfg).unwrap();
        assert_eq!(set.len(), 4);
        let distinct: HashSet<&Tokens> = set.entries.iter().collect();
        assert_eq!(distinct.len(), 4);
        for c in 0..2 {
            assert_eq!(set.cluster_of.iter().filter(|&&x| x == c).count(), 2);
        }
        assert!(set.cluster_of.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn sentence_candidates_need_enough_responses() {
        let resp = vec![toks("a"), toks("b"), toks("c")];
        let cfg = SentenceCandidateConfig {
            clusters: 2,
            size: 4,
            max_iters: 20,
            seed: 0,
        };
        assert!(matches!(
            build_sentence_candidates(&resp, &one_hot_encoder(), cfg),
            Err(LatentError::InsufficientCandidates {
                requested: 4,
                available: 3
            })
        ));
    }

    #[test]
    fn unequal_clusters_still_fill_the_quota() {
        // one tight cluster of 5, one outlier: quota 3+3 becomes 5+1
        let resp: Vec<Tokens> = ["a", "a a b", "a b", "a a a b", "a b b", "f"].iter().map(|s| toks(s)).collect();
        let cfg = SentenceCandidateConfig {
            clusters: 2,
            size: 6,
            max_iters: 50,
            seed: 3,
        };
        let set = build_sentence_candidates(&resp, &one_hot_encoder(), cfg).unwrap();
        assert_eq!(set.len(), 6);
    }

    fn sentence_set(encodings: Vec<Vec<f64>>) -> SentenceCandidateSet {
        SentenceCandidateSet {
            entries: (0..encodings.len()).map(|i| vec![i.to_string()]).collect(),
            cluster_of: vec![0; encodings.len()],
            encodings,
        }
    }

    #[test]
    fn nearest_sentence_cases() {
        let set = sentence_set(vec![vec![0.0], vec![5.0]]);
        assert_eq!(nearest_sentence_label(&[1.0], &set), 0);
        assert_eq!(nearest_sentence_label(&[5.0], &set), 1);
        assert_eq!(nearest_sentence_label(&[2.5], &set), 0);
    }

    #[test]
    fn alignment_hand_cases() {
        let s = AlignScoring::default();
        assert_eq!(align_score(&toks("n v n"), &toks("n v n"), s).unwrap(), 3.0);
        assert_eq!(align_score(&toks("n v"), &toks("n"), s).unwrap(), 1.0);
        assert_eq!(align_score(&toks("n"), &toks("v"), s).unwrap(), 0.0);
        assert!(matches!(align_score::<String>(&[], &toks("n"), s), Err(LatentError::EmptyInput)));
        let strict = AlignScoring {
            matched: 2.0,
            mismatch: -1.0,
            gap: -2.0,
        };
        // n-v / n-- : 2 - 2 = 0 ; best alternative also 0
        assert_eq!(align_score(&toks("n v"), &toks("n"), strict).unwrap(), 0.0);
    }

    #[test]
    fn nearest_pos_cases() {
        let s = AlignScoring::default();
        let cands = PosCandidateSet {
            entries: vec![toks("n"), toks("n v adj")],
            frequency: vec![2, 1],
        };
        assert_eq!(nearest_pos_label(&toks("n v"), &cands, s).unwrap(), 1);
        assert_eq!(nearest_pos_label(&toks("n"), &cands, s).unwrap(), 0);
        let flat = PosCandidateSet {
            entries: vec![toks("a"), toks("b")],
            frequency: vec![1, 1],
        };
        assert_eq!(nearest_pos_label(&toks("c"), &flat, s).unwrap(), 0);
    }

    #[test]
    fn pos_candidates_by_frequency() {
        let seqs = vec![toks("n v"), toks("n"), toks("n v"), toks("n v")];
        let c = build_pos_candidates(&seqs, 1).unwrap();
        assert_eq!(c.entries, vec![toks("n v")]);
        assert_eq!(c.frequency, vec![3]);
        let c = build_pos_candidates(&seqs, 2).unwrap();
        assert_eq!(c.entries[1], toks("n"));
        assert!(matches!(
            build_pos_candidates(&seqs, 3),
            Err(LatentError::InsufficientCandidates {
                requested: 3,
                available: 2
            })
        ));
        // frequency ties keep first occurrence
        let tied = vec![toks("b"), toks("a"), toks("a"), toks("b")];
        assert_eq!(build_pos_candidates(&tied, 2).unwrap().entries, vec![toks("b"), toks("a")]);
    }

    fn corpus(pairs: Vec<DialoguePair>) -> Corpus {
        Corpus {
            pairs,
            vocabulary: Vocabulary::from_tokens(toks("a b c d e f")).unwrap(),
            tagset: PosTagSet::new(toks("n v x")).unwrap(),
            split: Split::Train,
        }
    }

    #[test]
    fn self_labeling_and_empty_corpus() {
        let pairs = vec![
            DialoguePair::new(toks("p"), vec![toks("a b"), toks("e")], vec![toks("n v"), toks("n")]).unwrap(),
            DialoguePair::new(toks("q"), vec![toks("f f")], vec![toks("v v")]).unwrap(),
        ];
        let c = corpus(pairs);
        let enc = one_hot_encoder();
        let sc = SentenceCandidateSet {
            entries: c.responses().cloned().collect(),
            encodings: c.responses().map(|r| enc.encode(r)).collect(),
            cluster_of: vec![0; 3],
        };
        let labels = label_dataset(
            &c,
            LabelSource::Sentence {
                candidates: &sc,
                encoder: &enc,
            },
        )
        .unwrap();
        assert_eq!(labels.iter().map(|l| l.label).collect::<Vec<_>>(), vec![0, 1, 2]);

        let pc = build_pos_candidates(c.response_pos(), 3).unwrap();
        let labels = label_dataset(
            &c,
            LabelSource::Pos {
                candidates: &pc,
                scoring: AlignScoring::default(),
            },
        )
        .unwrap();
        for l in &labels {
            assert_eq!(pc.entries[l.label], c.pairs[l.pair_idx].response_pos[l.response_idx]);
        }

        let empty = corpus(Vec::new());
        assert!(label_dataset(
            &empty,
            LabelSource::Pos {
                candidates: &pc,
                scoring: AlignScoring::default()
            }
        )
        .unwrap()
        .is_empty());
    }

    #[test]
    fn single_pair_label_matches_linear_scan() {
        let c = corpus(vec![DialoguePair::new(toks("p"), vec![toks("a b c")], vec![toks("n v n")]).unwrap()]);
        let enc = one_hot_encoder();
        let cands = vec![toks("a d"), toks("b c")];
        let sc = SentenceCandidateSet {
            encodings: cands.iter().map(|r| enc.encode(r)).collect(),
            entries: cands,
            cluster_of: vec![0, 0],
        };
        let got = label_dataset(
            &c,
            LabelSource::Sentence {
                candidates: &sc,
                encoder: &enc,
            },
        )
        .unwrap();
        // oracle: |(1,1,1)/√3 - (1,0,0,1)/√2|² vs |(1,1,1)/√3 - (0,1,1)/√2|²
        let r = 1.0 / 3f64.sqrt();
        let h = 1.0 / 2f64.sqrt();
        let d0 = (r - h).powi(2) + r * r + r * r + h * h;
        let d1 = r * r + 2.0 * (r - h).powi(2);
        assert!(d1 < d0);
        assert_eq!(got[0].label, 1);
    }

    #[test]
    fn file_formats_round_trip() {
        let pc = PosCandidateSet {
            entries: vec![toks("n v"), toks("n")],
            frequency: vec![3, 1],
        };
        assert_eq!(PosCandidateSet::from_jsonl(&pc.to_jsonl()).unwrap(), pc);
        let enc = one_hot_encoder();
        let sc = SentenceCandidateSet {
            entries: vec![toks("a b"), toks("c")],
            encodings: vec![enc.encode(&toks("a b")), enc.encode(&toks("c"))],
            cluster_of: vec![0, 1],
        };
        assert_eq!(SentenceCandidateSet::from_jsonl(&sc.to_jsonl(), &enc).unwrap(), sc);
        let labels = vec![
            LabeledExample {
                pair_idx: 0,
                response_idx: 1,
                label: 3,
            },
            LabeledExample {
                pair_idx: 2,
                response_idx: 0,
                label: 0,
            },
        ];
        assert_eq!(labels_from_tsv(&labels_to_tsv(&labels)).unwrap(), labels);
        assert!(labels_from_tsv("1\t2\n").is_err());
        assert!(PosCandidateSet::from_jsonl("{\"idx\":1,\"pos\":[\"n\"]}\n").is_err());
    }

    fn tag_seq() -> impl Strategy<Value = Tokens> {
        proptest::collection::vec(
            prop_oneof![Just("n".to_string()), Just("v".to_string()), Just("a".to_string())],
            1..7,
        )
    }

    proptest! {
        #[test]
        fn alignment_invariants(a in tag_seq(), b in tag_seq()) {
            let s = AlignScoring::default();
            let ab = align_score(&a, &b, s).unwrap();
            prop_assert_eq!(ab, align_score(&b, &a, s).unwrap());
            prop_assert_eq!(align_score(&a, &a, s).unwrap(), a.len() as f64);
            prop_assert!(ab >= 0.0 && ab <= a.len().min(b.len()) as f64);
        }

        #[test]
        fn kmeans_sse_monotone_and_assignment_nearest(
            pts in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 2), 4..30),
            k in 1usize..4,
            seed in 0u64..1000,
        ) {
            let km = kmeans(&pts, k, 25, seed).unwrap();
            for w in km.sse_history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9);
            }
            for (p, &a) in pts.iter().zip(&km.assignment) {
                prop_assert_eq!(nearest(p, &km.centroids).0, a);
            }
        }

        #[test]
        fn nearest_labels_match_exhaustive_scan(
            query in tag_seq(),
            cands in proptest::collection::vec(tag_seq(), 1..6),
            enc in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 3), 1..6),
            point in proptest::collection::vec(-3.0f64..3.0, 3),
        ) {
            let s = AlignScoring::default();
            let set = PosCandidateSet { frequency: vec![1; cands.len()], entries: cands.clone() };
            let mut best = 0;
            for i in 1..cands.len() {
                let score = |c: &Tokens| align_score(&query, c, s).unwrap() / query.len().max(c.len()) as f64;
                if score(&cands[i]) > score(&cands[best]) {
                    best = i;
                }
            }
            prop_assert_eq!(nearest_pos_label(&query, &set, s).unwrap(), best);

            let sset = sentence_set(enc.clone());
            let dists: Vec<f64> = enc.iter().map(|e| e.iter().zip(&point).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).collect();
            let mut best = 0;
            for i in 1..dists.len() {
                if dists[i] < dists[best] {
                    best = i;
                }
            }
            prop_assert_eq!(nearest_sentence_label(&point, &sset), best);
        }

        #[test]
        fn pos_candidate_frequencies_non_increasing(seqs in proptest::collection::vec(tag_seq(), 1..40)) {
            let distinct: HashSet<&Tokens> = seqs.iter().collect();
            let c = build_pos_candidates(&seqs, distinct.len()).unwrap();
            prop_assert!(c.frequency.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(c.frequency.iter().sum::<usize>() <= seqs.len());
        }
    }
}
