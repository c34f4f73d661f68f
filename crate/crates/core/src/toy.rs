//! Small synthetic corpus with controlled POS patterns.
//!
//! Fifty posts `[opener, adj, noun, verb]`, two responses each. Half of
//! the posts answer with one of four frequent patterns plus a rare variant
//! of it, reusing the post's words; the other half answer with pairs of
//! rarer patterns built from other words and a shared filler tail. The four frequent patterns are
//! the top POS candidates, both responses of a bag align best to the same
//! candidate, and the opener names that candidate.

use crate::corpus::{build_vocabulary, Corpus, DialoguePair, PosTagSet, Split, TokenScheme, Tokens, FALLBACK_TAG};

const ADJS: [&str; 10] = ["red", "big", "old", "new", "soft", "loud", "warm", "dark", "fast", "calm"];
const NOUNS: [&str; 10] = ["cat", "car", "tree", "song", "house", "river", "book", "road", "cake", "lamp"];
const VERBS: [&str; 10] = [
    "runs", "sings", "falls", "shines", "moves", "waits", "grows", "turns", "rests", "glows",
];

const FREQUENT: usize = 4;
const RARE: usize = 5;
/// One opener per frequent pattern.
const OPENERS: [&str; FREQUENT] = ["describe", "who", "what", "how"];
/// Frequent pattern each rare family aligns to.
const RARE_LABEL: [usize; RARE] = [1, 2, 0, 3, 2];

pub const NUM_PAIRS: usize = 50;

struct Words {
    adj: &'static str,
    noun: &'static str,
    verb: &'static str,
    other_adj: &'static str,
    other_noun: &'static str,
    other_verb: &'static str,
}

fn w(word: &str, tag: &str) -> (String, String) {
    (word.to_string(), tag.to_string())
}

fn frequent(family: usize, x: &Words) -> Vec<(String, String)> {
    match family {
        0 => vec![w(x.adj, "a"), w(x.noun, "n")],
        1 => vec![w(x.noun, "n"), w(x.verb, "v")],
        2 => vec![w("i", "p"), w(x.verb, "v"), w(x.noun, "n")],
        _ => vec![w("very", "r"), w(x.adj, "a")],
    }
}

fn variant(base: Vec<(String, String)>, which: usize) -> Vec<(String, String)> {
    match which {
        0 => std::iter::once(w("oh", "u")).chain(base).collect(),
        1 => base.into_iter().chain([w("!", "e")]).collect(),
        _ => base.into_iter().chain([w("?", "q")]).collect(),
    }
}

/// Filler closing every rare response; its tag occurs in no frequent pattern.
const TAIL: [&str; 3] = ["today", "for", "sure"];

fn rare(family: usize, x: &Words) -> [Vec<(String, String)>; 2] {
    rare_core(family, x).map(|r| r.into_iter().chain(TAIL.iter().map(|t| w(t, "x"))).collect())
}

fn rare_core(family: usize, x: &Words) -> [Vec<(String, String)>; 2] {
    let (a, n, v) = (x.other_adj, x.other_noun, x.other_verb);
    match family {
        0 => [
            vec![w("the", "d"), w(n, "n"), w(v, "v")],
            vec![w("the", "d"), w(n, "n"), w(v, "v"), w("well", "r")],
        ],
        1 => [
            vec![w("i", "p"), w(v, "v"), w("the", "d"), w(n, "n")],
            vec![w("i", "p"), w(v, "v"), w(a, "a"), w(n, "n")],
        ],
        2 => [
            vec![w("the", "d"), w(a, "a"), w(n, "n")],
            vec![w(a, "a"), w(n, "n"), w("and", "c"), w("more", "n")],
        ],
        3 => [
            vec![w("so", "r"), w("very", "r"), w(a, "a")],
            vec![w("the", "d"), w("very", "r"), w(a, "a")],
        ],
        _ => [vec![w("i", "p"), w(v, "v")], vec![w("i", "p"), w("really", "r"), w(v, "v")]],
    }
}

fn split(tagged: Vec<(String, String)>) -> (Tokens, Tokens) {
    tagged.into_iter().unzip()
}

/// Scatters the two halves over the posts so that no single post word
/// tells them apart.
fn slot(i: usize) -> usize {
    (i * 17) % NUM_PAIRS
}

/// Family of pair `i`: `0..4` frequent, `4..9` rare.
pub fn family(i: usize) -> usize {
    let s = slot(i);
    if s < NUM_PAIRS / 2 {
        s % FREQUENT
    } else {
        FREQUENT + (s - NUM_PAIRS / 2) % RARE
    }
}

/// Frequent pattern that both responses of pair `i` align to.
pub fn label(i: usize) -> usize {
    match family(i) {
        f if f < FREQUENT => f,
        f => RARE_LABEL[f - FREQUENT],
    }
}

pub fn toy_pairs() -> Vec<DialoguePair> {
    (0..NUM_PAIRS)
        .map(|i| {
            let x = Words {
                adj: ADJS[i % 10],
                noun: NOUNS[i / 5],
                verb: VERBS[(i * 7) % 10],
                other_adj: ADJS[(i + 5) % 10],
                other_noun: NOUNS[(i / 5 + 3) % 10],
                other_verb: VERBS[(i * 7 + 3) % 10],
            };
            let f = family(i);
            let post: Tokens = [OPENERS[label(i)], x.adj, x.noun, x.verb].iter().map(|s| s.to_string()).collect();
            let bag = if f < FREQUENT {
                let base = frequent(f, &x);
                [base.clone(), variant(base, (slot(i) / FREQUENT) % 3)]
            } else {
                rare(f - FREQUENT, &x)
            };
            let (r0, p0) = split(bag[0].clone());
            let (r1, p1) = split(bag[1].clone());
            DialoguePair::new(post, vec![r0, r1], vec![p0, p1]).expect("well-formed toy pair")
        })
        .collect()
}

pub fn toy_corpus() -> Corpus {
    let pairs = toy_pairs();
    let stream = pairs.iter().flat_map(|p| p.post.iter().chain(p.responses.iter().flatten()));
    let vocabulary = build_vocabulary(stream, 1000, 1).expect("toy vocabulary");
    let mut tags: Vec<String> = pairs
        .iter()
        .flat_map(|p| p.response_pos.iter().flatten().cloned())
        .chain([FALLBACK_TAG.to_string()])
        .collect();
    tags.sort();
    tags.dedup();
    Corpus {
        pairs,
        vocabulary,
        tagset: PosTagSet::new(tags).expect("toy tag set"),
        split: Split::Train,
    }
}

/// The toy corpus in the JSONL corpus format.
pub fn toy_jsonl() -> String {
    toy_corpus().to_jsonl(TokenScheme::Whitespace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_corpus, LoadOptions};
    use crate::latentspace::{build_pos_candidates, nearest_pos_label, AlignScoring};
    use std::collections::HashSet;

    #[test]
    fn posts_are_distinct_and_bags_unambiguous() {
        let pairs = toy_pairs();
        let posts: HashSet<_> = pairs.iter().map(|p| p.post.clone()).collect();
        assert_eq!(posts.len(), NUM_PAIRS);
        for p in &pairs {
            assert_eq!(p.responses.len(), 2);
            assert_ne!(p.response_pos[0], p.response_pos[1]);
        }
    }

    #[test]
    fn frequent_patterns_are_the_candidates_and_bags_share_labels() {
        let corpus = toy_corpus();
        let cands = build_pos_candidates(corpus.response_pos(), FREQUENT).unwrap();
        let expected: HashSet<Tokens> = (0..NUM_PAIRS)
            .filter(|&i| family(i) < FREQUENT)
            .map(|i| corpus.pairs[i].response_pos[0].clone())
            .collect();
        assert_eq!(cands.entries.iter().cloned().collect::<HashSet<_>>(), expected);
        assert!(cands.frequency.iter().all(|&c| c > RARE));
        let mut rare_hits = 0;
        for p in &corpus.pairs {
            let labels: Vec<usize> = p
                .response_pos
                .iter()
                .map(|pos| nearest_pos_label(pos, &cands, AlignScoring::default()).unwrap())
                .collect();
            assert_eq!(labels[0], labels[1], "{:?}", p.response_pos);
            if !cands.entries.contains(&p.response_pos[0]) && !cands.entries.contains(&p.response_pos[1]) {
                rare_hits += 1;
            }
        }
        assert_eq!(rare_hits, NUM_PAIRS / 2);
    }

    #[test]
    fn opener_names_the_aligned_candidate() {
        let corpus = toy_corpus();
        let cands = build_pos_candidates(corpus.response_pos(), FREQUENT).unwrap();
        for (i, p) in corpus.pairs.iter().enumerate() {
            let l = nearest_pos_label(&p.response_pos[0], &cands, AlignScoring::default()).unwrap();
            let exemplar = (0..NUM_PAIRS).find(|&j| family(j) == label(i)).unwrap();
            assert_eq!(cands.entries[l], corpus.pairs[exemplar].response_pos[0]);
            assert_eq!(p.post[0], OPENERS[label(i)]);
        }
    }

    #[test]
    fn jsonl_round_trips() {
        let corpus = toy_corpus();
        let back = parse_corpus(toy_jsonl().as_bytes(), &LoadOptions::default()).unwrap();
        assert_eq!(back.pairs, corpus.pairs);
        assert_eq!(back.vocabulary, corpus.vocabulary);
        assert_eq!(back.tagset, corpus.tagset);
    }
}
