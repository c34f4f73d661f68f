//! Tokenized multi-reference dialogue corpora.
//!
//! A corpus file is JSON Lines with one `(post, response)` record per line:
//!
//! ```text
//! {"post": "...", "response": "...", "response_pos": "n v ..."}
//! ```
//!
//! `response_pos` is optional. Records whose post strings are identical are
//! merged into a single [`DialoguePair`] holding the whole bag of responses.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("input is empty after normalization")]
    EmptyInput,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("tag `{0}` is not in the tag set")]
    TagsetViolation(String),
    #[error("tagger returned {got} tags for {expected} tokens")]
    LengthViolation { expected: usize, got: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Tokens = Vec<String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenScheme {
    #[default]
    Whitespace,
    Char,
}

impl TokenScheme {
    pub fn separator(self) -> &'static str {
        match self {
            TokenScheme::Whitespace => " ",
            TokenScheme::Char => "",
        }
    }
}

/// Splits `text` into tokens. Whitespace is never part of a token, so the
/// char scheme drops it as well.
pub fn tokenize(text: &str, scheme: TokenScheme) -> Result<Tokens, CorpusError> {
    let tokens: Tokens = match scheme {
        TokenScheme::Whitespace => text.split_whitespace().map(str::to_owned).collect(),
        TokenScheme::Char => text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
    };
    if tokens.is_empty() {
        return Err(CorpusError::EmptyInput);
    }
    Ok(tokens)
}

pub fn join_tokens(tokens: &[String], scheme: TokenScheme) -> String {
    tokens.join(scheme.separator())
}

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

/// Ids of the reserved tokens, which always occupy the first slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Specials {
    pub pad: usize,
    pub bos: usize,
    pub eos: usize,
    pub unk: usize,
}

pub const SPECIALS: Specials = Specials {
    pad: 0,
    bos: 1,
    eos: 2,
    unk: 3,
};

pub const NUM_SPECIALS: usize = 4;

/// Word vocabulary: reserved tokens first, then corpus tokens by rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn specials_only() -> Self {
        Self::from_tokens(Vec::new()).expect("reserved tokens are distinct")
    }

    /// Builds a vocabulary from non-reserved tokens in rank order.
    pub fn from_tokens(words: Vec<String>) -> Result<Self, CorpusError> {
        let mut tokens: Vec<String> = [PAD, BOS, EOS, UNK].iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(CorpusError::InvalidArgument(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn specials(&self) -> Specials {
        SPECIALS
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < NUM_SPECIALS
    }

    pub fn decode(&self, ids: &[usize]) -> Tokens {
        ids.iter().map(|&i| self.token(i).unwrap_or(UNK).to_string()).collect()
    }

    /// One token per line, rank order, reserved tokens first.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self, CorpusError> {
        let lines: Vec<&str> = text.lines().collect();
        let expected = [PAD, BOS, EOS, UNK];
        if lines.len() < NUM_SPECIALS || lines[..NUM_SPECIALS] != expected {
            return Err(CorpusError::Parse {
                line: 1,
                message: "vocabulary must start with the reserved tokens".into(),
            });
        }
        Self::from_tokens(lines[NUM_SPECIALS..].iter().map(|s| s.to_string()).collect())
    }
}

/// Ranks tokens by descending frequency, then lexicographically.
pub fn build_vocabulary<'a, I>(stream: I, max_size: usize, min_freq: usize) -> Result<Vocabulary, CorpusError>
where
    I: IntoIterator<Item = &'a String>,
{
    if max_size <= NUM_SPECIALS {
        return Err(CorpusError::InvalidArgument(format!(
            "max_size {max_size} leaves no room beyond the {NUM_SPECIALS} reserved tokens"
        )));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in stream {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let reserved = [PAD, BOS, EOS, UNK];
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq && !reserved.contains(t))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size - NUM_SPECIALS);
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string()).collect())
}

/// Ids with OOV tokens folded to UNK, plus the distinct OOV tokens in
/// first-occurrence order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub oov: Vec<String>,
}

impl Encoded {
    /// Ids over the extended vocabulary: OOV token `k` maps to `|V| + k`.
    pub fn extended_ids(&self, tokens: &[String], vocab: &Vocabulary) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| match vocab.id(t) {
                Some(id) => id,
                None => vocab.len() + self.oov.iter().position(|o| o == t).expect("oov listed"),
            })
            .collect()
    }
}

pub fn encode(vocab: &Vocabulary, tokens: &[String]) -> Encoded {
    let mut oov: Vec<String> = Vec::new();
    let ids = tokens
        .iter()
        .map(|t| match vocab.id(t) {
            Some(id) => id,
            None => {
                if !oov.contains(t) {
                    oov.push(t.clone());
                }
                SPECIALS.unk
            }
        })
        .collect();
    Encoded { ids, oov }
}

/// Closed set of part-of-speech tags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PosTagSet {
    tags: Vec<String>,
    index: HashMap<String, usize>,
}

/// Tag emitted by the lexicon tagger for unknown words.
pub const FALLBACK_TAG: &str = "x";

impl PosTagSet {
    pub fn new(tags: Vec<String>) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(tags.len());
        for (i, t) in tags.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(CorpusError::InvalidArgument(format!("invalid tag `{t}`")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(CorpusError::InvalidArgument(format!("duplicate tag `{t}`")));
            }
        }
        Ok(Self { tags, index })
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn id(&self, tag: &str) -> Option<usize> {
        self.index.get(tag).copied()
    }

    pub fn tag(&self, id: usize) -> Option<&str> {
        self.tags.get(id).map(String::as_str)
    }

    pub fn contains(&self, tag: &str) -> bool {
        self.index.contains_key(tag)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tags.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self, CorpusError> {
        Self::new(text.lines().filter(|l| !l.is_empty()).map(str::to_owned).collect())
    }
}

pub trait PosTagger {
    fn tag(&self, tokens: &[String]) -> Tokens;
}

/// Dictionary tagger with a fixed fallback tag for unknown words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexiconTagger {
    lexicon: HashMap<String, String>,
    fallback: String,
}

impl Default for LexiconTagger {
    fn default() -> Self {
        Self::new(HashMap::new())
    }
}

impl LexiconTagger {
    pub fn new(lexicon: HashMap<String, String>) -> Self {
        Self {
            lexicon,
            fallback: FALLBACK_TAG.to_string(),
        }
    }

    /// Maps each word to the tag it carries most often in `pairs`
    /// (alphabetically first tag on ties).
    pub fn from_pairs(pairs: &[DialoguePair]) -> Self {
        let mut counts: HashMap<&str, HashMap<&str, usize>> = HashMap::new();
        for pair in pairs {
            for (resp, pos) in pair.responses.iter().zip(&pair.response_pos) {
                for (w, t) in resp.iter().zip(pos) {
                    *counts.entry(w).or_default().entry(t).or_default() += 1;
                }
            }
        }
        let lexicon = counts
            .into_iter()
            .map(|(w, tags)| {
                let best = tags
                    .into_iter()
                    .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(a.0)))
                    .map(|(t, _)| t.to_string())
                    .expect("at least one tag");
                (w.to_string(), best)
            })
            .collect();
        Self::new(lexicon)
    }

    pub fn fallback(&self) -> &str {
        &self.fallback
    }

    /// Every tag this tagger can emit, sorted.
    pub fn tag_inventory(&self) -> BTreeSet<String> {
        let mut tags: BTreeSet<String> = self.lexicon.values().cloned().collect();
        tags.insert(self.fallback.clone());
        tags
    }
}

impl PosTagger for LexiconTagger {
    fn tag(&self, tokens: &[String]) -> Tokens {
        tokens
            .iter()
            .map(|t| self.lexicon.get(t).unwrap_or(&self.fallback).clone())
            .collect()
    }
}

/// Runs `tagger` and enforces its contract: one tag per token, all tags in
/// `tagset`.
pub fn pos_tag(tagger: &dyn PosTagger, tagset: &PosTagSet, tokens: &[String]) -> Result<Tokens, CorpusError> {
    if tokens.is_empty() {
        return Err(CorpusError::EmptyInput);
    }
    let tags = tagger.tag(tokens);
    if tags.len() != tokens.len() {
        return Err(CorpusError::LengthViolation {
            expected: tokens.len(),
            got: tags.len(),
        });
    }
    if let Some(bad) = tags.iter().find(|t| !tagset.contains(t)) {
        return Err(CorpusError::TagsetViolation(bad.clone()));
    }
    Ok(tags)
}

/// One post with its bag of reference responses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialoguePair {
    pub post: Tokens,
    pub responses: Vec<Tokens>,
    pub response_pos: Vec<Tokens>,
}

impl DialoguePair {
    pub fn new(post: Tokens, responses: Vec<Tokens>, response_pos: Vec<Tokens>) -> Result<Self, CorpusError> {
        let pair = Self {
            post,
            responses,
            response_pos,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.post.is_empty() || self.responses.is_empty() {
            return Err(CorpusError::EmptyInput);
        }
        if self.responses.len() != self.response_pos.len() {
            return Err(CorpusError::LengthViolation {
                expected: self.responses.len(),
                got: self.response_pos.len(),
            });
        }
        for (r, p) in self.responses.iter().zip(&self.response_pos) {
            if r.is_empty() {
                return Err(CorpusError::EmptyInput);
            }
            if r.len() != p.len() {
                return Err(CorpusError::LengthViolation {
                    expected: r.len(),
                    got: p.len(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub pairs: Vec<DialoguePair>,
    pub vocabulary: Vocabulary,
    pub tagset: PosTagSet,
    pub split: Split,
}

impl Corpus {
    /// Number of `(post, response)` records across all bags.
    pub fn num_examples(&self) -> usize {
        self.pairs.iter().map(|p| p.responses.len()).sum()
    }

    /// All responses in pair order.
    pub fn responses(&self) -> impl Iterator<Item = &Tokens> {
        self.pairs.iter().flat_map(|p| p.responses.iter())
    }

    pub fn response_pos(&self) -> impl Iterator<Item = &Tokens> {
        self.pairs.iter().flat_map(|p| p.response_pos.iter())
    }

    /// Writes one record per `(post, response)`, posts in bag order.
    pub fn to_jsonl(&self, scheme: TokenScheme) -> String {
        let mut out = String::new();
        for pair in &self.pairs {
            for (r, pos) in pair.responses.iter().zip(&pair.response_pos) {
                let rec = Record {
                    post: join_tokens(&pair.post, scheme),
                    response: Some(join_tokens(r, scheme)),
                    response_pos: Some(pos.join(" ")),
                };
                out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
                out.push('\n');
            }
        }
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    post: String,
    response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    response_pos: Option<String>,
}

/// Options for [`load_corpus`].
pub struct LoadOptions<'a> {
    pub scheme: TokenScheme,
    pub max_vocab: usize,
    pub min_freq: usize,
    pub split: Split,
    /// Used for records without `response_pos`.
    pub tagger: Option<&'a dyn PosTagger>,
    /// Fixed vocabulary (e.g. the training vocabulary when loading a test
    /// split). Built from the data when absent.
    pub vocabulary: Option<Vocabulary>,
    /// Fixed tag set. When absent it is every tag seen plus the fallback tag.
    pub tagset: Option<PosTagSet>,
}

impl Default for LoadOptions<'_> {
    fn default() -> Self {
        Self {
            scheme: TokenScheme::Whitespace,
            max_vocab: 50_000,
            min_freq: 1,
            split: Split::Train,
            tagger: None,
            vocabulary: None,
            tagset: None,
        }
    }
}

pub fn load_corpus(path: &Path, opts: &LoadOptions<'_>) -> Result<Corpus, CorpusError> {
    let file = fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus(BufReader::new(file), opts)
}

pub fn parse_corpus<R: BufRead>(reader: R, opts: &LoadOptions<'_>) -> Result<Corpus, CorpusError> {
    let mut pairs: Vec<DialoguePair> = Vec::new();
    let mut by_post: HashMap<String, usize> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let parse_err = |message: String| CorpusError::Parse { line: line_no, message };
        let line = line.map_err(|e| parse_err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let response = rec.response.ok_or_else(|| parse_err("record has no response".into()))?;
        let post = tokenize(&rec.post, opts.scheme).map_err(|_| parse_err("empty post".into()))?;
        let response = tokenize(&response, opts.scheme).map_err(|_| parse_err("empty response".into()))?;
        let pos = match rec.response_pos {
            Some(p) => p.split_whitespace().map(str::to_owned).collect::<Tokens>(),
            None => match opts.tagger {
                Some(t) => t.tag(&response),
                None => return Err(parse_err("record has no response_pos and no tagger is configured".into())),
            },
        };
        if pos.len() != response.len() {
            return Err(parse_err(format!("{} POS tags for {} response tokens", pos.len(), response.len())));
        }
        if let Some(ts) = &opts.tagset {
            if let Some(bad) = pos.iter().find(|t| !ts.contains(t)) {
                return Err(parse_err(format!("tag `{bad}` is not in the tag set")));
            }
        }
        let key = join_tokens(&post, opts.scheme);
        match by_post.get(&key) {
            Some(&idx) => {
                pairs[idx].responses.push(response);
                pairs[idx].response_pos.push(pos);
            }
            None => {
                by_post.insert(key, pairs.len());
                pairs.push(DialoguePair {
                    post,
                    responses: vec![response],
                    response_pos: vec![pos],
                });
            }
        }
    }

    let vocabulary = match &opts.vocabulary {
        Some(v) => v.clone(),
        None => {
            let stream = pairs.iter().flat_map(|p| p.post.iter().chain(p.responses.iter().flatten()));
            build_vocabulary(stream, opts.max_vocab, opts.min_freq)?
        }
    };
    let tagset = match &opts.tagset {
        Some(t) => t.clone(),
        None => {
            let mut tags: BTreeSet<String> = pairs.iter().flat_map(|p| p.response_pos.iter().flatten().cloned()).collect();
            tags.insert(FALLBACK_TAG.to_string());
            PosTagSet::new(tags.into_iter().collect())?
        }
    };
    Ok(Corpus {
        pairs,
        vocabulary,
        tagset,
        split: opts.split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Tokens {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn tokenize_schemes() {
        assert_eq!(tokenize("a b  c", TokenScheme::Whitespace).unwrap(), toks("a b c"));
        assert_eq!(tokenize("ab", TokenScheme::Char).unwrap(), toks("a b"));
        assert!(matches!(tokenize("  ", TokenScheme::Whitespace), Err(CorpusError::EmptyInput)));
        let t = tokenize("  x  y ", TokenScheme::Whitespace).unwrap();
        assert_eq!(join_tokens(&t, TokenScheme::Whitespace), "x y");
    }

    #[test]
    fn vocabulary_ranking_and_limits() {
        let stream = toks("a a b");
        let v = build_vocabulary(&stream, 6, 1).unwrap();
        assert_eq!(&v.tokens()[NUM_SPECIALS..], &toks("a b")[..]);
        let v = build_vocabulary(&stream, 5, 2).unwrap();
        assert_eq!(&v.tokens()[NUM_SPECIALS..], &toks("a")[..]);
        let v = build_vocabulary(&Vec::new(), 5, 1).unwrap();
        assert_eq!(v.len(), NUM_SPECIALS);
        assert!(build_vocabulary(&stream, NUM_SPECIALS, 1).is_err());
        // lexicographic tie-break
        let v = build_vocabulary(&toks("c b a"), 10, 1).unwrap();
        assert_eq!(&v.tokens()[NUM_SPECIALS..], &toks("a b c")[..]);
    }

    #[test]
    fn specials_are_first_and_distinct() {
        let v = Vocabulary::specials_only();
        assert_eq!(v.id(PAD), Some(SPECIALS.pad));
        assert_eq!(v.id(BOS), Some(SPECIALS.bos));
        assert_eq!(v.id(EOS), Some(SPECIALS.eos));
        assert_eq!(v.id(UNK), Some(SPECIALS.unk));
    }

    #[test]
    fn encode_folds_oov() {
        let v = Vocabulary::from_tokens(toks("a b")).unwrap();
        let (a, b) = (v.id("a").unwrap(), v.id("b").unwrap());
        let e = encode(&v, &toks("a x b x"));
        assert_eq!(e.ids, vec![a, SPECIALS.unk, b, SPECIALS.unk]);
        assert_eq!(e.oov, toks("x"));
        assert_eq!(e.extended_ids(&toks("a x b x"), &v), vec![a, v.len(), b, v.len()]);
        let e = encode(&v, &toks("a b"));
        assert!(e.oov.is_empty());
        let e = encode(&Vocabulary::specials_only(), &toks("x y"));
        assert_eq!(e.ids, vec![SPECIALS.unk; 2]);
        assert_eq!(e.oov, toks("x y"));
    }

    #[test]
    fn lexicon_tagging() {
        let lex = LexiconTagger::new(
            [("dog", "n"), ("runs", "v")]
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
        );
        let ts = PosTagSet::new(toks("n v x")).unwrap();
        assert_eq!(pos_tag(&lex, &ts, &toks("dog runs")).unwrap(), toks("n v"));
        let empty = LexiconTagger::default();
        assert_eq!(pos_tag(&empty, &ts, &toks("dog")).unwrap(), toks("x"));
    }

    struct Broken(Tokens);
    impl PosTagger for Broken {
        fn tag(&self, _tokens: &[String]) -> Tokens {
            self.0.clone()
        }
    }

    #[test]
    fn tagger_contract_violations() {
        let ts = PosTagSet::new(toks("n v x")).unwrap();
        assert!(matches!(
            pos_tag(&Broken(toks("n")), &ts, &toks("a b")),
            Err(CorpusError::LengthViolation { .. })
        ));
        assert!(matches!(
            pos_tag(&Broken(toks("q")), &ts, &toks("a")),
            Err(CorpusError::TagsetViolation(_))
        ));
    }

    fn parse(text: &str) -> Result<Corpus, CorpusError> {
        parse_corpus(text.as_bytes(), &LoadOptions::default())
    }

    #[test]
    fn groups_identical_posts() {
        let c = parse(
            "{\"post\":\"hi there\",\"response\":\"hello\",\"response_pos\":\"i\"}\n\
             {\"post\":\"hi there\",\"response\":\"hey you\",\"response_pos\":\"i r\"}\n",
        )
        .unwrap();
        assert_eq!(c.pairs.len(), 1);
        assert_eq!(c.pairs[0].responses.len(), 2);
        assert_eq!(c.num_examples(), 2);
        assert!(c.tagset.contains("r") && c.tagset.contains(FALLBACK_TAG));
    }

    #[test]
    fn malformed_records_report_line() {
        let err = parse("{\"post\":\"a\",\"response\":\"b\",\"response_pos\":\"n\"}\n{\"post\":\"a\"}\n").unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 2, .. }), "{err}");
        let err = parse("not json\n").unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 1, .. }));
        let err = parse("{\"post\":\"a\",\"response\":\"b c\",\"response_pos\":\"n\"}\n").unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 1, .. }));
    }

    #[test]
    fn untagged_records_use_the_tagger() {
        let lex = LexiconTagger::new([("b".to_string(), "n".to_string())].into_iter().collect());
        let opts = LoadOptions {
            tagger: Some(&lex),
            ..Default::default()
        };
        let c = parse_corpus("{\"post\":\"a\",\"response\":\"b c\"}\n".as_bytes(), &opts).unwrap();
        assert_eq!(c.pairs[0].response_pos[0], toks("n x"));
        assert!(parse("{\"post\":\"a\",\"response\":\"b\"}\n").is_err());
    }

    #[test]
    fn reloading_a_grouped_file_is_idempotent() {
        let text = "{\"post\":\"p q\",\"response\":\"r\",\"response_pos\":\"n\"}\n\
                    {\"post\":\"s\",\"response\":\"t u\",\"response_pos\":\"v n\"}\n\
                    {\"post\":\"p q\",\"response\":\"w\",\"response_pos\":\"n\"}\n";
        let first = parse(text).unwrap();
        let second = parse(&first.to_jsonl(TokenScheme::Whitespace)).unwrap();
        assert_eq!(first, second);
        let third = parse(&second.to_jsonl(TokenScheme::Whitespace)).unwrap();
        assert_eq!(second, third);
    }

    #[test]
    fn vocabulary_and_tagset_text_round_trip() {
        let v = Vocabulary::from_tokens(toks("b a")).unwrap();
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocabulary::from_text("a\nb\n").is_err());
        let t = PosTagSet::new(toks("n v")).unwrap();
        assert_eq!(PosTagSet::from_text(&t.to_text()).unwrap(), t);
    }

    #[test]
    #[ignore = "needs the full-scale test file in LATDIAL_FULL_TEST"]
    fn full_scale_test_split_size() {
        let Ok(path) = std::env::var("LATDIAL_FULL_TEST") else {
            return;
        };
        let lex = LexiconTagger::default();
        let opts = LoadOptions {
            tagger: Some(&lex),
            split: Split::Test,
            ..Default::default()
        };
        let c = load_corpus(Path::new(&path), &opts).unwrap();
        assert_eq!(c.num_examples(), 3200);
    }

    proptest! {
        #[test]
        fn decode_encode_replaces_only_oov(words in proptest::collection::vec("[a-f]{1,2}", 0..20)) {
            let v = Vocabulary::from_tokens(toks("a b c d")).unwrap();
            let e = encode(&v, &words);
            prop_assert_eq!(e.ids.len(), words.len());
            let back = v.decode(&e.ids);
            for (orig, dec) in words.iter().zip(&back) {
                if v.contains(orig) {
                    prop_assert_eq!(orig, dec);
                } else {
                    prop_assert_eq!(dec.as_str(), UNK);
                }
            }
        }

        #[test]
        fn vocabulary_index_is_a_bijection(words in proptest::collection::vec("[a-z]{1,3}", 0..40), max in 5usize..30) {
            let v = build_vocabulary(&words, max, 1).unwrap();
            prop_assert!(v.len() <= max);
            for id in 0..v.len() {
                prop_assert_eq!(v.id(v.token(id).unwrap()), Some(id));
            }
        }

        #[test]
        fn lexicon_tagging_is_closed(words in proptest::collection::vec("[a-d]", 1..10)) {
            let lex = LexiconTagger::new([("a".to_string(), "n".to_string()), ("b".to_string(), "v".to_string())].into_iter().collect());
            let ts = PosTagSet::new(lex.tag_inventory().into_iter().collect()).unwrap();
            let tags = pos_tag(&lex, &ts, &words).unwrap();
            prop_assert_eq!(tags.len(), words.len());
        }
    }
}
