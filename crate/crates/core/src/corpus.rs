//! Vocabulary construction, bag-of-words vectorization, corpus I/O and
//! held-out word splits.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// Ordered term list with its inverse index. Ids are `0..len()`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    terms: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(terms: Vec<String>) -> Self {
        let index = terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { terms, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.terms
    }
}

impl Vocabulary {
    /// Build from an explicit term list; duplicates are rejected.
    pub fn from_terms(terms: Vec<String>) -> Result<Self> {
        let vocab = Vocabulary::from(terms);
        if vocab.index.len() != vocab.terms.len() {
            return Err(Error::InvalidConfig("vocabulary contains duplicate terms".into()));
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn term(&self, id: usize) -> Option<&str> {
        self.terms.get(id).map(String::as_str)
    }

    pub fn id(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }

    /// One term per line.
    pub fn write_to(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for t in &self.terms {
            writeln!(w, "{t}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut terms = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let t = line.trim();
            if !t.is_empty() {
                terms.push(t.to_string());
            }
        }
        Vocabulary::from_terms(terms)
    }
}

/// Sparse bag-of-words document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    /// `(term id, count)` pairs, sorted by id, counts ≥ 1.
    pub counts: Vec<(usize, u32)>,
    pub env: usize,
    pub raw_id: String,
}

impl Document {
    pub fn from_map(counts: BTreeMap<usize, u32>, env: usize, raw_id: impl Into<String>) -> Self {
        Document {
            counts: counts.into_iter().filter(|&(_, c)| c > 0).collect(),
            env,
            raw_id: raw_id.into(),
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&(_, c)| c as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn count(&self, id: usize) -> u32 {
        self.counts
            .binary_search_by_key(&id, |&(v, _)| v)
            .map_or(0, |i| self.counts[i].1)
    }

    pub fn contains(&self, id: usize) -> bool {
        self.count(id) > 0
    }

    pub fn dense(&self, vocab_size: usize) -> Vec<f64> {
        let mut out = vec![0.0; vocab_size];
        for &(v, c) in &self.counts {
            out[v] = c as f64;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub docs: Vec<Document>,
    pub vocab: Vocabulary,
    pub env_names: Vec<String>,
}

impl Corpus {
    pub fn num_envs(&self) -> usize {
        self.env_names.len()
    }

    pub fn num_docs(&self) -> usize {
        self.docs.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn total_tokens(&self) -> u64 {
        self.docs.iter().map(Document::total).sum()
    }

    /// Vectorize raw records against `vocab`. Environments named in
    /// `known_envs` keep their positions; new names are appended in
    /// first-appearance order.
    pub fn from_records(records: &[RawRecord], vocab: Vocabulary, known_envs: &[String]) -> Self {
        let mut env_names: Vec<String> = known_envs.to_vec();
        let mut env_index: HashMap<String, usize> = env_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        let docs = records
            .iter()
            .map(|r| {
                let env = *env_index.entry(r.env.clone()).or_insert_with(|| {
                    env_names.push(r.env.clone());
                    env_names.len() - 1
                });
                let mut doc = vectorize(&r.tokens, &vocab, env);
                doc.raw_id = r.id.clone();
                doc
            })
            .collect();
        Corpus {
            docs,
            vocab,
            env_names,
        }
    }

    /// Drop documents with no in-vocabulary tokens; returns how many were dropped.
    pub fn retain_nonempty(&mut self) -> usize {
        let before = self.docs.len();
        self.docs.retain(|d| !d.is_empty());
        before - self.docs.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.docs.is_empty() {
            return Err(Error::InvalidConfig("corpus has no documents".into()));
        }
        if self.env_names.is_empty() {
            return Err(Error::InvalidConfig("corpus has no environments".into()));
        }
        let v = self.vocab.len();
        for d in &self.docs {
            if d.env >= self.num_envs() {
                return Err(Error::EnvOutOfRange {
                    env: d.env,
                    num_envs: self.num_envs(),
                });
            }
            if let Some(&(id, _)) = d.counts.last() {
                if id >= v {
                    return Err(Error::ShapeMismatch(format!(
                        "document '{}' uses term id {id} with V = {v}",
                        d.raw_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Records with each term repeated by its count, in term-id order.
    pub fn to_records(&self) -> Vec<RawRecord> {
        self.docs
            .iter()
            .map(|d| RawRecord {
                id: d.raw_id.clone(),
                env: self.env_names[d.env].clone(),
                tokens: d
                    .counts
                    .iter()
                    .flat_map(|&(v, c)| {
                        std::iter::repeat_n(self.vocab.terms[v].clone(), c as usize)
                    })
                    .collect(),
            })
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_records(path, &self.to_records())
    }
}

/// A single input line after tokenization.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub env: String,
    pub tokens: Vec<String>,
}

#[derive(Deserialize)]
struct InputRecord {
    id: String,
    env: String,
    #[serde(default)]
    tokens: Option<Vec<String>>,
    #[serde(default)]
    text: Option<String>,
}

/// Lowercase and split on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Parse JSON-lines records. Blank lines are skipped; line numbers are 1-based.
pub fn parse_records<R: BufRead>(reader: R) -> Result<Vec<RawRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InputRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let tokens = match (rec.tokens, rec.text) {
            (Some(t), _) => t,
            (None, Some(text)) => tokenize(&text),
            (None, None) => {
                return Err(Error::Parse {
                    line: lineno,
                    message: "record has neither \"tokens\" nor \"text\"".into(),
                })
            }
        };
        out.push(RawRecord {
            id: rec.id,
            env: rec.env,
            tokens,
        });
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<RawRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_records(BufReader::new(file))
}

pub fn write_records(path: &Path, records: &[RawRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a corpus file and vectorize it against `vocab`.
pub fn load_corpus(path: &Path, vocab: Vocabulary, known_envs: &[String]) -> Result<Corpus> {
    let records = read_records(path)?;
    Ok(Corpus::from_records(&records, vocab, known_envs))
}

pub fn read_stopwords(path: &Path) -> Result<HashSet<String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashSet::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let t = line.trim();
        if !t.is_empty() {
            out.insert(t.to_string());
        }
    }
    Ok(out)
}

/// Keep terms with `ceil(min_df·D) ≤ df ≤ floor(max_df·D)` that are not
/// stopwords, sorted lexicographically.
pub fn build_vocabulary<S: AsRef<str>>(
    token_lists: &[Vec<S>],
    min_df: f64,
    max_df: f64,
    stopwords: &HashSet<String>,
) -> Result<Vocabulary> {
    if !(0.0..1.0).contains(&min_df) || !(max_df > min_df && max_df <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "document-frequency bounds must satisfy 0 <= min_df < max_df <= 1, got {min_df}, {max_df}"
        )));
    }
    if token_lists.is_empty() {
        return Err(Error::InvalidConfig("no documents to build a vocabulary from".into()));
    }
    let n_docs = token_lists.len() as f64;
    let mut df: HashMap<&str, usize> = HashMap::new();
    for tokens in token_lists {
        let unique: HashSet<&str> = tokens.iter().map(AsRef::as_ref).collect();
        for t in unique {
            *df.entry(t).or_insert(0) += 1;
        }
    }
    // Guard against 0.3·10 evaluating to 3.0000000000000004.
    let lo = ((min_df * n_docs) - 1e-9).ceil() as usize;
    let hi = ((max_df * n_docs) + 1e-9).floor() as usize;
    let mut terms: Vec<String> = df
        .into_iter()
        .filter(|&(t, n)| n >= lo && n <= hi && !stopwords.contains(t))
        .map(|(t, _)| t.to_string())
        .collect();
    if terms.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    terms.sort_unstable();
    Ok(Vocabulary::from(terms))
}

/// Count in-vocabulary tokens; out-of-vocabulary tokens are dropped.
pub fn vectorize<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary, env: usize) -> Document {
    let mut counts: BTreeMap<usize, u32> = BTreeMap::new();
    for t in tokens {
        if let Some(id) = vocab.id(t.as_ref()) {
            *counts.entry(id).or_insert(0) += 1;
        }
    }
    Document::from_map(counts, env, String::new())
}

const MAX_SPLIT_ATTEMPTS: usize = 100;

/// Assign each token to the observed half with probability `ratio`,
/// re-drawing until both halves are nonempty.
pub fn split_heldout_words(
    doc: &Document,
    ratio: f64,
    rng: &mut RngStream,
) -> Result<(Document, Document)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidConfig(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    if doc.total() < 2 {
        return Err(Error::DegenerateDocument(format!(
            "document '{}' has {} token(s)",
            doc.raw_id,
            doc.total()
        )));
    }
    for _ in 0..MAX_SPLIT_ATTEMPTS {
        let mut observed = Vec::with_capacity(doc.counts.len());
        let mut held = Vec::with_capacity(doc.counts.len());
        for &(v, c) in &doc.counts {
            let kept = (0..c).filter(|_| rng.bernoulli(ratio)).count() as u32;
            if kept > 0 {
                observed.push((v, kept));
            }
            if kept < c {
                held.push((v, c - kept));
            }
        }
        if !observed.is_empty() && !held.is_empty() {
            let half = |counts| Document {
                counts,
                env: doc.env,
                raw_id: doc.raw_id.clone(),
            };
            return Ok((half(observed), half(held)));
        }
    }
    Err(Error::DegenerateDocument(format!(
        "document '{}' could not be split in {MAX_SPLIT_ATTEMPTS} attempts",
        doc.raw_id
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    fn toy() -> Vec<Vec<String>> {
        vec![toks(&["a", "b"]), toks(&["a", "c"]), toks(&["a", "b"])]
    }

    #[test]
    fn df_filter_hand_count() {
        let v = build_vocabulary(&toy(), 0.5, 1.0, &HashSet::new()).unwrap();
        assert_eq!(v.terms(), &["a", "b"]);
    }

    #[test]
    fn stopwords_removed() {
        let stop: HashSet<String> = ["a".to_string()].into();
        let v = build_vocabulary(&toy(), 0.5, 1.0, &stop).unwrap();
        assert_eq!(v.terms(), &["b"]);
    }

    #[test]
    fn nothing_survives() {
        let docs = vec![toks(&["a"]), toks(&["b"]), toks(&["c"])];
        assert!(matches!(
            build_vocabulary(&docs, 0.99, 1.0, &HashSet::new()),
            Err(Error::EmptyVocabulary)
        ));
    }

    #[test]
    fn max_df_excludes_universal_terms() {
        let v = build_vocabulary(&toy(), 0.0, 0.7, &HashSet::new()).unwrap();
        assert_eq!(v.terms(), &["b", "c"]);
    }

    #[test]
    fn bad_bounds() {
        assert!(build_vocabulary(&toy(), 0.5, 0.5, &HashSet::new()).is_err());
        assert!(build_vocabulary(&toy(), -0.1, 0.5, &HashSet::new()).is_err());
    }

    #[test]
    fn vectorize_examples() {
        let vocab = Vocabulary::from(toks(&["a", "b"]));
        assert_eq!(vectorize(&toks(&["b", "b", "z"]), &vocab, 0).counts, vec![(1, 2)]);
        assert!(vectorize::<String>(&[], &vocab, 0).counts.is_empty());
        let single = Vocabulary::from(toks(&["a"]));
        assert_eq!(vectorize(&toks(&["a"]), &single, 0).counts, vec![(0, 1)]);
    }

    #[test]
    fn environments_discovered_in_order() {
        let recs = parse_records(
            "{\"id\":\"1\",\"env\":\"rep\",\"tokens\":[\"a\"]}\n{\"id\":\"2\",\"env\":\"dem\",\"text\":\"A b!\"}\n"
                .as_bytes(),
        )
        .unwrap();
        assert_eq!(recs[1].tokens, toks(&["a", "b"]));
        let c = Corpus::from_records(&recs, Vocabulary::from(toks(&["a", "b"])), &[]);
        assert_eq!(c.env_names, toks(&["rep", "dem"]));
        assert_eq!(c.num_envs(), 2);
        assert_eq!(c.docs[1].env, 1);
        assert_eq!(c.docs[1].raw_id, "2");

        let pinned = Corpus::from_records(&recs, Vocabulary::from(toks(&["a"])), &toks(&["dem"]));
        assert_eq!(pinned.env_names, toks(&["dem", "rep"]));
        assert_eq!(pinned.docs[0].env, 1);
    }

    #[test]
    fn single_environment_is_valid() {
        let recs = parse_records(
            "{\"id\":\"1\",\"env\":\"x\",\"tokens\":[\"a\"]}\n{\"id\":\"2\",\"env\":\"x\",\"tokens\":[\"a\"]}\n"
                .as_bytes(),
        )
        .unwrap();
        let c = Corpus::from_records(&recs, Vocabulary::from(toks(&["a"])), &[]);
        assert_eq!(c.num_envs(), 1);
        c.validate().unwrap();
    }

    #[test]
    fn malformed_line_reports_number() {
        let input = "{\"id\":\"1\",\"env\":\"a\",\"tokens\":[]}\n\n{\"id\":\"2\",\"env\":\"a\",\"tokens\":[\"x\"]}\n{\"id\": 3,,}\n";
        match parse_records(input.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
        let missing = "{\"id\":\"1\",\"env\":\"a\"}\n";
        assert!(matches!(parse_records(missing.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn split_examples() {
        let doc = Document {
            counts: vec![(0, 4)],
            env: 0,
            raw_id: "d".into(),
        };
        for seed in 0..20 {
            let mut rng = RngStream::new(seed, 0);
            let (o, h) = split_heldout_words(&doc, 0.5, &mut rng).unwrap();
            assert_eq!(o.count(0) + h.count(0), 4);
            assert!(!o.is_empty() && !h.is_empty());
        }
        let single = Document {
            counts: vec![(3, 1)],
            env: 0,
            raw_id: "s".into(),
        };
        assert!(matches!(
            split_heldout_words(&single, 0.5, &mut RngStream::new(0, 0)),
            Err(Error::DegenerateDocument(_))
        ));
    }

    #[test]
    fn split_binomial_concentration() {
        // Observed ~ Binomial(1000, 0.5): P(|X - 500| > 100) < 1e-9.
        let doc = Document {
            counts: vec![(0, 1000)],
            env: 0,
            raw_id: String::new(),
        };
        for seed in 0..50 {
            let (o, _) = split_heldout_words(&doc, 0.5, &mut RngStream::new(seed, 1)).unwrap();
            assert!((400..=600).contains(&o.total()), "seed {seed}: {}", o.total());
        }
    }

    proptest! {
        #[test]
        fn split_halves_recombine(
            counts in proptest::collection::btree_map(0usize..40, 1u32..6, 1..12),
            seed in any::<u64>(),
            ratio in 0.05f64..0.95,
        ) {
            let doc = Document::from_map(counts, 0, "p");
            prop_assume!(doc.total() >= 2);
            let (o, h) = split_heldout_words(&doc, ratio, &mut RngStream::new(seed, 0)).unwrap();
            for &(v, c) in &doc.counts {
                prop_assert_eq!(o.count(v) + h.count(v), c);
            }
            prop_assert_eq!(o.total() + h.total(), doc.total());
        }

        #[test]
        fn vocabulary_is_sorted_deterministic_and_df_bounded(
            docs in proptest::collection::vec(
                proptest::collection::vec("[a-f]{1,2}", 0..8), 1..15),
            min_df in 0.0f64..0.5,
            span in 0.05f64..0.5,
        ) {
            let max_df = (min_df + span).min(1.0);
            let a = build_vocabulary(&docs, min_df, max_df, &HashSet::new());
            let b = build_vocabulary(&docs, min_df, max_df, &HashSet::new());
            match (a, b) {
                (Ok(a), Ok(b)) => {
                    prop_assert_eq!(&a, &b);
                    let mut sorted = a.terms().to_vec();
                    sorted.sort();
                    prop_assert_eq!(sorted.as_slice(), a.terms());
                    let d = docs.len() as f64;
                    for t in a.terms() {
                        let df = docs.iter().filter(|toks| toks.contains(t)).count() as f64;
                        prop_assert!(df + 1e-9 >= (min_df * d - 1e-9).ceil());
                        prop_assert!(df <= (max_df * d + 1e-9).floor() + 1e-9);
                        prop_assert_eq!(a.id(t).map(|i| a.term(i).unwrap()), Some(t.as_str()));
                    }
                }
                (Err(Error::EmptyVocabulary), Err(Error::EmptyVocabulary)) => {}
                (a, b) => prop_assert!(false, "unexpected {:?} / {:?}", a, b),
            }
        }
    }
}
