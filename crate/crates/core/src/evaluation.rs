//! Held-out perplexity, NPMI coherence, top words and deviation diagnostics.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{split_heldout_words, Corpus, Document};
use crate::error::{Error, Result};
use crate::inference::{proportions_from_log, TrainedModel};
use crate::model::{score_document, RateBasis};
use crate::numerics::RngStream;

pub const DEFAULT_NPMI_EPS: f64 = 1e-12;
pub const DEFAULT_SPARSITY_THRESHOLD: f64 = 0.01;
pub const DEFAULT_TOP_N: usize = 10;

/// Which topic-word weights score the test words.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreVariant {
    BetaOnly,
    /// γ̂ of this model environment, applied to every test document.
    WithGamma(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Infer θ̂ from a random `ratio` of each document's tokens, score the rest.
    DocCompletion { ratio: f64 },
    /// Infer and score on the same tokens. Optimistic.
    FullDoc,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerplexityMode {
    pub variant: ScoreVariant,
    pub protocol: Protocol,
}

impl Default for PerplexityMode {
    fn default() -> Self {
        PerplexityMode {
            variant: ScoreVariant::BetaOnly,
            protocol: Protocol::DocCompletion { ratio: 0.5 },
        }
    }
}

impl PerplexityMode {
    pub fn beta_only() -> Self {
        Self::default()
    }

    pub fn with_gamma(env: usize) -> Self {
        PerplexityMode {
            variant: ScoreVariant::WithGamma(env),
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub perplexity: f64,
    pub token_count: u64,
    pub mode: PerplexityMode,
    /// Keyed by the test corpus's environment names.
    pub per_env_breakdown: BTreeMap<String, f64>,
    pub skipped_docs: usize,
}

fn check_vocab(model: &TrainedModel, corpus: &Corpus) -> Result<()> {
    if model.vocab != corpus.vocab {
        return Err(Error::VocabMismatch(format!(
            "model has {} terms, corpus has {}",
            model.vocab_size(),
            corpus.vocab_size()
        )));
    }
    Ok(())
}

fn score_basis(model: &TrainedModel, variant: ScoreVariant) -> Result<RateBasis> {
    let gamma = match variant {
        ScoreVariant::BetaOnly => None,
        ScoreVariant::WithGamma(e) => {
            let g = model.gamma_hat.as_ref().ok_or(Error::NoGammaVariant)?;
            if e >= g.num_envs() {
                return Err(Error::EnvOutOfRange {
                    env: e,
                    num_envs: g.num_envs(),
                });
            }
            Some((g, e))
        }
    };
    RateBasis::build(&model.beta_hat, gamma, model.config.rate_form)
}

/// Per-token perplexity of `test`, pooled over all scored tokens.
pub fn perplexity(
    model: &TrainedModel,
    test: &Corpus,
    mode: PerplexityMode,
    rng: &RngStream,
) -> Result<EvalReport> {
    check_vocab(model, test)?;
    let basis = score_basis(model, mode.variant)?;

    // Per document: Some((env, loglik, tokens)) or None when skipped.
    let scored: Vec<Option<(usize, f64, u64)>> = test
        .docs
        .par_iter()
        .enumerate()
        .map(|(i, doc)| -> Result<Option<(usize, f64, u64)>> {
            let (observed, held) = match mode.protocol {
                Protocol::FullDoc => {
                    if doc.is_empty() {
                        return Ok(None);
                    }
                    (doc.clone(), doc.clone())
                }
                Protocol::DocCompletion { ratio } => {
                    match split_heldout_words(doc, ratio, &mut rng.split(i as u64)) {
                        Ok(halves) => halves,
                        Err(Error::DegenerateDocument(_)) => return Ok(None),
                        Err(e) => return Err(e),
                    }
                }
            };
            let (mu, _) = model.encoder.encode(&observed)?;
            let s = score_document(&held.counts, &mu, &basis);
            Ok(Some((doc.env, s.loglik, held.total())))
        })
        .collect::<Result<_>>()?;

    let mut total_ll = 0.0;
    let mut total_tokens = 0u64;
    let mut skipped = 0usize;
    let mut per_env: BTreeMap<usize, (f64, u64)> = BTreeMap::new();
    for entry in scored {
        match entry {
            None => skipped += 1,
            Some((env, ll, n)) => {
                total_ll += ll;
                total_tokens += n;
                let slot = per_env.entry(env).or_insert((0.0, 0));
                slot.0 += ll;
                slot.1 += n;
            }
        }
    }
    if skipped > 0 {
        log::warn!("perplexity: skipped {skipped} document(s) too short to score");
    }
    if total_tokens == 0 {
        return Err(Error::DegenerateDocument("no scorable tokens in test corpus".into()));
    }
    let per_env_breakdown = per_env
        .into_iter()
        .map(|(e, (ll, n))| {
            let name = test.env_names.get(e).cloned().unwrap_or_else(|| format!("env{e}"));
            (name, (-ll / n as f64).exp())
        })
        .collect();
    Ok(EvalReport {
        perplexity: (-total_ll / total_tokens as f64).exp(),
        token_count: total_tokens,
        mode,
        per_env_breakdown,
        skipped_docs: skipped,
    })
}

/// Ids of the `n` largest entries, ties broken by lower index.
pub fn top_indices(weights: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordSource {
    Global,
    Env(usize),
}

pub fn top_word_ids(
    model: &TrainedModel,
    topic: usize,
    source: WordSource,
    n: usize,
) -> Result<Vec<usize>> {
    let k = model.num_topics();
    if topic >= k {
        return Err(Error::IndexOutOfRange(format!("topic {topic} with {k} topics")));
    }
    let weights = match source {
        WordSource::Global => model.beta_hat.beta.row(topic),
        WordSource::Env(e) => {
            let g = model.gamma_hat.as_ref().ok_or(Error::NoGammaVariant)?;
            if e >= g.num_envs() {
                return Err(Error::IndexOutOfRange(format!(
                    "environment {e} with {} environments",
                    g.num_envs()
                )));
            }
            g.row(e, topic)
        }
    };
    Ok(top_indices(weights, n))
}

pub fn top_words(
    model: &TrainedModel,
    topic: usize,
    source: WordSource,
    n: usize,
) -> Result<Vec<String>> {
    Ok(top_word_ids(model, topic, source, n)?
        .into_iter()
        .map(|v| model.vocab.terms()[v].clone())
        .collect())
}

/// Document-frequency NPMI of one word pair.
///
/// A pair that never co-occurs scores −1 in the limit of the smoothing; a
/// pair present in every document has no informative denominator and
/// scores 0.
pub fn npmi_pair(p_i: f64, p_j: f64, p_ij: f64, eps: f64) -> f64 {
    if p_i == 0.0 || p_j == 0.0 {
        return -1.0;
    }
    let joint = p_ij + eps;
    let denom = -joint.ln();
    if denom <= 0.0 {
        return 0.0;
    }
    (joint / (p_i * p_j)).ln() / denom
}

/// Mean pairwise NPMI of `words` over the documents of `reference`.
pub fn npmi_words(words: &[usize], reference: &Corpus, eps: f64) -> f64 {
    let d = reference.num_docs() as f64;
    let presence: Vec<Vec<bool>> = reference
        .docs
        .iter()
        .map(|doc| words.iter().map(|&w| doc.contains(w)).collect())
        .collect();
    let df = |i: usize| presence.iter().filter(|p| p[i]).count() as f64 / d;
    let co = |i: usize, j: usize| presence.iter().filter(|p| p[i] && p[j]).count() as f64 / d;
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..words.len() {
        for j in i + 1..words.len() {
            sum += npmi_pair(df(i), df(j), co(i, j), eps);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum / pairs as f64
    }
}

/// Mean over topics of the mean pairwise NPMI of each topic's top words.
pub fn npmi(model: &TrainedModel, reference: &Corpus, top_n: usize, eps: f64) -> Result<f64> {
    check_vocab(model, reference)?;
    if reference.num_docs() == 0 {
        return Err(Error::InvalidConfig("NPMI reference corpus is empty".into()));
    }
    let k = model.num_topics();
    let per_topic: Vec<f64> = (0..k)
        .into_par_iter()
        .map(|t| {
            let words = top_indices(model.beta_hat.beta.row(t), top_n);
            npmi_words(&words, reference, eps)
        })
        .collect();
    Ok(per_topic.iter().sum::<f64>() / k as f64)
}

/// Fraction of `|γ̂_ekv| < threshold` for each environment.
pub fn sparsity(model: &TrainedModel, threshold: f64) -> Result<Vec<f64>> {
    let g = model.gamma_hat.as_ref().ok_or(Error::NoGammaVariant)?;
    let per_env = g.num_topics() * g.vocab_size();
    Ok(g
        .matrix()
        .as_slice()
        .chunks(per_env)
        .map(|c| c.iter().filter(|x| x.abs() < threshold).count() as f64 / per_env as f64)
        .collect())
}

/// Fraction of `|γ̂_ekv| < threshold` over all environments.
pub fn sparsity_overall(model: &TrainedModel, threshold: f64) -> Result<f64> {
    let per_env = sparsity(model, threshold)?;
    Ok(per_env.iter().sum::<f64>() / per_env.len() as f64)
}

/// Argmax of each document's inferred topic proportions.
pub fn dominant_topics(model: &TrainedModel, docs: &[Document]) -> Result<Vec<usize>> {
    docs.par_iter()
        .map(|d| {
            let (mu, _) = model.encoder.encode(d)?;
            let theta = proportions_from_log(&mu);
            Ok(top_indices(&theta, 1)[0])
        })
        .collect()
}

/// Median over (environment, topic) of how many of the top-`n` γ̂ words
/// are relatively more frequent in the other environment's documents.
/// `assignment[d]` is the topic of test document `d`; documents carry
/// environment indices 0 or 1.
pub fn count_opposite_assigned(
    model: &TrainedModel,
    test: &Corpus,
    assignment: &[usize],
    top_n: usize,
) -> Result<f64> {
    let g = model.gamma_hat.as_ref().ok_or(Error::NoGammaVariant)?;
    if g.num_envs() != 2 {
        return Err(Error::RequiresTwoEnvironments(g.num_envs()));
    }
    if assignment.len() != test.num_docs() {
        return Err(Error::ShapeMismatch(format!(
            "{} assignments for {} documents",
            assignment.len(),
            test.num_docs()
        )));
    }
    let k = g.num_topics();
    let v = g.vocab_size();
    // counts[topic][env] = (word counts, total tokens)
    let mut counts = vec![vec![(vec![0u64; v], 0u64); 2]; k];
    for (doc, &t) in test.docs.iter().zip(assignment) {
        if doc.env >= 2 {
            return Err(Error::EnvOutOfRange {
                env: doc.env,
                num_envs: 2,
            });
        }
        let slot = &mut counts[t][doc.env];
        for &(w, c) in &doc.counts {
            slot.0[w] += c as u64;
            slot.1 += c as u64;
        }
    }
    let mut tallies = Vec::new();
    for (t, by_env) in counts.iter().enumerate() {
        if by_env[0].1 == 0 || by_env[1].1 == 0 {
            continue;
        }
        for e in 0..2 {
            let (own, own_total) = &by_env[e];
            let (other, other_total) = &by_env[1 - e];
            let n = top_indices(g.row(e, t), top_n)
                .into_iter()
                .filter(|&w| {
                    // Cross-multiplied to compare relative frequencies exactly.
                    other[w] as u128 * *own_total as u128 > own[w] as u128 * *other_total as u128
                })
                .count();
            tallies.push(n as f64);
        }
    }
    if tallies.is_empty() {
        return Err(Error::InvalidConfig(
            "no topic has assigned documents in both environments".into(),
        ));
    }
    Ok(median(&mut tallies))
}

/// [`count_opposite_assigned`] with topics assigned by the model's encoder.
pub fn count_opposite(model: &TrainedModel, test: &Corpus, top_n: usize) -> Result<f64> {
    check_vocab(model, test)?;
    let assignment = dominant_topics(model, &test.docs)?;
    count_opposite_assigned(model, test, &assignment, top_n)
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}
