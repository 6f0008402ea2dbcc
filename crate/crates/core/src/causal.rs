//! Text-as-treatment effect estimation: keyword-driven semi-synthetic
//! outcomes, topic-argmax treatments and OLS with classical standard errors.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::{top_word_ids, WordSource};
use crate::inference::{infer_theta_matrix, train, TrainedModel};
use crate::model::{
    sample_document, synthetic_vocabulary, word_rates, EnvDeviations, GlobalTopics, ModelConfig,
    PriorVariant, RateForm, TrueParams,
};
use crate::numerics::{least_squares, t_two_sided_p, Matrix, RngStream};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordList {
    pub name: String,
    pub tokens: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub keyword_lists: Vec<KeywordList>,
    pub base_p: f64,
    pub bump: f64,
    /// Distinct keywords from one list a document needs to count as a hit.
    pub min_hits: usize,
    pub samples_per_list: usize,
    pub extra_samples: usize,
    pub seed: u64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            keyword_lists: Vec::new(),
            base_p: 0.5,
            bump: 0.2,
            min_hits: 2,
            samples_per_list: 700,
            extra_samples: 700,
            seed: 0,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.base_p) {
            return Err(Error::InvalidConfig(format!("base_p must be in [0, 1], got {}", self.base_p)));
        }
        if !self.bump.is_finite() {
            return Err(Error::InvalidConfig("bump must be finite".into()));
        }
        if self.min_hits == 0 {
            return Err(Error::InvalidConfig("min_hits must be at least 1".into()));
        }
        if self.keyword_lists.is_empty() {
            return Err(Error::InvalidConfig("at least one keyword list is required".into()));
        }
        if let Some(l) = self.keyword_lists.iter().find(|l| l.tokens.is_empty()) {
            return Err(Error::InvalidConfig(format!("keyword list '{}' is empty", l.name)));
        }
        Ok(())
    }
}

/// Regression output; maps are keyed by coefficient name
/// (`const`, `treatment`, then one entry per covariate).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalResult {
    pub coef: BTreeMap<String, f64>,
    pub std_err: BTreeMap<String, f64>,
    pub t_stat: BTreeMap<String, f64>,
    pub p_value: BTreeMap<String, f64>,
    pub n: usize,
    pub treated_count: usize,
    pub rss: f64,
}

impl CausalResult {
    pub fn effect(&self) -> f64 {
        self.coef["treatment"]
    }

    pub fn effect_se(&self) -> f64 {
        self.std_err["treatment"]
    }

    pub fn effect_p(&self) -> f64 {
        self.p_value["treatment"]
    }
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// `T_i = 1` iff the largest proportion of row `i` is topic `topic`
/// (ties go to the smallest index).
pub fn assign_treatment(theta: &Matrix, topic: usize) -> Result<Vec<bool>> {
    if topic >= theta.cols() {
        return Err(Error::IndexOutOfRange(format!(
            "topic {topic} with {} topics",
            theta.cols()
        )));
    }
    Ok((0..theta.rows()).map(|i| argmax_lowest(theta.row(i)) == topic).collect())
}

/// Treatment from groups of topics: each group's proportions are summed
/// into one pooled topic, and `T_i = 1` iff a pooled topic holds the most
/// mass. A tie between a pooled and an ordinary topic goes to whichever
/// has the smaller topic index.
pub fn assign_treatment_groups(theta: &Matrix, groups: &[Vec<usize>]) -> Result<Vec<bool>> {
    let k = theta.cols();
    let mut owner: Vec<Option<usize>> = vec![None; k];
    for (g, group) in groups.iter().enumerate() {
        if group.is_empty() {
            return Err(Error::InvalidConfig("empty treatment group".into()));
        }
        for &t in group {
            if t >= k {
                return Err(Error::IndexOutOfRange(format!("topic {t} with {k} topics")));
            }
            owner[t] = Some(g);
        }
    }
    Ok((0..theta.rows())
        .map(|i| {
            let row = theta.row(i);
            // (mass, smallest member index, treated)
            let mut pooled: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
            let mut best: (f64, usize, bool) = (f64::NEG_INFINITY, usize::MAX, false);
            for (t, &x) in row.iter().enumerate() {
                match owner[t] {
                    Some(g) => {
                        let slot = pooled.entry(g).or_insert((0.0, t));
                        slot.0 += x;
                    }
                    None => {
                        if x > best.0 || (x == best.0 && t < best.1) {
                            best = (x, t, false);
                        }
                    }
                }
            }
            for (mass, first) in pooled.into_values() {
                if mass > best.0 || (mass == best.0 && first < best.1) {
                    best = (mass, first, true);
                }
            }
            best.2
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicMatch {
    /// Smallest topic index with the largest overlap.
    pub topic: usize,
    /// Every topic sharing that overlap.
    pub tied: Vec<usize>,
    pub overlap: usize,
}

/// Topic whose top `top_n` global words share the most tokens with `keywords`.
pub fn match_topic(model: &TrainedModel, keywords: &[String], top_n: usize) -> Result<TopicMatch> {
    if keywords.is_empty() {
        return Err(Error::InvalidConfig("keyword list is empty".into()));
    }
    let ids: BTreeSet<usize> = keywords.iter().filter_map(|w| model.vocab.id(w)).collect();
    let overlaps = (0..model.num_topics())
        .map(|k| {
            Ok(top_word_ids(model, k, WordSource::Global, top_n)?
                .into_iter()
                .filter(|w| ids.contains(w))
                .count())
        })
        .collect::<Result<Vec<usize>>>()?;
    let best = overlaps.iter().copied().max().unwrap_or(0);
    if best == 0 {
        return Err(Error::NoOverlap(keywords.join(", ")));
    }
    let tied: Vec<usize> = (0..overlaps.len()).filter(|&k| overlaps[k] == best).collect();
    Ok(TopicMatch {
        topic: tied[0],
        tied,
        overlap: best,
    })
}

/// Documents sampled for the experiment with their outcomes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemiSynthetic {
    /// Indices into the corpus, list strata first, extras last.
    pub sample: Vec<usize>,
    pub y: Vec<f64>,
    /// Keyword list each sampled document was drawn for; `None` for extras.
    pub stratum: Vec<Option<usize>>,
}

fn keyword_ids(vocab: &Vocabulary, list: &KeywordList) -> BTreeSet<usize> {
    list.tokens.iter().filter_map(|w| vocab.id(w)).collect()
}

/// Whether each document contains at least `min_hits` distinct keywords of
/// each list: `hits[list][doc]`.
pub fn keyword_hits(corpus: &Corpus, lists: &[KeywordList], min_hits: usize) -> Vec<Vec<bool>> {
    lists
        .iter()
        .map(|list| {
            let ids = keyword_ids(&corpus.vocab, list);
            corpus
                .docs
                .iter()
                .map(|d| d.counts.iter().filter(|(v, _)| ids.contains(v)).count() >= min_hits)
                .collect()
        })
        .collect()
}

/// Draw the experiment sample and its outcomes. Each list stratum takes
/// `samples_per_list` unsampled documents that hit that list; extras come
/// from documents that hit no list. Sampling is without replacement.
pub fn semi_synthetic_outcomes(corpus: &Corpus, spec: &ExperimentSpec) -> Result<SemiSynthetic> {
    spec.validate()?;
    let hits = keyword_hits(corpus, &spec.keyword_lists, spec.min_hits);
    let mut rng = RngStream::new(spec.seed, 0);
    let mut taken = vec![false; corpus.num_docs()];
    let mut sample = Vec::new();
    let mut stratum = Vec::new();
    for (l, list) in spec.keyword_lists.iter().enumerate() {
        let pool: Vec<usize> = (0..corpus.num_docs()).filter(|&i| hits[l][i] && !taken[i]).collect();
        if pool.len() < spec.samples_per_list {
            return Err(Error::InsufficientDocs {
                stratum: list.name.clone(),
                needed: spec.samples_per_list,
                available: pool.len(),
            });
        }
        for j in rng.sample_without_replacement(pool.len(), spec.samples_per_list) {
            taken[pool[j]] = true;
            sample.push(pool[j]);
            stratum.push(Some(l));
        }
    }
    let rest: Vec<usize> = (0..corpus.num_docs())
        .filter(|&i| !taken[i] && hits.iter().all(|h| !h[i]))
        .collect();
    if rest.len() < spec.extra_samples {
        return Err(Error::InsufficientDocs {
            stratum: "extra".into(),
            needed: spec.extra_samples,
            available: rest.len(),
        });
    }
    for j in rng.sample_without_replacement(rest.len(), spec.extra_samples) {
        sample.push(rest[j]);
        stratum.push(None);
    }
    let y = stratum
        .iter()
        .map(|s| {
            let base = if rng.bernoulli(spec.base_p) { 1.0 } else { 0.0 };
            base + if s.is_some() { spec.bump } else { 0.0 }
        })
        .collect();
    Ok(SemiSynthetic { sample, y, stratum })
}

/// One-hot environment indicators, dropping the first level present and any
/// level absent from `envs` so the design stays full rank.
pub fn env_dummies(envs: &[usize], env_names: &[String]) -> (Matrix, Vec<String>) {
    let present: BTreeSet<usize> = envs.iter().copied().collect();
    let levels: Vec<usize> = present.into_iter().skip(1).collect();
    let x = Matrix::from_fn(envs.len(), levels.len(), |i, j| {
        if envs[i] == levels[j] {
            1.0
        } else {
            0.0
        }
    });
    let names = levels
        .iter()
        .map(|&e| format!("env_{}", env_names.get(e).cloned().unwrap_or_else(|| e.to_string())))
        .collect();
    (x, names)
}

/// OLS of `y` on `[1, T, X]` with classical standard errors and two-sided
/// t-test p-values on `n − p` degrees of freedom.
pub fn estimate_ate(
    y: &[f64],
    treatment: &[bool],
    covariates: Option<(&Matrix, &[String])>,
) -> Result<CausalResult> {
    let n = y.len();
    if treatment.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} outcomes but {} treatment indicators",
            treatment.len()
        )));
    }
    let extra = covariates.map_or(0, |(x, _)| x.cols());
    if let Some((x, names)) = covariates {
        if x.rows() != n || names.len() != x.cols() {
            return Err(Error::ShapeMismatch("covariate matrix does not match outcomes".into()));
        }
    }
    let p = 2 + extra;
    let design = Matrix::from_fn(n, p, |i, j| match j {
        0 => 1.0,
        1 => {
            if treatment[i] {
                1.0
            } else {
                0.0
            }
        }
        _ => covariates.expect("covariate column").0.get(i, j - 2),
    });
    let fit = least_squares(&design, y)?;
    let mut names = vec!["const".to_string(), "treatment".to_string()];
    if let Some((_, cov_names)) = covariates {
        names.extend(cov_names.iter().cloned());
    }
    let dof = (n - p) as f64;
    let mut result = CausalResult {
        coef: BTreeMap::new(),
        std_err: BTreeMap::new(),
        t_stat: BTreeMap::new(),
        p_value: BTreeMap::new(),
        n,
        treated_count: treatment.iter().filter(|&&t| t).count(),
        rss: fit.rss,
    };
    for (j, name) in names.into_iter().enumerate() {
        let se = (fit.residual_variance * fit.xtx_inverse.get(j, j)).sqrt();
        let t = fit.coef[j] / se;
        result.coef.insert(name.clone(), fit.coef[j]);
        result.std_err.insert(name.clone(), se);
        result.t_stat.insert(name.clone(), t);
        result.p_value.insert(name, t_two_sided_p(t, dof));
    }
    Ok(result)
}

pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

/// Plain-text regression table, one block per labelled result.
pub fn format_table(rows: &[(String, CausalResult)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<16} {:>10} {:>10} {:>9} {:>9}", "", "coef", "std err", "t", "p");
    for (label, r) in rows {
        let _ = writeln!(out, "{label}  (n={}, treated={})", r.n, r.treated_count);
        let mut names: Vec<&String> = r.coef.keys().collect();
        // const and treatment first, covariates after.
        names.sort_by_key(|n| match n.as_str() {
            "const" => (0, n.to_string()),
            "treatment" => (1, n.to_string()),
            _ => (2, n.to_string()),
        });
        for name in names {
            let p = r.p_value[name];
            let _ = writeln!(
                out,
                "  {:<14} {:>10.3} {:>10.3} {:>9.3} {:>9.4} {}",
                name,
                r.coef[name],
                r.std_err[name],
                r.t_stat[name],
                p,
                significance_stars(p)
            );
        }
    }
    out.push_str("*** p<0.001, ** p<0.01, * p<0.05\n");
    out
}

/// Full pipeline on given topic proportions: sample outcomes, treat
/// documents dominated by the matched topic groups, regress with
/// environment dummies.
pub fn run_experiment(
    corpus: &Corpus,
    proportions: &Matrix,
    groups: &[Vec<usize>],
    spec: &ExperimentSpec,
) -> Result<CausalResult> {
    if proportions.rows() != corpus.num_docs() {
        return Err(Error::ShapeMismatch(format!(
            "{} proportion rows for {} documents",
            proportions.rows(),
            corpus.num_docs()
        )));
    }
    let outcome = semi_synthetic_outcomes(corpus, spec)?;
    let all_t = assign_treatment_groups(proportions, groups)?;
    let t: Vec<bool> = outcome.sample.iter().map(|&i| all_t[i]).collect();
    let envs: Vec<usize> = outcome.sample.iter().map(|&i| corpus.docs[i].env).collect();
    let (x, names) = env_dummies(&envs, &corpus.env_names);
    let cov = (x.cols() > 0).then_some((&x, names.as_slice()));
    estimate_ate(&outcome.y, &t, cov)
}

/// Match every keyword list to its topics and run [`run_experiment`] with
/// proportions inferred by `model`.
pub fn run_model_experiment(
    model: &TrainedModel,
    corpus: &Corpus,
    spec: &ExperimentSpec,
    top_n: usize,
) -> Result<(CausalResult, Vec<TopicMatch>)> {
    spec.validate()?;
    let matches = spec
        .keyword_lists
        .iter()
        .map(|l| match_topic(model, &l.tokens, top_n))
        .collect::<Result<Vec<_>>>()?;
    let groups: Vec<Vec<usize>> = matches.iter().map(|m| m.tied.clone()).collect();
    let theta = infer_theta_matrix(model, &corpus.docs)?;
    Ok((run_experiment(corpus, &theta, &groups, spec)?, matches))
}

/// Generator for a two-environment corpus with keyword topics.
///
/// Topic `l < num_lists` is a keyword topic: it puts large weight on its
/// own `keywords_per_list` tokens and ordinary topics put almost none there.
/// Each document has one dominant topic; keyword-topic prevalence differs
/// by environment, so topics and environments are correlated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedSpec {
    pub num_docs: usize,
    pub vocab_size: usize,
    pub num_topics: usize,
    pub num_lists: usize,
    pub keywords_per_list: usize,
    pub tokens_per_doc: usize,
    /// Log-intensity advantage of the dominant topic.
    pub dominance: f64,
    /// Prevalence of keyword topic `l` in environment `l mod 2`.
    pub home_prevalence: f64,
    /// Prevalence of keyword topic `l` in the other environment.
    pub away_prevalence: f64,
    pub keyword_weight: f64,
    pub gamma_sparsity: f64,
    pub gamma_scale: f64,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        PlantedSpec {
            num_docs: 5000,
            vocab_size: 80,
            num_topics: 6,
            num_lists: 2,
            keywords_per_list: 6,
            tokens_per_doc: 50,
            dominance: 9.0,
            home_prevalence: 0.25,
            away_prevalence: 0.15,
            keyword_weight: 4.0,
            gamma_sparsity: 0.9,
            gamma_scale: 1.0,
            seed: 0,
        }
    }
}

impl PlantedSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_lists == 0 || self.num_lists >= self.num_topics {
            return Err(Error::InvalidConfig(
                "need at least one keyword topic and one ordinary topic".into(),
            ));
        }
        if self.num_lists * self.keywords_per_list >= self.vocab_size {
            return Err(Error::InvalidConfig("keywords exhaust the vocabulary".into()));
        }
        let keyword_mass = self.num_lists as f64 * self.home_prevalence.max(self.away_prevalence);
        if !(self.home_prevalence >= 0.0 && self.away_prevalence >= 0.0 && keyword_mass < 1.0) {
            return Err(Error::InvalidConfig("keyword prevalences must leave room for other topics".into()));
        }
        if self.num_docs == 0 || self.tokens_per_doc == 0 {
            return Err(Error::InvalidConfig("need documents and tokens".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma_sparsity) || !(self.gamma_scale >= 0.0) {
            return Err(Error::InvalidConfig("invalid deviation settings".into()));
        }
        Ok(())
    }

    pub fn keyword_lists(&self) -> Vec<KeywordList> {
        let vocab = synthetic_vocabulary(self.vocab_size);
        (0..self.num_lists)
            .map(|l| KeywordList {
                name: format!("list{l}"),
                tokens: (0..self.keywords_per_list)
                    .map(|i| vocab.terms()[l * self.keywords_per_list + i].clone())
                    .collect(),
            })
            .collect()
    }
}

/// Simulate a [`PlantedSpec`] corpus; also returns its keyword lists.
pub fn generate_planted(spec: &PlantedSpec) -> Result<(Corpus, TrueParams, Vec<KeywordList>)> {
    spec.validate()?;
    let (d, v, k, e) = (spec.num_docs, spec.vocab_size, spec.num_topics, 2);
    let n_kw = spec.num_lists * spec.keywords_per_list;
    let root = RngStream::new(spec.seed, 1);
    let mut rng_beta = root.split(1);
    let mut rng_gamma = root.split(2);
    let mut rng_theta = root.split(3);
    let mut rng_tokens = root.split(4);

    let beta = Matrix::from_fn(k, v, |t, w| {
        let base = rng_beta.normal();
        if w >= n_kw {
            base
        } else if t < spec.num_lists && w / spec.keywords_per_list == t {
            spec.keyword_weight + 0.25 * base
        } else {
            -8.0
        }
    });
    let beta = GlobalTopics { beta };
    let mut gamma = EnvDeviations::zeros(e, k, v);
    let mut support_mask = vec![false; e * k * v];
    for env in 0..e {
        for t in 0..k {
            for w in n_kw..v {
                let keep = !rng_gamma.bernoulli(spec.gamma_sparsity);
                let draw = rng_gamma.normal() * spec.gamma_scale;
                if keep && draw != 0.0 {
                    gamma.set(env, t, w, draw);
                    support_mask[(env * k + t) * v + w] = true;
                }
            }
        }
    }

    let ordinary = (k - spec.num_lists) as f64;
    let prevalence: Vec<Vec<f64>> = (0..e)
        .map(|env| {
            let kw: Vec<f64> = (0..spec.num_lists)
                .map(|l| if l % 2 == env { spec.home_prevalence } else { spec.away_prevalence })
                .collect();
            let rest = (1.0 - kw.iter().sum::<f64>()) / ordinary;
            let mut p = kw;
            p.resize(k, rest);
            p
        })
        .collect();
    let cdfs: Vec<Vec<f64>> = prevalence
        .iter()
        .map(|p| {
            p.iter()
                .scan(0.0, |acc, x| {
                    *acc += x;
                    Some(*acc)
                })
                .collect()
        })
        .collect();

    let mut doc_thetas = Matrix::zeros(d, k);
    let mut docs = Vec::with_capacity(d);
    for i in 0..d {
        let env = i % e;
        let dominant = rng_theta.categorical_cdf(&cdfs[env]);
        for t in 0..k {
            let boost = if t == dominant { spec.dominance } else { 0.0 };
            doc_thetas.set(i, t, (boost + 0.5 * rng_theta.normal()).exp());
        }
        let rates = word_rates(doc_thetas.row(i), &beta, Some(&gamma), env, RateForm::LogAdditive)?;
        docs.push(sample_document(&rates, spec.tokens_per_doc, env, format!("doc{i}"), &mut rng_tokens));
    }
    let corpus = Corpus {
        docs,
        vocab: synthetic_vocabulary(v),
        env_names: (0..e).map(|i| format!("env{i}")).collect(),
    };
    let truth = TrueParams {
        beta,
        gamma,
        doc_thetas,
        support_mask,
    };
    Ok((corpus, truth, spec.keyword_lists()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryOutcome {
    pub true_effect: f64,
    pub mtm: CausalResult,
    pub vtm: CausalResult,
    /// Same pipeline on the generating proportions.
    pub oracle: CausalResult,
}

/// Proportions and keyword-topic groups of the generating process.
pub fn oracle_experiment(
    corpus: &Corpus,
    truth: &TrueParams,
    num_lists: usize,
    spec: &ExperimentSpec,
) -> Result<CausalResult> {
    let groups: Vec<Vec<usize>> = (0..num_lists).map(|l| vec![l]).collect();
    run_experiment(corpus, &truth.doc_proportions(), &groups, spec)
}

/// Simulate a planted corpus, fit MTM (ARD prior) and VTM with `model`'s
/// settings, and estimate the planted effect with each and with the true
/// proportions. `experiment.keyword_lists` is replaced by the planted lists.
pub fn end_to_end_recovery(
    planted: &PlantedSpec,
    experiment: &ExperimentSpec,
    model: &ModelConfig,
) -> Result<RecoveryOutcome> {
    let (corpus, truth, lists) = generate_planted(planted)?;
    let spec = ExperimentSpec {
        keyword_lists: lists,
        ..experiment.clone()
    };
    let fit = |variant: PriorVariant| -> Result<CausalResult> {
        let mut config = model.clone();
        config.prior.variant = variant;
        let trained = train(&corpus, &config)?;
        Ok(run_model_experiment(&trained, &corpus, &spec, 10)?.0)
    };
    Ok(RecoveryOutcome {
        true_effect: spec.bump,
        mtm: fit(PriorVariant::Ard)?,
        vtm: fit(PriorVariant::Vtm)?,
        oracle: oracle_experiment(&corpus, &truth, planted.num_lists, &spec)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;

    fn theta(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn treatment_examples() {
        let m = theta(&[vec![0.6, 0.4], vec![0.5, 0.5]]);
        assert_eq!(assign_treatment(&m, 0).unwrap(), vec![true, true]);
        assert_eq!(assign_treatment(&m, 1).unwrap(), vec![false, false]);
        assert!(assign_treatment(&m, 2).is_err());
    }

    #[test]
    fn pooled_treatment() {
        let m = theta(&[vec![0.3, 0.3, 0.4], vec![0.1, 0.2, 0.7], vec![0.2, 0.2, 0.4]]);
        // Third row ties 0.4 against 0.4; the pooled group holds the smaller index.
        assert_eq!(assign_treatment_groups(&m, &[vec![0, 1]]).unwrap(), vec![true, false, true]);
        // A single-topic group behaves like argmax.
        let single = assign_treatment_groups(&m, &[vec![2]]).unwrap();
        assert_eq!(single, assign_treatment(&m, 2).unwrap());
        let tie = theta(&[vec![0.5, 0.5]]);
        assert_eq!(assign_treatment_groups(&tie, &[vec![1]]).unwrap(), vec![false]);
    }

    #[test]
    fn exact_fit() {
        let t: Vec<bool> = (0..10).map(|i| i % 3 == 0).collect();
        let y: Vec<f64> = t.iter().map(|&x| if x { 5.0 } else { 2.0 }).collect();
        let r = estimate_ate(&y, &t, None).unwrap();
        assert!((r.coef["const"] - 2.0).abs() < 1e-12);
        assert!((r.effect() - 3.0).abs() < 1e-12);
        assert!(r.rss < 1e-20);
        assert_eq!(r.treated_count, 4);
        let table = format_table(&[("fit".into(), r)]);
        let row = table.lines().find(|l| l.trim_start().starts_with("treatment")).unwrap();
        assert!(row.contains("3.000"), "{table}");
        assert!(table.contains("(n=10, treated=4)"));
    }

    #[test]
    fn constant_treatment_is_rank_deficient() {
        let r = estimate_ate(&[1.0, 2.0, 3.0], &[false, false, false], None);
        assert!(matches!(r, Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn shift_moves_only_intercept() {
        let mut rng = RngStream::new(3, 0);
        let t: Vec<bool> = (0..50).map(|_| rng.bernoulli(0.4)).collect();
        let envs: Vec<usize> = (0..50).map(|i| i % 3).collect();
        let names: Vec<String> = (0..3).map(|e| format!("e{e}")).collect();
        let (x, xn) = env_dummies(&envs, &names);
        let y: Vec<f64> = (0..50).map(|_| rng.normal()).collect();
        let shifted: Vec<f64> = y.iter().map(|v| v + 7.5).collect();
        let a = estimate_ate(&y, &t, Some((&x, &xn))).unwrap();
        let b = estimate_ate(&shifted, &t, Some((&x, &xn))).unwrap();
        assert!((b.coef["const"] - a.coef["const"] - 7.5).abs() < 1e-10);
        for name in ["treatment", "env_e1", "env_e2"] {
            assert!((a.coef[name] - b.coef[name]).abs() < 1e-10, "{name}");
        }
    }

    #[test]
    fn dummies_skip_absent_levels() {
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let (x, n) = env_dummies(&[2, 0, 2, 0], &names);
        assert_eq!(n, vec!["env_c"]);
        assert_eq!(x.column(0), vec![1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn stars() {
        assert_eq!(significance_stars(0.0005), "***");
        assert_eq!(significance_stars(0.005), "**");
        assert_eq!(significance_stars(0.03), "*");
        assert_eq!(significance_stars(0.2), "");
    }

    fn keyword_corpus() -> Corpus {
        let vocab = Vocabulary::from_terms(
            ["energy", "oil", "gas", "clean", "health", "other"].iter().map(|s| s.to_string()).collect(),
        )
        .unwrap();
        let doc = |ids: &[usize]| Document::from_map(ids.iter().map(|&i| (i, 1)).collect(), 0, "");
        Corpus {
            docs: vec![doc(&[0, 1, 5]), doc(&[0, 5]), doc(&[5]), doc(&[2, 3]), doc(&[4, 5])],
            vocab,
            env_names: vec!["e".into()],
        }
    }

    fn energy_spec() -> ExperimentSpec {
        ExperimentSpec {
            keyword_lists: vec![KeywordList {
                name: "energy".into(),
                tokens: ["energy", "oil", "gas", "clean"].iter().map(|s| s.to_string()).collect(),
            }],
            samples_per_list: 2,
            extra_samples: 2,
            seed: 4,
            ..ExperimentSpec::default()
        }
    }

    #[test]
    fn outcomes_follow_construction() {
        let corpus = keyword_corpus();
        let s = semi_synthetic_outcomes(&corpus, &energy_spec()).unwrap();
        assert_eq!(s.sample.len(), 4);
        for ((&doc, &y), stratum) in s.sample.iter().zip(&s.y).zip(&s.stratum) {
            if stratum.is_some() {
                assert!([0, 3].contains(&doc));
                assert!(y == 0.2 || y == 1.2);
            } else {
                assert!([1, 2, 4].contains(&doc));
                assert!(y == 0.0 || y == 1.0);
            }
        }
        assert_eq!(s, semi_synthetic_outcomes(&corpus, &energy_spec()).unwrap());
    }

    #[test]
    fn short_strata_are_named() {
        let corpus = keyword_corpus();
        let spec = ExperimentSpec {
            samples_per_list: 3,
            ..energy_spec()
        };
        match semi_synthetic_outcomes(&corpus, &spec) {
            Err(Error::InsufficientDocs { stratum, needed: 3, available: 2 }) => {
                assert_eq!(stratum, "energy")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn planted_keyword_topics_dominate_hits() {
        let spec = PlantedSpec {
            num_docs: 600,
            seed: 2,
            ..PlantedSpec::default()
        };
        let (corpus, truth, lists) = generate_planted(&spec).unwrap();
        let hits = keyword_hits(&corpus, &lists, 2);
        let props = truth.doc_proportions();
        for (l, h) in hits.iter().enumerate() {
            let t = assign_treatment(&props, l).unwrap();
            let agree = h.iter().zip(&t).filter(|(a, b)| a == b).count();
            assert!(agree as f64 / corpus.num_docs() as f64 > 0.97);
        }
    }
}
