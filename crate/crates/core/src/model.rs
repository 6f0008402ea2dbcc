//! The generative model: word rates, multinomial likelihood, priors for each
//! variant, and a forward simulator with known ground truth.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{
    digamma, half_cauchy_logpdf, log_gamma, normal_logpdf, student_t_logpdf, Matrix, RngStream,
    LN_2PI,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RateForm {
    /// `λ_v = Σ_k θ_k · exp(β_kv + γ_ekv)`.
    #[default]
    LogAdditive,
    /// `λ_v = Σ_k θ_k · (exp(β_kv) + exp(γ_ekv))`.
    ExpSum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PriorVariant {
    /// No environment deviations at all.
    Vtm,
    /// Independent `N(0, σ²)` deviations.
    Normal,
    /// Gamma-distributed precision per deviation, marginalized to a Student-t.
    #[default]
    Ard,
    /// Half-Cauchy local (per environment and topic) and global scales.
    Horseshoe,
}

impl PriorVariant {
    pub fn has_gamma(self) -> bool {
        self != PriorVariant::Vtm
    }
}

impl std::str::FromStr for PriorVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vtm" => Ok(PriorVariant::Vtm),
            "normal" => Ok(PriorVariant::Normal),
            "ard" => Ok(PriorVariant::Ard),
            "horseshoe" => Ok(PriorVariant::Horseshoe),
            other => Err(Error::InvalidConfig(format!(
                "unknown prior '{other}' (expected vtm, normal, ard or horseshoe)"
            ))),
        }
    }
}

impl std::str::FromStr for RateForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log_additive" => Ok(RateForm::LogAdditive),
            "exp_sum" => Ok(RateForm::ExpSum),
            other => Err(Error::InvalidConfig(format!(
                "unknown rate form '{other}' (expected log_additive or exp_sum)"
            ))),
        }
    }
}

/// Scalar prior settings as they appear in configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub variant: PriorVariant,
    pub normal_sigma: f64,
    pub ard_a: f64,
    pub ard_b: f64,
    pub hs_lambda: f64,
    pub hs_tau: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            variant: PriorVariant::Ard,
            normal_sigma: 1.0,
            ard_a: 3.7,
            ard_b: 0.34,
            hs_lambda: 0.4,
            hs_tau: 0.4,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("normal_sigma", self.normal_sigma),
            ("ard_a", self.ard_a),
            ("ard_b", self.ard_b),
            ("hs_lambda", self.hs_lambda),
            ("hs_tau", self.hs_tau),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn to_spec(&self, num_envs: usize, num_topics: usize) -> PriorSpec {
        PriorSpec {
            variant: self.variant,
            normal_sigma: self.normal_sigma,
            ard_a: self.ard_a,
            ard_b: self.ard_b,
            hs_lambda: Matrix::filled(num_envs, num_topics, self.hs_lambda),
            hs_tau: self.hs_tau,
        }
    }
}

/// Fully materialized prior over the deviations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub variant: PriorVariant,
    pub normal_sigma: f64,
    pub ard_a: f64,
    pub ard_b: f64,
    /// `E × K` local scales.
    pub hs_lambda: Matrix,
    pub hs_tau: f64,
}

impl PriorSpec {
    /// Student-t parameters of the marginal ARD prior: `(dof, scale)`.
    pub fn ard_student_t(&self) -> (f64, f64) {
        (2.0 * self.ard_a, (self.ard_b / self.ard_a).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_topics: usize,
    pub rate_form: RateForm,
    pub prior: PriorConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eb_steps_per_model_step: usize,
    pub hidden_units: usize,
    pub hidden_layers: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_topics: 20,
            rate_form: RateForm::LogAdditive,
            prior: PriorConfig::default(),
            epochs: 150,
            batch_size: 128,
            lr: 0.01,
            eb_steps_per_model_step: 2,
            hidden_units: 50,
            hidden_layers: 1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_topics == 0 {
            return Err(Error::InvalidConfig("num_topics must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if self.hidden_units == 0 || !(1..=2).contains(&self.hidden_layers) {
            return Err(Error::InvalidConfig(
                "encoder needs hidden_units >= 1 and hidden_layers in {1, 2}".into(),
            ));
        }
        self.prior.validate()
    }
}

/// `K × V` log-scale topic weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalTopics {
    pub beta: Matrix,
}

impl GlobalTopics {
    pub fn num_topics(&self) -> usize {
        self.beta.rows()
    }
    pub fn vocab_size(&self) -> usize {
        self.beta.cols()
    }
}

/// `E × K × V` log-scale deviations stored as an `(E·K) × V` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvDeviations {
    num_envs: usize,
    num_topics: usize,
    values: Matrix,
}

impl EnvDeviations {
    pub fn zeros(num_envs: usize, num_topics: usize, vocab_size: usize) -> Self {
        EnvDeviations {
            num_envs,
            num_topics,
            values: Matrix::zeros(num_envs * num_topics, vocab_size),
        }
    }

    pub fn from_matrix(num_envs: usize, num_topics: usize, values: Matrix) -> Result<Self> {
        if values.rows() != num_envs * num_topics {
            return Err(Error::ShapeMismatch(format!(
                "deviation matrix has {} rows, expected E·K = {}",
                values.rows(),
                num_envs * num_topics
            )));
        }
        Ok(EnvDeviations {
            num_envs,
            num_topics,
            values,
        })
    }

    pub fn num_envs(&self) -> usize {
        self.num_envs
    }
    pub fn num_topics(&self) -> usize {
        self.num_topics
    }
    pub fn vocab_size(&self) -> usize {
        self.values.cols()
    }
    pub fn matrix(&self) -> &Matrix {
        &self.values
    }
    pub fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.values
    }
    pub fn into_matrix(self) -> Matrix {
        self.values
    }
    pub fn row(&self, env: usize, topic: usize) -> &[f64] {
        self.values.row(env * self.num_topics + topic)
    }
    pub fn get(&self, env: usize, topic: usize, word: usize) -> f64 {
        self.values.get(env * self.num_topics + topic, word)
    }
    pub fn set(&mut self, env: usize, topic: usize, word: usize, value: f64) {
        self.values.set(env * self.num_topics + topic, word, value)
    }
}

/// Unnormalized word rates for one document in environment `env`.
/// `gamma = None` means no deviation term at all.
pub fn word_rates(
    theta: &[f64],
    beta: &GlobalTopics,
    gamma: Option<&EnvDeviations>,
    env: usize,
    rate_form: RateForm,
) -> Result<Vec<f64>> {
    let k = beta.num_topics();
    if theta.len() != k {
        return Err(Error::ShapeMismatch(format!(
            "theta has {} entries for {k} topics",
            theta.len()
        )));
    }
    if let Some(g) = gamma {
        if env >= g.num_envs() {
            return Err(Error::EnvOutOfRange {
                env,
                num_envs: g.num_envs(),
            });
        }
        if g.num_topics() != k || g.vocab_size() != beta.vocab_size() {
            return Err(Error::ShapeMismatch("deviations do not match topic shape".into()));
        }
    }
    let mut rates = vec![0.0; beta.vocab_size()];
    for (t, &weight) in theta.iter().enumerate() {
        let b = beta.beta.row(t);
        match (gamma, rate_form) {
            (None, _) => {
                for (r, &bv) in rates.iter_mut().zip(b) {
                    *r += weight * bv.exp();
                }
            }
            (Some(g), RateForm::LogAdditive) => {
                for ((r, &bv), &gv) in rates.iter_mut().zip(b).zip(g.row(env, t)) {
                    *r += weight * (bv + gv).exp();
                }
            }
            (Some(g), RateForm::ExpSum) => {
                for ((r, &bv), &gv) in rates.iter_mut().zip(b).zip(g.row(env, t)) {
                    *r += weight * (bv.exp() + gv.exp());
                }
            }
        }
    }
    Ok(rates)
}

/// Normalized word distribution from log topic intensities, computed with
/// max-shifts so large weights do not overflow.
pub fn word_distribution(
    log_theta: &[f64],
    beta: &GlobalTopics,
    gamma: Option<&EnvDeviations>,
    env: usize,
    rate_form: RateForm,
) -> Result<Vec<f64>> {
    let basis = RateBasis::build(beta, gamma.map(|g| (g, env)), rate_form)?;
    let mut shifted = vec![0.0; log_theta.len()];
    basis.shifted_theta(log_theta, &mut shifted);
    let mut rates = vec![0.0; beta.vocab_size()];
    for (t, &w) in shifted.iter().enumerate() {
        for (r, &e) in rates.iter_mut().zip(basis.total.row(t)) {
            *r += w * e;
        }
    }
    crate::numerics::normalize_l1(&rates)
}

/// Multinomial log-likelihood of `counts` under normalized `rates`,
/// without the multinomial coefficient.
pub fn log_likelihood(counts: &[(usize, u32)], rates: &[f64]) -> Result<f64> {
    let total: f64 = rates.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroMass);
    }
    let mut ll = 0.0;
    for &(v, c) in counts {
        let r = *rates.get(v).ok_or_else(|| {
            Error::ShapeMismatch(format!("term id {v} outside {} rates", rates.len()))
        })?;
        ll += c as f64 * (r / total).ln();
    }
    Ok(ll)
}

/// Sum of standard-normal log densities over every β entry and every
/// log-intensity latent.
pub fn log_prior_global(beta: &GlobalTopics, log_theta: &Matrix) -> f64 {
    beta.beta
        .as_slice()
        .iter()
        .chain(log_theta.as_slice())
        .map(|&x| -0.5 * LN_2PI - 0.5 * x * x)
        .sum()
}

/// Log prior density of the deviations, including the half-Cauchy
/// hyperprior terms for the horseshoe variant.
pub fn log_prior_gamma(gamma: &EnvDeviations, prior: &PriorSpec) -> Result<f64> {
    let values = gamma.matrix().as_slice();
    match prior.variant {
        PriorVariant::Vtm => Err(Error::VariantMismatch(
            "VTM has no deviation prior".into(),
        )),
        PriorVariant::Normal => Ok(values
            .iter()
            .map(|&g| normal_logpdf(g, 0.0, prior.normal_sigma))
            .sum()),
        PriorVariant::Ard => {
            let (dof, scale) = prior.ard_student_t();
            values
                .iter()
                .map(|&g| student_t_logpdf(g, dof, scale))
                .sum()
        }
        PriorVariant::Horseshoe => {
            check_lambda_shape(gamma, prior)?;
            let mut total = half_cauchy_logpdf(prior.hs_tau, 1.0)?;
            for e in 0..gamma.num_envs() {
                for k in 0..gamma.num_topics() {
                    let lam = prior.hs_lambda.get(e, k);
                    total += half_cauchy_logpdf(lam, 1.0)?;
                    let sd = lam * prior.hs_tau;
                    total += gamma
                        .row(e, k)
                        .iter()
                        .map(|&g| normal_logpdf(g, 0.0, sd))
                        .sum::<f64>();
                }
            }
            Ok(total)
        }
    }
}

fn check_lambda_shape(gamma: &EnvDeviations, prior: &PriorSpec) -> Result<()> {
    if prior.hs_lambda.shape() != (gamma.num_envs(), gamma.num_topics()) {
        return Err(Error::ShapeMismatch(format!(
            "horseshoe local scales are {:?}, deviations need {}x{}",
            prior.hs_lambda.shape(),
            gamma.num_envs(),
            gamma.num_topics()
        )));
    }
    Ok(())
}

/// Value and gradients of the deviation prior.
///
/// `d_hyper` holds derivatives with respect to the log of each optimized
/// hyperparameter: `[log a, log b]` for ARD, `[log λ_ek (row-major E×K)…, log τ]`
/// for the horseshoe, empty otherwise.
#[derive(Clone, Debug)]
pub struct GammaPriorEval {
    pub value: f64,
    pub d_gamma: Matrix,
    pub d_hyper: Vec<f64>,
}

pub fn gamma_prior_with_grad(gamma: &EnvDeviations, prior: &PriorSpec) -> Result<GammaPriorEval> {
    let values = gamma.matrix();
    let mut d_gamma = Matrix::zeros(values.rows(), values.cols());
    match prior.variant {
        PriorVariant::Vtm => Err(Error::VariantMismatch(
            "VTM has no deviation prior".into(),
        )),
        PriorVariant::Normal => {
            let s2 = prior.normal_sigma * prior.normal_sigma;
            let c = -0.5 * LN_2PI - prior.normal_sigma.ln();
            let mut value = 0.0;
            for (d, &g) in d_gamma.as_mut_slice().iter_mut().zip(values.as_slice()) {
                value += c - 0.5 * g * g / s2;
                *d = -g / s2;
            }
            Ok(GammaPriorEval {
                value,
                d_gamma,
                d_hyper: Vec::new(),
            })
        }
        PriorVariant::Ard => {
            let (a, b) = (prior.ard_a, prior.ard_b);
            let c = log_gamma(a + 0.5)? - log_gamma(a)? - 0.5 * (LN_2PI + b.ln());
            let shape = a + 0.5;
            let mut value = 0.0;
            let mut sum_log1p = 0.0;
            let mut sum_ratio = 0.0;
            for (d, &g) in d_gamma.as_mut_slice().iter_mut().zip(values.as_slice()) {
                let g2 = g * g;
                let l = (g2 / (2.0 * b)).ln_1p();
                value += c - shape * l;
                *d = -shape * g / (b + 0.5 * g2);
                sum_log1p += l;
                sum_ratio += g2 / (2.0 * b + g2);
            }
            let n = values.as_slice().len() as f64;
            let d_log_a = a * (n * (digamma(a + 0.5) - digamma(a)) - sum_log1p);
            let d_log_b = -0.5 * n + shape * sum_ratio;
            Ok(GammaPriorEval {
                value,
                d_gamma,
                d_hyper: vec![d_log_a, d_log_b],
            })
        }
        PriorVariant::Horseshoe => {
            check_lambda_shape(gamma, prior)?;
            let tau = prior.hs_tau;
            let (ne, nk) = (gamma.num_envs(), gamma.num_topics());
            let mut d_hyper = vec![0.0; ne * nk + 1];
            let mut value = half_cauchy_logpdf(tau, 1.0)?;
            let mut d_log_tau = -2.0 * tau * tau / (1.0 + tau * tau);
            for e in 0..ne {
                for k in 0..nk {
                    let lam = prior.hs_lambda.get(e, k);
                    let var = lam * lam * tau * tau;
                    let c = -0.5 * LN_2PI - (lam * tau).ln();
                    value += half_cauchy_logpdf(lam, 1.0)?;
                    let mut d_log_lam = -2.0 * lam * lam / (1.0 + lam * lam);
                    let row = e * nk + k;
                    let drow = d_gamma.row_mut(row);
                    for (d, &g) in drow.iter_mut().zip(values.row(row)) {
                        let q = g * g / var;
                        value += c - 0.5 * q;
                        *d = -g / var;
                        d_log_lam += q - 1.0;
                        d_log_tau += q - 1.0;
                    }
                    d_hyper[row] = d_log_lam;
                }
            }
            d_hyper[ne * nk] = d_log_tau;
            Ok(GammaPriorEval {
                value,
                d_gamma,
                d_hyper,
            })
        }
    }
}

/// Per-environment exponentiated weights, shifted by the largest exponent so
/// every entry is at most one. Scaling all rates of a document by a constant
/// leaves the normalized likelihood and its parameter gradients unchanged.
#[derive(Clone, Debug)]
pub(crate) struct RateBasis {
    /// `K × V` weights entering `λ_v = Σ_k θ_k total_kv`.
    pub total: Matrix,
    /// Derivative of `total` with respect to β (elementwise).
    pub beta_part: Matrix,
    /// Derivative of `total` with respect to γ_e; `None` without deviations.
    /// For the log-additive form this equals `total`.
    pub gamma_part: Option<Matrix>,
    /// `Σ_v total_kv`.
    pub row_sums: Vec<f64>,
}

impl RateBasis {
    pub fn build(
        beta: &GlobalTopics,
        gamma: Option<(&EnvDeviations, usize)>,
        form: RateForm,
    ) -> Result<RateBasis> {
        let (k, v) = beta.beta.shape();
        let b = beta.beta.as_slice();
        if let Some((g, env)) = gamma {
            if env >= g.num_envs() {
                return Err(Error::EnvOutOfRange {
                    env,
                    num_envs: g.num_envs(),
                });
            }
        }
        let g_slice = gamma.map(|(g, env)| {
            let m = g.matrix().as_slice();
            &m[env * k * v..(env + 1) * k * v]
        });
        let (total, beta_part, gamma_part) = match (g_slice, form) {
            (None, _) => {
                let shift = max_of(b);
                let t = Matrix::from_vec(k, v, b.iter().map(|x| (x - shift).exp()).collect())?;
                (t.clone(), t, None)
            }
            (Some(gs), RateForm::LogAdditive) => {
                let sums: Vec<f64> = b.iter().zip(gs).map(|(x, y)| x + y).collect();
                let shift = max_of(&sums);
                let t = Matrix::from_vec(k, v, sums.iter().map(|x| (x - shift).exp()).collect())?;
                (t.clone(), t.clone(), Some(t))
            }
            (Some(gs), RateForm::ExpSum) => {
                let shift = max_of(b).max(max_of(gs));
                let bp = Matrix::from_vec(k, v, b.iter().map(|x| (x - shift).exp()).collect())?;
                let gp = Matrix::from_vec(k, v, gs.iter().map(|x| (x - shift).exp()).collect())?;
                let t = Matrix::from_vec(
                    k,
                    v,
                    bp.as_slice().iter().zip(gp.as_slice()).map(|(x, y)| x + y).collect(),
                )?;
                (t, bp, Some(gp))
            }
        };
        let row_sums = (0..k).map(|t| total.row(t).iter().sum()).collect();
        Ok(RateBasis {
            total,
            beta_part,
            gamma_part,
            row_sums,
        })
    }

    /// `exp(log_theta − max log_theta)` into `out`.
    pub fn shifted_theta(&self, log_theta: &[f64], out: &mut [f64]) {
        let m = max_of(log_theta);
        for (o, &l) in out.iter_mut().zip(log_theta) {
            *o = (l - m).exp();
        }
    }
}

fn max_of(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Result of scoring one document: log-likelihood, gradient with respect to
/// the log intensities, and sparse coefficients for the topic-word gradient.
pub(crate) struct DocScore {
    pub loglik: f64,
    pub d_log_theta: Vec<f64>,
    /// `N / Λ` times the shifted intensities; multiplies `−part_kv` densely.
    pub dense_coef: Vec<f64>,
    /// `(v, c_v / λ_v)` for the document's observed words.
    pub sparse_coef: Vec<(usize, f64)>,
    pub shifted_theta: Vec<f64>,
}

/// Log-likelihood of `counts` given log intensities, in `O(K · nnz)`.
pub(crate) fn score_document(
    counts: &[(usize, u32)],
    log_theta: &[f64],
    basis: &RateBasis,
) -> DocScore {
    let k = log_theta.len();
    let mut theta = vec![0.0; k];
    basis.shifted_theta(log_theta, &mut theta);
    let big_lambda: f64 = theta.iter().zip(&basis.row_sums).map(|(a, b)| a * b).sum();
    let n: f64 = counts.iter().map(|&(_, c)| c as f64).sum();
    let mut loglik = 0.0;
    let mut d_log_theta: Vec<f64> = theta
        .iter()
        .zip(&basis.row_sums)
        .map(|(t, rs)| -n / big_lambda * t * rs)
        .collect();
    let mut sparse_coef = Vec::with_capacity(counts.len());
    for &(v, c) in counts {
        let c = c as f64;
        let lam: f64 = (0..k).map(|t| theta[t] * basis.total.get(t, v)).sum();
        loglik += c * (lam / big_lambda).ln();
        let coef = c / lam;
        for t in 0..k {
            d_log_theta[t] += coef * theta[t] * basis.total.get(t, v);
        }
        sparse_coef.push((v, coef));
    }
    DocScore {
        loglik,
        d_log_theta,
        dense_coef: theta.iter().map(|t| n / big_lambda * t).collect(),
        sparse_coef,
        shifted_theta: theta,
    }
}

/// Generator settings for [`generate_synthetic`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenSpec {
    pub num_docs: usize,
    pub vocab_size: usize,
    pub num_topics: usize,
    pub num_envs: usize,
    pub tokens_per_doc: usize,
    pub gamma_sparsity: f64,
    pub gamma_scale: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            num_docs: 500,
            vocab_size: 60,
            num_topics: 4,
            num_envs: 2,
            tokens_per_doc: 50,
            gamma_sparsity: 0.9,
            gamma_scale: 1.0,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_docs", self.num_docs),
            ("vocab_size", self.vocab_size),
            ("num_topics", self.num_topics),
            ("num_envs", self.num_envs),
            ("tokens_per_doc", self.tokens_per_doc),
        ];
        for (name, n) in counts {
            if n == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma_sparsity) {
            return Err(Error::InvalidConfig(format!(
                "gamma_sparsity must be in [0, 1], got {}",
                self.gamma_sparsity
            )));
        }
        if !(self.gamma_scale >= 0.0) {
            return Err(Error::InvalidConfig("gamma_scale must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Ground truth behind a simulated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrueParams {
    pub beta: GlobalTopics,
    pub gamma: EnvDeviations,
    /// `D × K` topic intensities (positive, unnormalized).
    pub doc_thetas: Matrix,
    /// Row-major `E × K × V`; true exactly where the deviation is nonzero.
    pub support_mask: Vec<bool>,
}

impl TrueParams {
    /// Intensities normalized to topic proportions, one row per document.
    pub fn doc_proportions(&self) -> Matrix {
        let mut m = self.doc_thetas.clone();
        for i in 0..m.rows() {
            let row = m.row_mut(i);
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        m
    }
}

pub fn synthetic_vocabulary(vocab_size: usize) -> Vocabulary {
    let width = vocab_size.saturating_sub(1).to_string().len().max(4);
    Vocabulary::from(
        (0..vocab_size)
            .map(|v| format!("w{v:0width$}"))
            .collect::<Vec<_>>(),
    )
}

/// Forward-simulate documents from the generative process.
///
/// β is standard normal, each deviation is zero with probability
/// `gamma_sparsity` and `N(0, gamma_scale²)` otherwise, intensities are
/// lognormal(0, 1), document `d` belongs to environment `d mod E`, and every
/// document draws `tokens_per_doc` tokens from its log-additive rates.
pub fn generate_synthetic(spec: &GenSpec) -> Result<(Corpus, TrueParams)> {
    spec.validate()?;
    let (d, v, k, e) = (spec.num_docs, spec.vocab_size, spec.num_topics, spec.num_envs);
    let root = RngStream::new(spec.seed, 0);
    let mut rng_beta = root.split(1);
    let mut rng_gamma = root.split(2);
    let mut rng_theta = root.split(3);
    let mut rng_tokens = root.split(4);

    let beta = GlobalTopics {
        beta: Matrix::from_fn(k, v, |_, _| rng_beta.normal()),
    };
    let mut gamma = EnvDeviations::zeros(e, k, v);
    let mut support_mask = vec![false; e * k * v];
    for (i, slot) in gamma.matrix_mut().as_mut_slice().iter_mut().enumerate() {
        let keep = !rng_gamma.bernoulli(spec.gamma_sparsity);
        let draw = rng_gamma.normal() * spec.gamma_scale;
        if keep && draw != 0.0 {
            *slot = draw;
            support_mask[i] = true;
        }
    }
    let doc_thetas = Matrix::from_fn(d, k, |_, _| rng_theta.normal().exp());

    let vocab = synthetic_vocabulary(v);
    let docs = (0..d)
        .map(|i| {
            let env = i % e;
            let rates = word_rates(doc_thetas.row(i), &beta, Some(&gamma), env, RateForm::LogAdditive)?;
            Ok(sample_document(&rates, spec.tokens_per_doc, env, format!("doc{i}"), &mut rng_tokens))
        })
        .collect::<Result<Vec<_>>>()?;
    let corpus = Corpus {
        docs,
        vocab,
        env_names: (0..e).map(|i| format!("env{i}")).collect(),
    };
    Ok((
        corpus,
        TrueParams {
            beta,
            gamma,
            doc_thetas,
            support_mask,
        },
    ))
}

pub(crate) fn sample_document(
    rates: &[f64],
    tokens: usize,
    env: usize,
    raw_id: String,
    rng: &mut RngStream,
) -> Document {
    let mut cdf = Vec::with_capacity(rates.len());
    let mut acc = 0.0;
    for &r in rates {
        acc += r;
        cdf.push(acc);
    }
    let mut counts = BTreeMap::new();
    for _ in 0..tokens {
        *counts.entry(rng.categorical_cdf(&cdf)).or_insert(0u32) += 1;
    }
    Document::from_map(counts, env, raw_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn topics(rows: &[Vec<f64>]) -> GlobalTopics {
        GlobalTopics {
            beta: Matrix::from_rows(rows).unwrap(),
        }
    }

    #[test]
    fn rates_pure_global_topic() {
        let beta = topics(&[vec![0.3, -1.2, 2.0]]);
        let gamma = EnvDeviations::zeros(1, 1, 3);
        let r = word_rates(&[1.0], &beta, Some(&gamma), 0, RateForm::LogAdditive).unwrap();
        for (x, b) in r.iter().zip([0.3f64, -1.2, 2.0]) {
            assert_abs_diff_eq!(*x, b.exp(), epsilon = 1e-14);
        }
    }

    #[test]
    fn rates_exact_arithmetic() {
        let beta = topics(&[vec![0.0, 0.0]]);
        let gamma =
            EnvDeviations::from_matrix(1, 1, Matrix::from_rows(&[vec![2f64.ln(), 0.0]]).unwrap())
                .unwrap();
        let r = word_rates(&[2.0], &beta, Some(&gamma), 0, RateForm::LogAdditive).unwrap();
        assert_abs_diff_eq!(r[0], 4.0, epsilon = 1e-14);
        assert_abs_diff_eq!(r[1], 2.0, epsilon = 1e-14);

        let beta2 = topics(&[vec![0.0; 3], vec![0.0; 3]]);
        let g2 = EnvDeviations::zeros(1, 2, 3);
        let r = word_rates(&[1.0, 1.0], &beta2, Some(&g2), 0, RateForm::ExpSum).unwrap();
        assert_eq!(r, vec![4.0; 3]);
    }

    #[test]
    fn rates_env_out_of_range() {
        let beta = topics(&[vec![0.0, 0.0]]);
        let g = EnvDeviations::zeros(2, 1, 2);
        assert!(matches!(
            word_rates(&[1.0], &beta, Some(&g), 2, RateForm::LogAdditive),
            Err(Error::EnvOutOfRange { env: 2, num_envs: 2 })
        ));
    }

    #[test]
    fn zero_deviation_matches_softmax_mixture() {
        // log-additive with γ = 0 against a K-weighted mixture of per-topic
        // softmax distributions, weights θ_k·Z_k.
        let mut rng = RngStream::new(4, 0);
        let beta = GlobalTopics {
            beta: Matrix::from_fn(3, 7, |_, _| rng.normal()),
        };
        let theta = [0.4, 1.7, 0.2];
        let g = EnvDeviations::zeros(1, 3, 7);
        let p = word_distribution(&theta.map(f64::ln), &beta, Some(&g), 0, RateForm::LogAdditive)
            .unwrap();
        let no_gamma =
            word_distribution(&theta.map(f64::ln), &beta, None, 0, RateForm::ExpSum).unwrap();
        let mut oracle = [0.0; 7];
        let mut weight_total = 0.0;
        for (t, &w) in theta.iter().enumerate() {
            let z: f64 = beta.beta.row(t).iter().map(|b| b.exp()).sum();
            weight_total += w * z;
            for (o, b) in oracle.iter_mut().zip(beta.beta.row(t)) {
                *o += w * z * (b.exp() / z);
            }
        }
        for v in 0..7 {
            assert_abs_diff_eq!(p[v], oracle[v] / weight_total, epsilon = 1e-14);
            assert_abs_diff_eq!(no_gamma[v], p[v], epsilon = 1e-14);
        }
    }

    #[test]
    fn likelihood_examples() {
        assert_abs_diff_eq!(log_likelihood(&[(0, 1)], &[1.0, 1.0]).unwrap(), 0.5f64.ln(), epsilon = 1e-15);
        let ll = log_likelihood(&[(0, 2), (1, 1)], &[2.0, 1.0]).unwrap();
        assert_abs_diff_eq!(ll, 2.0 * (2.0f64 / 3.0).ln() + (1.0f64 / 3.0).ln(), epsilon = 1e-14);
        assert_abs_diff_eq!(ll, -1.909_542_504_884_438_7, epsilon = 1e-12);
        assert!(matches!(log_likelihood(&[(0, 1)], &[0.0, 0.0]), Err(Error::ZeroMass)));
    }

    #[test]
    fn score_document_matches_reference() {
        let mut rng = RngStream::new(9, 0);
        let beta = GlobalTopics {
            beta: Matrix::from_fn(3, 10, |_, _| rng.normal()),
        };
        let gamma = EnvDeviations::from_matrix(2, 3, Matrix::from_fn(6, 10, |_, _| rng.normal() * 0.5))
            .unwrap();
        let log_theta = [0.3, -1.0, 0.8];
        let counts = [(1, 3), (4, 1), (9, 2)];
        for form in [RateForm::LogAdditive, RateForm::ExpSum] {
            let rates =
                word_rates(&log_theta.map(f64::exp), &beta, Some(&gamma), 1, form).unwrap();
            let want = log_likelihood(&counts, &rates).unwrap();
            let basis = RateBasis::build(&beta, Some((&gamma, 1)), form).unwrap();
            let got = score_document(&counts, &log_theta, &basis);
            assert_abs_diff_eq!(got.loglik, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn global_prior_examples() {
        let beta = GlobalTopics {
            beta: Matrix::zeros(2, 3),
        };
        let lt = Matrix::zeros(4, 2);
        assert_abs_diff_eq!(log_prior_global(&beta, &lt), 14.0 * (-0.5 * LN_2PI), epsilon = 1e-12);
        let one = GlobalTopics {
            beta: Matrix::filled(1, 1, 1.0),
        };
        assert_abs_diff_eq!(
            log_prior_global(&one, &Matrix::zeros(0, 0)),
            -0.5 * LN_2PI - 0.5,
            epsilon = 1e-15
        );
    }

    fn spec(variant: PriorVariant, e: usize, k: usize) -> PriorSpec {
        PriorConfig {
            variant,
            ard_a: 1.0,
            ard_b: 1.0,
            ..PriorConfig::default()
        }
        .to_spec(e, k)
    }

    #[test]
    fn ard_prior_at_zero() {
        let g = EnvDeviations::zeros(2, 3, 5);
        let lp = log_prior_gamma(&g, &spec(PriorVariant::Ard, 2, 3)).unwrap();
        let per = student_t_logpdf(0.0, 2.0, 1.0).unwrap();
        assert_abs_diff_eq!(lp, 30.0 * per, epsilon = 1e-10);
    }

    #[test]
    fn vtm_has_no_gamma_prior() {
        let g = EnvDeviations::zeros(1, 1, 1);
        assert!(matches!(
            log_prior_gamma(&g, &spec(PriorVariant::Vtm, 1, 1)),
            Err(Error::VariantMismatch(_))
        ));
    }

    #[test]
    fn prior_value_paths_agree() {
        let mut rng = RngStream::new(12, 0);
        let g = EnvDeviations::from_matrix(2, 3, Matrix::from_fn(6, 4, |_, _| rng.normal())).unwrap();
        for variant in [PriorVariant::Normal, PriorVariant::Ard, PriorVariant::Horseshoe] {
            let mut p = spec(variant, 2, 3);
            p.ard_a = 3.7;
            p.ard_b = 0.34;
            p.hs_lambda = Matrix::from_fn(2, 3, |i, j| 0.3 + 0.1 * (i + j) as f64);
            let a = log_prior_gamma(&g, &p).unwrap();
            let b = gamma_prior_with_grad(&g, &p).unwrap().value;
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn synthetic_full_sparsity_has_empty_support() {
        let s = GenSpec {
            num_docs: 20,
            gamma_sparsity: 1.0,
            ..GenSpec::default()
        };
        let (corpus, truth) = generate_synthetic(&s).unwrap();
        assert!(truth.support_mask.iter().all(|m| !m));
        assert!(truth.gamma.matrix().as_slice().iter().all(|&g| g == 0.0));
        assert_eq!(corpus.num_docs(), 20);
        assert!(corpus.docs.iter().all(|d| d.total() == 50));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let s = GenSpec {
            num_docs: 30,
            seed: 17,
            ..GenSpec::default()
        };
        let (c1, t1) = generate_synthetic(&s).unwrap();
        let (c2, t2) = generate_synthetic(&s).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(t1, t2);
        let (c3, _) = generate_synthetic(&GenSpec { seed: 18, ..s }).unwrap();
        assert_ne!(c1, c3);
    }

    proptest! {
        #[test]
        fn rates_strictly_positive(
            vals in proptest::collection::vec(-30.0f64..30.0, 12),
            gvals in proptest::collection::vec(-30.0f64..30.0, 12),
            lt in proptest::collection::vec(-20.0f64..20.0, 2),
        ) {
            let beta = GlobalTopics { beta: Matrix::from_vec(2, 6, vals).unwrap() };
            let g = EnvDeviations::from_matrix(1, 2, Matrix::from_vec(2, 6, gvals).unwrap()).unwrap();
            for form in [RateForm::LogAdditive, RateForm::ExpSum] {
                let theta: Vec<f64> = lt.iter().map(|x| x.exp()).collect();
                let r = word_rates(&theta, &beta, Some(&g), 0, form).unwrap();
                prop_assert!(r.iter().all(|&x| x > 0.0));
                let p = word_distribution(&lt, &beta, Some(&g), 0, form).unwrap();
                prop_assert!(p.iter().all(|&x| x > 0.0));
            }
        }

        #[test]
        fn likelihood_scale_invariant(
            rates in proptest::collection::vec(0.01f64..10.0, 5),
            c in 1e-3f64..1e3,
        ) {
            let counts = [(0, 2), (3, 1), (4, 5)];
            let scaled: Vec<f64> = rates.iter().map(|r| r * c).collect();
            let a = log_likelihood(&counts, &rates).unwrap();
            let b = log_likelihood(&counts, &scaled).unwrap();
            prop_assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
        }

        #[test]
        fn ard_prior_is_even(g in -5.0f64..5.0, a in 0.2f64..6.0, b in 0.05f64..3.0) {
            let mut p = spec(PriorVariant::Ard, 1, 1);
            p.ard_a = a;
            p.ard_b = b;
            let pos = EnvDeviations::from_matrix(1, 1, Matrix::filled(1, 1, g)).unwrap();
            let neg = EnvDeviations::from_matrix(1, 1, Matrix::filled(1, 1, -g)).unwrap();
            prop_assert_eq!(log_prior_gamma(&pos, &p).unwrap(), log_prior_gamma(&neg, &p).unwrap());
        }

        #[test]
        fn global_prior_translation(xs in proptest::collection::vec(-4.0f64..4.0, 1..10)) {
            let n = xs.len();
            let beta = GlobalTopics { beta: Matrix::from_vec(1, n, xs.clone()).unwrap() };
            let zero = GlobalTopics { beta: Matrix::zeros(1, n) };
            let empty = Matrix::zeros(0, 0);
            let diff = log_prior_global(&beta, &empty) - log_prior_global(&zero, &empty);
            let sq: f64 = xs.iter().map(|x| x * x).sum();
            prop_assert!((diff + 0.5 * sq).abs() < 1e-10);
        }
    }
}
