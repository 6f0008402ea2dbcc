//! Single-sample reparameterized ELBO with exact gradients.

use rayon::prelude::*;

use super::encoder::{EncodeMode, LOG_SIGMA_CLAMP};
use super::state::{StateGrad, VariationalState};
use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::model::{gamma_prior_with_grad, score_document, EnvDeviations, GlobalTopics, RateBasis};
use crate::numerics::{Matrix, RngStream, LN_2PI};

/// Source of the standard-normal noise driving the reparameterization.
pub enum Noise<'a> {
    Sampled(&'a mut RngStream),
    /// All noise zero: every latent sits at its variational mean.
    Mean,
}

impl Noise<'_> {
    fn draw(&mut self, n: usize) -> Vec<f64> {
        match self {
            Noise::Sampled(rng) => rng.normal_vec(n),
            Noise::Mean => vec![0.0; n],
        }
    }
}

/// One joint draw of the latents, plus the noise that produced it.
#[derive(Clone, Debug)]
pub struct Latents {
    /// `B × K`.
    pub log_theta: Matrix,
    pub theta: Matrix,
    /// `K × V`.
    pub beta: Matrix,
    /// `(E·K) × V`.
    pub gamma: Option<Matrix>,
    pub z_theta: Matrix,
    pub z_beta: Matrix,
    pub z_gamma: Option<Matrix>,
}

#[inline]
pub(crate) fn clamped_sigma(log_sigma: f64) -> f64 {
    log_sigma.clamp(-LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP).exp()
}

fn reparam(mu: &Matrix, log_sigma: &Matrix, z: &Matrix) -> Matrix {
    let data = mu
        .as_slice()
        .iter()
        .zip(log_sigma.as_slice())
        .zip(z.as_slice())
        .map(|((m, ls), z)| m + clamped_sigma(*ls) * z)
        .collect();
    Matrix::from_vec(mu.rows(), mu.cols(), data).expect("shapes agree")
}

/// Draw β, γ and per-document log intensities. Noise is consumed in the
/// order β, γ, θ.
pub fn sample_latents(
    state: &VariationalState,
    doc_mus: &Matrix,
    doc_log_sigmas: &Matrix,
    mut noise: Noise<'_>,
) -> Latents {
    let p = &state.params;
    let (k, v) = p.mu_beta.shape();
    let z_beta = Matrix::from_vec(k, v, noise.draw(k * v)).unwrap();
    let z_gamma = p
        .mu_gamma
        .as_ref()
        .map(|m| Matrix::from_vec(m.rows(), v, noise.draw(m.rows() * v)).unwrap());
    let (b, kk) = doc_mus.shape();
    let z_theta = Matrix::from_vec(b, kk, noise.draw(b * kk)).unwrap();

    let beta = reparam(&p.mu_beta, &p.log_sigma_beta, &z_beta);
    let gamma = match (&p.mu_gamma, &p.log_sigma_gamma, &z_gamma) {
        (Some(m), Some(s), Some(z)) => Some(reparam(m, s, z)),
        _ => None,
    };
    let log_theta = reparam(doc_mus, doc_log_sigmas, &z_theta);
    let theta = Matrix::from_vec(b, kk, log_theta.as_slice().iter().map(|x| x.exp()).collect()).unwrap();
    Latents {
        log_theta,
        theta,
        beta,
        gamma,
        z_theta,
        z_beta,
        z_gamma,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ElboOptions {
    /// Multiplies the data log-likelihood; 1 for the actual objective.
    pub likelihood_weight: f64,
}

impl Default for ElboOptions {
    fn default() -> Self {
        ElboOptions {
            likelihood_weight: 1.0,
        }
    }
}

/// Components of the sampled ELBO. Local terms are already scaled by
/// `D_total / |batch|`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ElboTerms {
    pub likelihood: f64,
    pub local_prior: f64,
    pub local_entropy: f64,
    pub global_prior: f64,
    pub global_entropy: f64,
    pub total: f64,
}

pub struct ElboOutput {
    pub terms: ElboTerms,
    pub grads: StateGrad,
    pub stats: super::encoder::BatchStats,
}

/// Sampled ELBO of a minibatch and its gradient with respect to every
/// variational parameter and every log hyperparameter.
pub fn elbo(
    batch: &[&Document],
    state: &VariationalState,
    d_total: f64,
    noise: Noise<'_>,
    opts: ElboOptions,
) -> Result<ElboOutput> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("ELBO needs a nonempty batch".into()));
    }
    for d in batch {
        if d.env >= state.num_envs {
            return Err(Error::EnvOutOfRange {
                env: d.env,
                num_envs: state.num_envs,
            });
        }
    }
    let p = &state.params;
    let (k, v) = p.mu_beta.shape();
    let b = batch.len();
    let scale = d_total / b as f64;
    let w = opts.likelihood_weight;

    let (enc, cache) = p.encoder.forward(batch, EncodeMode::Train)?;
    let lat = sample_latents(state, &enc.mu, &enc.log_sigma, noise);

    let beta = GlobalTopics {
        beta: lat.beta.clone(),
    };
    let gamma = lat
        .gamma
        .clone()
        .map(|g| EnvDeviations::from_matrix(state.num_envs, k, g))
        .transpose()?;

    // Likelihood and its gradient, grouped by environment so each rate basis
    // is built once per batch.
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); if gamma.is_some() { state.num_envs } else { 1 }];
    for (i, d) in batch.iter().enumerate() {
        let g = if gamma.is_some() { d.env } else { 0 };
        groups[g].push(i);
    }
    let mut loglik = 0.0;
    let mut d_log_theta = Matrix::zeros(b, k);
    let mut d_beta = Matrix::zeros(k, v);
    let mut d_gamma = gamma.as_ref().map(|g| Matrix::zeros(g.matrix().rows(), v));
    for (env, members) in groups.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let basis = RateBasis::build(&beta, gamma.as_ref().map(|g| (g, env)), state.rate_form)?;
        let mut coef = Matrix::zeros(k, v);
        let mut dense = vec![0.0; k];
        // Scored in parallel, reduced in batch order.
        let scores: Vec<_> = members
            .par_iter()
            .map(|&i| score_document(&batch[i].counts, lat.log_theta.row(i), &basis))
            .collect();
        for (&i, s) in members.iter().zip(scores) {
            loglik += s.loglik;
            d_log_theta.row_mut(i).copy_from_slice(&s.d_log_theta);
            for &(word, c) in &s.sparse_coef {
                for t in 0..k {
                    let cur = coef.get(t, word);
                    coef.set(t, word, cur + c * s.shifted_theta[t]);
                }
            }
            for (acc, x) in dense.iter_mut().zip(&s.dense_coef) {
                *acc += x;
            }
        }
        for t in 0..k {
            let crow = coef.row(t);
            let bp = basis.beta_part.row(t);
            let dbrow = d_beta.row_mut(t);
            for word in 0..v {
                dbrow[word] += (crow[word] - dense[t]) * bp[word];
            }
            if let (Some(dg), Some(gp)) = (d_gamma.as_mut(), basis.gamma_part.as_ref()) {
                let gprow = gp.row(t);
                let dgrow = dg.row_mut(env * k + t);
                for word in 0..v {
                    dgrow[word] += (crow[word] - dense[t]) * gprow[word];
                }
            }
        }
    }

    let mut terms = ElboTerms {
        likelihood: scale * w * loglik,
        ..ElboTerms::default()
    };
    let mut grads = StateGrad {
        params: p.zeros_like(),
        hyper: Vec::new(),
    };

    // Local latents: prior N(0, 1) on log θ and Gaussian entropy.
    let mut d_mu = Matrix::zeros(b, k);
    let mut d_ls = Matrix::zeros(b, k);
    let mut local_prior = 0.0;
    let mut local_entropy = 0.0;
    for i in 0..b {
        for t in 0..k {
            let lt = lat.log_theta.get(i, t);
            let z = lat.z_theta.get(i, t);
            let ls = enc.log_sigma.get(i, t);
            local_prior += -0.5 * LN_2PI - 0.5 * lt * lt;
            local_entropy += 0.5 * LN_2PI + ls + 0.5 * z * z;
            let g = scale * (w * d_log_theta.get(i, t) - lt);
            d_mu.set(i, t, g);
            d_ls.set(i, t, g * ls.exp() * z + scale);
        }
    }
    terms.local_prior = scale * local_prior;
    terms.local_entropy = scale * local_entropy;
    p.encoder.backward(&cache, &d_mu, &d_ls, &mut grads.params.encoder);

    // Global latents.
    let mut global_prior = 0.0;
    let mut global_entropy = 0.0;
    {
        let g = &mut grads.params;
        for idx in 0..k * v {
            let x = lat.beta.as_slice()[idx];
            let z = lat.z_beta.as_slice()[idx];
            let ls = p.log_sigma_beta.as_slice()[idx];
            global_prior += -0.5 * LN_2PI - 0.5 * x * x;
            global_entropy += 0.5 * LN_2PI + ls.clamp(-LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP) + 0.5 * z * z;
            let gx = scale * w * d_beta.as_slice()[idx] - x;
            g.mu_beta.as_mut_slice()[idx] = gx;
            g.log_sigma_beta.as_mut_slice()[idx] = if ls.abs() < LOG_SIGMA_CLAMP {
                gx * ls.exp() * z + 1.0
            } else {
                0.0
            };
        }
    }
    if let (Some(gamma), Some(dg_lik), Some(z_gamma)) = (&gamma, &d_gamma, &lat.z_gamma) {
        let prior = gamma_prior_with_grad(gamma, &state.prior)?;
        global_prior += prior.value;
        grads.hyper = prior.d_hyper;
        let ls_gamma = p.log_sigma_gamma.as_ref().expect("gamma factors present");
        let g = &mut grads.params;
        let (gm, gs) = (g.mu_gamma.as_mut().unwrap(), g.log_sigma_gamma.as_mut().unwrap());
        for idx in 0..gamma.matrix().as_slice().len() {
            let z = z_gamma.as_slice()[idx];
            let ls = ls_gamma.as_slice()[idx];
            global_entropy += 0.5 * LN_2PI + ls.clamp(-LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP) + 0.5 * z * z;
            let gx = scale * w * dg_lik.as_slice()[idx] + prior.d_gamma.as_slice()[idx];
            gm.as_mut_slice()[idx] = gx;
            gs.as_mut_slice()[idx] = if ls.abs() < LOG_SIGMA_CLAMP {
                gx * ls.exp() * z + 1.0
            } else {
                0.0
            };
        }
    }
    terms.global_prior = global_prior;
    terms.global_entropy = global_entropy;
    terms.total = terms.likelihood + terms.local_prior + terms.local_entropy + terms.global_prior
        + terms.global_entropy;

    Ok(ElboOutput {
        terms,
        grads,
        stats: enc.stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::gradcheck::GradCheckInstance;
    use crate::model::{PriorVariant, RateForm};

    fn instance(variant: PriorVariant) -> GradCheckInstance {
        GradCheckInstance::random(variant, RateForm::LogAdditive, 6, 12, 3, 2, 5).unwrap()
    }

    #[test]
    fn mean_noise_returns_means() {
        let inst = instance(PriorVariant::Normal);
        let mus = Matrix::from_fn(2, 3, |i, j| i as f64 - j as f64);
        let ls = Matrix::filled(2, 3, -1.0);
        let lat = sample_latents(&inst.state, &mus, &ls, Noise::Mean);
        assert_eq!(lat.beta, inst.state.params.mu_beta);
        assert_eq!(lat.gamma.as_ref(), inst.state.params.mu_gamma.as_ref());
        assert_eq!(lat.log_theta, mus);
        for (t, m) in lat.theta.as_slice().iter().zip(mus.as_slice()) {
            assert_eq!(*t, m.exp());
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let inst = instance(PriorVariant::Ard);
        let mus = Matrix::zeros(3, 3);
        let ls = Matrix::filled(3, 3, -0.5);
        let a = sample_latents(&inst.state, &mus, &ls, Noise::Sampled(&mut RngStream::new(4, 2)));
        let b = sample_latents(&inst.state, &mus, &ls, Noise::Sampled(&mut RngStream::new(4, 2)));
        assert_eq!(a.beta, b.beta);
        assert_eq!(a.gamma, b.gamma);
        assert_eq!(a.theta, b.theta);
    }

    #[test]
    fn lognormal_mean() {
        let inst = instance(PriorVariant::Vtm);
        let (rows, cols) = (1000, 100);
        let mus = Matrix::zeros(rows, cols);
        let ls = Matrix::filled(rows, cols, 0.5f64.ln());
        let lat = sample_latents(&inst.state, &mus, &ls, Noise::Sampled(&mut RngStream::new(9, 0)));
        let mean = lat.theta.as_slice().iter().sum::<f64>() / (rows * cols) as f64;
        let expected = 0.125f64.exp();
        assert!((mean / expected - 1.0).abs() < 0.01, "{mean} vs {expected}");
    }

    #[test]
    fn prior_minus_entropy_is_nonpositive_without_data() {
        let mut inst = instance(PriorVariant::Normal);
        inst.state.params.log_sigma_beta.as_mut_slice().iter_mut().for_each(|x| *x = -3.0);
        if let Some(s) = inst.state.params.log_sigma_gamma.as_mut() {
            s.as_mut_slice().iter_mut().for_each(|x| *x = -3.0);
        }
        let batch: Vec<&Document> = inst.docs.iter().collect();
        let opts = ElboOptions {
            likelihood_weight: 0.0,
        };
        let out = elbo(&batch, &inst.state, 10.0, Noise::Mean, opts).unwrap();
        assert_eq!(out.terms.likelihood, 0.0);
        assert!(out.terms.global_prior + out.terms.global_entropy <= 0.0);
    }

    #[test]
    fn likelihood_scales_with_corpus_size() {
        let inst = instance(PriorVariant::Horseshoe);
        let batch: Vec<&Document> = inst.docs.iter().collect();
        let run = |d_total: f64| {
            let mut rng = RngStream::new(3, 3);
            elbo(&batch, &inst.state, d_total, Noise::Sampled(&mut rng), ElboOptions::default())
                .unwrap()
                .terms
        };
        let (one, two) = (run(20.0), run(40.0));
        assert!((two.likelihood - 2.0 * one.likelihood).abs() <= 1e-12 * one.likelihood.abs());
        assert!((two.local_prior - 2.0 * one.local_prior).abs() <= 1e-12 * one.local_prior.abs());
        assert_eq!(two.global_prior, one.global_prior);
        assert_eq!(two.global_entropy, one.global_entropy);
    }

    #[test]
    fn rejects_bad_input() {
        let inst = instance(PriorVariant::Normal);
        assert!(elbo(&[], &inst.state, 1.0, Noise::Mean, ElboOptions::default()).is_err());
        let mut doc = inst.docs[0].clone();
        doc.env = 5;
        let r = elbo(&[&doc], &inst.state, 1.0, Noise::Mean, ElboOptions::default());
        assert!(matches!(r, Err(Error::EnvOutOfRange { env: 5, .. })));
    }
}
