use serde::{Deserialize, Serialize};

use super::encoder::Encoder;
use crate::error::{Error, Result};
use crate::model::{EnvDeviations, GlobalTopics, ModelConfig, PriorSpec, PriorVariant, RateForm};
use crate::numerics::{Matrix, RngStream};

pub const INIT_MEAN_SD: f64 = 0.01;
pub const INIT_LOG_SIGMA: f64 = -2.0;

/// Gaussian variational factors for β and γ plus the amortized encoder for θ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    /// `K × V`.
    pub mu_beta: Matrix,
    pub log_sigma_beta: Matrix,
    /// `(E·K) × V`; absent for VTM.
    pub mu_gamma: Option<Matrix>,
    pub log_sigma_gamma: Option<Matrix>,
    pub encoder: Encoder,
}

impl Params {
    pub fn zeros_like(&self) -> Params {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Params {
            mu_beta: z(&self.mu_beta),
            log_sigma_beta: z(&self.log_sigma_beta),
            mu_gamma: self.mu_gamma.as_ref().map(z),
            log_sigma_gamma: self.log_sigma_gamma.as_ref().map(z),
            encoder: self.encoder.zeros_like(),
        }
    }

    /// Trainable blocks in a fixed order shared by parameters and gradients.
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.mu_beta.as_slice(), self.log_sigma_beta.as_slice()];
        if let (Some(m), Some(s)) = (&self.mu_gamma, &self.log_sigma_gamma) {
            out.push(m.as_slice());
            out.push(s.as_slice());
        }
        out.extend(self.encoder.blocks());
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.mu_beta.as_mut_slice(),
            self.log_sigma_beta.as_mut_slice(),
        ];
        if let (Some(m), Some(s)) = (&mut self.mu_gamma, &mut self.log_sigma_gamma) {
            out.push(m.as_mut_slice());
            out.push(s.as_mut_slice());
        }
        out.extend(self.encoder.blocks_mut());
        out
    }
}

/// Everything the optimizer touches during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub params: Params,
    pub prior: PriorSpec,
    pub rate_form: RateForm,
    pub num_envs: usize,
}

impl VariationalState {
    pub fn init(config: &ModelConfig, vocab_size: usize, num_envs: usize, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 || num_envs == 0 {
            return Err(Error::InvalidConfig("need V >= 1 and E >= 1".into()));
        }
        let k = config.num_topics;
        let mut small = |rows, cols| Matrix::from_fn(rows, cols, |_, _| rng.normal() * INIT_MEAN_SD);
        let mu_beta = small(k, vocab_size);
        let has_gamma = config.prior.variant.has_gamma();
        let mu_gamma = has_gamma.then(|| small(num_envs * k, vocab_size));
        let encoder = Encoder::new(vocab_size, k, config.hidden_units, config.hidden_layers, rng);
        Ok(VariationalState {
            params: Params {
                mu_beta,
                log_sigma_beta: Matrix::filled(k, vocab_size, INIT_LOG_SIGMA),
                mu_gamma,
                log_sigma_gamma: has_gamma
                    .then(|| Matrix::filled(num_envs * k, vocab_size, INIT_LOG_SIGMA)),
                encoder,
            },
            prior: config.prior.to_spec(num_envs, k),
            rate_form: config.rate_form,
            num_envs,
        })
    }

    pub fn num_topics(&self) -> usize {
        self.params.mu_beta.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.params.mu_beta.cols()
    }

    pub fn variant(&self) -> PriorVariant {
        self.prior.variant
    }

    /// Posterior means as model parameters.
    pub fn beta_mean(&self) -> GlobalTopics {
        GlobalTopics {
            beta: self.params.mu_beta.clone(),
        }
    }

    pub fn gamma_mean(&self) -> Option<EnvDeviations> {
        self.params.mu_gamma.as_ref().map(|m| {
            EnvDeviations::from_matrix(self.num_envs, self.num_topics(), m.clone())
                .expect("gamma shape fixed at init")
        })
    }

    /// Log of every optimized prior hyperparameter: `[log a, log b]` for ARD,
    /// `[log λ_ek…, log τ]` for the horseshoe, empty otherwise.
    pub fn hyper(&self) -> Vec<f64> {
        match self.prior.variant {
            PriorVariant::Ard => vec![self.prior.ard_a.ln(), self.prior.ard_b.ln()],
            PriorVariant::Horseshoe => {
                let mut h: Vec<f64> = self.prior.hs_lambda.as_slice().iter().map(|x| x.ln()).collect();
                h.push(self.prior.hs_tau.ln());
                h
            }
            _ => Vec::new(),
        }
    }

    pub fn set_hyper(&mut self, h: &[f64]) {
        match self.prior.variant {
            PriorVariant::Ard => {
                self.prior.ard_a = h[0].exp();
                self.prior.ard_b = h[1].exp();
            }
            PriorVariant::Horseshoe => {
                let n = self.prior.hs_lambda.as_slice().len();
                for (dst, &src) in self.prior.hs_lambda.as_mut_slice().iter_mut().zip(&h[..n]) {
                    *dst = src.exp();
                }
                self.prior.hs_tau = h[n].exp();
            }
            _ => {}
        }
    }

    /// Every trainable value (model blocks, then log hyperparameters) as one vector.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.params.blocks().concat();
        out.extend(self.hyper());
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for block in self.params.blocks_mut() {
            let n = block.len();
            block.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        self.set_hyper(&flat[offset..]);
    }
}

/// Gradient of the ELBO: same layout as [`VariationalState::flatten`].
#[derive(Clone, Debug)]
pub struct StateGrad {
    pub params: Params,
    pub hyper: Vec<f64>,
}

impl StateGrad {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.params.blocks().concat();
        out.extend_from_slice(&self.hyper);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.params.blocks().iter().all(|b| b.iter().all(|x| x.is_finite()))
            && self.hyper.iter().all(|x| x.is_finite())
    }
}
