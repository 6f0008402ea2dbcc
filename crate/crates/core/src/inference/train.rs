use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::elbo::{clamped_sigma, elbo, ElboOptions, Noise};
use super::encoder::Encoder;
use super::state::VariationalState;
use crate::corpus::{Corpus, Document, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{
    gamma_prior_with_grad, EnvDeviations, GlobalTopics, ModelConfig, PriorSpec, PriorVariant,
};
use crate::numerics::{adam_update, AdamState, Matrix, RngStream};

/// Posterior means and the encoder: everything needed downstream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub env_names: Vec<String>,
    pub beta_hat: GlobalTopics,
    pub gamma_hat: Option<EnvDeviations>,
    pub encoder: Encoder,
    /// Final prior hyperparameters (after empirical Bayes for ARD).
    pub prior: PriorSpec,
    /// Mean per-document ELBO of each epoch.
    pub training_log: Vec<f64>,
}

impl TrainedModel {
    pub fn num_topics(&self) -> usize {
        self.beta_hat.num_topics()
    }

    pub fn vocab_size(&self) -> usize {
        self.beta_hat.vocab_size()
    }

    pub fn num_envs(&self) -> usize {
        self.env_names.len()
    }

    pub fn from_state(
        config: &ModelConfig,
        corpus: &Corpus,
        state: &VariationalState,
        training_log: Vec<f64>,
    ) -> Self {
        TrainedModel {
            config: config.clone(),
            vocab: corpus.vocab.clone(),
            env_names: corpus.env_names.clone(),
            beta_hat: state.beta_mean(),
            gamma_hat: state.gamma_mean(),
            encoder: state.params.encoder.clone(),
            prior: state.prior.clone(),
            training_log,
        }
    }

    pub fn env_index(&self, name: &str) -> Result<usize> {
        self.env_names.iter().position(|n| n == name).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "unknown environment '{name}'; valid names: {}",
                self.env_names.join(", ")
            ))
        })
    }

    /// Eval-mode `μ_θ` for one document (log topic intensities).
    pub fn log_intensities(&self, doc: &Document) -> Result<Vec<f64>> {
        self.encoder.encode(doc).map(|(mu, _)| mu)
    }
}

/// Topic proportions `exp(μ_θ) / Σ exp(μ_θ)` from the eval-mode encoder.
pub fn infer_theta(model: &TrainedModel, doc: &Document) -> Result<Vec<f64>> {
    let mu = model.log_intensities(doc)?;
    Ok(proportions_from_log(&mu))
}

pub(crate) fn proportions_from_log(log_theta: &[f64]) -> Vec<f64> {
    let m = log_theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = log_theta.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `D × K` matrix of inferred topic proportions.
pub fn infer_theta_matrix(model: &TrainedModel, docs: &[Document]) -> Result<Matrix> {
    let k = model.num_topics();
    let mut out = Matrix::zeros(docs.len(), k);
    for (i, d) in docs.iter().enumerate() {
        out.row_mut(i).copy_from_slice(&infer_theta(model, d)?);
    }
    Ok(out)
}

/// Gradient of the ARD log prior with respect to `(log a, log b)` at a fresh
/// draw of γ from its variational factor.
pub fn eb_gradient(state: &VariationalState, rng: &mut RngStream) -> Result<Vec<f64>> {
    let (mu, ls) = match (&state.params.mu_gamma, &state.params.log_sigma_gamma) {
        (Some(m), Some(s)) => (m, s),
        _ => return Err(Error::VariantMismatch("empirical Bayes needs deviations".into())),
    };
    let data = mu
        .as_slice()
        .iter()
        .zip(ls.as_slice())
        .map(|(m, s)| m + clamped_sigma(*s) * rng.normal())
        .collect();
    let gamma = EnvDeviations::from_matrix(
        state.num_envs,
        state.num_topics(),
        Matrix::from_vec(mu.rows(), mu.cols(), data)?,
    )?;
    Ok(gamma_prior_with_grad(&gamma, &state.prior)?.d_hyper)
}

/// Owns the optimizer state for a training run.
pub struct Trainer {
    pub state: VariationalState,
    model_adam: Vec<AdamState>,
    hyper_adam: AdamState,
    noise_rng: RngStream,
    eb_rng: RngStream,
    order_rng: RngStream,
    steps: usize,
    config: ModelConfig,
}

impl Trainer {
    pub fn new(config: &ModelConfig, vocab_size: usize, num_envs: usize) -> Result<Self> {
        let root = RngStream::new(config.seed, 0);
        let state = VariationalState::init(config, vocab_size, num_envs, &mut root.split(0))?;
        let model_adam = state
            .params
            .blocks()
            .iter()
            .map(|b| AdamState::new(b.len(), config.lr))
            .collect();
        let hyper_adam = AdamState::new(state.hyper().len(), config.lr);
        Ok(Trainer {
            state,
            model_adam,
            hyper_adam,
            noise_rng: root.split(1),
            eb_rng: root.split(3),
            order_rng: root.split(2),
            steps: 0,
            config: config.clone(),
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One optimizer step on a minibatch; returns the sampled ELBO.
    pub fn step(&mut self, batch: &[&Document], d_total: f64) -> Result<f64> {
        let out = elbo(
            batch,
            &self.state,
            d_total,
            Noise::Sampled(&mut self.noise_rng),
            ElboOptions::default(),
        )?;
        let step = self.steps;
        self.steps += 1;
        if !out.terms.total.is_finite() || !out.grads.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        // Adam descends, so feed it the negated ELBO gradient.
        for ((block, grad), adam) in self
            .state
            .params
            .blocks_mut()
            .into_iter()
            .zip(out.grads.params.blocks())
            .zip(self.model_adam.iter_mut())
        {
            let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
            adam_update(block, &neg, adam)?;
        }
        self.state.params.encoder.update_running_stats(&out.stats);

        match self.state.variant() {
            PriorVariant::Horseshoe => {
                let mut h = self.state.hyper();
                let neg: Vec<f64> = out.grads.hyper.iter().map(|g| -g).collect();
                adam_update(&mut h, &neg, &mut self.hyper_adam)?;
                self.state.set_hyper(&h);
            }
            PriorVariant::Ard => {
                for _ in 0..self.config.eb_steps_per_model_step {
                    self.eb_step()?;
                }
            }
            _ => {}
        }
        Ok(out.terms.total)
    }

    /// One empirical-Bayes Adam step on `(log a, log b)` with φ frozen.
    pub fn eb_step(&mut self) -> Result<()> {
        let g = eb_gradient(&self.state, &mut self.eb_rng)?;
        if !g.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFiniteLoss { step: self.steps });
        }
        let mut h = self.state.hyper();
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        adam_update(&mut h, &neg, &mut self.hyper_adam)?;
        self.state.set_hyper(&h);
        Ok(())
    }

    /// One pass over `docs` in a freshly shuffled order; returns the mean
    /// per-document ELBO over the epoch's minibatches.
    pub fn epoch(&mut self, docs: &[Document]) -> Result<f64> {
        let mut order: Vec<usize> = (0..docs.len()).collect();
        self.order_rng.shuffle(&mut order);
        let d_total = docs.len() as f64;
        let mut acc = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Document> = chunk.iter().map(|&i| &docs[i]).collect();
            acc += self.step(&batch, d_total)? / d_total;
            batches += 1;
        }
        Ok(acc / batches as f64)
    }
}

/// Fit the model to `corpus`. Empty documents are skipped.
pub fn train(corpus: &Corpus, config: &ModelConfig) -> Result<TrainedModel> {
    config.validate()?;
    corpus.validate()?;
    let docs: Vec<Document> = corpus.docs.iter().filter(|d| !d.is_empty()).cloned().collect();
    let skipped = corpus.docs.len() - docs.len();
    if skipped > 0 {
        log::warn!("skipping {skipped} empty document(s)");
    }
    if docs.is_empty() {
        return Err(Error::InvalidConfig("corpus has no nonempty documents".into()));
    }
    let mut trainer = Trainer::new(config, corpus.vocab_size(), corpus.num_envs())?;
    let start = Instant::now();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mean = trainer.epoch(&docs)?;
        log::info!(
            "epoch={} elbo={:.6} elapsed_s={:.3}",
            epoch + 1,
            mean,
            start.elapsed().as_secs_f64()
        );
        log.push(mean);
    }
    Ok(TrainedModel::from_state(config, corpus, &trainer.state, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::gradcheck::GradCheckInstance;
    use crate::model::{generate_synthetic, GenSpec, RateForm};

    fn small_corpus(seed: u64) -> Corpus {
        let spec = GenSpec {
            num_docs: 40,
            vocab_size: 15,
            num_topics: 3,
            tokens_per_doc: 25,
            seed,
            ..GenSpec::default()
        };
        generate_synthetic(&spec).unwrap().0
    }

    fn small_config(variant: PriorVariant, epochs: usize) -> ModelConfig {
        let mut c = ModelConfig {
            num_topics: 3,
            epochs,
            batch_size: 16,
            hidden_units: 8,
            seed: 2,
            ..ModelConfig::default()
        };
        c.prior.variant = variant;
        c
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let corpus = small_corpus(1);
        let config = small_config(PriorVariant::Ard, 0);
        let model = train(&corpus, &config).unwrap();
        assert!(model.training_log.is_empty());
        let init = VariationalState::init(&config, 15, 2, &mut RngStream::new(2, 0).split(0)).unwrap();
        assert_eq!(model.beta_hat, init.beta_mean());
        assert_eq!(model.gamma_hat, init.gamma_mean());
        assert_eq!(model.prior, init.prior);
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = small_corpus(3);
        for variant in [PriorVariant::Ard, PriorVariant::Horseshoe, PriorVariant::Vtm] {
            let config = small_config(variant, 3);
            let a = train(&corpus, &config).unwrap();
            let b = train(&corpus, &config).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.training_log.len(), 3);
        }
    }

    #[test]
    fn seed_changes_result() {
        let corpus = small_corpus(3);
        let a = train(&corpus, &small_config(PriorVariant::Normal, 2)).unwrap();
        let mut other = small_config(PriorVariant::Normal, 2);
        other.seed = 99;
        let b = train(&corpus, &other).unwrap();
        assert_ne!(a.beta_hat, b.beta_hat);
    }

    #[test]
    fn vtm_has_no_deviations() {
        let model = train(&small_corpus(4), &small_config(PriorVariant::Vtm, 1)).unwrap();
        assert!(model.gamma_hat.is_none());
    }

    #[test]
    fn ard_hyperparameters_move() {
        let config = small_config(PriorVariant::Ard, 2);
        let model = train(&small_corpus(5), &config).unwrap();
        assert_ne!(model.prior.ard_a, config.prior.ard_a);
        assert_ne!(model.prior.ard_b, config.prior.ard_b);
    }

    #[test]
    fn theta_is_a_distribution() {
        let corpus = small_corpus(6);
        let model = train(&corpus, &small_config(PriorVariant::Ard, 2)).unwrap();
        for doc in &corpus.docs {
            let t = infer_theta(&model, doc).unwrap();
            assert!(t.iter().all(|&x| x >= 0.0));
            assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(t, infer_theta(&model, &doc.clone()).unwrap());
        }
    }

    #[test]
    fn empty_documents_are_skipped() {
        let mut corpus = small_corpus(7);
        corpus.docs[0].counts.clear();
        assert!(train(&corpus, &small_config(PriorVariant::Normal, 1)).is_ok());
    }

    #[test]
    fn eb_steps_raise_average_objective() {
        let inst =
            GradCheckInstance::random(PriorVariant::Ard, RateForm::LogAdditive, 8, 30, 3, 2, 1)
                .unwrap();
        let batch: Vec<&Document> = inst.docs.iter().collect();
        let average = |state: &VariationalState| {
            (0..50)
                .map(|s| {
                    let mut rng = RngStream::new(1000 + s, 0);
                    elbo(&batch, state, 8.0, Noise::Sampled(&mut rng), ElboOptions::default())
                        .unwrap()
                        .terms
                        .total
                })
                .sum::<f64>()
                / 50.0
        };
        let config = small_config(PriorVariant::Ard, 1);
        let mut trainer = Trainer::new(&config, 30, 2).unwrap();
        trainer.state = inst.state.clone();
        let before = average(&trainer.state);
        for _ in 0..10 {
            trainer.eb_step().unwrap();
        }
        assert!(average(&trainer.state) >= before);
    }
}
