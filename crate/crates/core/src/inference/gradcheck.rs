//! Finite-difference validation of the analytic ELBO gradient.

use super::elbo::{elbo, ElboOptions, Noise};
use super::state::VariationalState;
use crate::corpus::Document;
use crate::error::Result;
use crate::model::{generate_synthetic, GenSpec, ModelConfig, PriorVariant, RateForm};
use crate::numerics::{finite_diff_grad, relative_error, RngStream, DEFAULT_STEP};

/// Denominator floor for relative errors, so coordinates whose true gradient
/// is essentially zero are compared in absolute terms.
pub const GRADCHECK_FLOOR: f64 = 1e-3;

/// The floor also grows as `GRADCHECK_NOISE_SCALE · |ELBO|`: a central
/// difference with step 1e-5 cannot resolve derivatives much below a few
/// ulps of the objective divided by the step, and an ELBO in the thousands
/// puts that noise near 1e-7. Structurally zero gradients (hidden biases
/// ahead of batch normalization) would otherwise fail on rounding alone.
pub const GRADCHECK_NOISE_SCALE: f64 = 1e-6;

/// A small random model state plus a minibatch to differentiate on.
#[derive(Clone, Debug)]
pub struct GradCheckInstance {
    pub state: VariationalState,
    pub docs: Vec<Document>,
    pub d_total: f64,
    pub noise_seed: u64,
}

impl GradCheckInstance {
    /// Random instance of the given size. Means are perturbed away from
    /// their initial values so no gradient block is trivially zero.
    pub fn random(
        variant: PriorVariant,
        rate_form: RateForm,
        num_docs: usize,
        vocab_size: usize,
        num_topics: usize,
        num_envs: usize,
        seed: u64,
    ) -> Result<Self> {
        let spec = GenSpec {
            num_docs,
            vocab_size,
            num_topics,
            num_envs,
            tokens_per_doc: 20,
            gamma_sparsity: 0.5,
            gamma_scale: 1.0,
            seed,
        };
        let (corpus, _) = generate_synthetic(&spec)?;
        let mut config = ModelConfig {
            num_topics,
            rate_form,
            seed,
            hidden_units: 10,
            ..ModelConfig::default()
        };
        config.prior.variant = variant;
        let mut rng = RngStream::new(seed, 7);
        let mut state = VariationalState::init(&config, vocab_size, num_envs, &mut rng)?;
        for block in state.params.blocks_mut() {
            for x in block.iter_mut() {
                *x += 0.3 * rng.normal();
            }
        }
        Ok(GradCheckInstance {
            state,
            docs: corpus.docs.into_iter().filter(|d| !d.is_empty()).collect(),
            d_total: 3.0 * num_docs as f64,
            noise_seed: seed.wrapping_add(1),
        })
    }

    fn value_at(&self, flat: &[f64]) -> f64 {
        let mut state = self.state.clone();
        state.unflatten(flat);
        let batch: Vec<&Document> = self.docs.iter().collect();
        let mut rng = RngStream::new(self.noise_seed, 0);
        elbo(&batch, &state, self.d_total, Noise::Sampled(&mut rng), ElboOptions::default())
            .map(|o| o.terms.total)
            .unwrap_or(f64::NAN)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub num_coords: usize,
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compare every analytic gradient coordinate (variational parameters and
/// log hyperparameters) against central differences under fixed noise.
pub fn check_elbo_gradients(inst: &GradCheckInstance) -> Result<GradCheckReport> {
    let batch: Vec<&Document> = inst.docs.iter().collect();
    let mut rng = RngStream::new(inst.noise_seed, 0);
    let out = elbo(
        &batch,
        &inst.state,
        inst.d_total,
        Noise::Sampled(&mut rng),
        ElboOptions::default(),
    )?;
    let analytic = out.grads.flatten();
    let floor = GRADCHECK_FLOOR.max(GRADCHECK_NOISE_SCALE * out.terms.total.abs());
    let x = inst.state.flatten();
    let numeric = finite_diff_grad(|p| inst.value_at(p), &x, DEFAULT_STEP);
    let mut max_rel_error = 0.0;
    let mut worst_coord = 0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = relative_error(*a, *n, floor);
        if !(e <= max_rel_error) {
            max_rel_error = e;
            worst_coord = i;
        }
    }
    Ok(GradCheckReport {
        num_coords: x.len(),
        max_rel_error,
        worst_coord,
        analytic,
        numeric,
    })
}
