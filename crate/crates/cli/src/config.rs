//! Flat JSON run configuration.
//!
//! Every key is optional; a missing key falls back to the command's default.
//! Command-line flags with the same name take precedence over the file.
//!
//! | key | used by | default |
//! |---|---|---|
//! | `corpus`, `test`, `vocab`, `model`, `stopwords` | paths | none |
//! | `keywords` | causal: list of keyword files, one token per line | none |
//! | `out` | output path | stdout |
//! | `seed` | all | 0 |
//! | `min_df`, `max_df` | build-vocab | 0.006, 0.5 |
//! | `num_topics`, `rate_form`, `prior`, `normal_sigma`, `ard_a`, `ard_b`, `hs_lambda`, `hs_tau` | train, simulate, grad-check | model defaults |
//! | `epochs`, `batch_size`, `lr`, `eb_steps`, `hidden_units`, `hidden_layers` | train, causal | 150, 128, 0.01, 2, 50, 1 |
//! | `protocol` (`doc_completion`/`full_doc`), `heldout_ratio`, `envs` | eval | doc_completion, 0.5, all |
//! | `top_n`, `npmi_eps`, `sparsity_threshold` | eval, topics, causal | 10, 1e-12, 0.01 |
//! | `mode` (`model`/`recovery`), `base_p`, `bump`, `min_hits`, `samples_per_list`, `extra_samples` | causal | model, 0.5, 0.2, 2, 700, 700 |
//! | `num_docs`, `vocab_size`, `num_envs`, `tokens_per_doc`, `gamma_sparsity`, `gamma_scale` | simulate, grad-check, causal recovery | generator defaults |
//! | `tolerance` | grad-check | 1e-4 |

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use multitopic::causal::{ExperimentSpec, PlantedSpec};
use multitopic::model::{GenSpec, ModelConfig, PriorVariant, RateForm};

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub keywords: Option<Vec<PathBuf>>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,

    pub min_df: Option<f64>,
    pub max_df: Option<f64>,

    pub num_topics: Option<usize>,
    pub rate_form: Option<String>,
    pub prior: Option<String>,
    pub normal_sigma: Option<f64>,
    pub ard_a: Option<f64>,
    pub ard_b: Option<f64>,
    pub hs_lambda: Option<f64>,
    pub hs_tau: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub eb_steps: Option<usize>,
    pub hidden_units: Option<usize>,
    pub hidden_layers: Option<usize>,

    pub protocol: Option<String>,
    pub heldout_ratio: Option<f64>,
    pub envs: Option<Vec<String>>,
    pub top_n: Option<usize>,
    pub npmi_eps: Option<f64>,
    pub sparsity_threshold: Option<f64>,

    pub mode: Option<String>,
    pub base_p: Option<f64>,
    pub bump: Option<f64>,
    pub min_hits: Option<usize>,
    pub samples_per_list: Option<usize>,
    pub extra_samples: Option<usize>,

    pub num_docs: Option<usize>,
    pub vocab_size: Option<usize>,
    pub num_envs: Option<usize>,
    pub tokens_per_doc: Option<usize>,
    pub gamma_sparsity: Option<f64>,
    pub gamma_scale: Option<f64>,

    pub tolerance: Option<f64>,
}

pub const DEFAULT_MIN_DF: f64 = 0.006;
pub const DEFAULT_MAX_DF: f64 = 0.5;

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn require<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        match value {
            Some(p) => Ok(p),
            None => bail!("missing required path '{key}' (flag --{} or config key)", key.replace('_', "-")),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut c = ModelConfig::default();
        if let Some(k) = self.num_topics {
            c.num_topics = k;
        }
        if let Some(f) = &self.rate_form {
            c.rate_form = f.parse::<RateForm>()?;
        }
        if let Some(p) = &self.prior {
            c.prior.variant = p.parse::<PriorVariant>()?;
        }
        macro_rules! copy {
            ($($src:ident => $($dst:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$src { c.$($dst).+ = v; })*
            };
        }
        copy!(
            normal_sigma => prior.normal_sigma,
            ard_a => prior.ard_a,
            ard_b => prior.ard_b,
            hs_lambda => prior.hs_lambda,
            hs_tau => prior.hs_tau,
            epochs => epochs,
            batch_size => batch_size,
            lr => lr,
            eb_steps => eb_steps_per_model_step,
            hidden_units => hidden_units,
            hidden_layers => hidden_layers,
        );
        c.seed = self.seed();
        c.validate()?;
        Ok(c)
    }

    pub fn gen_spec(&self) -> Result<GenSpec> {
        let mut g = GenSpec::default();
        macro_rules! copy {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { g.$f = v; })* };
        }
        copy!(num_docs, vocab_size, num_topics, num_envs, tokens_per_doc, gamma_sparsity, gamma_scale);
        g.seed = self.seed();
        g.validate()?;
        Ok(g)
    }

    pub fn planted_spec(&self) -> Result<PlantedSpec> {
        let mut p = PlantedSpec::default();
        macro_rules! copy {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { p.$f = v; })* };
        }
        copy!(num_docs, vocab_size, num_topics, tokens_per_doc, gamma_sparsity, gamma_scale);
        p.seed = self.seed();
        p.validate()?;
        Ok(p)
    }

    /// Experiment settings without keyword lists; callers attach those.
    pub fn experiment_spec(&self) -> Result<ExperimentSpec> {
        let mut e = ExperimentSpec::default();
        macro_rules! copy {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { e.$f = v; })* };
        }
        copy!(base_p, bump, min_hits, samples_per_list, extra_samples);
        e.seed = self.seed();
        if !(0.0..=1.0).contains(&e.base_p) || !e.bump.is_finite() || e.min_hits == 0 {
            bail!("invalid experiment settings: need base_p in [0, 1], finite bump, min_hits >= 1");
        }
        Ok(e)
    }

    pub fn df_bounds(&self) -> Result<(f64, f64)> {
        let lo = self.min_df.unwrap_or(DEFAULT_MIN_DF);
        let hi = self.max_df.unwrap_or(DEFAULT_MAX_DF);
        if !(0.0..1.0).contains(&lo) || !(hi > lo && hi <= 1.0) {
            bail!("document-frequency bounds must satisfy 0 <= min_df < max_df <= 1, got {lo}, {hi}");
        }
        Ok((lo, hi))
    }

    pub fn top_n(&self) -> Result<usize> {
        match self.top_n.unwrap_or(multitopic::evaluation::DEFAULT_TOP_N) {
            0 => bail!("top_n must be at least 1"),
            n => Ok(n),
        }
    }
}

/// Copy each `Some` field of a flag struct over the config.
#[macro_export]
macro_rules! overlay {
    ($cfg:expr, $args:expr; $($f:ident),* $(,)?) => {
        $(if let Some(v) = &$args.$f { $cfg.$f = Some(v.clone()); })*
    };
}
