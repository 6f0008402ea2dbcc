use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::RunConfig;

/// Multi-environment topic model: training, evaluation and causal experiments.
#[derive(Parser, Debug)]
#[command(name = "multitopic", version)]
struct Cli {
    /// Flat JSON config; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file (directory for `simulate`). Defaults to stdout where that makes sense.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a vocabulary file from a corpus using document-frequency bounds.
    BuildVocab(VocabArgs),
    /// Fit a model and write a binary artifact.
    Train(TrainArgs),
    /// Perplexity, coherence and deviation diagnostics as JSON lines.
    Eval(EvalArgs),
    /// Top words of every topic, globally and per environment.
    Topics(TopicsArgs),
    /// Semi-synthetic treatment-effect experiment.
    Causal(CausalArgs),
    /// Sample a synthetic corpus with its ground truth.
    Simulate(SimulateArgs),
    /// Compare analytic ELBO gradients with finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
struct VocabArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    stopwords: Option<PathBuf>,
    #[arg(long)]
    min_df: Option<f64>,
    #[arg(long)]
    max_df: Option<f64>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    num_topics: Option<usize>,
    /// log_additive or exp_sum
    #[arg(long)]
    rate_form: Option<String>,
    /// vtm, normal, ard or horseshoe
    #[arg(long)]
    prior: Option<String>,
    #[arg(long)]
    normal_sigma: Option<f64>,
    #[arg(long)]
    ard_a: Option<f64>,
    #[arg(long)]
    ard_b: Option<f64>,
    #[arg(long)]
    hs_lambda: Option<f64>,
    #[arg(long)]
    hs_tau: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    eb_steps: Option<usize>,
    #[arg(long)]
    hidden_units: Option<usize>,
    #[arg(long)]
    hidden_layers: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// doc_completion or full_doc
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    heldout_ratio: Option<f64>,
    /// Environments whose deviations to score with (repeatable; default all).
    #[arg(long = "env")]
    envs: Option<Vec<String>>,
    #[arg(long)]
    top_n: Option<usize>,
    #[arg(long)]
    npmi_eps: Option<f64>,
    #[arg(long)]
    sparsity_threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct TopicsArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    top_n: Option<usize>,
}

#[derive(Args, Debug)]
struct CausalArgs {
    /// model (trained artifact on a corpus) or recovery (planted simulation)
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Keyword file, one token per line (repeatable).
    #[arg(long = "keywords")]
    keywords: Option<Vec<PathBuf>>,
    #[arg(long)]
    base_p: Option<f64>,
    #[arg(long)]
    bump: Option<f64>,
    #[arg(long)]
    min_hits: Option<usize>,
    #[arg(long)]
    samples_per_list: Option<usize>,
    #[arg(long)]
    extra_samples: Option<usize>,
    #[arg(long)]
    top_n: Option<usize>,
    #[arg(long)]
    num_docs: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    tokens_per_doc: Option<usize>,
    #[command(flatten)]
    model_args: ModelArgs,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    num_docs: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    num_topics: Option<usize>,
    #[arg(long)]
    num_envs: Option<usize>,
    #[arg(long)]
    tokens_per_doc: Option<usize>,
    #[arg(long)]
    gamma_sparsity: Option<f64>,
    #[arg(long)]
    gamma_scale: Option<f64>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long)]
    prior: Option<String>,
    #[arg(long)]
    rate_form: Option<String>,
    #[arg(long)]
    num_docs: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    num_topics: Option<usize>,
    #[arg(long)]
    num_envs: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
}

fn overlay_model(cfg: &mut RunConfig, a: &ModelArgs) {
    overlay!(cfg, a; num_topics, rate_form, prior, normal_sigma, ard_a, ard_b, hs_lambda, hs_tau,
        epochs, batch_size, lr, eb_steps, hidden_units, hidden_layers);
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(raw) = std::env::var("MULTITOPIC_THREADS") {
        let n: usize = raw
            .trim()
            .parse()
            .map_err(|_| anyhow::anyhow!("MULTITOPIC_THREADS must be a positive integer, got '{raw}'"))?;
        if n == 0 {
            anyhow::bail!("MULTITOPIC_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    init_threads()?;
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    overlay!(cfg, cli; seed, out);
    match cli.command {
        Command::BuildVocab(a) => {
            overlay!(cfg, a; corpus, stopwords, min_df, max_df);
            commands::build_vocab(&cfg).map(|_| true)
        }
        Command::Train(a) => {
            overlay!(cfg, a; corpus, vocab);
            overlay_model(&mut cfg, &a.model);
            commands::train(&cfg).map(|_| true)
        }
        Command::Eval(a) => {
            overlay!(cfg, a; model, test, protocol, heldout_ratio, envs, top_n, npmi_eps, sparsity_threshold);
            commands::eval(&cfg).map(|_| true)
        }
        Command::Topics(a) => {
            overlay!(cfg, a; model, top_n);
            commands::topics(&cfg).map(|_| true)
        }
        Command::Causal(a) => {
            overlay!(cfg, a; mode, model, corpus, keywords, base_p, bump, min_hits, samples_per_list,
                extra_samples, top_n, num_docs, vocab_size, tokens_per_doc);
            overlay_model(&mut cfg, &a.model_args);
            commands::causal(&cfg).map(|_| true)
        }
        Command::Simulate(a) => {
            overlay!(cfg, a; num_docs, vocab_size, num_topics, num_envs, tokens_per_doc, gamma_sparsity,
                gamma_scale);
            commands::simulate(&cfg).map(|_| true)
        }
        Command::GradCheck(a) => {
            overlay!(cfg, a; prior, rate_form, num_docs, vocab_size, num_topics, num_envs, tolerance);
            commands::grad_check(&cfg)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
