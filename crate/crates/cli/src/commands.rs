use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use serde::Serialize;
use serde_json::{json, Value};

use multitopic::artifact::{load_model, save_model, truth_to_artifact};
use multitopic::causal::{end_to_end_recovery, format_table, run_model_experiment, KeywordList};
use multitopic::corpus::{build_vocabulary, load_corpus, read_records, read_stopwords, Corpus, Vocabulary};
use multitopic::evaluation::{
    count_opposite, npmi, perplexity, sparsity, top_words, PerplexityMode, Protocol, ScoreVariant, WordSource,
    DEFAULT_NPMI_EPS, DEFAULT_SPARSITY_THRESHOLD,
};
use multitopic::inference::{check_elbo_gradients, train as fit, GradCheckInstance, TrainedModel};
use multitopic::model::{generate_synthetic, PriorVariant, RateForm};
use multitopic::numerics::RngStream;

use crate::config::RunConfig;

/// `--out` file if given, stdout otherwise.
fn sink(cfg: &RunConfig) -> Result<Box<dyn Write>> {
    Ok(match &cfg.out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_record(w: &mut dyn Write, kind: &str, body: impl Serialize) -> Result<()> {
    let mut v = serde_json::to_value(body)?;
    match &mut v {
        Value::Object(map) => {
            map.insert("record".into(), Value::String(kind.into()));
        }
        other => *other = json!({ "record": kind, "value": other.take() }),
    }
    serde_json::to_writer(&mut *w, &v)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn build_vocab(cfg: &RunConfig) -> Result<()> {
    let (min_df, max_df) = cfg.df_bounds()?;
    let corpus = RunConfig::require(&cfg.corpus, "corpus")?;
    let stopwords = match &cfg.stopwords {
        Some(p) => read_stopwords(p)?,
        None => HashSet::new(),
    };
    let records = read_records(corpus)?;
    let lists: Vec<Vec<String>> = records.into_iter().map(|r| r.tokens).collect();
    let vocab = build_vocabulary(&lists, min_df, max_df, &stopwords)?;
    info!("vocabulary: {} terms from {} documents", vocab.len(), lists.len());
    let mut w = sink(cfg)?;
    for t in vocab.terms() {
        writeln!(w, "{t}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let config = cfg.model_config()?;
    let out = RunConfig::require(&cfg.out, "out")?;
    let vocab = Vocabulary::read_from(RunConfig::require(&cfg.vocab, "vocab")?)?;
    let corpus = load_corpus(RunConfig::require(&cfg.corpus, "corpus")?, vocab, &[])?;
    info!(
        "training K={} prior={:?} on {} documents, {} environments, V={}",
        config.num_topics,
        config.prior.variant,
        corpus.num_docs(),
        corpus.num_envs(),
        corpus.vocab_size()
    );
    let model = fit(&corpus, &config)?;
    save_model(&model, out)?;
    info!("wrote {}", out.display());
    Ok(())
}

fn load_for_model(model: &TrainedModel, path: &Path) -> Result<Corpus> {
    let corpus = load_corpus(path, model.vocab.clone(), &model.env_names)?;
    if corpus.num_envs() > model.num_envs() {
        warn!(
            "test corpus has environments unseen in training: {}",
            corpus.env_names[model.num_envs()..].join(", ")
        );
    }
    Ok(corpus)
}

fn emit_top_words(w: &mut dyn Write, model: &TrainedModel, top_n: usize) -> Result<()> {
    for k in 0..model.num_topics() {
        let words = top_words(model, k, WordSource::Global, top_n)?;
        write_record(w, "top_words", json!({ "topic": k, "source": "global", "words": words }))?;
        if model.gamma_hat.is_some() {
            for (e, name) in model.env_names.iter().enumerate() {
                let words = top_words(model, k, WordSource::Env(e), top_n)?;
                write_record(w, "top_words", json!({ "topic": k, "source": name, "words": words }))?;
            }
        }
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let protocol = match cfg.protocol.as_deref().unwrap_or("doc_completion") {
        "doc_completion" => {
            let ratio = cfg.heldout_ratio.unwrap_or(0.5);
            if !(ratio > 0.0 && ratio < 1.0) {
                bail!("heldout_ratio must be in (0, 1), got {ratio}");
            }
            Protocol::DocCompletion { ratio }
        }
        "full_doc" => Protocol::FullDoc,
        other => bail!("unknown protocol '{other}' (expected doc_completion or full_doc)"),
    };
    let top_n = cfg.top_n()?;
    let eps = cfg.npmi_eps.unwrap_or(DEFAULT_NPMI_EPS);
    let threshold = cfg.sparsity_threshold.unwrap_or(DEFAULT_SPARSITY_THRESHOLD);
    let model = load_model(RunConfig::require(&cfg.model, "model")?)?;
    let envs: Vec<usize> = match &cfg.envs {
        Some(names) => names.iter().map(|n| model.env_index(n)).collect::<Result<_, _>>()?,
        None if model.gamma_hat.is_some() => (0..model.num_envs()).collect(),
        None => Vec::new(),
    };
    if !envs.is_empty() && model.gamma_hat.is_none() {
        bail!("model was trained without environment deviations; drop --env");
    }
    let test = load_for_model(&model, RunConfig::require(&cfg.test, "test")?)?;
    let rng = RngStream::new(cfg.seed(), 0);
    let mut w = sink(cfg)?;

    let mut variants = vec![ScoreVariant::BetaOnly];
    variants.extend(envs.iter().map(|&e| ScoreVariant::WithGamma(e)));
    for variant in variants {
        let report = perplexity(&model, &test, PerplexityMode { variant, protocol }, &rng)?;
        let scored_with = match variant {
            ScoreVariant::BetaOnly => Value::Null,
            ScoreVariant::WithGamma(e) => Value::String(model.env_names[e].clone()),
        };
        info!("perplexity {:.3} (gamma: {scored_with})", report.perplexity);
        let mut body = serde_json::to_value(&report)?;
        body["gamma_env"] = scored_with;
        write_record(&mut w, "perplexity", body)?;
    }
    write_record(&mut w, "npmi", json!({ "top_n": top_n, "value": npmi(&model, &test, top_n, eps)? }))?;
    if model.gamma_hat.is_some() {
        let per_env = sparsity(&model, threshold)?;
        let overall = per_env.iter().sum::<f64>() / per_env.len() as f64;
        let named: serde_json::Map<String, Value> =
            model.env_names.iter().cloned().zip(per_env.into_iter().map(Value::from)).collect();
        write_record(
            &mut w,
            "sparsity",
            json!({ "threshold": threshold, "overall": overall, "per_env": named }),
        )?;
        if model.num_envs() == 2 {
            match count_opposite(&model, &test, top_n) {
                Ok(v) => write_record(&mut w, "count_opposite", json!({ "top_n": top_n, "value": v }))?,
                Err(e) => warn!("count_opposite skipped: {e}"),
            }
        }
    }
    emit_top_words(&mut w, &model, top_n)?;
    w.flush()?;
    Ok(())
}

pub fn topics(cfg: &RunConfig) -> Result<()> {
    let top_n = cfg.top_n()?;
    let model = load_model(RunConfig::require(&cfg.model, "model")?)?;
    let mut w = sink(cfg)?;
    emit_top_words(&mut w, &model, top_n)?;
    w.flush()?;
    Ok(())
}

/// One token per line; the list is named after the file stem.
fn read_keywords(path: &Path) -> Result<KeywordList> {
    let file = File::open(path).with_context(|| format!("opening keyword file {}", path.display()))?;
    let mut seen = HashSet::new();
    let mut tokens = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        let t = line.trim().to_lowercase();
        if !t.is_empty() && seen.insert(t.clone()) {
            tokens.push(t);
        }
    }
    let name = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
    Ok(KeywordList { name, tokens })
}

fn write_json_out(cfg: &RunConfig, value: &Value) -> Result<()> {
    if let Some(p) = &cfg.out {
        fs::write(p, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

pub fn causal(cfg: &RunConfig) -> Result<()> {
    let mut experiment = cfg.experiment_spec()?;
    let top_n = cfg.top_n()?;
    match cfg.mode.as_deref().unwrap_or("model") {
        "model" => {
            let keyword_paths = match &cfg.keywords {
                Some(k) if !k.is_empty() => k,
                _ => bail!("causal needs at least one --keywords file"),
            };
            let model_path = RunConfig::require(&cfg.model, "model")?;
            let corpus_path = RunConfig::require(&cfg.corpus, "corpus")?;
            experiment.keyword_lists = keyword_paths.iter().map(|p| read_keywords(p)).collect::<Result<_>>()?;
            experiment.validate()?;
            let model = load_model(model_path)?;
            let corpus = load_for_model(&model, corpus_path)?;
            let (result, matches) = run_model_experiment(&model, &corpus, &experiment, top_n)?;
            for (list, m) in experiment.keyword_lists.iter().zip(&matches) {
                info!("keyword list '{}' -> topics {:?} (overlap {})", list.name, m.tied, m.overlap);
            }
            print!("{}", format_table(&[("model".into(), result.clone())]));
            write_json_out(cfg, &json!({ "result": result, "matches": matches }))
        }
        "recovery" => {
            let planted = cfg.planted_spec()?;
            let mut model = cfg.model_config()?;
            if cfg.num_topics.is_none() {
                model.num_topics = planted.num_topics;
            }
            let outcome = end_to_end_recovery(&planted, &experiment, &model)?;
            print!(
                "{}",
                format_table(&[
                    ("mtm".into(), outcome.mtm.clone()),
                    ("vtm".into(), outcome.vtm.clone()),
                    ("oracle".into(), outcome.oracle.clone()),
                ])
            );
            println!("true effect: {:.3}", outcome.true_effect);
            write_json_out(cfg, &serde_json::to_value(&outcome)?)
        }
        other => bail!("unknown causal mode '{other}' (expected model or recovery)"),
    }
}

pub fn simulate(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.gen_spec()?;
    let dir = RunConfig::require(&cfg.out, "out")?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let (corpus, truth) = generate_synthetic(&spec)?;
    corpus.write_jsonl(&dir.join("corpus.jsonl"))?;
    corpus.vocab.write_to(&dir.join("vocab.txt"))?;
    truth_to_artifact(&truth, &spec, &corpus.vocab, &corpus.env_names)?.write(&dir.join("truth.mtm"))?;
    info!("wrote {} documents to {}", corpus.num_docs(), dir.display());
    Ok(())
}

/// Returns whether every instance passed.
pub fn grad_check(cfg: &RunConfig) -> Result<bool> {
    let variants: Vec<PriorVariant> = match &cfg.prior {
        Some(p) => vec![p.parse()?],
        None => vec![PriorVariant::Vtm, PriorVariant::Normal, PriorVariant::Ard, PriorVariant::Horseshoe],
    };
    let forms: Vec<RateForm> = match &cfg.rate_form {
        Some(f) => vec![f.parse()?],
        None => vec![RateForm::LogAdditive, RateForm::ExpSum],
    };
    let tol = cfg.tolerance.unwrap_or(1e-4);
    let mut w = sink(cfg)?;
    let mut all_pass = true;
    for &variant in &variants {
        for &form in &forms {
            let inst = GradCheckInstance::random(
                variant,
                form,
                cfg.num_docs.unwrap_or(8),
                cfg.vocab_size.unwrap_or(30),
                cfg.num_topics.unwrap_or(3),
                cfg.num_envs.unwrap_or(2),
                cfg.seed(),
            )?;
            let report = check_elbo_gradients(&inst)?;
            let pass = report.passes(tol);
            all_pass &= pass;
            write_record(
                &mut w,
                "grad_check",
                json!({
                    "prior": variant,
                    "rate_form": form,
                    "num_coords": report.num_coords,
                    "max_rel_error": report.max_rel_error,
                    "worst_coord": report.worst_coord,
                    "tolerance": tol,
                    "pass": pass,
                }),
            )?;
        }
    }
    w.flush()?;
    Ok(all_pass)
}
