//! Subcommand implementations. Each returns its result so tests can call
//! them without spawning the binary.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ngrammer::lm::{build_model, evaluate_ppl, gen_corpus, held_out, train, CachedModel, MarkovCorpus, TransformerLm};
use ngrammer::{
    bench_latent_paths, build_cache, checkpoint_bytes, fnv1a64, inspect_clusters, read_checkpoint, write_bench_table,
    BenchRow, BenchSettings, ClusterReport, LatentCache,
};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, MANIFEST};
use crate::CliError;

/// Final numbers of a training run. Contains nothing that depends on timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub seed: u64,
    pub steps: usize,
    pub params: usize,
    pub final_loss: f64,
    pub eval_tokens: usize,
    pub perplexity: f64,
    pub corpus_entropy_rate: f64,
    pub corpus_order1_entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub params: usize,
    pub checkpoint_fnv1a64: String,
    pub codebook_fingerprint: Option<String>,
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn numeric_or_core(e: ngrammer::Error) -> CliError {
    match e {
        ngrammer::Error::Numeric(m) => CliError::Numeric(m),
        other => CliError::Core(other),
    }
}

pub fn held_out_split(cfg: &RunConfig, corpus: &MarkovCorpus) -> Vec<Vec<u32>> {
    held_out(corpus, cfg.data.corpus_seed, cfg.data.eval_sequences, cfg.model.seq_len + 1)
}

/// Builds, trains and evaluates the configured model. Every step record
/// is passed to `on_step` as a log line.
pub fn train_model(
    cfg: &RunConfig,
    mut on_step: impl FnMut(&str),
) -> Result<(TransformerLm, Metrics), CliError> {
    let corpus = gen_corpus(&cfg.corpus_config())?;
    let mut model = build_model(&cfg.model_config()?, cfg.seed)?;
    let tcfg = cfg.train_config();
    let log = train(&mut model, &corpus, &tcfg, |r| on_step(&r.tsv())).map_err(numeric_or_core)?;
    let split = held_out_split(cfg, &corpus);
    let perplexity = evaluate_ppl(&model, &split)?;
    if !perplexity.is_finite() {
        return Err(CliError::Numeric(format!("held-out perplexity is {perplexity}")));
    }
    let metrics = Metrics {
        seed: cfg.seed,
        steps: log.len(),
        params: model.num_params(),
        final_loss: log.last().map_or(f64::NAN, |r| r.loss),
        eval_tokens: split.iter().map(|s| s.len() - 1).sum(),
        perplexity,
        corpus_entropy_rate: corpus.entropy_rate(),
        corpus_order1_entropy: corpus.order1_entropy(),
    };
    Ok((model, metrics))
}

/// Writes checkpoint and manifest for `model` into `dir`.
pub fn save_run(dir: &Path, cfg: &RunConfig, model: &TransformerLm) -> Result<(), CliError> {
    let bytes = checkpoint_bytes(model)?;
    write_file(&dir.join(&cfg.io.checkpoint), &bytes)?;
    let manifest = Manifest {
        config: cfg.clone(),
        params: model.num_params(),
        checkpoint_fnv1a64: format!("{:016x}", fnv1a64(&bytes)),
        codebook_fingerprint: model
            .ngrammer()
            .and_then(|ng| ng.codebook())
            .map(|cb| format!("{:016x}", cb.fingerprint())),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_file(&dir.join(MANIFEST), json.as_bytes())
}

/// Trains per the config and writes checkpoint, manifest, log and metrics to `out`.
pub fn cmd_train(config: &Path, out: &Path) -> Result<Metrics, CliError> {
    let cfg = RunConfig::load(config)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let log_path = out.join(&cfg.io.log);
    let mut log = create(&log_path)?;
    let mut log_err = None;
    let result = train_model(&cfg, |line| {
        if log_err.is_none() {
            if let Err(e) = writeln!(log, "{line}") {
                log_err = Some(e);
            }
        }
    });
    log.flush().map_err(|e| CliError::io(&log_path, e))?;
    if let Some(e) = log_err {
        return Err(CliError::io(&log_path, e));
    }
    let (model, metrics) = result?;
    save_run(out, &cfg, &model)?;
    let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize") + "\n";
    write_file(&out.join(&cfg.io.metrics), json.as_bytes())?;
    Ok(metrics)
}

/// Loads the manifest and checkpoint written by [`cmd_train`].
pub fn load_run(dir: &Path) -> Result<(RunConfig, TransformerLm), CliError> {
    let manifest_path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| CliError::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", manifest_path.display())))?;
    let cfg = manifest.config;
    let path = dir.join(&cfg.io.checkpoint);
    let file = File::open(&path).map_err(|e| CliError::io(&path, e))?;
    let model = read_checkpoint(&cfg.model_config()?, &mut BufReader::new(file))?;
    Ok((cfg, model))
}

fn frozen_codebook(model: &TransformerLm) -> Result<&ngrammer::Codebook, CliError> {
    model
        .ngrammer()
        .and_then(|ng| ng.codebook())
        .filter(|cb| cb.is_frozen())
        .ok_or_else(|| CliError::Config("model has no frozen N-Grammer codebook".into()))
}

/// Held-out perplexity of a saved model, optionally with cached latents.
pub fn cmd_eval(dir: &Path, use_cache: bool) -> Result<f64, CliError> {
    let (cfg, model) = load_run(dir)?;
    let corpus = gen_corpus(&cfg.corpus_config())?;
    let split = held_out_split(&cfg, &corpus);
    if use_cache {
        let path = dir.join(&cfg.io.cache);
        let file = File::open(&path).map_err(|e| CliError::io(&path, e))?;
        let cache = LatentCache::read_text(BufReader::new(file))?;
        let scorer = CachedModel { model: &model, cache: &cache };
        Ok(evaluate_ppl(&scorer, &split)?)
    } else {
        Ok(evaluate_ppl(&model, &split)?)
    }
}

/// Builds the token-to-latent cache of a saved model. Returns the path written.
pub fn cmd_build_cache(dir: &Path, out: Option<&Path>) -> Result<PathBuf, CliError> {
    let (cfg, model) = load_run(dir)?;
    if model.config().position != ngrammer::lm::LayerPosition::Embedding {
        return Err(CliError::Config("latents are cacheable only at the embedding position".into()));
    }
    let cache = build_cache(model.token_embeddings(), frozen_codebook(&model)?)?;
    let path = out.map_or_else(|| dir.join(&cfg.io.cache), Path::to_path_buf);
    let mut w = create(&path)?;
    cache.write_text(&mut w)?;
    w.flush().map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

/// Where `inspect` takes its model from.
#[derive(Debug, Clone)]
pub enum ModelSource {
    /// A directory written by `train`.
    Checkpoint(PathBuf),
    /// An untrained model built from a config file.
    Config(PathBuf),
}

/// Writes the cluster report of a model's token embeddings to `w`.
pub fn cmd_inspect(source: &ModelSource, top: Option<usize>, w: &mut impl Write) -> Result<ClusterReport, CliError> {
    let mut model = match source {
        ModelSource::Checkpoint(dir) => load_run(dir)?.1,
        ModelSource::Config(path) => {
            let cfg = RunConfig::load(path)?;
            build_model(&cfg.model_config()?, cfg.seed)?
        }
    };
    if model.config().position != ngrammer::lm::LayerPosition::Embedding {
        return Err(CliError::Config("token clusters are defined only at the embedding position".into()));
    }
    model.prime_codebook_from_embeddings()?;
    model.freeze()?;
    let cache = build_cache(model.token_embeddings(), frozen_codebook(&model)?)?;
    let names: Vec<String> = (0..cache.vocab()).map(|t| format!("t{t}")).collect();
    let report = inspect_clusters(&cache, &names)?;
    report.write_tsv(w, top)?;
    Ok(report)
}

/// Times on-the-fly against cached latent retrieval and writes the table.
pub fn cmd_bench(
    k_values: &[usize],
    tokens: usize,
    settings: BenchSettings,
    w: &mut impl Write,
) -> Result<Vec<BenchRow>, CliError> {
    if k_values.is_empty() {
        return Err(CliError::Config("bench needs at least one k".into()));
    }
    let rows = bench_latent_paths(k_values, tokens, settings)?;
    write_bench_table(w, &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: &'static str,
    pub position: String,
    /// Median over seeds.
    pub perplexity: f64,
    pub per_seed: Vec<f64>,
}

pub const ABLATION_VARIANTS: [&str; 4] = ["embedding", "begin", "mid", "end"];

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains the four insertion points on identical data and reports
/// held-out perplexity per variant, in the order of [`ABLATION_VARIANTS`].
pub fn cmd_ablate_position(config: &Path, seeds: usize, w: &mut impl Write) -> Result<Vec<AblationRow>, CliError> {
    let base = RunConfig::load(config)?;
    if !base.ngrammer.enabled {
        return Err(CliError::Config("position ablation needs ngrammer.enabled = true".into()));
    }
    if seeds == 0 {
        return Err(CliError::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(4);
    for variant in ABLATION_VARIANTS {
        let mut cfg = base.clone();
        cfg.model.position = variant.into();
        let position = format!("{:?}", cfg.position()?);
        let mut per_seed = Vec::with_capacity(seeds);
        for s in 0..seeds {
            cfg.seed = base.seed + s as u64;
            per_seed.push(train_model(&cfg, |_| {})?.1.perplexity);
        }
        rows.push(AblationRow {
            variant,
            position,
            perplexity: median(&per_seed),
            per_seed,
        });
    }
    writeln!(w, "variant\tposition\tperplexity").map_err(|e| CliError::Io(e.to_string()))?;
    for r in &rows {
        writeln!(w, "{}\t{}\t{:.4}", r.variant, r.position, r.perplexity).map_err(|e| CliError::Io(e.to_string()))?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
