//! The operations behind each `rdm` subcommand, callable without a shell.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::categorical::TokenId;
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, SamplingSpec};
use crate::corpus::{generate, read_rows, write_rows, Corpus, CorpusKind};
use crate::denoiser::{DataModel, TrainableDenoiser};
use crate::error::{Error, Result};
use crate::eval::{model_metrics, paired_metrics, Metrics};
use crate::files::{write_atomic, write_json};
use crate::processes::NoiseDistribution;
use crate::sampler::{rerank, sample, sample_vanilla};
use crate::schedules::AlphaSchedule;
use crate::trainer::{train, CurvePoint, TrainOutcome};
use crate::verify::{run_suite, CheckReport, VerifyOptions};

pub fn gen_corpus(kind: CorpusKind, k: usize, n: usize, count: usize, seed: u64, out: &Path) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate(kind, k, n, count, &mut rng)?.save(out)
}

pub fn loss_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("step,loss,weight,t\n");
    for p in curve {
        let _ = writeln!(s, "{},{},{},{}", p.step, p.loss, p.weight, p.t);
    }
    s
}

/// Loads and checks the corpus named by the config.
pub fn load_corpus(cfg: &RunConfig, noise: &NoiseDistribution) -> Result<Corpus> {
    let path = cfg
        .paths
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("paths.data is required for training".into()))?;
    let corpus = Corpus::load(path).map_err(|e| Error::Config(e.to_string()))?;
    corpus.validate(cfg.vocab, noise.mask_id())?;
    let len = corpus.seq_len().unwrap_or(0);
    if len > cfg.seq_len {
        return Err(Error::Config(format!("rows have length {len} but N = {}", cfg.seq_len)));
    }
    if let Some(src) = &corpus.sources {
        if src.first().map_or(0, Vec::len) > cfg.seq_len {
            return Err(Error::Config(format!("source rows exceed N = {}", cfg.seq_len)));
        }
    }
    Ok(corpus)
}

/// Initializes and trains a model as configured.
pub fn train_from_config(cfg: &RunConfig, corpus: &Corpus) -> Result<(TrainOutcome, AlphaSchedule, NoiseDistribution)> {
    cfg.validate()?;
    let sched = cfg.schedule()?;
    let noise = cfg.noise()?;
    let arch = cfg.arch(corpus.sources.is_some());
    let model = TrainableDenoiser::init(arch, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let out = train(model, &corpus.rows, corpus.sources.as_deref(), &cfg.train, &sched, &noise)?;
    Ok((out, sched, noise))
}

/// `rdm train`: writes `config.json`, `checkpoint.json` and `loss.csv` into the output directory.
pub fn train_command(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let out_dir = cfg
        .paths
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("paths.out_dir is required for training".into()))?;
    let noise = cfg.noise()?;
    let corpus = load_corpus(cfg, &noise)?;
    fs::create_dir_all(&out_dir)?;
    write_atomic(&out_dir.join("config.json"), &cfg.to_json()?)?;
    let (out, sched, noise) = train_from_config(cfg, &corpus)?;
    let ck = Checkpoint::new(&out.model, Some(&out.ema), &sched, &noise);
    ck.save(&out_dir.join("checkpoint.json"))?;
    write_atomic(&out_dir.join("loss.csv"), loss_csv(&out.curve).as_bytes())?;
    Ok(out_dir)
}

/// Generates rows from a checkpoint: one per source row when `sources` is
/// given, otherwise `spec.count` unconditional rows.
pub fn sample_rows(
    ck: &Checkpoint,
    spec: &SamplingSpec,
    sources: Option<&[Vec<TokenId>]>,
    seed: u64,
) -> Result<Vec<Vec<TokenId>>> {
    spec.validate()?;
    let model = ck.sampling_model()?;
    if model.arch.conditioned != sources.is_some() {
        return Err(Error::InvalidArgument(if model.arch.conditioned {
            "this model needs a source file".into()
        } else {
            "this model takes no source file".into()
        }));
    }
    let sched = ck.schedule()?;
    let steps = spec.steps.resolve(sched.steps())?;
    let n = model.arch.max_len;
    let opts = spec.decode_options();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = sources.map_or(spec.count, |s| s.len());
    let mut out = Vec::with_capacity(rows);
    for i in 0..rows {
        let cond = sources.map(|s| s[i].as_slice());
        let mut cands = Vec::with_capacity(spec.candidates);
        for _ in 0..spec.candidates {
            let row = match spec.vanilla {
                Some(kind) => sample_vanilla(&model, n, &steps, kind, &sched, &ck.noise, spec.tau, spec.mode, cond, &mut rng)?,
                None => sample(&model, n, &steps, &sched, &ck.noise, &opts, cond, &mut rng)?,
            };
            cands.push(row);
        }
        let best = if cands.len() == 1 {
            cands.pop().expect("one candidate")
        } else {
            rerank(&cands, &model, cond)?.to_vec()
        };
        out.push(best);
    }
    Ok(out)
}

pub fn sample_command(
    checkpoint: &Path,
    spec: &SamplingSpec,
    source: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let sources = source.map(read_rows).transpose()?;
    let rows = sample_rows(&ck, spec, sources.as_deref(), seed)?;
    write_rows(out, &rows)
}

/// Metrics against a paired reference file or a data-model sidecar.
pub fn eval_command(generated: &Path, reference: Option<&Path>, model: Option<&Path>) -> Result<Metrics> {
    let gen = read_rows(generated)?;
    match (reference, model) {
        (Some(r), None) => paired_metrics(&gen, &read_rows(r)?),
        (None, Some(m)) => {
            let dm: DataModel = serde_json::from_slice(&fs::read(m)?)?;
            dm.validate()?;
            model_metrics(&gen, &dm)
        }
        _ => Err(Error::InvalidArgument("give exactly one of a reference file or a data model".into())),
    }
}

/// Runs the verification suite, optionally on a checkpoint's model.
pub fn verify_command(opts: &VerifyOptions, checkpoint: Option<&Path>, report: Option<&Path>) -> Result<Vec<CheckReport>> {
    let model = checkpoint.map(|p| Checkpoint::load(p).and_then(|c| c.model())).transpose()?;
    let reports = run_suite(opts, model.as_ref())?;
    if let Some(p) = report {
        write_json(p, &reports)?;
    }
    Ok(reports)
}
