//! `rdm`: corpus generation, training, sampling, verification and evaluation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rdm_core::commands;
use rdm_core::config::{RunConfig, SamplingSpec, StepsSpec};
use rdm_core::corpus::CorpusKind;
use rdm_core::sampler::{DecodeMode, KScheduleKind, RoutingStrategy, VanillaKind};
use rdm_core::verify::{render_table, VerifyOptions};
use rdm_core::Error;

#[derive(Parser)]
#[command(name = "rdm", version, about = "Reparameterized discrete diffusion on synthetic token corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (and its data model, when it has one).
    GenCorpus {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long = "k")]
        vocab: usize,
        #[arg(long = "n")]
        seq_len: usize,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        /// Output file, or the stem of a .src/.tgt pair.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a denoiser from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate rows from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run config whose sampling section provides defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Conditioning rows, one output row per source row.
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Run the verification suite; exits with 2 if any check fails.
    Verify {
        /// Comma-separated subset of checks.
        #[arg(long, value_delimiter = ',')]
        only: Option<Vec<String>>,
        /// Use this checkpoint's model for the gradient check.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        draws: Option<usize>,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Print the JSON report instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Score generated rows against a reference file or a data model.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long, conflicts_with = "model")]
        reference: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Factorized,
    Markov,
    ReversePairs,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Stochastic,
    Adaptive,
}

#[derive(Clone, Copy, ValueEnum)]
enum KScheduleArg {
    Cosine,
    Linear,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Argmax,
    Sample,
}

#[derive(Clone, Copy, ValueEnum)]
enum VanillaArg {
    Absorbing,
    Multinomial,
}

#[derive(Args)]
struct SamplingArgs {
    /// Number of evenly spaced reverse steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    #[arg(long, value_enum)]
    k_schedule: Option<KScheduleArg>,
    #[arg(long)]
    gumbel: bool,
    #[arg(long)]
    conservative: bool,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long, value_enum)]
    vanilla: Option<VanillaArg>,
    #[arg(long)]
    seed: Option<u64>,
}

impl SamplingArgs {
    fn apply(&self, mut spec: SamplingSpec) -> SamplingSpec {
        if let Some(s) = self.steps {
            spec.steps = StepsSpec::Count(s);
        }
        let (mut kind, mut gumbel, mut conservative) = match spec.strategy {
            RoutingStrategy::AdaptiveTopK {
                k_schedule,
                gumbel,
                conservative_v1,
            } => (k_schedule, gumbel, conservative_v1),
            RoutingStrategy::Stochastic => (KScheduleKind::Cosine, false, false),
        };
        if let Some(k) = self.k_schedule {
            kind = match k {
                KScheduleArg::Cosine => KScheduleKind::Cosine,
                KScheduleArg::Linear => KScheduleKind::Linear,
            };
        }
        gumbel |= self.gumbel;
        conservative |= self.conservative;
        let adaptive = RoutingStrategy::AdaptiveTopK {
            k_schedule: kind,
            gumbel,
            conservative_v1: conservative,
        };
        spec.strategy = match self.strategy {
            Some(StrategyArg::Stochastic) => RoutingStrategy::Stochastic,
            Some(StrategyArg::Adaptive) => adaptive,
            None if matches!(spec.strategy, RoutingStrategy::Stochastic) => RoutingStrategy::Stochastic,
            None => adaptive,
        };
        if let Some(t) = self.tau {
            spec.tau = t;
        }
        if let Some(m) = self.mode {
            spec.mode = match m {
                ModeArg::Argmax => DecodeMode::Argmax,
                ModeArg::Sample => DecodeMode::Sample,
            };
        }
        if let Some(c) = self.candidates {
            spec.candidates = c;
        }
        if let Some(c) = self.count {
            spec.count = c;
        }
        if let Some(v) = self.vanilla {
            spec.vanilla = Some(match v {
                VanillaArg::Absorbing => VanillaKind::Absorbing,
                VanillaArg::Multinomial => VanillaKind::Multinomial,
            });
        }
        spec
    }
}

enum Failure {
    Verification,
    Err(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::Err(e)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenCorpus {
            kind,
            vocab,
            seq_len,
            count,
            seed,
            out,
        } => {
            let kind = match kind {
                KindArg::Factorized => CorpusKind::Factorized,
                KindArg::Markov => CorpusKind::Markov,
                KindArg::ReversePairs => CorpusKind::ReversePairs,
            };
            commands::gen_corpus(kind, vocab, seq_len, count, seed, &out)?;
        }
        Command::Train {
            config,
            data,
            out_dir,
            steps,
            seed,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(d) = data {
                cfg.paths.data = Some(d);
            }
            if let Some(o) = out_dir {
                cfg.paths.out_dir = Some(o);
            }
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dir = commands::train_command(&cfg.materialize())?;
            eprintln!("wrote {}", dir.display());
        }
        Command::Sample {
            checkpoint,
            config,
            source,
            out,
            sampling,
        } => {
            let (base, cfg_seed) = match config {
                Some(p) => {
                    let cfg = RunConfig::load(&p)?;
                    (cfg.sampling, Some(cfg.seed))
                }
                None => (SamplingSpec::default(), None),
            };
            let spec = sampling.apply(base);
            let seed = sampling.seed.or(cfg_seed).unwrap_or(0);
            commands::sample_command(&checkpoint, &spec, source.as_deref(), seed, &out)?;
        }
        Command::Verify {
            only,
            checkpoint,
            seed,
            draws,
            report,
            json,
        } => {
            let mut opts = VerifyOptions {
                seed,
                only,
                ..Default::default()
            };
            if let Some(d) = draws {
                opts.draws = d;
            }
            let reports = commands::verify_command(&opts, checkpoint.as_deref(), report.as_deref())?;
            if json {
                let bytes = rdm_core::files::to_json_bytes(&reports)?;
                print!("{}", String::from_utf8_lossy(&bytes));
            } else {
                print!("{}", render_table(&reports));
            }
            if reports.iter().any(|r| !r.passed) {
                return Err(Failure::Verification);
            }
        }
        Command::Eval {
            generated,
            reference,
            model,
            out,
        } => {
            let metrics = commands::eval_command(&generated, reference.as_deref(), model.as_deref())?;
            match out {
                Some(p) => rdm_core::files::write_json(&p, &metrics)?,
                None => print!("{}", String::from_utf8_lossy(&rdm_core::files::to_json_bytes(&metrics)?)),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification) => ExitCode::from(2),
        Err(Failure::Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::InvalidSchedule(_) => 3,
                Error::Divergence(_) => 4,
                _ => 1,
            })
        }
    }
}
