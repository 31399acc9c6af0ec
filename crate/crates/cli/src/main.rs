//! `pplab`: synthesize corpora, produce pseudo-labels, check gradients.

mod keys;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use pplab::data_model::{load_corpus, PipelineConfig};
use pplab::mil_head::gradcheck::run_gradcheck;
use pplab::pipeline::{run_corpus, run_single_mil_baseline, write_outputs};
use pplab::synth_eval::{write_corpus, SyntheticConfig};
use pplab::Error;

const SEED_VAR: &str = "PPLAB_SEED";

#[derive(Debug, Parser)]
#[command(name = "pplab", version, about = "Point-prompted pseudo-label generation")]
struct Cli {
    /// Worker threads for per-scene work; 0 uses every core. Output does not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus with ground truth.
    Synth {
        /// Synthetic corpus config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for scenes and manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train both heads on a corpus and write pseudo-labels, losses and, with ground truth, a report.
    Run {
        /// Corpus directory holding manifest.json.
        #[arg(long)]
        corpus: PathBuf,
        /// Pipeline config (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Single-stage selection only.
        #[arg(long)]
        baseline: bool,
    },
    /// Compare analytic loss gradients with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random instances per loss.
        #[arg(long, default_value_t = 10)]
        instances: usize,
        /// Perturb one analytic gradient coordinate (exercises the failure path).
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
}

/// Process exit status of a failed command.
#[derive(Debug)]
enum Failure {
    Check(String),
    Config(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Config(_) => 2,
            Failure::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Check(m) | Failure::Config(m) | Failure::Io(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let text = e.to_string();
        match e {
            Error::Config { .. } => Failure::Config(text),
            Error::Io { .. } | Error::Parse { .. } | Error::Validation { .. } | Error::FeatureDimMismatch { .. } => {
                Failure::Io(text)
            }
            _ => Failure::Check(text),
        }
    }
}

fn seed_override() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Config(format!("{SEED_VAR}: expected an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn synth(config: &Path, out: &Path) -> Result<(), Failure> {
    let mut cfg = SyntheticConfig::load(config)?;
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    let manifest = write_corpus(&cfg, out)?;
    println!("wrote {} scenes to {}", manifest.scenes.len(), out.display());
    Ok(())
}

fn run(corpus: &Path, config: &Path, out: &Path, baseline: bool, jobs: usize) -> Result<(), Failure> {
    let mut cfg = PipelineConfig::load(config)?;
    if let Some(seed) = seed_override()? {
        cfg.train.seed = seed;
    }
    let (manifest, scenes) = load_corpus(corpus)?;
    let output = if baseline {
        run_single_mil_baseline(&scenes, &manifest.scenes, &cfg, jobs)?
    } else {
        run_corpus(&scenes, &manifest.scenes, &cfg, jobs)?
    };
    for (name, labels) in manifest.scenes.iter().zip(&output.labels) {
        for l in labels {
            for d in &l.diagnostics {
                eprintln!("{name}: instance {}: {d}", l.instance_id);
            }
        }
    }
    write_outputs(out, &manifest.scenes, &output)?;
    let objects: usize = output.labels.iter().map(Vec::len).sum();
    match &output.report {
        Some(r) => println!(
            "labeled {objects} objects in {} scenes: miou_box {:.4} gap {:.4} (|gap| {:.4}, {} qualifying)",
            r.scenes, r.miou_box, r.gap, r.gap_abs, r.gap_qualifying
        ),
        None => println!("labeled {objects} objects in {} scenes", scenes.len()),
    }
    Ok(())
}

fn gradcheck(seed: u64, instances: usize, corrupt: bool) -> Result<(), Failure> {
    let seed = seed_override()?.unwrap_or(seed);
    if instances == 0 {
        return Err(Failure::Config("instances: must be >= 1".into()));
    }
    let results = run_gradcheck(seed, instances, corrupt)?;
    let mut failed = Vec::new();
    for r in &results {
        let verdict = if r.passed() { "pass" } else { "FAIL" };
        println!(
            "{:<9} max_rel_error {:.3e} over {} instances at {} (instance {}) {verdict}",
            r.objective.name(),
            r.max_rel_error,
            r.instances,
            r.worst.0,
            r.worst.1
        );
        if !r.passed() {
            failed.push(format!("{} at {} (instance {})", r.objective.name(), r.worst.0, r.worst.1));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient mismatch: {}", failed.join(", "))))
    }
}

fn main() -> ExitCode {
    let command = Cli::command().after_long_help(keys::reference());
    let cli = match Cli::from_arg_matches(&command.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    if cli.jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global() {
            eprintln!("error: jobs: {e}");
            return ExitCode::from(Failure::Config(String::new()).code());
        }
    }
    let result = match &cli.command {
        Command::Synth { config, out } => synth(config, out),
        Command::Run {
            corpus,
            config,
            out,
            baseline,
        } => run(corpus, config, out, *baseline, cli.jobs),
        Command::Gradcheck {
            seed,
            instances,
            corrupt_gradient,
        } => gradcheck(*seed, *instances, *corrupt_gradient),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
