use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use more_core::config::RunConfig;
use more_core::training::dump::dump_maps;
use more_core::training::eval::evaluate;
use more_core::training::run::{load_model, summary_text, train_run, MASK_REPORT, SEED_REPORT, SUMMARY_FILE};
use more_core::training::{Model, ModelConfig};
use more_core::params::ParamStore;
use more_core::synthdata::generate_split;
use more_core::verify::{run_all, VerifyOptions};
use more_core::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NON_FINITE: u8 = 3;
const EXIT_CHECKPOINT: u8 = 4;

#[derive(Parser)]
#[command(name = "more", about = "Train, evaluate and inspect the weakly supervised segmentation model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file and write the run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's init and batch-order seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Validation settings; the architecture must match the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the reports here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write activation maps and masks for one synthetic sample.
    DumpMaps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Sample seed; defaults to the first validation seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the oracle and gradient-check suite.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        perturb_gradients: bool,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn new(code: u8, msg: impl Into<String>) -> Self {
        Self { code, msg: msg.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_CONFIG,
            Error::NonFinite { .. } | Error::Numeric(_) => EXIT_NON_FINITE,
            Error::Format { .. } => EXIT_CHECKPOINT,
            _ => EXIT_FAILURE,
        };
        Self::new(code, e.to_string())
    }
}

fn read_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::new(EXIT_CONFIG, format!("cannot read config {}: {e}", path.display())))?;
    RunConfig::parse(&text).map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", path.display())))
}

/// Any failure to rebuild the model from the file counts as a bad checkpoint.
fn read_checkpoint(path: &Path) -> Result<(RunConfig, Model, ParamStore), Failure> {
    let (cfg, model, store, _) = load_model(path)
        .map_err(|e| Failure::new(EXIT_CHECKPOINT, format!("bad checkpoint {}: {e}", path.display())))?;
    Ok((cfg, model, store))
}

/// The checkpoint's config, or `--config` if its architecture agrees.
fn effective_config(saved: RunConfig, path: Option<&Path>) -> Result<RunConfig, Failure> {
    let Some(path) = path else { return Ok(saved) };
    let cfg = read_config(path)?;
    let arch = |m: &ModelConfig| (m.encoder.clone(), m.decoder_hidden, m.use_gcr);
    if arch(&cfg.model) != arch(&saved.model) {
        return Err(Failure::new(EXIT_CONFIG, "config architecture does not match the checkpoint"));
    }
    Ok(RunConfig {
        model: saved.model,
        ..cfg
    })
}

fn train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = read_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    cfg.validate()?;
    let dir = cfg.out_dir.clone();
    let steps = cfg.steps;
    let summary = train_run(&cfg, &dir, |r| {
        if r.step % 100 == 0 || r.step == steps {
            println!(
                "step {:>6}  total {:.5}  cls {:.5}  cre {:.5}  ure {:.5}  seg {:.5}",
                r.step, r.total, r.cls, r.cre, r.ure, r.seg
            );
        }
    })?;
    print!("{}", summary_text(&summary.val, Some(summary.train_cls_accuracy)));
    println!("wrote {}", dir.display());
    Ok(())
}

fn eval(checkpoint: &Path, config: Option<&Path>, out: Option<PathBuf>) -> Result<(), Failure> {
    let (saved, model, store) = read_checkpoint(checkpoint)?;
    let cfg = effective_config(saved, config)?;
    let val = generate_split(cfg.val_seed, cfg.val_size, &cfg.synth())?;
    let report = evaluate(&model, &store, &val)?;
    println!("# seed (LAM pseudo labels)");
    print!("{}", report.seed.to_csv());
    println!("# mask (decoder)");
    print!("{}", report.mask.to_csv());
    let summary = summary_text(&report, None);
    print!("{summary}");
    if let Some(dir) = out {
        fs::create_dir_all(&dir).map_err(Error::from)?;
        fs::write(dir.join(SEED_REPORT), report.seed.to_csv()).map_err(Error::from)?;
        fs::write(dir.join(MASK_REPORT), report.mask.to_csv()).map_err(Error::from)?;
        fs::write(dir.join(SUMMARY_FILE), summary).map_err(Error::from)?;
    }
    Ok(())
}

fn dump(checkpoint: &Path, config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let (saved, model, store) = read_checkpoint(checkpoint)?;
    let cfg = effective_config(saved, config)?;
    let seed = seed.unwrap_or(cfg.val_seed);
    for path in dump_maps(&model, &store, &cfg, seed, out)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn verify(config: Option<&Path>, seed: u64, perturb: bool) -> Result<(), Failure> {
    if let Some(path) = config {
        read_config(path)?;
    }
    let opts = VerifyOptions {
        seed,
        perturb_gradients: perturb,
        ..VerifyOptions::default()
    };
    let checks = run_all(&opts);
    for c in &checks {
        println!("{}", c.line());
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", checks.len());
    if failed > 0 {
        return Err(Failure::new(EXIT_FAILURE, format!("{failed} checks failed")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, seed, out } => train(&config, seed, out),
        Command::Eval { checkpoint, config, out } => eval(&checkpoint, config.as_deref(), out),
        Command::DumpMaps {
            checkpoint,
            config,
            seed,
            out,
        } => dump(&checkpoint, config.as_deref(), seed, &out),
        Command::Verify {
            config,
            seed,
            perturb_gradients,
        } => verify(config.as_deref(), seed, perturb_gradients),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
