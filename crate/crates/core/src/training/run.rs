//! A complete training run written to an output directory.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::synthdata::generate_split;

use super::checkpoint::Checkpoint;
use super::eval::{evaluate, EvalReport};
use super::losses::LossReport;
use super::model::Model;
use super::trainer::Trainer;

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "checkpoint.bin";
pub const SEED_REPORT: &str = "val_seed_metrics.csv";
pub const MASK_REPORT: &str = "val_mask_metrics.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
const LOCK_FILE: &str = "run.lock";

/// Exclusive claim on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is locked by another run",
                dir.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn checkpoint_name(step: u64) -> String {
    format!("checkpoint_step{step:06}.bin")
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub losses: Vec<LossReport>,
    pub val: EvalReport,
    pub train_cls_accuracy: f64,
}

/// Trains per `config`, streaming losses to `out/metrics.csv` and writing
/// checkpoints and final validation reports. `on_step` sees every report.
pub fn train_run(config: &RunConfig, out: &Path, mut on_step: impl FnMut(&LossReport)) -> Result<RunSummary> {
    config.validate()?;
    let _lock = DirLock::acquire(out)?;
    let text = config.to_text();
    fs::write(out.join(CONFIG_FILE), &text)?;
    let mut trainer = Trainer::new(config)?;
    let mut stream = BufWriter::new(File::create(out.join(METRICS_FILE))?);
    writeln!(stream, "{}", LossReport::CSV_HEADER)?;
    let mut losses = Vec::with_capacity(config.steps as usize);
    while trainer.step < config.steps {
        let report = match trainer.train_step() {
            Ok(r) => r,
            Err(e) => {
                stream.flush()?;
                return Err(e);
            }
        };
        writeln!(stream, "{}", report.csv_line())?;
        on_step(&report);
        losses.push(report);
        if config.checkpoint_every > 0 && trainer.step % config.checkpoint_every == 0 && trainer.step < config.steps {
            Checkpoint::from_store(&trainer.store, trainer.step, config.seed, &text)
                .save(&out.join(checkpoint_name(trainer.step)))?;
        }
    }
    stream.flush()?;
    drop(stream);
    Checkpoint::from_store(&trainer.store, trainer.step, config.seed, &text).save(&out.join(FINAL_CHECKPOINT))?;

    let val = generate_split(config.val_seed, config.val_size, &config.synth())?;
    let report = evaluate(&trainer.model, &trainer.store, &val)?;
    let train_eval = evaluate(&trainer.model, &trainer.store, &trainer.train)?;
    write_reports(out, &report, train_eval.cls_accuracy)?;
    Ok(RunSummary {
        losses,
        val: report,
        train_cls_accuracy: train_eval.cls_accuracy,
    })
}

pub fn write_reports(out: &Path, report: &EvalReport, train_accuracy: f64) -> Result<()> {
    fs::write(out.join(SEED_REPORT), report.seed.to_csv())?;
    fs::write(out.join(MASK_REPORT), report.mask.to_csv())?;
    fs::write(out.join(SUMMARY_FILE), summary_text(report, Some(train_accuracy)))?;
    Ok(())
}

pub fn summary_text(report: &EvalReport, train_accuracy: Option<f64>) -> String {
    let mut s = format!(
        "val_seed_miou = {:.6}\nval_mask_miou = {:.6}\nval_seed_confusion_ratio = {:.6}\nval_cls_accuracy = {:.6}\n",
        report.seed.miou.value(),
        report.mask.miou.value(),
        report.seed.mean_fg_confusion_ratio(),
        report.cls_accuracy
    );
    if let Some(a) = train_accuracy {
        s.push_str(&format!("train_cls_accuracy = {a:.6}\n"));
    }
    s
}

/// Rebuilds a model from a checkpoint. The echoed config inside the file
/// decides the architecture.
pub fn load_model(path: &Path) -> Result<(RunConfig, Model, ParamStore, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    let cfg = RunConfig::parse(&ck.config)?;
    let (model, mut store) = Model::init(&cfg.model, cfg.seed)?;
    ck.apply(&mut store)?;
    Ok((cfg, model, store, ck))
}
