//! Batched objective and the optimization loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::synthdata::{generate_split, SyntheticSample};
use crate::tensor::Tensor;

use super::losses::{LossReport, LossWeights};
use super::model::{Decisions, Model};
use super::optim::AdamW;

/// Batch-averaged loss handles.
#[derive(Clone, Copy, Debug)]
pub struct BatchVars {
    pub cls: Var,
    pub mct: Var,
    pub cre: Var,
    pub ure: Var,
    pub more: Var,
    pub seg: Var,
    pub total: Var,
}

impl BatchVars {
    pub fn report(&self, tape: &Tape, step: u64) -> LossReport {
        let v = |x: Var| tape.value(x).item();
        LossReport {
            step,
            cls: v(self.cls),
            mct: v(self.mct),
            cre: v(self.cre),
            ure: v(self.ure),
            more: v(self.more),
            seg: v(self.seg),
            total: v(self.total),
        }
    }
}

/// Builds the combined objective over a batch of `(image, labels)` pairs.
/// `frozen` pins each sample's discrete decisions.
pub fn batch_objective(
    tape: &mut Tape,
    bound: &Bound,
    model: &Model,
    batch: &[(Tensor, Vec<bool>)],
    weights: &LossWeights,
    lir_active: bool,
    frozen: Option<&[Decisions]>,
) -> Result<(BatchVars, Vec<Decisions>)> {
    let mut parts: [Vec<Var>; 5] = Default::default();
    let mut decisions = Vec::with_capacity(batch.len());
    for (i, (image, labels)) in batch.iter().enumerate() {
        let x = tape.constant(image.clone());
        let fz = frozen.map(|f| &f[i]);
        let (l, d, _) = model.forward_sample(tape, bound, x, labels, lir_active, fz)?;
        for (slot, v) in parts.iter_mut().zip([l.cls, l.mct, l.cre, l.ure, l.seg]) {
            slot.push(v);
        }
        decisions.push(d);
    }
    let inv = 1.0 / batch.len() as f64;
    let mut avg = Vec::with_capacity(5);
    for vars in &parts {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = tape.add(acc, v)?;
        }
        avg.push(tape.scale(acc, inv));
    }
    let (cls, mct, cre, ure, seg) = (avg[0], avg[1], avg[2], avg[3], avg[4]);
    let a = tape.scale(cre, weights.alpha);
    let b = tape.scale(ure, weights.beta);
    let more = tape.add(cls, mct)?;
    let more = tape.add(more, a)?;
    let more = tape.add(more, b)?;
    let g = tape.scale(seg, weights.gamma);
    let total = tape.add(more, g)?;
    Ok((
        BatchVars {
            cls,
            mct,
            cre,
            ure,
            more,
            seg,
            total,
        },
        decisions,
    ))
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub store: ParamStore,
    pub optimizer: AdamW,
    pub train: Vec<SyntheticSample>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    /// Steps completed so far.
    pub step: u64,
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let train = generate_split(config.train_seed, config.train_size, &config.synth())?;
        Self::with_data(config, train)
    }

    pub fn with_data(config: &RunConfig, train: Vec<SyntheticSample>) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        let (model, store) = Model::init(&config.model, config.seed)?;
        let tensors: Vec<&Tensor> = store.iter().map(|(_, t)| t).collect();
        let optimizer = AdamW::new(config.optim.clone(), &tensors);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            config: config.clone(),
            model,
            store,
            optimizer,
            train,
            rng,
            order: Vec::new(),
            cursor: 0,
            step: 0,
        })
    }

    /// Next batch from a reshuffled pass over the training set, each sample
    /// flipped with probability one half when flips are on.
    fn next_batch(&mut self) -> Vec<(Tensor, Vec<bool>)> {
        let mut batch = Vec::with_capacity(self.config.batch_size);
        while batch.len() < self.config.batch_size {
            if self.cursor == self.order.len() {
                self.order = (0..self.train.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let s = &self.train[self.order[self.cursor]];
            self.cursor += 1;
            let s = if self.config.flip && self.rng.gen_bool(0.5) {
                s.flip_horizontal()
            } else {
                s.clone()
            };
            batch.push((s.image, s.labels));
        }
        batch
    }

    pub fn lir_active(&self) -> bool {
        self.step >= self.config.warmup_steps
    }

    /// One forward, backward and update. Non-finite values abort with the
    /// first offending tape node.
    pub fn train_step(&mut self) -> Result<LossReport> {
        let batch = self.next_batch();
        let lir = self.lir_active();
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let (vars, _) = batch_objective(
            &mut tape,
            &bound,
            &self.model,
            &batch,
            &self.config.weights,
            lir,
            None,
        )?;
        let report = vars.report(&tape, self.step + 1);
        if !report.total.is_finite() {
            let (node, op) = tape.first_non_finite().unwrap_or((vars.total.index(), "total"));
            return Err(Error::NonFinite { node, op });
        }
        let grads = tape.backward(vars.total)?;
        let grads = bound.grads(&grads);
        for (id, g) in self.store.ids().zip(&grads) {
            if !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for {} at step {}",
                    self.store.name(id),
                    self.step + 1
                )));
            }
        }
        self.optimizer.step(self.store.tensors_mut(), &grads)?;
        self.step += 1;
        Ok(report)
    }
}
