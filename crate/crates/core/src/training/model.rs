//! The full network: backbone, graph module, CAM classifier and decoder,
//! plus the per-sample forward pass that produces every loss term.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::cam::{
    cam_scores, lam_scores, multi_threshold_filter, normalize_channels, to_pseudo_label, ActivationMap,
    LabelGrid, MapKind, ReliabilityMask,
};
use crate::encoder::{Encoder, EncoderConfig, TokenVars};
use crate::error::{arg, Result};
use crate::gcr::{default_top_k, gcr_forward, GcrParams, GraphVars};
use crate::lir::{cre_loss, kernel_search, split_relations, ure_loss, LirConfig, RelationMaps, UncertainSet};
use crate::params::{truncated_normal, Bound, Linear, ParamId, ParamStore};
use crate::tensor::{softmax, Tensor};

use super::losses::{cls_loss, mct_loss, seg_loss};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Neighbors per class in the graph; 0 picks half the patches.
    pub top_k: usize,
    pub lambda_low: f64,
    pub lambda_high: f64,
    pub bg_threshold: f64,
    pub lir: LirConfig,
    pub decoder_hidden: usize,
    pub use_gcr: bool,
    pub use_cre: bool,
    pub use_ure: bool,
    /// Whether the segmentation loss trains the backbone or only the decoder.
    pub seg_grad_to_encoder: bool,
    /// Clip negative CAM and LAM scores to zero before normalizing.
    pub rectify_maps: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            top_k: 0,
            lambda_low: 0.25,
            lambda_high: 0.70,
            bg_threshold: 0.45,
            lir: LirConfig::default(),
            decoder_hidden: 64,
            use_gcr: true,
            use_cre: true,
            use_ure: true,
            seg_grad_to_encoder: true,
            rectify_maps: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.lir.validate()?;
        let l = self.encoder.num_patches();
        if self.top_k > l {
            return arg(format!("top_k {} exceeds {l} patches", self.top_k));
        }
        if !(0.0 < self.lambda_low && self.lambda_low < self.lambda_high && self.lambda_high < 1.0) {
            return arg(format!(
                "thresholds need 0 < low < high < 1, got {}, {}",
                self.lambda_low, self.lambda_high
            ));
        }
        if !(0.0..=1.0).contains(&self.bg_threshold) {
            return arg(format!("bg_threshold {} outside [0, 1]", self.bg_threshold));
        }
        if self.decoder_hidden == 0 {
            return arg("decoder_hidden must be positive");
        }
        Ok(())
    }

    pub fn effective_top_k(&self) -> usize {
        if self.top_k == 0 {
            default_top_k(self.encoder.num_patches())
        } else {
            self.top_k
        }
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Decoder {
    /// Per-token logits `[L×(C+1)]`, row-major over the `n_h×n_w` grid.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, patch_tokens: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, bound, patch_tokens)?;
        let h = tape.leaky_relu(h);
        self.fc2.forward(tape, bound, h)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub gcr: GcrParams,
    /// `[D×C]` CAM projection.
    pub classifier: ParamId,
    pub decoder: Decoder,
}

/// Tape handles of the shared feature path.
#[derive(Clone, Debug)]
pub struct Features {
    pub tokens: TokenVars,
    pub graph: Option<GraphVars>,
    /// Class representations used by the losses and LAM.
    pub q: Var,
    /// `[L×C]` unnormalized CAM.
    pub raw_cam: Var,
    /// `[1×C]`.
    pub class_logits: Var,
}

/// Every discrete choice made while building the losses of one sample.
/// Feeding it back in pins them so the loss becomes smooth in the
/// parameters.
#[derive(Clone, Debug)]
pub struct Decisions {
    pub neighbors: Vec<Vec<usize>>,
    pub mct_active: Vec<usize>,
    pub cam: ActivationMap,
    pub mask: ReliabilityMask,
    pub relations: RelationMaps,
    pub uncertain: UncertainSet,
    pub lam: ActivationMap,
    pub pseudo: LabelGrid,
}

#[derive(Clone, Copy, Debug)]
pub struct SampleLosses {
    pub cls: Var,
    pub mct: Var,
    pub cre: Var,
    pub ure: Var,
    pub seg: Var,
}

/// Values for evaluation and inspection.
#[derive(Clone, Debug)]
pub struct Inference {
    pub class_logits: Vec<f64>,
    pub cam: ActivationMap,
    pub lam: ActivationMap,
    /// Decoder softmax on the token grid.
    pub segmentation: ActivationMap,
    pub decisions: Decisions,
}

impl Model {
    /// Fresh parameters from `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<(Model, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&config.encoder, &mut store, &mut rng)?;
        let d = config.encoder.embed_dim;
        let c = config.encoder.num_classes;
        let gcr = GcrParams::new(&mut store, &mut rng, d);
        let classifier = store.add("head.classifier", truncated_normal(&mut rng, &[d, c], 1.0 / (d as f64).sqrt()));
        let hidden = config.decoder_hidden;
        let decoder = Decoder {
            fc1: Linear::new(&mut store, &mut rng, "decoder.fc1", d, hidden, 1.0 / (d as f64).sqrt()),
            fc2: Linear::new(&mut store, &mut rng, "decoder.fc2", hidden, c + 1, 1.0 / (hidden as f64).sqrt()),
        };
        Ok((
            Model {
                config: config.clone(),
                encoder,
                gcr,
                classifier,
                decoder,
            },
            store,
        ))
    }

    pub fn features(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        image: Var,
        fixed_neighbors: Option<&[Vec<usize>]>,
    ) -> Result<Features> {
        let tokens = self.encoder.encode(tape, bound, image)?;
        let graph = if self.config.use_gcr {
            Some(gcr_forward(
                tape,
                bound,
                &self.gcr,
                tokens.class_tokens,
                tokens.patch_tokens,
                self.config.effective_top_k(),
                fixed_neighbors,
            )?)
        } else {
            None
        };
        let q = graph.as_ref().map_or(tokens.class_tokens, |g| g.output);
        let raw_cam = tape.matmul(tokens.patch_tokens, bound.var(self.classifier))?;
        let pooled = tape.sum_axis(raw_cam, 0)?;
        let class_logits = tape.scale(pooled, 1.0 / self.config.encoder.num_patches() as f64);
        Ok(Features {
            tokens,
            graph,
            q,
            raw_cam,
            class_logits,
        })
    }

    /// Derives masks, the uncertain set and pseudo labels from the current
    /// feature values.
    fn decide(&self, tape: &Tape, f: &Features, present: &[bool], classifier: &Tensor) -> Result<Decisions> {
        let cfg = &self.config;
        let grid = f.tokens.grid;
        let p = tape.value(f.tokens.patch_tokens);
        let q = tape.value(f.q);
        let prep = |raw: Tensor| if cfg.rectify_maps { raw.map(|v| v.max(0.0)) } else { raw };
        let cam = normalize_channels(&prep(cam_scores(p, classifier)?), grid, present, MapKind::Cam)?;
        let mask = multi_threshold_filter(&cam, cfg.lambda_low, cfg.lambda_high)?;
        let relations = split_relations(&mask);
        let uncertain = kernel_search(&relations, cfg.lir.kernel_size, cfg.lir.proportion)?;
        let lam = normalize_channels(&prep(lam_scores(q, p)?), grid, present, MapKind::Lam)?;
        let pseudo = to_pseudo_label(&lam, cfg.bg_threshold);
        Ok(Decisions {
            neighbors: f.graph.as_ref().map(|g| g.neighbors.clone()).unwrap_or_default(),
            mct_active: Vec::new(),
            cam,
            mask,
            relations,
            uncertain,
            lam,
            pseudo,
        })
    }

    /// One sample's loss terms. `lir_active` gates the two relation losses
    /// (they read as constant zero when off).
    pub fn forward_sample(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        image: Var,
        labels: &[bool],
        lir_active: bool,
        frozen: Option<&Decisions>,
    ) -> Result<(SampleLosses, Decisions, Features)> {
        let cfg = &self.config;
        let c = cfg.encoder.num_classes;
        if labels.len() != c {
            return arg(format!("{} labels for {c} classes", labels.len()));
        }
        let fixed = frozen.filter(|_| cfg.use_gcr).map(|d| d.neighbors.as_slice());
        let f = self.features(tape, bound, image, fixed)?;
        let classifier = tape.value(bound.var(self.classifier)).clone();
        let mut dec = self.decide(tape, &f, labels, &classifier)?;
        if let Some(fz) = frozen {
            dec.relations = fz.relations.clone();
            dec.uncertain = fz.uncertain.clone();
            dec.pseudo = fz.pseudo.clone();
        }

        let y: Vec<f64> = labels.iter().map(|&b| f64::from(u8::from(b))).collect();
        let cls = cls_loss(tape, f.class_logits, &y)?;
        let (mct, active) = mct_loss(tape, f.q, frozen.map(|d| d.mct_active.as_slice()))?;
        dec.mct_active = active;

        let zero = tape.constant(Tensor::scalar(0.0));
        let cre = if lir_active && cfg.use_cre {
            cre_loss(
                tape,
                f.q,
                f.tokens.patch_tokens,
                &dec.relations.confident,
                labels,
                cfg.lir.temperature,
            )?
        } else {
            zero
        };
        let ure = if lir_active && cfg.use_ure {
            ure_loss(tape, f.q, f.tokens.patch_tokens, &dec.uncertain, f.tokens.grid.1, labels)?
        } else {
            zero
        };

        let dec_in = if cfg.seg_grad_to_encoder {
            f.tokens.patch_tokens
        } else {
            let p = tape.value(f.tokens.patch_tokens).clone();
            tape.constant(p)
        };
        let logits = self.decoder.forward(tape, bound, dec_in)?;
        let seg = seg_loss(tape, logits, &dec.pseudo)?;
        Ok((SampleLosses { cls, mct, cre, ure, seg }, dec, f))
    }

    /// Forward without gradients. `labels` selects which class channels the
    /// activation maps keep; None keeps the classes predicted present.
    pub fn infer(&self, store: &ParamStore, image: &Tensor, labels: Option<&[bool]>) -> Result<Inference> {
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let x = tape.constant(image.clone());
        let f = self.features(&mut tape, &bound, x, None)?;
        let class_logits = tape.value(f.class_logits).data().to_vec();
        let predicted: Vec<bool> = class_logits.iter().map(|&z| z > 0.0).collect();
        let present = labels.unwrap_or(&predicted);
        let classifier = store.get(self.classifier).clone();
        let decisions = self.decide(&tape, &f, present, &classifier)?;
        let logits = self.decoder.forward(&mut tape, &bound, f.tokens.patch_tokens)?;
        let (nh, nw) = f.tokens.grid;
        let k = self.config.encoder.num_classes + 1;
        let probs = softmax(tape.value(logits), 1)?.reshape(&[nh, nw, k])?;
        Ok(Inference {
            class_logits,
            cam: decisions.cam.clone(),
            lam: decisions.lam.clone(),
            segmentation: ActivationMap {
                scores: probs,
                kind: MapKind::Segmentation,
            },
            decisions,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_sample, SynthConfig};

    fn small() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                image_height: 16,
                image_width: 16,
                patch_size: 4,
                embed_dim: 8,
                depth: 1,
                num_heads: 2,
                num_classes: 3,
                mlp_ratio: 2,
            },
            decoder_hidden: 6,
            ..ModelConfig::default()
        }
    }

    fn sample() -> crate::synthdata::SyntheticSample {
        let cfg = SynthConfig {
            height: 16,
            width: 16,
            ..SynthConfig::default()
        };
        generate_sample(4, &cfg).unwrap()
    }

    #[test]
    fn zero_decoder_weights_give_uniform_logits() {
        let (model, mut store) = Model::init(&small(), 0).unwrap();
        for name in ["decoder.fc2.weight", "decoder.fc2.bias"] {
            let id = store.id(name).unwrap();
            store.get_mut(id).data_mut().fill(0.0);
        }
        let s = sample();
        let inf = model.infer(&store, &s.image, Some(&s.labels)).unwrap();
        assert_eq!(inf.segmentation.scores.shape(), &[4, 4, 4]);
        assert!(inf.segmentation.scores.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn losses_are_scalars_and_finite() {
        let (model, store) = Model::init(&small(), 1).unwrap();
        let s = sample();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(s.image.clone());
        let (l, dec, _) = model.forward_sample(&mut tape, &bound, x, &s.labels, true, None).unwrap();
        for v in [l.cls, l.mct, l.cre, l.ure, l.seg] {
            assert_eq!(tape.value(v).numel(), 1);
            assert!(tape.value(v).is_finite());
        }
        assert_eq!(dec.pseudo.len(), 16);
        assert_eq!(dec.neighbors.len(), 3);
    }

    #[test]
    fn lir_off_reads_zero() {
        let (model, store) = Model::init(&small(), 1).unwrap();
        let s = sample();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(s.image.clone());
        let (l, _, _) = model.forward_sample(&mut tape, &bound, x, &s.labels, false, None).unwrap();
        assert_eq!(tape.value(l.cre).item(), 0.0);
        assert_eq!(tape.value(l.ure).item(), 0.0);
    }

    #[test]
    fn seg_loss_sends_nothing_through_the_cam_path() {
        let (model, store) = Model::init(&small(), 2).unwrap();
        let s = sample();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(s.image.clone());
        let (l, _, _) = model.forward_sample(&mut tape, &bound, x, &s.labels, true, None).unwrap();
        let grads = tape.backward(l.seg).unwrap();
        let all = bound.grads(&grads);
        for id in store.ids() {
            let name = store.name(id);
            if name.starts_with("head.") || name.starts_with("gcr.") {
                assert!(all[id_index(&store, id)].data().iter().all(|&g| g == 0.0), "{name}");
            }
        }
        let fc2 = store.id("decoder.fc2.weight").unwrap();
        assert!(all[id_index(&store, fc2)].data().iter().any(|&g| g != 0.0));
    }

    fn id_index(store: &ParamStore, id: ParamId) -> usize {
        store.ids().position(|i| i == id).unwrap()
    }
}
