//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::synthdata::SynthConfig;
use crate::training::losses::LossWeights;
use crate::training::model::ModelConfig;
use crate::training::optim::AdamWConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub optim: AdamWConfig,
    pub batch_size: usize,
    pub steps: u64,
    /// Relation losses switch on once this many steps have completed.
    pub warmup_steps: u64,
    pub train_size: usize,
    pub val_size: usize,
    pub train_seed: u64,
    pub val_seed: u64,
    /// Parameter init and batch order.
    pub seed: u64,
    pub max_shapes: usize,
    pub flip: bool,
    /// 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            optim: AdamWConfig::default(),
            batch_size: 8,
            steps: 2000,
            warmup_steps: 100,
            train_size: 512,
            val_size: 128,
            train_seed: 0,
            val_seed: 1_000_000,
            seed: 0,
            max_shapes: 3,
            flip: true,
            checkpoint_every: 500,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl RunConfig {
    /// Defaults overridden by each `key = value` line; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let e = &mut m.encoder;
        match key {
            "image_size" => {
                let s = parse(key, v)?;
                e.image_height = s;
                e.image_width = s;
            }
            "patch_size" => e.patch_size = parse(key, v)?,
            "embed_dim" => e.embed_dim = parse(key, v)?,
            "depth" => e.depth = parse(key, v)?,
            "num_heads" => e.num_heads = parse(key, v)?,
            "mlp_ratio" => e.mlp_ratio = parse(key, v)?,
            "num_classes" => e.num_classes = parse(key, v)?,
            "top_k" => m.top_k = parse(key, v)?,
            "lambda_low" => m.lambda_low = parse(key, v)?,
            "lambda_high" => m.lambda_high = parse(key, v)?,
            "bg_threshold" => m.bg_threshold = parse(key, v)?,
            "tau" => m.lir.temperature = parse(key, v)?,
            "kernel_size" => m.lir.kernel_size = parse(key, v)?,
            "phi" => m.lir.proportion = parse(key, v)?,
            "decoder_hidden" => m.decoder_hidden = parse(key, v)?,
            "use_gcr" => m.use_gcr = parse_bool(key, v)?,
            "use_cre" => m.use_cre = parse_bool(key, v)?,
            "use_ure" => m.use_ure = parse_bool(key, v)?,
            "seg_grad_to_encoder" => m.seg_grad_to_encoder = parse_bool(key, v)?,
            "rectify_maps" => m.rectify_maps = parse_bool(key, v)?,
            "alpha" => self.weights.alpha = parse(key, v)?,
            "beta" => self.weights.beta = parse(key, v)?,
            "gamma" => self.weights.gamma = parse(key, v)?,
            "lr" => self.optim.lr = parse(key, v)?,
            "weight_decay" => self.optim.weight_decay = parse(key, v)?,
            "beta1" => self.optim.beta1 = parse(key, v)?,
            "beta2" => self.optim.beta2 = parse(key, v)?,
            "adam_eps" => self.optim.eps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "train_size" => self.train_size = parse(key, v)?,
            "val_size" => self.val_size = parse(key, v)?,
            "train_seed" => self.train_seed = parse(key, v)?,
            "val_seed" => self.val_seed = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "max_shapes" => self.max_shapes = parse(key, v)?,
            "flip" => self.flip = parse_bool(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.model.encoder;
        if e.image_height != e.image_width {
            return Err(Error::Config("only square images are supported".into()));
        }
        self.model.validate().map_err(|err| Error::Config(err.to_string()))?;
        self.synth().validate().map_err(|err| Error::Config(err.to_string()))?;
        let w = &self.weights;
        if [w.alpha, w.beta, w.gamma].iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        let o = &self.optim;
        if !(o.lr >= 0.0 && o.lr.is_finite() && o.weight_decay >= 0.0 && o.eps > 0.0) {
            return Err(Error::Config("optimizer settings out of range".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.train_size == 0 || self.val_size == 0 {
            return Err(Error::Config("batch_size, train_size and val_size must be positive".into()));
        }
        let train_end = self.train_seed.saturating_add(self.train_size as u64);
        let val_end = self.val_seed.saturating_add(self.val_size as u64);
        if self.train_seed < val_end && self.val_seed < train_end {
            return Err(Error::Config("train and val seed ranges overlap".into()));
        }
        Ok(())
    }

    pub fn synth(&self) -> SynthConfig {
        let e = &self.model.encoder;
        SynthConfig {
            num_classes: e.num_classes,
            height: e.image_height,
            width: e.image_width,
            max_shapes: self.max_shapes,
            ..SynthConfig::default()
        }
    }

    /// Every key with its effective value; parsing the result gives back an
    /// identical config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let e = &m.encoder;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("image_size", e.image_height.to_string());
        kv("patch_size", e.patch_size.to_string());
        kv("embed_dim", e.embed_dim.to_string());
        kv("depth", e.depth.to_string());
        kv("num_heads", e.num_heads.to_string());
        kv("mlp_ratio", e.mlp_ratio.to_string());
        kv("num_classes", e.num_classes.to_string());
        kv("top_k", m.top_k.to_string());
        kv("lambda_low", format!("{:?}", m.lambda_low));
        kv("lambda_high", format!("{:?}", m.lambda_high));
        kv("bg_threshold", format!("{:?}", m.bg_threshold));
        kv("tau", format!("{:?}", m.lir.temperature));
        kv("kernel_size", m.lir.kernel_size.to_string());
        kv("phi", format!("{:?}", m.lir.proportion));
        kv("decoder_hidden", m.decoder_hidden.to_string());
        kv("use_gcr", m.use_gcr.to_string());
        kv("use_cre", m.use_cre.to_string());
        kv("use_ure", m.use_ure.to_string());
        kv("seg_grad_to_encoder", m.seg_grad_to_encoder.to_string());
        kv("rectify_maps", m.rectify_maps.to_string());
        kv("alpha", format!("{:?}", self.weights.alpha));
        kv("beta", format!("{:?}", self.weights.beta));
        kv("gamma", format!("{:?}", self.weights.gamma));
        kv("lr", format!("{:?}", self.optim.lr));
        kv("weight_decay", format!("{:?}", self.optim.weight_decay));
        kv("beta1", format!("{:?}", self.optim.beta1));
        kv("beta2", format!("{:?}", self.optim.beta2));
        kv("adam_eps", format!("{:?}", self.optim.eps));
        kv("batch_size", self.batch_size.to_string());
        kv("steps", self.steps.to_string());
        kv("warmup_steps", self.warmup_steps.to_string());
        kv("train_size", self.train_size.to_string());
        kv("val_size", self.val_size.to_string());
        kv("train_seed", self.train_seed.to_string());
        kv("val_seed", self.val_seed.to_string());
        kv("seed", self.seed.to_string());
        kv("max_shapes", self.max_shapes.to_string());
        kv("flip", self.flip.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_defaults() {
        assert_eq!(RunConfig::parse("# nothing\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.optim.lr = 0.1 + 0.2;
        cfg.model.use_cre = false;
        cfg.steps = 17;
        cfg.out_dir = PathBuf::from("/tmp/x y");
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = RunConfig::parse("steps = 5 # short\nalpha=0.5\nuse_gcr = false\n").unwrap();
        assert_eq!(cfg.steps, 5);
        assert_eq!(cfg.weights.alpha, 0.5);
        assert!(!cfg.model.use_gcr);
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            "bogus = 1",
            "steps = -3",
            "steps",
            "use_gcr = maybe",
            "lambda_low = 0.9",
            "steps = 1\nsteps = 2",
            "val_seed = 100",
            "embed_dim = 30",
        ] {
            assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
    }
}
