//! ViT-style backbone with one learned token per class.
//!
//! `C` class tokens and `L` patch tokens share every transformer block; the
//! final layer's rows split back into class tokens `[C×D]` and patch tokens
//! `[L×D]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{arg, Result};
use crate::params::{truncated_normal, Bound, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub num_classes: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            patch_size: 8,
            embed_dim: 32,
            depth: 2,
            num_heads: 4,
            num_classes: 3,
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.image_height % p != 0 || self.image_width % p != 0 {
            return arg(format!(
                "image {}x{} is not divisible by patch size {p}",
                self.image_height, self.image_width
            ));
        }
        if self.image_height == 0 || self.image_width == 0 {
            return arg("empty image size");
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return arg(format!(
                "embed dim {} is not divisible by {} heads",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_classes == 0 || self.mlp_ratio == 0 {
            return arg("num_classes and mlp_ratio must be positive");
        }
        Ok(())
    }

    /// `(n_h, n_w)`.
    pub fn grid(&self) -> (usize, usize) {
        (
            self.image_height / self.patch_size,
            self.image_width / self.patch_size,
        )
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

/// Class and patch tokens of one image as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct TokenVars {
    pub class_tokens: Var,
    pub patch_tokens: Var,
    pub grid: (usize, usize),
}

/// Class and patch tokens of one image as plain tensors.
#[derive(Clone, Debug)]
pub struct TokenBundle {
    pub class_tokens: Tensor,
    pub patch_tokens: Tensor,
    pub grid: (usize, usize),
}

impl TokenBundle {
    pub fn from_tape(tape: &Tape, vars: &TokenVars) -> Self {
        Self {
            class_tokens: tape.value(vars.class_tokens).clone(),
            patch_tokens: tape.value(vars.patch_tokens).clone(),
            grid: vars.grid,
        }
    }
}

/// Cuts a `3×H×W` image into row-major `p×p` patches, each flattened
/// channel-major to a row of length `3·p²`.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return arg(format!("expected a 3xHxW image, got {s:?}"));
    }
    let (h, w) = (s[1], s[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return arg(format!("image {h}x{w} is not divisible by patch size {patch}"));
    }
    let (nh, nw) = (h / patch, w / patch);
    let d = image.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for py in 0..nh {
        for px in 0..nw {
            for c in 0..3 {
                for dy in 0..patch {
                    let y = py * patch + dy;
                    let start = c * h * w + y * w + px * patch;
                    out.extend_from_slice(&d[start..start + patch]);
                }
            }
        }
    }
    Tensor::new(&[nh * nw, 3 * patch * patch], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, patch: usize, height: usize, width: usize) -> Result<Tensor> {
    let (nh, nw) = (height / patch, width / patch);
    if patches.shape() != [nh * nw, 3 * patch * patch] {
        return arg(format!(
            "patch matrix {:?} does not fit a {height}x{width} image",
            patches.shape()
        ));
    }
    let mut out = vec![0.0; 3 * height * width];
    for (l, row) in patches.data().chunks(3 * patch * patch).enumerate() {
        let (py, px) = (l / nw, l % nw);
        for c in 0..3 {
            for dy in 0..patch {
                let y = py * patch + dy;
                let dst = c * height * width + y * width + px * patch;
                let src = (c * patch + dy) * patch;
                out[dst..dst + patch].copy_from_slice(&row[src..src + patch]);
            }
        }
    }
    Tensor::new(&[3, height, width], out)
}

#[derive(Clone, Debug)]
struct Block {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    qkv: Linear,
    proj: Linear,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    patch_embed: Linear,
    pos_embed: ParamId,
    class_tokens: ParamId,
    blocks: Vec<Block>,
}

/// Builds a fresh encoder and its parameters from a seed.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<(Encoder, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = Encoder::new(config, &mut store, &mut rng)?;
    Ok((enc, store))
}

impl Encoder {
    /// Registers the encoder's parameters in `store`.
    pub fn new(
        config: &EncoderConfig,
        store: &mut ParamStore,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let hidden = d * config.mlp_ratio;
        let patch_embed = Linear::new(store, rng, "encoder.patch_embed", config.patch_dim(), d, INIT_STD);
        let pos_embed = store.add(
            "encoder.pos_embed",
            truncated_normal(rng, &[config.num_patches(), d], INIT_STD),
        );
        let class_tokens = store.add(
            "encoder.class_tokens",
            truncated_normal(rng, &[config.num_classes, d], INIT_STD),
        );
        let blocks = (0..config.depth)
            .map(|i| {
                let name = format!("encoder.block{i}");
                Block {
                    ln1_gain: store.add(format!("{name}.ln1.gain"), Tensor::ones(&[d])),
                    ln1_bias: store.add(format!("{name}.ln1.bias"), Tensor::zeros(&[d])),
                    qkv: Linear::new(store, rng, &format!("{name}.attn.qkv"), d, 3 * d, INIT_STD),
                    proj: Linear::new(store, rng, &format!("{name}.attn.proj"), d, d, INIT_STD),
                    ln2_gain: store.add(format!("{name}.ln2.gain"), Tensor::ones(&[d])),
                    ln2_bias: store.add(format!("{name}.ln2.bias"), Tensor::zeros(&[d])),
                    fc1: Linear::new(store, rng, &format!("{name}.mlp.fc1"), d, hidden, INIT_STD),
                    fc2: Linear::new(store, rng, &format!("{name}.mlp.fc2"), hidden, d, INIT_STD),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            patch_embed,
            pos_embed,
            class_tokens,
            blocks,
        })
    }

    pub fn class_token_table(&self) -> ParamId {
        self.class_tokens
    }

    /// Runs the backbone on one `3×H×W` image.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, image: Var) -> Result<TokenVars> {
        let cfg = &self.config;
        let expected = [3, cfg.image_height, cfg.image_width];
        if tape.shape(image) != expected {
            return arg(format!(
                "image shape {:?} does not match config {expected:?}",
                tape.shape(image)
            ));
        }
        let patches = patchify(tape.value(image), cfg.patch_size)?;
        // images that carry gradient go through the same permutation as a gather
        let patches = if tape.needs_grad(image) {
            let flat = tape.reshape(image, &[3 * cfg.image_height * cfg.image_width])?;
            let order = patch_order(cfg.image_height, cfg.image_width, cfg.patch_size);
            let gathered = tape.index_select(flat, &order)?;
            tape.reshape(gathered, &[cfg.num_patches(), cfg.patch_dim()])?
        } else {
            tape.constant(patches)
        };
        let x = self.patch_embed.forward(tape, bound, patches)?;
        let patch_tokens = tape.add(x, bound.var(self.pos_embed))?;
        let mut tokens = tape.concat_rows(&[bound.var(self.class_tokens), patch_tokens])?;
        for block in &self.blocks {
            tokens = self.block(tape, bound, block, tokens)?;
        }
        let c = cfg.num_classes;
        let all: Vec<usize> = (0..c + cfg.num_patches()).collect();
        let class_tokens = tape.index_select(tokens, &all[..c])?;
        let patch_tokens = tape.index_select(tokens, &all[c..])?;
        Ok(TokenVars {
            class_tokens,
            patch_tokens,
            grid: cfg.grid(),
        })
    }

    fn block(&self, tape: &mut Tape, bound: &Bound, b: &Block, x: Var) -> Result<Var> {
        let h = tape.layer_norm(x, bound.var(b.ln1_gain), bound.var(b.ln1_bias), LN_EPS)?;
        let a = self.attention(tape, bound, b, h)?;
        let x = tape.add(x, a)?;
        let h = tape.layer_norm(x, bound.var(b.ln2_gain), bound.var(b.ln2_bias), LN_EPS)?;
        let h = b.fc1.forward(tape, bound, h)?;
        let h = tape.gelu(h);
        let h = b.fc2.forward(tape, bound, h)?;
        tape.add(x, h)
    }

    fn attention(&self, tape: &mut Tape, bound: &Bound, b: &Block, x: Var) -> Result<Var> {
        let d = self.config.embed_dim;
        let heads = self.config.num_heads;
        let hd = d / heads;
        let qkv = b.qkv.forward(tape, bound, x)?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = tape.slice_cols(qkv, h * hd, hd)?;
            let k = tape.slice_cols(qkv, d + h * hd, hd)?;
            let v = tape.slice_cols(qkv, 2 * d + h * hd, hd)?;
            let kt = tape.transpose(k)?;
            let s = tape.matmul(q, kt)?;
            let s = tape.scale(s, scale);
            let p = tape.softmax(s, 1)?;
            outs.push(tape.matmul(p, v)?);
        }
        let o = tape.concat_cols(&outs)?;
        b.proj.forward(tape, bound, o)
    }
}

/// Flat source index (in `3×H×W` order) for every entry of the patch matrix.
fn patch_order(h: usize, w: usize, p: usize) -> Vec<usize> {
    let idx: Vec<f64> = (0..3 * h * w).map(|i| i as f64).collect();
    let img = Tensor::new(&[3, h, w], idx).expect("shape");
    patchify(&img, p)
        .expect("divisible")
        .data()
        .iter()
        .map(|&v| v as usize)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn single_patch_is_plain_flatten() {
        let img = ramp(&[3, 8, 8]);
        let p = patchify(&img, 8).unwrap();
        assert_eq!(p.shape(), &[1, 192]);
        assert_eq!(p.data(), img.data());
    }

    #[test]
    fn patches_are_row_major() {
        let img = ramp(&[3, 16, 16]);
        let p = patchify(&img, 8).unwrap();
        assert_eq!(p.shape(), &[4, 192]);
        // first pixel of channel 0 in each patch: TL, TR, BL, BR
        let firsts: Vec<f64> = (0..4).map(|l| p.at2(l, 0)).collect();
        assert_eq!(firsts, vec![0.0, 8.0, 128.0, 136.0]);
        assert_eq!(unpatchify(&p, 8, 16, 16).unwrap(), img);
    }

    #[test]
    fn non_divisible_image_is_rejected() {
        assert!(patchify(&Tensor::zeros(&[3, 10, 8]), 8).is_err());
        let cfg = EncoderConfig {
            image_height: 60,
            ..EncoderConfig::default()
        };
        assert!(init_params(&cfg, 0).is_err());
        let cfg = EncoderConfig {
            num_heads: 5,
            ..EncoderConfig::default()
        };
        assert!(init_params(&cfg, 0).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = EncoderConfig::default();
        let (_, a) = init_params(&cfg, 7).unwrap();
        let (_, b) = init_params(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let (_, c) = init_params(&cfg, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn class_token_table_shape() {
        let (enc, store) = init_params(&EncoderConfig::default(), 0).unwrap();
        assert_eq!(store.get(enc.class_token_table()).shape(), &[3, 32]);
    }

    #[test]
    fn zero_depth_is_identity_stack() {
        let cfg = EncoderConfig {
            image_height: 16,
            image_width: 16,
            depth: 0,
            ..EncoderConfig::default()
        };
        let (enc, store) = init_params(&cfg, 3).unwrap();
        let img = ramp(&[3, 16, 16]).map(|v| v / 768.0);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(img.clone());
        let toks = enc.encode(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(toks.class_tokens), store.get(enc.class_tokens));

        let pe = store.get(enc.patch_embed.weight);
        let proj = crate::tensor::matmul(&patchify(&img, 8).unwrap(), pe).unwrap();
        let pos = store.get(enc.pos_embed);
        let expected = Tensor::new(
            proj.shape(),
            proj.data().iter().zip(pos.data()).map(|(a, b)| a + b).collect(),
        )
        .unwrap();
        assert!(tape.value(toks.patch_tokens).max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn output_shapes_and_determinism() {
        let cfg = EncoderConfig {
            image_height: 16,
            image_width: 16,
            ..EncoderConfig::default()
        };
        let (enc, store) = init_params(&cfg, 1).unwrap();
        let img = ramp(&[3, 16, 16]).map(|v| (v * 0.37).sin());
        let run = || {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let x = tape.constant(img.clone());
            let t = enc.encode(&mut tape, &bound, x).unwrap();
            TokenBundle::from_tape(&tape, &t)
        };
        let a = run();
        assert_eq!(a.class_tokens.shape(), &[3, 32]);
        assert_eq!(a.patch_tokens.shape(), &[4, 32]);
        assert_eq!(a.grid, (2, 2));
        let b = run();
        assert_eq!(a.class_tokens, b.class_tokens);
        assert_eq!(a.patch_tokens, b.patch_tokens);
    }

    #[test]
    fn class_token_permutation_is_equivariant_at_depth_zero() {
        let cfg = EncoderConfig {
            image_height: 16,
            image_width: 16,
            depth: 0,
            ..EncoderConfig::default()
        };
        let (enc, mut store) = init_params(&cfg, 2).unwrap();
        let img = Tensor::full(&[3, 16, 16], 0.5);
        let out = |store: &ParamStore| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let x = tape.constant(img.clone());
            let t = enc.encode(&mut tape, &bound, x).unwrap();
            tape.value(t.class_tokens).clone()
        };
        let before = out(&store);
        let table = store.get(enc.class_tokens).clone();
        let perm = [2usize, 0, 1];
        let permuted: Vec<f64> = perm.iter().flat_map(|&r| table.row(r).to_vec()).collect();
        *store.get_mut(enc.class_tokens) = Tensor::new(table.shape(), permuted).unwrap();
        let after = out(&store);
        for (i, &r) in perm.iter().enumerate() {
            assert_eq!(after.row(i), before.row(r));
        }
    }
}
