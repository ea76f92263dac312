//! Seeded synthetic scenes: colored shapes on a noisy background with exact
//! masks and image-level labels.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cam::LabelGrid;
use crate::error::{arg, Error, Result};
use crate::tensor::Tensor;

/// Placement attempts per shape before giving up.
pub const MAX_ATTEMPTS: usize = 100;
/// Hard bounds on the fraction of the image a single shape may cover.
pub const MIN_SHAPE_FRACTION: f64 = 0.04;
pub const MAX_SHAPE_FRACTION: f64 = 0.40;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Triangle,
    Square,
}

const KINDS: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Triangle, ShapeKind::Square];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Target area fraction range for one shape when it is alone; shrunk for
    /// crowded scenes.
    pub min_area: f64,
    pub max_area: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            height: 64,
            width: 64,
            min_shapes: 1,
            max_shapes: 3,
            min_area: 0.06,
            max_area: 0.25,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 254 {
            return arg(format!("num_classes must be in 2..=254, got {}", self.num_classes));
        }
        if self.height < 4 || self.width < 4 {
            return arg(format!("image {}x{} too small", self.height, self.width));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return arg(format!(
                "shape count range {}..={} is empty or starts at 0",
                self.min_shapes, self.max_shapes
            ));
        }
        if self.max_shapes > self.num_classes {
            return arg("max_shapes cannot exceed num_classes; each shape has its own class");
        }
        if !(MIN_SHAPE_FRACTION..=MAX_SHAPE_FRACTION).contains(&self.min_area)
            || !(self.min_area..=MAX_SHAPE_FRACTION).contains(&self.max_area)
        {
            return arg(format!(
                "area range [{}, {}] must lie inside [{MIN_SHAPE_FRACTION}, {MAX_SHAPE_FRACTION}]",
                self.min_area, self.max_area
            ));
        }
        Ok(())
    }

    /// Shape and base hue (in turns) of a 1-based class.
    pub fn class_style(&self, class: usize) -> (ShapeKind, f64) {
        let i = class - 1;
        (KINDS[i % 3], i as f64 / self.num_classes as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `3×H×W`, values in `[0, 1]`.
    pub image: Tensor,
    /// 0 is background, `c` is class `c`.
    pub mask: LabelGrid,
    /// `labels[c-1]` is true iff class `c` appears in the mask.
    pub labels: Vec<bool>,
    pub seed: u64,
}

impl SyntheticSample {
    pub fn labels_f64(&self) -> Vec<f64> {
        self.labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn flip_horizontal(&self) -> Self {
        let s = self.image.shape();
        let (h, w) = (s[1], s[2]);
        let mut data = Vec::with_capacity(self.image.numel());
        for row in self.image.data().chunks(w) {
            data.extend(row.iter().rev());
        }
        debug_assert_eq!(data.len(), 3 * h * w);
        Self {
            image: Tensor::new(s, data).expect("same shape"),
            mask: self.mask.flip_horizontal(),
            labels: self.labels.clone(),
            seed: self.seed,
        }
    }

    /// Pixel count per class, background at index 0.
    pub fn class_areas(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes + 1];
        for &v in &self.mask.data {
            counts[v as usize] += 1;
        }
        counts
    }
}

pub fn generate_sample(seed: u64, config: &SynthConfig) -> Result<SyntheticSample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (config.height, config.width);
    let n = rng.gen_range(config.min_shapes..=config.max_shapes);
    let mut classes: Vec<usize> = (1..=config.num_classes).collect();
    classes.shuffle(&mut rng);
    classes.truncate(n);

    let mut image = background(&mut rng, h, w);
    let mut mask = vec![0u8; h * w];
    // a one-pixel ring around placed shapes keeps them from touching
    let mut blocked = vec![false; h * w];
    let hi = (config.max_area * 1.6 / (n as f64 + 0.6)).max(config.min_area);
    let total = (h * w) as f64;

    for &class in &classes {
        let (kind, hue) = config.class_style(class);
        let mut placed = None;
        for attempt in 0..MAX_ATTEMPTS {
            // crowded scenes fall back toward the smallest size
            let shrink = (attempt as f64 / (MAX_ATTEMPTS / 2) as f64).min(1.0);
            let top = hi - (hi - config.min_area) * shrink;
            let frac = rng.gen_range(config.min_area..=top);
            let pixels = rasterize(&mut rng, kind, frac * total, h, w);
            let Some(pixels) = pixels else { continue };
            let area = pixels.len() as f64 / total;
            if !(MIN_SHAPE_FRACTION..=MAX_SHAPE_FRACTION).contains(&area) {
                continue;
            }
            if pixels.iter().all(|&p| !blocked[p]) {
                placed = Some(pixels);
                break;
            }
        }
        let pixels = placed.ok_or(Error::Placement {
            seed,
            attempts: MAX_ATTEMPTS,
        })?;
        let hue = hue + rng.gen_range(-0.1..=0.1);
        let sat = rng.gen_range(0.6..0.9);
        let val = rng.gen_range(0.65..0.95);
        let rgb = hsv_to_rgb(hue, sat, val);
        for &p in &pixels {
            mask[p] = class as u8;
            for (ch, &base) in rgb.iter().enumerate() {
                let jitter = rng.gen_range(-0.04..0.04);
                image[ch * h * w + p] = (base + jitter).clamp(0.0, 1.0);
            }
            let (y, x) = (p / w, p % w);
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    blocked[yy * w + xx] = true;
                }
            }
        }
    }

    let mut labels = vec![false; config.num_classes];
    for &v in &mask {
        if v > 0 {
            labels[v as usize - 1] = true;
        }
    }
    Ok(SyntheticSample {
        image: Tensor::new(&[3, h, w], image)?,
        mask: LabelGrid::new(h, w, mask)?,
        labels,
        seed,
    })
}

/// Samples for seeds `seed..seed+n`.
pub fn generate_split(seed: u64, n: usize, config: &SynthConfig) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return arg("split size must be at least 1");
    }
    (0..n as u64).map(|i| generate_sample(seed + i, config)).collect()
}

/// Smooth low-amplitude value noise, slightly tinted per channel.
fn background(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    const CELLS: usize = 8;
    let base = rng.gen_range(0.25..0.55);
    let lattice: Vec<f64> = (0..(CELLS + 1) * (CELLS + 1))
        .map(|_| rng.gen_range(-0.12..0.12))
        .collect();
    let tint: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.05..0.05)).collect();
    let mut out = vec![0.0; 3 * h * w];
    for y in 0..h {
        let fy = y as f64 / (h - 1) as f64 * CELLS as f64;
        let y0 = (fy.floor() as usize).min(CELLS - 1);
        let ty = fy - y0 as f64;
        for x in 0..w {
            let fx = x as f64 / (w - 1) as f64 * CELLS as f64;
            let x0 = (fx.floor() as usize).min(CELLS - 1);
            let tx = fx - x0 as f64;
            let at = |yy: usize, xx: usize| lattice[yy * (CELLS + 1) + xx];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            let v = base + top * (1.0 - ty) + bot * ty;
            for (ch, t) in tint.iter().enumerate() {
                let grain = rng.gen_range(-0.02..0.02);
                out[ch * h * w + y * w + x] = (v + t + grain).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Flat pixel indices covered by a shape of roughly `area` pixels at a random
/// position fully inside the image; None if it cannot fit.
fn rasterize(rng: &mut ChaCha8Rng, kind: ShapeKind, area: f64, h: usize, w: usize) -> Option<Vec<usize>> {
    let (hf, wf) = (h as f64, w as f64);
    // bounding half-extents of the shape
    let (rx, ry) = match kind {
        ShapeKind::Circle => {
            let r = (area / std::f64::consts::PI).sqrt();
            (r, r)
        }
        ShapeKind::Square => {
            let s = area.sqrt() / 2.0;
            (s, s)
        }
        // isosceles, base = height, area = s²/2
        ShapeKind::Triangle => {
            let s = (2.0 * area).sqrt() / 2.0;
            (s, s)
        }
    };
    if 2.0 * rx > wf - 1.0 || 2.0 * ry > hf - 1.0 {
        return None;
    }
    let cx = rng.gen_range(rx..=wf - rx);
    let cy = rng.gen_range(ry..=hf - ry);
    let upside_down = rng.gen_bool(0.5);
    let mut pixels = Vec::new();
    for y in 0..h {
        let py = y as f64 + 0.5 - cy;
        if py.abs() > ry {
            continue;
        }
        for x in 0..w {
            let px = x as f64 + 0.5 - cx;
            let inside = match kind {
                ShapeKind::Circle => px * px + py * py <= rx * rx,
                ShapeKind::Square => px.abs() <= rx && py.abs() <= ry,
                ShapeKind::Triangle => {
                    // apex at -ry, base at +ry
                    let t = if upside_down { -py } else { py };
                    let half = rx * (t + ry) / (2.0 * ry);
                    px.abs() <= half
                }
            };
            if inside {
                pixels.push(y * w + x);
            }
        }
    }
    Some(pixels)
}

/// HSV with hue in turns (wrapped) to RGB.
pub fn hsv_to_rgb(hue: f64, sat: f64, val: f64) -> [f64; 3] {
    let h = hue.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = val * (1.0 - sat);
    let q = val * (1.0 - sat * f);
    let t = val * (1.0 - sat * (1.0 - f));
    match i as u32 % 6 {
        0 => [val, t, p],
        1 => [q, val, p],
        2 => [p, val, t],
        3 => [p, q, val],
        4 => [t, p, val],
        _ => [val, p, q],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sample() {
        let cfg = SynthConfig::default();
        assert_eq!(generate_sample(7, &cfg).unwrap(), generate_sample(7, &cfg).unwrap());
        assert_ne!(
            generate_sample(7, &cfg).unwrap().image,
            generate_sample(8, &cfg).unwrap().image
        );
    }

    #[test]
    fn single_shape_has_one_label() {
        let cfg = SynthConfig {
            max_shapes: 1,
            ..SynthConfig::default()
        };
        for seed in 0..20 {
            let s = generate_sample(seed, &cfg).unwrap();
            assert_eq!(s.labels.iter().filter(|&&b| b).count(), 1);
        }
    }

    #[test]
    fn split_of_one_matches_sample() {
        let cfg = SynthConfig::default();
        let split = generate_split(42, 1, &cfg).unwrap();
        assert_eq!(split[0], generate_sample(42, &cfg).unwrap());
        assert!(generate_split(0, 0, &cfg).is_err());
    }

    #[test]
    fn impossible_layout_reports_placement_error() {
        let cfg = SynthConfig {
            min_shapes: 3,
            max_shapes: 3,
            min_area: 0.38,
            max_area: 0.40,
            ..SynthConfig::default()
        };
        assert!(matches!(
            generate_sample(1, &cfg),
            Err(Error::Placement { seed: 1, attempts: MAX_ATTEMPTS })
        ));
    }

    #[test]
    fn flip_is_an_involution_and_keeps_labels() {
        let s = generate_sample(3, &SynthConfig::default()).unwrap();
        let f = s.flip_horizontal();
        assert_eq!(f.labels, s.labels);
        assert_eq!(f.mask.get(10, 0), s.mask.get(10, 63));
        assert_eq!(f.image.data()[64 * 64 + 5 * 64 + 2], s.image.data()[64 * 64 + 5 * 64 + 61]);
        assert_eq!(f.flip_horizontal(), s);
    }

    #[test]
    fn rejects_bad_configs() {
        let base = SynthConfig::default();
        for bad in [
            SynthConfig { num_classes: 1, max_shapes: 1, ..base.clone() },
            SynthConfig { max_shapes: 4, ..base.clone() },
            SynthConfig { min_shapes: 0, ..base.clone() },
            SynthConfig { min_area: 0.01, ..base.clone() },
        ] {
            assert!(generate_sample(0, &bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn primary_hues() {
        let close = |a: [f64; 3], b: [f64; 3]| a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]));
        assert!(close(hsv_to_rgb(1.0 / 3.0, 1.0, 1.0), [0.0, 1.0, 0.0]));
        assert!(close(hsv_to_rgb(2.0 / 3.0, 1.0, 1.0), [0.0, 0.0, 1.0]));
        assert!(close(hsv_to_rgb(-0.05, 0.0, 0.5), [0.5, 0.5, 0.5]));
    }
}
