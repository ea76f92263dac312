//! Class activation maps, localization attention maps, and the masks derived
//! from them.

use crate::error::{arg, Result};
use crate::tensor::{cosine, matmul, Tensor};

pub const BACKGROUND: u8 = 0;
pub const UNCERTAIN: u8 = 255;

/// A dense `height × width` grid of small labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelGrid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelGrid {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return arg(format!(
                "grid {height}x{width} needs {} labels, got {}",
                height * width,
                data.len()
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Mirrors the grid left to right.
    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            data.extend(row.iter().rev());
        }
        Self { data, ..*self }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    Cam,
    Lam,
    /// Decoder class probabilities, background in channel 0.
    Segmentation,
}

/// Per-class scores on the token grid, stored `[n_h×n_w×C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    pub scores: Tensor,
    pub kind: MapKind,
}

impl ActivationMap {
    pub fn height(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.scores.shape()[2]
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let c = self.num_classes();
        let at = (y * self.width() + x) * c;
        &self.scores.data()[at..at + c]
    }

    /// One class channel as a row-major `height × width` slice copy.
    pub fn channel(&self, class: usize) -> Vec<f64> {
        let c = self.num_classes();
        self.scores.data().iter().skip(class).step_by(c).copied().collect()
    }

    /// Bilinear resize (half-pixel centers, edge clamped) to `height × width`.
    pub fn upsample(&self, height: usize, width: usize) -> ActivationMap {
        let (h, w, c) = (self.height(), self.width(), self.num_classes());
        let sy = h as f64 / height as f64;
        let sx = w as f64 / width as f64;
        let src = self.scores.data();
        let mut out = vec![0.0; height * width * c];
        let coord = |dst: usize, scale: f64, n: usize| {
            let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, s - i0 as f64)
        };
        for y in 0..height {
            let (y0, y1, fy) = coord(y, sy, h);
            for x in 0..width {
                let (x0, x1, fx) = coord(x, sx, w);
                for k in 0..c {
                    let v = |yy: usize, xx: usize| src[(yy * w + xx) * c + k];
                    let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
                    let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
                    out[(y * width + x) * c + k] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        ActivationMap {
            scores: Tensor::new(&[height, width, c], out).expect("shape"),
            kind: self.kind,
        }
    }
}

/// Tri-valued mask: background, a 1-based foreground class, or uncertain.
#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityMask {
    pub labels: LabelGrid,
    pub low: f64,
    pub high: f64,
}

/// Min-max normalizes each present class channel of a raw `[L×C]` score
/// matrix to `[0,1]` and zeroes absent channels. A constant channel has no
/// range to stretch and is clamped to `[0,1]` instead.
pub fn normalize_channels(
    raw: &Tensor,
    grid: (usize, usize),
    present: &[bool],
    kind: MapKind,
) -> Result<ActivationMap> {
    let (l, c) = (raw.rows(), raw.cols());
    if grid.0 * grid.1 != l {
        return arg(format!("grid {grid:?} does not hold {l} tokens"));
    }
    if present.len() != c {
        return arg(format!("{} label flags for {c} classes", present.len()));
    }
    let mut out = vec![0.0; l * c];
    for k in 0..c {
        if !present[k] {
            continue;
        }
        let col = (0..l).map(|j| raw.at2(j, k));
        let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let range = hi - lo;
        for j in 0..l {
            let v = raw.at2(j, k);
            out[j * c + k] = if range > 1e-9 { (v - lo) / range } else { v.clamp(0.0, 1.0) };
        }
    }
    Ok(ActivationMap {
        scores: Tensor::new(&[grid.0, grid.1, c], out)?,
        kind,
    })
}

/// `P·W_cls` rearranged onto the grid and normalized per present class.
pub fn compute_cam(
    patch_tokens: &Tensor,
    classifier: &Tensor,
    grid: (usize, usize),
    present: &[bool],
) -> Result<ActivationMap> {
    normalize_channels(&cam_scores(patch_tokens, classifier)?, grid, present, MapKind::Cam)
}

/// Unnormalized `[L×C]` CAM scores.
pub fn cam_scores(patch_tokens: &Tensor, classifier: &Tensor) -> Result<Tensor> {
    matmul(patch_tokens, classifier)
}

/// Cosine similarity of every class token with every patch token, normalized
/// per present class.
pub fn compute_lam(
    class_tokens: &Tensor,
    patch_tokens: &Tensor,
    grid: (usize, usize),
    present: &[bool],
) -> Result<ActivationMap> {
    normalize_channels(&lam_scores(class_tokens, patch_tokens)?, grid, present, MapKind::Lam)
}

/// Unnormalized `[L×C]` class-patch cosines.
pub fn lam_scores(class_tokens: &Tensor, patch_tokens: &Tensor) -> Result<Tensor> {
    if class_tokens.cols() != patch_tokens.cols() {
        return arg(format!(
            "class tokens {:?} and patch tokens {:?} differ in width",
            class_tokens.shape(),
            patch_tokens.shape()
        ));
    }
    let (c, l) = (class_tokens.rows(), patch_tokens.rows());
    let mut raw = Vec::with_capacity(l * c);
    for j in 0..l {
        for k in 0..c {
            raw.push(cosine(class_tokens.row(k), patch_tokens.row(j)));
        }
    }
    Tensor::new(&[l, c], raw)
}

/// First index of the maximum; NaN-free input assumed.
fn argmax(v: &[f64]) -> (usize, f64) {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
}

/// Splits a normalized map into foreground (`max > high`), background
/// (`max < low`), and uncertain pixels.
pub fn multi_threshold_filter(map: &ActivationMap, low: f64, high: f64) -> Result<ReliabilityMask> {
    if !(0.0 < low && low < high && high < 1.0) {
        return arg(format!("thresholds need 0 < low < high < 1, got {low}, {high}"));
    }
    let (h, w) = (map.height(), map.width());
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (cls, max) = argmax(map.pixel(y, x));
            data.push(if max > high {
                (cls + 1) as u8
            } else if max < low {
                BACKGROUND
            } else {
                UNCERTAIN
            });
        }
    }
    Ok(ReliabilityMask {
        labels: LabelGrid::new(h, w, data)?,
        low,
        high,
    })
}

/// Per-pixel argmax channel, ties to the lowest index.
pub fn argmax_labels(map: &ActivationMap) -> LabelGrid {
    let (h, w) = (map.height(), map.width());
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            data.push(argmax(map.pixel(y, x)).0 as u8);
        }
    }
    LabelGrid {
        height: h,
        width: w,
        data,
    }
}

/// Hard labels: background where the best score is under `bg_threshold`,
/// otherwise the 1-based argmax class.
pub fn to_pseudo_label(map: &ActivationMap, bg_threshold: f64) -> LabelGrid {
    let (h, w) = (map.height(), map.width());
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (cls, max) = argmax(map.pixel(y, x));
            data.push(if max < bg_threshold { BACKGROUND } else { (cls + 1) as u8 });
        }
    }
    LabelGrid {
        height: h,
        width: w,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, c: usize, data: Vec<f64>) -> ActivationMap {
        ActivationMap {
            scores: Tensor::new(&[h, w, c], data).unwrap(),
            kind: MapKind::Cam,
        }
    }

    #[test]
    fn zero_classifier_gives_zero_map() {
        let p = Tensor::new(&[4, 3], (0..12).map(|v| v as f64).collect()).unwrap();
        let cam = compute_cam(&p, &Tensor::zeros(&[3, 2]), (2, 2), &[true, true]).unwrap();
        assert!(cam.scores.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_patch_map() {
        let p = Tensor::matrix(&[&[0.2, 0.5]]);
        let w = Tensor::matrix(&[&[1.0, 2.0], &[-1.0, 1.0]]);
        let cam = compute_cam(&p, &w, (1, 1), &[true, true]).unwrap();
        assert_eq!(cam.scores.shape(), &[1, 1, 2]);
        // raw [-0.3, 0.9]: constant channels clamp into [0,1]
        assert_eq!(cam.scores.data(), &[0.0, 0.9]);
    }

    #[test]
    fn absent_classes_are_zeroed() {
        let p = Tensor::matrix(&[&[1.0], &[2.0], &[3.0], &[4.0]]);
        let w = Tensor::matrix(&[&[1.0, -1.0]]);
        let cam = compute_cam(&p, &w, (2, 2), &[true, false]).unwrap();
        assert_eq!(cam.channel(0), vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert_eq!(cam.channel(1), vec![0.0; 4]);
    }

    #[test]
    fn threshold_branches() {
        let m = map(1, 3, 2, vec![0.8, 0.3, 0.1, 0.2, 0.5, 0.4]);
        let mask = multi_threshold_filter(&m, 0.25, 0.7).unwrap();
        assert_eq!(mask.labels.data, vec![1, 0, 255]);
        assert!(multi_threshold_filter(&m, 0.7, 0.25).is_err());
        assert!(multi_threshold_filter(&m, 0.0, 0.5).is_err());
        assert!(multi_threshold_filter(&m, 0.2, 1.0).is_err());
    }

    #[test]
    fn ties_go_to_the_lowest_class() {
        let m = map(1, 1, 3, vec![0.9, 0.9, 0.9]);
        assert_eq!(multi_threshold_filter(&m, 0.25, 0.7).unwrap().labels.data, vec![1]);
        assert_eq!(to_pseudo_label(&m, 0.45).data, vec![1]);
    }

    #[test]
    fn lam_parallel_and_orthogonal() {
        let q = Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let p = Tensor::matrix(&[&[2.0, 0.0], &[3.0, 0.0], &[0.5, 0.0], &[1.0, 0.0]]);
        let lam = compute_lam(&q, &p, (2, 2), &[true, true]).unwrap();
        assert!(lam.channel(0).iter().all(|&v| (v - 1.0).abs() < 1e-9));
        assert!(lam.channel(1).iter().all(|&v| v == 0.0));
        assert_eq!(lam.kind, MapKind::Lam);
    }

    #[test]
    fn pseudo_label_cases() {
        let low = map(1, 2, 2, vec![0.1, 0.2, 0.3, 0.0]);
        assert_eq!(to_pseudo_label(&low, 0.45).data, vec![0, 0]);
        let hot = map(1, 2, 2, vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(to_pseudo_label(&hot, 0.45).data, vec![2, 2]);
        // 2×2 mixed: [0.5,0.6] [0.9,0.1] [0.44,0.2] [0.45,0.45]
        let mixed = map(2, 2, 2, vec![0.5, 0.6, 0.9, 0.1, 0.44, 0.2, 0.45, 0.45]);
        assert_eq!(to_pseudo_label(&mixed, 0.45).data, vec![2, 1, 0, 1]);
    }

    #[test]
    fn upsample_constant_and_identity() {
        let m = map(2, 2, 1, vec![0.5; 4]);
        let up = m.upsample(8, 8);
        assert!(up.scores.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let m = map(2, 2, 1, vec![0.0, 1.0, 0.25, 0.75]);
        assert_eq!(m.upsample(2, 2), m);
    }

    #[test]
    fn flip_grid() {
        let g = LabelGrid::new(2, 3, vec![1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(g.flip_horizontal().data, vec![3, 2, 1, 6, 5, 4]);
    }
}
