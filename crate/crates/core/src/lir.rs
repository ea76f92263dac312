//! Localization-informed regularization: CAM-derived supervision of the
//! class-patch similarity.

use crate::autodiff::{Tape, Var};
use crate::cam::{LabelGrid, ReliabilityMask, BACKGROUND, UNCERTAIN};
use crate::error::{arg, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LirConfig {
    pub temperature: f64,
    pub kernel_size: usize,
    pub proportion: f64,
}

impl Default for LirConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            kernel_size: 3,
            proportion: 1.2,
        }
    }
}

impl LirConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return arg(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return arg(format!("kernel size must be odd, got {}", self.kernel_size));
        }
        if !(self.proportion > 0.0) {
            return arg(format!("proportion must be positive, got {}", self.proportion));
        }
        Ok(())
    }
}

/// Confident foreground classes and the uncertain indicator of one mask.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationMaps {
    /// 1-based class ids where the mask is foreground, 0 elsewhere.
    pub confident: LabelGrid,
    /// 1 where the mask is uncertain, 0 elsewhere.
    pub uncertain: LabelGrid,
}

pub fn split_relations(mask: &ReliabilityMask) -> RelationMaps {
    let g = &mask.labels;
    let confident = g
        .data
        .iter()
        .map(|&v| if v == UNCERTAIN { BACKGROUND } else { v })
        .collect();
    let uncertain = g.data.iter().map(|&v| u8::from(v == UNCERTAIN)).collect();
    RelationMaps {
        confident: LabelGrid {
            data: confident,
            ..*g
        },
        uncertain: LabelGrid {
            data: uncertain,
            ..*g
        },
    }
}

/// Uncertain pixels whose neighborhood holds enough foreground evidence,
/// as row-major `(y, x)` coordinates.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UncertainSet {
    pub members: Vec<(usize, usize)>,
}

impl UncertainSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Flat token indices on a grid of the given width.
    pub fn token_indices(&self, width: usize) -> Vec<usize> {
        self.members.iter().map(|&(y, x)| y * width + x).collect()
    }

    /// Binary grid with 1 at selected pixels.
    pub fn to_grid(&self, height: usize, width: usize) -> LabelGrid {
        let mut g = LabelGrid::filled(height, width, 0);
        for &(y, x) in &self.members {
            g.data[y * width + x] = 1;
        }
        g
    }
}

/// Selects uncertain pixels whose `d×d` window (zero padded at borders)
/// scores above `proportion` per cell, counting 2 for every confident
/// foreground pixel and 1 for every uncertain one.
pub fn kernel_search(maps: &RelationMaps, kernel_size: usize, proportion: f64) -> Result<UncertainSet> {
    let (c, u) = (&maps.confident, &maps.uncertain);
    if (c.height, c.width) != (u.height, u.width) {
        return arg("relation maps differ in shape");
    }
    if kernel_size % 2 == 0 {
        return arg(format!("kernel size must be odd, got {kernel_size}"));
    }
    let (h, w) = (c.height, c.width);
    // summed-area table of the per-pixel evidence, one row/column of padding
    let mut sat = vec![0u32; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0u32;
        for x in 0..w {
            let v = 2 * u32::from(c.get(y, x) > 0) + u32::from(u.get(y, x) == 1);
            row += v;
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    let r = kernel_size / 2;
    let cells = (kernel_size * kernel_size) as f64;
    let mut members = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if u.get(y, x) != 1 {
                continue;
            }
            let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let at = |yy: usize, xx: usize| sat[yy * (w + 1) + xx];
            let score = at(y1, x1) + at(y0, x0) - at(y0, x1) - at(y1, x0);
            if score as f64 / cells > proportion {
                members.push((y, x));
            }
        }
    }
    Ok(UncertainSet { members })
}

/// Contrast of class tokens against patch tokens under cosine logits
/// scaled by `1/τ`: each confident pixel of a present class is a positive
/// against a softmax over all patches. Averaged over positives; zero when
/// there are none.
pub fn cre_loss(
    tape: &mut Tape,
    class_tokens: Var,
    patch_tokens: Var,
    confident: &LabelGrid,
    present: &[bool],
    temperature: f64,
) -> Result<Var> {
    let (c, l) = (tape.shape(class_tokens)[0], tape.shape(patch_tokens)[0]);
    if confident.len() != l || present.len() != c {
        return arg(format!(
            "cre_loss: {} mask cells / {} label flags for {l} patches and {c} classes",
            confident.len(),
            present.len()
        ));
    }
    let positives: Vec<usize> = confident
        .data
        .iter()
        .enumerate()
        .filter(|&(_, &v)| v != BACKGROUND && (v as usize) <= c && present[v as usize - 1])
        .map(|(j, &v)| (v as usize - 1) * l + j)
        .collect();
    if positives.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let cos = tape.cosine(class_tokens, patch_tokens)?;
    let logits = tape.scale(cos, 1.0 / temperature);
    let logp = tape.log_softmax(logits, 1)?;
    let flat = tape.reshape(logp, &[c * l])?;
    let picked = tape.index_select(flat, &positives)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / positives.len() as f64))
}

/// Pulls selected uncertain tokens toward present-class tokens and away from
/// absent-class tokens; each half is averaged over its own pair count and
/// vanishes when that count is zero.
pub fn ure_loss(
    tape: &mut Tape,
    class_tokens: Var,
    patch_tokens: Var,
    selected: &UncertainSet,
    grid_width: usize,
    present: &[bool],
) -> Result<Var> {
    let c = tape.shape(class_tokens)[0];
    if present.len() != c {
        return arg(format!("ure_loss: {} label flags for {c} classes", present.len()));
    }
    let zero = tape.constant(Tensor::scalar(0.0));
    if selected.is_empty() {
        return Ok(zero);
    }
    let n = selected.len();
    let tokens = tape.index_select(patch_tokens, &selected.token_indices(grid_width))?;
    let cos = tape.cosine(class_tokens, tokens)?;
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..c).partition(|&k| present[k]);
    let mut loss = zero;
    if !pos.is_empty() {
        let rows = tape.index_select(cos, &pos)?;
        let s = tape.sum(rows);
        let s = tape.scale(s, -1.0 / (pos.len() * n) as f64);
        let term = tape.add_scalar(s, 1.0);
        loss = tape.add(loss, term)?;
    }
    if !neg.is_empty() {
        let rows = tape.index_select(cos, &neg)?;
        let s = tape.sum(rows);
        let term = tape.scale(s, 1.0 / (neg.len() * n) as f64);
        loss = tape.add(loss, term)?;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, data: Vec<u8>) -> ReliabilityMask {
        ReliabilityMask {
            labels: LabelGrid::new(h, w, data).unwrap(),
            low: 0.25,
            high: 0.7,
        }
    }

    #[test]
    fn split_cases() {
        let all_u = split_relations(&mask(2, 2, vec![255; 4]));
        assert_eq!(all_u.confident.data, vec![0; 4]);
        assert_eq!(all_u.uncertain.data, vec![1; 4]);
        let bg = split_relations(&mask(2, 2, vec![0; 4]));
        assert_eq!(bg.confident.data, vec![0; 4]);
        assert_eq!(bg.uncertain.data, vec![0; 4]);
        let mixed = split_relations(&mask(3, 3, vec![0, 1, 255, 2, 255, 0, 1, 1, 255]));
        assert_eq!(mixed.confident.data, vec![0, 1, 0, 2, 0, 0, 1, 1, 0]);
        assert_eq!(mixed.uncertain.data, vec![0, 0, 1, 0, 1, 0, 0, 0, 1]);
    }

    #[test]
    fn kernel_window_arithmetic() {
        // centre uncertain; window has 5 foreground + 2 uncertain (incl. centre)
        let m = mask(3, 3, vec![1, 1, 1, 1, 255, 255, 1, 0, 0]);
        let maps = split_relations(&m);
        let u = kernel_search(&maps, 3, 1.2).unwrap();
        // (1,1): (10 + 2) / 9 = 1.33 > 1.2
        assert!(u.members.contains(&(1, 1)));
        // (1,2) is clipped: window holds 2 fg + 2 uncertain = 6 / 9 < 1.2
        assert!(!u.members.contains(&(1, 2)));
    }

    #[test]
    fn background_neighborhood_never_selected() {
        let mut data = vec![0u8; 25];
        data[12] = 255;
        let maps = split_relations(&mask(5, 5, data));
        assert!(kernel_search(&maps, 3, 1.2).unwrap().is_empty());
        assert!(kernel_search(&maps, 3, 0.05).unwrap().members == vec![(2, 2)]);
        assert!(kernel_search(&maps, 2, 1.2).is_err());
    }

    #[test]
    fn cre_uniform_logits_give_log_l() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::matrix(&[&[1.0, 0.0]]));
        let p = tape.constant(Tensor::matrix(&[&[0.0, 1.0], &[0.0, 1.0], &[0.0, 1.0], &[0.0, 1.0]]));
        let mc = LabelGrid::new(2, 2, vec![1, 0, 0, 0]).unwrap();
        let loss = cre_loss(&mut tape, q, p, &mc, &[true], 0.1).unwrap();
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cre_saturates_toward_zero() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::matrix(&[&[1.0, 0.0]]));
        let p = tape.constant(Tensor::matrix(&[&[1.0, 0.0], &[-1.0, 0.0], &[-1.0, 0.0], &[-1.0, 0.0]]));
        let mc = LabelGrid::new(2, 2, vec![1, 0, 0, 0]).unwrap();
        let loss = cre_loss(&mut tape, q, p, &mc, &[true], 0.01).unwrap();
        assert!(tape.value(loss).item() < 1e-80);
    }

    #[test]
    fn cre_without_positives_is_zero() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::matrix(&[&[1.0, 0.0]]));
        let p = tape.constant(Tensor::full(&[4, 2], 0.5));
        let mc = LabelGrid::filled(2, 2, 0);
        let loss = cre_loss(&mut tape, q, p, &mc, &[true], 0.1).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn ure_cases() {
        let set = UncertainSet {
            members: vec![(0, 0), (0, 1)],
        };
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let p = tape.constant(Tensor::matrix(&[&[2.0, 0.0], &[0.5, 0.0]]));
        let aligned = ure_loss(&mut tape, q, p, &set, 2, &[true, false]).unwrap();
        assert!(tape.value(aligned).item().abs() < 1e-9);

        let q1 = tape.constant(Tensor::matrix(&[&[1.0, 0.0]]));
        let p1 = tape.constant(Tensor::matrix(&[&[0.0, 3.0], &[0.0, 1.0]]));
        let orth = ure_loss(&mut tape, q1, p1, &set, 2, &[true]).unwrap();
        assert!((tape.value(orth).item() - 1.0).abs() < 1e-12);

        let empty = ure_loss(&mut tape, q, p, &UncertainSet::default(), 2, &[true, false]).unwrap();
        assert_eq!(tape.value(empty).item(), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(LirConfig::default().validate().is_ok());
        let bad = LirConfig {
            kernel_size: 4,
            ..LirConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = LirConfig {
            temperature: 0.0,
            ..LirConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
