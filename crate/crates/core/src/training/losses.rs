//! Classification, class-token discrepancy, and segmentation objectives.

use crate::autodiff::{Tape, Var};
use crate::cam::LabelGrid;
use crate::error::{arg, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 0.1,
            gamma: 0.12,
        }
    }
}

/// Per-step loss values, averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub cls: f64,
    pub mct: f64,
    pub cre: f64,
    pub ure: f64,
    pub more: f64,
    pub seg: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,L_cls,L_mct,L_cre,L_ure,L_seg,L_total";

    /// One metrics-stream line; `{:?}` keeps every bit of each value.
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.step, self.cls, self.mct, self.cre, self.ure, self.seg, self.total
        )
    }

    /// Largest violation of the two decomposition identities.
    pub fn identity_error(&self, w: &LossWeights) -> f64 {
        let more = self.cls + self.mct + w.alpha * self.cre + w.beta * self.ure;
        (self.more - more).abs().max((self.total - (self.more + w.gamma * self.seg)).abs())
    }
}

/// Scalar form of the combined objective: `(L_MoRe, L_total)`.
pub fn total_loss(cls: f64, mct: f64, cre: f64, ure: f64, seg: f64, w: &LossWeights) -> (f64, f64) {
    let more = cls + mct + w.alpha * cre + w.beta * ure;
    (more, more + w.gamma * seg)
}

/// Mean multi-label soft margin loss of `[1×C]` (or `[C]`) logits.
pub fn cls_loss(tape: &mut Tape, logits: Var, labels: &[f64]) -> Result<Var> {
    let c = tape.value(logits).numel();
    if labels.len() != c {
        return arg(format!("{} labels for {c} logits", labels.len()));
    }
    let z = tape.reshape(logits, &[c])?;
    let pos = tape.log_sigmoid(z);
    let neg_z = tape.scale(z, -1.0);
    let neg = tape.log_sigmoid(neg_z);
    let y = tape.constant(Tensor::vector(labels.to_vec()));
    let not_y = tape.constant(Tensor::vector(labels.iter().map(|v| 1.0 - v).collect()));
    let a = tape.mul(pos, y)?;
    let b = tape.mul(neg, not_y)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s);
    Ok(tape.scale(m, -1.0))
}

/// Mean over unordered class pairs of `max(0, cos(q_i, q_j))`. Returns the
/// flat `C×C` indices of the pairs that were active; passing them back in
/// `fixed_active` pins the hinge pattern.
pub fn mct_loss(tape: &mut Tape, q: Var, fixed_active: Option<&[usize]>) -> Result<(Var, Vec<usize>)> {
    let c = tape.shape(q)[0];
    if c < 2 {
        return Ok((tape.constant(Tensor::scalar(0.0)), Vec::new()));
    }
    let pairs = (c * (c - 1) / 2) as f64;
    let cos = tape.cosine(q, q)?;
    let active = match fixed_active {
        Some(a) => a.to_vec(),
        None => {
            let v = tape.value(cos);
            (0..c)
                .flat_map(|i| (i + 1..c).map(move |j| i * c + j))
                .filter(|&ij| v.data()[ij] > 0.0)
                .collect()
        }
    };
    if active.is_empty() {
        return Ok((tape.constant(Tensor::scalar(0.0)), active));
    }
    let flat = tape.reshape(cos, &[c * c])?;
    let picked = tape.index_select(flat, &active)?;
    let s = tape.sum(picked);
    Ok((tape.scale(s, 1.0 / pairs), active))
}

/// Mean per-token cross-entropy of `[L×(C+1)]` logits against hard labels.
pub fn seg_loss(tape: &mut Tape, logits: Var, target: &LabelGrid) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[0] != target.len() {
        return arg(format!("seg logits {s:?} vs {} labels", target.len()));
    }
    let k = s[1];
    if let Some(bad) = target.data.iter().find(|&&v| v as usize >= k) {
        return arg(format!("label {bad} outside 0..{k}"));
    }
    let logp = tape.log_softmax(logits, 1)?;
    let flat = tape.reshape(logp, &[s[0] * k])?;
    let idx: Vec<usize> = target.data.iter().enumerate().map(|(j, &v)| j * k + v as usize).collect();
    let picked = tape.index_select(flat, &idx)?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sigmoid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eval(f: impl FnOnce(&mut Tape) -> Var) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape);
        tape.value(v).item()
    }

    #[test]
    fn cls_anchors() {
        let zero = eval(|t| {
            let z = t.constant(Tensor::zeros(&[1, 3]));
            cls_loss(t, z, &[1.0, 0.0, 1.0]).unwrap()
        });
        assert!((zero - 2f64.ln()).abs() < 1e-12);
        let big = eval(|t| {
            let z = t.constant(Tensor::full(&[3], 60.0));
            cls_loss(t, z, &[1.0; 3]).unwrap()
        });
        assert!(big < 1e-20);
    }

    #[test]
    fn cls_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let y = [1.0, 0.0, 0.0, 1.0];
        let want = -z
            .iter()
            .zip(&y)
            .map(|(&z, &y)| y * sigmoid(z).ln() + (1.0 - y) * (1.0 - sigmoid(z)).ln())
            .sum::<f64>()
            / 4.0;
        let got = eval(|t| {
            let zv = t.constant(Tensor::vector(z.clone()));
            cls_loss(t, zv, &y).unwrap()
        });
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn mct_anchors() {
        let ortho = eval(|t| {
            let q = t.constant(Tensor::matrix(&[&[1.0, 0.0, 0.0], &[0.0, 2.0, 0.0], &[0.0, 0.0, 3.0]]));
            mct_loss(t, q, None).unwrap().0
        });
        assert_eq!(ortho, 0.0);
        let same = eval(|t| {
            let q = t.constant(Tensor::matrix(&[&[1.0, 2.0], &[1.0, 2.0]]));
            mct_loss(t, q, None).unwrap().0
        });
        assert!((same - 1.0).abs() < 1e-12);
        let single = eval(|t| {
            let q = t.constant(Tensor::matrix(&[&[1.0, 2.0]]));
            mct_loss(t, q, None).unwrap().0
        });
        assert_eq!(single, 0.0);
    }

    #[test]
    fn mct_matches_pair_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let mut want = 0.0;
        for i in 0..3 {
            for j in i + 1..3 {
                want += crate::tensor::cosine(&rows[i], &rows[j]).max(0.0);
            }
        }
        want /= 3.0;
        let got = eval(|t| {
            let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
            let q = t.constant(Tensor::matrix(&refs));
            mct_loss(t, q, None).unwrap().0
        });
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn seg_anchors() {
        let target = LabelGrid::new(2, 2, vec![0, 1, 2, 1]).unwrap();
        let uniform = eval(|t| {
            let z = t.constant(Tensor::zeros(&[4, 3]));
            seg_loss(t, z, &target).unwrap()
        });
        assert!((uniform - 3f64.ln()).abs() < 1e-12);
        let mut sat = Tensor::zeros(&[4, 3]);
        for (j, &v) in target.data.iter().enumerate() {
            sat.data_mut()[j * 3 + v as usize] = 50.0;
        }
        let saturated = eval(|t| {
            let z = t.constant(sat);
            seg_loss(t, z, &target).unwrap()
        });
        assert!(saturated < 1e-20);
    }

    #[test]
    fn seg_matches_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits: Vec<f64> = (0..16 * 4).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let labels: Vec<u8> = (0..16).map(|_| rng.gen_range(0..4)).collect();
        let mut want = 0.0;
        for j in 0..16 {
            let row = &logits[j * 4..j * 4 + 4];
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            want += lse - row[labels[j] as usize];
        }
        want /= 16.0;
        let target = LabelGrid::new(4, 4, labels).unwrap();
        let got = eval(|t| {
            let z = t.constant(Tensor::new(&[16, 4], logits.clone()).unwrap());
            seg_loss(t, z, &target).unwrap()
        });
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn combined_objective_arithmetic() {
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, 0.0, &w), (0.0, 0.0));
        let (more, total) = total_loss(1.0, 1.0, 1.0, 1.0, 1.0, &w);
        assert!((more - 2.3).abs() < 1e-15);
        assert!((total - 2.42).abs() < 1e-15);
    }
}
