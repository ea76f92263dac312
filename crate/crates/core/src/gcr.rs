//! Graph category representation.
//!
//! Class tokens become graph heads and patch tokens become tails. Each head
//! keeps its top-K tails by raw dot-product score, builds convex edge
//! embeddings toward them, weights them with a gated softmax, and fuses the
//! aggregated tail semantics back into the head.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{arg, Result};
use crate::params::{Bound, Linear, ParamStore};
use crate::tensor::Tensor;

/// Learned projections of the graph module.
#[derive(Clone, Debug)]
pub struct GcrParams {
    pub head: Linear,
    pub tail: Linear,
    pub w1: Linear,
    pub w2: Linear,
}

impl GcrParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, dim: usize) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        Self {
            head: Linear::new(store, rng, "gcr.head", dim, dim, std),
            tail: Linear::new(store, rng, "gcr.tail", dim, dim, std),
            w1: Linear::new(store, rng, "gcr.w1", dim, dim, std),
            w2: Linear::new(store, rng, "gcr.w2", dim, dim, std),
        }
    }
}

/// Default neighbor count: half of the patch tokens.
pub fn default_top_k(num_patches: usize) -> usize {
    (num_patches / 2).max(1)
}

/// Per-class tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct GraphVars {
    pub heads: Var,
    pub tails: Var,
    pub relations: Vec<Var>,
    pub neighbors: Vec<Vec<usize>>,
    pub edges: Vec<Var>,
    pub weights: Vec<Var>,
    pub aggregate: Var,
    pub output: Var,
}

/// Snapshot of the graph for inspection.
#[derive(Clone, Debug)]
pub struct GraphCategoryState {
    pub heads: Tensor,
    pub tails: Tensor,
    /// `[C×K]`, rows aligned with `neighbors`.
    pub relations: Tensor,
    /// K tail indices per class, by descending score.
    pub neighbors: Vec<Vec<usize>>,
    /// `[C×K×D]`.
    pub edges: Tensor,
    /// `[C×K]`.
    pub weights: Tensor,
    pub aggregate: Tensor,
    pub output: Tensor,
}

impl GraphCategoryState {
    pub fn from_tape(tape: &Tape, g: &GraphVars) -> Self {
        let stack = |vars: &[Var]| -> Tensor {
            let first = tape.value(vars[0]).shape().to_vec();
            let mut shape = vec![vars.len()];
            shape.extend(first);
            let data = vars.iter().flat_map(|&v| tape.value(v).data().to_vec()).collect();
            Tensor::new(&shape, data).expect("uniform shapes")
        };
        Self {
            heads: tape.value(g.heads).clone(),
            tails: tape.value(g.tails).clone(),
            relations: stack(&g.relations),
            neighbors: g.neighbors.clone(),
            edges: stack(&g.edges),
            weights: stack(&g.weights),
            aggregate: tape.value(g.aggregate).clone(),
            output: tape.value(g.output).clone(),
        }
    }
}

/// Heads `𝒯·W_H + b` and tails `P·W_T + b`.
pub fn project(
    tape: &mut Tape,
    bound: &Bound,
    params: &GcrParams,
    class_tokens: Var,
    patch_tokens: Var,
) -> Result<(Var, Var)> {
    let h = params.head.forward(tape, bound, class_tokens)?;
    let t = params.tail.forward(tape, bound, patch_tokens)?;
    Ok((h, t))
}

/// Scores every tail against head `h_i` (`[1×D]`) and keeps the `k` best.
/// Returns the softmax over the kept scores and their tail indices, both in
/// descending-score order. `fixed` reuses a previous selection.
pub fn select_neighbors(
    tape: &mut Tape,
    head: Var,
    tails: Var,
    k: usize,
    fixed: Option<&[usize]>,
) -> Result<(Var, Vec<usize>)> {
    let l = tape.shape(tails)[0];
    if k == 0 || k > l {
        return arg(format!("top-k needs 1 <= K <= {l}, got {k}"));
    }
    let ht = tape.transpose(head)?;
    let scores = tape.matmul(tails, ht)?;
    let scores = tape.reshape(scores, &[l])?;
    let (selected, idx) = match fixed {
        Some(idx) => {
            if idx.len() != k {
                return arg(format!("fixed neighbor set has {} entries, expected {k}", idx.len()));
            }
            (tape.index_select(scores, idx)?, idx.to_vec())
        }
        None => tape.topk(scores, k)?,
    };
    let r = tape.softmax(selected, 0)?;
    Ok((r, idx))
}

/// `e_ij = r_ij·t_j + (1 − r_ij)·h_i` for the selected tails `[K×D]`.
pub fn edge_embeddings(tape: &mut Tape, head: Var, selected_tails: Var, r: Var) -> Result<Var> {
    let k = tape.shape(r)[0];
    let rc = tape.reshape(r, &[k, 1])?;
    let rt = tape.mul(rc, selected_tails)?;
    let neg = tape.scale(rc, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let rh = tape.mul(one_minus, head)?;
    tape.add(rt, rh)
}

/// `S_ij = softmax_j(t_jᵀ tanh(h_i + e_ij))` and `a_i = Σ_j S_ij t_j`.
/// Returns `(a_i [1×D], S [K])`.
pub fn aggregate(tape: &mut Tape, head: Var, edges: Var, selected_tails: Var) -> Result<(Var, Var)> {
    let k = tape.shape(edges)[0];
    let gate = tape.add(edges, head)?;
    let gate = tape.tanh(gate);
    let prod = tape.mul(selected_tails, gate)?;
    let logits = tape.sum_axis(prod, 1)?;
    let logits = tape.reshape(logits, &[k])?;
    let s = tape.softmax(logits, 0)?;
    let srow = tape.reshape(s, &[1, k])?;
    let a = tape.matmul(srow, selected_tails)?;
    Ok((a, s))
}

/// `Q = LeakyReLU((H + A)·W1 + b1) + LeakyReLU((A ⊙ H)·W2 + b2)`.
pub fn fuse(tape: &mut Tape, bound: &Bound, params: &GcrParams, heads: Var, agg: Var) -> Result<Var> {
    let sum = tape.add(heads, agg)?;
    let x1 = params.w1.forward(tape, bound, sum)?;
    let x1 = tape.leaky_relu(x1);
    let prod = tape.mul(agg, heads)?;
    let x2 = params.w2.forward(tape, bound, prod)?;
    let x2 = tape.leaky_relu(x2);
    tape.add(x1, x2)
}

/// The full graph pass over one image's tokens. `fixed_neighbors` pins the
/// per-class neighbor sets instead of re-selecting them.
pub fn gcr_forward(
    tape: &mut Tape,
    bound: &Bound,
    params: &GcrParams,
    class_tokens: Var,
    patch_tokens: Var,
    k: usize,
    fixed_neighbors: Option<&[Vec<usize>]>,
) -> Result<GraphVars> {
    let c = tape.shape(class_tokens)[0];
    let (heads, tails) = project(tape, bound, params, class_tokens, patch_tokens)?;
    let mut relations = Vec::with_capacity(c);
    let mut neighbors = Vec::with_capacity(c);
    let mut edges = Vec::with_capacity(c);
    let mut weights = Vec::with_capacity(c);
    let mut aggs = Vec::with_capacity(c);
    for i in 0..c {
        let h = tape.index_select(heads, &[i])?;
        let fixed = fixed_neighbors.map(|f| f[i].as_slice());
        let (r, idx) = select_neighbors(tape, h, tails, k, fixed)?;
        let sel = tape.index_select(tails, &idx)?;
        let e = edge_embeddings(tape, h, sel, r)?;
        let (a, s) = aggregate(tape, h, e, sel)?;
        relations.push(r);
        neighbors.push(idx);
        edges.push(e);
        weights.push(s);
        aggs.push(a);
    }
    let aggregate = tape.concat_rows(&aggs)?;
    let output = fuse(tape, bound, params, heads, aggregate)?;
    Ok(GraphVars {
        heads,
        tails,
        relations,
        neighbors,
        edges,
        weights,
        aggregate,
        output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_case_neighbors_and_relations() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::matrix(&[&[1.0, 0.0]]));
        let t = tape.constant(Tensor::matrix(&[&[2.0, 0.0], &[0.0, 3.0], &[1.0, 0.0]]));
        let (r, idx) = select_neighbors(&mut tape, h, t, 2, None).unwrap();
        assert_eq!(idx, vec![0, 2]);
        let r = tape.value(r).data();
        let e = 1f64.exp();
        assert!((r[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((r[0] - 0.7311).abs() < 1e-4);
        assert!((r[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn k_equal_l_keeps_everything() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::matrix(&[&[0.3, -1.0]]));
        let t = tape.constant(Tensor::matrix(&[&[2.0, 0.5], &[0.0, 3.0], &[1.0, -1.0]]));
        let (r, mut idx) = select_neighbors(&mut tape, h, t, 3, None).unwrap();
        let total: f64 = tape.value(r).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2]);
        assert!(select_neighbors(&mut tape, h, t, 4, None).is_err());
        assert!(select_neighbors(&mut tape, h, t, 0, None).is_err());
    }

    #[test]
    fn edge_hand_cases() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::matrix(&[&[0.0, 0.0]]));
        let t = tape.constant(Tensor::matrix(&[&[1.0, 1.0]]));
        let r = tape.constant(Tensor::vector(vec![0.25]));
        let e = edge_embeddings(&mut tape, h, t, r).unwrap();
        assert_eq!(tape.value(e).data(), &[0.25, 0.25]);

        // K = 1: the singleton softmax forces r = 1 and e = t
        let h = tape.constant(Tensor::matrix(&[&[0.5, -0.2]]));
        let tails = tape.constant(Tensor::matrix(&[&[1.0, 2.0], &[-3.0, 0.5]]));
        let (r, idx) = select_neighbors(&mut tape, h, tails, 1, None).unwrap();
        assert_eq!(tape.value(r).data(), &[1.0]);
        let sel = tape.index_select(tails, &idx).unwrap();
        let e = edge_embeddings(&mut tape, h, sel, r).unwrap();
        assert_eq!(tape.value(e).data(), tape.value(sel).data());
        let (a, s) = aggregate(&mut tape, h, e, sel).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0]);
        assert_eq!(tape.value(a).data(), tape.value(sel).data());
    }

    #[test]
    fn identical_tails_aggregate_to_that_tail() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::matrix(&[&[0.4, 0.1, -0.3]]));
        let row = [0.7, -0.2, 0.9];
        let sel = tape.constant(Tensor::matrix(&[&row, &row, &row]));
        let e = tape.constant(Tensor::matrix(&[&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0], &[-1.0, 0.5, 0.2]]));
        let (a, _) = aggregate(&mut tape, h, e, sel).unwrap();
        for (x, y) in tape.value(a).data().iter().zip(row) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    fn with_params(d: usize) -> (GcrParams, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = GcrParams::new(&mut store, &mut rng, d);
        (p, store)
    }

    #[test]
    fn fuse_special_weights() {
        let (p, mut store) = with_params(2);
        *store.get_mut(p.w1.weight) = Tensor::zeros(&[2, 2]);
        *store.get_mut(p.w2.weight) = Tensor::zeros(&[2, 2]);
        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let h = tape.constant(Tensor::matrix(&[&[1.0, 2.0], &[0.5, 0.1]]));
            let a = tape.constant(Tensor::matrix(&[&[0.5, 0.5], &[3.0, 0.2]]));
            let q = fuse(&mut tape, &bound, &p, h, a).unwrap();
            tape.value(q).clone()
        };
        assert!(run(&store).data().iter().all(|&v| v == 0.0));
        *store.get_mut(p.w1.weight) = Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let q = run(&store);
        let want = [1.5, 2.5, 3.5, 0.3];
        assert!(q.data().iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn forward_shapes_and_probability_rows() {
        let (p, store) = with_params(4);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let t = tape.constant(Tensor::new(&[2, 4], (0..8).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap());
        let pt = tape.constant(Tensor::new(&[9, 4], (0..36).map(|i| (i as f64 * 1.3).cos()).collect()).unwrap());
        let g = gcr_forward(&mut tape, &bound, &p, t, pt, 3, None).unwrap();
        let state = GraphCategoryState::from_tape(&tape, &g);
        assert_eq!(state.output.shape(), &[2, 4]);
        assert_eq!(state.relations.shape(), &[2, 3]);
        assert_eq!(state.edges.shape(), &[2, 3, 4]);
        for i in 0..2 {
            let r: f64 = state.relations.row(i).iter().sum();
            let s: f64 = state.weights.row(i).iter().sum();
            assert!((r - 1.0).abs() < 1e-9 && (s - 1.0).abs() < 1e-9);
            let mut n = state.neighbors[i].clone();
            n.sort();
            n.dedup();
            assert_eq!(n.len(), 3);
            assert!(n.iter().all(|&j| j < 9));
        }
        assert!(state.output.is_finite());
    }
}
