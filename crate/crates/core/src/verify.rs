//! Oracle and finite-difference checks, shared by the `verify` command and
//! the acceptance tests.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var, LEAKY_SLOPE};
use crate::cam::{
    compute_cam, compute_lam, multi_threshold_filter, ActivationMap, LabelGrid, MapKind, BACKGROUND, UNCERTAIN,
};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::gcr::{gcr_forward, select_neighbors, GcrParams, GraphCategoryState};
use crate::lir::{cre_loss, kernel_search, split_relations, ure_loss, RelationMaps, UncertainSet};
use crate::metrics::{ConfusionMatrix, Metric};
use crate::params::{truncated_normal, Bound, Linear, ParamStore};
use crate::tensor::{cosine, Tensor};
use crate::training::losses::{cls_loss, mct_loss, seg_loss, total_loss, LossWeights};
use crate::training::model::{Decoder, Model, ModelConfig};
use crate::training::trainer::batch_objective;

/// Worst acceptable relative error between tape and central-difference
/// gradients.
pub const GRAD_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error. Central differences carry about
/// `1e-10` of round-off, so near-zero gradients are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-5;
const PARAM_STD: f64 = 0.4;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn line(&self) -> String {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        format!("{tag} {}: {}", self.name, self.detail)
    }
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Random instances per gradient check.
    pub instances: usize,
    /// Corrupts every analytic gradient before comparison; the gradient
    /// checks must then fail.
    pub perturb_gradients: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 20,
            perturb_gradients: false,
        }
    }
}

fn run(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let t = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    Check {
        name: name.to_string(),
        passed,
        detail: format!("{detail} [{:.2}s]", t.elapsed().as_secs_f64()),
    }
}

fn rng_for(opts: &VerifyOptions, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(salt);
    rng
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    truncated_normal(rng, shape, std)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen::<f64>()).collect()).expect("shape")
}

/// Redraws every tensor in `store`; layer-norm gains are centred on one.
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, std: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let gain = store.name(id).ends_with(".gain");
        let t = store.get_mut(id);
        let mut fresh = randn(rng, t.shape(), std);
        if gain {
            fresh = fresh.map(|v| 1.0 + v);
        }
        *t = fresh;
    }
}

fn random_present(rng: &mut ChaCha8Rng, c: usize) -> Vec<bool> {
    let mut p: Vec<bool> = (0..c).map(|_| rng.gen_bool(0.5)).collect();
    if !p.iter().any(|&b| b) {
        p[rng.gen_range(0..c)] = true;
    }
    p
}

fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, max: u8) -> LabelGrid {
    LabelGrid::new(h, w, (0..h * w).map(|_| rng.gen_range(0..=max)).collect()).expect("shape")
}

/// `|a − n| / max(|a| + |n|, GRAD_FLOOR)`.
pub fn grad_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(GRAD_FLOOR)
}

/// Worst relative error over the checked coordinates of the scalar built by
/// `f`, whose arguments are the bound `store` and `inputs` as tape leaves.
/// `limit` samples that many coordinates when the problem is larger.
fn fd_worst<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    limit: Option<usize>,
    rng: &mut ChaCha8Rng,
    perturb: bool,
    f: F,
) -> Result<Worst>
where
    F: Fn(&mut Tape, &Bound, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &bound, &vars)?;
    let grads = tape.backward(loss)?;
    let shapes: Vec<Vec<usize>> = store
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .chain(inputs.iter().map(|t| t.shape().to_vec()))
        .collect();
    let leaves: Vec<Var> = store.ids().map(|id| bound.var(id)).chain(vars.iter().copied()).collect();
    let analytic: Vec<Tensor> = leaves
        .iter()
        .zip(&shapes)
        .map(|(&v, s)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(s)))
        .collect();

    let eval = |s: &ParamStore, ins: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let b = s.bind_frozen(&mut tape);
        let vs: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &b, &vs)?;
        Ok(tape.value(out).item())
    };

    let coords: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .flat_map(|(slot, t)| (0..t.numel()).map(move |i| (slot, i)))
        .collect();
    let chosen: Vec<(usize, usize)> = match limit {
        Some(n) if n < coords.len() => sample(rng, coords.len(), n).into_iter().map(|k| coords[k]).collect(),
        _ => coords,
    };
    let ids: Vec<_> = store.ids().collect();
    let mut worst = Worst::default();
    for (slot, i) in chosen {
        let shifted = |delta: f64| -> Result<f64> {
            if slot < ids.len() {
                let mut s = store.clone();
                s.get_mut(ids[slot]).data_mut()[i] += delta;
                eval(&s, inputs)
            } else {
                let mut ins = inputs.to_vec();
                ins[slot - ids.len()].data_mut()[i] += delta;
                eval(store, &ins)
            }
        };
        let numeric = (shifted(FD_STEP)? - shifted(-FD_STEP)?) / (2.0 * FD_STEP);
        let mut a = analytic[slot].data()[i];
        if perturb {
            a = a * 1.01 + 1e-3;
        }
        let err = grad_error(a, numeric);
        if err > worst.err {
            worst = Worst { err, analytic: a, numeric };
        }
    }
    Ok(worst)
}

/// The coordinate with the largest relative error.
#[derive(Clone, Copy, Debug, Default)]
struct Worst {
    err: f64,
    analytic: f64,
    numeric: f64,
}

/// Repeats a finite-difference check over `n` instances.
fn grad_check(
    name: &str,
    opts: &VerifyOptions,
    salt: u64,
    n: usize,
    mut instance: impl FnMut(&mut ChaCha8Rng) -> Result<Worst>,
) -> Check {
    run(name, || {
        let mut rng = rng_for(opts, salt);
        let mut worst = Worst::default();
        for _ in 0..n {
            let w = instance(&mut rng)?;
            if w.err >= worst.err {
                worst = w;
            }
        }
        Ok((
            worst.err <= GRAD_TOL,
            format!(
                "{n} instances, worst rel. err {:.2e} (analytic {:.6e}, numeric {:.6e})",
                worst.err, worst.analytic, worst.numeric
            ),
        ))
    })
}

/// Classes, grid and width of a small random instance.
fn small_dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    (
        rng.gen_range(2..=3),
        rng.gen_range(2..=4),
        rng.gen_range(2..=4),
        rng.gen_range(2..=8),
    )
}

fn tiny_encoder(rng: &mut ChaCha8Rng, c: usize) -> EncoderConfig {
    EncoderConfig {
        image_height: 8,
        image_width: 8,
        patch_size: 2,
        embed_dim: if rng.gen_bool(0.5) { 4 } else { 8 },
        depth: rng.gen_range(1..=2),
        num_heads: 2,
        num_classes: c,
        mlp_ratio: 2,
    }
}

/// Random `R` and the scalar `Σ x ⊙ R`.
fn probe(tape: &mut Tape, x: Var, r: &Tensor) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let m = tape.mul(x, rv)?;
    Ok(tape.sum(m))
}

pub fn gradient_checks(opts: &VerifyOptions) -> Vec<Check> {
    let n = opts.instances;
    let perturb = opts.perturb_gradients;
    let empty = ParamStore::new();
    let mut out = Vec::new();

    out.push(grad_check("grad.cre_loss", opts, 1, n, |rng| {
        let (c, nh, nw, d) = small_dims(rng);
        let l = nh * nw;
        let present = random_present(rng, c);
        let mut conf = random_grid(rng, nh, nw, c as u8);
        let k = present.iter().position(|&b| b).expect("one present");
        conf.data[rng.gen_range(0..l)] = k as u8 + 1;
        let inputs = [randn(rng, &[c, d], 1.0), randn(rng, &[l, d], 1.0)];
        fd_worst(&empty, &inputs, None, rng, perturb, |t, _, v| {
            cre_loss(t, v[0], v[1], &conf, &present, 0.1)
        })
    }));

    out.push(grad_check("grad.ure_loss", opts, 2, n, |rng| {
        let (c, nh, nw, d) = small_dims(rng);
        let present = random_present(rng, c);
        let mut members: Vec<(usize, usize)> = Vec::new();
        for y in 0..nh {
            for x in 0..nw {
                if rng.gen_bool(0.4) {
                    members.push((y, x));
                }
            }
        }
        if members.is_empty() {
            members.push((0, 0));
        }
        let sel = UncertainSet { members };
        let inputs = [randn(rng, &[c, d], 1.0), randn(rng, &[nh * nw, d], 1.0)];
        fd_worst(&empty, &inputs, None, rng, perturb, |t, _, v| {
            ure_loss(t, v[0], v[1], &sel, nw, &present)
        })
    }));

    out.push(grad_check("grad.gcr_forward", opts, 3, n, |rng| {
        let (c, nh, nw, d) = small_dims(rng);
        let l = nh * nw;
        let k = rng.gen_range(1..=l);
        let mut store = ParamStore::new();
        let params = GcrParams::new(&mut store, rng, d);
        randomize(&mut store, rng, PARAM_STD);
        let inputs = [randn(rng, &[c, d], 1.0), randn(rng, &[l, d], 1.0)];
        let r = randn(rng, &[c, d], 1.0);
        let neighbors = {
            let mut tape = Tape::new();
            let b = store.bind_frozen(&mut tape);
            let tc = tape.constant(inputs[0].clone());
            let tp = tape.constant(inputs[1].clone());
            gcr_forward(&mut tape, &b, &params, tc, tp, k, None)?.neighbors
        };
        fd_worst(&store, &inputs, None, rng, perturb, |t, b, v| {
            let g = gcr_forward(t, b, &params, v[0], v[1], k, Some(&neighbors))?;
            probe(t, g.output, &r)
        })
    }));

    out.push(grad_check("grad.encoder", opts, 4, n, |rng| {
        let c = rng.gen_range(2..=3);
        let cfg = tiny_encoder(rng, c);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&cfg, &mut store, rng)?;
        randomize(&mut store, rng, 0.3);
        let inputs = [uniform(rng, &[3, 8, 8])];
        let (l, d) = (cfg.num_patches(), cfg.embed_dim);
        let r1 = randn(rng, &[c, d], 1.0);
        let r2 = randn(rng, &[l, d], 1.0);
        fd_worst(&store, &inputs, Some(150), rng, perturb, |t, b, v| {
            let tok = enc.encode(t, b, v[0])?;
            let a = probe(t, tok.class_tokens, &r1)?;
            let p = probe(t, tok.patch_tokens, &r2)?;
            t.add(a, p)
        })
    }));

    out.push(grad_check("grad.encoder_image_16x16", opts, 5, n, |rng| {
        let cfg = EncoderConfig {
            image_height: 16,
            image_width: 16,
            patch_size: 4,
            embed_dim: 8,
            depth: 1,
            num_heads: 2,
            num_classes: 2,
            mlp_ratio: 2,
        };
        let mut store = ParamStore::new();
        let enc = Encoder::new(&cfg, &mut store, rng)?;
        randomize(&mut store, rng, 0.3);
        let frozen = store.clone();
        let inputs = [uniform(rng, &[3, 16, 16])];
        // parameters are held fixed: only the image gradient is checked
        let none = ParamStore::new();
        fd_worst(&none, &inputs, Some(100), rng, perturb, |t, _, v| {
            let b = frozen.bind_frozen(t);
            let tok = enc.encode(t, &b, v[0])?;
            Ok(t.mean(tok.class_tokens))
        })
    }));

    out.push(grad_check("grad.decoder", opts, 6, n, |rng| {
        let (c, nh, nw, d) = small_dims(rng);
        let hidden = rng.gen_range(2..=8);
        let mut store = ParamStore::new();
        let dec = Decoder {
            fc1: Linear::new(&mut store, rng, "fc1", d, hidden, 1.0),
            fc2: Linear::new(&mut store, rng, "fc2", hidden, c + 1, 1.0),
        };
        randomize(&mut store, rng, PARAM_STD);
        let target = random_grid(rng, nh, nw, c as u8);
        let inputs = [randn(rng, &[nh * nw, d], 1.0)];
        fd_worst(&store, &inputs, None, rng, perturb, |t, b, v| {
            let logits = dec.forward(t, b, v[0])?;
            seg_loss(t, logits, &target)
        })
    }));

    out.push(grad_check("grad.total_loss", opts, 7, n, |rng| {
        let c = 3;
        let cfg = ModelConfig {
            encoder: tiny_encoder(rng, c),
            decoder_hidden: 8,
            ..ModelConfig::default()
        };
        let (model, mut store) = Model::init(&cfg, rng.gen())?;
        randomize(&mut store, rng, 0.3);
        let batch: Vec<(Tensor, Vec<bool>)> = (0..2)
            .map(|_| (uniform(rng, &[3, 8, 8]), random_present(rng, c)))
            .collect();
        let w = LossWeights::default();
        let decisions = {
            let mut tape = Tape::new();
            let b = store.bind_frozen(&mut tape);
            batch_objective(&mut tape, &b, &model, &batch, &w, true, None)?.1
        };
        fd_worst(&store, &[], Some(150), rng, perturb, |t, b, _| {
            Ok(batch_objective(t, b, &model, &batch, &w, true, Some(&decisions))?.0.total)
        })
    }));

    out.push(run("grad.primitives", || {
        let mut rng = rng_for(opts, 8);
        let a = randn(&mut rng, &[5, 7], 1.0);
        let bm = randn(&mut rng, &[7, 3], 1.0);
        let mut tape = Tape::new();
        let av = tape.param(a.clone());
        let bv = tape.constant(bm.clone());
        let y = tape.matmul(av, bv)?;
        let s = tape.sum(y);
        let g = tape.backward(s)?;
        let ga = g.get(av).expect("leaf");
        let mut worst: f64 = 0.0;
        for i in 0..5 {
            for k in 0..7 {
                let expect: f64 = bm.row(k).iter().sum();
                worst = worst.max((ga.at2(i, k) - expect).abs());
            }
        }
        let mm = fd_worst(&empty, &[a], None, &mut rng, perturb, |t, _, v| {
            let b = t.constant(bm.clone());
            let y = t.matmul(v[0], b)?;
            Ok(t.sum(y))
        })?;
        let th = fd_worst(&empty, &[Tensor::scalar(0.3)], None, &mut rng, perturb, |t, _, v| Ok(t.tanh(v[0])))?;
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.3));
        let y = tape.tanh(x);
        let gt = tape.backward(y)?.get(x).expect("leaf").item();
        let tanh_err = (gt - (1.0 - 0.3f64.tanh().powi(2))).abs();
        let logits = randn(&mut rng, &[4, 5], 2.0);
        let target = random_grid(&mut rng, 2, 2, 4);
        let ce = fd_worst(&empty, &[logits], None, &mut rng, perturb, |t, _, v| seg_loss(t, v[0], &target))?;
        let sm = crate::tensor::softmax(&Tensor::vector(vec![2f64.ln(), 0.0]), 0)?;
        let sm_err = (sm.data()[0] - 2.0 / 3.0).abs().max((sm.data()[1] - 1.0 / 3.0).abs());
        let cos_err = (cosine(&[1.0, 1.0], &[1.0, 0.0]) - 0.5f64.sqrt()).abs();
        let (mm, th, ce) = (mm.err, th.err, ce.err);
        let ok = worst < 1e-12
            && mm <= GRAD_TOL
            && th <= GRAD_TOL
            && tanh_err < 1e-12
            && ce < 1e-5
            && sm_err < 1e-12
            && cos_err < 1e-8;
        Ok((
            ok,
            format!("matmul {mm:.1e}, tanh {th:.1e}, softmax-ce {ce:.1e}, closed forms {:.1e}", worst.max(tanh_err).max(sm_err)),
        ))
    }));
    out
}

/// Descending indices, ties to the lowest index, by repeated selection.
fn naive_topk(v: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; v.len()];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best = usize::MAX;
        for j in 0..v.len() {
            if !taken[j] && (best == usize::MAX || v[j] > v[best]) {
                best = j;
            }
        }
        taken[best] = true;
        out.push(best);
    }
    out
}

fn naive_softmax(v: &[f64]) -> Vec<f64> {
    let z: f64 = v.iter().map(|x| x.exp()).sum();
    v.iter().map(|x| x.exp() / z).collect()
}

fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    (0..x.rows())
        .map(|i| {
            (0..w.cols())
                .map(|k| b.data()[k] + (0..x.cols()).map(|d| x.at2(i, d) * w.at2(d, k)).sum::<f64>())
                .collect()
        })
        .collect()
}

fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
    let data: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::new(&[rows.len(), rows[0].len()], data).expect("rectangular")
}

fn lrelu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

/// Loop evaluation of the graph pass; returns neighbors and the flat
/// relations, edges, weights, aggregate and output.
fn naive_gcr(store: &ParamStore, p: &GcrParams, t: &Tensor, patches: &Tensor, k: usize) -> (Vec<Vec<usize>>, [Vec<f64>; 5]) {
    let g = |id| store.get(id);
    let heads = affine(t, g(p.head.weight), g(p.head.bias));
    let tails = affine(patches, g(p.tail.weight), g(p.tail.bias));
    let d = heads[0].len();
    let mut neighbors = Vec::new();
    let (mut rel, mut edges, mut weights, mut aggs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for h in &heads {
        let scores: Vec<f64> = tails.iter().map(|tj| (0..d).map(|e| h[e] * tj[e]).sum()).collect();
        let idx = naive_topk(&scores, k);
        let r = naive_softmax(&idx.iter().map(|&j| scores[j]).collect::<Vec<_>>());
        let mut logits = Vec::new();
        for (jj, &j) in idx.iter().enumerate() {
            let mut logit = 0.0;
            for e in 0..d {
                let edge = r[jj] * tails[j][e] + (1.0 - r[jj]) * h[e];
                edges.push(edge);
                logit += tails[j][e] * (h[e] + edge).tanh();
            }
            logits.push(logit);
        }
        let s = naive_softmax(&logits);
        let a: Vec<f64> = (0..d).map(|e| idx.iter().zip(&s).map(|(&j, w)| w * tails[j][e]).sum()).collect();
        rel.extend(&r);
        weights.extend(&s);
        aggs.push(a);
        neighbors.push(idx);
    }
    let sum: Vec<Vec<f64>> = heads.iter().zip(&aggs).map(|(h, a)| h.iter().zip(a).map(|(x, y)| x + y).collect()).collect();
    let prod: Vec<Vec<f64>> = heads.iter().zip(&aggs).map(|(h, a)| h.iter().zip(a).map(|(x, y)| x * y).collect()).collect();
    let x1 = affine(&to_tensor(&sum), g(p.w1.weight), g(p.w1.bias));
    let x2 = affine(&to_tensor(&prod), g(p.w2.weight), g(p.w2.bias));
    let q: Vec<f64> = x1.iter().flatten().zip(x2.iter().flatten()).map(|(&a, &b)| lrelu(a) + lrelu(b)).collect();
    let agg: Vec<f64> = aggs.into_iter().flatten().collect();
    (neighbors, [rel, edges, weights, agg, q])
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Window sum by direct iteration over in-bounds cells.
fn brute_kernel(maps: &RelationMaps, d: usize, phi: f64) -> Vec<(usize, usize)> {
    let (h, w) = (maps.confident.height, maps.confident.width);
    let r = (d / 2) as isize;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if maps.uncertain.get(y, x) != 1 {
                continue;
            }
            let mut score = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    let (yy, xx) = (yy as usize, xx as usize);
                    if maps.confident.get(yy, xx) > 0 {
                        score += 2.0;
                    }
                    if maps.uncertain.get(yy, xx) == 1 {
                        score += 1.0;
                    }
                }
            }
            if score / (d * d) as f64 > phi {
                out.push((y, x));
            }
        }
    }
    out
}

fn naive_normalize(raw: &[Vec<f64>], present: &[bool]) -> Vec<f64> {
    let (l, c) = (raw.len(), present.len());
    let mut out = vec![0.0; l * c];
    for k in (0..c).filter(|&k| present[k]) {
        let lo = raw.iter().map(|r| r[k]).fold(f64::INFINITY, f64::min);
        let hi = raw.iter().map(|r| r[k]).fold(f64::NEG_INFINITY, f64::max);
        for j in 0..l {
            out[j * c + k] = if hi - lo > 1e-9 {
                (raw[j][k] - lo) / (hi - lo)
            } else {
                raw[j][k].clamp(0.0, 1.0)
            };
        }
    }
    out
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ActivationMap {
    ActivationMap {
        scores: uniform(rng, &[h, w, c]),
        kind: MapKind::Cam,
    }
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).item()
}

pub fn oracle_checks(opts: &VerifyOptions) -> Vec<Check> {
    let mut out = Vec::new();

    out.push(run("oracle.topk_vs_sort", || {
        let mut rng = rng_for(opts, 20);
        for _ in 0..200 {
            let n = rng.gen_range(1..=100);
            // coarse values force ties
            let v: Vec<f64> = (0..n).map(|_| (rng.gen_range(-20..20) as f64) / 4.0).collect();
            let k = rng.gen_range(1..=n);
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::vector(v.clone()));
            let (vals, idx) = tape.topk(x, k)?;
            let mut sorted: Vec<usize> = (0..n).collect();
            sorted.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).expect("finite").then(a.cmp(&b)));
            sorted.truncate(k);
            let expect_vals: Vec<f64> = sorted.iter().map(|&j| v[j]).collect();
            if idx != sorted || idx != naive_topk(&v, k) || tape.value(vals).data() != expect_vals.as_slice() {
                return Ok((false, format!("mismatch for n={n} k={k}")));
            }
        }
        Ok((true, "200 vectors, exact indices".into()))
    }));

    out.push(run("oracle.select_neighbors", || {
        let mut rng = rng_for(opts, 21);
        let mut worst: f64 = 0.0;
        for _ in 0..200 {
            let (_, nh, nw, d) = small_dims(&mut rng);
            let l = nh * nw;
            let k = rng.gen_range(1..=l);
            let h = randn(&mut rng, &[1, d], 1.0);
            let tails = randn(&mut rng, &[l, d], 1.0);
            let mut tape = Tape::new();
            let hv = tape.constant(h.clone());
            let tv = tape.constant(tails.clone());
            let (r, idx) = select_neighbors(&mut tape, hv, tv, k, None)?;
            let scores: Vec<f64> = (0..l).map(|j| (0..d).map(|e| h.data()[e] * tails.at2(j, e)).sum()).collect();
            let mut order: Vec<usize> = (0..l).collect();
            order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite").then(a.cmp(&b)));
            order.truncate(k);
            if idx != order {
                return Ok((false, format!("index mismatch {idx:?} vs {order:?}")));
            }
            let expect = naive_softmax(&order.iter().map(|&j| scores[j]).collect::<Vec<_>>());
            worst = worst.max(max_diff(tape.value(r).data(), &expect));
        }
        Ok((worst <= 1e-12, format!("200 instances, exact indices, max diff {worst:.1e}")))
    }));

    out.push(run("oracle.gcr_pipeline", || {
        let mut rng = rng_for(opts, 22);
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let (c, nh, nw, d) = small_dims(&mut rng);
            let l = nh * nw;
            let k = rng.gen_range(1..=l);
            let mut store = ParamStore::new();
            let params = GcrParams::new(&mut store, &mut rng, d);
            randomize(&mut store, &mut rng, PARAM_STD);
            let t = randn(&mut rng, &[c, d], 1.0);
            let p = randn(&mut rng, &[l, d], 1.0);
            let mut tape = Tape::new();
            let b = store.bind_frozen(&mut tape);
            let tv = tape.constant(t.clone());
            let pv = tape.constant(p.clone());
            let g = gcr_forward(&mut tape, &b, &params, tv, pv, k, None)?;
            let state = GraphCategoryState::from_tape(&tape, &g);
            let (nb, [rel, edges, weights, agg, q]) = naive_gcr(&store, &params, &t, &p, k);
            if nb != state.neighbors {
                return Ok((false, "neighbor sets differ".into()));
            }
            for (got, want) in [
                (&state.relations, &rel),
                (&state.edges, &edges),
                (&state.weights, &weights),
                (&state.aggregate, &agg),
                (&state.output, &q),
            ] {
                worst = worst.max(max_diff(got.data(), want));
            }
        }
        Ok((worst <= 1e-12, format!("50 instances, max diff {worst:.1e}")))
    }));

    out.push(run("oracle.kernel_search", || {
        let mut rng = rng_for(opts, 23);
        for i in 0..200 {
            let data = (0..64)
                .map(|_| match rng.gen_range(0..3) {
                    0 => BACKGROUND,
                    1 => UNCERTAIN,
                    _ => rng.gen_range(1..=3),
                })
                .collect();
            let mask = crate::cam::ReliabilityMask {
                labels: LabelGrid::new(8, 8, data)?,
                low: 0.25,
                high: 0.7,
            };
            let maps = split_relations(&mask);
            let d = [1, 3, 5][i % 3];
            let phi = if i % 2 == 0 { 1.2 } else { rng.gen_range(0.2..2.0) };
            let got = kernel_search(&maps, d, phi)?.members;
            if got != brute_kernel(&maps, d, phi) {
                return Ok((false, format!("pair {i} differs (d={d}, phi={phi})")));
            }
        }
        Ok((true, "200 mask pairs, identical sets".into()))
    }));

    out.push(run("oracle.cre_ure_loops", || {
        let mut rng = rng_for(opts, 24);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let (c, nh, nw, d) = small_dims(&mut rng);
            let l = nh * nw;
            let present = random_present(&mut rng, c);
            let conf = random_grid(&mut rng, nh, nw, c as u8);
            let q = randn(&mut rng, &[c, d], 1.0);
            let p = randn(&mut rng, &[l, d], 1.0);
            let tau = 0.1;
            let members: Vec<(usize, usize)> =
                (0..l).filter(|_| rng.gen_bool(0.3)).map(|j| (j / nw, j % nw)).collect();
            let sel = UncertainSet { members };
            let mut tape = Tape::new();
            let qv = tape.constant(q.clone());
            let pv = tape.constant(p.clone());
            let cre = cre_loss(&mut tape, qv, pv, &conf, &present, tau)?;
            let ure = ure_loss(&mut tape, qv, pv, &sel, nw, &present)?;

            let (mut sum, mut count) = (0.0, 0usize);
            for j in 0..l {
                let v = conf.data[j] as usize;
                if v == 0 || !present[v - 1] {
                    continue;
                }
                let row = q.row(v - 1);
                let z: f64 = (0..l).map(|jj| (cosine(row, p.row(jj)) / tau).exp()).sum();
                sum += -(cosine(row, p.row(j)) / tau - z.ln());
                count += 1;
            }
            let cre_loop = if count == 0 { 0.0 } else { sum / count as f64 };

            let mut ure_loop = 0.0;
            if !sel.is_empty() {
                let n = sel.len() as f64;
                let (pos, neg): (Vec<usize>, Vec<usize>) = (0..c).partition(|&k| present[k]);
                let mean = |ks: &[usize]| -> f64 {
                    let mut s = 0.0;
                    for &k in ks {
                        for &(y, x) in &sel.members {
                            s += cosine(q.row(k), p.row(y * nw + x));
                        }
                    }
                    s / (ks.len() as f64 * n)
                };
                if !pos.is_empty() {
                    ure_loop += 1.0 - mean(&pos);
                }
                if !neg.is_empty() {
                    ure_loop += mean(&neg);
                }
            }
            worst = worst
                .max((scalar(&tape, cre) - cre_loop).abs())
                .max((scalar(&tape, ure) - ure_loop).abs());
        }
        Ok((worst <= 1e-10, format!("100 instances, max diff {worst:.1e}")))
    }));

    out.push(run("oracle.cam_lam_loops", || {
        let mut rng = rng_for(opts, 25);
        let mut worst_lam: f64 = 0.0;
        for _ in 0..100 {
            let (c, nh, nw, d) = small_dims(&mut rng);
            let l = nh * nw;
            let present = random_present(&mut rng, c);
            let p = randn(&mut rng, &[l, d], 1.0);
            let w = randn(&mut rng, &[d, c], 1.0);
            let q = randn(&mut rng, &[c, d], 1.0);
            let cam = compute_cam(&p, &w, (nh, nw), &present)?;
            let raw: Vec<Vec<f64>> = (0..l)
                .map(|j| (0..c).map(|k| (0..d).map(|e| p.at2(j, e) * w.at2(e, k)).sum()).collect())
                .collect();
            if cam.scores.data() != naive_normalize(&raw, &present).as_slice() {
                return Ok((false, "CAM differs from loop".into()));
            }
            let lam = compute_lam(&q, &p, (nh, nw), &present)?;
            let raw: Vec<Vec<f64>> = (0..l).map(|j| (0..c).map(|k| cosine(q.row(k), p.row(j))).collect()).collect();
            worst_lam = worst_lam.max(max_diff(lam.scores.data(), &naive_normalize(&raw, &present)));
        }
        Ok((worst_lam <= 1e-12, format!("100 instances, CAM exact, LAM max diff {worst_lam:.1e}")))
    }));

    out.push(run("oracle.loss_loops", || {
        let mut rng = rng_for(opts, 26);
        let mut worst: f64 = 0.0;
        let w = LossWeights::default();
        for _ in 0..100 {
            let c = 3;
            let z = randn(&mut rng, &[1, c], 2.0);
            let y: Vec<f64> = (0..c).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect();
            let q = randn(&mut rng, &[c, 4], 1.0);
            let logits = randn(&mut rng, &[16, c + 1], 2.0);
            let target = random_grid(&mut rng, 4, 4, c as u8);
            let mut tape = Tape::new();
            let zv = tape.constant(z.clone());
            let qv = tape.constant(q.clone());
            let lv = tape.constant(logits.clone());
            let cls = cls_loss(&mut tape, zv, &y)?;
            let (mct, _) = mct_loss(&mut tape, qv, None)?;
            let seg = seg_loss(&mut tape, lv, &target)?;

            let ls = |x: f64| -(1.0 + (-x).exp()).ln();
            let cls_loop = (0..c)
                .map(|k| -(y[k] * ls(z.data()[k]) + (1.0 - y[k]) * ls(-z.data()[k])))
                .sum::<f64>()
                / c as f64;
            let mut pairs = 0.0;
            for i in 0..c {
                for j in i + 1..c {
                    pairs += cosine(q.row(i), q.row(j)).max(0.0);
                }
            }
            let mct_loop = pairs / (c * (c - 1) / 2) as f64;
            let seg_loop = (0..16)
                .map(|j| {
                    let r = logits.row(j);
                    r.iter().map(|v| v.exp()).sum::<f64>().ln() - r[target.data[j] as usize]
                })
                .sum::<f64>()
                / 16.0;
            worst = worst
                .max((scalar(&tape, cls) - cls_loop).abs())
                .max((scalar(&tape, mct) - mct_loop).abs())
                .max((scalar(&tape, seg) - seg_loop).abs());

            let parts: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let (more, total) = total_loss(parts[0], parts[1], parts[2], parts[3], parts[4], &w);
            let hand = parts[0] + parts[1] + w.alpha * parts[2] + w.beta * parts[3];
            if more != hand || total != hand + w.gamma * parts[4] {
                return Ok((false, "total_loss differs from the hand formula".into()));
            }
        }
        Ok((worst <= 1e-12, format!("100 instances, max diff {worst:.1e}, total exact")))
    }));

    out.push(run("oracle.threshold_partition", || {
        let mut rng = rng_for(opts, 27);
        for i in 0..500 {
            let (c, h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=8), rng.gen_range(1..=8));
            let map = random_map(&mut rng, h, w, c);
            let low = rng.gen_range(0.05..0.5);
            let high = rng.gen_range(low + 0.01..0.95);
            let m = multi_threshold_filter(&map, low, high)?;
            for y in 0..h {
                for x in 0..w {
                    let px = map.pixel(y, x);
                    let max = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let first = px.iter().position(|&v| v == max).expect("max") as u8 + 1;
                    let want = if max > high {
                        first
                    } else if max < low {
                        BACKGROUND
                    } else {
                        UNCERTAIN
                    };
                    if m.labels.get(y, x) != want {
                        return Ok((false, format!("map {i} pixel ({y},{x}) labelled {}", m.labels.get(y, x))));
                    }
                }
            }
            let higher = multi_threshold_filter(&map, low, rng.gen_range(high..0.999))?;
            let lower = multi_threshold_filter(&map, rng.gen_range(0.001..=low), high)?;
            for j in 0..h * w {
                let fg = |v: u8| v != BACKGROUND && v != UNCERTAIN;
                if fg(higher.labels.data[j]) && !fg(m.labels.data[j]) {
                    return Ok((false, format!("map {i}: raising the high threshold added foreground")));
                }
                if lower.labels.data[j] == BACKGROUND && m.labels.data[j] != BACKGROUND {
                    return Ok((false, format!("map {i}: lowering the low threshold added background")));
                }
            }
        }
        Ok((true, "500 maps, partition and monotonicity hold".into()))
    }));

    out.push(run("oracle.loss_anchors", || {
        let mut worst: f64 = 0.0;
        for (c, l) in [(2, 9), (3, 16), (1, 4)] {
            let mut tape = Tape::new();
            let q = tape.constant(Tensor::zeros(&[c, 4]));
            let p = tape.constant(Tensor::ones(&[l, 4]));
            let conf = LabelGrid::new(1, l, vec![1; l])?;
            let present = vec![true; c];
            let cre = cre_loss(&mut tape, q, p, &conf, &present, 0.1)?;
            worst = worst.max((scalar(&tape, cre) - (l as f64).ln()).abs());
            let logits = tape.constant(Tensor::zeros(&[l, c + 1]));
            let target = LabelGrid::new(1, l, (0..l).map(|j| (j % (c + 1)) as u8).collect())?;
            let seg = seg_loss(&mut tape, logits, &target)?;
            worst = worst.max((scalar(&tape, seg) - ((c + 1) as f64).ln()).abs());
            let z = tape.constant(Tensor::zeros(&[1, c]));
            let y: Vec<f64> = (0..c).map(|k| (k % 2) as f64).collect();
            let cls = cls_loss(&mut tape, z, &y)?;
            worst = worst.max((scalar(&tape, cls) - 2f64.ln()).abs());
        }
        Ok((worst <= 1e-9, format!("max deviation {worst:.1e}")))
    }));

    out.push(run("oracle.metrics_hand_cases", || {
        let gt = LabelGrid::new(2, 2, vec![1, 1, 0, 0])?;
        let pred = LabelGrid::filled(2, 2, 0);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &gt)?;
        let (_, miou) = cm.miou();
        let mut two = ConfusionMatrix::new(2);
        let gt = LabelGrid::new(1, 8, vec![1, 1, 1, 1, 1, 1, 0, 0])?;
        let pred = LabelGrid::new(1, 8, vec![1, 1, 1, 1, 0, 0, 1, 1])?;
        two.accumulate(&pred, &gt)?;
        let (ious, _) = two.miou();
        let ratio = two.confusion_ratio(1);
        let ok = miou == Metric::Value(0.25) && ious[1] == Some(0.5) && ratio == Metric::Value(0.5);
        Ok((ok, format!("mIoU {miou:?}, IoU1 {:?}, ratio {ratio:?}", ious[1])))
    }));

    out.push(run("oracle.encoder_param_count", || {
        let cfg = EncoderConfig::default();
        let (_, store) = crate::encoder::init_params(&cfg, 0)?;
        let (d, l, c, h) = (32, 64, 3, 32 * cfg.mlp_ratio);
        let block = 4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d);
        let want = 192 * d + d + l * d + c * d + cfg.depth * block;
        Ok((store.count() == want, format!("{} parameters, formula {want}", store.count())))
    }));

    out
}

/// Every check, gradients first.
pub fn run_all(opts: &VerifyOptions) -> Vec<Check> {
    let mut all = gradient_checks(opts);
    all.extend(oracle_checks(opts));
    all
}

/// Maps a failed suite to an error naming the first failing check.
pub fn require_all(checks: &[Check]) -> Result<()> {
    match checks.iter().find(|c| !c.passed) {
        Some(c) => Err(Error::Numeric(format!("check {} failed: {}", c.name, c.detail))),
        None => Ok(()),
    }
}
