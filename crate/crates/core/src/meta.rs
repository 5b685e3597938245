//! Meta-learned dropout ratios.
//!
//! One meta step: draw a meta-train subset of the batch, build GSNR candidate
//! masks with differentiable gates phi(u + p), take an inner Meta-SGD-style
//! update theta' = theta - alpha .* g, pick the remainder examples farthest
//! from the meta-train set in logit L2 distance as meta-test, and update
//! (theta, alpha, p) by one SGD step on gamma * L_mtr + (1 - gamma) * L_mte.
//! The inner gradient g is a constant in the outer graph (first-order); a
//! config flag adds a finite-difference Hessian-vector correction.

use crate::error::{Error, Result};
use crate::masking::{candidate_count, candidate_mask, norm_factor, soft_gate, topk_threshold, Criterion};
use crate::network::{Batch, BlockNet, Mask};
use crate::rng::{stream_rng, Purpose, StreamKey};
use crate::tape::{hard_sigmoid, Tape};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Initial value for every entry of alpha.
    pub alpha_init: f64,
    /// Initial per-block dropout ratio.
    pub p_init: f64,
    /// Outer learning rate.
    pub beta: f64,
    /// Loss mix weight: gamma * L_mtr + (1 - gamma) * L_mte.
    pub gamma: f64,
    /// Fraction of the batch used as meta-train.
    pub mtr_fraction: f64,
    /// Number of meta-test examples.
    pub k_mte: usize,
    /// Fraction of units per block considered drop candidates.
    pub candidate_fraction: f64,
    /// Propagate the inner gradient's curvature via a finite-difference
    /// Hessian-vector product instead of freezing g.
    pub second_order: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            alpha_init: 0.004,
            p_init: 0.5,
            beta: 0.001,
            gamma: 0.5,
            mtr_fraction: 0.5,
            k_mte: 16,
            candidate_fraction: 1.0 / 3.0,
            second_order: false,
        }
    }
}

/// Learner parameters plus the meta-learned quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaState {
    pub net: BlockNet,
    /// Per-parameter inner learning rates, shapes mirroring the parameters.
    pub alpha: Vec<Tensor>,
    /// One dropout ratio per block.
    pub p_per_block: Vec<f64>,
    pub cfg: MetaConfig,
}

impl MetaState {
    pub fn new(net: BlockNet, cfg: MetaConfig) -> Result<MetaState> {
        if !(0.0..=1.0).contains(&cfg.gamma) {
            return Err(Error::Config {
                field: "gamma".into(),
                detail: format!("{} outside [0,1]", cfg.gamma),
            });
        }
        if !(cfg.mtr_fraction > 0.0 && cfg.mtr_fraction < 1.0) {
            return Err(Error::Config {
                field: "mtr_fraction".into(),
                detail: format!("{} outside (0,1)", cfg.mtr_fraction),
            });
        }
        if cfg.k_mte == 0 {
            return Err(Error::Config {
                field: "k_mte".into(),
                detail: "must be >= 1".into(),
            });
        }
        if !(cfg.candidate_fraction > 0.0 && cfg.candidate_fraction <= 1.0) {
            return Err(Error::Config {
                field: "candidate_fraction".into(),
                detail: format!("{} outside (0,1]", cfg.candidate_fraction),
            });
        }
        let alpha = net
            .params()
            .iter()
            .map(|(_, t)| Tensor::filled(t.shape().to_vec(), cfg.alpha_init))
            .collect();
        let p_per_block = vec![cfg.p_init; net.cfg.num_blocks()];
        Ok(MetaState {
            net,
            alpha,
            p_per_block,
            cfg,
        })
    }
}

/// Everything random about one meta step, captured so the step (or any loss
/// evaluation inside it) can be replayed at a different p.
#[derive(Debug, Clone)]
pub struct FrozenStep {
    pub mtr_idx: Vec<usize>,
    pub rem_idx: Vec<usize>,
    pub mte_idx: Vec<usize>,
    /// Per-block binary drop-candidate masks from the GSNR scores.
    pub m1: Vec<Tensor>,
    /// Per-block uniform gate noise u in [-1, 1].
    pub u: Vec<Tensor>,
}

/// Per-step metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepReport {
    pub loss_mtr: f64,
    pub loss_mte: f64,
    pub loss_combined: f64,
    /// Updated ratios after the outer step.
    pub p_per_block: Vec<f64>,
    /// Fraction of units per block with keep < 1.
    pub drop_fractions: Vec<f64>,
    pub grad_p_norm: f64,
}

/// Outer gradients for (theta, alpha, p).
pub struct OuterGrads {
    pub theta: Vec<Tensor>,
    pub alpha: Vec<Tensor>,
    pub p: Vec<f64>,
}

/// Seeded disjoint split of the batch indices into meta-train and remainder.
/// Both sides are returned in ascending index order.
pub fn split_meta_train(
    batch: &Batch,
    fraction: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = batch.len();
    let n_mtr = (fraction * n as f64).floor() as usize;
    if n_mtr == 0 || n_mtr >= n {
        return Err(Error::InvalidArg(format!(
            "meta-train fraction {} leaves an empty side of a {}-example batch",
            fraction, n
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut mtr = idx[..n_mtr].to_vec();
    let mut rem = idx[n_mtr..].to_vec();
    mtr.sort_unstable();
    rem.sort_unstable();
    Ok((mtr, rem))
}

/// The k remainder examples whose max-over-meta-train logit L2 distance is
/// largest; ties broken toward the lower example index.
pub fn construct_meta_test(
    remainder: &[usize],
    mtr: &[usize],
    logits_all: &[Vec<f64>],
    k: usize,
) -> Result<Vec<usize>> {
    if k == 0 || k > remainder.len() {
        return Err(Error::InvalidArg(format!(
            "meta-test size {} out of range for {} remainder examples",
            k,
            remainder.len()
        )));
    }
    let dist = |a: usize, b: usize| -> f64 {
        logits_all[a]
            .iter()
            .zip(&logits_all[b])
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let mut scored: Vec<(f64, usize)> = remainder
        .iter()
        .map(|&m| {
            let d = mtr
                .iter()
                .map(|&j| dist(m, j))
                .fold(f64::NEG_INFINITY, f64::max);
            (d, m)
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(scored[..k].iter().map(|&(_, i)| i).collect())
}

/// theta - alpha .* g, elementwise; inputs untouched.
pub fn inner_update(theta: &[Tensor], grads: &[Tensor], alpha: &[Tensor]) -> Result<Vec<Tensor>> {
    if theta.len() != grads.len() || theta.len() != alpha.len() {
        return Err(Error::shape("inner_update", "tensor-list lengths differ"));
    }
    theta
        .iter()
        .zip(grads)
        .zip(alpha)
        .map(|((t, g), a)| {
            let ag = a.zip(g, |av, gv| av * gv)?;
            t.zip(&ag, |tv, v| tv - v)
        })
        .collect()
}

/// gamma * l_mtr + (1 - gamma) * l_mte.
pub fn combined_loss(l_mtr: f64, l_mte: f64, gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArg(format!("gamma {} outside [0,1]", gamma)));
    }
    Ok(gamma * l_mtr + (1.0 - gamma) * l_mte)
}

/// Per-block keep masks 1 - m1 .* phi(u + p) plus their normalization
/// factors.
pub fn keeps_for(frozen: &FrozenStep, p: &[f64]) -> Result<(Vec<Tensor>, Vec<f64>)> {
    let mut keeps = Vec::with_capacity(frozen.m1.len());
    let mut factors = Vec::with_capacity(frozen.m1.len());
    for (b, (m1, u)) in frozen.m1.iter().zip(&frozen.u).enumerate() {
        let pb = p[b];
        let keep = m1.zip(u, move |m, uv| 1.0 - m * hard_sigmoid(uv + pb))?;
        factors.push(norm_factor(&keep)?);
        keeps.push(keep);
    }
    Ok((keeps, factors))
}

/// Capture the step's randomness: the batch split, the GSNR candidate masks
/// on the meta-train subset, the gate noise, and the meta-test selection.
pub fn prepare_step(
    state: &MetaState,
    batch: &Batch,
    seed: u64,
    epoch: u64,
    step: u64,
) -> Result<FrozenStep> {
    let net = &state.net;
    let nb = net.cfg.num_blocks();

    let mut split_rng = stream_rng(StreamKey::new(seed, Purpose::Split).at(epoch, step));
    let (mtr_idx, rem_idx) = split_meta_train(batch, state.cfg.mtr_fraction, &mut split_rng)?;
    if mtr_idx.len() < 2 {
        return Err(Error::BatchTooSmall {
            need: 2,
            got: mtr_idx.len(),
        });
    }
    if state.cfg.k_mte > rem_idx.len() {
        return Err(Error::InvalidArg(format!(
            "k_mte {} exceeds the {} remainder examples",
            state.cfg.k_mte,
            rem_idx.len()
        )));
    }

    // Identity-mask forward on the meta-train subset; one backward keeps the
    // batch axis on activation gradients, which is all GSNR needs.
    let d_mtr = batch.select(&mtr_idx);
    let mut tape = Tape::new();
    let x = tape.constant(d_mtr.images.clone());
    let masks: Vec<Mask> = (0..nb).map(|_| Mask::Identity).collect();
    let trace = net.forward(&mut tape, x, &masks, true)?;
    let loss = tape.softmax_cross_entropy(trace.logits, &d_mtr.labels)?;
    let grads = tape.backward(loss)?;

    let mut m1 = Vec::with_capacity(nb);
    let mut u = Vec::with_capacity(nb);
    for b in 0..nb {
        let shape = net.cfg.block_output_shape(b).to_vec();
        let g = grads.get(trace.block_outputs[b]).ok_or_else(|| {
            Error::InvalidArg(format!("block {} received no activation gradient", b))
        })?;
        let mut score_rng =
            stream_rng(StreamKey::new(seed, Purpose::RandomScore).at(epoch, step).block(b as u64));
        let scores = crate::masking::score(Criterion::Gsnr, Some(g), &shape, &mut score_rng)?;
        let k = candidate_count(state.cfg.candidate_fraction, scores.numel());
        let tau = topk_threshold(scores.data(), k)?;
        m1.push(candidate_mask(&scores, tau)?);
        let mut noise_rng =
            stream_rng(StreamKey::new(seed, Purpose::MaskNoise).at(epoch, step).block(b as u64));
        let (noise, _) = soft_gate(0.0, &shape, &mut noise_rng)?;
        u.push(noise);
    }

    let logits_all = net.logits(batch)?;
    let mte_idx = construct_meta_test(&rem_idx, &mtr_idx, &logits_all, state.cfg.k_mte)?;
    Ok(FrozenStep {
        mtr_idx,
        rem_idx,
        mte_idx,
        m1,
        u,
    })
}

/// Gradient of the masked meta-train loss with respect to the parameters,
/// with the masks fixed at their current values.
pub fn inner_grads(
    net: &BlockNet,
    d_mtr: &Batch,
    keeps: &[Tensor],
    factors: &[f64],
) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let x = tape.constant(d_mtr.images.clone());
    let masks: Vec<Mask> = keeps
        .iter()
        .zip(factors)
        .map(|(k, &f)| Mask::Fixed(k, f))
        .collect();
    let trace = net.forward(&mut tape, x, &masks, true)?;
    let loss = tape.softmax_cross_entropy(trace.logits, &d_mtr.labels)?;
    let mut grads = tape.backward(loss)?;
    Ok(trace
        .param_ids
        .iter()
        .map(|&id| {
            grads
                .take(id)
                .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape().to_vec()))
        })
        .collect())
}

struct Evaluation {
    l_mtr: f64,
    l_mte: f64,
    combined: f64,
    drop_fractions: Vec<f64>,
    grads: Option<(OuterGrads, Vec<Tensor>)>, // outer grads + dL/dtheta'
}

/// Record the whole outer graph on one tape: keep masks as functions of p,
/// the masked meta-train loss at theta, the inner update with g as a
/// constant, and the meta-test loss at theta'.
fn evaluate(
    state: &MetaState,
    batch: &Batch,
    frozen: &FrozenStep,
    p: &[f64],
    g: &[Tensor],
    want_grads: bool,
) -> Result<Evaluation> {
    let net = &state.net;
    let nb = net.cfg.num_blocks();
    let d_mtr = batch.select(&frozen.mtr_idx);
    let d_mte = batch.select(&frozen.mte_idx);

    let mut t = Tape::new();
    let theta = net.param_leaves(&mut t, true);
    let alpha_ids: Vec<_> = state.alpha.iter().map(|a| t.leaf(a.clone(), true)).collect();
    let p_ids: Vec<_> = p.iter().map(|&v| t.leaf(Tensor::scalar(v), true)).collect();

    let mut keep_ids = Vec::with_capacity(nb);
    let mut drop_fractions = Vec::with_capacity(nb);
    for b in 0..nb {
        let shape = net.cfg.block_output_shape(b).to_vec();
        let m1 = t.constant(frozen.m1[b].clone());
        let u = t.constant(frozen.u[b].clone());
        let pb = t.broadcast_scalar(p_ids[b], shape)?;
        let upb = t.add(u, pb)?;
        let phi = t.hard_sigmoid(upb)?;
        let drop = t.mul(m1, phi)?;
        let keep = t.one_minus(drop)?;
        let kv = t.value(keep);
        if kv.sum() == 0.0 {
            return Err(Error::AllDropped);
        }
        drop_fractions
            .push(kv.data().iter().filter(|&&v| v < 1.0).count() as f64 / kv.numel() as f64);
        keep_ids.push(keep);
    }
    let masks: Vec<Mask> = keep_ids.iter().map(|&id| Mask::Node(id)).collect();

    let x_mtr = t.constant(d_mtr.images.clone());
    let tr_mtr = net.forward_from(&mut t, &theta, x_mtr, &masks)?;
    let l_mtr = t.softmax_cross_entropy(tr_mtr.logits, &d_mtr.labels)?;

    let theta_prime: Vec<_> = theta
        .iter()
        .enumerate()
        .map(|(i, &th)| {
            let gi = t.constant(g[i].clone());
            let ag = t.mul(alpha_ids[i], gi)?;
            t.sub(th, ag)
        })
        .collect::<Result<_>>()?;
    let x_mte = t.constant(d_mte.images.clone());
    let tr_mte = net.forward_from(&mut t, &theta_prime, x_mte, &masks)?;
    let l_mte = t.softmax_cross_entropy(tr_mte.logits, &d_mte.labels)?;

    let wa = t.scale(l_mtr, state.cfg.gamma)?;
    let wb = t.scale(l_mte, 1.0 - state.cfg.gamma)?;
    let combined = t.add(wa, wb)?;

    let (l_mtr_v, l_mte_v, combined_v) = (
        t.value(l_mtr).item(),
        t.value(l_mte).item(),
        t.value(combined).item(),
    );

    let grads = if want_grads {
        let mut gr = t.backward(combined)?;
        let take = |gr: &mut crate::tape::Gradients, ids: &[crate::tape::TensorId], t: &Tape| {
            ids.iter()
                .map(|&id| {
                    gr.take(id)
                        .unwrap_or_else(|| Tensor::zeros(t.value(id).shape().to_vec()))
                })
                .collect::<Vec<Tensor>>()
        };
        let gtheta = take(&mut gr, &theta, &t);
        let galpha = take(&mut gr, &alpha_ids, &t);
        let gp: Vec<f64> = p_ids
            .iter()
            .map(|&id| gr.take(id).map(|g| g.item()).unwrap_or(0.0))
            .collect();
        let gtheta_prime = take(&mut gr, &theta_prime, &t);
        Some((
            OuterGrads {
                theta: gtheta,
                alpha: galpha,
                p: gp,
            },
            gtheta_prime,
        ))
    } else {
        None
    };

    Ok(Evaluation {
        l_mtr: l_mtr_v,
        l_mte: l_mte_v,
        combined: combined_v,
        drop_fractions,
        grads,
    })
}

/// The combined loss at dropout ratios `p` with the step's randomness and the
/// inner gradient both held fixed. This is the function whose p-gradient the
/// (first-order) outer step computes.
pub fn combined_loss_at(
    state: &MetaState,
    batch: &Batch,
    frozen: &FrozenStep,
    p: &[f64],
    g: &[Tensor],
) -> Result<(f64, f64, f64)> {
    let ev = evaluate(state, batch, frozen, p, g, false)?;
    Ok((ev.l_mtr, ev.l_mte, ev.combined))
}

/// Outer gradients at the current state. With `second_order` set, the
/// gradient with respect to theta additionally carries the curvature term
/// -H_mtr (alpha .* dL/dtheta') estimated by central-difference
/// Hessian-vector products; the dependence of g on p stays first-order.
pub fn outer_gradients(
    state: &MetaState,
    batch: &Batch,
    frozen: &FrozenStep,
    p: &[f64],
) -> Result<(OuterGrads, StepReport)> {
    let (keeps, factors) = keeps_for(frozen, p)?;
    let d_mtr = batch.select(&frozen.mtr_idx);
    let g = inner_grads(&state.net, &d_mtr, &keeps, &factors)?;
    let ev = evaluate(state, batch, frozen, p, &g, true)?;
    let (mut grads, gtheta_prime) = ev.grads.unwrap();

    if state.cfg.second_order {
        let v: Vec<Tensor> = state
            .alpha
            .iter()
            .zip(&gtheta_prime)
            .map(|(a, gp)| a.zip(gp, |av, gv| av * gv))
            .collect::<Result<_>>()?;
        let vnorm: f64 = v.iter().map(|t| t.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        if vnorm > 0.0 {
            let eps = 1e-4 / vnorm;
            let shifted = |sign: f64| -> Result<Vec<Tensor>> {
                let mut net = state.net.clone();
                let values: Vec<Tensor> = net
                    .params()
                    .iter()
                    .zip(&v)
                    .map(|((_, t), vi)| t.zip(vi, |tv, vv| tv + sign * eps * vv))
                    .collect::<Result<_>>()?;
                net.set_params(values)?;
                inner_grads(&net, &d_mtr, &keeps, &factors)
            };
            let g_plus = shifted(1.0)?;
            let g_minus = shifted(-1.0)?;
            for ((gt, gp), gm) in grads.theta.iter_mut().zip(&g_plus).zip(&g_minus) {
                let d = gt.data_mut();
                for ((x, &a), &b) in d.iter_mut().zip(gp.data()).zip(gm.data()) {
                    *x -= (a - b) / (2.0 * eps);
                }
            }
        }
    }

    let grad_p_norm = grads.p.iter().map(|v| v * v).sum::<f64>().sqrt();
    let report = StepReport {
        loss_mtr: ev.l_mtr,
        loss_mte: ev.l_mte,
        loss_combined: ev.combined,
        p_per_block: p.to_vec(),
        drop_fractions: ev.drop_fractions,
        grad_p_norm,
    };
    Ok((grads, report))
}

/// One full Algorithm-2 step: capture randomness, compute outer gradients,
/// and apply the SGD update to (theta, alpha, p).
pub fn meta_step(
    state: &mut MetaState,
    batch: &Batch,
    seed: u64,
    epoch: u64,
    step: u64,
) -> Result<StepReport> {
    let frozen = prepare_step(state, batch, seed, epoch, step)?;
    let p = state.p_per_block.clone();
    let (grads, mut report) = outer_gradients(state, batch, &frozen, &p)?;
    let beta = state.cfg.beta;

    for ((_, param), g) in state.net.params_mut().iter_mut().zip(&grads.theta) {
        for (pv, &gv) in param.data_mut().iter_mut().zip(g.data()) {
            *pv -= beta * gv;
        }
    }
    for (a, g) in state.alpha.iter_mut().zip(&grads.alpha) {
        for (av, &gv) in a.data_mut().iter_mut().zip(g.data()) {
            *av -= beta * gv;
        }
    }
    for (pv, &gv) in state.p_per_block.iter_mut().zip(&grads.p) {
        *pv -= beta * gv;
    }
    report.p_per_block = state.p_per_block.clone();
    Ok(report)
}
