//! Dropout-mask construction.
//!
//! Pipeline: unit scores (random / gradient-magnitude / GSNR) -> top-k
//! threshold -> candidate mask M1 -> stochastic gate M2 (Bernoulli or
//! uniform-noise hard-sigmoid) -> drop = M1 * M2 -> strategy-dependent
//! spatial expansion -> keep = 1 - drop -> renormalization factor.
//!
//! M1 and the combined mask are DROP indicators; the multiplicative mask
//! applied to activations is the keep mask. Masks are per-unit [C, H, W]
//! and broadcast over the batch.

use crate::error::{Error, Result};
use crate::gsnr::{gradient_stats, StatSource};
use crate::tape::hard_sigmoid;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Random,
    Magnitude,
    Gsnr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Dropout,
    Dropblock,
    Spatialdropout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// Stochastic gate flavor. Bernoulli gives binary masks; Soft gives the
/// differentiable uniform-noise hard-sigmoid gate of the meta variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gate {
    Bernoulli(f64),
    Soft(f64),
}

/// One constructed mask for one block.
#[derive(Debug, Clone)]
pub struct MaskSet {
    /// Binary drop-candidate indicator (1 = candidate).
    pub m1_candidates: Tensor,
    /// Gate values in [0, 1].
    pub m2_gate: Tensor,
    /// Combined drop mask m1 * m2, pre-expansion.
    pub drop: Tensor,
    /// Multiplicative keep mask = 1 - expanded drop.
    pub keep: Tensor,
    /// count(keep) / sum(keep); 1 for the identity mask.
    pub norm_factor: f64,
    pub block_size: usize,
    pub criterion: Criterion,
    pub strategy: Strategy,
}

impl MaskSet {
    /// Identity mask (inference mode).
    pub fn identity(unit_shape: &[usize], criterion: Criterion, strategy: Strategy) -> MaskSet {
        let shape = unit_shape.to_vec();
        MaskSet {
            m1_candidates: Tensor::zeros(shape.clone()),
            m2_gate: Tensor::zeros(shape.clone()),
            drop: Tensor::zeros(shape.clone()),
            keep: Tensor::filled(shape, 1.0),
            norm_factor: 1.0,
            block_size: 1,
            criterion,
            strategy,
        }
    }

    /// Fraction of units with keep < 1.
    pub fn drop_fraction(&self) -> f64 {
        let n = self.keep.numel() as f64;
        self.keep.data().iter().filter(|&&v| v < 1.0).count() as f64 / n
    }
}

/// k-th largest element of `scores`.
pub fn topk_threshold(scores: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > scores.len() {
        return Err(Error::InvalidArg(format!(
            "top-k threshold: k={} out of range for {} scores",
            k,
            scores.len()
        )));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(sorted[k - 1])
}

/// Candidate-count for a block: fraction of units, rounded up.
pub fn candidate_count(fraction: f64, units: usize) -> usize {
    ((fraction * units as f64).ceil() as usize).clamp(1, units)
}

/// Binary drop-candidate mask: 1 where score >= tau. Ties at tau inflate the
/// candidate set beyond k.
pub fn candidate_mask(scores: &Tensor, tau: f64) -> Result<Tensor> {
    if !tau.is_finite() {
        return Err(Error::InvalidArg("candidate_mask: tau must be finite".into()));
    }
    Ok(scores.map(|s| if s >= tau { 1.0 } else { 0.0 }))
}

/// Per-unit selection scores. `grads` carries per-example gradients with the
/// batch on the leading axis; required for the magnitude and gsnr criteria.
pub fn score(
    criterion: Criterion,
    grads: Option<&Tensor>,
    unit_shape: &[usize],
    rng: &mut impl Rng,
) -> Result<Tensor> {
    match criterion {
        Criterion::Random => {
            let n: usize = unit_shape.iter().product();
            Tensor::new(unit_shape.to_vec(), (0..n).map(|_| rng.gen::<f64>()).collect())
        }
        Criterion::Magnitude | Criterion::Gsnr => {
            let g = grads.ok_or_else(|| {
                Error::InvalidArg(format!("criterion {:?} needs gradients", criterion))
            })?;
            if g.shape().len() < 2 || &g.shape()[1..] != unit_shape {
                return Err(Error::shape(
                    "score",
                    format!("grads {:?} vs unit shape {:?}", g.shape(), unit_shape),
                ));
            }
            let stats = gradient_stats(g, StatSource::ActivationBlock(0))?;
            Ok(match criterion {
                Criterion::Magnitude => stats.unit_mean.map(f64::abs),
                Criterion::Gsnr => stats.ratio,
                Criterion::Random => unreachable!(),
            })
        }
    }
}

/// Binary Bernoulli(p) gate.
pub fn bernoulli_gate(p: f64, shape: &[usize], rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArg(format!("gate probability {} outside [0,1]", p)));
    }
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| if rng.gen::<f64>() < p { 1.0 } else { 0.0 }).collect(),
    )
}

/// Differentiable gate: u ~ U[-1,1] elementwise, output phi(u + p). Returns
/// the noise alongside the gate so a step can be replayed exactly.
pub fn soft_gate(p: f64, shape: &[usize], rng: &mut impl Rng) -> Result<(Tensor, Tensor)> {
    let n: usize = shape.iter().product();
    let u = Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
    )?;
    let gate = u.map(|v| hard_sigmoid(v + p));
    Ok((u, gate))
}

/// Dilate every nonzero position of the last two axes to a centered
/// block_size x block_size square, clipped at the borders. Real-valued masks
/// dilate by running max, which reduces to binary dilation on binary input.
pub fn block_expand(drop: &Tensor, block_size: usize) -> Result<Tensor> {
    let shape = drop.shape();
    if shape.len() < 2 {
        return Err(Error::shape("block_expand", "need at least 2 axes"));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if block_size % 2 == 0 || block_size == 0 {
        return Err(Error::InvalidArg(format!(
            "block_size {} must be odd and positive",
            block_size
        )));
    }
    if block_size > h.min(w) {
        return Err(Error::InvalidArg(format!(
            "block_size {} exceeds spatial extent {}x{}",
            block_size, h, w
        )));
    }
    if block_size == 1 {
        return Ok(drop.clone());
    }
    let r = block_size / 2;
    let planes = drop.numel() / (h * w);
    let src = drop.data();
    let mut out = vec![0.0; drop.numel()];
    for pl in 0..planes {
        let base = pl * h * w;
        for cy in 0..h {
            for cx in 0..w {
                let v = src[base + cy * w + cx];
                if v == 0.0 {
                    continue;
                }
                let y0 = cy.saturating_sub(r);
                let y1 = (cy + r).min(h - 1);
                let x0 = cx.saturating_sub(r);
                let x1 = (cx + r).min(w - 1);
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        let slot = &mut out[base + y * w + x];
                        if v > *slot {
                            *slot = v;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Spread any dropped position over its whole channel plane. Expects the
/// last three axes to be [C, H, W].
pub fn channel_expand(drop: &Tensor) -> Result<Tensor> {
    let shape = drop.shape();
    if shape.len() < 3 {
        return Err(Error::shape("channel_expand", "need at least 3 axes"));
    }
    let hw = shape[shape.len() - 2] * shape[shape.len() - 1];
    let planes = drop.numel() / hw;
    let src = drop.data();
    let mut out = vec![0.0; drop.numel()];
    for pl in 0..planes {
        let base = pl * hw;
        let mx = src[base..base + hw].iter().cloned().fold(0.0f64, f64::max);
        if mx > 0.0 {
            out[base..base + hw].fill(mx);
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// count(keep) / sum(keep). Errors when everything is dropped.
pub fn norm_factor(keep: &Tensor) -> Result<f64> {
    let s = keep.sum();
    if s == 0.0 {
        return Err(Error::AllDropped);
    }
    Ok(keep.numel() as f64 / s)
}

/// A * keep, rescaled so the total mass of an all-ones input is preserved.
pub fn apply_and_normalize(a: &Tensor, keep: &Tensor) -> Result<Tensor> {
    if !a.same_shape(keep) {
        return Err(Error::shape(
            "apply_and_normalize",
            format!("{:?} vs {:?}", a.shape(), keep.shape()),
        ));
    }
    let factor = norm_factor(keep)?;
    a.zip(keep, move |av, kv| av * kv * factor)
}

/// Full Algorithm-1-style pipeline for one block.
#[allow(clippy::too_many_arguments)]
pub fn build_mask(
    strategy: Strategy,
    criterion: Criterion,
    grads: Option<&Tensor>,
    unit_shape: &[usize],
    k: usize,
    gate: Gate,
    block_size: usize,
    rng: &mut impl Rng,
    mode: Mode,
) -> Result<MaskSet> {
    if mode == Mode::Inference {
        return Ok(MaskSet::identity(unit_shape, criterion, strategy));
    }
    let scores = score(criterion, grads, unit_shape, rng)?;
    let tau = topk_threshold(scores.data(), k)?;
    let m1 = candidate_mask(&scores, tau)?;
    let m2 = match gate {
        Gate::Bernoulli(p) => bernoulli_gate(p, unit_shape, rng)?,
        Gate::Soft(p) => soft_gate(p, unit_shape, rng)?.1,
    };
    let drop = m1.zip(&m2, |a, b| a * b)?;
    let expanded = match strategy {
        Strategy::Dropout => drop.clone(),
        Strategy::Dropblock => block_expand(&drop, block_size)?,
        Strategy::Spatialdropout => channel_expand(&drop)?,
    };
    let keep = expanded.map(|v| 1.0 - v);
    let factor = norm_factor(&keep)?;
    Ok(MaskSet {
        m1_candidates: m1,
        m2_gate: m2,
        drop,
        keep,
        norm_factor: factor,
        block_size: if strategy == Strategy::Dropblock { block_size } else { 1 },
        criterion,
        strategy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Purpose, StreamKey};
    use proptest::prelude::*;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        stream_rng(StreamKey::new(seed, Purpose::MaskGate))
    }

    #[test]
    fn topk_threshold_cases() {
        let s = [0.1, 5.0, 3.0, 2.0];
        assert_eq!(topk_threshold(&s, 1).unwrap(), 5.0);
        assert_eq!(topk_threshold(&s, 4).unwrap(), 0.1);
        assert_eq!(topk_threshold(&s, 2).unwrap(), 3.0);
        assert!(topk_threshold(&s, 0).is_err());
        assert!(topk_threshold(&s, 5).is_err());
    }

    #[test]
    fn candidate_mask_elementwise() {
        let s = Tensor::new(vec![3], vec![6.0, 0.0, 3.0]).unwrap();
        assert_eq!(candidate_mask(&s, 3.0).unwrap().data(), &[1.0, 0.0, 1.0]);
        assert_eq!(candidate_mask(&s, 7.0).unwrap().data(), &[0.0, 0.0, 0.0]);
        assert_eq!(candidate_mask(&s, -1.0).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn gsnr_score_delegates_to_gradient_stats() {
        let g = Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let s = score(Criterion::Gsnr, Some(&g), &[1], &mut rng(0)).unwrap();
        assert!((s.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn magnitude_score_is_abs_mean() {
        let g = Tensor::new(vec![2, 1], vec![1.0, -1.0]).unwrap();
        let s = score(Criterion::Magnitude, Some(&g), &[1], &mut rng(0)).unwrap();
        assert_eq!(s.data()[0], 0.0);
        let g = Tensor::new(vec![2, 1], vec![-1.0, -3.0]).unwrap();
        let s = score(Criterion::Magnitude, Some(&g), &[1], &mut rng(0)).unwrap();
        assert_eq!(s.data()[0], 2.0);
    }

    #[test]
    fn random_score_is_seeded() {
        let a = score(Criterion::Random, None, &[8], &mut rng(1)).unwrap();
        let b = score(Criterion::Random, None, &[8], &mut rng(1)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn missing_grads_error() {
        assert!(score(Criterion::Gsnr, None, &[4], &mut rng(0)).is_err());
        assert!(score(Criterion::Magnitude, None, &[4], &mut rng(0)).is_err());
    }

    #[test]
    fn bernoulli_gate_edges_and_concentration() {
        let zeros = bernoulli_gate(0.0, &[100], &mut rng(2)).unwrap();
        assert!(zeros.data().iter().all(|&v| v == 0.0));
        let ones = bernoulli_gate(1.0, &[100], &mut rng(2)).unwrap();
        assert!(ones.data().iter().all(|&v| v == 1.0));
        let g = bernoulli_gate(0.3, &[100_000], &mut rng(3)).unwrap();
        let mean = g.sum() / 100_000.0;
        assert!((mean - 0.3).abs() < 0.01, "mean {}", mean);
        assert!(bernoulli_gate(1.5, &[4], &mut rng(0)).is_err());
    }

    #[test]
    fn soft_gate_saturation_and_mean() {
        let (_, g) = soft_gate(4.0, &[64], &mut rng(4)).unwrap();
        assert!(g.data().iter().all(|&v| v == 1.0));
        let (_, g) = soft_gate(0.0, &[100_000], &mut rng(5)).unwrap();
        // E[phi(u)] over U[-1,1] is exactly 1/2 (phi is linear there)
        let mean = g.sum() / 100_000.0;
        assert!((mean - 0.5).abs() < 0.01, "mean {}", mean);
    }

    #[test]
    fn block_expand_cases() {
        // identity at block_size 1
        let d = Tensor::new(vec![4, 4], vec![0.0; 16]).unwrap();
        assert_eq!(block_expand(&d, 1).unwrap().data(), d.data());

        // interior center at (1,1), block 3 -> rows 0..2 x cols 0..2
        let mut v = vec![0.0; 16];
        v[1 * 4 + 1] = 1.0;
        let d = Tensor::new(vec![4, 4], v).unwrap();
        let e = block_expand(&d, 3).unwrap();
        let dropped: Vec<usize> = e.data().iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(i, _)| i).collect();
        let expect: Vec<usize> = (0..3).flat_map(|y| (0..3).map(move |x| y * 4 + x)).collect();
        assert_eq!(dropped, expect);

        // corner center, block 3 -> 2x2 clipped square
        let mut v = vec![0.0; 16];
        v[0] = 1.0;
        let d = Tensor::new(vec![4, 4], v).unwrap();
        let e = block_expand(&d, 3).unwrap();
        let dropped: Vec<usize> = e.data().iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(i, _)| i).collect();
        assert_eq!(dropped, vec![0, 1, 4, 5]);

        // even block size rejected, oversized rejected
        assert!(block_expand(&d, 2).is_err());
        assert!(block_expand(&d, 5).is_err());
    }

    #[test]
    fn channel_expand_drops_whole_plane() {
        let mut v = vec![0.0; 2 * 2 * 2];
        v[5] = 1.0; // channel 1
        let d = Tensor::new(vec![2, 2, 2], v).unwrap();
        let e = channel_expand(&d).unwrap();
        assert_eq!(e.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn apply_and_normalize_cases() {
        let a = Tensor::filled(vec![16], 1.0);
        let keep = Tensor::filled(vec![16], 1.0);
        assert_eq!(apply_and_normalize(&a, &keep).unwrap().data(), a.data());

        let mut keep = Tensor::filled(vec![16], 1.0);
        for i in 0..8 {
            keep.data_mut()[i] = 0.0;
        }
        let out = apply_and_normalize(&a, &keep).unwrap();
        for i in 0..16 {
            assert_eq!(out.data()[i], if i < 8 { 0.0 } else { 2.0 });
        }

        let all_zero = Tensor::zeros(vec![4]);
        let err = apply_and_normalize(&Tensor::filled(vec![4], 1.0), &all_zero).unwrap_err();
        assert!(err.to_string().contains("reduce k or p"));
    }

    #[test]
    fn apply_and_normalize_matches_loop_oracle() {
        let mut r = rng(6);
        use rand::Rng as _;
        let a = Tensor::new(vec![12], (0..12).map(|_| r.gen::<f64>()).collect()).unwrap();
        let keep = Tensor::new(
            vec![12],
            (0..12).map(|_| if r.gen::<f64>() < 0.5 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        if keep.sum() == 0.0 {
            return;
        }
        let out = apply_and_normalize(&a, &keep).unwrap();
        let factor = 12.0 / keep.sum();
        let mut expect = 0.0;
        for i in 0..12 {
            expect += a.data()[i] * keep.data()[i] * factor;
        }
        assert!((out.sum() - expect).abs() < 1e-12);
    }

    #[test]
    fn build_mask_inference_is_identity() {
        let m = build_mask(
            super::Strategy::Dropblock,
            Criterion::Gsnr,
            None,
            &[2, 4, 4],
            5,
            Gate::Bernoulli(0.9),
            3,
            &mut rng(7),
            Mode::Inference,
        )
        .unwrap();
        assert!(m.keep.data().iter().all(|&v| v == 1.0));
        assert_eq!(m.norm_factor, 1.0);
    }

    #[test]
    fn build_mask_gate_one_drops_exact_topk_set() {
        let b = 4;
        let units = [2usize, 4, 4];
        let n: usize = units.iter().product();
        let mut r = rng(8);
        use rand::Rng as _;
        let grads = Tensor::new(
            vec![b, 2, 4, 4],
            (0..b * n).map(|_| r.gen::<f64>() * 2.0 - 1.0).collect(),
        )
        .unwrap();
        let k = 5;
        let m = build_mask(
            super::Strategy::Dropout,
            Criterion::Gsnr,
            Some(&grads),
            &units,
            k,
            Gate::Bernoulli(1.0),
            1,
            &mut rng(9),
            Mode::Train,
        )
        .unwrap();
        // oracle: sort scores descending, take indices of the top k (no ties
        // expected with continuous random grads)
        let scores = score(Criterion::Gsnr, Some(&grads), &units, &mut rng(9)).unwrap();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &bb| scores.data()[bb].partial_cmp(&scores.data()[a]).unwrap());
        let top: std::collections::HashSet<usize> = idx[..k].iter().copied().collect();
        let dropped: std::collections::HashSet<usize> = m
            .drop
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(top, dropped);
    }

    #[test]
    fn random_dropout_block1_is_classical_dropout() {
        let m = build_mask(
            super::Strategy::Dropout,
            Criterion::Random,
            None,
            &[2, 4, 4],
            32, // all units candidates
            Gate::Bernoulli(0.5),
            1,
            &mut rng(10),
            Mode::Train,
        )
        .unwrap();
        assert!(m.m1_candidates.data().iter().all(|&v| v == 1.0));
        assert!(m.keep.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(m.norm_factor >= 1.0);
    }

    proptest! {
        #[test]
        fn hard_gate_preserves_total_mass_per_draw(seed in 0u64..200) {
            let m = build_mask(
                super::Strategy::Dropout,
                Criterion::Random,
                None,
                &[2, 4, 4],
                11,
                Gate::Bernoulli(0.6),
                1,
                &mut rng(seed),
                Mode::Train,
            );
            if let Ok(m) = m {
                let ones = Tensor::filled(vec![2, 4, 4], 1.0);
                let out = apply_and_normalize(&ones, &m.keep).unwrap();
                prop_assert!((out.sum() - ones.sum()).abs() <= 1e-12);
            }
        }

        #[test]
        fn drop_count_nondecreasing_in_k(seed in 0u64..50, k1 in 1usize..16, k2 in 1usize..16) {
            let (k_lo, k_hi) = if k1 <= k2 { (k1, k2) } else { (k2, k1) };
            let mut score_rng = rng(seed);
            use rand::Rng as _;
            let scores: Vec<f64> = (0..32).map(|_| score_rng.gen::<f64>()).collect();
            let t = Tensor::new(vec![2, 4, 4], scores.clone()).unwrap();
            let tau_lo = topk_threshold(&scores, k_lo).unwrap();
            let tau_hi = topk_threshold(&scores, k_hi).unwrap();
            let m_lo = candidate_mask(&t, tau_lo).unwrap();
            let m_hi = candidate_mask(&t, tau_hi).unwrap();
            prop_assert!(m_lo.sum() <= m_hi.sum());
        }

        #[test]
        fn drop_count_nondecreasing_in_p(seed in 0u64..50, pa in 0.0f64..1.0, pb in 0.0f64..1.0) {
            let (p_lo, p_hi) = if pa <= pb { (pa, pb) } else { (pb, pa) };
            // same rng stream: a draw below p_lo is also below p_hi
            let lo = bernoulli_gate(p_lo, &[64], &mut rng(seed)).unwrap();
            let hi = bernoulli_gate(p_hi, &[64], &mut rng(seed)).unwrap();
            prop_assert!(lo.sum() <= hi.sum());
        }

        #[test]
        fn block_expand_inclusion_idempotence(seed in 0u64..100) {
            let mut r = rng(seed);
            use rand::Rng as _;
            let v: Vec<f64> = (0..16).map(|_| if r.gen::<f64>() < 0.15 { 1.0 } else { 0.0 }).collect();
            let d = Tensor::new(vec![4, 4], v).unwrap();
            let once = block_expand(&d, 3).unwrap();
            let twice = block_expand(&once, 3).unwrap();
            for i in 0..16 {
                prop_assert!(twice.data()[i] >= once.data()[i]);
            }
        }
    }
}
