//! Per-unit gradient statistics and the one-step generalization ratio.
//!
//! The gradient-signal-to-noise ratio of a unit is the squared batch mean of
//! its per-example gradients over their population variance. Activation
//! gradients feed the mask pipeline; parameter gradients feed diagnostics.

use crate::error::{Error, Result};
use crate::network::{per_example_param_grads, Batch, BlockNet};
use crate::tensor::Tensor;

/// Variance-floor guard; keeps ratios finite at zero variance.
pub const GSNR_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatSource {
    /// Activation gradients of one network block (the masking signal).
    ActivationBlock(usize),
    /// Parameter gradients (diagnostics only).
    Parameters,
}

/// Mean, population variance and ratio per unit over one batch.
#[derive(Debug, Clone)]
pub struct GsnrStats {
    pub unit_mean: Tensor,
    pub unit_var: Tensor,
    pub ratio: Tensor,
    pub epsilon: f64,
    pub source: StatSource,
}

/// Batch statistics from per-example gradients. The leading axis of
/// `per_example_grads` is the batch; the remaining axes are the unit shape.
/// Variance follows the population convention (divide by B).
pub fn gradient_stats(per_example_grads: &Tensor, source: StatSource) -> Result<GsnrStats> {
    let shape = per_example_grads.shape();
    if shape.is_empty() {
        return Err(Error::shape("gradient_stats", "need a batch axis"));
    }
    let b = shape[0];
    if b < 2 {
        return Err(Error::BatchTooSmall { need: 2, got: b });
    }
    let unit_shape: Vec<usize> = shape[1..].to_vec();
    let per: usize = unit_shape.iter().product();
    let data = per_example_grads.data();
    let inv_b = 1.0 / b as f64;

    let mut mean = vec![0.0; per];
    for e in 0..b {
        let row = &data[e * per..(e + 1) * per];
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m *= inv_b;
    }
    let mut var = vec![0.0; per];
    for e in 0..b {
        let row = &data[e * per..(e + 1) * per];
        for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = x - m;
            *v += d * d;
        }
    }
    for v in var.iter_mut() {
        *v *= inv_b;
    }
    let ratio: Vec<f64> = mean
        .iter()
        .zip(&var)
        .map(|(&m, &v)| m * m / (v + GSNR_EPSILON))
        .collect();

    Ok(GsnrStats {
        unit_mean: Tensor::new(unit_shape.clone(), mean)?,
        unit_var: Tensor::new(unit_shape.clone(), var)?,
        ratio: Tensor::new(unit_shape, ratio)?,
        epsilon: GSNR_EPSILON,
        source,
    })
}

/// Arithmetic mean of the GSNR ratio over every parameter unit, from
/// single-example replay on `batch`.
pub fn model_mean_gsnr(net: &BlockNet, batch: &Batch) -> Result<f64> {
    let per = per_example_param_grads(net, batch)?;
    let stats = param_gradient_stats(&per)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for s in &stats {
        total += s.ratio.sum();
        count += s.ratio.numel();
    }
    Ok(total / count as f64)
}

/// Per-parameter-tensor statistics from replayed per-example gradients
/// (outer index example, inner index parameter tensor).
pub fn param_gradient_stats(per_example: &[Vec<Tensor>]) -> Result<Vec<GsnrStats>> {
    let b = per_example.len();
    if b < 2 {
        return Err(Error::BatchTooSmall { need: 2, got: b });
    }
    let num_params = per_example[0].len();
    (0..num_params)
        .map(|p| {
            let slices: Vec<Tensor> = per_example.iter().map(|ex| ex[p].clone()).collect();
            gradient_stats(&Tensor::stack(&slices)?, StatSource::Parameters)
        })
        .collect()
}

/// Empirical one-step generalization ratio: test loss decrease over train
/// loss decrease.
pub fn osgr_empirical(train_loss_decrease: f64, test_loss_decrease: f64) -> Result<f64> {
    if train_loss_decrease == 0.0 {
        return Err(Error::InvalidArg(
            "osgr_empirical: train loss decrease is zero".into(),
        ));
    }
    Ok(test_loss_decrease / train_loss_decrease)
}

/// One-step generalization ratio from gradient statistics:
/// R = 1 - sum_j rho_j^2 / (n * sum_j (rho_j^2 / n + mean_j^2)).
pub fn osgr_from_stats(stats: &[GsnrStats], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArg("osgr_from_stats: n must be >= 1".into()));
    }
    let nf = n as f64;
    let mut var_sum = 0.0;
    let mut denom = 0.0;
    for s in stats {
        for (&v, &m) in s.unit_var.data().iter().zip(s.unit_mean.data()) {
            var_sum += v;
            denom += v / nf + m * m;
        }
    }
    if denom == 0.0 {
        return Err(Error::InvalidArg(
            "osgr_from_stats: all means and variances are zero".into(),
        ));
    }
    Ok(1.0 - var_sum / (nf * denom))
}
