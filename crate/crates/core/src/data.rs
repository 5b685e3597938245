//! Synthetic multi-domain data.
//!
//! Class content is a procedural shape drawn from per-(class, sample) streams
//! so the same sample index carries the same content in every domain; domains
//! then differ by style only: rotation, per-channel gains, a background
//! texture, and noise. An optional "shortcut" paints a label-correlated
//! corner patch whose label mapping can be permuted per domain, creating
//! features that help in-domain and mislead across domains.
//!
//! Also owns the leave-one-out split, the augmentation stack, and a plain
//! export/ingest format: a manifest with one `relative-path domain class`
//! line per sample, each sample a raw tensor file (little-endian u32 rank,
//! u32 extents, f64 values).

use crate::error::{Error, Result};
use crate::network::Batch;
use crate::rng::{stream_rng, Purpose, StreamKey};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{Read as _, Write as _};
use std::path::Path;

/// Label-correlated patch configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum Shortcut {
    /// No shortcut features.
    None,
    /// Corner patch with intensity keyed to the label. With
    /// `permute_per_domain` each domain uses its own label permutation, so
    /// the feature predicts labels in-domain but not across domains.
    Patch {
        strength: f64,
        permute_per_domain: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub image_hw: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub num_domains: usize,
    pub samples_per_class: usize,
    pub seed: u64,
    /// 0 disables all domain style transforms (shift-free control).
    pub style_strength: f64,
    /// Base additive Gaussian noise level.
    pub noise_sigma: f64,
    pub shortcut: Shortcut,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            image_hw: 32,
            channels: 3,
            num_classes: 7,
            num_domains: 4,
            samples_per_class: 500,
            seed: 0,
            style_strength: 1.0,
            noise_sigma: 0.06,
            shortcut: Shortcut::Patch {
                strength: 0.9,
                permute_per_domain: true,
            },
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, ok: bool, detail: String| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Config {
                    field: format!("dataset.{name}"),
                    detail,
                })
            }
        };
        field("image_hw", self.image_hw >= 4, format!("{} too small", self.image_hw))?;
        field("channels", self.channels >= 1, "need at least 1".into())?;
        field(
            "num_classes",
            (1..=7).contains(&self.num_classes),
            format!("{} not in 1..=7", self.num_classes),
        )?;
        field("num_domains", self.num_domains >= 2, "need at least 2".into())?;
        field(
            "samples_per_class",
            self.samples_per_class >= 1,
            "need at least 1".into(),
        )?;
        field(
            "style_strength",
            self.style_strength.is_finite() && self.style_strength >= 0.0,
            format!("{} must be finite and >= 0", self.style_strength),
        )?;
        field(
            "noise_sigma",
            self.noise_sigma.is_finite() && self.noise_sigma >= 0.0,
            format!("{} must be finite and >= 0", self.noise_sigma),
        )?;
        if let Shortcut::Patch { strength, .. } = self.shortcut {
            field(
                "shortcut.strength",
                strength.is_finite() && (0.0..=1.0).contains(&strength),
                format!("{strength} not in [0, 1]"),
            )?;
        }
        Ok(())
    }
}

/// Style transform of one domain, derived deterministically from the config.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub rotation_quarters: usize,
    pub channel_gain: Vec<f64>,
    pub texture_freq: f64,
    pub texture_angle: f64,
    pub texture_amp: f64,
    pub noise_sigma: f64,
    /// Label permutation for the shortcut patch.
    pub patch_perm: Vec<usize>,
}

impl DomainSpec {
    pub fn for_domain(cfg: &DataConfig, d: usize) -> DomainSpec {
        let s = cfg.style_strength;
        let gain_dirs: [[f64; 3]; 4] = [
            [0.0, 0.0, 0.0],
            [0.25, -0.15, 0.05],
            [-0.20, 0.20, -0.10],
            [0.10, -0.25, 0.20],
        ];
        let dir = gain_dirs[d % 4];
        let channel_gain: Vec<f64> = (0..cfg.channels)
            .map(|c| (1.0 + s * dir[c % 3]).max(0.05))
            .collect();
        let mut patch_perm: Vec<usize> = (0..cfg.num_classes).collect();
        let permute = matches!(
            cfg.shortcut,
            Shortcut::Patch {
                permute_per_domain: true,
                ..
            }
        );
        if permute {
            let mut rng = stream_rng(StreamKey::new(cfg.seed, Purpose::Split).block(d as u64 + 1));
            patch_perm.shuffle(&mut rng);
        }
        DomainSpec {
            domain_id: d,
            rotation_quarters: if s > 0.0 { d % 4 } else { 0 },
            channel_gain,
            texture_freq: 2.0 + 2.0 * d as f64,
            texture_angle: std::f64::consts::PI * d as f64 / cfg.num_domains.max(1) as f64,
            texture_amp: 0.25 * s,
            noise_sigma: cfg.noise_sigma * [1.0, 0.6, 1.4, 0.8][d % 4],
            patch_perm,
        }
    }
}

/// In-memory dataset; images are [C, H, W] in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub domain_ids: Vec<usize>,
    pub num_classes: usize,
    pub num_domains: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Stack the given sample indices into one batch.
    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        let parts: Vec<Tensor> = idx.iter().map(|&i| self.images[i].clone()).collect();
        Ok(Batch {
            images: Tensor::stack(&parts)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            domain_ids: idx.iter().map(|&i| self.domain_ids[i]).collect(),
        })
    }

    pub fn domain_indices(&self, d: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.domain_ids[i] == d).collect()
    }
}

/// Leave-one-out assignment: sources split 90/10 into train/val, the target
/// domain fully held out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub source_domains: Vec<usize>,
    pub target_domain: usize,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub target_idx: Vec<usize>,
}

/// Shape value in [0, 1] for class `c` at normalized coordinates (u, v) in
/// [-1, 1]; `jx, jy, js` are per-sample jitters.
fn class_shape(c: usize, u: f64, v: f64, jx: f64, jy: f64, js: f64) -> f64 {
    let u = (u - jx) / js;
    let v = (v - jy) / js;
    let r = (u * u + v * v).sqrt();
    let inside = match c % 7 {
        0 => r < 0.5,
        1 => {
            let m = u.abs().max(v.abs());
            (0.35..0.55).contains(&m)
        }
        2 => (u.abs() < 0.15 || v.abs() < 0.15) && u.abs() < 0.6 && v.abs() < 0.6,
        3 => r < 0.7 && (6.0 * (u + v)).sin() > 0.3,
        4 => v > -0.5 && v < 0.5 && u.abs() < (0.5 - v) * 0.8,
        5 => {
            u.abs() < 0.55
                && v.abs() < 0.55
                && ((std::f64::consts::PI * u / 0.28).sin() * (std::f64::consts::PI * v / 0.28).sin())
                    > 0.0
        }
        _ => (0.3..0.5).contains(&r),
    };
    if inside {
        1.0
    } else {
        0.0
    }
}

/// Rotate [C, H, W] by k quarter turns counterclockwise.
pub fn rotate_quarters(img: &Tensor, k: usize) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::shape("rotate_quarters", format!("{:?}", s)));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = img.clone();
    for _ in 0..k % 4 {
        let src = out.data().to_vec();
        let dst = out.data_mut();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    // (y, x) <- (x, w-1-y)
                    dst[ch * h * w + y * w + x] = src[ch * h * w + x * w + (w - 1 - y)];
                }
            }
        }
    }
    Ok(out)
}

fn paint_patch(img: &mut Tensor, domain: usize, value: f64) {
    let s = img.shape().to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    let ps = 3.min(h).min(w);
    let (y0, x0) = match domain % 4 {
        0 => (0, 0),
        1 => (0, w - ps),
        2 => (h - ps, 0),
        _ => (h - ps, w - ps),
    };
    for ch in 0..c {
        for y in y0..y0 + ps {
            for x in x0..x0 + ps {
                img.data_mut()[ch * h * w + y * w + x] = value;
            }
        }
    }
}

/// Generate one sample. Content depends on (seed, class, index) only; style
/// on the domain spec.
fn generate_sample(cfg: &DataConfig, spec: &DomainSpec, class: usize, index: usize) -> Result<Tensor> {
    let hw = cfg.image_hw;
    let mut content_rng = stream_rng(
        StreamKey::new(cfg.seed, Purpose::DomainContent).at(class as u64, index as u64),
    );
    let jx = content_rng.gen::<f64>() * 0.4 - 0.2;
    let jy = content_rng.gen::<f64>() * 0.4 - 0.2;
    let js = 0.6 + content_rng.gen::<f64>() * 0.4;
    let fg: Vec<f64> = (0..cfg.channels)
        .map(|_| 0.55 + content_rng.gen::<f64>() * 0.35)
        .collect();

    let mut style_rng = stream_rng(
        StreamKey::new(cfg.seed, Purpose::DomainNoise)
            .at(class as u64, index as u64)
            .block(spec.domain_id as u64),
    );
    let phase = style_rng.gen::<f64>() * std::f64::consts::TAU;
    let (ca, sa) = (spec.texture_angle.cos(), spec.texture_angle.sin());

    let mut data = vec![0.0; cfg.channels * hw * hw];
    for y in 0..hw {
        for x in 0..hw {
            let u = 2.0 * x as f64 / (hw - 1) as f64 - 1.0;
            let v = 2.0 * y as f64 / (hw - 1) as f64 - 1.0;
            let shape = class_shape(class, u, v, jx, jy, js);
            let tex = 0.5
                + spec.texture_amp
                    * (spec.texture_freq * (ca * u + sa * v) * std::f64::consts::PI + phase).sin();
            for ch in 0..cfg.channels {
                let base = shape * fg[ch] + (1.0 - shape) * tex * 0.35;
                data[ch * hw * hw + y * hw + x] = base * spec.channel_gain[ch];
            }
        }
    }
    let mut img = Tensor::new(vec![cfg.channels, hw, hw], data)?;
    img = rotate_quarters(&img, spec.rotation_quarters)?;

    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).unwrap();
        for v in img.data_mut() {
            *v += normal.sample(&mut style_rng);
        }
    }
    if let Shortcut::Patch { strength, .. } = cfg.shortcut {
        let level = strength * (spec.patch_perm[class] + 1) as f64 / cfg.num_classes as f64;
        paint_patch(&mut img, spec.domain_id, level);
    }
    for v in img.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(img)
}

/// Full balanced dataset: every (domain, class) cell holds
/// `samples_per_class` samples.
pub fn generate_domains(cfg: &DataConfig) -> Result<Dataset> {
    if cfg.num_domains < 2 {
        return Err(Error::Config {
            field: "num_domains".into(),
            detail: "need at least 2 domains".into(),
        });
    }
    if cfg.num_classes == 0 || cfg.samples_per_class == 0 || cfg.image_hw < 4 {
        return Err(Error::Config {
            field: "data".into(),
            detail: "classes, samples per class, and image size must be positive".into(),
        });
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut domain_ids = Vec::new();
    for d in 0..cfg.num_domains {
        let spec = DomainSpec::for_domain(cfg, d);
        for c in 0..cfg.num_classes {
            for i in 0..cfg.samples_per_class {
                images.push(generate_sample(cfg, &spec, c, i)?);
                labels.push(c);
                domain_ids.push(d);
            }
        }
    }
    Ok(Dataset {
        images,
        labels,
        domain_ids,
        num_classes: cfg.num_classes,
        num_domains: cfg.num_domains,
    })
}

/// Deterministic leave-one-out split: 90/10 train/val over the source
/// domains (rounded per domain), full target held out.
pub fn make_split(ds: &Dataset, target_domain: usize, seed: u64) -> Result<SplitPlan> {
    if target_domain >= ds.num_domains {
        return Err(Error::InvalidArg(format!(
            "unknown target domain {} (dataset has {})",
            target_domain, ds.num_domains
        )));
    }
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    let mut source_domains = Vec::new();
    for d in 0..ds.num_domains {
        if d == target_domain {
            continue;
        }
        source_domains.push(d);
        let mut idx = ds.domain_indices(d);
        let mut rng = stream_rng(StreamKey::new(seed, Purpose::Split).block(d as u64));
        idx.shuffle(&mut rng);
        let n_val = ((idx.len() as f64) * 0.1).round() as usize;
        val_idx.extend_from_slice(&idx[..n_val]);
        train_idx.extend_from_slice(&idx[n_val..]);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok(SplitPlan {
        source_domains,
        target_domain,
        train_idx,
        val_idx,
        target_idx: ds.domain_indices(target_domain),
    })
}

/// Index order for one epoch: the same (seed, epoch) always shuffles the
/// same way.
pub fn epoch_order(indices: &[usize], seed: u64, epoch: u64) -> Vec<usize> {
    let mut out = indices.to_vec();
    let mut rng = stream_rng(StreamKey::new(seed, Purpose::Shuffle).at(epoch, 0));
    out.shuffle(&mut rng);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub crop_prob: f64,
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub jitter_strength: f64,
    pub grayscale_prob: f64,
    pub randconv_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_prob: 0.5,
            flip_prob: 0.5,
            jitter_prob: 0.5,
            jitter_strength: 0.3,
            grayscale_prob: 0.5,
            randconv_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn off() -> AugmentConfig {
        AugmentConfig {
            crop_prob: 0.0,
            flip_prob: 0.0,
            jitter_prob: 0.0,
            jitter_strength: 0.0,
            grayscale_prob: 0.0,
            randconv_prob: 0.0,
        }
    }
}

/// Mirror the last axis.
pub fn hflip(img: &Tensor) -> Result<Tensor> {
    let s = img.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::shape("hflip", format!("{:?}", s)));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = img.clone();
    let src = img.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                dst[ch * h * w + y * w + x] = src[ch * h * w + y * w + (w - 1 - x)];
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor resize of [C, H, W] to a square `out_hw`.
pub fn resize_nearest(img: &Tensor, out_hw: usize) -> Result<Tensor> {
    let s = img.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::shape("resize_nearest", format!("{:?}", s)));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; c * out_hw * out_hw];
    for ch in 0..c {
        for y in 0..out_hw {
            let sy = (y * h) / out_hw;
            for x in 0..out_hw {
                let sx = (x * w) / out_hw;
                out[ch * out_hw * out_hw + y * out_hw + x] = img.data()[ch * h * w + sy * w + sx];
            }
        }
    }
    Tensor::new(vec![c, out_hw, out_hw], out)
}

/// Depthwise convolution with one spatial kernel (odd side, zero padding),
/// output rescaled back to the input's [min, max] range.
pub fn conv_augment(img: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let s = img.shape().to_vec();
    let ks = kernel.shape().to_vec();
    if s.len() != 3 || ks.len() != 2 || ks[0] != ks[1] || ks[0] % 2 == 0 {
        return Err(Error::shape(
            "conv_augment",
            format!("image {:?}, kernel {:?}", s, ks),
        ));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let k = ks[0];
    let r = k / 2;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = y as isize + ky as isize - r as isize;
                        let ix = x as isize + kx as isize - r as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        acc += kernel.data()[ky * k + kx]
                            * img.data()[ch * h * w + iy as usize * w + ix as usize];
                    }
                }
                out[ch * h * w + y * w + x] = acc;
            }
        }
    }
    // renormalize into the input's value range
    let (in_min, in_max) = img
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let (o_min, o_max) = out
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if o_max > o_min && in_max > in_min {
        let scale = (in_max - in_min) / (o_max - o_min);
        for v in out.iter_mut() {
            *v = in_min + (*v - o_min) * scale;
        }
    }
    Tensor::new(s, out)
}

/// Apply each augmentation independently with its configured probability.
pub fn augment(img: &Tensor, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Tensor> {
    let s = img.shape().to_vec();
    let (c, hw) = (s[0], s[1]);
    let mut out = img.clone();
    if rng.gen::<f64>() < cfg.crop_prob {
        let scale = 0.7 + rng.gen::<f64>() * 0.3;
        let ch = ((hw as f64 * scale) as usize).max(2);
        let y0 = rng.gen_range(0..=hw - ch);
        let x0 = rng.gen_range(0..=hw - ch);
        let mut crop = vec![0.0; c * ch * ch];
        for cc in 0..c {
            for y in 0..ch {
                for x in 0..ch {
                    crop[cc * ch * ch + y * ch + x] =
                        out.data()[cc * hw * hw + (y0 + y) * hw + (x0 + x)];
                }
            }
        }
        out = resize_nearest(&Tensor::new(vec![c, ch, ch], crop)?, hw)?;
    }
    if rng.gen::<f64>() < cfg.flip_prob {
        out = hflip(&out)?;
    }
    if rng.gen::<f64>() < cfg.jitter_prob {
        let j = cfg.jitter_strength;
        let gains: Vec<f64> = (0..c).map(|_| 1.0 + (rng.gen::<f64>() * 2.0 - 1.0) * j).collect();
        let shift = (rng.gen::<f64>() * 2.0 - 1.0) * j * 0.5;
        let plane = hw * hw;
        for cc in 0..c {
            for v in &mut out.data_mut()[cc * plane..(cc + 1) * plane] {
                *v = (*v * gains[cc] + shift).clamp(0.0, 1.0);
            }
        }
    }
    if rng.gen::<f64>() < cfg.grayscale_prob {
        let plane = hw * hw;
        let data = out.data_mut();
        for p in 0..plane {
            let mean: f64 = (0..c).map(|cc| data[cc * plane + p]).sum::<f64>() / c as f64;
            for cc in 0..c {
                data[cc * plane + p] = mean;
            }
        }
    }
    if rng.gen::<f64>() < cfg.randconv_prob {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let kernel = Tensor::new(vec![3, 3], (0..9).map(|_| normal.sample(rng)).collect())?;
        out = conv_augment(&out, &kernel)?;
    }
    Ok(out)
}

/// Assemble a training batch with per-sample seeded augmentation.
pub fn augmented_batch(
    ds: &Dataset,
    idx: &[usize],
    aug: &AugmentConfig,
    seed: u64,
    epoch: u64,
) -> Result<Batch> {
    let mut parts = Vec::with_capacity(idx.len());
    for &i in idx {
        let mut rng = stream_rng(StreamKey::new(seed, Purpose::Augment).at(epoch, i as u64));
        parts.push(augment(&ds.images[i], aug, &mut rng)?);
    }
    Ok(Batch {
        images: Tensor::stack(&parts)?,
        labels: idx.iter().map(|&i| ds.labels[i]).collect(),
        domain_ids: idx.iter().map(|&i| ds.domain_ids[i]).collect(),
    })
}

fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let ctx = || path.display().to_string();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut buf = Vec::with_capacity(4 + 4 * t.shape().len() + 8 * t.numel());
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&buf).map_err(|e| Error::io(ctx(), e))
}

fn read_tensor(path: &Path) -> Result<Tensor> {
    let ctx = || path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(ctx(), e))?;
    let need = |n: usize, at: usize| -> Result<()> {
        if bytes.len() < at + n {
            Err(Error::Parse {
                context: ctx(),
                detail: "truncated tensor file".into(),
            })
        } else {
            Ok(())
        }
    };
    need(4, 0)?;
    let rank = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    need(4 * rank, 4)?;
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let at = 4 + 4 * i;
        shape.push(u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize);
    }
    let n: usize = shape.iter().product();
    let off = 4 + 4 * rank;
    need(8 * n, off)?;
    let data: Vec<f64> = (0..n)
        .map(|i| f64::from_le_bytes(bytes[off + 8 * i..off + 8 * i + 8].try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

/// Write every sample as a raw tensor file plus `manifest.txt` with one
/// `relative-path domain class` line per sample.
pub fn export(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut manifest = String::new();
    for i in 0..ds.len() {
        let rel = format!("d{}_c{}_{:05}.ten", ds.domain_ids[i], ds.labels[i], i);
        write_tensor(&dir.join(&rel), &ds.images[i])?;
        manifest.push_str(&format!("{} {} {}\n", rel, ds.domain_ids[i], ds.labels[i]));
    }
    std::fs::write(dir.join("manifest.txt"), manifest)
        .map_err(|e| Error::io(dir.display().to_string(), e))
}

/// Read a dataset written by `export` (or following the same layout).
/// Images are resized to `image_hw` and clamped to [0, 1]; 8-bit-range
/// values are rescaled by 255.
pub fn ingest(dir: &Path, image_hw: usize) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| {
        Error::io(
            format!(
                "{} (expected layout: manifest.txt with `relative-path domain class` lines next to raw tensor files)",
                manifest_path.display()
            ),
            e,
        )
    })?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut domain_ids = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (rel, dom, class) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(Error::Parse {
                    context: manifest_path.display().to_string(),
                    detail: format!("line {}: expected `relative-path domain class`", ln + 1),
                })
            }
        };
        let parse_idx = |s: &str, what: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Parse {
                context: manifest_path.display().to_string(),
                detail: format!("line {}: {} `{}` is not an integer", ln + 1, what, s),
            })
        };
        let mut img = read_tensor(&dir.join(rel))?;
        if img.shape().len() != 3 {
            return Err(Error::Parse {
                context: rel.to_string(),
                detail: format!("expected a [C,H,W] tensor, got {:?}", img.shape()),
            });
        }
        if img.shape()[1] != image_hw || img.shape()[2] != image_hw {
            img = resize_nearest(&img, image_hw)?;
        }
        let mx = img.data().iter().cloned().fold(0.0f64, f64::max);
        if mx > 1.5 {
            img = img.map(|v| v / 255.0);
        }
        img = img.map(|v| v.clamp(0.0, 1.0));
        images.push(img);
        domain_ids.push(parse_idx(dom, "domain")?);
        labels.push(parse_idx(class, "class")?);
    }
    if images.is_empty() {
        return Err(Error::Parse {
            context: dir.display().to_string(),
            detail: "no samples found; expected manifest.txt with `relative-path domain class` lines".into(),
        });
    }
    let num_classes = labels.iter().max().unwrap() + 1;
    let num_domains = domain_ids.iter().max().unwrap() + 1;
    Ok(Dataset {
        images,
        labels,
        domain_ids,
        num_classes,
        num_domains,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> DataConfig {
        DataConfig {
            image_hw: 12,
            samples_per_class: 4,
            num_classes: 3,
            num_domains: 4,
            noise_sigma: 0.05,
            ..DataConfig::default()
        }
    }

    #[test]
    fn fixed_seed_is_byte_identical() {
        let cfg = small_cfg();
        let a = generate_domains(&cfg).unwrap();
        let b = generate_domains(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn no_style_no_noise_means_no_shift() {
        let cfg = DataConfig {
            style_strength: 0.0,
            noise_sigma: 0.0,
            shortcut: Shortcut::None,
            ..small_cfg()
        };
        let ds = generate_domains(&cfg).unwrap();
        let per_domain = cfg.num_classes * cfg.samples_per_class;
        for i in 0..per_domain {
            for d in 1..cfg.num_domains {
                assert_eq!(
                    ds.images[i], ds.images[d * per_domain + i],
                    "sample {} differs between domains 0 and {}",
                    i, d
                );
            }
        }
    }

    #[test]
    fn channel_means_track_configured_gains() {
        let cfg = DataConfig {
            noise_sigma: 0.0,
            shortcut: Shortcut::None,
            samples_per_class: 24,
            ..small_cfg()
        };
        let ds = generate_domains(&cfg).unwrap();
        let mean = |d: usize, ch: usize| -> f64 {
            let idx = ds.domain_indices(d);
            let plane = cfg.image_hw * cfg.image_hw;
            let mut s = 0.0;
            for &i in &idx {
                s += ds.images[i].data()[ch * plane..(ch + 1) * plane]
                    .iter()
                    .sum::<f64>();
            }
            s / (idx.len() * plane) as f64
        };
        for d in 1..cfg.num_domains {
            let g0 = DomainSpec::for_domain(&cfg, 0).channel_gain;
            let gd = DomainSpec::for_domain(&cfg, d).channel_gain;
            for ch in 0..cfg.channels {
                let got = mean(d, ch) / mean(0, ch);
                let expect = gd[ch] / g0[ch];
                assert!(
                    (got - expect).abs() < 0.05,
                    "domain {} channel {}: ratio {} vs gain ratio {}",
                    d,
                    ch,
                    got,
                    expect
                );
            }
        }
    }

    #[test]
    fn balanced_label_marginals() {
        let cfg = small_cfg();
        let ds = generate_domains(&cfg).unwrap();
        for d in 0..cfg.num_domains {
            for c in 0..cfg.num_classes {
                let n = (0..ds.len())
                    .filter(|&i| ds.domain_ids[i] == d && ds.labels[i] == c)
                    .count();
                assert_eq!(n, cfg.samples_per_class);
            }
        }
    }

    #[test]
    fn degenerate_config_rejected() {
        assert!(generate_domains(&DataConfig {
            num_classes: 0,
            ..small_cfg()
        })
        .is_err());
        assert!(generate_domains(&DataConfig {
            num_domains: 1,
            ..small_cfg()
        })
        .is_err());
    }

    #[test]
    fn split_sources_exclude_target() {
        let ds = generate_domains(&small_cfg()).unwrap();
        let plan = make_split(&ds, 3, 7).unwrap();
        assert_eq!(plan.source_domains, vec![0, 1, 2]);
        assert!(plan.target_idx.iter().all(|&i| ds.domain_ids[i] == 3));
        assert!(make_split(&ds, 9, 7).is_err());
    }

    #[test]
    fn split_partitions_without_overlap() {
        let ds = generate_domains(&small_cfg()).unwrap();
        let plan = make_split(&ds, 1, 3).unwrap();
        let mut all: Vec<usize> = plan
            .train_idx
            .iter()
            .chain(&plan.val_idx)
            .chain(&plan.target_idx)
            .copied()
            .collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n, "splits overlap");
        assert_eq!(n, ds.len(), "splits do not cover the dataset");
    }

    #[test]
    fn val_fraction_is_a_tenth_per_domain() {
        let cfg = DataConfig {
            samples_per_class: 10,
            ..small_cfg()
        };
        let ds = generate_domains(&cfg).unwrap();
        let plan = make_split(&ds, 0, 1).unwrap();
        for &d in &plan.source_domains {
            let n_d = ds.domain_indices(d).len();
            let v_d = plan.val_idx.iter().filter(|&&i| ds.domain_ids[i] == d).count();
            let expect = (n_d as f64 * 0.1).round() as usize;
            assert!((v_d as i64 - expect as i64).abs() <= 1, "domain {}: {} vs {}", d, v_d, expect);
        }
    }

    #[test]
    fn epoch_order_is_seeded_and_varies_by_epoch() {
        let idx: Vec<usize> = (0..40).collect();
        assert_eq!(epoch_order(&idx, 5, 2), epoch_order(&idx, 5, 2));
        assert_ne!(epoch_order(&idx, 5, 2), epoch_order(&idx, 5, 3));
        let mut sorted = epoch_order(&idx, 5, 2);
        sorted.sort_unstable();
        assert_eq!(sorted, idx);
    }

    #[test]
    fn augment_all_probs_zero_is_identity() {
        let ds = generate_domains(&small_cfg()).unwrap();
        let mut rng = stream_rng(StreamKey::new(0, Purpose::Augment));
        let out = augment(&ds.images[0], &AugmentConfig::off(), &mut rng).unwrap();
        assert_eq!(out, ds.images[0]);
    }

    #[test]
    fn hflip_is_an_involution() {
        let ds = generate_domains(&small_cfg()).unwrap();
        let once = hflip(&ds.images[3]).unwrap();
        assert_ne!(once, ds.images[3]);
        assert_eq!(hflip(&once).unwrap(), ds.images[3]);
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let ds = generate_domains(&small_cfg()).unwrap();
        let kernel = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let out = conv_augment(&ds.images[5], &kernel).unwrap();
        assert!(out.max_abs_diff(&ds.images[5]) < 1e-12);
    }

    #[test]
    fn rotate_four_times_is_identity() {
        let ds = generate_domains(&small_cfg()).unwrap();
        let img = &ds.images[1];
        assert_eq!(&rotate_quarters(img, 4).unwrap(), img);
        assert_ne!(&rotate_quarters(img, 1).unwrap(), img);
    }

    #[test]
    fn export_ingest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let ds = generate_domains(&cfg).unwrap();
        export(&ds, dir.path()).unwrap();
        let back = ingest(dir.path(), cfg.image_hw).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn ingest_empty_dir_names_expected_layout() {
        let dir = tempfile::tempdir().unwrap();
        let err = ingest(dir.path(), 12).unwrap_err();
        assert!(err.to_string().contains("manifest.txt"), "{}", err);
    }

    #[test]
    fn ingest_resizes_mismatched_images() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let ds = generate_domains(&cfg).unwrap();
        export(&ds, dir.path()).unwrap();
        let back = ingest(dir.path(), 8).unwrap();
        assert_eq!(back.images[0].shape(), &[3, 8, 8]);
    }

    #[test]
    fn shortcut_patch_encodes_label_per_domain() {
        let cfg = DataConfig {
            shortcut: Shortcut::Patch {
                strength: 0.9,
                permute_per_domain: true,
            },
            noise_sigma: 0.0,
            ..small_cfg()
        };
        let ds = generate_domains(&cfg).unwrap();
        // within one domain, patch level is a function of the label
        let spec = DomainSpec::for_domain(&cfg, 0);
        let plane = cfg.image_hw * cfg.image_hw;
        for c in 0..cfg.num_classes {
            let i = (0..ds.len())
                .find(|&i| ds.domain_ids[i] == 0 && ds.labels[i] == c)
                .unwrap();
            let level = 0.9 * (spec.patch_perm[c] + 1) as f64 / cfg.num_classes as f64;
            assert!((ds.images[i].data()[0] - level.clamp(0.0, 1.0)).abs() < 1e-12);
            let _ = plane;
        }
        // permutations differ somewhere across domains
        let perms: Vec<Vec<usize>> = (0..cfg.num_domains)
            .map(|d| DomainSpec::for_domain(&cfg, d).patch_perm)
            .collect();
        assert!(perms.iter().any(|p| p != &perms[0]));
    }
}
