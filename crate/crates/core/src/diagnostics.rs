//! Generalization diagnostics and metric persistence.
//!
//! Stiffness measures gradient alignment across example pairs: cosine for
//! same-label pairs, sign of the dot product for different-label pairs,
//! both over per-example parameter gradients. Epoch records bundle the
//! tracked quantities (losses, accuracies, mean GSNR, stiffness, learned p,
//! OSGR) and persist as line-delimited JSON plus plot-ready CSVs.

use crate::error::{Error, Result};
use crate::gsnr::{osgr_from_stats, param_gradient_stats};
use crate::network::{per_example_param_grads, Batch, BlockNet};
use crate::rng::{stream_rng, Purpose, StreamKey};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

/// Format version of the metrics file.
pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Cosine of the angle between two gradient vectors (same-label pairs).
pub fn stiffness_cos(g_i: &[f64], g_j: &[f64]) -> Result<f64> {
    if g_i.len() != g_j.len() {
        return Err(Error::shape("stiffness_cos", "gradient lengths differ"));
    }
    let ni: f64 = g_i.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nj: f64 = g_j.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ni == 0.0 || nj == 0.0 {
        return Err(Error::InvalidArg("stiffness_cos: zero-norm gradient".into()));
    }
    let dot: f64 = g_i.iter().zip(g_j).map(|(a, b)| a * b).sum();
    Ok((dot / (ni * nj)).clamp(-1.0, 1.0))
}

/// Sign of the inner product (different-label pairs): -1, 0, or +1.
pub fn stiffness_sign(g_i: &[f64], g_j: &[f64]) -> Result<f64> {
    if g_i.len() != g_j.len() {
        return Err(Error::shape("stiffness_sign", "gradient lengths differ"));
    }
    let dot: f64 = g_i.iter().zip(g_j).map(|(a, b)| a * b).sum();
    Ok(if dot > 0.0 {
        1.0
    } else if dot < 0.0 {
        -1.0
    } else {
        0.0
    })
}

/// Up to `max_pairs` same-label and `max_pairs` different-label index pairs,
/// sampled without replacement, seeded.
pub fn sample_pairs(
    labels: &[usize],
    max_pairs: usize,
    seed: u64,
    epoch: u64,
) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let n = labels.len();
    let mut same = Vec::new();
    let mut diff = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if labels[i] == labels[j] {
                same.push((i, j));
            } else {
                diff.push((i, j));
            }
        }
    }
    let mut rng = stream_rng(StreamKey::new(seed, Purpose::Pairs).at(epoch, 0));
    same.shuffle(&mut rng);
    diff.shuffle(&mut rng);
    same.truncate(max_pairs);
    diff.truncate(max_pairs);
    (same, diff)
}

/// Batch stiffness over per-example parameter gradients: mean cosine over
/// same-label pairs and mean sign over different-label pairs. Zero-norm
/// pairs are skipped and counted.
pub struct StiffnessReport {
    pub intra_cos: Option<f64>,
    pub inter_sign: Option<f64>,
    pub skipped_pairs: usize,
}

pub fn batch_stiffness(net: &BlockNet, probe: &Batch, seed: u64, epoch: u64) -> Result<StiffnessReport> {
    let per = per_example_param_grads(net, probe)?;
    let flat: Vec<Vec<f64>> = per
        .iter()
        .map(|ex| ex.iter().flat_map(|t| t.data().iter().copied()).collect())
        .collect();
    let (same, diff) = sample_pairs(&probe.labels, 256, seed, epoch);
    let mut skipped = 0usize;

    let mut cos_sum = 0.0;
    let mut cos_n = 0usize;
    for &(i, j) in &same {
        match stiffness_cos(&flat[i], &flat[j]) {
            Ok(c) => {
                cos_sum += c;
                cos_n += 1;
            }
            Err(_) => skipped += 1,
        }
    }
    let mut sign_sum = 0.0;
    let mut sign_n = 0usize;
    for &(i, j) in &diff {
        sign_sum += stiffness_sign(&flat[i], &flat[j])?;
        sign_n += 1;
    }
    Ok(StiffnessReport {
        intra_cos: (cos_n > 0).then(|| cos_sum / cos_n as f64),
        inter_sign: (sign_n > 0).then(|| sign_sum / sign_n as f64),
        skipped_pairs: skipped,
    })
}

/// One epoch's tracked metrics; absent metrics are explicit nulls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub target_accuracy: Option<f64>,
    pub mean_gsnr: Option<f64>,
    pub stiffness_intra: Option<f64>,
    pub stiffness_inter: Option<f64>,
    pub stiffness_skipped: Option<usize>,
    pub osgr: Option<f64>,
    pub p_per_block: Option<Vec<f64>>,
    pub drop_fractions: Option<Vec<f64>>,
}

/// A whole run: identification, config snapshot, and per-epoch entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub run_id: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub entries: Vec<EpochRecord>,
}

impl RunRecord {
    pub fn new(run_id: impl Into<String>, seed: u64, config: serde_json::Value) -> RunRecord {
        RunRecord {
            schema_version: METRICS_SCHEMA_VERSION,
            run_id: run_id.into(),
            seed,
            config,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, entry: EpochRecord) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if entry.epoch <= last.epoch {
                return Err(Error::InvalidArg(format!(
                    "epoch {} not after {}",
                    entry.epoch, last.epoch
                )));
            }
        }
        self.entries.push(entry);
        Ok(())
    }
}

/// Mean prediction accuracy over batches.
pub fn accuracy(net: &BlockNet, batches: &[Batch]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for b in batches {
        let pred = net.predict(b)?;
        correct += pred.iter().zip(&b.labels).filter(|(p, l)| p == l).count();
        total += b.len();
    }
    if total == 0 {
        return Err(Error::InvalidArg("accuracy: no examples".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Inputs for one epoch snapshot; any omitted piece yields a null metric.
pub struct EpochInputs<'a> {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val: &'a [Batch],
    pub target: &'a [Batch],
    /// Probe batch for gradient statistics (mean GSNR, stiffness, OSGR).
    pub probe: Option<&'a Batch>,
    pub p_per_block: Option<Vec<f64>>,
    pub drop_fractions: Option<Vec<f64>>,
    pub seed: u64,
    /// Dataset size used by the OSGR estimator.
    pub osgr_n: usize,
}

/// Compute one epoch record. Read-only with respect to the network.
pub fn track_epoch(net: &BlockNet, inputs: EpochInputs) -> Result<EpochRecord> {
    let val_accuracy = if inputs.val.is_empty() {
        None
    } else {
        Some(accuracy(net, inputs.val)?)
    };
    let target_accuracy = if inputs.target.is_empty() {
        None
    } else {
        Some(accuracy(net, inputs.target)?)
    };
    let (mean_gsnr, stiffness, osgr) = match inputs.probe {
        None => (None, None, None),
        Some(probe) => {
            let per = per_example_param_grads(net, probe)?;
            let stats = param_gradient_stats(&per)?;
            let (mut total, mut count) = (0.0, 0usize);
            for s in &stats {
                total += s.ratio.sum();
                count += s.ratio.numel();
            }
            let osgr = osgr_from_stats(&stats, inputs.osgr_n.max(1)).ok();
            let stiff = batch_stiffness(net, probe, inputs.seed, inputs.epoch as u64)?;
            (Some(total / count as f64), Some(stiff), osgr)
        }
    };
    let (stiffness_intra, stiffness_inter, stiffness_skipped) = match stiffness {
        None => (None, None, None),
        Some(s) => (s.intra_cos, s.inter_sign, Some(s.skipped_pairs)),
    };
    Ok(EpochRecord {
        epoch: inputs.epoch,
        train_loss: inputs.train_loss,
        val_accuracy,
        target_accuracy,
        mean_gsnr,
        stiffness_intra,
        stiffness_inter,
        stiffness_skipped,
        osgr,
        p_per_block: inputs.p_per_block,
        drop_fractions: inputs.drop_fractions,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum MetricsLine {
    Header {
        schema_version: u32,
        run_id: String,
        seed: u64,
        config: serde_json::Value,
    },
    Epoch {
        run_id: String,
        #[serde(flatten)]
        entry: EpochRecord,
    },
}

/// Append the run to `metrics.jsonl` in `dir` (one header line, one line per
/// epoch) and rewrite the plot-ready CSVs.
pub fn emit(record: &RunRecord, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let path = dir.join("metrics.jsonl");
    let ctx = || path.display().to_string();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(ctx(), e))?;
    let mut text = serde_json::to_string(&MetricsLine::Header {
        schema_version: record.schema_version,
        run_id: record.run_id.clone(),
        seed: record.seed,
        config: record.config.clone(),
    })
    .map_err(|e| Error::Parse {
        context: ctx(),
        detail: e.to_string(),
    })?;
    text.push('\n');
    for entry in &record.entries {
        text.push_str(
            &serde_json::to_string(&MetricsLine::Epoch {
                run_id: record.run_id.clone(),
                entry: entry.clone(),
            })
            .map_err(|e| Error::Parse {
                context: ctx(),
                detail: e.to_string(),
            })?,
        );
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(ctx(), e))?;

    let write_csv = |name: &str, header: &str, rows: Vec<String>| -> Result<()> {
        let p = dir.join(name);
        let mut body = String::from(header);
        body.push('\n');
        for r in rows {
            body.push_str(&r);
            body.push('\n');
        }
        std::fs::write(&p, body).map_err(|e| Error::io(p.display().to_string(), e))
    };
    write_csv(
        "gsnr_over_time.csv",
        "epoch,mean_gsnr",
        record
            .entries
            .iter()
            .filter_map(|e| e.mean_gsnr.map(|g| format!("{},{}", e.epoch, g)))
            .collect(),
    )?;
    write_csv(
        "p_per_block.csv",
        "epoch,block,p",
        record
            .entries
            .iter()
            .filter_map(|e| e.p_per_block.as_ref().map(|ps| (e.epoch, ps)))
            .flat_map(|(ep, ps)| {
                ps.iter()
                    .enumerate()
                    .map(move |(b, p)| format!("{},{},{}", ep, b, p))
                    .collect::<Vec<_>>()
            })
            .collect(),
    )?;
    write_csv(
        "stiffness.csv",
        "epoch,intra_cos,inter_sign",
        record
            .entries
            .iter()
            .filter(|e| e.stiffness_intra.is_some() || e.stiffness_inter.is_some())
            .map(|e| {
                format!(
                    "{},{},{}",
                    e.epoch,
                    e.stiffness_intra.map(|v| v.to_string()).unwrap_or_default(),
                    e.stiffness_inter.map(|v| v.to_string()).unwrap_or_default()
                )
            })
            .collect(),
    )
}

/// Parse every run appended to a metrics file, in order.
pub fn read_runs(path: &Path) -> Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut runs: Vec<RunRecord> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: MetricsLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            context: format!("{} line {}", path.display(), ln + 1),
            detail: e.to_string(),
        })?;
        match parsed {
            MetricsLine::Header {
                schema_version,
                run_id,
                seed,
                config,
            } => runs.push(RunRecord {
                schema_version,
                run_id,
                seed,
                config,
                entries: Vec::new(),
            }),
            MetricsLine::Epoch { run_id, entry } => {
                let run = runs
                    .iter_mut()
                    .rev()
                    .find(|r| r.run_id == run_id)
                    .ok_or_else(|| Error::Parse {
                        context: format!("{} line {}", path.display(), ln + 1),
                        detail: format!("epoch record for unknown run `{}`", run_id),
                    })?;
                run.entries.push(entry);
            }
        }
    }
    Ok(runs)
}
