//! Training orchestration: leave-one-out runs, SGD with momentum, per-step
//! mask construction, the meta-learning loop, checkpoints, and evaluation.
//!
//! A non-meta step makes two passes over the batch: an identity-mask forward
//! and backward to obtain per-example activation gradients for the selection
//! scores, then a masked forward whose gradients drive the SGD update. A
//! meta run delegates each step to [`crate::meta::meta_step`]. Trailing
//! batches that cannot satisfy the step's preconditions (fewer than two
//! examples, or too small for the meta-train/meta-test split) are skipped.

use crate::config::{DatasetSource, Mode, RunConfig};
use crate::data::{self, Dataset, SplitPlan};
use crate::diagnostics::{self, EpochInputs, EpochRecord, RunRecord};
use crate::error::{Error, Result};
use crate::masking::{self, Gate, MaskSet, Mode as MaskMode};
use crate::meta::{MetaConfig, MetaState};
use crate::network::{Batch, BlockNet, Mask};
use crate::rng::{stream_rng, Purpose, StreamKey};
use crate::tape::Tape;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// What a finished run leaves behind: either plain network weights or the
/// full meta-learner state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TrainedState {
    Plain { net: BlockNet },
    Meta { state: MetaState },
}

impl TrainedState {
    pub fn net(&self) -> &BlockNet {
        match self {
            TrainedState::Plain { net } => net,
            TrainedState::Meta { state } => &state.net,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub state: TrainedState,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Parse {
            context: path.display().to_string(),
            detail: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            context: path.display().to_string(),
            detail: e.to_string(),
        })?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                context: path.display().to_string(),
                detail: format!(
                    "checkpoint version {} unsupported (expected {})",
                    ckpt.version, CHECKPOINT_VERSION
                ),
            });
        }
        Ok(ckpt)
    }
}

/// Materialize the configured dataset.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetSource::Synthetic { data } => data::generate_domains(data),
        DatasetSource::Ingest { path } => data::ingest(path, cfg.net.input_hw),
    }
}

fn chunk_batches(indices: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    indices.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// SGD-with-momentum state, one velocity tensor per parameter.
struct SgdState {
    velocity: Vec<Tensor>,
}

impl SgdState {
    fn new(net: &BlockNet) -> SgdState {
        SgdState {
            velocity: net
                .params()
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
                .collect(),
        }
    }

    /// v = momentum * v + g + wd * theta; theta -= lr * v
    fn step(&mut self, net: &mut BlockNet, grads: &[Tensor], lr: f64, momentum: f64, wd: f64) {
        for (((_, theta), v), g) in net.params_mut().iter_mut().zip(&mut self.velocity).zip(grads)
        {
            for ((tv, vv), &gv) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = momentum * *vv + gv + wd * *tv;
                *tv -= lr * *vv;
            }
        }
    }
}

/// Per-step mask construction for a non-meta run: identity forward/backward
/// for activation gradients, then the Algorithm-1 pipeline per block. A block
/// whose draw would drop every unit falls back to its identity mask.
fn step_masks(
    net: &BlockNet,
    batch: &Batch,
    cfg: &RunConfig,
    p_per_block: &[f64],
    seed: u64,
    epoch: u64,
    step: u64,
) -> Result<Vec<Option<MaskSet>>> {
    let strategy = match cfg.mode.strategy() {
        None => return Ok(vec![None; net.cfg.num_blocks()]),
        Some(s) => s,
    };
    let mut tape = Tape::new();
    let x = tape.constant(batch.images.clone());
    let identity: Vec<Mask> = (0..net.cfg.num_blocks()).map(|_| Mask::Identity).collect();
    let trace = net.forward(&mut tape, x, &identity, true)?;
    let loss = tape.softmax_cross_entropy(trace.logits, &batch.labels)?;
    let grads = tape.backward(loss)?;

    let mut masks = Vec::with_capacity(net.cfg.num_blocks());
    for b in 0..net.cfg.num_blocks() {
        let unit_shape = net.cfg.block_output_shape(b).to_vec();
        let units: usize = unit_shape.iter().product();
        let k = masking::candidate_count(cfg.candidate_fraction, units);
        let g = grads.get(trace.block_outputs[b]);
        let mut rng = stream_rng(
            StreamKey::new(seed, Purpose::MaskGate)
                .at(epoch, step)
                .block(b as u64),
        );
        let built = masking::build_mask(
            strategy,
            cfg.criterion,
            g,
            &unit_shape,
            k,
            Gate::Bernoulli(p_per_block[b]),
            cfg.block_size,
            &mut rng,
            MaskMode::Train,
        );
        match built {
            Ok(m) => masks.push(Some(m)),
            Err(Error::AllDropped) => masks.push(None),
            Err(e) => return Err(e),
        }
    }
    Ok(masks)
}

/// One masked SGD step; returns the batch loss and per-block drop fractions.
fn plain_step(
    net: &mut BlockNet,
    sgd: &mut SgdState,
    batch: &Batch,
    cfg: &RunConfig,
    p_per_block: &[f64],
    lr: f64,
    seed: u64,
    epoch: u64,
    step: u64,
) -> Result<(f64, Vec<f64>)> {
    let mask_sets = step_masks(net, batch, cfg, p_per_block, seed, epoch, step)?;
    let drop_fractions: Vec<f64> = mask_sets
        .iter()
        .map(|m| m.as_ref().map(|m| m.drop_fraction()).unwrap_or(0.0))
        .collect();
    let mut tape = Tape::new();
    let x = tape.constant(batch.images.clone());
    let masks: Vec<Mask> = mask_sets
        .iter()
        .map(|m| match m {
            None => Mask::Identity,
            Some(m) => Mask::Fixed(&m.keep, m.norm_factor),
        })
        .collect();
    let trace = net.forward(&mut tape, x, &masks, true)?;
    let loss = tape.softmax_cross_entropy(trace.logits, &batch.labels)?;
    let loss_val = tape.value(loss).item();
    if !loss_val.is_finite() {
        return Err(Error::NonFinite {
            op: format!("training loss at epoch {epoch} step {step}"),
        });
    }
    let mut grads = tape.backward(loss)?;
    let grad_vec: Vec<Tensor> = trace
        .param_ids
        .iter()
        .zip(net.params())
        .map(|(&id, (_, t))| {
            grads
                .take(id)
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();
    sgd.step(net, &grad_vec, lr, cfg.momentum, cfg.weight_decay);
    Ok((loss_val, drop_fractions))
}

/// Result of a full training run.
pub struct TrainResult {
    pub record: RunRecord,
    pub state: TrainedState,
    pub split: SplitPlan,
}

/// Train per the config on a leave-one-out split of `ds`. `p_override`
/// substitutes per-block drop ratios for the scalar `p_gsnr` (ratio sweeps).
pub fn train_on(ds: &Dataset, cfg: &RunConfig, p_override: Option<&[f64]>) -> Result<TrainResult> {
    let cfg = cfg.clone().resolve()?;
    let split = data::make_split(ds, cfg.target_domain, cfg.seed)?;
    let nb = cfg.net.num_blocks();
    let p_fixed: Vec<f64> = match p_override {
        Some(p) => {
            if p.len() != nb {
                return Err(Error::Config {
                    field: "p_override".into(),
                    detail: format!("{} ratios for {} blocks", p.len(), nb),
                });
            }
            p.to_vec()
        }
        None => vec![cfg.p_gsnr; nb],
    };

    let net = BlockNet::init(cfg.net.clone(), cfg.seed)?;
    let mut sgd = SgdState::new(&net);
    let mut plain: Option<BlockNet> = None;
    let mut meta: Option<MetaState> = None;
    if cfg.meta {
        meta = Some(MetaState::new(
            net,
            MetaConfig {
                alpha_init: cfg.alpha_init,
                p_init: cfg.p_gsnr,
                beta: cfg.beta,
                gamma: cfg.gamma,
                mtr_fraction: cfg.mtr_fraction,
                k_mte: cfg.k_mte,
                candidate_fraction: cfg.candidate_fraction,
                second_order: cfg.second_order,
            },
        )?);
    } else {
        plain = Some(net);
    }

    let probe_idx: Vec<usize> = {
        let shuffled = data::epoch_order(&split.train_idx, cfg.seed, u64::MAX);
        shuffled.into_iter().take(32).collect()
    };
    if probe_idx.len() < 2 {
        return Err(Error::BatchTooSmall {
            need: 2,
            got: probe_idx.len(),
        });
    }
    let probe = ds.batch(&probe_idx)?;
    let val_batches: Vec<Batch> = chunk_batches(&split.val_idx, cfg.batch_size)
        .iter()
        .map(|c| ds.batch(c))
        .collect::<Result<_>>()?;
    let target_batches: Vec<Batch> = chunk_batches(&split.target_idx, cfg.batch_size)
        .iter()
        .map(|c| ds.batch(c))
        .collect::<Result<_>>()?;

    let config_json = serde_json::to_value(&cfg).map_err(|e| Error::Parse {
        context: "config".into(),
        detail: e.to_string(),
    })?;
    let mut record = RunRecord::new(cfg.run_id(), cfg.seed, config_json);

    for epoch in 0..cfg.epochs {
        let lr = if epoch >= cfg.lr_decay_epoch {
            cfg.lr * 0.1
        } else {
            cfg.lr
        };
        let order = data::epoch_order(&split.train_idx, cfg.seed, epoch as u64);
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        let mut drop_sums = vec![0.0; nb];
        let mut drop_n = 0usize;
        for (step, chunk) in chunk_batches(&order, cfg.batch_size).into_iter().enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            if cfg.meta {
                let n = chunk.len();
                let n_mtr = (cfg.mtr_fraction * n as f64).floor() as usize;
                if n_mtr < 2 || n - n_mtr < cfg.k_mte {
                    continue;
                }
            }
            let batch = if cfg.augment {
                data::augmented_batch(ds, &chunk, &data::AugmentConfig::default(), cfg.seed, epoch as u64)?
            } else {
                ds.batch(&chunk)?
            };
            if let Some(state) = meta.as_mut() {
                // Algorithm-2 outer gradients; theta follows the same
                // momentum schedule as plain runs, alpha and p the outer
                // rate beta.
                let frozen = crate::meta::prepare_step(
                    state,
                    &batch,
                    cfg.seed,
                    epoch as u64,
                    step as u64,
                )?;
                let p = state.p_per_block.clone();
                let (grads, report) =
                    crate::meta::outer_gradients(state, &batch, &frozen, &p)?;
                if !report.loss_combined.is_finite() {
                    return Err(Error::NonFinite {
                        op: format!("training loss at epoch {epoch} step {step}"),
                    });
                }
                sgd.step(&mut state.net, &grads.theta, lr, cfg.momentum, cfg.weight_decay);
                for (a, g) in state.alpha.iter_mut().zip(&grads.alpha) {
                    for (av, &gv) in a.data_mut().iter_mut().zip(g.data()) {
                        *av -= cfg.beta * gv;
                    }
                }
                for (pv, &gv) in state.p_per_block.iter_mut().zip(&grads.p) {
                    *pv = (*pv - cfg.beta * gv).clamp(0.0, 1.0);
                }
                loss_sum += report.loss_combined;
                for (s, d) in drop_sums.iter_mut().zip(&report.drop_fractions) {
                    *s += d;
                }
            } else {
                let net = plain.as_mut().unwrap();
                let (loss, drops) = plain_step(
                    net,
                    &mut sgd,
                    &batch,
                    &cfg,
                    &p_fixed,
                    lr,
                    cfg.seed,
                    epoch as u64,
                    step as u64,
                )?;
                loss_sum += loss;
                for (s, d) in drop_sums.iter_mut().zip(&drops) {
                    *s += d;
                }
            }
            loss_n += 1;
            drop_n += 1;
        }
        if loss_n == 0 {
            return Err(Error::BatchTooSmall {
                need: 2,
                got: split.train_idx.len(),
            });
        }

        let net_ref: &BlockNet = match (&meta, &plain) {
            (Some(s), _) => &s.net,
            (None, Some(n)) => n,
            _ => unreachable!(),
        };
        let p_now: Option<Vec<f64>> = if cfg.meta {
            Some(meta.as_ref().unwrap().p_per_block.clone())
        } else if cfg.mode != Mode::Baseline {
            Some(p_fixed.clone())
        } else {
            None
        };
        let drop_now = (drop_n > 0 && cfg.mode != Mode::Baseline || cfg.meta).then(|| {
            drop_sums.iter().map(|s| s / drop_n as f64).collect::<Vec<f64>>()
        });
        let entry: EpochRecord = diagnostics::track_epoch(
            net_ref,
            EpochInputs {
                epoch,
                train_loss: Some(loss_sum / loss_n as f64),
                val: &val_batches,
                target: &target_batches,
                probe: Some(&probe),
                p_per_block: p_now,
                drop_fractions: drop_now,
                seed: cfg.seed,
                osgr_n: split.train_idx.len(),
            },
        )?;
        record.push(entry)?;
    }

    let state = match meta {
        Some(state) => TrainedState::Meta { state },
        None => TrainedState::Plain {
            net: plain.unwrap(),
        },
    };
    Ok(TrainResult {
        record,
        state,
        split,
    })
}

/// Full `train` command: train, then write metrics, checkpoint, and the
/// resolved config into `out_dir`.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainResult> {
    let cfg = cfg.clone().resolve()?;
    let ds = load_dataset(&cfg)?;
    let result = train_on(&ds, &cfg, None)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    diagnostics::emit(&result.record, out_dir)?;
    Checkpoint {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        state: result.state.clone(),
    }
    .save(&out_dir.join("checkpoint.json"))?;
    let toml_text = toml::to_string_pretty(&cfg).map_err(|e| Error::Parse {
        context: "config".into(),
        detail: e.to_string(),
    })?;
    std::fs::write(out_dir.join("config.toml"), toml_text)
        .map_err(|e| Error::io(out_dir.join("config.toml").display().to_string(), e))?;
    Ok(result)
}

/// Accuracy of a trained net on a dataset, overall and broken down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub domain: Option<usize>,
    pub overall: f64,
    pub per_domain: Vec<(usize, f64)>,
    pub per_class: Vec<(usize, f64)>,
    pub examples: usize,
}

/// Inference-mode evaluation (identity masks) on `ds`, optionally restricted
/// to one domain.
pub fn evaluate(net: &BlockNet, ds: &Dataset, domain: Option<usize>, batch_size: usize) -> Result<EvalReport> {
    let idx: Vec<usize> = match domain {
        Some(d) => ds.domain_indices(d),
        None => (0..ds.len()).collect(),
    };
    if idx.is_empty() {
        return Err(Error::InvalidArg("evaluate: no examples selected".into()));
    }
    let mut dom_hits = vec![(0usize, 0usize); ds.num_domains];
    let mut cls_hits = vec![(0usize, 0usize); ds.num_classes];
    let mut correct = 0usize;
    for chunk in idx.chunks(batch_size.max(1)) {
        let b = ds.batch(chunk)?;
        let pred = net.predict(&b)?;
        for ((p, &l), &d) in pred.iter().zip(&b.labels).zip(&b.domain_ids) {
            let hit = *p == l;
            correct += hit as usize;
            dom_hits[d].1 += 1;
            dom_hits[d].0 += hit as usize;
            cls_hits[l].1 += 1;
            cls_hits[l].0 += hit as usize;
        }
    }
    let frac = |(h, n): (usize, usize)| h as f64 / n as f64;
    Ok(EvalReport {
        domain,
        overall: correct as f64 / idx.len() as f64,
        per_domain: dom_hits
            .iter()
            .enumerate()
            .filter(|(_, &(_, n))| n > 0)
            .map(|(d, &hn)| (d, frac(hn)))
            .collect(),
        per_class: cls_hits
            .iter()
            .enumerate()
            .filter(|(_, &(_, n))| n > 0)
            .map(|(c, &hn)| (c, frac(hn)))
            .collect(),
        examples: idx.len(),
    })
}

/// `eval` command: load a checkpoint and evaluate on the configured dataset.
pub fn cmd_eval(checkpoint: &Path, domain: Option<usize>) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let ds = load_dataset(&ckpt.config)?;
    evaluate(
        ckpt.state.net(),
        &ds,
        domain,
        ckpt.config.batch_size,
    )
}

/// One cell of an ablation matrix.
#[derive(Debug, Clone)]
pub struct AblateCell {
    pub label: String,
    pub cfg: RunConfig,
}

/// Per-cell ablation outcome: seed-wise target accuracies with mean and
/// (population) standard deviation; failed seeds recorded, not fatal.
#[derive(Debug, Clone, Serialize)]
pub struct AblateRow {
    pub label: String,
    pub mean: f64,
    pub std: f64,
    pub accuracies: Vec<(u64, f64)>,
    pub failures: Vec<(u64, String)>,
}

fn run_ablate_cell(cell: &AblateCell, seeds: &[u64]) -> AblateRow {
    let mut accuracies = Vec::new();
    let mut failures = Vec::new();
    for &seed in seeds {
        let mut cfg = cell.cfg.clone();
        cfg.seed = seed;
        let outcome = (|| -> Result<f64> {
            let cfg = cfg.resolve()?;
            let ds = load_dataset(&cfg)?;
            let result = train_on(&ds, &cfg, None)?;
            let report = evaluate(
                result.state.net(),
                &ds,
                Some(cfg.target_domain),
                cfg.batch_size,
            )?;
            Ok(report.overall)
        })();
        match outcome {
            Ok(acc) => accuracies.push((seed, acc)),
            Err(e) => failures.push((seed, e.to_string())),
        }
    }
    let n = accuracies.len().max(1) as f64;
    let mean = accuracies.iter().map(|&(_, a)| a).sum::<f64>() / n;
    let var = accuracies
        .iter()
        .map(|&(_, a)| (a - mean) * (a - mean))
        .sum::<f64>()
        / n;
    AblateRow {
        label: cell.label.clone(),
        mean,
        std: var.sqrt(),
        accuracies,
        failures,
    }
}

/// Run a {cell} x {seed} ablation matrix; cells run in parallel when the
/// `parallel` feature is on. Needs at least two cells to compare.
pub fn cmd_ablate(cells: &[AblateCell], seeds: &[u64]) -> Result<Vec<AblateRow>> {
    if cells.len() < 2 {
        return Err(Error::InvalidArg(format!(
            "ablation needs at least 2 cells, got {}",
            cells.len()
        )));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidArg("ablation needs at least 1 seed".into()));
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        Ok(cells.par_iter().map(|c| run_ablate_cell(c, seeds)).collect())
    }
    #[cfg(not(feature = "parallel"))]
    {
        Ok(cells.iter().map(|c| run_ablate_cell(c, seeds)).collect())
    }
}

/// One entry of a dropout-ratio sweep: per-block ratios and the resulting
/// target accuracy.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub p_per_block: Vec<f64>,
    pub target_accuracy: f64,
}

/// Train one run per grid point (per-block drop ratios) and report target
/// accuracy per configuration. `budget` caps the number of runs; exceeding
/// it truncates the grid and sets the flag.
pub fn cmd_sweep_p(cfg: &RunConfig, grid: &[Vec<f64>], budget: usize) -> Result<(Vec<SweepRow>, bool)> {
    if grid.is_empty() {
        return Err(Error::InvalidArg("sweep needs a non-empty grid".into()));
    }
    let truncated = grid.len() > budget;
    let points = &grid[..grid.len().min(budget)];
    let cfg = cfg.clone().resolve()?;
    let ds = load_dataset(&cfg)?;
    let run_point = |p: &Vec<f64>| -> Result<SweepRow> {
        let result = train_on(&ds, &cfg, Some(p))?;
        let report = evaluate(
            result.state.net(),
            &ds,
            Some(cfg.target_domain),
            cfg.batch_size,
        )?;
        Ok(SweepRow {
            p_per_block: p.clone(),
            target_accuracy: report.overall,
        })
    };
    #[cfg(feature = "parallel")]
    let rows: Result<Vec<SweepRow>> = {
        use rayon::prelude::*;
        points.par_iter().map(run_point).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let rows: Result<Vec<SweepRow>> = points.iter().map(run_point).collect();
    Ok((rows?, truncated))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DataConfig, Shortcut};
    use crate::masking::Criterion;
    use crate::network::NetConfig;

    fn tiny_config(mode: Mode, meta: bool, epochs: usize) -> RunConfig {
        RunConfig {
            dataset: DatasetSource::Synthetic {
                data: DataConfig {
                    image_hw: 8,
                    channels: 2,
                    num_classes: 3,
                    num_domains: 3,
                    samples_per_class: 6,
                    seed: 1,
                    style_strength: 1.0,
                    noise_sigma: 0.05,
                    shortcut: Shortcut::None,
                },
            },
            net: NetConfig {
                input_hw: 8,
                in_channels: 2,
                widths: vec![4, 4],
                num_classes: 3,
            },
            mode,
            meta,
            criterion: Criterion::Gsnr,
            epochs,
            batch_size: 8,
            k_mte: 2,
            lr_decay_epoch: 1,
            ..RunConfig::default()
        }
    }

    #[test]
    fn baseline_training_is_deterministic() {
        let cfg = tiny_config(Mode::Baseline, false, 2);
        let ds = load_dataset(&cfg).unwrap();
        let a = train_on(&ds, &cfg, None).unwrap();
        let b = train_on(&ds, &cfg, None).unwrap();
        assert_eq!(a.record, b.record);
        assert_eq!(a.state, b.state);
        assert_eq!(a.record.entries.len(), 2);
        assert!(a.record.entries[0].train_loss.unwrap().is_finite());
    }

    #[test]
    fn dropout_run_logs_drop_fractions() {
        let cfg = tiny_config(Mode::Dropblock, false, 1);
        let ds = load_dataset(&cfg).unwrap();
        let r = train_on(&ds, &cfg, None).unwrap();
        let e = &r.record.entries[0];
        assert_eq!(e.p_per_block.as_ref().unwrap().len(), 2);
        let drops = e.drop_fractions.as_ref().unwrap();
        assert!(drops.iter().any(|&d| d > 0.0), "{drops:?}");
        assert!(drops.iter().all(|&d| (0.0..=1.0).contains(&d)));
    }

    #[test]
    fn meta_run_updates_p_and_checkpoints_round_trip() {
        let mut cfg = tiny_config(Mode::Dropblock, true, 2);
        cfg.beta = 0.05; // large outer step so p visibly moves
        let ds = load_dataset(&cfg).unwrap();
        let r = train_on(&ds, &cfg, None).unwrap();
        let p = r.record.entries[1].p_per_block.as_ref().unwrap();
        assert!(p.iter().any(|&v| v != 0.5), "meta left p untouched: {p:?}");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            config: cfg.clone().resolve().unwrap(),
            state: r.state.clone(),
        };
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt, "checkpoint round trip must be bit-exact");
    }

    #[test]
    fn cmd_train_writes_artifacts_and_eval_matches_log() {
        let cfg = tiny_config(Mode::Dropout, false, 1);
        let dir = tempfile::tempdir().unwrap();
        let r = cmd_train(&cfg, dir.path()).unwrap();
        assert!(dir.path().join("metrics.jsonl").exists());
        assert!(dir.path().join("config.toml").exists());
        let report = cmd_eval(&dir.path().join("checkpoint.json"), Some(cfg.target_domain)).unwrap();
        let logged = r.record.entries.last().unwrap().target_accuracy.unwrap();
        assert!(
            (report.overall - logged).abs() <= 1e-12,
            "{} vs {}",
            report.overall,
            logged
        );
    }

    #[test]
    fn p_override_must_match_block_count() {
        let cfg = tiny_config(Mode::Dropout, false, 1);
        let ds = load_dataset(&cfg).unwrap();
        assert!(train_on(&ds, &cfg, Some(&[0.5])).is_err());
        assert!(train_on(&ds, &cfg, Some(&[0.2, 0.8])).is_ok());
    }

    #[test]
    fn ablate_two_cells_two_rows_and_identical_configs_match() {
        let cfg = tiny_config(Mode::Dropout, false, 1);
        let cells = vec![
            AblateCell {
                label: "a".into(),
                cfg: cfg.clone(),
            },
            AblateCell {
                label: "b".into(),
                cfg: cfg.clone(),
            },
        ];
        let rows = cmd_ablate(&cells, &[0]).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].accuracies, rows[1].accuracies, "identical cells");
        assert!(rows[0].failures.is_empty());
        assert!(cmd_ablate(&cells[..1], &[0]).is_err(), "needs >= 2 cells");
    }

    #[test]
    fn sweep_row_count_and_budget_truncation() {
        let cfg = tiny_config(Mode::Dropout, false, 1);
        let grid = vec![vec![0.3, 0.3], vec![0.7, 0.7]];
        let (rows, truncated) = cmd_sweep_p(&cfg, &grid, 10).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(!truncated);
        let (rows, truncated) = cmd_sweep_p(&cfg, &grid, 1).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(truncated);
        // rerun of a config matches its sweep entry
        let ds = load_dataset(&cfg).unwrap();
        let r = train_on(&ds, &cfg, Some(&[0.3, 0.3])).unwrap();
        let again = evaluate(r.state.net(), &ds, Some(cfg.target_domain), cfg.batch_size).unwrap();
        assert_eq!(again.overall, rows[0].target_accuracy);
    }

    #[test]
    fn checkpoint_version_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        let cfg = tiny_config(Mode::Baseline, false, 1).resolve().unwrap();
        let net = BlockNet::init(cfg.net.clone(), 0).unwrap();
        let mut ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            config: cfg,
            state: TrainedState::Plain { net },
        };
        ckpt.version = 99;
        ckpt.save(&path).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
