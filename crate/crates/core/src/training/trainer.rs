//! The epoch loop: sample, augment, forward, dice loss, backward, Adam.

use std::fmt::Write as _;
use std::sync::mpsc::sync_channel;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::augment::{augment_patch, AugmentConfig};
use super::loss::multiple_dice_loss;
use super::sampling::{sample_patch, Patch};
use crate::error::{Error, Result};
use crate::inference::{predict_volume, SlidingWindowPlan, DEFAULT_STEPS};
use crate::metrics::dice_region;
use crate::network::{build_network, AlbuNet, Mode, NetworkConfig, NetworkParams};
use crate::rng::{derive_seed, stream_rng};
use crate::tensor::Tensor;
use crate::volume::{
    class_index, crop, nonzero_bounding_box, regions_from_labels, MultiModalScan, NormRegion, SegmentationMap,
    NUM_CLASSES,
};
use crate::weights::WeightStore;

const INIT_STREAM: u64 = 0x1417;
const BATCH_STREAM_BASE: u64 = 1 << 32;

/// A scan with its reference labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub scan: MultiModalScan,
    pub seg: SegmentationMap,
}

impl Case {
    /// Per-channel z-scores, then both cropped to the scan's nonzero box.
    pub fn prepared(&self, region: NormRegion) -> Result<Case> {
        let bbox = nonzero_bounding_box(&self.scan)?;
        let (scan, seg) = crop(&self.scan.normalized(region)?, Some(&self.seg), &bbox)?;
        Ok(Case { scan, seg: seg.expect("labels given") })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub patch_shape: [usize; 3],
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Keep batch-norm running statistics fixed and use them in training.
    pub freeze_bn: bool,
    /// Sliding-window steps for per-epoch validation.
    pub val_steps: [usize; 3],
    pub norm_region: NormRegion,
}

impl TrainConfig {
    /// Volumetric training: 24×128×128 patches, 24 per batch.
    pub fn volumetric() -> Self {
        TrainConfig {
            patch_shape: [24, 128, 128],
            batch_size: 24,
            learning_rate: 1e-3,
            epochs: 50,
            batches_per_epoch: 100,
            seed: 0,
            augment: AugmentConfig::default(),
            freeze_bn: false,
            val_steps: DEFAULT_STEPS,
            norm_region: NormRegion::Nonzero,
        }
    }

    /// Slice-wise training: 1×128×128 patches, 64 per batch.
    pub fn slicewise() -> Self {
        TrainConfig { patch_shape: [1, 128, 128], batch_size: 64, ..Self::volumetric() }
    }

    pub fn validate(&self) -> Result<()> {
        let [d, h, w] = self.patch_shape;
        if d == 0 || h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!(
                "patch_shape {:?}: H and W must be positive multiples of 32",
                self.patch_shape
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.val_steps.contains(&0) {
            return Err(Error::Config("val_steps must be positive".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::volumetric()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Mean validation dice for ET, WT, TC (NaN without validation cases).
    pub val_dice: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub pretrained: bool,
    pub epochs: Vec<EpochRecord>,
}

const LOG_HEADER: &str = "epoch\tloss\tET\tWT\tTC";

impl TrainRun {
    /// Tab-separated log, one row per epoch.
    pub fn to_log(&self) -> String {
        let mut s = format!("{LOG_HEADER}\n");
        for e in &self.epochs {
            writeln!(
                s,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                e.epoch, e.loss, e.val_dice[0], e.val_dice[1], e.val_dice[2]
            )
            .unwrap();
        }
        s
    }

    pub fn parse_log(text: &str) -> Result<Vec<EpochRecord>> {
        let mut lines = text.lines();
        if lines.next() != Some(LOG_HEADER) {
            return Err(Error::Config("training log header missing".into()));
        }
        lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split('\t').collect();
                let bad = || Error::Config(format!("bad training log row: {l}"));
                if f.len() != 5 {
                    return Err(bad());
                }
                let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
                Ok(EpochRecord {
                    epoch: f[0].parse().map_err(|_| bad())?,
                    loss: num(f[1])?,
                    val_dice: [num(f[2])?, num(f[3])?, num(f[4])?],
                })
            })
            .collect()
    }

    pub fn final_dice(&self) -> Option<[f64; 3]> {
        self.epochs.last().map(|e| e.val_dice)
    }
}

pub struct Trained {
    pub run: TrainRun,
    pub net: AlbuNet,
    pub params: NetworkParams<f32>,
}

/// Batch `(B, 3, D, H, W)` inputs and one-hot `(B, 4, D, H, W)` targets.
pub fn batch_tensors(patches: &[Patch]) -> (Tensor<f32>, Tensor<f32>) {
    let [d, h, w] = patches[0].dims;
    let n = d * h * w;
    let b = patches.len();
    let mut input = Vec::with_capacity(b * 3 * n);
    let mut target = vec![0.0f32; b * NUM_CLASSES * n];
    for (bi, p) in patches.iter().enumerate() {
        input.extend_from_slice(&p.input);
        for (i, &l) in p.labels.iter().enumerate() {
            let c = class_index(l).expect("codebook label");
            target[(bi * NUM_CLASSES + c) * n + i] = 1.0;
        }
    }
    (
        Tensor::from_vec(&[b, 3, d, h, w], input).expect("batch shape"),
        Tensor::from_vec(&[b, NUM_CLASSES, d, h, w], target).expect("batch shape"),
    )
}

/// The batch for global iteration `iteration`; depends only on the seed and
/// the iteration index.
pub fn make_batch(cases: &[Case], cfg: &TrainConfig, iteration: u64) -> Vec<Patch> {
    let mut rng = stream_rng(cfg.seed, BATCH_STREAM_BASE + iteration);
    (0..cfg.batch_size)
        .map(|_| {
            use rand::Rng;
            let c = &cases[rng.random_range(0..cases.len())];
            let mut p = sample_patch(&c.scan, &c.seg, cfg.patch_shape, &mut rng);
            augment_patch(&mut p, &cfg.augment, &mut rng);
            p
        })
        .collect()
}

/// Mean region dice (ET, WT, TC) of sliding-window predictions over
/// prepared cases.
pub fn evaluate_region_dice(
    net: &AlbuNet,
    params: &NetworkParams<f32>,
    cases: &[Case],
    patch: [usize; 3],
    steps: [usize; 3],
) -> Result<Vec<[f64; 3]>> {
    cases
        .iter()
        .map(|c| {
            let plan = SlidingWindowPlan::new(c.scan.dims(), patch, steps)?;
            let (_, pred) = predict_volume(net, params, &c.scan, &plan)?;
            let rp = regions_from_labels(&pred);
            let rr = regions_from_labels(&c.seg);
            let mut d = [0.0; 3];
            for k in 0..3 {
                d[k] = dice_region(&rp[k], &rr[k])?;
            }
            Ok(d)
        })
        .collect()
}

pub fn mean_dice(per_case: &[[f64; 3]]) -> [f64; 3] {
    if per_case.is_empty() {
        return [f64::NAN; 3];
    }
    [0, 1, 2].map(|k| per_case.iter().map(|d| d[k]).sum::<f64>() / per_case.len() as f64)
}

/// Initial parameters: seeded random draw, then encoder tensors replaced from
/// `pretrained` when given.
pub fn initial_params(
    net_cfg: &NetworkConfig,
    seed: u64,
    pretrained: Option<&WeightStore>,
) -> Result<(AlbuNet, NetworkParams<f32>)> {
    let (net, mut params) = build_network::<f32>(net_cfg.clone(), derive_seed(seed, INIT_STREAM))?;
    if let Some(store) = pretrained {
        params.load_pretrained(store, true)?;
    }
    Ok((net, params))
}

pub fn train(
    cfg: &TrainConfig,
    net_cfg: &NetworkConfig,
    train_cases: &[Case],
    val_cases: &[Case],
    pretrained: Option<&WeightStore>,
) -> Result<Trained> {
    train_with_progress(cfg, net_cfg, train_cases, val_cases, pretrained, |_| {})
}

/// [`train`] calling `progress` after every epoch.
pub fn train_with_progress(
    cfg: &TrainConfig,
    net_cfg: &NetworkConfig,
    train_cases: &[Case],
    val_cases: &[Case],
    pretrained: Option<&WeightStore>,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<Trained> {
    cfg.validate()?;
    if train_cases.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let (net, mut params) = initial_params(net_cfg, cfg.seed, pretrained)?;
    let train_set: Vec<Case> = train_cases.iter().map(|c| c.prepared(cfg.norm_region)).collect::<Result<_>>()?;
    let val_set: Vec<Case> = val_cases.iter().map(|c| c.prepared(cfg.norm_region)).collect::<Result<_>>()?;
    let mode = if cfg.freeze_bn { Mode::TrainFrozenBn } else { Mode::Train };
    let mut adam = AdamState::for_params(&params);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let total = (cfg.epochs * cfg.batches_per_epoch) as u64;

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<(Tensor<f32>, Tensor<f32>)>(2);
        let producer_cases = &train_set;
        scope.spawn(move || {
            for it in 0..total {
                let batch = batch_tensors(&make_batch(producer_cases, cfg, it));
                if tx.send(batch).is_err() {
                    break;
                }
            }
        });
        let mut it = 0usize;
        for epoch in 0..cfg.epochs {
            let mut loss_sum = 0.0;
            for _ in 0..cfg.batches_per_epoch {
                let (x, target) = rx.recv().expect("producer alive");
                let (probs, tape) = net.forward(&params, &x, mode)?;
                let out = multiple_dice_loss(&probs, &target)?;
                if !out.loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        iteration: it,
                        snapshot: snapshot(&params, &x, &out.dice),
                    });
                }
                let grads = net.backward(&params, &tape, &out.grad, false)?;
                adam.step_params(&mut params, &grads.tensors, cfg.learning_rate)?;
                params.apply_running_stats(tape.running_stats());
                loss_sum += out.loss;
                it += 1;
            }
            let val_dice = if val_set.is_empty() {
                [f64::NAN; 3]
            } else {
                mean_dice(&evaluate_region_dice(&net, &params, &val_set, cfg.patch_shape, cfg.val_steps)?)
            };
            let rec = EpochRecord { epoch: epoch + 1, loss: loss_sum / cfg.batches_per_epoch.max(1) as f64, val_dice };
            progress(&rec);
            epochs.push(rec);
        }
        Ok(())
    })?;

    Ok(Trained {
        run: TrainRun { config: cfg.clone(), pretrained: pretrained.is_some(), epochs },
        net,
        params,
    })
}

fn snapshot(params: &NetworkParams<f32>, x: &Tensor<f32>, dice: &[f64; 3]) -> String {
    let bad: Vec<&str> = params
        .specs()
        .iter()
        .zip(params.tensors())
        .filter(|(_, t)| !t.is_finite())
        .map(|(s, _)| s.name.as_str())
        .collect();
    format!(
        "input finite={}, input shape={:?}, class dice={dice:?}, non-finite tensors={bad:?}",
        x.is_finite(),
        x.shape()
    )
}
