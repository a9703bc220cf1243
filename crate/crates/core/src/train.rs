//! Training loop, validation and inference.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{one_hot, AugmentConfig, AugmentPlan, ByteImage, Image, LabelMask};
use crate::decoder::{argmax_channels, MiTUNet, ModelConfig};
use crate::error::{Error, Result};
use crate::io::{list_pairs, load_pair, write_atomic};
use crate::loss::segmentation_loss;
use crate::metrics::{ConfusionCounts, PerStructure, STRUCTURES};
use crate::rng::stream_rng;
use crate::tensor::{no_grad, AdamConfig, AdamState, Checkpoint, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Drives model init, the split, shuffling and augmentation.
    pub seed: u64,
    pub val_count: usize,
    /// Draw validation images from the training set instead of holding
    /// them out.
    pub val_overlap: bool,
    /// Disable augmentation of training samples.
    pub no_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 10,
            lr: 1e-4,
            seed: 0,
            val_count: 30,
            val_overlap: false,
            no_augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub name: String,
    pub image: ByteImage,
    pub mask: LabelMask,
}

/// Loads every image/mask pair under `root`; any unreadable file fails the
/// whole load.
pub fn load_dataset(root: &Path, allow_any_size: bool) -> Result<Vec<Sample>> {
    let pairs = list_pairs(root)?;
    if pairs.is_empty() {
        return Err(Error::file(root, "dataset is empty"));
    }
    pairs
        .into_iter()
        .map(|(name, img, mask)| {
            let (image, mask) = load_pair(&img, &mask, allow_any_size)?;
            Ok(Sample { name, image, mask })
        })
        .collect()
}

/// Seeded choice of `val_count` validation indices out of `n`. Training
/// indices are the rest, or all of `0..n` when `overlap` is set.
pub fn split(n: usize, val_count: usize, seed: u64, overlap: bool) -> Result<(Vec<usize>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::Data("dataset is empty".into()));
    }
    if val_count > n || (!overlap && val_count == n) {
        return Err(Error::Config(format!(
            "validation count {val_count} leaves no training data out of {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, &[0x5917]));
    let mut val = idx[..val_count].to_vec();
    val.sort_unstable();
    let train = if overlap {
        (0..n).collect()
    } else {
        let mut t = idx[val_count..].to_vec();
        t.sort_unstable();
        t
    };
    Ok((train, val))
}

/// Stacks `[3, H, W]` images into `[B, 3, H, W]`.
pub fn stack_images(images: &[Image]) -> Result<Tensor<f32>> {
    let (w, h) = (images[0].width, images[0].height);
    if images.iter().any(|i| (i.width, i.height) != (w, h)) {
        return Err(Error::Data("images in a batch differ in size".into()));
    }
    let data = images.iter().flat_map(|i| i.data.iter().copied()).collect();
    Tensor::new(data, &[images.len(), 3, h, w])
}

/// Stacks one-hot targets into `[B, 3, H, W]`.
pub fn stack_targets(masks: &[LabelMask]) -> Result<Tensor<f32>> {
    let (w, h) = (masks[0].width, masks[0].height);
    let data = masks.iter().flat_map(|m| one_hot(m).to_vec()).collect();
    Tensor::new(data, &[masks.len(), 3, h, w])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: PerStructure,
}

pub const LOG_HEADER: &str = "epoch,train_loss,val_dice_ps,val_dice_fh,val_dice_all";

pub fn log_csv(logs: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for l in logs {
        s.push_str(&format!(
            "{},{:.8},{:.6},{:.6},{:.6}\n",
            l.epoch, l.train_loss, l.val_dice.ps, l.val_dice.fh, l.val_dice.all
        ));
    }
    s
}

/// Model plus optimizer state.
pub struct Trainer {
    pub model: MiTUNet<f32>,
    pub adam: AdamState<f32>,
    pub augment: AugmentConfig,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, train: &TrainConfig, augment: &AugmentConfig) -> Result<Self> {
        train.validate()?;
        augment.validate()?;
        let model = MiTUNet::new(model_cfg, train.seed)?;
        let adam = AdamState::new(train.adam(), &model.vars.trainable());
        Ok(Trainer {
            model,
            adam,
            augment: augment.clone(),
        })
    }

    /// Forward, loss, backward and one Adam update on prepared inputs.
    /// Returns the batch loss.
    pub fn step(&mut self, images: &Tensor<f32>, targets: &Tensor<f32>) -> Result<f64> {
        let probs = self.model.forward(images, true)?;
        let loss = segmentation_loss(targets, &probs)?.total;
        let value = loss.item() as f64;
        if !value.is_finite() {
            return Err(Error::Degenerate(format!("non-finite training loss {value}")));
        }
        self.model.vars.zero_grad();
        loss.backward()?;
        self.adam.step(&self.model.vars.trainable())?;
        Ok(value)
    }

    /// Eval-mode label maps for a list of byte images.
    pub fn predict(&self, images: &[&ByteImage], batch: usize) -> Result<Vec<LabelMask>> {
        predict_batch(&self.model, &self.augment, images, batch)
    }
}

fn prepare(sample: &Sample, augment: Option<(&AugmentConfig, &AugmentPlan)>, cfg: &AugmentConfig) -> Result<(Image, LabelMask)> {
    let unit = Image::from_bytes(&sample.image);
    let (mut img, mask) = match augment {
        Some((c, plan)) => plan.apply(c, &unit, &sample.mask)?,
        None => (unit, sample.mask.clone()),
    };
    crate::data::standardize(&mut img, cfg);
    Ok((img, mask))
}

/// Normalizes, runs the model in eval mode and takes the per-pixel argmax.
pub fn predict_batch(
    model: &MiTUNet<f32>,
    augment: &AugmentConfig,
    images: &[&ByteImage],
    batch: usize,
) -> Result<Vec<LabelMask>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let prepared: Vec<Image> = chunk.iter().map(|i| crate::data::normalize(i, augment)).collect();
        let x = stack_images(&prepared)?;
        let probs = no_grad(|| model.forward(&x, false))?;
        for (labels, img) in argmax_channels(&probs).into_iter().zip(chunk) {
            out.push(LabelMask::new(img.width, img.height, labels)?);
        }
    }
    Ok(out)
}

/// Single-image inference.
pub fn infer(model: &MiTUNet<f32>, augment: &AugmentConfig, image: &ByteImage) -> Result<LabelMask> {
    Ok(predict_batch(model, augment, &[image], 1)?.remove(0))
}

/// Mean Dice per structure over the given prediction / ground-truth pairs.
pub fn mean_dice(preds: &[LabelMask], gts: &[&LabelMask]) -> Result<PerStructure> {
    let mut acc = [0.0f64; 3];
    for (p, g) in preds.iter().zip(gts) {
        for (k, (_, classes)) in STRUCTURES.iter().enumerate() {
            acc[k] += ConfusionCounts::from_binary(&p.select(classes), &g.select(classes))?.dice();
        }
    }
    let n = preds.len().max(1) as f64;
    Ok(PerStructure {
        ps: acc[0] / n,
        fh: acc[1] / n,
        all: acc[2] / n,
    })
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.mitu")
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("final.mitu")
    }
    pub fn log(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }
}

pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub trainer: Trainer,
}

/// Full training run. Per epoch: seeded shuffle, augmented batches, one
/// Adam step per batch, then validation Dice. Keeps the checkpoint with the
/// best validation Dice over PS ∪ FH and the final one.
pub fn train(
    dataset: &[Sample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    augment: &AugmentConfig,
    init_from: Option<&Checkpoint>,
    out: Option<&RunPaths>,
) -> Result<TrainOutcome> {
    let (train_idx, val_idx) = split(dataset.len(), cfg.val_count, cfg.seed, cfg.val_overlap)?;
    let mut trainer = Trainer::new(model_cfg, cfg, augment)?;
    if let Some(ck) = init_from {
        trainer.model.vars.load_checkpoint(ck)?;
    }
    if let Some(p) = out {
        std::fs::create_dir_all(&p.dir).map_err(|e| Error::file(&p.dir, e.to_string()))?;
    }
    let val_images: Vec<&ByteImage> = val_idx.iter().map(|&i| &dataset[i].image).collect();
    let val_masks: Vec<&LabelMask> = val_idx.iter().map(|&i| &dataset[i].mask).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    for epoch in 1..=cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut stream_rng(cfg.seed, &[1, epoch as u64]));
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut images = Vec::with_capacity(chunk.len());
            let mut masks = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &dataset[i];
                let plan = (!cfg.no_augment).then(|| {
                    let mut rng = stream_rng(cfg.seed, &[2, epoch as u64, i as u64]);
                    AugmentPlan::sample(augment, s.image.width, s.image.height, &mut rng)
                });
                let (img, mask) = prepare(s, plan.as_ref().map(|p| (augment, p)), augment)?;
                images.push(img);
                masks.push(mask);
            }
            total += trainer.step(&stack_images(&images)?, &stack_targets(&masks)?)?;
            batches += 1;
        }
        let val_dice = if val_images.is_empty() {
            PerStructure::default()
        } else {
            mean_dice(&trainer.predict(&val_images, cfg.batch_size)?, &val_masks)?
        };
        let log = EpochLog {
            epoch,
            train_loss: total / batches.max(1) as f64,
            val_dice,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} val dice ps {:.4} fh {:.4} all {:.4}",
            log.train_loss,
            val_dice.ps,
            val_dice.fh,
            val_dice.all
        );
        logs.push(log);
        if best.as_ref().is_none_or(|b| val_dice.all > b.0) {
            let ck = trainer.model.vars.to_checkpoint();
            if let Some(p) = out {
                ck.save(&p.best())?;
            }
            best = Some((val_dice.all, epoch, ck));
        }
        if let Some(p) = out {
            write_atomic(&p.log(), log_csv(&logs).as_bytes())?;
        }
    }
    let last = trainer.model.vars.to_checkpoint();
    if let Some(p) = out {
        last.save(&p.last())?;
    }
    let (_, best_epoch, best) = best.unwrap_or((0.0, 0, last.clone()));
    Ok(TrainOutcome {
        logs,
        best_epoch,
        best,
        last,
        train_indices: train_idx,
        val_indices: val_idx,
        trainer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_disjoint_and_complete() {
        let (t, v) = split(50, 30, 3, false).unwrap();
        assert_eq!(v.len(), 30);
        assert_eq!(t.len() + v.len(), 50);
        assert!(t.iter().all(|i| !v.contains(i)));
        let (t2, v2) = split(50, 30, 3, false).unwrap();
        assert_eq!((t, v), (t2, v2));
        let (t, v) = split(50, 30, 3, true).unwrap();
        assert_eq!(t.len(), 50);
        assert_eq!(v.len(), 30);
        assert!(split(30, 30, 0, false).is_err());
        assert!(split(0, 0, 0, false).is_err());
    }

    #[test]
    fn log_format() {
        let logs = [EpochLog {
            epoch: 1,
            train_loss: 0.5,
            val_dice: PerStructure { ps: 0.1, fh: 0.2, all: 0.3 },
        }];
        let csv = log_csv(&logs);
        assert!(csv.starts_with("epoch,train_loss,val_dice_ps,val_dice_fh,val_dice_all\n1,0.50000000,"));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr: -1.0, ..Default::default() }.validate().is_err());
    }
}
