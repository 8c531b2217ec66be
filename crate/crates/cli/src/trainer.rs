//! Training orchestration: deterministic data-parallel gradient
//! accumulation over fixed-size shards, epoch loops, and evaluation.
//!
//! Parallelism never changes results: each batch is split into fixed chunks
//! of `train.shard` samples, per-chunk gradients are summed sequentially
//! inside the chunk, and chunks merge in index order. Mask streams are keyed
//! by (seed, global step, batch slot), so the serial and parallel paths are
//! bit-identical.

use rayon::prelude::*;

use rf_core::model::{Grads, InputKind, Model, ModelConfig, Variant};
use rf_core::optim::{AdamW, Hyper};
use rf_core::rng::Rng;
use rf_core::tensor::Tensor;
use rf_core::wavelet::Boundary;
use rf_core::{Error, Result};

use crate::config::RunConfig;
use crate::datasets::LabeledSet;

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub shard: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
}

impl TrainSettings {
    pub fn from_config(cfg: &RunConfig, default_lr: f64, video: bool) -> Result<Self> {
        let default_batch = if video { 8 } else { 64 };
        Ok(TrainSettings {
            epochs: cfg.get_usize("train.epochs", 5)?,
            batch: cfg.get_usize("train.batch", default_batch)?,
            lr: cfg.get_f64("train.lr", default_lr)?,
            weight_decay: cfg.get_f64("train.weight_decay", 0.05)?,
            warmup_frac: cfg.get_f64("train.warmup_frac", 0.05)?,
            shard: cfg.get_usize("train.shard", 8)?,
            clip: cfg.get_f64("train.clip", 0.0)?,
        })
    }

    pub fn hyper(&self, steps_per_epoch: usize) -> Hyper {
        let total = (self.epochs * steps_per_epoch) as u64;
        let warmup = (self.warmup_frac * total as f64).round() as u64;
        Hyper::new(self.lr, self.weight_decay, warmup, total)
    }
}

/// Builds the model configuration from `model.*` keys plus the dataset
/// geometry.
pub fn model_config(cfg: &RunConfig, set: &LabeledSet) -> Result<ModelConfig> {
    let shape = set.sample_shape();
    let video = set.is_video();
    let input = if video {
        InputKind::Video {
            channels: shape[0],
            frames: shape[1],
            height: shape[2],
            width: shape[3],
        }
    } else {
        InputKind::Image {
            channels: shape[0],
            height: shape[1],
            width: shape[2],
        }
    };
    let variant = Variant::parse(&cfg.get_str("model.variant", "RF-AA"))?;
    let embed_dim = cfg.get_usize("model.embed_dim", 64)?;
    let default_mask = if video { 0.9 } else { 0.75 };
    let embed = rf_core::embed::EmbedConfig {
        mode: variant
            .reduce_mode()
            .unwrap_or(rf_core::embed::ReduceMode::Omit),
        patch: cfg.get_usize("model.patch", 4)?,
        tubelet: cfg.get_usize("model.tubelet", 2)?,
        embed_dim,
        mask_ratio: cfg.get_f64("model.mask_ratio", default_mask)?,
        filter: cfg.get_str("model.filter", "haar"),
        boundary: Boundary::parse(&cfg.get_str("model.boundary", "zero"))?,
    };
    let model_cfg = ModelConfig {
        variant,
        input,
        embed,
        enc_depth: cfg.get_usize("model.depth", 4)?,
        enc_heads: cfg.get_usize("model.heads", 4)?,
        dec_depth: cfg.get_usize("model.dec_depth", 4)?,
        dec_heads: cfg.get_usize("model.dec_heads", 4)?,
        dec_dim: cfg.get_usize("model.dec_dim", (embed_dim / 2).max(8))?,
        norm_pix: cfg.get_bool("model.norm_pix", true)?,
        num_classes: cfg.get_usize("model.classes", set.classes)?,
        scale_mode: rf_core::attention::ScaleMode::parse(&cfg.get_str("model.scale_mode", "paper"))?,
    };
    model_cfg.validate()?;
    Ok(model_cfg)
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    Rng::from_label(seed, &format!("shuffle/epoch{epoch}")).permutation(n)
}

type ChunkGrad = (f32, Grads<f32>);

/// Maps `per_sample(batch_pos, sample_idx)` over fixed chunks in parallel,
/// summing losses and gradients chunk-locally and merging chunks in index
/// order.
fn parallel_grads<F>(
    n_params: usize,
    chunks: &[Vec<(usize, usize)>],
    per_sample: F,
) -> Result<ChunkGrad>
where
    F: Fn(usize, usize) -> Result<(f32, Grads<f32>)> + Sync,
{
    let results: Vec<Result<ChunkGrad>> = chunks
        .par_iter()
        .map(|chunk| {
            let mut grads = Grads::new(n_params);
            let mut loss = 0.0f32;
            for &(pos, idx) in chunk {
                let (l, g) = per_sample(pos, idx)?;
                grads.merge(&g)?;
                loss += l;
            }
            Ok((loss, grads))
        })
        .collect();
    let mut total = Grads::new(n_params);
    let mut loss_sum = 0.0f32;
    for r in results {
        let (l, g) = r?;
        total.merge(&g)?;
        loss_sum += l;
    }
    Ok((loss_sum, total))
}

/// Scales gradients so their global L2 norm does not exceed `clip`.
fn clip_global_norm(grads: &mut Grads<f32>, n_params: usize, clip: f64) {
    if clip <= 0.0 {
        return;
    }
    let mut sq = 0.0f64;
    for i in 0..n_params {
        if let Some(g) = grads.get(i) {
            for &v in g.data() {
                sq += (v as f64) * (v as f64);
            }
        }
    }
    let norm = sq.sqrt();
    if norm > clip {
        grads.scale((clip / norm) as f32);
    }
}

/// Splits a batch into fixed-size shards of (batch position, sample index).
/// Chunk boundaries depend only on the shard setting, never on the thread
/// count.
fn fixed_chunks(batch: &[usize], shard: usize) -> Vec<Vec<(usize, usize)>> {
    batch
        .iter()
        .copied()
        .enumerate()
        .collect::<Vec<_>>()
        .chunks(shard.max(1))
        .map(|c| c.to_vec())
        .collect()
}

/// Pretrains in place; returns `(step, lr, loss)` log lines plus the final
/// optimizer state for checkpointing.
pub fn pretrain(
    model: &mut Model<f32>,
    set: &LabeledSet,
    settings: &TrainSettings,
    seed: u64,
) -> Result<(Vec<(u64, f64, f32)>, AdamW<f32>)> {
    let n = set.len();
    if n == 0 {
        return Err(Error::data("empty training set"));
    }
    let steps_per_epoch = n.div_ceil(settings.batch);
    let mut opt = AdamW::new(&model.params, settings.hyper(steps_per_epoch));
    let mut log = Vec::new();
    let mut global_step = 0u64;
    for epoch in 0..settings.epochs {
        let order = epoch_order(seed, epoch, n);
        for batch_idx in order.chunks(settings.batch) {
            let chunks = fixed_chunks(batch_idx, settings.shard);
            let m = &*model;
            let step = global_step;
            let (loss_sum, mut grads) =
                parallel_grads(m.params.len(), &chunks, |pos, sample_idx| {
                    // mask streams key on the batch position, so the shard
                    // layout cannot change them
                    let mut rng = Rng::from_label(seed, &format!("mask/step{step}/slot{pos}"));
                    let mask = m.sample_mask(&mut rng)?;
                    let (loss, tape) = m.pretrain_forward(&set.samples[sample_idx].0, &mask)?;
                    let (g, _) = m.pretrain_backward(&tape, false)?;
                    Ok((loss, g))
                })?;
            let bs = batch_idx.len() as f32;
            grads.scale(1.0 / bs);
            clip_global_norm(&mut grads, model.params.len(), settings.clip);
            let lr = opt.step(&mut model.params, &grads)?;
            global_step += 1;
            log.push((global_step, lr, loss_sum / bs));
        }
    }
    Ok((log, opt))
}

/// Finetunes in place; returns per-epoch `(epoch, mean_loss, test_accuracy)`
/// log lines plus the final optimizer state.
pub fn finetune(
    model: &mut Model<f32>,
    train: &LabeledSet,
    test: &LabeledSet,
    settings: &TrainSettings,
    seed: u64,
) -> Result<(Vec<(usize, f32, f64)>, AdamW<f32>)> {
    let n = train.len();
    if n == 0 {
        return Err(Error::data("empty training set"));
    }
    let steps_per_epoch = n.div_ceil(settings.batch);
    let mut opt = AdamW::new(&model.params, settings.hyper(steps_per_epoch));
    let mut log = Vec::new();
    for epoch in 0..settings.epochs {
        let order = epoch_order(seed.wrapping_add(0x5EED), epoch, n);
        let mut loss_acc = 0.0f32;
        let mut batches = 0usize;
        for batch_idx in order.chunks(settings.batch) {
            let chunks = fixed_chunks(batch_idx, settings.shard);
            let m = &*model;
            let (loss_sum, mut grads) =
                parallel_grads(m.params.len(), &chunks, |_, sample_idx| {
                    let (x, label) = &train.samples[sample_idx];
                    let (loss, tape) = m.finetune_forward(x, *label as usize)?;
                    let (g, _) = m.finetune_backward(&tape, false)?;
                    Ok((loss, g))
                })?;
            let bs = batch_idx.len() as f32;
            grads.scale(1.0 / bs);
            clip_global_norm(&mut grads, model.params.len(), settings.clip);
            opt.step(&mut model.params, &grads)?;
            loss_acc += loss_sum / bs;
            batches += 1;
        }
        let acc = accuracy(model, test)?;
        log.push((epoch + 1, loss_acc / batches as f32, acc));
    }
    Ok((log, opt))
}

/// Predictions over a set, parallel but order-preserving.
pub fn predict_set(model: &Model<f32>, samples: &[Tensor<f32>]) -> Result<Vec<u32>> {
    samples
        .par_iter()
        .map(|x| model.predict(x).map(|(c, _)| c as u32))
        .collect()
}

/// Top-1 accuracy in percent.
pub fn accuracy(model: &Model<f32>, set: &LabeledSet) -> Result<f64> {
    let preds = predict_set(
        model,
        &set.samples.iter().map(|(x, _)| x.clone()).collect::<Vec<_>>(),
    )?;
    let correct = preds
        .iter()
        .zip(&set.samples)
        .filter(|(p, (_, l))| **p == *l)
        .count();
    Ok(100.0 * correct as f64 / set.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synth_image_set;

    fn small_cfg() -> RunConfig {
        RunConfig::from_text(
            "model.variant = RF-O\nmodel.embed_dim = 32\nmodel.depth = 2\nmodel.heads = 2\n\
             model.dec_depth = 1\nmodel.dec_heads = 2\nmodel.dec_dim = 16\nmodel.patch = 4\n\
             train.epochs = 2\ntrain.batch = 16\ntrain.lr = 1e-3\n",
            "test",
        )
        .unwrap()
    }

    #[test]
    fn pretrain_is_shard_invariant() {
        // the same run with shard=1 and shard=8 must produce identical logs
        let set = synth_image_set(11, 24, 32, 10);
        let cfg = small_cfg();
        let mcfg = model_config(&cfg, &set).unwrap();
        let mut logs = Vec::new();
        for shard in [1usize, 8] {
            let mut model = Model::<f32>::new(mcfg.clone(), 5).unwrap();
            let settings = TrainSettings {
                epochs: 1,
                batch: 8,
                lr: 1e-3,
                weight_decay: 0.05,
                warmup_frac: 0.0,
                shard,
                clip: 0.0,
            };
            logs.push(pretrain(&mut model, &set, &settings, 5).unwrap().0);
        }
        assert_eq!(logs[0], logs[1]);
    }

    #[test]
    fn finetune_improves_over_chance() {
        // 5-class short run; full-scale convergence is covered by the
        // acceptance suite
        let train = synth_image_set(3, 300, 32, 5);
        let test = synth_image_set(4, 60, 32, 5);
        let cfg = small_cfg();
        let mcfg = model_config(&cfg, &train).unwrap();
        let mut model = Model::<f32>::new(mcfg, 7).unwrap();
        let settings = TrainSettings {
            epochs: 8,
            batch: 12,
            lr: 2e-3,
            weight_decay: 0.01,
            warmup_frac: 0.1,
            shard: 8,
            clip: 1.0,
        };
        let (log, _) = finetune(&mut model, &train, &test, &settings, 7).unwrap();
        let final_acc = log.last().unwrap().2;
        let first_acc = log[0].2;
        assert!(
            final_acc > 40.0 && final_acc > first_acc,
            "accuracy failed to improve: first {first_acc}, final {final_acc}"
        );
    }
}
