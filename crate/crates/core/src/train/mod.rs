//! Training harness: synthetic motion clips, a small backbone hosting an
//! optional context block, and momentum SGD.

pub mod model;
pub mod sgd;
pub mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PnlError, Result};
use crate::fcomb::CombMode;
use crate::nonlocal::PairwiseKind;
use crate::tensor::{GradTape, VideoFeature};

pub use model::{argmax_rows, BackboneShape, Block, BlockChoice, Model};
pub use sgd::{SgdConfig, SgdState};
pub use synth::{gen_synth, Split, SynthTask};

/// Hidden width of the backbone; even and divisible by 2·n for n ≤ 4.
pub const HIDDEN: usize = 8;
/// Default minibatch size.
pub const BATCH: usize = 8;
/// Default number of epochs.
pub const EPOCHS: usize = 30;
const EVAL_BATCH: usize = 64;

/// A fully materialized split: clips stacked along the batch axis.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub clips: Vec<VideoFeature>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn generate(task: &SynthTask, split: Split) -> Result<Self> {
        let (clips, labels) = (0..task.size(split))
            .map(|i| gen_synth(task, split, i))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        Ok(Dataset { clips, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Stacks the clips at `idx` into one `[B,T,H,W,C]` feature.
    pub fn batch(&self, idx: &[usize]) -> Result<(VideoFeature, Vec<usize>)> {
        let one = self.clips[idx[0]].shape();
        let shape = crate::tensor::Shape5::new(idx.len(), one.t, one.h, one.w, one.c)?;
        let mut data = Vec::with_capacity(shape.numel());
        for &i in idx {
            data.extend_from_slice(self.clips[i].data());
        }
        Ok((VideoFeature::new(shape, data)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub block: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n_scales: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pairwise: Option<PairwiseKind>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub comb: Option<CombMode>,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub hidden: usize,
    pub sgd: SgdConfig,
    pub task: SynthTask,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct EpochMetrics {
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    pub val_top1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainMetrics {
    pub config: TrainConfig,
    pub per_epoch: Vec<EpochMetrics>,
    pub final_top1: f64,
}

fn train_config(block: BlockChoice, task: &SynthTask, epochs: usize, batch: usize, seed: u64) -> TrainConfig {
    let (n_scales, pairwise, comb) = match block {
        BlockChoice::None => (None, None, None),
        BlockChoice::Nl(k) => (None, Some(k), None),
        BlockChoice::Pnl(c) => (Some(c.n_scales()), Some(c.pairwise), Some(c.comb)),
    };
    TrainConfig {
        block: block.name().to_string(),
        n_scales,
        pairwise,
        comb,
        epochs,
        batch,
        seed,
        hidden: HIDDEN,
        sgd: SgdConfig::default(),
        task: *task,
    }
}

pub fn backbone_shape(task: &SynthTask) -> BackboneShape {
    BackboneShape {
        c_in: task.c_in,
        hidden: HIDDEN,
        classes: task.classes,
        stride: 2,
        pool: 2,
    }
}

/// Validation logits (`[len, classes]`, row-major) and top-1 accuracy.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<(Vec<f64>, f64)> {
    let k = model.shape.classes;
    let mut logits = Vec::with_capacity(data.len() * k);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = data.batch(chunk)?;
        let mut tape = GradTape::new();
        let xv = tape.input(&x, false);
        let r = model.record(&mut tape, xv, false)?;
        logits.extend_from_slice(tape.value(r.logits));
    }
    let correct = argmax_rows(&logits, k)
        .iter()
        .zip(&data.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok((logits, correct as f64 / data.len().max(1) as f64))
}

/// One pass over `train` in a seeded shuffled order; returns the mean batch loss.
pub fn train_epoch(
    model: &mut Model,
    opt: &mut SgdState,
    train: &Dataset,
    batch: usize,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(batch) {
        let (x, labels) = train.batch(chunk)?;
        let mut tape = GradTape::new();
        let xv = tape.input(&x, false);
        let r = model.record(&mut tape, xv, true)?;
        let loss_var = tape.cross_entropy(r.logits, &labels)?;
        let loss = tape.value(loss_var)[0];
        if !loss.is_finite() {
            return Err(PnlError::Diverged { epoch, loss });
        }
        let adj = tape.backward(loss_var, &[1.0])?;
        let grads: Vec<Vec<f64>> = r
            .params
            .iter()
            .map(|&v| adj.get_or_zeros(v, tape.value(v).len()))
            .collect();
        opt.step(&mut model.params_mut(), &grads)?;
        total += loss;
        batches += 1;
    }
    Ok(total / batches.max(1) as f64)
}

/// Trains `block` on `task` for `epochs` epochs and reports validation top-1
/// after each. With `epochs = 0` the reported accuracy is that of the
/// untrained model, whose zero head predicts class 0 everywhere.
pub fn train_eval(block: BlockChoice, task: &SynthTask, epochs: usize, batch: usize, seed: u64) -> Result<TrainMetrics> {
    if batch == 0 {
        return Err(PnlError::config("batch must be >= 1"));
    }
    task.validate()?;
    let train = Dataset::generate(task, Split::Train)?;
    let val = Dataset::generate(task, Split::Val)?;
    let mut model = Model::init(backbone_shape(task), block, seed)?;
    let mut opt = SgdState::new(SgdConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut per_epoch = Vec::with_capacity(epochs);
    let (_, mut top1) = evaluate(&model, &val)?;
    for epoch in 1..=epochs {
        let loss = train_epoch(&mut model, &mut opt, &train, batch, &mut rng, epoch)?;
        top1 = evaluate(&model, &val)?.1;
        per_epoch.push(EpochMetrics { loss, val_top1: top1 });
    }
    Ok(TrainMetrics {
        config: train_config(block, task, epochs, batch, seed),
        per_epoch,
        final_top1: top1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pnl::PnlConfig;

    fn tiny_task() -> SynthTask {
        SynthTask {
            t: 4,
            h: 8,
            w: 8,
            train_size: 32,
            val_size: 16,
            ..SynthTask::default_with_seed(0)
        }
    }

    #[test]
    fn zero_epochs_is_chance() {
        let m = train_eval(BlockChoice::None, &tiny_task(), 0, 8, 0).unwrap();
        assert!(m.per_epoch.is_empty());
        assert_eq!(m.final_top1, 0.25);
    }

    #[test]
    fn reproducible_and_loss_finite() {
        let cfg = PnlConfig::basic(2, PairwiseKind::EmbeddedGaussian, CombMode::VanillaConcat).unwrap();
        let a = train_eval(BlockChoice::Pnl(cfg), &tiny_task(), 2, 8, 4).unwrap();
        let b = train_eval(BlockChoice::Pnl(cfg), &tiny_task(), 2, 8, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.per_epoch.iter().all(|e| e.loss.is_finite()));
    }

    #[test]
    fn zero_batch_rejected() {
        assert!(train_eval(BlockChoice::None, &tiny_task(), 1, 0, 0).is_err());
    }
}
