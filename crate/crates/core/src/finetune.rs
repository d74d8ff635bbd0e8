//! Supervised classification on the cls token, from scratch or from a pretrained encoder.

use alloc::format;
use alloc::vec::Vec;

use crate::data::{
    augment_dataset, epoch_batches, make_batch, ImageDataset, PatchGeometry, TokenBatch,
};
use crate::encoder::{encoder_forward, Bound, ForwardOptions};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, PeMode, CLS_HEAD_B, CLS_HEAD_W, POS_HEAD};
use crate::objective::argmax;
use crate::optim::{AdamW, TrainConfig};
use crate::pretrain::collect_grads;
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Tape, TapeStats, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrained,
    Finetuned,
    Supervised,
}

impl Phase {
    pub fn code(self) -> u32 {
        match self {
            Self::Pretrained => 0,
            Self::Finetuned => 1,
            Self::Supervised => 2,
        }
    }

    pub fn from_code(c: u32) -> Result<Self> {
        match c {
            0 => Ok(Self::Pretrained),
            1 => Ok(Self::Finetuned),
            2 => Ok(Self::Supervised),
            _ => Err(Error::Config(format!("unknown phase code {c}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Pretrained => "pretrained",
            Self::Finetuned => "finetuned",
            Self::Supervised => "supervised",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
    pub step: usize,
    pub phase: Phase,
}

/// Encoder weights from a pretrained checkpoint, ready for classification.
///
/// The position head is dropped and a zero classifier is added. A learned
/// positional table is freshly initialized, relative biases start at zero.
pub fn init_from_pretrained<T: Real>(
    ckpt: &Checkpoint<T>,
    pe_mode: PeMode,
    class_count: usize,
    rng: &mut Rng,
) -> Result<(ModelConfig, ModelParams<T>)> {
    let cfg = ModelConfig {
        pe_mode,
        class_count,
        ..ckpt.config
    };
    cfg.validate()?;
    let mut params = ModelParams::new();
    for (name, shape) in cfg.encoder_shapes() {
        if name == "pos_embed" || name.ends_with("rel_bias") {
            params.insert(&name, ModelParams::<T>::init_one(&name, &shape, rng));
            continue;
        }
        let t = ckpt.params.get(&name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::TensorShape {
                name,
                expected: shape,
                found: t.shape().to_vec(),
            });
        }
        params.insert(&name, t.clone());
    }
    debug_assert!(!params.contains(POS_HEAD));
    params.add_classifier_head(&cfg);
    Ok((cfg, params))
}

/// Randomly initialized encoder plus a zero classifier.
pub fn init_supervised<T: Real>(cfg: &ModelConfig, rng: &mut Rng) -> Result<ModelParams<T>> {
    if cfg.class_count == 0 {
        return Err(Error::Config("classifier needs at least one class".into()));
    }
    let mut p = ModelParams::init_encoder(cfg, rng)?;
    p.add_classifier_head(cfg);
    Ok(p)
}

/// Class logits `[B, C]` from the cls token under full attention.
pub fn classify_forward<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    batch: &TokenBatch<T>,
) -> Result<Var> {
    let out = encoder_forward(tape, bound, cfg, batch, ForwardOptions::new(cfg.pe_mode))?;
    let cls = tape.narrow(out.hidden, 1, 0, 1)?;
    let cls = tape.reshape(cls, &[batch.batch_size(), cfg.width])?;
    let logits = tape.matmul(cls, bound.get(CLS_HEAD_W)?)?;
    tape.add(logits, bound.get(CLS_HEAD_B)?)
}

/// One row of the classification log.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyMetrics {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
    /// Held-out accuracy at the end of the epoch, when an evaluation set is given.
    pub eval_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ClassifyResult<T> {
    pub checkpoint: Checkpoint<T>,
    pub metrics: Vec<ClassifyMetrics>,
}

#[derive(Debug, Clone)]
pub struct ClassifyStep {
    pub loss: f64,
    pub correct: usize,
    pub lr: f64,
    pub stats: TapeStats,
}

/// Forward, backward and optimizer update of the classifier on one batch.
pub fn classify_step<T: Real>(
    params: &mut ModelParams<T>,
    opt: &mut AdamW<T>,
    cfg: &ModelConfig,
    batch: &TokenBatch<T>,
    step: usize,
) -> Result<ClassifyStep> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params, true);
    let logits = classify_forward(&mut tape, &bound, cfg, batch)?;
    let loss = tape.cross_entropy_mean(logits, &batch.labels)?;
    tape.backward(loss)?;
    let grads = collect_grads(&tape, &bound);
    let correct = tape
        .value(logits)
        .data()
        .chunks_exact(cfg.class_count)
        .zip(&batch.labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    let loss = tape.value(loss).item().to_f64();
    let stats = tape.stats();
    drop(tape);
    let lr = opt.step(params, &grads, step)?;
    Ok(ClassifyStep {
        loss,
        correct,
        lr,
        stats,
    })
}

/// Trains every parameter with cross-entropy on the cls logits for `total_steps` steps.
#[allow(clippy::too_many_arguments)]
pub fn train_classifier<T: Real>(
    train_ds: &ImageDataset,
    eval_ds: Option<&ImageDataset>,
    geom: &PatchGeometry,
    cfg: &ModelConfig,
    mut params: ModelParams<T>,
    train: &TrainConfig,
    phase: Phase,
) -> Result<ClassifyResult<T>> {
    train.validate()?;
    cfg.validate()?;
    params.check_encoder(cfg)?;
    params.get(CLS_HEAD_W)?;
    let root = Rng::new(train.seed);
    let mut opt = AdamW::new(train);
    let mut metrics = Vec::new();
    let mut step = 0;
    let mut epoch = 0;
    while step < train.total_steps {
        let erng = root.split_indexed("epoch", epoch as u64);
        let augmented;
        let ds = if train.hflip || train.crop_pad > 0 {
            augmented = augment_dataset(
                train_ds,
                train.hflip,
                train.crop_pad,
                &mut erng.split("augment"),
            );
            &augmented
        } else {
            train_ds
        };
        let (mut loss_sum, mut seen, mut correct, mut lr) = (0.0, 0usize, 0usize, 0.0);
        for idx in epoch_batches(ds.count, train.batch_size, true, &mut erng.split("order")) {
            if step >= train.total_steps {
                break;
            }
            step += 1;
            let batch = make_batch::<T>(ds, &idx, geom, None);
            let out = classify_step(&mut params, &mut opt, cfg, &batch, step)?;
            correct += out.correct;
            loss_sum += out.loss * idx.len() as f64;
            seen += idx.len();
            lr = out.lr;
        }
        let eval_acc = match eval_ds {
            Some(e) => Some(evaluate_accuracy(&params, cfg, e, geom)?),
            None => None,
        };
        metrics.push(ClassifyMetrics {
            epoch,
            step,
            lr,
            loss: loss_sum / seen.max(1) as f64,
            train_acc: correct as f64 / seen.max(1) as f64,
            eval_acc,
        });
        epoch += 1;
    }
    Ok(ClassifyResult {
        checkpoint: Checkpoint {
            config: *cfg,
            params,
            step,
            phase,
        },
        metrics,
    })
}

/// Argmax class of every example (lowest index on ties).
pub fn predict<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    ds: &ImageDataset,
    geom: &PatchGeometry,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(ds.count);
    let all: Vec<usize> = (0..ds.count).collect();
    for idx in all.chunks(64) {
        let batch = make_batch::<T>(ds, idx, geom, None);
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, params, false);
        let logits = classify_forward(&mut tape, &bound, cfg, &batch)?;
        out.extend(
            tape.value(logits)
                .data()
                .chunks_exact(cfg.class_count)
                .map(argmax),
        );
    }
    Ok(out)
}

/// Fraction of examples whose argmax class equals the label.
pub fn evaluate_accuracy<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    ds: &ImageDataset,
    geom: &PatchGeometry,
) -> Result<f64> {
    if ds.count == 0 {
        return Ok(0.0);
    }
    let pred = predict(params, cfg, ds, geom)?;
    let hits = pred
        .iter()
        .zip(&ds.labels)
        .filter(|(p, &y)| **p == y as usize)
        .count();
    Ok(hits as f64 / ds.count as f64)
}

/// Accuracy from explicit logits rows, for testing against hand-built cases.
pub fn accuracy_from_logits<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let c = logits.shape().last().copied().unwrap_or(1).max(1);
    let hits = logits
        .data()
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;

    fn tiny() -> (ImageDataset, PatchGeometry, ModelConfig) {
        let ds = synth_dataset("two-shapes", 8, 8, 8, 1).unwrap();
        let g = PatchGeometry::for_dataset(&ds, 4, 4).unwrap();
        let mut cfg = ModelConfig::new(1, 2, 8, g.patch_dim(), g.grid_rows, g.grid_cols);
        cfg.class_count = 2;
        (ds, g, cfg)
    }

    #[test]
    fn zero_head_predicts_class_zero() {
        let (ds, g, cfg) = tiny();
        let p: ModelParams<f32> = init_supervised(&cfg, &mut Rng::new(0)).unwrap();
        assert_eq!(predict(&p, &cfg, &ds, &g).unwrap(), [0; 8]);
    }

    #[test]
    fn accuracy_from_rows() {
        let l = Tensor::<f64>::from_f64(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 0.5, 0.5]).unwrap();
        assert_eq!(accuracy_from_logits(&l, &[0, 1, 0]), 1.0);
        assert!((accuracy_from_logits(&l, &[1, 1, 1]) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn pretrained_init_swaps_heads() {
        let (_, _, cfg) = tiny();
        let pre = ModelConfig {
            class_count: 0,
            ..cfg
        };
        let mut params: ModelParams<f32> =
            ModelParams::init_encoder(&pre, &mut Rng::new(3)).unwrap();
        params.add_position_head(&pre);
        let ckpt = Checkpoint {
            config: pre,
            params,
            step: 1,
            phase: Phase::Pretrained,
        };
        let (c, p) =
            init_from_pretrained(&ckpt, PeMode::LearnedAbsolute, 2, &mut Rng::new(4)).unwrap();
        assert!(!p.contains(POS_HEAD));
        assert_eq!(p.get(CLS_HEAD_W).unwrap().shape(), &[8, 2]);
        assert_eq!(p.get("pos_embed").unwrap().shape(), &[4, 8]);
        assert_eq!(
            p.get("blocks.0.attn.q.weight").unwrap(),
            ckpt.params.get("blocks.0.attn.q.weight").unwrap()
        );
        p.check_encoder(&c).unwrap();

        let mut bad = ckpt.clone();
        bad.params
            .insert("blocks.0.attn.q.weight", Tensor::zeros(&[8, 4]));
        assert!(matches!(
            init_from_pretrained(&bad, PeMode::None, 2, &mut Rng::new(4)),
            Err(Error::TensorShape { .. })
        ));
    }

    #[test]
    fn training_runs_and_is_deterministic() {
        let (ds, g, cfg) = tiny();
        let mut t = TrainConfig::with_steps(6);
        t.batch_size = 4;
        let run = || {
            let p: ModelParams<f32> = init_supervised(&cfg, &mut Rng::new(0)).unwrap();
            train_classifier(&ds, Some(&ds), &g, &cfg, p, &t, Phase::Supervised).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.checkpoint.params, b.checkpoint.params);
        assert_eq!(a.metrics.len(), 3);
        assert_eq!(a.checkpoint.step, 6);
        assert!(a.metrics.iter().all(|m| m.loss.is_finite()));
    }
}
