//! Position prediction pretraining loop.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::analysis::position_accuracy;
use crate::data::{
    epoch_batches, make_batch, shuffle_tokens, ImageDataset, PatchGeometry, TokenBatch,
};
use crate::encoder::{encoder_forward, Bound, ForwardOptions};
use crate::error::Result;
use crate::finetune::{Checkpoint, Phase};
use crate::model::{ModelConfig, ModelParams, PeMode, POS_HEAD};
use crate::objective::{
    context_count, mp3_loss, position_logits, sample_hints, topk_counts, MaskSpec,
};
use crate::optim::{AdamW, TrainConfig};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Tape, TapeStats};
use crate::tensor::Tensor;

/// One row of the pretraining metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainMetrics {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub pos_top1: f64,
    pub pos_top5: f64,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss: f64,
    pub top1: usize,
    pub top5: usize,
    pub tokens: usize,
    pub lr: f64,
    pub stats: TapeStats,
}

#[derive(Debug, Clone)]
pub struct PretrainResult<T> {
    pub checkpoint: Checkpoint<T>,
    pub metrics: Vec<PretrainMetrics>,
    /// Loss of every step, in order.
    pub losses: Vec<f64>,
}

/// Gradients of every bound parameter that received one.
pub fn collect_grads<T: Real>(tape: &Tape<T>, bound: &Bound) -> BTreeMap<String, Tensor<T>> {
    bound
        .iter()
        .filter_map(|(name, v)| tape.grad(v).map(|g| (String::from(name), g)))
        .collect()
}

/// Masks (and hints) for a batch: fresh per sample.
pub fn sample_mask(
    batch: usize,
    n: usize,
    eta: f64,
    hint_fraction: f64,
    rng: &Rng,
) -> Result<MaskSpec> {
    let mut mask = MaskSpec::sample(batch, n, eta, &mut rng.split("context"))?;
    if hint_fraction > 0.0 {
        mask.hint_idx = sample_hints(batch, n, hint_fraction, &mut rng.split("hints"));
    }
    Ok(mask)
}

/// Forward pass and loss of the position task. Returns the tape, loss and logits variables.
pub fn position_forward<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    batch: &TokenBatch<T>,
    mask: &MaskSpec,
) -> Result<(crate::tape::Var, crate::tape::Var)> {
    let n = batch.num_tokens();
    let hints = mask.hint_mask(n);
    let mut opts = ForwardOptions::new(PeMode::None);
    // a full context is plain attention; skip the gather
    if mask.context_size() < n {
        opts = opts.context(&mask.ctx_idx);
    }
    if mask.hint_idx.iter().any(|h| !h.is_empty()) {
        opts = opts.hints(&hints);
    }
    let out = encoder_forward(tape, bound, cfg, batch, opts)?;
    let logits = position_logits(tape, out.hidden, bound.get(POS_HEAD)?)?;
    let loss = mp3_loss(tape, logits, &batch.position_ids)?;
    Ok((loss, logits))
}

/// Forward, backward and optimizer update on one (already shuffled) batch.
pub fn pretrain_step<T: Real>(
    params: &mut ModelParams<T>,
    opt: &mut AdamW<T>,
    cfg: &ModelConfig,
    batch: &TokenBatch<T>,
    mask: &MaskSpec,
    step: usize,
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params, true);
    let (loss, logits) = position_forward(&mut tape, &bound, cfg, batch, mask)?;
    tape.backward(loss)?;
    let grads = collect_grads(&tape, &bound);
    let (top1, top5) = topk_counts(
        tape.value(logits).data(),
        cfg.num_positions,
        &batch.position_ids,
    );
    let loss_v = tape.value(loss).item().to_f64();
    let stats = tape.stats();
    drop(tape);
    let lr = opt.step(params, &grads, step)?;
    Ok(StepOutcome {
        loss: loss_v,
        top1,
        top5,
        tokens: batch.position_ids.len(),
        lr,
        stats,
    })
}

/// Pretraining configuration of the encoder: positional embeddings are never used.
pub fn pretrain_config(cfg: &ModelConfig) -> ModelConfig {
    ModelConfig {
        pe_mode: PeMode::None,
        class_count: 0,
        ..*cfg
    }
}

/// Runs the full loop from a fresh initialization.
pub fn pretrain<T: Real>(
    ds: &ImageDataset,
    geom: &PatchGeometry,
    model: &ModelConfig,
    train: &TrainConfig,
) -> Result<PretrainResult<T>> {
    train.validate()?;
    let cfg = pretrain_config(model);
    let root = Rng::new(train.seed);
    let mut params = ModelParams::<T>::init_encoder(&cfg, &mut root.split("init"))?;
    params.add_position_head(&cfg);
    pretrain_from(ds, geom, &cfg, params, train)
}

/// Runs the loop starting from the given parameters (which must include the position head).
pub fn pretrain_from<T: Real>(
    ds: &ImageDataset,
    geom: &PatchGeometry,
    cfg: &ModelConfig,
    mut params: ModelParams<T>,
    train: &TrainConfig,
) -> Result<PretrainResult<T>> {
    train.validate()?;
    cfg.validate()?;
    params.check_encoder(cfg)?;
    params.get(POS_HEAD)?;
    let root = Rng::new(train.seed);
    let mut opt = AdamW::new(train);
    let n = geom.num_positions();
    let mut metrics = Vec::new();
    let mut losses = Vec::with_capacity(train.total_steps);
    let mut step = 0;
    let mut epoch = 0;
    'outer: while step < train.total_steps {
        let order = epoch_batches(
            ds.count,
            train.batch_size,
            true,
            &mut root.split_indexed("epoch", epoch as u64),
        );
        let (mut loss_sum, mut tok, mut c1, mut c5, mut lr) = (0.0, 0usize, 0usize, 0usize, 0.0);
        for idx in order {
            if step >= train.total_steps {
                break;
            }
            step += 1;
            let step_rng = root.split_indexed("step", step as u64);
            let src = make_batch::<T>(ds, &idx, geom, None);
            let batch = shuffle_tokens(&src, &mut step_rng.split("shuffle"));
            let mask = sample_mask(
                batch.batch_size(),
                n,
                train.eta,
                train.hint_fraction,
                &step_rng,
            )?;
            debug_assert_eq!(mask.context_size(), context_count(n, train.eta));
            let out = pretrain_step(&mut params, &mut opt, cfg, &batch, &mask, step)?;
            losses.push(out.loss);
            loss_sum += out.loss * out.tokens as f64;
            tok += out.tokens;
            c1 += out.top1;
            c5 += out.top5;
            lr = out.lr;
        }
        let m = PretrainMetrics {
            epoch,
            step,
            lr,
            loss: loss_sum / tok.max(1) as f64,
            pos_top1: c1 as f64 / tok.max(1) as f64,
            pos_top5: c5 as f64 / tok.max(1) as f64,
        };
        metrics.push(m);
        epoch += 1;
        if let Some(target) = train.stop_at_pos_top1 {
            let ckpt = Checkpoint {
                config: *cfg,
                params,
                step,
                phase: Phase::Pretrained,
            };
            let acc = position_accuracy(&ckpt, ds, geom, train.eta, train.seed)?;
            params = ckpt.params;
            if acc.top1 >= target {
                break 'outer;
            }
        }
    }
    Ok(PretrainResult {
        checkpoint: Checkpoint {
            config: *cfg,
            params,
            step,
            phase: Phase::Pretrained,
        },
        metrics,
        losses,
    })
}
