//! Step-time and workspace benchmark of masked pretraining against a
//! full-attention supervised step.

use std::time::Instant;

use mp3_core::data::{make_batch, shuffle_tokens, ImageDataset, PatchGeometry, TokenBatch};
use mp3_core::finetune::{classify_step, init_supervised};
use mp3_core::objective::{context_count, MaskSpec};
use mp3_core::optim::{AdamW, TrainConfig};
use mp3_core::pretrain::{pretrain_config, pretrain_step, sample_mask};
use mp3_core::{ModelConfig, ModelParams, Rng, TapeStats};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    /// `"mp3"` for a masked pretraining step, `"supervised"` for the full-attention baseline.
    pub mode: &'static str,
    pub eta: f64,
    pub context: usize,
    /// Median wall time of one step.
    pub seconds: f64,
    pub peak_bytes: usize,
    pub forward_flops: u64,
    pub backward_flops: u64,
}

enum Arm {
    Mp3 {
        eta: f64,
        params: ModelParams<f32>,
        opt: AdamW<f32>,
        batch: TokenBatch<f32>,
        mask: MaskSpec,
    },
    Supervised {
        params: ModelParams<f32>,
        opt: AdamW<f32>,
        batch: TokenBatch<f32>,
    },
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times one full step (forward, backward, update) per masking ratio and one
/// supervised step. Settings are interleaved within every repeat so slow
/// drifts of the machine affect all of them alike.
pub fn bench_iteration(
    ds: &ImageDataset,
    geom: &PatchGeometry,
    cfg: &ModelConfig,
    etas: &[f64],
    repeats: usize,
    warmups: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if repeats < 3 {
        return Err(CliError::Config(format!(
            "bench needs at least 3 repeats, got {repeats}"
        )));
    }
    if ds.count == 0 {
        return Err(CliError::Config("bench needs a non-empty batch".into()));
    }
    let rng = Rng::new(seed);
    let n = geom.num_positions();
    let idx: Vec<usize> = (0..ds.count).collect();
    let clean = make_batch::<f32>(ds, &idx, geom, None);
    let train = TrainConfig::with_steps(warmups + repeats);

    let pcfg = pretrain_config(cfg);
    let mut pparams = ModelParams::<f32>::init_encoder(&pcfg, &mut rng.split("init"))?;
    pparams.add_position_head(&pcfg);
    let shuffled = shuffle_tokens(&clean, &mut rng.split("shuffle"));
    let mut arms = Vec::with_capacity(etas.len() + 1);
    for (i, &eta) in etas.iter().enumerate() {
        let mask = sample_mask(ds.count, n, eta, 0.0, &rng.split_indexed("mask", i as u64))?;
        arms.push(Arm::Mp3 {
            eta,
            params: pparams.clone(),
            opt: AdamW::new(&train),
            batch: shuffled.clone(),
            mask,
        });
    }
    let scfg = ModelConfig {
        class_count: cfg.class_count.max(ds.class_count).max(1),
        ..*cfg
    };
    arms.push(Arm::Supervised {
        params: init_supervised(&scfg, &mut rng.split("init"))?,
        opt: AdamW::new(&train),
        batch: clean,
    });

    let mut times = vec![Vec::with_capacity(repeats); arms.len()];
    let mut stats = vec![TapeStats::default(); arms.len()];
    for rep in 0..warmups + repeats {
        for (a, arm) in arms.iter_mut().enumerate() {
            let step = rep + 1;
            let t0 = Instant::now();
            let s = match arm {
                Arm::Mp3 {
                    params,
                    opt,
                    batch,
                    mask,
                    ..
                } => pretrain_step(params, opt, &pcfg, batch, mask, step)?.stats,
                Arm::Supervised { params, opt, batch } => {
                    classify_step(params, opt, &scfg, batch, step)?.stats
                }
            };
            let dt = t0.elapsed().as_secs_f64();
            if rep >= warmups {
                times[a].push(dt);
            }
            stats[a] = s;
        }
    }

    Ok(arms
        .iter()
        .zip(times)
        .zip(stats)
        .map(|((arm, t), s)| {
            let (mode, eta, context) = match arm {
                Arm::Mp3 { eta, .. } => ("mp3", *eta, context_count(n, *eta)),
                Arm::Supervised { .. } => ("supervised", 0.0, n),
            };
            BenchRow {
                mode,
                eta,
                context,
                seconds: median(t),
                peak_bytes: s.peak_bytes,
                forward_flops: s.forward_flops,
                backward_flops: s.backward_flops,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
