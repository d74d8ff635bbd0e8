//! Measurements on trained encoders: position accuracy, reconstructions,
//! attention statistics, k-NN probing and token correlation maps.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::{make_batch, patch_bytes, ImageDataset, PatchGeometry, TokenBatch};
use crate::encoder::{encoder_forward, AttnRecord, Bound, EncoderOutput, ForwardOptions};
use crate::error::{Error, Result};
use crate::finetune::Checkpoint;
use crate::model::{ModelConfig, ModelParams, PeMode, POS_HEAD};
use crate::objective::{argmax, mask_sample, position_logits, topk_counts, MaskSpec};
use crate::pretrain::position_forward;
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 32;

/// Runs the encoder over the dataset in storage order and hands every batch to `f`.
fn for_each_encoded<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    ds: &ImageDataset,
    geom: &PatchGeometry,
    record: bool,
    mut f: impl FnMut(&Tape<T>, &EncoderOutput, &TokenBatch<T>) -> Result<()>,
) -> Result<()> {
    let all: Vec<usize> = (0..ds.count).collect();
    for idx in all.chunks(EVAL_BATCH) {
        let batch = make_batch::<T>(ds, idx, geom, None);
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, params, false);
        let opts = ForwardOptions::new(cfg.pe_mode).record(record);
        let out = encoder_forward(&mut tape, &bound, cfg, &batch, opts)?;
        f(&tape, &out, &batch)?;
    }
    Ok(())
}

// ---- position accuracy -----------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct PositionAccuracy {
    pub eta: f64,
    pub top1: f64,
    pub top5: f64,
    pub loss: f64,
}

fn require_position_head<T: Real>(ckpt: &Checkpoint<T>) -> Result<()> {
    if ckpt.params.contains(POS_HEAD) {
        Ok(())
    } else {
        Err(Error::NoPositionHead)
    }
}

/// Position accuracy over every token of the dataset with fresh context sets at `eta`.
pub fn position_accuracy<T: Real>(
    ckpt: &Checkpoint<T>,
    ds: &ImageDataset,
    geom: &PatchGeometry,
    eta: f64,
    seed: u64,
) -> Result<PositionAccuracy> {
    require_position_head(ckpt)?;
    let cfg = &ckpt.config;
    let n = geom.num_positions();
    let rng = Rng::new(seed);
    let all: Vec<usize> = (0..ds.count).collect();
    let (mut c1, mut c5, mut tok, mut loss) = (0usize, 0usize, 0usize, 0.0);
    for (bi, idx) in all.chunks(EVAL_BATCH).enumerate() {
        let batch = make_batch::<T>(ds, idx, geom, None);
        let mask = MaskSpec::sample(idx.len(), n, eta, &mut rng.split_indexed("mask", bi as u64))?;
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &ckpt.params, false);
        let (l, logits) = position_forward(&mut tape, &bound, cfg, &batch, &mask)?;
        let (a, b) = topk_counts(
            tape.value(logits).data(),
            cfg.num_positions,
            &batch.position_ids,
        );
        c1 += a;
        c5 += b;
        tok += batch.position_ids.len();
        loss += tape.value(l).item().to_f64() * batch.position_ids.len() as f64;
    }
    let t = tok.max(1) as f64;
    Ok(PositionAccuracy {
        eta,
        top1: c1 as f64 / t,
        top5: c5 as f64 / t,
        loss: loss / t,
    })
}

/// [`position_accuracy`] at each evaluation ratio, all with the same seed.
pub fn position_accuracy_curve<T: Real>(
    ckpt: &Checkpoint<T>,
    ds: &ImageDataset,
    geom: &PatchGeometry,
    etas: &[f64],
    seed: u64,
) -> Result<Vec<PositionAccuracy>> {
    etas.iter()
        .map(|&eta| position_accuracy(ckpt, ds, geom, eta, seed))
        .collect()
}

// ---- reconstruction --------------------------------------------------------

/// Per-pixel accumulator for patches placed on the grid.
#[derive(Debug, Clone)]
pub struct ReconCanvas {
    geom: PatchGeometry,
    sums: Vec<f64>,
    counts: Vec<u32>,
}

impl ReconCanvas {
    pub fn new(geom: &PatchGeometry) -> Self {
        let (h, w) = (geom.image_height(), geom.image_width());
        Self {
            geom: *geom,
            sums: vec![0.0; h * w * geom.channels],
            counts: vec![0; h * w],
        }
    }

    /// Accumulates `patch` (raw bytes, `[ph][pw][c]`) into grid cell `pos`.
    pub fn add_patch(&mut self, pos: usize, patch: &[u8]) -> Result<()> {
        let g = &self.geom;
        if pos >= g.num_positions() {
            return Err(Error::PositionOutOfRange {
                id: pos,
                positions: g.num_positions(),
            });
        }
        let (w, c) = (g.image_width(), g.channels);
        let (gr, gc) = (pos / g.grid_cols, pos % g.grid_cols);
        for ph in 0..g.patch_h {
            for pw in 0..g.patch_w {
                let (y, x) = (gr * g.stride_h + ph, gc * g.stride_w + pw);
                let src = (ph * g.patch_w + pw) * c;
                self.counts[y * w + x] += 1;
                for ch in 0..c {
                    self.sums[(y * w + x) * c + ch] += f64::from(patch[src + ch]);
                }
            }
        }
        Ok(())
    }

    /// Mean value per pixel in byte units, `fill * 255` where nothing landed.
    pub fn render_f64(&self, fill: f64) -> Vec<f64> {
        let c = self.geom.channels;
        self.sums
            .iter()
            .enumerate()
            .map(|(i, &s)| match self.counts[i / c] {
                0 => fill * 255.0,
                k => s / f64::from(k),
            })
            .collect()
    }

    pub fn render(&self, fill: f64) -> Vec<u8> {
        self.render_f64(fill)
            .into_iter()
            .map(|v| libm::round(v.clamp(0.0, 255.0)) as u8)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub image: Vec<u8>,
    /// The same render with a one-pixel border around cells that received a context patch.
    pub overlay: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Places patch `p` of `patches` at `predicted[p]`; `context` lists the patch indices
/// that were in the attention context.
pub fn reconstruct(
    patches: &[u8],
    predicted: &[usize],
    context: &[usize],
    geom: &PatchGeometry,
    fill: f64,
) -> Result<Reconstruction> {
    let pd = geom.patch_dim();
    if patches.len() != predicted.len() * pd {
        return Err(Error::Config(
            "one predicted position per patch required".into(),
        ));
    }
    let mut canvas = ReconCanvas::new(geom);
    for (p, &pos) in predicted.iter().enumerate() {
        canvas.add_patch(pos, &patches[p * pd..(p + 1) * pd])?;
    }
    let image = canvas.render(fill);
    let mut overlay = image.clone();
    let (w, c) = (geom.image_width(), geom.channels);
    let mark: [u8; 3] = [0, 255, 0];
    for &p in context {
        let pos = *predicted.get(p).ok_or(Error::InvalidContext {
            index: p,
            tokens: predicted.len(),
        })?;
        let (gr, gc) = (pos / geom.grid_cols, pos % geom.grid_cols);
        for ph in 0..geom.patch_h {
            for pw in 0..geom.patch_w {
                let edge = ph == 0 || pw == 0 || ph + 1 == geom.patch_h || pw + 1 == geom.patch_w;
                if !edge {
                    continue;
                }
                let (y, x) = (gr * geom.stride_h + ph, gc * geom.stride_w + pw);
                for ch in 0..c {
                    overlay[(y * w + x) * c + ch] = if c == 3 { mark[ch] } else { 255 };
                }
            }
        }
    }
    Ok(Reconstruction {
        image,
        overlay,
        height: geom.image_height(),
        width: w,
        channels: c,
    })
}

/// Tokens from raw patch bytes, scaled to `[0, 1]`.
fn tokens_from_bytes<T: Real>(
    patches: &[u8],
    positions: &[usize],
    geom: &PatchGeometry,
) -> TokenBatch<T> {
    let (n, p) = (positions.len(), geom.patch_dim());
    let data = patches
        .iter()
        .map(|&v| T::from_f64(f64::from(v) / 255.0))
        .collect();
    TokenBatch {
        tokens: Tensor::new(&[1, n, p], data).expect("patch count"),
        grid_rows: geom.grid_rows,
        grid_cols: geom.grid_cols,
        position_ids: positions.to_vec(),
        labels: vec![0],
        indices: vec![0],
    }
}

/// Argmax position of each patch when only `context` patches supply keys and values.
pub fn predict_patch_positions<T: Real>(
    ckpt: &Checkpoint<T>,
    geom: &PatchGeometry,
    patches: &[u8],
    context: &[usize],
) -> Result<Vec<usize>> {
    require_position_head(ckpt)?;
    let cfg = &ckpt.config;
    let n = patches.len() / geom.patch_dim();
    let ids: Vec<usize> = (0..n).map(|i| i % cfg.num_positions.max(1)).collect();
    let batch = tokens_from_bytes::<T>(patches, &ids, geom);
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, &ckpt.params, false);
    let ctx = [context.to_vec()];
    let mut opts = ForwardOptions::new(PeMode::None);
    if context.len() < n {
        opts = opts.context(&ctx);
    }
    let out = encoder_forward(&mut tape, &bound, cfg, &batch, opts)?;
    let logits = position_logits(&mut tape, out.hidden, bound.get(POS_HEAD)?)?;
    Ok(tape
        .value(logits)
        .data()
        .chunks_exact(cfg.num_positions)
        .map(argmax)
        .collect())
}

/// Reconstruction of one image from model predictions at masking ratio `eta`.
pub fn reconstruct_image<T: Real>(
    ckpt: &Checkpoint<T>,
    ds: &ImageDataset,
    index: usize,
    geom: &PatchGeometry,
    eta: f64,
    rng: &mut Rng,
    fill: f64,
) -> Result<Reconstruction> {
    let patches = patch_bytes(ds.image(index), ds.width, geom);
    let ctx = mask_sample(geom.num_positions(), eta, rng)?;
    let pred = predict_patch_positions(ckpt, geom, &patches, &ctx)?;
    reconstruct(&patches, &pred, &ctx, geom, fill)
}

/// Patches of two images shuffled together, split into two sets of `N`, each set
/// position-predicted by `predict(patches, context)` and rendered.
#[allow(clippy::too_many_arguments)]
pub fn mixed_reconstruction_with(
    image_a: &[u8],
    image_b: &[u8],
    width: usize,
    geom: &PatchGeometry,
    eta: f64,
    rng: &mut Rng,
    fill: f64,
    mut predict: impl FnMut(&[u8], &[usize], &[usize]) -> Result<Vec<usize>>,
) -> Result<[Reconstruction; 2]> {
    if image_a.len() != image_b.len()
        || image_a.len() != geom.image_height() * width * geom.channels
    {
        return Err(Error::Config(
            "images do not share the patch geometry".into(),
        ));
    }
    let n = geom.num_positions();
    let pd = geom.patch_dim();
    let mut pool = patch_bytes(image_a, width, geom);
    pool.extend(patch_bytes(image_b, width, geom));
    let truth: Vec<usize> = (0..2 * n).map(|i| i % n).collect();
    let order = rng.permutation(2 * n);
    let mut renders = Vec::with_capacity(2);
    for half in order.chunks(n) {
        let mut patches = Vec::with_capacity(n * pd);
        let mut pos = Vec::with_capacity(n);
        for &i in half {
            patches.extend_from_slice(&pool[i * pd..(i + 1) * pd]);
            pos.push(truth[i]);
        }
        let ctx = mask_sample(n, eta, rng)?;
        let pred = predict(&patches, &pos, &ctx)?;
        renders.push(reconstruct(&patches, &pred, &ctx, geom, fill)?);
    }
    let b = renders.pop().expect("two halves");
    let a = renders.pop().expect("two halves");
    Ok([a, b])
}

/// [`mixed_reconstruction_with`] using the checkpoint's position head.
#[allow(clippy::too_many_arguments)]
pub fn mixed_reconstruction<T: Real>(
    ckpt: &Checkpoint<T>,
    image_a: &[u8],
    image_b: &[u8],
    width: usize,
    geom: &PatchGeometry,
    eta: f64,
    rng: &mut Rng,
    fill: f64,
) -> Result<[Reconstruction; 2]> {
    require_position_head(ckpt)?;
    mixed_reconstruction_with(
        image_a,
        image_b,
        width,
        geom,
        eta,
        rng,
        fill,
        |p, _, ctx| predict_patch_positions(ckpt, geom, p, ctx),
    )
}

// ---- attention statistics --------------------------------------------------

/// Shannon entropy of one distribution, `0 * ln 0 = 0`.
pub fn row_entropy(row: &[f64]) -> f64 {
    -row.iter()
        .filter(|&&a| a > 0.0)
        .map(|&a| a * libm::log(a))
        .sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadEntropy {
    pub layer: usize,
    pub head: usize,
    pub entropy: f64,
}

/// Mean entropy of the non-cls query rows, per (layer, head), over all records.
pub fn attention_entropy(records: &[AttnRecord]) -> Vec<HeadEntropy> {
    let layers = records.iter().map(|r| r.layer + 1).max().unwrap_or(0);
    let heads = records.iter().map(|r| r.heads).max().unwrap_or(0);
    let mut sum = vec![0.0; layers * heads];
    let mut rows = vec![0usize; layers * heads];
    for r in records {
        for s in 0..r.batch {
            for h in 0..r.heads {
                let w = r.head(s, h);
                for q in 1..r.queries {
                    sum[r.layer * heads + h] += row_entropy(&w[q * r.keys..(q + 1) * r.keys]);
                    rows[r.layer * heads + h] += 1;
                }
            }
        }
    }
    let mut out = Vec::new();
    for layer in 0..layers {
        for head in 0..heads {
            let i = layer * heads + head;
            if rows[i] > 0 {
                out.push(HeadEntropy {
                    layer,
                    head,
                    entropy: sum[i] / rows[i] as f64,
                });
            }
        }
    }
    out
}

/// Average attention mass by 2D offset (key minus query), one map per (layer, head).
#[derive(Debug, Clone, PartialEq)]
pub struct RelAttnMap {
    pub layer: usize,
    pub head: usize,
    pub rows: usize,
    pub cols: usize,
    /// `rows x cols` row-major; the center bin is zero offset.
    pub values: Vec<f64>,
    /// Number of (sample, query) rows averaged.
    pub samples: usize,
}

impl RelAttnMap {
    pub fn at(&self, dr: isize, dc: isize) -> f64 {
        let r = (dr + (self.rows / 2) as isize) as usize;
        let c = (dc + (self.cols / 2) as isize) as usize;
        self.values[r * self.cols + c]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Relative attention maps with the cls token excluded as query and as key.
pub fn relative_attention_map(
    records: &[AttnRecord],
    grid_rows: usize,
    grid_cols: usize,
) -> Result<Vec<RelAttnMap>> {
    let (rows, cols) = (2 * grid_rows - 1, 2 * grid_cols - 1);
    let mut maps: Vec<RelAttnMap> = Vec::new();
    for r in records {
        for h in 0..r.heads {
            let mi = match maps.iter().position(|m| m.layer == r.layer && m.head == h) {
                Some(i) => i,
                None => {
                    maps.push(RelAttnMap {
                        layer: r.layer,
                        head: h,
                        rows,
                        cols,
                        values: vec![0.0; rows * cols],
                        samples: 0,
                    });
                    maps.len() - 1
                }
            };
            let m = &mut maps[mi];
            for s in 0..r.batch {
                let w = r.head(s, h);
                for q in 1..r.queries {
                    let qp = r.token_position(s, q).ok_or(Error::InvalidContext {
                        index: q,
                        tokens: r.queries,
                    })?;
                    for col in 0..r.keys {
                        let kt = r.key_token(s, col);
                        if kt == 0 {
                            continue;
                        }
                        let kp = r.token_position(s, kt).ok_or(Error::InvalidContext {
                            index: kt,
                            tokens: r.queries,
                        })?;
                        let dr = kp / grid_cols + grid_rows - 1 - qp / grid_cols;
                        let dc = kp % grid_cols + grid_cols - 1 - qp % grid_cols;
                        m.values[dr * cols + dc] += w[q * r.keys + col];
                    }
                    m.samples += 1;
                }
            }
        }
    }
    for m in &mut maps {
        let k = m.samples.max(1) as f64;
        m.values.iter_mut().for_each(|v| *v /= k);
    }
    maps.sort_by_key(|m| (m.layer, m.head));
    Ok(maps)
}

/// Full-attention records for the first `max_images` images, tokens in true order.
pub fn collect_attention<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    ds: &ImageDataset,
    geom: &PatchGeometry,
    max_images: usize,
) -> Result<Vec<AttnRecord>> {
    let sub = ds.subset(&(0..ds.count.min(max_images)).collect::<Vec<_>>());
    let mut out = Vec::new();
    for_each_encoded(params, cfg, &sub, geom, true, |_, enc, _| {
        out.extend(enc.records.iter().cloned());
        Ok(())
    })?;
    Ok(out)
}

// ---- k-NN probe ------------------------------------------------------------

/// Mean of the non-cls token states at residual layer `layer` (0 is the embedding).
pub fn pooled_features<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    ds: &ImageDataset,
    geom: &PatchGeometry,
    layer: usize,
) -> Result<Vec<Vec<f64>>> {
    if layer > cfg.depth {
        return Err(Error::Config(alloc::format!(
            "layer {layer} exceeds depth {}",
            cfg.depth
        )));
    }
    let d = cfg.width;
    let mut feats = Vec::with_capacity(ds.count);
    for_each_encoded(params, cfg, ds, geom, false, |tape, enc, batch| {
        let v = tape.value(enc.layers[layer]).data();
        let t = batch.num_tokens() + 1;
        for s in 0..batch.batch_size() {
            let mut f = vec![0.0; d];
            for tok in 1..t {
                let row = &v[(s * t + tok) * d..(s * t + tok + 1) * d];
                for (a, &x) in f.iter_mut().zip(row) {
                    *a += x.to_f64();
                }
            }
            f.iter_mut().for_each(|a| *a /= (t - 1) as f64);
            feats.push(f);
        }
        Ok(())
    })?;
    Ok(feats)
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    ab / (libm::sqrt(aa) * libm::sqrt(bb))
}

/// Majority vote of the `k` most similar training features; similarity ties go to
/// the lower training index, vote ties to the smallest class.
pub fn knn_classify(
    train: &[Vec<f64>],
    train_labels: &[usize],
    queries: &[Vec<f64>],
    k: usize,
) -> Result<Vec<usize>> {
    if k == 0 || k > train.len() {
        return Err(Error::KOutOfRange {
            k,
            train: train.len(),
        });
    }
    let classes = train_labels.iter().max().map_or(0, |&c| c + 1);
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        // (similarity, index), best first
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        for (i, t) in train.iter().enumerate() {
            let s = cosine(q, t);
            if best.len() == k && s <= best[k - 1].0 {
                continue;
            }
            let at = best
                .iter()
                .position(|&(bs, _)| s > bs)
                .unwrap_or(best.len());
            best.insert(at, (s, i));
            best.truncate(k);
        }
        let mut votes = vec![0usize; classes];
        for &(_, i) in &best {
            votes[train_labels[i]] += 1;
        }
        out.push(argmax_count(&votes));
    }
    Ok(out)
}

fn argmax_count(votes: &[usize]) -> usize {
    let mut best = 0;
    for (c, &v) in votes.iter().enumerate() {
        if v > votes[best] {
            best = c;
        }
    }
    best
}

/// k-NN accuracy of pooled layer features from `train` applied to `eval`.
pub fn knn_probe<T: Real>(
    ckpt: &Checkpoint<T>,
    layer: usize,
    train: &ImageDataset,
    eval: &ImageDataset,
    geom: &PatchGeometry,
    k: usize,
) -> Result<f64> {
    if k == 0 || k > train.count {
        return Err(Error::KOutOfRange {
            k,
            train: train.count,
        });
    }
    let tf = pooled_features(&ckpt.params, &ckpt.config, train, geom, layer)?;
    let ef = pooled_features(&ckpt.params, &ckpt.config, eval, geom, layer)?;
    let tl: Vec<usize> = train.labels.iter().map(|&l| l as usize).collect();
    let pred = knn_classify(&tf, &tl, &ef, k)?;
    let hits = pred
        .iter()
        .zip(&eval.labels)
        .filter(|(p, &y)| **p == y as usize)
        .count();
    Ok(hits as f64 / eval.count.max(1) as f64)
}

// ---- correlation maps ------------------------------------------------------

/// Pearson correlation across entries; `None` if either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some((cov / libm::sqrt(va * vb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrelationMode {
    Within,
    Across,
}

impl CorrelationMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "within" => Ok(Self::Within),
            "across" => Ok(Self::Across),
            other => Err(Error::Config(alloc::format!(
                "unknown correlation mode {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMap {
    pub n: usize,
    /// `n x n` row-major.
    pub values: Vec<f64>,
    /// Pairs whose correlation was undefined and counted as 0.
    pub flagged: usize,
}

/// Final-layer token vectors `[image][position][d]` in true position order.
pub fn token_features<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    ds: &ImageDataset,
    geom: &PatchGeometry,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let d = cfg.width;
    let mut out = Vec::with_capacity(ds.count);
    for_each_encoded(params, cfg, ds, geom, false, |tape, enc, batch| {
        let v = tape.value(enc.hidden).data();
        let t = batch.num_tokens() + 1;
        for s in 0..batch.batch_size() {
            out.push(
                (1..t)
                    .map(|tok| {
                        v[(s * t + tok) * d..(s * t + tok + 1) * d]
                            .iter()
                            .map(|x| x.to_f64())
                            .collect()
                    })
                    .collect(),
            );
        }
        Ok(())
    })?;
    Ok(out)
}

/// Correlation matrix from precomputed token features.
pub fn correlation_from_features(
    feats: &[Vec<Vec<f64>>],
    mode: CorrelationMode,
    rng: &mut Rng,
) -> Result<CorrelationMap> {
    let n = feats.first().map_or(0, Vec::len);
    let mut values = vec![0.0; n * n];
    let mut flagged = 0;
    let mut draws = 0usize;
    let mut accumulate = |x: &[Vec<f64>], y: &[Vec<f64>], values: &mut [f64]| {
        for i in 0..n {
            for j in 0..n {
                match pearson(&x[i], &y[j]) {
                    Some(r) => values[i * n + j] += r,
                    None => flagged += 1,
                }
            }
        }
    };
    match mode {
        CorrelationMode::Within => {
            for f in feats {
                accumulate(f, f, &mut values);
                draws += 1;
            }
        }
        CorrelationMode::Across => {
            if feats.len() < 2 {
                return Err(Error::Config(
                    "across-image correlation needs two images".into(),
                ));
            }
            for _ in 0..feats.len() {
                let a = rng.below(feats.len());
                let mut b = rng.below(feats.len() - 1);
                if b >= a {
                    b += 1;
                }
                accumulate(&feats[a], &feats[b], &mut values);
                draws += 1;
            }
        }
    }
    let k = draws.max(1) as f64;
    values.iter_mut().for_each(|v| *v /= k);
    Ok(CorrelationMap { n, values, flagged })
}

/// Pearson correlation of final-layer token vectors between position pairs.
pub fn position_correlation<T: Real>(
    ckpt: &Checkpoint<T>,
    ds: &ImageDataset,
    geom: &PatchGeometry,
    mode: CorrelationMode,
    seed: u64,
) -> Result<CorrelationMap> {
    let feats = token_features(&ckpt.params, &ckpt.config, ds, geom)?;
    correlation_from_features(&feats, mode, &mut Rng::new(seed).split("pairs"))
}
