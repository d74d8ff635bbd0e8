//! Transformer encoder over position-less patch tokens.
//!
//! Token index 0 of the encoder sequence is the cls token; token `t >= 1` is
//! input slot `t - 1`. With a context set, queries come from every token but
//! keys and values only from the cls token and the context tokens.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, PeMode};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Parameter tensors registered on a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn new<T: Real>(tape: &mut Tape<T>, params: &ModelParams<T>, requires_grad: bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| (String::from(name), tape.leaf(t.clone(), requires_grad)))
            .collect();
        Self { vars }
    }

    /// Binds names to variables already on a tape.
    pub fn from_vars<'a>(vars: impl IntoIterator<Item = (&'a str, Var)>) -> Self {
        Self {
            vars: vars
                .into_iter()
                .map(|(k, v)| (String::from(k), v))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingTensor(String::from(name)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Post-softmax attention weights of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnRecord {
    pub layer: usize,
    pub batch: usize,
    pub heads: usize,
    /// Number of query tokens (including cls).
    pub queries: usize,
    /// Number of key tokens (including cls).
    pub keys: usize,
    /// `[B, h, queries, keys]`
    pub weights: Vec<f64>,
    /// `[B, keys]`: encoder token index of each key column; 0 is cls.
    pub key_tokens: Vec<usize>,
    /// `[B, queries]`: true grid position of each query token, `None` for cls.
    pub positions: Vec<Option<usize>>,
}

impl AttnRecord {
    /// Weights of one (sample, head) as a `queries x keys` row-major slice.
    pub fn head(&self, sample: usize, head: usize) -> &[f64] {
        let n = self.queries * self.keys;
        let o = (sample * self.heads + head) * n;
        &self.weights[o..o + n]
    }

    pub fn key_token(&self, sample: usize, col: usize) -> usize {
        self.key_tokens[sample * self.keys + col]
    }

    /// True position of an encoder token (`None` for cls).
    pub fn token_position(&self, sample: usize, token: usize) -> Option<usize> {
        self.positions[sample * self.queries + token]
    }
}

/// Encoder inputs besides the parameters.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub pe_mode: PeMode,
    /// Per-sample context slots (indices into the `N` input tokens).
    pub context: Option<&'a [Vec<usize>]>,
    /// `B * N` flags: sinusoidal PE is added to flagged slots only.
    pub hints: Option<&'a [bool]>,
    pub record: bool,
}

impl<'a> ForwardOptions<'a> {
    pub fn new(pe_mode: PeMode) -> Self {
        Self {
            pe_mode,
            context: None,
            hints: None,
            record: false,
        }
    }

    pub fn context(mut self, ctx: &'a [Vec<usize>]) -> Self {
        self.context = Some(ctx);
        self
    }

    pub fn hints(mut self, hints: &'a [bool]) -> Self {
        self.hints = Some(hints);
        self
    }

    pub fn record(mut self, record: bool) -> Self {
        self.record = record;
        self
    }
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[B, N + 1, d]` after the final norm.
    pub hidden: Var,
    /// Residual stream before block 0 and after each block, `[B, N + 1, d]`.
    pub layers: Vec<Var>,
    pub records: Vec<AttnRecord>,
}

/// Shared patch projection plus the cls token at index 0: `[B, N + 1, d]`.
pub fn patch_embed<T: Real>(tape: &mut Tape<T>, bound: &Bound, tokens: Var) -> Result<Var> {
    let x = project_tokens(tape, bound, tokens)?;
    tape.prepend_row(bound.get("cls_token")?, x)
}

fn project_tokens<T: Real>(tape: &mut Tape<T>, bound: &Bound, tokens: Var) -> Result<Var> {
    let x = tape.matmul(tokens, bound.get("patch_embed.weight")?)?;
    tape.add(x, bound.get("patch_embed.bias")?)
}

/// Sinusoidal table row: `sin(pos / 10000^(2i/d))` at `2i`, `cos` at `2i + 1`.
pub fn sinusoid_row(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let i2 = (j - j % 2) as f64;
            let angle = pos as f64 / libm::pow(10000.0, i2 / d as f64);
            if j % 2 == 0 {
                libm::sin(angle)
            } else {
                libm::cos(angle)
            }
        })
        .collect()
}

/// Sinusoidal term for the given slots, zero where `mask` is false.
pub fn sinusoid_term<T: Real>(position_ids: &[usize], d: usize, mask: Option<&[bool]>) -> Vec<T> {
    let mut out = Vec::with_capacity(position_ids.len() * d);
    for (i, &p) in position_ids.iter().enumerate() {
        if mask.is_none_or(|m| m[i]) {
            out.extend(sinusoid_row(p, d).into_iter().map(T::from_f64));
        } else {
            out.extend(core::iter::repeat_n(T::ZERO, d));
        }
    }
    out
}

/// Additive positional term `[B, N, d]` for non-cls tokens.
pub fn positional_embedding<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    pe_mode: PeMode,
    position_ids: &[usize],
    batch: usize,
) -> Result<Var> {
    let n = position_ids.len() / batch.max(1);
    let d = cfg.width;
    if let Some(&id) = position_ids.iter().find(|&&p| p >= cfg.num_positions) {
        return Err(Error::PositionOutOfRange {
            id,
            positions: cfg.num_positions,
        });
    }
    match pe_mode {
        PeMode::None => Ok(tape.constant(Tensor::zeros(&[batch, n, d]))),
        PeMode::Sinusoidal => Ok(tape.constant(Tensor::new(
            &[batch, n, d],
            sinusoid_term(position_ids, d, None),
        )?)),
        PeMode::LearnedAbsolute => {
            tape.embedding(bound.get("pos_embed")?, position_ids, &[batch, n])
        }
        PeMode::Relative2d => Err(Error::Config(
            "relative-2d positions are applied inside attention".into(),
        )),
    }
}

/// Relative-bias column for each (sample, query token, key column).
fn relative_index(
    cfg: &ModelConfig,
    position_ids: &[usize],
    batch: usize,
    queries: usize,
    keys: &[usize],
) -> Vec<usize> {
    let n = queries - 1;
    let s = keys.len() / batch;
    let cols2 = 2 * cfg.grid_cols - 1;
    let cls_slot = cfg.rel_table_len();
    let mut idx = Vec::with_capacity(batch * queries * s);
    for b in 0..batch {
        let pos = &position_ids[b * n..(b + 1) * n];
        for q in 0..queries {
            for &k in &keys[b * s..(b + 1) * s] {
                if q == 0 || k == 0 {
                    idx.push(cls_slot);
                    continue;
                }
                let (qp, kp) = (pos[q - 1], pos[k - 1]);
                let dr = (kp / cfg.grid_cols) + cfg.grid_rows - 1 - qp / cfg.grid_cols;
                let dc = (kp % cfg.grid_cols) + cfg.grid_cols - 1 - qp % cfg.grid_cols;
                idx.push(dr * cols2 + dc);
            }
        }
    }
    idx
}

/// Multi-head attention of one block on normalized input `x: [B, T, d]`.
///
/// `keys` lists, per sample, the `S` token indices (0 = cls) contributing keys
/// and values; `None` means all `T` tokens.
#[allow(clippy::too_many_arguments)]
pub fn attention<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    layer: usize,
    x: Var,
    keys: Option<&[usize]>,
    rel_index: Option<&[usize]>,
    record: Option<&mut Vec<AttnRecord>>,
    positions: &[Option<usize>],
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let (h, dh) = (cfg.heads, cfg.head_dim());
    let p = |s: &str| format!("blocks.{layer}.attn.{s}");

    let kv_in = match keys {
        Some(k) => tape.gather_rows(x, k)?,
        None => x,
    };
    let s = tape.shape(kv_in)[1];
    if s == 0 {
        return Err(Error::EmptyContext);
    }

    let linear = |tape: &mut Tape<T>, input: Var, name: &str| -> Result<Var> {
        let y = tape.matmul(input, bound.get(&p(&format!("{name}.weight")))?)?;
        tape.add(y, bound.get(&p(&format!("{name}.bias")))?)
    };
    let q = linear(tape, x, "q")?;
    let k = linear(tape, kv_in, "k")?;
    let v = linear(tape, kv_in, "v")?;

    let q = tape.reshape(q, &[b, t, h, dh])?;
    let q = tape.permute(q, &[0, 2, 1, 3])?;
    let k = tape.reshape(k, &[b, s, h, dh])?;
    let kt = tape.permute(k, &[0, 2, 3, 1])?;
    let v = tape.reshape(v, &[b, s, h, dh])?;
    let v = tape.permute(v, &[0, 2, 1, 3])?;

    let scores = tape.matmul(q, kt)?;
    let mut scores = tape.scale(scores, T::ONE / T::from_usize(dh).sqrt());
    if let Some(idx) = rel_index {
        let bias = tape.gather_bias(bound.get(&p("rel_bias"))?, idx, [b, t, s])?;
        scores = tape.add(scores, bias)?;
    }
    let probs = tape.softmax_lastdim(scores)?;

    if let Some(records) = record {
        let key_tokens = match keys {
            Some(k) => k.to_vec(),
            None => (0..b).flat_map(|_| 0..t).collect(),
        };
        records.push(AttnRecord {
            layer,
            batch: b,
            heads: h,
            queries: t,
            keys: s,
            weights: tape
                .value(probs)
                .data()
                .iter()
                .map(|v| v.to_f64())
                .collect(),
            key_tokens,
            positions: positions.to_vec(),
        });
    }

    let out = tape.matmul(probs, v)?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    let out = tape.reshape(out, &[b, t, d])?;
    linear(tape, out, "proj")
}

fn mlp<T: Real>(tape: &mut Tape<T>, bound: &Bound, layer: usize, x: Var) -> Result<Var> {
    let p = |s: &str| format!("blocks.{layer}.mlp.{s}");
    let y = tape.matmul(x, bound.get(&p("fc1.weight"))?)?;
    let y = tape.add(y, bound.get(&p("fc1.bias"))?)?;
    let y = tape.gelu(y);
    let y = tape.matmul(y, bound.get(&p("fc2.weight"))?)?;
    tape.add(y, bound.get(&p("fc2.bias"))?)
}

fn layer_norm<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let g = bound.get(&format!("{prefix}.gain"))?;
    let b = bound.get(&format!("{prefix}.bias"))?;
    tape.layer_norm(x, g, b, T::from_f64(cfg.ln_eps))
}

/// Attention-space key indices (cls first, then context slots shifted by one).
pub fn context_keys(context: &[Vec<usize>], n: usize) -> Result<Vec<usize>> {
    let m = context.first().map_or(0, Vec::len);
    if m == 0 {
        return Err(Error::EmptyContext);
    }
    let mut keys = Vec::with_capacity(context.len() * (m + 1));
    for ctx in context {
        if ctx.len() != m {
            return Err(Error::Config("context sets must have equal size".into()));
        }
        let mut seen = vec![false; n];
        keys.push(0);
        for &c in ctx {
            if c >= n || seen[c] {
                return Err(Error::InvalidContext {
                    index: c,
                    tokens: n,
                });
            }
            seen[c] = true;
            keys.push(c + 1);
        }
    }
    Ok(keys)
}

/// Pre-norm encoder: `x += attn(LN(x)); x += mlp(LN(x))` per block, then a final norm.
pub fn encoder_forward<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    batch: &TokenBatch<T>,
    opts: ForwardOptions<'_>,
) -> Result<EncoderOutput> {
    let (b, n, pdim) = (batch.batch_size(), batch.num_tokens(), batch.patch_dim());
    if pdim != cfg.patch_dim {
        return Err(Error::ShapeMismatch {
            op: "patch_embed",
            lhs: batch.tokens.shape().to_vec(),
            rhs: vec![cfg.patch_dim, cfg.width],
        });
    }
    if n > cfg.num_positions {
        return Err(Error::Config(format!(
            "{n} tokens exceed {} positions",
            cfg.num_positions
        )));
    }
    if let Some(ctx) = opts.context {
        if ctx.len() != b {
            return Err(Error::Config("one context set per sample required".into()));
        }
    }
    let tokens = tape.constant(batch.tokens.clone());
    let mut x = project_tokens(tape, bound, tokens)?;
    match opts.pe_mode {
        PeMode::None | PeMode::Relative2d => {}
        mode => {
            let pe = positional_embedding(tape, bound, cfg, mode, &batch.position_ids, b)?;
            x = tape.add(x, pe)?;
        }
    }
    if let Some(mask) = opts.hints {
        let term = sinusoid_term::<T>(&batch.position_ids, cfg.width, Some(mask));
        let pe = tape.constant(Tensor::new(&[b, n, cfg.width], term)?);
        x = tape.add(x, pe)?;
    }
    x = tape.prepend_row(bound.get("cls_token")?, x)?;

    let t = n + 1;
    let keys = match opts.context {
        Some(ctx) => Some(context_keys(ctx, n)?),
        None => None,
    };
    let rel_index = if opts.pe_mode == PeMode::Relative2d {
        let all: Vec<usize>;
        let key_list = match &keys {
            Some(k) => k.as_slice(),
            None => {
                all = (0..b).flat_map(|_| 0..t).collect();
                &all
            }
        };
        Some(relative_index(cfg, &batch.position_ids, b, t, key_list))
    } else {
        None
    };
    let positions: Vec<Option<usize>> = if opts.record {
        (0..b)
            .flat_map(|s| {
                core::iter::once(None).chain(
                    batch.position_ids[s * n..(s + 1) * n]
                        .iter()
                        .map(|&p| Some(p)),
                )
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut records = Vec::new();
    let mut layers = vec![x];
    for l in 0..cfg.depth {
        let y = layer_norm(tape, bound, cfg, &format!("blocks.{l}.norm1"), x)?;
        let y = attention(
            tape,
            bound,
            cfg,
            l,
            y,
            keys.as_deref(),
            rel_index.as_deref(),
            opts.record.then_some(&mut records),
            &positions,
        )?;
        x = tape.add(x, y)?;
        let y = layer_norm(tape, bound, cfg, &format!("blocks.{l}.norm2"), x)?;
        let y = mlp(tape, bound, l, y)?;
        x = tape.add(x, y)?;
        layers.push(x);
    }
    let hidden = layer_norm(tape, bound, cfg, "norm", x)?;
    Ok(EncoderOutput {
        hidden,
        layers,
        records,
    })
}

/// Analytic matmul FLOPs of one attention layer's forward pass with `s` key tokens.
pub fn attention_flops(batch: usize, t: usize, s: usize, d: usize) -> u64 {
    let (b, t, s, d) = (batch as u64, t as u64, s as u64, d as u64);
    // q + proj over all tokens, k + v over keys, scores and weighted sum over t x s
    2 * b * t * d * d * 2 + 2 * b * s * d * d * 2 + 2 * b * t * s * d * 2
}
