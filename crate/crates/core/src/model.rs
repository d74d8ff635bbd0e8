//! Architecture hyperparameters and the named parameter tensors they imply.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PeMode {
    None,
    LearnedAbsolute,
    Sinusoidal,
    Relative2d,
}

impl PeMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "learned-absolute" | "learned" | "absolute" => Ok(Self::LearnedAbsolute),
            "sinusoidal" => Ok(Self::Sinusoidal),
            "relative-2d" | "relative" => Ok(Self::Relative2d),
            other => Err(Error::Config(format!("unknown pe mode {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::LearnedAbsolute => "learned-absolute",
            Self::Sinusoidal => "sinusoidal",
            Self::Relative2d => "relative-2d",
        }
    }

    pub fn code(self) -> u32 {
        match self {
            Self::None => 0,
            Self::LearnedAbsolute => 1,
            Self::Sinusoidal => 2,
            Self::Relative2d => 3,
        }
    }

    pub fn from_code(c: u32) -> Result<Self> {
        match c {
            0 => Ok(Self::None),
            1 => Ok(Self::LearnedAbsolute),
            2 => Ok(Self::Sinusoidal),
            3 => Ok(Self::Relative2d),
            _ => Err(Error::Config(format!("unknown pe mode code {c}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub depth: usize,
    pub heads: usize,
    pub width: usize,
    pub mlp_ratio: usize,
    pub patch_dim: usize,
    pub num_positions: usize,
    pub pe_mode: PeMode,
    /// Zero when the model has no classifier head.
    pub class_count: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub ln_eps: f64,
}

impl ModelConfig {
    pub fn new(
        depth: usize,
        heads: usize,
        width: usize,
        patch_dim: usize,
        grid_rows: usize,
        grid_cols: usize,
    ) -> Self {
        Self {
            depth,
            heads,
            width,
            mlp_ratio: 4,
            patch_dim,
            num_positions: grid_rows * grid_cols,
            pe_mode: PeMode::None,
            class_count: 0,
            grid_rows,
            grid_cols,
            ln_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.num_positions != self.grid_rows * self.grid_cols {
            return Err(Error::Config(format!(
                "num_positions {} != {} x {}",
                self.num_positions, self.grid_rows, self.grid_cols
            )));
        }
        if self.patch_dim == 0
            || self.width == 0
            || self.mlp_ratio == 0
            || self.ln_eps.is_nan()
            || self.ln_eps <= 0.0
        {
            return Err(Error::Config("zero-sized model dimension".to_string()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.width * self.mlp_ratio
    }

    /// Size of one head's relative bias table, excluding the cls slot.
    pub fn rel_table_len(&self) -> usize {
        (2 * self.grid_rows - 1) * (2 * self.grid_cols - 1)
    }

    /// Every encoder tensor name with its shape, in a fixed order.
    pub fn encoder_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, p, h) = (self.width, self.patch_dim, self.hidden_dim());
        let mut v: Vec<(String, Vec<usize>)> = vec![
            ("patch_embed.weight".into(), vec![p, d]),
            ("patch_embed.bias".into(), vec![d]),
            ("cls_token".into(), vec![d]),
        ];
        if self.pe_mode == PeMode::LearnedAbsolute {
            v.push(("pos_embed".into(), vec![self.num_positions, d]));
        }
        for l in 0..self.depth {
            let b = |s: &str| format!("blocks.{l}.{s}");
            v.push((b("norm1.gain"), vec![d]));
            v.push((b("norm1.bias"), vec![d]));
            for proj in ["q", "k", "v", "proj"] {
                v.push((b(&format!("attn.{proj}.weight")), vec![d, d]));
                v.push((b(&format!("attn.{proj}.bias")), vec![d]));
            }
            if self.pe_mode == PeMode::Relative2d {
                v.push((
                    b("attn.rel_bias"),
                    vec![self.heads, self.rel_table_len() + 1],
                ));
            }
            v.push((b("norm2.gain"), vec![d]));
            v.push((b("norm2.bias"), vec![d]));
            v.push((b("mlp.fc1.weight"), vec![d, h]));
            v.push((b("mlp.fc1.bias"), vec![h]));
            v.push((b("mlp.fc2.weight"), vec![h, d]));
            v.push((b("mlp.fc2.bias"), vec![d]));
        }
        v.push(("norm.gain".into(), vec![d]));
        v.push(("norm.bias".into(), vec![d]));
        v
    }
}

pub const POS_HEAD: &str = "pos_head.weight";
pub const CLS_HEAD_W: &str = "cls_head.weight";
pub const CLS_HEAD_B: &str = "cls_head.bias";

/// Parameters that AdamW does not decay: norms, biases, cls token, positional tables.
pub fn is_no_decay(name: &str) -> bool {
    name.ends_with(".bias")
        || name.ends_with(".gain")
        || name == "cls_token"
        || name == "pos_embed"
        || name.ends_with("rel_bias")
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Initial value of one encoder tensor: zeros for biases, norm offsets and
/// relative biases, ones for norm gains, truncated normal (std 0.02) otherwise.
fn init_tensor<T: Real>(name: &str, shape: &[usize], rng: &mut Rng) -> Tensor<T> {
    if name.ends_with(".gain") {
        Tensor::full(shape, T::ONE)
    } else if name.ends_with(".bias") || name.ends_with("rel_bias") {
        Tensor::zeros(shape)
    } else {
        Tensor::trunc_normal(shape, 0.02, &mut rng.split(name))
    }
}

impl<T: Real> ModelParams<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    /// Freshly initialized encoder. Heads are added separately.
    pub fn init_encoder(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut p = Self::new();
        for (name, shape) in cfg.encoder_shapes() {
            let t = init_tensor(&name, &shape, rng);
            p.insert(&name, t);
        }
        Ok(p)
    }

    /// Zero-initialized `d x n` position head.
    pub fn add_position_head(&mut self, cfg: &ModelConfig) {
        self.insert(POS_HEAD, Tensor::zeros(&[cfg.width, cfg.num_positions]));
    }

    /// Zero-initialized classifier on the cls token.
    pub fn add_classifier_head(&mut self, cfg: &ModelConfig) {
        self.insert(CLS_HEAD_W, Tensor::zeros(&[cfg.width, cfg.class_count]));
        self.insert(CLS_HEAD_B, Tensor::zeros(&[cfg.class_count]));
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Checks every encoder tensor of `cfg` is present with the right shape.
    pub fn check_encoder(&self, cfg: &ModelConfig) -> Result<()> {
        for (name, shape) in cfg.encoder_shapes() {
            let t = self.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::TensorShape {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub(crate) fn init_one(name: &str, shape: &[usize], rng: &mut Rng) -> Tensor<T> {
        init_tensor(name, shape, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn width_must_divide_heads() {
        let mut c = ModelConfig::new(1, 3, 8, 4, 2, 2);
        assert!(c.validate().is_err());
        c.heads = 2;
        assert!(c.validate().is_ok());
        c.num_positions = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_with_expected_values() {
        let mut cfg = ModelConfig::new(2, 2, 8, 12, 3, 3);
        cfg.pe_mode = PeMode::Relative2d;
        let a: ModelParams<f32> = ModelParams::init_encoder(&cfg, &mut Rng::new(1)).unwrap();
        let b: ModelParams<f32> = ModelParams::init_encoder(&cfg, &mut Rng::new(1)).unwrap();
        assert_eq!(a, b);
        assert!(a
            .get("blocks.0.norm1.gain")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
        assert!(a
            .get("blocks.1.attn.q.bias")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let rel = a.get("blocks.0.attn.rel_bias").unwrap();
        assert_eq!(rel.shape(), &[2, 5 * 5 + 1]);
        assert!(rel.data().iter().all(|&v| v == 0.0));
        let w = a.get("blocks.0.attn.q.weight").unwrap();
        assert!(w.data().iter().all(|&v| v.abs() <= 0.04));
        assert!(w.data().iter().any(|&v| v != 0.0));
        a.check_encoder(&cfg).unwrap();
    }

    #[test]
    fn no_decay_names() {
        assert!(is_no_decay("blocks.0.norm1.gain"));
        assert!(is_no_decay("patch_embed.bias"));
        assert!(is_no_decay("cls_token"));
        assert!(is_no_decay("pos_embed"));
        assert!(is_no_decay("blocks.3.attn.rel_bias"));
        assert!(!is_no_decay("blocks.0.attn.q.weight"));
        assert!(!is_no_decay(POS_HEAD));
    }
}
