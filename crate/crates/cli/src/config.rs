//! Run configuration: defaults, `key = value` files with sections, flag overrides
//! and the manifest written next to every run's artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mp3_core::optim::TrainConfig;
use mp3_core::PeMode;

use crate::error::{CliError, Result};

/// Every configuration key: `(section, key, help)`. Keys are unique across
/// sections, and each one is also a `--flag` with `_` spelled `-`.
pub const KEYS: &[(&str, &str, &str)] = &[
    (
        "run",
        "seed",
        "master seed for initialization, sampling and synthetic data",
    ),
    (
        "run",
        "checkpoint",
        "input checkpoint for finetune and the analysis commands",
    ),
    (
        "data",
        "data",
        "training dataset file (synthetic data is generated when empty)",
    ),
    (
        "data",
        "eval_data",
        "held-out dataset file (synthetic when empty)",
    ),
    (
        "data",
        "kind",
        "synthetic kind: gradient-quadrants, two-shapes, striped-classes",
    ),
    ("data", "count", "synthetic training examples"),
    ("data", "eval_count", "synthetic held-out examples"),
    ("data", "height", "synthetic image height"),
    ("data", "width", "synthetic image width"),
    (
        "data",
        "data_seed",
        "synthetic training data seed (auto: seed)",
    ),
    (
        "data",
        "eval_seed",
        "synthetic held-out data seed (auto: seed + 1000000)",
    ),
    ("data", "patch", "patch size in pixels"),
    (
        "data",
        "stride",
        "patch stride (auto: equal to the patch size)",
    ),
    ("model", "depth", "transformer blocks"),
    ("model", "heads", "attention heads"),
    ("model", "dim", "model width"),
    (
        "model",
        "mlp_ratio",
        "MLP hidden width as a multiple of the model width",
    ),
    (
        "model",
        "pe",
        "classification PE: none, learned-absolute, sinusoidal, relative-2d",
    ),
    ("train", "lr", "peak learning rate"),
    (
        "train",
        "warmup",
        "warmup steps (auto: 5% of the step budget)",
    ),
    ("train", "steps", "optimizer steps"),
    ("train", "weight_decay", "decoupled weight decay"),
    ("train", "beta1", "AdamW first moment decay"),
    ("train", "beta2", "AdamW second moment decay"),
    ("train", "adam_eps", "AdamW epsilon"),
    ("train", "batch", "batch size"),
    ("train", "eta", "pretraining masking ratio"),
    (
        "train",
        "hint_fraction",
        "fraction of tokens given sinusoidal position hints",
    ),
    (
        "train",
        "stop_at",
        "stop pretraining at this evaluated position top-1 (none: off)",
    ),
    (
        "train",
        "hflip",
        "random horizontal flips during classification training",
    ),
    (
        "train",
        "crop_pad",
        "random crop padding during classification training",
    ),
    ("eval", "etas", "evaluation masking ratios"),
    ("eval", "k", "neighbours in the k-NN probe"),
    ("eval", "layer", "k-NN probe layer (all: every layer)"),
    ("eval", "mode", "correlation mode: within, across"),
    (
        "eval",
        "fill",
        "gray level of empty reconstruction cells, in [0, 1]",
    ),
    (
        "eval",
        "images",
        "images to reconstruct or record attention for",
    ),
    ("bench", "bench_etas", "masking ratios to benchmark"),
    ("bench", "bench_batch", "benchmark batch size"),
    ("bench", "repeats", "timed repeats per setting"),
    ("bench", "warmups", "untimed warmup repeats per setting"),
    (
        "sweep",
        "sweep_etas",
        "pretraining masking ratios for sweep-eta",
    ),
    ("sweep", "patches", "patch sizes for sweep-patch"),
    ("sweep", "pretrain_steps", "pretraining steps per sweep run"),
    (
        "sweep",
        "finetune_steps",
        "finetune and from-scratch steps per sweep run",
    ),
    (
        "sweep",
        "seeds",
        "replicates; replicate r shifts every seed by r",
    ),
];

/// Manifest section listing a run's artifacts; skipped when a manifest is read back as a config.
pub const OUTPUTS_SECTION: &str = "outputs";

pub const EVAL_SEED_OFFSET: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,

    pub data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub kind: String,
    pub count: usize,
    pub eval_count: usize,
    pub height: usize,
    pub width: usize,
    pub data_seed: Option<u64>,
    pub eval_seed: Option<u64>,
    pub patch: usize,
    pub stride: Option<usize>,

    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
    pub pe: PeMode,

    pub lr: f64,
    pub warmup: Option<usize>,
    pub steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch: usize,
    pub eta: f64,
    pub hint_fraction: f64,
    pub stop_at: Option<f64>,
    pub hflip: bool,
    pub crop_pad: usize,

    pub etas: Vec<f64>,
    pub k: usize,
    pub layer: Option<usize>,
    pub mode: String,
    pub fill: f64,
    pub images: usize,

    pub bench_etas: Vec<f64>,
    pub bench_batch: usize,
    pub repeats: usize,
    pub warmups: usize,

    pub sweep_etas: Vec<f64>,
    pub patches: Vec<usize>,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            checkpoint: None,
            data: None,
            eval_data: None,
            kind: "gradient-quadrants".into(),
            count: 512,
            eval_count: 256,
            height: 16,
            width: 16,
            data_seed: None,
            eval_seed: None,
            patch: 4,
            stride: None,
            depth: 4,
            heads: 4,
            dim: 32,
            mlp_ratio: 4,
            pe: PeMode::LearnedAbsolute,
            lr: 1e-3,
            warmup: None,
            steps: 400,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch: 32,
            eta: 0.75,
            hint_fraction: 0.0,
            stop_at: None,
            hflip: false,
            crop_pad: 0,
            etas: vec![0.0, 0.25, 0.5, 0.75],
            k: 20,
            layer: None,
            mode: "within".into(),
            fill: 0.5,
            images: 4,
            bench_etas: vec![0.3, 0.5, 0.75, 0.9],
            bench_batch: 8,
            repeats: 7,
            warmups: 2,
            sweep_etas: vec![0.0, 0.25, 0.5, 0.75],
            patches: vec![4, 8],
            pretrain_steps: 400,
            finetune_steps: 300,
            seeds: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_opt<T: FromStr>(key: &str, v: &str, none: &str) -> Result<Option<T>> {
    if v.trim() == none {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    let items: Vec<T> = v
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(CliError::Config(format!("{key}: empty list")));
    }
    Ok(items)
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(CliError::Config(format!(
            "{key}: expected a boolean, got {other:?}"
        ))),
    }
}

fn path_opt(v: &str) -> Option<PathBuf> {
    let v = v.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn show_opt<T: ToString>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), T::to_string)
}

fn show_path(v: &Option<PathBuf>) -> String {
    v.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

pub fn section_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(_, k, _)| *k == key).map(|(s, _, _)| *s)
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "checkpoint" => self.checkpoint = path_opt(v),
            "data" => self.data = path_opt(v),
            "eval_data" => self.eval_data = path_opt(v),
            "kind" => {
                mp3_core::data::SynthKind::parse(v.trim())?;
                self.kind = v.trim().to_string();
            }
            "count" => self.count = parse(key, v)?,
            "eval_count" => self.eval_count = parse(key, v)?,
            "height" => self.height = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "data_seed" => self.data_seed = parse_opt(key, v, "auto")?,
            "eval_seed" => self.eval_seed = parse_opt(key, v, "auto")?,
            "patch" => self.patch = parse(key, v)?,
            "stride" => self.stride = parse_opt(key, v, "auto")?,
            "depth" => self.depth = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "dim" => self.dim = parse(key, v)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, v)?,
            "pe" => self.pe = PeMode::parse(v.trim())?,
            "lr" => self.lr = parse(key, v)?,
            "warmup" => self.warmup = parse_opt(key, v, "auto")?,
            "steps" => self.steps = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "eta" => self.eta = parse(key, v)?,
            "hint_fraction" => self.hint_fraction = parse(key, v)?,
            "stop_at" => self.stop_at = parse_opt(key, v, "none")?,
            "hflip" => self.hflip = parse_bool(key, v)?,
            "crop_pad" => self.crop_pad = parse(key, v)?,
            "etas" => self.etas = parse_list(key, v)?,
            "k" => self.k = parse(key, v)?,
            "layer" => self.layer = parse_opt(key, v, "all")?,
            "mode" => {
                mp3_core::analysis::CorrelationMode::parse(v.trim())?;
                self.mode = v.trim().to_string();
            }
            "fill" => self.fill = parse(key, v)?,
            "images" => self.images = parse(key, v)?,
            "bench_etas" => self.bench_etas = parse_list(key, v)?,
            "bench_batch" => self.bench_batch = parse(key, v)?,
            "repeats" => self.repeats = parse(key, v)?,
            "warmups" => self.warmups = parse(key, v)?,
            "sweep_etas" => self.sweep_etas = parse_list(key, v)?,
            "patches" => self.patches = parse_list(key, v)?,
            "pretrain_steps" => self.pretrain_steps = parse(key, v)?,
            "finetune_steps" => self.finetune_steps = parse(key, v)?,
            "seeds" => self.seeds = parse(key, v)?,
            other => return Err(CliError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Text form of one key, as accepted by [`RunConfig::set`].
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "checkpoint" => show_path(&self.checkpoint),
            "data" => show_path(&self.data),
            "eval_data" => show_path(&self.eval_data),
            "kind" => self.kind.clone(),
            "count" => self.count.to_string(),
            "eval_count" => self.eval_count.to_string(),
            "height" => self.height.to_string(),
            "width" => self.width.to_string(),
            "data_seed" => show_opt(&self.data_seed, "auto"),
            "eval_seed" => show_opt(&self.eval_seed, "auto"),
            "patch" => self.patch.to_string(),
            "stride" => show_opt(&self.stride, "auto"),
            "depth" => self.depth.to_string(),
            "heads" => self.heads.to_string(),
            "dim" => self.dim.to_string(),
            "mlp_ratio" => self.mlp_ratio.to_string(),
            "pe" => self.pe.name().to_string(),
            "lr" => self.lr.to_string(),
            "warmup" => show_opt(&self.warmup, "auto"),
            "steps" => self.steps.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "batch" => self.batch.to_string(),
            "eta" => self.eta.to_string(),
            "hint_fraction" => self.hint_fraction.to_string(),
            "stop_at" => show_opt(&self.stop_at, "none"),
            "hflip" => self.hflip.to_string(),
            "crop_pad" => self.crop_pad.to_string(),
            "etas" => join(&self.etas),
            "k" => self.k.to_string(),
            "layer" => show_opt(&self.layer, "all"),
            "mode" => self.mode.clone(),
            "fill" => self.fill.to_string(),
            "images" => self.images.to_string(),
            "bench_etas" => join(&self.bench_etas),
            "bench_batch" => self.bench_batch.to_string(),
            "repeats" => self.repeats.to_string(),
            "warmups" => self.warmups.to_string(),
            "sweep_etas" => join(&self.sweep_etas),
            "patches" => join(&self.patches),
            "pretrain_steps" => self.pretrain_steps.to_string(),
            "finetune_steps" => self.finetune_steps.to_string(),
            "seeds" => self.seeds.to_string(),
            _ => return None,
        })
    }

    /// Applies a config file's text. Keys must sit in their own section.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section: Option<String> = None;
        let mut skipping = false;
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            let err = |msg: String| CliError::ConfigSyntax { line: i + 1, msg };
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("unterminated section header {line:?}")))?
                    .trim();
                skipping = name == OUTPUTS_SECTION;
                if skipping {
                    continue;
                }
                if !KEYS.iter().any(|(s, _, _)| *s == name) {
                    return Err(err(format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            if skipping {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            let key = key.trim();
            let Some(sec) = section.as_deref() else {
                return Err(err(format!("key {key:?} outside any section")));
            };
            match section_of(key) {
                None => return Err(err(format!("unknown key {key:?}"))),
                Some(s) if s != sec => {
                    return Err(err(format!("key {key:?} belongs in [{s}], not [{sec}]")))
                }
                Some(_) => {}
            }
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key {key:?}")));
            }
            self.set(key, value).map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn eval_seed(&self) -> u64 {
        self.eval_seed
            .unwrap_or(self.seed.wrapping_add(EVAL_SEED_OFFSET))
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.patch)
    }

    /// The same configuration with every seed shifted by `r`.
    pub fn replicate(&self, r: usize) -> Self {
        let r = r as u64;
        Self {
            seed: self.seed.wrapping_add(r),
            data_seed: Some(self.data_seed().wrapping_add(r)),
            eval_seed: Some(self.eval_seed().wrapping_add(r)),
            ..self.clone()
        }
    }

    /// Optimizer settings for a phase with `steps` steps.
    pub fn train_config(&self, steps: usize) -> TrainConfig {
        let mut t = TrainConfig::with_steps(steps);
        if let Some(w) = self.warmup {
            t.warmup_steps = w;
        }
        t.lr = self.lr;
        t.weight_decay = self.weight_decay;
        t.beta1 = self.beta1;
        t.beta2 = self.beta2;
        t.adam_eps = self.adam_eps;
        t.batch_size = self.batch;
        t.seed = self.seed;
        t.eta = self.eta;
        t.hint_fraction = self.hint_fraction;
        t.stop_at_pos_top1 = self.stop_at;
        t.hflip = self.hflip;
        t.crop_pad = self.crop_pad;
        t
    }

    /// Resolved configuration as sectioned `key = value` text, loadable by
    /// [`RunConfig::apply_text`]. Seeds are written out explicitly.
    pub fn to_text(&self) -> String {
        let resolved = Self {
            data_seed: Some(self.data_seed()),
            eval_seed: Some(self.eval_seed()),
            ..self.clone()
        };
        let mut out = String::new();
        let mut current = "";
        for (sec, key, _) in KEYS {
            if *sec != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{sec}]");
                current = sec;
            }
            let _ = writeln!(
                out,
                "{key} = {}",
                resolved.get(key).expect("every key renders")
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let cfg = RunConfig::default();
        for (_, key, _) in KEYS {
            let v = cfg.get(key).unwrap();
            let mut c = RunConfig::default();
            c.set(key, &v).unwrap();
            assert_eq!(c, cfg, "{key}");
        }
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back.data_seed(), cfg.data_seed());
        back.apply_text("[outputs]\ncheckpoint = x.ckpt\n").unwrap();
        assert_eq!(back.checkpoint, None);
    }

    #[test]
    fn file_errors_name_the_line() {
        let mut c = RunConfig::default();
        let e = c.apply_text("[train]\nlr = 0.1\nbogus = 3\n").unwrap_err();
        assert!(e.to_string().contains("line 3"), "{e}");
        assert_eq!(c.lr, 0.1);
        assert!(c.apply_text("[model]\neta = 0.5\n").is_err());
        assert!(c.apply_text("eta = 0.5\n").is_err());
        assert!(c.apply_text("[nope]\n").is_err());
        assert!(c.apply_text("[train]\neta = 0.5\neta = 0.6\n").is_err());
        assert!(c.apply_text("[train]\neta = half\n").is_err());
    }

    #[test]
    fn comments_blank_lines_and_optionals() {
        let mut c = RunConfig::default();
        c.apply_text("# run\n\n[train]\nwarmup = 7 # fixed\nstop_at = 0.9\n[eval]\nlayer = all\netas = 0, 0.5\n")
            .unwrap();
        assert_eq!(c.warmup, Some(7));
        assert_eq!(c.stop_at, Some(0.9));
        assert_eq!(c.layer, None);
        assert_eq!(c.etas, vec![0.0, 0.5]);
        assert_eq!(c.train_config(100).warmup_steps, 7);
    }

    #[test]
    fn replicas_shift_all_seeds() {
        let c = RunConfig {
            seed: 5,
            ..Default::default()
        };
        let r = c.replicate(2);
        assert_eq!(
            (r.seed, r.data_seed(), r.eval_seed()),
            (7, 7, 5 + EVAL_SEED_OFFSET + 2)
        );
    }
}
