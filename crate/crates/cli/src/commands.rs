//! The subcommands. Each one reads a [`RunConfig`], writes its artifacts under
//! an output directory and finishes with `manifest.ini`.

use std::fs;
use std::path::{Path, PathBuf};

use mp3_core::analysis::{
    attention_entropy, collect_attention, knn_probe, mixed_reconstruction, position_accuracy_curve,
    position_correlation, predict_patch_positions, reconstruct, relative_attention_map,
    CorrelationMode,
};
use mp3_core::data::{patch_bytes, synth_dataset, ImageDataset, PatchGeometry};
use mp3_core::finetune::{
    init_from_pretrained, init_supervised, train_classifier, Checkpoint, ClassifyMetrics,
    ClassifyResult, Phase,
};
use mp3_core::objective::mask_sample;
use mp3_core::pretrain::{pretrain, PretrainResult};
use mp3_core::{ModelConfig, Rng};

use crate::bench::bench_iteration;
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::formats::{
    load_checkpoint, load_dataset, save_checkpoint, save_dataset, save_ppm, write_csv,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenData,
    Pretrain,
    Finetune,
    TrainScratch,
    EvalPos,
    Reconstruct,
    AttnMaps,
    KnnProbe,
    Correlate,
    Bench,
    SweepEta,
    SweepPatch,
}

impl Command {
    pub const ALL: [Command; 12] = [
        Self::GenData,
        Self::Pretrain,
        Self::Finetune,
        Self::TrainScratch,
        Self::EvalPos,
        Self::Reconstruct,
        Self::AttnMaps,
        Self::KnnProbe,
        Self::Correlate,
        Self::Bench,
        Self::SweepEta,
        Self::SweepPatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::GenData => "gen-data",
            Self::Pretrain => "pretrain",
            Self::Finetune => "finetune",
            Self::TrainScratch => "train-scratch",
            Self::EvalPos => "eval-pos",
            Self::Reconstruct => "reconstruct",
            Self::AttnMaps => "attn-maps",
            Self::KnnProbe => "knn-probe",
            Self::Correlate => "correlate",
            Self::Bench => "bench",
            Self::SweepEta => "sweep-eta",
            Self::SweepPatch => "sweep-patch",
        }
    }

    pub fn about(self) -> &'static str {
        match self {
            Self::GenData => "Write a synthetic training set and held-out set",
            Self::Pretrain => "Masked position prediction pretraining",
            Self::Finetune => "Classification finetuning from a pretrained checkpoint",
            Self::TrainScratch => "Classification training from random initialization",
            Self::EvalPos => {
                "Position accuracy of a pretrained checkpoint at several masking ratios"
            }
            Self::Reconstruct => "Render images from predicted patch positions",
            Self::AttnMaps => "Attention entropy and relative attention maps",
            Self::KnnProbe => "k-NN accuracy of pooled features per layer",
            Self::Correlate => "Pearson correlation of final token features between positions",
            Self::Bench => "Step time and peak workspace per masking ratio",
            Self::SweepEta => "Pretrain at several masking ratios and finetune each",
            Self::SweepPatch => "Pretrained against from-scratch accuracy per patch size",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// What a run wrote: `(label, file name)` pairs relative to the output directory.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub outputs: Vec<(String, String)>,
    pub summary: Vec<String>,
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    out: &'a Path,
    report: Report,
}

impl Ctx<'_> {
    fn file(&mut self, label: impl Into<String>, name: impl Into<String>) -> PathBuf {
        let name = name.into();
        let path = self.out.join(&name);
        self.report.outputs.push((label.into(), name));
        path
    }

    fn say(&mut self, line: String) {
        self.report.summary.push(line);
    }
}

pub fn fmt(v: f64) -> String {
    v.to_string()
}

pub fn train_set(cfg: &RunConfig) -> Result<ImageDataset> {
    match &cfg.data {
        Some(p) => load_dataset(p),
        None => Ok(synth_dataset(
            &cfg.kind,
            cfg.count,
            cfg.height,
            cfg.width,
            cfg.data_seed(),
        )?),
    }
}

pub fn eval_set(cfg: &RunConfig) -> Result<ImageDataset> {
    match &cfg.eval_data {
        Some(p) => load_dataset(p),
        None => Ok(synth_dataset(
            &cfg.kind,
            cfg.eval_count,
            cfg.height,
            cfg.width,
            cfg.eval_seed(),
        )?),
    }
}

pub fn geometry(cfg: &RunConfig, ds: &ImageDataset) -> Result<PatchGeometry> {
    Ok(PatchGeometry::for_dataset(ds, cfg.patch, cfg.stride())?)
}

/// Encoder configuration without PE or classifier.
pub fn model_config(cfg: &RunConfig, geom: &PatchGeometry) -> Result<ModelConfig> {
    let mut m = ModelConfig::new(
        cfg.depth,
        cfg.heads,
        cfg.dim,
        geom.patch_dim(),
        geom.grid_rows,
        geom.grid_cols,
    );
    m.mlp_ratio = cfg.mlp_ratio;
    m.validate()?;
    Ok(m)
}

fn input_checkpoint(cfg: &RunConfig) -> Result<Checkpoint<f32>> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config("this command needs --checkpoint".into()))?;
    load_checkpoint(path)
}

/// Patch geometry of `ds`, checked against the checkpoint.
fn checkpoint_geometry(
    cfg: &RunConfig,
    ck: &Checkpoint<f32>,
    ds: &ImageDataset,
) -> Result<PatchGeometry> {
    let g = geometry(cfg, ds)?;
    let c = &ck.config;
    if (g.grid_rows, g.grid_cols, g.patch_dim()) != (c.grid_rows, c.grid_cols, c.patch_dim) {
        return Err(CliError::Config(format!(
            "data gives a {}x{} grid of {}-value patches, checkpoint expects {}x{} of {}",
            g.grid_rows,
            g.grid_cols,
            g.patch_dim(),
            c.grid_rows,
            c.grid_cols,
            c.patch_dim
        )));
    }
    Ok(g)
}

fn pretrain_run(
    cfg: &RunConfig,
    ds: &ImageDataset,
    geom: &PatchGeometry,
    steps: usize,
    eta: f64,
) -> Result<PretrainResult<f32>> {
    let mut t = cfg.train_config(steps);
    t.eta = eta;
    Ok(pretrain::<f32>(ds, geom, &model_config(cfg, geom)?, &t)?)
}

fn finetune_run(
    cfg: &RunConfig,
    ck: &Checkpoint<f32>,
    ds: &ImageDataset,
    eval: &ImageDataset,
    geom: &PatchGeometry,
    steps: usize,
) -> Result<ClassifyResult<f32>> {
    let mut rng = Rng::new(cfg.seed).split("finetune-init");
    let (fcfg, params) = init_from_pretrained(ck, cfg.pe, ds.class_count, &mut rng)?;
    let t = cfg.train_config(steps);
    Ok(train_classifier(
        ds,
        Some(eval),
        geom,
        &fcfg,
        params,
        &t,
        Phase::Finetuned,
    )?)
}

fn scratch_run(
    cfg: &RunConfig,
    ds: &ImageDataset,
    eval: &ImageDataset,
    geom: &PatchGeometry,
    steps: usize,
) -> Result<ClassifyResult<f32>> {
    let scfg = ModelConfig {
        pe_mode: cfg.pe,
        class_count: ds.class_count,
        ..model_config(cfg, geom)?
    };
    let params = init_supervised(&scfg, &mut Rng::new(cfg.seed).split("init"))?;
    let t = cfg.train_config(steps);
    Ok(train_classifier(
        ds,
        Some(eval),
        geom,
        &scfg,
        params,
        &t,
        Phase::Supervised,
    )?)
}

fn final_accuracy(r: &ClassifyResult<f32>) -> f64 {
    r.metrics.last().and_then(|m| m.eval_acc).unwrap_or(0.0)
}

fn classify_rows(metrics: &[ClassifyMetrics]) -> Vec<Vec<String>> {
    metrics
        .iter()
        .map(|m| {
            vec![
                m.epoch.to_string(),
                m.step.to_string(),
                fmt(m.lr),
                fmt(m.loss),
                fmt(m.train_acc),
                m.eval_acc.map(fmt).unwrap_or_default(),
            ]
        })
        .collect()
}

const CLASSIFY_HEADER: [&str; 6] = ["epoch", "step", "lr", "loss", "train_acc", "eval_acc"];

/// Runs one subcommand into `out` and writes the manifest.
pub fn run(cmd: Command, cfg: &RunConfig, out: &Path) -> Result<Report> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut ctx = Ctx {
        cfg,
        out,
        report: Report::default(),
    };
    match cmd {
        Command::GenData => gen_data(&mut ctx)?,
        Command::Pretrain => pretrain_cmd(&mut ctx)?,
        Command::Finetune => finetune_cmd(&mut ctx)?,
        Command::TrainScratch => scratch_cmd(&mut ctx)?,
        Command::EvalPos => eval_pos(&mut ctx)?,
        Command::Reconstruct => reconstruct_cmd(&mut ctx)?,
        Command::AttnMaps => attn_maps(&mut ctx)?,
        Command::KnnProbe => knn_cmd(&mut ctx)?,
        Command::Correlate => correlate(&mut ctx)?,
        Command::Bench => bench(&mut ctx)?,
        Command::SweepEta => sweep_eta(&mut ctx)?,
        Command::SweepPatch => sweep_patch(&mut ctx)?,
    }
    let mut manifest = format!("# mp3 {}\n", cmd.name());
    manifest.push_str(&cfg.to_text());
    manifest.push_str("\n[outputs]\n");
    for (label, name) in &ctx.report.outputs {
        manifest.push_str(&format!("{label} = {name}\n"));
    }
    let mpath = out.join("manifest.ini");
    fs::write(&mpath, manifest).map_err(|e| CliError::io(&mpath, e))?;
    Ok(ctx.report)
}

fn gen_data(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let train = synth_dataset(&cfg.kind, cfg.count, cfg.height, cfg.width, cfg.data_seed())?;
    let p = ctx.file("train", "train.mp3d");
    save_dataset(&train, &p)?;
    if cfg.eval_count > 0 {
        let eval = synth_dataset(
            &cfg.kind,
            cfg.eval_count,
            cfg.height,
            cfg.width,
            cfg.eval_seed(),
        )?;
        let p = ctx.file("eval", "eval.mp3d");
        save_dataset(&eval, &p)?;
    }
    for i in 0..cfg.images.min(train.count) {
        let p = ctx.file(format!("sample_{i}"), format!("sample_{i}.ppm"));
        save_ppm(
            &p,
            train.image(i),
            train.height,
            train.width,
            train.channels,
        )?;
    }
    ctx.say(format!(
        "{} training and {} held-out {} images of {}x{}",
        cfg.count, cfg.eval_count, cfg.kind, cfg.height, cfg.width
    ));
    Ok(())
}

fn pretrain_cmd(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let ds = train_set(cfg)?;
    let geom = geometry(cfg, &ds)?;
    let r = pretrain_run(cfg, &ds, &geom, cfg.steps, cfg.eta)?;
    let p = ctx.file("checkpoint", "pretrain.ckpt");
    save_checkpoint(&r.checkpoint, &p)?;
    let rows: Vec<Vec<String>> = r
        .metrics
        .iter()
        .map(|m| {
            vec![
                m.step.to_string(),
                fmt(m.lr),
                fmt(m.loss),
                fmt(m.pos_top1),
                fmt(m.pos_top5),
            ]
        })
        .collect();
    let p = ctx.file("metrics", "metrics.csv");
    write_csv(&p, &["step", "lr", "loss", "pos_top1", "pos_top5"], &rows)?;
    let rows: Vec<Vec<String>> = r
        .losses
        .iter()
        .enumerate()
        .map(|(i, l)| vec![(i + 1).to_string(), fmt(*l)])
        .collect();
    let p = ctx.file("losses", "losses.csv");
    write_csv(&p, &["step", "loss"], &rows)?;
    if let Some(m) = r.metrics.last() {
        ctx.say(format!(
            "pretrained {} steps at eta {}: loss {:.4}, position top-1 {:.4}, top-5 {:.4}",
            r.checkpoint.step, cfg.eta, m.loss, m.pos_top1, m.pos_top5
        ));
    }
    Ok(())
}

fn write_classifier(ctx: &mut Ctx, r: &ClassifyResult<f32>, ckpt: &str) -> Result<()> {
    let p = ctx.file("checkpoint", ckpt);
    save_checkpoint(&r.checkpoint, &p)?;
    let p = ctx.file("metrics", "metrics.csv");
    write_csv(&p, &CLASSIFY_HEADER, &classify_rows(&r.metrics))?;
    ctx.say(format!(
        "{} for {} steps: held-out accuracy {:.4}",
        r.checkpoint.phase.name(),
        r.checkpoint.step,
        final_accuracy(r)
    ));
    Ok(())
}

fn finetune_cmd(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let ck = input_checkpoint(cfg)?;
    let (ds, eval) = (train_set(cfg)?, eval_set(cfg)?);
    let geom = checkpoint_geometry(cfg, &ck, &ds)?;
    let r = finetune_run(cfg, &ck, &ds, &eval, &geom, cfg.steps)?;
    write_classifier(ctx, &r, "finetune.ckpt")
}

fn scratch_cmd(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let (ds, eval) = (train_set(cfg)?, eval_set(cfg)?);
    let geom = geometry(cfg, &ds)?;
    let r = scratch_run(cfg, &ds, &eval, &geom, cfg.steps)?;
    write_classifier(ctx, &r, "scratch.ckpt")
}

fn eval_pos(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let ck = input_checkpoint(cfg)?;
    let ds = train_set(cfg)?;
    let geom = checkpoint_geometry(cfg, &ck, &ds)?;
    let curve = position_accuracy_curve(&ck, &ds, &geom, &cfg.etas, cfg.seed)?;
    let rows: Vec<Vec<String>> = curve
        .iter()
        .map(|a| vec![fmt(a.eta), fmt(a.top1), fmt(a.top5), fmt(a.loss)])
        .collect();
    let p = ctx.file("accuracy", "pos_acc.csv");
    write_csv(&p, &["eta", "top1", "top5", "loss"], &rows)?;
    for a in &curve {
        ctx.say(format!(
            "eta {}: top-1 {:.4}, top-5 {:.4}",
            a.eta, a.top1, a.top5
        ));
    }
    Ok(())
}

fn reconstruct_cmd(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let ck = input_checkpoint(cfg)?;
    let ds = train_set(cfg)?;
    let geom = checkpoint_geometry(cfg, &ck, &ds)?;
    let n = geom.num_positions();
    let (h, w, c) = (geom.image_height(), geom.image_width(), geom.channels);
    let root = Rng::new(cfg.seed).split("reconstruct");
    let mut rows = Vec::new();
    for i in 0..cfg.images.min(ds.count) {
        let p = ctx.file(format!("original_{i}"), format!("original_{i}.ppm"));
        save_ppm(&p, ds.image(i), ds.height, ds.width, ds.channels)?;
        let patches = patch_bytes(ds.image(i), ds.width, &geom);
        let other = (i + 1) % ds.count;
        for (e, &eta) in cfg.etas.iter().enumerate() {
            let rng = root
                .split_indexed("image", i as u64)
                .split_indexed("eta", e as u64);
            let ctx_idx = mask_sample(n, eta, &mut rng.split("context"))?;
            let pred = predict_patch_positions(&ck, &geom, &patches, &ctx_idx)?;
            let hits = pred.iter().enumerate().filter(|(j, &p)| *j == p).count();
            rows.push(vec![
                i.to_string(),
                fmt(eta),
                ctx_idx.len().to_string(),
                fmt(hits as f64 / n as f64),
            ]);
            let r = reconstruct(&patches, &pred, &ctx_idx, &geom, cfg.fill)?;
            let p = ctx.file(
                format!("recon_{i}_eta{eta}"),
                format!("recon_{i}_eta{eta}.ppm"),
            );
            save_ppm(&p, &r.image, h, w, c)?;
            let p = ctx.file(
                format!("context_{i}_eta{eta}"),
                format!("context_{i}_eta{eta}.ppm"),
            );
            save_ppm(&p, &r.overlay, h, w, c)?;
            let [a, b] = mixed_reconstruction(
                &ck,
                ds.image(i),
                ds.image(other),
                ds.width,
                &geom,
                eta,
                &mut rng.split("mixed"),
                cfg.fill,
            )?;
            for (tag, m) in [("a", a), ("b", b)] {
                let name = format!("mixed_{i}_{other}_eta{eta}_{tag}");
                let p = ctx.file(name.clone(), format!("{name}.ppm"));
                save_ppm(&p, &m.image, h, w, c)?;
            }
        }
    }
    let p = ctx.file("accuracy", "recon.csv");
    write_csv(&p, &["image", "eta", "context", "top1"], &rows)?;
    ctx.say(format!(
        "reconstructed {} images at {} masking ratios",
        rows.len() / cfg.etas.len().max(1),
        cfg.etas.len()
    ));
    Ok(())
}

fn attn_maps(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let ck = input_checkpoint(cfg)?;
    let ds = train_set(cfg)?;
    let geom = checkpoint_geometry(cfg, &ck, &ds)?;
    let records = collect_attention(&ck.params, &ck.config, &ds, &geom, cfg.images.max(1))?;
    let ent = attention_entropy(&records);
    let rows: Vec<Vec<String>> = ent
        .iter()
        .map(|e| vec![e.layer.to_string(), e.head.to_string(), fmt(e.entropy)])
        .collect();
    let p = ctx.file("entropy", "entropy.csv");
    write_csv(&p, &["layer", "head", "entropy"], &rows)?;
    let maps = relative_attention_map(&records, geom.grid_rows, geom.grid_cols)?;
    let mut summary = Vec::new();
    for m in &maps {
        let (hr, hc) = ((m.rows / 2) as isize, (m.cols / 2) as isize);
        let mut header = vec!["dr".to_string()];
        header.extend((-hc..=hc).map(|dc| dc.to_string()));
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let grid: Vec<Vec<String>> = (-hr..=hr)
            .map(|dr| {
                let mut row = vec![dr.to_string()];
                row.extend((-hc..=hc).map(|dc| fmt(m.at(dr, dc))));
                row
            })
            .collect();
        let name = format!("relmap_l{}_h{}", m.layer, m.head);
        let p = ctx.file(name.clone(), format!("{name}.csv"));
        write_csv(&p, &header, &grid)?;
        summary.push(vec![
            m.layer.to_string(),
            m.head.to_string(),
            m.rows.to_string(),
            m.cols.to_string(),
            fmt(m.at(0, 0)),
            m.samples.to_string(),
        ]);
    }
    let p = ctx.file("relmaps", "relmaps.csv");
    write_csv(
        &p,
        &["layer", "head", "rows", "cols", "center", "samples"],
        &summary,
    )?;
    if let Some(low) = ent.iter().min_by(|a, b| a.entropy.total_cmp(&b.entropy)) {
        ctx.say(format!(
            "{} heads; lowest entropy {:.4} at layer {} head {}",
            ent.len(),
            low.entropy,
            low.layer,
            low.head
        ));
    }
    Ok(())
}

fn knn_cmd(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let ck = input_checkpoint(cfg)?;
    let (ds, eval) = (train_set(cfg)?, eval_set(cfg)?);
    let geom = checkpoint_geometry(cfg, &ck, &ds)?;
    let layers: Vec<usize> = match cfg.layer {
        Some(l) => vec![l],
        None => (0..=ck.config.depth).collect(),
    };
    let mut rows = Vec::new();
    for &l in &layers {
        let acc = knn_probe(&ck, l, &ds, &eval, &geom, cfg.k)?;
        rows.push(vec![l.to_string(), cfg.k.to_string(), fmt(acc)]);
        ctx.say(format!("layer {l}: {}-NN accuracy {acc:.4}", cfg.k));
    }
    let p = ctx.file("accuracy", "knn.csv");
    write_csv(&p, &["layer", "k", "accuracy"], &rows)
}

fn correlate(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let ck = input_checkpoint(cfg)?;
    let ds = train_set(cfg)?;
    let geom = checkpoint_geometry(cfg, &ck, &ds)?;
    let mode = CorrelationMode::parse(&cfg.mode)?;
    let map = position_correlation(&ck, &ds, &geom, mode, cfg.seed)?;
    let n = map.n;
    let mut header = vec!["position".to_string()];
    header.extend((0..n).map(|j| j.to_string()));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = (0..n)
        .map(|i| {
            let mut row = vec![i.to_string()];
            row.extend(map.values[i * n..(i + 1) * n].iter().map(|&v| fmt(v)));
            row
        })
        .collect();
    let p = ctx.file("correlation", format!("corr_{}.csv", cfg.mode));
    write_csv(&p, &header, &rows)?;
    let off: Vec<f64> = (0..n * n)
        .filter(|k| k / n != k % n)
        .map(|k| map.values[k])
        .collect();
    let mean = off.iter().sum::<f64>() / off.len().max(1) as f64;
    let p = ctx.file("summary", format!("corr_{}_summary.csv", cfg.mode));
    write_csv(
        &p,
        &["mode", "positions", "flagged", "mean_off_diagonal"],
        &[vec![
            cfg.mode.clone(),
            n.to_string(),
            map.flagged.to_string(),
            fmt(mean),
        ]],
    )?;
    ctx.say(format!(
        "{} correlation over {n} positions: mean off-diagonal {mean:.4}, {} undefined pairs",
        cfg.mode, map.flagged
    ));
    Ok(())
}

fn bench(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let ds = match &cfg.data {
        Some(p) => {
            let all = load_dataset(p)?;
            all.subset(&(0..cfg.bench_batch.min(all.count)).collect::<Vec<_>>())
        }
        None => synth_dataset(
            &cfg.kind,
            cfg.bench_batch,
            cfg.height,
            cfg.width,
            cfg.data_seed(),
        )?,
    };
    let geom = geometry(cfg, &ds)?;
    let mcfg = ModelConfig {
        class_count: ds.class_count,
        ..model_config(cfg, &geom)?
    };
    let rows = bench_iteration(
        &ds,
        &geom,
        &mcfg,
        &cfg.bench_etas,
        cfg.repeats,
        cfg.warmups,
        cfg.seed,
    )?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.mode.to_string(),
                fmt(r.eta),
                r.context.to_string(),
                fmt(r.seconds),
                r.peak_bytes.to_string(),
                r.forward_flops.to_string(),
                r.backward_flops.to_string(),
            ]
        })
        .collect();
    let p = ctx.file("bench", "bench.csv");
    write_csv(
        &p,
        &[
            "mode",
            "eta",
            "context",
            "seconds",
            "peak_bytes",
            "forward_flops",
            "backward_flops",
        ],
        &table,
    )?;
    for r in &rows {
        ctx.say(format!(
            "{:<10} eta {:<4} context {:>4}: {:.5} s/step, peak {} bytes",
            r.mode, r.eta, r.context, r.seconds, r.peak_bytes
        ));
    }
    Ok(())
}

fn sweep_eta(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let mut rows = Vec::new();
    for rep in 0..cfg.seeds.max(1) {
        let c = cfg.replicate(rep);
        let (ds, eval) = (train_set(&c)?, eval_set(&c)?);
        let geom = geometry(&c, &ds)?;
        for &eta in &cfg.sweep_etas {
            let pre = pretrain_run(&c, &ds, &geom, cfg.pretrain_steps, eta)?;
            let p = ctx.file(
                format!("pretrained_eta{eta}_r{rep}"),
                format!("pretrain_eta{eta}_r{rep}.ckpt"),
            );
            save_checkpoint(&pre.checkpoint, &p)?;
            let ft = finetune_run(&c, &pre.checkpoint, &ds, &eval, &geom, cfg.finetune_steps)?;
            let top1 = pre.metrics.last().map_or(0.0, |m| m.pos_top1);
            let acc = final_accuracy(&ft);
            rows.push(vec![
                fmt(eta),
                rep.to_string(),
                c.seed.to_string(),
                pre.checkpoint.step.to_string(),
                cfg.finetune_steps.to_string(),
                fmt(top1),
                fmt(acc),
            ]);
            ctx.say(format!(
                "eta {eta} replicate {rep}: position top-1 {top1:.4}, finetuned accuracy {acc:.4}"
            ));
        }
    }
    let p = ctx.file("sweep", "sweep_eta.csv");
    write_csv(
        &p,
        &[
            "eta",
            "replicate",
            "seed",
            "pretrain_steps",
            "finetune_steps",
            "pos_top1",
            "accuracy",
        ],
        &rows,
    )
}

/// Pretrained and from-scratch held-out accuracy for one replicate.
pub struct PairedRun {
    pub mp3: ClassifyResult<f32>,
    pub scratch: ClassifyResult<f32>,
}

pub fn paired_run(
    c: &RunConfig,
    ds: &ImageDataset,
    eval: &ImageDataset,
    geom: &PatchGeometry,
) -> Result<PairedRun> {
    let pre = pretrain_run(c, ds, geom, c.pretrain_steps, c.eta)?;
    let mp3 = finetune_run(c, &pre.checkpoint, ds, eval, geom, c.finetune_steps)?;
    let scratch = scratch_run(c, ds, eval, geom, c.finetune_steps)?;
    Ok(PairedRun { mp3, scratch })
}

fn sweep_patch(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let mut rows = Vec::new();
    for &patch in &cfg.patches {
        let (mut sum_s, mut sum_m) = (0.0, 0.0);
        for rep in 0..cfg.seeds.max(1) {
            let c = RunConfig {
                patch,
                stride: None,
                ..cfg.replicate(rep)
            };
            let (ds, eval) = (train_set(&c)?, eval_set(&c)?);
            let geom = geometry(&c, &ds)?;
            let r = paired_run(&c, &ds, &eval, &geom)?;
            let p = ctx.file(
                format!("mp3_patch{patch}_r{rep}"),
                format!("mp3_patch{patch}_r{rep}.ckpt"),
            );
            save_checkpoint(&r.mp3.checkpoint, &p)?;
            let p = ctx.file(
                format!("scratch_patch{patch}_r{rep}"),
                format!("scratch_patch{patch}_r{rep}.ckpt"),
            );
            save_checkpoint(&r.scratch.checkpoint, &p)?;
            let (s, m) = (final_accuracy(&r.scratch), final_accuracy(&r.mp3));
            sum_s += s;
            sum_m += m;
            rows.push(vec![
                patch.to_string(),
                geom.num_positions().to_string(),
                rep.to_string(),
                c.seed.to_string(),
                fmt(s),
                fmt(m),
            ]);
        }
        let k = cfg.seeds.max(1) as f64;
        ctx.say(format!(
            "patch {patch}: scratch {:.4}, pretrained {:.4}, gap {:+.4}",
            sum_s / k,
            sum_m / k,
            (sum_m - sum_s) / k
        ));
    }
    let p = ctx.file("sweep", "sweep_patch.csv");
    write_csv(
        &p,
        &[
            "patch",
            "positions",
            "replicate",
            "seed",
            "scratch_acc",
            "mp3_acc",
        ],
        &rows,
    )
}
