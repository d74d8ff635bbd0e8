//! Finite-difference checks of every differentiable operation, in f64.

use mp3_core::data::{make_batch, shuffle_tokens, synth_dataset, PatchGeometry};
use mp3_core::encoder::{encoder_forward, Bound, ForwardOptions};
use mp3_core::finetune::classify_forward;
use mp3_core::gradcheck::{grad_check, grad_check_many};
use mp3_core::model::{ModelConfig, ModelParams, PeMode};
use mp3_core::objective::{mp3_loss, position_logits, MaskSpec};
use mp3_core::tape::{Tape, Var};
use mp3_core::{Result, Rng, Tensor};

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-4;
// whole-model losses sum many more terms, so use a wider step
const MODEL_EPS: f64 = 1e-5;

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut Rng::new(seed))
}

/// Contracts `y` with fixed random weights so every output element matters.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(rand(tape.shape(y), 1000 + seed));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn assert_small(errs: &[f64], what: &str) {
    for (i, &e) in errs.iter().enumerate() {
        assert!(e < TOL, "{what}: input {i} relative error {e:e}");
    }
}

#[test]
fn matmul_shapes() {
    let cases: [(&[usize], &[usize]); 4] = [
        (&[3, 4], &[4, 5]),
        (&[2, 3, 4], &[4, 2]),
        (&[2, 3, 2, 4], &[2, 3, 4, 3]),
        (&[2, 1, 3, 2], &[1, 2, 2, 3]),
    ];
    for (i, (sa, sb)) in cases.into_iter().enumerate() {
        let inputs = [rand(sa, i as u64), rand(sb, 10 + i as u64)];
        let errs = grad_check_many(
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y, i as u64)
            },
            &inputs,
            EPS,
        )
        .unwrap();
        assert_small(&errs, "matmul");
    }
}

#[test]
fn add_and_mul_with_broadcast() {
    let cases: [(&[usize], &[usize]); 3] = [(&[4], &[4]), (&[2, 3], &[3]), (&[2, 3, 4], &[3, 4])];
    for (i, (sa, sb)) in cases.into_iter().enumerate() {
        let inputs = [rand(sa, i as u64), rand(sb, 20 + i as u64)];
        let errs = grad_check_many(
            |t, v| {
                let y = t.add(v[0], v[1])?;
                project(t, y, i as u64)
            },
            &inputs,
            EPS,
        )
        .unwrap();
        assert_small(&errs, "add");
        let errs = grad_check_many(
            |t, v| {
                let y = t.mul(v[0], v[1])?;
                project(t, y, i as u64)
            },
            &inputs,
            EPS,
        )
        .unwrap();
        assert_small(&errs, "mul");
    }
}

#[test]
fn scale_sum_mean() {
    for (i, shape) in [&[3usize][..], &[2, 5], &[2, 2, 3]].into_iter().enumerate() {
        let x = rand(shape, i as u64);
        let e = grad_check(
            |t, v| {
                let y = t.scale(v, -1.7);
                project(t, y, 1)
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(e < TOL, "scale {e:e}");
        let e = grad_check(
            |t, v| {
                let y = t.mul(v, v)?;
                Ok(t.mean(y))
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(e < TOL, "mean {e:e}");
    }
}

#[test]
fn softmax_rows() {
    for (i, shape) in [&[5usize][..], &[3, 4], &[2, 2, 3, 6]]
        .into_iter()
        .enumerate()
    {
        let x = rand(shape, i as u64).cast::<f64>();
        let e = grad_check(
            |t, v| {
                let y = t.softmax_lastdim(v)?;
                project(t, y, i as u64)
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(e < TOL, "softmax {e:e}");
    }
}

#[test]
fn layer_norm_all_inputs() {
    for (i, shape) in [&[6usize][..], &[3, 4], &[2, 3, 8]].into_iter().enumerate() {
        let d = *shape.last().unwrap();
        let inputs = [
            rand(shape, i as u64),
            rand(&[d], 30 + i as u64),
            rand(&[d], 40 + i as u64),
        ];
        let errs = grad_check_many(
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-6)?;
                project(t, y, i as u64)
            },
            &inputs,
            EPS,
        )
        .unwrap();
        assert_small(&errs, "layer_norm");
    }
}

#[test]
fn gelu_values() {
    for (i, shape) in [&[7usize][..], &[3, 5], &[2, 2, 4]].into_iter().enumerate() {
        let x = Tensor::uniform(shape, -3.0, 3.0, &mut Rng::new(i as u64));
        let e = grad_check(
            |t, v| {
                let y = t.gelu(v);
                project(t, y, i as u64)
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(e < TOL, "gelu {e:e}");
    }
}

#[test]
fn cross_entropy() {
    let cases: [(&[usize], Vec<usize>); 3] = [
        (&[1, 4], vec![2]),
        (&[3, 5], vec![0, 4, 1]),
        (&[2, 3, 6], vec![5, 0, 3, 3, 1, 2]),
    ];
    for (i, (shape, targets)) in cases.into_iter().enumerate() {
        let x = Tensor::uniform(shape, -2.0, 2.0, &mut Rng::new(i as u64));
        let e = grad_check(|t, v| t.cross_entropy_mean(v, &targets), &x, EPS).unwrap();
        assert!(e < TOL, "cross entropy {e:e}");
    }
}

#[test]
fn shape_ops() {
    for (i, (shape, axes)) in [
        (&[2usize, 3][..], &[1usize, 0][..]),
        (&[2, 3, 4], &[2, 0, 1]),
        (&[2, 3, 2, 2], &[0, 2, 1, 3]),
    ]
    .into_iter()
    .enumerate()
    {
        let x = rand(shape, i as u64);
        let e = grad_check(
            |t, v| {
                let y = t.permute(v, axes)?;
                let y = t.reshape(y, &[x.len()])?;
                project(t, y, i as u64)
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(e < TOL, "permute/reshape {e:e}");
        let e = grad_check(
            |t, v| {
                let y = t.narrow(v, 1, 1, shape[1] - 1)?;
                project(t, y, i as u64)
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(e < TOL, "narrow {e:e}");
    }
}

#[test]
fn gather_and_prepend() {
    for (i, (b, n, d, index)) in [
        (1usize, 3usize, 2usize, vec![0usize, 2]),
        (2, 4, 3, vec![1, 3, 0, 0]),
        (3, 2, 4, vec![1, 0, 1]),
    ]
    .into_iter()
    .enumerate()
    {
        let inputs = [rand(&[b, n, d], i as u64), rand(&[d], 50 + i as u64)];
        let errs = grad_check_many(
            |t, v| {
                let y = t.prepend_row(v[1], v[0])?;
                let y = t.gather_rows(y, &index)?;
                project(t, y, i as u64)
            },
            &inputs,
            EPS,
        )
        .unwrap();
        assert_small(&errs, "gather/prepend");
    }
}

#[test]
fn table_lookups() {
    for (i, (rows, d, ids)) in [
        (3usize, 2usize, vec![0usize, 2, 2]),
        (5, 3, vec![4, 1]),
        (2, 4, vec![1, 1, 0, 1]),
    ]
    .into_iter()
    .enumerate()
    {
        let table = rand(&[rows, d], i as u64);
        let e = grad_check(
            |t, v| {
                let y = t.embedding(v, &ids, &[ids.len()])?;
                project(t, y, i as u64)
            },
            &table,
            EPS,
        )
        .unwrap();
        assert!(e < TOL, "embedding {e:e}");

        let (b, tt, s) = (2, 2, ids.len());
        let index: Vec<usize> = (0..b * tt * s).map(|j| ids[j % ids.len()]).collect();
        let bias = rand(&[2, rows], 60 + i as u64);
        let e = grad_check(
            |t, v| {
                let y = t.gather_bias(v, &index, [b, tt, s])?;
                project(t, y, i as u64)
            },
            &bias,
            EPS,
        )
        .unwrap();
        assert!(e < TOL, "gather_bias {e:e}");
    }
}

struct Setup {
    cfg: ModelConfig,
    params: ModelParams<f64>,
}

fn setup(pe: PeMode, classes: usize) -> Setup {
    let ds = synth_dataset("two-shapes", 2, 8, 8, 5).unwrap();
    let g = PatchGeometry::for_dataset(&ds, 4, 4).unwrap();
    let mut cfg = ModelConfig::new(2, 2, 8, g.patch_dim(), g.grid_rows, g.grid_cols);
    cfg.pe_mode = pe;
    cfg.class_count = classes;
    let mut params = ModelParams::init_encoder(&cfg, &mut Rng::new(9)).unwrap();
    if classes > 0 {
        params.add_classifier_head(&cfg);
    } else {
        params.add_position_head(&cfg);
    }
    // move every tensor off its special initial value
    for (name, t) in params.iter_mut() {
        let mut r = Rng::new(name.len() as u64 * 7919);
        for v in t.data_mut() {
            *v += 0.3 * (r.uniform() - 0.5);
        }
    }
    Setup { cfg, params }
}

fn check_model(s: &Setup, f: impl Fn(&mut Tape<f64>, &Bound) -> Result<Var>) {
    let names: Vec<String> = s.params.names().map(String::from).collect();
    let inputs: Vec<Tensor<f64>> = s.params.iter().map(|(_, t)| t.clone()).collect();
    let errs = grad_check_many(
        |t, v| {
            let bound = Bound::from_vars(names.iter().map(String::as_str).zip(v.iter().copied()));
            f(t, &bound)
        },
        &inputs,
        MODEL_EPS,
    )
    .unwrap();
    for (name, e) in names.iter().zip(errs) {
        assert!(e < TOL, "{name}: relative error {e:e}");
    }
}

#[test]
fn composite_position_loss_two_layers() {
    let s = setup(PeMode::None, 0);
    let ds = synth_dataset("two-shapes", 2, 8, 8, 5).unwrap();
    let g = PatchGeometry::for_dataset(&ds, 4, 4).unwrap();
    let batch = shuffle_tokens(&make_batch::<f64>(&ds, &[0, 1], &g, None), &mut Rng::new(3));
    let mask = MaskSpec::sample(2, 4, 0.5, &mut Rng::new(4)).unwrap();
    let hints = vec![true, false, false, true, false, false, true, false];
    check_model(&s, |t, bound| {
        let opts = ForwardOptions::new(PeMode::None)
            .context(&mask.ctx_idx)
            .hints(&hints);
        let out = encoder_forward(t, bound, &s.cfg, &batch, opts)?;
        let logits = position_logits(t, out.hidden, bound.get("pos_head.weight")?)?;
        mp3_loss(t, logits, &batch.position_ids)
    });
}

#[test]
fn composite_classifier_with_each_positional_mode() {
    let ds = synth_dataset("two-shapes", 2, 8, 8, 5).unwrap();
    let g = PatchGeometry::for_dataset(&ds, 4, 4).unwrap();
    let batch = make_batch::<f64>(&ds, &[0, 1], &g, None);
    for pe in [
        PeMode::LearnedAbsolute,
        PeMode::Sinusoidal,
        PeMode::Relative2d,
    ] {
        let s = setup(pe, 2);
        check_model(&s, |t, bound| {
            let logits = classify_forward(t, bound, &s.cfg, &batch)?;
            t.cross_entropy_mean(logits, &batch.labels)
        });
    }
}
