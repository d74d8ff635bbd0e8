//! The position prediction task: context sampling, the linear position head,
//! the loss over every token, and optional positional hints.

use alloc::vec;
use alloc::vec::Vec;

use crate::encoder::sinusoid_term;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-sample context sets (and optional hinted slots) for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub eta: f64,
    /// Sorted distinct slot indices per sample, each of size `M`.
    pub ctx_idx: Vec<Vec<usize>>,
    /// Slots that receive positional information, per sample.
    pub hint_idx: Vec<Vec<usize>>,
}

impl MaskSpec {
    /// Fresh context sets for `batch` samples of `n` tokens.
    pub fn sample(batch: usize, n: usize, eta: f64, rng: &mut Rng) -> Result<Self> {
        let ctx_idx = (0..batch)
            .map(|_| mask_sample(n, eta, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            eta,
            ctx_idx,
            hint_idx: vec![Vec::new(); batch],
        })
    }

    pub fn context_size(&self) -> usize {
        self.ctx_idx.first().map_or(0, Vec::len)
    }

    /// `B * N` flags marking hinted slots.
    pub fn hint_mask(&self, n: usize) -> Vec<bool> {
        let mut m = vec![false; self.hint_idx.len() * n];
        for (b, idx) in self.hint_idx.iter().enumerate() {
            for &i in idx {
                m[b * n + i] = true;
            }
        }
        m
    }
}

/// Number of context tokens for `n` tokens at masking ratio `eta`.
pub fn context_count(n: usize, eta: f64) -> usize {
    (libm::round(n as f64 * (1.0 - eta)) as usize).clamp(1, n.max(1))
}

/// First `M` entries of a fresh uniform permutation of `0..n`, sorted.
pub fn mask_sample(n: usize, eta: f64, rng: &mut Rng) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::InvalidEta(eta));
    }
    let m = context_count(n, eta);
    let mut ctx = rng.permutation(n);
    ctx.truncate(m);
    ctx.sort_unstable();
    Ok(ctx)
}

/// Number of hinted tokens: `ceil(fraction * n)`.
pub fn hint_count(n: usize, fraction: f64) -> usize {
    let raw = fraction.clamp(0.0, 1.0) * n as f64;
    // 0.05 * 100 must give exactly 5
    (libm::ceil(raw - 1e-9) as usize).min(n)
}

/// Fresh random hinted subset per sample.
pub fn sample_hints(batch: usize, n: usize, fraction: f64, rng: &mut Rng) -> Vec<Vec<usize>> {
    let k = hint_count(n, fraction);
    (0..batch)
        .map(|_| {
            let mut p = rng.permutation(n);
            p.truncate(k);
            p.sort_unstable();
            p
        })
        .collect()
}

/// Adds sinusoidal PE at true positions to a random `ceil(fraction * N)` subset of
/// the slots of `embedded: [B, N, d]`. Returns the new variable and the hinted slots.
pub fn apply_position_hints<T: Real>(
    tape: &mut Tape<T>,
    embedded: Var,
    fraction: f64,
    rng: &mut Rng,
    position_ids: &[usize],
) -> Result<(Var, Vec<Vec<usize>>)> {
    let shape = tape.shape(embedded).to_vec();
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let hints = sample_hints(b, n, fraction, rng);
    if hints.iter().all(Vec::is_empty) {
        return Ok((embedded, hints));
    }
    let mut mask = vec![false; b * n];
    for (s, idx) in hints.iter().enumerate() {
        for &i in idx {
            mask[s * n + i] = true;
        }
    }
    let term = tape.constant(Tensor::new(
        &shape,
        sinusoid_term(position_ids, d, Some(&mask)),
    )?);
    Ok((tape.add(embedded, term)?, hints))
}

/// Linear head on every non-cls token: `[B, N + 1, d] -> [B, N, n]`.
pub fn position_logits<T: Real>(tape: &mut Tape<T>, hidden: Var, head: Var) -> Result<Var> {
    let hs = tape.shape(hidden).to_vec();
    let ws = tape.shape(head).to_vec();
    if hs.len() != 3 || ws.len() != 2 || ws[0] != hs[2] || hs[1] == 0 {
        return Err(Error::ShapeMismatch {
            op: "position_logits",
            lhs: hs,
            rhs: ws,
        });
    }
    let tokens = tape.narrow(hidden, 1, 1, hs[1] - 1)?;
    tape.matmul(tokens, head)
}

/// Mean cross-entropy over all `B * N` tokens against their true positions.
pub fn mp3_loss<T: Real>(tape: &mut Tape<T>, logits: Var, position_ids: &[usize]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 3 || s[1] > s[2] {
        return Err(Error::ShapeMismatch {
            op: "mp3_loss",
            lhs: s,
            rhs: vec![position_ids.len()],
        });
    }
    tape.cross_entropy_mean(logits, position_ids)
}

/// Whether `target` is among the `k` best entries of `row`; ties rank the lower index first.
pub fn in_top_k<T: Real>(row: &[T], target: usize, k: usize) -> bool {
    let tv = row[target];
    let ahead = row
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > tv || (v == tv && i < target))
        .count();
    ahead < k
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Counts of correct top-1 and top-5 predictions over rows of `logits`.
pub fn topk_counts<T: Real>(logits: &[T], classes: usize, targets: &[usize]) -> (usize, usize) {
    let mut top1 = 0;
    let mut top5 = 0;
    for (row, &t) in logits.chunks_exact(classes).zip(targets) {
        top1 += usize::from(in_top_k(row, t, 1));
        top5 += usize::from(in_top_k(row, t, 5));
    }
    (top1, top5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn context_sizes() {
        let mut rng = Rng::new(0);
        assert_eq!(
            mask_sample(64, 0.0, &mut rng).unwrap(),
            (0..64).collect::<Vec<_>>()
        );
        let c = mask_sample(64, 0.75, &mut rng).unwrap();
        assert_eq!(c.len(), 16);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(mask_sample(196, 0.75, &mut rng).unwrap().len(), 49);
        assert_eq!(mask_sample(4, 0.99, &mut rng).unwrap().len(), 1);
        assert_eq!(mask_sample(4, 1.0, &mut rng), Err(Error::InvalidEta(1.0)));
        assert!(mask_sample(4, -0.1, &mut rng).is_err());
    }

    #[test]
    fn mask_frequencies_are_uniform() {
        let (n, eta, draws) = (16, 0.5, 10_000);
        let m = context_count(n, eta);
        let mut counts = vec![0usize; n];
        let mut rng = Rng::new(8);
        for _ in 0..draws {
            for i in mask_sample(n, eta, &mut rng).unwrap() {
                counts[i] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - m as f64 / n as f64).abs() < 0.02, "{f}");
        }
    }

    #[test]
    fn hint_counts() {
        assert_eq!(hint_count(100, 0.05), 5);
        assert_eq!(hint_count(100, 0.0), 0);
        assert_eq!(hint_count(100, 1.0), 100);
        assert_eq!(hint_count(64, 0.05), 4);
    }

    #[test]
    fn zero_hints_leave_input_unchanged() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[2, 3, 4], 0.5));
        let (y, h) =
            apply_position_hints(&mut tape, x, 0.0, &mut Rng::new(1), &[0, 1, 2, 0, 1, 2]).unwrap();
        assert_eq!(y, x);
        assert!(h.iter().all(Vec::is_empty));
    }

    #[test]
    fn exact_hint_subset_of_100() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 100, 8]));
        let ids: Vec<usize> = (0..100).collect();
        let (y, h) = apply_position_hints(&mut tape, x, 0.05, &mut Rng::new(1), &ids).unwrap();
        assert_eq!(h[0].len(), 5);
        let v = tape.value(y).data();
        let touched = (0..100)
            .filter(|&i| v[i * 8..(i + 1) * 8].iter().any(|&e| e != 0.0))
            .count();
        assert_eq!(touched, 5);
    }

    #[test]
    fn head_shapes_and_zero_logits() {
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Tensor::uniform(&[2, 5, 3], -1.0, 1.0, &mut Rng::new(0)));
        let w = tape.constant(Tensor::zeros(&[3, 4]));
        let l = position_logits(&mut tape, h, w).unwrap();
        assert_eq!(tape.shape(l), &[2, 4, 4]);
        assert!(tape.value(l).data().iter().all(|&v| v == 0.0));
        let bad = tape.constant(Tensor::zeros(&[4, 4]));
        assert!(position_logits(&mut tape, h, bad).is_err());
    }

    #[test]
    fn identity_head_passes_one_hots() {
        let mut tape = Tape::<f64>::new();
        // cls row then rows e_2, e_0
        let hid = [9.0, 9.0, 9.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let h = tape.constant(Tensor::from_f64(&[1, 3, 3], &hid).unwrap());
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        let w = tape.constant(eye);
        let l = position_logits(&mut tape, h, w).unwrap();
        assert_eq!(tape.value(l).data(), &hid[3..]);
    }

    #[test]
    fn loss_values() {
        let mut tape = Tape::<f32>::new();
        let z = tape.constant(Tensor::zeros(&[2, 64, 64]));
        let ids: Vec<usize> = (0..2).flat_map(|_| 0..64).collect();
        let l = mp3_loss(&mut tape, z, &ids).unwrap();
        assert_eq!(tape.value(l).item(), 64f32.ln());

        let mut perfect = vec![0.0; 2 * 64 * 64];
        for (r, &t) in ids.iter().enumerate() {
            perfect[r * 64 + t] = 30.0;
        }
        let p = tape.constant(Tensor::new(&[2, 64, 64], perfect.clone()).unwrap());
        let l = mp3_loss(&mut tape, p, &ids).unwrap();
        assert!((tape.value(l).item() as f64) < 1e-9);
        assert_eq!(topk_counts(&perfect, 64, &ids), (128, 128));
    }

    #[test]
    fn loss_hand_case() {
        // B=1, N=2, n=4
        let logits = [0.5, -1.0, 2.0, 0.0, 1.5, 0.3, -0.2, 0.9];
        let ids = [2, 3];
        let ce = |row: &[f64], t: usize| row.iter().map(|v| v.exp()).sum::<f64>().ln() - row[t];
        let want = (ce(&logits[..4], 2) + ce(&logits[4..], 3)) / 2.0;
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 2, 4], &logits).unwrap());
        let l = mp3_loss(&mut tape, x, &ids).unwrap();
        assert!((tape.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn top_k_tie_breaking() {
        let row = [1.0f64, 3.0, 3.0, 0.0];
        assert_eq!(argmax(&row), 1);
        assert!(in_top_k(&row, 1, 1));
        assert!(!in_top_k(&row, 2, 1));
        assert!(in_top_k(&row, 2, 2));
    }
}
