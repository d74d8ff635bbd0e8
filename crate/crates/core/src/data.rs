//! Image storage, patch tokenization, synthetic corpora and batching.
//!
//! Pixels are `u8` in HWC order. A 1D sequence is an image with `height == 1`
//! whose channels hold one frame vector per column.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageDataset {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub class_count: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u32>,
}

impl ImageDataset {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        class_count: usize,
        pixels: Vec<u8>,
        labels: Vec<u32>,
    ) -> Result<Self> {
        let count = labels.len();
        let ds = Self {
            count,
            height,
            width,
            channels,
            class_count,
            pixels,
            labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != self.count * self.image_len() || self.labels.len() != self.count {
            return Err(Error::Config(
                "pixel payload does not match dimensions".to_string(),
            ));
        }
        if let Some(&l) = self
            .labels
            .iter()
            .find(|&&l| l as usize >= self.class_count)
        {
            return Err(Error::Config(alloc::format!(
                "label {l} >= class count {}",
                self.class_count
            )));
        }
        Ok(())
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// New dataset holding the given examples in order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Self {
            count: indices.len(),
            pixels,
            labels,
            ..*self
        }
    }

    /// First `n` examples and the rest.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.count);
        let a: Vec<usize> = (0..n).collect();
        let b: Vec<usize> = (n..self.count).collect();
        (self.subset(&a), self.subset(&b))
    }
}

/// Patch geometry of a dataset. For 1D data (`height == 1`) patches are one row high.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub patch_h: usize,
    pub patch_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub channels: usize,
}

impl PatchGeometry {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        patch: usize,
        stride: usize,
    ) -> Result<Self> {
        if patch == 0 || stride == 0 || stride > patch {
            return Err(Error::Config(alloc::format!(
                "patch {patch} / stride {stride}: need 0 < stride <= patch"
            )));
        }
        let (patch_h, stride_h) = if height == 1 { (1, 1) } else { (patch, stride) };
        let axis = |extent: usize, p: usize, s: usize| -> Result<usize> {
            if p > extent {
                return Err(Error::Geometry {
                    extent,
                    patch: p,
                    stride: s,
                    remainder: extent,
                });
            }
            let remainder = (extent - p) % s;
            if remainder != 0 {
                return Err(Error::Geometry {
                    extent,
                    patch: p,
                    stride: s,
                    remainder,
                });
            }
            Ok((extent - p) / s + 1)
        };
        Ok(Self {
            patch_h,
            patch_w: patch,
            stride_h,
            stride_w: stride,
            grid_rows: axis(height, patch_h, stride_h)?,
            grid_cols: axis(width, patch, stride)?,
            channels,
        })
    }

    pub fn for_dataset(ds: &ImageDataset, patch: usize, stride: usize) -> Result<Self> {
        Self::new(ds.height, ds.width, ds.channels, patch, stride)
    }

    pub fn num_positions(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_h * self.patch_w * self.channels
    }

    pub fn image_height(&self) -> usize {
        (self.grid_rows - 1) * self.stride_h + self.patch_h
    }

    pub fn image_width(&self) -> usize {
        (self.grid_cols - 1) * self.stride_w + self.patch_w
    }
}

/// Per-channel affine applied after scaling to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalize {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Cuts one image into `N x P` patch rows in row-major position order,
/// scaled to `[0, 1]`. Patch pixels are laid out `[ph][pw][c]`.
pub fn extract_patches<T: Real>(
    image: &[u8],
    width: usize,
    geom: &PatchGeometry,
    norm: Option<&Normalize>,
) -> Vec<T> {
    let c = geom.channels;
    let mut out = Vec::with_capacity(geom.num_positions() * geom.patch_dim());
    let inv = 1.0 / 255.0;
    for gr in 0..geom.grid_rows {
        for gc in 0..geom.grid_cols {
            for ph in 0..geom.patch_h {
                let y = gr * geom.stride_h + ph;
                for pw in 0..geom.patch_w {
                    let x = gc * geom.stride_w + pw;
                    let px = &image[(y * width + x) * c..(y * width + x + 1) * c];
                    for (ch, &v) in px.iter().enumerate() {
                        let mut f = v as f64 * inv;
                        if let Some(n) = norm {
                            f = (f - n.mean[ch]) / n.std[ch];
                        }
                        out.push(T::from_f64(f));
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`extract_patches`] for raw bytes: writes patch `p` of `patches`
/// (each `patch_dim` bytes) to grid cell `positions[p]`.
pub fn assemble_patches(patches: &[u8], positions: &[usize], geom: &PatchGeometry) -> Vec<u8> {
    let (h, w, c) = (geom.image_height(), geom.image_width(), geom.channels);
    let mut img = vec![0u8; h * w * c];
    let pd = geom.patch_dim();
    for (p, &pos) in positions.iter().enumerate() {
        let (gr, gc) = (pos / geom.grid_cols, pos % geom.grid_cols);
        let patch = &patches[p * pd..(p + 1) * pd];
        for ph in 0..geom.patch_h {
            for pw in 0..geom.patch_w {
                let (y, x) = (gr * geom.stride_h + ph, gc * geom.stride_w + pw);
                let src = &patch[(ph * geom.patch_w + pw) * c..(ph * geom.patch_w + pw + 1) * c];
                img[(y * w + x) * c..(y * w + x + 1) * c].copy_from_slice(src);
            }
        }
    }
    img
}

/// Raw (unscaled) patch bytes of an image, row-major position order.
pub fn patch_bytes(image: &[u8], width: usize, geom: &PatchGeometry) -> Vec<u8> {
    let c = geom.channels;
    let mut out = Vec::with_capacity(geom.num_positions() * geom.patch_dim());
    for gr in 0..geom.grid_rows {
        for gc in 0..geom.grid_cols {
            for ph in 0..geom.patch_h {
                let y = gr * geom.stride_h + ph;
                for pw in 0..geom.patch_w {
                    let x = gc * geom.stride_w + pw;
                    out.extend_from_slice(&image[(y * width + x) * c..(y * width + x + 1) * c]);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch<T> {
    /// `[B, N, P]`
    pub tokens: Tensor<T>,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// `B * N` true positions, one per token slot.
    pub position_ids: Vec<usize>,
    pub labels: Vec<usize>,
    /// Dataset index of each sample.
    pub indices: Vec<usize>,
}

impl<T: Real> TokenBatch<T> {
    pub fn batch_size(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn patch_dim(&self) -> usize {
        self.tokens.shape()[2]
    }

    /// Applies `perms[b]` to sample `b`: new slot `j` holds old slot `perms[b][j]`.
    pub fn permuted(&self, perms: &[Vec<usize>]) -> Self {
        let (b, n, p) = (self.batch_size(), self.num_tokens(), self.patch_dim());
        let src = self.tokens.data();
        let mut tokens = Vec::with_capacity(src.len());
        let mut position_ids = Vec::with_capacity(b * n);
        for (s, perm) in perms.iter().enumerate().take(b) {
            for &j in perm {
                tokens.extend_from_slice(&src[(s * n + j) * p..(s * n + j + 1) * p]);
                position_ids.push(self.position_ids[s * n + j]);
            }
        }
        Self {
            tokens: Tensor::new(&[b, n, p], tokens).expect("same shape"),
            position_ids,
            ..self.clone()
        }
    }
}

/// Tokenizes the given examples in storage order with identity position ids.
pub fn make_batch<T: Real>(
    ds: &ImageDataset,
    indices: &[usize],
    geom: &PatchGeometry,
    norm: Option<&Normalize>,
) -> TokenBatch<T> {
    let (n, p) = (geom.num_positions(), geom.patch_dim());
    let mut tokens = Vec::with_capacity(indices.len() * n * p);
    for &i in indices {
        tokens.extend(extract_patches::<T>(ds.image(i), ds.width, geom, norm));
    }
    TokenBatch {
        tokens: Tensor::new(&[indices.len(), n, p], tokens).expect("patch count"),
        grid_rows: geom.grid_rows,
        grid_cols: geom.grid_cols,
        position_ids: (0..indices.len()).flat_map(|_| 0..n).collect(),
        labels: indices.iter().map(|&i| ds.labels[i] as usize).collect(),
        indices: indices.to_vec(),
    }
}

/// Independent uniform token permutation per sample; position ids travel with their tokens.
pub fn shuffle_tokens<T: Real>(batch: &TokenBatch<T>, rng: &mut Rng) -> TokenBatch<T> {
    let n = batch.num_tokens();
    let perms: Vec<Vec<usize>> = (0..batch.batch_size())
        .map(|_| rng.permutation(n))
        .collect();
    batch.permuted(&perms)
}

/// Example order for one epoch, split into batches; the last batch may be short.
pub fn epoch_batches(
    count: usize,
    batch_size: usize,
    shuffle: bool,
    rng: &mut Rng,
) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1).min(count.max(1));
    let mut order: Vec<usize> = (0..count).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// One epoch of token batches.
pub fn batch_iter<'a, T: Real>(
    ds: &'a ImageDataset,
    geom: &'a PatchGeometry,
    batch_size: usize,
    shuffle: bool,
    rng: &mut Rng,
) -> impl Iterator<Item = TokenBatch<T>> + 'a {
    epoch_batches(ds.count, batch_size, shuffle, rng)
        .into_iter()
        .map(move |idx| make_batch(ds, &idx, geom, None))
}

// ---- augmentation ----------------------------------------------------------

pub fn hflip(image: &[u8], height: usize, width: usize, channels: usize) -> Vec<u8> {
    let mut out = vec![0u8; image.len()];
    for y in 0..height {
        for x in 0..width {
            let src = (y * width + x) * channels;
            let dst = (y * width + (width - 1 - x)) * channels;
            out[dst..dst + channels].copy_from_slice(&image[src..src + channels]);
        }
    }
    out
}

/// Zero-pads by `pad` on every side and crops a random window of the original size.
pub fn random_crop_pad(
    image: &[u8],
    height: usize,
    width: usize,
    channels: usize,
    pad: usize,
    rng: &mut Rng,
) -> Vec<u8> {
    let dy = rng.below(2 * pad + 1) as isize - pad as isize;
    let dx = rng.below(2 * pad + 1) as isize - pad as isize;
    let mut out = vec![0u8; image.len()];
    for y in 0..height {
        for x in 0..width {
            let (sy, sx) = (y as isize + dy, x as isize + dx);
            if sy < 0 || sx < 0 || sy >= height as isize || sx >= width as isize {
                continue;
            }
            let src = (sy as usize * width + sx as usize) * channels;
            let dst = (y * width + x) * channels;
            out[dst..dst + channels].copy_from_slice(&image[src..src + channels]);
        }
    }
    out
}

/// Dataset with each image independently augmented.
pub fn augment_dataset(
    ds: &ImageDataset,
    flip: bool,
    crop_pad: usize,
    rng: &mut Rng,
) -> ImageDataset {
    let mut pixels = Vec::with_capacity(ds.pixels.len());
    for i in 0..ds.count {
        let mut img = ds.image(i).to_vec();
        if flip && rng.uniform() < 0.5 {
            img = hflip(&img, ds.height, ds.width, ds.channels);
        }
        if crop_pad > 0 {
            img = random_crop_pad(&img, ds.height, ds.width, ds.channels, crop_pad, rng);
        }
        pixels.extend(img);
    }
    ImageDataset {
        pixels,
        labels: ds.labels.clone(),
        ..*ds
    }
}

// ---- synthetic corpora -----------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// Three monotone ramps; the class picks the quadrant where the third ramp rises.
    GradientQuadrants,
    /// Filled square or plus sign on a ramp background.
    TwoShapes,
    /// Stripes whose orientation is the class, on a ramp background.
    StripedClasses,
}

impl SynthKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gradient-quadrants" => Ok(Self::GradientQuadrants),
            "two-shapes" => Ok(Self::TwoShapes),
            "striped-classes" => Ok(Self::StripedClasses),
            other => Err(Error::UnknownKind(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::GradientQuadrants => "gradient-quadrants",
            Self::TwoShapes => "two-shapes",
            Self::StripedClasses => "striped-classes",
        }
    }

    pub fn class_count(self) -> usize {
        match self {
            Self::GradientQuadrants | Self::StripedClasses => 4,
            Self::TwoShapes => 2,
        }
    }
}

fn clamp_u8(v: f64) -> u8 {
    libm::round(v.clamp(0.0, 255.0)) as u8
}

fn frac(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        i as f64 / (n - 1) as f64
    }
}

/// Procedural RGB dataset, deterministic in `seed`. Labels cycle through the
/// classes so every class is equally represented.
pub fn synth_dataset(
    kind: &str,
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<ImageDataset> {
    let kind = SynthKind::parse(kind)?;
    let classes = kind.class_count();
    let root = Rng::new(seed).split(kind.name());
    let c = 3;
    let mut pixels = Vec::with_capacity(count * height * width * c);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % classes;
        let mut rng = root.split_indexed("image", i as u64);
        let img = match kind {
            SynthKind::GradientQuadrants => gradient_quadrants(label, height, width, &mut rng),
            SynthKind::TwoShapes => two_shapes(label, height, width, &mut rng),
            SynthKind::StripedClasses => striped(label, height, width, &mut rng),
        };
        pixels.extend(img);
        labels.push(label as u32);
    }
    ImageDataset::new(height, width, c, classes, pixels, labels)
}

fn gradient_quadrants(label: usize, h: usize, w: usize, rng: &mut Rng) -> Vec<u8> {
    let mut off = [0.0; 3];
    let mut gain = [0.0; 3];
    for k in 0..3 {
        off[k] = 60.0 * rng.uniform();
        gain[k] = 120.0 + 75.0 * rng.uniform();
    }
    // rising in the first or second half of each axis
    let ramp = |t: f64, second: bool| {
        if second {
            (2.0 * t - 1.0).max(0.0)
        } else {
            (2.0 * t).min(1.0)
        }
    };
    let (qr, qc) = (label / 2 == 1, label % 2 == 1);
    let mut img = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        let v = frac(y, h);
        for x in 0..w {
            let u = frac(x, w);
            img.push(clamp_u8(off[0] + gain[0] * u));
            img.push(clamp_u8(off[1] + gain[1] * v));
            img.push(clamp_u8(
                off[2] + gain[2] * 0.5 * (ramp(u, qc) + ramp(v, qr)),
            ));
        }
    }
    img
}

fn background(h: usize, w: usize, rng: &mut Rng) -> Vec<f64> {
    let g0 = 60.0 + 60.0 * rng.uniform();
    let g1 = 60.0 + 60.0 * rng.uniform();
    let mut img = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            img.push(20.0 + g0 * frac(x, w));
            img.push(20.0 + g1 * frac(y, h));
            img.push(30.0);
        }
    }
    img
}

fn two_shapes(label: usize, h: usize, w: usize, rng: &mut Rng) -> Vec<u8> {
    let mut img = background(h, w, rng);
    let lo = (h.min(w) / 3).max(3);
    let hi = (h.min(w) / 2).max(lo);
    let size = lo + rng.below(hi - lo + 1);
    let y0 = rng.below(h - size + 1);
    let x0 = rng.below(w - size + 1);
    let thick = (size / 3).max(1);
    let mid = (size - thick) / 2;
    let bright = 200.0 + 55.0 * rng.uniform();
    for dy in 0..size {
        for dx in 0..size {
            let inside = match label {
                0 => true,
                _ => (dy >= mid && dy < mid + thick) || (dx >= mid && dx < mid + thick),
            };
            if inside {
                img[((y0 + dy) * w + x0 + dx) * 3 + 2] = bright;
            }
        }
    }
    img.into_iter().map(clamp_u8).collect()
}

fn striped(label: usize, h: usize, w: usize, rng: &mut Rng) -> Vec<u8> {
    let mut img = background(h, w, rng);
    let period = 3.0 + 4.0 * rng.uniform();
    let phase = period * rng.uniform();
    let amp = 90.0 + 60.0 * rng.uniform();
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64, x as f64);
            let t = match label {
                0 => fy,
                1 => fx,
                2 => (fx + fy) * core::f64::consts::FRAC_1_SQRT_2,
                _ => (fx - fy) * core::f64::consts::FRAC_1_SQRT_2,
            };
            let s = libm::sin(2.0 * core::f64::consts::PI * (t + phase) / period);
            img[(y * w + x) * 3 + 2] = 30.0 + amp * 0.5 * (1.0 + s);
        }
    }
    img.into_iter().map(clamp_u8).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_vit_grid_sizes() {
        assert_eq!(
            PatchGeometry::new(32, 32, 3, 4, 4).unwrap().num_positions(),
            64
        );
        assert_eq!(
            PatchGeometry::new(224, 224, 3, 16, 16)
                .unwrap()
                .num_positions(),
            196
        );
        assert_eq!(
            PatchGeometry::new(64, 64, 3, 8, 8).unwrap().num_positions(),
            64
        );
    }

    #[test]
    fn bad_geometry_reports_remainder() {
        assert_eq!(
            PatchGeometry::new(30, 32, 3, 4, 4),
            Err(Error::Geometry {
                extent: 30,
                patch: 4,
                stride: 4,
                remainder: 2
            })
        );
        assert!(PatchGeometry::new(32, 32, 3, 4, 8).is_err());
    }

    #[test]
    fn overlapping_stride() {
        let g = PatchGeometry::new(10, 10, 1, 4, 2).unwrap();
        assert_eq!((g.grid_rows, g.grid_cols), (4, 4));
    }

    #[test]
    fn one_dimensional_frames() {
        // 100 frames of 40 coefficients, one frame per patch
        let g = PatchGeometry::new(1, 100, 40, 1, 1).unwrap();
        assert_eq!(g.num_positions(), 100);
        assert_eq!(g.patch_dim(), 40);
        assert_eq!(g.grid_rows, 1);
    }

    #[test]
    fn constant_image_tokens() {
        let img = vec![255u8; 64];
        let g = PatchGeometry::new(8, 8, 1, 4, 4).unwrap();
        let t = extract_patches::<f32>(&img, 8, &g, None);
        assert_eq!(t.len(), 4 * 16);
        assert!(t.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn extraction_then_assembly_is_identity() {
        let ds = synth_dataset("two-shapes", 3, 12, 16, 5).unwrap();
        let g = PatchGeometry::for_dataset(&ds, 4, 4).unwrap();
        for i in 0..ds.count {
            let pb = patch_bytes(ds.image(i), ds.width, &g);
            let ids: Vec<usize> = (0..g.num_positions()).collect();
            assert_eq!(assemble_patches(&pb, &ids, &g), ds.image(i));
        }
    }

    #[test]
    fn gradient_quadrants_monotone() {
        let ds = synth_dataset("gradient-quadrants", 8, 16, 16, 1).unwrap();
        assert_eq!(ds.count, 8);
        for i in 0..8 {
            let img = ds.image(i);
            for y in 0..16 {
                for x in 0..16 {
                    for c in 0..3 {
                        let v = img[(y * 16 + x) * 3 + c];
                        if x + 1 < 16 {
                            assert!(img[(y * 16 + x + 1) * 3 + c] >= v);
                        }
                        if y + 1 < 16 {
                            assert!(img[((y + 1) * 16 + x) * 3 + c] >= v);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn synth_is_deterministic() {
        for kind in ["gradient-quadrants", "two-shapes", "striped-classes"] {
            let a = synth_dataset(kind, 6, 16, 16, 77).unwrap();
            let b = synth_dataset(kind, 6, 16, 16, 77).unwrap();
            assert_eq!(a, b);
            let c = synth_dataset(kind, 6, 16, 16, 78).unwrap();
            assert_ne!(a.pixels, c.pixels);
        }
    }

    #[test]
    fn striped_labels_cover_classes() {
        let ds = synth_dataset("striped-classes", 40, 16, 16, 3).unwrap();
        let mut counts = [0; 4];
        for &l in &ds.labels {
            counts[l as usize] += 1;
        }
        assert_eq!(counts, [10; 4]);
    }

    #[test]
    fn unknown_kind() {
        assert_eq!(
            synth_dataset("plaid", 1, 8, 8, 0),
            Err(Error::UnknownKind("plaid".into()))
        );
    }

    #[test]
    fn batches_cover_epoch() {
        let mut rng = Rng::new(0);
        let b = epoch_batches(10, 4, false, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [4, 4, 2]);
        assert_eq!(b.concat(), (0..10).collect::<Vec<_>>());

        let b = epoch_batches(10, 4, true, &mut rng);
        let mut all = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        let b = epoch_batches(3, 8, false, &mut rng);
        assert_eq!(b, [vec![0, 1, 2]]);
    }

    #[test]
    fn shuffled_batches_are_deterministic() {
        let a = epoch_batches(20, 6, true, &mut Rng::new(4));
        let b = epoch_batches(20, 6, true, &mut Rng::new(4));
        assert_eq!(a, b);
    }

    #[test]
    fn shuffle_preserves_pairs_and_identity_is_noop() {
        let ds = synth_dataset("striped-classes", 2, 8, 8, 1).unwrap();
        let g = PatchGeometry::for_dataset(&ds, 4, 4).unwrap();
        let batch: TokenBatch<f32> = make_batch(&ds, &[0, 1], &g, None);
        let ident: Vec<Vec<usize>> = (0..2).map(|_| (0..4).collect()).collect();
        assert_eq!(batch.permuted(&ident), batch);

        let sh = shuffle_tokens(&batch, &mut Rng::new(3));
        let sh2 = shuffle_tokens(&batch, &mut Rng::new(3));
        assert_eq!(sh, sh2);
        let p = batch.patch_dim();
        for s in 0..2 {
            for j in 0..4 {
                let pos = sh.position_ids[s * 4 + j];
                let got = &sh.tokens.data()[(s * 4 + j) * p..(s * 4 + j + 1) * p];
                let want = &batch.tokens.data()[(s * 4 + pos) * p..(s * 4 + pos + 1) * p];
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let ds = synth_dataset("two-shapes", 1, 8, 12, 2).unwrap();
        let f = hflip(ds.image(0), 8, 12, 3);
        assert_eq!(hflip(&f, 8, 12, 3), ds.image(0));
    }

    #[test]
    fn crop_without_padding_is_identity() {
        let ds = synth_dataset("two-shapes", 1, 8, 8, 2).unwrap();
        let out = random_crop_pad(ds.image(0), 8, 8, 3, 0, &mut Rng::new(1));
        assert_eq!(out, ds.image(0));
    }
}
