//! Image datasets: a class-structured synthetic generator, an image-folder
//! loader, a binary cache format, and patchify/unpatchify.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Magic bytes of the synthetic dataset cache.
pub const CACHE_MAGIC: &[u8; 4] = b"PLGD";
pub const CACHE_VERSION: u32 = 1;

/// A batch of images with labels, the unit handed to the models.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    /// `[B, C, H, W]`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub labels: Vec<u32>,
    pub ids: Vec<String>,
}

impl ImageBatch {
    pub fn new(pixels: Tensor, labels: Vec<u32>, ids: Vec<String>, num_classes: usize) -> Result<Self> {
        let dims = pixels.dims();
        if dims.len() != 4 {
            return Err(Error::Shape(format!("pixels must be [B, C, H, W], got {dims:?}")));
        }
        if dims[0] == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        if labels.len() != dims[0] || ids.len() != dims[0] {
            return Err(Error::Shape(format!(
                "batch of {} images but {} labels and {} ids",
                dims[0],
                labels.len(),
                ids.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::InvalidInput(format!("label {l} outside [0, {num_classes})")));
        }
        let flat = pixels.flatten_all()?.to_vec1::<f32>()?;
        if flat.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidInput("pixels must be finite and within [0, 1]".into()));
        }
        Ok(Self { pixels, labels, ids })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// An immutable in-memory image dataset stored as packed `f32` CHW images.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub size: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub seed: u64,
    pixels: Vec<f32>,
    labels: Vec<u32>,
    ids: Vec<String>,
}

impl Dataset {
    pub fn from_parts(
        channels: usize,
        size: usize,
        class_names: Vec<String>,
        pixels: Vec<f32>,
        labels: Vec<u32>,
        ids: Vec<String>,
    ) -> Result<Self> {
        let per = channels * size * size;
        if labels.is_empty() {
            return Err(Error::NoSamples);
        }
        if pixels.len() != per * labels.len() || ids.len() != labels.len() {
            return Err(Error::Shape("pixel buffer does not match sample count".into()));
        }
        Ok(Self {
            channels,
            size,
            num_classes: class_names.len(),
            class_names,
            seed: 0,
            pixels,
            labels,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Gathers the given samples into a batch tensor.
    pub fn batch(&self, indices: &[usize], device: &Device) -> Result<ImageBatch> {
        self.batch_with(indices, device, |_, img| img.to_vec())
    }

    /// Like [`Dataset::batch`] but applies random horizontal flips and
    /// small translations (edge-replicated), the desk-scale stand-in for
    /// crop + flip augmentation.
    pub fn augmented_batch(&self, indices: &[usize], device: &Device, rng: &mut impl Rng) -> Result<ImageBatch> {
        let s = self.size;
        let c = self.channels;
        let max_shift = (s / 16).max(1) as i64;
        let params: Vec<(bool, i64, i64)> = indices
            .iter()
            .map(|_| {
                (
                    rng.random_bool(0.5),
                    rng.random_range(-max_shift..=max_shift),
                    rng.random_range(-max_shift..=max_shift),
                )
            })
            .collect();
        self.batch_with(indices, device, |slot, img| {
            let (flip, dy, dx) = params[slot];
            let mut out = vec![0f32; img.len()];
            for ch in 0..c {
                for y in 0..s {
                    for x in 0..s {
                        let sy = (y as i64 + dy).clamp(0, s as i64 - 1) as usize;
                        let mut sx = (x as i64 + dx).clamp(0, s as i64 - 1) as usize;
                        if flip {
                            sx = s - 1 - sx;
                        }
                        out[(ch * s + y) * s + x] = img[(ch * s + sy) * s + sx];
                    }
                }
            }
            out
        })
    }

    fn batch_with(
        &self,
        indices: &[usize],
        device: &Device,
        mut f: impl FnMut(usize, &[f32]) -> Vec<f32>,
    ) -> Result<ImageBatch> {
        if indices.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let mut buf = Vec::with_capacity(indices.len() * self.image_len());
        for (slot, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                return Err(Error::InvalidInput(format!("sample index {i} out of range")));
            }
            buf.extend(f(slot, self.image(i)));
        }
        let pixels = Tensor::from_vec(buf, (indices.len(), self.channels, self.size, self.size), device)?;
        Ok(ImageBatch {
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
        })
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Dataset {
            channels: self.channels,
            size: self.size,
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
            seed: self.seed,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }

    /// Stratified split: the last `ceil(frac * n_c)` samples of every class
    /// go to the held-out part.
    pub fn split(&self, holdout_frac: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&holdout_frac) {
            return Err(Error::Config(format!("holdout fraction {holdout_frac} not in [0, 1)")));
        }
        let mut train = Vec::new();
        let mut held = Vec::new();
        for c in 0..self.num_classes as u32 {
            let members: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            let n_held = ((members.len() as f64) * holdout_frac).ceil() as usize;
            let cut = members.len().saturating_sub(n_held);
            train.extend_from_slice(&members[..cut]);
            held.extend_from_slice(&members[cut..]);
        }
        if train.is_empty() || held.is_empty() {
            return Err(Error::NoSamples);
        }
        Ok((self.subset(&train), self.subset(&held)))
    }

    /// Writes the versioned binary cache (`PLGD` header, then labels and
    /// little-endian `f32` pixels).
    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(64 + self.pixels.len() * 4);
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for v in [self.num_classes, self.len(), self.channels, self.size] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for name in &self.class_names {
            write_str(&mut out, name);
        }
        for (l, id) in self.labels.iter().zip(&self.ids) {
            out.extend_from_slice(&l.to_le_bytes());
            write_str(&mut out, id);
        }
        for p in &self.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn load_cache(path: &Path) -> Result<Dataset> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = ByteReader { buf: &bytes, pos: 0 };
        if r.take(4)? != CACHE_MAGIC {
            return Err(Error::Format("missing PLGD magic".into()));
        }
        let version = r.u32()?;
        if version != CACHE_VERSION {
            return Err(Error::Format(format!("unsupported dataset cache version {version}")));
        }
        let seed = r.u64()?;
        let num_classes = r.u32()? as usize;
        let n = r.u32()? as usize;
        let channels = r.u32()? as usize;
        let size = r.u32()? as usize;
        let class_names = (0..num_classes).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let mut labels = Vec::with_capacity(n);
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(r.u32()?);
            ids.push(r.string()?);
        }
        let count = n * channels * size * size;
        let raw = r.take(count * 4)?;
        let pixels = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let mut ds = Dataset::from_parts(channels, size, class_names, pixels, labels, ids)?;
        ds.seed = seed;
        Ok(ds)
    }
}

pub(crate) fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub(crate) struct ByteReader<'a> {
    pub(crate) buf: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    pub(crate) fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
}

const SHAPES: [ShapeKind; 5] = [
    ShapeKind::Disk,
    ShapeKind::Square,
    ShapeKind::Triangle,
    ShapeKind::Ring,
    ShapeKind::Cross,
];

// Canonical shape centres as fractions of the image side.
const ANCHORS: [(f32, f32); 9] = [
    (0.5, 0.5),
    (0.35, 0.35),
    (0.65, 0.65),
    (0.65, 0.35),
    (0.35, 0.65),
    (0.5, 0.35),
    (0.5, 0.65),
    (0.35, 0.5),
    (0.65, 0.5),
];

fn inside(kind: ShapeKind, dx: f32, dy: f32, r: f32) -> bool {
    match kind {
        ShapeKind::Disk => dx * dx + dy * dy <= r * r,
        ShapeKind::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
        ShapeKind::Triangle => {
            if dy < -r || dy > 0.8 * r {
                return false;
            }
            let half = (dy + r) / (1.8 * r) * r;
            dx.abs() <= half
        }
        ShapeKind::Ring => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= 0.3 * r * r
        }
        ShapeKind::Cross => {
            (dx.abs() <= 0.3 * r && dy.abs() <= r) || (dy.abs() <= 0.3 * r && dx.abs() <= r)
        }
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Generates a class-structured toy dataset of RGB images.
///
/// Every class owns a shape type, a canonical position and a palette, so
/// class identity is a global property of the image. Samples jitter the
/// position, scale, brightness, stripe texture and background gradient.
pub fn synth_shapes(seed: u64, num_classes: usize, samples_per_class: usize, size: usize) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
    }
    if samples_per_class == 0 {
        return Err(Error::Config("samples_per_class must be positive".into()));
    }
    if !(8..=64).contains(&size) || size % 4 != 0 {
        return Err(Error::Config(format!(
            "image size {size} must be a multiple of 4 within [8, 64]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = num_classes * samples_per_class;
    let per = 3 * size * size;
    let mut pixels = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    let s = size as f32;
    for class in 0..num_classes {
        let kind = SHAPES[class % SHAPES.len()];
        let (ax, ay) = ANCHORS[class % ANCHORS.len()];
        let hue = class as f32 / num_classes as f32;
        for j in 0..samples_per_class {
            let cx = ax * s + rng.random_range(-s / 8.0..=s / 8.0);
            let cy = ay * s + rng.random_range(-s / 8.0..=s / 8.0);
            let r = 0.22 * s * rng.random_range(0.85f32..=1.15);
            let fg = hsv_to_rgb(hue, 0.85, rng.random_range(0.75f32..=0.95));
            let bg = hsv_to_rgb(hue + 0.5, 0.35, rng.random_range(0.3f32..=0.5));
            let angle = rng.random_range(0.0f32..std::f32::consts::PI);
            let freq = rng.random_range(0.25f32..=0.6);
            let phase = rng.random_range(0.0f32..std::f32::consts::TAU);
            let grad_angle = rng.random_range(0.0f32..std::f32::consts::TAU);
            let (ga, gb) = (grad_angle.cos(), grad_angle.sin());
            let mut img = vec![0f32; per];
            for y in 0..size {
                for x in 0..size {
                    let px = x as f32 + 0.5;
                    let py = y as f32 + 0.5;
                    let (dx, dy) = (px - cx, py - cy);
                    let rgb = if inside(kind, dx, dy, r) {
                        let stripe = 0.12 * (freq * (px * angle.cos() + py * angle.sin()) + phase).sin();
                        fg.map(|c| c + stripe)
                    } else {
                        let g = 0.1 * ((px / s - 0.5) * ga + (py / s - 0.5) * gb);
                        bg.map(|c| c + g)
                    };
                    for ch in 0..3 {
                        let noise = rng.random_range(-0.03f32..=0.03);
                        img[(ch * size + y) * size + x] = (rgb[ch] + noise).clamp(0.0, 1.0);
                    }
                }
            }
            pixels.extend(img);
            labels.push(class as u32);
            ids.push(format!("synth-{seed}-{class}-{j}"));
        }
    }
    let names = (0..num_classes).map(|c| format!("class_{c:02}")).collect();
    let mut ds = Dataset::from_parts(3, size, names, pixels, labels, ids)?;
    ds.seed = seed;
    Ok(ds)
}

/// Loads a `root/<class_name>/*.{png,jpg,jpeg}` folder. Images are
/// center-cropped to a square, resized to `size` and scaled to `[0, 1]`.
/// Labels follow the sorted order of class folder names.
pub fn load_folder(path: &Path, size: usize) -> Result<Dataset> {
    if size == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }
    let mut classes: Vec<_> = fs::read_dir(path)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    classes.sort();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    for (label, class) in classes.iter().enumerate() {
        let mut files: Vec<_> = fs::read_dir(path.join(class))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                    .unwrap_or(false)
            })
            .collect();
        files.sort();
        for file in files {
            let img = match image::open(&file) {
                Ok(img) => img,
                Err(e) => {
                    log::warn!("skipping unreadable image {}: {e}", file.display());
                    continue;
                }
            };
            pixels.extend(square_resize(&img, size));
            labels.push(label as u32);
            ids.push(format!("{class}/{}", file.file_name().unwrap_or_default().to_string_lossy()));
        }
    }
    if labels.is_empty() {
        return Err(Error::NoSamples);
    }
    Dataset::from_parts(3, size, classes, pixels, labels, ids)
}

/// Center-crops to the shorter side, resizes to `size`x`size`, and returns
/// CHW floats in `[0, 1]`.
pub fn square_resize(img: &image::DynamicImage, size: usize) -> Vec<f32> {
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    let cropped = img.crop_imm((w - side) / 2, (h - side) / 2, side, side);
    let resized = cropped
        .resize_exact(size as u32, size as u32, image::imageops::FilterType::Triangle)
        .to_rgb8();
    let mut out = vec![0f32; 3 * size * size];
    for (x, y, p) in resized.enumerate_pixels() {
        for ch in 0..3 {
            out[(ch * size + y as usize) * size + x as usize] = p[ch] as f32 / 255.0;
        }
    }
    out
}

/// Images cut into a raster-ordered grid of flattened patches.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    /// `[B, N, P*P*C]`; each patch is flattened in `(row, col, channel)` order.
    pub patches: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
    pub channels: usize,
}

impl PatchGrid {
    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Splits `[B, C, H, W]` images into raster-ordered patches: patch `i` is
/// grid cell `(i / grid_w, i % grid_w)`.
pub fn patchify(pixels: &Tensor, patch_size: usize) -> Result<PatchGrid> {
    let (b, c, h, w) = pixels
        .dims4()
        .map_err(|_| Error::Shape(format!("expected [B, C, H, W], got {:?}", pixels.dims())))?;
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w} not divisible by patch size {patch_size}"
        )));
    }
    let (gh, gw, p) = (h / patch_size, w / patch_size, patch_size);
    let patches = pixels
        .reshape((b, c, gh, p, gw, p))?
        .permute((0, 2, 4, 3, 5, 1))?
        .contiguous()?
        .reshape((b, gh * gw, p * p * c))?;
    Ok(PatchGrid { patches, grid_h: gh, grid_w: gw, patch_size: p, channels: c })
}

/// Inverse of [`patchify`] for a `[B, N, P*P*C]` tensor.
pub fn unpatchify(patches: &Tensor, grid_h: usize, grid_w: usize, patch_size: usize, channels: usize) -> Result<Tensor> {
    let (b, n, dim) = patches.dims3()?;
    let p = patch_size;
    if n != grid_h * grid_w || dim != p * p * channels {
        return Err(Error::Shape(format!(
            "patches [{b}, {n}, {dim}] do not match a {grid_h}x{grid_w} grid of {p}x{p}x{channels}"
        )));
    }
    Ok(patches
        .reshape((b, grid_h, grid_w, p, p, channels))?
        .permute((0, 5, 1, 3, 2, 4))?
        .contiguous()?
        .reshape((b, channels, grid_h * p, grid_w * p))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_shapes_is_balanced_and_deterministic() {
        let a = synth_shapes(0, 10, 64, 32).unwrap();
        assert_eq!(a.len(), 640);
        assert_eq!(a.class_counts(), vec![64; 10]);
        let b = synth_shapes(0, 10, 64, 32).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let a = synth_shapes(0, 10, 8, 32).unwrap();
        let b = synth_shapes(1, 10, 8, 32).unwrap();
        let differing = a.pixels().iter().zip(b.pixels()).filter(|(x, y)| x != y).count();
        assert!(differing as f64 > 0.01 * a.pixels().len() as f64);
    }

    #[test]
    fn synth_rejects_bad_sizes() {
        assert!(matches!(synth_shapes(0, 10, 4, 30), Err(Error::Config(_))));
        assert!(matches!(synth_shapes(0, 1, 4, 32), Err(Error::Config(_))));
    }

    #[test]
    fn nearest_centroid_separates_classes() {
        let ds = synth_shapes(0, 10, 40, 32).unwrap();
        let (train, test) = ds.split(0.25).unwrap();
        let dim = train.image_len();
        let mut centroids = vec![vec![0f64; dim]; 10];
        for i in 0..train.len() {
            let c = train.label(i) as usize;
            for (acc, v) in centroids[c].iter_mut().zip(train.image(i)) {
                *acc += *v as f64;
            }
        }
        for (c, count) in train.class_counts().into_iter().enumerate() {
            centroids[c].iter_mut().for_each(|v| *v /= count as f64);
        }
        let correct = (0..test.len())
            .filter(|&i| {
                let img = test.image(i);
                let best = (0..10)
                    .min_by(|&a, &b| {
                        let da: f64 = centroids[a].iter().zip(img).map(|(c, v)| (c - *v as f64).powi(2)).sum();
                        let db: f64 = centroids[b].iter().zip(img).map(|(c, v)| (c - *v as f64).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                best as u32 == test.label(i)
            })
            .count();
        assert!(correct as f64 / test.len() as f64 > 0.8, "accuracy {correct}/{}", test.len());
    }

    #[test]
    fn patchify_shapes_and_round_trip() {
        let ds = synth_shapes(3, 2, 2, 32).unwrap();
        let batch = ds.batch(&[0, 1, 2, 3], &Device::Cpu).unwrap();
        let grid = patchify(&batch.pixels, 4).unwrap();
        assert_eq!(grid.patches.dims(), &[4, 64, 48]);
        let back = unpatchify(&grid.patches, 8, 8, 4, 3).unwrap();
        let a = batch.pixels.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = back.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);

        let whole = patchify(&batch.pixels, 32).unwrap();
        assert_eq!(whole.patches.dims(), &[4, 1, 32 * 32 * 3]);
        assert!(patchify(&batch.pixels, 5).is_err());
    }

    #[test]
    fn patch_order_is_raster() {
        // A marker pixel in grid cell (2, 5) of an 8x8 grid lands in patch 2*8+5.
        let mut img = vec![0f32; 3 * 32 * 32];
        let (row, col) = (2usize, 5usize);
        img[(row * 4 + 1) * 32 + col * 4 + 2] = 1.0;
        let t = Tensor::from_vec(img, (1, 3, 32, 32), &Device::Cpu).unwrap();
        let grid = patchify(&t, 4).unwrap();
        let p = grid.patches.squeeze(0).unwrap().to_vec2::<f32>().unwrap();
        let hot: Vec<usize> = p.iter().enumerate().filter(|(_, v)| v.iter().any(|&x| x > 0.0)).map(|(i, _)| i).collect();
        assert_eq!(hot, vec![row * 8 + col]);
    }

    #[test]
    fn cache_round_trips() {
        let ds = synth_shapes(7, 3, 2, 16).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.plgd");
        ds.save_cache(&path).unwrap();
        let back = Dataset::load_cache(&path).unwrap();
        assert_eq!(ds, back);
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        assert!(matches!(Dataset::load_cache(&path), Err(Error::Format(_))));
    }

    #[test]
    fn folder_loading() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["b_cats", "a_dogs"] {
            fs::create_dir(dir.path().join(class)).unwrap();
            for i in 0..3 {
                let img = image::RgbImage::from_pixel(20 + i * 10, 12, image::Rgb([200, 10, 10]));
                img.save(dir.path().join(class).join(format!("{i}.png"))).unwrap();
            }
        }
        fs::write(dir.path().join("a_dogs").join("broken.png"), b"not a png").unwrap();
        let ds = load_folder(dir.path(), 8).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.class_names, vec!["a_dogs".to_string(), "b_cats".to_string()]);
        assert_eq!(ds.class_counts(), vec![3, 3]);
        assert!((ds.image(0)[0] - 200.0 / 255.0).abs() < 1e-6);

        let empty = tempfile::tempdir().unwrap();
        let err = load_folder(empty.path(), 8).unwrap_err();
        assert_eq!(err.to_string(), "no samples");
    }

    #[test]
    fn non_square_is_center_cropped() {
        // Left third red, middle third green, right third blue: the centre
        // crop of a 30x10 image keeps only green.
        let mut img = image::RgbImage::new(30, 10);
        for (x, _, p) in img.enumerate_pixels_mut() {
            *p = match x {
                0..=9 => image::Rgb([255, 0, 0]),
                10..=19 => image::Rgb([0, 255, 0]),
                _ => image::Rgb([0, 0, 255]),
            };
        }
        let out = square_resize(&image::DynamicImage::ImageRgb8(img), 4);
        let green = &out[16..32];
        assert!(green.iter().all(|&v| v > 0.99));
        assert!(out[..16].iter().all(|&v| v < 0.01));
    }

    #[test]
    fn batch_validates() {
        let t = Tensor::from_vec(vec![2f32; 12], (1, 3, 2, 2), &Device::Cpu).unwrap();
        assert!(ImageBatch::new(t, vec![0], vec!["x".into()], 2).is_err());
        let t = Tensor::from_vec(vec![0.5f32; 12], (1, 3, 2, 2), &Device::Cpu).unwrap();
        assert!(ImageBatch::new(t.clone(), vec![3], vec!["x".into()], 2).is_err());
        assert!(ImageBatch::new(t, vec![1], vec!["x".into()], 2).is_ok());
    }
}
