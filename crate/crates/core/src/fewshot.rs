//! K-shot sampling, augmentation, seeded batching and dataset sources.
//!
//! Source locators:
//!
//! - `synthetic:shapes[?train=N&test=N&res=R&seed=S]`: procedurally drawn
//!   ten-class shape images, `N` per class. Deterministic in `S`.
//! - `cifar10-bin:<dir>`: the CIFAR-10 binary release (`data_batch_{1..5}.bin`,
//!   `test_batch.bin`).
//! - `dir:<root>`: `<root>/{train,test}/<class>/*.png`, classes in sorted order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use scion_nn::{Scalar, Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("class {class} has {available} samples, fewer than K = {k}")]
    NotEnoughSamples { class: usize, available: usize, k: usize },
    #[error("K must be at least 1")]
    ZeroShots,
    #[error("dataset is empty")]
    Empty,
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("unrecognized dataset locator `{0}`")]
    Locator(String),
    #[error("dataset not found at {0}")]
    Missing(PathBuf),
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// 8-bit image in channel-major (CHW) layout.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), channels * height * width, "image data length");
        Self { channels, height, width, data }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub source_id: String,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn by_class(&self) -> Vec<Vec<usize>> {
        let mut classes = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            classes[y].push(i);
        }
        classes
    }

    /// `k` images per class drawn without replacement, labels kept.
    pub fn balanced_subset(&self, k: usize, seed: u64) -> Result<LabeledDataset> {
        let picked = pick_per_class(self, k, seed)?;
        Ok(LabeledDataset {
            images: picked.iter().map(|&i| self.images[i].clone()).collect(),
            labels: picked.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            source_id: format!("{}#{k}per-class@{seed}", self.source_id),
        })
    }
}

/// Unlabeled K-shot set: exactly `k` images from each source class.
/// Labels are dropped at sampling time and there is no way to recover them.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotDataset {
    samples: Vec<Image>,
    pub k: usize,
    pub num_classes: usize,
    pub source_id: String,
    pub seed: u64,
}

impl FewShotDataset {
    pub fn samples(&self) -> &[Image] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn pick_per_class(source: &LabeledDataset, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(DataError::ZeroShots);
    }
    let mut picked = Vec::with_capacity(k * source.num_classes);
    for (class, members) in source.by_class().into_iter().enumerate() {
        if members.len() < k {
            return Err(DataError::NotEnoughSamples {
                class,
                available: members.len(),
                k,
            });
        }
        let mut rng = seed::rng(seed, &[0x6b73686f74, class as u64]);
        picked.extend(index::sample(&mut rng, members.len(), k).into_iter().map(|j| members[j]));
    }
    Ok(picked)
}

/// Draws `k` images per class uniformly without replacement and strips labels.
pub fn sample_kshot(source: &LabeledDataset, k: usize, seed: u64) -> Result<FewShotDataset> {
    let picked = pick_per_class(source, k, seed)?;
    Ok(FewShotDataset {
        samples: picked.iter().map(|&i| source.images[i].clone()).collect(),
        k,
        num_classes: source.num_classes,
        source_id: source.source_id.clone(),
        seed,
    })
}

/// `⌊64·K/10⌋`, at least 1.
pub fn batch_size_for(k: usize) -> usize {
    (64 * k / 10).max(1)
}

/// Zero-padded crop: the result pixel `(y, x)` is source pixel
/// `(y + dy - padding, x + dx - padding)`, or 0 outside the image.
pub fn crop(image: &Image, padding: usize, dy: usize, dx: usize) -> Image {
    let (h, w) = (image.height, image.width);
    let mut out = vec![0u8; image.data.len()];
    for c in 0..image.channels {
        for y in 0..h {
            let sy = (y + dy) as isize - padding as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - padding as isize;
                if sx >= 0 && sx < w as isize {
                    out[(c * h + y) * w + x] = image.at(c, sy as usize, sx as usize);
                }
            }
        }
    }
    Image::new(image.channels, h, w, out)
}

pub fn hflip(image: &Image) -> Image {
    let mut out = image.data.clone();
    for row in out.chunks_mut(image.width) {
        row.reverse();
    }
    Image::new(image.channels, image.height, image.width, out)
}

/// Random crop with `padding` then a horizontal flip with probability 0.5.
pub fn augment<R: Rng + ?Sized>(image: &Image, padding: usize, rng: &mut R) -> Image {
    let dy = rng.random_range(0..=2 * padding);
    let dx = rng.random_range(0..=2 * padding);
    let cropped = crop(image, padding, dy, dx);
    if rng.random_bool(0.5) {
        hflip(&cropped)
    } else {
        cropped
    }
}

/// Crop padding used when none is configured: 4 pixels at 32x32.
pub fn default_padding(resolution: usize) -> usize {
    (resolution / 8).max(1)
}

/// Per-channel normalization applied when images become tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn cifar10() -> Self {
        Self {
            mean: vec![0.4914, 0.4822, 0.4465],
            std: vec![0.2470, 0.2435, 0.2616],
        }
    }

    pub fn symmetric(channels: usize) -> Self {
        Self {
            mean: vec![0.5; channels],
            std: vec![0.25; channels],
        }
    }
}

/// Stacks images into `[n, c, h, w]`, scaled to `[0, 1]` then normalized.
pub fn to_tensor(images: &[&Image], norm: &Normalization) -> Tensor {
    let first = images.first().expect("at least one image");
    let (c, h, w) = (first.channels, first.height, first.width);
    let plane = h * w;
    let mut data = Vec::with_capacity(images.len() * c * plane);
    for img in images {
        assert_eq!((img.channels, img.height, img.width), (c, h, w), "mixed image sizes");
        for ch in 0..c {
            let (m, s) = (norm.mean[ch], norm.std[ch]);
            data.extend(
                img.data[ch * plane..(ch + 1) * plane]
                    .iter()
                    .map(|&v| ((v as f64 / 255.0 - m) / s) as Scalar),
            );
        }
    }
    Tensor::from_vec(Shape::new(images.len(), c, h, w), data)
}

/// Shuffled index batches for one epoch; the last batch may be short.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut seed::rng(seed, &[0x73687566, epoch]));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Augmentation of sample `index` in `epoch`, independent of batch order.
pub fn augment_sample(image: &Image, padding: usize, seed: u64, epoch: u64, index: usize) -> Image {
    augment(image, padding, &mut seed::rng(seed, &[0x61756720, epoch, index as u64]))
}

/// Seeded epoch iterator over a few-shot set.
#[derive(Debug, Clone)]
pub struct Loader<'a> {
    dataset: &'a FewShotDataset,
    pub batch_size: usize,
    pub seed: u64,
    /// Crop padding; `None` disables augmentation.
    pub padding: Option<usize>,
}

pub fn make_loader(dataset: &FewShotDataset, batch_size: usize, seed: u64) -> Result<Loader<'_>> {
    if dataset.is_empty() {
        return Err(DataError::Empty);
    }
    if batch_size == 0 {
        return Err(DataError::ZeroBatch);
    }
    let padding = Some(default_padding(dataset.samples[0].height));
    Ok(Loader { dataset, batch_size, seed, padding })
}

impl<'a> Loader<'a> {
    pub fn with_padding(mut self, padding: Option<usize>) -> Self {
        self.padding = padding;
        self
    }

    /// Augmented image batches of `epoch`.
    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = Vec<Image>> + 'a {
        let (seed, padding, data) = (self.seed, self.padding, self.dataset);
        epoch_batches(data.len(), self.batch_size, seed, epoch)
            .into_iter()
            .map(move |idx| {
                idx.into_iter()
                    .map(|i| match padding {
                        Some(p) => augment_sample(&data.samples[i], p, seed, epoch, i),
                        None => data.samples[i].clone(),
                    })
                    .collect()
            })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.dataset.len().div_ceil(self.batch_size)
    }
}

/// Train and test splits of one source.
#[derive(Debug, Clone)]
pub struct SourceSplits {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

pub fn load_source(locator: &str) -> Result<SourceSplits> {
    if let Some(rest) = locator.strip_prefix("synthetic:") {
        return synthetic_from_locator(locator, rest);
    }
    if let Some(dir) = locator.strip_prefix("cifar10-bin:") {
        return load_cifar10_bin(Path::new(dir));
    }
    if let Some(dir) = locator.strip_prefix("dir:") {
        return load_image_dir(Path::new(dir));
    }
    Err(DataError::Locator(locator.to_owned()))
}

fn synthetic_from_locator(locator: &str, rest: &str) -> Result<SourceSplits> {
    let (kind, query) = rest.split_once('?').unwrap_or((rest, ""));
    if kind != "shapes" {
        return Err(DataError::Locator(locator.to_owned()));
    }
    let mut cfg = ShapesConfig::default();
    for pair in query.split('&').filter(|p| !p.is_empty()) {
        let (key, value) = pair.split_once('=').ok_or_else(|| DataError::Locator(locator.to_owned()))?;
        let num: u64 = value.parse().map_err(|_| DataError::Locator(locator.to_owned()))?;
        match key {
            "train" => cfg.train_per_class = num as usize,
            "test" => cfg.test_per_class = num as usize,
            "res" => cfg.resolution = num as usize,
            "seed" => cfg.seed = num,
            _ => return Err(DataError::Locator(locator.to_owned())),
        }
    }
    if cfg.resolution < 8 || cfg.train_per_class == 0 || cfg.test_per_class == 0 {
        return Err(DataError::Locator(locator.to_owned()));
    }
    let mut splits = synthetic_shapes(&cfg);
    splits.train.source_id = locator.to_owned();
    splits.test.source_id = format!("{locator}#test");
    Ok(splits)
}

/// Parameters of the procedural shape source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapesConfig {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub resolution: usize,
    pub seed: u64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            train_per_class: 500,
            test_per_class: 200,
            resolution: 16,
            seed: 0,
        }
    }
}

pub const SHAPE_CLASSES: [&str; 10] = [
    "disk", "square", "triangle", "plus", "ring", "hbars", "vbars", "cross", "checker", "diamond",
];

/// Ten classes of noisy geometric figures with random colors, position, scale
/// and small rotations, on a shaded background with a distractor blob.
pub fn synthetic_shapes(cfg: &ShapesConfig) -> SourceSplits {
    let make = |split: u64, per_class: usize| {
        let mut images = Vec::with_capacity(per_class * SHAPE_CLASSES.len());
        let mut labels = Vec::with_capacity(images.capacity());
        for i in 0..per_class {
            for class in 0..SHAPE_CLASSES.len() {
                let mut rng = seed::rng(cfg.seed, &[0x7368617065, split, class as u64, i as u64]);
                images.push(draw_shape(class, cfg.resolution, &mut rng));
                labels.push(class);
            }
        }
        LabeledDataset {
            images,
            labels,
            num_classes: SHAPE_CLASSES.len(),
            source_id: String::new(),
        }
    };
    SourceSplits {
        train: make(0, cfg.train_per_class),
        test: make(1, cfg.test_per_class),
    }
}

/// Coverage of the unit-scale figure at local coordinates `(u, v)` in
/// roughly `[-1, 1]^2`; values are in `[0, 1]`.
fn shape_mask(class: usize, u: f64, v: f64) -> f64 {
    let soft = |d: f64| (0.5 - d / 0.12).clamp(0.0, 1.0);
    let r = (u * u + v * v).sqrt();
    let inside = |b: bool| if b { 1.0 } else { 0.0 };
    match class {
        0 => soft(r - 0.8),
        1 => soft(u.abs().max(v.abs()) - 0.7),
        2 => {
            let d = (v - 0.7).max((-1.6 * u - v - 0.55).max(1.6 * u - v - 0.55) / 1.9);
            soft(d)
        }
        3 => soft((u.abs().max(v.abs()) - 0.85).max(u.abs().min(v.abs()) - 0.25)),
        4 => soft((r - 0.8).abs() - 0.2),
        5 => soft(u.abs().max(v.abs()) - 0.85) * inside((v * 2.5 + 10.0).rem_euclid(2.0) < 1.0),
        6 => soft(u.abs().max(v.abs()) - 0.85) * inside((u * 2.5 + 10.0).rem_euclid(2.0) < 1.0),
        7 => {
            let d = ((u - v).abs().min((u + v).abs())) / std::f64::consts::SQRT_2;
            soft((d - 0.18).max(u.abs().max(v.abs()) - 0.85))
        }
        8 => {
            let cell = ((u * 2.0 + 10.0).floor() as i64 + (v * 2.0 + 10.0).floor() as i64) & 1;
            soft(u.abs().max(v.abs()) - 0.85) * inside(cell == 0)
        }
        9 => soft((u.abs() + v.abs()) - 0.95),
        _ => unreachable!("ten shape classes"),
    }
}

fn draw_shape<R: Rng + ?Sized>(class: usize, res: usize, rng: &mut R) -> Image {
    let mut color = || [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
    let bg0 = color();
    let bg1 = color();
    let mut fg = color();
    // Keep the figure visible against the background.
    let contrast: f64 = fg.iter().zip(&bg0).map(|(a, b)| (a - b).abs()).sum();
    if contrast < 0.6 {
        fg = fg.map(|c| if c > 0.5 { c - 0.5 } else { c + 0.5 });
    }
    let blob = color();

    let scale = rng.random_range(0.28..0.42) * res as f64;
    let margin = scale * 0.9;
    let span = (res as f64 - 2.0 * margin).max(0.0);
    let cx = margin + rng.random::<f64>() * span;
    let cy = margin + rng.random::<f64>() * span;
    let theta: f64 = rng.random_range(-0.3..0.3);
    let (sin, cos) = theta.sin_cos();
    let grad_dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (bx, by) = (rng.random::<f64>() * res as f64, rng.random::<f64>() * res as f64);
    let br = rng.random_range(0.08..0.16) * res as f64;
    let noise = Normal::new(0.0, 0.06).expect("valid std");

    let mut data = vec![0u8; 3 * res * res];
    for y in 0..res {
        for x in 0..res {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = 0.5
                + 0.5 * ((px / res as f64 - 0.5) * grad_dir.cos() + (py / res as f64 - 0.5) * grad_dir.sin());
            let (dx, dy) = ((px - cx) / scale, (py - cy) / scale);
            let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
            let m = shape_mask(class, u, v);
            let b = (1.0 - ((px - bx).hypot(py - by) - br)).clamp(0.0, 1.0) * 0.7;
            for c in 0..3 {
                let base = bg0[c] * (1.0 - t) + bg1[c] * t;
                let with_blob = base * (1.0 - b) + blob[c] * b;
                let v = with_blob * (1.0 - m) + fg[c] * m + noise.sample(rng);
                data[(c * res + y) * res + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    Image::new(3, res, res, data)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(DataError::Missing(path.to_owned()));
    }
    std::fs::read(path).map_err(|source| DataError::Io { path: path.to_owned(), source })
}

fn parse_cifar_records(path: &Path, bytes: &[u8], out: &mut LabeledDataset) -> Result<()> {
    const RECORD: usize = 1 + 3 * 32 * 32;
    if bytes.len() % RECORD != 0 {
        return Err(DataError::Format {
            path: path.to_owned(),
            msg: format!("length {} is not a multiple of {RECORD}", bytes.len()),
        });
    }
    for rec in bytes.chunks(RECORD) {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(DataError::Format {
                path: path.to_owned(),
                msg: format!("label {label} out of range"),
            });
        }
        out.labels.push(label);
        out.images.push(Image::new(3, 32, 32, rec[1..].to_vec()));
    }
    Ok(())
}

fn load_cifar10_bin(dir: &Path) -> Result<SourceSplits> {
    let empty = |id: String| LabeledDataset {
        images: Vec::new(),
        labels: Vec::new(),
        num_classes: 10,
        source_id: id,
    };
    let mut train = empty(format!("cifar10-bin:{}", dir.display()));
    for i in 1..=5 {
        let path = dir.join(format!("data_batch_{i}.bin"));
        parse_cifar_records(&path, &read_file(&path)?, &mut train)?;
    }
    let mut test = empty(format!("cifar10-bin:{}#test", dir.display()));
    let path = dir.join("test_batch.bin");
    parse_cifar_records(&path, &read_file(&path)?, &mut test)?;
    Ok(SourceSplits { train, test })
}

fn load_image_dir(root: &Path) -> Result<SourceSplits> {
    let list_dir = |p: &Path| -> Result<Vec<PathBuf>> {
        let rd = std::fs::read_dir(p).map_err(|source| DataError::Io { path: p.to_owned(), source })?;
        let mut v: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).collect();
        v.sort();
        Ok(v)
    };
    let train_root = root.join("train");
    if !train_root.is_dir() {
        return Err(DataError::Missing(train_root));
    }
    let classes: Vec<String> = list_dir(&train_root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    let class_index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let load_split = |split: &str| -> Result<LabeledDataset> {
        let mut ds = LabeledDataset {
            images: Vec::new(),
            labels: Vec::new(),
            num_classes: classes.len(),
            source_id: format!("dir:{}#{split}", root.display()),
        };
        for (name, &label) in &class_index {
            let dir = root.join(split).join(name);
            if !dir.is_dir() {
                continue;
            }
            for file in list_dir(&dir)? {
                if file.extension().and_then(|e| e.to_str()) != Some("png") {
                    continue;
                }
                let img = image::open(&file)
                    .map_err(|e| DataError::Format { path: file.clone(), msg: e.to_string() })?
                    .to_rgb8();
                let (w, h) = (img.width() as usize, img.height() as usize);
                let mut data = vec![0u8; 3 * h * w];
                for (x, y, px) in img.enumerate_pixels() {
                    for c in 0..3 {
                        data[(c * h + y as usize) * w + x as usize] = px[c];
                    }
                }
                ds.images.push(Image::new(3, h, w, data));
                ds.labels.push(label);
            }
        }
        if let Some(first) = ds.images.first() {
            let dims = (first.height, first.width);
            if let Some(bad) = ds.images.iter().find(|i| (i.height, i.width) != dims) {
                return Err(DataError::Format {
                    path: root.join(split),
                    msg: format!("mixed image sizes {:?} and {:?}", dims, (bad.height, bad.width)),
                });
            }
        }
        Ok(ds)
    };
    let train = load_split("train")?;
    if train.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(SourceSplits { train, test: load_split("test")? })
}
