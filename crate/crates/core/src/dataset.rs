//! Synthetic shapes data, folder datasets, labeled/unlabeled splits,
//! augmentation, and the training batch stream.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Image, LabelMap, IGNORE};
use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::resample::Resampler;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub label: Option<LabelMap>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Image, label: Option<LabelMap>) -> Result<Self> {
        let id = id.into();
        if let Some(l) = &label {
            if l.height() != image.height() || l.width() != image.width() {
                return Err(Error::ShapeMismatch(format!(
                    "sample {id}: label {}x{} vs image {}x{}",
                    l.height(),
                    l.width(),
                    image.height(),
                    image.width()
                )));
            }
        }
        Ok(Self { id, image, label })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// CRC-32 over class count, sample ids, 8-bit pixels and labels.
    pub fn fingerprint(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        h.update(&(self.classes as u64).to_le_bytes());
        for s in &self.samples {
            h.update(s.id.as_bytes());
            h.update(&[0]);
            h.update(&(s.image.height() as u64).to_le_bytes());
            h.update(&(s.image.width() as u64).to_le_bytes());
            h.update(&image_to_rgb8(&s.image));
            match &s.label {
                Some(l) => {
                    h.update(&[1]);
                    h.update(l.labels());
                }
                None => h.update(&[0]),
            }
        }
        h.finalize()
    }
}

/// Metadata written next to a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub classes: usize,
    pub samples: usize,
    pub height: usize,
    pub width: usize,
    pub seed: Option<u64>,
}

const META_FILE: &str = "dataset.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShapeKind {
    Disk,
    Square,
    Triangle,
}

impl ShapeKind {
    fn of_class(class: usize) -> Self {
        match (class - 1) % 3 {
            0 => ShapeKind::Disk,
            1 => ShapeKind::Square,
            _ => ShapeKind::Triangle,
        }
    }

    /// Size multiplier giving the shape the area of a disk of unit radius.
    fn equal_area_scale(self) -> f64 {
        let pi = std::f64::consts::PI;
        match self {
            ShapeKind::Disk => 1.0,
            ShapeKind::Square => pi.sqrt() / 2.0,
            ShapeKind::Triangle => (4.0 * pi / (3.0 * 3f64.sqrt())).sqrt(),
        }
    }
}

#[derive(Debug, Clone)]
struct Shape {
    kind: ShapeKind,
    cy: f64,
    cx: f64,
    /// Circumradius for disks and triangles, half side for squares.
    size: f64,
    angle: f64,
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        match self.kind {
            ShapeKind::Disk => dy * dy + dx * dx <= self.size * self.size,
            ShapeKind::Square => dy.abs() <= self.size && dx.abs() <= self.size,
            ShapeKind::Triangle => {
                // Inside iff on the inner side of all three edges; each edge
                // lies at distance size/2 from the center along its normal.
                (0..3).all(|k| {
                    let a = self.angle + std::f64::consts::PI + k as f64 * 2.0 * std::f64::consts::PI / 3.0;
                    dx * a.cos() + dy * a.sin() <= self.size / 2.0
                })
            }
        }
    }

    /// Radius of a circle enclosing the shape.
    fn extent(&self) -> f64 {
        match self.kind {
            ShapeKind::Square => self.size * std::f64::consts::SQRT_2,
            _ => self.size,
        }
    }

    fn area(&self) -> f64 {
        match self.kind {
            ShapeKind::Disk => std::f64::consts::PI * self.size * self.size,
            ShapeKind::Square => 4.0 * self.size * self.size,
            ShapeKind::Triangle => 3.0 * 3f64.sqrt() / 4.0 * self.size * self.size,
        }
    }
}

/// Shapes never cover more than this share of an image, which keeps the
/// background class at 30% or more.
const MAX_SHAPE_AREA: f64 = 0.6;

/// Mean color of each foreground class before per-shape jitter.
const CLASS_TINTS: [[f64; 3]; 6] = [
    [0.80, 0.35, 0.30],
    [0.35, 0.75, 0.35],
    [0.35, 0.40, 0.85],
    [0.80, 0.75, 0.30],
    [0.75, 0.35, 0.80],
    [0.30, 0.75, 0.80],
];

/// Per-shape color jitter; it makes tints overlap so shape outlines matter.
const COLOR_JITTER: f64 = 0.22;
const PIXEL_NOISE: f64 = 0.06;

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn render_sample(h: usize, w: usize, classes: usize, rng: &mut ChaCha8Rng) -> (Image, LabelMap) {
    let side = h.min(w) as f64;
    let count = rng.gen_range(1..=3);
    let mut shapes: Vec<(Shape, usize)> = Vec::new();
    let mut area = 0.0;
    for _ in 0..count {
        for _attempt in 0..20 {
            let class = rng.gen_range(1..classes);
            let kind = ShapeKind::of_class(class);
            let size = (side * rng.gen_range(0.16..0.32) * kind.equal_area_scale()).max(1.0);
            let shape = Shape {
                kind,
                cy: rng.gen_range(0.0..h as f64),
                cx: rng.gen_range(0.0..w as f64),
                size,
                angle: rng.gen_range(0.0..2.0 * std::f64::consts::PI),
            };
            let apart = shapes.iter().all(|(s, _)| {
                let d = ((s.cy - shape.cy).powi(2) + (s.cx - shape.cx).powi(2)).sqrt();
                d > s.extent() + shape.extent() + 1.0
            });
            if apart && area + shape.area() <= MAX_SHAPE_AREA * (h * w) as f64 {
                area += shape.area();
                shapes.push((shape, class));
                break;
            }
        }
    }

    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.65));
    let freq = rng.gen_range(0.15..0.6);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let dir = rng.gen_range(0.0..std::f64::consts::PI);
    let colors: Vec<[f64; 3]> = shapes
        .iter()
        .map(|(_, c)| {
            let tint = CLASS_TINTS[(c - 1) % CLASS_TINTS.len()];
            std::array::from_fn(|k| tint[k] + rng.gen_range(-COLOR_JITTER..COLOR_JITTER))
        })
        .collect();
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid noise");

    let mut labels = vec![0u8; h * w];
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let hit = shapes.iter().position(|(s, _)| s.contains(py, px));
            let i = y * w + x;
            let rgb = match hit {
                Some(j) => {
                    labels[i] = shapes[j].1 as u8;
                    colors[j]
                }
                None => {
                    let stripe = 0.12 * (freq * (px * dir.cos() + py * dir.sin()) + phase).sin();
                    std::array::from_fn(|k| base[k] + stripe)
                }
            };
            for k in 0..3 {
                data[k * h * w + i] = quantize(rgb[k] + noise.sample(rng));
            }
        }
    }
    let image = Image::new(h, w, data).expect("quantized values are in range");
    let labels = LabelMap::new(h, w, classes, labels).expect("labels are in range");
    (image, labels)
}

/// Renders `n` labeled images of 1 to 3 non-overlapping filled shapes on a
/// striped, noisy background. Class `c >= 1` is drawn as a disk, square or
/// triangle by `(c - 1) mod 3`. Every sample depends only on
/// `(seed, index)` and pixel values are multiples of 1/255, so saving and
/// reloading is lossless.
pub fn generate_shapes_dataset(n: usize, height: usize, width: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 classes, got {classes}")));
    }
    if classes > IGNORE as usize {
        return Err(Error::InvalidConfig(format!("at most {} classes", IGNORE)));
    }
    if height == 0 || width == 0 {
        return Err(Error::InvalidConfig("image size must be positive".into()));
    }
    let samples = (0..n)
        .map(|i| {
            let (image, label) = render_sample(height, width, classes, &mut sample_rng(seed, i));
            Sample::new(format!("{i:05}"), image, Some(label))
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { classes, samples })
}

fn image_to_rgb8(image: &Image) -> Vec<u8> {
    let (h, w) = (image.height(), image.width());
    let plane = h * w;
    let d = image.data();
    (0..plane)
        .flat_map(|i| (0..3).map(move |k| (d[k * plane + i] * 255.0).round() as u8))
        .collect()
}

fn encode(width: usize, height: usize, color: image::ExtendedColorType, pixels: &[u8], path: &Path) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    let mut buf = Vec::new();
    image::codecs::png::PngEncoder::new(&mut buf)
        .write_image(pixels, width as u32, height as u32, color)
        .map_err(|error| Error::Image {
            path: path.to_path_buf(),
            error,
        })?;
    Ok(buf)
}

/// Writes `images/<id>.png`, `labels/<id>.png` and a metadata file.
pub fn save_folder_dataset(dataset: &Dataset, dir: &Path, seed: Option<u64>) -> Result<()> {
    let images = dir.join("images");
    let labels = dir.join("labels");
    for d in [&images, &labels] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for s in &dataset.samples {
        let (h, w) = (s.image.height(), s.image.width());
        let p = images.join(format!("{}.png", s.id));
        write_atomic(&p, &encode(w, h, image::ExtendedColorType::Rgb8, &image_to_rgb8(&s.image), &p)?)?;
        if let Some(l) = &s.label {
            let p = labels.join(format!("{}.png", s.id));
            write_atomic(&p, &encode(w, h, image::ExtendedColorType::L8, l.labels(), &p)?)?;
        }
    }
    let first = dataset.samples.first();
    let meta = DatasetMeta {
        classes: dataset.classes,
        samples: dataset.len(),
        height: first.map_or(0, |s| s.image.height()),
        width: first.map_or(0, |s| s.image.width()),
        seed,
    };
    let text = toml::to_string(&meta).map_err(|e| Error::ConfigParse(e.to_string()))?;
    write_atomic(&dir.join(META_FILE), text.as_bytes())
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem() {
                stems.push(stem.to_string_lossy().into_owned());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

fn ingestion(stem: &str, reason: impl Into<String>) -> Error {
    Error::Ingestion {
        stem: stem.to_string(),
        reason: reason.into(),
    }
}

/// Decodes an image file to RGB with channel values in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let rgb = image::open(path)
        .map_err(|error| Error::Image {
            path: path.to_path_buf(),
            error,
        })?
        .to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for k in 0..3 {
            data[k * plane + i] = px.0[k] as f64 / 255.0;
        }
    }
    Image::new(h, w, data)
}

/// Reads `images/*.png` and optional `labels/*.png` with matching stems.
/// The class count comes from the metadata file when present, otherwise
/// from the largest label found.
pub fn load_folder_dataset(dir: &Path) -> Result<Dataset> {
    let image_dir = dir.join("images");
    if !image_dir.is_dir() {
        return Err(Error::InvalidInput(format!("{} has no images/ directory", dir.display())));
    }
    let label_dir = dir.join("labels");
    let meta_path = dir.join(META_FILE);
    let meta: Option<DatasetMeta> = if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        Some(toml::from_str(&text).map_err(|e| Error::ConfigParse(format!("{}: {e}", meta_path.display())))?)
    } else {
        None
    };

    let mut raw = Vec::new();
    for stem in png_stems(&image_dir)? {
        let image = load_image(&image_dir.join(format!("{stem}.png"))).map_err(|e| ingestion(&stem, e.to_string()))?;
        let (h, w) = (image.height(), image.width());
        let label_path = label_dir.join(format!("{stem}.png"));
        let label = if label_path.exists() {
            let l = image::open(&label_path).map_err(|e| ingestion(&stem, e.to_string()))?;
            if l.color() != image::ColorType::L8 {
                return Err(ingestion(&stem, "label PNG must be 8-bit single channel"));
            }
            let l = l.to_luma8();
            if l.width() as usize != w || l.height() as usize != h {
                return Err(ingestion(
                    &stem,
                    format!("label is {}x{}, image is {h}x{w}", l.height(), l.width()),
                ));
            }
            Some(l.into_raw())
        } else {
            None
        };
        raw.push((stem, image, label));
    }

    let inferred = raw
        .iter()
        .filter_map(|(_, _, l)| l.as_ref())
        .flat_map(|l| l.iter().copied().filter(|&v| v != IGNORE))
        .max()
        .map_or(2, |m| (m as usize + 1).max(2));
    let classes = meta.map_or(inferred, |m| m.classes);
    let samples = raw
        .into_iter()
        .map(|(stem, image, label)| {
            let label = label
                .map(|l| LabelMap::new(image.height(), image.width(), classes, l))
                .transpose()
                .map_err(|e| ingestion(&stem, e.to_string()))?;
            Sample::new(stem, image, label)
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { classes, samples })
}

/// Indices into a dataset, partitioned into labeled and unlabeled pools.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub fraction: f64,
    pub seed: u64,
}

/// Number of labeled samples for a fraction of `n`: `max(1, floor(f n))`.
pub fn labeled_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64 + 1e-9).floor() as usize).clamp(1, n.max(1))
}

/// Draws `max(1, floor(fraction * N))` labeled samples uniformly without
/// replacement; the rest form the unlabeled pool. Samples without a label
/// file are always unlabeled.
pub fn split_labeled(dataset: &Dataset, fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("cannot split an empty dataset".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!("labeled fraction {fraction} outside (0, 1]")));
    }
    let k = labeled_count(dataset.len(), fraction);
    let mut candidates: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.samples[i].label.is_some()).collect();
    if candidates.len() < k {
        return Err(Error::InvalidInput(format!(
            "{k} labeled samples requested but only {} have labels",
            candidates.len()
        )));
    }
    candidates.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut labeled = candidates[..k].to_vec();
    labeled.sort_unstable();
    let unlabeled = (0..dataset.len()).filter(|i| labeled.binary_search(i).is_err()).collect();
    Ok(DatasetSplit {
        labeled,
        unlabeled,
        fraction,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub crop_h: usize,
    pub crop_w: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub enable_scale: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_h: 64,
            crop_w: 64,
            scale_min: 0.5,
            scale_max: 1.5,
            enable_scale: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_h == 0 || self.crop_w == 0 {
            return Err(Error::InvalidConfig("crop size must be positive".into()));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "scale range [{}, {}] is invalid",
                self.scale_min, self.scale_max
            )));
        }
        Ok(())
    }
}

fn nearest_index(i: usize, input: usize, output: usize) -> usize {
    if output == 1 || input == 1 {
        return (input - 1) / 2;
    }
    ((i * (input - 1)) as f64 / (output - 1) as f64).round() as usize
}

/// Random rescale followed by a random crop. The image is resampled
/// bilinearly and the label by nearest neighbor on the same grid; regions
/// outside the scaled image become black pixels with [`IGNORE`] labels.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (sample.image.height(), sample.image.width());
    let (sh, sw) = if cfg.enable_scale {
        let s = rng.gen_range(cfg.scale_min..=cfg.scale_max);
        (((h as f64 * s).round() as usize).max(1), ((w as f64 * s).round() as usize).max(1))
    } else {
        (h, w)
    };
    let oy = if sh > cfg.crop_h { rng.gen_range(0..=sh - cfg.crop_h) } else { 0 };
    let ox = if sw > cfg.crop_w { rng.gen_range(0..=sw - cfg.crop_w) } else { 0 };

    let r = Resampler::new(h, w, sh, sw);
    let (src_plane, dst_plane) = (h * w, sh * sw);
    let mut scaled = vec![0.0; 3 * dst_plane];
    for k in 0..3 {
        let src = &sample.image.data()[k * src_plane..(k + 1) * src_plane];
        if r.is_identity() {
            scaled[k * dst_plane..(k + 1) * dst_plane].copy_from_slice(src);
        } else {
            r.forward_plane(src, &mut scaled[k * dst_plane..(k + 1) * dst_plane]);
        }
    }

    let (ch, cw) = (cfg.crop_h, cfg.crop_w);
    let mut data = vec![0.0; 3 * ch * cw];
    let mut labels = vec![IGNORE; ch * cw];
    for y in 0..ch.min(sh - oy) {
        for x in 0..cw.min(sw - ox) {
            let (yy, xx) = (y + oy, x + ox);
            for k in 0..3 {
                // Lerp can overshoot [0, 1] by an ulp.
                data[(k * ch + y) * cw + x] = scaled[k * dst_plane + yy * sw + xx].clamp(0.0, 1.0);
            }
            if let Some(l) = &sample.label {
                labels[y * cw + x] = l.get(nearest_index(yy, h, sh), nearest_index(xx, w, sw));
            }
        }
    }
    let image = Image::new(ch, cw, data).expect("values clamped to [0, 1]");
    let label = sample
        .label
        .as_ref()
        .map(|l| LabelMap::new(ch, cw, l.classes(), labels).expect("labels come from the source"));
    Sample {
        id: sample.id.clone(),
        image,
        label,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BatchTag {
    Labeled,
    Unlabeled,
}

impl BatchTag {
    pub fn as_str(self) -> &'static str {
        match self {
            BatchTag::Labeled => "L",
            BatchTag::Unlabeled => "U",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub tag: BatchTag,
    pub indices: Vec<usize>,
}

/// Endless reshuffled pass over one pool.
#[derive(Debug, Clone)]
struct Cycler {
    pool: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cycler {
    fn new(pool: &[usize], seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            pool: pool.to_vec(),
            order: Vec::new(),
            pos: 0,
            rng,
        }
    }

    fn take(&mut self, n: usize) -> Vec<usize> {
        (0..n)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order = self.pool.clone();
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Deterministic, endless batch stream over a split. Iterating alternates
/// labeled and unlabeled batches (labeled first) while both pools are
/// non-empty; the pools are drawn independently, so a labeled-only prefix
/// taken with [`BatchStream::next_labeled`] does not disturb the unlabeled
/// order.
#[derive(Debug, Clone)]
pub struct BatchStream {
    batch_size: usize,
    labeled: Option<Cycler>,
    unlabeled: Option<Cycler>,
    next_tag: BatchTag,
}

pub fn interleave_batches(split: &DatasetSplit, batch_size: usize, seed: u64) -> Result<BatchStream> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    if split.labeled.is_empty() && split.unlabeled.is_empty() {
        return Err(Error::InvalidInput("both pools are empty".into()));
    }
    let cycler = |pool: &[usize], stream| (!pool.is_empty()).then(|| Cycler::new(pool, seed, stream));
    Ok(BatchStream {
        batch_size,
        labeled: cycler(&split.labeled, 1),
        unlabeled: cycler(&split.unlabeled, 2),
        next_tag: BatchTag::Labeled,
    })
}

impl BatchStream {
    pub fn next_labeled(&mut self) -> Option<Batch> {
        let n = self.batch_size;
        self.labeled.as_mut().map(|c| Batch {
            tag: BatchTag::Labeled,
            indices: c.take(n),
        })
    }

    pub fn next_unlabeled(&mut self) -> Option<Batch> {
        let n = self.batch_size;
        self.unlabeled.as_mut().map(|c| Batch {
            tag: BatchTag::Unlabeled,
            indices: c.take(n),
        })
    }

    pub fn has_unlabeled(&self) -> bool {
        self.unlabeled.is_some()
    }
}

impl Iterator for BatchStream {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let batch = match self.next_tag {
            BatchTag::Labeled => self.next_labeled().or_else(|| self.next_unlabeled()),
            BatchTag::Unlabeled => self.next_unlabeled().or_else(|| self.next_labeled()),
        }?;
        self.next_tag = match batch.tag {
            BatchTag::Labeled => BatchTag::Unlabeled,
            BatchTag::Unlabeled => BatchTag::Labeled,
        };
        Some(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny(n: usize) -> Dataset {
        generate_shapes_dataset(n, 16, 16, 4, 3).unwrap()
    }

    #[test]
    fn generation_examples() {
        assert!(generate_shapes_dataset(0, 64, 64, 4, 1).unwrap().is_empty());
        assert_eq!(generate_shapes_dataset(4, 32, 32, 4, 7).unwrap(), generate_shapes_dataset(4, 32, 32, 4, 7).unwrap());
        assert_ne!(generate_shapes_dataset(2, 32, 32, 4, 7).unwrap(), generate_shapes_dataset(2, 32, 32, 4, 8).unwrap());
        assert!(matches!(generate_shapes_dataset(1, 8, 8, 1, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn background_share_and_label_range() {
        let ds = generate_shapes_dataset(100, 64, 64, 4, 11).unwrap();
        let mut shapes_seen = [false; 4];
        for s in &ds.samples {
            let l = s.label.as_ref().unwrap();
            let bg = l.labels().iter().filter(|&&v| v == 0).count();
            assert!(bg as f64 >= 0.3 * (64 * 64) as f64, "{}", s.id);
            for &v in l.labels() {
                assert!(v < 4);
                shapes_seen[v as usize] = true;
            }
        }
        assert_eq!(shapes_seen, [true; 4]);
    }

    #[test]
    fn shape_kinds_cycle_over_classes() {
        assert_eq!(ShapeKind::of_class(1), ShapeKind::Disk);
        assert_eq!(ShapeKind::of_class(2), ShapeKind::Square);
        assert_eq!(ShapeKind::of_class(3), ShapeKind::Triangle);
        assert_eq!(ShapeKind::of_class(4), ShapeKind::Disk);
    }

    #[test]
    fn triangle_area_matches_rasterization() {
        let t = Shape {
            kind: ShapeKind::Triangle,
            cy: 0.0,
            cx: 0.0,
            size: 40.0,
            angle: 0.3,
        };
        let mut inside = 0usize;
        for y in -50..50 {
            for x in -50..50 {
                inside += t.contains(y as f64 + 0.5, x as f64 + 0.5) as usize;
            }
        }
        assert!((inside as f64 / t.area() - 1.0).abs() < 0.02);
    }

    #[test]
    fn folder_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny(3);
        save_folder_dataset(&ds, dir.path(), Some(3)).unwrap();
        assert_eq!(load_folder_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn folder_with_missing_label_and_bad_label() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny(2);
        save_folder_dataset(&ds, dir.path(), None).unwrap();
        fs::remove_file(dir.path().join("labels/00001.png")).unwrap();
        let loaded = load_folder_dataset(dir.path()).unwrap();
        assert!(loaded.samples[0].label.is_some() && loaded.samples[1].label.is_none());

        let small = LabelMap::new(4, 4, 4, vec![0; 16]).unwrap();
        let p = dir.path().join("labels/00001.png");
        fs::write(&p, encode(4, 4, image::ExtendedColorType::L8, small.labels(), &p).unwrap()).unwrap();
        match load_folder_dataset(dir.path()) {
            Err(Error::Ingestion { stem, .. }) => assert_eq!(stem, "00001"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn split_examples() {
        let ds = tiny(16);
        let s = split_labeled(&ds, 0.125, 5).unwrap();
        assert_eq!((s.labeled.len(), s.unlabeled.len()), (2, 14));
        assert_eq!(s, split_labeled(&ds, 0.125, 5).unwrap());
        let ds10 = tiny(10);
        assert_eq!(split_labeled(&ds10, 0.125, 5).unwrap().labeled.len(), 1);
        let full = split_labeled(&ds10, 1.0, 5).unwrap();
        assert!(full.unlabeled.is_empty());
        let empty = Dataset { classes: 4, samples: vec![] };
        assert!(matches!(split_labeled(&empty, 0.5, 0), Err(Error::InvalidInput(_))));
    }

    proptest! {
        #[test]
        fn split_partitions(n in 1usize..40, f in 0.01f64..=1.0, seed in any::<u64>()) {
            let ds = Dataset { classes: 2, samples: tiny(1).samples.into_iter().cycle().take(n).collect() };
            let s = split_labeled(&ds, f, seed).unwrap();
            prop_assert_eq!(s.labeled.len(), labeled_count(n, f));
            prop_assert_eq!(s.labeled.len() + s.unlabeled.len(), n);
            let mut all: Vec<usize> = s.labeled.iter().chain(&s.unlabeled).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn augmented_labels_come_from_source(seed in any::<u64>(), crop in 8usize..40) {
            let s = &tiny(1).samples[0];
            let cfg = AugmentConfig { crop_h: crop, crop_w: crop, ..Default::default() };
            let out = augment(s, &cfg, seed);
            let src = s.label.as_ref().unwrap().labels();
            for &v in out.label.as_ref().unwrap().labels() {
                prop_assert!(v == IGNORE || src.contains(&v));
            }
        }
    }

    #[test]
    fn augment_examples() {
        let s = &tiny(1).samples[0];
        let id = AugmentConfig {
            crop_h: 16,
            crop_w: 16,
            enable_scale: false,
            ..Default::default()
        };
        assert_eq!(&augment(s, &id, 9), s);

        let small = Sample::new("x", Image::zeros(10, 10), Some(LabelMap::new(10, 10, 2, vec![1; 100]).unwrap())).unwrap();
        let pad = AugmentConfig {
            crop_h: 20,
            crop_w: 20,
            enable_scale: false,
            ..Default::default()
        };
        let out = augment(&small, &pad, 1);
        let l = out.label.unwrap();
        assert_eq!((l.height(), l.width()), (20, 20));
        assert_eq!(l.get(5, 5), 1);
        assert_eq!(l.get(15, 5), IGNORE);
        assert_eq!(l.get(5, 15), IGNORE);

        let cfg = AugmentConfig {
            crop_h: 12,
            crop_w: 12,
            ..Default::default()
        };
        assert_eq!(augment(s, &cfg, 4), augment(s, &cfg, 4));
    }

    #[test]
    fn stream_examples() {
        let split = DatasetSplit {
            labeled: vec![0, 1, 2],
            unlabeled: vec![],
            fraction: 1.0,
            seed: 0,
        };
        let tags: Vec<_> = interleave_batches(&split, 2, 1).unwrap().take(5).map(|b| b.tag).collect();
        assert!(tags.iter().all(|&t| t == BatchTag::Labeled));

        let split = DatasetSplit {
            labeled: vec![0, 1],
            unlabeled: vec![2, 3, 4],
            fraction: 0.4,
            seed: 0,
        };
        let batches: Vec<_> = interleave_batches(&split, 2, 1).unwrap().take(6).collect();
        for (i, b) in batches.iter().enumerate() {
            assert_eq!(b.tag, if i % 2 == 0 { BatchTag::Labeled } else { BatchTag::Unlabeled });
            let pool = if i % 2 == 0 { &split.labeled } else { &split.unlabeled };
            assert!(b.indices.iter().all(|i| pool.contains(i)));
        }
        let again: Vec<_> = interleave_batches(&split, 2, 1).unwrap().take(6).collect();
        assert_eq!(batches, again);

        // Each epoch is a permutation of the pool.
        let mut s = interleave_batches(&split, 3, 7).unwrap();
        let mut epoch = s.next_unlabeled().unwrap().indices;
        epoch.sort_unstable();
        assert_eq!(epoch, vec![2, 3, 4]);

        let empty = DatasetSplit {
            labeled: vec![],
            unlabeled: vec![],
            fraction: 1.0,
            seed: 0,
        };
        assert!(interleave_batches(&empty, 2, 0).is_err());
        assert!(interleave_batches(&split, 0, 0).is_err());
    }
}
