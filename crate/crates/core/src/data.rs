//! Semantic map types shared by every stage of the pipeline, and the
//! encoding, thresholding and resizing primitives on them.
//!
//! All multi-channel maps are stored channel-major (`[c][row][col]`).

use crate::error::{Error, Result};
use crate::resample::Resampler;

/// Label value excluded from every loss and metric.
pub const IGNORE: u8 = 255;

/// Lower clamp applied to every logarithm argument.
pub const LOG_EPS: f64 = 1e-8;

/// Tolerance for per-pixel probability sums.
pub const NORM_TOL: f64 = 1e-5;

/// RGB image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidValue("image must be at least 1x1".into()));
        }
        if data.len() != 3 * height * width {
            return Err(Error::ShapeMismatch(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                3 * height * width
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidValue(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Channel-major pixel buffer.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Per-pixel class indices, with [`IGNORE`] marking unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    classes: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, classes: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "label buffer has {} values, expected {}",
                labels.len(),
                height * width
            )));
        }
        if classes == 0 || classes > IGNORE as usize {
            return Err(Error::InvalidConfig(format!("class count {classes} out of range")));
        }
        if let Some(i) = labels.iter().position(|&v| v != IGNORE && v as usize >= classes) {
            return Err(Error::InvalidLabel {
                value: labels[i],
                row: i / width,
                col: i % width,
                classes,
            });
        }
        Ok(Self {
            height,
            width,
            classes,
            labels,
        })
    }

    /// Builds a map from rows, e.g. `[[0, 1], [2, 255]]`.
    pub fn from_rows(rows: &[&[u8]], classes: usize) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::ShapeMismatch("ragged label rows".into()));
        }
        Self::new(height, width, classes, rows.concat())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn with_classes(self, classes: usize) -> Result<Self> {
        Self::new(self.height, self.width, classes, self.labels)
    }
}

macro_rules! map_accessors {
    () => {
        pub fn channels(&self) -> usize {
            self.channels
        }

        pub fn height(&self) -> usize {
            self.height
        }

        pub fn width(&self) -> usize {
            self.width
        }

        /// Channel-major buffer.
        pub fn data(&self) -> &[f64] {
            &self.data
        }

        pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
            self.data[(c * self.height + y) * self.width + x]
        }

        /// Channel vector of one pixel.
        pub fn pixel(&self, y: usize, x: usize) -> Vec<f64> {
            let p = self.height * self.width;
            let i = y * self.width + x;
            (0..self.channels).map(|c| self.data[c * p + i]).collect()
        }
    };
}

/// Multi-channel per-pixel map accepted by the discriminator: either a
/// prediction or a one-hot ground truth.
pub trait ClassMap {
    fn channels(&self) -> usize;
    fn height(&self) -> usize;
    fn width(&self) -> usize;
    /// Channel-major buffer.
    fn data(&self) -> &[f64];
}

macro_rules! class_map {
    ($t:ty) => {
        impl ClassMap for $t {
            fn channels(&self) -> usize {
                self.channels
            }
            fn height(&self) -> usize {
                self.height
            }
            fn width(&self) -> usize {
                self.width
            }
            fn data(&self) -> &[f64] {
                &self.data
            }
        }
    };
}

class_map!(ProbabilityMap);
class_map!(OneHotMap);

/// Per-pixel class distribution, the segmentation network's output.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_len(data.len(), channels, height, width)?;
        let map = Self {
            channels,
            height,
            width,
            data,
        };
        map.validate()?;
        Ok(map)
    }

    /// Builds a map from per-pixel distributions given row-major.
    pub fn from_pixels(height: usize, width: usize, pixels: &[&[f64]]) -> Result<Self> {
        let channels = pixels.first().map_or(0, |p| p.len());
        if pixels.len() != height * width || pixels.iter().any(|p| p.len() != channels) {
            return Err(Error::ShapeMismatch("pixel list does not match map size".into()));
        }
        let plane = height * width;
        let mut data = vec![0.0; channels * plane];
        for (i, px) in pixels.iter().enumerate() {
            for (c, &v) in px.iter().enumerate() {
                data[c * plane + i] = v;
            }
        }
        Self::new(channels, height, width, data)
    }

    pub(crate) fn from_raw(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    map_accessors!();

    /// Checks the range and normalization invariants.
    pub fn validate(&self) -> Result<()> {
        let plane = self.height * self.width;
        for i in 0..plane {
            let mut sum = 0.0;
            for c in 0..self.channels {
                let v = self.data[c * plane + i];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidValue(format!("probability {v} outside [0, 1]")));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > NORM_TOL {
                return Err(Error::InvalidValue(format!(
                    "pixel {i} sums to {sum}, not 1"
                )));
            }
        }
        Ok(())
    }

    pub fn resized(&self, height: usize, width: usize) -> Self {
        let data = resize_planes(&self.data, self.channels, self.height, self.width, height, width);
        Self::from_raw(self.channels, height, width, data)
    }
}

/// C-channel one-hot encoding; ignored pixels are all-zero.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl OneHotMap {
    map_accessors!();

    /// Whether the pixel carries a label (exactly one channel set).
    pub fn is_labeled(&self, y: usize, x: usize) -> bool {
        let p = self.height * self.width;
        let i = y * self.width + x;
        (0..self.channels).any(|c| self.data[c * p + i] == 1.0)
    }

    /// Views the encoding as a distribution. Ignored pixels are rejected.
    pub fn to_probabilities(&self) -> Result<ProbabilityMap> {
        ProbabilityMap::new(self.channels, self.height, self.width, self.data.clone())
    }

    /// Raw channel data as a probability-shaped map; ignored pixels stay
    /// all-zero. Used as discriminator input for ground truth.
    pub(crate) fn as_raw_map(&self) -> ProbabilityMap {
        ProbabilityMap::from_raw(self.channels, self.height, self.width, self.data.clone())
    }
}

/// Per-pixel real/fake probability from the discriminator, in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ConfidenceMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_len(data.len(), 1, height, width)?;
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidValue(format!("confidence {v} outside [0, 1]")));
        }
        Ok(Self {
            channels: 1,
            height,
            width,
            data,
        })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::ShapeMismatch("ragged confidence rows".into()));
        }
        Self::new(height, width, rows.concat())
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Self {
        Self {
            channels: 1,
            height,
            width,
            data,
        }
    }

    map_accessors!();

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn resized(&self, height: usize, width: usize) -> Self {
        let data = resize_planes(&self.data, 1, self.height, self.width, height, width);
        Self::from_raw(height, width, data)
    }
}

/// Pixel selection mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        check_len(bits.len(), 1, height, width)?;
        Ok(Self { height, width, bits })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    /// Pixels whose label is not [`IGNORE`].
    pub fn labeled(labels: &LabelMap) -> Self {
        Self {
            height: labels.height,
            width: labels.width,
            bits: labels.labels.iter().map(|&l| l != IGNORE).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Mask as 0/1 rows.
    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        self.bits
            .chunks(self.width)
            .map(|r| r.iter().map(|&b| b as u8).collect())
            .collect()
    }
}

fn check_len(len: usize, channels: usize, height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidValue("map must be at least 1x1".into()));
    }
    if len != channels * height * width {
        return Err(Error::ShapeMismatch(format!(
            "buffer has {len} values, expected {channels}x{height}x{width}"
        )));
    }
    Ok(())
}

fn resize_planes(data: &[f64], channels: usize, h: usize, w: usize, nh: usize, nw: usize) -> Vec<f64> {
    assert!(nh >= 1 && nw >= 1, "resize target must be at least 1x1");
    if h == nh && w == nw {
        return data.to_vec();
    }
    let r = Resampler::new(h, w, nh, nw);
    let mut out = vec![0.0; channels * nh * nw];
    for c in 0..channels {
        r.forward_plane(&data[c * h * w..(c + 1) * h * w], &mut out[c * nh * nw..(c + 1) * nh * nw]);
    }
    out
}

/// Encodes labels as one-hot channels; [`IGNORE`] pixels become all-zero.
pub fn one_hot_encode(labels: &LabelMap, classes: usize) -> Result<OneHotMap> {
    let plane = labels.height * labels.width;
    let mut data = vec![0.0; classes * plane];
    for (i, &l) in labels.labels.iter().enumerate() {
        if l == IGNORE {
            continue;
        }
        if l as usize >= classes {
            return Err(Error::InvalidLabel {
                value: l,
                row: i / labels.width,
                col: i % labels.width,
                classes,
            });
        }
        data[l as usize * plane + i] = 1.0;
    }
    Ok(OneHotMap {
        channels: classes,
        height: labels.height,
        width: labels.width,
        data,
    })
}

/// Per-pixel argmax; ties go to the smallest class index.
pub fn argmax_labels(prob: &ProbabilityMap) -> LabelMap {
    let plane = prob.height * prob.width;
    let labels = (0..plane)
        .map(|i| {
            let mut best = 0;
            let mut best_v = prob.data[i];
            for c in 1..prob.channels {
                let v = prob.data[c * plane + i];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            best as u8
        })
        .collect();
    LabelMap {
        height: prob.height,
        width: prob.width,
        classes: prob.channels,
        labels,
    }
}

/// `mask = conf > threshold`, strictly.
pub fn threshold_mask(conf: &ConfidenceMap, threshold: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidThreshold(threshold));
    }
    Ok(BinaryMask {
        height: conf.height,
        width: conf.width,
        bits: conf.data.iter().map(|&v| v > threshold).collect(),
    })
}

/// Maps that can be bilinearly resized.
pub trait Resizable: Sized {
    fn resized_to(&self, height: usize, width: usize) -> Self;
}

impl Resizable for ProbabilityMap {
    fn resized_to(&self, height: usize, width: usize) -> Self {
        self.resized(height, width)
    }
}

impl Resizable for ConfidenceMap {
    fn resized_to(&self, height: usize, width: usize) -> Self {
        self.resized(height, width)
    }
}

/// Corner-aligned bilinear resize. Interpolating normalized distributions
/// keeps them normalized up to rounding, so probability maps stay valid.
pub fn bilinear_resize<M: Resizable>(map: &M, height: usize, width: usize) -> Result<M> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidValue("resize target must be at least 1x1".into()));
    }
    Ok(map.resized_to(height, width))
}
