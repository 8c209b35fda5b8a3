//! Metrics, selected-pixel analysis, PNG export, and gradient checking.

use std::path::Path;

use serde::Serialize;

use crate::data::{argmax_labels, ConfidenceMap, LabelMap, IGNORE};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::networks::SegNet;
use crate::real::Real;

/// Confusion matrix of a network's argmax predictions over labeled
/// samples; unlabeled samples are skipped.
pub fn evaluate_segmentation<T: Real>(net: &SegNet<T>, samples: &[Sample]) -> Result<ConfusionMatrix> {
    let classes = net.config.classes;
    let mut total = ConfusionMatrix::new(classes);
    for s in samples {
        if let Some(gt) = &s.label {
            let pred = argmax_labels(&net.predict(&s.image)?);
            total.add(&confusion(&pred, gt, classes)?)?;
        }
    }
    Ok(total)
}

/// Pixel tallies indexed `[ground truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::ShapeMismatch(format!(
                "confusion matrices over {} and {} classes",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

pub fn confusion(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Result<ConfusionMatrix> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut m = ConfusionMatrix::new(classes);
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        if g == IGNORE {
            continue;
        }
        let (g, p) = (g as usize, p as usize);
        if g >= classes || p >= classes {
            return Err(Error::InvalidValue(format!("label outside {classes} classes")));
        }
        m.counts[g * classes + p] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl IouReport {
    /// `class,iou` rows followed by `mean,<value>`; absent classes are blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,iou\n");
        for (c, iou) in self.per_class.iter().enumerate() {
            match iou {
                Some(v) => out.push_str(&format!("{c},{v}\n")),
                None => out.push_str(&format!("{c},\n")),
            }
        }
        out.push_str(&format!("mean,{}\n", self.mean));
        out
    }
}

pub fn mean_iou(m: &ConfusionMatrix) -> Result<IouReport> {
    let c = m.classes;
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let tp = m.get(k, k);
            let row: u64 = (0..c).map(|j| m.get(k, j)).sum();
            let col: u64 = (0..c).map(|j| m.get(j, k)).sum();
            let union = row + col - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::UndefinedMetric("every class has an empty union".into()));
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok(IouReport { per_class, mean })
}

/// Raw tallies behind one selected-pixel row; sums across images.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SelectedCounts {
    pub valid: u64,
    pub selected: u64,
    pub correct: u64,
}

impl SelectedCounts {
    pub fn add(&mut self, other: SelectedCounts) {
        self.valid += other.valid;
        self.selected += other.selected;
        self.correct += other.correct;
    }

    pub fn row(&self, t_semi: f64) -> SelectedPixelRow {
        SelectedPixelRow {
            t_semi,
            fraction_selected: if self.valid == 0 {
                0.0
            } else {
                self.selected as f64 / self.valid as f64
            },
            accuracy: (self.selected > 0).then(|| self.correct as f64 / self.selected as f64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SelectedPixelRow {
    pub t_semi: f64,
    pub fraction_selected: f64,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SelectedPixelReport {
    pub rows: Vec<SelectedPixelRow>,
}

impl SelectedPixelReport {
    /// CSV with columns `t_semi,selected_pct,accuracy`; percentages in
    /// `[0, 100]`, empty accuracy when nothing was selected.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t_semi,selected_pct,accuracy\n");
        for r in &self.rows {
            let acc = r.accuracy.map(|a| a.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", r.t_semi, 100.0 * r.fraction_selected, acc));
        }
        out
    }

    pub fn is_fraction_monotone(&self) -> bool {
        let mut rows = self.rows.clone();
        rows.sort_by(|a, b| a.t_semi.total_cmp(&b.t_semi));
        rows.windows(2).all(|w| w[1].fraction_selected <= w[0].fraction_selected)
    }
}

pub fn selected_pixel_counts(conf: &ConfidenceMap, pred: &LabelMap, gt: &LabelMap, t: f64) -> Result<SelectedCounts> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidThreshold(t));
    }
    let (h, w) = (gt.height(), gt.width());
    if pred.height() != h || pred.width() != w || conf.height() != h || conf.width() != w {
        return Err(Error::ShapeMismatch("confidence, prediction and ground truth differ in size".into()));
    }
    let mut counts = SelectedCounts::default();
    for ((&d, &p), &g) in conf.data().iter().zip(pred.labels()).zip(gt.labels()) {
        if g == IGNORE {
            continue;
        }
        counts.valid += 1;
        if d > t {
            counts.selected += 1;
            counts.correct += (p == g) as u64;
        }
    }
    Ok(counts)
}

pub fn selected_pixel_stats(conf: &ConfidenceMap, pred: &LabelMap, gt: &LabelMap, t: f64) -> Result<SelectedPixelRow> {
    Ok(selected_pixel_counts(conf, pred, gt, t)?.row(t))
}

/// Gray level of a confidence value: `round(255 p)` with halves rounded up.
pub fn confidence_to_gray(p: f64) -> u8 {
    (255.0 * p.clamp(0.0, 1.0) + 0.5).floor() as u8
}

/// Prediction palette: class `k` takes the color built from the bits of `k`
/// spread over the high bits of each channel (the usual VOC color map).
/// Index 255 (ignore) is white.
pub fn palette() -> [[u8; 3]; 256] {
    let mut pal = [[0u8; 3]; 256];
    for (k, entry) in pal.iter_mut().enumerate() {
        let mut id = k;
        let mut rgb = [0u8; 3];
        for j in 0..8 {
            for (ch, v) in rgb.iter_mut().enumerate() {
                *v |= (((id >> ch) & 1) as u8) << (7 - j);
            }
            id >>= 3;
        }
        *entry = rgb;
    }
    pal[IGNORE as usize] = [255, 255, 255];
    pal
}

fn encode_png(width: usize, height: usize, color: png::ColorType, palette: Option<Vec<u8>>, pixels: &[u8]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        if let Some(p) = palette {
            enc.set_palette(p);
        }
        let to_err = |e: png::EncodingError| Error::InvalidValue(format!("png encoding failed: {e}"));
        let mut writer = enc.write_header().map_err(to_err)?;
        writer.write_image_data(pixels).map_err(to_err)?;
    }
    Ok(buf)
}

pub fn export_confidence_png(conf: &ConfidenceMap, path: &Path) -> Result<()> {
    let gray: Vec<u8> = conf.data().iter().map(|&p| confidence_to_gray(p)).collect();
    let bytes = encode_png(conf.width(), conf.height(), png::ColorType::Grayscale, None, &gray)?;
    write_atomic(path, &bytes)
}

/// Writes an indexed-color PNG whose pixel indices are the class labels.
pub fn export_prediction_png(labels: &LabelMap, palette: &[[u8; 3]; 256], path: &Path) -> Result<()> {
    let plte = palette.iter().flatten().copied().collect();
    let bytes = encode_png(labels.width(), labels.height(), png::ColorType::Indexed, Some(plte), labels.labels())?;
    write_atomic(path, &bytes)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Flat index of the worst parameter, `None` when there are no parameters.
    pub worst: Option<usize>,
    /// Analytic and finite-difference values at `worst`.
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error `|a - b| / max(|a|, |b|, 1e-12)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Compares `analytic` against central differences of `loss` at `params`.
pub fn grad_check<F>(mut loss: F, params: &[f64], analytic: &[f64], step: f64) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters but {} gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    let mut theta = params.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + step;
        let up = loss(&theta)?;
        theta[i] = orig - step;
        let down = loss(&theta)?;
        theta[i] = orig;
        for v in [up, down] {
            if !v.is_finite() {
                return Err(Error::NonFinite(v));
            }
        }
        let fd = (up - down) / (2.0 * step);
        let err = relative_error(fd, analytic[i]);
        if report.worst.is_none() || err > report.max_rel_error {
            report = GradCheck {
                max_rel_error: err,
                worst: Some(i),
                analytic: analytic[i],
                numeric: fd,
            };
        }
    }
    Ok(report)
}
