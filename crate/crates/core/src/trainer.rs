//! Alternating optimization of the segmentation network and the
//! discriminator over interleaved labeled and unlabeled batches.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, ArchiveKind};
use crate::data::{one_hot_encode, BinaryMask, ClassMap, ConfidenceMap, Image, LabelMap};
use crate::dataset::{augment, interleave_batches, AugmentConfig, BatchStream, BatchTag, Dataset, DatasetSplit, Sample};
use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::losses::{
    loss_adv, loss_adv_grad, loss_ce, loss_ce_grad, loss_discriminator, loss_discriminator_grad, loss_semi,
    loss_semi_grad, DiscriminatorTarget, HyperParams,
};
use crate::networks::{DiscGrads, DiscNet, DiscNetConfig, DiscPass, GlobalDiscPass, MapGrad, NetParams, Param, SegNet, SegNetConfig, MIN_DISC_INPUT};
use crate::optim::{poly_lr, Adam, AdamConstants, Sgd};
use crate::real::{DType, Real};

/// Everything that defines a training run. Missing top-level keys in a
/// config file take the desk-scale defaults; a section that is present must
/// be complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_iterations: usize,
    pub warm_up_iterations: usize,
    pub batch_size: usize,
    pub seg_lr0: f64,
    pub disc_lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub adam: AdamConstants,
    pub hp: HyperParams,
    pub seed: u64,
    /// Checkpoint period in iterations; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub deterministic: bool,
    pub precision: DType,
    pub seg: SegNetConfig,
    pub disc: DiscNetConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            warm_up_iterations: 500,
            batch_size: 8,
            seg_lr0: 6e-2,
            disc_lr0: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            adam: AdamConstants::default(),
            hp: HyperParams::default(),
            seed: 0,
            checkpoint_every: 500,
            deterministic: true,
            precision: DType::F32,
            seg: SegNetConfig::default(),
            disc: DiscNetConfig {
                channels: vec![16, 32, 64, 128, 1],
                ..DiscNetConfig::default()
            },
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Sets the class count of both networks.
    pub fn with_classes(mut self, classes: usize) -> Self {
        self.seg.classes = classes;
        self.disc.classes = classes;
        self
    }

    /// The discriminator takes part in training when any loss weight is positive.
    pub fn disc_active(&self) -> bool {
        let hp = &self.hp;
        hp.lambda_adv_labeled > 0.0 || hp.lambda_adv_unlabeled > 0.0 || hp.lambda_semi > 0.0
    }

    /// Unlabeled batches have a non-zero objective.
    pub fn uses_unlabeled(&self) -> bool {
        self.hp.lambda_adv_unlabeled > 0.0 || self.hp.lambda_semi > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.max_iterations == 0 {
            return bad("max_iterations must be positive".into());
        }
        if self.warm_up_iterations > self.max_iterations {
            return bad(format!(
                "warm_up_iterations {} exceeds max_iterations {}",
                self.warm_up_iterations, self.max_iterations
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for (name, v) in [
            ("seg_lr0", self.seg_lr0),
            ("disc_lr0", self.disc_lr0),
            ("weight_decay", self.weight_decay),
            ("poly_power", self.poly_power),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam constants need betas in [0, 1) and a positive eps".into());
        }
        self.hp.validate()?;
        self.seg.validate()?;
        self.disc.validate()?;
        self.augment.validate()?;
        if self.seg.classes != self.disc.classes {
            return bad(format!(
                "segmentation net has {} classes, discriminator {}",
                self.seg.classes, self.disc.classes
            ));
        }
        if self.disc_active() {
            let crop = [self.augment.crop_h, self.augment.crop_w];
            if self.disc.fully_convolutional && crop.iter().any(|&c| c < MIN_DISC_INPUT) {
                return bad(format!("crop must be at least {MIN_DISC_INPUT} for the discriminator"));
            }
            if !self.disc.fully_convolutional && self.disc.input_size != Some(crop) {
                return bad("global discriminator input_size must equal the crop size".into());
            }
        }
        Ok(())
    }
}

/// One training iteration as it appears in the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub tag: BatchTag,
    pub l_ce: Option<f64>,
    pub l_adv: Option<f64>,
    pub l_semi: Option<f64>,
    pub l_d: Option<f64>,
    pub lr_seg: f64,
    pub lr_disc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

pub const LOG_HEADER: &str = "iter,tag,l_ce,l_adv,l_semi,l_d,lr_seg,lr_disc";

impl TrainLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Appends a record; iterations must arrive in order starting at 1.
    pub fn push(&mut self, record: LogRecord) -> Result<()> {
        if record.iter != self.records.len() + 1 {
            return Err(Error::Contract(format!(
                "log record for iteration {} after {}",
                record.iter,
                self.records.len()
            )));
        }
        self.records.push(record);
        Ok(())
    }

    /// CSV with empty cells for terms not computed in an iteration. Values
    /// use the shortest representation that parses back to the same number.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.iter,
                r.tag.as_str(),
                opt(r.l_ce),
                opt(r.l_adv),
                opt(r.l_semi),
                opt(r.l_d),
                r.lr_seg,
                r.lr_disc
            ));
        }
        out
    }
}

/// Discriminator forward state for either variant, with per-pixel
/// confidence maps. The global variant's score is broadcast over the map so
/// the same losses apply to both.
enum DiscEval<T> {
    Map(DiscPass<T>),
    Global(GlobalDiscPass<T>),
}

struct Scored<T> {
    eval: DiscEval<T>,
    conf: Vec<ConfidenceMap>,
}

impl<T: Real> Scored<T> {
    fn forward<M: ClassMap>(disc: &DiscNet<T>, maps: &[M]) -> Result<Self> {
        let refs: Vec<&M> = maps.iter().collect();
        if disc.config.fully_convolutional {
            let pass = disc.forward(&refs)?;
            let conf = pass.conf.clone();
            Ok(Self {
                eval: DiscEval::Map(pass),
                conf,
            })
        } else {
            let pass = disc.forward_global(&refs)?;
            let conf = maps
                .iter()
                .zip(&pass.scores)
                .map(|(m, &s)| ConfidenceMap::constant(m.height(), m.width(), s))
                .collect::<Result<_>>()?;
            Ok(Self {
                eval: DiscEval::Global(pass),
                conf,
            })
        }
    }

    fn backward(&self, disc: &DiscNet<T>, grads: &[MapGrad], param_grads: bool, input_grads: bool) -> DiscGrads<T> {
        match &self.eval {
            DiscEval::Map(pass) => disc.backward(pass, grads, param_grads, input_grads),
            DiscEval::Global(pass) => {
                let g: Vec<f64> = grads.iter().map(|g| g.iter().sum()).collect();
                disc.backward_global(pass, &g, param_grads, input_grads)
            }
        }
    }
}

fn scaled(mut g: MapGrad, alpha: f64) -> MapGrad {
    g.iter_mut().for_each(|v| *v *= alpha);
    g
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(v))
    }
}

/// SplitMix64 finalizer folded over the parts.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243F_6A88_85A3_08D3u64, |acc, &p| {
        let mut z = (acc ^ p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

/// Serialized trainer bookkeeping stored next to the optimizer buffers.
#[derive(Serialize, Deserialize)]
struct StateMeta {
    iter: usize,
    adam_steps: Option<u64>,
    config: TrainConfig,
    log: TrainLog,
}

pub struct Trainer<T> {
    pub config: TrainConfig,
    pub seg: SegNet<T>,
    /// Present only when some loss weight is positive.
    pub disc: Option<DiscNet<T>>,
    pub sgd: Sgd<T>,
    pub adam: Option<Adam<T>>,
    pub log: TrainLog,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let seg = SegNet::new(config.seg.clone(), derive_seed(&[config.seed, 1]))?;
        let disc = if config.disc_active() {
            Some(DiscNet::new(config.disc.clone(), derive_seed(&[config.seed, 2]))?)
        } else {
            None
        };
        Ok(Self::assemble(config, seg, disc))
    }

    fn assemble(config: TrainConfig, seg: SegNet<T>, disc: Option<DiscNet<T>>) -> Self {
        let sgd = Sgd::new(&seg.params, config.momentum, config.weight_decay);
        let a = config.adam;
        let adam = disc.as_ref().map(|d| Adam::new(&d.params, a.beta1, a.beta2, a.eps));
        Self {
            config,
            seg,
            disc,
            sgd,
            adam,
            log: TrainLog::default(),
        }
    }

    /// Number of iterations already run.
    pub fn completed(&self) -> usize {
        self.log.len()
    }

    /// Learning rates of iteration `iter` (1-based): the schedule is
    /// evaluated at `iter - 1` so the first step uses the initial rate.
    pub fn learning_rates(&self, iter: usize) -> Result<(f64, f64)> {
        let c = &self.config;
        if iter == 0 || iter > c.max_iterations {
            return Err(Error::Schedule(format!("iteration {iter} outside [1, {}]", c.max_iterations)));
        }
        Ok((
            poly_lr(c.seg_lr0, iter - 1, c.max_iterations, c.poly_power)?,
            poly_lr(c.disc_lr0, iter - 1, c.max_iterations, c.poly_power)?,
        ))
    }

    /// One labeled iteration. S takes a step on cross entropy plus the
    /// weighted adversarial term with D fixed; D then takes a step on the
    /// prediction made before S moved and on the one-hot ground truth.
    pub fn step_labeled(&mut self, samples: &[Sample], iter: usize) -> Result<LogRecord> {
        let (lr_seg, lr_disc) = self.learning_rates(iter)?;
        if samples.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let labels: Vec<&LabelMap> = samples
            .iter()
            .map(|s| {
                s.label
                    .as_ref()
                    .ok_or_else(|| Error::Contract(format!("labeled step given unlabeled sample {}", s.id)))
            })
            .collect::<Result<_>>()?;
        let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
        let inv = 1.0 / samples.len() as f64;
        let classes = self.seg.config.classes;
        let lambda = self.config.hp.lambda_adv_labeled;

        let pass = self.seg.forward(&images)?;
        let onehots = labels.iter().map(|l| one_hot_encode(l, classes)).collect::<Result<Vec<_>>>()?;
        let mut ce = 0.0;
        let mut grads = Vec::with_capacity(samples.len());
        for (p, t) in pass.probs.iter().zip(&onehots) {
            ce += loss_ce(p, t)?.value;
            grads.push(scaled(loss_ce_grad(p, t)?, inv));
        }

        let mut l_adv = None;
        let mut pred_scores = None;
        if let Some(disc) = &self.disc {
            let scored = Scored::forward(disc, &pass.probs)?;
            if lambda > 0.0 {
                let mut sum = 0.0;
                let dconf: Vec<MapGrad> = scored
                    .conf
                    .iter()
                    .map(|c| {
                        sum += loss_adv(c).value;
                        scaled(loss_adv_grad(c), lambda * inv)
                    })
                    .collect();
                let dx = scored.backward(disc, &dconf, false, true).input.expect("input gradients requested");
                grads.iter_mut().zip(&dx).for_each(|(g, d)| add_into(g, d));
                l_adv = Some(finite(sum * inv)?);
            }
            pred_scores = Some(scored);
        }

        let seg_grads = self.seg.backward(&pass, &grads);
        self.sgd.step(&mut self.seg.params, &seg_grads, lr_seg);

        let mut l_d = None;
        if let (Some(disc), Some(adam), Some(pred)) = (&mut self.disc, &mut self.adam, pred_scores) {
            let gt = Scored::forward(disc, &onehots)?;
            let mut total = 0.0;
            let mut g_pred = Vec::with_capacity(samples.len());
            let mut g_gt = Vec::with_capacity(samples.len());
            for ((pc, gc), l) in pred.conf.iter().zip(&gt.conf).zip(&labels) {
                let mask = BinaryMask::labeled(l);
                let (fake, real) = (DiscriminatorTarget::Prediction, DiscriminatorTarget::GroundTruth);
                total += loss_discriminator(pc, fake, &mask)?.value + loss_discriminator(gc, real, &mask)?.value;
                g_pred.push(scaled(loss_discriminator_grad(pc, fake, &mask)?, inv));
                g_gt.push(scaled(loss_discriminator_grad(gc, real, &mask)?, inv));
            }
            let mut dgrad = pred.backward(disc, &g_pred, true, false).params.expect("parameter gradients requested");
            let gt_grad = gt.backward(disc, &g_gt, true, false).params.expect("parameter gradients requested");
            dgrad.add_scaled(&gt_grad, T::one());
            adam.step(&mut disc.params, &dgrad, lr_disc);
            l_d = Some(finite(total * inv)?);
        }

        Ok(LogRecord {
            iter,
            tag: BatchTag::Labeled,
            l_ce: Some(finite(ce * inv)?),
            l_adv,
            l_semi: None,
            l_d,
            lr_seg,
            lr_disc,
        })
    }

    /// One unlabeled iteration: S moves on the weighted adversarial and
    /// self-taught terms, D stays fixed. Labels on the samples are ignored.
    pub fn step_unlabeled(&mut self, samples: &[Sample], iter: usize) -> Result<LogRecord> {
        let (lr_seg, lr_disc) = self.learning_rates(iter)?;
        if iter <= self.config.warm_up_iterations {
            return Err(Error::Schedule(format!(
                "unlabeled batch at iteration {iter}, warm-up lasts {}",
                self.config.warm_up_iterations
            )));
        }
        if samples.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let mut record = LogRecord {
            iter,
            tag: BatchTag::Unlabeled,
            l_ce: None,
            l_adv: None,
            l_semi: None,
            l_d: None,
            lr_seg,
            lr_disc,
        };
        let hp = self.config.hp;
        if !self.config.uses_unlabeled() {
            return Ok(record);
        }
        let disc = self.disc.as_ref().expect("discriminator exists when a weight is positive");
        let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
        let inv = 1.0 / samples.len() as f64;

        let pass = self.seg.forward(&images)?;
        let scored = Scored::forward(disc, &pass.probs)?;
        let (mut adv, mut semi) = (0.0, 0.0);
        let mut grads: Vec<MapGrad> = pass.probs.iter().map(|p| vec![0.0; p.data().len()]).collect();
        let mut dconf = Vec::with_capacity(samples.len());
        for ((p, conf), g) in pass.probs.iter().zip(&scored.conf).zip(&mut grads) {
            if hp.lambda_adv_unlabeled > 0.0 {
                adv += loss_adv(conf).value;
                dconf.push(scaled(loss_adv_grad(conf), hp.lambda_adv_unlabeled * inv));
            }
            if hp.lambda_semi > 0.0 {
                semi += loss_semi(p, conf, hp.t_semi)?.value;
                add_into(g, &scaled(loss_semi_grad(p, conf, hp.t_semi)?, hp.lambda_semi * inv));
            }
        }
        if hp.lambda_adv_unlabeled > 0.0 {
            let dx = scored.backward(disc, &dconf, false, true).input.expect("input gradients requested");
            grads.iter_mut().zip(&dx).for_each(|(g, d)| add_into(g, d));
            record.l_adv = Some(finite(adv * inv)?);
        }
        if hp.lambda_semi > 0.0 {
            record.l_semi = Some(finite(semi * inv)?);
        }
        let seg_grads = self.seg.backward(&pass, &grads);
        self.sgd.step(&mut self.seg.params, &seg_grads, lr_seg);
        Ok(record)
    }

    /// Augmented copies of the batch samples; each position gets its own
    /// seed derived from the run seed and the iteration.
    pub fn batch_samples(&self, dataset: &Dataset, indices: &[usize], iter: usize) -> Vec<Sample> {
        indices
            .iter()
            .enumerate()
            .map(|(pos, &i)| {
                let seed = derive_seed(&[self.config.seed, 3, iter as u64, pos as u64]);
                augment(&dataset.samples[i], &self.config.augment, seed)
            })
            .collect()
    }

    fn next_batch(&self, stream: &mut BatchStream, iter: usize, unlabeled: bool) -> Vec<usize> {
        let batch = if iter <= self.config.warm_up_iterations || !unlabeled {
            stream.next_labeled()
        } else {
            stream.next()
        };
        batch.expect("labeled pool is non-empty").indices
    }

    /// Trains from the current iteration to `max_iterations`. Resumed
    /// trainers replay the batch stream up to where they stopped. With
    /// `checkpoint_root` set, checkpoints are written every
    /// `checkpoint_every` iterations and after the last one.
    pub fn run(&mut self, dataset: &Dataset, split: &DatasetSplit, checkpoint_root: Option<&Path>) -> Result<()> {
        if split.labeled.is_empty() {
            return Err(Error::InvalidInput("split has no labeled samples".into()));
        }
        if dataset.classes != self.config.seg.classes {
            return Err(Error::ConfigMismatch(format!(
                "dataset has {} classes, networks expect {}",
                dataset.classes, self.config.seg.classes
            )));
        }
        let mut stream = interleave_batches(split, self.config.batch_size, self.config.seed)?;
        let unlabeled = self.config.uses_unlabeled() && stream.has_unlabeled();
        for iter in 1..=self.completed() {
            self.next_batch(&mut stream, iter, unlabeled);
        }
        let (max, every) = (self.config.max_iterations, self.config.checkpoint_every);
        for iter in self.completed() + 1..=max {
            let indices = self.next_batch(&mut stream, iter, unlabeled);
            let is_labeled = split.labeled.binary_search(&indices[0]).is_ok();
            let samples = self.batch_samples(dataset, &indices, iter);
            let record = if is_labeled {
                self.step_labeled(&samples, iter)?
            } else {
                self.step_unlabeled(&samples, iter)?
            };
            self.log.push(record)?;
            if let Some(root) = checkpoint_root {
                if (every > 0 && iter % every == 0) || iter == max {
                    self.save_checkpoint(root)?;
                }
            }
        }
        Ok(())
    }

    /// Writes `root/iter_XXXXXX/{seg,disc,state}.bin` and returns the directory.
    pub fn save_checkpoint(&self, root: &Path) -> Result<PathBuf> {
        let dir = root.join(format!("iter_{:06}", self.completed()));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        checkpoint::save_seg(&self.seg, &dir.join("seg.bin"))?;
        if let Some(d) = &self.disc {
            checkpoint::save_disc(d, &dir.join("disc.bin"))?;
        }
        let meta = StateMeta {
            iter: self.completed(),
            adam_steps: self.adam.as_ref().map(|a| a.steps),
            config: self.config.clone(),
            log: self.log.clone(),
        };
        let mut arrays = renamed(&self.sgd.velocity, "sgd.velocity.");
        if let Some(a) = &self.adam {
            arrays.extend(renamed(&a.m, "adam.m."));
            arrays.extend(renamed(&a.v, "adam.v."));
        }
        let refs: Vec<&Param<T>> = arrays.iter().collect();
        let meta = serde_json::to_string(&meta).expect("state serializes");
        let bytes = checkpoint::encode(ArchiveKind::TrainerState, self.config.seed, &meta, &refs);
        write_atomic(&dir.join("state.bin"), &bytes)?;
        Ok(dir)
    }

    /// Restores a trainer from a checkpoint directory. With `expected` set,
    /// the stored run configuration must match it.
    pub fn resume(dir: &Path, expected: Option<&TrainConfig>) -> Result<Self> {
        let state_path = dir.join("state.bin");
        let archive = checkpoint::read_archive(&state_path)?;
        if archive.kind != ArchiveKind::TrainerState {
            return Err(Error::Checkpoint {
                path: state_path,
                reason: "not a trainer state file".into(),
            });
        }
        let meta: StateMeta = serde_json::from_str(&archive.meta).map_err(|e| Error::Checkpoint {
            path: state_path.clone(),
            reason: format!("bad state metadata: {e}"),
        })?;
        if let Some(want) = expected {
            if want != &meta.config {
                return Err(Error::ConfigMismatch("checkpoint was written by a different run configuration".into()));
            }
        }
        if meta.log.len() != meta.iter {
            return Err(Error::Checkpoint {
                path: state_path,
                reason: "log length disagrees with iteration".into(),
            });
        }
        let seg = checkpoint::load_seg(&dir.join("seg.bin"), Some(&meta.config.seg))?;
        let disc = if meta.config.disc_active() {
            Some(checkpoint::load_disc(&dir.join("disc.bin"), Some(&meta.config.disc))?)
        } else {
            None
        };
        let mut t = Self::assemble(meta.config, seg, disc);
        let missing = |name: &str| Error::Checkpoint {
            path: state_path.clone(),
            reason: format!("missing array {name}"),
        };
        restore(&mut t.sgd.velocity, &archive, "sgd.velocity.").map_err(|n| missing(&n))?;
        if let Some(a) = &mut t.adam {
            restore(&mut a.m, &archive, "adam.m.").map_err(|n| missing(&n))?;
            restore(&mut a.v, &archive, "adam.v.").map_err(|n| missing(&n))?;
            a.steps = meta.adam_steps.unwrap_or(0);
        }
        t.log = meta.log;
        Ok(t)
    }
}

fn renamed<T: Real>(params: &NetParams<T>, prefix: &str) -> Vec<Param<T>> {
    params
        .params
        .iter()
        .map(|p| Param {
            name: format!("{prefix}{}", p.name),
            ..p.clone()
        })
        .collect()
}

fn restore<T: Real>(into: &mut NetParams<T>, archive: &checkpoint::Archive, prefix: &str) -> std::result::Result<(), String> {
    for p in &mut into.params {
        let name = format!("{prefix}{}", p.name);
        let src = archive.array(&name).filter(|a| a.shape == p.shape).ok_or_else(|| name.clone())?;
        p.data = src.data.iter().map(|&v| T::of(v)).collect();
    }
    Ok(())
}

/// Most recent `iter_XXXXXX` directory under `root`.
pub fn latest_checkpoint(root: &Path) -> Option<PathBuf> {
    fs::read_dir(root)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let iter: usize = name.strip_prefix("iter_")?.parse().ok()?;
            Some((iter, e.path()))
        })
        .max_by_key(|(iter, _)| *iter)
        .map(|(_, p)| p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_shapes_dataset, split_labeled};

    fn tiny_config(hp: HyperParams) -> TrainConfig {
        let mut cfg = TrainConfig {
            max_iterations: 8,
            warm_up_iterations: 2,
            batch_size: 2,
            seg_lr0: 1e-2,
            disc_lr0: 1e-3,
            hp,
            seed: 7,
            checkpoint_every: 3,
            seg: SegNetConfig {
                base_channels: 4,
                ..SegNetConfig::default()
            },
            disc: DiscNetConfig {
                channels: vec![4, 4, 8, 8, 1],
                ..DiscNetConfig::default()
            },
            augment: AugmentConfig {
                crop_h: 32,
                crop_w: 32,
                ..AugmentConfig::default()
            },
            ..TrainConfig::default()
        };
        cfg = cfg.with_classes(3);
        cfg.validate().unwrap();
        cfg
    }

    fn zero_hp() -> HyperParams {
        HyperParams {
            lambda_adv_labeled: 0.0,
            lambda_adv_unlabeled: 0.0,
            lambda_semi: 0.0,
            t_semi: 0.2,
        }
    }

    fn data() -> Dataset {
        generate_shapes_dataset(6, 32, 32, 3, 11).unwrap()
    }

    #[test]
    fn config_round_trips_through_toml_and_rejects_unknown_keys() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
        assert!(matches!(TrainConfig::from_toml_str("bogus = 1"), Err(Error::ConfigParse(_))));
        let partial = TrainConfig::from_toml_str("max_iterations = 10\nwarm_up_iterations = 4").unwrap();
        assert_eq!(partial.max_iterations, 10);
        assert!(matches!(
            TrainConfig::from_toml_str("max_iterations = 10\nwarm_up_iterations = 11"),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn zero_weights_give_a_pure_cross_entropy_step_without_discriminator() {
        let cfg = tiny_config(zero_hp());
        let ds = data();
        let mut t = Trainer::<f64>::new(cfg.clone()).unwrap();
        assert!(t.disc.is_none());
        let samples = &ds.samples[..2];
        let rec = t.step_labeled(samples, 1).unwrap();
        assert_eq!(rec.l_adv, None);
        assert_eq!(rec.l_d, None);

        let mut seg = SegNet::<f64>::new(cfg.seg.clone(), derive_seed(&[cfg.seed, 1])).unwrap();
        let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
        let pass = seg.forward(&images).unwrap();
        let grads: Vec<MapGrad> = pass
            .probs
            .iter()
            .zip(samples)
            .map(|(p, s)| {
                let t = one_hot_encode(s.label.as_ref().unwrap(), 3).unwrap();
                loss_ce_grad(p, &t).unwrap().iter().map(|g| g / 2.0).collect()
            })
            .collect();
        let g = seg.backward(&pass, &grads);
        let mut sgd = Sgd::new(&seg.params, cfg.momentum, cfg.weight_decay);
        sgd.step(&mut seg.params, &g, cfg.seg_lr0);
        assert_eq!(seg.params, t.seg.params);
    }

    #[test]
    fn adversarial_gradient_uses_the_discriminator_before_its_update() {
        let cfg = tiny_config(HyperParams::default());
        let ds = data();
        let samples = &ds.samples[..2];
        let mut t = Trainer::<f64>::new(cfg.clone()).unwrap();
        let disc_before = t.disc.clone().unwrap();
        let seg_before = t.seg.clone();
        t.step_labeled(samples, 1).unwrap();
        assert_ne!(t.disc.as_ref().unwrap().params, disc_before.params);

        let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
        let pass = seg_before.forward(&images).unwrap();
        let refs: Vec<_> = pass.probs.iter().collect();
        let dpass = disc_before.forward(&refs).unwrap();
        let lam = cfg.hp.lambda_adv_labeled;
        let dconf: Vec<MapGrad> = dpass.conf.iter().map(|c| loss_adv_grad(c).iter().map(|g| g * lam / 2.0).collect()).collect();
        let dx = disc_before.backward(&dpass, &dconf, false, true).input.unwrap();
        let grads: Vec<MapGrad> = pass
            .probs
            .iter()
            .zip(samples)
            .zip(&dx)
            .map(|((p, s), d)| {
                let t = one_hot_encode(s.label.as_ref().unwrap(), 3).unwrap();
                loss_ce_grad(p, &t).unwrap().iter().zip(d).map(|(g, d)| g / 2.0 + d).collect()
            })
            .collect();
        let mut seg = seg_before.clone();
        let g = seg.backward(&pass, &grads);
        Sgd::new(&seg.params, cfg.momentum, cfg.weight_decay).step(&mut seg.params, &g, cfg.seg_lr0);
        assert_eq!(seg.params, t.seg.params);
    }

    #[test]
    fn unlabeled_step_leaves_discriminator_alone() {
        let ds = data();
        let mut t = Trainer::<f32>::new(tiny_config(HyperParams::default())).unwrap();
        let disc = t.disc.as_ref().unwrap().params.clone();
        let seg = t.seg.params.clone();
        let rec = t.step_unlabeled(&ds.samples[..2], 3).unwrap();
        assert_eq!(t.disc.as_ref().unwrap().params, disc);
        assert_ne!(t.seg.params, seg);
        assert!(rec.l_adv.is_some() && rec.l_semi.is_some() && rec.l_ce.is_none());
    }

    #[test]
    fn unlabeled_step_with_zero_weights_changes_nothing() {
        let ds = data();
        let hp = HyperParams {
            lambda_adv_labeled: 0.01,
            ..zero_hp()
        };
        let mut t = Trainer::<f32>::new(tiny_config(hp)).unwrap();
        let (seg, vel) = (t.seg.params.clone(), t.sgd.velocity.clone());
        t.step_unlabeled(&ds.samples[..2], 3).unwrap();
        assert_eq!(t.seg.params, seg);
        assert_eq!(t.sgd.velocity, vel);
    }

    #[test]
    fn step_contracts() {
        let ds = data();
        let mut t = Trainer::<f32>::new(tiny_config(HyperParams::default())).unwrap();
        assert!(matches!(t.step_unlabeled(&ds.samples[..2], 2), Err(Error::Schedule(_))));
        assert!(matches!(t.step_labeled(&ds.samples[..2], 9), Err(Error::Schedule(_))));
        let mut unlabeled = ds.samples[0].clone();
        unlabeled.label = None;
        assert!(matches!(t.step_labeled(&[unlabeled], 1), Err(Error::Contract(_))));
    }

    #[test]
    fn small_step_decreases_cross_entropy() {
        let ds = data();
        for seed in 0..5 {
            let mut cfg = tiny_config(zero_hp());
            cfg.seed = seed;
            cfg.seg_lr0 = 1e-5;
            let mut t = Trainer::<f64>::new(cfg).unwrap();
            let samples = &ds.samples[seed as usize..seed as usize + 1];
            let before = t.step_labeled(samples, 1).unwrap().l_ce.unwrap();
            let after = t.step_labeled(samples, 2).unwrap().l_ce.unwrap();
            assert!(after < before, "seed {seed}: {after} >= {before}");
        }
    }

    #[test]
    fn run_logs_schedule_and_resumes_exactly() {
        let ds = data();
        let split = split_labeled(&ds, 0.5, 1).unwrap();
        let cfg = tiny_config(HyperParams::default());
        let dir = tempfile::tempdir().unwrap();
        let mut full = Trainer::<f32>::new(cfg.clone()).unwrap();
        full.run(&ds, &split, Some(dir.path())).unwrap();
        assert_eq!(full.completed(), 8);
        for r in &full.log.records {
            assert_eq!(r.lr_seg, poly_lr(cfg.seg_lr0, r.iter - 1, 8, 0.9).unwrap());
            assert_eq!(r.lr_disc, poly_lr(cfg.disc_lr0, r.iter - 1, 8, 0.9).unwrap());
            if r.iter <= 2 {
                assert_eq!(r.tag, BatchTag::Labeled);
            }
        }
        assert!(full.log.records.iter().any(|r| r.tag == BatchTag::Unlabeled));
        assert_eq!(latest_checkpoint(dir.path()).unwrap(), dir.path().join("iter_000008"));

        let mut resumed = Trainer::<f32>::resume(&dir.path().join("iter_000003"), Some(&cfg)).unwrap();
        assert_eq!(resumed.completed(), 3);
        resumed.run(&ds, &split, None).unwrap();
        assert_eq!(resumed.log.to_csv(), full.log.to_csv());
        assert_eq!(resumed.seg.params, full.seg.params);
        assert_eq!(resumed.disc.unwrap().params, full.disc.unwrap().params);

        let other = TrainConfig { seed: 8, ..cfg };
        assert!(matches!(
            Trainer::<f32>::resume(&dir.path().join("iter_000003"), Some(&other)),
            Err(Error::ConfigMismatch(_))
        ));
    }

    #[test]
    fn global_discriminator_trains() {
        let ds = data();
        let split = split_labeled(&ds, 0.5, 1).unwrap();
        let mut cfg = tiny_config(HyperParams::default());
        cfg.disc.fully_convolutional = false;
        cfg.disc.input_size = Some([32, 32]);
        let mut t = Trainer::<f32>::new(cfg).unwrap();
        t.run(&ds, &split, None).unwrap();
        assert!(t.log.records.iter().all(|r| r.l_ce.is_some() || r.l_adv.is_some()));
    }
}
