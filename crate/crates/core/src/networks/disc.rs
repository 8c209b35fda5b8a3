use serde::{Deserialize, Serialize};

use super::params::{NetParams, ParamSpec};
use super::seg::{split_pair, MapGrad};
use crate::data::{ClassMap, ConfidenceMap};
use crate::error::{Error, Result};
use crate::ops::{self, ConvGeom, ConvTrace};
use crate::real::Real;
use crate::resample::Resampler;
use crate::tensor::Tensor4;

/// Smallest spatial input for which the fifth stride-2 stage is non-empty.
pub const MIN_DISC_INPUT: usize = 32;

/// Five 4x4 stride-2 convolutions with leaky rectifiers between them and no
/// normalization layers. The fully convolutional form upsamples its
/// single-channel score map back to the input size; the global form replaces
/// the last convolution with a dense layer and needs a fixed input size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscNetConfig {
    pub classes: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub leaky_slope: f64,
    pub fully_convolutional: bool,
    /// Required input size `[height, width]` of the global variant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_size: Option<[usize; 2]>,
}

impl Default for DiscNetConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            channels: vec![64, 128, 256, 512, 1],
            kernel: 4,
            stride: 2,
            leaky_slope: 0.2,
            fully_convolutional: true,
            input_size: None,
        }
    }
}

impl DiscNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("discriminator: {m}")));
        if self.classes < 1 {
            return bad("class count must be at least 1");
        }
        if self.channels.len() != 5 || self.channels.contains(&0) {
            return bad("exactly five positive stage widths are required");
        }
        if self.channels[4] != 1 {
            return bad("the last stage must have one channel");
        }
        if self.kernel != 4 || self.stride != 2 {
            return bad("stages use 4x4 kernels with stride 2");
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return bad("leaky slope must lie in [0, 1)");
        }
        if !self.fully_convolutional {
            match self.input_size {
                Some([h, w]) if h >= MIN_DISC_INPUT && w >= MIN_DISC_INPUT => {}
                Some(_) => return bad("global variant input size below 32x32"),
                None => return bad("global variant needs a fixed input size"),
            }
        }
        Ok(())
    }

    fn stage(&self, i: usize) -> ConvGeom {
        let in_channels = if i == 0 { self.classes } else { self.channels[i - 1] };
        ConvGeom {
            in_channels,
            out_channels: self.channels[i],
            kernel: self.kernel,
            stride: self.stride,
            padding: 1,
            dilation: 1,
        }
    }

    /// Spatial size after each of the five stages.
    pub fn stage_sizes(&self, height: usize, width: usize) -> Option<Vec<(usize, usize)>> {
        let mut sizes = Vec::with_capacity(5);
        let (mut h, mut w) = (height, width);
        for i in 0..5 {
            let g = self.stage(i);
            h = g.out_extent(h)?;
            w = g.out_extent(w)?;
            sizes.push((h, w));
        }
        Some(sizes)
    }

    pub(crate) fn param_specs(&self) -> Result<Vec<ParamSpec>> {
        let slope = self.leaky_slope;
        let mut specs = Vec::new();
        for i in 0..4 {
            let g = self.stage(i);
            specs.push(ParamSpec {
                name: format!("conv{}.weight", i + 1),
                shape: vec![g.out_channels, g.in_channels, g.kernel, g.kernel],
                std: (2.0 / ((1.0 + slope * slope) * g.fan_in() as f64)).sqrt(),
            });
            specs.push(ParamSpec {
                name: format!("conv{}.bias", i + 1),
                shape: vec![g.out_channels],
                std: 0.0,
            });
        }
        if self.fully_convolutional {
            let g = self.stage(4);
            specs.push(ParamSpec {
                name: "conv5.weight".into(),
                shape: vec![1, g.in_channels, g.kernel, g.kernel],
                std: (1.0 / g.fan_in() as f64).sqrt(),
            });
            specs.push(ParamSpec {
                name: "conv5.bias".into(),
                shape: vec![1],
                std: 0.0,
            });
        } else {
            let [h, w] = self.input_size.expect("validated");
            let sizes = self
                .stage_sizes(h, w)
                .ok_or(Error::InputTooSmall { height: h, width: w, min: MIN_DISC_INPUT })?;
            let (h4, w4) = sizes[3];
            let features = self.channels[3] * h4 * w4;
            specs.push(ParamSpec {
                name: "fc.weight".into(),
                shape: vec![1, features],
                std: (1.0 / features as f64).sqrt(),
            });
            specs.push(ParamSpec {
                name: "fc.bias".into(),
                shape: vec![1],
                std: 0.0,
            });
        }
        Ok(specs)
    }
}

#[derive(Debug, Clone)]
pub struct DiscNet<T> {
    pub config: DiscNetConfig,
    pub params: NetParams<T>,
}

struct Trunk<T> {
    convs: Vec<ConvTrace<T>>,
    /// Post-activation outputs of the first four stages.
    outputs: Vec<Tensor4<T>>,
}

/// Forward state of the fully convolutional discriminator.
pub struct DiscPass<T> {
    pub conf: Vec<ConfidenceMap>,
    trunk: Trunk<T>,
    last: ConvTrace<T>,
    /// Sigmoid outputs at the final stage resolution, `[batch][h5*w5]`.
    scores: Vec<Vec<f64>>,
    upsample: Resampler,
    input_height: usize,
    input_width: usize,
}

/// Forward state of the global (dense-output) discriminator.
pub struct GlobalDiscPass<T> {
    pub scores: Vec<f64>,
    trunk: Trunk<T>,
}

/// Gradients produced by a discriminator backward pass.
pub struct DiscGrads<T> {
    /// Parameter gradients, `None` when parameters were held fixed.
    pub params: Option<NetParams<T>>,
    /// Per-sample gradients with respect to the input maps.
    pub input: Option<Vec<MapGrad>>,
}

fn maps_to_tensor<T: Real, M: ClassMap + ?Sized>(maps: &[&M], classes: usize) -> Result<Tensor4<T>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    for m in maps {
        if m.channels() != classes {
            return Err(Error::ConfigMismatch(format!(
                "discriminator expects {classes} channels, got {}",
                m.channels()
            )));
        }
        if m.height() != h || m.width() != w {
            return Err(Error::ShapeMismatch("batch maps differ in size".into()));
        }
    }
    let plane = h * w;
    let mut t = Tensor4::zeros(classes, maps.len(), h, w);
    for (b, m) in maps.iter().enumerate() {
        for c in 0..classes {
            let src = &m.data()[c * plane..(c + 1) * plane];
            for (d, &s) in t.plane_mut(c, b).iter_mut().zip(src) {
                *d = T::of(s);
            }
        }
    }
    Ok(t)
}

fn tensor_to_grads<T: Real>(t: &Tensor4<T>) -> Vec<MapGrad> {
    (0..t.batch)
        .map(|b| {
            (0..t.channels)
                .flat_map(|c| t.plane(c, b).iter().map(|v| v.as_f64()))
                .collect()
        })
        .collect()
}

impl<T: Real> DiscNet<T> {
    pub fn new(config: DiscNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = NetParams::init(&config.param_specs()?, seed);
        Ok(Self { config, params })
    }

    pub fn from_params(config: DiscNetConfig, params: NetParams<T>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs()?;
        let matches = specs.len() == params.params.len()
            && specs
                .iter()
                .zip(&params.params)
                .all(|(s, p)| s.name == p.name && s.shape == p.shape);
        if !matches {
            return Err(Error::ConfigMismatch(
                "parameters do not match the discriminator config".into(),
            ));
        }
        Ok(Self { config, params })
    }

    fn check_size(&self, h: usize, w: usize) -> Result<()> {
        if h < MIN_DISC_INPUT || w < MIN_DISC_INPUT {
            return Err(Error::InputTooSmall {
                height: h,
                width: w,
                min: MIN_DISC_INPUT,
            });
        }
        Ok(())
    }

    fn trunk_forward(&self, x: &Tensor4<T>) -> (Trunk<T>, Tensor4<T>) {
        let slope = T::of(self.config.leaky_slope);
        let p = &self.params.params;
        let mut convs = Vec::with_capacity(5);
        let mut outputs = Vec::with_capacity(4);
        let mut a = x.clone();
        for i in 0..4 {
            let (mut y, t) = ops::conv2d_forward(&self.config.stage(i), &p[2 * i].data, &p[2 * i + 1].data, &a);
            ops::leaky_relu_inplace(&mut y, slope);
            convs.push(t);
            outputs.push(y.clone());
            a = y;
        }
        (Trunk { convs, outputs }, a)
    }

    fn trunk_backward(
        &self,
        trunk: &Trunk<T>,
        mut da: Tensor4<T>,
        grads: &mut Option<NetParams<T>>,
        need_input: bool,
    ) -> Option<Tensor4<T>> {
        let slope = T::of(self.config.leaky_slope);
        let p = &self.params.params;
        for i in (0..4).rev() {
            ops::leaky_relu_backward(&trunk.outputs[i], &mut da, slope);
            let pg = grads.as_mut().map(|g| split_pair(&mut g.params, 2 * i));
            let want_dx = i > 0 || need_input;
            match ops::conv2d_backward(&self.config.stage(i), &p[2 * i].data, &trunk.convs[i], &da, pg, want_dx) {
                Some(dx) => da = dx,
                None => return None,
            }
        }
        Some(da)
    }

    /// Per-pixel confidence for each input map, at the input size.
    pub fn forward<M: ClassMap + ?Sized>(&self, maps: &[&M]) -> Result<DiscPass<T>> {
        if !self.config.fully_convolutional {
            return Err(Error::Contract(
                "spatial forward needs a fully convolutional discriminator".into(),
            ));
        }
        let x: Tensor4<T> = maps_to_tensor(maps, self.config.classes)?;
        let (height, width, batch) = (x.height, x.width, x.batch);
        self.check_size(height, width)?;
        let (trunk, a) = self.trunk_forward(&x);
        let p = &self.params.params;
        let (z, last) = ops::conv2d_forward(&self.config.stage(4), &p[8].data, &p[9].data, &a);
        let upsample = Resampler::new(z.height, z.width, height, width);
        let mut scores = Vec::with_capacity(batch);
        let mut conf = Vec::with_capacity(batch);
        for b in 0..batch {
            let s: Vec<f64> = z.plane(0, b).iter().map(|v| ops::sigmoid(v.as_f64())).collect();
            let mut up = vec![0.0; height * width];
            upsample.forward_plane(&s, &mut up);
            conf.push(ConfidenceMap::from_raw(height, width, up));
            scores.push(s);
        }
        Ok(DiscPass {
            conf,
            trunk,
            last,
            scores,
            upsample,
            input_height: height,
            input_width: width,
        })
    }

    /// Confidence map of one input. The global variant's single score is
    /// broadcast over the map.
    pub fn confidence<M: ClassMap + ?Sized>(&self, map: &M) -> Result<ConfidenceMap> {
        if self.config.fully_convolutional {
            Ok(self.forward(&[map])?.conf.remove(0))
        } else {
            let score = self.forward_global(&[map])?.scores[0];
            ConfidenceMap::constant(map.height(), map.width(), score)
        }
    }

    /// Backpropagates `grads[b] = dL/dconf[b]`. Parameter gradients are
    /// skipped when `param_grads` is false (the network is frozen), and input
    /// gradients are computed only when `input_grads` is set.
    pub fn backward(&self, pass: &DiscPass<T>, grads: &[MapGrad], param_grads: bool, input_grads: bool) -> DiscGrads<T> {
        assert_eq!(grads.len(), pass.conf.len(), "one gradient per sample");
        let batch = grads.len();
        let (zh, zw) = (pass.upsample.src_height, pass.upsample.src_width);
        let mut dz = Tensor4::zeros(1, batch, zh, zw);
        for (b, g) in grads.iter().enumerate() {
            debug_assert_eq!(g.len(), pass.input_height * pass.input_width);
            let mut ds = vec![0.0; zh * zw];
            pass.upsample.adjoint_plane(g, &mut ds);
            for ((d, &gs), &s) in dz.plane_mut(0, b).iter_mut().zip(&ds).zip(&pass.scores[b]) {
                *d = T::of(gs * s * (1.0 - s));
            }
        }
        let mut out = param_grads.then(|| self.params.zeros_like());
        let p = &self.params.params;
        let pg = out.as_mut().map(|g| split_pair(&mut g.params, 8));
        let da = ops::conv2d_backward(&self.config.stage(4), &p[8].data, &pass.last, &dz, pg, true)
            .expect("input gradient");
        let dx = self.trunk_backward(&pass.trunk, da, &mut out, input_grads);
        DiscGrads {
            params: out,
            input: dx.map(|t| tensor_to_grads(&t)),
        }
    }

    /// Single real/fake probability per input map (global variant).
    pub fn forward_global<M: ClassMap + ?Sized>(&self, maps: &[&M]) -> Result<GlobalDiscPass<T>> {
        if self.config.fully_convolutional {
            return Err(Error::Contract(
                "global forward needs the dense-output discriminator".into(),
            ));
        }
        let x: Tensor4<T> = maps_to_tensor(maps, self.config.classes)?;
        let [h, w] = self.config.input_size.expect("validated");
        if x.height != h || x.width != w {
            return Err(Error::ShapeMismatch(format!(
                "global discriminator built for {h}x{w}, got {}x{}",
                x.height, x.width
            )));
        }
        let (trunk, a) = self.trunk_forward(&x);
        let p = &self.params.params;
        let logits = ops::dense_forward(&p[8].data, &p[9].data, &a);
        let scores = logits.iter().map(|l| ops::sigmoid(l[0].as_f64())).collect();
        Ok(GlobalDiscPass { scores, trunk })
    }

    /// Backpropagates `grads[b] = dL/dscore[b]` through the global variant.
    pub fn backward_global(&self, pass: &GlobalDiscPass<T>, grads: &[f64], param_grads: bool, input_grads: bool) -> DiscGrads<T> {
        let dy: Vec<Vec<T>> = grads
            .iter()
            .zip(&pass.scores)
            .map(|(&g, &s)| vec![T::of(g * s * (1.0 - s))])
            .collect();
        let mut out = param_grads.then(|| self.params.zeros_like());
        let p = &self.params.params;
        let features = pass.trunk.outputs.last().expect("trunk output");
        let mut scratch_w = vec![T::zero(); p[8].data.len()];
        let mut scratch_b = vec![T::zero(); 1];
        let da = match out.as_mut() {
            Some(g) => {
                let (dw, db) = split_pair(&mut g.params, 8);
                ops::dense_backward(&p[8].data, features, &dy, dw, db)
            }
            None => ops::dense_backward(&p[8].data, features, &dy, &mut scratch_w, &mut scratch_b),
        };
        let dx = self.trunk_backward(&pass.trunk, da, &mut out, input_grads);
        DiscGrads {
            params: out,
            input: dx.map(|t| tensor_to_grads(&t)),
        }
    }
}
