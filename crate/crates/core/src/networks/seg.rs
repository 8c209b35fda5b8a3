use serde::{Deserialize, Serialize};

use super::params::{NetParams, ParamSpec};
use crate::data::{Image, ProbabilityMap};
use crate::error::{Error, Result};
use crate::ops::{self, ConvGeom, ConvTrace};
use crate::real::Real;
use crate::resample::Resampler;
use crate::tensor::Tensor4;

/// Desk-scale dilated segmentation network: a strided stem, convolution
/// blocks that reach the output stride and then keep resolution through
/// dilation, and a pyramid head of parallel dilated classifiers whose logits
/// are summed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegNetConfig {
    pub classes: usize,
    pub base_channels: usize,
    pub block_strides: Vec<usize>,
    pub block_dilations: Vec<usize>,
    pub output_stride: usize,
    pub pyramid_dilations: Vec<usize>,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            base_channels: 16,
            block_strides: vec![2, 2, 1, 1],
            block_dilations: vec![1, 1, 2, 4],
            output_stride: 8,
            pyramid_dilations: vec![1, 2, 4],
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("segmentation net: {m}")));
        if self.classes < 1 {
            return bad("class count must be at least 1");
        }
        if self.base_channels == 0 {
            return bad("base_channels must be positive");
        }
        if self.output_stride != 8 {
            return bad("output_stride must be 8");
        }
        if self.pyramid_dilations.is_empty() || self.pyramid_dilations.contains(&0) {
            return bad("pyramid_dilations must be nonempty and positive");
        }
        if self.block_strides.len() != self.block_dilations.len() {
            return bad("block_strides and block_dilations differ in length");
        }
        if self.block_strides.contains(&0) || self.block_dilations.contains(&0) {
            return bad("block strides and dilations must be positive");
        }
        let blocks: usize = self.block_strides.iter().product();
        if blocks == 0 || self.output_stride % blocks != 0 {
            return bad("block strides must divide the output stride");
        }
        Ok(())
    }

    /// Stride of the stem convolution, making the total equal `output_stride`.
    pub fn stem_stride(&self) -> usize {
        self.output_stride / self.block_strides.iter().product::<usize>()
    }

    pub(crate) fn layers(&self) -> SegLayers {
        let conv = |i, o, s, d| ConvGeom {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride: s,
            padding: d,
            dilation: d,
        };
        let stem = conv(3, self.base_channels, self.stem_stride(), 1);
        let mut ch = self.base_channels;
        let blocks = self
            .block_strides
            .iter()
            .zip(&self.block_dilations)
            .map(|(&s, &d)| {
                let out = if s > 1 { ch * 2 } else { ch };
                let g = conv(ch, out, s, d);
                ch = out;
                g
            })
            .collect();
        let head = self
            .pyramid_dilations
            .iter()
            .map(|&d| conv(ch, self.classes, 1, d))
            .collect();
        SegLayers { stem, blocks, head }
    }

    pub(crate) fn param_specs(&self) -> Vec<ParamSpec> {
        let l = self.layers();
        let mut specs = Vec::new();
        let mut push = |name: String, g: &ConvGeom, std: f64| {
            specs.push(ParamSpec {
                name: format!("{name}.weight"),
                shape: vec![g.out_channels, g.in_channels, g.kernel, g.kernel],
                std,
            });
            specs.push(ParamSpec {
                name: format!("{name}.bias"),
                shape: vec![g.out_channels],
                std: 0.0,
            });
        };
        let he = |g: &ConvGeom| (2.0 / g.fan_in() as f64).sqrt();
        push("stem".into(), &l.stem, he(&l.stem));
        for (i, g) in l.blocks.iter().enumerate() {
            push(format!("block{}", i + 1), g, he(g));
        }
        let branches = l.head.len() as f64;
        for (g, d) in l.head.iter().zip(&self.pyramid_dilations) {
            push(format!("head.d{d}"), g, (1.0 / (g.fan_in() as f64 * branches)).sqrt());
        }
        specs
    }
}

pub(crate) struct SegLayers {
    pub stem: ConvGeom,
    pub blocks: Vec<ConvGeom>,
    pub head: Vec<ConvGeom>,
}

/// Per-pixel gradient of a scalar loss with respect to a map's data, in the
/// map's channel-major layout.
pub type MapGrad = Vec<f64>;

#[derive(Debug, Clone)]
pub struct SegNet<T> {
    pub config: SegNetConfig,
    pub params: NetParams<T>,
}

/// Output of a training forward pass, holding what the backward pass needs.
pub struct SegPass<T> {
    pub probs: Vec<ProbabilityMap>,
    convs: Vec<ConvTrace<T>>,
    activations: Vec<Tensor4<T>>,
    head: Vec<ConvTrace<T>>,
    upsample: Resampler,
    feature_height: usize,
    feature_width: usize,
}

pub(crate) fn images_to_tensor<T: Real>(images: &[&Image]) -> Result<Tensor4<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    if images.iter().any(|im| im.height() != h || im.width() != w) {
        return Err(Error::ShapeMismatch("batch images differ in size".into()));
    }
    let mut t = Tensor4::zeros(3, images.len(), h, w);
    for (b, im) in images.iter().enumerate() {
        for c in 0..3 {
            let src = &im.data()[c * h * w..(c + 1) * h * w];
            for (d, &s) in t.plane_mut(c, b).iter_mut().zip(src) {
                *d = T::of(s);
            }
        }
    }
    Ok(t)
}

impl<T: Real> SegNet<T> {
    /// Fresh network with deterministic per-seed initialization.
    pub fn new(config: SegNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = NetParams::init(&config.param_specs(), seed);
        Ok(Self { config, params })
    }

    pub fn from_params(config: SegNetConfig, params: NetParams<T>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        let matches = specs.len() == params.params.len()
            && specs
                .iter()
                .zip(&params.params)
                .all(|(s, p)| s.name == p.name && s.shape == p.shape);
        if !matches {
            return Err(Error::ConfigMismatch(
                "parameters do not match the segmentation config".into(),
            ));
        }
        Ok(Self { config, params })
    }

    fn check_size(&self, h: usize, w: usize) -> Result<()> {
        let min = self.config.output_stride;
        if h < min || w < min {
            return Err(Error::InputTooSmall {
                height: h,
                width: w,
                min,
            });
        }
        Ok(())
    }

    /// Class probabilities for one image, at the image's size.
    pub fn predict(&self, image: &Image) -> Result<ProbabilityMap> {
        Ok(self.forward(&[image])?.probs.remove(0))
    }

    pub fn forward(&self, images: &[&Image]) -> Result<SegPass<T>> {
        let x: Tensor4<T> = images_to_tensor(images)?;
        let (height, width, batch) = (x.height, x.width, x.batch);
        self.check_size(height, width)?;
        let layers = self.config.layers();
        let p = &self.params.params;
        let zero = T::zero();

        let mut convs = Vec::with_capacity(1 + layers.blocks.len());
        let mut activations = Vec::with_capacity(1 + layers.blocks.len());
        let (mut a, t) = ops::conv2d_forward(&layers.stem, &p[0].data, &p[1].data, &x);
        ops::leaky_relu_inplace(&mut a, zero);
        convs.push(t);
        for (i, g) in layers.blocks.iter().enumerate() {
            let (mut y, t) = ops::conv2d_forward(g, &p[2 + 2 * i].data, &p[3 + 2 * i].data, &a);
            ops::leaky_relu_inplace(&mut y, zero);
            convs.push(t);
            activations.push(a);
            a = y;
        }
        let head_base = 2 + 2 * layers.blocks.len();
        let mut logits: Option<Tensor4<T>> = None;
        let mut head = Vec::with_capacity(layers.head.len());
        for (j, g) in layers.head.iter().enumerate() {
            let (y, t) = ops::conv2d_forward(g, &p[head_base + 2 * j].data, &p[head_base + 2 * j + 1].data, &a);
            head.push(t);
            logits = Some(match logits {
                None => y,
                Some(mut acc) => {
                    for (s, v) in acc.data.iter_mut().zip(&y.data) {
                        *s += *v;
                    }
                    acc
                }
            });
        }
        activations.push(a);
        let logits = logits.expect("pyramid head is nonempty");
        let (fh, fw) = (logits.height, logits.width);
        let upsample = Resampler::new(fh, fw, height, width);
        let classes = self.config.classes;
        let plane = height * width;

        let mut probs = Vec::with_capacity(batch);
        let mut up = vec![T::zero(); plane];
        for b in 0..batch {
            let mut data = vec![0.0; classes * plane];
            for c in 0..classes {
                upsample.forward_plane(logits.plane(c, b), &mut up);
                for (d, &v) in data[c * plane..(c + 1) * plane].iter_mut().zip(&up) {
                    *d = v.as_f64();
                }
            }
            for i in 0..plane {
                ops::softmax_strided(&mut data, classes, plane, i);
            }
            probs.push(ProbabilityMap::from_raw(classes, height, width, data));
        }
        Ok(SegPass {
            probs,
            convs,
            activations,
            head,
            upsample,
            feature_height: fh,
            feature_width: fw,
        })
    }

    /// Parameter gradients of a scalar loss given `grads[b] = dL/dprobs[b]`.
    pub fn backward(&self, pass: &SegPass<T>, grads: &[MapGrad]) -> NetParams<T> {
        assert_eq!(grads.len(), pass.probs.len(), "one gradient per sample");
        let layers = self.config.layers();
        let p = &self.params.params;
        let mut out = self.params.zeros_like();
        let classes = self.config.classes;
        let batch = pass.probs.len();
        let (height, width) = (pass.probs[0].height(), pass.probs[0].width());
        let plane = height * width;

        // Softmax, then the upsampling adjoint, per sample and class.
        let mut dlogits = Tensor4::zeros(classes, batch, pass.feature_height, pass.feature_width);
        let mut dz = vec![T::zero(); plane];
        for (b, (prob, g)) in pass.probs.iter().zip(grads).enumerate() {
            let pd = prob.data();
            let mut dot = vec![0.0; plane];
            for c in 0..classes {
                for i in 0..plane {
                    dot[i] += pd[c * plane + i] * g[c * plane + i];
                }
            }
            for c in 0..classes {
                for i in 0..plane {
                    let k = c * plane + i;
                    dz[i] = T::of(pd[k] * (g[k] - dot[i]));
                }
                pass.upsample.adjoint_plane(&dz, dlogits.plane_mut(c, b));
            }
        }

        let head_base = 2 + 2 * layers.blocks.len();
        let features = pass.activations.last().expect("activations");
        let mut da = Tensor4::zeros(features.channels, batch, features.height, features.width);
        for (j, g) in layers.head.iter().enumerate() {
            let (dw, db) = split_pair(&mut out.params, head_base + 2 * j);
            let dx = ops::conv2d_backward(g, &p[head_base + 2 * j].data, &pass.head[j], &dlogits, Some((dw, db)), true)
                .expect("input gradient");
            for (s, v) in da.data.iter_mut().zip(&dx.data) {
                *s += *v;
            }
        }
        for i in (0..layers.blocks.len()).rev() {
            ops::leaky_relu_backward(&pass.activations[i + 1], &mut da, T::zero());
            let (dw, db) = split_pair(&mut out.params, 2 + 2 * i);
            da = ops::conv2d_backward(&layers.blocks[i], &p[2 + 2 * i].data, &pass.convs[i + 1], &da, Some((dw, db)), true)
                .expect("input gradient");
        }
        ops::leaky_relu_backward(&pass.activations[0], &mut da, T::zero());
        let (dw, db) = split_pair(&mut out.params, 0);
        ops::conv2d_backward(&layers.stem, &p[0].data, &pass.convs[0], &da, Some((dw, db)), false);
        out
    }
}

/// Mutable weight and bias buffers of the layer whose weight is at `index`.
pub(crate) fn split_pair<T>(params: &mut [super::params::Param<T>], index: usize) -> (&mut [T], &mut [T]) {
    let (a, b) = params.split_at_mut(index + 1);
    (&mut a[index].data, &mut b[0].data)
}
