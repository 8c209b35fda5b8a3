//! Segmentation network, discriminator, and their parameters.

mod disc;
mod params;
mod seg;

pub use disc::{DiscGrads, DiscNet, DiscNetConfig, DiscPass, GlobalDiscPass, MIN_DISC_INPUT};
pub use params::{NetParams, Param};
pub use seg::{MapGrad, SegNet, SegNetConfig, SegPass};

use crate::data::{OneHotMap, ProbabilityMap};
use crate::error::{Error, Result};

/// Diffuses a one-hot target toward the prediction:
/// `(1 - alpha) * onehot + alpha * prob`. `alpha = 0` returns the target.
pub fn scale_scheme(onehot: &OneHotMap, prob: &ProbabilityMap, alpha: f64) -> Result<ProbabilityMap> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidValue(format!("scale alpha {alpha} outside [0, 1]")));
    }
    if onehot.channels() != prob.channels() || onehot.height() != prob.height() || onehot.width() != prob.width() {
        return Err(Error::ShapeMismatch("scale scheme inputs differ in shape".into()));
    }
    if alpha == 0.0 {
        return Ok(onehot.as_raw_map());
    }
    let data = onehot
        .data()
        .iter()
        .zip(prob.data())
        .map(|(&y, &p)| (1.0 - alpha) * y + alpha * p)
        .collect();
    Ok(ProbabilityMap::from_raw(prob.channels(), prob.height(), prob.width(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{one_hot_encode, Image, LabelMap};

    fn image(h: usize, w: usize, seed: f64) -> Image {
        let data = (0..3 * h * w).map(|i| 0.5 + 0.5 * ((i as f64 + 1.0) * seed).sin()).collect();
        Image::new(h, w, data).unwrap()
    }

    fn small_disc(classes: usize) -> DiscNetConfig {
        DiscNetConfig {
            classes,
            channels: vec![4, 4, 4, 4, 1],
            ..DiscNetConfig::default()
        }
    }

    #[test]
    fn seg_forward_shape_and_normalization() {
        let net = SegNet::<f64>::new(SegNetConfig { base_channels: 4, ..Default::default() }, 1).unwrap();
        let p = net.predict(&image(64, 64, 0.3)).unwrap();
        assert_eq!((p.channels(), p.height(), p.width()), (4, 64, 64));
        p.validate().unwrap();
        let again = net.predict(&image(64, 64, 0.3)).unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn seg_forward_paper_crop_size() {
        let cfg = SegNetConfig {
            classes: 3,
            base_channels: 2,
            ..Default::default()
        };
        let net = SegNet::<f32>::new(cfg, 2).unwrap();
        let p = net.predict(&image(321, 321, 0.01)).unwrap();
        assert_eq!((p.channels(), p.height(), p.width()), (3, 321, 321));
        p.validate().unwrap();
    }

    #[test]
    fn seg_rejects_small_inputs() {
        let net = SegNet::<f64>::new(SegNetConfig { base_channels: 2, ..Default::default() }, 1).unwrap();
        assert!(matches!(net.predict(&image(7, 16, 0.1)), Err(Error::InputTooSmall { .. })));
        assert!(net.predict(&image(8, 8, 0.1)).is_ok());
    }

    #[test]
    fn seg_config_validation() {
        let mut cfg = SegNetConfig::default();
        cfg.output_stride = 16;
        assert!(cfg.validate().is_err());
        let mut cfg = SegNetConfig::default();
        cfg.pyramid_dilations.clear();
        assert!(cfg.validate().is_err());
        assert_eq!(SegNetConfig::default().stem_stride(), 2);
    }

    #[test]
    fn init_is_deterministic_and_finite() {
        let a = SegNet::<f64>::new(SegNetConfig::default(), 9).unwrap();
        let b = SegNet::<f64>::new(SegNetConfig::default(), 9).unwrap();
        let c = SegNet::<f64>::new(SegNetConfig::default(), 10).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
        assert!(a.params.all_finite());
        let bias = a.params.get("stem.bias").unwrap();
        assert!(bias.data.iter().all(|&v| v == 0.0));
        let d1 = DiscNet::<f32>::new(DiscNetConfig::default(), 3).unwrap();
        let d2 = DiscNet::<f32>::new(DiscNetConfig::default(), 3).unwrap();
        assert_eq!(d1.params, d2.params);
        assert!(d1.params.all_finite());
    }

    #[test]
    fn disc_output_shapes() {
        let d = DiscNet::<f64>::new(small_disc(3), 4).unwrap();
        assert_eq!(d.config.stage_sizes(64, 64).unwrap().last(), Some(&(2, 2)));
        let sizes = d.config.stage_sizes(321, 321).unwrap();
        assert_eq!(sizes.iter().map(|s| s.0).collect::<Vec<_>>(), vec![160, 80, 40, 20, 10]);

        let seg = SegNet::<f64>::new(SegNetConfig { classes: 3, base_channels: 2, ..Default::default() }, 1).unwrap();
        let p = seg.predict(&image(64, 64, 0.2)).unwrap();
        let conf = d.confidence(&p).unwrap();
        assert_eq!((conf.height(), conf.width()), (64, 64));
        assert!(conf.data().iter().all(|&v| v > 0.0 && v < 1.0));

        let p32 = seg.predict(&image(32, 32, 0.2)).unwrap();
        let c32 = d.confidence(&p32).unwrap();
        let first = c32.data()[0];
        assert!(c32.data().iter().all(|&v| v == first));
    }

    #[test]
    fn disc_rejects_bad_inputs() {
        let d = DiscNet::<f64>::new(small_disc(3), 4).unwrap();
        let seg = SegNet::<f64>::new(SegNetConfig { classes: 3, base_channels: 2, ..Default::default() }, 1).unwrap();
        let p = seg.predict(&image(16, 40, 0.2)).unwrap();
        assert!(matches!(d.confidence(&p), Err(Error::InputTooSmall { .. })));
        let d4 = DiscNet::<f64>::new(small_disc(4), 4).unwrap();
        let p = seg.predict(&image(32, 32, 0.2)).unwrap();
        assert!(matches!(d4.confidence(&p), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn disc_constant_input_gives_constant_interior() {
        let d = DiscNet::<f64>::new(small_disc(2), 5).unwrap();
        let labels = LabelMap::new(64, 64, 2, vec![1; 64 * 64]).unwrap();
        let oh = one_hot_encode(&labels, 2).unwrap().to_probabilities().unwrap();
        let conf = d.confidence(&oh).unwrap();
        assert!(conf.data().iter().all(|&v| v > 0.0 && v < 1.0));
        // 256 -> 8x8 at the last stage; cells 1..=6 see no padding, and the
        // sampled pixels interpolate between cells 3 and 4.
        let labels = LabelMap::new(256, 256, 2, vec![1; 256 * 256]).unwrap();
        let oh = one_hot_encode(&labels, 2).unwrap().to_probabilities().unwrap();
        let c = d.confidence(&oh).unwrap();
        let center: Vec<f64> = [(112, 112), (112, 143), (143, 112), (143, 143)]
            .iter()
            .map(|&(y, x)| c.at(y, x))
            .collect();
        for v in &center {
            assert!((v - center[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn global_variant() {
        let cfg = DiscNetConfig {
            fully_convolutional: false,
            input_size: Some([32, 32]),
            ..small_disc(2)
        };
        let d = DiscNet::<f64>::new(cfg, 6).unwrap();
        let labels = LabelMap::new(32, 32, 2, vec![0; 32 * 32]).unwrap();
        let oh = one_hot_encode(&labels, 2).unwrap().to_probabilities().unwrap();
        let s1 = d.forward_global(&[&oh]).unwrap().scores;
        let s2 = d.forward_global(&[&oh]).unwrap().scores;
        assert_eq!(s1.len(), 1);
        assert!(s1[0] > 0.0 && s1[0] < 1.0);
        assert_eq!(s1, s2);
        let labels = LabelMap::new(64, 64, 2, vec![0; 64 * 64]).unwrap();
        let big = one_hot_encode(&labels, 2).unwrap().to_probabilities().unwrap();
        assert!(matches!(d.forward_global(&[&big]), Err(Error::ShapeMismatch(_))));
        assert!(d.forward(&[&oh]).is_err());
        let no_size = DiscNetConfig {
            fully_convolutional: false,
            ..small_disc(2)
        };
        assert!(no_size.validate().is_err());
    }

    #[test]
    fn scale_scheme_examples() {
        let labels = LabelMap::from_rows(&[&[0]], 3).unwrap();
        let oh = one_hot_encode(&labels, 3).unwrap();
        let p = ProbabilityMap::from_pixels(1, 1, &[&[0.7, 0.2, 0.1]]).unwrap();
        let same = scale_scheme(&oh, &p, 0.0).unwrap();
        assert_eq!(same.data(), oh.data());
        let mixed = scale_scheme(&oh, &p, 0.1).unwrap();
        let want = [0.97, 0.02, 0.01];
        for (a, b) in mixed.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        mixed.validate().unwrap();
        let other = ProbabilityMap::from_pixels(1, 2, &[&[0.5, 0.5], &[0.5, 0.5]]).unwrap();
        assert!(scale_scheme(&oh, &other, 0.1).is_err());
    }
}
