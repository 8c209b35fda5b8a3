//! Analytic gradients of every loss, composed through both networks, against
//! central finite differences in 64-bit precision.

use advseg::data::{one_hot_encode, threshold_mask, BinaryMask, Image, LabelMap};
use advseg::eval::{grad_check, GradCheck};
use advseg::losses::{
    build_self_taught_target, loss_adv, loss_adv_grad, loss_ce, loss_ce_grad, loss_discriminator,
    loss_discriminator_grad, loss_semi_grad, masked_ce, DiscriminatorTarget,
};
use advseg::networks::{DiscNet, DiscNetConfig, NetParams, SegNet, SegNetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const STEP: f64 = 3e-5;

fn image(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(size, size, (0..3 * size * size).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

fn labels(size: usize, classes: usize, seed: u64) -> LabelMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..size * size)
        .map(|_| if rng.gen_bool(0.1) { 255 } else { rng.gen_range(0..classes as u8) })
        .collect();
    LabelMap::new(size, size, classes, data).unwrap()
}

/// Positive biases keep most rectifiers away from their kink, where a
/// central difference straddling it would be meaningless.
fn lift_biases(params: &mut NetParams<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in params.params.iter_mut().filter(|p| p.name.ends_with("bias")) {
        p.data.iter_mut().for_each(|v| *v = rng.gen_range(0.3..0.6));
    }
}

fn seg_net(classes: usize, seed: u64) -> SegNet<f64> {
    let cfg = SegNetConfig {
        classes,
        base_channels: 4,
        ..Default::default()
    };
    let mut net = SegNet::new(cfg, seed).unwrap();
    lift_biases(&mut net.params, seed + 100);
    net
}

fn disc_cfg(classes: usize) -> DiscNetConfig {
    DiscNetConfig {
        classes,
        channels: vec![4, 4, 8, 8, 1],
        ..Default::default()
    }
}

fn disc_net(classes: usize, seed: u64) -> DiscNet<f64> {
    let mut d = DiscNet::new(disc_cfg(classes), seed).unwrap();
    lift_biases(&mut d.params, seed + 100);
    d
}

fn with_flat(template: &NetParams<f64>, flat: &[f64]) -> NetParams<f64> {
    let mut p = template.clone();
    for (i, &v) in flat.iter().enumerate() {
        p.flat_set(i, v);
    }
    p
}

fn report(name: &str, r: GradCheck) {
    println!(
        "{name}: max relative error {:.3e} at {:?} (analytic {:e}, numeric {:e})",
        r.max_rel_error, r.worst, r.analytic, r.numeric
    );
    assert!(r.max_rel_error < TOL, "{name}: {r:?}");
}

#[test]
fn ce_through_segmentation_net() {
    for (size, seed) in [(8, 1), (32, 2)] {
        let net = seg_net(3, seed);
        let x = image(size, seed);
        let y = one_hot_encode(&labels(size, 3, seed), 3).unwrap();
        let pass = net.forward(&[&x]).unwrap();
        let g = net.backward(&pass, &[loss_ce_grad(&pass.probs[0], &y).unwrap()]);
        let loss = |flat: &[f64]| {
            let s = SegNet::from_params(net.config.clone(), with_flat(&net.params, flat))?;
            Ok(loss_ce(&s.predict(&x)?, &y)?.value)
        };
        report("ce", grad_check(loss, &net.params.flatten(), &g.flatten(), STEP).unwrap());
    }
}

#[test]
fn adv_through_both_networks() {
    let net = seg_net(3, 3);
    let d = disc_net(3, 4);
    let x = image(32, 3);
    let pass = net.forward(&[&x]).unwrap();
    let dpass = d.forward(&[&pass.probs[0]]).unwrap();
    let dg = d.backward(&dpass, &[loss_adv_grad(&dpass.conf[0])], false, true);
    assert!(dg.params.is_none());
    let g = net.backward(&pass, &dg.input.unwrap());
    let loss = |flat: &[f64]| {
        let s = SegNet::from_params(net.config.clone(), with_flat(&net.params, flat))?;
        Ok(loss_adv(&d.confidence(&s.predict(&x)?)?).value)
    };
    report("adv", grad_check(loss, &net.params.flatten(), &g.flatten(), STEP).unwrap());
}

#[test]
fn semi_through_segmentation_net_with_constant_targets() {
    let net = seg_net(3, 5);
    let d = disc_net(3, 6);
    let x = image(32, 5);
    let pass = net.forward(&[&x]).unwrap();
    let prob = &pass.probs[0];
    let conf = d.confidence(prob).unwrap();
    // A 32x32 input leaves the last discriminator stage at 1x1, so the map
    // is constant; a threshold just below it selects every pixel.
    let t = conf.data()[0] - 1e-3;
    let mask = threshold_mask(&conf, t).unwrap();
    assert!(mask.count() > 0);
    let target = build_self_taught_target(prob);
    let g = net.backward(&pass, &[loss_semi_grad(prob, &conf, t).unwrap()]);
    let loss = |flat: &[f64]| {
        let s = SegNet::from_params(net.config.clone(), with_flat(&net.params, flat))?;
        Ok(masked_ce(&s.predict(&x)?, &target, Some(&mask))?.value)
    };
    report("semi", grad_check(loss, &net.params.flatten(), &g.flatten(), STEP).unwrap());
}

#[test]
fn discriminator_loss_through_discriminator() {
    let net = seg_net(3, 7);
    let d = disc_net(3, 8);
    let x = image(32, 7);
    let gt = labels(32, 3, 7);
    let pred = net.predict(&x).unwrap();
    let real = one_hot_encode(&gt, 3).unwrap();
    let include = BinaryMask::labeled(&gt);
    let fake_pass = d.forward(&[&pred]).unwrap();
    let real_pass = d.forward(&[&real]).unwrap();
    let gf = loss_discriminator_grad(&fake_pass.conf[0], DiscriminatorTarget::Prediction, &include).unwrap();
    let gr = loss_discriminator_grad(&real_pass.conf[0], DiscriminatorTarget::GroundTruth, &include).unwrap();
    let mut g = d.backward(&fake_pass, &[gf], true, false).params.unwrap();
    g.add_scaled(&d.backward(&real_pass, &[gr], true, false).params.unwrap(), 1.0);
    let loss = |flat: &[f64]| {
        let dn = DiscNet::from_params(d.config.clone(), with_flat(&d.params, flat))?;
        Ok(loss_discriminator(&dn.confidence(&pred)?, DiscriminatorTarget::Prediction, &include)?.value
            + loss_discriminator(&dn.confidence(&real)?, DiscriminatorTarget::GroundTruth, &include)?.value)
    };
    report("discriminator", grad_check(loss, &d.params.flatten(), &g.flatten(), STEP).unwrap());
}

#[test]
fn global_discriminator_gradients() {
    let cfg = DiscNetConfig {
        fully_convolutional: false,
        input_size: Some([32, 32]),
        ..disc_cfg(2)
    };
    let mut d = DiscNet::<f64>::new(cfg, 9).unwrap();
    lift_biases(&mut d.params, 109);
    let net = seg_net(2, 9);
    let pred = net.predict(&image(32, 9)).unwrap();
    let pass = d.forward_global(&[&pred]).unwrap();
    // Adversarial loss on the single score: -ln s.
    let g = d.backward_global(&pass, &[-1.0 / pass.scores[0]], true, false).params.unwrap();
    let loss = |flat: &[f64]| {
        let dn = DiscNet::from_params(d.config.clone(), with_flat(&d.params, flat))?;
        Ok(-dn.forward_global(&[&pred])?.scores[0].ln())
    };
    report("global", grad_check(loss, &d.params.flatten(), &g.flatten(), STEP).unwrap());
}
