//! Backprop against central differences in f64, every architecture.

use nodule_cascade::nn::{ArchConfig, ArchId, Mode, Model, Tensor};
use nodule_cascade::train::{loss_and_grads, output_loss};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn check(arch: ArchId, hw: usize, seed: u64) {
    let mut model: Model<f64> = Model::new(ArchConfig::new(arch, hw, hw), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, c) = (2, arch.input_channels());
    let xs: Vec<f64> = (0..b * c * hw * hw).map(|_| rng.gen()).collect();
    let x = Tensor::from_nchw(b, c, hw, hw, &xs).unwrap();
    let out = model.forward(&x, Mode::Inference).unwrap();
    let mut t = out.clone();
    if arch.is_classifier() {
        for i in 0..b {
            let m = f64::from(rng.gen_bool(0.5) as u8);
            t.data[i] = 1.0 - m;
            t.data[b + i] = m;
        }
    } else {
        t.data.iter_mut().for_each(|v| *v = f64::from(rng.gen_bool(0.3) as u8));
    }
    let (_, grads) = loss_and_grads(&model, &x, &t, Mode::Inference).unwrap();
    let coords: Vec<(usize, usize)> = model
        .net
        .params
        .iter()
        .enumerate()
        .flat_map(|(p, v)| (0..v.len()).map(move |i| (p, i)))
        .collect();
    let agrees = |a: f64, n: f64| {
        let scale = a.abs().max(n.abs());
        scale < 1e-12 || (a - n).abs() <= 1e-4 * scale
    };
    // A 1e-3 step can straddle a relu or max-pool switch; such points are
    // rechecked with a step small enough to stay on one side.
    for &(p, i) in coords.choose_multiple(&mut rng, 32) {
        let orig = model.net.params[p][i];
        let mut at = |v: f64| {
            model.net.params[p][i] = v;
            let y = model.forward(&x, Mode::Inference).unwrap();
            output_loss(arch, &y, &t).unwrap()
        };
        let central = |h: f64, at: &mut dyn FnMut(f64) -> f64| (at(orig + h) - at(orig - h)) / (2.0 * h);
        let analytic = grads[p][i];
        let coarse = central(1e-3, &mut at);
        if !agrees(analytic, coarse) {
            let fine = central(1e-5, &mut at);
            assert!(
                agrees(analytic, fine),
                "{} param {p}[{i}]: analytic {analytic:e}, numeric {coarse:e} (1e-3) {fine:e} (1e-5)",
                arch.as_str()
            );
        }
        model.net.params[p][i] = orig;
    }
}

#[test]
fn segmentation_gradients() {
    check(ArchId::Segmentation, 16, 1);
}

#[test]
fn classifier_gradients() {
    check(ArchId::Classifier, 16, 2);
}

#[test]
fn baseline_gradients() {
    check(ArchId::BaselineFc, 8, 3);
    check(ArchId::BaselineEncDec, 16, 4);
}
