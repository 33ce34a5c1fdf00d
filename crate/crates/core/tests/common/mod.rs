//! Shared test oracles, independent of the implementation paths they
//! check: central finite differences for gradients, and helpers for
//! random tensors and toy models.

#![allow(dead_code)]

use lineocr::rng::rng_from;
use lineocr::tensor::{Graph, ParamSet, Tensor, TensorId};
use rand::Rng;
use std::collections::HashMap;

pub fn rand_tensor(shape: Vec<usize>, scale: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape, data).unwrap()
}

pub fn rand_params(entries: &[(&str, Vec<usize>)], scale: f64, rng: &mut impl Rng) -> ParamSet<f64> {
    let mut params = ParamSet::new();
    for (name, shape) in entries {
        params.insert(name.to_string(), rand_tensor(shape.clone(), scale, rng));
    }
    params
}

/// Central finite-difference gradient check at 64-bit.
///
/// `build` constructs the forward pass on a graph, reading every
/// differentiated tensor through `Graph::param`. The check projects
/// the output onto fixed random weights, runs the tape backward for
/// analytic gradients, then re-evaluates the projected forward at
/// theta +/- h for every parameter element. Asserts
/// |analytic - fd| < tol * max(1, |analytic|, |fd|).
pub fn fd_check(
    params: &ParamSet<f64>,
    build: impl Fn(&mut Graph<f64>, &ParamSet<f64>) -> lineocr::Result<TensorId>,
    seed: u64,
    h: f64,
    tol: f64,
) -> f64 {
    let mut g = Graph::new();
    let out = build(&mut g, params).expect("forward build failed");
    let n = g.value(out).numel();
    let mut rng = rng_from(seed, &[0xfd]);
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    g.backward_seeded(out, &weights).expect("backward failed");
    let analytic: HashMap<String, Vec<f64>> = g
        .param_grads()
        .map(|(k, v)| (k.to_string(), v.to_vec()))
        .collect();

    let project = |ps: &ParamSet<f64>| -> f64 {
        let mut g = Graph::inference();
        let out = build(&mut g, ps).expect("forward build failed");
        g.value(out)
            .data()
            .iter()
            .zip(&weights)
            .map(|(a, b)| a * b)
            .sum()
    };

    let mut max_rel = 0.0f64;
    for (name, tensor) in params.iter() {
        let an = analytic
            .get(name)
            .unwrap_or_else(|| panic!("no analytic gradient recorded for {name}"));
        for i in 0..tensor.numel() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= h;
            let fd = (project(&plus) - project(&minus)) / (2.0 * h);
            let a = an[i];
            let rel = (a - fd).abs() / 1.0f64.max(a.abs()).max(fd.abs());
            assert!(
                rel < tol,
                "{name}[{i}]: analytic {a:.12e}, finite-diff {fd:.12e}, rel {rel:.3e} >= {tol:.1e}"
            );
            max_rel = max_rel.max(rel);
        }
    }
    max_rel
}

/// Tiny encoder-only config for gradient checks: 4x4 grayscale input,
/// 2x2 patches, D=8, 1 layer, 2 heads.
pub fn tiny_encoder_config() -> lineocr::encoder::EncoderConfig {
    lineocr::encoder::EncoderConfig {
        resize_h: 4,
        resize_w: 4,
        patch: 2,
        channels: 1,
        hidden: 8,
        layers: 1,
        heads: 2,
        ffn: 16,
        use_distillation_token: false,
        dropout: 0.0,
    }
}

pub fn tiny_decoder_config(vocab: usize) -> lineocr::decoder::DecoderConfig {
    lineocr::decoder::DecoderConfig {
        hidden: 8,
        layers: 1,
        heads: 2,
        vocab,
        max_positions: 8,
        ffn: 16,
        dropout: 0.0,
    }
}

/// Random grayscale image with pixels in [0, 1].
pub fn rand_image(h: usize, w: usize, rng: &mut impl Rng) -> lineocr::ImageTensor {
    let pixels: Vec<f32> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
    lineocr::ImageTensor::new(1, h, w, pixels).unwrap()
}
