//! Backprop against central finite differences.
//!
//! The check promotes the model to `f64` and drives the same generic kernels
//! used for training, so the comparison is not swamped by `f32` rounding.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::Model;
use super::net::{self, LayerParams};
use crate::image::Image;

pub const FD_STEP: f64 = 1e-5;

/// Result of comparing analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_dev: f64,
    /// Worst deviation per parameter layer, then the input as the last entry.
    pub per_tensor: Vec<f64>,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|)`, zero when both vanish.
pub fn relative_deviation(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn loss64(model: &Model, params: &[LayerParams<f64>], input: &[f64], label: usize) -> f64 {
    let logits = net::forward(model.plan(), params, input, None);
    net::cross_entropy(&logits, label).0
}

fn coord(params: &mut [LayerParams<f64>], p: usize, bias: bool, j: usize) -> &mut f64 {
    if bias {
        &mut params[p].b[j]
    } else {
        &mut params[p].w[j]
    }
}

/// Samples up to `per_tensor` coordinates from every weight tensor, bias
/// vector, and the input, and returns the worst relative deviation.
pub fn gradient_check(model: &Model, image: &Image, label: usize, per_tensor: usize, seed: u64) -> GradCheck {
    let plan = model.plan();
    let params: Vec<LayerParams<f64>> = model.params().iter().map(|p| p.cast::<f64>()).collect();
    let input: Vec<f64> = image.to_chw_unit().iter().map(|&v| v as f64).collect();

    let trace = net::forward_trace(plan, &params, &input, None, None);
    let (_, d) = net::cross_entropy(trace.logits(), label);
    let mut grads: Vec<LayerParams<f64>> = params.iter().map(LayerParams::zeros_like).collect();
    let trainable = vec![true; params.len()];
    let d_input = net::backward(plan, &params, &trace, &d, &mut grads, &trainable, true).expect("requested");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per = Vec::new();
    let mut checked = 0;
    for p in 0..params.len() {
        let mut worst = 0.0f64;
        for bias in [false, true] {
            let len = if bias { params[p].b.len() } else { params[p].w.len() };
            for j in sample(&mut rng, len, per_tensor.min(len)) {
                let mut probe = params.clone();
                let orig = *coord(&mut probe, p, bias, j);
                *coord(&mut probe, p, bias, j) = orig + FD_STEP;
                let up = loss64(model, &probe, &input, label);
                *coord(&mut probe, p, bias, j) = orig - FD_STEP;
                let down = loss64(model, &probe, &input, label);
                let numeric = (up - down) / (2.0 * FD_STEP);
                let analytic = if bias { grads[p].b[j] } else { grads[p].w[j] };
                worst = worst.max(relative_deviation(analytic, numeric));
                checked += 1;
            }
        }
        per.push(worst);
    }
    let mut worst_in = 0.0f64;
    for _ in 0..per_tensor.min(input.len()) {
        let j = rng.gen_range(0..input.len());
        let mut x = input.clone();
        x[j] += FD_STEP;
        let up = loss64(model, &params, &x, label);
        x[j] -= 2.0 * FD_STEP;
        let down = loss64(model, &params, &x, label);
        worst_in = worst_in.max(relative_deviation(d_input[j], (up - down) / (2.0 * FD_STEP)));
        checked += 1;
    }
    per.push(worst_in);
    GradCheck {
        max_rel_dev: per.iter().copied().fold(0.0, f64::max),
        per_tensor: per,
        checked,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::{ArchitectureSpec, LayerSpec};

    fn noisy(h: u32, w: u32, c: u32, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..h * w * c).map(|_| rng.gen()).collect();
        Image::new(h, w, c, px).unwrap()
    }

    #[test]
    fn mlp_matches_finite_differences() {
        let m = Model::build(&ArchitectureSpec::mlp([3, 3, 1], &[7, 5], 4), 1).unwrap();
        let g = gradient_check(&m, &noisy(3, 3, 1, 2), 2, 20, 3);
        assert!(g.max_rel_dev < 1e-3, "{g:?}");
        assert_eq!(g.per_tensor.len(), 4);
    }

    #[test]
    fn conv_stack_matches_finite_differences() {
        let spec = ArchitectureSpec {
            name: "probe".into(),
            input_shape: [8, 8, 2],
            classes: 3,
            layers: vec![
                LayerSpec::conv(4, 3),
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::conv_same(3, 3),
                LayerSpec::Dropout { rate: 0.3 },
                LayerSpec::dense(6),
                LayerSpec::head(3),
            ],
        };
        let m = Model::build(&spec, 4).unwrap();
        let g = gradient_check(&m, &noisy(8, 8, 2, 5), 1, 25, 6);
        assert!(g.max_rel_dev < 1e-3, "{g:?}");
    }

    #[test]
    fn zero_network_has_uniform_softmax_gradient() {
        let mut m = Model::build(&ArchitectureSpec::mlp([2, 2, 1], &[], 4), 0).unwrap();
        for p in m.params_mut() {
            p.w.iter_mut().for_each(|v| *v = 0.0);
        }
        let input = noisy(2, 2, 1, 7).to_chw_unit();
        let (_, _, logits) = m.input_gradient(&input, 1);
        assert!(logits.iter().all(|&v| v == 0.0));
        let params: Vec<LayerParams<f64>> = m.params().iter().map(|p| p.cast::<f64>()).collect();
        let x: Vec<f64> = input.iter().map(|&v| v as f64).collect();
        let trace = net::forward_trace(m.plan(), &params, &x, None, None);
        let (_, d) = net::cross_entropy(trace.logits(), 1);
        let mut grads: Vec<LayerParams<f64>> = params.iter().map(LayerParams::zeros_like).collect();
        net::backward(m.plan(), &params, &trace, &d, &mut grads, &[true], false);
        for (k, &g) in grads[0].b.iter().enumerate() {
            let want = if k == 1 { 0.25 - 1.0 } else { 0.25 };
            assert!((g - want).abs() < 1e-12);
        }
        let g = gradient_check(&m, &noisy(2, 2, 1, 7), 1, 8, 8);
        assert!(g.max_rel_dev < 1e-6, "{g:?}");
    }

    #[test]
    fn deviation_rules() {
        assert_eq!(relative_deviation(0.0, 0.0), 0.0);
        assert!((relative_deviation(1.0, 0.5) - 0.5).abs() < 1e-15);
    }
}
