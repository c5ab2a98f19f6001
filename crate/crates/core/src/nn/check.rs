//! Finite-difference verification of the backward pass.

use super::{LayerSpec, ModelParams, ModelSpec, Mode, Network, NnError, Tensor};
use crate::seed::seed_tree;
use rand::Rng;

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub params: usize,
    pub max_rel_error: f64,
}

/// Small (< 2k parameter) networks that together exercise every layer type.
pub fn layer_suite() -> Vec<ModelSpec> {
    use LayerSpec::*;
    let input = [2, 6, 6];
    let make = |name: &str, layers: Vec<LayerSpec>, feature_layer: usize| ModelSpec {
        name: name.into(),
        tier: None,
        input_shape: input,
        layers,
        feature_layer,
        num_classes: 4,
        l2_lambda: 0.001,
        dropout: 0.0,
    };
    vec![
        make(
            "conv_pool_dense",
            vec![LayerSpec::conv(2, 3), Relu, AvgPool2, Flatten, LayerSpec::dense(27, 4)],
            3,
        ),
        make(
            "maxpool_pointwise",
            vec![
                LayerSpec::conv(2, 3),
                Relu,
                MaxPool2,
                Conv2d { in_channels: 3, out_channels: 2, kernel: 1 },
                Flatten,
                LayerSpec::dense(18, 4),
            ],
            4,
        ),
        make(
            "batchnorm_adaptive",
            vec![
                LayerSpec::conv(2, 3),
                BatchNorm { channels: 3 },
                Relu,
                AdaptiveAvgPool { size: 2 },
                Flatten,
                LayerSpec::dense(12, 4),
            ],
            4,
        ),
        make(
            "residual_squeeze_excite",
            vec![
                LayerSpec::conv(2, 4),
                Residual {
                    body: vec![
                        LayerSpec::conv(4, 4),
                        Relu,
                        LayerSpec::conv(4, 4),
                        SqueezeExcite { channels: 4, hidden: 2 },
                    ],
                },
                Relu,
                AdaptiveAvgPool { size: 1 },
                Flatten,
                LayerSpec::dense(4, 4),
            ],
            4,
        ),
        make(
            "dense_dropout",
            vec![Flatten, LayerSpec::dense(72, 8), Relu, Dropout { rate: 0.3 }, LayerSpec::dense(8, 4)],
            1,
        ),
    ]
}

/// Compares the analytic FedProx gradient of `spec` against central
/// differences with step `h` on every parameter, in 64-bit arithmetic.
pub fn gradient_check(spec: &ModelSpec, seed: u64, mu: f64, h: f64) -> Result<GradCheck, NnError> {
    let net = Network::new(spec.clone())?;
    let mut rng = seed_tree(seed, &["gradcheck", &spec.name]);
    let mut params: ModelParams<f64> = net.init_params(&mut rng);
    // perturb biases and scales away from their deterministic init
    params.values.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    let prev: Vec<f64> = params.values.iter().map(|v| v + rng.random_range(-0.2..0.2)).collect();
    let batch = 3;
    let [c, hh, ww] = spec.input_shape;
    let input = Tensor::new(
        vec![batch, c, hh, ww],
        (0..batch * c * hh * ww).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..spec.num_classes)).collect();
    let l2 = spec.l2_lambda;

    let loss_at = |p: &ModelParams<f64>| -> Result<(f64, Vec<f64>), NnError> {
        let mut mask_rng = seed_tree(seed, &["gradcheck-dropout"]);
        let (loss, grad, _) =
            net.loss_and_gradient(p, None, &input, &labels, Some(&prev), mu, l2, Mode::Train(&mut mask_rng))?;
        Ok((loss, grad))
    };
    let (_, analytic) = loss_at(&params)?;
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for i in 0..params.values.len() {
        let base = params.values[i];
        probe.values[i] = base + h;
        let (up, _) = loss_at(&probe)?;
        probe.values[i] = base - h;
        let (down, _) = loss_at(&probe)?;
        probe.values[i] = base;
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic[i].abs().max(numeric.abs());
        let err = if scale < 1e-7 { (analytic[i] - numeric).abs() } else { (analytic[i] - numeric).abs() / scale };
        worst = worst.max(err);
    }
    Ok(GradCheck { name: spec.name.clone(), params: net.param_count(), max_rel_error: worst })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_type_matches_finite_differences() {
        for spec in layer_suite() {
            let report = gradient_check(&spec, 7, 0.01, 1e-5).unwrap();
            assert!(report.params <= 2000, "{} has {} params", report.name, report.params);
            assert!(report.max_rel_error <= 1e-4, "{}: {}", report.name, report.max_rel_error);
        }
    }

    #[test]
    fn proximal_term_alone_matches_finite_differences() {
        let spec = &layer_suite()[0];
        let report = gradient_check(spec, 11, 5.0, 1e-5).unwrap();
        assert!(report.max_rel_error <= 1e-4, "{}", report.max_rel_error);
    }
}
