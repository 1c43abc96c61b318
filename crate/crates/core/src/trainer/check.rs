//! Finite-difference check of the full training objective.

use rand::Rng;

use crate::diffcore::{grad_check, GradCheckOptions, GradCheckReport, Tensor};
use crate::error::Result;
use crate::losses::{overall_loss, DEFAULT_ALPHA};
use crate::model::{build_model, Bound, Mode, ModelConfig};

/// Small network used for gradient checks: 16-pixel input, 2×2 features.
pub fn gradcheck_model() -> ModelConfig {
    ModelConfig {
        input_size: 16,
        in_channels: 3,
        backbone_channels: vec![3, 4, 4],
        feature_side: 2,
        embed_dim: 8,
        ..ModelConfig::default()
    }
}

/// Gradient of L_overall with respect to every parameter, at f64, on a
/// two-sample batch with one labeled (spoof) and one unlabeled row.
pub fn check_objective_gradients(
    config: &ModelConfig,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut model = build_model::<f64>(config, seed)?;
    let shape = [2, config.in_channels, config.input_size, config.input_size];
    let mut rng = crate::rng::stream(seed, &[21]);
    let x1 = Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let x2 = Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let labels = [Some(1u8), None];
    let params: Vec<Tensor<f64>> = model.params().iter().map(|p| p.value.clone()).collect();
    grad_check(
        &params,
        |g, vars| {
            let b = Bound::from_vars(vars.to_vec());
            let a = g.constant(x1.clone());
            let c = g.constant(x2.clone());
            let out = model.forward_views(g, &b, a, c, Mode::Train)?;
            Ok(overall_loss(g, &out, &labels, DEFAULT_ALPHA)?.0.overall)
        },
        opts,
    )
}
