use std::f64::consts::PI;

use crate::diffcore::{Element, Tensor};
use crate::error::{Error, Result};
use crate::model::{Model, ParamKind};

use super::TrainConfig;

/// Cosine decay from `base_lr_start` to `base_lr_end`, scaled by batch/256.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} outside schedule of {total_steps} steps"
        )));
    }
    let (start, end) = (cfg.base_lr_start, cfg.base_lr_end);
    let t = step as f64 / total_steps as f64;
    let base = end + 0.5 * (start - end) * (1.0 + (PI * t).cos());
    Ok(base * cfg.batch_size as f64 / 256.0)
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + (g + λ·w)`, `w ← w − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    momentum: f64,
    weight_decay: f64,
    exclude_bn: bool,
    velocity: Vec<Tensor<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(model: &Model<T>, cfg: &TrainConfig) -> Self {
        Self {
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            exclude_bn: cfg.exclude_bn_from_weight_decay,
            velocity: model
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    pub fn step(&mut self, model: &mut Model<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(Error::shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.velocity.len()
            )));
        }
        let mu = T::from_f64(self.momentum);
        let lr = T::from_f64(lr);
        for ((p, g), v) in model
            .params_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.velocity)
        {
            if g.shape() != p.value.shape() {
                return Err(Error::shape(format!(
                    "gradient {:?} for parameter {} {:?}",
                    g.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            let is_bn = matches!(p.kind, ParamKind::BnGamma | ParamKind::BnBeta);
            let wd = if is_bn && self.exclude_bn {
                0.0
            } else {
                self.weight_decay
            };
            let wd = T::from_f64(wd);
            for ((w, &gi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(v.data_mut())
            {
                *vi = mu * *vi + (gi + wd * *w);
                *w = *w - lr * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let cfg = TrainConfig::default();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-15;
        assert!(close(lr_at(0, 100, &cfg).unwrap(), 0.0075));
        assert!(close(lr_at(100, 100, &cfg).unwrap(), 0.0025));
        assert!(close(lr_at(50, 100, &cfg).unwrap(), 0.005));
        assert!(lr_at(101, 100, &cfg).is_err());
        assert!(lr_at(0, 0, &cfg).is_err());
    }

    #[test]
    fn schedule_is_monotone() {
        let cfg = TrainConfig::default();
        let lrs: Vec<f64> = (0..=40).map(|s| lr_at(s, 40, &cfg).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
