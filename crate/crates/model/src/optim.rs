//! Adam with coupled L2 weight decay and global-norm gradient clipping.

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient before the moment updates.
    pub weight_decay: f64,
    /// Global gradient norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
            clip_norm: Some(10.0),
        }
    }
}

/// Moments are kept per parameter, in the parameter's position order.
/// Frozen parameters keep empty slots.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Option<Tensor>>,
    pub v: Vec<Option<Tensor>>,
}

/// Result of one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Global norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Self {
        Self {
            cfg,
            step: 0,
            m: vec![None; params.len()],
            v: vec![None; params.len()],
        }
    }

    /// Applies one update with learning rate `lr`. Gradients of frozen
    /// parameters are ignored even if present.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64) -> Result<StepReport, ModelError> {
        let mut collected = Vec::new();
        let mut sq = 0.0;
        for (i, (_, var, trainable)) in params.iter().enumerate() {
            if !trainable {
                continue;
            }
            if let Some(g) = grads.get(var.as_tensor()) {
                let g = g.detach().to_dtype(DType::F64)?;
                sq += g.sqr()?.sum_all()?.to_scalar::<f64>()?;
                collected.push((i, g));
            }
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(ModelError::Shape("non-finite gradient".into()));
        }
        let scale = match self.cfg.clip_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let vars: Vec<_> = params.iter().map(|(_, v, _)| v.clone()).collect();
        for (i, g) in collected {
            let var = &vars[i];
            let w = var.as_tensor().detach().to_dtype(DType::F64)?;
            let g = (g.affine(scale, 0.0)? + w.affine(self.cfg.weight_decay, 0.0)?)?;
            let m = match &self.m[i] {
                Some(m) => (m.affine(b1, 0.0)? + g.affine(1.0 - b1, 0.0)?)?,
                None => g.affine(1.0 - b1, 0.0)?,
            };
            let v = match &self.v[i] {
                Some(v) => (v.affine(b2, 0.0)? + g.sqr()?.affine(1.0 - b2, 0.0)?)?,
                None => g.sqr()?.affine(1.0 - b2, 0.0)?,
            };
            let denom = (v.affine(1.0 / bc2, 0.0)?.sqrt()? + self.cfg.eps)?;
            let update = (m.affine(lr / bc1, 0.0)? / denom)?;
            let new = (w - update)?.to_dtype(var.dtype())?;
            var.set(&new)?;
            self.m[i] = Some(m.detach());
            self.v[i] = Some(v.detach());
        }
        Ok(StepReport {
            grad_norm,
            clipped: scale < 1.0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{init_rng, Init};
    use candle_core::Device;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut rng = init_rng(0);
        let mut p = ParamStore::new(DType::F64, Device::Cpu);
        p.add("w", &[3], Init::Values(vec![1.0, -2.0, 0.5]), true, &mut rng).unwrap();
        p.add("frozen", &[1], Init::Const(3.0), false, &mut rng).unwrap();
        let cfg = AdamConfig { weight_decay: 0.0, clip_norm: None, ..Default::default() };
        let mut opt = Adam::new(cfg, &p);
        let loss = (p.get("w").unwrap().sqr().unwrap().sum_all().unwrap()
            + p.get("frozen").unwrap().sum_all().unwrap())
        .unwrap();
        opt.step(&p, &loss.backward().unwrap(), 0.1).unwrap();
        let w = p.values_f64("w").unwrap();
        for (a, b) in w.iter().zip([0.9, -1.9, 0.4]) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert_eq!(p.values_f64("frozen").unwrap(), vec![3.0]);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut rng = init_rng(0);
        let mut p = ParamStore::new(DType::F64, Device::Cpu);
        p.add("w", &[2], Init::Values(vec![300.0, 400.0]), true, &mut rng).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &p);
        let loss = p.get("w").unwrap().sqr().unwrap().sum_all().unwrap().affine(0.5, 0.0).unwrap();
        let r = opt.step(&p, &loss.backward().unwrap(), 1e-3).unwrap();
        assert!((r.grad_norm - 500.0).abs() < 1e-9);
        assert!(r.clipped);
        // After clipping, the first moment equals (1 - b1) * (g * 10/500 + wd * w).
        let m = opt.m[0].as_ref().unwrap().to_vec1::<f64>().unwrap();
        let expect0 = 0.1 * (300.0 * 0.02 + 1e-5 * 300.0);
        assert!((m[0] - expect0).abs() < 1e-9);
    }
}
