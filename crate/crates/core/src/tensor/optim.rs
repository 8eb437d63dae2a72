use std::collections::BTreeMap;

use super::ParamTree;
use crate::error::{Error, Result};

/// Moments and step counter for [`AdamW`]. Only trainable parameters get
/// moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first_moment: BTreeMap<String, Vec<f64>>,
    pub second_moment: BTreeMap<String, Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new() -> Self {
        OptimizerState {
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
            step: 0,
        }
    }
}

impl Default for OptimizerState {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-15,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
        }
    }
}

impl AdamW {
    /// Global L2 norm over the gradients of all trainable parameters.
    pub fn grad_norm(params: &ParamTree) -> f64 {
        let mut s = 0.0;
        for (_, e) in params.iter() {
            if e.tensor.requires_grad {
                if let Some(g) = &e.tensor.grad {
                    s += g.iter().map(|x| x * x).sum::<f64>();
                }
            }
        }
        s.sqrt()
    }

    /// One update of every trainable parameter. Frozen tensors are not
    /// touched and get no optimizer state. Returns the pre-clip grad norm.
    pub fn step(&self, params: &mut ParamTree, state: &mut OptimizerState, lr: f64) -> Result<f64> {
        for (name, e) in params.iter() {
            if e.tensor.requires_grad && e.tensor.grad.is_none() {
                return Err(Error::MissingGradient(name.to_string()));
            }
        }
        let norm = Self::grad_norm(params);
        let clip_scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, e) in params.iter_mut() {
            let tensor = &mut e.tensor;
            if !tensor.requires_grad {
                continue;
            }
            let n = tensor.data.len();
            let m = state
                .first_moment
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; n]);
            let v = state
                .second_moment
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; n]);
            let grad = tensor.grad.as_ref().expect("checked above");
            for i in 0..n {
                let g = grad[i] * clip_scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let p = &mut tensor.data[i];
                *p -= lr * self.weight_decay * *p;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Branch, Tensor};

    fn single(g: f64) -> ParamTree {
        let mut p = ParamTree::new();
        p.insert("w", Branch::Understanding, Tensor::from_vec(vec![0.5])).unwrap();
        p.get_mut("w").unwrap().grad = Some(vec![g]);
        p
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut p = single(0.0);
        let mut s = OptimizerState::new();
        AdamW::default().step(&mut p, &mut s, 1e-3).unwrap();
        assert_eq!(p.get("w").unwrap().data[0], 0.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = 1, v̂ = 1 after bias correction, so the update is lr/(1 + eps).
        let mut p = single(1.0);
        let mut s = OptimizerState::new();
        let opt = AdamW {
            clip_norm: None,
            ..AdamW::default()
        };
        opt.step(&mut p, &mut s, 1e-3).unwrap();
        let expected = 0.5 - 1e-3 / (1.0 + 1e-15);
        assert!((p.get("w").unwrap().data[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn clip_rescales_to_unit_norm() {
        let mut p = ParamTree::new();
        p.insert("a", Branch::Understanding, Tensor::from_vec(vec![0.0, 0.0])).unwrap();
        p.get_mut("a").unwrap().grad = Some(vec![6.0, 8.0]);
        let mut s = OptimizerState::new();
        let norm = AdamW::default().step(&mut p, &mut s, 1e-3).unwrap();
        assert_eq!(norm, 10.0);
        // First moment holds (1-β1)·clipped grad.
        let m = &s.first_moment["a"];
        let clipped = [m[0] / 0.1, m[1] / 0.1];
        let n = (clipped[0] * clipped[0] + clipped[1] * clipped[1]).sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_untouched_and_stateless() {
        let mut p = single(1.0);
        p.insert("f", Branch::Generation, Tensor::from_vec(vec![3.0])).unwrap();
        p.apply_freeze(&[Branch::Generation]);
        p.get_mut("w").unwrap().grad = Some(vec![1.0]);
        let mut s = OptimizerState::new();
        AdamW::default().step(&mut p, &mut s, 1e-2).unwrap();
        assert_eq!(p.get("f").unwrap().data[0].to_bits(), 3.0f64.to_bits());
        assert!(!s.first_moment.contains_key("f"));
    }

    #[test]
    fn missing_grad_errors() {
        let mut p = single(1.0);
        p.get_mut("w").unwrap().grad = None;
        let mut s = OptimizerState::new();
        assert!(matches!(
            AdamW::default().step(&mut p, &mut s, 1e-3),
            Err(Error::MissingGradient(_))
        ));
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = single(0.3);
            let mut s = OptimizerState::new();
            for _ in 0..5 {
                AdamW::default().step(&mut p, &mut s, 1e-2).unwrap();
            }
            p.get("w").unwrap().data[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}
