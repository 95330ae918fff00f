//! AdamW with decoupled weight decay and the warm-up + linear-decay
//! learning-rate schedule, both per parameter group.

use serde::{Deserialize, Serialize};

use super::model::{ModelState, ParamGroup};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment estimates and the number of steps taken.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimState {
    pub fn new(len: usize) -> Self {
        OptimState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn for_model(model: &ModelState) -> Self {
        Self::new(model.len())
    }
}

/// Learning rate per parameter group for one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub encoder: f64,
    pub decoder: f64,
}

impl GroupRates {
    pub fn uniform(lr: f64) -> Self {
        GroupRates {
            encoder: lr,
            decoder: lr,
        }
    }

    pub fn get(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Decoder => self.decoder,
        }
    }
}

/// One AdamW update in place. Fails without touching anything when the
/// gradient has a non-finite entry or the lengths disagree.
pub fn adamw_step(
    model: &mut ModelState,
    grad: &[f64],
    opt: &mut OptimState,
    hp: &AdamW,
    rates: GroupRates,
) -> Result<()> {
    if grad.len() != model.len() || opt.m.len() != model.len() || opt.v.len() != model.len() {
        return Err(Error::shape(
            "adamw_step",
            model.len(),
            format!("grad {}, m {}, v {}", grad.len(), opt.m.len(), opt.v.len()),
        ));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i} is {}", grad[i])));
    }
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for block in &model.layout {
        let lr = rates.get(block.group);
        for i in block.range() {
            let g = grad[i];
            let p = &mut model.params[i];
            *p -= lr * hp.weight_decay * *p;
            opt.m[i] = hp.beta1 * opt.m[i] + (1.0 - hp.beta1) * g;
            opt.v[i] = hp.beta2 * opt.v[i] + (1.0 - hp.beta2) * g * g;
            let m_hat = opt.m[i] / bc1;
            let v_hat = opt.v[i] / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Linear warm-up from `base * warmup_ratio` to `base` over `warmup_steps`,
/// then linear decay to zero at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub warmup_ratio: f64,
}

impl LrSchedule {
    pub fn factor(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            let t = step as f64 / self.warmup_steps as f64;
            self.warmup_ratio + (1.0 - self.warmup_ratio) * t
        } else if step >= self.total_steps {
            0.0
        } else {
            let span = (self.total_steps - self.warmup_steps) as f64;
            (self.total_steps - step) as f64 / span
        }
    }

    pub fn lr_at(&self, step: u64, base: f64) -> f64 {
        base * self.factor(step)
    }

    pub fn rates(&self, step: u64, base: GroupRates) -> GroupRates {
        let f = self.factor(step);
        GroupRates {
            encoder: base.encoder * f,
            decoder: base.decoder * f,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::model::Arch;

    fn model_with(vals: f64) -> ModelState {
        let mut m = ModelState::zeros(Arch::Segmenter {
            in_channels: 1,
            widths: [1, 1, 1],
            strides: [1, 1, 1],
            kernel: 1,
            num_classes: 2,
        });
        m.params.iter_mut().for_each(|p| *p = vals);
        m
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut m = model_with(0.3);
        let before = m.clone();
        let mut o = OptimState::for_model(&m);
        let hp = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let g = vec![0.0; m.len()];
        adamw_step(&mut m, &g, &mut o, &hp, GroupRates::uniform(1e-3)).unwrap();
        assert_eq!(m, before);
        assert_eq!(o.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        for c in [2.5, -0.01] {
            let mut m = model_with(0.0);
            let mut o = OptimState::for_model(&m);
            let hp = AdamW {
                weight_decay: 0.0,
                ..AdamW::default()
            };
            let lr = 1e-2;
            let g = vec![c; m.len()];
            adamw_step(&mut m, &g, &mut o, &hp, GroupRates::uniform(lr)).unwrap();
            let expected = -c.signum() * lr * c.abs() / (c.abs() + hp.eps);
            for &p in &m.params {
                assert!((p - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn decay_only() {
        let mut m = model_with(2.0);
        let mut o = OptimState::for_model(&m);
        let lr = 0.1;
        let g = vec![0.0; m.len()];
        adamw_step(&mut m, &g, &mut o, &AdamW::default(), GroupRates::uniform(lr)).unwrap();
        for &p in &m.params {
            assert!((p - 2.0 * (1.0 - lr * 0.01)).abs() < 1e-15);
        }
    }

    #[test]
    fn groups_get_their_own_rate() {
        let mut m = model_with(0.0);
        let mut o = OptimState::for_model(&m);
        let hp = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let rates = GroupRates {
            encoder: 1e-3,
            decoder: 1e-2,
        };
        let g = vec![1.0; m.len()];
        adamw_step(&mut m, &g, &mut o, &hp, rates).unwrap();
        for b in &m.layout {
            let lr = rates.get(b.group);
            for i in b.range() {
                assert!((m.params[i] + lr).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut m = model_with(1.0);
        let before = m.clone();
        let mut o = OptimState::for_model(&m);
        let mut g = vec![0.0; m.len()];
        g[1] = f64::INFINITY;
        assert!(adamw_step(&mut m, &g, &mut o, &AdamW::default(), GroupRates::uniform(1e-3)).is_err());
        assert_eq!(m, before);
        assert_eq!(o.step, 0);
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule {
            warmup_steps: 1500,
            total_steps: 40_000,
            warmup_ratio: 1e-6,
        };
        assert!((s.lr_at(0, 6e-5) - 6e-5 * 1e-6).abs() < 1e-20);
        assert_eq!(s.lr_at(1500, 6e-5), 6e-5);
        assert_eq!(s.lr_at(1500, 6e-4), 6e-4);
        assert_eq!(s.lr_at(40_000, 6e-4), 0.0);
        assert!(s.lr_at(750, 1.0) > 0.49 && s.lr_at(750, 1.0) < 0.51);
        let mid = s.lr_at(20_750, 1.0);
        assert!((mid - 0.5).abs() < 1e-12);
        // Monotone up then down.
        assert!(s.lr_at(100, 1.0) < s.lr_at(200, 1.0));
        assert!(s.lr_at(3000, 1.0) > s.lr_at(4000, 1.0));
    }
}
