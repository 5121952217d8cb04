//! AdamW with decoupled weight decay and the warmup/linear-decay schedule.

use s2tt_autodiff::{ParamRegistry, Tensor};

use crate::error::{Error, Result};

/// Linear ramp `0 -> peak` over `warmup` steps, then linear decay to 0 at `max_steps`.
pub fn lr_at(step: usize, peak: f64, warmup: usize, max_steps: usize) -> Result<f64> {
    if step > max_steps || warmup >= max_steps {
        return Err(Error::Config(format!(
            "lr_at: step {step} outside schedule (warmup {warmup}, max {max_steps})"
        )));
    }
    if step < warmup {
        Ok(peak * step as f64 / warmup as f64)
    } else {
        Ok(peak * (max_steps - step) as f64 / (max_steps - warmup) as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to parameters of rank >= 2 only.
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// First/second moments for trainable parameters only, in registry order.
#[derive(Debug, Clone, Default)]
pub struct OptimState {
    pub step: u64,
    moments: Vec<Option<Moments>>,
}

impl OptimState {
    pub fn new(reg: &ParamRegistry<f32>) -> Self {
        Self {
            step: 0,
            moments: reg
                .iter()
                .map(|p| {
                    p.trainable.then(|| Moments {
                        m: vec![0.0; p.tensor.numel()],
                        v: vec![0.0; p.tensor.numel()],
                    })
                })
                .collect(),
        }
    }

    pub fn has_state(&self, index: usize) -> bool {
        self.moments.get(index).is_some_and(|m| m.is_some())
    }
}

impl AdamW {
    /// One update. `grads` is aligned with the registry; frozen entries are `None`.
    pub fn step(
        &self,
        reg: &mut ParamRegistry<f32>,
        grads: &[Option<Tensor<f32>>],
        state: &mut OptimState,
        lr: f64,
    ) -> Result<()> {
        if grads.len() != reg.len() || state.moments.len() != reg.len() {
            return Err(Error::Config("optimizer state does not match registry".into()));
        }
        for (p, g) in reg.iter().zip(grads) {
            if let Some(g) = g {
                if let Some(bad) = g.data().iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of `{}` at element {bad} is {}",
                        p.name,
                        g.data()[bad]
                    )));
                }
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), mom) in reg.params_mut().iter_mut().zip(grads).zip(&mut state.moments) {
            let (Some(g), Some(mom)) = (g, mom.as_mut()) else {
                continue;
            };
            if !p.trainable {
                continue;
            }
            let decay = if p.tensor.rank() >= 2 { self.weight_decay } else { 0.0 };
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                let gi = g.data()[i] as f64;
                let m = self.beta1 * mom.m[i] as f64 + (1.0 - self.beta1) * gi;
                let v = self.beta2 * mom.v[i] as f64 + (1.0 - self.beta2) * gi * gi;
                mom.m[i] = m as f32;
                mom.v[i] = v as f32;
                let w = data[i] as f64;
                let update = (m / bc1) / ((v / bc2).sqrt() + self.eps);
                data[i] = (w - lr * (update + decay * w)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use s2tt_autodiff::Group;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_at(0, 1e-3, 200, 5000).unwrap(), 0.0);
        assert_eq!(lr_at(200, 1e-3, 200, 5000).unwrap(), 1e-3);
        assert_eq!(lr_at(5000, 1e-3, 200, 5000).unwrap(), 0.0);
        assert!((lr_at(100, 1e-3, 200, 5000).unwrap() - 5e-4).abs() < 1e-15);
        assert!(lr_at(5001, 1e-3, 200, 5000).is_err());
    }

    fn one_param(shape: &[usize], value: f32) -> ParamRegistry<f32> {
        let mut reg = ParamRegistry::new();
        reg.register("p", Tensor::full(shape, value), Group::Encoder).unwrap();
        reg
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut reg = one_param(&[2, 2], 0.7);
        let mut st = OptimState::new(&reg);
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        opt.step(&mut reg, &[Some(Tensor::zeros(&[2, 2]))], &mut st, 0.1).unwrap();
        assert_eq!(reg.tensor("p").unwrap().data(), &[0.7; 4]);
    }

    #[test]
    fn hand_computed_single_step() {
        // m = 0.05, v = 0.00025, m̂ = 0.5, v̂ = 0.25, update = 0.5 / (0.5 + 1e-8)
        let update = 0.5 / (0.5 + 1e-8);
        let mut reg = one_param(&[1], 1.0);
        let mut st = OptimState::new(&reg);
        AdamW::default()
            .step(&mut reg, &[Some(Tensor::full(&[1], 0.5))], &mut st, 0.1)
            .unwrap();
        let got = reg.tensor("p").unwrap().data()[0] as f64;
        assert!((got - (1.0 - 0.1 * update)).abs() < 1e-7, "{got}");

        // matrices also decay: w -= lr * wd * w
        let mut reg = one_param(&[1, 1], 1.0);
        let mut st = OptimState::new(&reg);
        AdamW::default()
            .step(&mut reg, &[Some(Tensor::full(&[1, 1], 0.5))], &mut st, 0.1)
            .unwrap();
        let got = reg.tensor("p").unwrap().data()[0] as f64;
        assert!((got - (1.0 - 0.1 * update - 0.1 * 0.01)).abs() < 1e-7, "{got}");
    }

    #[test]
    fn frozen_parameter_has_no_state_and_is_untouched() {
        let mut reg = one_param(&[3], 2.0);
        reg.set_trainable("p", false).unwrap();
        let mut st = OptimState::new(&reg);
        assert!(!st.has_state(0));
        AdamW::default().step(&mut reg, &[None], &mut st, 0.1).unwrap();
        assert_eq!(reg.tensor("p").unwrap().data(), &[2.0; 3]);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut reg = one_param(&[2], 1.0);
        let mut st = OptimState::new(&reg);
        let bad = Tensor::new(vec![2], vec![0.0, f32::NAN]).unwrap();
        let err = AdamW::default()
            .step(&mut reg, &[Some(bad)], &mut st, 0.1)
            .unwrap_err();
        assert!(err.to_string().contains("`p`"), "{err}");
        assert_eq!(reg.tensor("p").unwrap().data(), &[1.0, 1.0]);
    }
}
