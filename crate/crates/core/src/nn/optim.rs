use std::collections::HashMap;

use ndarray::ArrayD;

use super::param::{Module, Param};

pub trait Optimizer {
    /// Applies one update to every trainable weight of `module` using its
    /// accumulated gradients. `prefix` keeps state of different modules apart.
    fn step(&mut self, module: &mut dyn Module, prefix: &str);

    fn set_lr(&mut self, lr: f64);
    fn lr(&self) -> f64;
}

/// Stochastic gradient descent with momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, ArrayD<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, module: &mut dyn Module, prefix: &str) {
        let (lr, mom, wd) = (self.lr, self.momentum, self.weight_decay);
        let vel = &mut self.velocity;
        module.visit_mut(prefix, &mut |name, p: &mut Param| {
            if !p.wants_grad() {
                return;
            }
            let mut g = p.grad.clone();
            if wd != 0.0 {
                g.scaled_add(wd, &p.value);
            }
            let v = vel
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            if mom != 0.0 {
                v.zip_mut_with(&g, |vv, &gg| *vv = mom * *vv + gg);
                p.value.scaled_add(-lr, v);
            } else {
                p.value.scaled_add(-lr, &g);
            }
        });
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    fn lr(&self) -> f64 {
        self.lr
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: HashMap<String, (u64, ArrayD<f64>, ArrayD<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: HashMap::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, module: &mut dyn Module, prefix: &str) {
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let state = &mut self.state;
        module.visit_mut(prefix, &mut |name, p: &mut Param| {
            if !p.wants_grad() {
                return;
            }
            let (t, m, v) = state.entry(name.to_string()).or_insert_with(|| {
                (
                    0,
                    ArrayD::zeros(p.value.raw_dim()),
                    ArrayD::zeros(p.value.raw_dim()),
                )
            });
            *t += 1;
            let c1 = 1.0 - b1.powi(*t as i32);
            let c2 = 1.0 - b2.powi(*t as i32);
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *w -= lr * mh / (vh.sqrt() + eps);
                });
        });
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    fn lr(&self) -> f64 {
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn sgd_momentum_matches_hand_rolled() {
        let mut p = Param::new(ArrayD::from_elem(IxDyn(&[1]), 1.0));
        let mut opt = Sgd::new(0.1, 0.9, 0.01);
        let (mut w, mut v) = (1.0f64, 0.0f64);
        for _ in 0..5 {
            // d/dw of w^2
            p.grad[[0]] = 2.0 * p.value[[0]];
            opt.step(&mut p, "w");
            let g = 2.0 * w + 0.01 * w;
            v = 0.9 * v + g;
            w -= 0.1 * v;
            assert!((p.value[[0]] - w).abs() < 1e-14);
        }
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = Param::new(ArrayD::from_elem(IxDyn(&[2]), 0.0));
        p.grad[[0]] = 3.0;
        p.grad[[1]] = -1e-3;
        let mut opt = Adam::new(0.01);
        opt.step(&mut p, "w");
        assert!((p.value[[0]] + 0.01).abs() < 1e-8);
        assert!((p.value[[1]] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn frozen_params_are_untouched() {
        let mut p = Param::new(ArrayD::from_elem(IxDyn(&[1]), 1.0));
        p.grad[[0]] = 1.0;
        p.trainable = false;
        let mut opt = Sgd::new(0.1, 0.9, 0.1);
        opt.step(&mut p, "w");
        assert_eq!(p.value[[0]], 1.0);
    }
}
