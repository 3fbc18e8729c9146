//! Adam optimizer over [`Mlp`] parameters.

use serde::{Deserialize, Serialize};

use super::mlp::{Gradient, Mlp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    m: Gradient,
    v: Gradient,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: Gradient::zeros_like(net),
            v: Gradient::zeros_like(net),
        }
    }

    /// One descent step along `grad`.
    pub fn step(&mut self, net: &mut Mlp, grad: &Gradient) {
        self.steps += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.steps as i32);
        let c2 = 1.0 - b2.powi(self.steps as i32);
        let (lr, eps) = (self.lr, self.eps);
        let apply = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for (((p, g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        };
        for (k, layer) in net.layers.iter_mut().enumerate() {
            let g = &grad.layers[k];
            let (m, v) = (&mut self.m.layers[k], &mut self.v.layers[k]);
            apply(layer.weight.as_mut_slice(), g.weight.as_slice(), m.weight.as_mut_slice(), v.weight.as_mut_slice());
            apply(layer.bias.as_mut_slice(), g.bias.as_slice(), m.bias.as_mut_slice(), v.bias.as_mut_slice());
        }
    }
}
