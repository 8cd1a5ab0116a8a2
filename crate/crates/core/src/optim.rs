//! Adaptive-moment gradient descent.

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: Vec::new(),
        }
    }

    /// One update of every parameter from its gradient. Parameters are
    /// matched to their moment estimates by position, so the same ordering
    /// must be used on every call.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) {
        self.step_scaled(params, grads, &vec![1.0; params.len()]);
    }

    /// Like [`Adam::step`], with the learning rate of parameter `i`
    /// multiplied by `lr_scale[i]`.
    pub fn step_scaled(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr_scale: &[f64]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        assert_eq!(params.len(), lr_scale.len(), "one scale per parameter");
        if self.moments.is_empty() {
            self.moments = params.iter().map(|p| (vec![0.0; p.len()], vec![0.0; p.len()])).collect();
        }
        self.t += 1;
        if self.lr == 0.0 {
            return;
        }
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), (m, v)), &scale) in params.iter_mut().zip(grads).zip(&mut self.moments).zip(lr_scale) {
            let lr = self.lr * scale;
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *x -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
