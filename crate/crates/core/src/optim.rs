//! Trainable parameters and the Adam optimizer.

use alloc::string::String;

use crate::tensor::Tensor4;

/// A trainable tensor with its gradient and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor4,
    pub grad: Tensor4,
    pub adam_m: Tensor4,
    pub adam_v: Tensor4,
    pub step_count: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor4) -> Self {
        let shape = value.shape();
        Parameter {
            name: name.into(),
            value,
            grad: Tensor4::zeros(shape),
            adam_m: Tensor4::zeros(shape),
            adam_v: Tensor4::zeros(shape),
            step_count: 0,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn grad_is_zero(&self) -> bool {
        self.grad.data().iter().all(|&g| g == 0.0)
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.value.data().iter().map(|v| v * v).sum::<f64>())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Adam {
            lr,
            ..Adam::default()
        }
    }

    /// One bias-corrected Adam update of every parameter; gradients are
    /// zeroed afterwards.
    pub fn step<'a>(&self, params: impl IntoIterator<Item = &'a mut Parameter>) {
        for p in params {
            p.step_count += 1;
            let t = p.step_count as f64;
            let bc1 = 1.0 - libm::pow(self.beta1, t);
            let bc2 = 1.0 - libm::pow(self.beta2, t);
            let g = p.grad.data();
            let m = p.adam_m.data_mut();
            for (m, &g) in m.iter_mut().zip(g) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            }
            let v = p.adam_v.data_mut();
            for (v, &g) in v.iter_mut().zip(p.grad.data()) {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            }
            let (m, v) = (p.adam_m.data(), p.adam_v.data());
            for ((x, &m), &v) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                *x -= self.lr * m_hat / (libm::sqrt(v_hat) + self.eps);
            }
            p.zero_grad();
        }
    }
}
