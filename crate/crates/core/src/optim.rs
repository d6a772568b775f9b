//! SGD and Adam over flat lists of parameter tensors.

use crate::tensor::Tensor;

pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self { lr }
    }

    pub fn step(&self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        for (p, g) in params.iter_mut().zip(grads) {
            let updated = p.sub(&g.mul_scalar(self.lr)).expect("sgd shapes");
            **p = updated;
        }
    }
}

pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let b1c = 1.0 - self.beta1.powi(self.t as i32);
        let b2c = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..grads.len() {
            let g = &grads[i];
            self.m[i] = self.m[i]
                .mul_scalar(self.beta1)
                .add(&g.mul_scalar(1.0 - self.beta1))
                .expect("adam m");
            self.v[i] = self.v[i]
                .mul_scalar(self.beta2)
                .add(&g.mul(g).expect("adam g2").mul_scalar(1.0 - self.beta2))
                .expect("adam v");
            let m_hat = self.m[i].mul_scalar(1.0 / b1c);
            let v_hat = self.v[i].mul_scalar(1.0 / b2c);
            let denom = v_hat.map(|x| x.sqrt() + self.eps);
            let delta = m_hat.div(&denom).expect("adam div").mul_scalar(self.lr);
            let updated = params[i].sub(&delta).expect("adam shapes");
            *params[i] = updated;
        }
    }
}
