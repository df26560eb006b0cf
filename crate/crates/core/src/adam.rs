//! Adam optimizer over a list of parameter tensors.

use crate::telemetry;

pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: u64,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Adam {
    pub fn new(lr: f32, total_len: usize) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; total_len],
            v: vec![0.0; total_len],
        }
    }

    /// One update over matching parameter/gradient tensor lists. Counts as a
    /// single optimizer step regardless of how many tensors it touches.
    pub fn step(&mut self, params: Vec<&mut [f32]>, grads: Vec<&[f32]>) {
        assert_eq!(params.len(), grads.len());
        telemetry::record_optimizer_step();
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        let mut off = 0usize;
        for (p, g) in params.into_iter().zip(grads.into_iter()) {
            assert_eq!(p.len(), g.len());
            for i in 0..p.len() {
                let k = off + i;
                self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g[i];
                self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = self.m[k] / b1t;
                let vhat = self.v[k] / b2t;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            off += p.len();
        }
        assert_eq!(off, self.m.len(), "optimizer sized for different tensors");
    }
}
