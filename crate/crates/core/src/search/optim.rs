//! Momentum SGD with a cosine schedule for weights, Adam for architecture
//! logits. Updates act on flat slices so they can be checked against scalar
//! references.

use std::collections::HashMap;
use std::f64::consts::PI;

use super::config::AdamConfig;
use crate::graph::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// `min + ½(init − min)(1 + cos(π t / total))`, clamped at `t = total`.
pub fn cosine_lr(init: f64, min: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return init;
    }
    let f = t.min(total) as f64 / total as f64;
    min + 0.5 * (init - min) * (1.0 + (PI * f).cos())
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for (_, g) in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

/// `v ← μv + g + λw; w ← w − lr·v`.
pub fn sgd_update(w: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((wi, &gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *vi = momentum * *vi + gi + weight_decay * *wi;
        *wi -= lr * *vi;
    }
}

/// Bias-corrected Adam step `t` (1-based) with L2 weight decay folded into
/// the gradient.
pub fn adam_update(w: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, c: &AdamConfig) {
    let bc1 = 1.0 - c.beta1.powi(t as i32);
    let bc2 = 1.0 - c.beta2.powi(t as i32);
    for i in 0..w.len() {
        let gi = g[i] + c.weight_decay * w[i];
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        w[i] -= c.lr * mh / (vh.sqrt() + c.eps);
    }
}

#[derive(Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: HashMap<ParamId, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: HashMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        for (id, g) in grads {
            let p = store.get_mut(*id);
            let buf = self.buffers.entry(*id).or_insert_with(|| vec![0.0; g.numel()]);
            let mut w = p.value.to_vec();
            sgd_update(&mut w, g.data(), buf, lr, self.momentum, self.weight_decay);
            p.value = Tensor::new(p.value.shape(), w, p.value.dtype()).expect("shape unchanged");
        }
    }
}

#[derive(Debug)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        self.t += 1;
        for (id, g) in grads {
            let p = store.get_mut(*id);
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            let mut w = p.value.to_vec();
            adam_update(&mut w, g.data(), m, v, self.t, &self.config);
            p.value = Tensor::new(p.value.shape(), w, p.value.dtype()).expect("shape unchanged");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Role;
    use crate::tensor::DType;

    fn adam_cfg() -> AdamConfig {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }

    #[test]
    fn plain_sgd_step() {
        let mut w = [1.0];
        let mut v = [0.0];
        sgd_update(&mut w, &[2.0], &mut v, 0.1, 0.0, 0.0);
        assert!((w[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn cosine_endpoints_and_monotone() {
        assert_eq!(cosine_lr(0.025, 0.0, 0, 100), 0.025);
        assert!(cosine_lr(0.025, 0.0, 100, 100).abs() < 1e-15);
        let mut last = f64::INFINITY;
        for t in 0..=100 {
            let lr = cosine_lr(0.025, 0.001, t, 100);
            assert!(lr <= last);
            last = lr;
        }
    }

    #[test]
    fn sgd_matches_scalar_reference() {
        let (mu, wd) = (0.9, 3e-4);
        let grads: Vec<f64> = (0..50).map(|t| ((t as f64) * 0.7).sin()).collect();
        let (mut w, mut v) = ([0.5], [0.0]);
        let (mut rw, mut rv) = (0.5f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            let lr = cosine_lr(0.025, 0.0, t, grads.len());
            sgd_update(&mut w, &[g], &mut v, lr, mu, wd);
            rv = mu * rv + g + wd * rw;
            rw -= lr * rv;
        }
        assert!((w[0] - rw).abs() <= 1e-12);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let c = AdamConfig {
            weight_decay: 0.0,
            ..adam_cfg()
        };
        let (mut w, mut m, mut v) = ([1.0], [0.0], [0.0]);
        adam_update(&mut w, &[0.3], &mut m, &mut v, 1, &c);
        let expect = 1.0 - c.lr * 0.3 / (0.3 + c.eps);
        assert!((w[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_grad_only_decays() {
        let c = adam_cfg();
        let (mut w, mut m, mut v) = ([2.0], [0.0], [0.0]);
        adam_update(&mut w, &[0.0], &mut m, &mut v, 1, &c);
        assert!(w[0] < 2.0 && w[0] > 2.0 - 2.0 * c.lr);
        let (mut z, mut m, mut v) = ([0.0], [0.0], [0.0]);
        adam_update(&mut z, &[0.0], &mut m, &mut v, 1, &c);
        assert_eq!(z[0], 0.0);
    }

    #[test]
    fn adam_matches_scalar_reference_over_100_steps() {
        let c = adam_cfg();
        let (mut w, mut m, mut v) = ([0.2], [0.0], [0.0]);
        let (mut rw, mut rm, mut rv) = (0.2f64, 0.0f64, 0.0f64);
        for t in 1..=100u64 {
            let g = (t as f64 * 0.37).cos() * 0.5;
            adam_update(&mut w, &[g], &mut m, &mut v, t, &c);
            let gi = g + c.weight_decay * rw;
            rm = 0.9 * rm + 0.1 * gi;
            rv = 0.999 * rv + 0.001 * gi * gi;
            let mh = rm / (1.0 - 0.9f64.powi(t as i32));
            let vh = rv / (1.0 - 0.999f64.powi(t as i32));
            rw -= c.lr * mh / (vh.sqrt() + c.eps);
        }
        assert!((w[0] - rw).abs() <= 1e-10);
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut store = ParamStore::default();
        let id = store.add("p", Tensor::zeros(&[2], DType::F64), Role::Weight);
        let mut g = vec![(id, Tensor::from_vec(vec![30.0, 40.0], DType::F64))];
        assert_eq!(clip_grad_norm(&mut g, 5.0), 50.0);
        let n: f64 = g[0].1.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(n <= 5.0 + 1e-9);
    }
}
