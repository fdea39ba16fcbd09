//! Layers, parameter registry, seeded initialization, and the Adam optimizer.

use crate::autodiff::{self, ArrD, Tensor};
use ndarray::IxDyn;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// He-style normal initialization: N(0, sqrt(2 / fan_in)).
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrD {
    let std = (2.0 / fan_in as f64).sqrt();
    ArrD::from_shape_fn(IxDyn(shape), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

pub fn standard_normal(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrD {
    ArrD::from_shape_fn(IxDyn(shape), |_| StandardNormal.sample(rng))
}

pub fn zeros(shape: &[usize]) -> ArrD {
    ArrD::zeros(IxDyn(shape))
}

/// A named collection of trainable leaves. Order is stable and defines the
/// serialization layout.
#[derive(Default, Clone)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrD) -> Tensor {
        let t = Tensor::param(value);
        self.entries.push((name.into(), t.clone()));
        t
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn named(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn set_trainable(&self, flag: bool) {
        for (_, t) in &self.entries {
            t.set_requires_grad(flag);
        }
    }

    pub fn zero_grad(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over the exact little-endian bytes of every parameter, in
    /// registry order. Used for frozen-weights assertions and checkpoint
    /// fingerprints.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (name, t) in &self.entries {
            hasher.update(name.as_bytes());
            let v = t.value();
            let std = v.as_standard_layout();
            for x in std.iter() {
                hasher.update(x.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Fully connected layer.
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = params.add(format!("{name}.weight"), he_normal(&[out_dim, in_dim], in_dim, rng));
        let bias = params.add(format!("{name}.bias"), zeros(&[out_dim]));
        Linear { weight, bias }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        autodiff::linear(x, &self.weight, Some(&self.bias))
    }
}

/// 3x3 (or arbitrary) convolution layer with bias.
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * ksize * ksize;
        let weight = params.add(
            format!("{name}.weight"),
            he_normal(&[out_ch, in_ch, ksize, ksize], fan_in, rng),
        );
        let bias = params.add(format!("{name}.bias"), zeros(&[out_ch]));
        Conv2d {
            weight,
            bias,
            stride,
            pad: ksize / 2,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        autodiff::conv2d(x, &self.weight, Some(&self.bias), self.stride, self.pad)
    }
}

/// Adam with per-parameter first/second moment state.
pub struct Adam {
    params: Vec<Tensor>,
    m: Vec<ArrD>,
    v: Vec<ArrD>,
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    steps_taken: u64,
}

impl Adam {
    pub fn new(params: Vec<Tensor>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let m = params.iter().map(|p| ArrD::zeros(p.value().raw_dim())).collect();
        let v = params.iter().map(|p| ArrD::zeros(p.value().raw_dim())).collect();
        Adam {
            params,
            m,
            v,
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            steps_taken: 0,
        }
    }

    /// Apply one update from the accumulated gradients, then clear them.
    pub fn step(&mut self) {
        self.t += 1;
        self.steps_taken += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in self.params.iter().enumerate() {
            let Some(g) = p.grad() else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(&g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(&g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let lr = self.lr;
            let eps = self.eps;
            p.update_value(|val| {
                ndarray::Zip::from(val).and(&*m).and(&*v).for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
            });
            p.zero_grad();
        }
    }

    /// Number of `step` calls so far (update-count instrumentation).
    pub fn steps_taken(&self) -> u64 {
        self.steps_taken
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_minimizes_quadratic() {
        let x = Tensor::param(ArrD::from_elem(IxDyn(&[2]), 5.0));
        let mut opt = Adam::new(vec![x.clone()], 0.1, 0.9, 0.999);
        for _ in 0..200 {
            let y = autodiff::mean_all(&autodiff::square(&x));
            y.backward();
            opt.step();
        }
        assert!(x.value().iter().all(|v| v.abs() < 1e-2));
        assert_eq!(opt.steps_taken(), 200);
    }

    #[test]
    fn fingerprint_changes_with_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let t = ps.add("w", he_normal(&[3, 3], 3, &mut rng));
        let f1 = ps.fingerprint();
        t.update_value(|v| v[[0, 0]] += 1.0);
        let f2 = ps.fingerprint();
        assert_ne!(f1, f2);
        t.update_value(|v| v[[0, 0]] -= 1.0);
        assert_eq!(f1, ps.fingerprint());
    }

    #[test]
    fn he_init_is_seed_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(42);
        let mut b = ChaCha8Rng::seed_from_u64(42);
        assert_eq!(he_normal(&[4, 4], 4, &mut a), he_normal(&[4, 4], 4, &mut b));
    }
}
