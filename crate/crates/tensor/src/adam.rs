use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// β₁ = 0.5 as used for GAN training; β₂ and ε keep the usual defaults.
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update on flat buffers. `t` is the step number
/// *after* incrementing (1 on the first step).
pub fn adam_update(cfg: &AdamConfig, t: u64, param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64]) {
    let bc1 = 1.0 - cfg.beta1.powf(t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(t as f64);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// Adam state for every parameter of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, id: ParamId) -> &Tensor {
        &self.m[id.0]
    }

    pub fn second_moment(&self, id: ParamId) -> &Tensor {
        &self.v[id.0]
    }

    /// Applies one update; `grads[i]` belongs to parameter `i` of the store.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(TensorError::invalid(
                "adam",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        for (i, g) in grads.iter().enumerate() {
            g.expect_shape("adam", params.get(ParamId(i)).shape())?;
        }
        self.t += 1;
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(ParamId(i));
            adam_update(&self.config, self.t, p.data_mut(), g.data(), self.m[i].data_mut(), self.v[i].data_mut());
        }
        Ok(())
    }

    /// `(name, tensor)` pairs in checkpoint naming: `<param>.m`, `<param>.v`
    /// and the scalar `adam.t`.
    pub fn named_state(&self, params: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.m.len() + 1);
        for (i, (name, _)) in params.iter().enumerate() {
            out.push((format!("{name}.m"), self.m[i].clone()));
            out.push((format!("{name}.v"), self.v[i].clone()));
        }
        out.push(("adam.t".to_string(), Tensor::scalar(self.t as f64)));
        out
    }

    pub fn restore<'a>(
        config: AdamConfig,
        params: &ParamStore,
        mut lookup: impl FnMut(&str) -> Option<&'a Tensor>,
    ) -> Result<Self> {
        let mut fetch = |name: String, shape: &[usize]| -> Result<Tensor> {
            let t = lookup(&name).ok_or(TensorError::MissingTensor(name))?;
            t.expect_shape("adam", shape)?;
            Ok(t.clone())
        };
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, p) in params.iter() {
            m.push(fetch(format!("{name}.m"), p.shape())?);
            v.push(fetch(format!("{name}.v"), p.shape())?);
        }
        let t = fetch("adam.t".into(), &[])?.item().unwrap_or(0.0) as u64;
        Ok(Self { config, t, m, v })
    }
}
