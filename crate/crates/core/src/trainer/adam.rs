use crate::autodiff::{checked_mode, Element, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam over a fixed, ordered list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Element> {
    pub config: AdamConfig,
    pub step: u64,
    /// First and second moments, one vector per parameter.
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        Adam { config, step: 0, m: zeros(), v: zeros() }
    }

    /// Applies one update with learning rate `lr` using each parameter's
    /// accumulated gradient; a parameter without a gradient sees zero.
    pub fn step(&mut self, params: &[Tensor<T>], lr: f64) -> Result<(), TensorError> {
        if params.len() != self.m.len() || params.iter().zip(&self.m).any(|(p, m)| p.numel() != m.len()) {
            return Err(TensorError::ShapeMismatch {
                op: "adam",
                lhs: self.m.iter().map(Vec::len).collect(),
                rhs: params.iter().map(Tensor::numel).collect(),
            });
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powf(self.step as f64);
        let c2 = 1.0 - beta2.powf(self.step as f64);
        for ((p, m), v) in params.iter().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad_ref();
            let mut data = p.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i].as_f64());
                let mi = beta1 * m[i].as_f64() + (1.0 - beta1) * g;
                let vi = beta2 * v[i].as_f64() + (1.0 - beta2) * g * g;
                m[i] = T::of(mi);
                v[i] = T::of(vi);
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                data[i] = T::of(data[i].as_f64() - update);
            }
            if checked_mode() && data.iter().any(|x| !x.is_finite()) {
                return Err(TensorError::NonFinite { op: "adam" });
            }
        }
        Ok(())
    }
}
