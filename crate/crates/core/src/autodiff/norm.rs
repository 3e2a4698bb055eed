use super::{Backward, Element, Result, Tensor, TensorError};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

/// Learnable affine parameters and running statistics of one batch-norm
/// layer over `channels` channels.
#[derive(Debug, Clone)]
pub struct BatchNormState<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    /// Not trained by gradient; updated in place by training-mode passes.
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Element> BatchNormState<T> {
    /// gamma = 1, beta = 0, running mean 0 and variance 1.
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::param(vec![T::one(); channels], &[channels]).expect("length matches"),
            beta: Tensor::param(vec![T::zero(); channels], &[channels]).expect("length matches"),
            running_mean: Tensor::new(vec![T::zero(); channels], &[channels]).expect("length matches"),
            running_var: Tensor::new(vec![T::one(); channels], &[channels]).expect("length matches"),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

struct BatchNormOp<T> {
    n: usize,
    channels: usize,
    plane: usize,
    x_hat: Vec<T>,
    inv_std: Vec<f64>,
    train: bool,
}

impl<T: Element> BatchNormOp<T> {
    fn channel_iter(&self, c: usize) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        (0..self.n).map(move |b| {
            let start = (b * self.channels + c) * self.plane;
            start..start + self.plane
        })
    }
}

impl<T: Element> Backward<T> for BatchNormOp<T> {
    fn name(&self) -> &'static str {
        "batch_norm2d"
    }

    fn backward(&self, parents: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let gamma = parents[1].data();
        let m = (self.n * self.plane) as f64;
        let mut gx = parents[0].requires_grad().then(|| vec![T::zero(); grad.len()]);
        let mut g_gamma = vec![T::zero(); self.channels];
        let mut g_beta = vec![T::zero(); self.channels];
        for c in 0..self.channels {
            let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
            for r in self.channel_iter(c) {
                for (dy, xh) in grad[r.clone()].iter().zip(&self.x_hat[r]) {
                    sum_dy += dy.as_f64();
                    sum_dy_xhat += dy.as_f64() * xh.as_f64();
                }
            }
            g_gamma[c] = T::of(sum_dy_xhat);
            g_beta[c] = T::of(sum_dy);
            if let Some(gx) = gx.as_mut() {
                let g = gamma[c].as_f64() * self.inv_std[c];
                for r in self.channel_iter(c) {
                    for ((out, dy), xh) in gx[r.clone()].iter_mut().zip(&grad[r.clone()]).zip(&self.x_hat[r]) {
                        *out = T::of(if self.train {
                            g / m * (m * dy.as_f64() - sum_dy - xh.as_f64() * sum_dy_xhat)
                        } else {
                            g * dy.as_f64()
                        });
                    }
                }
            }
        }
        vec![
            gx,
            parents[1].requires_grad().then_some(g_gamma),
            parents[2].requires_grad().then_some(g_beta),
        ]
    }
}

/// Per-channel normalization of an NCHW tensor followed by the affine map
/// `gamma * x_hat + beta`.
///
/// In training mode the batch statistics (biased variance) normalize the
/// input and the running estimates move towards them with momentum
/// [`BN_MOMENTUM`], using the unbiased variance. In evaluation mode the
/// running estimates are used and left unchanged.
pub fn batch_norm2d<T: Element>(x: &Tensor<T>, state: &BatchNormState<T>, train: bool) -> Result<Tensor<T>> {
    const OP: &str = "batch_norm2d";
    let (n, c, h, w) = x
        .nchw()
        .ok_or_else(|| TensorError::InvalidShape { op: OP, reason: format!("input must be rank 4, got {:?}", x.shape()) })?;
    if c != state.channels() {
        return Err(TensorError::ShapeMismatch { op: OP, lhs: x.shape().to_vec(), rhs: state.gamma.shape().to_vec() });
    }
    let plane = h * w;
    let m = n * plane;
    if train && m < 2 {
        return Err(TensorError::DegenerateBatch(m));
    }
    let mut op = BatchNormOp { n, channels: c, plane, x_hat: vec![T::zero(); x.numel()], inv_std: vec![0.0; c], train };
    let mut out = vec![T::zero(); x.numel()];
    {
        let xd = x.data();
        let (gamma, beta) = (state.gamma.data(), state.beta.data());
        let mut rm = state.running_mean.data_mut();
        let mut rv = state.running_var.data_mut();
        for ch in 0..c {
            let (mu, var) = if train {
                let mut sum = 0.0f64;
                for r in op.channel_iter(ch) {
                    sum += xd[r].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mu = sum / m as f64;
                let mut ss = 0.0f64;
                for r in op.channel_iter(ch) {
                    ss += xd[r].iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>();
                }
                let var = ss / m as f64;
                let unbiased = ss / (m - 1) as f64;
                rm[ch] = T::of((1.0 - BN_MOMENTUM) * rm[ch].as_f64() + BN_MOMENTUM * mu);
                rv[ch] = T::of((1.0 - BN_MOMENTUM) * rv[ch].as_f64() + BN_MOMENTUM * unbiased);
                (mu, var)
            } else {
                (rm[ch].as_f64(), rv[ch].as_f64())
            };
            let inv_std = 1.0 / (var + BN_EPSILON).sqrt();
            op.inv_std[ch] = inv_std;
            let (g, b) = (gamma[ch].as_f64(), beta[ch].as_f64());
            for bi in 0..n {
                let r = (bi * c + ch) * plane..(bi * c + ch + 1) * plane;
                for ((o, xh), &v) in out[r.clone()].iter_mut().zip(&mut op.x_hat[r.clone()]).zip(&xd[r]) {
                    let norm = (v.as_f64() - mu) * inv_std;
                    *xh = T::of(norm);
                    *o = T::of(g * norm + b);
                }
            }
        }
    }
    Tensor::from_op(out, x.shape().to_vec(), vec![x.clone(), state.gamma.clone(), state.beta.clone()], op)
}

#[cfg(test)]
mod tests {
    use super::super::test_util::{max_rel_error, random};
    use super::super::{mul, sum};
    use super::*;

    #[test]
    fn training_output_is_standardized() {
        let x = random(&[4, 3, 5, 5], 1, -3.0, 7.0, false);
        let st = BatchNormState::<f64>::new(3);
        let y = batch_norm2d(&x, &st, true).unwrap();
        let yd = y.data();
        for c in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|b| yd[(b * 3 + c) * 25..(b * 3 + c + 1) * 25].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn running_statistics_follow_momentum() {
        let x = Tensor::<f64>::new(vec![1.0, 3.0, 5.0, 7.0], &[2, 1, 1, 2]).unwrap();
        let st = BatchNormState::new(1);
        batch_norm2d(&x, &st, true).unwrap();
        // mean 4, unbiased variance 20/3
        assert!((st.running_mean.item() - 0.4).abs() < 1e-12);
        assert!((st.running_var.item() - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
        let before = (st.running_mean.item(), st.running_var.item());
        let y = batch_norm2d(&x, &st, false).unwrap();
        assert_eq!(before, (st.running_mean.item(), st.running_var.item()));
        let expect = (1.0 - before.0) / (before.1 + BN_EPSILON).sqrt();
        assert!((y.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn single_value_batch_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 2, 1, 1]);
        let st = BatchNormState::new(2);
        assert_eq!(batch_norm2d(&x, &st, true).unwrap_err(), TensorError::DegenerateBatch(1));
        assert!(batch_norm2d(&x, &st, false).is_ok());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = random(&[2, 3, 4, 4], 5, -2.0, 2.0, true);
        let st = BatchNormState::<f64>::new(3);
        st.gamma.data_mut().copy_from_slice(&[0.5, 1.5, -1.0]);
        st.beta.data_mut().copy_from_slice(&[0.1, -0.2, 0.3]);
        st.running_mean.data_mut().copy_from_slice(&[0.2, -0.1, 0.0]);
        st.running_var.data_mut().copy_from_slice(&[1.3, 0.7, 2.0]);
        let probe = random(&[2, 3, 4, 4], 6, -1.0, 1.0, false);
        for train in [true, false] {
            let err = max_rel_error(&[x.clone(), st.gamma.clone(), st.beta.clone()], 40, 7, |t| {
                let s = BatchNormState {
                    gamma: t[1].clone(),
                    beta: t[2].clone(),
                    running_mean: st.running_mean.clone(),
                    running_var: st.running_var.clone(),
                };
                // keep the running statistics fixed across probes
                let (rm, rv) = (s.running_mean.to_vec(), s.running_var.to_vec());
                let out = sum(&mul(&batch_norm2d(&t[0], &s, train).unwrap(), &probe).unwrap());
                s.running_mean.data_mut().copy_from_slice(&rm);
                s.running_var.data_mut().copy_from_slice(&rv);
                out
            });
            assert!(err < 1e-6, "train={train}: {err}");
        }
    }
}
