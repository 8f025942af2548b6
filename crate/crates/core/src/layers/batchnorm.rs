//! Batch normalization over mini-batch statistics.
//!
//! The feature axis is axis 1. A `[batch, d]` input normalizes each column over
//! the batch; a `[batch, channels, h, w]` input normalizes each channel over
//! batch and spatial positions together.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug)]
struct BnCache<T> {
    shape: Vec<usize>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    mean: Vec<T>,
    var: Vec<T>,
}

/// Scale/shift parameters plus the statistics of the last training batch.
/// Eight interleaved partial sums combined in a fixed order at the end:
/// deterministic, and independent enough for the additions to pipeline.
struct Lanes<T> {
    acc: [T; 8],
}

impl<T: Scalar> Default for Lanes<T> {
    fn default() -> Self {
        Lanes { acc: [T::zero(); 8] }
    }
}

impl<T: Scalar> Lanes<T> {
    /// Element `i` of `xs` goes to lane `i % 8`.
    #[inline]
    fn add_mapped(&mut self, xs: &[T], f: impl Fn(T) -> T) {
        let chunks = xs.chunks_exact(8);
        let rest = chunks.remainder();
        for c in chunks {
            for (a, &v) in self.acc.iter_mut().zip(c) {
                *a += f(v);
            }
        }
        for (a, &v) in self.acc.iter_mut().zip(rest) {
            *a += f(v);
        }
    }

    fn total(&self) -> T {
        let a = &self.acc;
        ((a[0] + a[4]) + (a[2] + a[6])) + ((a[1] + a[5]) + (a[3] + a[7]))
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    gamma: Tensor<T>,
    beta: Tensor<T>,
    epsilon: T,
    cache: Option<BnCache<T>>,
}

/// Gradients of one batch-norm application.
#[derive(Clone, Debug)]
pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

struct Layout {
    outer: usize,
    features: usize,
    inner: usize,
}

impl Layout {
    fn count(&self) -> usize {
        self.outer * self.inner
    }
}

impl<T: Scalar> BatchNorm<T> {
    /// Identity-initialized: `gamma = 1`, `beta = 0`.
    pub fn new(features: usize, epsilon: f64) -> Result<Self> {
        Self::with_params(
            Tensor::full(&[features], T::one()),
            Tensor::zeros(&[features]),
            epsilon,
        )
    }

    pub fn with_params(gamma: Tensor<T>, beta: Tensor<T>, epsilon: f64) -> Result<Self> {
        if gamma.rank() != 1 || gamma.shape() != beta.shape() {
            return Err(Error::dim("batchnorm params", gamma.shape(), beta.shape()));
        }
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "batchnorm epsilon must be > 0, got {epsilon}"
            )));
        }
        Ok(BatchNorm {
            gamma,
            beta,
            epsilon: T::from_f64(epsilon),
            cache: None,
        })
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    pub fn gamma(&self) -> &Tensor<T> {
        &self.gamma
    }

    pub fn beta(&self) -> &Tensor<T> {
        &self.beta
    }

    pub fn gamma_mut(&mut self) -> &mut Tensor<T> {
        &mut self.gamma
    }

    pub fn beta_mut(&mut self) -> &mut Tensor<T> {
        &mut self.beta
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn epsilon(&self) -> T {
        self.epsilon
    }

    /// `(mean, variance)` per feature from the last `forward_train`.
    pub fn batch_stats(&self) -> Option<(&[T], &[T])> {
        self.cache.as_ref().map(|c| (&c.mean[..], &c.var[..]))
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn layout(&self, x: &Tensor<T>) -> Result<Layout> {
        let shape = x.shape();
        if shape.len() < 2 || shape[1] != self.features() {
            return Err(Error::dim("batchnorm", shape, &[0, self.features()]));
        }
        let layout = Layout {
            outer: shape[0],
            features: shape[1],
            inner: shape[2..].iter().product(),
        };
        if layout.count() < 2 {
            return Err(Error::InvalidBatch(format!(
                "batch statistics need at least 2 samples per feature, got {}",
                layout.count()
            )));
        }
        Ok(layout)
    }

    /// Per-feature batch mean, population variance and `1 / sqrt(var + eps)`.
    fn statistics(&self, data: &[T], l: &Layout) -> (Vec<T>, Vec<T>, Vec<T>) {
        let n = T::from_usize(l.count());
        let mut mean = vec![T::zero(); l.features];
        let mut var = vec![T::zero(); l.features];
        let mut inv_std = vec![T::zero(); l.features];
        for c in 0..l.features {
            let planes = || (0..l.outer).map(move |b| (b * l.features + c) * l.inner);
            let mut s = Lanes::default();
            for base in planes() {
                s.add_mapped(&data[base..base + l.inner], |v| v);
            }
            let m = s.total() / n;
            let mut ss = Lanes::default();
            for base in planes() {
                ss.add_mapped(&data[base..base + l.inner], |v| (v - m) * (v - m));
            }
            let ss = ss.total();
            mean[c] = m;
            var[c] = ss / n;
            inv_std[c] = T::one() / (var[c] + self.epsilon).sqrt();
        }
        (mean, var, inv_std)
    }

    /// Applies `gamma * (x - mean) * inv_std + beta`, optionally keeping `x̂`.
    fn normalize(&self, x: &Tensor<T>, keep_xhat: bool) -> Result<(Tensor<T>, Option<BnCache<T>>)> {
        let l = self.layout(x)?;
        let data = x.data();
        let (mean, var, inv_std) = self.statistics(data, &l);
        let mut xhat = if keep_xhat { vec![T::zero(); data.len()] } else { Vec::new() };
        let mut out = vec![T::zero(); data.len()];
        let gamma = self.gamma.data();
        let beta = self.beta.data();
        for b in 0..l.outer {
            for c in 0..l.features {
                let base = (b * l.features + c) * l.inner;
                let (m, s, g, be) = (mean[c], inv_std[c], gamma[c], beta[c]);
                let src = &data[base..base + l.inner];
                let dst = &mut out[base..base + l.inner];
                if keep_xhat {
                    for ((o, h), &v) in dst.iter_mut().zip(&mut xhat[base..base + l.inner]).zip(src) {
                        *h = (v - m) * s;
                        *o = g * *h + be;
                    }
                } else {
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o = g * ((v - m) * s) + be;
                    }
                }
            }
        }
        let y = Tensor::new(x.shape().to_vec(), out)?;
        let cache = keep_xhat.then(|| BnCache {
            shape: x.shape().to_vec(),
            xhat,
            inv_std,
            mean,
            var,
        });
        Ok((y, cache))
    }

    /// Normalize with the statistics of this batch, without caching.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.normalize(x, false).map(|(y, _)| y)
    }

    /// Normalize and keep what `backward` needs.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, cache) = self.normalize(x, true)?;
        self.cache = cache;
        Ok(y)
    }

    /// Exact gradients through the batch mean and variance. Consumes the cache.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<BnGrads<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("batchnorm backward called before forward".into()))?;
        if grad_out.shape() != &cache.shape[..] {
            return Err(Error::dim("batchnorm backward", grad_out.shape(), &cache.shape));
        }
        let l = self.layout(grad_out)?;
        let n = T::from_usize(l.count());
        let g = grad_out.data();
        let mut sum_g = vec![T::zero(); l.features];
        let mut sum_gx = vec![T::zero(); l.features];
        for b in 0..l.outer {
            for c in 0..l.features {
                let base = (b * l.features + c) * l.inner;
                for i in base..base + l.inner {
                    sum_g[c] += g[i];
                    sum_gx[c] += g[i] * cache.xhat[i];
                }
            }
        }
        let gamma = self.gamma.data();
        let mut dx = vec![T::zero(); g.len()];
        for b in 0..l.outer {
            for c in 0..l.features {
                let base = (b * l.features + c) * l.inner;
                let scale = gamma[c] * cache.inv_std[c] / n;
                for i in base..base + l.inner {
                    dx[i] = scale * (n * g[i] - sum_g[c] - cache.xhat[i] * sum_gx[c]);
                }
            }
        }
        Ok(BnGrads {
            input: Tensor::new(cache.shape, dx)?,
            gamma: Tensor::from_vec(sum_gx)?,
            beta: Tensor::from_vec(sum_g)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::reduce_mean_var;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalizes_column() {
        let bn = BatchNorm::<f64>::new(1, 1e-14).unwrap();
        let x = Tensor::new(vec![3, 1], vec![2.0, 4.0, 6.0]).unwrap();
        let y = bn.forward(&x).unwrap();
        let expect = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn can_represent_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_fn(&[16, 3], |_| rng.random_range(-4.0..4.0));
        let (mean, var) = reduce_mean_var(&x).unwrap();
        let gamma = var.map(|v| (v + DEFAULT_EPSILON).sqrt());
        let bn = BatchNorm::with_params(gamma, mean, DEFAULT_EPSILON).unwrap();
        let y = bn.forward(&x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_column_maps_to_beta() {
        let gamma = Tensor::from_vec(vec![2.5]).unwrap();
        let beta = Tensor::from_vec(vec![-0.75]).unwrap();
        let bn = BatchNorm::with_params(gamma, beta, DEFAULT_EPSILON).unwrap();
        let x = Tensor::new(vec![4, 1], vec![3.0; 4]).unwrap();
        assert_eq!(bn.forward(&x).unwrap().data(), &[-0.75; 4]);
    }

    #[test]
    fn standardizes_each_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn(&[64, 4], |i| rng.random_range(-1.0..1.0) * (i % 4 + 1) as f64 + 3.0);
        let bn = BatchNorm::<f64>::new(4, 1e-300).unwrap();
        let (m, v) = reduce_mean_var(&bn.forward(&x).unwrap()).unwrap();
        for j in 0..4 {
            assert!(m.data()[j].abs() < 1e-8);
            assert!((v.data()[j] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_sample_is_invalid_batch() {
        let mut bn = BatchNorm::<f64>::new(3, DEFAULT_EPSILON).unwrap();
        let x = Tensor::zeros(&[1, 3]);
        assert!(matches!(bn.forward_train(&x), Err(Error::InvalidBatch(_))));
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut bn = BatchNorm::<f64>::new(2, DEFAULT_EPSILON).unwrap();
        let g = Tensor::zeros(&[4, 2]);
        assert!(matches!(bn.backward(&g), Err(Error::State(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gamma_grad_and_beta_is_column_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_fn(&[8, 4], |_| rng.random_range(-2.0..2.0));
        let mut bn = BatchNorm::<f64>::new(4, DEFAULT_EPSILON).unwrap();
        bn.forward_train(&x).unwrap();
        let grads = bn.backward(&Tensor::zeros(&[8, 4])).unwrap();
        assert!(grads.gamma.data().iter().all(|&v| v == 0.0));

        bn.forward_train(&x).unwrap();
        let g = Tensor::from_fn(&[8, 4], |_| rng.random_range(-1.0..1.0));
        let grads = bn.backward(&g).unwrap();
        for j in 0..4 {
            let col: f64 = (0..8).map(|i| g.data()[i * 4 + j]).sum();
            assert!((grads.beta.data()[j] - col).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_nonpositive_epsilon() {
        assert!(BatchNorm::<f64>::new(2, 0.0).is_err());
    }
}
