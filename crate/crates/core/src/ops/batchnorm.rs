use crate::error::{dim_err, invalid, Result};
use crate::ops::Mode;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Per-channel batch normalization state.
///
/// Running statistics follow `running = momentum·running + (1 − momentum)·batch`
/// with the biased batch variance.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Scalar> BatchNormParams<T> {
    /// Unit scale, zero shift, zero mean, unit variance.
    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::full([channels], T::one()),
            beta: Tensor::zeros([channels]),
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::full([channels], T::one()),
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (name, t) in [
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if t.shape() != [c] {
                return Err(dim_err!("batchnorm {name} has shape {:?}, expected [{c}]", t.shape()));
            }
        }
        if self.running_var.data().iter().any(|&v| v < T::zero()) {
            return Err(invalid!("batchnorm running variance must be non-negative"));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(invalid!("batchnorm momentum must lie in (0,1), got {}", self.momentum));
        }
        if self.epsilon <= 0.0 {
            return Err(invalid!("batchnorm epsilon must be positive, got {}", self.epsilon));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let c = *x.shape().last().expect("tensors have rank ≥ 1");
        if c != self.channels() {
            return Err(dim_err!(
                "batchnorm has {} channels, input {:?} has {c}",
                self.channels(),
                x.shape()
            ));
        }
        Ok(c)
    }
}

/// Statistics a batchnorm forward pass leaves for its backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T = f32> {
    pub mode: Mode,
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct BatchNormOutput<T = f32> {
    pub output: Tensor<T>,
    pub cache: BatchNormCache<T>,
    /// New `(running_mean, running_var)` in train mode; the caller decides
    /// whether to commit them.
    pub running: Option<(Tensor<T>, Tensor<T>)>,
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads<T = f32> {
    pub input: Option<Tensor<T>>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Normalizes over every axis but the last (channels).
pub fn batchnorm<T: Scalar>(x: &Tensor<T>, p: &BatchNormParams<T>, mode: Mode) -> Result<BatchNormOutput<T>> {
    let c = p.check_input(x)?;
    let m = x.len() / c;
    let eps = p.epsilon;

    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        Mode::Train => {
            let mut sum = vec![0.0f64; c];
            for row in x.data().chunks(c) {
                for (s, &v) in sum.iter_mut().zip(row) {
                    *s += v.to_f64_lossy();
                }
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / m as f64).collect();
            let mut sq = vec![0.0f64; c];
            for row in x.data().chunks(c) {
                for ((s, &v), mu) in sq.iter_mut().zip(row).zip(&mean) {
                    let d = v.to_f64_lossy() - mu;
                    *s += d * d;
                }
            }
            (mean, sq.iter().map(|s| s / m as f64).collect())
        }
        Mode::Infer => (
            p.running_mean.data().iter().map(|v| v.to_f64_lossy()).collect(),
            p.running_var.data().iter().map(|v| v.to_f64_lossy()).collect(),
        ),
    };

    let mean_t: Vec<T> = mean.iter().map(|&v| T::from_f64_lossy(v)).collect();
    let inv_std: Vec<T> = var.iter().map(|&v| T::from_f64_lossy(1.0 / (v + eps).sqrt())).collect();
    let gamma = p.gamma.data();
    let beta = p.beta.data();

    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(c) {
        for j in 0..c {
            out.push((row[j] - mean_t[j]) * inv_std[j] * gamma[j] + beta[j]);
        }
    }

    let running = match mode {
        Mode::Train => {
            let mom = p.momentum;
            let blend = |old: &Tensor<T>, new: &[f64]| {
                let data = old
                    .data()
                    .iter()
                    .zip(new)
                    .map(|(&o, &n)| T::from_f64_lossy(mom * o.to_f64_lossy() + (1.0 - mom) * n))
                    .collect();
                Tensor::new([c], data).expect("channel vector")
            };
            Some((blend(&p.running_mean, &mean), blend(&p.running_var, &var)))
        }
        Mode::Infer => None,
    };

    Ok(BatchNormOutput {
        output: Tensor::new(x.shape().to_vec(), out)?,
        cache: BatchNormCache {
            mode,
            mean: mean_t,
            inv_std,
        },
        running,
    })
}

pub fn batchnorm_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &BatchNormParams<T>,
    cache: &BatchNormCache<T>,
    dy: &Tensor<T>,
    need_input: bool,
) -> Result<BatchNormGrads<T>> {
    let c = p.check_input(x)?;
    if dy.shape() != x.shape() {
        return Err(dim_err!(
            "batchnorm output gradient {:?} does not match input {:?}",
            dy.shape(),
            x.shape()
        ));
    }
    let m = x.len() / c;
    let gamma = p.gamma.data();

    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (xr, gr) in x.data().chunks(c).zip(dy.data().chunks(c)) {
        for j in 0..c {
            let xhat = (xr[j] - cache.mean[j]) * cache.inv_std[j];
            dgamma[j] += gr[j] * xhat;
            dbeta[j] += gr[j];
        }
    }

    let input = if need_input {
        let mut dx = Vec::with_capacity(x.len());
        match cache.mode {
            Mode::Train => {
                let mf = T::from_usize(m).expect("batch size");
                let scale: Vec<T> = (0..c).map(|j| gamma[j] * cache.inv_std[j] / mf).collect();
                for (xr, gr) in x.data().chunks(c).zip(dy.data().chunks(c)) {
                    for j in 0..c {
                        let xhat = (xr[j] - cache.mean[j]) * cache.inv_std[j];
                        dx.push(scale[j] * (mf * gr[j] - dbeta[j] - xhat * dgamma[j]));
                    }
                }
            }
            Mode::Infer => {
                for gr in dy.data().chunks(c) {
                    for j in 0..c {
                        dx.push(gr[j] * gamma[j] * cache.inv_std[j]);
                    }
                }
            }
        }
        Some(Tensor::new(x.shape().to_vec(), dx)?)
    } else {
        None
    };

    Ok(BatchNormGrads {
        input,
        gamma: Tensor::new([c], dgamma)?,
        beta: Tensor::new([c], dbeta)?,
    })
}
