use super::{Mode, Scalar, Tensor4};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization parameters and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Scalar> BnParams<T> {
    /// `gamma = 1`, `beta = 0`, running mean 0 and running variance 1.
    pub fn new(channels: usize) -> Self {
        BnParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::from_f64(BN_EPS),
            momentum: T::from_f64(BN_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Folds the batch statistics recorded in a train-mode cache into the
    /// running estimates. The running variance uses the unbiased estimate.
    pub fn update_running(&mut self, cache: &BnCache<T>) {
        if cache.mode != Mode::Train {
            return;
        }
        let m = self.momentum;
        let keep = T::one() - m;
        let correction = if cache.count > 1 {
            T::from_f64(cache.count as f64 / (cache.count - 1) as f64)
        } else {
            T::one()
        };
        for c in 0..self.channels() {
            self.running_mean[c] = keep * self.running_mean[c] + m * cache.batch_mean[c];
            self.running_var[c] = keep * self.running_var[c] + m * cache.batch_var[c] * correction;
        }
    }
}

/// What the backward pass needs from a batch-norm forward.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub mode: Mode,
    pub normalized: Tensor4<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    /// Biased batch variance (divided by the element count).
    pub batch_var: Vec<T>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnGrads<T> {
    pub input: Tensor4<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Forward pass without touching the running statistics.
pub fn batchnorm2d_forward<T: Scalar>(
    x: &Tensor4<T>,
    p: &BnParams<T>,
    mode: Mode,
) -> Result<(Tensor4<T>, BnCache<T>)> {
    let s = x.shape();
    if s.c != p.channels()
        || p.beta.len() != s.c
        || p.running_mean.len() != s.c
        || p.running_var.len() != s.c
    {
        return Err(Error::shape(
            "batchnorm2d",
            format!(
                "input channels {} but parameters hold {}",
                s.c,
                p.channels()
            ),
        ));
    }
    let count = s.n * s.plane_len();
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    if mode == Mode::Train {
        if count == 0 {
            return Err(Error::shape("batchnorm2d", format!("empty batch {s}")));
        }
        let inv_count = T::from_f64(1.0 / count as f64);
        for c in 0..s.c {
            let sum = (0..s.n).fold(T::zero(), |acc, n| {
                x.plane(n, c).iter().fold(acc, |a, &v| a + v)
            });
            let mu = sum * inv_count;
            let sq = (0..s.n).fold(T::zero(), |acc, n| {
                x.plane(n, c)
                    .iter()
                    .fold(acc, |a, &v| a + (v - mu) * (v - mu))
            });
            mean[c] = mu;
            var[c] = sq * inv_count;
        }
    } else {
        mean.copy_from_slice(&p.running_mean);
        var.copy_from_slice(&p.running_var);
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + p.eps).sqrt()).collect();

    let mut normalized = Tensor4::zeros(s);
    let mut y = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let (mu, is, g, b) = (mean[c], inv_std[c], p.gamma[c], p.beta[c]);
            let src = x.plane(n, c);
            for (d, &v) in normalized.plane_mut(n, c).iter_mut().zip(src) {
                *d = (v - mu) * is;
            }
            for (d, &h) in y.plane_mut(n, c).iter_mut().zip(normalized.plane(n, c)) {
                *d = g * h + b;
            }
        }
    }
    let cache = BnCache {
        mode,
        normalized,
        inv_std,
        batch_mean: mean,
        batch_var: var,
        count,
    };
    Ok((y, cache))
}

/// Forward pass; in train mode the running statistics are updated.
pub fn batchnorm2d<T: Scalar>(
    x: &Tensor4<T>,
    p: &mut BnParams<T>,
    mode: Mode,
) -> Result<Tensor4<T>> {
    let (y, cache) = batchnorm2d_forward(x, p, mode)?;
    p.update_running(&cache);
    Ok(y)
}

pub fn batchnorm2d_backward<T: Scalar>(
    cache: &BnCache<T>,
    p: &BnParams<T>,
    dy: &Tensor4<T>,
) -> Result<BnGrads<T>> {
    let s = cache.normalized.shape();
    if dy.shape() != s {
        return Err(Error::shape(
            "batchnorm2d_backward",
            format!("upstream gradient {} but output is {s}", dy.shape()),
        ));
    }
    let xhat = &cache.normalized;
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for c in 0..s.c {
        for n in 0..s.n {
            for (&g, &h) in dy.plane(n, c).iter().zip(xhat.plane(n, c)) {
                dbeta[c] = dbeta[c] + g;
                dgamma[c] = dgamma[c] + g * h;
            }
        }
    }

    let mut dx = Tensor4::zeros(s);
    let m = T::from_f64(cache.count as f64);
    for c in 0..s.c {
        let scale = p.gamma[c] * cache.inv_std[c];
        for n in 0..s.n {
            let up = dy.plane(n, c);
            let h = xhat.plane(n, c);
            let dst = dx.plane_mut(n, c);
            match cache.mode {
                Mode::Train => {
                    let k = scale / m;
                    for i in 0..up.len() {
                        dst[i] = k * (m * up[i] - dbeta[c] - h[i] * dgamma[c]);
                    }
                }
                Mode::Infer => {
                    for i in 0..up.len() {
                        dst[i] = scale * up[i];
                    }
                }
            }
        }
    }
    Ok(BnGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor4<f64> {
        Tensor4::from_fn([2, 3, 4, 5], |i| {
            ((i * 37 % 101) as f64 * 0.173).sin() * 4.0 + 1.5
        })
    }

    #[test]
    fn train_mode_standardizes_channels() {
        let x = sample();
        let mut p = BnParams::new(3);
        let y = batchnorm2d(&x, &mut p, Mode::Train).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|n| y.plane(n, c).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-10, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
        assert!(p.running_mean.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn zero_gamma_gives_constant_beta() {
        let mut p = BnParams::new(3);
        p.gamma = vec![0.0; 3];
        p.beta = vec![2.5; 3];
        let y = batchnorm2d(&sample(), &mut p, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn identity_configuration_in_infer_mode() {
        // only eps separates the output from the input: y = x / sqrt(1 + eps)
        let x = sample();
        let mut p = BnParams::new(3);
        let y = batchnorm2d(&x, &mut p, Mode::Infer).unwrap();
        let shrink = 1.0 / (1.0 + BN_EPS).sqrt();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((b - a * shrink).abs() <= 1e-15 * a.abs().max(1.0));
            assert!((a - b).abs() <= 5.1e-6 * a.abs());
        }
        let small = x.scale(0.03);
        let y = batchnorm2d(&small, &mut p, Mode::Infer).unwrap();
        assert!(small.max_abs_diff(&y) < 1e-6);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut p = BnParams::<f64>::new(2);
        assert!(batchnorm2d(&sample(), &mut p, Mode::Train).is_err());
    }

    #[test]
    fn running_stats_use_unbiased_variance() {
        let x = Tensor4::<f64>::from_vec([1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
        let mut p = BnParams::new(1);
        batchnorm2d(&x, &mut p, Mode::Train).unwrap();
        assert!((p.running_mean[0] - 0.1).abs() < 1e-15);
        // biased var 1, unbiased 2: 0.9 * 1 + 0.1 * 2
        assert!((p.running_var[0] - 1.1).abs() < 1e-15);
    }
}
