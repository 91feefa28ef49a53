use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_iter: usize,
}

impl SgdConfig {
    /// Base rate 5e-4, poly power 0.9, momentum 0.9, weight decay 1e-4.
    pub fn recipe(max_iter: usize) -> Self {
        SgdConfig {
            base_lr: 5e-4,
            power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            max_iter,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr > 0.0
            && self.power > 0.0
            && self.momentum >= 0.0
            && self.weight_decay >= 0.0
            && self.max_iter > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(
                "sgd",
                format!("bad hyperparameters {self:?}"),
            ))
        }
    }
}

/// `base_lr · (1 − iter / max_iter)^power`.
pub fn poly_lr(iter: usize, cfg: &SgdConfig) -> Result<f64> {
    if cfg.max_iter == 0 || iter > cfg.max_iter {
        return Err(Error::invalid(
            "poly_lr",
            format!("iteration {iter} outside 0..={}", cfg.max_iter),
        ));
    }
    Ok(cfg.base_lr * (1.0 - iter as f64 / cfg.max_iter as f64).powf(cfg.power))
}

/// One tensor's update: `v ← μ·v + g + λ·p`, `p ← p − lr·v`.
pub fn sgd_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::shape(
            "sgd_update",
            format!(
                "param {}, grad {}, velocity {}",
                param.len(),
                grad.len(),
                velocity.len()
            ),
        ));
    }
    let (lr, mu, wd) = (
        T::from_f64(lr),
        T::from_f64(momentum),
        T::from_f64(weight_decay),
    );
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = mu * *v + g + wd * *p;
        *p = *p - lr * *v;
    }
    Ok(())
}

/// Momentum buffers for every learnable tensor of a network.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub config: SgdConfig,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(OptimizerState {
            config,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    /// Applies the poly-scheduled update for `iter` and returns the rate used.
    pub fn step(&mut self, net: &mut Network<T>, grads: &[Vec<T>], iter: usize) -> Result<f64> {
        let lr = poly_lr(iter, &self.config)?;
        self.step_with_lr(net, grads, lr)?;
        Ok(lr)
    }

    /// Normalization parameters get no weight decay.
    pub fn step_with_lr(&mut self, net: &mut Network<T>, grads: &[Vec<T>], lr: f64) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
        }
        if grads.len() != self.velocity.len() {
            return Err(Error::shape(
                "sgd_step",
                format!(
                    "{} gradients for {} buffers",
                    grads.len(),
                    self.velocity.len()
                ),
            ));
        }
        let (mu, wd) = (self.config.momentum, self.config.weight_decay);
        let mut i = 0;
        let mut result = Ok(());
        net.for_each_learnable_mut(&mut |info, p| {
            if result.is_err() {
                return;
            }
            let Some(g) = grads.get(i) else {
                result = Err(Error::shape("sgd_step", "fewer gradients than parameters"));
                return;
            };
            let decay = if info.kind.decays() { wd } else { 0.0 };
            result = sgd_update(p, g, &mut self.velocity[i], lr, mu, decay)
                .map_err(|_| Error::shape("sgd_step", format!("{}: length mismatch", info.name)));
            i += 1;
        });
        result?;
        if i != grads.len() {
            return Err(Error::shape(
                "sgd_step",
                format!("{} gradients for {i} parameters", grads.len()),
            ));
        }
        Ok(())
    }
}
