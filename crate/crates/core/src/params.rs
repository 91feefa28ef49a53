//! Named parameter tensors and weight initialization.

use std::collections::HashSet;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn suffix(self) -> &'static str {
        match self {
            ParamKind::ConvWeight => "weight",
            ParamKind::ConvBias => "bias",
            ParamKind::NormScale => "gamma",
            ParamKind::NormShift => "beta",
            ParamKind::RunningMean => "running_mean",
            ParamKind::RunningVar => "running_var",
        }
    }

    /// Running statistics are state, not learnable parameters.
    pub fn is_learnable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Whether weight decay applies. Normalization parameters are exempt.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::ConvBias)
    }
}

#[derive(Debug, Clone)]
pub struct ParamInfo {
    pub name: String,
    pub kind: ParamKind,
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

/// Ordered, uniquely named collection of tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<NamedTensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<T>) -> Result<()> {
        let name = name.into();
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Params(format!(
                "{name}: {} values for dims {dims:?}",
                data.len()
            )));
        }
        if self.get(&name).is_some() {
            return Err(Error::Params(format!("duplicate name {name}")));
        }
        self.entries.push(NamedTensor { name, dims, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor<T>> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn entries(&self) -> &[NamedTensor<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| NamedTensor {
                    name: e.name.clone(),
                    dims: e.dims.clone(),
                    data: e.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Names present in `expected` but not here, and names here that are not
    /// in `expected`, both in their original order.
    pub fn name_diff(&self, expected: &[String]) -> (Vec<String>, Vec<String>) {
        let have: HashSet<&str> = self.entries.iter().map(|e| e.name.as_str()).collect();
        let want: HashSet<&str> = expected.iter().map(String::as_str).collect();
        let missing = expected
            .iter()
            .filter(|n| !have.contains(n.as_str()))
            .cloned()
            .collect();
        let extra = self
            .entries
            .iter()
            .filter(|e| !want.contains(e.name.as_str()))
            .map(|e| e.name.clone())
            .collect();
        (missing, extra)
    }
}

/// Fan-in scaled uniform initialization, `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn fan_in_uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, out: &mut [T]) {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    for v in out {
        *v = T::from_f64(dist.sample(rng));
    }
}
