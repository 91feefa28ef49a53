use super::{Scalar, Tensor4};
use crate::error::{Error, Result};

/// Per-pixel integer class labels with dims `(N, H, W)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u32>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::shape(
                "label_map",
                format!("{} labels for {n}x{h}x{w}", data.len()),
            ));
        }
        Ok(LabelMap { n, h, w, data })
    }

    pub fn filled(n: usize, h: usize, w: usize, label: u32) -> Self {
        LabelMap {
            n,
            h,
            w,
            data: vec![label; n * h * w],
        }
    }

    pub fn image(&self, n: usize) -> &[u32] {
        let len = self.h * self.w;
        &self.data[n * len..(n + 1) * len]
    }

    pub fn stack(maps: &[&LabelMap]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::invalid("label_map", "no label maps to stack"))?;
        let mut data = Vec::new();
        let mut n = 0;
        for m in maps {
            if (m.h, m.w) != (first.h, first.w) {
                return Err(Error::shape(
                    "label_map",
                    format!("{}x{} vs {}x{}", m.h, m.w, first.h, first.w),
                ));
            }
            n += m.n;
            data.extend_from_slice(&m.data);
        }
        LabelMap::new(n, first.h, first.w, data)
    }

    /// Channel-wise argmax of logits; ties go to the lowest class index.
    pub fn argmax<T: Scalar>(logits: &Tensor4<T>) -> Self {
        let s = logits.shape();
        let plane = s.plane_len();
        let mut data = vec![0u32; s.n * plane];
        for n in 0..s.n {
            for i in 0..plane {
                let mut best = 0;
                let mut best_v = logits.data()[n * s.c * plane + i];
                for c in 1..s.c {
                    let v = logits.data()[(n * s.c + c) * plane + i];
                    if v > best_v {
                        best = c;
                        best_v = v;
                    }
                }
                data[n * plane + i] = best as u32;
            }
        }
        LabelMap {
            n: s.n,
            h: s.h,
            w: s.w,
            data,
        }
    }
}

fn count_valid<T: Scalar>(
    logits: &Tensor4<T>,
    labels: &LabelMap,
    ignore_index: u32,
) -> Result<usize> {
    let s = logits.shape();
    if (labels.n, labels.h, labels.w) != (s.n, s.h, s.w) {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!(
                "labels {}x{}x{} vs logits {s}",
                labels.n, labels.h, labels.w
            ),
        ));
    }
    let mut valid = 0usize;
    for (i, &l) in labels.data.iter().enumerate() {
        if l == ignore_index {
            continue;
        }
        if l as usize >= s.c {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("label {l} at pixel {i} outside [0, {})", s.c),
            ));
        }
        valid += 1;
    }
    Ok(valid)
}

/// Cross-entropy of every pixel in `(n, h, w)` order, zero where ignored.
pub fn pixel_cross_entropy<T: Scalar>(
    logits: &Tensor4<T>,
    labels: &LabelMap,
    ignore_index: u32,
) -> Result<Vec<T>> {
    count_valid(logits, labels, ignore_index)?;
    let s = logits.shape();
    let plane = s.plane_len();
    let mut out = vec![T::zero(); s.n * plane];
    for n in 0..s.n {
        for i in 0..plane {
            let label = labels.data[n * plane + i];
            if label == ignore_index {
                continue;
            }
            let at = |c: usize| logits.data()[(n * s.c + c) * plane + i];
            let max = (0..s.c).map(at).fold(T::neg_infinity(), T::max);
            let z = (0..s.c).fold(T::zero(), |z, c| z + (at(c) - max).exp());
            out[n * plane + i] = z.ln() + max - at(label as usize);
        }
    }
    Ok(out)
}

/// Mean per-pixel cross-entropy of `softmax(logits)` over non-ignored pixels,
/// with its exact gradient. Ignored pixels contribute neither loss nor
/// gradient; if every pixel is ignored the loss is zero.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor4<T>,
    labels: &LabelMap,
    ignore_index: u32,
) -> Result<(T, Tensor4<T>)> {
    let valid = count_valid(logits, labels, ignore_index)?;
    let s = logits.shape();
    let plane = s.plane_len();
    let mut grad = Tensor4::zeros(s);
    if valid == 0 {
        return Ok((T::zero(), grad));
    }
    let inv = T::from_f64(1.0 / valid as f64);
    let mut total = T::zero();
    let mut probs = vec![T::zero(); s.c];
    for n in 0..s.n {
        for i in 0..plane {
            let label = labels.data[n * plane + i];
            if label == ignore_index {
                continue;
            }
            let at = |c: usize| (n * s.c + c) * plane + i;
            let max = (0..s.c)
                .map(|c| logits.data()[at(c)])
                .fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (c, p) in probs.iter_mut().enumerate() {
                *p = (logits.data()[at(c)] - max).exp();
                z = z + *p;
            }
            let log_z = z.ln() + max;
            total = total + (log_z - logits.data()[at(label as usize)]);
            let g = grad.data_mut();
            for (c, &p) in probs.iter().enumerate() {
                let target = if c == label as usize {
                    T::one()
                } else {
                    T::zero()
                };
                g[at(c)] = (p / z - target) * inv;
            }
        }
    }
    Ok((total * inv, grad))
}
