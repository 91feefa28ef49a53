//! Optimization recipe, segmentation metrics and a synthetic task small
//! enough to overfit on a CPU.

mod metrics;
mod optim;
mod synth;

pub use metrics::{ConfusionMatrix, MeanIou};
pub use optim::{poly_lr, sgd_update, OptimizerState, SgdConfig};
pub use synth::{hue_rgb, synth_dataset, Sample, SYNTH_LATTICE};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::{softmax_cross_entropy, LabelMap, Tensor4};

/// Label value that is never scored.
pub const IGNORE_INDEX: u32 = 255;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
    /// Train-set confusion of the final network in inference mode.
    pub confusion: ConfusionMatrix,
    pub pixel_accuracy: f64,
    pub miou: MeanIou,
}

/// Indices of the samples in batch `step`. Each epoch visits every sample
/// once, in a permutation drawn from `seed` and the epoch number, so no
/// two epochs share their batch compositions by construction.
pub fn batch_indices(len: usize, step: usize, batch_size: usize, seed: u64) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    let size = batch_size.min(len).max(1);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (0..size)
        .map(|i| {
            let pos = step * size + i;
            let epoch = pos / len;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                );
                let mut order: Vec<usize> = (0..len).collect();
                order.shuffle(&mut rng);
                cached = Some((epoch, order));
            }
            cached.as_ref().expect("filled above").1[pos % len]
        })
        .collect()
}

/// Stacks the selected samples into one batch.
pub fn batch_of(data: &[Sample], indices: &[usize]) -> Result<(Tensor4<f64>, LabelMap)> {
    if indices.is_empty() {
        return Err(Error::invalid("train", "empty batch"));
    }
    let picks = indices
        .iter()
        .map(|&i| {
            data.get(i)
                .ok_or_else(|| Error::invalid("train", format!("sample {i} out of {}", data.len())))
        })
        .collect::<Result<Vec<&Sample>>>()?;
    let images: Vec<&Tensor4<f64>> = picks.iter().map(|s| &s.image).collect();
    let labels: Vec<&LabelMap> = picks.iter().map(|s| &s.labels).collect();
    Ok((Tensor4::stack(&images)?, LabelMap::stack(&labels)?))
}

/// Confusion of the network's inference-mode predictions over `data`.
pub fn evaluate(net: &Network<f64>, data: &[Sample]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(net.spec().num_classes);
    for s in data {
        let logits = net.forward(&s.image)?;
        cm.update(&LabelMap::argmax(&logits), &s.labels, IGNORE_INDEX)?;
    }
    Ok(cm)
}

/// Runs `steps` iterations of forward, cross-entropy, backward and a
/// poly-scheduled SGD step, then scores the training set.
pub fn train_toy(
    net: &mut Network<f64>,
    data: &[Sample],
    steps: usize,
    batch_size: usize,
    seed: u64,
    state: &mut OptimizerState<f64>,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::invalid("train", "empty dataset"));
    }
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        let (x, labels) = batch_of(data, &batch_indices(data.len(), step, batch_size, seed))?;
        let (logits, tape) = net.forward_train(&x)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, &labels, IGNORE_INDEX)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let grads = net.backward(&tape, &dlogits)?.flatten();
        let lr = state.step(net, &grads, step)?;
        curve.push(CurvePoint { step, lr, loss });
    }
    let confusion = evaluate(net, data)?;
    Ok(TrainReport {
        curve,
        pixel_accuracy: confusion.pixel_accuracy().unwrap_or(0.0),
        miou: confusion.miou(),
        confusion,
    })
}

/// `step,lr,loss` header plus one LF-terminated row per step.
pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("step,lr,loss\n");
    for p in curve {
        out.push_str(&format!("{},{:e},{:e}\n", p.step, p.lr, p.loss));
    }
    out
}
