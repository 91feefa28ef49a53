use crate::error::{Error, Result};
use crate::tensor::LabelMap;

/// `counts[i][j]` = pixels with ground truth `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanIou {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    /// `None` when no class has a defined IoU.
    pub mean: Option<f64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let classes = rows.len();
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::shape("confusion", "matrix must be square"));
        }
        Ok(ConfusionMatrix {
            classes,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts
            .chunks(self.classes.max(1))
            .map(<[u64]>::to_vec)
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every pixel whose ground truth is not `ignore_index`. The matrix
    /// is left untouched if any label is out of range.
    pub fn update(&mut self, pred: &LabelMap, truth: &LabelMap, ignore_index: u32) -> Result<()> {
        if (pred.n, pred.h, pred.w) != (truth.n, truth.h, truth.w) {
            return Err(Error::shape(
                "confusion",
                format!(
                    "prediction {}x{}x{} vs ground truth {}x{}x{}",
                    pred.n, pred.h, pred.w, truth.n, truth.h, truth.w
                ),
            ));
        }
        let c = self.classes as u32;
        for (i, (&p, &t)) in pred.data.iter().zip(&truth.data).enumerate() {
            if t != ignore_index && (t >= c || p >= c) {
                return Err(Error::invalid(
                    "confusion",
                    format!("label pair ({t}, {p}) at pixel {i} outside 0..{c}"),
                ));
            }
        }
        for (&p, &t) in pred.data.iter().zip(&truth.data) {
            if t != ignore_index {
                self.counts[t as usize * self.classes + p as usize] += 1;
            }
        }
        Ok(())
    }

    /// `IoU_c = tp / (row_c + col_c − tp)`; zero-denominator classes are
    /// left out of the mean.
    pub fn miou(&self) -> MeanIou {
        let per_class: Vec<Option<f64>> = (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..self.classes).map(|j| self.get(c, j)).sum();
                let col: u64 = (0..self.classes).map(|i| self.get(i, c)).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean =
            (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        MeanIou { per_class, mean }
    }

    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.total();
        let correct: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        (total > 0).then(|| correct as f64 / total as f64)
    }
}
