use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor4};

/// Rectangle edges fall on multiples of this many pixels.
pub const SYNTH_LATTICE: usize = 8;

const BACKGROUND: f64 = 0.15;
const NOISE: f64 = 0.05;

/// One image `(1, 3, h, w)` and its labels `(1, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor4<f64>,
    pub labels: LabelMap,
}

/// Fully saturated RGB in `[0, 1]` for a hue in degrees.
pub fn hue_rgb(hue: f64) -> [f64; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    match h as u32 {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Colored, non-overlapping, lattice-aligned rectangles on a dark noisy
/// background. Class 0 is the background; rectangle classes cycle through
/// `1..classes` across the whole dataset, two rectangles per image.
pub fn synth_dataset(
    n: usize,
    dims: (usize, usize),
    classes: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    let (h, w) = dims;
    if classes < 2 {
        return Err(Error::invalid(
            "synth_dataset",
            format!("at least 2 classes required, got {classes}"),
        ));
    }
    for extent in [h, w] {
        if extent == 0 || extent % SYNTH_LATTICE != 0 {
            return Err(Error::Divisibility {
                op: "synth_dataset",
                extent,
                factor: SYNTH_LATTICE,
            });
        }
    }
    let (gh, gw) = (h / SYNTH_LATTICE, w / SYNTH_LATTICE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next_class = 0usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut cells = vec![0u32; gh * gw];
        let mut image = Tensor4::zeros([1, 3, h, w]);
        for v in image.data_mut() {
            *v = BACKGROUND + rng.gen_range(-NOISE..=NOISE);
        }
        for _ in 0..2 {
            let class = 1 + (next_class % (classes - 1)) as u32;
            let tint = rng.gen_range(0.8..=1.0);
            let rect = (0..32).find_map(|_| {
                let rh = rng.gen_range(1..=gh.min(2));
                let rw = rng.gen_range(1..=gw.min(2));
                let top = rng.gen_range(0..=gh - rh);
                let left = rng.gen_range(0..=gw - rw);
                let free =
                    (top..top + rh).all(|r| (left..left + rw).all(|c| cells[r * gw + c] == 0));
                free.then_some((top, left, rh, rw))
            });
            let Some((top, left, rh, rw)) = rect else {
                continue;
            };
            next_class += 1;
            let rgb = hue_rgb(360.0 * (class - 1) as f64 / (classes - 1) as f64);
            for r in top..top + rh {
                for c in left..left + rw {
                    cells[r * gw + c] = class;
                }
            }
            let (y0, y1) = (top * SYNTH_LATTICE, (top + rh) * SYNTH_LATTICE);
            let (x0, x1) = (left * SYNTH_LATTICE, (left + rw) * SYNTH_LATTICE);
            for (ch, &v) in rgb.iter().enumerate() {
                for y in y0..y1 {
                    for x in x0..x1 {
                        image.set(0, ch, y, x, v * tint + rng.gen_range(-NOISE..=NOISE));
                    }
                }
            }
        }
        let labels = (0..h * w)
            .map(|i| cells[(i / w / SYNTH_LATTICE) * gw + (i % w) / SYNTH_LATTICE])
            .collect();
        out.push(Sample {
            image,
            labels: LabelMap::new(1, h, w, labels)?,
        });
    }
    Ok(out)
}
