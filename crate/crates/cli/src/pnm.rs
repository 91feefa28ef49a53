//! Binary PPM (P6) and PGM (P5) images with maxval 255.

use esnet_core::training::hue_rgb;
use esnet_core::{LabelMap, Tensor4};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{what} at byte {offset}")]
pub struct PnmError {
    pub offset: usize,
    pub what: String,
}

fn fail<T>(offset: usize, what: impl Into<String>) -> Result<T, PnmError> {
    Err(PnmError {
        offset,
        what: what.into(),
    })
}

/// Interleaved 8-bit samples, `channels` per pixel, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image8 {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height * channels, "sample count");
        Image8 {
            width,
            height,
            channels,
            data,
        }
    }

    fn magic(&self) -> &'static str {
        if self.channels == 3 {
            "P6"
        } else {
            "P5"
        }
    }

    /// Canonical header `Px\n{w} {h}\n255\n` followed by the samples.
    pub fn encode(&self) -> Vec<u8> {
        let mut out =
            format!("{}\n{} {}\n255\n", self.magic(), self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, field: &str) -> Result<usize, PnmError> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return fail(start, format!("expected {field}"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .or_else(|_| fail(start, format!("{field} out of range")))
    }
}

/// Parses a P6 (`channels == 3`) or P5 (`channels == 1`) image.
pub fn decode(bytes: &[u8], channels: usize) -> Result<Image8, PnmError> {
    let want = if channels == 3 { b"P6" } else { b"P5" };
    if bytes.len() < 2 || &bytes[..2] != want {
        return fail(
            0,
            format!("bad magic, expected {}", String::from_utf8_lossy(want)),
        );
    }
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval_at = {
        cur.skip_space();
        cur.pos
    };
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return fail(maxval_at, format!("maxval {maxval}, only 255 is supported"));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return fail(cur.pos, "expected one whitespace byte after maxval"),
    }
    if width == 0 || height == 0 {
        return fail(2, format!("empty image {width}x{height}"));
    }
    let len = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or(PnmError {
            offset: 2,
            what: "image dimensions overflow".into(),
        })?;
    let payload = &bytes[cur.pos..];
    if payload.len() < len {
        return fail(
            bytes.len(),
            format!("truncated payload, {} of {len} bytes", payload.len()),
        );
    }
    if payload.len() > len {
        return fail(cur.pos + len, "trailing bytes after payload");
    }
    Ok(Image8::new(width, height, channels, payload.to_vec()))
}

/// RGB scaled to `[0, 1]`, as a `(1, 3, h, w)` tensor.
pub fn rgb_to_tensor(img: &Image8) -> Tensor4<f64> {
    let plane = img.width * img.height;
    Tensor4::from_fn([1, 3, img.height, img.width], |i| {
        let (c, p) = (i / plane, i % plane);
        img.data[p * 3 + c] as f64 / 255.0
    })
}

/// Inverse of [`rgb_to_tensor`] for values on the 1/255 grid; others round.
pub fn tensor_to_rgb(t: &Tensor4<f64>) -> Image8 {
    let s = t.shape();
    let mut data = vec![0u8; s.h * s.w * 3];
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                let v = (t.get(0, c, y, x) * 255.0).round().clamp(0.0, 255.0);
                data[(y * s.w + x) * 3 + c] = v as u8;
            }
        }
    }
    Image8::new(s.w, s.h, 3, data)
}

pub fn gray_to_labels(img: &Image8) -> LabelMap {
    let data = img.data.iter().map(|&v| v as u32).collect();
    LabelMap::new(1, img.height, img.width, data).expect("sizes agree")
}

/// Fails if there is more than one map or a label exceeds 255.
pub fn labels_to_gray(labels: &LabelMap) -> Result<Image8, PnmError> {
    if labels.n != 1 {
        return fail(0, format!("a PGM holds one label map, got {}", labels.n));
    }
    let data = labels
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| u8::try_from(v).or_else(|_| fail(i, format!("label {v} exceeds 255"))))
        .collect::<Result<Vec<u8>, _>>()?;
    Ok(Image8::new(labels.w, labels.h, 1, data))
}

/// Color of class `c` out of `classes`: hue `360·c/classes` at full
/// saturation and value.
pub fn palette(c: usize, classes: usize) -> [u8; 3] {
    let rgb = hue_rgb(360.0 * c as f64 / classes.max(1) as f64);
    rgb.map(|v| (v * 255.0).round() as u8)
}

pub fn colorize(labels: &LabelMap, classes: usize) -> Image8 {
    let data = labels
        .image(0)
        .iter()
        .flat_map(|&l| palette(l as usize, classes))
        .collect();
    Image8::new(labels.w, labels.h, 3, data)
}
