use super::{Scalar, Shape4, Tensor4};
use crate::error::{Error, Result};

/// 2×2 stride-2 max pooling.
pub fn maxpool2d<T: Scalar>(x: &Tensor4<T>) -> Result<Tensor4<T>> {
    maxpool2d_with_indices(x).map(|(y, _)| y)
}

/// Max pooling that also returns, per output element, the flat in-plane
/// offset of the selected input. Ties go to the first element in row-major
/// window order.
pub fn maxpool2d_with_indices<T: Scalar>(x: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<u32>)> {
    let s = x.shape();
    if s.h < 2 || s.w < 2 {
        return Err(Error::shape(
            "maxpool2d",
            format!("height and width must be at least 2, got {s}"),
        ));
    }
    let out_shape = Shape4::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut y = Tensor4::zeros(out_shape);
    let mut idx = vec![0u32; out_shape.len()];
    let (oh, ow) = (out_shape.h, out_shape.w);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let base = (n * s.c + c) * oh * ow;
            let dst = y.plane_mut(n, c);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (2 * oy) * s.w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let cand = (2 * oy + dy) * s.w + 2 * ox + dx;
                        if src[cand] > src[best] {
                            best = cand;
                        }
                    }
                    dst[oy * ow + ox] = src[best];
                    idx[base + oy * ow + ox] = best as u32;
                }
            }
        }
    }
    Ok((y, idx))
}

/// Routes each upstream gradient to the input element its window selected.
pub fn maxpool2d_backward<T: Scalar>(
    input_shape: Shape4,
    indices: &[u32],
    dy: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let ys = dy.shape();
    let expected = Shape4::new(
        input_shape.n,
        input_shape.c,
        input_shape.h / 2,
        input_shape.w / 2,
    );
    if ys != expected || indices.len() != ys.len() {
        return Err(Error::shape(
            "maxpool2d_backward",
            format!("upstream gradient {ys} does not match pooled {expected}"),
        ));
    }
    let mut dx = Tensor4::zeros(input_shape);
    let plane = ys.plane_len();
    for n in 0..ys.n {
        for c in 0..ys.c {
            let base = (n * ys.c + c) * plane;
            let up = dy.plane(n, c);
            let dst = dx.plane_mut(n, c);
            for (k, &g) in up.iter().enumerate() {
                let i = indices[base + k] as usize;
                dst[i] = dst[i] + g;
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_window_max() {
        let x = Tensor4::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2d(&x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn ties_route_to_first_element() {
        let x = Tensor4::<f64>::full([1, 1, 4, 4], 7.0);
        let (y, idx) = maxpool2d_with_indices(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
        let dx = maxpool2d_backward(x.shape(), &idx, &Tensor4::full(y.shape(), 1.0)).unwrap();
        let expected = [
            1.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, //
            1.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(dx.data(), &expected);
    }

    #[test]
    fn odd_extent_floors() {
        let x = Tensor4::<f64>::zeros([1, 2, 5, 3]);
        assert_eq!(maxpool2d(&x).unwrap().shape(), Shape4::new(1, 2, 2, 1));
        assert!(maxpool2d(&Tensor4::<f64>::zeros([1, 1, 1, 4])).is_err());
    }
}
