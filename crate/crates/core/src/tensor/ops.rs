use super::{Scalar, Shape4, Tensor4};
use crate::error::{Error, Result};

pub fn relu<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given its output: passes `dy` where the output is positive.
pub fn relu_backward<T: Scalar>(y: &Tensor4<T>, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
    if y.shape() != dy.shape() {
        return Err(Error::shape(
            "relu_backward",
            format!("output {} vs upstream {}", y.shape(), dy.shape()),
        ));
    }
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect();
    Tensor4::from_vec(y.shape(), data)
}

pub fn add<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let mut out = a.clone();
    add_assign(&mut out, b)?;
    Ok(out)
}

pub fn add_assign<T: Scalar>(a: &mut Tensor4<T>, b: &Tensor4<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "add",
            format!("{} vs {}", a.shape(), b.shape()),
        ));
    }
    for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
        *x = *x + y;
    }
    Ok(())
}

/// Stacks `a` then `b` along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
        return Err(Error::shape(
            "concat_channels",
            format!("{sa} and {sb} differ outside the channel axis"),
        ));
    }
    let out_shape = Shape4::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let mut data = Vec::with_capacity(out_shape.len());
    let (la, lb) = (sa.c * sa.plane_len(), sb.c * sb.plane_len());
    for n in 0..sa.n {
        data.extend_from_slice(&a.data()[n * la..(n + 1) * la]);
        data.extend_from_slice(&b.data()[n * lb..(n + 1) * lb]);
    }
    Tensor4::from_vec(out_shape, data)
}

/// Inverse of [`concat_channels`]: the first `first` channels, then the rest.
pub fn split_channels<T: Scalar>(x: &Tensor4<T>, first: usize) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let s = x.shape();
    if first > s.c {
        return Err(Error::shape(
            "split_channels",
            format!("cannot take {first} channels from {s}"),
        ));
    }
    let plane = s.plane_len();
    let sa = Shape4::new(s.n, first, s.h, s.w);
    let sb = Shape4::new(s.n, s.c - first, s.h, s.w);
    let mut da = Vec::with_capacity(sa.len());
    let mut db = Vec::with_capacity(sb.len());
    for n in 0..s.n {
        let row = &x.data()[n * s.c * plane..(n + 1) * s.c * plane];
        da.extend_from_slice(&row[..first * plane]);
        db.extend_from_slice(&row[first * plane..]);
    }
    Ok((Tensor4::from_vec(sa, da)?, Tensor4::from_vec(sb, db)?))
}
