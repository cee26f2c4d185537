use crate::error::{dim_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Joins NHWC tensors along the channel axis, in argument order.
pub fn concat_channels<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| dim_err!("concat needs at least one input"))?;
    let s0 = first.dims4()?;
    let mut widths = Vec::with_capacity(xs.len());
    for x in xs {
        let s = x.dims4()?;
        if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
            return Err(dim_err!(
                "concat inputs disagree spatially: {s0} vs {s}"
            ));
        }
        widths.push(s.c);
    }
    let total: usize = widths.iter().sum();
    let pixels = s0.n * s0.h * s0.w;
    let mut out = Vec::with_capacity(pixels * total);
    for p in 0..pixels {
        for (x, &c) in xs.iter().zip(&widths) {
            out.extend_from_slice(&x.data()[p * c..(p + 1) * c]);
        }
    }
    Tensor::new([s0.n, s0.h, s0.w, total], out)
}

/// Inverse of [`concat_channels`]: slices a gradient back per input.
pub fn split_channels<T: Scalar>(dy: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let s = dy.dims4()?;
    if widths.iter().sum::<usize>() != s.c {
        return Err(dim_err!(
            "split widths {widths:?} do not sum to {} channels",
            s.c
        ));
    }
    let pixels = s.n * s.h * s.w;
    let mut parts: Vec<Vec<T>> = widths.iter().map(|&c| Vec::with_capacity(pixels * c)).collect();
    for px in dy.data().chunks(s.c) {
        let mut off = 0;
        for (part, &c) in parts.iter_mut().zip(widths) {
            part.extend_from_slice(&px[off..off + c]);
            off += c;
        }
    }
    parts
        .into_iter()
        .zip(widths)
        .map(|(d, &c)| Tensor::new([s.n, s.h, s.w, c], d))
        .collect()
}
