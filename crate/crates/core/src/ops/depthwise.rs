use crate::error::{dim_err, invalid, Result};
use crate::tensor::{Padding, Scalar, Shape4, Tensor, Window};

/// Per-channel spatial filter, channel multiplier 1.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthwiseParams<T = f32> {
    /// `kh × kw × c × 1`.
    pub weight: Tensor<T>,
    pub stride: usize,
    pub padding: Padding,
}

impl<T: Scalar> DepthwiseParams<T> {
    pub fn new(weight: Tensor<T>, stride: usize, padding: Padding) -> Result<Self> {
        match *weight.shape() {
            [kh, kw, _, 1] if kh % 2 == 1 && kw % 2 == 1 => {}
            _ => {
                return Err(dim_err!(
                    "depthwise weight must be kh×kw×c×1 with odd kh, kw; got {:?}",
                    weight.shape()
                ))
            }
        }
        if stride == 0 {
            return Err(invalid!("depthwise stride must be positive"));
        }
        Ok(DepthwiseParams {
            weight,
            stride,
            padding,
        })
    }

    /// `(kh, kw, c)`.
    pub fn kernel(&self) -> (usize, usize, usize) {
        let s = self.weight.shape();
        (s[0], s[1], s[2])
    }

    fn window(&self, x: Shape4) -> Result<Window> {
        let (kh, kw, c) = self.kernel();
        if x.c != c {
            return Err(dim_err!(
                "depthwise filter has {c} channels, input {x} has {}",
                x.c
            ));
        }
        Window::new(x, kh, kw, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct DepthwiseGrads<T = f32> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
}

pub fn depthwise_conv2d<T: Scalar>(x: &Tensor<T>, p: &DepthwiseParams<T>) -> Result<Tensor<T>> {
    let s = x.dims4()?;
    let win = p.window(s)?;
    let c = s.c;
    let w = p.weight.data();
    let xd = x.data();
    let mut out = vec![T::zero(); s.n * win.oh * win.ow * c];
    for n in 0..s.n {
        let img = &xd[n * s.h * s.w * c..(n + 1) * s.h * s.w * c];
        for oy in 0..win.oh {
            for ox in 0..win.ow {
                let o = ((n * win.oh + oy) * win.ow + ox) * c;
                let dst = &mut out[o..o + c];
                for ky in 0..win.kh {
                    let Some(iy) = Window::source(oy, ky, win.stride, win.pad_top, s.h) else {
                        continue;
                    };
                    for kx in 0..win.kw {
                        let Some(ix) = Window::source(ox, kx, win.stride, win.pad_left, s.w) else {
                            continue;
                        };
                        let src = &img[(iy * s.w + ix) * c..(iy * s.w + ix + 1) * c];
                        let filt = &w[(ky * win.kw + kx) * c..(ky * win.kw + kx + 1) * c];
                        for ((d, &v), &f) in dst.iter_mut().zip(src).zip(filt) {
                            *d += v * f;
                        }
                    }
                }
            }
        }
    }
    Tensor::new([s.n, win.oh, win.ow, c], out)
}

pub fn depthwise_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &DepthwiseParams<T>,
    dy: &Tensor<T>,
    need_input: bool,
) -> Result<DepthwiseGrads<T>> {
    let s = x.dims4()?;
    let win = p.window(s)?;
    let c = s.c;
    if dy.shape() != [s.n, win.oh, win.ow, c] {
        return Err(dim_err!(
            "depthwise output gradient {:?} does not match output shape {:?}",
            dy.shape(),
            [s.n, win.oh, win.ow, c]
        ));
    }
    let w = p.weight.data();
    let xd = x.data();
    let gd = dy.data();
    let mut dw = vec![T::zero(); w.len()];
    let mut dx = if need_input {
        vec![T::zero(); xd.len()]
    } else {
        Vec::new()
    };
    for n in 0..s.n {
        let base = n * s.h * s.w * c;
        for oy in 0..win.oh {
            for ox in 0..win.ow {
                let o = ((n * win.oh + oy) * win.ow + ox) * c;
                let g = &gd[o..o + c];
                for ky in 0..win.kh {
                    let Some(iy) = Window::source(oy, ky, win.stride, win.pad_top, s.h) else {
                        continue;
                    };
                    for kx in 0..win.kw {
                        let Some(ix) = Window::source(ox, kx, win.stride, win.pad_left, s.w) else {
                            continue;
                        };
                        let i = base + (iy * s.w + ix) * c;
                        let f = (ky * win.kw + kx) * c;
                        for ((d, &gv), &xv) in dw[f..f + c].iter_mut().zip(g).zip(&xd[i..i + c]) {
                            *d += gv * xv;
                        }
                        if need_input {
                            for ((d, &gv), &wv) in dx[i..i + c].iter_mut().zip(g).zip(&w[f..f + c]) {
                                *d += gv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(DepthwiseGrads {
        input: if need_input {
            Some(Tensor::new(s.to_vec(), dx)?)
        } else {
            None
        },
        weight: Tensor::new(p.weight.shape().to_vec(), dw)?,
    })
}
