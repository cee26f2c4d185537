use crate::error::{dim_err, Result};
use crate::tensor::{Padding, Scalar, Shape4, Tensor, Window};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolKind {
    /// Padded positions never win.
    Max,
    /// Padded positions count as zeros, so the divisor is always `kh·kw`.
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PoolParams {
    pub kind: PoolKind,
    pub window: (usize, usize),
    pub stride: usize,
    pub padding: Padding,
}

impl PoolParams {
    fn geometry(&self, s: Shape4) -> Result<Window> {
        Window::new(s, self.window.0, self.window.1, self.stride, self.padding)
    }
}

/// Reduction over the whole spatial extent, to `n×1×1×c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GlobalPoolKind {
    Avg,
    Max,
}

pub fn pool<T: Scalar>(x: &Tensor<T>, p: &PoolParams) -> Result<Tensor<T>> {
    let s = x.dims4()?;
    let win = p.geometry(s)?;
    let c = s.c;
    let xd = x.data();
    let mut out = vec![T::zero(); s.n * win.oh * win.ow * c];
    let area = T::from_usize(win.kh * win.kw).expect("window area");
    for n in 0..s.n {
        for oy in 0..win.oh {
            for ox in 0..win.ow {
                let o = ((n * win.oh + oy) * win.ow + ox) * c;
                let dst = &mut out[o..o + c];
                if p.kind == PoolKind::Max {
                    dst.fill(T::neg_infinity());
                }
                for ky in 0..win.kh {
                    let Some(iy) = Window::source(oy, ky, win.stride, win.pad_top, s.h) else {
                        continue;
                    };
                    for kx in 0..win.kw {
                        let Some(ix) = Window::source(ox, kx, win.stride, win.pad_left, s.w) else {
                            continue;
                        };
                        let i = ((n * s.h + iy) * s.w + ix) * c;
                        for (d, &v) in dst.iter_mut().zip(&xd[i..i + c]) {
                            match p.kind {
                                PoolKind::Max => {
                                    if v > *d {
                                        *d = v
                                    }
                                }
                                PoolKind::Avg => *d += v,
                            }
                        }
                    }
                }
                if p.kind == PoolKind::Avg {
                    for d in dst.iter_mut() {
                        *d /= area;
                    }
                }
            }
        }
    }
    Tensor::new([s.n, win.oh, win.ow, c], out)
}

/// Max pooling routes each output gradient to the first maximal input in scan
/// order.
pub fn pool_backward<T: Scalar>(x: &Tensor<T>, p: &PoolParams, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.dims4()?;
    let win = p.geometry(s)?;
    let c = s.c;
    if dy.shape() != [s.n, win.oh, win.ow, c] {
        return Err(dim_err!(
            "pool output gradient {:?} does not match output shape {:?}",
            dy.shape(),
            [s.n, win.oh, win.ow, c]
        ));
    }
    let xd = x.data();
    let gd = dy.data();
    let mut dx = vec![T::zero(); xd.len()];
    let area = T::from_usize(win.kh * win.kw).expect("window area");
    let mut best = vec![(T::neg_infinity(), usize::MAX); c];
    for n in 0..s.n {
        for oy in 0..win.oh {
            for ox in 0..win.ow {
                let o = ((n * win.oh + oy) * win.ow + ox) * c;
                best.fill((T::neg_infinity(), usize::MAX));
                for ky in 0..win.kh {
                    let Some(iy) = Window::source(oy, ky, win.stride, win.pad_top, s.h) else {
                        continue;
                    };
                    for kx in 0..win.kw {
                        let Some(ix) = Window::source(ox, kx, win.stride, win.pad_left, s.w) else {
                            continue;
                        };
                        let i = ((n * s.h + iy) * s.w + ix) * c;
                        for j in 0..c {
                            match p.kind {
                                PoolKind::Max => {
                                    if xd[i + j] > best[j].0 {
                                        best[j] = (xd[i + j], i + j);
                                    }
                                }
                                PoolKind::Avg => dx[i + j] += gd[o + j] / area,
                            }
                        }
                    }
                }
                if p.kind == PoolKind::Max {
                    for (j, &(_, at)) in best.iter().enumerate() {
                        if at != usize::MAX {
                            dx[at] += gd[o + j];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(s.to_vec(), dx)
}

pub fn global_pool<T: Scalar>(x: &Tensor<T>, kind: GlobalPoolKind) -> Result<Tensor<T>> {
    let s = x.dims4()?;
    let c = s.c;
    let hw = s.h * s.w;
    let mut out = Vec::with_capacity(s.n * c);
    for img in x.data().chunks(hw * c) {
        let mut acc = match kind {
            GlobalPoolKind::Avg => vec![T::zero(); c],
            GlobalPoolKind::Max => vec![T::neg_infinity(); c],
        };
        for px in img.chunks(c) {
            for (a, &v) in acc.iter_mut().zip(px) {
                match kind {
                    GlobalPoolKind::Avg => *a += v,
                    GlobalPoolKind::Max => *a = a.max(v),
                }
            }
        }
        if kind == GlobalPoolKind::Avg {
            let d = T::from_usize(hw).expect("spatial size");
            acc.iter_mut().for_each(|a| *a /= d);
        }
        out.extend(acc);
    }
    Tensor::new([s.n, 1, 1, c], out)
}

pub fn global_pool_backward<T: Scalar>(x: &Tensor<T>, kind: GlobalPoolKind, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.dims4()?;
    let c = s.c;
    let hw = s.h * s.w;
    if dy.shape() != [s.n, 1, 1, c] {
        return Err(dim_err!(
            "global pool gradient {:?} does not match [{}, 1, 1, {c}]",
            dy.shape(),
            s.n
        ));
    }
    let mut dx = vec![T::zero(); x.len()];
    let d = T::from_usize(hw).expect("spatial size");
    for n in 0..s.n {
        let g = &dy.data()[n * c..(n + 1) * c];
        let base = n * hw * c;
        match kind {
            GlobalPoolKind::Avg => {
                for px in dx[base..base + hw * c].chunks_mut(c) {
                    for (v, &gv) in px.iter_mut().zip(g) {
                        *v = gv / d;
                    }
                }
            }
            GlobalPoolKind::Max => {
                for (j, &gv) in g.iter().enumerate() {
                    let mut at = base + j;
                    for p in 0..hw {
                        if x.data()[base + p * c + j] > x.data()[at] {
                            at = base + p * c + j;
                        }
                    }
                    dx[at] += gv;
                }
            }
        }
    }
    Tensor::new(s.to_vec(), dx)
}
