use crate::error::{dim_err, invalid, Result};
use crate::tensor::{col2im_raw, gemm, im2col_raw, MatRef, Padding, Scalar, Shape4, Tensor, Window};

/// Full (dense) 2-D convolution parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = f32> {
    /// `kh × kw × cin × cout`.
    pub weight: Tensor<T>,
    /// `cout`, absent when a batch norm follows.
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: Padding,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>, stride: usize, padding: Padding) -> Result<Self> {
        let [kh, kw, _, cout] = match *weight.shape() {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(dim_err!("conv weight must be kh×kw×cin×cout, got {:?}", weight.shape())),
        };
        if ![1, 3, 5].contains(&kh) || ![1, 3, 5].contains(&kw) {
            return Err(invalid!("conv kernel must be 1, 3 or 5 wide, got {kh}×{kw}"));
        }
        if stride == 0 {
            return Err(invalid!("conv stride must be positive"));
        }
        if let Some(b) = &bias {
            if b.shape() != [cout] {
                return Err(dim_err!("conv bias must be [{cout}], got {:?}", b.shape()));
            }
        }
        Ok(ConvParams {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// `(kh, kw, cin, cout)`.
    pub fn kernel(&self) -> (usize, usize, usize, usize) {
        let s = self.weight.shape();
        (s[0], s[1], s[2], s[3])
    }

    fn window(&self, x: Shape4) -> Result<Window> {
        let (kh, kw, cin, _) = self.kernel();
        if x.c != cin {
            return Err(dim_err!(
                "conv expects {cin} input channels, input {x} has {}",
                x.c
            ));
        }
        Window::new(x, kh, kw, self.stride, self.padding)
    }

    /// 1×1 stride-1 convolutions read the input directly as the patch matrix.
    fn is_pointwise(&self) -> bool {
        let (kh, kw, _, _) = self.kernel();
        kh == 1 && kw == 1 && self.stride == 1
    }
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T = f32> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// Cross-correlation (no kernel flip) lowered to im2col + GEMM.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let s = x.dims4()?;
    let win = p.window(s)?;
    let (kh, kw, cin, cout) = p.kernel();
    let rows = s.n * win.oh * win.ow;
    let k = kh * kw * cin;

    let mut out = vec![T::zero(); rows * cout];
    let beta = match &p.bias {
        Some(b) => {
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(b.data());
            }
            T::one()
        }
        None => T::zero(),
    };
    let owned;
    let cols: &[T] = if p.is_pointwise() {
        x.data()
    } else {
        owned = im2col_raw(x.data(), s, &win);
        &owned
    };
    gemm(
        MatRef::row_major(cols, rows, k),
        MatRef::row_major(p.weight.data(), k, cout),
        beta,
        &mut out,
    );
    Tensor::new([s.n, win.oh, win.ow, cout], out)
}

/// Gradients of [`conv2d`] given the upstream gradient `dy`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    dy: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let s = x.dims4()?;
    let win = p.window(s)?;
    let (kh, kw, cin, cout) = p.kernel();
    if dy.shape() != [s.n, win.oh, win.ow, cout] {
        return Err(dim_err!(
            "conv output gradient {:?} does not match output shape {:?}",
            dy.shape(),
            [s.n, win.oh, win.ow, cout]
        ));
    }
    let rows = s.n * win.oh * win.ow;
    let k = kh * kw * cin;

    let owned;
    let cols: &[T] = if p.is_pointwise() {
        x.data()
    } else {
        owned = im2col_raw(x.data(), s, &win);
        &owned
    };

    // dW = colsᵀ · dY
    let mut dw = vec![T::zero(); k * cout];
    gemm(
        MatRef::transposed(cols, rows, k),
        MatRef::row_major(dy.data(), rows, cout),
        T::zero(),
        &mut dw,
    );
    let weight = Tensor::new(p.weight.shape().to_vec(), dw)?;

    let bias = p.bias.as_ref().map(|_| {
        let mut db = vec![T::zero(); cout];
        for row in dy.data().chunks(cout) {
            for (d, &g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
        Tensor::new([cout], db).expect("bias shape")
    });

    let input = if need_input {
        // dcols = dY · Wᵀ
        let mut dcols = vec![T::zero(); rows * k];
        gemm(
            MatRef::row_major(dy.data(), rows, cout),
            MatRef::transposed(p.weight.data(), k, cout),
            T::zero(),
            &mut dcols,
        );
        let dx = if p.is_pointwise() {
            dcols
        } else {
            col2im_raw(&dcols, s, &win)
        };
        Some(Tensor::new(s.to_vec(), dx)?)
    } else {
        None
    };

    Ok(ConvGrads {
        input,
        weight,
        bias,
    })
}
