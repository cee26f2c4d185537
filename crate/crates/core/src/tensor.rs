//! Dense row-major tensors and the linear-algebra primitives the layer kernels
//! are built from.
//!
//! Image tensors use NHWC layout throughout. Convolutions are lowered to a
//! single matrix product with [`im2col`], whose rows are receptive-field
//! patches ordered `(ky, kx, c)`; that ordering matches a `kh×kw×cin×cout`
//! weight tensor viewed as a `(kh·kw·cin) × cout` matrix.

use std::fmt;

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{dim_err, invalid, Result};

/// Element type of a tensor.
///
/// Training and inference run in `f32`; gradient checks run the very same
/// kernels in `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + Default
    + Copy
    + fmt::Debug
    + fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    /// `c = a·b + beta·c` on strided matrices.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must lie
    /// inside the corresponding slice. [`gemm`] checks this before calling.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A strided read-only matrix view over a flat slice.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major `rows × cols` matrix, without copying.
    pub fn transposed(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows: cols,
            cols: rows,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn fits(&self) -> bool {
        if self.rows == 0 || self.cols == 0 {
            return true;
        }
        let last = (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride;
        last < self.data.len()
    }
}

/// `out = a·b + beta·out`, with `out` row-major `a.rows × b.cols`.
///
/// Accumulation order depends only on the dimensions, so results are
/// bit-reproducible run to run.
pub(crate) fn gemm<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, out: &mut [T]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    assert!(a.fits() && b.fits(), "gemm operand view out of bounds");
    assert_eq!(out.len(), a.rows * b.cols, "gemm output length");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    if a.cols == 0 {
        for v in out.iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: the views were bounds-checked above and `out` holds exactly
    // `a.rows * b.cols` elements addressed with row stride `b.cols`.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            out.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

/// Dense n-dimensional array in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.shape);
        if self.data.len() <= PREVIEW {
            d.field("data", &self.data);
        } else {
            d.field("data[..8]", &&self.data[..PREVIEW]);
        }
        d.finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(invalid!("tensor dimensions must be positive, got {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(dim_err!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Panics if a dimension is zero; for shapes known good by construction.
    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "invalid shape {shape:?}"
        );
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Interprets a rank-4 tensor as NHWC.
    pub fn dims4(&self) -> Result<Shape4> {
        match *self.shape.as_slice() {
            [n, h, w, c] => Shape4::new(n, h, w, c),
            _ => Err(dim_err!("expected an NHWC tensor, got shape {:?}", self.shape)),
        }
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(dim_err!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            ));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err!(
                "cannot add {:?} and {:?}",
                self.shape,
                other.shape
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

/// NHWC image-batch dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape4 {
    pub fn new(n: usize, h: usize, w: usize, c: usize) -> Result<Self> {
        if n == 0 || h == 0 || w == 0 || c == 0 {
            return Err(invalid!("NHWC dimensions must be positive, got ({n},{h},{w},{c})"));
        }
        Ok(Shape4 { n, h, w, c })
    }

    pub fn numel(&self) -> usize {
        self.n * self.h * self.w * self.c
    }

    pub fn to_vec(self) -> Vec<usize> {
        vec![self.n, self.h, self.w, self.c]
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.h, self.w, self.c)
    }
}

/// Spatial padding mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Output size `ceil(input / stride)`; when the total padding is odd the
    /// extra row/column goes on the bottom/right.
    Same,
    /// No padding; the window must fit inside the input.
    Valid,
}

/// Output extent along one axis and the padding before the first element.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    if kernel == 0 || stride == 0 {
        return Err(invalid!("kernel ({kernel}) and stride ({stride}) must be at least 1"));
    }
    match padding {
        Padding::Valid => {
            if kernel > input {
                return Err(dim_err!(
                    "kernel extent {kernel} exceeds unpadded input extent {input}"
                ));
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let needed = (out - 1) * stride + kernel;
            let total = needed.saturating_sub(input);
            Ok((out, total / 2))
        }
    }
}

/// Window geometry shared by im2col, pooling and depthwise convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl Window {
    pub fn new(input: Shape4, kh: usize, kw: usize, stride: usize, padding: Padding) -> Result<Self> {
        let (oh, pad_top) = conv_out_dim(input.h, kh, stride, padding)?;
        let (ow, pad_left) = conv_out_dim(input.w, kw, stride, padding)?;
        Ok(Window {
            kh,
            kw,
            stride,
            oh,
            ow,
            pad_top,
            pad_left,
        })
    }

    /// Input coordinate for output coordinate `o` and kernel tap `k`, or
    /// `None` when it falls in the padding.
    #[inline]
    pub fn source(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * stride + k).checked_sub(pad)?;
        (pos < extent).then_some(pos)
    }
}

/// Row-major matrix product of two rank-2 tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = match *a.shape() {
        [m, k] => (m, k),
        _ => return Err(dim_err!("matmul expects rank-2 operands, got {:?}", a.shape())),
    };
    let (k2, n) = match *b.shape() {
        [k2, n] => (k2, n),
        _ => return Err(dim_err!("matmul expects rank-2 operands, got {:?}", b.shape())),
    };
    if k != k2 {
        return Err(dim_err!(
            "matmul inner dimensions differ: {:?} × {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(
        MatRef::row_major(a.data(), m, k),
        MatRef::row_major(b.data(), k, n),
        T::zero(),
        &mut out,
    );
    Tensor::new([m, n], out)
}

/// Lowers an NHWC tensor to a patch matrix of shape
/// `(n·oh·ow) × (kh·kw·c)`; out-of-bounds taps read as zero.
pub fn im2col<T: Scalar>(
    x: &Tensor<T>,
    kernel: (usize, usize),
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let s = x.dims4()?;
    let win = Window::new(s, kernel.0, kernel.1, stride, padding)?;
    let cols = im2col_raw(x.data(), s, &win);
    Tensor::new([s.n * win.oh * win.ow, win.kh * win.kw * s.c], cols)
}

pub(crate) fn im2col_raw<T: Scalar>(x: &[T], s: Shape4, win: &Window) -> Vec<T> {
    let patch = win.kh * win.kw * s.c;
    let mut cols = vec![T::zero(); s.n * win.oh * win.ow * patch];
    let mut row = 0;
    for n in 0..s.n {
        let img = &x[n * s.h * s.w * s.c..(n + 1) * s.h * s.w * s.c];
        for oy in 0..win.oh {
            for ox in 0..win.ow {
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for ky in 0..win.kh {
                    let Some(iy) = Window::source(oy, ky, win.stride, win.pad_top, s.h) else {
                        continue;
                    };
                    for kx in 0..win.kw {
                        let Some(ix) = Window::source(ox, kx, win.stride, win.pad_left, s.w) else {
                            continue;
                        };
                        let src = (iy * s.w + ix) * s.c;
                        let off = (ky * win.kw + kx) * s.c;
                        dst[off..off + s.c].copy_from_slice(&img[src..src + s.c]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch rows back onto an NHWC tensor of
/// shape `input`, summing where patches overlap.
pub fn col2im<T: Scalar>(
    cols: &Tensor<T>,
    input: Shape4,
    kernel: (usize, usize),
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let win = Window::new(input, kernel.0, kernel.1, stride, padding)?;
    let expected = [input.n * win.oh * win.ow, win.kh * win.kw * input.c];
    if cols.shape() != expected {
        return Err(dim_err!(
            "col2im expects a {:?} patch matrix for input {input}, got {:?}",
            expected,
            cols.shape()
        ));
    }
    Tensor::new(input.to_vec(), col2im_raw(cols.data(), input, &win))
}

pub(crate) fn col2im_raw<T: Scalar>(cols: &[T], s: Shape4, win: &Window) -> Vec<T> {
    let patch = win.kh * win.kw * s.c;
    let mut x = vec![T::zero(); s.numel()];
    let mut row = 0;
    for n in 0..s.n {
        let img = &mut x[n * s.h * s.w * s.c..(n + 1) * s.h * s.w * s.c];
        for oy in 0..win.oh {
            for ox in 0..win.ow {
                let src = &cols[row * patch..(row + 1) * patch];
                for ky in 0..win.kh {
                    let Some(iy) = Window::source(oy, ky, win.stride, win.pad_top, s.h) else {
                        continue;
                    };
                    for kx in 0..win.kw {
                        let Some(ix) = Window::source(ox, kx, win.stride, win.pad_left, s.w) else {
                            continue;
                        };
                        let dst = (iy * s.w + ix) * s.c;
                        let off = (ky * win.kw + kx) * s.c;
                        for (d, &v) in img[dst..dst + s.c].iter_mut().zip(&src[off..off + s.c]) {
                            *d += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn constructor_rejects_length_mismatch() {
        assert!(matches!(
            Tensor::<f32>::new([2, 2], vec![0.0; 3]),
            Err(Error::Dimension(_))
        ));
        assert!(Tensor::<f32>::new([0, 2], vec![]).is_err());
    }

    #[test]
    fn identity_matmul() {
        let eye = Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let x = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matmul(&eye, &x).unwrap(), x);
    }

    #[test]
    fn two_by_two_matmul() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let a = Tensor::<f32>::zeros([2, 3]);
        let b = Tensor::<f32>::zeros([4, 2]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn same_padding_puts_extra_pixel_bottom_right() {
        // 4 wide, 3 tap, stride 2: out 2, needs (2-1)*2+3 = 5, pad 1 total -> 0 before.
        assert_eq!(conv_out_dim(4, 3, 2, Padding::Same).unwrap(), (2, 0));
        assert_eq!(conv_out_dim(5, 3, 1, Padding::Same).unwrap(), (5, 1));
        assert_eq!(conv_out_dim(224, 3, 2, Padding::Same).unwrap(), (112, 0));
        assert_eq!(conv_out_dim(5, 3, 2, Padding::Valid).unwrap(), (2, 0));
        assert!(conv_out_dim(2, 3, 1, Padding::Valid).is_err());
    }

    #[test]
    fn im2col_pointwise_is_reshape() {
        let x = Tensor::from_fn([1, 4, 4, 3], |i| i as f32);
        let cols = im2col(&x, (1, 1), 1, Padding::Valid).unwrap();
        assert_eq!(cols.shape(), &[16, 3]);
        assert_eq!(cols.data(), x.data());
    }

    #[test]
    fn im2col_small_same_patches() {
        let x = t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        let cols = im2col(&x, (3, 3), 1, Padding::Same).unwrap();
        assert_eq!(cols.shape(), &[4, 9]);
        // Hand-enumerated patches, (ky, kx) row-major.
        #[rustfmt::skip]
        let expected = [
            0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 3.0, 4.0,
            0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 3.0, 4.0, 0.0,
            0.0, 1.0, 2.0, 0.0, 3.0, 4.0, 0.0, 0.0, 0.0,
            1.0, 2.0, 0.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(cols.data(), &expected);
        for row in cols.data().chunks(9) {
            assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), 5);
        }
    }

    #[test]
    fn im2col_stride_two_stem_shape() {
        let x = Tensor::<f32>::zeros([1, 224, 224, 3]);
        let cols = im2col(&x, (3, 3), 2, Padding::Same).unwrap();
        assert_eq!(cols.shape(), &[112 * 112, 27]);
    }

    #[test]
    fn im2col_valid_rejects_oversized_kernel() {
        let x = Tensor::<f32>::zeros([1, 2, 2, 1]);
        assert!(matches!(
            im2col(&x, (3, 3), 1, Padding::Valid),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn col2im_checks_patch_matrix_shape() {
        let s = Shape4::new(1, 4, 4, 2).unwrap();
        let cols = Tensor::<f32>::zeros([16, 9]);
        assert!(col2im(&cols, s, (3, 3), 1, Padding::Same).is_err());
    }
}
