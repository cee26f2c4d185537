use crate::error::{dim_err, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams<T = f32> {
    /// `din × dout`.
    pub weight: Tensor<T>,
    /// `dout`.
    pub bias: Tensor<T>,
}

impl<T: Scalar> DenseParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        match *weight.shape() {
            [_, dout] if bias.shape() == [dout] => Ok(DenseParams { weight, bias }),
            _ => Err(dim_err!(
                "dense weight {:?} and bias {:?} are inconsistent",
                weight.shape(),
                bias.shape()
            )),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.weight.shape()[0], self.weight.shape()[1])
    }

    /// Rows = leading axis, features = everything else flattened.
    fn rows(&self, x: &Tensor<T>) -> Result<usize> {
        let (din, _) = self.dims();
        let n = x.shape()[0];
        if x.len() != n * din {
            return Err(dim_err!(
                "fully connected layer expects {din} features per row, input is {:?}",
                x.shape()
            ));
        }
        Ok(n)
    }
}

#[derive(Clone, Debug)]
pub struct DenseGrads<T = f32> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// `y = x·W + b`; inputs of rank > 2 are flattened per leading index.
pub fn fully_connected<T: Scalar>(x: &Tensor<T>, p: &DenseParams<T>) -> Result<Tensor<T>> {
    let n = p.rows(x)?;
    let (din, dout) = p.dims();
    let mut out = Vec::with_capacity(n * dout);
    for _ in 0..n {
        out.extend_from_slice(p.bias.data());
    }
    gemm(
        MatRef::row_major(x.data(), n, din),
        MatRef::row_major(p.weight.data(), din, dout),
        T::one(),
        &mut out,
    );
    Tensor::new([n, dout], out)
}

pub fn fully_connected_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &DenseParams<T>,
    dy: &Tensor<T>,
    need_input: bool,
) -> Result<DenseGrads<T>> {
    let n = p.rows(x)?;
    let (din, dout) = p.dims();
    if dy.shape() != [n, dout] {
        return Err(dim_err!(
            "fully connected output gradient {:?} does not match [{n}, {dout}]",
            dy.shape()
        ));
    }
    let mut dw = vec![T::zero(); din * dout];
    gemm(
        MatRef::transposed(x.data(), n, din),
        MatRef::row_major(dy.data(), n, dout),
        T::zero(),
        &mut dw,
    );
    let mut db = vec![T::zero(); dout];
    for row in dy.data().chunks(dout) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    let input = if need_input {
        let mut dx = vec![T::zero(); n * din];
        gemm(
            MatRef::row_major(dy.data(), n, dout),
            MatRef::transposed(p.weight.data(), din, dout),
            T::zero(),
            &mut dx,
        );
        Some(Tensor::new(x.shape().to_vec(), dx)?)
    } else {
        None
    };
    Ok(DenseGrads {
        input,
        weight: Tensor::new([din, dout], dw)?,
        bias: Tensor::new([dout], db)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights_pass_through() {
        let d = 5;
        let p = DenseParams::new(
            Tensor::from_fn([d, d], |i| if i / d == i % d { 1.0f32 } else { 0.0 }),
            Tensor::zeros([d]),
        )
        .unwrap();
        let x = Tensor::from_fn([3, d], |i| i as f32 - 4.0);
        assert_eq!(fully_connected(&x, &p).unwrap(), x);
    }

    #[test]
    fn flattens_pooled_features() {
        let p = DenseParams::new(Tensor::<f32>::full([4, 2], 1.0), Tensor::zeros([2])).unwrap();
        let x = Tensor::from_fn([2, 1, 1, 4], |i| i as f32);
        let y = fully_connected(&x, &p).unwrap();
        assert_eq!(y.data(), &[6.0, 6.0, 22.0, 22.0]);
    }

    #[test]
    fn wrong_width_is_error() {
        let p = DenseParams::new(Tensor::<f32>::zeros([4, 2]), Tensor::zeros([2])).unwrap();
        assert!(fully_connected(&Tensor::zeros([2, 3]), &p).is_err());
    }
}
