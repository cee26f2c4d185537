use std::fmt;
use std::str::FromStr;

use crate::error::{dim_err, invalid, Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    Relu,
    /// ReLU clamped at 6.
    Relu6,
}

impl ActivationKind {
    #[inline]
    fn apply<T: Scalar>(self, v: T) -> T {
        let r = v.max(T::zero());
        match self {
            ActivationKind::Relu => r,
            ActivationKind::Relu6 => r.min(T::from_f64_lossy(6.0)),
        }
    }

    /// Derivative with the subgradient 0 at both kinks.
    #[inline]
    fn slope<T: Scalar>(self, v: T) -> T {
        let live = match self {
            ActivationKind::Relu => v > T::zero(),
            ActivationKind::Relu6 => v > T::zero() && v < T::from_f64_lossy(6.0),
        };
        if live {
            T::one()
        } else {
            T::zero()
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Relu6 => "relu6",
        })
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(ActivationKind::Relu),
            "relu6" => Ok(ActivationKind::Relu6),
            _ => Err(invalid!("unknown activation `{s}`")),
        }
    }
}

pub fn activation<T: Scalar>(x: &Tensor<T>, kind: ActivationKind) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

/// Backward pass in terms of the forward input `x`.
pub fn activation_backward<T: Scalar>(x: &Tensor<T>, kind: ActivationKind, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != dy.shape() {
        return Err(dim_err!(
            "activation gradient {:?} does not match input {:?}",
            dy.shape(),
            x.shape()
        ));
    }
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| g * kind.slope(v))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}
