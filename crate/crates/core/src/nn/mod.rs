//! Dense numerical core: tensors, a reverse-mode tape, Adam, initialization and
//! the on-disk parameter format.

pub mod check;
mod params;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use params::{
    read_params, write_params, xavier_init, Adam, ParamStore, Parameter, TensorEntry, PARAMS_FILE,
};
pub use rng::{derive_seed, stream, RngState};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Numerically stable softmax of `x` along `axis` (no gradient tracking).
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() || shape[axis] == 0 {
        return Err(Error::InvalidArgument(format!(
            "softmax axis {axis} is empty or missing in shape {shape:?}"
        )));
    }
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| out[idx(j)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..n {
                let e = (out[idx(j)] - max).exp();
                out[idx(j)] = e;
                total = total + e;
            }
            for j in 0..n {
                out[idx(j)] = out[idx(j)] / total;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}
