//! Differentiable primitives. Every op validates shapes, computes its
//! forward value, and records a VJP closure on the tape.


mod elementwise;
mod linear;
mod routing;
mod sampling;
mod spatial;

pub use elementwise::*;
pub use linear::*;
pub use routing::*;
pub use sampling::*;
pub use spatial::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

pub(crate) fn dims3(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::shape(
            op,
            format!("expected rank-3 tensor, got {:?}", t.shape()),
        )),
    }
}
