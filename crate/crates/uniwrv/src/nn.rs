//! Small trainable building blocks shared by the extraction, routing, and
//! reconstruction networks.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{ops, Tape, Tensor};

/// Plain 3x3-style convolution with bias, stride 1, spatial-preserving pad.
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub pad: usize,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        rng: &mut ChaCha8Rng,
    ) -> Conv {
        Conv {
            w: store.add_conv_kernel(format!("{name}.w"), k, cin, cout, rng),
            b: store.add_zeros(format!("{name}.b"), &[cout]),
            pad: k / 2,
        }
    }

    /// Zero-initialized head (identity-at-start outputs).
    pub fn new_zero(store: &mut ParamStore, name: &str, k: usize, cin: usize, cout: usize) -> Conv {
        Conv {
            w: store.add_zeros(format!("{name}.w"), &[k, k, cin, cout]),
            b: store.add_zeros(format!("{name}.b"), &[cout]),
            pad: k / 2,
        }
    }

    pub fn forward(&self, store: &ParamStore, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let y = ops::conv2d(tape, x, &store.get(self.w), 1, self.pad)?;
        ops::bias_add(tape, &y, &store.get(self.b))
    }
}

/// Fully connected layer on vectors.
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        out_dim: usize,
        in_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Linear {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Linear {
            w: store.add_uniform(format!("{name}.w"), &[out_dim, in_dim], bound, rng),
            b: store.add_zeros(format!("{name}.b"), &[out_dim]),
        }
    }

    pub fn forward(&self, store: &ParamStore, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let y = ops::matvec(tape, &store.get(self.w), x)?;
        ops::add(tape, &y, &store.get(self.b))
    }
}

/// `dot / (|a| * |b|)`, or `None` when either vector has zero norm.
pub fn cosine(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Option<Tensor>> {
    let zero = |t: &Tensor| t.data().iter().all(|&v| v == 0.0);
    if zero(a) || zero(b) {
        return Ok(None);
    }
    let dot = ops::sum(tape, &ops::mul(tape, a, b)?)?;
    let na = ops::sqrt(tape, &ops::sum(tape, &ops::mul(tape, a, a)?)?)?;
    let nb = ops::sqrt(tape, &ops::sum(tape, &ops::mul(tape, b, b)?)?)?;
    let denom = ops::mul(tape, &na, &nb)?;
    ops::div(tape, &dot, &denom).map(Some)
}

/// Rescale a vector to unit L2 norm.
pub fn normalize(tape: &Tape, v: &Tensor) -> Result<Tensor> {
    let norm = ops::sqrt(tape, &ops::sum(tape, &ops::mul(tape, v, v)?)?)?;
    let inv = ops::recip(tape, &norm)?;
    ops::scale_by(tape, v, &inv)
}

/// Stable log-sum-exp of scalar tensors. Subtracting the max as a plain
/// constant leaves both the value and the gradient exact.
pub fn logsumexp(tape: &Tape, logits: &[Tensor]) -> Result<Tensor> {
    assert!(!logits.is_empty());
    let m = logits
        .iter()
        .map(|t| t.item())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total: Option<Tensor> = None;
    for z in logits {
        let e = ops::exp(tape, &ops::add_scalar(tape, z, -m)?)?;
        total = Some(match total {
            None => e,
            Some(acc) => ops::add(tape, &acc, &e)?,
        });
    }
    ops::add_scalar(tape, &ops::ln(tape, &total.unwrap())?, m)
}

/// Mean absolute difference.
pub fn l1_loss(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let diff = ops::sub(tape, a, b)?;
    ops::mean(tape, &ops::abs(tape, &diff)?)
}

/// Mean squared difference.
pub fn mse_loss(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let diff = ops::sub(tape, a, b)?;
    ops::mean(tape, &ops::mul(tape, &diff, &diff)?)
}
