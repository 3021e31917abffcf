use crate::error::Result;
use crate::tensor::{Tape, Tensor};

use super::same_shape;

fn unary(
    tape: &Tape,
    op: &'static str,
    x: &Tensor,
    f: impl Fn(f64) -> f64,
    dfdx: impl Fn(f64, f64) -> f64 + 'static,
) -> Result<Tensor> {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    let saved_y = data.clone();
    let xc = x.clone();
    tape.emit(op, &[x], x.shape().to_vec(), data, move |dout, gm| {
        gm.accumulate(&xc, |gx| {
            for i in 0..gx.len() {
                gx[i] += dout[i] * dfdx(xc.data()[i], saved_y[i]);
            }
        });
    })
}

fn binary(
    tape: &Tape,
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
    dfda: impl Fn(f64, f64) -> f64 + Copy + 'static,
    dfdb: impl Fn(f64, f64) -> f64 + Copy + 'static,
) -> Result<Tensor> {
    same_shape(op, a, b)?;
    let data: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    let (ac, bc) = (a.clone(), b.clone());
    tape.emit(op, &[a, b], a.shape().to_vec(), data, move |dout, gm| {
        gm.accumulate(&ac, |ga| {
            for i in 0..ga.len() {
                ga[i] += dout[i] * dfda(ac.data()[i], bc.data()[i]);
            }
        });
        gm.accumulate(&bc, |gb| {
            for i in 0..gb.len() {
                gb[i] += dout[i] * dfdb(ac.data()[i], bc.data()[i]);
            }
        });
    })
}

pub fn add(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(tape, "add", a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
}

pub fn sub(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(tape, "sub", a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
}

pub fn mul(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(tape, "mul", a, b, |x, y| x * y, |_, y| y, |x, _| x)
}

pub fn div(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(
        tape,
        "div",
        a,
        b,
        |x, y| x / y,
        |_, y| 1.0 / y,
        |x, y| -x / (y * y),
    )
}

/// Multiply by a plain constant.
pub fn scale(tape: &Tape, x: &Tensor, c: f64) -> Result<Tensor> {
    unary(tape, "scale", x, |v| v * c, move |_, _| c)
}

/// Add a plain constant.
pub fn add_scalar(tape: &Tape, x: &Tensor, c: f64) -> Result<Tensor> {
    unary(tape, "add_scalar", x, |v| v + c, |_, _| 1.0)
}

/// Multiply every element by a single-element tensor (both sides get grads).
pub fn scale_by(tape: &Tape, x: &Tensor, s: &Tensor) -> Result<Tensor> {
    if s.numel() != 1 {
        return Err(crate::error::Error::shape(
            "scale_by",
            format!("scale must be a single element, got {:?}", s.shape()),
        ));
    }
    let sv = s.data()[0];
    let data: Vec<f64> = x.data().iter().map(|&v| v * sv).collect();
    let (xc, sc) = (x.clone(), s.clone());
    tape.emit("scale_by", &[x, s], x.shape().to_vec(), data, move |dout, gm| {
        gm.accumulate(&xc, |gx| {
            for i in 0..gx.len() {
                gx[i] += dout[i] * sc.data()[0];
            }
        });
        gm.accumulate(&sc, |gs| {
            let mut acc = 0.0;
            for i in 0..dout.len() {
                acc += dout[i] * xc.data()[i];
            }
            gs[0] += acc;
        });
    })
}

pub fn relu(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    unary(
        tape,
        "relu",
        x,
        |v| if v > 0.0 { v } else { 0.0 },
        |v, _| if v > 0.0 { 1.0 } else { 0.0 },
    )
}

pub fn abs(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    unary(
        tape,
        "abs",
        x,
        f64::abs,
        |v, _| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        },
    )
}

pub fn exp(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    unary(tape, "exp", x, f64::exp, |_, y| y)
}

pub fn ln(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    unary(tape, "ln", x, f64::ln, |v, _| 1.0 / v)
}

pub fn sqrt(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    unary(tape, "sqrt", x, f64::sqrt, |_, y| 0.5 / y)
}

pub fn recip(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    unary(tape, "recip", x, |v| 1.0 / v, |_, y| -y * y)
}

pub fn sum(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let total: f64 = x.data().iter().sum();
    let xc = x.clone();
    tape.emit("sum", &[x], vec![1], vec![total], move |dout, gm| {
        gm.accumulate(&xc, |gx| {
            for g in gx.iter_mut() {
                *g += dout[0];
            }
        });
    })
}

pub fn mean(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let n = x.numel() as f64;
    let total: f64 = x.data().iter().sum();
    let xc = x.clone();
    tape.emit("mean", &[x], vec![1], vec![total / n], move |dout, gm| {
        gm.accumulate(&xc, |gx| {
            for g in gx.iter_mut() {
                *g += dout[0] / n;
            }
        });
    })
}

/// Tape marker that blocks gradient flow. Shares the input buffer (no copy).
pub fn stop_grad(tape: &Tape, x: &Tensor) -> Tensor {
    let out = Tensor::sharing_data(x);
    if tape.recording() {
        tape.push_node("stop_grad", &[x], &out, |_dout, _gm| {});
    }
    out
}
