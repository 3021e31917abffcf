use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

use super::dims3;

/// `w[m,n] * x[n] -> [m]`
pub fn matvec(tape: &Tape, w: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (m, n) = match *w.shape() {
        [m, n] => (m, n),
        _ => {
            return Err(Error::shape(
                "matvec",
                format!("weight must be rank-2, got {:?}", w.shape()),
            ))
        }
    };
    if x.shape() != [n] {
        return Err(Error::shape(
            "matvec",
            format!("expected input [{}], got {:?}", n, x.shape()),
        ));
    }
    let wd = w.data();
    let xd = x.data();
    let mut out = vec![0.0; m];
    for i in 0..m {
        let row = &wd[i * n..(i + 1) * n];
        out[i] = row.iter().zip(xd).map(|(a, b)| a * b).sum();
    }
    let (wc, xc) = (w.clone(), x.clone());
    tape.emit("matvec", &[w, x], vec![m], out, move |dout, gm| {
        gm.accumulate(&wc, |gw| {
            for i in 0..m {
                for j in 0..n {
                    gw[i * n + j] += dout[i] * xc.data()[j];
                }
            }
        });
        gm.accumulate(&xc, |gx| {
            for i in 0..m {
                let row = &wc.data()[i * n..(i + 1) * n];
                for j in 0..n {
                    gx[j] += row[j] * dout[i];
                }
            }
        });
    })
}

/// Broadcast-add a length-C vector over an `[H,W,C]` map. Serves both conv
/// bias and prompt injection.
pub fn bias_add(tape: &Tape, x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (h, w, c) = dims3("bias_add", x)?;
    if b.shape() != [c] {
        return Err(Error::shape(
            "bias_add",
            format!("expected bias [{}], got {:?}", c, b.shape()),
        ));
    }
    let bd = b.data();
    let mut data = x.data().to_vec();
    for px in 0..h * w {
        for ch in 0..c {
            data[px * c + ch] += bd[ch];
        }
    }
    let (xc, bc) = (x.clone(), b.clone());
    tape.emit("bias_add", &[x, b], x.shape().to_vec(), data, move |dout, gm| {
        gm.accumulate(&xc, |gx| {
            for i in 0..gx.len() {
                gx[i] += dout[i];
            }
        });
        gm.accumulate(&bc, |gb| {
            for px in 0..h * w {
                for ch in 0..c {
                    gb[ch] += dout[px * c + ch];
                }
            }
        });
    })
}

/// Concatenate `[H,W,C_i]` maps along the channel axis.
pub fn concat_channels(tape: &Tape, parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::shape("concat_channels", "no inputs".to_string()));
    }
    let (h, w, _) = dims3("concat_channels", parts[0])?;
    let mut channels = Vec::with_capacity(parts.len());
    for p in parts {
        let (ph, pw, pc) = dims3("concat_channels", p)?;
        if (ph, pw) != (h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("grid mismatch ({},{}) vs ({},{})", ph, pw, h, w),
            ));
        }
        channels.push(pc);
    }
    let c_total: usize = channels.iter().sum();
    let mut data = vec![0.0; h * w * c_total];
    let mut offset = 0;
    for (p, &pc) in parts.iter().zip(&channels) {
        let pd = p.data();
        for px in 0..h * w {
            data[px * c_total + offset..px * c_total + offset + pc]
                .copy_from_slice(&pd[px * pc..(px + 1) * pc]);
        }
        offset += pc;
    }
    let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
    tape.emit(
        "concat_channels",
        parts,
        vec![h, w, c_total],
        data,
        move |dout, gm| {
            let mut offset = 0;
            for (p, &pc) in owned.iter().zip(&channels) {
                gm.accumulate(p, |gp| {
                    for px in 0..h * w {
                        for ch in 0..pc {
                            gp[px * pc + ch] += dout[px * c_total + offset + ch];
                        }
                    }
                });
                offset += pc;
            }
        },
    )
}

/// Softmax over consecutive rows of length `row_len` (max-subtraction form).
pub fn softmax_rows(tape: &Tape, x: &Tensor, row_len: usize) -> Result<Tensor> {
    if row_len == 0 || x.numel() % row_len != 0 {
        return Err(Error::shape(
            "softmax",
            format!("{} elements not divisible into rows of {}", x.numel(), row_len),
        ));
    }
    let xd = x.data();
    let mut data = vec![0.0; xd.len()];
    for row in xd.chunks(row_len).zip(data.chunks_mut(row_len)) {
        let (src, dst) = row;
        let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - m).exp();
            z += *d;
        }
        for d in dst.iter_mut() {
            *d /= z;
        }
    }
    let saved_y = data.clone();
    let xc = x.clone();
    tape.emit("softmax", &[x], x.shape().to_vec(), data, move |dout, gm| {
        gm.accumulate(&xc, |gx| {
            for r in 0..saved_y.len() / row_len {
                let base = r * row_len;
                let y = &saved_y[base..base + row_len];
                let dy = &dout[base..base + row_len];
                let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                for i in 0..row_len {
                    gx[base + i] += y[i] * (dy[i] - dot);
                }
            }
        });
    })
}

/// Softmax over a flat vector.
pub fn softmax(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    softmax_rows(tape, x, x.numel())
}
