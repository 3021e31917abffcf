use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

use super::dims3;

/// 2-D convolution, zero padding, layout `x[H,W,Cin]`, kernel `w[k,k,Cin,Cout]`.
pub fn conv2d(tape: &Tape, x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (h, wid, cin) = dims3("conv2d", x)?;
    let (k1, k2, wcin, cout) = match *w.shape() {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be rank-4, got {:?}", w.shape()),
            ))
        }
    };
    if k1 != k2 || k1 % 2 == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be square with odd size, got {}x{}", k1, k2),
        ));
    }
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels, kernel expects {}", cin, wcin),
        ));
    }
    if stride == 0 {
        return Err(Error::shape("conv2d", "stride must be >= 1".to_string()));
    }
    let k = k1;
    if h + 2 * pad < k || wid + 2 * pad < k {
        return Err(Error::shape(
            "conv2d",
            format!("input {}x{} too small for kernel {} with pad {}", h, wid, k, pad),
        ));
    }
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wid + 2 * pad - k) / stride + 1;

    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0.0; ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            let obase = (oy * wo + ox) * cout;
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= wid as isize {
                        continue;
                    }
                    let xbase = (iy as usize * wid + ix as usize) * cin;
                    let wbase = (ky * k + kx) * cin * cout;
                    for ci in 0..cin {
                        let xv = xd[xbase + ci];
                        if xv == 0.0 {
                            continue;
                        }
                        let wrow = wbase + ci * cout;
                        for co in 0..cout {
                            out[obase + co] += xv * wd[wrow + co];
                        }
                    }
                }
            }
        }
    }

    let (xc, wc) = (x.clone(), w.clone());
    tape.emit("conv2d", &[x, w], vec![ho, wo, cout], out, move |dout, gm| {
        gm.accumulate(&xc, |gx| {
            let wd = wc.data();
            for oy in 0..ho {
                for ox in 0..wo {
                    let obase = (oy * wo + ox) * cout;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wid as isize {
                                continue;
                            }
                            let xbase = (iy as usize * wid + ix as usize) * cin;
                            let wbase = (ky * k + kx) * cin * cout;
                            for ci in 0..cin {
                                let wrow = wbase + ci * cout;
                                let mut acc = 0.0;
                                for co in 0..cout {
                                    acc += wd[wrow + co] * dout[obase + co];
                                }
                                gx[xbase + ci] += acc;
                            }
                        }
                    }
                }
            }
        });
        gm.accumulate(&wc, |gw| {
            let xd = xc.data();
            for oy in 0..ho {
                for ox in 0..wo {
                    let obase = (oy * wo + ox) * cout;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wid as isize {
                                continue;
                            }
                            let xbase = (iy as usize * wid + ix as usize) * cin;
                            let wbase = (ky * k + kx) * cin * cout;
                            for ci in 0..cin {
                                let xv = xd[xbase + ci];
                                if xv == 0.0 {
                                    continue;
                                }
                                let wrow = wbase + ci * cout;
                                for co in 0..cout {
                                    gw[wrow + co] += xv * dout[obase + co];
                                }
                            }
                        }
                    }
                }
            }
        });
    })
}

/// Space-to-depth: `[H,W,C] -> [H/r, W/r, C*r*r]`.
pub fn pixel_unshuffle(tape: &Tape, x: &Tensor, r: usize) -> Result<Tensor> {
    let (h, w, c) = dims3("pixel_unshuffle", x)?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::shape(
            "pixel_unshuffle",
            format!("{}x{} not divisible by factor {}", h, w, r),
        ));
    }
    let (ho, wo, co) = (h / r, w / r, c * r * r);
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for oy in 0..ho {
        for ox in 0..wo {
            for ch in 0..c {
                for dy in 0..r {
                    for dx in 0..r {
                        out[(oy * wo + ox) * co + ch * r * r + dy * r + dx] =
                            xd[((oy * r + dy) * w + (ox * r + dx)) * c + ch];
                    }
                }
            }
        }
    }
    let xc = x.clone();
    tape.emit("pixel_unshuffle", &[x], vec![ho, wo, co], out, move |dout, gm| {
        gm.accumulate(&xc, |gx| {
            for oy in 0..ho {
                for ox in 0..wo {
                    for ch in 0..c {
                        for dy in 0..r {
                            for dx in 0..r {
                                gx[((oy * r + dy) * w + (ox * r + dx)) * c + ch] +=
                                    dout[(oy * wo + ox) * co + ch * r * r + dy * r + dx];
                            }
                        }
                    }
                }
            }
        });
    })
}

/// Depth-to-space: exact inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(tape: &Tape, x: &Tensor, r: usize) -> Result<Tensor> {
    let (h, w, c) = dims3("pixel_shuffle", x)?;
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::shape(
            "pixel_shuffle",
            format!("{} channels not divisible by {}^2", c, r),
        ));
    }
    let (ho, wo, co) = (h * r, w * r, c / (r * r));
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for y in 0..h {
        for xq in 0..w {
            for ch in 0..co {
                for dy in 0..r {
                    for dx in 0..r {
                        out[((y * r + dy) * wo + (xq * r + dx)) * co + ch] =
                            xd[(y * w + xq) * c + ch * r * r + dy * r + dx];
                    }
                }
            }
        }
    }
    let xc = x.clone();
    tape.emit("pixel_shuffle", &[x], vec![ho, wo, co], out, move |dout, gm| {
        gm.accumulate(&xc, |gx| {
            for y in 0..h {
                for xq in 0..w {
                    for ch in 0..co {
                        for dy in 0..r {
                            for dx in 0..r {
                                gx[(y * w + xq) * c + ch * r * r + dy * r + dx] +=
                                    dout[((y * r + dy) * wo + (xq * r + dx)) * co + ch];
                            }
                        }
                    }
                }
            }
        });
    })
}

/// Mean pooling over non-overlapping `r x r` blocks.
pub fn avg_pool(tape: &Tape, x: &Tensor, r: usize) -> Result<Tensor> {
    let (h, w, c) = dims3("avg_pool", x)?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::shape(
            "avg_pool",
            format!("{}x{} not divisible by factor {}", h, w, r),
        ));
    }
    let (ho, wo) = (h / r, w / r);
    let inv = 1.0 / (r * r) as f64;
    let xd = x.data();
    let mut out = vec![0.0; ho * wo * c];
    for oy in 0..ho {
        for ox in 0..wo {
            for dy in 0..r {
                for dx in 0..r {
                    let base = ((oy * r + dy) * w + (ox * r + dx)) * c;
                    for ch in 0..c {
                        out[(oy * wo + ox) * c + ch] += xd[base + ch] * inv;
                    }
                }
            }
        }
    }
    let xc = x.clone();
    tape.emit("avg_pool", &[x], vec![ho, wo, c], out, move |dout, gm| {
        gm.accumulate(&xc, |gx| {
            for oy in 0..ho {
                for ox in 0..wo {
                    for dy in 0..r {
                        for dx in 0..r {
                            let base = ((oy * r + dy) * w + (ox * r + dx)) * c;
                            for ch in 0..c {
                                gx[base + ch] += dout[(oy * wo + ox) * c + ch] * inv;
                            }
                        }
                    }
                }
            }
        });
    })
}

/// Mean over the spatial grid: `[H,W,C] -> [C]`.
pub fn global_avg_pool(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let (h, w, c) = dims3("global_avg_pool", x)?;
    let inv = 1.0 / (h * w) as f64;
    let xd = x.data();
    let mut out = vec![0.0; c];
    for px in 0..h * w {
        for ch in 0..c {
            out[ch] += xd[px * c + ch] * inv;
        }
    }
    let xc = x.clone();
    tape.emit("global_avg_pool", &[x], vec![c], out, move |dout, gm| {
        gm.accumulate(&xc, |gx| {
            for px in 0..h * w {
                for ch in 0..c {
                    gx[px * c + ch] += dout[ch] * inv;
                }
            }
        });
    })
}
