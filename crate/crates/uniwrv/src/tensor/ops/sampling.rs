use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

use super::dims3;

/// Four bilinear neighbors of a real coordinate. Out-of-grid neighbors read
/// as zero and receive no gradient, so sampling stays linear in the source.
#[derive(Clone, Copy)]
struct Corners {
    r0: isize,
    c0: isize,
    fr: f64,
    fc: f64,
}

impl Corners {
    fn at(pr: f64, pc: f64) -> Corners {
        let r0 = pr.floor();
        let c0 = pc.floor();
        Corners {
            r0: r0 as isize,
            c0: c0 as isize,
            fr: pr - r0,
            fc: pc - c0,
        }
    }

    /// (row, col, weight) for the four neighbors.
    fn taps(&self) -> [(isize, isize, f64); 4] {
        let (fr, fc) = (self.fr, self.fc);
        [
            (self.r0, self.c0, (1.0 - fr) * (1.0 - fc)),
            (self.r0, self.c0 + 1, (1.0 - fr) * fc),
            (self.r0 + 1, self.c0, fr * (1.0 - fc)),
            (self.r0 + 1, self.c0 + 1, fr * fc),
        ]
    }
}

#[inline]
fn fetch(data: &[f64], h: usize, w: usize, c: usize, r: isize, col: isize, ch: usize) -> f64 {
    if r < 0 || col < 0 || r >= h as isize || col >= w as isize {
        0.0
    } else {
        data[(r as usize * w + col as usize) * c + ch]
    }
}

/// Sampled value for one channel plus its derivative w.r.t. the coordinate.
#[inline]
fn sample_and_grad(
    data: &[f64],
    h: usize,
    w: usize,
    c: usize,
    corners: Corners,
    ch: usize,
) -> (f64, f64, f64) {
    let v00 = fetch(data, h, w, c, corners.r0, corners.c0, ch);
    let v01 = fetch(data, h, w, c, corners.r0, corners.c0 + 1, ch);
    let v10 = fetch(data, h, w, c, corners.r0 + 1, corners.c0, ch);
    let v11 = fetch(data, h, w, c, corners.r0 + 1, corners.c0 + 1, ch);
    let (fr, fc) = (corners.fr, corners.fc);
    let value = (1.0 - fr) * (1.0 - fc) * v00
        + (1.0 - fr) * fc * v01
        + fr * (1.0 - fc) * v10
        + fr * fc * v11;
    let d_dr = (1.0 - fc) * (v10 - v00) + fc * (v11 - v01);
    let d_dc = (1.0 - fr) * (v01 - v00) + fr * (v11 - v10);
    (value, d_dr, d_dc)
}

/// Bilinear sample of all channels at one real coordinate `p = [row, col]`.
pub fn bilinear_sample(tape: &Tape, x: &Tensor, p: &Tensor) -> Result<Tensor> {
    let (h, w, c) = dims3("bilinear_sample", x)?;
    if p.shape() != [2] {
        return Err(Error::shape(
            "bilinear_sample",
            format!("coordinate must be [2], got {:?}", p.shape()),
        ));
    }
    let corners = Corners::at(p.data()[0], p.data()[1]);
    let xd = x.data();
    let mut out = vec![0.0; c];
    for ch in 0..c {
        out[ch] = sample_and_grad(xd, h, w, c, corners, ch).0;
    }
    let (xc, pc) = (x.clone(), p.clone());
    tape.emit("bilinear_sample", &[x, p], vec![c], out, move |dout, gm| {
        gm.accumulate(&xc, |gx| {
            for (r, col, wt) in corners.taps() {
                if r < 0 || col < 0 || r >= h as isize || col >= w as isize {
                    continue;
                }
                let base = (r as usize * w + col as usize) * c;
                for ch in 0..c {
                    gx[base + ch] += wt * dout[ch];
                }
            }
        });
        gm.accumulate(&pc, |gp| {
            let xd = xc.data();
            let (mut dr, mut dc) = (0.0, 0.0);
            for ch in 0..c {
                let (_, d_dr, d_dc) = sample_and_grad(xd, h, w, c, corners, ch);
                dr += dout[ch] * d_dr;
                dc += dout[ch] * d_dc;
            }
            gp[0] += dr;
            gp[1] += dc;
        });
    })
}

/// Backward warp: `out[r,c] = x sampled at (r,c) + flow[r,c]`. Zero flow is
/// the bit-exact identity.
pub fn warp(tape: &Tape, x: &Tensor, flow: &Tensor) -> Result<Tensor> {
    let (h, w, c) = dims3("warp", x)?;
    let (fh, fw, fc) = dims3("warp", flow)?;
    if (fh, fw, fc) != (h, w, 2) {
        return Err(Error::shape(
            "warp",
            format!("flow must be [{},{},2], got {:?}", h, w, flow.shape()),
        ));
    }
    let xd = x.data();
    let fd = flow.data();
    let mut out = vec![0.0; h * w * c];
    for r in 0..h {
        for col in 0..w {
            let px = r * w + col;
            let corners = Corners::at(r as f64 + fd[px * 2], col as f64 + fd[px * 2 + 1]);
            for ch in 0..c {
                out[px * c + ch] = sample_and_grad(xd, h, w, c, corners, ch).0;
            }
        }
    }
    let (xc, flc) = (x.clone(), flow.clone());
    tape.emit("warp", &[x, flow], vec![h, w, c], out, move |dout, gm| {
        gm.accumulate(&xc, |gx| {
            let fd = flc.data();
            for r in 0..h {
                for col in 0..w {
                    let px = r * w + col;
                    let corners =
                        Corners::at(r as f64 + fd[px * 2], col as f64 + fd[px * 2 + 1]);
                    for (tr, tc, wt) in corners.taps() {
                        if tr < 0 || tc < 0 || tr >= h as isize || tc >= w as isize {
                            continue;
                        }
                        let base = (tr as usize * w + tc as usize) * c;
                        for ch in 0..c {
                            gx[base + ch] += wt * dout[px * c + ch];
                        }
                    }
                }
            }
        });
        gm.accumulate(&flc, |gf| {
            let xd = xc.data();
            let fd = flc.data();
            for r in 0..h {
                for col in 0..w {
                    let px = r * w + col;
                    let corners =
                        Corners::at(r as f64 + fd[px * 2], col as f64 + fd[px * 2 + 1]);
                    let (mut dr, mut dc) = (0.0, 0.0);
                    for ch in 0..c {
                        let (_, d_dr, d_dc) = sample_and_grad(xd, h, w, c, corners, ch);
                        dr += dout[px * c + ch] * d_dr;
                        dc += dout[px * c + ch] * d_dc;
                    }
                    gf[px * 2] += dr;
                    gf[px * 2 + 1] += dc;
                }
            }
        });
    })
}

/// Weighted gather for deformable multi-frame attention.
///
/// * `values`:  `[H,W,T*C]` — per-frame value maps; head `m` owns channels
///   `m*Cv..(m+1)*Cv` inside each frame block (`Cv = C / heads`).
/// * `attn`:    `[H,W,M*T*K]` — slot weights, slot = `(m*T + t)*K + j`.
/// * `offsets`: `[H,W,2*M*T*K]` — (row, col) displacement per slot.
///
/// `out[p, m*Cv+q] = sum over (t,j) of attn * values sampled at p + offset`.
pub fn deformable_gather(
    tape: &Tape,
    values: &Tensor,
    attn: &Tensor,
    offsets: &Tensor,
    heads: usize,
    frames: usize,
    points: usize,
) -> Result<Tensor> {
    let (h, w, vch) = dims3("deformable_gather", values)?;
    let (m, t, k) = (heads, frames, points);
    if m == 0 || t == 0 || k == 0 || vch % t != 0 {
        return Err(Error::shape(
            "deformable_gather",
            format!("{} value channels not divisible into {} frames", vch, t),
        ));
    }
    let c = vch / t;
    if c % m != 0 {
        return Err(Error::shape(
            "deformable_gather",
            format!("{} channels not divisible across {} heads", c, m),
        ));
    }
    let cv = c / m;
    let slots = m * t * k;
    let (ah, aw, ac) = dims3("deformable_gather", attn)?;
    if (ah, aw, ac) != (h, w, slots) {
        return Err(Error::shape(
            "deformable_gather",
            format!("attention must be [{},{},{}], got {:?}", h, w, slots, attn.shape()),
        ));
    }
    let (oh, ow, oc) = dims3("deformable_gather", offsets)?;
    if (oh, ow, oc) != (h, w, 2 * slots) {
        return Err(Error::shape(
            "deformable_gather",
            format!(
                "offsets must be [{},{},{}], got {:?}",
                h,
                w,
                2 * slots,
                offsets.shape()
            ),
        ));
    }

    let vd = values.data();
    let ad = attn.data();
    let od = offsets.data();
    let mut out = vec![0.0; h * w * c];
    for r in 0..h {
        for col in 0..w {
            let px = r * w + col;
            for mi in 0..m {
                for ti in 0..t {
                    for j in 0..k {
                        let slot = (mi * t + ti) * k + j;
                        let a = ad[px * slots + slot];
                        let corners = Corners::at(
                            r as f64 + od[px * 2 * slots + 2 * slot],
                            col as f64 + od[px * 2 * slots + 2 * slot + 1],
                        );
                        for q in 0..cv {
                            let vch_idx = ti * c + mi * cv + q;
                            let v = sample_and_grad(vd, h, w, vch, corners, vch_idx).0;
                            out[px * c + mi * cv + q] += a * v;
                        }
                    }
                }
            }
        }
    }

    let (vc2, atc, ofc) = (values.clone(), attn.clone(), offsets.clone());
    tape.emit(
        "deformable_gather",
        &[values, attn, offsets],
        vec![h, w, c],
        out,
        move |dout, gm| {
            // One combined pass fills all three local buffers.
            let vd = vc2.data();
            let ad = atc.data();
            let od = ofc.data();
            let mut gv = vec![0.0; vd.len()];
            let mut ga = vec![0.0; ad.len()];
            let mut go = vec![0.0; od.len()];
            for r in 0..h {
                for col in 0..w {
                    let px = r * w + col;
                    for mi in 0..m {
                        for ti in 0..t {
                            for j in 0..k {
                                let slot = (mi * t + ti) * k + j;
                                let a = ad[px * slots + slot];
                                let corners = Corners::at(
                                    r as f64 + od[px * 2 * slots + 2 * slot],
                                    col as f64 + od[px * 2 * slots + 2 * slot + 1],
                                );
                                let (mut dr, mut dc, mut da) = (0.0, 0.0, 0.0);
                                for q in 0..cv {
                                    let vch_idx = ti * c + mi * cv + q;
                                    let g = dout[px * c + mi * cv + q];
                                    let (v, d_dr, d_dc) =
                                        sample_and_grad(vd, h, w, vch, corners, vch_idx);
                                    da += g * v;
                                    dr += g * a * d_dr;
                                    dc += g * a * d_dc;
                                    for (tr, tc, wt) in corners.taps() {
                                        if tr < 0
                                            || tc < 0
                                            || tr >= h as isize
                                            || tc >= w as isize
                                        {
                                            continue;
                                        }
                                        gv[(tr as usize * w + tc as usize) * vch + vch_idx] +=
                                            wt * a * g;
                                    }
                                }
                                ga[px * slots + slot] += da;
                                go[px * 2 * slots + 2 * slot] += dr;
                                go[px * 2 * slots + 2 * slot + 1] += dc;
                            }
                        }
                    }
                }
            }
            gm.accumulate(&vc2, |g| {
                for i in 0..g.len() {
                    g[i] += gv[i];
                }
            });
            gm.accumulate(&atc, |g| {
                for i in 0..g.len() {
                    g[i] += ga[i];
                }
            });
            gm.accumulate(&ofc, |g| {
                for i in 0..g.len() {
                    g[i] += go[i];
                }
            });
        },
    )
}
