use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Copy row `row` out of an `[P,C]` matrix. The backward pass scatters into
/// that row only, so unselected rows keep exact-zero gradients.
pub fn select_row(tape: &Tape, m: &Tensor, row: usize) -> Result<Tensor> {
    let (p, c) = match *m.shape() {
        [p, c] => (p, c),
        _ => {
            return Err(Error::shape(
                "select_row",
                format!("expected rank-2 matrix, got {:?}", m.shape()),
            ))
        }
    };
    if row >= p {
        return Err(Error::shape(
            "select_row",
            format!("row {} out of range 0..{}", row, p),
        ));
    }
    let out = m.data()[row * c..(row + 1) * c].to_vec();
    let mc = m.clone();
    tape.emit("select_row", &[m], vec![c], out, move |dout, gm| {
        gm.accumulate(&mc, |g| {
            for ch in 0..c {
                g[row * c + ch] += dout[ch];
            }
        });
    })
}

/// Repeat a vector end-to-end until it reaches `target` elements.
pub fn tile_to(tape: &Tape, v: &Tensor, target: usize) -> Result<Tensor> {
    let d = v.numel();
    if d == 0 || target % d != 0 {
        return Err(Error::shape(
            "tile_to",
            format!("length {} does not divide target {}", d, target),
        ));
    }
    let vd = v.data();
    let out: Vec<f64> = (0..target).map(|i| vd[i % d]).collect();
    let vc = v.clone();
    tape.emit("tile_to", &[v], vec![target], out, move |dout, gm| {
        gm.accumulate(&vc, |g| {
            for (i, &dv) in dout.iter().enumerate() {
                g[i % d] += dv;
            }
        });
    })
}

/// Sparse modify-weight routing: scale a base kernel by the alpha-weighted
/// sum of rank-1 four-way outer products.
///
/// `out[a,b,m,n] = (sum_i alpha[i] * u[i,a]*v[i,b]*ci[i,m]*co[i,n]) * w[a,b,m,n]`
///
/// With every modify vector at all-ones and alpha summing to one (left to
/// right), the modifier is exactly 1.0 and the base kernel passes through
/// bit-unchanged.
pub fn route_kernel(
    tape: &Tape,
    w: &Tensor,
    u: &Tensor,
    v: &Tensor,
    ci: &Tensor,
    co: &Tensor,
    alpha: &Tensor,
) -> Result<Tensor> {
    let (k1, k2, cin, cout) = match *w.shape() {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(Error::shape(
                "route_kernel",
                format!("kernel must be rank-4, got {:?}", w.shape()),
            ))
        }
    };
    let paths = match *alpha.shape() {
        [p] => p,
        _ => {
            return Err(Error::shape(
                "route_kernel",
                format!("alpha must be rank-1, got {:?}", alpha.shape()),
            ))
        }
    };
    for (name, t, dim) in [("u", u, k1), ("v", v, k2), ("ci", ci, cin), ("co", co, cout)] {
        if t.shape() != [paths, dim] {
            return Err(Error::shape(
                "route_kernel",
                format!(
                    "modify vectors `{}` must be [{},{}], got {:?}",
                    name,
                    paths,
                    dim,
                    t.shape()
                ),
            ));
        }
    }

    let modifier = move |ud: &[f64], vd: &[f64], cid: &[f64], cod: &[f64], al: &[f64]| {
        let mut m = vec![0.0; k1 * k2 * cin * cout];
        for i in 0..paths {
            let a = al[i];
            let (ui, vi) = (&ud[i * k1..(i + 1) * k1], &vd[i * k2..(i + 1) * k2]);
            let (cii, coi) = (&cid[i * cin..(i + 1) * cin], &cod[i * cout..(i + 1) * cout]);
            let mut idx = 0;
            for ua in ui.iter().map(|&x| a * x) {
                for &vb in vi {
                    let uv = ua * vb;
                    for &cm in cii {
                        let uvc = uv * cm;
                        for &on in coi {
                            m[idx] += uvc * on;
                            idx += 1;
                        }
                    }
                }
            }
        }
        m
    };

    let modv = modifier(u.data(), v.data(), ci.data(), co.data(), alpha.data());
    let out: Vec<f64> = w.data().iter().zip(&modv).map(|(&wv, &mv)| mv * wv).collect();

    let (wc, uc, vc, cic, coc, alc) = (
        w.clone(),
        u.clone(),
        v.clone(),
        ci.clone(),
        co.clone(),
        alpha.clone(),
    );
    tape.emit(
        "route_kernel",
        &[w, u, v, ci, co, alpha],
        w.shape().to_vec(),
        out,
        move |dout, gm| {
            let (ud, vd, cid, cod, ald) = (
                uc.data(),
                vc.data(),
                cic.data(),
                coc.data(),
                alc.data(),
            );
            gm.accumulate(&wc, |g| {
                let modv = modifier(ud, vd, cid, cod, ald);
                for i in 0..g.len() {
                    g[i] += modv[i] * dout[i];
                }
            });
            // scaled = w .* dout, contracted against the rank-1 factors
            let scaled: Vec<f64> = wc.data().iter().zip(dout).map(|(&wv, &dv)| wv * dv).collect();
            let mut gu = vec![0.0; ud.len()];
            let mut gv = vec![0.0; vd.len()];
            let mut gci = vec![0.0; cid.len()];
            let mut gco = vec![0.0; cod.len()];
            let mut gal = vec![0.0; paths];
            for i in 0..paths {
                let a = ald[i];
                let (ui, vi) = (&ud[i * k1..(i + 1) * k1], &vd[i * k2..(i + 1) * k2]);
                let (cii, coi) = (&cid[i * cin..(i + 1) * cin], &cod[i * cout..(i + 1) * cout]);
                let mut idx = 0;
                for ia in 0..k1 {
                    let ua = ui[ia];
                    for ib in 0..k2 {
                        let vb = vi[ib];
                        let uv = ua * vb;
                        for im in 0..cin {
                            let cm = cii[im];
                            let uvc = uv * cm;
                            let vc_ = vb * cm;
                            let uc_ = ua * cm;
                            for (ins, &on) in coi.iter().enumerate() {
                                let s = scaled[idx];
                                idx += 1;
                                if s == 0.0 {
                                    continue;
                                }
                                gu[i * k1 + ia] += a * vc_ * on * s;
                                gv[i * k2 + ib] += a * uc_ * on * s;
                                gci[i * cin + im] += a * uv * on * s;
                                gco[i * cout + ins] += a * uvc * s;
                                gal[i] += uvc * on * s;
                            }
                        }
                    }
                }
            }
            gm.accumulate(&uc, |g| {
                for i in 0..g.len() {
                    g[i] += gu[i];
                }
            });
            gm.accumulate(&vc, |g| {
                for i in 0..g.len() {
                    g[i] += gv[i];
                }
            });
            gm.accumulate(&cic, |g| {
                for i in 0..g.len() {
                    g[i] += gci[i];
                }
            });
            gm.accumulate(&coc, |g| {
                for i in 0..g.len() {
                    g[i] += gco[i];
                }
            });
            gm.accumulate(&alc, |g| {
                for i in 0..g.len() {
                    g[i] += gal[i];
                }
            });
        },
    )
}

/// Straight-through estimator: forward emits `hard` verbatim, backward passes
/// the cotangent to `soft` unchanged. Deliberately unregistered for gradient
/// checking (the estimator is not the true derivative).
pub fn straight_through(tape: &Tape, soft: &Tensor, hard: Vec<f64>) -> Result<Tensor> {
    if hard.len() != soft.numel() {
        return Err(Error::shape(
            "straight_through",
            format!("{} hard values for {} soft", hard.len(), soft.numel()),
        ));
    }
    let sc = soft.clone();
    tape.emit(
        "straight_through",
        &[soft],
        soft.shape().to_vec(),
        hard,
        move |dout, gm| {
            gm.accumulate(&sc, |g| {
                for i in 0..g.len() {
                    g[i] += dout[i];
                }
            });
        },
    )
}
