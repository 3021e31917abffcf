//! Central finite-difference verification of every registered primitive.
//!
//! Each registry entry generates random small-shape trials, built to stay
//! away from non-differentiable points (ties, kinks, integer sampling
//! coordinates). Checks run on a 64-bit tape against a random projection of
//! the output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{backward, ops, Precision, Tape, Tensor};

/// One randomized instance of an op: differentiable inputs plus a closure
/// that applies the op (non-tensor attributes are baked into the closure).
pub struct Trial {
    pub inputs: Vec<Tensor>,
    pub apply: Box<dyn Fn(&Tape, &[Tensor]) -> Result<Tensor>>,
}

type TrialGen = Box<dyn Fn(&mut ChaCha8Rng) -> Trial>;

pub struct RegisteredOp {
    pub name: String,
    gen: TrialGen,
    /// Cap on finite-difference probes per input (None = exhaustive). Large
    /// composite losses subsample; primitives never do.
    pub fd_samples: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct OpReport {
    pub name: String,
    pub trials: usize,
    /// Max relative error seen per input slot.
    pub input_errs: Vec<f64>,
    pub max_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct CheckParams {
    pub trials: usize,
    pub eps: f64,
    pub tol: f64,
    pub seed: u64,
}

impl Default for CheckParams {
    fn default() -> Self {
        CheckParams {
            trials: 10,
            eps: 1e-5,
            tol: 1e-4,
            seed: 0x5eed,
        }
    }
}

/// Ordered collection of checkable ops.
pub struct Registry {
    ops: Vec<RegisteredOp>,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

fn projected_loss(tape: &Tape, out: &Tensor, proj: &Tensor) -> Result<Tensor> {
    let weighted = ops::mul(tape, out, proj)?;
    ops::sum(tape, &weighted)
}

impl Registry {
    pub fn empty() -> Registry {
        Registry { ops: Vec::new() }
    }

    pub fn register(
        &mut self,
        name: &str,
        fd_samples: Option<usize>,
        gen: impl Fn(&mut ChaCha8Rng) -> Trial + 'static,
    ) {
        self.ops.push(RegisteredOp {
            name: name.to_string(),
            gen: Box::new(gen),
            fd_samples,
        });
    }

    pub fn names(&self) -> Vec<String> {
        self.ops.iter().map(|o| o.name.clone()).collect()
    }

    pub fn check(&self, name: &str, params: CheckParams) -> Result<OpReport> {
        let op = self
            .ops
            .iter()
            .find(|o| o.name == name)
            .ok_or_else(|| Error::UnknownOp(name.to_string()))?;
        check_op(op, params)
    }

    pub fn check_all(&self, params: CheckParams) -> Result<Vec<OpReport>> {
        self.ops.iter().map(|op| check_op(op, params)).collect()
    }

    /// Every differentiable primitive of the tensor core.
    pub fn standard() -> Registry {
        let mut reg = Registry::empty();

        fn t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
            let n: usize = shape.iter().product();
            Tensor::param(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
        }
        /// Values bounded away from zero (for kinks at the origin).
        fn t_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
            let n: usize = shape.iter().product();
            Tensor::param(
                shape,
                (0..n)
                    .map(|_| {
                        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                        sign * rng.gen_range(0.2..1.2)
                    })
                    .collect(),
            )
        }
        /// Coordinates whose fractional part stays inside (0.2, 0.8) so an
        /// eps probe cannot cross a cell boundary.
        fn safe_coord(rng: &mut ChaCha8Rng, lo: isize, hi: isize) -> f64 {
            rng.gen_range(lo..hi) as f64 + rng.gen_range(0.2..0.8)
        }

        macro_rules! simple {
            ($reg:expr, $name:expr, $gen:expr) => {
                $reg.register($name, None, $gen);
            };
        }

        simple!(reg, "add", |rng: &mut ChaCha8Rng| {
            let a = t(rng, &[2, 3], -1.0, 1.0);
            let b = t(rng, &[2, 3], -1.0, 1.0);
            Trial {
                inputs: vec![a, b],
                apply: Box::new(|tp, inp| ops::add(tp, &inp[0], &inp[1])),
            }
        });
        simple!(reg, "sub", |rng: &mut ChaCha8Rng| {
            let a = t(rng, &[5], -1.0, 1.0);
            let b = t(rng, &[5], -1.0, 1.0);
            Trial {
                inputs: vec![a, b],
                apply: Box::new(|tp, inp| ops::sub(tp, &inp[0], &inp[1])),
            }
        });
        simple!(reg, "mul", |rng: &mut ChaCha8Rng| {
            let a = t(rng, &[4], -1.0, 1.0);
            let b = t(rng, &[4], -1.0, 1.0);
            Trial {
                inputs: vec![a, b],
                apply: Box::new(|tp, inp| ops::mul(tp, &inp[0], &inp[1])),
            }
        });
        simple!(reg, "div", |rng: &mut ChaCha8Rng| {
            let a = t(rng, &[4], -1.0, 1.0);
            let b = t(rng, &[4], 0.5, 1.5);
            Trial {
                inputs: vec![a, b],
                apply: Box::new(|tp, inp| ops::div(tp, &inp[0], &inp[1])),
            }
        });
        simple!(reg, "scale", |rng: &mut ChaCha8Rng| {
            let a = t(rng, &[6], -1.0, 1.0);
            let c = rng.gen_range(-2.0..2.0);
            Trial {
                inputs: vec![a],
                apply: Box::new(move |tp, inp| ops::scale(tp, &inp[0], c)),
            }
        });
        simple!(reg, "add_scalar", |rng: &mut ChaCha8Rng| {
            let a = t(rng, &[6], -1.0, 1.0);
            let c = rng.gen_range(-2.0..2.0);
            Trial {
                inputs: vec![a],
                apply: Box::new(move |tp, inp| ops::add_scalar(tp, &inp[0], c)),
            }
        });
        simple!(reg, "scale_by", |rng: &mut ChaCha8Rng| {
            let a = t(rng, &[5], -1.0, 1.0);
            let s = t(rng, &[1], 0.3, 2.0);
            Trial {
                inputs: vec![a, s],
                apply: Box::new(|tp, inp| ops::scale_by(tp, &inp[0], &inp[1])),
            }
        });
        simple!(reg, "relu", |rng: &mut ChaCha8Rng| {
            let a = t_off_zero(rng, &[8]);
            Trial {
                inputs: vec![a],
                apply: Box::new(|tp, inp| ops::relu(tp, &inp[0])),
            }
        });
        simple!(reg, "abs", |rng: &mut ChaCha8Rng| {
            let a = t_off_zero(rng, &[8]);
            Trial {
                inputs: vec![a],
                apply: Box::new(|tp, inp| ops::abs(tp, &inp[0])),
            }
        });
        simple!(reg, "exp", |rng: &mut ChaCha8Rng| {
            let a = t(rng, &[5], -1.0, 1.0);
            Trial {
                inputs: vec![a],
                apply: Box::new(|tp, inp| ops::exp(tp, &inp[0])),
            }
        });
        simple!(reg, "ln", |rng: &mut ChaCha8Rng| {
            let a = t(rng, &[5], 0.5, 2.0);
            Trial {
                inputs: vec![a],
                apply: Box::new(|tp, inp| ops::ln(tp, &inp[0])),
            }
        });
        simple!(reg, "sqrt", |rng: &mut ChaCha8Rng| {
            let a = t(rng, &[5], 0.5, 2.0);
            Trial {
                inputs: vec![a],
                apply: Box::new(|tp, inp| ops::sqrt(tp, &inp[0])),
            }
        });
        simple!(reg, "recip", |rng: &mut ChaCha8Rng| {
            let a = t(rng, &[5], 0.5, 2.0);
            Trial {
                inputs: vec![a],
                apply: Box::new(|tp, inp| ops::recip(tp, &inp[0])),
            }
        });
        simple!(reg, "sum", |rng: &mut ChaCha8Rng| {
            let a = t(rng, &[7], -1.0, 1.0);
            Trial {
                inputs: vec![a],
                apply: Box::new(|tp, inp| ops::sum(tp, &inp[0])),
            }
        });
        simple!(reg, "mean", |rng: &mut ChaCha8Rng| {
            let a = t(rng, &[7], -1.0, 1.0);
            Trial {
                inputs: vec![a],
                apply: Box::new(|tp, inp| ops::mean(tp, &inp[0])),
            }
        });
        simple!(reg, "matvec", |rng: &mut ChaCha8Rng| {
            let w = t(rng, &[3, 4], -1.0, 1.0);
            let x = t(rng, &[4], -1.0, 1.0);
            Trial {
                inputs: vec![w, x],
                apply: Box::new(|tp, inp| ops::matvec(tp, &inp[0], &inp[1])),
            }
        });
        simple!(reg, "bias_add", |rng: &mut ChaCha8Rng| {
            let x = t(rng, &[3, 4, 2], -1.0, 1.0);
            let b = t(rng, &[2], -1.0, 1.0);
            Trial {
                inputs: vec![x, b],
                apply: Box::new(|tp, inp| ops::bias_add(tp, &inp[0], &inp[1])),
            }
        });
        simple!(reg, "concat_channels", |rng: &mut ChaCha8Rng| {
            let a = t(rng, &[2, 3, 2], -1.0, 1.0);
            let b = t(rng, &[2, 3, 1], -1.0, 1.0);
            let c = t(rng, &[2, 3, 3], -1.0, 1.0);
            Trial {
                inputs: vec![a, b, c],
                apply: Box::new(|tp, inp| {
                    ops::concat_channels(tp, &[&inp[0], &inp[1], &inp[2]])
                }),
            }
        });
        simple!(reg, "softmax", |rng: &mut ChaCha8Rng| {
            let x = t(rng, &[6], -2.0, 2.0);
            Trial {
                inputs: vec![x],
                apply: Box::new(|tp, inp| ops::softmax(tp, &inp[0])),
            }
        });
        simple!(reg, "softmax_rows", |rng: &mut ChaCha8Rng| {
            let x = t(rng, &[12], -2.0, 2.0);
            Trial {
                inputs: vec![x],
                apply: Box::new(|tp, inp| ops::softmax_rows(tp, &inp[0], 4)),
            }
        });
        simple!(reg, "conv2d", |rng: &mut ChaCha8Rng| {
            let x = t(rng, &[4, 5, 2], -1.0, 1.0);
            let w = t(rng, &[3, 3, 2, 3], -1.0, 1.0);
            let stride = rng.gen_range(1..3usize);
            let pad = rng.gen_range(0..2usize);
            Trial {
                inputs: vec![x, w],
                apply: Box::new(move |tp, inp| ops::conv2d(tp, &inp[0], &inp[1], stride, pad)),
            }
        });
        simple!(reg, "pixel_unshuffle", |rng: &mut ChaCha8Rng| {
            let x = t(rng, &[4, 4, 2], -1.0, 1.0);
            Trial {
                inputs: vec![x],
                apply: Box::new(|tp, inp| ops::pixel_unshuffle(tp, &inp[0], 2)),
            }
        });
        simple!(reg, "pixel_shuffle", |rng: &mut ChaCha8Rng| {
            let x = t(rng, &[2, 2, 8], -1.0, 1.0);
            Trial {
                inputs: vec![x],
                apply: Box::new(|tp, inp| ops::pixel_shuffle(tp, &inp[0], 2)),
            }
        });
        simple!(reg, "avg_pool", |rng: &mut ChaCha8Rng| {
            let x = t(rng, &[4, 6, 3], -1.0, 1.0);
            Trial {
                inputs: vec![x],
                apply: Box::new(|tp, inp| ops::avg_pool(tp, &inp[0], 2)),
            }
        });
        simple!(reg, "global_avg_pool", |rng: &mut ChaCha8Rng| {
            let x = t(rng, &[3, 4, 3], -1.0, 1.0);
            Trial {
                inputs: vec![x],
                apply: Box::new(|tp, inp| ops::global_avg_pool(tp, &inp[0])),
            }
        });
        simple!(reg, "bilinear_sample", |rng: &mut ChaCha8Rng| {
            let x = t(rng, &[4, 5, 3], -1.0, 1.0);
            let p = Tensor::param(&[2], vec![safe_coord(rng, -1, 4), safe_coord(rng, -1, 5)]);
            Trial {
                inputs: vec![x, p],
                apply: Box::new(|tp, inp| ops::bilinear_sample(tp, &inp[0], &inp[1])),
            }
        });
        simple!(reg, "warp", |rng: &mut ChaCha8Rng| {
            let x = t(rng, &[4, 4, 2], -1.0, 1.0);
            let n = 4 * 4 * 2;
            let flow = Tensor::param(
                &[4, 4, 2],
                (0..n)
                    .map(|_| {
                        let base = rng.gen_range(-2..2) as f64;
                        base + rng.gen_range(0.2..0.8)
                    })
                    .collect(),
            );
            Trial {
                inputs: vec![x, flow],
                apply: Box::new(|tp, inp| ops::warp(tp, &inp[0], &inp[1])),
            }
        });
        simple!(reg, "deformable_gather", |rng: &mut ChaCha8Rng| {
            let (h, w, m, tf, k, c) = (3, 3, 2, 2, 2, 4);
            let values = t(rng, &[h, w, tf * c], -1.0, 1.0);
            let attn = t(rng, &[h, w, m * tf * k], 0.0, 1.0);
            let n_off = h * w * 2 * m * tf * k;
            let offsets = Tensor::param(
                &[h, w, 2 * m * tf * k],
                (0..n_off)
                    .map(|_| rng.gen_range(-2..2) as f64 + rng.gen_range(0.2..0.8))
                    .collect(),
            );
            Trial {
                inputs: vec![values, attn, offsets],
                apply: Box::new(move |tp, inp| {
                    ops::deformable_gather(tp, &inp[0], &inp[1], &inp[2], m, tf, k)
                }),
            }
        });
        simple!(reg, "select_row", |rng: &mut ChaCha8Rng| {
            let m = t(rng, &[5, 3], -1.0, 1.0);
            let row = rng.gen_range(0..5usize);
            Trial {
                inputs: vec![m],
                apply: Box::new(move |tp, inp| ops::select_row(tp, &inp[0], row)),
            }
        });
        simple!(reg, "tile_to", |rng: &mut ChaCha8Rng| {
            let v = t(rng, &[3], -1.0, 1.0);
            Trial {
                inputs: vec![v],
                apply: Box::new(|tp, inp| ops::tile_to(tp, &inp[0], 12)),
            }
        });
        simple!(reg, "route_kernel", |rng: &mut ChaCha8Rng| {
            let (k, cin, cout, p) = (3, 2, 3, 2);
            let w = t(rng, &[k, k, cin, cout], -1.0, 1.0);
            let u = t(rng, &[p, k], 0.5, 1.5);
            let v = t(rng, &[p, k], 0.5, 1.5);
            let ci = t(rng, &[p, cin], 0.5, 1.5);
            let co = t(rng, &[p, cout], 0.5, 1.5);
            let alpha = t(rng, &[p], 0.1, 0.9);
            Trial {
                inputs: vec![w, u, v, ci, co, alpha],
                apply: Box::new(|tp, inp| {
                    ops::route_kernel(tp, &inp[0], &inp[1], &inp[2], &inp[3], &inp[4], &inp[5])
                }),
            }
        });

        reg
    }
}

/// Run central finite differences for one op.
pub fn check_op(op: &RegisteredOp, params: CheckParams) -> Result<OpReport> {
    let mut input_errs: Vec<f64> = Vec::new();
    for trial_idx in 0..params.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(
            params.seed ^ name_hash(&op.name) ^ (trial_idx as u64).wrapping_mul(0x9e3779b9),
        );
        let trial = (op.gen)(&mut rng);

        // Autodiff gradients on a 64-bit tape.
        let tape = Tape::with_precision(Precision::F64);
        let out = (trial.apply)(&tape, &trial.inputs)?;
        let proj = Tensor::new(
            out.shape(),
            (0..out.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let loss = projected_loss(&tape, &out, &proj)?;
        backward(&tape, &loss)?;

        if input_errs.len() < trial.inputs.len() {
            input_errs.resize(trial.inputs.len(), 0.0);
        }

        for (i, input) in trial.inputs.iter().enumerate() {
            let ad = input
                .grad()
                .unwrap_or_else(|| vec![0.0; input.numel()]);
            let element_ids: Vec<usize> = match op.fd_samples {
                None => (0..input.numel()).collect(),
                Some(cap) => {
                    let mut ids: Vec<usize> = (0..input.numel()).collect();
                    // seeded partial shuffle, keep `cap`
                    for j in 0..ids.len().min(cap) {
                        let pick = rng.gen_range(j..ids.len());
                        ids.swap(j, pick);
                    }
                    ids.truncate(cap.min(input.numel()));
                    ids
                }
            };
            for &e in &element_ids {
                let eval = |delta: f64| -> Result<f64> {
                    let mut data = input.data().to_vec();
                    data[e] += delta;
                    let tweaked: Vec<Tensor> = trial
                        .inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            if j == i {
                                Tensor::new(t.shape(), data.clone())
                            } else {
                                Tensor::new(t.shape(), t.data().to_vec())
                            }
                        })
                        .collect();
                    let tp = Tape::inference();
                    tp.set_precision(Precision::F64);
                    let o = (trial.apply)(&tp, &tweaked)?;
                    Ok(o.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
                };
                let fd = (eval(params.eps)? - eval(-params.eps)?) / (2.0 * params.eps);
                let err = rel_err(ad[e], fd);
                if err > input_errs[i] {
                    input_errs[i] = err;
                }
            }
        }
    }
    let max_err = input_errs.iter().cloned().fold(0.0, f64::max);
    Ok(OpReport {
        name: op.name.clone(),
        trials: params.trials,
        input_errs,
        max_err,
        pass: max_err < params.tol,
    })
}
