//! Adam optimization with cosine-annealed learning rate, plus the full
//! training loop over a generated dataset.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{crop, dihedral, index_split, Triplet};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, UniWrv};
use crate::params::ParamStore;
use crate::tensor::{backward, ops, Precision, Tape};

/// Cosine annealing from `lr_init` down to exactly `lr_floor` at the final
/// iteration.
pub fn cosine_lr(iteration: usize, total: usize, lr_init: f64, lr_floor: f64) -> f64 {
    if total <= 1 {
        return lr_floor;
    }
    let t = iteration.min(total - 1) as f64 / (total - 1) as f64;
    lr_floor + 0.5 * (lr_init - lr_floor) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam with per-parameter first/second moment state. Updated parameters are
/// rounded to f32 so checkpoints round-trip bit-exactly.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Adam {
        let sizes: Vec<usize> = store.ids().map(|id| store.get(id).numel()).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Apply one update from the gradients currently stored on the params.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &ParamStore, lr: f64) {
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (slot, id) in store.ids().enumerate() {
            let tensor = store.get(id);
            let Some(grad) = tensor.grad() else { continue };
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let mut data = tensor.data().to_vec();
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
                data[i] = data[i] as f32 as f64;
            }
            store.set_data(id, data);
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr_init: f64,
    pub lr_floor: f64,
    /// Square crop size in pixels (0 = full frames).
    pub crop: usize,
    pub seed: u64,
    pub checkpoint_interval: usize,
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch: 2,
            lr_init: 1e-3,
            lr_floor: 1e-5,
            crop: 24,
            seed: 7,
            checkpoint_interval: 500,
            log_interval: 25,
        }
    }
}

#[derive(Debug)]
pub struct TrainReport {
    pub iterations: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub final_lr: f64,
    pub checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
}

/// One training sample: a random clip, center, crop window, and dihedral
/// transform, all drawn from the run's RNG stream.
fn draw_sample(
    rng: &mut ChaCha8Rng,
    index: &crate::data::DatasetIndex,
    crop_size: usize,
) -> Result<Triplet> {
    let entry = &index.clips[rng.gen_range(0..index.clips.len())];
    let center = rng.gen_range(1..entry.frame_count - 1);
    let tri = entry.triplet(center)?;
    let (h, w) = (tri.degraded[0].shape()[0], tri.degraded[0].shape()[1]);
    if crop_size == 0 {
        return Ok(tri);
    }
    if crop_size % 4 != 0 {
        return Err(Error::Config(format!(
            "crop size {crop_size} must be divisible by 4"
        )));
    }
    if crop_size > h || crop_size > w {
        return Err(Error::Config(format!(
            "crop {crop_size} exceeds frame {h}x{w}"
        )));
    }
    let r0 = rng.gen_range(0..=h - crop_size);
    let c0 = rng.gen_range(0..=w - crop_size);
    let code = rng.gen_range(0..8u8);
    let tf = |t: &crate::tensor::Tensor| dihedral(&crop(t, r0, c0, crop_size), code);
    Ok(Triplet {
        degraded: [tf(&tri.degraded[0]), tf(&tri.degraded[1]), tf(&tri.degraded[2])],
        clean: [tf(&tri.clean[0]), tf(&tri.clean[1]), tf(&tri.clean[2])],
        condition: tri.condition,
    })
}

/// Full training run: Adam with a cosine-annealed learning rate, periodic
/// checkpoints, and a CSV metrics log. Deterministic for a fixed seed.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    hard_routing: bool,
    grad_mode_64bit: bool,
    data_dir: &Path,
    out_dir: &Path,
) -> Result<TrainReport> {
    if train_cfg.iterations == 0 || train_cfg.batch == 0 {
        return Err(Error::Config("iterations and batch must be positive".into()));
    }
    let index = index_split(data_dir, "train")?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut store = ParamStore::new();
    let model = UniWrv::new(&mut store, model_cfg.clone())?;
    let mut opt = Adam::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut hard_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed ^ 0x6a3b);
    let precision = if grad_mode_64bit {
        Precision::F64
    } else {
        Precision::F32
    };

    let metrics_csv = out_dir.join("metrics.csv");
    let mut log = fs::File::create(&metrics_csv).map_err(|e| Error::io(&metrics_csv, e))?;
    writeln!(log, "iteration,total,l1,prior_v,prior_c,flow,lr")
        .map_err(|e| Error::io(&metrics_csv, e))?;

    let mut first_loss = 0.0;
    let mut final_loss = 0.0;
    let mut final_lr = 0.0;
    let checkpoint = out_dir.join("model_final.uwrv");
    for iter in 0..train_cfg.iterations {
        let lr = cosine_lr(iter, train_cfg.iterations, train_cfg.lr_init, train_cfg.lr_floor);
        let tape = Tape::with_precision(precision);
        let mut batch_total = None;
        let mut sums = [0.0f64; 4]; // l1, prior_v, prior_c, flow
        for _ in 0..train_cfg.batch {
            let tri = draw_sample(&mut rng, &index, train_cfg.crop)?;
            let out = model.forward(
                &store,
                &tape,
                &tri.degraded,
                Some(&tri.clean),
                hard_routing.then_some(&mut hard_rng),
            )?;
            let losses = out.losses.unwrap();
            sums[0] += losses.l1;
            sums[1] += losses.prior_v;
            sums[2] += losses.prior_c;
            sums[3] += losses.flow;
            batch_total = Some(match batch_total {
                None => losses.total,
                Some(acc) => ops::add(&tape, &acc, &losses.total)?,
            });
        }
        let loss = ops::scale(&tape, &batch_total.unwrap(), 1.0 / train_cfg.batch as f64)?;
        backward(&tape, &loss)?;
        opt.step(&store, lr);

        let value = loss.item();
        if iter == 0 {
            first_loss = value;
        }
        final_loss = value;
        final_lr = lr;
        let b = train_cfg.batch as f64;
        if train_cfg.log_interval > 0
            && (iter % train_cfg.log_interval == 0 || iter + 1 == train_cfg.iterations)
        {
            writeln!(
                log,
                "{},{:.8},{:.8},{:.8},{:.8},{:.8},{:.10}",
                iter,
                value,
                sums[0] / b,
                sums[1] / b,
                sums[2] / b,
                sums[3] / b,
                lr
            )
            .map_err(|e| Error::io(&metrics_csv, e))?;
        }
        if train_cfg.checkpoint_interval > 0
            && (iter + 1) % train_cfg.checkpoint_interval == 0
            && iter + 1 != train_cfg.iterations
        {
            let path = out_dir.join(format!("ckpt_{:06}.uwrv", iter + 1));
            crate::checkpoint::save(&path, &model, &store, (iter + 1) as u64)?;
        }
    }
    crate::checkpoint::save(&checkpoint, &model, &store, train_cfg.iterations as u64)?;
    Ok(TrainReport {
        iterations: train_cfg.iterations,
        first_loss,
        final_loss,
        final_lr,
        checkpoint,
        metrics_csv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_hits_the_floor_exactly() {
        let (init, floor) = (1e-3, 1e-5);
        assert!((cosine_lr(0, 2000, init, floor) - init).abs() < 1e-12);
        assert!((cosine_lr(1999, 2000, init, floor) - floor).abs() < 1e-9);
        let mid = cosine_lr(1000, 2001, init, floor);
        assert!((mid - (floor + 0.5 * (init - floor))).abs() < 1e-9);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        use crate::tensor::{backward, ops, Tape};
        let mut store = ParamStore::new();
        let id = store.add("x", &[2], vec![3.0, -2.0]);
        let mut opt = Adam::new(&store);
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            let tape = Tape::new();
            let x = store.get(id);
            let sq = ops::mul(&tape, &x, &x).unwrap();
            let loss = ops::sum(&tape, &sq).unwrap();
            backward(&tape, &loss).unwrap();
            opt.step(&store, 0.05);
            last = loss.item();
        }
        assert!(last < 1e-2, "loss stayed at {last}");
    }

    fn tiny_dataset(dir: &Path) {
        let cfg = crate::weathergen::DatasetConfig {
            conditions: vec!["rain".into(), "haze".into()],
            clips_per_condition: 5,
            frames: 4,
            height: 16,
            width: 16,
            master_seed: 12,
        };
        crate::weathergen::make_dataset(&cfg, dir, false).unwrap();
    }

    fn tiny_train(data: &Path, out: &Path, grad64: bool, iterations: usize) -> TrainReport {
        let model_cfg = ModelConfig::tiny();
        let train_cfg = TrainConfig {
            iterations,
            batch: 1,
            crop: 8,
            seed: 3,
            checkpoint_interval: 0,
            log_interval: 1,
            ..TrainConfig::default()
        };
        train(&model_cfg, &train_cfg, false, grad64, data, out).unwrap()
    }

    #[test]
    fn one_iteration_is_bit_reproducible_in_64bit_mode() {
        let data = tempfile::tempdir().unwrap();
        tiny_dataset(data.path());
        let out_a = tempfile::tempdir().unwrap();
        let out_b = tempfile::tempdir().unwrap();
        let a = tiny_train(data.path(), out_a.path(), true, 1);
        let b = tiny_train(data.path(), out_b.path(), true, 1);
        assert_eq!(a.final_loss.to_bits(), b.final_loss.to_bits());
        let ck_a = std::fs::read(&a.checkpoint).unwrap();
        let ck_b = std::fs::read(&b.checkpoint).unwrap();
        assert_eq!(ck_a, ck_b);
    }

    #[test]
    fn training_logs_metrics_and_lands_on_the_lr_floor() {
        let data = tempfile::tempdir().unwrap();
        tiny_dataset(data.path());
        let out = tempfile::tempdir().unwrap();
        let report = tiny_train(data.path(), out.path(), false, 5);
        assert!((report.final_lr - 1e-5).abs() < 1e-9);
        let log = std::fs::read_to_string(&report.metrics_csv).unwrap();
        let mut lines = log.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iteration,total,l1,prior_v,prior_c,flow,lr"
        );
        assert_eq!(lines.count(), 5);
        assert!(report.checkpoint.exists());
    }

    #[test]
    fn training_without_a_dataset_fails_with_the_path() {
        let out = tempfile::tempdir().unwrap();
        let missing = out.path().join("nowhere");
        let err = train(
            &ModelConfig::tiny(),
            &TrainConfig::default(),
            false,
            false,
            &missing,
            out.path(),
        )
        .err()
        .unwrap();
        assert!(err.to_string().contains("nowhere"));
    }

    #[test]
    fn adam_keeps_params_f32_representable() {
        use crate::tensor::{backward, ops, Tape};
        let mut store = ParamStore::new();
        let id = store.add("x", &[3], vec![0.5, 0.25, -0.75]);
        let mut opt = Adam::new(&store);
        let tape = Tape::new();
        let x = store.get(id);
        let loss = ops::sum(&tape, &ops::mul(&tape, &x, &x).unwrap()).unwrap();
        backward(&tape, &loss).unwrap();
        opt.step(&store, 0.013);
        for &v in store.get(id).data() {
            assert_eq!(v, v as f32 as f64);
        }
    }
}
