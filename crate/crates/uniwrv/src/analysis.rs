//! Metrics, complexity accounting across the four aggregation schemes, and
//! prior/routing specialization statistics over a dataset.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::checkpoint;
use crate::data::index_split;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, UniWrv};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::weathergen::{condition_name, Frame};

/// Peak signal-to-noise ratio against peak 1.0, capped at 99 dB.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "psnr",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(99.0);
    }
    Ok((-10.0 * mse.log10()).min(99.0))
}

const SSIM_TAPS: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_TAPS] {
    let mut k = [0.0; SSIM_TAPS];
    let mid = (SSIM_TAPS / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// ITU-R 601 luminance of an `[H,W,3]` tensor.
fn luminance(t: &Tensor) -> (Vec<f64>, usize, usize) {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let mut y = vec![0.0; h * w];
    for px in 0..h * w {
        let d = &t.data()[px * 3..px * 3 + 3];
        y[px] = 0.299 * d[0] + 0.587 * d[1] + 0.114 * d[2];
    }
    (y, h, w)
}

/// Separable valid-region Gaussian filtering.
fn filter_valid(x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let k = gaussian_kernel();
    let wo = w - SSIM_TAPS + 1;
    let mut rows = vec![0.0; h * wo];
    for r in 0..h {
        for c in 0..wo {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * x[r * w + c + i];
            }
            rows[r * wo + c] = acc;
        }
    }
    let ho = h - SSIM_TAPS + 1;
    let mut out = vec![0.0; ho * wo];
    for r in 0..ho {
        for c in 0..wo {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * rows[(r + i) * wo + c];
            }
            out[r * wo + c] = acc;
        }
    }
    (out, ho, wo)
}

/// Structural similarity on the luminance channel: 11-tap Gaussian window
/// (sigma 1.5), K1 = 0.01, K2 = 0.03, mean over the valid map.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "ssim",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let (ya, h, w) = luminance(a);
    let (yb, _, _) = luminance(b);
    if h < SSIM_TAPS || w < SSIM_TAPS {
        return Err(Error::Config(format!(
            "ssim needs frames of at least {SSIM_TAPS}x{SSIM_TAPS}, got {h}x{w}"
        )));
    }
    let sq = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x * x).collect() };
    let prod: Vec<f64> = ya.iter().zip(&yb).map(|(x, y)| x * y).collect();
    let (mu_a, ho, wo) = filter_valid(&ya, h, w);
    let (mu_b, _, _) = filter_valid(&yb, h, w);
    let (m_aa, _, _) = filter_valid(&sq(&ya), h, w);
    let (m_bb, _, _) = filter_valid(&sq(&yb), h, w);
    let (m_ab, _, _) = filter_valid(&prod, h, w);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for i in 0..ho * wo {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = m_aa[i] - ma * ma;
        let vb = m_bb[i] - mb * mb;
        let cov = m_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / (ho * wo) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Static,
    VanillaRouting,
    ParameterRouting,
    ModifyWeight,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [
        Scheme::Static,
        Scheme::VanillaRouting,
        Scheme::ParameterRouting,
        Scheme::ModifyWeight,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Static => "static",
            Scheme::VanillaRouting => "vanilla_routing",
            Scheme::ParameterRouting => "parameter_routing",
            Scheme::ModifyWeight => "modify_weight",
        }
    }
}

/// Exact analytic counts (kernel values and multiply-accumulates) for one
/// forward pass at a stated input size. Biases are excluded.
#[derive(Debug, Clone)]
pub struct ComplexityRow {
    pub scheme: &'static str,
    pub params: u64,
    pub macs: u64,
}

/// Kernel dimensions of the routed aggregation convolutions: attention,
/// offset, value, and output projections per routing layer.
pub fn routed_conv_shapes(cfg: &ModelConfig) -> Vec<(usize, usize, usize)> {
    let c = cfg.dra_channels();
    let slots = cfg.heads * crate::dra::WINDOW * cfg.sample_points;
    let mut shapes = Vec::new();
    for _ in 0..cfg.routing_layers {
        shapes.push((3, 3 * c, slots));
        shapes.push((3, 3 * c, 2 * slots));
        shapes.push((3, 3 * c, c * crate::dra::WINDOW));
        shapes.push((3, c, c));
    }
    shapes
}

/// Counts for a single convolution under one aggregation scheme at the
/// given feature-grid size.
pub fn conv_complexity(
    scheme: Scheme,
    k: usize,
    cin: usize,
    cout: usize,
    paths: usize,
    grid: (usize, usize),
) -> (u64, u64) {
    let kernel = (k * k * cin * cout) as u64;
    let conv_macs = (grid.0 * grid.1) as u64 * kernel;
    let p = paths as u64;
    match scheme {
        Scheme::Static => (kernel, conv_macs),
        Scheme::VanillaRouting => (p * kernel, p * conv_macs),
        Scheme::ParameterRouting => (p * kernel, conv_macs + p * kernel),
        Scheme::ModifyWeight => (
            kernel + p * (2 * k + cin + cout) as u64,
            conv_macs + (p + 1) * kernel,
        ),
    }
}

/// Aggregate counts over every routed convolution of the configured model
/// at a stated input size (the convolutions run on the 1/4 grid).
pub fn count_complexity(
    cfg: &ModelConfig,
    input: (usize, usize),
    scheme: Scheme,
) -> Result<ComplexityRow> {
    if input.0 % 4 != 0 || input.1 % 4 != 0 {
        return Err(Error::Config(format!(
            "input {}x{} not divisible by 4",
            input.0, input.1
        )));
    }
    let grid = (input.0 / 4, input.1 / 4);
    let mut params = 0u64;
    let mut macs = 0u64;
    for (k, cin, cout) in routed_conv_shapes(cfg) {
        let (p, m) = conv_complexity(scheme, k, cin, cout, cfg.paths, grid);
        params += p;
        macs += m;
    }
    Ok(ComplexityRow {
        scheme: scheme.name(),
        params,
        macs,
    })
}

pub fn write_complexity_csv(path: &Path, rows: &[ComplexityRow]) -> Result<()> {
    let mut out = String::from("scheme,params,macs\n");
    for row in rows {
        out.push_str(&format!("{},{},{}\n", row.scheme, row.params, row.macs));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Top-k purity of an index sample: the fraction of draws landing in the k
/// most frequent indices (ties broken toward lower indices).
pub fn purity(indices: &[usize], entries: usize, top_k: usize) -> f64 {
    if indices.is_empty() {
        return 0.0;
    }
    let mut counts = vec![0u64; entries];
    for &i in indices {
        counts[i] += 1;
    }
    let mut order: Vec<usize> = (0..entries).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(counts[i]), i));
    let top: u64 = order.iter().take(top_k).map(|&i| counts[i]).sum();
    top as f64 / indices.len() as f64
}

#[derive(Debug, Clone)]
pub struct SampleTrace {
    pub sample: usize,
    pub condition: u8,
    pub alphas: Vec<Vec<f64>>,
    pub deepest_index: usize,
}

#[derive(Debug, Clone)]
pub struct ConditionStats {
    pub condition: u8,
    pub samples: usize,
    /// Mean routing vector per routing layer.
    pub mean_alphas: Vec<Vec<f64>>,
    /// Histogram of the deepest extraction layer's prior index.
    pub deepest_counts: Vec<u64>,
    pub purity_top3: f64,
}

#[derive(Debug)]
pub struct SpecializationReport {
    pub conditions: Vec<ConditionStats>,
    pub traces: Vec<SampleTrace>,
    /// Usage histogram per prior bank (extraction layers then decoder).
    pub bank_histograms: Vec<(usize, Vec<u64>)>,
}

/// Frozen-model inference over the test split, aggregating routing traces
/// and prior-index statistics per condition.
pub fn specialization_report(
    model: &UniWrv,
    store: &ParamStore,
    data_dir: &Path,
    samples_per_condition: usize,
) -> Result<SpecializationReport> {
    let index = index_split(data_dir, "test")?;
    for bank in model.banks() {
        bank.reset_usage();
    }
    let mut by_condition: BTreeMap<u8, Vec<&crate::data::ClipEntry>> = BTreeMap::new();
    for clip in &index.clips {
        by_condition.entry(clip.condition).or_default().push(clip);
    }
    let deepest_layer = model.config.extraction_layers() - 1;
    let entries = model.config.prior_entries;
    let mut traces = Vec::new();
    let mut conditions = Vec::new();
    let mut sample_id = 0usize;
    for (&condition, clips) in &by_condition {
        let mut alpha_sums: Vec<Vec<f64>> =
            vec![vec![0.0; model.config.paths]; model.config.routing_layers];
        let mut deepest_indices = Vec::new();
        let mut taken = 0usize;
        'outer: for clip in clips {
            for center in clip.centers() {
                if taken >= samples_per_condition {
                    break 'outer;
                }
                let tri = clip.triplet(center)?;
                let (_, trace) = model.restore(store, &tri.degraded, None)?;
                let deepest_index = trace.prior_indices[deepest_layer];
                for (layer, alpha) in trace.alphas.iter().enumerate() {
                    for (p, v) in alpha.iter().enumerate() {
                        alpha_sums[layer][p] += v;
                    }
                }
                deepest_indices.push(deepest_index);
                traces.push(SampleTrace {
                    sample: sample_id,
                    condition,
                    alphas: trace.alphas,
                    deepest_index,
                });
                sample_id += 1;
                taken += 1;
            }
        }
        if taken == 0 {
            continue;
        }
        let mean_alphas = alpha_sums
            .into_iter()
            .map(|layer| layer.into_iter().map(|v| v / taken as f64).collect())
            .collect();
        let mut deepest_counts = vec![0u64; entries];
        for &i in &deepest_indices {
            deepest_counts[i] += 1;
        }
        conditions.push(ConditionStats {
            condition,
            samples: taken,
            mean_alphas,
            deepest_counts,
            purity_top3: purity(&deepest_indices, entries, 3),
        });
    }
    let bank_histograms = model
        .banks()
        .iter()
        .map(|b| (b.layer, b.usage()))
        .collect();
    Ok(SpecializationReport {
        conditions,
        traces,
        bank_histograms,
    })
}

pub fn write_specialization_csvs(report: &SpecializationReport, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let routing = out_dir.join("routing.csv");
    let mut f = fs::File::create(&routing).map_err(|e| Error::io(&routing, e))?;
    let paths = report
        .traces
        .first()
        .map(|t| t.alphas[0].len())
        .unwrap_or(0);
    let alpha_header: Vec<String> = (0..paths).map(|p| format!("alpha_{p}")).collect();
    writeln!(f, "sample,condition,layer,{}", alpha_header.join(","))
        .map_err(|e| Error::io(&routing, e))?;
    for t in &report.traces {
        for (layer, alpha) in t.alphas.iter().enumerate() {
            let vals: Vec<String> = alpha.iter().map(|v| format!("{v:.8}")).collect();
            writeln!(
                f,
                "{},{},{},{}",
                t.sample,
                condition_name(t.condition),
                layer,
                vals.join(",")
            )
            .map_err(|e| Error::io(&routing, e))?;
        }
    }

    let priors = out_dir.join("priors.csv");
    let mut f = fs::File::create(&priors).map_err(|e| Error::io(&priors, e))?;
    writeln!(f, "layer,index,count").map_err(|e| Error::io(&priors, e))?;
    for (layer, counts) in &report.bank_histograms {
        for (index, count) in counts.iter().enumerate() {
            writeln!(f, "{layer},{index},{count}").map_err(|e| Error::io(&priors, e))?;
        }
    }

    let mean_routing = out_dir.join("mean_routing.csv");
    let mut f = fs::File::create(&mean_routing).map_err(|e| Error::io(&mean_routing, e))?;
    writeln!(f, "condition,layer,{}", alpha_header.join(","))
        .map_err(|e| Error::io(&mean_routing, e))?;
    for c in &report.conditions {
        for (layer, alpha) in c.mean_alphas.iter().enumerate() {
            let vals: Vec<String> = alpha.iter().map(|v| format!("{v:.8}")).collect();
            writeln!(
                f,
                "{},{},{}",
                condition_name(c.condition),
                layer,
                vals.join(",")
            )
            .map_err(|e| Error::io(&mean_routing, e))?;
        }
    }

    let purity_csv = out_dir.join("purity.csv");
    let mut f = fs::File::create(&purity_csv).map_err(|e| Error::io(&purity_csv, e))?;
    writeln!(f, "condition,samples,purity_top3").map_err(|e| Error::io(&purity_csv, e))?;
    for c in &report.conditions {
        writeln!(
            f,
            "{},{},{:.6}",
            condition_name(c.condition),
            c.samples,
            c.purity_top3
        )
        .map_err(|e| Error::io(&purity_csv, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub condition: u8,
    pub clip: usize,
    pub triplets: usize,
    pub psnr_restored: f64,
    pub ssim_restored: f64,
    pub psnr_degraded: f64,
    pub ssim_degraded: f64,
}

#[derive(Debug)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_psnr_restored: f64,
    pub mean_ssim_restored: f64,
    pub mean_psnr_degraded: f64,
    pub mean_ssim_degraded: f64,
    pub total_triplets: usize,
}

fn tensor_to_frame(t: &Tensor) -> Frame {
    Frame {
        h: t.shape()[0],
        w: t.shape()[1],
        data: t.data().to_vec(),
    }
}

/// Frozen-model evaluation over the test split: per-clip PSNR/SSIM of the
/// restored and degraded center frames, plus restored frames as images when
/// a report directory is given.
pub fn evaluate(
    model: &UniWrv,
    store: &ParamStore,
    data_dir: &Path,
    report_dir: Option<&Path>,
) -> Result<EvalReport> {
    let index = index_split(data_dir, "test")?;
    let mut rows = Vec::new();
    let mut sums = [0.0f64; 4];
    let mut total_triplets = 0usize;
    for clip in &index.clips {
        let mut acc = [0.0f64; 4];
        let mut n = 0usize;
        for center in clip.centers() {
            let tri = clip.triplet(center)?;
            let (restored, _) = model.restore(store, &tri.degraded, None)?;
            acc[0] += psnr(&restored, &tri.clean[1])?;
            acc[1] += ssim(&restored, &tri.clean[1])?;
            acc[2] += psnr(&tri.degraded[1], &tri.clean[1])?;
            acc[3] += ssim(&tri.degraded[1], &tri.clean[1])?;
            n += 1;
            if let Some(dir) = report_dir {
                let frame_dir = dir
                    .join("frames")
                    .join(format!("cond_{:02}", clip.condition))
                    .join(format!("clip_{:03}", clip.clip_index));
                fs::create_dir_all(&frame_dir).map_err(|e| Error::io(&frame_dir, e))?;
                let path = frame_dir.join(format!("frame_{center:04}.png"));
                crate::weathergen::write_png(&path, &tensor_to_frame(&restored))?;
            }
        }
        for i in 0..4 {
            sums[i] += acc[i] / n as f64;
        }
        total_triplets += n;
        rows.push(EvalRow {
            condition: clip.condition,
            clip: clip.clip_index,
            triplets: n,
            psnr_restored: acc[0] / n as f64,
            ssim_restored: acc[1] / n as f64,
            psnr_degraded: acc[2] / n as f64,
            ssim_degraded: acc[3] / n as f64,
        });
    }
    let n_clips = rows.len() as f64;
    let report = EvalReport {
        rows,
        mean_psnr_restored: sums[0] / n_clips,
        mean_ssim_restored: sums[1] / n_clips,
        mean_psnr_degraded: sums[2] / n_clips,
        mean_ssim_degraded: sums[3] / n_clips,
        total_triplets,
    };
    if let Some(dir) = report_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.csv");
        let mut out = String::from(
            "condition,clip,triplets,psnr,ssim,psnr_degraded,ssim_degraded\n",
        );
        for r in &report.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
                condition_name(r.condition),
                r.clip,
                r.triplets,
                r.psnr_restored,
                r.ssim_restored,
                r.psnr_degraded,
                r.ssim_degraded
            ));
        }
        out.push_str(&format!(
            "mean,,{},{:.6},{:.6},{:.6},{:.6}\n",
            report.total_triplets,
            report.mean_psnr_restored,
            report.mean_ssim_restored,
            report.mean_psnr_degraded,
            report.mean_ssim_degraded
        ));
        fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}

/// Convenience wrapper: load a checkpoint and evaluate it.
pub fn evaluate_checkpoint(
    ckpt: &Path,
    data_dir: &Path,
    report_dir: Option<&Path>,
) -> Result<EvalReport> {
    let loaded = checkpoint::load(ckpt)?;
    evaluate(&loaded.model, &loaded.store, data_dir, report_dir)
}

#[cfg(test)]
mod tests;
