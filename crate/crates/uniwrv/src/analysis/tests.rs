use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::weathergen::{make_dataset, DatasetConfig};

fn rand_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[h, w, 3], |_| rng.gen_range(0.0..1.0))
}

/// Independent PSNR route: accumulate squared error in plain loops.
fn psnr_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let mut se = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        se += (x - y).powi(2);
    }
    let mse = se / a.numel() as f64;
    if mse == 0.0 {
        99.0
    } else {
        (-10.0 * mse.log10()).min(99.0)
    }
}

/// Independent SSIM route: direct windowed double loop with a 2-D kernel.
fn ssim_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let (h, w) = (a.shape()[0], a.shape()[1]);
    let lum = |t: &Tensor, px: usize| {
        let d = &t.data()[px * 3..px * 3 + 3];
        0.299 * d[0] + 0.587 * d[1] + 0.114 * d[2]
    };
    // 2-D kernel built directly
    let mut k2 = [[0.0f64; 11]; 11];
    let mut sum = 0.0;
    for r in 0..11 {
        for c in 0..11 {
            let (dr, dc) = (r as f64 - 5.0, c as f64 - 5.0);
            k2[r][c] = (-(dr * dr + dc * dc) / (2.0 * 1.5 * 1.5)).exp();
            sum += k2[r][c];
        }
    }
    for row in k2.iter_mut() {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..h - 10 {
        for c0 in 0..w - 10 {
            let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in 0..11 {
                for c in 0..11 {
                    let px = (r0 + r) * w + (c0 + c);
                    let (xa, xb) = (lum(a, px), lum(b, px));
                    let wt = k2[r][c];
                    ma += wt * xa;
                    mb += wt * xb;
                    maa += wt * xa * xa;
                    mbb += wt * xb * xb;
                    mab += wt * xa * xb;
                }
            }
            let va = maa - ma * ma;
            let vb = mbb - mb * mb;
            let cov = mab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn psnr_spec_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_image(&mut rng, 12, 12);
    assert_eq!(psnr(&a, &a).unwrap(), 99.0);

    // uniform offset of 0.1 => mse 0.01 => 20 dB
    let b = Tensor::new(a.shape(), a.data().iter().map(|v| v * 0.0 + 0.1).collect());
    let zeros = Tensor::zeros(a.shape());
    assert!((psnr(&b, &zeros).unwrap() - 20.0).abs() < 1e-10);

    let ones = Tensor::ones(a.shape());
    assert!((psnr(&zeros, &ones).unwrap() - 0.0).abs() < 1e-12);
}

#[test]
fn ssim_spec_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_image(&mut rng, 16, 16);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);

    let inverted = Tensor::new(a.shape(), a.data().iter().map(|v| 1.0 - v).collect());
    assert!(ssim(&a, &inverted).unwrap() < 0.3);

    let b = rand_image(&mut rng, 16, 16);
    let fwd = ssim(&a, &b).unwrap();
    let rev = ssim(&b, &a).unwrap();
    assert!((fwd - rev).abs() < 1e-10);
}

#[test]
fn metrics_match_brute_force_on_seeded_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let a = rand_image(&mut rng, 14, 17);
        let b = rand_image(&mut rng, 14, 17);
        assert!((psnr(&a, &b).unwrap() - psnr_oracle(&a, &b)).abs() < 1e-8);
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-8);
    }
}

#[test]
fn single_conv_complexity_closed_form() {
    // k=3, Cin=Cout=4, P=3
    let grid = (16, 16);
    let (p_static, m_static) = conv_complexity(Scheme::Static, 3, 4, 4, 3, grid);
    assert_eq!(p_static, 144);
    let (p_vanilla, m_vanilla) = conv_complexity(Scheme::VanillaRouting, 3, 4, 4, 3, grid);
    assert_eq!(p_vanilla, 432);
    let (p_param, m_param) = conv_complexity(Scheme::ParameterRouting, 3, 4, 4, 3, grid);
    assert_eq!(p_param, 432);
    let (p_mod, m_mod) = conv_complexity(Scheme::ModifyWeight, 3, 4, 4, 3, grid);
    assert_eq!(p_mod, 144 + 3 * (3 + 3 + 4 + 4));
    assert_eq!(m_vanilla, 3 * m_static);
    // the modify-weight scheme spends the same spatial conv cost as static
    assert_eq!(m_mod - 4 * 144, m_static);
    assert_eq!(m_param - 3 * 144, m_static);
}

#[test]
fn model_complexity_satisfies_overhead_identity() {
    let cfg = ModelConfig::desk();
    let rows: Vec<ComplexityRow> = Scheme::ALL
        .iter()
        .map(|&s| count_complexity(&cfg, (64, 64), s).unwrap())
        .collect();
    let by = |name: &str| rows.iter().find(|r| r.scheme == name).unwrap().clone();
    let stat = by("static");
    let vanilla = by("vanilla_routing");
    let param = by("parameter_routing");
    let modify = by("modify_weight");

    let expected_overhead: u64 = routed_conv_shapes(&cfg)
        .iter()
        .map(|&(k, cin, cout)| (cfg.paths * (2 * k + cin + cout)) as u64)
        .sum();
    assert_eq!(modify.params - stat.params, expected_overhead);
    assert_eq!(vanilla.params, param.params);
    assert_eq!(vanilla.params, cfg.paths as u64 * stat.params);
    assert!(modify.params < vanilla.params / 2);

    let ratio = vanilla.macs as f64 / param.macs as f64;
    let p = cfg.paths as f64;
    assert!(ratio >= 0.9 * p && ratio <= 1.1 * p, "ratio {ratio}");

    // vanilla/static macs ratio is exactly P
    assert_eq!(vanilla.macs, cfg.paths as u64 * stat.macs);
}

#[test]
fn purity_baseline_matches_uniform_chance() {
    // Monte-Carlo of the statistic itself under uniform index draws
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for entries in [8usize, 20] {
        let chance = (3.0 / entries as f64).min(1.0);
        let mut total = 0.0;
        let runs = 200;
        for _ in 0..runs {
            let draws: Vec<usize> = (0..100).map(|_| rng.gen_range(0..entries)).collect();
            total += purity(&draws, entries, 3);
        }
        let mean = total / runs as f64;
        assert!(
            (mean - chance).abs() < 0.12,
            "P_n={entries}: purity {mean:.3} vs chance {chance:.3}"
        );
    }
    // degenerate sample: everything on one index
    assert_eq!(purity(&[2; 50], 8, 3), 1.0);
}

#[test]
fn specialization_report_covers_every_condition() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        conditions: vec!["rain".into(), "haze".into()],
        clips_per_condition: 5,
        frames: 4,
        height: 16,
        width: 16,
        master_seed: 6,
    };
    make_dataset(&cfg, dir.path(), false).unwrap();

    let mut store = ParamStore::new();
    let model = UniWrv::new(&mut store, ModelConfig::tiny()).unwrap();
    let report = specialization_report(&model, &store, dir.path(), 2).unwrap();
    assert_eq!(report.conditions.len(), 2);
    for c in &report.conditions {
        assert_eq!(c.samples, 2);
        for alpha in &c.mean_alphas {
            let s: f64 = alpha.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!(c.purity_top3 > 0.0);
    }
    assert_eq!(
        report.bank_histograms.len(),
        ModelConfig::tiny().total_wpgm_layers()
    );

    let out = dir.path().join("csvs");
    write_specialization_csvs(&report, &out).unwrap();
    for name in ["routing.csv", "priors.csv", "mean_routing.csv", "purity.csv"] {
        assert!(out.join(name).exists(), "{name} missing");
    }
    let routing = std::fs::read_to_string(out.join("routing.csv")).unwrap();
    assert!(routing.starts_with("sample,condition,layer,alpha_0,alpha_1"));
}

#[test]
fn identity_model_evaluates_restored_equal_to_degraded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        conditions: vec!["haze".into()],
        clips_per_condition: 5,
        frames: 3,
        height: 16,
        width: 16,
        master_seed: 8,
    };
    make_dataset(&cfg, dir.path(), false).unwrap();
    let mut store = ParamStore::new();
    let model = UniWrv::new(&mut store, ModelConfig::tiny()).unwrap();
    let report = evaluate(&model, &store, dir.path(), None).unwrap();
    assert!((report.mean_psnr_restored - report.mean_psnr_degraded).abs() < 1e-6);
    assert!(report.total_triplets >= 1);
}
