use super::*;
use std::path::PathBuf;

fn mse(a: &Frame, b: &Frame) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64
}

fn clip_mse(clean: &[Frame], degraded: &[Frame]) -> f64 {
    clean
        .iter()
        .zip(degraded)
        .map(|(c, d)| mse(c, d))
        .sum::<f64>()
        / clean.len() as f64
}

fn psnr(m: f64) -> f64 {
    if m <= 0.0 {
        99.0
    } else {
        -10.0 * m.log10()
    }
}

#[test]
fn render_is_deterministic_and_moves() {
    let a = render_clean_clip(77, 5, 24, 32).unwrap();
    let b = render_clean_clip(77, 5, 24, 32).unwrap();
    for (fa, fb) in a.frames.iter().zip(&b.frames) {
        assert_eq!(fa.data, fb.data);
    }
    for (da, db) in a.depths.iter().zip(&b.depths) {
        assert_eq!(da.data, db.data);
    }
    // camera motion: consecutive frames differ
    for t in 1..a.frames.len() {
        let diff: f64 = a.frames[t]
            .data
            .iter()
            .zip(&a.frames[t - 1].data)
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / a.frames[t].data.len() as f64;
        assert!(diff > 1e-4, "frames {t} and {} identical", t - 1);
    }
    for d in &a.depths {
        assert!(d.data.iter().all(|&v| v > 0.0 && v <= 1.0));
    }
    for f in &a.frames {
        assert!(f.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn haze_zero_beta_is_identity() {
    let clip = render_clean_clip(5, 3, 16, 16).unwrap();
    let p = HazeParams {
        beta: 0.0,
        airlight: [0.8, 0.8, 0.8],
    };
    let out = apply_haze(&clip.frames[0], &clip.depths[0], &p);
    assert_eq!(out.data, clip.frames[0].data);
}

#[test]
fn haze_saturates_to_airlight() {
    let clip = render_clean_clip(5, 3, 16, 16).unwrap();
    let p = HazeParams {
        beta: 500.0,
        airlight: [0.8, 0.75, 0.7],
    };
    let out = apply_haze(&clip.frames[0], &clip.depths[0], &p);
    for px in 0..16 * 16 {
        for ch in 0..3 {
            assert!((out.data[px * 3 + ch] - p.airlight[ch]).abs() < 1e-6);
        }
    }
}

#[test]
fn haze_closed_form_half() {
    // beta*depth = ln 2, A = 1, J = 0  =>  I = 0.5
    let frame = Frame::filled(4, 4, 0.0);
    let depth = DepthMap {
        h: 4,
        w: 4,
        data: vec![1.0; 16],
    };
    let p = HazeParams {
        beta: 2f64.ln(),
        airlight: [1.0, 1.0, 1.0],
    };
    let out = apply_haze(&frame, &depth, &p);
    for &v in &out.data {
        assert!((v - 0.5).abs() < 1e-12);
    }
}

#[test]
fn rain_zero_density_is_identity_and_field_is_coherent() {
    let frame = Frame::filled(32, 32, 0.5);
    let mut p = DegradationRecipe::defaults(FLAG_RAIN)
        .unwrap()
        .rain
        .unwrap();
    p.density = 0.0;
    let out = apply_rain(&frame, 0, &p, 9);
    assert_eq!(out.data, frame.data);

    p.density = 2.0;
    let a = apply_rain(&frame, 3, &p, 9);
    let b = apply_rain(&frame, 3, &p, 9);
    assert_eq!(a.data, b.data);
    let c = apply_rain(&frame, 4, &p, 9);
    assert_ne!(a.data, c.data); // streaks advect between frames
}

#[test]
fn rain_brightens_a_mid_gray_frame() {
    let frame = Frame::filled(48, 48, 0.5);
    let p = DegradationRecipe::defaults(FLAG_RAIN).unwrap().rain.unwrap();
    for t in 0..4 {
        let out = apply_rain(&frame, t, &p, 31);
        assert!(out.mean() > frame.mean(), "no streaks landed at t={t}");
    }
}

#[test]
fn snow_zero_density_is_identity_and_deterministic() {
    let frame = Frame::filled(32, 32, 0.3);
    let mut p = DegradationRecipe::defaults(FLAG_SNOW)
        .unwrap()
        .snow
        .unwrap();
    p.density = 0.0;
    assert_eq!(apply_snow(&frame, 0, &p, 4).data, frame.data);

    p.density = 5.0;
    let a = apply_snow(&frame, 2, &p, 4);
    let b = apply_snow(&frame, 2, &p, 4);
    assert_eq!(a.data, b.data);
    assert!(a.mean() > frame.mean());
}

#[test]
fn night_identity_and_closed_form() {
    let clip = render_clean_clip(6, 3, 16, 16).unwrap();
    let identity = NightParams {
        gamma: 1.0,
        scale: 1.0,
        noise_sigma: 0.0,
    };
    let out = apply_night(&clip.frames[0], 0, &identity, 12);
    assert_eq!(out.data, clip.frames[0].data);

    let p = NightParams {
        gamma: 2.0,
        scale: 0.5,
        noise_sigma: 0.0,
    };
    let ones = Frame::filled(4, 4, 1.0);
    let out = apply_night(&ones, 0, &p, 12);
    for &v in &out.data {
        assert!((v - 0.5).abs() < 1e-12);
    }

    let noisy = NightParams {
        gamma: 1.2,
        scale: 0.8,
        noise_sigma: 0.05,
    };
    let a = apply_night(&clip.frames[0], 1, &noisy, 12);
    let b = apply_night(&clip.frames[0], 1, &noisy, 12);
    assert_eq!(a.data, b.data);
}

#[test]
fn degrade_identity_night_recipe_returns_clean() {
    let clip = render_clean_clip(8, 4, 16, 16).unwrap();
    let recipe = DegradationRecipe {
        haze: None,
        rain: None,
        snow: None,
        night: Some(NightParams {
            gamma: 1.0,
            scale: 1.0,
            noise_sigma: 0.0,
        }),
    };
    let degraded = degrade(&clip, &recipe, 1);
    for (d, c) in degraded.iter().zip(&clip.frames) {
        assert_eq!(d.data, c.data);
    }
}

#[test]
fn quadruple_recipe_touches_most_pixels() {
    let clip = render_clean_clip(13, 4, 48, 48).unwrap();
    let recipe = DegradationRecipe::defaults(15).unwrap();
    let degraded = degrade(&clip, &recipe, 13);
    let mut changed = 0usize;
    let mut total = 0usize;
    for (d, c) in degraded.iter().zip(&clip.frames) {
        for px in 0..48 * 48 {
            total += 1;
            let delta: f64 = (0..3)
                .map(|ch| (d.data[px * 3 + ch] - c.data[px * 3 + ch]).abs())
                .sum();
            if delta > 1e-3 {
                changed += 1;
            }
        }
    }
    assert!(
        changed as f64 > 0.5 * total as f64,
        "only {changed}/{total} pixels changed"
    );
}

#[test]
fn every_extra_factor_lowers_psnr() {
    // strict monotonicity over all 32 edges of the condition lattice
    for seed in [21u64, 77, 130] {
        let clip = render_clean_clip(seed, 4, 48, 48).unwrap();
        let score = |id: u8| {
            let recipe = DegradationRecipe::defaults(id).unwrap();
            let degraded = degrade(&clip, &recipe, seed);
            psnr(clip_mse(&clip.frames, &degraded))
        };
        let scores: Vec<f64> = (1..=15u8).map(score).collect();
        for id in 1..=15u8 {
            for flag in [FLAG_HAZE, FLAG_RAIN, FLAG_SNOW, FLAG_NIGHT] {
                if id & flag != 0 {
                    continue;
                }
                let bigger = id | flag;
                assert!(
                    scores[(bigger - 1) as usize] < scores[(id - 1) as usize],
                    "seed {}: psnr({}) = {:.2} !< psnr({}) = {:.2}",
                    seed,
                    condition_name(bigger),
                    scores[(bigger - 1) as usize],
                    condition_name(id),
                    scores[(id - 1) as usize],
                );
            }
        }
    }
}

#[test]
fn non_identity_recipes_stay_below_35db() {
    let clip = render_clean_clip(34, 4, 48, 48).unwrap();
    for id in 1..=15u8 {
        let recipe = DegradationRecipe::defaults(id).unwrap();
        let degraded = degrade(&clip, &recipe, 34);
        let p = psnr(clip_mse(&clip.frames, &degraded));
        assert!(p < 35.0, "{} too mild: {:.2} dB", condition_name(id), p);
    }
}

#[test]
fn condition_ids_cover_all_nonempty_subsets() {
    let ids = all_condition_ids();
    assert_eq!(ids.len(), 15);
    for &id in &ids {
        let name = condition_name(id);
        assert_eq!(condition_id_from_name(&name).unwrap(), id);
    }
    assert!(condition_id_from_name("fog").is_err());
}

#[test]
fn dataset_split_counts_match_the_80_20_rule() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        conditions: vec!["all".into()],
        clips_per_condition: 4,
        frames: 3,
        height: 8,
        width: 8,
        master_seed: 3,
    };
    let summary = make_dataset(&cfg, dir.path(), false).unwrap();
    assert_eq!(summary.train_clips, 48);
    assert_eq!(summary.test_clips, 12);

    // refuse to clobber without force
    assert!(make_dataset(&cfg, dir.path(), false).is_err());
    assert!(make_dataset(&cfg, dir.path(), true).is_ok());
}

#[test]
fn dataset_regeneration_is_byte_identical() {
    let cfg = DatasetConfig {
        conditions: vec!["rain".into(), "haze".into()],
        clips_per_condition: 2,
        frames: 3,
        height: 12,
        width: 12,
        master_seed: 9,
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    make_dataset(&cfg, dir_a.path(), false).unwrap();
    make_dataset(&cfg, dir_b.path(), false).unwrap();

    let mut files_a = collect_files(dir_a.path());
    let mut files_b = collect_files(dir_b.path());
    files_a.sort();
    files_b.sort();
    assert!(!files_a.is_empty());
    assert_eq!(files_a.len(), files_b.len());
    for (a, b) in files_a.iter().zip(&files_b) {
        assert_eq!(
            a.strip_prefix(dir_a.path()).unwrap(),
            b.strip_prefix(dir_b.path()).unwrap()
        );
        assert_eq!(
            fs::read(a).unwrap(),
            fs::read(b).unwrap(),
            "{} differs between runs",
            a.display()
        );
    }
}

#[test]
fn degraded_frames_decode_to_gt_shape() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        conditions: vec!["snow+night".into()],
        clips_per_condition: 2,
        frames: 3,
        height: 16,
        width: 20,
        master_seed: 11,
    };
    make_dataset(&cfg, dir.path(), false).unwrap();
    let clip_dir = dir
        .path()
        .join("train")
        .join("cond_12")
        .join("clip_000");
    for t in 0..3 {
        let gt = read_png(&clip_dir.join("gt").join(format!("frame_{t:04}.png"))).unwrap();
        let degraded = read_png(&clip_dir.join("in").join(format!("frame_{t:04}.png"))).unwrap();
        assert_eq!((gt.h, gt.w), (16, 20));
        assert_eq!((degraded.h, degraded.w), (16, 20));
    }
    let recipe_text = fs::read_to_string(clip_dir.join("recipe.json")).unwrap();
    assert!(recipe_text.contains("snow+night"));
}

fn collect_files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out
}
