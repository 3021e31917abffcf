//! Procedural hybrid-weather clip generator. Renders temporally coherent
//! clean clips (camera-translated noise background plus textured shapes at
//! distinct depths) and composites any non-empty subset of
//! {haze, rain, snow, night} deterministically from a seed.
//!
//! Composition order per frame is fixed: night -> haze -> snow -> rain
//! (scene-level effects before airborne occluders).

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Flag bits of the condition id (1..=15).
pub const FLAG_HAZE: u8 = 1;
pub const FLAG_RAIN: u8 = 2;
pub const FLAG_SNOW: u8 = 4;
pub const FLAG_NIGHT: u8 = 8;

/// All 15 non-empty subsets of the four factors.
pub fn all_condition_ids() -> Vec<u8> {
    (1..=15).collect()
}

pub fn condition_name(id: u8) -> String {
    let mut parts = Vec::new();
    if id & FLAG_HAZE != 0 {
        parts.push("haze");
    }
    if id & FLAG_RAIN != 0 {
        parts.push("rain");
    }
    if id & FLAG_SNOW != 0 {
        parts.push("snow");
    }
    if id & FLAG_NIGHT != 0 {
        parts.push("night");
    }
    parts.join("+")
}

/// Parse "rain", "haze+night", ... back into a condition id.
pub fn condition_id_from_name(name: &str) -> Result<u8> {
    let mut id = 0u8;
    for part in name.split('+') {
        id |= match part.trim() {
            "haze" => FLAG_HAZE,
            "rain" => FLAG_RAIN,
            "snow" => FLAG_SNOW,
            "night" => FLAG_NIGHT,
            other => {
                return Err(Error::Config(format!(
                    "unknown weather factor `{other}` (expected haze/rain/snow/night)"
                )))
            }
        };
    }
    if id == 0 {
        return Err(Error::Config("empty condition".into()));
    }
    Ok(id)
}

/// Flat RGB frame with values in [0,1].
#[derive(Clone)]
pub struct Frame {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Frame {
    pub fn filled(h: usize, w: usize, value: f64) -> Frame {
        Frame {
            h,
            w,
            data: vec![value; h * w * 3],
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.h, self.w, 3], self.data.clone())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    fn clamp(&mut self) {
        for v in self.data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Per-pixel pseudo-depth in (0,1]; larger is farther.
#[derive(Clone)]
pub struct DepthMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HazeParams {
    /// Scattering coefficient per unit depth.
    pub beta: f64,
    pub airlight: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RainParams {
    /// Streaks per kilo-pixel.
    pub density: f64,
    /// Degrees off vertical.
    pub angle_deg: f64,
    /// Streak length in pixels.
    pub length: f64,
    /// Fall speed in pixels per frame.
    pub velocity: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SnowParams {
    /// Flakes per kilo-pixel.
    pub density: f64,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Downward drift in pixels per frame.
    pub drift: f64,
    pub flutter_amplitude: f64,
    pub flutter_frequency: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NightParams {
    /// Gamma >= 1 darkens midtones.
    pub gamma: f64,
    /// Global scale in (0,1].
    pub scale: f64,
    /// Sensor noise sigma.
    pub noise_sigma: f64,
}

/// Which effects run, with their parameters. The id is the flag bitmask.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DegradationRecipe {
    pub haze: Option<HazeParams>,
    pub rain: Option<RainParams>,
    pub snow: Option<SnowParams>,
    pub night: Option<NightParams>,
}

impl DegradationRecipe {
    pub fn condition_id(&self) -> u8 {
        let mut id = 0;
        if self.haze.is_some() {
            id |= FLAG_HAZE;
        }
        if self.rain.is_some() {
            id |= FLAG_RAIN;
        }
        if self.snow.is_some() {
            id |= FLAG_SNOW;
        }
        if self.night.is_some() {
            id |= FLAG_NIGHT;
        }
        id
    }

    /// Canonical mid-range parameters for a condition id.
    pub fn defaults(id: u8) -> Result<DegradationRecipe> {
        if id == 0 || id > 15 {
            return Err(Error::Config(format!("condition id {id} outside 1..=15")));
        }
        Ok(DegradationRecipe {
            haze: (id & FLAG_HAZE != 0).then(|| HazeParams {
                beta: 2.2,
                airlight: [0.70, 0.71, 0.72],
            }),
            rain: (id & FLAG_RAIN != 0).then(|| RainParams {
                density: 2.6,
                angle_deg: -15.0,
                length: 9.0,
                velocity: 2.5,
                intensity: 0.40,
            }),
            snow: (id & FLAG_SNOW != 0).then(|| SnowParams {
                density: 5.0,
                radius_min: 1.3,
                radius_max: 3.0,
                drift: 1.4,
                flutter_amplitude: 1.0,
                flutter_frequency: 0.8,
                alpha: 0.9,
            }),
            night: (id & FLAG_NIGHT != 0).then(|| NightParams {
                gamma: 1.08,
                scale: 0.93,
                noise_sigma: 0.030,
            }),
        })
    }

    /// Parameters jittered around the defaults; used per clip for variety.
    pub fn sampled(id: u8, rng: &mut ChaCha8Rng) -> Result<DegradationRecipe> {
        let mut recipe = DegradationRecipe::defaults(id)?;
        if let Some(h) = recipe.haze.as_mut() {
            h.beta = rng.gen_range(1.8..2.6);
            let base = rng.gen_range(0.70..0.73);
            h.airlight = [base, base + 0.01, base + 0.02];
        }
        if let Some(r) = recipe.rain.as_mut() {
            r.density = rng.gen_range(2.0..3.2);
            r.angle_deg = rng.gen_range(-28.0..28.0);
            r.length = rng.gen_range(7.0..12.0);
            r.velocity = rng.gen_range(1.5..3.5);
            r.intensity = rng.gen_range(0.32..0.48);
        }
        if let Some(s) = recipe.snow.as_mut() {
            s.density = rng.gen_range(4.0..6.0);
            s.radius_min = rng.gen_range(1.1..1.5);
            s.radius_max = s.radius_min + rng.gen_range(1.0..1.8);
            s.drift = rng.gen_range(0.9..2.0);
            s.flutter_amplitude = rng.gen_range(0.6..1.5);
            s.flutter_frequency = rng.gen_range(0.5..1.2);
            s.alpha = rng.gen_range(0.75..0.90);
        }
        if let Some(n) = recipe.night.as_mut() {
            n.gamma = rng.gen_range(1.05..1.12);
            n.scale = rng.gen_range(0.90..0.95);
            n.noise_sigma = rng.gen_range(0.020..0.040);
        }
        Ok(recipe)
    }
}

/// Clean frames plus their depth maps, all derived from one seed.
pub struct Clip {
    pub frames: Vec<Frame>,
    pub depths: Vec<DepthMap>,
    pub seed: u64,
}

fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    let mut x = a
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(b)
        .wrapping_mul(0xbf58476d1ce4e5b9)
        .wrapping_add(c);
    x ^= x >> 31;
    x = x.wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 29)
}

/// Smooth value noise in [0,1] on an (h, w) grid.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: usize) -> Vec<f64> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let fr = r as f64 / cell as f64;
            let fc = c as f64 / cell as f64;
            let (r0, c0) = (fr.floor() as usize, fc.floor() as usize);
            let (tr, tc) = (fr - r0 as f64, fc - c0 as f64);
            let g = |rr: usize, cc: usize| grid[rr * gw + cc];
            out[r * w + c] = g(r0, c0) * (1.0 - tr) * (1.0 - tc)
                + g(r0, c0 + 1) * (1.0 - tr) * tc
                + g(r0 + 1, c0) * tr * (1.0 - tc)
                + g(r0 + 1, c0 + 1) * tr * tc;
        }
    }
    out
}

struct WorldObject {
    center_r: f64,
    center_c: f64,
    size: f64,
    depth: f64,
    color: [f64; 3],
    is_disc: bool,
}

/// Bilinear sample with edge clamping (the world has margin to spare).
fn sample_world(world: &[f64], wh: usize, ww: usize, chans: usize, r: f64, c: f64, ch: usize) -> f64 {
    let r = r.clamp(0.0, (wh - 1) as f64);
    let c = c.clamp(0.0, (ww - 1) as f64);
    let (r0, c0) = (r.floor() as usize, c.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(wh - 1), (c0 + 1).min(ww - 1));
    let (tr, tc) = (r - r0 as f64, c - c0 as f64);
    let g = |rr: usize, cc: usize| world[(rr * ww + cc) * chans + ch];
    g(r0, c0) * (1.0 - tr) * (1.0 - tc)
        + g(r0, c1) * (1.0 - tr) * tc
        + g(r1, c0) * tr * (1.0 - tc)
        + g(r1, c1) * tr * tc
}

/// Procedural clean clip: layered noise background, 3-8 textured shapes at
/// distinct depths, global camera translation of 0.5-2 px per frame.
pub fn render_clean_clip(seed: u64, t: usize, h: usize, w: usize) -> Result<Clip> {
    if t < 3 {
        return Err(Error::Config(format!("clips need at least 3 frames, got {t}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5ce9e, 0));
    let speed = rng.gen_range(0.5..2.0);
    let dir = rng.gen_range(0.0..std::f64::consts::TAU);
    let (vr, vc) = (speed * dir.sin(), speed * dir.cos());

    let margin = (speed * t as f64).ceil() as usize + 4;
    let (wh, ww) = (h + 2 * margin, w + 2 * margin);

    // bright, well-illuminated base scene
    let coarse = value_noise(&mut rng, wh, ww, 12);
    let fine = value_noise(&mut rng, wh, ww, 4);
    let tint: [f64; 3] = [
        rng.gen_range(0.92..1.0),
        rng.gen_range(0.92..1.0),
        rng.gen_range(0.92..1.0),
    ];
    let mut world = vec![0.0; wh * ww * 3];
    let mut depth_world = vec![0.95; wh * ww];
    for px in 0..wh * ww {
        let base = 0.62 + 0.30 * coarse[px] + 0.08 * fine[px];
        for ch in 0..3 {
            world[px * 3 + ch] = (base * tint[ch]).clamp(0.0, 1.0);
        }
    }

    // shapes, far to near so nearer ones overdraw
    let n_objects = rng.gen_range(3..=8);
    let mut objects: Vec<WorldObject> = (0..n_objects)
        .map(|_| WorldObject {
            center_r: rng.gen_range(0.0..wh as f64),
            center_c: rng.gen_range(0.0..ww as f64),
            size: rng.gen_range(5.0..14.0),
            depth: rng.gen_range(0.15..0.85),
            color: [
                rng.gen_range(0.55..1.0),
                rng.gen_range(0.55..1.0),
                rng.gen_range(0.55..1.0),
            ],
            is_disc: rng.gen_bool(0.5),
        })
        .collect();
    objects.sort_by(|a, b| b.depth.partial_cmp(&a.depth).unwrap());
    let texture = value_noise(&mut rng, wh, ww, 3);
    for obj in &objects {
        let half = obj.size / 2.0;
        let r_lo = (obj.center_r - half).floor().max(0.0) as usize;
        let r_hi = ((obj.center_r + half).ceil() as usize).min(wh - 1);
        let c_lo = (obj.center_c - half).floor().max(0.0) as usize;
        let c_hi = ((obj.center_c + half).ceil() as usize).min(ww - 1);
        for r in r_lo..=r_hi {
            for c in c_lo..=c_hi {
                let dr = r as f64 - obj.center_r;
                let dc = c as f64 - obj.center_c;
                let inside = if obj.is_disc {
                    dr * dr + dc * dc <= half * half
                } else {
                    dr.abs() <= half && dc.abs() <= half
                };
                if inside {
                    let px = r * ww + c;
                    let tex = 0.85 + 0.3 * (texture[px] - 0.5);
                    for ch in 0..3 {
                        world[px * 3 + ch] = (obj.color[ch] * tex).clamp(0.0, 1.0);
                    }
                    depth_world[px] = obj.depth;
                }
            }
        }
    }

    let mut frames = Vec::with_capacity(t);
    let mut depths = Vec::with_capacity(t);
    for ti in 0..t {
        let (or, oc) = (
            margin as f64 + vr * ti as f64,
            margin as f64 + vc * ti as f64,
        );
        let mut frame = Frame::filled(h, w, 0.0);
        let mut depth = DepthMap {
            h,
            w,
            data: vec![0.0; h * w],
        };
        for r in 0..h {
            for c in 0..w {
                let (wr, wc) = (or + r as f64, oc + c as f64);
                for ch in 0..3 {
                    frame.data[(r * w + c) * 3 + ch] =
                        sample_world(&world, wh, ww, 3, wr, wc, ch);
                }
                depth.data[r * w + c] =
                    sample_world(&depth_world, wh, ww, 1, wr, wc, 0).max(0.05);
            }
        }
        frame.clamp();
        frames.push(frame);
        depths.push(depth);
    }
    Ok(Clip {
        frames,
        depths,
        seed,
    })
}

/// `I = J * t + A * (1 - t)`, `t = exp(-beta * depth)`.
pub fn apply_haze(frame: &Frame, depth: &DepthMap, p: &HazeParams) -> Frame {
    let mut out = frame.clone();
    for px in 0..frame.h * frame.w {
        let t = (-p.beta * depth.data[px]).exp();
        for ch in 0..3 {
            let v = frame.data[px * 3 + ch];
            out.data[px * 3 + ch] = v * t + p.airlight[ch] * (1.0 - t);
        }
    }
    out.clamp();
    out
}

/// Additive bright streaks advected along the fall direction; the streak
/// field is a pure function of (seed, frame index).
pub fn apply_rain(frame: &Frame, t_index: usize, p: &RainParams, seed: u64) -> Frame {
    let mut out = frame.clone();
    let (h, w) = (frame.h, frame.w);
    let count = (p.density * (h * w) as f64 / 1000.0).round() as usize;
    let theta = p.angle_deg.to_radians();
    let (dr, dc) = (theta.cos(), theta.sin());
    let ext = p.length + 4.0;
    let (box_h, box_w) = (h as f64 + 2.0 * ext, w as f64 + 2.0 * ext);
    for streak in 0..count {
        let mut srng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x4a11, streak as u64));
        let base_r = srng.gen_range(0.0..box_h);
        let base_c = srng.gen_range(0.0..box_w);
        let intensity = p.intensity * srng.gen_range(0.7..1.0);
        let travel = p.velocity * t_index as f64;
        let cr = (base_r + dr * travel).rem_euclid(box_h) - ext;
        let cc = (base_c + dc * travel).rem_euclid(box_w) - ext;
        // splat the segment with bilinear footprints
        let steps = (p.length / 0.5).ceil() as usize;
        for s in 0..=steps {
            let f = s as f64 / steps as f64 - 0.5;
            let r = cr + dr * p.length * f;
            let c = cc + dc * p.length * f;
            let (r0, c0) = (r.floor() as isize, c.floor() as isize);
            let (tr, tc) = (r - r0 as f64, c - c0 as f64);
            for (rr, cc2, wt) in [
                (r0, c0, (1.0 - tr) * (1.0 - tc)),
                (r0, c0 + 1, (1.0 - tr) * tc),
                (r0 + 1, c0, tr * (1.0 - tc)),
                (r0 + 1, c0 + 1, tr * tc),
            ] {
                if rr < 0 || cc2 < 0 || rr >= h as isize || cc2 >= w as isize {
                    continue;
                }
                let px = rr as usize * w + cc2 as usize;
                for ch in 0..3 {
                    out.data[px * 3 + ch] += 0.5 * intensity * wt;
                }
            }
        }
    }
    out.clamp();
    out
}

/// Alpha-blended soft white discs drifting down with sinusoidal flutter.
pub fn apply_snow(frame: &Frame, t_index: usize, p: &SnowParams, seed: u64) -> Frame {
    let mut out = frame.clone();
    let (h, w) = (frame.h, frame.w);
    let count = (p.density * (h * w) as f64 / 1000.0).round() as usize;
    let ext = p.radius_max + 2.0;
    let (box_h, box_w) = (h as f64 + 2.0 * ext, w as f64 + 2.0 * ext);
    for flake in 0..count {
        let mut frng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5703, flake as u64));
        let base_r = frng.gen_range(0.0..box_h);
        let base_c = frng.gen_range(0.0..box_w);
        let radius = frng.gen_range(p.radius_min..p.radius_max);
        let phase = frng.gen_range(0.0..std::f64::consts::TAU);
        let side_drift = frng.gen_range(-0.3..0.3);
        let tf = t_index as f64;
        let r = (base_r + p.drift * tf).rem_euclid(box_h) - ext;
        let c = (base_c
            + side_drift * tf
            + p.flutter_amplitude * (p.flutter_frequency * tf + phase).sin())
        .rem_euclid(box_w)
            - ext;
        // compact profile with a thin skirt: a wide soft rim would act as a
        // brightness restorer on dimmed bases instead of an occluder
        let reach = radius.ceil() as isize;
        let (rc, cc) = (r.round() as isize, c.round() as isize);
        for rr in rc - reach..=rc + reach {
            for cc2 in cc - reach..=cc + reach {
                if rr < 0 || cc2 < 0 || rr >= h as isize || cc2 >= w as isize {
                    continue;
                }
                let d2 = (rr as f64 - r).powi(2) + (cc2 as f64 - c).powi(2);
                let x = d2 / (radius * radius);
                if x >= 1.0 {
                    continue;
                }
                let a = p.alpha * (1.0 - x * x);
                let px = rr as usize * w + cc2 as usize;
                for ch in 0..3 {
                    let v = out.data[px * 3 + ch];
                    out.data[px * 3 + ch] = v * (1.0 - a) + a;
                }
            }
        }
    }
    out.clamp();
    out
}

/// `I = clamp(scale * J^gamma + N(0, sigma))` with a seeded noise field.
pub fn apply_night(frame: &Frame, t_index: usize, p: &NightParams, seed: u64) -> Frame {
    let mut out = frame.clone();
    let mut nrng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x0197, t_index as u64));
    let mut gauss = || -> f64 {
        // Box-Muller
        let u1: f64 = nrng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = nrng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    };
    for v in out.data.iter_mut() {
        let noise = if p.noise_sigma > 0.0 {
            p.noise_sigma * gauss()
        } else {
            0.0
        };
        let dimmed = if p.gamma == 1.0 { *v } else { v.powf(p.gamma) };
        *v = (p.scale * dimmed + noise).clamp(0.0, 1.0);
    }
    out
}

/// All active effects in the fixed order night -> haze -> snow -> rain.
pub fn degrade(clip: &Clip, recipe: &DegradationRecipe, seed: u64) -> Vec<Frame> {
    clip.frames
        .iter()
        .zip(&clip.depths)
        .enumerate()
        .map(|(t, (frame, depth))| {
            let mut f = frame.clone();
            if let Some(p) = &recipe.night {
                f = apply_night(&f, t, p, mix_seed(seed, 1, 0));
            }
            if let Some(p) = &recipe.haze {
                f = apply_haze(&f, depth, p);
            }
            if let Some(p) = &recipe.snow {
                f = apply_snow(&f, t, p, mix_seed(seed, 2, 0));
            }
            if let Some(p) = &recipe.rain {
                f = apply_rain(&f, t, p, mix_seed(seed, 3, 0));
            }
            f
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Condition names ("rain", "haze+night", ...) or "all".
    pub conditions: Vec<String>,
    pub clips_per_condition: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub master_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            conditions: vec!["all".into()],
            clips_per_condition: 4,
            frames: 8,
            height: 48,
            width: 48,
            master_seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn condition_ids(&self) -> Result<Vec<u8>> {
        if self.conditions.iter().any(|c| c == "all") {
            return Ok(all_condition_ids());
        }
        let mut ids: Vec<u8> = self
            .conditions
            .iter()
            .map(|c| condition_id_from_name(c))
            .collect::<Result<_>>()?;
        ids.sort_unstable();
        ids.dedup();
        if ids.is_empty() {
            return Err(Error::Config("no conditions requested".into()));
        }
        Ok(ids)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RecipeFile {
    condition_id: u8,
    condition: String,
    seed: u64,
    recipe: DegradationRecipe,
}

#[derive(Debug)]
pub struct DatasetSummary {
    pub train_clips: usize,
    pub test_clips: usize,
}

pub fn write_png(path: &Path, frame: &Frame) -> Result<()> {
    let mut img = image::RgbImage::new(frame.w as u32, frame.h as u32);
    for r in 0..frame.h {
        for c in 0..frame.w {
            let px = r * frame.w + c;
            let to_u8 = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
            img.put_pixel(
                c as u32,
                r as u32,
                image::Rgb([
                    to_u8(frame.data[px * 3]),
                    to_u8(frame.data[px * 3 + 1]),
                    to_u8(frame.data[px * 3 + 2]),
                ]),
            );
        }
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

pub fn read_png(path: &Path) -> Result<Frame> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut frame = Frame::filled(h, w, 0.0);
    for r in 0..h {
        for c in 0..w {
            let px = img.get_pixel(c as u32, r as u32);
            for ch in 0..3 {
                frame.data[(r * w + c) * 3 + ch] = px.0[ch] as f64 / 255.0;
            }
        }
    }
    Ok(frame)
}

/// Generate the paired dataset: `train/` and `test/` split 80/20 over the
/// clip enumeration (clip-index major, condition minor), each clip holding
/// `gt/` and `in/` frames plus its recipe.
pub fn make_dataset(cfg: &DatasetConfig, out_dir: &Path, force: bool) -> Result<DatasetSummary> {
    if cfg.frames < 3 {
        return Err(Error::Config("clips need at least 3 frames".into()));
    }
    if cfg.height % 4 != 0 || cfg.width % 4 != 0 {
        return Err(Error::Config(
            "frame dimensions must be divisible by 4".into(),
        ));
    }
    let ids = cfg.condition_ids()?;
    if out_dir.exists() {
        let non_empty = fs::read_dir(out_dir)
            .map_err(|e| Error::io(out_dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "{} is not empty (pass force to overwrite)",
                out_dir.display()
            )));
        }
        if non_empty {
            fs::remove_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        }
    }

    let total = ids.len() * cfg.clips_per_condition;
    let train_count = (0.8 * total as f64).floor() as usize;
    let mut summary = DatasetSummary {
        train_clips: 0,
        test_clips: 0,
    };
    for clip_index in 0..cfg.clips_per_condition {
        for (pos, &cond) in ids.iter().enumerate() {
            let global = clip_index * ids.len() + pos;
            let split = if global < train_count { "train" } else { "test" };
            let clip_seed = mix_seed(cfg.master_seed, cond as u64, clip_index as u64);
            let clip = render_clean_clip(clip_seed, cfg.frames, cfg.height, cfg.width)?;
            let mut recipe_rng = ChaCha8Rng::seed_from_u64(mix_seed(clip_seed, 0x7ec1fe, 0));
            let recipe = DegradationRecipe::sampled(cond, &mut recipe_rng)?;
            let degraded = degrade(&clip, &recipe, mix_seed(clip_seed, 0xde64ade, 0));

            let clip_dir = out_dir
                .join(split)
                .join(format!("cond_{cond:02}"))
                .join(format!("clip_{clip_index:03}"));
            let gt_dir = clip_dir.join("gt");
            let in_dir = clip_dir.join("in");
            fs::create_dir_all(&gt_dir).map_err(|e| Error::io(&gt_dir, e))?;
            fs::create_dir_all(&in_dir).map_err(|e| Error::io(&in_dir, e))?;
            for (t, (g, d)) in clip.frames.iter().zip(&degraded).enumerate() {
                write_png(&gt_dir.join(format!("frame_{t:04}.png")), g)?;
                write_png(&in_dir.join(format!("frame_{t:04}.png")), d)?;
            }
            let recipe_file = RecipeFile {
                condition_id: cond,
                condition: condition_name(cond),
                seed: clip_seed,
                recipe,
            };
            let recipe_path = clip_dir.join("recipe.json");
            let text = serde_json::to_string_pretty(&recipe_file)
                .map_err(|e| Error::Config(format!("recipe serialize: {e}")))?;
            fs::write(&recipe_path, text).map_err(|e| Error::io(&recipe_path, e))?;
            match split {
                "train" => summary.train_clips += 1,
                _ => summary.test_clips += 1,
            }
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests;
