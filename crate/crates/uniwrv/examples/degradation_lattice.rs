//! Prints PSNR for all 15 weather conditions at default parameters on a
//! seeded clip, flagging any lattice edge where adding a factor fails to
//! lower PSNR.
//!
//! Run: cargo run --release --example degradation_lattice

use uniwrv::weathergen::{
    condition_name, degrade, render_clean_clip, DegradationRecipe, Frame, FLAG_HAZE, FLAG_NIGHT,
    FLAG_RAIN, FLAG_SNOW,
};

fn mse(a: &Frame, b: &Frame) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64
}

fn main() {
    for seed in [21u64, 77, 130] {
        println!("== seed {seed}");
        let clip = render_clean_clip(seed, 4, 48, 48).unwrap();
        let mut scores = vec![0.0; 16];
        for id in 1..=15u8 {
            let recipe = DegradationRecipe::defaults(id).unwrap();
            let degraded = degrade(&clip, &recipe, seed);
            let m: f64 = clip
                .frames
                .iter()
                .zip(&degraded)
                .map(|(c, d)| mse(c, d))
                .sum::<f64>()
                / clip.frames.len() as f64;
            scores[id as usize] = -10.0 * m.log10();
            println!("  {:22} {:6.2} dB", condition_name(id), scores[id as usize]);
        }
        for id in 1..=15u8 {
            for flag in [FLAG_HAZE, FLAG_RAIN, FLAG_SNOW, FLAG_NIGHT] {
                if id & flag != 0 {
                    continue;
                }
                let bigger = id | flag;
                let (a, b) = (scores[bigger as usize], scores[id as usize]);
                if a >= b {
                    println!(
                        "  EDGE VIOLATION {} ({:.2}) !< {} ({:.2})",
                        condition_name(bigger),
                        a,
                        condition_name(id),
                        b
                    );
                }
            }
        }
    }
}
