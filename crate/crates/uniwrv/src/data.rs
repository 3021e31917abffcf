//! On-disk dataset access: indexing the generated clip tree and loading
//! frame triplets as tensors, with the crop/flip/rotate augmentations used
//! during training.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::weathergen::read_png;

#[derive(Debug, Clone)]
pub struct ClipEntry {
    pub condition: u8,
    pub clip_index: usize,
    pub dir: PathBuf,
    pub frame_count: usize,
}

#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub clips: Vec<ClipEntry>,
}

pub struct Triplet {
    pub degraded: [Tensor; 3],
    pub clean: [Tensor; 3],
    pub condition: u8,
}

fn sorted_dirs(path: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Index one split (`train` or `test`) of a generated dataset.
pub fn index_split(root: &Path, split: &str) -> Result<DatasetIndex> {
    let split_dir = root.join(split);
    if !split_dir.is_dir() {
        return Err(Error::Dataset(format!(
            "missing split directory {}",
            split_dir.display()
        )));
    }
    let mut clips = Vec::new();
    for cond_dir in sorted_dirs(&split_dir)? {
        let name = cond_dir.file_name().unwrap().to_string_lossy().to_string();
        let condition: u8 = name
            .strip_prefix("cond_")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Dataset(format!("unexpected directory {name}")))?;
        for clip_dir in sorted_dirs(&cond_dir)? {
            let clip_name = clip_dir.file_name().unwrap().to_string_lossy().to_string();
            let clip_index: usize = clip_name
                .strip_prefix("clip_")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Dataset(format!("unexpected directory {clip_name}")))?;
            let in_dir = clip_dir.join("in");
            let frame_count = fs::read_dir(&in_dir)
                .map_err(|e| Error::io(&in_dir, e))?
                .filter(|e| {
                    e.as_ref()
                        .map(|e| e.path().extension().is_some_and(|x| x == "png"))
                        .unwrap_or(false)
                })
                .count();
            if frame_count < 3 {
                return Err(Error::Dataset(format!(
                    "{} has {frame_count} frames, need at least 3",
                    clip_dir.display()
                )));
            }
            clips.push(ClipEntry {
                condition,
                clip_index,
                dir: clip_dir,
                frame_count,
            });
        }
    }
    if clips.is_empty() {
        return Err(Error::Dataset(format!(
            "no clips under {}",
            split_dir.display()
        )));
    }
    Ok(DatasetIndex { clips })
}

pub fn load_frame(path: &Path) -> Result<Tensor> {
    Ok(read_png(path)?.to_tensor())
}

impl ClipEntry {
    /// Centers that admit a full triplet.
    pub fn centers(&self) -> std::ops::Range<usize> {
        1..self.frame_count - 1
    }

    pub fn frame_path(&self, kind: &str, t: usize) -> PathBuf {
        self.dir.join(kind).join(format!("frame_{t:04}.png"))
    }

    pub fn triplet(&self, center: usize) -> Result<Triplet> {
        if center == 0 || center + 1 >= self.frame_count {
            return Err(Error::Dataset(format!(
                "center {center} out of range for {} frames",
                self.frame_count
            )));
        }
        let load3 = |kind: &str| -> Result<[Tensor; 3]> {
            Ok([
                load_frame(&self.frame_path(kind, center - 1))?,
                load_frame(&self.frame_path(kind, center))?,
                load_frame(&self.frame_path(kind, center + 1))?,
            ])
        };
        Ok(Triplet {
            degraded: load3("in")?,
            clean: load3("gt")?,
            condition: self.condition,
        })
    }
}

/// Axis-aligned crop of an `[H,W,3]` tensor.
pub fn crop(t: &Tensor, r0: usize, c0: usize, size: usize) -> Tensor {
    let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    assert!(r0 + size <= h && c0 + size <= w, "crop outside frame");
    let mut data = Vec::with_capacity(size * size * c);
    for r in r0..r0 + size {
        let row = &t.data()[((r * w) + c0) * c..((r * w) + c0 + size) * c];
        data.extend_from_slice(row);
    }
    Tensor::new(&[size, size, c], data)
}

/// The eight dihedral transforms of a square frame (code 0..8: bit 2 =
/// horizontal flip, bits 0-1 = quarter turns).
pub fn dihedral(t: &Tensor, code: u8) -> Tensor {
    let mut out = t.clone();
    if code & 4 != 0 {
        out = flip_horizontal(&out);
    }
    for _ in 0..(code & 3) {
        out = rot90(&out);
    }
    out
}

pub fn flip_horizontal(t: &Tensor) -> Tensor {
    let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut data = vec![0.0; h * w * c];
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                data[(r * w + col) * c + ch] = t.data()[(r * w + (w - 1 - col)) * c + ch];
            }
        }
    }
    Tensor::new(t.shape(), data)
}

/// Quarter turn counter-clockwise (square frames only).
pub fn rot90(t: &Tensor) -> Tensor {
    let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    assert_eq!(h, w, "rotation expects square frames");
    let mut data = vec![0.0; h * w * c];
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                data[((w - 1 - col) * w + r) * c + ch] = t.data()[(r * w + col) * c + ch];
            }
        }
    }
    Tensor::new(t.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weathergen::{make_dataset, DatasetConfig};

    #[test]
    fn crop_and_dihedral_are_consistent() {
        let t = Tensor::from_fn(&[4, 4, 3], |i| i as f64);
        let c = crop(&t, 1, 2, 2);
        assert_eq!(c.shape(), &[2, 2, 3]);
        assert_eq!(c.data()[0], t.data()[(1 * 4 + 2) * 3]);

        // four quarter turns come back to the start
        let mut r = t.clone();
        for _ in 0..4 {
            r = rot90(&r);
        }
        assert_eq!(r.data(), t.data());
        let f = flip_horizontal(&flip_horizontal(&t));
        assert_eq!(f.data(), t.data());

        // all eight transforms are distinct on an asymmetric frame
        let mut seen: Vec<Vec<f64>> = Vec::new();
        for code in 0..8 {
            let d = dihedral(&t, code).data().to_vec();
            assert!(!seen.contains(&d), "transform {code} duplicates another");
            seen.push(d);
        }
    }

    #[test]
    fn index_and_triplets_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            conditions: vec!["rain".into(), "haze".into()],
            clips_per_condition: 5,
            frames: 4,
            height: 8,
            width: 8,
            master_seed: 2,
        };
        make_dataset(&cfg, dir.path(), false).unwrap();
        let train = index_split(dir.path(), "train").unwrap();
        let test = index_split(dir.path(), "test").unwrap();
        assert_eq!(train.clips.len(), 8);
        assert_eq!(test.clips.len(), 2);
        let tri = train.clips[0].triplet(1).unwrap();
        assert_eq!(tri.degraded[0].shape(), &[8, 8, 3]);
        assert_eq!(tri.clean[2].shape(), &[8, 8, 3]);
        assert!(train.clips[0].triplet(3).is_err());
        assert!(index_split(dir.path(), "nope").is_err());
    }
}
