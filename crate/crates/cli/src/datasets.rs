//! Dataset loading and the bundled synthetic generators.
//!
//! Two desk-scale stand-ins: a 10-class shape image set (32x32 grayscale,
//! jittered position/size/intensity plus light background noise) and a
//! 5-class moving-shapes video set whose label is the motion pattern
//! (right, left, up, down, static). Both are pure functions of
//! (seed, index), so datasets never need to be shipped.

use std::path::Path;

use rf_core::io::{load_idx_dataset, read_rftn, write_rftn};
use rf_core::rng::Rng;
use rf_core::tensor::Tensor;
use rf_core::{Error, Result};

use crate::config::RunConfig;

/// Image classes, by index: disk, ring, square, square outline, plus,
/// x-cross, horizontal bars, vertical bars, triangle, diamond.
pub const IMAGE_CLASSES: usize = 10;
/// Video classes, by index: right, left, up, down, static.
pub const VIDEO_CLASSES: usize = 5;

#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub samples: Vec<(Tensor<f32>, u32)>,
    pub classes: usize,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.samples[0].0.shape()
    }

    pub fn is_video(&self) -> bool {
        self.sample_shape().len() == 4
    }
}

fn draw_shape(img: &mut [f32], size: usize, class: u32, cx: f64, cy: f64, r: f64, fg: f32) {
    let mut put = |y: i64, x: i64| {
        if y >= 0 && x >= 0 && (y as usize) < size && (x as usize) < size {
            img[y as usize * size + x as usize] = fg;
        }
    };
    let (icx, icy) = (cx.round() as i64, cy.round() as i64);
    let ir = r.round() as i64;
    match class {
        0 => {
            // filled disk
            for y in -ir..=ir {
                for x in -ir..=ir {
                    if y * y + x * x <= ir * ir {
                        put(icy + y, icx + x);
                    }
                }
            }
        }
        1 => {
            // ring
            let inner = (ir - 3).max(1);
            for y in -ir..=ir {
                for x in -ir..=ir {
                    let d2 = y * y + x * x;
                    if d2 <= ir * ir && d2 >= inner * inner {
                        put(icy + y, icx + x);
                    }
                }
            }
        }
        2 => {
            // filled square
            for y in -ir..=ir {
                for x in -ir..=ir {
                    put(icy + y, icx + x);
                }
            }
        }
        3 => {
            // square outline, 2 px thick
            for y in -ir..=ir {
                for x in -ir..=ir {
                    if y.abs() >= ir - 1 || x.abs() >= ir - 1 {
                        put(icy + y, icx + x);
                    }
                }
            }
        }
        4 => {
            // plus
            for y in -ir..=ir {
                for x in -1..=1i64 {
                    put(icy + y, icx + x);
                    put(icy + x, icx + y);
                }
            }
        }
        5 => {
            // x cross
            for d in -ir..=ir {
                for w in -1..=1i64 {
                    put(icy + d, icx + d + w);
                    put(icy + d, icx - d + w);
                }
            }
        }
        6 => {
            // horizontal bars (4 px pitch)
            for y in -ir..=ir {
                if y.rem_euclid(4) < 2 {
                    for x in -ir..=ir {
                        put(icy + y, icx + x);
                    }
                }
            }
        }
        7 => {
            // vertical bars
            for x in -ir..=ir {
                if x.rem_euclid(4) < 2 {
                    for y in -ir..=ir {
                        put(icy + y, icx + x);
                    }
                }
            }
        }
        8 => {
            // filled triangle pointing up
            for y in -ir..=ir {
                let half = (y + ir) / 2;
                for x in -half..=half {
                    put(icy + y, icx + x);
                }
            }
        }
        _ => {
            // diamond
            for y in -ir..=ir {
                for x in -ir..=ir {
                    if y.abs() + x.abs() <= ir {
                        put(icy + y, icx + x);
                    }
                }
            }
        }
    }
}

/// One synthetic image, deterministic in (seed, index).
pub fn synth_image(seed: u64, index: u64, size: usize, classes: usize) -> (Tensor<f32>, u32) {
    let mut rng = Rng::from_label(seed, &format!("synth-image/{index}"));
    let class = (index % classes as u64) as u32;
    let bg = rng.uniform(0.0, 0.12) as f32;
    let fg = rng.uniform(0.7, 1.0) as f32;
    let r = rng.uniform(6.0, 9.0);
    let margin = r + 2.0;
    let cx = rng.uniform(margin, size as f64 - margin);
    let cy = rng.uniform(margin, size as f64 - margin);
    let mut img = vec![bg; size * size];
    draw_shape(&mut img, size, class, cx, cy, r, fg);
    let noisy: Vec<f32> = img
        .iter()
        .map(|&v| (v + rng.uniform(0.0, 0.05) as f32).clamp(0.0, 1.0))
        .collect();
    (
        Tensor::from_vec(&[1, size, size], noisy).expect("image shape"),
        class,
    )
}

pub fn synth_image_set(seed: u64, count: usize, size: usize, classes: usize) -> LabeledSet {
    LabeledSet {
        samples: (0..count as u64)
            .map(|i| synth_image(seed, i, size, classes))
            .collect(),
        classes,
    }
}

/// One synthetic moving-shapes clip, deterministic in (seed, index). The
/// label is the motion pattern; shape and start point vary freely.
pub fn synth_video(
    seed: u64,
    index: u64,
    size: usize,
    frames: usize,
    classes: usize,
) -> (Tensor<f32>, u32) {
    let mut rng = Rng::from_label(seed, &format!("synth-video/{index}"));
    let class = (index % classes as u64) as u32;
    let (vx, vy): (f64, f64) = match class {
        0 => (2.0, 0.0),
        1 => (-2.0, 0.0),
        2 => (0.0, -2.0),
        3 => (0.0, 2.0),
        _ => (0.0, 0.0),
    };
    let bg = rng.uniform(0.0, 0.10) as f32;
    let fg = rng.uniform(0.7, 1.0) as f32;
    let r = rng.uniform(3.0, 5.0);
    let travel = (frames - 1) as f64;
    let margin = r + 2.0;
    let lo_x = margin + (-vx * travel).max(0.0);
    let hi_x = size as f64 - margin - (vx * travel).max(0.0);
    let lo_y = margin + (-vy * travel).max(0.0);
    let hi_y = size as f64 - margin - (vy * travel).max(0.0);
    let sx = rng.uniform(lo_x, hi_x.max(lo_x + 1e-9));
    let sy = rng.uniform(lo_y, hi_y.max(lo_y + 1e-9));
    let round_shape = rng.next_f64() < 0.5;
    let mut data = vec![bg; frames * size * size];
    for t in 0..frames {
        let cx = sx + vx * t as f64;
        let cy = sy + vy * t as f64;
        let frame = &mut data[t * size * size..(t + 1) * size * size];
        let shape_class = if round_shape { 0 } else { 2 };
        draw_shape(frame, size, shape_class, cx, cy, r, fg);
    }
    let noisy: Vec<f32> = data
        .iter()
        .map(|&v| (v + rng.uniform(0.0, 0.05) as f32).clamp(0.0, 1.0))
        .collect();
    (
        Tensor::from_vec(&[1, frames, size, size], noisy).expect("clip shape"),
        class,
    )
}

pub fn synth_video_set(
    seed: u64,
    count: usize,
    size: usize,
    frames: usize,
    classes: usize,
) -> LabeledSet {
    LabeledSet {
        samples: (0..count as u64)
            .map(|i| synth_video(seed, i, size, frames, classes))
            .collect(),
        classes,
    }
}

/// Saves a video set as a directory of RFTN clips plus `labels.tsv`
/// (`relative-path<TAB>label` lines).
pub fn save_video_dir(dir: &Path, set: &LabeledSet) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut labels = String::new();
    for (i, (clip, label)) in set.samples.iter().enumerate() {
        let name = format!("clip_{i:05}.rftn");
        write_rftn(&dir.join(&name), clip)?;
        labels.push_str(&format!("{name}\t{label}\n"));
    }
    std::fs::write(dir.join("labels.tsv"), labels)?;
    Ok(())
}

/// Loads a video directory written by [`save_video_dir`]; all clips must
/// share one shape.
pub fn load_video_dir(dir: &Path) -> Result<LabeledSet> {
    let labels_path = dir.join("labels.tsv");
    let text = std::fs::read_to_string(&labels_path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", labels_path.display())))?;
    let mut samples = Vec::new();
    let mut max_label = 0u32;
    let mut shape: Option<Vec<usize>> = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (name, label) = line.split_once('\t').ok_or_else(|| {
            Error::data(format!("labels.tsv:{}: expected `path<TAB>label`", lineno + 1))
        })?;
        let label: u32 = label
            .trim()
            .parse()
            .map_err(|_| Error::data(format!("labels.tsv:{}: bad label", lineno + 1)))?;
        let clip = read_rftn(&dir.join(name.trim()))?.into_f32();
        match &shape {
            None => shape = Some(clip.shape().to_vec()),
            Some(s) => {
                if clip.shape() != &s[..] {
                    return Err(Error::data(format!(
                        "clip {name} shape {:?} differs from dataset shape {s:?}",
                        clip.shape()
                    )));
                }
            }
        }
        max_label = max_label.max(label);
        samples.push((clip, label));
    }
    if samples.is_empty() {
        return Err(Error::data("video directory contains no clips"));
    }
    Ok(LabeledSet {
        samples,
        classes: (max_label + 1) as usize,
    })
}

/// Which split a command needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetRole {
    Train,
    Test,
}

/// Resolves the `data.*` keys of a config into one split. Synthetic splits
/// draw from disjoint index ranges of the same seeded stream.
pub fn load_set(cfg: &RunConfig, role: SetRole) -> Result<LabeledSet> {
    let kind = cfg.get_str("data.kind", "synthetic-images");
    let seed = cfg.get_u64("data.seed", 1)?;
    let test = role == SetRole::Test;
    match kind.as_str() {
        "synthetic-images" => {
            let count = if test {
                cfg.get_usize("data.test_count", 256)?
            } else {
                cfg.get_usize("data.count", 1024)?
            };
            let size = cfg.get_usize("data.size", 32)?;
            let classes = cfg.get_usize("data.classes", IMAGE_CLASSES)?;
            let offset = if test { 1_000_000 } else { 0 };
            Ok(LabeledSet {
                samples: (0..count as u64)
                    .map(|i| synth_image(seed, offset + i, size, classes))
                    .collect(),
                classes,
            })
        }
        "synthetic-video" => {
            let count = if test {
                cfg.get_usize("data.test_count", 128)?
            } else {
                cfg.get_usize("data.count", 512)?
            };
            let size = cfg.get_usize("data.size", 32)?;
            let frames = cfg.get_usize("data.frames", 8)?;
            let classes = cfg.get_usize("data.classes", VIDEO_CLASSES)?;
            let offset = if test { 1_000_000 } else { 0 };
            Ok(LabeledSet {
                samples: (0..count as u64)
                    .map(|i| synth_video(seed, offset + i, size, frames, classes))
                    .collect(),
                classes,
            })
        }
        "idx-images" => {
            let (ikey, lkey) = if test {
                ("data.test_images", "data.test_labels")
            } else {
                ("data.images", "data.labels")
            };
            let (imgs, lbls) = load_idx_dataset(&cfg.get_path(ikey)?, &cfg.get_path(lkey)?)?;
            let classes = cfg.get_usize(
                "data.classes",
                lbls.iter().map(|&l| l as usize + 1).max().unwrap_or(2),
            )?;
            Ok(LabeledSet {
                samples: imgs
                    .into_iter()
                    .zip(lbls)
                    .map(|(t, l)| (t, l as u32))
                    .collect(),
                classes,
            })
        }
        "tensor-video-dir" => {
            let key = if test { "data.test_dir" } else { "data.dir" };
            let mut set = load_video_dir(&cfg.get_path(key)?)?;
            set.classes = cfg.get_usize("data.classes", set.classes)?;
            Ok(set)
        }
        other => Err(Error::config(format!("unknown data.kind `{other}`"))),
    }
}

/// Writes a synthetic image set as IDX files (images + labels).
pub fn save_idx(set: &LabeledSet, images: &Path, labels: &Path) -> Result<()> {
    let shape = set.sample_shape();
    let (rows, cols) = (shape[1], shape[2]);
    let mut pixels = Vec::with_capacity(set.len() * rows * cols);
    let mut lbls = Vec::with_capacity(set.len());
    for (img, label) in &set.samples {
        for &v in img.data() {
            pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        lbls.push(*label as u8);
    }
    rf_core::io::write_idx_images(images, &pixels, set.len(), rows, cols)?;
    rf_core::io::write_idx_labels(labels, &lbls)?;
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_images_are_deterministic_and_in_range() {
        let a = synth_image(7, 3, 32, 10);
        let b = synth_image(7, 3, 32, 10);
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, 3);
        for &v in a.0.data() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn synth_video_motion_matches_label() {
        // class 0 moves right: the intensity centroid x must increase
        let (clip, label) = synth_video(9, 0, 32, 8, 5);
        assert_eq!(label, 0);
        // bright sprite pixels only; the dim noisy background would dilute
        // a raw intensity centroid
        let centroid_x = |t: usize| -> f64 {
            let mut num = 0.0;
            let mut den = 0.0;
            for y in 0..32 {
                for x in 0..32 {
                    let v = clip.at(&[0, t, y, x]) as f64;
                    if v > 0.5 {
                        num += x as f64;
                        den += 1.0;
                    }
                }
            }
            num / den
        };
        assert!(centroid_x(7) > centroid_x(0) + 8.0);
    }

    #[test]
    fn video_dir_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let set = synth_video_set(5, 6, 16, 4, 5);
        save_video_dir(dir.path(), &set).unwrap();
        let back = load_video_dir(dir.path()).unwrap();
        assert_eq!(back.len(), 6);
        assert_eq!(back.sample_shape(), set.sample_shape());
        for ((a, la), (b, lb)) in back.samples.iter().zip(&set.samples) {
            assert_eq!(la, lb);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn idx_save_load_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let set = synth_image_set(3, 20, 16, 10);
        let imgs = dir.path().join("train.images.idx");
        let lbls = dir.path().join("train.labels.idx");
        save_idx(&set, &imgs, &lbls).unwrap();
        let (images, labels) = load_idx_dataset(&imgs, &lbls).unwrap();
        assert_eq!(images.len(), 20);
        assert_eq!(labels.len(), 20);
        assert_eq!(images[0].shape(), &[1, 16, 16]);
    }
}
