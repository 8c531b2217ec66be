//! Deterministic corruption generators and perturbation sequences.
//!
//! Sixteen corruption kinds across five families (noise, blur, digital,
//! temporal, camera motion), each at five severities. All parameters come
//! from the pinned tables below; outputs stay in [0, 1] and are a pure
//! function of (input, kind, severity, seed). Temporal kinds require video
//! input (C, T, H, W); the rest accept images (C, H, W) too and apply per
//! frame on video.

use crate::rng::Rng;
use crate::tensor::{elem, Element, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CorruptionKind {
    Gaussian,
    Shot,
    Impulse,
    Speckle,
    DefocusBlur,
    MotionBlur,
    Contrast,
    Brightness,
    Pixelate,
    Quantize,
    PacketLoss,
    Rain,
    Jumble,
    BoxJumble,
    StaticRotate,
    Translate,
}

pub const ALL_KINDS: [CorruptionKind; 16] = [
    CorruptionKind::Gaussian,
    CorruptionKind::Shot,
    CorruptionKind::Impulse,
    CorruptionKind::Speckle,
    CorruptionKind::DefocusBlur,
    CorruptionKind::MotionBlur,
    CorruptionKind::Contrast,
    CorruptionKind::Brightness,
    CorruptionKind::Pixelate,
    CorruptionKind::Quantize,
    CorruptionKind::PacketLoss,
    CorruptionKind::Rain,
    CorruptionKind::Jumble,
    CorruptionKind::BoxJumble,
    CorruptionKind::StaticRotate,
    CorruptionKind::Translate,
];

/// Severity parameter tables, one entry per severity 1..=5.
pub mod tables {
    pub const GAUSSIAN_SIGMA: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
    pub const SHOT_LAMBDA: [f64; 5] = [60.0, 25.0, 12.0, 5.0, 3.0];
    pub const IMPULSE_RHO: [f64; 5] = [0.02, 0.04, 0.07, 0.11, 0.17];
    pub const SPECKLE_SIGMA: [f64; 5] = [0.10, 0.15, 0.22, 0.32, 0.45];
    pub const DEFOCUS_RADIUS: [usize; 5] = [1, 2, 3, 5, 7];
    pub const MOTION_LENGTH: [usize; 5] = [3, 5, 7, 9, 12];
    pub const CONTRAST_FACTOR: [f64; 5] = [0.75, 0.60, 0.45, 0.30, 0.20];
    pub const BRIGHTNESS_DELTA: [f64; 5] = [0.08, 0.14, 0.20, 0.28, 0.36];
    pub const PIXELATE_FACTOR: [usize; 5] = [2, 3, 4, 6, 8];
    pub const QUANTIZE_LEVELS: [usize; 5] = [32, 16, 8, 6, 4];
    pub const PACKET_LOSS_FRACTION: [f64; 5] = [0.05, 0.10, 0.15, 0.22, 0.30];
    pub const PACKET_BLOCK: usize = 16;
    pub const RAIN_DENSITY: [f64; 5] = [0.010, 0.018, 0.028, 0.042, 0.060];
    pub const JUMBLE_WINDOW: [usize; 5] = [2, 3, 4, 6, 8];
    pub const ROTATE_DEGREES: [f64; 5] = [2.0, 4.0, 7.0, 11.0, 16.0];
    pub const TRANSLATE_SPEED: [f64; 5] = [0.25, 0.5, 0.75, 1.0, 1.5];
}

impl CorruptionKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "shot" => Ok(Self::Shot),
            "impulse" => Ok(Self::Impulse),
            "speckle" => Ok(Self::Speckle),
            "defocus-blur" => Ok(Self::DefocusBlur),
            "motion-blur" => Ok(Self::MotionBlur),
            "contrast" => Ok(Self::Contrast),
            "brightness" => Ok(Self::Brightness),
            "pixelate" => Ok(Self::Pixelate),
            "quantize" => Ok(Self::Quantize),
            "packet-loss" => Ok(Self::PacketLoss),
            "rain" => Ok(Self::Rain),
            "jumble" => Ok(Self::Jumble),
            "box-jumble" => Ok(Self::BoxJumble),
            "static-rotate" => Ok(Self::StaticRotate),
            "translate" => Ok(Self::Translate),
            other => Err(Error::config(format!("unknown corruption kind `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Gaussian => "gaussian",
            Self::Shot => "shot",
            Self::Impulse => "impulse",
            Self::Speckle => "speckle",
            Self::DefocusBlur => "defocus-blur",
            Self::MotionBlur => "motion-blur",
            Self::Contrast => "contrast",
            Self::Brightness => "brightness",
            Self::Pixelate => "pixelate",
            Self::Quantize => "quantize",
            Self::PacketLoss => "packet-loss",
            Self::Rain => "rain",
            Self::Jumble => "jumble",
            Self::BoxJumble => "box-jumble",
            Self::StaticRotate => "static-rotate",
            Self::Translate => "translate",
        }
    }

    /// Temporal kinds permute or drift across frames and need video input.
    pub fn requires_video(self) -> bool {
        matches!(self, Self::Jumble | Self::BoxJumble | Self::Translate)
    }

    /// Evaluation category the kind belongs to.
    pub fn category(self) -> &'static str {
        match self {
            Self::Gaussian | Self::Shot | Self::Impulse | Self::Speckle => "noise",
            Self::DefocusBlur | Self::MotionBlur => "blur",
            Self::Contrast | Self::Brightness | Self::Pixelate | Self::Quantize
            | Self::PacketLoss => "digital",
            Self::Rain => "weather",
            Self::Jumble | Self::BoxJumble => "temporal",
            Self::StaticRotate | Self::Translate => "camera",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::config(format!("severity {severity} outside 1..=5")));
        }
        Ok(CorruptionSpec {
            kind,
            severity,
            seed,
        })
    }

    fn level(&self) -> usize {
        (self.severity - 1) as usize
    }

    fn rng(&self) -> Rng {
        Rng::from_label(
            self.seed,
            &format!("corrupt/{}/s{}", self.kind.name(), self.severity),
        )
    }
}

/// Frame geometry helper: interprets rank-3 tensors as single-frame videos.
struct Frames<'a, T> {
    data: &'a [T],
    frames: usize,
    h: usize,
    w: usize,
    channels: usize,
    video: bool,
}

fn frames_of<T: Element>(x: &Tensor<T>) -> Result<Frames<'_, T>> {
    match x.rank() {
        3 => Ok(Frames {
            data: x.data(),
            frames: 1,
            h: x.shape()[1],
            w: x.shape()[2],
            channels: x.shape()[0],
            video: false,
        }),
        4 => Ok(Frames {
            data: x.data(),
            frames: x.shape()[1],
            h: x.shape()[2],
            w: x.shape()[3],
            channels: x.shape()[0],
            video: true,
        }),
        r => Err(Error::shape(format!(
            "corruption input must be (C,H,W) or (C,T,H,W), got rank {r}"
        ))),
    }
}

impl<T: Element> Frames<'_, T> {
    fn idx(&self, c: usize, t: usize, y: usize, x: usize) -> usize {
        if self.video {
            ((c * self.frames + t) * self.h + y) * self.w + x
        } else {
            (c * self.h + y) * self.w + x
        }
    }

    fn get(&self, c: usize, t: usize, y: i64, x: i64) -> T {
        // edge replication
        let yy = y.clamp(0, self.h as i64 - 1) as usize;
        let xx = x.clamp(0, self.w as i64 - 1) as usize;
        self.data[self.idx(c, t, yy, xx)]
    }
}

fn clip01<T: Element>(x: &mut Tensor<T>) {
    let one = T::one();
    for v in x.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        } else if *v > one {
            *v = one;
        }
    }
}

/// Applies one corruption. Deterministic given the spec; output clipped to
/// [0, 1].
pub fn apply_corruption<T: Element>(x: &Tensor<T>, spec: &CorruptionSpec) -> Result<Tensor<T>> {
    let f = frames_of(x)?;
    if spec.kind.requires_video() && !f.video {
        return Err(Error::contract(format!(
            "temporal corruption `{}` requires video input",
            spec.kind.name()
        )));
    }
    let mut rng = spec.rng();
    let lvl = spec.level();
    let mut out = match spec.kind {
        CorruptionKind::Gaussian => {
            let sigma = tables::GAUSSIAN_SIGMA[lvl];
            x.map_with_rng(&mut rng, |v, r| v + elem::<T>(r.normal() * sigma))
        }
        CorruptionKind::Shot => {
            let lambda = tables::SHOT_LAMBDA[lvl];
            x.map_with_rng(&mut rng, |v, r| {
                let rate = v.to_f64().unwrap().max(0.0) * lambda;
                elem::<T>(r.poisson(rate) as f64 / lambda)
            })
        }
        CorruptionKind::Impulse => {
            let rho = tables::IMPULSE_RHO[lvl];
            x.map_with_rng(&mut rng, |v, r| {
                if r.next_f64() < rho {
                    if r.next_f64() < 0.5 {
                        T::zero()
                    } else {
                        T::one()
                    }
                } else {
                    v
                }
            })
        }
        CorruptionKind::Speckle => {
            let sigma = tables::SPECKLE_SIGMA[lvl];
            x.map_with_rng(&mut rng, |v, r| v * elem::<T>(1.0 + r.normal() * sigma))
        }
        CorruptionKind::DefocusBlur => {
            let r = tables::DEFOCUS_RADIUS[lvl];
            convolve_kernel(x, &disk_kernel(r))?
        }
        CorruptionKind::MotionBlur => {
            let len = tables::MOTION_LENGTH[lvl];
            convolve_kernel(x, &line_kernel(len))?
        }
        CorruptionKind::Contrast => {
            let c = tables::CONTRAST_FACTOR[lvl];
            contrast(x, c)?
        }
        CorruptionKind::Brightness => {
            let b = tables::BRIGHTNESS_DELTA[lvl];
            x.map(|v| v + elem::<T>(b))
        }
        CorruptionKind::Pixelate => pixelate(x, tables::PIXELATE_FACTOR[lvl])?,
        CorruptionKind::Quantize => {
            let q = tables::QUANTIZE_LEVELS[lvl] as f64;
            x.map(|v| elem::<T>((v.to_f64().unwrap() * (q - 1.0)).round() / (q - 1.0)))
        }
        CorruptionKind::PacketLoss => packet_loss(x, tables::PACKET_LOSS_FRACTION[lvl], &mut rng)?,
        CorruptionKind::Rain => rain(x, tables::RAIN_DENSITY[lvl], &mut rng)?,
        CorruptionKind::Jumble => jumble(x, tables::JUMBLE_WINDOW[lvl], &mut rng, false)?,
        CorruptionKind::BoxJumble => jumble(x, tables::JUMBLE_WINDOW[lvl], &mut rng, true)?,
        CorruptionKind::StaticRotate => rotate(x, tables::ROTATE_DEGREES[lvl].to_radians())?,
        CorruptionKind::Translate => translate(x, tables::TRANSLATE_SPEED[lvl], &mut rng)?,
    };
    clip01(&mut out);
    Ok(out)
}

impl<T: Element> Tensor<T> {
    fn map_with_rng(&self, rng: &mut Rng, f: impl Fn(T, &mut Rng) -> T) -> Tensor<T> {
        let mut out = self.clone();
        for v in out.data_mut() {
            *v = f(*v, rng);
        }
        out
    }
}

fn disk_kernel(radius: usize) -> Vec<Vec<f64>> {
    let n = 2 * radius + 1;
    let mut k = vec![vec![0.0; n]; n];
    let mut total = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let dy = i as f64 - radius as f64;
            let dx = j as f64 - radius as f64;
            if dy * dy + dx * dx <= (radius as f64 + 0.5) * (radius as f64 + 0.5) {
                *v = 1.0;
                total += 1.0;
            }
        }
    }
    for row in &mut k {
        for v in row {
            *v /= total;
        }
    }
    k
}

fn line_kernel(len: usize) -> Vec<Vec<f64>> {
    // horizontal line of `len` taps
    let w = 1.0 / len as f64;
    vec![vec![w; len]]
}

fn convolve_kernel<T: Element>(x: &Tensor<T>, kernel: &[Vec<f64>]) -> Result<Tensor<T>> {
    let f = frames_of(x)?;
    let (kh, kw) = (kernel.len(), kernel[0].len());
    let (cy, cx) = (kh as i64 / 2, kw as i64 / 2);
    let mut out = x.clone();
    for c in 0..f.channels {
        for t in 0..f.frames {
            for y in 0..f.h {
                for xx in 0..f.w {
                    let mut acc = 0.0;
                    for (ki, row) in kernel.iter().enumerate() {
                        for (kj, &kv) in row.iter().enumerate() {
                            let sy = y as i64 + ki as i64 - cy;
                            let sx = xx as i64 + kj as i64 - cx;
                            acc += kv * f.get(c, t, sy, sx).to_f64().unwrap();
                        }
                    }
                    out.data_mut()[f.idx(c, t, y, xx)] = elem(acc);
                }
            }
        }
    }
    Ok(out)
}

fn contrast<T: Element>(x: &Tensor<T>, factor: f64) -> Result<Tensor<T>> {
    let f = frames_of(x)?;
    let mut out = x.clone();
    for c in 0..f.channels {
        for t in 0..f.frames {
            let mut mean = 0.0;
            for y in 0..f.h {
                for xx in 0..f.w {
                    mean += f.data[f.idx(c, t, y, xx)].to_f64().unwrap();
                }
            }
            mean /= (f.h * f.w) as f64;
            for y in 0..f.h {
                for xx in 0..f.w {
                    let i = f.idx(c, t, y, xx);
                    let v = f.data[i].to_f64().unwrap();
                    out.data_mut()[i] = elem((v - mean) * factor + mean);
                }
            }
        }
    }
    Ok(out)
}

fn pixelate<T: Element>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let f = frames_of(x)?;
    let mut out = x.clone();
    for c in 0..f.channels {
        for t in 0..f.frames {
            let mut by = 0;
            while by < f.h {
                let bh = factor.min(f.h - by);
                let mut bx = 0;
                while bx < f.w {
                    let bw = factor.min(f.w - bx);
                    let mut mean = 0.0;
                    for y in by..by + bh {
                        for xx in bx..bx + bw {
                            mean += f.data[f.idx(c, t, y, xx)].to_f64().unwrap();
                        }
                    }
                    mean /= (bh * bw) as f64;
                    for y in by..by + bh {
                        for xx in bx..bx + bw {
                            out.data_mut()[f.idx(c, t, y, xx)] = elem(mean);
                        }
                    }
                    bx += factor;
                }
                by += factor;
            }
        }
    }
    Ok(out)
}

fn packet_loss<T: Element>(x: &Tensor<T>, fraction: f64, rng: &mut Rng) -> Result<Tensor<T>> {
    let f = frames_of(x)?;
    let b = tables::PACKET_BLOCK;
    let (gy, gx) = (f.h.div_ceil(b), f.w.div_ceil(b));
    let nblocks = gy * gx;
    let count = ((fraction * nblocks as f64).ceil() as usize).min(nblocks);
    let mut out = x.clone();
    for t in 0..f.frames {
        let dropped = rng.choose(nblocks, count);
        for &blk in &dropped {
            let (by, bx) = (blk / gx * b, blk % gx * b);
            for c in 0..f.channels {
                for y in by..(by + b).min(f.h) {
                    for xx in bx..(bx + b).min(f.w) {
                        out.data_mut()[f.idx(c, t, y, xx)] = T::zero();
                    }
                }
            }
        }
    }
    Ok(out)
}

fn rain<T: Element>(x: &Tensor<T>, density: f64, rng: &mut Rng) -> Result<Tensor<T>> {
    let f = frames_of(x)?;
    let streaks = ((density * (f.h * f.w) as f64).round() as usize).max(1);
    let len = (f.h / 4).max(3);
    let mut out = x.clone();
    for t in 0..f.frames {
        for _ in 0..streaks {
            let sy = rng.below(f.h) as i64;
            let sx = rng.below(f.w) as i64;
            let bright = rng.uniform(0.25, 0.45);
            for step in 0..len as i64 {
                // diagonal streak falling toward lower-left
                let y = sy + step;
                let xx = sx - step;
                if y < 0 || y >= f.h as i64 || xx < 0 || xx >= f.w as i64 {
                    break;
                }
                for c in 0..f.channels {
                    let i = f.idx(c, t, y as usize, xx as usize);
                    let v = out.data()[i].to_f64().unwrap();
                    out.data_mut()[i] = elem(v + bright);
                }
            }
        }
    }
    Ok(out)
}

/// Frame shuffling. `boxed == false`: permute frames inside consecutive
/// windows of `w`. `boxed == true`: keep windows intact and permute the
/// window order.
fn jumble<T: Element>(x: &Tensor<T>, w: usize, rng: &mut Rng, boxed: bool) -> Result<Tensor<T>> {
    let f = frames_of(x)?;
    let t = f.frames;
    let mut order: Vec<usize> = (0..t).collect();
    if boxed {
        let nwin = t.div_ceil(w);
        let winperm = rng.permutation(nwin);
        order.clear();
        for &wi in &winperm {
            for j in (wi * w)..((wi + 1) * w).min(t) {
                order.push(j);
            }
        }
    } else {
        let mut start = 0;
        while start < t {
            let end = (start + w).min(t);
            let p = rng.permutation(end - start);
            let window: Vec<usize> = (start..end).collect();
            for (off, &pi) in p.iter().enumerate() {
                order[start + off] = window[pi];
            }
            start = end;
        }
    }
    let mut out = x.clone();
    for c in 0..f.channels {
        for (dst, &src) in order.iter().enumerate() {
            for y in 0..f.h {
                for xx in 0..f.w {
                    out.data_mut()[f.idx(c, dst, y, xx)] = f.data[f.idx(c, src, y, xx)];
                }
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor rotation about the frame center with edge replication;
/// the same angle for every frame.
fn rotate<T: Element>(x: &Tensor<T>, theta: f64) -> Result<Tensor<T>> {
    let f = frames_of(x)?;
    let (cy, cx) = ((f.h as f64 - 1.0) / 2.0, (f.w as f64 - 1.0) / 2.0);
    let (sin, cos) = theta.sin_cos();
    let mut out = x.clone();
    for c in 0..f.channels {
        for t in 0..f.frames {
            for y in 0..f.h {
                for xx in 0..f.w {
                    let dy = y as f64 - cy;
                    let dx = xx as f64 - cx;
                    let sy = (cos * dy - sin * dx + cy).round() as i64;
                    let sx = (sin * dy + cos * dx + cx).round() as i64;
                    out.data_mut()[f.idx(c, t, y, xx)] = f.get(c, t, sy, sx);
                }
            }
        }
    }
    Ok(out)
}

/// Per-frame drifting shift: a seeded direction with per-frame offset
/// `round(t * speed)`, nearest-neighbor with edge replication.
fn translate<T: Element>(x: &Tensor<T>, speed: f64, rng: &mut Rng) -> Result<Tensor<T>> {
    let f = frames_of(x)?;
    let angle = rng.uniform(0.0, std::f64::consts::TAU);
    let (dy, dx) = (angle.sin(), angle.cos());
    let mut out = x.clone();
    for t in 0..f.frames {
        let oy = (t as f64 * speed * dy).round() as i64;
        let ox = (t as f64 * speed * dx).round() as i64;
        for c in 0..f.channels {
            for y in 0..f.h {
                for xx in 0..f.w {
                    out.data_mut()[f.idx(c, t, y, xx)] =
                        f.get(c, t, y as i64 - oy, xx as i64 - ox);
                }
            }
        }
    }
    Ok(out)
}

/// Perturbation-sequence request: `n` frames starting with the clean input.
#[derive(Debug, Clone)]
pub struct PerturbationSequenceSpec {
    pub kind: CorruptionKind,
    pub len: usize,
    pub severity: u8,
    pub seed: u64,
}

impl PerturbationSequenceSpec {
    pub fn new(kind: CorruptionKind, len: usize, severity: u8, seed: u64) -> Result<Self> {
        if len < 2 {
            return Err(Error::contract(format!(
                "perturbation sequence length {len} < 2"
            )));
        }
        if !(1..=5).contains(&severity) {
            return Err(Error::config(format!("severity {severity} outside 1..=5")));
        }
        Ok(PerturbationSequenceSpec {
            kind,
            len,
            severity,
            seed,
        })
    }
}

fn is_resample_kind(kind: CorruptionKind) -> bool {
    matches!(
        kind,
        CorruptionKind::Gaussian
            | CorruptionKind::Shot
            | CorruptionKind::Impulse
            | CorruptionKind::Speckle
            | CorruptionKind::PacketLoss
            | CorruptionKind::Rain
            | CorruptionKind::Jumble
            | CorruptionKind::BoxJumble
    )
}

/// Builds a perturbation sequence: element 1 is the clean input verbatim;
/// noise-like kinds re-sample fresh seeds at the fixed severity, while
/// photometric/geometric kinds walk their parameter monotonically up to the
/// severity value.
pub fn make_perturbation_sequence<T: Element>(
    x: &Tensor<T>,
    spec: &PerturbationSequenceSpec,
) -> Result<Vec<Tensor<T>>> {
    let mut seq = Vec::with_capacity(spec.len);
    seq.push(x.clone());
    let lvl = (spec.severity - 1) as usize;
    for j in 2..=spec.len {
        let step_seed = spec.seed ^ (j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let frame = if is_resample_kind(spec.kind) {
            let cspec = CorruptionSpec::new(spec.kind, spec.severity, step_seed)?;
            apply_corruption(x, &cspec)?
        } else {
            // monotone parameter walk from ~0 to the severity-level value
            let frac = (j - 1) as f64 / (spec.len - 1) as f64;
            let mut out = match spec.kind {
                CorruptionKind::Brightness => {
                    let b = tables::BRIGHTNESS_DELTA[lvl] * frac;
                    x.map(|v| v + elem::<T>(b))
                }
                CorruptionKind::Contrast => {
                    let c = 1.0 - (1.0 - tables::CONTRAST_FACTOR[lvl]) * frac;
                    contrast(x, c)?
                }
                CorruptionKind::Quantize => {
                    // walk the level count down toward the severity value
                    let hi = 64.0;
                    let lo = tables::QUANTIZE_LEVELS[lvl] as f64;
                    let q = hi + (lo - hi) * frac;
                    x.map(|v| elem::<T>((v.to_f64().unwrap() * (q - 1.0)).round() / (q - 1.0)))
                }
                CorruptionKind::Pixelate => {
                    let factor = 1 + ((tables::PIXELATE_FACTOR[lvl] - 1) as f64 * frac).round() as usize;
                    pixelate(x, factor.max(1))?
                }
                CorruptionKind::StaticRotate => {
                    rotate(x, (tables::ROTATE_DEGREES[lvl] * frac).to_radians())?
                }
                CorruptionKind::Translate => {
                    let mut rng = Rng::from_label(spec.seed, "sequence/translate");
                    translate(x, tables::TRANSLATE_SPEED[lvl] * frac, &mut rng)?
                }
                CorruptionKind::DefocusBlur => {
                    let r = 1 + ((tables::DEFOCUS_RADIUS[lvl] - 1) as f64 * frac).round() as usize;
                    convolve_kernel(x, &disk_kernel(r))?
                }
                CorruptionKind::MotionBlur => {
                    let l = 2 + ((tables::MOTION_LENGTH[lvl] - 2) as f64 * frac).round() as usize;
                    convolve_kernel(x, &line_kernel(l))?
                }
                other => {
                    return Err(Error::config(format!(
                        "corruption `{}` has no sequence schedule",
                        other.name()
                    )))
                }
            };
            clip01(&mut out);
            out
        };
        seq.push(frame);
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(v: f64, shape: &[usize]) -> Tensor<f64> {
        Tensor::full(shape, v)
    }

    fn rand_image(seed: u64) -> Tensor<f64> {
        Rng::new(seed, 0).tensor_uniform(&[1, 32, 32], 0.1, 0.9)
    }

    fn rand_video(seed: u64) -> Tensor<f64> {
        Rng::new(seed, 0).tensor_uniform(&[1, 8, 16, 16], 0.1, 0.9)
    }

    fn mad(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / a.len() as f64
    }

    #[test]
    fn deterministic_given_seed() {
        let x = rand_image(1);
        for kind in ALL_KINDS {
            if kind.requires_video() {
                continue;
            }
            let spec = CorruptionSpec::new(kind, 3, 42).unwrap();
            let a = apply_corruption(&x, &spec).unwrap();
            let b = apply_corruption(&x, &spec).unwrap();
            assert_eq!(a, b, "{} not deterministic", kind.name());
        }
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let x = rand_image(2);
        let v = rand_video(3);
        for kind in ALL_KINDS {
            for severity in [1u8, 5] {
                let spec = CorruptionSpec::new(kind, severity, 7).unwrap();
                let y = if kind.requires_video() {
                    apply_corruption(&v, &spec).unwrap()
                } else {
                    apply_corruption(&x, &spec).unwrap()
                };
                for &val in y.data() {
                    assert!((0.0..=1.0).contains(&val), "{} out of range", kind.name());
                }
            }
        }
    }

    #[test]
    fn temporal_kinds_reject_images() {
        let x = rand_image(4);
        for kind in [CorruptionKind::Jumble, CorruptionKind::BoxJumble, CorruptionKind::Translate] {
            let spec = CorruptionSpec::new(kind, 2, 1).unwrap();
            assert!(matches!(
                apply_corruption(&x, &spec),
                Err(Error::Contract(_))
            ));
        }
    }

    #[test]
    fn impulse_flip_fraction_matches_binomial() {
        // measured fraction of changed pixels ~ rho within 3 sigma
        let x = gray(0.5, &[1, 64, 64]);
        for severity in 1..=5u8 {
            let rho = tables::IMPULSE_RHO[(severity - 1) as usize];
            let spec = CorruptionSpec::new(CorruptionKind::Impulse, severity, 11).unwrap();
            let y = apply_corruption(&x, &spec).unwrap();
            let flipped = y
                .data()
                .iter()
                .zip(x.data())
                .filter(|(a, b)| a != b)
                .count() as f64;
            let n = x.len() as f64;
            let tol = 3.0 * (rho * (1.0 - rho) / n).sqrt();
            assert!(
                (flipped / n - rho).abs() <= tol,
                "severity {severity}: flipped {} vs rho {rho}",
                flipped / n
            );
        }
    }

    #[test]
    fn gaussian_half_normal_mean_oracle() {
        // mean |corrupted - clean| before clipping ~ sigma sqrt(2/pi);
        // mid-gray input keeps clipping negligible at severity 3
        let x = gray(0.5, &[1, 64, 64]);
        let spec = CorruptionSpec::new(CorruptionKind::Gaussian, 3, 13).unwrap();
        let sigma = tables::GAUSSIAN_SIGMA[2];
        let mut dev = 0.0;
        let trials = 20;
        for t in 0..trials {
            let s = CorruptionSpec::new(CorruptionKind::Gaussian, 3, spec.seed + t).unwrap();
            let y = apply_corruption(&x, &s).unwrap();
            dev += mad(&x, &y);
        }
        dev /= trials as f64;
        let expect = sigma * (2.0 / std::f64::consts::PI).sqrt();
        assert!(
            (dev - expect).abs() / expect < 0.05,
            "mean abs dev {dev} vs {expect}"
        );
    }

    #[test]
    fn monotone_severity_in_mean_deviation() {
        let x = rand_image(5);
        for kind in [
            CorruptionKind::Gaussian,
            CorruptionKind::Impulse,
            CorruptionKind::Speckle,
            CorruptionKind::Quantize,
        ] {
            let mut prev = 0.0;
            for severity in 1..=5u8 {
                let mut acc = 0.0;
                for seed in 0..20u64 {
                    let spec = CorruptionSpec::new(kind, severity, seed).unwrap();
                    acc += mad(&x, &apply_corruption(&x, &spec).unwrap());
                }
                acc /= 20.0;
                assert!(
                    acc > prev,
                    "{} severity {severity}: {acc} !> {prev}",
                    kind.name()
                );
                prev = acc;
            }
        }
    }

    #[test]
    fn jumble_preserves_per_frame_pixel_multisets() {
        let v = rand_video(6);
        for kind in [CorruptionKind::Jumble, CorruptionKind::BoxJumble] {
            let spec = CorruptionSpec::new(kind, 5, 3).unwrap();
            let y = apply_corruption(&v, &spec).unwrap();
            // collect each frame as a sorted pixel list and compare multisets
            let frame_list = |x: &Tensor<f64>| -> Vec<Vec<u64>> {
                let t = x.shape()[1];
                let hw = x.shape()[2] * x.shape()[3];
                (0..t)
                    .map(|ti| {
                        let mut v: Vec<u64> = (0..hw)
                            .map(|i| x.data()[ti * hw + i].to_bits())
                            .collect();
                        v.sort_unstable();
                        v
                    })
                    .collect()
            };
            let mut a = frame_list(&v);
            let mut b = frame_list(&y);
            a.sort();
            b.sort();
            assert_eq!(a, b, "{} changed pixel content", kind.name());
        }
    }

    #[test]
    fn jumble_window_one_would_be_identity() {
        // window 1 permutes singleton windows: identity
        let v = rand_video(7);
        let y = jumble(&v, 1, &mut Rng::new(1, 1), false).unwrap();
        assert_eq!(v, y);
    }

    #[test]
    fn sequence_starts_clean_and_is_deterministic() {
        let x = rand_image(8);
        let spec = PerturbationSequenceSpec::new(CorruptionKind::Gaussian, 5, 3, 21).unwrap();
        let a = make_perturbation_sequence(&x, &spec).unwrap();
        let b = make_perturbation_sequence(&x, &spec).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a[0], x);
        for (u, v) in a.iter().zip(&b) {
            assert_eq!(u, v);
        }
        // later elements differ from the clean frame
        assert!(mad(&a[0], &a[1]) > 0.0);
    }

    #[test]
    fn brightness_walk_is_strictly_monotone() {
        let x = rand_image(9);
        let spec = PerturbationSequenceSpec::new(CorruptionKind::Brightness, 6, 4, 5).unwrap();
        let seq = make_perturbation_sequence(&x, &spec).unwrap();
        let mut prev = seq[1].mean();
        for frame in &seq[2..] {
            let m = frame.mean();
            assert!(m > prev, "brightness mean not increasing: {m} vs {prev}");
            prev = m;
        }
    }

    #[test]
    fn sequence_length_contract() {
        assert!(PerturbationSequenceSpec::new(CorruptionKind::Gaussian, 1, 3, 0).is_err());
    }

    #[test]
    fn pixelate_blocks_are_constant() {
        let x = rand_image(10);
        let spec = CorruptionSpec::new(CorruptionKind::Pixelate, 4, 0).unwrap();
        let y = apply_corruption(&x, &spec).unwrap();
        let k = tables::PIXELATE_FACTOR[3];
        // first block must be constant
        let v0 = y.at(&[0, 0, 0]);
        for yy in 0..k {
            for xx in 0..k {
                assert_eq!(y.at(&[0, yy, xx]), v0);
            }
        }
    }

    #[test]
    fn severity_table_rejects_out_of_range() {
        assert!(CorruptionSpec::new(CorruptionKind::Gaussian, 0, 0).is_err());
        assert!(CorruptionSpec::new(CorruptionKind::Gaussian, 6, 0).is_err());
    }
}
