//! Wavelet patch embedding: sub-band reduction, tokenization, positional
//! encoding and tube masking.
//!
//! The "convolution" of the patchifier is a non-overlapping strided linear
//! projection (kernel size == stride), applied to either the sub-band
//! reduced wavelet coefficients or, for the plain baseline, to raw pixels.

use crate::rng::Rng;
use crate::tensor::{elem, matmul, matmul_tn, Element, Tensor};
use crate::wavelet::{dwt, dwt_backward, Boundary, SubbandSet, WaveletFilter};
use crate::{Error, Result};

/// How the sub-bands are folded into one tensor before tokenization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceMode {
    /// Elementwise mean over all bands (low band included).
    Avg,
    /// Keep only the all-low band.
    Omit,
    /// Stack bands along the channel axis (band-major).
    Concat,
}

impl ReduceMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(ReduceMode::Avg),
            "omit" => Ok(ReduceMode::Omit),
            "concat" => Ok(ReduceMode::Concat),
            other => Err(Error::config(format!("unknown reduce mode `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ReduceMode::Avg => "avg",
            ReduceMode::Omit => "omit",
            ReduceMode::Concat => "concat",
        }
    }
}

/// Embedding configuration shared by images and videos.
#[derive(Debug, Clone)]
pub struct EmbedConfig {
    pub mode: ReduceMode,
    /// Spatial patch size in coefficient (post-transform) pixels.
    pub patch: usize,
    /// Tubelet size in coefficient frames (video only).
    pub tubelet: usize,
    pub embed_dim: usize,
    pub mask_ratio: f64,
    pub filter: String,
    pub boundary: Boundary,
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.tubelet == 0 || self.embed_dim == 0 {
            return Err(Error::config(
                "patch, tubelet and embed_dim must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::config(format!(
                "mask ratio {} outside [0, 1)",
                self.mask_ratio
            )));
        }
        WaveletFilter::<f64>::by_name(&self.filter)?;
        Ok(())
    }
}

/// Token arrangement: one temporal slot per tubelet and a spatial grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    pub temporal: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TokenGrid {
    pub fn num_tokens(&self) -> usize {
        self.temporal * self.rows * self.cols
    }

    pub fn spatial_cells(&self) -> usize {
        self.rows * self.cols
    }
}

/// Patch/tubelet token sequence for one sample, positions already applied.
#[derive(Debug, Clone)]
pub struct TokenBatch<T> {
    /// (num_tokens, embed_dim)
    pub tokens: Tensor<T>,
    pub grid: TokenGrid,
}

/// Visible/masked bookkeeping for one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPattern {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    /// rows x cols boolean grid; true = masked. For videos this single grid
    /// is replicated across every temporal index (tube masking).
    pub spatial_mask: Vec<bool>,
    pub grid: TokenGrid,
}

/// Samples a mask. Images draw `floor(ratio * N)` token indices; videos draw
/// `floor(ratio * S)` spatial cells and replicate them across all temporal
/// indices.
pub fn tube_mask(grid: &TokenGrid, ratio: f64, rng: &mut Rng) -> Result<MaskPattern> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::config(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let s = grid.spatial_cells();
    if s == 0 || grid.temporal == 0 {
        return Err(Error::config("empty token grid"));
    }
    let n = grid.num_tokens();
    let (masked, spatial_mask) = if grid.temporal == 1 {
        let k = (ratio * n as f64).floor() as usize;
        let mut masked = rng.choose(n, k);
        masked.sort_unstable();
        let mut sm = vec![false; s];
        for &i in &masked {
            sm[i] = true;
        }
        (masked, sm)
    } else {
        let k = (ratio * s as f64).floor() as usize;
        let mut cells = rng.choose(s, k);
        cells.sort_unstable();
        let mut sm = vec![false; s];
        for &c in &cells {
            sm[c] = true;
        }
        let mut masked = Vec::with_capacity(k * grid.temporal);
        for t in 0..grid.temporal {
            for &c in &cells {
                masked.push(t * s + c);
            }
        }
        (masked, sm)
    };
    if masked.len() >= n {
        return Err(Error::config("mask leaves no visible token"));
    }
    let mut is_masked = vec![false; n];
    for &i in &masked {
        is_masked[i] = true;
    }
    let visible: Vec<usize> = (0..n).filter(|&i| !is_masked[i]).collect();
    Ok(MaskPattern {
        visible,
        masked,
        spatial_mask,
        grid: *grid,
    })
}

/// Folds a sub-band set into a single tensor according to `mode`.
pub fn subband_reduce<T: Element>(set: &SubbandSet<T>, mode: ReduceMode) -> Tensor<T> {
    match mode {
        ReduceMode::Omit => set.low().clone(),
        ReduceMode::Avg => {
            let mut acc = set.bands[0].clone();
            for b in &set.bands[1..] {
                acc.add_assign(b).expect("bands share one shape");
            }
            acc.scale(elem::<T>(1.0 / set.band_count() as f64))
        }
        ReduceMode::Concat => {
            let shape = set.bands[0].shape();
            let mut out_shape = shape.to_vec();
            out_shape[0] *= set.band_count();
            let mut data = Vec::with_capacity(out_shape.iter().product());
            for b in &set.bands {
                data.extend_from_slice(b.data());
            }
            Tensor::from_vec(&out_shape, data).expect("concat shape")
        }
    }
}

/// VJP of [`subband_reduce`]: distributes the upstream gradient back to the
/// individual bands.
pub fn subband_reduce_backward<T: Element>(
    grad: &Tensor<T>,
    mode: ReduceMode,
    band_count: usize,
    band_shape: &[usize],
) -> Vec<Tensor<T>> {
    match mode {
        ReduceMode::Omit => {
            let mut out = vec![Tensor::zeros(band_shape); band_count];
            out[0] = grad.clone();
            out
        }
        ReduceMode::Avg => {
            let scaled = grad.scale(elem::<T>(1.0 / band_count as f64));
            vec![scaled; band_count]
        }
        ReduceMode::Concat => {
            let band_len: usize = band_shape.iter().product();
            (0..band_count)
                .map(|i| {
                    Tensor::from_vec(
                        band_shape,
                        grad.data()[i * band_len..(i + 1) * band_len].to_vec(),
                    )
                    .expect("band slice")
                })
                .collect()
        }
    }
}

/// Extracts non-overlapping p x p patches from (C, H, W) into (N, C*p*p),
/// token order row-major over the patch grid, vector order channel-major.
pub fn patchify_2d<T: Element>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (c, h, w) = dims3(x)?;
    if h % p != 0 || w % p != 0 {
        return Err(Error::config(format!(
            "spatial extent ({h}, {w}) not divisible by patch size {p}"
        )));
    }
    let (gr, gc) = (h / p, w / p);
    let dim = c * p * p;
    let mut out = Tensor::zeros(&[gr * gc, dim]);
    for r in 0..gr {
        for cc in 0..gc {
            let row = out.row_mut(r * gc + cc);
            let mut o = 0;
            for ch in 0..c {
                for dy in 0..p {
                    let base = ch * h * w + (r * p + dy) * w + cc * p;
                    row[o..o + p].copy_from_slice(&x.data()[base..base + p]);
                    o += p;
                }
            }
        }
    }
    Ok(out)
}

/// Scatter-inverse of [`patchify_2d`] (each pixel belongs to one patch).
pub fn unpatchify_2d<T: Element>(
    patches: &Tensor<T>,
    shape: &[usize],
    p: usize,
) -> Result<Tensor<T>> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (gr, gc) = (h / p, w / p);
    let mut out = Tensor::zeros(shape);
    for r in 0..gr {
        for cc in 0..gc {
            let row = patches.row(r * gc + cc);
            let mut o = 0;
            for ch in 0..c {
                for dy in 0..p {
                    let base = ch * h * w + (r * p + dy) * w + cc * p;
                    out.data_mut()[base..base + p].copy_from_slice(&row[o..o + p]);
                    o += p;
                }
            }
        }
    }
    Ok(out)
}

/// Extracts t' x p x p tubelets from (C, T, H, W) into (N, C*t'*p*p); token
/// order is temporal-major, then spatial row-major.
pub fn patchify_3d<T: Element>(x: &Tensor<T>, tubelet: usize, p: usize) -> Result<Tensor<T>> {
    let (c, t, h, w) = dims4(x)?;
    if t % tubelet != 0 || h % p != 0 || w % p != 0 {
        return Err(Error::config(format!(
            "extent ({t}, {h}, {w}) not divisible by tubelet {tubelet} / patch {p}"
        )));
    }
    let (gt, gr, gc) = (t / tubelet, h / p, w / p);
    let dim = c * tubelet * p * p;
    let mut out = Tensor::zeros(&[gt * gr * gc, dim]);
    for tt in 0..gt {
        for r in 0..gr {
            for cc in 0..gc {
                let row = out.row_mut(tt * gr * gc + r * gc + cc);
                let mut o = 0;
                for ch in 0..c {
                    for dt in 0..tubelet {
                        for dy in 0..p {
                            let base = ch * t * h * w
                                + (tt * tubelet + dt) * h * w
                                + (r * p + dy) * w
                                + cc * p;
                            row[o..o + p].copy_from_slice(&x.data()[base..base + p]);
                            o += p;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Scatter-inverse of [`patchify_3d`].
pub fn unpatchify_3d<T: Element>(
    patches: &Tensor<T>,
    shape: &[usize],
    tubelet: usize,
    p: usize,
) -> Result<Tensor<T>> {
    let (c, t, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (gt, gr, gc) = (t / tubelet, h / p, w / p);
    let mut out = Tensor::zeros(shape);
    for tt in 0..gt {
        for r in 0..gr {
            for cc in 0..gc {
                let row = patches.row(tt * gr * gc + r * gc + cc);
                let mut o = 0;
                for ch in 0..c {
                    for dt in 0..tubelet {
                        for dy in 0..p {
                            let base = ch * t * h * w
                                + (tt * tubelet + dt) * h * w
                                + (r * p + dy) * w
                                + cc * p;
                            out.data_mut()[base..base + p].copy_from_slice(&row[o..o + p]);
                            o += p;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Fixed factorized sinusoidal positional embedding for a token grid.
/// Each axis receives an equal even share of the embedding dimension; any
/// remainder channels are zero.
pub fn sincos_positional<T: Element>(grid: &TokenGrid, embed_dim: usize) -> Tensor<T> {
    let axes = if grid.temporal == 1 { 2 } else { 3 };
    let per_axis = 2 * (embed_dim / (2 * axes));
    let mut out = Tensor::zeros(&[grid.num_tokens(), embed_dim]);
    for tok in 0..grid.num_tokens() {
        let coords = if grid.temporal == 1 {
            vec![tok / grid.cols, tok % grid.cols]
        } else {
            let s = grid.spatial_cells();
            vec![tok / s, (tok % s) / grid.cols, tok % grid.cols]
        };
        let row = out.row_mut(tok);
        for (a, &pos) in coords.iter().enumerate() {
            let half = per_axis / 2;
            for i in 0..half {
                let omega = 10000f64.powf(-(i as f64) / half as f64);
                let v = pos as f64 * omega;
                row[a * per_axis + i] = elem(v.sin());
                row[a * per_axis + half + i] = elem(v.cos());
            }
        }
    }
    out
}

/// Everything the embedding backward and the reconstruction targets need.
#[derive(Debug, Clone)]
pub struct EmbedCache<T> {
    /// Pre-projection patch vectors (N, patch_dim); also the reconstruction
    /// target source during pretraining.
    pub patches: Tensor<T>,
    pub input_shape: Vec<usize>,
    pub reduced_shape: Vec<usize>,
    pub wavelet_path: bool,
}

fn dims3<T: Element>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.rank() != 3 {
        return Err(Error::shape(format!(
            "expected (C, H, W), got {:?}",
            x.shape()
        )));
    }
    Ok((x.shape()[0], x.shape()[1], x.shape()[2]))
}

fn dims4<T: Element>(x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    if x.rank() != 4 {
        return Err(Error::shape(format!(
            "expected (C, T, H, W), got {:?}",
            x.shape()
        )));
    }
    Ok((x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]))
}

fn project<T: Element>(
    patches: &Tensor<T>,
    grid: TokenGrid,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    cfg: &EmbedConfig,
) -> Result<TokenBatch<T>> {
    if weight.shape()[1] != patches.cols() || weight.shape()[0] != cfg.embed_dim {
        return Err(Error::shape(format!(
            "projection weight {:?} does not map patch dim {} to embed dim {}",
            weight.shape(),
            patches.cols(),
            cfg.embed_dim
        )));
    }
    let mut tokens = crate::tensor::matmul_nt(patches, weight)?;
    let pos = sincos_positional::<T>(&grid, cfg.embed_dim);
    for r in 0..tokens.rows() {
        let row = tokens.row_mut(r);
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v + bias.data()[j] + pos.at(&[r, j]);
        }
    }
    Ok(TokenBatch { tokens, grid })
}

/// Wavelet patch embedding for images: per-channel 2D-DWT, sub-band
/// reduction, patch extraction, linear projection, sinusoidal positions.
pub fn wavelet_embed_image<T: Element>(
    x: &Tensor<T>,
    cfg: &EmbedConfig,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(TokenBatch<T>, EmbedCache<T>)> {
    let (_, h, w) = dims3(x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::config(format!(
            "image extent ({h}, {w}) must be even"
        )));
    }
    let filter = WaveletFilter::by_name(&cfg.filter)?;
    let set = dwt(x, &[1, 2], &filter, cfg.boundary)?;
    let reduced = subband_reduce(&set, cfg.mode);
    let (rc, rh, rw) = dims3(&reduced)?;
    if rh % cfg.patch != 0 || rw % cfg.patch != 0 {
        return Err(Error::config(format!(
            "post-transform extent ({rh}, {rw}) not divisible by patch {}",
            cfg.patch
        )));
    }
    let grid = TokenGrid {
        temporal: 1,
        rows: rh / cfg.patch,
        cols: rw / cfg.patch,
    };
    let patches = patchify_2d(&reduced, cfg.patch)?;
    let batch = project(&patches, grid, weight, bias, cfg)?;
    Ok((
        batch,
        EmbedCache {
            patches,
            input_shape: x.shape().to_vec(),
            reduced_shape: vec![rc, rh, rw],
            wavelet_path: true,
        },
    ))
}

/// Wavelet tubelet embedding for videos: 3D-DWT over (T, H, W), sub-band
/// reduction, tubelet extraction, linear projection, sinusoidal positions.
pub fn wavelet_embed_video<T: Element>(
    x: &Tensor<T>,
    cfg: &EmbedConfig,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(TokenBatch<T>, EmbedCache<T>)> {
    let (_, t, h, w) = dims4(x)?;
    if t % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::config(format!(
            "video extent ({t}, {h}, {w}) must be even"
        )));
    }
    let filter = WaveletFilter::by_name(&cfg.filter)?;
    let set = dwt(x, &[1, 2, 3], &filter, cfg.boundary)?;
    let reduced = subband_reduce(&set, cfg.mode);
    let (rc, rt, rh, rw) = dims4(&reduced)?;
    if rt % cfg.tubelet != 0 || rh % cfg.patch != 0 || rw % cfg.patch != 0 {
        return Err(Error::config(format!(
            "post-transform extent ({rt}, {rh}, {rw}) not divisible by tubelet {} / patch {}",
            cfg.tubelet, cfg.patch
        )));
    }
    let grid = TokenGrid {
        temporal: rt / cfg.tubelet,
        rows: rh / cfg.patch,
        cols: rw / cfg.patch,
    };
    let patches = patchify_3d(&reduced, cfg.tubelet, cfg.patch)?;
    let batch = project(&patches, grid, weight, bias, cfg)?;
    Ok((
        batch,
        EmbedCache {
            patches,
            input_shape: x.shape().to_vec(),
            reduced_shape: vec![rc, rt, rh, rw],
            wavelet_path: true,
        },
    ))
}

/// Plain (baseline) patch embedding: no transform, standard patchifier.
pub fn plain_embed_image<T: Element>(
    x: &Tensor<T>,
    cfg: &EmbedConfig,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(TokenBatch<T>, EmbedCache<T>)> {
    let (c, h, w) = dims3(x)?;
    if h % cfg.patch != 0 || w % cfg.patch != 0 {
        return Err(Error::config(format!(
            "extent ({h}, {w}) not divisible by patch {}",
            cfg.patch
        )));
    }
    let grid = TokenGrid {
        temporal: 1,
        rows: h / cfg.patch,
        cols: w / cfg.patch,
    };
    let patches = patchify_2d(x, cfg.patch)?;
    let batch = project(&patches, grid, weight, bias, cfg)?;
    Ok((
        batch,
        EmbedCache {
            patches,
            input_shape: x.shape().to_vec(),
            reduced_shape: vec![c, h, w],
            wavelet_path: false,
        },
    ))
}

/// Plain tubelet embedding for videos.
pub fn plain_embed_video<T: Element>(
    x: &Tensor<T>,
    cfg: &EmbedConfig,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(TokenBatch<T>, EmbedCache<T>)> {
    let (c, t, h, w) = dims4(x)?;
    if t % cfg.tubelet != 0 || h % cfg.patch != 0 || w % cfg.patch != 0 {
        return Err(Error::config(format!(
            "extent ({t}, {h}, {w}) not divisible by tubelet {} / patch {}",
            cfg.tubelet, cfg.patch
        )));
    }
    let grid = TokenGrid {
        temporal: t / cfg.tubelet,
        rows: h / cfg.patch,
        cols: w / cfg.patch,
    };
    let patches = patchify_3d(x, cfg.tubelet, cfg.patch)?;
    let batch = project(&patches, grid, weight, bias, cfg)?;
    Ok((
        batch,
        EmbedCache {
            patches,
            input_shape: x.shape().to_vec(),
            reduced_shape: vec![c, t, h, w],
            wavelet_path: false,
        },
    ))
}

/// Gradients produced by the embedding backward.
pub struct EmbedGrads<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    /// Present only when requested.
    pub input: Option<Tensor<T>>,
}

/// VJP of the embedding pipeline. `grad_tokens` is the gradient at the
/// post-position tokens; `grad_patches_extra` is an optional gradient
/// flowing directly into the pre-projection patch vectors (the
/// reconstruction-target path). Positional embeddings are constants.
pub fn embed_backward<T: Element>(
    grad_tokens: &Tensor<T>,
    cache: &EmbedCache<T>,
    cfg: &EmbedConfig,
    weight: &Tensor<T>,
    grad_patches_extra: Option<&Tensor<T>>,
    want_input_grad: bool,
) -> Result<EmbedGrads<T>> {
    // d weight = grad_tokens^T . patches ; d bias = column sums.
    let dw = matmul_tn(grad_tokens, &cache.patches)?;
    let mut db = Tensor::zeros(&[grad_tokens.cols()]);
    for r in 0..grad_tokens.rows() {
        for (j, v) in grad_tokens.row(r).iter().enumerate() {
            db.data_mut()[j] = db.data()[j] + *v;
        }
    }
    let input = if want_input_grad {
        let mut dpatches = matmul(grad_tokens, weight)?;
        if let Some(extra) = grad_patches_extra {
            dpatches.add_assign(extra)?;
        }
        let is_video = cache.input_shape.len() == 4;
        let dreduced = if is_video {
            unpatchify_3d(&dpatches, &cache.reduced_shape, cfg.tubelet, cfg.patch)?
        } else {
            unpatchify_2d(&dpatches, &cache.reduced_shape, cfg.patch)?
        };
        if cache.wavelet_path {
            let axes: Vec<usize> = if is_video { vec![1, 2, 3] } else { vec![1, 2] };
            let band_count = 1usize << axes.len();
            let mut band_shape = cache.reduced_shape.clone();
            if cfg.mode == ReduceMode::Concat {
                band_shape[0] /= band_count;
            }
            let band_grads = subband_reduce_backward(&dreduced, cfg.mode, band_count, &band_shape);
            let filter = WaveletFilter::by_name(&cfg.filter)?;
            let gset = SubbandSet {
                axes: axes.clone(),
                original_extents: axes.iter().map(|&a| cache.input_shape[a]).collect(),
                bands: band_grads,
            };
            Some(dwt_backward(&gset, &filter, cfg.boundary)?)
        } else {
            Some(dreduced)
        }
    } else {
        None
    };
    Ok(EmbedGrads {
        weight: dw,
        bias: db,
        input,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, DiffOp};
    use crate::wavelet::dwt2d;

    fn cfg(mode: ReduceMode, patch: usize) -> EmbedConfig {
        EmbedConfig {
            mode,
            patch,
            tubelet: 2,
            embed_dim: 16,
            mask_ratio: 0.75,
            filter: "haar".into(),
            boundary: Boundary::Zero,
        }
    }

    fn proj(embed_dim: usize, patch_dim: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
        let mut rng = Rng::new(seed, 0);
        let bound = 1.0 / (patch_dim as f64).sqrt();
        (
            rng.tensor_uniform(&[embed_dim, patch_dim], -bound, bound),
            rng.tensor_uniform(&[embed_dim], -bound, bound),
        )
    }

    #[test]
    fn subband_reduce_modes() {
        let x = Rng::new(1, 1).tensor_uniform::<f64>(&[3, 4, 4], -1.0, 1.0);
        let set = dwt2d(&x, (1, 2), &WaveletFilter::haar(), Boundary::Zero).unwrap();
        // avg of identical bands is the band itself
        let same = SubbandSet {
            axes: vec![1, 2],
            original_extents: vec![4, 4],
            bands: vec![set.bands[0].clone(); 4],
        };
        let avg = subband_reduce(&same, ReduceMode::Avg);
        assert!(avg.sub(&set.bands[0]).unwrap().max_abs() < 1e-14);
        // omit returns the all-low band
        let omit = subband_reduce(&set, ReduceMode::Omit);
        assert_eq!(&omit, set.low());
        // concat multiplies channel count by the band count
        let cat = subband_reduce(&set, ReduceMode::Concat);
        assert_eq!(cat.shape(), &[12, 2, 2]);
    }

    #[test]
    fn avg_equals_omit_over_band_count_when_high_bands_zero() {
        // constant image: all bands with an H factor vanish
        let x = Tensor::<f64>::full(&[1, 8, 8], 0.3);
        let set = dwt2d(&x, (1, 2), &WaveletFilter::haar(), Boundary::Zero).unwrap();
        let avg = subband_reduce(&set, ReduceMode::Avg);
        let omit = subband_reduce(&set, ReduceMode::Omit);
        let rescaled = omit.scale(1.0 / set.band_count() as f64);
        assert!(avg.sub(&rescaled).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn image_embed_token_count() {
        // 3x32x32, patch 4, omit: transform output 3x16x16 -> 16 tokens
        let x = Tensor::<f64>::zeros(&[3, 32, 32]);
        let c = cfg(ReduceMode::Omit, 4);
        let (w, b) = proj(16, 3 * 16, 7);
        let (batch, _) = wavelet_embed_image(&x, &c, &w, &b).unwrap();
        assert_eq!(
            batch.grid,
            TokenGrid {
                temporal: 1,
                rows: 4,
                cols: 4
            }
        );
        assert_eq!(batch.tokens.shape(), &[16, 16]);
    }

    #[test]
    fn concat_patch_dim_contract() {
        // concat with C=3: projection input per patch is 12 * p^2 values
        let x = Tensor::<f64>::zeros(&[3, 32, 32]);
        let c = cfg(ReduceMode::Concat, 4);
        let (w, b) = proj(16, 12 * 16, 7);
        let (_, cache) = wavelet_embed_image(&x, &c, &w, &b).unwrap();
        assert_eq!(cache.patches.cols(), 12 * 16);
    }

    #[test]
    fn zero_image_tokens_are_bias_plus_positions() {
        let x = Tensor::<f64>::zeros(&[1, 8, 8]);
        let c = cfg(ReduceMode::Omit, 2);
        let (w, b) = proj(16, 4, 3);
        let (batch, _) = wavelet_embed_image(&x, &c, &w, &b).unwrap();
        let pos = sincos_positional::<f64>(&batch.grid, 16);
        for r in 0..batch.tokens.rows() {
            for j in 0..16 {
                let expect = b.data()[j] + pos.at(&[r, j]);
                assert!((batch.tokens.at(&[r, j]) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embedding_is_affine_in_the_input() {
        let mut rng = Rng::new(9, 9);
        let x = rng.tensor_uniform::<f64>(&[1, 8, 8], 0.0, 1.0);
        let c = cfg(ReduceMode::Avg, 2);
        let (w, b) = proj(16, 4, 5);
        let (t1, _) = wavelet_embed_image(&x, &c, &w, &b).unwrap();
        let (t2, _) = wavelet_embed_image(&x.scale(2.0), &c, &w, &b).unwrap();
        let (t0, _) = wavelet_embed_image(&Tensor::zeros(&[1, 8, 8]), &c, &w, &b).unwrap();
        // tokens(2x) = 2 tokens(x) - tokens(0)
        let lhs = t2.tokens;
        let rhs = t1.tokens.scale(2.0).sub(&t0.tokens).unwrap();
        assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn video_embed_grid() {
        // 3x16x32x32, tubelet 2, patch 4, omit -> grid (4,4,4), 64 tokens
        let x = Tensor::<f64>::zeros(&[3, 16, 32, 32]);
        let mut c = cfg(ReduceMode::Omit, 4);
        c.embed_dim = 24;
        let (w, b) = proj(24, 3 * 2 * 16, 7);
        let (batch, _) = wavelet_embed_video(&x, &c, &w, &b).unwrap();
        assert_eq!(
            batch.grid,
            TokenGrid {
                temporal: 4,
                rows: 4,
                cols: 4
            }
        );
        assert_eq!(batch.tokens.rows(), 64);
    }

    #[test]
    fn constant_video_patches_identical() {
        let x = Tensor::<f64>::full(&[1, 4, 8, 8], 0.5);
        let c = cfg(ReduceMode::Omit, 2);
        let (w, b) = proj(16, 8, 11);
        let (_, cache) = wavelet_embed_video(&x, &c, &w, &b).unwrap();
        let first = cache.patches.row(0).to_vec();
        for r in 1..cache.patches.rows() {
            for (a, bb) in cache.patches.row(r).iter().zip(&first) {
                assert!((a - bb).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn avg_vs_omit_on_zero_high_band_video() {
        // constant video: H bands vanish; avg tokens equal omit tokens once
        // the 1/8 band factor is compensated.
        let x = Tensor::<f64>::full(&[1, 4, 8, 8], 0.7);
        let co = cfg(ReduceMode::Omit, 2);
        let ca = cfg(ReduceMode::Avg, 2);
        let (w, b) = proj(16, 8, 13);
        let (to, _) = wavelet_embed_video(&x, &co, &w, &b).unwrap();
        let (ta, _) = wavelet_embed_video(&x.scale(8.0), &ca, &w, &b).unwrap();
        assert!(to.tokens.sub(&ta.tokens).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn mask_ratio_zero_masks_nothing() {
        let grid = TokenGrid {
            temporal: 1,
            rows: 4,
            cols: 4,
        };
        let m = tube_mask(&grid, 0.0, &mut Rng::new(1, 1)).unwrap();
        assert!(m.masked.is_empty());
        assert_eq!(m.visible.len(), 16);
    }

    #[test]
    fn tube_mask_counts_and_tube_property() {
        let grid = TokenGrid {
            temporal: 4,
            rows: 14,
            cols: 14,
        };
        let m = tube_mask(&grid, 0.9, &mut Rng::new(42, 7)).unwrap();
        // 196 cells, ratio 0.9 -> 176 masked cells per temporal slice
        assert_eq!(m.masked.len(), 176 * 4);
        let s = grid.spatial_cells();
        for &i in &m.masked {
            assert!(m.spatial_mask[i % s]);
        }
        // tube property: spatial membership independent of temporal index
        for cell in 0..s {
            let in_mask: Vec<bool> = (0..grid.temporal)
                .map(|t| m.masked.binary_search(&(t * s + cell)).is_ok())
                .collect();
            assert!(in_mask.iter().all(|&v| v == in_mask[0]));
        }
    }

    #[test]
    fn mask_is_deterministic_and_partitions_tokens() {
        let grid = TokenGrid {
            temporal: 2,
            rows: 4,
            cols: 4,
        };
        let a = tube_mask(&grid, 0.5, &mut Rng::new(5, 5)).unwrap();
        let b = tube_mask(&grid, 0.5, &mut Rng::new(5, 5)).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.visible.iter().chain(a.masked.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..grid.num_tokens()).collect::<Vec<_>>());
    }

    #[test]
    fn mask_ratio_one_is_rejected() {
        let grid = TokenGrid {
            temporal: 1,
            rows: 2,
            cols: 2,
        };
        assert!(matches!(
            tube_mask(&grid, 1.0, &mut Rng::new(1, 1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn embed_gradient_full_pipeline() {
        for mode in [ReduceMode::Avg, ReduceMode::Omit, ReduceMode::Concat] {
            let mut c = cfg(mode, 2);
            if mode == ReduceMode::Avg {
                // avg + haar zeroes the gradient at odd offsets exactly
                // (the L and H backward rows cancel), which turns the
                // relative-error denominator floor into pure finite
                // difference noise; db2 probes the same path without the
                // structural zeros.
                c.filter = "db2".into();
            }
            let pd = match mode {
                ReduceMode::Concat => 16,
                _ => 4,
            };
            let (w, b) = proj(16, pd, 21);
            let op = DiffOp::new(
                format!("wavelet_embed_image/{}", mode.name()),
                {
                    let (c, w, b) = (c.clone(), w.clone(), b.clone());
                    move |x: &Tensor<f64>| {
                        let x3 = x.reshape(&[1, 8, 8]).unwrap();
                        wavelet_embed_image(&x3, &c, &w, &b).unwrap().0.tokens
                    }
                },
                {
                    let (c, w, b) = (c.clone(), w.clone(), b.clone());
                    move |x: &Tensor<f64>, g: &Tensor<f64>| {
                        let x3 = x.reshape(&[1, 8, 8]).unwrap();
                        let (_, cache) = wavelet_embed_image(&x3, &c, &w, &b).unwrap();
                        embed_backward(g, &cache, &c, &w, None, true)
                            .unwrap()
                            .input
                            .unwrap()
                            .reshape(&[64])
                            .unwrap()
                    }
                },
            );
            let x = Rng::new(3, 3).tensor_uniform::<f64>(&[64], 0.0, 1.0);
            let err = check_gradient(&op, &x, 1e-5).unwrap();
            assert!(err <= 1e-5, "{} gradient error {err}", mode.name());
        }
    }

    #[test]
    fn patchify_roundtrip() {
        let x = Rng::new(8, 8).tensor_uniform::<f64>(&[2, 8, 8], -1.0, 1.0);
        let p = patchify_2d(&x, 4).unwrap();
        let back = unpatchify_2d(&p, x.shape(), 4).unwrap();
        assert_eq!(back, x);
        let v = Rng::new(9, 9).tensor_uniform::<f64>(&[2, 4, 8, 8], -1.0, 1.0);
        let pv = patchify_3d(&v, 2, 4).unwrap();
        let backv = unpatchify_3d(&pv, v.shape(), 2, 4).unwrap();
        assert_eq!(backv, v);
    }
}
