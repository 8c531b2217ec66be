//! Attention variants: plain scaled dot-product, low-pass transform of the
//! query/key features, and the inverse-transform ablation.
//!
//! In the low-pass variant the queries and keys pass through a 1D-DWT along
//! the feature axis and only the low band enters the logits; values bypass
//! the transform entirely, so the output keeps full width while the logit
//! stage runs on half the feature dimension. The ablation variant instead
//! smooths Q and K along the sequence axis (transform, drop the high band,
//! transform back) and then runs plain attention — the path that needs the
//! inverse transform the other variants avoid.

use crate::tensor::{
    elem, gelu, gelu_backward, layer_norm, layer_norm_backward, linear, linear_backward, matmul,
    matmul_nt, matmul_tn, mode_product, softmax, softmax_backward, transpose2d, Element,
    LayerNormCache, Tensor,
};
use crate::wavelet::{Band, Boundary, WaveletFilter};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionVariant {
    Plain,
    /// Low-pass DWT of Q and K along the feature axis; V untouched.
    DwtLowpass,
    /// Sequence-axis DWT of Q and K, high band zeroed, inverse transform,
    /// then plain attention.
    IdwtAblation,
    /// The ablation's smoothing followed by the low-pass logit stage.
    IdwtLowpass,
}

impl AttentionVariant {
    pub fn name(self) -> &'static str {
        match self {
            AttentionVariant::Plain => "plain",
            AttentionVariant::DwtLowpass => "dwt-lowpass",
            AttentionVariant::IdwtAblation => "idwt-ablation",
            AttentionVariant::IdwtLowpass => "idwt-lowpass",
        }
    }

    fn uses_lowpass_logits(self) -> bool {
        matches!(self, AttentionVariant::DwtLowpass | AttentionVariant::IdwtLowpass)
    }

    fn uses_smoothing(self) -> bool {
        matches!(self, AttentionVariant::IdwtAblation | AttentionVariant::IdwtLowpass)
    }
}

/// Denominator convention for the logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleMode {
    /// 1/sqrt(d_k) regardless of the low-pass width reduction.
    Paper,
    /// 1/sqrt(ceil(d_k / 2)), matching the reduced logit width.
    Reduced,
}

impl ScaleMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(ScaleMode::Paper),
            "reduced" => Ok(ScaleMode::Reduced),
            other => Err(Error::config(format!("unknown scale mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttentionConfig {
    pub heads: usize,
    pub head_dim: usize,
    pub variant: AttentionVariant,
    pub scale_mode: ScaleMode,
    pub filter: String,
    /// Test hook: retain the high band in the ablation's smoothing, turning
    /// it into perfect reconstruction (and therefore plain attention).
    pub idwt_retain_high: bool,
}

impl AttentionConfig {
    pub fn new(heads: usize, head_dim: usize, variant: AttentionVariant) -> Self {
        AttentionConfig {
            heads,
            head_dim,
            variant,
            scale_mode: ScaleMode::Paper,
            filter: "haar".into(),
            idwt_retain_high: false,
        }
    }

    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 {
            return Err(Error::config("heads and head_dim must be positive"));
        }
        if self.variant != AttentionVariant::Plain {
            if self.head_dim < 2 {
                return Err(Error::config("dwt attention variants need head_dim >= 2"));
            }
            if self.head_dim % 2 != 0 {
                return Err(Error::config(format!(
                    "dwt attention variants need even head_dim, got {}",
                    self.head_dim
                )));
            }
        }
        WaveletFilter::<f64>::by_name(&self.filter)?;
        Ok(())
    }

    fn inv_scale<T: Element>(&self) -> T {
        let d = match (self.variant.uses_lowpass_logits(), self.scale_mode) {
            (true, ScaleMode::Reduced) => self.head_dim.div_ceil(2),
            _ => self.head_dim,
        };
        elem::<T>(1.0 / (d as f64).sqrt())
    }
}

/// Low-pass analysis along the feature axis: (n, d) -> (n, ceil(d/2)).
pub fn dwt_lowpass_features<T: Element>(m: &Tensor<T>, filter: &WaveletFilter<T>) -> Result<Tensor<T>> {
    if m.rank() != 2 {
        return Err(Error::shape(format!(
            "dwt_lowpass_features expects 2-D, got {:?}",
            m.shape()
        )));
    }
    let d = m.cols();
    let low = filter.analysis_matrix(Band::Low, d, Boundary::Zero)?;
    mode_product(m, &low.matrix, 1)
}

/// VJP of [`dwt_lowpass_features`] for original feature width `d`.
pub fn dwt_lowpass_features_backward<T: Element>(
    grad: &Tensor<T>,
    filter: &WaveletFilter<T>,
    d: usize,
) -> Result<Tensor<T>> {
    let low = filter.analysis_matrix(Band::Low, d, Boundary::Zero)?;
    mode_product(grad, &transpose2d(&low.matrix)?, 1)
}

/// Sequence-axis smoothing projector `P = L^T L` (plus `H^T H` when the high
/// band is retained); `P @ Q` is "transform, drop (or keep) high, transform
/// back" in one matrix.
fn smoothing_projector<T: Element>(
    n: usize,
    filter: &WaveletFilter<T>,
    retain_high: bool,
) -> Result<Tensor<T>> {
    let low = filter.analysis_matrix(Band::Low, n, Boundary::Zero)?.matrix;
    let mut p = matmul_tn(&low, &low)?;
    if retain_high {
        let high = filter.analysis_matrix(Band::High, n, Boundary::Zero)?.matrix;
        p.add_assign(&matmul_tn(&high, &high)?)?;
    }
    Ok(p)
}

/// Per-head attention cache for the backward pass.
#[derive(Debug, Clone)]
pub struct AttnCache<T> {
    q_eff: Tensor<T>,
    k_eff: Tensor<T>,
    v: Tensor<T>,
    ql: Option<Tensor<T>>,
    kl: Option<Tensor<T>>,
    smooth: Option<Tensor<T>>,
    /// Softmax output (n, n).
    pub weights: Tensor<T>,
    inv_scale: T,
    /// Multiply-adds spent in the logit matmul.
    pub logit_macs: u64,
}

/// Single-head attention. Returns the (n, d_k) output and the cache.
pub fn attention_scores<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &AttentionConfig,
) -> Result<(Tensor<T>, AttnCache<T>)> {
    if q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::contract(format!(
            "attention expects equal (n, d_k) Q/K/V, got {:?} {:?} {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let n = q.rows();
    let filter = WaveletFilter::<T>::by_name(&cfg.filter)?;
    let (q_eff, k_eff, smooth) = if cfg.variant.uses_smoothing() {
        let p = smoothing_projector(n, &filter, cfg.idwt_retain_high)?;
        (matmul(&p, q)?, matmul(&p, k)?, Some(p))
    } else {
        (q.clone(), k.clone(), None)
    };
    let inv_scale = cfg.inv_scale::<T>();
    let (logits, ql, kl) = if cfg.variant.uses_lowpass_logits() {
        let ql = dwt_lowpass_features(&q_eff, &filter)?;
        let kl = dwt_lowpass_features(&k_eff, &filter)?;
        (matmul_nt(&ql, &kl)?, Some(ql), Some(kl))
    } else {
        (matmul_nt(&q_eff, &k_eff)?, None, None)
    };
    let inner = if let Some(ql) = &ql { ql.cols() } else { q.cols() };
    let logit_macs = (n * n * inner) as u64;
    let weights = softmax(&logits.scale(inv_scale), 1)?;
    let out = matmul(&weights, v)?;
    Ok((
        out,
        AttnCache {
            q_eff,
            k_eff,
            v: v.clone(),
            ql,
            kl,
            smooth,
            weights,
            inv_scale,
            logit_macs,
        },
    ))
}

/// VJP of [`attention_scores`]; returns (dq, dk, dv).
pub fn attention_backward<T: Element>(
    cache: &AttnCache<T>,
    cfg: &AttentionConfig,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let filter = WaveletFilter::<T>::by_name(&cfg.filter)?;
    let d_weights = matmul_nt(grad_out, &cache.v)?;
    let dv = matmul_tn(&cache.weights, grad_out)?;
    let d_logits = softmax_backward(&cache.weights, &d_weights, 1)?.scale(cache.inv_scale);
    let (dq_eff, dk_eff) = if let (Some(ql), Some(kl)) = (&cache.ql, &cache.kl) {
        let dql = matmul(&d_logits, kl)?;
        let dkl = matmul_tn(&d_logits, ql)?;
        let d = cache.q_eff.cols();
        (
            dwt_lowpass_features_backward(&dql, &filter, d)?,
            dwt_lowpass_features_backward(&dkl, &filter, d)?,
        )
    } else {
        (
            matmul(&d_logits, &cache.k_eff)?,
            matmul_tn(&d_logits, &cache.q_eff)?,
        )
    };
    let (dq, dk) = if let Some(p) = &cache.smooth {
        let pt = transpose2d(p)?;
        (matmul(&pt, &dq_eff)?, matmul(&pt, &dk_eff)?)
    } else {
        (dq_eff, dk_eff)
    };
    Ok((dq, dk, dv))
}

/// Weight views for one transformer block; tensors live in the model's
/// parameter store.
pub struct BlockWeights<'a, T> {
    pub ln1_g: &'a Tensor<T>,
    pub ln1_b: &'a Tensor<T>,
    pub wq: &'a Tensor<T>,
    pub bq: &'a Tensor<T>,
    pub wk: &'a Tensor<T>,
    pub bk: &'a Tensor<T>,
    pub wv: &'a Tensor<T>,
    pub bv: &'a Tensor<T>,
    pub wo: &'a Tensor<T>,
    pub bo: &'a Tensor<T>,
    pub ln2_g: &'a Tensor<T>,
    pub ln2_b: &'a Tensor<T>,
    pub w1: &'a Tensor<T>,
    pub b1: &'a Tensor<T>,
    pub w2: &'a Tensor<T>,
    pub b2: &'a Tensor<T>,
}

/// Owned gradients matching [`BlockWeights`] field for field.
#[derive(Debug, Clone)]
pub struct BlockGrads<T> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

fn slice_cols<T: Element>(x: &Tensor<T>, lo: usize, hi: usize) -> Tensor<T> {
    let n = x.rows();
    let mut out = Tensor::zeros(&[n, hi - lo]);
    for r in 0..n {
        out.row_mut(r).copy_from_slice(&x.row(r)[lo..hi]);
    }
    out
}

fn scatter_cols<T: Element>(dst: &mut Tensor<T>, src: &Tensor<T>, lo: usize) {
    for r in 0..src.rows() {
        let w = src.cols();
        dst.row_mut(r)[lo..lo + w].copy_from_slice(src.row(r));
    }
}

#[derive(Debug, Clone)]
pub struct MhaCache<T> {
    x: Tensor<T>,
    heads: Vec<AttnCache<T>>,
    concat: Tensor<T>,
}

impl<T> MhaCache<T> {
    /// Multiply-adds spent in the logit stage, summed over heads.
    pub fn logit_macs(&self) -> u64 {
        self.heads.iter().map(|h| h.logit_macs).sum()
    }
}

/// Multi-head attention over (n, model_dim) tokens.
pub fn multi_head_attention<T: Element>(
    x: &Tensor<T>,
    wq: &Tensor<T>,
    bq: &Tensor<T>,
    wk: &Tensor<T>,
    bk: &Tensor<T>,
    wv: &Tensor<T>,
    bv: &Tensor<T>,
    wo: &Tensor<T>,
    bo: &Tensor<T>,
    cfg: &AttentionConfig,
) -> Result<(Tensor<T>, MhaCache<T>)> {
    let d = cfg.model_dim();
    if x.rank() != 2 || x.cols() != d {
        return Err(Error::contract(format!(
            "multi_head_attention: tokens {:?} vs model dim {d}",
            x.shape()
        )));
    }
    let q_full = linear(x, wq, bq)?;
    let k_full = linear(x, wk, bk)?;
    let v_full = linear(x, wv, bv)?;
    let n = x.rows();
    let dk = cfg.head_dim;
    let mut concat = Tensor::zeros(&[n, d]);
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (lo, hi) = (h * dk, (h + 1) * dk);
        let (out_h, cache_h) = attention_scores(
            &slice_cols(&q_full, lo, hi),
            &slice_cols(&k_full, lo, hi),
            &slice_cols(&v_full, lo, hi),
            cfg,
        )?;
        scatter_cols(&mut concat, &out_h, lo);
        heads.push(cache_h);
    }
    let out = linear(&concat, wo, bo)?;
    Ok((
        out,
        MhaCache {
            x: x.clone(),
            heads,
            concat,
        },
    ))
}

pub struct MhaGrads<T> {
    pub x: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
}

pub fn multi_head_attention_backward<T: Element>(
    cache: &MhaCache<T>,
    wq: &Tensor<T>,
    wk: &Tensor<T>,
    wv: &Tensor<T>,
    wo: &Tensor<T>,
    cfg: &AttentionConfig,
    grad_out: &Tensor<T>,
) -> Result<MhaGrads<T>> {
    let (d_concat, dwo, dbo) = linear_backward(&cache.concat, wo, grad_out)?;
    let n = cache.x.rows();
    let d = cfg.model_dim();
    let dk = cfg.head_dim;
    let mut dq_full = Tensor::zeros(&[n, d]);
    let mut dk_full = Tensor::zeros(&[n, d]);
    let mut dv_full = Tensor::zeros(&[n, d]);
    for (h, head_cache) in cache.heads.iter().enumerate() {
        let (lo, hi) = (h * dk, (h + 1) * dk);
        let g = slice_cols(&d_concat, lo, hi);
        let (dq, dkh, dv) = attention_backward(head_cache, cfg, &g)?;
        scatter_cols(&mut dq_full, &dq, lo);
        scatter_cols(&mut dk_full, &dkh, lo);
        scatter_cols(&mut dv_full, &dv, lo);
    }
    let (dx_q, dwq, dbq) = linear_backward(&cache.x, wq, &dq_full)?;
    let (dx_k, dwk, dbk) = linear_backward(&cache.x, wk, &dk_full)?;
    let (dx_v, dwv, dbv) = linear_backward(&cache.x, wv, &dv_full)?;
    let mut dx = dx_q;
    dx.add_assign(&dx_k)?;
    dx.add_assign(&dx_v)?;
    Ok(MhaGrads {
        x: dx,
        wq: dwq,
        bq: dbq,
        wk: dwk,
        bk: dbk,
        wv: dwv,
        bv: dbv,
        wo: dwo,
        bo: dbo,
    })
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    x: Tensor<T>,
    ln1: LayerNormCache<T>,
    mha: MhaCache<T>,
    h1: Tensor<T>,
    ln2: LayerNormCache<T>,
    xn2: Tensor<T>,
    pre_act: Tensor<T>,
}

impl<T> BlockCache<T> {
    pub fn logit_macs(&self) -> u64 {
        self.mha.logit_macs()
    }
}

/// Pre-norm transformer block: `x + MHA(LN(x))`, then `+ MLP(LN(.))` with a
/// 4x hidden GELU MLP.
pub fn transformer_block<T: Element>(
    x: &Tensor<T>,
    w: &BlockWeights<'_, T>,
    cfg: &AttentionConfig,
) -> Result<(Tensor<T>, BlockCache<T>)> {
    let (xn1, ln1) = layer_norm(x, w.ln1_g, w.ln1_b)?;
    let (attn, mha) = multi_head_attention(&xn1, w.wq, w.bq, w.wk, w.bk, w.wv, w.bv, w.wo, w.bo, cfg)?;
    let h1 = x.add(&attn)?;
    let (xn2, ln2) = layer_norm(&h1, w.ln2_g, w.ln2_b)?;
    let pre_act = linear(&xn2, w.w1, w.b1)?;
    let act = gelu(&pre_act);
    let mlp = linear(&act, w.w2, w.b2)?;
    let out = h1.add(&mlp)?;
    Ok((
        out,
        BlockCache {
            x: x.clone(),
            ln1,
            mha,
            h1,
            ln2,
            xn2,
            pre_act,
        },
    ))
}

/// VJP of [`transformer_block`]; returns (dx, weight grads).
pub fn transformer_block_backward<T: Element>(
    cache: &BlockCache<T>,
    w: &BlockWeights<'_, T>,
    cfg: &AttentionConfig,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, BlockGrads<T>)> {
    // MLP branch.
    let act = gelu(&cache.pre_act);
    let (d_act, dw2, db2) = linear_backward(&act, w.w2, grad_out)?;
    let d_pre = gelu_backward(&cache.pre_act, &d_act)?;
    let (d_xn2, dw1, db1) = linear_backward(&cache.xn2, w.w1, &d_pre)?;
    let (d_h1_ln, dln2_g, dln2_b) = layer_norm_backward(&cache.h1, w.ln2_g, &cache.ln2, &d_xn2)?;
    let mut d_h1 = grad_out.clone();
    d_h1.add_assign(&d_h1_ln)?;
    // Attention branch.
    let mha_grads = multi_head_attention_backward(&cache.mha, w.wq, w.wk, w.wv, w.wo, cfg, &d_h1)?;
    let (d_x_ln, dln1_g, dln1_b) = layer_norm_backward(&cache.x, w.ln1_g, &cache.ln1, &mha_grads.x)?;
    let mut dx = d_h1;
    dx.add_assign(&d_x_ln)?;
    Ok((
        dx,
        BlockGrads {
            ln1_g: dln1_g,
            ln1_b: dln1_b,
            wq: mha_grads.wq,
            bq: mha_grads.bq,
            wk: mha_grads.wk,
            bk: mha_grads.bk,
            wv: mha_grads.wv,
            bv: mha_grads.bv,
            wo: mha_grads.wo,
            bo: mha_grads.bo,
            ln2_g: dln2_g,
            ln2_b: dln2_b,
            w1: dw1,
            b1: db1,
            w2: dw2,
            b2: db2,
        },
    ))
}
