//! Filter banks and single-level discrete wavelet transforms.
//!
//! The transform along one axis is a strided (⌈k/2⌉ × k) analysis matrix
//! applied as a mode product, so filtering and downsampling happen in a
//! single multiply. 2D/3D transforms chain mode products along distinct
//! axes; synthesis applies the transposed matrices and sums over bands.

use crate::tensor::{elem, mode_product, transpose2d, Element, Tensor};
use crate::{Error, Result};

/// How filter taps that reach past the signal edge are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// Taps past the edge are truncated (dropped).
    Zero,
    /// Taps wrap around modulo the axis length.
    Periodic,
}

impl Boundary {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Boundary::Zero),
            "periodic" => Ok(Boundary::Periodic),
            other => Err(Error::config(format!("unknown boundary mode `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Boundary::Zero => "zero",
            Boundary::Periodic => "periodic",
        }
    }
}

/// Which half of the filter bank a matrix realizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    Low,
    High,
}

/// Quadrature-mirror rule deriving a high-pass filter from a low-pass one:
/// `h_t = (-1)^t * l_{n-1-t}` (0-indexed). For orthonormal families the
/// resulting pair is orthogonal.
pub fn qmf_highpass(lowpass: &[f64]) -> Vec<f64> {
    let n = lowpass.len();
    (0..n)
        .map(|t| {
            let sign = if t % 2 == 0 { 1.0 } else { -1.0 };
            sign * lowpass[n - 1 - t]
        })
        .collect()
}

const SQRT_HALF: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// A named low/high filter coefficient pair.
#[derive(Debug, Clone)]
pub struct WaveletFilter<T> {
    pub name: String,
    pub lowpass: Vec<T>,
    pub highpass: Vec<T>,
}

impl<T: Element> WaveletFilter<T> {
    /// Builds a filter from low-pass coefficients, deriving the high-pass
    /// half by the quadrature-mirror rule.
    pub fn from_lowpass(name: impl Into<String>, lowpass: &[f64]) -> Result<Self> {
        if lowpass.is_empty() {
            return Err(Error::contract("empty lowpass filter"));
        }
        let highpass = qmf_highpass(lowpass);
        Ok(WaveletFilter {
            name: name.into(),
            lowpass: lowpass.iter().map(|&v| elem(v)).collect(),
            highpass: highpass.iter().map(|&v| elem(v)).collect(),
        })
    }

    pub fn haar() -> Self {
        WaveletFilter::from_lowpass("haar", &[SQRT_HALF, SQRT_HALF]).unwrap()
    }

    /// Daubechies 4-tap filter.
    pub fn db2() -> Self {
        let s3 = 3.0f64.sqrt();
        let d = 4.0 * 2.0f64.sqrt();
        WaveletFilter::from_lowpass(
            "db2",
            &[(1.0 + s3) / d, (3.0 + s3) / d, (3.0 - s3) / d, (1.0 - s3) / d],
        )
        .unwrap()
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "haar" => Ok(WaveletFilter::haar()),
            "db2" => Ok(WaveletFilter::db2()),
            other => Err(Error::config(format!("unknown wavelet filter `{other}`"))),
        }
    }

    pub fn taps(&self) -> usize {
        self.lowpass.len()
    }

    pub fn coeffs(&self, band: Band) -> &[T] {
        match band {
            Band::Low => &self.lowpass,
            Band::High => &self.highpass,
        }
    }

    /// Analysis matrix for one band along an axis of extent `k`.
    pub fn analysis_matrix(&self, band: Band, k: usize, boundary: Boundary) -> Result<AnalysisMatrix<T>> {
        construct_matrix(self.coeffs(band), k, boundary, band, &self.name)
    }
}

/// The strided (⌈k/2⌉ × k) transform matrix for one band of one axis.
#[derive(Debug, Clone)]
pub struct AnalysisMatrix<T> {
    pub matrix: Tensor<T>,
    pub source_filter: String,
    pub band: Band,
    pub boundary: Boundary,
}

/// Builds the strided analysis matrix: row `i` carries the filter taps at
/// columns `j = 2i + t` for tap index `t` in `0..n`. Zero boundary truncates
/// taps with `j >= k`; periodic boundary accumulates them at `(2i + t) mod k`.
pub fn construct_matrix<T: Element>(
    filter: &[T],
    k: usize,
    boundary: Boundary,
    band: Band,
    source: &str,
) -> Result<AnalysisMatrix<T>> {
    if k == 0 {
        return Err(Error::shape("construct_matrix: axis length 0"));
    }
    if filter.is_empty() {
        return Err(Error::contract("construct_matrix: empty filter"));
    }
    let rows = k.div_ceil(2);
    let mut m = Tensor::zeros(&[rows, k]);
    for i in 0..rows {
        for (t, &f) in filter.iter().enumerate() {
            let j = 2 * i + t;
            match boundary {
                Boundary::Zero => {
                    if j < k {
                        m.data_mut()[i * k + j] = f;
                    }
                }
                Boundary::Periodic => {
                    let jj = j % k;
                    m.data_mut()[i * k + jj] = m.data_mut()[i * k + jj] + f;
                }
            }
        }
    }
    Ok(AnalysisMatrix {
        matrix: m,
        source_filter: source.to_string(),
        band,
        boundary,
    })
}

/// One level of sub-bands produced by transforming `axes` of some tensor.
/// Band index bits follow the axes order, most significant first, with 0 =
/// low; e.g. for 3 axes index 0 is LLL, index 1 is LLH, index 7 is HHH.
#[derive(Debug, Clone)]
pub struct SubbandSet<T> {
    pub axes: Vec<usize>,
    /// Axis extents of the original tensor along `axes`, in the same order.
    pub original_extents: Vec<usize>,
    pub bands: Vec<Tensor<T>>,
}

impl<T: Element> SubbandSet<T> {
    pub fn band_count(&self) -> usize {
        self.bands.len()
    }

    /// The all-low band (LL… / index 0).
    pub fn low(&self) -> &Tensor<T> {
        &self.bands[0]
    }

    pub fn name_of(&self, index: usize) -> String {
        let d = self.axes.len();
        (0..d)
            .map(|pos| {
                if index >> (d - 1 - pos) & 1 == 1 {
                    'H'
                } else {
                    'L'
                }
            })
            .collect()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        let d = self.axes.len();
        if name.len() != d {
            return None;
        }
        let mut idx = 0usize;
        for (pos, ch) in name.chars().enumerate() {
            match ch {
                'L' => {}
                'H' => idx |= 1 << (d - 1 - pos),
                _ => return None,
            }
        }
        self.bands.get(idx)
    }

    fn validate(&self) -> Result<()> {
        let expect = 1usize << self.axes.len();
        if self.bands.len() != expect {
            return Err(Error::contract(format!(
                "subband set has {} bands for {} axes",
                self.bands.len(),
                self.axes.len()
            )));
        }
        let shape = self.bands[0].shape();
        for b in &self.bands {
            if b.shape() != shape {
                return Err(Error::contract("subband shapes differ"));
            }
        }
        Ok(())
    }
}

fn check_distinct_axes(axes: &[usize], rank: usize) -> Result<()> {
    for (i, &a) in axes.iter().enumerate() {
        if a >= rank {
            return Err(Error::shape(format!("axis {a} out of range for rank {rank}")));
        }
        if axes[i + 1..].contains(&a) {
            return Err(Error::contract(format!("duplicate transform axis {a}")));
        }
    }
    Ok(())
}

/// Single-level DWT along an arbitrary set of distinct axes.
pub fn dwt<T: Element>(
    x: &Tensor<T>,
    axes: &[usize],
    filter: &WaveletFilter<T>,
    boundary: Boundary,
) -> Result<SubbandSet<T>> {
    check_distinct_axes(axes, x.rank())?;
    let original_extents: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    // Precompute one matrix pair per axis.
    let mut mats = Vec::with_capacity(axes.len());
    for &a in axes {
        let k = x.shape()[a];
        mats.push((
            filter.analysis_matrix(Band::Low, k, boundary)?,
            filter.analysis_matrix(Band::High, k, boundary)?,
        ));
    }
    let d = axes.len();
    let mut bands = Vec::with_capacity(1 << d);
    for idx in 0..1usize << d {
        let mut cur = x.clone();
        for (pos, &a) in axes.iter().enumerate() {
            let high = idx >> (d - 1 - pos) & 1 == 1;
            let m = if high { &mats[pos].1 } else { &mats[pos].0 };
            cur = mode_product(&cur, &m.matrix, a)?;
        }
        bands.push(cur);
    }
    Ok(SubbandSet {
        axes: axes.to_vec(),
        original_extents,
        bands,
    })
}

/// 1D DWT along one axis; yields {L, H}.
pub fn dwt1d<T: Element>(
    x: &Tensor<T>,
    axis: usize,
    filter: &WaveletFilter<T>,
    boundary: Boundary,
) -> Result<SubbandSet<T>> {
    dwt(x, &[axis], filter, boundary)
}

/// 2D DWT along two distinct axes; yields {LL, LH, HL, HH}.
pub fn dwt2d<T: Element>(
    x: &Tensor<T>,
    axes: (usize, usize),
    filter: &WaveletFilter<T>,
    boundary: Boundary,
) -> Result<SubbandSet<T>> {
    dwt(x, &[axes.0, axes.1], filter, boundary)
}

/// 3D DWT along three distinct axes; yields the eight bands LLL..HHH.
pub fn dwt3d<T: Element>(
    x: &Tensor<T>,
    axes: (usize, usize, usize),
    filter: &WaveletFilter<T>,
    boundary: Boundary,
) -> Result<SubbandSet<T>> {
    dwt(x, &[axes.0, axes.1, axes.2], filter, boundary)
}

/// Inverse DWT: synthesis via transposed analysis matrices summed over all
/// bands. Exact reconstruction holds for orthonormal filters on even extents
/// (Haar reconstructs under both boundary modes).
pub fn idwt<T: Element>(
    set: &SubbandSet<T>,
    filter: &WaveletFilter<T>,
    boundary: Boundary,
) -> Result<Tensor<T>> {
    set.validate()?;
    let d = set.axes.len();
    // Synthesis matrices are the transposed analysis matrices at the
    // original extents.
    let mut mats = Vec::with_capacity(d);
    for &k in &set.original_extents {
        let low = filter.analysis_matrix(Band::Low, k, boundary)?;
        let high = filter.analysis_matrix(Band::High, k, boundary)?;
        mats.push((transpose2d(&low.matrix)?, transpose2d(&high.matrix)?));
    }
    let mut out: Option<Tensor<T>> = None;
    for (idx, band) in set.bands.iter().enumerate() {
        let mut cur = band.clone();
        for (pos, &a) in set.axes.iter().enumerate() {
            let high = idx >> (d - 1 - pos) & 1 == 1;
            let m = if high { &mats[pos].1 } else { &mats[pos].0 };
            cur = mode_product(&cur, m, a)?;
        }
        match &mut out {
            None => out = Some(cur),
            Some(acc) => acc.add_assign(&cur)?,
        }
    }
    Ok(out.expect("non-empty band set"))
}

/// The gradient of `dwt` w.r.t. its input given per-band upstream gradients:
/// structurally identical to `idwt` because each analysis matrix backward is
/// its transpose.
pub fn dwt_backward<T: Element>(
    grads: &SubbandSet<T>,
    filter: &WaveletFilter<T>,
    boundary: Boundary,
) -> Result<Tensor<T>> {
    idwt(grads, filter, boundary)
}
