//! Variance-stabilizing transforms and expectation-matched bias correction.
//!
//! The generalized Anscombe transform maps Poisson-Gaussian noise to
//! approximately unit-variance Gaussian noise. Being nonlinear, it biases
//! expectations; the bias function e(chi) = E[f(z) | chi] - f(chi) is
//! evaluated by a truncated Poisson mixture with Gauss-Hermite quadrature
//! in low-signal regions and a second-order delta-method closed form in
//! high-signal regions, then cached in a 2D lookup table over
//! (signal, read noise). The expectation-matched forward transform
//! subtracts the bias evaluated at the *noisy* value before denoising, so
//! the plain algebraic inverse applies afterwards.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, YondError};
use crate::noise::NoiseParams;
use crate::numeric::{gauss_hermite, gauss_legendre, ln_gamma};
use crate::raw::{BayerImage, NormalizedImage};

/// Signal threshold between the quadrature and closed-form bias branches.
pub const CHI_LO: f64 = 50.0;

/// Number of Gauss-Hermite nodes for the Gaussian component integrals.
const GH_NODES: usize = 61;

/// On-disk table format version.
pub const LUT_FORMAT_VERSION: u32 = 1;

/// Generalized Anscombe transform of a normalized value z = (y - mu)/alpha
/// with read noise sigma_hat = sigma/alpha:
/// f(z) = 2 sqrt(z + 3/8 + sigma_hat^2), clamped to 0 at the domain edge.
#[inline]
pub fn gat(z: f64, sigma_hat: f64) -> f64 {
    let c = 0.375 + sigma_hat * sigma_hat;
    if z > -c {
        2.0 * (z + c).sqrt()
    } else {
        0.0
    }
}

/// Algebraic inverse of [`gat`]: z = w^2/4 - 3/8 - sigma_hat^2.
pub fn iat(w: f64, sigma_hat: f64) -> Result<f64> {
    if !w.is_finite() || w < 0.0 {
        return Err(YondError::Domain(format!(
            "inverse transform requires w >= 0, got {w}"
        )));
    }
    Ok(iat_unchecked(w, sigma_hat))
}

#[inline]
fn iat_unchecked(w: f64, sigma_hat: f64) -> f64 {
    0.25 * w * w - 0.375 - sigma_hat * sigma_hat
}

fn gh_rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_hermite(GH_NODES))
}

fn gl_rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(64))
}

/// E[f(z)] for one Gaussian mixture component z ~ N(k, sigma_hat^2), with
/// f the clamped transform and c = 3/8 + sigma_hat^2.
///
/// When the clamp edge z = -c sits at least 8 standard deviations below
/// the component mean, the integrand is smooth across the Gauss-Hermite
/// node span and the 61-node rule applies directly. Closer to the edge the
/// square-root kink falls inside the node span and GH oscillates, so the
/// integral is taken in the substituted variable z = -c + s^2, where it is
/// smooth, with a 64-node Gauss-Legendre rule.
fn gaussian_component_mean(k: f64, sigma_hat: f64, c: f64) -> f64 {
    let a = k + c;
    if a >= 8.0 * sigma_hat {
        let (nodes, weights) = gh_rule();
        let s2s = std::f64::consts::SQRT_2 * sigma_hat;
        let mut acc = 0.0;
        for (t, w) in nodes.iter().zip(weights) {
            acc += w * 2.0 * (k + s2s * t + c).max(0.0).sqrt();
        }
        acc / std::f64::consts::PI.sqrt()
    } else {
        // 4 / (sigma sqrt(2 pi)) * integral of s^2 exp(-(s^2-a)^2 / (2 sigma^2)).
        let (nodes, weights) = gl_rule();
        let s_max = (a + 10.0 * sigma_hat).sqrt();
        let half = 0.5 * s_max;
        let mut acc = 0.0;
        for (t, w) in nodes.iter().zip(weights) {
            let s = half * (t + 1.0);
            let d = (s * s - a) / sigma_hat;
            acc += w * s * s * (-0.5 * d * d).exp();
        }
        acc * half * 4.0 / (sigma_hat * (2.0 * std::f64::consts::PI).sqrt())
    }
}

fn check_bias_args(chi: f64, sigma_hat: f64) -> Result<()> {
    if !chi.is_finite() || chi < 0.0 {
        return Err(YondError::InvalidParameter(format!(
            "bias function needs chi >= 0, got {chi}"
        )));
    }
    if !sigma_hat.is_finite() || sigma_hat <= 0.0 {
        return Err(YondError::InvalidParameter(format!(
            "bias function needs sigma_hat > 0, got {sigma_hat}"
        )));
    }
    Ok(())
}

/// Low-signal branch: E[f(z) | chi] - f(chi) by truncated Poisson mixture.
///
/// The Poisson sum runs over k within 8 standard deviations of chi (plus a
/// constant margin), and each Gaussian component integral uses the
/// Gauss-Hermite rule with the substitution z = k + sqrt(2) sigma_hat t.
pub fn bias_quadrature(chi: f64, sigma_hat: f64) -> Result<f64> {
    check_bias_args(chi, sigma_hat)?;
    let c = 0.375 + sigma_hat * sigma_hat;

    let spread = 8.0 * (chi + 1.0).sqrt();
    let k_lo = (chi - spread).floor().max(0.0) as u64;
    let k_hi = (chi + spread).ceil() as u64 + 10;

    // pmf(k_lo) from log form, then the multiplicative recurrence.
    let mut pmf = if chi == 0.0 {
        if k_lo == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        (k_lo as f64 * chi.ln() - chi - ln_gamma(k_lo as f64 + 1.0)).exp()
    };

    let mut expectation = 0.0;
    for k in k_lo..=k_hi {
        if pmf > 0.0 {
            expectation += pmf * gaussian_component_mean(k as f64, sigma_hat, c);
        }
        if chi == 0.0 {
            break;
        }
        pmf *= chi / (k + 1) as f64;
    }
    Ok(expectation - gat(chi, sigma_hat))
}

/// High-signal branch: second-order delta method,
/// e(chi) ~ -(chi + sigma_hat^2) / (4 (chi + 3/8 + sigma_hat^2)^{3/2}).
pub fn bias_closed_form(chi: f64, sigma_hat: f64) -> f64 {
    let s2 = sigma_hat * sigma_hat;
    let c = chi + 0.375 + s2;
    -(chi + s2) / (4.0 * c * c.sqrt())
}

/// VST bias e(chi) = E[f(z) | chi] - f(chi): quadrature below
/// [`CHI_LO`], closed form above.
pub fn bias_function(chi: f64, sigma_hat: f64) -> Result<f64> {
    check_bias_args(chi, sigma_hat)?;
    if chi < CHI_LO {
        bias_quadrature(chi, sigma_hat)
    } else {
        Ok(bias_closed_form(chi, sigma_hat))
    }
}

/// Logarithmically spaced grid descriptor. The log-bounds are the
/// canonical representation so disk round trips are exact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogGrid {
    pub count: usize,
    ln_min: f64,
    ln_max: f64,
}

impl LogGrid {
    pub fn new(count: usize, min: f64, max: f64) -> Result<Self> {
        if !(min > 0.0) {
            return Err(YondError::InvalidParameter(format!(
                "log grid needs min > 0, got {min}"
            )));
        }
        Self::from_ln(count, min.ln(), max.ln())
    }

    pub fn from_ln(count: usize, ln_min: f64, ln_max: f64) -> Result<Self> {
        if count < 2 || !ln_min.is_finite() || !ln_max.is_finite() || ln_max <= ln_min {
            return Err(YondError::InvalidParameter(format!(
                "log grid needs count >= 2 and monotone bounds, got {count} over ln [{ln_min}, {ln_max}]"
            )));
        }
        Ok(Self {
            count,
            ln_min,
            ln_max,
        })
    }

    pub fn min(&self) -> f64 {
        self.ln_min.exp()
    }

    pub fn max(&self) -> f64 {
        self.ln_max.exp()
    }

    pub fn ln_min(&self) -> f64 {
        self.ln_min
    }

    pub fn ln_max(&self) -> f64 {
        self.ln_max
    }

    #[inline]
    fn ln_step(&self) -> f64 {
        (self.ln_max - self.ln_min) / (self.count - 1) as f64
    }

    pub fn value(&self, i: usize) -> f64 {
        (self.ln_min + self.ln_step() * i as f64).exp()
    }

    /// Lower grid index and interpolation fraction for x, clamped to the
    /// grid extent.
    #[inline]
    fn locate(&self, x: f64) -> (usize, f64) {
        if !(x > 0.0) {
            return (0, 0.0);
        }
        let pos = (x.ln() - self.ln_min) / self.ln_step();
        if pos <= 0.0 {
            return (0, 0.0);
        }
        if pos >= (self.count - 1) as f64 {
            return (self.count - 2, 1.0);
        }
        let i = (pos as usize).min(self.count - 2);
        (i, (pos - i as f64).clamp(0.0, 1.0))
    }
}

/// Default signal (chi) grid: 512 points over [1e-2, 1e4] electrons.
pub fn default_signal_grid() -> LogGrid {
    LogGrid::new(512, 1e-2, 1e4).expect("static grid")
}

/// Default read-noise (sigma_hat) grid: 64 points over [1e-2, 1e2].
pub fn default_read_noise_grid() -> LogGrid {
    LogGrid::new(64, 1e-2, 1e2).expect("static grid")
}

/// Precomputed bias values over (signal, read noise), bilinear in
/// log-coordinates, clamping to the boundary outside the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasLut {
    pub signal_grid: LogGrid,
    pub read_noise_grid: LogGrid,
    values: Array2<f64>, // [signal index, read-noise index]
}

impl BiasLut {
    /// Evaluate [`bias_function`] at every grid node (parallel over signal
    /// rows).
    pub fn build(signal_grid: LogGrid, read_noise_grid: LogGrid) -> Result<Self> {
        let sigma_values: Vec<f64> = (0..read_noise_grid.count)
            .map(|j| read_noise_grid.value(j))
            .collect();
        let mut values = Array2::zeros((signal_grid.count, read_noise_grid.count));
        let rows: Vec<(usize, Vec<f64>)> = (0..signal_grid.count)
            .into_par_iter()
            .map(|i| {
                let chi = signal_grid.value(i);
                let row: Vec<f64> = sigma_values
                    .iter()
                    .map(|&s| bias_function(chi, s).expect("grid values are in-domain"))
                    .collect();
                (i, row)
            })
            .collect();
        for (i, row) in rows {
            for (j, v) in row.into_iter().enumerate() {
                values[[i, j]] = v;
            }
        }
        Ok(Self {
            signal_grid,
            read_noise_grid,
            values,
        })
    }

    /// Bilinear lookup in log-coordinates; queries outside the grid clamp
    /// to the boundary. Nonpositive chi clamps to the low-signal edge.
    pub fn lookup(&self, chi: f64, sigma_hat: f64) -> f64 {
        let (i, ti) = self.signal_grid.locate(chi);
        let (j, tj) = self.read_noise_grid.locate(sigma_hat);
        let v00 = self.values[[i, j]];
        let v01 = self.values[[i, j + 1]];
        let v10 = self.values[[i + 1, j]];
        let v11 = self.values[[i + 1, j + 1]];
        let a = v00 + (v01 - v00) * tj;
        let b = v10 + (v11 - v10) * tj;
        a + (b - a) * ti
    }

    /// Fix the read-noise coordinate for repeated per-pixel lookups.
    pub fn at_sigma(&self, sigma_hat: f64) -> BiasLutSlice<'_> {
        let (j, tj) = self.read_noise_grid.locate(sigma_hat);
        BiasLutSlice { lut: self, j, tj }
    }

    pub fn value_at(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    /// Serialize: magic `YLUT`, version u32, both grid descriptors
    /// (count u32, ln-min f64, ln-max f64), then row-major (signal-major)
    /// f64 values. Little-endian throughout.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(4 + 4 + 2 * 20 + self.values.len() * 8);
        bytes.extend_from_slice(b"YLUT");
        bytes.extend_from_slice(&LUT_FORMAT_VERSION.to_le_bytes());
        for grid in [&self.signal_grid, &self.read_noise_grid] {
            bytes.extend_from_slice(&(grid.count as u32).to_le_bytes());
            bytes.extend_from_slice(&grid.ln_min().to_le_bytes());
            bytes.extend_from_slice(&grid.ln_max().to_le_bytes());
        }
        for v in self.values.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
            if *off + n > bytes.len() {
                return Err(YondError::Metadata(format!(
                    "lut cache {} truncated",
                    path.display()
                )));
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };
        if take(&mut off, 4)? != b"YLUT" {
            return Err(YondError::Metadata(format!(
                "lut cache {} has bad magic",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
        if version != LUT_FORMAT_VERSION {
            return Err(YondError::Metadata(format!(
                "lut cache version {version}, expected {LUT_FORMAT_VERSION}"
            )));
        }
        let mut grids = [LogGrid::new(2, 1.0, 2.0)?; 2];
        for grid in &mut grids {
            let count = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
            let ln_min = f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
            let ln_max = f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
            *grid = LogGrid::from_ln(count, ln_min, ln_max)?;
        }
        let n = grids[0].count * grids[1].count;
        let data = take(&mut off, n * 8)?;
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Self {
            signal_grid: grids[0],
            read_noise_grid: grids[1],
            values: Array2::from_shape_vec((grids[0].count, grids[1].count), values)
                .expect("length checked"),
        })
    }
}

/// A [`BiasLut`] with the read-noise interpolation fixed.
pub struct BiasLutSlice<'a> {
    lut: &'a BiasLut,
    j: usize,
    tj: f64,
}

impl BiasLutSlice<'_> {
    #[inline]
    pub fn lookup(&self, chi: f64) -> f64 {
        let (i, ti) = self.lut.signal_grid.locate(chi);
        let a = self.lut.values[[i, self.j]]
            + (self.lut.values[[i, self.j + 1]] - self.lut.values[[i, self.j]]) * self.tj;
        let b = self.lut.values[[i + 1, self.j]]
            + (self.lut.values[[i + 1, self.j + 1]] - self.lut.values[[i + 1, self.j]]) * self.tj;
        a + (b - a) * ti
    }
}

fn grid_key(signal: &LogGrid, read_noise: &LogGrid) -> u64 {
    // FNV-1a over the grid parameters; collisions are re-checked on fetch.
    let mut h = 0xcbf29ce484222325u64;
    let mut eat = |v: u64| {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    eat(signal.count as u64);
    eat(signal.ln_min().to_bits());
    eat(signal.ln_max().to_bits());
    eat(read_noise.count as u64);
    eat(read_noise.ln_min().to_bits());
    eat(read_noise.ln_max().to_bits());
    eat(LUT_FORMAT_VERSION as u64);
    h
}

/// In-memory and on-disk memoization of built tables, keyed by grid
/// descriptors and format version. The table itself is parameter
/// independent (read noise is an axis), so one entry serves all cameras.
#[derive(Default)]
pub struct LutStore {
    cache_dir: Option<PathBuf>,
    mem: Mutex<HashMap<u64, Arc<BiasLut>>>,
}

impl LutStore {
    pub fn new(cache_dir: Option<PathBuf>) -> Self {
        Self {
            cache_dir,
            mem: Mutex::new(HashMap::new()),
        }
    }

    pub fn get_or_build(&self, signal: LogGrid, read_noise: LogGrid) -> Result<Arc<BiasLut>> {
        let key = grid_key(&signal, &read_noise);
        if let Some(lut) = self.mem.lock().unwrap().get(&key) {
            if lut.signal_grid == signal && lut.read_noise_grid == read_noise {
                return Ok(Arc::clone(lut));
            }
        }
        let path = self
            .cache_dir
            .as_ref()
            .map(|dir| dir.join(format!("bias_lut_{key:016x}.ylut")));
        if let Some(p) = &path {
            if let Ok(lut) = BiasLut::load(p) {
                if lut.signal_grid == signal && lut.read_noise_grid == read_noise {
                    let arc = Arc::new(lut);
                    self.mem.lock().unwrap().insert(key, Arc::clone(&arc));
                    return Ok(arc);
                }
            }
        }
        let lut = Arc::new(BiasLut::build(signal, read_noise)?);
        if let Some(p) = &path {
            lut.save(p)?;
        }
        self.mem.lock().unwrap().insert(key, Arc::clone(&lut));
        Ok(lut)
    }
}

/// Per-image transform context: noise parameters, black level, f-domain
/// peak and the derived guidance noise level sigma_snr = 1 / peak.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformContext {
    pub params: NoiseParams,
    pub black_level: f64,
    pub white_level: f64,
    pub peak: f64,
    pub sigma_snr: f64,
    pub chi_lo: f64,
}

impl TransformContext {
    /// `params` must be in the same units as the image data this context
    /// will transform (the pipeline uses [0,1]-normalized units).
    pub fn new(params: NoiseParams, black_level: f64, white_level: f64) -> Result<Self> {
        if !(white_level > black_level) {
            return Err(YondError::InvalidParameter(format!(
                "white level {white_level} must exceed black level {black_level}"
            )));
        }
        let chi_max = (white_level - black_level) / params.alpha();
        let peak = gat(chi_max, params.sigma_hat());
        Ok(Self {
            params,
            black_level,
            white_level,
            peak,
            sigma_snr: 1.0 / peak,
            chi_lo: CHI_LO,
        })
    }

    pub fn sigma_hat(&self) -> f64 {
        self.params.sigma_hat()
    }
}

/// Expectation-matched forward transform of one plane.
///
/// Per pixel: z = (y - mu)/alpha (signed) feeds the transform, the clamped
/// chi = max(0, z) feeds the bias lookup, and the result is scaled by the
/// f-domain peak: out = (f(z) - e(chi)) / P.
pub fn em_vst_forward_array(
    data: &Array2<f64>,
    ctx: &TransformContext,
    lut: &BiasLut,
) -> Array2<f64> {
    let sigma_hat = ctx.sigma_hat();
    let alpha = ctx.params.alpha();
    let mu = ctx.black_level;
    let inv_peak = 1.0 / ctx.peak;
    let slice = lut.at_sigma(sigma_hat);
    let (h, w) = data.dim();
    let src = data.as_standard_layout();
    let src_rows: Vec<&[f64]> = src.as_slice().expect("standard layout").chunks(w).collect();
    let mut out = Array2::zeros((h, w));
    out.as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(r, row)| {
            for (c, v) in row.iter_mut().enumerate() {
                let z = (src_rows[r][c] - mu) / alpha;
                let bias = slice.lookup(z.max(0.0));
                *v = (gat(z, sigma_hat) - bias) * inv_peak;
            }
        });
    out
}

/// [`em_vst_forward_array`] over a whole frame.
pub fn em_vst_forward(img: &BayerImage, ctx: &TransformContext, lut: &BiasLut) -> NormalizedImage {
    NormalizedImage {
        data: em_vst_forward_array(img.data(), ctx, lut),
        sigma_hat: ctx.sigma_hat(),
        peak: ctx.peak,
    }
}

/// Plain algebraic inverse after denoising (the bias was pre-corrected by
/// the forward transform): y = alpha * iat(w * P) + mu, clipped to
/// [black - 4 sigma, white]. Slightly negative denoised values are
/// clamped to the f-domain origin first.
pub fn inverse_after_denoise_array(den: &Array2<f64>, ctx: &TransformContext) -> Array2<f64> {
    let sigma_hat = ctx.sigma_hat();
    let alpha = ctx.params.alpha();
    let mu = ctx.black_level;
    let lo = mu - 4.0 * ctx.params.sigma();
    let hi = ctx.white_level;
    den.mapv(|w| {
        let z = iat_unchecked((w * ctx.peak).max(0.0), sigma_hat);
        (alpha * z + mu).clamp(lo, hi)
    })
}

/// [`inverse_after_denoise_array`] producing a frame with `like`'s metadata.
pub fn inverse_after_denoise(
    den: &NormalizedImage,
    ctx: &TransformContext,
    like: &BayerImage,
) -> Result<BayerImage> {
    like.with_data(inverse_after_denoise_array(&den.data, ctx))
}

/// The GAT + unbiased-inverse comparison path: estimate the clean signal
/// from the denoised value, subtract the bias evaluated there, then apply
/// the algebraic inverse. Used by the ablation harness only.
pub fn uiat_baseline_array(
    den: &Array2<f64>,
    ctx: &TransformContext,
    lut: &BiasLut,
) -> Array2<f64> {
    let sigma_hat = ctx.sigma_hat();
    let alpha = ctx.params.alpha();
    let mu = ctx.black_level;
    let lo = mu - 4.0 * ctx.params.sigma();
    let hi = ctx.white_level;
    let slice = lut.at_sigma(sigma_hat);
    den.mapv(|w| {
        let wp = (w * ctx.peak).max(0.0);
        let chi_est = iat_unchecked(wp, sigma_hat).max(0.0);
        let corrected = (wp - slice.lookup(chi_est)).max(0.0);
        let z = iat_unchecked(corrected, sigma_hat);
        (alpha * z + mu).clamp(lo, hi)
    })
}

/// [`uiat_baseline_array`] producing a frame with `like`'s metadata.
pub fn uiat_baseline(
    den: &NormalizedImage,
    ctx: &TransformContext,
    lut: &BiasLut,
    like: &BayerImage,
) -> Result<BayerImage> {
    like.with_data(uiat_baseline_array(&den.data, ctx, lut))
}
