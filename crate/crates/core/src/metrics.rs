//! Image quality metrics in the raw domain.
//!
//! PSNR uses the frame's white - black range as the peak; SSIM uses the
//! standard constants (K1 = 0.01, K2 = 0.03) with an 11-tap Gaussian
//! window of sigma 1.5, computed per packed plane and averaged.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, YondError};
use crate::raw::{pack, BayerImage};

/// PSNR and SSIM of a denoised frame against a reference, with the peak
/// the scores were computed at.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QualityScore {
    pub psnr: f64,
    pub ssim: f64,
    pub peak: f64,
}

fn check_same_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(YondError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// 10 log10(peak^2 / MSE); identical inputs report +infinity.
pub fn psnr(a: &Array2<f64>, b: &Array2<f64>, peak: f64) -> Result<f64> {
    check_same_shape(a, b)?;
    if !(peak > 0.0) {
        return Err(YondError::InvalidParameter(format!(
            "psnr peak must be positive, got {peak}"
        )));
    }
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Mean SSIM of one plane pair over all fully-interior window positions.
pub fn ssim_plane(a: &Array2<f64>, b: &Array2<f64>, data_range: f64) -> Result<f64> {
    check_same_shape(a, b)?;
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(YondError::Dimension(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    if !(data_range > 0.0) {
        return Err(YondError::InvalidParameter(format!(
            "ssim data range must be positive, got {data_range}"
        )));
    }
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let kernel = ssim_kernel();

    let rows = h - SSIM_WINDOW + 1;
    let cols = w - SSIM_WINDOW + 1;
    let total: f64 = (0..rows)
        .into_par_iter()
        .map(|r| {
            let mut row_sum = 0.0;
            for c in 0..cols {
                let mut mx = 0.0;
                let mut my = 0.0;
                let mut mxx = 0.0;
                let mut myy = 0.0;
                let mut mxy = 0.0;
                for (dr, kr) in kernel.iter().enumerate() {
                    for (dc, kc) in kernel.iter().enumerate() {
                        let wgt = kr * kc;
                        let x = a[[r + dr, c + dc]];
                        let y = b[[r + dr, c + dc]];
                        mx += wgt * x;
                        my += wgt * y;
                        mxx += wgt * x * x;
                        myy += wgt * y * y;
                        mxy += wgt * x * y;
                    }
                }
                let vx = mxx - mx * mx;
                let vy = myy - my * my;
                let cxy = mxy - mx * my;
                let num = (2.0 * mx * my + c1) * (2.0 * cxy + c2);
                let den = (mx * mx + my * my + c1) * (vx + vy + c2);
                row_sum += num / den;
            }
            row_sum
        })
        .sum();
    Ok(total / (rows * cols) as f64)
}

/// SSIM averaged over the four packed planes.
pub fn ssim_bayer(a: &BayerImage, b: &BayerImage) -> Result<f64> {
    check_same_shape(a.data(), b.data())?;
    let range = a.white_level() - a.black_level();
    let pa = pack(a);
    let pb = pack(b);
    let mut total = 0.0;
    for (x, y) in pa.planes.iter().zip(pb.planes.iter()) {
        total += ssim_plane(x, y, range)?;
    }
    Ok(total / 4.0)
}

/// PSNR with peak = white - black of the reference frame.
pub fn psnr_bayer(a: &BayerImage, b: &BayerImage) -> Result<f64> {
    psnr(a.data(), b.data(), a.white_level() - a.black_level())
}

/// Both metrics of a frame pair.
pub fn quality(reference: &BayerImage, candidate: &BayerImage) -> Result<QualityScore> {
    Ok(QualityScore {
        psnr: psnr_bayer(reference, candidate)?,
        ssim: ssim_bayer(reference, candidate)?,
        peak: reference.white_level() - reference.black_level(),
    })
}
