//! The Poisson-Gaussian noise model: parameter container, synthetic
//! sampler, and least-squares fitting of (mean, variance) samples.
//!
//! The model is y = alpha * Poisson(x / alpha) + N(0, sigma^2), giving
//! E(y) = x and Var(y) = alpha * x + sigma^2. Fitting recovers (alpha,
//! sigma) as the slope and intercept of variance against mean.

use std::io::{BufRead, Write};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, YondError};
use crate::numeric::ln_gamma;

/// Smallest admissible system gain; fits of noiseless data clamp here so
/// that sigma_hat = sigma / alpha stays defined.
pub const ALPHA_FLOOR: f64 = 1e-12;

/// Poisson-Gaussian parameter pair (system gain alpha, read noise sigma),
/// in the units of whatever data they were fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    alpha: f64,
    sigma: f64,
}

impl NoiseParams {
    pub fn new(alpha: f64, sigma: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(YondError::InvalidParameter(format!(
                "alpha must be finite and positive, got {alpha}"
            )));
        }
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(YondError::InvalidParameter(format!(
                "sigma must be finite and nonnegative, got {sigma}"
            )));
        }
        Ok(Self { alpha, sigma })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Read noise in electron units: sigma / alpha.
    pub fn sigma_hat(&self) -> f64 {
        self.sigma / self.alpha
    }

    /// Parameters after rescaling the data axis by s (alpha and sigma both
    /// scale linearly).
    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::new(self.alpha * s, self.sigma * s)
    }

    /// Model variance at clean signal x: alpha * x + sigma^2.
    pub fn variance_at(&self, x: f64) -> f64 {
        self.alpha * x + self.sigma * self.sigma
    }
}

/// Which estimation stage produced a sample set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Fine,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Coarse => "coarse",
            Stage::Fine => "fine",
        }
    }
}

/// One (spatial mean, spatial variance) observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MVSample {
    pub mean: f64,
    pub variance: f64,
    pub weight: f64,
}

/// Masked (mean, variance) sample pairs feeding the least-squares fit.
/// Fine-stage variances may be negative; the fit handles them.
#[derive(Debug, Clone, PartialEq)]
pub struct MVSamples {
    pub samples: Vec<MVSample>,
    pub stage: Stage,
}

impl MVSamples {
    pub fn new(stage: Stage) -> Self {
        Self {
            samples: Vec::new(),
            stage,
        }
    }

    pub fn push(&mut self, mean: f64, variance: f64) {
        self.samples.push(MVSample {
            mean,
            variance,
            weight: 1.0,
        });
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Write `mean,variance,weight,stage` rows with a header line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "mean,variance,weight,stage")?;
        for s in &self.samples {
            writeln!(
                w,
                "{},{},{},{}",
                s.mean,
                s.variance,
                s.weight,
                self.stage.as_str()
            )?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut out = MVSamples::new(Stage::Coarse);
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || (i == 0 && line.starts_with("mean")) {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(YondError::Metadata(format!(
                    "bad mv-sample row {i}: {line:?}"
                )));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|e| YondError::Metadata(format!("bad number {s:?}: {e}")))
            };
            out.samples.push(MVSample {
                mean: parse(fields[0])?,
                variance: parse(fields[1])?,
                weight: parse(fields[2])?,
            });
            out.stage = match fields[3] {
                "fine" => Stage::Fine,
                _ => Stage::Coarse,
            };
        }
        Ok(out)
    }
}

/// Poisson sampling by cdf inversion; expected O(lambda) iterations, used
/// below lambda = 10.
fn poisson_inversion<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> u64 {
    let u: f64 = rng.random();
    let mut k = 0u64;
    let mut p = (-lambda).exp();
    let mut cdf = p;
    let cap = (10.0 * lambda) as u64 + 100;
    while u > cdf && k < cap {
        k += 1;
        p *= lambda / k as f64;
        cdf += p;
    }
    k
}

/// Hormann's PTRS transformed-rejection sampler, valid for lambda >= 10.
fn poisson_ptrs<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> u64 {
    let slam = lambda.sqrt();
    let loglam = lambda.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let v_r = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = rng.random::<f64>() - 0.5;
        let mut v: f64 = rng.random();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + lambda + 0.43).floor();
        if us >= 0.07 && v <= v_r {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        if v <= 0.0 {
            v = f64::MIN_POSITIVE;
        }
        if v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln()
            <= k * loglam - lambda - ln_gamma(k + 1.0)
        {
            return k as u64;
        }
    }
}

/// Draw from Poisson(lambda).
pub fn sample_poisson<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> u64 {
    debug_assert!(lambda >= 0.0);
    if lambda < 10.0 {
        poisson_inversion(rng, lambda)
    } else {
        poisson_ptrs(rng, lambda)
    }
}

/// One Poisson-Gaussian draw in electron units: Poisson(chi) + sigma_hat * N(0,1).
pub fn sample_pg<R: Rng + ?Sized>(rng: &mut R, chi: f64, sigma_hat: f64) -> f64 {
    let p = sample_poisson(rng, chi) as f64;
    if sigma_hat > 0.0 {
        let g: f64 = rng.sample(StandardNormal);
        p + sigma_hat * g
    } else {
        p
    }
}

/// Sample y = alpha * Poisson(x / alpha) + N(0, sigma^2) per pixel.
///
/// `clean` holds signal above black level (nonnegative). Rows are sampled
/// on independent generator streams keyed by the row index, so the result
/// is reproducible regardless of thread scheduling. Output is not clipped.
pub fn sample_noisy(clean: &Array2<f64>, params: &NoiseParams, seed: u64) -> Result<Array2<f64>> {
    if clean.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(YondError::InvalidParameter(
            "clean input must be finite and nonnegative".into(),
        ));
    }
    let alpha = params.alpha();
    let sigma = params.sigma();
    let (h, w) = clean.dim();
    let mut out = Array2::zeros((h, w));
    let clean_slice = clean.as_standard_layout();
    let clean_rows: Vec<&[f64]> = clean_slice
        .as_slice()
        .expect("standard layout")
        .chunks(w)
        .collect();
    out.as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(r, row)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64 + 1);
            for (c, v) in row.iter_mut().enumerate() {
                let x = clean_rows[r][c];
                let p = sample_poisson(&mut rng, x / alpha) as f64;
                let noise = if sigma > 0.0 {
                    let g: f64 = rng.sample(StandardNormal);
                    sigma * g
                } else {
                    0.0
                };
                *v = alpha * p + noise;
            }
        });
    Ok(out)
}

struct WlsFit {
    slope: f64,
    intercept: f64,
}

fn weighted_line_fit(samples: &[MVSample]) -> Result<WlsFit> {
    let mut sw = 0.0;
    let mut si = 0.0;
    let mut sv = 0.0;
    for s in samples {
        if !(s.mean.is_finite() && s.variance.is_finite() && s.weight.is_finite() && s.weight > 0.0)
        {
            return Err(YondError::InvalidParameter(
                "non-finite sample or nonpositive weight".into(),
            ));
        }
        sw += s.weight;
        si += s.weight * s.mean;
        sv += s.weight * s.variance;
    }
    let mi = si / sw;
    let mv = sv / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut max_abs_mean = 0.0f64;
    for s in samples {
        let di = s.mean - mi;
        sxx += s.weight * di * di;
        sxy += s.weight * di * (s.variance - mv);
        max_abs_mean = max_abs_mean.max(s.mean.abs());
    }
    let floor = (1e-12 * max_abs_mean.max(1e-300)).powi(2) * sw;
    if sxx <= floor {
        return Err(YondError::DegenerateFit(
            "all sample means identical".into(),
        ));
    }
    let slope = sxy / sxx;
    Ok(WlsFit {
        slope,
        intercept: mv - slope * mi,
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn params_from_fit(fit: &WlsFit, samples: &[MVSample]) -> Result<NoiseParams> {
    if fit.intercept < 0.0 {
        // Negative fitted sigma^2: clamp sigma to zero and refit the slope
        // with the intercept fixed at the origin.
        let mut num = 0.0;
        let mut den = 0.0;
        for s in samples {
            num += s.weight * s.mean * s.variance;
            den += s.weight * s.mean * s.mean;
        }
        let slope = if den > 0.0 { num / den } else { fit.slope };
        NoiseParams::new(slope.max(ALPHA_FLOOR), 0.0)
    } else {
        NoiseParams::new(fit.slope.max(ALPHA_FLOOR), fit.intercept.sqrt())
    }
}

/// Ordinary least squares of V = alpha * I + sigma^2, followed by one
/// robust re-fit that discards residuals beyond 3x the median absolute
/// deviation. A negative fitted intercept clamps sigma to 0 and re-fits
/// the slope through the origin.
pub fn fit_least_squares(samples: &MVSamples) -> Result<NoiseParams> {
    let all = &samples.samples;
    if all.len() < 2 {
        return Err(YondError::InsufficientData(format!(
            "need at least 2 samples, got {}",
            all.len()
        )));
    }
    let first = weighted_line_fit(all)?;

    let mut residuals: Vec<f64> = all
        .iter()
        .map(|s| s.variance - (first.slope * s.mean + first.intercept))
        .collect();
    let med = median(&mut residuals.clone());
    let mut dev: Vec<f64> = residuals.iter_mut().map(|r| (*r - med).abs()).collect();
    let mad = median(&mut dev);
    let scale = all
        .iter()
        .map(|s| s.variance.abs())
        .fold(0.0f64, f64::max)
        .max(1e-300);
    let keep_threshold = 3.0 * mad + 1e-12 * scale;

    let kept: Vec<MVSample> = all
        .iter()
        .filter(|s| {
            let r = s.variance - (first.slope * s.mean + first.intercept);
            (r - med).abs() <= keep_threshold
        })
        .copied()
        .collect();

    if kept.len() >= 2 {
        if let Ok(refit) = weighted_line_fit(&kept) {
            return params_from_fit(&refit, &kept);
        }
    }
    params_from_fit(&first, all)
}

/// Regression diagnostics for a fitted noise model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub rmse: f64,
    pub outlier_fraction: f64,
}

/// Root-mean-square residual of V against alpha * I + sigma^2, plus the
/// fraction of samples beyond 3x the MAD of the residuals.
pub fn residual_stats(samples: &MVSamples, params: &NoiseParams) -> Result<ResidualStats> {
    let all = &samples.samples;
    if all.is_empty() {
        return Err(YondError::InsufficientData("no samples".into()));
    }
    let residuals: Vec<f64> = all
        .iter()
        .map(|s| s.variance - params.variance_at(s.mean))
        .collect();
    let mut sw = 0.0;
    let mut ss = 0.0;
    for (s, r) in all.iter().zip(&residuals) {
        sw += s.weight;
        ss += s.weight * r * r;
    }
    let med = median(&mut residuals.clone());
    let mut dev: Vec<f64> = residuals.iter().map(|r| (r - med).abs()).collect();
    let mad = median(&mut dev);
    let scale = all
        .iter()
        .map(|s| s.variance.abs())
        .fold(0.0f64, f64::max)
        .max(1e-300);
    let threshold = 3.0 * mad + 1e-12 * scale;
    let outliers = residuals.iter().filter(|r| (**r - med).abs() > threshold).count();
    Ok(ResidualStats {
        rmse: (ss / sw).sqrt(),
        outlier_fraction: outliers as f64 / all.len() as f64,
    })
}
