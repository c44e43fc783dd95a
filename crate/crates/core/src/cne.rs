//! Coarse-to-fine noise estimation.
//!
//! The coarse stage thresholds a smoothed spatial-deviation map to find
//! flat regions in the noisy image and fits the noise model to windowed
//! (mean, variance) samples drawn there. The fine stage repeats the
//! procedure with the coarse denoised image as a clean-image surrogate,
//! subtracting its spatial variance from the noisy image's so texture no
//! longer inflates the fit.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Result, YondError};
use crate::filters::{box_mean, box_std};
use crate::noise::{
    fit_least_squares, residual_stats, MVSamples, NoiseParams, ResidualStats, Stage, ALPHA_FLOOR,
};

/// Number of candidate quantiles the threshold search evaluates.
pub const ATS_CANDIDATES: usize = 20;

/// Number of uniform mean-histogram bins backing the diversity term.
pub const ATS_BINS: usize = 100;

/// Estimation procedure parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CneParams {
    /// Statistics window size.
    pub p: usize,
    /// Pre-blur window size for the coarse-stage guide map.
    pub p_prime: usize,
    /// Optional manual quantile overriding the threshold search argmin.
    pub ats_quantile: Option<f64>,
}

impl Default for CneParams {
    fn default() -> Self {
        Self {
            p: 29,
            p_prime: 19,
            ats_quantile: None,
        }
    }
}

impl CneParams {
    pub fn validate(&self) -> Result<()> {
        if self.p % 2 == 0 || self.p_prime % 2 == 0 || self.p == 0 || self.p_prime == 0 {
            return Err(YondError::InvalidParameter(format!(
                "window sizes must be odd, got p={} p'={}",
                self.p, self.p_prime
            )));
        }
        if let Some(q) = self.ats_quantile {
            if !(q > 0.0 && q <= 1.0) {
                return Err(YondError::InvalidParameter(format!(
                    "ats quantile override must lie in (0, 1], got {q}"
                )));
            }
        }
        Ok(())
    }
}

/// One evaluated threshold candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtsCandidate {
    /// Candidate quantile of the guide distribution.
    pub quantile: f64,
    /// Guide value at that quantile.
    pub threshold: f64,
    /// Fraction of pixels at or below the threshold.
    pub selected_fraction: f64,
    /// Non-empty mean-histogram bins within the selection.
    pub occupied_bins: usize,
    /// Normalized variance threshold over coverage and diversity.
    pub score: f64,
}

/// Flat-region selection over the stacked packed planes.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatMask {
    /// Boolean selection, same shape as the stacked guide.
    pub mask: Array2<bool>,
    /// Selected guide threshold.
    pub threshold: f64,
    /// Selected fraction q.
    pub quantile: f64,
    /// Occupied mean-histogram bins n.
    pub occupied_bins: usize,
    /// All evaluated candidates, ascending quantile.
    pub candidates: Vec<AtsCandidate>,
    /// Index of the chosen candidate.
    pub selected: usize,
    /// The guide map was all zeros and everything was selected.
    pub degenerate: bool,
}

impl FlatMask {
    pub fn selected_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Write the mask as an 8-bit grayscale PNG (255 = selected).
    pub fn save_png(&self, path: &std::path::Path) -> Result<()> {
        let (h, w) = self.mask.dim();
        let mut img = image::GrayImage::new(w as u32, h as u32);
        for ((r, c), &m) in self.mask.indexed_iter() {
            img.put_pixel(c as u32, r as u32, image::Luma([if m { 255 } else { 0 }]));
        }
        img.save(path)
            .map_err(|e| YondError::Metadata(format!("mask png: {e}")))
    }
}

/// Adaptive threshold selection over a guide deviation map.
///
/// Candidates are the 20 equally spaced quantiles {5%, ..., 100%} of the
/// guide values. For each, the score is the normalized variance threshold
/// divided by (selected fraction x occupied mean-histogram bins); the
/// minimizer wins, ties broken toward the smaller threshold. A manual
/// quantile override picks the nearest candidate instead of the argmin.
pub fn ats(
    guide_std: &Array2<f64>,
    means_for_bins: &Array2<f64>,
    white_level: f64,
    quantile_override: Option<f64>,
) -> Result<FlatMask> {
    if guide_std.dim() != means_for_bins.dim() {
        return Err(YondError::ShapeMismatch(format!(
            "guide {:?} vs means {:?}",
            guide_std.dim(),
            means_for_bins.dim()
        )));
    }
    if guide_std.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(YondError::InvalidParameter(
            "guide deviations must be finite and nonnegative".into(),
        ));
    }
    let n_px = guide_std.len();
    if n_px == 0 {
        return Err(YondError::InsufficientData("empty guide".into()));
    }

    let bin_of = |mean: f64| -> usize {
        ((mean / white_level * ATS_BINS as f64).floor() as isize)
            .clamp(0, ATS_BINS as isize - 1) as usize
    };

    // Degenerate: a perfectly flat guide gives no threshold to search for.
    let max_guide = guide_std.iter().cloned().fold(0.0f64, f64::max);
    if max_guide == 0.0 {
        let mut occupied = [false; ATS_BINS];
        for &m in means_for_bins.iter() {
            occupied[bin_of(m)] = true;
        }
        let bins = occupied.iter().filter(|&&b| b).count();
        return Ok(FlatMask {
            mask: Array2::from_elem(guide_std.dim(), true),
            threshold: 0.0,
            quantile: 1.0,
            occupied_bins: bins,
            candidates: vec![AtsCandidate {
                quantile: 1.0,
                threshold: 0.0,
                selected_fraction: 1.0,
                occupied_bins: bins,
                score: 0.0,
            }],
            selected: 0,
            degenerate: true,
        });
    }

    // Pixels ordered by guide value; one sweep evaluates every candidate.
    let mut order: Vec<(f64, usize)> = guide_std
        .iter()
        .zip(means_for_bins.iter())
        .map(|(&g, &m)| (g, bin_of(m)))
        .collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    let mut candidates = Vec::with_capacity(ATS_CANDIDATES);
    let mut occupied = [false; ATS_BINS];
    let mut occupied_count = 0usize;
    let mut cursor = 0usize;
    for j in 1..=ATS_CANDIDATES {
        let q = j as f64 / ATS_CANDIDATES as f64;
        // Nearest-rank quantile.
        let rank = ((q * n_px as f64).ceil() as usize).clamp(1, n_px) - 1;
        let threshold = order[rank].0;
        // Include every pixel at or below the threshold (ties included).
        while cursor < n_px && order[cursor].0 <= threshold {
            let bin = order[cursor].1;
            if !occupied[bin] {
                occupied[bin] = true;
                occupied_count += 1;
            }
            cursor += 1;
        }
        let selected_fraction = cursor as f64 / n_px as f64;
        let norm = threshold / white_level;
        let score = norm * norm / (selected_fraction * occupied_count as f64);
        candidates.push(AtsCandidate {
            quantile: q,
            threshold,
            selected_fraction,
            occupied_bins: occupied_count,
            score,
        });
    }

    let selected = match quantile_override {
        Some(q) => ((q * ATS_CANDIDATES as f64).round() as usize).clamp(1, ATS_CANDIDATES) - 1,
        None => {
            let mut best = 0usize;
            for (i, c) in candidates.iter().enumerate() {
                if c.score < candidates[best].score {
                    best = i;
                }
            }
            best
        }
    };
    let chosen = candidates[selected];
    let mask = guide_std.mapv(|g| g <= chosen.threshold);
    Ok(FlatMask {
        mask,
        threshold: chosen.threshold,
        quantile: chosen.selected_fraction,
        occupied_bins: chosen.occupied_bins,
        candidates,
        selected,
        degenerate: false,
    })
}

/// Everything one estimation stage produces.
#[derive(Debug, Clone)]
pub struct StageEstimate {
    pub params: NoiseParams,
    pub mask: FlatMask,
    pub samples: MVSamples,
    pub residuals: ResidualStats,
    pub warnings: Vec<String>,
}

fn stack_planes(maps: &[Array2<f64>]) -> Array2<f64> {
    let (h, w) = maps[0].dim();
    let mut out = Array2::zeros((h * maps.len(), w));
    for (i, m) in maps.iter().enumerate() {
        out.slice_mut(ndarray::s![i * h..(i + 1) * h, ..]).assign(m);
    }
    out
}

/// Collect strided masked samples. Stride positions restart at each
/// plane's own origin so the grid is plane-aligned.
fn collect_samples(
    mask: &Array2<bool>,
    means: &Array2<f64>,
    variances: &Array2<f64>,
    plane_height: usize,
    stride: usize,
    stage: Stage,
) -> MVSamples {
    let (total_h, w) = mask.dim();
    let planes = total_h / plane_height;
    let mut mv = MVSamples::new(stage);
    for p in 0..planes {
        let base = p * plane_height;
        for r in (0..plane_height).step_by(stride) {
            for c in (0..w).step_by(stride) {
                if mask[[base + r, c]] {
                    mv.push(means[[base + r, c]], variances[[base + r, c]]);
                }
            }
        }
    }
    mv
}

/// Fallback selection: the lowest-guide 5% of strided positions.
fn fallback_samples(
    guide: &Array2<f64>,
    means: &Array2<f64>,
    variances: &Array2<f64>,
    plane_height: usize,
    stride: usize,
    stage: Stage,
) -> MVSamples {
    let (total_h, w) = guide.dim();
    let planes = total_h / plane_height;
    let mut entries: Vec<(f64, f64, f64)> = Vec::new();
    for p in 0..planes {
        let base = p * plane_height;
        for r in (0..plane_height).step_by(stride) {
            for c in (0..w).step_by(stride) {
                entries.push((
                    guide[[base + r, c]],
                    means[[base + r, c]],
                    variances[[base + r, c]],
                ));
            }
        }
    }
    entries.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let keep = (entries.len() / 20).max(2).min(entries.len());
    let mut mv = MVSamples::new(stage);
    for (_, m, v) in entries.into_iter().take(keep) {
        mv.push(m, v);
    }
    mv
}

/// Fit with the degenerate-constant-image case mapped to (floor, 0).
fn fit_with_fallback(samples: &MVSamples, warnings: &mut Vec<String>) -> Result<NoiseParams> {
    match fit_least_squares(samples) {
        Ok(p) => Ok(p),
        Err(YondError::DegenerateFit(_)) => {
            warnings.push(
                "degenerate fit (all sample means identical); noise parameters set to zero".into(),
            );
            NoiseParams::new(ALPHA_FLOOR, 0.0)
        }
        Err(e) => Err(e),
    }
}

fn median_of(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Ratio of the selected squared threshold to the median sampled variance
/// beyond which the selection is likely texture, not noise.
const TEXTURE_WARN_RATIO: f64 = 0.25;

fn stage_common(
    guide: Array2<f64>,
    means: Array2<f64>,
    variances: Array2<f64>,
    plane_height: usize,
    white_level: f64,
    params: &CneParams,
    stage: Stage,
) -> Result<StageEstimate> {
    let mut warnings = Vec::new();
    let mask = ats(&guide, &means, white_level, params.ats_quantile)?;
    if mask.degenerate {
        warnings.push("guide deviations are all zero; selecting the whole image".into());
    }
    if mask.quantile < 0.01 {
        warnings.push(format!(
            "selected flat fraction {:.4} is below 1%",
            mask.quantile
        ));
    }
    let stride = params.p.div_ceil(2);
    let mut samples = collect_samples(&mask.mask, &means, &variances, plane_height, stride, stage);
    if samples.len() < 2 {
        warnings.push("flat selection empty after striding; using lowest-deviation 5%".into());
        samples = fallback_samples(&guide, &means, &variances, plane_height, stride, stage);
    }
    let fitted = fit_with_fallback(&samples, &mut warnings)?;

    let median_var = median_of(samples.samples.iter().map(|s| s.variance.abs()).collect());
    let thr_var = mask.threshold * mask.threshold;
    if median_var > 0.0 && thr_var > TEXTURE_WARN_RATIO * median_var {
        warnings.push(
            "selected regions look texture-dominated; estimates may be biased high".into(),
        );
    }
    if samples
        .samples
        .iter()
        .all(|s| s.variance.abs() < 1e-12 * white_level * white_level)
    {
        warnings.push("sampled variances are all ~zero".into());
    }
    let residuals = residual_stats(&samples, &fitted)?;
    Ok(StageEstimate {
        params: fitted,
        mask,
        samples,
        residuals,
        warnings,
    })
}

/// Coarse estimation from the noisy packed planes alone.
///
/// The guide map is the spatial deviation of the pre-blurred planes; the
/// pre-blur suppresses pixel noise so the threshold mostly measures
/// texture. Samples are windowed (mean, variance) pairs at masked
/// positions, strided to decorrelate overlapping windows, pooled across
/// planes for one global fit.
pub fn estimate_coarse(
    planes: &[Array2<f64>],
    white_level: f64,
    params: &CneParams,
) -> Result<StageEstimate> {
    params.validate()?;
    let mut guides = Vec::with_capacity(planes.len());
    let mut means = Vec::with_capacity(planes.len());
    let mut vars = Vec::with_capacity(planes.len());
    for plane in planes {
        let blurred = box_mean(plane, params.p_prime)?;
        guides.push(box_std(&blurred, params.p)?);
        means.push(box_mean(plane, params.p)?);
        vars.push(box_std(plane, params.p)?.mapv(|s| s * s));
    }
    let plane_height = planes[0].dim().0;
    stage_common(
        stack_planes(&guides),
        stack_planes(&means),
        stack_planes(&vars),
        plane_height,
        white_level,
        params,
        Stage::Coarse,
    )
}

/// Fine estimation: variance of the coarse denoised image subtracted from
/// the noisy image's variance, means and mask taken from the denoised
/// surrogate. Negative variance samples are kept; the fit handles them.
pub fn estimate_fine(
    noisy: &[Array2<f64>],
    coarse_denoised: &[Array2<f64>],
    white_level: f64,
    params: &CneParams,
) -> Result<StageEstimate> {
    params.validate()?;
    if noisy.len() != coarse_denoised.len()
        || noisy
            .iter()
            .zip(coarse_denoised)
            .any(|(a, b)| a.dim() != b.dim())
    {
        return Err(YondError::ShapeMismatch(
            "noisy and coarse-denoised plane stacks differ".into(),
        ));
    }
    let mut guides = Vec::with_capacity(noisy.len());
    let mut means = Vec::with_capacity(noisy.len());
    let mut vars = Vec::with_capacity(noisy.len());
    for (n, d) in noisy.iter().zip(coarse_denoised) {
        let s_noisy = box_std(n, params.p)?;
        let s_den = box_std(d, params.p)?;
        guides.push(s_den.clone());
        means.push(box_mean(d, params.p)?);
        let mut v = s_noisy.mapv(|s| s * s);
        v.zip_mut_with(&s_den, |vn, &sd| *vn -= sd * sd);
        vars.push(v);
    }
    let plane_height = noisy[0].dim().0;
    stage_common(
        stack_planes(&guides),
        stack_planes(&means),
        stack_planes(&vars),
        plane_height,
        white_level,
        params,
        Stage::Fine,
    )
}

/// Summary of one stage for reports (diagnostics without the bulky mask).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub params: NoiseParams,
    pub sample_count: usize,
    pub rmse: f64,
    pub outlier_fraction: f64,
    pub threshold: f64,
    pub selected_fraction: f64,
    pub occupied_bins: usize,
    pub candidates: Vec<AtsCandidate>,
}

impl StageReport {
    pub fn from_estimate(est: &StageEstimate) -> Self {
        Self {
            params: est.params,
            sample_count: est.samples.len(),
            rmse: est.residuals.rmse,
            outlier_fraction: est.residuals.outlier_fraction,
            threshold: est.mask.threshold,
            selected_fraction: est.mask.quantile,
            occupied_bins: est.mask.occupied_bins,
            candidates: est.mask.candidates.clone(),
        }
    }
}

/// The full estimation outcome: both stages plus diagnostics, or a note
/// that a manual parameter override skipped them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimationReport {
    pub coarse: Option<StageReport>,
    pub fine: Option<StageReport>,
    pub params_override: Option<NoiseParams>,
    pub warnings: Vec<String>,
    pub stages_skipped: bool,
}

impl EstimationReport {
    /// The parameters the final transform consumes.
    pub fn final_params(&self) -> Option<NoiseParams> {
        self.params_override
            .or_else(|| self.fine.as_ref().map(|f| f.params))
            .or_else(|| self.coarse.as_ref().map(|c| c.params))
    }
}

/// Run the full two-stage estimation on a frame: coarse estimate, one
/// transform-denoise-inverse round for the surrogate, fine estimate. The
/// coarse denoised image is used only for estimation.
pub fn run_cne(
    noisy: &crate::raw::BayerImage,
    denoiser: &dyn crate::denoise::Denoiser,
    cfg: &crate::pipeline::PipelineConfig,
) -> Result<EstimationReport> {
    crate::pipeline::estimate_only(noisy, denoiser, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::sample_noisy;
    use crate::synth::{generate_clean_scene, generate_texture_scene};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn ats_separates_flat_from_texture() {
        // Left half: small deviations; right half: 10x larger.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let guide = Array2::from_shape_fn((64, 128), |(_, c)| {
            if c < 64 {
                0.05 + 0.01 * rng.random::<f64>()
            } else {
                0.5 + 0.1 * rng.random::<f64>()
            }
        });
        let means = Array2::from_shape_fn((64, 128), |(r, c)| ((r * 128 + c) % 100) as f64 / 100.0);
        let flat = ats(&guide, &means, 1.0, None).unwrap();
        let flat_half: usize = flat
            .mask
            .indexed_iter()
            .filter(|((_, c), &m)| *c < 64 && m)
            .count();
        let texture_half: usize = flat
            .mask
            .indexed_iter()
            .filter(|((_, c), &m)| *c >= 64 && m)
            .count();
        assert!(flat_half as f64 >= 0.9 * 64.0 * 64.0, "flat half {flat_half}");
        assert!(
            texture_half as f64 <= 0.1 * 64.0 * 64.0,
            "texture half {texture_half}"
        );
    }

    #[test]
    fn ats_constant_guide_selects_everything() {
        let guide = Array2::from_elem((16, 16), 0.2);
        let means = Array2::from_shape_fn((16, 16), |(r, c)| (r * 16 + c) as f64 / 256.0);
        let flat = ats(&guide, &means, 1.0, None).unwrap();
        assert!(flat.mask.iter().all(|&m| m));
        assert_eq!(flat.quantile, 1.0);
    }

    #[test]
    fn ats_two_population_threshold() {
        // Guide holds two deviation populations {1, 100}; with means
        // spanning many bins the score lands between the populations, at
        // the value of the 50% quantile.
        let guide = Array2::from_shape_fn((20, 50), |(r, _)| if r < 10 { 1.0 } else { 100.0 });
        let means = Array2::from_shape_fn((20, 50), |(r, c)| ((r * 50 + c) % 500) as f64 / 500.0);
        let flat = ats(&guide, &means, 1.0, None).unwrap();
        assert_eq!(flat.threshold, 1.0);
        assert_eq!(flat.selected_count(), 500);
        // Hand-enumeration of the 20 scores: every candidate at or below
        // the 50% quantile shares threshold 1 and the minimal score; ties
        // break toward the smaller threshold.
        for c in &flat.candidates {
            if c.quantile <= 0.5 {
                assert_eq!(c.threshold, 1.0);
                assert!((c.score - flat.candidates[flat.selected].score).abs() < 1e-18);
            } else {
                assert_eq!(c.threshold, 100.0);
                assert!(c.score > flat.candidates[flat.selected].score);
            }
        }
    }

    #[test]
    fn ats_degenerate_zero_guide() {
        let guide = Array2::zeros((8, 8));
        let means = Array2::from_elem((8, 8), 0.5);
        let flat = ats(&guide, &means, 1.0, None).unwrap();
        assert!(flat.degenerate);
        assert!(flat.mask.iter().all(|&m| m));
    }

    #[test]
    fn ats_is_deterministic_and_mask_matches_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let guide = Array2::from_shape_fn((32, 32), |_| rng.random::<f64>());
        let means = Array2::from_shape_fn((32, 32), |_| rng.random::<f64>());
        let a = ats(&guide, &means, 1.0, None).unwrap();
        let b = ats(&guide, &means, 1.0, None).unwrap();
        assert_eq!(a, b);
        for (g, m) in guide.iter().zip(a.mask.iter()) {
            assert_eq!(*m, *g <= a.threshold);
        }
        assert!(a.quantile > 0.0 && a.quantile <= 1.0);
        assert!(a.candidates.iter().any(|c| c.threshold == a.threshold));
        // The override picks the requested candidate.
        let forced = ats(&guide, &means, 1.0, Some(1.0)).unwrap();
        assert_eq!(forced.selected, ATS_CANDIDATES - 1);
        assert!(forced.mask.iter().all(|&m| m));
    }

    /// Split a scene into four pseudo-planes by 2x2 subsampling, the same
    /// shape the estimation operates on.
    fn planes_of(img: &Array2<f64>) -> Vec<Array2<f64>> {
        let (h, w) = img.dim();
        (0..4)
            .map(|i| {
                let (dr, dc) = [(0, 0), (0, 1), (1, 0), (1, 1)][i];
                Array2::from_shape_fn((h / 2, w / 2), |(r, c)| img[[2 * r + dr, 2 * c + dc]])
            })
            .collect()
    }

    #[test]
    fn coarse_estimate_recovers_synthetic_noise() {
        let clean = generate_clean_scene(512, 3);
        let params = NoiseParams::new(1.10e-3, 2.20e-3).unwrap();
        let noisy = sample_noisy(&clean, &params, 11).unwrap();
        let est = estimate_coarse(&planes_of(&noisy), 1.0, &CneParams::default()).unwrap();
        let alpha_dev = (est.params.alpha() - params.alpha()).abs() / params.alpha();
        let sigma_dev = (est.params.sigma() - params.sigma()).abs() / params.sigma();
        assert!(alpha_dev <= 0.08, "alpha deviation {alpha_dev}");
        assert!(sigma_dev <= 0.50, "sigma deviation {sigma_dev}");
    }

    #[test]
    fn coarse_estimate_on_pure_awgn() {
        // Brightness-varying clean scene plus constant-sigma noise: the
        // fitted slope stays near zero and sigma lands on the truth.
        let clean = generate_clean_scene(512, 7);
        let sigma = 8.0e-3;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let noisy = clean.mapv(|v| {
            let g: f64 = rng.sample(StandardNormal);
            v + sigma * g
        });
        let est = estimate_coarse(&planes_of(&noisy), 1.0, &CneParams::default()).unwrap();
        assert!(
            est.params.alpha() < 0.3 * sigma,
            "alpha {} should be small",
            est.params.alpha()
        );
        let sigma_dev = (est.params.sigma() - sigma).abs() / sigma;
        assert!(sigma_dev <= 0.10, "sigma deviation {sigma_dev}");
    }

    #[test]
    fn coarse_estimate_noiseless_constant() {
        let planes = vec![Array2::from_elem((64, 64), 0.25); 4];
        let est = estimate_coarse(&planes, 1.0, &CneParams::default()).unwrap();
        assert!(est.params.alpha() <= ALPHA_FLOOR);
        assert_eq!(est.params.sigma(), 0.0);
        assert!(!est.warnings.is_empty());
    }

    #[test]
    fn coarse_rejects_undersized_image() {
        let planes = vec![Array2::zeros((16, 16)); 4];
        assert!(matches!(
            estimate_coarse(&planes, 1.0, &CneParams::default()),
            Err(YondError::Dimension(_))
        ));
    }

    #[test]
    fn fine_estimate_with_oracle_clean_image() {
        // Substituting the exact clean image for the denoised surrogate
        // recovers the parameters within Monte Carlo error: the variance
        // linearity identity.
        let clean = generate_clean_scene(512, 9);
        let params = NoiseParams::new(9.10e-3, 1.30e-2).unwrap();
        let noisy = sample_noisy(&clean, &params, 17).unwrap();
        let est = estimate_fine(
            &planes_of(&noisy),
            &planes_of(&clean),
            1.0,
            &CneParams::default(),
        )
        .unwrap();
        let alpha_dev = (est.params.alpha() - params.alpha()).abs() / params.alpha();
        let sigma_dev = (est.params.sigma() - params.sigma()).abs() / params.sigma();
        assert!(alpha_dev <= 0.05, "alpha deviation {alpha_dev}");
        assert!(sigma_dev <= 0.10, "sigma deviation {sigma_dev}");
    }

    #[test]
    fn fine_estimate_degenerate_when_surrogate_equals_noisy() {
        let clean = generate_clean_scene(256, 10);
        let params = NoiseParams::new(4.6e-3, 7.2e-3).unwrap();
        let noisy = sample_noisy(&clean, &params, 23).unwrap();
        let planes = planes_of(&noisy);
        let est = estimate_fine(&planes, &planes, 1.0, &CneParams::default()).unwrap();
        assert!(est.params.alpha() <= 1e-6);
        assert_eq!(est.params.sigma(), 0.0);
        assert!(
            est.warnings.iter().any(|w| w.contains("zero")),
            "{:?}",
            est.warnings
        );
    }

    #[test]
    fn fine_estimate_shape_mismatch() {
        let a = vec![Array2::zeros((64, 64)); 4];
        let b = vec![Array2::zeros((32, 64)); 4];
        assert!(matches!(
            estimate_fine(&a, &b, 1.0, &CneParams::default()),
            Err(YondError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn texture_everywhere_raises_warning() {
        let scene = generate_texture_scene(512, 4);
        let params = NoiseParams::new(1.0e-3, 1.5e-3).unwrap();
        let noisy = sample_noisy(&scene, &params, 31).unwrap();
        let est = estimate_coarse(&planes_of(&noisy), 1.0, &CneParams::default()).unwrap();
        assert!(
            est.warnings.iter().any(|w| w.contains("texture")),
            "expected texture warning, got {:?}",
            est.warnings
        );
        // Parameters are still returned.
        assert!(est.params.alpha() > 0.0);
    }

    #[test]
    fn clean_scene_does_not_raise_texture_warning() {
        let scene = generate_clean_scene(512, 5);
        let params = NoiseParams::new(4.6e-3, 7.2e-3).unwrap();
        let noisy = sample_noisy(&scene, &params, 37).unwrap();
        let est = estimate_coarse(&planes_of(&noisy), 1.0, &CneParams::default()).unwrap();
        assert!(
            !est.warnings.iter().any(|w| w.contains("texture")),
            "unexpected warnings {:?}",
            est.warnings
        );
    }
}
