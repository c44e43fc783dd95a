//! End-to-end two-stage denoising orchestration.
//!
//! Stage 1 estimates coarse noise parameters from the noisy frame,
//! transforms, denoises and inverts to produce a coarse surrogate. Stage 2
//! refines the parameter estimate against that surrogate and then
//! transforms the ORIGINAL noisy frame again for the final denoise; the
//! surrogate never contributes pixels to the output.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cne::{estimate_coarse, estimate_fine, CneParams, EstimationReport, StageReport};
use crate::denoise::{
    Decay, DctDenoiser, Denoiser, DenoiserGuidance, ExternalDenoiser, GaussianDenoiser,
    IterConfig, DEFAULT_SIGMA_MULTIPLIER,
};
use crate::error::{Result, YondError};
use crate::noise::NoiseParams;
use crate::raw::{pack, unpack, BayerImage, PackedPlanes};
use crate::vst::{
    default_read_noise_grid, default_signal_grid, em_vst_forward_array,
    inverse_after_denoise_array, LogGrid, LutStore, TransformContext,
};

/// Which denoiser the pipeline builds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DenoiserKind {
    Dct { wiener: bool },
    Gaussian { spatial_scale: f64 },
    External { command: Vec<String> },
}

impl DenoiserKind {
    pub fn build(&self) -> Result<Box<dyn Denoiser>> {
        Ok(match self {
            DenoiserKind::Dct { wiener } => Box::new(DctDenoiser { wiener: *wiener }),
            DenoiserKind::Gaussian { spatial_scale } => Box::new(GaussianDenoiser {
                spatial_scale: *spatial_scale,
            }),
            DenoiserKind::External { command } => {
                Box::new(ExternalDenoiser::new(command.clone())?)
            }
        })
    }
}

/// The adjustable-parameter surface of the pipeline. Every knob mirrors a
/// CLI flag and a config file key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Statistics window size.
    pub p: usize,
    /// Coarse-stage pre-blur window size.
    pub p_prime: usize,
    /// Manual threshold-quantile override for the flat-region search.
    pub ats_quantile: Option<f64>,
    /// Guidance multiplier (compensates the transform's extra noise).
    pub sigma_multiplier: f64,
    /// Manual noise parameters; skips estimation entirely when set.
    pub params_override: Option<NoiseParams>,
    pub denoiser: DenoiserKind,
    /// Iterative refinement settings for the final denoise.
    pub iter: Option<IterConfig>,
    pub lut_signal: LogGrid,
    pub lut_read_noise: LogGrid,
    /// Directory for on-disk bias table caching; in-memory only if unset.
    pub lut_cache_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            p: 29,
            p_prime: 19,
            ats_quantile: None,
            sigma_multiplier: DEFAULT_SIGMA_MULTIPLIER,
            params_override: None,
            denoiser: DenoiserKind::Dct { wiener: true },
            iter: None,
            lut_signal: default_signal_grid(),
            lut_read_noise: default_read_noise_grid(),
            lut_cache_dir: None,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn cne_params(&self) -> CneParams {
        CneParams {
            p: self.p,
            p_prime: self.p_prime,
            ats_quantile: self.ats_quantile,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cne_params().validate()?;
        if !(self.sigma_multiplier > 0.0 && self.sigma_multiplier.is_finite()) {
            return Err(YondError::Config(format!(
                "sigma multiplier must be positive, got {}",
                self.sigma_multiplier
            )));
        }
        if let Some(it) = &self.iter {
            it.validate()?;
        }
        Ok(())
    }

    /// Default iterative settings when only `--iterative` is requested:
    /// T = 10, eta = 0.8, final guidance 5/255 in [0,1] units.
    pub fn default_iter(seed: u64) -> IterConfig {
        IterConfig {
            iterations: 10,
            eta: 0.8,
            decay: Decay::TargetSigma(5.0 / 255.0),
            seed,
        }
    }

    /// Apply one `key = value` setting (config file or CLI mirror).
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: &dyn std::fmt::Display| YondError::Config(format!("{key} = {value}: {e}"));
        let parse_f64 = |v: &str| v.parse::<f64>().map_err(|e| bad(&e));
        let parse_usize = |v: &str| v.parse::<usize>().map_err(|e| bad(&e));
        match key {
            "p" => self.p = parse_usize(value)?,
            "p-prime" => self.p_prime = parse_usize(value)?,
            "ats-quantile" => self.ats_quantile = Some(parse_f64(value)?),
            "sigma-mult" => self.sigma_multiplier = parse_f64(value)?,
            "alpha" => {
                let alpha = parse_f64(value)?;
                let sigma = self.params_override.map(|p| p.sigma()).unwrap_or(0.0);
                self.params_override = Some(NoiseParams::new(alpha, sigma)?);
            }
            "sigma" => {
                let sigma = parse_f64(value)?;
                let alpha = self
                    .params_override
                    .map(|p| p.alpha())
                    .ok_or_else(|| YondError::Config("set alpha before sigma".into()))?;
                self.params_override = Some(NoiseParams::new(alpha, sigma)?);
            }
            "denoiser" => {
                self.denoiser = match value {
                    "dct" => DenoiserKind::Dct { wiener: true },
                    "dct-ht" => DenoiserKind::Dct { wiener: false },
                    "gaussian" => DenoiserKind::Gaussian {
                        spatial_scale: GaussianDenoiser::default().spatial_scale,
                    },
                    other => {
                        return Err(YondError::Config(format!(
                            "unknown denoiser {other:?} (dct, dct-ht, gaussian, or external-cmd)"
                        )))
                    }
                }
            }
            "external-cmd" => {
                let command: Vec<String> =
                    value.split_whitespace().map(str::to_string).collect();
                if command.is_empty() {
                    return Err(YondError::Config("external-cmd is empty".into()));
                }
                self.denoiser = DenoiserKind::External { command };
            }
            "gaussian-scale" => {
                self.denoiser = DenoiserKind::Gaussian {
                    spatial_scale: parse_f64(value)?,
                }
            }
            "iterations" => {
                let it = self.iter.get_or_insert(Self::default_iter(self.seed));
                it.iterations = parse_usize(value)?;
            }
            "eta" => {
                let it = self.iter.get_or_insert(Self::default_iter(self.seed));
                it.eta = parse_f64(value)?;
            }
            "sigma-target" => {
                let it = self.iter.get_or_insert(Self::default_iter(self.seed));
                it.decay = Decay::TargetSigma(parse_f64(value)?);
            }
            "gamma" => {
                let it = self.iter.get_or_insert(Self::default_iter(self.seed));
                it.decay = Decay::Gamma(parse_f64(value)?);
            }
            "lut-chi-points" => {
                self.lut_signal = LogGrid::new(
                    parse_usize(value)?,
                    self.lut_signal.min(),
                    self.lut_signal.max(),
                )?
            }
            "lut-chi-min" => {
                self.lut_signal = LogGrid::new(
                    self.lut_signal.count,
                    parse_f64(value)?,
                    self.lut_signal.max(),
                )?
            }
            "lut-chi-max" => {
                self.lut_signal = LogGrid::new(
                    self.lut_signal.count,
                    self.lut_signal.min(),
                    parse_f64(value)?,
                )?
            }
            "lut-sigma-points" => {
                self.lut_read_noise = LogGrid::new(
                    parse_usize(value)?,
                    self.lut_read_noise.min(),
                    self.lut_read_noise.max(),
                )?
            }
            "lut-sigma-min" => {
                self.lut_read_noise = LogGrid::new(
                    self.lut_read_noise.count,
                    parse_f64(value)?,
                    self.lut_read_noise.max(),
                )?
            }
            "lut-sigma-max" => {
                self.lut_read_noise = LogGrid::new(
                    self.lut_read_noise.count,
                    self.lut_read_noise.min(),
                    parse_f64(value)?,
                )?
            }
            "lut-cache" => self.lut_cache_dir = Some(PathBuf::from(value)),
            "seed" => {
                self.seed = value.parse().map_err(|e| bad(&e))?;
                if let Some(it) = &mut self.iter {
                    it.seed = self.seed;
                }
            }
            other => {
                return Err(YondError::Config(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// Parse a plain-text config file: one `key = value` per line,
    /// `#` starts a comment.
    pub fn apply_config_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                YondError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_config_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_config_text(&text)
    }
}

/// Seconds spent in each pipeline phase.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct StageTiming {
    pub coarse_estimate: f64,
    pub coarse_denoise: f64,
    pub fine_estimate: f64,
    pub fine_denoise: f64,
}

/// Output of a pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub denoised: BayerImage,
    pub report: EstimationReport,
    pub coarse_context: Option<TransformContext>,
    /// The context used for the final transform.
    pub fine_context: TransformContext,
    pub timing: StageTiming,
    /// Digest of the normalized noisy planes at pipeline entry.
    pub noisy_digest: u64,
    /// Digest of the planes fed to the stage-2 forward transform; always
    /// equals `noisy_digest` because the surrogate never enters the
    /// output path.
    pub stage2_input_digest: u64,
}

fn digest_planes(planes: &[Array2<f64>]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for plane in planes {
        for v in plane.iter() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
    }
    h
}

fn normalize_planes(packed: &PackedPlanes) -> Vec<Array2<f64>> {
    let range = packed.white_level - packed.black_level;
    let mu = packed.black_level;
    packed
        .planes
        .iter()
        .map(|p| p.mapv(|v| (v - mu) / range))
        .collect()
}

enum FinalDenoise {
    None,
    Single,
    Iterative(IterConfig),
}

struct RunOutput {
    report: EstimationReport,
    result: Option<(Vec<Array2<f64>>, TransformContext)>,
    coarse_context: Option<TransformContext>,
    fine_context: Option<TransformContext>,
    timing: StageTiming,
    noisy_digest: u64,
    stage2_input_digest: u64,
}

fn run_stages(
    noisy: &BayerImage,
    denoiser: &dyn Denoiser,
    cfg: &PipelineConfig,
    final_denoise: FinalDenoise,
) -> Result<RunOutput> {
    cfg.validate()?;
    let packed = pack(noisy);
    let planes = normalize_planes(&packed);
    let noisy_digest = digest_planes(&planes);
    let store = LutStore::new(cfg.lut_cache_dir.clone());
    let lut = store.get_or_build(cfg.lut_signal, cfg.lut_read_noise)?;
    let mut timing = StageTiming::default();

    let run_final = |ctx: &TransformContext,
                     timing: &mut StageTiming|
     -> Result<Option<Vec<Array2<f64>>>> {
        let t0 = Instant::now();
        let transformed: Vec<Array2<f64>> = planes
            .iter()
            .map(|p| em_vst_forward_array(p, ctx, &lut))
            .collect();
        let guidance = DenoiserGuidance::new(ctx.sigma_snr, cfg.sigma_multiplier)?;
        let denoised = match &final_denoise {
            FinalDenoise::None => return Ok(None),
            FinalDenoise::Single => denoiser.denoise(&transformed, &guidance)?,
            FinalDenoise::Iterative(it) => {
                crate::denoise::iterative_denoise(&transformed, denoiser, &guidance, it)?
            }
        };
        let out = denoised
            .iter()
            .map(|p| inverse_after_denoise_array(p, ctx))
            .collect();
        timing.fine_denoise = t0.elapsed().as_secs_f64();
        Ok(Some(out))
    };

    // Manual parameter override: estimation is skipped, both stages
    // collapse into one denoise of the original frame.
    if let Some(params) = cfg.params_override {
        let ctx = TransformContext::new(params, 0.0, 1.0)?;
        let report = EstimationReport {
            coarse: None,
            fine: None,
            params_override: Some(params),
            warnings: Vec::new(),
            stages_skipped: true,
        };
        let out = run_final(&ctx, &mut timing)?;
        return Ok(RunOutput {
            report,
            result: out.map(|planes| (planes, ctx)),
            coarse_context: None,
            fine_context: Some(ctx),
            timing,
            noisy_digest,
            stage2_input_digest: noisy_digest,
        });
    }

    // Stage 1: coarse estimate, then one transform-denoise-inverse round
    // to build the clean-image surrogate.
    let t0 = Instant::now();
    let coarse = estimate_coarse(&planes, 1.0, &cfg.cne_params())?;
    timing.coarse_estimate = t0.elapsed().as_secs_f64();

    let ctx_c = TransformContext::new(coarse.params, 0.0, 1.0)?;
    let t0 = Instant::now();
    let transformed: Vec<Array2<f64>> = planes
        .iter()
        .map(|p| em_vst_forward_array(p, &ctx_c, &lut))
        .collect();
    let guidance_c = DenoiserGuidance::new(ctx_c.sigma_snr, cfg.sigma_multiplier)?;
    let den_c = denoiser.denoise(&transformed, &guidance_c)?;
    let surrogate: Vec<Array2<f64>> = den_c
        .iter()
        .map(|p| inverse_after_denoise_array(p, &ctx_c))
        .collect();
    timing.coarse_denoise = t0.elapsed().as_secs_f64();

    // Stage 2: refine the estimate, then transform the ORIGINAL planes.
    let t0 = Instant::now();
    let fine = estimate_fine(&planes, &surrogate, 1.0, &cfg.cne_params())?;
    timing.fine_estimate = t0.elapsed().as_secs_f64();

    let ctx_f = TransformContext::new(fine.params, 0.0, 1.0)?;
    let stage2_input_digest = digest_planes(&planes);

    let mut warnings = Vec::new();
    warnings.extend(coarse.warnings.iter().map(|w| format!("coarse: {w}")));
    warnings.extend(fine.warnings.iter().map(|w| format!("fine: {w}")));
    let report = EstimationReport {
        coarse: Some(StageReport::from_estimate(&coarse)),
        fine: Some(StageReport::from_estimate(&fine)),
        params_override: None,
        warnings,
        stages_skipped: false,
    };

    let out = run_final(&ctx_f, &mut timing)?;
    Ok(RunOutput {
        report,
        result: out.map(|planes| (planes, ctx_f)),
        coarse_context: Some(ctx_c),
        fine_context: Some(ctx_f),
        timing,
        noisy_digest,
        stage2_input_digest,
    })
}

fn assemble_result(noisy: &BayerImage, run: RunOutput) -> Result<PipelineResult> {
    let (denoised_norm, ctx) = run
        .result
        .expect("assemble_result requires a final denoise");
    // The report's final parameters are by construction the ones the
    // final transform consumed.
    debug_assert_eq!(
        run.report.final_params().map(|p| p.alpha()),
        Some(ctx.params.alpha())
    );
    let range = noisy.white_level() - noisy.black_level();
    let mu = noisy.black_level();
    let packed = pack(noisy);
    let denoised_planes: Vec<Array2<f64>> = denoised_norm
        .iter()
        .map(|p| p.mapv(|v| v * range + mu))
        .collect();
    let denoised = unpack(&PackedPlanes {
        planes: [
            denoised_planes[0].clone(),
            denoised_planes[1].clone(),
            denoised_planes[2].clone(),
            denoised_planes[3].clone(),
        ],
        cfa: packed.cfa,
        black_level: packed.black_level,
        white_level: packed.white_level,
        tag: packed.tag.clone(),
    })?;
    Ok(PipelineResult {
        denoised,
        report: run.report,
        coarse_context: run.coarse_context,
        fine_context: ctx,
        timing: run.timing,
        noisy_digest: run.noisy_digest,
        stage2_input_digest: run.stage2_input_digest,
    })
}

/// The standard two-stage run with a single final denoise.
pub fn run_yond(noisy: &BayerImage, cfg: &PipelineConfig) -> Result<PipelineResult> {
    let denoiser = cfg.denoiser.build()?;
    let run = run_stages(noisy, denoiser.as_ref(), cfg, FinalDenoise::Single)?;
    assemble_result(noisy, run)
}

/// Identical to [`run_yond`] except the final denoise uses the iterative
/// refinement strategy (configured via `cfg.iter`, defaulting to the
/// reference settings).
pub fn run_yond_p(noisy: &BayerImage, cfg: &PipelineConfig) -> Result<PipelineResult> {
    let iter = cfg
        .iter
        .unwrap_or_else(|| PipelineConfig::default_iter(cfg.seed));
    let denoiser = cfg.denoiser.build()?;
    let run = run_stages(noisy, denoiser.as_ref(), cfg, FinalDenoise::Iterative(iter))?;
    assemble_result(noisy, run)
}

/// Estimation only: both stages run (including the stage-1 denoise that
/// builds the surrogate) but no final denoise is performed.
pub fn estimate_only(
    noisy: &BayerImage,
    denoiser: &dyn Denoiser,
    cfg: &PipelineConfig,
) -> Result<EstimationReport> {
    if cfg.params_override.is_some() {
        return Ok(EstimationReport {
            coarse: None,
            fine: None,
            params_override: cfg.params_override,
            warnings: Vec::new(),
            stages_skipped: true,
        });
    }
    let run = run_stages(noisy, denoiser, cfg, FinalDenoise::None)?;
    Ok(run.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr_bayer;
    use crate::noise::sample_noisy;
    use crate::raw::CfaPattern;
    use crate::synth::{generate_clean_scene, scene_to_frame, SUITE_BLACK_LEVEL, SUITE_WHITE_LEVEL};

    fn noisy_frame(seed: u64, params: &NoiseParams) -> (BayerImage, BayerImage) {
        let scene = generate_clean_scene(256, seed);
        let clean = scene_to_frame(&scene, None).unwrap();
        let noisy01 = sample_noisy(&scene, params, seed ^ 0xABCD).unwrap();
        let range = SUITE_WHITE_LEVEL - SUITE_BLACK_LEVEL;
        let noisy = clean
            .with_data(noisy01.mapv(|v| SUITE_BLACK_LEVEL + v * range))
            .unwrap();
        (clean, noisy)
    }

    fn base_config() -> PipelineConfig {
        PipelineConfig::default()
    }

    #[test]
    fn denoising_improves_psnr_and_reports_consume_fine_params() {
        let params = NoiseParams::new(4.60e-3, 7.20e-3).unwrap();
        let (clean, noisy) = noisy_frame(42, &params);
        let result = run_yond(&noisy, &base_config()).unwrap();
        let before = psnr_bayer(&clean, &noisy).unwrap();
        let after = psnr_bayer(&clean, &result.denoised).unwrap();
        assert!(after > before + 3.0, "before {before} after {after}");
        let fine = result.report.fine.as_ref().unwrap();
        assert_eq!(fine.params, result.fine_context.params);
        assert_eq!(result.noisy_digest, result.stage2_input_digest);
    }

    #[test]
    fn pipeline_is_deterministic() {
        let params = NoiseParams::new(2.30e-3, 4.00e-3).unwrap();
        let (_, noisy) = noisy_frame(7, &params);
        let a = run_yond(&noisy, &base_config()).unwrap();
        let b = run_yond(&noisy, &base_config()).unwrap();
        assert_eq!(a.denoised, b.denoised);
    }

    #[test]
    fn near_noiseless_input_passes_through() {
        let scene = generate_clean_scene(256, 3);
        let clean = scene_to_frame(&scene, None).unwrap();
        // Tiny noise: estimation finds nearly nothing, guidance collapses
        // below the pass-through threshold, and the output round-trips.
        let params = NoiseParams::new(1e-9, 1e-9).unwrap();
        let noisy01 = sample_noisy(&scene, &params, 5).unwrap();
        let range = SUITE_WHITE_LEVEL - SUITE_BLACK_LEVEL;
        let noisy = clean
            .with_data(noisy01.mapv(|v| SUITE_BLACK_LEVEL + v * range))
            .unwrap();
        let result = run_yond(&noisy, &base_config()).unwrap();
        let p = psnr_bayer(&noisy, &result.denoised).unwrap();
        assert!(p >= 60.0, "round-trip psnr {p}");
    }

    #[test]
    fn override_skips_estimation() {
        let params = NoiseParams::new(4.60e-3, 7.20e-3).unwrap();
        let (_, noisy) = noisy_frame(9, &params);
        let mut cfg = base_config();
        cfg.params_override = Some(params);
        let result = run_yond(&noisy, &cfg).unwrap();
        assert!(result.report.stages_skipped);
        assert!(result.report.coarse.is_none());
        assert_eq!(result.report.final_params(), Some(params));
        assert_eq!(result.fine_context.params, params);
    }

    #[test]
    fn yond_p_with_t1_is_bitwise_identical_to_yond() {
        let params = NoiseParams::new(9.10e-3, 1.30e-2).unwrap();
        let (_, noisy) = noisy_frame(11, &params);
        let cfg = base_config();
        let plain = run_yond(&noisy, &cfg).unwrap();
        let mut cfg_p = cfg.clone();
        cfg_p.iter = Some(IterConfig {
            iterations: 1,
            eta: 0.8,
            decay: Decay::TargetSigma(5.0 / 255.0),
            seed: 0,
        });
        let iterated = run_yond_p(&noisy, &cfg_p).unwrap();
        assert_eq!(plain.denoised, iterated.denoised);
    }

    #[test]
    fn yond_p_reduces_flat_patch_noise_at_strong_noise() {
        let params = NoiseParams::new(1.55e-2, 1.63e-2).unwrap();
        let (_, noisy) = noisy_frame(13, &params);
        let cfg = base_config();
        let plain = run_yond(&noisy, &cfg).unwrap();
        let mut cfg_p = cfg.clone();
        cfg_p.iter = Some(IterConfig {
            iterations: 10,
            eta: 0.8,
            decay: Decay::TargetSigma(5.0 / 255.0),
            seed: 21,
        });
        let iterated = run_yond_p(&noisy, &cfg_p).unwrap();
        assert_ne!(plain.denoised, iterated.denoised);
        // Residual noise on a flat patch must not grow.
        let flat_std = |img: &BayerImage| {
            let v = img.data().slice(ndarray::s![8..40, 8..40]).to_owned();
            let m = v.sum() / v.len() as f64;
            (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
        };
        // Compare against the clean patch level: both should be close,
        // the iterated result no worse than 1.5x the plain one.
        assert!(flat_std(&iterated.denoised) <= 1.5 * flat_std(&plain.denoised));
    }

    #[test]
    fn identity_external_with_eta_one_round_trips_transform() {
        // eta = 1 with an identity denoiser composes the forward and
        // inverse transforms only.
        let params = NoiseParams::new(4.60e-3, 7.20e-3).unwrap();
        let (_, noisy) = noisy_frame(15, &params);
        let mut cfg = base_config();
        cfg.params_override = Some(params);
        cfg.denoiser = DenoiserKind::External {
            command: vec!["cat".into()],
        };
        cfg.iter = Some(IterConfig {
            iterations: 4,
            eta: 1.0,
            decay: Decay::Gamma(0.5),
            seed: 0,
        });
        let result = run_yond_p(&noisy, &cfg).unwrap();
        // The wire format quantizes to f32; allow that much.
        let p = psnr_bayer(&noisy, &result.denoised).unwrap();
        assert!(p > 70.0, "identity round trip psnr {p}");
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = PipelineConfig::default();
        cfg.apply_config_text(
            "# comment\n\
             p = 15\n\
             p-prime = 9\n\
             sigma-mult = 0.93   # weaker denoising\n\
             denoiser = gaussian\n\
             alpha = 1e-3\n\
             sigma = 2e-3\n\
             seed = 7\n",
        )
        .unwrap();
        assert_eq!(cfg.p, 15);
        assert_eq!(cfg.p_prime, 9);
        assert!((cfg.sigma_multiplier - 0.93).abs() < 1e-15);
        assert!(matches!(cfg.denoiser, DenoiserKind::Gaussian { .. }));
        let o = cfg.params_override.unwrap();
        assert_eq!(o.alpha(), 1e-3);
        assert_eq!(o.sigma(), 2e-3);
        assert_eq!(cfg.seed, 7);

        let mut bad = PipelineConfig::default();
        assert!(bad.apply_config_text("p 15").is_err());
        assert!(bad.apply_config_text("unknown-key = 3").is_err());
        assert!(bad.apply_config_text("p = nope").is_err());
    }

    #[test]
    fn run_cne_produces_both_stages() {
        let params = NoiseParams::new(7.70e-3, 9.00e-3).unwrap();
        let (_, noisy) = noisy_frame(17, &params);
        let cfg = base_config();
        let denoiser = cfg.denoiser.build().unwrap();
        let report = crate::cne::run_cne(&noisy, denoiser.as_ref(), &cfg).unwrap();
        assert!(!report.stages_skipped);
        let coarse = report.coarse.as_ref().unwrap();
        let fine = report.fine.as_ref().unwrap();
        assert_eq!(coarse.candidates.len(), crate::cne::ATS_CANDIDATES);
        let fine_dev = (fine.params.alpha() - params.alpha()).abs() / params.alpha();
        assert!(fine_dev <= 0.10, "fine alpha deviation {fine_dev}");
    }

    #[test]
    fn texture_everywhere_still_returns_parameters() {
        let scene = crate::synth::generate_texture_scene(256, 19);
        let clean = scene_to_frame(&scene, None).unwrap();
        let params = NoiseParams::new(1.10e-3, 2.20e-3).unwrap();
        let noisy01 = sample_noisy(&scene, &params, 23).unwrap();
        let range = SUITE_WHITE_LEVEL - SUITE_BLACK_LEVEL;
        let noisy = clean
            .with_data(noisy01.mapv(|v| SUITE_BLACK_LEVEL + v * range))
            .unwrap();
        let cfg = base_config();
        let denoiser = cfg.denoiser.build().unwrap();
        let report = crate::cne::run_cne(&noisy, denoiser.as_ref(), &cfg).unwrap();
        assert!(report
            .warnings
            .iter()
            .any(|w| w.contains("texture")), "warnings: {:?}", report.warnings);
        assert!(report.final_params().is_some());
    }

    #[test]
    fn flat_field_fine_stays_close_to_coarse() {
        // On a flat-field frame the coarse stage is already unbiased, so
        // refinement barely moves the parameters.
        let scene = Array2::from_elem((256, 256), 0.4);
        let clean = scene_to_frame(&scene, None).unwrap();
        let params = NoiseParams::new(4.60e-3, 7.20e-3).unwrap();
        let noisy01 = sample_noisy(&scene, &params, 29).unwrap();
        let range = SUITE_WHITE_LEVEL - SUITE_BLACK_LEVEL;
        let noisy = clean
            .with_data(noisy01.mapv(|v| SUITE_BLACK_LEVEL + v * range))
            .unwrap();
        let cfg = base_config();
        let denoiser = cfg.denoiser.build().unwrap();
        let report = crate::cne::run_cne(&noisy, denoiser.as_ref(), &cfg).unwrap();
        let coarse = report.coarse.unwrap().params;
        let fine = report.fine.unwrap().params;
        let drift = (fine.alpha() - coarse.alpha()).abs() / coarse.alpha();
        assert!(drift < 0.02, "alpha drift {drift}");
    }

    #[test]
    fn cfa_pattern_survives_pipeline() {
        let params = NoiseParams::new(2.30e-3, 4.00e-3).unwrap();
        let scene = generate_clean_scene(128, 31);
        let noisy01 = sample_noisy(&scene, &params, 37).unwrap();
        let range = SUITE_WHITE_LEVEL - SUITE_BLACK_LEVEL;
        let noisy = BayerImage::new(
            noisy01.mapv(|v| SUITE_BLACK_LEVEL + v * range),
            CfaPattern::Gbrg,
            SUITE_BLACK_LEVEL,
            SUITE_WHITE_LEVEL,
            Some("tagged".into()),
        )
        .unwrap();
        let result = run_yond(&noisy, &base_config()).unwrap();
        assert_eq!(result.denoised.cfa(), CfaPattern::Gbrg);
        assert_eq!(result.denoised.tag(), Some("tagged"));
        assert_eq!(result.denoised.width(), 128);
    }
}
