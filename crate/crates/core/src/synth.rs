//! Synthetic experiment generation: calibrated camera parameter rows,
//! deterministic clean test scenes, and noisy/clean dataset construction.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, YondError};
use crate::noise::{sample_noisy, NoiseParams};
use crate::raw::{save_raw, BayerImage, CfaPattern};

/// One calibrated (camera, ISO) operating point with normalized noise
/// parameters (image scaled to [0, 1]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIso {
    pub camera: &'static str,
    pub iso: u32,
    pub alpha: f64,
    pub sigma: f64,
}

/// The eight calibrated smartphone / DSLR operating points used by the
/// noise-estimation experiments.
pub const CAMERA_GRID: [CameraIso; 8] = [
    CameraIso { camera: "phone", iso: 800, alpha: 1.10e-3, sigma: 2.20e-3 },
    CameraIso { camera: "phone", iso: 1600, alpha: 2.30e-3, sigma: 4.00e-3 },
    CameraIso { camera: "phone", iso: 3200, alpha: 4.60e-3, sigma: 7.20e-3 },
    CameraIso { camera: "phone", iso: 6400, alpha: 9.10e-3, sigma: 1.30e-2 },
    CameraIso { camera: "dslr", iso: 3200, alpha: 1.90e-3, sigma: 2.50e-3 },
    CameraIso { camera: "dslr", iso: 6400, alpha: 3.85e-3, sigma: 4.50e-3 },
    CameraIso { camera: "dslr", iso: 12800, alpha: 7.70e-3, sigma: 9.00e-3 },
    CameraIso { camera: "dslr", iso: 25600, alpha: 1.55e-2, sigma: 1.63e-2 },
];

/// Look up one row of [`CAMERA_GRID`].
pub fn camera_params(camera: &str, iso: u32) -> Option<CameraIso> {
    CAMERA_GRID
        .iter()
        .copied()
        .find(|r| r.camera.eq_ignore_ascii_case(camera) && r.iso == iso)
}

impl CameraIso {
    pub fn noise_params(&self) -> NoiseParams {
        NoiseParams::new(self.alpha, self.sigma).expect("calibrated rows are valid")
    }
}

/// Default storage levels for generated pseudo-raw frames. The black
/// offset leaves 4-sigma headroom for read-noise excursions below zero
/// signal at the noisiest operating point.
pub const SUITE_BLACK_LEVEL: f64 = 2048.0;
pub const SUITE_WHITE_LEVEL: f64 = 18432.0;

/// Ceiling for clean signal in normalized units, keeping bright-pixel
/// noise tails inside 16-bit storage.
pub const SUITE_MAX_SIGNAL: f64 = 0.6;

/// Deterministic pseudo-natural clean scene in [low, high] normalized
/// units: smooth base illumination, flat rectangles and disks (the flat
/// regions noise estimation depends on), and a couple of textured patches.
pub fn generate_clean_scene(size: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xC1EA_5CE0);
    let n = size as f64;
    let (low, high) = (0.02, SUITE_MAX_SIGNAL);

    // Smooth base illumination from a few low-frequency waves.
    let (a1, a2, p1, p2) = (
        rng.random::<f64>() * 0.08,
        rng.random::<f64>() * 0.08,
        rng.random::<f64>() * std::f64::consts::TAU,
        rng.random::<f64>() * std::f64::consts::TAU,
    );
    let base_level = low + rng.random::<f64>() * 0.3 * (high - low);
    let mut img = Array2::from_shape_fn((size, size), |(r, c)| {
        base_level
            + a1 * ((r as f64 / n) * 2.6 + p1).sin()
            + a2 * ((c as f64 / n) * 3.1 + p2).cos()
    });

    // Flat rectangles at assorted levels, several of them large.
    let rects = 8 + (rng.random::<u32>() % 4) as usize;
    for i in 0..rects {
        let frac = if i < 3 { 0.5 } else { 0.25 };
        let rh = ((rng.random::<f64>() * frac + 0.08) * n) as usize;
        let rw = ((rng.random::<f64>() * frac + 0.08) * n) as usize;
        let r0 = (rng.random::<f64>() * (n - rh as f64)) as usize;
        let c0 = (rng.random::<f64>() * (n - rw as f64)) as usize;
        let level = low + rng.random::<f64>() * (high - low);
        for r in r0..(r0 + rh).min(size) {
            for c in c0..(c0 + rw).min(size) {
                img[[r, c]] = level;
            }
        }
    }

    // Flat disks.
    for _ in 0..3 {
        let cy = rng.random::<f64>() * n;
        let cx = rng.random::<f64>() * n;
        let rad = (0.05 + rng.random::<f64>() * 0.12) * n;
        let level = low + rng.random::<f64>() * (high - low);
        for r in 0..size {
            for c in 0..size {
                let d = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                if d < rad * rad {
                    img[[r, c]] = level;
                }
            }
        }
    }

    // A couple of textured patches (sinusoid products).
    for _ in 0..2 {
        let rh = (0.2 * n) as usize;
        let r0 = (rng.random::<f64>() * (n - rh as f64)) as usize;
        let c0 = (rng.random::<f64>() * (n - rh as f64)) as usize;
        let (fr, fc) = (
            0.5 + rng.random::<f64>() * 1.2,
            0.5 + rng.random::<f64>() * 1.2,
        );
        let amp = 0.04 + rng.random::<f64>() * 0.05;
        for r in r0..(r0 + rh).min(size) {
            for c in c0..(c0 + rh).min(size) {
                img[[r, c]] += amp * (r as f64 * fr).sin() * (c as f64 * fc).cos();
            }
        }
    }

    img.mapv(|v| v.clamp(low, high))
}

/// A scene with no flat regions at all: dense texture mixing frequencies
/// low enough to survive heavy mean filtering with fine detail.
pub fn generate_texture_scene(size: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x7E57_0000);
    let phases: Vec<(f64, f64, f64, f64)> = (0..8)
        .map(|i| {
            let band = if i < 4 { 0.04 } else { 0.5 };
            (
                band * (1.0 + rng.random::<f64>() * 3.0),
                band * (1.0 + rng.random::<f64>() * 3.0),
                rng.random::<f64>() * std::f64::consts::TAU,
                0.02 + rng.random::<f64>() * 0.05,
            )
        })
        .collect();
    Array2::from_shape_fn((size, size), |(r, c)| {
        let mut v = 0.3;
        for &(fr, fc, p, amp) in &phases {
            v += amp * (r as f64 * fr + p).sin() * (c as f64 * fc + p).cos();
        }
        v.clamp(0.02, SUITE_MAX_SIGNAL)
    })
}

/// One noisy/clean pair in a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub clean: PathBuf,
    pub noisy: PathBuf,
    pub camera: String,
    pub iso: u32,
    pub alpha: f64,
    pub sigma: f64,
    pub seed: u64,
}

/// Manifest of a generated dataset, stored as `manifest.csv` next to the
/// frames.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SuiteManifest {
    pub entries: Vec<SuiteEntry>,
}

impl SuiteManifest {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "clean,noisy,camera,iso,alpha,sigma,seed")?;
        for e in &self.entries {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                e.clean.display(),
                e.noisy.display(),
                e.camera,
                e.iso,
                e.alpha,
                e.sigma,
                e.seed
            )?;
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (i == 0 && line.starts_with("clean")) {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(YondError::Metadata(format!("bad manifest row: {line:?}")));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|e| YondError::Metadata(format!("bad number {s:?}: {e}")))
            };
            entries.push(SuiteEntry {
                clean: PathBuf::from(f[0]),
                noisy: PathBuf::from(f[1]),
                camera: f[2].to_string(),
                iso: f[3]
                    .parse()
                    .map_err(|e| YondError::Metadata(format!("bad iso: {e}")))?,
                alpha: num(f[4])?,
                sigma: num(f[5])?,
                seed: f[6]
                    .parse()
                    .map_err(|e| YondError::Metadata(format!("bad seed: {e}")))?,
            });
        }
        Ok(Self { entries })
    }
}

/// Wrap a clean scene in [0, 1] normalized units into a pseudo-raw frame
/// at the suite storage levels.
pub fn scene_to_frame(scene: &Array2<f64>, tag: Option<String>) -> Result<BayerImage> {
    let range = SUITE_WHITE_LEVEL - SUITE_BLACK_LEVEL;
    let data = scene.mapv(|v| SUITE_BLACK_LEVEL + v * range);
    BayerImage::new(
        data,
        CfaPattern::Rggb,
        SUITE_BLACK_LEVEL,
        SUITE_WHITE_LEVEL,
        tag,
    )
}

/// Build noisy/clean pairs for every (clean scene, parameter row)
/// combination and write them, with a manifest, under `out_dir`.
///
/// Clean scenes are given in normalized [0, 1] units; sampling happens in
/// those units so the stored parameters match the normalized convention.
pub fn make_synthetic_suite(
    clean_scenes: &[(String, Array2<f64>)],
    rows: &[CameraIso],
    seed: u64,
    out_dir: &Path,
) -> Result<SuiteManifest> {
    if clean_scenes.is_empty() {
        return Err(YondError::InsufficientData("no clean scenes given".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let range = SUITE_WHITE_LEVEL - SUITE_BLACK_LEVEL;
    let mut manifest = SuiteManifest::default();
    for (si, (name, scene)) in clean_scenes.iter().enumerate() {
        if scene.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(YondError::InvalidParameter(format!(
                "clean scene {name} must lie in [0, 1]"
            )));
        }
        let clean_path = out_dir.join(format!("{name}_clean.raw16"));
        save_raw(&scene_to_frame(scene, Some(name.clone()))?, &clean_path)?;
        for (ri, row) in rows.iter().enumerate() {
            let entry_seed = seed
                .wrapping_add(si as u64 * 1_000_003)
                .wrapping_add(ri as u64 * 7919);
            let noisy01 = sample_noisy(scene, &row.noise_params(), entry_seed)?;
            let tag = format!("{} ISO-{}", row.camera, row.iso);
            let data = noisy01.mapv(|v| SUITE_BLACK_LEVEL + v * range);
            let noisy = BayerImage::new(
                data,
                CfaPattern::Rggb,
                SUITE_BLACK_LEVEL,
                SUITE_WHITE_LEVEL,
                Some(tag),
            )?;
            let noisy_path = out_dir.join(format!("{name}_{}_iso{}.raw16", row.camera, row.iso));
            save_raw(&noisy, &noisy_path)?;
            manifest.entries.push(SuiteEntry {
                clean: clean_path.clone(),
                noisy: noisy_path,
                camera: row.camera.to_string(),
                iso: row.iso,
                alpha: row.alpha,
                sigma: row.sigma,
                seed: entry_seed,
            });
        }
    }
    manifest.write_csv(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raw::load_raw;

    #[test]
    fn camera_grid_lookup() {
        let p = camera_params("phone", 800).unwrap();
        assert_eq!(p.alpha, 1.10e-3);
        assert_eq!(p.sigma, 2.20e-3);
        let d = camera_params("DSLR", 25600).unwrap();
        assert_eq!(d.alpha, 1.55e-2);
        assert_eq!(d.sigma, 1.63e-2);
        assert!(camera_params("phone", 100).is_none());
    }

    #[test]
    fn clean_scene_is_deterministic_and_bounded() {
        let a = generate_clean_scene(128, 5);
        let b = generate_clean_scene(128, 5);
        assert_eq!(a, b);
        let c = generate_clean_scene(128, 6);
        assert_ne!(a, c);
        assert!(a.iter().all(|v| (0.0..=SUITE_MAX_SIGNAL).contains(v)));
    }

    #[test]
    fn suite_round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = vec![("s0".to_string(), generate_clean_scene(64, 1))];
        let rows = [CAMERA_GRID[0], CAMERA_GRID[7]];
        let m1 = make_synthetic_suite(&scenes, &rows, 42, dir.path()).unwrap();
        assert_eq!(m1.entries.len(), 2);
        let noisy = load_raw(&m1.entries[0].noisy).unwrap();
        assert_eq!(noisy.black_level(), SUITE_BLACK_LEVEL);
        assert_eq!(noisy.tag(), Some("phone ISO-800"));

        let loaded = SuiteManifest::read_csv(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(loaded, m1);

        // Same seed regenerates byte-identical frames.
        let bytes_a = std::fs::read(&m1.entries[1].noisy).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let m2 = make_synthetic_suite(&scenes, &rows, 42, dir2.path()).unwrap();
        let bytes_b = std::fs::read(&m2.entries[1].noisy).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn empty_clean_set_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(make_synthetic_suite(&[], &CAMERA_GRID, 0, dir.path()).is_err());
    }
}
