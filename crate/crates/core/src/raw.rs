//! Raw Bayer frame representation, CFA packing, normalization and file I/O.
//!
//! A raw frame is stored as a single-plane mosaic together with its CFA
//! pattern and black/white levels. Packing splits the mosaic into four
//! half-resolution planes in a fixed canonical order (R, G1, G2, B) so that
//! everything downstream is pattern-agnostic.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Result, YondError};
use crate::noise::NoiseParams;

/// The four supported 2x2 Bayer color filter array layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CfaPattern {
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}

impl CfaPattern {
    pub const ALL: [CfaPattern; 4] = [
        CfaPattern::Rggb,
        CfaPattern::Bggr,
        CfaPattern::Grbg,
        CfaPattern::Gbrg,
    ];

    /// Per-plane (row, col) offsets inside the 2x2 cell, in canonical
    /// R, G1, G2, B output order. G1 is the green sharing a row with R.
    pub fn offsets(self) -> [(usize, usize); 4] {
        match self {
            CfaPattern::Rggb => [(0, 0), (0, 1), (1, 0), (1, 1)],
            CfaPattern::Bggr => [(1, 1), (1, 0), (0, 1), (0, 0)],
            CfaPattern::Grbg => [(0, 1), (0, 0), (1, 1), (1, 0)],
            CfaPattern::Gbrg => [(1, 0), (1, 1), (0, 0), (0, 1)],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CfaPattern::Rggb => "RGGB",
            CfaPattern::Bggr => "BGGR",
            CfaPattern::Grbg => "GRBG",
            CfaPattern::Gbrg => "GBRG",
        }
    }
}

impl FromStr for CfaPattern {
    type Err = YondError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RGGB" => Ok(CfaPattern::Rggb),
            "BGGR" => Ok(CfaPattern::Bggr),
            "GRBG" => Ok(CfaPattern::Grbg),
            "GBRG" => Ok(CfaPattern::Gbrg),
            other => Err(YondError::Metadata(format!("unknown cfa pattern {other:?}"))),
        }
    }
}

impl fmt::Display for CfaPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A single-plane CFA raw frame in digital numbers (DN).
///
/// Pixel values are held as `f64` after load; files store unsigned 16-bit
/// integers. Values may leave the storage range during processing (e.g.
/// after black level subtraction); [`save_raw`] rounds and clamps back.
#[derive(Debug, Clone, PartialEq)]
pub struct BayerImage {
    data: Array2<f64>,
    cfa: CfaPattern,
    black_level: f64,
    white_level: f64,
    tag: Option<String>,
}

impl BayerImage {
    /// Build a frame, checking the even-dimension and level-order invariants.
    pub fn new(
        data: Array2<f64>,
        cfa: CfaPattern,
        black_level: f64,
        white_level: f64,
        tag: Option<String>,
    ) -> Result<Self> {
        let (h, w) = data.dim();
        if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(YondError::Dimension(format!(
                "bayer image dimensions must be even and nonzero, got {w}x{h}"
            )));
        }
        if !(black_level < white_level) {
            return Err(YondError::InvalidParameter(format!(
                "black level {black_level} must be below white level {white_level}"
            )));
        }
        Ok(Self {
            data,
            cfa,
            black_level,
            white_level,
            tag,
        })
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn cfa(&self) -> CfaPattern {
        self.cfa
    }

    pub fn black_level(&self) -> f64 {
        self.black_level
    }

    pub fn white_level(&self) -> f64 {
        self.white_level
    }

    pub fn tag(&self) -> Option<&str> {
        self.tag.as_deref()
    }

    /// Replace the pixel data, keeping metadata. Shape must match.
    pub fn with_data(&self, data: Array2<f64>) -> Result<Self> {
        if data.dim() != self.data.dim() {
            return Err(YondError::ShapeMismatch(format!(
                "replacement data {:?} does not match image {:?}",
                data.dim(),
                self.data.dim()
            )));
        }
        Ok(Self {
            data,
            cfa: self.cfa,
            black_level: self.black_level,
            white_level: self.white_level,
            tag: self.tag.clone(),
        })
    }

    /// Normalize to electron units: chi = (y - mu) / alpha.
    pub fn normalize(&self, params: &NoiseParams) -> NormalizedImage {
        let mu = self.black_level;
        let data = self.data.mapv(|y| (y - mu) / params.alpha());
        NormalizedImage {
            data,
            sigma_hat: params.sigma_hat(),
            peak: 1.0,
        }
    }
}

/// Four half-resolution planes in canonical R, G1, G2, B order.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedPlanes {
    pub planes: [Array2<f64>; 4],
    pub cfa: CfaPattern,
    pub black_level: f64,
    pub white_level: f64,
    pub tag: Option<String>,
}

impl PackedPlanes {
    pub fn plane_dim(&self) -> (usize, usize) {
        self.planes[0].dim()
    }
}

/// Split the mosaic into four half-resolution planes (R, G1, G2, B).
pub fn pack(img: &BayerImage) -> PackedPlanes {
    let (h, w) = img.data.dim();
    let (ph, pw) = (h / 2, w / 2);
    let offsets = img.cfa.offsets();
    let planes = offsets.map(|(dr, dc)| {
        Array2::from_shape_fn((ph, pw), |(r, c)| img.data[[2 * r + dr, 2 * c + dc]])
    });
    PackedPlanes {
        planes,
        cfa: img.cfa,
        black_level: img.black_level,
        white_level: img.white_level,
        tag: img.tag.clone(),
    }
}

/// Exact inverse of [`pack`].
pub fn unpack(packed: &PackedPlanes) -> Result<BayerImage> {
    let dim = packed.planes[0].dim();
    if packed.planes.iter().any(|p| p.dim() != dim) {
        return Err(YondError::ShapeMismatch(format!(
            "plane shapes differ: {:?}",
            packed.planes.iter().map(|p| p.dim()).collect::<Vec<_>>()
        )));
    }
    let (ph, pw) = dim;
    if ph == 0 || pw == 0 {
        return Err(YondError::Dimension("empty planes".into()));
    }
    let mut data = Array2::zeros((2 * ph, 2 * pw));
    for (plane, (dr, dc)) in packed.planes.iter().zip(packed.cfa.offsets()) {
        for ((r, c), &v) in plane.indexed_iter() {
            data[[2 * r + dr, 2 * c + dc]] = v;
        }
    }
    BayerImage::new(
        data,
        packed.cfa,
        packed.black_level,
        packed.white_level,
        packed.tag.clone(),
    )
}

#[derive(Serialize, Deserialize)]
struct RawSidecar {
    width: usize,
    height: usize,
    cfa: String,
    black_level: f64,
    white_level: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    tag: Option<String>,
}

/// Resolve the `.raw16` payload and `.json` sidecar paths for a file stem
/// or either member of the pair.
fn pair_paths(path: &Path) -> (PathBuf, PathBuf) {
    let mut payload = path.to_path_buf();
    if payload.extension().map(|e| e != "raw16").unwrap_or(true) {
        payload.set_extension("raw16");
    }
    let mut sidecar = payload.clone();
    sidecar.set_extension("json");
    (payload, sidecar)
}

/// Load a raw file pair: little-endian 16-bit payload plus JSON sidecar.
pub fn load_raw(path: &Path) -> Result<BayerImage> {
    let (payload_path, sidecar_path) = pair_paths(path);
    let sidecar_text = std::fs::read_to_string(&sidecar_path).map_err(|e| {
        YondError::Metadata(format!("missing sidecar {}: {e}", sidecar_path.display()))
    })?;
    let sidecar: RawSidecar = serde_json::from_str(&sidecar_text)
        .map_err(|e| YondError::Metadata(format!("bad sidecar {}: {e}", sidecar_path.display())))?;
    let cfa = CfaPattern::from_str(&sidecar.cfa)?;

    let bytes = std::fs::read(&payload_path)?;
    let expected = sidecar
        .width
        .checked_mul(sidecar.height)
        .and_then(|n| n.checked_mul(2))
        .ok_or_else(|| YondError::Metadata("image dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(YondError::Metadata(format!(
            "payload {} holds {} bytes, expected {} for {}x{}",
            payload_path.display(),
            bytes.len(),
            expected,
            sidecar.width,
            sidecar.height
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]) as f64)
        .collect();
    let data = Array2::from_shape_vec((sidecar.height, sidecar.width), values)
        .expect("length checked above");
    BayerImage::new(data, cfa, sidecar.black_level, sidecar.white_level, sidecar.tag)
}

/// Save a raw file pair. Values are rounded to the nearest integer and
/// clamped to the 16-bit storage range.
pub fn save_raw(img: &BayerImage, path: &Path) -> Result<()> {
    let (payload_path, sidecar_path) = pair_paths(path);
    if let Some(dir) = payload_path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut bytes = Vec::with_capacity(img.data.len() * 2);
    for &v in img.data.iter() {
        let q = v.round().clamp(0.0, u16::MAX as f64) as u16;
        bytes.extend_from_slice(&q.to_le_bytes());
    }
    std::fs::write(&payload_path, bytes)?;
    let sidecar = RawSidecar {
        width: img.width(),
        height: img.height(),
        cfa: img.cfa.as_str().to_string(),
        black_level: img.black_level,
        white_level: img.white_level,
        tag: img.tag.clone(),
    };
    let text = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| YondError::Metadata(format!("sidecar serialization: {e}")))?;
    std::fs::write(&sidecar_path, text)?;
    Ok(())
}

/// Half-resolution sRGB-ish preview: black subtraction, white-level
/// normalization, G = (G1 + G2)/2, gamma 1/2.2, clamp to [0, 255].
pub fn preview_isp(img: &BayerImage) -> image::RgbImage {
    let packed = pack(img);
    let (ph, pw) = packed.plane_dim();
    let range = img.white_level - img.black_level;
    let curve = |v: f64| -> u8 {
        let n = ((v - img.black_level) / range).clamp(0.0, 1.0);
        (255.0 * n.powf(1.0 / 2.2)).round() as u8
    };
    let mut out = image::RgbImage::new(pw as u32, ph as u32);
    for r in 0..ph {
        for c in 0..pw {
            let red = curve(packed.planes[0][[r, c]]);
            let green = curve(0.5 * (packed.planes[1][[r, c]] + packed.planes[2][[r, c]]));
            let blue = curve(packed.planes[3][[r, c]]);
            out.put_pixel(c as u32, r as u32, image::Rgb([red, green, blue]));
        }
    }
    out
}

/// An image in the variance-stabilized domain (or plain electron units
/// before the transform); `peak` is the f-domain peak used for [0,1]
/// scaling and equals 1 until the transform sets it.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    pub data: Array2<f64>,
    pub sigma_hat: f64,
    pub peak: f64,
}

impl NormalizedImage {
    /// Invert [`BayerImage::normalize`]: y = alpha * chi + mu.
    pub fn denormalize(&self, params: &NoiseParams, like: &BayerImage) -> Result<BayerImage> {
        let mu = like.black_level;
        let data = self.data.mapv(|chi| params.alpha() * chi + mu);
        like.with_data(data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn img_2x2(values: [[f64; 2]; 2], cfa: CfaPattern) -> BayerImage {
        let data = array![
            [values[0][0], values[0][1]],
            [values[1][0], values[1][1]]
        ];
        BayerImage::new(data, cfa, 0.0, 1023.0, None).unwrap()
    }

    #[test]
    fn pack_rggb_minimal() {
        let img = img_2x2([[1.0, 2.0], [3.0, 4.0]], CfaPattern::Rggb);
        let packed = pack(&img);
        assert_eq!(packed.planes[0][[0, 0]], 1.0); // R
        assert_eq!(packed.planes[1][[0, 0]], 2.0); // G1
        assert_eq!(packed.planes[2][[0, 0]], 3.0); // G2
        assert_eq!(packed.planes[3][[0, 0]], 4.0); // B
    }

    #[test]
    fn pack_output_order_all_patterns() {
        // Hand-enumerated offset tables: where each channel sits in the 2x2
        // cell for every pattern, in mosaic reading order.
        // RGGB: R(0,0) G(0,1) G(1,0) B(1,1)
        // BGGR: B(0,0) G(0,1) G(1,0) R(1,1)
        // GRBG: G(0,0) R(0,1) B(1,0) G(1,1)
        // GBRG: G(0,0) B(0,1) R(1,0) G(1,1)
        let r_pos = [
            (CfaPattern::Rggb, (0, 0)),
            (CfaPattern::Bggr, (1, 1)),
            (CfaPattern::Grbg, (0, 1)),
            (CfaPattern::Gbrg, (1, 0)),
        ];
        for (cfa, (rr, rc)) in r_pos {
            let mut values = [[0.0; 2]; 2];
            values[rr][rc] = 77.0;
            let packed = pack(&img_2x2(values, cfa));
            assert_eq!(packed.planes[0][[0, 0]], 77.0, "R plane first for {cfa}");
        }
        // The spec's worked case: BGGR [[b,g],[g,r]] puts r first.
        let packed = pack(&img_2x2([[10.0, 20.0], [30.0, 40.0]], CfaPattern::Bggr));
        assert_eq!(packed.planes[0][[0, 0]], 40.0);
        assert_eq!(packed.planes[3][[0, 0]], 10.0);
    }

    #[test]
    fn unpack_minimal() {
        let img = img_2x2([[1.0, 2.0], [3.0, 4.0]], CfaPattern::Rggb);
        let round = unpack(&pack(&img)).unwrap();
        assert_eq!(round, img);
    }

    #[test]
    fn unpack_rejects_mismatched_planes() {
        let mut packed = pack(&img_2x2([[1.0, 2.0], [3.0, 4.0]], CfaPattern::Rggb));
        packed.planes[2] = Array2::zeros((2, 2));
        assert!(matches!(
            unpack(&packed),
            Err(YondError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn odd_dimensions_rejected() {
        let data = Array2::zeros((3, 4));
        assert!(matches!(
            BayerImage::new(data, CfaPattern::Rggb, 0.0, 1.0, None),
            Err(YondError::Dimension(_))
        ));
    }

    #[test]
    fn black_level_must_be_below_white() {
        let data = Array2::zeros((2, 2));
        assert!(BayerImage::new(data, CfaPattern::Rggb, 64.0, 64.0, None).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame.raw16");
        let data = Array2::from_shape_fn((32, 32), |(r, c)| ((r * 131 + c * 17) % 65536) as f64);
        let img = BayerImage::new(data, CfaPattern::Grbg, 64.0, 16383.0, Some("cam/iso".into()))
            .unwrap();
        save_raw(&img, &path).unwrap();
        let loaded = load_raw(&path).unwrap();
        assert_eq!(loaded, img);
    }

    #[test]
    fn sidecar_metadata_populated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m");
        let img =
            BayerImage::new(Array2::zeros((4, 4)), CfaPattern::Rggb, 64.0, 1023.0, None).unwrap();
        save_raw(&img, &path).unwrap();
        let loaded = load_raw(&dir.path().join("m.raw16")).unwrap();
        assert_eq!(loaded.black_level(), 64.0);
        assert_eq!(loaded.cfa(), CfaPattern::Rggb);
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.raw16");
        let img =
            BayerImage::new(Array2::zeros((4, 4)), CfaPattern::Rggb, 0.0, 1023.0, None).unwrap();
        save_raw(&img, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(load_raw(&path), Err(YondError::Metadata(_))));
    }

    #[test]
    fn unknown_cfa_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.raw16");
        let img =
            BayerImage::new(Array2::zeros((4, 4)), CfaPattern::Rggb, 0.0, 1023.0, None).unwrap();
        save_raw(&img, &path).unwrap();
        let sidecar = dir.path().join("u.json");
        let text = std::fs::read_to_string(&sidecar)
            .unwrap()
            .replace("RGGB", "XYZW");
        std::fs::write(&sidecar, text).unwrap();
        assert!(matches!(load_raw(&path), Err(YondError::Metadata(_))));
    }

    #[test]
    fn preview_black_and_white_limits() {
        let black = BayerImage::new(
            Array2::from_elem((4, 4), 64.0),
            CfaPattern::Rggb,
            64.0,
            1023.0,
            None,
        )
        .unwrap();
        let white = black.with_data(Array2::from_elem((4, 4), 1023.0)).unwrap();
        assert!(preview_isp(&black).pixels().all(|p| p.0 == [0, 0, 0]));
        assert!(preview_isp(&white).pixels().all(|p| p.0 == [255, 255, 255]));
    }

    #[test]
    fn preview_mid_gray_gamma() {
        // Direct evaluation of the gamma curve at linear 0.18.
        let expected = (255.0 * 0.18f64.powf(1.0 / 2.2)).round() as u8;
        assert_eq!(expected, 117);
        let level = 64.0 + 0.18 * (1023.0 - 64.0);
        let img = BayerImage::new(
            Array2::from_elem((4, 4), level),
            CfaPattern::Rggb,
            64.0,
            1023.0,
            None,
        )
        .unwrap();
        assert!(preview_isp(&img).pixels().all(|p| p.0 == [117, 117, 117]));
    }

    #[test]
    fn preview_monotone_per_channel() {
        let mut last = [0u8; 3];
        for step in 0..20 {
            let level = 64.0 + (step as f64 / 19.0) * (1023.0 - 64.0);
            let img = BayerImage::new(
                Array2::from_elem((4, 4), level),
                CfaPattern::Rggb,
                64.0,
                1023.0,
                None,
            )
            .unwrap();
            let px = preview_isp(&img).get_pixel(0, 0).0;
            for ch in 0..3 {
                assert!(px[ch] >= last[ch]);
            }
            last = px;
        }
    }

    #[test]
    fn normalize_round_trip() {
        let params = NoiseParams::new(2.5e-3, 4.0e-3).unwrap();
        let data = Array2::from_shape_fn((8, 8), |(r, c)| 64.0 + (r * 8 + c) as f64 * 10.0);
        let img = BayerImage::new(data, CfaPattern::Rggb, 64.0, 1023.0, None).unwrap();
        let norm = img.normalize(&params);
        let back = norm.denormalize(&params, &img).unwrap();
        for (a, b) in img.data().iter().zip(back.data().iter()) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }

    proptest! {
        #[test]
        fn pack_unpack_identity(
            seed in 0u64..1000,
            cfa_idx in 0usize..4,
            h in 1usize..6,
            w in 1usize..6,
        ) {
            let cfa = CfaPattern::ALL[cfa_idx];
            let data = Array2::from_shape_fn((2 * h, 2 * w), |(r, c)| {
                ((seed as usize * 7919 + r * 131 + c * 17) % 65536) as f64
            });
            let img = BayerImage::new(data, cfa, 0.0, 65535.0, None).unwrap();
            prop_assert_eq!(unpack(&pack(&img)).unwrap(), img);
        }

        #[test]
        fn save_load_bit_exact(seed in 0u64..200) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.raw16");
            let data = Array2::from_shape_fn((8, 8), |(r, c)| {
                ((seed as usize).wrapping_mul(2654435761) % 65536) as f64
                    + ((r * 64 + c * 3) % 97) as f64
            })
            .mapv(|v| (v as u64 % 65536) as f64);
            let img = BayerImage::new(data, CfaPattern::Bggr, 100.0, 60000.0, None).unwrap();
            save_raw(&img, &path).unwrap();
            prop_assert_eq!(load_raw(&path).unwrap(), img);
        }
    }
}
