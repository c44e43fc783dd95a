//! Integral-image spatial statistics.
//!
//! `box_mean` and `box_std` evaluate p x p windowed mean and standard
//! deviation through summed-area tables, so runtime does not depend on the
//! kernel size. Borders use reflect-101 padding (mirror without repeating
//! the edge pixel).

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Result, YondError};

/// Summed-area table over an input array.
///
/// `sum(r0..=r1, c0..=c1)` is exact rectangle summation up to floating
/// point rounding; rows are accumulated with compensated summation to keep
/// large images (sums of squares of 16-bit values) accurate.
#[derive(Debug, Clone)]
pub struct IntegralImage {
    sat: Array2<f64>,
}

impl IntegralImage {
    pub fn new(img: &Array2<f64>) -> Self {
        let (h, w) = img.dim();
        let mut sat = Array2::zeros((h + 1, w + 1));
        let mut col_comp = vec![0.0f64; w + 1];
        for r in 0..h {
            let mut row_sum = 0.0f64;
            let mut row_comp = 0.0f64;
            for c in 0..w {
                // Kahan step for the row prefix sum.
                let y = img[[r, c]] - row_comp;
                let t = row_sum + y;
                row_comp = (t - row_sum) - y;
                row_sum = t;
                // Kahan step for the column accumulation.
                let above = sat[[r, c + 1]];
                let y2 = row_sum - col_comp[c + 1];
                let t2 = above + y2;
                col_comp[c + 1] = (t2 - above) - y2;
                sat[[r + 1, c + 1]] = t2;
            }
        }
        Self { sat }
    }

    /// Sum of the inclusive rectangle [r0..=r1] x [c0..=c1].
    #[inline]
    pub fn rect_sum(&self, r0: usize, c0: usize, r1: usize, c1: usize) -> f64 {
        self.sat[[r1 + 1, c1 + 1]] - self.sat[[r0, c1 + 1]] - self.sat[[r1 + 1, c0]]
            + self.sat[[r0, c0]]
    }
}

fn check_kernel(img: &Array2<f64>, p: usize) -> Result<usize> {
    let (h, w) = img.dim();
    if p % 2 == 0 || p == 0 {
        return Err(YondError::Dimension(format!(
            "kernel size must be odd and positive, got {p}"
        )));
    }
    if p > h.min(w) {
        return Err(YondError::Dimension(format!(
            "kernel size {p} exceeds image {w}x{h}"
        )));
    }
    Ok((p - 1) / 2)
}

#[inline]
fn reflect101(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    i as usize
}

fn pad_reflect101(img: &Array2<f64>, radius: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h + 2 * radius, w + 2 * radius), |(r, c)| {
        let rr = reflect101(r as isize - radius as isize, h);
        let cc = reflect101(c as isize - radius as isize, w);
        img[[rr, cc]]
    })
}

fn windowed_mean_from_sat(sat: &IntegralImage, shape: (usize, usize), p: usize) -> Array2<f64> {
    let (h, w) = shape;
    let inv = 1.0 / (p * p) as f64;
    let mut out = Array2::zeros((h, w));
    out.as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(r, row)| {
            for (c, v) in row.iter_mut().enumerate() {
                // Window [r, r + p) x [c, c + p) in padded coordinates is the
                // p x p box centered at (r, c) in image coordinates.
                *v = sat.rect_sum(r, c, r + p - 1, c + p - 1) * inv;
            }
        });
    out
}

/// Mean over the p x p window centered at each pixel (p odd, reflect-101
/// borders). Output shape equals input shape.
pub fn box_mean(img: &Array2<f64>, p: usize) -> Result<Array2<f64>> {
    let radius = check_kernel(img, p)?;
    let padded = pad_reflect101(img, radius);
    let sat = IntegralImage::new(&padded);
    Ok(windowed_mean_from_sat(&sat, img.dim(), p))
}

/// Spatial standard deviation over the p x p window centered at each pixel:
/// sqrt(max(0, mean(x^2) - mean(x)^2)). The clamp guards floating-point
/// cancellation on near-constant windows.
pub fn box_std(img: &Array2<f64>, p: usize) -> Result<Array2<f64>> {
    let radius = check_kernel(img, p)?;
    let padded = pad_reflect101(img, radius);
    let squared = padded.mapv(|v| v * v);
    let sat = IntegralImage::new(&padded);
    let sat_sq = IntegralImage::new(&squared);
    let mean = windowed_mean_from_sat(&sat, img.dim(), p);
    let mean_sq = windowed_mean_from_sat(&sat_sq, img.dim(), p);
    let mut out = mean_sq;
    out.zip_mut_with(&mean, |msq, &m| {
        *msq = (*msq - m * m).max(0.0).sqrt();
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct O(n p^2) sliding-window statistics used as the oracle.
    fn direct_window_stats(img: &Array2<f64>, p: usize) -> (Array2<f64>, Array2<f64>) {
        let (h, w) = img.dim();
        let radius = (p - 1) as isize / 2;
        let mut mean = Array2::zeros((h, w));
        let mut std = Array2::zeros((h, w));
        for r in 0..h {
            for c in 0..w {
                let mut vals = Vec::with_capacity(p * p);
                for dr in -radius..=radius {
                    for dc in -radius..=radius {
                        let rr = reflect101(r as isize + dr, h);
                        let cc = reflect101(c as isize + dc, w);
                        vals.push(img[[rr, cc]]);
                    }
                }
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                // Two-pass variance for numerical independence from the
                // one-pass formula under test.
                let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
                mean[[r, c]] = m;
                std[[r, c]] = var.sqrt();
            }
        }
        (mean, std)
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |_| rng.random::<f64>())
    }

    #[test]
    fn sat_matches_direct_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = random_image(&mut rng, 9, 7);
        let sat = IntegralImage::new(&img);
        for r1 in 0..9 {
            for c1 in 0..7 {
                let direct: f64 = (0..=r1)
                    .flat_map(|r| (0..=c1).map(|c| img[[r, c]]).collect::<Vec<_>>())
                    .sum();
                assert!((sat.rect_sum(0, 0, r1, c1) - direct).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn constant_image_mean_is_constant() {
        let img = Array2::from_elem((10, 12), 3.75);
        for p in [1, 3, 5, 9] {
            let out = box_mean(&img, p).unwrap();
            assert!(out.iter().all(|&v| (v - 3.75).abs() < 1e-12));
        }
    }

    #[test]
    fn mean_of_one_to_nine() {
        let img = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]];
        let out = box_mean(&img, 3).unwrap();
        assert!((out[[1, 1]] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn mean_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = random_image(&mut rng, 16, 16);
        let (oracle, _) = direct_window_stats(&img, 5);
        let out = box_mean(&img, 5).unwrap();
        for (a, b) in out.iter().zip(oracle.iter()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn std_of_constant_is_zero() {
        let img = Array2::from_elem((8, 8), 42.0);
        let out = box_std(&img, 5).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn std_of_binary_window_is_bernoulli() {
        // Checkerboard: the centered 3x3 window holds four 1s and five 0s,
        // population std sqrt(q(1-q)) with q = 4/9.
        let img = Array2::from_shape_fn((3, 3), |(r, c)| ((r + c) % 2) as f64);
        let q: f64 = 4.0 / 9.0;
        let expected = (q * (1.0 - q)).sqrt();
        let out = box_std(&img, 3).unwrap();
        assert!((out[[1, 1]] - expected).abs() < 1e-12);
    }

    #[test]
    fn std_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let img = random_image(&mut rng, 16, 16);
        let (_, oracle) = direct_window_stats(&img, 5);
        let out = box_std(&img, 5).unwrap();
        for (a, b) in out.iter().zip(oracle.iter()) {
            assert!((a - b).abs() <= 1e-7);
        }
    }

    #[test]
    fn oracle_equivalence_over_kernel_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..20 {
            let h = 31 + (trial % 3) * 4;
            let w = 33 + (trial % 5) * 2;
            let img = random_image(&mut rng, h, w);
            for p in (3..=29).step_by(2 * 4) {
                let (om, os) = direct_window_stats(&img, p);
                let mean = box_mean(&img, p).unwrap();
                let std = box_std(&img, p).unwrap();
                for (a, b) in mean.iter().zip(om.iter()) {
                    assert!((a - b).abs() <= 1e-7 * b.abs().max(1.0));
                }
                for (a, b) in std.iter().zip(os.iter()) {
                    assert!((a - b).abs() <= 1e-7 * b.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn shift_equivariance_away_from_borders() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let img = random_image(&mut rng, 24, 24);
        let shifted = img.slice(ndarray::s![3.., 2..]).to_owned();
        let a = box_mean(&img, 5).unwrap();
        let b = box_mean(&shifted, 5).unwrap();
        // Interior comparison: stay at least one radius away from borders.
        for r in 3..18 {
            for c in 3..18 {
                assert!((a[[r + 3, c + 2]] - b[[r, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_even_or_oversized_kernel() {
        let img = Array2::zeros((8, 8));
        assert!(matches!(box_mean(&img, 4), Err(YondError::Dimension(_))));
        assert!(matches!(box_mean(&img, 9), Err(YondError::Dimension(_))));
        assert!(matches!(box_std(&img, 2), Err(YondError::Dimension(_))));
    }
}
