//! Image reconstruction, SNR metrics, and inverse-variance channel fusion.

use crate::error::{CoreError, Result};
use crate::kspace::{ifft2, KSpaceMatrix};
use crate::C64;
use serde::{Deserialize, Serialize};

/// Complex image, row-major `[y * n_read + x]` (y = phase, x = read).
#[derive(Debug, Clone)]
pub struct ComplexImage {
    pub data: Vec<C64>,
    pub n_read: usize,
    pub n_phase: usize,
}

impl ComplexImage {
    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }

    pub fn same_dims(&self, other: &ComplexImage) -> bool {
        self.n_read == other.n_read && self.n_phase == other.n_phase
    }
}

/// Inverse 2D DFT of k-space.
pub fn reconstruct(k: &KSpaceMatrix) -> ComplexImage {
    let mut data = k.data.clone();
    ifft2(&mut data, k.n_read, k.n_phase);
    ComplexImage { data, n_read: k.n_read, n_phase: k.n_phase }
}

/// Axis-aligned rectangular region of interest in image pixels.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct Roi {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl Roi {
    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self, n_read: usize, n_phase: usize) -> Result<()> {
        if self.area() < 16 {
            return Err(CoreError::DegenerateRoi(format!(
                "ROI area {} < 16 pixels",
                self.area()
            )));
        }
        if self.x0 + self.width > n_read || self.y0 + self.height > n_phase {
            return Err(CoreError::DegenerateRoi("ROI exceeds image bounds".into()));
        }
        Ok(())
    }

    pub fn overlaps(&self, other: &Roi) -> bool {
        self.x0 < other.x0 + other.width
            && other.x0 < self.x0 + self.width
            && self.y0 < other.y0 + other.height
            && other.y0 < self.y0 + self.height
    }

    pub fn pixels<'a>(&'a self, img: &'a [f64], n_read: usize) -> impl Iterator<Item = f64> + 'a {
        (self.y0..self.y0 + self.height)
            .flat_map(move |y| (self.x0..self.x0 + self.width).map(move |x| img[y * n_read + x]))
    }
}

/// Mean and standard deviation of magnitude pixels inside an ROI.
pub fn roi_stats(img: &[f64], n_read: usize, roi: &Roi) -> (f64, f64) {
    let n = roi.area() as f64;
    let mean = roi.pixels(img, n_read).sum::<f64>() / n;
    let var = roi.pixels(img, n_read).map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// SNR in dB: `20 log10(mean signal magnitude / noise magnitude std)`.
/// Signal and noise ROIs must be valid and disjoint.
pub fn snr_db(
    img: &[f64],
    n_read: usize,
    n_phase: usize,
    signal: &Roi,
    noise: &Roi,
) -> Result<f64> {
    signal.validate(n_read, n_phase)?;
    noise.validate(n_read, n_phase)?;
    if signal.overlaps(noise) {
        return Err(CoreError::DegenerateRoi("signal and noise ROIs overlap".into()));
    }
    let (mu, _) = roi_stats(img, n_read, signal);
    let (_, sigma) = roi_stats(img, n_read, noise);
    if sigma <= 0.0 {
        return Err(CoreError::DegenerateRoi("noise ROI has zero variance".into()));
    }
    Ok(20.0 * (mu / sigma).log10())
}

/// Result of inverse-variance fusion.
#[derive(Debug, Clone)]
pub struct FusionResult {
    pub image: ComplexImage,
    /// Normalized weights, one per input channel; they sum to 1.
    pub weights: Vec<f64>,
    /// Complex factors aligning each channel onto the first.
    pub alignments: Vec<C64>,
}

/// Fuse channels with inverse-variance weights after complex alignment.
///
/// Each image is scaled by `a_i = <img_1, img_i> / <img_i, img_i>` so its
/// signal content matches channel 1, then weighted by the inverse of its
/// aligned noise variance `(sigma_i * |a_i|)^2`.
pub fn fuse(images: &[&ComplexImage], noise_sigmas: &[f64]) -> Result<FusionResult> {
    if images.len() < 2 {
        return Err(CoreError::InvalidInput("fusion needs at least two channels".into()));
    }
    if noise_sigmas.len() != images.len() {
        return Err(CoreError::InvalidInput("one noise sigma per channel required".into()));
    }
    if noise_sigmas.iter().any(|s| !(s > &0.0) || !s.is_finite()) {
        return Err(CoreError::InvalidInput("noise sigmas must be positive".into()));
    }
    for img in images.iter().skip(1) {
        if !images[0].same_dims(img) {
            return Err(CoreError::InvalidInput("image dims mismatch".into()));
        }
    }

    let alignments: Vec<C64> = images
        .iter()
        .map(|img| {
            let num: C64 =
                images[0].data.iter().zip(&img.data).map(|(a, b)| b.conj() * a).sum();
            let den: f64 = img.data.iter().map(|b| b.norm_sqr()).sum();
            if den <= 0.0 {
                return Err(CoreError::InvalidInput("cannot align an all-zero image".into()));
            }
            Ok(num / den)
        })
        .collect::<Result<_>>()?;

    let inv_var: Vec<f64> = noise_sigmas
        .iter()
        .zip(&alignments)
        .map(|(s, a)| {
            let sigma_aligned = s * a.norm();
            1.0 / (sigma_aligned * sigma_aligned)
        })
        .collect();
    let total: f64 = inv_var.iter().sum();
    let weights: Vec<f64> = inv_var.iter().map(|v| v / total).collect();

    let mut data = vec![C64::new(0.0, 0.0); images[0].data.len()];
    for ((img, &w), &a) in images.iter().zip(&weights).zip(&alignments) {
        for (dst, src) in data.iter_mut().zip(&img.data) {
            *dst += src * a * w;
        }
    }
    Ok(FusionResult {
        image: ComplexImage { data, n_read: images[0].n_read, n_phase: images[0].n_phase },
        weights,
        alignments,
    })
}

/// Per-readout-column noise profile: magnitude std over the ROI's rows, for
/// every readout column.
pub fn noise_profile_1d(img: &[f64], n_read: usize, n_phase: usize, noise: &Roi) -> Result<Vec<f64>> {
    noise.validate(n_read, n_phase)?;
    let rows = noise.y0..noise.y0 + noise.height;
    let n = noise.height as f64;
    Ok((0..n_read)
        .map(|x| {
            let mean = rows.clone().map(|y| img[y * n_read + x]).sum::<f64>() / n;
            let var =
                rows.clone().map(|y| (img[y * n_read + x] - mean).powi(2)).sum::<f64>() / n;
            var.sqrt()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kspace::fft2;
    use crate::seeding::sub_rng;
    use rand::Rng;

    fn noisy_image(signal: &[C64], nr: usize, np: usize, sigma: f64, seed: u64) -> ComplexImage {
        let mut rng = sub_rng(seed, "fusion-test", &[0]);
        let data = signal
            .iter()
            .map(|s| {
                let g = |r: &mut rand_chacha::ChaCha8Rng| {
                    let u1: f64 = r.gen_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = r.gen();
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                };
                s + C64::new(g(&mut rng), g(&mut rng)) * (sigma / 2f64.sqrt())
            })
            .collect();
        ComplexImage { data, n_read: nr, n_phase: np }
    }

    fn flat_signal(nr: usize, np: usize, amp: f64) -> Vec<C64> {
        vec![C64::new(amp, 0.0); nr * np]
    }

    #[test]
    fn reconstruct_inverts_forward_dft() {
        let (nr, np) = (16, 8);
        let img: Vec<C64> =
            (0..nr * np).map(|i| C64::new((i as f64 * 0.2).sin(), 0.0)).collect();
        let mut k = KSpaceMatrix::zeros(nr, np, 1e-5, "x");
        k.data = img.clone();
        fft2(&mut k.data, nr, np);
        let rec = reconstruct(&k);
        for (a, b) in rec.data.iter().zip(&img) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn roi_rules() {
        let small = Roi { x0: 0, y0: 0, width: 3, height: 3 };
        assert!(small.validate(16, 16).is_err());
        let oob = Roi { x0: 10, y0: 0, width: 8, height: 8 };
        assert!(oob.validate(16, 16).is_err());
        let a = Roi { x0: 0, y0: 0, width: 8, height: 8 };
        let b = Roi { x0: 7, y0: 7, width: 8, height: 8 };
        let c = Roi { x0: 8, y0: 0, width: 8, height: 8 };
        assert!(a.overlaps(&b));
        assert!(!a.overlaps(&c));
        let img = vec![1.0; 256];
        assert!(matches!(
            snr_db(&img, 16, 16, &a, &b),
            Err(CoreError::DegenerateRoi(_))
        ));
        // Constant image: zero noise variance is degenerate, not infinite SNR.
        assert!(matches!(
            snr_db(&img, 16, 16, &a, &c),
            Err(CoreError::DegenerateRoi(_))
        ));
    }

    #[test]
    fn equal_channels_gain_3db() {
        let (nr, np) = (64, 64);
        let sig = flat_signal(nr, np, 10.0);
        let sigma = 1.0;
        let a = noisy_image(&sig, nr, np, sigma, 1);
        let b = noisy_image(&sig, nr, np, sigma, 2);
        let f = fuse(&[&a, &b], &[sigma, sigma]).unwrap();
        assert!((f.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((f.weights[0] - 0.5).abs() < 0.02, "weights {:?}", f.weights);

        // Noise std of the fused image vs a single channel, measured against
        // the known clean signal.
        let resid_std = |img: &ComplexImage| -> f64 {
            let v: f64 = img
                .data
                .iter()
                .zip(&sig)
                .map(|(x, s)| (x - s).norm_sqr())
                .sum::<f64>()
                / img.data.len() as f64;
            v.sqrt()
        };
        let gain_db = 20.0 * (resid_std(&a) / resid_std(&f.image)).log10();
        assert!((gain_db - 3.01).abs() < 0.3, "gain {gain_db} dB");
    }

    #[test]
    fn alignment_absorbs_complex_scale() {
        let (nr, np) = (32, 32);
        let sig = flat_signal(nr, np, 5.0);
        let a = noisy_image(&sig, nr, np, 0.5, 3);
        let mut b = noisy_image(&sig, nr, np, 0.5, 4);
        let scale = C64::from_polar(2.0, 1.1);
        for v in b.data.iter_mut() {
            *v *= scale;
        }
        // Channel b's noise sigma scales with its gain.
        let f = fuse(&[&a, &b], &[0.5, 0.5 * scale.norm()]).unwrap();
        assert!((f.alignments[1] * scale - C64::new(1.0, 0.0)).norm() < 0.05);
        assert!((f.weights[0] - 0.5).abs() < 0.05, "weights {:?}", f.weights);
    }

    #[test]
    fn inverse_variance_weights_beat_grid_search() {
        let (nr, np) = (64, 64);
        let sig = flat_signal(nr, np, 10.0);
        let (s1, s2) = (1.0, 2.0);
        let a = noisy_image(&sig, nr, np, s1, 5);
        let b = noisy_image(&sig, nr, np, s2, 6);
        let f = fuse(&[&a, &b], &[s1, s2]).unwrap();
        // Expected w1 = (1/1) / (1/1 + 1/4) = 0.8.
        assert!((f.weights[0] - 0.8).abs() < 0.02, "weights {:?}", f.weights);

        let resid_var = |w: f64| -> f64 {
            a.data
                .iter()
                .zip(&b.data)
                .zip(&sig)
                .map(|((x, y), s)| (x * w + y * (1.0 - w) - s).norm_sqr())
                .sum::<f64>()
                / sig.len() as f64
        };
        let ours = resid_var(f.weights[0]);
        let best_grid = (0..=100)
            .map(|i| resid_var(i as f64 / 100.0))
            .fold(f64::INFINITY, f64::min);
        // Finite-sample noise moves the empirical optimum slightly off the
        // theoretical weight; allow a small margin over the grid minimum.
        assert!(ours <= best_grid * 1.02, "ours {ours} vs grid {best_grid}");
    }

    #[test]
    fn fusion_input_validation() {
        let img = ComplexImage { data: vec![C64::new(1.0, 0.0); 16], n_read: 4, n_phase: 4 };
        assert!(fuse(&[&img], &[1.0]).is_err());
        assert!(fuse(&[&img, &img], &[1.0]).is_err());
        assert!(fuse(&[&img, &img], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn noise_profile_shape() {
        let img = vec![0.0; 16 * 16];
        let roi = Roi { x0: 0, y0: 0, width: 16, height: 4 };
        let prof = noise_profile_1d(&img, 16, 16, &roi).unwrap();
        assert_eq!(prof.len(), 16);
        assert!(prof.iter().all(|&v| v == 0.0));
    }
}
