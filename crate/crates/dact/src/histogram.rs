//! Differentiable soft intensity histograms via kernel density estimation.
//!
//! Per pixel, Gaussian kernel weights to each bin center are normalized to
//! a partition of unity, so bin masses sum to 1 exactly (up to float
//! accumulation) — exact simplex membership is what Sinkhorn needs — and
//! the vector-Jacobian product has a closed form.

use crate::error::{Error, Result};
use crate::tensor::Image;

#[derive(Debug, Clone)]
pub struct KdeConfig {
    /// Number of bins B; centers are (b + 0.5) / B.
    pub bins: usize,
    /// Kernel bandwidth in intensity units.
    pub bandwidth: f64,
}

impl Default for KdeConfig {
    fn default() -> Self {
        // Bandwidth of one bin width: smooth but localized.
        Self { bins: 64, bandwidth: 1.0 / 64.0 }
    }
}

impl KdeConfig {
    pub fn centers(&self) -> Vec<f64> {
        uniform_centers(self.bins)
    }
}

pub fn uniform_centers(bins: usize) -> Vec<f64> {
    (0..bins).map(|b| (b as f64 + 0.5) / bins as f64).collect()
}

/// Floor added to every bin before Sinkhorn so scalings never divide by an
/// empty bin.
pub const HISTOGRAM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct Histogram {
    pub masses: Vec<f64>,
    pub centers: Vec<f64>,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.masses.len()
    }

    /// Add the zero-mass floor and renormalize. Since masses sum to 1 the
    /// normalizer is the constant 1 + B * floor, which keeps the operation
    /// linear in the masses (the VJP relies on this).
    pub fn floored(&self) -> Histogram {
        let b = self.masses.len() as f64;
        let norm = 1.0 + b * HISTOGRAM_FLOOR;
        Histogram {
            masses: self.masses.iter().map(|&m| (m + HISTOGRAM_FLOOR) / norm).collect(),
            centers: self.centers.clone(),
        }
    }
}

#[inline]
fn kernel_row(v: f64, centers: &[f64], inv_two_sq: f64, out: &mut [f64]) -> f64 {
    let mut sum = 0.0;
    for (w, &c) in out.iter_mut().zip(centers) {
        let d = v - c;
        *w = (-d * d * inv_two_sq).exp();
        sum += *w;
    }
    if sum < 1e-300 {
        // Value so far outside the bin grid that every kernel underflows
        // (transient optimizer excursions); the normalized-weight limit is
        // a one-hot on the nearest bin, with zero derivative.
        out.iter_mut().for_each(|w| *w = 0.0);
        let nearest = centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - v).abs().total_cmp(&(b.1 - v).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        out[nearest] = 1.0;
        return 1.0;
    }
    sum
}

/// Soft histogram of an image: per-pixel partition-of-unity kernel weights
/// averaged over pixels.
pub fn soft_histogram(img: &Image, cfg: &KdeConfig) -> Result<Histogram> {
    if img.is_empty() {
        return Err(Error::EmptyImage);
    }
    assert!(cfg.bins >= 2 && cfg.bandwidth > 0.0);
    let centers = cfg.centers();
    let inv_two_sq = 1.0 / (2.0 * cfg.bandwidth * cfg.bandwidth);
    let mut masses = vec![0.0; cfg.bins];
    let mut row = vec![0.0; cfg.bins];
    for &v in img.data() {
        let sum = kernel_row(v, &centers, inv_two_sq, &mut row);
        let inv = 1.0 / sum;
        for (m, &w) in masses.iter_mut().zip(&row) {
            *m += w * inv;
        }
    }
    let inv_n = 1.0 / img.len() as f64;
    for m in &mut masses {
        *m *= inv_n;
    }
    Ok(Histogram { masses, centers })
}

/// Vector-Jacobian product of [`soft_histogram`]: per pixel p, returns
/// sum_b upstream_b * dh_b/dv_p using the exact derivative of the
/// normalized kernel weights.
pub fn soft_histogram_vjp(img: &Image, cfg: &KdeConfig, upstream: &[f64]) -> Result<Image> {
    if upstream.len() != cfg.bins {
        return Err(Error::DimensionMismatch { expected: cfg.bins, found: upstream.len() });
    }
    if img.is_empty() {
        return Err(Error::EmptyImage);
    }
    let centers = cfg.centers();
    let inv_sq = 1.0 / (cfg.bandwidth * cfg.bandwidth);
    let inv_two_sq = 0.5 * inv_sq;
    let inv_n = 1.0 / img.len() as f64;
    let mut row = vec![0.0; cfg.bins];
    let mut out = Image::zeros(img.height(), img.width());
    for (g, &v) in out.data_mut().iter_mut().zip(img.data()) {
        let sum = kernel_row(v, &centers, inv_two_sq, &mut row);
        let inv = 1.0 / sum;
        // p_b = w_b / sum; dp_b/dv = p_b (d_b - sum_c p_c d_c), d_b = (c_b - v)/sigma^2
        let mut mean_d = 0.0;
        for (&w, &c) in row.iter().zip(&centers) {
            mean_d += w * inv * (c - v) * inv_sq;
        }
        let mut acc = 0.0;
        for ((&w, &c), &u) in row.iter().zip(&centers).zip(upstream) {
            let p = w * inv;
            acc += u * p * ((c - v) * inv_sq - mean_d);
        }
        *g = acc * inv_n;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    /// Independent double-loop oracle: unnormalized weights summed directly.
    fn oracle_histogram(img: &Image, cfg: &KdeConfig) -> Vec<f64> {
        let centers = cfg.centers();
        let mut masses = vec![0.0; cfg.bins];
        for &v in img.data() {
            let ws: Vec<f64> = centers
                .iter()
                .map(|&c| (-(v - c).powi(2) / (2.0 * cfg.bandwidth * cfg.bandwidth)).exp())
                .collect();
            let s: f64 = ws.iter().sum();
            for (m, w) in masses.iter_mut().zip(&ws) {
                *m += w / s / img.len() as f64;
            }
        }
        masses
    }

    #[test]
    fn constant_half_is_symmetric() {
        let img = Image::constant(4, 4, 0.5);
        let cfg = KdeConfig { bins: 4, bandwidth: 0.1 };
        let h = soft_histogram(&img, &cfg).unwrap();
        let m = &h.masses;
        assert!((m[0] - m[3]).abs() < 1e-15);
        assert!((m[1] - m[2]).abs() < 1e-15);
        assert!(m[1] > m[0]);
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn concentrated_kernel_hits_one_bin() {
        let cfg = KdeConfig { bins: 8, bandwidth: 1e-4 };
        let centers = cfg.centers();
        let img = Image::constant(2, 2, centers[3]);
        let h = soft_histogram(&img, &cfg).unwrap();
        assert!(h.masses[3] >= 1.0 - 1e-9);
        for (b, &m) in h.masses.iter().enumerate() {
            if b != 3 {
                assert!(m <= 1e-9);
            }
        }
    }

    #[test]
    fn matches_double_loop_oracle() {
        let mut rng = Rng::new(11);
        let img = Image::from_fn(32, 32, |_, _| rng.next_f64());
        let cfg = KdeConfig { bins: 64, bandwidth: 1.0 / 64.0 };
        let h = soft_histogram(&img, &cfg).unwrap();
        let want = oracle_histogram(&img, &cfg);
        for (a, b) in h.masses.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn vjp_of_constant_upstream_is_zero() {
        let mut rng = Rng::new(3);
        let img = Image::from_fn(8, 8, |_, _| rng.next_f64());
        let cfg = KdeConfig::default();
        let g = soft_histogram_vjp(&img, &cfg, &vec![0.7; cfg.bins]).unwrap();
        for &v in g.data() {
            assert!(v.abs() < 1e-12, "partition of unity should kill constant upstream: {v}");
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = Rng::new(17);
        let img = Image::from_fn(8, 8, |_, _| 0.1 + 0.8 * rng.next_f64());
        let cfg = KdeConfig { bins: 16, bandwidth: 1.0 / 16.0 };
        let upstream: Vec<f64> = (0..cfg.bins).map(|_| rng.next_f64() - 0.5).collect();
        let g = soft_histogram_vjp(&img, &cfg, &upstream).unwrap();
        let eps = 1e-5;
        let loss = |im: &Image| -> f64 {
            let h = soft_histogram(im, &cfg).unwrap();
            h.masses.iter().zip(&upstream).map(|(m, u)| m * u).sum()
        };
        for p in [0usize, 7, 21, 63] {
            let mut plus = img.clone();
            plus.data_mut()[p] += eps;
            let mut minus = img.clone();
            minus.data_mut()[p] -= eps;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let an = g.data()[p];
            let denom = fd.abs().max(1e-8);
            assert!(
                (fd - an).abs() / denom < 1e-5,
                "pixel {p}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn constant_image_gradient_uniform() {
        let cfg = KdeConfig { bins: 8, bandwidth: 0.05 };
        let img = Image::constant(3, 5, 0.4);
        // Antisymmetric upstream about the middle.
        let upstream: Vec<f64> = (0..8).map(|b| b as f64 - 3.5).collect();
        let g = soft_histogram_vjp(&img, &cfg, &upstream).unwrap();
        let first = g.data()[0];
        for &v in g.data() {
            assert!((v - first).abs() < 1e-15);
        }
    }

    #[test]
    fn shift_by_one_bin_shifts_histogram() {
        // Needs the kernel tails at the grid ends to be negligible, so use
        // a third-of-a-bin bandwidth and keep values a few bins off both
        // boundaries.
        let cfg = KdeConfig { bins: 32, bandwidth: 1.0 / 96.0 };
        let w = 1.0 / 32.0;
        let centers = cfg.centers();
        let mut rng = Rng::new(23);
        let lo = centers[3];
        let hi = centers[cfg.bins - 5];
        let img = Image::from_fn(16, 16, |_, _| lo + (hi - lo) * rng.next_f64());
        let shifted = img.map(|v| v + w);
        let h0 = soft_histogram(&img, &cfg).unwrap();
        let h1 = soft_histogram(&shifted, &cfg).unwrap();
        for b in 4..cfg.bins - 4 {
            assert!(
                (h1.masses[b] - h0.masses[b - 1]).abs() < 1e-10,
                "bin {b}: {} vs {}",
                h1.masses[b],
                h0.masses[b - 1]
            );
        }
    }
}
