//! Synthetic degradation: monotone contrast transforms, analytic phantoms,
//! and the plain bilinear-upsample comparison baseline.

use crate::error::Result;
use crate::tensor::{gaussian_noise, Image, Rng};
use crate::transport::downsample;

/// Strictly monotone map of [0,1] onto [0,1], the synthetic stand-in for an
/// unknown acquisition contrast.
#[derive(Debug, Clone)]
pub enum ContrastTransform {
    Gamma { gamma: f64 },
    /// Monotone knots; must start at (0,0) and end at (1,1).
    PiecewiseLinear { knots: Vec<(f64, f64)> },
    /// Sigmoid renormalized to hit 0 and 1 exactly.
    Logistic { steepness: f64, midpoint: f64 },
}

impl ContrastTransform {
    fn validate(&self) {
        match self {
            ContrastTransform::Gamma { gamma } => assert!(*gamma > 0.0),
            ContrastTransform::PiecewiseLinear { knots } => {
                assert!(knots.len() >= 2);
                assert_eq!(knots[0], (0.0, 0.0));
                assert_eq!(*knots.last().unwrap(), (1.0, 1.0));
                for w in knots.windows(2) {
                    assert!(w[1].0 > w[0].0 && w[1].1 > w[0].1, "knots must be strictly monotone");
                }
            }
            ContrastTransform::Logistic { steepness, midpoint } => {
                assert!(*steepness > 0.0);
                assert!(*midpoint > 0.0 && *midpoint < 1.0);
            }
        }
    }

    pub fn apply_scalar(&self, v: f64) -> f64 {
        match self {
            ContrastTransform::Gamma { gamma } => v.max(0.0).powf(*gamma),
            ContrastTransform::PiecewiseLinear { knots } => {
                let i = knots
                    .partition_point(|&(x, _)| x <= v)
                    .clamp(1, knots.len() - 1);
                let (x0, y0) = knots[i - 1];
                let (x1, y1) = knots[i];
                y0 + (y1 - y0) * (v - x0) / (x1 - x0)
            }
            ContrastTransform::Logistic { steepness, midpoint } => {
                let sig = |x: f64| 1.0 / (1.0 + (-steepness * (x - midpoint)).exp());
                (sig(v) - sig(0.0)) / (sig(1.0) - sig(0.0))
            }
        }
    }

    pub fn apply(&self, img: &Image) -> Image {
        self.validate();
        img.map(|v| self.apply_scalar(v))
    }

    /// Short text form for manifests.
    pub fn describe(&self) -> String {
        match self {
            ContrastTransform::Gamma { gamma } => format!("gamma({gamma})"),
            ContrastTransform::PiecewiseLinear { knots } => format!("piecewise({knots:?})"),
            ContrastTransform::Logistic { steepness, midpoint } => {
                format!("logistic(s={steepness}, m={midpoint})")
            }
        }
    }
}

/// y = downsample(phi(x), k) + noise, clamped to [0,1].
pub fn degrade(
    x: &Image,
    phi: &ContrastTransform,
    k: usize,
    noise_sigma: f64,
    rng: &mut Rng,
) -> Result<Image> {
    let low = downsample(&phi.apply(x), k)?;
    let noise = gaussian_noise(low.height(), low.width(), noise_sigma, rng);
    let mut y = low.zip_map(&noise, |a, b| a + b)?;
    y.clamp01();
    Ok(y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhantomKind {
    ShepplLoganLike,
    NestedDisks,
    GradientBars,
}

/// Plateau values shared by the disk phantom and its tests.
pub const NESTED_DISK_LEVELS: [f64; 4] = [0.1, 0.35, 0.6, 0.9];

/// Deterministic analytic phantom with at least 4 intensity plateaus.
pub fn phantom(size: usize, kind: PhantomKind) -> Image {
    assert!(size >= 16, "phantom size must be at least 16");
    let s = size as f64;
    let center = (s - 1.0) / 2.0;
    match kind {
        PhantomKind::NestedDisks => Image::from_fn(size, size, |r, c| {
            let d = ((r as f64 - center).powi(2) + (c as f64 - center).powi(2)).sqrt() / s;
            if d < 0.15 {
                NESTED_DISK_LEVELS[3]
            } else if d < 0.3 {
                NESTED_DISK_LEVELS[2]
            } else if d < 0.45 {
                NESTED_DISK_LEVELS[1]
            } else {
                NESTED_DISK_LEVELS[0]
            }
        }),
        PhantomKind::GradientBars => {
            // Four vertical bars, intensity stepping upward left to right.
            Image::from_fn(size, size, |_, c| {
                let band = (4 * c / size).min(3);
                0.15 + 0.25 * band as f64
            })
        }
        PhantomKind::ShepplLoganLike => Image::from_fn(size, size, |r, c| {
            let x = (c as f64 - center) / s;
            let y = (r as f64 - center) / s;
            let inside = |cx: f64, cy: f64, ax: f64, ay: f64| {
                let dx = (x - cx) / ax;
                let dy = (y - cy) / ay;
                dx * dx + dy * dy < 1.0
            };
            if inside(0.13, -0.1, 0.08, 0.12) {
                0.95
            } else if inside(-0.13, -0.1, 0.08, 0.12) {
                0.7
            } else if inside(0.0, 0.12, 0.2, 0.14) {
                0.45
            } else if inside(0.0, 0.0, 0.36, 0.44) {
                0.2
            } else {
                0.05
            }
        }),
    }
}

/// Bilinear k-times upsampling with no intensity modification. Boundary
/// samples extrapolate linearly so locally linear fields are reproduced
/// exactly, which makes block-average downsampling a left inverse on them.
pub fn upsample_baseline(y: &Image, k: usize) -> Image {
    if k <= 1 {
        return y.clone();
    }
    let (h, w) = (y.height(), y.width());
    let coord = |out: usize, n: usize| -> (usize, f64) {
        let src = (out as f64 + 0.5) / k as f64 - 0.5;
        if n == 1 {
            return (0, 0.0);
        }
        let i0 = (src.floor() as isize).clamp(0, n as isize - 2) as usize;
        (i0, src - i0 as f64)
    };
    Image::from_fn(h * k, w * k, |big_r, big_c| {
        let (r0, tr) = coord(big_r, h);
        let (c0, tc) = coord(big_c, w);
        if h == 1 && w == 1 {
            return y.at(0, 0);
        }
        let sample = |r: usize, c: usize| y.at(r.min(h - 1), c.min(w - 1));
        let top = sample(r0, c0) * (1.0 - tc) + sample(r0, c0 + 1) * tc;
        let bot = sample(r0 + 1, c0) * (1.0 - tc) + sample(r0 + 1, c0 + 1) * tc;
        top * (1.0 - tr) + bot * tr
    })
}
