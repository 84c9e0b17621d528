//! The differentiable forward model: LUT application through linear
//! interpolation, the adaptive pixel-wise convex blend, block-averaging
//! spatial degradation with its exact adjoint, and the fidelity loss with
//! analytic gradients.
//!
//! Two gradient modes exist for the z-gradient. `Detached` treats the LUT
//! as a constant within the step (it is recomputed every inner iteration
//! anyway). `FullUnroll` additionally differentiates the LUT's dependence
//! on z through the soft histogram and the unrolled Sinkhorn iterations.

use crate::error::{Error, Result};
use crate::histogram::{soft_histogram, soft_histogram_vjp, Histogram, KdeConfig, HISTOGRAM_FLOOR};
use crate::sinkhorn::{
    extract_lut, sinkhorn, sinkhorn_vjp, sinkhorn_with_tape, Lut, SinkhornConfig, SinkhornTape,
    TransportPlan,
};
use crate::tensor::{Image, WeightMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LutGradMode {
    /// LUT held constant within a gradient step.
    Detached,
    /// Backpropagate through histogram -> Sinkhorn -> LUT as well.
    FullUnroll,
}

#[derive(Debug, Clone)]
pub struct ForwardConfig {
    /// Spatial downsampling factor k; k x k block averaging.
    pub downsample_factor: usize,
    pub lut_grad_mode: LutGradMode,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        Self { downsample_factor: 2, lut_grad_mode: LutGradMode::Detached }
    }
}

/// Where a value sits in the knot grid.
enum LutPos {
    Below,
    Above,
    /// Interval index i and fraction t in [0,1): v = (1-t) c_i + t c_{i+1}.
    In(usize, f64),
}

fn locate(knots: &[(f64, f64)], v: f64) -> LutPos {
    let last = knots.len() - 1;
    if v <= knots[0].0 {
        if v < knots[0].0 {
            return LutPos::Below;
        }
        return LutPos::In(0, 0.0);
    }
    if v >= knots[last].0 {
        if v > knots[last].0 {
            return LutPos::Above;
        }
        return LutPos::In(last - 1, 1.0);
    }
    // partition_point: first knot with c > v; interval is the one before.
    let hi = knots.partition_point(|&(c, _)| c <= v);
    let i = hi - 1;
    let (c0, _) = knots[i];
    let (c1, _) = knots[i + 1];
    LutPos::In(i, (v - c0) / (c1 - c0))
}

/// Apply the LUT by linear interpolation between knots; values outside the
/// knot grid clamp to the end values.
pub fn apply_lut(img: &Image, lut: &Lut) -> Image {
    assert!(!lut.knots.is_empty());
    if lut.knots.len() == 1 {
        return Image::constant(img.height(), img.width(), lut.knots[0].1);
    }
    img.map(|v| match locate(&lut.knots, v) {
        LutPos::Below => lut.knots[0].1,
        LutPos::Above => lut.knots[lut.knots.len() - 1].1,
        LutPos::In(i, t) => {
            let (_, l0) = lut.knots[i];
            let (_, l1) = lut.knots[i + 1];
            l0 + t * (l1 - l0)
        }
    })
}

/// Per-pixel derivative of [`apply_lut`]: the interval slope, 0 where the
/// value clamps.
pub fn apply_lut_grad(img: &Image, lut: &Lut) -> Image {
    assert!(!lut.knots.is_empty());
    if lut.knots.len() == 1 {
        return Image::zeros(img.height(), img.width());
    }
    img.map(|v| match locate(&lut.knots, v) {
        LutPos::Below | LutPos::Above => 0.0,
        LutPos::In(i, _) => {
            let (c0, l0) = lut.knots[i];
            let (c1, l1) = lut.knots[i + 1];
            (l1 - l0) / (c1 - c0)
        }
    })
}

/// Pixel-wise convex blend alpha * LUT(v) + (1 - alpha) * v.
pub fn adaptive_transport(img: &Image, lut: &Lut, alpha: &WeightMap) -> Result<Image> {
    img.check_same_shape(alpha)?;
    let mapped = apply_lut(img, lut);
    Ok(Image::from_fn(img.height(), img.width(), |r, c| {
        let a = alpha.at(r, c);
        a * mapped.at(r, c) + (1.0 - a) * img.at(r, c)
    }))
}

/// k x k block averaging; output dims divided by k.
pub fn downsample(img: &Image, k: usize) -> Result<Image> {
    assert!(k >= 1);
    if k == 1 {
        return Ok(img.clone());
    }
    if !img.height().is_multiple_of(k) || !img.width().is_multiple_of(k) {
        return Err(Error::NonDivisible { h: img.height(), w: img.width(), k });
    }
    let (oh, ow) = (img.height() / k, img.width() / k);
    let inv = 1.0 / (k * k) as f64;
    Ok(Image::from_fn(oh, ow, |r, c| {
        let mut sum = 0.0;
        for dr in 0..k {
            for dc in 0..k {
                sum += img.at(r * k + dr, c * k + dc);
            }
        }
        sum * inv
    }))
}

/// Exact adjoint of [`downsample`]: replicate each value into its k x k
/// block, scaled by 1/k^2, so <Hx, y> = <x, H^T y> holds bit-for-bit up to
/// summation rounding.
pub fn downsample_adjoint(img: &Image, k: usize) -> Image {
    assert!(k >= 1);
    if k == 1 {
        return img.clone();
    }
    let inv = 1.0 / (k * k) as f64;
    Image::from_fn(img.height() * k, img.width() * k, |r, c| img.at(r / k, c / k) * inv)
}

/// The fitted contrast map for one inner iteration: the LUT plus whatever
/// the chosen gradient mode needs to backpropagate through the fit.
#[derive(Debug, Clone)]
pub struct LutState {
    pub lut: Lut,
    pub plan: TransportPlan,
    pub tgt_centers: Vec<f64>,
    pub tape: Option<SinkhornTape>,
}

/// Fit the monotone LUT mapping the current estimate's histogram onto the
/// measurement's. The estimate is downsampled by `k` first: y's values are
/// block averages, so matching the downsampled estimate's histogram keeps
/// the two sides' edge-mixture statistics comparable (matching the full-
/// resolution histogram skews the quantiles by the resolution-dependent
/// fraction of mixed boundary pixels). `with_tape` records the Sinkhorn
/// iterates for the full-unroll gradient (and forces the plain,
/// non-over-relaxed updates).
pub fn fit_lut(
    z: &Image,
    h_y: &Histogram,
    kde: &KdeConfig,
    sk: &SinkhornConfig,
    k: usize,
    with_tape: bool,
) -> Result<LutState> {
    let h_z = soft_histogram(&downsample(z, k)?, kde)?.floored();
    let (plan, tape) = if with_tape {
        let (plan, tape) = sinkhorn_with_tape(&h_z, h_y, sk)?;
        (plan, Some(tape))
    } else {
        (sinkhorn(&h_z, h_y, sk)?, None)
    };
    let lut = extract_lut(&plan, &h_y.centers)?;
    Ok(LutState { lut, plan, tgt_centers: h_y.centers.clone(), tape })
}

/// L = ||y - H Phi_hat(z; alpha)||^2 + lambda_t ||z - x0_hat||^2 with
/// analytic gradients in z and alpha. The alpha gradient is
/// (LUT(z) - z) .* H^T(2 (H Phi_hat - y)) in both modes; the z gradient
/// additionally flows through the LUT fit in `FullUnroll` mode (requires
/// the tape recorded by [`fit_lut`]).
pub fn fidelity_loss_and_grads(
    z: &Image,
    alpha: &WeightMap,
    y: &Image,
    x0_hat: &Image,
    state: &LutState,
    kde: &KdeConfig,
    lambda_t: f64,
    cfg: &ForwardConfig,
) -> Result<(f64, Image, WeightMap)> {
    assert!(lambda_t >= 0.0);
    z.check_same_shape(alpha)?;
    z.check_same_shape(x0_hat)?;
    let k = cfg.downsample_factor;
    let mapped = apply_lut(z, &state.lut);
    let phi = Image::from_fn(z.height(), z.width(), |r, c| {
        let a = alpha.at(r, c);
        a * mapped.at(r, c) + (1.0 - a) * z.at(r, c)
    });
    let h_phi = downsample(&phi, k)?;
    h_phi.check_same_shape(y)?;
    let residual = h_phi.zip_map(y, |p, q| p - q)?;
    let fidelity: f64 = residual.data().iter().map(|r| r * r).sum();
    let coupling: f64 = z.dist_sq(x0_hat);
    let loss = fidelity + lambda_t * coupling;

    // Upstream of Phi_hat: H^T (2 residual).
    let up = downsample_adjoint(&residual.map(|r| 2.0 * r), k);
    let grad_alpha = Image::from_fn(z.height(), z.width(), |r, c| {
        up.at(r, c) * (mapped.at(r, c) - z.at(r, c))
    });
    let slope = apply_lut_grad(z, &state.lut);
    let mut grad_z = Image::from_fn(z.height(), z.width(), |r, c| {
        let a = alpha.at(r, c);
        up.at(r, c) * (a * slope.at(r, c) + (1.0 - a))
            + 2.0 * lambda_t * (z.at(r, c) - x0_hat.at(r, c))
    });

    if cfg.lut_grad_mode == LutGradMode::FullUnroll {
        let tape = state
            .tape
            .as_ref()
            .expect("FullUnroll gradients need the Sinkhorn tape from fit_lut");
        let knots = &state.lut.knots;
        let b = knots.len();
        // d loss / d L_i: interpolation weights of each pixel's value.
        let mut bar_l = vec![0.0; b];
        for (idx, &v) in z.data().iter().enumerate() {
            let w = up.data()[idx] * alpha.data()[idx];
            if w == 0.0 {
                continue;
            }
            match locate(knots, v) {
                LutPos::Below => bar_l[0] += w,
                LutPos::Above => bar_l[b - 1] += w,
                LutPos::In(i, t) => {
                    bar_l[i] += w * (1.0 - t);
                    bar_l[i + 1] += w * t;
                }
            }
        }
        // L_i = sum_j P_ij c_j / d_i  =>  dL_i/dP_ij = (c_j - L_i) / d_i.
        let plan = &state.plan;
        let mut bar_plan = vec![0.0; plan.n_src * plan.n_tgt];
        let tgt_centers = &state.tgt_centers;
        for i in 0..plan.n_src {
            if bar_l[i] == 0.0 {
                continue;
            }
            let den: f64 = (0..plan.n_tgt).map(|j| plan.at(i, j)).sum();
            let l_i = knots[i].1;
            for j in 0..plan.n_tgt {
                bar_plan[i * plan.n_tgt + j] = bar_l[i] * (tgt_centers[j] - l_i) / den;
            }
        }
        let bar_a = sinkhorn_vjp(plan, tape, &bar_plan);
        // Through the histogram floor: a = (m + floor) / (1 + B*floor).
        let norm = 1.0 + b as f64 * HISTOGRAM_FLOOR;
        let bar_m: Vec<f64> = bar_a.iter().map(|&g| g / norm).collect();
        // The histogram was taken on the downsampled estimate (see fit_lut),
        // so the VJP pulls back through H as well.
        let extra = downsample_adjoint(&soft_histogram_vjp(&downsample(z, k)?, kde, &bar_m)?, k);
        grad_z = grad_z.zip_map(&extra, |g, e| g + e)?;
    }

    Ok((loss, grad_z, grad_alpha))
}
