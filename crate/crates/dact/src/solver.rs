//! The end-to-end reconstruction loop: DDIM prior injection outside, joint
//! gradient refinement of the image estimate z and the weight map alpha
//! against the adaptive-transport data fidelity inside.

use crate::error::Result;
use crate::histogram::{soft_histogram, Histogram, KdeConfig};
use crate::metrics::psnr;
use crate::priors::{ddim_step, noise_level_of, Denoiser, DiffusionSchedule};
use crate::sinkhorn::{Lut, SinkhornConfig};
use crate::tensor::{gaussian_noise, Image, Rng, WeightMap};
use crate::transport::{fidelity_loss_and_grads, fit_lut, ForwardConfig, LutGradMode, LutState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    GradientDescent,
    AdaptiveMoment,
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Outer DDIM steps T.
    pub outer_steps: usize,
    /// Inner joint-gradient iterations J per outer step.
    pub inner_iters: usize,
    pub eta_x: f64,
    pub eta_alpha: f64,
    /// Constant coupling weight lambda_t tying z to the prior's estimate.
    pub lambda_t: f64,
    pub alpha_init: f64,
    pub sinkhorn: SinkhornConfig,
    pub kde: KdeConfig,
    pub forward: ForwardConfig,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            outer_steps: 50,
            inner_iters: 25,
            eta_x: 0.1,
            eta_alpha: 0.1,
            lambda_t: 0.1,
            alpha_init: 0.5,
            sinkhorn: SinkhornConfig::default(),
            kde: KdeConfig::default(),
            forward: ForwardConfig::default(),
            optimizer: Optimizer::AdaptiveMoment,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) {
        assert!(self.outer_steps >= 1 && self.inner_iters >= 1);
        assert!(self.eta_x > 0.0 && self.eta_alpha >= 0.0);
        assert!(self.lambda_t >= 0.0);
        assert!((0.0..=1.0).contains(&self.alpha_init));
    }
}

#[derive(Debug, Clone)]
pub struct InnerRecord {
    pub t: usize,
    pub j: usize,
    pub fidelity: f64,
    pub coupling: f64,
    pub sinkhorn_iters: usize,
    pub marginal_error: f64,
}

#[derive(Debug, Clone)]
pub struct OuterRecord {
    pub t: usize,
    /// PSNR of the current estimate vs the evaluation ground truth.
    pub psnr: Option<f64>,
    pub mean_alpha: f64,
    /// ||Phi_true(x_gt) - Phi_hat(x_gt; alpha_t)||_2, when references are
    /// given. Measured with the LUT and alpha entering the outer step, i.e.
    /// the learned forward model as it stands at step t before that step's
    /// inner refinement.
    pub forward_model_error: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct SolverTrace {
    pub inner: Vec<InnerRecord>,
    pub outer: Vec<OuterRecord>,
}

impl SolverTrace {
    /// Wide CSV: inner rows carry the loss terms, outer rows the per-step
    /// summary metrics; unused columns are left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "kind,t,j,fidelity,coupling,sinkhorn_iters,marginal_err,psnr,mean_alpha,forward_model_err\n",
        );
        let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
        for r in &self.inner {
            out.push_str(&format!(
                "inner,{},{},{:.12e},{:.12e},{},{:.3e},,,\n",
                r.t, r.j, r.fidelity, r.coupling, r.sinkhorn_iters, r.marginal_error
            ));
        }
        for r in &self.outer {
            out.push_str(&format!(
                "outer,{},,,,,,{},{:.9},{}\n",
                r.t,
                fmt_opt(r.psnr),
                r.mean_alpha,
                fmt_opt(r.forward_model_error)
            ));
        }
        out
    }
}

/// Optional references for evaluation-only trace columns; never used by the
/// optimization itself.
#[derive(Debug, Clone)]
pub struct EvalRefs {
    pub ground_truth: Image,
    /// The true transform applied to the ground truth, for the
    /// forward-model-error column.
    pub phi_truth: Option<Image>,
}

#[derive(Debug, Clone)]
pub struct ReconResult {
    pub x0: Image,
    pub alpha: WeightMap,
    pub lut: Lut,
    pub trace: SolverTrace,
}

/// First/second-moment optimizer state with bias correction.
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
}

impl AdamState {
    fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }

    fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.step = 0;
    }

    fn apply(&mut self, params: &mut Image, grad: &Image, eta: f64, opt: Optimizer) {
        match opt {
            Optimizer::GradientDescent => {
                for (p, &g) in params.data_mut().iter_mut().zip(grad.data()) {
                    *p -= eta * g;
                }
            }
            Optimizer::AdaptiveMoment => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                self.step += 1;
                let c1 = 1.0 - B1.powi(self.step as i32);
                let c2 = 1.0 - B2.powi(self.step as i32);
                for ((p, &g), (m, v)) in params
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    *m = B1 * *m + (1.0 - B1) * g;
                    *v = B2 * *v + (1.0 - B2) * g * g;
                    *p -= eta * (*m / c1) / ((*v / c2).sqrt() + EPS);
                }
            }
        }
    }
}

fn forward_model_error(gt: &Image, phi_truth: &Image, alpha: &WeightMap, state: &LutState) -> f64 {
    let mapped = crate::transport::apply_lut(gt, &state.lut);
    let mut err = 0.0;
    for i in 0..gt.len() {
        let a = alpha.data()[i];
        let pred = a * mapped.data()[i] + (1.0 - a) * gt.data()[i];
        let d = pred - phi_truth.data()[i];
        err += d * d;
    }
    err.sqrt()
}

/// Blind restoration of `y`: recovers the high-resolution, contrast-
/// corrected image together with the spatial weight map of the learned
/// forward model. Runs the sampling loop with `cfg.outer_steps` DDIM steps;
/// each step re-estimates the intensity LUT from the current histogram and
/// takes `cfg.inner_iters` joint gradient steps on (z, alpha).
pub fn reconstruct(
    y: &Image,
    denoiser: &dyn Denoiser,
    cfg: &SolverConfig,
    eval: Option<&EvalRefs>,
) -> Result<ReconResult> {
    cfg.validate();
    let k = cfg.forward.downsample_factor;
    let (h, w) = (y.height() * k, y.width() * k);
    let sched = DiffusionSchedule::linear(1000, 1e-4, 0.02, cfg.outer_steps.max(2));
    let steps: Vec<usize> = if cfg.outer_steps == 1 {
        vec![*sched.sampling_steps.last().unwrap()]
    } else {
        sched.sampling_steps.clone()
    };
    let with_tape = cfg.forward.lut_grad_mode == LutGradMode::FullUnroll;

    let h_y: Histogram = soft_histogram(y, &cfg.kde)?.floored();
    let mut rng = Rng::new(cfg.seed);
    let mut x = gaussian_noise(h, w, 1.0, &mut rng);
    let mut alpha = Image::constant(h, w, cfg.alpha_init);
    let mut adam_alpha = AdamState::new(h * w);
    let mut adam_z = AdamState::new(h * w);
    let mut trace = SolverTrace::default();
    let mut z = Image::zeros(h, w);
    let mut last_state: Option<LutState> = None;

    for (idx, &t) in steps.iter().enumerate() {
        let ab = sched.alpha_bar(t);
        // The denoiser convention: input rescaled to unit signal level,
        // noise std sigma_t = sqrt((1 - abar_t)/abar_t).
        let noisy = x.map(|v| v / ab.sqrt());
        let mut x0_hat = denoiser.denoise(&noisy, noise_level_of(t, &sched))?;
        x0_hat.clamp01();
        z = x0_hat.clone();
        // z restarts from a fresh subproblem each outer step; alpha (and its
        // moments) persist for the whole trajectory.
        adam_z.reset();

        let mut entry_fme: Option<f64> = None;
        for j in 1..=cfg.inner_iters {
            let state = fit_lut(&z, &h_y, &cfg.kde, &cfg.sinkhorn, k, with_tape)?;
            if j == 1 {
                // Forward-model error of the state entering this outer step:
                // alpha before any update this step, LUT fit from z = x0_hat.
                entry_fme = eval.and_then(|e| {
                    e.phi_truth
                        .as_ref()
                        .map(|p| forward_model_error(&e.ground_truth, p, &alpha, &state))
                });
            }
            let (loss, grad_z, grad_alpha) = fidelity_loss_and_grads(
                &z,
                &alpha,
                y,
                &x0_hat,
                &state,
                &cfg.kde,
                cfg.lambda_t,
                &cfg.forward,
            )?;
            let coupling = z.dist_sq(&x0_hat);
            trace.inner.push(InnerRecord {
                t,
                j,
                fidelity: loss - cfg.lambda_t * coupling,
                coupling,
                sinkhorn_iters: state.plan.iterations,
                marginal_error: state.plan.marginal_error,
            });
            adam_z.apply(&mut z, &grad_z, cfg.eta_x, cfg.optimizer);
            // Keep z inside the histogram domain; the KDE is defined on [0,1].
            z.clamp01();
            adam_alpha.apply(&mut alpha, &grad_alpha, cfg.eta_alpha, cfg.optimizer);
            alpha.clamp01();
            last_state = Some(state);
        }

        trace.outer.push(OuterRecord {
            t,
            psnr: eval.map(|e| psnr(&z, &e.ground_truth)).transpose()?,
            mean_alpha: alpha.mean(),
            forward_model_error: entry_fme,
        });

        if let Some(&t_prev) = steps.get(idx + 1) {
            x = ddim_step(&x, &z, t, t_prev, &sched)?;
        }
    }

    let mut x0 = z;
    x0.clamp01();
    let lut = last_state.expect("at least one outer step").lut;
    Ok(ReconResult { x0, alpha, lut, trace })
}

/// Pixel-averaged effective intensity map v -> mean over pixels with
/// value near v of alpha*LUT(v) + (1-alpha)*v, tabulated on the LUT's bin
/// grid; empty bins are filled by linear interpolation from their nonempty
/// neighbors.
pub fn effective_mapping(x0: &Image, alpha: &WeightMap, lut: &Lut) -> Lut {
    let b = lut.knots.len();
    let mapped = crate::transport::apply_lut(x0, lut);
    let mut sums = vec![0.0; b];
    let mut counts = vec![0usize; b];
    for i in 0..x0.len() {
        let v = x0.data()[i];
        let a = alpha.data()[i];
        // Nearest bin center on the (b + 0.5)/B grid.
        let bin = ((v * b as f64 - 0.5).round() as isize).clamp(0, b as isize - 1) as usize;
        sums[bin] += a * mapped.data()[i] + (1.0 - a) * v;
        counts[bin] += 1;
    }
    let filled: Vec<usize> = (0..b).filter(|&i| counts[i] > 0).collect();
    assert!(!filled.is_empty(), "effective_mapping needs a nonempty image");
    let knots = (0..b)
        .map(|i| {
            let x = lut.knots[i].0;
            let y = if counts[i] > 0 {
                sums[i] / counts[i] as f64
            } else {
                // Linear interpolation between the nearest occupied bins;
                // constant extension past the ends.
                let right = filled.partition_point(|&f| f < i);
                match (right.checked_sub(1).map(|l| filled[l]), filled.get(right)) {
                    (Some(lo), Some(&hi)) => {
                        let t = (i - lo) as f64 / (hi - lo) as f64;
                        let vl = sums[lo] / counts[lo] as f64;
                        let vh = sums[hi] / counts[hi] as f64;
                        vl + t * (vh - vl)
                    }
                    (Some(lo), None) => sums[lo] / counts[lo] as f64,
                    (None, Some(&hi)) => sums[hi] / counts[hi] as f64,
                    (None, None) => unreachable!(),
                }
            };
            (x, y)
        })
        .collect();
    Lut { knots }
}
