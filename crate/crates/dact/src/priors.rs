//! Pluggable denoisers standing in for a pretrained diffusion model, the
//! variance-preserving noise schedule, and the deterministic DDIM step.
//!
//! The noise level handed to a denoiser at step t is
//! sigma_t = sqrt((1 - abar_t)/abar_t) — the noise std of x_t / sqrt(abar_t)
//! — which identifies the half-quadratic coupling weight as rho_t = 1/sigma_t^2.

use std::io::{Read, Write};
use std::process::{Command, Stdio};

use crate::error::{Error, Result};
use crate::io::{tensor_from_bytes, tensor_to_bytes};
use crate::tensor::Image;

#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    pub t_train: usize,
    pub betas: Vec<f64>,
    /// Cumulative products abar_t = prod_{s<=t}(1 - beta_s), indexed by t-1.
    pub alpha_bars: Vec<f64>,
    /// Inference-time subsequence, strictly decreasing, ending at 1.
    pub sampling_steps: Vec<usize>,
}

impl DiffusionSchedule {
    /// Linear beta schedule with `n_sampling` evenly spaced inference steps.
    pub fn linear(t_train: usize, beta_start: f64, beta_end: f64, n_sampling: usize) -> Self {
        assert!(t_train >= 2 && n_sampling >= 2 && n_sampling <= t_train);
        assert!(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0);
        let betas: Vec<f64> = (0..t_train)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_train - 1) as f64)
            .collect();
        let mut alpha_bars = Vec::with_capacity(t_train);
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        // Evenly spaced on [1, t_train - 1], descending, endpoints included.
        let hi = (t_train - 1) as f64;
        let mut sampling_steps: Vec<usize> = (0..n_sampling)
            .rev()
            .map(|i| (1.0 + (hi - 1.0) * i as f64 / (n_sampling - 1) as f64).round() as usize)
            .collect();
        sampling_steps.dedup();
        Self { t_train, betas, alpha_bars, sampling_steps }
    }

    /// abar_t for t in 1..=t_train.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_train, "step {t} outside schedule");
        self.alpha_bars[t - 1]
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02, 50)
    }
}

/// sigma_t = sqrt((1 - abar_t)/abar_t).
pub fn noise_level_of(t: usize, sched: &DiffusionSchedule) -> f64 {
    let ab = sched.alpha_bar(t);
    ((1.0 - ab) / ab).sqrt()
}

/// Deterministic DDIM update (eta = 0): re-noise the clean estimate z to
/// the previous noise level along the implied noise direction.
pub fn ddim_step(
    x_t: &Image,
    z: &Image,
    t: usize,
    t_prev: usize,
    sched: &DiffusionSchedule,
) -> Result<Image> {
    if t <= t_prev || t_prev < 1 || t > sched.t_train {
        return Err(Error::InvalidStep { t, t_prev });
    }
    x_t.check_same_shape(z)?;
    let ab_t = sched.alpha_bar(t);
    let ab_p = sched.alpha_bar(t_prev);
    let (sa_t, sn_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (sa_p, sn_p) = (ab_p.sqrt(), (1.0 - ab_p).sqrt());
    Ok(Image::from_fn(x_t.height(), x_t.width(), |r, c| {
        let eps_hat = (x_t.at(r, c) - sa_t * z.at(r, c)) / sn_t;
        sa_p * z.at(r, c) + sn_p * eps_hat
    }))
}

/// A clean-image estimator given a noisy image and its noise level.
pub trait Denoiser: Send + Sync {
    fn denoise(&self, noisy: &Image, sigma: f64) -> Result<Image>;
}

/// Gaussian smoothing with spatial std proportional to the noise level.
#[derive(Debug, Clone)]
pub struct GaussianDenoiser {
    /// Pixels of spatial std per unit of noise std.
    pub rho_blur: f64,
}

impl Default for GaussianDenoiser {
    fn default() -> Self {
        Self { rho_blur: 2.0 }
    }
}

#[inline]
fn reflect(mut i: isize, n: isize) -> usize {
    // Symmetric reflection with edge repetition: ... b a | a b c | c b ...
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

fn gaussian_kernel(spatial_std: f64) -> Vec<f64> {
    let radius = (4.0 * spatial_std).ceil() as usize;
    let mut k = Vec::with_capacity(2 * radius + 1);
    for i in 0..=2 * radius {
        let x = i as f64 - radius as f64;
        k.push((-x * x / (2.0 * spatial_std * spatial_std)).exp());
    }
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable convolution with reflective boundary; kernel sums to 1.
fn gaussian_blur(img: &Image, spatial_std: f64) -> Image {
    if spatial_std <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(spatial_std);
    let radius = (k.len() / 2) as isize;
    let (h, w) = (img.height() as isize, img.width() as isize);
    let horiz = Image::from_fn(img.height(), img.width(), |r, c| {
        let mut acc = 0.0;
        for (j, &kv) in k.iter().enumerate() {
            let cc = reflect(c as isize + j as isize - radius, w);
            acc += kv * img.at(r, cc);
        }
        acc
    });
    Image::from_fn(img.height(), img.width(), |r, c| {
        let mut acc = 0.0;
        for (j, &kv) in k.iter().enumerate() {
            let rr = reflect(r as isize + j as isize - radius, h);
            acc += kv * horiz.at(rr, c);
        }
        acc
    })
}

impl Denoiser for GaussianDenoiser {
    fn denoise(&self, noisy: &Image, sigma: f64) -> Result<Image> {
        assert!(sigma >= 0.0);
        Ok(gaussian_blur(noisy, self.rho_blur * sigma))
    }
}

/// ROF total-variation proximal denoiser via fixed-iteration dual
/// projection (Chambolle-style), tau = max(c_tv * sigma^2, tau_floor).
#[derive(Debug, Clone)]
pub struct TvDenoiser {
    pub c_tv: f64,
    pub inner_iters: usize,
    /// Lower bound on the prox strength. In a sampling loop sigma^2 decays
    /// to near zero at the final steps, which would leave the prior unable
    /// to keep smoothing the null space of the measurement operator; a
    /// floor keeps the late-stage regularization effective.
    pub tau_floor: f64,
}

impl Default for TvDenoiser {
    fn default() -> Self {
        Self { c_tv: 1.0, inner_iters: 50, tau_floor: 0.0 }
    }
}

/// One projected-gradient pass on the ROF dual; `px`, `py` hold the dual
/// field. Returns nothing; the primal is recovered as f - tau * div p.
fn tv_dual_iterate(f: &Image, tau: f64, iters: usize, px: &mut Image, py: &mut Image) {
    let (h, w) = (f.height(), f.width());
    let step = 0.25;
    let mut div = Image::zeros(h, w);
    for _ in 0..iters {
        // div p with backward differences (adjoint of forward gradient).
        for r in 0..h {
            for c in 0..w {
                let dx = px.at(r, c) - if c > 0 { px.at(r, c - 1) } else { 0.0 };
                let dy = py.at(r, c) - if r > 0 { py.at(r - 1, c) } else { 0.0 };
                div.set(r, c, dx + dy);
            }
        }
        // Gradient of (div p - f/tau), forward differences, Neumann edge.
        for r in 0..h {
            for c in 0..w {
                let u = div.at(r, c) - f.at(r, c) / tau;
                let gx = if c + 1 < w { div.at(r, c + 1) - f.at(r, c + 1) / tau - u } else { 0.0 };
                let gy = if r + 1 < h { div.at(r + 1, c) - f.at(r + 1, c) / tau - u } else { 0.0 };
                let norm = (gx * gx + gy * gy).sqrt();
                let denom = 1.0 + step * norm;
                px.set(r, c, (px.at(r, c) + step * gx) / denom);
                py.set(r, c, (py.at(r, c) + step * gy) / denom);
            }
        }
    }
}

impl TvDenoiser {
    /// The solution estimate after running the dual iterations.
    pub fn solve(&self, noisy: &Image, tau: f64) -> Image {
        if tau <= 0.0 {
            return noisy.clone();
        }
        let mut px = Image::zeros(noisy.height(), noisy.width());
        let mut py = Image::zeros(noisy.height(), noisy.width());
        tv_dual_iterate(noisy, tau, self.inner_iters, &mut px, &mut py);
        let (h, w) = (noisy.height(), noisy.width());
        Image::from_fn(h, w, |r, c| {
            let dx = px.at(r, c) - if c > 0 { px.at(r, c - 1) } else { 0.0 };
            let dy = py.at(r, c) - if r > 0 { py.at(r - 1, c) } else { 0.0 };
            noisy.at(r, c) - tau * (dx + dy)
        })
    }
}

impl Denoiser for TvDenoiser {
    fn denoise(&self, noisy: &Image, sigma: f64) -> Result<Image> {
        assert!(sigma >= 0.0);
        Ok(self.solve(noisy, (self.c_tv * sigma * sigma).max(self.tau_floor)))
    }
}

/// Test prior with access to the clean image: blends toward it as the
/// claimed noise level grows. Lets solver behavior be tested independently
/// of denoiser quality.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    pub clean: Image,
    pub sigma_floor: f64,
}

impl OracleDenoiser {
    pub fn new(clean: Image) -> Self {
        Self { clean, sigma_floor: 0.05 }
    }
}

impl Denoiser for OracleDenoiser {
    fn denoise(&self, noisy: &Image, sigma: f64) -> Result<Image> {
        noisy.check_same_shape(&self.clean)?;
        let s2 = sigma * sigma;
        let w = s2 / (s2 + self.sigma_floor * self.sigma_floor);
        noisy.zip_map(&self.clean, |n, c| w * c + (1.0 - w) * n)
    }
}

fn write_frame(sink: &mut impl Write, payload: &[u8]) -> std::io::Result<()> {
    sink.write_all(&(payload.len() as u32).to_le_bytes())?;
    sink.write_all(payload)
}

fn read_frame(src: &mut impl Read) -> std::io::Result<Vec<u8>> {
    let mut len = [0u8; 4];
    src.read_exact(&mut len)?;
    let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
    src.read_exact(&mut buf)?;
    Ok(buf)
}

/// Adapter for an external denoiser process. Per call: spawn the command,
/// write two length-prefixed raw-tensor frames (the noisy image, then sigma
/// as a 1x1 tensor) to its stdin, read one frame with the denoised image
/// from its stdout.
#[derive(Debug, Clone)]
pub struct ExternDenoiser {
    pub command: Vec<String>,
}

impl ExternDenoiser {
    /// Whitespace-split command line; first token is the program.
    pub fn from_command_line(cmd: &str) -> Result<Self> {
        let command: Vec<String> = cmd.split_whitespace().map(str::to_owned).collect();
        if command.is_empty() {
            return Err(Error::ProtocolViolation("empty denoiser command".into()));
        }
        Ok(Self { command })
    }
}

impl Denoiser for ExternDenoiser {
    fn denoise(&self, noisy: &Image, sigma: f64) -> Result<Image> {
        let proto = |detail: String| Error::ProtocolViolation(detail);
        let mut child = Command::new(&self.command[0])
            .args(&self.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| proto(format!("spawn '{}': {e}", self.command[0])))?;
        {
            let stdin = child.stdin.as_mut().expect("piped stdin");
            let sigma_tensor = Image::new(1, 1, vec![sigma])
                .map_err(|_| proto(format!("non-finite sigma {sigma}")))?;
            write_frame(stdin, &tensor_to_bytes(noisy))
                .and_then(|_| write_frame(stdin, &tensor_to_bytes(&sigma_tensor)))
                .map_err(|e| proto(format!("writing frames: {e}")))?;
        }
        drop(child.stdin.take());
        let mut stdout = child.stdout.take().expect("piped stdout");
        let frame = read_frame(&mut stdout).map_err(|e| proto(format!("reading frame: {e}")))?;
        let _ = child.wait();
        let img = tensor_from_bytes(&frame, std::path::Path::new("<extern-denoiser>"))
            .map_err(|e| proto(format!("bad frame: {e}")))?;
        if !img.same_shape(noisy) {
            return Err(proto(format!(
                "shape changed: {}x{} in, {}x{} out",
                noisy.height(),
                noisy.width(),
                img.height(),
                img.width()
            )));
        }
        Ok(img)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gaussian_noise, Rng};

    #[test]
    fn schedule_is_monotone_and_anchored() {
        let s = DiffusionSchedule::default();
        assert_eq!(s.betas.len(), 1000);
        assert!((s.betas[0] - 1e-4).abs() < 1e-18);
        assert!((s.betas[999] - 0.02).abs() < 1e-18);
        assert!((s.alpha_bar(1) - (1.0 - 1e-4)).abs() < 1e-15);
        let mut prev = 1.0;
        for t in 1..=1000 {
            let ab = s.alpha_bar(t);
            assert!(ab > 0.0 && ab < 1.0);
            assert!(ab < prev, "abar not strictly decreasing at t={t}");
            prev = ab;
        }
    }

    #[test]
    fn noise_level_scans_monotone_increasing() {
        let s = DiffusionSchedule::default();
        let mut prev = 0.0;
        for t in 1..=1000 {
            let sig = noise_level_of(t, &s);
            assert!(sig > prev, "sigma not increasing at t={t}");
            prev = sig;
        }
    }

    #[test]
    fn noise_level_formula() {
        let mut s = DiffusionSchedule::default();
        s.alpha_bars[41] = 0.5;
        assert!((noise_level_of(42, &s) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sampling_steps_shape() {
        let s = DiffusionSchedule::default();
        assert_eq!(s.sampling_steps.len(), 50);
        assert_eq!(s.sampling_steps[0], 999);
        assert_eq!(*s.sampling_steps.last().unwrap(), 1);
        for w in s.sampling_steps.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn ddim_zero_noise_branch() {
        let s = DiffusionSchedule::default();
        let mut rng = Rng::new(1);
        let z = Image::from_fn(4, 4, |_, _| rng.next_f64());
        let x_t = z.map(|v| v * s.alpha_bar(999).sqrt());
        let out = ddim_step(&x_t, &z, 999, 979, &s).unwrap();
        let want = s.alpha_bar(979).sqrt();
        for (o, zv) in out.data().iter().zip(z.data()) {
            assert!((o - want * zv).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_degenerate_schedule_is_fixed_point() {
        let mut s = DiffusionSchedule::default();
        let ab = s.alpha_bar(500);
        s.alpha_bars[479] = ab; // force abar_{480} = abar_{500}
        let mut rng = Rng::new(2);
        let z = Image::from_fn(3, 3, |_, _| rng.next_f64());
        let x_t = Image::from_fn(3, 3, |_, _| rng.next_f64());
        let out = ddim_step(&x_t, &z, 500, 480, &s).unwrap();
        for (o, x) in out.data().iter().zip(x_t.data()) {
            assert!((o - x).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_matches_direct_formula() {
        let s = DiffusionSchedule::default();
        let mut rng = Rng::new(3);
        let z = Image::from_fn(4, 4, |_, _| rng.next_f64());
        let x_t = Image::from_fn(4, 4, |_, _| rng.next_f64());
        let out = ddim_step(&x_t, &z, 999, 979, &s).unwrap();
        let (ab_t, ab_p) = (s.alpha_bar(999), s.alpha_bar(979));
        for i in 0..16 {
            let eps = (x_t.data()[i] - ab_t.sqrt() * z.data()[i]) / (1.0 - ab_t).sqrt();
            let want = ab_p.sqrt() * z.data()[i] + (1.0 - ab_p).sqrt() * eps;
            assert!((out.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_rejects_bad_steps() {
        let s = DiffusionSchedule::default();
        let img = Image::zeros(2, 2);
        assert!(matches!(
            ddim_step(&img, &img, 10, 10, &s).unwrap_err(),
            Error::InvalidStep { t: 10, t_prev: 10 }
        ));
        assert!(ddim_step(&img, &img, 1001, 10, &s).is_err());
        assert!(ddim_step(&img, &img, 10, 0, &s).is_err());
    }

    #[test]
    fn gaussian_sigma_zero_is_identity() {
        let mut rng = Rng::new(5);
        let img = Image::from_fn(6, 6, |_, _| rng.next_f64());
        let out = GaussianDenoiser::default().denoise(&img, 0.0).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn gaussian_preserves_constant() {
        let img = Image::constant(9, 9, 0.42);
        let out = GaussianDenoiser::default().denoise(&img, 0.5).unwrap();
        for &v in out.data() {
            assert!((v - 0.42).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_matches_direct_2d_convolution_on_impulse() {
        let mut img = Image::zeros(15, 15);
        img.set(7, 7, 1.0);
        let d = GaussianDenoiser::default();
        let sigma = 0.4;
        let out = d.denoise(&img, sigma).unwrap();
        // Direct (non-separable) oracle with the same reflective boundary.
        let k = gaussian_kernel(d.rho_blur * sigma);
        let radius = (k.len() / 2) as isize;
        for r in 0..15usize {
            for c in 0..15usize {
                let mut acc = 0.0;
                for (i, &ki) in k.iter().enumerate() {
                    for (j, &kj) in k.iter().enumerate() {
                        let rr = reflect(r as isize + i as isize - radius, 15);
                        let cc = reflect(c as isize + j as isize - radius, 15);
                        acc += ki * kj * img.at(rr, cc);
                    }
                }
                assert!(
                    (out.at(r, c) - acc).abs() < 1e-10,
                    "({r},{c}): {} vs {acc}",
                    out.at(r, c)
                );
            }
        }
    }

    fn rof_objective(u: &Image, f: &Image, tau: f64) -> f64 {
        let mut tv = 0.0;
        for r in 0..u.height() {
            for c in 0..u.width() {
                let gx = if c + 1 < u.width() { u.at(r, c + 1) - u.at(r, c) } else { 0.0 };
                let gy = if r + 1 < u.height() { u.at(r + 1, c) - u.at(r, c) } else { 0.0 };
                tv += (gx * gx + gy * gy).sqrt();
            }
        }
        0.5 * u.dist_sq(f) + tau * tv
    }

    #[test]
    fn tv_sigma_zero_is_identity() {
        let mut rng = Rng::new(7);
        let img = Image::from_fn(5, 5, |_, _| rng.next_f64());
        let out = TvDenoiser::default().denoise(&img, 0.0).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn tv_leaves_constant_unchanged() {
        let img = Image::constant(8, 8, 0.6);
        let out = TvDenoiser::default().denoise(&img, 0.3).unwrap();
        for &v in out.data() {
            assert!((v - 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn tv_objective_decreases_monotonically() {
        let mut rng = Rng::new(9);
        let step = Image::from_fn(16, 16, |_, c| if c < 8 { 0.2 } else { 0.8 });
        let noisy = step
            .zip_map(&gaussian_noise(16, 16, 0.1, &mut rng), |a, b| (a + b).clamp(0.0, 1.0))
            .unwrap();
        let tau = 0.1;
        let mut prev = rof_objective(&noisy, &noisy, tau);
        for iters in [1usize, 2, 4, 8, 16, 32, 64] {
            let d = TvDenoiser { inner_iters: iters, ..TvDenoiser::default() };
            let u = d.solve(&noisy, tau);
            let obj = rof_objective(&u, &noisy, tau);
            assert!(obj <= prev + 1e-12, "objective rose at {iters} iters: {obj} > {prev}");
            prev = obj;
        }
        assert!(prev < rof_objective(&noisy, &noisy, tau));
    }

    #[test]
    fn oracle_denoiser_blend() {
        let mut rng = Rng::new(11);
        let clean = Image::from_fn(4, 4, |_, _| rng.next_f64());
        let noisy = Image::from_fn(4, 4, |_, _| rng.next_f64());
        let d = OracleDenoiser::new(clean.clone());

        let out = d.denoise(&noisy, 0.0).unwrap();
        assert_eq!(out.data(), noisy.data());

        let out = d.denoise(&noisy, 1e3).unwrap();
        for (o, c) in out.data().iter().zip(clean.data()) {
            assert!((o - c).abs() < 1e-4);
        }

        let out = d.denoise(&noisy, d.sigma_floor).unwrap();
        for ((o, c), n) in out.data().iter().zip(clean.data()).zip(noisy.data()) {
            assert!((o - 0.5 * (c + n)).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_prior_sampling_loop_converges() {
        // Pure prior sampling (no data term): x_hat0 at the last step
        // should recover the oracle's image to high accuracy. The floor is
        // set below the final step's residual noise level.
        let sched = DiffusionSchedule::default();
        let mut rng = Rng::new(13);
        let clean = Image::from_fn(16, 16, |r, c| {
            if (r / 4 + c / 4) % 2 == 0 {
                0.25
            } else {
                0.75
            }
        });
        let d = OracleDenoiser { clean: clean.clone(), sigma_floor: 0.005 };
        let mut x = gaussian_noise(16, 16, 1.0, &mut rng);
        let mut x_hat0 = x.clone();
        let steps = sched.sampling_steps.clone();
        for (idx, &t) in steps.iter().enumerate() {
            x_hat0 = d.denoise(&x.map(|v| v / sched.alpha_bar(t).sqrt()), noise_level_of(t, &sched)).unwrap();
            if let Some(&t_prev) = steps.get(idx + 1) {
                x = ddim_step(&x, &x_hat0, t, t_prev, &sched).unwrap();
            }
        }
        let mse = x_hat0.dist_sq(&clean) / clean.len() as f64;
        let psnr = 10.0 * (1.0 / mse).log10();
        assert!(psnr >= 40.0, "psnr {psnr}");
    }

    #[test]
    fn extern_denoiser_cat_is_identity() {
        let mut rng = Rng::new(17);
        let img = Image::from_fn(4, 4, |_, _| rng.next_f64() as f32 as f64);
        let d = ExternDenoiser::from_command_line("cat").unwrap();
        let out = d.denoise(&img, 0.1).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn extern_denoiser_protocol_violation() {
        let img = Image::zeros(2, 2);
        let d = ExternDenoiser::from_command_line("true").unwrap();
        assert!(matches!(
            d.denoise(&img, 0.1).unwrap_err(),
            Error::ProtocolViolation(_)
        ));
    }
}
