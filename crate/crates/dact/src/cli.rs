//! Command-line interface: `simulate`, `reconstruct`, `match-hist`, `eval`.
//!
//! Flags are `--key value` or `--key=value`. `--config <path>` reads a
//! key=value file (one per line, `#` comments) supplying defaults that
//! explicit flags override; every command writes a `manifest.txt` in the
//! same format, so any run can be reproduced with
//! `dact <command> --config <manifest>`.
//!
//! Exit codes: 0 success, 2 usage or input-domain error, 3 I/O, 4 numerical
//! failure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::Error;
use crate::histogram::{soft_histogram, KdeConfig};
use crate::io::{load_image, save_image, ImageFormat};
use crate::metrics::report;
use crate::priors::{Denoiser, ExternDenoiser, GaussianDenoiser, OracleDenoiser, TvDenoiser};
use crate::simulate::{degrade, phantom, ContrastTransform, PhantomKind};
use crate::sinkhorn::{extract_lut, sinkhorn, Lut, SinkhornConfig};
use crate::solver::{reconstruct, EvalRefs, Optimizer, SolverConfig};
use crate::tensor::Rng;
use crate::transport::{apply_lut, ForwardConfig, LutGradMode};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> CliError {
        CliError { code: EXIT_USAGE, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> CliError {
        let code = match e {
            Error::Io { .. } | Error::MalformedHeader { .. } | Error::ProtocolViolation(_) => {
                EXIT_IO
            }
            Error::NonFinite { .. } | Error::SinkhornNonFinite => EXIT_NUMERICAL,
            _ => EXIT_USAGE,
        };
        CliError { code, message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

const USAGE: &str = "usage: dact <command> [--key value ...]
commands:
  simulate     generate a ground-truth phantom and its degraded measurement
  reconstruct  blind restoration of a degraded image
  match-hist   standalone OT histogram matching between two images
  eval         full-reference metrics between two images
common flags: --config <file>  --seed <u64, default 0>  --out-dir <dir>";

/// Parsed flags; config-file values fill in the gaps under CLI flags.
struct Opts {
    values: BTreeMap<String, String>,
}

/// Keys a manifest carries that are outputs, not inputs.
const MANIFEST_ONLY: &[&str] = &["command", "version", "duration_secs"];

impl Opts {
    fn parse(command: &str, args: &[String]) -> CliResult<Opts> {
        let mut values = BTreeMap::new();
        let mut i = 0;
        while i < args.len() {
            let arg = &args[i];
            let key = arg
                .strip_prefix("--")
                .ok_or_else(|| CliError::usage(format!("unexpected argument '{arg}'")))?;
            let (key, value) = match key.split_once('=') {
                Some((k, v)) => (k.to_owned(), v.to_owned()),
                None => {
                    i += 1;
                    let v = args.get(i).ok_or_else(|| {
                        CliError::usage(format!("flag --{key} expects a value"))
                    })?;
                    (key.to_owned(), v.clone())
                }
            };
            values.insert(key, value);
            i += 1;
        }
        if let Some(cfg_path) = values.get("config").cloned() {
            let text = fs::read_to_string(&cfg_path).map_err(|e| CliError {
                code: EXIT_IO,
                message: format!("cannot read config {cfg_path}: {e}"),
            })?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    CliError::usage(format!("{cfg_path}:{}: expected key=value", lineno + 1))
                })?;
                let (k, v) = (k.trim(), v.trim());
                if k == "command" && v != command {
                    return Err(CliError::usage(format!(
                        "config {cfg_path} is for '{v}', not '{command}'"
                    )));
                }
                if MANIFEST_ONLY.contains(&k) {
                    continue;
                }
                values.entry(k.to_owned()).or_insert_with(|| v.to_owned());
            }
        }
        Ok(Opts { values })
    }

    fn str_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.values.get(key).map(String::as_str).unwrap_or(default)
    }

    fn opt_str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn required(&self, key: &str) -> CliResult<&str> {
        self.opt_str(key)
            .ok_or_else(|| CliError::usage(format!("missing required flag --{key}")))
    }

    fn f64_or(&self, key: &str, default: f64) -> CliResult<f64> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CliError::usage(format!("--{key}: '{v}' is not a number"))),
        }
    }

    fn usize_or(&self, key: &str, default: usize) -> CliResult<usize> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CliError::usage(format!("--{key}: '{v}' is not a nonneg integer"))),
        }
    }

    fn u64_or(&self, key: &str, default: u64) -> CliResult<u64> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CliError::usage(format!("--{key}: '{v}' is not a u64"))),
        }
    }
}

/// Deterministic key=value manifest; rerunning with `--config <manifest>`
/// reproduces the outputs byte for byte.
struct Manifest {
    entries: BTreeMap<String, String>,
}

impl Manifest {
    fn new(command: &str) -> Manifest {
        let mut entries = BTreeMap::new();
        entries.insert("command".into(), command.into());
        entries.insert("version".into(), env!("CARGO_PKG_VERSION").into());
        Manifest { entries }
    }

    fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    fn write(&self, dir: &Path, started: Instant) -> CliResult<()> {
        let mut text = String::new();
        for (k, v) in &self.entries {
            writeln!(text, "{k}={v}").unwrap();
        }
        writeln!(text, "duration_secs={:.3}", started.elapsed().as_secs_f64()).unwrap();
        write_text(&dir.join("manifest.txt"), &text)
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError {
        code: EXIT_IO,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

fn out_dir(opts: &Opts) -> CliResult<PathBuf> {
    let dir = PathBuf::from(opts.str_or("out-dir", "."));
    fs::create_dir_all(&dir).map_err(|e| CliError {
        code: EXIT_IO,
        message: format!("cannot create {}: {e}", dir.display()),
    })?;
    Ok(dir)
}

fn lut_csv(lut: &Lut) -> String {
    let mut text = String::from("v,mapped\n");
    for &(x, y) in &lut.knots {
        writeln!(text, "{x:.9},{y:.9}").unwrap();
    }
    text
}

/// Entry point used by the binary; prints errors to stderr and returns the
/// process exit code.
pub fn run_main(args: &[String]) -> i32 {
    match run(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("dact: {}", e.message);
            e.code
        }
    }
}

pub fn run(args: &[String]) -> CliResult<()> {
    let command = args
        .first()
        .ok_or_else(|| CliError::usage(USAGE))?
        .as_str();
    let opts = Opts::parse(command, &args[1..])?;
    match command {
        "simulate" => cmd_simulate(&opts),
        "reconstruct" => cmd_reconstruct(&opts),
        "match-hist" => cmd_match_hist(&opts),
        "eval" => cmd_eval(&opts),
        "--help" | "-h" | "help" => {
            println!("{USAGE}");
            Ok(())
        }
        other => Err(CliError::usage(format!("unknown command '{other}'\n{USAGE}"))),
    }
}

fn parse_phantom(name: &str) -> CliResult<PhantomKind> {
    match name {
        "nested-disks" => Ok(PhantomKind::NestedDisks),
        "gradient-bars" => Ok(PhantomKind::GradientBars),
        "sheppl-logan" => Ok(PhantomKind::ShepplLoganLike),
        other => Err(CliError::usage(format!(
            "--phantom: unknown kind '{other}' (nested-disks, gradient-bars, sheppl-logan)"
        ))),
    }
}

fn cmd_simulate(opts: &Opts) -> CliResult<()> {
    let started = Instant::now();
    let dir = out_dir(opts)?;
    let seed = opts.u64_or("seed", 0)?;
    let k = opts.usize_or("k", 2)?;
    let noise = opts.f64_or("noise", 0.01)?;
    let gamma = opts.f64_or("gamma", 0.7)?;
    if gamma <= 0.0 {
        return Err(CliError::usage("--gamma must be positive"));
    }
    let x = match opts.opt_str("input") {
        Some(path) => load_image(Path::new(path))?,
        None => {
            let size = opts.usize_or("size", 64)?;
            if size < 16 {
                return Err(CliError::usage("--size must be at least 16"));
            }
            phantom(size, parse_phantom(opts.str_or("phantom", "nested-disks"))?)
        }
    };
    let phi = ContrastTransform::Gamma { gamma };
    let mut rng = Rng::new(seed);
    let y = degrade(&x, &phi, k, noise, &mut rng)?;

    save_image(&x, &dir.join("clean.ten"), ImageFormat::RawTensor)?;
    save_image(&y, &dir.join("degraded.ten"), ImageFormat::RawTensor)?;
    write_text(&dir.join("transform.txt"), &format!("{}\n", phi.describe()))?;

    let mut man = Manifest::new("simulate");
    if let Some(input) = opts.opt_str("input") {
        man.set("input", input);
    } else {
        man.set("phantom", opts.str_or("phantom", "nested-disks"));
        man.set("size", x.height());
    }
    man.set("gamma", gamma);
    man.set("k", k);
    man.set("noise", noise);
    man.set("seed", seed);
    man.write(&dir, started)?;
    println!(
        "simulate: wrote {}x{} clean and {}x{} degraded to {}",
        x.height(),
        x.width(),
        y.height(),
        y.width(),
        dir.display()
    );
    Ok(())
}

fn solver_config(opts: &Opts, seed: u64) -> CliResult<SolverConfig> {
    let optimizer = match opts.str_or("optimizer", "adaptive-moment") {
        "adaptive-moment" => Optimizer::AdaptiveMoment,
        "gradient-descent" => Optimizer::GradientDescent,
        other => {
            return Err(CliError::usage(format!(
                "--optimizer: '{other}' (adaptive-moment, gradient-descent)"
            )))
        }
    };
    let lut_grad_mode = match opts.str_or("grad-mode", "detached") {
        "detached" => LutGradMode::Detached,
        "full-unroll" => LutGradMode::FullUnroll,
        other => {
            return Err(CliError::usage(format!(
                "--grad-mode: '{other}' (detached, full-unroll)"
            )))
        }
    };
    let cfg = SolverConfig {
        outer_steps: opts.usize_or("outer-steps", 50)?,
        inner_iters: opts.usize_or("inner-iters", 25)?,
        eta_x: opts.f64_or("eta-x", 0.1)?,
        eta_alpha: opts.f64_or("eta-alpha", 0.1)?,
        lambda_t: opts.f64_or("lambda", 0.1)?,
        alpha_init: opts.f64_or("alpha-init", 0.5)?,
        sinkhorn: SinkhornConfig {
            epsilon: opts.f64_or("epsilon", 1e-3)?,
            max_iters: opts.usize_or("max-iters", 500)?,
            marginal_tol: opts.f64_or("tol", 1e-8)?,
            ..Default::default()
        },
        kde: KdeConfig {
            bins: opts.usize_or("bins", 64)?,
            bandwidth: opts.f64_or("bandwidth", 1.0 / 64.0)?,
        },
        forward: ForwardConfig { downsample_factor: opts.usize_or("k", 2)?, lut_grad_mode },
        optimizer,
        seed,
    };
    if cfg.outer_steps == 0
        || cfg.inner_iters == 0
        || cfg.eta_x <= 0.0
        || cfg.eta_alpha < 0.0
        || !(0.0..=1.0).contains(&cfg.alpha_init)
    {
        return Err(CliError::usage(
            "solver flags out of range (steps >= 1, eta-x > 0, alpha-init in [0,1])",
        ));
    }
    Ok(cfg)
}

fn make_denoiser(spec: &str) -> CliResult<Box<dyn Denoiser>> {
    if spec == "gaussian" {
        return Ok(Box::new(GaussianDenoiser::default()));
    }
    if spec == "tv" {
        return Ok(Box::new(TvDenoiser::default()));
    }
    if let Some(path) = spec.strip_prefix("oracle:") {
        let clean = load_image(Path::new(path))?;
        return Ok(Box::new(OracleDenoiser::new(clean)));
    }
    if let Some(cmd) = spec.strip_prefix("extern:") {
        return Ok(Box::new(ExternDenoiser::from_command_line(cmd)?));
    }
    Err(CliError::usage(format!(
        "--denoiser: '{spec}' (gaussian, tv, oracle:<path>, extern:<cmd>)"
    )))
}

fn record_solver_flags(man: &mut Manifest, cfg: &SolverConfig) {
    man.set("outer-steps", cfg.outer_steps);
    man.set("inner-iters", cfg.inner_iters);
    man.set("eta-x", cfg.eta_x);
    man.set("eta-alpha", cfg.eta_alpha);
    man.set("lambda", cfg.lambda_t);
    man.set("alpha-init", cfg.alpha_init);
    man.set("epsilon", cfg.sinkhorn.epsilon);
    man.set("max-iters", cfg.sinkhorn.max_iters);
    man.set("tol", cfg.sinkhorn.marginal_tol);
    man.set("bins", cfg.kde.bins);
    man.set("bandwidth", cfg.kde.bandwidth);
    man.set("k", cfg.forward.downsample_factor);
    man.set(
        "grad-mode",
        match cfg.forward.lut_grad_mode {
            LutGradMode::Detached => "detached",
            LutGradMode::FullUnroll => "full-unroll",
        },
    );
    man.set(
        "optimizer",
        match cfg.optimizer {
            Optimizer::AdaptiveMoment => "adaptive-moment",
            Optimizer::GradientDescent => "gradient-descent",
        },
    );
}

fn cmd_reconstruct(opts: &Opts) -> CliResult<()> {
    let started = Instant::now();
    let dir = out_dir(opts)?;
    let seed = opts.u64_or("seed", 0)?;
    let jobs = opts.usize_or("jobs", 1)?.max(1);
    let denoiser_spec = opts.str_or("denoiser", "gaussian").to_owned();
    let inputs: Vec<&str> = opts.required("y")?.split(',').collect();
    let base_cfg = solver_config(opts, seed)?;
    let eval = match opts.opt_str("gt") {
        Some(path) => {
            Some(EvalRefs { ground_truth: load_image(Path::new(path))?, phi_truth: None })
        }
        None => None,
    };

    // One solver per slice; per-slice seeds are seed XOR slice index so a
    // sliced run is reproducible regardless of scheduling.
    let n = inputs.len();
    let mut results: Vec<Option<CliResult<()>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (chunk_idx, (chunk_in, chunk_out)) in inputs
            .chunks(n.div_ceil(jobs))
            .zip(results.chunks_mut(n.div_ceil(jobs)))
            .enumerate()
        {
            let base = chunk_idx * n.div_ceil(jobs);
            let cfg = &base_cfg;
            let eval = eval.as_ref();
            let dir = &dir;
            let denoiser_spec = &denoiser_spec;
            scope.spawn(move || {
                for (off, (input, slot)) in chunk_in.iter().zip(chunk_out.iter_mut()).enumerate() {
                    let slice = base + off;
                    *slot = Some(run_one_slice(
                        input,
                        slice,
                        n,
                        denoiser_spec,
                        cfg,
                        eval,
                        dir,
                    ));
                }
            });
        }
    });
    for r in results {
        r.expect("every slice ran")?;
    }

    let mut man = Manifest::new("reconstruct");
    man.set("y", inputs.join(","));
    man.set("denoiser", &denoiser_spec);
    man.set("seed", seed);
    man.set("jobs", jobs);
    if let Some(gt) = opts.opt_str("gt") {
        man.set("gt", gt);
    }
    record_solver_flags(&mut man, &base_cfg);
    man.write(&dir, started)?;
    println!("reconstruct: {n} slice(s) written to {}", dir.display());
    Ok(())
}

fn run_one_slice(
    input: &str,
    slice: usize,
    n_slices: usize,
    denoiser_spec: &str,
    base_cfg: &SolverConfig,
    eval: Option<&EvalRefs>,
    dir: &Path,
) -> CliResult<()> {
    let y = load_image(Path::new(input))?;
    let denoiser = make_denoiser(denoiser_spec)?;
    let cfg = SolverConfig { seed: base_cfg.seed ^ slice as u64, ..base_cfg.clone() };
    let res = reconstruct(&y, denoiser.as_ref(), &cfg, eval)?;
    let suffix = if n_slices == 1 { String::new() } else { format!("_{slice}") };
    save_image(&res.x0, &dir.join(format!("x0{suffix}.ten")), ImageFormat::RawTensor)?;
    save_image(&res.alpha, &dir.join(format!("alpha{suffix}.ten")), ImageFormat::RawTensor)?;
    write_text(&dir.join(format!("trace{suffix}.csv")), &res.trace.to_csv())?;
    write_text(&dir.join(format!("lut{suffix}.csv")), &lut_csv(&res.lut))?;
    Ok(())
}

fn cmd_match_hist(opts: &Opts) -> CliResult<()> {
    let started = Instant::now();
    let dir = out_dir(opts)?;
    let source = load_image(Path::new(opts.required("source")?))?;
    let reference = load_image(Path::new(opts.required("reference")?))?;
    // A single --bins applies to both histograms; the plan must be square
    // in intensity space for the rearrangement semantics to hold.
    let kde = KdeConfig {
        bins: opts.usize_or("bins", 64)?,
        bandwidth: opts.f64_or("bandwidth", 1.0 / 64.0)?,
    };
    let sk = SinkhornConfig {
        epsilon: opts.f64_or("epsilon", 1e-3)?,
        max_iters: opts.usize_or("max-iters", 500)?,
        marginal_tol: opts.f64_or("tol", 1e-8)?,
        ..Default::default()
    };
    let h_src = soft_histogram(&source, &kde)?.floored();
    let h_ref = soft_histogram(&reference, &kde)?.floored();
    let plan = sinkhorn(&h_src, &h_ref, &sk)?;
    let lut = extract_lut(&plan, &h_ref.centers)?;
    let mut matched = apply_lut(&source, &lut);
    matched.clamp01();

    save_image(&matched, &dir.join("matched.ten"), ImageFormat::RawTensor)?;
    write_text(&dir.join("lut.csv"), &lut_csv(&lut))?;
    let mut man = Manifest::new("match-hist");
    man.set("source", opts.required("source")?);
    man.set("reference", opts.required("reference")?);
    man.set("bins", kde.bins);
    man.set("bandwidth", kde.bandwidth);
    man.set("epsilon", sk.epsilon);
    man.set("max-iters", sk.max_iters);
    man.set("tol", sk.marginal_tol);
    man.write(&dir, started)?;
    println!(
        "match-hist: sinkhorn {} iterations (marginal error {:.2e}), outputs in {}",
        plan.iterations,
        plan.marginal_error,
        dir.display()
    );
    Ok(())
}

fn cmd_eval(opts: &Opts) -> CliResult<()> {
    let path_a = opts.required("a")?;
    let path_b = opts.required("b")?;
    let a = load_image(Path::new(path_a))?;
    let b = load_image(Path::new(path_b))?;
    let rep = report(&a, &b)?;
    println!("psnr={:.4} ssim={:.6} mse={:.6e}", rep.psnr, rep.ssim, rep.mse);
    if let Some(csv) = opts.opt_str("csv") {
        let path = Path::new(csv);
        let mut text = if path.exists() {
            fs::read_to_string(path).map_err(|e| CliError {
                code: EXIT_IO,
                message: format!("cannot read {csv}: {e}"),
            })?
        } else {
            String::from("a,b,psnr,ssim,mse\n")
        };
        writeln!(text, "{path_a},{path_b},{:.4},{:.6},{:.6e}", rep.psnr, rep.ssim, rep.mse)
            .unwrap();
        write_text(path, &text)?;
    }
    Ok(())
}
