//! End-to-end tests of the `dact` binary: exit codes, file outputs, and
//! manifest-driven reproducibility.

use std::fs;
use std::process::{Command, Output};

use dact::io::{load_image, save_image, ImageFormat};
use dact::metrics::psnr;
use dact::simulate::{phantom, ContrastTransform, PhantomKind};
use dact::Image;

fn dact(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dact"))
        .args(args)
        .output()
        .expect("spawn dact binary")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn simulate_writes_expected_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dact(&[
        "simulate", "--phantom", "nested-disks", "--size", "64", "--gamma", "0.7",
        "--k", "2", "--noise", "0.01", "--seed", "7",
        "--out-dir", dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let clean = load_image(&dir.path().join("clean.ten")).unwrap();
    let degraded = load_image(&dir.path().join("degraded.ten")).unwrap();
    assert_eq!((clean.height(), clean.width()), (64, 64));
    assert_eq!((degraded.height(), degraded.width()), (32, 32));
    assert!(dir.path().join("transform.txt").exists());
    assert!(dir.path().join("manifest.txt").exists());
}

#[test]
fn simulate_rejects_nondivisible_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = dact(&[
        "simulate", "--size", "64", "--k", "3",
        "--out-dir", dir.path().to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(stderr_of(&out).contains("divisible"), "{}", stderr_of(&out));
}

#[test]
fn manifest_regenerates_byte_identical_outputs() {
    let dir1 = tempfile::tempdir().unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    let out = dact(&[
        "simulate", "--size", "32", "--seed", "11",
        "--out-dir", dir1.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let manifest = dir1.path().join("manifest.txt");
    let out = dact(&[
        "simulate", "--config", manifest.to_str().unwrap(),
        "--out-dir", dir2.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    for name in ["clean.ten", "degraded.ten", "transform.txt"] {
        let a = fs::read(dir1.path().join(name)).unwrap();
        let b = fs::read(dir2.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between original and manifest rerun");
    }
}

#[test]
fn reconstruct_default_run_matches_listing_parameters() {
    // Criterion 6: the default run uses T=50 outer steps, J=25 inner
    // iterations, step size 0.1, and alpha initialized to 0.5 — checked
    // from the emitted manifest and the trace shape. Small input to keep
    // the default-parameter run cheap.
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    let rec = dir.path().join("rec");
    let out = dact(&["simulate", "--size", "16", "--seed", "3",
        "--out-dir", sim.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let y = sim.join("degraded.ten");
    let gt = sim.join("clean.ten");
    let out = dact(&[
        "reconstruct", "--y", y.to_str().unwrap(),
        "--denoiser", &format!("oracle:{}", gt.to_str().unwrap()),
        "--out-dir", rec.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));

    let manifest = fs::read_to_string(rec.join("manifest.txt")).unwrap();
    for line in ["outer-steps=50", "inner-iters=25", "eta-x=0.1", "eta-alpha=0.1",
                 "alpha-init=0.5", "optimizer=adaptive-moment"] {
        assert!(manifest.lines().any(|l| l == line), "manifest missing `{line}`:\n{manifest}");
    }
    let trace = fs::read_to_string(rec.join("trace.csv")).unwrap();
    let inner_rows = trace.lines().filter(|l| l.starts_with("inner,")).count();
    let outer_rows = trace.lines().filter(|l| l.starts_with("outer,")).count();
    assert_eq!(inner_rows, 50 * 25, "expected 1250 inner trace rows");
    assert_eq!(outer_rows, 50, "expected 50 outer trace rows");
    assert!(rec.join("x0.ten").exists() && rec.join("alpha.ten").exists());
}

#[test]
fn reconstruct_missing_input_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = dact(&[
        "reconstruct", "--y", "/nonexistent/input.ten",
        "--out-dir", dir.path().to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(3), "I/O failures exit with code 3");
    assert!(stderr_of(&out).contains("/nonexistent/input.ten"), "{}", stderr_of(&out));
}

#[test]
fn reconstruct_extern_protocol_violation_fails() {
    // `true` exits without writing any frame, violating the adapter protocol.
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    let out = dact(&["simulate", "--size", "16", "--out-dir", sim.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let y = sim.join("degraded.ten");
    let out = dact(&[
        "reconstruct", "--y", y.to_str().unwrap(),
        "--denoiser", "extern:true",
        "--outer-steps", "1", "--inner-iters", "1",
        "--out-dir", dir.path().join("rec").to_str().unwrap(),
    ]);
    assert!(!out.status.success(), "protocol violation must be a hard error");
}

#[test]
fn match_hist_identity_and_gamma_inverse() {
    let dir = tempfile::tempdir().unwrap();
    // Dense intensity ramp: every histogram bin is populated, so the fitted
    // LUT is well-defined across the whole [0.1, 0.9] evaluation window.
    let img = Image::from_fn(64, 64, |r, c| (r * 64 + c) as f64 / 4095.0);
    let src = dir.path().join("src.ten");
    save_image(&img, &src, ImageFormat::RawTensor).unwrap();

    // Source matched to itself: near-identity LUT, PSNR >= 45 dB.
    let out_self = dir.path().join("self");
    let out = dact(&[
        "match-hist", "--source", src.to_str().unwrap(),
        "--reference", src.to_str().unwrap(),
        "--out-dir", out_self.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let matched = load_image(&out_self.join("matched.ten")).unwrap();
    let p = psnr(&matched, &img).unwrap();
    assert!(p >= 45.0, "self-match PSNR {p:.2} < 45 dB");

    // Gamma-transformed image matched back to the original: the map should
    // approximate v^(1/0.7) within 0.05 on [0.1, 0.9].
    let phi = ContrastTransform::Gamma { gamma: 0.7 };
    let warped = phi.apply(&img);
    let wpath = dir.path().join("warped.ten");
    save_image(&warped, &wpath, ImageFormat::RawTensor).unwrap();
    let out_inv = dir.path().join("inv");
    let out = dact(&[
        "match-hist", "--source", wpath.to_str().unwrap(),
        "--reference", src.to_str().unwrap(),
        "--out-dir", out_inv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let lut_csv = fs::read_to_string(out_inv.join("lut.csv")).unwrap();
    let mut worst = 0.0f64;
    for line in lut_csv.lines().skip(1) {
        let mut cols = line.split(',');
        let c: f64 = cols.next().unwrap().parse().unwrap();
        let l: f64 = cols.next().unwrap().parse().unwrap();
        if (0.1..=0.9).contains(&c) {
            worst = worst.max((l - c.powf(1.0 / 0.7)).abs());
        }
    }
    assert!(worst <= 0.05, "inverse-gamma map Linf {worst:.4} > 0.05");
}

#[test]
fn eval_identical_files_report_reference_values() {
    let dir = tempfile::tempdir().unwrap();
    let img = phantom(32, PhantomKind::NestedDisks);
    let path = dir.path().join("img.ten");
    save_image(&img, &path, ImageFormat::RawTensor).unwrap();
    let out = dact(&["eval", "--a", path.to_str().unwrap(), "--b", path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("psnr=99.0000"), "{text}");
    assert!(text.contains("ssim=1.000000"), "{text}");
}

#[test]
fn eval_missing_file_names_path() {
    let out = dact(&["eval", "--a", "/no/such/file.ten", "--b", "/no/such/file.ten"]);
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_of(&out).contains("/no/such/file.ten"), "{}", stderr_of(&out));
}

#[test]
fn eval_csv_append_mode() {
    let dir = tempfile::tempdir().unwrap();
    let img = phantom(32, PhantomKind::NestedDisks);
    let path = dir.path().join("img.ten");
    save_image(&img, &path, ImageFormat::RawTensor).unwrap();
    let csv = dir.path().join("sweep.csv");
    for _ in 0..2 {
        let out = dact(&[
            "eval", "--a", path.to_str().unwrap(), "--b", path.to_str().unwrap(),
            "--csv", csv.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", stderr_of(&out));
    }
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "a,b,psnr,ssim,mse");
    assert_eq!(lines.len(), 3, "header plus one row per invocation:\n{text}");
}

#[test]
fn committed_fixture_regenerates_byte_identical() {
    // Guards the simulator against drift: the fixture under tests/data was
    // produced by `dact simulate` and its manifest is the single source of
    // truth for regenerating it.
    let fixture = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/fixture");
    let dir = tempfile::tempdir().unwrap();
    let out = dact(&[
        "simulate", "--config", fixture.join("manifest.txt").to_str().unwrap(),
        "--out-dir", dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    for name in ["clean.ten", "degraded.ten", "transform.txt"] {
        let committed = fs::read(fixture.join(name)).unwrap();
        let regenerated = fs::read(dir.path().join(name)).unwrap();
        assert_eq!(committed, regenerated, "{name} drifted from the committed fixture");
    }
}

#[test]
fn unknown_command_is_usage_error() {
    let out = dact(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_exits_zero() {
    let out = dact(&["help"]);
    assert!(out.status.success());
    assert!(stdout_of(&out).contains("simulate"));
}

#[test]
fn reconstruct_jobs_split_is_deterministic() {
    // Two slices with --jobs 2 must produce the same bytes as --jobs 1.
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    let out = dact(&["simulate", "--size", "16", "--out-dir", sim.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let y = sim.join("degraded.ten").to_str().unwrap().to_owned();
    let gt = sim.join("clean.ten").to_str().unwrap().to_owned();
    let pair = format!("{y},{y}");
    let common = [
        "--denoiser", &format!("oracle:{gt}"),
        "--outer-steps", "3", "--inner-iters", "2",
    ];
    let rec1 = dir.path().join("rec1");
    let rec2 = dir.path().join("rec2");
    for (dir_out, jobs) in [(&rec1, "1"), (&rec2, "2")] {
        let mut args = vec!["reconstruct", "--y", &pair, "--jobs", jobs];
        args.extend_from_slice(&common.iter().copied().collect::<Vec<_>>());
        args.extend_from_slice(&["--out-dir", dir_out.to_str().unwrap()]);
        let out = dact(&args);
        assert!(out.status.success(), "{}", stderr_of(&out));
    }
    for name in ["x0_0.ten", "x0_1.ten", "alpha_0.ten", "alpha_1.ten"] {
        let a = fs::read(rec1.join(name)).unwrap();
        let b = fs::read(rec2.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between --jobs 1 and --jobs 2");
    }
    // Per-slice seeds differ, so the two slices must not be identical runs.
    assert_ne!(
        fs::read(rec1.join("x0_0.ten")).unwrap(),
        fs::read(rec1.join("x0_1.ten")).unwrap()
    );
}
