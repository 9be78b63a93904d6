//! End-to-end runs of the `modnic` binary: dataset generation, both training
//! phases, coding round trips, reporting commands, and the failure paths.
//! Training here is deliberately tiny; statistical quality claims live in
//! the acceptance suite.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_modnic"))
}

fn run_ok(args: &[&str]) -> String {
    let out = bin().args(args).output().expect("spawn modnic");
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

fn run_err(args: &[&str]) -> String {
    let out = bin().args(args).output().expect("spawn modnic");
    assert!(!out.status.success(), "command {:?} unexpectedly succeeded", args);
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(!stderr.trim().is_empty(), "command {:?} failed silently", args);
    stderr
}

fn value_of(stdout: &str, key: &str) -> String {
    let prefix = format!("{key} = ");
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(&prefix))
        .unwrap_or_else(|| panic!("no `{key}` in output:\n{stdout}"))
        .to_string()
}

fn num_of(stdout: &str, key: &str) -> f64 {
    value_of(stdout, key).parse().expect("numeric value")
}

fn s(path: &Path) -> String {
    path.to_str().expect("utf-8 path").to_string()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_str().unwrap().to_string(), std::fs::read(&p).unwrap())
        })
        .collect();
    entries.sort();
    entries
}

#[test]
fn gen_data_is_seed_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let d1 = tmp.path().join("d1");
    let d2 = tmp.path().join("d2");
    let d3 = tmp.path().join("d3");
    let out = run_ok(&["gen-data", "--kind", "checker", "--count", "3", "--out", &s(&d1), "--seed", "5"]);
    assert!(out.contains("wrote 3 files"));
    run_ok(&["gen-data", "--kind", "checker", "--count", "3", "--out", &s(&d2), "--seed", "5"]);
    assert_eq!(dir_bytes(&d1), dir_bytes(&d2));

    // MODNIC_SEED is the fallback for a missing --seed.
    let out = bin()
        .args(["gen-data", "--kind", "checker", "--count", "3", "--out", &s(&d3)])
        .env("MODNIC_SEED", "5")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(dir_bytes(&d1), dir_bytes(&d3));
}

struct Trained {
    _tmp: tempfile::TempDir,
    data: PathBuf,
    base: PathBuf,
    vbr: PathBuf,
}

fn train_tiny() -> Trained {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let data = root.join("data");
    run_ok(&["gen-data", "--kind", "blobs", "--count", "4", "--size", "32", "--out", &s(&data), "--seed", "9"]);

    let cfg = root.join("cfg.txt");
    std::fs::write(
        &cfg,
        "batch = 2\nbase_steps = 60\nmodnet_steps = 40\nlr = 1e-3\n\
         latent_channels = 4\nmodulator_width = 3\nseed = 11\n",
    )
    .unwrap();

    let base = root.join("base.mnck");
    let log = root.join("base_log.csv");
    let out = run_ok(&[
        "train-base", "--dataset", &s(&data), "--out", &s(&base), "--config", &s(&cfg), "--log", &s(&log),
    ]);
    assert_eq!(value_of(&out, "steps"), "60");
    let log_text = std::fs::read_to_string(&log).unwrap();
    assert!(log_text.starts_with("step,loss,mse,rate_bpp,lambda_mean\n"));
    assert_eq!(log_text.lines().count(), 61);

    // Same config, same dataset: byte-identical checkpoint.
    let base2 = root.join("base2.mnck");
    run_ok(&["train-base", "--dataset", &s(&data), "--out", &s(&base2), "--config", &s(&cfg)]);
    assert_eq!(std::fs::read(&base).unwrap(), std::fs::read(&base2).unwrap());

    let vbr = root.join("vbr.mnck");
    let out = run_ok(&[
        "train-modnet", "--dataset", &s(&data), "--base", &s(&base), "--out", &s(&vbr), "--config", &s(&cfg),
    ]);
    assert_eq!(value_of(&out, "steps"), "40");

    Trained { _tmp: tmp, data, base, vbr }
}

#[test]
fn end_to_end_coding_and_reports() {
    let t = train_tiny();
    let root = t.data.parent().unwrap().to_path_buf();
    let image = t.data.join("blobs_0000.ppm");
    let ck = s(&t.vbr);

    // Encode twice: identical bitstreams, bpp accounts for the whole file.
    let stream = root.join("out.mnic");
    let out = run_ok(&["encode", "--checkpoint", &ck, "--input", &s(&image), "--out", &s(&stream), "--lambda", "16"]);
    let bytes = num_of(&out, "bytes") as usize;
    let bpp = num_of(&out, "bpp");
    assert_eq!(std::fs::read(&stream).unwrap().len(), bytes);
    assert!((bpp - (bytes * 8) as f64 / 1024.0).abs() < 1e-12);
    let stream2 = root.join("out2.mnic");
    run_ok(&["encode", "--checkpoint", &ck, "--input", &s(&image), "--out", &s(&stream2), "--lambda", "16"]);
    assert_eq!(std::fs::read(&stream).unwrap(), std::fs::read(&stream2).unwrap());

    // Decode and eval agree on the rate report.
    let rec = root.join("rec.ppm");
    let out = run_ok(&["decode", "--checkpoint", &ck, "--input", &s(&stream), "--out", &s(&rec)]);
    assert_eq!(value_of(&out, "width"), "32");
    assert_eq!(value_of(&out, "modulated"), "true");
    let eval_csv = root.join("eval.csv");
    let out = run_ok(&[
        "eval", "--checkpoint", &ck, "--input", &s(&image), "--lambda", "16", "--csv", &s(&eval_csv),
    ]);
    assert!((num_of(&out, "bpp") - bpp).abs() < 1e-9);
    assert!(num_of(&out, "psnr_db") > 0.0);
    let csv = std::fs::read_to_string(&eval_csv).unwrap();
    assert!(csv.starts_with("lambda,bpp,mse,psnr_db,msssim,msssim_db\n"));

    // The base checkpoint hashes differently, so its bitstreams are foreign.
    let err = run_err(&["decode", "--checkpoint", &s(&t.base), "--input", &s(&stream), "--out", &s(&rec)]);
    assert!(err.contains("model"), "stderr: {err}");
    // Lambda without a modulation network is an error; plain encode works.
    run_err(&["encode", "--checkpoint", &s(&t.base), "--input", &s(&image), "--out", &s(&stream2), "--lambda", "4"]);
    run_ok(&["encode", "--checkpoint", &s(&t.base), "--input", &s(&image), "--out", &s(&stream2)]);
    run_ok(&["decode", "--checkpoint", &s(&t.base), "--input", &s(&stream2), "--out", &s(&rec)]);

    // Sweep: one row per (image, lambda) pair, reproducible byte for byte.
    let sweep = root.join("sweep.csv");
    let out = run_ok(&[
        "sweep", "--checkpoint", &ck, "--images", &s(&t.data), "--lambdas", "1,8,64,256", "--out", &s(&sweep),
    ]);
    assert_eq!(value_of(&out, "rows"), "16");
    let sweep2 = root.join("sweep2.csv");
    run_ok(&[
        "sweep", "--checkpoint", &ck, "--images", &s(&t.data), "--lambdas", "1,8,64,256", "--out", &s(&sweep2),
    ]);
    assert_eq!(std::fs::read(&sweep).unwrap(), std::fs::read(&sweep2).unwrap());
    let text = std::fs::read_to_string(&sweep).unwrap();
    assert_eq!(text.lines().count(), 17);

    // Rate control: pin down the achievable window first.
    let lo = num_of(&run_ok(&["eval", "--checkpoint", &ck, "--input", &s(&image), "--lambda", "1"]), "bpp");
    let hi = num_of(&run_ok(&["eval", "--checkpoint", &ck, "--input", &s(&image), "--lambda", "256"]), "bpp");
    let target = format!("{}", 0.5 * (lo + hi));
    let rc = &[
        "rate-control", "--checkpoint", &ck, "--input", &s(&image), "--target-bpp", &target,
        "--alpha", "39.301", "--beta", "1.296", "--refine", "3",
    ];
    if lo <= hi {
        let out = run_ok(rc);
        let achieved = num_of(&out, "achieved_bpp");
        assert!(achieved >= lo - 1e-12 && achieved <= hi + 1e-12);
        assert!(num_of(&out, "encodes") >= 2.0);
        assert!(num_of(&out, "bre") >= 0.0);
    } else {
        let err = run_err(rc);
        assert!(err.contains("monotone"), "stderr: {err}");
    }
    // A target far beyond the model's reach is rejected with a diagnostic.
    let err = run_err(&[
        "rate-control", "--checkpoint", &ck, "--input", &s(&image), "--target-bpp", "1000",
        "--alpha", "39.301", "--beta", "1.296",
    ]);
    assert!(err.contains("bpp"), "stderr: {err}");
}

#[test]
fn bd_rate_matches_known_shifts() {
    use modnic_core::rdmodel::{eval_r_of_lambda, PRESET_MSE};
    let (alpha, beta) = PRESET_MSE;
    let tmp = tempfile::tempdir().unwrap();
    let write_curve = |name: &str, rate_scale: f64| -> PathBuf {
        let mut text = String::from("lambda,bpp,mse,psnr_db,msssim,msssim_db\n");
        for (i, l) in [1.0f64, 4.0, 16.0, 64.0].iter().enumerate() {
            let r = rate_scale * eval_r_of_lambda(*l, alpha, beta).unwrap();
            let q = 30.0 + 3.0 * i as f64;
            text.push_str(&format!("{l},{r},0.001,{q},0.9,10.0\n"));
        }
        let path = tmp.path().join(name);
        std::fs::write(&path, text).unwrap();
        path
    };
    let anchor = write_curve("anchor.csv", 1.0);
    let same = write_curve("same.csv", 1.0);
    let heavier = write_curve("heavier.csv", 1.1);

    let out = run_ok(&["bd-rate", "--anchor", &s(&anchor), "--test", &s(&same), "--quality", "psnr"]);
    assert!(num_of(&out, "bd_rate_percent").abs() < 1e-9);
    let out = run_ok(&["bd-rate", "--anchor", &s(&anchor), "--test", &s(&heavier)]);
    assert!((num_of(&out, "bd_rate_percent") - 10.0).abs() < 1e-6);
}

#[test]
fn fit_rd_recovers_known_coefficients() {
    use modnic_core::rdmodel::{eval_d_of_lambda, eval_r_of_lambda, PRESET_MSE};
    let (alpha, beta) = PRESET_MSE;
    let tmp = tempfile::tempdir().unwrap();
    let sweep = tmp.path().join("sweep.csv");
    let mut text = String::from("lambda,bpp,mse,psnr_db,msssim,msssim_db\n");
    for l in [1.0, 4.0, 8.0, 16.0, 32.0, 64.0, 100.0] {
        let r = eval_r_of_lambda(l, alpha, beta).unwrap();
        let d = eval_d_of_lambda(l, alpha, beta).unwrap();
        text.push_str(&format!("{l},{r},{d},30.0,0.9,10.0\n"));
    }
    std::fs::write(&sweep, text).unwrap();

    let report = tmp.path().join("fit.txt");
    let out = run_ok(&["fit-rd", "--sweep", &s(&sweep), "--metric", "mse", "--out", &s(&report)]);
    assert!((num_of(&out, "alpha") - alpha).abs() / alpha < 0.01);
    assert!((num_of(&out, "beta") - beta).abs() / beta < 0.01);
    assert!(num_of(&out, "r2") > 0.999);
    assert!(num_of(&out, "consistency_max_rel_dev") < 1e-3);
    assert_eq!(std::fs::read_to_string(&report).unwrap(), out);
}

#[test]
fn gradcheck_and_selftest_pass() {
    let out = run_ok(&["gradcheck", "--coords", "2", "--seed", "3"]);
    assert!(out.contains("loss_vbr_weighted"));
    assert!(out.contains("all gradients within"));
    let out = run_ok(&["selftest", "--seed", "3"]);
    assert!(out.contains("ok range coder"));
    assert!(out.trim_end().ends_with("selftest passed"));
}

#[test]
fn malformed_inputs_fail_with_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let garbage = root.join("garbage.bin");
    std::fs::write(&garbage, b"not a container").unwrap();

    // A real checkpoint, written through the library, to get past loading.
    let ck_path = root.join("tiny.mnck");
    {
        use modnic_core::density::DensityParams;
        use modnic_core::modnet::ModNetParams;
        use modnic_core::rng;
        use modnic_core::trainer::{Checkpoint, TrainConfig};
        use modnic_core::transforms::TransformParams;
        let mut r = rng::seeded(1);
        let mut config = TrainConfig::toy();
        config.latent_channels = 4;
        config.modulator_width = 3;
        let ck = Checkpoint {
            transforms: TransformParams::toy(4, &mut r),
            density: DensityParams::init(4, &mut r),
            modnet: Some(ModNetParams::init(4, 3, &mut r)),
            config,
            step: 0,
        };
        modnic::checkpoint::save(&ck, &ck_path).unwrap();
    }

    let out = root.join("out");
    let err = run_err(&["decode", "--checkpoint", &s(&garbage), "--input", &s(&garbage), "--out", &s(&out)]);
    assert!(err.contains("magic") || err.contains("parsing"), "stderr: {err}");
    let err = run_err(&["decode", "--checkpoint", &s(&ck_path), "--input", &s(&garbage), "--out", &s(&out)]);
    assert!(err.contains("magic") || err.contains("short"), "stderr: {err}");
    run_err(&["eval", "--checkpoint", &s(&ck_path), "--input", &s(&root.join("missing.ppm")), ]);
    let err = run_err(&["gen-data", "--kind", "plasma", "--count", "1", "--out", &s(&root.join("d"))]);
    assert!(err.contains("unknown kind"));
    let err = run_err(&["gen-data", "--kind", "blobs", "--count", "1", "--size", "20", "--out", &s(&root.join("d"))]);
    assert!(err.contains("multiple of 16"));
    run_err(&["sweep", "--checkpoint", &s(&ck_path), "--images", &s(root), "--lambdas", "1,x", "--out", &s(&out)]);
    let bad_csv = root.join("bad.csv");
    std::fs::write(&bad_csv, "a,b\n1,2\n").unwrap();
    let err = run_err(&["fit-rd", "--sweep", &s(&bad_csv)]);
    assert!(err.contains("header"));
    let bad_cfg = root.join("bad_cfg.txt");
    std::fs::write(&bad_cfg, "warp = 9\n").unwrap();
    let err = run_err(&["train-base", "--dataset", &s(root), "--out", &s(&out), "--config", &s(&bad_cfg)]);
    assert!(err.contains("unknown key"));
}
