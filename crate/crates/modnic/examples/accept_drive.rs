// Temporary feasibility driver for the trained-model acceptance criteria.
// `accept_drive train` trains and saves checkpoints under /tmp; plain
// `accept_drive` reloads them and prints every trained-model metric.

use modnic::checkpoint;
use modnic::gendata::{generate, Kind};
use modnic::pipeline;
use modnic_core::rdmodel::{self, FitModel, FitOptions, Metric, RdSample};
use modnic_core::tensor::Tensor;
use modnic_core::trainer::{train_base, train_modnet, TrainConfig};
use std::path::Path;
use std::time::Instant;

const LAMBDAS: [f64; 8] = [1.0, 4.0, 8.0, 16.0, 32.0, 64.0, 100.0, 256.0];

fn dataset(seed: u64, base_index: usize, per_kind: usize) -> Vec<Tensor> {
    let mut out = Vec::new();
    for kind in Kind::ALL {
        for i in 0..per_kind {
            out.push(generate(kind, 32, seed, base_index + i).to_tensor());
        }
    }
    out
}

fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut r = vec![0.0; v.len()];
        for (ri, &i) in idx.iter().enumerate() {
            r[i] = ri as f64;
        }
        r
    };
    let (rx, ry) = (rank(xs), rank(ys));
    let n = xs.len() as f64;
    let mean = (n - 1.0) / 2.0;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for i in 0..xs.len() {
        num += (rx[i] - mean) * (ry[i] - mean);
        dx += (rx[i] - mean).powi(2);
        dy += (ry[i] - mean).powi(2);
    }
    num / (dx * dy).sqrt()
}

fn env_f64(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn env_usize(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_default();
    let base_path = Path::new("/tmp/accept_base.mnck");
    let vbr_path = Path::new("/tmp/accept_vbr.mnck");
    let fixed_path = Path::new("/tmp/accept_fixed16.mnck");

    let mut cfg = TrainConfig::toy();
    cfg.lr = env_f64("LR", cfg.lr);
    cfg.base_steps = env_usize("BASE_STEPS", cfg.base_steps);
    cfg.modnet_steps = env_usize("MODNET_STEPS", cfg.modnet_steps);
    let mut modnet_cfg = cfg.clone();
    modnet_cfg.lr = env_f64("MODNET_LR", cfg.lr);
    println!(
        "cfg: lr {} base_steps {} modnet_steps {} modnet_lr {}",
        cfg.lr, cfg.base_steps, cfg.modnet_steps, modnet_cfg.lr
    );

    if mode == "train" {
        let data = dataset(1234, 0, 16);
        let t0 = Instant::now();
        let base = train_base(&cfg, &data).unwrap();
        println!("base trained in {:.1}s, final loss {:.4}", t0.elapsed().as_secs_f64(), base.log.last().unwrap().loss);
        checkpoint::save(&base.checkpoint, base_path).unwrap();
        let t1 = Instant::now();
        let vbr = train_modnet(&modnet_cfg, &base.checkpoint, &data).unwrap();
        println!("modnet trained in {:.1}s, final loss {:.4}", t1.elapsed().as_secs_f64(), vbr.log.last().unwrap().loss);
        checkpoint::save(&vbr.checkpoint, vbr_path).unwrap();

        let mut cfg16 = cfg.clone();
        cfg16.lambda_pretrain = 16.0;
        let t2 = Instant::now();
        let fixed = train_base(&cfg16, &data).unwrap();
        println!("fixed16 trained in {:.1}s, final loss {:.4}", t2.elapsed().as_secs_f64(), fixed.log.last().unwrap().loss);
        checkpoint::save(&fixed.checkpoint, fixed_path).unwrap();
        return;
    }
    if mode == "modnet" {
        let data = dataset(1234, 0, 16);
        let base = checkpoint::load(base_path).unwrap();
        let t1 = Instant::now();
        let vbr = train_modnet(&modnet_cfg, &base, &data).unwrap();
        println!("modnet trained in {:.1}s, final loss {:.4}", t1.elapsed().as_secs_f64(), vbr.log.last().unwrap().loss);
        checkpoint::save(&vbr.checkpoint, vbr_path).unwrap();
        return;
    }

    let vbr = checkpoint::load(vbr_path).unwrap();
    let fixed = checkpoint::load(fixed_path).unwrap();
    let eval_set = dataset(1234, 100, 8);

    // Criterion 4: sweep table.
    let mut mean_bpp = Vec::new();
    let mut mean_psnr = Vec::new();
    let mut mean_mse = Vec::new();
    for &l in &LAMBDAS {
        let mut b = 0.0;
        let mut p = 0.0;
        let mut m = 0.0;
        for img in &eval_set {
            let (enc, rep) = pipeline::eval_image(&vbr, img, Some(l), false).unwrap();
            b += enc.bpp();
            p += rep.psnr_db;
            m += rep.mse;
        }
        let n = eval_set.len() as f64;
        mean_bpp.push(b / n);
        mean_psnr.push(p / n);
        mean_mse.push(m / n);
        println!("lambda {l:>6}: bpp {:.4}  psnr {:.2}  mse {:.6}", b / n, p / n, m / n);
    }
    let rho_bpp = spearman(&LAMBDAS, &mean_bpp);
    let rho_psnr = spearman(&LAMBDAS, &mean_psnr);
    let strictly = mean_bpp.windows(2).all(|w| w[1] > w[0]);
    println!("criterion 4: bpp strictly increasing {strictly}, rho_bpp {rho_bpp:.3}, rho_psnr {rho_psnr:.3}");

    // Criterion 5: D-lambda fit on the sweep.
    let samples: Vec<RdSample> = LAMBDAS
        .iter()
        .zip(&mean_bpp)
        .zip(&mean_mse)
        .map(|((&l, &b), &m)| RdSample { lambda: l, bpp: b, distortion: m, metric: Metric::Mse })
        .collect();
    let dfit = rdmodel::fit(&samples, FitOptions { log_domain: true, ..FitOptions::default() });
    match &dfit {
        Ok(f) => println!("criterion 5: alpha {:.3} beta {:.3} r2 {:.4}", f.alpha, f.beta, f.r2),
        Err(e) => println!("criterion 5: FIT FAILED {e}"),
    }

    // Criterion 6: consistency on the fitted pair.
    if let Ok(f) = &dfit {
        let grid: Vec<f64> = (0..64).map(|i| 1.0 * (256.0f64 / 1.0).powf(i as f64 / 63.0)).collect();
        let dev = rdmodel::consistency_check(f.alpha, f.beta, &grid, 1e-3);
        println!("criterion 6: max rel dev {dev:.2e}");
    }

    // Criterion 7: rate control on one held-out image.
    let rfit = rdmodel::fit(
        &samples,
        FitOptions { model: FitModel::LambdaOfR, log_domain: true, ..FitOptions::default() },
    );
    match &rfit {
        Ok(f) => {
            println!("r-lambda fit: alpha {:.3} beta {:.3} r2 {:.4}", f.alpha, f.beta, f.r2);
            let img = &eval_set[0];
            let (enc_max, _) = pipeline::eval_image(&vbr, img, Some(256.0), false).unwrap();
            let max_bpp = enc_max.bpp();
            for frac in [0.3, 0.5, 0.7] {
                let target = frac * max_bpp;
                let one_shot_lambda = rdmodel::eval_lambda_of_r(target, f.alpha, f.beta)
                    .unwrap()
                    .clamp(1.0, 256.0);
                let (e1, _) = pipeline::eval_image(&vbr, img, Some(one_shot_lambda), false).unwrap();
                let bre1 = (e1.bpp() - target).abs() / target;
                let mut encode_at =
                    |l: f64| pipeline::eval_image(&vbr, img, Some(l), false).unwrap().0.bpp();
                let refined = rdmodel::rate_control(target, f, (1.0, 256.0), 3, &mut encode_at);
                match refined {
                    Ok(o) => println!(
                        "target {:.0}% ({target:.4}): one-shot bre {:.3} | refined bre {:.3} ({} encodes)",
                        frac * 100.0, bre1, o.bre, o.encodes
                    ),
                    Err(e) => println!("target {:.0}%: one-shot bre {bre1:.3} | refine FAILED {e}", frac * 100.0),
                }
            }
        }
        Err(e) => println!("criterion 7: R-lambda FIT FAILED {e}"),
    }

    // Criterion 9: fixed-vs-VBR at lambda 16.
    let mut fb = 0.0;
    let mut fp = 0.0;
    let mut vb = 0.0;
    let mut vp = 0.0;
    for img in &eval_set {
        let (ef, rf) = pipeline::eval_image(&fixed, img, None, false).unwrap();
        let (ev, rv) = pipeline::eval_image(&vbr, img, Some(16.0), false).unwrap();
        fb += ef.bpp();
        fp += rf.psnr_db;
        vb += ev.bpp();
        vp += rv.psnr_db;
    }
    let n = eval_set.len() as f64;
    println!(
        "criterion 9: fixed bpp {:.4} psnr {:.2} | vbr bpp {:.4} psnr {:.2} | gap {:.2} dB, bpp ratio {:.3}",
        fb / n, fp / n, vb / n, vp / n,
        (fp / n - vp / n).abs(),
        (vb / n) / (fb / n)
    );
}
