//! Command-line surface for the modnic codec.
//!
//! One subcommand per workflow stage: dataset generation, two-phase
//! training, encode/decode/eval, lambda sweeps, R-D model fitting, rate
//! control, BD-rate, and the self-check commands. All randomness flows from
//! `--seed` (or the `MODNIC_SEED` environment variable), so identical
//! invocations produce byte-identical outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use modnic::{bitstream, checkpoint, csvio, gendata, pipeline, ppm::Ppm, verify};
use modnic_core::coder;
use modnic_core::density;
use modnic_core::gradcheck;
use modnic_core::metrics;
use modnic_core::rdmodel::{self, FitOptions, Metric, RdModelParams};
use modnic_core::rng;
use modnic_core::trainer::{self, Checkpoint, TrainConfig, TrainError, TrainRun};
use modnic_core::transforms::LatentCode;

#[derive(Parser)]
#[command(name = "modnic", version, about = "Continuous variable-rate image codec")]
struct Cli {
    /// Master seed; falls back to MODNIC_SEED, then 7.
    #[arg(long, global = true, env = "MODNIC_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the fixed-rate base (transforms and density) at lambda_pretrain.
    TrainBase {
        /// Directory of .ppm/.pgm training images.
        #[arg(long)]
        dataset: PathBuf,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
        /// `key = value` config file; defaults to the toy preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the configured base step count.
        #[arg(long)]
        steps: Option<usize>,
        /// Override the configured batch size.
        #[arg(long)]
        batch: Option<usize>,
        /// Per-step CSV log to write.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the modulation network against a frozen base checkpoint.
    TrainModnet {
        #[arg(long)]
        dataset: PathBuf,
        /// Base checkpoint from `train-base`.
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Config file; defaults to the base checkpoint's config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the configured ModNet step count.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Compress one image to a bitstream file.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Coding factor in [lambda_min, lambda_max]; omit for the
        /// unmodulated base codec.
        #[arg(long)]
        lambda: Option<f64>,
        /// Binarize the modulation mask at 0.5.
        #[arg(long)]
        hard_mask: bool,
    },
    /// Reconstruct a bitstream file to a PPM image.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode one image and report rate and quality.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        hard_mask: bool,
        /// Also append the report as a one-row sweep CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Encode every image in a directory at each lambda; one CSV row per
    /// (image, lambda) pair.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        /// Comma-separated lambda list, e.g. 1,4,8,16,32,64,100.
        #[arg(long)]
        lambdas: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the D-lambda law to a sweep CSV.
    FitRd {
        #[arg(long)]
        sweep: PathBuf,
        /// Distortion metric: mse or msssim (fits 1 - MS-SSIM).
        #[arg(long, default_value = "mse")]
        metric: String,
        /// Also write the report to a file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pick a lambda that hits a target bpp on one image.
    RateControl {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        target_bpp: f64,
        /// Bisection refinements after the one-shot model guess.
        #[arg(long, default_value_t = 3)]
        refine: usize,
        /// Sweep CSV to fit the R-lambda model from.
        #[arg(long)]
        sweep: Option<PathBuf>,
        /// Use fixed model coefficients instead of fitting (with --beta).
        #[arg(long, requires = "beta")]
        alpha: Option<f64>,
        #[arg(long, requires = "alpha")]
        beta: Option<f64>,
        #[arg(long, default_value = "mse")]
        metric: String,
    },
    /// Average rate difference between two sweep CSVs at equal quality.
    BdRate {
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Quality axis: psnr or msssim (dB).
        #[arg(long, default_value = "psnr")]
        quality: String,
    },
    /// Check every differentiable op and the full losses against finite
    /// differences; nonzero exit above 1e-4 relative error.
    Gradcheck {
        /// Coordinates sampled per tensor.
        #[arg(long, default_value_t = 4)]
        coords: usize,
    },
    /// Fast end-to-end sanity checks of the coding stack.
    Selftest,
    /// Write synthetic training images.
    GenData {
        /// blobs, gradients, checker, or bandnoise.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        count: usize,
        /// Square image size, a multiple of 16.
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let seed = cli.seed;
    match cli.command {
        Command::TrainBase { dataset, out, config, steps, batch, log } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = steps {
                cfg.base_steps = s;
            }
            apply_common_overrides(&mut cfg, batch, seed)?;
            let data = gendata::load_dataset(&dataset)?;
            let run = finish_train(trainer::train_base(&cfg, &data), &out)?;
            write_train_outputs(&run, &out, log.as_deref())
        }
        Command::TrainModnet { dataset, base, out, config, steps, batch, log } => {
            let base_ck = checkpoint::load(&base)?;
            let mut cfg = match config.as_deref() {
                Some(path) => load_config(Some(path))?,
                None => base_ck.config.clone(),
            };
            if let Some(s) = steps {
                cfg.modnet_steps = s;
            }
            apply_common_overrides(&mut cfg, batch, seed)?;
            let data = gendata::load_dataset(&dataset)?;
            let run = finish_train(trainer::train_modnet(&cfg, &base_ck, &data), &out)?;
            write_train_outputs(&run, &out, log.as_deref())
        }
        Command::Encode { checkpoint: ck, input, out, lambda, hard_mask } => {
            let ck = checkpoint::load(&ck)?;
            let image = Ppm::load(&input)?.to_tensor();
            let enc = pipeline::encode_image(&ck, &image, lambda, hard_mask)?;
            fs::write(&out, &enc.file_bytes).with_context(|| format!("writing {}", out.display()))?;
            println!("bytes = {}", enc.file_bytes.len());
            println!("bpp = {}", enc.bpp());
            println!("clamped_latents = {}", enc.clamp_events);
            Ok(())
        }
        Command::Decode { checkpoint: ck, input, out } => {
            let ck = checkpoint::load(&ck)?;
            let bytes = fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let (header, recon) = pipeline::decode_bytes(&ck, &bytes)?;
            Ppm::from_tensor(&recon)?.save(&out)?;
            println!("width = {}", header.width);
            println!("height = {}", header.height);
            println!("modulated = {}", header.modulated());
            Ok(())
        }
        Command::Eval { checkpoint: ck, input, lambda, hard_mask, csv } => {
            let ck = checkpoint::load(&ck)?;
            let image = Ppm::load(&input)?.to_tensor();
            let (enc, report) = pipeline::eval_image(&ck, &image, lambda, hard_mask)?;
            let row = csvio::SweepRow {
                lambda: lambda.unwrap_or(0.0),
                bpp: report.bpp.expect("bpp is always reported"),
                mse: report.mse,
                psnr_db: report.psnr_db,
                msssim: report.msssim,
                msssim_db: report.msssim_db,
            };
            println!("bytes = {}", enc.file_bytes.len());
            println!("bpp = {}", row.bpp);
            println!("mse = {}", row.mse);
            println!("psnr_db = {}", row.psnr_db);
            println!("msssim = {}", row.msssim);
            println!("msssim_db = {}", row.msssim_db);
            if let Some(path) = csv {
                fs::write(&path, csvio::write_sweep(&[row]))
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(())
        }
        Command::Sweep { checkpoint: ck, images, lambdas, out } => {
            let ck = checkpoint::load(&ck)?;
            let lambdas = parse_lambdas(&lambdas)?;
            let tensors = gendata::load_dataset(&images)?;
            let mut rows = Vec::with_capacity(tensors.len() * lambdas.len());
            for image in &tensors {
                for &l in &lambdas {
                    let (_, report) = pipeline::eval_image(&ck, image, Some(l), false)?;
                    rows.push(csvio::SweepRow {
                        lambda: l,
                        bpp: report.bpp.expect("bpp is always reported"),
                        mse: report.mse,
                        psnr_db: report.psnr_db,
                        msssim: report.msssim,
                        msssim_db: report.msssim_db,
                    });
                }
            }
            fs::write(&out, csvio::write_sweep(&rows))
                .with_context(|| format!("writing {}", out.display()))?;
            println!("rows = {}", rows.len());
            Ok(())
        }
        Command::FitRd { sweep, metric, out } => {
            let metric = parse_metric(&metric)?;
            let model = fit_from_sweep(&sweep, metric)?;
            let grid: Vec<f64> = (0..9).map(|i| (1u32 << i) as f64).collect();
            let consistency = rdmodel::consistency_check(model.alpha, model.beta, &grid, 1e-3);
            let mut text = String::new();
            let _ = writeln!(text, "metric = {}", model.metric.as_str());
            let _ = writeln!(text, "alpha = {}", model.alpha);
            let _ = writeln!(text, "beta = {}", model.beta);
            let _ = writeln!(text, "residual = {}", model.residual);
            let _ = writeln!(text, "r2 = {}", model.r2);
            let _ = writeln!(text, "consistency_max_rel_dev = {consistency}");
            print!("{text}");
            if let Some(path) = out {
                fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(())
        }
        Command::RateControl {
            checkpoint: ck,
            input,
            target_bpp,
            refine,
            sweep,
            alpha,
            beta,
            metric,
        } => {
            let metric = parse_metric(&metric)?;
            let ck = checkpoint::load(&ck)?;
            if ck.modnet.is_none() {
                bail!("rate control needs a checkpoint with a trained modulation network");
            }
            let model = match (alpha, beta, sweep) {
                (Some(a), Some(b), _) => {
                    RdModelParams { alpha: a, beta: b, metric, residual: 0.0, r2: 1.0 }
                }
                (_, _, Some(path)) => fit_from_sweep(&path, metric)?,
                _ => bail!("provide either --sweep or both --alpha and --beta"),
            };
            let image = Ppm::load(&input)?.to_tensor();
            let range = (ck.config.lambda_min as f64, ck.config.lambda_max as f64);
            let mut encode_at = |l: f64| {
                pipeline::encode_image(&ck, &image, Some(l), false)
                    .expect("encode during rate control")
                    .bpp()
            };
            let outcome = rdmodel::rate_control(target_bpp, &model, range, refine, &mut encode_at)?;
            println!("target_bpp = {target_bpp}");
            println!("lambda = {}", outcome.lambda);
            println!("achieved_bpp = {}", outcome.achieved_bpp);
            println!("bre = {}", outcome.bre);
            println!("encodes = {}", outcome.encodes);
            Ok(())
        }
        Command::BdRate { anchor, test, quality } => {
            let pick: fn(&csvio::SweepRow) -> f64 = match quality.as_str() {
                "psnr" => |r| r.psnr_db,
                "msssim" => |r| r.msssim_db,
                other => bail!("unknown quality axis `{other}` (expected psnr or msssim)"),
            };
            let curve = |path: &Path| -> Result<Vec<(f64, f64)>> {
                let rows = csvio::read_sweep(&read_text(path)?)?;
                Ok(csvio::mean_by_lambda(&rows).iter().map(|r| (r.bpp, pick(r))).collect())
            };
            let delta = rdmodel::bd_rate(&curve(&anchor)?, &curve(&test)?)?;
            println!("bd_rate_percent = {delta}");
            Ok(())
        }
        Command::Gradcheck { coords } => {
            let seed = seed.unwrap_or(7);
            let mut failed = 0usize;
            for check in gradcheck::run_op_suite(seed, coords) {
                println!("{}", gradcheck::format_check(&check, gradcheck::FD_TOL));
                if !check.report.passes(gradcheck::FD_TOL) {
                    failed += 1;
                }
            }
            for check in verify::full_loss_checks(seed, coords.clamp(1, 4)) {
                println!("{}", verify::format_loss_check(&check, gradcheck::FD_TOL));
                if !check.passes(gradcheck::FD_TOL) {
                    failed += 1;
                }
            }
            if failed > 0 {
                bail!("{failed} gradient check(s) above {} relative error", gradcheck::FD_TOL);
            }
            println!("all gradients within {}", gradcheck::FD_TOL);
            Ok(())
        }
        Command::Selftest => selftest(seed.unwrap_or(7)),
        Command::GenData { kind, count, size, out } => {
            let kind = gendata::Kind::parse(&kind)
                .ok_or_else(|| anyhow!("unknown kind `{kind}` (expected blobs, gradients, checker, or bandnoise)"))?;
            let paths = gendata::write_dataset(kind, count, size, seed.unwrap_or(7), &out)?;
            println!("wrote {} files to {}", paths.len(), out.display());
            Ok(())
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::toy()),
        Some(p) => TrainConfig::parse(&read_text(p)?).map_err(|e| anyhow!("{}: {e}", p.display())),
    }
}

fn apply_common_overrides(cfg: &mut TrainConfig, batch: Option<usize>, seed: Option<u64>) -> Result<()> {
    if let Some(b) = batch {
        cfg.batch = b;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| anyhow!("{e}"))
}

/// On a non-finite loss the trainer hands back the last good checkpoint;
/// persist it before failing so the work is not lost.
fn finish_train(result: Result<TrainRun, TrainError>, out: &Path) -> Result<TrainRun> {
    match result {
        Ok(run) => Ok(run),
        Err(TrainError::NonFiniteLoss { step, last_good }) => {
            checkpoint::save(&last_good, out)?;
            bail!(
                "non-finite loss at step {step}; wrote last good checkpoint (step {}) to {}",
                last_good.step,
                out.display()
            );
        }
        Err(e) => Err(anyhow!("{e}")),
    }
}

fn write_train_outputs(run: &TrainRun, out: &Path, log: Option<&Path>) -> Result<()> {
    checkpoint::save(&run.checkpoint, out)?;
    if let Some(path) = log {
        fs::write(path, csvio::write_step_log(&run.log))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    println!("steps = {}", run.checkpoint.step);
    if let Some(last) = run.log.last() {
        println!("final_loss = {}", last.loss);
    }
    println!("checkpoint = {}", out.display());
    Ok(())
}

fn parse_lambdas(list: &str) -> Result<Vec<f64>> {
    let lambdas: Vec<f64> = list
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v > 0.0)
                .ok_or_else(|| anyhow!("bad lambda `{}`", s.trim()))
        })
        .collect::<Result<_>>()?;
    if lambdas.is_empty() {
        bail!("lambda list is empty");
    }
    Ok(lambdas)
}

fn parse_metric(s: &str) -> Result<Metric> {
    Metric::parse(s).ok_or_else(|| anyhow!("unknown metric `{s}` (expected mse or msssim)"))
}

fn fit_from_sweep(path: &Path, metric: Metric) -> Result<RdModelParams> {
    let rows = csvio::read_sweep(&read_text(path)?)?;
    let samples = csvio::sweep_to_samples(&csvio::mean_by_lambda(&rows), metric);
    let opts = FitOptions { log_domain: true, ..FitOptions::default() };
    rdmodel::fit(&samples, opts).map_err(|e| anyhow!("fit: {e}"))
}

fn selftest(seed: u64) -> Result<()> {
    let pass = |name: &str| println!("ok {name}");

    let img = gendata::generate(gendata::Kind::Blobs, 32, seed, 0);
    let back = Ppm::from_bytes(&img.to_bytes())?;
    if back.to_bytes() != img.to_bytes() {
        bail!("ppm round trip changed bytes");
    }
    pass("ppm round trip");

    let header = bitstream::Header {
        flags: bitstream::FLAG_MODULATED,
        width: 32,
        height: 32,
        channels: 8,
        lambda: 12.5,
        model_hash: 0x1234_5678,
        payload_len: 3,
    };
    let stream = bitstream::write(&header, &[7, 8, 9]);
    let (parsed, body) = bitstream::read(&stream)?;
    if parsed != header || body != [7, 8, 9] {
        bail!("bitstream round trip mismatch");
    }
    pass("bitstream container");

    let ck = tiny_checkpoint(seed);
    let bytes = checkpoint::to_bytes(&ck);
    if checkpoint::to_bytes(&checkpoint::from_bytes(&bytes)?) != bytes {
        bail!("checkpoint round trip changed bytes");
    }
    pass("checkpoint container");

    let tables = density::build_tables(&ck.density, density::TABLE_PRECISION);
    for (c, t) in tables.per_channel.iter().enumerate() {
        let total = 1u32 << density::TABLE_PRECISION;
        if *t.cum.last().expect("nonempty") != total || t.cum.windows(2).any(|w| w[0] >= w[1]) {
            bail!("channel {c} table is not strictly increasing to 2^16");
        }
    }
    pass("quantized cdf tables");

    let mut r = rng::substream(seed, 90);
    let symbols: Vec<i32> =
        (0..ck.density.channels * 40 * 40).map(|_| rng_symbol(&mut r)).collect();
    let code = LatentCode {
        symbols,
        channels: ck.density.channels,
        height: 40,
        width: 40,
        image_height: 640,
        image_width: 640,
    };
    let payload = coder::encode_symbols(&code, &tables).map_err(|e| anyhow!("{e}"))?;
    let decoded = coder::decode_symbols(&payload, code.channels, 40, 40, &tables)
        .map_err(|e| anyhow!("{e}"))?;
    if decoded != code.symbols {
        bail!("range coder round trip mismatch");
    }
    let ideal = coder::ideal_bits(&code, &tables);
    if (payload.len() * 8) as f64 > ideal * 1.002 + 128.0 {
        bail!("coded length {} bits exceeds ideal {ideal:.1} + margin", payload.len() * 8);
    }
    pass("range coder");

    let (alpha, beta) = rdmodel::PRESET_MSE;
    let samples: Vec<rdmodel::RdSample> = [1.0, 4.0, 8.0, 16.0, 32.0, 64.0, 100.0]
        .iter()
        .map(|&l| rdmodel::RdSample {
            lambda: l,
            bpp: rdmodel::eval_r_of_lambda(l, alpha, beta).expect("valid"),
            distortion: rdmodel::eval_d_of_lambda(l, alpha, beta).expect("valid"),
            metric: Metric::Mse,
        })
        .collect();
    let fitted = rdmodel::fit(&samples, FitOptions { log_domain: true, ..FitOptions::default() })
        .map_err(|e| anyhow!("{e}"))?;
    if (fitted.alpha - alpha).abs() / alpha > 0.01 || (fitted.beta - beta).abs() / beta > 0.01 {
        bail!("noiseless refit drifted: alpha {} beta {}", fitted.alpha, fitted.beta);
    }
    pass("rd model recovery");

    let x = rng::uniform(&mut rng::substream(seed, 91), &[1, 3, 32, 32], 0.0, 1.0);
    let perfect = metrics::quality(&x, &x, None).map_err(|e| anyhow!("{e:?}"))?;
    if perfect.mse != 0.0 || perfect.msssim != 1.0 {
        bail!("identical images should score perfectly");
    }
    pass("quality metrics");

    println!("selftest passed");
    Ok(())
}

fn rng_symbol(r: &mut rng::SeedRng) -> i32 {
    use rand::Rng;
    r.random_range(-6..=6)
}

fn tiny_checkpoint(seed: u64) -> Checkpoint {
    use modnic_core::density::DensityParams;
    use modnic_core::modnet::ModNetParams;
    use modnic_core::transforms::TransformParams;
    let mut r = rng::substream(seed, 80);
    let mut config = TrainConfig::toy();
    config.latent_channels = 4;
    config.modulator_width = 3;
    Checkpoint {
        transforms: TransformParams::toy(4, &mut r),
        density: DensityParams::init(4, &mut r),
        modnet: Some(ModNetParams::init(4, 3, &mut r)),
        config,
        step: 0,
    }
}
