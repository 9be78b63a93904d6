//! Two-phase training loop.
//!
//! Phase 1 trains the transforms and the latent density at the top of the
//! lambda range (fixed-rate objective). Phase 2 freezes that base and trains
//! the modulation network alone, drawing a distinct lambda per sample in
//! every mini-batch so one model covers the whole rate range.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::density::{self, DensityIds, DensityParams};
use crate::math;
use crate::modnet::{ModNetError, ModNetIds, ModNetParams};
use crate::rng::{self, SeedRng};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use crate::transforms::{self, TransformIds, TransformParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Halve the rate at `after` steps, then again every `every` steps.
    HalveEvery { after: usize, every: usize },
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::HalveEvery { after, every } => {
                assert!(every > 0, "halving interval must be positive");
                if step < after {
                    base
                } else {
                    let halvings = 1 + (step - after) / every;
                    base * math::powf(0.5, halvings as f64)
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VbrForm {
    /// lambda * D + R.
    Weighted,
    /// D + R.
    Literal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub base_steps: usize,
    pub modnet_steps: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub lambda_pretrain: f64,
    pub lambda_min: u32,
    pub lambda_max: u32,
    pub latent_channels: usize,
    pub modulator_width: usize,
    pub distortion_scale: f64,
    pub vbr_form: VbrForm,
    pub seed: u64,
    pub dataset: String,
}

impl TrainConfig {
    /// Desk-scale defaults: small transforms, constant learning rate.
    pub fn toy() -> Self {
        TrainConfig {
            batch: 8,
            base_steps: 2000,
            modnet_steps: 5000,
            lr: 1e-4,
            schedule: LrSchedule::Constant,
            lambda_pretrain: 256.0,
            lambda_min: 1,
            lambda_max: 256,
            latent_channels: 32,
            modulator_width: 16,
            distortion_scale: 1.0,
            vbr_form: VbrForm::Weighted,
            seed: 7,
            dataset: String::from("synthetic"),
        }
    }

    /// Full-scale settings (batch 12, 5e-5 with halving schedule, 192/100
    /// channel widths). Nominal step counts assume 30k steps per epoch.
    pub fn paper() -> Self {
        TrainConfig {
            batch: 12,
            base_steps: 600_000,
            modnet_steps: 600_000,
            lr: 5e-5,
            schedule: LrSchedule::HalveEvery { after: 300_000, every: 90_000 },
            lambda_pretrain: 256.0,
            lambda_min: 1,
            lambda_max: 256,
            latent_channels: 192,
            modulator_width: 100,
            distortion_scale: 1.0,
            vbr_form: VbrForm::Weighted,
            seed: 7,
            dataset: String::from("liu4k-patches"),
        }
    }

    /// Plain-text `key = value` rendering; [`TrainConfig::parse`] inverts it.
    pub fn echo(&self) -> String {
        let schedule = match self.schedule {
            LrSchedule::Constant => String::from("constant"),
            LrSchedule::HalveEvery { after, every } => {
                format!("halve after={after} every={every}")
            }
        };
        let vbr = match self.vbr_form {
            VbrForm::Weighted => "weighted",
            VbrForm::Literal => "literal",
        };
        format!(
            "batch = {}\nbase_steps = {}\nmodnet_steps = {}\nlr = {}\nlr_schedule = {}\n\
             lambda_pretrain = {}\nlambda_min = {}\nlambda_max = {}\nlatent_channels = {}\n\
             modulator_width = {}\ndistortion_scale = {}\nvbr_loss = {}\nseed = {}\ndataset = {}\n",
            self.batch,
            self.base_steps,
            self.modnet_steps,
            self.lr,
            schedule,
            self.lambda_pretrain,
            self.lambda_min,
            self.lambda_max,
            self.latent_channels,
            self.modulator_width,
            self.distortion_scale,
            vbr,
            self.seed,
            self.dataset,
        )
    }

    /// Parse `key = value` lines over the toy preset. A `preset = toy|paper`
    /// line resets the base; later lines override individual keys. Blank
    /// lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let bad = |line: usize, what: &str| TrainError::BadConfig(format!("line {}: {what}", line + 1));
        let mut cfg = TrainConfig::toy();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(bad(i, "expected key = value"));
            };
            let (key, value) = (key.trim(), value.trim());
            match key {
                "preset" => {
                    cfg = match value {
                        "toy" => TrainConfig::toy(),
                        "paper" => TrainConfig::paper(),
                        _ => return Err(bad(i, "preset must be toy or paper")),
                    }
                }
                "batch" => cfg.batch = parse_num(value).ok_or_else(|| bad(i, "bad batch"))?,
                "base_steps" => {
                    cfg.base_steps = parse_num(value).ok_or_else(|| bad(i, "bad base_steps"))?
                }
                "modnet_steps" => {
                    cfg.modnet_steps = parse_num(value).ok_or_else(|| bad(i, "bad modnet_steps"))?
                }
                "lr" => cfg.lr = parse_num(value).ok_or_else(|| bad(i, "bad lr"))?,
                "lr_schedule" => cfg.schedule = parse_schedule(value).ok_or_else(|| bad(i, "bad lr_schedule"))?,
                "lambda_pretrain" => {
                    cfg.lambda_pretrain = parse_num(value).ok_or_else(|| bad(i, "bad lambda_pretrain"))?
                }
                "lambda_min" => {
                    cfg.lambda_min = parse_num(value).ok_or_else(|| bad(i, "bad lambda_min"))?
                }
                "lambda_max" => {
                    cfg.lambda_max = parse_num(value).ok_or_else(|| bad(i, "bad lambda_max"))?
                }
                "latent_channels" => {
                    cfg.latent_channels = parse_num(value).ok_or_else(|| bad(i, "bad latent_channels"))?
                }
                "modulator_width" => {
                    cfg.modulator_width = parse_num(value).ok_or_else(|| bad(i, "bad modulator_width"))?
                }
                "distortion_scale" => {
                    cfg.distortion_scale = parse_num(value).ok_or_else(|| bad(i, "bad distortion_scale"))?
                }
                "vbr_loss" => {
                    cfg.vbr_form = match value {
                        "weighted" => VbrForm::Weighted,
                        "literal" => VbrForm::Literal,
                        _ => return Err(bad(i, "vbr_loss must be weighted or literal")),
                    }
                }
                "seed" => cfg.seed = parse_num(value).ok_or_else(|| bad(i, "bad seed"))?,
                "dataset" => cfg.dataset = value.to_string(),
                _ => return Err(TrainError::BadConfig(format!("unknown key {key}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |what: &str| Err(TrainError::BadConfig(String::from(what)));
        if self.batch < 1 {
            return fail("batch must be at least 1");
        }
        if !(self.lr > 0.0) {
            return fail("lr must be positive");
        }
        if !(self.lambda_pretrain > 0.0) {
            return fail("lambda_pretrain must be positive");
        }
        if self.lambda_min < 1 || self.lambda_max < self.lambda_min {
            return fail("lambda set must satisfy 1 <= min <= max");
        }
        if let LrSchedule::HalveEvery { every, .. } = self.schedule {
            if every == 0 {
                return fail("halving interval must be positive");
            }
        }
        Ok(())
    }

    pub fn lambda_set_size(&self) -> usize {
        (self.lambda_max - self.lambda_min + 1) as usize
    }
}

fn parse_num<T: core::str::FromStr>(s: &str) -> Option<T> {
    s.parse().ok()
}

fn parse_schedule(s: &str) -> Option<LrSchedule> {
    if s == "constant" {
        return Some(LrSchedule::Constant);
    }
    let rest = s.strip_prefix("halve")?.trim();
    let mut after = None;
    let mut every = None;
    for part in rest.split_whitespace() {
        if let Some(v) = part.strip_prefix("after=") {
            after = v.parse().ok();
        } else if let Some(v) = part.strip_prefix("every=") {
            every = v.parse().ok();
        } else {
            return None;
        }
    }
    Some(LrSchedule::HalveEvery { after: after?, every: every? })
}

#[derive(Clone, Debug)]
pub enum TrainError {
    EmptyDataset,
    /// Dataset images must share one [3,H,W] shape with H, W divisible by
    /// the transform's downsampling factor.
    BadDataset(String),
    BatchTooLarge { batch: usize, set_size: usize },
    BadConfig(String),
    /// Training halted; carries the last finite-loss checkpoint.
    NonFiniteLoss { step: usize, last_good: Box<Checkpoint> },
}

impl core::fmt::Display for TrainError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TrainError::EmptyDataset => write!(f, "dataset is empty"),
            TrainError::BadDataset(detail) => write!(f, "bad dataset: {detail}"),
            TrainError::BatchTooLarge { batch, set_size } => {
                write!(f, "batch {batch} exceeds lambda set size {set_size}")
            }
            TrainError::BadConfig(detail) => write!(f, "bad config: {detail}"),
            TrainError::NonFiniteLoss { step, .. } => {
                write!(f, "non-finite loss at step {step}; stopping with last good checkpoint")
            }
        }
    }
}

impl core::error::Error for TrainError {}

/// Everything needed to reproduce forward passes.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub transforms: TransformParams,
    pub density: DensityParams,
    pub modnet: Option<ModNetParams>,
    pub config: TrainConfig,
    pub step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub mse: f64,
    pub rate_bpp: f64,
    pub lambda_mean: f64,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepRecord>,
}

/// Adam with bias correction (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(sizes: &[usize]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update over parallel parameter/gradient lists. A `None` gradient
    /// is an all-zero gradient.
    pub fn apply(&mut self, lr: f64, params: &mut [&mut Tensor], grads: &[Option<&[f64]>]) {
        assert_eq!(params.len(), self.m.len(), "optimizer built for a different parameter list");
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let c1 = 1.0 - math::powf(self.beta1, self.t as f64);
        let c2 = 1.0 - math::powf(self.beta2, self.t as f64);
        for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let data = p.data_mut();
            for i in 0..data.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                let m = &mut self.m[slot][i];
                let v = &mut self.v[slot][i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                let mhat = *m / c1;
                let vhat = *v / c2;
                data[i] -= lr * mhat / (math::sqrt(vhat) + self.eps);
            }
        }
    }
}

/// Graph handles for one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossIds {
    pub loss: TensorId,
    pub mse: TensorId,
    pub rate_bpp: TensorId,
}

fn loss_tail(
    tape: &mut Tape,
    x: TensorId,
    y_tilde: TensorId,
    distortion_weight: f64,
    params: &TransformParams,
    tids: &TransformIds,
    dids: &DensityIds,
) -> LossIds {
    let pixels = {
        let s = tape.shape(x);
        (s[0] * s[2] * s[3]) as f64
    };
    let x_hat = transforms::synthesize_on(tape, params, tids, y_tilde);
    let diff = tape.sub(x_hat, x);
    let sq = tape.mul(diff, diff);
    let mse = tape.mean(sq);
    let bits = density::rate_bits_on(tape, dids, y_tilde);
    let rate_bpp = tape.mul_scalar(bits, 1.0 / pixels);
    let dterm = tape.mul_scalar(mse, distortion_weight);
    let loss = tape.add(dterm, rate_bpp);
    LossIds { loss, mse, rate_bpp }
}

/// Fixed-rate objective lambda * scale * MSE + bpp on noise-quantized
/// latents. Reconstruction is the raw synthesis output; clamping to [0,1]
/// happens only at evaluation time.
pub fn loss_fixed_on(
    tape: &mut Tape,
    x: TensorId,
    lambda: f64,
    params: &TransformParams,
    tids: &TransformIds,
    dids: &DensityIds,
    distortion_scale: f64,
    rng: &mut SeedRng,
) -> LossIds {
    assert!(lambda > 0.0, "lambda must be positive");
    let y = transforms::analyze_on(tape, params, tids, x);
    let shape = tape.shape(y).to_vec();
    let noise = tape.constant(&rng::uniform_noise(rng, &shape));
    let y_tilde = tape.add(y, noise);
    loss_tail(tape, x, y_tilde, lambda * distortion_scale, params, tids, dids)
}

/// Variable-rate objective on mask-modulated latents (single image, its own
/// lambda). The mask multiplies y before noise quantization; rate and
/// distortion both see the modulated latents.
pub fn loss_vbr_on(
    tape: &mut Tape,
    x: TensorId,
    lambda: f64,
    form: VbrForm,
    params: &TransformParams,
    tids: &TransformIds,
    dids: &DensityIds,
    mids: &ModNetIds,
    distortion_scale: f64,
    rng: &mut SeedRng,
) -> Result<LossIds, ModNetError> {
    let y = transforms::analyze_on(tape, params, tids, x);
    let mask = crate::modnet::modnet_forward_on(tape, mids, y, lambda)?;
    let y_m = tape.mul(y, mask);
    let shape = tape.shape(y_m).to_vec();
    let noise = tape.constant(&rng::uniform_noise(rng, &shape));
    let y_tilde = tape.add(y_m, noise);
    let weight = match form {
        VbrForm::Weighted => lambda * distortion_scale,
        VbrForm::Literal => distortion_scale,
    };
    Ok(loss_tail(tape, x, y_tilde, weight, params, tids, dids))
}

/// One lambda per sample, pairwise distinct, uniform over the integer set.
pub fn draw_batch_lambdas(rng: &mut SeedRng, lambda_min: u32, lambda_max: u32, batch: usize) -> Vec<f64> {
    rng::sample_distinct(rng, lambda_min, lambda_max, batch)
        .into_iter()
        .map(|v| v as f64)
        .collect()
}

fn check_dataset(config: &TrainConfig, dataset: &[Tensor], factor: usize) -> Result<(usize, usize), TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let shape = dataset[0].shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(TrainError::BadDataset(format!("expected [3,H,W] images, got {shape:?}")));
    }
    for img in dataset {
        if img.shape() != shape.as_slice() {
            return Err(TrainError::BadDataset(String::from("images must share one shape")));
        }
    }
    let (h, w) = (shape[1], shape[2]);
    if h % factor != 0 || w % factor != 0 {
        return Err(TrainError::BadDataset(format!(
            "image sides {h}x{w} must be divisible by {factor}"
        )));
    }
    config.validate()?;
    Ok((h, w))
}

fn stack(images: &[&Tensor]) -> Tensor {
    let (h, w) = (images[0].shape()[1], images[0].shape()[2]);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        data.extend_from_slice(img.data());
    }
    Tensor::new(&[images.len(), 3, h, w], data).expect("stacked batch")
}

fn collect_grads<'a>(grads: &'a crate::tape::Gradients, ids: &[TensorId]) -> Vec<Option<&'a [f64]>> {
    ids.iter().map(|&id| grads.get(id)).collect()
}

/// Phase 1: optimize transforms and density at lambda_pretrain.
pub fn train_base(config: &TrainConfig, dataset: &[Tensor]) -> Result<TrainRun, TrainError> {
    let mut init_rng = rng::substream(config.seed, 0);
    let mut data_rng = rng::substream(config.seed, 1);
    let mut noise_rng = rng::substream(config.seed, 2);

    let mut transforms_p = TransformParams::toy(config.latent_channels, &mut init_rng);
    let mut density_p = DensityParams::init(config.latent_channels, &mut init_rng);
    check_dataset(config, dataset, transforms_p.downsample_factor())?;

    let sizes: Vec<usize> = transforms_p
        .params()
        .iter()
        .chain(density_p.params().iter())
        .map(|t| t.numel())
        .collect();
    let mut adam = Adam::new(&sizes);
    let mut log = Vec::with_capacity(config.base_steps);
    let snapshot = |t: &TransformParams, d: &DensityParams, step: u64| Checkpoint {
        transforms: t.clone(),
        density: d.clone(),
        modnet: None,
        config: config.clone(),
        step,
    };
    let mut last_good = snapshot(&transforms_p, &density_p, 0);

    for step in 0..config.base_steps {
        let batch: Vec<&Tensor> = (0..config.batch)
            .map(|_| &dataset[data_rng.random_range(0..dataset.len())])
            .collect();
        let batch = stack(&batch);

        let mut tape = Tape::new();
        let tids = TransformIds::insert(&mut tape, &transforms_p, true);
        let dids = DensityIds::insert(&mut tape, &density_p, true);
        let x = tape.constant(&batch);
        let ids = loss_fixed_on(
            &mut tape,
            x,
            config.lambda_pretrain,
            &transforms_p,
            &tids,
            &dids,
            config.distortion_scale,
            &mut noise_rng,
        );
        let loss = tape.scalar(ids.loss);
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, last_good: Box::new(last_good) });
        }
        last_good = snapshot(&transforms_p, &density_p, step as u64);
        log.push(StepRecord {
            step,
            loss,
            mse: tape.scalar(ids.mse),
            rate_bpp: tape.scalar(ids.rate_bpp),
            lambda_mean: config.lambda_pretrain,
        });

        let grads = tape.backward(ids.loss);
        let mut id_list = tids.ids();
        id_list.extend(dids.ids());
        let grad_list = collect_grads(&grads, &id_list);
        let mut params: Vec<&mut Tensor> = transforms_p.params_mut();
        params.extend(density_p.params_mut());
        adam.apply(config.schedule.lr_at(config.lr, step), &mut params, &grad_list);
    }

    Ok(TrainRun {
        checkpoint: Checkpoint {
            transforms: transforms_p,
            density: density_p,
            modnet: None,
            config: config.clone(),
            step: config.base_steps as u64,
        },
        log,
    })
}

/// Phase 2: freeze the base, train the modulation network with per-sample
/// distinct lambdas.
pub fn train_modnet(
    config: &TrainConfig,
    base: &Checkpoint,
    dataset: &[Tensor],
) -> Result<TrainRun, TrainError> {
    if config.batch > config.lambda_set_size() {
        return Err(TrainError::BatchTooLarge {
            batch: config.batch,
            set_size: config.lambda_set_size(),
        });
    }
    check_dataset(config, dataset, base.transforms.downsample_factor())?;

    let mut init_rng = rng::substream(config.seed, 16);
    let mut data_rng = rng::substream(config.seed, 17);
    let mut noise_rng = rng::substream(config.seed, 18);
    let mut lambda_rng = rng::substream(config.seed, 19);

    let mut modnet_p = ModNetParams::init(
        base.transforms.latent_channels,
        config.modulator_width,
        &mut init_rng,
    );
    let sizes: Vec<usize> = modnet_p.params().iter().map(|t| t.numel()).collect();
    let mut adam = Adam::new(&sizes);
    let mut log = Vec::with_capacity(config.modnet_steps);
    let snapshot = |m: &ModNetParams, step: u64| Checkpoint {
        transforms: base.transforms.clone(),
        density: base.density.clone(),
        modnet: Some(m.clone()),
        config: config.clone(),
        step,
    };
    let mut last_good = snapshot(&modnet_p, 0);

    for step in 0..config.modnet_steps {
        let lambdas = draw_batch_lambdas(&mut lambda_rng, config.lambda_min, config.lambda_max, config.batch);

        let mut tape = Tape::new();
        let tids = TransformIds::insert(&mut tape, &base.transforms, false);
        let dids = DensityIds::insert(&mut tape, &base.density, false);
        let mids = ModNetIds::insert(&mut tape, &modnet_p, true);

        let mut total = None;
        let mut mse_acc = 0.0;
        let mut bpp_acc = 0.0;
        for &lambda in &lambdas {
            let img = &dataset[data_rng.random_range(0..dataset.len())];
            let x = tape.constant(&stack(&[img]));
            let ids = loss_vbr_on(
                &mut tape,
                x,
                lambda,
                config.vbr_form,
                &base.transforms,
                &tids,
                &dids,
                &mids,
                config.distortion_scale,
                &mut noise_rng,
            )
            .expect("lambda drawn from the valid set");
            mse_acc += tape.scalar(ids.mse);
            bpp_acc += tape.scalar(ids.rate_bpp);
            total = Some(match total {
                None => ids.loss,
                Some(acc) => tape.add(acc, ids.loss),
            });
        }
        let total = total.expect("batch is nonempty");
        let mean_loss = tape.mul_scalar(total, 1.0 / config.batch as f64);

        let loss = tape.scalar(mean_loss);
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, last_good: Box::new(last_good) });
        }
        last_good = snapshot(&modnet_p, step as u64);
        let b = config.batch as f64;
        log.push(StepRecord {
            step,
            loss,
            mse: mse_acc / b,
            rate_bpp: bpp_acc / b,
            lambda_mean: lambdas.iter().sum::<f64>() / b,
        });

        let grads = tape.backward(mean_loss);
        let grad_list = collect_grads(&grads, &mids.ids());
        let mut params: Vec<&mut Tensor> = modnet_p.params_mut();
        adam.apply(config.schedule.lr_at(config.lr, step), &mut params, &grad_list);
    }

    Ok(TrainRun {
        checkpoint: Checkpoint {
            transforms: base.transforms.clone(),
            density: base.density.clone(),
            modnet: Some(modnet_p),
            config: config.clone(),
            step: config.modnet_steps as u64,
        },
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch: 2,
            base_steps: 1,
            modnet_steps: 1,
            latent_channels: 4,
            modulator_width: 3,
            lr: 1e-3,
            seed: 11,
            ..TrainConfig::toy()
        }
    }

    fn tiny_dataset(count: usize, side: usize, seed: u64) -> Vec<Tensor> {
        let mut r = rng::seeded(seed);
        (0..count).map(|_| rng::uniform(&mut r, &[3, side, side], 0.0, 1.0)).collect()
    }

    fn params_bits(ck: &Checkpoint) -> Vec<u64> {
        let mut out = Vec::new();
        for t in ck.transforms.params().iter().chain(ck.density.params().iter()) {
            out.extend(t.data().iter().map(|v| v.to_bits()));
        }
        if let Some(m) = &ck.modnet {
            for t in m.params() {
                out.extend(t.data().iter().map(|v| v.to_bits()));
            }
        }
        out
    }

    #[test]
    fn lr_schedule_values() {
        assert_eq!(LrSchedule::Constant.lr_at(0.1, 999), 0.1);
        let s = LrSchedule::HalveEvery { after: 10, every: 3 };
        assert_eq!(s.lr_at(8.0, 9), 8.0);
        assert_eq!(s.lr_at(8.0, 10), 4.0);
        assert_eq!(s.lr_at(8.0, 12), 4.0);
        assert_eq!(s.lr_at(8.0, 13), 2.0);
        assert_eq!(s.lr_at(8.0, 16), 1.0);
    }

    #[test]
    fn config_echo_parse_round_trip() {
        for cfg in [TrainConfig::toy(), TrainConfig::paper()] {
            let parsed = TrainConfig::parse(&cfg.echo()).unwrap();
            assert_eq!(parsed, cfg);
        }
        let parsed = TrainConfig::parse("preset = paper\nbatch = 3\n# comment\n").unwrap();
        assert_eq!(parsed.batch, 3);
        assert_eq!(parsed.lr, TrainConfig::paper().lr);
    }

    #[test]
    fn config_parse_rejects_bad_input() {
        assert!(matches!(TrainConfig::parse("no_such_key = 1\n"), Err(TrainError::BadConfig(_))));
        assert!(matches!(TrainConfig::parse("batch = zero\n"), Err(TrainError::BadConfig(_))));
        assert!(matches!(TrainConfig::parse("batch = 0\n"), Err(TrainError::BadConfig(_))));
        assert!(matches!(TrainConfig::parse("just words\n"), Err(TrainError::BadConfig(_))));
    }

    fn fixed_loss_parts(lambda: f64, seed: u64) -> (f64, f64, f64) {
        let mut init = rng::seeded(3);
        let tp = TransformParams::toy(4, &mut init);
        let dp = DensityParams::init(4, &mut init);
        let img = tiny_dataset(1, 16, 5);
        let mut tape = Tape::new();
        let tids = TransformIds::insert(&mut tape, &tp, true);
        let dids = DensityIds::insert(&mut tape, &dp, true);
        let x = tape.constant(&stack(&[&img[0]]));
        let mut nrng = rng::seeded(seed);
        let ids = loss_fixed_on(&mut tape, x, lambda, &tp, &tids, &dids, 1.0, &mut nrng);
        (tape.scalar(ids.loss), tape.scalar(ids.mse), tape.scalar(ids.rate_bpp))
    }

    #[test]
    fn fixed_loss_breakdown_identity() {
        let (loss, mse, bpp) = fixed_loss_parts(16.0, 21);
        assert!(loss >= 0.0 && mse >= 0.0 && bpp >= 0.0);
        assert!(math::abs(loss - (16.0 * mse + bpp)) < 1e-12);
    }

    #[test]
    fn fixed_loss_linear_in_lambda() {
        // Same noise seed, so D and R are identical across the two calls.
        let (l1, _, bpp) = fixed_loss_parts(16.0, 21);
        let (l2, _, bpp2) = fixed_loss_parts(32.0, 21);
        assert_eq!(bpp.to_bits(), bpp2.to_bits());
        assert!(math::abs(l2 - (2.0 * l1 - bpp)) < 1e-9);
    }

    #[test]
    fn vbr_with_unit_mask_matches_fixed_loss_bitwise() {
        let mut init = rng::seeded(3);
        let tp = TransformParams::toy(4, &mut init);
        let dp = DensityParams::init(4, &mut init);
        let img = tiny_dataset(1, 16, 5);

        let mut tape = Tape::new();
        let tids = TransformIds::insert(&mut tape, &tp, true);
        let dids = DensityIds::insert(&mut tape, &dp, true);
        let x = tape.constant(&stack(&[&img[0]]));
        let mut nrng = rng::seeded(21);
        let fixed = loss_fixed_on(&mut tape, x, 16.0, &tp, &tids, &dids, 1.0, &mut nrng);

        // Same graph with an explicit all-ones mask in the VBR position.
        let y = transforms::analyze_on(&mut tape, &tp, &tids, x);
        let yshape = tape.shape(y).to_vec();
        let ones = tape.constant(&Tensor::full(&yshape, 1.0));
        let y_m = tape.mul(y, ones);
        let mut nrng2 = rng::seeded(21);
        let noise = tape.constant(&rng::uniform_noise(&mut nrng2, &yshape));
        let y_tilde = tape.add(y_m, noise);
        let masked = loss_tail(&mut tape, x, y_tilde, 16.0, &tp, &tids, &dids);

        assert_eq!(tape.scalar(fixed.loss).to_bits(), tape.scalar(masked.loss).to_bits());
    }

    fn vbr_setup() -> (TransformParams, DensityParams, ModNetParams, Tensor) {
        let mut init = rng::seeded(3);
        let tp = TransformParams::toy(4, &mut init);
        let dp = DensityParams::init(4, &mut init);
        let mp = ModNetParams::init(4, 3, &mut init);
        let img = tiny_dataset(1, 16, 5).remove(0);
        (tp, dp, mp, img)
    }

    #[test]
    fn vbr_gradients_respect_frozen_base() {
        let (tp, dp, mp, img) = vbr_setup();
        let mut tape = Tape::new();
        let tids = TransformIds::insert(&mut tape, &tp, false);
        let dids = DensityIds::insert(&mut tape, &dp, false);
        let mids = ModNetIds::insert(&mut tape, &mp, true);
        let x = tape.constant(&stack(&[&img]));
        let mut nrng = rng::seeded(21);
        let ids =
            loss_vbr_on(&mut tape, x, 16.0, VbrForm::Weighted, &tp, &tids, &dids, &mids, 1.0, &mut nrng)
                .unwrap();
        let grads = tape.backward(ids.loss);
        for id in tids.ids().into_iter().chain(dids.ids()) {
            assert!(grads.get(id).is_none(), "base parameter received a gradient");
        }
        let mut saw_nonzero = false;
        for id in mids.ids() {
            let g = grads.get(id).expect("modnet parameter missing a gradient");
            saw_nonzero |= g.iter().any(|&v| v != 0.0);
        }
        assert!(saw_nonzero, "modnet gradient is identically zero");
    }

    #[test]
    fn vbr_loss_matches_finite_differences() {
        let (tp, dp, mut mp, img) = vbr_setup();
        let eval = |mp: &ModNetParams| -> (f64, crate::tape::Gradients, Vec<TensorId>) {
            let mut tape = Tape::new();
            let tids = TransformIds::insert(&mut tape, &tp, false);
            let dids = DensityIds::insert(&mut tape, &dp, false);
            let mids = ModNetIds::insert(&mut tape, &mp, true);
            let x = tape.constant(&stack(&[&img]));
            let mut nrng = rng::seeded(21);
            let ids = loss_vbr_on(
                &mut tape, x, 16.0, VbrForm::Weighted, &tp, &tids, &dids, &mids, 1.0, &mut nrng,
            )
            .unwrap();
            let g = tape.backward(ids.loss);
            (tape.scalar(ids.loss), g, mids.ids())
        };
        let (_, grads, ids) = eval(&mp);
        let analytic: Vec<Vec<f64>> = ids
            .iter()
            .map(|&id| grads.get(id).expect("trainable").to_vec())
            .collect();

        // Deep graphs leave some coordinates with gradients near 1e-6;
        // h = 1e-4 keeps cancellation noise well under the 1e-4 bar while
        // quadratic truncation stays negligible.
        let step = 1e-4;
        let mut checked = 0;
        let n_params = mp.params().len();
        for pi in 0..n_params {
            let coords = {
                let len = mp.params()[pi].numel();
                [0, len / 2, len - 1]
            };
            for &ci in coords.iter() {
                let orig = mp.params()[pi].data()[ci];
                mp.params_mut()[pi].data_mut()[ci] = orig + step;
                let (up, _, _) = eval(&mp);
                mp.params_mut()[pi].data_mut()[ci] = orig - step;
                let (down, _, _) = eval(&mp);
                mp.params_mut()[pi].data_mut()[ci] = orig;
                let numeric = (up - down) / (2.0 * step);
                let exact = analytic[pi][ci];
                let rel = math::rel_err_with_floor(exact, numeric, 1e-6);
                assert!(rel <= 1e-4, "param {pi} coord {ci}: analytic {exact} numeric {numeric}");
                checked += 1;
            }
        }
        assert!(checked >= 20);
    }

    #[test]
    fn train_base_single_step_updates_parameters() {
        let cfg = tiny_config();
        let data = tiny_dataset(2, 16, 40);
        let run = train_base(&cfg, &data).unwrap();
        let mut fresh_rng = rng::substream(cfg.seed, 0);
        let fresh = TransformParams::toy(cfg.latent_channels, &mut fresh_rng);
        let trained = run.checkpoint.transforms.params();
        let before = fresh.params();
        let changed = trained
            .iter()
            .zip(before.iter())
            .any(|(a, b)| a.data().iter().zip(b.data()).any(|(x, y)| x != y));
        assert!(changed, "one step left every parameter untouched");
        assert_eq!(run.log.len(), 1);
        assert_eq!(run.checkpoint.step, 1);
    }

    #[test]
    fn train_base_loss_trends_down() {
        let cfg = TrainConfig {
            batch: 2,
            base_steps: 300,
            latent_channels: 4,
            lr: 1e-3,
            seed: 13,
            ..TrainConfig::toy()
        };
        let data = tiny_dataset(4, 16, 41);
        let run = train_base(&cfg, &data).unwrap();
        let first: f64 = run.log[..50].iter().map(|r| r.loss).sum::<f64>() / 50.0;
        let last: f64 = run.log[250..].iter().map(|r| r.loss).sum::<f64>() / 50.0;
        assert!(last < first, "no improvement: first {first}, last {last}");
    }

    #[test]
    fn train_base_is_deterministic() {
        let cfg = TrainConfig { base_steps: 3, ..tiny_config() };
        let data = tiny_dataset(2, 16, 40);
        let a = train_base(&cfg, &data).unwrap();
        let b = train_base(&cfg, &data).unwrap();
        assert_eq!(params_bits(&a.checkpoint), params_bits(&b.checkpoint));
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn train_base_rejects_bad_datasets() {
        let cfg = tiny_config();
        assert!(matches!(train_base(&cfg, &[]), Err(TrainError::EmptyDataset)));
        let odd = tiny_dataset(1, 20, 40);
        assert!(matches!(train_base(&cfg, &odd), Err(TrainError::BadDataset(_))));
    }

    #[test]
    fn train_base_halts_on_non_finite_loss() {
        // An Adam step moves each weight by roughly lr, so this learning
        // rate overflows the synthesis output on the step after the first
        // update.
        let cfg = TrainConfig { lr: 1e80, base_steps: 10, ..tiny_config() };
        let data = tiny_dataset(1, 16, 40);
        match train_base(&cfg, &data) {
            Err(TrainError::NonFiniteLoss { step: 1, last_good }) => {
                assert_eq!(last_good.step, 0);
                assert!(last_good.modnet.is_none());
                // The carried checkpoint predates the runaway update.
                assert!(last_good.transforms.params().iter().all(|t| t
                    .data()
                    .iter()
                    .all(|v| math::abs(*v) < 10.0)));
            }
            other => panic!("expected non-finite halt at step 1, got {other:?}"),
        }
    }

    #[test]
    fn train_modnet_leaves_base_bit_identical() {
        let cfg = TrainConfig { modnet_steps: 3, ..tiny_config() };
        let data = tiny_dataset(2, 16, 40);
        let base = train_base(&cfg, &data).unwrap().checkpoint;
        let before = params_bits(&base);
        let run = train_modnet(&cfg, &base, &data).unwrap();
        assert_eq!(params_bits(&base), before);
        let after = Checkpoint { modnet: None, ..run.checkpoint.clone() };
        assert_eq!(params_bits(&after), before);
        assert!(run.checkpoint.modnet.is_some());
    }

    #[test]
    fn train_modnet_is_deterministic_and_learns_shape() {
        let cfg = TrainConfig { modnet_steps: 3, ..tiny_config() };
        let data = tiny_dataset(2, 16, 40);
        let base = train_base(&cfg, &data).unwrap().checkpoint;
        let a = train_modnet(&cfg, &base, &data).unwrap();
        let b = train_modnet(&cfg, &base, &data).unwrap();
        assert_eq!(params_bits(&a.checkpoint), params_bits(&b.checkpoint));
        let m = a.checkpoint.modnet.unwrap();
        assert_eq!(m.latent_channels, cfg.latent_channels);
        assert_eq!(m.width, cfg.modulator_width);
    }

    #[test]
    fn train_modnet_rejects_oversized_batch() {
        let cfg = TrainConfig { batch: 8, lambda_max: 4, ..tiny_config() };
        let data = tiny_dataset(2, 16, 40);
        let base = train_base(&TrainConfig { lambda_max: 4, ..tiny_config() }, &data).unwrap().checkpoint;
        assert!(matches!(
            train_modnet(&cfg, &base, &data),
            Err(TrainError::BatchTooLarge { batch: 8, set_size: 4 })
        ));
    }

    #[test]
    fn batch_lambdas_distinct_and_uniform() {
        let mut r = rng::seeded(99);
        let mut counts = [0u32; 256];
        for _ in 0..1000 {
            let draw = draw_batch_lambdas(&mut r, 1, 256, 8);
            for (i, a) in draw.iter().enumerate() {
                assert!((1.0..=256.0).contains(a) && a.fract() == 0.0);
                for b in &draw[i + 1..] {
                    assert_ne!(a, b, "batch repeated a lambda");
                }
            }
            for v in draw {
                counts[v as usize - 1] += 1;
            }
        }
        assert!(counts.iter().all(|&c| c > 0), "some lambda never drawn in 8000 draws");
        let expected = 8000.0 / 256.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // 0.999 quantile of chi-square with 255 degrees of freedom.
        assert!(chi2 < 330.51974363400586, "chi2 {chi2}");
    }

    #[test]
    fn train_modnet_improves_vbr_loss() {
        let cfg = TrainConfig {
            batch: 4,
            base_steps: 120,
            modnet_steps: 400,
            latent_channels: 4,
            modulator_width: 8,
            lr: 3e-3,
            seed: 23,
            ..TrainConfig::toy()
        };
        let data = tiny_dataset(4, 16, 41);
        let base = train_base(&cfg, &data).unwrap().checkpoint;
        let mut init_rng = rng::substream(cfg.seed, 16);
        let untrained = ModNetParams::init(cfg.latent_channels, cfg.modulator_width, &mut init_rng);
        let trained = train_modnet(&cfg, &base, &data).unwrap().checkpoint.modnet.unwrap();

        // Same probe images, lambdas, and noise for both parameter sets.
        let probe = |mp: &ModNetParams| -> f64 {
            let mut total = 0.0;
            for &lambda in &[1.0, 16.0, 256.0] {
                for img in &data {
                    let mut tape = Tape::new();
                    let tids = TransformIds::insert(&mut tape, &base.transforms, false);
                    let dids = DensityIds::insert(&mut tape, &base.density, false);
                    let mids = ModNetIds::insert(&mut tape, mp, false);
                    let x = tape.constant(&stack(&[img]));
                    let mut nrng = rng::seeded(77);
                    let ids = loss_vbr_on(
                        &mut tape, x, lambda, cfg.vbr_form, &base.transforms, &tids, &dids, &mids,
                        cfg.distortion_scale, &mut nrng,
                    )
                    .unwrap();
                    total += tape.scalar(ids.loss);
                }
            }
            total
        };
        let before = probe(&untrained);
        let after = probe(&trained);
        assert!(after < before, "vbr loss did not improve: {before} -> {after}");
    }
}
