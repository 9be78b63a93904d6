//! Numeric CSV reading and writing for sweep reports, R-D samples, and
//! training logs. Values are rendered with the shortest representation that
//! parses back to the same f64, so write/read round trips are lossless.

use anyhow::{anyhow, bail, Context, Result};

use modnic_core::rdmodel::{Metric, RdSample};
use modnic_core::trainer::StepRecord;

pub const SWEEP_HEADER: &str = "lambda,bpp,mse,psnr_db,msssim,msssim_db";
pub const RD_HEADER: &str = "lambda,bpp,distortion,metric";
pub const STEP_LOG_HEADER: &str = "step,loss,mse,rate_bpp,lambda_mean";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub bpp: f64,
    pub mse: f64,
    pub psnr_db: f64,
    pub msssim: f64,
    pub msssim_db: f64,
}

pub fn write_sweep(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.lambda, r.bpp, r.mse, r.psnr_db, r.msssim, r.msssim_db
        ));
    }
    out
}

fn split_rows<'a>(text: &'a str, header: &str, what: &str) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first.trim() == header => {}
        Some((_, first)) => bail!("{what}: expected header `{header}`, got `{}`", first.trim()),
        None => bail!("{what}: empty input"),
    }
    let cols = header.split(',').count();
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols {
            bail!("{what}: line {} has {} fields, expected {cols}", i + 1, fields.len());
        }
        rows.push((i + 1, fields));
    }
    Ok(rows)
}

fn num(field: &str, line: usize, what: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| anyhow!("{what}: line {line}: bad number `{field}`"))
}

pub fn read_sweep(text: &str) -> Result<Vec<SweepRow>> {
    let what = "sweep csv";
    split_rows(text, SWEEP_HEADER, what)?
        .into_iter()
        .map(|(line, f)| {
            Ok(SweepRow {
                lambda: num(f[0], line, what)?,
                bpp: num(f[1], line, what)?,
                mse: num(f[2], line, what)?,
                psnr_db: num(f[3], line, what)?,
                msssim: num(f[4], line, what)?,
                msssim_db: num(f[5], line, what)?,
            })
        })
        .collect()
}

/// Collapse per-image sweep rows to one mean row per lambda, ascending.
pub fn mean_by_lambda(rows: &[SweepRow]) -> Vec<SweepRow> {
    let mut lambdas: Vec<f64> = Vec::new();
    for r in rows {
        if !lambdas.contains(&r.lambda) {
            lambdas.push(r.lambda);
        }
    }
    lambdas.sort_by(|a, b| a.partial_cmp(b).expect("finite lambdas"));
    lambdas
        .into_iter()
        .map(|l| {
            let group: Vec<&SweepRow> = rows.iter().filter(|r| r.lambda == l).collect();
            let n = group.len() as f64;
            let mean = |pick: fn(&SweepRow) -> f64| group.iter().map(|r| pick(r)).sum::<f64>() / n;
            SweepRow {
                lambda: l,
                bpp: mean(|r| r.bpp),
                mse: mean(|r| r.mse),
                psnr_db: mean(|r| r.psnr_db),
                msssim: mean(|r| r.msssim),
                msssim_db: mean(|r| r.msssim_db),
            }
        })
        .collect()
}

/// Turn mean sweep rows into fit samples for the chosen metric. MS-SSIM
/// distortion is 1 - score so both metrics decrease as quality rises.
pub fn sweep_to_samples(rows: &[SweepRow], metric: Metric) -> Vec<RdSample> {
    rows.iter()
        .map(|r| RdSample {
            lambda: r.lambda,
            bpp: r.bpp,
            distortion: match metric {
                Metric::Mse => r.mse,
                Metric::MsSsim => 1.0 - r.msssim,
            },
            metric,
        })
        .collect()
}

pub fn write_rd_samples(samples: &[RdSample]) -> String {
    let mut out = String::from(RD_HEADER);
    out.push('\n');
    for s in samples {
        out.push_str(&format!("{},{},{},{}\n", s.lambda, s.bpp, s.distortion, s.metric.as_str()));
    }
    out
}

pub fn read_rd_samples(text: &str) -> Result<Vec<RdSample>> {
    let what = "rd sample csv";
    split_rows(text, RD_HEADER, what)?
        .into_iter()
        .map(|(line, f)| {
            Ok(RdSample {
                lambda: num(f[0], line, what)?,
                bpp: num(f[1], line, what)?,
                distortion: num(f[2], line, what)?,
                metric: Metric::parse(f[3])
                    .with_context(|| format!("{what}: line {line}: unknown metric `{}`", f[3]))?,
            })
        })
        .collect()
}

pub fn write_step_log(log: &[StepRecord]) -> String {
    let mut out = String::from(STEP_LOG_HEADER);
    out.push('\n');
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.loss, r.mse, r.rate_bpp, r.lambda_mean
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows() -> Vec<SweepRow> {
        vec![
            SweepRow { lambda: 1.0, bpp: 0.21, mse: 0.013, psnr_db: 18.9, msssim: 0.81, msssim_db: 7.2 },
            SweepRow { lambda: 16.0, bpp: 0.74, mse: 0.0021, psnr_db: 26.8, msssim: 0.95, msssim_db: 13.0 },
            SweepRow { lambda: 1.0, bpp: 0.25, mse: 0.011, psnr_db: 19.6, msssim: 0.83, msssim_db: 7.7 },
        ]
    }

    #[test]
    fn sweep_round_trip_is_lossless() {
        let rows = vec![SweepRow {
            lambda: 100.0,
            bpp: 0.123456789012345678,
            mse: 1.0 / 3.0,
            psnr_db: f64::MIN_POSITIVE,
            msssim: 0.999999999999,
            msssim_db: 119.0,
        }];
        let text = write_sweep(&rows);
        assert!(text.starts_with(SWEEP_HEADER));
        let back = read_sweep(&text).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn mean_by_lambda_groups_and_sorts() {
        let means = mean_by_lambda(&rows());
        assert_eq!(means.len(), 2);
        assert_eq!(means[0].lambda, 1.0);
        assert!((means[0].bpp - 0.23).abs() < 1e-15);
        assert!((means[0].mse - 0.012).abs() < 1e-15);
        assert_eq!(means[1].bpp, 0.74);
    }

    #[test]
    fn samples_use_one_minus_msssim() {
        let means = mean_by_lambda(&rows());
        let mse = sweep_to_samples(&means, Metric::Mse);
        assert_eq!(mse[0].distortion, means[0].mse);
        let ms = sweep_to_samples(&means, Metric::MsSsim);
        assert!((ms[1].distortion - 0.05).abs() < 1e-12);
    }

    #[test]
    fn rd_sample_round_trip() {
        let samples = vec![
            RdSample { lambda: 4.0, bpp: 0.4, distortion: 0.004, metric: Metric::Mse },
            RdSample { lambda: 64.0, bpp: 1.2, distortion: 0.02, metric: Metric::MsSsim },
        ];
        let text = write_rd_samples(&samples);
        assert_eq!(read_rd_samples(&text).unwrap(), samples);
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(read_sweep("").is_err());
        assert!(read_sweep("nope\n1,2,3,4,5,6\n").is_err());
        let text = format!("{SWEEP_HEADER}\n1,2,3\n");
        assert!(read_sweep(&text).is_err());
        let text = format!("{SWEEP_HEADER}\n1,2,3,x,5,6\n");
        assert!(read_sweep(&text).is_err());
        let text = format!("{RD_HEADER}\n1,0.5,0.01,ssim\n");
        assert!(read_rd_samples(&text).is_err());
    }

    #[test]
    fn step_log_format() {
        let log = vec![modnic_core::trainer::StepRecord {
            step: 3,
            loss: 0.5,
            mse: 0.01,
            rate_bpp: 0.4,
            lambda_mean: 128.5,
        }];
        let text = write_step_log(&log);
        assert_eq!(text, "step,loss,mse,rate_bpp,lambda_mean\n3,0.5,0.01,0.4,128.5\n");
    }
}
