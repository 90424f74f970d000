//! Inference policies, their accuracy/cost accounting, throughput timing
//! and the trade-off CSV.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::assigner::Tla;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::labeling::{extract_labels, LabelSet};
use crate::model::{count_flops, ReViT};
use crate::numerics::{ParamStore, Scalar, Tensor};

const EVAL_BATCH: usize = 64;

/// How each image's token length is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Policy {
    Fixed(usize),
    /// The assigner picks the length.
    Adaptive,
    /// The extracted label (minimum sufficient length) is used directly.
    Oracle,
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Fixed(i) => write!(f, "fixed{i}"),
            Policy::Adaptive => f.write_str("adaptive"),
            Policy::Oracle => f.write_str("oracle"),
        }
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Policy::Adaptive),
            "oracle" => Ok(Policy::Oracle),
            _ => s
                .strip_prefix("fixed")
                .map(|n| n.trim_start_matches([':', '-', '_']))
                .and_then(|n| n.parse().ok())
                .map(Policy::Fixed)
                .ok_or_else(|| {
                    Error::Validation(format!("unknown policy `{s}` (expected fixed<i>, adaptive or oracle)"))
                }),
        }
    }
}

impl Policy {
    /// Every fixed length, then adaptive and oracle.
    pub fn all(k: usize) -> Vec<Policy> {
        (0..k)
            .map(Policy::Fixed)
            .chain([Policy::Adaptive, Policy::Oracle])
            .collect()
    }
}

/// The main model with its parameters.
#[derive(Clone, Copy)]
pub struct ModelRef<'a, T: Scalar> {
    pub model: &'a ReViT,
    pub store: &'a ParamStore<T>,
}

/// The assigner with its parameters.
#[derive(Clone, Copy)]
pub struct TlaRef<'a, T: Scalar> {
    pub tla: &'a Tla,
    pub store: &'a ParamStore<T>,
}

/// Result of routing one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdaptivePrediction {
    pub class_idx: usize,
    pub length_idx: usize,
    pub flops: u64,
}

fn check_pair<T: Scalar>(vit: &ModelRef<'_, T>, tla: &TlaRef<'_, T>) -> Result<()> {
    if tla.tla.num_lengths() != vit.model.num_lengths() {
        return Err(Error::Validation(format!(
            "TLA predicts {} lengths, model has {}",
            tla.tla.num_lengths(),
            vit.model.num_lengths()
        )));
    }
    Ok(())
}

/// Class predictions when image `s` runs at `lengths[s]`. Images are
/// grouped by length and batched per group.
fn predict_at<T: Scalar>(vit: &ModelRef<'_, T>, images: &Tensor<T>, lengths: &[usize]) -> Result<Vec<usize>> {
    let mut preds = vec![0; lengths.len()];
    for i in 0..vit.model.num_lengths() {
        let members: Vec<usize> = (0..lengths.len()).filter(|&s| lengths[s] == i).collect();
        if members.is_empty() {
            continue;
        }
        let group = images.select_outer(&members)?;
        for (&s, p) in members.iter().zip(vit.model.predict(vit.store, &group, i)?) {
            preds[s] = p;
        }
    }
    Ok(preds)
}

/// Routes a batch `[b, c, h, w]` through the assigner, then the model at
/// each image's assigned length.
pub fn adaptive_predict_images<T: Scalar>(
    vit: ModelRef<'_, T>,
    tla: TlaRef<'_, T>,
    images: &Tensor<T>,
) -> Result<Vec<AdaptivePrediction>> {
    check_pair(&vit, &tla)?;
    let lengths = tla.tla.assign_batch(tla.store, images)?;
    let preds = predict_at(&vit, images, &lengths)?;
    let tla_flops = tla.tla.flops();
    lengths
        .iter()
        .zip(preds)
        .map(|(&length_idx, class_idx)| {
            Ok(AdaptivePrediction {
                class_idx,
                length_idx,
                flops: count_flops(vit.model.config(), length_idx, false)? + tla_flops,
            })
        })
        .collect()
}

/// [`adaptive_predict_images`] over the selected dataset samples.
pub fn adaptive_predict<T: Scalar>(
    vit: ModelRef<'_, T>,
    tla: TlaRef<'_, T>,
    data: &Dataset,
    indices: &[usize],
) -> Result<Vec<AdaptivePrediction>> {
    let (images, _) = data.batch::<T>(indices)?;
    adaptive_predict_images(vit, tla, &images)
}

/// One policy's accuracy and cost over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub policy: String,
    pub top1: f64,
    /// Mean patch tokens per image.
    pub mean_tokens: f64,
    pub mean_flops: f64,
    /// Images per second; 0 when not measured.
    pub ips: f64,
    /// Samples per length index.
    pub hist: Vec<usize>,
}

/// Evaluates `policy` on `data`. `Adaptive` needs `tla`; `Oracle` uses
/// `labels` when given and extracts them from the model otherwise.
pub fn evaluate<T: Scalar>(
    policy: Policy,
    vit: ModelRef<'_, T>,
    tla: Option<TlaRef<'_, T>>,
    labels: Option<&LabelSet>,
    data: &Dataset,
) -> Result<ReportRow> {
    let k = vit.model.num_lengths();
    let config = vit.model.config();
    let n = data.len();
    if n == 0 {
        return Err(Error::Usage("empty dataset".into()));
    }
    let lengths: Vec<usize> = match policy {
        Policy::Fixed(i) => {
            vit.model.schedule().check_index(i)?;
            vec![i; n]
        }
        Policy::Adaptive => {
            let tla = tla.ok_or_else(|| Error::Usage("adaptive policy needs a TLA".into()))?;
            check_pair(&vit, &tla)?;
            let idx: Vec<usize> = (0..n).collect();
            let chunks: Vec<Vec<usize>> = idx
                .par_chunks(EVAL_BATCH)
                .map(|c| -> Result<Vec<usize>> {
                    let (images, _) = data.batch::<T>(c)?;
                    tla.tla.assign_batch(tla.store, &images)
                })
                .collect::<Result<_>>()?;
            chunks.concat()
        }
        Policy::Oracle => match labels {
            Some(l) => {
                l.check_covers(data)?;
                l.labels()
            }
            None => extract_labels(vit.model, vit.store, data)?.labels(),
        },
    };
    let idx: Vec<usize> = (0..n).collect();
    let correct: usize = idx
        .par_chunks(EVAL_BATCH)
        .map(|c| -> Result<usize> {
            let ls: Vec<usize> = c.iter().map(|&s| lengths[s]).collect();
            let (images, _) = data.batch::<T>(c)?;
            let preds = predict_at(&vit, &images, &ls)?;
            Ok(c.iter().zip(preds).filter(|(&s, p)| data.labels()[s] == *p).count())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();

    let mut hist = vec![0; k];
    lengths.iter().for_each(|&l| hist[l] += 1);
    let tla_flops = match policy {
        Policy::Adaptive => tla.map_or(0, |t| t.tla.flops()),
        _ => 0,
    };
    let mut flops_sum = 0u128;
    let mut tokens_sum = 0u128;
    for (i, &c) in hist.iter().enumerate() {
        flops_sum += c as u128 * u128::from(count_flops(config, i, false)? + tla_flops);
        tokens_sum += c as u128 * vit.model.schedule().tokens(i) as u128;
    }
    Ok(ReportRow {
        policy: policy.to_string(),
        top1: correct as f64 / n as f64,
        mean_tokens: tokens_sum as f64 / n as f64,
        mean_flops: flops_sum as f64 / n as f64,
        ips: 0.0,
        hist,
    })
}

/// Timing settings for [`benchmark_throughput`].
#[derive(Clone, Copy, Debug)]
pub struct BenchConfig {
    pub batch: usize,
    pub warmup: usize,
    pub trials: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch: 32,
            warmup: 1,
            trials: 5,
        }
    }
}

/// Median images/sec of `policy` over `trials` timed passes through `data`.
/// Images are bucketed by their length and run in batches per bucket; the
/// assigner's own forward is included in the adaptive timing.
pub fn benchmark_throughput<T: Scalar>(
    policy: Policy,
    vit: ModelRef<'_, T>,
    tla: Option<TlaRef<'_, T>>,
    labels: Option<&LabelSet>,
    data: &Dataset,
    cfg: BenchConfig,
) -> Result<f64> {
    if cfg.batch == 0 || cfg.trials < 5 {
        return Err(Error::Validation(
            "benchmark needs batch >= 1 and at least 5 trials".into(),
        ));
    }
    let n = data.len();
    let idx: Vec<usize> = (0..n).collect();
    let oracle_labels = match (policy, labels) {
        (Policy::Oracle, Some(l)) => {
            l.check_covers(data)?;
            Some(l.labels())
        }
        (Policy::Oracle, None) => Some(extract_labels(vit.model, vit.store, data)?.labels()),
        _ => None,
    };
    let adaptive_tla = match policy {
        Policy::Adaptive => {
            let t = tla.ok_or_else(|| Error::Usage("adaptive policy needs a TLA".into()))?;
            check_pair(&vit, &t)?;
            Some(t)
        }
        _ => None,
    };
    let run = || -> Result<()> {
        let lengths: Vec<usize> = match (policy, &oracle_labels, &adaptive_tla) {
            (Policy::Fixed(i), _, _) => vec![i; n],
            (_, Some(l), _) => l.clone(),
            (_, _, Some(t)) => {
                let mut out = Vec::with_capacity(n);
                for c in idx.chunks(cfg.batch) {
                    let (images, _) = data.batch::<T>(c)?;
                    out.extend(t.tla.assign_batch(t.store, &images)?);
                }
                out
            }
            _ => unreachable!("policy resolved above"),
        };
        for i in 0..vit.model.num_lengths() {
            let bucket: Vec<usize> = idx.iter().copied().filter(|&s| lengths[s] == i).collect();
            for c in bucket.chunks(cfg.batch) {
                let (images, _) = data.batch::<T>(c)?;
                std::hint::black_box(vit.model.class_logits(vit.store, &images, i)?);
            }
        }
        Ok(())
    };
    for _ in 0..cfg.warmup {
        run()?;
    }
    let mut rates = Vec::with_capacity(cfg.trials);
    for _ in 0..cfg.trials {
        let t = Instant::now();
        run()?;
        rates.push(n as f64 / t.elapsed().as_secs_f64().max(1e-12));
    }
    rates.sort_by(f64::total_cmp);
    Ok(rates[rates.len() / 2])
}

/// Rows in policy order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TradeoffReport {
    pub rows: Vec<ReportRow>,
}

pub const TRADEOFF_HEADER: &str = "policy,top1,mean_tokens,mean_flops,ips,hist";

/// C-style `%.6g`: six significant digits, trailing zeros removed,
/// exponent form below 1e-4 or from 1e6.
pub fn format_g6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let strip = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", strip(mantissa), exp.abs())
    } else {
        let decimals = (5 - exp).max(0) as usize;
        strip(&format!("{x:.decimals$}"))
    }
}

impl TradeoffReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRADEOFF_HEADER);
        out.push('\n');
        for r in &self.rows {
            let hist: Vec<String> = r.hist.iter().map(usize::to_string).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.policy,
                format_g6(r.top1),
                format_g6(r.mean_tokens),
                format_g6(r.mean_flops),
                format_g6(r.ips),
                hist.join(";")
            ));
        }
        out
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Format {
            path: path.to_path_buf(),
            message: format!("line {line}: {message}"),
        };
        let mut lines = text.split('\n');
        if lines.next() != Some(TRADEOFF_HEADER) {
            return Err(err(1, format!("expected header `{TRADEOFF_HEADER}`")));
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let line_no = n + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(err(line_no, format!("expected 6 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err(line_no, format!("bad number `{s}`")));
            let hist = f[5]
                .split(';')
                .map(|h| h.parse().map_err(|_| err(line_no, format!("bad histogram `{}`", f[5]))))
                .collect::<Result<Vec<usize>>>()?;
            rows.push(ReportRow {
                policy: f[0].to_string(),
                top1: num(f[1])?,
                mean_tokens: num(f[2])?,
                mean_flops: num(f[3])?,
                ips: num(f[4])?,
                hist,
            });
        }
        Ok(Self { rows })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, path)
    }
}

/// Writes the report as CSV; an empty report is rejected.
pub fn export_tradeoff(report: &TradeoffReport, path: &Path) -> Result<()> {
    if report.rows.is_empty() {
        return Err(Error::Usage("empty trade-off report".into()));
    }
    std::fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))
}
