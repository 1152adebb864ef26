//! Perplexity evaluation, mixer scaling benchmarks and comparison reports.

mod bench;
mod report;

use serde::{Deserialize, Serialize};

use crate::data::WindowSet;
use crate::mixers::MixerKind;
use crate::model::{Capture, Model};
use crate::tensor::{Precision, Scalar, Tensor};
use crate::training::par_map;
use crate::{Error, Result};

pub use bench::{loglog_slope, scaling_bench, BenchPoint, BenchRecord};
pub use report::{compare_report, parse_report_csv, ReportFormat, ReportRow, Role};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mixer: MixerKind,
    pub model_digest: String,
    pub dataset_digest: String,
    pub context_len: usize,
    pub mean_ce: f64,
    pub perplexity: f64,
    pub tokens: u64,
    pub precision: Precision,
}

/// Compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    pub fn add(&mut self, v: f64) {
        let y = v - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// Negative log-probability of each target under the rows of `logits`.
pub fn token_nll<F: Scalar>(logits: &Tensor<F>, targets: &[usize]) -> Result<Vec<f64>> {
    let (rows, cols) = (logits.shape()[0], logits.shape()[1]);
    if rows != targets.len() {
        return Err(Error::shape(format!(
            "{rows} logit rows for {} targets",
            targets.len()
        )));
    }
    logits
        .data()
        .chunks_exact(cols)
        .zip(targets)
        .map(|(row, &t)| {
            if t >= cols {
                return Err(Error::shape(format!(
                    "target {t} out of range for {cols} classes"
                )));
            }
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
            let lse = max + row.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln();
            Ok(lse - row[t].f64())
        })
        .collect()
}

/// Mean next-token cross entropy over every position of every window
/// (position `i` predicts token `i + 1`), and its exponential.
pub fn perplexity<F: Scalar>(model: &Model<F>, windows: &WindowSet) -> Result<EvalResult> {
    if windows.is_empty() {
        return Err(Error::Data("perplexity over an empty window set".into()));
    }
    let len = windows.context_len();
    if len < 2 || len - 1 > model.config().context_len {
        return Err(Error::config(format!(
            "windows of {len} tokens do not fit a model with context {}",
            model.config().context_len
        )));
    }
    let per = par_map(windows.len(), |i| -> Result<KahanSum> {
        let tokens = windows.indices(i);
        let logits = model.forward(&tokens[..len - 1], Capture::None)?.logits;
        let mut s = KahanSum::default();
        token_nll(&logits, &tokens[1..])?
            .into_iter()
            .for_each(|v| s.add(v));
        Ok(s)
    });
    let mut total = KahanSum::default();
    for s in per {
        let s = s?;
        total.add(s.value());
        total.add(-s.carry);
    }
    let tokens = (windows.len() * (len - 1)) as u64;
    let mean_ce = total.value() / tokens as f64;
    Ok(EvalResult {
        mixer: model.kind(),
        model_digest: model.digest(),
        dataset_digest: windows.digest(),
        context_len: len,
        mean_ce,
        perplexity: mean_ce.exp(),
        tokens,
        precision: F::PRECISION,
    })
}
