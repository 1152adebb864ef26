use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::mixers::{Mixer, MixerConfig, MixerKind};
use crate::params::ParamStore;
use crate::tensor::{Init, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub len: usize,
    pub median_ms: f64,
    pub min_ms: f64,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub mixer: MixerKind,
    pub d_model: usize,
    pub points: Vec<BenchPoint>,
    /// Least-squares slope of log(median time) against log(length).
    pub slope: f64,
}

/// Least-squares slope through `(ln x, ln y)`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Forward-only single-threaded timings of each mixer on seeded random
/// inputs. One warmup run per length is discarded.
pub fn scaling_bench(
    mixers: &[MixerConfig],
    lengths: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<BenchRecord>> {
    if lengths.len() < 4 || lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Bench(
            "need at least 4 strictly increasing lengths".into(),
        ));
    }
    if repeats < 3 {
        return Err(Error::Bench(format!(
            "need at least 3 repeats, got {repeats}"
        )));
    }
    let mut out = Vec::with_capacity(mixers.len());
    for config in mixers {
        config.validate()?;
        let d = config.d_model();
        let mut store = ParamStore::<f32>::new();
        let mixer = Mixer::build(config, "mixer", &mut store, seed)?;
        let mut points = Vec::with_capacity(lengths.len());
        for &len in lengths {
            let x = Tensor::<f32>::create(
                [len, d],
                Init::Normal {
                    mean: 0.0,
                    std: 1.0,
                    seed: seed ^ len as u64,
                },
            )?;
            std::hint::black_box(mixer.infer(&store, x.data(), len)?);
            let mut times = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                let t0 = Instant::now();
                std::hint::black_box(mixer.infer(&store, x.data(), len)?);
                times.push(t0.elapsed().as_secs_f64() * 1e3);
            }
            let min_ms = times.iter().copied().fold(f64::INFINITY, f64::min);
            let median_ms = median(&mut times);
            if median_ms < 1e-3 {
                return Err(Error::Bench(format!(
                    "median of {median_ms} ms at length {len} is below timer resolution; increase repeats or lengths"
                )));
            }
            points.push(BenchPoint {
                len,
                median_ms,
                min_ms,
                repeats,
            });
        }
        let slope = loglog_slope(
            &points
                .iter()
                .map(|p| (p.len as f64, p.median_ms))
                .collect::<Vec<_>>(),
        );
        out.push(BenchRecord {
            mixer: config.kind(),
            d_model: d,
            points,
            slope,
        });
    }
    Ok(out)
}

impl BenchRecord {
    pub fn write_csv(records: &[BenchRecord], path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Bench(e.to_string()))?;
        w.write_record([
            "mixer",
            "d_model",
            "len",
            "median_ms",
            "min_ms",
            "repeats",
            "slope",
        ])
        .map_err(|e| Error::Bench(e.to_string()))?;
        for r in records {
            for p in &r.points {
                w.write_record([
                    r.mixer.to_string(),
                    r.d_model.to_string(),
                    p.len.to_string(),
                    p.median_ms.to_string(),
                    p.min_ms.to_string(),
                    p.repeats.to_string(),
                    r.slope.to_string(),
                ])
                .map_err(|e| Error::Bench(e.to_string()))?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
