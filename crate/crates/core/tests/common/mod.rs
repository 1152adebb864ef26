#![allow(dead_code)]

pub mod checks;

use hyena_distill::data::{sample_windows, synthetic_corpus, tokenize, WindowSet};
use hyena_distill::mixers::{HyenaConfig, MixerConfig};
use hyena_distill::model::{Model, ModelConfig};
use hyena_distill::{Graph, Init, Result, Scalar, Tensor, Var};

pub fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::create(
        shape.to_vec(),
        Init::Uniform {
            lo: -1.0,
            hi: 1.0,
            seed,
        },
    )
    .unwrap()
}

pub fn max_abs_diff<F: Scalar>(a: &[F], b: &[F]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.f64() - y.f64()).abs())
        .fold(0.0, f64::max)
}

/// `y[n, c] = sum_{m <= n} h[m, c] u[n - m, c]` by direct summation.
pub fn direct_causal_conv(u: &[f64], h: &[f64], l: usize, ch: usize) -> Vec<f64> {
    let mut y = vec![0.0; l * ch];
    for n in 0..l {
        for m in 0..=n {
            for c in 0..ch {
                y[n * ch + c] += h[m * ch + c] * u[(n - m) * ch + c];
            }
        }
    }
    y
}

/// `y[n, c] = sum_{j < w} k[j, c] x[n - j, c]`, zero before the start.
pub fn direct_depthwise(x: &[f64], k: &[f64], l: usize, w: usize, ch: usize) -> Vec<f64> {
    let mut y = vec![0.0; l * ch];
    for n in 0..l {
        for j in 0..w {
            if j > n {
                break;
            }
            for c in 0..ch {
                y[n * ch + c] += k[j * ch + c] * x[(n - j) * ch + c];
            }
        }
    }
    y
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            for j in 0..n {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

/// `h[0] = CB + D`, `h[n] = C A^n B` from explicit matrix powers.
pub fn ssm_impulse_by_powers(
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d: f64,
    s: usize,
    len: usize,
) -> Vec<f64> {
    let mut power: Vec<f64> = (0..s * s)
        .map(|i| if i % (s + 1) == 0 { 1.0 } else { 0.0 })
        .collect();
    let mut h = Vec::with_capacity(len);
    for n in 0..len {
        let ab = matmul(&power, b, s, s, 1);
        let mut v: f64 = c.iter().zip(&ab).map(|(x, y)| x * y).sum();
        if n == 0 {
            v += d;
        }
        h.push(v);
        power = matmul(&power, a, s, s, s);
    }
    h
}

/// Scalar probe `sum(out * r)` with a fixed random `r`, so no gradient
/// component is hidden by symmetry.
pub fn probe<'g>(g: &'g Graph<f64>, out: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let shape = out.shape();
    let r = uniform(&shape, seed ^ 0x5eed);
    let r = g.constant(shape, r.into_data())?;
    out.mul(&r)?.sum()
}

pub fn small_hyena(d_model: usize) -> HyenaConfig {
    HyenaConfig {
        filter_embed_dim: 5,
        filter_ffn_width: 8,
        ..HyenaConfig::new(d_model)
    }
}

pub fn tiny_attention(seed: u64) -> ModelConfig {
    ModelConfig::attention(16, 2, 2, 32).with_seed(seed)
}

pub fn tiny_hyena(seed: u64) -> ModelConfig {
    ModelConfig {
        mixer: MixerConfig::Hyena(small_hyena(16)),
        ..tiny_attention(seed)
    }
}

pub fn model<F: Scalar>(cfg: ModelConfig) -> Model<F> {
    Model::build(cfg).unwrap()
}

/// Training and validation windows from a seeded synthetic corpus.
pub fn windows(bytes: usize, context_len: usize, n: usize, seed: u64) -> (WindowSet, WindowSet) {
    let corpus = tokenize(synthetic_corpus(bytes, seed).as_bytes());
    sample_windows(&corpus, context_len, n, 0.1, seed).unwrap()
}
