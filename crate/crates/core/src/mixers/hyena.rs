use serde::{Deserialize, Serialize};

use super::dense_infer;
use crate::params::{Bound, ParamId, ParamKind, ParamSpec, ParamStore};
use crate::sigproc::conv::{depthwise_causal_conv_cols, fft_causal_conv_cols};
use crate::tensor::{gemm, softplus, Init, Scalar, Tensor, Var};
use crate::{Error, Result};

/// Highest positional-embedding frequency, in cycles per sequence.
const MAX_PE_CYCLES: f64 = 32.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyenaConfig {
    pub d_model: usize,
    #[serde(default = "defaults::order")]
    pub order: usize,
    #[serde(default = "defaults::filter_embed_dim")]
    pub filter_embed_dim: usize,
    #[serde(default = "defaults::filter_ffn_width")]
    pub filter_ffn_width: usize,
    /// Number of dense layers in the filter network.
    #[serde(default = "defaults::filter_ffn_depth")]
    pub filter_ffn_depth: usize,
    #[serde(default = "defaults::short_filter_len")]
    pub short_filter_len: usize,
    /// Initial per-channel decay rate `softplus(alpha)` of the window.
    #[serde(default = "defaults::window_decay_init")]
    pub window_decay_init: f64,
    #[serde(default)]
    pub window_bias_init: f64,
    /// Frequency of the sine activation inside the filter network.
    #[serde(default = "defaults::filter_sine_freq")]
    pub filter_sine_freq: f64,
}

mod defaults {
    pub fn order() -> usize {
        3
    }
    pub fn filter_embed_dim() -> usize {
        17
    }
    pub fn filter_ffn_width() -> usize {
        64
    }
    pub fn filter_ffn_depth() -> usize {
        2
    }
    pub fn short_filter_len() -> usize {
        3
    }
    pub fn window_decay_init() -> f64 {
        3.0
    }
    pub fn filter_sine_freq() -> f64 {
        1.0
    }
}

impl HyenaConfig {
    pub fn new(d_model: usize) -> Self {
        HyenaConfig {
            d_model,
            order: defaults::order(),
            filter_embed_dim: defaults::filter_embed_dim(),
            filter_ffn_width: defaults::filter_ffn_width(),
            filter_ffn_depth: defaults::filter_ffn_depth(),
            short_filter_len: defaults::short_filter_len(),
            window_decay_init: defaults::window_decay_init(),
            window_bias_init: 0.0,
            filter_sine_freq: defaults::filter_sine_freq(),
        }
    }

    /// Long filters in the recursion: one per gate beyond the first two
    /// projections, and at least one.
    pub fn n_filters(&self) -> usize {
        self.order.saturating_sub(2).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.d_model == 0 {
            return bad("hyena d_model must be positive".into());
        }
        if self.order < 2 {
            return bad(format!(
                "hyena order must be at least 2, got {}",
                self.order
            ));
        }
        if self.short_filter_len == 0 {
            return bad("short_filter_len must be at least 1".into());
        }
        if self.filter_embed_dim.is_multiple_of(2) {
            return bad(format!(
                "filter_embed_dim must be odd, got {}",
                self.filter_embed_dim
            ));
        }
        if self.filter_ffn_depth == 0 || self.filter_ffn_width == 0 {
            return bad("filter network needs positive depth and width".into());
        }
        if !(self.window_decay_init > 0.0) || !self.window_decay_init.is_finite() {
            return bad(format!(
                "window_decay_init must be positive, got {}",
                self.window_decay_init
            ));
        }
        if !self.window_bias_init.is_finite() || !self.filter_sine_freq.is_finite() {
            return bad("window bias and sine frequency must be finite".into());
        }
        Ok(())
    }

    fn ffn_dims(&self) -> Vec<(usize, usize)> {
        let out = self.n_filters() * self.d_model;
        let depth = self.filter_ffn_depth;
        (0..depth)
            .map(|i| {
                let fan_in = if i == 0 {
                    self.filter_embed_dim
                } else {
                    self.filter_ffn_width
                };
                let fan_out = if i + 1 == depth {
                    out
                } else {
                    self.filter_ffn_width
                };
                (fan_in, fan_out)
            })
            .collect()
    }

    fn specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let d = self.d_model;
        let w = Init::Normal {
            mean: 0.0,
            std: 0.02,
            seed: 0,
        };
        let mut specs = Vec::new();
        for j in 0..self.order {
            specs.push(ParamSpec::new(
                format!("{prefix}.in_proj.{j}.weight"),
                ParamKind::Weight,
                &[d, d],
                w,
            ));
            specs.push(ParamSpec::new(
                format!("{prefix}.in_proj.{j}.bias"),
                ParamKind::Bias,
                &[d],
                Init::Zeros,
            ));
            specs.push(ParamSpec::new(
                format!("{prefix}.short_filter.{j}"),
                ParamKind::Weight,
                &[self.short_filter_len, d],
                Init::Zeros,
            ));
        }
        for (i, (fan_in, fan_out)) in self.ffn_dims().into_iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            specs.push(ParamSpec::new(
                format!("{prefix}.filter.ffn.{i}.weight"),
                ParamKind::Weight,
                &[fan_in, fan_out],
                Init::Uniform {
                    lo: -bound,
                    hi: bound,
                    seed: 0,
                },
            ));
            specs.push(ParamSpec::new(
                format!("{prefix}.filter.ffn.{i}.bias"),
                ParamKind::Bias,
                &[fan_out],
                Init::Zeros,
            ));
        }
        let alpha = self.window_decay_init.exp_m1().ln();
        specs.push(ParamSpec::new(
            format!("{prefix}.filter.window.rates"),
            ParamKind::Bias,
            &[self.n_filters() * d],
            Init::Constant(alpha),
        ));
        specs.push(ParamSpec::new(
            format!("{prefix}.filter.window.bias"),
            ParamKind::Bias,
            &[1],
            Init::Constant(self.window_bias_init),
        ));
        specs.push(ParamSpec::new(
            format!("{prefix}.out_proj.weight"),
            ParamKind::Weight,
            &[d, d],
            w,
        ));
        specs.push(ParamSpec::new(
            format!("{prefix}.out_proj.bias"),
            ParamKind::Bias,
            &[d],
            Init::Zeros,
        ));
        specs
    }
}

/// `[L, d_f]` features of normalised time `t = n / max(L-1, 1)`: column 0 is
/// `t`, followed by `(sin 2πf t, cos 2πf t)` pairs with `f` geometric from 1
/// to 32 cycles.
pub fn hyena_positional_embed<F: Scalar>(len: usize, d_f: usize) -> Result<Tensor<F>> {
    if len == 0 || d_f.is_multiple_of(2) {
        return Err(Error::shape(format!(
            "positional embedding needs L >= 1 and odd d_f, got L={len}, d_f={d_f}"
        )));
    }
    let pairs = (d_f - 1) / 2;
    let freqs: Vec<f64> = (0..pairs)
        .map(|k| {
            if pairs == 1 {
                1.0
            } else {
                MAX_PE_CYCLES.powf(k as f64 / (pairs - 1) as f64)
            }
        })
        .collect();
    let denom = (len - 1).max(1) as f64;
    let mut data = Vec::with_capacity(len * d_f);
    for n in 0..len {
        let t = n as f64 / denom;
        data.push(F::c(t));
        for f in &freqs {
            let (s, c) = (std::f64::consts::TAU * f * t).sin_cos();
            data.push(F::c(s));
            data.push(F::c(c));
        }
    }
    Tensor::new([len, d_f], data)
}

/// Hyena mixer of order `N` with projections `p_0 .. p_{N-1}`:
///
/// ```text
/// z = p_{N-1}
/// z = h_j * (p_j ⊙ z)      for j = N-2 down to 1
/// y = (p_0 ⊙ z) W_out + b_out
/// ```
///
/// For `N = 3` this is `q ⊙ (h * (k ⊙ v))`; for `N = 2` it is `q ⊙ (h * v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HyenaMixer {
    config: HyenaConfig,
    // (weight, bias, short kernel) per projection
    proj: Vec<(ParamId, ParamId, ParamId)>,
    ffn: Vec<(ParamId, ParamId)>,
    rates: ParamId,
    window_bias: ParamId,
    out: (ParamId, ParamId),
}

impl HyenaMixer {
    pub fn build<F: Scalar>(
        config: HyenaConfig,
        prefix: &str,
        store: &mut ParamStore<F>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        for spec in config.specs(prefix) {
            store.register(&spec, seed)?;
        }
        let m = Self::attach(config, prefix, store)?;
        // Short kernels start as the identity tap.
        for &(_, _, k) in &m.proj {
            let t = store.get_mut(k);
            t.data_mut()[..m.config.d_model]
                .iter_mut()
                .for_each(|v| *v = F::one());
        }
        Ok(m)
    }

    pub fn attach<F: Scalar>(
        config: HyenaConfig,
        prefix: &str,
        store: &ParamStore<F>,
    ) -> Result<Self> {
        config.validate()?;
        let ids = config
            .specs(prefix)
            .iter()
            .map(|s| store.resolve(s))
            .collect::<Result<Vec<_>>>()?;
        let n = config.order;
        let depth = config.filter_ffn_depth;
        let proj = (0..n)
            .map(|j| (ids[3 * j], ids[3 * j + 1], ids[3 * j + 2]))
            .collect();
        let ffn = (0..depth)
            .map(|i| (ids[3 * n + 2 * i], ids[3 * n + 2 * i + 1]))
            .collect();
        let rest = &ids[3 * n + 2 * depth..];
        Ok(HyenaMixer {
            config,
            proj,
            ffn,
            rates: rest[0],
            window_bias: rest[1],
            out: (rest[2], rest[3]),
        })
    }

    pub fn config(&self) -> &HyenaConfig {
        &self.config
    }

    fn check_input(&self, shape: &[usize]) -> Result<usize> {
        let d = self.config.d_model;
        match shape {
            [l, c] if *c == d => {
                if *l < self.config.short_filter_len {
                    return Err(Error::shape(format!(
                        "sequence length {l} is shorter than the short filter ({})",
                        self.config.short_filter_len
                    )));
                }
                Ok(*l)
            }
            other => Err(Error::shape(format!(
                "hyena input must be [L, {d}], got {other:?}"
            ))),
        }
    }

    /// Implicit long filters `Window(FFN(P_e))` as `[L, n_filters * d_model]`;
    /// filter `f` occupies columns `f*d .. (f+1)*d`.
    pub fn filter<'g, F: Scalar>(&self, b: &Bound<'g, '_, F>, len: usize) -> Result<Var<'g, F>> {
        let g = b.graph();
        let pe = hyena_positional_embed::<F>(len, self.config.filter_embed_dim)?;
        let mut z = g.constant([len, self.config.filter_embed_dim], pe.into_data())?;
        for (i, &(w, bias)) in self.ffn.iter().enumerate() {
            z = z.matmul(&b.var(w))?.add_row(&b.var(bias))?;
            if i + 1 < self.ffn.len() {
                z = z.scale(self.config.filter_sine_freq)?.sin()?;
            }
        }
        let window = g.decay_window(&b.var(self.rates), &b.var(self.window_bias), len)?;
        z.mul(&window)
    }

    /// `k_j * (x W_j + b_j)`.
    pub fn projection<'g, F: Scalar>(
        &self,
        b: &Bound<'g, '_, F>,
        x: Var<'g, F>,
        j: usize,
    ) -> Result<Var<'g, F>> {
        let (w, bias, k) = self.proj[j];
        x.matmul(&b.var(w))?
            .add_row(&b.var(bias))?
            .depthwise_causal_conv(&b.var(k))
    }

    /// Gated recursion before the output projection.
    pub fn operator<'g, F: Scalar>(
        &self,
        b: &Bound<'g, '_, F>,
        x: Var<'g, F>,
    ) -> Result<Var<'g, F>> {
        let len = self.check_input(&x.shape())?;
        let d = self.config.d_model;
        let n = self.config.order;
        let h = self.filter(b, len)?;
        let p = (0..n)
            .map(|j| self.projection(b, x, j))
            .collect::<Result<Vec<_>>>()?;
        let mut z = p[n - 1];
        if n == 2 {
            z = z.fft_causal_conv(&h)?;
        } else {
            for (f, j) in (1..n - 1).rev().enumerate() {
                let hf = h.slice_cols(f * d, d)?;
                z = p[j].mul(&z)?.fft_causal_conv(&hf)?;
            }
        }
        p[0].mul(&z)
    }

    pub fn forward<'g, F: Scalar>(
        &self,
        b: &Bound<'g, '_, F>,
        x: Var<'g, F>,
    ) -> Result<Var<'g, F>> {
        let (w, bias) = self.out;
        self.operator(b, x)?
            .matmul(&b.var(w))?
            .add_row(&b.var(bias))
    }

    /// Graph-free forward used for long-sequence benchmarks.
    pub fn infer<F: Scalar>(&self, store: &ParamStore<F>, x: &[F], len: usize) -> Result<Vec<F>> {
        let d = self.config.d_model;
        if x.len() != len * d {
            return Err(Error::shape(format!(
                "hyena input has {} values, expected {len} x {d}",
                x.len()
            )));
        }
        self.check_input(&[len, d])?;
        let cols = self.config.n_filters() * d;

        let mut z = hyena_positional_embed::<F>(len, self.config.filter_embed_dim)?.into_data();
        for (i, &(w, bias)) in self.ffn.iter().enumerate() {
            z = dense_infer(store, &z, len, w, bias);
            if i + 1 < self.ffn.len() {
                let freq = F::c(self.config.filter_sine_freq);
                z.iter_mut().for_each(|v| *v = (*v * freq).sin());
            }
        }
        let rates: Vec<F> = store
            .get(self.rates)
            .data()
            .iter()
            .map(|&a| softplus(a))
            .collect();
        let wb = store.get(self.window_bias).data()[0];
        let inv_len = F::one() / F::c(len as f64);
        for (n, row) in z.chunks_exact_mut(cols).enumerate() {
            let t = F::c(n as f64) * inv_len;
            for (v, &r) in row.iter_mut().zip(&rates) {
                *v *= (-r * t).exp() + wb;
            }
        }
        let filter_cols = |f: usize| -> Vec<F> {
            z.chunks_exact(cols)
                .flat_map(|r| r[f * d..(f + 1) * d].iter().copied())
                .collect()
        };

        let w = self.config.short_filter_len;
        let p: Vec<Vec<F>> = self
            .proj
            .iter()
            .map(|&(wt, bias, k)| {
                let lin = dense_infer(store, x, len, wt, bias);
                depthwise_causal_conv_cols(&lin, store.get(k).data(), len, w, d)
            })
            .collect();
        let n = self.config.order;
        let mut acc = p[n - 1].clone();
        if n == 2 {
            acc = fft_causal_conv_cols(&acc, &filter_cols(0), len, d);
        } else {
            for (f, j) in (1..n - 1).rev().enumerate() {
                acc.iter_mut().zip(&p[j]).for_each(|(a, &q)| *a *= q);
                acc = fft_causal_conv_cols(&acc, &filter_cols(f), len, d);
            }
        }
        acc.iter_mut().zip(&p[0]).for_each(|(a, &q)| *a *= q);
        let (wo, bo) = self.out;
        let wt = store.get(wo);
        let mut out: Vec<F> = (0..len)
            .flat_map(|_| store.get(bo).data().iter().copied())
            .collect();
        gemm(len, d, d, &acc, false, wt.data(), false, &mut out, true);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
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

    fn mixer(cfg: HyenaConfig, seed: u64) -> (HyenaMixer, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let m = HyenaMixer::build(cfg, "hy", &mut store, seed).unwrap();
        (m, store)
    }

    #[test]
    fn positional_embedding_shape_and_endpoints() {
        let one = hyena_positional_embed::<f64>(1, 7).unwrap();
        assert_eq!(one.data(), &[0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let pe = hyena_positional_embed::<f64>(10, 17).unwrap();
        assert_eq!(pe.data()[9 * 17], 1.0);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        assert!(hyena_positional_embed::<f64>(4, 6).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(HyenaConfig::new(8).validate().is_ok());
        for f in [
            |c: &mut HyenaConfig| c.order = 1,
            |c: &mut HyenaConfig| c.short_filter_len = 0,
            |c: &mut HyenaConfig| c.filter_embed_dim = 8,
            |c: &mut HyenaConfig| c.filter_ffn_depth = 0,
        ] {
            let mut c = HyenaConfig::new(8);
            f(&mut c);
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn window_anchor_is_one_plus_bias() {
        let mut cfg = HyenaConfig::new(4);
        cfg.window_bias_init = 0.25;
        let (m, mut store) = mixer(cfg, 1);
        // constant FFN output of one
        let last = m.config.filter_ffn_depth - 1;
        let w = store
            .by_name(&format!("hy.filter.ffn.{last}.weight"))
            .unwrap()
            .len();
        store
            .set(&format!("hy.filter.ffn.{last}.weight"), vec![0.0; w])
            .unwrap();
        store
            .set(&format!("hy.filter.ffn.{last}.bias"), vec![1.0; 4])
            .unwrap();
        let g = Graph::new();
        let b = Bound::new(&g, &store, None);
        let h = m.filter(&b, 16).unwrap().value();
        assert!(h[..4].iter().all(|&v| (v - 1.25).abs() < 1e-15));
    }

    #[test]
    fn short_filters_start_at_identity() {
        let (m, store) = mixer(HyenaConfig::new(4), 2);
        for &(_, _, k) in &m.proj {
            let k = store.get(k).data();
            assert_eq!(&k[..4], &[1.0; 4]);
            assert!(k[4..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rejects_sequences_shorter_than_short_filter() {
        let (m, store) = mixer(HyenaConfig::new(4), 3);
        let g = Graph::new();
        let b = Bound::new(&g, &store, None);
        assert!(m.forward(&b, g.leaf(&rand(&[2, 4], 1))).is_err());
    }

    #[test]
    fn infer_matches_graph() {
        for order in [2, 3, 4] {
            let mut cfg = HyenaConfig::new(6);
            cfg.order = order;
            let (m, store) = mixer(cfg, 4);
            let x = rand(&[40, 6], 5);
            let g = Graph::new();
            let b = Bound::new(&g, &store, None);
            let y = m.forward(&b, g.leaf(&x)).unwrap().value();
            let z = m.infer(&store, x.data(), 40).unwrap();
            let err = y
                .iter()
                .zip(&z)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-12, "order {order}: {err}");
        }
    }
}
