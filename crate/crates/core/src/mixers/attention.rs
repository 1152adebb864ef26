use serde::{Deserialize, Serialize};

use super::dense_infer;
use crate::params::{Bound, ParamId, ParamKind, ParamSpec, ParamStore};
use crate::tensor::{gemm, rope_rotate, Init, Scalar, Tensor, Var};
use crate::{Error, Result};

/// Rows processed together by the graph-free attention path.
const INFER_BLOCK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_causal")]
    pub causal: bool,
}

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_causal() -> bool {
    true
}

impl AttentionConfig {
    pub fn new(d_model: usize, n_heads: usize) -> Self {
        AttentionConfig {
            d_model,
            n_heads,
            rope_base: default_rope_base(),
            causal: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 {
            return Err(Error::config("attention needs d_model > 0 and n_heads > 0"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::config(format!(
                "head_dim {} must be even for rotary embeddings",
                self.head_dim()
            )));
        }
        if !(self.rope_base > 1.0) {
            return Err(Error::config(format!(
                "rope_base must exceed 1, got {}",
                self.rope_base
            )));
        }
        Ok(())
    }

    fn specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let d = self.d_model;
        let w = Init::Normal {
            mean: 0.0,
            std: 0.02,
            seed: 0,
        };
        let mut specs = Vec::new();
        for proj in ["q_proj", "k_proj", "v_proj", "out_proj"] {
            specs.push(ParamSpec::new(
                format!("{prefix}.{proj}.weight"),
                ParamKind::Weight,
                &[d, d],
                w,
            ));
            specs.push(ParamSpec::new(
                format!("{prefix}.{proj}.bias"),
                ParamKind::Bias,
                &[d],
                Init::Zeros,
            ));
        }
        specs.push(ParamSpec::new(
            format!("{prefix}.rope.inv_freq"),
            ParamKind::Buffer,
            &[self.head_dim() / 2],
            Init::Zeros,
        ));
        specs
    }

    fn inv_freq(&self) -> Vec<f64> {
        let hd = self.head_dim();
        (0..hd / 2)
            .map(|i| self.rope_base.powf(-(2.0 * i as f64) / hd as f64))
            .collect()
    }
}

/// Multi-head self-attention with rotary position embeddings on queries and
/// keys. The `rope.inv_freq` buffer records the rotation frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMixer {
    config: AttentionConfig,
    // q, k, v, out as (weight, bias)
    proj: [(ParamId, ParamId); 4],
    inv_freq: ParamId,
}

impl AttentionMixer {
    pub fn build<F: Scalar>(
        config: AttentionConfig,
        prefix: &str,
        store: &mut ParamStore<F>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        for spec in config.specs(prefix) {
            store.register(&spec, seed)?;
        }
        let freqs = config.inv_freq().into_iter().map(F::c).collect();
        store.set(&format!("{prefix}.rope.inv_freq"), freqs)?;
        Self::attach(config, prefix, store)
    }

    pub fn attach<F: Scalar>(
        config: AttentionConfig,
        prefix: &str,
        store: &ParamStore<F>,
    ) -> Result<Self> {
        config.validate()?;
        let ids = config
            .specs(prefix)
            .iter()
            .map(|s| store.resolve(s))
            .collect::<Result<Vec<_>>>()?;
        let inv_freq = ids[8];
        let expected = config.inv_freq();
        let stored = store.get(inv_freq).data();
        // Values may have been stored at 32-bit and widened.
        if stored
            .iter()
            .zip(&expected)
            .any(|(s, e)| (s.f64() - e).abs() > 1e-6 * e.abs())
        {
            return Err(Error::config(format!(
                "{prefix}.rope.inv_freq does not match rope_base {}",
                config.rope_base
            )));
        }
        Ok(AttentionMixer {
            config,
            proj: [
                (ids[0], ids[1]),
                (ids[2], ids[3]),
                (ids[4], ids[5]),
                (ids[6], ids[7]),
            ],
            inv_freq,
        })
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.config
    }

    /// `Q = u Mq + bq`, `K = u Mk + bk`, `V = u Mv + bv`, each `[L, d_model]`.
    pub fn qkv_project<'g, F: Scalar>(
        &self,
        b: &Bound<'g, '_, F>,
        u: Var<'g, F>,
    ) -> Result<(Var<'g, F>, Var<'g, F>, Var<'g, F>)> {
        let d = self.config.d_model;
        match u.shape().as_slice() {
            [_, c] if *c == d => {}
            other => {
                return Err(Error::shape(format!(
                    "attention input must be [L, {d}], got {other:?}"
                )))
            }
        }
        let p = |i: usize| -> Result<Var<'g, F>> {
            let (w, bias) = self.proj[i];
            u.matmul(&b.var(w))?.add_row(&b.var(bias))
        };
        Ok((p(0)?, p(1)?, p(2)?))
    }

    pub fn forward<'g, F: Scalar>(
        &self,
        b: &Bound<'g, '_, F>,
        x: Var<'g, F>,
        positions: &[usize],
    ) -> Result<Var<'g, F>> {
        let (q, k, v) = self.qkv_project(b, x)?;
        let hd = self.config.head_dim();
        let base = self.config.rope_base;
        let heads = (0..self.config.n_heads)
            .map(|h| {
                let qh = q.slice_cols(h * hd, hd)?.rope(positions, base)?;
                let kh = k.slice_cols(h * hd, hd)?.rope(positions, base)?;
                let vh = v.slice_cols(h * hd, hd)?;
                scaled_dot_attention(qh, kh, vh, self.config.causal)
            })
            .collect::<Result<Vec<_>>>()?;
        let cat = b.graph().concat_cols(&heads)?;
        let (wo, bo) = self.proj[3];
        cat.matmul(&b.var(wo))?.add_row(&b.var(bo))
    }

    /// Graph-free forward for positions `0..len`, processing query rows in
    /// blocks so memory stays linear in `len`.
    pub fn infer<F: Scalar>(&self, store: &ParamStore<F>, x: &[F], len: usize) -> Result<Vec<F>> {
        let d = self.config.d_model;
        if x.len() != len * d || len == 0 {
            return Err(Error::shape(format!(
                "attention input has {} values, expected {len} x {d}",
                x.len()
            )));
        }
        let [q, k, v] =
            [0, 1, 2].map(|i| dense_infer(store, x, len, self.proj[i].0, self.proj[i].1));
        let hd = self.config.head_dim();
        let positions: Vec<usize> = (0..len).collect();
        let scale = F::c(1.0 / (hd as f64).sqrt());
        let inv_freq = store.get(self.inv_freq).data();
        debug_assert_eq!(inv_freq.len(), hd / 2);
        let mut cat = vec![F::zero(); len * d];
        let mut scores = vec![F::zero(); INFER_BLOCK * len];
        let mut out = vec![F::zero(); INFER_BLOCK * hd];
        let column = |m: &[F], h: usize| -> Vec<F> {
            m.chunks_exact(d)
                .flat_map(|r| r[h * hd..(h + 1) * hd].iter().copied())
                .collect()
        };
        for h in 0..self.config.n_heads {
            let mut qh = column(&q, h);
            let mut kh = column(&k, h);
            let vh = column(&v, h);
            rope_rotate(&mut qh, hd, &positions, self.config.rope_base, false);
            rope_rotate(&mut kh, hd, &positions, self.config.rope_base, false);
            for r0 in (0..len).step_by(INFER_BLOCK) {
                let r1 = (r0 + INFER_BLOCK).min(len);
                let rows = r1 - r0;
                let keys = if self.config.causal { r1 } else { len };
                let s = &mut scores[..rows * keys];
                gemm(
                    rows,
                    hd,
                    keys,
                    &qh[r0 * hd..r1 * hd],
                    false,
                    &kh[..keys * hd],
                    true,
                    s,
                    false,
                );
                for (i, row) in s.chunks_exact_mut(keys).enumerate() {
                    let visible = if self.config.causal { r0 + i + 1 } else { keys };
                    let max =
                        row[..visible]
                            .iter()
                            .fold(F::neg_infinity(), |m, &v| if v > m { v } else { m });
                    if max.is_nan() {
                        return Err(Error::numeric("NaN attention score"));
                    }
                    let mut total = F::zero();
                    for val in &mut row[..visible] {
                        *val = ((*val - max) * scale).exp();
                        total += *val;
                    }
                    let inv = F::one() / total;
                    row[..visible].iter_mut().for_each(|val| *val *= inv);
                    row[visible..].iter_mut().for_each(|val| *val = F::zero());
                }
                let o = &mut out[..rows * hd];
                gemm(rows, keys, hd, s, false, &vh[..keys * hd], false, o, false);
                for (i, orow) in o.chunks_exact(hd).enumerate() {
                    cat[(r0 + i) * d + h * hd..(r0 + i) * d + (h + 1) * hd].copy_from_slice(orow);
                }
            }
        }
        let (wo, bo) = self.proj[3];
        Ok(dense_infer(store, &cat, len, wo, bo))
    }
}

/// One attention head: `softmax(Q Kᵀ / sqrt(head_dim)) V` with an optional
/// causal mask applied before the softmax.
pub fn scaled_dot_attention<'g, F: Scalar>(
    q: Var<'g, F>,
    k: Var<'g, F>,
    v: Var<'g, F>,
    causal: bool,
) -> Result<Var<'g, F>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(Error::shape(format!(
            "inconsistent attention shapes Q {qs:?}, K {ks:?}, V {vs:?}"
        )));
    }
    let scores = q.matmul_t(&k)?.scale(1.0 / (qs[1] as f64).sqrt())?;
    let scores = if causal {
        scores.causal_mask()?
    } else {
        scores
    };
    scores.softmax_rows()?.matmul(&v)
}

/// Rotates the rows of `x: [L, head_dim]`, row `r` by position `positions[r]`.
pub fn rope_apply<F: Scalar>(x: &Tensor<F>, positions: &[usize], base: f64) -> Result<Tensor<F>> {
    let (l, hd) = match x.shape() {
        [l, hd] => (*l, *hd),
        other => {
            return Err(Error::shape(format!(
                "rope input must be [L, head_dim], got {other:?}"
            )))
        }
    };
    if hd % 2 != 0 {
        return Err(Error::shape(format!(
            "rotary embedding needs an even head dim, got {hd}"
        )));
    }
    if positions.len() != l {
        return Err(Error::shape(format!(
            "{} positions for {l} rows",
            positions.len()
        )));
    }
    let mut out = x.data().to_vec();
    rope_rotate(&mut out, hd, positions, base, false);
    Tensor::new([l, hd], out)
}
