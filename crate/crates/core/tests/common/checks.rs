//! Measurements shared by the integration tests and the acceptance suite.

use hyena_distill::mixers::{AttentionConfig, HyenaMixer, Mixer, MixerConfig};
use hyena_distill::model::{Capture, Model, ModelConfig};
use hyena_distill::params::{Bound, ParamKind, ParamStore};
use hyena_distill::sigproc::{
    depthwise_causal_conv, fft_causal_conv, FilterResponse, StateSpaceSystem,
};
use hyena_distill::tensor::{grad_check, grad_check_sampled, GradCheckReport};
use hyena_distill::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    direct_causal_conv, direct_depthwise, max_abs_diff, probe, small_hyena, ssm_impulse_by_powers,
    uniform,
};

pub type OpFn = Box<dyn for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: fn(u64) -> Vec<Tensor<f64>>,
    pub f: OpFn,
}

fn case(
    name: &'static str,
    inputs: fn(u64) -> Vec<Tensor<f64>>,
    f: impl for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>> + 'static,
) -> OpCase {
    OpCase {
        name,
        inputs,
        f: Box::new(f),
    }
}

fn positive(shape: &[usize], seed: u64) -> Tensor<f64> {
    let t = uniform(shape, seed);
    Tensor::new(
        shape.to_vec(),
        t.data().iter().map(|v| 1.25 + 0.75 * v).collect(),
    )
    .unwrap()
}

/// Every differentiable graph operation, each reduced to a scalar.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case(
            "matmul",
            |s| vec![uniform(&[3, 4], s), uniform(&[4, 5], s + 1)],
            |_, v| v[0].matmul(&v[1]),
        ),
        case(
            "matmul_t",
            |s| vec![uniform(&[3, 4], s), uniform(&[5, 4], s + 1)],
            |_, v| v[0].matmul_t(&v[1]),
        ),
        case(
            "add",
            |s| vec![uniform(&[3, 4], s), uniform(&[3, 4], s + 1)],
            |_, v| v[0].add(&v[1]),
        ),
        case(
            "sub",
            |s| vec![uniform(&[3, 4], s), uniform(&[3, 4], s + 1)],
            |_, v| v[0].sub(&v[1]),
        ),
        case(
            "mul",
            |s| vec![uniform(&[3, 4], s), uniform(&[3, 4], s + 1)],
            |_, v| v[0].mul(&v[1]),
        ),
        case(
            "scale",
            |s| vec![uniform(&[3, 4], s)],
            |_, v| v[0].scale(-1.7),
        ),
        case(
            "add_scalar",
            |s| vec![uniform(&[3, 4], s)],
            |_, v| v[0].add_scalar(0.3)?.square(),
        ),
        case(
            "gelu",
            |s| vec![uniform(&[3, 4], s).scaled(3.0)],
            |_, v| v[0].gelu(),
        ),
        case(
            "silu",
            |s| vec![uniform(&[3, 4], s).scaled(3.0)],
            |_, v| v[0].silu(),
        ),
        case("exp", |s| vec![uniform(&[3, 4], s)], |_, v| v[0].exp()),
        case("log", |s| vec![positive(&[3, 4], s)], |_, v| v[0].log()),
        case(
            "sin",
            |s| vec![uniform(&[3, 4], s).scaled(3.0)],
            |_, v| v[0].sin(),
        ),
        case(
            "softplus",
            |s| vec![uniform(&[3, 4], s).scaled(4.0)],
            |_, v| v[0].softplus(),
        ),
        case(
            "square",
            |s| vec![uniform(&[3, 4], s)],
            |_, v| v[0].square(),
        ),
        case(
            "add_row",
            |s| vec![uniform(&[3, 4], s), uniform(&[4], s + 1)],
            |_, v| v[0].add_row(&v[1]),
        ),
        case(
            "layer_norm",
            |s| {
                vec![
                    uniform(&[3, 6], s).scaled(2.0),
                    uniform(&[6], s + 1),
                    uniform(&[6], s + 2),
                ]
            },
            |_, v| v[0].layer_norm(&v[1], &v[2], 1e-5),
        ),
        case(
            "softmax_rows",
            |s| vec![uniform(&[3, 5], s).scaled(2.0)],
            |_, v| v[0].softmax_rows(),
        ),
        case(
            "log_softmax_rows",
            |s| vec![uniform(&[3, 5], s).scaled(2.0)],
            |_, v| v[0].log_softmax_rows(),
        ),
        case(
            "causal_mask",
            |s| vec![uniform(&[4, 4], s).scaled(2.0)],
            |_, v| v[0].causal_mask()?.softmax_rows(),
        ),
        case(
            "sum",
            |s| vec![uniform(&[3, 4], s)],
            |_, v| v[0].square()?.sum(),
        ),
        case(
            "mean",
            |s| vec![uniform(&[3, 4], s)],
            |_, v| v[0].square()?.mean(),
        ),
        case(
            "sum_axis0",
            |s| vec![uniform(&[3, 4], s)],
            |_, v| v[0].sum_axis(0),
        ),
        case(
            "sum_axis1",
            |s| vec![uniform(&[3, 4], s)],
            |_, v| v[0].sum_axis(1),
        ),
        case(
            "mean_axis0",
            |s| vec![uniform(&[3, 4], s)],
            |_, v| v[0].mean_axis(0),
        ),
        case(
            "mean_axis1",
            |s| vec![uniform(&[3, 4], s)],
            |_, v| v[0].mean_axis(1),
        ),
        case(
            "slice_cols",
            |s| vec![uniform(&[3, 5], s)],
            |_, v| v[0].slice_cols(1, 3),
        ),
        case(
            "concat_cols",
            |s| vec![uniform(&[3, 2], s), uniform(&[3, 3], s + 1)],
            |g, v| g.concat_cols(&[v[0], v[1]]),
        ),
        case(
            "transpose",
            |s| vec![uniform(&[3, 4], s)],
            |_, v| v[0].transpose(),
        ),
        case(
            "reshape",
            |s| vec![uniform(&[3, 4], s)],
            |_, v| v[0].reshape([2, 6]),
        ),
        case(
            "rope",
            |s| vec![uniform(&[5, 4], s)],
            |_, v| v[0].rope(&[0, 1, 2, 7, 30], 10_000.0),
        ),
        case(
            "fft_causal_conv",
            |s| vec![uniform(&[20, 3], s), uniform(&[20, 3], s + 1)],
            |_, v| v[0].fft_causal_conv(&v[1]),
        ),
        case(
            "depthwise_causal_conv",
            |s| vec![uniform(&[8, 3], s), uniform(&[3, 3], s + 1)],
            |_, v| v[0].depthwise_causal_conv(&v[1]),
        ),
        case(
            "cross_entropy",
            |s| vec![uniform(&[4, 6], s).scaled(2.0)],
            |_, v| v[0].cross_entropy(&[0, 5, 2, 3]),
        ),
        case(
            "embedding",
            |s| vec![uniform(&[6, 3], s)],
            |g, v| g.embedding(&v[0], &[0, 2, 2, 5]),
        ),
        case(
            "decay_window",
            |s| vec![uniform(&[3], s), uniform(&[1], s + 1)],
            |g, v| g.decay_window(&v[0], &v[1], 6),
        ),
    ]
}

trait Scaled {
    fn scaled(self, c: f64) -> Self;
}

impl Scaled for Tensor<f64> {
    fn scaled(self, c: f64) -> Self {
        let shape = self.shape().to_vec();
        Tensor::new(shape, self.data().iter().map(|v| v * c).collect()).unwrap()
    }
}

/// Worst relative gradient error of `case` over `seeds`.
pub fn check_op(case: &OpCase, seeds: std::ops::Range<u64>) -> Result<GradCheckReport> {
    let mut worst: Option<GradCheckReport> = None;
    for seed in seeds {
        let r = grad_check(
            |g, v| {
                let out = (case.f)(g, v)?;
                if out.with_value(<[f64]>::len) == 1 {
                    Ok(out)
                } else {
                    probe(g, out, seed)
                }
            },
            &(case.inputs)(seed),
            1e-5,
        )?;
        if worst
            .as_ref()
            .is_none_or(|w| r.max_rel_err > w.max_rel_err || r.max_rel_err.is_nan())
        {
            worst = Some(r);
        }
    }
    Ok(worst.expect("at least one seed"))
}

/// Mixer with its trainable parameters as leading grad-check inputs.
pub struct MixerProbe {
    pub mixer: Mixer,
    pub store: ParamStore<f64>,
    pub ids: Vec<hyena_distill::params::ParamId>,
}

impl MixerProbe {
    pub fn new(cfg: &MixerConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mixer = Mixer::build(cfg, "m", &mut store, seed).unwrap();
        // Random (not identity-like) parameters so every path carries gradient.
        let ids: Vec<_> = store
            .ids()
            .filter(|&id| store.entry(id).kind != ParamKind::Buffer)
            .collect();
        for (k, &id) in ids.iter().enumerate() {
            let shape = store.get(id).shape().to_vec();
            let fresh = uniform(&shape, seed * 101 + k as u64).scaled(0.5);
            store.get_mut(id).data_mut().copy_from_slice(fresh.data());
        }
        MixerProbe { mixer, store, ids }
    }

    pub fn inputs(&self, x: Tensor<f64>) -> Vec<Tensor<f64>> {
        std::iter::once(x)
            .chain(self.ids.iter().map(|&id| self.store.get(id).clone()))
            .collect()
    }

    pub fn check(&self, x: Tensor<f64>, seed: u64) -> Result<GradCheckReport> {
        let len = x.shape()[0];
        let positions: Vec<usize> = (0..len).collect();
        grad_check(
            |g, v| {
                let b = Bound::new(g, &self.store, None);
                for (k, &id) in self.ids.iter().enumerate() {
                    b.bind(id, v[k + 1])?;
                }
                let out = self.mixer.forward(&b, v[0], &positions)?;
                probe(g, out, seed)
            },
            &self.inputs(x),
            1e-5,
        )
    }
}

pub fn hyena_mixer_grad(seed: u64) -> Result<GradCheckReport> {
    let cfg = MixerConfig::Hyena(small_hyena(4));
    MixerProbe::new(&cfg, seed).check(uniform(&[8, 4], seed + 7), seed)
}

pub fn attention_mixer_grad(seed: u64) -> Result<GradCheckReport> {
    let cfg = MixerConfig::Attention(AttentionConfig::new(4, 2));
    MixerProbe::new(&cfg, seed).check(uniform(&[6, 4], seed + 7), seed)
}

/// Next-token loss of a one-layer model against every parameter, checked
/// on a seeded subsample of coordinates.
pub fn block_grad(mixer: MixerConfig, seed: u64, sample: usize) -> Result<GradCheckReport> {
    let cfg = ModelConfig {
        mixer,
        n_layers: 1,
        ..ModelConfig::attention(4, 2, 1, 16).with_seed(seed)
    };
    let model = Model::<f64>::build(cfg)?;
    let store = model.params();
    let ids: Vec<_> = store
        .ids()
        .filter(|&id| store.entry(id).kind != ParamKind::Buffer)
        .collect();
    let inputs: Vec<Tensor<f64>> = ids.iter().map(|&id| store.get(id).clone()).collect();
    let tokens = [256usize, 3, 70, 70, 9, 200, 4];
    grad_check_sampled(
        |g, v| {
            let b = Bound::new(g, store, None);
            for (k, &id) in ids.iter().enumerate() {
                b.bind(id, v[k])?;
            }
            let trace = model.forward_graph(&b, &tokens[..6], None, true)?;
            trace
                .logits
                .expect("all layers ran")
                .cross_entropy(&tokens[1..])
        },
        &inputs,
        1e-5,
        sample,
        seed,
    )
}

pub fn random_stable_matrix(s: usize, radius_bound: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let a: Vec<f64> = (0..s * s).map(|_| rng.random_range(-1.0..1.0)).collect();
    let fro = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    a.into_iter().map(|v| v * radius_bound / fro).collect()
}

/// Largest deviation between the stepwise recurrence and the convolution
/// with the impulse response, for one seeded system of state size `s`.
pub fn ssm_duality_err(s: usize, len: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_stable_matrix(s, 0.9, &mut rng);
    let b: Vec<f64> = (0..s).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c: Vec<f64> = (0..s).map(|_| rng.random_range(-1.0..1.0)).collect();
    let d = rng.random_range(-1.0..1.0);
    let u: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();

    let sys = StateSpaceSystem::new(a.clone(), b.clone(), c.clone(), d)?;
    let y = sys.recurrence(&u);
    let h_oracle = ssm_impulse_by_powers(&a, &b, &c, d, s, len);
    let h = sys.impulse_response(len)?;
    let by_fft = fft_causal_conv(&Tensor::new([len, 1], u.clone())?, &h)?;
    let by_direct = direct_causal_conv(&u, &h_oracle, len, 1);
    Ok(max_abs_diff(&y, by_fft.data())
        .max(max_abs_diff(&y, &by_direct))
        .max(max_abs_diff(h.tensor().data(), &h_oracle)))
}

/// (fft_causal_conv, depthwise_causal_conv) deviation from direct sums.
pub fn conv_oracle_err(len: usize, seed: u64) -> Result<(f64, f64)> {
    let ch = 3;
    let u = uniform(&[len, ch], seed);
    let h = uniform(&[len, ch], seed + 1);
    let k = uniform(&[3, ch], seed + 2);
    let y = fft_causal_conv(&u, &FilterResponse::new(h.clone())?)?;
    let fft_err = max_abs_diff(y.data(), &direct_causal_conv(u.data(), h.data(), len, ch));
    let y = depthwise_causal_conv(&u, &k)?;
    let dw_err = max_abs_diff(y.data(), &direct_depthwise(u.data(), k.data(), len, 3, ch));
    Ok((fft_err, dw_err))
}

#[derive(Debug, Clone, Copy)]
pub struct Causality {
    /// Largest logit change strictly before the perturbed position.
    pub leak: f64,
    /// Smallest largest-change at the perturbed position.
    pub min_effect: f64,
    pub trials: usize,
}

/// Changes one token at a time and measures how the logits move.
pub fn causality(cfg: ModelConfig, len: usize, trials: usize, seed: u64) -> Result<Causality> {
    let model = Model::<f64>::build(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..256)).collect();
    let base = model.forward(&tokens, Capture::None)?.logits;
    let vocab = base.shape()[1];
    let mut out = Causality {
        leak: 0.0,
        min_effect: f64::INFINITY,
        trials,
    };
    for _ in 0..trials {
        let t = rng.random_range(0..len);
        let mut changed = tokens.clone();
        changed[t] = (tokens[t] + 1 + rng.random_range(0..255)) % 256;
        let moved = model.forward(&changed, Capture::None)?.logits;
        out.leak = out.leak.max(max_abs_diff(
            &base.data()[..t * vocab],
            &moved.data()[..t * vocab],
        ));
        let at = max_abs_diff(
            &base.data()[t * vocab..(t + 1) * vocab],
            &moved.data()[t * vocab..(t + 1) * vocab],
        );
        out.min_effect = out.min_effect.min(at);
    }
    Ok(out)
}

/// Hyena operator output with identity projections, delta short kernels and
/// a delta long filter, against `x * x * x`. Returns the number of entries
/// that differ in any bit.
pub fn hyena_identity_mismatches(len: usize, d: usize, seed: u64) -> Result<usize> {
    let cfg = small_hyena(d);
    let mut store = ParamStore::<f64>::new();
    let mixer = HyenaMixer::build(cfg.clone(), "h", &mut store, seed)?;
    let eye: Vec<f64> = (0..d * d)
        .map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 })
        .collect();
    for j in 0..cfg.order {
        store.set(&format!("h.in_proj.{j}.weight"), eye.clone())?;
        store.set(&format!("h.in_proj.{j}.bias"), vec![0.0; d])?;
        let mut k = vec![0.0; cfg.short_filter_len * d];
        k[..d].iter_mut().for_each(|v| *v = 1.0);
        store.set(&format!("h.short_filter.{j}"), k)?;
    }
    // Constant-one filter network output, and a window that is exactly 1 at
    // n = 0 and underflows to exactly 0 afterwards.
    let last = cfg.filter_ffn_depth - 1;
    let width = cfg.n_filters() * d;
    let fan_in = store
        .by_name(&format!("h.filter.ffn.{last}.weight"))
        .unwrap()
        .len()
        / width;
    store.set(
        &format!("h.filter.ffn.{last}.weight"),
        vec![0.0; fan_in * width],
    )?;
    store.set(&format!("h.filter.ffn.{last}.bias"), vec![1.0; width])?;
    store.set("h.filter.window.rates", vec![1e6; width])?;
    store.set("h.filter.window.bias", vec![0.0])?;
    store.set("h.out_proj.weight", eye)?;
    store.set("h.out_proj.bias", vec![0.0; d])?;

    let x = uniform(&[len, d], seed + 3).scaled(2.0);
    let g = Graph::new();
    let b = Bound::new(&g, &store, None);
    let y = mixer.operator(&b, g.leaf(&x))?.value();
    Ok(x.data()
        .iter()
        .zip(&y)
        .filter(|(x, y)| (*x * *x * *x).to_bits() != y.to_bits())
        .count())
}
