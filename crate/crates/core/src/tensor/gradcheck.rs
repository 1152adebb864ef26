use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::Result;

/// Above this many input coordinates a seeded random subsample is checked.
pub const FULL_CHECK_LIMIT: usize = 10_000;

/// Gradients below this magnitude are compared absolutely.
const REL_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, coordinate) of the worst disagreement.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences at 64-bit.
///
/// `f` builds its output inside the given graph from one variable per
/// input. Every input is treated as requiring gradients. The reported error
/// for a coordinate is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-2)`.
pub fn grad_check<Func>(f: Func, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    Func: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    grad_check_sampled(f, inputs, eps, FULL_CHECK_LIMIT, 0)
}

pub fn grad_check_sampled<Func>(
    f: Func,
    inputs: &[Tensor<f64>],
    eps: f64,
    limit: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    Func: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let analytic: Vec<Vec<f64>> = {
        let g = Graph::new();
        let vars: Vec<_> = inputs
            .iter()
            .map(|t| g.leaf(&t.clone().with_requires_grad(true)))
            .collect();
        let out = f(&g, &vars)?;
        let grads = g.backward(&out)?;
        vars.iter()
            .map(|v| {
                grads
                    .get(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; v.with_value(<[f64]>::len)])
            })
            .collect()
    };

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t)).collect();
        Ok(f(&g, &vars)?.item())
    };

    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    let selected: Vec<(usize, usize)> = if coords.len() > limit {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, coords.len(), limit).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|k| coords[k]).collect()
    } else {
        coords
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (i, j) in selected {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + eps;
        let plus = eval(&work)?;
        work[i].data_mut()[j] = orig - eps;
        let minus = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i][j];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if err > report.max_rel_err || err.is_nan() {
            report.max_rel_err = err;
            report.worst = (i, j);
        }
        report.checked += 1;
    }
    Ok(report)
}
