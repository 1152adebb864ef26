use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::FilterResponse;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Single-input single-output linear time-invariant system
///
/// ```text
/// x[n] = A x[n-1] + B u[n],   x[-1] = 0
/// y[n] = C x[n]   + D u[n]
/// ```
///
/// whose impulse response is `h[n] = C A^n B + D delta[n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceSystem<F> {
    a: Vec<F>,
    b: Vec<F>,
    c: Vec<F>,
    d: F,
    dim: usize,
}

impl<F: Scalar> StateSpaceSystem<F> {
    /// `a` is row-major `[s, s]`, `b` is `[s, 1]`, `c` is `[1, s]`.
    pub fn new(a: Vec<F>, b: Vec<F>, c: Vec<F>, d: F) -> Result<Self> {
        let dim = b.len();
        if dim == 0 {
            return Err(Error::shape("state dimension must be positive"));
        }
        if a.len() != dim * dim || c.len() != dim {
            return Err(Error::shape(format!(
                "inconsistent state-space dims: A has {} entries, B {}, C {}",
                a.len(),
                b.len(),
                c.len()
            )));
        }
        Ok(StateSpaceSystem { a, b, c, d, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn apply_a(&self, x: &[F], out: &mut [F]) {
        let s = self.dim;
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.a[i * s..(i + 1) * s]
                .iter()
                .zip(x)
                .map(|(&a, &x)| a * x)
                .sum();
        }
    }

    fn readout(&self, x: &[F]) -> F {
        self.c.iter().zip(x).map(|(&c, &x)| c * x).sum()
    }

    /// `h[0] = CB + D`, `h[n] = C A^n B`, by propagating the state rather
    /// than forming matrix powers.
    pub fn impulse_response(&self, len: usize) -> Result<FilterResponse<F>> {
        if len == 0 {
            return Err(Error::shape("impulse response length must be positive"));
        }
        let mut h = Vec::with_capacity(len);
        let mut x = self.b.clone();
        let mut next = vec![F::zero(); self.dim];
        h.push(self.readout(&x) + self.d);
        for _ in 1..len {
            self.apply_a(&x, &mut next);
            std::mem::swap(&mut x, &mut next);
            h.push(self.readout(&x));
        }
        FilterResponse::new(Tensor::new([len, 1], h)?)
    }

    /// Stepwise evaluation of the recurrence from a zero state.
    pub fn recurrence(&self, u: &[F]) -> Vec<F> {
        let mut x = vec![F::zero(); self.dim];
        let mut next = vec![F::zero(); self.dim];
        u.iter()
            .map(|&un| {
                self.apply_a(&x, &mut next);
                for (n, &b) in next.iter_mut().zip(&self.b) {
                    *n += b * un;
                }
                std::mem::swap(&mut x, &mut next);
                self.readout(&x) + self.d * un
            })
            .collect()
    }

    /// Spectral radius of `A` estimated by power iteration: the geometric
    /// mean growth of a normalised iterate over the second half of `iters`.
    pub fn spectral_radius(&self, iters: usize) -> f64 {
        let s = self.dim;
        let mut v: Vec<f64> = (0..s).map(|i| 1.0 + 0.1 * i as f64).collect();
        let a: Vec<f64> = self.a.iter().map(|x| x.f64()).collect();
        let mut log_growth = 0.0;
        let mut counted = 0;
        for it in 0..iters.max(2) {
            let w: Vec<f64> = (0..s)
                .map(|i| {
                    a[i * s..(i + 1) * s]
                        .iter()
                        .zip(&v)
                        .map(|(p, q)| p * q)
                        .sum()
                })
                .collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            if it >= iters / 2 {
                log_growth += norm.ln();
                counted += 1;
            }
            v = w.into_iter().map(|x| x / norm).collect();
        }
        (log_growth / counted as f64).exp()
    }

    /// Random system with `A = radius * Q`, `Q` orthogonal, so every
    /// eigenvalue of `A` has modulus exactly `radius`.
    pub fn random_stable(dim: usize, radius: f64, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::shape("state dimension must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let mut q: Vec<Vec<f64>> = (0..dim)
            .map(|_| (0..dim).map(|_| normal()).collect())
            .collect();
        // Modified Gram-Schmidt on the rows.
        for i in 0..dim {
            for j in 0..i {
                let dot: f64 = q[i].iter().zip(&q[j]).map(|(a, b)| a * b).sum();
                let qj = q[j].clone();
                q[i].iter_mut().zip(&qj).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = q[i].iter().map(|x| x * x).sum::<f64>().sqrt();
            q[i].iter_mut().for_each(|x| *x /= norm);
        }
        let a = q.into_iter().flatten().map(|x| F::c(radius * x)).collect();
        let b = (0..dim).map(|_| F::c(normal())).collect();
        let c = (0..dim).map(|_| F::c(normal())).collect();
        let d = F::c(normal());
        Self::new(a, b, c, d)
    }
}
