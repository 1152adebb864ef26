//! Causal convolutions over `[L, ch]` row-major signals, one independent
//! filter per channel.

use num_complex::Complex;
use num_traits::Zero;

use super::fft::FftPlan;
use super::FilterResponse;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// `y[n, c] = sum_{m <= n} h[m, c] u[n - m, c]`.
///
/// Both signals are zero-padded to the next power of two `>= 2L` so the
/// circular product never wraps. Two real channels share one complex
/// transform (real part / imaginary part) and are separated through
/// conjugate symmetry. Filters whose nonzero support is only a few taps
/// long are summed directly instead.
pub(crate) fn fft_causal_conv_cols<F: Scalar>(u: &[F], h: &[F], l: usize, ch: usize) -> Vec<F> {
    debug_assert_eq!(u.len(), l * ch);
    debug_assert_eq!(h.len(), l * ch);
    let n = (2 * l).next_power_of_two();
    let support = h
        .iter()
        .rposition(|v| *v != F::zero())
        .map_or(0, |i| i / ch + 1);
    if support <= 2 * n.trailing_zeros() as usize {
        return depthwise_causal_conv_cols(u, &h[..support * ch], l, support, ch);
    }
    let plan = FftPlan::new(n).expect("padded length is a power of two");
    let mut zu = vec![Complex::<F>::zero(); n];
    let mut zh = vec![Complex::<F>::zero(); n];
    let mut zy = vec![Complex::<F>::zero(); n];
    let mut out = vec![F::zero(); l * ch];
    let half = F::c(0.5);
    let mut c = 0;
    while c < ch {
        let pair = c + 1 < ch;
        for t in 0..n {
            if t < l {
                let second = |s: &[F]| if pair { s[t * ch + c + 1] } else { F::zero() };
                zu[t] = Complex::new(u[t * ch + c], second(u));
                zh[t] = Complex::new(h[t * ch + c], second(h));
            } else {
                zu[t] = Complex::zero();
                zh[t] = Complex::zero();
            }
        }
        plan.process(&mut zu, false);
        plan.process(&mut zh, false);
        for k in 0..n {
            let kk = (n - k) % n;
            let (u_k, u_kk) = (zu[k], zu[kk].conj());
            let (h_k, h_kk) = (zh[k], zh[kk].conj());
            let ua = (u_k + u_kk).scale(half);
            let ha = (h_k + h_kk).scale(half);
            // (z - conj) / 2i
            let ub = (u_k - u_kk) * Complex::new(F::zero(), -half);
            let hb = (h_k - h_kk) * Complex::new(F::zero(), -half);
            zy[k] = ua * ha + Complex::new(F::zero(), F::one()) * (ub * hb);
        }
        plan.process(&mut zy, true);
        for t in 0..l {
            out[t * ch + c] = zy[t].re;
            if pair {
                out[t * ch + c + 1] = zy[t].im;
            }
        }
        c += 2;
    }
    out
}

fn reverse_rows<F: Copy>(x: &[F], l: usize, ch: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(x.len());
    for t in (0..l).rev() {
        out.extend_from_slice(&x[t * ch..(t + 1) * ch]);
    }
    out
}

/// Anti-causal correlation `r[n, c] = sum_{m >= n} g[m, c] h[m - n, c]`,
/// the adjoint of [`fft_causal_conv_cols`] in either argument.
pub(crate) fn fft_causal_corr_cols<F: Scalar>(g: &[F], h: &[F], l: usize, ch: usize) -> Vec<F> {
    let rev = reverse_rows(g, l, ch);
    reverse_rows(&fft_causal_conv_cols(&rev, h, l, ch), l, ch)
}

/// `y[n, c] = sum_{j < w} k[j, c] x[n - j, c]` with `x[< 0] = 0`.
pub(crate) fn depthwise_causal_conv_cols<F: Scalar>(
    x: &[F],
    k: &[F],
    l: usize,
    w: usize,
    ch: usize,
) -> Vec<F> {
    let mut out = vec![F::zero(); l * ch];
    for n in 0..l {
        let row = &mut out[n * ch..(n + 1) * ch];
        for j in 0..w.min(n + 1) {
            let xr = &x[(n - j) * ch..(n - j + 1) * ch];
            let kr = &k[j * ch..(j + 1) * ch];
            for c in 0..ch {
                row[c] += kr[c] * xr[c];
            }
        }
    }
    out
}

fn dims(t: &Tensor<impl Scalar>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [l, c] => Ok((*l, *c)),
        other => Err(Error::shape(format!(
            "{what} must be [L, channels], got {other:?}"
        ))),
    }
}

/// Long causal convolution of `u: [L, ch]` with a per-channel impulse
/// response of the same shape.
pub fn fft_causal_conv<F: Scalar>(u: &Tensor<F>, h: &FilterResponse<F>) -> Result<Tensor<F>> {
    let (l, ch) = dims(u, "input")?;
    if h.tensor().shape() != u.shape() {
        return Err(Error::shape(format!(
            "filter shape {:?} does not match input {:?}",
            h.tensor().shape(),
            u.shape()
        )));
    }
    Tensor::new(
        [l, ch],
        fft_causal_conv_cols(u.data(), h.tensor().data(), l, ch),
    )
}

/// Short strictly-causal depthwise convolution with a `[w, ch]` kernel.
pub fn depthwise_causal_conv<F: Scalar>(x: &Tensor<F>, k: &Tensor<F>) -> Result<Tensor<F>> {
    let (l, ch) = dims(x, "input")?;
    let (w, kch) = dims(k, "kernel")?;
    if kch != ch {
        return Err(Error::shape(format!(
            "kernel has {kch} channels, input has {ch}"
        )));
    }
    if w > l {
        return Err(Error::shape(format!(
            "kernel length {w} exceeds sequence length {l}"
        )));
    }
    Tensor::new(
        [l, ch],
        depthwise_causal_conv_cols(x.data(), k.data(), l, w, ch),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    fn rand(shape: [usize; 2], seed: u64) -> Tensor<f64> {
        Tensor::create(
            shape,
            Init::Uniform {
                lo: -1.0,
                hi: 1.0,
                seed,
            },
        )
        .unwrap()
    }

    fn delta(l: usize, ch: usize, at: usize) -> FilterResponse<f64> {
        let mut h = Tensor::zeros([l, ch]).unwrap();
        for c in 0..ch {
            h.data_mut()[at * ch + c] = 1.0;
        }
        FilterResponse::new(h).unwrap()
    }

    #[test]
    fn identity_filter() {
        for ch in [1, 2, 3] {
            let u = rand([9, ch], 1);
            let y = fft_causal_conv(&u, &delta(9, ch, 0)).unwrap();
            for (a, b) in u.data().iter().zip(y.data()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn shift_filter_delays() {
        let u = rand([8, 3], 2);
        let y = fft_causal_conv(&u, &delta(8, 3, 1)).unwrap();
        assert!(y.data()[..3].iter().all(|v| v.abs() < 1e-14));
        for t in 1..8 {
            for c in 0..3 {
                assert!((y.data()[t * 3 + c] - u.data()[(t - 1) * 3 + c]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn depthwise_identity_and_shift() {
        let x = rand([10, 2], 3);
        let mut k = Tensor::zeros([3, 2]).unwrap();
        k.data_mut()[0] = 1.0;
        k.data_mut()[1] = 1.0;
        assert!(depthwise_causal_conv(&x, &k).unwrap().bitwise_eq(&x));
        let mut k = Tensor::zeros([3, 2]).unwrap();
        k.data_mut()[2] = 1.0;
        k.data_mut()[3] = 1.0;
        let y = depthwise_causal_conv(&x, &k).unwrap();
        assert_eq!(&y.data()[..2], &[0.0, 0.0]);
        assert_eq!(&y.data()[2..], &x.data()[..18]);
    }

    #[test]
    fn shape_errors() {
        let x = rand([4, 2], 4);
        assert!(depthwise_causal_conv(&x, &rand([5, 2], 5)).is_err());
        assert!(depthwise_causal_conv(&x, &rand([3, 3], 5)).is_err());
        assert!(fft_causal_conv(&x, &delta(5, 2, 0)).is_err());
    }
}
