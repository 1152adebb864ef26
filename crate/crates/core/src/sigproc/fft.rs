use num_complex::Complex;

use crate::tensor::Scalar;
use crate::{Error, Result};

/// Radix-2 iterative FFT with precomputed twiddles and bit-reversal table.
///
/// Forward transform is unnormalised, `X[k] = sum_n x[n] e^{-2 pi i k n / N}`;
/// the inverse divides by `N`.
#[derive(Debug, Clone)]
pub struct FftPlan<F> {
    n: usize,
    twiddles: Vec<Complex<F>>,
    rev: Vec<usize>,
}

impl<F: Scalar> FftPlan<F> {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::shape(format!(
                "FFT length must be a power of two, got {n}"
            )));
        }
        let bits = n.trailing_zeros();
        let rev = (0..n)
            .map(|i| {
                if bits == 0 {
                    0
                } else {
                    i.reverse_bits() >> (usize::BITS - bits)
                }
            })
            .collect();
        // Twiddles are computed in f64 and rounded once.
        let twiddles = (0..n / 2)
            .map(|k| {
                let angle = -2.0 * std::f64::consts::PI * k as f64 / n as f64;
                Complex::new(F::c(angle.cos()), F::c(angle.sin()))
            })
            .collect();
        Ok(FftPlan { n, twiddles, rev })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn process(&self, buf: &mut [Complex<F>], inverse: bool) {
        assert_eq!(buf.len(), self.n, "buffer length does not match the plan");
        let n = self.n;
        for i in 0..n {
            let j = self.rev[i];
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut half = 1;
        while half < n {
            let stride = n / (2 * half);
            for start in (0..n).step_by(2 * half) {
                for k in 0..half {
                    let mut w = self.twiddles[k * stride];
                    if inverse {
                        w = w.conj();
                    }
                    let a = buf[start + k];
                    let b = buf[start + k + half] * w;
                    buf[start + k] = a + b;
                    buf[start + k + half] = a - b;
                }
            }
            half *= 2;
        }
        if inverse {
            let scale = F::one() / F::c(n as f64);
            buf.iter_mut().for_each(|z| *z = z.scale(scale));
        }
    }
}

/// One-shot transform of a power-of-two length vector.
pub fn fft<F: Scalar>(x: &[Complex<F>], inverse: bool) -> Result<Vec<Complex<F>>> {
    let plan = FftPlan::new(x.len())?;
    let mut buf = x.to_vec();
    plan.process(&mut buf, inverse);
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64) -> Complex<f64> {
        Complex::new(re, 0.0)
    }

    #[test]
    fn impulse_gives_flat_spectrum() {
        let out = fft(&[c(1.0), c(0.0), c(0.0), c(0.0)], false).unwrap();
        for z in out {
            assert_eq!(z, c(1.0));
        }
    }

    #[test]
    fn constant_is_dc_only() {
        let out = fft(&[c(2.5); 8], false).unwrap();
        assert!((out[0] - c(20.0)).norm() < 1e-12);
        assert!(out[1..].iter().all(|z| z.norm() < 1e-12));
    }

    #[test]
    fn round_trip_256() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<Complex<f64>> = (0..256)
            .map(|_| Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let back = fft(&fft(&x, false).unwrap(), true).unwrap();
        let err = x
            .iter()
            .zip(&back)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn matches_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<Complex<f64>> = (0..16).map(|_| c(rng.random_range(-1.0..1.0))).collect();
        let fast = fft(&x, false).unwrap();
        for (k, got) in fast.iter().enumerate() {
            let naive: Complex<f64> = x
                .iter()
                .enumerate()
                .map(|(n, &v)| {
                    v * Complex::from_polar(
                        1.0,
                        -2.0 * std::f64::consts::PI * (k * n) as f64 / 16.0,
                    )
                })
                .sum();
            assert!((naive - got).norm() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert!(matches!(
            fft::<f64>(&[c(1.0); 6], false),
            Err(Error::Shape(_))
        ));
        assert!(fft::<f64>(&[], false).is_err());
        assert_eq!(fft(&[c(3.0)], false).unwrap(), vec![c(3.0)]);
    }
}
