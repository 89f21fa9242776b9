//! Real-input discrete Fourier transform along the last axis.
//!
//! Forward transform is unnormalized, inverse carries the `1/N` factor. Lengths
//! that are powers of two go through an iterative radix-2 path; everything else
//! uses direct summation.

use std::f64::consts::PI;

use super::Tensor;
use crate::error::{invalid, Result};

/// Real and imaginary parts of a spectrum, kept as two real tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum {
    pub real: Tensor,
    pub imag: Tensor,
}

/// Conjugate-symmetry residue tolerated before `idft` refuses to drop the
/// imaginary part of its reconstruction.
const IMAG_RESIDUE_TOL: f64 = 1e-6;

pub fn dft(x: &Tensor) -> Result<ComplexSpectrum> {
    let n = x.last_dim();
    let rows = x.len() / n;
    let mut re = vec![0.0; x.len()];
    let mut im = vec![0.0; x.len()];
    for r in 0..rows {
        let src = &x.data()[r * n..(r + 1) * n];
        let (fr, fi) = if n.is_power_of_two() {
            let mut buf_re = src.to_vec();
            let mut buf_im = vec![0.0; n];
            fft_radix2(&mut buf_re, &mut buf_im, false);
            (buf_re, buf_im)
        } else {
            naive_dft(src, &vec![0.0; n], false)
        };
        re[r * n..(r + 1) * n].copy_from_slice(&fr);
        im[r * n..(r + 1) * n].copy_from_slice(&fi);
    }
    Ok(ComplexSpectrum {
        real: Tensor::from_parts(x.shape().to_vec(), re),
        imag: Tensor::from_parts(x.shape().to_vec(), im),
    })
}

/// Inverse transform. The imaginary part of the reconstruction must vanish
/// (within `1e-6`), i.e. the spectrum has to come from a real signal.
pub fn idft(s: &ComplexSpectrum) -> Result<Tensor> {
    if s.real.shape() != s.imag.shape() {
        return Err(invalid(format!(
            "spectrum parts disagree: real {:?} vs imag {:?}",
            s.real.shape(),
            s.imag.shape()
        )));
    }
    let n = s.real.last_dim();
    let rows = s.real.len() / n;
    let mut out = vec![0.0; s.real.len()];
    for r in 0..rows {
        let sr = &s.real.data()[r * n..(r + 1) * n];
        let si = &s.imag.data()[r * n..(r + 1) * n];
        let (xr, xi) = if n.is_power_of_two() {
            let mut br = sr.to_vec();
            let mut bi = si.to_vec();
            fft_radix2(&mut br, &mut bi, true);
            (br, bi)
        } else {
            naive_dft(sr, si, true)
        };
        let residue = xi.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if residue >= IMAG_RESIDUE_TOL {
            return Err(invalid(format!(
                "spectrum is not conjugate-symmetric (imaginary residue {residue:e})"
            )));
        }
        out[r * n..(r + 1) * n].copy_from_slice(&xr);
    }
    Ok(Tensor::from_parts(s.real.shape().to_vec(), out))
}

fn naive_dft(re: &[f64], im: &[f64], inverse: bool) -> (Vec<f64>, Vec<f64>) {
    let n = re.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    let scale = if inverse { 1.0 / n as f64 } else { 1.0 };
    let mut out_re = vec![0.0; n];
    let mut out_im = vec![0.0; n];
    for k in 0..n {
        let (mut acc_re, mut acc_im) = (0.0, 0.0);
        for t in 0..n {
            // Reduce the index product first so the angle stays small.
            let ang = sign * 2.0 * PI * ((k * t) % n) as f64 / n as f64;
            let (s, c) = ang.sin_cos();
            acc_re += re[t] * c - im[t] * s;
            acc_im += re[t] * s + im[t] * c;
        }
        out_re[k] = acc_re * scale;
        out_im[k] = acc_im * scale;
    }
    (out_re, out_im)
}

/// In-place iterative radix-2 transform; `inverse` applies the `1/N` factor.
///
/// Panics if the length is not a power of two.
pub fn fft_radix2(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    assert!(n.is_power_of_two() && im.len() == n, "radix-2 path needs a power-of-two length");
    if n == 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let ang = sign * 2.0 * PI * k as f64 / len as f64;
                let (s, c) = ang.sin_cos();
                let (a, b) = (start + k, start + k + half);
                let tr = re[b] * c - im[b] * s;
                let ti = re[b] * s + im[b] * c;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
    if inverse {
        let scale = 1.0 / n as f64;
        re.iter_mut().for_each(|v| *v *= scale);
        im.iter_mut().for_each(|v| *v *= scale);
    }
}

/// Cosine and negated-sine matrices of the forward DFT, row-major `n×n`:
/// `real = C·x`, `imag = S·x` with `C[k,t] = cos(2πkt/n)`, `S[k,t] = −sin(2πkt/n)`.
pub fn dft_matrices(n: usize) -> (Tensor, Tensor) {
    let mut c = vec![0.0; n * n];
    let mut s = vec![0.0; n * n];
    for k in 0..n {
        for t in 0..n {
            let ang = 2.0 * PI * ((k * t) % n) as f64 / n as f64;
            c[k * n + t] = ang.cos();
            s[k * n + t] = -ang.sin();
        }
    }
    (Tensor::from_parts(vec![n, n], c), Tensor::from_parts(vec![n, n], s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Textbook double loop, kept separate from the code under test.
    fn oracle_dft(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = x.len();
        let mut re = vec![0.0; n];
        let mut im = vec![0.0; n];
        for k in 0..n {
            for (t, &v) in x.iter().enumerate() {
                let ang = -2.0 * PI * (k as f64) * (t as f64) / n as f64;
                re[k] += v * ang.cos();
                im[k] += v * ang.sin();
            }
        }
        (re, im)
    }

    fn oracle_idft(re: &[f64], im: &[f64]) -> Vec<f64> {
        let n = re.len();
        (0..n)
            .map(|t| {
                (0..n)
                    .map(|k| {
                        let ang = 2.0 * PI * (k as f64) * (t as f64) / n as f64;
                        re[k] * ang.cos() - im[k] * ang.sin()
                    })
                    .sum::<f64>()
                    / n as f64
            })
            .collect()
    }

    #[test]
    fn constant_sequence_is_dc_only() {
        let s = dft(&Tensor::from_vec(vec![1.0; 4])).unwrap();
        assert_eq!(s.real.data(), &[4.0, 0.0, 0.0, 0.0]);
        assert!(s.imag.max_abs() < 1e-15);
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let s = dft(&Tensor::from_vec(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(s.real.data(), &[1.0; 4]);
        assert!(s.imag.max_abs() < 1e-15);
    }

    #[test]
    fn random_inputs_match_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [8usize, 5, 16, 7] {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (want_re, want_im) = oracle_dft(&x);
            let s = dft(&Tensor::from_vec(x.clone())).unwrap();
            for k in 0..n {
                assert!((s.real.data()[k] - want_re[k]).abs() < 1e-9);
                assert!((s.imag.data()[k] - want_im[k]).abs() < 1e-9);
            }
            let back = idft(&s).unwrap();
            let want_back = oracle_idft(s.real.data(), s.imag.data());
            for t in 0..n {
                assert!((back.data()[t] - want_back[t]).abs() < 1e-9);
                assert!((back.data()[t] - x[t]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn roundtrip_and_dc_inverse() {
        let x = Tensor::from_vec(vec![3.0, -1.0, 2.0, 5.0]);
        let back = idft(&dft(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-9);
        let s = ComplexSpectrum {
            real: Tensor::from_vec(vec![4.0, 0.0, 0.0, 0.0]),
            imag: Tensor::zeros(&[4]),
        };
        assert_eq!(idft(&s).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn idft_rejects_mismatched_parts_and_asymmetric_spectra() {
        let s = ComplexSpectrum { real: Tensor::zeros(&[4]), imag: Tensor::zeros(&[5]) };
        assert!(idft(&s).is_err());
        let s = ComplexSpectrum {
            real: Tensor::zeros(&[4]),
            imag: Tensor::from_vec(vec![0.0, 1.0, 0.0, 0.0]),
        };
        assert!(idft(&s).is_err());
    }

    #[test]
    fn multi_row_transforms_each_row() {
        let x = Tensor::new(&[2, 3], vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let s = dft(&x).unwrap();
        assert!((s.real.data()[0] - 3.0).abs() < 1e-12);
        assert!((s.real.data()[3] - 1.0).abs() < 1e-12);
        assert!((s.real.data()[4] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matrices_agree_with_transform() {
        let (c, s) = dft_matrices(6);
        let x = [0.5, -1.0, 2.0, 0.0, 1.5, 3.0];
        let spec = dft(&Tensor::from_vec(x.to_vec())).unwrap();
        for k in 0..6 {
            let re: f64 = (0..6).map(|t| c.data()[k * 6 + t] * x[t]).sum();
            let im: f64 = (0..6).map(|t| s.data()[k * 6 + t] * x[t]).sum();
            assert!((re - spec.real.data()[k]).abs() < 1e-12);
            assert!((im - spec.imag.data()[k]).abs() < 1e-12);
        }
    }
}
