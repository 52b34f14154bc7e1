//! Iterative radix-2 FFT.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// In-place forward DFT of `(re, im)`; the length must be a power of two.
pub fn fft_in_place(re: &mut [f64], im: &mut [f64]) -> Result<()> {
    let n = re.len();
    if n != im.len() || !n.is_power_of_two() {
        return Err(Error::Config(alloc::format!("fft length {n} is not a power of two")));
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) };
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * core::f64::consts::PI / len as f64;
        for start in (0..n).step_by(len) {
            for k in 0..len / 2 {
                let (s, c) = libm::sincos(ang * k as f64);
                let (a, b) = (start + k, start + k + len / 2);
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
    Ok(())
}

/// `|X_k|²` for `k = 0..=n/2` of a real frame.
pub fn power_spectrum(frame: &[f64]) -> Result<Vec<f64>> {
    let mut re = frame.to_vec();
    let mut im = vec![0.0; frame.len()];
    fft_in_place(&mut re, &mut im)?;
    Ok((0..=frame.len() / 2).map(|k| re[k] * re[k] + im[k] * im[k]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_direct_dft() {
        let n = 64;
        let x: Vec<f64> = (0..n).map(|i| libm::sin(i as f64 * 0.3) + 0.1 * i as f64).collect();
        let p = power_spectrum(&x).unwrap();
        for k in 0..=n / 2 {
            let (mut r, mut im) = (0.0, 0.0);
            for (t, &v) in x.iter().enumerate() {
                let a = -2.0 * core::f64::consts::PI * (k * t) as f64 / n as f64;
                r += v * libm::cos(a);
                im += v * libm::sin(a);
            }
            assert!((p[k] - (r * r + im * im)).abs() < 1e-8 * (1.0 + p[k]));
        }
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert!(power_spectrum(&[0.0; 400]).is_err());
    }
}
