use super::fft::fft_in_place;
use super::{Signal, C64};
use crate::error::{Error, Result};

/// Below this many multiply-adds the direct sum beats the FFT path.
const DIRECT_LIMIT: usize = 1 << 14;

/// Full linear convolution, length `len(x) + len(h) - 1`.
pub fn convolve(x: &Signal, h: &[f64]) -> Result<Signal> {
    if x.is_empty() || h.is_empty() {
        return Err(Error::InvalidInput("convolution of an empty sequence".into()));
    }
    Signal::new(convolve_slices(x.samples(), h), x.sample_rate())
}

pub fn convolve_slices(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    if a.len().min(b.len()) <= 32 || a.len() * b.len() <= DIRECT_LIMIT {
        convolve_direct(a, b)
    } else {
        convolve_fft(a, b)
    }
}

fn convolve_direct(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (o, &y) in out[i..].iter_mut().zip(b) {
            *o += x * y;
        }
    }
    out
}

fn convolve_fft(a: &[f64], b: &[f64]) -> Vec<f64> {
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    // pack a in the real part and b in the imaginary part
    let mut buf = vec![C64::default(); n];
    for (v, &x) in buf.iter_mut().zip(a) {
        v.re = x;
    }
    for (v, &y) in buf.iter_mut().zip(b) {
        v.im = y;
    }
    fft_in_place(&mut buf, false).expect("power of two");
    let mut prod = vec![C64::default(); n];
    for k in 0..n {
        let z = buf[k];
        let zc = buf[(n - k) % n].conj();
        let fa = (z + zc) * 0.5;
        let fb = (z - zc) * C64::new(0.0, -0.5);
        prod[k] = fa * fb;
    }
    fft_in_place(&mut prod, true).expect("power of two");
    prod.truncate(out_len);
    prod.into_iter().map(|v| v.re).collect()
}
