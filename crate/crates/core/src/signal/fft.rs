use std::cell::RefCell;

use rustfft::FftPlanner;

use super::C64;
use crate::error::{Error, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// In-place DFT. The forward transform is unnormalized; the inverse carries
/// the 1/N factor so that `ifft(fft(x)) == x`.
pub fn fft_in_place(x: &mut [C64], inverse: bool) -> Result<()> {
    let n = x.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(n));
    }
    let plan = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    });
    plan.process(x);
    if inverse {
        let scale = 1.0 / n as f64;
        for v in x.iter_mut() {
            *v *= scale;
        }
    }
    Ok(())
}

pub fn fft(x: &[C64], inverse: bool) -> Result<Vec<C64>> {
    let mut out = x.to_vec();
    fft_in_place(&mut out, inverse)?;
    Ok(out)
}

/// Inverse DFT of `spec` returning only the real part.
pub fn ifft_real_in_place(spec: &mut [C64], out: &mut [f64]) -> Result<()> {
    fft_in_place(spec, true)?;
    for (o, v) in out.iter_mut().zip(spec.iter()) {
        *o = v.re;
    }
    Ok(())
}
