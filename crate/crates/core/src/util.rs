/// Derives an independent child seed from a base seed and a list of tags
/// (SplitMix64 finalizer chained over the tags).
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut z = base ^ 0x9e37_79b9_7f4a_7c15;
    for &t in tags {
        z = mix(z ^ mix(t.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    mix(z)
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Converts a power ratio to dB, clamped to +-150 dB.
pub fn db_clamped(num: f64, den: f64) -> f64 {
    const CLAMP: f64 = 150.0;
    if den <= 0.0 {
        return if num > 0.0 { CLAMP } else { -CLAMP };
    }
    if num <= 0.0 {
        return -CLAMP;
    }
    (10.0 * (num / den).log10()).clamp(-CLAMP, CLAMP)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
