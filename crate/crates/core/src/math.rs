//! Small numeric helpers shared by the response models, sampler and scorers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG used everywhere a seed is accepted.
pub type SimRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer; stable across platforms and releases.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable hash of a seed and a stream label.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix64(mix64(seed) ^ stream.rotate_left(17))
}

/// Stable FNV-1a hash of a string, used to key seeds by text.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Standard normal CDF via the complementary error function.
#[inline]
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// `ln Φ(x)`, accurate in the far lower tail where `Φ` underflows.
pub fn ln_std_normal_cdf(x: f64) -> f64 {
    if x > -30.0 {
        std_normal_cdf(x).ln()
    } else {
        // Mills-ratio asymptotic expansion.
        let x2 = x * x;
        let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2);
        -0.5 * x2 - (-x).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() + series.ln()
    }
}

/// Softmax of `utilities / temperature` with max-subtraction.
pub fn softmax(utilities: &[f64], temperature: f64) -> Vec<f64> {
    let max = utilities
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = utilities
        .iter()
        .map(|u| ((u - max) / temperature).exp())
        .collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// Index of the maximum, lowest index on ties. `None` on empty input.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Linear-interpolated quantile of already sorted data, `q` in [0, 1].
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

const CDF_RANGE: f64 = 8.5;
const CDF_STEPS_PER_UNIT: f64 = 32.0;

/// `(Φ, φ, φ')` at nodes spaced `1 / CDF_STEPS_PER_UNIT` over the range.
fn cdf_table() -> &'static [[f64; 3]] {
    static TABLE: std::sync::OnceLock<Vec<[f64; 3]>> = std::sync::OnceLock::new();
    TABLE.get_or_init(|| {
        let n = (2.0 * CDF_RANGE * CDF_STEPS_PER_UNIT) as usize;
        (0..=n)
            .map(|k| {
                let x = -CDF_RANGE + k as f64 / CDF_STEPS_PER_UNIT;
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                [std_normal_cdf(x), pdf, -x * pdf]
            })
            .collect()
    })
}

/// `Φ(x)` by quintic Hermite interpolation of a table; absolute error below
/// 1e-13. Beyond ±8.5 it returns 0 or 1. Meant for bulk scoring, not for
/// log-likelihoods.
#[inline]
pub fn fast_std_normal_cdf(x: f64) -> f64 {
    if x >= CDF_RANGE {
        return 1.0;
    }
    if !(x > -CDF_RANGE) {
        return if x.is_nan() { f64::NAN } else { 0.0 };
    }
    let table = cdf_table();
    let pos = (x + CDF_RANGE) * CDF_STEPS_PER_UNIT;
    let k = (pos as usize).min(table.len() - 2);
    let t = pos - k as f64;
    let h = 1.0 / CDF_STEPS_PER_UNIT;
    let [f0, d0, s0] = table[k];
    let [f1, d1, s1] = table[k + 1];
    let (t2, t3) = (t * t, t * t * t);
    let (t4, t5) = (t3 * t, t3 * t2);
    let h0 = 1.0 - 10.0 * t3 + 15.0 * t4 - 6.0 * t5;
    let h1 = t - 6.0 * t3 + 8.0 * t4 - 3.0 * t5;
    let h2 = 0.5 * (t2 - 3.0 * t3 + 3.0 * t4 - t5);
    let h3 = 0.5 * (t3 - 2.0 * t4 + t5);
    let h4 = -4.0 * t3 + 7.0 * t4 - 3.0 * t5;
    let h5 = 10.0 * t3 - 15.0 * t4 + 6.0 * t5;
    h0 * f0 + h * (h1 * d0 + h4 * d1) + h * h * (h2 * s0 + h3 * s1) + h5 * f1
}
