//! `sin`/`cos` pairs for the phase loops. Cody–Waite reduction by π/2 and
//! the fdlibm minimax kernels; branch-free so the array form vectorizes.
//! Accurate to a few ulp for |x| < 2^20 and falls back to libm beyond.

use crate::rff::C64;

const FRAC_2_PI: f64 = std::f64::consts::FRAC_2_PI;
const PIO2_1: f64 = 1.570_796_326_734_125_614_17e0;
const PIO2_2: f64 = 6.077_100_506_303_965_976_60e-11;
const PIO2_3: f64 = 2.022_266_248_711_166_455_80e-21;
/// 1.5 · 2^52: adding it rounds to an integer kept in the low mantissa bits.
const ROUND: f64 = 6_755_399_441_055_744.0;
pub(crate) const REDUCTION_LIMIT: f64 = 1_048_576.0;

const S1: f64 = -1.666_666_666_666_663_243_48e-01;
const S2: f64 = 8.333_333_333_322_489_461_24e-03;
const S3: f64 = -1.984_126_982_985_794_931_34e-04;
const S4: f64 = 2.755_731_370_707_006_767_89e-06;
const S5: f64 = -2.505_076_025_340_686_341_95e-08;
const S6: f64 = 1.589_690_995_211_550_102_21e-10;

const C1: f64 = 4.166_666_666_666_660_190_37e-02;
const C2: f64 = -1.388_888_888_887_410_957_49e-03;
const C3: f64 = 2.480_158_728_947_672_941_78e-05;
const C4: f64 = -2.755_731_435_139_066_330_35e-07;
const C5: f64 = 2.087_572_321_298_174_827_90e-09;
const C6: f64 = -1.135_964_755_778_819_482_65e-11;

#[inline(always)]
fn kernel(x: f64) -> (f64, f64) {
    let t = x * FRAC_2_PI + ROUND;
    let q = t.to_bits();
    let k = t - ROUND;
    let r = ((x - k * PIO2_1) - k * PIO2_2) - k * PIO2_3;
    let z = r * r;
    let s = r + r * z * (S1 + z * (S2 + z * (S3 + z * (S4 + z * (S5 + z * S6)))));
    let c = 1.0 - 0.5 * z + z * z * (C1 + z * (C2 + z * (C3 + z * (C4 + z * (C5 + z * C6)))));
    let swap = (q & 1).wrapping_neg();
    let (sb, cb) = (s.to_bits(), c.to_bits());
    let s = (sb & !swap) | (cb & swap);
    let c = (cb & !swap) | (sb & swap);
    let s = f64::from_bits(s ^ ((q & 2) << 62));
    let c = f64::from_bits(c ^ ((q.wrapping_add(1) & 2) << 62));
    (s, c)
}

/// `(sin x, cos x)`.
#[inline]
pub(crate) fn sin_cos(x: f64) -> (f64, f64) {
    if x.abs() < REDUCTION_LIMIT {
        kernel(x)
    } else {
        x.sin_cos()
    }
}

/// `acc[m] += exp(-i s v_m)`. Elementwise identical to [`sin_cos`].
#[inline]
pub(crate) fn accumulate_expi_neg(v: &[f64], s: f64, acc: &mut [C64]) {
    if v.iter().all(|p| (p * s).abs() < REDUCTION_LIMIT) {
        for (a, p) in acc.iter_mut().zip(v) {
            let (sn, cs) = kernel(p * s);
            a.re += cs;
            a.im -= sn;
        }
    } else {
        for (a, p) in acc.iter_mut().zip(v) {
            let (sn, cs) = sin_cos(p * s);
            a.re += cs;
            a.im -= sn;
        }
    }
}

/// `out[m] = exp(-i v_m)`. Elementwise identical to [`sin_cos`].
pub(crate) fn expi_neg_into(v: &[f64], out: &mut [C64]) {
    for (o, p) in out.iter_mut().zip(v) {
        let (sn, cs) = sin_cos(*p);
        *o = C64::new(cs, -sn);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_libm() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for scale in [1.0, 10.0, 1e3, 1e5, 1e7] {
            for _ in 0..20_000 {
                let x: f64 = rng.random_range(-scale..scale);
                let (s, c) = sin_cos(x);
                assert!((s - x.sin()).abs() <= 4e-16, "sin {x}: {s} vs {}", x.sin());
                assert!((c - x.cos()).abs() <= 4e-16, "cos {x}: {c} vs {}", x.cos());
            }
        }
    }

    #[test]
    fn quadrant_points() {
        use std::f64::consts::{FRAC_PI_2, PI};
        for (x, s, c) in [(0.0, 0.0, 1.0), (FRAC_PI_2, 1.0, 0.0), (PI, 0.0, -1.0), (-FRAC_PI_2, -1.0, 0.0)] {
            let (a, b) = sin_cos(x);
            assert!((a - s).abs() < 1e-15 && (b - c).abs() < 1e-15);
        }
    }

    #[test]
    fn array_form_agrees_with_scalar() {
        let v: Vec<f64> = (0..100).map(|i| i as f64 * 0.731 - 30.0).collect();
        for s in [1.0, 1e3, 1e6] {
            let mut acc = vec![C64::new(0.0, 0.0); v.len()];
            accumulate_expi_neg(&v, s, &mut acc);
            for (a, p) in acc.iter().zip(&v) {
                let (sn, cs) = sin_cos(p * s);
                assert_eq!(a.re, cs);
                assert_eq!(a.im, -sn);
            }
        }
    }
}
