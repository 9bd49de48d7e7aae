//! Thin arbitrary-precision helpers over `astro-float`, used where the
//! alternating series cancel more digits than `f64` carries.

use astro_float::{BigFloat, Consts, RoundingMode, Sign};

pub use astro_float::BigFloat as Big;

const RM: RoundingMode = RoundingMode::ToEven;
// transcendental results that happen to be exact (e.g. 4^0.5) never terminate
// the correctly-rounded search, so these skip final rounding
const RM_TRANSCENDENTAL: RoundingMode = RoundingMode::None;

/// Working precision plus the constant cache needed by `exp`/`ln`.
pub struct Hp {
    pub bits: usize,
    cc: Consts,
}

impl std::fmt::Debug for Hp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Hp").field("bits", &self.bits).finish()
    }
}

impl Clone for Hp {
    fn clone(&self) -> Self {
        Hp::new(self.bits)
    }
}

impl Hp {
    pub fn new(bits: usize) -> Self {
        let bits = bits.max(64).div_ceil(64) * 64;
        Hp { bits, cc: Consts::new().expect("astro-float constant cache") }
    }

    /// Bits needed to keep `digits` decimal digits beyond a magnitude of `10^log10_scale`.
    pub fn bits_for(log10_scale: f64, digits: f64) -> usize {
        ((log10_scale.max(0.0) + digits) * std::f64::consts::LOG2_10).ceil() as usize + 64
    }

    pub fn num(&self, v: f64) -> BigFloat {
        BigFloat::from_f64(v, self.bits)
    }

    pub fn add(&self, a: &BigFloat, b: &BigFloat) -> BigFloat {
        a.add(b, self.bits, RM)
    }

    pub fn sub(&self, a: &BigFloat, b: &BigFloat) -> BigFloat {
        a.sub(b, self.bits, RM)
    }

    pub fn mul(&self, a: &BigFloat, b: &BigFloat) -> BigFloat {
        a.mul(b, self.bits, RM)
    }

    pub fn div(&self, a: &BigFloat, b: &BigFloat) -> BigFloat {
        a.div(b, self.bits, RM)
    }

    /// Product rounded to `bits` instead of the working precision.
    pub fn mul_at(&self, a: &BigFloat, b: &BigFloat, bits: usize) -> BigFloat {
        a.mul(b, bits, RM)
    }

    /// Quotient rounded to `bits` instead of the working precision.
    pub fn div_at(&self, a: &BigFloat, b: &BigFloat, bits: usize) -> BigFloat {
        a.div(b, bits, RM)
    }

    /// Copy of `a` rounded down to at most `bits`.
    pub fn narrow(&self, a: &BigFloat, bits: usize) -> BigFloat {
        let mut v = a.clone();
        if bits < a.mantissa_max_bit_len().unwrap_or(0) {
            v.set_precision(bits, RM).expect("narrowing never allocates");
        }
        v
    }

    pub fn exp(&mut self, a: &BigFloat) -> BigFloat {
        a.exp(self.bits, RM_TRANSCENDENTAL, &mut self.cc)
    }

    pub fn ln(&mut self, a: &BigFloat) -> BigFloat {
        a.ln(self.bits, RM_TRANSCENDENTAL, &mut self.cc)
    }

    pub fn ln_1p(&mut self, a: &BigFloat) -> BigFloat {
        let one = self.num(1.0);
        let s = self.add(&one, a);
        self.ln(&s)
    }

    pub fn pow(&mut self, a: &BigFloat, e: f64) -> BigFloat {
        if a.is_zero() {
            return self.num(0.0);
        }
        let e = self.num(e);
        a.pow(&e, self.bits, RM_TRANSCENDENTAL, &mut self.cc)
    }

    pub fn sqrt(&self, a: &BigFloat) -> BigFloat {
        a.sqrt(self.bits, RM)
    }
}

/// Nearest `f64` to `x` (saturating to ±∞ and flushing to zero outside the range).
pub fn to_f64(x: &BigFloat) -> f64 {
    if x.is_zero() {
        return 0.0;
    }
    if x.is_nan() {
        return f64::NAN;
    }
    if x.is_inf_pos() {
        return f64::INFINITY;
    }
    if x.is_inf_neg() {
        return f64::NEG_INFINITY;
    }
    let Some((words, _, sign, exp, _)) = x.as_raw_parts() else {
        return f64::NAN;
    };
    let top = *words.last().expect("normalized mantissa");
    let e = i64::from(exp);
    let mag = if e > 1100 {
        f64::INFINITY
    } else if e < -1100 {
        0.0
    } else {
        // mantissa is 0.top... × 2^exp; scale in two steps to reach subnormals
        let frac = (top as f64) * 2f64.powi(-64);
        let half = (e / 2) as i32;
        frac * 2f64.powi(half) * 2f64.powi(e as i32 - half)
    };
    if sign == Sign::Neg { -mag } else { mag }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_f64() {
        let hp = Hp::new(256);
        for &v in &[1.0, -3.25, 1e-300, 7.0e250, 0.1, -2.0f64.powi(-40)] {
            assert_eq!(to_f64(&hp.num(v)), v);
        }
        assert_eq!(to_f64(&hp.num(0.0)), 0.0);
    }

    #[test]
    fn cancellation_is_resolved() {
        let mut hp = Hp::new(512);
        let big = hp.num(1e120);
        let tiny = hp.num(0.5);
        let s = hp.add(&big, &tiny);
        let d = hp.sub(&s, &big);
        assert_eq!(to_f64(&d), 0.5);
        let e = hp.exp(&hp.num(-1.0));
        assert!((to_f64(&e) - (-1f64).exp()).abs() < 1e-16);
        let l = hp.ln_1p(&hp.num(1.0));
        assert!((to_f64(&l) - 2f64.ln()).abs() < 1e-16);
        let p = hp.pow(&hp.num(4.0), 0.5);
        assert!((to_f64(&p) - 2.0).abs() < 1e-15);
    }
}
