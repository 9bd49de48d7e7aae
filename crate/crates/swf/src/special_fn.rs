//! Log-gamma based factorials, the Mittag-Leffler function on the negative
//! half-line, and the coefficients of the alternating dual series.

use crate::error::{Result, SwfError};
use crate::quad;

pub use statrs::function::gamma::ln_gamma;

/// A real number stored as a sign and the natural log of its magnitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignedLog {
    pub sign: i8,
    pub log_abs: f64,
}

impl SignedLog {
    pub const ZERO: SignedLog = SignedLog { sign: 0, log_abs: f64::NEG_INFINITY };
    pub const ONE: SignedLog = SignedLog { sign: 1, log_abs: 0.0 };

    pub fn new(sign: i8, log_abs: f64) -> Self {
        if sign == 0 || log_abs == f64::NEG_INFINITY {
            Self::ZERO
        } else {
            SignedLog { sign: sign.signum(), log_abs }
        }
    }

    pub fn from_f64(v: f64) -> Self {
        if v == 0.0 {
            Self::ZERO
        } else {
            SignedLog { sign: if v > 0.0 { 1 } else { -1 }, log_abs: v.abs().ln() }
        }
    }

    pub fn to_f64(self) -> f64 {
        if self.sign == 0 {
            0.0
        } else {
            f64::from(self.sign) * self.log_abs.exp()
        }
    }

    pub fn is_zero(self) -> bool {
        self.sign == 0
    }

    pub fn mul(self, other: SignedLog) -> SignedLog {
        if self.sign == 0 || other.sign == 0 {
            return Self::ZERO;
        }
        SignedLog { sign: self.sign * other.sign, log_abs: self.log_abs + other.log_abs }
    }

    pub fn neg(self) -> SignedLog {
        SignedLog { sign: -self.sign, log_abs: self.log_abs }
    }

    pub fn add(self, other: SignedLog) -> SignedLog {
        if self.sign == 0 {
            return other;
        }
        if other.sign == 0 {
            return self;
        }
        let (hi, lo) = if self.log_abs >= other.log_abs { (self, other) } else { (other, self) };
        let r = (lo.log_abs - hi.log_abs).exp();
        if hi.sign == lo.sign {
            SignedLog { sign: hi.sign, log_abs: hi.log_abs + r.ln_1p() }
        } else if r == 1.0 {
            Self::ZERO
        } else {
            SignedLog { sign: hi.sign, log_abs: hi.log_abs + (-r).ln_1p() }
        }
    }
}

/// `ln (a)_n` for the rising factorial `(a)_n = Γ(a+n)/Γ(a)`.
///
/// `n = -1` gives `ln 1/(a-1)`, which needs `a > 1`.
pub fn log_rising_factorial(a: f64, n: i64) -> Result<f64> {
    if !(a > 0.0) || a + n as f64 <= 0.0 {
        return Err(SwfError::Domain(format!("rising factorial ({a})_{n} needs a > 0 and a + n > 0")));
    }
    match n {
        0 => Ok(0.0),
        -1 => Ok(-(a - 1.0).ln()),
        n if n < 0 => Ok(ln_gamma(a + n as f64) - ln_gamma(a)),
        n if n <= 64 => Ok((0..n).map(|i| (a + i as f64).ln()).sum()),
        n => Ok(ln_gamma(a + n as f64) - ln_gamma(a)),
    }
}

fn is_integer(v: f64) -> bool {
    v.fract() == 0.0 && v.is_finite()
}

/// Falling factorial `a_[x] = Γ(a+1)/Γ(a-x+1)`; zero for integer `x > a` when `a` is an integer.
pub fn falling_factorial(a: f64, x: f64) -> Result<f64> {
    if a < 0.0 || x < 0.0 {
        return Err(SwfError::Domain(format!("falling factorial {a}_[{x}] needs nonnegative arguments")));
    }
    if x == 0.0 {
        return Ok(1.0);
    }
    if is_integer(a) && is_integer(x) {
        if x > a {
            return Ok(0.0);
        }
        return Ok((0..x as u64).map(|i| a - i as f64).product());
    }
    if a - x + 1.0 > 0.0 {
        return Ok((ln_gamma(a + 1.0) - ln_gamma(a - x + 1.0)).exp());
    }
    Err(SwfError::Domain(format!("falling factorial {a}_[{x}] undefined for a - x + 1 <= 0")))
}

/// `ln a_[n]` for integer `n`; `None` when the factor vanishes (`n > a`).
pub fn log_falling_factorial_int(a: u64, n: u64) -> Option<f64> {
    if n > a {
        None
    } else {
        Some(ln_gamma(a as f64 + 1.0) - ln_gamma((a - n) as f64 + 1.0))
    }
}

/// `E_α(-x)` for `α ∈ (0, 1]` and `x ≥ 0`.
pub fn mittag_leffler_neg(alpha: f64, x: f64) -> f64 {
    assert!(alpha > 0.0 && alpha <= 1.0, "Mittag-Leffler order must lie in (0, 1]");
    assert!(x >= 0.0, "Mittag-Leffler argument must be nonnegative");
    if x == 0.0 {
        return 1.0;
    }
    if alpha == 1.0 {
        return (-x).exp();
    }
    if x <= 1.0 {
        ml_series(alpha, x)
    } else {
        ml_integral(alpha, x)
    }
}

fn ml_series(alpha: f64, x: f64) -> f64 {
    let lx = x.ln();
    let mut sum = 1.0;
    let mut comp = 0.0;
    let mut n = 1u32;
    loop {
        let nf = f64::from(n);
        let mag = (nf * lx - ln_gamma(alpha * nf + 1.0)).exp();
        let term = if n % 2 == 0 { mag } else { -mag };
        // Kahan summation
        let y = term - comp;
        let s = sum + y;
        comp = (s - sum) - y;
        sum = s;
        if mag < 1e-18 && alpha * nf > 2.0 {
            break;
        }
        n += 1;
    }
    sum
}

fn ml_integral(alpha: f64, x: f64) -> f64 {
    use std::f64::consts::PI;
    let c = (alpha * PI).cos();
    let pref = (alpha * PI).sin() / (alpha * PI);
    let f = |v: f64| {
        let e = (-v.powf(1.0 / alpha)).exp();
        if e == 0.0 {
            0.0
        } else {
            e * x / (v * v + 2.0 * v * x * c + x * x)
        }
    };
    // beyond v_max the exponential factor underflows
    let v_max = 760f64.powf(alpha);
    let width = (4.0 * PI * (1.0 - alpha)).clamp(1e-3, 0.5);
    let mut breaks = vec![0.0, 1.0f64.min(v_max), (x * (1.0 - width)), x, x * (1.0 + width), v_max];
    breaks.retain(|b| *b >= 0.0 && *b <= v_max);
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let mut total = 0.0;
    for w in breaks.windows(2) {
        total += quad::integrate(f, w[0], w[1], 1e-300, 1e-14, 4000).value;
    }
    pref * total
}

/// Magnitude of the dual-series coefficient
/// `a_{j,m} = (2j+|θ|-1) (m+|θ|)_{j-1} / (m! (j-m)!)`, with `a_{0,0} = 1`.
pub fn coeff_a(j: u64, m: u64, theta_total: f64) -> Result<SignedLog> {
    if j < m {
        return Err(SwfError::Domain(format!("coeff_a needs j >= m, got j={j}, m={m}")));
    }
    if !(theta_total > 0.0) {
        return Err(SwfError::Domain("total mutation mass must be positive".into()));
    }
    if j == 0 {
        return Ok(SignedLog::ONE);
    }
    let lr = log_rising_factorial(m as f64 + theta_total, j as i64 - 1)?;
    let log = (2.0 * j as f64 + theta_total - 1.0).ln() + lr
        - ln_gamma(m as f64 + 1.0)
        - ln_gamma((j - m) as f64 + 1.0);
    Ok(SignedLog::new(1, log))
}

/// Conditional coefficient `a_{j,k} n_[j] / (n+|θ|)_j`, zero for `j > n`.
pub fn coeff_a_cond(j: u64, k: u64, n: u64, theta_total: f64) -> Result<SignedLog> {
    if k > j {
        return Err(SwfError::Domain(format!("coeff_a_cond needs k <= j, got k={k}, j={j}")));
    }
    let Some(lff) = log_falling_factorial_int(n, j) else {
        return Ok(SignedLog::ZERO);
    };
    let a = coeff_a(j, k, theta_total)?;
    let lr = log_rising_factorial(n as f64 + theta_total, j as i64)?;
    Ok(a.mul(SignedLog::new(1, lff - lr)))
}
