//! Memoized alternating series for the entrance law of the dual with
//! `Φ_t(λ) = e^{-tψ(λ)}`:
//!
//! * weights `q̃_m(t) = Σ_{j≥m} (-1)^{j-m} a_{j,m} Φ_t(λ_j)`;
//! * survival `P(M > k) = Σ_{i≥0} (-1)^i c_{k,i} Φ_t(λ_{k+1+i})` with
//!   `c_{k,i} = (2j+|θ|-1) Γ(k+j+|θ|) / (j (j+|θ|-1) i! k! Γ(k+|θ|))`, `j = k+1+i`,
//!   the closed form of the partial sums `Σ_{m≤k} (-1)^m a_{j,m}`.
//!
//! Both have positive coefficients whose ratio is at most `2j+|θ|+1`, so they
//! alternate with eventually decreasing terms. Sampling inverts the survival
//! function by bisection, deciding each comparison exactly from the
//! alternating-series envelopes. Series whose largest term would cost more
//! than a few digits in `f64` are summed in arbitrary precision.

use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};
use std::collections::{BTreeMap, HashMap};

use crate::clocks::{FamilyKind, SubordinatorFamily};
use crate::error::{Result, SwfError};
use crate::hp::{self, Big, Hp};
use crate::special_fn::{ln_gamma, log_rising_factorial};
use crate::wf_core::lambda_n;

/// Largest `log10` term magnitude summed in plain `f64`.
pub const F64_MAX_LOG10: f64 = 1.0;
/// Default bound on series indices scanned per series.
pub const DEFAULT_J_CAP: u64 = 200_000;
/// Default bound on envelope refinements per draw.
pub const DEFAULT_REFINE_CAP: u64 = 1_000_000;
// extra decimal digits carried beyond the largest term
const GUARD_DIGITS: f64 = 32.0;
// a scan may stop once terms fall this far (natural log) below the series maximum
const SCAN_DEPTH: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Kind {
    Weight(u64),
    Survival(u64),
}

impl Kind {
    fn first_index(self) -> u64 {
        match self {
            Kind::Weight(m) => m,
            Kind::Survival(k) => k + 1,
        }
    }

    fn log_c0(self, th: f64) -> Result<f64> {
        match self {
            Kind::Weight(0) => Ok(0.0),
            Kind::Weight(m) => {
                Ok((2.0 * m as f64 + th - 1.0).ln() + log_rising_factorial(m as f64 + th, m as i64 - 1)?
                    - ln_gamma(m as f64 + 1.0))
            }
            // (2k+|θ|+1) (k+|θ|+1)_k / (k+1)!
            Kind::Survival(k) => {
                Ok((2.0 * k as f64 + th + 1.0).ln() + log_rising_factorial(k as f64 + th + 1.0, k as i64)?
                    - ln_gamma(k as f64 + 2.0))
            }
        }
    }

    /// `log(c_{j+1}/c_j)` for consecutive series indices `j → j+1`.
    fn log_ratio(self, th: f64, j: u64) -> f64 {
        let jf = j as f64;
        match self {
            Kind::Weight(m) if j == m => (2.0 * jf + th + 1.0).ln(),
            Kind::Weight(m) => {
                let mf = m as f64;
                ((2.0 * jf + th + 1.0) / (2.0 * jf + th - 1.0) * (mf + th + jf - 1.0) / (jf - mf + 1.0)).ln()
            }
            Kind::Survival(k) => {
                let kf = k as f64;
                let i = jf - kf - 1.0;
                ((2.0 * jf + th + 1.0) / (2.0 * jf + th - 1.0) * (kf + jf + th) * jf * (jf + th - 1.0)
                    / ((jf + 1.0) * (jf + th) * (i + 1.0)))
                    .ln()
            }
        }
    }

    /// A bound on the coefficient ratio at `j → j+1` that is nonincreasing in `j`
    /// (valid for `j` past the first index).
    fn log_ratio_envelope(self, th: f64, j: u64) -> f64 {
        let jf = j as f64;
        let lead = ((2.0 * jf + th + 1.0) / (2.0 * jf + th - 1.0)).ln();
        match self {
            Kind::Weight(m) => lead + ((m as f64 + th + jf - 1.0) / (jf - m as f64 + 1.0)).ln().max(0.0),
            Kind::Survival(k) => lead + ((k as f64 + jf + th) / (jf - k as f64)).ln(),
        }
    }

    fn big_c0(self, hp: &Hp, th: f64) -> Big {
        match self {
            Kind::Weight(m) => big_a_diag(hp, th, m),
            // (2k+|θ|+1) (k+|θ|+1)_k / (k+1)!
            Kind::Survival(k) => {
                let x = Exact::new(th, hp);
                let mut num = vec![(2.0 * k as f64 + 1.0, true)];
                num.extend((0..k).map(|i| ((k + 1 + i) as f64, true)));
                let den: Vec<(f64, bool)> = (2..=k + 1).map(|i| (i as f64, false)).collect();
                hp.div(&x.product(&num), &x.product(&den))
            }
        }
    }

    fn big_ratio(self, hp: &Hp, th: f64, j: u64, bits: usize) -> Big {
        match self {
            Kind::Weight(m) => big_ratio_a_at(hp, th, m, j, bits),
            Kind::Survival(k) => {
                let x = Exact::new(th, hp);
                let i = j - k - 1;
                let (jf, kf) = (j as f64, k as f64);
                let num = x.product(&[(2.0 * jf + 1.0, true), (kf + jf, true), (jf, false), (jf - 1.0, true)]);
                let den = x.product(&[(2.0 * jf - 1.0, true), (jf + 1.0, false), (jf, true), (i as f64 + 1.0, false)]);
                hp.div_at(&num, &den, bits)
            }
        }
    }
}

/// Products of factors `n + |θ|` formed without rounding until the working
/// precision is reached, by balanced splitting.
struct Exact {
    leaf_bits: usize,
    cap: usize,
    theta: f64,
}

impl Exact {
    fn new(theta: f64, hp: &Hp) -> Self {
        let tail = if theta > 0.0 { (-theta.log2()).max(0.0).ceil() as usize } else { 0 };
        // an integer part below 2^64 plus the 53 bits of |θ|
        let leaf_bits = (64 + 53 + tail).div_ceil(64) * 64;
        Exact { leaf_bits, cap: hp.bits.max(leaf_bits), theta }
    }

    /// `Π (n_i + [|θ|])` over integer parts `n_i`, each optionally shifted by `|θ|`.
    fn product(&self, factors: &[(f64, bool)]) -> Big {
        let rm = astro_float::RoundingMode::ToEven;
        match factors {
            [] => Big::from_f64(1.0, 64),
            [(n, shifted)] => {
                let v = Big::from_f64(*n, self.leaf_bits);
                if *shifted {
                    v.add(&Big::from_f64(self.theta, self.leaf_bits), self.leaf_bits, rm)
                } else {
                    v
                }
            }
            _ => {
                let (a, b) = factors.split_at(factors.len() / 2);
                let (pa, pb) = (self.product(a), self.product(b));
                let bits = |x: &Big| x.mantissa_max_bit_len().unwrap_or(64);
                pa.mul(&pb, (bits(&pa) + bits(&pb)).min(self.cap), rm)
            }
        }
    }
}

enum SumState {
    F64 { sum: f64, comp: f64 },
    Big { coeff: Big, sum: Big },
}

struct Series {
    kind: Kind,
    /// Offset after which the terms decrease.
    c: u64,
    log_b: Vec<f64>,
    partial: Vec<f64>,
    sum: SumState,
}

/// `Φ_t(λ_j)` in `f64` logs and, on demand, in arbitrary precision.
struct PhiCache {
    theta: f64,
    fam: SubordinatorFamily,
    t: f64,
    log: Vec<f64>,
    hp: Option<Hp>,
    big: Vec<Big>,
    // step factor of the closed-form recurrence and its per-step shrink
    step: Option<(Big, Big)>,
    // leading survival coefficients already built at the current precision
    survival_c0: BTreeMap<u64, Big>,
}

impl PhiCache {
    fn log_phi(&mut self, j: u64) -> f64 {
        while self.log.len() as u64 <= j {
            let i = self.log.len() as u64;
            self.log.push(-self.t * self.fam.psi(lambda_n(self.theta, i)));
        }
        self.log[j as usize]
    }

    /// `ρ` when `ψ(λ) = ρλ`.
    fn linear_rate(&self) -> Option<f64> {
        match self.fam.kind {
            FamilyKind::Identity => Some(1.0 + self.fam.beta),
            FamilyKind::Drift => Some(self.fam.beta),
            _ => None,
        }
    }

    /// A lower bound on `ψ(λ_{i+1}) - ψ(λ_i)` valid for every `i ≥ j`.
    ///
    /// The drift contributes `β(i + |θ|/2)`. For stable-like families with
    /// `α > 1/2`, concavity gives `Δψ_i ≥ ψ'(λ_{i+1})(i + |θ|/2)`, and that
    /// right side is increasing once `i ≥ ((1-α)|θ| - min(1,|θ|))/(2α-1)`.
    fn dpsi_floor(&self, j: u64) -> f64 {
        let th = self.theta;
        let gap = j as f64 + th / 2.0;
        let lam_next = lambda_n(th, j + 1);
        let part = match self.fam.kind {
            FamilyKind::Identity => gap,
            FamilyKind::Stable { alpha } | FamilyKind::TemperedStable { alpha, .. } if alpha > 0.5 => {
                let start = ((1.0 - alpha) * th - th.min(1.0)) / (2.0 * alpha - 1.0);
                let shift = match self.fam.kind {
                    FamilyKind::TemperedStable { q, .. } => q,
                    _ => 0.0,
                };
                if j as f64 >= start {
                    alpha * (lam_next + shift).powf(alpha - 1.0) * gap
                } else {
                    0.0
                }
            }
            _ => 0.0,
        };
        self.fam.beta * gap + part
    }

    fn ensure_bits(&mut self, bits: usize) {
        let current = self.hp.as_ref().map_or(0, |h| h.bits);
        if current < bits {
            let bits = bits.max(current + current / 4);
            self.hp = Some(Hp::new(bits));
            self.big.clear();
            self.step = None;
            self.survival_c0.clear();
        }
    }

    /// Leading survival coefficient, stepped from the nearest one already built
    /// with `c_{k+1,0}/c_{k,0} = (2k+|θ|+3)(2k+|θ|+2) / ((k+|θ|+1)(k+2))`.
    fn survival_c0(&mut self, k: u64) -> Big {
        let th = self.theta;
        let hp = self.hp.as_ref().expect("precision set before use");
        let below = self.survival_c0.range(..=k).next_back().map(|(&i, _)| i);
        let above = self.survival_c0.range(k..).next().map(|(&i, _)| i);
        let start = match (below, above) {
            (Some(b), Some(a)) => Some(if k - b <= a - k { b } else { a }),
            (b, a) => b.or(a).filter(|&i| i.abs_diff(k) < k),
        };
        let v = match start {
            None => Kind::Survival(k).big_c0(hp, th),
            Some(i) => {
                let thb = hp.num(th);
                let step = |i: u64| {
                    let num = hp.mul(
                        &hp.add(&hp.num(2.0 * i as f64 + 3.0), &thb),
                        &hp.add(&hp.num(2.0 * i as f64 + 2.0), &thb),
                    );
                    let den = hp.mul(&hp.add(&hp.num(i as f64 + 1.0), &thb), &hp.num(i as f64 + 2.0));
                    (num, den)
                };
                let mut v = self.survival_c0[&i].clone();
                if i <= k {
                    for l in i..k {
                        let (num, den) = step(l);
                        v = hp.div(&hp.mul(&v, &num), &den);
                    }
                } else {
                    for l in (k..i).rev() {
                        let (num, den) = step(l);
                        v = hp.div(&hp.mul(&v, &den), &num);
                    }
                }
                v
            }
        };
        self.survival_c0.insert(k, v.clone());
        v
    }

    fn big_phi(&mut self, j: u64) -> Big {
        let closed_rate = self.linear_rate();
        let hp = self.hp.as_mut().expect("precision set before use");
        while self.big.len() as u64 <= j {
            let i = self.big.len() as u64;
            let v = if i == 0 {
                hp.num(1.0)
            } else if let Some(rate) = closed_rate {
                // λ_i - λ_{i-1} = i - 1 + |θ|/2, so the step factor shrinks by e^{-rate·t} each time
                let (factor, shrink) = match self.step.take() {
                    Some(s) => s,
                    None => {
                        let f = hp.exp(&hp.num(-rate * self.t * self.theta / 2.0));
                        let s = hp.exp(&hp.num(-rate * self.t));
                        (f, s)
                    }
                };
                let v = hp.mul(&self.big[i as usize - 1], &factor);
                self.step = Some((hp.mul(&factor, &shrink), shrink));
                v
            } else {
                let lam = big_lambda(hp, self.theta, i);
                let psi = self.fam.psi_big(hp, &lam);
                let e = hp.mul(&hp.num(self.t), &psi);
                hp.exp(&e.neg())
            };
            self.big.push(v);
        }
        self.big[j as usize].clone()
    }
}

/// The entrance-law series for one `(|θ|, ψ, t)` triple.
pub struct SeriesTable {
    phi: PhiCache,
    d0: Option<u64>,
    weights: Vec<Series>,
    survivals: HashMap<u64, Series>,
    pub j_cap: u64,
    pub refine_cap: u64,
}

impl std::fmt::Debug for SeriesTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SeriesTable")
            .field("theta", &self.phi.theta)
            .field("fam", &self.phi.fam)
            .field("t", &self.phi.t)
            .field("weights", &self.weights.len())
            .field("survivals", &self.survivals.len())
            .finish()
    }
}

impl Clone for SeriesTable {
    // memoized series are cheap to rebuild; a clone starts empty
    fn clone(&self) -> Self {
        let mut s = SeriesTable::with_family(self.phi.theta, self.phi.fam, self.phi.t).expect("validated on construction");
        s.j_cap = self.j_cap;
        s.refine_cap = self.refine_cap;
        s
    }
}

impl SeriesTable {
    /// Series of a subordinator clock `Φ_t(λ) = e^{-tψ(λ)}`.
    pub fn with_family(theta_total: f64, fam: SubordinatorFamily, t: f64) -> Result<Self> {
        if !(theta_total > 0.0) || !theta_total.is_finite() {
            return Err(SwfError::Domain("total mutation mass must be finite and > 0".into()));
        }
        if !(t > 0.0) || !t.is_finite() {
            return Err(SwfError::Domain(format!("series time must be finite and > 0, got {t}")));
        }
        fam.validate()?;
        let beta_eff = fam.beta + if fam.kind == FamilyKind::Identity { 1.0 } else { 0.0 };
        let d0 = if beta_eff > 0.0 { Some(drift_cutoff(theta_total, t * beta_eff)) } else { None };
        Ok(SeriesTable {
            phi: PhiCache { theta: theta_total, fam, t, log: Vec::new(), hp: None, big: Vec::new(), step: None, survival_c0: BTreeMap::new() },
            d0,
            weights: Vec::new(),
            survivals: HashMap::new(),
            j_cap: DEFAULT_J_CAP,
            refine_cap: DEFAULT_REFINE_CAP,
        })
    }

    /// Series of the diffusion on its own clock at time `t`.
    pub fn classical(theta_total: f64, t: f64) -> Result<Self> {
        Self::with_family(theta_total, SubordinatorFamily::identity(), t)
    }

    pub fn t(&self) -> f64 {
        self.phi.t
    }

    /// Index beyond which every series decreases from its first term; only
    /// available with a positive drift.
    pub fn drift_cutoff(&self) -> Option<u64> {
        self.d0
    }

    fn series(&mut self, kind: Kind) -> Result<&mut Series> {
        match kind {
            Kind::Weight(m) => {
                while (self.weights.len() as u64) <= m {
                    let next = Kind::Weight(self.weights.len() as u64);
                    let s = build(next, &mut self.phi, self.d0, self.j_cap)?;
                    self.weights.push(s);
                }
                Ok(&mut self.weights[m as usize])
            }
            Kind::Survival(k) => {
                if !self.survivals.contains_key(&k) {
                    let s = build(kind, &mut self.phi, self.d0, self.j_cap)?;
                    self.survivals.insert(k, s);
                }
                Ok(self.survivals.get_mut(&k).expect("inserted above"))
            }
        }
    }

    fn with_series<T>(&mut self, kind: Kind, f: impl FnOnce(&mut Series, &mut PhiCache, u64) -> Result<T>) -> Result<T> {
        self.series(kind)?;
        let j_cap = self.j_cap;
        let s = match kind {
            Kind::Weight(m) => &mut self.weights[m as usize],
            Kind::Survival(k) => self.survivals.get_mut(&k).expect("built above"),
        };
        f(s, &mut self.phi, j_cap)
    }

    /// Offset `C_m` after which the terms of the weight series `m` decrease.
    pub fn decrease_offset(&mut self, m: u64) -> Result<u64> {
        Ok(self.series(Kind::Weight(m))?.c)
    }

    /// `q̃_m(t)` with truncation error at most `tol`, unclamped.
    pub fn weight(&mut self, m: u64, tol: f64) -> Result<f64> {
        self.evaluate(Kind::Weight(m), tol)
    }

    /// `P(M > k)` under the entrance law, with truncation error at most `tol`.
    pub fn survival(&mut self, k: u64, tol: f64) -> Result<f64> {
        self.evaluate(Kind::Survival(k), tol)
    }

    fn evaluate(&mut self, kind: Kind, tol: f64) -> Result<f64> {
        let log_tol = tol.ln();
        self.with_series(kind, |s, phi, j_cap| {
            let mut i = (s.c as usize).saturating_sub(1);
            loop {
                extend_log_b(s, phi, i + 1, j_cap)?;
                if s.log_b[i + 1] <= log_tol {
                    extend_partial(s, phi, i, j_cap)?;
                    return Ok(s.partial[i]);
                }
                i += 1;
            }
        })
    }

    /// Whether `P(M > k) > v`, decided exactly by refining the envelopes.
    fn survival_exceeds(&mut self, k: u64, v: f64, refinements: &mut u64) -> Result<bool> {
        let cap = self.refine_cap;
        self.with_series(Kind::Survival(k), |s, phi, j_cap| {
            let mut depth = s.c.div_ceil(2) as usize;
            loop {
                extend_partial(s, phi, 2 * depth + 1, j_cap)?;
                let (lo, hi) = (s.partial[2 * depth + 1], s.partial[2 * depth]);
                if lo > v {
                    return Ok(true);
                }
                if hi <= v {
                    return Ok(false);
                }
                *refinements += 1;
                if *refinements > cap {
                    return Err(SwfError::IterationCap { cap, context: "alternating-series sampler".into() });
                }
                depth += 1;
            }
        })
    }

    /// Where to start the search for the `u`-quantile and the first step size.
    /// Only the speed of [`SeriesTable::sample`] depends on this.
    fn search_start(&self, u: f64) -> (i64, i64) {
        match self.phi.linear_rate() {
            Some(rate) => {
                let (mean, var) = super::entrance_normal_moments(self.phi.theta, rate * self.phi.t);
                let sd = var.sqrt();
                let z = Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(u.clamp(1e-12, 1.0 - 1e-12));
                ((mean + sd * z).round().max(0.0) as i64, ((sd / 8.0).ceil() as i64).max(1))
            }
            None => (0, 1),
        }
    }

    /// Exact draw from `q̃_•(t)`: the smallest `k` with `P(M > k) ≤ 1 - U`,
    /// bracketed by doubling steps around a starting guess then bisected.
    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<u64> {
        let u: f64 = rng.random();
        let v = 1.0 - u;
        let mut refinements = 0u64;
        // P(M > -1) = 1 ≥ v, treated as exceeding
        let mut exceeds = |k: i64, this: &mut Self| -> Result<bool> {
            if k < 0 {
                return Ok(true);
            }
            this.survival_exceeds(k as u64, v, &mut refinements)
        };
        let (guess, spread) = self.search_start(u);
        let (mut lo, mut hi);
        let mut step = spread;
        if exceeds(guess, self)? {
            lo = guess;
            hi = guess + step;
            while exceeds(hi, self)? {
                lo = hi;
                step *= 2;
                hi = lo + step;
            }
        } else {
            hi = guess;
            lo = guess - step;
            while !exceeds(lo, self)? {
                hi = lo;
                step *= 2;
                lo = (hi - step).max(-1);
            }
        }
        // P(M > lo) > v ≥ P(M > hi)
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if exceeds(mid, self)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(hi as u64)
    }
}

fn build(kind: Kind, phi: &mut PhiCache, d0: Option<u64>, j_cap: u64) -> Result<Series> {
    let th = phi.theta;
    let first = kind.first_index();
    let mut s = Series {
        kind,
        c: 0,
        log_b: vec![kind.log_c0(th)? + phi.log_phi(first)],
        partial: Vec::new(),
        sum: SumState::F64 { sum: 0.0, comp: 0.0 },
    };
    let mut max_log = s.log_b[0];
    if !d0.is_some_and(|d| first >= d) {
        let mut last_up: Option<u64> = None;
        let mut i = 0usize;
        loop {
            extend_log_b(&mut s, phi, i + 1, j_cap)?;
            let (prev, cur) = (s.log_b[i], s.log_b[i + 1]);
            if cur >= prev {
                last_up = Some(i as u64);
            }
            max_log = max_log.max(cur);
            let j = first + i as u64;
            let past_up = last_up.is_none_or(|u| (i as u64) > u);
            let next = j + 1;
            // the coefficient envelope is nonincreasing, so a ratio bound below one
            // at j+1 holds for every later index
            let sharp = kind.log_ratio_envelope(th, next) - phi.t * phi.dpsi_floor(next) < 0.0;
            let done = past_up
                && (sharp
                    || match d0 {
                        Some(d) => j + 1 >= d,
                        None => {
                            // beyond the scan the ratio bound (2j+|θ|+1)e^{-tΔψ_j} < 1 must hold
                            let dpsi = phi.log_phi(j) - phi.log_phi(j + 1);
                            let bound = (2.0 * j as f64 + th + 1.0).ln() - dpsi;
                            cur < max_log - SCAN_DEPTH && bound < 0.0
                        }
                    });
            if done {
                break;
            }
            i += 1;
        }
        s.c = last_up.map_or(0, |u| u + 1);
    }
    let max_log10 = max_log / std::f64::consts::LN_10;
    if max_log10 > F64_MAX_LOG10 {
        phi.ensure_bits(Hp::bits_for(max_log10, GUARD_DIGITS));
        let coeff = match kind {
            Kind::Survival(k) => phi.survival_c0(k),
            Kind::Weight(_) => kind.big_c0(phi.hp.as_ref().expect("set above"), th),
        };
        let hp = phi.hp.as_ref().expect("set above");
        s.sum = SumState::Big { coeff, sum: hp.num(0.0) };
    }
    Ok(s)
}

fn extend_log_b(s: &mut Series, phi: &mut PhiCache, upto: usize, j_cap: u64) -> Result<()> {
    let first = s.kind.first_index();
    while s.log_b.len() <= upto {
        let i = s.log_b.len() as u64;
        let j = first + i;
        if i > j_cap {
            return Err(SwfError::NonConvergence(format!(
                "{:?} still needs terms past index {j} (cap {j_cap})",
                s.kind
            )));
        }
        let prev = s.log_b[i as usize - 1];
        let v = prev + s.kind.log_ratio(phi.theta, j - 1) + phi.log_phi(j) - phi.log_phi(j - 1);
        s.log_b.push(v);
    }
    Ok(())
}

fn extend_partial(s: &mut Series, phi: &mut PhiCache, upto: usize, j_cap: u64) -> Result<()> {
    let first = s.kind.first_index();
    while s.partial.len() <= upto {
        let i = s.partial.len();
        extend_log_b(s, phi, i, j_cap)?;
        if i as u64 > s.c && s.log_b[i] >= s.log_b[i - 1] {
            return Err(SwfError::NonConvergence(format!(
                "terms of {:?} increase again at index {} after the certified decrease point",
                s.kind,
                first + i as u64
            )));
        }
        let neg = i % 2 == 1;
        let j = first + i as u64;
        let value = match &mut s.sum {
            SumState::F64 { sum, comp } => {
                let term = s.log_b[i].exp();
                let term = if neg { -term } else { term };
                // Neumaier summation
                let t = *sum + term;
                if sum.abs() >= term.abs() {
                    *comp += (*sum - t) + term;
                } else {
                    *comp += (term - t) + *sum;
                }
                *sum = t;
                *sum + *comp
            }
            SumState::Big { coeff, sum } => {
                let phi_j = phi.big_phi(j);
                let hp = phi.hp.as_ref().expect("big series carry a precision");
                // past the peak the terms shrink, and each needs only the bits that
                // keep its absolute error at the level of the largest term's
                let bits = if i as u64 > s.c {
                    Hp::bits_for(s.log_b[i] / std::f64::consts::LN_10, GUARD_DIGITS).min(hp.bits)
                } else {
                    hp.bits
                };
                if i > 0 {
                    *coeff = hp.mul_at(coeff, &s.kind.big_ratio(hp, phi.theta, j - 1, bits), bits);
                }
                let b = hp.mul_at(coeff, &hp.narrow(&phi_j, bits), bits);
                *sum = if neg { hp.sub(sum, &b) } else { hp.add(sum, &b) };
                hp::to_f64(sum)
            }
        };
        s.partial.push(value.clamp(-1e300, 1e300));
    }
    Ok(())
}

/// Smallest `k` past the peak of `(2k+|θ|+1) e^{-s(k+|θ|/2)}` where it drops below 1.
pub fn drift_cutoff(theta_total: f64, s: f64) -> u64 {
    let peak = (1.0 / s - (theta_total + 1.0) / 2.0).ceil().max(0.0) as u64;
    let mut k = peak;
    while (2.0 * k as f64 + theta_total + 1.0).ln() - s * (k as f64 + theta_total / 2.0) >= 0.0 {
        k += 1;
    }
    k
}

pub(crate) fn big_lambda(hp: &Hp, theta: f64, j: u64) -> Big {
    // j(j + |θ| - 1)/2 with the sum formed exactly
    let jb = hp.num(j as f64);
    let s = hp.add(&hp.num(j as f64 - 1.0), &hp.num(theta));
    hp.div(&hp.mul(&jb, &s), &hp.num(2.0))
}

/// `a_{m,m} = (2m+|θ|-1)(m+|θ|)_{m-1}/m!` in arbitrary precision.
pub(crate) fn big_a_diag(hp: &Hp, theta: f64, m: u64) -> Big {
    if m == 0 {
        return hp.num(1.0);
    }
    let x = Exact::new(theta, hp);
    let mut num = vec![(2.0 * m as f64 - 1.0, true)];
    num.extend((0..m - 1).map(|i| ((m + i) as f64, true)));
    let den: Vec<(f64, bool)> = (2..=m).map(|i| (i as f64, false)).collect();
    hp.div(&x.product(&num), &x.product(&den))
}

/// `a_{j+1,m}/a_{j,m}` in arbitrary precision.
pub(crate) fn big_ratio_a(hp: &Hp, theta: f64, m: u64, j: u64) -> Big {
    big_ratio_a_at(hp, theta, m, j, hp.bits)
}

fn big_ratio_a_at(hp: &Hp, theta: f64, m: u64, j: u64, bits: usize) -> Big {
    let x = Exact::new(theta, hp);
    let (jf, mf) = (j as f64, m as f64);
    if j == m {
        return x.product(&[(2.0 * mf + 1.0, true)]);
    }
    let num = x.product(&[(2.0 * jf + 1.0, true), (mf + jf - 1.0, true)]);
    let den = x.product(&[(2.0 * jf - 1.0, true), (jf - mf + 1.0, false)]);
    hp.div_at(&num, &den, bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parallel::stream_rng;
    use crate::special_fn::coeff_a;

    // independent term-by-term evaluation of the identity-clock series
    fn oracle_identity(theta: f64, t: f64, m: u64) -> f64 {
        let mut s = 0.0;
        for j in m..m + 200 {
            let a = coeff_a(j, m, theta).unwrap().log_abs;
            let term = (a - t * lambda_n(theta, j)).exp();
            s += if (j - m) % 2 == 0 { term } else { -term };
            if term < 1e-20 && j > m + 5 {
                break;
            }
        }
        s
    }

    #[test]
    fn identity_weights_match_oracle() {
        let mut tab = SeriesTable::classical(2.0, 1.0).unwrap();
        let q0 = tab.weight(0, 1e-14).unwrap();
        assert!((q0 - 0.12835).abs() < 1e-5);
        for m in 0..8 {
            let got = tab.weight(m, 1e-15).unwrap();
            assert!((got - oracle_identity(2.0, 1.0, m)).abs() < 1e-12, "m={m}");
        }
    }

    #[test]
    fn big_rows_normalize_at_small_times() {
        for &t in &[0.05, 0.02] {
            let mut tab = SeriesTable::classical(2.0, t).unwrap();
            let mut total = 0.0;
            for m in 0..2000 {
                let w = tab.weight(m, 1e-16).unwrap();
                assert!(w > -1e-12, "m={m} w={w}");
                total += w;
                if m as f64 > 20.0 / t && w < 1e-18 {
                    break;
                }
            }
            assert!((total - 1.0).abs() < 1e-10, "t={t} total={total}");
        }
    }

    #[test]
    fn survival_matches_summed_weights() {
        let fams = [
            SubordinatorFamily::identity(),
            SubordinatorFamily::stable(0.7, 0.0).unwrap(),
            SubordinatorFamily::gamma(1.0, 1.0, 0.1).unwrap(),
        ];
        for fam in fams {
            for &t in &[0.05, 0.4, 2.0] {
                let mut tab = SeriesTable::with_family(1.3, fam, t).unwrap();
                let mut cdf = 0.0;
                for k in 0..60 {
                    cdf += tab.weight(k, 1e-16).unwrap_or_else(|e| panic!("{fam:?} t={t} k={k}: {e}"));
                    let s = tab.survival(k, 1e-16).unwrap();
                    assert!((s - (1.0 - cdf)).abs() < 1e-11, "{fam:?} t={t} k={k}: {s} vs {}", 1.0 - cdf);
                }
            }
        }
    }

    #[test]
    fn dpsi_floor_is_a_lower_bound_for_later_indices() {
        let fams = [
            SubordinatorFamily::identity(),
            SubordinatorFamily::stable(0.7, 0.0).unwrap(),
            SubordinatorFamily::stable(0.55, 0.0).unwrap(),
            SubordinatorFamily::tempered_stable(0.8, 2.0, 0.0).unwrap(),
            SubordinatorFamily::gamma(1.0, 1.0, 0.1).unwrap(),
        ];
        for fam in fams {
            for &th in &[0.2, 1.0, 7.5] {
                let tab = SeriesTable::with_family(th, fam, 1.0).unwrap();
                for j in [0u64, 1, 3, 10, 50, 400] {
                    let floor = tab.phi.dpsi_floor(j);
                    for i in j..j + 3000 {
                        let d = fam.psi(lambda_n(th, i + 1)) - fam.psi(lambda_n(th, i));
                        assert!(d >= floor * (1.0 - 1e-12), "{fam:?} th={th} j={j} i={i}: {d} < {floor}");
                    }
                }
            }
        }
    }

    #[test]
    fn drift_cutoff_bounds_the_ratio() {
        for &(th, s) in &[(2.0, 0.1), (0.5, 1.0), (5.0, 0.01)] {
            let d = drift_cutoff(th, s);
            for k in d..d + 1000 {
                let g = (2.0 * k as f64 + th + 1.0) * (-s * (k as f64 + th / 2.0)).exp();
                assert!(g < 1.0);
            }
        }
    }

    #[test]
    fn small_time_draws_concentrate_near_two_over_t() {
        let mut rng = stream_rng(9, 0);
        for &t in &[0.02, 0.005] {
            let mut tab = SeriesTable::classical(1.0, t).unwrap();
            let draws: Vec<u64> = (0..50).map(|_| tab.sample(&mut rng).unwrap()).collect();
            let mean = draws.iter().sum::<u64>() as f64 / 50.0;
            assert!((mean * t / 2.0 - 1.0).abs() < 0.2, "t={t} mean={mean}");
        }
    }
}
