//! The dual of the subordinated process: entrance-law and conditional
//! weights `q̃`, the exact sampler for the entrance law, hypergeometric
//! allocation, Markov jump rates and path simulation.

use rand::Rng;
use rand_distr::{Distribution, Exp, Hypergeometric};
use std::collections::HashMap;

use crate::clocks::{clock_laplace_many, sample_clock_path_with, ClockSpec, FamilyKind, SubordinatorFamily};
use crate::error::{Result, SwfError};
use crate::hp::{self, Big, Hp};
use crate::special_fn::{coeff_a_cond, ln_gamma};
use crate::wf_core::{lambda_n, CountVector, Theta};

mod series;
pub use series::{drift_cutoff, SeriesTable, DEFAULT_J_CAP, DEFAULT_REFINE_CAP, F64_MAX_LOG10};
use series::{big_a_diag, big_lambda, big_ratio_a};

/// Negative weights down to this value are treated as cancellation noise.
// conditional rows carry an explicit rounding bound, so they stay in f64 longer
const COND_F64_MAX_LOG10: f64 = 3.0;

pub const NEGATIVE_WEIGHT_FLOOR: f64 = -1e-8;
const GUARD_DIGITS: f64 = 32.0;

/// Which weights are requested: the entrance law (`start_total = None`) or
/// the law of `|D(t)|` started from a total of `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualWeightQuery {
    pub theta_total: f64,
    pub clock: ClockSpec,
    pub t: f64,
    pub start_total: Option<u64>,
}

impl DualWeightQuery {
    fn validate(&self) -> Result<()> {
        if !(self.theta_total > 0.0) || !self.theta_total.is_finite() {
            return Err(SwfError::Domain("total mutation mass must be finite and > 0".into()));
        }
        if !(self.t > 0.0) || !self.t.is_finite() {
            return Err(SwfError::Domain(format!("dual weight time must be finite and > 0, got {}", self.t)));
        }
        self.clock.validate()
    }
}

/// Whether the entrance-law sampler is guaranteed to terminate.
#[derive(Debug, Clone, PartialEq)]
pub enum Admissibility {
    AdmissibleWithDrift,
    AdmissibleStableLike(f64),
    NotAdmissible(String),
}

impl Admissibility {
    pub fn is_admissible(&self) -> bool {
        !matches!(self, Admissibility::NotAdmissible(_))
    }
}

/// Rewrites a clock as `S(t_eff)` for a subordinator `S` when that is an
/// identity in law (inverses of deterministic clocks, and compositions whose
/// outer clock is deterministic).
pub fn subordinator_view(clock: &ClockSpec, t: f64) -> Option<(SubordinatorFamily, f64)> {
    let deterministic_rate = |f: &SubordinatorFamily| match f.kind {
        FamilyKind::Identity => Some(1.0),
        FamilyKind::Drift => Some(f.beta),
        _ => None,
    };
    match clock {
        ClockSpec::Sub(f) => Some((*f, t)),
        ClockSpec::InverseOf(f) => deterministic_rate(f).map(|r| (SubordinatorFamily::identity(), t / r)),
        ClockSpec::Composed { inner, outer } => deterministic_rate(outer).map(|r| (*inner, t / r)),
    }
}

/// Classifies a clock for the entrance-law sampler: a positive drift, or
/// stable-like small jumps of index in `(1/2, 1)`.
pub fn check_admissible(clock: &ClockSpec, theta_total: f64) -> Admissibility {
    if !(theta_total > 0.0) {
        return Admissibility::NotAdmissible("total mutation mass must be > 0".into());
    }
    if let Err(e) = clock.validate() {
        return Admissibility::NotAdmissible(e.to_string());
    }
    let Some((fam, _)) = subordinator_view(clock, 1.0) else {
        return Admissibility::NotAdmissible(
            "the entrance-law sampler needs a subordinator clock; inverse and composed clocks have a divergent series".into(),
        );
    };
    if fam.kind == FamilyKind::Identity || fam.beta > 0.0 {
        return Admissibility::AdmissibleWithDrift;
    }
    match fam.kind {
        FamilyKind::Stable { alpha } | FamilyKind::TemperedStable { alpha, .. } if alpha > 0.5 && alpha < 1.0 => {
            Admissibility::AdmissibleStableLike(alpha)
        }
        FamilyKind::Stable { alpha } | FamilyKind::TemperedStable { alpha, .. } => Admissibility::NotAdmissible(format!(
            "driftless stable-like clock with index {alpha} outside (1/2, 1)"
        )),
        _ => Admissibility::NotAdmissible(format!("driftless '{}' clock has no stable-like small jumps", fam.name())),
    }
}

fn settle_weight(v: f64, context: &str) -> Result<f64> {
    if v.is_nan() {
        return Err(SwfError::NonConvergence(format!("{context}: weight evaluated to NaN")));
    }
    if v < NEGATIVE_WEIGHT_FLOOR {
        return Err(SwfError::NegativeWeight { value: v, context: context.into() });
    }
    Ok(v.clamp(0.0, 1.0))
}

/// Series table for the entrance law of a query, when one exists.
pub fn series_table(q: &DualWeightQuery) -> Result<SeriesTable> {
    q.validate()?;
    let (fam, t) = subordinator_view(&q.clock, q.t).ok_or_else(|| {
        SwfError::NonConvergence(
            "entrance-law weights of an inverse or composed clock diverge: Φ_t(λ_j) decays like 1/λ_j while the coefficients grow polynomially"
                .into(),
        )
    })?;
    SeriesTable::with_family(q.theta_total, fam, t)
}

/// `q̃_m(t)`, or `q̃_{n,m}(t)` when the query has a start total `n`.
pub fn qtilde_weight(q: &DualWeightQuery, m: u64, tol: f64) -> Result<f64> {
    q.validate()?;
    if !(tol > 0.0) {
        return Err(SwfError::Domain("tolerance must be > 0".into()));
    }
    match q.start_total {
        Some(n) => {
            if m > n {
                return Ok(0.0);
            }
            let row = conditional_row(q.theta_total, &q.clock, q.t, n, tol)?;
            Ok(row[m as usize])
        }
        None => {
            let mut table = series_table(q)?;
            settle_weight(table.weight(m, tol)?, "entrance-law weight")
        }
    }
}

/// One draw from `q̃_•(t)` (or from the conditional row when a start total is given).
pub fn qtilde_sample<R: Rng + ?Sized>(q: &DualWeightQuery, rng: &mut R) -> Result<u64> {
    q.validate()?;
    if let Some(n) = q.start_total {
        let row = conditional_row(q.theta_total, &q.clock, q.t, n, 1e-12)?;
        return Ok(sample_index(&row, rng));
    }
    if let Admissibility::NotAdmissible(reason) = check_admissible(&q.clock, q.theta_total) {
        return Err(SwfError::Inadmissible(reason));
    }
    series_table(q)?.sample(rng)
}

/// Mean and variance of the normal approximation to the entrance law at a
/// small time `s`: mean `2η/s` and variance `(2η/s)(η+b)²(1 + η/(η+b) - 2η)/b²`
/// with `b = (|θ|-1)s/2`, `η = b/(e^b - 1)` (variance `2/(3s)` as `b → 0`).
pub fn entrance_normal_moments(theta_total: f64, s: f64) -> (f64, f64) {
    let b = (theta_total - 1.0) * s / 2.0;
    if b.abs() < 1e-3 {
        (2.0 / s, 2.0 / (3.0 * s))
    } else {
        let eta = b / b.exp_m1();
        let mean = 2.0 * eta / s;
        (mean, (mean * (eta + b).powi(2) * (1.0 + eta / (eta + b) - 2.0 * eta) / (b * b)).max(0.0))
    }
}

/// Normal approximation to the entrance law at a small time `s`, rounded to a count.
pub fn entrance_small_time_draw<R: Rng + ?Sized>(theta_total: f64, s: f64, rng: &mut R) -> u64 {
    let (mean, var) = entrance_normal_moments(theta_total, s);
    let z: f64 = rand_distr::StandardNormal.sample(rng);
    (mean + var.sqrt() * z).round().max(0.0) as u64
}

pub(crate) fn sample_index<R: Rng + ?Sized>(pmf: &[f64], rng: &mut R) -> u64 {
    let total: f64 = pmf.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, p) in pmf.iter().enumerate() {
        if u < *p {
            return i as u64;
        }
        u -= p;
    }
    pmf.iter().rposition(|p| *p > 0.0).unwrap_or(0) as u64
}

/// `log |c_{j,k}|` for `c_{j,k} = a_{j,k} n_[j]/(n+|θ|)_j`, `k ≤ j ≤ n`.
fn log_cond_coeffs(theta_total: f64, n: u64) -> Result<Vec<Vec<f64>>> {
    (0..=n)
        .map(|k| (k..=n).map(|j| Ok(coeff_a_cond(j, k, n, theta_total)?.log_abs)).collect())
        .collect()
}

fn big_phi_row(fam: &SubordinatorFamily, theta_total: f64, t: f64, n: u64, hp: &mut Hp) -> Vec<Big> {
    (0..=n)
        .map(|j| {
            if j == 0 {
                return hp.num(1.0);
            }
            let lam = big_lambda(hp, theta_total, j);
            let psi = fam.psi_big(hp, &lam);
            let e = hp.mul(&hp.num(t), &psi);
            hp.exp(&e.neg())
        })
        .collect()
}

/// `c_{j,k}` for `j = k..=n` in arbitrary precision.
fn big_cond_coeffs(hp: &Hp, theta_total: f64, n: u64, k: u64) -> Vec<Big> {
    let mut c = big_a_diag(hp, theta_total, k);
    for i in 0..k {
        let f = hp.div(&hp.num((n - i) as f64), &hp.add(&hp.num((n + i) as f64), &hp.num(theta_total)));
        c = hp.mul(&c, &f);
    }
    let mut out = vec![c.clone()];
    for j in k..n {
        let shrink = hp.div(&hp.num((n - j) as f64), &hp.add(&hp.num((n + j) as f64), &hp.num(theta_total)));
        c = hp.mul(&hp.mul(&c, &big_ratio_a(hp, theta_total, k, j)), &shrink);
        out.push(c.clone());
    }
    out
}

/// The conditional row `(q̃_{n,0}(t), …, q̃_{n,n}(t))`, a finite alternating sum
/// `q̃_{n,k}(t) = Σ_{j=k}^{n} (-1)^{j-k} a_{j,k} n_[j]/(n+|θ|)_j Φ_t(λ_j)`.
///
/// Rows whose terms exceed `10^3` are summed in arbitrary precision when
/// `Φ_t` has closed form; otherwise the rounding plus transform error is
/// bounded and reported if it exceeds `tol`. The row is not renormalized.
pub fn conditional_row(theta_total: f64, clock: &ClockSpec, t: f64, n: u64, tol: f64) -> Result<Vec<f64>> {
    if !(theta_total > 0.0) {
        return Err(SwfError::Domain("total mutation mass must be > 0".into()));
    }
    if !(t >= 0.0) || !t.is_finite() {
        return Err(SwfError::Domain(format!("transition time must be finite and >= 0, got {t}")));
    }
    if t == 0.0 {
        let mut row = vec![0.0; n as usize + 1];
        row[n as usize] = 1.0;
        return Ok(row);
    }
    let logc = log_cond_coeffs(theta_total, n)?;
    let max_log_c = logc.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum_abs_c: f64 = logc.iter().map(|r| r.iter().map(|l| l.exp()).sum::<f64>()).fold(0.0, f64::max);
    let lams: Vec<f64> = (0..=n).map(|j| lambda_n(theta_total, j)).collect();
    // transform accuracy needed so that the weighted sum stays within tol
    let phi_tol = (tol / sum_abs_c.max(1.0)).max(1e-15);
    let phi = clock_laplace_many(clock, t, &lams, phi_tol)?;
    let view = subordinator_view(clock, t);
    let mut row = Vec::with_capacity(n as usize + 1);
    let mut big: Option<(Hp, Vec<Big>)> = None;
    for k in 0..=n {
        let terms: Vec<f64> = (k..=n)
            .map(|j| {
                let v = (logc[k as usize][(j - k) as usize]).exp() * phi[j as usize];
                if (j - k) % 2 == 0 {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let max_term = terms.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let value = if max_term.log10() <= COND_F64_MAX_LOG10 || max_term == 0.0 {
            neumaier(&terms)
        } else if let Some((fam, t_eff)) = view {
            if big.is_none() {
                let mut hp = Hp::new(Hp::bits_for(max_log_c / std::f64::consts::LN_10, GUARD_DIGITS));
                let phis = big_phi_row(&fam, theta_total, t_eff, n, &mut hp);
                big = Some((hp, phis));
            }
            let (hp, phis) = big.as_ref().expect("built above");
            let coeffs = big_cond_coeffs(hp, theta_total, n, k);
            let mut s = hp.num(0.0);
            for (i, c) in coeffs.iter().enumerate() {
                let term = hp.mul(c, &phis[k as usize + i]);
                s = if i % 2 == 0 { hp.add(&s, &term) } else { hp.sub(&s, &term) };
            }
            hp::to_f64(&s)
        } else {
            let err: f64 = terms.iter().map(|v| v.abs() * 4.0 * f64::EPSILON).sum::<f64>() + sum_abs_c * phi_tol;
            if err > tol {
                return Err(SwfError::TolUnreachable {
                    tol,
                    detail: format!("conditional weight n={n}, k={k} has error bound {err:.3e} in double precision"),
                });
            }
            neumaier(&terms)
        };
        row.push(settle_weight(value, "conditional dual weight")?);
    }
    Ok(row)
}

fn neumaier(terms: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &x in terms {
        let s = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - s) + x;
        } else {
            comp += (x - s) + sum;
        }
        sum = s;
    }
    sum + comp
}

/// Memo of conditional rows keyed by start total and elapsed time.
#[derive(Debug, Clone)]
pub struct ConditionalRows {
    pub theta_total: f64,
    pub clock: ClockSpec,
    pub tol: f64,
    cache: HashMap<(u64, u64), Vec<f64>>,
}

impl ConditionalRows {
    pub fn new(theta_total: f64, clock: ClockSpec, tol: f64) -> Self {
        ConditionalRows { theta_total, clock, tol, cache: HashMap::new() }
    }

    pub fn row(&mut self, n: u64, t: f64) -> Result<&[f64]> {
        let key = (n, t.to_bits());
        if !self.cache.contains_key(&key) {
            let r = conditional_row(self.theta_total, &self.clock, t, n, self.tol)?;
            self.cache.insert(key, r);
        }
        Ok(&self.cache[&key])
    }
}

/// Multivariate hypergeometric mass `∏ C(m_i, l_i) / C(|m|, |l|)`.
pub fn hypergeom_pmf(l: &CountVector, m: &CountVector) -> f64 {
    if l.k() != m.k() || !l.le(m) {
        return 0.0;
    }
    let ln_choose = |a: u64, b: u64| ln_gamma(a as f64 + 1.0) - ln_gamma(b as f64 + 1.0) - ln_gamma((a - b) as f64 + 1.0);
    let mut v = -ln_choose(m.total(), l.total());
    for (mi, li) in m.counts().iter().zip(l.counts()) {
        v += ln_choose(*mi, *li);
    }
    v.exp().min(1.0)
}

/// Draws `l ≤ m` with `|l| = k_total` from the multivariate hypergeometric law.
pub fn hypergeom_sample<R: Rng + ?Sized>(m: &CountVector, k_total: u64, rng: &mut R) -> Result<CountVector> {
    if k_total > m.total() {
        return Err(SwfError::Domain(format!("cannot draw {k_total} items from a population of {}", m.total())));
    }
    let mut pop = m.total();
    let mut left = k_total;
    let mut out = Vec::with_capacity(m.k());
    for &mi in m.counts() {
        let li = if left == 0 || mi == 0 {
            0
        } else if mi == pop {
            left
        } else {
            Hypergeometric::new(pop, mi, left).map_err(|e| SwfError::Domain(e.to_string()))?.sample(rng)
        };
        out.push(li);
        pop -= mi;
        left -= li;
    }
    Ok(CountVector::new(out))
}

/// `P(D(t) = to | D(0) = from) = q̃_{|from|,|to|}(t) H(to; from)`.
pub fn dual_transition_pmf(theta: &Theta, clock: &ClockSpec, t: f64, from: &CountVector, to: &CountVector, tol: f64) -> Result<f64> {
    if from.k() != theta.k() || to.k() != theta.k() {
        return Err(SwfError::Domain("count vectors must match the dimension of theta".into()));
    }
    if !to.le(from) {
        return Ok(0.0);
    }
    let row = conditional_row(theta.total(), clock, t, from.total(), tol)?;
    Ok(row[to.total() as usize] * hypergeom_pmf(to, from))
}

/// Jump rate `from → to` of the dual under a subordinator clock:
/// `Σ_{j=|to|}^{|from|} (-1)^{j-|to|+1} a_{j,|to|} n_[j]/(n+|θ|)_j ψ(λ_j) · H(to; from)`,
/// summed in arbitrary precision.
pub fn dual_jump_rates(theta: &Theta, fam: &SubordinatorFamily, from: &CountVector, to: &CountVector) -> Result<f64> {
    fam.validate()?;
    if from.k() != theta.k() || to.k() != theta.k() {
        return Err(SwfError::Domain("count vectors must match the dimension of theta".into()));
    }
    let (n, k) = (from.total(), to.total());
    if k >= n {
        return Err(SwfError::Domain(format!("jump rates need |to| < |from|, got {k} and {n}")));
    }
    if !to.le(from) {
        return Ok(0.0);
    }
    let th = theta.total();
    let mut log_scale = f64::NEG_INFINITY;
    for j in k..=n {
        let c = coeff_a_cond(j, k, n, th)?;
        let psi = fam.psi(lambda_n(th, j));
        log_scale = log_scale.max(c.log_abs + psi.max(1e-300).ln());
    }
    let mut hp = Hp::new(Hp::bits_for(log_scale / std::f64::consts::LN_10, GUARD_DIGITS));
    let coeffs = big_cond_coeffs(&hp, th, n, k);
    let mut s = hp.num(0.0);
    for (i, c) in coeffs.iter().enumerate() {
        let lam = big_lambda(&hp, th, k + i as u64);
        let psi = fam.psi_big(&mut hp, &lam);
        let term = hp.mul(c, &psi);
        s = if i % 2 == 0 { hp.sub(&s, &term) } else { hp.add(&s, &term) };
    }
    let rate = hp::to_f64(&s);
    Ok(rate.max(0.0) * hypergeom_pmf(to, from))
}

/// Path of the dual from `start` observed at ascending `times`.
///
/// The classical pure-death chain (rate `λ_n` at total `n`, a uniformly
/// chosen individual removed) is run in operational time and read off at a
/// jointly sampled clock path.
pub fn dual_path_sample<R: Rng + ?Sized>(
    theta: &Theta,
    clock: &ClockSpec,
    start: &CountVector,
    times: &[f64],
    grid_step: Option<f64>,
    rng: &mut R,
) -> Result<Vec<CountVector>> {
    if start.k() != theta.k() {
        return Err(SwfError::Domain("start must match the dimension of theta".into()));
    }
    let ops = sample_clock_path_with(clock, times, grid_step, rng)?;
    let mut state = start.counts().to_vec();
    let mut total = start.total();
    let mut clock_now = 0.0;
    let mut next_death = f64::INFINITY;
    if total > 0 {
        next_death = Exp::new(theta.lambda_n(total)).map_err(|e| SwfError::Domain(e.to_string()))?.sample(rng);
    }
    let mut out = Vec::with_capacity(times.len());
    for &s in &ops {
        while total > 0 && clock_now + next_death <= s {
            clock_now += next_death;
            let mut pick = rng.random_range(0..total);
            for c in state.iter_mut() {
                if pick < *c {
                    *c -= 1;
                    break;
                }
                pick -= *c;
            }
            total -= 1;
            next_death = if total > 0 {
                Exp::new(theta.lambda_n(total)).map_err(|e| SwfError::Domain(e.to_string()))?.sample(rng)
            } else {
                f64::INFINITY
            };
        }
        // memorylessness lets the residual hold carry across observation times
        next_death -= s - clock_now;
        clock_now = s;
        out.push(CountVector::new(state.clone()));
    }
    Ok(out)
}
