//! Filtering and smoothing with finite mixtures of Dirichlet laws.
//!
//! A mixture `Σ w_m D_{θ+m}` is keyed by count vectors `m`. Observing
//! multinomial counts `y` shifts every key by `y`; letting time pass moves
//! the keys down along the dual process. Clocks that break the Markov
//! property are handled by averaging the conditional filter over clock paths.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::clocks::{clock_path_is_exact, sample_clock_path_with, ClockSpec};
use crate::error::{Result, SwfError};
use crate::parallel::par_draws;
use crate::special_fn::log_rising_factorial;
use crate::swf_dual::{hypergeom_pmf, sample_index, ConditionalRows};
use crate::swf_sampler::{Initial, SwfModel};
use crate::wf_core::{dirichlet_sample_shifted, log_duality_constant, log_multinomial_coefficient, CountVector, SimplexPoint, Theta};

/// Components lighter than this are dropped after each step.
pub const PRUNE_BELOW: f64 = 1e-12;
/// Slack allowed on the total weight of a mixture read from outside.
pub const INPUT_WEIGHT_SLACK: f64 = 1e-8;
/// Default floor on the effective sample size of importance weights.
pub const DEFAULT_ESS_FLOOR: f64 = 10.0;

/// `Σ_m w_m Dirichlet(θ + m)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureRepr", into = "MixtureRepr")]
pub struct DirichletMixture {
    theta: Theta,
    comps: BTreeMap<CountVector, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub m: CountVector,
    pub w: f64,
}

#[derive(Serialize, Deserialize)]
struct MixtureRepr {
    theta: Theta,
    components: Vec<Component>,
}

impl TryFrom<MixtureRepr> for DirichletMixture {
    type Error = SwfError;

    fn try_from(r: MixtureRepr) -> Result<Self> {
        DirichletMixture::new(r.theta, r.components.into_iter().map(|c| (c.m, c.w)).collect())
    }
}

impl From<DirichletMixture> for MixtureRepr {
    fn from(d: DirichletMixture) -> Self {
        let components = d.comps.into_iter().map(|(m, w)| Component { m, w }).collect();
        MixtureRepr { theta: d.theta, components }
    }
}

fn log_sum_exp(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

impl DirichletMixture {
    /// Checks keys and weights; totals within [`INPUT_WEIGHT_SLACK`] of one are
    /// rescaled to one unless already within rounding.
    pub fn new(theta: Theta, comps: Vec<(CountVector, f64)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (m, w) in comps {
            if m.k() != theta.k() {
                return Err(SwfError::Domain(format!("component {:?} does not match K = {}", m.counts(), theta.k())));
            }
            if !(w >= 0.0) || !w.is_finite() {
                return Err(SwfError::Domain(format!("component weight {w} must be finite and >= 0")));
            }
            if map.insert(m.clone(), w).is_some() {
                return Err(SwfError::Domain(format!("component {:?} listed twice", m.counts())));
            }
        }
        let total: f64 = map.values().sum();
        if (total - 1.0).abs() > INPUT_WEIGHT_SLACK {
            return Err(SwfError::Domain(format!("mixture weights sum to {total}, not 1")));
        }
        if (total - 1.0).abs() > 1e-12 {
            map.values_mut().for_each(|w| *w /= total);
        }
        Ok(DirichletMixture { theta, comps: map })
    }

    /// The prior `Dirichlet(θ)` as a one-component mixture.
    pub fn prior(theta: Theta) -> Self {
        let k = theta.k();
        DirichletMixture { theta, comps: BTreeMap::from([(CountVector::zeros(k), 1.0)]) }
    }

    /// Normalizes log weights, dropping components below [`PRUNE_BELOW`].
    fn from_log_weights(theta: Theta, logs: BTreeMap<CountVector, f64>) -> Result<(Self, f64)> {
        let total = log_sum_exp(logs.values().copied());
        if !total.is_finite() {
            return Err(SwfError::Domain("mixture has no positive weight".into()));
        }
        let comps = logs.into_iter().map(|(m, l)| (m, (l - total).exp())).collect();
        let mut d = DirichletMixture { theta, comps };
        d.prune();
        Ok((d, total))
    }

    fn from_weights(theta: Theta, comps: BTreeMap<CountVector, f64>) -> Result<Self> {
        let total: f64 = comps.values().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(SwfError::Domain(format!("mixture weights sum to {total}")));
        }
        let comps = comps.into_iter().map(|(m, w)| (m, w / total)).collect();
        let mut d = DirichletMixture { theta, comps };
        d.prune();
        Ok(d)
    }

    fn prune(&mut self) {
        self.comps.retain(|_, w| *w >= PRUNE_BELOW);
        let total: f64 = self.comps.values().sum();
        self.comps.values_mut().for_each(|w| *w /= total);
    }

    pub fn theta(&self) -> &Theta {
        &self.theta
    }

    pub fn len(&self) -> usize {
        self.comps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.comps.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CountVector, f64)> {
        self.comps.iter().map(|(m, w)| (m, *w))
    }

    pub fn weight(&self, m: &CountVector) -> f64 {
        self.comps.get(m).copied().unwrap_or(0.0)
    }

    pub fn total_weight(&self) -> f64 {
        self.comps.values().sum()
    }

    /// `E[X]` under the mixture.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.theta.k()];
        for (m, w) in self.iter() {
            let denom = self.theta.total() + m.total() as f64;
            for (o, (t, c)) in out.iter_mut().zip(self.theta.comps().iter().zip(m.counts())) {
                *o += w * (t + *c as f64) / denom;
            }
        }
        out
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SimplexPoint> {
        let keys: Vec<&CountVector> = self.comps.keys().collect();
        let weights: Vec<f64> = self.comps.values().copied().collect();
        let i = sample_index(&weights, rng) as usize;
        dirichlet_sample_shifted(&self.theta, keys[i], rng)
    }
}

/// `log` of the Dirichlet-multinomial mass of `y` under `Dirichlet(θ + m)`.
fn log_dm(theta: &Theta, m: &CountVector, y: &CountVector) -> f64 {
    let mut v = log_multinomial_coefficient(y);
    for ((t, mc), yc) in theta.comps().iter().zip(m.counts()).zip(y.counts()) {
        v += log_rising_factorial(t + *mc as f64, *yc as i64).expect("positive parameters");
    }
    v - log_rising_factorial(theta.total() + m.total() as f64, y.total() as i64).expect("positive parameters")
}

/// Conjugate update by counts `y`, with the log predictive mass of `y`.
pub fn update_with_evidence(mix: &DirichletMixture, y: &CountVector) -> Result<(DirichletMixture, f64)> {
    if y.k() != mix.theta.k() {
        return Err(SwfError::Domain(format!("observation has dimension {}, θ has {}", y.k(), mix.theta.k())));
    }
    let logs = mix.iter().map(|(m, w)| (m.add(y), w.ln() + log_dm(&mix.theta, m, y))).collect();
    DirichletMixture::from_log_weights(mix.theta.clone(), logs)
}

/// Conjugate update by counts `y`.
pub fn update(mix: &DirichletMixture, y: &CountVector) -> Result<DirichletMixture> {
    Ok(update_with_evidence(mix, y)?.0)
}

/// Prediction over `dt` using memoized dual rows for the clock.
pub fn predict_with(mix: &DirichletMixture, dt: f64, rows: &mut ConditionalRows) -> Result<DirichletMixture> {
    if !(dt >= 0.0) || !dt.is_finite() {
        return Err(SwfError::Domain(format!("prediction gap must be finite and >= 0, got {dt}")));
    }
    if (rows.theta_total - mix.theta.total()).abs() > 1e-12 * mix.theta.total() {
        return Err(SwfError::Config("dual rows were built for a different |θ|".into()));
    }
    if dt == 0.0 {
        return Ok(mix.clone());
    }
    let mut acc: BTreeMap<CountVector, f64> = BTreeMap::new();
    for (m, w) in mix.iter() {
        let row = rows.row(m.total(), dt)?;
        for l in m.lower_set() {
            let p = row[l.total() as usize] * hypergeom_pmf(&l, m);
            if p > 0.0 {
                *acc.entry(l).or_insert(0.0) += w * p;
            }
        }
    }
    DirichletMixture::from_weights(mix.theta.clone(), acc)
}

/// Prediction of `mix` over `dt` on `clock`.
pub fn predict(mix: &DirichletMixture, dt: f64, clock: &ClockSpec, tol: f64) -> Result<DirichletMixture> {
    let mut rows = ConditionalRows::new(mix.theta.total(), *clock, tol);
    predict_with(mix, dt, &mut rows)
}

/// Multinomial counts observed at time `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub t: f64,
    pub y: CountVector,
}

/// Standard error of one mixture weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSe {
    pub m: CountVector,
    pub se: f64,
}

/// Predictive and filtered laws at one observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterStep {
    pub t: f64,
    pub predictive: DirichletMixture,
    pub filtered: DirichletMixture,
    pub log_likelihood_increment: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictive_se: Option<Vec<ComponentSe>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filtered_se: Option<Vec<ComponentSe>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Prior clock paths weighted by the conditional likelihood.
    ImportanceSampling,
    /// Exact clock-posterior draws by rejection.
    Rejection,
}

/// How the clock was integrated out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub estimator: Estimator,
    pub clock_draws: usize,
    /// Effective sample size of the filtered weights per step (importance sampling only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ess: Vec<f64>,
    /// Proposals used per step (rejection only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attempts: Vec<u64>,
    /// Whether the clock paths were drawn exactly.
    pub exact_clock: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterTrace {
    pub steps: Vec<FilterStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monte_carlo: Option<MonteCarloSummary>,
}

/// Sum of the incremental log marginal likelihoods.
pub fn log_marginal_likelihood(trace: &FilterTrace) -> f64 {
    trace.steps.iter().map(|s| s.log_likelihood_increment).sum()
}

fn check_data(theta: &Theta, data: &[ObservationRecord], start: f64) -> Result<()> {
    let mut prev = start;
    for (i, d) in data.iter().enumerate() {
        if d.y.k() != theta.k() {
            return Err(SwfError::Domain(format!("observation {i} has dimension {}, θ has {}", d.y.k(), theta.k())));
        }
        if !d.t.is_finite() || d.t < prev || (i > 0 && d.t == prev) {
            return Err(SwfError::Domain(format!("observation times must be strictly increasing and >= {start}; got {} at index {i}", d.t)));
        }
        prev = d.t;
    }
    Ok(())
}

/// The initial law as a mixture; a fixed point has no finite-mixture form.
pub fn prior_mixture(model: &SwfModel) -> Result<DirichletMixture> {
    match &model.initial {
        Initial::Stationary => Ok(DirichletMixture::prior(model.theta.clone())),
        Initial::Mixture { mixture } => Ok(mixture.clone()),
        Initial::FixedPoint { .. } => Err(SwfError::Config(
            "a fixed initial point is not a finite Dirichlet mixture; use a stationary or mixture initial law".into(),
        )),
    }
}

/// Alternates prediction over `gaps[i]` and update by `data[i]`.
fn run_filter(prior: &DirichletMixture, data: &[ObservationRecord], gaps: &[f64], rows: &mut ConditionalRows) -> Result<Vec<FilterStep>> {
    let mut cur = prior.clone();
    let mut steps = Vec::with_capacity(data.len());
    for (obs, &gap) in data.iter().zip(gaps) {
        let predictive = predict_with(&cur, gap, rows)?;
        let (filtered, inc) = update_with_evidence(&predictive, &obs.y)?;
        steps.push(FilterStep {
            t: obs.t,
            predictive,
            filtered: filtered.clone(),
            log_likelihood_increment: inc,
            predictive_se: None,
            filtered_se: None,
        });
        cur = filtered;
    }
    Ok(steps)
}

fn gaps_from(start: f64, times: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut prev = start;
    times
        .into_iter()
        .map(|t| {
            let g = t - prev;
            prev = t;
            g
        })
        .collect()
}

/// Filter started from `prior`, the law of the state at `start`.
pub fn filter_from(prior: &DirichletMixture, start: f64, clock: &ClockSpec, data: &[ObservationRecord], tol: f64) -> Result<FilterTrace> {
    if !clock.is_markov() {
        return Err(SwfError::Config("inverse and composed clocks are not Markov; use the non-Markov filter".into()));
    }
    check_data(&prior.theta, data, start)?;
    let mut rows = ConditionalRows::new(prior.theta.total(), *clock, tol);
    let gaps = gaps_from(start, data.iter().map(|d| d.t));
    Ok(FilterTrace { steps: run_filter(prior, data, &gaps, &mut rows)?, monte_carlo: None })
}

/// Filtering recursion for a subordinator clock; the initial law is taken at time 0.
pub fn filter(model: &SwfModel, data: &[ObservationRecord], tol: f64) -> Result<FilterTrace> {
    model.validate()?;
    filter_from(&prior_mixture(model)?, 0.0, &model.clock, data, tol)
}

/// `log C_{m,n}` with `Dirichlet(θ+m)(dx) g(x, n) = C_{m,n} Dirichlet(θ+m+n)(dx)`.
fn log_combination(theta: &Theta, m: &CountVector, n: &CountVector) -> f64 {
    let mut v = log_duality_constant(theta, n);
    for ((t, mc), nc) in theta.comps().iter().zip(m.counts()).zip(n.counts()) {
        v += log_rising_factorial(t + *mc as f64, *nc as i64).expect("positive parameters");
    }
    v - log_rising_factorial(theta.total() + m.total() as f64, n.total() as i64).expect("positive parameters")
}

/// Smoothing marginals at each observation time.
///
/// The likelihood of the future data given the state, `h_i(x)`, is kept as a
/// nonnegative combination `Σ b_n g(x, n)` of duality functions: multiplying
/// by the emission shifts `n` by `y`, and the transition acts on `g(·, n)`
/// through the dual rows. Each marginal is then `Σ w_m b_n C_{m,n} D_{θ+m+n}`.
pub fn smooth(model: &SwfModel, data: &[ObservationRecord], tol: f64) -> Result<Vec<DirichletMixture>> {
    let trace = filter(model, data, tol)?;
    let theta = &model.theta;
    let mut rows = ConditionalRows::new(theta.total(), model.clock, tol);
    let n_obs = data.len();
    let mut out = vec![None; n_obs];
    // log b_n, up to a common constant
    let mut back: BTreeMap<CountVector, f64> = BTreeMap::from([(CountVector::zeros(theta.k()), 0.0)]);
    for i in (0..n_obs).rev() {
        let filtered = &trace.steps[i].filtered;
        let mut logs: BTreeMap<CountVector, f64> = BTreeMap::new();
        for (m, w) in filtered.iter() {
            for (n, lb) in &back {
                let l = w.ln() + lb + log_combination(theta, m, n);
                let e = logs.entry(m.add(n)).or_insert(f64::NEG_INFINITY);
                *e = log_sum_exp([*e, l]);
            }
        }
        out[i] = Some(DirichletMixture::from_log_weights(theta.clone(), logs)?.0);
        if i == 0 {
            break;
        }
        // h_{i-1} = P_Δ[f(y_i | ·) h_i]
        let y = &data[i].y;
        let dt = data[i].t - data[i - 1].t;
        let shifted: Vec<(CountVector, f64)> = back
            .iter()
            .map(|(n, lb)| {
                let np = n.add(y);
                let l = lb + log_duality_constant(theta, n) - log_duality_constant(theta, &np);
                (np, l)
            })
            .collect();
        let top = shifted.iter().map(|(_, l)| *l).fold(f64::NEG_INFINITY, f64::max);
        let mut next: BTreeMap<CountVector, f64> = BTreeMap::new();
        for (np, l) in &shifted {
            let scale = (l - top).exp();
            let row = rows.row(np.total(), dt)?;
            for low in np.lower_set() {
                let p = row[low.total() as usize] * hypergeom_pmf(&low, np);
                if p > 0.0 {
                    *next.entry(low).or_insert(0.0) += scale * p;
                }
            }
        }
        back = next.into_iter().filter(|(_, v)| *v > 0.0).map(|(n, v)| (n, v.ln())).collect();
    }
    Ok(out.into_iter().map(|m| m.expect("every index filled")).collect())
}

/// One accepted clock path with its bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClockPosteriorSample {
    /// Calendar times at which the clock was drawn.
    pub times: Vec<f64>,
    /// Operational times `C(t_i)`.
    pub r: Vec<f64>,
    /// Proposals used, including the accepted one.
    pub attempts: u64,
    /// `log` of the conditional likelihood of the data given the path.
    pub log_likelihood: f64,
    pub exact_clock: bool,
}

/// Conditional diffusion filter along one operational-time path.
fn conditional_filter(prior: &DirichletMixture, data: &[ObservationRecord], r: &[f64], rows: &mut ConditionalRows) -> Result<Vec<FilterStep>> {
    run_filter(prior, data, &gaps_from(0.0, r.iter().copied()), rows)
}

fn identity_rows(theta: &Theta, tol: f64) -> ConditionalRows {
    ConditionalRows::new(theta.total(), ClockSpec::identity(), tol)
}

/// Clock path at `times` drawn from its posterior given the first
/// `n_conditioning` observations: prior proposals accepted with probability
/// equal to their conditional likelihood, a pmf value and hence at most one.
#[allow(clippy::too_many_arguments)]
fn posterior_path<R: Rng + ?Sized>(
    model: &SwfModel,
    prior: &DirichletMixture,
    data: &[ObservationRecord],
    n_conditioning: usize,
    rows: &mut ConditionalRows,
    grid_step: Option<f64>,
    max_attempts: u64,
    rng: &mut R,
) -> Result<(ClockPosteriorSample, Vec<FilterStep>)> {
    let times: Vec<f64> = data.iter().map(|d| d.t).collect();
    for attempt in 1..=max_attempts {
        let r = sample_clock_path_with(&model.clock, &times, grid_step, rng)?;
        let steps = conditional_filter(prior, data, &r, rows)?;
        let ll: f64 = steps[..n_conditioning].iter().map(|s| s.log_likelihood_increment).sum();
        if rng.random::<f64>() < ll.exp() {
            let exact_clock = clock_path_is_exact(&model.clock, &times);
            return Ok((ClockPosteriorSample { times, r, attempts: attempt, log_likelihood: ll, exact_clock }, steps));
        }
    }
    Err(SwfError::Exhausted { attempts: max_attempts })
}

/// One draw of the clock at the observation times given all the data.
pub fn clock_posterior_sample<R: Rng + ?Sized>(
    model: &SwfModel,
    data: &[ObservationRecord],
    tol: f64,
    grid_step: Option<f64>,
    max_attempts: u64,
    rng: &mut R,
) -> Result<ClockPosteriorSample> {
    model.validate()?;
    let prior = prior_mixture(model)?;
    check_data(&model.theta, data, 0.0)?;
    let mut rows = identity_rows(&model.theta, tol);
    Ok(posterior_path(model, &prior, data, data.len(), &mut rows, grid_step, max_attempts, rng)?.0)
}

/// Settings of the non-Markov filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonMarkovOptions {
    pub clock_draws: usize,
    pub estimator: Estimator,
    pub tol: f64,
    pub ess_floor: f64,
    /// Proposal cap per accepted draw (rejection only).
    pub max_attempts: u64,
    pub grid_step: Option<f64>,
    pub seed: u64,
    pub workers: usize,
}

impl Default for NonMarkovOptions {
    fn default() -> Self {
        NonMarkovOptions {
            clock_draws: 1000,
            estimator: Estimator::ImportanceSampling,
            tol: 1e-10,
            ess_floor: DEFAULT_ESS_FLOOR,
            max_attempts: 1_000_000,
            grid_step: None,
            seed: 0,
            workers: 1,
        }
    }
}

/// Weighted average of mixtures with delta-method standard errors of each weight.
fn average_mixtures(theta: &Theta, mixes: &[&DirichletMixture], weights: &[f64]) -> Result<(DirichletMixture, Vec<ComponentSe>)> {
    let total: f64 = weights.iter().sum();
    let mut mean: BTreeMap<CountVector, f64> = BTreeMap::new();
    for (mix, w) in mixes.iter().zip(weights) {
        for (m, v) in mix.iter() {
            *mean.entry(m.clone()).or_insert(0.0) += w * v / total;
        }
    }
    let se = mean
        .iter()
        .map(|(m, avg)| {
            let var: f64 = mixes.iter().zip(weights).map(|(mix, w)| (w / total).powi(2) * (mix.weight(m) - avg).powi(2)).sum();
            ComponentSe { m: m.clone(), se: var.sqrt() }
        })
        .collect();
    let mix = DirichletMixture::from_weights(theta.clone(), mean)?;
    Ok((mix, se))
}

/// Filter for clocks without the Markov property, integrating the clock
/// path out by Monte Carlo.
///
/// Importance sampling reuses one set of prior paths for every step,
/// weighting by the likelihood of the data seen so far. Rejection draws fresh
/// posterior paths for each step. Weight standard errors are reported per
/// component.
pub fn nonmarkov_filter(model: &SwfModel, data: &[ObservationRecord], opts: &NonMarkovOptions) -> Result<FilterTrace> {
    model.validate()?;
    if opts.clock_draws < 2 {
        return Err(SwfError::Config("at least two clock draws are needed".into()));
    }
    let prior = prior_mixture(model)?;
    check_data(&model.theta, data, 0.0)?;
    let theta = &model.theta;
    let times: Vec<f64> = data.iter().map(|d| d.t).collect();
    let exact_clock = clock_path_is_exact(&model.clock, &times);
    match opts.estimator {
        Estimator::ImportanceSampling => {
            let runs: Vec<Vec<FilterStep>> = par_draws(
                opts.clock_draws,
                opts.seed,
                opts.workers,
                || Ok(identity_rows(theta, opts.tol)),
                |rows, rng| {
                    let r = sample_clock_path_with(&model.clock, &times, opts.grid_step, rng)?;
                    conditional_filter(&prior, data, &r, rows)
                },
            )?;
            let n = runs.len() as f64;
            let mut cum = vec![0.0; runs.len()];
            let mut steps = Vec::with_capacity(data.len());
            let mut ess = Vec::with_capacity(data.len());
            for (i, obs) in data.iter().enumerate() {
                let before: Vec<f64> = cum.clone();
                for (c, run) in cum.iter_mut().zip(&runs) {
                    *c += run[i].log_likelihood_increment;
                }
                let weights_of = |logs: &[f64]| {
                    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    logs.iter().map(|l| (l - top).exp()).collect::<Vec<f64>>()
                };
                let (wp, wf) = (weights_of(&before), weights_of(&cum));
                let step_ess = wf.iter().sum::<f64>().powi(2) / wf.iter().map(|w| w * w).sum::<f64>();
                if !(step_ess >= opts.ess_floor) {
                    return Err(SwfError::Degenerate { ess: step_ess, floor: opts.ess_floor });
                }
                ess.push(step_ess);
                let preds: Vec<&DirichletMixture> = runs.iter().map(|r| &r[i].predictive).collect();
                let filts: Vec<&DirichletMixture> = runs.iter().map(|r| &r[i].filtered).collect();
                let (predictive, pse) = average_mixtures(theta, &preds, &wp)?;
                let (filtered, fse) = average_mixtures(theta, &filts, &wf)?;
                let inc = (log_sum_exp(cum.iter().copied()) - n.ln()) - (log_sum_exp(before.iter().copied()) - n.ln());
                steps.push(FilterStep {
                    t: obs.t,
                    predictive,
                    filtered,
                    log_likelihood_increment: inc,
                    predictive_se: Some(pse),
                    filtered_se: Some(fse),
                });
            }
            let summary = MonteCarloSummary {
                estimator: Estimator::ImportanceSampling,
                clock_draws: opts.clock_draws,
                ess,
                attempts: Vec::new(),
                exact_clock,
            };
            Ok(FilterTrace { steps, monte_carlo: Some(summary) })
        }
        Estimator::Rejection => {
            let mut steps = Vec::with_capacity(data.len());
            let mut attempts = Vec::with_capacity(data.len());
            for (i, obs) in data.iter().enumerate() {
                let upto = &data[..=i];
                // paths to t_i given y_{0:i-1} carry the predictive; given y_{0:i}, the filtered law
                let draw_runs = |cond: usize, seed: u64| {
                    par_draws(
                        opts.clock_draws,
                        seed,
                        opts.workers,
                        || Ok(identity_rows(theta, opts.tol)),
                        |rows, rng| {
                            let (s, run) = posterior_path(model, &prior, upto, cond, rows, opts.grid_step, opts.max_attempts, rng)?;
                            Ok((s.attempts, run.into_iter().nth(i).expect("step i present")))
                        },
                    )
                };
                let pred_runs = draw_runs(i, opts.seed.wrapping_add(2 * i as u64))?;
                let filt_runs = draw_runs(i + 1, opts.seed.wrapping_add(2 * i as u64 + 1))?;
                attempts.push(filt_runs.iter().map(|(a, _)| a).sum());
                let ones = vec![1.0; opts.clock_draws];
                let preds: Vec<&DirichletMixture> = pred_runs.iter().map(|(_, s)| &s.predictive).collect();
                let filts: Vec<&DirichletMixture> = filt_runs.iter().map(|(_, s)| &s.filtered).collect();
                let (predictive, pse) = average_mixtures(theta, &preds, &ones)?;
                let (filtered, fse) = average_mixtures(theta, &filts, &ones)?;
                // the conditional predictive mass of y_i averaged over paths given y_{0:i-1}
                let inc = log_sum_exp(pred_runs.iter().map(|(_, s)| s.log_likelihood_increment)) - (pred_runs.len() as f64).ln();
                steps.push(FilterStep {
                    t: obs.t,
                    predictive,
                    filtered,
                    log_likelihood_increment: inc,
                    predictive_se: Some(pse),
                    filtered_se: Some(fse),
                });
            }
            let summary = MonteCarloSummary {
                estimator: Estimator::Rejection,
                clock_draws: opts.clock_draws,
                ess: Vec::new(),
                attempts,
                exact_clock,
            };
            Ok(FilterTrace { steps, monte_carlo: Some(summary) })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clocks::SubordinatorFamily;
    use crate::parallel::stream_rng;
    use crate::swf_dual::dual_transition_pmf;
    use proptest::prelude::*;

    fn th(v: &[f64]) -> Theta {
        Theta::new(v.to_vec()).unwrap()
    }
    fn cv(v: &[u64]) -> CountVector {
        CountVector::new(v.to_vec())
    }
    fn obs(t: f64, y: &[u64]) -> ObservationRecord {
        ObservationRecord { t, y: cv(y) }
    }
    fn mix(theta: &Theta, comps: &[(&[u64], f64)]) -> DirichletMixture {
        DirichletMixture::new(theta.clone(), comps.iter().map(|(m, w)| (cv(m), *w)).collect()).unwrap()
    }

    #[test]
    fn update_examples() {
        let theta = th(&[1.0, 1.0]);
        let u = update(&DirichletMixture::prior(theta.clone()), &cv(&[2, 0])).unwrap();
        assert_eq!(u.len(), 1);
        assert!((u.weight(&cv(&[2, 0])) - 1.0).abs() < 1e-15);
        let p = mix(&theta, &[(&[0, 0], 0.5), (&[1, 0], 0.5)]);
        assert_eq!(update(&p, &cv(&[0, 0])).unwrap(), p);
        let u = update(&p, &cv(&[1, 0])).unwrap();
        assert!((u.weight(&cv(&[1, 0])) - 3.0 / 7.0).abs() < 1e-12);
        assert!((u.weight(&cv(&[2, 0])) - 4.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn predict_examples() {
        let theta = th(&[1.0, 1.0]);
        let start = mix(&theta, &[(&[1, 0], 1.0)]);
        let p = predict(&start, 1.0, &ClockSpec::identity(), 1e-12).unwrap();
        assert!((p.weight(&cv(&[1, 0])) - (-1f64).exp()).abs() < 1e-12);
        assert!((p.weight(&cv(&[0, 0])) - (1.0 - (-1f64).exp())).abs() < 1e-12);
        let big = mix(&theta, &[(&[3, 2], 0.6), (&[1, 4], 0.4)]);
        let far = predict(&big, 50.0, &ClockSpec::identity(), 1e-12).unwrap();
        assert!(far.weight(&cv(&[0, 0])) > 0.999);
        let clock = ClockSpec::Sub(SubordinatorFamily::stable(0.7, 0.0).unwrap());
        let single = mix(&theta, &[(&[2, 1], 1.0)]);
        let p = predict(&single, 0.8, &clock, 1e-12).unwrap();
        let lam = 3.0 * 4.0 / 2.0;
        assert!((p.weight(&cv(&[2, 1])) - (-0.8 * f64::powf(lam, 0.7)).exp()).abs() < 1e-10);
    }

    #[test]
    fn predict_reproduces_dual_rows() {
        let theta = th(&[0.5, 1.2, 0.8]);
        let from = cv(&[2, 1, 2]);
        let clock = ClockSpec::InverseOf(SubordinatorFamily::stable(0.5, 0.0).unwrap());
        let p = predict(&DirichletMixture::new(theta.clone(), vec![(from.clone(), 1.0)]).unwrap(), 0.6, &clock, 1e-12).unwrap();
        for l in from.lower_set() {
            let direct = dual_transition_pmf(&theta, &clock, 0.6, &from, &l, 1e-12).unwrap();
            assert!((p.weight(&l) - direct).abs() < 1e-12 || direct < PRUNE_BELOW, "{l:?}");
        }
    }

    #[test]
    fn single_observation_likelihood_is_dirichlet_multinomial() {
        let theta = th(&[0.7, 1.3]);
        let model = SwfModel::new(theta, ClockSpec::identity(), Initial::Stationary).unwrap();
        let trace = filter(&model, &[obs(0.0, &[3, 1])], 1e-12).unwrap();
        // C(4,3) Γ(2)/Γ(6) Γ(3.7)Γ(2.3)/(Γ(0.7)Γ(1.3)) = 4 (0.7·1.7·2.7)(1.3)/(2·3·4·5)
        let exact = (4.0 * 0.7 * 1.7 * 2.7 * 1.3 / 120.0f64).ln();
        assert!((log_marginal_likelihood(&trace) - exact).abs() < 1e-12);
    }

    fn sample_data() -> Vec<ObservationRecord> {
        vec![obs(0.0, &[2, 0]), obs(0.4, &[1, 1]), obs(1.0, &[0, 2]), obs(1.3, &[2, 1])]
    }

    #[test]
    fn likelihood_chains_across_a_split() {
        let theta = th(&[1.0, 0.5]);
        let clock = ClockSpec::Sub(SubordinatorFamily::gamma(1.0, 1.0, 0.2).unwrap());
        let model = SwfModel::new(theta.clone(), clock, Initial::Stationary).unwrap();
        let data = sample_data();
        let full = log_marginal_likelihood(&filter(&model, &data, 1e-12).unwrap());
        let first = filter(&model, &data[..2], 1e-12).unwrap();
        let rest = filter_from(&first.steps[1].filtered, data[1].t, &clock, &data[2..], 1e-12).unwrap();
        let chained = log_marginal_likelihood(&first) + log_marginal_likelihood(&rest);
        assert!((full - chained).abs() < 1e-10, "{full} vs {chained}");
    }

    #[test]
    fn support_respects_counting_bound() {
        let theta = th(&[1.0, 1.0]);
        let model = SwfModel::new(theta, ClockSpec::identity(), Initial::Stationary).unwrap();
        let data = sample_data();
        let trace = filter(&model, &data, 1e-12).unwrap();
        let mut totals = [1u64, 1];
        for (step, d) in trace.steps.iter().zip(&data) {
            totals[0] += d.y.counts()[0];
            totals[1] += d.y.counts()[1];
            assert!(step.filtered.len() as u64 <= totals[0] * totals[1]);
        }
    }

    #[test]
    fn terminal_smoother_equals_filter() {
        let theta = th(&[1.0, 1.0]);
        let model = SwfModel::new(theta, ClockSpec::identity(), Initial::Stationary).unwrap();
        let data = sample_data();
        let trace = filter(&model, &data, 1e-12).unwrap();
        let sm = smooth(&model, &data, 1e-12).unwrap();
        let last = sm.last().unwrap();
        for (m, w) in trace.steps.last().unwrap().filtered.iter() {
            assert!((last.weight(m) - w).abs() < 1e-12);
        }
        for s in &sm {
            assert!((s.total_weight() - 1.0).abs() < 1e-10);
        }
    }

    // Identity-clock transition density on [0,1] for K = 2.
    fn wf_density(theta: (f64, f64), t: f64, x: f64, y: f64) -> f64 {
        use statrs::distribution::{Beta, Binomial, Continuous, Discrete};
        let qs: Vec<f64> = {
            let mut tab = crate::swf_dual::SeriesTable::classical(theta.0 + theta.1, t).unwrap();
            (0..80).map(|m| tab.weight(m, 1e-14).unwrap()).collect()
        };
        let mut v = 0.0;
        for (m, q) in qs.iter().enumerate() {
            let bin = Binomial::new(x, m as u64).unwrap();
            for l in 0..=m {
                v += q * bin.pmf(l as u64) * Beta::new(theta.0 + l as f64, theta.1 + (m - l) as f64).unwrap().pdf(y);
            }
        }
        v
    }

    #[test]
    fn smoother_matches_quadrature_for_two_observations() {
        let theta = th(&[1.0, 1.0]);
        let model = SwfModel::new(theta, ClockSpec::identity(), Initial::Stationary).unwrap();
        let data = vec![obs(0.0, &[2, 0]), obs(0.7, &[0, 1])];
        let sm = smooth(&model, &data, 1e-12).unwrap();
        // p(x0 | y0, y1) ∝ x0² ∫ p(x0, x1) (1 - x1) dx1 on a midpoint grid
        let n = 400;
        let grid: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let (mut num, mut den) = (0.0, 0.0);
        for &x0 in &grid {
            let inner: f64 = grid.iter().map(|&x1| wf_density((1.0, 1.0), 0.7, x0, x1) * (1.0 - x1)).sum::<f64>() / n as f64;
            let w = x0 * x0 * inner;
            num += x0 * w;
            den += w;
        }
        let oracle = num / den;
        assert!((sm[0].mean()[0] - oracle).abs() < 1e-4, "{} vs {oracle}", sm[0].mean()[0]);
    }

    #[test]
    fn trace_json_round_trip() {
        let theta = th(&[1.0, 1.0]);
        let model = SwfModel::new(theta, ClockSpec::identity(), Initial::Stationary).unwrap();
        let trace = filter(&model, &sample_data(), 1e-12).unwrap();
        let s = serde_json::to_string(&trace).unwrap();
        let back: FilterTrace = serde_json::from_str(&s).unwrap();
        assert_eq!(back, trace);
        assert!(s.contains("\"components\":[{\"m\":[2,0],\"w\":1.0}]"));
    }

    #[test]
    fn input_validation() {
        let theta = th(&[1.0, 1.0]);
        assert!(DirichletMixture::new(theta.clone(), vec![(cv(&[0, 0]), 0.5)]).is_err());
        assert!(DirichletMixture::new(theta.clone(), vec![(cv(&[0, 0, 1]), 1.0)]).is_err());
        let model = SwfModel::new(theta.clone(), ClockSpec::identity(), Initial::Stationary).unwrap();
        assert!(filter(&model, &[obs(1.0, &[1, 0]), obs(1.0, &[0, 1])], 1e-12).is_err());
        let inv = SwfModel::new(theta, ClockSpec::InverseOf(SubordinatorFamily::stable(0.5, 0.0).unwrap()), Initial::Stationary).unwrap();
        assert!(matches!(filter(&inv, &[obs(0.0, &[1, 0])], 1e-12), Err(SwfError::Config(_))));
    }

    fn inverse_model() -> SwfModel {
        SwfModel::new(th(&[1.0, 1.0]), ClockSpec::InverseOf(SubordinatorFamily::stable(0.5, 0.0).unwrap()), Initial::Stationary).unwrap()
    }

    #[test]
    fn clock_posterior_without_data_is_the_prior() {
        let mut rng = stream_rng(3, 0);
        let s = clock_posterior_sample(&inverse_model(), &[], 1e-12, None, 10, &mut rng).unwrap();
        assert_eq!(s.attempts, 1);
        assert!(s.r.is_empty());
    }

    #[test]
    fn clock_posterior_matches_importance_weights() {
        let model = inverse_model();
        let data = vec![obs(0.0, &[2, 0]), obs(1.0, &[0, 2])];
        let mut rng = stream_rng(4, 0);
        let n = 4000;
        let (mut acc, mut acc2, mut tries) = (0.0, 0.0, 0u64);
        for _ in 0..n {
            let s = clock_posterior_sample(&model, &data, 1e-12, None, 100_000, &mut rng).unwrap();
            acc += s.r[1];
            acc2 += s.r[1] * s.r[1];
            tries += s.attempts;
        }
        let mean = acc / n as f64;
        let se = ((acc2 / n as f64 - mean * mean) / n as f64).sqrt();
        // importance-weighted prior draws
        let prior = prior_mixture(&model).unwrap();
        let mut rows = identity_rows(&model.theta, 1e-12);
        let (mut wsum, mut wr, mut lik) = (0.0, 0.0, Vec::new());
        for _ in 0..40_000 {
            let r = sample_clock_path_with(&model.clock, &[0.0, 1.0], None, &mut rng).unwrap();
            let steps = conditional_filter(&prior, &data, &r, &mut rows).unwrap();
            let w: f64 = steps.iter().map(|s| s.log_likelihood_increment).sum::<f64>().exp();
            wsum += w;
            wr += w * r[1];
            lik.push(w);
        }
        let is_mean = wr / wsum;
        assert!((mean - is_mean).abs() < 4.0 * se, "{mean} ± {se} vs {is_mean}");
        let rate = n as f64 / tries as f64;
        let ml = wsum / lik.len() as f64;
        let ml_se = (lik.iter().map(|w| (w - ml).powi(2)).sum::<f64>() / (lik.len() as f64).powi(2)).sqrt();
        let rate_se = (rate * (1.0 - rate) / tries as f64).sqrt();
        assert!((rate - ml).abs() < 3.0 * (rate_se * rate_se + ml_se * ml_se).sqrt(), "{rate} vs {ml}");
    }

    #[test]
    fn nonmarkov_estimators_agree() {
        let model = inverse_model();
        let data = vec![obs(0.0, &[2, 0]), obs(0.5, &[1, 1])];
        let is = nonmarkov_filter(&model, &data, &NonMarkovOptions { clock_draws: 4000, seed: 1, ..Default::default() }).unwrap();
        let rej = nonmarkov_filter(
            &model,
            &data,
            &NonMarkovOptions { clock_draws: 2000, seed: 2, estimator: Estimator::Rejection, ..Default::default() },
        )
        .unwrap();
        for (a, b) in is.steps.iter().zip(&rej.steps) {
            assert!((a.filtered.total_weight() - 1.0).abs() < 1e-8);
            for (m, w) in a.filtered.iter() {
                let sa = a.filtered_se.as_ref().unwrap().iter().find(|c| &c.m == m).unwrap().se;
                let sb = b.filtered_se.as_ref().unwrap().iter().find(|c| &c.m == m).map_or(0.0, |c| c.se);
                assert!((w - b.filtered.weight(m)).abs() < 4.0 * (sa * sa + sb * sb).sqrt() + 1e-9, "{m:?}: {w} vs {}", b.filtered.weight(m));
            }
        }
        let (la, lb) = (log_marginal_likelihood(&is), log_marginal_likelihood(&rej));
        assert!((la - lb).abs() < 0.05, "{la} vs {lb}");
    }

    #[test]
    fn degenerate_importance_weights_are_reported() {
        let model = inverse_model();
        let data: Vec<ObservationRecord> = (0..6).map(|i| obs(i as f64, if i % 2 == 0 { &[40, 0] } else { &[0, 40] })).collect();
        let e = nonmarkov_filter(&model, &data, &NonMarkovOptions { clock_draws: 50, ess_floor: 10.0, ..Default::default() });
        assert!(matches!(e, Err(SwfError::Degenerate { .. })), "{e:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn update_and_predict_stay_normalized(
            comps in proptest::collection::btree_map((0u64..4, 0u64..4), 0.01f64..1.0, 1..6),
            y in (0u64..4, 0u64..4),
            dt in 0.01f64..3.0,
        ) {
            let theta = th(&[0.6, 1.4]);
            let total: f64 = comps.values().sum();
            let m = DirichletMixture::new(theta, comps.iter().map(|((a, b), w)| (cv(&[*a, *b]), w / total)).collect()).unwrap();
            let u = update(&m, &cv(&[y.0, y.1])).unwrap();
            prop_assert!((u.total_weight() - 1.0).abs() < 1e-10);
            let clock = ClockSpec::Sub(SubordinatorFamily::stable(0.7, 0.01).unwrap());
            let p = predict(&u, dt, &clock, 1e-12).unwrap();
            prop_assert!((p.total_weight() - 1.0).abs() < 1e-10);
            prop_assert!(p.iter().all(|(_, w)| w >= PRUNE_BELOW));
            // keys only move down: every key lies below some key of the input
            prop_assert!(p.iter().all(|(l, _)| u.iter().any(|(k, _)| l.le(k))));
        }
    }
}
