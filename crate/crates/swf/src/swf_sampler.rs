//! Transition and path sampling for Wright–Fisher diffusions on random clocks.
//!
//! A transition draw picks the number `M` of surviving dual lineages, then
//! `L ~ Multinomial(M, x)` and `Dirichlet(θ + L)`. `M` comes either from the
//! classical entrance law at a sampled operational time (option A) or
//! directly from the subordinated entrance law (option B).

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::str::FromStr;

use crate::clocks::{clock_path_is_exact, sample_clock_path_with, ClockSpec};
use crate::error::{Result, SwfError};
use crate::filtering::DirichletMixture;
use crate::parallel::par_draws;
use crate::swf_dual::{check_admissible, entrance_small_time_draw, series_table, Admissibility, DualWeightQuery, SeriesTable};
use crate::wf_core::{dirichlet_sample, dirichlet_sample_shifted, multinomial_sample, SimplexPoint, Theta};

/// Operational times below this are drawn from the normal approximation by default.
pub const DEFAULT_SMALL_TIME_FLOOR: f64 = 1e-3;

/// How the initial state of a path is chosen.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Initial {
    FixedPoint {
        x: SimplexPoint,
    },
    #[default]
    Stationary,
    Mixture {
        mixture: DirichletMixture,
    },
}

/// A diffusion with mutation `θ` run on `clock`, started from `initial`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwfModel {
    pub theta: Theta,
    pub clock: ClockSpec,
    #[serde(default)]
    pub initial: Initial,
}

impl SwfModel {
    pub fn new(theta: Theta, clock: ClockSpec, initial: Initial) -> Result<Self> {
        let m = SwfModel { theta, clock, initial };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.clock.validate()?;
        let k = match &self.initial {
            Initial::FixedPoint { x } => x.k(),
            Initial::Stationary => self.theta.k(),
            Initial::Mixture { mixture } => {
                if mixture.theta() != &self.theta {
                    return Err(SwfError::Config("initial mixture has a different θ from the model".into()));
                }
                mixture.theta().k()
            }
        };
        if k != self.theta.k() {
            return Err(SwfError::Config(format!("initial state has dimension {k}, θ has {}", self.theta.k())));
        }
        Ok(())
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SimplexPoint> {
        match &self.initial {
            Initial::FixedPoint { x } => Ok(x.clone()),
            Initial::Stationary => Ok(dirichlet_sample(&self.theta, rng)),
            Initial::Mixture { mixture } => mixture.sample(rng),
        }
    }
}

/// Which route produces the dual count `M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Sample the clock, then the classical entrance law at that time.
    #[serde(rename = "A")]
    OptionA,
    /// Sample the subordinated entrance law directly.
    #[serde(rename = "B")]
    OptionB,
    #[serde(rename = "auto")]
    Auto,
}

impl FromStr for Mode {
    type Err = SwfError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" | "option-a" | "option_a" => Ok(Mode::OptionA),
            "b" | "option-b" | "option_b" => Ok(Mode::OptionB),
            "auto" => Ok(Mode::Auto),
            other => Err(SwfError::Config(format!("unknown sampling mode '{other}' (expected A, B or auto)"))),
        }
    }
}

/// Knobs shared by the transition and path samplers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    /// Grid step for first-crossing draws of inverse clocks without an exact sampler.
    pub grid_step: Option<f64>,
    /// Operational times below this use the normal approximation to the
    /// entrance law (flagged inexact); 0 keeps every draw exact.
    pub small_time_floor: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { grid_step: None, small_time_floor: DEFAULT_SMALL_TIME_FLOOR }
    }
}

/// A sampled state and whether every step that produced it was exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub x: SimplexPoint,
    pub exact: bool,
}

/// Dual count at one operational time: `None` when the time is zero (no move).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DualCount {
    pub m: Option<u64>,
    pub exact: bool,
}

/// Classical entrance-law draws at varying operational times, keeping the
/// table of the last time for reuse.
#[derive(Debug, Default)]
struct ClassicalDraws {
    last: Option<(f64, SeriesTable)>,
}

impl ClassicalDraws {
    fn draw<R: Rng + ?Sized>(&mut self, theta_total: f64, s: f64, floor: f64, rng: &mut R) -> Result<DualCount> {
        if s == 0.0 {
            return Ok(DualCount { m: None, exact: true });
        }
        if s < floor {
            return Ok(DualCount { m: Some(entrance_small_time_draw(theta_total, s, rng)), exact: false });
        }
        if !matches!(&self.last, Some((t, _)) if *t == s) {
            self.last = Some((s, SeriesTable::classical(theta_total, s)?));
        }
        let (_, table) = self.last.as_mut().expect("set above");
        Ok(DualCount { m: Some(table.sample(rng)?), exact: true })
    }
}

const HUGE_DUAL_COUNT: f64 = 1e15;

fn move_point<R: Rng + ?Sized>(theta: &Theta, x: &SimplexPoint, count: DualCount, rng: &mut R) -> Result<SimplexPoint> {
    match count.m {
        None => Ok(x.clone()),
        // the spread about x is of order m^{-1/2}; beyond this the multinomial overflows
        Some(m) if m as f64 > HUGE_DUAL_COUNT => Ok(x.clone()),
        Some(m) => {
            let l = multinomial_sample(m, x, rng);
            dirichlet_sample_shifted(theta, &l, rng)
        }
    }
}

/// Repeated transition draws over a fixed horizon `t`, with the series
/// tables memoized across draws.
#[derive(Debug)]
pub struct TransitionSampler {
    theta: Theta,
    clock: ClockSpec,
    t: f64,
    mode: Mode,
    config: SamplerConfig,
    entrance: Option<SeriesTable>,
    classical: ClassicalDraws,
}

impl TransitionSampler {
    pub fn new(theta: Theta, clock: ClockSpec, t: f64, mode: Mode, config: SamplerConfig) -> Result<Self> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(SwfError::Domain(format!("transition time must be finite and > 0, got {t}")));
        }
        clock.validate()?;
        let admissible = check_admissible(&clock, theta.total());
        let mode = match mode {
            Mode::OptionB => {
                if let Admissibility::NotAdmissible(reason) = admissible {
                    return Err(SwfError::Inadmissible(reason));
                }
                Mode::OptionB
            }
            Mode::Auto if matches!(clock, ClockSpec::Sub(_)) && admissible.is_admissible() => Mode::OptionB,
            _ => Mode::OptionA,
        };
        let entrance = if mode == Mode::OptionB {
            Some(series_table(&DualWeightQuery { theta_total: theta.total(), clock, t, start_total: None })?)
        } else {
            None
        };
        Ok(TransitionSampler { theta, clock, t, mode, config, entrance, classical: ClassicalDraws::default() })
    }

    /// The route in use after resolving `Auto`.
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn sample_count<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<DualCount> {
        if let Some(table) = self.entrance.as_mut() {
            return Ok(DualCount { m: Some(table.sample(rng)?), exact: true });
        }
        let s = sample_clock_path_with(&self.clock, &[self.t], self.config.grid_step, rng)?[0];
        let mut c = self.classical.draw(self.theta.total(), s, self.config.small_time_floor, rng)?;
        c.exact &= clock_path_is_exact(&self.clock, &[self.t]);
        Ok(c)
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, x: &SimplexPoint, rng: &mut R) -> Result<Draw> {
        if x.k() != self.theta.k() {
            return Err(SwfError::Domain(format!("point has dimension {}, θ has {}", x.k(), self.theta.k())));
        }
        let count = self.sample_count(rng)?;
        Ok(Draw { x: move_point(&self.theta, x, count, rng)?, exact: count.exact })
    }
}

/// One draw from the transition law of `model` over time `t` started at `x`.
pub fn swf_transition_sample<R: Rng + ?Sized>(model: &SwfModel, x: &SimplexPoint, t: f64, mode: Mode, rng: &mut R) -> Result<Draw> {
    TransitionSampler::new(model.theta.clone(), model.clock, t, mode, SamplerConfig::default())?.sample(x, rng)
}

/// `n` transition draws from `x` on independent streams of `seed`.
#[allow(clippy::too_many_arguments)]
pub fn sample_transitions(
    theta: &Theta,
    clock: &ClockSpec,
    x: &SimplexPoint,
    t: f64,
    mode: Mode,
    config: SamplerConfig,
    n: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<Draw>> {
    par_draws(
        n,
        seed,
        workers,
        || TransitionSampler::new(theta.clone(), *clock, t, mode, config),
        |s, rng| s.sample(x, rng),
    )
}

/// States at the requested times and whether the whole path is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct PathDraw {
    pub points: Vec<SimplexPoint>,
    pub exact: bool,
}

/// Path draws for one model on one time grid, reusing per-increment tables.
#[derive(Debug)]
pub struct PathSampler {
    model: SwfModel,
    times: Vec<f64>,
    mode: Mode,
    config: SamplerConfig,
    steps: HashMap<u64, TransitionSampler>,
    classical: ClassicalDraws,
}

impl PathSampler {
    pub fn new(model: SwfModel, times: Vec<f64>, mode: Mode, config: SamplerConfig) -> Result<Self> {
        model.validate()?;
        if times.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) || times.windows(2).any(|w| w[1] < w[0]) {
            return Err(SwfError::Domain("path times must be finite, >= 0 and ascending".into()));
        }
        Ok(PathSampler { model, times, mode, config, steps: HashMap::new(), classical: ClassicalDraws::default() })
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<PathDraw> {
        let theta = self.model.theta.clone();
        let mut x = self.model.sample_initial(rng)?;
        let mut points = Vec::with_capacity(self.times.len());
        let mut exact = true;
        if self.model.clock.is_markov() {
            let mut prev = 0.0;
            for &t in &self.times {
                let dt = t - prev;
                prev = t;
                if dt > 0.0 {
                    let step = match self.steps.entry(dt.to_bits()) {
                        std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
                        std::collections::hash_map::Entry::Vacant(e) => {
                            e.insert(TransitionSampler::new(theta.clone(), self.model.clock, dt, self.mode, self.config)?)
                        }
                    };
                    let d = step.sample(&x, rng)?;
                    exact &= d.exact;
                    x = d.x;
                }
                points.push(x.clone());
            }
        } else {
            if self.mode == Mode::OptionB {
                return Err(SwfError::Inadmissible(
                    "option B needs a subordinator clock; inverse and composed clocks are sampled through their clock path".into(),
                ));
            }
            let ops = sample_clock_path_with(&self.model.clock, &self.times, self.config.grid_step, rng)?;
            exact &= clock_path_is_exact(&self.model.clock, &self.times);
            let mut prev = 0.0;
            for s in ops {
                let c = self.classical.draw(theta.total(), s - prev, self.config.small_time_floor, rng)?;
                prev = s;
                exact &= c.exact;
                x = move_point(&theta, &x, c, rng)?;
                points.push(x.clone());
            }
        }
        Ok(PathDraw { points, exact })
    }
}

/// One path of `model` observed at ascending `times`.
pub fn swf_path_sample<R: Rng + ?Sized>(model: &SwfModel, times: &[f64], mode: Mode, rng: &mut R) -> Result<PathDraw> {
    PathSampler::new(model.clone(), times.to_vec(), mode, SamplerConfig::default())?.sample(rng)
}

/// `n` independent paths on streams of `seed`.
pub fn sample_paths(
    model: &SwfModel,
    times: &[f64],
    mode: Mode,
    config: SamplerConfig,
    n: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<PathDraw>> {
    par_draws(n, seed, workers, || PathSampler::new(model.clone(), times.to_vec(), mode, config), |s, rng| s.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clocks::SubordinatorFamily;
    use crate::parallel::stream_rng;
    use crate::special_fn::mittag_leffler_neg;
    use proptest::prelude::*;

    fn th(v: &[f64]) -> Theta {
        Theta::new(v.to_vec()).unwrap()
    }
    fn pt(v: &[f64]) -> SimplexPoint {
        SimplexPoint::new(v.to_vec()).unwrap()
    }

    fn ks(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (mut i, mut j, mut d) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        d
    }

    fn first_coords(draws: &[Draw]) -> Vec<f64> {
        draws.iter().map(|d| d.x.coords()[0]).collect()
    }

    // 1% two-sample critical value
    fn ks_crit(n: usize, m: usize) -> f64 {
        1.628 * ((n + m) as f64 / (n * m) as f64).sqrt()
    }

    fn mean_se(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (var / n).sqrt())
    }

    #[test]
    fn options_agree_in_law() {
        let theta = th(&[0.5, 0.5]);
        let x = pt(&[0.5, 0.5]);
        let n = 100_000;
        for (i, clock) in [ClockSpec::identity(), ClockSpec::Sub(SubordinatorFamily::stable(0.7, 0.0).unwrap())].iter().enumerate() {
            let cfg = SamplerConfig::default();
            let a = sample_transitions(&theta, clock, &x, 1.0, Mode::OptionA, cfg, n, 10 + i as u64, 1).unwrap();
            let b = sample_transitions(&theta, clock, &x, 1.0, Mode::OptionB, cfg, n, 20 + i as u64, 1).unwrap();
            let d = ks(first_coords(&a), first_coords(&b));
            assert!(d < ks_crit(n, n), "{clock:?}: KS {d}");
        }
    }

    #[test]
    fn long_horizon_reaches_the_dirichlet_moments() {
        let theta = th(&[0.5, 1.5]);
        let x = pt(&[0.9, 0.1]);
        let draws = sample_transitions(&theta, &ClockSpec::identity(), &x, 50.0, Mode::Auto, SamplerConfig::default(), 20_000, 3, 1).unwrap();
        let (m, se) = mean_se(&first_coords(&draws));
        assert!((m - 0.25).abs() < 3.0 * se, "{m} ± {se}");
        let sq: Vec<f64> = draws.iter().map(|d| d.x.coords()[0].powi(2)).collect();
        let (m2, se2) = mean_se(&sq);
        // E[X²] = a(a+1)/(s(s+1)) for Beta(a, s-a)
        let exact = 0.5 * 1.5 / (2.0 * 3.0);
        assert!((m2 - exact).abs() < 3.0 * se2, "{m2} vs {exact}");
    }

    #[test]
    fn mode_resolution() {
        let theta = th(&[1.0, 1.0]);
        let cfg = SamplerConfig::default();
        let stable = |a| SubordinatorFamily::stable(a, 0.0).unwrap();
        let s = TransitionSampler::new(theta.clone(), ClockSpec::Sub(stable(0.7)), 1.0, Mode::Auto, cfg).unwrap();
        assert_eq!(s.mode(), Mode::OptionB);
        let s = TransitionSampler::new(theta.clone(), ClockSpec::Sub(stable(0.3)), 1.0, Mode::Auto, cfg).unwrap();
        assert_eq!(s.mode(), Mode::OptionA);
        let s = TransitionSampler::new(theta.clone(), ClockSpec::InverseOf(stable(0.5)), 1.0, Mode::Auto, cfg).unwrap();
        assert_eq!(s.mode(), Mode::OptionA);
        let e = TransitionSampler::new(theta.clone(), ClockSpec::Sub(stable(0.3)), 1.0, Mode::OptionB, cfg).unwrap_err();
        assert!(matches!(e, SwfError::Inadmissible(_)));
        let e = TransitionSampler::new(theta, ClockSpec::InverseOf(stable(0.5)), 1.0, Mode::OptionB, cfg).unwrap_err();
        assert!(matches!(e, SwfError::Inadmissible(_)));
        assert_eq!("b".parse::<Mode>().unwrap(), Mode::OptionB);
        assert!("c".parse::<Mode>().is_err());
    }

    #[test]
    fn small_operational_times_are_flagged() {
        let theta = th(&[1.0, 1.0]);
        let x = pt(&[0.3, 0.7]);
        let mut rng = stream_rng(5, 0);
        let cfg = SamplerConfig { grid_step: None, small_time_floor: 0.01 };
        let mut s = TransitionSampler::new(theta.clone(), ClockSpec::identity(), 0.005, Mode::OptionA, cfg).unwrap();
        assert!(!s.sample(&x, &mut rng).unwrap().exact);
        let exact_cfg = SamplerConfig { grid_step: None, small_time_floor: 0.0 };
        let mut s = TransitionSampler::new(theta, ClockSpec::identity(), 0.005, Mode::OptionA, exact_cfg).unwrap();
        assert!(s.sample(&x, &mut rng).unwrap().exact);
    }

    #[test]
    fn small_time_approximation_tracks_the_exact_law() {
        let mut rng = stream_rng(8, 0);
        for &(th, s) in &[(1.0, 0.01), (4.0, 0.01), (0.3, 0.02)] {
            let mut table = SeriesTable::classical(th, s).unwrap();
            let exact: Vec<f64> = (0..4000).map(|_| table.sample(&mut rng).unwrap() as f64).collect();
            let approx: Vec<f64> = (0..4000).map(|_| entrance_small_time_draw(th, s, &mut rng) as f64).collect();
            let (me, _) = mean_se(&exact);
            let (ma, _) = mean_se(&approx);
            assert!((me - ma).abs() / me < 0.02, "th={th} s={s}: {me} vs {ma}");
        }
    }

    #[test]
    fn single_time_path_matches_transition() {
        let theta = th(&[0.5, 0.5]);
        let x = pt(&[0.2, 0.8]);
        let clock = ClockSpec::Sub(SubordinatorFamily::gamma(1.0, 1.0, 0.1).unwrap());
        let model = SwfModel::new(theta.clone(), clock, Initial::FixedPoint { x: x.clone() }).unwrap();
        let n = 20_000;
        let p = sample_paths(&model, &[0.7], Mode::Auto, SamplerConfig::default(), n, 1, 1).unwrap();
        let t = sample_transitions(&theta, &clock, &x, 0.7, Mode::Auto, SamplerConfig::default(), n, 2, 1).unwrap();
        let d = ks(p.iter().map(|d| d.points[0].coords()[0]).collect(), first_coords(&t));
        assert!(d < ks_crit(n, n), "KS {d}");
    }

    // corr(X₁(0), X₁(Δ)) under stationarity equals Φ_Δ(λ₁) with λ₁ = |θ|/2
    fn lag_correlation(clock: ClockSpec, lag: f64, n: usize, seed: u64) -> (f64, f64) {
        let theta = th(&[1.0, 1.0]);
        let model = SwfModel::new(theta, clock, Initial::Stationary).unwrap();
        let paths = sample_paths(&model, &[0.0, lag], Mode::Auto, SamplerConfig::default(), n, seed, 1).unwrap();
        // Beta(1,1) has mean 1/2 and variance 1/12
        let prods: Vec<f64> =
            paths.iter().map(|p| 12.0 * (p.points[0].coords()[0] - 0.5) * (p.points[1].coords()[0] - 0.5)).collect();
        mean_se(&prods)
    }

    #[test]
    fn lag_correlations_match_the_clock_laplace_transform() {
        let (c, se) = lag_correlation(ClockSpec::identity(), 0.5, 100_000, 31);
        let exact = (-0.5f64).exp();
        assert!((c - exact).abs() < 3.0 * se, "identity {c} vs {exact} ± {se}");
        let inv = ClockSpec::InverseOf(SubordinatorFamily::stable(0.5, 0.0).unwrap());
        let (c, se) = lag_correlation(inv, 0.5, 100_000, 32);
        let exact = mittag_leffler_neg(0.5, 0.5f64.sqrt());
        assert!((c - exact).abs() < 3.0 * se, "inverse {c} vs {exact} ± {se}");
    }

    #[test]
    fn inverse_clock_memory_is_heavier_at_long_lags() {
        let stable = SubordinatorFamily::stable(0.5, 0.0).unwrap();
        let (ci, sei) = lag_correlation(ClockSpec::InverseOf(stable), 5.0, 40_000, 41);
        let (cs, ses) = lag_correlation(ClockSpec::Sub(stable), 5.0, 40_000, 42);
        assert!(ci - cs > 3.0 * (sei * sei + ses * ses).sqrt(), "inverse {ci} ± {sei}, sub {cs} ± {ses}");
    }

    #[test]
    fn model_json_round_trip() {
        let model = SwfModel::new(
            th(&[0.5, 0.5]),
            ClockSpec::InverseOf(SubordinatorFamily::stable(0.5, 0.0).unwrap()),
            Initial::FixedPoint { x: pt(&[0.4, 0.6]) },
        )
        .unwrap();
        let s = serde_json::to_string(&model).unwrap();
        let back: SwfModel = serde_json::from_str(&s).unwrap();
        assert_eq!(back, model);
        let bad = SwfModel::new(th(&[0.5, 0.5]), ClockSpec::identity(), Initial::FixedPoint { x: pt(&[0.2, 0.3, 0.5]) });
        assert!(bad.is_err());
    }

    #[test]
    fn vanishing_operational_time_keeps_the_point() {
        let mut rng = stream_rng(5, 0);
        let x = pt(&[0.3, 0.7]);
        let mut draws = ClassicalDraws::default();
        let c = draws.draw(1.0, 1e-300, 1e-3, &mut rng).unwrap();
        assert!(!c.exact);
        let y = move_point(&th(&[0.5, 0.5]), &x, c, &mut rng).unwrap();
        assert_eq!(y.coords(), x.coords());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn draws_stay_on_the_simplex(seed in 0u64..1000, t in 0.05f64..3.0, which in 0usize..3) {
            let clock = match which {
                0 => ClockSpec::identity(),
                1 => ClockSpec::Sub(SubordinatorFamily::stable(0.7, 0.0).unwrap()),
                _ => ClockSpec::InverseOf(SubordinatorFamily::stable(0.5, 0.0).unwrap()),
            };
            let mut rng = stream_rng(seed, 0);
            let mut s = TransitionSampler::new(th(&[0.7, 1.1, 0.4]), clock, t, Mode::Auto, SamplerConfig::default()).unwrap();
            let d = s.sample(&pt(&[0.2, 0.5, 0.3]), &mut rng).unwrap();
            let sum: f64 = d.x.coords().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(d.x.coords().iter().all(|v| *v >= 0.0));
        }
    }
}
