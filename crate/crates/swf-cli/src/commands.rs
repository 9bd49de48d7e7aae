//! One function per subcommand.

use clap::Args;
use serde::Serialize;
use std::path::PathBuf;

use swf::clocks::{clock_laplace, ClockSpec, FamilyKind};
use swf::filtering::{
    clock_posterior_sample, filter, log_marginal_likelihood, nonmarkov_filter, smooth, DirichletMixture, Estimator,
    FilterTrace, NonMarkovOptions, ObservationRecord, DEFAULT_ESS_FLOOR,
};
use swf::parallel::{default_workers, par_draws, stream_rng};
use swf::special_fn::mittag_leffler_neg;
use swf::swf_dual::{conditional_row, dual_path_sample, series_table, DualWeightQuery};
use swf::swf_sampler::{sample_paths, Mode, PathSampler, SamplerConfig, TransitionSampler, DEFAULT_SMALL_TIME_FLOOR};
use swf::wf_core::{multinomial_sample, CountVector, SimplexPoint};

use crate::io::{check_normalized, read_data, read_model, write_csv, write_data, write_json, CliError, CliResult};

/// What a command reports back for its manifest.
pub struct RunInfo {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub outputs: Vec<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct TimeGrid {
    /// Explicit comma-separated times.
    #[arg(long, value_delimiter = ',')]
    pub times: Vec<f64>,
    /// Last time of an evenly spaced grid starting at 0.
    #[arg(long)]
    pub t_max: Option<f64>,
    #[arg(long)]
    pub t_step: Option<f64>,
}

impl TimeGrid {
    fn resolve(&self, default_max: f64, default_step: f64) -> CliResult<Vec<f64>> {
        if !self.times.is_empty() {
            return Ok(self.times.clone());
        }
        let max = self.t_max.unwrap_or(default_max);
        let step = self.t_step.unwrap_or(default_step);
        if !(step > 0.0) || !(max >= 0.0) || !max.is_finite() {
            return Err(CliError::Config(format!("time grid needs t_step > 0 and t_max >= 0 (got {step}, {max})")));
        }
        let n = (max / step + 1e-9).floor() as usize;
        Ok((0..=n).map(|i| i as f64 * step).collect())
    }
}

#[derive(Args, Debug, Serialize)]
pub struct Mc {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    pub workers: Option<usize>,
}

impl Mc {
    fn workers(&self) -> usize {
        self.workers.unwrap_or_else(default_workers)
    }
}

#[derive(Args, Debug, Serialize)]
pub struct Sampling {
    /// A, B or auto.
    #[arg(long, default_value = "auto")]
    pub mode: String,
    /// Grid step for inverse clocks that lack an exact path sampler.
    #[arg(long)]
    pub grid_step: Option<f64>,
    /// Operational times below this use the normal approximation (0 for exact draws only).
    #[arg(long, default_value_t = DEFAULT_SMALL_TIME_FLOOR)]
    pub small_time_floor: f64,
}

impl Sampling {
    fn mode(&self) -> CliResult<Mode> {
        Ok(self.mode.parse::<Mode>()?)
    }

    fn config(&self) -> SamplerConfig {
        SamplerConfig { grid_step: self.grid_step, small_time_floor: self.small_time_floor }
    }
}

/// Shortest round-trip form, with an exponent for very small or large values.
fn f(v: f64) -> String {
    format!("{v:?}")
}

fn coord_header(prefix: &str, k: usize) -> impl Iterator<Item = String> + '_ {
    (1..=k).map(move |j| format!("{prefix}{j}"))
}

fn exact_str(e: bool) -> String {
    (if e { "true" } else { "false" }).to_string()
}

#[derive(Args, Debug, Serialize)]
pub struct EigenDecay {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Eigenvalue indices n (λ_n = n(n + |θ| - 1)/2).
    #[arg(long, value_delimiter = ',', default_value = "1,2,5")]
    pub n_list: Vec<u64>,
    #[command(flatten)]
    pub grid: TimeGrid,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
}

pub fn eigen_decay(a: &EigenDecay) -> CliResult<RunInfo> {
    let model = read_model(&a.model)?;
    let times = a.grid.resolve(2.0, 0.05)?;
    // the analytic column exists for inverse driftless stable clocks
    let ml_alpha = match model.clock {
        ClockSpec::InverseOf(fam) if fam.beta == 0.0 => match fam.kind {
            FamilyKind::Stable { alpha } => Some(alpha),
            _ => None,
        },
        _ => None,
    };
    let mut header = vec!["t".to_string(), "n".into(), "lambda".into(), "laplace".into()];
    if ml_alpha.is_some() {
        header.push("mittag_leffler".into());
    }
    let mut rows = Vec::new();
    for &n in &a.n_list {
        let lam = model.theta.lambda_n(n);
        for &t in &times {
            let v = clock_laplace(&model.clock, t, lam, a.tol)?;
            if !(v > 0.0 && v <= 1.0 + 1e-12) {
                return Err(CliError::Numerical(format!("Laplace transform {v} outside (0, 1] at t = {t}, n = {n}")));
            }
            let mut r = vec![f(t), n.to_string(), f(lam), f(v)];
            if let Some(alpha) = ml_alpha {
                r.push(f(mittag_leffler_neg(alpha, lam * t.powf(alpha))));
            }
            rows.push(r);
        }
    }
    write_csv(&a.out, &header, rows)?;
    Ok(RunInfo { seed: None, workers: None, outputs: vec![a.out.clone()] })
}

#[derive(Args, Debug, Serialize)]
pub struct SampleTransition {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated transition times.
    #[arg(long, value_delimiter = ',', required = true)]
    pub t: Vec<f64>,
    /// Start point; without it each draw starts from the model's initial law.
    #[arg(long, value_delimiter = ',')]
    pub x: Vec<f64>,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[command(flatten)]
    pub sampling: Sampling,
    #[command(flatten)]
    pub mc: Mc,
}

pub fn sample_transition(a: &SampleTransition) -> CliResult<RunInfo> {
    let model = read_model(&a.model)?;
    let start = if a.x.is_empty() { None } else { Some(SimplexPoint::new(a.x.clone())?) };
    if let Some(x) = &start {
        if x.k() != model.theta.k() {
            return Err(CliError::Config(format!("--x has {} coordinates, θ has {}", x.k(), model.theta.k())));
        }
    }
    let (mode, config, workers) = (a.sampling.mode()?, a.sampling.config(), a.mc.workers());
    let k = model.theta.k();
    let mut header = vec!["t".to_string(), "draw".into()];
    header.extend(coord_header("x", k));
    header.push("exact".into());
    let mut rows = Vec::new();
    for (i, &t) in a.t.iter().enumerate() {
        // each time gets its own seed so adding times leaves earlier tables unchanged
        let seed = a.mc.seed.wrapping_add((i as u64) << 32);
        let draws = par_draws(
            a.n,
            seed,
            workers,
            || TransitionSampler::new(model.theta.clone(), model.clock, t, mode, config),
            |s, rng| {
                let x = match &start {
                    Some(x) => x.clone(),
                    None => model.sample_initial(rng)?,
                };
                s.sample(&x, rng)
            },
        )?;
        for (d, draw) in draws.into_iter().enumerate() {
            let mut r = vec![f(t), d.to_string()];
            r.extend(draw.x.coords().iter().map(|v| f(*v)));
            r.push(exact_str(draw.exact));
            rows.push(r);
        }
    }
    write_csv(&a.out, &header, rows)?;
    Ok(RunInfo { seed: Some(a.mc.seed), workers: Some(workers), outputs: vec![a.out.clone()] })
}

#[derive(Args, Debug, Serialize)]
pub struct SimulatePath {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub grid: TimeGrid,
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[command(flatten)]
    pub sampling: Sampling,
    #[command(flatten)]
    pub mc: Mc,
}

pub fn simulate_path(a: &SimulatePath) -> CliResult<RunInfo> {
    let model = read_model(&a.model)?;
    let times = a.grid.resolve(2.0, 0.1)?;
    let workers = a.mc.workers();
    // surface configuration errors before any drawing
    PathSampler::new(model.clone(), times.clone(), a.sampling.mode()?, a.sampling.config())?;
    let paths = sample_paths(&model, &times, a.sampling.mode()?, a.sampling.config(), a.n, a.mc.seed, workers)?;
    let mut header = vec!["path".to_string(), "t".into()];
    header.extend(coord_header("x", model.theta.k()));
    header.push("exact".into());
    let rows = paths.iter().enumerate().flat_map(|(p, path)| {
        times.iter().zip(&path.points).map(move |(t, x)| {
            let mut r = vec![p.to_string(), f(*t)];
            r.extend(x.coords().iter().map(|v| f(*v)));
            r.push(exact_str(path.exact));
            r
        })
    });
    write_csv(&a.out, &header, rows)?;
    Ok(RunInfo { seed: Some(a.mc.seed), workers: Some(workers), outputs: vec![a.out.clone()] })
}

#[derive(Args, Debug, Serialize)]
pub struct DualWeights {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated times (all > 0).
    #[arg(long, value_delimiter = ',', required = true)]
    pub t: Vec<f64>,
    /// Start total of the dual; without it the entrance law is tabulated.
    #[arg(long)]
    pub start: Option<u64>,
    #[arg(long, default_value_t = 1e-12)]
    pub tol: f64,
    /// Entrance tables stop once the remaining mass is below this.
    #[arg(long, default_value_t = 1e-10)]
    pub tail_mass: f64,
}

/// Longest entrance table written.
const MAX_ENTRANCE_ROWS: u64 = 1_000_000;

pub fn dual_weights(a: &DualWeights) -> CliResult<RunInfo> {
    let model = read_model(&a.model)?;
    let theta_total = model.theta.total();
    let mut rows = Vec::new();
    for &t in &a.t {
        let weights = match a.start {
            Some(n) => conditional_row(theta_total, &model.clock, t, n, a.tol)?,
            None => {
                let mut table = series_table(&DualWeightQuery { theta_total, clock: model.clock, t, start_total: None })?;
                let mut w = Vec::new();
                let mut m = 0;
                loop {
                    w.push(table.weight(m, a.tol)?.max(0.0));
                    if table.survival(m, a.tol)? < a.tail_mass {
                        break;
                    }
                    m += 1;
                    if m >= MAX_ENTRANCE_ROWS {
                        return Err(CliError::Numerical(format!("entrance table at t = {t} needs more than {MAX_ENTRANCE_ROWS} rows")));
                    }
                }
                w
            }
        };
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-8 {
            return Err(CliError::Numerical(format!("dual weights at t = {t} sum to {total}")));
        }
        rows.extend(weights.iter().enumerate().map(|(m, w)| vec![f(t), m.to_string(), f(*w)]));
    }
    write_csv(&a.out, &["t".into(), "m".into(), "weight".into()], rows)?;
    Ok(RunInfo { seed: None, workers: None, outputs: vec![a.out.clone()] })
}

#[derive(Args, Debug, Serialize)]
pub struct DualPath {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Start counts, comma-separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "start_total")]
    pub start: Vec<u64>,
    /// Start total, split as evenly as possible over the types.
    #[arg(long)]
    pub start_total: Option<u64>,
    #[command(flatten)]
    pub grid: TimeGrid,
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long)]
    pub grid_step: Option<f64>,
    #[command(flatten)]
    pub mc: Mc,
}

pub fn dual_path(a: &DualPath) -> CliResult<RunInfo> {
    let model = read_model(&a.model)?;
    let k = model.theta.k();
    let start = match (a.start.is_empty(), a.start_total) {
        (false, _) => CountVector::new(a.start.clone()),
        (true, Some(n)) => CountVector::new((0..k as u64).map(|j| n / k as u64 + u64::from(j < n % k as u64)).collect()),
        (true, None) => return Err(CliError::Config("dual-path needs --start or --start-total".into())),
    };
    if start.k() != k {
        return Err(CliError::Config(format!("start has {} types, θ has {k}", start.k())));
    }
    let times = a.grid.resolve(2.0, 0.1)?;
    let workers = a.mc.workers();
    let paths = par_draws(a.n, a.mc.seed, workers, || Ok(()), |_, rng| dual_path_sample(&model.theta, &model.clock, &start, &times, a.grid_step, rng))?;
    let mut header = vec!["path".to_string(), "t".into(), "total".into()];
    header.extend(coord_header("m", k));
    let rows = paths.iter().enumerate().flat_map(|(p, path)| {
        times.iter().zip(path).map(move |(t, m)| {
            let mut r = vec![p.to_string(), f(*t), m.total().to_string()];
            r.extend(m.counts().iter().map(u64::to_string));
            r
        })
    });
    write_csv(&a.out, &header, rows)?;
    Ok(RunInfo { seed: Some(a.mc.seed), workers: Some(workers), outputs: vec![a.out.clone()] })
}

#[derive(Args, Debug, Serialize)]
pub struct FilterArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1e-12)]
    pub tol: f64,
}

#[derive(Serialize)]
struct FilterOutput<'a> {
    log_marginal_likelihood: f64,
    #[serde(flatten)]
    trace: &'a FilterTrace,
}

fn write_trace(out: &PathBuf, trace: &FilterTrace) -> CliResult<()> {
    for s in &trace.steps {
        check_normalized(&s.predictive, &format!("predictive law at t = {}", s.t))?;
        check_normalized(&s.filtered, &format!("filtered law at t = {}", s.t))?;
    }
    write_json(out, &FilterOutput { log_marginal_likelihood: log_marginal_likelihood(trace), trace })
}

pub fn filter_cmd(a: &FilterArgs) -> CliResult<RunInfo> {
    let model = read_model(&a.model)?;
    let data = read_data(&a.data, model.theta.k())?;
    write_trace(&a.out, &filter(&model, &data, a.tol)?)?;
    Ok(RunInfo { seed: None, workers: None, outputs: vec![a.out.clone()] })
}

#[derive(Serialize)]
struct SmoothedStep<'a> {
    t: f64,
    mean: Vec<f64>,
    smoothed: &'a DirichletMixture,
}

pub fn smooth_cmd(a: &FilterArgs) -> CliResult<RunInfo> {
    let model = read_model(&a.model)?;
    let data = read_data(&a.data, model.theta.k())?;
    let marginals = smooth(&model, &data, a.tol)?;
    let mut steps = Vec::with_capacity(marginals.len());
    for (d, m) in data.iter().zip(&marginals) {
        check_normalized(m, &format!("smoothed law at t = {}", d.t))?;
        steps.push(SmoothedStep { t: d.t, mean: m.mean(), smoothed: m });
    }
    write_json(&a.out, &steps)?;
    Ok(RunInfo { seed: None, workers: None, outputs: vec![a.out.clone()] })
}

#[derive(Args, Debug, Serialize)]
pub struct NonMarkovArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Clock paths per estimate.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// is (importance sampling) or rejection.
    #[arg(long, default_value = "is")]
    pub estimator: String,
    #[arg(long, default_value_t = DEFAULT_ESS_FLOOR)]
    pub ess_floor: f64,
    #[arg(long, default_value_t = 1_000_000)]
    pub max_attempts: u64,
    #[arg(long)]
    pub grid_step: Option<f64>,
    #[arg(long, default_value_t = 1e-12)]
    pub tol: f64,
    #[command(flatten)]
    pub mc: Mc,
}

pub fn nonmarkov_cmd(a: &NonMarkovArgs) -> CliResult<RunInfo> {
    let model = read_model(&a.model)?;
    let data = read_data(&a.data, model.theta.k())?;
    let estimator = match a.estimator.as_str() {
        "is" | "importance" => Estimator::ImportanceSampling,
        "rejection" => Estimator::Rejection,
        other => return Err(CliError::Config(format!("unknown estimator '{other}' (expected is or rejection)"))),
    };
    let workers = a.mc.workers();
    let opts = NonMarkovOptions {
        clock_draws: a.n,
        estimator,
        tol: a.tol,
        ess_floor: a.ess_floor,
        max_attempts: a.max_attempts,
        grid_step: a.grid_step,
        seed: a.mc.seed,
        workers,
    };
    write_trace(&a.out, &nonmarkov_filter(&model, &data, &opts)?)?;
    Ok(RunInfo { seed: Some(a.mc.seed), workers: Some(workers), outputs: vec![a.out.clone()] })
}

#[derive(Args, Debug, Serialize)]
pub struct ClockPosterior {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 1_000_000)]
    pub max_attempts: u64,
    #[arg(long)]
    pub grid_step: Option<f64>,
    #[arg(long, default_value_t = 1e-12)]
    pub tol: f64,
    #[command(flatten)]
    pub mc: Mc,
}

pub fn clock_posterior(a: &ClockPosterior) -> CliResult<RunInfo> {
    let model = read_model(&a.model)?;
    let data = read_data(&a.data, model.theta.k())?;
    let workers = a.mc.workers();
    let draws = par_draws(a.n, a.mc.seed, workers, || Ok(()), |_, rng| {
        clock_posterior_sample(&model, &data, a.tol, a.grid_step, a.max_attempts, rng)
    })?;
    let header = ["sample", "attempts", "exact_clock", "t", "operational_time"].map(String::from);
    let rows = draws.iter().enumerate().flat_map(|(i, s)| {
        s.times.iter().zip(&s.r).map(move |(t, r)| vec![i.to_string(), s.attempts.to_string(), exact_str(s.exact_clock), f(*t), f(*r)])
    });
    write_csv(&a.out, &header, rows)?;
    Ok(RunInfo { seed: Some(a.mc.seed), workers: Some(workers), outputs: vec![a.out.clone()] })
}

#[derive(Args, Debug, Serialize)]
pub struct SynthData {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Optional CSV of the hidden states.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[command(flatten)]
    pub grid: TimeGrid,
    /// Individuals sampled at each time.
    #[arg(long, default_value_t = 20)]
    pub n_obs: u64,
    #[command(flatten)]
    pub sampling: Sampling,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn synth_data(a: &SynthData) -> CliResult<RunInfo> {
    let model = read_model(&a.model)?;
    let times = a.grid.resolve(2.0, 0.5)?;
    let mut rng = stream_rng(a.seed, 0);
    let path = PathSampler::new(model.clone(), times.clone(), a.sampling.mode()?, a.sampling.config())?.sample(&mut rng)?;
    let data: Vec<ObservationRecord> =
        times.iter().zip(&path.points).map(|(t, x)| ObservationRecord { t: *t, y: multinomial_sample(a.n_obs, x, &mut rng) }).collect();
    write_data(&a.out, &data)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(truth) = &a.truth {
        let mut header = vec!["t".to_string()];
        header.extend(coord_header("x", model.theta.k()));
        header.push("exact".into());
        let rows = times.iter().zip(&path.points).map(|(t, x)| {
            let mut r = vec![f(*t)];
            r.extend(x.coords().iter().map(|v| f(*v)));
            r.push(exact_str(path.exact));
            r
        });
        write_csv(truth, &header, rows)?;
        outputs.push(truth.clone());
    }
    Ok(RunInfo { seed: Some(a.seed), workers: None, outputs })
}
