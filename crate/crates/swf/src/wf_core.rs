//! Wright–Fisher building blocks: the mutation parameter, simplex points,
//! count vectors, Dirichlet and multinomial laws, the duality function and
//! the exact transition sampler of the diffusion on its own clock.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SwfError};
use crate::special_fn::{ln_gamma, log_rising_factorial};
use crate::swf_dual::SeriesTable;

/// Mutation parameter `θ ∈ (0,∞)^K`, `K ≥ 2`, with its cached total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Theta {
    comps: Vec<f64>,
    total: f64,
}

impl Theta {
    pub fn new(comps: Vec<f64>) -> Result<Self> {
        if comps.len() < 2 {
            return Err(SwfError::Config(format!("theta needs at least 2 components, got {}", comps.len())));
        }
        if comps.iter().any(|c| !(*c > 0.0) || !c.is_finite()) {
            return Err(SwfError::Config("theta components must be finite and > 0".into()));
        }
        let total = comps.iter().sum();
        Ok(Theta { comps, total })
    }

    pub fn k(&self) -> usize {
        self.comps.len()
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn comps(&self) -> &[f64] {
        &self.comps
    }

    /// `λ_n = n(n + |θ| - 1)/2`.
    pub fn lambda_n(&self, n: u64) -> f64 {
        lambda_n(self.total, n)
    }
}

impl TryFrom<Vec<f64>> for Theta {
    type Error = SwfError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Theta::new(v)
    }
}

impl From<Theta> for Vec<f64> {
    fn from(t: Theta) -> Vec<f64> {
        t.comps
    }
}

/// `λ_n = n(n + |θ| - 1)/2` for total mutation mass `theta_total`.
pub fn lambda_n(theta_total: f64, n: u64) -> f64 {
    let n = n as f64;
    n * (n + theta_total - 1.0) / 2.0
}

/// A point of the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SimplexPoint(Vec<f64>);

impl SimplexPoint {
    /// Accepts coordinates summing to 1 within `1e-9` and rescales them to sum exactly.
    pub fn new(x: Vec<f64>) -> Result<Self> {
        if x.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(SwfError::Domain("simplex coordinates must be finite and >= 0".into()));
        }
        let s: f64 = x.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(SwfError::Domain(format!("simplex coordinates sum to {s}, not 1")));
        }
        Ok(SimplexPoint(x.into_iter().map(|v| v / s).collect()))
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }
}

impl TryFrom<Vec<f64>> for SimplexPoint {
    type Error = SwfError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        SimplexPoint::new(v)
    }
}

impl From<SimplexPoint> for Vec<f64> {
    fn from(p: SimplexPoint) -> Vec<f64> {
        p.0
    }
}

/// Element of `Z_+^K`: a dual state, an observation or a multinomial draw.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CountVector(Vec<u64>);

impl CountVector {
    pub fn new(m: Vec<u64>) -> Self {
        CountVector(m)
    }

    pub fn zeros(k: usize) -> Self {
        CountVector(vec![0; k])
    }

    pub fn counts(&self) -> &[u64] {
        &self.0
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn add(&self, other: &CountVector) -> CountVector {
        CountVector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// Coordinatewise `self ≤ other`.
    pub fn le(&self, other: &CountVector) -> bool {
        self.0.iter().zip(&other.0).all(|(a, b)| a <= b)
    }

    /// All vectors `l` with `0 ≤ l ≤ self` coordinatewise.
    pub fn lower_set(&self) -> Vec<CountVector> {
        let mut out = vec![Vec::with_capacity(self.k())];
        for &c in &self.0 {
            out = out
                .into_iter()
                .flat_map(|prefix: Vec<u64>| {
                    (0..=c).map(move |v| {
                        let mut p = prefix.clone();
                        p.push(v);
                        p
                    })
                })
                .collect();
        }
        out.into_iter().map(CountVector).collect()
    }
}

fn check_dims(k1: usize, k2: usize) -> Result<()> {
    if k1 == k2 {
        Ok(())
    } else {
        Err(SwfError::Domain(format!("dimension mismatch: {k1} vs {k2}")))
    }
}

/// `log Γ(x)` draw of a Gamma(shape, 1) variable, stable for small shapes.
fn log_gamma_draw<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape >= 1.0 {
        let g: f64 = Gamma::new(shape, 1.0).expect("positive shape").sample(rng);
        g.ln()
    } else {
        // G(a) = G(a+1) U^{1/a}
        let g: f64 = Gamma::new(shape + 1.0, 1.0).expect("positive shape").sample(rng);
        let u: f64 = 1.0 - rng.random::<f64>();
        g.ln() + u.ln() / shape
    }
}

/// Draw from `Dirichlet(θ + l)` via normalized gamma variates.
pub fn dirichlet_sample_shifted<R: Rng + ?Sized>(theta: &Theta, l: &CountVector, rng: &mut R) -> Result<SimplexPoint> {
    check_dims(theta.k(), l.k())?;
    let logs: Vec<f64> = theta
        .comps()
        .iter()
        .zip(l.counts())
        .map(|(t, c)| log_gamma_draw(t + *c as f64, rng))
        .collect();
    let mx = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = w.iter().sum();
    Ok(SimplexPoint(w.into_iter().map(|v| v / s).collect()))
}

/// Draw from `Dirichlet(θ)`.
pub fn dirichlet_sample<R: Rng + ?Sized>(theta: &Theta, rng: &mut R) -> SimplexPoint {
    dirichlet_sample_shifted(theta, &CountVector::zeros(theta.k()), rng).expect("matching dimensions")
}

/// Log density of `Dirichlet(θ)` at `x`, normalizer `Γ(|θ|)/∏Γ(θ_i)`.
///
/// On the boundary the density is `+∞` when a vanishing coordinate has
/// `θ_i < 1` and `-∞` when it has `θ_i > 1`.
pub fn dirichlet_log_density(theta: &Theta, x: &SimplexPoint) -> Result<f64> {
    check_dims(theta.k(), x.k())?;
    let mut v = ln_gamma(theta.total());
    for (t, xi) in theta.comps().iter().zip(x.coords()) {
        v -= ln_gamma(*t);
        if *xi == 0.0 {
            if *t < 1.0 {
                return Ok(f64::INFINITY);
            }
            if *t > 1.0 {
                return Ok(f64::NEG_INFINITY);
            }
        } else {
            v += (t - 1.0) * xi.ln();
        }
    }
    Ok(v)
}

/// Multinomial draw with `n` trials; zero coordinates of `x` are never hit.
pub fn multinomial_sample<R: Rng + ?Sized>(n: u64, x: &SimplexPoint, rng: &mut R) -> CountVector {
    let mut out = vec![0u64; x.k()];
    let mut left = n;
    let mut mass = 1.0f64;
    for (i, &p) in x.coords().iter().enumerate() {
        if left == 0 {
            break;
        }
        if i + 1 == x.k() {
            out[i] = left;
            break;
        }
        let q = if mass > 0.0 { (p / mass).clamp(0.0, 1.0) } else { 0.0 };
        let draw = if q == 0.0 {
            0
        } else if q == 1.0 {
            left
        } else {
            Binomial::new(left, q).expect("valid binomial").sample(rng)
        };
        out[i] = draw;
        left -= draw;
        mass -= p;
    }
    CountVector(out)
}

/// Log multinomial coefficient `|l|!/∏ l_i!`.
pub fn log_multinomial_coefficient(l: &CountVector) -> f64 {
    ln_gamma(l.total() as f64 + 1.0) - l.counts().iter().map(|c| ln_gamma(*c as f64 + 1.0)).sum::<f64>()
}

/// `log M(l; n, x)`.
pub fn multinomial_log_pmf(l: &CountVector, n: u64, x: &SimplexPoint) -> Result<f64> {
    check_dims(l.k(), x.k())?;
    if l.total() != n {
        return Err(SwfError::Domain(format!("counts sum to {} but n = {n}", l.total())));
    }
    let mut v = log_multinomial_coefficient(l);
    for (c, p) in l.counts().iter().zip(x.coords()) {
        if *c > 0 {
            if *p == 0.0 {
                return Ok(f64::NEG_INFINITY);
            }
            v += *c as f64 * p.ln();
        }
    }
    Ok(v)
}

/// `log [(|θ|)_{|m|} / ∏(θ_i)_{m_i}]`, the constant part of the duality function.
pub fn log_duality_constant(theta: &Theta, m: &CountVector) -> f64 {
    let mut v = log_rising_factorial(theta.total(), m.total() as i64).expect("positive theta");
    for (t, c) in theta.comps().iter().zip(m.counts()) {
        v -= log_rising_factorial(*t, *c as i64).expect("positive theta");
    }
    v
}

/// Duality function `g(x, m) = (|θ|)_{|m|}/∏(θ_i)_{m_i} · ∏ x_i^{m_i}`.
pub fn duality_g(theta: &Theta, x: &SimplexPoint, m: &CountVector) -> Result<f64> {
    check_dims(theta.k(), x.k())?;
    check_dims(theta.k(), m.k())?;
    let mut v = log_duality_constant(theta, m);
    for (c, p) in m.counts().iter().zip(x.coords()) {
        if *c > 0 {
            if *p == 0.0 {
                return Ok(0.0);
            }
            v += *c as f64 * p.ln();
        }
    }
    Ok(v.exp())
}

/// Exact draw from the transition law of the Wright–Fisher diffusion at time `t`:
/// `M` from the dual entrance law, `L ~ Multinomial(M, x)`, then `Dirichlet(θ + L)`.
pub fn wf_transition_sample<R: Rng + ?Sized>(theta: &Theta, x: &SimplexPoint, t: f64, rng: &mut R) -> Result<SimplexPoint> {
    check_dims(theta.k(), x.k())?;
    if !(t > 0.0) {
        return Err(SwfError::Domain(format!("transition time must be > 0, got {t}")));
    }
    let mut table = SeriesTable::classical(theta.total(), t)?;
    let m = table.sample(rng)?;
    let l = multinomial_sample(m, x, rng);
    dirichlet_sample_shifted(theta, &l, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parallel::stream_rng;
    use proptest::prelude::*;

    fn th(v: &[f64]) -> Theta {
        Theta::new(v.to_vec()).unwrap()
    }
    fn pt(v: &[f64]) -> SimplexPoint {
        SimplexPoint::new(v.to_vec()).unwrap()
    }
    fn cv(v: &[u64]) -> CountVector {
        CountVector::new(v.to_vec())
    }

    #[test]
    fn lambda_values() {
        assert_eq!(lambda_n(2.0, 0), 0.0);
        assert_eq!(lambda_n(2.0, 1), 1.0);
        assert_eq!(lambda_n(2.0, 3), 6.0);
        assert!(Theta::new(vec![1.0]).is_err());
        assert!(Theta::new(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn dirichlet_density_values() {
        assert!(dirichlet_log_density(&th(&[1.0, 1.0]), &pt(&[0.3, 0.7])).unwrap().abs() < 1e-14);
        assert!(dirichlet_log_density(&th(&[2.0, 1.0]), &pt(&[0.5, 0.5])).unwrap().abs() < 1e-14);
        assert_eq!(dirichlet_log_density(&th(&[2.0, 1.0]), &pt(&[0.0, 1.0])).unwrap(), f64::NEG_INFINITY);
        assert_eq!(dirichlet_log_density(&th(&[0.5, 1.0]), &pt(&[0.0, 1.0])).unwrap(), f64::INFINITY);
    }

    #[test]
    fn dirichlet_sampler_mean() {
        let theta = th(&[3.0, 1.0, 1.0]);
        let mut rng = stream_rng(3, 0);
        let n = 1_000_000;
        let mut s = [0.0; 3];
        for _ in 0..n {
            let x = dirichlet_sample(&theta, &mut rng);
            for i in 0..3 {
                s[i] += x.coords()[i];
            }
        }
        for (i, want) in [0.6, 0.2, 0.2].iter().enumerate() {
            assert!((s[i] / n as f64 - want).abs() < 0.003);
        }
    }

    #[test]
    fn small_shape_dirichlet_is_finite() {
        let theta = th(&[0.01, 0.02]);
        let mut rng = stream_rng(4, 0);
        for _ in 0..10_000 {
            let x = dirichlet_sample(&theta, &mut rng);
            assert!(x.coords().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn multinomial_values() {
        let mut rng = stream_rng(5, 0);
        assert_eq!(multinomial_sample(0, &pt(&[0.5, 0.5]), &mut rng), cv(&[0, 0]));
        assert!(multinomial_log_pmf(&cv(&[0, 0]), 0, &pt(&[0.5, 0.5])).unwrap().abs() < 1e-15);
        assert!((multinomial_log_pmf(&cv(&[1, 1]), 2, &pt(&[0.5, 0.5])).unwrap() - 0.5f64.ln()).abs() < 1e-14);
        assert!(multinomial_log_pmf(&cv(&[3, 0]), 3, &pt(&[1.0, 0.0])).unwrap().abs() < 1e-14);
        assert!(multinomial_log_pmf(&cv(&[1, 1]), 3, &pt(&[0.5, 0.5])).is_err());
        for _ in 0..1000 {
            let d = multinomial_sample(7, &pt(&[0.0, 0.4, 0.6]), &mut rng);
            assert_eq!(d.counts()[0], 0);
            assert_eq!(d.total(), 7);
        }
    }

    #[test]
    fn duality_values() {
        let t = th(&[1.0, 1.0]);
        assert_eq!(duality_g(&t, &pt(&[0.3, 0.7]), &cv(&[0, 0])).unwrap(), 1.0);
        assert!((duality_g(&t, &pt(&[0.5, 0.5]), &cv(&[1, 0])).unwrap() - 1.0).abs() < 1e-14);
        assert!((duality_g(&t, &pt(&[0.5, 0.5]), &cv(&[1, 1])).unwrap() - 1.5).abs() < 1e-14);
    }

    #[test]
    fn lower_set_enumerates_box() {
        let s = cv(&[2, 1]).lower_set();
        assert_eq!(s.len(), 6);
        assert!(s.iter().all(|l| l.le(&cv(&[2, 1]))));
    }

    proptest! {
        #[test]
        fn conjugacy_pointwise(a in 0.2f64..4.0, b in 0.2f64..4.0, c in 0.2f64..4.0,
                               u in 0.01f64..0.98, v in 0.01f64..0.98,
                               m0 in 0u64..5, m1 in 0u64..4, m2 in 0u64..3) {
            prop_assume!(u + v < 0.99);
            let theta = th(&[a, b, c]);
            let x = pt(&[u, v, 1.0 - u - v]);
            let m = cv(&[m0, m1, m2]);
            let shifted = th(&[a + m0 as f64, b + m1 as f64, c + m2 as f64]);
            let lhs = dirichlet_log_density(&shifted, &x).unwrap();
            let rhs = duality_g(&theta, &x, &m).unwrap().ln() + dirichlet_log_density(&theta, &x).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
