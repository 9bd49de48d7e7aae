//! Random clocks: subordinators, their first-passage inverses and
//! compositions of the two.
//!
//! Each family is described by its Laplace exponent
//! `ψ(λ) = βλ + ∫(1 - e^{-λs}) π(ds)`; the time-`t` Laplace transform of the
//! clock is `Φ_t(λ) = E[e^{-λ C(t)}]`.

use rand::Rng;
use rand_distr::{Beta, Distribution, Exp1, Gamma, InverseGaussian, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Result, SwfError};
use crate::hp::{Big, Hp};
use crate::special_fn::mittag_leffler_neg;

mod volterra;

pub use volterra::{inverse_laplace_many, VolterraSolver, STEHFEST_TERMS};

/// Grid step of the first-crossing sampler as a fraction of the largest requested time.
pub const DEFAULT_GRID_FRACTION: f64 = 1e-3;

/// The family-specific part of a subordinator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FamilyKind {
    /// `C(t) = t`.
    Identity,
    /// Pure drift; the rate lives in [`SubordinatorFamily::beta`].
    Drift,
    Poisson { c: f64 },
    Stable { alpha: f64 },
    Gamma { a: f64, b: f64 },
    InverseGaussian { delta: f64, gamma: f64 },
    TemperedStable { alpha: f64, q: f64 },
}

/// A subordinator family together with its drift `β ≥ 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubordinatorFamily {
    pub kind: FamilyKind,
    pub beta: f64,
}

impl SubordinatorFamily {
    pub fn new(kind: FamilyKind, beta: f64) -> Result<Self> {
        let f = SubordinatorFamily { kind, beta };
        f.validate()?;
        Ok(f)
    }

    pub fn identity() -> Self {
        SubordinatorFamily { kind: FamilyKind::Identity, beta: 0.0 }
    }

    pub fn drift(beta: f64) -> Result<Self> {
        Self::new(FamilyKind::Drift, beta)
    }

    pub fn stable(alpha: f64, beta: f64) -> Result<Self> {
        Self::new(FamilyKind::Stable { alpha }, beta)
    }

    pub fn gamma(a: f64, b: f64, beta: f64) -> Result<Self> {
        Self::new(FamilyKind::Gamma { a, b }, beta)
    }

    pub fn inverse_gaussian(delta: f64, gamma: f64, beta: f64) -> Result<Self> {
        Self::new(FamilyKind::InverseGaussian { delta, gamma }, beta)
    }

    pub fn poisson(c: f64, beta: f64) -> Result<Self> {
        Self::new(FamilyKind::Poisson { c }, beta)
    }

    pub fn tempered_stable(alpha: f64, q: f64, beta: f64) -> Result<Self> {
        Self::new(FamilyKind::TemperedStable { alpha, q }, beta)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SwfError::Config(m.to_string()));
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return bad("drift beta must be finite and >= 0");
        }
        match self.kind {
            FamilyKind::Identity if self.beta != 0.0 => bad("identity clock takes no drift"),
            FamilyKind::Identity | FamilyKind::Drift => Ok(()),
            FamilyKind::Poisson { c } if !(c >= 0.0 && c.is_finite()) => bad("poisson rate c must be >= 0"),
            FamilyKind::Stable { alpha } if !(alpha > 0.0 && alpha < 1.0) => bad("stable alpha must lie in (0,1)"),
            FamilyKind::Gamma { a, b } if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) => {
                bad("gamma parameters a, b must be > 0")
            }
            FamilyKind::InverseGaussian { delta, gamma }
                if !(delta > 0.0 && gamma >= 0.0 && delta.is_finite() && gamma.is_finite()) =>
            {
                bad("inverse gaussian needs delta > 0 and gamma >= 0")
            }
            FamilyKind::TemperedStable { alpha, q } if !(alpha > 0.0 && alpha < 1.0 && q > 0.0 && q.is_finite()) => {
                bad("tempered stable needs alpha in (0,1) and q > 0")
            }
            _ => Ok(()),
        }
    }

    /// Exponent `α` with `π(du) ~ u^{-1-α} du` as `u → 0`, when the Lévy
    /// measure has that form.
    pub fn pi_zero_exponent(&self) -> Option<f64> {
        match self.kind {
            FamilyKind::Stable { alpha } | FamilyKind::TemperedStable { alpha, .. } => Some(alpha),
            FamilyKind::InverseGaussian { .. } => Some(0.5),
            FamilyKind::Gamma { .. } => Some(0.0),
            FamilyKind::Poisson { .. } | FamilyKind::Identity | FamilyKind::Drift => None,
        }
    }

    /// Whether sample paths are strictly increasing, which the inverse needs.
    pub fn is_strictly_increasing(&self) -> bool {
        match self.kind {
            FamilyKind::Identity => true,
            FamilyKind::Drift => self.beta > 0.0,
            FamilyKind::Poisson { .. } => self.beta > 0.0,
            _ => true,
        }
    }

    /// Laplace exponent `ψ(λ)`.
    pub fn psi(&self, lam: f64) -> f64 {
        if lam == 0.0 {
            return 0.0;
        }
        let fam = match self.kind {
            FamilyKind::Identity => lam,
            FamilyKind::Drift => 0.0,
            FamilyKind::Poisson { c } => -c * (-lam).exp_m1(),
            FamilyKind::Stable { alpha } => lam.powf(alpha),
            FamilyKind::Gamma { a, b } => a * (lam / b).ln_1p(),
            // δ(√(2λ+γ²) − γ) written without cancellation
            FamilyKind::InverseGaussian { delta, gamma } => {
                2.0 * delta * lam / ((2.0 * lam + gamma * gamma).sqrt() + gamma)
            }
            FamilyKind::TemperedStable { alpha, q } => {
                // (λ+q)^α − q^α = q^α ((1+λ/q)^α − 1)
                q.powf(alpha) * (alpha * (lam / q).ln_1p()).exp_m1()
            }
        };
        self.beta * lam + fam
    }

    /// `ψ(λ)` in arbitrary precision.
    pub fn psi_big(&self, hp: &mut Hp, lam: &Big) -> Big {
        let fam = match self.kind {
            FamilyKind::Identity => lam.clone(),
            FamilyKind::Drift => hp.num(0.0),
            FamilyKind::Poisson { c } => {
                let e = hp.exp(&lam.neg());
                let one = hp.num(1.0);
                hp.mul(&hp.num(c), &hp.sub(&one, &e))
            }
            FamilyKind::Stable { alpha } => hp.pow(lam, alpha),
            FamilyKind::Gamma { a, b } => {
                let r = hp.div(lam, &hp.num(b));
                let l = hp.ln_1p(&r);
                hp.mul(&hp.num(a), &l)
            }
            FamilyKind::InverseGaussian { delta, gamma } => {
                let g = hp.num(gamma);
                let two_lam = hp.mul(&hp.num(2.0), lam);
                let s = hp.sqrt(&hp.add(&two_lam, &hp.mul(&g, &g)));
                let den = hp.add(&s, &g);
                hp.div(&hp.mul(&hp.num(delta), &two_lam), &den)
            }
            FamilyKind::TemperedStable { alpha, q } => {
                let qb = hp.num(q);
                let p1 = hp.pow(&hp.add(lam, &qb), alpha);
                let p0 = hp.pow(&qb, alpha);
                hp.sub(&p1, &p0)
            }
        };
        let drift = hp.mul(&hp.num(self.beta), lam);
        hp.add(&drift, &fam)
    }

    /// Mean of `S(1)` when finite.
    pub fn mean_rate(&self) -> Option<f64> {
        let fam = match self.kind {
            FamilyKind::Identity => 1.0,
            FamilyKind::Drift => 0.0,
            FamilyKind::Poisson { c } => c,
            FamilyKind::Stable { .. } => return None,
            FamilyKind::Gamma { a, b } => a / b,
            FamilyKind::InverseGaussian { delta, gamma } if gamma > 0.0 => delta / gamma,
            FamilyKind::InverseGaussian { .. } => return None,
            FamilyKind::TemperedStable { alpha, q } => alpha * q.powf(alpha - 1.0),
        };
        Some(self.beta + fam)
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            FamilyKind::Identity => "identity",
            FamilyKind::Drift => "drift",
            FamilyKind::Poisson { .. } => "poisson",
            FamilyKind::Stable { .. } => "stable",
            FamilyKind::Gamma { .. } => "gamma",
            FamilyKind::InverseGaussian { .. } => "ig",
            FamilyKind::TemperedStable { .. } => "tempered",
        }
    }

    fn params_json(&self) -> Value {
        match self.kind {
            FamilyKind::Identity | FamilyKind::Drift => json!({}),
            FamilyKind::Poisson { c } => json!({ "c": c }),
            FamilyKind::Stable { alpha } => json!({ "alpha": alpha }),
            FamilyKind::Gamma { a, b } => json!({ "a": a, "b": b }),
            FamilyKind::InverseGaussian { delta, gamma } => json!({ "delta": delta, "gamma": gamma }),
            FamilyKind::TemperedStable { alpha, q } => json!({ "alpha": alpha, "q": q }),
        }
    }

    fn to_json(self) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert("family".into(), json!(self.name()));
        m.insert("params".into(), self.params_json());
        m.insert("beta".into(), json!(self.beta));
        m
    }

    fn from_json(v: &Map<String, Value>) -> Result<Self> {
        let cfg = |m: String| SwfError::Config(m);
        let family = v
            .get("family")
            .and_then(Value::as_str)
            .ok_or_else(|| cfg("clock family missing".into()))?;
        let empty = Map::new();
        let params = match v.get("params") {
            None | Some(Value::Null) => &empty,
            Some(Value::Object(p)) => p,
            Some(_) => return Err(cfg("params must be an object".into())),
        };
        let beta = match v.get("beta") {
            None | Some(Value::Null) => 0.0,
            Some(b) => b.as_f64().ok_or_else(|| cfg("beta must be a number".into()))?,
        };
        let allowed: &[&str] = match family {
            "identity" | "drift" => &[],
            "poisson" => &["c"],
            "stable" => &["alpha"],
            "gamma" => &["a", "b"],
            "ig" => &["delta", "gamma"],
            "tempered" => &["alpha", "q"],
            other => return Err(cfg(format!("unknown clock family '{other}'"))),
        };
        if let Some(k) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(cfg(format!("unknown parameter '{k}' for family '{family}'")));
        }
        let p = |k: &str| -> Result<f64> {
            params
                .get(k)
                .and_then(Value::as_f64)
                .ok_or_else(|| cfg(format!("family '{family}' needs numeric parameter '{k}'")))
        };
        let kind = match family {
            "identity" => FamilyKind::Identity,
            "drift" => FamilyKind::Drift,
            "poisson" => FamilyKind::Poisson { c: p("c")? },
            "stable" => FamilyKind::Stable { alpha: p("alpha")? },
            "gamma" => FamilyKind::Gamma { a: p("a")?, b: p("b")? },
            "ig" => FamilyKind::InverseGaussian { delta: p("delta")?, gamma: p("gamma")? },
            "tempered" => FamilyKind::TemperedStable { alpha: p("alpha")?, q: p("q")? },
            _ => unreachable!("family names checked above"),
        };
        SubordinatorFamily::new(kind, beta)
    }
}

/// A random clock `C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Value", into = "Value")]
pub enum ClockSpec {
    /// `C = S`.
    Sub(SubordinatorFamily),
    /// `C = R`, the first-passage inverse of `S`.
    InverseOf(SubordinatorFamily),
    /// `C = S₁ ∘ R₂`, the inner subordinator run on the inverse of the outer one.
    Composed { inner: SubordinatorFamily, outer: SubordinatorFamily },
}

impl ClockSpec {
    pub fn identity() -> Self {
        ClockSpec::Sub(SubordinatorFamily::identity())
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ClockSpec::Sub(f) => f.validate(),
            ClockSpec::InverseOf(f) => {
                f.validate()?;
                check_invertible(f)
            }
            ClockSpec::Composed { inner, outer } => {
                inner.validate()?;
                outer.validate()?;
                check_invertible(outer)
            }
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, ClockSpec::Sub(f) if f.kind == FamilyKind::Identity)
    }

    /// Subordinator clocks keep the Markov property of the diffusion.
    pub fn is_markov(&self) -> bool {
        matches!(self, ClockSpec::Sub(_))
    }

    /// Whether `Φ_t` has the closed form `e^{-tψ(λ)}`.
    pub fn subordinator(&self) -> Option<&SubordinatorFamily> {
        match self {
            ClockSpec::Sub(f) => Some(f),
            _ => None,
        }
    }
}

fn check_invertible(f: &SubordinatorFamily) -> Result<()> {
    if f.is_strictly_increasing() {
        Ok(())
    } else {
        Err(SwfError::Config(format!(
            "inverse of a '{}' subordinator with beta={} is not defined: paths are not strictly increasing",
            f.name(),
            f.beta
        )))
    }
}

impl From<ClockSpec> for Value {
    fn from(c: ClockSpec) -> Value {
        match c {
            ClockSpec::Sub(f) => {
                let mut m = f.to_json();
                m.insert("kind".into(), json!("sub"));
                Value::Object(m)
            }
            ClockSpec::InverseOf(f) => {
                let mut m = f.to_json();
                m.insert("kind".into(), json!("inverse"));
                Value::Object(m)
            }
            ClockSpec::Composed { inner, outer } => json!({
                "kind": "composed",
                "inner": Value::Object(inner.to_json()),
                "outer": Value::Object(outer.to_json()),
            }),
        }
    }
}

impl TryFrom<Value> for ClockSpec {
    type Error = SwfError;

    fn try_from(v: Value) -> Result<Self> {
        let obj = v.as_object().ok_or_else(|| SwfError::Config("clock must be a JSON object".into()))?;
        let kind = obj
            .get("kind")
            .and_then(Value::as_str)
            .ok_or_else(|| SwfError::Config("clock 'kind' missing".into()))?;
        let clock = match kind {
            "sub" => ClockSpec::Sub(SubordinatorFamily::from_json(obj)?),
            "inverse" => ClockSpec::InverseOf(SubordinatorFamily::from_json(obj)?),
            "composed" => {
                let part = |k: &str| -> Result<SubordinatorFamily> {
                    let o = obj
                        .get(k)
                        .and_then(Value::as_object)
                        .ok_or_else(|| SwfError::Config(format!("composed clock needs object '{k}'")))?;
                    SubordinatorFamily::from_json(o)
                };
                ClockSpec::Composed { inner: part("inner")?, outer: part("outer")? }
            }
            other => return Err(SwfError::Config(format!("unknown clock kind '{other}'"))),
        };
        clock.validate()?;
        Ok(clock)
    }
}

/// `ψ(λ)` for `λ ≥ 0`.
pub fn laplace_exponent(fam: &SubordinatorFamily, lam: f64) -> f64 {
    assert!(lam >= 0.0, "Laplace exponent needs lambda >= 0");
    fam.psi(lam)
}

/// `Φ_t(λ)` for an inverse subordinator, by the fastest exact route available.
fn inverse_laplace(fam: &SubordinatorFamily, t: f64, lam: f64, tol: f64) -> Result<f64> {
    match fam.kind {
        FamilyKind::Identity => Ok((-lam * t).exp()),
        FamilyKind::Drift => Ok((-lam * t / fam.beta).exp()),
        FamilyKind::Stable { alpha } if fam.beta == 0.0 => Ok(mittag_leffler_neg(alpha, lam * t.powf(alpha))),
        _ => Ok(inverse_laplace_many(fam, t, &[lam], tol)?[0]),
    }
}

/// `Φ_t(λ) = E[e^{-λC(t)}]`, accurate to `tol` where a numerical solve is involved.
pub fn clock_laplace(clock: &ClockSpec, t: f64, lam: f64, tol: f64) -> Result<f64> {
    if !(t >= 0.0) || !(lam >= 0.0) {
        return Err(SwfError::Domain(format!("clock_laplace needs t >= 0 and lambda >= 0, got t={t}, lambda={lam}")));
    }
    if t == 0.0 || lam == 0.0 {
        return Ok(1.0);
    }
    match clock {
        ClockSpec::Sub(f) => Ok((-t * f.psi(lam)).exp()),
        ClockSpec::InverseOf(f) => inverse_laplace(f, t, lam, tol),
        ClockSpec::Composed { inner, outer } => inverse_laplace(outer, t, inner.psi(lam), tol),
    }
}

/// `Φ_t(λ_j)` for several arguments at one time point, sharing any numerical solve.
pub fn clock_laplace_many(clock: &ClockSpec, t: f64, lams: &[f64], tol: f64) -> Result<Vec<f64>> {
    let (fam, args): (&SubordinatorFamily, Vec<f64>) = match clock {
        ClockSpec::Sub(_) => return lams.iter().map(|&l| clock_laplace(clock, t, l, tol)).collect(),
        ClockSpec::InverseOf(f) => (f, lams.to_vec()),
        ClockSpec::Composed { inner, outer } => (outer, lams.iter().map(|&l| inner.psi(l)).collect()),
    };
    let closed_form = matches!(fam.kind, FamilyKind::Identity | FamilyKind::Drift)
        || matches!(fam.kind, FamilyKind::Stable { .. }) && fam.beta == 0.0;
    if t == 0.0 || closed_form {
        return args.iter().map(|&l| inverse_laplace(fam, t, l, tol)).collect();
    }
    inverse_laplace_many(fam, t, &args, tol)
}

/// `∫_0^∞ e^{-γt} Φ_t(λ) dt`.
pub fn double_laplace(clock: &ClockSpec, gamma: f64, lam: f64) -> f64 {
    assert!(gamma > 0.0, "double Laplace transform needs gamma > 0");
    match clock {
        ClockSpec::Sub(f) => 1.0 / (gamma + f.psi(lam)),
        ClockSpec::InverseOf(f) => {
            let pg = f.psi(gamma);
            pg / (gamma * (lam + pg))
        }
        ClockSpec::Composed { inner, outer } => {
            let pg = outer.psi(gamma);
            pg / (gamma * (inner.psi(lam) + pg))
        }
    }
}

/// One draw of a standard positive stable variable with `E[e^{-λS}] = e^{-λ^α}`.
pub fn sample_positive_stable<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    use std::f64::consts::PI;
    let u = loop {
        let u: f64 = rng.random::<f64>() * PI;
        if u > 0.0 {
            break u;
        }
    };
    let w: f64 = Exp1.sample(rng);
    let a = (alpha * u).sin() / u.sin().powf(1.0 / alpha);
    let b = (((1.0 - alpha) * u).sin() / w).powf((1.0 - alpha) / alpha);
    a * b
}

/// One draw from the law with density proportional to `z^{-α} g(z)`, `g` the
/// density of [`sample_positive_stable`].
///
/// In the representation `S = (A(u)/W)^{(1-α)/α}` the weight `z^{-α}` turns `W`
/// into a `Gamma(2-α)` variable and tilts `u` by `A(u)^{-(1-α)}`, which is
/// decreasing on `(0, π)` with limit `α^{-α}(1-α)^{-(1-α)}` at zero.
fn sample_size_biased_stable<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    use std::f64::consts::PI;
    let cap = alpha.powf(-alpha) * (1.0 - alpha).powf(alpha - 1.0);
    let u = loop {
        let u: f64 = rng.random::<f64>() * PI;
        if u <= 0.0 {
            continue;
        }
        let tilt = u.sin() / ((alpha * u).sin().powf(alpha) * ((1.0 - alpha) * u).sin().powf(1.0 - alpha));
        if rng.random::<f64>() * cap <= tilt {
            break u;
        }
    };
    let w: f64 = Gamma::new(2.0 - alpha, 1.0).expect("shape in (1, 2)").sample(rng);
    let a = (alpha * u).sin() / u.sin().powf(1.0 / alpha);
    let b = (((1.0 - alpha) * u).sin() / w).powf((1.0 - alpha) / alpha);
    a * b
}

/// First passage of a driftless stable subordinator above `level`: the
/// passage time and the position just after the crossing jump.
///
/// The position before the jump is `level·Beta(α, 1-α)`; given it, the time
/// is `(x/Z)^α` with `Z` size-biased stable and the jump is Pareto beyond
/// `level - x`.
fn stable_first_passage<R: Rng + ?Sized>(alpha: f64, level: f64, rng: &mut R) -> (f64, f64) {
    let frac: f64 = Beta::new(alpha, 1.0 - alpha).expect("alpha in (0, 1)").sample(rng);
    let before = level * frac;
    let time = if before > 0.0 { (before / sample_size_biased_stable(alpha, rng)).powf(alpha) } else { 0.0 };
    let v = 1.0 - rng.random::<f64>();
    let jump = (level - before) * v.powf(-1.0 / alpha);
    (time, before + jump)
}

/// Exact joint draw of `R` at ascending times for a driftless stable family,
/// restarting the subordinator at each crossing by the strong Markov property.
fn stable_inverse_path<R: Rng + ?Sized>(alpha: f64, times: &[f64], rng: &mut R) -> Vec<f64> {
    let (mut r, mut pos) = (0.0, 0.0);
    times
        .iter()
        .map(|&t| {
            if t > pos {
                let (dt, next) = stable_first_passage(alpha, t - pos, rng);
                r += dt;
                pos += next;
            }
            r
        })
        .collect()
}

fn sample_tempered<R: Rng + ?Sized>(alpha: f64, q: f64, dt: f64, rng: &mut R) -> f64 {
    // exponential tilting of the stable law; pieces keep the acceptance rate >= 1/e
    let qa = q.powf(alpha);
    let pieces = (dt * qa).ceil().max(1.0);
    let h = dt / pieces;
    let scale = h.powf(1.0 / alpha);
    let mut total = 0.0;
    for _ in 0..pieces as u64 {
        loop {
            let s = scale * sample_positive_stable(alpha, rng);
            if rng.random::<f64>() <= (-q * s).exp() {
                total += s;
                break;
            }
        }
    }
    total
}

/// One draw of `S(dt)`.
pub fn sample_subordinator_increment<R: Rng + ?Sized>(fam: &SubordinatorFamily, dt: f64, rng: &mut R) -> Result<f64> {
    if !(dt > 0.0) {
        return Err(SwfError::Domain(format!("increment length must be > 0, got {dt}")));
    }
    let jump = match fam.kind {
        FamilyKind::Identity => dt,
        FamilyKind::Drift => 0.0,
        FamilyKind::Poisson { c } => {
            if c == 0.0 {
                0.0
            } else {
                Poisson::new(c * dt).map_err(|e| SwfError::Domain(e.to_string()))?.sample(rng)
            }
        }
        FamilyKind::Stable { alpha } => dt.powf(1.0 / alpha) * sample_positive_stable(alpha, rng),
        FamilyKind::Gamma { a, b } => Gamma::new(a * dt, 1.0 / b).map_err(|e| SwfError::Domain(e.to_string()))?.sample(rng),
        FamilyKind::InverseGaussian { delta, gamma } => {
            let shape = (delta * dt) * (delta * dt);
            if gamma == 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                shape / (z * z)
            } else {
                InverseGaussian::new(delta * dt / gamma, shape)
                    .map_err(|e| SwfError::Domain(e.to_string()))?
                    .sample(rng)
            }
        }
        FamilyKind::TemperedStable { alpha, q } => sample_tempered(alpha, q, dt, rng),
    };
    Ok(jump + fam.beta * dt)
}

/// Whether [`sample_inverse_clock`] draws `R(t)` exactly for this family.
pub fn inverse_draw_is_exact(fam: &SubordinatorFamily) -> bool {
    match fam.kind {
        FamilyKind::Identity | FamilyKind::Drift => true,
        FamilyKind::Stable { .. } => fam.beta == 0.0,
        _ => false,
    }
}

/// One draw of `R(t) = inf{u : S(u) > t}`.
///
/// Exact for the identity, pure drift and driftless stable families (the
/// latter through `R(t) = (t/S(1))^α`). Other families scan a simulated path
/// of `S` on the grid `k·grid_step` and return the first grid level whose
/// value exceeds `t`, which is biased upward by at most one step.
pub fn sample_inverse_clock<R: Rng + ?Sized>(fam: &SubordinatorFamily, t: f64, rng: &mut R, grid_step: f64) -> Result<f64> {
    check_invertible(fam)?;
    if !(t >= 0.0) {
        return Err(SwfError::Domain(format!("inverse clock time must be >= 0, got {t}")));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    match fam.kind {
        FamilyKind::Identity => return Ok(t),
        FamilyKind::Drift => return Ok(t / fam.beta),
        FamilyKind::Stable { alpha } if fam.beta == 0.0 => {
            let s = sample_positive_stable(alpha, rng);
            return Ok((t / s).powf(alpha));
        }
        _ => {}
    }
    Ok(first_crossings(fam, &[t], grid_step, rng)?[0])
}

/// First grid levels at which a simulated path of `S` exceeds each of the ascending `levels`.
fn first_crossings<R: Rng + ?Sized>(fam: &SubordinatorFamily, levels: &[f64], h: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(SwfError::Domain(format!("grid step must be > 0, got {h}")));
    }
    let mut out = Vec::with_capacity(levels.len());
    let mut s = 0.0;
    let mut k: u64 = 0;
    for &t in levels {
        if t == 0.0 {
            out.push(0.0);
            continue;
        }
        while s <= t {
            s += sample_subordinator_increment(fam, h, rng)?;
            k += 1;
        }
        out.push(k as f64 * h);
    }
    Ok(out)
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
        return Err(SwfError::Domain("clock times must be finite and >= 0".into()));
    }
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(SwfError::Domain("clock times must be ascending".into()));
    }
    Ok(())
}

fn sub_path<R: Rng + ?Sized>(fam: &SubordinatorFamily, times: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(times.len());
    let (mut prev_t, mut acc) = (0.0, 0.0);
    for &t in times {
        if t > prev_t {
            acc += sample_subordinator_increment(fam, t - prev_t, rng)?;
        }
        prev_t = t;
        out.push(acc);
    }
    Ok(out)
}

fn inverse_path<R: Rng + ?Sized>(fam: &SubordinatorFamily, times: &[f64], rng: &mut R, grid_step: Option<f64>) -> Result<Vec<f64>> {
    check_invertible(fam)?;
    match fam.kind {
        FamilyKind::Identity => return Ok(times.to_vec()),
        FamilyKind::Drift => return Ok(times.iter().map(|t| t / fam.beta).collect()),
        FamilyKind::Stable { alpha } if fam.beta == 0.0 => return Ok(stable_inverse_path(alpha, times, rng)),
        _ => {}
    }
    let t_max = times.last().copied().unwrap_or(0.0);
    if t_max == 0.0 {
        return Ok(vec![0.0; times.len()]);
    }
    let h = grid_step.unwrap_or(DEFAULT_GRID_FRACTION * t_max);
    first_crossings(fam, times, h, rng)
}

/// Whether [`sample_clock_path`] is exact for these times (no grid crossing).
pub fn clock_path_is_exact(clock: &ClockSpec, times: &[f64]) -> bool {
    let inv_exact = |f: &SubordinatorFamily| inverse_draw_is_exact(f) || times.iter().all(|t| *t == 0.0);
    match clock {
        ClockSpec::Sub(_) => true,
        ClockSpec::InverseOf(f) => inv_exact(f),
        ClockSpec::Composed { outer, .. } => inv_exact(outer),
    }
}

/// Joint draw of `(C(t_1), …, C(t_n))` for ascending times.
///
/// Inverses of deterministic and driftless stable subordinators are drawn
/// exactly. Other inverse clocks scan one simulated path of the outer
/// subordinator with step `grid_step` (default a thousandth of the last time).
pub fn sample_clock_path_with<R: Rng + ?Sized>(clock: &ClockSpec, times: &[f64], grid_step: Option<f64>, rng: &mut R) -> Result<Vec<f64>> {
    check_times(times)?;
    match clock {
        ClockSpec::Sub(f) => sub_path(f, times, rng),
        ClockSpec::InverseOf(f) => inverse_path(f, times, rng, grid_step),
        ClockSpec::Composed { inner, outer } => {
            let r = inverse_path(outer, times, rng, grid_step)?;
            sub_path(inner, &r, rng)
        }
    }
}

/// [`sample_clock_path_with`] at the default grid step.
pub fn sample_clock_path<R: Rng + ?Sized>(clock: &ClockSpec, times: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    sample_clock_path_with(clock, times, None, rng)
}
