//! Offspring point-process models and their log-Laplace analytics.
//!
//! A model is either the iid case `Σ_{i≤ν} δ_{X_i}` or an explicit finite list
//! of point patterns. Everything downstream (tilted walks, spines, oracles)
//! reads the model through the intensity measure `E[𝓛(dx)]` kept here.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::{kahan_sum, log_sum_exp, AliasTable, CountLaw, CountSampler, DisplacementLaw, DisplacementSampler};

/// Tolerance on |ψ′(ϱ*)| separating critical from subcritical models.
pub const REGIME_TOL: f64 = 1e-9;
/// Lower end of the bracket used when searching for ϱ*.
pub const RHO_SEARCH_FLOOR: f64 = 1e-6;
const RHO_SEARCH_CEIL: f64 = 1e6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("model document error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("log-Laplace transform diverges at t = {0}")]
    Divergent(f64),
    #[error("{0:?} regime: {1}")]
    Regime(Regime, String),
    #[error("no interior minimizer of psi(t)/t in ({lo}, {hi}]")]
    OutOfScope { lo: f64, hi: f64 },
}

/// One possible realization of the offspring point process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternAtom {
    pub prob: f64,
    pub points: Vec<f64>,
}

/// The serialized description of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Iid { nu: CountLaw, x: DisplacementLaw },
    General { atoms: Vec<PatternAtom> },
}

/// Intensity measure `E[𝓛(dx)]`.
#[derive(Debug, Clone)]
pub(crate) enum Intensity {
    /// Finitely many points `(value, expected number of children there)`.
    Atoms(Vec<(f64, f64)>),
    /// `mass · Normal(mean, sd²)`.
    Gaussian { mass: f64, mean: f64, sd: f64 },
}

#[derive(Debug, Clone)]
enum OffspringSampler {
    Iid { count: CountSampler, disp: DisplacementSampler },
    General { table: AliasTable, patterns: Vec<Vec<f64>> },
}

/// A validated offspring model. Immutable; share it freely across replicas.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    kind: ModelKind,
    intensity: Intensity,
    sampler: OffspringSampler,
    mean_offspring: f64,
    span: Option<f64>,
    lattice: bool,
}

impl Serialize for ModelSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.kind.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ModelSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let kind = ModelKind::deserialize(d)?;
        ModelSpec::new(kind).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Critical,
    Subcritical,
    OutOfScope,
}

/// Characteristic exponents and regime of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAnalytics {
    pub rho_star: f64,
    /// ϱ* from golden-section minimization of ψ(t)/t (cross-check).
    pub rho_star_golden: f64,
    pub rho_minus: Option<f64>,
    pub rho_plus: Option<f64>,
    pub psi_at_rho_star: f64,
    pub psi_prime_at_rho_star: f64,
    pub regime: Regime,
    pub mean_offspring: f64,
    pub lattice: bool,
    pub lattice_span: Option<f64>,
}

impl ModelAnalytics {
    /// Tilt used by the regime's spine: ϱ* (critical) or ϱ+ (subcritical).
    pub fn regime_rho(&self) -> Option<f64> {
        match self.regime {
            Regime::Critical => Some(self.rho_star),
            Regime::Subcritical => self.rho_plus,
            Regime::OutOfScope => None,
        }
    }

    /// ϱ+/ϱ−, the subcritical tail exponent.
    pub fn tail_exponent(&self) -> Option<f64> {
        Some(self.rho_plus? / self.rho_minus?)
    }
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Result<Self, ModelError> {
        let invalid = ModelError::Invalid;
        let (intensity, sampler, mean_offspring) = match &kind {
            ModelKind::Iid { nu, x } => {
                nu.validate().map_err(invalid)?;
                x.validate().map_err(invalid)?;
                let m = nu.mean();
                let intensity = match x {
                    DisplacementLaw::Gaussian { mean, sd } => Intensity::Gaussian { mass: m, mean: *mean, sd: *sd },
                    _ => Intensity::Atoms(merge_atoms(
                        x.atoms().unwrap_or_default().into_iter().map(|(v, p)| (v, m * p)),
                    )),
                };
                let sampler = OffspringSampler::Iid { count: CountSampler::new(nu), disp: DisplacementSampler::new(x) };
                (intensity, sampler, m)
            }
            ModelKind::General { atoms } => {
                if atoms.is_empty() {
                    return Err(invalid("general model needs at least one atom".into()));
                }
                let probs: Vec<f64> = atoms.iter().map(|a| a.prob).collect();
                crate::dist::check_probs(atoms.len(), &probs).map_err(invalid)?;
                if atoms.iter().flat_map(|a| &a.points).any(|v| !v.is_finite()) {
                    return Err(invalid("pattern points must be finite".into()));
                }
                let m = kahan_sum(atoms.iter().map(|a| a.prob * a.points.len() as f64));
                let intensity = Intensity::Atoms(merge_atoms(
                    atoms.iter().flat_map(|a| a.points.iter().map(move |v| (*v, a.prob))),
                ));
                let sampler = OffspringSampler::General {
                    table: AliasTable::new(&probs).ok_or_else(|| invalid("degenerate atom probabilities".into()))?,
                    patterns: atoms.iter().map(|a| a.points.clone()).collect(),
                };
                (intensity, sampler, m)
            }
        };
        if mean_offspring <= 1.0 {
            return Err(invalid(format!("E[nu] = {mean_offspring} must exceed 1 (supercritical Galton-Watson tree)")));
        }
        let charges_positive = match &intensity {
            Intensity::Atoms(a) => a.iter().any(|(v, w)| *v > 0.0 && *w > 0.0),
            Intensity::Gaussian { .. } => true,
        };
        if !charges_positive {
            return Err(invalid("displacement support must intersect (0, inf)".into()));
        }
        let (span, lattice) = match &intensity {
            Intensity::Atoms(a) => {
                let values: Vec<f64> = a.iter().map(|p| p.0).collect();
                (arithmetic_span(&values), shifted_lattice(&values))
            }
            Intensity::Gaussian { .. } => (None, false),
        };
        Ok(Self { kind, intensity, sampler, mean_offspring, span, lattice })
    }

    /// Parses and validates a JSON model document.
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        ModelSpec::new(doc::parse(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.kind).expect("model serializes")
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn mean_offspring(&self) -> f64 {
        self.mean_offspring
    }

    /// `Some(h)` when every displacement is an integer multiple of `h`.
    pub fn lattice_span(&self) -> Option<f64> {
        self.span
    }

    /// True when the displacements live on some shifted lattice `a + hℤ`.
    pub fn is_lattice(&self) -> bool {
        self.lattice
    }

    pub fn is_finite_support(&self) -> bool {
        matches!(self.intensity, Intensity::Atoms(_))
    }

    pub(crate) fn intensity(&self) -> &Intensity {
        &self.intensity
    }

    /// All possible offspring patterns with their probabilities, when finite.
    pub fn outcomes(&self) -> Option<Vec<(f64, Vec<f64>)>> {
        match &self.kind {
            ModelKind::General { atoms } => {
                Some(atoms.iter().filter(|a| a.prob > 0.0).map(|a| (a.prob, a.points.clone())).collect())
            }
            ModelKind::Iid { nu, x } => {
                let disp = x.atoms()?;
                let mut out = Vec::new();
                for (k, pk) in nu.pmf() {
                    let mut idx = vec![0usize; k as usize];
                    loop {
                        let prob = pk * idx.iter().map(|&i| disp[i].1).product::<f64>();
                        out.push((prob, idx.iter().map(|&i| disp[i].0).collect()));
                        // odometer over disp^k
                        let mut pos = 0;
                        while pos < idx.len() {
                            idx[pos] += 1;
                            if idx[pos] < disp.len() {
                                break;
                            }
                            idx[pos] = 0;
                            pos += 1;
                        }
                        if pos == idx.len() {
                            break;
                        }
                    }
                }
                Some(out)
            }
        }
    }

    /// ψ(t) = log E[Σ_{|u|=1} e^{t V(u)}].
    pub fn log_laplace(&self, t: f64) -> Result<f64, ModelError> {
        let v = match &self.intensity {
            Intensity::Atoms(a) => log_sum_exp(a.iter().map(|(v, w)| w.ln() + t * v)),
            Intensity::Gaussian { mass, mean, sd } => mass.ln() + mean * t + 0.5 * sd * sd * t * t,
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(ModelError::Divergent(t))
        }
    }

    /// (ψ(t), ψ′(t), ψ″(t)) in closed form.
    pub fn log_laplace_derivs(&self, t: f64) -> Result<(f64, f64, f64), ModelError> {
        let psi = self.log_laplace(t)?;
        match &self.intensity {
            Intensity::Atoms(a) => {
                let m = a.iter().map(|(v, w)| w.ln() + t * v).fold(f64::NEG_INFINITY, f64::max);
                let (mut z, mut s1, mut s2) = (0.0, 0.0, 0.0);
                for (v, w) in a {
                    let e = (w.ln() + t * v - m).exp();
                    z += e;
                    s1 += e * v;
                    s2 += e * v * v;
                }
                let d1 = s1 / z;
                Ok((psi, d1, (s2 / z - d1 * d1).max(0.0)))
            }
            Intensity::Gaussian { mean, sd, .. } => Ok((psi, mean + sd * sd * t, sd * sd)),
        }
    }

    pub fn log_laplace_prime(&self, t: f64) -> Result<f64, ModelError> {
        Ok(self.log_laplace_derivs(t)?.1)
    }

    pub fn log_laplace_second(&self, t: f64) -> Result<f64, ModelError> {
        Ok(self.log_laplace_derivs(t)?.2)
    }

    /// Draws one realization of 𝓛 into `out` (cleared first).
    #[inline]
    pub fn sample_offspring_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<f64>) {
        out.clear();
        match &self.sampler {
            OffspringSampler::Iid { count, disp } => {
                let k = count.sample(rng);
                for _ in 0..k {
                    out.push(disp.sample(rng));
                }
            }
            OffspringSampler::General { table, patterns } => {
                out.extend_from_slice(&patterns[table.sample(rng)]);
            }
        }
    }

    pub fn sample_offspring<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::new();
        self.sample_offspring_into(rng, &mut out);
        out
    }

    pub fn analyze(&self) -> Result<ModelAnalytics, ModelError> {
        classify_regime(self)
    }
}

/// Path-aware parsing. Internally tagged enums hide field paths from
/// `serde_path_to_error`, so documents are retagged externally and read
/// through mirror types.
mod doc {
    use super::{ModelError, ModelKind, PatternAtom};
    use crate::dist::{CountLaw, DisplacementLaw};
    use serde::Deserialize;
    use serde_json::{Map, Value};

    #[derive(Deserialize)]
    #[serde(rename_all = "snake_case", deny_unknown_fields)]
    enum Count {
        Deterministic { value: u32 },
        Finite { values: Vec<u32>, probs: Vec<f64> },
    }

    #[derive(Deserialize)]
    #[serde(rename_all = "snake_case", deny_unknown_fields)]
    enum Disp {
        TwoPoint { up: f64, p_up: f64, down: f64 },
        Finite { values: Vec<f64>, probs: Vec<f64> },
        Gaussian { mean: f64, sd: f64 },
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Atom {
        prob: f64,
        points: Vec<f64>,
    }

    fn schema(path: &str, message: impl Into<String>) -> ModelError {
        ModelError::Schema { path: if path.is_empty() { ".".into() } else { path.into() }, message: message.into() }
    }

    fn join(prefix: &str, rest: &str) -> String {
        match (prefix.is_empty(), rest.is_empty() || rest == ".") {
            (true, _) => rest.to_string(),
            (false, true) => prefix.to_string(),
            (false, false) if rest.starts_with('[') => format!("{prefix}{rest}"),
            (false, false) => format!("{prefix}.{rest}"),
        }
    }

    fn field<'a>(obj: &'a Map<String, Value>, key: &str, path: &str) -> Result<&'a Value, ModelError> {
        obj.get(key).ok_or_else(|| schema(path, format!("missing field `{key}`")))
    }

    fn object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>, ModelError> {
        v.as_object().ok_or_else(|| schema(path, format!("expected an object, found {v}")))
    }

    /// Reads `{"<tag>": "name", ...}` as the externally tagged `T`.
    fn tagged<T: serde::de::DeserializeOwned>(v: &Value, tag: &str, path: &str) -> Result<T, ModelError> {
        let obj = object(v, path)?;
        let name = field(obj, tag, path)?.as_str().ok_or_else(|| schema(&join(path, tag), "expected a string"))?;
        let mut body = obj.clone();
        body.remove(tag);
        let mut wrapped = Map::new();
        wrapped.insert(name.to_string(), Value::Object(body));
        plain(Value::Object(wrapped), path, Some(name))
    }

    fn plain<T: serde::de::DeserializeOwned>(v: Value, path: &str, variant: Option<&str>) -> Result<T, ModelError> {
        serde_path_to_error::deserialize(v).map_err(|e| {
            let inner = e.path().to_string();
            let inner = match variant {
                Some(name) if inner == name => String::new(),
                Some(name) => inner.strip_prefix(&format!("{name}.")).unwrap_or(&inner).to_string(),
                None => inner,
            };
            schema(&join(path, &inner), e.inner().to_string())
        })
    }

    pub(super) fn parse(text: &str) -> Result<ModelKind, ModelError> {
        let v: Value = serde_json::from_str(text).map_err(|e| schema("", e.to_string()))?;
        let obj = object(&v, "")?;
        let kind = field(obj, "kind", "")?.as_str().ok_or_else(|| schema("kind", "expected a string"))?;
        let allowed: &[&str] = match kind {
            "iid" => &["kind", "nu", "x"],
            "general" => &["kind", "atoms"],
            other => return Err(schema("kind", format!("unknown variant `{other}`, expected `iid` or `general`"))),
        };
        if let Some(extra) = obj.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(schema(extra, format!("unknown field `{extra}`")));
        }
        match kind {
            "iid" => {
                let nu = match tagged::<Count>(field(obj, "nu", "")?, "type", "nu")? {
                    Count::Deterministic { value } => CountLaw::Deterministic { value },
                    Count::Finite { values, probs } => CountLaw::Finite { values, probs },
                };
                let x = match tagged::<Disp>(field(obj, "x", "")?, "type", "x")? {
                    Disp::TwoPoint { up, p_up, down } => DisplacementLaw::TwoPoint { up, p_up, down },
                    Disp::Finite { values, probs } => DisplacementLaw::Finite { values, probs },
                    Disp::Gaussian { mean, sd } => DisplacementLaw::Gaussian { mean, sd },
                };
                Ok(ModelKind::Iid { nu, x })
            }
            _ => {
                let atoms: Vec<Atom> = plain(field(obj, "atoms", "")?.clone(), "atoms", None)?;
                Ok(ModelKind::General {
                    atoms: atoms.into_iter().map(|a| PatternAtom { prob: a.prob, points: a.points }).collect(),
                })
            }
        }
    }
}

fn merge_atoms<I: IntoIterator<Item = (f64, f64)>>(items: I) -> Vec<(f64, f64)> {
    let mut atoms: Vec<(f64, f64)> = items.into_iter().filter(|(_, w)| *w > 0.0).collect();
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(atoms.len());
    for (v, w) in atoms {
        match merged.last_mut() {
            Some(last) if last.0 == v => last.1 += w,
            _ => merged.push((v, w)),
        }
    }
    merged
}

fn float_gcd(a: f64, b: f64, tol: f64) -> f64 {
    let (mut a, mut b) = (a.abs().max(b.abs()), a.abs().min(b.abs()));
    while b > tol {
        let r = a % b;
        a = b;
        b = if r < b - r { r } else { b - r }.abs();
        if b <= tol {
            break;
        }
    }
    a
}

fn lattice_gcd(values: &[f64]) -> Option<f64> {
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return None;
    }
    let tol = 1e-9 * scale;
    let nonzero: Vec<f64> = values.iter().copied().filter(|v| v.abs() > tol).collect();
    let mut h = *nonzero.first()?;
    h = h.abs();
    for v in &nonzero[1..] {
        h = float_gcd(h, *v, tol);
    }
    if h < 1e-6 * scale {
        return None;
    }
    let ok = values.iter().all(|v| {
        let k = v / h;
        (k - k.round()).abs() < 1e-8
    });
    ok.then_some(h)
}

/// Largest `h` with every value in `hℤ`.
fn arithmetic_span(values: &[f64]) -> Option<f64> {
    lattice_gcd(values)
}

/// Whether the values live in `a + hℤ` for some `a`, `h > 0`.
fn shifted_lattice(values: &[f64]) -> bool {
    match values.split_first() {
        None => false,
        Some((_, [])) => true,
        Some((first, rest)) => {
            let diffs: Vec<f64> = rest.iter().map(|v| v - first).collect();
            lattice_gcd(&diffs).is_some()
        }
    }
}

fn bisect<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64) -> f64 {
    let f_lo = f(lo);
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm < 0.0) == (f_lo < 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn golden_min<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a) > tol * (1.0 + c.abs()) {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    // parabolic steps through symmetric stencils sharpen the flat minimum
    let mut x = 0.5 * (a + b);
    for scale in [1e-3, 1e-4, 3e-5] {
        let h = scale * (1.0 + x.abs());
        let (f0, fm, fp) = (f(x), f(x - h), f(x + h));
        let denom = fp - 2.0 * f0 + fm;
        if denom > 0.0 {
            let step = 0.5 * h * (fm - fp) / denom;
            if step.abs() < h {
                x += step;
            }
        }
    }
    x
}

/// Bracket `(lo, hi)` containing the minimizer of ψ(t)/t.
fn rho_star_bracket(model: &ModelSpec) -> Result<(f64, f64), ModelError> {
    let ratio = |t: f64| model.log_laplace(t).map(|p| p / t);
    let mut t = 1.0;
    loop {
        let here = ratio(t)?;
        let next = ratio(2.0 * t)?;
        if next > here {
            return Ok((RHO_SEARCH_FLOOR, 2.0 * t));
        }
        t *= 2.0;
        if t > RHO_SEARCH_CEIL {
            return Err(ModelError::OutOfScope { lo: RHO_SEARCH_FLOOR, hi: RHO_SEARCH_CEIL });
        }
    }
}

/// ϱ* solving ψ(ϱ) = ϱψ′(ϱ): bisection on tψ′ − ψ, cross-checked by
/// golden-section minimization of ψ(t)/t. Returns `(bisection, golden)`.
pub fn find_rho_star_pair(model: &ModelSpec) -> Result<(f64, f64), ModelError> {
    let (lo, hi) = rho_star_bracket(model)?;
    let g = |t: f64| {
        let (psi, d1, _) = model.log_laplace_derivs(t).unwrap_or((f64::NAN, f64::NAN, 0.0));
        t * d1 - psi
    };
    if !(g(lo) < 0.0 && g(hi) > 0.0) {
        return Err(ModelError::OutOfScope { lo, hi });
    }
    let by_root = bisect(g, lo, hi);
    let by_min = golden_min(|t| model.log_laplace(t).map(|p| p / t).unwrap_or(f64::INFINITY), lo, hi, 1e-12);
    Ok((by_root, by_min))
}

pub fn find_rho_star(model: &ModelSpec) -> Result<f64, ModelError> {
    Ok(find_rho_star_pair(model)?.0)
}

/// The two zeros ϱ− < ϱ* < ϱ+ of ψ in the subcritical regime.
pub fn find_rho_pm(model: &ModelSpec) -> Result<(f64, f64), ModelError> {
    let rho_star = find_rho_star(model)?;
    let (psi_star, d1, _) = model.log_laplace_derivs(rho_star)?;
    if d1.abs() <= REGIME_TOL {
        return Err(ModelError::Regime(Regime::Critical, "roots coincide at rho*".into()));
    }
    if psi_star >= 0.0 {
        return Err(ModelError::Regime(Regime::OutOfScope, "psi(rho*) >= 0, the killed process survives".into()));
    }
    let psi = |t: f64| model.log_laplace(t).unwrap_or(f64::INFINITY);
    let rho_minus = bisect(psi, 0.0, rho_star);
    let mut hi = 2.0 * rho_star;
    while psi(hi) <= 0.0 {
        hi *= 2.0;
        if hi > RHO_SEARCH_CEIL {
            return Err(ModelError::OutOfScope { lo: rho_star, hi });
        }
    }
    let rho_plus = bisect(psi, rho_star, hi);
    Ok((rho_minus, rho_plus))
}

pub fn classify_regime(model: &ModelSpec) -> Result<ModelAnalytics, ModelError> {
    let (rho_star, rho_star_golden) = find_rho_star_pair(model)?;
    let (psi_star, d1, _) = model.log_laplace_derivs(rho_star)?;
    let regime = if d1.abs() <= REGIME_TOL {
        Regime::Critical
    } else if d1 < 0.0 {
        Regime::Subcritical
    } else {
        Regime::OutOfScope
    };
    let (rho_minus, rho_plus) = if regime == Regime::Subcritical {
        let (m, p) = find_rho_pm(model)?;
        (Some(m), Some(p))
    } else {
        (None, None)
    };
    Ok(ModelAnalytics {
        rho_star,
        rho_star_golden,
        rho_minus,
        rho_plus,
        psi_at_rho_star: psi_star,
        psi_prime_at_rho_star: d1,
        regime,
        mean_offspring: model.mean_offspring(),
        lattice: model.is_lattice(),
        lattice_span: model.lattice_span(),
    })
}

/// Reference models used throughout the tests and examples.
pub mod presets {
    use super::*;

    /// ν ≡ 2, X = +1 w.p. `p_up`, −1 otherwise.
    pub fn two_point(p_up: f64) -> ModelSpec {
        ModelSpec::new(ModelKind::Iid {
            nu: CountLaw::Deterministic { value: 2 },
            x: DisplacementLaw::TwoPoint { up: 1.0, p_up, down: -1.0 },
        })
        .expect("valid two-point model")
    }

    /// The subcritical reference: ν ≡ 2, P(X = +1) = 0.05.
    pub fn two_point_subcritical() -> ModelSpec {
        two_point(0.05)
    }

    /// Critical lattice model whose ϱ*-tilted walk is the simple symmetric walk:
    /// ν ≡ 2, P(X = +1) = (2 − √3)/4, ϱ* = log(2 + √3).
    pub fn lattice_critical() -> ModelSpec {
        two_point((2.0 - 3f64.sqrt()) / 4.0)
    }

    /// ν ≡ 2, X ~ Normal(mu, 1).
    pub fn binary_gaussian(mu: f64) -> ModelSpec {
        ModelSpec::new(ModelKind::Iid {
            nu: CountLaw::Deterministic { value: 2 },
            x: DisplacementLaw::Gaussian { mean: mu, sd: 1.0 },
        })
        .expect("valid gaussian model")
    }

    /// Critical binary-Gaussian, μ = −√(2 log 2).
    pub fn critical_gaussian() -> ModelSpec {
        binary_gaussian(-(2.0 * 2f64.ln()).sqrt())
    }

    /// Subcritical binary-Gaussian, μ = −1.5.
    pub fn subcritical_gaussian() -> ModelSpec {
        binary_gaussian(-1.5)
    }

    /// Critical Gaussian model with ν ∈ {1, 2}, P(ν = 2) = 0.1. Its populations
    /// grow like 1.1ⁿ, which keeps non-killed martingale runs cheap.
    pub fn lean_critical_gaussian() -> ModelSpec {
        let m: f64 = 1.1;
        ModelSpec::new(ModelKind::Iid {
            nu: CountLaw::Finite { values: vec![1, 2], probs: vec![0.9, 0.1] },
            x: DisplacementLaw::Gaussian { mean: -(2.0 * m.ln()).sqrt(), sd: 1.0 },
        })
        .expect("valid lean model")
    }
}

#[cfg(test)]
mod tests {
    use super::presets::*;
    use super::*;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn binary_gaussian_psi_closed_form() {
        for mu in [-1.5, -0.3, 0.0] {
            let m = binary_gaussian(mu);
            assert!((m.log_laplace(0.0).unwrap() - LN2).abs() < 1e-15);
            for t in [0.3, 1.0, 2.5] {
                let want = LN2 + mu * t + t * t / 2.0;
                assert!((m.log_laplace(t).unwrap() - want).abs() < 1e-12);
                let (_, d1, d2) = m.log_laplace_derivs(t).unwrap();
                assert!((d1 - (mu + t)).abs() < 1e-12);
                assert!((d2 - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_point_rho_minus_is_a_zero() {
        let m = two_point_subcritical();
        // root of 0.1y² − y + 1.9 = 0, y = e^ϱ
        let y = (1.0 - (1.0f64 - 0.76).sqrt()) / 0.2;
        assert!((y.ln() - 0.936293).abs() < 1e-6);
        assert!(m.log_laplace(y.ln()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn critical_gaussian_rho_star() {
        let m = critical_gaussian();
        let (r, golden) = find_rho_star_pair(&m).unwrap();
        let want = (2.0 * LN2).sqrt();
        assert!((r - want).abs() < 1e-10, "{r} vs {want}");
        assert!((golden - r).abs() < 1e-8);
        assert!((want - 1.177410).abs() < 1e-6);
        let a = m.analyze().unwrap();
        assert_eq!(a.regime, Regime::Critical);
        assert!(a.psi_prime_at_rho_star.abs() < 1e-12);
        assert!(a.psi_at_rho_star.abs() < 1e-10);
    }

    #[test]
    fn subcritical_gaussian_rho_values() {
        let m = subcritical_gaussian();
        let r = find_rho_star(&m).unwrap();
        // min of (log2 − 1.5t + t²/2)/t sits at t = √(2 log 2), not at −μ
        assert!((r - (2.0 * LN2).sqrt()).abs() < 1e-10);
        let a = m.analyze().unwrap();
        assert_eq!(a.regime, Regime::Subcritical);
        let (lo, hi) = find_rho_pm(&m).unwrap();
        let disc = (2.25f64 - 2.0 * LN2).sqrt();
        assert!((1.5 - disc - 0.570641).abs() < 2e-6);
        assert!((lo - (1.5 - disc)).abs() < 1e-12);
        assert!((hi - (1.5 + disc)).abs() < 1e-12);
    }

    #[test]
    fn two_point_rho_pm() {
        let m = two_point_subcritical();
        let (lo, hi) = find_rho_pm(&m).unwrap();
        let root = |sign: f64| ((1.0 + sign * 0.24f64.sqrt()) / 0.2).ln();
        assert!((lo - root(-1.0)).abs() < 1e-12);
        assert!((hi - root(1.0)).abs() < 1e-12);
        assert!((hi.exp() - 7.44949).abs() < 1e-5);
        assert!((hi / lo - 2.144782).abs() < 1e-6);
        assert!(m.log_laplace(lo).unwrap().abs() <= 1e-10);
        assert!(m.log_laplace(hi).unwrap().abs() <= 1e-10);
        assert_eq!(m.analyze().unwrap().regime, Regime::Subcritical);
    }

    #[test]
    fn lattice_critical_model() {
        let m = lattice_critical();
        let a = m.analyze().unwrap();
        assert_eq!(a.regime, Regime::Critical);
        assert!((a.rho_star - (2.0 + 3f64.sqrt()).ln()).abs() < 1e-10);
        assert!(a.lattice);
        assert_eq!(a.lattice_span, Some(1.0));
        assert!(matches!(find_rho_pm(&m), Err(ModelError::Regime(Regime::Critical, _))));
    }

    #[test]
    fn supercritical_speed_is_out_of_scope() {
        let a = binary_gaussian(0.0).analyze().unwrap();
        assert_eq!(a.regime, Regime::OutOfScope);
        assert!(a.psi_prime_at_rho_star > 0.0);
    }

    #[test]
    fn rejects_invalid_models() {
        let sub = ModelSpec::new(ModelKind::Iid {
            nu: CountLaw::Deterministic { value: 1 },
            x: DisplacementLaw::Gaussian { mean: -1.0, sd: 1.0 },
        });
        assert!(matches!(sub, Err(ModelError::Invalid(_))));
        let negative = ModelSpec::new(ModelKind::Iid {
            nu: CountLaw::Deterministic { value: 2 },
            x: DisplacementLaw::Finite { values: vec![-1.0, -2.0], probs: vec![0.5, 0.5] },
        });
        assert!(matches!(negative, Err(ModelError::Invalid(_))));
        let bad_sum = ModelSpec::new(ModelKind::General {
            atoms: vec![
                PatternAtom { prob: 0.5, points: vec![1.0, -1.0] },
                PatternAtom { prob: 0.5 + 1e-9, points: vec![1.0, 1.0] },
            ],
        });
        assert!(bad_sum.is_err());
    }

    #[test]
    fn json_round_trip_and_schema_errors() {
        let text = r#"{"kind":"iid","nu":{"type":"deterministic","value":2},"x":{"type":"two_point","up":1.0,"p_up":0.05,"down":-1.0}}"#;
        let m = ModelSpec::from_json(text).unwrap();
        assert_eq!(m.mean_offspring(), 2.0);
        let again = ModelSpec::from_json(&m.to_json()).unwrap();
        assert_eq!(again.kind(), m.kind());

        let err = ModelSpec::from_json(
            r#"{"kind":"iid","nu":{"type":"deterministic","value":2},"x":{"type":"two_point","up":"a"}}"#,
        )
        .unwrap_err();
        match err {
            ModelError::Schema { path, .. } => assert_eq!(path, "x.up"),
            other => panic!("unexpected {other:?}"),
        }
        let cases = [
            (
                r#"{"kind":"iid","nu":{"type":"deterministic","value":-2},"x":{"type":"gaussian","mean":0,"sd":1}}"#,
                "nu.value",
            ),
            (r#"{"kind":"iid","nu":{"type":"poisson","value":2},"x":{"type":"gaussian","mean":0,"sd":1}}"#, "nu"),
            (r#"{"kind":"iid","nu":{"type":"deterministic","value":2}}"#, "."),
            (r#"{"kind":"general","atoms":[{"prob":1.0,"points":[1.0,"x"]}]}"#, "atoms[0].points[1]"),
            (r#"{"kind":"tree"}"#, "kind"),
            (
                r#"{"kind":"iid","nu":{"type":"deterministic","value":2},"x":{"type":"gaussian","mean":0,"sd":1},"y":1}"#,
                "y",
            ),
            ("[1,2]", "."),
        ];
        for (text, want) in cases {
            match ModelSpec::from_json(text) {
                Err(ModelError::Schema { path, .. }) => assert_eq!(path, want, "{text}"),
                other => panic!("{text}: unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn offspring_sampling() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let m = two_point_subcritical();
        for _ in 0..100 {
            assert_eq!(m.sample_offspring(&mut rng).len(), 2);
        }
        let single = ModelSpec::new(ModelKind::General {
            atoms: vec![PatternAtom { prob: 1.0, points: vec![0.5, -0.25, 2.0] }],
        })
        .unwrap();
        for _ in 0..10 {
            assert_eq!(single.sample_offspring(&mut rng), vec![0.5, -0.25, 2.0]);
        }
        let random_nu = ModelSpec::new(ModelKind::Iid {
            nu: CountLaw::Finite { values: vec![0, 1, 3], probs: vec![0.2, 0.3, 0.5] },
            x: DisplacementLaw::Gaussian { mean: 0.0, sd: 1.0 },
        })
        .unwrap();
        let n = 1_000_000;
        let mut total = 0.0;
        let mut total_sq = 0.0;
        for _ in 0..n {
            let k = random_nu.sample_offspring(&mut rng).len() as f64;
            total += k;
            total_sq += k * k;
        }
        let mean = total / n as f64;
        let var = total_sq / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        assert!((mean - random_nu.mean_offspring()).abs() < 4.0 * se);
    }

    #[test]
    fn outcome_enumeration_is_a_distribution() {
        let m = ModelSpec::new(ModelKind::Iid {
            nu: CountLaw::Finite { values: vec![1, 2, 3], probs: vec![0.3, 0.3, 0.4] },
            x: DisplacementLaw::TwoPoint { up: 1.0, p_up: 0.2, down: -1.0 },
        })
        .unwrap();
        let out = m.outcomes().unwrap();
        assert_eq!(out.len(), 2 + 4 + 8);
        assert!((kahan_sum(out.iter().map(|o| o.0)) - 1.0).abs() < 1e-14);
        assert!(critical_gaussian().outcomes().is_none());
    }

    #[test]
    fn lattice_detection() {
        assert_eq!(arithmetic_span(&[1.0, -1.0]), Some(1.0));
        assert_eq!(arithmetic_span(&[0.5, -1.5]), Some(0.5));
        assert!(arithmetic_span(&[1.0, 2f64.sqrt()]).is_none());
        assert!(shifted_lattice(&[0.3, -1.7]));
        assert!(!shifted_lattice(&[0.0, 1.0, 2f64.sqrt()]));
    }

    fn top_atom_mass(m: &ModelSpec) -> f64 {
        match m.intensity() {
            Intensity::Atoms(a) => a.last().unwrap().1,
            Intensity::Gaussian { .. } => 0.0,
        }
    }

    fn gaussian_or_finite() -> impl Strategy<Value = ModelSpec> {
        prop_oneof![
            (-3.0f64..1.0).prop_map(binary_gaussian),
            (0.01f64..0.6).prop_map(two_point),
            (0.05f64..0.5, 0.1f64..2.0, -3.0f64..-0.1).prop_map(|(p, up, down)| {
                ModelSpec::new(ModelKind::Iid {
                    nu: CountLaw::Finite { values: vec![1, 2, 4], probs: vec![0.3, 0.4, 0.3] },
                    x: DisplacementLaw::Finite {
                        values: vec![up, down, 0.5 * down],
                        probs: vec![p, 0.5 * (1.0 - p), 0.5 * (1.0 - p)],
                    },
                })
                .unwrap()
            }),
        ]
    }

    proptest! {
        #[test]
        fn psi_at_zero_is_log_mean(m in gaussian_or_finite()) {
            prop_assert!((m.log_laplace(0.0).unwrap() - m.mean_offspring().ln()).abs() < 1e-14);
        }

        #[test]
        fn psi_is_convex(m in gaussian_or_finite(), a in -2.0f64..2.0, gap1 in 0.01f64..1.0, gap2 in 0.01f64..1.0) {
            let (t1, t2, t3) = (a, a + gap1, a + gap1 + gap2);
            let (p1, p2, p3) = (m.log_laplace(t1).unwrap(), m.log_laplace(t2).unwrap(), m.log_laplace(t3).unwrap());
            let interp = p1 + (p3 - p1) * (t2 - t1) / (t3 - t1);
            prop_assert!(p2 <= interp + 1e-12);
        }

        #[test]
        fn rho_star_routes_agree(m in gaussian_or_finite()) {
            let Ok((by_root, by_min)) = find_rho_star_pair(&m) else {
                prop_assert!(top_atom_mass(&m) >= 1.0);
                return Ok(());
            };
            let (psi, d1, d2) = m.log_laplace_derivs(by_root).unwrap();
            prop_assert!((psi - by_root * d1).abs() <= 1e-10);
            // a minimizer found from function values is only good to √(ε f/f'')
            let tol = 1e-8 * (1.0 + by_root.abs()) + 10.0 * (f64::EPSILON * psi.abs() / d2).sqrt();
            prop_assert!((by_root - by_min).abs() <= tol, "{} vs {}", by_root, by_min);
        }

        #[test]
        fn subcritical_roots_bracket(m in gaussian_or_finite()) {
            let Ok(a) = m.analyze() else {
                prop_assert!(top_atom_mass(&m) >= 1.0);
                return Ok(());
            };
            if a.regime == Regime::Subcritical {
                let (lo, hi) = (a.rho_minus.unwrap(), a.rho_plus.unwrap());
                prop_assert!(0.0 < lo && lo < a.rho_star && a.rho_star < hi);
                prop_assert!(m.log_laplace(lo).unwrap().abs() <= 1e-10);
                prop_assert!(m.log_laplace(hi).unwrap().abs() <= 1e-10);
                prop_assert!(m.log_laplace(0.5 * (lo + hi)).unwrap() < 0.0);
                prop_assert!(a.psi_prime_at_rho_star < 0.0);
            }
        }
    }
}
