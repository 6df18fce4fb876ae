//! Observables on sampled variational states and on explicit state vectors.
//!
//! Every string observable is a sum of composite terms `L · Q · R`, where `L`
//! and `R` are products of diagonal P strings and `Q` is at most one
//! off-diagonal Q string. Its local estimator is
//! `O_loc(σ) = L(σ) R(Qσ) ψ(Qσ)/ψ(σ)`.

use std::collections::HashMap;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ansatz::{Ansatz, C64};
use crate::error::{Error, Result};
use crate::exact::{renyi2_of_terms, RestrictedBasis};
use crate::lattice::{make_string, RubyLattice, StringKind, StringPath, Template, Tripartition};
use crate::sampler::{estimate_values, swap_ratios, Estimate, SampleSet, N_BOOT};

/// Closed-loop expectations at or below this make an FM ratio undefined.
pub const FM_THRESHOLD: f64 = 1e-3;

pub fn eval_p(path: &StringPath, spins: &[i8]) -> Result<f64> {
    if path.kind != StringKind::P {
        return Err(Error::Template("P evaluation of a Q string".into()));
    }
    Ok(path.p_value(|s| spins[s] < 0))
}

/// `Qσ` as a new spin vector.
pub fn apply_q(lat: &RubyLattice, path: &StringPath, spins: &[i8]) -> Result<Vec<i8>> {
    if path.kind != StringKind::Q {
        return Err(Error::Template("Q action of a P string".into()));
    }
    let mut out = spins.to_vec();
    for s in path.q_flips(lat, |s| spins[s] < 0) {
        out[s] = -out[s];
    }
    Ok(out)
}

/// `ψ(Qσ)/ψ(σ)` for a variational state.
pub fn eval_q_loc(a: &impl Ansatz, lat: &RubyLattice, path: &StringPath, spins: &[i8], log_psi: C64) -> Result<C64> {
    let q = apply_q(lat, path, spins)?;
    Ok((a.log_amplitude(&q) - log_psi).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub left: Vec<StringPath>,
    pub q: Option<StringPath>,
    pub right: Vec<StringPath>,
}

impl Composite {
    pub fn diagonal(paths: Vec<StringPath>) -> Self {
        Self { left: paths, q: None, right: Vec::new() }
    }

    pub fn offdiagonal(q: StringPath) -> Self {
        Self { left: Vec::new(), q: Some(q), right: Vec::new() }
    }

    fn prefactor(&self, lat: &RubyLattice, spins: &[i8]) -> Result<(f64, Option<Vec<i8>>)> {
        let mut sign = 1.0;
        for p in &self.left {
            sign *= eval_p(p, spins)?;
        }
        let image = match &self.q {
            Some(q) => Some(apply_q(lat, q, spins)?),
            None => None,
        };
        let target = image.as_deref().unwrap_or(spins);
        for p in &self.right {
            sign *= eval_p(p, target)?;
        }
        Ok((sign, image))
    }
}

/// Observables addressable by name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Observable {
    Density,
    Monomer,
    Dimer,
    DoubleDimer,
    /// Parity of the dimers touching one vertex, averaged over bulk vertices.
    VertexP,
    HexagonP,
    HexagonQ,
    HalfP,
    HalfQ,
    FmP,
    FmQ,
    LogicalX,
    LogicalZ(usize),
    LogicalZZ(usize),
    LogicalZXZ(usize),
    Tee,
}

impl FromStr for Observable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let logical_j = |rest: &str| -> Result<usize> {
            rest.strip_prefix("j=").and_then(|j| j.parse().ok()).ok_or_else(|| Error::Parameter(format!("bad logical operator index in '{s}'")))
        };
        Ok(match s {
            "density" => Self::Density,
            "monomer" => Self::Monomer,
            "dimer" => Self::Dimer,
            "double-dimer" => Self::DoubleDimer,
            "P:vertex" => Self::VertexP,
            "P:hexagon" => Self::HexagonP,
            "Q:hexagon" => Self::HexagonQ,
            "P:half" => Self::HalfP,
            "Q:half" => Self::HalfQ,
            "P_FM" => Self::FmP,
            "Q_FM" => Self::FmQ,
            "logical:X" => Self::LogicalX,
            "tee:default" => Self::Tee,
            _ => {
                if let Some(r) = s.strip_prefix("logical:ZZ:") {
                    Self::LogicalZZ(logical_j(r)?)
                } else if let Some(r) = s.strip_prefix("logical:ZXZ:") {
                    Self::LogicalZXZ(logical_j(r)?)
                } else if let Some(r) = s.strip_prefix("logical:Z:") {
                    Self::LogicalZ(logical_j(r)?)
                } else {
                    return Err(Error::Parameter(format!("unknown observable '{s}'")));
                }
            }
        })
    }
}

impl std::fmt::Display for Observable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Density => write!(f, "density"),
            Self::Monomer => write!(f, "monomer"),
            Self::Dimer => write!(f, "dimer"),
            Self::DoubleDimer => write!(f, "double-dimer"),
            Self::VertexP => write!(f, "P:vertex"),
            Self::HexagonP => write!(f, "P:hexagon"),
            Self::HexagonQ => write!(f, "Q:hexagon"),
            Self::HalfP => write!(f, "P:half"),
            Self::HalfQ => write!(f, "Q:half"),
            Self::FmP => write!(f, "P_FM"),
            Self::FmQ => write!(f, "Q_FM"),
            Self::LogicalX => write!(f, "logical:X"),
            Self::LogicalZ(j) => write!(f, "logical:Z:j={j}"),
            Self::LogicalZZ(j) => write!(f, "logical:ZZ:j={j}"),
            Self::LogicalZXZ(j) => write!(f, "logical:ZXZ:j={j}"),
            Self::Tee => write!(f, "tee:default"),
        }
    }
}

/// Observable reduced to something evaluable per configuration.
#[derive(Clone, Debug)]
pub enum Compiled {
    /// Bulk-site mean occupation.
    Density(Vec<usize>),
    /// Fraction of bulk vertices with the given dimer count class.
    VertexClass(Vec<usize>, u8),
    /// Mean over composite terms.
    Strings(Vec<Composite>),
    /// `⟨open⟩ / √⟨closed⟩`.
    Ratio(Box<Compiled>, Box<Compiled>),
}

fn bulk_hexagons(lat: &RubyLattice) -> Result<Vec<usize>> {
    let h = lat.bulk_hexagons();
    if h.is_empty() {
        return Err(Error::Geometry("lattice has no bulk hexagon".into()));
    }
    Ok(h)
}

pub fn compile(lat: &RubyLattice, obs: &Observable) -> Result<Compiled> {
    let loops = |kind: StringKind| -> Result<Compiled> {
        let terms = bulk_hexagons(lat)?.into_iter().map(|h| make_string(lat, kind, &Template::HexagonLoop(h)).map(one_string)).collect::<Result<_>>()?;
        Ok(Compiled::Strings(terms))
    };
    let halves = |kind: StringKind| -> Result<Compiled> {
        let mut terms = Vec::new();
        for h in bulk_hexagons(lat)? {
            for start in [0, 3] {
                terms.push(one_string(make_string(lat, kind, &Template::HalfHexagon { hexagon: h, start })?));
            }
        }
        Ok(Compiled::Strings(terms))
    };
    let z = |j: usize| make_string(lat, StringKind::P, &Template::LogicalZ(j));
    let bulk_sites: Vec<usize> = (0..lat.n_sites()).filter(|&i| lat.bulk_sites[i]).collect();
    let bulk_vertices: Vec<usize> = (0..lat.n_vertices()).filter(|&v| lat.bulk_vertices[v]).collect();
    Ok(match obs {
        Observable::Density => Compiled::Density(if bulk_sites.is_empty() { (0..lat.n_sites()).collect() } else { bulk_sites }),
        Observable::Monomer | Observable::Dimer | Observable::DoubleDimer => {
            if bulk_vertices.is_empty() {
                return Err(Error::Geometry("lattice has no bulk vertex".into()));
            }
            let c = match obs {
                Observable::Monomer => 0,
                Observable::Dimer => 1,
                _ => 2,
            };
            Compiled::VertexClass(bulk_vertices, c)
        }
        Observable::VertexP => {
            let verts: Vec<usize> = if bulk_vertices.is_empty() { (0..lat.n_vertices()).collect() } else { bulk_vertices };
            let terms = verts.into_iter().map(|v| make_string(lat, StringKind::P, &Template::DualLoop(vec![v])).map(one_string)).collect::<Result<_>>()?;
            Compiled::Strings(terms)
        }
        Observable::HexagonP => loops(StringKind::P)?,
        Observable::HexagonQ => loops(StringKind::Q)?,
        Observable::HalfP => halves(StringKind::P)?,
        Observable::HalfQ => halves(StringKind::Q)?,
        Observable::FmP => Compiled::Ratio(Box::new(halves(StringKind::P)?), Box::new(loops(StringKind::P)?)),
        Observable::FmQ => Compiled::Ratio(Box::new(halves(StringKind::Q)?), Box::new(loops(StringKind::Q)?)),
        Observable::LogicalX => Compiled::Strings(vec![one_string(make_string(lat, StringKind::Q, &Template::LogicalX)?)]),
        Observable::LogicalZ(j) => Compiled::Strings(vec![Composite::diagonal(vec![z(*j)?])]),
        Observable::LogicalZZ(j) => Compiled::Strings(vec![Composite::diagonal(vec![z(1)?, z(*j)?])]),
        Observable::LogicalZXZ(j) => {
            Compiled::Strings(vec![Composite { left: vec![z(1)?], q: Some(make_string(lat, StringKind::Q, &Template::LogicalX)?), right: vec![z(*j)?] }])
        }
        Observable::Tee => return Err(Error::Parameter("entropies are computed by the tee functions".into())),
    })
}

fn one_string(p: StringPath) -> Composite {
    match p.kind {
        StringKind::P => Composite::diagonal(vec![p]),
        StringKind::Q => Composite::offdiagonal(p),
    }
}

/// Local estimator of a non-ratio compiled observable; `log_amp` gives the
/// log-amplitude of arbitrary configurations.
fn local_value(lat: &RubyLattice, c: &Compiled, spins: &[i8], log_psi: C64, log_amp: &dyn Fn(&[i8]) -> C64) -> Result<C64> {
    Ok(match c {
        Compiled::Density(sites) => C64::new(sites.iter().filter(|&&s| spins[s] < 0).count() as f64 / sites.len() as f64, 0.0),
        Compiled::VertexClass(verts, class) => {
            let hit = verts
                .iter()
                .filter(|&&v| {
                    let n = lat.vertices[v].sites.iter().filter(|&&s| spins[s] < 0).count().min(2) as u8;
                    n == *class
                })
                .count();
            C64::new(hit as f64 / verts.len() as f64, 0.0)
        }
        Compiled::Strings(terms) => {
            let mut acc = C64::new(0.0, 0.0);
            for t in terms {
                let (sign, image) = t.prefactor(lat, spins)?;
                acc += match image {
                    Some(img) => (log_amp(&img) - log_psi).exp() * sign,
                    None => C64::new(sign, 0.0),
                };
            }
            acc / terms.len() as f64
        }
        Compiled::Ratio(..) => return Err(Error::Parameter("ratio observables have no local estimator".into())),
    })
}

fn fm_ratio(open: Estimate, closed: Estimate) -> Result<Estimate> {
    let b = closed.mean.re;
    if b <= FM_THRESHOLD {
        return Err(Error::Undefined(format!("closed-loop expectation {b:.3e} is below the FM threshold")));
    }
    let a = open.mean.re;
    let mean = a / b.sqrt();
    let err = ((open.stderr / b.sqrt()).powi(2) + (0.5 * a * closed.stderr / b.powf(1.5)).powi(2)).sqrt();
    Ok(Estimate { mean: C64::new(mean, 0.0), stderr: err, n_samples: open.n_samples, n_chains: open.n_chains, tau: open.tau.max(closed.tau) })
}

/// Monte Carlo estimate over a sample set of the variational state `a`.
pub fn expect_sampled(a: &impl Ansatz, lat: &RubyLattice, set: &SampleSet, c: &Compiled) -> Result<Estimate> {
    if let Compiled::Ratio(o, l) = c {
        return fm_ratio(expect_sampled(a, lat, set, o)?, expect_sampled(a, lat, set, l)?);
    }
    let amp = |s: &[i8]| a.log_amplitude(s);
    let values = (0..set.len()).map(|k| local_value(lat, c, set.sample(k), set.log_psi[k], &amp)).collect::<Result<Vec<_>>>()?;
    estimate_values(&values, set.n_chains)
}

/// A state given amplitude by amplitude; exact expectations are full sums.
pub trait StateVector {
    fn terms(&self) -> Box<dyn Iterator<Item = (Vec<i8>, C64)> + '_>;
    fn amplitude(&self, spins: &[i8]) -> C64;
}

pub struct BasisState<'a> {
    pub basis: &'a RestrictedBasis,
    pub psi: &'a [C64],
}

impl StateVector for BasisState<'_> {
    fn terms(&self) -> Box<dyn Iterator<Item = (Vec<i8>, C64)> + '_> {
        Box::new((0..self.basis.dim()).filter(|&i| self.psi[i] != C64::new(0.0, 0.0)).map(|i| (self.basis.spins(i), self.psi[i])))
    }

    fn amplitude(&self, spins: &[i8]) -> C64 {
        self.basis.index_of(spins).map_or(C64::new(0.0, 0.0), |i| self.psi[i])
    }
}

/// Superposition of explicitly listed configurations.
pub struct SparseState {
    pub n_sites: usize,
    map: HashMap<Vec<i8>, C64>,
    order: Vec<Vec<i8>>,
}

impl SparseState {
    pub fn new(terms: impl IntoIterator<Item = (Vec<i8>, C64)>) -> Self {
        let mut map = HashMap::new();
        let mut order = Vec::new();
        let mut n_sites = 0;
        for (s, a) in terms {
            n_sites = s.len();
            if !map.contains_key(&s) {
                order.push(s.clone());
            }
            *map.entry(s).or_insert(C64::new(0.0, 0.0)) += a;
        }
        Self { n_sites, map, order }
    }
}

impl StateVector for SparseState {
    fn terms(&self) -> Box<dyn Iterator<Item = (Vec<i8>, C64)> + '_> {
        Box::new(self.order.iter().map(|s| (s.clone(), self.map[s])))
    }

    fn amplitude(&self, spins: &[i8]) -> C64 {
        self.map.get(spins).copied().unwrap_or(C64::new(0.0, 0.0))
    }
}

/// `⟨ψ|O|ψ⟩/⟨ψ|ψ⟩` by full summation.
pub fn expect_exact(lat: &RubyLattice, state: &dyn StateVector, c: &Compiled) -> Result<C64> {
    if let Compiled::Ratio(o, l) = c {
        let (a, b) = (expect_exact(lat, state, o)?.re, expect_exact(lat, state, l)?.re);
        if b <= FM_THRESHOLD {
            return Err(Error::Undefined(format!("closed-loop expectation {b:.3e} is below the FM threshold")));
        }
        return Ok(C64::new(a / b.sqrt(), 0.0));
    }
    let mut num = C64::new(0.0, 0.0);
    let mut norm = 0.0;
    for (spins, amp) in state.terms() {
        norm += amp.norm_sqr();
        num += match c {
            Compiled::Strings(terms) => {
                let mut acc = C64::new(0.0, 0.0);
                for t in terms {
                    let (sign, image) = t.prefactor(lat, &spins)?;
                    let target = image.map_or(amp, |img| state.amplitude(&img));
                    acc += amp.conj() * target * sign;
                }
                acc / terms.len() as f64
            }
            _ => local_value(lat, c, &spins, C64::new(0.0, 0.0), &|_| C64::new(0.0, 0.0))? * amp.norm_sqr(),
        };
    }
    if norm <= 0.0 {
        return Err(Error::Numerical("zero state vector".into()));
    }
    Ok(num / norm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionEntropy {
    pub name: String,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeeReport {
    pub entropies: Vec<RegionEntropy>,
    pub gamma: f64,
    pub gamma_stderr: f64,
    /// 2.5% and 97.5% bootstrap percentiles; equal to `gamma` for exact input.
    pub gamma_ci: (f64, f64),
}

const KP_NAMES: [&str; 7] = ["A", "B", "C", "AB", "BC", "CA", "ABC"];
const KP_SIGNS: [f64; 7] = [1.0, 1.0, 1.0, -1.0, -1.0, -1.0, 1.0];

fn kp_gamma(s: &[f64]) -> f64 {
    -s.iter().zip(KP_SIGNS).map(|(x, c)| c * x).sum::<f64>()
}

/// `γ` from stored region entropies, with errors combined in quadrature.
pub fn tee_kitaev_preskill(entropies: &[RegionEntropy]) -> Result<TeeReport> {
    let mut ordered = Vec::with_capacity(7);
    for name in KP_NAMES {
        let e = entropies.iter().find(|e| e.name == name).ok_or_else(|| Error::Undefined(format!("missing entropy for region {name}")))?;
        if !e.mean.is_finite() || !e.stderr.is_finite() {
            return Err(Error::Undefined(format!("entropy of region {name} is undefined")));
        }
        ordered.push(e.clone());
    }
    let s: Vec<f64> = ordered.iter().map(|e| e.mean).collect();
    let gamma = kp_gamma(&s);
    let gamma_stderr = ordered.iter().map(|e| e.stderr * e.stderr).sum::<f64>().sqrt();
    Ok(TeeReport { entropies: ordered, gamma, gamma_stderr, gamma_ci: (gamma - 1.96 * gamma_stderr, gamma + 1.96 * gamma_stderr) })
}

/// Exact seven-region entropies and `γ` of an explicit state.
pub fn tee_exact(state: &dyn StateVector, tri: &Tripartition) -> Result<TeeReport> {
    let (spins, amps): (Vec<Vec<i8>>, Vec<C64>) = state.terms().unzip();
    let entropies = tri
        .regions()
        .into_iter()
        .map(|(name, r)| Ok(RegionEntropy { name: name.into(), mean: renyi2_of_terms(&spins, &amps, &r)?, stderr: 0.0 }))
        .collect::<Result<Vec<_>>>()?;
    tee_kitaev_preskill(&entropies)
}

/// Replica estimate of the seven entropies and `γ`. All regions share the
/// same replica pairs and the same bootstrap resamples, so correlations
/// between the entropies carry into the error of `γ`.
pub fn tee_sampled(a: &impl Ansatz, tri: &Tripartition, r1: &SampleSet, r2: &SampleSet, seed: u64) -> Result<TeeReport> {
    let ratios: Vec<Vec<f64>> =
        tri.regions().iter().map(|(_, r)| swap_ratios(a, r, r1, r2).map(|v| v.into_iter().map(|z| z.re).collect())).collect::<Result<_>>()?;
    tee_from_ratios(&ratios, seed)
}

pub fn tee_from_ratios(ratios: &[Vec<f64>], seed: u64) -> Result<TeeReport> {
    if ratios.len() != 7 || ratios.iter().any(|r| r.len() != ratios[0].len()) || ratios[0].len() < 2 {
        return Err(Error::Parameter("need seven equal-length swap-ratio series".into()));
    }
    let n = ratios[0].len();
    let entropy_of = |means: &[f64]| -> Option<Vec<f64>> { means.iter().map(|&m| if m > 0.0 { Some(-m.ln()) } else { None }).collect() };
    let means: Vec<f64> = ratios.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let s = entropy_of(&means).ok_or_else(|| Error::Undefined("a swap estimator mean is not positive".into()))?;
    let gamma = kp_gamma(&s);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut boot_s: Vec<Vec<f64>> = Vec::with_capacity(N_BOOT);
    let mut idx = vec![0usize; n];
    for _ in 0..N_BOOT {
        for i in idx.iter_mut() {
            *i = rng.gen_range(0..n);
        }
        let m: Vec<f64> = ratios.iter().map(|r| idx.iter().map(|&i| r[i]).sum::<f64>() / n as f64).collect();
        if let Some(e) = entropy_of(&m) {
            boot_s.push(e);
        }
    }
    if boot_s.len() < 2 {
        return Err(Error::Undefined("bootstrap resamples give undefined entropies".into()));
    }
    let sd = |xs: &[f64]| {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
    };
    let entropies = (0..7)
        .map(|r| {
            let col: Vec<f64> = boot_s.iter().map(|b| b[r]).collect();
            RegionEntropy { name: KP_NAMES[r].into(), mean: s[r], stderr: sd(&col) }
        })
        .collect();
    let mut g: Vec<f64> = boot_s.iter().map(|b| kp_gamma(b)).collect();
    let gamma_stderr = sd(&g);
    g.sort_by(f64::total_cmp);
    let q = |p: f64| g[((p * (g.len() - 1) as f64).round() as usize).min(g.len() - 1)];
    Ok(TeeReport { entropies, gamma, gamma_stderr, gamma_ci: (q(0.025), q(0.975)) })
}
