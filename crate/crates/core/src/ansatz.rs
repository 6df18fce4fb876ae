//! Jastrow wave functions with an inhomogeneous mean field.
//!
//! Every family is log-linear in its parameters,
//! `log ψ(σ) = Σ_k θ_k F_k(σ)`, with real features `F_k`. The first `2N`
//! parameters are `log φ_i(↑)` and `log φ_i(↓)` interleaved per site.
//! Sampling uses cached local fields `h_i = Σ_j K_ij σ_j` of the two-body
//! couplings so a flip ratio costs `O(|flips|²)` and an update `O(N)`.

use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{distance_classes, DistanceTable, RubyLattice};

pub type C64 = Complex64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Jmf,
    Dense,
    ThreeBody,
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jmf" => Ok(Family::Jmf),
            "dense" => Ok(Family::Dense),
            "three-body" => Ok(Family::ThreeBody),
            other => Err(Error::Parameter(format!("unknown ansatz family `{other}`"))),
        }
    }
}

/// Common evaluation interface shared by all families.
pub trait Ansatz: Send + Sync {
    fn family(&self) -> Family;
    fn n_sites(&self) -> usize;
    fn params(&self) -> &[C64];
    /// Replace all parameters; the length must equal `n_params`.
    fn set_params(&mut self, p: &[C64]);

    fn n_params(&self) -> usize {
        self.params().len()
    }

    /// Writes `F_k(σ)` into `out` (length `n_params`).
    fn features(&self, spins: &[i8], out: &mut [f64]);

    fn log_amplitude(&self, spins: &[i8]) -> C64;

    /// `∂_k log ψ(σ)`, which equals the feature vector.
    fn log_derivatives(&self, spins: &[i8]) -> Vec<C64> {
        let mut f = vec![0.0; self.n_params()];
        self.features(spins, &mut f);
        f.into_iter().map(|x| C64::new(x, 0.0)).collect()
    }

    fn fields(&self, spins: &[i8]) -> Vec<C64>;

    /// `log ψ(σ') − log ψ(σ)` where `σ'` flips the distinct sites `flips`.
    fn log_ratio(&self, fields: &[C64], spins: &[i8], flips: &[usize]) -> C64;

    /// Refresh `fields` for flipping `flips`; `spins` are the values before the flip.
    fn update_fields(&self, fields: &mut [C64], spins: &[i8], flips: &[usize]);
}

#[inline]
fn mf_index(i: usize, s: i8) -> usize {
    2 * i + usize::from(s < 0)
}

fn mf_log(theta: &[C64], spins: &[i8]) -> C64 {
    spins.iter().enumerate().map(|(i, &s)| theta[mf_index(i, s)]).sum()
}

fn mf_features(spins: &[i8], out: &mut [f64]) {
    for (i, &s) in spins.iter().enumerate() {
        out[2 * i] = f64::from(u8::from(s > 0));
        out[2 * i + 1] = f64::from(u8::from(s < 0));
    }
}

fn mf_ratio(theta: &[C64], spins: &[i8], flips: &[usize]) -> C64 {
    flips.iter().map(|&k| theta[mf_index(k, -spins[k])] - theta[mf_index(k, spins[k])]).sum()
}

/// Symmetric two-body couplings `K_ij` with zero diagonal.
#[derive(Clone, Debug, PartialEq)]
struct Pair {
    n: usize,
    k: Vec<C64>,
}

impl Pair {
    fn fields(&self, spins: &[i8]) -> Vec<C64> {
        (0..self.n)
            .map(|i| {
                let row = &self.k[i * self.n..(i + 1) * self.n];
                row.iter().zip(spins).map(|(&k, &s)| k * f64::from(s)).sum()
            })
            .collect()
    }

    fn log(&self, spins: &[i8]) -> C64 {
        let h = self.fields(spins);
        0.5 * h.iter().zip(spins).map(|(&h, &s)| h * f64::from(s)).sum::<C64>()
    }

    fn ratio(&self, h: &[C64], spins: &[i8], flips: &[usize]) -> C64 {
        let mut r = C64::new(0.0, 0.0);
        for (a, &k) in flips.iter().enumerate() {
            let sk = f64::from(spins[k]);
            r -= 2.0 * sk * h[k];
            for &l in &flips[..a] {
                r += 4.0 * self.k[k * self.n + l] * sk * f64::from(spins[l]);
            }
        }
        r
    }

    fn update(&self, h: &mut [C64], spins: &[i8], flips: &[usize]) {
        for &k in flips {
            let s2 = 2.0 * f64::from(spins[k]);
            let col = &self.k[k * self.n..(k + 1) * self.n];
            for (hj, &kj) in h.iter_mut().zip(col) {
                *hj -= s2 * kj;
            }
        }
    }
}

/// Translation-invariant two-body Jastrow with mean field: one coupling per
/// distance class.
#[derive(Clone, Debug)]
pub struct JmfParams {
    table: Arc<DistanceTable>,
    theta: Vec<C64>,
    pair: Pair,
}

impl JmfParams {
    /// All parameters zero: the uniform superposition.
    pub fn zeros(table: Arc<DistanceTable>) -> Self {
        let n = table.n_sites();
        let np = 2 * n + table.n_classes();
        let mut s = Self { pair: Pair { n, k: vec![C64::new(0.0, 0.0); n * n] }, table, theta: Vec::new() };
        s.set_params(&vec![C64::new(0.0, 0.0); np]);
        s
    }

    pub fn for_lattice(lat: &RubyLattice) -> Self {
        Self::zeros(Arc::new(distance_classes(lat)))
    }

    pub fn table(&self) -> &Arc<DistanceTable> {
        &self.table
    }

    pub fn n_classes(&self) -> usize {
        self.table.n_classes()
    }

    pub fn log_phi(&self, i: usize) -> (C64, C64) {
        (self.theta[2 * i], self.theta[2 * i + 1])
    }

    pub fn set_log_phi(&mut self, i: usize, up: C64, down: C64) {
        self.theta[2 * i] = up;
        self.theta[2 * i + 1] = down;
    }

    pub fn jastrow(&self) -> &[C64] {
        &self.theta[2 * self.pair.n..]
    }

    pub fn set_jastrow(&mut self, v: &[C64]) {
        let mut p = self.theta.clone();
        p[2 * self.pair.n..].copy_from_slice(v);
        self.set_params(&p);
    }
}

impl Ansatz for JmfParams {
    fn family(&self) -> Family {
        Family::Jmf
    }

    fn n_sites(&self) -> usize {
        self.pair.n
    }

    fn params(&self) -> &[C64] {
        &self.theta
    }

    fn set_params(&mut self, p: &[C64]) {
        let n = self.pair.n;
        assert_eq!(p.len(), 2 * n + self.table.n_classes(), "parameter count");
        self.theta = p.to_vec();
        for i in 0..n {
            for j in 0..n {
                self.pair.k[i * n + j] = if i == j { C64::new(0.0, 0.0) } else { p[2 * n + self.table.class_of(i, j)] };
            }
        }
    }

    fn features(&self, spins: &[i8], out: &mut [f64]) {
        let n = self.pair.n;
        out.fill(0.0);
        mf_features(spins, out);
        for i in 0..n {
            for j in i + 1..n {
                out[2 * n + self.table.class_of(i, j)] += f64::from(spins[i] * spins[j]);
            }
        }
    }

    fn log_amplitude(&self, spins: &[i8]) -> C64 {
        mf_log(&self.theta, spins) + self.pair.log(spins)
    }

    fn fields(&self, spins: &[i8]) -> Vec<C64> {
        self.pair.fields(spins)
    }

    fn log_ratio(&self, fields: &[C64], spins: &[i8], flips: &[usize]) -> C64 {
        mf_ratio(&self.theta, spins, flips) + self.pair.ratio(fields, spins, flips)
    }

    fn update_fields(&self, fields: &mut [C64], spins: &[i8], flips: &[usize]) {
        self.pair.update(fields, spins, flips);
    }
}

/// Index of the pair `i < j` in row-major upper-triangular order.
#[inline]
fn pair_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j);
    i * (2 * n - i - 1) / 2 + (j - i - 1)
}

/// Mean field plus an independent coupling `W_ij` for every pair.
#[derive(Clone, Debug)]
pub struct DenseJastrowParams {
    theta: Vec<C64>,
    pair: Pair,
}

impl DenseJastrowParams {
    pub fn zeros(n: usize) -> Self {
        let mut s = Self { theta: Vec::new(), pair: Pair { n, k: vec![C64::new(0.0, 0.0); n * n] } };
        s.set_params(&vec![C64::new(0.0, 0.0); 2 * n + n * (n - 1) / 2]);
        s
    }

    /// Same state as `jmf`, with its class couplings copied to every pair.
    pub fn from_jmf(jmf: &JmfParams) -> Self {
        let n = jmf.n_sites();
        let mut p = jmf.params()[..2 * n].to_vec();
        for i in 0..n {
            for j in i + 1..n {
                p.push(jmf.pair.k[i * n + j]);
            }
        }
        let mut s = Self::zeros(n);
        s.set_params(&p);
        s
    }

    pub fn coupling(&self, i: usize, j: usize) -> C64 {
        self.pair.k[i * self.pair.n + j]
    }
}

impl Ansatz for DenseJastrowParams {
    fn family(&self) -> Family {
        Family::Dense
    }

    fn n_sites(&self) -> usize {
        self.pair.n
    }

    fn params(&self) -> &[C64] {
        &self.theta
    }

    fn set_params(&mut self, p: &[C64]) {
        let n = self.pair.n;
        assert_eq!(p.len(), 2 * n + n * (n - 1) / 2, "parameter count");
        self.theta = p.to_vec();
        for i in 0..n {
            for j in i + 1..n {
                let w = p[2 * n + pair_index(n, i, j)];
                self.pair.k[i * n + j] = w;
                self.pair.k[j * n + i] = w;
            }
        }
    }

    fn features(&self, spins: &[i8], out: &mut [f64]) {
        let n = self.pair.n;
        mf_features(spins, out);
        let mut idx = 2 * n;
        for i in 0..n {
            for j in i + 1..n {
                out[idx] = f64::from(spins[i] * spins[j]);
                idx += 1;
            }
        }
    }

    fn log_amplitude(&self, spins: &[i8]) -> C64 {
        mf_log(&self.theta, spins) + self.pair.log(spins)
    }

    fn fields(&self, spins: &[i8]) -> Vec<C64> {
        self.pair.fields(spins)
    }

    fn log_ratio(&self, fields: &[C64], spins: &[i8], flips: &[usize]) -> C64 {
        mf_ratio(&self.theta, spins, flips) + self.pair.ratio(fields, spins, flips)
    }

    fn update_fields(&self, fields: &mut [C64], spins: &[i8], flips: &[usize]) {
        self.pair.update(fields, spins, flips);
    }
}

/// JMF plus `Σ_{i<j<k} W_{d_ij, d_jk} σ_i σ_j σ_k`.
///
/// The triple list grows as `N³`, so this family is meant for lattices
/// within the exact-size cap.
#[derive(Clone, Debug)]
pub struct ThreeBodyParams {
    jmf: JmfParams,
    theta: Vec<C64>,
    triples: Arc<Triples>,
}

#[derive(Debug)]
struct Triples {
    sites: Vec<[u32; 3]>,
    param: Vec<u32>,
    by_site: Vec<Vec<u32>>,
}

pub const THREE_BODY_MAX_SITES: usize = 96;

impl ThreeBodyParams {
    pub fn from_jmf(jmf: JmfParams) -> Result<Self> {
        let n = jmf.n_sites();
        if n > THREE_BODY_MAX_SITES {
            return Err(Error::TooLarge { dim: n, cap: THREE_BODY_MAX_SITES });
        }
        let nc = jmf.n_classes();
        let t = jmf.table.clone();
        let mut tr = Triples { sites: Vec::new(), param: Vec::new(), by_site: vec![Vec::new(); n] };
        for i in 0..n {
            for j in i + 1..n {
                for k in j + 1..n {
                    let id = tr.sites.len() as u32;
                    tr.sites.push([i as u32, j as u32, k as u32]);
                    tr.param.push((t.class_of(i, j) * nc + t.class_of(j, k)) as u32);
                    for s in [i, j, k] {
                        tr.by_site[s].push(id);
                    }
                }
            }
        }
        let mut theta = jmf.params().to_vec();
        theta.resize(theta.len() + nc * nc, C64::new(0.0, 0.0));
        Ok(Self { jmf, theta, triples: Arc::new(tr) })
    }

    pub fn jmf(&self) -> &JmfParams {
        &self.jmf
    }

    fn w(&self, id: usize) -> C64 {
        self.theta[self.jmf.n_params() + self.triples.param[id] as usize]
    }

    fn triple_sign(&self, spins: &[i8], id: usize) -> f64 {
        let [i, j, k] = self.triples.sites[id];
        f64::from(spins[i as usize] * spins[j as usize] * spins[k as usize])
    }
}

impl Ansatz for ThreeBodyParams {
    fn family(&self) -> Family {
        Family::ThreeBody
    }

    fn n_sites(&self) -> usize {
        self.jmf.n_sites()
    }

    fn params(&self) -> &[C64] {
        &self.theta
    }

    fn set_params(&mut self, p: &[C64]) {
        assert_eq!(p.len(), self.theta.len(), "parameter count");
        self.jmf.set_params(&p[..self.jmf.n_params()]);
        self.theta = p.to_vec();
    }

    fn features(&self, spins: &[i8], out: &mut [f64]) {
        let nb = self.jmf.n_params();
        self.jmf.features(spins, &mut out[..nb]);
        out[nb..].fill(0.0);
        for id in 0..self.triples.sites.len() {
            out[nb + self.triples.param[id] as usize] += self.triple_sign(spins, id);
        }
    }

    fn log_amplitude(&self, spins: &[i8]) -> C64 {
        let mut l = self.jmf.log_amplitude(spins);
        for id in 0..self.triples.sites.len() {
            l += self.w(id) * self.triple_sign(spins, id);
        }
        l
    }

    fn fields(&self, spins: &[i8]) -> Vec<C64> {
        self.jmf.fields(spins)
    }

    fn log_ratio(&self, fields: &[C64], spins: &[i8], flips: &[usize]) -> C64 {
        let mut r = self.jmf.log_ratio(fields, spins, flips);
        for (a, &k) in flips.iter().enumerate() {
            for &id in &self.triples.by_site[k] {
                let sites = self.triples.sites[id as usize];
                // Count each triple once, from its first flipped member.
                if flips[..a].iter().any(|&l| sites.contains(&(l as u32))) {
                    continue;
                }
                let m = flips.iter().filter(|&&l| sites.contains(&(l as u32))).count();
                if m % 2 == 1 {
                    r -= 2.0 * self.w(id as usize) * self.triple_sign(spins, id as usize);
                }
            }
        }
        r
    }

    fn update_fields(&self, fields: &mut [C64], spins: &[i8], flips: &[usize]) {
        self.jmf.update_fields(fields, spins, flips);
    }
}

/// Any of the supported families, for callers that choose at run time.
#[derive(Clone, Debug)]
pub enum AnyAnsatz {
    Jmf(JmfParams),
    Dense(DenseJastrowParams),
    ThreeBody(ThreeBodyParams),
}

macro_rules! delegate {
    ($self:ident, $a:ident => $e:expr) => {
        match $self {
            AnyAnsatz::Jmf($a) => $e,
            AnyAnsatz::Dense($a) => $e,
            AnyAnsatz::ThreeBody($a) => $e,
        }
    };
}

impl AnyAnsatz {
    /// Zero parameters of the given family.
    pub fn zeros(family: Family, lat: &RubyLattice) -> Result<Self> {
        let jmf = JmfParams::for_lattice(lat);
        Ok(match family {
            Family::Jmf => AnyAnsatz::Jmf(jmf),
            Family::Dense => AnyAnsatz::Dense(DenseJastrowParams::zeros(lat.n_sites())),
            Family::ThreeBody => AnyAnsatz::ThreeBody(ThreeBodyParams::from_jmf(jmf)?),
        })
    }

    /// Embed a JMF state into a richer family without changing the wave function.
    pub fn lift(jmf: JmfParams, family: Family) -> Result<Self> {
        Ok(match family {
            Family::Jmf => AnyAnsatz::Jmf(jmf),
            Family::Dense => AnyAnsatz::Dense(DenseJastrowParams::from_jmf(&jmf)),
            Family::ThreeBody => AnyAnsatz::ThreeBody(ThreeBodyParams::from_jmf(jmf)?),
        })
    }
}

impl Ansatz for AnyAnsatz {
    fn family(&self) -> Family {
        delegate!(self, a => a.family())
    }
    fn n_sites(&self) -> usize {
        delegate!(self, a => a.n_sites())
    }
    fn params(&self) -> &[C64] {
        delegate!(self, a => a.params())
    }
    fn n_params(&self) -> usize {
        delegate!(self, a => a.n_params())
    }
    fn set_params(&mut self, p: &[C64]) {
        delegate!(self, a => a.set_params(p))
    }
    fn features(&self, spins: &[i8], out: &mut [f64]) {
        delegate!(self, a => a.features(spins, out))
    }
    fn log_amplitude(&self, spins: &[i8]) -> C64 {
        delegate!(self, a => a.log_amplitude(spins))
    }
    fn fields(&self, spins: &[i8]) -> Vec<C64> {
        delegate!(self, a => a.fields(spins))
    }
    fn log_ratio(&self, fields: &[C64], spins: &[i8], flips: &[usize]) -> C64 {
        delegate!(self, a => a.log_ratio(fields, spins, flips))
    }
    fn update_fields(&self, fields: &mut [C64], spins: &[i8], flips: &[usize]) {
        delegate!(self, a => a.update_fields(fields, spins, flips))
    }
}

/// Jastrow couplings and mean field for `ψ ∝ exp((W/2) Σ_v (n_v − 1)²)`,
/// which suppresses every vertex defect by `e^{W/2}` in amplitude.
///
/// Writing `n = (1 − σ)/2` turns the vertex penalty into couplings `(W/4)χ_ij`
/// between sites that share a vertex plus a field `(W/4)(m_i − z_i)σ_i`,
/// where `m_i` is the number of vertices of site `i` and `z_i = Σ_j χ_ij`.
pub fn rvb_limit_params(lat: &RubyLattice, w: f64) -> Result<JmfParams> {
    if !(w < 0.0) {
        return Err(Error::Parameter(format!("RVB weight must be negative, got {w}")));
    }
    let table = Arc::new(distance_classes(lat));
    let n = lat.n_sites();
    let nc = table.n_classes();
    let mut chi_class: Vec<Option<f64>> = vec![None; nc];
    let mut z = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let shared = lat.site_vertices[i].iter().filter(|v| lat.site_vertices[j].contains(v)).count() as f64;
            z[i] += shared;
            let c = table.class_of(i, j);
            match chi_class[c] {
                None => chi_class[c] = Some(shared),
                Some(x) if x == shared => {}
                Some(_) => return Err(Error::Geometry(format!("vertex sharing is not a function of distance class {c}; the RVB limit is not representable"))),
            }
        }
    }
    let mut p = JmfParams::zeros(table);
    let v: Vec<C64> = chi_class.iter().map(|c| C64::new(0.25 * w * c.unwrap_or(0.0), 0.0)).collect();
    p.set_jastrow(&v);
    for i in 0..n {
        let m = 2.0;
        let h = 0.25 * w * (m - z[i]);
        p.set_log_phi(i, C64::new(h, 0.0), C64::new(-h, 0.0));
    }
    Ok(p)
}

/// Versioned parameter file. Floats are written with round-trip precision,
/// so load after save is bit-exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub family: Family,
    pub n_sites: usize,
    pub n_classes: usize,
    pub time_us: f64,
    pub params: Vec<[f64; 2]>,
}

pub const CHECKPOINT_FORMAT: &str = "ruby-qsl-params";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn of(a: &impl Ansatz, n_classes: usize, time_us: f64) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            family: a.family(),
            n_sites: a.n_sites(),
            n_classes,
            time_us,
            params: a.params().iter().map(|z| [z.re, z.im]).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint {} v{}", c.format, c.version)));
        }
        Ok(c)
    }

    /// Rebuild the ansatz on `lat`, checking the stored shape.
    pub fn restore(&self, lat: &RubyLattice) -> Result<AnyAnsatz> {
        let mut a = AnyAnsatz::zeros(self.family, lat)?;
        let nc = distance_classes(lat).n_classes();
        if a.n_sites() != self.n_sites || nc != self.n_classes || a.n_params() != self.params.len() {
            return Err(Error::Format("checkpoint shape does not match the lattice".into()));
        }
        let p: Vec<C64> = self.params.iter().map(|&[re, im]| C64::new(re, im)).collect();
        a.set_params(&p);
        Ok(a)
    }
}
