//! Time-dependent variational principle.
//!
//! `θ̇ = −i pinv(S + ε diag S) C` with the geometric tensor
//! `S_kl = E[D_k* (D_l − E[D_l])]` and the forces
//! `C_k = E[D_k* (E_loc − E[E_loc])]`. The expectations come either from
//! Markov-chain samples or from a full sum over the restricted basis. Every
//! ansatz here is log-linear with real features, so `D = F` is real and
//! `S` is a real symmetric matrix.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ansatz::{Ansatz, JmfParams, C64};
use crate::error::{Error, Result};
use crate::exact::{ExactSystem, FullSum};
use crate::hamiltonian::{DisorderRealization, RydbergModel, RydbergParams, Schedule};
use crate::lattice::RubyLattice;
use crate::linalg::{complexify, pinv_solve, Regularization, SolveInfo};
use crate::sampler::{blocks, estimate_values, Estimate, SampleSet, Sampler};

#[derive(Clone, Debug)]
pub struct Qgt {
    pub s: DMatrix<f64>,
}

impl Qgt {
    pub fn complex(&self) -> DMatrix<C64> {
        complexify(&self.s)
    }

    pub fn hermiticity_error(&self) -> f64 {
        (&self.s - self.s.transpose()).amax()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.s.clone().symmetric_eigen().eigenvalues.min()
    }
}

#[derive(Clone, Debug)]
pub struct Forces {
    pub c: DVector<C64>,
}

/// Estimated TDVP moments with per-entry standard errors (sampled case).
#[derive(Clone, Debug)]
pub struct Moments {
    pub qgt: Qgt,
    pub forces: Forces,
    pub energy: Estimate,
    pub s_err: DMatrix<f64>,
    pub c_err: DVector<f64>,
}

fn symmetrize(s: &mut DMatrix<f64>) {
    let t = s.transpose();
    *s += t;
    *s *= 0.5;
}

/// Feature matrix of a sample set, one column per sample.
pub fn sample_features(a: &impl Ansatz, set: &SampleSet) -> DMatrix<f64> {
    let np = a.n_params();
    let mut data = vec![0.0; np * set.len()];
    data.par_chunks_mut(np.max(1)).enumerate().for_each(|(k, col)| a.features(set.sample(k), col));
    DMatrix::from_vec(np, set.len(), data)
}

pub fn local_energies(a: &impl Ansatz, model: &RydbergModel, set: &SampleSet, omega: f64, delta: f64) -> Result<Vec<C64>> {
    (0..set.len()).into_par_iter().map(|k| model.local_energy(a, set.sample(k), omega, delta)).collect()
}

/// `S` and `C` from samples. `f` holds one column of features per sample,
/// laid out chain-major in `n_chains` equal chains.
///
/// Centering on the sample means biases both moments by `−Cov(Ō_i, Ō_j)`,
/// which is of order `τ/M` and dominates entries much smaller than the
/// feature variances. The covariance of the means is estimated from block
/// means and added back.
pub fn estimate_qgt_forces(f: &DMatrix<f64>, eloc: &[C64], n_chains: usize) -> (Qgt, Forces, C64) {
    let m = f.ncols() as f64;
    let mean = f.column_mean();
    let mut fc = f.clone();
    for mut col in fc.column_iter_mut() {
        col -= &mean;
    }
    let mut s = &fc * fc.transpose() / m;
    let e: C64 = eloc.iter().sum::<C64>() / m;
    let re = DVector::from_iterator(eloc.len(), eloc.iter().map(|z| z.re - e.re));
    let im = DVector::from_iterator(eloc.len(), eloc.iter().map(|z| z.im - e.im));
    let mut cr = &fc * &re / m;
    let mut ci = &fc * &im / m;
    let ranges = blocks(f.ncols(), n_chains);
    let nb = ranges.len();
    if nb > 1 {
        let mut bf = DMatrix::<f64>::zeros(f.nrows(), nb);
        let mut br = DVector::<f64>::zeros(nb);
        let mut bi = DVector::<f64>::zeros(nb);
        for (b, r) in ranges.iter().enumerate() {
            let len = r.len() as f64;
            bf.set_column(b, &(fc.columns(r.start, r.len()).column_sum() / len));
            br[b] = re.rows(r.start, r.len()).sum() / len;
            bi[b] = im.rows(r.start, r.len()).sum() / len;
        }
        let w = 1.0 / (nb * (nb - 1)) as f64;
        s += &bf * bf.transpose() * w;
        cr += &bf * br * w;
        ci += &bf * bi * w;
    }
    symmetrize(&mut s);
    let c = DVector::from_iterator(cr.len(), cr.iter().zip(ci.iter()).map(|(&x, &y)| C64::new(x, y)));
    (Qgt { s }, Forces { c }, e)
}

/// Sampled moments plus blocking errors for every entry of `S` and `C`.
pub fn sampled_moments(a: &impl Ansatz, model: &RydbergModel, set: &SampleSet, omega: f64, delta: f64) -> Result<Moments> {
    let f = sample_features(a, set);
    let eloc = local_energies(a, model, set, omega, delta)?;
    let (qgt, forces, _) = estimate_qgt_forces(&f, &eloc, set.n_chains);
    let energy = estimate_values(&eloc, set.n_chains)?;
    let np = f.nrows();
    let m = f.ncols();
    let mean = f.column_mean();
    let mut s_err = DMatrix::<f64>::zeros(np, np);
    let mut c_err = DVector::<f64>::zeros(np);
    let mut buf = vec![C64::new(0.0, 0.0); m];
    for i in 0..np {
        for j in i..np {
            for k in 0..m {
                buf[k] = C64::new((f[(i, k)] - mean[i]) * (f[(j, k)] - mean[j]), 0.0);
            }
            let e = estimate_values(&buf, set.n_chains)?.stderr;
            s_err[(i, j)] = e;
            s_err[(j, i)] = e;
        }
        for k in 0..m {
            buf[k] = (eloc[k] - energy.mean) * (f[(i, k)] - mean[i]);
        }
        c_err[i] = estimate_values(&buf, set.n_chains)?.stderr;
    }
    Ok(Moments { qgt, forces, energy, s_err, c_err })
}

/// Exact `S`, `C` and `⟨H⟩` of `θ` by summation over the restricted basis.
pub fn full_sum_moments(full: &FullSum, sys: &ExactSystem, theta: &[C64], omega: f64, delta: f64) -> (Qgt, Forces, f64) {
    let psi = full.state(theta);
    let mut hpsi = vec![C64::new(0.0, 0.0); psi.len()];
    sys.apply(omega, delta, 0.0, None, &psi, &mut hpsi);
    let p: Vec<f64> = psi.iter().map(|z| z.norm_sqr()).collect();
    let mut s = full.covariance(&p);
    symmetrize(&mut s);
    let w: Vec<C64> = psi.iter().zip(&hpsi).map(|(a, b)| a.conj() * b).collect();
    let e: C64 = w.iter().sum();
    let c = full.cross_moment(&p, &w);
    (Qgt { s }, Forces { c }, e.re)
}

/// `θ̇ = −i pinv(S + ε diag S) C`.
pub fn solve_update(qgt: &Qgt, forces: &Forces, reg: Regularization) -> Result<(DVector<C64>, SolveInfo)> {
    let (x, info) = pinv_solve(&qgt.complex(), &forces.c, reg)?;
    let dot = x * C64::new(0.0, -1.0);
    if !dot.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        return Err(Error::Numerical("non-finite parameter derivative".into()));
    }
    Ok((dot, info))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StepInfo {
    pub energy: f64,
    pub energy_stderr: f64,
    pub rank: usize,
    pub lambda_max: f64,
    pub acceptance: f64,
}

/// Right-hand side of the parameter equation of motion.
pub trait Rhs<A: Ansatz> {
    fn theta_dot(&mut self, a: &A, t: f64) -> Result<(DVector<C64>, StepInfo)>;
}

pub struct FullSumRhs<'a> {
    pub full: &'a FullSum,
    pub sys: &'a ExactSystem,
    pub schedule: &'a Schedule,
    pub reg: Regularization,
}

impl<A: Ansatz> Rhs<A> for FullSumRhs<'_> {
    fn theta_dot(&mut self, a: &A, t: f64) -> Result<(DVector<C64>, StepInfo)> {
        let (omega, delta) = self.schedule.eval(t)?;
        let (qgt, forces, e) = full_sum_moments(self.full, self.sys, a.params(), omega, delta);
        let (dot, info) = solve_update(&qgt, &forces, self.reg)?;
        Ok((dot, StepInfo { energy: e, energy_stderr: 0.0, rank: info.rank, lambda_max: info.lambda_max, acceptance: 1.0 }))
    }
}

pub struct SampledRhs<'a> {
    pub sampler: Sampler,
    pub model: &'a RydbergModel,
    pub schedule: &'a Schedule,
    pub reg: Regularization,
    /// Sweeps discarded at every evaluation before samples are kept.
    pub burnin: usize,
}

impl<A: Ansatz> Rhs<A> for SampledRhs<'_> {
    fn theta_dot(&mut self, a: &A, t: f64) -> Result<(DVector<C64>, StepInfo)> {
        let (omega, delta) = self.schedule.eval(t)?;
        let set = self.sampler.run(a, self.burnin)?;
        let f = sample_features(a, &set);
        let eloc = local_energies(a, self.model, &set, omega, delta)?;
        let (qgt, forces, _) = estimate_qgt_forces(&f, &eloc, set.n_chains);
        let e = estimate_values(&eloc, set.n_chains)?;
        let (dot, info) = solve_update(&qgt, &forces, self.reg)?;
        Ok((dot, StepInfo { energy: e.mean.re, energy_stderr: e.stderr, rank: info.rank, lambda_max: info.lambda_max, acceptance: set.acceptance }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    Heun,
    Rk4,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    /// Time step in µs.
    pub dt: f64,
    pub method: Integrator,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self { dt: 1e-3, method: Integrator::Heun }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct IntegrateReport {
    pub steps: usize,
    pub last: StepInfo,
}

fn axpy(theta: &[C64], d: &DVector<C64>, h: f64) -> Vec<C64> {
    theta.iter().zip(d.iter()).map(|(t, x)| t + x * h).collect()
}

/// Breakpoints between `t0` and `t1`: observation times inside the window, then `t1`.
fn segments(t0: f64, t1: f64, obs: &[f64]) -> Vec<f64> {
    let eps = 1e-12 * t1.abs().max(1.0);
    let mut b: Vec<f64> = obs.iter().copied().filter(|&t| t > t0 + eps && t < t1 - eps).collect();
    b.sort_by(f64::total_cmp);
    b.dedup();
    b.push(t1);
    b
}

/// Integrate `θ` from `t0` to `t1` in fixed steps of at most `dt`, with the
/// step shortened to land on each observation time. `observe` is called at
/// `t0` (if listed) and at every listed time inside `(t0, t1]`.
pub fn integrate<A: Ansatz, R: Rhs<A>>(
    a: &mut A,
    rhs: &mut R,
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
    obs: &[f64],
    mut observe: impl FnMut(f64, &A, &StepInfo) -> Result<()>,
) -> Result<IntegrateReport> {
    if !(cfg.dt > 0.0) || !(t1 >= t0) {
        return Err(Error::Parameter("integration needs dt > 0 and t1 ≥ t0".into()));
    }
    let mut report = IntegrateReport::default();
    let eps = 1e-12 * t1.abs().max(1.0);
    if obs.iter().any(|&t| (t - t0).abs() <= eps) {
        let (_, info) = rhs.theta_dot(a, t0)?;
        observe(t0, a, &info)?;
    }
    let mut t = t0;
    for stop in segments(t0, t1, obs) {
        let n = (((stop - t) / cfg.dt) - 1e-9).ceil().max(1.0) as usize;
        let h = (stop - t) / n as f64;
        for s in 0..n {
            let ts = t + s as f64 * h;
            let theta = a.params().to_vec();
            let (k1, info) = rhs.theta_dot(a, ts)?;
            let next = match cfg.method {
                Integrator::Heun => {
                    a.set_params(&axpy(&theta, &k1, h));
                    let (k2, _) = rhs.theta_dot(a, ts + h)?;
                    axpy(&theta, &((k1 + k2) * C64::new(0.5, 0.0)), h)
                }
                Integrator::Rk4 => {
                    a.set_params(&axpy(&theta, &k1, 0.5 * h));
                    let (k2, _) = rhs.theta_dot(a, ts + 0.5 * h)?;
                    a.set_params(&axpy(&theta, &k2, 0.5 * h));
                    let (k3, _) = rhs.theta_dot(a, ts + 0.5 * h)?;
                    a.set_params(&axpy(&theta, &k3, h));
                    let (k4, _) = rhs.theta_dot(a, ts + h)?;
                    let sum = k1 + k2 * C64::new(2.0, 0.0) + k3 * C64::new(2.0, 0.0) + k4;
                    axpy(&theta, &sum, h / 6.0)
                }
            };
            if !next.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
                return Err(Error::Numerical(format!("non-finite parameters at t = {ts}")));
            }
            a.set_params(&next);
            report.steps += 1;
            report.last = info;
        }
        t = stop;
        if obs.iter().any(|&o| (o - stop).abs() <= eps) {
            let (_, info) = rhs.theta_dot(a, stop)?;
            observe(stop, a, &info)?;
        }
    }
    Ok(report)
}

/// Handoff time of the mean-field stage, as a fraction of `T`.
pub const T_STAR_FRACTION: f64 = 2.0 / 25.0;
/// Floor applied to mean-field log-amplitudes at the handoff.
pub const LOG_FLOOR: f64 = -40.0;

/// Per-site product state `⊗(α_i|g⟩ + β_i|r⟩)` with real `α_i > 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfState {
    pub alpha: Vec<f64>,
    pub beta: Vec<C64>,
}

impl MfState {
    pub fn ground(n: usize) -> Self {
        Self { alpha: vec![1.0; n], beta: vec![C64::new(0.0, 0.0); n] }
    }

    pub fn max_norm_error(&self) -> f64 {
        self.alpha.iter().zip(&self.beta).map(|(a, b)| (a * a + b.norm_sqr() - 1.0).abs()).fold(0.0, f64::max)
    }

    /// JMF parameters with zero Jastrow; log-amplitudes are clamped at `floor`.
    pub fn to_jmf(&self, lat: &RubyLattice, floor: f64) -> JmfParams {
        let mut p = JmfParams::for_lattice(lat);
        for i in 0..self.alpha.len() {
            let up = C64::new(self.alpha[i].ln().max(floor), 0.0);
            let b = self.beta[i];
            let down = if b.norm() > 0.0 { C64::new(b.norm().ln().max(floor), b.arg()) } else { C64::new(floor, 0.0) };
            p.set_log_phi(i, up, down);
        }
        p
    }
}

/// Closed-form mean-field equations of motion of a product state under the
/// full Rydberg Hamiltonian, every pair interacting:
/// `β̇ = −i v β − i(Ω/2)(β β^R/α − α)`, `α̇ = −(Ω/2) β^I`,
/// `v_k = −Δ_k + Σ_{l≠k} V(r_kl)|β_l|²`.
pub struct MeanField {
    n: usize,
    v: Vec<f64>,
    omega_w: Vec<f64>,
    delta_w: Vec<f64>,
}

impl MeanField {
    pub fn new(lat: &RubyLattice, params: &RydbergParams, disorder: Option<&DisorderRealization>) -> Result<Self> {
        let n = lat.n_sites();
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let r = lat.distance(i, j);
                    if params.cutoff.map_or(true, |c| r <= c) {
                        v[i * n + j] = params.potential(r)?;
                    }
                }
            }
        }
        let (omega_w, delta_w) = match disorder {
            Some(d) if d.omega.len() == n && d.delta.len() == n => (d.omega.iter().map(|x| 1.0 + x).collect(), d.delta.iter().map(|x| 1.0 + x).collect()),
            Some(_) => return Err(Error::Parameter("disorder size does not match the lattice".into())),
            None => (vec![1.0; n], vec![1.0; n]),
        };
        Ok(Self { n, v, omega_w, delta_w })
    }

    /// Time derivatives `(α̇, β̇)` at fields `(Ω, Δ)`.
    pub fn derivative(&self, s: &MfState, omega: f64, delta: f64) -> Result<(Vec<f64>, Vec<C64>)> {
        let n = self.n;
        let pop: Vec<f64> = s.beta.iter().map(|b| b.norm_sqr()).collect();
        let mut da = vec![0.0; n];
        let mut db = vec![C64::new(0.0, 0.0); n];
        for k in 0..n {
            let a = s.alpha[k];
            if !(a > 0.0) {
                return Err(Error::Numerical(format!("mean-field amplitude α vanished at site {k}")));
            }
            let row = &self.v[k * n..(k + 1) * n];
            let vk = -delta * self.delta_w[k] + row.iter().zip(&pop).map(|(v, p)| v * p).sum::<f64>();
            let om = omega * self.omega_w[k];
            let b = s.beta[k];
            db[k] = C64::new(0.0, -vk) * b + C64::new(0.0, -0.5 * om) * (b * (b.re / a) - a);
            da[k] = -0.5 * om * b.im;
        }
        Ok((da, db))
    }

    /// One RK4 step followed by per-site renormalization.
    pub fn step(&self, s: &mut MfState, schedule: &Schedule, t: f64, h: f64) -> Result<()> {
        let eval = |t: f64| schedule.eval(t.min(schedule.total()));
        let shifted = |s: &MfState, da: &[f64], db: &[C64], c: f64| MfState {
            alpha: s.alpha.iter().zip(da).map(|(a, d)| a + c * d).collect(),
            beta: s.beta.iter().zip(db).map(|(b, d)| b + d * c).collect(),
        };
        let (o1, d1) = eval(t)?;
        let (o2, d2) = eval(t + 0.5 * h)?;
        let (o4, d4) = eval(t + h)?;
        let k1 = self.derivative(s, o1, d1)?;
        let k2 = self.derivative(&shifted(s, &k1.0, &k1.1, 0.5 * h), o2, d2)?;
        let k3 = self.derivative(&shifted(s, &k2.0, &k2.1, 0.5 * h), o2, d2)?;
        let k4 = self.derivative(&shifted(s, &k3.0, &k3.1, h), o4, d4)?;
        for i in 0..self.n {
            s.alpha[i] += h / 6.0 * (k1.0[i] + 2.0 * k2.0[i] + 2.0 * k3.0[i] + k4.0[i]);
            s.beta[i] += (k1.1[i] + k2.1[i] * 2.0 + k3.1[i] * 2.0 + k4.1[i]) * (h / 6.0);
            let norm = (s.alpha[i] * s.alpha[i] + s.beta[i].norm_sqr()).sqrt();
            s.alpha[i] /= norm;
            s.beta[i] /= norm;
            if !(s.alpha[i] > 0.0) {
                return Err(Error::Numerical(format!("mean-field amplitude α vanished at site {i}")));
            }
        }
        Ok(())
    }
}

/// Integrate the mean-field stage from the all-ground state up to `t_star`.
/// `observe` sees the state at `t = 0` and after every step.
pub fn mf_bootstrap(mf: &MeanField, schedule: &Schedule, t_star: f64, dt: f64, mut observe: impl FnMut(f64, &MfState) -> Result<()>) -> Result<MfState> {
    if !(dt > 0.0) || !(0.0..=schedule.total()).contains(&t_star) {
        return Err(Error::Parameter("mean-field stage needs dt > 0 and 0 ≤ t* ≤ T".into()));
    }
    let mut s = MfState::ground(mf.n);
    observe(0.0, &s)?;
    let n = ((t_star / dt) - 1e-9).ceil().max(0.0) as usize;
    let h = if n > 0 { t_star / n as f64 } else { 0.0 };
    for k in 0..n {
        let t = k as f64 * h;
        mf.step(&mut s, schedule, t, h)?;
        observe(t + h, &s)?;
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{RestrictedBasis, DEFAULT_CAP};
    use crate::hamiltonian::mhz;
    use crate::lattice::{build_lattice, LatticeSpec};
    use crate::sampler::SamplerConfig;

    fn setup() -> (RubyLattice, RydbergModel) {
        let lat = build_lattice(&LatticeSpec::preset("torus-12").unwrap()).unwrap();
        let model = RydbergModel::new(&lat, RydbergParams::default(), None).unwrap();
        (lat, model)
    }

    fn random_jmf(lat: &RubyLattice, seed: u64) -> JmfParams {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut a = JmfParams::for_lattice(lat);
        let p: Vec<C64> = a.params().iter().map(|_| C64::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3))).collect();
        a.set_params(&p);
        a
    }

    #[test]
    fn identity_solve_gives_minus_i_c() {
        let qgt = Qgt { s: DMatrix::identity(3, 3) };
        let c = DVector::from_vec(vec![C64::new(1.0, 0.5), C64::new(-2.0, 0.0), C64::new(0.0, 1.0)]);
        let reg = Regularization { diag_shift: 0.0, pinv_cutoff: 1e-8 };
        let (dot, _) = solve_update(&qgt, &Forces { c: c.clone() }, reg).unwrap();
        assert!((dot - c * C64::new(0.0, -1.0)).norm() < 1e-14);
    }

    #[test]
    fn product_state_qgt_is_site_block_diagonal() {
        let (lat, _) = setup();
        let mut a = random_jmf(&lat, 1);
        a.set_jastrow(&vec![C64::new(0.0, 0.0); a.n_classes()]);
        let basis = RestrictedBasis::new(&lat, DEFAULT_CAP).unwrap();
        let full = FullSum::new(basis, &a);
        let psi = full.state(a.params());
        let p: Vec<f64> = psi.iter().map(|z| z.norm_sqr()).collect();
        let s = crate::linalg::weighted_covariance(&full.features, &p);
        assert!((&s - full.covariance(&p)).amax() < 1e-12);
        // Restricted space couples sites of one triangle; distinct triangles decouple.
        for i in 0..24 {
            for j in 0..24 {
                if lat.triangle_of(i / 2) != lat.triangle_of(j / 2) {
                    assert!(s[(i, j)].abs() < 1e-12, "({i},{j}) = {}", s[(i, j)]);
                }
            }
        }
    }

    #[test]
    fn full_sum_energy_matches_exact_expectation() {
        let (lat, model) = setup();
        let a = random_jmf(&lat, 2);
        let basis = RestrictedBasis::new(&lat, DEFAULT_CAP).unwrap();
        let sys = ExactSystem::new(&lat, &model, DEFAULT_CAP).unwrap();
        let full = FullSum::new(basis.clone(), &a);
        let psi = full.state(a.params());
        let (om, de) = (mhz(1.4), mhz(2.0));
        let (_, _, e) = full_sum_moments(&full, &sys, a.params(), om, de);
        let mut num = C64::new(0.0, 0.0);
        for i in 0..basis.dim() {
            let s = basis.spins(i);
            num += psi[i].norm_sqr() * model.local_energy(&a, &s, om, de).unwrap();
        }
        assert!((num.re - e).abs() < 1e-10 * e.abs().max(1.0));
        assert!(num.im.abs() < 1e-10);
    }

    #[test]
    fn sampled_moments_track_full_sum() {
        let (lat, model) = setup();
        let a = random_jmf(&lat, 3);
        let basis = RestrictedBasis::new(&lat, DEFAULT_CAP).unwrap();
        let sys = ExactSystem::new(&lat, &model, DEFAULT_CAP).unwrap();
        let full = FullSum::new(basis, &a);
        let (om, de) = (mhz(1.4), mhz(1.0));
        let (s0, c0, _) = full_sum_moments(&full, &sys, a.params(), om, de);
        let cfg = SamplerConfig { n_chains: 8, n_samples: 2000, seed: 11, ..Default::default() };
        let set = Sampler::new(&lat, cfg).unwrap().run(&a, 100).unwrap();
        let m = sampled_moments(&a, &model, &set, om, de).unwrap();
        let mut bad = 0;
        let mut total = 0;
        for i in 0..s0.s.nrows() {
            for j in 0..s0.s.ncols() {
                total += 1;
                if (m.qgt.s[(i, j)] - s0.s[(i, j)]).abs() > 4.0 * m.s_err[(i, j)] + 1e-12 {
                    bad += 1;
                }
            }
        }
        assert!(bad * 50 < total, "{bad}/{total}");
        let bad_c = (0..c0.c.len()).filter(|&k| (m.forces.c[k] - c0.c[k]).norm() > 5.0 * m.c_err[k] + 1e-12).count();
        assert!(bad_c * 10 < c0.c.len());
    }

    #[test]
    fn single_atom_matches_rabi_formula() {
        let lat = build_lattice(&LatticeSpec::preset("triangle-3").unwrap()).unwrap();
        // Far-apart interactions vanish with a zero cutoff.
        let params = RydbergParams { cutoff: Some(0.0), ..Default::default() };
        let mf = MeanField::new(&lat, &params, None).unwrap();
        let (om, de) = (mhz(1.4), mhz(-0.7));
        let sched = Schedule::Constant { total_us: 1.0, omega: om, delta: de };
        let mut worst: f64 = 0.0;
        mf_bootstrap(&mf, &sched, 1.0, 2e-4, |t, s| {
            let w = (om * om + de * de).sqrt();
            let exact = (om / w).powi(2) * (0.5 * w * t).sin().powi(2);
            worst = worst.max((s.beta[0].norm_sqr() - exact).abs());
            Ok(())
        })
        .unwrap();
        assert!(worst < 1e-8, "{worst}");
    }

    #[test]
    fn zero_drive_only_rotates_phases() {
        let (lat, _) = setup();
        let mf = MeanField::new(&lat, &RydbergParams::default(), None).unwrap();
        let mut s = MfState::ground(12);
        for b in s.beta.iter_mut() {
            *b = C64::new(0.3, 0.1);
        }
        let norm = (1.0f64 - 0.1).sqrt();
        s.alpha = vec![norm; 12];
        let before = s.clone();
        let sched = Schedule::Constant { total_us: 1.0, omega: 0.0, delta: mhz(1.0) };
        mf.step(&mut s, &sched, 0.0, 1e-5).unwrap();
        for i in 0..12 {
            assert!((s.beta[i].norm() - before.beta[i].norm()).abs() < 1e-12);
            assert!((s.alpha[i] - before.alpha[i]).abs() < 1e-12);
        }
        assert!(s.max_norm_error() < 1e-12);
    }

    #[test]
    fn integrate_lands_on_observation_times() {
        struct Linear;
        impl Rhs<JmfParams> for Linear {
            fn theta_dot(&mut self, a: &JmfParams, _t: f64) -> Result<(DVector<C64>, StepInfo)> {
                Ok((DVector::from_iterator(a.n_params(), a.params().iter().map(|z| z * C64::new(0.0, -1.0))), StepInfo::default()))
            }
        }
        let (lat, _) = setup();
        let mut a = JmfParams::for_lattice(&lat);
        let mut p = a.params().to_vec();
        p[0] = C64::new(1.0, 0.0);
        a.set_params(&p);
        let mut seen = Vec::new();
        let cfg = IntegratorConfig { dt: 0.01, method: Integrator::Rk4 };
        integrate(&mut a, &mut Linear, 0.0, 1.0, &cfg, &[0.0, 0.333, 1.0], |t, a, _| {
            seen.push((t, a.params()[0]));
            Ok(())
        })
        .unwrap();
        assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), vec![0.0, 0.333, 1.0]);
        let exact = C64::new(0.0, -1.0).exp();
        assert!((seen[2].1 - exact).norm() < 1e-9);
    }
}
