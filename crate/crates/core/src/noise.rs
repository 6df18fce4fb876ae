//! Open-system dynamics by quantum trajectories.
//!
//! Per-site jump operators: dephasing `L_z = √κz (|r⟩⟨r| − |g⟩⟨g|)`,
//! scattering `L_+ = √κ+ |r⟩⟨g|` and decay `L_− = √κ− |g⟩⟨r|`. The
//! scattering jump is projected onto the restricted space: it only acts on
//! a ground-state site whose triangle is empty, both in the damping term of
//! the non-Hermitian Hamiltonian and in the set of available jumps.
//!
//! Trajectories use the faster-than-the-clock scheme: evolve the
//! unnormalized state under `H − iΓ`, jump when `‖ψ‖²` falls to a
//! pre-drawn uniform threshold, pick the channel with probability
//! proportional to `⟨L†L⟩`, renormalize and redraw.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ansatz::C64;
use crate::error::{Error, Result};
use crate::exact::{evolve_exact, norm_sqr, normalize, ExactSystem, RestrictedBasis, SparseOperator, Stepper};
use crate::hamiltonian::{DisorderRealization, RydbergModel, RydbergParams, Schedule};
use crate::lattice::RubyLattice;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    /// Angular rates in rad/µs.
    pub kappa_z: f64,
    pub kappa_plus: f64,
    pub kappa_minus: f64,
    /// Relative variances of the per-site Rabi and detuning errors.
    pub var_x: f64,
    pub var_n: f64,
    pub n_trajectories: usize,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { kappa_z: 0.0, kappa_plus: 0.0, kappa_minus: 0.0, var_x: 0.0, var_n: 0.0, n_trajectories: 100 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Channel {
    Dephasing,
    Scattering,
    Decay,
}

impl std::str::FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dephasing" | "z" => Ok(Self::Dephasing),
            "scattering" | "plus" => Ok(Self::Scattering),
            "decay" | "minus" => Ok(Self::Decay),
            _ => Err(Error::Parameter(format!("unknown noise channel '{s}'"))),
        }
    }
}

/// Rate grid of the sweep presets, as lifetimes `2π/κ` in µs.
pub const SWEEP_LIFETIMES_US: [f64; 6] = [1000.0, 300.0, 150.0, 80.0, 40.0, 20.0];

impl NoiseModel {
    /// Named presets: `none`, `paper-exp`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "none" => Ok(Self::default()),
            "paper-exp" => Ok(Self { kappa_z: 0.0, kappa_plus: 2.0 * PI / 150.0, kappa_minus: 2.0 * PI / 80.0, var_x: 0.03, var_n: 0.02, n_trajectories: 100 }),
            _ => Err(Error::Parameter(format!("unknown noise preset '{name}'"))),
        }
    }

    /// `sweep:<channel>`: one model per rate of the grid, only that channel on.
    pub fn sweep(name: &str) -> Result<Vec<Self>> {
        let ch: Channel = name.strip_prefix("sweep:").ok_or_else(|| Error::Parameter(format!("'{name}' is not a sweep preset")))?.parse()?;
        Ok(SWEEP_LIFETIMES_US.iter().map(|&l| Self::default().with_rate(ch, 2.0 * PI / l)).collect())
    }

    pub fn with_rate(mut self, ch: Channel, rate: f64) -> Self {
        match ch {
            Channel::Dephasing => self.kappa_z = rate,
            Channel::Scattering => self.kappa_plus = rate,
            Channel::Decay => self.kappa_minus = rate,
        }
        self
    }

    pub fn rate(&self, ch: Channel) -> f64 {
        match ch {
            Channel::Dephasing => self.kappa_z,
            Channel::Scattering => self.kappa_plus,
            Channel::Decay => self.kappa_minus,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = [self.kappa_z, self.kappa_plus, self.kappa_minus, self.var_x, self.var_n];
        if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Parameter("noise rates and variances must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn has_jumps(&self) -> bool {
        self.kappa_z > 0.0 || self.kappa_plus > 0.0 || self.kappa_minus > 0.0
    }

    pub fn has_disorder(&self) -> bool {
        self.var_x > 0.0 || self.var_n > 0.0
    }
}

/// Per-site occupation and scattering availability of a basis state.
fn site_flags(basis: &RestrictedBasis, idx: usize, n_tri: usize, mut f: impl FnMut(usize, bool, bool)) {
    for t in 0..n_tri {
        let s = basis.local_state(idx, t);
        for k in 0..3 {
            let excited = s == k + 1;
            f(3 * t + k, excited, s == 0);
        }
    }
}

/// `Γ = ½ Σ_j L_j†L_j` on the restricted basis (diagonal).
pub fn damping(basis: &RestrictedBasis, model: &NoiseModel) -> Vec<f64> {
    let nt = basis.n_sites() / 3;
    let n = basis.n_sites() as f64;
    (0..basis.dim())
        .map(|idx| {
            let mut excited = 0usize;
            let mut free = 0usize;
            site_flags(basis, idx, nt, |_, e, f| {
                excited += usize::from(e);
                free += usize::from(f);
            });
            0.5 * (model.kappa_z * n + model.kappa_minus * excited as f64 + model.kappa_plus * free as f64)
        })
        .collect()
}

/// `H_nh = H − iΓ` at fixed fields.
pub fn nh_hamiltonian(h: &SparseOperator, basis: &RestrictedBasis, model: &NoiseModel) -> SparseOperator {
    let d: Vec<C64> = damping(basis, model).into_iter().map(|g| C64::new(0.0, -g)).collect();
    h.add_diagonal(&d)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jump {
    pub time: f64,
    pub site: usize,
    pub channel: Channel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub seed: u64,
    pub jumps: Vec<Jump>,
    /// One row per observation time.
    pub series: Vec<Vec<f64>>,
    /// `∫ Σ_j ⟨L_j†L_j⟩ dt` along the normalized trajectory.
    pub rate_integral: f64,
}

/// `⟨L_j†L_j⟩` for every (site, channel) of a normalized state.
pub fn channel_weights(basis: &RestrictedBasis, model: &NoiseModel, psi: &[C64]) -> Vec<(usize, Channel, f64)> {
    let n = basis.n_sites();
    let nt = n / 3;
    let mut exc = vec![0.0; n];
    let mut free = vec![0.0; n];
    let norm = norm_sqr(psi);
    for (idx, a) in psi.iter().enumerate() {
        let p = a.norm_sqr();
        if p == 0.0 {
            continue;
        }
        site_flags(basis, idx, nt, |s, e, f| {
            if e {
                exc[s] += p;
            }
            if f {
                free[s] += p;
            }
        });
    }
    let mut w = Vec::with_capacity(3 * n);
    for s in 0..n {
        if model.kappa_z > 0.0 {
            w.push((s, Channel::Dephasing, model.kappa_z));
        }
        if model.kappa_plus > 0.0 {
            w.push((s, Channel::Scattering, model.kappa_plus * free[s] / norm));
        }
        if model.kappa_minus > 0.0 {
            w.push((s, Channel::Decay, model.kappa_minus * exc[s] / norm));
        }
    }
    w
}

/// Apply `L_j` (without the rate prefactor) and renormalize.
pub fn apply_jump(basis: &RestrictedBasis, psi: &[C64], site: usize, ch: Channel) -> Result<Vec<C64>> {
    let (t, k) = (site / 3, site % 3);
    let place = basis.place(t);
    let mut out = vec![C64::new(0.0, 0.0); psi.len()];
    for (idx, &a) in psi.iter().enumerate() {
        if a == C64::new(0.0, 0.0) {
            continue;
        }
        let s = basis.local_state(idx, t);
        match ch {
            Channel::Dephasing => out[idx] = if s == k + 1 { a } else { -a },
            Channel::Scattering => {
                if s == 0 {
                    out[idx + (k + 1) * place] = a;
                }
            }
            Channel::Decay => {
                if s == k + 1 {
                    out[idx - (k + 1) * place] = a;
                }
            }
        }
    }
    if norm_sqr(&out) == 0.0 {
        return Err(Error::Numerical(format!("jump {ch:?} on site {site} annihilates the state")));
    }
    normalize(&mut out);
    Ok(out)
}

/// Inputs shared by all trajectories of one noisy run.
pub struct TrajectorySetup<'a> {
    pub lat: &'a RubyLattice,
    pub params: RydbergParams,
    pub schedule: &'a Schedule,
    pub model: NoiseModel,
    pub dt: f64,
    pub obs_times: &'a [f64],
    /// Initial state; the all-ground state when absent.
    pub psi0: Option<&'a [C64]>,
}

/// Relative accuracy of the located jump time in norm.
const JUMP_TOL: f64 = 1e-3;

/// One stochastic trajectory from the all-ground state. With no active
/// jump channel this is exactly the closed evolution.
pub fn run_trajectory(
    setup: &TrajectorySetup,
    disorder: Option<&DisorderRealization>,
    seed: u64,
    observe: &(dyn Fn(&RestrictedBasis, f64, &[C64]) -> Result<Vec<f64>> + Sync),
) -> Result<Trajectory> {
    setup.model.validate()?;
    let model = RydbergModel::new(setup.lat, setup.params, disorder)?;
    let sys = ExactSystem::new(setup.lat, &model, crate::exact::DEFAULT_CAP)?;
    let mut psi = match setup.psi0 {
        Some(p) if p.len() == sys.dim() => p.to_vec(),
        Some(p) => return Err(Error::Parameter(format!("initial state has length {}, basis has {}", p.len(), sys.dim()))),
        None => sys.ground_state_vector(),
    };
    normalize(&mut psi);
    let mut series = Vec::with_capacity(setup.obs_times.len());
    let total = setup.schedule.total();
    if !setup.model.has_jumps() {
        evolve_exact(&sys, &mut psi, setup.schedule, 0.0, total, setup.dt, setup.obs_times, |t, p| {
            series.push(observe(&sys.basis, t, p)?);
            Ok(())
        })?;
        return Ok(Trajectory { seed, jumps: Vec::new(), series, rate_integral: 0.0 });
    }
    let gamma = damping(&sys.basis, &setup.model);
    let mut stepper = Stepper::new(&sys, setup.schedule, Some(&gamma));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut threshold = 1.0 - rng.gen::<f64>();
    let mut jumps = Vec::new();
    let mut t = 0.0;
    let mut next = 0;
    let eps = 1e-12 * total.max(1.0);
    let mut rate_integral = 0.0;
    let total_rate = |psi: &[C64]| channel_weights(&sys.basis, &setup.model, psi).iter().map(|w| w.2).sum::<f64>();
    let mut rate_now = total_rate(&psi);
    let normalized = |psi: &[C64]| {
        let mut v = psi.to_vec();
        normalize(&mut v);
        v
    };
    loop {
        while next < setup.obs_times.len() && setup.obs_times[next] <= t + eps {
            series.push(observe(&sys.basis, setup.obs_times[next], &normalized(&psi))?);
            next += 1;
        }
        if t >= total - eps {
            break;
        }
        let target = setup.obs_times.get(next).copied().unwrap_or(total).min(total);
        let h = setup.dt.min(target - t);
        let saved = psi.clone();
        let n0 = norm_sqr(&psi);
        stepper.step(&mut psi, t, h)?;
        let n1 = norm_sqr(&psi);
        if n1 > n0 * (1.0 + 1e-8) {
            return Err(Error::Numerical(format!("norm grew under damping at t = {t:.4}; reduce dt")));
        }
        if n1 > threshold {
            let rate_next = total_rate(&psi);
            rate_integral += 0.5 * h * (rate_now + rate_next);
            rate_now = rate_next;
            t = if (target - t - h).abs() <= eps { target } else { t + h };
            continue;
        }
        // Bisect the step length until the norm sits on the threshold.
        let (mut lo, mut hi) = (0.0, h);
        let mut hit = psi.clone();
        let mut tau = h;
        for _ in 0..60 {
            let n_hit = norm_sqr(&hit);
            if (n_hit - threshold).abs() <= JUMP_TOL * threshold || hi - lo < 1e-12 {
                break;
            }
            tau = 0.5 * (lo + hi);
            hit.copy_from_slice(&saved);
            if tau > 0.0 {
                stepper.step(&mut hit, t, tau)?;
            }
            if norm_sqr(&hit) > threshold {
                lo = tau;
            } else {
                hi = tau;
            }
        }
        let tj = t + tau;
        let before = normalized(&hit);
        let rate_j = total_rate(&before);
        rate_integral += 0.5 * tau * (rate_now + rate_j);
        let w = channel_weights(&sys.basis, &setup.model, &before);
        let sum: f64 = w.iter().map(|x| x.2).sum();
        if !(sum > 0.0) {
            return Err(Error::Numerical(format!("all jump weights vanish at t = {tj:.4}")));
        }
        let mut r = rng.gen::<f64>() * sum;
        let mut chosen = w[w.len() - 1];
        for x in &w {
            if r < x.2 {
                chosen = *x;
                break;
            }
            r -= x.2;
        }
        psi = apply_jump(&sys.basis, &before, chosen.0, chosen.1)?;
        rate_now = total_rate(&psi);
        jumps.push(Jump { time: tj, site: chosen.0, channel: chosen.1 });
        threshold = 1.0 - rng.gen::<f64>();
        t = tj;
    }
    Ok(Trajectory { seed, jumps, series, rate_integral })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisySeries {
    pub times: Vec<f64>,
    pub mean: Vec<Vec<f64>>,
    /// Standard error of the trajectory average.
    pub stderr: Vec<Vec<f64>>,
    pub trajectories: Vec<Trajectory>,
}

/// Seed of trajectory `k`; the disorder draw uses a separate derived seed.
pub fn trajectory_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64)
}

/// Trajectory average with one disorder realization per trajectory.
pub fn noisy_observables(
    setup: &TrajectorySetup,
    seed: u64,
    observe: &(dyn Fn(&RestrictedBasis, f64, &[C64]) -> Result<Vec<f64>> + Sync),
) -> Result<NoisySeries> {
    let m = &setup.model;
    m.validate()?;
    if m.n_trajectories == 0 {
        return Err(Error::Parameter("need at least one trajectory".into()));
    }
    let n = setup.lat.n_sites();
    let trajs: Vec<Trajectory> = (0..m.n_trajectories)
        .into_par_iter()
        .map(|k| {
            let s = trajectory_seed(seed, k);
            let dis = if m.has_disorder() { Some(DisorderRealization::sample(n, m.var_x, m.var_n, s ^ 0xD15C_0DE5)?) } else { None };
            run_trajectory(setup, dis.as_ref(), s, observe)
        })
        .collect::<Result<_>>()?;
    let nt = setup.obs_times.len();
    let no = trajs[0].series.first().map_or(0, |r| r.len());
    let mut mean = vec![vec![0.0; no]; nt];
    let mut stderr = vec![vec![0.0; no]; nt];
    let k = trajs.len() as f64;
    for i in 0..nt {
        for j in 0..no {
            let xs: Vec<f64> = trajs.iter().map(|tr| tr.series[i][j]).collect();
            let mu = xs.iter().sum::<f64>() / k;
            mean[i][j] = mu;
            stderr[i][j] = if k > 1.0 { (xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt() } else { 0.0 };
        }
    }
    Ok(NoisySeries { times: setup.obs_times.to_vec(), mean, stderr, trajectories: trajs })
}

/// `∫₀ᵀ Tr(ρ Σ_j L_j†L_j) dt` from the master equation, by RK4 on the
/// density matrix. Only for small bases.
pub fn master_equation_rate_integral(sys: &ExactSystem, schedule: &Schedule, model: &NoiseModel, dt: f64) -> Result<f64> {
    let basis = &sys.basis;
    let dim = basis.dim();
    if dim > 1024 {
        return Err(Error::TooLarge { dim, cap: 1024 });
    }
    let gamma = damping(basis, model);
    // Jump maps: (rate, image of each basis state or none, sign).
    let n = basis.n_sites();
    let mut maps: Vec<(f64, Vec<Option<(usize, f64)>>)> = Vec::new();
    for s in 0..n {
        let (t, k) = (s / 3, s % 3);
        let place = basis.place(t);
        let img = |f: &dyn Fn(usize, usize) -> Option<(usize, f64)>| (0..dim).map(|i| f(i, basis.local_state(i, t))).collect::<Vec<_>>();
        if model.kappa_z > 0.0 {
            maps.push((model.kappa_z, img(&|i, l| Some((i, if l == k + 1 { 1.0 } else { -1.0 })))));
        }
        if model.kappa_plus > 0.0 {
            maps.push((model.kappa_plus, img(&|i, l| (l == 0).then(|| (i + (k + 1) * place, 1.0)))));
        }
        if model.kappa_minus > 0.0 {
            maps.push((model.kappa_minus, img(&|i, l| (l == k + 1).then(|| (i - (k + 1) * place, 1.0)))));
        }
    }
    let deriv = |t: f64, rho: &[C64], out: &mut [C64]| -> Result<()> {
        let (omega, delta) = schedule.eval(t.min(schedule.total()))?;
        let h = sys.hamiltonian(omega, delta);
        let hn = h.add_diagonal(&gamma.iter().map(|g| C64::new(0.0, -g)).collect::<Vec<_>>());
        // out = −i (Hn ρ − ρ Hn†) + Σ L ρ L†
        let mut col = vec![C64::new(0.0, 0.0); dim];
        let mut hcol = vec![C64::new(0.0, 0.0); dim];
        let mut hr = vec![C64::new(0.0, 0.0); dim * dim];
        for j in 0..dim {
            for i in 0..dim {
                col[i] = rho[i * dim + j];
            }
            hn.apply(&col, &mut hcol);
            for i in 0..dim {
                hr[i * dim + j] = hcol[i];
            }
        }
        for i in 0..dim {
            for j in 0..dim {
                // (ρ Hn†)_ij = conj((Hn ρ†)_ji) = conj((Hn ρ)_ji) since ρ is Hermitian.
                out[i * dim + j] = C64::new(0.0, -1.0) * (hr[i * dim + j] - hr[j * dim + i].conj());
            }
        }
        for (rate, img) in &maps {
            for a in 0..dim {
                let Some((ia, sa)) = img[a] else { continue };
                for b in 0..dim {
                    let Some((ib, sb)) = img[b] else { continue };
                    out[ia * dim + ib] += rho[a * dim + b] * (rate * sa * sb);
                }
            }
        }
        Ok(())
    };
    let rate = |rho: &[C64]| (0..dim).map(|i| 2.0 * gamma[i] * rho[i * dim + i].re).sum::<f64>();
    let mut rho = vec![C64::new(0.0, 0.0); dim * dim];
    rho[0] = C64::new(1.0, 0.0);
    let total = schedule.total();
    let steps = ((total / dt) - 1e-9).ceil().max(1.0) as usize;
    let h = total / steps as f64;
    let mut k1 = vec![C64::new(0.0, 0.0); dim * dim];
    let mut k2 = k1.clone();
    let mut k3 = k1.clone();
    let mut k4 = k1.clone();
    let mut tmp = k1.clone();
    let mut integral = 0.0;
    let mut r_prev = rate(&rho);
    for s in 0..steps {
        let t = s as f64 * h;
        deriv(t, &rho, &mut k1)?;
        for i in 0..rho.len() {
            tmp[i] = rho[i] + k1[i] * (0.5 * h);
        }
        deriv(t + 0.5 * h, &tmp, &mut k2)?;
        for i in 0..rho.len() {
            tmp[i] = rho[i] + k2[i] * (0.5 * h);
        }
        deriv(t + 0.5 * h, &tmp, &mut k3)?;
        for i in 0..rho.len() {
            tmp[i] = rho[i] + k3[i] * h;
        }
        deriv(t + h, &tmp, &mut k4)?;
        for i in 0..rho.len() {
            rho[i] += (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (h / 6.0);
        }
        let r = rate(&rho);
        integral += 0.5 * h * (r_prev + r);
        r_prev = r;
    }
    Ok(integral)
}
