//! State-vector oracle in the restricted space.
//!
//! Basis states are indexed by `Σ_t s_t 4^(T−1−t)` with `s_t = 0` for an
//! empty triangle and `s_t = k + 1` when site `3t + k` is excited, which is
//! lexicographic order in the triangle-local states.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ansatz::{Ansatz, C64};
use crate::error::{Error, Result};
use crate::hamiltonian::{RydbergModel, Schedule};
use crate::lattice::RubyLattice;
use crate::linalg::{complexify, pinv_solve, weighted_covariance, Regularization};
use crate::state::Configuration;

/// Default exact-size cap: 4⁸ basis states.
pub const DEFAULT_CAP: usize = 65_536;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RestrictedBasis {
    n_tri: usize,
    dim: usize,
}

impl RestrictedBasis {
    pub fn new(lat: &RubyLattice, cap: usize) -> Result<Self> {
        let n_tri = lat.n_triangles();
        let dim = 4usize.checked_pow(n_tri as u32).filter(|&d| d <= cap);
        match dim {
            Some(dim) => Ok(Self { n_tri, dim }),
            None => Err(Error::TooLarge { dim: 4usize.saturating_pow(n_tri as u32), cap }),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_sites(&self) -> usize {
        3 * self.n_tri
    }

    #[inline]
    pub fn place(&self, t: usize) -> usize {
        1 << (2 * (self.n_tri - 1 - t))
    }

    #[inline]
    pub fn local_state(&self, idx: usize, t: usize) -> usize {
        (idx >> (2 * (self.n_tri - 1 - t))) & 3
    }

    pub fn write_spins(&self, idx: usize, out: &mut [i8]) {
        out.fill(1);
        for t in 0..self.n_tri {
            let s = self.local_state(idx, t);
            if s > 0 {
                out[3 * t + s - 1] = -1;
            }
        }
    }

    pub fn spins(&self, idx: usize) -> Vec<i8> {
        let mut s = vec![1; self.n_sites()];
        self.write_spins(idx, &mut s);
        s
    }

    pub fn index_of(&self, spins: &[i8]) -> Option<usize> {
        let mut idx = 0;
        for t in 0..self.n_tri {
            let occ: Vec<usize> = (0..3).filter(|&k| spins[3 * t + k] < 0).collect();
            let s = match occ[..] {
                [] => 0,
                [k] => k + 1,
                _ => return None,
            };
            idx = 4 * idx + s;
        }
        Some(idx)
    }

    pub fn configuration(&self, idx: usize) -> Configuration {
        Configuration::from_spins(&self.spins(idx))
    }
}

/// Sparse matrix in compressed rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseOperator {
    pub dim: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<u32>,
    pub vals: Vec<C64>,
}

impl SparseOperator {
    pub fn apply(&self, x: &[C64], y: &mut [C64]) {
        y.par_iter_mut().enumerate().for_each(|(i, yi)| {
            let mut acc = C64::new(0.0, 0.0);
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[p] * x[self.cols[p] as usize];
            }
            *yi = acc;
        });
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        (self.row_ptr[i]..self.row_ptr[i + 1]).find(|&p| self.cols[p] as usize == j).map_or(C64::new(0.0, 0.0), |p| self.vals[p])
    }

    /// `max |H_ij − conj(H_ji)|`.
    pub fn hermiticity_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.dim {
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.cols[p] as usize;
                worst = worst.max((self.vals[p] - self.get(j, i).conj()).norm());
            }
        }
        worst
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for i in 0..self.dim {
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                m[(i, self.cols[p] as usize)] += self.vals[p];
            }
        }
        m
    }

    /// Add `d_i` to the diagonal, inserting entries where needed.
    pub fn add_diagonal(&self, d: &[C64]) -> Self {
        let mut out = Self { dim: self.dim, row_ptr: vec![0], cols: Vec::new(), vals: Vec::new() };
        for i in 0..self.dim {
            let mut seen = false;
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.cols[p];
                let mut v = self.vals[p];
                if j as usize == i {
                    v += d[i];
                    seen = true;
                }
                out.cols.push(j);
                out.vals.push(v);
            }
            if !seen && d[i] != C64::new(0.0, 0.0) {
                out.cols.push(i as u32);
                out.vals.push(d[i]);
            }
            out.row_ptr.push(out.cols.len());
        }
        out
    }
}

/// Time-independent pieces of `H(t)` on the restricted basis:
/// `H = diag(E_int − Δ N_w) − Ω K`, where `K` holds the flip couplings.
#[derive(Clone, Debug)]
pub struct ExactSystem {
    pub basis: RestrictedBasis,
    interaction: Vec<f64>,
    count: Vec<f64>,
    row_ptr: Vec<u32>,
    cols: Vec<u32>,
    weights: Vec<f64>,
    flip_site: Vec<u16>,
}

impl ExactSystem {
    pub fn new(lat: &RubyLattice, model: &RydbergModel, cap: usize) -> Result<Self> {
        let basis = RestrictedBasis::new(lat, cap)?;
        let dim = basis.dim();
        let nt = lat.n_triangles();
        let mut interaction = vec![0.0; dim];
        let mut count = vec![0.0; dim];
        let mut row_ptr = Vec::with_capacity(dim + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        let mut flip_site = Vec::new();
        row_ptr.push(0u32);
        let mut occ = Vec::with_capacity(nt);
        for idx in 0..dim {
            occ.clear();
            for t in 0..nt {
                let s = basis.local_state(idx, t);
                let place = basis.place(t);
                if s == 0 {
                    for k in 0..3 {
                        cols.push((idx + (k + 1) * place) as u32);
                        weights.push(0.5 * model.omega_weight(3 * t + k));
                        flip_site.push((3 * t + k) as u16);
                    }
                } else {
                    occ.push(3 * t + s - 1);
                    cols.push((idx - s * place) as u32);
                    weights.push(0.5 * model.omega_weight(3 * t + s - 1));
                    flip_site.push((3 * t + s - 1) as u16);
                }
            }
            interaction[idx] = model.interaction_energy(&occ);
            count[idx] = model.weighted_count(&occ);
            row_ptr.push(cols.len() as u32);
        }
        Ok(Self { basis, interaction, count, row_ptr, cols, weights, flip_site })
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    #[inline]
    pub fn diagonal(&self, idx: usize, delta: f64) -> f64 {
        self.interaction[idx] - delta * self.count[idx]
    }

    /// Basis states reachable by one flip, with the flipped site.
    pub fn neighbours(&self, idx: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let r = self.row_ptr[idx] as usize..self.row_ptr[idx + 1] as usize;
        r.map(move |p| (self.cols[p] as usize, self.flip_site[p] as usize))
    }

    pub fn hamiltonian(&self, omega: f64, delta: f64) -> SparseOperator {
        let dim = self.dim();
        let mut op = SparseOperator { dim, row_ptr: vec![0], cols: Vec::new(), vals: Vec::new() };
        for i in 0..dim {
            op.cols.push(i as u32);
            op.vals.push(C64::new(self.diagonal(i, delta), 0.0));
            for p in self.row_ptr[i] as usize..self.row_ptr[i + 1] as usize {
                op.cols.push(self.cols[p]);
                op.vals.push(C64::new(-omega * self.weights[p], 0.0));
            }
            op.row_ptr.push(op.cols.len());
        }
        op
    }

    /// `y = (H − shift − i·damping) x`.
    pub fn apply(&self, omega: f64, delta: f64, shift: f64, damping: Option<&[f64]>, x: &[C64], y: &mut [C64]) {
        y.par_iter_mut().enumerate().for_each(|(i, yi)| {
            let mut acc = C64::new(0.0, 0.0);
            for p in self.row_ptr[i] as usize..self.row_ptr[i + 1] as usize {
                acc += self.weights[p] * x[self.cols[p] as usize];
            }
            let d = C64::new(self.diagonal(i, delta) - shift, -damping.map_or(0.0, |g| g[i]));
            *yi = d * x[i] - omega * acc;
        });
    }

    pub fn energy(&self, psi: &[C64], omega: f64, delta: f64) -> f64 {
        let mut y = vec![C64::new(0.0, 0.0); psi.len()];
        self.apply(omega, delta, 0.0, None, psi, &mut y);
        let num: C64 = psi.iter().zip(&y).map(|(a, b)| a.conj() * b).sum();
        num.re / norm_sqr(psi)
    }

    fn mean_diagonal(&self, psi: &[C64], delta: f64) -> f64 {
        let w: f64 = psi.iter().enumerate().map(|(i, a)| a.norm_sqr() * self.diagonal(i, delta)).sum();
        w / norm_sqr(psi)
    }

    /// All-ground initial state.
    pub fn ground_state_vector(&self) -> Vec<C64> {
        let mut v = vec![C64::new(0.0, 0.0); self.dim()];
        v[0] = C64::new(1.0, 0.0);
        v
    }
}

pub fn norm_sqr(psi: &[C64]) -> f64 {
    psi.iter().map(|a| a.norm_sqr()).sum()
}

pub fn normalize(psi: &mut [C64]) {
    let n = norm_sqr(psi).sqrt();
    for a in psi.iter_mut() {
        *a /= n;
    }
}

pub fn inner(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Fourth-order Runge-Kutta stepper for `i∂_t ψ = (H(t) − i·damping) ψ`.
///
/// Each step subtracts the instantaneous mean diagonal energy, which keeps
/// the integrand slow; the removed global phase is accumulated in `phase`.
pub struct Stepper<'a> {
    pub sys: &'a ExactSystem,
    pub schedule: &'a Schedule,
    pub damping: Option<&'a [f64]>,
    pub phase: f64,
    k: [Vec<C64>; 4],
    tmp: Vec<C64>,
}

impl<'a> Stepper<'a> {
    pub fn new(sys: &'a ExactSystem, schedule: &'a Schedule, damping: Option<&'a [f64]>) -> Self {
        let z = vec![C64::new(0.0, 0.0); sys.dim()];
        Self { sys, schedule, damping, phase: 0.0, k: [z.clone(), z.clone(), z.clone(), z.clone()], tmp: z }
    }

    fn deriv(&self, t: f64, shift: f64, x: &[C64], out: &mut Vec<C64>) -> Result<()> {
        let (omega, delta) = self.schedule.eval(t)?;
        self.sys.apply(omega, delta, shift, self.damping, x, out);
        for v in out.iter_mut() {
            *v = C64::new(v.im, -v.re);
        }
        Ok(())
    }

    pub fn step(&mut self, psi: &mut [C64], t: f64, h: f64) -> Result<()> {
        let (_, delta) = self.schedule.eval(t)?;
        let shift = self.sys.mean_diagonal(psi, delta);
        let mut k = std::mem::take(&mut self.k);
        let mut tmp = std::mem::take(&mut self.tmp);
        let stages = [(0.0, 0.0), (0.5, 0.5), (0.5, 0.5), (1.0, 1.0)];
        let mut res = Ok(());
        for s in 0..4 {
            let (c, a) = stages[s];
            let src: &[C64] = if s == 0 {
                psi
            } else {
                for (i, v) in tmp.iter_mut().enumerate() {
                    *v = psi[i] + k[s - 1][i] * (a * h);
                }
                &tmp
            };
            let mut out = std::mem::take(&mut k[s]);
            res = self.deriv(t + c * h, shift, src, &mut out);
            k[s] = out;
            if res.is_err() {
                break;
            }
        }
        if res.is_ok() {
            for (i, v) in psi.iter_mut().enumerate() {
                *v += (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]) * (h / 6.0);
            }
            self.phase += shift * h;
        }
        self.k = k;
        self.tmp = tmp;
        res
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvolveReport {
    pub steps: usize,
    /// Sum over steps of `|‖ψ‖² − 1|` before renormalization.
    pub norm_drift: f64,
    pub max_step_drift: f64,
    /// Global phase removed by the energy shift; the true state is `e^{−i·phase} ψ`.
    pub phase: f64,
}

/// Per-step norm error beyond which the step size is deemed too large.
pub const STEP_DRIFT_LIMIT: f64 = 1e-4;

/// Closed evolution from `t0` to `t1`. `observe` is called at each time in
/// `obs` (which must be sorted and inside `[t0, t1]`); steps are shortened
/// to land on them exactly.
pub fn evolve_exact(
    sys: &ExactSystem,
    psi: &mut [C64],
    schedule: &Schedule,
    t0: f64,
    t1: f64,
    dt: f64,
    obs: &[f64],
    mut observe: impl FnMut(f64, &[C64]) -> Result<()>,
) -> Result<EvolveReport> {
    if !(dt > 0.0) || t1 < t0 {
        return Err(Error::Parameter("need dt > 0 and t1 ≥ t0".into()));
    }
    if (norm_sqr(psi) - 1.0).abs() > 1e-8 {
        return Err(Error::Parameter("initial state must be normalized".into()));
    }
    let mut stepper = Stepper::new(sys, schedule, None);
    let mut report = EvolveReport::default();
    let mut t = t0;
    let mut next = 0;
    let eps = 1e-12 * t1.abs().max(1.0);
    loop {
        while next < obs.len() && obs[next] <= t + eps {
            observe(obs[next], psi)?;
            next += 1;
        }
        if t >= t1 - eps {
            break;
        }
        let target = obs.get(next).copied().unwrap_or(t1).min(t1);
        let h = dt.min(target - t);
        stepper.step(psi, t, h)?;
        t = if (target - t - h).abs() <= eps { target } else { t + h };
        let d = (norm_sqr(psi) - 1.0).abs();
        report.steps += 1;
        report.norm_drift += d;
        report.max_step_drift = report.max_step_drift.max(d);
        if d > STEP_DRIFT_LIMIT {
            return Err(Error::Numerical(format!("norm drift {d:.2e} in one step at t = {t:.4}; reduce dt")));
        }
        normalize(psi);
    }
    report.phase = stepper.phase;
    Ok(report)
}

/// `|⟨a|b⟩|² / (⟨a|a⟩⟨b|b⟩)`.
pub fn fidelity(a: &[C64], b: &[C64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Parameter("state dimensions differ".into()));
    }
    Ok(inner(a, b).norm_sqr() / (norm_sqr(a) * norm_sqr(b)))
}

/// Largest side of the reduced Gram matrix in the Rényi computation.
pub const RENYI_CAP: usize = 8192;

fn pack(spins: &[i8], sites: &[usize]) -> u128 {
    sites.iter().enumerate().fold(0u128, |acc, (b, &s)| acc | (u128::from(spins[s] < 0) << b))
}

/// `−ln Tr ρ_X²` of the state `Σ amps[k] |configs[k]⟩`.
///
/// Regions may cut through triangles: the amplitudes are grouped into a
/// matrix `M[x][y]` over per-site occupation patterns of `X` and of its
/// complement, and `Tr ρ_X² = ‖M M†‖²_F / ‖ψ‖⁴` is formed on the smaller side.
pub fn renyi2_of_terms(spins: &[Vec<i8>], amps: &[C64], region: &[usize]) -> Result<f64> {
    let n = spins.first().map_or(0, |s| s.len());
    let mut inx = vec![false; n];
    for &s in region {
        if s >= n {
            return Err(Error::Parameter("region site out of range".into()));
        }
        inx[s] = true;
    }
    let x: Vec<usize> = (0..n).filter(|&s| inx[s]).collect();
    let y: Vec<usize> = (0..n).filter(|&s| !inx[s]).collect();
    if x.is_empty() {
        return Err(Error::Parameter("region must be nonempty".into()));
    }
    if y.is_empty() {
        return Ok(0.0);
    }
    if x.len() > 128 || y.len() > 128 {
        return Err(Error::TooLarge { dim: x.len().max(y.len()), cap: 128 });
    }
    let mut xi: HashMap<u128, usize> = HashMap::new();
    let mut yi: HashMap<u128, usize> = HashMap::new();
    let mut entries = Vec::with_capacity(amps.len());
    for (s, &a) in spins.iter().zip(amps) {
        if a == C64::new(0.0, 0.0) {
            continue;
        }
        let nx = xi.len();
        let r = *xi.entry(pack(s, &x)).or_insert(nx);
        let ny = yi.len();
        let c = *yi.entry(pack(s, &y)).or_insert(ny);
        entries.push((r, c, a));
    }
    let (small, big, swap) = if xi.len() <= yi.len() { (xi.len(), yi.len(), false) } else { (yi.len(), xi.len(), true) };
    if small > RENYI_CAP {
        return Err(Error::TooLarge { dim: small, cap: RENYI_CAP });
    }
    let mut groups: Vec<Vec<(usize, C64)>> = vec![Vec::new(); big];
    let mut norm = 0.0;
    for &(r, c, a) in &entries {
        let (s, b) = if swap { (c, r) } else { (r, c) };
        groups[b].push((s, a));
        norm += a.norm_sqr();
    }
    let mut g = vec![C64::new(0.0, 0.0); small * small];
    for grp in &groups {
        for &(i, ai) in grp {
            for &(j, aj) in grp {
                g[i * small + j] += ai * aj.conj();
            }
        }
    }
    let tr: f64 = g.iter().map(|z| z.norm_sqr()).sum::<f64>() / (norm * norm);
    Ok(-tr.ln())
}

pub fn exact_renyi2(basis: &RestrictedBasis, psi: &[C64], region: &[usize]) -> Result<f64> {
    let idx: Vec<usize> = (0..basis.dim()).filter(|&i| psi[i] != C64::new(0.0, 0.0)).collect();
    let spins: Vec<Vec<i8>> = idx.iter().map(|&i| basis.spins(i)).collect();
    let amps: Vec<C64> = idx.iter().map(|&i| psi[i]).collect();
    renyi2_of_terms(&spins, &amps, region)
}

/// Feature matrix of an ansatz over the whole restricted basis, so that
/// `log ψ = F θ` for every basis state at once.
pub struct FullSum {
    pub basis: RestrictedBasis,
    pub spins: Vec<i8>,
    pub features: DMatrix<f64>,
    /// Affinely independent columns of `features`, with `lift` mapping
    /// their centered moments back to all parameters.
    reduced: DMatrix<f64>,
    lift: DMatrix<f64>,
}

impl FullSum {
    pub fn new(basis: RestrictedBasis, a: &impl Ansatz) -> Self {
        let n = basis.n_sites();
        let dim = basis.dim();
        let np = a.n_params();
        let mut spins = vec![0i8; dim * n];
        for (i, chunk) in spins.chunks_mut(n).enumerate() {
            basis.write_spins(i, chunk);
        }
        let mut features = DMatrix::<f64>::zeros(dim, np);
        let mut row = vec![0.0; np];
        for i in 0..dim {
            a.features(&spins[i * n..(i + 1) * n], &mut row);
            for k in 0..np {
                features[(i, k)] = row[k];
            }
        }
        let (reduced, lift) = reduce_columns(&features);
        Self { basis, spins, features, reduced, lift }
    }

    /// Centered covariance of the features under the weights `p`.
    pub fn covariance(&self, p: &[f64]) -> DMatrix<f64> {
        let s = weighted_covariance(&self.reduced, p);
        &self.lift * s * self.lift.transpose()
    }

    /// `Σ_σ F_k w − (Σ_σ p F_k)(Σ_σ w)` for every parameter.
    pub fn cross_moment(&self, p: &[f64], w: &[C64]) -> DVector<C64> {
        let wr = DVector::from_iterator(w.len(), w.iter().map(|z| z.re));
        let wi = DVector::from_iterator(w.len(), w.iter().map(|z| z.im));
        let total: C64 = w.iter().sum();
        let pm = self.reduced.tr_mul(&DVector::from_column_slice(p));
        let cr = self.reduced.tr_mul(&wr);
        let ci = self.reduced.tr_mul(&wi);
        let c = DVector::from_iterator(cr.len(), (0..cr.len()).map(|k| C64::new(cr[k], ci[k]) - total * pm[k]));
        self.lift.map(|x| C64::new(x, 0.0)) * c
    }

    pub fn spins_of(&self, idx: usize) -> &[i8] {
        let n = self.basis.n_sites();
        &self.spins[idx * n..(idx + 1) * n]
    }

    pub fn log_amplitudes(&self, theta: &[C64]) -> Vec<C64> {
        let re = DVector::from_iterator(theta.len(), theta.iter().map(|z| z.re));
        let im = DVector::from_iterator(theta.len(), theta.iter().map(|z| z.im));
        let a = &self.features * re;
        let b = &self.features * im;
        a.iter().zip(b.iter()).map(|(&x, &y)| C64::new(x, y)).collect()
    }

    /// Normalized state vector of `θ`.
    pub fn state(&self, theta: &[C64]) -> Vec<C64> {
        let l = self.log_amplitudes(theta);
        let m = l.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
        let mut v: Vec<C64> = l.iter().map(|z| (z - m).exp()).collect();
        normalize(&mut v);
        v
    }
}

/// Drop columns that are constant or equal to a constant minus an earlier
/// kept column (one-hot pairs), which leave centered moments redundant.
fn reduce_columns(f: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let np = f.ncols();
    let mut kept: Vec<usize> = Vec::new();
    let mut lift_entries: Vec<Option<(usize, f64)>> = Vec::with_capacity(np);
    let affine = |a: usize, b: usize, sign: f64| {
        let c = f[(0, a)] + sign * f[(0, b)];
        f.column(a).iter().zip(f.column(b).iter()).all(|(x, y)| x + sign * y == c)
    };
    for k in 0..np {
        let col = f.column(k);
        if f.nrows() > 0 && col.iter().all(|&x| x == col[0]) {
            lift_entries.push(None);
            continue;
        }
        if let Some(r) = kept.iter().position(|&j| affine(k, j, 1.0)) {
            lift_entries.push(Some((r, -1.0)));
            continue;
        }
        lift_entries.push(Some((kept.len(), 1.0)));
        kept.push(k);
    }
    let reduced = f.select_columns(kept.iter());
    let mut lift = DMatrix::zeros(np, kept.len());
    for (k, e) in lift_entries.into_iter().enumerate() {
        if let Some((r, v)) = e {
            lift[(k, r)] = v;
        }
    }
    (reduced, lift)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub steps: usize,
    pub seed: u64,
    /// Scale of the random perturbation applied to the starting parameters.
    pub init_noise: f64,
    pub tol: f64,
    pub reg: Regularization,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { steps: 400, seed: 0, init_noise: 1e-3, tol: 1e-12, reg: Regularization { diag_shift: 1e-6, pinv_cutoff: 1e-10 } }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub infidelity: f64,
    pub steps: usize,
    pub converged: bool,
}

/// Maximize `|⟨target|ψ_θ⟩|²` over `θ` by natural-gradient ascent on the
/// log-fidelity with a backtracking step size. Starts from the current
/// parameters of `a`, perturbed by seeded noise.
pub fn optimize_fidelity(full: &FullSum, target: &[C64], a: &mut impl Ansatz, opts: &FitOptions) -> Result<FitReport> {
    if target.len() != full.basis.dim() {
        return Err(Error::Parameter("target dimension does not match the basis".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut theta: Vec<C64> = a.params().iter().map(|&z| z + C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * opts.init_noise).collect();
    let infid = |th: &[C64]| -> Result<f64> { Ok(1.0 - fidelity(target, &full.state(th))?) };
    let mut cur = infid(&theta)?;
    let mut eta = 1.0;
    let mut steps = 0;
    while steps < opts.steps && cur > opts.tol && eta > 1e-10 {
        steps += 1;
        let psi = full.state(&theta);
        let p: Vec<f64> = psi.iter().map(|z| z.norm_sqr()).collect();
        let w: Vec<C64> = target.iter().zip(&psi).map(|(t, s)| t.conj() * s).collect();
        let ov: C64 = w.iter().sum();
        // Centered log-derivative of the overlap: conj(Σ F w / ov) − Σ p F.
        let g = full.cross_moment(&p, &w).map(|c| (c / ov).conj());
        let s = complexify(&full.covariance(&p));
        let (dir, _) = pinv_solve(&s, &g, opts.reg)?;
        loop {
            let trial: Vec<C64> = theta.iter().zip(dir.iter()).map(|(t, d)| t + d * eta).collect();
            let val = infid(&trial)?;
            if val.is_finite() && val < cur {
                theta = trial;
                cur = val;
                eta = (eta * 1.5).min(1.0);
                break;
            }
            eta *= 0.5;
            if eta <= 1e-10 {
                break;
            }
        }
    }
    a.set_params(&theta);
    Ok(FitReport { infidelity: cur.max(0.0), steps, converged: cur <= opts.tol })
}
