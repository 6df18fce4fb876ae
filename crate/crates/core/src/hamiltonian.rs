//! Rydberg Hamiltonian, quench schedules and field disorder.
//!
//! `H = −(Ω/2) Σ σˣ_i − Δ Σ n_i + Σ_{i<j} V(r_ij) n_i n_j`. Time is in µs,
//! frequencies in rad/µs, lengths in units of the lattice spacing `a`.
//! Intra-triangle pairs never both hold an excitation in the restricted
//! space, so they are left out of the interaction sum.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ansatz::{Ansatz, C64};
use crate::error::{Error, Result};
use crate::lattice::RubyLattice;

/// `2π × f[MHz]` in rad/µs.
pub fn mhz(f: f64) -> f64 {
    2.0 * PI * f
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RydbergParams {
    /// Peak Rabi frequency, rad/µs.
    pub omega0: f64,
    pub spacing_um: f64,
    /// Blockade radius in units of `a`.
    pub rb: f64,
    /// Interactions beyond this distance (units of `a`) are dropped.
    pub cutoff: Option<f64>,
}

impl Default for RydbergParams {
    fn default() -> Self {
        Self { omega0: mhz(1.4), spacing_um: 3.9, rb: 2.4, cutoff: None }
    }
}

impl RydbergParams {
    /// `V0 = Ω0 R_b⁶`, in rad/µs × a⁶.
    pub fn v0(&self) -> f64 {
        self.omega0 * self.rb.powi(6)
    }

    pub fn blockade_radius(&self) -> f64 {
        (self.v0() / self.omega0).powf(1.0 / 6.0)
    }

    pub fn potential(&self, r: f64) -> Result<f64> {
        if !(r > 0.0) {
            return Err(Error::Parameter(format!("potential needs r > 0, got {r}")));
        }
        Ok(self.v0() / r.powi(6))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    /// Ω rises linearly to Ω0 over `[0, T/5]` while Δ stays at `delta_start`;
    /// then Δ follows a degree-`degree` monomial to `delta_end` at `T`.
    Ramp { total_us: f64, omega0: f64, delta_start: f64, delta_end: f64, degree: u32 },
    /// Frozen fields.
    Constant { total_us: f64, omega: f64, delta: f64 },
}

impl Schedule {
    pub fn protocol(total_us: f64) -> Self {
        Schedule::Ramp { total_us, omega0: mhz(1.4), delta_start: mhz(-8.0), delta_end: mhz(9.4), degree: 3 }
    }

    pub fn with_degree(self, n: u32) -> Self {
        match self {
            Schedule::Ramp { total_us, omega0, delta_start, delta_end, .. } => Schedule::Ramp { total_us, omega0, delta_start, delta_end, degree: n },
            other => other,
        }
    }

    pub fn total(&self) -> f64 {
        match *self {
            Schedule::Ramp { total_us, .. } | Schedule::Constant { total_us, .. } => total_us,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.total();
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::Parameter(format!("schedule duration must be positive, got {t}")));
        }
        if let Schedule::Ramp { omega0, degree, .. } = *self {
            if !(omega0 >= 0.0) || degree == 0 {
                return Err(Error::Parameter("ramp needs Ω0 ≥ 0 and degree ≥ 1".into()));
            }
        }
        Ok(())
    }

    /// `(Ω(t), Δ(t))`.
    pub fn eval(&self, t: f64) -> Result<(f64, f64)> {
        let total = self.total();
        let slack = 1e-9 * total;
        if !(t >= -slack && t <= total + slack) {
            return Err(Error::Parameter(format!("time {t} outside [0, {total}]")));
        }
        let t = t.clamp(0.0, total);
        Ok(match *self {
            Schedule::Constant { omega, delta, .. } => (omega, delta),
            Schedule::Ramp { total_us, omega0, delta_start, delta_end, degree } => {
                let t1 = total_us / 5.0;
                if t <= t1 {
                    (omega0 * t / t1, delta_start)
                } else {
                    let x = (t - t1) / (total_us - t1);
                    (omega0, delta_start + (delta_end - delta_start) * x.powi(degree as i32))
                }
            }
        })
    }
}

/// Per-site relative field errors: `Ω_i = Ω(1 + ω_i)`, `Δ_i = Δ(1 + δ_i)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisorderRealization {
    pub seed: u64,
    pub omega: Vec<f64>,
    pub delta: Vec<f64>,
}

impl DisorderRealization {
    pub fn none(n: usize) -> Self {
        Self { seed: 0, omega: vec![0.0; n], delta: vec![0.0; n] }
    }

    /// Draw `ω_i ~ N(0, var_x)` and `δ_i ~ N(0, var_n)`.
    pub fn sample(n: usize, var_x: f64, var_n: f64, seed: u64) -> Result<Self> {
        if !(var_x >= 0.0 && var_n >= 0.0) {
            return Err(Error::Parameter("disorder variances must be non-negative".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nx = Normal::new(0.0, var_x.sqrt()).map_err(|e| Error::Parameter(e.to_string()))?;
        let nn = Normal::new(0.0, var_n.sqrt()).map_err(|e| Error::Parameter(e.to_string()))?;
        let omega = (0..n).map(|_| nx.sample(&mut rng)).collect();
        let delta = (0..n).map(|_| nn.sample(&mut rng)).collect();
        Ok(Self { seed, omega, delta })
    }

    pub fn is_trivial(&self) -> bool {
        self.omega.iter().chain(&self.delta).all(|&x| x == 0.0)
    }
}

/// Interaction matrix and field weights for one lattice.
#[derive(Clone, Debug)]
pub struct RydbergModel {
    pub params: RydbergParams,
    n: usize,
    v: Vec<f64>,
    omega_w: Vec<f64>,
    delta_w: Vec<f64>,
}

impl RydbergModel {
    pub fn new(lat: &RubyLattice, params: RydbergParams, disorder: Option<&DisorderRealization>) -> Result<Self> {
        let n = lat.n_sites();
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i == j || lat.triangle_of(i) == lat.triangle_of(j) {
                    continue;
                }
                let r = lat.distance(i, j);
                if params.cutoff.map_or(true, |c| r <= c) {
                    v[i * n + j] = params.potential(r)?;
                }
            }
        }
        let (omega_w, delta_w) = match disorder {
            Some(d) => {
                if d.omega.len() != n || d.delta.len() != n {
                    return Err(Error::Parameter("disorder size does not match the lattice".into()));
                }
                (d.omega.iter().map(|w| 1.0 + w).collect(), d.delta.iter().map(|w| 1.0 + w).collect())
            }
            None => (vec![1.0; n], vec![1.0; n]),
        };
        Ok(Self { params, n, v, omega_w, delta_w })
    }

    pub fn n_sites(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn interaction(&self, i: usize, j: usize) -> f64 {
        self.v[i * self.n + j]
    }

    #[inline]
    pub fn omega_weight(&self, i: usize) -> f64 {
        self.omega_w[i]
    }

    #[inline]
    pub fn delta_weight(&self, i: usize) -> f64 {
        self.delta_w[i]
    }

    /// `Σ_{i<j} V_ij n_i n_j` over the occupied sites.
    pub fn interaction_energy(&self, occupied: &[usize]) -> f64 {
        let mut e = 0.0;
        for (a, &i) in occupied.iter().enumerate() {
            for &j in &occupied[..a] {
                e += self.v[i * self.n + j];
            }
        }
        e
    }

    /// `Σ_i (1 + δ_i) n_i`.
    pub fn weighted_count(&self, occupied: &[usize]) -> f64 {
        occupied.iter().map(|&i| self.delta_w[i]).sum()
    }

    pub fn diagonal_energy(&self, spins: &[i8], delta: f64) -> f64 {
        let occ: Vec<usize> = (0..self.n).filter(|&i| spins[i] < 0).collect();
        self.interaction_energy(&occ) - delta * self.weighted_count(&occ)
    }

    /// Sites whose flip stays in the restricted space.
    pub fn allowed_flips(&self, spins: &[i8], out: &mut Vec<usize>) {
        out.clear();
        let nt = self.n / 3;
        for t in 0..nt {
            let occ = (0..3).find(|&k| spins[3 * t + k] < 0);
            match occ {
                Some(k) => out.push(3 * t + k),
                None => out.extend(3 * t..3 * t + 3),
            }
        }
    }

    /// `E_loc(σ) = Σ_σ' H_σσ' ψ(σ')/ψ(σ)` given precomputed ansatz fields.
    pub fn local_energy_with(&self, a: &impl Ansatz, fields: &[C64], spins: &[i8], omega: f64, delta: f64) -> C64 {
        let mut e = C64::new(self.diagonal_energy(spins, delta), 0.0);
        if omega != 0.0 {
            let mut flips = Vec::with_capacity(self.n);
            self.allowed_flips(spins, &mut flips);
            for &k in &flips {
                e -= 0.5 * omega * self.omega_w[k] * a.log_ratio(fields, spins, &[k]).exp();
            }
        }
        e
    }

    pub fn local_energy(&self, a: &impl Ansatz, spins: &[i8], omega: f64, delta: f64) -> Result<C64> {
        let la = a.log_amplitude(spins);
        if !la.re.is_finite() {
            return Err(Error::Numerical("local energy at a zero-amplitude configuration".into()));
        }
        let h = a.fields(spins);
        Ok(self.local_energy_with(a, &h, spins, omega, delta))
    }
}
