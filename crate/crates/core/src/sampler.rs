//! Metropolis sampling of `|ψ|²` inside the restricted space.
//!
//! Two symmetric proposals are mixed. A triangle move picks a triangle
//! uniformly and resamples it to one of its four local states. A loop move
//! picks a closed Q string (hexagons, plus winding loops on periodic axes)
//! and applies it; Q is an involution, so the reverse move has the same
//! probability. Loop moves carry the chain between dimer coverings without
//! passing through defect states, which triangle moves alone cannot do when
//! defects are strongly suppressed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ansatz::{Ansatz, C64};
use crate::error::{Error, Result};
use crate::lattice::{make_string, RubyLattice, StringKind, StringPath, Template};
use crate::state::Configuration;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_chains: usize,
    /// Samples kept per chain.
    pub n_samples: usize,
    /// Sweeps discarded before the first sample.
    pub n_burnin: usize,
    /// Sweeps between kept samples; one sweep is one proposal per triangle.
    pub thin: usize,
    /// Probability that a proposal is a loop move.
    pub loop_fraction: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { n_chains: 16, n_samples: 512, n_burnin: 64, thin: 1, loop_fraction: 0.25, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 || self.n_samples == 0 || self.thin == 0 {
            return Err(Error::Parameter("sampler needs at least one chain, one sample and thin ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.loop_fraction) {
            return Err(Error::Parameter("loop_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ChainState {
    pub spins: Vec<i8>,
    pub log_psi: C64,
    fields: Vec<C64>,
    rng: ChaCha8Rng,
    pub stream: u64,
    pub accepted: u64,
    pub proposed: u64,
}

/// Samples from all chains, stored chain-major.
#[derive(Clone, Debug)]
pub struct SampleSet {
    pub n_sites: usize,
    pub n_chains: usize,
    pub per_chain: usize,
    pub spins: Vec<i8>,
    pub log_psi: Vec<C64>,
    pub acceptance: f64,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.log_psi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_psi.is_empty()
    }

    pub fn sample(&self, k: usize) -> &[i8] {
        &self.spins[k * self.n_sites..(k + 1) * self.n_sites]
    }

    pub fn configurations(&self) -> Vec<Configuration> {
        (0..self.len()).map(|k| Configuration::from_spins(self.sample(k))).collect()
    }
}

/// Persistent Markov chains; reused across time steps so later calls need
/// only a short burn-in.
pub struct Sampler {
    pub config: SamplerConfig,
    n_sites: usize,
    loops: Vec<StringPath>,
    lat: RubyLattice,
    chains: Vec<ChainState>,
}

impl Sampler {
    pub fn new(lat: &RubyLattice, config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        let mut loops = Vec::new();
        for h in 0..lat.hexagons.len() {
            loops.push(make_string(lat, StringKind::Q, &Template::HexagonLoop(h))?);
        }
        for axis in 0..2 {
            if lat.periodic[axis] {
                if let Ok(w) = make_string(lat, StringKind::Q, &Template::WindingLoop(axis)) {
                    loops.push(w);
                }
            }
        }
        Ok(Self { config, n_sites: lat.n_sites(), loops, lat: lat.clone(), chains: Vec::new() })
    }

    pub fn chains(&self) -> &[ChainState] {
        &self.chains
    }

    /// Start every chain from `start` (default all-ground).
    pub fn reset(&mut self, a: &impl Ansatz, start: Option<&[i8]>) -> Result<()> {
        let n = self.n_sites;
        let spins = start.map_or_else(|| vec![1i8; n], |s| s.to_vec());
        if spins.len() != n || !Configuration::from_spins(&spins).is_restricted() {
            return Err(Error::Parameter("start configuration is not in the restricted space".into()));
        }
        self.chains = (0..self.config.n_chains as u64)
            .map(|c| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
                rng.set_stream(c);
                ChainState { spins: spins.clone(), log_psi: C64::new(0.0, 0.0), fields: Vec::new(), rng, stream: c, accepted: 0, proposed: 0 }
            })
            .collect();
        self.refresh(a)
    }

    fn refresh(&mut self, a: &impl Ansatz) -> Result<()> {
        for ch in &mut self.chains {
            ch.log_psi = a.log_amplitude(&ch.spins);
            ch.fields = a.fields(&ch.spins);
            if !ch.log_psi.re.is_finite() {
                return Err(Error::Numerical("non-finite log-amplitude in chain state".into()));
            }
        }
        Ok(())
    }

    /// Run burn-in then collect samples. Chains continue from their previous
    /// state; parameters may have changed, so cached values are recomputed.
    pub fn run(&mut self, a: &impl Ansatz, burnin: usize) -> Result<SampleSet> {
        if self.chains.is_empty() {
            self.reset(a, None)?;
        } else {
            self.refresh(a)?;
        }
        let cfg = self.config.clone();
        let n = self.n_sites;
        let nt = n / 3;
        let loops = &self.loops;
        let lat = &self.lat;
        let results: Vec<Result<(Vec<i8>, Vec<C64>)>> = self
            .chains
            .par_iter_mut()
            .map(|ch| {
                let mut out_s = Vec::with_capacity(cfg.n_samples * n);
                let mut out_l = Vec::with_capacity(cfg.n_samples);
                let mut flips = Vec::with_capacity(32);
                let total = burnin + cfg.n_samples * cfg.thin;
                for sweep in 0..total {
                    for _ in 0..nt.max(1) {
                        propose(a, lat, loops, cfg.loop_fraction, ch, &mut flips)?;
                    }
                    if sweep >= burnin && (sweep - burnin + 1) % cfg.thin == 0 {
                        out_s.extend_from_slice(&ch.spins);
                        out_l.push(ch.log_psi);
                    }
                }
                Ok((out_s, out_l))
            })
            .collect();
        let mut set = SampleSet {
            n_sites: n,
            n_chains: cfg.n_chains,
            per_chain: cfg.n_samples,
            spins: Vec::with_capacity(cfg.n_chains * cfg.n_samples * n),
            log_psi: Vec::new(),
            acceptance: 0.0,
        };
        for r in results {
            let (s, l) = r?;
            set.spins.extend(s);
            set.log_psi.extend(l);
        }
        let (acc, prop) = self.chains.iter().fold((0, 0), |(a, p), c| (a + c.accepted, p + c.proposed));
        set.acceptance = if prop > 0 { acc as f64 / prop as f64 } else { 0.0 };
        Ok(set)
    }
}

fn propose(a: &impl Ansatz, lat: &RubyLattice, loops: &[StringPath], loop_fraction: f64, ch: &mut ChainState, flips: &mut Vec<usize>) -> Result<()> {
    flips.clear();
    if !loops.is_empty() && ch.rng.gen::<f64>() < loop_fraction {
        let l = &loops[ch.rng.gen_range(0..loops.len())];
        let spins = &ch.spins;
        flips.extend(l.q_flips(lat, |s| spins[s] < 0));
    } else {
        let t = ch.rng.gen_range(0..ch.spins.len() / 3);
        let target = ch.rng.gen_range(0..4usize);
        let cur = (0..3).find(|&k| ch.spins[3 * t + k] < 0);
        if let Some(k) = cur {
            flips.push(3 * t + k);
        }
        if target < 3 && cur != Some(target) {
            flips.push(3 * t + target);
        } else if target < 3 {
            flips.clear();
        }
    }
    ch.proposed += 1;
    if flips.is_empty() {
        ch.accepted += 1;
        return Ok(());
    }
    let d = a.log_ratio(&ch.fields, &ch.spins, flips);
    if !d.re.is_finite() && d.re != f64::NEG_INFINITY {
        return Err(Error::Numerical("non-finite log-amplitude ratio".into()));
    }
    let log_acc = 2.0 * d.re;
    if log_acc >= 0.0 || ch.rng.gen::<f64>() < log_acc.exp() {
        a.update_fields(&mut ch.fields, &ch.spins, flips);
        for &k in flips.iter() {
            ch.spins[k] = -ch.spins[k];
        }
        ch.log_psi += d;
        ch.accepted += 1;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: C64,
    pub stderr: f64,
    pub n_samples: usize,
    pub n_chains: usize,
    /// Integrated autocorrelation time in units of samples, from blocking.
    pub tau: f64,
}

/// Number of blocks each chain is cut into for the error estimate.
pub const BLOCKS_PER_CHAIN: usize = 8;

/// Sample index ranges of the blocks used for error estimates, for `m`
/// samples laid out chain-major in `n_chains` equal chains.
pub fn blocks(m: usize, n_chains: usize) -> Vec<std::ops::Range<usize>> {
    let per = m / n_chains.max(1);
    let bpc = BLOCKS_PER_CHAIN.min(per);
    if bpc == 0 {
        return Vec::new();
    }
    let blen = per / bpc;
    (0..n_chains).flat_map(|c| (0..bpc).map(move |b| c * per + b * blen..c * per + (b + 1) * blen)).collect()
}

/// Mean and blocking error of `values` laid out chain-major in `n_chains`
/// equal chains.
pub fn estimate_values(values: &[C64], n_chains: usize) -> Result<Estimate> {
    let m = values.len();
    if m == 0 || n_chains == 0 || m % n_chains != 0 {
        return Err(Error::Parameter("estimate needs a nonempty, evenly split sample set".into()));
    }
    let mean: C64 = values.iter().sum::<C64>() / m as f64;
    let ranges = blocks(m, n_chains);
    let blen = ranges[0].len();
    let blocks: Vec<C64> = ranges.into_iter().map(|r| values[r].iter().sum::<C64>() / blen as f64).collect();
    let nb = blocks.len();
    let var_b = if nb > 1 { blocks.iter().map(|b| (b - mean).norm_sqr()).sum::<f64>() / (nb - 1) as f64 } else { 0.0 };
    let var_s = if m > 1 { values.iter().map(|v| (v - mean).norm_sqr()).sum::<f64>() / (m - 1) as f64 } else { 0.0 };
    let stderr = (var_b / nb as f64).sqrt();
    let tau = if var_s > 0.0 { 0.5 * blen as f64 * var_b / var_s } else { 0.5 };
    Ok(Estimate { mean, stderr, n_samples: m, n_chains, tau })
}

/// `E[O_loc]` over a sample set.
pub fn estimate_local(set: &SampleSet, op: impl Fn(usize, &[i8]) -> C64 + Sync) -> Result<Estimate> {
    if set.is_empty() {
        return Err(Error::Parameter("empty sample set".into()));
    }
    let values: Vec<C64> = (0..set.len()).into_par_iter().map(|k| op(k, set.sample(k))).collect();
    estimate_values(&values, set.n_chains)
}

/// Nonparametric bootstrap of the mean.
pub fn bootstrap_ci(values: &[f64], n_boot: usize, seed: u64) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 || n_boot < 2 {
        return Err(Error::Parameter("bootstrap needs at least two values and two resamples".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let boots: Vec<f64> = (0..n_boot).map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64).collect();
    let bm = boots.iter().sum::<f64>() / n_boot as f64;
    let var = boots.iter().map(|b| (b - bm).powi(2)).sum::<f64>() / (n_boot - 1) as f64;
    Ok((mean, var.sqrt()))
}

/// Per-pair swap ratios `ψ(x', y) ψ(x, y') / (ψ(x, y) ψ(x', y'))` for two
/// independent replicas. A swap that breaks the triangle rule contributes 0.
pub fn swap_ratios(a: &impl Ansatz, region: &[usize], r1: &SampleSet, r2: &SampleSet) -> Result<Vec<C64>> {
    if r1.len() != r2.len() || r1.n_sites != r2.n_sites {
        return Err(Error::Parameter("replicas must have equal shape".into()));
    }
    let n = r1.n_sites;
    if region.is_empty() || region.iter().any(|&s| s >= n) {
        return Err(Error::Parameter("region must be a nonempty set of valid sites".into()));
    }
    let mut inx = vec![false; n];
    for &s in region {
        inx[s] = true;
    }
    if inx.iter().all(|&b| b) {
        return Ok(vec![C64::new(1.0, 0.0); r1.len()]);
    }
    let ratios = (0..r1.len())
        .into_par_iter()
        .map(|k| {
            let (s, t) = (r1.sample(k), r2.sample(k));
            let mut u = s.to_vec();
            let mut v = t.to_vec();
            for i in 0..n {
                if inx[i] {
                    u[i] = t[i];
                    v[i] = s[i];
                }
            }
            let ok = |c: &[i8]| (0..n / 3).all(|tr| c[3 * tr..3 * tr + 3].iter().filter(|&&x| x < 0).count() <= 1);
            if !ok(&u) || !ok(&v) {
                return C64::new(0.0, 0.0);
            }
            (a.log_amplitude(&u) + a.log_amplitude(&v) - r1.log_psi[k] - r2.log_psi[k]).exp()
        })
        .collect();
    Ok(ratios)
}

/// `S⁽²⁾ = −ln E[swap ratio]` with a bootstrap error over the pairs.
pub fn renyi2(a: &impl Ansatz, region: &[usize], r1: &SampleSet, r2: &SampleSet, seed: u64) -> Result<Estimate> {
    let ratios = swap_ratios(a, region, r1, r2)?;
    renyi2_from_ratios(&ratios, r1.n_chains, seed)
}

pub const N_BOOT: usize = 1024;

pub fn renyi2_from_ratios(ratios: &[C64], n_chains: usize, seed: u64) -> Result<Estimate> {
    let est = estimate_values(ratios, n_chains)?;
    if !(est.mean.re > 0.0) {
        return Err(Error::Undefined("swap estimator mean is not positive".into()));
    }
    let re: Vec<f64> = ratios.iter().map(|z| z.re).collect();
    let n = re.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut boots = Vec::with_capacity(N_BOOT);
    for _ in 0..N_BOOT {
        let m = (0..n).map(|_| re[rng.gen_range(0..n)]).sum::<f64>() / n as f64;
        if m > 0.0 {
            boots.push(-m.ln());
        }
    }
    let s = -est.mean.re.ln();
    let stderr = if boots.len() > 1 {
        let bm = boots.iter().sum::<f64>() / boots.len() as f64;
        (boots.iter().map(|b| (b - bm).powi(2)).sum::<f64>() / (boots.len() - 1) as f64).sqrt()
    } else {
        f64::INFINITY
    };
    // Blocking catches autocorrelation the pair bootstrap ignores.
    let delta = est.stderr / est.mean.re;
    Ok(Estimate { mean: C64::new(s, 0.0), stderr: stderr.max(delta), n_samples: n, n_chains, tau: est.tau })
}
