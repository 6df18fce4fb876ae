//! Run configuration, read from TOML. Unknown keys are rejected everywhere.
//!
//! Units are part of the key names: times in µs (`*_us`), frequencies as
//! cyclic MHz (`*_mhz`, converted to rad/µs internally), lengths in µm or in
//! units of the lattice spacing `a` (`*_a`).

use std::path::PathBuf;

use ruby_qsl::ansatz::Family;
use ruby_qsl::hamiltonian::{mhz, RydbergParams, Schedule};
use ruby_qsl::lattice::{LatticeSpec, RubyLattice};
use ruby_qsl::linalg::Regularization;
use ruby_qsl::noise::NoiseModel;
use ruby_qsl::sampler::SamplerConfig;
use ruby_qsl::tdvp::{Integrator, IntegratorConfig, LOG_FLOOR, T_STAR_FRACTION};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Engine {
    /// Exact evolution in the restricted basis.
    Exact,
    /// Sampled t-VMC.
    Tvmc,
    /// TDVP with moments summed over the whole basis.
    FullSum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LatticeChoice {
    Preset(String),
    Spec(LatticeSpec),
}

impl LatticeChoice {
    pub fn spec(&self) -> Result<LatticeSpec, CliError> {
        match self {
            Self::Preset(name) => LatticeSpec::preset(name).map_err(CliError::config),
            Self::Spec(s) => Ok(s.clone()),
        }
    }

    pub fn build(&self) -> Result<RubyLattice, CliError> {
        ruby_qsl::lattice::build_lattice(&self.spec()?).map_err(CliError::config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicsConfig {
    pub omega0_mhz: f64,
    /// Blockade radius in units of `a`.
    pub rb_a: f64,
    /// Interaction cutoff in units of `a`; all pairs when absent.
    pub cutoff_a: Option<f64>,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self { omega0_mhz: 1.4, rb_a: 2.4, cutoff_a: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScheduleConfig {
    Ramp {
        total_us: f64,
        #[serde(default = "default_degree")]
        degree: u32,
        #[serde(default = "default_delta_start")]
        delta_start_mhz: f64,
        #[serde(default = "default_delta_end")]
        delta_end_mhz: f64,
    },
    Constant {
        total_us: f64,
        omega_mhz: f64,
        delta_mhz: f64,
    },
}

fn default_degree() -> u32 {
    3
}
fn default_delta_start() -> f64 {
    -8.0
}
fn default_delta_end() -> f64 {
    9.4
}

impl ScheduleConfig {
    pub fn schedule(&self, physics: &PhysicsConfig) -> Schedule {
        match *self {
            Self::Ramp { total_us, degree, delta_start_mhz, delta_end_mhz } => {
                Schedule::Ramp { total_us, omega0: mhz(physics.omega0_mhz), delta_start: mhz(delta_start_mhz), delta_end: mhz(delta_end_mhz), degree }
            }
            Self::Constant { total_us, omega_mhz, delta_mhz } => Schedule::Constant { total_us, omega: mhz(omega_mhz), delta: mhz(delta_mhz) },
        }
    }

    pub fn total_us(&self) -> f64 {
        match *self {
            Self::Ramp { total_us, .. } | Self::Constant { total_us, .. } => total_us,
        }
    }

    fn with(&self, total: Option<f64>, degree: Option<u32>) -> Self {
        let mut s = self.clone();
        match &mut s {
            Self::Ramp { total_us, degree: d, .. } => {
                if let Some(t) = total {
                    *total_us = t;
                }
                if let Some(n) = degree {
                    *d = n;
                }
            }
            Self::Constant { total_us, .. } => {
                if let Some(t) = total {
                    *total_us = t;
                }
            }
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnsatzConfig {
    pub family: Family,
    /// Mean-field handoff time as a fraction of the protocol duration.
    pub handoff_fraction: f64,
    pub log_floor: f64,
    pub mf_dt_us: f64,
}

impl Default for AnsatzConfig {
    fn default() -> Self {
        Self { family: Family::Jmf, handoff_fraction: T_STAR_FRACTION, log_floor: LOG_FLOOR, mf_dt_us: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorSettings {
    pub dt_us: f64,
    pub method: Integrator,
    pub diag_shift: f64,
    pub pinv_cutoff: f64,
    /// Sweeps discarded at every right-hand-side evaluation.
    pub burnin_sweeps: usize,
}

impl Default for IntegratorSettings {
    fn default() -> Self {
        let r = Regularization::default();
        Self { dt_us: 1e-3, method: Integrator::Rk4, diag_shift: r.diag_shift, pinv_cutoff: r.pinv_cutoff, burnin_sweeps: 2 }
    }
}

impl IntegratorSettings {
    pub fn integrator(&self) -> IntegratorConfig {
        IntegratorConfig { dt: self.dt_us, method: self.method }
    }

    pub fn regularization(&self) -> Regularization {
        Regularization { diag_shift: self.diag_shift, pinv_cutoff: self.pinv_cutoff }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExactConfig {
    pub dt_us: f64,
    /// Largest basis the exact engine accepts.
    pub cap: usize,
}

impl Default for ExactConfig {
    fn default() -> Self {
        Self { dt_us: 1e-4, cap: ruby_qsl::exact::DEFAULT_CAP }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservablesConfig {
    pub names: Vec<String>,
    /// Spacing of the observation grid from 0 to T.
    #[serde(default)]
    pub every_us: Option<f64>,
    /// Explicit observation times; merged with the grid.
    #[serde(default)]
    pub times_us: Vec<f64>,
}

impl Default for ObservablesConfig {
    fn default() -> Self {
        Self { names: vec!["density".into(), "P:hexagon".into(), "Q:hexagon".into()], every_us: Some(0.1), times_us: Vec::new() }
    }
}

impl ObservablesConfig {
    pub fn times(&self, total: f64) -> Vec<f64> {
        let mut t: Vec<f64> = self.times_us.iter().copied().filter(|&x| x >= 0.0 && x <= total + 1e-12).collect();
        if let Some(dt) = self.every_us {
            let n = (total / dt + 1e-9).floor() as usize;
            t.extend((0..=n).map(|k| (k as f64 * dt).min(total)));
            if (n as f64 * dt - total).abs() > 1e-9 {
                t.push(total);
            }
        }
        t.sort_by(f64::total_cmp);
        t.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// `none`, `paper-exp`, `sweep:<channel>` or `custom`.
    pub preset: String,
    #[serde(default)]
    pub model: Option<NoiseModel>,
    #[serde(default)]
    pub n_trajectories: Option<usize>,
    /// Also run the closed system and write it next to the noisy series.
    #[serde(default = "yes")]
    pub reference: bool,
}

fn yes() -> bool {
    true
}

impl NoiseConfig {
    /// Labelled models to run.
    pub fn models(&self) -> Result<Vec<(String, NoiseModel)>, CliError> {
        let mut v: Vec<(String, NoiseModel)> = if self.preset.starts_with("sweep:") {
            let ch: ruby_qsl::noise::Channel = self.preset["sweep:".len()..].parse().map_err(CliError::config)?;
            NoiseModel::sweep(&self.preset).map_err(CliError::config)?.into_iter().map(|m| (format!("kappa={:.6}", m.rate(ch)), m)).collect()
        } else if self.preset == "custom" {
            let m = self.model.ok_or_else(|| CliError::Config("noise preset 'custom' needs [noise.model]".into()))?;
            vec![("custom".into(), m)]
        } else {
            vec![(self.preset.clone(), NoiseModel::preset(&self.preset).map_err(CliError::config)?)]
        };
        for (_, m) in &mut v {
            if let Some(n) = self.n_trajectories {
                m.n_trajectories = n;
            }
            m.validate().map_err(CliError::config)?;
        }
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntropyConfig {
    pub times_us: Vec<f64>,
    /// Replica sampler budget; defaults to the main sampler settings.
    #[serde(default)]
    pub sampler: Option<SamplerConfig>,
    /// Disk radius of the tripartition in units of `a`; automatic when absent.
    #[serde(default)]
    pub radius_a: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Tvmc,
    TdvpFullsum,
    FidelityOpt,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Tvmc => "tvmc",
            Scheme::TdvpFullsum => "tdvp-fullsum",
            Scheme::FidelityOpt => "fidelity-opt",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub schemes: Vec<Scheme>,
    pub families: Vec<Family>,
    /// Sampler seeds for the sampled scheme; one run each.
    #[serde(default = "one_seed")]
    pub seeds: Vec<u64>,
    #[serde(default = "fit_steps")]
    pub fit_steps: usize,
}

fn one_seed() -> Vec<u64> {
    vec![0]
}
fn fit_steps() -> usize {
    200
}

/// Variants of the base protocol, one output subdirectory each.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub total_us: Vec<f64>,
    #[serde(default)]
    pub degree: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub engine: Engine,
    pub lattice: LatticeChoice,
    #[serde(default)]
    pub physics: PhysicsConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub ansatz: AnsatzConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub integrator: IntegratorSettings,
    #[serde(default)]
    pub exact: ExactConfig,
    #[serde(default)]
    pub observables: ObservablesConfig,
    /// Parameter checkpoints are written at these times.
    #[serde(default)]
    pub checkpoint_times_us: Vec<f64>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub noise: Option<NoiseConfig>,
    #[serde(default)]
    pub entropy: Option<EntropyConfig>,
    #[serde(default)]
    pub benchmark: Option<BenchmarkConfig>,
}

fn default_name() -> String {
    "run".into()
}

/// Shipped presets, one per reproduced figure dataset.
pub const PRESETS: [(&str, &str); 7] = [
    ("fig3-exact", include_str!("../presets/fig3-exact.toml")),
    ("fig3-tvmc", include_str!("../presets/fig3-tvmc.toml")),
    ("fig4-logical", include_str!("../presets/fig4-logical.toml")),
    ("fig5-tee", include_str!("../presets/fig5-tee.toml")),
    ("figC1-protocols", include_str!("../presets/figC1-protocols.toml")),
    ("figD1-bench", include_str!("../presets/figD1-bench.toml")),
    ("figE1-noise", include_str!("../presets/figE1-noise.toml")),
];

/// A labelled protocol variant.
#[derive(Clone, Debug)]
pub struct Variant {
    pub label: Option<String>,
    pub schedule: ScheduleConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let c: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn preset(name: &str) -> Result<Self, CliError> {
        let text = PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t).ok_or_else(|| CliError::Config(format!("unknown preset '{name}'")))?;
        Self::from_toml(text)
    }

    /// A path, or `preset:<name>`.
    pub fn load(arg: &str) -> Result<Self, CliError> {
        if let Some(name) = arg.strip_prefix("preset:") {
            return Self::preset(name);
        }
        let text = std::fs::read_to_string(arg).map_err(|e| CliError::Config(format!("cannot read {arg}: {e}")))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        for v in self.variants() {
            v.schedule.schedule(&self.physics).validate().map_err(CliError::config)?;
        }
        self.sampler.validate().map_err(CliError::config)?;
        let positive = [
            ("integrator.dt_us", self.integrator.dt_us),
            ("exact.dt_us", self.exact.dt_us),
            ("ansatz.mf_dt_us", self.ansatz.mf_dt_us),
            ("physics.rb_a", self.physics.rb_a),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CliError::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.ansatz.handoff_fraction) {
            return Err(CliError::Config("ansatz.handoff_fraction must lie in [0, 1)".into()));
        }
        if let Some(dt) = self.observables.every_us {
            if !(dt > 0.0) {
                return Err(CliError::Config("observables.every_us must be positive".into()));
            }
        }
        for n in &self.observables.names {
            if n != "energy" {
                n.parse::<ruby_qsl::observables::Observable>().map_err(CliError::config)?;
            }
        }
        if let Some(noise) = &self.noise {
            noise.models()?;
        }
        if let Some(b) = &self.benchmark {
            if b.schemes.is_empty() || b.families.is_empty() || b.seeds.is_empty() {
                return Err(CliError::Config("benchmark needs schemes, families and seeds".into()));
            }
        }
        if let Some(t) = self.threads {
            if t == 0 {
                return Err(CliError::Config("threads must be at least 1".into()));
            }
        }
        Ok(())
    }

    pub fn params(&self, lat: &RubyLattice) -> RydbergParams {
        RydbergParams { omega0: mhz(self.physics.omega0_mhz), spacing_um: lat.spec.spacing_um, rb: self.physics.rb_a, cutoff: self.physics.cutoff_a }
    }

    pub fn variants(&self) -> Vec<Variant> {
        let Some(sw) = &self.sweep else {
            return vec![Variant { label: None, schedule: self.schedule.clone() }];
        };
        let totals: Vec<Option<f64>> = if sw.total_us.is_empty() { vec![None] } else { sw.total_us.iter().map(|&t| Some(t)).collect() };
        let degrees: Vec<Option<u32>> = if sw.degree.is_empty() { vec![None] } else { sw.degree.iter().map(|&n| Some(n)).collect() };
        let mut out = Vec::new();
        for &t in &totals {
            for &n in &degrees {
                let s = self.schedule.with(t, n);
                let mut label = Vec::new();
                if let Some(t) = t {
                    label.push(format!("T={t:.2}"));
                }
                if let Some(n) = n {
                    label.push(format!("n={n}"));
                }
                out.push(Variant { label: Some(label.join("_")), schedule: s });
            }
        }
        out
    }

    /// SHA-256 of the canonical JSON form of the effective configuration.
    /// SHA-256 of the configuration without the output directory and thread
    /// count, which do not change results.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        c.threads = None;
        let json = serde_json::to_string(&c).expect("configuration serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
