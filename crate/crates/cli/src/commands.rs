//! The `evolve`, `entropy`, `benchmark`, `noise` and `lattice` subcommands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ruby_qsl::ansatz::{Ansatz, AnyAnsatz, Checkpoint, Family, C64};
use ruby_qsl::exact::{evolve_exact, fidelity, ExactSystem, FitOptions, FullSum, RestrictedBasis};
use ruby_qsl::hamiltonian::{RydbergModel, RydbergParams, Schedule};
use ruby_qsl::lattice::{distance_classes, make_tripartition, tripartition_with, RubyLattice, Tripartition};
use ruby_qsl::noise::{noisy_observables, TrajectorySetup};
use ruby_qsl::observables::{compile, expect_exact, expect_sampled, tee_exact, tee_sampled, BasisState, Compiled, Observable, TeeReport};
use ruby_qsl::sampler::{estimate_values, SampleSet, Sampler, SamplerConfig};
use ruby_qsl::tdvp::{integrate, local_energies, FullSumRhs, MeanField, MfState, SampledRhs, StepInfo};
use serde_json::json;

use crate::config::{Engine, RunConfig, Scheme, Variant};
use crate::output::{checkpoint_name, read_csv, write_csv, Manifest, Row};
use crate::{CliError, StageContext};

const EPS: f64 = 1e-9;

/// Observables requested by name; `None` stands for the energy.
pub struct ObsList {
    pub names: Vec<String>,
    compiled: Vec<Option<Compiled>>,
}

impl ObsList {
    pub fn new(lat: &RubyLattice, names: &[String]) -> Result<Self, CliError> {
        let compiled = names
            .iter()
            .map(|n| {
                if n == "energy" {
                    return Ok(None);
                }
                let o: Observable = n.parse().map_err(CliError::config)?;
                compile(lat, &o).map(Some).map_err(CliError::config)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { names: names.to_vec(), compiled })
    }

    /// Exact expectation values, `NaN` where a ratio is undefined.
    pub fn exact(&self, lat: &RubyLattice, basis: &RestrictedBasis, psi: &[C64], energy: impl Fn(&[C64]) -> f64) -> Result<Vec<f64>, CliError> {
        let st = BasisState { basis, psi };
        self.compiled
            .iter()
            .map(|c| match c {
                None => Ok(energy(psi)),
                Some(c) => defined(expect_exact(lat, &st, c).map(|z| z.re)),
            })
            .collect()
    }

    /// Monte Carlo estimates `(mean, stderr)`.
    pub fn sampled(&self, a: &AnyAnsatz, lat: &RubyLattice, set: &SampleSet, model: &RydbergModel, fields: (f64, f64)) -> Result<Vec<(f64, f64)>, CliError> {
        self.compiled
            .iter()
            .map(|c| {
                let est = match c {
                    None => {
                        let e = local_energies(a, model, set, fields.0, fields.1)?;
                        estimate_values(&e, set.n_chains)
                    }
                    Some(c) => expect_sampled(a, lat, set, c),
                };
                match est {
                    Ok(e) => Ok((e.mean.re, e.stderr)),
                    Err(ruby_qsl::Error::Undefined(_)) => Ok((f64::NAN, f64::NAN)),
                    Err(e) => Err(e.into()),
                }
            })
            .collect()
    }
}

fn defined(r: ruby_qsl::Result<f64>) -> Result<f64, CliError> {
    match r {
        Ok(x) => Ok(x),
        Err(ruby_qsl::Error::Undefined(_)) => Ok(f64::NAN),
        Err(e) => Err(e.into()),
    }
}

fn push_exact(rows: &mut Vec<Row>, t: f64, names: &[String], suffix: &str, values: &[f64]) {
    for (n, &v) in names.iter().zip(values) {
        rows.push(Row { t, name: format!("{n}{suffix}"), mean: v, stderr: 0.0, n_samples: 0 });
    }
}

/// Shared run context for one configuration.
pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub hash: String,
    pub lat: RubyLattice,
    pub params: RydbergParams,
    pub model: RydbergModel,
}

impl Ctx {
    pub fn new(cfg: RunConfig) -> Result<Self, CliError> {
        let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out").join(&cfg.name));
        let hash = cfg.hash();
        let lat = cfg.lattice.build()?;
        let params = cfg.params(&lat);
        let model = RydbergModel::new(&lat, params, None).map_err(CliError::config)?;
        Ok(Self { cfg, out, hash, lat, params, model })
    }

    fn manifest(&self, command: &str) -> Manifest {
        Manifest::new(command, self.hash.clone(), self.cfg.seed, serde_json::to_value(&self.cfg).unwrap_or_default())
    }

    fn dir(&self, v: &Variant) -> PathBuf {
        match &v.label {
            Some(l) => self.out.join(l),
            None => self.out.clone(),
        }
    }

    fn exact_system(&self) -> Result<ExactSystem, CliError> {
        ExactSystem::new(&self.lat, &self.model, self.cfg.exact.cap).map_err(CliError::config)
    }

    fn obs_list(&self) -> Result<ObsList, CliError> {
        ObsList::new(&self.lat, &self.cfg.observables.names)
    }

    fn label_line(v: &Variant) -> Vec<String> {
        v.label.iter().map(|l| format!("variant: {l}")).collect()
    }
}

/// Exact closed evolution with states handed to `visit` at `times`.
fn exact_run(
    ctx: &Ctx,
    sys: &ExactSystem,
    schedule: &Schedule,
    times: &[f64],
    mut visit: impl FnMut(f64, &[C64]) -> Result<(), CliError>,
) -> Result<serde_json::Value, CliError> {
    let mut psi = sys.ground_state_vector();
    let mut err = None;
    let report = evolve_exact(sys, &mut psi, schedule, 0.0, schedule.total(), ctx.cfg.exact.dt_us, times, |t, p| {
        visit(t, p).map_err(|e| {
            let msg = e.to_string();
            err = Some(e);
            ruby_qsl::Error::Numerical(msg)
        })
    });
    if let Some(e) = err {
        return Err(e);
    }
    let report = report.stage("exact evolution")?;
    Ok(serde_json::to_value(report).unwrap_or_default())
}

/// Variational run: mean-field stage up to the handoff, then TDVP.
struct Variational<'a> {
    ctx: &'a Ctx,
    schedule: &'a Schedule,
    family: Family,
    engine: Engine,
    full: Option<(&'a FullSum, &'a ExactSystem)>,
    sampler_seed: u64,
}

impl Variational<'_> {
    fn handoff(&self) -> f64 {
        self.ctx.cfg.ansatz.handoff_fraction * self.schedule.total()
    }

    /// Product state at the listed times before the handoff, and at the handoff.
    fn mean_field(&self, times: &[f64]) -> Result<(Vec<(f64, AnyAnsatz)>, AnyAnsatz), CliError> {
        let cfg = &self.ctx.cfg;
        let t_star = self.handoff();
        let mf = MeanField::new(&self.ctx.lat, &self.ctx.params, None).stage("mean-field setup")?;
        let to_ansatz = |s: &MfState| AnyAnsatz::lift(s.to_jmf(&self.ctx.lat, cfg.ansatz.log_floor), self.family);
        let mut s = MfState::ground(self.ctx.lat.n_sites());
        let mut t = 0.0;
        let mut out = Vec::new();
        let mut stops: Vec<f64> = times.iter().copied().filter(|&x| x < t_star - EPS).collect();
        stops.push(t_star);
        for &stop in &stops {
            let n = ((stop - t) / cfg.ansatz.mf_dt_us - 1e-9).ceil().max(0.0) as usize;
            let h = if n > 0 { (stop - t) / n as f64 } else { 0.0 };
            for k in 0..n {
                mf.step(&mut s, self.schedule, t + k as f64 * h, h).stage("mean-field stage")?;
            }
            t = stop;
            if stop < t_star - EPS {
                out.push((stop, to_ansatz(&s).stage("handoff")?));
            }
        }
        Ok((out, to_ansatz(&s).stage("handoff")?))
    }

    /// Visit the state at each of `times`; returns stage diagnostics.
    fn run(&self, times: &[f64], mut visit: impl FnMut(f64, &AnyAnsatz, Option<&StepInfo>) -> Result<(), CliError>) -> Result<serde_json::Value, CliError> {
        let cfg = &self.ctx.cfg;
        let t_star = self.handoff();
        let total = self.schedule.total();
        let (early, mut a) = self.mean_field(times)?;
        for (t, s) in &early {
            visit(*t, s, None)?;
        }
        let late: Vec<f64> = times.iter().copied().filter(|&x| x >= t_star - EPS).map(|x| x.max(t_star)).collect();
        let icfg = cfg.integrator.integrator();
        let reg = cfg.integrator.regularization();
        let mut err = None;
        let mut infos = Vec::new();
        let mut cb = |t: f64, a: &AnyAnsatz, info: &StepInfo| {
            infos.push(json!({ "t": t, "energy": info.energy, "rank": info.rank, "lambda_max": info.lambda_max, "acceptance": info.acceptance }));
            visit(t, a, Some(info)).map_err(|e| {
                let msg = e.to_string();
                err = Some(e);
                ruby_qsl::Error::Numerical(msg)
            })
        };
        let report = match (self.engine, self.full) {
            (Engine::FullSum, Some((full, sys))) => {
                let mut rhs = FullSumRhs { full, sys, schedule: self.schedule, reg };
                integrate(&mut a, &mut rhs, t_star, total, &icfg, &late, &mut cb)
            }
            (Engine::Tvmc, _) => {
                let scfg = SamplerConfig { seed: self.sampler_seed, ..cfg.sampler.clone() };
                let mut sampler = Sampler::new(&self.ctx.lat, scfg).stage("sampler setup")?;
                sampler.reset(&a, None).stage("sampler setup")?;
                sampler.run(&a, cfg.sampler.n_burnin).stage("sampler burn-in")?;
                let mut rhs = SampledRhs { sampler, model: &self.ctx.model, schedule: self.schedule, reg, burnin: cfg.integrator.burnin_sweeps };
                integrate(&mut a, &mut rhs, t_star, total, &icfg, &late, &mut cb)
            }
            _ => return Err(CliError::Config("full-sum engine needs an exact-size lattice".into())),
        };
        drop(cb);
        if let Some(e) = err {
            return Err(e);
        }
        let report = report.stage("tdvp integration")?;
        Ok(json!({ "handoff_us": t_star, "steps": report.steps, "observations": infos }))
    }
}

/// Measurement of a variational state, by full sum or by sampling.
enum Meter<'a> {
    Full { full: &'a FullSum, sys: &'a ExactSystem },
    Sampled(Sampler),
}

impl Meter<'_> {
    fn rows(&mut self, ctx: &Ctx, list: &ObsList, schedule: &Schedule, t: f64, a: &AnyAnsatz) -> Result<Vec<Row>, CliError> {
        let (omega, delta) = schedule.eval(t)?;
        let mut rows = Vec::new();
        match self {
            Meter::Full { full, sys } => {
                let psi = full.state(a.params());
                let v = list.exact(&ctx.lat, &full.basis, &psi, |p| sys.energy(p, omega, delta))?;
                push_exact(&mut rows, t, &list.names, "", &v);
            }
            Meter::Sampled(sampler) => {
                if sampler.chains().is_empty() || sampler.chains()[0].spins.is_empty() {
                    sampler.reset(a, None)?;
                }
                let set = sampler.run(a, ctx.cfg.sampler.n_burnin).stage("measurement sampling")?;
                for (n, (m, e)) in list.names.iter().zip(list.sampled(a, &ctx.lat, &set, &ctx.model, (omega, delta))?) {
                    rows.push(Row { t, name: n.clone(), mean: m, stderr: e, n_samples: set.len() });
                }
            }
        }
        Ok(rows)
    }
}

fn merged_times(a: &[f64], b: &[f64], total: f64) -> Vec<f64> {
    let mut t: Vec<f64> = a.iter().chain(b).copied().filter(|&x| x >= 0.0 && x <= total + EPS).map(|x| x.min(total)).collect();
    t.sort_by(f64::total_cmp);
    t.dedup_by(|x, y| (*x - *y).abs() < EPS);
    t
}

fn contains(ts: &[f64], t: f64) -> bool {
    ts.iter().any(|&x| (x - t).abs() < EPS)
}

/// `evolve`: observables along the protocol for every variant.
pub fn evolve(ctx: &Ctx) -> Result<Vec<PathBuf>, CliError> {
    let mut manifest = ctx.manifest("evolve");
    let list = ctx.obs_list()?;
    let n_classes = distance_classes(&ctx.lat).n_classes();
    let mut outputs = Vec::new();
    let need_exact = ctx.cfg.engine != Engine::Tvmc;
    let sys = if need_exact { Some(ctx.exact_system()?) } else { None };
    let full = match (ctx.cfg.engine, &sys) {
        (Engine::FullSum, Some(s)) => Some(FullSum::new(s.basis.clone(), &AnyAnsatz::zeros(ctx.cfg.ansatz.family, &ctx.lat)?)),
        _ => None,
    };
    for v in ctx.cfg.variants() {
        let started = Instant::now();
        let schedule = v.schedule.schedule(&ctx.cfg.physics);
        let total = schedule.total();
        let obs_t = ctx.cfg.observables.times(total);
        let ck_t: Vec<f64> = ctx.cfg.checkpoint_times_us.iter().copied().filter(|&t| t <= total + EPS).collect();
        let dir = ctx.dir(&v);
        let mut rows = Vec::new();
        let diag = match ctx.cfg.engine {
            Engine::Exact => {
                let sys = sys.as_ref().expect("exact system");
                exact_run(ctx, sys, &schedule, &obs_t, |t, psi| {
                    let (o, d) = schedule.eval(t)?;
                    let vals = list.exact(&ctx.lat, &sys.basis, psi, |p| sys.energy(p, o, d))?;
                    push_exact(&mut rows, t, &list.names, "", &vals);
                    Ok(())
                })?
            }
            engine => {
                let times = merged_times(&obs_t, &ck_t, total);
                let pair = match (&full, &sys) {
                    (Some(f), Some(s)) => Some((f, s)),
                    _ => None,
                };
                let run = Variational { ctx, schedule: &schedule, family: ctx.cfg.ansatz.family, engine, full: pair, sampler_seed: ctx.cfg.seed };
                let mut meter = match pair {
                    Some((full, sys)) => Meter::Full { full, sys },
                    None => {
                        let scfg = SamplerConfig { seed: ctx.cfg.seed ^ 0x6D65_6173, ..ctx.cfg.sampler.clone() };
                        Meter::Sampled(Sampler::new(&ctx.lat, scfg).stage("sampler setup")?)
                    }
                };
                let ck_dir = dir.join("checkpoints");
                run.run(&times, |t, a, _| {
                    if contains(&obs_t, t) {
                        rows.extend(meter.rows(ctx, &list, &schedule, t, a)?);
                    }
                    if contains(&ck_t, t) {
                        std::fs::create_dir_all(&ck_dir)?;
                        let c = Checkpoint::of(a, n_classes, t);
                        std::fs::write(ck_dir.join(checkpoint_name(t)), c.to_json()?)?;
                    }
                    Ok(())
                })?
            }
        };
        let path = dir.join("observables.csv");
        write_csv(&path, &ctx.hash, &Ctx::label_line(&v), &rows)?;
        outputs.push(path);
        manifest.stage(&format!("evolve {}", v.label.as_deref().unwrap_or("base")), started, diag);
    }
    manifest.outputs = outputs.clone();
    outputs.push(manifest.write(&ctx.out)?);
    Ok(outputs)
}

fn tripartition(ctx: &Ctx) -> Result<Tripartition, CliError> {
    let e = ctx.cfg.entropy.as_ref().ok_or_else(|| CliError::Config("entropy command needs an [entropy] section".into()))?;
    match e.radius_a {
        Some(r) => {
            let h = ctx.lat.bulk_hexagons();
            let h = h.first().ok_or_else(|| CliError::Config("no bulk hexagon for the tripartition".into()))?;
            tripartition_with(&ctx.lat, ctx.lat.hexagons[*h].center, r).map_err(CliError::config)
        }
        None => make_tripartition(&ctx.lat).map_err(CliError::config),
    }
}

fn tee_rows(rows: &mut Vec<Row>, t: f64, rep: &TeeReport, n: usize) {
    for e in &rep.entropies {
        rows.push(Row { t, name: format!("S2:{}", e.name), mean: e.mean, stderr: e.stderr, n_samples: n });
    }
    rows.push(Row { t, name: "gamma".into(), mean: rep.gamma, stderr: rep.gamma_stderr, n_samples: n });
    rows.push(Row { t, name: "gamma_ci_lo".into(), mean: rep.gamma_ci.0, stderr: 0.0, n_samples: n });
    rows.push(Row { t, name: "gamma_ci_hi".into(), mean: rep.gamma_ci.1, stderr: 0.0, n_samples: n });
}

/// `entropy`: seven-region Rényi-2 entropies and `γ(t)`.
pub fn entropy(ctx: &Ctx) -> Result<Vec<PathBuf>, CliError> {
    let mut manifest = ctx.manifest("entropy");
    let econf = ctx.cfg.entropy.clone().ok_or_else(|| CliError::Config("entropy command needs an [entropy] section".into()))?;
    let tri = tripartition(ctx)?;
    let mut outputs = Vec::new();
    let mut peaks = Vec::new();
    let sys = if ctx.cfg.engine == Engine::Exact { Some(ctx.exact_system()?) } else { None };
    for v in ctx.cfg.variants() {
        let started = Instant::now();
        let schedule = v.schedule.schedule(&ctx.cfg.physics);
        let total = schedule.total();
        let times = merged_times(&econf.times_us, &[], total);
        let dir = ctx.dir(&v);
        let mut rows = Vec::new();
        match &sys {
            Some(sys) => {
                exact_run(ctx, sys, &schedule, &times, |t, psi| {
                    let rep = tee_exact(&BasisState { basis: &sys.basis, psi }, &tri)?;
                    tee_rows(&mut rows, t, &rep, 0);
                    Ok(())
                })?;
            }
            None => {
                let scfg = econf.sampler.clone().unwrap_or_else(|| ctx.cfg.sampler.clone());
                for (k, &t) in times.iter().enumerate() {
                    let path = dir.join("checkpoints").join(checkpoint_name(t));
                    let text = std::fs::read_to_string(&path).map_err(|_| CliError::Runtime(format!("missing checkpoint {}", path.display())))?;
                    let a = Checkpoint::from_json(&text)?.restore(&ctx.lat)?;
                    let mut replicas = Vec::with_capacity(2);
                    for r in 0..2u64 {
                        let seed = ctx.cfg.seed.wrapping_mul(1_000_003).wrapping_add(2 * k as u64 + r);
                        let mut s = Sampler::new(&ctx.lat, SamplerConfig { seed, ..scfg.clone() }).map_err(CliError::config)?;
                        s.reset(&a, None)?;
                        replicas.push(s.run(&a, scfg.n_burnin).stage("replica sampling")?);
                    }
                    let rep = tee_sampled(&a, &tri, &replicas[0], &replicas[1], ctx.cfg.seed ^ k as u64).stage("entropy")?;
                    tee_rows(&mut rows, t, &rep, replicas[0].len());
                }
            }
        }
        if let Some(best) = rows.iter().filter(|r| r.name == "gamma" && r.mean.is_finite()).max_by(|a, b| a.mean.total_cmp(&b.mean)) {
            peaks.push(Row { t: total, name: "gamma_peak".into(), mean: best.mean, stderr: best.stderr, n_samples: best.n_samples });
            peaks.push(Row { t: total, name: "gamma_peak_time".into(), mean: best.t, stderr: 0.0, n_samples: 0 });
        }
        let path = dir.join("tee.csv");
        write_csv(&path, &ctx.hash, &Ctx::label_line(&v), &rows)?;
        outputs.push(path);
        manifest.stage(
            &format!("entropy {}", v.label.as_deref().unwrap_or("base")),
            started,
            json!({ "regions": tri.regions().iter().map(|(n, r)| (n.to_string(), r.len())).collect::<Vec<_>>() }),
        );
    }
    let path = ctx.out.join("tee_peaks.csv");
    write_csv(&path, &ctx.hash, &["t: protocol duration T in microseconds".into()], &peaks)?;
    outputs.push(path);
    manifest.outputs = outputs.clone();
    outputs.push(manifest.write(&ctx.out)?);
    Ok(outputs)
}

fn family_name(f: Family) -> &'static str {
    match f {
        Family::Jmf => "jmf",
        Family::Dense => "dense",
        Family::ThreeBody => "three-body",
    }
}

/// `benchmark`: infidelity against the exact state for every scheme and family.
pub fn benchmark(ctx: &Ctx) -> Result<Vec<PathBuf>, CliError> {
    let mut manifest = ctx.manifest("benchmark");
    let bconf = ctx.cfg.benchmark.clone().ok_or_else(|| CliError::Config("benchmark command needs a [benchmark] section".into()))?;
    let sys = ctx.exact_system()?;
    let list = ctx.obs_list()?;
    let mut outputs = Vec::new();
    for v in ctx.cfg.variants() {
        let schedule = v.schedule.schedule(&ctx.cfg.physics);
        let times = ctx.cfg.observables.times(schedule.total());
        let dir = ctx.dir(&v);
        let mut rows = Vec::new();
        let started = Instant::now();
        let mut exact_states = Vec::with_capacity(times.len());
        let diag = exact_run(ctx, &sys, &schedule, &times, |t, psi| {
            let (o, d) = schedule.eval(t)?;
            let vals = list.exact(&ctx.lat, &sys.basis, psi, |p| sys.energy(p, o, d))?;
            push_exact(&mut rows, t, &list.names, ":exact", &vals);
            exact_states.push(psi.to_vec());
            Ok(())
        })?;
        manifest.stage("exact reference", started, diag);
        let index = |t: f64| times.iter().position(|&x| (x - t).abs() < EPS).expect("observation time");
        for &family in &bconf.families {
            let full = FullSum::new(sys.basis.clone(), &AnyAnsatz::zeros(family, &ctx.lat)?);
            for &scheme in &bconf.schemes {
                let started = Instant::now();
                let tag = format!("{}:{}", scheme.name(), family_name(family));
                let record = |rows: &mut Vec<Row>, t: f64, a: &AnyAnsatz, suffix: &str| -> Result<(), CliError> {
                    let psi = full.state(a.params());
                    let (o, d) = schedule.eval(t)?;
                    let inf = 1.0 - fidelity(&exact_states[index(t)], &psi)?;
                    rows.push(Row { t, name: format!("infidelity:{tag}{suffix}"), mean: inf.max(0.0), stderr: 0.0, n_samples: 0 });
                    let vals = list.exact(&ctx.lat, &full.basis, &psi, |p| sys.energy(p, o, d))?;
                    push_exact(rows, t, &list.names, &format!(":{tag}{suffix}"), &vals);
                    Ok(())
                };
                let diag = match scheme {
                    Scheme::TdvpFullsum => {
                        let run = Variational { ctx, schedule: &schedule, family, engine: Engine::FullSum, full: Some((&full, &sys)), sampler_seed: 0 };
                        run.run(&times, |t, a, _| record(&mut rows, t, a, ""))?
                    }
                    Scheme::Tvmc => {
                        let mut per_seed = Vec::new();
                        let mut diags = Vec::new();
                        for &seed in &bconf.seeds {
                            let mut seed_rows = Vec::new();
                            let run = Variational { ctx, schedule: &schedule, family, engine: Engine::Tvmc, full: None, sampler_seed: seed };
                            let suffix = if bconf.seeds.len() > 1 { format!(":seed={seed}") } else { String::new() };
                            diags.push(run.run(&times, |t, a, _| record(&mut seed_rows, t, a, &suffix))?);
                            per_seed.push(seed_rows);
                        }
                        if per_seed.len() > 1 {
                            // Spread over seeds, row by row.
                            let k = per_seed.len() as f64;
                            for i in 0..per_seed[0].len() {
                                let xs: Vec<f64> = per_seed.iter().map(|r| r[i].mean).collect();
                                let m = xs.iter().sum::<f64>() / k;
                                let se = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt();
                                let name = per_seed[0][i].name.rsplit_once(":seed=").map_or(per_seed[0][i].name.clone(), |(n, _)| n.to_string());
                                rows.push(Row { t: per_seed[0][i].t, name, mean: m, stderr: se, n_samples: per_seed.len() });
                            }
                        }
                        rows.extend(per_seed.into_iter().flatten());
                        json!(diags)
                    }
                    Scheme::FidelityOpt => {
                        let run = Variational { ctx, schedule: &schedule, family, engine: Engine::FullSum, full: Some((&full, &sys)), sampler_seed: 0 };
                        let t_star = run.handoff();
                        let (early, mut a) = run.mean_field(&times)?;
                        for (t, s) in &early {
                            record(&mut rows, *t, s, "")?;
                        }
                        let mut fits = Vec::new();
                        for &t in times.iter().filter(|&&t| t >= t_star - EPS) {
                            let opts = FitOptions { steps: bconf.fit_steps, seed: ctx.cfg.seed, ..FitOptions::default() };
                            let rep = ruby_qsl::exact::optimize_fidelity(&full, &exact_states[index(t)], &mut a, &opts).stage("fidelity optimization")?;
                            fits.push(json!({ "t": t, "steps": rep.steps, "infidelity": rep.infidelity }));
                            record(&mut rows, t, &a, "")?;
                        }
                        json!(fits)
                    }
                };
                manifest.stage(&tag, started, diag);
            }
        }
        rows.sort_by(|a, b| a.t.total_cmp(&b.t).then_with(|| a.name.cmp(&b.name)));
        let path = dir.join("benchmark.csv");
        write_csv(&path, &ctx.hash, &Ctx::label_line(&v), &rows)?;
        outputs.push(path);
    }
    manifest.outputs = outputs.clone();
    outputs.push(manifest.write(&ctx.out)?);
    Ok(outputs)
}

/// `noise`: trajectory-averaged observables of the exact system.
pub fn noise(ctx: &Ctx) -> Result<Vec<PathBuf>, CliError> {
    if ctx.cfg.engine != Engine::Exact {
        return Err(CliError::Config("noise runs need engine = \"exact\"".into()));
    }
    let nconf = ctx.cfg.noise.clone().ok_or_else(|| CliError::Config("noise command needs a [noise] section".into()))?;
    if ctx.cfg.observables.names.iter().any(|n| n == "energy") {
        return Err(CliError::Config("energy is not available in noisy runs".into()));
    }
    let models = nconf.models()?;
    let list = ctx.obs_list()?;
    let mut manifest = ctx.manifest("noise");
    let mut outputs = Vec::new();
    for v in ctx.cfg.variants() {
        let schedule = v.schedule.schedule(&ctx.cfg.physics);
        let times = ctx.cfg.observables.times(schedule.total());
        let dir = ctx.dir(&v);
        let mut rows = Vec::new();
        let mut logs = Vec::new();
        if nconf.reference {
            let started = Instant::now();
            let sys = ctx.exact_system()?;
            let diag = exact_run(ctx, &sys, &schedule, &times, |t, psi| {
                let vals = list.exact(&ctx.lat, &sys.basis, psi, |_| f64::NAN)?;
                push_exact(&mut rows, t, &list.names, ":closed", &vals);
                Ok(())
            })?;
            manifest.stage("closed reference", started, diag);
        }
        let observe = |basis: &RestrictedBasis, _t: f64, psi: &[C64]| -> ruby_qsl::Result<Vec<f64>> {
            list.exact(&ctx.lat, basis, psi, |_| f64::NAN).map_err(|e| ruby_qsl::Error::Numerical(e.to_string()))
        };
        for (label, model) in &models {
            let started = Instant::now();
            let setup = TrajectorySetup {
                lat: &ctx.lat,
                params: ctx.params,
                schedule: &schedule,
                model: *model,
                dt: ctx.cfg.exact.dt_us,
                obs_times: &times,
                psi0: None,
            };
            let series = noisy_observables(&setup, ctx.cfg.seed, &observe).stage(&format!("noise {label}"))?;
            let suffix = if models.len() > 1 { format!(":{label}") } else { String::new() };
            for (i, &t) in series.times.iter().enumerate() {
                for (j, n) in list.names.iter().enumerate() {
                    rows.push(Row { t, name: format!("{n}{suffix}"), mean: series.mean[i][j], stderr: series.stderr[i][j], n_samples: model.n_trajectories });
                }
            }
            let jumps: usize = series.trajectories.iter().map(|t| t.jumps.len()).sum();
            logs.push(
                json!({ "model": label, "trajectories": series.trajectories.iter().map(|t| json!({ "seed": t.seed, "jumps": t.jumps })).collect::<Vec<_>>() }),
            );
            manifest.stage(&format!("noise {label}"), started, json!({ "model": model, "total_jumps": jumps }));
        }
        rows.sort_by(|a, b| a.t.total_cmp(&b.t).then_with(|| a.name.cmp(&b.name)));
        let path = dir.join("noise.csv");
        write_csv(&path, &ctx.hash, &Ctx::label_line(&v), &rows)?;
        outputs.push(path);
        let path = dir.join("jumps.json");
        std::fs::write(&path, serde_json::to_string(&logs).map_err(|e| CliError::Runtime(e.to_string()))?)?;
        outputs.push(path);
    }
    manifest.outputs = outputs.clone();
    outputs.push(manifest.write(&ctx.out)?);
    Ok(outputs)
}

/// `lattice`: geometry dump and a short summary.
pub fn lattice(ctx: &Ctx) -> Result<(Vec<PathBuf>, serde_json::Value), CliError> {
    let lat = &ctx.lat;
    let dim = 4f64.powi(lat.n_triangles() as i32);
    let summary = json!({
        "n_sites": lat.n_sites(),
        "n_triangles": lat.n_triangles(),
        "n_vertices": lat.n_vertices(),
        "n_hexagons": lat.hexagons.len(),
        "n_bulk_hexagons": lat.bulk_hexagons().len(),
        "genus": lat.genus,
        "periodic": lat.periodic,
        "restricted_dim": dim,
        "distance_classes": distance_classes(lat).n_classes(),
    });
    std::fs::create_dir_all(&ctx.out)?;
    let p1 = ctx.out.join("lattice.json");
    std::fs::write(&p1, lat.to_json()?)?;
    let p2 = ctx.out.join("summary.json");
    std::fs::write(&p2, serde_json::to_string_pretty(&summary).map_err(|e| CliError::Runtime(e.to_string()))?)?;
    Ok((vec![p1, p2], summary))
}

/// Load rows from an output directory, for callers and tests.
pub fn load_rows(dir: &Path, file: &str) -> Result<Vec<Row>, CliError> {
    read_csv(&dir.join(file))
}
