//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if a gating criterion fails.
//!
//! `cargo test --release -p ruby-qsl --test acceptance -- 3 6` runs a subset.
//! Criterion 11 is a long N=219 run and only executes with
//! `RUBY_QSL_STRETCH=1`; it never gates.

use std::f64::consts::PI;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ruby_qsl::ansatz::*;
use ruby_qsl::exact::*;
use ruby_qsl::hamiltonian::*;
use ruby_qsl::lattice::*;
use ruby_qsl::linalg::{weighted_covariance, Regularization};
use ruby_qsl::noise::*;
use ruby_qsl::observables::*;
use ruby_qsl::sampler::*;
use ruby_qsl::state::*;
use ruby_qsl::tdvp::*;

type Outcome = Result<String, String>;

fn lattice(name: &str) -> RubyLattice {
    build_lattice(&LatticeSpec::preset(name).unwrap()).unwrap()
}

fn check(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn random_restricted(n_tri: usize, rng: &mut ChaCha8Rng) -> Vec<i8> {
    let mut s = vec![1i8; 3 * n_tri];
    for t in 0..n_tri {
        let k: usize = rng.gen_range(0..4);
        if k > 0 {
            s[3 * t + k - 1] = -1;
        }
    }
    s
}

fn randomize(a: &mut impl Ansatz, scale: f64, rng: &mut ChaCha8Rng) {
    let p: Vec<C64> = (0..a.n_params()).map(|_| C64::new(rng.gen_range(-scale..scale), rng.gen_range(-PI..PI))).collect();
    a.set_params(&p);
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

fn c1() -> Outcome {
    let lat = lattice("torus-24");
    let d = restricted_dimension(&lat);
    let b = RestrictedBasis::new(&lat, DEFAULT_CAP).map_err(err)?.dim();
    check(d == Some(65536) && b == 65536, format!("N = {}, dimension {b}", lat.n_sites()))
}

// ---------------------------------------------------------------- 2

fn c2() -> Outcome {
    let lat = lattice("torus-12");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for fam in [Family::Jmf, Family::Dense, Family::ThreeBody] {
        let mut a = AnyAnsatz::zeros(fam, &lat).map_err(err)?;
        for _ in 0..100 {
            randomize(&mut a, 0.5, &mut rng);
            let s = random_restricted(lat.n_triangles(), &mut rng);
            let d = a.log_derivatives(&s);
            let theta = a.params().to_vec();
            let h = 1e-5;
            let mut fd = Vec::with_capacity(theta.len());
            for k in 0..theta.len() {
                let mut p = theta.clone();
                p[k] += h;
                a.set_params(&p);
                let up = a.log_amplitude(&s);
                p[k] -= 2.0 * h;
                a.set_params(&p);
                let dn = a.log_amplitude(&s);
                fd.push((up - dn) / (2.0 * h));
            }
            a.set_params(&theta);
            let num: f64 = d.iter().zip(&fd).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt();
            let den: f64 = d.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt().max(1.0);
            worst = worst.max(num / den);
        }
    }
    check(worst < 1e-6, format!("300 pairs over 3 families, worst relative error {worst:.2e}"))
}

// ---------------------------------------------------------------- 3

fn c3() -> Outcome {
    let lat = lattice("torus-12");
    let model = RydbergModel::new(&lat, RydbergParams::default(), None).map_err(err)?;
    let sys = ExactSystem::new(&lat, &model, DEFAULT_CAP).map_err(err)?;
    let basis = RestrictedBasis::new(&lat, DEFAULT_CAP).map_err(err)?;
    let cn = compile(&lat, &Observable::Density).map_err(err)?;
    let cp = compile(&lat, &Observable::VertexP).map_err(err)?;
    let (om, de) = (mhz(1.4), mhz(2.0));
    let reps = 100;
    // Within-3σ counts for n, P, H and pooled counts for S and C.
    let mut hits = [0usize; 5];
    let mut totals = [0usize; 5];
    for r in 0..reps {
        // Each seed draws its own state and its own chains. Moderate amplitudes
        // keep every pair of features populated; entries of S driven by a
        // handful of joint events are Poisson, not Gaussian.
        let mut rng = ChaCha8Rng::seed_from_u64(300 + r as u64);
        let mut a = JmfParams::for_lattice(&lat);
        randomize(&mut a, C3_AMPLITUDE, &mut rng);
        let full = FullSum::new(basis.clone(), &a);
        let psi = full.state(a.params());
        let st = BasisState { basis: &basis, psi: &psi };
        let n0 = expect_exact(&lat, &st, &cn).map_err(err)?.re;
        let p0 = expect_exact(&lat, &st, &cp).map_err(err)?.re;
        let (s0, c0, e0) = full_sum_moments(&full, &sys, a.params(), om, de);
        let cfg = SamplerConfig { n_chains: 8, n_samples: 1000, n_burnin: 200, thin: 1, loop_fraction: 0.25, seed: 1000 + r as u64 };
        let set = Sampler::new(&lat, cfg).map_err(err)?.run(&a, 0).map_err(err)?;
        let within = |x: f64, y: f64, s: f64| (x - y).abs() <= 3.0 * s + 1e-12;
        let n = expect_sampled(&a, &lat, &set, &cn).map_err(err)?;
        let p = expect_sampled(&a, &lat, &set, &cp).map_err(err)?;
        let m = sampled_moments(&a, &model, &set, om, de).map_err(err)?;
        for (k, ok) in [within(n.mean.re, n0, n.stderr), within(p.mean.re, p0, p.stderr), within(m.energy.mean.re, e0, m.energy.stderr)].into_iter().enumerate()
        {
            hits[k] += ok as usize;
            totals[k] += 1;
        }
        for i in 0..s0.s.nrows() {
            for j in 0..s0.s.ncols() {
                hits[3] += within(m.qgt.s[(i, j)], s0.s[(i, j)], m.s_err[(i, j)]) as usize;
                totals[3] += 1;
            }
            hits[4] += ((m.forces.c[i] - c0.c[i]).norm() <= 3.0 * m.c_err[i] + 1e-12) as usize;
            totals[4] += 1;
        }
    }
    let frac: Vec<f64> = hits.iter().zip(&totals).map(|(&h, &t)| h as f64 / t as f64).collect();
    let msg = format!("within 3σ over {reps} seeds: n {:.2}, P {:.2}, H {:.2}, S_ij {:.3}, C_i {:.3}", frac[0], frac[1], frac[2], frac[3], frac[4]);
    check(frac.iter().all(|&f| f >= 0.95), msg)
}

const C3_AMPLITUDE: f64 = 0.15;

// ---------------------------------------------------------------- 4

fn c4() -> Outcome {
    let lat = lattice("torus-12");
    let basis = RestrictedBasis::new(&lat, DEFAULT_CAP).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut herm: f64 = 0.0;
    let mut lib_gap: f64 = 0.0;
    let mut min_eig = f64::INFINITY;
    for seed in 0..5 {
        let mut a = JmfParams::for_lattice(&lat);
        randomize(&mut a, 0.4, &mut rng);
        let cfg = SamplerConfig { n_chains: 4, n_samples: 500, seed, ..Default::default() };
        let set = Sampler::new(&lat, cfg).map_err(err)?.run(&a, 50).map_err(err)?;
        // Independent complex form S_kl = E[O_k* O_l] − E[O_k]* E[O_l].
        let m = set.len();
        let np = a.n_params();
        let mut o = DMatrix::<C64>::zeros(np, m);
        for k in 0..m {
            for (i, v) in a.log_derivatives(set.sample(k)).into_iter().enumerate() {
                o[(i, k)] = v;
            }
        }
        let mean = o.column_mean();
        let sc = (&o * o.adjoint()) / C64::new(m as f64, 0.0) - &mean.conjugate() * mean.transpose();
        let sc = sc.conjugate();
        herm = herm.max((&sc - sc.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max));
        let f = sample_features(&a, &set);
        let eloc = vec![C64::new(0.0, 0.0); m];
        // One sample per block reduces the bias correction to m/(m − 1).
        let (q, _, _) = estimate_qgt_forces(&f, &eloc, m);
        let sc = &sc * C64::new(m as f64 / (m - 1) as f64, 0.0);
        lib_gap = lib_gap.max((q.complex() - &sc).iter().map(|z| z.norm()).fold(0.0, f64::max));
        min_eig = min_eig.min(q.min_eigenvalue());
        let full = FullSum::new(basis.clone(), &a);
        let p: Vec<f64> = full.state(a.params()).iter().map(|z| z.norm_sqr()).collect();
        min_eig = min_eig.min(full.covariance(&p).symmetric_eigen().eigenvalues.min());
    }
    // Zero Jastrow in the restricted space: blocks per triangle.
    let mut a = JmfParams::for_lattice(&lat);
    randomize(&mut a, 0.4, &mut rng);
    a.set_jastrow(&vec![C64::new(0.0, 0.0); a.n_classes()]);
    let full = FullSum::new(basis, &a);
    let p: Vec<f64> = full.state(a.params()).iter().map(|z| z.norm_sqr()).collect();
    let s = full.covariance(&p);
    let mut off_tri: f64 = 0.0;
    for i in 0..2 * lat.n_sites() {
        for j in 0..2 * lat.n_sites() {
            if lat.triangle_of(i / 2) != lat.triangle_of(j / 2) {
                off_tri = off_tri.max(s[(i, j)].abs());
            }
        }
    }
    // Unconstrained product state: 2×2 blocks per site.
    let z: Vec<C64> = (0..lat.n_sites()).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
    let prod = ProductState::new(lat.n_sites(), z);
    let off_site = prod.one_hot_qgt_off_block();
    let msg = format!(
        "hermiticity {herm:.1e}, library vs complex form {lib_gap:.1e}, min eigenvalue {min_eig:.1e}, cross-triangle {off_tri:.1e}, cross-site (product) {off_site:.1e}"
    );
    check(herm < 1e-12 && lib_gap < 1e-10 && min_eig >= -1e-10 && off_tri < 1e-12 && off_site < 1e-12, msg)
}

// ---------------------------------------------------------------- shared N=24 exact run

struct Exact24 {
    lat: RubyLattice,
    sys: ExactSystem,
    basis: RestrictedBasis,
    times: Vec<f64>,
    states: Vec<Vec<C64>>,
    report: EvolveReport,
}

fn exact24() -> &'static Exact24 {
    static CELL: OnceLock<Exact24> = OnceLock::new();
    CELL.get_or_init(|| {
        let t0 = Instant::now();
        let lat = lattice("torus-24");
        let model = RydbergModel::new(&lat, RydbergParams::default(), None).unwrap();
        let sys = ExactSystem::new(&lat, &model, DEFAULT_CAP).unwrap();
        let basis = RestrictedBasis::new(&lat, DEFAULT_CAP).unwrap();
        let times: Vec<f64> = (0..=25).map(|k| k as f64 * 0.1).collect();
        let mut psi = sys.ground_state_vector();
        let mut states = Vec::new();
        let report = evolve_exact(&sys, &mut psi, &Schedule::protocol(2.5), 0.0, 2.5, 1e-4, &times, |_, p| {
            states.push(p.to_vec());
            Ok(())
        })
        .unwrap();
        eprintln!("  (exact N=24 protocol in {:.0} s)", t0.elapsed().as_secs_f64());
        Exact24 { lat, sys, basis, times, states, report }
    })
}

// ---------------------------------------------------------------- 5

fn c5() -> Outcome {
    let lat = lattice("torus-12");
    let params = RydbergParams::default();
    let model = RydbergModel::new(&lat, params, None).map_err(err)?;
    let sys = ExactSystem::new(&lat, &model, DEFAULT_CAP).map_err(err)?;
    let basis = RestrictedBasis::new(&lat, DEFAULT_CAP).map_err(err)?;
    let protocol = Schedule::protocol(2.5);
    // Follow the protocol to T/2 (mean field, then full-sum TDVP) and freeze
    // the fields there.
    let mf = MeanField::new(&lat, &params, None).map_err(err)?;
    let s = mf_bootstrap(&mf, &protocol, 0.2, 1e-4, |_, _| Ok(())).map_err(err)?;
    let mut a = s.to_jmf(&lat, LOG_FLOOR);
    let full = FullSum::new(basis, &a);
    let step = IntegratorConfig { dt: 1e-3, method: Integrator::Rk4 };
    let mut rhs = FullSumRhs { full: &full, sys: &sys, schedule: &protocol, reg: Regularization::default() };
    integrate(&mut a, &mut rhs, 0.2, 1.25, &step, &[], |_, _, _| Ok(())).map_err(err)?;
    let (om, de) = protocol.eval(1.25).map_err(err)?;
    let frozen = Schedule::Constant { total_us: 0.5, omega: om, delta: de };
    let energy = |a: &JmfParams| sys.energy(&full.state(a.params()), om, de);
    let e0 = energy(&a);
    let cfg = SamplerConfig { n_chains: 8, n_samples: 1000, n_burnin: 0, thin: 1, loop_fraction: 0.25, seed: 5 };
    let mut sampler = Sampler::new(&lat, cfg).map_err(err)?;
    sampler.reset(&a, None).map_err(err)?;
    sampler.run(&a, 200).map_err(err)?;
    let mut rhs = SampledRhs { sampler, model: &model, schedule: &frozen, reg: Regularization::default(), burnin: 2 };
    let obs: Vec<f64> = (1..=10).map(|k| k as f64 * 0.05).collect();
    let mut drift: f64 = 0.0;
    integrate(&mut a, &mut rhs, 0.0, 0.5, &step, &obs, |_, a, _| {
        drift = drift.max((energy(a) - e0).abs() / e0.abs());
        Ok(())
    })
    .map_err(err)?;
    // Exact evolver over the full protocol.
    let mut psi = sys.ground_state_vector();
    let rep12 = evolve_exact(&sys, &mut psi, &protocol, 0.0, 2.5, 1e-4, &[], |_, _| Ok(())).map_err(err)?;
    let rep24 = &exact24().report;
    let msg = format!("t-VMC relative energy drift {drift:.1e} (E0 = {e0:.3}); exact norm drift N=12 {:.1e}, N=24 {:.1e}", rep12.norm_drift, rep24.norm_drift);
    check(drift < 1e-3 && rep12.norm_drift < 1e-6 && rep24.norm_drift < 1e-6, msg)
}

// ---------------------------------------------------------------- 6

struct Track {
    p: Vec<f64>,
    q: Vec<f64>,
    infid: Vec<f64>,
}

fn c6() -> Outcome {
    let ex = exact24();
    let lat = &ex.lat;
    let params = RydbergParams::default();
    let model = RydbergModel::new(lat, params, None).map_err(err)?;
    let sched = Schedule::protocol(2.5);
    let cp = compile(lat, &Observable::HexagonP).map_err(err)?;
    let cq = compile(lat, &Observable::HexagonQ).map_err(err)?;
    let measure = |psi: &[C64]| -> ruby_qsl::Result<(f64, f64)> {
        let st = BasisState { basis: &ex.basis, psi };
        Ok((expect_exact(lat, &st, &cp)?.re, expect_exact(lat, &st, &cq)?.re))
    };
    let exact_pq: Vec<(f64, f64)> = ex.states.iter().map(|s| measure(s)).collect::<ruby_qsl::Result<_>>().map_err(err)?;

    let t_star = T_STAR_FRACTION * 2.5;
    let mf = MeanField::new(lat, &params, None).map_err(err)?;
    let template = JmfParams::for_lattice(lat);
    let full = FullSum::new(ex.basis.clone(), &template);
    let mut early: Vec<(usize, JmfParams)> = Vec::new();
    let s = mf_bootstrap(&mf, &sched, t_star, 1e-4, |t, s| {
        if let Some(k) = ex.times.iter().position(|&o| (o - t).abs() < 1e-9 && o < t_star - 1e-9) {
            early.push((k, s.to_jmf(lat, LOG_FLOOR)));
        }
        Ok(())
    })
    .map_err(err)?;
    let a0 = s.to_jmf(lat, LOG_FLOOR);
    let later: Vec<f64> = ex.times.iter().copied().filter(|&t| t >= t_star - 1e-9).collect();
    let cfg = IntegratorConfig { dt: 1e-3, method: Integrator::Rk4 };
    let reg = Regularization::default();

    let run = |sampled: bool| -> Result<(Track, f64), String> {
        let t0 = Instant::now();
        let mut tr = Track { p: vec![0.0; ex.times.len()], q: vec![0.0; ex.times.len()], infid: vec![0.0; ex.times.len()] };
        let mut record = |k: usize, a: &JmfParams| -> ruby_qsl::Result<()> {
            let st = full.state(a.params());
            let (p, q) = measure(&st)?;
            tr.p[k] = p;
            tr.q[k] = q;
            tr.infid[k] = 1.0 - fidelity(&ex.states[k], &st)?;
            Ok(())
        };
        for (k, a) in &early {
            record(*k, a).map_err(err)?;
        }
        let mut a = a0.clone();
        let index = |t: f64| ex.times.iter().position(|&o| (o - t).abs() < 1e-9).unwrap();
        if sampled {
            let scfg = SamplerConfig { n_chains: 8, n_samples: 1024, n_burnin: 0, thin: 1, loop_fraction: 0.25, seed: 6 };
            let mut sampler = Sampler::new(lat, scfg).map_err(err)?;
            sampler.reset(&a, None).map_err(err)?;
            sampler.run(&a, 200).map_err(err)?;
            let mut rhs = SampledRhs { sampler, model: &model, schedule: &sched, reg, burnin: 2 };
            integrate(&mut a, &mut rhs, t_star, 2.5, &cfg, &later, |t, a, _| record(index(t), a)).map_err(err)?;
        } else {
            let mut rhs = FullSumRhs { full: &full, sys: &ex.sys, schedule: &sched, reg };
            integrate(&mut a, &mut rhs, t_star, 2.5, &cfg, &later, |t, a, _| record(index(t), a)).map_err(err)?;
        }
        Ok((tr, t0.elapsed().as_secs_f64()))
    };
    let (fs, fs_time) = run(false)?;
    let (tv, tv_time) = run(true)?;

    let window: Vec<usize> = (0..ex.times.len()).filter(|&k| ex.times[k] <= 2.0 + 1e-9).collect();
    let dev = |f: fn(&(f64, f64)) -> f64, v: &[f64]| window.iter().map(|&k| (v[k] - f(&exact_pq[k])).abs()).fold(0.0, f64::max);
    let dp = dev(|x| x.0, &tv.p);
    let dq = dev(|x| x.1, &tv.q);
    let dp_fs = dev(|x| x.0, &fs.p);
    let dq_fs = dev(|x| x.1, &fs.q);
    let last = ex.times.len() - 1;
    let ratio =
        (0..ex.times.len()).filter(|&k| ex.times[k] >= t_star - 1e-9).map(|k| (tv.infid[k] / fs.infid[k]).max(fs.infid[k] / tv.infid[k])).fold(0.0, f64::max);
    let final_ok = (0.03..=0.8).contains(&tv.infid[last]) && (0.03..=0.8).contains(&fs.infid[last]);
    let msg = format!(
        "t ≤ 2: t-VMC max|ΔP| {dp:.3} max|ΔQ| {dq:.3} (full sum {dp_fs:.3}, {dq_fs:.3}); infidelity at T: t-VMC {:.3}, full sum {:.3}; max infidelity ratio {ratio:.2}; runtimes {tv_time:.0} s / {fs_time:.0} s",
        tv.infid[last], fs.infid[last]
    );
    check(dp < 0.02 && dq < 0.02 && final_ok && ratio <= 2.0, msg)
}

// ---------------------------------------------------------------- 7

fn c7() -> Outcome {
    let lat = lattice("torus-24");
    let a = rvb_limit_params(&lat, -20.0).map_err(err)?;
    let basis = RestrictedBasis::new(&lat, DEFAULT_CAP).map_err(err)?;
    let full = FullSum::new(basis.clone(), &a);
    let psi = full.state(a.params());
    let st = BasisState { basis: &basis, psi: &psi };
    let p = expect_exact(&lat, &st, &compile(&lat, &Observable::HexagonP).map_err(err)?).map_err(err)?.re;
    let q = expect_exact(&lat, &st, &compile(&lat, &Observable::HexagonQ).map_err(err)?).map_err(err)?.re;
    let defect: f64 = (0..basis.dim()).filter(|&i| !classify_vertices(&basis.configuration(i), &lat).is_perfect()).map(|i| psi[i].norm_sqr()).sum();
    let hex = &lat.hexagons[0];
    let hex_sites: Vec<usize> = hex.triangles.iter().flat_map(|&t| lat.triangles[t].sites).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let regions: Vec<(&str, Vec<usize>)> = vec![
        ("one triangle", lat.triangles[0].sites.to_vec()),
        ("one site", vec![0]),
        ("two triangles", lat.triangles[0].sites.iter().chain(&lat.triangles[1].sites).copied().collect()),
        ("hexagon triangles", hex_sites),
        ("half", (0..12).collect()),
    ];
    let cfg = |seed| SamplerConfig { n_chains: 8, n_samples: 4000, n_burnin: 500, thin: 2, loop_fraction: 0.5, seed };
    // Local moves cannot leave the defect-free manifold at this weight, nor
    // reach it from the empty state, so chains start on a perfect covering.
    let start = perfect_coverings(&lat)[0].spins();
    let chains = |seed| -> ruby_qsl::Result<SampleSet> {
        let mut s = Sampler::new(&lat, cfg(seed))?;
        s.reset(&a, Some(&start))?;
        s.run(&a, 500)
    };
    let r1 = chains(71).map_err(err)?;
    let r2 = chains(72).map_err(err)?;
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (name, reg) in &regions {
        let ex = exact_renyi2(&basis, &psi, reg).map_err(err)?;
        let est = renyi2(&a, reg, &r1, &r2, 7).map_err(err)?;
        let z = (est.mean.re - ex).abs() / est.stderr.max(1e-300);
        worst = worst.max(z);
        parts.push(format!("{name} {:.3}±{:.3} vs {ex:.3}", est.mean.re, est.stderr));
    }
    let msg = format!("⟨P⟩ {p:.5}, ⟨Q⟩ {q:.5}, defect weight {defect:.1e}; Rényi-2 worst {worst:.1}σ [{}]", parts.join("; "));
    check((p - 1.0).abs() < 1e-3 && (q - 1.0).abs() < 1e-3 && defect < 1e-4 && worst <= 3.0, msg)
}

// ---------------------------------------------------------------- 8

fn c8() -> Outcome {
    let lat = lattice("torus-24");
    let covers = perfect_coverings(&lat);
    let mut loops = Vec::new();
    for h in 0..lat.hexagons.len() {
        loops.push(make_string(&lat, StringKind::P, &Template::HexagonLoop(h)).map_err(err)?);
    }
    for v in 0..lat.n_vertices() {
        loops.push(make_string(&lat, StringKind::P, &Template::DualLoop(vec![v])).map_err(err)?);
        // Pairs of vertices sharing a site.
        for &s in &lat.vertices[v].sites {
            let w = lat.site_vertices[s].iter().copied().find(|&w| w != v).unwrap();
            if w > v {
                loops.push(make_string(&lat, StringKind::P, &Template::DualLoop(vec![v, w])).map_err(err)?);
            }
        }
    }
    let mut exceptions = 0;
    let mut evaluated = 0;
    for c in &covers {
        for l in &loops {
            let enclosed = l.enclosed_vertices.ok_or("closed loop without an enclosed count")?;
            let expect = if enclosed % 2 == 0 { 1.0 } else { -1.0 };
            evaluated += 1;
            if l.p_value(|i| c.get(i)) != expect {
                exceptions += 1;
            }
        }
    }
    // Logical operators on the pierced lattice, equal-weight covering state.
    let hole = lattice("pierced-81");
    let hcov = perfect_coverings(&hole);
    let st = SparseState::new(hcov.iter().map(|c| (c.spins(), C64::new(1.0, 0.0))));
    let mut sign_ok = true;
    let mut vals = Vec::new();
    for j in 2..=6 {
        let zz = expect_exact(&hole, &st, &compile(&hole, &Observable::LogicalZZ(j)).map_err(err)?).map_err(err)?.re;
        let zxz = expect_exact(&hole, &st, &compile(&hole, &Observable::LogicalZXZ(j)).map_err(err)?).map_err(err)?.re;
        sign_ok &= zz != 0.0 && zxz != 0.0 && zz.signum() == -zxz.signum();
        vals.push(format!("j={j}: {zz:+.2}/{zxz:+.2}"));
    }
    let msg = format!(
        "{} coverings × {} loops, {exceptions} exceptions of {evaluated}; pierced lattice ({} coverings) ZZ/ZXZ {}",
        covers.len(),
        loops.len(),
        hcov.len(),
        vals.join(", ")
    );
    check(!covers.is_empty() && exceptions == 0 && sign_ok, msg)
}

// ---------------------------------------------------------------- 9

/// Unconstrained product state `⊗(|g⟩ + z_i|r⟩)` in the full `2^N` space,
/// site `i` excited when bit `i` is set. Serves as an oracle that shares no
/// code with the library's dynamics.
struct ProductState {
    n: usize,
    z: Vec<C64>,
}

impl ProductState {
    fn new(n: usize, z: Vec<C64>) -> Self {
        Self { n, z }
    }

    fn amplitude_without(&self, b: usize, skip: Option<usize>) -> C64 {
        let mut a = C64::new(1.0, 0.0);
        for i in 0..self.n {
            if b >> i & 1 == 1 && Some(i) != skip {
                a *= self.z[i];
            }
        }
        a
    }

    fn vector(&self) -> Vec<C64> {
        (0..1usize << self.n).map(|b| self.amplitude_without(b, None)).collect()
    }

    /// `∂ψ/∂z_k`.
    fn derivative(&self, k: usize) -> Vec<C64> {
        (0..1usize << self.n).map(|b| if b >> k & 1 == 1 { self.amplitude_without(b, Some(k)) } else { C64::new(0.0, 0.0) }).collect()
    }

    /// Covariance of the one-hot features `(1 − n_i, n_i)` under `|ψ|²`; returns
    /// the largest entry coupling different sites.
    fn one_hot_qgt_off_block(&self) -> f64 {
        let psi = self.vector();
        let norm: f64 = psi.iter().map(|z| z.norm_sqr()).sum();
        let p: Vec<f64> = psi.iter().map(|z| z.norm_sqr() / norm).collect();
        let dim = psi.len();
        let f = DMatrix::from_fn(dim, 2 * self.n, |b, c| {
            let occ = (b >> (c / 2) & 1) as f64;
            if c % 2 == 0 {
                1.0 - occ
            } else {
                occ
            }
        });
        let s = weighted_covariance(&f, &p);
        let mut worst: f64 = 0.0;
        for i in 0..2 * self.n {
            for j in 0..2 * self.n {
                if i / 2 != j / 2 {
                    worst = worst.max(s[(i, j)].abs());
                }
            }
        }
        worst
    }
}

struct FullSpaceH {
    n: usize,
    pair: Vec<(usize, usize, f64)>,
}

impl FullSpaceH {
    fn new(lat: &RubyLattice, params: &RydbergParams) -> Self {
        let n = lat.n_sites();
        let mut pair = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                pair.push((i, j, params.potential(lat.distance(i, j)).unwrap()));
            }
        }
        Self { n, pair }
    }

    fn apply(&self, omega: f64, delta: f64, x: &[C64]) -> Vec<C64> {
        (0..x.len())
            .map(|b| {
                let mut d = 0.0;
                for i in 0..self.n {
                    if b >> i & 1 == 1 {
                        d -= delta;
                    }
                }
                for &(i, j, v) in &self.pair {
                    if b >> i & 1 == 1 && b >> j & 1 == 1 {
                        d += v;
                    }
                }
                let mut y = x[b] * d;
                for i in 0..self.n {
                    y -= x[b ^ (1 << i)] * (0.5 * omega);
                }
                y
            })
            .collect()
    }

    /// McLachlan velocity `ż = −i S⁻¹ C` of the product state.
    fn velocity(&self, st: &ProductState, omega: f64, delta: f64) -> DVector<C64> {
        let psi = st.vector();
        let hpsi = self.apply(omega, delta, &psi);
        let dots: Vec<Vec<C64>> = (0..self.n).map(|k| st.derivative(k)).collect();
        let ip = |a: &[C64], b: &[C64]| a.iter().zip(b).map(|(x, y)| x.conj() * y).sum::<C64>();
        let nn = ip(&psi, &psi);
        let e = ip(&psi, &hpsi) / nn;
        let dpsi: Vec<C64> = dots.iter().map(|d| ip(d, &psi) / nn).collect();
        let s = DMatrix::from_fn(self.n, self.n, |k, l| ip(&dots[k], &dots[l]) / nn - dpsi[k] * dpsi[l].conj());
        let c = DVector::from_fn(self.n, |k, _| ip(&dots[k], &hpsi) / nn - dpsi[k] * e);
        s.lu().solve(&c).expect("product-state metric is invertible") * C64::new(0.0, -1.0)
    }
}

fn c9() -> Outcome {
    let lat = lattice("torus-12");
    let params = RydbergParams::default();
    let sched = Schedule::protocol(2.5);
    let t_star = T_STAR_FRACTION * 2.5;
    let dt = 1e-4;
    let mf = MeanField::new(&lat, &params, None).map_err(err)?;
    let s = mf_bootstrap(&mf, &sched, t_star, dt, |_, _| Ok(())).map_err(err)?;
    let h = FullSpaceH::new(&lat, &params);
    let mut st = ProductState::new(lat.n_sites(), vec![C64::new(0.0, 0.0); lat.n_sites()]);
    let steps = (t_star / dt).round() as usize;
    for k in 0..steps {
        let t = k as f64 * dt;
        let z0 = st.z.clone();
        let at = |st: &mut ProductState, z: &[C64], d: &DVector<C64>, c: f64| {
            st.z = z.iter().zip(d.iter()).map(|(a, b)| a + b * c).collect();
        };
        let (o1, d1) = sched.eval(t).map_err(err)?;
        let (o2, d2) = sched.eval(t + 0.5 * dt).map_err(err)?;
        let (o4, d4) = sched.eval(t + dt).map_err(err)?;
        let k1 = h.velocity(&st, o1, d1);
        at(&mut st, &z0, &k1, 0.5 * dt);
        let k2 = h.velocity(&st, o2, d2);
        at(&mut st, &z0, &k2, 0.5 * dt);
        let k3 = h.velocity(&st, o2, d2);
        at(&mut st, &z0, &k3, dt);
        let k4 = h.velocity(&st, o4, d4);
        let sum = &k1 + &k2 * C64::new(2.0, 0.0) + &k3 * C64::new(2.0, 0.0) + &k4;
        at(&mut st, &z0, &sum, dt / 6.0);
    }
    let gap = (0..lat.n_sites()).map(|i| (s.beta[i] / s.alpha[i] - st.z[i]).norm()).fold(0.0, f64::max);
    let scale = st.z.iter().map(|z| z.norm()).fold(0.0, f64::max);

    // Single atom: zero interaction cutoff decouples the three sites.
    let tri = lattice("triangle-3");
    let iso = RydbergParams { cutoff: Some(0.0), ..Default::default() };
    let mf1 = MeanField::new(&tri, &iso, None).map_err(err)?;
    let (om, de) = (mhz(1.4), mhz(-0.7));
    let rabi = Schedule::Constant { total_us: 1.0, omega: om, delta: de };
    let mut worst: f64 = 0.0;
    mf_bootstrap(&mf1, &rabi, 1.0, 2e-4, |t, s| {
        // Closed form of the two-level amplitudes in the frame of H = −(Ω/2)σx − Δ n.
        let w = (om * om + de * de).sqrt();
        let (c, sn) = ((0.5 * w * t).cos(), (0.5 * w * t).sin());
        let phase = C64::from_polar(1.0, 0.5 * de * t);
        let ag = C64::new(c, -de / w * sn) * phase;
        let ar = C64::new(0.0, om / w * sn) * phase;
        let ratio = ar / ag;
        worst = worst.max((s.beta[0] / s.alpha[0] - ratio).norm()).max((s.beta[0].norm_sqr() - ar.norm_sqr()).abs());
        Ok(())
    })
    .map_err(err)?;
    let msg = format!("N=12 mean field vs 2^N product TDVP at t* = {t_star}: max |Δz| {gap:.1e} (|z| ≤ {scale:.3}); single atom {worst:.1e}");
    check(gap < 1e-8 && worst < 1e-8, msg)
}

// ---------------------------------------------------------------- 10

fn nothing(_: &RestrictedBasis, _: f64, _: &[C64]) -> ruby_qsl::Result<Vec<f64>> {
    Ok(Vec::new())
}

fn c10() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;

    // Waiting times of a single decaying excitation.
    let tri = lattice("triangle-3");
    let kappa = 2.0;
    let sched = Schedule::Constant { total_us: 20.0, omega: 0.0, delta: 0.0 };
    let mut psi0 = vec![C64::new(0.0, 0.0); 4];
    psi0[2] = C64::new(1.0, 0.0);
    let setup = TrajectorySetup {
        lat: &tri,
        params: RydbergParams::default(),
        schedule: &sched,
        model: NoiseModel { kappa_minus: kappa, ..Default::default() },
        dt: 1e-2,
        obs_times: &[],
        psi0: Some(&psi0),
    };
    let n = 1000;
    let mut waits = Vec::with_capacity(n);
    for k in 0..n {
        let tr = run_trajectory(&setup, None, trajectory_seed(101, k), &nothing).map_err(err)?;
        waits.push(tr.jumps.first().map_or(sched.total(), |j| j.time));
    }
    let mean = waits.iter().sum::<f64>() / n as f64;
    let z_mean = (mean - 1.0 / kappa).abs() / (1.0 / kappa / (n as f64).sqrt());
    let mut z_surv: f64 = 0.0;
    for m in [0.5, 1.0, 2.0] {
        let p = (-m as f64).exp();
        let frac = waits.iter().filter(|&&t| t > m / kappa).count() as f64 / n as f64;
        z_surv = z_surv.max((frac - p).abs() / (p * (1.0 - p) / n as f64).sqrt());
    }
    ok &= z_mean < 3.0 && z_surv < 3.0;
    parts.push(format!("waiting times: mean {mean:.4} ({z_mean:.1}σ), survival worst {z_surv:.1}σ"));

    // Zero rates reproduce closed evolution bit for bit.
    let lat12 = lattice("torus-12");
    let proto = Schedule::protocol(1.0);
    let obs = [0.25, 0.5, 1.0];
    let dens = |b: &RestrictedBasis, _: f64, p: &[C64]| -> ruby_qsl::Result<Vec<f64>> {
        Ok(vec![(0..b.dim()).map(|i| p[i].norm_sqr() * b.configuration(i).n_excitations() as f64).sum::<f64>()])
    };
    let zero = TrajectorySetup {
        lat: &lat12,
        params: RydbergParams::default(),
        schedule: &proto,
        model: NoiseModel::default(),
        dt: 1e-4,
        obs_times: &obs,
        psi0: None,
    };
    let tr = run_trajectory(&zero, None, 1, &dens).map_err(err)?;
    let model12 = RydbergModel::new(&lat12, RydbergParams::default(), None).map_err(err)?;
    let sys12 = ExactSystem::new(&lat12, &model12, DEFAULT_CAP).map_err(err)?;
    let mut psi = sys12.ground_state_vector();
    let mut closed = Vec::new();
    evolve_exact(&sys12, &mut psi, &proto, 0.0, 1.0, 1e-4, &obs, |t, p| {
        closed.push(dens(&sys12.basis, t, p)?);
        Ok(())
    })
    .map_err(err)?;
    let bit_equal = tr.series == closed && tr.jumps.is_empty();
    ok &= bit_equal;
    parts.push(format!("zero-rate bit-equal {bit_equal}"));

    // Jump counts against the master equation.
    let model = NoiseModel { kappa_plus: 1.0, kappa_minus: 2.0, n_trajectories: 200, ..Default::default() };
    let jumps = TrajectorySetup { lat: &lat12, params: RydbergParams::default(), schedule: &proto, model, dt: 1e-4, obs_times: &[1.0], psi0: None };
    let run = noisy_observables(&jumps, 19, &nothing).map_err(err)?;
    let counts: Vec<f64> = run.trajectories.iter().map(|t| t.jumps.len() as f64).collect();
    let k = counts.len() as f64;
    let cm = counts.iter().sum::<f64>() / k;
    let cv = counts.iter().map(|c| (c - cm).powi(2)).sum::<f64>() / (k - 1.0);
    let oracle = master_equation_rate_integral(&sys12, &proto, &model, 5e-4).map_err(err)?;
    let z_jump = (cm - oracle).abs() / (cv / k).sqrt();
    ok &= z_jump < 3.0;
    parts.push(format!("jump count {cm:.3} vs ∫Σ⟨L†L⟩ {oracle:.3} ({z_jump:.1}σ)"));

    // Experimental noise lowers the late-time P and Q peaks at N=24.
    let ex = exact24();
    let lat = &ex.lat;
    let cp = compile(lat, &Observable::HexagonP).map_err(err)?;
    let cq = compile(lat, &Observable::HexagonQ).map_err(err)?;
    let window = [2.2, 2.3, 2.4, 2.5];
    let pq = |b: &RestrictedBasis, _: f64, p: &[C64]| -> ruby_qsl::Result<Vec<f64>> {
        let st = BasisState { basis: b, psi: p };
        Ok(vec![expect_exact(lat, &st, &cp)?.re, expect_exact(lat, &st, &cq)?.re])
    };
    let mut clean = [f64::NEG_INFINITY; 2];
    for &t in &window {
        let k = ex.times.iter().position(|&o| (o - t).abs() < 1e-9).unwrap();
        let v = pq(&ex.basis, t, &ex.states[k]).map_err(err)?;
        clean[0] = clean[0].max(v[0]);
        clean[1] = clean[1].max(v[1]);
    }
    let full_proto = Schedule::protocol(2.5);
    let mut exp = NoiseModel::preset("paper-exp").map_err(err)?;
    exp.n_trajectories = 10;
    let t0 = Instant::now();
    let noisy_setup = TrajectorySetup { lat, params: RydbergParams::default(), schedule: &full_proto, model: exp, dt: 1e-4, obs_times: &window, psi0: None };
    let noisy = noisy_observables(&noisy_setup, 23, &pq).map_err(err)?;
    let mut peak = [(f64::NEG_INFINITY, 0.0); 2];
    for (row, err_row) in noisy.mean.iter().zip(&noisy.stderr) {
        for q in 0..2 {
            if row[q] > peak[q].0 {
                peak[q] = (row[q], err_row[q]);
            }
        }
    }
    let below = peak[0].0 < clean[0] && peak[1].0 < clean[1];
    ok &= below;
    parts.push(format!(
        "N=24 noisy peaks P {:.3}±{:.3} < {:.3}, Q {:.3}±{:.3} < {:.3} ({} trajectories, {:.0} s)",
        peak[0].0,
        peak[0].1,
        clean[0],
        peak[1].0,
        peak[1].1,
        clean[1],
        noisy.trajectories.len(),
        t0.elapsed().as_secs_f64()
    ));
    check(ok, parts.join("; "))
}

// ---------------------------------------------------------------- 11

fn stretch_run(total: f64, times: &[f64]) -> Result<Vec<(f64, f64, f64)>, String> {
    let lat = lattice("experiment-219");
    let params = RydbergParams::default();
    let model = RydbergModel::new(&lat, params, None).map_err(err)?;
    let sched = Schedule::protocol(total);
    let mf = MeanField::new(&lat, &params, None).map_err(err)?;
    let t_star = T_STAR_FRACTION * total;
    let s = mf_bootstrap(&mf, &sched, t_star, 1e-4, |_, _| Ok(())).map_err(err)?;
    let mut a = s.to_jmf(&lat, LOG_FLOOR);
    let scfg = SamplerConfig { n_chains: 8, n_samples: 1024, n_burnin: 0, thin: 1, loop_fraction: 0.25, seed: 11 };
    let mut sampler = Sampler::new(&lat, scfg).map_err(err)?;
    sampler.reset(&a, None).map_err(err)?;
    sampler.run(&a, 200).map_err(err)?;
    let tri = make_tripartition(&lat).map_err(err)?;
    let mut rhs = SampledRhs { sampler, model: &model, schedule: &sched, reg: Regularization::default(), burnin: 2 };
    let mut snaps: Vec<(f64, JmfParams)> = Vec::new();
    let later: Vec<f64> = times.iter().copied().filter(|&t| t >= t_star).collect();
    integrate(&mut a, &mut rhs, t_star, total, &IntegratorConfig { dt: 1e-3, method: Integrator::Rk4 }, &later, |t, a, _| {
        snaps.push((t, a.clone()));
        Ok(())
    })
    .map_err(err)?;
    let mut out = Vec::new();
    for (t, a) in snaps {
        let cfg = |seed| SamplerConfig { n_chains: 8, n_samples: 4096, n_burnin: 500, thin: 2, loop_fraction: 0.5, seed };
        let r1 = Sampler::new(&lat, cfg(1)).map_err(err)?.run(&a, 0).map_err(err)?;
        let r2 = Sampler::new(&lat, cfg(2)).map_err(err)?.run(&a, 0).map_err(err)?;
        let rep = tee_sampled(&a, &tri, &r1, &r2, 5).map_err(err)?;
        eprintln!("  T={total} t={t:.3} γ = {:.3} ± {:.3}", rep.gamma, rep.gamma_stderr);
        out.push((t, rep.gamma, rep.gamma_stderr));
    }
    Ok(out)
}

fn c11() -> Outcome {
    let total = 2.5;
    let times: Vec<f64> = (0..=25).map(|k| 0.3 + k as f64 * 0.088).chain([2.44]).collect();
    let series = stretch_run(total, &times)?;
    let early = series.iter().filter(|r| r.0 < 0.9 * total).map(|r| r.1.abs()).fold(0.0, f64::max);
    let peak = series.iter().cloned().fold((0.0, f64::NEG_INFINITY, 0.0), |a, r| if r.1 > a.1 { r } else { a });
    let mut sweep_ok = true;
    let mut sweep = Vec::new();
    for tt in [1.0, 1.5, 2.0, 3.0] {
        let ts: Vec<f64> = (0..=10).map(|k| tt * (0.8 + 0.02 * k as f64)).collect();
        let g = stretch_run(tt, &ts)?.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
        sweep_ok &= g < 2f64.ln();
        sweep.push(format!("T={tt}: {g:.3}"));
    }
    let msg = format!("max |γ| before 0.9T {early:.3}; peak γ {:.3}±{:.3} at t = {:.2}; peak γ per T [{}]", peak.1, peak.2, peak.0, sweep.join(", "));
    check(early < 0.1 && (peak.1 - 0.479).abs() <= 0.05 && (peak.0 - 2.44).abs() <= 0.15 && sweep_ok, msg)
}

// ---------------------------------------------------------------- driver

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let stretch = std::env::var("RUBY_QSL_STRETCH").map_or(false, |v| v == "1");
    let criteria: Vec<(usize, &str, fn() -> Outcome)> = vec![
        (1, "restricted-space dimension", c1),
        (2, "gradient correctness", c2),
        (3, "estimator-oracle equivalence", c3),
        (4, "geometric tensor structure", c4),
        (5, "conservation", c5),
        (6, "N=24 benchmark against exact dynamics", c6),
        (7, "RVB reference state", c7),
        (8, "parity identities", c8),
        (9, "mean-field bootstrap", c9),
        (10, "noise statistics", c10),
        (11, "N=219 topological entanglement entropy [stretch]", c11),
    ];
    let mut failed = Vec::new();
    for (id, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        if id == 11 && !stretch {
            println!("criterion {id:>2} SKIP {name}: set RUBY_QSL_STRETCH=1 to run (non-gating)");
            continue;
        }
        let t0 = Instant::now();
        let r = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match r {
            Ok(m) => println!("criterion {id:>2} PASS {name}: {m} [{secs:.1} s]"),
            Err(m) => {
                println!("criterion {id:>2} FAIL {name}: {m} [{secs:.1} s]");
                if id != 11 {
                    failed.push(id);
                }
            }
        }
    }
    if !failed.is_empty() {
        println!("gating failures: {failed:?}");
        std::process::exit(1);
    }
}
