use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use ruby_qsl::ansatz::*;
use ruby_qsl::exact::*;
use ruby_qsl::hamiltonian::*;
use ruby_qsl::lattice::*;
use ruby_qsl::linalg::{pinv_solve, Regularization};
use ruby_qsl::observables::*;
use ruby_qsl::state::*;

fn torus12() -> RubyLattice {
    build_lattice(&LatticeSpec::preset("torus-12").unwrap()).unwrap()
}

fn params(n: usize) -> impl Strategy<Value = Vec<C64>> {
    prop::collection::vec((-0.6..0.6f64, -PI..PI).prop_map(|(r, i)| C64::new(r, i)), n)
}

/// A restricted configuration from one choice in `0..4` per triangle.
fn restricted(n_tri: usize) -> impl Strategy<Value = Vec<i8>> {
    prop::collection::vec(0usize..4, n_tri).prop_map(|choice| {
        let mut s = vec![1i8; 3 * choice.len()];
        for (t, &k) in choice.iter().enumerate() {
            if k > 0 {
                s[3 * t + k - 1] = -1;
            }
        }
        s
    })
}

fn family() -> impl Strategy<Value = Family> {
    prop_oneof![Just(Family::Jmf), Just(Family::Dense), Just(Family::ThreeBody)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bitstrings_round_trip(spins in (1usize..21).prop_flat_map(restricted)) {
        let c = Configuration::from_spins(&spins);
        prop_assert_eq!(Configuration::parse(&c.to_bitstring()).unwrap(), c.clone());
        prop_assert_eq!(Configuration::from_spins(&c.spins()), c);
    }

    #[test]
    fn basis_index_round_trips(idx in 0usize..256) {
        let basis = RestrictedBasis::new(&torus12(), DEFAULT_CAP).unwrap();
        prop_assert_eq!(basis.index_of(&basis.spins(idx)), Some(idx));
        prop_assert!(basis.configuration(idx).is_restricted());
    }

    #[test]
    fn log_ratio_matches_full_evaluation(fam in family(), seed_params in params(400), s in restricted(4), site in 0usize..12) {
        let lat = torus12();
        let mut a = AnyAnsatz::zeros(fam, &lat).unwrap();
        let p: Vec<C64> = seed_params.iter().cycle().take(a.n_params()).copied().collect();
        a.set_params(&p);
        let fields = a.fields(&s);
        let mut t = s.clone();
        t[site] = -t[site];
        let r = a.log_ratio(&fields, &s, &[site]);
        let d = a.log_amplitude(&t) - a.log_amplitude(&s);
        prop_assert!((r.re - d.re).abs() < 1e-9);
        prop_assert!(((r.im - d.im + PI).rem_euclid(2.0 * PI) - PI).abs() < 1e-9);
        let mut f = fields.clone();
        a.update_fields(&mut f, &s, &[site]);
        let fresh = a.fields(&t);
        for (x, y) in f.iter().zip(&fresh) {
            prop_assert!((x - y).norm() < 1e-9);
        }
    }

    #[test]
    fn log_derivatives_match_finite_differences(seed_params in params(64), s in restricted(4), k in 0usize..32) {
        let lat = torus12();
        let mut a = JmfParams::for_lattice(&lat);
        let p: Vec<C64> = seed_params.iter().cycle().take(a.n_params()).copied().collect();
        a.set_params(&p);
        let d = a.log_derivatives(&s)[k];
        let h = 1e-5;
        let mut q = p.clone();
        q[k] += h;
        a.set_params(&q);
        let up = a.log_amplitude(&s);
        q[k] -= 2.0 * h;
        a.set_params(&q);
        let dn = a.log_amplitude(&s);
        prop_assert!((d - (up - dn) / (2.0 * h)).norm() < 1e-6);
    }

    #[test]
    fn geometric_tensor_is_positive_semidefinite(seed_params in params(64)) {
        let lat = torus12();
        let mut a = JmfParams::for_lattice(&lat);
        let p: Vec<C64> = seed_params.iter().cycle().take(a.n_params()).copied().collect();
        a.set_params(&p);
        let full = FullSum::new(RestrictedBasis::new(&lat, DEFAULT_CAP).unwrap(), &a);
        let w: Vec<f64> = full.state(a.params()).iter().map(|z| z.norm_sqr()).collect();
        let s = full.covariance(&w);
        prop_assert!((&s - s.transpose()).amax() < 1e-12);
        prop_assert!(s.symmetric_eigen().eigenvalues.min() > -1e-10);
    }

    #[test]
    fn q_strings_are_involutions(s in restricted(8), h in 0usize..4) {
        let lat = build_lattice(&LatticeSpec::preset("torus-24").unwrap()).unwrap();
        let q = make_string(&lat, StringKind::Q, &Template::HexagonLoop(h)).unwrap();
        let once = apply_q(&lat, &q, &s).unwrap();
        prop_assert!(Configuration::from_spins(&once).is_restricted());
        prop_assert_eq!(apply_q(&lat, &q, &once).unwrap(), s);
    }

    #[test]
    fn p_strings_are_signs(s in restricted(8), h in 0usize..4) {
        let lat = build_lattice(&LatticeSpec::preset("torus-24").unwrap()).unwrap();
        let p = make_string(&lat, StringKind::P, &Template::HexagonLoop(h)).unwrap();
        let v = eval_p(&p, &s).unwrap();
        prop_assert!(v == 1.0 || v == -1.0);
    }

    #[test]
    fn checkpoints_round_trip(fam in family(), p in params(400), t in 0.0..3.0f64) {
        let lat = torus12();
        let mut a = AnyAnsatz::zeros(fam, &lat).unwrap();
        let q: Vec<C64> = p.iter().cycle().take(a.n_params()).copied().collect();
        a.set_params(&q);
        let c = Checkpoint::of(&a, distance_classes(&lat).n_classes(), t);
        let back = Checkpoint::from_json(&c.to_json().unwrap()).unwrap();
        prop_assert_eq!(back.time_us, t);
        let b = back.restore(&lat).unwrap();
        prop_assert_eq!(b.family(), fam);
        prop_assert_eq!(b.params(), a.params());
    }

    #[test]
    fn pinv_solve_respects_parameter_scaling(
        entries in prop::collection::vec(-1.0..1.0f64, 16),
        scales in prop::collection::vec(-6.0..6.0f64, 4),
    ) {
        let a = DMatrix::from_row_slice(4, 4, &entries);
        let s = (&a * a.transpose()).map(|x| C64::new(x, 0.0));
        let b = DVector::from_fn(4, |i, _| C64::new(entries[i], entries[15 - i]));
        let reg = Regularization { diag_shift: 1e-3, pinv_cutoff: 1e-10 };
        let (x, _) = pinv_solve(&s, &b, reg).unwrap();
        let c: Vec<f64> = scales.iter().map(|e| 10f64.powf(*e / 3.0)).collect();
        let sc = DMatrix::from_fn(4, 4, |i, j| s[(i, j)] * c[i] * c[j]);
        let bc = DVector::from_fn(4, |i, _| b[i] * c[i]);
        let (xc, _) = pinv_solve(&sc, &bc, reg).unwrap();
        for i in 0..4 {
            prop_assert!((xc[i] * c[i] - x[i]).norm() <= 1e-7 * (1.0 + x.norm()));
        }
    }

    #[test]
    fn exact_evolution_preserves_the_norm(omega in 0.0..10.0f64, delta in -20.0..20.0f64) {
        let lat = torus12();
        let model = RydbergModel::new(&lat, RydbergParams::default(), None).unwrap();
        let sys = ExactSystem::new(&lat, &model, DEFAULT_CAP).unwrap();
        let mut psi = sys.ground_state_vector();
        let sched = Schedule::Constant { total_us: 0.05, omega, delta };
        let rep = evolve_exact(&sys, &mut psi, &sched, 0.0, 0.05, 1e-4, &[], |_, _| Ok(())).unwrap();
        let norm: f64 = psi.iter().map(|z| z.norm_sqr()).sum();
        prop_assert!((norm - 1.0).abs() < 1e-9);
        prop_assert!(rep.norm_drift < 1e-9);
    }
}
