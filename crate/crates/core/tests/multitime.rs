use flashsim::grw::{conditional_state, gaussian_packet, joint_flash_density, FlashEvent, FlashHistory, Grid, GrwModel};
use flashsim::hilbert::StateVector;
use flashsim::multitime::*;
use flashsim::quadrature::GaussLegendre;
use flashsim::Error;
use nalgebra::{Complex, DMatrix};

type Cx = Complex<f64>;

fn system(potential: Option<&[f64]>) -> GrwModel<f64> {
    GrwModel::with_potential(Grid::new(1, 24, 0.5).unwrap(), 1, 1.0, 10.0, 1.0, potential).unwrap()
}

fn packet(x: f64, k: f64) -> StateVector<f64> {
    gaussian_packet(&Grid::new(1, 24, 0.5).unwrap(), &[x], 1.0, &[k]).unwrap()
}

fn entangled() -> StateVector<f64> {
    let ab = packet(-2.5, 0.4).tensor(&packet(2.5, -0.3));
    let ba = packet(2.5, 0.0).tensor(&packet(-2.5, 0.2));
    StateVector::normalized(ab.amplitudes() + ba.amplitudes() * Cx::new(0.6, 0.8), vec![24, 24]).unwrap()
}

fn ev(t: f64, site: usize) -> FlashEvent<f64> {
    FlashEvent { t, site, kind: 0 }
}

fn future_set() -> Vec<FutureFlashes<f64>> {
    let mut tests = Vec::new();
    for i in 0..20 {
        let a = 0.5 + 0.37 * i as f64;
        let s0 = 4 + (i * 7) % 16;
        let s1 = 6 + (i * 5) % 12;
        let system0 = if i % 3 == 0 { vec![] } else { vec![ev(a, s0)] };
        let mut system1 = vec![ev(0.3 + 0.21 * i as f64, s1)];
        if i % 2 == 0 {
            system1.push(ev(5.0 + 0.4 * i as f64, (s1 + 3) % 24));
        }
        tests.push(FutureFlashes { system0, others: vec![system1] });
    }
    tests
}

#[test]
fn product_state_density_factorizes() {
    let systems = [system(None), system(None)];
    let (a, b) = (packet(-1.0, 0.5), packet(2.0, -0.5));
    let psi = a.tensor(&b);
    let h0 = FlashHistory::from_events(0.0, 1, &[ev(1.0, 10), ev(3.0, 12)]).unwrap();
    let h1 = FlashHistory::from_events(0.0, 1, &[ev(7.5, 16)]).unwrap();
    let joint = multitype_joint_density(&systems, &psi, &[h0.clone(), h1.clone()]).unwrap();
    let prod = joint_flash_density(&systems[0], &a, &h0).unwrap() * joint_flash_density(&systems[1], &b, &h1).unwrap();
    assert!((joint - prod).abs() <= 1e-12 * prod);
    let none = multitype_joint_density(&systems, &psi, &[FlashHistory::empty(0.0, 1), FlashHistory::empty(0.0, 1)]).unwrap();
    assert!((none - 1.0).abs() < 1e-13);
}

#[test]
fn entangled_density_matches_direct_contraction() {
    let systems = [system(None), system(None)];
    let psi = entangled();
    let h0 = FlashHistory::from_events(0.0, 1, &[ev(2.0, 9)]).unwrap();
    let h1 = FlashHistory::from_events(0.0, 1, &[ev(0.5, 14), ev(4.0, 15)]).unwrap();
    let k0 = flashsim::grw::history_operator(&systems[0], &h0).unwrap().to_dense();
    let k1 = flashsim::grw::history_operator(&systems[1], &h1).unwrap().to_dense();
    // ⟨ψ| K0†K0 ⊗ K1†K1 |ψ⟩ via a full Kronecker product
    let e = (k0.adjoint() * &k0).kronecker(&(k1.adjoint() * &k1));
    let brute = psi.amplitudes().dotc(&(e * psi.amplitudes())).re;
    let joint = multitype_joint_density(&systems, &psi, &[h0, h1]).unwrap();
    assert!((joint - brute).abs() <= 1e-10 * brute);
}

#[test]
fn interacting_hamiltonian_is_rejected() {
    let h1 = DMatrix::<Cx>::from_fn(2, 2, |i, j| Cx::new((i + j) as f64, 0.0));
    let h2 = DMatrix::<Cx>::from_fn(2, 2, |i, j| Cx::new(if i == j { i as f64 } else { 0.5 }, 0.0));
    let id = DMatrix::<Cx>::identity(2, 2);
    let free = h1.kronecker(&id) + id.kronecker(&h2);
    check_noninteracting(&free, &[h1.clone(), h2.clone()], 1e-12).unwrap();
    let coupled = &free + h1.kronecker(&h2) * Cx::new(0.1, 0.0);
    assert!(matches!(check_noninteracting(&coupled, &[h1, h2], 1e-12), Err(Error::InteractingHamiltonian)));
}

#[test]
fn shift_without_past_flashes() {
    let systems = [system(None), system(None)];
    let psi = entangled();
    let shifted = shift_and_condition(&psi, &systems, 3.0, &FlashHistory::empty(0.0, 1)).unwrap();
    let w = systems[0].single_propagator(3.0).unwrap().to_dense();
    let direct = flashsim::hilbert::apply_on_factor(&w, 0, &[24, 24], psi.amplitudes());
    let direct = &direct / Cx::new(direct.norm(), 0.0);
    assert!((shifted.amplitudes() - direct).norm() < 1e-12);
    // H₁ = 0: the scalar damping cancels
    let still = GrwModel::with_hamiltonian(Grid::new(1, 24, 0.5).unwrap(), 1, 1.0, 10.0, 1.0, DMatrix::zeros(24, 24)).unwrap();
    let s = shift_and_condition(&psi, &[still.clone(), still], 3.0, &FlashHistory::empty(0.0, 1)).unwrap();
    assert!((s.amplitudes() - psi.amplitudes()).norm() < 1e-13);
}

#[test]
fn shift_with_one_past_flash_matches_conditional_state() {
    let systems = [system(None), system(None)];
    let a = packet(-1.0, 0.3);
    let b = packet(1.5, 0.0);
    let past = FlashHistory::from_events(0.0, 1, &[ev(2.2, 10)]).unwrap();
    let shifted = shift_and_condition(&a.tensor(&b), &systems, 7.0, &past).unwrap();
    let cond = conditional_state(&systems[0], &a, &past, 7.0).unwrap();
    assert!((shifted.amplitudes() - cond.tensor(&b).amplitudes()).norm() < 1e-10);
}

#[test]
fn covariance_trivial_cases() {
    let systems = [system(None), system(None)];
    let r = covariance_check(&entangled(), &systems, 0.0, &FlashHistory::empty(0.0, 1), &future_set()).unwrap();
    assert!(r.max_rel_diff < 1e-13);
    let prod = packet(-1.0, 0.2).tensor(&packet(2.0, 0.1));
    let past = FlashHistory::from_events(0.0, 1, &[ev(1.0, 11)]).unwrap();
    let r = covariance_check(&prod, &systems, 7.0, &past, &future_set()).unwrap();
    assert!(r.max_rel_diff < 1e-10);
}

#[test]
fn covariance_entangled_shift() {
    let systems = [system(None), system(None)];
    for past in [FlashHistory::empty(0.0, 1), FlashHistory::from_events(0.0, 1, &[ev(2.0, 9), ev(5.5, 14)]).unwrap()] {
        let r = covariance_check(&entangled(), &systems, 7.0, &past, &future_set()).unwrap();
        assert_eq!(r.lhs.len(), 20);
        assert!(r.max_abs_diff <= 1e-8 * r.lhs.iter().cloned().fold(0.0, f64::max).max(1.0), "{r:?}");
        assert!(r.max_rel_diff <= 1e-8);
    }
}

#[test]
fn system1_marginal_ignores_system0_hamiltonian() {
    let v: Vec<f64> = (0..24).map(|i| 0.05 * ((i as f64) - 12.0).powi(2) / 10.0).collect();
    let free = [system(None), system(None)];
    let trapped = [system(Some(&v)), system(None)];
    let psi = entangled();
    let f = FlashHistory::from_events(0.0, 1, &[ev(1.2, 13), ev(3.4, 8)]).unwrap();
    let rule = GaussLegendre::new(12);
    let a = system1_marginal(&psi, &free, &f, 10.0, &rule, 40).unwrap();
    let b = system1_marginal(&psi, &trapped, &f, 10.0, &rule, 40).unwrap();
    let closed = system1_marginal_closed(&psi, &free, &f).unwrap();
    assert!((a - b).abs() <= 1e-8 * closed);
    assert!((a - closed).abs() <= 1e-8 * closed);
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn covariance_under_random_shifts(
            delta in 0.5f64..9.0,
            past in prop::collection::vec((0.2f64..2.0, 0usize..24), 0..3),
        ) {
            let mut t = 0.0;
            let events: Vec<_> = past
                .into_iter()
                .map(|(dt, site)| {
                    t += dt;
                    ev(t, site)
                })
                .collect();
            let past = FlashHistory::from_events(0.0, 1, &events).unwrap();
            let systems = [system(None), system(None)];
            let r = covariance_check(&entangled(), &systems, t + delta, &past, &future_set()).unwrap();
            prop_assert!(r.max_rel_diff <= 1e-8, "{:?}", r);
        }

        #[test]
        fn marginal_ignores_random_system0_potential(
            strength in 0.0f64..0.2,
            flashes in prop::collection::vec((0.2f64..3.0, 0usize..24), 1..3),
        ) {
            let v: Vec<f64> = (0..24).map(|i| strength * ((i as f64) - 12.0).powi(2) / 10.0).collect();
            let free = [system(None), system(None)];
            let trapped = [system(Some(&v)), system(None)];
            let mut t = 0.0;
            let events: Vec<_> = flashes
                .into_iter()
                .map(|(dt, site)| {
                    t += dt;
                    ev(t, site)
                })
                .collect();
            let f = FlashHistory::from_events(0.0, 1, &events).unwrap();
            let psi = entangled();
            let rule = GaussLegendre::new(12);
            let b = system1_marginal(&psi, &trapped, &f, 10.0, &rule, 40).unwrap();
            let closed = system1_marginal_closed(&psi, &free, &f).unwrap();
            prop_assert!((b - closed).abs() <= 1e-8 * closed, "{} vs {}", b, closed);
        }
    }
}
