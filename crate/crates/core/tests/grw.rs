#![allow(clippy::needless_range_loop)]

use flashsim::grw::*;
use flashsim::hilbert::{OperatorMatrix, StateVector};
use flashsim::quadrature::GaussLegendre;
use flashsim::rng::trajectory_stream;
use flashsim::stats::{chi_square, ks_test};
use flashsim::Error;
use nalgebra::{Complex, DMatrix, DVector};

type Cx = Complex<f64>;

fn grid() -> Grid<f64> {
    Grid::new(1, 32, 0.5).unwrap()
}

fn static_model(particles: usize) -> GrwModel<f64> {
    let g = grid();
    GrwModel::with_hamiltonian(g, particles, 1.0, 10.0, 1.0, DMatrix::zeros(32, 32)).unwrap()
}

fn free_model(particles: usize) -> GrwModel<f64> {
    GrwModel::new(grid(), particles, 1.0, 10.0, 1.0).unwrap()
}

fn delta_state(site: usize) -> StateVector<f64> {
    let mut v = DVector::from_element(32, Cx::new(0.0, 0.0));
    v[site] = Cx::new(1.0, 0.0);
    StateVector::single(v).unwrap()
}

fn uniform_state() -> StateVector<f64> {
    StateVector::normalized(DVector::from_element(32, Cx::new(1.0, 0.0)), vec![32]).unwrap()
}

fn gauss(x: f64, sigma: f64) -> f64 {
    (-x * x / (2.0 * sigma * sigma)).exp() / (2.0 * std::f64::consts::PI * sigma * sigma).sqrt()
}

#[test]
fn gaussian_rate_peak_and_shape() {
    let m = static_model(1);
    let centre = 16; // x = 0
    let lam = m.gaussian_flash_rate(0, centre);
    let d = lam.diagonal_entries().unwrap();
    let peak = 1.0 / (10.0 * (2.0 * std::f64::consts::PI).sqrt());
    assert!((d[centre].re - peak).abs() < 1e-15);
    // |r - r_i| = σ is two cells away
    assert!((d[centre + 2].re / d[centre].re - (-0.5f64).exp()).abs() < 1e-14);
}

#[test]
fn gaussian_rates_sum_to_inverse_tau() {
    let m = static_model(1);
    let mut total = OperatorMatrix::zeros(32);
    for r in 0..32 {
        total = total.add(&m.gaussian_flash_rate(0, r).scale(0.5)).unwrap();
    }
    let d = total.diagonal_entries().unwrap();
    for z in d.iter() {
        assert!((z.re - 0.1).abs() < 1e-8);
    }
}

#[test]
fn empty_history_is_identity() {
    let m = free_model(1);
    let k = history_operator(&m, &FlashHistory::empty(0.0, 1)).unwrap();
    assert!((k.to_dense() - DMatrix::<Cx>::identity(32, 32)).norm() < 1e-14);
}

#[test]
fn single_flash_operator_static_case() {
    let m = static_model(1);
    let h = FlashHistory::from_events(0.0, 1, &[FlashEvent { t: 3.0, site: 10, kind: 0 }]).unwrap();
    let k = history_operator(&m, &h).unwrap().to_dense();
    let expect = m.gaussian_flash_rate(0, 10).to_dense().map(|z| Cx::new(z.re.sqrt(), 0.0)) * Cx::new((-3.0f64 / 20.0).exp(), 0.0);
    assert!((k - expect).norm() < 1e-14);
}

#[test]
fn two_flash_operator_is_recursive() {
    let m = free_model(1);
    let e1 = FlashEvent { t: 1.0, site: 12, kind: 0 };
    let e2 = FlashEvent { t: 2.5, site: 18, kind: 0 };
    let k1 = history_operator(&m, &FlashHistory::from_events(0.0, 1, &[e1]).unwrap()).unwrap();
    let k2 = history_operator(&m, &FlashHistory::from_events(0.0, 1, &[e1, e2]).unwrap()).unwrap();
    let step = m.rate_sqrt_operator(0, 18).compose(&m.propagator_operator(1.5).unwrap());
    assert!((k2.to_dense() - step.compose(&k1).to_dense()).norm() < 1e-14);
    // operator and vector routes agree
    let psi = gaussian_packet(m.grid(), &[0.0], 1.5, &[0.4]).unwrap();
    let direct = k2.apply(psi.amplitudes());
    let h = FlashHistory::from_events(0.0, 1, &[e1, e2]).unwrap();
    assert!((direct - apply_history(&m, psi.amplitudes(), &h).unwrap()).norm() < 1e-14);
}

#[test]
fn history_rejects_disorder() {
    let m = free_model(1);
    let h = FlashHistory {
        t0: 0.0,
        by_type: vec![vec![FlashEvent { t: 2.0, site: 1, kind: 0 }, FlashEvent { t: 1.0, site: 1, kind: 0 }]],
        rng_seed: None,
    };
    assert!(matches!(history_operator(&m, &h), Err(Error::NonIncreasingTimes { kind: 0, index: 1 })));
}

#[test]
fn zero_flash_density_is_one() {
    let m = free_model(2);
    let psi = product_state(&[uniform_state(), delta_state(3)]).unwrap();
    assert!((joint_flash_density(&m, &psi, &FlashHistory::empty(0.0, 2)).unwrap() - 1.0).abs() < 1e-14);
}

#[test]
fn first_flash_density_for_localized_static_state() {
    let m = static_model(1);
    let psi = delta_state(16);
    for (site, t) in [(16, 0.5), (19, 4.0), (8, 12.0)] {
        let h = FlashHistory::from_events(0.0, 1, &[FlashEvent { t, site, kind: 0 }]).unwrap();
        let rho = joint_flash_density(&m, &psi, &h).unwrap();
        let r = (site as f64 - 16.0) * 0.5;
        let expect = gauss(r, 1.0) / 10.0 * (-t / 10.0).exp();
        assert!((rho - expect).abs() < 1e-14 * expect.max(1e-300) + 1e-18, "{rho} vs {expect}");
    }
}

#[test]
fn survival_is_exponential_for_original_grw() {
    for n in [1usize, 2] {
        let m = free_model(n);
        let factors: Vec<_> = (0..n).map(|i| gaussian_packet(m.grid(), &[i as f64 - 0.5], 1.2, &[0.3]).unwrap()).collect();
        let psi = product_state(&factors).unwrap();
        for t in [1.0, 10.0, 50.0] {
            let s = survival_probability(&m, &psi, 0.0, t).unwrap();
            assert!((s - (-(n as f64) * t / 10.0).exp()).abs() < 1e-10);
        }
        assert!(matches!(survival_probability(&m, &psi, 1.0, 0.5), Err(Error::BeforeInitialTime { .. })));
    }
}

#[test]
fn consistency_identity_up_to_two_flashes() {
    let m = free_model(1);
    let psi = gaussian_packet(m.grid(), &[-1.0], 1.5, &[0.5]).unwrap();
    let rule = GaussLegendre::new(10);
    let histories = [
        vec![],
        vec![FlashEvent { t: 2.0, site: 14, kind: 0 }],
        vec![FlashEvent { t: 2.0, site: 14, kind: 0 }, FlashEvent { t: 6.0, site: 17, kind: 0 }],
    ];
    for events in histories {
        let h = FlashHistory::from_events(0.0, 1, &events).unwrap();
        let (lhs, rhs) = consistency_sides(&m, &psi, &h, 15.0, &rule, 40).unwrap();
        assert!((lhs - rhs).abs() <= 1e-6 * rhs, "{lhs} vs {rhs}");
    }
}

#[test]
fn conditional_state_static_cases() {
    let m = static_model(1);
    let psi = uniform_state();
    let c = conditional_state(&m, &psi, &FlashHistory::empty(0.0, 1), 4.0).unwrap();
    assert!((c.amplitudes() - psi.amplitudes()).norm() < 1e-14);
    let h = FlashHistory::from_events(0.0, 1, &[FlashEvent { t: 1.0, site: 16, kind: 0 }]).unwrap();
    let c = conditional_state(&m, &psi, &h, 1.0).unwrap();
    // periodic images at ±16 matter at the edges of the box
    let profile: Vec<f64> = (0..32)
        .map(|s| {
            let x = (s as f64 - 16.0) * 0.5;
            (gauss(x, 1.0) + gauss(x - 16.0, 1.0) + gauss(x + 16.0, 1.0)).sqrt()
        })
        .collect();
    let norm = profile.iter().map(|x| x * x).sum::<f64>().sqrt();
    for s in 0..32 {
        assert!((c.amplitudes()[s].re - profile[s] / norm).abs() < 1e-12);
    }
}

#[test]
fn conditional_state_restart_property() {
    let m = free_model(1);
    let psi = gaussian_packet(m.grid(), &[0.0], 2.0, &[0.7]).unwrap();
    let e1 = FlashEvent { t: 1.3, site: 15, kind: 0 };
    let e2 = FlashEvent { t: 4.1, site: 18, kind: 0 };
    let h1 = FlashHistory::from_events(0.0, 1, &[e1]).unwrap();
    let h2 = FlashHistory::from_events(0.0, 1, &[e1, e2]).unwrap();
    let quotient = joint_flash_density(&m, &psi, &h2).unwrap() / joint_flash_density(&m, &psi, &h1).unwrap();
    let restarted = conditional_state(&m, &psi, &h1, 1.3).unwrap();
    let from_restart = joint_flash_density(&m, &restarted, &FlashHistory::from_events(1.3, 1, &[e2]).unwrap()).unwrap();
    assert!((quotient - from_restart).abs() <= 1e-9 * quotient);
}

#[test]
fn impossible_history_is_an_error() {
    // a rate that vanishes on the support of the state
    let h = DMatrix::<Cx>::zeros(2, 2);
    let rates = vec![vec![OperatorMatrix::real_diagonal(&[1.0, 0.0]), OperatorMatrix::real_diagonal(&[0.0, 1.0])]];
    let model = DenseFlashModel::new(h, rates, 1.0, 1.0).unwrap();
    let psi = StateVector::single(DVector::from_vec(vec![Cx::new(1.0, 0.0), Cx::new(0.0, 0.0)])).unwrap();
    let hist = FlashHistory::from_events(0.0, 1, &[FlashEvent { t: 0.5, site: 1, kind: 0 }]).unwrap();
    assert!(matches!(conditional_state(&model, &psi, &hist, 1.0), Err(Error::ImpossibleHistory { .. })));
}

#[test]
fn sampler_with_zero_horizon_is_empty() {
    let m = free_model(1);
    let psi = uniform_state();
    let h = sample_history(&m, &psi, 2.0, 2.0, &mut trajectory_stream(1, 0)).unwrap();
    assert!(h.is_empty());
}

#[test]
fn sampled_waiting_times_are_exponential() {
    let m = free_model(2);
    let psi = product_state(&[
        gaussian_packet(m.grid(), &[-2.0], 1.0, &[0.0]).unwrap(),
        gaussian_packet(m.grid(), &[2.0], 1.0, &[0.0]).unwrap(),
    ])
    .unwrap();
    let mut waits = vec![Vec::new(), Vec::new()];
    for i in 0..2000 {
        let h = sample_history(&m, &psi, 0.0, 40.0, &mut trajectory_stream(7, i)).unwrap();
        for (kind, seq) in h.by_type.iter().enumerate() {
            if let Some(first) = seq.first() {
                if first.t < 40.0 {
                    waits[kind].push(first.t);
                }
            }
        }
    }
    for w in &waits {
        // first waits are right-censored at 40 = 4τ; compare with the truncated law
        let cdf_cut = 1.0 - (-4.0f64).exp();
        let ks = ks_test(w, |x| (1.0 - (-x / 10.0).exp()) / cdf_cut);
        assert!(ks.p_value > 0.01, "{ks:?}");
    }
}

#[test]
fn sampler_first_location_matches_density() {
    let m = free_model(1);
    let psi = gaussian_packet(m.grid(), &[0.0], 2.0, &[0.0]).unwrap();
    let mut counts = vec![0u64; 32];
    let n = 4000;
    // exact first-flash location law: integrate the density over time
    let rule = GaussLegendre::new(10);
    let mut probs = vec![0.0; 32];
    for (t, w) in rule.composite(0.0, 150.0, 60) {
        let evolved = m.propagate(t, psi.amplitudes()).unwrap();
        for (p, x) in probs.iter_mut().zip(m.flash_weights(&evolved)) {
            *p += w * x;
        }
    }
    for i in 0..n {
        let mut rng = trajectory_stream(99, i);
        let h = sample_history_with(&m, &psi, 0.0, 1e9, &mut rng, SamplerOptions { max_flashes: 1, ..Default::default() }).unwrap();
        counts[h.by_type[0][0].site] += 1;
    }
    let r = chi_square(&counts, &probs, 5.0);
    assert!(r.p_value > 0.01, "{r:?}");
}

#[test]
fn matter_density_cases() {
    let m = free_model(1);
    let psi = gaussian_packet(m.grid(), &[1.0], 1.0, &[0.3]).unwrap();
    let md = matter_density(&m, &psi);
    for s in 0..32 {
        assert!((md[s] - psi.amplitudes()[s].norm_sqr() / 0.5).abs() < 1e-15);
    }
    let m2 = free_model(2);
    let a = gaussian_packet(m2.grid(), &[-4.0], 0.7, &[0.0]).unwrap();
    let b = gaussian_packet(m2.grid(), &[4.0], 0.7, &[0.0]).unwrap();
    let md = matter_density(&m2, &product_state(&[a, b]).unwrap());
    let total: f64 = md.iter().sum::<f64>() * 0.5;
    assert!((total - 2.0).abs() < 1e-12);
    assert!(md[8] > 0.5 && md[24] > 0.5 && md[16] < 1e-6);
}

#[test]
fn matter_density_entangled_brute_force() {
    let m = free_model(2);
    let a = gaussian_packet(m.grid(), &[-3.0], 1.0, &[0.2]).unwrap();
    let b = gaussian_packet(m.grid(), &[3.0], 1.0, &[-0.2]).unwrap();
    let ab = a.tensor(&b);
    let ba = b.tensor(&a);
    let psi = StateVector::normalized(ab.amplitudes() + ba.amplitudes() * Cx::new(0.0, 1.0), vec![32, 32]).unwrap();
    let md = matter_density(&m, &psi);
    for r in 0..32 {
        let mut brute = 0.0;
        for other in 0..32 {
            brute += psi.amplitudes()[r * 32 + other].norm_sqr() + psi.amplitudes()[other * 32 + r].norm_sqr();
        }
        assert!((md[r] - brute / 0.5).abs() < 1e-12);
    }
}

#[test]
fn collapse_narrows_wide_packets() {
    let m = GrwModel::new(Grid::new(1, 96, 0.5).unwrap(), 1, 1.0, 10.0, 1.0).unwrap();
    let psi = gaussian_packet(m.grid(), &[0.0], 5.5, &[0.0]).unwrap();
    let var = |s: &StateVector<f64>| {
        let xs: Vec<f64> = (0..96).map(|i| (i as f64 - 48.0) * 0.5).collect();
        let p: Vec<f64> = s.amplitudes().iter().map(|z| z.norm_sqr()).collect();
        let mean: f64 = xs.iter().zip(&p).map(|(x, q)| x * q).sum();
        xs.iter().zip(&p).map(|(x, q)| (x - mean).powi(2) * q).sum::<f64>()
    };
    let before = var(&psi);
    assert!(before >= 25.0);
    for site in [40, 48, 60] {
        let h = FlashHistory::from_events(0.0, 1, &[FlashEvent { t: 1e-9, site, kind: 0 }]).unwrap();
        let after = conditional_state(&m, &psi, &h, 1e-9).unwrap();
        assert!(var(&after) < before);
    }
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn consistency_for_random_histories(
            x0 in -3.0f64..3.0,
            k0 in -1.0f64..1.0,
            flashes in prop::collection::vec((0.2f64..4.0, 0usize..32), 0..3),
        ) {
            let m = free_model(1);
            let psi = gaussian_packet(m.grid(), &[x0], 1.5, &[k0]).unwrap();
            let mut t = 0.0;
            let events: Vec<_> = flashes
                .into_iter()
                .map(|(dt, site)| {
                    t += dt;
                    FlashEvent { t, site, kind: 0 }
                })
                .collect();
            let h = FlashHistory::from_events(0.0, 1, &events).unwrap();
            let (lhs, rhs) = consistency_sides(&m, &psi, &h, t + 10.0, &GaussLegendre::new(10), 40).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-6 * rhs, "{} vs {}", lhs, rhs);
        }

        #[test]
        fn collapse_narrows_for_random_locations(width in 4.0f64..8.0, site in 30usize..66) {
            let m = GrwModel::new(Grid::new(1, 96, 0.5).unwrap(), 1, 1.0, 10.0, 1.0).unwrap();
            let psi = gaussian_packet(m.grid(), &[0.0], width, &[0.0]).unwrap();
            let var = |s: &StateVector<f64>| {
                let xs: Vec<f64> = (0..96).map(|i| (i as f64 - 48.0) * 0.5).collect();
                let p: Vec<f64> = s.amplitudes().iter().map(|z| z.norm_sqr()).collect();
                let mean: f64 = xs.iter().zip(&p).map(|(x, q)| x * q).sum();
                xs.iter().zip(&p).map(|(x, q)| (x - mean).powi(2) * q).sum::<f64>()
            };
            let h = FlashHistory::from_events(0.0, 1, &[FlashEvent { t: 1e-9, site, kind: 0 }]).unwrap();
            let after = conditional_state(&m, &psi, &h, 1e-9).unwrap();
            prop_assert!(var(&after) < var(&psi));
        }
    }
}
