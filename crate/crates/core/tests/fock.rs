use flashsim::fock::*;
use flashsim::grw::{consistency_sides, survival_probability, FlashEvent, FlashHistory, FlashProcess, Grid};
use flashsim::hilbert::{OperatorMatrix, StateVector};
use flashsim::quadrature::GaussLegendre;
use flashsim::Error;
use nalgebra::{Complex, DMatrix, DVector};

type Cx = Complex<f64>;

fn lattice(sites: usize) -> Grid<f64> {
    Grid::new(1, sites, 0.5).unwrap()
}

#[test]
fn one_particle_rate_is_single_particle_rate() {
    let space = FockSpace::new(5, Statistics::Boson, 2).unwrap();
    let single = single_particle_rates(&lattice(5), 1.0, 10.0);
    let sym = symmetric_flash_rate(&space, &single, 1).unwrap();
    for (a, b) in sym.iter().zip(&single) {
        assert!((a.to_dense() - b.to_dense()).norm() < 1e-15);
    }
}

#[test]
fn fermions_above_lattice_size_have_no_subspace() {
    let space = FockSpace::new(3, Statistics::Fermion, 3).unwrap();
    let single = single_particle_rates(&lattice(3), 1.0, 10.0);
    assert!(matches!(symmetric_flash_rate(&space, &single, 4), Err(Error::EmptySubspace { .. })));
}

#[test]
fn summed_rate_is_permutation_invariant() {
    // Σ_i Λ_i(r) on the full tensor space commutes with every transposition
    let l = 4;
    let single = single_particle_rates(&lattice(l), 1.0, 10.0);
    let lam = single[1].to_dense();
    let id = DMatrix::<Cx>::identity(l, l);
    let sum = lam.kronecker(&id).kronecker(&id) + id.kronecker(&lam).kronecker(&id) + id.kronecker(&id).kronecker(&lam);
    let n = l * l * l;
    for (i, j) in [(0, 1), (1, 2), (0, 2)] {
        let mut p = DMatrix::<Cx>::zeros(n, n);
        for idx in 0..n {
            let mut s = [idx / 16, (idx / 4) % 4, idx % 4];
            s.swap(i, j);
            p[(s[0] * 16 + s[1] * 4 + s[2], idx)] = Cx::new(1.0, 0.0);
        }
        assert!((&p * &sum * p.adjoint() - &sum).norm() < 1e-14);
    }
}

#[test]
fn two_fermions_match_slater_brute_force() {
    let l = 4;
    let grid = lattice(l);
    let space = FockSpace::new(l, Statistics::Fermion, 2).unwrap();
    let single = single_particle_rates(&grid, 1.0, 10.0);
    let sym = symmetric_flash_rate(&space, &single, 2).unwrap();
    let range = space.sector_range(2);
    // Slater determinants built by hand: (|ab⟩ - |ba⟩)/√2 for a < b
    let mut slater = Vec::new();
    for a in 0..l {
        for b in a + 1..l {
            let mut v = DVector::from_element(l * l, Cx::new(0.0, 0.0));
            v[a * l + b] = Cx::new(0.5f64.sqrt(), 0.0);
            v[b * l + a] = Cx::new(-0.5f64.sqrt(), 0.0);
            let mut occ = vec![0u8; l];
            occ[a] = 1;
            occ[b] = 1;
            slater.push((space.index_of(&occ).unwrap() - range.start, v));
        }
    }
    for (r, op) in sym.iter().enumerate() {
        let lam = single[r].to_dense();
        let id = DMatrix::<Cx>::identity(l, l);
        let two = lam.kronecker(&id) + id.kronecker(&lam);
        for (i, vi) in &slater {
            for (j, vj) in &slater {
                let brute = vi.dotc(&(&two * vj));
                assert!((op.entry(*i, *j) - brute).norm() < 1e-12);
            }
        }
    }
}

#[test]
fn vacuum_block_is_zero_and_blocks_match_sectors() {
    let space = FockSpace::new(4, Statistics::Boson, 3).unwrap();
    let single = single_particle_rates(&lattice(4), 1.0, 10.0);
    let fock = fock_flash_rate(&space, &single).unwrap();
    let number = space.number_operator::<f64>().to_dense();
    for (r, op) in fock.iter().enumerate() {
        let m = op.to_dense();
        assert_eq!(m[(0, 0)], Cx::new(0.0, 0.0));
        assert!((&m * &number - &number * &m).norm() < 1e-13);
        for n in 1..=3 {
            let range = space.sector_range(n);
            let block = m.view((range.start, range.start), (range.len(), range.len()));
            let sym = symmetric_flash_rate(&space, &single, n).unwrap();
            assert!((block - sym[r].to_dense()).norm() < 1e-15);
        }
    }
}

#[test]
fn smeared_density_expectations() {
    let grid = lattice(5);
    let space = FockSpace::new(5, Statistics::Fermion, 2).unwrap();
    let ops = smeared_number_density(&space, &grid, 1.0, 10.0).unwrap();
    for op in &ops {
        assert!(op.entry(0, 0).norm() < 1e-15);
    }
    // one-particle state φ: ⟨Λ(r)⟩ = (1/τ) Σ g(r - r') |φ(r')|² Δr, with |φ|²Δr the cell weight
    let phi = [0.1, 0.5, -0.3, 0.7, 0.2];
    let norm: f64 = phi.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut psi = DVector::from_element(space.dim(), Cx::new(0.0, 0.0));
    for (s, amp) in phi.iter().enumerate() {
        let mut occ = vec![0u8; 5];
        occ[s] = 1;
        psi[space.index_of(&occ).unwrap()] = Cx::new(amp / norm, 0.0);
    }
    for (r, op) in ops.iter().enumerate() {
        let ev = psi.dotc(&op.apply(&psi)).re;
        let mut expect = 0.0;
        for (s, amp) in phi.iter().enumerate() {
            expect += flashsim::grw::periodic_gaussian(&grid, r, s, 1.0) / 10.0 * (amp / norm).powi(2);
        }
        assert!((ev - expect).abs() < 1e-15);
    }
    let mut total = OperatorMatrix::zeros(space.dim());
    for op in &ops {
        total = total.add(&op.scale(0.5)).unwrap();
    }
    let n = space.number_operator::<f64>().scale(0.1);
    assert!((total.to_dense() - n.to_dense()).norm() < 1e-10);
}

#[test]
fn two_constructions_agree() {
    for stats in [Statistics::Fermion, Statistics::Boson] {
        let grid = lattice(6);
        let space = FockSpace::new(6, stats, 3).unwrap();
        let single = single_particle_rates(&grid, 1.0, 10.0);
        let a = fock_flash_rate(&space, &single).unwrap();
        let b = smeared_number_density(&space, &grid, 1.0, 10.0).unwrap();
        assert!(max_operator_distance(&a, &b) <= 1e-10);
    }
}

fn sector_mix(space: &FockSpace, weights: &[(Vec<u8>, f64)]) -> StateVector<f64> {
    let mut v = DVector::from_element(space.dim(), Cx::new(0.0, 0.0));
    for (occ, a) in weights {
        v[space.index_of(occ).unwrap()] = Cx::new(*a, 0.0);
    }
    StateVector::normalized(v, vec![space.dim()]).unwrap()
}

#[test]
fn survival_is_not_exponential_for_mixed_particle_number() {
    let grid = lattice(4);
    let space = FockSpace::new(4, Statistics::Fermion, 2).unwrap();
    let h = toy_hamiltonian(&space, 0.5, &[0.0, 0.1, 0.0, -0.1], 0.0).unwrap();
    let model = fock_flash_model(&space, &grid, 1.0, 10.0, h).unwrap();
    assert!(model.total_rate_scalar().is_none());
    let psi = sector_mix(&space, &[(vec![1, 0, 0, 0], 1.0), (vec![0, 1, 1, 0], 1.0)]);
    let rule = GaussLegendre::new(10);
    // λ from the initial slope; exact survival is (e^{-t/τ} + e^{-2t/τ})/2
    let lambda = 0.15;
    let mut max_dev: f64 = 0.0;
    for t in [5.0, 10.0, 20.0] {
        let s = survival_probability(&model, &psi, 0.0, t).unwrap();
        let exact = 0.5 * ((-t / 10.0f64).exp() + (-t / 5.0f64).exp());
        assert!((s - exact).abs() < 1e-10);
        // independent route: 1 - ∫ flash-time density
        let mut integral = 0.0;
        for (u, w) in rule.composite(0.0, t, 20) {
            let ev = model.propagate(u, psi.amplitudes()).unwrap();
            integral += w * model.flash_weights(&ev).iter().sum::<f64>();
        }
        assert!((1.0 - integral - s).abs() < 1e-6);
        max_dev = max_dev.max((s - (-lambda * t).exp()).abs());
    }
    assert!(max_dev > 10.0 * 1e-6);
}

#[test]
fn consistency_holds_with_pair_creation() {
    let grid = lattice(4);
    let space = FockSpace::new(4, Statistics::Boson, 3).unwrap();
    let h = toy_hamiltonian(&space, 0.5, &[0.0; 4], 0.3).unwrap();
    let model = fock_flash_model(&space, &grid, 1.0, 10.0, h).unwrap();
    let psi = sector_mix(&space, &[(vec![0, 0, 0, 0], 1.0), (vec![0, 1, 0, 0], 0.5)]);
    let rule = GaussLegendre::new(10);
    for events in [vec![], vec![FlashEvent { t: 1.5, site: 1, kind: 0 }]] {
        let hist = FlashHistory::from_events(0.0, 1, &events).unwrap();
        let (lhs, rhs) = consistency_sides(&model, &psi, &hist, 8.0, &rule, 16).unwrap();
        assert!((lhs - rhs).abs() <= 1e-6 * rhs, "{lhs} {rhs}");
    }
}

/// Averaged state after time `t` (all flash outcomes), by RK4 on the
/// Lindblad form of the flash process.
fn averaged_sector_weights(space: &FockSpace, h: &DMatrix<Cx>, rates: &[OperatorMatrix<f64>], dv: f64, rho0: DMatrix<Cx>, t: f64) -> Vec<f64> {
    let sq: Vec<DMatrix<Cx>> = rates.iter().map(|r| flashsim::hilbert::positive_sqrt(r).unwrap().to_dense()).collect();
    let gamma: DMatrix<Cx> = rates.iter().map(|r| r.to_dense() * Cx::new(dv, 0.0)).fold(DMatrix::zeros(h.nrows(), h.nrows()), |a, b| a + b);
    let rhs = |rho: &DMatrix<Cx>| {
        let mut d = (h * rho - rho * h) * Cx::new(0.0, -1.0);
        for s in &sq {
            d += s * rho * s * Cx::new(dv, 0.0);
        }
        d - (&gamma * rho + rho * &gamma) * Cx::new(0.5, 0.0)
    };
    let steps = 400;
    let dt = t / steps as f64;
    let mut rho = rho0;
    for _ in 0..steps {
        let k1 = rhs(&rho);
        let k2 = rhs(&(&rho + &k1 * Cx::new(dt / 2.0, 0.0)));
        let k3 = rhs(&(&rho + &k2 * Cx::new(dt / 2.0, 0.0)));
        let k4 = rhs(&(&rho + &k3 * Cx::new(dt, 0.0)));
        rho += (k1 + k2 * Cx::new(2.0, 0.0) + k3 * Cx::new(2.0, 0.0) + k4) * Cx::new(dt / 6.0, 0.0);
    }
    (0..=space.n_max()).map(|n| space.sector_range(n).map(|i| rho[(i, i)].re).sum()).collect()
}

#[test]
fn sector_probabilities_and_number_conservation() {
    let grid = lattice(3);
    let space = FockSpace::new(3, Statistics::Fermion, 3).unwrap();
    let rates = fock_flash_rate(&space, &single_particle_rates(&grid, 1.0, 10.0)).unwrap();
    let psi = sector_mix(&space, &[(vec![1, 0, 0], 1.0), (vec![1, 1, 0], 0.7), (vec![0, 0, 0], 0.3)]);
    let rho0 = psi.amplitudes() * psi.amplitudes().adjoint();
    let before = space.sector_weights(psi.amplitudes());
    let hop = toy_hamiltonian(&space, 0.8, &[0.1, 0.0, -0.2], 0.0).unwrap();
    let after = averaged_sector_weights(&space, &hop, &rates, 0.5, rho0.clone(), 5.0);
    for (a, b) in before.iter().zip(&after) {
        assert!((a - b).abs() < 1e-10);
    }
    let pair = toy_hamiltonian(&space, 0.8, &[0.1, 0.0, -0.2], 0.4).unwrap();
    let after = averaged_sector_weights(&space, &pair, &rates, 0.5, rho0, 5.0);
    let shift: f64 = before.iter().zip(&after).map(|(a, b)| (a - b).abs()).sum();
    assert!(shift > 1e-3);
    assert!((after.iter().sum::<f64>() - 1.0).abs() < 1e-8);
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn constructions_agree_on_random_lattices(
            sites in 2usize..6,
            n_max in 1usize..4,
            boson in any::<bool>(),
            sigma in 0.3f64..2.0,
            tau in 1.0f64..20.0,
        ) {
            // more fermions than sites is rejected, see above
            let (stats, n_max) = if boson { (Statistics::Boson, n_max) } else { (Statistics::Fermion, n_max.min(sites)) };
            let grid = lattice(sites);
            let space = FockSpace::new(sites, stats, n_max).unwrap();
            let a = fock_flash_rate(&space, &single_particle_rates(&grid, sigma, tau)).unwrap();
            let b = smeared_number_density(&space, &grid, sigma, tau).unwrap();
            prop_assert!(max_operator_distance(&a, &b) <= 1e-10);
        }
    }
}
