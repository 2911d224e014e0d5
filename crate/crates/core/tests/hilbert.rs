use flashsim::hilbert::*;
use flashsim::scalar::{CMatrix, CVector, C};
use proptest::prelude::*;

fn matrix(n: usize) -> impl Strategy<Value = CMatrix<f64>> {
    prop::collection::vec(-1.0f64..1.0, 2 * n * n)
        .prop_map(move |v| CMatrix::from_fn(n, n, |i, j| C::new(v[2 * (i * n + j)], v[2 * (i * n + j) + 1])))
}

fn vector(n: usize) -> impl Strategy<Value = CVector<f64>> {
    prop::collection::vec(-1.0f64..1.0, 2 * n).prop_map(move |v| CVector::from_fn(n, |i, _| C::new(v[2 * i], v[2 * i + 1])))
}

fn hermitian(n: usize) -> impl Strategy<Value = CMatrix<f64>> {
    matrix(n).prop_map(|m| (&m + m.adjoint()) * C::new(0.5, 0.0))
}

fn dense(m: &CMatrix<f64>) -> OperatorMatrix<f64> {
    OperatorMatrix::dense(m.clone(), OperatorKind::General)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tensor_product_is_associative(a in matrix(2), b in matrix(3), c in matrix(2)) {
        let left = tensor_product(&tensor_product(&dense(&a), &dense(&b)), &dense(&c)).to_dense();
        let right = tensor_product(&dense(&a), &tensor_product(&dense(&b), &dense(&c))).to_dense();
        prop_assert!((left - right).norm() < 1e-12);
    }

    #[test]
    fn partial_trace_commutes_with_local_maps(a in matrix(3), psi in vector(6)) {
        prop_assume!(psi.norm() > 1e-3);
        let rho = DensityMatrix::from_pure(&psi.normalize());
        let lifted = tensor_product(&dense(&a), &OperatorMatrix::identity(2)).to_dense();
        let conj = DensityMatrix::from_entries_unchecked(&lifted * rho.entries() * lifted.adjoint());
        let lhs = partial_trace(&conj, 0, &[3, 2]).unwrap();
        let red = partial_trace(&rho, 0, &[3, 2]).unwrap();
        let rhs = &a * red.entries() * a.adjoint();
        prop_assert!((lhs.entries() - rhs).norm() < 1e-10);
    }

    #[test]
    fn propagator_is_a_semigroup(h in hermitian(4), g in matrix(4), s in 0.0f64..2.0, t in 0.0f64..2.0) {
        // G = -iH - ½Γ with Γ = g g† positive
        let gamma = &g * g.adjoint();
        let gen = dense(&(h * C::new(0.0, -1.0) - gamma * C::new(0.5, 0.0)));
        let ws = semigroup_propagator(&gen, s).unwrap().to_dense();
        let wt = semigroup_propagator(&gen, t).unwrap().to_dense();
        let wst = semigroup_propagator(&gen, s + t).unwrap().to_dense();
        prop_assert!((wst - ws * wt).norm() < 1e-9);
    }

    #[test]
    fn contraction_for_dissipative_generator(h in hermitian(3), g in matrix(3), t in 0.0f64..5.0, v in vector(3)) {
        let gamma = &g * g.adjoint();
        let gen = dense(&(h * C::new(0.0, -1.0) - gamma * C::new(0.5, 0.0)));
        let w = semigroup_propagator(&gen, t).unwrap();
        prop_assert!(w.apply(&v).norm() <= v.norm() * (1.0 + 1e-12));
    }

    #[test]
    fn square_root_fixes_projectors(vs in prop::collection::vec(vector(5), 1..4)) {
        // orthonormalise, drop near-dependent directions
        let mut basis: Vec<CVector<f64>> = Vec::new();
        for v in vs {
            let mut w = v.clone();
            for b in &basis {
                w -= b * b.dotc(&w);
            }
            if w.norm() > 1e-3 {
                basis.push(w.normalize());
            }
        }
        let p = basis.iter().fold(CMatrix::zeros(5, 5), |acc, b| acc + b * b.adjoint());
        let root = positive_sqrt(&OperatorMatrix::dense(p.clone(), OperatorKind::Positive)).unwrap().to_dense();
        prop_assert!((root - p).norm() < 1e-9);
    }

    #[test]
    fn square_root_squares_back(m in matrix(4)) {
        let p = &m * m.adjoint();
        let root = positive_sqrt(&OperatorMatrix::dense(p.clone(), OperatorKind::Positive)).unwrap().to_dense();
        prop_assert!((&root * &root - &p).norm() < 1e-9 * p.norm().max(1.0));
        prop_assert!((&root - root.adjoint()).norm() < 1e-12);
    }
}
