//! Several noninteracting systems, each with its own flash types and its own
//! time variable. The joint law of the first flashes of every system is
//! `‖⊗_i K_{i,n_i} ψ‖²`, where each `K_i` may stop at a different time.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grw::{history_operator, FlashEvent, FlashHistory, FlashProcess};
use crate::hilbert::{apply_on_factor, StateVector};
use crate::quadrature::GaussLegendre;
use crate::scalar::{creal, to_f64, vec_norm_sqr, CMatrix, CVector, Real};

/// Rejects a total Hamiltonian that is not `Σ_i H_i ⊗ (identity elsewhere)`.
pub fn check_noninteracting<T: Real>(total: &CMatrix<T>, parts: &[CMatrix<T>], tol: T) -> Result<()> {
    let dims: Vec<usize> = parts.iter().map(|h| h.nrows()).collect();
    let n: usize = dims.iter().product();
    if total.nrows() != n {
        return Err(Error::DimensionMismatch { expected: n, found: total.nrows() });
    }
    let mut sum = DMatrix::from_element(n, n, creal(T::zero()));
    for (k, h) in parts.iter().enumerate() {
        let mut term = DMatrix::<nalgebra::Complex<T>>::identity(1, 1);
        for (j, d) in dims.iter().enumerate() {
            let factor = if j == k { h.clone() } else { DMatrix::identity(*d, *d) };
            term = term.kronecker(&factor);
        }
        sum += term;
    }
    if (total - sum).norm() > tol {
        return Err(Error::InteractingHamiltonian);
    }
    Ok(())
}

fn check_dims<T: Real, M: FlashProcess<T>>(systems: &[M], psi: &StateVector<T>, histories: &[FlashHistory<T>]) -> Result<Vec<usize>> {
    let dims: Vec<usize> = systems.iter().map(|m| m.dim()).collect();
    let n: usize = dims.iter().product();
    if psi.dim() != n {
        return Err(Error::DimensionMismatch { expected: n, found: psi.dim() });
    }
    if histories.len() != systems.len() {
        return Err(Error::DimensionMismatch { expected: systems.len(), found: histories.len() });
    }
    Ok(dims)
}

/// `(⊗_i K_i) ψ`.
pub fn apply_multitime<T: Real, M: FlashProcess<T>>(systems: &[M], psi: &StateVector<T>, histories: &[FlashHistory<T>]) -> Result<CVector<T>> {
    let dims = check_dims(systems, psi, histories)?;
    let mut v = psi.amplitudes().clone();
    for (k, (m, h)) in systems.iter().zip(histories).enumerate() {
        if h.is_empty() && h.t0 == h.last_time() {
            continue;
        }
        let op = history_operator(m, h)?.to_dense();
        v = apply_on_factor(&op, k, &dims, &v);
    }
    Ok(v)
}

/// `‖⊗_i K_{i,n_i} ψ‖²`.
pub fn multitype_joint_density<T: Real, M: FlashProcess<T>>(systems: &[M], psi: &StateVector<T>, histories: &[FlashHistory<T>]) -> Result<T> {
    Ok(vec_norm_sqr(&apply_multitime(systems, psi, histories)?))
}

/// Operator `W_{t_end - t_n} K_n` of one system for a history ending at `t_end`.
pub fn conditioned_operator<T: Real, M: FlashProcess<T>>(model: &M, history: &FlashHistory<T>, t_end: T) -> Result<CMatrix<T>> {
    let last = history.last_time();
    if t_end < last {
        return Err(Error::BeforeInitialTime { t: to_f64(t_end), t0: to_f64(last) });
    }
    let k = history_operator(model, history)?;
    Ok(model.propagator_operator(t_end - last)?.compose(&k).to_dense())
}

/// `ψ_Δ = W_{Δ + t₀ - t_{n'}} K_{1,n'} ψ / ‖·‖` with `W`, `K` acting on system 0.
/// `past` holds the system-0 flashes in `[t₀, t₀ + Δ]`.
pub fn shift_and_condition<T: Real, M: FlashProcess<T>>(
    psi: &StateVector<T>,
    systems: &[M],
    delta: T,
    past: &FlashHistory<T>,
) -> Result<StateVector<T>> {
    if delta < T::zero() {
        return Err(Error::InvalidParameter { name: "delta", reason: "time shift must be nonnegative".into() });
    }
    let dims: Vec<usize> = systems.iter().map(|m| m.dim()).collect();
    if psi.dim() != dims.iter().product::<usize>() {
        return Err(Error::DimensionMismatch { expected: dims.iter().product(), found: psi.dim() });
    }
    let op = conditioned_operator(&systems[0], past, past.t0 + delta)?;
    let v = apply_on_factor(&op, 0, &dims, psi.amplitudes());
    let norm = vec_norm_sqr(&v).sqrt();
    if !(to_f64(norm) > 1e-150) {
        return Err(Error::ImpossibleHistory { norm: to_f64(norm) });
    }
    StateVector::new(v / creal(norm), psi.dims().to_vec())
}

/// One future configuration for the covariance check: system-0 flashes in
/// shifted time (after `t₀`) and flashes of the other systems.
#[derive(Debug, Clone)]
pub struct FutureFlashes<T> {
    pub system0: Vec<FlashEvent<T>>,
    pub others: Vec<Vec<FlashEvent<T>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceReport {
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
}

/// Evaluates the conditional density of future flashes two ways:
/// the Bayes quotient of original-law densities with system 0 run `Δ` ahead,
/// and the multi-time law started from `ψ_Δ`.
pub fn covariance_check<T: Real, M: FlashProcess<T>>(
    psi: &StateVector<T>,
    systems: &[M],
    delta: T,
    past: &FlashHistory<T>,
    tests: &[FutureFlashes<T>],
) -> Result<CovarianceReport> {
    let t0 = past.t0;
    let types0 = systems[0].flash_types();
    let dims: Vec<usize> = systems.iter().map(|m| m.dim()).collect();
    let cond = conditioned_operator(&systems[0], past, t0 + delta)?;
    let denominator = vec_norm_sqr(&apply_on_factor(&cond, 0, &dims, psi.amplitudes()));
    if !(to_f64(denominator) > 0.0) {
        return Err(Error::ImpossibleHistory { norm: to_f64(denominator) });
    }
    let psi_delta = shift_and_condition(psi, systems, delta, past)?;
    let mut report = CovarianceReport { lhs: Vec::new(), rhs: Vec::new(), max_abs_diff: 0.0, max_rel_diff: 0.0 };
    for test in tests {
        let mut full0 = past.by_type.iter().flatten().copied().collect::<Vec<_>>();
        full0.extend(test.system0.iter().map(|e| FlashEvent { t: e.t + delta, ..*e }));
        let mut original = vec![FlashHistory::from_events(t0, types0, &full0)?];
        let mut shifted = vec![FlashHistory::from_events(t0, types0, &test.system0)?];
        for (k, events) in test.others.iter().enumerate() {
            let h = FlashHistory::from_events(t0, systems[k + 1].flash_types(), events)?;
            original.push(h.clone());
            shifted.push(h);
        }
        // with no future system-0 flash the original-law event still requires
        // no system-0 flash in (t_{n'}, t₀ + Δ]
        let lhs = if test.system0.is_empty() {
            let mut v = apply_on_factor(&cond, 0, &dims, psi.amplitudes());
            for (k, h) in original.iter().enumerate().skip(1) {
                v = apply_on_factor(&history_operator(&systems[k], h)?.to_dense(), k, &dims, &v);
            }
            vec_norm_sqr(&v) / denominator
        } else {
            multitype_joint_density(systems, psi, &original)? / denominator
        };
        let rhs = multitype_joint_density(systems, &psi_delta, &shifted)?;
        let (l, r) = (to_f64(lhs), to_f64(rhs));
        report.max_abs_diff = report.max_abs_diff.max((l - r).abs());
        report.max_rel_diff = report.max_rel_diff.max((l - r).abs() / l.abs().max(r.abs()).max(f64::MIN_POSITIVE));
        report.lhs.push(l);
        report.rhs.push(r);
    }
    Ok(report)
}

/// Density of the system-1 flashes `f` with every system-0 outcome up to
/// `horizon` summed out, computed as survival plus the first-flash integral:
/// `‖(W_T ⊗ K)ψ‖² + ∫₀^T Σ_r ‖(Λ(r)^{1/2} W_t ⊗ K)ψ‖² dt`.
pub fn system1_marginal<T: Real, M: FlashProcess<T>>(
    psi: &StateVector<T>,
    systems: &[M],
    f: &FlashHistory<T>,
    horizon: T,
    rule: &GaussLegendre,
    panels: usize,
) -> Result<T> {
    if systems.len() != 2 {
        return Err(Error::Unsupported("marginal check is written for two systems".into()));
    }
    let dims = vec![systems[0].dim(), systems[1].dim()];
    let k2 = history_operator(&systems[1], f)?.to_dense();
    let v = apply_on_factor(&k2, 1, &dims, psi.amplitudes());
    let t0 = f.t0;
    let (d0, d1) = (dims[0], dims[1]);
    // columns are system-0 vectors, one per system-1 basis index
    let as_matrix = |w: &CVector<T>| DMatrix::from_fn(d0, d1, |i, j| w[i * d1 + j]);
    let m = as_matrix(&v);
    let propagate_cols = |dt: T| -> Result<CMatrix<T>> {
        let mut out = m.clone();
        for j in 0..d1 {
            let col: CVector<T> = m.column(j).into_owned();
            out.set_column(j, &systems[0].propagate(dt, &col)?);
        }
        Ok(out)
    };
    let survival = propagate_cols(horizon - t0)?.iter().fold(T::zero(), |acc, z| acc + z.norm_sqr());
    let mut integral = T::zero();
    for (t, w) in rule.composite(t0, horizon, panels) {
        let evolved = propagate_cols(t - t0)?;
        let mut dens = T::zero();
        for j in 0..d1 {
            let col: CVector<T> = evolved.column(j).into_owned();
            dens += systems[0].flash_weights(&col).into_iter().fold(T::zero(), |a, b| a + b);
        }
        integral += w * dens;
    }
    Ok(survival + integral)
}

/// `‖(1 ⊗ K(f)) ψ‖²`, what [`system1_marginal`] equals for every horizon.
pub fn system1_marginal_closed<T: Real, M: FlashProcess<T>>(psi: &StateVector<T>, systems: &[M], f: &FlashHistory<T>) -> Result<T> {
    let dims: Vec<usize> = systems.iter().map(|m| m.dim()).collect();
    Ok(vec_norm_sqr(&apply_on_factor(&history_operator(&systems[1], f)?.to_dense(), 1, &dims, psi.amplitudes())))
}
