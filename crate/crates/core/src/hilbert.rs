//! Dense finite-dimensional Hilbert-space machinery.
//!
//! States are complex amplitude vectors tagged with their tensor-factor
//! dimensions (system-1 index major). Operators carry a kind tag that records
//! which structural property (hermitian, positive, unitary) the producer
//! guarantees; [`OperatorMatrix::validate`] re-checks it numerically.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::{cabs, cexp, creal, is_finite, lit, to_f64, vec_norm_sqr, CMatrix, CVector, Real, C};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    General,
    Hermitian,
    Positive,
    Unitary,
}

#[derive(Debug, Clone, PartialEq)]
enum Repr<T: Real> {
    Dense(CMatrix<T>),
    Diagonal(CVector<T>),
}

/// A linear map on a finite-dimensional state space.
///
/// Multiplication operators in a position basis are stored as diagonals so
/// that multi-particle flash-rate fields stay cheap.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorMatrix<T: Real> {
    repr: Repr<T>,
    kind: OperatorKind,
}

impl<T: Real> OperatorMatrix<T> {
    pub fn dense(entries: CMatrix<T>, kind: OperatorKind) -> Self {
        assert_eq!(entries.nrows(), entries.ncols(), "operator must be square");
        Self { repr: Repr::Dense(entries), kind }
    }

    pub fn diagonal(entries: CVector<T>, kind: OperatorKind) -> Self {
        Self { repr: Repr::Diagonal(entries), kind }
    }

    /// Diagonal operator with real entries; positive when all are nonnegative.
    pub fn real_diagonal(entries: &[T]) -> Self {
        let kind = if entries.iter().all(|v| *v >= T::zero()) {
            OperatorKind::Positive
        } else {
            OperatorKind::Hermitian
        };
        Self::diagonal(DVector::from_iterator(entries.len(), entries.iter().map(|v| creal(*v))), kind)
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(DVector::from_element(dim, creal(T::one())), OperatorKind::Positive)
    }

    pub fn zeros(dim: usize) -> Self {
        Self::diagonal(DVector::from_element(dim, creal(T::zero())), OperatorKind::Positive)
    }

    pub fn dim(&self) -> usize {
        match &self.repr {
            Repr::Dense(m) => m.nrows(),
            Repr::Diagonal(d) => d.len(),
        }
    }

    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: OperatorKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self.repr, Repr::Diagonal(_))
    }

    pub fn diagonal_entries(&self) -> Option<&CVector<T>> {
        match &self.repr {
            Repr::Diagonal(d) => Some(d),
            Repr::Dense(_) => None,
        }
    }

    pub fn to_dense(&self) -> CMatrix<T> {
        match &self.repr {
            Repr::Dense(m) => m.clone(),
            Repr::Diagonal(d) => DMatrix::from_diagonal(d),
        }
    }

    pub fn entry(&self, i: usize, j: usize) -> C<T> {
        match &self.repr {
            Repr::Dense(m) => m[(i, j)],
            Repr::Diagonal(d) => {
                if i == j {
                    d[i]
                } else {
                    creal(T::zero())
                }
            }
        }
    }

    pub fn apply(&self, v: &CVector<T>) -> CVector<T> {
        match &self.repr {
            Repr::Dense(m) => m * v,
            Repr::Diagonal(d) => d.component_mul(v),
        }
    }

    pub fn adjoint(&self) -> Self {
        let kind = match self.kind {
            OperatorKind::Positive | OperatorKind::Hermitian | OperatorKind::Unitary => self.kind,
            OperatorKind::General => OperatorKind::General,
        };
        match &self.repr {
            Repr::Dense(m) => Self::dense(m.adjoint(), kind),
            Repr::Diagonal(d) => Self::diagonal(d.map(|z| z.conj()), kind),
        }
    }

    /// Operator product `self · rhs`.
    pub fn compose(&self, rhs: &Self) -> Self {
        let kind = match (self.kind, rhs.kind) {
            (OperatorKind::Unitary, OperatorKind::Unitary) => OperatorKind::Unitary,
            _ => OperatorKind::General,
        };
        match (&self.repr, &rhs.repr) {
            (Repr::Diagonal(a), Repr::Diagonal(b)) => {
                let kind = match (self.kind, rhs.kind) {
                    (OperatorKind::Positive, OperatorKind::Positive) => OperatorKind::Positive,
                    _ => kind,
                };
                Self::diagonal(a.component_mul(b), kind)
            }
            (Repr::Diagonal(a), Repr::Dense(b)) => {
                let mut m = b.clone();
                for (i, mut row) in m.row_iter_mut().enumerate() {
                    row *= a[i];
                }
                Self::dense(m, kind)
            }
            (Repr::Dense(a), Repr::Diagonal(b)) => {
                let mut m = a.clone();
                for (j, mut col) in m.column_iter_mut().enumerate() {
                    col *= b[j];
                }
                Self::dense(m, kind)
            }
            (Repr::Dense(a), Repr::Dense(b)) => Self::dense(a * b, kind),
        }
    }

    pub fn scale(&self, factor: T) -> Self {
        let kind = if factor >= T::zero() {
            match self.kind {
                OperatorKind::Unitary => OperatorKind::General,
                k => k,
            }
        } else {
            OperatorKind::General
        };
        match &self.repr {
            Repr::Dense(m) => Self::dense(m * creal(factor), kind),
            Repr::Diagonal(d) => Self::diagonal(d * creal(factor), kind),
        }
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        if self.dim() != rhs.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: rhs.dim() });
        }
        let kind = match (self.kind, rhs.kind) {
            (OperatorKind::Positive, OperatorKind::Positive) => OperatorKind::Positive,
            (a, b) if is_selfadjoint(a) && is_selfadjoint(b) => OperatorKind::Hermitian,
            _ => OperatorKind::General,
        };
        Ok(match (&self.repr, &rhs.repr) {
            (Repr::Diagonal(a), Repr::Diagonal(b)) => Self::diagonal(a + b, kind),
            _ => Self::dense(self.to_dense() + rhs.to_dense(), kind),
        })
    }

    /// Largest absolute entry of `A - A†`.
    pub fn hermiticity_defect(&self) -> T {
        match &self.repr {
            Repr::Diagonal(d) => d.iter().fold(T::zero(), |acc, z| acc.max(z.im.abs())),
            Repr::Dense(m) => {
                let n = m.nrows();
                let mut worst = T::zero();
                for i in 0..n {
                    for j in i..n {
                        let dev = cabs(m[(i, j)] - m[(j, i)].conj());
                        worst = worst.max(dev);
                    }
                }
                worst
            }
        }
    }

    /// Spectral norm for hermitian operators, Frobenius bound otherwise.
    pub fn norm_bound(&self) -> T {
        match &self.repr {
            Repr::Diagonal(d) => d.iter().fold(T::zero(), |acc, z| acc.max(cabs(*z))),
            Repr::Dense(m) => m.norm(),
        }
    }

    /// Re-checks the invariant implied by the kind tag.
    pub fn validate(&self, tol: T) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::NonFinite("operator"));
        }
        match self.kind {
            OperatorKind::General => Ok(()),
            OperatorKind::Hermitian => self.check_hermitian(tol),
            OperatorKind::Positive => {
                self.check_hermitian(tol)?;
                let min = self.min_eigenvalue();
                if min < -tol {
                    Err(Error::NotPositive { min_eigenvalue: to_f64(min), tolerance: to_f64(tol) })
                } else {
                    Ok(())
                }
            }
            OperatorKind::Unitary => {
                let m = self.to_dense();
                let defect = (m.adjoint() * &m - DMatrix::identity(m.nrows(), m.ncols())).norm();
                if defect > tol {
                    Err(Error::InvalidParameter {
                        name: "operator",
                        reason: format!("not unitary: |U†U - I| = {:e}", to_f64(defect)),
                    })
                } else {
                    Ok(())
                }
            }
        }
    }

    fn check_hermitian(&self, tol: T) -> Result<()> {
        let dev = self.hermiticity_defect();
        if dev > tol {
            Err(Error::NotHermitian { deviation: to_f64(dev) })
        } else {
            Ok(())
        }
    }

    pub fn is_finite(&self) -> bool {
        match &self.repr {
            Repr::Dense(m) => m.iter().all(|z| is_finite(*z)),
            Repr::Diagonal(d) => d.iter().all(|z| is_finite(*z)),
        }
    }

    fn min_eigenvalue(&self) -> T {
        match &self.repr {
            Repr::Diagonal(d) => d.iter().fold(T::max_value().unwrap(), |acc, z| acc.min(z.re)),
            Repr::Dense(m) => {
                let ev = hermitian_part(m).symmetric_eigenvalues();
                ev.iter().fold(T::max_value().unwrap(), |acc, v| acc.min(*v))
            }
        }
    }
}

fn is_selfadjoint(kind: OperatorKind) -> bool {
    matches!(kind, OperatorKind::Hermitian | OperatorKind::Positive)
}

fn hermitian_part<T: Real>(m: &CMatrix<T>) -> CMatrix<T> {
    (m + m.adjoint()) * creal(lit::<T>(0.5))
}

/// Normalized amplitude vector on a (possibly tensor-factored) state space.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector<T: Real> {
    amplitudes: CVector<T>,
    dims: Vec<usize>,
    norm_tol: T,
}

impl<T: Real> StateVector<T> {
    /// Wraps raw amplitudes; `dims` lists the tensor factors (system-1 major).
    pub fn new(amplitudes: CVector<T>, dims: Vec<usize>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != amplitudes.len() {
            return Err(Error::DimensionMismatch { expected, found: amplitudes.len() });
        }
        if !amplitudes.iter().all(|z| is_finite(*z)) {
            return Err(Error::NonFinite("state amplitudes"));
        }
        Ok(Self { amplitudes, dims, norm_tol: lit(1e-10) })
    }

    /// Builds and normalizes in one step.
    pub fn normalized(amplitudes: CVector<T>, dims: Vec<usize>) -> Result<Self> {
        let mut s = Self::new(amplitudes, dims)?;
        s.normalize()?;
        Ok(s)
    }

    pub fn single(amplitudes: CVector<T>) -> Result<Self> {
        let n = amplitudes.len();
        Self::new(amplitudes, vec![n])
    }

    pub fn with_norm_tol(mut self, tol: T) -> Self {
        self.norm_tol = tol;
        self
    }

    pub fn amplitudes(&self) -> &CVector<T> {
        &self.amplitudes
    }

    pub fn into_amplitudes(self) -> CVector<T> {
        self.amplitudes
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn norm_tol(&self) -> T {
        self.norm_tol
    }

    pub fn norm(&self) -> T {
        vec_norm_sqr(&self.amplitudes).sqrt()
    }

    pub fn is_normalized(&self) -> bool {
        (self.norm() - T::one()).abs() <= self.norm_tol
    }

    pub fn normalize(&mut self) -> Result<()> {
        let n = self.norm();
        if !(to_f64(n) > f64::MIN_POSITIVE) {
            return Err(Error::ImpossibleHistory { norm: to_f64(n) });
        }
        self.amplitudes /= creal(n);
        Ok(())
    }

    pub fn tensor(&self, other: &Self) -> Self {
        let amplitudes = self.amplitudes.kronecker(&other.amplitudes);
        let mut dims = self.dims.clone();
        dims.extend_from_slice(&other.dims);
        Self { amplitudes, dims, norm_tol: self.norm_tol.max(other.norm_tol) }
    }

    pub fn apply(&self, op: &OperatorMatrix<T>) -> Result<Self> {
        if op.dim() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: op.dim() });
        }
        Ok(Self { amplitudes: op.apply(&self.amplitudes), dims: self.dims.clone(), norm_tol: self.norm_tol })
    }
}

/// Hermitian, unit-trace, positive semidefinite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix<T: Real> {
    entries: CMatrix<T>,
}

impl<T: Real> DensityMatrix<T> {
    pub fn new(entries: CMatrix<T>, tol: T) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(Error::DimensionMismatch { expected: entries.nrows(), found: entries.ncols() });
        }
        let op = OperatorMatrix::dense(entries.clone(), OperatorKind::Positive);
        op.validate(tol)?;
        let tr = entries.trace();
        if (tr.re - T::one()).abs() > tol || tr.im.abs() > tol {
            return Err(Error::InvalidParameter {
                name: "density matrix",
                reason: format!("trace {} + {}i differs from 1", to_f64(tr.re), to_f64(tr.im)),
            });
        }
        Ok(Self { entries })
    }

    /// Skips validation; for matrices produced by trusted constructions.
    pub fn from_entries_unchecked(entries: CMatrix<T>) -> Self {
        Self { entries }
    }

    pub fn from_pure(psi: &CVector<T>) -> Self {
        Self { entries: psi * psi.adjoint() }
    }

    pub fn entries(&self) -> &CMatrix<T> {
        &self.entries
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn trace(&self) -> C<T> {
        self.entries.trace()
    }

    /// `tr(ρ A)`
    pub fn expectation(&self, op: &OperatorMatrix<T>) -> C<T> {
        let a = op.to_dense();
        (&self.entries * a).trace()
    }
}

/// Kronecker product with the first factor's index major.
pub fn tensor_product<T: Real>(a: &OperatorMatrix<T>, b: &OperatorMatrix<T>) -> OperatorMatrix<T> {
    let kind = match (a.kind(), b.kind()) {
        (OperatorKind::Positive, OperatorKind::Positive) => OperatorKind::Positive,
        (OperatorKind::Unitary, OperatorKind::Unitary) => OperatorKind::Unitary,
        (x, y) if is_selfadjoint(x) && is_selfadjoint(y) => OperatorKind::Hermitian,
        _ => OperatorKind::General,
    };
    match (a.diagonal_entries(), b.diagonal_entries()) {
        (Some(da), Some(db)) => OperatorMatrix::diagonal(da.kronecker(db), kind),
        _ => OperatorMatrix::dense(a.to_dense().kronecker(&b.to_dense()), kind),
    }
}

/// Traces out every subsystem except `keep`.
pub fn partial_trace<T: Real>(rho: &DensityMatrix<T>, keep: usize, dims: &[usize]) -> Result<DensityMatrix<T>> {
    let total: usize = dims.iter().product();
    if total != rho.dim() {
        return Err(Error::DimensionMismatch { expected: total, found: rho.dim() });
    }
    if keep >= dims.len() {
        return Err(Error::InvalidParameter { name: "keep", reason: format!("subsystem {keep} of {}", dims.len()) });
    }
    let inner: usize = dims[keep + 1..].iter().product();
    let outer: usize = dims[..keep].iter().product();
    let dk = dims[keep];
    let m = rho.entries();
    let mut out = DMatrix::from_element(dk, dk, creal(T::zero()));
    for a in 0..dk {
        for b in 0..dk {
            let mut acc = creal(T::zero());
            for o in 0..outer {
                for i in 0..inner {
                    let row = (o * dk + a) * inner + i;
                    let col = (o * dk + b) * inner + i;
                    acc += m[(row, col)];
                }
            }
            out[(a, b)] = acc;
        }
    }
    Ok(DensityMatrix { entries: out })
}

/// Hermitian eigendecomposition `(values, vectors)`.
pub fn eigh<T: Real>(m: &CMatrix<T>) -> (DVector<T>, CMatrix<T>) {
    let eig = hermitian_part(m).symmetric_eigen();
    (eig.eigenvalues, eig.eigenvectors)
}

/// Applies a real function to the spectrum of a hermitian matrix.
pub fn spectral_map<T: Real>(values: &DVector<T>, vectors: &CMatrix<T>, f: impl Fn(T) -> C<T>) -> CMatrix<T> {
    let mut scaled = vectors.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= f(values[j]);
    }
    scaled * vectors.adjoint()
}

/// Positive square root with eigenvalue clamping at `1e-12 × spectral radius`.
pub fn positive_sqrt<T: Real>(p: &OperatorMatrix<T>) -> Result<OperatorMatrix<T>> {
    if !p.is_finite() {
        return Err(Error::NonFinite("positive_sqrt input"));
    }
    if let Some(d) = p.diagonal_entries() {
        let radius = d.iter().fold(T::zero(), |acc, z| acc.max(cabs(*z)));
        let tol = lit::<T>(1e-12) * radius;
        let mut out = Vec::with_capacity(d.len());
        for z in d.iter() {
            if z.im.abs() > tol.max(lit(1e-300)) {
                return Err(Error::NotHermitian { deviation: to_f64(z.im.abs()) });
            }
            if z.re < -tol {
                return Err(Error::NotPositive { min_eigenvalue: to_f64(z.re), tolerance: to_f64(tol) });
            }
            out.push(z.re.max(T::zero()).sqrt());
        }
        return Ok(OperatorMatrix::real_diagonal(&out).with_kind(OperatorKind::Positive));
    }
    let m = p.to_dense();
    let (values, vectors) = eigh(&m);
    let radius = values.iter().fold(T::zero(), |acc, v| acc.max(v.abs()));
    let tol = lit::<T>(1e-12) * radius;
    let min = values.iter().fold(T::max_value().unwrap(), |acc, v| acc.min(*v));
    if min < -tol {
        return Err(Error::NotPositive { min_eigenvalue: to_f64(min), tolerance: to_f64(tol) });
    }
    // eigenvalues at the eigensolver's rounding level carry no information;
    // left alone they would survive as ~sqrt(eps) entries, e.g. in the root of a projector
    let noise = lit::<T>(values.len() as f64) * T::default_epsilon() * radius;
    let s = spectral_map(&values, &vectors, |v| creal(if v <= noise { T::zero() } else { v.sqrt() }));
    Ok(OperatorMatrix::dense(s, OperatorKind::Positive))
}

/// Spectral pseudo-inverse of a positive operator with a relative cutoff.
/// Returns the inverse and the number of dropped directions.
pub fn positive_pseudo_inverse<T: Real>(p: &CMatrix<T>, relative_cutoff: T) -> (CMatrix<T>, usize) {
    let (values, vectors) = eigh(p);
    let radius = values.iter().fold(T::zero(), |acc, v| acc.max(v.abs()));
    let cut = relative_cutoff * radius;
    let dropped = values.iter().filter(|v| **v <= cut).count();
    let inv = spectral_map(&values, &vectors, |v| if v > cut { creal(T::one() / v) } else { creal(T::zero()) });
    (inv, dropped)
}

/// `exp(t G)` for `t ≥ 0`, the zero operator for `t < 0`.
///
/// Diagonal, hermitian and anti-hermitian generators go through an exact
/// spectral route; anything else through scaling-and-squaring Padé.
pub fn semigroup_propagator<T: Real>(g: &OperatorMatrix<T>, t: T) -> Result<OperatorMatrix<T>> {
    if !g.is_finite() || !to_f64(t).is_finite() {
        return Err(Error::NonFinite("generator"));
    }
    let n = g.dim();
    if t < T::zero() {
        return Ok(OperatorMatrix::zeros(n).with_kind(OperatorKind::General));
    }
    if t == T::zero() {
        return Ok(OperatorMatrix::identity(n));
    }
    if let Some(d) = g.diagonal_entries() {
        let e = d.map(|z| cexp(z * creal(t)));
        return Ok(OperatorMatrix::diagonal(e, OperatorKind::General));
    }
    let m = g.to_dense();
    let scale = m.norm().max(T::one());
    let tol = lit::<T>(1e-13) * scale;
    let herm_defect = (&m - m.adjoint()).norm();
    let anti_defect = (&m + m.adjoint()).norm();
    let out = if herm_defect <= tol {
        let (values, vectors) = eigh(&m);
        OperatorMatrix::dense(spectral_map(&values, &vectors, |v| creal((v * t).exp())), OperatorKind::Positive)
    } else if anti_defect <= tol {
        // G = -iA with A = iG hermitian
        let a = &m * Complex::new(T::zero(), T::one());
        let (values, vectors) = eigh(&a);
        let u = spectral_map(&values, &vectors, |v| {
            let (s, c) = (v * t).sin_cos();
            Complex::new(c, -s)
        });
        OperatorMatrix::dense(u, OperatorKind::Unitary)
    } else {
        OperatorMatrix::dense((m * creal(t)).exp(), OperatorKind::General)
    };
    if !out.is_finite() {
        return Err(Error::NonFinite("propagator"));
    }
    Ok(out)
}

/// Cached propagator for `G = -iH - ½Γ` evaluated at many times.
///
/// When `Γ` is a multiple of the identity the hermitian eigenbasis of `H` is
/// reused, otherwise every call falls back to [`semigroup_propagator`].
#[derive(Debug, Clone)]
pub struct Propagator<T: Real> {
    generator: OperatorMatrix<T>,
    spectral: Option<(DVector<T>, CMatrix<T>, T)>,
}

impl<T: Real> Propagator<T> {
    pub fn new(hamiltonian: &CMatrix<T>, decay: &OperatorMatrix<T>) -> Result<Self> {
        let n = hamiltonian.nrows();
        if decay.dim() != n {
            return Err(Error::DimensionMismatch { expected: n, found: decay.dim() });
        }
        let decay_dense = decay.to_dense();
        let g = hamiltonian * Complex::new(T::zero(), -T::one()) - &decay_dense * creal(lit::<T>(0.5));
        let generator = OperatorMatrix::dense(g, OperatorKind::General);
        let spectral = scalar_multiple_of_identity(decay).map(|gamma| {
            let (values, vectors) = eigh(hamiltonian);
            (values, vectors, gamma)
        });
        Ok(Self { generator, spectral })
    }

    pub fn generator(&self) -> &OperatorMatrix<T> {
        &self.generator
    }

    pub fn decay_is_scalar(&self) -> Option<T> {
        self.spectral.as_ref().map(|s| s.2)
    }

    pub fn at(&self, t: T) -> Result<OperatorMatrix<T>> {
        match &self.spectral {
            Some((values, vectors, gamma)) => {
                if t < T::zero() {
                    return Ok(OperatorMatrix::zeros(values.len()).with_kind(OperatorKind::General));
                }
                let damp = (-*gamma * t * lit(0.5)).exp();
                let u = spectral_map(values, vectors, |v| {
                    let (s, c) = (v * t).sin_cos();
                    Complex::new(c * damp, -s * damp)
                });
                Ok(OperatorMatrix::dense(u, OperatorKind::General))
            }
            None => semigroup_propagator(&self.generator, t),
        }
    }

    pub fn apply(&self, t: T, v: &CVector<T>) -> Result<CVector<T>> {
        match &self.spectral {
            Some((values, vectors, gamma)) => {
                if t < T::zero() {
                    return Ok(v * creal(T::zero()));
                }
                let damp = (-*gamma * t * lit(0.5)).exp();
                let mut coeff = vectors.adjoint() * v;
                for (i, c) in coeff.iter_mut().enumerate() {
                    let (s, co) = (values[i] * t).sin_cos();
                    *c *= Complex::new(co * damp, -s * damp);
                }
                Ok(vectors * coeff)
            }
            None => Ok(self.at(t)?.apply(v)),
        }
    }
}

/// Applies `op` to tensor factor `factor` of a vector with factor
/// dimensions `dims` (first factor major).
pub fn apply_on_factor<T: Real>(op: &CMatrix<T>, factor: usize, dims: &[usize], v: &CVector<T>) -> CVector<T> {
    let d = dims[factor];
    let inner: usize = dims[factor + 1..].iter().product();
    let outer: usize = dims[..factor].iter().product();
    let mut out = DVector::from_element(v.len(), creal(T::zero()));
    let mut buf = vec![creal(T::zero()); d];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * d * inner + i;
            for (a, slot) in buf.iter_mut().enumerate() {
                *slot = v[base + a * inner];
            }
            for a in 0..d {
                let mut acc = creal(T::zero());
                for (b, x) in buf.iter().enumerate() {
                    acc += op[(a, b)] * *x;
                }
                out[base + a * inner] = acc;
            }
        }
    }
    out
}

/// Returns `λ` when `op = λ I` to relative precision `1e-13`.
pub fn scalar_multiple_of_identity<T: Real>(op: &OperatorMatrix<T>) -> Option<T> {
    let n = op.dim();
    if n == 0 {
        return None;
    }
    let lambda = op.entry(0, 0).re;
    let tol = lit::<T>(1e-13) * lambda.abs().max(lit(1e-300));
    match op.diagonal_entries() {
        Some(d) => d.iter().all(|z| (z.re - lambda).abs() <= tol && z.im.abs() <= tol).then_some(lambda),
        None => {
            let m = op.to_dense();
            for i in 0..n {
                for j in 0..n {
                    let expect = if i == j { lambda } else { T::zero() };
                    if cabs(m[(i, j)] - creal(expect)) > tol {
                        return None;
                    }
                }
            }
            Some(lambda)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    type Cx = Complex<f64>;

    fn c(re: f64, im: f64) -> Cx {
        Complex::new(re, im)
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
    }

    fn random_matrix(n: usize, seed: &mut u64) -> CMatrix<f64> {
        DMatrix::from_fn(n, n, |_, _| c(lcg(seed), lcg(seed)))
    }

    fn random_vector(n: usize, seed: &mut u64) -> CVector<f64> {
        DVector::from_fn(n, |_, _| c(lcg(seed), lcg(seed)))
    }

    #[test]
    fn identity_tensor_identity() {
        let p = tensor_product(&OperatorMatrix::<f64>::identity(2), &OperatorMatrix::identity(3));
        assert_eq!(p.to_dense(), DMatrix::identity(6, 6));
    }

    #[test]
    fn diagonal_tensor_diagonal() {
        let a = OperatorMatrix::real_diagonal(&[1.0, 2.0]);
        let b = OperatorMatrix::real_diagonal(&[3.0, 4.0]);
        let p = tensor_product(&a, &b);
        let d: Vec<f64> = p.diagonal_entries().unwrap().iter().map(|z| z.re).collect();
        assert_eq!(d, vec![3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn kronecker_acts_factorwise() {
        let mut seed = 7;
        let a = random_matrix(2, &mut seed);
        let b = random_matrix(2, &mut seed);
        let u = random_vector(2, &mut seed);
        let v = random_vector(2, &mut seed);
        let ab = tensor_product(
            &OperatorMatrix::dense(a.clone(), OperatorKind::General),
            &OperatorMatrix::dense(b.clone(), OperatorKind::General),
        );
        let lhs = ab.apply(&u.kronecker(&v));
        // direct multiplication oracle
        let au = &a * &u;
        let bv = &b * &v;
        for i in 0..2 {
            for j in 0..2 {
                assert!((lhs[i * 2 + j] - au[i] * bv[j]).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn bell_state_reduces_to_maximally_mixed() {
        let s = 1.0 / 2f64.sqrt();
        let psi = DVector::from_vec(vec![c(s, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(s, 0.0)]);
        let rho = DensityMatrix::from_pure(&psi);
        let red = partial_trace(&rho, 0, &[2, 2]).unwrap();
        let expect = dmatrix![c(0.5, 0.0), c(0.0, 0.0); c(0.0, 0.0), c(0.5, 0.0)];
        assert!((red.entries() - expect).norm() < 1e-15);
    }

    #[test]
    fn partial_trace_of_product() {
        let mut seed = 3;
        let u = random_vector(3, &mut seed).normalize();
        let v = random_vector(2, &mut seed).normalize();
        let rho = DensityMatrix::from_pure(&u.kronecker(&v));
        let r1 = partial_trace(&rho, 0, &[3, 2]).unwrap();
        assert!((r1.entries() - &u * u.adjoint()).norm() < 1e-14);
        let r2 = partial_trace(&rho, 1, &[3, 2]).unwrap();
        assert!((r2.entries() - &v * v.adjoint()).norm() < 1e-14);
    }

    #[test]
    fn partial_trace_dimension_mismatch() {
        let rho = DensityMatrix::<f64>::from_entries_unchecked(DMatrix::identity(4, 4));
        assert!(matches!(partial_trace(&rho, 0, &[3, 2]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn partial_trace_commutes_with_local_conjugation() {
        let mut seed = 11;
        let a = random_matrix(2, &mut seed);
        let psi = random_vector(6, &mut seed).normalize();
        let rho = DensityMatrix::from_pure(&psi);
        let ai = a.kronecker(&DMatrix::<Cx>::identity(3, 3));
        let conj = DensityMatrix::from_entries_unchecked(&ai * rho.entries() * ai.adjoint());
        let lhs = partial_trace(&conj, 0, &[2, 3]).unwrap();
        let rhs = &a * partial_trace(&rho, 0, &[2, 3]).unwrap().entries() * a.adjoint();
        assert!((lhs.entries() - rhs).norm() < 1e-10);
    }

    #[test]
    fn sqrt_of_identity_and_diagonal() {
        let i = positive_sqrt(&OperatorMatrix::<f64>::identity(3)).unwrap();
        assert_eq!(i.to_dense(), DMatrix::identity(3, 3));
        let d = OperatorMatrix::dense(dmatrix![c(4.0, 0.0), c(0.0, 0.0); c(0.0, 0.0), c(9.0, 0.0)], OperatorKind::Positive);
        let s = positive_sqrt(&d).unwrap().to_dense();
        assert!((s - dmatrix![c(2.0, 0.0), c(0.0, 0.0); c(0.0, 0.0), c(3.0, 0.0)]).norm() < 1e-14);
    }

    #[test]
    fn sqrt_of_gram_matrix() {
        let mut seed = 5;
        let m = random_matrix(3, &mut seed);
        let p = m.adjoint() * &m;
        let s = positive_sqrt(&OperatorMatrix::dense(p.clone(), OperatorKind::Positive)).unwrap().to_dense();
        assert!((&s * &s - p).norm() < 1e-10);
    }

    #[test]
    fn sqrt_rejects_negative_spectrum() {
        let d = OperatorMatrix::dense(dmatrix![c(1.0, 0.0), c(0.0, 0.0); c(0.0, 0.0), c(-0.5, 0.0)], OperatorKind::Hermitian);
        assert!(matches!(positive_sqrt(&d), Err(Error::NotPositive { .. })));
    }

    #[test]
    fn sqrt_fixes_projectors() {
        let mut seed = 9;
        let v = random_vector(4, &mut seed).normalize();
        let w = random_vector(4, &mut seed);
        let w = (&w - &v * v.dotc(&w)).normalize();
        let p = &v * v.adjoint() + &w * w.adjoint();
        let s = positive_sqrt(&OperatorMatrix::dense(p.clone(), OperatorKind::Positive)).unwrap().to_dense();
        assert!((s - p).norm() < 1e-10);
    }

    #[test]
    fn propagator_at_zero_is_identity() {
        let mut seed = 2;
        let g = OperatorMatrix::dense(random_matrix(3, &mut seed), OperatorKind::General);
        assert_eq!(semigroup_propagator(&g, 0.0).unwrap().to_dense(), DMatrix::identity(3, 3));
        assert_eq!(semigroup_propagator(&g, -1.0).unwrap().to_dense(), DMatrix::zeros(3, 3));
    }

    #[test]
    fn pure_decay_gives_scalar_factor() {
        let tau = 10.0;
        let h = DMatrix::<Cx>::zeros(3, 3);
        let decay = OperatorMatrix::identity(3).scale(1.0 / tau);
        let prop = Propagator::new(&h, &decay).unwrap();
        for t in [0.5, 3.0, 20.0] {
            let w = prop.at(t).unwrap().to_dense();
            let expect = DMatrix::<Cx>::identity(3, 3) * c((-t / (2.0 * tau)).exp(), 0.0);
            assert!((w - expect).norm() < 1e-14);
        }
    }

    fn series_exp(g: &CMatrix<f64>, t: f64) -> CMatrix<f64> {
        let n = g.nrows();
        let mut term = DMatrix::<Cx>::identity(n, n);
        let mut sum = term.clone();
        for k in 1..60 {
            term = &term * g * c(t / k as f64, 0.0);
            sum += &term;
        }
        sum
    }

    #[test]
    fn general_generator_matches_series() {
        let mut seed = 13;
        let g = random_matrix(4, &mut seed);
        let w = semigroup_propagator(&OperatorMatrix::dense(g.clone(), OperatorKind::General), 0.3).unwrap();
        assert!((w.to_dense() - series_exp(&g, 0.3)).norm() < 1e-9);
        let h = {
            let m = random_matrix(4, &mut seed);
            (&m + m.adjoint()) * c(0.5, 0.0)
        };
        let anti = &h * c(0.0, -1.0);
        let u = semigroup_propagator(&OperatorMatrix::dense(anti.clone(), OperatorKind::General), 0.3).unwrap();
        assert_eq!(u.kind(), OperatorKind::Unitary);
        assert!((u.to_dense() - series_exp(&anti, 0.3)).norm() < 1e-9);
        let herm = semigroup_propagator(&OperatorMatrix::dense(h.clone(), OperatorKind::Hermitian), 0.3).unwrap();
        assert!((herm.to_dense() - series_exp(&h, 0.3)).norm() < 1e-9);
    }

    #[test]
    fn semigroup_property_and_contraction() {
        let mut seed = 17;
        let m = random_matrix(5, &mut seed);
        let h = (&m + m.adjoint()) * c(0.5, 0.0);
        let l = random_matrix(5, &mut seed);
        let gamma = OperatorMatrix::dense(l.adjoint() * &l, OperatorKind::Positive);
        let prop = Propagator::new(&h, &gamma).unwrap();
        let ws = prop.at(0.4).unwrap().to_dense();
        let wt = prop.at(0.7).unwrap().to_dense();
        let wst = prop.at(1.1).unwrap().to_dense();
        assert!((&ws * &wt - &wst).norm() < 1e-9);
        let psi = random_vector(5, &mut seed).normalize();
        assert!((&wst * &psi).norm() <= 1.0 + 1e-12);
    }

    #[test]
    fn unitary_validation() {
        let mut seed = 19;
        let m = random_matrix(3, &mut seed);
        let h = (&m + m.adjoint()) * c(0.5, 0.0);
        let u = semigroup_propagator(&OperatorMatrix::dense(&h * c(0.0, -1.0), OperatorKind::General), 1.3).unwrap();
        u.validate(1e-10).unwrap();
        let bad = OperatorMatrix::dense(h, OperatorKind::Unitary);
        assert!(bad.validate(1e-10).is_err());
    }

    #[test]
    fn state_vector_invariants() {
        let v = DVector::from_vec(vec![c(3.0, 0.0), c(0.0, 4.0)]);
        let s = StateVector::normalized(v, vec![2]).unwrap();
        assert!(s.is_normalized());
        assert!(StateVector::<f64>::new(DVector::zeros(3), vec![2]).is_err());
        let mut zero = StateVector::<f64>::new(DVector::zeros(2), vec![2]).unwrap();
        assert!(matches!(zero.normalize(), Err(Error::ImpossibleHistory { .. })));
    }

    #[test]
    fn factor_application_matches_kronecker() {
        let mut seed = 23;
        let a = random_matrix(3, &mut seed);
        let v = random_vector(2 * 3 * 2, &mut seed);
        let full = DMatrix::<Cx>::identity(2, 2).kronecker(&a).kronecker(&DMatrix::<Cx>::identity(2, 2));
        let lhs = apply_on_factor(&a, 1, &[2, 3, 2], &v);
        assert!((lhs - full * v).norm() < 1e-13);
    }

    #[test]
    fn f32_instantiation() {
        let p = OperatorMatrix::<f32>::real_diagonal(&[4.0, 9.0]);
        let s = positive_sqrt(&p).unwrap();
        let d = s.diagonal_entries().unwrap();
        assert!((d[0].re - 2.0).abs() < 1e-6 && (d[1].re - 3.0).abs() < 1e-6);
    }
}
