//! The relativistic flash process for a few noninteracting Dirac particles.
//!
//! Each particle type `i` carries its own chain of flashes starting at a
//! seed `x_{i,0}`. Given the previous flash `x'`, the next one has density
//! `‖K_{x'}(x)ψ‖²` on `F(x')`, and the joint law of the first `n_i` flashes
//! of every type is `‖⊗_i K(f_i) ψ‖²`. States are finite sums of products
//! `Σ_r ⊗_i v_{r,i}` of [`DiracState`]s, which keeps entangled pairs exact
//! without forming the tensor product of two mode spaces.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dirac::{
    collapse_operator, restrict_to_surface, survival_operator, window_covering, CollapseSpec, DiracState, SpacetimePoint, Surface,
    SurvivalMesh, SurvivalOperator,
};
use crate::error::{Error, Result};
use crate::hilbert::eigh;
use crate::quadrature::GaussLegendre;
use crate::scalar::{creal, lit, to_f64, CMatrix, Real, C};

/// Seed flash of every particle type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedConfig<T> {
    pub seeds: Vec<SpacetimePoint<T>>,
}

impl<T: Real> SeedConfig<T> {
    pub fn new(seeds: Vec<SpacetimePoint<T>>) -> Result<Self> {
        if seeds.is_empty() {
            return Err(Error::InvalidParameter { name: "seeds", reason: "need one seed per particle type".into() });
        }
        if seeds.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("seed flash"));
        }
        Ok(Self { seeds })
    }

    /// Every type seeded at the origin.
    pub fn common_origin(types: usize) -> Self {
        Self { seeds: vec![SpacetimePoint::origin(); types] }
    }

    pub fn types(&self) -> usize {
        self.seeds.len()
    }

    pub fn boost(&self, eta: T) -> Self {
        Self { seeds: self.seeds.iter().map(|s| s.boost(eta)).collect() }
    }
}

/// Per-type flash sequences after the seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelFlashHistory<T> {
    pub seeds: SeedConfig<T>,
    pub flashes: Vec<Vec<SpacetimePoint<T>>>,
}

impl<T: Real> RelFlashHistory<T> {
    pub fn new(seeds: SeedConfig<T>, flashes: Vec<Vec<SpacetimePoint<T>>>) -> Result<Self> {
        if flashes.len() != seeds.types() {
            return Err(Error::DimensionMismatch { expected: seeds.types(), found: flashes.len() });
        }
        let h = Self { seeds, flashes };
        h.validate()?;
        Ok(h)
    }

    pub fn seeds_only(seeds: SeedConfig<T>) -> Self {
        let n = seeds.types();
        Self { seeds, flashes: vec![Vec::new(); n] }
    }

    /// Same-type flashes must follow each other in the timelike future.
    pub fn validate(&self) -> Result<()> {
        for (kind, chain) in self.flashes.iter().enumerate() {
            let mut prev = self.seeds.seeds[kind];
            for (index, x) in chain.iter().enumerate() {
                if !x.is_finite() {
                    return Err(Error::NonFinite("flash"));
                }
                if prev.proper_time_to(x).is_none() {
                    return Err(Error::NonIncreasingTimes { kind, index });
                }
                prev = *x;
            }
        }
        Ok(())
    }

    pub fn types(&self) -> usize {
        self.flashes.len()
    }

    pub fn len(&self) -> usize {
        self.flashes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Last flash of type `i`, the seed if there is none.
    pub fn last(&self, i: usize) -> SpacetimePoint<T> {
        self.flashes[i].last().copied().unwrap_or(self.seeds.seeds[i])
    }

    pub fn lasts(&self) -> Vec<SpacetimePoint<T>> {
        (0..self.types()).map(|i| self.last(i)).collect()
    }

    /// Seed followed by the flashes of type `i`.
    pub fn sequence(&self, i: usize) -> Vec<SpacetimePoint<T>> {
        let mut v = vec![self.seeds.seeds[i]];
        v.extend_from_slice(&self.flashes[i]);
        v
    }

    /// This history followed by `more`, type by type.
    pub fn extended(&self, more: &[Vec<SpacetimePoint<T>>]) -> Result<Self> {
        if more.len() != self.types() {
            return Err(Error::DimensionMismatch { expected: self.types(), found: more.len() });
        }
        let flashes = self.flashes.iter().zip(more).map(|(a, b)| a.iter().chain(b).copied().collect()).collect();
        Self::new(self.seeds.clone(), flashes)
    }

    pub fn boost(&self, eta: T) -> Self {
        Self { seeds: self.seeds.boost(eta), flashes: self.flashes.iter().map(|c| c.iter().map(|x| x.boost(eta)).collect()).collect() }
    }
}

/// Collapse width and rate, window resolution and the numerical tolerances
/// of the relativistic process. One set serves every particle type; types
/// differ through their mode grids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelFlashModel<T> {
    pub collapse: CollapseSpec<T>,
    pub survival_mesh: SurvivalMesh,
    /// Relative cutoff of the spectral pseudo-inverse of `W`.
    pub pinv_cutoff: T,
    /// Largest flux fraction the sampler may lose outside its windows.
    pub leakage_bound: T,
}

impl<T: Real> RelFlashModel<T> {
    pub fn new(collapse: CollapseSpec<T>) -> Result<Self> {
        collapse.validate()?;
        Ok(Self { collapse, survival_mesh: SurvivalMesh { order: 8, panels: 8 }, pinv_cutoff: lit(1e-10), leakage_bound: lit(1e-3) })
    }

    pub fn sigma(&self) -> T {
        self.collapse.sigma
    }

    pub fn tau(&self) -> T {
        self.collapse.tau
    }
}

/// `⟨a|b⟩` on coefficient space.
pub fn overlap<T: Real>(a: &DiracState<T>, b: &DiracState<T>) -> C<T> {
    a.coeffs().dotc(b.coeffs())
}

/// `Σ_r ⊗_i v_{r,i}`; `terms[r][i]` is the factor of particle `i` in term `r`.
#[derive(Debug, Clone)]
pub struct TensorState<T: Real> {
    terms: Vec<Vec<DiracState<T>>>,
}

impl<T: Real> TensorState<T> {
    pub fn new(terms: Vec<Vec<DiracState<T>>>) -> Result<Self> {
        let Some(first) = terms.first() else {
            return Err(Error::InvalidParameter { name: "terms", reason: "need at least one term".into() });
        };
        let n = first.len();
        if n == 0 {
            return Err(Error::InvalidParameter { name: "terms", reason: "need at least one particle".into() });
        }
        for term in &terms {
            if term.len() != n {
                return Err(Error::DimensionMismatch { expected: n, found: term.len() });
            }
            for (i, v) in term.iter().enumerate() {
                if v.grid().dim() != first[i].grid().dim() {
                    return Err(Error::DimensionMismatch { expected: first[i].grid().dim(), found: v.grid().dim() });
                }
            }
        }
        Ok(Self { terms })
    }

    pub fn single(psi: DiracState<T>) -> Self {
        Self { terms: vec![vec![psi]] }
    }

    pub fn product(factors: Vec<DiracState<T>>) -> Result<Self> {
        Self::new(vec![factors])
    }

    /// `Σ_r c_r ⊗_i v_{r,i}` with the amplitude folded into the first factor.
    pub fn superposition(amplitudes: &[C<T>], terms: Vec<Vec<DiracState<T>>>) -> Result<Self> {
        if amplitudes.len() != terms.len() {
            return Err(Error::DimensionMismatch { expected: terms.len(), found: amplitudes.len() });
        }
        let terms = terms
            .into_iter()
            .zip(amplitudes)
            .map(|(mut t, a)| {
                if let Some(f) = t.first_mut() {
                    *f = f.scale(*a);
                }
                t
            })
            .collect();
        Self::new(terms)
    }

    pub fn particles(&self) -> usize {
        self.terms[0].len()
    }

    pub fn rank(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> &[Vec<DiracState<T>>] {
        &self.terms
    }

    pub fn factors(&self, i: usize) -> Vec<&DiracState<T>> {
        self.terms.iter().map(|t| &t[i]).collect()
    }

    /// `G_{r'r} = ⟨v_{r',i}| A |v_{r,i}⟩`, with `A = 1` when `op` is `None`.
    pub fn gram(&self, i: usize, op: Option<&CMatrix<T>>) -> CMatrix<T> {
        let r = self.rank();
        let images: Vec<_> = self.terms.iter().map(|t| op.map(|a| a * t[i].coeffs()).unwrap_or_else(|| t[i].coeffs().clone())).collect();
        DMatrix::from_fn(r, r, |a, b| self.terms[a][i].coeffs().dotc(&images[b]))
    }

    /// `⟨ψ| ⊗_i A_i |ψ⟩`.
    pub fn expectation(&self, ops: &[Option<&CMatrix<T>>]) -> Result<T> {
        if ops.len() != self.particles() {
            return Err(Error::DimensionMismatch { expected: self.particles(), found: ops.len() });
        }
        let grams: Vec<CMatrix<T>> = ops.iter().enumerate().map(|(i, op)| self.gram(i, *op)).collect();
        let r = self.rank();
        let mut total = creal(T::zero());
        for a in 0..r {
            for b in 0..r {
                total += grams.iter().fold(creal(T::one()), |acc, g| acc * g[(a, b)]);
            }
        }
        Ok(total.re)
    }

    /// `⟨self|other⟩`.
    pub fn inner(&self, other: &Self) -> Result<C<T>> {
        if other.particles() != self.particles() {
            return Err(Error::DimensionMismatch { expected: self.particles(), found: other.particles() });
        }
        let mut total = creal(T::zero());
        for a in &self.terms {
            for b in &other.terms {
                total += a.iter().zip(b).fold(creal(T::one()), |acc, (u, v)| acc * u.coeffs().dotc(v.coeffs()));
            }
        }
        Ok(total)
    }

    /// Every factor boosted by `η` onto its boosted mode grid. Returns the
    /// largest relative flux lost in the re-expansion.
    pub fn boost(&self, eta: T) -> Result<(Self, T)> {
        let mut worst = T::zero();
        let mut terms = Vec::with_capacity(self.rank());
        for t in &self.terms {
            let mut out = Vec::with_capacity(t.len());
            for v in t {
                let (b, r) = crate::dirac::boost(v, eta)?;
                worst = worst.max(r.abs());
                out.push(b);
            }
            terms.push(out);
        }
        Ok((Self { terms }, worst))
    }

    /// Amplitudes `Σ_r v_{r,1} v_{r,2}^T` (a column for one particle).
    pub fn dense(&self) -> Result<CMatrix<T>> {
        let col = |v: &DiracState<T>| DMatrix::from_column_slice(v.coeffs().len(), 1, v.coeffs().as_slice());
        match self.particles() {
            1 => Ok(self.terms.iter().skip(1).fold(col(&self.terms[0][0]), |acc, t| acc + col(&t[0]))),
            2 => Ok(self.terms.iter().fold(DMatrix::zeros(self.terms[0][0].coeffs().len(), self.terms[0][1].coeffs().len()), |acc, t| {
                acc + col(&t[0]) * col(&t[1]).transpose()
            })),
            n => Err(Error::Unsupported(format!("dense amplitudes for {n} particles"))),
        }
    }

    /// `‖self - other‖`, from the dense amplitudes to avoid the cancellation
    /// in `‖a‖² + ‖b‖² - 2 Re⟨a|b⟩`.
    pub fn distance(&self, other: &Self) -> Result<T> {
        let (a, b) = (self.dense()?, other.dense()?);
        if a.shape() != b.shape() {
            return Err(Error::DimensionMismatch { expected: a.len(), found: b.len() });
        }
        Ok((a - b).norm())
    }

    pub fn norm_sqr(&self) -> T {
        self.expectation(&vec![None; self.particles()]).expect("one operator slot per particle")
    }

    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm_sqr();
        if !(to_f64(n) > 1e-300) {
            return Err(Error::ImpossibleHistory { norm: to_f64(n.max(T::zero()).sqrt()) });
        }
        Ok(self.scale(T::one() / n.sqrt()))
    }

    pub fn scale(&self, a: T) -> Self {
        let mut terms = self.terms.clone();
        for t in &mut terms {
            t[0] = t[0].scale(creal(a));
        }
        Self { terms }
    }

    /// Applies `f` to factor `i` of every term.
    pub fn map_factor(&self, i: usize, mut f: impl FnMut(&DiracState<T>) -> Result<DiracState<T>>) -> Result<Self> {
        let mut terms = self.terms.clone();
        for t in &mut terms {
            t[i] = f(&t[i])?;
        }
        Ok(Self { terms })
    }

    /// Weights `X` with `ρ_i = Σ_{r,r'} X_{rr'} |v_{r,i}⟩⟨v_{r',i}|`, the
    /// reduced density matrix of particle `i`.
    pub fn reduced_weights(&self, i: usize) -> CMatrix<T> {
        let r = self.rank();
        let mut x = DMatrix::from_element(r, r, creal(T::one()));
        for j in (0..self.particles()).filter(|j| *j != i) {
            let g = self.gram(j, None);
            x.zip_apply(&g.transpose(), |a, b| *a *= b);
        }
        x
    }

    pub fn reduced(&self, i: usize) -> Ensemble<T> {
        Ensemble::from_weights(self.factors(i).into_iter().cloned().collect(), &self.reduced_weights(i))
    }

    /// Dense reduced density matrix of particle `i`.
    pub fn reduced_matrix(&self, i: usize) -> CMatrix<T> {
        self.reduced(i).matrix()
    }
}

/// `ρ = Σ_k |e_k⟩⟨e_k|`.
#[derive(Debug, Clone)]
pub struct Ensemble<T: Real> {
    pub members: Vec<DiracState<T>>,
}

impl<T: Real> Ensemble<T> {
    /// Members `e_k = Σ_r v_r (U √d)_{rk}` from `X = U d U†`.
    pub fn from_weights(vectors: Vec<DiracState<T>>, x: &CMatrix<T>) -> Self {
        let (d, u) = eigh(x);
        let top = d.iter().fold(T::zero(), |a, b| a.max(*b));
        let mut members = Vec::new();
        for k in 0..d.len() {
            if !(d[k] > top * lit(1e-14)) {
                continue;
            }
            let w = d[k].sqrt();
            let mut c = vectors[0].coeffs() * (u[(0, k)] * creal(w));
            for (r, v) in vectors.iter().enumerate().skip(1) {
                c += v.coeffs() * (u[(r, k)] * creal(w));
            }
            members.push(vectors[0].with_coeffs(c).expect("same grid"));
        }
        Self { members }
    }

    /// Eigen-decomposition of a dense density matrix on `grid`.
    pub fn from_matrix(grid: &crate::dirac::ModeGrid<T>, rho: &CMatrix<T>) -> Result<Self> {
        if rho.nrows() != grid.dim() {
            return Err(Error::DimensionMismatch { expected: grid.dim(), found: rho.nrows() });
        }
        let (d, u) = eigh(rho);
        let top = d.iter().fold(T::zero(), |a, b| a.max(*b));
        let mut members = Vec::new();
        for k in 0..d.len() {
            if d[k] > top * lit(1e-14) {
                members.push(DiracState::new(grid.clone(), u.column(k) * creal(d[k].sqrt()))?);
            }
        }
        Ok(Self { members })
    }

    pub fn trace(&self) -> T {
        self.members.iter().fold(T::zero(), |a, m| a + m.norm_sqr())
    }

    pub fn matrix(&self) -> CMatrix<T> {
        let n = self.members[0].grid().dim();
        let mut rho = DMatrix::from_element(n, n, creal(T::zero()));
        for m in &self.members {
            rho += m.coeffs() * m.coeffs().adjoint();
        }
        rho
    }
}

/// `K(f) = K_{x_{n-1}}(x_n) ⋯ K_{x_0}(x_1)` for one sequence `f = (x_0, …, x_n)`.
#[derive(Debug, Clone)]
pub struct RelHistoryOperator<T> {
    pub sequence: Vec<SpacetimePoint<T>>,
    pub collapse: CollapseSpec<T>,
}

pub fn rel_history_operator<T: Real>(sequence: &[SpacetimePoint<T>], collapse: &CollapseSpec<T>) -> Result<RelHistoryOperator<T>> {
    if sequence.is_empty() {
        return Err(Error::InvalidParameter { name: "sequence", reason: "a flash sequence starts with its seed".into() });
    }
    collapse.validate()?;
    Ok(RelHistoryOperator { sequence: sequence.to_vec(), collapse: *collapse })
}

impl<T: Real> RelHistoryOperator<T> {
    pub fn apply(&self, psi: &DiracState<T>) -> Result<DiracState<T>> {
        let mut cur = psi.clone();
        for pair in self.sequence.windows(2) {
            cur = collapse_operator(&pair[0], &pair[1], &self.collapse, &cur)?.state;
        }
        Ok(cur)
    }

    pub fn first(&self) -> SpacetimePoint<T> {
        self.sequence[0]
    }

    pub fn last(&self) -> SpacetimePoint<T> {
        *self.sequence.last().expect("nonempty sequence")
    }
}

fn check_types<T: Real>(state: &TensorState<T>, types: usize) -> Result<()> {
    if state.particles() != types {
        return Err(Error::DimensionMismatch { expected: types, found: state.particles() });
    }
    Ok(())
}

/// `⊗_i K(f_i) ψ`.
pub fn apply_rel_history<T: Real>(state: &TensorState<T>, history: &RelFlashHistory<T>, model: &RelFlashModel<T>) -> Result<TensorState<T>> {
    check_types(state, history.types())?;
    let mut out = state.clone();
    for i in 0..history.types() {
        if history.flashes[i].is_empty() {
            continue;
        }
        let k = rel_history_operator(&history.sequence(i), &model.collapse)?;
        out = out.map_factor(i, |v| k.apply(v))?;
    }
    Ok(out)
}

/// `‖⊗_i K(f_i) ψ‖²`, density with respect to `Π d²x` over all flashes.
pub fn rel_joint_density<T: Real>(state: &TensorState<T>, history: &RelFlashHistory<T>, model: &RelFlashModel<T>) -> Result<T> {
    Ok(apply_rel_history(state, history, model)?.norm_sqr())
}

/// `W_{x'_i}(Σ)` for every type, each built on windows covering that type's
/// factors of `state`.
pub fn survival_operators<T: Real>(
    state: &TensorState<T>,
    lasts: &[SpacetimePoint<T>],
    surface: &Surface<T>,
    model: &RelFlashModel<T>,
) -> Result<Vec<SurvivalOperator<T>>> {
    check_types(state, lasts.len())?;
    (0..lasts.len()).map(|i| survival_operator(&lasts[i], surface, &state.factors(i), &model.collapse, &model.survival_mesh)).collect()
}

/// `‖⊗_i W_{x_{i,0}}(Σ) ψ‖²`, the probability of no flash below `Σ`.
pub fn rel_survival<T: Real>(state: &TensorState<T>, seeds: &SeedConfig<T>, surface: &Surface<T>, model: &RelFlashModel<T>) -> Result<T> {
    let ops = survival_operators(state, &seeds.seeds, surface, model)?;
    let squares: Vec<CMatrix<T>> = ops.iter().map(|w| w.squared()).collect();
    state.expectation(&squares.iter().map(Some).collect::<Vec<_>>())
}

fn check_split<T: Real>(past: &RelFlashHistory<T>, surface: &Surface<T>, future: &[Vec<SpacetimePoint<T>>]) -> Result<()> {
    for chain in &past.flashes {
        if let Some(x) = chain.iter().find(|x| !surface.is_below(x)) {
            return Err(Error::InvalidParameter { name: "past", reason: format!("flash ({}, {}) is not below the surface", to_f64(x.t), to_f64(x.x)) });
        }
    }
    for chain in future {
        if let Some(x) = chain.iter().find(|x| surface.is_below(x)) {
            return Err(Error::InvalidParameter { name: "future", reason: format!("flash ({}, {}) lies below the surface", to_f64(x.t), to_f64(x.x)) });
        }
    }
    Ok(())
}

/// Density of the flashes `future` given that `past` holds the last flashes
/// before `Σ`: `‖⊗K(f_i g_i)ψ‖² / ‖⊗W_{x'_i}(Σ)K(f_i)ψ‖²`.
pub fn conditional_density_given_last<T: Real>(
    state: &TensorState<T>,
    past: &RelFlashHistory<T>,
    surface: &Surface<T>,
    future: &[Vec<SpacetimePoint<T>>],
    model: &RelFlashModel<T>,
) -> Result<T> {
    check_split(past, surface, future)?;
    let numerator = rel_joint_density(state, &past.extended(future)?, model)?;
    let collapsed = apply_rel_history(state, past, model)?;
    let ops = survival_operators(&collapsed, &past.lasts(), surface, model)?;
    let squares: Vec<CMatrix<T>> = ops.iter().map(|w| w.squared()).collect();
    let denominator = collapsed.expectation(&squares.iter().map(Some).collect::<Vec<_>>())?;
    if !(to_f64(denominator) > 1e-300) {
        return Err(Error::ImpossibleHistory { norm: to_f64(denominator) });
    }
    Ok(numerator / denominator)
}

fn apply_ops<T: Real>(state: &TensorState<T>, ops: &[CMatrix<T>]) -> Result<TensorState<T>> {
    let mut out = state.clone();
    for (i, op) in ops.iter().enumerate() {
        out = out.map_factor(i, |v| v.with_coeffs(op * v.coeffs()))?;
    }
    Ok(out)
}

fn apply_sequences<T: Real>(state: &TensorState<T>, starts: &[SpacetimePoint<T>], chains: &[Vec<SpacetimePoint<T>>], model: &RelFlashModel<T>) -> Result<TensorState<T>> {
    let seeds = SeedConfig { seeds: starts.to_vec() };
    apply_rel_history(state, &RelFlashHistory { seeds, flashes: chains.to_vec() }, model)
}

/// Conditional wave functions on `Σ` given the flashes up to `Σ`.
#[derive(Debug, Clone)]
pub struct SurfaceConditional<T: Real> {
    pub surface: Surface<T>,
    /// Last flash `x'_i` of every type below `Σ`.
    pub lasts: Vec<SpacetimePoint<T>>,
    pub survival: Vec<SurvivalOperator<T>>,
    /// `ψ_Σ = ⊗W_{x'_i}(Σ)K(f_i)ψ / ‖·‖`.
    pub psi: TensorState<T>,
    /// `φ_Σ = ⊗K(f_i)ψ / ‖⊗W_{x'_i}(Σ)K(f_i)ψ‖`, not normalised.
    pub phi: TensorState<T>,
    /// `‖⊗W_{x'_i}(Σ)K(f_i)ψ‖²`.
    pub weight: T,
}

pub fn condition_on_surface<T: Real>(
    state: &TensorState<T>,
    past: &RelFlashHistory<T>,
    surface: &Surface<T>,
    model: &RelFlashModel<T>,
) -> Result<SurfaceConditional<T>> {
    check_split(past, surface, &[])?;
    let collapsed = apply_rel_history(state, past, model)?;
    SurfaceConditional::build(collapsed, past.lasts(), *surface, model)
}

/// `ψ_Σ`, normalised.
pub fn psi_on_surface<T: Real>(state: &TensorState<T>, past: &RelFlashHistory<T>, surface: &Surface<T>, model: &RelFlashModel<T>) -> Result<TensorState<T>> {
    Ok(condition_on_surface(state, past, surface, model)?.psi)
}

/// `φ_Σ`, generally not normalised.
pub fn phi_on_surface<T: Real>(state: &TensorState<T>, past: &RelFlashHistory<T>, surface: &Surface<T>, model: &RelFlashModel<T>) -> Result<TensorState<T>> {
    Ok(condition_on_surface(state, past, surface, model)?.phi)
}

impl<T: Real> SurfaceConditional<T> {
    /// From `⊗K(f_i)ψ` and the last flashes.
    fn build(collapsed: TensorState<T>, lasts: Vec<SpacetimePoint<T>>, surface: Surface<T>, model: &RelFlashModel<T>) -> Result<Self> {
        let survival = survival_operators(&collapsed, &lasts, &surface, model)?;
        let ws: Vec<CMatrix<T>> = survival.iter().map(|w| w.matrix()).collect();
        let damped = apply_ops(&collapsed, &ws)?;
        let weight = damped.norm_sqr();
        if !(to_f64(weight) > 1e-300) {
            return Err(Error::ImpossibleHistory { norm: to_f64(weight.max(T::zero()).sqrt()) });
        }
        let inv = T::one() / weight.sqrt();
        Ok(Self { surface, lasts, survival, psi: damped.scale(inv), phi: collapsed.scale(inv), weight })
    }

    fn inverses(&self, model: &RelFlashModel<T>) -> Result<Vec<CMatrix<T>>> {
        self.survival.iter().map(|w| w.inverse(model.pinv_cutoff)).collect()
    }

    /// `⊗W_{x'_i}(Σ)^{-1} ψ_Σ`, which equals `φ_Σ` wherever `W` is invertible.
    pub fn phi_from_psi(&self, model: &RelFlashModel<T>) -> Result<TensorState<T>> {
        apply_ops(&self.psi, &self.inverses(model)?)
    }

    /// Density of the future flashes `g_i` (each chain continuing from
    /// `x'_i`) as `‖⊗K(g_i) W_{x'_i}(Σ)^{-1} ψ_Σ‖²`.
    pub fn future_density_psi(&self, future: &[Vec<SpacetimePoint<T>>], model: &RelFlashModel<T>) -> Result<T> {
        self.check_future(future)?;
        let undone = self.phi_from_psi(model)?;
        Ok(apply_sequences(&undone, &self.lasts, future, model)?.norm_sqr())
    }

    /// The same density as `‖⊗K(g_i) φ_Σ‖²`.
    pub fn future_density_phi(&self, future: &[Vec<SpacetimePoint<T>>], model: &RelFlashModel<T>) -> Result<T> {
        self.check_future(future)?;
        Ok(apply_sequences(&self.phi, &self.lasts, future, model)?.norm_sqr())
    }

    fn check_future(&self, future: &[Vec<SpacetimePoint<T>>]) -> Result<()> {
        if future.len() != self.lasts.len() {
            return Err(Error::DimensionMismatch { expected: self.lasts.len(), found: future.len() });
        }
        let past = RelFlashHistory::seeds_only(SeedConfig { seeds: self.lasts.clone() });
        check_split(&past, &self.surface, future)?;
        past.extended(future).map(|_| ())
    }

    /// Moves to a later surface `next` given the flashes `between` (per
    /// type, after `x'_i`, below `next`) by the law
    /// `ψ_{Σ̃} ∝ ⊗W_{x''_i}(Σ̃) K(g_i) W_{x'_i}(Σ)^{-1} ψ_Σ`.
    pub fn evolve(&self, between: &[Vec<SpacetimePoint<T>>], next: &Surface<T>, model: &RelFlashModel<T>) -> Result<Self> {
        if between.len() != self.lasts.len() {
            return Err(Error::DimensionMismatch { expected: self.lasts.len(), found: between.len() });
        }
        let past = RelFlashHistory::new(SeedConfig { seeds: self.lasts.clone() }, between.to_vec())?;
        check_split(&past, next, &[])?;
        let lasts = past.lasts();
        let undone = apply_sequences(&self.phi_from_psi(model)?, &self.lasts, between, model)?;
        let mut out = Self::build(undone, lasts.clone(), *next, model)?;
        // φ keeps its own law: K(g)φ_Σ / ‖W̃ K(g) φ_Σ‖
        let moved = apply_sequences(&self.phi, &self.lasts, between, model)?;
        let ws: Vec<CMatrix<T>> = out.survival.iter().map(|w| w.matrix()).collect();
        let n = apply_ops(&moved, &ws)?.norm_sqr().sqrt();
        out.phi = moved.scale(T::one() / n);
        out.weight = self.weight * out.weight;
        Ok(out)
    }
}

/// Pointwise quadrature for flash integrals below a surface: Gauss–Legendre
/// in proper time and, on every hyperboloid, in arc length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BelowMesh<T> {
    pub s_order: usize,
    pub s_panels: usize,
    pub u_order: usize,
    /// Arc-length panel width in units of `σ`.
    pub u_step_over_sigma: T,
}

/// `G_{ab} = ∫_{F(x')∖F(Σ)} d²y ⟨K_{x'}(y) v_a, K_{x'}(y) v_b⟩`, summing the
/// Gaussian-weighted flux at every quadrature node instead of integrating the
/// Gaussian in closed form. `Σ` is a flat slice, or a hyperboloid centred at
/// `x'`.
pub fn flash_gram_below<T: Real>(
    prev: &SpacetimePoint<T>,
    surface: &Surface<T>,
    vectors: &[&DiracState<T>],
    model: &RelFlashModel<T>,
    mesh: &BelowMesh<T>,
) -> Result<CMatrix<T>> {
    let spec = &model.collapse;
    let (sigma, tau) = (spec.sigma, spec.tau);
    let r = vectors.len();
    let mut gram = DMatrix::from_element(r, r, creal(T::zero()));
    let s_rule = GaussLegendre::new(mesh.s_order);
    let u_rule = GaussLegendre::new(mesh.u_order);
    let reach = lit::<T>(8.0) * sigma;
    let peak = crate::dirac::gaussian_norm(sigma) / tau;
    let mut on_hyperboloid = |s: T, ws: T, range: Option<(T, T)>| -> Result<()> {
        let hyper = Surface::Hyperboloid { base: *prev, s };
        let grid = window_covering(vectors, &hyper, &spec.window)?;
        let (lo, hi) = (grid.arcs[0] - reach, grid.arcs[grid.len() - 1] + reach);
        let (lo, hi) = match range {
            Some((a, b)) => (lo.max(a), hi.min(b)),
            None => (lo, hi),
        };
        if !(hi > lo) {
            return Ok(());
        }
        let values: Vec<_> = vectors.iter().map(|v| restrict_to_surface(v, &grid).values).collect();
        let cross: Vec<CMatrix<T>> = (0..grid.len())
            .map(|p| DMatrix::from_fn(r, r, |a, b| grid.flux_product(p, &values[a][p], &values[b][p])))
            .collect();
        let panels = (to_f64((hi - lo) / (mesh.u_step_over_sigma * sigma)).ceil() as usize).max(1);
        let damp = (-s / tau).exp();
        let two_s2 = lit::<T>(2.0) * sigma * sigma;
        for (u, wu) in u_rule.composite(lo, hi, panels) {
            for (p, c) in cross.iter().enumerate() {
                let d = grid.arcs[p] - u;
                let g = peak * (-d * d / two_s2).exp();
                if g > T::zero() {
                    gram += c * creal(g * wu * ws * damp);
                }
            }
        }
        Ok(())
    };
    match *surface {
        Surface::Hyperboloid { base, s: s0 } => {
            if (to_f64(base.t - prev.t).abs() + to_f64(base.x - prev.x).abs()) > 1e-12 {
                return Err(Error::Unsupported("hyperboloid surfaces must be centred at the last flash".into()));
            }
            for (s, ws) in s_rule.composite(T::zero(), s0, mesh.s_panels) {
                on_hyperboloid(s, ws, None)?;
            }
        }
        Surface::Flat { eta, .. } => {
            let delta = -surface.offset(prev);
            if delta > T::zero() {
                let s_c = delta * eta.cosh();
                for (w, ww) in s_rule.graded(T::zero(), T::one(), mesh.s_panels, lit(0.3)) {
                    let s = s_c * (T::one() - w * w);
                    if !(s > T::zero()) {
                        continue;
                    }
                    let chi_c = (s_c / s).max(T::one()).acosh();
                    on_hyperboloid(s, ww * lit::<T>(2.0) * s_c * w, Some((s * (eta - chi_c), s * (eta + chi_c))))?;
                }
            }
        }
    }
    Ok(gram)
}

/// Type `i` summed over all its outcomes after the last flash in `collapsed`:
/// the no-flash weight `⟨W²⟩` up to `Σ` and the first-flash integral below
/// `Σ` (everything after a first flash integrates to its norm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummedOut {
    pub survival: f64,
    pub flashes: f64,
}

impl SummedOut {
    pub fn total(&self) -> f64 {
        self.survival + self.flashes
    }
}

/// The operators that sum out type `i` after its last flash `x'`:
/// `W_{x'}(Σ)²` and the first-flash Gram matrix below `Σ`, both on the
/// span of the type-`i` factors they were built from. Flashes of the other
/// types leave those factors alone, so one summation serves many of them.
#[derive(Debug, Clone)]
pub struct TypeSummation<T: Real> {
    pub particle: usize,
    pub survival_sq: CMatrix<T>,
    pub below: CMatrix<T>,
}

impl<T: Real> TypeSummation<T> {
    pub fn new(state: &TensorState<T>, i: usize, last: &SpacetimePoint<T>, surface: &Surface<T>, model: &RelFlashModel<T>, mesh: &BelowMesh<T>) -> Result<Self> {
        let factors = state.factors(i);
        let w = survival_operator(last, surface, &factors, &model.collapse, &model.survival_mesh)?;
        let below = flash_gram_below(last, surface, &factors, model, mesh)?;
        Ok(Self { particle: i, survival_sq: w.squared(), below })
    }

    /// `collapsed` must carry the same type-`i` factors as the state the
    /// summation was built from.
    pub fn apply(&self, collapsed: &TensorState<T>) -> Result<SummedOut> {
        let i = self.particle;
        if self.below.nrows() != collapsed.rank() {
            return Err(Error::DimensionMismatch { expected: self.below.nrows(), found: collapsed.rank() });
        }
        let mut ops: Vec<Option<&CMatrix<T>>> = vec![None; collapsed.particles()];
        ops[i] = Some(&self.survival_sq);
        let survival = collapsed.expectation(&ops)?;
        let mut others = collapsed.reduced_weights(i).transpose();
        others.zip_apply(&self.below, |a, b| *a *= b);
        let flashes = others.iter().fold(creal(T::zero()), |a, b| a + *b).re;
        Ok(SummedOut { survival: to_f64(survival), flashes: to_f64(flashes) })
    }
}

pub fn sum_out_type<T: Real>(
    collapsed: &TensorState<T>,
    i: usize,
    last: &SpacetimePoint<T>,
    surface: &Surface<T>,
    model: &RelFlashModel<T>,
    mesh: &BelowMesh<T>,
) -> Result<SummedOut> {
    TypeSummation::new(collapsed, i, last, surface, model, mesh)?.apply(collapsed)
}

/// Both sides of the consistency identity for type `i`:
/// `‖⊗K(f)ψ‖²` against survival to `Σ` plus the integral over one more
/// type-`i` flash below `Σ`.
pub fn rel_consistency_sides<T: Real>(
    state: &TensorState<T>,
    history: &RelFlashHistory<T>,
    i: usize,
    surface: &Surface<T>,
    model: &RelFlashModel<T>,
    mesh: &BelowMesh<T>,
) -> Result<(f64, f64)> {
    let collapsed = apply_rel_history(state, history, model)?;
    let lhs = to_f64(collapsed.norm_sqr());
    let rhs = sum_out_type(&collapsed, i, &history.last(i), surface, model, mesh)?.total();
    Ok((lhs, rhs))
}

/// `tr(ρ K†(f)K(f))` for an ensemble `ρ` and one flash sequence.
pub fn ensemble_density<T: Real>(rho: &Ensemble<T>, sequence: &[SpacetimePoint<T>], model: &RelFlashModel<T>) -> Result<T> {
    let k = rel_history_operator(sequence, &model.collapse)?;
    rho.members.iter().try_fold(T::zero(), |acc, e| Ok(acc + k.apply(e)?.norm_sqr()))
}

/// Marginal density of the type-`i` flashes `sequence` (seed first), through
/// the reduced density matrix of particle `i`.
pub fn type_marginal<T: Real>(state: &TensorState<T>, i: usize, sequence: &[SpacetimePoint<T>], model: &RelFlashModel<T>) -> Result<T> {
    if i >= state.particles() {
        return Err(Error::DimensionMismatch { expected: state.particles(), found: i + 1 });
    }
    ensemble_density(&state.reduced(i), sequence, model)
}

pub fn type1_marginal<T: Real>(state: &TensorState<T>, sequence: &[SpacetimePoint<T>], model: &RelFlashModel<T>) -> Result<T> {
    type_marginal(state, 0, sequence, model)
}

/// Type-1 marginals as the sum of the joint law over every type-2 outcome
/// up to `horizon`, one per type-1 sequence. Depends on the type-2 factors
/// and their dynamics term by term; only the total is fixed by `ρ₁`.
pub fn type1_marginals_by_summation<T: Real>(
    state: &TensorState<T>,
    seeds: &SeedConfig<T>,
    sequences: &[Vec<SpacetimePoint<T>>],
    horizon: &Surface<T>,
    model: &RelFlashModel<T>,
    mesh: &BelowMesh<T>,
) -> Result<Vec<f64>> {
    if state.particles() != 2 || seeds.types() != 2 {
        return Err(Error::Unsupported("summation marginal is written for two particle types".into()));
    }
    let summation = TypeSummation::new(state, 1, &seeds.seeds[1], horizon, model, mesh)?;
    sequences
        .iter()
        .map(|seq| {
            let k = rel_history_operator(seq, &model.collapse)?;
            Ok(summation.apply(&state.map_factor(0, |v| k.apply(v))?)?.total())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub joint: f64,
    pub marginals: [f64; 2],
    pub product: f64,
    /// `joint / product`.
    pub ratio: f64,
    /// Joint density with the cross terms between product terms dropped,
    /// i.e. for the classical mixture of the branches.
    pub decohered_joint: f64,
    pub equal: bool,
}

/// `‖K(f₁)⊗K(f₂)ψ‖²` against the product of the two marginals.
pub fn correlation_check<T: Real>(state: &TensorState<T>, history: &RelFlashHistory<T>, model: &RelFlashModel<T>, tol: f64) -> Result<CorrelationReport> {
    if state.particles() != 2 {
        return Err(Error::Unsupported("correlation check needs two particles".into()));
    }
    let collapsed = apply_rel_history(state, history, model)?;
    let joint = to_f64(collapsed.norm_sqr());
    let m1 = to_f64(type_marginal(state, 0, &history.sequence(0), model)?);
    let m2 = to_f64(type_marginal(state, 1, &history.sequence(1), model)?);
    let product = m1 * m2;
    let (g0, g1) = (collapsed.gram(0, None), collapsed.gram(1, None));
    let decohered = (0..collapsed.rank()).map(|r| (g0[(r, r)] * g1[(r, r)]).re).fold(T::zero(), |a, b| a + b);
    let ratio = joint / product;
    Ok(CorrelationReport {
        joint,
        marginals: [m1, m2],
        product,
        ratio,
        decohered_joint: to_f64(decohered),
        equal: (ratio - 1.0).abs() <= tol,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelSamplerOptions {
    /// Hard cap on flashes per type.
    pub max_flashes: usize,
}

impl Default for RelSamplerOptions {
    fn default() -> Self {
        Self { max_flashes: 10_000 }
    }
}

/// One sampled flash with the diagnostics of its draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampledFlash<T> {
    pub point: SpacetimePoint<T>,
    /// Proper time since the previous flash.
    pub proper_time: T,
    /// Rapidity of the flash seen from the previous one. Surface noise of
    /// width `σ` is a rapidity spread `σ/s`, so early flashes land far out.
    pub rapidity: T,
    /// Flux fraction of the state missed by the hyperboloid window.
    pub leakage: f64,
    /// Largest re-synthesis residual of the collapse at this flash.
    pub residual: f64,
}

/// Draws the next flash of a particle whose reduced state is
/// `ρ = Σ_{rr'} X_{rr'} |v_r⟩⟨v_{r'}|` (with `B = U√d` from `X`), given the
/// previous flash: `s ∼ Exp(τ)`, then a point `y` on the hyperboloid of
/// radius `s` from the flux density of `ρ`, then Gaussian arc noise.
/// Returns `None` without placing the flash when the whole hyperboloid lies
/// beyond `horizon`.
fn draw_flash<T: Real, R: Rng + ?Sized>(
    vectors: &[DiracState<T>],
    b: &CMatrix<T>,
    prev: &SpacetimePoint<T>,
    horizon: Option<&Surface<T>>,
    model: &RelFlashModel<T>,
    rng: &mut R,
) -> Result<Option<SampledFlash<T>>> {
    let spec = &model.collapse;
    let members: Vec<DiracState<T>> = (0..b.ncols())
        .map(|k| {
            let mut c = vectors[0].coeffs() * b[(0, k)];
            for (r, v) in vectors.iter().enumerate().skip(1) {
                c += v.coeffs() * b[(r, k)];
            }
            vectors[0].with_coeffs(c)
        })
        .collect::<Result<_>>()?;
    let trace = members.iter().fold(T::zero(), |a, m| a + m.norm_sqr());
    let s = spec.tau * lit::<T>(Exp1.sample(rng));
    if let Some(Surface::Flat { eta, .. }) = horizon {
        // in the rest frame of a flat slice the hyperboloid's lowest point
        // sits at proper time s above x'
        let delta = -horizon.unwrap().offset(prev);
        if s >= delta * eta.cosh() {
            return Ok(None);
        }
    }
    let hyper = Surface::Hyperboloid { base: *prev, s };
    let refs: Vec<&DiracState<T>> = members.iter().collect();
    let grid = window_covering(&refs, &hyper, &spec.window)?;
    let mut rho = vec![T::zero(); grid.len()];
    for m in &members {
        for (acc, w) in rho.iter_mut().zip(restrict_to_surface(m, &grid).flux_weights()) {
            *acc += w.max(T::zero());
        }
    }
    let captured = rho.iter().fold(T::zero(), |a, b| a + *b);
    let leakage = to_f64(T::one() - captured / trace);
    if leakage > to_f64(model.leakage_bound) {
        return Err(Error::Leakage { leakage, bound: to_f64(model.leakage_bound) });
    }
    let p = crate::grw::sample_discrete(&rho, rng)?;
    let x = grid.points[p].x + grid.dx * lit::<T>(rng.random::<f64>() - 0.5);
    let z: f64 = StandardNormal.sample(rng);
    let u = hyper.arc(x) + spec.sigma * lit(z);
    let point = hyper.point_at(hyper.x_at_arc(u));
    if !point.is_finite() {
        return Err(Error::NonFinite("flash position"));
    }
    Ok(Some(SampledFlash { point, proper_time: s, rapidity: u / s, leakage, residual: 0.0 }))
}

/// First flash after `prev` for the pure single-particle state `psi`,
/// without collapsing.
pub fn sample_first_flash<T: Real, R: Rng + ?Sized>(psi: &DiracState<T>, prev: &SpacetimePoint<T>, model: &RelFlashModel<T>, rng: &mut R) -> Result<SampledFlash<T>> {
    let b = DMatrix::from_element(1, 1, creal(T::one() / psi.norm_sqr().sqrt()));
    Ok(draw_flash(std::slice::from_ref(psi), &b, prev, None, model, rng)?.expect("no horizon given"))
}

/// `B = U√d` for `X = U d U†`, dropping null directions.
fn ensemble_factor<T: Real>(x: &CMatrix<T>) -> CMatrix<T> {
    let (d, u) = eigh(x);
    let top = d.iter().fold(T::zero(), |a, b| a.max(*b));
    let keep: Vec<usize> = (0..d.len()).filter(|k| d[*k] > top * lit(1e-14)).collect();
    DMatrix::from_fn(x.nrows(), keep.len(), |r, c| u[(r, keep[c])] * creal(d[keep[c]].sqrt()))
}

/// Flashes of particle `i` below `horizon`, drawn from its reduced state
/// with the other factors fixed. Returns the flashes and `state` with factor
/// `i` collapsed along them (rescaled, so only ratios are meaningful).
fn sample_type<T: Real, R: Rng + ?Sized>(
    state: &TensorState<T>,
    i: usize,
    seed: &SpacetimePoint<T>,
    horizon: &Surface<T>,
    model: &RelFlashModel<T>,
    options: &RelSamplerOptions,
    rng: &mut R,
) -> Result<(Vec<SampledFlash<T>>, TensorState<T>)> {
    let b = ensemble_factor(&state.reduced_weights(i));
    let mut vectors: Vec<DiracState<T>> = state.factors(i).into_iter().cloned().collect();
    let mut prev = *seed;
    let mut flashes = Vec::new();
    if !horizon.is_below(seed) {
        return Ok((flashes, state.clone()));
    }
    loop {
        if flashes.len() >= options.max_flashes {
            return Err(Error::Unsupported(format!("more than {} flashes before the horizon", options.max_flashes)));
        }
        let Some(mut next) = draw_flash(&vectors, &b, &prev, Some(horizon), model, rng)? else { break };
        if !horizon.is_below(&next.point) {
            break;
        }
        let mut collapsed = Vec::with_capacity(vectors.len());
        for v in &vectors {
            let c = collapse_operator(&prev, &next.point, &model.collapse, v)?;
            next.residual = next.residual.max(to_f64(c.residual));
            collapsed.push(c.state);
        }
        // trace of the collapsed reduced state, for rescaling
        let mut tr = T::zero();
        for k in 0..b.ncols() {
            let mut c = collapsed[0].coeffs() * b[(0, k)];
            for (r, v) in collapsed.iter().enumerate().skip(1) {
                c += v.coeffs() * b[(r, k)];
            }
            tr += crate::scalar::vec_norm_sqr(&c);
        }
        if !(to_f64(tr) > 1e-300) {
            return Err(Error::ImpossibleHistory { norm: to_f64(tr) });
        }
        let scale = creal(T::one() / tr.sqrt());
        vectors = collapsed.iter().map(|v| v.scale(scale)).collect();
        prev = next.point;
        flashes.push(next);
    }
    let mut k = 0;
    let out = state.map_factor(i, |_| {
        k += 1;
        Ok(vectors[k - 1].clone())
    })?;
    Ok((flashes, out))
}

/// A sampled history with per-flash diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelSample<T> {
    pub history: RelFlashHistory<T>,
    pub details: Vec<Vec<SampledFlash<T>>>,
}

impl<T: Real> RelSample<T> {
    pub fn max_leakage(&self) -> f64 {
        self.details.iter().flatten().map(|f| f.leakage).fold(0.0, f64::max)
    }

    pub fn max_residual(&self) -> f64 {
        self.details.iter().flatten().map(|f| f.residual).fold(0.0, f64::max)
    }
}

/// Samples the flashes of every type below `horizon` from `‖⊗K(f_i)ψ‖²`.
/// Type 1 comes from its reduced-state chain, which is its exact marginal;
/// type 2 then runs on the state conditioned on the type-1 flashes.
pub fn sample_rel_history<T: Real, R: Rng + ?Sized>(
    state: &TensorState<T>,
    seeds: &SeedConfig<T>,
    horizon: &Surface<T>,
    model: &RelFlashModel<T>,
    options: &RelSamplerOptions,
    rng: &mut R,
) -> Result<RelSample<T>> {
    check_types(state, seeds.types())?;
    if state.particles() > 2 {
        return Err(Error::Unsupported("sampling is written for one or two particles".into()));
    }
    let mut cur = state.normalized()?;
    let mut details = Vec::new();
    for i in 0..state.particles() {
        let (flashes, next) = sample_type(&cur, i, &seeds.seeds[i], horizon, model, options, rng)?;
        details.push(flashes);
        cur = next;
    }
    let flashes = details.iter().map(|d| d.iter().map(|f| f.point).collect()).collect();
    Ok(RelSample { history: RelFlashHistory::new(seeds.clone(), flashes)?, details })
}
