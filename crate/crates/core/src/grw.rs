//! Nonrelativistic flash processes on a periodic position grid.
//!
//! Amplitude vectors hold cell amplitudes `a_r = ψ(r)·ΔV^{1/2}`, so the
//! discrete norm is the continuum norm and multiplication operators act
//! entrywise. The rate integral `∫Λ` is always the discrete sum
//! `Σ_r Λ(r) ΔV`; with that choice the flash-time density is exactly minus
//! the derivative of the survival function, which is what the sampler and the
//! consistency checks rely on.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{
    apply_on_factor, positive_sqrt, scalar_multiple_of_identity, semigroup_propagator, OperatorKind, OperatorMatrix,
    Propagator, StateVector,
};
use crate::quadrature::GaussLegendre;
use crate::scalar::{cis, creal, lit, to_f64, vec_norm_sqr, CMatrix, CVector, Real};

/// Periodic cubic grid with `points` sites per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    pub d: usize,
    pub points: usize,
    pub spacing: T,
}

impl<T: Real> Grid<T> {
    pub fn new(d: usize, points: usize, spacing: T) -> Result<Self> {
        if d == 0 || d > 3 {
            return Err(Error::InvalidParameter { name: "grid.d", reason: format!("{d} not in 1..=3") });
        }
        if points < 2 {
            return Err(Error::InvalidParameter { name: "grid.points", reason: format!("{points} < 2") });
        }
        if !(spacing > T::zero()) {
            return Err(Error::InvalidParameter { name: "grid.spacing", reason: "must be positive".into() });
        }
        Ok(Self { d, points, spacing })
    }

    pub fn sites(&self) -> usize {
        self.points.pow(self.d as u32)
    }

    pub fn cell_volume(&self) -> T {
        self.spacing.powi(self.d as i32)
    }

    pub fn extent(&self) -> T {
        self.spacing * lit(self.points as f64)
    }

    /// Axis indices of a site, first axis major.
    pub fn axis_indices(&self, site: usize) -> Vec<usize> {
        let mut idx = vec![0; self.d];
        let mut rest = site;
        for a in (0..self.d).rev() {
            idx[a] = rest % self.points;
            rest /= self.points;
        }
        idx
    }

    /// Coordinates in `[-extent/2, extent/2)` per axis.
    pub fn coords(&self, site: usize) -> Vec<T> {
        let half = lit::<T>((self.points / 2) as f64);
        self.axis_indices(site)
            .into_iter()
            .map(|i| (lit::<T>(i as f64) - half) * self.spacing)
            .collect()
    }

    pub fn site_of(&self, coords: &[T]) -> usize {
        let half = (self.points / 2) as f64;
        coords.iter().fold(0, |acc, x| {
            let i = (to_f64(*x / self.spacing) + half).round().rem_euclid(self.points as f64) as usize;
            acc * self.points + i
        })
    }

    /// Minimum-image displacement per axis.
    pub fn displacement(&self, a: usize, b: usize) -> Vec<T> {
        let ia = self.axis_indices(a);
        let ib = self.axis_indices(b);
        let n = self.points as i64;
        ia.iter()
            .zip(&ib)
            .map(|(x, y)| {
                let mut k = (*x as i64 - *y as i64).rem_euclid(n);
                if k > n / 2 {
                    k -= n;
                }
                lit::<T>(k as f64) * self.spacing
            })
            .collect()
    }
}

/// Normalized Gaussian `(2πσ²)^{-d/2} e^{-r²/2σ²}` summed over periodic images.
pub fn periodic_gaussian<T: Real>(grid: &Grid<T>, a: usize, b: usize, sigma: T) -> T {
    let l = grid.extent();
    let images = (to_f64(lit::<T>(8.0) * sigma / l)).ceil() as i64 + 1;
    let two_s2 = lit::<T>(2.0) * sigma * sigma;
    let norm = (T::two_pi() * sigma * sigma).sqrt();
    grid.displacement(a, b).into_iter().fold(T::one(), |acc, delta| {
        let mut s = T::zero();
        for m in -images..=images {
            let x = delta + l * lit(m as f64);
            s += (-(x * x) / two_s2).exp();
        }
        acc * s / norm
    })
}

/// The common structure every nonrelativistic flash model exposes to the
/// density, conditioning and sampling routines.
pub trait FlashProcess<T: Real> {
    fn dims(&self) -> Vec<usize>;
    fn dim(&self) -> usize {
        self.dims().iter().product()
    }
    fn flash_types(&self) -> usize;
    fn locations(&self) -> usize;
    fn cell_volume(&self) -> T;
    fn tau(&self) -> T;
    /// `Λ_i(r)^{1/2} ψ`
    fn apply_rate_sqrt(&self, kind: usize, loc: usize, psi: &CVector<T>) -> CVector<T>;
    /// `W_t ψ`; zero for `t < 0`.
    fn propagate(&self, t: T, psi: &CVector<T>) -> Result<CVector<T>>;
    /// `λ` when `Σ_i Σ_r Λ_i(r) ΔV = λ I`.
    fn total_rate_scalar(&self) -> Option<T>;
    fn rate_sqrt_operator(&self, kind: usize, loc: usize) -> OperatorMatrix<T>;
    fn propagator_operator(&self, t: T) -> Result<OperatorMatrix<T>>;

    /// `‖Λ_i(r)^{1/2} ψ‖² ΔV` for every `(i, r)`, type major.
    fn flash_weights(&self, psi: &CVector<T>) -> Vec<T> {
        let dv = self.cell_volume();
        let mut out = Vec::with_capacity(self.flash_types() * self.locations());
        for i in 0..self.flash_types() {
            for r in 0..self.locations() {
                out.push(vec_norm_sqr(&self.apply_rate_sqrt(i, r, psi)) * dv);
            }
        }
        out
    }
}

/// Distinguishable particles on a periodic grid with Gaussian flash rates,
/// one flash type per particle.
#[derive(Debug, Clone)]
pub struct GrwModel<T: Real> {
    grid: Grid<T>,
    particles: usize,
    sigma: T,
    tau: T,
    mass: T,
    hamiltonian: CMatrix<T>,
    /// `g(r - s)/τ` for site pairs, row `r`.
    kernel: Vec<T>,
    decay_profile: Vec<T>,
    propagator: Propagator<T>,
}

impl<T: Real> GrwModel<T> {
    /// Free particles (`V = 0`).
    pub fn new(grid: Grid<T>, particles: usize, sigma: T, tau: T, mass: T) -> Result<Self> {
        Self::with_potential(grid, particles, sigma, tau, mass, None)
    }

    /// `-∇²/2m + V` with `V` given per site.
    pub fn with_potential(
        grid: Grid<T>,
        particles: usize,
        sigma: T,
        tau: T,
        mass: T,
        potential: Option<&[T]>,
    ) -> Result<Self> {
        if !(mass > T::zero()) {
            return Err(Error::InvalidParameter { name: "mass", reason: "must be positive".into() });
        }
        let h = grid_hamiltonian(&grid, mass, potential)?;
        Self::with_hamiltonian(grid, particles, sigma, tau, mass, h)
    }

    /// Arbitrary hermitian single-particle Hamiltonian on the grid.
    pub fn with_hamiltonian(grid: Grid<T>, particles: usize, sigma: T, tau: T, mass: T, h: CMatrix<T>) -> Result<Self> {
        if particles == 0 {
            return Err(Error::InvalidParameter { name: "particles", reason: "need at least one".into() });
        }
        if !(sigma > T::zero()) {
            return Err(Error::InvalidParameter { name: "sigma", reason: "must be positive".into() });
        }
        if !(tau > T::zero()) {
            return Err(Error::InvalidParameter { name: "tau", reason: "must be positive".into() });
        }
        let n = grid.sites();
        if h.nrows() != n || h.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, found: h.nrows() });
        }
        OperatorMatrix::dense(h.clone(), OperatorKind::Hermitian).validate(lit(1e-10))?;
        let mut kernel = vec![T::zero(); n * n];
        for r in 0..n {
            for s in r..n {
                let g = periodic_gaussian(&grid, r, s, sigma) / tau;
                kernel[r * n + s] = g;
                kernel[s * n + r] = g;
            }
        }
        let dv = grid.cell_volume();
        let decay_profile: Vec<T> = (0..n).map(|s| (0..n).fold(T::zero(), |acc, r| acc + kernel[r * n + s]) * dv).collect();
        let propagator = Propagator::new(&h, &OperatorMatrix::real_diagonal(&decay_profile))?;
        Ok(Self { grid, particles, sigma, tau, mass, hamiltonian: h, kernel, decay_profile, propagator })
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn sigma(&self) -> T {
        self.sigma
    }

    pub fn mass(&self) -> T {
        self.mass
    }

    pub fn hamiltonian(&self) -> &CMatrix<T> {
        &self.hamiltonian
    }

    /// Single-particle `∫Λ = Σ_r Λ(r) ΔV` as a diagonal profile.
    pub fn decay_profile(&self) -> &[T] {
        &self.decay_profile
    }

    /// `Λ_i(r)` on the full N-particle space, diagonal in position.
    pub fn gaussian_flash_rate(&self, kind: usize, loc: usize) -> OperatorMatrix<T> {
        let n = self.grid.sites();
        let stride = n.pow((self.particles - 1 - kind) as u32);
        let entries: Vec<T> = (0..self.dim()).map(|idx| self.kernel[loc * n + (idx / stride) % n]).collect();
        OperatorMatrix::real_diagonal(&entries)
    }

    /// Single-particle propagator `exp(t(-iH - ½∫Λ))`.
    pub fn single_propagator(&self, t: T) -> Result<OperatorMatrix<T>> {
        self.propagator.at(t)
    }

    fn site_stride(&self, kind: usize) -> usize {
        self.grid.sites().pow((self.particles - 1 - kind) as u32)
    }

    /// Position marginal of particle `kind` (discrete probabilities).
    pub fn marginal(&self, kind: usize, psi: &CVector<T>) -> Vec<T> {
        let n = self.grid.sites();
        let stride = self.site_stride(kind);
        let mut p = vec![T::zero(); n];
        for (idx, a) in psi.iter().enumerate() {
            p[(idx / stride) % n] += a.norm_sqr();
        }
        p
    }
}

/// `-∇²/2m + V` with the periodic second-difference Laplacian on every axis.
pub fn grid_hamiltonian<T: Real>(grid: &Grid<T>, mass: T, potential: Option<&[T]>) -> Result<CMatrix<T>> {
    let n = grid.sites();
    if let Some(v) = potential {
        if v.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: v.len() });
        }
    }
    let hop = T::one() / (lit::<T>(2.0) * mass * grid.spacing * grid.spacing);
    let mut h = CMatrix::from_element(n, n, creal(T::zero()));
    for site in 0..n {
        let idx = grid.axis_indices(site);
        h[(site, site)] += creal(lit::<T>(2.0 * grid.d as f64) * hop);
        for axis in 0..grid.d {
            for step in [1, grid.points - 1] {
                let mut nb = idx.clone();
                nb[axis] = (nb[axis] + step) % grid.points;
                let other = nb.iter().fold(0, |acc, i| acc * grid.points + i);
                h[(site, other)] -= creal(hop);
            }
        }
        if let Some(v) = potential {
            h[(site, site)] += creal(v[site]);
        }
    }
    Ok(h)
}

impl<T: Real> FlashProcess<T> for GrwModel<T> {
    fn dims(&self) -> Vec<usize> {
        vec![self.grid.sites(); self.particles]
    }

    fn flash_types(&self) -> usize {
        self.particles
    }

    fn locations(&self) -> usize {
        self.grid.sites()
    }

    fn cell_volume(&self) -> T {
        self.grid.cell_volume()
    }

    fn tau(&self) -> T {
        self.tau
    }

    fn apply_rate_sqrt(&self, kind: usize, loc: usize, psi: &CVector<T>) -> CVector<T> {
        let n = self.grid.sites();
        let stride = self.site_stride(kind);
        DVector::from_iterator(
            psi.len(),
            psi.iter().enumerate().map(|(idx, a)| *a * creal(self.kernel[loc * n + (idx / stride) % n].sqrt())),
        )
    }

    fn propagate(&self, t: T, psi: &CVector<T>) -> Result<CVector<T>> {
        if t < T::zero() {
            return Ok(psi * creal(T::zero()));
        }
        if self.particles == 1 {
            return self.propagator.apply(t, psi);
        }
        let w = self.propagator.at(t)?.to_dense();
        let dims = self.dims();
        let mut out = psi.clone();
        for k in 0..self.particles {
            out = apply_on_factor(&w, k, &dims, &out);
        }
        Ok(out)
    }

    fn total_rate_scalar(&self) -> Option<T> {
        self.propagator.decay_is_scalar().map(|g| g * lit(self.particles as f64))
    }

    fn rate_sqrt_operator(&self, kind: usize, loc: usize) -> OperatorMatrix<T> {
        positive_sqrt(&self.gaussian_flash_rate(kind, loc)).expect("gaussian rates are positive diagonals")
    }

    fn propagator_operator(&self, t: T) -> Result<OperatorMatrix<T>> {
        let w = self.propagator.at(t)?;
        let mut out = w.clone();
        for _ in 1..self.particles {
            out = crate::hilbert::tensor_product(&out, &w);
        }
        Ok(out)
    }

    fn flash_weights(&self, psi: &CVector<T>) -> Vec<T> {
        let n = self.grid.sites();
        let dv = self.grid.cell_volume();
        let mut out = Vec::with_capacity(self.particles * n);
        for kind in 0..self.particles {
            let p = self.marginal(kind, psi);
            for r in 0..n {
                let row = &self.kernel[r * n..(r + 1) * n];
                out.push(row.iter().zip(&p).fold(T::zero(), |acc, (g, q)| acc + *g * *q) * dv);
            }
        }
        out
    }
}

/// General flash model with a dense Hamiltonian and explicit rate operators
/// per type and location (used for Fock-space and toy models).
#[derive(Debug, Clone)]
pub struct DenseFlashModel<T: Real> {
    dims: Vec<usize>,
    tau: T,
    cell_volume: T,
    rates_sqrt: Vec<Vec<OperatorMatrix<T>>>,
    total_rate: OperatorMatrix<T>,
    propagator: Propagator<T>,
    scalar_rate: Option<T>,
}

impl<T: Real> DenseFlashModel<T> {
    /// `rates[i][r]` is `Λ_i(r)`; each must be positive.
    pub fn new(hamiltonian: CMatrix<T>, rates: Vec<Vec<OperatorMatrix<T>>>, cell_volume: T, tau: T) -> Result<Self> {
        let n = hamiltonian.nrows();
        OperatorMatrix::dense(hamiltonian.clone(), OperatorKind::Hermitian).validate(lit(1e-10))?;
        let mut total = OperatorMatrix::zeros(n);
        let mut rates_sqrt = Vec::with_capacity(rates.len());
        for per_type in &rates {
            let mut sq = Vec::with_capacity(per_type.len());
            for op in per_type {
                if op.dim() != n {
                    return Err(Error::DimensionMismatch { expected: n, found: op.dim() });
                }
                let pos = op.clone().with_kind(OperatorKind::Positive);
                pos.validate(lit::<T>(1e-10) * pos.norm_bound().max(T::one()))?;
                total = total.add(&pos.scale(cell_volume))?;
                sq.push(positive_sqrt(&pos)?);
            }
            rates_sqrt.push(sq);
        }
        let propagator = Propagator::new(&hamiltonian, &total)?;
        let scalar_rate = scalar_multiple_of_identity(&total);
        Ok(Self { dims: vec![n], tau, cell_volume, rates_sqrt, total_rate: total, propagator, scalar_rate })
    }

    pub fn total_rate(&self) -> &OperatorMatrix<T> {
        &self.total_rate
    }
}

impl<T: Real> FlashProcess<T> for DenseFlashModel<T> {
    fn dims(&self) -> Vec<usize> {
        self.dims.clone()
    }

    fn flash_types(&self) -> usize {
        self.rates_sqrt.len()
    }

    fn locations(&self) -> usize {
        self.rates_sqrt.first().map_or(0, |v| v.len())
    }

    fn cell_volume(&self) -> T {
        self.cell_volume
    }

    fn tau(&self) -> T {
        self.tau
    }

    fn apply_rate_sqrt(&self, kind: usize, loc: usize, psi: &CVector<T>) -> CVector<T> {
        self.rates_sqrt[kind][loc].apply(psi)
    }

    fn propagate(&self, t: T, psi: &CVector<T>) -> Result<CVector<T>> {
        self.propagator.apply(t, psi)
    }

    fn total_rate_scalar(&self) -> Option<T> {
        self.scalar_rate
    }

    fn rate_sqrt_operator(&self, kind: usize, loc: usize) -> OperatorMatrix<T> {
        self.rates_sqrt[kind][loc].clone()
    }

    fn propagator_operator(&self, t: T) -> Result<OperatorMatrix<T>> {
        if self.scalar_rate.is_some() {
            self.propagator.at(t)
        } else {
            semigroup_propagator(self.propagator.generator(), t)
        }
    }
}

/// A flash: time, grid location index and type (particle label, 0-based).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlashEvent<T> {
    pub t: T,
    pub site: usize,
    pub kind: usize,
}

/// Per-type flash sequences after the initial time `t0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlashHistory<T> {
    pub t0: T,
    pub by_type: Vec<Vec<FlashEvent<T>>>,
    pub rng_seed: Option<u64>,
}

impl<T: Real> FlashHistory<T> {
    pub fn empty(t0: T, types: usize) -> Self {
        Self { t0, by_type: vec![Vec::new(); types], rng_seed: None }
    }

    /// Splits a flat event list by type; `types` fixes the number of rows.
    pub fn from_events(t0: T, types: usize, events: &[FlashEvent<T>]) -> Result<Self> {
        let mut h = Self::empty(t0, types);
        for e in events {
            if e.kind >= types {
                return Err(Error::InvalidParameter { name: "flash type", reason: format!("{} of {types}", e.kind) });
            }
            h.by_type[e.kind].push(*e);
        }
        h.validate()?;
        Ok(h)
    }

    pub fn len(&self) -> usize {
        self.by_type.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, e: FlashEvent<T>) {
        self.by_type[e.kind].push(e);
    }

    pub fn validate(&self) -> Result<()> {
        for (kind, seq) in self.by_type.iter().enumerate() {
            for (index, e) in seq.iter().enumerate() {
                if e.kind != kind {
                    return Err(Error::InvalidParameter { name: "flash type", reason: format!("{} filed under {kind}", e.kind) });
                }
                if e.t < self.t0 {
                    return Err(Error::BeforeInitialTime { t: to_f64(e.t), t0: to_f64(self.t0) });
                }
                if index > 0 && !(e.t > seq[index - 1].t) {
                    return Err(Error::NonIncreasingTimes { kind, index });
                }
            }
        }
        Ok(())
    }

    /// All events merged in time order (ties broken by type).
    pub fn merged(&self) -> Vec<FlashEvent<T>> {
        let mut all: Vec<FlashEvent<T>> = self.by_type.iter().flatten().copied().collect();
        all.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap_or(std::cmp::Ordering::Equal).then(a.kind.cmp(&b.kind)));
        all
    }

    pub fn last_time(&self) -> T {
        self.by_type.iter().flatten().fold(self.t0, |acc, e| acc.max(e.t))
    }
}

/// `K ψ` for a history, applied factor by factor.
pub fn apply_history<T: Real, M: FlashProcess<T> + ?Sized>(model: &M, psi: &CVector<T>, history: &FlashHistory<T>) -> Result<CVector<T>> {
    history.validate()?;
    let mut v = psi.clone();
    let mut t = history.t0;
    for e in history.merged() {
        v = model.propagate(e.t - t, &v)?;
        v = model.apply_rate_sqrt(e.kind, e.site, &v);
        t = e.t;
    }
    Ok(v)
}

/// The operator `K_n = Λ(r_n)^{1/2} W_{t_n - t_{n-1}} ⋯ Λ(r_1)^{1/2} W_{t_1 - t_0}`.
pub fn history_operator<T: Real, M: FlashProcess<T> + ?Sized>(model: &M, history: &FlashHistory<T>) -> Result<OperatorMatrix<T>> {
    history.validate()?;
    let mut k = OperatorMatrix::identity(model.dim());
    let mut t = history.t0;
    for e in history.merged() {
        let w = model.propagator_operator(e.t - t)?;
        k = model.rate_sqrt_operator(e.kind, e.site).compose(&w.compose(&k));
        t = e.t;
    }
    Ok(k)
}

/// `‖K_n ψ‖²`, the density of the first flashes w.r.t. `Π dt dᵈr`.
pub fn joint_flash_density<T: Real, M: FlashProcess<T> + ?Sized>(model: &M, psi: &StateVector<T>, history: &FlashHistory<T>) -> Result<T> {
    check_state(model, psi)?;
    Ok(vec_norm_sqr(&apply_history(model, psi.amplitudes(), history)?))
}

/// `‖W_{t - t0} ψ‖²`.
pub fn survival_probability<T: Real, M: FlashProcess<T> + ?Sized>(model: &M, psi: &StateVector<T>, t0: T, t: T) -> Result<T> {
    check_state(model, psi)?;
    if t < t0 {
        return Err(Error::BeforeInitialTime { t: to_f64(t), t0: to_f64(t0) });
    }
    Ok(vec_norm_sqr(&model.propagate(t - t0, psi.amplitudes())?))
}

/// `ψ_t = W_{t - t_n} K_n ψ / ‖·‖`.
pub fn conditional_state<T: Real, M: FlashProcess<T> + ?Sized>(
    model: &M,
    psi: &StateVector<T>,
    history: &FlashHistory<T>,
    t: T,
) -> Result<StateVector<T>> {
    check_state(model, psi)?;
    let last = history.last_time();
    if t < last {
        return Err(Error::BeforeInitialTime { t: to_f64(t), t0: to_f64(last) });
    }
    let k = apply_history(model, psi.amplitudes(), history)?;
    let v = model.propagate(t - last, &k)?;
    let norm = vec_norm_sqr(&v).sqrt();
    if !(to_f64(norm) > 1e-150) {
        return Err(Error::ImpossibleHistory { norm: to_f64(norm) });
    }
    StateVector::new(v / creal(norm), psi.dims().to_vec())
}

fn check_state<T: Real, M: FlashProcess<T> + ?Sized>(model: &M, psi: &StateVector<T>) -> Result<()> {
    if psi.dim() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), found: psi.dim() });
    }
    Ok(())
}

/// Sampler settings; defaults follow the bisection contract
/// (tolerance `1e-10 τ`, at most 200 halvings).
#[derive(Debug, Clone, Copy)]
pub struct SamplerOptions {
    pub time_tol_over_tau: f64,
    pub max_iterations: usize,
    pub max_flashes: usize,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self { time_tol_over_tau: 1e-10, max_iterations: 200, max_flashes: 1_000_000 }
    }
}

/// Draws the flashes in `[t0, horizon]`.
pub fn sample_history<T: Real, M: FlashProcess<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    psi: &StateVector<T>,
    t0: T,
    horizon: T,
    rng: &mut R,
) -> Result<FlashHistory<T>> {
    sample_history_with(model, psi, t0, horizon, rng, SamplerOptions::default())
}

pub fn sample_history_with<T: Real, M: FlashProcess<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    psi: &StateVector<T>,
    t0: T,
    horizon: T,
    rng: &mut R,
    opts: SamplerOptions,
) -> Result<FlashHistory<T>> {
    check_state(model, psi)?;
    if horizon < t0 {
        return Err(Error::BeforeInitialTime { t: to_f64(horizon), t0: to_f64(t0) });
    }
    let mut history = FlashHistory::empty(t0, model.flash_types());
    let mut cur = psi.amplitudes() / creal(psi.norm());
    let mut t = t0;
    let tol = model.tau() * lit(opts.time_tol_over_tau);
    while history.len() < opts.max_flashes {
        let remaining = horizon - t;
        let u: f64 = rng.random::<f64>();
        let u = lit::<T>(u.max(f64::MIN_POSITIVE));
        let dt = match model.total_rate_scalar() {
            Some(rate) => {
                let dt = -u.ln() / rate;
                if dt > remaining {
                    break;
                }
                dt
            }
            None => {
                let surv = |dt: T| -> Result<T> { Ok(vec_norm_sqr(&model.propagate(dt, &cur)?)) };
                if surv(remaining)? > u {
                    break;
                }
                let mut lo = T::zero();
                let mut hi = model.tau().min(remaining);
                while surv(hi)? > u {
                    lo = hi;
                    hi = (hi * lit(2.0)).min(remaining);
                }
                let mut iters = 0;
                while hi - lo > tol {
                    iters += 1;
                    if iters > opts.max_iterations {
                        return Err(Error::BisectionFailed { iterations: iters });
                    }
                    let mid = (lo + hi) * lit(0.5);
                    if surv(mid)? > u {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                (lo + hi) * lit(0.5)
            }
        };
        let evolved = model.propagate(dt, &cur)?;
        let weights = model.flash_weights(&evolved);
        let pick = sample_discrete(&weights, rng)?;
        let kind = pick / model.locations();
        let site = pick % model.locations();
        let collapsed = model.apply_rate_sqrt(kind, site, &evolved);
        let norm = vec_norm_sqr(&collapsed).sqrt();
        if !(to_f64(norm) > 1e-150) {
            return Err(Error::ImpossibleHistory { norm: to_f64(norm) });
        }
        cur = collapsed / creal(norm);
        t += dt;
        history.push(FlashEvent { t, site, kind });
    }
    Ok(history)
}

/// Inverse-CDF draw from unnormalized nonnegative weights.
pub fn sample_discrete<T: Real, R: Rng + ?Sized>(weights: &[T], rng: &mut R) -> Result<usize> {
    let total = weights.iter().fold(T::zero(), |acc, w| acc + *w);
    if !(to_f64(total) > 0.0) || !to_f64(total).is_finite() {
        return Err(Error::ImpossibleHistory { norm: to_f64(total) });
    }
    let target = lit::<T>(rng.random::<f64>()) * total;
    let mut acc = T::zero();
    for (i, w) in weights.iter().enumerate() {
        acc += *w;
        if acc > target {
            return Ok(i);
        }
    }
    Ok(weights.iter().rposition(|w| *w > T::zero()).unwrap_or(weights.len() - 1))
}

/// `m(r) = Σ_i` (marginal density of particle `i` at `r`).
pub fn matter_density<T: Real>(model: &GrwModel<T>, psi: &StateVector<T>) -> Vec<T> {
    let dv = model.grid().cell_volume();
    let mut m = vec![T::zero(); model.grid().sites()];
    for kind in 0..model.particles() {
        for (slot, p) in m.iter_mut().zip(model.marginal(kind, psi.amplitudes())) {
            *slot += p / dv;
        }
    }
    m
}

/// Gaussian packet `∝ exp(-(r-c)²/4w² + i k·r)` as cell amplitudes, normalized.
pub fn gaussian_packet<T: Real>(grid: &Grid<T>, center: &[T], width: T, momentum: &[T]) -> Result<StateVector<T>> {
    if center.len() != grid.d || momentum.len() != grid.d {
        return Err(Error::DimensionMismatch { expected: grid.d, found: center.len() });
    }
    let n = grid.sites();
    let origin = grid.site_of(&vec![T::zero(); grid.d]);
    let v = DVector::from_iterator(
        n,
        (0..n).map(|s| {
            // distance from the centre measured through the minimum image
            let x = grid.coords(s);
            let shift = grid.displacement(s, origin);
            let mut e = T::zero();
            let mut phase = T::zero();
            for a in 0..grid.d {
                let mut dx = shift[a] - center[a];
                let l = grid.extent();
                dx -= l * (dx / l).round();
                e += dx * dx;
                phase += momentum[a] * x[a];
            }
            cis(phase) * creal((-e / (lit::<T>(4.0) * width * width)).exp())
        }),
    );
    StateVector::normalized(v, vec![n])
}

/// Product state of single-particle vectors, first particle major.
pub fn product_state<T: Real>(factors: &[StateVector<T>]) -> Result<StateVector<T>> {
    let mut it = factors.iter();
    let first = it.next().ok_or(Error::InvalidParameter { name: "factors", reason: "empty".into() })?;
    Ok(it.fold(first.clone(), |acc, f| acc.tensor(f)))
}

/// Both sides of the marginalize-plus-survive identity for a history `h`
/// with last flash at `t_n`:
/// `Σ_{i,r} ΔV ∫_{t_n}^{T} ρ(h + (t,r,i)) dt + ρ(h)·S_{ψ_{t_n}}(T)` versus `ρ(h)`.
pub fn consistency_sides<T: Real, M: FlashProcess<T> + ?Sized>(
    model: &M,
    psi: &StateVector<T>,
    history: &FlashHistory<T>,
    horizon: T,
    rule: &GaussLegendre,
    panels: usize,
) -> Result<(T, T)> {
    let base = apply_history(model, psi.amplitudes(), history)?;
    let rho_n = vec_norm_sqr(&base);
    let tn = history.last_time();
    let mut integral = T::zero();
    for (t, w) in rule.composite(tn, horizon, panels) {
        let evolved = model.propagate(t - tn, &base)?;
        let dens = model.flash_weights(&evolved).into_iter().fold(T::zero(), |acc, x| acc + x);
        integral += w * dens;
    }
    let survival = if to_f64(rho_n) > 0.0 {
        let cond = conditional_state(model, psi, history, tn)?;
        survival_probability(model, &cond, tn, horizon)?
    } else {
        T::zero()
    };
    Ok((integral + rho_n * survival, rho_n))
}
