//! Free Dirac field in 1+1 dimensions with `α = σx`, `β = σz`.
//!
//! Global solutions are stored as coefficients on a finite momentum grid,
//! positive-energy modes first:
//! `ψ(t,x) = L^{-1/2} Σ_j [c_j u(k_j) e^{i(k_j x - E_j t)} + c_{M+j} v(k_j) e^{i(k_j x + E_j t)}]`
//! with `u = (cos θ/2, sin θ/2)`, `v = (-sin θ/2, cos θ/2)`, `cos θ = m/E`,
//! `sin θ = k/E`. The coefficient vector is the state in the Heisenberg
//! picture: restricting it to a spacelike curve is the unitary map onto that
//! curve, and its Euclidean norm is the conserved flux through any curve
//! that captures the whole packet.
//!
//! Curves are graphs `t = T(x)` sampled uniformly in `x` on a window. The
//! flux inner product is `Σ_p φ_p† (1 - T'(x_p) σx) ψ_p Δx`. Periodicity of
//! the mode sum means windows must stay shorter than the box, see
//! [`ModeGrid::length`].

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{cis, creal, lit, norm_sqr, to_f64, vec_norm_sqr, CMatrix, CVector, Real, C};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpacetimePoint<T> {
    pub t: T,
    pub x: T,
}

impl<T: Real> SpacetimePoint<T> {
    pub fn new(t: T, x: T) -> Self {
        Self { t, x }
    }

    pub fn origin() -> Self {
        Self { t: T::zero(), x: T::zero() }
    }

    pub fn is_finite(&self) -> bool {
        to_f64(self.t).is_finite() && to_f64(self.x).is_finite()
    }

    /// `(Δt)² - (Δx)²` from `self` to `other`.
    pub fn interval_sq(&self, other: &Self) -> T {
        let dt = other.t - self.t;
        let dx = other.x - self.x;
        dt * dt - dx * dx
    }

    /// Proper time from `self` to `other` when `other ∈ F(self)`.
    pub fn proper_time_to(&self, other: &Self) -> Option<T> {
        let dt = other.t - self.t;
        let dx = other.x - self.x;
        if dt > dx.abs() {
            Some((dt * dt - dx * dx).sqrt())
        } else {
            None
        }
    }

    /// Active boost with rapidity `η`: a point at rest at the origin acquires
    /// velocity `tanh η`.
    pub fn boost(&self, eta: T) -> Self {
        let (c, s) = (eta.cosh(), eta.sinh());
        Self { t: c * self.t + s * self.x, x: s * self.t + c * self.x }
    }
}

/// Two-component spinor value.
pub type Spinor<T> = [C<T>; 2];

/// Momentum grid `k_j = k_c - K + (j + ½)Δk`, `Δk = 2K/M`, box length `2π/Δk`.
#[derive(Debug, Clone)]
pub struct ModeGrid<T> {
    mass: T,
    k_center: T,
    cutoff: T,
    k: Vec<T>,
    energy: Vec<T>,
    u: Vec<[T; 2]>,
    v: Vec<[T; 2]>,
    dk: T,
}

impl<T: Real> ModeGrid<T> {
    pub fn new(mass: T, k_center: T, cutoff: T, modes: usize) -> Result<Self> {
        if !(mass > T::zero()) {
            return Err(Error::InvalidParameter { name: "mass", reason: "must be positive".into() });
        }
        if !(cutoff > T::zero()) || modes == 0 {
            return Err(Error::InvalidParameter { name: "modes", reason: "need a positive cutoff and at least one mode".into() });
        }
        let dk = lit::<T>(2.0) * cutoff / lit(modes as f64);
        let half = lit::<T>(0.5);
        let mut k = Vec::with_capacity(modes);
        let mut energy = Vec::with_capacity(modes);
        let mut u = Vec::with_capacity(modes);
        let mut v = Vec::with_capacity(modes);
        for j in 0..modes {
            let kj = k_center - cutoff + (lit::<T>(j as f64) + half) * dk;
            let e = (kj * kj + mass * mass).sqrt();
            // half-angle formulas stay accurate when k ≪ m
            let c = ((T::one() + mass / e) * half).sqrt();
            let s = kj / (e * lit(2.0) * c);
            k.push(kj);
            energy.push(e);
            u.push([c, s]);
            v.push([-s, c]);
        }
        Ok(Self { mass, k_center, cutoff, k, energy, u, v, dk })
    }

    /// Grid centred on the image of this grid's centre under a boost, with
    /// the same cutoff and mode count.
    pub fn boosted(&self, eta: T) -> Self {
        let e = (self.k_center * self.k_center + self.mass * self.mass).sqrt();
        let kc = eta.cosh() * self.k_center + eta.sinh() * e;
        Self::new(self.mass, kc, self.cutoff, self.k.len()).expect("parameters already validated")
    }

    pub fn mass(&self) -> T {
        self.mass
    }

    pub fn k_center(&self) -> T {
        self.k_center
    }

    pub fn cutoff(&self) -> T {
        self.cutoff
    }

    pub fn modes(&self) -> usize {
        self.k.len()
    }

    /// Number of coefficients, `2M`.
    pub fn dim(&self) -> usize {
        2 * self.k.len()
    }

    pub fn momenta(&self) -> &[T] {
        &self.k
    }

    pub fn energies(&self) -> &[T] {
        &self.energy
    }

    pub fn spacing(&self) -> T {
        self.dk
    }

    /// Period of every mode in `x`.
    pub fn length(&self) -> T {
        T::two_pi() / self.dk
    }

    /// Value of coefficient-basis function `j` at `(t, x)`.
    pub fn mode_value(&self, j: usize, t: T, x: T) -> Spinor<T> {
        let m = self.k.len();
        let scale = T::one() / self.length().sqrt();
        let (i, sign, spinor) = if j < m { (j, -T::one(), self.u[j]) } else { (j - m, T::one(), self.v[j - m]) };
        let phase = cis(self.k[i] * x + sign * self.energy[i] * t) * scale;
        [phase * spinor[0], phase * spinor[1]]
    }

    /// Rows `2p, 2p+1` hold the spinor components of every basis function at
    /// point `p`.
    pub fn synthesis_matrix(&self, points: &[SpacetimePoint<T>]) -> CMatrix<T> {
        let m = self.k.len();
        let mut s = DMatrix::from_element(2 * points.len(), 2 * m, creal(T::zero()));
        let mut ph = vec![creal(T::zero()); m];
        for (p, pt) in points.iter().enumerate() {
            self.phases(pt, &mut ph);
            for j in 0..m {
                let et = cis(self.energy[j] * pt.t);
                let (pos, neg) = (ph[j] * et.conj(), ph[j] * et);
                s[(2 * p, j)] = pos * self.u[j][0];
                s[(2 * p + 1, j)] = pos * self.u[j][1];
                s[(2 * p, m + j)] = neg * self.v[j][0];
                s[(2 * p + 1, m + j)] = neg * self.v[j][1];
            }
        }
        s
    }

    /// `S c` without storing `S`.
    pub fn evaluate(&self, points: &[SpacetimePoint<T>], coeffs: &CVector<T>) -> Vec<Spinor<T>> {
        let m = self.k.len();
        let mut ph = vec![creal(T::zero()); m];
        points
            .iter()
            .map(|pt| {
                self.phases(pt, &mut ph);
                let (mut a, mut b) = (creal(T::zero()), creal(T::zero()));
                for j in 0..m {
                    let et = cis(self.energy[j] * pt.t);
                    let (pos, neg) = (ph[j] * et.conj() * coeffs[j], ph[j] * et * coeffs[m + j]);
                    a += pos * self.u[j][0] + neg * self.v[j][0];
                    b += pos * self.u[j][1] + neg * self.v[j][1];
                }
                [a, b]
            })
            .collect()
    }

    /// `S† w` without storing `S`, with `w` given per point as a spinor.
    pub fn project(&self, points: &[SpacetimePoint<T>], w: &[Spinor<T>]) -> CVector<T> {
        let m = self.k.len();
        let mut ph = vec![creal(T::zero()); m];
        let mut c = CVector::from_element(2 * m, creal(T::zero()));
        for (pt, [a, b]) in points.iter().zip(w) {
            self.phases(pt, &mut ph);
            for j in 0..m {
                let et = cis(self.energy[j] * pt.t);
                let (pos, neg) = ((ph[j] * et.conj()).conj(), (ph[j] * et).conj());
                c[j] += pos * (*a * self.u[j][0] + *b * self.u[j][1]);
                c[m + j] += neg * (*a * self.v[j][0] + *b * self.v[j][1]);
            }
        }
        c
    }

    fn phases(&self, pt: &SpacetimePoint<T>, out: &mut [C<T>]) {
        let scale = T::one() / self.length().sqrt();
        let step = cis(self.dk * pt.x);
        for j in 0..out.len() {
            out[j] = if j % 32 == 0 { cis(self.k[j] * pt.x) * scale } else { out[j - 1] * step };
        }
    }
}

/// Global solution of the free Dirac equation.
#[derive(Debug, Clone)]
pub struct DiracState<T: Real> {
    grid: ModeGrid<T>,
    coeffs: CVector<T>,
}

impl<T: Real> DiracState<T> {
    pub fn new(grid: ModeGrid<T>, coeffs: CVector<T>) -> Result<Self> {
        if coeffs.len() != grid.dim() {
            return Err(Error::DimensionMismatch { expected: grid.dim(), found: coeffs.len() });
        }
        if !coeffs.iter().all(|z| crate::scalar::is_finite(*z)) {
            return Err(Error::NonFinite("Dirac coefficients"));
        }
        Ok(Self { grid, coeffs })
    }

    pub fn zero(grid: ModeGrid<T>) -> Self {
        let n = grid.dim();
        Self { grid, coeffs: CVector::from_element(n, creal(T::zero())) }
    }

    /// Positive-energy packet with position density `∝ exp(-(x-x₀)²/2w²)`
    /// at `t = 0` (up to the spinor dependence on `k`) and mean momentum `k₀`.
    pub fn gaussian_packet(grid: &ModeGrid<T>, x0: T, width: T, k0: T) -> Result<Self> {
        if !(width > T::zero()) {
            return Err(Error::InvalidParameter { name: "width", reason: "must be positive".into() });
        }
        let m = grid.modes();
        let mut c = CVector::from_element(2 * m, creal(T::zero()));
        for j in 0..m {
            let dk = grid.k[j] - k0;
            c[j] = cis(-grid.k[j] * x0) * (-dk * dk * width * width).exp();
        }
        let norm = vec_norm_sqr(&c).sqrt();
        if !(norm > T::zero()) {
            return Err(Error::ImpossibleHistory { norm: 0.0 });
        }
        Ok(Self { grid: grid.clone(), coeffs: c / creal(norm) })
    }

    /// Single basis function `j`.
    pub fn basis(grid: &ModeGrid<T>, j: usize) -> Self {
        let mut c = CVector::from_element(grid.dim(), creal(T::zero()));
        c[j] = creal(T::one());
        Self { grid: grid.clone(), coeffs: c }
    }

    pub fn grid(&self) -> &ModeGrid<T> {
        &self.grid
    }

    pub fn coeffs(&self) -> &CVector<T> {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> CVector<T> {
        self.coeffs
    }

    pub fn with_coeffs(&self, coeffs: CVector<T>) -> Result<Self> {
        Self::new(self.grid.clone(), coeffs)
    }

    pub fn norm_sqr(&self) -> T {
        vec_norm_sqr(&self.coeffs)
    }

    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm_sqr().sqrt();
        if !(to_f64(n) > 1e-300) {
            return Err(Error::ImpossibleHistory { norm: to_f64(n) });
        }
        Ok(Self { grid: self.grid.clone(), coeffs: &self.coeffs / creal(n) })
    }

    pub fn scale(&self, a: C<T>) -> Self {
        Self { grid: self.grid.clone(), coeffs: &self.coeffs * a }
    }

    /// Weight in the positive-energy modes.
    pub fn positive_weight(&self) -> T {
        let m = self.grid.modes();
        self.coeffs.iter().take(m).fold(T::zero(), |a, z| a + norm_sqr(*z))
    }

    /// Group velocity averaged over the mode weights, `±k/E` per branch.
    pub fn mean_velocity(&self) -> T {
        let m = self.grid.modes();
        let mut num = T::zero();
        for j in 0..m {
            let v = self.grid.k[j] / self.grid.energy[j];
            num += v * (norm_sqr(self.coeffs[j]) - norm_sqr(self.coeffs[m + j]));
        }
        let total = self.norm_sqr();
        if total > T::zero() {
            num / total
        } else {
            T::zero()
        }
    }

    pub fn value_at(&self, p: SpacetimePoint<T>) -> Spinor<T> {
        let mut out = [creal(T::zero()); 2];
        for j in 0..self.grid.dim() {
            let c = self.coeffs[j];
            if c == creal(T::zero()) {
                continue;
            }
            let e = self.grid.mode_value(j, p.t, p.x);
            out[0] += c * e[0];
            out[1] += c * e[1];
        }
        out
    }
}

/// Spacelike curve given as a graph `t = T(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Surface<T> {
    /// Straight slice through `anchor` with slope `tanh η`; `η = 0` is a
    /// constant-time slice.
    Flat { anchor: SpacetimePoint<T>, eta: T },
    /// `{y ∈ F(base) : |y - base| = s}`.
    Hyperboloid { base: SpacetimePoint<T>, s: T },
}

impl<T: Real> Surface<T> {
    pub fn time_slice(t: T) -> Self {
        Surface::Flat { anchor: SpacetimePoint::new(t, T::zero()), eta: T::zero() }
    }

    /// Hyperboloid around `base` through `x`, if `x ∈ F(base)`.
    pub fn through(base: SpacetimePoint<T>, x: SpacetimePoint<T>) -> Option<Self> {
        base.proper_time_to(&x).map(|s| Surface::Hyperboloid { base, s })
    }

    /// Point of the surface used to anchor searches.
    pub fn anchor(&self) -> SpacetimePoint<T> {
        match *self {
            Surface::Flat { anchor, .. } => anchor,
            Surface::Hyperboloid { base, s } => SpacetimePoint::new(base.t + s, base.x),
        }
    }

    pub fn time_at(&self, x: T) -> T {
        match *self {
            Surface::Flat { anchor, eta } => anchor.t + (x - anchor.x) * eta.tanh(),
            Surface::Hyperboloid { base, s } => {
                let d = x - base.x;
                base.t + (s * s + d * d).sqrt()
            }
        }
    }

    /// `dT/dx`, always in `(-1, 1)`.
    pub fn slope(&self, x: T) -> T {
        match *self {
            Surface::Flat { eta, .. } => eta.tanh(),
            Surface::Hyperboloid { base, s } => {
                let d = x - base.x;
                d / (s * s + d * d).sqrt()
            }
        }
    }

    /// Arc-length coordinate along the surface (`s·χ` on a hyperboloid).
    pub fn arc(&self, x: T) -> T {
        match *self {
            Surface::Flat { anchor, eta } => (x - anchor.x) / eta.cosh(),
            Surface::Hyperboloid { base, s } => s * ((x - base.x) / s).asinh(),
        }
    }

    /// Inverse of [`Surface::arc`].
    pub fn x_at_arc(&self, u: T) -> T {
        match *self {
            Surface::Flat { anchor, eta } => anchor.x + u * eta.cosh(),
            Surface::Hyperboloid { base, s } => base.x + s * (u / s).sinh(),
        }
    }

    pub fn point_at(&self, x: T) -> SpacetimePoint<T> {
        SpacetimePoint::new(self.time_at(x), x)
    }

    /// Signed time offset of `p` above the surface.
    pub fn offset(&self, p: &SpacetimePoint<T>) -> T {
        p.t - self.time_at(p.x)
    }

    /// `p` lies strictly below the curve, outside `F(Σ)`.
    pub fn is_below(&self, p: &SpacetimePoint<T>) -> bool {
        self.offset(p) < T::zero()
    }

    fn check_on(&self, p: &SpacetimePoint<T>) -> Result<()> {
        let off = self.offset(p).abs();
        let scale = T::one() + p.t.abs() + p.x.abs();
        if to_f64(off / scale) > 1e-9 {
            return Err(Error::NotOnSurface { offset: to_f64(off) });
        }
        Ok(())
    }

    /// Distance between two points measured inside the surface.
    pub fn distance(&self, a: &SpacetimePoint<T>, b: &SpacetimePoint<T>) -> Result<T> {
        self.check_on(a)?;
        self.check_on(b)?;
        Ok((self.arc(a.x) - self.arc(b.x)).abs())
    }

    /// The image of the curve under an active boost.
    pub fn boost(&self, eta: T) -> Self {
        match *self {
            Surface::Flat { anchor, eta: e } => Surface::Flat { anchor: anchor.boost(eta), eta: e + eta },
            Surface::Hyperboloid { base, s } => Surface::Hyperboloid { base: base.boost(eta), s },
        }
    }
}

/// Uniform sampling `x_p = a + (p + ½)h` of a surface window.
#[derive(Debug, Clone)]
pub struct SurfaceGrid<T> {
    pub surface: Surface<T>,
    pub points: Vec<SpacetimePoint<T>>,
    pub slopes: Vec<T>,
    pub arcs: Vec<T>,
    pub dx: T,
}

impl<T: Real> SurfaceGrid<T> {
    pub fn new(surface: Surface<T>, center: T, half_width: T, dx: T) -> Result<Self> {
        if !(half_width > T::zero()) || !(dx > T::zero()) {
            return Err(Error::InvalidParameter { name: "window", reason: "half width and spacing must be positive".into() });
        }
        let n = (to_f64(lit::<T>(2.0) * half_width / dx).ceil() as usize).max(2);
        let h = lit::<T>(2.0) * half_width / lit(n as f64);
        let a = center - half_width;
        let mut points = Vec::with_capacity(n);
        let mut slopes = Vec::with_capacity(n);
        let mut arcs = Vec::with_capacity(n);
        for p in 0..n {
            let x = a + (lit::<T>(p as f64) + lit(0.5)) * h;
            let pt = surface.point_at(x);
            if !pt.is_finite() {
                return Err(Error::NonFinite("surface sample"));
            }
            points.push(pt);
            slopes.push(surface.slope(x));
            arcs.push(surface.arc(x));
        }
        Ok(Self { surface, points, slopes, arcs, dx: h })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bounds(&self) -> (T, T) {
        let half = self.dx * lit(0.5);
        (self.points[0].x - half, self.points[self.len() - 1].x + half)
    }

    /// `φ† (1 - T'σx) ψ Δx` at sample `p`.
    pub fn flux_product(&self, p: usize, a: &Spinor<T>, b: &Spinor<T>) -> C<T> {
        let sl = creal(self.slopes[p]);
        let direct = a[0].conj() * b[0] + a[1].conj() * b[1];
        let cross = a[0].conj() * b[1] + a[1].conj() * b[0];
        (direct - sl * cross) * creal(self.dx)
    }
}

/// Spinor values of a global solution on a surface window.
#[derive(Debug, Clone)]
pub struct SurfaceState<T> {
    pub grid: SurfaceGrid<T>,
    pub values: Vec<Spinor<T>>,
}

impl<T: Real> SurfaceState<T> {
    pub fn inner(&self, other: &Self) -> Result<C<T>> {
        if self.values.len() != other.values.len() {
            return Err(Error::DimensionMismatch { expected: self.values.len(), found: other.values.len() });
        }
        Ok((0..self.values.len()).fold(creal(T::zero()), |acc, p| acc + self.grid.flux_product(p, &self.values[p], &other.values[p])))
    }

    /// Flux weight `ψ†(1 - T'σx)ψ Δx` per sample; nonnegative.
    pub fn flux_weights(&self) -> Vec<T> {
        (0..self.values.len()).map(|p| self.grid.flux_product(p, &self.values[p], &self.values[p]).re).collect()
    }

    pub fn norm_sqr(&self) -> T {
        self.flux_weights().into_iter().fold(T::zero(), |a, b| a + b)
    }

    /// Pointwise multiplication by real weights.
    pub fn multiply(&self, w: &[T]) -> Self {
        let values = self.values.iter().zip(w).map(|(v, w)| [v[0] * creal(*w), v[1] * creal(*w)]).collect();
        Self { grid: self.grid.clone(), values }
    }
}

/// `U^Σ_{Σ₀}`: evaluates the global solution at the window samples.
pub fn restrict_to_surface<T: Real>(psi: &DiracState<T>, grid: &SurfaceGrid<T>) -> SurfaceState<T> {
    let values = psi.grid.evaluate(&grid.points, &psi.coeffs);
    SurfaceState { grid: grid.clone(), values }
}

/// Surface data back to a global solution: `c_j = ⟨e_j, φ⟩_Σ`, exact on
/// constant-time windows of one box length and accurate to the tails for
/// data localised inside the window. Returns the state and the relative
/// flux not represented by the modes, `1 - ‖c‖²/‖φ‖²_Σ`.
pub fn analyze<T: Real>(phi: &SurfaceState<T>, modes: &ModeGrid<T>) -> (DiracState<T>, T) {
    let g = &phi.grid;
    let h = creal(g.dx);
    let weighted: Vec<Spinor<T>> = (0..g.len())
        .map(|p| {
            let sl = creal(g.slopes[p]);
            let [a, b] = phi.values[p];
            [(a - sl * b) * h, (b - sl * a) * h]
        })
        .collect();
    let c = modes.project(&g.points, &weighted);
    let total = phi.norm_sqr();
    let state = DiracState { grid: modes.clone(), coeffs: c };
    let residual = if total > T::zero() { (total - state.norm_sqr()) / total } else { T::zero() };
    (state, residual)
}

/// Window placement and resolution on a surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec<T> {
    pub half_width: T,
    pub dx: T,
}

/// Where the packet crosses `surface`: the mean position on a constant-time
/// slice (circular mean over one box), moved along the mean group velocity
/// until it meets the curve. For a hyperboloid the slice goes through its
/// base, so a packet that travels further than half a box before reaching
/// the hyperboloid is followed rather than wrapped.
pub fn locate_on_surface<T: Real>(psi: &DiracState<T>, surface: &Surface<T>) -> T {
    let anchor = match *surface {
        Surface::Hyperboloid { base, .. } => base,
        Surface::Flat { anchor, .. } => anchor,
    };
    let l = psi.grid.length();
    let n = psi.grid.modes().max(16);
    let slice = SurfaceGrid::new(Surface::time_slice(anchor.t), anchor.x, l * lit(0.5), l / lit(n as f64)).expect("valid slice");
    let rho = restrict_to_surface(psi, &slice).flux_weights();
    let mut acc = creal(T::zero());
    for (p, w) in rho.iter().enumerate() {
        acc += cis(T::two_pi() * (slice.points[p].x - anchor.x) / l) * *w;
    }
    let mean = if norm_sqr(acc) > T::zero() { anchor.x + acc.im.atan2(acc.re) * l / T::two_pi() } else { anchor.x };
    let v = psi.mean_velocity();
    // g(x) = x - mean - v (T(x) - t_a) is increasing since |v|, |T'| < 1
    let g = |x: T| x - mean - v * (surface.time_at(x) - anchor.t);
    let mut step = l;
    let (mut lo, mut hi) = (mean - step, mean + step);
    while g(lo) > T::zero() {
        step *= lit(2.0);
        lo = mean - step;
    }
    while g(hi) < T::zero() {
        step *= lit(2.0);
        hi = mean + step;
    }
    for _ in 0..200 {
        let mid = (lo + hi) * lit(0.5);
        if g(mid) > T::zero() {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    (lo + hi) * lit(0.5)
}

/// Samples of `surface` around the packet crossing.
pub fn window_for<T: Real>(psi: &DiracState<T>, surface: &Surface<T>, spec: &WindowSpec<T>) -> Result<SurfaceGrid<T>> {
    if spec.half_width * lit(2.0) > psi.grid.length() {
        return Err(Error::InvalidParameter { name: "half_width", reason: "surface window longer than the periodic box".into() });
    }
    SurfaceGrid::new(*surface, locate_on_surface(psi, surface), spec.half_width, spec.dx)
}

/// One window covering the crossings of every state in `states`, each with
/// `spec.half_width` on both sides.
pub fn window_covering<T: Real>(states: &[&DiracState<T>], surface: &Surface<T>, spec: &WindowSpec<T>) -> Result<SurfaceGrid<T>> {
    let Some(first) = states.first() else {
        return Err(Error::InvalidParameter { name: "states", reason: "need at least one state to place a window".into() });
    };
    let centers: Vec<T> = states.iter().map(|s| locate_on_surface(s, surface)).collect();
    let lo = centers.iter().fold(centers[0], |a, b| a.min(*b)) - spec.half_width;
    let hi = centers.iter().fold(centers[0], |a, b| a.max(*b)) + spec.half_width;
    if hi - lo > first.grid.length() {
        return Err(Error::InvalidParameter { name: "half_width", reason: "surface window longer than the periodic box".into() });
    }
    SurfaceGrid::new(*surface, (lo + hi) * lit(0.5), (hi - lo) * lit(0.5), spec.dx)
}

/// Normalisation `𝒩 = (2πσ²)^{-1/2}` of the surface Gaussian.
pub fn gaussian_norm<T: Real>(sigma: T) -> T {
    T::one() / (T::two_pi() * sigma * sigma).sqrt()
}

/// Weights of `Λ_Σ(x)` at the window samples:
/// `(𝒩/τ) exp(-dist²(x, y)/2σ²)`.
pub fn surface_gaussian<T: Real>(grid: &SurfaceGrid<T>, x: &SpacetimePoint<T>, sigma: T, tau: T) -> Result<Vec<T>> {
    grid.surface.check_on(x)?;
    Ok(gaussian_weights(grid, grid.surface.arc(x.x), sigma, tau))
}

fn gaussian_weights<T: Real>(grid: &SurfaceGrid<T>, u: T, sigma: T, tau: T) -> Vec<T> {
    let peak = gaussian_norm(sigma) / tau;
    let two_s2 = lit::<T>(2.0) * sigma * sigma;
    grid.arcs.iter().map(|a| peak * (-(*a - u) * (*a - u) / two_s2).exp()).collect()
}

/// `∫_Σ Λ_Σ(x)(y) dℓ(x)` at the surface point `y` by composite
/// Gauss–Legendre over arc length `[u_y - reach, u_y + reach]`; the caller
/// compares it with `1/τ`. Fails when the truncated Gaussian tail exceeds
/// `1e-6`.
pub fn gaussian_mass<T: Real>(surface: &Surface<T>, y: &SpacetimePoint<T>, sigma: T, tau: T, reach: T) -> Result<T> {
    surface.check_on(y)?;
    let tail = statrs::function::erf::erfc(to_f64(reach / sigma) / 2f64.sqrt());
    if tail > 1e-6 {
        return Err(Error::TailTooHeavy { tail });
    }
    let u = surface.arc(y.x);
    let rule = crate::quadrature::GaussLegendre::new(16);
    let peak = gaussian_norm(sigma) / tau;
    let two_s2 = lit::<T>(2.0) * sigma * sigma;
    // integrate in the chart coordinate x so the line element enters explicitly
    let (a, b) = (surface.x_at_arc(u - reach), surface.x_at_arc(u + reach));
    Ok(rule.integrate(a, b, 64, |x| {
        let sl = surface.slope(x);
        let d = surface.arc(x) - u;
        peak * (-d * d / two_s2).exp() * (T::one() - sl * sl).sqrt()
    }))
}

/// Parameters of the relativistic collapse: width `σ` in surface distance,
/// mean proper waiting time `τ`, the surface window, and the largest
/// relative re-synthesis loss accepted per collapse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseSpec<T> {
    pub sigma: T,
    pub tau: T,
    pub window: WindowSpec<T>,
    pub residual_tol: T,
}

impl<T: Real> CollapseSpec<T> {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma", self.sigma), ("tau", self.tau), ("half_width", self.window.half_width), ("dx", self.window.dx)] {
            if !(v > T::zero()) || !to_f64(v).is_finite() {
                return Err(Error::InvalidParameter { name, reason: "must be positive and finite".into() });
            }
        }
        Ok(())
    }
}

/// Result of one collapse: the unnormalised post-flash state and the flux
/// lost in re-synthesis, relative to `‖ψ‖²` so that negligible branches of
/// a superposition do not count as failures.
#[derive(Debug, Clone)]
pub struct Collapsed<T: Real> {
    pub state: DiracState<T>,
    pub residual: T,
}

/// `K_{x'}(x) ψ = e^{-s/2τ} U^{Σ₀}_Σ Λ_Σ(x)^{1/2} U^Σ_{Σ₀} ψ` on the
/// hyperboloid `Σ = Σ(x', x)`; the zero state when `x ∉ F(x')`.
pub fn collapse_operator<T: Real>(
    prev: &SpacetimePoint<T>,
    x: &SpacetimePoint<T>,
    spec: &CollapseSpec<T>,
    psi: &DiracState<T>,
) -> Result<Collapsed<T>> {
    spec.validate()?;
    let Some(surface) = Surface::through(*prev, *x) else {
        return Ok(Collapsed { state: DiracState::zero(psi.grid.clone()), residual: T::zero() });
    };
    let Surface::Hyperboloid { s, .. } = surface else { unreachable!() };
    // where Λ^{1/2} exceeds e^{-25} of its peak. The window then depends on
    // the flash alone and K is linear; only when that stretch outgrows the
    // periodic box is it cut down to the packet window.
    let u = surface.arc(x.x);
    let reach = lit::<T>(10.0) * spec.sigma;
    let (mut lo, mut hi) = (surface.x_at_arc(u - reach), surface.x_at_arc(u + reach));
    if hi - lo > psi.grid.length() {
        let (a, b) = window_for(psi, &surface, &spec.window)?.bounds();
        (lo, hi) = (lo.max(a), hi.min(b));
    }
    if !(hi > lo) {
        return Ok(Collapsed { state: DiracState::zero(psi.grid.clone()), residual: T::zero() });
    }
    let grid = SurfaceGrid::new(surface, (lo + hi) * lit(0.5), (hi - lo) * lit(0.5), spec.window.dx)?;
    let phi = restrict_to_surface(psi, &grid);
    let damp = (-s / (lit::<T>(2.0) * spec.tau)).exp();
    let w: Vec<T> = gaussian_weights(&grid, u, spec.sigma, spec.tau).into_iter().map(|g| g.sqrt() * damp).collect();
    let weighted = phi.multiply(&w);
    let (state, _) = analyze(&weighted, &psi.grid);
    let input = psi.norm_sqr();
    let residual = if input > T::zero() { (weighted.norm_sqr() - state.norm_sqr()) / input } else { T::zero() };
    if residual.abs() > spec.residual_tol {
        return Err(Error::ResynthesisResidual { residual: to_f64(residual), tolerance: to_f64(spec.residual_tol) });
    }
    Ok(Collapsed { state, residual })
}

/// Flux weights of `ψ` on the hyperboloid of radius `s` around `prev`.
pub fn hyperboloid_flux<T: Real>(prev: &SpacetimePoint<T>, s: T, psi: &DiracState<T>, window: &WindowSpec<T>) -> Result<(SurfaceGrid<T>, Vec<T>)> {
    if !(s > T::zero()) {
        return Err(Error::InvalidParameter { name: "s", reason: "proper time must be positive".into() });
    }
    let surface = Surface::Hyperboloid { base: *prev, s };
    let grid = window_for(psi, &surface, window)?;
    let rho = restrict_to_surface(psi, &grid).flux_weights();
    Ok((grid, rho))
}

/// `Σ_p Λ_Σ(x)(y_p) ρ_p` for a flash at arc coordinate `u`.
pub fn smeared_flux<T: Real>(grid: &SurfaceGrid<T>, rho: &[T], u: T, sigma: T, tau: T) -> T {
    gaussian_weights(grid, u, sigma, tau).iter().zip(rho).fold(T::zero(), |a, (g, r)| a + *g * *r)
}

/// `‖K_{x'}(x)ψ‖² = e^{-s/τ} ⟨ψ, Λ_Σ(x) ψ⟩_Σ`, evaluated on the surface
/// without re-synthesis.
pub fn flash_density<T: Real>(prev: &SpacetimePoint<T>, x: &SpacetimePoint<T>, spec: &CollapseSpec<T>, psi: &DiracState<T>) -> Result<T> {
    spec.validate()?;
    let Some(s) = prev.proper_time_to(x) else { return Ok(T::zero()) };
    let (grid, rho) = hyperboloid_flux(prev, s, psi, &spec.window)?;
    Ok((-s / spec.tau).exp() * smeared_flux(&grid, &rho, grid.surface.arc(x.x), spec.sigma, spec.tau))
}

/// Mesh for [`povm_integral`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PovmMesh<T> {
    /// Proper-time cutoff in units of `τ`.
    pub s_max_over_tau: T,
    pub s_panels: usize,
    pub order: usize,
    /// Spacing of the flash-position grid in arc length, units of `σ`.
    pub arc_step_over_sigma: T,
}

impl<T: Real> PovmMesh<T> {
    pub fn refined(&self) -> Self {
        Self { s_panels: 2 * self.s_panels, arc_step_over_sigma: self.arc_step_over_sigma * lit(0.5), ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PovmReport {
    /// `∫ d²x ‖K_{x'}(x)ψ‖²` over `0 < s < s_max`.
    pub total: f64,
    /// `e^{-s_max/τ}`, the analytic weight beyond the cutoff.
    pub tail: f64,
    /// Smallest flux of `ψ` captured on a hyperboloid window.
    pub min_captured_flux: f64,
    /// `‖ψ‖² - flux through the light cone of x'` inside the window.
    pub cone_leakage: f64,
}

/// `∫_{F(x')} d²x ‖K_{x'}(x)ψ‖²` with `d²x = ds dℓ(x)`: Gauss–Legendre in
/// `s`, and for each `s` a trapezoid sum over flash positions in arc length
/// of the smeared surface density.
pub fn povm_integral<T: Real>(prev: &SpacetimePoint<T>, psi: &DiracState<T>, spec: &CollapseSpec<T>, mesh: &PovmMesh<T>) -> Result<PovmReport> {
    spec.validate()?;
    let (sigma, tau) = (spec.sigma, spec.tau);
    let rule = crate::quadrature::GaussLegendre::new(mesh.order);
    let s_max = mesh.s_max_over_tau * tau;
    let mut total = T::zero();
    let mut min_flux = T::max_value().unwrap();
    let reach = lit::<T>(8.0) * sigma;
    let h = mesh.arc_step_over_sigma * sigma;
    for (s, ws) in rule.composite(T::zero(), s_max, mesh.s_panels) {
        let (grid, rho) = hyperboloid_flux(prev, s, psi, &spec.window)?;
        min_flux = min_flux.min(rho.iter().fold(T::zero(), |a, b| a + *b));
        let (lo, hi) = (grid.arcs[0] - reach, grid.arcs[grid.len() - 1] + reach);
        let n = to_f64((hi - lo) / h).ceil() as usize;
        let du = (hi - lo) / lit(n as f64);
        let mut inner = T::zero();
        for i in 0..=n {
            let u = lo + du * lit(i as f64);
            let wt = if i == 0 || i == n { du * lit(0.5) } else { du };
            inner += wt * smeared_flux(&grid, &rho, u, sigma, tau);
        }
        total += ws * (-s / tau).exp() * inner;
    }
    let leak = psi.norm_sqr() - cone_flux(prev, psi, &spec.window)?;
    Ok(PovmReport {
        total: to_f64(total),
        tail: (-to_f64(mesh.s_max_over_tau)).exp(),
        min_captured_flux: to_f64(min_flux),
        cone_leakage: to_f64(leak),
    })
}

/// Flux of `ψ` into `F(x')` through the light cone `t = t' + |x - x'|`,
/// summed over the window around the packet.
pub fn cone_flux<T: Real>(prev: &SpacetimePoint<T>, psi: &DiracState<T>, window: &WindowSpec<T>) -> Result<T> {
    // the cone is the s → 0 limit of the hyperboloids; place the window
    // where a small hyperboloid meets the packet
    let probe = Surface::Hyperboloid { base: *prev, s: window.dx * lit(1e-3) };
    let center = locate_on_surface(psi, &probe);
    let n = (to_f64(lit::<T>(2.0) * window.half_width / window.dx).ceil() as usize).max(2);
    let h = lit::<T>(2.0) * window.half_width / lit(n as f64);
    let a = center - window.half_width;
    let points: Vec<SpacetimePoint<T>> =
        (0..n).map(|p| a + (lit::<T>(p as f64) + lit(0.5)) * h).map(|x| SpacetimePoint::new(prev.t + (x - prev.x).abs(), x)).collect();
    let s = psi.grid.synthesis_matrix(&points);
    let v = s * &psi.coeffs;
    let mut flux = T::zero();
    for (p, pt) in points.iter().enumerate() {
        let sl = if pt.x >= prev.x { T::one() } else { -T::one() };
        let (a, b) = (v[2 * p], v[2 * p + 1]);
        flux += (norm_sqr(a) + norm_sqr(b) - lit::<T>(2.0) * sl * (a.conj() * b).re) * h;
    }
    Ok(flux)
}

/// Quadrature for the proper-time integral inside [`survival_operator`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalMesh {
    pub order: usize,
    pub panels: usize,
}

/// `W_{x'}(Σ)` on coefficient space through its square
/// `W² = 1 - ∫_{F(x')∖F(Σ)} d²x K†K`, kept in eigen-decomposed form.
#[derive(Debug, Clone)]
pub struct SurvivalOperator<T: Real> {
    values: nalgebra::DVector<T>,
    vectors: CMatrix<T>,
    /// Most negative eigenvalue of `W²` clamped to zero.
    pub clamped: T,
}

impl<T: Real> SurvivalOperator<T> {
    pub fn identity(dim: usize) -> Self {
        Self { values: nalgebra::DVector::from_element(dim, T::one()), vectors: CMatrix::identity(dim, dim), clamped: T::zero() }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn eigenvalues_sq(&self) -> &nalgebra::DVector<T> {
        &self.values
    }

    pub fn squared(&self) -> CMatrix<T> {
        crate::hilbert::spectral_map(&self.values, &self.vectors, creal)
    }

    pub fn matrix(&self) -> CMatrix<T> {
        crate::hilbert::spectral_map(&self.values, &self.vectors, |v| creal(v.sqrt()))
    }

    /// Spectral pseudo-inverse of `W` with the cutoff relative to `‖W‖`;
    /// returns the number of dropped directions alongside.
    pub fn pseudo_inverse(&self, relative_cutoff: T) -> (CMatrix<T>, usize) {
        let w: nalgebra::DVector<T> = self.values.map(|v| v.sqrt());
        let top = w.iter().fold(T::zero(), |a, b| a.max(*b));
        let cut = relative_cutoff * top;
        let dropped = w.iter().filter(|v| **v <= cut).count();
        let inv = crate::hilbert::spectral_map(&w, &self.vectors, |v| if v > cut { creal(T::one() / v) } else { creal(T::zero()) });
        (inv, dropped)
    }

    /// Pseudo-inverse that refuses to drop any direction.
    pub fn inverse(&self, relative_cutoff: T) -> Result<CMatrix<T>> {
        let (inv, dropped) = self.pseudo_inverse(relative_cutoff);
        if dropped > 0 {
            return Err(Error::IllConditioned { dropped });
        }
        Ok(inv)
    }

    pub fn apply(&self, psi: &DiracState<T>) -> Result<DiracState<T>> {
        if psi.grid.dim() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: psi.grid.dim() });
        }
        psi.with_coeffs(self.matrix() * &psi.coeffs)
    }
}

/// `Σ_p f_p S_p† (1 - T'_p σx) S_p` for the 2-row blocks `S_p` of a
/// synthesis matrix, as four real products.
pub fn flux_gram<T: Real>(syn: &CMatrix<T>, slopes: &[T], f: &[T]) -> CMatrix<T> {
    let (rows, n) = syn.shape();
    let a = DMatrix::from_fn(rows, n, |i, j| syn[(i, j)].re);
    let b = DMatrix::from_fn(rows, n, |i, j| syn[(i, j)].im);
    let weigh = |m: &DMatrix<T>| {
        let mut out = m.clone();
        for (p, (sl, w)) in slopes.iter().zip(f).enumerate() {
            for j in 0..n {
                let (u, v) = (m[(2 * p, j)], m[(2 * p + 1, j)]);
                out[(2 * p, j)] = (u - *sl * v) * *w;
                out[(2 * p + 1, j)] = (v - *sl * u) * *w;
            }
        }
        out
    };
    let (da, db) = (weigh(&a), weigh(&b));
    let re = a.tr_mul(&da) + b.tr_mul(&db);
    let im = a.tr_mul(&db) - b.tr_mul(&da);
    DMatrix::from_fn(n, n, |i, j| crate::scalar::cplx(re[(i, j)], im[(i, j)]))
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / 2f64.sqrt())
}

/// Builds `W_{x'}(Σ)` for a flat slice, or for a hyperboloid centred at
/// `x'`. For radius `s` the flash positions below a flat `Σ` fill the arc
/// interval `s(η ± χ_c)` with `cosh χ_c = Δ cosh η / s`, `Δ` the height of
/// `Σ` above `x'`, so the integrated Gaussian weight at `y` is
/// `(1/τ)[Φ((u₊ - u_y)/σ) - Φ((u₋ - u_y)/σ)]`. Hyperboloid windows cover
/// the crossings of the `locators`, the states the operator is meant for;
/// outside their span it is only approximately `W`.
pub fn survival_operator<T: Real>(
    prev: &SpacetimePoint<T>,
    sigma_surface: &Surface<T>,
    locators: &[&DiracState<T>],
    spec: &CollapseSpec<T>,
    mesh: &SurvivalMesh,
) -> Result<SurvivalOperator<T>> {
    spec.validate()?;
    let Some(psi) = locators.first() else {
        return Err(Error::InvalidParameter { name: "locators", reason: "need at least one state".into() });
    };
    if let Some(bad) = locators.iter().find(|l| l.grid.dim() != psi.grid.dim()) {
        return Err(Error::DimensionMismatch { expected: psi.grid.dim(), found: bad.grid.dim() });
    }
    let n = psi.grid.dim();
    let rule = crate::quadrature::GaussLegendre::new(mesh.order);
    let (sigma, tau) = (spec.sigma, spec.tau);
    let mut q = CMatrix::from_element(n, n, creal(T::zero()));
    let mut accumulate = |s: T, weight: T, mweights: &dyn Fn(&SurfaceGrid<T>) -> Vec<T>| -> Result<()> {
        let surface = Surface::Hyperboloid { base: *prev, s };
        let grid = window_covering(locators, &surface, &spec.window)?;
        let m = mweights(&grid);
        let top = m.iter().fold(T::zero(), |a, b| a.max(*b));
        let scale = weight * (-s / tau).exp() * grid.dx;
        // only samples that carry weight enter
        let keep: Vec<usize> = (0..grid.len()).filter(|p| m[*p] > top * lit(1e-17)).collect();
        if keep.is_empty() {
            return Ok(());
        }
        let points: Vec<SpacetimePoint<T>> = keep.iter().map(|p| grid.points[*p]).collect();
        let slopes: Vec<T> = keep.iter().map(|p| grid.slopes[*p]).collect();
        let f: Vec<T> = keep.iter().map(|p| m[*p] * scale).collect();
        q += flux_gram(&psi.grid.synthesis_matrix(&points), &slopes, &f);
        Ok(())
    };
    match *sigma_surface {
        Surface::Hyperboloid { base, s: s0 } => {
            if (to_f64(base.t - prev.t).abs() + to_f64(base.x - prev.x).abs()) > 1e-12 {
                return Err(Error::Unsupported("hyperboloid surfaces must be centred at the last flash".into()));
            }
            let flat = |g: &SurfaceGrid<T>| vec![T::one() / tau; g.len()];
            for (s, w) in rule.composite(T::zero(), s0, mesh.panels) {
                accumulate(s, w, &flat)?;
            }
        }
        Surface::Flat { eta, .. } => {
            let delta = sigma_surface.offset(prev) * -T::one();
            if delta > T::zero() {
                let s_c = delta * eta.cosh();
                // s = s_c (1 - w²) removes the square-root edge at s_c; near
                // s = 0 the arc range below Σ shrinks like s ln s, hence the
                // grading towards w = 1
                for (wv, ww) in rule.graded(T::zero(), T::one(), mesh.panels, lit(0.3)) {
                    let s = s_c * (T::one() - wv * wv);
                    if !(s > T::zero()) {
                        continue;
                    }
                    let chi_c = (s_c / s).max(T::one()).acosh();
                    let (up, um) = (s * (eta + chi_c), s * (eta - chi_c));
                    let weights = move |g: &SurfaceGrid<T>| -> Vec<T> {
                        g.arcs
                            .iter()
                            .map(|u| {
                                let a = to_f64((up - *u) / sigma);
                                let b = to_f64((um - *u) / sigma);
                                lit::<T>(normal_cdf(a) - normal_cdf(b)) / tau
                            })
                            .collect()
                    };
                    accumulate(s, ww * lit::<T>(2.0) * s_c * wv, &weights)?;
                }
            }
        }
    }
    let w2 = CMatrix::identity(n, n) - q;
    let (values, vectors) = crate::hilbert::eigh(&w2);
    let min = values.iter().fold(T::max_value().unwrap(), |a, b| a.min(*b));
    let tol = lit::<T>(1e-6);
    if min < -tol {
        return Err(Error::NotPositive { min_eigenvalue: to_f64(min), tolerance: to_f64(tol) });
    }
    let clamped = if min < T::zero() { -min } else { T::zero() };
    Ok(SurvivalOperator { values: values.map(|v| v.max(T::zero())), vectors, clamped })
}

/// `G_ab = ⟨a|W²|b⟩` for a few states, through the complement of `Q`:
/// `W² = e^{-s_c/τ} + ∫_0^{s_c} ds e^{-s/τ}/τ · (flux through the part of the
/// hyperboloid above Σ, Gaussian-smeared)`. Every term is positive, so
/// survivals far below the rounding level of `1 - Q` keep their relative
/// accuracy. Relies on the per-hyperboloid flux identity, i.e. on states
/// inside `F(x')`; each state is evaluated on its own window and pairs on
/// the union of windows.
pub fn survival_gram<T: Real>(
    prev: &SpacetimePoint<T>,
    sigma_surface: &Surface<T>,
    states: &[&DiracState<T>],
    spec: &CollapseSpec<T>,
    mesh: &SurvivalMesh,
) -> Result<CMatrix<T>> {
    spec.validate()?;
    let k = states.len();
    let mut g = CMatrix::from_fn(k, k, |a, b| overlap_coeffs(states[a], states[b]));
    match *sigma_surface {
        Surface::Hyperboloid { base, s: s0 } => {
            if (to_f64(base.t - prev.t).abs() + to_f64(base.x - prev.x).abs()) > 1e-12 {
                return Err(Error::Unsupported("hyperboloid surfaces must be centred at the last flash".into()));
            }
            Ok(g * creal((-s0 / spec.tau).exp()))
        }
        Surface::Flat { eta, .. } => {
            let delta = -sigma_surface.offset(prev);
            if !(delta > T::zero()) {
                return Ok(g);
            }
            let (sigma, tau) = (spec.sigma, spec.tau);
            let s_c = delta * eta.cosh();
            g *= creal((-s_c / tau).exp());
            let rule = crate::quadrature::GaussLegendre::new(mesh.order);
            for (wv, ww) in rule.graded(T::zero(), T::one(), mesh.panels, lit(0.3)) {
                let s = s_c * (T::one() - wv * wv);
                if !(s > T::zero()) {
                    continue;
                }
                let chi_c = (s_c / s).max(T::one()).acosh();
                let (up, um) = (s * (eta + chi_c), s * (eta - chi_c));
                let scale = ww * lit::<T>(2.0) * s_c * wv * (-s / tau).exp() / tau;
                let surface = Surface::Hyperboloid { base: *prev, s };
                for grid in union_windows(states, &surface, &spec.window)? {
                    let values: Vec<SurfaceState<T>> = states.iter().map(|st| restrict_to_surface(st, &grid)).collect();
                    for p in 0..grid.len() {
                        let u = grid.arcs[p];
                        // Gaussian mass beyond either crossing
                        let above = normal_cdf(to_f64((u - up) / sigma)) + normal_cdf(to_f64((um - u) / sigma));
                        let w = scale * lit(above);
                        for a in 0..k {
                            for b in a..k {
                                let f = grid.flux_product(p, &values[a].values[p], &values[b].values[p]) * creal(w);
                                g[(a, b)] += f;
                                if b != a {
                                    g[(b, a)] += f.conj();
                                }
                            }
                        }
                    }
                }
            }
            Ok(g)
        }
    }
}

fn overlap_coeffs<T: Real>(a: &DiracState<T>, b: &DiracState<T>) -> C<T> {
    a.coeffs.iter().zip(b.coeffs.iter()).fold(creal(T::zero()), |acc, (x, y)| acc + x.conj() * *y)
}

/// Disjoint windows covering every state's crossing of `surface`.
fn union_windows<T: Real>(states: &[&DiracState<T>], surface: &Surface<T>, spec: &WindowSpec<T>) -> Result<Vec<SurfaceGrid<T>>> {
    let mut spans: Vec<(T, T)> = states
        .iter()
        .map(|st| {
            let c = locate_on_surface(st, surface);
            (c - spec.half_width, c + spec.half_width)
        })
        .collect();
    spans.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut merged: Vec<(T, T)> = Vec::new();
    for (lo, hi) in spans {
        match merged.last_mut() {
            Some(last) if lo <= last.1 => last.1 = last.1.max(hi),
            _ => merged.push((lo, hi)),
        }
    }
    merged.into_iter().map(|(lo, hi)| SurfaceGrid::new(*surface, (lo + hi) * lit(0.5), (hi - lo) * lit(0.5), spec.dx)).collect()
}

/// Active boost of a global solution: `ψ'(x) = S(η) ψ(Λ⁻¹x)` with
/// `S(η) = exp(η σx / 2)`, re-expanded on `target` from its values on the
/// constant-time slice `t' = 0` over one box around `center`. Returns the
/// relative flux not captured by `target`.
pub fn boost_state<T: Real>(psi: &DiracState<T>, eta: T, target: &ModeGrid<T>, center: T) -> Result<(DiracState<T>, T)> {
    let l = target.length();
    let slice = SurfaceGrid::new(Surface::time_slice(T::zero()), center, l * lit(0.5), l / lit((2 * target.modes()) as f64))?;
    let (c, s) = ((eta * lit(0.5)).cosh(), (eta * lit(0.5)).sinh());
    let pre: Vec<SpacetimePoint<T>> = slice.points.iter().map(|p| p.boost(-eta)).collect();
    let v = psi.grid.synthesis_matrix(&pre) * &psi.coeffs;
    let values = (0..slice.len())
        .map(|p| {
            let (a, b) = (v[2 * p], v[2 * p + 1]);
            [a * creal(c) + b * creal(s), b * creal(c) + a * creal(s)]
        })
        .collect();
    let (state, residual) = analyze(&SurfaceState { grid: slice, values }, target);
    Ok((state, residual))
}

/// [`boost_state`] onto [`ModeGrid::boosted`], centred where the packet
/// sits at `t' = 0`.
pub fn boost<T: Real>(psi: &DiracState<T>, eta: T) -> Result<(DiracState<T>, T)> {
    let target = psi.grid.boosted(eta);
    // the slice t' = 0 is the flat slice of slope -tanh η in the old frame
    let pre = Surface::Flat { anchor: SpacetimePoint::origin(), eta: -eta };
    let center = pre.point_at(locate_on_surface(psi, &pre)).boost(eta).x;
    boost_state(psi, eta, &target, center)
}
