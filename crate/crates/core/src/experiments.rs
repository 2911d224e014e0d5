//! Desk-scale experiments on the relativistic model, each returning a small
//! report that the acceptance tests and the `verify` subcommand judge.

use serde::{Deserialize, Serialize};

use crate::dirac::*;
use crate::error::{Error, Result};
use crate::relflash::*;
use crate::rng::trajectory_stream;
use crate::scalar::{lit, to_f64, Real, C};

/// A moving packet with the seed on its worldline: the first flash after
/// the seed sits at coordinate time `s cosh χ_v`, so first flashes drawn
/// independently are the waiting times of the renewal process seen from the
/// lab frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeDilationConfig {
    pub mass: f64,
    pub velocity: f64,
    pub width: f64,
    pub sigma: f64,
    pub tau: f64,
    pub flashes: usize,
    pub seed: u64,
    pub modes: usize,
    /// Momentum half-range around the packet's mean momentum.
    pub cutoff: f64,
    pub half_width: f64,
    pub dx: f64,
}

impl Default for TimeDilationConfig {
    fn default() -> Self {
        // width √(τ/2m) spreads least over a waiting time; the collapse
        // Gaussian stays well inside it
        Self {
            mass: 20.0,
            velocity: 0.6,
            width: 10f64.sqrt(),
            sigma: 1.0,
            tau: 400.0,
            flashes: 40_000,
            seed: 20_240_601,
            modes: 160,
            cutoff: 1.5,
            half_width: 150.0,
            dx: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeDilationReport {
    pub flashes: usize,
    /// Mean velocity of the prepared packet.
    pub packet_velocity: f64,
    /// `√(1 - v²)`.
    pub expected: f64,
    /// `τ ln 2 / median(Δt)`.
    pub rate_median: f64,
    /// `τ n / ΣΔt`; the rapidity spread `σ/s` at small `s` gives `Δt` a
    /// heavy tail, so this one converges slowly.
    pub rate_mean: f64,
    /// Standard error of `rate_median` for exponential waiting times.
    pub standard_error: f64,
    /// Draws repeated because the flash position overflowed.
    pub redraws: usize,
    pub max_leakage: f64,
}

pub fn time_dilation_state<T: Real>(cfg: &TimeDilationConfig) -> Result<DiracState<T>> {
    let gamma = 1.0 / (1.0 - cfg.velocity * cfg.velocity).sqrt();
    let k0 = cfg.mass * cfg.velocity * gamma;
    let grid = ModeGrid::new(lit(cfg.mass), lit(k0), lit(cfg.cutoff), cfg.modes)?;
    DiracState::gaussian_packet(&grid, T::zero(), lit(cfg.width), lit(k0))?.normalized()
}

pub fn time_dilation_model<T: Real>(cfg: &TimeDilationConfig) -> Result<RelFlashModel<T>> {
    let window = WindowSpec { half_width: lit(cfg.half_width), dx: lit(cfg.dx) };
    RelFlashModel::new(CollapseSpec { sigma: lit(cfg.sigma), tau: lit(cfg.tau), window, residual_tol: lit(1e-8) })
}

/// Draws `cfg.flashes` first flashes, each on its own counter-based stream.
pub fn time_dilation<T: Real>(cfg: &TimeDilationConfig) -> Result<TimeDilationReport> {
    time_dilation_with_flashes::<T>(cfg).map(|(r, _)| r)
}

/// As [`time_dilation`], also returning the flashes `(t, x)` in stream order.
pub fn time_dilation_with_flashes<T: Real>(cfg: &TimeDilationConfig) -> Result<(TimeDilationReport, Vec<(f64, f64)>)> {
    if !(cfg.velocity.abs() < 1.0) || cfg.flashes < 2 {
        return Err(Error::InvalidParameter { name: "velocity", reason: "need |v| < 1 and at least two flashes".into() });
    }
    let psi = time_dilation_state::<T>(cfg)?;
    let model = time_dilation_model::<T>(cfg)?;
    let seed = SpacetimePoint::origin();
    let mut dts = Vec::with_capacity(cfg.flashes);
    let mut points = Vec::with_capacity(cfg.flashes);
    let (mut redraws, mut max_leakage) = (0usize, 0f64);
    for k in 0..cfg.flashes {
        let mut rng = trajectory_stream(cfg.seed, k as u64);
        let flash = loop {
            match sample_first_flash(&psi, &seed, &model, &mut rng) {
                Err(Error::NonFinite(_)) => redraws += 1,
                other => break other?,
            }
        };
        max_leakage = max_leakage.max(flash.leakage);
        dts.push(to_f64(flash.point.t));
        points.push((to_f64(flash.point.t), to_f64(flash.point.x)));
    }
    let n = dts.len() as f64;
    let mean = dts.iter().sum::<f64>() / n;
    dts.sort_by(f64::total_cmp);
    let median = 0.5 * (dts[(dts.len() - 1) / 2] + dts[dts.len() / 2]);
    let rate_median = cfg.tau * std::f64::consts::LN_2 / median;
    let report = TimeDilationReport {
        flashes: dts.len(),
        packet_velocity: to_f64(psi.mean_velocity()),
        expected: (1.0 - cfg.velocity * cfg.velocity).sqrt(),
        rate_median,
        rate_mean: cfg.tau / mean,
        // median of Exp(λ) has asymptotic standard deviation 1/(λ√n)
        standard_error: rate_median / (std::f64::consts::LN_2 * n.sqrt()),
        redraws,
        max_leakage,
    };
    Ok((report, points))
}

/// A heavy, slow packet started at the seed, against the same packet under
/// the lattice GRW model with `H = -∇²/2m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NonrelLimitConfig {
    pub mass: f64,
    pub width: f64,
    pub velocity: f64,
    pub sigma: f64,
    pub tau: f64,
    /// Upper end of the time integral in units of `τ`; mass beyond it counts
    /// fully towards the distance.
    pub t_max_over_tau: f64,
    /// Gauss–Legendre panels in `t`, halving towards the seed.
    pub t_panels: usize,
    pub t_order: usize,
    pub sites: usize,
    pub spacing: f64,
    pub modes: usize,
    pub cutoff: f64,
    pub half_width: f64,
    pub dx: f64,
}

impl Default for NonrelLimitConfig {
    fn default() -> Self {
        Self {
            mass: 50.0,
            width: 2.0,
            velocity: 0.0,
            sigma: 1.0,
            tau: 100.0,
            t_max_over_tau: 6.0,
            t_panels: 14,
            t_order: 8,
            sites: 256,
            spacing: 0.25,
            modes: 64,
            cutoff: 2.5,
            half_width: 30.0,
            dx: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonrelLimitReport {
    /// Upper bound on the total variation distance of the first-flash laws.
    pub total_variation: f64,
    /// `½∫|p_rel - p_grw| d²x` over the evaluation region.
    pub inside: f64,
    /// First-flash probability captured by the region, each model.
    pub rel_mass: f64,
    pub grw_mass: f64,
    /// GRW first-flash probability outside the seed's light cone.
    pub grw_outside_cone: f64,
}

/// Both first-flash densities on a `(t, x)` mesh: Gauss–Legendre in `t`,
/// lattice sites in `x`. `p_rel = 0` outside the seed's future cone.
pub fn nonrel_limit<T: Real>(cfg: &NonrelLimitConfig) -> Result<NonrelLimitReport> {
    use crate::grw::{gaussian_packet, FlashProcess, Grid, GrwModel};
    if !(cfg.velocity.abs() < 1.0) {
        return Err(Error::InvalidParameter { name: "velocity", reason: "need |v| < 1".into() });
    }
    let k0 = cfg.mass * cfg.velocity / (1.0 - cfg.velocity * cfg.velocity).sqrt();
    let modes = ModeGrid::new(lit(cfg.mass), lit(k0), lit(cfg.cutoff), cfg.modes)?;
    let psi = DiracState::gaussian_packet(&modes, T::zero(), lit(cfg.width), lit(k0))?.normalized()?;
    let window = WindowSpec { half_width: lit(cfg.half_width), dx: lit(cfg.dx) };
    let spec = CollapseSpec { sigma: lit(cfg.sigma), tau: lit(cfg.tau), window, residual_tol: lit(1e-8) };
    let grid = Grid::new(1, cfg.sites, lit::<T>(cfg.spacing))?;
    let grw = GrwModel::new(grid, 1, lit(cfg.sigma), lit(cfg.tau), lit(cfg.mass))?;
    let phi = gaussian_packet(&grid, &[T::zero()], lit(cfg.width), &[lit(k0)])?;
    let h = cfg.spacing;
    let seed = SpacetimePoint::origin();
    let t_max = cfg.t_max_over_tau * cfg.tau;
    let rule = crate::quadrature::GaussLegendre::new(cfg.t_order);
    let (mut inside, mut rel_mass, mut grw_mass, mut outside) = (0.0, 0.0, 0.0, 0.0);
    for (t, w) in rule.graded(t_max, 0.0, cfg.t_panels, 0.5) {
        let w = w.abs();
        let q: Vec<f64> = grw.flash_weights(&grw.propagate(lit(t), phi.amplitudes())?).into_iter().map(|v| to_f64(v) / h).collect();
        let top = q.iter().fold(0.0f64, |a, b| a.max(*b));
        for (r, qr) in q.iter().enumerate() {
            let x = to_f64(grid.coords(r)[0]);
            let p = if x.abs() < t && *qr > 1e-12 * top {
                to_f64(flash_density(&seed, &SpacetimePoint::new(lit(t), lit(x)), &spec, &psi)?)
            } else {
                0.0
            };
            if x.abs() >= t {
                outside += w * h * qr;
            }
            inside += 0.5 * w * h * (p - qr).abs();
            rel_mass += w * h * p;
            grw_mass += w * h * qr;
        }
    }
    Ok(NonrelLimitReport {
        total_variation: inside + 0.5 * ((1.0 - rel_mass).max(0.0) + (1.0 - grw_mass).max(0.0)),
        inside,
        rel_mass,
        grw_mass,
        grw_outside_cone: outside,
    })
}

/// Two distant packets `L`, `R` at rest at `∓separation` above a common seed,
/// the family `ψ_φ = (L + e^{iφ} R)/√2`, and flat surfaces through the
/// points at heights `(h_L, h_R)` above the packets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NonAutonomyConfig {
    pub mass: f64,
    pub width: f64,
    pub separation: f64,
    pub sigma: f64,
    pub tau: f64,
    /// Candidate surface times at `x = ∓separation`.
    pub heights: Vec<f64>,
    /// Phases `2πk/phases` tried for `φ'` against `φ = 0`.
    pub phases: usize,
    pub modes: usize,
    pub cutoff: f64,
    pub half_width: f64,
    pub dx: f64,
    pub mesh: SurvivalMesh,
    /// Proper-time extent of the flash-overlap integral, units of `τ`.
    pub overlap_s_max_over_tau: f64,
    pub tol_first: f64,
    pub tol_second: f64,
}

impl Default for NonAutonomyConfig {
    fn default() -> Self {
        Self {
            mass: 100.0,
            width: 1.5,
            separation: 100.0,
            sigma: 1.0,
            tau: 7.0,
            heights: vec![108.0, 160.0, 300.0],
            phases: 8,
            modes: 300,
            cutoff: 3.5,
            half_width: 12.0,
            dx: 0.1,
            mesh: SurvivalMesh { order: 8, panels: 24 },
            overlap_s_max_over_tau: 30.0,
            tol_first: 1e-8,
            tol_second: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSurvival {
    /// Times of the surface at `x = ∓separation`.
    pub heights: (f64, f64),
    /// `⟨L|W²|L⟩`, `⟨R|W²|R⟩`, `|⟨L|W²|R⟩|`.
    pub survival_l: f64,
    pub survival_r: f64,
    pub cross: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub first: SurfaceSurvival,
    pub second: SurfaceSurvival,
    pub phase: f64,
    pub phase_prime: f64,
    /// Upper bound on `‖ρ_{Σ₁} - ρ'_{Σ₁}‖`.
    pub distance_first: f64,
    /// Lower bound on `‖ρ_{Σ₂} - ρ'_{Σ₂}‖`.
    pub distance_second: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonAutonomyReport {
    pub surfaces: Vec<SurfaceSurvival>,
    /// `∫ d²x √(p_L p_R)` over the seed's future, with `p` the first-flash
    /// densities: bounds what histories with flashes add to `Δρ_Σ`.
    pub flash_overlap: f64,
    pub pairs_tried: usize,
    /// The pair with the largest `distance_second / distance_first`.
    pub best: Option<Witness>,
    /// Whether `best` meets both tolerances.
    pub found: bool,
}

/// `‖W (c|L⟩⟨R| + c̄|R⟩⟨L|) W‖` from the Gram matrix `G = ⟨·|W²|·⟩` of
/// orthonormal `L`, `R`: the nonzero spectrum is that of `M G` with
/// `M = [[0, c], [c̄, 0]]`, i.e. `Re(c G₂₁) ± √(Re(c G₂₁)² + |c|² det G)`.
pub fn coherence_norm(g: &[[C<f64>; 2]; 2], c: C<f64>) -> f64 {
    let t = (c * g[1][0]).re;
    let det = (g[0][0] * g[1][1] - g[0][1] * g[1][0]).re;
    let root = (t * t + c.norm_sqr() * det).max(0.0).sqrt();
    (t + root).abs().max((t - root).abs())
}

/// Searches surface pairs and phases for `ψ_0`, `ψ_φ'` whose ensembles agree
/// on `Σ₁` but not on `Σ₂`. Only the `L`–`R` coherences depend on the phase:
/// the no-flash part of `Δρ_Σ` is `W Δ W`, and histories with a flash add at
/// most `2|c| ∫√(p_L p_R)` in trace norm, since later evolution is
/// trace-non-increasing.
pub fn non_autonomy_search<T: Real>(cfg: &NonAutonomyConfig) -> Result<NonAutonomyReport> {
    if cfg.phases < 2 {
        return Err(Error::InvalidParameter { name: "phases", reason: "need at least two phases".into() });
    }
    let grid = ModeGrid::new(lit::<T>(cfg.mass), T::zero(), lit(cfg.cutoff), cfg.modes)?;
    let a = cfg.separation;
    let l = DiracState::gaussian_packet(&grid, lit(-a), lit(cfg.width), T::zero())?.normalized()?;
    let r = DiracState::gaussian_packet(&grid, lit(a), lit(cfg.width), T::zero())?;
    // Gram–Schmidt; the overlap is far below rounding anyway
    let r = r.with_coeffs(r.coeffs() - l.coeffs() * overlap(&l, &r))?.normalized()?;
    let window = WindowSpec { half_width: lit(cfg.half_width), dx: lit(cfg.dx) };
    let spec = CollapseSpec { sigma: lit(cfg.sigma), tau: lit(cfg.tau), window, residual_tol: lit(1e-8) };
    let seed = SpacetimePoint::origin();
    // both packets well inside the seed's future cone where they cross
    let margin = 5.0 * cfg.width;

    let cx = |z: C<T>| C::new(to_f64(z.re), to_f64(z.im));
    let mut surfaces = Vec::new();
    let mut grams = Vec::new();
    for &hl in &cfg.heights {
        for &hr in &cfg.heights {
            let slope = (hr - hl) / (2.0 * a);
            if slope.abs() >= 0.99 || hl < a + margin || hr < a + margin {
                continue;
            }
            let sigma = Surface::Flat { anchor: SpacetimePoint::new(lit(0.5 * (hl + hr)), T::zero()), eta: lit(slope.atanh()) };
            let gm = survival_gram(&seed, &sigma, &[&l, &r], &spec, &cfg.mesh)?;
            let g = [[cx(gm[(0, 0)]), cx(gm[(0, 1)])], [cx(gm[(1, 0)]), cx(gm[(1, 1)])]];
            surfaces.push(SurfaceSurvival { heights: (hl, hr), survival_l: g[0][0].re, survival_r: g[1][1].re, cross: g[0][1].norm() });
            grams.push(g);
        }
    }
    let flash_overlap = flash_overlap(&seed, &l, &r, &spec, cfg.overlap_s_max_over_tau)?;

    let mut best: Option<Witness> = None;
    let mut pairs_tried = 0;
    for k in 1..cfg.phases {
        let phase_prime = std::f64::consts::TAU * k as f64 / cfg.phases as f64;
        // ψ_0ψ_0† - ψ_φ'ψ_φ'† = c|L⟩⟨R| + h.c.
        let c = (C::new(1.0, 0.0) - C::from_polar(1.0, -phase_prime)) * 0.5;
        let spill = 2.0 * c.norm() * flash_overlap;
        for (i, gi) in grams.iter().enumerate() {
            for (j, gj) in grams.iter().enumerate() {
                let (h1, h2) = (surfaces[i].heights, surfaces[j].heights);
                // Σ₂ must be later than Σ₁ at one packet at least; a Σ₂
                // below Σ₁ at both only shows that collapse loses information
                if h2.0 <= h1.0 && h2.1 <= h1.1 {
                    continue;
                }
                pairs_tried += 1;
                let d1 = coherence_norm(gi, c) + spill;
                let d2 = coherence_norm(gj, c) - spill;
                if best.as_ref().is_none_or(|w| d2 / d1 > w.distance_second / w.distance_first) {
                    best = Some(Witness {
                        first: surfaces[i].clone(),
                        second: surfaces[j].clone(),
                        phase: 0.0,
                        phase_prime,
                        distance_first: d1,
                        distance_second: d2,
                    });
                }
            }
        }
    }
    let found = best.as_ref().is_some_and(|w| w.distance_first <= cfg.tol_first && w.distance_second > cfg.tol_second);
    Ok(NonAutonomyReport { surfaces, flash_overlap, pairs_tried, best, found })
}

/// `∫_{F(x')} d²x √(p_a p_b)` on an `(s, u)` mesh, plus `e^{-s_max/τ}`
/// (Cauchy–Schwarz) for the rest.
fn flash_overlap<T: Real>(seed: &SpacetimePoint<T>, a: &DiracState<T>, b: &DiracState<T>, spec: &CollapseSpec<T>, s_max_over_tau: f64) -> Result<f64> {
    let (sigma, tau) = (spec.sigma, spec.tau);
    let s_max = lit::<T>(s_max_over_tau) * tau;
    let rule = crate::quadrature::GaussLegendre::new(8);
    let mut total = 0.0;
    for (s, w) in rule.composite(T::zero(), s_max, 32) {
        let (ga, ra) = hyperboloid_flux(seed, s, a, &spec.window)?;
        let (gb, rb) = hyperboloid_flux(seed, s, b, &spec.window)?;
        let reach = sigma * lit(10.0);
        let lo = ga.arcs[0].min(gb.arcs[0]) - reach;
        let hi = ga.arcs[ga.len() - 1].max(gb.arcs[gb.len() - 1]) + reach;
        let du = sigma * lit(0.5);
        let n = to_f64((hi - lo) / du).ceil() as usize;
        let mut inner = T::zero();
        for i in 0..=n {
            let u = lo + du * lit(i as f64);
            let wt = if i == 0 || i == n { du * lit(0.5) } else { du };
            inner += wt * (smeared_flux(&ga, &ra, u, sigma, tau) * smeared_flux(&gb, &rb, u, sigma, tau)).sqrt();
        }
        total += to_f64(w * (-s / tau).exp() * inner);
    }
    Ok(total + (-s_max_over_tau).exp())
}

/// Desk-scale model shared by the exact-density checks below.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelBench {
    pub mass: f64,
    pub cutoff: f64,
    pub modes: usize,
    pub width: f64,
    pub sigma: f64,
    pub tau: f64,
    pub half_width: f64,
    pub dx: f64,
}

impl Default for RelBench {
    fn default() -> Self {
        Self { mass: 2.0, cutoff: 8.0, modes: 128, width: 1.5, sigma: 1.0, tau: 4.0, half_width: 12.0, dx: 0.1 }
    }
}

impl RelBench {
    pub fn grid<T: Real>(&self) -> Result<ModeGrid<T>> {
        ModeGrid::new(lit(self.mass), T::zero(), lit(self.cutoff), self.modes)
    }

    pub fn model<T: Real>(&self) -> Result<RelFlashModel<T>> {
        let window = WindowSpec { half_width: lit(self.half_width), dx: lit(self.dx) };
        RelFlashModel::new(CollapseSpec { sigma: lit(self.sigma), tau: lit(self.tau), window, residual_tol: lit(1e-8) })
    }

    pub fn packet<T: Real>(&self, x0: f64, k0: f64) -> Result<DiracState<T>> {
        DiracState::gaussian_packet(&self.grid()?, lit(x0), lit(self.width), lit(k0))
    }
}

fn pt<T: Real>(t: f64, x: f64) -> SpacetimePoint<T> {
    SpacetimePoint::new(lit(t), lit(x))
}

fn rel_diff(a: f64, b: f64) -> f64 {
    let m = a.abs().max(b.abs());
    if m == 0.0 {
        0.0
    } else {
        (a - b).abs() / m
    }
}

/// `b` orthogonalised against `a`, both normalised.
fn orthonormal<T: Real>(a: DiracState<T>, b: DiracState<T>) -> Result<(DiracState<T>, DiracState<T>)> {
    let a = a.normalized()?;
    let c = overlap(&a, &b);
    let b = b.with_coeffs(b.coeffs() - a.coeffs() * c)?.normalized()?;
    Ok((a, b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PovmCheckConfig {
    pub mass: f64,
    pub width: f64,
    pub cutoff: f64,
    pub modes: usize,
    pub sigma: f64,
    pub tau: f64,
    /// Distance of the packet from the light cone of the previous flash, in widths.
    pub widths_inside: f64,
    pub half_width: f64,
    pub dx: f64,
    pub mesh: PovmMesh<f64>,
    /// Refinement steps after the coarsest mesh.
    pub refinements: usize,
}

impl Default for PovmCheckConfig {
    fn default() -> Self {
        // box length 2π/Δk ≈ 100 holds the ±30 window
        Self {
            mass: 2.0,
            width: 1.5,
            cutoff: 4.0,
            modes: 128,
            sigma: 1.0,
            tau: 4.0,
            widths_inside: 5.0,
            half_width: 30.0,
            dx: 0.1,
            mesh: PovmMesh { s_max_over_tau: 12.0, s_panels: 2, order: 4, arc_step_over_sigma: 2.0 },
            refinements: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PovmCheckReport {
    /// `total + tail` per mesh, coarsest first.
    pub sums: Vec<f64>,
    /// `|1 - sum|` per mesh.
    pub deficiencies: Vec<f64>,
    pub monotone: bool,
    pub cone_leakage: f64,
    pub min_captured_flux: f64,
}

/// A packet at rest `widths_inside · width` inside the future cone of the
/// previous flash, integrated on successively refined meshes.
pub fn povm_check<T: Real>(cfg: &PovmCheckConfig) -> Result<PovmCheckReport> {
    let grid = ModeGrid::new(lit::<T>(cfg.mass), T::zero(), lit(cfg.cutoff), cfg.modes)?;
    let psi = DiracState::gaussian_packet(&grid, T::zero(), lit(cfg.width), T::zero())?.normalized()?;
    let window = WindowSpec { half_width: lit(cfg.half_width), dx: lit(cfg.dx) };
    let spec = CollapseSpec { sigma: lit(cfg.sigma), tau: lit(cfg.tau), window, residual_tol: lit(1e-8) };
    let prev = pt::<T>(-cfg.widths_inside * cfg.width, 0.0);
    let m = cfg.mesh;
    let mut mesh = PovmMesh { s_max_over_tau: lit::<T>(m.s_max_over_tau), s_panels: m.s_panels, order: m.order, arc_step_over_sigma: lit(m.arc_step_over_sigma) };
    let (mut sums, mut deficiencies) = (Vec::new(), Vec::new());
    let mut last = None;
    for _ in 0..=cfg.refinements {
        let r = povm_integral(&prev, &psi, &spec, &mesh)?;
        sums.push(r.total + r.tail);
        deficiencies.push((1.0 - r.total - r.tail).abs());
        last = Some(r);
        mesh = mesh.refined();
    }
    let last = last.expect("at least one mesh");
    let monotone = deficiencies.windows(2).all(|w| w[1] <= w[0]);
    Ok(PovmCheckReport { sums, deficiencies, monotone, cone_leakage: last.cone_leakage, min_captured_flux: last.min_captured_flux })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoSignallingReport {
    pub sequences: usize,
    /// Worst relative gap between the reduced-state route and summing the
    /// joint law over type-2 outcomes, over states and sequences.
    pub route_gap: f64,
    /// Worst relative gap between the purifications, reduced route.
    pub purification_gap: f64,
    pub marginals: Vec<f64>,
}

/// Type-1 test sequences after a seed at `(-10, 0)`: twelve single flashes
/// and eight pairs, over both packets and the gap between them.
pub fn no_signalling_sequences<T: Real>() -> Vec<Vec<SpacetimePoint<T>>> {
    let seed = pt::<T>(-10.0, 0.0);
    let mut out = Vec::new();
    for (i, x) in [-6.0, -5.0, -4.0, 0.0, 4.5, 5.5].into_iter().enumerate() {
        for t in [2.0, 4.0] {
            out.push(vec![seed, pt(t + 0.5 * i as f64, x)]);
        }
    }
    for (i, (x1, x2)) in [(-5.0, -4.5), (-5.0, -5.5), (5.0, 4.0), (5.0, 6.0), (-4.0, -3.5), (0.0, 0.5), (-5.5, -5.0), (4.5, 5.0)].into_iter().enumerate() {
        out.push(vec![seed, pt(2.0 + 0.25 * i as f64, x1), pt(9.0, x2)]);
    }
    out
}

/// Three states with one `ρ₁ = p|L⟩⟨L| + (1-p)|R⟩⟨R|`: partners of mass
/// `mass` and of a heavier type 2, and the heavier partners on the rotated
/// ensemble `(√p L ± √(1-p) R)/√2`.
pub fn purifications<T: Real>(bench: &RelBench, p: f64, heavy_mass: f64) -> Result<[TensorState<T>; 3]> {
    let (l, r) = (bench.packet::<T>(-5.0, 0.2)?, bench.packet::<T>(5.0, -0.2)?);
    let (a, b) = orthonormal(bench.packet(-4.0, 0.0)?, bench.packet(4.0, 0.1)?)?;
    let heavy = ModeGrid::new(lit::<T>(heavy_mass), T::zero(), lit(bench.cutoff), bench.modes)?;
    let (c, d) = orthonormal(
        DiracState::gaussian_packet(&heavy, lit(3.0), lit(2.0), T::zero())?,
        DiracState::gaussian_packet(&heavy, lit(-2.0), lit(1.2), lit(0.4))?,
    )?;
    let (sp, sq) = (C::new(lit::<T>(p.sqrt()), T::zero()), C::new(lit::<T>((1.0 - p).sqrt()), T::zero()));
    let first = TensorState::superposition(&[sp, sq], vec![vec![l.clone(), a], vec![r.clone(), b]])?;
    let second = TensorState::superposition(&[sp, sq], vec![vec![l.clone(), c.clone()], vec![r.clone(), d.clone()]])?;
    let h = C::new(lit::<T>(std::f64::consts::FRAC_1_SQRT_2), T::zero());
    let plus = l.with_coeffs((l.coeffs() * sp + r.coeffs() * sq) * h)?;
    let minus = l.with_coeffs((l.coeffs() * sp - r.coeffs() * sq) * h)?;
    let third = TensorState::new(vec![vec![plus, c], vec![minus, d]])?;
    Ok([first, second, third])
}

pub fn no_signalling<T: Real>(bench: &RelBench) -> Result<NoSignallingReport> {
    let model = bench.model::<T>()?;
    let states = purifications::<T>(bench, 0.3, 1.5 * bench.mass)?;
    let seeds = SeedConfig::new(vec![pt(-10.0, 0.0); 2])?;
    let tests = no_signalling_sequences::<T>();
    let horizon = Surface::Flat { anchor: pt(3.0, 0.0), eta: lit(-0.1) };
    let sm = model.survival_mesh;
    let mesh = BelowMesh { s_order: sm.order, s_panels: sm.panels, u_order: 8, u_step_over_sigma: T::one() };
    let (mut route_gap, mut purification_gap) = (0f64, 0f64);
    let mut reference: Vec<f64> = Vec::new();
    for st in &states {
        let reduced = tests.iter().map(|f| type1_marginal(st, f, &model).map(to_f64)).collect::<Result<Vec<_>>>()?;
        let summed = type1_marginals_by_summation(st, &seeds, &tests, &horizon, &model, &mesh)?;
        for (a, b) in reduced.iter().zip(&summed) {
            route_gap = route_gap.max(rel_diff(*a, *b));
        }
        if reference.is_empty() {
            reference = reduced;
        } else {
            for (a, b) in reduced.iter().zip(&reference) {
                purification_gap = purification_gap.max(rel_diff(*a, *b));
            }
        }
    }
    Ok(NoSignallingReport { sequences: tests.len(), route_gap, purification_gap, marginals: reference })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LorentzReport {
    pub density: f64,
    /// `(η, relative change, norm lost in the re-expansion)`.
    pub boosts: Vec<(f64, f64, f64)>,
    pub max_relative: f64,
}

/// Boosts state, seed and flashes together. The box and cutoff are larger
/// than `bench`'s: the boosted packet is re-expanded from a tilted slice,
/// and collapsed states seen from a moving frame carry more momentum.
pub fn lorentz_check<T: Real>(bench: &RelBench, rapidities: &[f64]) -> Result<LorentzReport> {
    let big = ModeGrid::new(lit::<T>(bench.mass), T::zero(), lit(12.0), 576)?;
    let model = bench.model::<T>()?;
    let st = TensorState::single(DiracState::gaussian_packet(&big, T::zero(), lit(bench.width), lit(0.3))?);
    let h = RelFlashHistory::new(SeedConfig::common_origin(1), vec![vec![pt(7.0, 0.5), pt(14.0, 1.5)]])?;
    let d = to_f64(rel_joint_density(&st, &h, &model)?);
    let mut boosts = Vec::new();
    for &eta in rapidities {
        let (bst, loss) = st.boost(lit(eta))?;
        let bd = to_f64(rel_joint_density(&bst, &h.boost(lit(eta)), &model)?);
        boosts.push((eta, rel_diff(d, bd), to_f64(loss)));
    }
    let max_relative = boosts.iter().fold(0f64, |m, b| m.max(b.1));
    Ok(LorentzReport { density: d, boosts, max_relative })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonlocalityReport {
    pub tolerance: f64,
    pub entangled: CorrelationReport,
    pub product: CorrelationReport,
}

/// `(L⊗R + R⊗L)/√2` against `L⊗R`, flashes at `(7, -6)` and `(8, 6)` from a
/// common seed at `(-10, 0)`.
pub fn nonlocality_check<T: Real>(bench: &RelBench, tol: f64) -> Result<NonlocalityReport> {
    let model = bench.model::<T>()?;
    let (l, r) = (bench.packet::<T>(-6.0, 0.2)?, bench.packet::<T>(6.0, -0.2)?);
    let one = C::new(T::one(), T::zero());
    let ent = TensorState::superposition(&[one, one], vec![vec![l.clone(), r.clone()], vec![r.clone(), l.clone()]])?.normalized()?;
    let prod = TensorState::product(vec![l.normalized()?, r.normalized()?])?;
    let seeds = SeedConfig::new(vec![pt(-10.0, 0.0); 2])?;
    let h = RelFlashHistory::new(seeds, vec![vec![pt(7.0, -6.0)], vec![pt(8.0, 6.0)]])?;
    Ok(NonlocalityReport { tolerance: tol, entangled: correlation_check(&ent, &h, &model, tol)?, product: correlation_check(&prod, &h, &model, tol)? })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherenceReport {
    /// Future density as a Bayes quotient of joint densities.
    pub bayes: f64,
    pub via_psi: f64,
    pub via_phi: f64,
    pub phi_norm_sqr: f64,
    /// Largest relative gap of the two conditional routes from `bayes`.
    pub max_relative: f64,
}

/// An entangled pair, one type-1 flash in the past of a tilted slice, and
/// one future flash of each type.
pub fn conditional_coherence<T: Real>(bench: &RelBench) -> Result<CoherenceReport> {
    let model = bench.model::<T>()?;
    let (l, r) = (bench.packet::<T>(-6.0, 0.2)?, bench.packet::<T>(6.0, -0.2)?);
    let amps = [C::new(T::one(), T::zero()), C::new(lit(0.7f64.cos()), lit(0.7f64.sin()))];
    let st = TensorState::superposition(&amps, vec![vec![l.clone(), r.clone()], vec![r, l]])?.normalized()?;
    let seeds = SeedConfig::new(vec![pt(-10.0, 0.0); 2])?;
    let past = RelFlashHistory::new(seeds, vec![vec![pt(2.0, -6.0)], vec![]])?;
    let sigma = Surface::Flat { anchor: pt(5.0, 0.0), eta: lit(0.1) };
    let future = vec![vec![pt(12.0, -5.5)], vec![pt(11.0, 6.3)]];
    let bayes = to_f64(conditional_density_given_last(&st, &past, &sigma, &future, &model)?);
    let cond = condition_on_surface(&st, &past, &sigma, &model)?;
    let via_psi = to_f64(cond.future_density_psi(&future, &model)?);
    let via_phi = to_f64(cond.future_density_phi(&future, &model)?);
    Ok(CoherenceReport {
        bayes,
        via_psi,
        via_phi,
        phi_norm_sqr: to_f64(cond.phi.norm_sqr()),
        max_relative: rel_diff(bayes, via_psi).max(rel_diff(bayes, via_phi)),
    })
}

/// Largest `|S(t) - e^{-Nt/τ}|` for the free lattice model with `N = 1, 2, 3`
/// at `t ∈ {0.1τ, τ, 5τ}`.
pub fn exponential_survival<T: Real>(tau: f64) -> Result<Vec<(usize, f64, f64)>> {
    use crate::grw::{gaussian_packet, product_state, survival_probability, Grid, GrwModel};
    let grid = Grid::new(1, 8, lit::<T>(0.5))?;
    let mut out = Vec::new();
    for n in 1..=3usize {
        let model = GrwModel::new(grid, n, T::one(), lit(tau), T::one())?;
        let factors = (0..n).map(|i| gaussian_packet(&grid, &[lit(i as f64 - 1.0)], lit(0.8), &[lit(0.3)])).collect::<Result<Vec<_>>>()?;
        let psi = product_state(&factors)?;
        for f in [0.1, 1.0, 5.0] {
            let s = to_f64(survival_probability(&model, &psi, T::zero(), lit(f * tau))?);
            out.push((n, f * tau, (s - (-(n as f64) * f).exp()).abs()));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaitingTimeConfig {
    pub sites: usize,
    pub spacing: f64,
    pub sigma: f64,
    pub tau: f64,
    pub trajectories: usize,
    /// First flashes later than this are censored; the KS test uses the
    /// law truncated there.
    pub horizon_over_tau: f64,
    pub seed: u64,
}

impl Default for WaitingTimeConfig {
    fn default() -> Self {
        Self { sites: 16, spacing: 0.5, sigma: 1.0, tau: 10.0, trajectories: 10_000, horizon_over_tau: 10.0, seed: 7 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaitingTimeStats {
    pub count: usize,
    pub censored: usize,
    pub mean: f64,
    pub standard_error: f64,
    /// `|mean - τ| / standard_error`.
    pub z: f64,
    pub ks_statistic: f64,
    pub ks_p_value: f64,
}

/// First waiting time of each of two types under the sampler.
pub fn waiting_times<T: Real>(cfg: &WaitingTimeConfig) -> Result<Vec<WaitingTimeStats>> {
    use crate::grw::{gaussian_packet, product_state, sample_history, Grid, GrwModel};
    let grid = Grid::new(1, cfg.sites, lit::<T>(cfg.spacing))?;
    let model = GrwModel::new(grid, 2, lit(cfg.sigma), lit(cfg.tau), T::one())?;
    let psi = product_state(&[gaussian_packet(&grid, &[lit(-1.5)], T::one(), &[T::zero()])?, gaussian_packet(&grid, &[lit(1.5)], T::one(), &[T::zero()])?])?;
    let horizon = cfg.horizon_over_tau * cfg.tau;
    let mut waits = [Vec::new(), Vec::new()];
    for i in 0..cfg.trajectories {
        let h = sample_history(&model, &psi, T::zero(), lit(horizon), &mut trajectory_stream(cfg.seed, i as u64))?;
        for (kind, seq) in h.by_type.iter().enumerate() {
            if let Some(first) = seq.first() {
                waits[kind].push(to_f64(first.t));
            }
        }
    }
    let cut = 1.0 - (-cfg.horizon_over_tau).exp();
    Ok(waits
        .iter()
        .map(|w| {
            let n = w.len() as f64;
            let mean = w.iter().sum::<f64>() / n;
            let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let se = (var / n).sqrt();
            let ks = crate::stats::ks_test(w, |x| (1.0 - (-x / cfg.tau).exp()) / cut);
            WaitingTimeStats {
                count: w.len(),
                censored: cfg.trajectories - w.len(),
                mean,
                standard_error: se,
                z: (mean - cfg.tau).abs() / se,
                ks_statistic: ks.statistic,
                ks_p_value: ks.p_value,
            }
        })
        .collect())
}

/// Relative gap of the marginalise-and-survive identity on a 32-site
/// lattice, for histories of zero, one and two flashes.
pub fn grw_consistency<T: Real>() -> Result<Vec<f64>> {
    use crate::grw::{consistency_sides, gaussian_packet, FlashEvent, FlashHistory, Grid, GrwModel};
    let model = GrwModel::new(Grid::new(1, 32, lit::<T>(0.5))?, 1, T::one(), lit(10.0), T::one())?;
    let psi = gaussian_packet(model.grid(), &[lit(-1.0)], lit(1.5), &[lit(0.5)])?;
    let rule = crate::quadrature::GaussLegendre::new(10);
    let ev = |t: f64, site| FlashEvent { t: lit::<T>(t), site, kind: 0 };
    let histories = [vec![], vec![ev(2.0, 14)], vec![ev(2.0, 14), ev(6.0, 17)]];
    histories
        .iter()
        .map(|events| {
            let h = FlashHistory::from_events(T::zero(), 1, events)?;
            let (lhs, rhs) = consistency_sides(&model, &psi, &h, lit(15.0), &rule, 40)?;
            Ok(rel_diff(to_f64(lhs), to_f64(rhs)))
        })
        .collect()
}

/// Operator-norm gap of the two Fock-space rate constructions on `sites`
/// sites with at most `n_max` particles, fermions then bosons.
pub fn fock_equivalence<T: Real>(sites: usize, n_max: usize) -> Result<Vec<f64>> {
    use crate::fock::{fock_flash_rate, max_operator_distance, single_particle_rates, smeared_number_density, FockSpace, Statistics};
    let grid = crate::grw::Grid::new(1, sites, lit::<T>(0.5))?;
    [Statistics::Fermion, Statistics::Boson]
        .into_iter()
        .map(|stats| {
            let space = FockSpace::new(sites, stats, n_max)?;
            let a = fock_flash_rate(&space, &single_particle_rates(&grid, T::one(), lit(10.0)))?;
            let b = smeared_number_density(&space, &grid, T::one(), lit(10.0))?;
            Ok(to_f64(max_operator_distance(&a, &b)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSummary {
    pub configurations: usize,
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
}

/// Two non-interacting systems on 24 sites in an entangled state; system 0
/// run `delta` ahead, with and without past flashes, against 20 future
/// flash configurations each.
pub fn multitime_covariance<T: Real>(delta: f64) -> Result<CovarianceSummary> {
    use crate::grw::{gaussian_packet, FlashEvent, FlashHistory, Grid, GrwModel};
    use crate::hilbert::StateVector;
    use crate::multitime::{covariance_check, FutureFlashes};
    let grid = Grid::new(1, 24, lit::<T>(0.5))?;
    let system = || GrwModel::new(grid, 1, T::one(), lit(10.0), T::one());
    let systems = [system()?, system()?];
    let packet = |x: f64, k: f64| gaussian_packet(&grid, &[lit(x)], T::one(), &[lit(k)]);
    let ab = packet(-2.5, 0.4)?.tensor(&packet(2.5, -0.3)?);
    let ba = packet(2.5, 0.0)?.tensor(&packet(-2.5, 0.2)?);
    let psi = StateVector::normalized(ab.amplitudes() + ba.amplitudes() * C::new(lit(0.6), lit(0.8)), vec![24, 24])?;
    let ev = |t: f64, site| FlashEvent { t: lit::<T>(t), site, kind: 0 };
    let tests: Vec<FutureFlashes<T>> = (0..20)
        .map(|i| {
            let (s0, s1) = (4 + (i * 7) % 16, 6 + (i * 5) % 12);
            let system0 = if i % 3 == 0 { vec![] } else { vec![ev(0.5 + 0.37 * i as f64, s0)] };
            let mut system1 = vec![ev(0.3 + 0.21 * i as f64, s1)];
            if i % 2 == 0 {
                system1.push(ev(5.0 + 0.4 * i as f64, (s1 + 3) % 24));
            }
            FutureFlashes { system0, others: vec![system1] }
        })
        .collect();
    let pasts = [FlashHistory::empty(T::zero(), 1), FlashHistory::from_events(T::zero(), 1, &[ev(2.0, 9), ev(5.5, 14)])?];
    let mut out = CovarianceSummary { configurations: 0, max_abs_diff: 0.0, max_rel_diff: 0.0 };
    for past in &pasts {
        let r = covariance_check(&psi, &systems, lit(delta), past, &tests)?;
        out.configurations += r.lhs.len();
        out.max_abs_diff = out.max_abs_diff.max(r.max_abs_diff);
        out.max_rel_diff = out.max_rel_diff.max(r.max_rel_diff);
    }
    Ok(out)
}
