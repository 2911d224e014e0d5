//! Gauss–Legendre rules and composite integration on finite intervals.

use crate::error::{Error, Result};
use crate::scalar::{lit, Real};

/// Nodes and weights on `[-1, 1]`, computed by Newton iteration on `P_n`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let nf = n as f64;
        for i in 0..n.div_ceil(2) {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            let mut dp = 1.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes and weights mapped to `[a, b]` split into `panels` equal pieces.
    pub fn composite<T: Real>(&self, a: T, b: T, panels: usize) -> Vec<(T, T)> {
        let mut out = Vec::with_capacity(panels * self.len());
        let h = (b - a) / lit::<T>(panels as f64);
        let half = h * lit(0.5);
        for p in 0..panels {
            let mid = a + h * lit::<T>(p as f64 + 0.5);
            for (x, w) in self.nodes.iter().zip(&self.weights) {
                out.push((mid + half * lit::<T>(*x), half * lit::<T>(*w)));
            }
        }
        out
    }

    /// Panels shrinking geometrically by `ratio` towards `b`, for integrands
    /// with an endpoint singularity there. The last panel ends at `b`.
    pub fn graded<T: Real>(&self, a: T, b: T, panels: usize, ratio: T) -> Vec<(T, T)> {
        let mut out = Vec::with_capacity(panels * self.len());
        let mut lo = a;
        for p in 0..panels {
            let hi = if p + 1 == panels { b } else { b - (b - lo) * ratio };
            let (mid, half) = ((lo + hi) * lit(0.5), (hi - lo) * lit(0.5));
            for (x, w) in self.nodes.iter().zip(&self.weights) {
                out.push((mid + half * lit::<T>(*x), half * lit::<T>(*w)));
            }
            lo = hi;
        }
        out
    }

    pub fn integrate<T: Real>(&self, a: T, b: T, panels: usize, mut f: impl FnMut(T) -> T) -> T {
        self.composite(a, b, panels).into_iter().fold(T::zero(), |acc, (x, w)| acc + w * f(x))
    }

    /// Fallible integrand variant.
    pub fn try_integrate<T: Real>(&self, a: T, b: T, panels: usize, mut f: impl FnMut(T) -> Result<T>) -> Result<T> {
        let mut acc = T::zero();
        for (x, w) in self.composite(a, b, panels) {
            acc += w * f(x)?;
        }
        Ok(acc)
    }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Integrates with successive panel doubling until two estimates agree to
/// `tol`; returns the final estimate and the last change.
pub fn adaptive_panels<T: Real>(
    rule: &GaussLegendre,
    a: T,
    b: T,
    start: usize,
    max_panels: usize,
    tol: T,
    mut f: impl FnMut(T) -> Result<T>,
) -> Result<(T, T)> {
    let mut panels = start.max(1);
    let mut prev = rule.try_integrate(a, b, panels, &mut f)?;
    while panels * 2 <= max_panels {
        panels *= 2;
        let next = rule.try_integrate(a, b, panels, &mut f)?;
        let change = (next - prev).abs();
        if change <= tol {
            return Ok((next, change));
        }
        prev = next;
    }
    Err(Error::Quadrature(format!("no convergence with {panels} panels")))
}
