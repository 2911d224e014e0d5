//! Identical particles on a periodic 1D lattice: (anti)symmetric sectors,
//! truncated Fock space and the two equivalent flash-rate constructions.
//!
//! Fermionic signs follow the Jordan–Wigner ordering
//! `a_s = (-1)^{Σ_{j<s} n_j} σ⁻_s`, so the occupation state with sites
//! `s₁ < … < s_N` equals `a†_{s₁}⋯a†_{s_N}|0⟩`.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grw::{periodic_gaussian, DenseFlashModel, Grid};
use crate::hilbert::{apply_on_factor, OperatorKind, OperatorMatrix};
use crate::scalar::{creal, lit, CMatrix, CVector, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistics {
    Fermion,
    Boson,
}

/// Occupation-number basis of `⊕_{N ≤ N_max}` sectors over `L` sites.
#[derive(Debug, Clone)]
pub struct FockSpace {
    sites: usize,
    statistics: Statistics,
    n_max: usize,
    basis: Vec<Vec<u8>>,
    sector_offsets: Vec<usize>,
    index: HashMap<Vec<u8>, usize>,
}

impl FockSpace {
    pub fn new(sites: usize, statistics: Statistics, n_max: usize) -> Result<Self> {
        if sites == 0 {
            return Err(Error::InvalidParameter { name: "sites", reason: "need at least one".into() });
        }
        if statistics == Statistics::Fermion && n_max > sites {
            return Err(Error::EmptySubspace { particles: n_max, sites });
        }
        let mut basis = Vec::new();
        let mut sector_offsets = Vec::with_capacity(n_max + 2);
        for n in 0..=n_max {
            sector_offsets.push(basis.len());
            basis.extend(sector_basis(sites, n, statistics));
        }
        sector_offsets.push(basis.len());
        let index = basis.iter().enumerate().map(|(i, occ)| (occ.clone(), i)).collect();
        Ok(Self { sites, statistics, n_max, basis, sector_offsets, index })
    }

    /// Truncation defaults: 3 bosons, `min(L, 3)` fermions.
    pub fn with_default_truncation(sites: usize, statistics: Statistics) -> Result<Self> {
        let n_max = match statistics {
            Statistics::Boson => 3,
            Statistics::Fermion => sites.min(3),
        };
        Self::new(sites, statistics, n_max)
    }

    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn statistics(&self) -> Statistics {
        self.statistics
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn sector_dims(&self) -> Vec<usize> {
        self.sector_offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Index range of sector `n` in the full basis.
    pub fn sector_range(&self, n: usize) -> std::ops::Range<usize> {
        self.sector_offsets[n]..self.sector_offsets[n + 1]
    }

    pub fn occupations(&self, index: usize) -> &[u8] {
        &self.basis[index]
    }

    pub fn index_of(&self, occupations: &[u8]) -> Option<usize> {
        self.index.get(occupations).copied()
    }

    /// Annihilator `a_s`, exact on the truncated space.
    pub fn annihilation<T: Real>(&self, site: usize) -> CMatrix<T> {
        let n = self.dim();
        let mut m = DMatrix::from_element(n, n, creal(T::zero()));
        for (col, occ) in self.basis.iter().enumerate() {
            let k = occ[site];
            if k == 0 {
                continue;
            }
            let mut target = occ.clone();
            target[site] -= 1;
            let Some(row) = self.index_of(&target) else { continue };
            let amp = match self.statistics {
                Statistics::Boson => lit::<T>(f64::from(k).sqrt()),
                Statistics::Fermion => {
                    let parity: u32 = occ[..site].iter().map(|x| u32::from(*x)).sum();
                    if parity.is_multiple_of(2) {
                        T::one()
                    } else {
                        -T::one()
                    }
                }
            };
            m[(row, col)] = creal(amp);
        }
        m
    }

    pub fn creation<T: Real>(&self, site: usize) -> CMatrix<T> {
        self.annihilation::<T>(site).adjoint()
    }

    /// `N = Σ_s n_s`, diagonal.
    pub fn number_operator<T: Real>(&self) -> OperatorMatrix<T> {
        let d: Vec<T> = self.basis.iter().map(|occ| lit(occ.iter().map(|x| f64::from(*x)).sum::<f64>())).collect();
        OperatorMatrix::real_diagonal(&d)
    }

    /// Weight of `ψ` in each sector.
    pub fn sector_weights<T: Real>(&self, psi: &CVector<T>) -> Vec<T> {
        (0..=self.n_max)
            .map(|n| self.sector_range(n).fold(T::zero(), |acc, i| acc + psi[i].norm_sqr()))
            .collect()
    }

    /// Columns are the (anti)symmetrized sector-`n` basis states written in
    /// the `L^n` tensor-product basis (first particle major).
    pub fn sector_isometry<T: Real>(&self, n: usize) -> CMatrix<T> {
        let range = self.sector_range(n);
        let tensor_dim = self.sites.pow(n as u32);
        let mut v = DMatrix::from_element(tensor_dim, range.len(), creal(T::zero()));
        for (col, idx) in range.enumerate() {
            let occ = &self.basis[idx];
            let sites: Vec<usize> = occ.iter().enumerate().flat_map(|(s, k)| std::iter::repeat_n(s, usize::from(*k))).collect();
            let mut arrangements = Vec::new();
            permutations(&sites, &mut Vec::new(), &mut vec![false; n], &mut arrangements);
            let count = arrangements.len() as f64;
            for (labels, sign) in arrangements {
                let row = labels.iter().fold(0, |acc, s| acc * self.sites + s);
                let amp = match self.statistics {
                    Statistics::Boson => 1.0,
                    Statistics::Fermion => sign,
                };
                // every arrangement is distinct for fermions; for bosons
                // `permutations` already skips repeated ones
                v[(row, col)] = creal(lit::<T>(amp / count.sqrt()));
            }
        }
        v
    }
}

fn sector_basis(sites: usize, n: usize, statistics: Statistics) -> Vec<Vec<u8>> {
    let cap = match statistics {
        Statistics::Fermion => 1,
        Statistics::Boson => n,
    };
    let mut out = Vec::new();
    let mut occ = vec![0u8; sites];
    fill(&mut occ, 0, n, cap, &mut out);
    out
}

fn fill(occ: &mut Vec<u8>, site: usize, left: usize, cap: usize, out: &mut Vec<Vec<u8>>) {
    if site == occ.len() {
        if left == 0 {
            out.push(occ.clone());
        }
        return;
    }
    for k in (0..=left.min(cap)).rev() {
        occ[site] = k as u8;
        fill(occ, site + 1, left - k, cap, out);
    }
    occ[site] = 0;
}

/// Distinct orderings of a sorted multiset with the sign of the sorting
/// permutation.
fn permutations(items: &[usize], prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<(Vec<usize>, f64)>) {
    if prefix.len() == items.len() {
        let mut inversions = 0;
        for i in 0..prefix.len() {
            for j in i + 1..prefix.len() {
                if prefix[i] > prefix[j] {
                    inversions += 1;
                }
            }
        }
        out.push((prefix.clone(), if inversions % 2 == 0 { 1.0 } else { -1.0 }));
        return;
    }
    for i in 0..items.len() {
        if used[i] || (i > 0 && items[i] == items[i - 1] && !used[i - 1]) {
            continue;
        }
        used[i] = true;
        prefix.push(items[i]);
        permutations(items, prefix, used, out);
        prefix.pop();
        used[i] = false;
    }
}

/// Single-particle Gaussian rates `Λ(r) = g_σ(r - ·)/τ` on the periodic lattice.
pub fn single_particle_rates<T: Real>(grid: &Grid<T>, sigma: T, tau: T) -> Vec<OperatorMatrix<T>> {
    let n = grid.sites();
    (0..n)
        .map(|r| {
            let d: Vec<T> = (0..n).map(|s| periodic_gaussian(grid, r, s, sigma) / tau).collect();
            OperatorMatrix::real_diagonal(&d)
        })
        .collect()
}

/// `Λ^{(N)}(r) = Σ_i Λ_i(r)` compressed to the (anti)symmetric subspace.
pub fn symmetric_flash_rate<T: Real>(
    space: &FockSpace,
    single: &[OperatorMatrix<T>],
    n: usize,
) -> Result<Vec<OperatorMatrix<T>>> {
    if n == 0 {
        return Err(Error::InvalidParameter { name: "particles", reason: "need N ≥ 1".into() });
    }
    if space.statistics() == Statistics::Fermion && n > space.sites() {
        return Err(Error::EmptySubspace { particles: n, sites: space.sites() });
    }
    if n > space.n_max() {
        return Err(Error::InvalidParameter { name: "particles", reason: format!("{n} above truncation {}", space.n_max()) });
    }
    let v = space.sector_isometry::<T>(n);
    let dims = vec![space.sites(); n];
    single
        .iter()
        .map(|lam| {
            if lam.dim() != space.sites() {
                return Err(Error::DimensionMismatch { expected: space.sites(), found: lam.dim() });
            }
            let l = lam.to_dense();
            let mut summed = DMatrix::from_element(v.nrows(), v.ncols(), creal(T::zero()));
            for col in 0..v.ncols() {
                let c: CVector<T> = v.column(col).into_owned();
                let mut acc = DVector::from_element(c.len(), creal(T::zero()));
                for i in 0..n {
                    acc += apply_on_factor(&l, i, &dims, &c);
                }
                summed.set_column(col, &acc);
            }
            Ok(OperatorMatrix::dense(v.adjoint() * summed, OperatorKind::Positive))
        })
        .collect()
}

/// `⊕_N Λ^{(N)}(r)` on the truncated Fock space (vacuum block zero).
pub fn fock_flash_rate<T: Real>(space: &FockSpace, single: &[OperatorMatrix<T>]) -> Result<Vec<OperatorMatrix<T>>> {
    let dim = space.dim();
    let mut blocks = vec![DMatrix::from_element(dim, dim, creal(T::zero())); single.len()];
    for n in 1..=space.n_max() {
        let range = space.sector_range(n);
        for (r, op) in symmetric_flash_rate(space, single, n)?.into_iter().enumerate() {
            blocks[r].view_mut((range.start, range.start), (range.len(), range.len())).copy_from(&op.to_dense());
        }
    }
    Ok(blocks.into_iter().map(|b| OperatorMatrix::dense(b, OperatorKind::Positive)).collect())
}

/// `Λ(r) = (1/τ) Σ_{r'} g_σ(r - r') a†_{r'} a_{r'}` built from ladder operators.
pub fn smeared_number_density<T: Real>(space: &FockSpace, grid: &Grid<T>, sigma: T, tau: T) -> Result<Vec<OperatorMatrix<T>>> {
    if grid.sites() != space.sites() {
        return Err(Error::DimensionMismatch { expected: space.sites(), found: grid.sites() });
    }
    let numbers: Vec<CMatrix<T>> = (0..space.sites())
        .map(|s| {
            let a = space.annihilation::<T>(s);
            a.adjoint() * a
        })
        .collect();
    Ok((0..space.sites())
        .map(|r| {
            let mut m = DMatrix::from_element(space.dim(), space.dim(), creal(T::zero()));
            for (s, ns) in numbers.iter().enumerate() {
                m += ns * creal(periodic_gaussian(grid, r, s, sigma) / tau);
            }
            OperatorMatrix::dense(m, OperatorKind::Positive)
        })
        .collect())
}

/// Toy Hamiltonian: periodic nearest-neighbour hopping, on-site potential and
/// an optional pair term `g Σ_s (a†_s a†_{s+1} + h.c.)` that changes `N` by 2.
pub fn toy_hamiltonian<T: Real>(space: &FockSpace, hopping: T, onsite: &[T], pair: T) -> Result<CMatrix<T>> {
    let l = space.sites();
    if onsite.len() != l {
        return Err(Error::DimensionMismatch { expected: l, found: onsite.len() });
    }
    let a: Vec<CMatrix<T>> = (0..l).map(|s| space.annihilation(s)).collect();
    let mut h = DMatrix::from_element(space.dim(), space.dim(), creal(T::zero()));
    let bonds: Vec<(usize, usize)> = match l {
        1 => vec![],
        2 => vec![(0, 1)],
        _ => (0..l).map(|s| (s, (s + 1) % l)).collect(),
    };
    for &(s, t) in &bonds {
        let hop = a[s].adjoint() * &a[t];
        h -= (&hop + hop.adjoint()) * creal(hopping);
        if pair != T::zero() {
            let create = a[s].adjoint() * a[t].adjoint();
            h += (&create + create.adjoint()) * creal(pair);
        }
    }
    for (s, v) in onsite.iter().enumerate() {
        h += a[s].adjoint() * &a[s] * creal(*v);
    }
    Ok(h)
}

/// Flash model on the truncated Fock space with one flash type.
pub fn fock_flash_model<T: Real>(
    space: &FockSpace,
    grid: &Grid<T>,
    sigma: T,
    tau: T,
    hamiltonian: CMatrix<T>,
) -> Result<DenseFlashModel<T>> {
    let single = single_particle_rates(grid, sigma, tau);
    let rates = fock_flash_rate(space, &single)?;
    DenseFlashModel::new(hamiltonian, vec![rates], grid.cell_volume(), tau)
}

/// Largest operator-norm (spectral) difference between two families.
pub fn max_operator_distance<T: Real>(a: &[OperatorMatrix<T>], b: &[OperatorMatrix<T>]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| {
        let diff = x.to_dense() - y.to_dense();
        let sv = diff.singular_values();
        acc.max(sv.iter().fold(T::zero(), |m, v| m.max(*v)))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sector_dimensions() {
        let f = FockSpace::new(6, Statistics::Fermion, 3).unwrap();
        assert_eq!(f.sector_dims(), vec![1, 6, 15, 20]);
        let b = FockSpace::new(6, Statistics::Boson, 3).unwrap();
        assert_eq!(b.sector_dims(), vec![1, 6, 21, 56]);
        assert!(matches!(FockSpace::new(2, Statistics::Fermion, 3), Err(Error::EmptySubspace { .. })));
    }

    #[test]
    fn fermion_anticommutation() {
        let f = FockSpace::new(4, Statistics::Fermion, 4).unwrap();
        let a: Vec<CMatrix<f64>> = (0..4).map(|s| f.annihilation(s)).collect();
        for i in 0..4 {
            for j in 0..4 {
                let anti = &a[i] * a[j].adjoint() + a[j].adjoint() * &a[i];
                let expect = if i == j { DMatrix::identity(f.dim(), f.dim()) } else { DMatrix::zeros(f.dim(), f.dim()) };
                assert!((anti - expect).norm() < 1e-14);
                assert!((&a[i] * &a[j] + &a[j] * &a[i]).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn boson_commutation_below_truncation() {
        let b = FockSpace::new(3, Statistics::Boson, 3).unwrap();
        let a0: CMatrix<f64> = b.annihilation(0);
        let comm = &a0 * a0.adjoint() - a0.adjoint() * &a0;
        // [a, a†] = 1 except on the top sector where a† is cut off
        for i in b.sector_range(0).start..b.sector_range(2).end {
            assert!((comm[(i, i)].re - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn isometry_columns_orthonormal() {
        for stats in [Statistics::Fermion, Statistics::Boson] {
            let s = FockSpace::new(4, stats, 3).unwrap();
            for n in 1..=3 {
                let v: CMatrix<f64> = s.sector_isometry(n);
                let g = v.adjoint() * &v;
                assert!((g - DMatrix::identity(v.ncols(), v.ncols())).norm() < 1e-13);
            }
        }
    }

    #[test]
    fn slater_isometry_matches_ladder_construction() {
        // a†_{s1} a†_{s2} |0⟩ written in first quantization
        let f = FockSpace::new(4, Statistics::Fermion, 2).unwrap();
        let v: CMatrix<f64> = f.sector_isometry(2);
        let col = f.index_of(&[0, 1, 0, 1]).unwrap() - f.sector_range(2).start;
        let r = 1.0 / 2f64.sqrt();
        assert!((v[(4 + 3, col)].re - r).abs() < 1e-15);
        assert!((v[(3 * 4 + 1, col)].re + r).abs() < 1e-15);
        let vac = f.index_of(&[0, 0, 0, 0]).unwrap();
        let mut e = DVector::from_element(f.dim(), creal(0.0f64));
        e[vac] = creal(1.0);
        let state = f.creation::<f64>(1) * f.creation::<f64>(3) * e;
        assert!((state[f.index_of(&[0, 1, 0, 1]).unwrap()].re - 1.0).abs() < 1e-15);
    }
}
