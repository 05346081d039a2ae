//! Square-lattice geometry and the driven transverse-field Ising Hamiltonian
//!
//! `H(t) = J Σ_<ij> Z_i Z_j + h_x(t) Σ_i X_i + h_z(t) Σ_i Z_i`
//!
//! Sites are numbered by their autoregressive position, so spin
//! configurations, bonds and basis indices all share one indexing.

use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ordering {
    #[default]
    Raster,
    Snake,
}

impl std::str::FromStr for Ordering {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raster" => Ok(Ordering::Raster),
            "snake" => Ok(Ordering::Snake),
            other => Err(crate::Error::Argument(format!("unknown ordering '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lattice {
    pub lx: usize,
    pub ly: usize,
    pub n: usize,
    /// Nearest-neighbour pairs `(i, j)` with `i < j`, in position indices.
    pub bonds: Vec<(usize, usize)>,
    /// `order[y * lx + x]` is the autoregressive position of site `(x, y)`.
    pub order: Vec<usize>,
    pub ordering: Ordering,
}

pub fn build_lattice(lx: usize, ly: usize, ordering: Ordering) -> Result<Lattice> {
    if lx == 0 || ly == 0 {
        bail_arg!("lattice dimensions must be positive, got {lx}x{ly}");
    }
    let n = lx * ly;
    let order: Vec<usize> = (0..n)
        .map(|s| {
            let (x, y) = (s % lx, s / lx);
            match ordering {
                Ordering::Raster => s,
                Ordering::Snake if y % 2 == 1 => y * lx + (lx - 1 - x),
                Ordering::Snake => s,
            }
        })
        .collect();

    let pos = |x: usize, y: usize| order[y * lx + x];
    let mut bonds = Vec::with_capacity(lx * (ly - 1) + ly * (lx - 1));
    for y in 0..ly {
        for x in 0..lx - 1 {
            bonds.push(sorted(pos(x, y), pos(x + 1, y)));
        }
    }
    for y in 0..ly - 1 {
        for x in 0..lx {
            bonds.push(sorted(pos(x, y), pos(x, y + 1)));
        }
    }
    Ok(Lattice { lx, ly, n, bonds, order, ordering })
}

fn sorted(a: usize, b: usize) -> (usize, usize) {
    if a < b { (a, b) } else { (b, a) }
}

impl Lattice {
    pub fn n_bonds(&self) -> usize {
        self.bonds.len()
    }

    pub fn check(&self, sigma: &[i8]) -> Result<()> {
        if sigma.len() != self.n {
            bail_arg!("spin configuration has length {}, lattice has {} sites", sigma.len(), self.n);
        }
        if let Some(s) = sigma.iter().find(|&&s| s != 1 && s != -1) {
            bail_arg!("spin entries must be +1 or -1, found {s}");
        }
        Ok(())
    }

    /// `Σ_<ij> σ_i σ_j`
    pub fn bond_sum(&self, sigma: &[i8]) -> f64 {
        self.bonds.iter().map(|&(i, j)| (sigma[i] * sigma[j]) as f64).sum()
    }

    /// `J Σ_<ij> σ_i σ_j + h_z Σ_i σ_i`
    pub fn diagonal_energy(&self, j: f64, sigma: &[i8], hz: f64) -> Result<f64> {
        self.check(sigma)?;
        Ok(self.diagonal_energy_unchecked(j, sigma, hz))
    }

    pub fn diagonal_energy_unchecked(&self, j: f64, sigma: &[i8], hz: f64) -> f64 {
        let mag: i32 = sigma.iter().map(|&s| s as i32).sum();
        j * self.bond_sum(sigma) + hz * mag as f64
    }

    /// Configurations connected to `sigma` by the transverse field: one per
    /// single-spin flip, each with coefficient 1 (the caller applies `h_x`).
    pub fn offdiagonal_connections(&self, sigma: &[i8]) -> Result<Vec<(Vec<i8>, f64)>> {
        self.check(sigma)?;
        Ok((0..self.n)
            .map(|i| {
                let mut s = sigma.to_vec();
                s[i] = -s[i];
                (s, 1.0)
            })
            .collect())
    }
}

/// Basis index with bit `i` set when `σ_i = −1`; the all-up state is 0.
pub fn config_to_index(sigma: &[i8]) -> usize {
    sigma.iter().enumerate().fold(0, |acc, (i, &s)| if s < 0 { acc | (1 << i) } else { acc })
}

pub fn index_to_config(index: usize, n: usize) -> Vec<i8> {
    (0..n).map(|i| if index >> i & 1 == 1 { -1 } else { 1 }).collect()
}

/// All `2^n` configurations in basis-index order.
pub fn enumerate_configs(n: usize) -> Vec<Vec<i8>> {
    (0..1usize << n).map(|k| index_to_config(k, n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_lattices() {
        let l = build_lattice(2, 2, Ordering::Raster).unwrap();
        assert_eq!(l.n, 4);
        assert_eq!(l.bonds, vec![(0, 1), (2, 3), (0, 2), (1, 3)]);

        let l = build_lattice(4, 4, Ordering::Raster).unwrap();
        assert_eq!((l.n, l.n_bonds()), (16, 24));

        let l = build_lattice(1, 3, Ordering::Raster).unwrap();
        assert_eq!(l.bonds, vec![(0, 1), (1, 2)]);

        assert!(build_lattice(0, 3, Ordering::Raster).is_err());
    }

    #[test]
    fn diagonal_energy_examples() {
        let l = build_lattice(2, 2, Ordering::Raster).unwrap();
        assert_eq!(l.diagonal_energy(1.0, &[1, 1, 1, 1], 0.0).unwrap(), 4.0);
        assert_eq!(l.diagonal_energy(1.0, &[1, -1, -1, 1], 0.0).unwrap(), -4.0);
        assert_eq!(l.diagonal_energy(1.0, &[1, 1, 1, 1], 0.5).unwrap(), 6.0);
        assert!(l.diagonal_energy(1.0, &[1, 1, 1], 0.0).is_err());
        assert!(l.diagonal_energy(1.0, &[1, 0, 1, 1], 0.0).is_err());
    }

    #[test]
    fn single_flip_connections() {
        let l = build_lattice(2, 2, Ordering::Raster).unwrap();
        let c = l.offdiagonal_connections(&[1, 1, 1, 1]).unwrap();
        assert_eq!(c.len(), 4);
        for (s, w) in &c {
            assert_eq!(*w, 1.0);
            assert_eq!(s.iter().filter(|&&x| x == -1).count(), 1);
        }
        let chain = build_lattice(1, 1, Ordering::Raster).unwrap();
        assert_eq!(chain.offdiagonal_connections(&[-1]).unwrap(), vec![(vec![1], 1.0)]);
    }

    #[test]
    fn snake_keeps_neighbours_adjacent_along_rows() {
        let l = build_lattice(3, 2, Ordering::Snake).unwrap();
        assert_eq!(l.order, vec![0, 1, 2, 5, 4, 3]);
        let mut perm = l.order.clone();
        perm.sort();
        assert_eq!(perm, (0..6).collect::<Vec<_>>());
        assert!(l.bonds.contains(&(2, 3)));
        assert_eq!(l.n_bonds(), 7);
    }

    // Dense row of H by brute force over all basis states, independent of
    // `offdiagonal_connections`.
    fn dense_row(l: &Lattice, j: f64, hx: f64, hz: f64, k: usize) -> Vec<f64> {
        let dim = 1 << l.n;
        let sk = index_to_config(k, l.n);
        (0..dim)
            .map(|m| {
                let sm = index_to_config(m, l.n);
                let diff = sk.iter().zip(&sm).filter(|(a, b)| a != b).count();
                match diff {
                    0 => {
                        let zz: f64 = l.bonds.iter().map(|&(a, b)| (sk[a] * sk[b]) as f64).sum();
                        j * zz + hz * sk.iter().map(|&s| s as f64).sum::<f64>()
                    }
                    1 => hx,
                    _ => 0.0,
                }
            })
            .collect()
    }

    proptest! {
        #[test]
        fn bond_count_formula(lx in 1usize..7, ly in 1usize..7, snake in any::<bool>()) {
            let ord = if snake { Ordering::Snake } else { Ordering::Raster };
            let l = build_lattice(lx, ly, ord).unwrap();
            prop_assert_eq!(l.n, lx * ly);
            prop_assert_eq!(l.n_bonds(), lx * (ly - 1) + ly * (lx - 1));
            let mut b = l.bonds.clone();
            b.sort();
            b.dedup();
            prop_assert_eq!(b.len(), l.n_bonds());
            prop_assert!(l.bonds.iter().all(|&(i, j)| i < j && j < l.n));
        }

        #[test]
        fn dense_row_matches_sparse_action(
            lx in 1usize..4, ly in 1usize..4, k in 0usize..512,
            j in -2.0f64..2.0, hx in -2.0f64..2.0, hz in -2.0f64..2.0,
        ) {
            let l = build_lattice(lx, ly, Ordering::Raster).unwrap();
            let k = k % (1 << l.n);
            let sigma = index_to_config(k, l.n);
            let mut sparse = vec![0.0; 1 << l.n];
            sparse[k] = l.diagonal_energy(j, &sigma, hz).unwrap();
            for (s, w) in l.offdiagonal_connections(&sigma).unwrap() {
                sparse[config_to_index(&s)] += hx * w;
            }
            let dense = dense_row(&l, j, hx, hz, k);
            for (a, b) in sparse.iter().zip(&dense) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn spin_flip_symmetry_without_longitudinal_field(k in 0usize..512, j in -2.0f64..2.0) {
            let l = build_lattice(3, 3, Ordering::Raster).unwrap();
            let s = index_to_config(k, 9);
            let flipped: Vec<i8> = s.iter().map(|&x| -x).collect();
            prop_assert_eq!(
                l.diagonal_energy(j, &s, 0.0).unwrap(),
                l.diagonal_energy(j, &flipped, 0.0).unwrap()
            );
        }
    }
}
