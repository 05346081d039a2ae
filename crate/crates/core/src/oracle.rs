//! Exact time evolution for small lattices.
//!
//! States are dense amplitude vectors in the basis of `lattice::config_to_index`
//! (bit `i` set when `σ_i = −1`). The Hamiltonian is real in this basis, so
//! it is stored and applied as a real operator acting on complex vectors.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, Error, Result};
use crate::lattice::Lattice;
use crate::protocols::{FieldEvaluator, Protocol};
use crate::vmc::{Observable, ObservableSeries, ObservableSet};

pub const DEFAULT_CAP: usize = 14;
/// Above this size the Hamiltonian is only ever applied matrix-free.
pub const DENSE_LIMIT: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialState {
    /// `|+⟩^⊗N`
    #[default]
    Plus,
    /// All spins up.
    Ferro,
}

impl FromStr for InitialState {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plus" => Ok(Self::Plus),
            "ferro" => Ok(Self::Ferro),
            _ => Err(Error::Argument(format!("unknown initial state '{s}' (expected plus or ferro)"))),
        }
    }
}

impl std::fmt::Display for InitialState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Plus => "plus",
            Self::Ferro => "ferro",
        })
    }
}

impl InitialState {
    pub fn amplitude(&self, sigma: &[i8]) -> Complex64 {
        match self {
            Self::Plus => Complex64::new((0.5f64).powf(sigma.len() as f64 / 2.0), 0.0),
            Self::Ferro => Complex64::new(if sigma.iter().all(|&s| s == 1) { 1.0 } else { 0.0 }, 0.0),
        }
    }

    pub fn dense(&self, n: usize) -> DenseState {
        let dim = 1usize << n;
        let amplitudes = match self {
            Self::Plus => vec![Complex64::new((dim as f64).sqrt().recip(), 0.0); dim],
            Self::Ferro => {
                let mut v = vec![Complex64::new(0.0, 0.0); dim];
                v[0] = Complex64::new(1.0, 0.0);
                v
            }
        };
        DenseState { amplitudes, t: 0.0 }
    }

    /// Draws configurations from `|ψ₀|²`, which is a product distribution.
    pub fn sample<R: Rng>(&self, n: usize, count: usize, rng: &mut R) -> Vec<Vec<i8>> {
        (0..count)
            .map(|_| match self {
                Self::Plus => (0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect(),
                Self::Ferro => vec![1; n],
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseState {
    pub amplitudes: Vec<Complex64>,
    pub t: f64,
}

impl DenseState {
    pub fn norm(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn overlap(&self, other: &DenseState) -> Complex64 {
        self.amplitudes.iter().zip(&other.amplitudes).map(|(a, b)| a.conj() * b).sum()
    }

    pub fn fidelity(&self, other: &DenseState) -> f64 {
        self.overlap(other).norm_sqr() / (self.norm() * other.norm()).powi(2)
    }
}

/// Diagonal pieces of the Hamiltonian, tabulated per basis index.
#[derive(Clone, Debug)]
pub struct SpinTables {
    pub n: usize,
    /// `Σ_<ij> σ_i σ_j`
    pub bond: Vec<f64>,
    /// `Σ_i σ_i`
    pub mag: Vec<f64>,
}

impl SpinTables {
    pub fn new(lat: &Lattice, cap: usize) -> Result<Self> {
        if lat.n > cap {
            bail_arg!("exact evolution of {} sites exceeds the cap of {cap}", lat.n);
        }
        let dim = 1usize << lat.n;
        let mut bond = vec![0.0; dim];
        let mut mag = vec![0.0; dim];
        for idx in 0..dim {
            mag[idx] = lat.n as f64 - 2.0 * idx.count_ones() as f64;
            bond[idx] = lat
                .bonds
                .iter()
                .map(|&(a, b)| if (idx >> a) & 1 == (idx >> b) & 1 { 1.0 } else { -1.0 })
                .sum();
        }
        Ok(Self { n: lat.n, bond, mag })
    }

    pub fn dim(&self) -> usize {
        self.bond.len()
    }

    /// `out = H ψ` with `H = J Σ ZZ + h_x Σ X + h_z Σ Z`.
    pub fn apply(&self, j: f64, hx: f64, hz: f64, psi: &[Complex64], out: &mut [Complex64]) {
        for idx in 0..psi.len() {
            let mut acc = psi[idx] * (j * self.bond[idx] + hz * self.mag[idx]);
            if hx != 0.0 {
                let mut flips = Complex64::new(0.0, 0.0);
                for k in 0..self.n {
                    flips += psi[idx ^ (1 << k)];
                }
                acc += flips * hx;
            }
            out[idx] = acc;
        }
    }
}

/// Dense `H` for `N ≤ 10`; larger lattices must use `SpinTables::apply`.
pub fn build_dense_hamiltonian(lat: &Lattice, j: f64, hx: f64, hz: f64) -> Result<DMatrix<f64>> {
    if lat.n > DENSE_LIMIT {
        bail_arg!("dense Hamiltonian for {} sites refused (limit {DENSE_LIMIT}); use the matrix-free applier", lat.n);
    }
    let tab = SpinTables::new(lat, DENSE_LIMIT)?;
    let dim = tab.dim();
    let mut h = DMatrix::zeros(dim, dim);
    for idx in 0..dim {
        h[(idx, idx)] = j * tab.bond[idx] + hz * tab.mag[idx];
        for k in 0..lat.n {
            h[(idx ^ (1 << k), idx)] += hx;
        }
    }
    Ok(h)
}

/// `exp(−iHt) ψ` for constant `H` by eigendecomposition.
pub fn evolve_constant(h: &DMatrix<f64>, psi: &DenseState, t: f64) -> DenseState {
    let eig = SymmetricEigen::new(h.clone());
    let u = &eig.eigenvectors;
    let re = DVector::from_iterator(psi.amplitudes.len(), psi.amplitudes.iter().map(|a| a.re));
    let im = DVector::from_iterator(psi.amplitudes.len(), psi.amplitudes.iter().map(|a| a.im));
    let (cr, ci) = (u.tr_mul(&re), u.tr_mul(&im));
    let mut rot_re = DVector::zeros(cr.len());
    let mut rot_im = DVector::zeros(cr.len());
    for k in 0..cr.len() {
        let ph = Complex64::new(cr[k], ci[k]) * Complex64::from_polar(1.0, -eig.eigenvalues[k] * (t - psi.t));
        rot_re[k] = ph.re;
        rot_im[k] = ph.im;
    }
    let (r, i) = (u * rot_re, u * rot_im);
    DenseState { amplitudes: r.iter().zip(i.iter()).map(|(&a, &b)| Complex64::new(a, b)).collect(), t }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PropagateOptions {
    pub tol: f64,
    pub j: f64,
    pub cap: usize,
}

impl Default for PropagateOptions {
    fn default() -> Self {
        Self { tol: 1e-9, j: 1.0, cap: DEFAULT_CAP }
    }
}

// Dormand–Prince 5(4) tableau
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] =
    [5179.0 / 57600.0, 0.0, 7571.0 / 16695.0, 393.0 / 640.0, -92097.0 / 339200.0, 187.0 / 2100.0, 1.0 / 40.0];

struct Integrator<'a> {
    tab: &'a SpinTables,
    fields: &'a FieldEvaluator,
    j: f64,
}

impl Integrator<'_> {
    /// `dψ/dt = −i H(t) ψ`
    fn rhs(&self, t: f64, psi: &[Complex64], out: &mut [Complex64]) {
        let (hx, hz) = self.fields.eval(t);
        self.tab.apply(self.j, hx, hz, psi, out);
        for z in out.iter_mut() {
            *z = Complex64::new(z.im, -z.re);
        }
    }

    /// Advances `psi` from `t0` to `t1` (either direction).
    fn advance(&self, psi: &mut Vec<Complex64>, t0: f64, t1: f64, tol: f64, h: &mut f64) -> Result<()> {
        let dim = psi.len();
        let span = t1 - t0;
        if span == 0.0 {
            return Ok(());
        }
        let dir = span.signum();
        let atol = tol * 1e-3;
        let h_min = 1e-14 * span.abs().max(1.0);
        let mut k: Vec<Vec<Complex64>> = vec![vec![Complex64::new(0.0, 0.0); dim]; 7];
        let mut stage = vec![Complex64::new(0.0, 0.0); dim];
        let mut y5 = vec![Complex64::new(0.0, 0.0); dim];
        let mut t = t0;
        while (t1 - t) * dir > 0.0 {
            let mut step = h.abs().min((t1 - t).abs());
            let last = step == (t1 - t).abs();
            if step < h_min {
                return Err(Error::Integration { t, reason: format!("step size {step:.3e} underflowed") });
            }
            step *= dir;
            self.rhs(t, psi, &mut k[0]);
            for s in 1..7 {
                for i in 0..dim {
                    let mut acc = psi[i];
                    for (r, kr) in k.iter().enumerate().take(s) {
                        if A[s][r] != 0.0 {
                            acc += kr[i] * (step * A[s][r]);
                        }
                    }
                    stage[i] = acc;
                }
                let (_, tail) = k.split_at_mut(s);
                self.rhs(t + C[s] * step, &stage, &mut tail[0]);
            }
            let mut err_sq = 0.0;
            for i in 0..dim {
                let mut hi = psi[i];
                let mut lo = psi[i];
                for s in 0..7 {
                    hi += k[s][i] * (step * B5[s]);
                    lo += k[s][i] * (step * B4[s]);
                }
                let sc = atol + tol * psi[i].norm().max(hi.norm());
                err_sq += ((hi - lo).norm() / sc).powi(2);
                y5[i] = hi;
            }
            let err = (err_sq / dim as f64).sqrt();
            if !err.is_finite() {
                return Err(Error::Integration { t, reason: "non-finite error estimate".into() });
            }
            if err <= 1.0 {
                t = if last { t1 } else { t + step };
                std::mem::swap(psi, &mut y5);
            }
            let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            if !(last && err <= 1.0) {
                *h = step.abs() * factor;
            }
        }
        Ok(())
    }
}

/// Integrates `i∂_t ψ = H(t) ψ` from `initial.t` to each output time in turn.
/// Output times must be monotone in one direction away from `initial.t`.
pub fn propagate(
    lat: &Lattice,
    initial: &DenseState,
    protocol: &Protocol,
    output_times: &[f64],
    opts: PropagateOptions,
) -> Result<Vec<DenseState>> {
    let tab = SpinTables::new(lat, opts.cap)?;
    if initial.amplitudes.len() != tab.dim() {
        bail_arg!("initial state has {} amplitudes, expected {}", initial.amplitudes.len(), tab.dim());
    }
    if (initial.norm() - 1.0).abs() > 1e-10 {
        bail_arg!("initial state is not normalised (norm {})", initial.norm());
    }
    if !(opts.tol > 0.0) {
        bail_arg!("tolerance must be positive");
    }
    let fields = protocol.evaluator();
    let integ = Integrator { tab: &tab, fields: &fields, j: opts.j };
    let mut psi = initial.amplitudes.clone();
    let mut t = initial.t;
    let mut h = 1e-3;
    let mut out = Vec::with_capacity(output_times.len());
    let mut drift: f64 = 0.0;
    let mut dir = 0.0;
    for &to in output_times {
        let d = (to - t).signum();
        if d != 0.0 {
            if dir != 0.0 && d != dir {
                bail_arg!("output times must be monotone");
            }
            dir = d;
        }
        integ.advance(&mut psi, t, to, opts.tol, &mut h)?;
        t = to;
        let st = DenseState { amplitudes: psi.clone(), t };
        drift = drift.max((st.norm() - 1.0).abs());
        out.push(st);
    }
    if drift > 1e-8 {
        log::warn!("norm drift {drift:.3e} during exact propagation");
    } else {
        log::debug!("norm drift {drift:.3e}");
    }
    Ok(out)
}

/// `⟨X⟩`, `⟨ZZ⟩`, `⟨Z⟩` and `E = ⟨H⟩/N` as exact quadratic forms.
pub fn exact_observables(states: &[DenseState], lat: &Lattice, protocol: &Protocol, j: f64) -> Result<ObservableSet> {
    let tab = SpinTables::new(lat, DEFAULT_CAP)?;
    let fields = protocol.evaluator();
    let n = lat.n as f64;
    let nb = lat.n_bonds().max(1) as f64;
    let mut x = Vec::new();
    let mut zz = Vec::new();
    let mut z = Vec::new();
    let mut e = Vec::new();
    let mut flip = vec![Complex64::new(0.0, 0.0); tab.dim()];
    for st in states {
        let psi = &st.amplitudes;
        if psi.len() != tab.dim() {
            bail_arg!("state dimension {} does not match lattice", psi.len());
        }
        let norm2: f64 = psi.iter().map(|a| a.norm_sqr()).sum();
        let w: Vec<f64> = psi.iter().map(|a| a.norm_sqr() / norm2).collect();
        let zz_v: f64 = w.iter().zip(&tab.bond).map(|(p, b)| p * b).sum::<f64>();
        let z_v: f64 = w.iter().zip(&tab.mag).map(|(p, m)| p * m).sum::<f64>();
        tab.apply(0.0, 1.0, 0.0, psi, &mut flip);
        let xq: Complex64 = psi.iter().zip(&flip).map(|(a, b)| a.conj() * b).sum::<Complex64>() / norm2;
        let (hx, hz) = fields.eval(st.t);
        x.push(xq.re / n);
        zz.push(zz_v / nb);
        z.push(z_v / n);
        e.push((j * zz_v + hx * xq.re + hz * z_v) / n);
    }
    let times: Vec<f64> = states.iter().map(|s| s.t).collect();
    let series = |obs, mean: Vec<f64>| ObservableSeries {
        times: times.clone(),
        stderr: vec![0.0; mean.len()],
        mean,
        n_samples: 0,
        observable: obs,
    };
    Ok(ObservableSet {
        x: series(Observable::X, x),
        zz: series(Observable::ZZ, zz),
        z: series(Observable::Z, z),
        e: series(Observable::E, e),
        imag: None,
    })
}

/// Propagates the chosen initial state and reports exact observables on `times`.
pub fn exact_trajectory(
    lat: &Lattice,
    init: InitialState,
    protocol: &Protocol,
    times: &[f64],
    opts: PropagateOptions,
) -> Result<ObservableSet> {
    let states = propagate(lat, &init.dense(lat.n), protocol, times, opts)?;
    exact_observables(&states, lat, protocol, opts.j)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_lattice, config_to_index, Ordering};
    use crate::protocols::{
        make_gaussian_pulse, sample_fourier_protocol, ClosedForm, FourierProtocolSpec, Protocol, TimeGrid,
    };

    fn chain(n: usize) -> Lattice {
        build_lattice(n, 1, Ordering::Raster).unwrap()
    }

    fn constant(hx: f64, hz: f64) -> Protocol {
        Protocol::from_closed_form(TimeGrid::new(1.0, 100).unwrap(), ClosedForm::Constant(hx), ClosedForm::Constant(hz))
    }

    #[test]
    fn small_hamiltonians() {
        let h = build_dense_hamiltonian(&chain(1), 0.7, 1.0, 0.0).unwrap();
        assert_eq!(h, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        let h = build_dense_hamiltonian(&chain(2), 1.0, 0.0, 0.0).unwrap();
        assert_eq!(h, DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0, -1.0, 1.0])));
        let lat = build_lattice(2, 2, Ordering::Raster).unwrap();
        let h = build_dense_hamiltonian(&lat, 1.0, 0.37, -0.81).unwrap();
        assert_eq!((&h - h.transpose()).abs().max(), 0.0);
        assert!(build_dense_hamiltonian(&build_lattice(11, 1, Ordering::Raster).unwrap(), 1.0, 1.0, 0.0).is_err());
        assert!(SpinTables::new(&build_lattice(5, 3, Ordering::Raster).unwrap(), DEFAULT_CAP).is_err());
    }

    #[test]
    fn diagonal_matches_lattice_energy() {
        let lat = build_lattice(3, 2, Ordering::Snake).unwrap();
        let h = build_dense_hamiltonian(&lat, 0.9, 0.0, 0.3).unwrap();
        for c in crate::lattice::enumerate_configs(lat.n) {
            let i = config_to_index(&c);
            assert!((h[(i, i)] - lat.diagonal_energy(0.9, &c, 0.3).unwrap()).abs() < 1e-14);
        }
    }

    #[test]
    fn matrix_free_matches_dense() {
        let lat = build_lattice(3, 3, Ordering::Raster).unwrap();
        let h = build_dense_hamiltonian(&lat, 1.1, -0.4, 0.25).unwrap();
        let tab = SpinTables::new(&lat, DEFAULT_CAP).unwrap();
        let psi: Vec<Complex64> =
            (0..tab.dim()).map(|i| Complex64::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos())).collect();
        let mut out = vec![Complex64::new(0.0, 0.0); tab.dim()];
        tab.apply(1.1, -0.4, 0.25, &psi, &mut out);
        for r in 0..tab.dim() {
            let expect: Complex64 = (0..tab.dim()).map(|c| psi[c] * h[(r, c)]).sum();
            assert!((expect - out[r]).norm() < 1e-12);
        }
    }

    #[test]
    fn diagonal_evolution_is_a_phase() {
        let lat = build_lattice(2, 2, Ordering::Raster).unwrap();
        let sigma = [1i8, -1, -1, 1];
        let idx = config_to_index(&sigma);
        let mut amps = vec![Complex64::new(0.0, 0.0); 16];
        amps[idx] = Complex64::new(1.0, 0.0);
        let p = Protocol::from_closed_form(
            TimeGrid::new(1.0, 100).unwrap(),
            ClosedForm::Constant(0.0),
            ClosedForm::Constant(0.0),
        );
        let out = propagate(&lat, &DenseState { amplitudes: amps, t: 0.0 }, &p, &[0.5, 1.0], PropagateOptions::default())
            .unwrap();
        let e = lat.diagonal_energy(1.0, &sigma, 0.0).unwrap();
        for st in &out {
            let expect = Complex64::from_polar(1.0, -e * st.t);
            assert!((st.amplitudes[idx] - expect).norm() < 1e-8);
        }
    }

    #[test]
    fn constant_hamiltonian_matches_eigen_route() {
        let lat = build_lattice(2, 2, Ordering::Raster).unwrap();
        let h = build_dense_hamiltonian(&lat, 1.0, 0.8, 0.3).unwrap();
        let psi0 = InitialState::Plus.dense(4);
        let out = propagate(&lat, &psi0, &constant(0.8, 0.3), &[1.0], PropagateOptions::default()).unwrap();
        let exact = evolve_constant(&h, &psi0, 1.0);
        assert!(1.0 - out[0].fidelity(&exact) < 1e-10);
        let max_diff = out[0].amplitudes.iter().zip(&exact.amplitudes).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(max_diff < 1e-8, "{max_diff}");
    }

    #[test]
    fn norm_energy_and_reversal() {
        let lat = build_lattice(2, 2, Ordering::Raster).unwrap();
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let p = sample_fourier_protocol(&FourierProtocolSpec::default(), grid, 5).unwrap();
        let times = grid.points();
        let psi0 = InitialState::Plus.dense(4);
        let states = propagate(&lat, &psi0, &p, &times, PropagateOptions::default()).unwrap();
        let drift = states.iter().map(|s| (s.norm() - 1.0).abs()).fold(0.0, f64::max);
        assert!(drift < 1e-8, "{drift}");

        let back = propagate(&lat, states.last().unwrap(), &p, &[0.0], PropagateOptions::default()).unwrap();
        assert!(1.0 - back[0].fidelity(&psi0) < 1e-6);

        let c = constant(0.6, 0.2);
        let states = propagate(&lat, &psi0, &c, &times, PropagateOptions::default()).unwrap();
        let obs = exact_observables(&states, &lat, &c, 1.0).unwrap();
        let e0 = obs.e.mean[0];
        assert!(obs.e.mean.iter().all(|e| (e - e0).abs() < 1e-8));
    }

    #[test]
    fn initial_state_observables() {
        let lat = build_lattice(2, 2, Ordering::Raster).unwrap();
        let c = constant(0.5, 0.25);
        let plus = exact_observables(&[InitialState::Plus.dense(4)], &lat, &c, 1.0).unwrap();
        assert!((plus.x.mean[0] - 1.0).abs() < 1e-14);
        assert!(plus.zz.mean[0].abs() < 1e-14);
        assert!((plus.e.mean[0] - 0.5).abs() < 1e-14);
        let ferro = exact_observables(&[InitialState::Ferro.dense(4)], &lat, &c, 1.0).unwrap();
        assert_eq!(ferro.zz.mean[0], 1.0);
        assert_eq!(ferro.x.mean[0], 0.0);
        // J N_b / N + h_z
        assert!((ferro.e.mean[0] - (4.0 / 4.0 + 0.25)).abs() < 1e-14);
    }

    #[test]
    fn tolerance_self_convergence() {
        let lat = build_lattice(2, 2, Ordering::Raster).unwrap();
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let p = make_gaussian_pulse(grid, 0.8, 0.5, 0.1, 1.0).unwrap();
        let times = grid.points();
        let a = exact_trajectory(&lat, InitialState::Plus, &p, &times, PropagateOptions::default()).unwrap();
        let opts = PropagateOptions { tol: 5e-10, ..Default::default() };
        let b = exact_trajectory(&lat, InitialState::Plus, &p, &times, opts).unwrap();
        for (s, u) in [(&a.x, &b.x), (&a.zz, &b.zz), (&a.e, &b.e)] {
            let d = s.mean.iter().zip(&u.mean).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(d < 1e-8, "{d}");
        }
    }

    #[test]
    fn plus_state_sampling_is_uniform() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let s = InitialState::Plus.sample(4, 20000, &mut rng);
        let up = s.iter().flatten().filter(|&&x| x == 1).count() as f64 / 80000.0;
        assert!((up - 0.5).abs() < 0.01);
        assert!(InitialState::Ferro.sample(3, 5, &mut rng).iter().all(|c| c == &vec![1, 1, 1]));
    }
}
