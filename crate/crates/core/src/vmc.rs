//! Local estimators and observable expectation values.
//!
//! Amplitude ratios are always formed as `exp(log ψ(σ') − log ψ(σ))`. The
//! real part of the log-ratio is clamped at ±30; each clamp is counted and
//! logged.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::ansatz;
use crate::error::{bail_arg, Error, Result};
use crate::lattice::enumerate_configs;
use crate::model::Model;
use crate::neural_operator::{context_tokens, context_tokens_many, dlogpsi_dt};
use crate::protocols::Protocol;
use crate::tape::Mat;
use crate::workers::{par_map, substream};

pub const LOG_RATIO_CLAMP: f64 = 30.0;
/// Largest lattice for which exact enumeration is offered.
pub const ENUMERATION_LIMIT: usize = 12;
const CHUNK: usize = 512;

static CLAMPED: AtomicU64 = AtomicU64::new(0);

/// Number of log-ratios clamped since process start.
pub fn clamp_events() -> u64 {
    CLAMPED.load(Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Observable {
    X,
    ZZ,
    Z,
    E,
}

impl Observable {
    pub const ALL: [Observable; 4] = [Observable::X, Observable::ZZ, Observable::Z, Observable::E];

    pub fn name(&self) -> &'static str {
        match self {
            Observable::X => "X",
            Observable::ZZ => "ZZ",
            Observable::Z => "Z",
            Observable::E => "E",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalEstimate {
    pub value: Complex64,
    pub config: Vec<i8>,
    pub t: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservableSeries {
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    /// 0 for exact (enumerated or dense) values.
    pub n_samples: usize,
    pub observable: Observable,
}

/// Imaginary parts of the sampled `⟨X⟩` and `E` estimators; both should
/// vanish within a few standard errors.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagDiagnostics {
    pub x_mean: Vec<f64>,
    pub x_stderr: Vec<f64>,
    pub e_mean: Vec<f64>,
    pub e_stderr: Vec<f64>,
}

impl ImagDiagnostics {
    /// Largest `|mean| / stderr` over times and both estimators.
    pub fn worst_ratio(&self) -> f64 {
        let r = |m: &[f64], s: &[f64]| {
            m.iter().zip(s).map(|(m, s)| if *s > 0.0 { m.abs() / s } else { 0.0 }).fold(0.0, f64::max)
        };
        r(&self.x_mean, &self.x_stderr).max(r(&self.e_mean, &self.e_stderr))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservableSet {
    pub x: ObservableSeries,
    pub zz: ObservableSeries,
    pub z: ObservableSeries,
    pub e: ObservableSeries,
    pub imag: Option<ImagDiagnostics>,
}

impl ObservableSet {
    pub fn get(&self, o: Observable) -> &ObservableSeries {
        match o {
            Observable::X => &self.x,
            Observable::ZZ => &self.zz,
            Observable::Z => &self.z,
            Observable::E => &self.e,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Estimator {
    Sampled { n_samples: usize, seed: u64 },
    /// Sum over all `2^N` configurations weighted by `p(σ)`.
    Exact,
}

/// `log ψ = log_p/2 + i·phase` for each configuration. Duplicates are
/// evaluated once.
pub fn log_psi_values(model: &Model, configs: &[Vec<i8>], context: &Mat) -> Result<Vec<Complex64>> {
    let mut index: BTreeMap<&[i8], usize> = BTreeMap::new();
    let mut unique: Vec<Vec<i8>> = Vec::new();
    let slots: Vec<usize> = configs
        .iter()
        .map(|c| {
            *index.entry(c.as_slice()).or_insert_with(|| {
                unique.push(c.clone());
                unique.len() - 1
            })
        })
        .collect();
    let mut values = Vec::with_capacity(unique.len());
    for chunk in unique.chunks(CHUNK) {
        values.extend(ansatz::forward(model, chunk, context)?.into_iter().map(|v| Complex64::new(0.5 * v.log_p, v.phase)));
    }
    Ok(slots.into_iter().map(|s| values[s]).collect())
}

/// `ψ(σ')/ψ(σ)` from log values, clamping the real part of the difference.
pub fn amplitude_ratio(log_num: Complex64, log_den: Complex64) -> Complex64 {
    let mut d = log_num - log_den;
    if d.re.abs() > LOG_RATIO_CLAMP || d.re.is_nan() {
        let n = CLAMPED.fetch_add(1, Ordering::Relaxed) + 1;
        log::warn!("log amplitude ratio {:.3} clamped to ±{LOG_RATIO_CLAMP} ({n} so far)", d.re);
        d.re = if d.re.is_nan() { -LOG_RATIO_CLAMP } else { d.re.clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP) };
    }
    d.exp()
}

/// Per-configuration local quantities at fixed fields.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalTerms {
    pub log_psi: Vec<Complex64>,
    /// `Σ_i ψ(flip_i σ)/ψ(σ)`
    pub flip_sum: Vec<Complex64>,
    /// `Σ_<ij> σ_i σ_j`
    pub bond: Vec<f64>,
    /// `Σ_i σ_i`
    pub mag: Vec<f64>,
}

impl LocalTerms {
    pub fn e_loc(&self, i: usize, j: f64, hx: f64, hz: f64) -> Complex64 {
        self.flip_sum[i] * hx + (j * self.bond[i] + hz * self.mag[i])
    }
}

pub fn local_terms(model: &Model, configs: &[Vec<i8>], context: &Mat) -> Result<LocalTerms> {
    let lat = &model.lattice;
    for c in configs {
        lat.check(c)?;
    }
    let n = lat.n;
    let mut all = Vec::with_capacity(configs.len() * (n + 1));
    for c in configs {
        all.push(c.clone());
        for (f, _) in lat.offdiagonal_connections(c)? {
            all.push(f);
        }
    }
    let lp = log_psi_values(model, &all, context)?;
    let mut out = LocalTerms { log_psi: vec![], flip_sum: vec![], bond: vec![], mag: vec![] };
    for (b, c) in configs.iter().enumerate() {
        let base = lp[b * (n + 1)];
        let s: Complex64 = (1..=n).map(|k| amplitude_ratio(lp[b * (n + 1) + k], base)).sum();
        out.log_psi.push(base);
        out.flip_sum.push(s);
        out.bond.push(lat.bond_sum(c));
        out.mag.push(c.iter().map(|&s| s as f64).sum());
    }
    Ok(out)
}

/// `E_loc(σ, t) = ⟨σ|H(t)|ψ⟩ / ⟨σ|ψ⟩`.
pub fn local_energy(model: &Model, sigma: &[i8], protocol: &Protocol, t: f64, j: f64) -> Result<Complex64> {
    let tok = context_tokens(model, protocol, t)?;
    let (hx, hz) = protocol.fields_at(t);
    let terms = local_terms(model, &[sigma.to_vec()], &tok.m)?;
    Ok(terms.e_loc(0, j, hx, hz))
}

/// `L_loc = i ∂_t log ψ − E_loc` for a batch of configurations.
pub fn local_residuals(
    model: &Model,
    configs: &[Vec<i8>],
    protocol: &Protocol,
    t: f64,
    j: f64,
) -> Result<Vec<LocalEstimate>> {
    let tok = context_tokens(model, protocol, t)?;
    let (hx, hz) = protocol.fields_at(t);
    let terms = local_terms(model, configs, &tok.m)?;
    let dt = dlogpsi_dt(model, configs, protocol, t)?;
    let out: Vec<LocalEstimate> = configs
        .iter()
        .enumerate()
        .map(|(i, c)| LocalEstimate {
            value: Complex64::i() * dt[i] - terms.e_loc(i, j, hx, hz),
            config: c.clone(),
            t,
        })
        .collect();
    if out.iter().any(|e| !e.value.is_finite()) {
        return Err(Error::Numeric(format!("non-finite local residual at t={t}")));
    }
    Ok(out)
}

pub fn local_residual(model: &Model, sigma: &[i8], protocol: &Protocol, t: f64, j: f64) -> Result<Complex64> {
    Ok(local_residuals(model, &[sigma.to_vec()], protocol, t, j)?[0].value)
}

/// Weighted mean and (for sampled data) standard error of the mean.
fn moments(values: &[f64], weights: Option<&[f64]>) -> (f64, f64) {
    match weights {
        Some(w) => (values.iter().zip(w).map(|(v, w)| v * w).sum(), 0.0),
        None => {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (mean, (var / n).sqrt())
        }
    }
}

struct PointEstimate {
    mean: [f64; 4],
    stderr: [f64; 4],
    imag: [(f64, f64); 2],
}

fn estimate_point(
    model: &Model,
    context: &Mat,
    fields: (f64, f64),
    j: f64,
    estimator: Estimator,
    seed: u64,
) -> Result<PointEstimate> {
    let lat = &model.lattice;
    let (configs, weights) = match estimator {
        Estimator::Sampled { n_samples, .. } => (ansatz::sample(model, context, n_samples, seed)?, None),
        Estimator::Exact => {
            let all = enumerate_configs(lat.n);
            let w: Vec<f64> = log_psi_values(model, &all, context)?.iter().map(|l| (2.0 * l.re).exp()).collect();
            (all, Some(w))
        }
    };
    let terms = local_terms(model, &configs, context)?;
    let n = lat.n as f64;
    let nb = lat.n_bonds().max(1) as f64;
    let (hx, hz) = fields;
    let mut cols: [Vec<f64>; 6] = Default::default();
    for i in 0..configs.len() {
        let x = terms.flip_sum[i] / n;
        let e = terms.e_loc(i, j, hx, hz) / n;
        cols[0].push(x.re);
        cols[1].push(terms.bond[i] / nb);
        cols[2].push(terms.mag[i] / n);
        cols[3].push(e.re);
        cols[4].push(x.im);
        cols[5].push(e.im);
    }
    let w = weights.as_deref();
    let m: Vec<(f64, f64)> = cols.iter().map(|c| moments(c, w)).collect();
    Ok(PointEstimate {
        mean: [m[0].0, m[1].0, m[2].0, m[3].0],
        stderr: [m[0].1, m[1].1, m[2].1, m[3].1],
        imag: [m[4], m[5]],
    })
}

/// `⟨X⟩`, `⟨ZZ⟩`, `⟨Z⟩` and `E = ⟨H⟩/N` at each time. Sampled estimates
/// use a fresh batch per time point drawn from a seed sub-stream indexed by
/// the time's position, so results do not depend on the worker count.
pub fn estimate_observables(
    model: &Model,
    protocol: &Protocol,
    times: &[f64],
    estimator: Estimator,
    j: f64,
) -> Result<ObservableSet> {
    let seed = match estimator {
        Estimator::Sampled { n_samples, seed } => {
            if n_samples < 2 {
                bail_arg!("n_samples must be at least 2, got {n_samples}");
            }
            seed
        }
        Estimator::Exact => {
            if model.lattice.n > ENUMERATION_LIMIT {
                bail_arg!("exact enumeration refused for {} sites (limit {ENUMERATION_LIMIT})", model.lattice.n);
            }
            0
        }
    };
    let tokens = context_tokens_many(model, protocol, times)?;
    let points = par_map(&tokens, |i, tok| {
        estimate_point(model, &tok.m, protocol.fields_at(tok.t), j, estimator, substream(seed, &[i as u64]))
    });
    let points: Vec<PointEstimate> = points.into_iter().collect::<Result<_>>()?;
    let n_samples = match estimator {
        Estimator::Sampled { n_samples, .. } => n_samples,
        Estimator::Exact => 0,
    };
    let series = |k: usize, obs| ObservableSeries {
        times: times.to_vec(),
        mean: points.iter().map(|p| p.mean[k]).collect(),
        stderr: points.iter().map(|p| p.stderr[k]).collect(),
        n_samples,
        observable: obs,
    };
    let imag = matches!(estimator, Estimator::Sampled { .. }).then(|| ImagDiagnostics {
        x_mean: points.iter().map(|p| p.imag[0].0).collect(),
        x_stderr: points.iter().map(|p| p.imag[0].1).collect(),
        e_mean: points.iter().map(|p| p.imag[1].0).collect(),
        e_stderr: points.iter().map(|p| p.imag[1].1).collect(),
    });
    if let Some(d) = &imag {
        let r = d.worst_ratio();
        if r > 3.0 {
            log::warn!("imaginary part of a Hermitian estimator is {r:.2} standard errors from zero");
        }
    }
    Ok(ObservableSet {
        x: series(0, Observable::X),
        zz: series(1, Observable::ZZ),
        z: series(2, Observable::Z),
        e: series(3, Observable::E),
        imag,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::lattice::{config_to_index, enumerate_configs};
    use crate::model::{ModelConfig, TransformerConfig};
    use crate::oracle::build_dense_hamiltonian;
    use crate::protocols::{sample_fourier_protocol, ClosedForm, FourierProtocolSpec, TimeGrid};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    pub(crate) fn small_model(seed: u64, std: f64) -> Model {
        let mut c = ModelConfig::default();
        c.transformer = TransformerConfig { l_t: 1, d_e: 8, n_h: 2, d_f: 16 };
        c.fno.d_v = 8;
        c.fno.k_max = 8;
        c.fno.l_f = 2;
        c.fno.proj_hidden = 16;
        let mut m = Model::new(c, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let d = Normal::new(0.0, std).unwrap();
        for (name, t) in m.params.names().to_vec().iter().zip(m.params.tensors_mut()) {
            if name.starts_with("ansatz") {
                for x in &mut t.data {
                    *x += d.sample(&mut rng);
                }
            }
        }
        m
    }

    fn protocol(seed: u64) -> Protocol {
        sample_fourier_protocol(&FourierProtocolSpec::default(), TimeGrid::new(1.0, 40).unwrap(), seed).unwrap()
    }

    /// Dense amplitudes `ψ(σ)` in basis order.
    fn dense_psi(m: &Model, ctx: &Mat) -> Vec<Complex64> {
        let configs = enumerate_configs(m.lattice.n);
        let lp = log_psi_values(m, &configs, ctx).unwrap();
        let mut psi = vec![Complex64::new(0.0, 0.0); configs.len()];
        for (c, l) in configs.iter().zip(lp) {
            psi[config_to_index(c)] = l.exp();
        }
        psi
    }

    fn quad(h: &nalgebra::DMatrix<f64>, psi: &[Complex64]) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for r in 0..psi.len() {
            for c in 0..psi.len() {
                acc += psi[r].conj() * h[(r, c)] * psi[c];
            }
        }
        acc
    }

    #[test]
    fn uniform_state_local_energy() {
        let m = Model::new(ModelConfig::default(), 3).unwrap();
        let p = Protocol::from_closed_form(TimeGrid::new(1.0, 100).unwrap(), ClosedForm::Constant(1.0), ClosedForm::Constant(0.0));
        let e = local_energy(&m, &[1, 1, 1, 1], &p, 0.4, 1.0).unwrap();
        assert!((e - Complex64::new(8.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn zero_transverse_field_gives_diagonal_energy() {
        let m = small_model(1, 0.3);
        let p = Protocol::from_closed_form(TimeGrid::new(1.0, 40).unwrap(), ClosedForm::Constant(0.0), ClosedForm::Constant(0.3));
        for c in enumerate_configs(4) {
            let e = local_energy(&m, &c, &p, 0.5, 1.0).unwrap();
            assert_eq!(e.im, 0.0);
            assert!((e.re - m.lattice.diagonal_energy(1.0, &c, 0.3).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn enumeration_matches_dense_quadratic_forms() {
        let m = small_model(2, 0.4);
        let p = protocol(4);
        let t = 0.37;
        let tok = context_tokens(&m, &p, t).unwrap();
        let psi = dense_psi(&m, &tok.m);
        let norm: f64 = psi.iter().map(|a| a.norm_sqr()).sum();
        assert!((norm - 1.0).abs() < 1e-12);

        let (hx, hz) = p.fields_at(t);
        let h = build_dense_hamiltonian(&m.lattice, 1.0, hx, hz).unwrap();
        let hxm = build_dense_hamiltonian(&m.lattice, 0.0, 1.0, 0.0).unwrap();
        let hzz = build_dense_hamiltonian(&m.lattice, 1.0, 0.0, 0.0).unwrap();
        let ex = estimate_observables(&m, &p, &[t], Estimator::Exact, 1.0).unwrap();
        let n = 4.0;
        assert!((ex.e.mean[0] - quad(&h, &psi).re / n).abs() < 1e-10);
        assert!((ex.x.mean[0] - quad(&hxm, &psi).re / n).abs() < 1e-10);
        assert!((ex.zz.mean[0] - quad(&hzz, &psi).re / m.lattice.n_bonds() as f64).abs() < 1e-10);
    }

    #[test]
    fn uniform_and_product_states() {
        let m = Model::new(ModelConfig::default(), 3).unwrap();
        let p = Protocol::from_closed_form(TimeGrid::new(1.0, 100).unwrap(), ClosedForm::Constant(0.7), ClosedForm::Constant(0.0));
        let s = estimate_observables(&m, &p, &[0.0, 0.5], Estimator::Sampled { n_samples: 256, seed: 1 }, 1.0).unwrap();
        for i in 0..2 {
            assert!((s.x.mean[i] - 1.0).abs() < 1e-12);
            assert!((s.e.mean[i] - (0.7 + s.zz.mean[i] * 4.0 / 4.0 + 0.0)).abs() < 1e-12);
        }
        let ex = estimate_observables(&m, &p, &[0.5], Estimator::Exact, 1.0).unwrap();
        assert!(ex.zz.mean[0].abs() < 1e-12);
        assert!((ex.e.mean[0] - 0.7).abs() < 1e-12);

        // a sharply peaked head approximates the all-up product state
        let mut f = m.clone();
        f.params.get_mut("ansatz.head.b2").data.copy_from_slice(&[-40.0, 40.0, 0.0, 0.0]);
        let s = estimate_observables(&f, &p, &[0.3], Estimator::Sampled { n_samples: 64, seed: 2 }, 1.0).unwrap();
        assert_eq!(s.zz.mean[0], 1.0);
        assert_eq!(s.z.mean[0], 1.0);
        assert!(s.x.mean[0].abs() < 1e-12);
        // J N_b/N + h_z with h_z = 0
        assert!((s.e.mean[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampling_converges_to_enumeration() {
        let m = small_model(5, 0.4);
        let p = protocol(6);
        let t = [0.25];
        let ex = estimate_observables(&m, &p, &t, Estimator::Exact, 1.0).unwrap();
        let mut errs = Vec::new();
        for n in [4000usize, 16000] {
            let s = estimate_observables(&m, &p, &t, Estimator::Sampled { n_samples: n, seed: 11 }, 1.0).unwrap();
            for o in Observable::ALL {
                let (a, b) = (s.get(o), ex.get(o));
                assert!((a.mean[0] - b.mean[0]).abs() < 4.0 * a.stderr[0] + 1e-12, "{o:?} at {n}");
            }
            errs.push(s.x.stderr[0]);
            assert!(s.imag.as_ref().unwrap().worst_ratio() < 4.0);
        }
        // quadrupling the sample count halves the standard error
        let ratio = errs[0] / errs[1];
        assert!((ratio - 2.0).abs() < 0.2, "{ratio}");
    }

    #[test]
    fn residual_variance_matches_dense_form() {
        let m = small_model(7, 0.4);
        let p = protocol(8);
        let t = 0.41;
        let (hx, hz) = p.fields_at(t);
        let configs = enumerate_configs(4);
        let tok = context_tokens(&m, &p, t).unwrap();
        let lp = log_psi_values(&m, &configs, &tok.m).unwrap();
        let w: Vec<f64> = lp.iter().map(|l| (2.0 * l.re).exp()).collect();
        let res = local_residuals(&m, &configs, &p, t, 1.0).unwrap();
        let mean: Complex64 = res.iter().zip(&w).map(|(r, w)| r.value * w).sum();
        let var: f64 = res.iter().zip(&w).map(|(r, w)| w * (r.value - mean).norm_sqr()).sum();

        // dense route: ψ(t) on the basis, ∂_t ψ by an 8th-order central stencil
        let psi_at = |s: f64| dense_psi(&m, &context_tokens(&m, &p, s).unwrap().m);
        let hstep = 5e-4;
        let coef = [(1, 4.0 / 5.0), (2, -1.0 / 5.0), (3, 4.0 / 105.0), (4, -1.0 / 280.0)];
        let mut dpsi = vec![Complex64::new(0.0, 0.0); 16];
        for (k, c) in coef {
            let (a, b) = (psi_at(t + k as f64 * hstep), psi_at(t - k as f64 * hstep));
            for i in 0..16 {
                dpsi[i] += (a[i] - b[i]) * (c / hstep);
            }
        }
        let psi = psi_at(t);
        let h = build_dense_hamiltonian(&m.lattice, 1.0, hx, hz).unwrap();
        let r: Vec<Complex64> = (0..16)
            .map(|i| Complex64::i() * dpsi[i] - (0..16).map(|c| psi[c] * h[(i, c)]).sum::<Complex64>())
            .collect();
        let rr: f64 = r.iter().map(|z| z.norm_sqr()).sum();
        let proj: Complex64 = psi.iter().zip(&r).map(|(a, b)| a.conj() * b).sum();
        let dense = rr - proj.norm_sqr();
        assert!(var >= 0.0);
        assert!((var - dense).abs() < 1e-8, "{var} vs {dense}");
    }

    #[test]
    fn residual_vanishes_without_dynamics() {
        let mut m = small_model(9, 0.3);
        for name in m.params.names().to_vec() {
            if name.starts_with("fno.lift") {
                m.params.get_mut(&name).data.fill(0.0);
            }
        }
        let p = Protocol::from_closed_form(TimeGrid::new(1.0, 40).unwrap(), ClosedForm::Constant(0.0), ClosedForm::Constant(0.0));
        for c in enumerate_configs(4) {
            let l = local_residual(&m, &c, &p, 0.3, 0.0).unwrap();
            assert!(l.norm() < 1e-12);
        }
    }

    #[test]
    fn clamping_is_counted() {
        let before = clamp_events();
        let r = amplitude_ratio(Complex64::new(100.0, 0.0), Complex64::new(0.0, 0.0));
        assert!((r.re - 30f64.exp()).abs() / 30f64.exp() < 1e-12);
        assert!(clamp_events() > before);
        assert!(estimate_observables(&small_model(1, 0.1), &protocol(1), &[0.1], Estimator::Sampled { n_samples: 1, seed: 0 }, 1.0).is_err());
    }
}
