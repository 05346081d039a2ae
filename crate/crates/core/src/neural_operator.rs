//! Fourier neural operator from driving protocols to context tokens.
//!
//! The lifting layer sees the driving fields and a clock channel
//! `−cos(πt/T)` at each grid point. Without the clock channel every layer
//! commutes with time shifts, and a constant protocol could only produce static tokens.
//!
//! Each Fourier layer transforms its input along time, keeps `k_max` modes,
//! mixes channels with a real matrix `R` (shared by all modes, or one per
//! mode with `per_mode_weights`) and transforms back. The protocol interval
//! `[0, T]` is extended evenly to period `2T` before transforming, which
//! keeps the extended signal continuous; its modes are then real, and a real
//! `R` keeps every layer even-symmetric, so signals that are smooth under
//! this extension stay smooth layer to layer.
//!
//! The mixed modes define a trigonometric series, so every layer is also a
//! function of continuous `t`: the spectral branch is evaluated from its
//! series and the pointwise branch from the previous layer. Tokens at
//! off-grid times and their exact time derivative follow from this by the
//! chain rule; on grid points the series reproduces the grid computation.

use std::f64::consts::PI;
use std::rc::Rc;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::ansatz;
use crate::error::{bail_arg, Error, Result};
use crate::model::{Bound, Model, LIFT_IN};
use crate::protocols::{FieldEvaluator, Protocol};
use crate::tape::{Dual, Mat, Tape, Var};

/// Context tokens at one time, as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextTokens {
    pub m: Mat,
    pub dm_dt: Mat,
    pub t: f64,
}

struct LayerModes<'t> {
    re: Var<'t>,
}

/// Result of running the operator over a protocol's grid.
pub struct OperatorState<'t> {
    layers: Vec<LayerModes<'t>>,
    /// Final Fourier-layer output on the grid, `N_t × d_v`.
    pub latent: Var<'t>,
    fields: FieldEvaluator,
    t_max: f64,
    n_t: usize,
    k_max: usize,
}

/// Weight `c_k / P` of mode `k` in the inverse transform over `P = 2(N_t − 1)` points.
fn inv_weight(k: usize, n_t: usize) -> f64 {
    let p = 2.0 * (n_t - 1) as f64;
    if k == 0 { 1.0 / p } else { 2.0 / p }
}

/// Forward transform of the even extension restricted to `k_max` modes (the
/// imaginary part vanishes by symmetry).
fn forward_basis(n_t: usize, k_max: usize) -> Mat {
    let m = (n_t - 1) as f64;
    let mut c = Mat::zeros(k_max, n_t);
    for k in 0..k_max {
        for j in 0..n_t {
            let w = if j == 0 || j == n_t - 1 { 1.0 } else { 2.0 };
            c.set(k, j, w * (PI * ((k * j) % (2 * (n_t - 1))) as f64 / m).cos());
        }
    }
    c
}

/// Inverse-transform rows at arbitrary times and their time derivative,
/// each `times.len() × k_max` and already weighted.
fn series_basis(times: &[f64], t_max: f64, n_t: usize, k_max: usize) -> (Mat, Mat) {
    let q = times.len();
    let (mut c, mut dc) = (Mat::zeros(q, k_max), Mat::zeros(q, k_max));
    for (r, &t) in times.iter().enumerate() {
        for k in 0..k_max {
            let w = inv_weight(k, n_t);
            let om = PI * k as f64 / t_max;
            let (sn, cs) = (om * t).sin_cos();
            c.set(r, k, w * cs);
            dc.set(r, k, -w * om * sn);
        }
    }
    (c, dc)
}

/// Clock channel `−cos(πt/T)` and its derivative: monotone on `[0, T]` and a
/// single mode of the even extension, so it stays band-limited.
fn clock(t: f64, t_max: f64) -> (f64, f64) {
    let w = PI / t_max;
    let (s, c) = (w * t).sin_cos();
    (-c, w * s)
}

fn mix<'t>(model: &Model, vhat: Var<'t>, r: Var<'t>) -> Var<'t> {
    if model.config.fno.per_mode_weights {
        let (k_max, dv) = vhat.shape();
        vhat.reshape(k_max, dv).bmm(r, k_max)
    } else {
        vhat.matmul(r)
    }
}

/// Runs the Fourier layers over the protocol grid.
pub fn fno_forward<'t>(model: &Model, b: &Bound<'t, '_>, protocol: &Protocol) -> Result<OperatorState<'t>> {
    let f = &model.config.fno;
    let n_t = protocol.grid.n_t;
    if n_t < 2 * f.k_max {
        return Err(Error::Config(format!(
            "protocol grid has N_t={n_t} points but k_max={} needs at least {}",
            f.k_max,
            2 * f.k_max
        )));
    }
    let tape = b.get("fno.m0").tape();
    let mut h = Mat::zeros(n_t, LIFT_IN);
    for (j, t) in protocol.grid.points().into_iter().enumerate() {
        h.row_mut(j).copy_from_slice(&[protocol.hx[j], protocol.hz[j], clock(t, protocol.grid.t_max).0]);
    }
    let mut v = tape.constant(h).matmul(b.get("fno.lift.w")).add_row(b.get("fno.lift.b"));

    let c = tape.constant(forward_basis(n_t, f.k_max));
    let ci = tape.constant(series_basis(&protocol.grid.points(), protocol.grid.t_max, n_t, f.k_max).0);
    let mut layers = Vec::with_capacity(f.l_f);
    for l in 0..f.l_f {
        let vhat = c.matmul(v);
        let re = mix(model, vhat, b.get(&format!("fno.l{l}.r")));
        let spec = ci.matmul(re);
        v = spec.add(v.matmul(b.get(&format!("fno.l{l}.ws")))).gelu();
        layers.push(LayerModes { re });
    }
    Ok(OperatorState { layers, latent: v, fields: protocol.evaluator(), t_max: protocol.grid.t_max, n_t, k_max: f.k_max })
}

impl<'t> OperatorState<'t> {
    /// Final-layer latent `v(t)` at arbitrary times with its time tangent,
    /// `times.len() × d_v`.
    pub fn latent_at(&self, b: &Bound<'t, '_>, times: &[f64]) -> Result<Dual<'t>> {
        for &t in times {
            if !(0.0..=self.t_max).contains(&t) {
                bail_arg!("query time {t} outside [0, {}]", self.t_max);
            }
        }
        let tape = self.latent.tape();
        let q = times.len();
        let (mut h, mut dh) = (Mat::zeros(q, LIFT_IN), Mat::zeros(q, LIFT_IN));
        for (r, &t) in times.iter().enumerate() {
            let (x, z) = self.fields.eval(t);
            let (dx, dz) = self.fields.deriv(t);
            let (c, dc) = clock(t, self.t_max);
            h.row_mut(r).copy_from_slice(&[x, z, c]);
            dh.row_mut(r).copy_from_slice(&[dx, dz, dc]);
        }
        let p = |name: &str| Dual::constant(b.get(name));
        let mut v = Dual::new(tape.constant(h), Some(tape.constant(dh))).matmul(p("fno.lift.w")).add_row(p("fno.lift.b"));
        let (c, dc) = series_basis(times, self.t_max, self.n_t, self.k_max);
        let cb = Dual::new(tape.constant(c), Some(tape.constant(dc)));
        for (l, modes) in self.layers.iter().enumerate() {
            let spec = cb.matmul(Dual::constant(modes.re));
            v = spec.add(v.matmul(p(&format!("fno.l{l}.ws")))).gelu();
        }
        Ok(v)
    }

    /// Raw tokens `M̃(t)`, one row of length `N_c·d_e` per query time.
    pub fn raw_tokens(&self, b: &Bound<'t, '_>, times: &[f64]) -> Result<Dual<'t>> {
        let p = |name: &str| Dual::constant(b.get(name));
        Ok(self
            .latent_at(b, times)?
            .matmul(p("fno.proj.w1"))
            .add_row(p("fno.proj.b1"))
            .gelu()
            .matmul(p("fno.proj.w2"))
            .add_row(p("fno.proj.b2")))
    }

    /// Context tokens `M(t) = M(0) + (M̃(t) − M̃(0))`, each `N_c × d_e`.
    /// At `t = 0` the value is the stored `M(0)` itself.
    pub fn context_tokens(&self, b: &Bound<'t, '_>, times: &[f64]) -> Result<Vec<Dual<'t>>> {
        let (nc, de) = b.get("fno.m0").shape();
        let mut all = times.to_vec();
        all.push(0.0);
        let raw = self.raw_tokens(b, &all)?;
        let q = times.len();
        let raw0 = raw.val.gather_rows(Rc::from(vec![q]));
        let m0 = Dual::constant(b.get("fno.m0"));
        Ok((0..q)
            .map(|r| {
                let row = raw.gather_rows(Rc::from(vec![r]));
                let tan = row.tan.map(|t| t.reshape(nc, de));
                if times[r] == 0.0 {
                    Dual::new(m0.val, tan)
                } else {
                    let diff = row.val.sub(raw0).reshape(nc, de);
                    Dual::new(m0.val.add(diff), tan)
                }
            })
            .collect())
    }
}

/// Plain-value context tokens and their time derivative at `t`.
pub fn context_tokens(model: &Model, protocol: &Protocol, t: f64) -> Result<ContextTokens> {
    let tape = Tape::new();
    let b = model.params.bind_constant(&tape);
    let state = fno_forward(model, &b, protocol)?;
    let tok = state.context_tokens(&b, &[t])?.remove(0);
    let m = (*tok.val.value()).clone();
    let dm_dt = tok.tan.map(|v| (*v.value()).clone()).unwrap_or_else(|| Mat::zeros(m.rows, m.cols));
    Ok(ContextTokens { m, dm_dt, t })
}

/// Tokens at many times in one pass (value only).
pub fn context_tokens_many(model: &Model, protocol: &Protocol, times: &[f64]) -> Result<Vec<ContextTokens>> {
    let tape = Tape::new();
    let b = model.params.bind_constant(&tape);
    let state = fno_forward(model, &b, protocol)?;
    let toks = state.context_tokens(&b, times)?;
    Ok(toks
        .into_iter()
        .zip(times)
        .map(|(tok, &t)| {
            let m = (*tok.val.value()).clone();
            let dm_dt = tok.tan.map(|v| (*v.value()).clone()).unwrap_or_else(|| Mat::zeros(m.rows, m.cols));
            ContextTokens { m, dm_dt, t }
        })
        .collect())
}

/// `∂_t log ψ(σ, t)` for each configuration: `(∂_t log p)/2 + i ∂_t φ`.
pub fn dlogpsi_dt(model: &Model, configs: &[Vec<i8>], protocol: &Protocol, t: f64) -> Result<Vec<Complex64>> {
    let tape = Tape::new();
    let b = model.params.bind_constant(&tape);
    let state = fno_forward(model, &b, protocol)?;
    let ctx = state.context_tokens(&b, &[t])?.remove(0);
    let out = ansatz::log_psi(model, &b, configs, ctx)?;
    let d = |x: Dual| x.tan.map(|v| v.value().data.clone()).unwrap_or_else(|| vec![0.0; configs.len()]);
    let res: Vec<Complex64> =
        d(out.log_p).into_iter().zip(d(out.phase)).map(|(lp, ph)| Complex64::new(0.5 * lp, ph)).collect();
    if res.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric(format!("non-finite time derivative of log psi at t={t}")));
    }
    Ok(res)
}

/// How a finite series is continued beyond its samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Extension {
    /// Samples cover exactly one period (the endpoint is not repeated).
    Periodic,
    /// Samples cover `[0, T]` inclusive and are extended evenly to period `2T`.
    Mirror,
}

/// Spectral derivative: transform, multiply mode `k` by `iω_k`, keep modes
/// with `|k| < k_max`, transform back and take the real part.
pub fn spectral_derivative(series: &[f64], dt: f64, k_max: usize, ext: Extension) -> Vec<f64> {
    let n = series.len();
    let ext_series: Vec<f64> = match ext {
        Extension::Periodic => series.to_vec(),
        Extension::Mirror => {
            let mut e = series.to_vec();
            e.extend(series[1..n - 1].iter().rev());
            e
        }
    };
    let len = ext_series.len();
    let period = len as f64 * dt;
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex64> = ext_series.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    planner.plan_fft_forward(len).process(&mut buf);
    for (k, z) in buf.iter_mut().enumerate() {
        let signed = if k <= len / 2 { k as i64 } else { k as i64 - len as i64 };
        let keep = (signed.unsigned_abs() as usize) < k_max && !(len % 2 == 0 && k == len / 2);
        *z = if keep { *z * Complex64::new(0.0, 2.0 * PI * signed as f64 / period) } else { Complex64::new(0.0, 0.0) };
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    buf.iter().take(n).map(|z| z.re / len as f64).collect()
}
