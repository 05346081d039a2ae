//! Protocol-specific refinement from sparse measurements of `⟨X⟩` and
//! `⟨ZZ⟩`. The residual loss is not used here; only the squared mismatch
//! between model and measured observables drives the update.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ansatz;
use crate::error::{bail_arg, Error, Result};
use crate::lattice::enumerate_configs;
use crate::model::{Model, ParamStore};
use crate::neural_operator::fno_forward;
use crate::protocols::{fmt_f64, parse_f64, Protocol};
use crate::tape::{Dual, Mat, Tape, Var};
use crate::training::{local_on_tape, Adam, TrainState};
use crate::vmc::{self, estimate_observables, Estimator, ObservableSet};
use crate::workers::substream;

const STREAM_FINETUNE: u64 = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementRecord {
    pub t: f64,
    pub x_mean: f64,
    pub zz_mean: f64,
    pub x_err: Option<f64>,
    pub zz_err: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementSet {
    pub records: Vec<MeasurementRecord>,
    pub protocol_ref: String,
}

impl MeasurementSet {
    pub fn new(records: Vec<MeasurementRecord>, protocol_ref: impl Into<String>) -> Result<Self> {
        for r in &records {
            if !(r.x_mean.abs() <= 1.0 && r.zz_mean.abs() <= 1.0) {
                bail_arg!("measurement at t={} outside [-1, 1]: X={} ZZ={}", r.t, r.x_mean, r.zz_mean);
            }
            for e in [r.x_err, r.zz_err].into_iter().flatten() {
                if !(e > 0.0) {
                    bail_arg!("measurement error bars must be positive, got {e} at t={}", r.t);
                }
            }
        }
        Ok(Self { records, protocol_ref: protocol_ref.into() })
    }

    /// Measurements taken from observables at the given indices of `obs`.
    pub fn from_observables(obs: &ObservableSet, indices: &[usize], protocol_ref: &str) -> Result<Self> {
        let recs = indices
            .iter()
            .map(|&i| MeasurementRecord {
                t: obs.x.times[i],
                x_mean: obs.x.mean[i],
                zz_mean: obs.zz.mean[i],
                x_err: None,
                zz_err: None,
            })
            .collect();
        Self::new(recs, protocol_ref)
    }

    pub fn check_times(&self, protocol: &Protocol) -> Result<()> {
        for r in &self.records {
            if !(0.0..=protocol.grid.t_max).contains(&r.t) {
                bail_arg!("measurement time {} outside [0, {}]", r.t, protocol.grid.t_max);
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# noqs-measurements v1\n");
        let _ = writeln!(s, "# protocol={}", self.protocol_ref);
        for r in &self.records {
            let _ = write!(s, "{} {} {}", fmt_f64(r.t), fmt_f64(r.x_mean), fmt_f64(r.zz_mean));
            if let (Some(a), Some(b)) = (r.x_err, r.zz_err) {
                let _ = write!(s, " {} {}", fmt_f64(a), fmt_f64(b));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut protocol_ref = String::new();
        let mut records = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(h) = line.strip_prefix('#') {
                if let Some(("protocol", v)) = h.trim().split_once('=').map(|(k, v)| (k.trim(), v.trim())) {
                    protocol_ref = v.to_string();
                }
                continue;
            }
            let cols: Vec<f64> =
                line.split_whitespace().map(|x| parse_f64(x, "measurement row")).collect::<Result<_>>()?;
            let (x_err, zz_err) = match cols.len() {
                3 => (None, None),
                5 => (Some(cols[3]), Some(cols[4])),
                n => bail_arg!("measurement rows need 3 or 5 columns (t x zz [x_err zz_err]), got {n}"),
            };
            records.push(MeasurementRecord { t: cols[0], x_mean: cols[1], zz_mean: cols[2], x_err, zz_err });
        }
        Self::new(records, protocol_ref)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    fn weights(&self, weighted: bool) -> Vec<(f64, f64)> {
        self.records
            .iter()
            .map(|r| match (weighted, r.x_err, r.zz_err) {
                (true, Some(a), Some(b)) => (1.0 / (a * a), 1.0 / (b * b)),
                _ => (1.0, 1.0),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: u64,
    pub lr: f64,
    /// Samples per measurement time; 0 means exact enumeration.
    pub n_samples: usize,
    pub seed: u64,
    /// Keep every `fno.*` tensor fixed and adapt only the ansatz.
    pub freeze_operator: bool,
    /// Inverse-variance weights from the records' error bars.
    pub weighted: bool,
    pub coupling: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { steps: 300, lr: 3e-4, n_samples: 1024, seed: 0, freeze_operator: false, weighted: false, coupling: 1.0 }
    }
}

/// `Σ_m w_x (⟨X(t_m)⟩_θ − X_m)² + w_zz (⟨ZZ(t_m)⟩_θ − ZZ_m)²`, unit weights
/// unless `weighted`.
pub fn data_loss(
    model: &Model,
    protocol: &Protocol,
    set: &MeasurementSet,
    estimator: Estimator,
    weighted: bool,
    j: f64,
) -> Result<f64> {
    if set.records.is_empty() {
        bail_arg!("measurement set is empty");
    }
    set.check_times(protocol)?;
    let times: Vec<f64> = set.records.iter().map(|r| r.t).collect();
    let obs = estimate_observables(model, protocol, &times, estimator, j)?;
    Ok(set
        .records
        .iter()
        .zip(set.weights(weighted))
        .enumerate()
        .map(|(i, (r, (wx, wz)))| wx * (obs.x.mean[i] - r.x_mean).powi(2) + wz * (obs.zz.mean[i] - r.zz_mean).powi(2))
        .sum())
}

/// Estimate of `⟨f⟩` whose gradient is the estimator's: exact enumeration
/// weights `p(σ)` directly, samples add the score term
/// `mean((f − f̄) ∂ log p)` with value zero.
fn expectation<'t>(f: Var<'t>, log_p: Var<'t>, exact: bool) -> Var<'t> {
    let tape = f.tape();
    if exact {
        return log_p.exp().mul(f).sum();
    }
    let m = f.shape().0 as f64;
    let mean = f.sum().scale(1.0 / m);
    let fbar = mean.value().data[0];
    let coef = tape.constant(f.value().map(|x| x - fbar));
    let score = coef.mul(log_p.sub(log_p.detach())).sum().scale(1.0 / m);
    mean.add(score)
}

/// Data loss and its parameter gradients at one fine-tuning step. Samples
/// come from the step's seed sub-stream.
pub fn data_loss_grads(
    model: &Model,
    protocol: &Protocol,
    set: &MeasurementSet,
    cfg: &FinetuneConfig,
    step: u64,
    frozen: &dyn Fn(&str) -> bool,
) -> Result<(f64, Vec<Mat>)> {
    if set.records.is_empty() {
        bail_arg!("measurement set is empty");
    }
    set.check_times(protocol)?;
    let lat = &model.lattice;
    let tape = Tape::new();
    let b = model.params.bind(&tape, frozen);
    let op = fno_forward(model, &b, protocol)?;
    let times: Vec<f64> = set.records.iter().map(|r| r.t).collect();
    let ctxs = op.context_tokens(&b, &times)?;
    let exact = cfg.n_samples == 0;
    if exact && lat.n > vmc::ENUMERATION_LIMIT {
        bail_arg!("exact enumeration refused for {} sites (limit {})", lat.n, vmc::ENUMERATION_LIMIT);
    }
    let nb = lat.n_bonds().max(1) as f64;
    let mut root: Option<Var> = None;
    let mut value = 0.0;
    for (m, ((ctx, r), (wx, wz))) in ctxs.into_iter().zip(&set.records).zip(set.weights(cfg.weighted)).enumerate() {
        let ctx = Dual::constant(ctx.val);
        let configs = if exact {
            enumerate_configs(lat.n)
        } else {
            let seed = substream(cfg.seed, &[STREAM_FINETUNE, step, m as u64]);
            ansatz::sample(model, &ctx.val.value(), cfg.n_samples, seed)?
        };
        let loc = local_on_tape(model, &b, ctx, &configs)?;
        let zz = Mat::from_vec(configs.len(), 1, configs.iter().map(|c| lat.bond_sum(c) / nb).collect());
        let x = expectation(loc.fs_re.scale(1.0 / lat.n as f64), loc.log_p, exact);
        let zz = expectation(tape.constant(zz), loc.log_p, exact);
        let dx = x.shift(-r.x_mean);
        let dz = zz.shift(-r.zz_mean);
        let term = dx.mul(dx).scale(wx).add(dz.mul(dz).scale(wz));
        value += term.value().data[0];
        root = Some(match root {
            Some(acc) => acc.add(term),
            None => term,
        });
    }
    let grads = tape.backward(root.expect("nonempty set"));
    Ok((value, b.collect_grads(&grads)))
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub state: TrainState,
    /// Data loss at each step, before that step's update.
    pub losses: Vec<f64>,
}

/// Runs `cfg.steps` Adam steps at constant `cfg.lr` on the data loss. The
/// initial tokens `M(0)` stay fixed, so the state at `t = 0` is unchanged.
pub fn finetune(
    state: &TrainState,
    protocol: &Protocol,
    set: &MeasurementSet,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    if set.records.is_empty() {
        bail_arg!("measurement set is empty");
    }
    let mut st = state.clone();
    let freeze_op = cfg.freeze_operator;
    let frozen = move |n: &str| n == "fno.m0" || (freeze_op && n.starts_with("fno."));
    let mut adam = Adam::new(&st.model.params, st.adam.beta1, st.adam.beta2, st.adam.eps);
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let (loss, grads) = data_loss_grads(&st.model, protocol, set, cfg, step, &frozen)?;
        if !loss.is_finite() || !grads.iter().all(Mat::is_finite) {
            return Err(Error::Numeric(format!("fine-tuning step {step}: non-finite data loss or gradient")));
        }
        losses.push(loss);
        let mut params: ParamStore = st.model.params.clone();
        adam.step(&mut params, &grads, cfg.lr, &frozen);
        if !params.is_finite() {
            return Err(Error::Numeric(format!("fine-tuning step {step} produced non-finite parameters")));
        }
        st.model.params = params;
    }
    Ok(FinetuneOutcome { state: st, losses })
}
