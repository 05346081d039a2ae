//! Driving protocols `(h_x(t), h_z(t))` on uniform time grids.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_max: f64,
    pub n_t: usize,
}

impl TimeGrid {
    pub fn new(t_max: f64, n_t: usize) -> Result<Self> {
        if n_t < 2 {
            bail_arg!("time grid needs at least 2 points, got {n_t}");
        }
        if !(t_max > 0.0 && t_max.is_finite()) {
            bail_arg!("T_max must be positive and finite, got {t_max}");
        }
        Ok(Self { t_max, n_t })
    }

    /// Recovers a grid from explicit points; rejects non-uniform spacing.
    pub fn from_points(points: &[f64]) -> Result<Self> {
        if points.len() < 2 || points[0] != 0.0 {
            bail_arg!("grid must start at t=0 and contain at least 2 points");
        }
        let grid = Self::new(*points.last().unwrap(), points.len())?;
        let tol = 1e-9 * grid.t_max;
        for (j, &t) in points.iter().enumerate() {
            if (t - grid.t(j)).abs() > tol {
                bail_arg!("time grid is not uniform at index {j} (t={t}, expected {})", grid.t(j));
            }
        }
        Ok(grid)
    }

    pub fn dt(&self) -> f64 {
        self.t_max / (self.n_t - 1) as f64
    }

    #[inline]
    pub fn t(&self, j: usize) -> f64 {
        if j + 1 == self.n_t {
            self.t_max
        } else {
            self.t_max * j as f64 / (self.n_t - 1) as f64
        }
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n_t).map(|j| self.t(j)).collect()
    }
}

/// Analytic form of a single field.
#[derive(Clone, Debug, PartialEq)]
pub enum ClosedForm {
    Constant(f64),
    /// `offset + Σ_m amps[m-1] sin(m ω t + phases[m-1])`
    Fourier { offset: f64, amps: Vec<f64>, phases: Vec<f64>, omega: f64 },
    Gaussian { amplitude: f64, center: f64, width: f64, baseline: f64 },
    Tanh { start: f64, stop: f64, center: f64, steepness: f64 },
}

impl ClosedForm {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            ClosedForm::Constant(c) => *c,
            ClosedForm::Fourier { offset, amps, phases, omega } => {
                offset
                    + amps
                        .iter()
                        .zip(phases)
                        .enumerate()
                        .map(|(i, (a, p))| a * ((i + 1) as f64 * omega * t + p).sin())
                        .sum::<f64>()
            }
            ClosedForm::Gaussian { amplitude, center, width, baseline } => {
                baseline + amplitude * (-(t - center).powi(2) / (2.0 * width * width)).exp()
            }
            ClosedForm::Tanh { start, stop, center, steepness } => {
                start + (stop - start) * (1.0 + ((t - center) * steepness).tanh()) / 2.0
            }
        }
    }

    /// Time derivative of [`ClosedForm::eval`].
    pub fn deriv(&self, t: f64) -> f64 {
        match self {
            ClosedForm::Constant(_) => 0.0,
            ClosedForm::Fourier { amps, phases, omega, .. } => amps
                .iter()
                .zip(phases)
                .enumerate()
                .map(|(i, (a, p))| {
                    let w = (i + 1) as f64 * omega;
                    a * w * (w * t + p).cos()
                })
                .sum(),
            ClosedForm::Gaussian { amplitude, center, width, .. } => {
                let w2 = width * width;
                -amplitude * (t - center) / w2 * (-(t - center).powi(2) / (2.0 * w2)).exp()
            }
            ClosedForm::Tanh { start, stop, center, steepness } => {
                let th = ((t - center) * steepness).tanh();
                (stop - start) * steepness * (1.0 - th * th) / 2.0
            }
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ClosedForm::Constant(_) => "constant",
            ClosedForm::Fourier { .. } => "fourier",
            ClosedForm::Gaussian { .. } => "gaussian",
            ClosedForm::Tanh { .. } => "tanh",
        }
    }

    fn write_header(&self, field: &str, out: &mut String) {
        let _ = writeln!(out, "# {field}.kind={}", self.kind());
        let mut kv = |k: &str, v: f64| {
            let _ = writeln!(out, "# {field}.{k}={}", fmt_f64(v));
        };
        match self {
            ClosedForm::Constant(c) => kv("value", *c),
            ClosedForm::Fourier { offset, omega, .. } => {
                kv("offset", *offset);
                kv("omega", *omega);
            }
            ClosedForm::Gaussian { amplitude, center, width, baseline } => {
                kv("amplitude", *amplitude);
                kv("center", *center);
                kv("width", *width);
                kv("baseline", *baseline);
            }
            ClosedForm::Tanh { start, stop, center, steepness } => {
                kv("start", *start);
                kv("stop", *stop);
                kv("center", *center);
                kv("steepness", *steepness);
            }
        }
        if let ClosedForm::Fourier { amps, phases, .. } = self {
            let join = |v: &[f64]| v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(",");
            let _ = writeln!(out, "# {field}.amps={}", join(amps));
            let _ = writeln!(out, "# {field}.phases={}", join(phases));
        }
    }

    fn from_header(field: &str, h: &BTreeMap<String, String>) -> Result<Option<Self>> {
        let Some(kind) = h.get(&format!("{field}.kind")) else {
            return Ok(None);
        };
        let num = |k: &str| -> Result<f64> {
            let key = format!("{field}.{k}");
            let v = h.get(&key).ok_or_else(|| Error::Argument(format!("protocol header lacks '{key}'")))?;
            parse_f64(v, &key)
        };
        let list = |k: &str| -> Result<Vec<f64>> {
            let key = format!("{field}.{k}");
            let v = h.get(&key).ok_or_else(|| Error::Argument(format!("protocol header lacks '{key}'")))?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|x| parse_f64(x, &key)).collect()
        };
        let form = match kind.as_str() {
            "constant" => ClosedForm::Constant(num("value")?),
            "fourier" => {
                let (amps, phases) = (list("amps")?, list("phases")?);
                if amps.len() != phases.len() {
                    bail_arg!("{field}: {} amplitudes but {} phases", amps.len(), phases.len());
                }
                ClosedForm::Fourier { offset: num("offset")?, amps, phases, omega: num("omega")? }
            }
            "gaussian" => ClosedForm::Gaussian {
                amplitude: num("amplitude")?,
                center: num("center")?,
                width: num("width")?,
                baseline: num("baseline")?,
            },
            "tanh" => ClosedForm::Tanh {
                start: num("start")?,
                stop: num("stop")?,
                center: num("center")?,
                steepness: num("steepness")?,
            },
            other => bail_arg!("{field}: unknown closed-form kind '{other}'"),
        };
        Ok(Some(form))
    }
}

pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub(crate) fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::Argument(format!("cannot parse '{s}' as a number ({what})")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClosedPair {
    pub hx: ClosedForm,
    pub hz: ClosedForm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Protocol {
    pub grid: TimeGrid,
    pub hx: Vec<f64>,
    pub hz: Vec<f64>,
    pub closed_form: Option<ClosedPair>,
    /// Free-form provenance (kind, seed, ...). Written to the file header.
    pub metadata: BTreeMap<String, String>,
}

impl Protocol {
    pub fn from_closed_form(grid: TimeGrid, hx: ClosedForm, hz: ClosedForm) -> Self {
        let pts = grid.points();
        let mut metadata = BTreeMap::new();
        metadata.insert("kind".into(), hx.kind().into());
        Protocol {
            grid,
            hx: pts.iter().map(|&t| hx.eval(t)).collect(),
            hz: pts.iter().map(|&t| hz.eval(t)).collect(),
            closed_form: Some(ClosedPair { hx, hz }),
            metadata,
        }
    }

    pub fn raw(grid: TimeGrid, hx: Vec<f64>, hz: Vec<f64>) -> Result<Self> {
        if hx.len() != grid.n_t || hz.len() != grid.n_t {
            bail_arg!("protocol needs {} samples per field, got {} and {}", grid.n_t, hx.len(), hz.len());
        }
        if !hx.iter().chain(&hz).all(|x| x.is_finite()) {
            bail_arg!("protocol samples must be finite");
        }
        let mut metadata = BTreeMap::new();
        metadata.insert("kind".into(), "raw".into());
        Ok(Protocol { grid, hx, hz, closed_form: None, metadata })
    }

    pub fn kind(&self) -> &str {
        self.metadata.get("kind").map(String::as_str).unwrap_or("raw")
    }

    /// Field values at an arbitrary time: analytic when a closed form is
    /// known, otherwise trigonometric interpolation of the samples.
    pub fn fields_at(&self, t: f64) -> (f64, f64) {
        match &self.closed_form {
            Some(c) => (c.hx.eval(t), c.hz.eval(t)),
            None => (
                TrigInterpolant::new(&self.hx, self.grid.t_max).eval(t),
                TrigInterpolant::new(&self.hz, self.grid.t_max).eval(t),
            ),
        }
    }

    /// Reusable evaluator; avoids rebuilding interpolation coefficients.
    pub fn evaluator(&self) -> FieldEvaluator {
        match &self.closed_form {
            Some(c) => FieldEvaluator::Closed(c.clone()),
            None => FieldEvaluator::Interp(
                TrigInterpolant::new(&self.hx, self.grid.t_max),
                TrigInterpolant::new(&self.hz, self.grid.t_max),
            ),
        }
    }

    pub fn resample(&self, grid: TimeGrid) -> Result<Protocol> {
        if (grid.t_max - self.grid.t_max).abs() > 1e-12 * self.grid.t_max {
            bail_arg!("resample: T_max differs ({} vs {})", grid.t_max, self.grid.t_max);
        }
        if grid == self.grid {
            return Ok(self.clone());
        }
        let mut out = match &self.closed_form {
            Some(c) => Protocol::from_closed_form(grid, c.hx.clone(), c.hz.clone()),
            None => {
                let ev = self.evaluator();
                let pts = grid.points();
                let (hx, hz) = pts.iter().map(|&t| ev.eval(t)).unzip();
                Protocol::raw(grid, hx, hz)?
            }
        };
        out.metadata = self.metadata.clone();
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# noqs-protocol v1");
        for (k, v) in &self.metadata {
            let _ = writeln!(s, "# {k}={v}");
        }
        let _ = writeln!(s, "# T_max={}", fmt_f64(self.grid.t_max));
        let _ = writeln!(s, "# N_t={}", self.grid.n_t);
        if let Some(c) = &self.closed_form {
            c.hx.write_header("hx", &mut s);
            c.hz.write_header("hz", &mut s);
        }
        for j in 0..self.grid.n_t {
            let _ = writeln!(s, "{} {} {}", fmt_f64(self.grid.t(j)), fmt_f64(self.hx[j]), fmt_f64(self.hz[j]));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Protocol> {
        let mut header = BTreeMap::new();
        let mut rows = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(h) = line.strip_prefix('#') {
                if let Some((k, v)) = h.trim().split_once('=') {
                    header.insert(k.trim().to_string(), v.trim().to_string());
                }
                continue;
            }
            let cols: Vec<f64> =
                line.split_whitespace().map(|x| parse_f64(x, "protocol row")).collect::<Result<_>>()?;
            if cols.len() != 3 {
                bail_arg!("protocol rows need 3 columns (t hx hz), got {}", cols.len());
            }
            rows.push(cols);
        }
        let n_t = match header.get("N_t") {
            Some(v) => v.parse::<usize>().map_err(|_| Error::Argument(format!("bad N_t '{v}'")))?,
            None => rows.len(),
        };
        if n_t != rows.len() {
            bail_arg!("header declares N_t={n_t} but file has {} rows", rows.len());
        }
        let times: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let grid = TimeGrid::from_points(&times)?;
        let grid = match header.get("T_max") {
            Some(v) => TimeGrid::new(parse_f64(v, "T_max")?, n_t)?,
            None => grid,
        };
        let hx: Vec<f64> = rows.iter().map(|r| r[1]).collect();
        let hz: Vec<f64> = rows.iter().map(|r| r[2]).collect();
        let closed = match (ClosedForm::from_header("hx", &header)?, ClosedForm::from_header("hz", &header)?) {
            (Some(hx), Some(hz)) => Some(ClosedPair { hx, hz }),
            (None, None) => None,
            _ => bail_arg!("protocol header has a closed form for only one field"),
        };
        let metadata = header
            .into_iter()
            .filter(|(k, _)| !(k == "T_max" || k == "N_t" || k.starts_with("hx.") || k.starts_with("hz.")))
            .collect();
        Ok(Protocol { grid, hx, hz, closed_form: closed, metadata })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Protocol> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Protocol::from_text(&text).map_err(|e| match e {
            Error::Argument(m) => Error::corrupt(path, m),
            other => other,
        })
    }
}

pub enum FieldEvaluator {
    Closed(ClosedPair),
    Interp(TrigInterpolant, TrigInterpolant),
}

impl FieldEvaluator {
    pub fn eval(&self, t: f64) -> (f64, f64) {
        match self {
            FieldEvaluator::Closed(c) => (c.hx.eval(t), c.hz.eval(t)),
            FieldEvaluator::Interp(x, z) => (x.eval(t), z.eval(t)),
        }
    }

    pub fn deriv(&self, t: f64) -> (f64, f64) {
        match self {
            FieldEvaluator::Closed(c) => (c.hx.deriv(t), c.hz.deriv(t)),
            FieldEvaluator::Interp(x, z) => (x.deriv(t), z.deriv(t)),
        }
    }
}

/// Trigonometric interpolation of samples on `[0, T]` through their even
/// extension to period `2T` (a DCT-I expansion). The extension is continuous,
/// so no jump is introduced at the interval ends.
#[derive(Clone, Debug)]
pub struct TrigInterpolant {
    coeffs: Vec<f64>,
    t_max: f64,
}

impl TrigInterpolant {
    pub fn new(values: &[f64], t_max: f64) -> Self {
        let n = values.len();
        assert!(n >= 2, "TrigInterpolant needs at least 2 samples");
        let m = (n - 1) as f64;
        let coeffs = (0..n)
            .map(|k| {
                let mut s = 0.0;
                for (j, &f) in values.iter().enumerate() {
                    let w = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
                    s += w * f * (PI * ((j * k) % (2 * (n - 1))) as f64 / m).cos();
                }
                2.0 * s / m
            })
            .collect();
        Self { coeffs, t_max }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.coeffs.len();
        let x = PI * t / self.t_max;
        self.coeffs
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let w = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
                w * c * (k as f64 * x).cos()
            })
            .sum()
    }

    pub fn deriv(&self, t: f64) -> f64 {
        let n = self.coeffs.len();
        let x = PI * t / self.t_max;
        self.coeffs
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let w = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
                let wk = PI * k as f64 / self.t_max;
                -w * c * wk * (k as f64 * x).sin()
            })
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FourierProtocolSpec {
    pub n_max: usize,
    pub omega: f64,
    pub hx0: f64,
    pub hz0: f64,
    pub amp_scale_x: f64,
    pub amp_scale_z: f64,
}

impl Default for FourierProtocolSpec {
    fn default() -> Self {
        Self { n_max: 10, omega: 10.0, hx0: 1.0, hz0: 0.0, amp_scale_x: 0.6, amp_scale_z: 0.05 }
    }
}

fn draw_fourier(rng: &mut ChaCha8Rng, n_max: usize, offset: f64, scale: f64, omega: f64) -> ClosedForm {
    let amps = (1..=n_max)
        .map(|m| {
            let sd = scale / (m as f64).powf(1.5);
            if sd > 0.0 { Normal::new(0.0, sd).unwrap().sample(rng) } else { 0.0 }
        })
        .collect();
    // (0, 2π]: u ∈ [0, 1) maps to 2π(1 − u)
    let phases = (0..n_max).map(|_| 2.0 * PI * (1.0 - rng.random::<f64>())).collect();
    ClosedForm::Fourier { offset, amps, phases, omega }
}

pub fn sample_fourier_protocol(spec: &FourierProtocolSpec, grid: TimeGrid, seed: u64) -> Result<Protocol> {
    if spec.n_max < 1 {
        bail_arg!("n_max must be at least 1");
    }
    if !(spec.omega > 0.0) {
        bail_arg!("omega must be positive, got {}", spec.omega);
    }
    if spec.amp_scale_x < 0.0 || spec.amp_scale_z < 0.0 {
        bail_arg!("amplitude scales must be non-negative");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hx = draw_fourier(&mut rng, spec.n_max, spec.hx0, spec.amp_scale_x, spec.omega);
    let hz = draw_fourier(&mut rng, spec.n_max, spec.hz0, spec.amp_scale_z, spec.omega);
    let mut p = Protocol::from_closed_form(grid, hx, hz);
    p.metadata.insert("seed".into(), seed.to_string());
    Ok(p)
}

pub fn make_gaussian_pulse(grid: TimeGrid, amplitude: f64, center: f64, width: f64, baseline: f64) -> Result<Protocol> {
    if !(width > 0.0) {
        bail_arg!("Gaussian width must be positive, got {width}");
    }
    Ok(Protocol::from_closed_form(
        grid,
        ClosedForm::Gaussian { amplitude, center, width, baseline },
        ClosedForm::Constant(0.0),
    ))
}

pub fn make_tanh_ramp(grid: TimeGrid, start: f64, stop: f64, center: f64, steepness: f64) -> Result<Protocol> {
    if !(steepness > 0.0) {
        bail_arg!("tanh steepness must be positive, got {steepness}");
    }
    Ok(Protocol::from_closed_form(
        grid,
        ClosedForm::Tanh { start, stop, center, steepness },
        ClosedForm::Constant(0.0),
    ))
}

pub fn constant_protocol(grid: TimeGrid, hx: f64, hz: f64) -> Protocol {
    Protocol::from_closed_form(grid, ClosedForm::Constant(hx), ClosedForm::Constant(hz))
}
