//! Trajectory reports, comparison metrics and the grid-artifact spectral test.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, Error, Result};
use crate::protocols::{fmt_f64, parse_f64, TimeGrid};
use crate::vmc::{Observable, ObservableSet};

/// One row per time: `t X X_err ZZ ZZ_err Z Z_err E E_err`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub t: f64,
    pub values: [f64; 4],
    pub errors: [f64; 4],
}

/// Column order of `values` and `errors`.
pub const COLUMNS: [Observable; 4] = [Observable::X, Observable::ZZ, Observable::Z, Observable::E];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryReport {
    pub header: BTreeMap<String, String>,
    pub rows: Vec<TrajectoryRow>,
}

fn column(o: Observable) -> usize {
    COLUMNS.iter().position(|&c| c == o).expect("every observable has a column")
}

impl TrajectoryReport {
    pub fn from_observables(obs: &ObservableSet, header: BTreeMap<String, String>) -> Self {
        let mut rows: Vec<TrajectoryRow> = (0..obs.x.times.len())
            .map(|i| {
                let mut r = TrajectoryRow { t: obs.x.times[i], values: [0.0; 4], errors: [0.0; 4] };
                for (c, &o) in COLUMNS.iter().enumerate() {
                    r.values[c] = obs.get(o).mean[i];
                    r.errors[c] = obs.get(o).stderr[i];
                }
                r
            })
            .collect();
        rows.sort_by(|a, b| a.t.total_cmp(&b.t));
        Self { header, rows }
    }

    pub fn times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.t).collect()
    }

    pub fn series(&self, o: Observable) -> Vec<f64> {
        let c = column(o);
        self.rows.iter().map(|r| r.values[c]).collect()
    }

    pub fn errors(&self, o: Observable) -> Vec<f64> {
        let c = column(o);
        self.rows.iter().map(|r| r.errors[c]).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# noqs-trajectory v1\n");
        for (k, v) in &self.header {
            let _ = writeln!(s, "# {k}={v}");
        }
        s.push_str("# columns: t X X_err ZZ ZZ_err Z Z_err E E_err\n");
        for r in &self.rows {
            s.push_str(&fmt_f64(r.t));
            for c in 0..4 {
                let _ = write!(s, " {} {}", fmt_f64(r.values[c]), fmt_f64(r.errors[c]));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut rep = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(h) = line.strip_prefix('#') {
                if let Some((k, v)) = h.split_once('=') {
                    rep.header.insert(k.trim().to_string(), v.trim().to_string());
                }
                continue;
            }
            let cols: Vec<f64> = line.split_whitespace().map(|x| parse_f64(x, "report row")).collect::<Result<_>>()?;
            if cols.len() != 9 {
                bail_arg!("report rows need 9 columns, got {}", cols.len());
            }
            let mut r = TrajectoryRow { t: cols[0], values: [0.0; 4], errors: [0.0; 4] };
            for c in 0..4 {
                r.values[c] = cols[1 + 2 * c];
                r.errors[c] = cols[2 + 2 * c];
            }
            rep.rows.push(r);
        }
        if rep.rows.windows(2).any(|w| !(w[0].t < w[1].t)) {
            bail_arg!("report rows are not strictly increasing in t");
        }
        Ok(rep)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Argument(m) => Error::corrupt(path, m),
            other => other,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservableMetrics {
    pub mae: f64,
    pub max_abs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareMetrics {
    pub shared_times: usize,
    pub x: ObservableMetrics,
    pub zz: ObservableMetrics,
    pub z: ObservableMetrics,
    pub e: ObservableMetrics,
}

impl CompareMetrics {
    pub fn get(&self, o: Observable) -> ObservableMetrics {
        match o {
            Observable::X => self.x,
            Observable::ZZ => self.zz,
            Observable::Z => self.z,
            Observable::E => self.e,
        }
    }
}

fn same_time(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

/// Index pairs `(i, j)` with `a[i] == b[j]` up to rounding; both sorted.
pub fn shared_indices(a: &[f64], b: &[f64]) -> Vec<(usize, usize)> {
    let (mut i, mut j, mut out) = (0, 0, Vec::new());
    while i < a.len() && j < b.len() {
        if same_time(a[i], b[j]) {
            out.push((i, j));
            i += 1;
            j += 1;
        } else if a[i] < b[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

/// Per-observable MAE and max-abs difference on the shared times.
pub fn compare(a: &TrajectoryReport, b: &TrajectoryReport) -> Result<CompareMetrics> {
    let pairs = shared_indices(&a.times(), &b.times());
    if pairs.is_empty() {
        bail_arg!("reports share no time points");
    }
    let metric = |o: Observable| {
        let (sa, sb) = (a.series(o), b.series(o));
        let d: Vec<f64> = pairs.iter().map(|&(i, j)| (sa[i] - sb[j]).abs()).collect();
        ObservableMetrics { mae: d.iter().sum::<f64>() / d.len() as f64, max_abs: d.iter().cloned().fold(0.0, f64::max) }
    };
    Ok(CompareMetrics {
        shared_times: pairs.len(),
        x: metric(Observable::X),
        zz: metric(Observable::ZZ),
        z: metric(Observable::Z),
        e: metric(Observable::E),
    })
}

/// Fraction of the discrete spectral energy of `signal` (uniform spacing
/// `dt`) at frequencies above `cutoff` (cycles per unit time).
pub fn energy_above(signal: &[f64], dt: f64, cutoff: f64) -> f64 {
    let n = signal.len();
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&x| Complex::new(x, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let total: f64 = buf.iter().map(|z| z.norm_sqr()).sum();
    if total == 0.0 {
        return 0.0;
    }
    let high: f64 = buf
        .iter()
        .enumerate()
        .filter(|(k, _)| (*k).min(n - k) as f64 / (n as f64 * dt) > cutoff)
        .map(|(_, z)| z.norm_sqr())
        .sum();
    high / total
}

/// Super-resolution error profile summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuperresSummary {
    /// Largest error at fine-grid points that are not training-grid points.
    pub max_new: f64,
    /// Largest error at the training-grid points.
    pub max_train: f64,
    /// Share of the fine-grid error spectrum above the training Nyquist.
    pub high_frequency_fraction: f64,
}

impl SuperresSummary {
    pub fn passes(&self) -> bool {
        self.max_new <= 2.0 * self.max_train && self.high_frequency_fraction < 0.1
    }
}

/// `train_err` is the error on the training grid, `fine_err` on the fine grid.
pub fn superres_summary(train: TimeGrid, train_err: &[f64], fine: TimeGrid, fine_err: &[f64]) -> Result<SuperresSummary> {
    if train_err.len() != train.n_t || fine_err.len() != fine.n_t {
        bail_arg!("error profiles do not match their grids");
    }
    let tp = train.points();
    let fp = fine.points();
    let on_train: Vec<bool> = fp.iter().map(|&t| tp.iter().any(|&s| same_time(s, t))).collect();
    let max_new = fine_err.iter().zip(&on_train).filter(|(_, &o)| !o).map(|(e, _)| e.abs()).fold(0.0, f64::max);
    let max_train = train_err.iter().map(|e| e.abs()).fold(0.0, f64::max);
    let nyquist = 1.0 / (2.0 * train.dt());
    Ok(SuperresSummary { max_new, max_train, high_frequency_fraction: energy_above(fine_err, fine.dt(), nyquist) })
}
