use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use noqs::checkpoint::{load_checkpoint, save_checkpoint};
use noqs::finetune::{finetune, MeasurementSet};
use noqs::io::write_atomic;
use noqs::model::Model;
use noqs::oracle::{exact_trajectory, InitialState, PropagateOptions};
use noqs::protocols::{sample_fourier_protocol, ClosedForm, Protocol, TimeGrid};
use noqs::report::{compare, superres_summary, CompareMetrics, TrajectoryReport};
use noqs::training::{pretrain_initial_state, train, CheckpointKind, TrainState};
use noqs::vmc::{estimate_observables, Estimator, Observable};
use noqs::workers::{substream, worker_count};
use noqs::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::plot::{render, Curve};

const STREAM_GENERATE: u64 = 7;
const STREAM_EVAL: u64 = 8;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(cfg.with_seed(seed))
}

/// A checkpoint together with the run configuration it was trained under.
pub struct Loaded {
    pub state: TrainState,
    pub run: RunConfig,
    pub label: String,
}

pub fn load(path: &Path) -> Result<Loaded> {
    let ck = load_checkpoint(path)?;
    let run = if ck.run_config.trim().is_empty() {
        let mut r = RunConfig::default();
        let mc = &ck.state.model.config;
        r.lattice = mc.lattice.clone();
        r.transformer = mc.transformer.clone();
        r.fno = mc.fno.clone();
        r
    } else {
        RunConfig::from_toml(&ck.run_config).map_err(|e| Error::corrupt(path, format!("stored run configuration: {e}")))?
    };
    let label = format!("{} (step {})", path.display(), ck.state.step);
    Ok(Loaded { state: ck.state, run, label })
}

pub fn estimator(n_samples: usize, seed: u64) -> Estimator {
    match n_samples {
        0 => Estimator::Exact,
        n => Estimator::Sampled { n_samples: n, seed: substream(seed, &[STREAM_EVAL]) },
    }
}

fn protocol_header(p: &Protocol) -> BTreeMap<String, String> {
    let mut h: BTreeMap<String, String> = p.metadata.iter().map(|(k, v)| (format!("protocol.{k}"), v.clone())).collect();
    h.insert("protocol.T_max".into(), p.grid.t_max.to_string());
    h.insert("protocol.N_t".into(), p.grid.n_t.to_string());
    h
}

fn lattice_name(run: &RunConfig) -> String {
    format!("{}x{}", run.lattice.lx, run.lattice.ly)
}

/// Refuses protocols whose time window differs from the one trained on.
pub fn check_compatible(run: &RunConfig, protocol: &Protocol) -> Result<()> {
    let mut bad = Vec::new();
    if (protocol.grid.t_max - run.protocol.t_max).abs() > 1e-12 * run.protocol.t_max {
        bad.push(format!("T_max: protocol {} vs checkpoint {}", protocol.grid.t_max, run.protocol.t_max));
    }
    if protocol.grid.n_t < 2 * run.fno.k_max {
        bad.push(format!("N_t: protocol {} is below 2·k_max = {}", protocol.grid.n_t, 2 * run.fno.k_max));
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("checkpoint and protocol are incompatible: {}", bad.join("; "))))
    }
}

pub fn evaluate_report(model: &Model, run: &RunConfig, protocol: &Protocol, est: Estimator, label: &str) -> Result<TrajectoryReport> {
    check_compatible(run, protocol)?;
    let obs = estimate_observables(model, protocol, &protocol.grid.points(), est, run.train.coupling)?;
    let mut h = protocol_header(protocol);
    h.insert("lattice".into(), lattice_name(run));
    h.insert("model".into(), label.to_string());
    h.insert(
        "n_samples".into(),
        match est {
            Estimator::Exact => "exact".into(),
            Estimator::Sampled { n_samples, .. } => n_samples.to_string(),
        },
    );
    Ok(TrajectoryReport::from_observables(&obs, h))
}

pub fn oracle_report(run: &RunConfig, init: InitialState, protocol: &Protocol, tol: f64) -> Result<TrajectoryReport> {
    let lat = run.lattice.build()?;
    let opts = PropagateOptions { tol, j: run.train.coupling, ..Default::default() };
    let obs = exact_trajectory(&lat, init, protocol, &protocol.grid.points(), opts)?;
    let mut h = protocol_header(protocol);
    h.insert("lattice".into(), lattice_name(run));
    h.insert("model".into(), format!("oracle init={init} tol={tol:e}"));
    h.insert("n_samples".into(), "exact".into());
    Ok(TrajectoryReport::from_observables(&obs, h))
}

// ---------------------------------------------------------------- generate

pub enum ProtocolKind {
    Fourier,
    Gaussian { amplitude: f64, center: f64, width: f64, baseline: f64, hz_amplitude: f64 },
    Tanh { start: f64, stop: f64, center: f64, steepness: f64, hz_stop: f64 },
    Constant { hx: f64, hz: f64 },
}

pub fn generate_protocols(run: &RunConfig, kind: &ProtocolKind, count: usize, out: &Path) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    let grid = run.grid()?;
    let mut paths = Vec::new();
    for i in 0..count {
        let p = match *kind {
            ProtocolKind::Fourier => {
                sample_fourier_protocol(&run.protocol.fourier, grid, substream(run.seed, &[STREAM_GENERATE, i as u64]))?
            }
            ProtocolKind::Gaussian { amplitude, center, width, baseline, hz_amplitude } => {
                if !(width > 0.0) {
                    return Err(Error::Argument(format!("Gaussian width must be positive, got {width}")));
                }
                Protocol::from_closed_form(
                    grid,
                    ClosedForm::Gaussian { amplitude, center, width, baseline },
                    ClosedForm::Gaussian { amplitude: hz_amplitude, center, width, baseline: 0.0 },
                )
            }
            ProtocolKind::Tanh { start, stop, center, steepness, hz_stop } => {
                if !(steepness > 0.0) {
                    return Err(Error::Argument(format!("tanh steepness must be positive, got {steepness}")));
                }
                Protocol::from_closed_form(
                    grid,
                    ClosedForm::Tanh { start, stop, center, steepness },
                    ClosedForm::Tanh { start: 0.0, stop: hz_stop, center, steepness },
                )
            }
            ProtocolKind::Constant { hx, hz } => noqs::protocols::constant_protocol(grid, hx, hz),
        };
        let path = out.join(format!("protocol_{i:04}.txt"));
        p.write(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

// ---------------------------------------------------------------- training

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    workers: usize,
    resumed_from: Option<String>,
    step: u64,
    best: Option<(u64, f64)>,
    checkpoints: Vec<String>,
    config: &'a RunConfig,
}

fn write_manifest(out: &Path, command: &str, run: &RunConfig, state: &TrainState, resumed: Option<&Path>) -> Result<()> {
    let mut checkpoints: Vec<String> = std::fs::read_dir(out.join("checkpoints"))
        .map(|rd| rd.filter_map(|e| e.ok()).map(|e| format!("checkpoints/{}", e.file_name().to_string_lossy())).collect())
        .unwrap_or_default();
    for f in ["pretrained.ckpt", "best.ckpt", "final.ckpt"] {
        if out.join(f).exists() {
            checkpoints.push(f.to_string());
        }
    }
    checkpoints.sort();
    let m = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: run.seed,
        workers: worker_count(),
        resumed_from: resumed.map(|p| p.display().to_string()),
        step: state.step,
        best: state.best_validation,
        checkpoints,
        config: run,
    };
    let text = toml::to_string(&m).map_err(|e| Error::Config(e.to_string()))?;
    write_text(&out.join("manifest.toml"), &text)?;
    write_text(&out.join("config.toml"), &run.to_toml())
}

fn write_history(out: &Path, state: &TrainState) -> Result<()> {
    let mut s = String::from("# step tdvp anchor lr retried\n");
    for r in &state.history {
        let _ = writeln!(s, "{} {:.17e} {:.17e} {:.17e} {}", r.step, r.tdvp, r.anchor, r.lr, r.retried as u8);
    }
    write_text(&out.join("history.tsv"), &s)
}

fn new_state(run: &RunConfig) -> Result<TrainState> {
    let model = Model::new(run.model_config(), run.seed)?;
    Ok(TrainState::new(model, &run.train))
}

fn resume_state(run: &RunConfig, path: &Path) -> Result<TrainState> {
    let loaded = load(path)?;
    if loaded.state.model.config != run.model_config() {
        return Err(Error::Config(format!(
            "{} was trained with a different model configuration than the one given",
            path.display()
        )));
    }
    Ok(loaded.state)
}

pub fn cmd_pretrain(run: &RunConfig, out: &Path) -> Result<PathBuf> {
    create_dir(out)?;
    let mut state = new_state(run)?;
    let rep = pretrain_initial_state(&mut state, &run.train)?;
    log::info!("pre-training: {} steps, loss {:.3e}, converged {}", rep.steps, rep.final_loss, rep.converged);
    let path = out.join("pretrained.ckpt");
    save_checkpoint(&path, &state, &run.to_toml())?;
    write_manifest(out, "pretrain", run, &state, None)?;
    Ok(path)
}

pub fn cmd_train(run: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<TrainState> {
    create_dir(&out.join("checkpoints"))?;
    let mut state = match resume {
        Some(p) => resume_state(run, p)?,
        None => new_state(run)?,
    };
    let sampler = run.sampler()?;
    let snapshot = run.to_toml();
    write_manifest(out, "train", run, &state, resume)?;
    let keep = run.train.keep_last;
    let mut on_checkpoint = |st: &TrainState, kind: CheckpointKind| -> Result<()> {
        let path = match kind {
            CheckpointKind::Periodic => out.join("checkpoints").join(format!("step-{:08}.ckpt", st.step)),
            CheckpointKind::Best => out.join("best.ckpt"),
            CheckpointKind::Final => out.join("final.ckpt"),
        };
        save_checkpoint(&path, st, &snapshot)?;
        if kind == CheckpointKind::Periodic {
            prune(&out.join("checkpoints"), keep)?;
        }
        write_history(out, st)?;
        write_manifest(out, "train", run, st, resume)
    };
    train(&mut state, &run.train, &sampler, &mut on_checkpoint)?;
    Ok(state)
}

/// Keeps the newest `keep` periodic checkpoints.
fn prune(dir: &Path, keep: usize) -> Result<()> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    files.sort();
    let excess = files.len().saturating_sub(keep);
    for f in &files[..excess] {
        std::fs::remove_file(f).map_err(|e| Error::io(f, e))?;
    }
    Ok(())
}

// ---------------------------------------------------------------- fine-tuning

pub struct FinetuneArgs {
    pub steps: Option<u64>,
    pub lr: Option<f64>,
    pub n_samples: Option<usize>,
    pub freeze_operator: bool,
    pub seed: Option<u64>,
}

pub fn cmd_finetune(ckpt: &Path, protocol: &Protocol, meas: &MeasurementSet, args: &FinetuneArgs, out: &Path) -> Result<()> {
    create_dir(out)?;
    let loaded = load(ckpt)?;
    let mut run = loaded.run.clone().with_seed(args.seed);
    let cfg = &mut run.finetune;
    cfg.steps = args.steps.unwrap_or(cfg.steps);
    cfg.lr = args.lr.unwrap_or(cfg.lr);
    cfg.n_samples = args.n_samples.unwrap_or(cfg.n_samples);
    cfg.freeze_operator |= args.freeze_operator;
    check_compatible(&run, protocol)?;
    let est = estimator(run.eval.n_samples, run.seed);
    let before = evaluate_report(&loaded.state.model, &run, protocol, est, &loaded.label)?;
    let outcome = finetune(&loaded.state, protocol, meas, &run.finetune)?;
    let after = evaluate_report(&outcome.state.model, &run, protocol, est, &format!("{} + fine-tuning", loaded.label))?;
    before.write(&out.join("before.txt"))?;
    after.write(&out.join("after.txt"))?;
    let mut s = String::from("# step data_loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        let _ = writeln!(s, "{i} {l:.17e}");
    }
    write_text(&out.join("losses.tsv"), &s)?;
    save_checkpoint(&out.join("finetuned.ckpt"), &outcome.state, &run.to_toml())?;
    if let (Some(first), Some(last)) = (outcome.losses.first(), outcome.losses.last()) {
        log::info!("data loss {first:.4e} -> {last:.4e} over {} steps", outcome.losses.len());
    }
    Ok(())
}

// ---------------------------------------------------------------- super-resolution

#[derive(Serialize)]
struct SuperresFile {
    train_nt: usize,
    eval_nt: usize,
    x: noqs::report::SuperresSummary,
    zz: noqs::report::SuperresSummary,
    passes: bool,
}

pub fn cmd_superres(ckpt: &Path, protocol: &Protocol, train_nt: usize, eval_nt: usize, n_samples: usize, out: &Path) -> Result<bool> {
    if eval_nt <= train_nt {
        return Err(Error::Argument(format!("eval N_t ({eval_nt}) must exceed train N_t ({train_nt})")));
    }
    create_dir(out)?;
    let loaded = load(ckpt)?;
    let run = &loaded.run;
    let coarse = protocol.resample(TimeGrid::new(protocol.grid.t_max, train_nt)?)?;
    let fine = protocol.resample(TimeGrid::new(protocol.grid.t_max, eval_nt)?)?;
    let est = estimator(n_samples, run.seed);
    let init = run.train.initial_state;
    let mut profiles = Vec::new();
    for p in [&coarse, &fine] {
        let model = evaluate_report(&loaded.state.model, run, p, est, &loaded.label)?;
        let exact = oracle_report(run, init, p, 1e-9)?;
        let d = |o| -> Vec<f64> { model.series(o).iter().zip(exact.series(o)).map(|(a, b)| (a - b).abs()).collect() };
        profiles.push((p.grid, d(Observable::X), d(Observable::ZZ), model));
    }
    let (cg, cx, czz, _) = &profiles[0];
    let (fg, fx, fzz, fine_report) = &profiles[1];
    let sx = superres_summary(*cg, cx, *fg, fx)?;
    let szz = superres_summary(*cg, czz, *fg, fzz)?;
    let passes = sx.passes() && szz.passes();
    let mut s = String::from("# t |dX| |dZZ|\n");
    for (i, t) in fg.points().iter().enumerate() {
        let _ = writeln!(s, "{t:.17e} {:.17e} {:.17e}", fx[i], fzz[i]);
    }
    write_text(&out.join("error_profile.tsv"), &s)?;
    fine_report.write(&out.join("fine.txt"))?;
    let file = SuperresFile { train_nt, eval_nt, x: sx, zz: szz, passes };
    write_text(&out.join("summary.toml"), &toml::to_string(&file).map_err(|e| Error::Config(e.to_string()))?)?;
    let zeros = vec![0.0; fx.len()];
    let pts = fg.points();
    let svg = render(
        "super-resolution error",
        "|model − exact|",
        &[
            Curve { label: "|ΔX|", t: &pts, y: fx, err: &zeros },
            Curve { label: "|ΔZZ|", t: &pts, y: fzz, err: &zeros },
        ],
    )
    .map_err(Error::Numeric)?;
    write_text(&out.join("error_profile.svg"), &svg)?;
    if !passes {
        log::warn!("super-resolution check failed: artifacts at the training-grid scale");
    }
    Ok(passes)
}

// ---------------------------------------------------------------- compare

pub fn cmd_compare(a: &Path, b: &Path, labels: (&str, &str), out: &Path) -> Result<CompareMetrics> {
    let ra = TrajectoryReport::read(a)?;
    let rb = TrajectoryReport::read(b)?;
    let m = compare(&ra, &rb)?;
    create_dir(out)?;
    write_text(&out.join("metrics.toml"), &toml::to_string(&m).map_err(|e| Error::Config(e.to_string()))?)?;
    for o in Observable::ALL {
        let name = o.name();
        let mut s = format!("# t {0} {0}_err {1} {1}_err\n", labels.0, labels.1);
        let (ta, tb) = (ra.times(), rb.times());
        let (ya, ea, yb, eb) = (ra.series(o), ra.errors(o), rb.series(o), rb.errors(o));
        for &(i, j) in &noqs::report::shared_indices(&ta, &tb) {
            let _ = writeln!(s, "{:.17e} {:.17e} {:.17e} {:.17e} {:.17e}", ta[i], ya[i], ea[i], yb[j], eb[j]);
        }
        write_text(&out.join(format!("{name}.tsv")), &s)?;
        let svg = render(
            name,
            name,
            &[
                Curve { label: labels.0, t: &ta, y: &ya, err: &ea },
                Curve { label: labels.1, t: &tb, y: &yb, err: &eb },
            ],
        )
        .map_err(Error::Numeric)?;
        write_text(&out.join(format!("{name}.svg")), &svg)?;
    }
    Ok(m)
}
