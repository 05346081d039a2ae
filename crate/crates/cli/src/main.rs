mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use noqs::finetune::MeasurementSet;
use noqs::oracle::InitialState;
use noqs::protocols::Protocol;
use noqs::{Error, Result};

use commands::{FinetuneArgs, ProtocolKind};

#[derive(Parser)]
#[command(name = "noqs", version, about = "Neural-operator quantum states for driven transverse-field Ising dynamics")]
struct Cli {
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Fourier,
    Gaussian,
    Tanh,
    Constant,
}

#[derive(Subcommand)]
enum Command {
    /// Write protocol files.
    GenerateProtocols {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "fourier")]
        kind: Kind,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        amplitude: f64,
        #[arg(long, default_value_t = 0.5)]
        center: f64,
        #[arg(long, default_value_t = 0.1)]
        width: f64,
        #[arg(long, default_value_t = 1.0)]
        baseline: f64,
        #[arg(long, default_value_t = 0.0)]
        hz_amplitude: f64,
        #[arg(long, default_value_t = 0.5)]
        start: f64,
        #[arg(long, default_value_t = 1.5)]
        stop: f64,
        #[arg(long, default_value_t = 10.0)]
        steepness: f64,
        #[arg(long, default_value_t = 0.0)]
        hz_stop: f64,
        #[arg(long, default_value_t = 1.0)]
        hx: f64,
        #[arg(long, default_value_t = 0.0)]
        hz: f64,
    },
    /// Fit the initial state only and write pretrained.ckpt.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on random Fourier protocols.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint (optimiser state included).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate observables of a checkpoint along a protocol.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        protocol: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sum over all configurations instead of sampling.
        #[arg(long)]
        exact: bool,
        #[arg(long)]
        n_samples: Option<usize>,
    },
    /// Adjust a checkpoint to measured ⟨X⟩ and ⟨ZZ⟩.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        protocol: PathBuf,
        #[arg(long)]
        measurements: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        freeze_operator: bool,
    },
    /// Compare a coarse-grid and a fine-grid evaluation against the exact solver.
    Superres {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        protocol: PathBuf,
        #[arg(long, default_value_t = 100)]
        train_nt: usize,
        #[arg(long, default_value_t = 200)]
        eval_nt: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        exact: bool,
        #[arg(long)]
        n_samples: Option<usize>,
    },
    /// Exact reference trajectory.
    Oracle {
        #[arg(long)]
        protocol: PathBuf,
        /// Lattice as LxxLy, e.g. 2x2.
        #[arg(long, default_value = "2x2")]
        lattice: String,
        #[arg(long, default_value = "plus")]
        init: InitialState,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics and plots for two trajectory files.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "a")]
        label_a: String,
        #[arg(long, default_value = "b")]
        label_b: String,
    },
}

fn parse_lattice(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Argument(format!("lattice must look like 2x2, got '{s}'"));
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn n_samples(exact: bool, n: Option<usize>, default: usize) -> Result<usize> {
    match (exact, n) {
        (true, Some(_)) => Err(Error::Argument("--exact and --n-samples are mutually exclusive".into())),
        (true, None) => Ok(0),
        (false, Some(0)) => Err(Error::Argument("--n-samples must be positive; use --exact for enumeration".into())),
        (false, n) => Ok(n.unwrap_or(default)),
    }
}

fn out_dir(cli: Option<PathBuf>, cfg: &config::RunConfig) -> PathBuf {
    cli.unwrap_or_else(|| cfg.paths.out_dir.clone())
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::GenerateProtocols {
            config,
            kind,
            count,
            out,
            amplitude,
            center,
            width,
            baseline,
            hz_amplitude,
            start,
            stop,
            steepness,
            hz_stop,
            hx,
            hz,
        } => {
            let cfg = commands::load_config(config.as_deref(), seed)?;
            let kind = match kind {
                Kind::Fourier => ProtocolKind::Fourier,
                Kind::Gaussian => ProtocolKind::Gaussian { amplitude, center, width, baseline, hz_amplitude },
                Kind::Tanh => ProtocolKind::Tanh { start, stop, center, steepness, hz_stop },
                Kind::Constant => ProtocolKind::Constant { hx, hz },
            };
            for p in commands::generate_protocols(&cfg, &kind, count, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Pretrain { config, out } => {
            let cfg = commands::load_config(config.as_deref(), seed)?;
            let p = commands::cmd_pretrain(&cfg, &out_dir(out, &cfg))?;
            println!("{}", p.display());
        }
        Command::Train { config, out, resume } => {
            let cfg = commands::load_config(config.as_deref(), seed)?;
            let st = commands::cmd_train(&cfg, &out_dir(out, &cfg), resume.as_deref())?;
            if let Some((step, v)) = st.best_validation {
                println!("best validation {v:.6e} at step {step}");
            }
        }
        Command::Evaluate { checkpoint, protocol, out, exact, n_samples: n } => {
            let loaded = commands::load(&checkpoint)?;
            let run = loaded.run.clone().with_seed(seed);
            let n = n_samples(exact, n, run.eval.n_samples)?;
            let p = Protocol::read(&protocol)?;
            let rep = commands::evaluate_report(&loaded.state.model, &run, &p, commands::estimator(n, run.seed), &loaded.label)?;
            rep.write(&out)?;
        }
        Command::Finetune { checkpoint, protocol, measurements, out, steps, lr, n_samples: n, freeze_operator } => {
            let p = Protocol::read(&protocol)?;
            let meas = MeasurementSet::read(&measurements)?;
            meas.check_times(&p)?;
            let args = FinetuneArgs { steps, lr, n_samples: n, freeze_operator, seed };
            commands::cmd_finetune(&checkpoint, &p, &meas, &args, &out)?;
        }
        Command::Superres { checkpoint, protocol, train_nt, eval_nt, out, exact, n_samples: n } => {
            let p = Protocol::read(&protocol)?;
            let n = n_samples(exact, n, config::RunConfig::default().eval.n_samples)?;
            let ok = commands::cmd_superres(&checkpoint, &p, train_nt, eval_nt, n, &out)?;
            println!("{}", if ok { "PASS" } else { "FAIL" });
        }
        Command::Oracle { protocol, lattice, init, tol, out } => {
            let (lx, ly) = parse_lattice(&lattice)?;
            let mut cfg = config::RunConfig::default();
            cfg.lattice.lx = lx;
            cfg.lattice.ly = ly;
            let p = Protocol::read(&protocol)?;
            commands::oracle_report(&cfg, init, &p, tol)?.write(&out)?;
        }
        Command::Compare { a, b, out, label_a, label_b } => {
            let m = commands::cmd_compare(&a, &b, (&label_a, &label_b), &out)?;
            for o in noqs::vmc::Observable::ALL {
                let v = m.get(o);
                println!("{:<3} mae {:.4e} max {:.4e}", o.name(), v.mae, v.max_abs);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
