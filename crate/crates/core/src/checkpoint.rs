//! Versioned, digest-checked training checkpoints.
//!
//! A checkpoint is a TOML header followed by a binary payload:
//!
//! ```text
//! <TOML header>
//! %%payload%%
//! <little-endian f64 tensors, then the loss history>
//! ```
//!
//! The header names every tensor with its shape and records the payload
//! length and its SHA-256 digest, so truncation or corruption is detected
//! before anything is loaded.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{Model, ModelConfig, ParamStore};
use crate::tape::Mat;
use crate::training::{Adam, PretrainReport, StepRecord, TrainState};

pub const FORMAT: &str = "noqs-checkpoint";
pub const VERSION: u32 = 1;
const SEPARATOR: &[u8] = b"\n%%payload%%\n";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct PretrainEntry {
    steps: u64,
    final_loss: f64,
    converged: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    payload_bytes: u64,
    sha256: String,
    step: u64,
    m0_frozen: bool,
    history_len: u64,
    adam_t: u64,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
    best_validation_step: Option<u64>,
    best_validation_loss: Option<f64>,
    pretrain: Option<PretrainEntry>,
    /// Free-form snapshot of the run configuration (TOML text).
    run_config: String,
    model: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub run_config: String,
}

fn push_f64s(buf: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode(state: &TrainState, run_config: &str) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let params = &state.model.params;
    for group in [params.tensors(), &state.adam.m[..], &state.adam.v[..]] {
        for t in group {
            push_f64s(&mut payload, &t.data);
        }
    }
    for r in &state.history {
        payload.extend_from_slice(&r.step.to_le_bytes());
        push_f64s(&mut payload, &[r.tdvp, r.anchor, r.lr]);
        payload.push(r.retried as u8);
    }
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        payload_bytes: payload.len() as u64,
        sha256: hex::encode(Sha256::digest(&payload)),
        step: state.step,
        m0_frozen: state.m0_frozen,
        history_len: state.history.len() as u64,
        adam_t: state.adam.t,
        adam_beta1: state.adam.beta1,
        adam_beta2: state.adam.beta2,
        adam_eps: state.adam.eps,
        best_validation_step: state.best_validation.map(|b| b.0),
        best_validation_loss: state.best_validation.map(|b| b.1),
        pretrain: state.pretrain.as_ref().map(|p| PretrainEntry {
            steps: p.steps,
            final_loss: p.final_loss,
            converged: p.converged,
        }),
        run_config: run_config.into(),
        model: state.model.config.clone(),
        tensors: params
            .names()
            .iter()
            .zip(params.tensors())
            .map(|(n, t)| TensorEntry { name: n.clone(), rows: t.rows, cols: t.cols })
            .collect(),
    };
    let text = toml::to_string(&header).map_err(|e| Error::Numeric(format!("cannot encode checkpoint header: {e}")))?;
    let mut out = text.into_bytes();
    out.extend_from_slice(SEPARATOR);
    out.extend_from_slice(&payload);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn f64s(&mut self, n: usize) -> Vec<f64> {
        let out = self.buf[self.pos..self.pos + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        self.pos += 8 * n;
        out
    }

    fn u64(&mut self) -> u64 {
        let v = u64::from_le_bytes(self.buf[self.pos..self.pos + 8].try_into().unwrap());
        self.pos += 8;
        v
    }

    fn u8(&mut self) -> u8 {
        self.pos += 1;
        self.buf[self.pos - 1]
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let corrupt = |r: &str| Error::corrupt(path, r);
    let split = bytes
        .windows(SEPARATOR.len())
        .position(|w| w == SEPARATOR)
        .ok_or_else(|| corrupt("missing payload separator"))?;
    let text = std::str::from_utf8(&bytes[..split]).map_err(|_| corrupt("header is not UTF-8"))?;
    let table: toml::Table = text.parse().map_err(|e| corrupt(&format!("unreadable header: {e}")))?;
    match table.get("format").and_then(|v| v.as_str()) {
        Some(FORMAT) => {}
        _ => return Err(corrupt("not a checkpoint file")),
    }
    let found = table
        .get("version")
        .and_then(|v| v.as_integer())
        .and_then(|v| u32::try_from(v).ok())
        .ok_or_else(|| corrupt("missing format version"))?;
    if found != VERSION {
        return Err(Error::Version { path: path.into(), found, expected: VERSION });
    }
    let header: Header = table.try_into().map_err(|e| corrupt(&format!("invalid header: {e}")))?;
    let payload = &bytes[split + SEPARATOR.len()..];
    if payload.len() as u64 != header.payload_bytes {
        return Err(corrupt(&format!("payload has {} bytes, header declares {}", payload.len(), header.payload_bytes)));
    }
    if hex::encode(Sha256::digest(payload)) != header.sha256 {
        return Err(corrupt("payload digest mismatch"));
    }
    let counts: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
    let expected = 3 * 8 * counts as u64 + header.history_len * 33;
    if expected != header.payload_bytes {
        return Err(corrupt("tensor table does not match payload size"));
    }

    let mut rd = Reader { buf: payload, pos: 0 };
    let mut read_group = || {
        let mut store = ParamStore::new();
        for t in &header.tensors {
            store.insert(t.name.clone(), Mat::from_vec(t.rows, t.cols, rd.f64s(t.rows * t.cols)));
        }
        store
    };
    let params = read_group();
    let m = read_group().tensors().to_vec();
    let v = read_group().tensors().to_vec();
    let history = (0..header.history_len)
        .map(|_| {
            let step = rd.u64();
            let x = rd.f64s(3);
            let retried = rd.u8() != 0;
            StepRecord { step, tdvp: x[0], anchor: x[1], lr: x[2], retried }
        })
        .collect();

    let mut model = Model::new(header.model.clone(), 0).map_err(|e| corrupt(&format!("stored model config: {e}")))?;
    model.check_shapes(&params).map_err(|e| corrupt(&e.to_string()))?;
    model.params = params;
    let state = TrainState {
        model,
        adam: Adam { beta1: header.adam_beta1, beta2: header.adam_beta2, eps: header.adam_eps, t: header.adam_t, m, v },
        step: header.step,
        history,
        pretrain: header.pretrain.map(|p| PretrainReport { steps: p.steps, final_loss: p.final_loss, converged: p.converged }),
        m0_frozen: header.m0_frozen,
        best_validation: header.best_validation_step.zip(header.best_validation_loss),
    };
    Ok(Checkpoint { state, run_config: header.run_config })
}

pub fn save_checkpoint(path: &Path, state: &TrainState, run_config: &str) -> Result<()> {
    write_atomic(path, &encode(state, run_config)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ansatz;
    use crate::lattice::enumerate_configs;
    use crate::neural_operator::context_tokens;
    use crate::protocols::{sample_fourier_protocol, FourierProtocolSpec, TimeGrid};
    use crate::training::TrainConfig;

    fn state() -> TrainState {
        let mut st = TrainState::new(crate::vmc::tests::small_model(3, 0.2), &TrainConfig::default());
        st.step = 17;
        st.m0_frozen = true;
        st.adam.t = 17;
        st.adam.m[0].data[0] = 0.125;
        st.history.push(StepRecord { step: 16, tdvp: 0.5, anchor: 1e-3, lr: 4e-4, retried: true });
        st.best_validation = Some((10, 0.25));
        st.pretrain = Some(PretrainReport { steps: 0, final_loss: 0.0, converged: true });
        st
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let st = state();
        save_checkpoint(&path, &st, "seed = 3\n").unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.state, st);
        assert_eq!(back.run_config, "seed = 3\n");

        let p = sample_fourier_protocol(&FourierProtocolSpec::default(), TimeGrid::new(1.0, 40).unwrap(), 2).unwrap();
        let configs = enumerate_configs(4);
        let a = context_tokens(&st.model, &p, 0.3).unwrap();
        let b = context_tokens(&back.state.model, &p, 0.3).unwrap();
        assert_eq!(a, b);
        let fa = ansatz::forward(&st.model, &configs, &a.m).unwrap();
        let fb = ansatz::forward(&back.state.model, &configs, &b.m).unwrap();
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(x.log_p.to_bits(), y.log_p.to_bits());
            assert_eq!(x.phase.to_bits(), y.phase.to_bits());
        }
    }

    #[test]
    fn truncation_and_corruption_are_refused() {
        let path = Path::new("x.ckpt");
        let bytes = encode(&state(), "").unwrap();
        for cut in [bytes.len() - 1, bytes.len() - 100, bytes.len() / 2, 10] {
            assert!(matches!(decode(&bytes[..cut], path), Err(Error::Corrupt { .. })), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        let last = flipped.len() - 5;
        flipped[last] ^= 1;
        assert!(matches!(decode(&flipped, path), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn version_skew_is_explicit() {
        let bytes = encode(&state(), "").unwrap();
        let text = String::from_utf8_lossy(&bytes).replacen("version = 1", "version = 7", 1);
        let err = decode(text.as_bytes(), Path::new("v.ckpt"));
        // the lossy conversion may alter the payload, but the version is checked first
        assert!(matches!(err, Err(Error::Version { .. })), "{err:?}");
    }
}
