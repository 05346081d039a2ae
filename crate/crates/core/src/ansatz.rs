//! Autoregressive transformer wavefunction conditioned on context tokens.
//!
//! Position 0 of the input sequence holds a learnable start token and
//! position `i > 0` holds the embedding of `σ_{i-1}`, so the output at
//! position `i` only sees `σ_{<i}` and parameterises the conditional for
//! site `i`. The head emits four numbers per position: two logits and one
//! phase contribution for each value of `σ_i`.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail_arg, Result};
use crate::model::{Bound, Model};
use crate::tape::{Dual, Mat, Tape};

const LN_EPS: f64 = 1e-5;

/// Embedding-table row for a spin value.
#[inline]
pub fn spin_index(s: i8) -> usize {
    ((s + 1) / 2) as usize
}

/// Log Born probability and phase of one configuration; `log ψ = log_p/2 + i·phase`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WavefunctionValue {
    pub log_p: f64,
    pub phase: f64,
}

/// Per-configuration outputs, each (B×1).
pub struct LogPsi<'t> {
    pub log_p: Dual<'t>,
    pub phase: Dual<'t>,
}

fn layer_norm<'t>(x: Dual<'t>, g: Dual<'t>, b: Dual<'t>) -> Dual<'t> {
    let d = x.val.shape().1 as f64;
    let mean = x.row_sum().scale(1.0 / d);
    let xc = x.add_col(mean.scale(-1.0));
    let var = xc.mul(xc).row_sum().scale(1.0 / d);
    let inv = var.shift(LN_EPS).powf(-0.5);
    xc.mul_col(inv).mul_row(g).add_row(b)
}

/// Head outputs `(B·N) × 4` for a batch of configurations.
pub fn head_outputs<'t>(model: &Model, b: &Bound<'t, '_>, configs: &[Vec<i8>], ctx: Dual<'t>) -> Result<Dual<'t>> {
    let cfg = &model.config.transformer;
    let n = model.lattice.n;
    let batch = configs.len();
    if batch == 0 {
        bail_arg!("no configurations given");
    }
    for c in configs {
        if c.len() != n {
            bail_arg!("configuration length {} does not match {} sites", c.len(), n);
        }
    }
    let (nc, dctx) = ctx.val.shape();
    if dctx != cfg.d_e || nc == 0 {
        bail_arg!("context tokens are {nc}x{dctx}, expected N_c x {}", cfg.d_e);
    }
    let tape = ctx.val.tape();
    let p = |name: &str| Dual::constant(b.get(name));
    let (de, dh, nh) = (cfg.d_e, cfg.d_h(), cfg.n_h);
    let scale = 1.0 / (dh as f64).sqrt();

    // table rows: 0 → σ=−1, 1 → σ=+1, 2 → start token
    let table = Dual::concat_cols(tape, &[p("ansatz.embed").reshape(1, 2 * de), p("ansatz.start")]).reshape(3, de);
    let idx: Rc<[usize]> = configs
        .iter()
        .flat_map(|c| std::iter::once(2).chain(c[..n - 1].iter().map(|&s| spin_index(s))))
        .collect();
    let mut x = table.gather_rows(idx).add(p("ansatz.pos").tile_rows(batch));

    for l in 0..cfg.l_t {
        let w = |s: &str| p(&format!("ansatz.l{l}.{s}"));

        let (q, k, v) = (x.matmul(w("self.wq")), x.matmul(w("self.wk")), x.matmul(w("self.wv")));
        let heads: Vec<Dual> = (0..nh)
            .map(|h| {
                let (qh, kh, vh) = (q.slice_cols(h * dh, dh), k.slice_cols(h * dh, dh), v.slice_cols(h * dh, dh));
                qh.bmm_nt(kh, batch).scale(scale).softmax(true).bmm(vh, batch)
            })
            .collect();
        let sa = Dual::concat_cols(tape, &heads).matmul(w("self.wo")).add_row(w("self.bo"));
        x = layer_norm(x.add(sa), w("ln1.g"), w("ln1.b"));

        let q = x.matmul(w("cross.wq"));
        let (k, v) = (ctx.matmul(w("cross.wk")), ctx.matmul(w("cross.wv")));
        let heads: Vec<Dual> = (0..nh)
            .map(|h| {
                let (qh, kh, vh) = (q.slice_cols(h * dh, dh), k.slice_cols(h * dh, dh), v.slice_cols(h * dh, dh));
                qh.matmul_nt(kh).scale(scale).softmax(false).matmul(vh)
            })
            .collect();
        let ca = Dual::concat_cols(tape, &heads).matmul(w("cross.wo")).add_row(w("cross.bo"));
        x = layer_norm(x.add(ca), w("ln2.g"), w("ln2.b"));

        let ff = x.matmul(w("ffn.w1")).add_row(w("ffn.b1")).gelu().matmul(w("ffn.w2")).add_row(w("ffn.b2"));
        x = layer_norm(x.add(ff), w("ln3.g"), w("ln3.b"));
    }

    Ok(x.matmul(p("ansatz.head.w1"))
        .add_row(p("ansatz.head.b1"))
        .gelu()
        .matmul(p("ansatz.head.w2"))
        .add_row(p("ansatz.head.b2")))
}

/// `log p(σ)` and `phase(σ)` for each configuration, with time tangents
/// whenever `ctx` carries one.
pub fn log_psi<'t>(model: &Model, b: &Bound<'t, '_>, configs: &[Vec<i8>], ctx: Dual<'t>) -> Result<LogPsi<'t>> {
    let out = head_outputs(model, b, configs, ctx)?;
    let (batch, n) = (configs.len(), model.lattice.n);
    let sel: Rc<[usize]> = configs.iter().flat_map(|c| c.iter().map(|&s| spin_index(s))).collect();
    let logits = out.slice_cols(0, 2);
    let site_lp = logits.pick(sel.clone()).sub(logits.logsumexp());
    let site_phase = out.slice_cols(2, 2).pick(sel);
    Ok(LogPsi {
        log_p: site_lp.reshape(batch, n).row_sum(),
        phase: site_phase.reshape(batch, n).row_sum(),
    })
}

/// Value-only evaluation.
pub fn forward(model: &Model, configs: &[Vec<i8>], context: &Mat) -> Result<Vec<WavefunctionValue>> {
    for c in configs {
        model.lattice.check(c)?;
    }
    let tape = Tape::new();
    let b = model.params.bind_constant(&tape);
    let ctx = Dual::constant(tape.constant(context.clone()));
    let out = log_psi(model, &b, configs, ctx)?;
    let (lp, ph) = (out.log_p.val.value(), out.phase.val.value());
    let vals: Vec<WavefunctionValue> =
        lp.data.iter().zip(&ph.data).map(|(&log_p, &phase)| WavefunctionValue { log_p, phase }).collect();
    if vals.iter().any(|v| !v.log_p.is_finite() || !v.phase.is_finite()) {
        return Err(crate::Error::Numeric("non-finite wavefunction value in forward pass".into()));
    }
    Ok(vals)
}

/// `p(σ_i = +1 | σ_{<i})` at every position for each configuration.
fn prob_up_all(model: &Model, configs: &[Vec<i8>], context: &Mat) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let b = model.params.bind_constant(&tape);
    let ctx = Dual::constant(tape.constant(context.clone()));
    let out = head_outputs(model, &b, configs, ctx)?.val.value();
    Ok((0..out.rows)
        .map(|r| {
            let (l0, l1) = (out.at(r, 0), out.at(r, 1));
            1.0 / (1.0 + (l0 - l1).exp())
        })
        .collect())
}

/// Conditional distribution of the next spin given a prefix: `(p(+1), p(−1))`.
pub fn conditionals(model: &Model, prefix: &[i8], context: &Mat) -> Result<(f64, f64)> {
    let n = model.lattice.n;
    if prefix.len() >= n {
        bail_arg!("prefix of length {} leaves no site to condition (N={n})", prefix.len());
    }
    if prefix.iter().any(|&s| s != 1 && s != -1) {
        bail_arg!("prefix entries must be +1 or -1");
    }
    let mut full = prefix.to_vec();
    full.resize(n, 1);
    let up = prob_up_all(model, &[full], context)?[prefix.len()];
    Ok((up, 1.0 - up))
}

/// Exact autoregressive sampling. Samples sharing a prefix share one
/// forward pass, so the cost at depth `i` is bounded by `2^i` configurations.
pub fn sample(model: &Model, context: &Mat, count: usize, seed: u64) -> Result<Vec<Vec<i8>>> {
    if count == 0 {
        bail_arg!("sample count must be at least 1");
    }
    let n = model.lattice.n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: Vec<f64> = (0..count * n).map(|_| rng.random::<f64>()).collect();
    let mut samples = vec![vec![1i8; n]; count];
    for i in 0..n {
        let mut groups: BTreeMap<Vec<i8>, Vec<usize>> = BTreeMap::new();
        for (s, cfg) in samples.iter().enumerate() {
            groups.entry(cfg[..i].to_vec()).or_default().push(s);
        }
        let padded: Vec<Vec<i8>> = groups
            .keys()
            .map(|k| {
                let mut c = k.clone();
                c.resize(n, 1);
                c
            })
            .collect();
        let up = prob_up_all(model, &padded, context)?;
        for (g, members) in groups.values().enumerate() {
            let p = up[g * n + i];
            for &s in members {
                samples[s][i] = if u[s * n + i] < p { 1 } else { -1 };
            }
        }
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::enumerate_configs;
    use crate::model::ModelConfig;
    use rand_distr::{Distribution, Normal};

    fn small_config() -> ModelConfig {
        let mut c = ModelConfig::default();
        c.transformer = crate::model::TransformerConfig { l_t: 2, d_e: 8, n_h: 2, d_f: 16 };
        c.fno.n_c = 3;
        c
    }

    /// Randomises every parameter so no test relies on the zero head.
    pub(crate) fn randomized(mut m: Model, seed: u64, std: f64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, std).unwrap();
        for t in m.params.tensors_mut() {
            for x in &mut t.data {
                *x += d.sample(&mut rng);
            }
        }
        m
    }

    fn ctx(m: &Model, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, 1.0).unwrap();
        let (nc, de) = (m.config.fno.n_c, m.config.transformer.d_e);
        Mat::from_vec(nc, de, (0..nc * de).map(|_| d.sample(&mut rng)).collect())
    }

    #[test]
    fn zero_head_gives_uniform_state() {
        let m = Model::new(small_config(), 3).unwrap();
        let c = ctx(&m, 1);
        let v = forward(&m, &enumerate_configs(4), &c).unwrap();
        for w in v {
            assert!((w.log_p + 4.0 * std::f64::consts::LN_2).abs() < 1e-14);
            assert_eq!(w.phase, 0.0);
        }
        assert_eq!(conditionals(&m, &[], &c).unwrap(), (0.5, 0.5));
        assert!(conditionals(&m, &[1, 1, 1, 1], &c).is_err());
    }

    #[test]
    fn normalized_for_random_parameters() {
        for seed in 0..4 {
            let m = randomized(Model::new(small_config(), seed).unwrap(), seed + 10, 0.5);
            let c = ctx(&m, seed);
            let v = forward(&m, &enumerate_configs(4), &c).unwrap();
            let total: f64 = v.iter().map(|w| w.log_p.exp()).sum();
            assert!((total - 1.0).abs() < 1e-10, "{total}");
        }
    }

    #[test]
    fn suffix_flips_leave_earlier_conditionals_bit_identical() {
        let m = randomized(Model::new(small_config(), 5).unwrap(), 6, 0.5);
        let c = ctx(&m, 2);
        let base = vec![1, -1, 1, 1];
        let p0 = prob_up_all(&m, &[base.clone()], &c).unwrap();
        for j in 0..4 {
            let mut f = base.clone();
            f[j] = -f[j];
            let p1 = prob_up_all(&m, &[f], &c).unwrap();
            for i in 0..=j {
                assert_eq!(p0[i].to_bits(), p1[i].to_bits(), "site {i} after flipping {j}");
            }
        }
    }

    #[test]
    fn sampled_path_conditionals_multiply_to_forward() {
        let m = randomized(Model::new(small_config(), 8).unwrap(), 9, 0.5);
        let c = ctx(&m, 3);
        for s in sample(&m, &c, 20, 4).unwrap() {
            let mut lp = 0.0;
            for i in 0..4 {
                let (up, down) = conditionals(&m, &s[..i], &c).unwrap();
                assert!((up + down - 1.0).abs() < 1e-12);
                lp += if s[i] == 1 { up.ln() } else { down.ln() };
            }
            let f = forward(&m, &[s], &c).unwrap()[0].log_p;
            assert!((lp - f).abs() < 1e-10);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let m = randomized(Model::new(small_config(), 1).unwrap(), 2, 0.5);
        let c = ctx(&m, 0);
        assert_eq!(sample(&m, &c, 1, 7).unwrap(), sample(&m, &c, 1, 7).unwrap());
        assert_eq!(sample(&m, &c, 50, 7).unwrap(), sample(&m, &c, 50, 7).unwrap());
        assert!(sample(&m, &c, 0, 7).is_err());
    }

    #[test]
    fn zero_head_marginals_are_fair() {
        let m = Model::new(small_config(), 1).unwrap();
        let c = ctx(&m, 0);
        let n = 100_000;
        let s = sample(&m, &c, n, 11).unwrap();
        let bound = 4.0 * (0.25 / n as f64).sqrt();
        for i in 0..4 {
            let f = s.iter().filter(|x| x[i] == 1).count() as f64 / n as f64;
            assert!((f - 0.5).abs() < bound);
        }
    }

    #[test]
    fn cross_attention_is_invariant_to_token_order() {
        let m = randomized(Model::new(small_config(), 12).unwrap(), 13, 0.5);
        let c = ctx(&m, 5);
        let mut perm = Mat::zeros(c.rows, c.cols);
        for (r, src) in [2, 0, 1].iter().enumerate() {
            perm.row_mut(r).copy_from_slice(c.row(*src));
        }
        let cfgs = enumerate_configs(4);
        let a = forward(&m, &cfgs, &c).unwrap();
        let b = forward(&m, &cfgs, &perm).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.log_p - y.log_p).abs() < 1e-12 && (x.phase - y.phase).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_normalized() {
        let m = randomized(Model::new(small_config(), 2).unwrap(), 3, 0.5);
        let tape = Tape::new();
        let b = m.params.bind_constant(&tape);
        let x = tape.constant(ctx(&m, 9));
        let q = x.matmul(b.get("ansatz.l0.cross.wq")).matmul_nt(x.matmul(b.get("ansatz.l0.cross.wk")));
        for causal in [false, true] {
            let s = q.softmax(causal).value();
            for r in 0..s.rows {
                assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let m = randomized(Model::new(small_config(), 21).unwrap(), 22, 0.3);
        let c = ctx(&m, 4);
        let cfgs = vec![vec![1, -1, -1, 1], vec![-1, -1, 1, 1]];
        // weighted mixture of log_p and phase so both heads are exercised
        let objective = |model: &Model| -> f64 {
            let v = forward(model, &cfgs, &c).unwrap();
            v.iter().enumerate().map(|(i, w)| (i as f64 + 1.0) * w.log_p + 0.7 * w.phase).sum()
        };
        let tape = Tape::new();
        let b = m.params.bind(&tape, |_| false);
        let out = log_psi(&m, &b, &cfgs, Dual::constant(tape.constant(c.clone()))).unwrap();
        let w = tape.constant(Mat::from_vec(2, 1, vec![1.0, 2.0]));
        let loss = out.log_p.val.mul(w).sum().add(out.phase.val.sum().scale(0.7));
        let grads = b.collect_grads(&tape.backward(loss));

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let h = 1e-5;
        for _ in 0..40 {
            let pi = rng.random_range(0..m.params.len());
            let k = rng.random_range(0..m.params.tensors()[pi].len());
            let mut mp = m.clone();
            mp.params.tensors_mut()[pi].data[k] += h;
            let mut mm = m.clone();
            mm.params.tensors_mut()[pi].data[k] -= h;
            let fd = (objective(&mp) - objective(&mm)) / (2.0 * h);
            let ad = grads[pi].data[k];
            let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-3);
            assert!(rel < 1e-4, "{}[{k}]: ad {ad} fd {fd}", m.params.names()[pi]);
        }
    }
}
