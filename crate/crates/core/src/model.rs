//! Model configuration and the named parameter store shared by the
//! transformer and the neural operator.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, Error, Result};
use crate::lattice::{build_lattice, Lattice, Ordering};
use crate::tape::{Mat, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatticeConfig {
    pub lx: usize,
    pub ly: usize,
    pub ordering: Ordering,
    /// Only open boundaries are supported; kept explicit so configs say so.
    pub boundary: String,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        Self { lx: 2, ly: 2, ordering: Ordering::Raster, boundary: "open".into() }
    }
}

impl LatticeConfig {
    pub fn build(&self) -> Result<Lattice> {
        if self.boundary != "open" {
            return Err(Error::Config(format!(
                "boundary '{}' is not supported; only open boundaries are implemented",
                self.boundary
            )));
        }
        build_lattice(self.lx, self.ly, self.ordering)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub l_t: usize,
    pub d_e: usize,
    pub n_h: usize,
    pub d_f: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self { l_t: 2, d_e: 32, n_h: 4, d_f: 128 }
    }
}

impl TransformerConfig {
    pub fn d_h(&self) -> usize {
        self.d_e / self.n_h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FnoConfig {
    pub l_f: usize,
    pub d_v: usize,
    pub k_max: usize,
    pub n_c: usize,
    /// Hidden width of the token projection; 0 means "use d_f".
    pub proj_hidden: usize,
    /// Give each retained mode its own channel-mixing matrix instead of one
    /// shared `R`.
    pub per_mode_weights: bool,
}

impl Default for FnoConfig {
    fn default() -> Self {
        Self { l_f: 3, d_v: 32, k_max: 32, n_c: 2, proj_hidden: 0, per_mode_weights: false }
    }
}

pub const D_IN: usize = 2;
/// Lifting inputs: the driving fields plus a clock channel.
pub const LIFT_IN: usize = D_IN + 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub lattice: LatticeConfig,
    pub transformer: TransformerConfig,
    pub fno: FnoConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.transformer;
        let f = &self.fno;
        let err = |m: String| Err(Error::Config(m));
        if t.l_t == 0 || t.d_e == 0 || t.n_h == 0 || t.d_f == 0 {
            return err("transformer dimensions must be positive".into());
        }
        if t.d_e % t.n_h != 0 {
            return err(format!("d_e={} is not divisible by n_h={}", t.d_e, t.n_h));
        }
        if f.l_f == 0 || f.d_v == 0 || f.k_max == 0 || f.n_c == 0 {
            return err("neural operator dimensions must be positive".into());
        }
        self.lattice.build()?;
        Ok(())
    }

    pub fn proj_hidden(&self) -> usize {
        if self.fno.proj_hidden == 0 { self.transformer.d_f } else { self.fno.proj_hidden }
    }
}

/// Named tensors in a fixed insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Mat] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Mat] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &Mat {
        &self.tensors[self.index[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Mat {
        let i = self.index[name];
        &mut self.tensors[i]
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Mat::is_finite)
    }

    /// Puts every tensor on `tape`; names matched by `frozen` become constants.
    pub fn bind<'t, 'p>(&'p self, tape: &'t Tape, frozen: impl Fn(&str) -> bool) -> Bound<'t, 'p> {
        let vars = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, m)| tape.leaf(m.clone(), !frozen(n)))
            .collect();
        Bound { vars, store: self }
    }

    pub fn bind_constant<'t, 'p>(&'p self, tape: &'t Tape) -> Bound<'t, 'p> {
        self.bind(tape, |_| true)
    }
}

/// Parameters placed on a tape.
pub struct Bound<'t, 'p> {
    pub vars: Vec<Var<'t>>,
    store: &'p ParamStore,
}

impl<'t> Bound<'t, '_> {
    pub fn get(&self, name: &str) -> Var<'t> {
        match self.store.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    /// Gradients of all parameters in store order (zeros where unused).
    pub fn collect_grads(&self, grads: &crate::tape::Gradients) -> Vec<Mat> {
        self.vars.iter().map(|v| grads.get_or_zeros(*v)).collect()
    }
}

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub lattice: Lattice,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let lattice = config.lattice.build()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let mut normal = |rows: usize, cols: usize, std: f64| {
            let d = Normal::new(0.0, std).unwrap();
            Mat::from_vec(rows, cols, (0..rows * cols).map(|_| d.sample(&mut rng)).collect())
        };
        let t = &config.transformer;
        let f = &config.fno;
        let (de, df, n) = (t.d_e, t.d_f, lattice.n);

        p.insert("ansatz.embed", normal(2, de, INIT_STD));
        p.insert("ansatz.start", normal(1, de, INIT_STD));
        p.insert("ansatz.pos", normal(n, de, INIT_STD));
        for l in 0..t.l_t {
            for block in ["self", "cross"] {
                for w in ["wq", "wk", "wv", "wo"] {
                    p.insert(format!("ansatz.l{l}.{block}.{w}"), normal(de, de, INIT_STD));
                }
                p.insert(format!("ansatz.l{l}.{block}.bo"), Mat::zeros(1, de));
            }
            p.insert(format!("ansatz.l{l}.ffn.w1"), normal(de, df, INIT_STD));
            p.insert(format!("ansatz.l{l}.ffn.b1"), Mat::zeros(1, df));
            p.insert(format!("ansatz.l{l}.ffn.w2"), normal(df, de, INIT_STD));
            p.insert(format!("ansatz.l{l}.ffn.b2"), Mat::zeros(1, de));
            for ln in ["ln1", "ln2", "ln3"] {
                p.insert(format!("ansatz.l{l}.{ln}.g"), Mat::filled(1, de, 1.0));
                p.insert(format!("ansatz.l{l}.{ln}.b"), Mat::zeros(1, de));
            }
        }
        p.insert("ansatz.head.w1", normal(de, df, INIT_STD));
        p.insert("ansatz.head.b1", Mat::zeros(1, df));
        // zero output layer: uniform conditionals and zero phase at start
        p.insert("ansatz.head.w2", Mat::zeros(df, 4));
        p.insert("ansatz.head.b2", Mat::zeros(1, 4));

        let (dv, km) = (f.d_v, f.k_max);
        let sv = 1.0 / (dv as f64).sqrt();
        p.insert("fno.lift.w", normal(LIFT_IN, dv, 1.0));
        p.insert("fno.lift.b", normal(1, dv, 1.0));
        let r_rows = if f.per_mode_weights { km * dv } else { dv };
        for l in 0..f.l_f {
            p.insert(format!("fno.l{l}.r"), normal(r_rows, dv, sv));
            p.insert(format!("fno.l{l}.ws"), normal(dv, dv, sv));
        }
        let ph = config.proj_hidden();
        p.insert("fno.proj.w1", normal(dv, ph, sv));
        p.insert("fno.proj.b1", Mat::zeros(1, ph));
        p.insert("fno.proj.w2", normal(ph, f.n_c * de, 1.0 / (ph as f64).sqrt()));
        p.insert("fno.proj.b2", Mat::zeros(1, f.n_c * de));
        p.insert("fno.m0", normal(f.n_c, de, 1.0));

        Ok(Model { config, lattice, params: p })
    }

    /// Checks that a loaded parameter set matches the shapes this config implies.
    pub fn check_shapes(&self, other: &ParamStore) -> Result<()> {
        let mut problems = Vec::new();
        for (name, m) in self.params.names().iter().zip(self.params.tensors()) {
            match other.position(name) {
                None => problems.push(format!("missing {name}")),
                Some(i) => {
                    let o = &other.tensors()[i];
                    if o.shape() != m.shape() {
                        problems.push(format!("{name}: expected {:?}, found {:?}", m.shape(), o.shape()));
                    }
                }
            }
        }
        for name in other.names() {
            if self.params.position(name).is_none() {
                problems.push(format!("unexpected {name}"));
            }
        }
        if !problems.is_empty() {
            bail_arg!("parameter set does not match the model config: {}", problems.join("; "));
        }
        Ok(())
    }
}
