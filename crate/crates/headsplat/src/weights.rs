//! Named weight storage. Every module reads its parameters from a
//! [`WeightStore`] through [`tape_param`], which both feeds the autodiff tape
//! and (when enabled) records the accessed names — that log is how the
//! drive-path separation property is asserted rather than assumed.

use indexmap::IndexMap;
use ndarray::{Array1, Array2, ArrayD};
use std::collections::BTreeSet;
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::rng::{normal, substream};
use crate::tape::{Tape, Var};

#[derive(Debug, Default)]
pub struct WeightStore {
    entries: IndexMap<String, ArrayD<f64>>,
    access_log: Option<Mutex<BTreeSet<String>>>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.entries.insert(name.into(), value);
    }

    pub fn fetch(&self, name: &str) -> Result<&ArrayD<f64>> {
        if let Some(log) = &self.access_log {
            log.lock().unwrap().insert(name.to_string());
        }
        self.entries.get(name).ok_or_else(|| Error::MissingBlock(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<f64>> {
        self.entries.get_mut(name).ok_or_else(|| Error::MissingBlock(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count, optionally restricted to a name prefix.
    pub fn param_count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn enable_access_log(&mut self) {
        self.access_log = Some(Mutex::new(BTreeSet::new()));
    }

    pub fn take_access_log(&mut self) -> BTreeSet<String> {
        self.access_log
            .take()
            .map(|m| m.into_inner().unwrap())
            .unwrap_or_default()
    }
}

/// Reads a named weight onto the tape as a parameter leaf.
pub fn tape_param(tape: &mut Tape, store: &WeightStore, name: &str) -> Var {
    let value = store.fetch(name).unwrap_or_else(|e| panic!("{e}"));
    tape.param(name, value.clone())
}

// ---- deterministic initialization ----
//
// Each block is initialized from its own substream keyed by (seed, name), so
// initialization is independent of registration order.

fn init_rng(seed: u64, name: &str) -> rand_chacha::ChaCha12Rng {
    substream(seed, &format!("init/{name}"))
}

pub fn init_matrix(store: &mut WeightStore, seed: u64, name: &str, rows: usize, cols: usize, std: f64) {
    let mut rng = init_rng(seed, name);
    let m = Array2::from_shape_fn((rows, cols), |_| std * normal(&mut rng));
    store.insert(name, m.into_dyn());
}

/// Xavier-scaled linear weight (in x out).
pub fn init_linear(store: &mut WeightStore, seed: u64, name: &str, fan_in: usize, fan_out: usize) {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    init_matrix(store, seed, name, fan_in, fan_out, std);
}

/// He-scaled conv weight, flattened Ox(C*k*k).
pub fn init_conv(store: &mut WeightStore, seed: u64, name: &str, out_ch: usize, in_ch: usize, k: usize) {
    let fan_in = in_ch * k * k;
    let std = (2.0 / fan_in as f64).sqrt();
    init_matrix(store, seed, name, out_ch, fan_in, std);
}

pub fn init_zeros2(store: &mut WeightStore, name: &str, rows: usize, cols: usize) {
    store.insert(name, Array2::<f64>::zeros((rows, cols)).into_dyn());
}

pub fn init_zeros1(store: &mut WeightStore, name: &str, len: usize) {
    store.insert(name, Array1::<f64>::zeros(len).into_dyn());
}

pub fn init_ones1(store: &mut WeightStore, name: &str, len: usize) {
    store.insert(name, Array1::<f64>::from_elem(len, 1.0).into_dyn());
}
