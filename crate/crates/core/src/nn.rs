//! Layers and parameter management.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted path names and are
//! bound onto a fresh tape at the start of every step through a [`Forward`]
//! context. Binding is cached per step, so a parameter shared by two call
//! sites becomes a single tape leaf and its gradients accumulate. Insertion
//! order is preserved everywhere, which keeps optimizer updates and
//! checkpoint layout deterministic.

use crate::error::{Error, Result};
use crate::tensor::{conv, ops, Scalar, Tape, Var};
use indexmap::IndexMap;
use ndarray::{Array1, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::sync::Arc;

#[derive(Clone, Debug)]
pub struct Param<S: Scalar> {
    pub value: Arc<ArrayD<S>>,
    pub trainable: bool,
}

/// Named parameters plus non-trainable buffers (running statistics).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S: Scalar> {
    params: IndexMap<String, Param<S>>,
    buffers: IndexMap<String, ArrayD<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: IndexMap::new(), buffers: IndexMap::new() }
    }

    pub fn register(&mut self, name: &str, value: ArrayD<S>) {
        let prev = self
            .params
            .insert(name.to_string(), Param { value: Arc::new(value), trainable: true });
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn register_buffer(&mut self, name: &str, value: ArrayD<S>) {
        let prev = self.buffers.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate buffer {name}");
    }

    pub fn get(&self, name: &str) -> &Param<S> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn buffer(&self, name: &str) -> &ArrayD<S> {
        self.buffers
            .get(name)
            .unwrap_or_else(|| panic!("unknown buffer {name}"))
    }

    pub fn set_buffer(&mut self, name: &str, value: ArrayD<S>) {
        let slot = self
            .buffers
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown buffer {name}"));
        assert_eq!(slot.shape(), value.shape(), "buffer {name} shape changed");
        *slot = value;
    }

    /// Replaces a parameter value, e.g. when loading a checkpoint.
    pub fn set_value(&mut self, name: &str, value: ArrayD<S>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {name}: stored shape {:?} vs incoming {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    /// Applies an in-place update to a trainable parameter. The tape that
    /// bound it must be dropped first so the Arc is unique again.
    pub fn update(&mut self, name: &str, f: impl FnOnce(&mut ArrayD<S>)) {
        let p = self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        f(Arc::make_mut(&mut p.value));
    }

    /// Marks every parameter under `prefix` (dotted path) trainable or not.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.params.iter_mut() {
            if name == prefix || name.starts_with(&format!("{prefix}.")) {
                p.trainable = trainable;
            }
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.get(name).trainable
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &ArrayD<S>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters, trainable or not.
    pub fn param_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn param_count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(name, _)| {
                name.as_str() == prefix || name.starts_with(&format!("{prefix}."))
            })
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// Standalone store holding only the entries under `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<S> {
        let dotted = format!("{prefix}.");
        let matches = |name: &str| name == prefix || name.starts_with(&dotted);
        let mut out = ParamStore::new();
        for (name, p) in &self.params {
            if matches(name) {
                out.params.insert(name.clone(), p.clone());
            }
        }
        for (name, b) in &self.buffers {
            if matches(name) {
                out.buffers.insert(name.clone(), b.clone());
            }
        }
        out
    }

    /// Copies every param and buffer of `other` under `prefix` into this
    /// store by name. Shapes must match; returns the entry count copied.
    pub fn adopt(&mut self, other: &ParamStore<S>, prefix: &str) -> Result<usize> {
        let dotted = format!("{prefix}.");
        let mut copied = 0usize;
        for (name, p) in &other.params {
            if name == prefix || name.starts_with(&dotted) {
                self.set_value(name, (*p.value).clone())?;
                copied += 1;
            }
        }
        for (name, b) in &other.buffers {
            if name == prefix || name.starts_with(&dotted) {
                if !self.buffers.contains_key(name) {
                    return Err(Error::config(format!("unknown buffer {name}")));
                }
                self.set_buffer(name, b.clone());
                copied += 1;
            }
        }
        if copied == 0 {
            return Err(Error::config(format!("no entries under prefix {prefix}")));
        }
        Ok(copied)
    }
}

/// Per-step forward context: binds parameters onto the tape (cached), holds
/// the dropout RNG, and tracks train/eval mode.
pub struct Forward<'a, S: Scalar> {
    pub tape: &'a Tape<S>,
    pub store: &'a mut ParamStore<S>,
    pub rng: &'a mut ChaCha8Rng,
    pub train: bool,
    bound: IndexMap<String, Var>,
}

impl<'a, S: Scalar> Forward<'a, S> {
    pub fn new(
        tape: &'a Tape<S>,
        store: &'a mut ParamStore<S>,
        rng: &'a mut ChaCha8Rng,
        train: bool,
    ) -> Self {
        Forward { tape, store, rng, train, bound: IndexMap::new() }
    }

    /// Tape var for a named parameter: a leaf when training and trainable,
    /// a constant otherwise. Repeated calls return the same var.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let p = self.store.get(name);
        let arc = Arc::clone(&p.value);
        let v = if self.train && p.trainable {
            self.tape.leaf(arc)
        } else {
            self.tape.constant_arc(arc)
        };
        self.bound.insert(name.to_string(), v);
        v
    }

    /// Parameters bound as leaves this step, in binding order.
    pub fn bound_leaves(&self) -> Vec<(String, Var)> {
        self.bound
            .iter()
            .filter(|(_, v)| self.tape.requires_grad(**v))
            .map(|(k, v)| (k.clone(), *v))
            .collect()
    }
}

fn normal_draws<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<S> {
    let dist = Normal::new(0.0f64, std).expect("valid std");
    ArrayD::from_shape_fn(IxDyn(shape), |_| S::from_f64(dist.sample(rng)))
}

/// Largest divisor of `channels` that is at most `desired`. Keeps group
/// normalization valid when toy configs shrink channel counts below the
/// configured group count.
pub fn norm_groups(channels: usize, desired: usize) -> usize {
    let cap = desired.min(channels).max(1);
    (1..=cap).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: String,
    bias: Option<String>,
    stride: usize,
    padding: usize,
    groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        assert!(in_ch % groups == 0 && out_ch % groups == 0, "{name}: bad groups");
        let fan_in = (in_ch / groups) * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = format!("{name}.weight");
        store.register(
            &weight,
            normal_draws(rng, &[out_ch, in_ch / groups, kernel, kernel], std),
        );
        let bias = if bias {
            let bname = format!("{name}.bias");
            store.register(&bname, ArrayD::zeros(IxDyn(&[out_ch])));
            Some(bname)
        } else {
            None
        };
        Conv2d { weight, bias, stride, padding, groups }
    }

    pub fn forward<S: Scalar>(&self, f: &mut Forward<'_, S>, x: Var) -> Var {
        let w = f.param(&self.weight);
        let b = self.bias.as_ref().map(|n| f.param(n));
        conv::conv2d(f.tape, x, w, b, self.stride, self.padding, self.groups)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: String,
    bias: String,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.register(&weight, normal_draws(rng, &[out_dim, in_dim], std));
        store.register(&bias, ArrayD::zeros(IxDyn(&[out_dim])));
        Linear { weight, bias }
    }

    pub fn forward<S: Scalar>(&self, f: &mut Forward<'_, S>, x: Var) -> Var {
        let w = f.param(&self.weight);
        let b = f.param(&self.bias);
        ops::linear(f.tape, x, w, Some(b))
    }
}

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    gamma: String,
    beta: String,
    running_mean: String,
    running_var: String,
}

impl BatchNorm2d {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize) -> Self {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        let running_mean = format!("{name}.running_mean");
        let running_var = format!("{name}.running_var");
        store.register(&gamma, ArrayD::from_elem(IxDyn(&[channels]), S::one()));
        store.register(&beta, ArrayD::zeros(IxDyn(&[channels])));
        store.register_buffer(&running_mean, ArrayD::zeros(IxDyn(&[channels])));
        store.register_buffer(&running_var, ArrayD::from_elem(IxDyn(&[channels]), S::one()));
        BatchNorm2d { gamma, beta, running_mean, running_var }
    }

    /// Batch statistics while training (with a running-stat update);
    /// running statistics in eval mode or when this layer is frozen.
    pub fn forward<S: Scalar>(&self, f: &mut Forward<'_, S>, x: Var) -> Var {
        let use_batch_stats = f.train && f.store.is_trainable(&self.gamma);
        let gamma = f.param(&self.gamma);
        let beta = f.param(&self.beta);
        if use_batch_stats {
            let (out, mean, var) = ops::batch_norm_train(f.tape, x, gamma, beta, BN_EPS);
            let m = S::from_f64(BN_MOMENTUM);
            let one_m = S::one() - m;
            let mut rm = as1(f.store.buffer(&self.running_mean));
            let mut rv = as1(f.store.buffer(&self.running_var));
            for (r, b) in rm.iter_mut().zip(mean.iter()) {
                *r = one_m * *r + m * *b;
            }
            for (r, b) in rv.iter_mut().zip(var.iter()) {
                *r = one_m * *r + m * *b;
            }
            f.store.set_buffer(&self.running_mean, rm.into_dyn());
            f.store.set_buffer(&self.running_var, rv.into_dyn());
            out
        } else {
            let mean = as1(f.store.buffer(&self.running_mean));
            let var = as1(f.store.buffer(&self.running_var));
            ops::batch_norm_eval(f.tape, x, gamma, beta, &mean, &var, BN_EPS)
        }
    }
}

fn as1<S: Scalar>(x: &ArrayD<S>) -> Array1<S> {
    x.view().into_dimensionality::<ndarray::Ix1>().expect("1-d buffer").to_owned()
}

const GN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GroupNorm {
    gamma: String,
    beta: String,
    groups: usize,
}

impl GroupNorm {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        desired_groups: usize,
    ) -> Self {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        store.register(&gamma, ArrayD::from_elem(IxDyn(&[channels]), S::one()));
        store.register(&beta, ArrayD::zeros(IxDyn(&[channels])));
        GroupNorm { gamma, beta, groups: norm_groups(channels, desired_groups) }
    }

    pub fn forward<S: Scalar>(&self, f: &mut Forward<'_, S>, x: Var) -> Var {
        let gamma = f.param(&self.gamma);
        let beta = f.param(&self.beta);
        ops::group_norm(f.tape, x, gamma, beta, self.groups, GN_EPS)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn forward<S: Scalar>(&self, f: &mut Forward<'_, S>, x: Var) -> Var {
        if f.train {
            ops::dropout(f.tape, x, self.p, f.rng)
        } else {
            x
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn init_is_deterministic_given_seed() {
        let build = |seed| {
            let mut store = ParamStore::<f32>::new();
            let mut r = rng(seed);
            Conv2d::new(&mut store, &mut r, "c", 3, 8, 3, 1, 1, 1, true);
            Linear::new(&mut store, &mut r, "l", 4, 2);
            store
        };
        let a = build(7);
        let b = build(7);
        let c = build(8);
        assert_eq!(a.get("c.weight").value, b.get("c.weight").value);
        assert_eq!(a.get("l.weight").value, b.get("l.weight").value);
        assert_ne!(a.get("c.weight").value, c.get("c.weight").value);
    }

    #[test]
    fn param_binding_is_cached_per_step() {
        let mut store = ParamStore::<f32>::new();
        let mut r = rng(1);
        let conv = Conv2d::new(&mut store, &mut r, "c", 2, 2, 1, 1, 0, 1, false);
        let tape = Tape::<f32>::new();
        let mut f = Forward::new(&tape, &mut store, &mut r, true);
        let x = f.tape.constant(ArrayD::zeros(IxDyn(&[1, 2, 4, 4])));
        let y1 = conv.forward(&mut f, x);
        let y2 = conv.forward(&mut f, x);
        assert_ne!(y1, y2, "two applications are two nodes");
        assert_eq!(f.bound_leaves().len(), 1, "weight bound once");
    }

    #[test]
    fn frozen_prefix_binds_constants() {
        let mut store = ParamStore::<f32>::new();
        let mut r = rng(2);
        Conv2d::new(&mut store, &mut r, "backbone.stem", 2, 2, 3, 1, 1, 1, false);
        Conv2d::new(&mut store, &mut r, "head.out", 2, 2, 3, 1, 1, 1, false);
        store.set_trainable_prefix("backbone", false);
        let tape = Tape::<f32>::new();
        let mut f = Forward::new(&tape, &mut store, &mut r, true);
        let frozen = f.param("backbone.stem.weight");
        let live = f.param("head.out.weight");
        assert!(!tape.requires_grad(frozen));
        assert!(tape.requires_grad(live));
    }

    #[test]
    fn batch_norm_tracks_running_stats_and_freezes() {
        let mut store = ParamStore::<f32>::new();
        let mut r = rng(3);
        let bn = BatchNorm2d::new(&mut store, "bn", 2);
        // Constant input channel 0 at 4.0, channel 1 at -2.0.
        let mut x = ArrayD::<f32>::zeros(IxDyn(&[2, 2, 2, 2]));
        for n in 0..2 {
            for h in 0..2 {
                for w in 0..2 {
                    x[[n, 0, h, w]] = 4.0;
                    x[[n, 1, h, w]] = -2.0;
                }
            }
        }
        {
            let tape = Tape::<f32>::new();
            let mut f = Forward::new(&tape, &mut store, &mut r, true);
            let xv = f.tape.constant(x.clone());
            let _ = bn.forward(&mut f, xv);
        }
        let rm = store.buffer("bn.running_mean");
        assert!((rm[[0]] - 0.4).abs() < 1e-6, "momentum update: {}", rm[[0]]);
        assert!((rm[[1]] + 0.2).abs() < 1e-6);
        // Frozen layer in train mode uses running stats and does not move.
        store.set_trainable_prefix("bn", false);
        {
            let tape = Tape::<f32>::new();
            let mut f = Forward::new(&tape, &mut store, &mut r, true);
            let xv = f.tape.constant(x);
            let _ = bn.forward(&mut f, xv);
        }
        let rm2 = store.buffer("bn.running_mean");
        assert!((rm2[[0]] - 0.4).abs() < 1e-6, "frozen BN still updated stats");
    }

    #[test]
    fn group_norm_group_fallback() {
        assert_eq!(norm_groups(256, 32), 32);
        assert_eq!(norm_groups(48, 32), 24);
        assert_eq!(norm_groups(7, 32), 7);
        assert_eq!(norm_groups(5, 2), 1);
    }

    #[test]
    fn update_mutates_in_place_after_tape_drop() {
        let mut store = ParamStore::<f32>::new();
        let mut r = rng(4);
        Linear::new(&mut store, &mut r, "l", 2, 2);
        {
            let tape = Tape::<f32>::new();
            let mut f = Forward::new(&tape, &mut store, &mut r, true);
            let _ = f.param("l.weight");
        }
        store.update("l.weight", |w| w.fill(0.5));
        assert!(store.get("l.weight").value.iter().all(|&v| v == 0.5));
        assert_eq!(store.param_count(), 6);
        assert_eq!(store.param_count_prefix("l"), 6);
    }
}
