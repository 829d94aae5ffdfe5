use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::ops::softplus_inverse;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Named parameter tensors in a fixed insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.get_index_of(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn size(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.tensors.values().cloned().collect()
    }

    /// Same names with new values, in order.
    pub fn with_values(&self, values: Vec<Tensor>) -> Result<Self> {
        if values.len() != self.len() {
            return Err(Error::shape("value count differs from parameter count"));
        }
        let mut out = ParamStore::new();
        for ((name, old), v) in self.tensors.iter().zip(values) {
            if old.shape() != v.shape() {
                return Err(Error::shape(format!("{name}: {:?} vs {:?}", old.shape(), v.shape())));
            }
            out.insert(name.clone(), v);
        }
        Ok(out)
    }

    /// Records every tensor as a tape leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t, '_> {
        let vars = self.tensors.values().map(|t| tape.leaf(t.clone())).collect();
        Bound { vars, store: self }
    }
}

/// Tape variables for a [`ParamStore`], addressable by name.
pub struct Bound<'t, 's> {
    vars: Vec<Var<'t>>,
    store: &'s ParamStore,
}

impl<'t, 's> Bound<'t, 's> {
    /// Wraps already-recorded variables (same order as the store).
    pub fn from_vars(store: &'s ParamStore, vars: Vec<Var<'t>>) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::shape("variable count differs from parameter count"));
        }
        Ok(Bound { vars, store })
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.store
            .index_of(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

pub const EMBEDDING: &str = "item_embedding";

/// Fresh parameters for `cfg`:
/// embedding `N(0, 0.02)` with a zero pad row, linear weights
/// `U(±1/√fan_in)`, zero biases, unit norm gains, `A_h = −exp(a_log)` with
/// `exp(a_log) ~ U[1, 16]`, `Δ` bias at `softplus⁻¹(0.1)`, identity-tap time
/// convolution, and transition gates at 0.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    // backbone, time path and feed-forward draw from separate streams, so
    // ablated builds share the remaining weights with the full model
    let stream = |s: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(s);
        r
    };
    let (mut rng, mut time_rng, mut ffn_rng) = (stream(0), stream(1), stream(2));
    let mut p = ParamStore::new();
    let (d, di, n, k, t) = (cfg.d_model, cfg.d_inner(), cfg.state_size, cfg.conv_kernel, cfg.max_len);

    let mut emb = Tensor::normal(&[cfg.vocab, d], 0.02, &mut rng);
    emb.data_mut()[..d].iter_mut().for_each(|v| *v = 0.0);
    p.insert(EMBEDDING, emb);
    p.insert("emb_norm.gain", Tensor::ones(&[d]));
    p.insert("emb_norm.bias", Tensor::zeros(&[d]));
    if !cfg.no_time {
        p.insert("delta_norm.gain", Tensor::scalar(1.0));
        p.insert("delta_norm.bias", Tensor::scalar(0.0));
    }

    let lin = |rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize| {
        Tensor::uniform(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
    };
    for l in 0..cfg.layers {
        let name = |s: &str| format!("layers.{l}.{s}");
        p.insert(name("norm1.gain"), Tensor::ones(&[d]));
        p.insert(name("norm1.bias"), Tensor::zeros(&[d]));
        p.insert(name("expand.weight"), lin(&mut rng, d, di));
        p.insert(name("in_proj.weight"), lin(&mut rng, di, di + 2 * n + 1));
        let mut in_bias = Tensor::zeros(&[di + 2 * n + 1]);
        in_bias.data_mut()[di + 2 * n] = softplus_inverse(0.1);
        p.insert(name("in_proj.bias"), in_bias);
        p.insert(name("conv.weight"), Tensor::uniform(&[k, di + 2 * n], 1.0 / (k as f64).sqrt(), &mut rng));
        p.insert(name("conv.bias"), Tensor::zeros(&[di + 2 * n]));
        let a_log: Vec<f64> = (0..cfg.heads)
            .map(|_| rand::Rng::random_range(&mut rng, 1.0f64..=16.0).ln())
            .collect();
        p.insert(name("a_log"), Tensor::from_vec(a_log));
        if !cfg.no_time {
            p.insert(name("time_gate.w1"), lin(&mut time_rng, t, t));
            p.insert(name("time_gate.b1"), Tensor::zeros(&[t]));
            p.insert(name("time_gate.w2"), lin(&mut time_rng, t, t));
            p.insert(name("time_gate.b2"), Tensor::zeros(&[t]));
            let mut kern = Tensor::zeros(&[k, 1]);
            kern.data_mut()[0] = 1.0;
            p.insert(name("time_conv.weight"), kern);
            p.insert(name("time_conv.bias"), Tensor::zeros(&[1]));
            p.insert(name("time_transition"), Tensor::scalar(0.0));
        }
        p.insert(name("out_proj.weight"), lin(&mut rng, di, d));
        if !cfg.no_ffn {
            p.insert(name("norm2.gain"), Tensor::ones(&[d]));
            p.insert(name("norm2.bias"), Tensor::zeros(&[d]));
            p.insert(name("ffn.w1"), lin(&mut ffn_rng, d, 4 * d));
            p.insert(name("ffn.b1"), Tensor::zeros(&[4 * d]));
            p.insert(name("ffn.w2"), lin(&mut ffn_rng, 4 * d, d));
            p.insert(name("ffn.b2"), Tensor::zeros(&[d]));
        }
    }
    Ok(p)
}
