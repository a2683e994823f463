//! Low-rank residual adapters, their insertion points inside transformer
//! layers, and the policy that splits parameters into frozen and trainable.

use ndarray::Array2;
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{has_prefix, ParamId, ParamStore, ADAPT_NS, BASE_NS};

pub const DEFAULT_RANK: usize = 8;

/// Linear bottleneck `e -> e + (e · down) · up`. The up-projection starts at
/// zero, so a fresh adapter is the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Adapter {
    pub down: ParamId,
    pub up: ParamId,
}

impl Adapter {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_model: usize, rank: usize, rng: &mut R) -> Result<Self> {
        if rank == 0 || rank >= d_model {
            return Err(Error::Config(format!("adapter rank must be in 1..{d_model}, got {rank}")));
        }
        let std = 1.0 / (d_model as f64).sqrt();
        Ok(Adapter {
            down: store.add_normal(format!("{name}.down"), d_model, rank, std, rng)?,
            up: store.add_zeros(format!("{name}.up"), rank, d_model)?,
        })
    }

    pub fn rank(&self, store: &ParamStore) -> usize {
        store.get(self.down).ncols()
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.down, self.up]
    }

    pub fn forward(&self, g: &mut Graph, e: Var) -> Var {
        let down = g.param(self.down);
        let up = g.param(self.up);
        let z = g.matmul(e, down);
        let delta = g.matmul(z, up);
        g.add(e, delta)
    }
}

/// Plain-matrix form of [`Adapter::forward`].
pub fn adapt(e: &Array2<f64>, down: &Array2<f64>, up: &Array2<f64>) -> Result<Array2<f64>> {
    if e.ncols() != down.nrows() || down.ncols() != up.nrows() || up.ncols() != e.ncols() {
        return Err(Error::Config(format!(
            "adapter shape mismatch: e {:?}, down {:?}, up {:?}",
            e.dim(),
            down.dim(),
            up.dim()
        )));
    }
    Ok(e + &e.dot(down).dot(up))
}

/// The two insertion points of one layer: after self-attention and after
/// the MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdapterPair {
    pub after_attn: Adapter,
    pub after_mlp: Adapter,
}

impl AdapterPair {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_model: usize, rank: usize, rng: &mut R) -> Result<Self> {
        Ok(AdapterPair {
            after_attn: Adapter::new(store, &format!("{name}.attn"), d_model, rank, rng)?,
            after_mlp: Adapter::new(store, &format!("{name}.mlp"), d_model, rank, rng)?,
        })
    }

    pub fn params(&self) -> [ParamId; 4] {
        let [a, b] = self.after_attn.params();
        let [c, d] = self.after_mlp.params();
        [a, b, c, d]
    }
}

/// Optional adapter pairs for every encoder and decoder layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdapterHooks {
    pub encoder: Vec<Option<AdapterPair>>,
    pub decoder: Vec<Option<AdapterPair>>,
}

impl AdapterHooks {
    pub fn empty(cfg: &ModelConfig) -> Self {
        AdapterHooks { encoder: vec![None; cfg.n_enc_layers], decoder: vec![None; cfg.n_dec_layers] }
    }

    pub fn count(&self) -> usize {
        2 * self.encoder.iter().chain(&self.decoder).flatten().count()
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.encoder.iter().chain(&self.decoder).flatten().flat_map(|p| p.params()).collect()
    }

    pub fn check(&self, cfg: &ModelConfig, store: &ParamStore) -> Result<()> {
        if self.encoder.len() != cfg.n_enc_layers || self.decoder.len() != cfg.n_dec_layers {
            return Err(Error::Config("adapter hooks do not match the layer count".into()));
        }
        for pair in self.encoder.iter().chain(&self.decoder).flatten() {
            for a in [pair.after_attn, pair.after_mlp] {
                if store.get(a.down).nrows() != cfg.d_model || store.get(a.up).ncols() != cfg.d_model {
                    return Err(Error::Config("adapter width differs from d_model".into()));
                }
            }
        }
        Ok(())
    }
}

/// One adapter pair per encoder layer under `adapt.<name>.<layer>`.
pub fn wire_encoder_adapters<R: Rng>(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    name: &str,
    rank: usize,
    rng: &mut R,
) -> Result<Vec<Option<AdapterPair>>> {
    (0..cfg.n_enc_layers)
        .map(|l| AdapterPair::new(store, &format!("{ADAPT_NS}.{name}.{l}"), cfg.d_model, rank, rng).map(Some))
        .collect()
}

/// One adapter pair per decoder layer under `adapt.<name>.<layer>`.
pub fn wire_decoder_adapters<R: Rng>(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    name: &str,
    rank: usize,
    rng: &mut R,
) -> Result<Vec<Option<AdapterPair>>> {
    (0..cfg.n_dec_layers)
        .map(|l| AdapterPair::new(store, &format!("{ADAPT_NS}.{name}.{l}"), cfg.d_model, rank, rng).map(Some))
        .collect()
}

/// Which training stage parameters are being classified for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreezePolicy {
    /// Stage 0: the base model itself is trained.
    Base,
    /// Stage 1: the base is frozen and only adaptation modules train.
    Adapt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Frozen,
    Trainable,
}

impl FreezePolicy {
    pub fn classify(self, name: &str) -> Result<ParamRole> {
        let base = has_prefix(name, BASE_NS);
        let adapt = has_prefix(name, ADAPT_NS);
        match (self, base, adapt) {
            (FreezePolicy::Base, true, _) | (FreezePolicy::Adapt, _, true) => Ok(ParamRole::Trainable),
            (FreezePolicy::Base, _, true) | (FreezePolicy::Adapt, true, _) => Ok(ParamRole::Frozen),
            _ => Err(Error::Internal(format!("parameter {name} has no freeze classification"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Partition {
    pub frozen: Vec<ParamId>,
    pub trainable: Vec<ParamId>,
}

impl Partition {
    /// Per-parameter trainable flags, indexed by [`ParamId::index`].
    pub fn mask(&self, n_params: usize) -> Vec<bool> {
        let mut mask = vec![false; n_params];
        for id in &self.trainable {
            mask[id.index()] = true;
        }
        mask
    }
}

/// Splits every parameter of `store` into frozen and trainable, failing on
/// any name the policy cannot classify.
pub fn classify_parameters(policy: FreezePolicy, store: &ParamStore) -> Result<Partition> {
    let mut part = Partition::default();
    for (id, name, _) in store.iter() {
        match policy.classify(name)? {
            ParamRole::Frozen => part.frozen.push(id),
            ParamRole::Trainable => part.trainable.push(id),
        }
    }
    Ok(part)
}
