//! Encoder refiner: stacked LSTM layers over the encoder states with a
//! zero-initialized residual projection, plus the CTC projection head that
//! supervises it.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::FrameLogProbs;
use crate::error::{Error, Result};
use crate::graph::{Graph, Segments, Var};
use crate::model::{EncoderStates, Linear};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinerConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub bidirectional: bool,
}

impl RefinerConfig {
    /// Two unidirectional layers with `hidden = d_model`.
    pub fn desk(d_model: usize) -> Self {
        RefinerConfig { n_layers: 2, hidden: d_model, bidirectional: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.hidden == 0 {
            return Err(Error::Config("refiner needs at least one layer of positive width".into()));
        }
        Ok(())
    }
}

/// Refined encoder states `[T, d_model]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinedStates(pub Array2<f64>);

#[derive(Clone, Copy, Debug)]
struct LstmDirection {
    w_ih: ParamId,
    bias: ParamId,
    w_hh: ParamId,
}

impl LstmDirection {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, din: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let std_in = 1.0 / (din as f64).sqrt();
        let std_h = 1.0 / (hidden as f64).sqrt();
        Ok(LstmDirection {
            w_ih: store.add_normal(format!("{name}.w_ih"), din, 4 * hidden, std_in, rng)?,
            bias: store.add_zeros(format!("{name}.bias"), 1, 4 * hidden)?,
            w_hh: store.add_normal(format!("{name}.w_hh"), hidden, 4 * hidden, std_h, rng)?,
        })
    }

    fn forward(&self, g: &mut Graph, x: Var, segs: &Segments) -> Var {
        let w_ih = g.param(self.w_ih);
        let b = g.param(self.bias);
        let w_hh = g.param(self.w_hh);
        let pre = g.linear(x, w_ih, b);
        g.lstm(pre, w_hh, segs)
    }
}

#[derive(Clone, Debug)]
struct RefinerLayer {
    forward: LstmDirection,
    backward: Option<LstmDirection>,
}

#[derive(Clone, Debug)]
pub struct EncoderRefiner {
    cfg: RefinerConfig,
    layers: Vec<RefinerLayer>,
    proj: Linear,
}

impl EncoderRefiner {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        cfg: RefinerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let width = if cfg.bidirectional { 2 * cfg.hidden } else { cfg.hidden };
        let mut din = d_model;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let forward = LstmDirection::new(store, &format!("{name}.lstm.{l}.fwd"), din, cfg.hidden, rng)?;
            let backward = if cfg.bidirectional {
                Some(LstmDirection::new(store, &format!("{name}.lstm.{l}.bwd"), din, cfg.hidden, rng)?)
            } else {
                None
            };
            layers.push(RefinerLayer { forward, backward });
            din = width;
        }
        let proj = Linear::zeros(store, &format!("{name}.proj"), width, d_model)?;
        Ok(EncoderRefiner { cfg, layers, proj })
    }

    pub fn config(&self) -> RefinerConfig {
        self.cfg
    }

    /// `h_enc + proj(lstm(h_enc))` over packed rows.
    pub fn refine_graph(&self, g: &mut Graph, enc: Var, segs: &Segments) -> Var {
        let mut x = enc;
        for layer in &self.layers {
            let fwd = layer.forward.forward(g, x, segs);
            x = match &layer.backward {
                None => fwd,
                Some(dir) => {
                    let rev = reversal_index(segs);
                    let xr = g.gather_rows(x, rev.clone());
                    let hr = dir.forward(g, xr, segs);
                    let bwd = g.gather_rows(hr, rev);
                    g.concat_cols(fwd, bwd)
                }
            };
        }
        let delta = self.proj.forward(g, x);
        g.add(enc, delta)
    }

    pub fn refine(&self, store: &ParamStore, enc: &EncoderStates) -> RefinedStates {
        let mut g = Graph::inference(store);
        let x = g.constant(enc.0.clone());
        let y = self.refine_graph(&mut g, x, &Segments::single(enc.len()));
        RefinedStates(g.value(y).clone())
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for dir in std::iter::once(&layer.forward).chain(layer.backward.as_ref()) {
                out.extend([dir.w_ih, dir.bias, dir.w_hh]);
            }
        }
        out.extend(self.proj.params());
        out
    }
}

/// Row permutation reversing each segment in place.
fn reversal_index(segs: &Segments) -> Vec<usize> {
    segs.spans().iter().flat_map(|&(s, l)| (0..l).rev().map(move |i| s + i)).collect()
}

/// Linear projection to `vocab_size + 1` classes (blank last). Starts at
/// zero so the CTC gradient reaching the encoder side grows from nothing
/// instead of swamping the attention loss in the first steps.
#[derive(Clone, Copy, Debug)]
pub struct CtcHead {
    pub linear: Linear,
}

impl CtcHead {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, classes: usize) -> Result<Self> {
        Ok(CtcHead { linear: Linear::zeros(store, name, d_model, classes)? })
    }

    pub fn logits_graph(&self, g: &mut Graph, x: Var) -> Var {
        self.linear.forward(g, x)
    }

    /// Row-wise log-distributions over the CTC classes.
    pub fn log_probs(&self, store: &ParamStore, states: &RefinedStates) -> FrameLogProbs {
        let mut g = Graph::inference(store);
        let x = g.constant(states.0.clone());
        let l = self.logits_graph(&mut g, x);
        FrameLogProbs::from_logits(g.value(l).view())
    }

    pub fn params(&self) -> [ParamId; 2] {
        self.linear.params()
    }
}

/// `alpha * l_att + (1 - alpha) * l_ctc`.
pub fn enc_ref_loss(l_att: f64, l_ctc: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(alpha * l_att + (1.0 - alpha) * l_ctc)
}
