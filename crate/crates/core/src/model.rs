//! Miniature pre-norm transformer encoder-decoder with adapter hook points.
//!
//! Frames are projected to `d_model` without any downsampling, so encoder
//! states have one row per input frame. Both stacks use sinusoidal position
//! encodings and the output projection is tied to the token embedding.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::adapters::{AdapterHooks, AdapterPair};
use crate::config::{Lang, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Segments, Var};
use crate::params::{ParamId, ParamStore, BASE_NS};

/// Input features `[T, n_feat]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    frames: Array2<f64>,
}

impl FeatureSequence {
    pub fn new(frames: Array2<f64>) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(Error::Input("feature sequence has no frames".into()));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("feature sequence contains non-finite values".into()));
        }
        Ok(FeatureSequence { frames })
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.frames.ncols() != cfg.n_feat {
            return Err(Error::Config(format!(
                "features have {} dims, model expects {}",
                self.frames.ncols(),
                cfg.n_feat
            )));
        }
        if self.len() > cfg.max_src_frames {
            return Err(Error::Input(format!("{} frames exceed max_src_frames {}", self.len(), cfg.max_src_frames)));
        }
        Ok(())
    }
}

/// Encoder output `[T, d_model]`, one row per input frame.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStates(pub Array2<f64>);

impl EncoderStates {
    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut R) -> Result<Self> {
        Ok(Linear {
            w: store.add_normal(format!("{name}.w"), din, dout, 1.0 / (din as f64).sqrt(), rng)?,
            b: store.add_zeros(format!("{name}.b"), 1, dout)?,
        })
    }

    pub fn zeros(store: &mut ParamStore, name: &str, din: usize, dout: usize) -> Result<Self> {
        Ok(Linear {
            w: store.add_zeros(format!("{name}.w"), din, dout)?,
            b: store.add_zeros(format!("{name}.b"), 1, dout)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.linear(x, w, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add_ones(format!("{name}.gamma"), 1, d)?,
            beta: store.add_zeros(format!("{name}.beta"), 1, d)?,
        })
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Clone, Copy, Debug)]
struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl MultiHeadAttention {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, rng)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        kv: Var,
        x_segs: &Segments,
        kv_segs: &Segments,
        n_heads: usize,
        causal: bool,
    ) -> Var {
        let q = self.q.forward(g, x);
        let k = self.k.forward(g, kv);
        let v = self.v.forward(g, kv);
        let a = g.attention(q, k, v, x_segs, kv_segs, n_heads, causal);
        self.o.forward(g, a)
    }
}

#[derive(Clone, Copy, Debug)]
struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, d_ff: usize, rng: &mut R) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, d_ff, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), d_ff, d, rng)?,
        })
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_mlp: LayerNorm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_mlp: LayerNorm,
    mlp: Mlp,
}

/// Prompt construction modes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptMode {
    /// `[sot, lang, task]`
    Single(Lang),
    /// `[sot, lang_en, lang_zh, task]`
    Concat,
    /// One single-language prompt per decoding path, zh first.
    Pair,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Prompt {
    One(Vec<usize>),
    Pair { zh: Vec<usize>, en: Vec<usize> },
}

pub fn build_prompt(mode: PromptMode, cfg: &ModelConfig) -> Prompt {
    let st = &cfg.special_tokens;
    match mode {
        PromptMode::Single(lang) => Prompt::One(vec![st.sot, st.lang(lang), st.task]),
        PromptMode::Concat => Prompt::One(vec![st.sot, st.lang_en, st.lang_zh, st.task]),
        PromptMode::Pair => {
            Prompt::Pair { zh: vec![st.sot, st.lang_zh, st.task], en: vec![st.sot, st.lang_en, st.task] }
        }
    }
}

impl std::str::FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(PromptMode::Concat),
            "pair" => Ok(PromptMode::Pair),
            other => match other.strip_prefix("single:") {
                Some(lang) => Ok(PromptMode::Single(lang.parse()?)),
                None => Err(Error::Input(format!("unknown prompt mode {other:?}"))),
            },
        }
    }
}

/// Sinusoidal position encodings, restarted at zero for every segment.
pub fn positional_encoding(segs: &Segments, d: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((segs.total_rows(), d));
    for &(start, len) in segs.spans() {
        for pos in 0..len {
            for i in (0..d).step_by(2) {
                let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
                pe[[start + pos, i]] = angle.sin();
                if i + 1 < d {
                    pe[[start + pos, i + 1]] = angle.cos();
                }
            }
        }
    }
    pe
}

/// The frozen backbone. Holds parameter ids into a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct BaseModel {
    cfg: ModelConfig,
    input: Linear,
    enc_layers: Vec<EncoderLayer>,
    enc_ln: LayerNorm,
    token_emb: ParamId,
    dec_layers: Vec<DecoderLayer>,
    dec_ln: LayerNorm,
}

impl BaseModel {
    /// Registers freshly initialized base parameters under `base.`.
    pub fn new<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let ns = BASE_NS;
        let input = Linear::new(store, &format!("{ns}.enc.input"), cfg.n_feat, d, rng)?;
        let enc_layers = (0..cfg.n_enc_layers)
            .map(|l| {
                let p = format!("{ns}.enc.{l}");
                Ok(EncoderLayer {
                    ln_attn: LayerNorm::new(store, &format!("{p}.ln_attn"), d)?,
                    attn: MultiHeadAttention::new(store, &format!("{p}.attn"), d, rng)?,
                    ln_mlp: LayerNorm::new(store, &format!("{p}.ln_mlp"), d)?,
                    mlp: Mlp::new(store, &format!("{p}.mlp"), d, cfg.d_ff, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let enc_ln = LayerNorm::new(store, &format!("{ns}.enc.ln_out"), d)?;
        let token_emb = store.add_normal(format!("{ns}.dec.token_emb"), cfg.vocab_size, d, 0.25, rng)?;
        let dec_layers = (0..cfg.n_dec_layers)
            .map(|l| {
                let p = format!("{ns}.dec.{l}");
                Ok(DecoderLayer {
                    ln_self: LayerNorm::new(store, &format!("{p}.ln_self"), d)?,
                    self_attn: MultiHeadAttention::new(store, &format!("{p}.self_attn"), d, rng)?,
                    ln_cross: LayerNorm::new(store, &format!("{p}.ln_cross"), d)?,
                    cross_attn: MultiHeadAttention::new(store, &format!("{p}.cross_attn"), d, rng)?,
                    ln_mlp: LayerNorm::new(store, &format!("{p}.ln_mlp"), d)?,
                    mlp: Mlp::new(store, &format!("{p}.mlp"), d, cfg.d_ff, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dec_ln = LayerNorm::new(store, &format!("{ns}.dec.ln_out"), d)?;
        Ok(BaseModel { cfg: cfg.clone(), input, enc_layers, enc_ln, token_emb, dec_layers, dec_ln })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Encoder over packed frames `[N, n_feat]`; returns `[N, d_model]`.
    pub fn encode_graph(&self, g: &mut Graph, feats: Var, segs: &Segments, hooks: &[Option<AdapterPair>]) -> Var {
        let heads = self.cfg.n_heads;
        let pe = g.constant(positional_encoding(segs, self.cfg.d_model));
        let x = self.input.forward(g, feats);
        let mut x = g.add(x, pe);
        for (layer, hook) in self.enc_layers.iter().zip(hooks) {
            let h = layer.ln_attn.forward(g, x);
            let mut a = layer.attn.forward(g, h, h, segs, segs, heads, false);
            if let Some(pair) = hook {
                a = pair.after_attn.forward(g, a);
            }
            x = g.add(x, a);
            let h = layer.ln_mlp.forward(g, x);
            let mut m = layer.mlp.forward(g, h);
            if let Some(pair) = hook {
                m = pair.after_mlp.forward(g, m);
            }
            x = g.add(x, m);
        }
        self.enc_ln.forward(g, x)
    }

    /// Token embeddings plus position encodings for packed token rows.
    pub fn embed_tokens(&self, g: &mut Graph, tokens: &[usize], segs: &Segments) -> Var {
        let emb = g.param(self.token_emb);
        let x = g.gather_rows(emb, tokens.to_vec());
        let pe = g.constant(positional_encoding(segs, self.cfg.d_model));
        g.add(x, pe)
    }

    /// Decoder over packed token rows attending to packed encoder rows.
    /// Returns the final normalized states `[N, d_model]`.
    pub fn decode_graph(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        tok_segs: &Segments,
        enc: Var,
        enc_segs: &Segments,
        hooks: &[Option<AdapterPair>],
    ) -> Var {
        let heads = self.cfg.n_heads;
        let mut x = self.embed_tokens(g, tokens, tok_segs);
        for (layer, hook) in self.dec_layers.iter().zip(hooks) {
            let h = layer.ln_self.forward(g, x);
            let mut a = layer.self_attn.forward(g, h, h, tok_segs, tok_segs, heads, true);
            if let Some(pair) = hook {
                a = pair.after_attn.forward(g, a);
            }
            x = g.add(x, a);
            let h = layer.ln_cross.forward(g, x);
            let c = layer.cross_attn.forward(g, h, enc, tok_segs, enc_segs, heads, false);
            x = g.add(x, c);
            let h = layer.ln_mlp.forward(g, x);
            let mut m = layer.mlp.forward(g, h);
            if let Some(pair) = hook {
                m = pair.after_mlp.forward(g, m);
            }
            x = g.add(x, m);
        }
        self.dec_ln.forward(g, x)
    }

    /// Tied output projection `y · Eᵀ`.
    pub fn output_logits(&self, g: &mut Graph, y: Var) -> Var {
        let emb = g.param(self.token_emb);
        g.matmul_bt(y, emb)
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary")));
        }
        if tokens.len() > self.cfg.max_tgt_tokens {
            return Err(Error::Input(format!(
                "{} tokens exceed max_tgt_tokens {}",
                tokens.len(),
                self.cfg.max_tgt_tokens
            )));
        }
        Ok(())
    }

    /// Frozen (or hooked) encoder forward for one utterance.
    pub fn encode(&self, store: &ParamStore, feat: &FeatureSequence, hooks: &AdapterHooks) -> Result<EncoderStates> {
        feat.check(&self.cfg)?;
        hooks.check(&self.cfg, store)?;
        let mut g = Graph::inference(store);
        let x = g.constant(feat.frames().clone());
        let h = self.encode_graph(&mut g, x, &Segments::single(feat.len()), &hooks.encoder);
        Ok(EncoderStates(g.value(h).clone()))
    }

    /// Next-token logits after `prefix`.
    pub fn decode_step(
        &self,
        store: &ParamStore,
        prefix: &[usize],
        enc: &EncoderStates,
        hooks: &AdapterHooks,
    ) -> Result<Array1<f64>> {
        if prefix.is_empty() {
            return Err(Error::Input("decode prefix is empty".into()));
        }
        self.check_tokens(prefix)?;
        hooks.check(&self.cfg, store)?;
        let mut g = Graph::inference(store);
        let e = g.constant(enc.0.clone());
        let y = self.decode_graph(
            &mut g,
            prefix,
            &Segments::single(prefix.len()),
            e,
            &Segments::single(enc.len()),
            &hooks.decoder,
        );
        let logits = self.output_logits(&mut g, y);
        Ok(g.value(logits).row(prefix.len() - 1).to_owned())
    }

    /// Greedy decoding until `eot` or `max_len` tokens; prompt and `eot` are
    /// not part of the result.
    pub fn greedy_decode(
        &self,
        store: &ParamStore,
        enc: &EncoderStates,
        prompt: &[usize],
        hooks: &AdapterHooks,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        let max_len = max_len.min(self.cfg.max_tgt_tokens.saturating_sub(prompt.len()));
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_len {
            let logits = self.decode_step(store, &seq, enc, hooks)?;
            let next = argmax(logits.view());
            if next == self.cfg.special_tokens.eot {
                break;
            }
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }

    /// Ids of every base parameter.
    pub fn param_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        store.ids_with_prefix(BASE_NS).collect()
    }
}

pub fn argmax(v: ndarray::ArrayView1<f64>) -> usize {
    v.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc }).0
}
