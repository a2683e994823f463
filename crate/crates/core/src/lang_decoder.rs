//! Language-aware decoding: the frozen decoder runs once per language, each
//! run with its own prompt and its own adapter set, and a fusion module
//! mixes the two final state sequences position by position.

use ndarray::Array2;
use rand::Rng;

use crate::adapters::{wire_decoder_adapters, AdapterPair};
use crate::config::{Lang, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Segments, Var};
use crate::model::{build_prompt, BaseModel, Linear, Prompt, PromptMode};
use crate::params::{ParamId, ParamStore, ADAPT_NS};

/// One language's prompt and decoder adapter set.
#[derive(Clone, Debug)]
pub struct LanguagePath {
    pub lang: Lang,
    pub prompt: Vec<usize>,
    pub adapters: Vec<Option<AdapterPair>>,
}

impl LanguagePath {
    pub fn params(&self) -> Vec<ParamId> {
        self.adapters.iter().flatten().flat_map(|p| p.params()).collect()
    }
}

/// Two scalar scoring heads whose outputs are normalized jointly.
#[derive(Clone, Copy, Debug)]
pub struct FusionModule {
    pub score_zh: Linear,
    pub score_en: Linear,
}

impl FusionModule {
    /// Zero-initialized: equal weights everywhere at the start.
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize) -> Result<Self> {
        Ok(FusionModule {
            score_zh: Linear::zeros(store, &format!("{name}.score_zh"), d_model, 1)?,
            score_en: Linear::zeros(store, &format!("{name}.score_en"), d_model, 1)?,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.score_zh.params().into_iter().chain(self.score_en.params()).collect()
    }

    /// Returns `(y_mix, weights)` with `weights` as `[n, 2]` (zh, en).
    pub fn fuse_graph(&self, g: &mut Graph, y_zh: Var, y_en: Var) -> (Var, Var) {
        let s_zh = self.score_zh.forward(g, y_zh);
        let s_en = self.score_en.forward(g, y_en);
        let scores = g.concat_cols(s_zh, s_en);
        let w = g.softmax_rows(scores);
        debug_assert!(g
            .value(w)
            .rows()
            .into_iter()
            .all(|r| r.iter().all(|&p| p >= 0.0) && (r.sum() - 1.0).abs() <= 1e-6));
        let w_zh = g.slice_cols(w, 0, 1);
        let w_en = g.slice_cols(w, 1, 2);
        let a = g.mul_col(y_zh, w_zh);
        let b = g.mul_col(y_en, w_en);
        (g.add(a, b), w)
    }
}

/// Row-wise convex combination of two path outputs.
pub fn fuse(
    store: &ParamStore,
    fm: &FusionModule,
    y_zh: &Array2<f64>,
    y_en: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if y_zh.dim() != y_en.dim() {
        return Err(Error::Input(format!("path outputs differ in shape: {:?} vs {:?}", y_zh.dim(), y_en.dim())));
    }
    let mut g = Graph::inference(store);
    let a = g.constant(y_zh.clone());
    let b = g.constant(y_en.clone());
    let (mix, w) = fm.fuse_graph(&mut g, a, b);
    Ok((g.value(mix).clone(), g.value(w).clone()))
}

/// Shared two-way language classifier over mean-pooled path states.
#[derive(Clone, Copy, Debug)]
pub struct LidHead {
    pub linear: Linear,
}

impl LidHead {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize) -> Result<Self> {
        Ok(LidHead { linear: Linear::zeros(store, name, d_model, 2)? })
    }

    pub fn params(&self) -> [ParamId; 2] {
        self.linear.params()
    }

    /// Mean over utterances of the cross-entropy of each pooled row of
    /// `states` (one row per pooling segment) against `lang`.
    pub fn loss_graph(&self, g: &mut Graph, states: Var, pool: &Segments, lang: Lang) -> Var {
        let pooled = g.segment_mean(states, pool);
        let logits = self.linear.forward(g, pooled);
        let picks: Vec<(usize, usize)> = (0..pool.len()).map(|r| (r, lang.index())).collect();
        let ce = g.cross_entropy(logits, &picks);
        g.scale(ce, 1.0 / pool.len() as f64)
    }
}

/// LID auxiliary loss for one utterance; `y_zh` / `y_en` hold only the
/// text-token positions of each path.
pub fn lid_aux_loss(store: &ParamStore, lid: &LidHead, y_zh: &Array2<f64>, y_en: &Array2<f64>) -> f64 {
    let mut g = Graph::inference(store);
    let a = g.constant(y_zh.clone());
    let b = g.constant(y_en.clone());
    let la = lid.loss_graph(&mut g, a, &Segments::single(y_zh.nrows()), Lang::Zh);
    let lb = lid.loss_graph(&mut g, b, &Segments::single(y_en.nrows()), Lang::En);
    g.scalar(la) + g.scalar(lb)
}

/// `l_att + l_lid`.
pub fn dec_loss(l_att: f64, l_lid: f64) -> f64 {
    l_att + l_lid
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualDecodeOutput {
    pub y_zh: Array2<f64>,
    pub y_en: Array2<f64>,
    pub y_mix: Array2<f64>,
    pub fusion_weights: Array2<f64>,
}

/// Graph handles of one dual-path forward.
#[derive(Clone, Copy, Debug)]
pub struct DualVars {
    pub y_zh: Var,
    pub y_en: Var,
    pub y_mix: Var,
    pub weights: Var,
}

#[derive(Clone, Debug)]
pub struct LanguageAwareDecoder {
    pub zh: LanguagePath,
    pub en: LanguagePath,
    pub fusion: FusionModule,
    pub lid: LidHead,
}

impl LanguageAwareDecoder {
    /// `rank: None` leaves both paths without adapters.
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rank: Option<usize>, rng: &mut R) -> Result<Self> {
        let Prompt::Pair { zh, en } = build_prompt(PromptMode::Pair, cfg) else {
            unreachable!("pair mode builds two prompts")
        };
        let mut adapters = |name: &str| match rank {
            Some(r) => wire_decoder_adapters(store, cfg, name, r, rng),
            None => Ok(vec![None; cfg.n_dec_layers]),
        };
        let zh = LanguagePath { lang: Lang::Zh, prompt: zh, adapters: adapters("dec_adapter_zh")? };
        let en = LanguagePath { lang: Lang::En, prompt: en, adapters: adapters("dec_adapter_en")? };
        Ok(LanguageAwareDecoder {
            zh,
            en,
            fusion: FusionModule::new(store, &format!("{ADAPT_NS}.fusion"), cfg.d_model)?,
            lid: LidHead::new(store, &format!("{ADAPT_NS}.lid"), cfg.d_model)?,
        })
    }

    pub fn prompt_len(&self) -> usize {
        self.zh.prompt.len()
    }

    pub fn check(&self) -> Result<()> {
        if self.zh.prompt.len() != self.en.prompt.len() || self.zh.adapters.len() != self.en.adapters.len() {
            return Err(Error::Config("language paths differ in prompt length or depth".into()));
        }
        if self.zh.lang == self.en.lang {
            return Err(Error::Config("both paths are bound to the same language".into()));
        }
        Ok(())
    }

    /// Runs both paths over `texts` (prompt excluded) through the same
    /// frozen decoder weights and fuses the final states. Rows of each
    /// output are packed per utterance as `prompt ++ text`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        base: &BaseModel,
        texts: &[&[usize]],
        enc: Var,
        enc_segs: &Segments,
    ) -> (DualVars, Segments) {
        let p = self.prompt_len();
        let segs = Segments::from_lengths(&texts.iter().map(|t| p + t.len()).collect::<Vec<_>>());
        let pack = |prompt: &[usize]| -> Vec<usize> {
            texts.iter().flat_map(|t| prompt.iter().chain(t.iter()).copied()).collect()
        };
        let y_zh = base.decode_graph(g, &pack(&self.zh.prompt), &segs, enc, enc_segs, &self.zh.adapters);
        let y_en = base.decode_graph(g, &pack(&self.en.prompt), &segs, enc, enc_segs, &self.en.adapters);
        let (y_mix, weights) = self.fusion.fuse_graph(g, y_zh, y_en);
        (DualVars { y_zh, y_en, y_mix, weights }, segs)
    }

    /// Sum over both paths of the LID cross-entropy, pooling only over the
    /// text-token rows of each utterance.
    pub fn lid_loss_graph(&self, g: &mut Graph, vars: &DualVars, segs: &Segments) -> Var {
        let p = self.prompt_len();
        let rows: Vec<usize> = segs.spans().iter().flat_map(|&(s, l)| s + p..s + l).collect();
        let pool = Segments::from_lengths(&segs.lengths().iter().map(|l| l - p).collect::<Vec<_>>());
        let zh_rows = g.gather_rows(vars.y_zh, rows.clone());
        let en_rows = g.gather_rows(vars.y_en, rows);
        let a = self.lid.loss_graph(g, zh_rows, &pool, self.zh.lang);
        let b = self.lid.loss_graph(g, en_rows, &pool, self.en.lang);
        g.add(a, b)
    }

    /// Single-utterance dual decode over a prefix (prompt excluded).
    pub fn dual_decode_step(
        &self,
        store: &ParamStore,
        base: &BaseModel,
        prefix: &[usize],
        enc: &Array2<f64>,
    ) -> Result<DualDecodeOutput> {
        self.check()?;
        base.check_tokens(&[self.zh.prompt.as_slice(), prefix].concat())?;
        let mut g = Graph::inference(store);
        let e = g.constant(enc.clone());
        let (vars, _) = self.forward_graph(&mut g, base, &[prefix], e, &Segments::single(enc.nrows()));
        Ok(DualDecodeOutput {
            y_zh: g.value(vars.y_zh).clone(),
            y_en: g.value(vars.y_en).clone(),
            y_mix: g.value(vars.y_mix).clone(),
            fusion_weights: g.value(vars.weights).clone(),
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = self.zh.params();
        out.extend(self.en.params());
        out.extend(self.fusion.params());
        out.extend(self.lid.params());
        out
    }

    /// The same decoder with its two path slots exchanged. Prompts,
    /// adapters, score heads and LID targets move together, so fused
    /// outputs and losses are unchanged.
    pub fn swapped(&self) -> Self {
        LanguageAwareDecoder {
            zh: self.en.clone(),
            en: self.zh.clone(),
            fusion: FusionModule { score_zh: self.fusion.score_en, score_en: self.fusion.score_zh },
            lid: self.lid,
        }
    }
}
