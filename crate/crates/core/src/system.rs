//! A frozen base model plus whichever adaptation modules a variant turns on,
//! with batched loss computation and batched greedy decoding.

use ndarray::{concatenate, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{wire_decoder_adapters, wire_encoder_adapters, AdapterHooks, DEFAULT_RANK};
use crate::config::{Lang, ModelConfig};
use crate::data::{token_lang, Utterance};
use crate::error::{Error, Result};
use crate::graph::{Graph, Segments, Var};
use crate::lang_decoder::LanguageAwareDecoder;
use crate::model::{build_prompt, BaseModel, Prompt, PromptMode};
use crate::params::{ParamId, ParamStore, ADAPT_NS};
use crate::refiner::{CtcHead, EncoderRefiner, RefinerConfig};

/// How the decoder is prompted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptChoice {
    /// Single-language prompt for the utterance's dominant language.
    Dominant,
    /// Both language tokens in one prompt.
    Concat,
    /// Dual-path decoding, one single-language prompt per path.
    Pair,
}

impl std::str::FromStr for PromptChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dominant" => Ok(PromptChoice::Dominant),
            "concat" => Ok(PromptChoice::Concat),
            "pair" => Ok(PromptChoice::Pair),
            other => Err(Error::Config(format!("unknown prompt mode {other:?}"))),
        }
    }
}

/// Which loss term the CTC loss is mixed into.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CtcRoute {
    /// `alpha * l_att + (1 - alpha) * l_ctc`, inside the decoder loss.
    #[default]
    EncRef,
    /// `lambda * l_dec + (1 - lambda) * l_ctc`, outside it.
    Final,
}

impl std::str::FromStr for CtcRoute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "enc_ref" => Ok(CtcRoute::EncRef),
            "final" => Ok(CtcRoute::Final),
            other => Err(Error::Config(format!("unknown ctc route {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub enc_adapters: bool,
    pub dec_adapters: bool,
    pub refiner: bool,
    /// CTC head, on the refined states if a refiner exists and on the
    /// encoder states otherwise.
    pub refiner_ctc: bool,
    pub prompt_mode: PromptChoice,
}

impl Variant {
    pub const IDS: [u8; 9] = [0, 1, 2, 3, 4, 5, 6, 7, 8];

    /// The ablation rows.
    pub fn table(id: u8) -> Result<Self> {
        let v = |enc, dec, refiner, ctc, prompt_mode| Variant {
            enc_adapters: enc,
            dec_adapters: dec,
            refiner,
            refiner_ctc: ctc,
            prompt_mode,
        };
        use PromptChoice::*;
        Ok(match id {
            0 => v(false, false, false, false, Dominant),
            1 => v(true, false, false, false, Concat),
            2 => v(false, true, false, false, Concat),
            3 => v(true, true, false, false, Concat),
            4 => v(true, true, false, true, Concat),
            5 => v(true, true, true, false, Concat),
            6 => v(true, true, true, true, Concat),
            7 => v(true, true, false, false, Pair),
            8 => v(true, true, true, true, Pair),
            _ => return Err(Error::Config(format!("no ablation variant {id}"))),
        })
    }

    pub fn has_trainable(&self) -> bool {
        self.enc_adapters
            || self.dec_adapters
            || self.refiner
            || self.refiner_ctc
            || self.prompt_mode == PromptChoice::Pair
    }
}

/// Everything needed to rebuild the adaptation modules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptSpec {
    pub variant: Variant,
    pub rank: usize,
    pub refiner: RefinerConfig,
}

impl AdaptSpec {
    pub fn new(variant: Variant, cfg: &ModelConfig) -> Self {
        AdaptSpec { variant, rank: DEFAULT_RANK, refiner: RefinerConfig::desk(cfg.d_model) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda: f64,
    pub ctc_route: CtcRoute,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.7, lambda: 1.0, ctc_route: CtcRoute::EncRef }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("lambda", self.lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Batch-mean loss terms. `dec` is the decoder loss (attention plus LID,
/// with CTC mixed in under [`CtcRoute::EncRef`]); `total` is what is
/// minimized.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub att: Var,
    pub ctc: Option<Var>,
    pub lid: Option<Var>,
    pub dec: Var,
    pub total: Var,
}

#[derive(Clone, Debug)]
pub struct AsrModel {
    pub cfg: ModelConfig,
    pub spec: AdaptSpec,
    pub store: ParamStore,
    pub base: BaseModel,
    pub hooks: AdapterHooks,
    pub refiner: Option<EncoderRefiner>,
    pub ctc_head: Option<CtcHead>,
    pub dual: Option<LanguageAwareDecoder>,
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl AsrModel {
    /// Freshly initialized base model with no adaptation modules.
    pub fn new_base(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let base = BaseModel::new(cfg, &mut store, &mut rng_stream(seed, 0))?;
        Ok(AsrModel {
            cfg: cfg.clone(),
            spec: AdaptSpec::new(Variant::table(0)?, cfg),
            store,
            hooks: AdapterHooks::empty(cfg),
            base,
            refiner: None,
            ctc_head: None,
            dual: None,
        })
    }

    /// Copies `base` and adds freshly initialized modules for `spec`.
    pub fn with_adaptation(base: &AsrModel, spec: AdaptSpec, seed: u64) -> Result<Self> {
        if base.store.ids_with_prefix(ADAPT_NS).next().is_some() {
            return Err(Error::Config("base model already carries adaptation parameters".into()));
        }
        let cfg = &base.cfg;
        let v = spec.variant;
        let mut store = base.store.clone();
        let rng = &mut rng_stream(seed, 1);
        let mut hooks = AdapterHooks::empty(cfg);
        if v.enc_adapters {
            hooks.encoder = wire_encoder_adapters(&mut store, cfg, "enc_adapter", spec.rank, rng)?;
        }
        let dual = if v.prompt_mode == PromptChoice::Pair {
            let rank = v.dec_adapters.then_some(spec.rank);
            Some(LanguageAwareDecoder::new(&mut store, cfg, rank, rng)?)
        } else {
            if v.dec_adapters {
                hooks.decoder = wire_decoder_adapters(&mut store, cfg, "dec_adapter", spec.rank, rng)?;
            }
            None
        };
        let refiner = if v.refiner {
            spec.refiner.validate()?;
            let name = format!("{ADAPT_NS}.refiner");
            Some(EncoderRefiner::new(&mut store, &name, cfg.d_model, spec.refiner, rng)?)
        } else {
            None
        };
        let ctc_head = if v.refiner_ctc {
            let name = format!("{ADAPT_NS}.ctc_head");
            Some(CtcHead::new(&mut store, &name, cfg.d_model, cfg.ctc_classes())?)
        } else {
            None
        };
        Ok(AsrModel { cfg: cfg.clone(), spec, store, base: base.base.clone(), hooks, refiner, ctc_head, dual })
    }

    pub fn adapt_param_ids(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix(ADAPT_NS).collect()
    }

    /// Prompt for an utterance led by `dominant`.
    pub fn prompt(&self, dominant: Lang) -> Prompt {
        let mode = match self.spec.variant.prompt_mode {
            PromptChoice::Dominant => PromptMode::Single(dominant),
            PromptChoice::Concat => PromptMode::Concat,
            PromptChoice::Pair => PromptMode::Pair,
        };
        build_prompt(mode, &self.cfg)
    }

    fn prompt_len(&self) -> usize {
        match self.prompt(Lang::Zh) {
            Prompt::One(p) => p.len(),
            Prompt::Pair { zh, .. } => zh.len(),
        }
    }

    /// Longest transcript (without `eot`) that fits after the prompt.
    pub fn max_text_len(&self) -> usize {
        self.cfg.max_tgt_tokens.saturating_sub(self.prompt_len() + 1)
    }

    fn check_batch(&self, batch: &[&Utterance]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        for u in batch {
            if u.features.ncols() != self.cfg.n_feat {
                return Err(Error::Config(format!(
                    "utterance {} has {} feature dims, model expects {}",
                    u.id,
                    u.features.ncols(),
                    self.cfg.n_feat
                )));
            }
            if u.features.nrows() > self.cfg.max_src_frames || u.tokens.len() > self.max_text_len() {
                return Err(Error::Input(format!("utterance {} exceeds model length limits", u.id)));
            }
        }
        Ok(())
    }

    /// Encoder (plus refiner) states for packed utterances.
    pub fn encode_graph(&self, g: &mut Graph, batch: &[&Utterance]) -> (Var, Segments) {
        let segs = Segments::from_lengths(&batch.iter().map(|u| u.features.nrows()).collect::<Vec<_>>());
        let views: Vec<_> = batch.iter().map(|u| u.features.view()).collect();
        let x = g.constant(concatenate(Axis(0), &views).expect("equal feature widths"));
        let enc = self.base.encode_graph(g, x, &segs, &self.hooks.encoder);
        let h = match &self.refiner {
            Some(r) => r.refine_graph(g, enc, &segs),
            None => enc,
        };
        (h, segs)
    }

    /// Decoder logits for teacher-forced `texts` (prompt excluded), packed
    /// as `prompt ++ text` per utterance. Also returns the LID loss in
    /// dual-path mode.
    fn decoder_logits(
        &self,
        g: &mut Graph,
        dominants: &[Lang],
        texts: &[&[usize]],
        h: Var,
        segs: &Segments,
        with_lid: bool,
    ) -> (Var, Segments, Option<Var>) {
        match &self.dual {
            Some(dual) => {
                let (vars, tsegs) = dual.forward_graph(g, &self.base, texts, h, segs);
                let lid = with_lid.then(|| dual.lid_loss_graph(g, &vars, &tsegs));
                (self.base.output_logits(g, vars.y_mix), tsegs, lid)
            }
            None => {
                let mut tokens = Vec::new();
                let mut lens = Vec::with_capacity(texts.len());
                for (text, &dom) in texts.iter().zip(dominants) {
                    let Prompt::One(p) = self.prompt(dom) else {
                        unreachable!("single-path model has a single prompt")
                    };
                    lens.push(p.len() + text.len());
                    tokens.extend(p);
                    tokens.extend_from_slice(text);
                }
                let tsegs = Segments::from_lengths(&lens);
                let y = self.base.decode_graph(g, &tokens, &tsegs, h, segs, &self.hooks.decoder);
                (self.base.output_logits(g, y), tsegs, None)
            }
        }
    }

    pub fn batch_loss(&self, g: &mut Graph, batch: &[&Utterance], w: &LossWeights) -> Result<BatchLoss> {
        self.check_batch(batch)?;
        w.validate()?;
        let inv_b = 1.0 / batch.len() as f64;
        let (h, segs) = self.encode_graph(g, batch);

        let ctc = match &self.ctc_head {
            Some(head) => {
                let logits = head.logits_graph(g, h);
                let targets: Vec<Vec<usize>> = batch.iter().map(|u| u.tokens.clone()).collect();
                let l = g.ctc_loss(logits, &segs, &targets, self.cfg.special_tokens.ctc_blank)?;
                Some(g.scale(l, inv_b))
            }
            None => None,
        };

        let dominants: Vec<Lang> = batch.iter().map(|u| u.dominant_lang).collect();
        let texts: Vec<&[usize]> = batch.iter().map(|u| u.tokens.as_slice()).collect();
        let (logits, tsegs, lid) = self.decoder_logits(g, &dominants, &texts, h, &segs, true);
        let p = self.prompt_len();
        let eot = self.cfg.special_tokens.eot;
        let mut picks = Vec::new();
        for (u, &(start, _)) in batch.iter().zip(tsegs.spans()) {
            for (k, &t) in u.tokens.iter().chain(std::iter::once(&eot)).enumerate() {
                picks.push((start + p - 1 + k, t));
            }
        }
        let att = g.cross_entropy(logits, &picks);
        let att = g.scale(att, inv_b);

        let mut dec = att;
        if let (Some(c), CtcRoute::EncRef) = (ctc, w.ctc_route) {
            let a = g.scale(att, w.alpha);
            let b = g.scale(c, 1.0 - w.alpha);
            dec = g.add(a, b);
        }
        if let Some(l) = lid {
            dec = g.add(dec, l);
        }
        let mut total = dec;
        if let (Some(c), CtcRoute::Final) = (ctc, w.ctc_route) {
            let a = g.scale(dec, w.lambda);
            let b = g.scale(c, 1.0 - w.lambda);
            total = g.add(a, b);
        }
        Ok(BatchLoss { att, ctc, lid, dec, total })
    }

    /// Teacher-forced logits over `prompt ++ text`, packed per utterance.
    /// In dual-path mode these are the fused logits.
    pub fn teacher_forced_logits(&self, batch: &[&Utterance]) -> Result<Array2<f64>> {
        self.check_batch(batch)?;
        let mut g = Graph::inference(&self.store);
        let (h, segs) = self.encode_graph(&mut g, batch);
        let dominants: Vec<Lang> = batch.iter().map(|u| u.dominant_lang).collect();
        let texts: Vec<&[usize]> = batch.iter().map(|u| u.tokens.as_slice()).collect();
        let (logits, _, _) = self.decoder_logits(&mut g, &dominants, &texts, h, &segs, false);
        Ok(g.value(logits).clone())
    }

    /// Per-path teacher-forced logits `(zh, en)` before fusion; `None` for
    /// single-path models.
    pub fn path_logits(&self, batch: &[&Utterance]) -> Result<Option<(Array2<f64>, Array2<f64>)>> {
        let Some(dual) = &self.dual else {
            return Ok(None);
        };
        self.check_batch(batch)?;
        let mut g = Graph::inference(&self.store);
        let (h, segs) = self.encode_graph(&mut g, batch);
        let texts: Vec<&[usize]> = batch.iter().map(|u| u.tokens.as_slice()).collect();
        let (vars, _) = dual.forward_graph(&mut g, &self.base, &texts, h, &segs);
        let zh = self.base.output_logits(&mut g, vars.y_zh);
        let en = self.base.output_logits(&mut g, vars.y_en);
        Ok(Some((g.value(zh).clone(), g.value(en).clone())))
    }

    fn allowed_next(&self, id: usize) -> bool {
        token_lang(id).is_some() || id == self.cfg.special_tokens.eot
    }

    /// Greedy decoding of every utterance; only text tokens and `eot` are
    /// eligible outputs.
    pub fn decode_batch(&self, batch: &[&Utterance]) -> Result<Vec<Vec<usize>>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        for u in batch {
            if u.features.ncols() != self.cfg.n_feat || u.features.nrows() > self.cfg.max_src_frames {
                return Err(Error::Input(format!("utterance {} does not fit the model input", u.id)));
            }
        }
        let (h_all, segs_all) = {
            let mut g = Graph::inference(&self.store);
            let (h, segs) = self.encode_graph(&mut g, batch);
            (g.value(h).clone(), segs)
        };
        let eot = self.cfg.special_tokens.eot;
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); batch.len()];
        let mut active: Vec<usize> = (0..batch.len()).collect();
        for _ in 0..=self.max_text_len() {
            if active.is_empty() {
                break;
            }
            let rows: Vec<usize> = active
                .iter()
                .flat_map(|&i| {
                    let (s, l) = segs_all.spans()[i];
                    s..s + l
                })
                .collect();
            let segs = Segments::from_lengths(&active.iter().map(|&i| segs_all.spans()[i].1).collect::<Vec<_>>());
            let mut g = Graph::inference(&self.store);
            let h = g.constant(h_all.select(Axis(0), &rows));
            let dominants: Vec<Lang> = active.iter().map(|&i| batch[i].dominant_lang).collect();
            let texts: Vec<&[usize]> = active.iter().map(|&i| out[i].as_slice()).collect();
            let (logits, tsegs, _) = self.decoder_logits(&mut g, &dominants, &texts, h, &segs, false);
            let lv = g.value(logits);
            let full = out[active[0]].len() == self.max_text_len();
            let mut still = Vec::with_capacity(active.len());
            for (k, &i) in active.iter().enumerate() {
                let (s, l) = tsegs.spans()[k];
                let row = lv.row(s + l - 1);
                let next = row
                    .iter()
                    .enumerate()
                    .filter(|&(id, _)| self.allowed_next(id))
                    .fold((eot, f64::NEG_INFINITY), |acc, (id, &x)| if x > acc.1 { (id, x) } else { acc })
                    .0;
                if next != eot && !full {
                    out[i].push(next);
                    still.push(i);
                }
            }
            active = still;
        }
        Ok(out)
    }

    /// Teacher-forced fusion weights at every position that predicts a
    /// reference token, as `(position, w_zh, w_en, reference language)`.
    /// `None` for single-path models.
    pub fn fusion_weights(&self, u: &Utterance) -> Result<Option<Vec<(usize, f64, f64, Lang)>>> {
        let Some(dual) = &self.dual else {
            return Ok(None);
        };
        self.check_batch(&[u])?;
        let mut g = Graph::inference(&self.store);
        let (h, segs) = self.encode_graph(&mut g, &[u]);
        let (vars, _) = dual.forward_graph(&mut g, &self.base, &[u.tokens.as_slice()], h, &segs);
        let w = g.value(vars.weights);
        let p = dual.prompt_len();
        Ok(Some(
            u.lang_tags.iter().enumerate().map(|(k, &lang)| (k, w[[p - 1 + k, 0]], w[[p - 1 + k, 1]], lang)).collect(),
        ))
    }

    /// Features of `batch` stacked row-wise; exposed for tests.
    pub fn stacked_features(batch: &[&Utterance]) -> Array2<f64> {
        let views: Vec<_> = batch.iter().map(|u| u.features.view()).collect();
        concatenate(Axis(0), &views).expect("equal feature widths")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, PrototypeParams, Split, SynthConfig, ToyLanguageSpec};

    fn corpus() -> crate::data::CorpusManifest {
        let specs = ToyLanguageSpec::pair(0, 16, PrototypeParams::default()).unwrap();
        let cfg = SynthConfig { seed: 1, n_train: 6, n_dev_each: 2, ..SynthConfig::default() };
        generate_corpus(&cfg, &specs).unwrap()
    }

    #[test]
    fn variant_table_rows_differ_as_documented() {
        let v3 = Variant::table(3).unwrap();
        let v5 = Variant::table(5).unwrap();
        assert_eq!(Variant { refiner: true, ..v3 }, v5);
        assert!(!Variant::table(0).unwrap().has_trainable());
        assert!(Variant::table(9).is_err());
    }

    #[test]
    fn batched_decoding_matches_one_at_a_time() {
        let m = corpus();
        let base = AsrModel::new_base(&ModelConfig::desk(), 3).unwrap();
        for id in [0u8, 8] {
            let model =
                AsrModel::with_adaptation(&base, AdaptSpec::new(Variant::table(id).unwrap(), &base.cfg), 4).unwrap();
            let batch: Vec<&Utterance> = m.split(Split::Train);
            let together = model.decode_batch(&batch).unwrap();
            for (u, hyp) in batch.iter().zip(&together) {
                assert_eq!(&model.decode_batch(&[u]).unwrap()[0], hyp);
            }
        }
    }

    #[test]
    fn batch_loss_is_mean_of_single_losses() {
        let m = corpus();
        let base = AsrModel::new_base(&ModelConfig::desk(), 3).unwrap();
        let model = AsrModel::with_adaptation(&base, AdaptSpec::new(Variant::table(8).unwrap(), &base.cfg), 4).unwrap();
        let w = LossWeights::default();
        let batch: Vec<&Utterance> = m.split(Split::Train);
        let total = |b: &[&Utterance]| {
            let mut g = Graph::inference(&model.store);
            let l = model.batch_loss(&mut g, b, &w).unwrap();
            g.scalar(l.total)
        };
        let mean = batch.iter().map(|u| total(&[u])).sum::<f64>() / batch.len() as f64;
        assert!((total(&batch) - mean).abs() < 1e-9);
    }
}
