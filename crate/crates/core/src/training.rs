//! Two-stage training: base pretraining, then adaptation with the base
//! frozen. Also evaluation and the ablation sweep.

use std::collections::BTreeMap;

use log::{debug, info};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{classify_parameters, FreezePolicy, DEFAULT_RANK};
use crate::config::ModelConfig;
use crate::data::{render_text, CorpusManifest, Split, Utterance};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{score, ErrorReport, ReportJson};
use crate::optim::{clip_global_norm, Adam};
use crate::params::ParamId;
use crate::refiner::RefinerConfig;
use crate::system::{AdaptSpec, AsrModel, CtcRoute, LossWeights, PromptChoice, Variant};

const EVAL_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Base,
    Adapt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub seed: u64,
    pub enc_adapters: bool,
    pub dec_adapters: bool,
    pub refiner: bool,
    pub refiner_ctc: bool,
    pub prompt_mode: PromptChoice,
    pub ctc_route: CtcRoute,
    pub rank: usize,
    pub refiner_layers: usize,
    pub refiner_hidden: usize,
    pub refiner_bidirectional: bool,
    pub clip_norm: f64,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    /// Restore the parameters with the lowest dev L_att at the end; when
    /// false the last step's parameters are kept.
    pub select_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Adapt,
            lr: 2e-3,
            epochs: 6,
            batch_size: 16,
            alpha: 0.7,
            lambda: 1.0,
            seed: 0,
            enc_adapters: false,
            dec_adapters: false,
            refiner: false,
            refiner_ctc: false,
            prompt_mode: PromptChoice::Dominant,
            ctc_route: CtcRoute::EncRef,
            rank: DEFAULT_RANK,
            refiner_layers: 2,
            refiner_hidden: 64,
            refiner_bidirectional: false,
            clip_norm: 1.0,
            max_steps: None,
            select_best: true,
        }
    }
}

impl TrainConfig {
    /// Defaults for stage-0 pretraining.
    pub fn base() -> Self {
        TrainConfig { stage: Stage::Base, lr: 2e-3, epochs: 10, ..TrainConfig::default() }
    }

    pub fn variant(&self) -> Variant {
        Variant {
            enc_adapters: self.enc_adapters,
            dec_adapters: self.dec_adapters,
            refiner: self.refiner,
            refiner_ctc: self.refiner_ctc,
            prompt_mode: self.prompt_mode,
        }
    }

    pub fn set_variant(&mut self, v: Variant) {
        self.enc_adapters = v.enc_adapters;
        self.dec_adapters = v.dec_adapters;
        self.refiner = v.refiner;
        self.refiner_ctc = v.refiner_ctc;
        self.prompt_mode = v.prompt_mode;
    }

    pub fn adapt_spec(&self) -> AdaptSpec {
        AdaptSpec {
            variant: self.variant(),
            rank: self.rank,
            refiner: RefinerConfig {
                n_layers: self.refiner_layers,
                hidden: self.refiner_hidden,
                bidirectional: self.refiner_bidirectional,
            },
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { alpha: self.alpha, lambda: self.lambda, ctc_route: self.ctc_route }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights().validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        if self.stage == Stage::Base && self.variant() != Variant::table(0)? {
            return Err(Error::Config(
                "stage base trains the plain model: no adaptation flags and the dominant prompt".into(),
            ));
        }
        Ok(())
    }
}

/// `lam * l_dec + (1 - lam) * l_ctc`.
pub fn final_loss(l_dec: f64, l_ctc: f64, lam: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::Config(format!("lambda must lie in [0, 1], got {lam}")));
    }
    Ok(lam * l_dec + (1.0 - lam) * l_ctc)
}

/// Per-utterance means over one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_att: f64,
    pub l_ctc: Option<f64>,
    pub l_lid: Option<f64>,
    pub l_dec: f64,
    pub l_final: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub train: LossComponents,
    pub dev_att: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    pub variant: Variant,
    pub trainable_params: usize,
    pub initial_train_att: f64,
    pub initial_dev_att: f64,
    pub epochs: Vec<EpochLog>,
    /// 0 means the initial parameters were kept.
    pub selected_epoch: usize,
    pub selected_step: usize,
    pub frozen_hash: String,
    pub dev: BTreeMap<String, ReportJson>,
}

impl TrainReport {
    pub fn final_train_att(&self) -> f64 {
        self.epochs.last().map_or(self.initial_train_att, |e| e.train.l_att)
    }
}

/// Mean per-utterance attention loss over `utts`.
pub fn mean_att_loss(model: &AsrModel, utts: &[&Utterance], w: &LossWeights) -> Result<f64> {
    if utts.is_empty() {
        return Err(Error::Validation("no utterances to score".into()));
    }
    let mut total = 0.0;
    for chunk in utts.chunks(EVAL_BATCH) {
        let mut g = Graph::inference(&model.store);
        let l = model.batch_loss(&mut g, chunk, w)?;
        total += g.scalar(l.att) * chunk.len() as f64;
    }
    Ok(total / utts.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: ErrorReport,
    pub hyps: Vec<String>,
}

/// Greedy-decodes and scores every utterance.
pub fn evaluate(model: &AsrModel, utts: &[&Utterance]) -> Result<Evaluation> {
    if utts.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty split".into()));
    }
    let mut report = ErrorReport::default();
    let mut hyps = Vec::with_capacity(utts.len());
    for chunk in utts.chunks(EVAL_BATCH) {
        for (u, toks) in chunk.iter().zip(model.decode_batch(chunk)?) {
            let hyp = render_text(&toks);
            report.add(&score(&u.text(), &hyp));
            hyps.push(hyp);
        }
    }
    Ok(Evaluation { report, hyps })
}

pub fn evaluate_dev(model: &AsrModel, corpus: &CorpusManifest) -> Result<BTreeMap<String, ReportJson>> {
    Split::DEV
        .iter()
        .map(|&s| Ok((s.as_str().to_string(), evaluate(model, &corpus.split(s))?.report.to_json())))
        .collect()
}

fn snapshot(model: &AsrModel, ids: &[ParamId]) -> Vec<Array2<f64>> {
    ids.iter().map(|&id| model.store.get(id).clone()).collect()
}

/// Trains `base` (stage adapt) or a fresh model of shape `model_cfg`
/// (stage base) and returns the best-on-dev parameters with a report.
pub fn train(
    cfg: &TrainConfig,
    corpus: &CorpusManifest,
    model_cfg: &ModelConfig,
    base: Option<&AsrModel>,
) -> Result<(AsrModel, TrainReport)> {
    cfg.validate()?;
    let (mut model, policy) = match (cfg.stage, base) {
        (Stage::Base, _) => (AsrModel::new_base(model_cfg, cfg.seed)?, FreezePolicy::Base),
        (Stage::Adapt, None) => return Err(Error::Config("stage adapt needs a base checkpoint".into())),
        (Stage::Adapt, Some(b)) => {
            if &b.cfg != model_cfg {
                return Err(Error::Config("base checkpoint was built for a different model config".into()));
            }
            (AsrModel::with_adaptation(b, cfg.adapt_spec(), cfg.seed)?, FreezePolicy::Adapt)
        }
    };
    corpus.check_fits(model_cfg)?;
    let train_set = corpus.split(Split::Train);
    let dev_set: Vec<&Utterance> = Split::DEV.iter().flat_map(|&s| corpus.split(s)).collect();
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::Validation("corpus needs train and dev utterances".into()));
    }
    let w = cfg.loss_weights();
    let part = classify_parameters(policy, &model.store)?;
    let frozen_before = model.store.hash(&part.frozen);
    let mask = part.mask(model.store.len());
    let trainable_params = part.trainable.iter().map(|&id| model.store.get(id).len()).sum();

    let initial_train_att = mean_att_loss(&model, &train_set, &w)?;
    let initial_dev_att = mean_att_loss(&model, &dev_set, &w)?;
    info!(
        "{:?} stage, {} trainable values, initial train L_att {initial_train_att:.4}, dev {initial_dev_att:.4}",
        cfg.stage, trainable_params
    );
    let mut best = (initial_dev_att, 0usize, 0usize, snapshot(&model, &part.trainable));
    let mut epochs = Vec::new();
    let mut step = 0usize;
    let mut opt = Adam::new(&model.store, &part.trainable, cfg.lr);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    if !part.trainable.is_empty() {
        'outer: for epoch in 1..=cfg.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1000 + epoch as u64);
            order.sort_unstable();
            order.shuffle(&mut rng);
            let mut sums = LossComponents::default();
            let (mut ctc_sum, mut lid_sum, mut seen) = (0.0, 0.0, 0usize);
            for idx in order.chunks(cfg.batch_size) {
                let batch: Vec<&Utterance> = idx.iter().map(|&i| train_set[i]).collect();
                let grads = {
                    let mut g = Graph::training(&model.store, &mask);
                    let l = model.batch_loss(&mut g, &batch, &w)?;
                    let (att, dec, total) = (g.scalar(l.att), g.scalar(l.dec), g.scalar(l.total));
                    let ctc = l.ctc.map(|v| g.scalar(v));
                    let lid = l.lid.map(|v| g.scalar(v));
                    if !total.is_finite() {
                        let ids: Vec<&str> = batch.iter().map(|u| u.id.as_str()).collect();
                        return Err(Error::NonFinite {
                            step,
                            detail: format!(
                                "L_att {att}, L_ctc {ctc:?}, L_lid {lid:?}, L_final {total}; batch {}",
                                ids.join(",")
                            ),
                        });
                    }
                    let n = batch.len() as f64;
                    sums.l_att += att * n;
                    sums.l_dec += dec * n;
                    sums.l_final += total * n;
                    ctc_sum += ctc.unwrap_or(0.0) * n;
                    lid_sum += lid.unwrap_or(0.0) * n;
                    seen += batch.len();
                    g.backward(l.total);
                    g.param_grads()
                };
                let mut grads = grads;
                clip_global_norm(&mut grads, cfg.clip_norm);
                opt.step(&mut model.store, &grads);
                step += 1;
                if cfg.max_steps.is_some_and(|m| step >= m) {
                    let dev_att = mean_att_loss(&model, &dev_set, &w)?;
                    epochs.push(epoch_log(epoch, step, sums, ctc_sum, lid_sum, seen, &model, dev_att));
                    if dev_att < best.0 {
                        best = (dev_att, epoch, step, snapshot(&model, &part.trainable));
                    }
                    break 'outer;
                }
            }
            let dev_att = mean_att_loss(&model, &dev_set, &w)?;
            let log = epoch_log(epoch, step, sums, ctc_sum, lid_sum, seen, &model, dev_att);
            info!(
                "epoch {epoch}: train L_att {:.4} L_final {:.4}, dev L_att {dev_att:.4}",
                log.train.l_att, log.train.l_final
            );
            epochs.push(log);
            if dev_att < best.0 {
                best = (dev_att, epoch, step, snapshot(&model, &part.trainable));
            }
        }
    }
    let (selected_epoch, selected_step) = if cfg.select_best {
        let (_, e, s, values) = best;
        for (&id, v) in part.trainable.iter().zip(values) {
            *model.store.get_mut(id) = v;
        }
        (e, s)
    } else {
        (epochs.last().map_or(0, |e| e.epoch), step)
    };
    let frozen_hash = model.store.hash(&part.frozen);
    if frozen_hash != frozen_before {
        return Err(Error::Internal("frozen parameters changed during training".into()));
    }
    debug!("selected epoch {selected_epoch} (step {selected_step})");
    let dev = evaluate_dev(&model, corpus)?;
    let report = TrainReport {
        stage: cfg.stage,
        variant: cfg.variant(),
        trainable_params,
        initial_train_att,
        initial_dev_att,
        epochs,
        selected_epoch,
        selected_step,
        frozen_hash,
        dev,
    };
    Ok((model, report))
}

#[allow(clippy::too_many_arguments)]
fn epoch_log(
    epoch: usize,
    step: usize,
    sums: LossComponents,
    ctc_sum: f64,
    lid_sum: f64,
    seen: usize,
    model: &AsrModel,
    dev_att: f64,
) -> EpochLog {
    let n = seen.max(1) as f64;
    EpochLog {
        epoch,
        step,
        train: LossComponents {
            l_att: sums.l_att / n,
            l_ctc: model.ctc_head.is_some().then_some(ctc_sum / n),
            l_lid: model.dual.is_some().then_some(lid_sum / n),
            l_dec: sums.l_dec / n,
            l_final: sums.l_final / n,
        },
        dev_att,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub id: u8,
    pub variant: Variant,
    pub dev_man: ReportJson,
    pub dev_sge: ReportJson,
    /// Mean of the two splits' overall MER.
    pub mean_mer: f64,
    pub selected_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, id: u8) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.id == id)
    }

    /// Fixed-width text rendering: one line per variant with
    /// Overall/ZH/EN for each dev split, in percent.
    pub fn render(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("   -  ".to_string(), |x| format!("{:6.1}", 100.0 * x));
        let mut out = String::from("ID | dev_man Overall    ZH    EN | dev_sge Overall    ZH    EN\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:2} |         {} {} {} |         {} {} {}\n",
                r.id,
                pct(r.dev_man.overall.mer),
                pct(r.dev_man.zh.mer),
                pct(r.dev_man.en.mer),
                pct(r.dev_sge.overall.mer),
                pct(r.dev_sge.zh.mer),
                pct(r.dev_sge.en.mer),
            ));
        }
        out
    }
}

/// Trains and evaluates each requested variant from the same base, seed and
/// budget.
pub fn ablate(base: &AsrModel, corpus: &CorpusManifest, template: &TrainConfig, ids: &[u8]) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(ids.len());
    for &id in ids {
        let mut cfg = template.clone();
        cfg.stage = Stage::Adapt;
        cfg.set_variant(Variant::table(id)?);
        info!("ablation variant {id}");
        let (_, report) = train(&cfg, corpus, &base.cfg, Some(base))?;
        let get = |s: Split| report.dev[s.as_str()];
        let (dev_man, dev_sge) = (get(Split::DevMan), get(Split::DevSge));
        let mean_mer = match (dev_man.overall.mer, dev_sge.overall.mer) {
            (Some(a), Some(b)) => (a + b) / 2.0,
            _ => return Err(Error::Validation("a dev split has no reference units".into())),
        };
        rows.push(AblationRow {
            id,
            variant: cfg.variant(),
            dev_man,
            dev_sge,
            mean_mer,
            selected_epoch: report.selected_epoch,
        });
    }
    Ok(AblationTable { rows })
}
