use std::collections::BTreeMap;

use csasr::adapters::{classify_parameters, FreezePolicy};
use csasr::checkpoint::{load_adapted, Checkpoint};
use csasr::data::{generate_corpus, CorpusManifest, PrototypeParams, Split, SynthConfig, ToyLanguageSpec, Utterance};
use csasr::graph::Graph;
use csasr::system::{AdaptSpec, AsrModel, LossWeights, PromptChoice, Variant};
use csasr::training::{evaluate, mean_att_loss, train, TrainConfig};
use csasr::{Error, Lang, ModelConfig};
use ndarray::{Array2, Axis};

fn corpus(seed: u64, n_train: usize, n_dev_each: usize) -> CorpusManifest {
    let specs = ToyLanguageSpec::pair(seed, 16, PrototypeParams::default()).unwrap();
    let cfg = SynthConfig { seed, n_train, n_dev_each, ..SynthConfig::default() };
    generate_corpus(&cfg, &specs).unwrap()
}

fn base_model() -> AsrModel {
    AsrModel::new_base(&ModelConfig::desk(), 5).unwrap()
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn encoder_states(m: &AsrModel, batch: &[&Utterance]) -> Array2<f64> {
    let mut g = Graph::inference(&m.store);
    let (h, _) = m.encode_graph(&mut g, batch);
    g.value(h).clone()
}

fn with_dominant(utts: &[&Utterance], lang: Lang) -> Vec<Utterance> {
    utts.iter().map(|u| Utterance { dominant_lang: lang, ..(*u).clone() }).collect()
}

#[test]
fn fresh_modules_leave_outputs_unchanged() {
    let base = base_model();
    let data = corpus(21, 50, 0);
    let batch = data.split(Split::Train);
    assert_eq!(batch.len(), 50);
    let base_enc = encoder_states(&base, &batch);
    for id in 1..=8 {
        let spec = AdaptSpec::new(Variant::table(id).unwrap(), &base.cfg);
        let adapted = AsrModel::with_adaptation(&base, spec, 9).unwrap();
        let enc_err = max_abs_diff(&encoder_states(&adapted, &batch), &base_enc);
        assert!(enc_err <= 1e-6, "ID {id}: encoder moved by {enc_err}");
        match adapted.path_logits(&batch).unwrap() {
            None => {
                // reference: no modules, same prompt
                let plain = Variant {
                    enc_adapters: false,
                    dec_adapters: false,
                    refiner: false,
                    refiner_ctc: false,
                    prompt_mode: adapted.spec.variant.prompt_mode,
                };
                let reference = AsrModel::with_adaptation(&base, AdaptSpec::new(plain, &base.cfg), 9).unwrap();
                let err = max_abs_diff(
                    &adapted.teacher_forced_logits(&batch).unwrap(),
                    &reference.teacher_forced_logits(&batch).unwrap(),
                );
                assert!(err <= 1e-6, "ID {id}: logits moved by {err}");
            }
            Some((zh, en)) => {
                for (lang, got) in [(Lang::Zh, zh), (Lang::En, en)] {
                    let forced = with_dominant(&batch, lang);
                    let refs: Vec<&Utterance> = forced.iter().collect();
                    let err = max_abs_diff(&got, &base.teacher_forced_logits(&refs).unwrap());
                    assert!(err <= 1e-6, "ID {id} {lang:?} path moved by {err}");
                }
            }
        }
    }
}

/// Parameter name with its last component dropped, e.g. `adapt.fusion.score_zh`.
fn submodule(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(head, _)| head)
}

fn kl(p_logits: ndarray::ArrayView1<f64>, q_logits: ndarray::ArrayView1<f64>) -> f64 {
    let lse = |v: ndarray::ArrayView1<f64>| {
        let m = v.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        m + v.mapv(|x| (x - m).exp()).sum().ln()
    };
    let (lp, lq) = (lse(p_logits), lse(q_logits));
    p_logits.iter().zip(q_logits).map(|(&a, &b)| (a - lp).exp() * ((a - lp) - (b - lq))).sum()
}

#[test]
fn adaptation_freezes_the_base_and_moves_every_module() {
    let base = base_model();
    let data = corpus(22, 400, 10);
    for id in [4, 6, 8] {
        let mut cfg = TrainConfig::default();
        cfg.set_variant(Variant::table(id).unwrap());
        cfg.batch_size = 4;
        cfg.max_steps = Some(100);
        cfg.select_best = false;
        cfg.seed = 3;
        let (model, report) = train(&cfg, &data, &base.cfg, Some(&base)).unwrap();
        assert_eq!(report.selected_step, 100, "ID {id}");

        let part = classify_parameters(FreezePolicy::Adapt, &model.store).unwrap();
        assert_eq!(model.store.hash(&part.frozen), base.store.hash(&part.frozen), "ID {id}");
        assert_eq!(report.frozen_hash, base.store.hash(&part.frozen));
        for &pid in &part.frozen {
            assert_eq!(model.store.get(pid), base.store.get(pid));
        }

        let fresh = AsrModel::with_adaptation(&base, cfg.adapt_spec(), cfg.seed).unwrap();
        let mut moved: BTreeMap<&str, bool> = BTreeMap::new();
        for &pid in &part.trainable {
            let name = model.store.name(pid);
            let changed = model.store.get(pid) != fresh.store.get(pid);
            *moved.entry(submodule(name)).or_default() |= changed;
        }
        assert!(!moved.is_empty());
        let stuck: Vec<_> = moved.iter().filter(|(_, &c)| !c).map(|(n, _)| *n).collect();
        assert!(stuck.is_empty(), "ID {id}: unchanged submodules {stuck:?}");

        if id == 8 {
            let utts = &data.split(Split::Train)[..10];
            let (zh, en) = model.path_logits(utts).unwrap().unwrap();
            let total: f64 = zh.axis_iter(Axis(0)).zip(en.axis_iter(Axis(0))).map(|(p, q)| kl(p, q)).sum();
            assert!(total > 0.0, "paths collapsed: KL {total}");
        }
    }
}

#[test]
fn two_epochs_reduce_training_attention_loss() {
    let base = base_model();
    let data = corpus(23, 200, 10);
    let train_set = data.split(Split::Train);
    for id in 1..=8 {
        let mut cfg = TrainConfig::default();
        cfg.set_variant(Variant::table(id).unwrap());
        cfg.epochs = 2;
        cfg.select_best = false;
        let (model, report) = train(&cfg, &data, &base.cfg, Some(&base)).unwrap();
        let after = mean_att_loss(&model, &train_set, &LossWeights::default()).unwrap();
        assert!(after < report.initial_train_att, "ID {id}: {after} vs initial {}", report.initial_train_att);
    }
}

#[test]
fn training_is_deterministic() {
    let base = base_model();
    let data = corpus(24, 60, 10);
    let mut cfg = TrainConfig::default();
    cfg.set_variant(Variant::table(8).unwrap());
    cfg.epochs = 2;
    cfg.seed = 17;
    let (m1, r1) = train(&cfg, &data, &base.cfg, Some(&base)).unwrap();
    let (m2, r2) = train(&cfg, &data, &base.cfg, Some(&base)).unwrap();
    assert_eq!(r1, r2);
    let ids: Vec<_> = m1.store.ids().collect();
    assert_eq!(m1.store.hash(&ids), m2.store.hash(&ids));
}

#[test]
fn variant_zero_trains_nothing() {
    let base = base_model();
    let data = corpus(25, 40, 10);
    let cfg = TrainConfig::default();
    assert_eq!(cfg.variant(), Variant::table(0).unwrap());
    let (model, report) = train(&cfg, &data, &base.cfg, Some(&base)).unwrap();
    assert_eq!(report.trainable_params, 0);
    assert!(report.epochs.is_empty());
    assert_eq!(report.selected_epoch, 0);
    let ids: Vec<_> = base.store.ids().collect();
    assert_eq!(model.store.hash(&ids), base.store.hash(&ids));
    assert_eq!(model.store.len(), base.store.len());
}

#[test]
fn checkpoints_round_trip_through_disk() {
    let base = base_model();
    let data = corpus(26, 40, 10);
    let mut cfg = TrainConfig::default();
    cfg.set_variant(Variant::table(8).unwrap());
    cfg.max_steps = Some(5);
    cfg.select_best = false;
    cfg.batch_size = 4;
    let (model, _) = train(&cfg, &data, &base.cfg, Some(&base)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (bp, ap) = (dir.path().join("base.json"), dir.path().join("adapt.json"));
    Checkpoint::base(&base).save(&bp).unwrap();
    Checkpoint::adapt(&model).save(&ap).unwrap();
    let loaded = load_adapted(&bp, &ap).unwrap();
    let dev = data.split(Split::DevMan);
    assert_eq!(evaluate(&loaded, &dev).unwrap(), evaluate(&model, &dev).unwrap());
    let ids: Vec<_> = model.store.ids().collect();
    assert_eq!(loaded.store.hash(&ids), model.store.hash(&ids));
}

#[test]
fn empty_split_is_a_validation_error() {
    let base = base_model();
    assert!(matches!(evaluate(&base, &[]), Err(Error::Validation(_))));
    let data = corpus(27, 10, 0);
    let cfg = TrainConfig::default();
    assert!(matches!(train(&cfg, &data, &base.cfg, Some(&base)), Err(Error::Validation(_))));
}

#[test]
fn pair_prompt_choice_builds_two_paths() {
    let base = base_model();
    let spec = AdaptSpec::new(Variant::table(7).unwrap(), &base.cfg);
    assert_eq!(spec.variant.prompt_mode, PromptChoice::Pair);
    let m = AsrModel::with_adaptation(&base, spec, 1).unwrap();
    assert!(m.dual.is_some());
    assert!(m.hooks.decoder.iter().all(Option::is_none));
}
