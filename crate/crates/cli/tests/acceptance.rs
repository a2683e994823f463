//! Acceptance run: prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Criteria 7 and 8 share one three-seed ablation
//! and take several minutes.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use csasr::adapters::{classify_parameters, Adapter, FreezePolicy};
use csasr::ctc::{brute_force_ctc, ctc_gradient, ctc_loss, min_frames, FrameLogProbs};
use csasr::data::{generate_corpus, CorpusManifest, PrototypeParams, Split, SynthConfig, ToyLanguageSpec, Utterance};
use csasr::gradcheck::{array_grad_error, param_grad_error};
use csasr::graph::{Graph, Segments, Var};
use csasr::lang_decoder::{fuse, FusionModule, LidHead};
use csasr::metrics::{align, edit_cost, score, tokenize_mixed, MixedUnit};
use csasr::params::{ParamId, ParamStore};
use csasr::refiner::{CtcHead, EncoderRefiner, RefinerConfig};
use csasr::system::{AdaptSpec, AsrModel, Variant};
use csasr::training::{ablate, train, AblationTable, TrainConfig};
use csasr::{Lang, ModelConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

fn randm(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-scale..scale))
}

fn randomize(store: &mut ParamStore, ids: &[ParamId], rng: &mut ChaCha8Rng, scale: f64) {
    for &id in ids {
        let (r, c) = store.get(id).dim();
        *store.get_mut(id) = randm(rng, r, c, scale);
    }
}

fn probe(g: &mut Graph, x: Var, w: &Array2<f64>) -> Var {
    let wv = g.constant(w.clone());
    let m = g.mul(x, wv);
    let (r, c) = g.shape(m);
    let ones_r = g.constant(Array2::ones((1, r)));
    let ones_c = g.constant(Array2::ones((c, 1)));
    let s = g.matmul(ones_r, m);
    g.matmul(s, ones_c)
}

fn corpus(seed: u64, n_train: usize, n_dev_each: usize) -> CorpusManifest {
    let specs = ToyLanguageSpec::pair(seed, ModelConfig::desk().n_feat, PrototypeParams::default()).unwrap();
    generate_corpus(&SynthConfig { seed, n_train, n_dev_each, ..SynthConfig::default() }, &specs).unwrap()
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    if a.dim() != b.dim() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn ctc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst, mut feasible, mut n) = (0.0f64, 0, 0);
    while n < 300 {
        let t = rng.random_range(1..=6);
        let v = rng.random_range(1..=4);
        let logits = uniform(&mut rng, t, v + 1, 3.0);
        let target: Vec<usize> = (0..rng.random_range(0..=3)).map(|_| rng.random_range(0..v)).collect();
        let lp = FrameLogProbs::from_logits(logits.view());
        n += 1;
        match (ctc_loss(&lp, &target), brute_force_ctc(&lp, &target)) {
            (Ok(a), Ok(b)) => {
                feasible += 1;
                worst = worst.max((a - b).abs());
            }
            (Err(_), Err(_)) if t < min_frames(&target) => {}
            (a, b) => return Err(format!("disagreement on feasibility: {a:?} vs {b:?}")),
        }
    }
    if feasible >= 200 && worst <= 1e-9 {
        Ok(format!("{feasible} feasible of {n} instances, max abs diff {worst:.1e}"))
    } else {
        Err(format!("{feasible} feasible, max abs diff {worst:.1e}"))
    }
}

fn gradient_checks() -> Outcome {
    const N: u64 = 20;
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |k: &'static str, e: f64| {
        let w = worst.entry(k).or_insert(0.0);
        *w = w.max(e);
    };
    for seed in 0..N {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        // ctc
        let (t, v) = (rng.random_range(3..=6), rng.random_range(1..=4));
        let logits = uniform(&mut rng, t, v + 1, 3.0);
        let target: Vec<usize> = (0..rng.random_range(0..=2)).map(|_| rng.random_range(0..v)).collect();
        let grad = ctc_gradient(&FrameLogProbs::from_logits(logits.view()), &target).unwrap();
        note(
            "ctc",
            array_grad_error(&logits, &grad, |x| ctc_loss(&FrameLogProbs::from_logits(x.view()), &target).unwrap()),
        );

        // adapter
        let (n, d) = (rng.random_range(1..5), rng.random_range(3..7));
        let mut store = ParamStore::new();
        let x = store.add("adapt.x", randm(&mut rng, n, d, 1.0)).unwrap();
        let a = Adapter::new(&mut store, "adapt.a", d, rng.random_range(1..d), &mut rng).unwrap();
        randomize(&mut store, &[a.up], &mut rng, 0.5);
        let w = randm(&mut rng, n, d, 1.0);
        note(
            "adapter",
            param_grad_error(&store, &[x, a.down, a.up], |g| {
                let xv = g.param(x);
                let y = a.forward(g, xv);
                probe(g, y, &w)
            }),
        );

        // fusion
        let mut store = ParamStore::new();
        let yz = store.add("adapt.y_zh", randm(&mut rng, n, d, 1.0)).unwrap();
        let ye = store.add("adapt.y_en", randm(&mut rng, n, d, 1.0)).unwrap();
        let fm = FusionModule::new(&mut store, "adapt.fusion", d).unwrap();
        randomize(&mut store, &fm.params(), &mut rng, 0.7);
        let (w1, w2) = (randm(&mut rng, n, d, 1.0), randm(&mut rng, n, 2, 1.0));
        let mut ids = vec![yz, ye];
        ids.extend(fm.params());
        note(
            "fusion",
            param_grad_error(&store, &ids, |g| {
                let (a, b) = (g.param(yz), g.param(ye));
                let (mix, wts) = fm.fuse_graph(g, a, b);
                let p1 = probe(g, mix, &w1);
                let p2 = probe(g, wts, &w2);
                g.add(p1, p2)
            }),
        );

        // lid
        let lens: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(1..5)).collect();
        let segs = Segments::from_lengths(&lens);
        let rows = segs.total_rows();
        let mut store = ParamStore::new();
        let yz = store.add("adapt.y_zh", randm(&mut rng, rows, d, 1.0)).unwrap();
        let ye = store.add("adapt.y_en", randm(&mut rng, rows, d, 1.0)).unwrap();
        let lid = LidHead::new(&mut store, "adapt.lid", d).unwrap();
        randomize(&mut store, &lid.params(), &mut rng, 0.8);
        let mut ids = vec![yz, ye];
        ids.extend(lid.params());
        note(
            "lid",
            param_grad_error(&store, &ids, |g| {
                let (a, b) = (g.param(yz), g.param(ye));
                let la = lid.loss_graph(g, a, &segs, Lang::Zh);
                let lb = lid.loss_graph(g, b, &segs, Lang::En);
                g.add(la, lb)
            }),
        );

        // refiner with its ctc head
        let cfg = RefinerConfig {
            n_layers: rng.random_range(1..3),
            hidden: rng.random_range(1..4),
            bidirectional: rng.random_bool(0.5),
        };
        let lens: Vec<usize> = (0..rng.random_range(1..3)).map(|_| rng.random_range(2..5)).collect();
        let segs = Segments::from_lengths(&lens);
        let rows = segs.total_rows();
        let d = rng.random_range(2..5);
        let mut store = ParamStore::new();
        let x = store.add("adapt.x", randm(&mut rng, rows, d, 1.0)).unwrap();
        let r = EncoderRefiner::new(&mut store, "adapt.refiner", d, cfg, &mut rng).unwrap();
        let head = CtcHead::new(&mut store, "adapt.ctc", d, 4).unwrap();
        randomize(&mut store, &r.params(), &mut rng, 0.6);
        randomize(&mut store, &head.params(), &mut rng, 0.6);
        let targets: Vec<Vec<usize>> =
            lens.iter().map(|&l| (0..rng.random_range(0..=l / 2)).map(|_| rng.random_range(0..3)).collect()).collect();
        let w = randm(&mut rng, rows, d, 1.0);
        let mut ids = vec![x];
        ids.extend(r.params());
        ids.extend(head.params());
        note(
            "refiner",
            param_grad_error(&store, &ids, |g| {
                let xv = g.param(x);
                let h = r.refine_graph(g, xv, &segs);
                let p = probe(g, h, &w);
                let logits = head.logits_graph(g, h);
                let c = g.ctc_loss(logits, &segs, &targets, 3).unwrap();
                g.add(p, c)
            }),
        );
    }
    let summary = worst.iter().map(|(k, e)| format!("{k} {e:.1e}")).collect::<Vec<_>>().join(", ");
    if worst.values().all(|&e| e < 1e-4) {
        Ok(format!("{N} instances each, max rel err: {summary}"))
    } else {
        Err(summary)
    }
}

fn identity_at_init() -> Outcome {
    let base = AsrModel::new_base(&ModelConfig::desk(), 31).unwrap();
    let data = corpus(31, 50, 0);
    let batch = data.split(Split::Train);
    let enc = |m: &AsrModel| {
        let mut g = Graph::inference(&m.store);
        let (h, _) = m.encode_graph(&mut g, &batch);
        g.value(h).clone()
    };
    let base_enc = enc(&base);
    let mut worst = 0.0f64;
    for id in 1..=8 {
        let adapted =
            AsrModel::with_adaptation(&base, AdaptSpec::new(Variant::table(id).unwrap(), &base.cfg), 2).unwrap();
        worst = worst.max(max_abs_diff(&enc(&adapted), &base_enc));
        match adapted.path_logits(&batch).unwrap() {
            None => {
                let plain = Variant { prompt_mode: adapted.spec.variant.prompt_mode, ..Variant::table(0).unwrap() };
                let reference = AsrModel::with_adaptation(&base, AdaptSpec::new(plain, &base.cfg), 2).unwrap();
                worst = worst.max(max_abs_diff(
                    &adapted.teacher_forced_logits(&batch).unwrap(),
                    &reference.teacher_forced_logits(&batch).unwrap(),
                ));
            }
            Some((zh, en)) => {
                for (lang, got) in [(Lang::Zh, zh), (Lang::En, en)] {
                    let forced: Vec<Utterance> =
                        batch.iter().map(|u| Utterance { dominant_lang: lang, ..(*u).clone() }).collect();
                    let refs: Vec<&Utterance> = forced.iter().collect();
                    worst = worst.max(max_abs_diff(&got, &base.teacher_forced_logits(&refs).unwrap()));
                }
            }
        }
    }
    if worst <= 1e-6 {
        Ok(format!("IDs 1-8 on 50 utterances, max abs diff {worst:.1e}"))
    } else {
        Err(format!("max abs diff {worst:.1e}"))
    }
}

fn freezing() -> Outcome {
    let base = AsrModel::new_base(&ModelConfig::desk(), 41).unwrap();
    let data = corpus(41, 400, 10);
    let mut notes = Vec::new();
    for id in [6, 8] {
        let mut cfg = TrainConfig::default();
        cfg.set_variant(Variant::table(id).unwrap());
        cfg.batch_size = 4;
        cfg.max_steps = Some(100);
        cfg.select_best = false;
        cfg.seed = 4;
        let (model, report) = train(&cfg, &data, &base.cfg, Some(&base)).map_err(|e| e.to_string())?;
        if report.selected_step != 100 {
            return Err(format!("ID {id}: ran {} steps", report.selected_step));
        }
        let part = classify_parameters(FreezePolicy::Adapt, &model.store).unwrap();
        if model.store.hash(&part.frozen) != base.store.hash(&part.frozen) {
            return Err(format!("ID {id}: frozen hash changed"));
        }
        let fresh = AsrModel::with_adaptation(&base, cfg.adapt_spec(), cfg.seed).unwrap();
        let mut moved: BTreeMap<String, bool> = BTreeMap::new();
        for &p in &part.trainable {
            let name = model.store.name(p);
            let module = name.rsplit_once('.').map_or(name, |(h, _)| h).to_string();
            *moved.entry(module).or_default() |= model.store.get(p) != fresh.store.get(p);
        }
        let stuck: Vec<_> = moved.iter().filter(|(_, &c)| !c).map(|(n, _)| n.clone()).collect();
        if !stuck.is_empty() {
            return Err(format!("ID {id}: unchanged {stuck:?}"));
        }
        notes.push(format!("ID {id}: {} frozen tensors intact, {} submodules moved", part.frozen.len(), moved.len()));
    }
    Ok(notes.join("; "))
}

fn fusion_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let check = |w: &Array2<f64>, mix: &Array2<f64>, a: &Array2<f64>, b: &Array2<f64>| -> bool {
        let dist = w.rows().into_iter().all(|r| r.iter().all(|&p| p >= 0.0) && (r.sum() - 1.0).abs() <= 1e-6);
        let convex = mix.iter().zip(a).zip(b).all(|((&m, &x), &y)| {
            let tol = 1e-12 * (1.0 + x.abs().max(y.abs()));
            m >= x.min(y) - tol && m <= x.max(y) + tol
        });
        dist && convex
    };
    for k in 0..300 {
        let (n, d) = (rng.random_range(1..8), rng.random_range(1..6));
        let mut store = ParamStore::new();
        let fm = FusionModule::new(&mut store, "adapt.fusion", d).unwrap();
        randomize(&mut store, &fm.params(), &mut rng, 5.0);
        let (a, b) = (uniform(&mut rng, n, d, 10.0), uniform(&mut rng, n, d, 10.0));
        let (mix, w) = fuse(&store, &fm, &a, &b).unwrap();
        if !check(&w, &mix, &a, &b) {
            return Err(format!("random instance {k} violates the contract"));
        }
    }
    // inside a full dual-path model with perturbed adaptation weights
    let base = AsrModel::new_base(&ModelConfig::desk(), 51).unwrap();
    let mut m = AsrModel::with_adaptation(&base, AdaptSpec::new(Variant::table(8).unwrap(), &base.cfg), 1).unwrap();
    for id in m.adapt_param_ids() {
        m.store.get_mut(id).mapv_inplace(|x| x + 0.2 * Distribution::<f64>::sample(&StandardNormal, &mut rng));
    }
    let data = corpus(51, 20, 0);
    let dual = m.dual.as_ref().unwrap();
    for u in data.split(Split::Train) {
        let mut g = Graph::inference(&m.store);
        let (h, _) = m.encode_graph(&mut g, &[u]);
        let enc = g.value(h).clone();
        let out = dual.dual_decode_step(&m.store, &m.base, &u.tokens, &enc).unwrap();
        if !check(&out.fusion_weights, &out.y_mix, &out.y_zh, &out.y_en) {
            return Err(format!("model forward on {} violates the contract", u.id));
        }
    }
    Ok("300 random tensors and 20 full-model forwards".into())
}

fn brute_edit(r: &[MixedUnit], h: &[MixedUnit]) -> usize {
    match (r, h) {
        ([], _) => h.len(),
        (_, []) => r.len(),
        ([r0, rs @ ..], [h0, hs @ ..]) => {
            let same = r0.surface.to_lowercase() == h0.surface.to_lowercase();
            (brute_edit(rs, hs) + usize::from(!same)).min(brute_edit(rs, h) + 1).min(brute_edit(r, hs) + 1)
        }
    }
}

fn metrics_oracle() -> Outcome {
    const UNITS: [&str; 6] = ["你", "好", "号", "WORLD", "A", "b"];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let text = |rng: &mut ChaCha8Rng| {
        let n = rng.random_range(0..=6);
        (0..n).map(|_| UNITS[rng.random_range(0..UNITS.len())]).collect::<Vec<_>>().join(" ")
    };
    for k in 0..600 {
        let (r, h) = (tokenize_mixed(&text(&mut rng)), tokenize_mixed(&text(&mut rng)));
        let (dp, bf) = (edit_cost(&align(&r, &h)), brute_edit(&r, &h));
        if dp != bf {
            return Err(format!("trial {k}: alignment {dp} vs brute force {bf}"));
        }
    }
    let rep = score("你 好 WORLD", "你 号 WORLD");
    let (mer, cer, wer) = (rep.overall.rate(), rep.zh.rate(), rep.en.rate());
    let close = |x: Option<f64>, y: f64| x.is_some_and(|x| (x - y).abs() < 1e-12);
    if close(mer, 1.0 / 3.0) && close(cer, 0.5) && close(wer, 0.0) {
        Ok("600 trials; worked example MER 33.3%, CER 50%, WER 0%".into())
    } else {
        Err(format!("worked example gave {mer:?} {cer:?} {wer:?}"))
    }
}

const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
const ABLATION_IDS: [u8; 5] = [0, 1, 2, 3, 8];

/// Base trained on a monolingual-dominant corpus, then the ablation on the
/// code-switching corpus; both share the seed's symbol prototypes.
fn ablation(seed: u64) -> AblationTable {
    let cfg = ModelConfig::desk();
    let specs = ToyLanguageSpec::pair(seed, cfg.n_feat, PrototypeParams::default()).unwrap();
    let mono = generate_corpus(
        &SynthConfig {
            seed: seed * 2 + 100,
            n_dev_each: 100,
            switch_prob: 0.0,
            start_dominant: 1.0,
            ..SynthConfig::default()
        },
        &specs,
    )
    .unwrap();
    let cs = generate_corpus(&SynthConfig { seed, ..SynthConfig::default() }, &specs).unwrap();
    let base_cfg = TrainConfig { seed, ..TrainConfig::base() };
    let (base, _) = train(&base_cfg, &mono, &cfg, None).unwrap();
    let template = TrainConfig { seed, ..TrainConfig::default() };
    ablate(&base, &cs, &template, &ABLATION_IDS).unwrap()
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn trend(tables: &[(u64, AblationTable)]) -> Outcome {
    let mut holds = 0;
    let mut notes = Vec::new();
    for (seed, t) in tables {
        let m = |id| t.row(id).unwrap().mean_mer;
        let others = ABLATION_IDS[1..].iter().map(|&i| m(i)).fold(0.0, f64::max);
        let wide = m(0) >= others + 0.05;
        let adapters = m(3) < m(1) && m(3) < m(2);
        let full = m(8) <= m(3) - 0.01;
        let ok = wide && adapters && full;
        holds += usize::from(ok);
        notes.push(format!(
            "seed {seed} {}: ID0 {} ID1 {} ID2 {} ID3 {} ID8 {}",
            if ok { "ok" } else { "miss" },
            pct(m(0)),
            pct(m(1)),
            pct(m(2)),
            pct(m(3)),
            pct(m(8))
        ));
    }
    let msg = format!("{holds}/3 seeds; {}", notes.join("; "));
    if holds >= 2 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn non_dominant(tables: &[(u64, AblationTable)]) -> Outcome {
    let mut ok_all = true;
    let mut notes = Vec::new();
    for (seed, t) in tables {
        let (r3, r8) = (t.row(3).unwrap(), t.row(8).unwrap());
        let man = (r8.dev_man.en.mer, r3.dev_man.en.mer);
        let sge = (r8.dev_sge.zh.mer, r3.dev_sge.zh.mer);
        let better = |(a, b): (Option<f64>, Option<f64>)| matches!((a, b), (Some(a), Some(b)) if a < b);
        let ok = better(man) || better(sge);
        ok_all &= ok;
        let show = |(a, b): (Option<f64>, Option<f64>)| {
            format!("{} vs {}", a.map_or("NA".into(), pct), b.map_or("NA".into(), pct))
        };
        notes.push(format!("seed {seed}: man EN {}, sge ZH {}", show(man), show(sge)));
    }
    let msg = notes.join("; ");
    if ok_all {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Runs `csasr` with whitespace-separated `args` inside `dir`.
fn csasr(args: &str, dir: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_csasr"))
        .args(args.split_whitespace())
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("csasr {args}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

/// Runs the whole CLI pipeline twice in separate directories and compares
/// every output byte for byte.
fn cli_determinism() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let steps = [
        "gen-data --seed 3 --n-train 60 --n-dev-each 12 --out cs.jsonl",
        "gen-data --seed 4 --lang-seed 3 --n-train 60 --n-dev-each 12 --switch-prob 0 --start-dominant 1 --out mono.jsonl",
        "train-base --corpus mono.jsonl --seed 1 --epochs 1 --batch-size 8 --out base.json --report base_report.json",
        "adapt --corpus cs.jsonl --base base.json --variant 8 --seed 2 --epochs 1 --batch-size 8 --out adapt.json --report adapt_report.json",
        "eval --corpus cs.jsonl --base base.json --adapt adapt.json --out eval.json",
        "decode --corpus cs.jsonl --base base.json --adapt adapt.json --split dev_sge --out hyp.txt --refs ref.txt --fusion-dump fusion.tsv",
        "score --ref ref.txt --hyp hyp.txt --out score.json --tsv score.tsv",
        "ablate --corpus cs.jsonl --base base.json --ids 0,3,8 --seed 2 --max-steps 3 --batch-size 8 --out ablate.json",
    ];
    for dir in &dirs {
        for s in &steps {
            csasr(s, dir.path())?;
        }
    }
    let files = [
        "cs.jsonl",
        "mono.jsonl",
        "base.json",
        "base_report.json",
        "adapt.json",
        "adapt_report.json",
        "eval.json",
        "hyp.txt",
        "ref.txt",
        "fusion.tsv",
        "score.json",
        "score.tsv",
        "ablate.json",
    ];
    for f in files {
        let a = std::fs::read(dirs[0].path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = std::fs::read(dirs[1].path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        if a != b {
            return Err(format!("{f} differs between runs"));
        }
    }
    Ok(format!("{} invocations repeated, {} outputs byte-identical", steps.len(), files.len()))
}

fn main() {
    let mut failed = 0;
    let mut report = |n: u8, name: &str, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let outcome = f();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {n} PASS {name} ({secs:.1}s): {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {n} FAIL {name} ({secs:.1}s): {msg}");
            }
        }
    };
    report(1, "ctc oracle", &ctc_oracle);
    report(2, "gradient checks", &gradient_checks);
    report(3, "identity at init", &identity_at_init);
    report(4, "freezing", &freezing);
    report(5, "fusion contract", &fusion_contract);
    report(6, "metrics oracle", &metrics_oracle);
    let t = Instant::now();
    let tables: Vec<(u64, AblationTable)> = ABLATION_SEEDS.iter().map(|&s| (s, ablation(s))).collect();
    println!("ablation over seeds {ABLATION_SEEDS:?} took {:.0}s", t.elapsed().as_secs_f64());
    for (seed, t) in &tables {
        println!("seed {seed}\n{}", t.render());
    }
    report(7, "desk-scale trend", &|| trend(&tables));
    report(8, "non-dominant language", &|| non_dominant(&tables));
    report(9, "cli determinism", &cli_determinism);
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
