//! `csasr`: corpus generation, training, evaluation, decoding, scoring and
//! the ablation sweep.
//!
//! Exit status is 0 on success, 1 for usage, configuration and input
//! errors, 2 for internal failures. Set `CSASR_LOG` (e.g. `info`) for
//! progress output on stderr.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use csasr::checkpoint::{load_adapted, load_base, Checkpoint};
use csasr::data::{
    generate_corpus, load_manifest, save_manifest, CorpusManifest, PrototypeParams, Split, SynthConfig,
    ToyLanguageSpec, Utterance,
};
use csasr::metrics::{score, ErrorReport};
use csasr::system::{AsrModel, CtcRoute, PromptChoice, Variant};
use csasr::training::{ablate, evaluate, train, Stage, TrainConfig};
use csasr::ModelConfig;

#[derive(Parser)]
#[command(name = "csasr", version, about = "Code-switching ASR adaptation toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic code-switching corpus manifest.
    GenData(GenDataArgs),
    /// Pretrain the base model (stage 0).
    TrainBase(TrainBaseArgs),
    /// Train adaptation modules on top of a frozen base (stage 1).
    Adapt(AdaptArgs),
    /// Decode dev splits and write an error report.
    Eval(EvalArgs),
    /// Decode one split and write hypotheses, one line per utterance.
    Decode(DecodeArgs),
    /// Score hypothesis text against reference text.
    Score(ScoreArgs),
    /// Train and evaluate the ablation variants from one base.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct OutArgs {
    /// Output path.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    out: OutArgs,
    /// JSON file with any of the flag names below as keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Seed for the symbol prototypes; corpora sharing it share acoustics.
    #[arg(long)]
    lang_seed: Option<u64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_dev_each: Option<usize>,
    #[arg(long)]
    switch_prob: Option<f64>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    start_dominant: Option<f64>,
    #[arg(long)]
    min_tokens: Option<usize>,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    lang_shift: Option<f64>,
    #[arg(long)]
    similarity: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenConfig {
    seed: Option<u64>,
    lang_seed: Option<u64>,
    n_train: Option<usize>,
    n_dev_each: Option<usize>,
    switch_prob: Option<f64>,
    noise_std: Option<f64>,
    start_dominant: Option<f64>,
    min_tokens: Option<usize>,
    max_tokens: Option<usize>,
    lang_shift: Option<f64>,
    similarity: Option<f64>,
}

/// Flags named after [`TrainConfig`] fields; each overrides `--config`.
#[derive(Args, Default)]
struct TrainFlags {
    /// JSON file holding a (partial) TrainConfig.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// enc_ref | final
    #[arg(long)]
    ctc_route: Option<String>,
    #[arg(long)]
    refiner_layers: Option<usize>,
    #[arg(long)]
    refiner_hidden: Option<usize>,
    #[arg(long)]
    refiner_bidirectional: Option<bool>,
    /// false keeps the last step instead of the best-on-dev parameters.
    #[arg(long)]
    select_best: Option<bool>,
}

#[derive(Args)]
struct VariantFlags {
    /// Ablation row 0-8; individual flags below override it.
    #[arg(long)]
    variant: Option<u8>,
    #[arg(long)]
    enc_adapters: Option<bool>,
    #[arg(long)]
    dec_adapters: Option<bool>,
    #[arg(long)]
    refiner: Option<bool>,
    #[arg(long)]
    refiner_ctc: Option<bool>,
    /// dominant | concat | pair
    #[arg(long)]
    prompt_mode: Option<String>,
}

#[derive(Args)]
struct TrainBaseArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    out: OutArgs,
    /// Where to write the TrainReport JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// JSON ModelConfig; defaults to the desk configuration.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    base: PathBuf,
    #[command(flatten)]
    out: OutArgs,
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    variant: VariantFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    base: PathBuf,
    /// Adapt checkpoint; omit to run the base model alone.
    #[arg(long)]
    adapt: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// dev_man, dev_sge, train, or all (both dev splits).
    #[arg(long, default_value = "all")]
    split: String,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "dev_man")]
    split: String,
    #[command(flatten)]
    out: OutArgs,
    /// Also write the reference transcripts, line-aligned with the output.
    #[arg(long)]
    refs: Option<PathBuf>,
    /// Dual-path models: write per-position fusion weights as TSV.
    #[arg(long)]
    fusion_dump: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    hyp: PathBuf,
    /// Report JSON; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-utterance TSV.
    #[arg(long)]
    tsv: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    base: PathBuf,
    #[command(flatten)]
    out: OutArgs,
    /// Comma-separated variant ids.
    #[arg(long, default_value = "0,1,2,3,4,5,6,7,8", value_delimiter = ',')]
    ids: Vec<u8>,
    #[command(flatten)]
    train: TrainFlags,
}

fn guard(path: &Path, force: bool) -> anyhow::Result<()> {
    if path.exists() && !force {
        bail!(UsageError(format!("{} exists; pass --force to overwrite", path.display())));
    }
    Ok(())
}

/// A user-facing failure raised by the CLI itself.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn corpus(path: &Path) -> anyhow::Result<CorpusManifest> {
    load_manifest(path).with_context(|| format!("loading {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    guard(&a.out.out, a.out.force)?;
    let file: Option<GenConfig> = a.config.as_deref().map(read_json).transpose()?;
    let pick = |flag: Option<f64>, f: fn(&GenConfig) -> Option<f64>, d: f64| {
        flag.or_else(|| file.as_ref().and_then(f)).unwrap_or(d)
    };
    let pick_n = |flag: Option<usize>, f: fn(&GenConfig) -> Option<usize>, d: usize| {
        flag.or_else(|| file.as_ref().and_then(f)).unwrap_or(d)
    };
    let seed = a.seed.or_else(|| file.as_ref().and_then(|c| c.seed)).ok_or_else(|| usage("--seed is required"))?;
    let lang_seed = a.lang_seed.or_else(|| file.as_ref().and_then(|c| c.lang_seed)).unwrap_or(0);
    let d = SynthConfig::default();
    let synth = SynthConfig {
        seed,
        n_train: pick_n(a.n_train, |c| c.n_train, d.n_train),
        n_dev_each: pick_n(a.n_dev_each, |c| c.n_dev_each, d.n_dev_each),
        switch_prob: pick(a.switch_prob, |c| c.switch_prob, d.switch_prob),
        noise_std: pick(a.noise_std, |c| c.noise_std, d.noise_std),
        start_dominant: pick(a.start_dominant, |c| c.start_dominant, d.start_dominant),
        min_tokens: pick_n(a.min_tokens, |c| c.min_tokens, d.min_tokens),
        max_tokens: pick_n(a.max_tokens, |c| c.max_tokens, d.max_tokens),
    };
    let pd = PrototypeParams::default();
    let proto = PrototypeParams {
        lang_shift: pick(a.lang_shift, |c| c.lang_shift, pd.lang_shift),
        similarity: pick(a.similarity, |c| c.similarity, pd.similarity),
    };
    let specs = ToyLanguageSpec::pair(lang_seed, ModelConfig::desk().n_feat, proto)?;
    let m = generate_corpus(&synth, &specs)?;
    save_manifest(&m, &a.out.out)?;
    log::info!("wrote {} utterances to {}", m.utterances.len(), a.out.out.display());
    Ok(())
}

/// Layers: stage defaults, then `--config`, then explicit flags.
fn train_config(stage: Stage, flags: &TrainFlags, variant: Option<&VariantFlags>) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &flags.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let mut v: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            let defaults = serde_json::to_value(match stage {
                Stage::Base => TrainConfig::base(),
                Stage::Adapt => TrainConfig::default(),
            })?;
            let obj = v.as_object_mut().ok_or_else(|| usage("--config must hold a JSON object"))?;
            if flags.seed.is_none() && !obj.contains_key("seed") {
                return Err(usage("--seed is required"));
            }
            for (k, dv) in defaults.as_object().expect("struct serializes to an object") {
                obj.entry(k.clone()).or_insert_with(|| dv.clone());
            }
            serde_json::from_value::<TrainConfig>(v).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => {
            if flags.seed.is_none() {
                return Err(usage("--seed is required"));
            }
            match stage {
                Stage::Base => TrainConfig::base(),
                Stage::Adapt => TrainConfig::default(),
            }
        }
    };
    cfg.stage = stage;
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = flags.$f.clone() { cfg.$f = v; } )* };
    }
    set!(
        seed,
        lr,
        epochs,
        batch_size,
        alpha,
        lambda,
        rank,
        clip_norm,
        refiner_layers,
        refiner_hidden,
        refiner_bidirectional,
        select_best
    );
    if flags.max_steps.is_some() {
        cfg.max_steps = flags.max_steps;
    }
    if let Some(r) = &flags.ctc_route {
        cfg.ctc_route = r.parse::<CtcRoute>()?;
    }
    if let Some(v) = variant {
        if let Some(id) = v.variant {
            cfg.set_variant(Variant::table(id)?);
        }
        macro_rules! setv {
            ($($f:ident),*) => { $( if let Some(x) = v.$f { cfg.$f = x; } )* };
        }
        setv!(enc_adapters, dec_adapters, refiner, refiner_ctc);
        if let Some(p) = &v.prompt_mode {
            cfg.prompt_mode = p.parse::<PromptChoice>()?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_base(a: TrainBaseArgs) -> anyhow::Result<()> {
    guard(&a.out.out, a.out.force)?;
    if let Some(r) = &a.report {
        guard(r, a.out.force)?;
    }
    let cfg = train_config(Stage::Base, &a.train, None)?;
    let model_cfg: ModelConfig = match &a.model_config {
        Some(p) => read_json(p)?,
        None => ModelConfig::desk(),
    };
    let m = corpus(&a.corpus)?;
    let (model, report) = train(&cfg, &m, &model_cfg, None)?;
    Checkpoint::base(&model).save(&a.out.out)?;
    if let Some(r) = &a.report {
        write_json(r, &report)?;
    }
    Ok(())
}

fn adapt(a: AdaptArgs) -> anyhow::Result<()> {
    guard(&a.out.out, a.out.force)?;
    if let Some(r) = &a.report {
        guard(r, a.out.force)?;
    }
    let cfg = train_config(Stage::Adapt, &a.train, Some(&a.variant))?;
    let base = load_base(&a.base)?;
    let m = corpus(&a.corpus)?;
    let (model, report) = train(&cfg, &m, &base.cfg.clone(), Some(&base))?;
    Checkpoint::adapt(&model).save(&a.out.out)?;
    if let Some(r) = &a.report {
        write_json(r, &report)?;
    }
    Ok(())
}

fn load_model(m: &ModelArgs) -> anyhow::Result<AsrModel> {
    Ok(match &m.adapt {
        Some(ad) => load_adapted(&m.base, ad)?,
        None => load_base(&m.base)?,
    })
}

fn splits(name: &str) -> anyhow::Result<Vec<Split>> {
    if name == "all" {
        return Ok(Split::DEV.to_vec());
    }
    Ok(vec![name.parse::<Split>()?])
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    guard(&a.out.out, a.out.force)?;
    let model = load_model(&a.model)?;
    let m = corpus(&a.corpus)?;
    let mut out = serde_json::Map::new();
    for s in splits(&a.split)? {
        let ev = evaluate(&model, &m.split(s))?;
        out.insert(s.as_str().into(), serde_json::to_value(ev.report.to_json())?);
    }
    write_json(&a.out.out, &out)
}

fn decode(a: DecodeArgs) -> anyhow::Result<()> {
    for p in std::iter::once(&a.out.out).chain(&a.refs).chain(&a.fusion_dump) {
        guard(p, a.out.force)?;
    }
    let model = load_model(&a.model)?;
    let m = corpus(&a.corpus)?;
    let [split] = splits(&a.split)?[..] else {
        return Err(usage("decode takes a single split"));
    };
    let utts: Vec<&Utterance> = m.split(split);
    let ev = evaluate(&model, &utts)?;
    fs::write(&a.out.out, lines(&ev.hyps))?;
    if let Some(r) = &a.refs {
        let refs: Vec<String> = utts.iter().map(|u| u.text()).collect();
        fs::write(r, lines(&refs))?;
    }
    if let Some(p) = &a.fusion_dump {
        let mut w = std::io::BufWriter::new(fs::File::create(p)?);
        writeln!(w, "utterance\tposition\tw_zh\tw_en\tref_lang")?;
        for u in &utts {
            let Some(rows) = model.fusion_weights(u)? else {
                return Err(usage("--fusion-dump needs a dual-path (pair prompt) model"));
            };
            for (pos, wz, we, lang) in rows {
                writeln!(w, "{}\t{pos}\t{wz:.6}\t{we:.6}\t{lang}", u.id)?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

fn lines(v: &[String]) -> String {
    v.iter().map(|s| format!("{s}\n")).collect()
}

fn score_cmd(a: ScoreArgs) -> anyhow::Result<()> {
    for p in a.out.iter().chain(&a.tsv) {
        guard(p, a.force)?;
    }
    let read = |p: &Path| -> anyhow::Result<Vec<String>> {
        Ok(fs::read_to_string(p)
            .with_context(|| format!("reading {}", p.display()))?
            .lines()
            .map(String::from)
            .collect())
    };
    let refs = read(&a.reference)?;
    let hyps = read(&a.hyp)?;
    if refs.len() != hyps.len() {
        return Err(usage(format!("reference has {} lines but hypothesis has {}", refs.len(), hyps.len())));
    }
    let mut total = ErrorReport::default();
    let mut tsv = String::from("line\ts\td\ti\tn\tmer\n");
    for (k, (r, h)) in refs.iter().zip(&hyps).enumerate() {
        let rep = score(r, h);
        let o = rep.overall;
        let mer = o.rate().map_or("NA".to_string(), |x| format!("{x:.6}"));
        tsv.push_str(&format!("{}\t{}\t{}\t{}\t{}\t{mer}\n", k + 1, o.s, o.d, o.i, o.n));
        total.add(&rep);
    }
    match &a.out {
        Some(p) => write_json(p, &total.to_json())?,
        None => println!("{}", serde_json::to_string_pretty(&total.to_json())?),
    }
    if let Some(p) = &a.tsv {
        fs::write(p, tsv)?;
    }
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> anyhow::Result<()> {
    guard(&a.out.out, a.out.force)?;
    let cfg = train_config(Stage::Adapt, &a.train, None)?;
    let base = load_base(&a.base)?;
    let m = corpus(&a.corpus)?;
    let table = ablate(&base, &m, &cfg, &a.ids)?;
    write_json(&a.out.out, &table)?;
    print!("{}", table.render());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Command::GenData(a) => gen_data(a),
        Command::TrainBase(a) => train_base(a),
        Command::Adapt(a) => adapt(a),
        Command::Eval(a) => eval(a),
        Command::Decode(a) => decode(a),
        Command::Score(a) => score_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    }
}

/// 1 for anything the user can fix, 2 for failures inside the library.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<csasr::Error>() {
            return if err.is_user_error() { 1 } else { 2 };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("CSASR_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
        Err(_) => ExitCode::from(2),
    }
}
