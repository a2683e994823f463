//! Synthetic two-language code-switching corpus and its JSON-lines manifest.
//!
//! Every symbol has one acoustic prototype; an utterance is a run of symbols
//! rendered as 3 to 5 noisy copies of its prototype. The two languages share
//! a hidden structure (`similarity`) and are pulled apart along one direction
//! (`lang_shift`), so language identity is audible but easy to confuse.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{Lang, ModelConfig};
use crate::ctc::min_frames;
use crate::error::{Error, Result};

pub const SYMBOLS_PER_LANG: usize = 16;

const ZH_SURFACES: [&str; SYMBOLS_PER_LANG] =
    ["的", "一", "是", "不", "了", "人", "我", "在", "有", "他", "这", "中", "大", "来", "上", "国"];
const EN_SURFACES: [&str; SYMBOLS_PER_LANG] =
    ["BA", "KO", "MI", "SU", "TE", "RA", "LO", "NE", "PI", "DU", "GE", "FA", "HO", "JU", "VI", "WE"];

/// Language of a text token id: zh owns `0..16`, en owns `16..32`.
pub fn token_lang(id: usize) -> Option<Lang> {
    match id {
        i if i < SYMBOLS_PER_LANG => Some(Lang::Zh),
        i if i < 2 * SYMBOLS_PER_LANG => Some(Lang::En),
        _ => None,
    }
}

pub fn surface(id: usize) -> Option<&'static str> {
    match token_lang(id)? {
        Lang::Zh => Some(ZH_SURFACES[id]),
        Lang::En => Some(EN_SURFACES[id - SYMBOLS_PER_LANG]),
    }
}

/// Space-joined transcript; ids outside the text vocabulary are skipped.
pub fn render_text(tokens: &[usize]) -> String {
    tokens.iter().filter_map(|&t| surface(t)).collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyLanguageSpec {
    pub lang: Lang,
    pub symbols: Vec<usize>,
    pub prototypes: Array2<f64>,
    pub frames_per_symbol: (usize, usize),
}

/// How the two prototype sets are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrototypeParams {
    /// Offset of each language along the shared language direction.
    pub lang_shift: f64,
    /// Correlation between the k-th zh and k-th en prototype.
    pub similarity: f64,
}

impl Default for PrototypeParams {
    fn default() -> Self {
        PrototypeParams { lang_shift: 0.6, similarity: 0.95 }
    }
}

impl ToyLanguageSpec {
    /// Both languages' specs from one prototype seed. With unit language
    /// direction `u`, `zh_k = P_k + m u` and
    /// `en_k = rho P_k + sqrt(1 - rho^2) Q_k - m u`, where `P` and `Q` are
    /// standard normal with their `u` component removed.
    pub fn pair(lang_seed: u64, n_feat: usize, params: PrototypeParams) -> Result<(Self, Self)> {
        if n_feat < 2 {
            return Err(Error::Config("need at least two feature dims".into()));
        }
        let PrototypeParams { lang_shift, similarity } = params;
        if !(0.0..=1.0).contains(&similarity) || !lang_shift.is_finite() {
            return Err(Error::Config(format!(
                "prototype params out of range: shift {lang_shift}, similarity {similarity}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(lang_seed);
        let mut normal =
            |r: usize, c: usize| -> Array2<f64> { Array2::from_shape_fn((r, c), |_| StandardNormal.sample(&mut rng)) };
        let u = normal(1, n_feat).row(0).to_owned();
        let u: Array1<f64> = &u / u.dot(&u).sqrt();
        let strip = |mut m: Array2<f64>| {
            for mut row in m.rows_mut() {
                let c = row.dot(&u);
                row.scaled_add(-c, &u);
            }
            m
        };
        let p = strip(normal(SYMBOLS_PER_LANG, n_feat));
        let q = strip(normal(SYMBOLS_PER_LANG, n_feat));
        let shift = Array2::from_shape_fn((SYMBOLS_PER_LANG, n_feat), |(_, j)| lang_shift * u[j]);
        let zh = &p + &shift;
        let en = &p * similarity + &q * (1.0 - similarity * similarity).sqrt() - &shift;
        let make = |lang: Lang, offset: usize, prototypes: Array2<f64>| ToyLanguageSpec {
            lang,
            symbols: (offset..offset + SYMBOLS_PER_LANG).collect(),
            prototypes,
            frames_per_symbol: (3, 5),
        };
        Ok((make(Lang::Zh, 0, zh), make(Lang::En, SYMBOLS_PER_LANG, en)))
    }

    fn validate(&self) -> Result<()> {
        if self.symbols.is_empty() {
            return Err(Error::Config(format!("{} has no symbols", self.lang)));
        }
        if self.prototypes.nrows() != self.symbols.len() {
            return Err(Error::Config(format!("{} prototype count differs from symbol count", self.lang)));
        }
        let (lo, hi) = self.frames_per_symbol;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("bad frames_per_symbol range {lo}..={hi}")));
        }
        if self.symbols.iter().any(|&s| token_lang(s) != Some(self.lang)) {
            return Err(Error::Config(format!("{} symbol outside its id range", self.lang)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    DevMan,
    DevSge,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::DevMan, Split::DevSge];
    pub const DEV: [Split; 2] = [Split::DevMan, Split::DevSge];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::DevMan => "dev_man",
            Split::DevSge => "dev_sge",
        }
    }

    /// The language a dev split is led by.
    pub fn dominant(self) -> Option<Lang> {
        match self {
            Split::Train => None,
            Split::DevMan => Some(Lang::Zh),
            Split::DevSge => Some(Lang::En),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown split {s:?}")))
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub split: Split,
    pub dominant_lang: Lang,
    pub tokens: Vec<usize>,
    pub lang_tags: Vec<Lang>,
    /// `[n_frames, n_feat]`, every value exactly representable as f32.
    pub features: Array2<f64>,
}

impl Utterance {
    pub fn text(&self) -> String {
        render_text(&self.tokens)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Validation(format!("utterance {}: {msg}", self.id)));
        if self.tokens.is_empty() {
            return bad("no tokens".into());
        }
        if self.tokens.len() != self.lang_tags.len() {
            return bad(format!("{} tokens but {} language tags", self.tokens.len(), self.lang_tags.len()));
        }
        for (i, (&t, &l)) in self.tokens.iter().zip(&self.lang_tags).enumerate() {
            if token_lang(t) != Some(l) {
                return bad(format!("token {t} at position {i} is not a {l} symbol"));
            }
        }
        if let Some(d) = self.split.dominant() {
            if d != self.dominant_lang {
                return bad(format!("{} must be {d}-dominant", self.split));
            }
        }
        if self.features.nrows() < min_frames(&self.tokens) {
            return bad(format!("{} frames cannot align {} tokens", self.features.nrows(), self.tokens.len()));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return bad("non-finite feature".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusManifest {
    pub utterances: Vec<Utterance>,
}

impl CorpusManifest {
    pub fn split(&self, split: Split) -> Vec<&Utterance> {
        self.utterances.iter().filter(|u| u.split == split).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let mut n_feat = None;
        for u in &self.utterances {
            u.validate()?;
            if !ids.insert(u.id.as_str()) {
                return Err(Error::Validation(format!("duplicate utterance id {}", u.id)));
            }
            if *n_feat.get_or_insert(u.features.ncols()) != u.features.ncols() {
                return Err(Error::Validation(format!("utterance {} has a different feature width", u.id)));
            }
        }
        Ok(())
    }

    /// Feature width shared by all utterances, if any.
    pub fn n_feat(&self) -> Option<usize> {
        self.utterances.first().map(|u| u.features.ncols())
    }

    /// Fails unless every utterance fits the model's input limits.
    pub fn check_fits(&self, cfg: &ModelConfig) -> Result<()> {
        for u in &self.utterances {
            if u.features.ncols() != cfg.n_feat {
                return Err(Error::Config(format!(
                    "corpus features have {} dims, model expects {}",
                    u.features.ncols(),
                    cfg.n_feat
                )));
            }
            if u.features.nrows() > cfg.max_src_frames || u.tokens.len() + 4 > cfg.max_tgt_tokens {
                return Err(Error::Validation(format!("utterance {} exceeds model length limits", u.id)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_dev_each: usize,
    pub switch_prob: f64,
    pub noise_std: f64,
    /// Probability that an utterance starts in its dominant language.
    pub start_dominant: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_train: 2000,
            n_dev_each: 200,
            switch_prob: 0.3,
            noise_std: 0.5,
            start_dominant: 0.8,
            min_tokens: 4,
            max_tokens: 8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be in [0, 1], got {v}")))
            }
        };
        unit("switch_prob", self.switch_prob)?;
        unit("start_dominant", self.start_dominant)?;
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std must be finite and >= 0, got {}", self.noise_std)));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::Config("token count range is empty".into()));
        }
        Ok(())
    }
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

fn generate_one(cfg: &SynthConfig, specs: [&ToyLanguageSpec; 2], index: u64, split: Split) -> Utterance {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let dominant = split.dominant().unwrap_or_else(|| if rng.random_bool(0.5) { Lang::Zh } else { Lang::En });
    let n = rng.random_range(cfg.min_tokens..=cfg.max_tokens);
    let mut lang = if rng.random_bool(cfg.start_dominant) { dominant } else { dominant.other() };
    let n_feat = specs[0].prototypes.ncols();
    let mut tokens = Vec::with_capacity(n);
    let mut lang_tags = Vec::with_capacity(n);
    let mut rows: Vec<f64> = Vec::new();
    for i in 0..n {
        if i > 0 && rng.random_bool(cfg.switch_prob) {
            lang = lang.other();
        }
        let spec = specs[lang.index()];
        let k = rng.random_range(0..spec.symbols.len());
        let (lo, hi) = spec.frames_per_symbol;
        let reps = rng.random_range(lo..=hi);
        let proto = spec.prototypes.row(k);
        for _ in 0..reps {
            for &p in proto.iter() {
                let e: f64 = StandardNormal.sample(&mut rng);
                rows.push(round_f32(p + cfg.noise_std * e));
            }
        }
        tokens.push(spec.symbols[k]);
        lang_tags.push(lang);
    }
    let n_frames = rows.len() / n_feat;
    Utterance {
        id: format!("{}-{index:06}", split.as_str()),
        split,
        dominant_lang: dominant,
        tokens,
        lang_tags,
        features: Array2::from_shape_vec((n_frames, n_feat), rows).expect("row-major frame buffer"),
    }
}

/// Deterministic under `cfg.seed`; utterance `i` draws from its own ChaCha
/// stream so the corpus does not depend on generation order.
pub fn generate_corpus(cfg: &SynthConfig, specs: &(ToyLanguageSpec, ToyLanguageSpec)) -> Result<CorpusManifest> {
    cfg.validate()?;
    specs.0.validate()?;
    specs.1.validate()?;
    if specs.0.lang != Lang::Zh || specs.1.lang != Lang::En {
        return Err(Error::Config("specs must be ordered (zh, en)".into()));
    }
    if specs.0.prototypes.ncols() != specs.1.prototypes.ncols() {
        return Err(Error::Config("prototype widths differ between languages".into()));
    }
    let plan = std::iter::repeat_n(Split::Train, cfg.n_train)
        .chain(std::iter::repeat_n(Split::DevMan, cfg.n_dev_each))
        .chain(std::iter::repeat_n(Split::DevSge, cfg.n_dev_each));
    let utterances: Vec<Utterance> =
        plan.enumerate().map(|(i, split)| generate_one(cfg, [&specs.0, &specs.1], i as u64, split)).collect();
    let m = CorpusManifest { utterances };
    m.validate()?;
    Ok(m)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    split: String,
    dominant_lang: String,
    tokens: Vec<usize>,
    lang_tags: Vec<String>,
    text: String,
    features: String,
    n_frames: usize,
    n_feat: usize,
}

fn to_record(u: &Utterance) -> Record {
    let mut bytes = Vec::with_capacity(u.features.len() * 4);
    for &v in u.features.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Record {
        id: u.id.clone(),
        split: u.split.as_str().into(),
        dominant_lang: u.dominant_lang.as_str().into(),
        tokens: u.tokens.clone(),
        lang_tags: u.lang_tags.iter().map(|l| l.as_str().into()).collect(),
        text: u.text(),
        features: B64.encode(bytes),
        n_frames: u.features.nrows(),
        n_feat: u.features.ncols(),
    }
}

fn from_record(r: Record, line: usize) -> Result<Utterance> {
    let invalid = |msg: String| Error::Validation(format!("line {line}: {msg}"));
    let lang = |s: &str| s.parse::<Lang>().map_err(|_| invalid(format!("unknown language {s:?}")));
    let split: Split = r.split.parse().map_err(|e: Error| invalid(e.to_string()))?;
    let bytes = B64.decode(&r.features).map_err(|e| Error::Parse { line, msg: format!("field features: {e}") })?;
    if bytes.len() != r.n_frames * r.n_feat * 4 {
        return Err(invalid(format!(
            "features hold {} bytes, expected {} x {} float32",
            bytes.len(),
            r.n_frames,
            r.n_feat
        )));
    }
    let values: Vec<f64> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    let u = Utterance {
        id: r.id,
        split,
        dominant_lang: lang(&r.dominant_lang)?,
        tokens: r.tokens,
        lang_tags: r.lang_tags.iter().map(|s| lang(s)).collect::<Result<_>>()?,
        features: Array2::from_shape_vec((r.n_frames, r.n_feat), values).expect("length checked above"),
    };
    u.validate().map_err(|e| invalid(e.to_string()))?;
    if u.text() != r.text {
        return Err(invalid(format!("text {:?} does not match tokens", r.text)));
    }
    Ok(u)
}

pub fn write_manifest<W: Write>(m: &CorpusManifest, mut w: W) -> Result<()> {
    for u in &m.utterances {
        serde_json::to_writer(&mut w, &to_record(u))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_manifest(m: &CorpusManifest, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_manifest(m, std::io::BufWriter::new(f))
}

pub fn read_manifest<R: BufRead>(r: R) -> Result<CorpusManifest> {
    let mut utterances = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        utterances.push(from_record(rec, line_no)?);
    }
    let m = CorpusManifest { utterances };
    m.validate()?;
    Ok(m)
}

pub fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    let f = std::fs::File::open(path)?;
    read_manifest(BufReader::new(f))
}
