//! Mixed-unit error rates: CJK characters for zh, whitespace-delimited runs
//! for en, and one Levenshtein alignment over the mixed sequence.

use serde::{Deserialize, Serialize};

use crate::config::Lang;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixedUnit {
    pub surface: String,
    pub lang: Lang,
}

/// CJK Unified Ideographs plus Extension A.
pub fn is_cjk(c: char) -> bool {
    matches!(c, '\u{4E00}'..='\u{9FFF}' | '\u{3400}'..='\u{4DBF}')
}

pub fn tokenize_mixed(text: &str) -> Vec<MixedUnit> {
    let mut out = Vec::new();
    let mut run = String::new();
    let flush = |run: &mut String, out: &mut Vec<MixedUnit>| {
        if !run.is_empty() {
            out.push(MixedUnit { surface: std::mem::take(run), lang: Lang::En });
        }
    };
    for c in text.chars() {
        if c.is_whitespace() {
            flush(&mut run, &mut out);
        } else if is_cjk(c) {
            flush(&mut run, &mut out);
            out.push(MixedUnit { surface: c.to_string(), lang: Lang::Zh });
        } else {
            run.push(c);
        }
    }
    flush(&mut run, &mut out);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditOp {
    Match { r: usize, h: usize },
    Sub { r: usize, h: usize },
    Del { r: usize },
    Ins { h: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreOptions {
    pub case_insensitive: bool,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        ScoreOptions { case_insensitive: true }
    }
}

fn same(a: &MixedUnit, b: &MixedUnit, opts: ScoreOptions) -> bool {
    if opts.case_insensitive {
        a.surface.to_lowercase() == b.surface.to_lowercase()
    } else {
        a.surface == b.surface
    }
}

/// Minimal-cost edit script with unit costs. Among equal-cost scripts the
/// traceback prefers match, then substitution, deletion, insertion.
pub fn align(reference: &[MixedUnit], hyp: &[MixedUnit]) -> Vec<EditOp> {
    align_with(reference, hyp, ScoreOptions::default())
}

pub fn align_with(reference: &[MixedUnit], hyp: &[MixedUnit], opts: ScoreOptions) -> Vec<EditOp> {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut cost = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        for j in 0..=m {
            cost[i * w + j] = match (i, j) {
                (0, _) => j,
                (_, 0) => i,
                _ => {
                    let diag = cost[(i - 1) * w + j - 1] + usize::from(!same(&reference[i - 1], &hyp[j - 1], opts));
                    diag.min(cost[(i - 1) * w + j] + 1).min(cost[i * w + j - 1] + 1)
                }
            };
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let c = cost[i * w + j];
        if i > 0 && j > 0 {
            let eq = same(&reference[i - 1], &hyp[j - 1], opts);
            let diag = cost[(i - 1) * w + j - 1];
            if eq && c == diag {
                ops.push(EditOp::Match { r: i - 1, h: j - 1 });
                i -= 1;
                j -= 1;
                continue;
            }
            if !eq && c == diag + 1 {
                ops.push(EditOp::Sub { r: i - 1, h: j - 1 });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && c == cost[(i - 1) * w + j] + 1 {
            ops.push(EditOp::Del { r: i - 1 });
            i -= 1;
        } else {
            ops.push(EditOp::Ins { h: j - 1 });
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

pub fn edit_cost(ops: &[EditOp]) -> usize {
    ops.iter().filter(|op| !matches!(op, EditOp::Match { .. })).count()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub s: usize,
    pub d: usize,
    pub i: usize,
    pub n: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.s + self.d + self.i
    }

    /// `None` when there are no reference units.
    pub fn rate(&self) -> Option<f64> {
        (self.n > 0).then(|| self.errors() as f64 / self.n as f64)
    }

    pub fn add(&mut self, o: &ErrorCounts) {
        self.s += o.s;
        self.d += o.d;
        self.i += o.i;
        self.n += o.n;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ErrorReport {
    pub overall: ErrorCounts,
    pub zh: ErrorCounts,
    pub en: ErrorCounts,
}

impl ErrorReport {
    pub fn lang(&self, l: Lang) -> &ErrorCounts {
        match l {
            Lang::Zh => &self.zh,
            Lang::En => &self.en,
        }
    }

    fn lang_mut(&mut self, l: Lang) -> &mut ErrorCounts {
        match l {
            Lang::Zh => &mut self.zh,
            Lang::En => &mut self.en,
        }
    }

    pub fn add(&mut self, o: &ErrorReport) {
        self.overall.add(&o.overall);
        self.zh.add(&o.zh);
        self.en.add(&o.en);
    }

    pub fn to_json(&self) -> ReportJson {
        let scope = |c: &ErrorCounts| ScopeJson { mer: c.rate(), s: c.s, d: c.d, i: c.i, n: c.n };
        ReportJson { overall: scope(&self.overall), zh: scope(&self.zh), en: scope(&self.en) }
    }
}

/// One scope of the report; `mer` is `null` when `n` is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScopeJson {
    pub mer: Option<f64>,
    pub s: usize,
    pub d: usize,
    pub i: usize,
    pub n: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportJson {
    pub overall: ScopeJson,
    pub zh: ScopeJson,
    pub en: ScopeJson,
}

/// Substitutions and deletions count against the reference unit's
/// language; an insertion counts against the inserted unit's language.
pub fn score(reference: &str, hyp: &str) -> ErrorReport {
    score_with(reference, hyp, ScoreOptions::default())
}

pub fn score_with(reference: &str, hyp: &str, opts: ScoreOptions) -> ErrorReport {
    let r = tokenize_mixed(reference);
    let h = tokenize_mixed(hyp);
    let mut rep = ErrorReport::default();
    for u in &r {
        rep.overall.n += 1;
        rep.lang_mut(u.lang).n += 1;
    }
    for op in align_with(&r, &h, opts) {
        match op {
            EditOp::Match { .. } => {}
            EditOp::Sub { r: ri, .. } => {
                rep.overall.s += 1;
                rep.lang_mut(r[ri].lang).s += 1;
            }
            EditOp::Del { r: ri } => {
                rep.overall.d += 1;
                rep.lang_mut(r[ri].lang).d += 1;
            }
            EditOp::Ins { h: hi } => {
                rep.overall.i += 1;
                rep.lang_mut(h[hi].lang).i += 1;
            }
        }
    }
    rep
}

/// Sums per-utterance reports over parallel reference/hypothesis lists.
pub fn score_corpus<S: AsRef<str>>(refs: &[S], hyps: &[S]) -> ErrorReport {
    let mut total = ErrorReport::default();
    for (r, h) in refs.iter().zip(hyps) {
        total.add(&score(r.as_ref(), h.as_ref()));
    }
    total
}
