use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The two languages of the code-switching pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lang {
    Zh,
    En,
}

impl Lang {
    pub const BOTH: [Lang; 2] = [Lang::Zh, Lang::En];

    pub fn as_str(self) -> &'static str {
        match self {
            Lang::Zh => "zh",
            Lang::En => "en",
        }
    }

    pub fn other(self) -> Lang {
        match self {
            Lang::Zh => Lang::En,
            Lang::En => Lang::Zh,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Lang::Zh => 0,
            Lang::En => 1,
        }
    }
}

impl std::str::FromStr for Lang {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zh" => Ok(Lang::Zh),
            "en" => Ok(Lang::En),
            other => Err(Error::Input(format!("unknown language tag {other:?}"))),
        }
    }
}

impl std::fmt::Display for Lang {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub sot: usize,
    pub eot: usize,
    pub lang_zh: usize,
    pub lang_en: usize,
    pub task: usize,
    pub pad: usize,
    /// CTC blank, appended after the text vocabulary (equals `vocab_size`).
    pub ctc_blank: usize,
}

impl SpecialTokens {
    pub fn lang(&self, lang: Lang) -> usize {
        match lang {
            Lang::Zh => self.lang_zh,
            Lang::En => self.lang_en,
        }
    }

    fn in_vocab(&self) -> [usize; 6] {
        [self.sot, self.eot, self.lang_zh, self.lang_en, self.task, self.pad]
    }

    /// True for ids that never appear in a transcript.
    pub fn is_special(&self, id: usize) -> bool {
        self.in_vocab().contains(&id) || id == self.ctc_blank
    }
}

/// Architecture of the miniature encoder-decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub n_feat: usize,
    pub vocab_size: usize,
    pub max_src_frames: usize,
    pub max_tgt_tokens: usize,
    pub special_tokens: SpecialTokens,
}

impl ModelConfig {
    /// Desk-scale preset: 32 text symbols (16 per language) followed by the
    /// special tokens, inside a 40-entry vocabulary.
    pub fn desk() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 128,
            n_feat: 16,
            vocab_size: 40,
            max_src_frames: 64,
            max_tgt_tokens: 16,
            special_tokens: SpecialTokens {
                sot: 32,
                eot: 33,
                lang_zh: 34,
                lang_en: 35,
                task: 36,
                pad: 37,
                ctc_blank: 40,
            },
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Number of CTC output classes: the text vocabulary plus the blank.
    pub fn ctc_classes(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("d_ff", self.d_ff),
            ("n_feat", self.n_feat),
            ("vocab_size", self.vocab_size),
            ("max_src_frames", self.max_src_frames),
            ("max_tgt_tokens", self.max_tgt_tokens),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        let st = &self.special_tokens;
        let ids = st.in_vocab();
        for (i, &a) in ids.iter().enumerate() {
            if a >= self.vocab_size {
                return Err(Error::Config(format!("special token id {a} outside vocabulary of {}", self.vocab_size)));
            }
            if ids[i + 1..].contains(&a) {
                return Err(Error::Config(format!("special token id {a} used twice")));
            }
        }
        if st.ctc_blank != self.vocab_size {
            return Err(Error::Config(format!(
                "ctc_blank must equal vocab_size ({}), got {}",
                self.vocab_size, st.ctc_blank
            )));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_preset_is_valid() {
        let cfg = ModelConfig::desk();
        cfg.validate().unwrap();
        assert_eq!(cfg.head_dim(), 16);
        assert_eq!(cfg.ctc_classes(), 41);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig { n_heads: 5, ..ModelConfig::desk() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_duplicate_or_misplaced_specials() {
        let mut cfg = ModelConfig::desk();
        cfg.special_tokens.eot = cfg.special_tokens.sot;
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::desk();
        cfg.special_tokens.ctc_blank = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::desk();
        cfg.special_tokens.task = 40;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn lang_parse() {
        assert_eq!("zh".parse::<Lang>().unwrap(), Lang::Zh);
        assert!("fr".parse::<Lang>().is_err());
    }
}
