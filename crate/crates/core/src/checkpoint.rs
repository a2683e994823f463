//! JSON checkpoints. A base checkpoint holds every `base.` parameter; an
//! adapt checkpoint holds only `adapt.` parameters plus the spec needed to
//! rebuild the modules, and is always loaded on top of its base.

use std::collections::BTreeSet;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{ParamId, ADAPT_NS, BASE_NS};
use crate::system::{AdaptSpec, AsrModel};

const FORMAT: &str = "csasr-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Base,
    Adapt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub name: String,
    pub shape: [usize; 2],
    /// f64 little-endian, row-major, base64.
    pub data: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: CheckpointKind,
    pub config: ModelConfig,
    pub adapt: Option<AdaptSpec>,
    pub params: Vec<ParamRecord>,
}

fn encode(v: &Array2<f64>) -> String {
    let mut bytes = Vec::with_capacity(v.len() * 8);
    for x in v.iter() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode(r: &ParamRecord) -> Result<Array2<f64>> {
    let bytes = B64.decode(&r.data).map_err(|e| Error::Validation(format!("parameter {}: {e}", r.name)))?;
    let [rows, cols] = r.shape;
    if bytes.len() != rows * cols * 8 {
        return Err(Error::Validation(format!(
            "parameter {} holds {} bytes, shape {rows}x{cols} needs {}",
            r.name,
            bytes.len(),
            rows * cols * 8
        )));
    }
    let vals = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    Ok(Array2::from_shape_vec((rows, cols), vals).expect("length checked above"))
}

impl Checkpoint {
    fn from_model(model: &AsrModel, kind: CheckpointKind) -> Self {
        let (ns, adapt) = match kind {
            CheckpointKind::Base => (BASE_NS, None),
            CheckpointKind::Adapt => (ADAPT_NS, Some(model.spec)),
        };
        let params = model
            .store
            .ids_with_prefix(ns)
            .map(|id: ParamId| {
                let v = model.store.get(id);
                ParamRecord { name: model.store.name(id).to_string(), shape: [v.nrows(), v.ncols()], data: encode(v) }
            })
            .collect();
        Checkpoint { format: FORMAT.into(), version: VERSION, kind, config: model.cfg.clone(), adapt, params }
    }

    pub fn base(model: &AsrModel) -> Self {
        Self::from_model(model, CheckpointKind::Base)
    }

    pub fn adapt(model: &AsrModel) -> Self {
        Self::from_model(model, CheckpointKind::Adapt)
    }

    fn check_header(&self, want: CheckpointKind) -> Result<()> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Validation(format!(
                "not a version {VERSION} {FORMAT} file (format {:?}, version {})",
                self.format, self.version
            )));
        }
        if self.kind != want {
            return Err(Error::Validation(format!("expected a {want:?} checkpoint, found {:?}", self.kind)));
        }
        self.config.validate()
    }

    /// Writes every record into `model`, requiring the record names to be
    /// exactly the model's parameters under `ns`.
    fn apply(&self, model: &mut AsrModel, ns: &str) -> Result<()> {
        let expected: BTreeSet<&str> = model.store.ids_with_prefix(ns).map(|id| model.store.name(id)).collect();
        let found: BTreeSet<&str> = self.params.iter().map(|r| r.name.as_str()).collect();
        if expected != found || found.len() != self.params.len() {
            let missing: Vec<_> = expected.difference(&found).take(3).collect();
            let extra: Vec<_> = found.difference(&expected).take(3).collect();
            return Err(Error::Validation(format!(
                "checkpoint parameters do not match the model: missing {missing:?}, unexpected {extra:?}"
            )));
        }
        for r in &self.params {
            let v = decode(r)?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Validation(format!("parameter {} has non-finite values", r.name)));
            }
            model.store.assign(&r.name, v)?;
        }
        Ok(())
    }

    pub fn into_base_model(self) -> Result<AsrModel> {
        self.check_header(CheckpointKind::Base)?;
        let mut model = AsrModel::new_base(&self.config, 0)?;
        self.apply(&mut model, BASE_NS)?;
        Ok(model)
    }

    pub fn into_adapted_model(self, base: &AsrModel) -> Result<AsrModel> {
        self.check_header(CheckpointKind::Adapt)?;
        if self.config != base.cfg {
            return Err(Error::Config("adapt checkpoint was trained on a different base config".into()));
        }
        let spec = self.adapt.ok_or_else(|| Error::Validation("adapt checkpoint lacks its module spec".into()))?;
        let mut model = AsrModel::with_adaptation(base, spec, 0)?;
        self.apply(&mut model, ADAPT_NS)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        serde_json::to_writer(&mut w, self)?;
        std::io::Write::flush(&mut w)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let ck: Checkpoint = serde_json::from_reader(std::io::BufReader::new(f))?;
        Ok(ck)
    }
}

pub fn load_base(path: &Path) -> Result<AsrModel> {
    Checkpoint::load(path)?.into_base_model()
}

pub fn load_adapted(base_path: &Path, adapt_path: &Path) -> Result<AsrModel> {
    let base = load_base(base_path)?;
    Checkpoint::load(adapt_path)?.into_adapted_model(&base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::Variant;

    fn adapted() -> AsrModel {
        let base = AsrModel::new_base(&ModelConfig::desk(), 7).unwrap();
        let spec = AdaptSpec::new(Variant::table(8).unwrap(), &base.cfg);
        let mut m = AsrModel::with_adaptation(&base, spec, 9).unwrap();
        let ids: Vec<_> = m.adapt_param_ids();
        for id in ids {
            m.store.get_mut(id).mapv_inplace(|x| x + 0.25);
        }
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = adapted();
        let dir = tempfile::tempdir().unwrap();
        let (bp, ap) = (dir.path().join("b.json"), dir.path().join("a.json"));
        Checkpoint::base(&m).save(&bp).unwrap();
        Checkpoint::adapt(&m).save(&ap).unwrap();
        let back = load_adapted(&bp, &ap).unwrap();
        let all: Vec<_> = m.store.ids().collect();
        assert_eq!(back.store.hash(&all), m.store.hash(&all));
    }

    #[test]
    fn kind_and_shape_mismatches_fail() {
        let m = adapted();
        let base = Checkpoint::base(&m);
        assert!(matches!(base.clone().into_adapted_model(&m), Err(Error::Validation(_))));
        let mut bad = base.clone();
        bad.params[0].shape = [1, 1];
        assert!(matches!(bad.into_base_model(), Err(Error::Validation(_))));
        let mut missing = base;
        missing.params.pop();
        assert!(matches!(missing.into_base_model(), Err(Error::Validation(_))));
    }
}
