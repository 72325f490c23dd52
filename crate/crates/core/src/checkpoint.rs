//! Self-describing JSON checkpoints.
//!
//! ```text
//! {
//!   "format": "mhp-checkpoint/1",
//!   "config": { ...MhpConfig... },
//!   "params": { "embedding.weight": { "shape": [64, 5], "values": [...] }, ... }
//! }
//! ```
//!
//! Values are written in the shortest decimal form that parses back to the
//! same `f64`, so a save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Mhp, MhpConfig};
use crate::tensor::Tensor;

pub const FORMAT: &str = "mhp-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredParam {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: MhpConfig,
    pub params: BTreeMap<String, StoredParam>,
}

impl Checkpoint {
    pub fn from_model(model: &Mhp) -> Self {
        let params = model
            .store()
            .iter()
            .map(|(_, p)| {
                (
                    p.name.clone(),
                    StoredParam {
                        shape: p.value.shape().to_vec(),
                        values: p.value.data().to_vec(),
                    },
                )
            })
            .collect();
        Checkpoint {
            format: FORMAT.to_string(),
            config: model.config().clone(),
            params,
        }
    }

    /// Rebuilds the model; every parameter must be present with its shape.
    pub fn to_model(&self) -> Result<Mhp> {
        if self.format != FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format `{}`", self.format)));
        }
        let mut model = Mhp::new(self.config.clone(), 0)?;
        let names: Vec<String> = model.store().iter().map(|(_, p)| p.name.clone()).collect();
        if names.len() != self.params.len() {
            let extra: Vec<&String> = self.params.keys().filter(|k| !names.contains(k)).collect();
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {} (unknown: {extra:?})",
                names.len(),
                self.params.len()
            )));
        }
        for name in names {
            let stored = self
                .params
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            let tensor = Tensor::new(stored.shape.clone(), stored.values.clone())
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            model
                .set_param(&name, tensor)
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

pub fn save(model: &Mhp, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = Checkpoint::from_model(model).to_json()?;
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<Mhp> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::from_json(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
        .to_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;
    use proptest::prelude::*;

    fn small(arch: Arch) -> Mhp {
        let mut c = match arch {
            Arch::Mhp => MhpConfig::new(3),
            Arch::MhpE => MhpConfig::hybrid(3),
        }
        .with_d_model(8);
        c.d_state = 4;
        c.attn_blocks = 1;
        c.attn_heads = 2;
        Mhp::new(c, 4).unwrap()
    }

    #[test]
    fn round_trip_through_file() {
        for arch in [Arch::Mhp, Arch::MhpE] {
            let model = small(arch);
            let f = tempfile::NamedTempFile::new().unwrap();
            save(&model, f.path()).unwrap();
            let back = load(f.path()).unwrap();
            assert_eq!(back.config(), model.config());
            assert_eq!(Checkpoint::from_model(&back), Checkpoint::from_model(&model));
            let text = std::fs::read_to_string(f.path()).unwrap();
            assert!(text.contains(&format!("\"arch\":\"{arch}\"")));
        }
    }

    #[test]
    fn missing_and_misshapen_parameters_are_reported() {
        let model = small(Arch::Mhp);
        let mut ck = Checkpoint::from_model(&model);
        ck.params.get_mut("final_norm.scale").unwrap().shape = vec![4, 2];
        assert!(matches!(ck.to_model(), Err(Error::Checkpoint(m)) if m.contains("final_norm.scale")));
        let mut ck = Checkpoint::from_model(&model);
        ck.params.remove("type_head.weight");
        ck.params.insert("bogus".into(), StoredParam { shape: vec![1], values: vec![0.0] });
        assert!(matches!(ck.to_model(), Err(Error::Checkpoint(m)) if m.contains("type_head.weight")));
        let mut ck = Checkpoint::from_model(&model);
        ck.format = "other".into();
        assert!(ck.to_model().is_err());
    }

    proptest! {
        #[test]
        fn values_round_trip_bit_exactly(bits in prop::collection::vec(any::<u64>(), 1..64)) {
            let values: Vec<f64> = bits
                .iter()
                .map(|&b| f64::from_bits(b))
                .filter(|v| v.is_finite())
                .collect();
            prop_assume!(!values.is_empty());
            let mut ck = Checkpoint::from_model(&small(Arch::Mhp));
            ck.params.insert("x".into(), StoredParam { shape: vec![values.len()], values: values.clone() });
            let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
            let got = &back.params["x"].values;
            prop_assert_eq!(got.len(), values.len());
            for (a, b) in got.iter().zip(&values) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
