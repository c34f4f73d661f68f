//! JSON checkpoints of named parameters plus optimizer state.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::Adam;
use super::params::ParamStore;
use super::{NumericsError, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Free-form model description (architecture and sizes).
    pub model: serde_json::Value,
    pub step: u64,
    pub epoch: usize,
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn capture(model: serde_json::Value, store: &ParamStore, optimizer: Option<&Adam>, epoch: usize) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            model,
            step: optimizer.map_or(0, |o| o.step),
            epoch,
            params: store.named_values(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn to_json(&self) -> Result<String, NumericsError> {
        serde_json::to_string(self).map_err(|e| NumericsError::Checkpoint(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self, NumericsError> {
        let ck: Checkpoint = serde_json::from_str(s).map_err(|e| NumericsError::Checkpoint(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(NumericsError::Checkpoint(format!("unsupported checkpoint version {}", ck.version)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), NumericsError> {
        fs::write(path, self.to_json()?).map_err(|e| NumericsError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, NumericsError> {
        let s = fs::read_to_string(path).map_err(|e| NumericsError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::params::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn json_round_trip_is_exact() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        store.register("a", 3, 4, Init::ScaledNormal, &mut rng);
        store.register("b", 1, 7, Init::Uniform(0.08), &mut rng);
        let opt = Adam::new(&store, Default::default());
        let ck = Checkpoint::capture(serde_json::json!({"kind": "test"}), &store, Some(&opt), 2);
        let text = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_json().unwrap(), text);

        let mut other = store.clone();
        for id in other.ids().collect::<Vec<_>>() {
            other.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        other.load_values(&back.params).unwrap();
        assert_eq!(other, store);
    }

    #[test]
    fn rejects_wrong_version() {
        let text = r#"{"version":9,"model":null,"step":0,"epoch":0,"params":{},"optimizer":null}"#;
        assert!(Checkpoint::from_json(text).is_err());
    }
}
