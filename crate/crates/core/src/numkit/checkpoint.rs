use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{NumError, Tensor};

/// Version of the checkpoint JSON layout.
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Named parameters, ordered by path so serialization is stable.
pub type ParamMap = BTreeMap<String, Tensor>;

/// On-disk checkpoint: parameter path → `{shape, data}` plus an opaque
/// self-description block owned by whoever writes the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<M> {
    pub schema_version: u32,
    pub meta: M,
    pub params: ParamMap,
}

impl<M: Serialize + for<'de> Deserialize<'de>> Checkpoint<M> {
    pub fn new(meta: M, params: ParamMap) -> Self {
        Self { schema_version: CHECKPOINT_SCHEMA_VERSION, meta, params }
    }

    pub fn to_json(&self) -> Result<String, NumError> {
        serde_json::to_string_pretty(self).map_err(|e| NumError::Serde(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self, NumError> {
        let ck: Self = serde_json::from_str(s).map_err(|e| NumError::Serde(e.to_string()))?;
        if ck.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(NumError::Serde(format!(
                "checkpoint schema {} (expected {CHECKPOINT_SCHEMA_VERSION})",
                ck.schema_version
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn json_round_trip_is_bit_exact(vals in proptest::collection::vec(-1e300f64..1e300, 1..40)) {
            let mut params = ParamMap::new();
            params.insert("layer0/Wx".into(), Tensor::new(vec![vals.len()], vals.clone()).unwrap());
            params.insert("tiny".into(), Tensor::new(vec![1], vec![vals[0] * 1e-300]).unwrap());
            let ck = Checkpoint::new(serde_json::json!({"note": "x"}), params);
            let back: Checkpoint<serde_json::Value> = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
            for (k, t) in &ck.params {
                let u = &back.params[k];
                prop_assert_eq!(t.shape(), u.shape());
                for (a, b) in t.data().iter().zip(u.data()) {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn rejects_inconsistent_shape() {
        let s = r#"{"schema_version":1,"meta":null,"params":{"w":{"shape":[2,2],"data":[1.0]}}}"#;
        assert!(Checkpoint::<serde_json::Value>::from_json(s).is_err());
        let s = r#"{"schema_version":9,"meta":null,"params":{}}"#;
        assert!(Checkpoint::<serde_json::Value>::from_json(s).is_err());
    }
}
