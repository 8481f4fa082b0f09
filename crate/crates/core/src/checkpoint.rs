//! On-disk form of a [`Trained`] network: `weights.gmt1` holds every
//! parameter as consecutive GMT1 records and `checkpoint.json` holds the
//! configuration, BN state and the byte offset of each parameter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{LossSwitches, Model, ModelConfig};
use crate::params::{BnStates, ParamStore};
use crate::tensor::{Result, Tensor, TensorError};
use crate::training::Trained;

pub const WEIGHTS_FILE: &str = "weights.gmt1";
pub const INDEX_FILE: &str = "checkpoint.json";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    version: u32,
    model: ModelConfig,
    switches: LossSwitches,
    side: usize,
    bn: BnStates,
    offsets: BTreeMap<String, u64>,
}

fn format_err(msg: impl Into<String>) -> TensorError {
    TensorError::Format(msg.into())
}

pub fn save(net: &Trained, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut weights = Vec::new();
    let mut offsets = BTreeMap::new();
    for (name, t) in net.params.iter() {
        offsets.insert(name.clone(), weights.len() as u64);
        t.write_gmt1(&mut weights)?;
    }
    let index = Index {
        version: VERSION,
        model: net.model.config.clone(),
        switches: net.switches,
        side: net.side,
        bn: net.bn.clone(),
        offsets,
    };
    fs::write(dir.join(WEIGHTS_FILE), weights)?;
    let text = serde_json::to_string_pretty(&index).map_err(|e| format_err(e.to_string()))?;
    fs::write(dir.join(INDEX_FILE), text + "\n")?;
    Ok(())
}

/// Loads a checkpoint, checking that it holds exactly the parameters the
/// stored configuration requires, with matching shapes.
pub fn load(dir: &Path) -> Result<Trained> {
    let text = fs::read_to_string(dir.join(INDEX_FILE))?;
    let index: Index = serde_json::from_str(&text).map_err(|e| format_err(e.to_string()))?;
    if index.version != VERSION {
        return Err(format_err(format!("unsupported checkpoint version {}", index.version)));
    }
    let model = Model::new(index.model)?;
    let (template, template_bn) = model.init(0);
    let weights = fs::read(dir.join(WEIGHTS_FILE))?;
    let mut params = ParamStore::new();
    for (name, want) in template.iter() {
        let off = *index
            .offsets
            .get(name)
            .ok_or_else(|| format_err(format!("missing parameter {name}")))? as usize;
        let bytes = weights
            .get(off..)
            .ok_or_else(|| format_err(format!("{name}: offset {off} past end of weights")))?;
        let t = Tensor::from_gmt1_bytes(bytes)?;
        if t.shape() != want.shape() {
            return Err(format_err(format!("{name}: shape {:?}, expected {:?}", t.shape(), want.shape())));
        }
        params.insert(name.clone(), t);
    }
    if index.offsets.len() != template.len() {
        return Err(format_err(format!(
            "checkpoint has {} parameters, model needs {}",
            index.offsets.len(),
            template.len()
        )));
    }
    for (name, state) in template_bn.iter() {
        let got = index.bn.get(name)?;
        if got.channels() != state.channels() {
            return Err(format_err(format!("{name}: {} BN channels, expected {}", got.channels(), state.channels())));
        }
    }
    Ok(Trained {
        model,
        params,
        bn: index.bn,
        switches: index.switches,
        side: index.side,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> Trained {
        let mut cfg = ModelConfig::new(4);
        cfg.widths = [4, 4, 6, 6, 8];
        let model = Model::new(cfg).unwrap();
        let (params, mut bn) = model.init(3);
        bn.get_mut("weak.bn").unwrap().running_mean = vec![0.1, 1.0 / 3.0, -2.5e-7, 7.0];
        Trained {
            model,
            params,
            bn,
            switches: LossSwitches::default(),
            side: 64,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let n = net();
        let dir = tempfile::tempdir().unwrap();
        save(&n, dir.path()).unwrap();
        assert_eq!(load(dir.path()).unwrap(), n);
    }

    #[test]
    fn rejects_truncated_weights() {
        let n = net();
        let dir = tempfile::tempdir().unwrap();
        save(&n, dir.path()).unwrap();
        let w = fs::read(dir.path().join(WEIGHTS_FILE)).unwrap();
        fs::write(dir.path().join(WEIGHTS_FILE), &w[..w.len() - 8]).unwrap();
        assert!(load(dir.path()).is_err());
    }

    #[test]
    fn rejects_config_mismatch() {
        let n = net();
        let dir = tempfile::tempdir().unwrap();
        save(&n, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(INDEX_FILE)).unwrap();
        fs::write(dir.path().join(INDEX_FILE), text.replace("\"num_classes\": 4", "\"num_classes\": 5")).unwrap();
        assert!(load(dir.path()).is_err());
    }
}
