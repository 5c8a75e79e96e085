//! Checkpoint serialization: parameter map + encoder config + version
//! string + config hash, as stable JSON. `f64` values round-trip exactly.

use super::encoder::EncoderConfig;
use super::layers::{BnRoute, BnStats};
use super::robust::RobustModel;
use crate::error::{Error, Result};
use ndarray::{Array1, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const FORMAT_VERSION: &str = concat!("advcl-", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorData {
    pub fn from_array(a: &ArrayD<f64>) -> Self {
        TensorData {
            shape: a.shape().to_vec(),
            data: a.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> Result<ArrayD<f64>> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data.clone())
            .map_err(|e| Error::Io(format!("bad tensor shape in checkpoint: {e}")))
    }
}

#[derive(Clone, Serialize, Deserialize)]
pub struct BranchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Serializable snapshot of a full model.
#[derive(Clone, Serialize, Deserialize)]
pub struct ModelState {
    pub version: String,
    pub config_hash: String,
    pub encoder_config: EncoderConfig,
    pub seed: u64,
    pub k_list: Vec<usize>,
    pub num_classes: Option<usize>,
    pub params: BTreeMap<String, TensorData>,
    /// Per BN layer, three branches keyed `normal` / `adv_cl` / `adv_ce`.
    pub bn_stats: BTreeMap<String, BTreeMap<String, BranchStats>>,
}

fn route_key(route: BnRoute) -> &'static str {
    match route {
        BnRoute::Normal => "normal",
        BnRoute::AdvCl => "adv_cl",
        BnRoute::AdvCe => "adv_ce",
    }
}

impl ModelState {
    pub fn capture(model: &RobustModel, config_hash: &str) -> Self {
        let params = model
            .params()
            .into_iter()
            .map(|p| (p.name.clone(), TensorData::from_array(&p.value)))
            .collect();
        let mut bn_stats = BTreeMap::new();
        for bn in model.bn_layers() {
            let mut branches = BTreeMap::new();
            for route in BnRoute::ALL {
                let s = bn.stats(route);
                branches.insert(
                    route_key(route).to_string(),
                    BranchStats {
                        mean: s.mean.to_vec(),
                        var: s.var.to_vec(),
                    },
                );
            }
            bn_stats.insert(bn.name.clone(), branches);
        }
        ModelState {
            version: FORMAT_VERSION.to_string(),
            config_hash: config_hash.to_string(),
            encoder_config: model.config.clone(),
            seed: model.seed,
            k_list: model.pseudo_head_widths(),
            num_classes: model.num_classes(),
            params,
            bn_stats,
        }
    }

    /// Reconstructs a model with identical parameters and statistics.
    pub fn restore(&self) -> Result<RobustModel> {
        let mut model = RobustModel::new(self.encoder_config.clone(), self.seed)?;
        if !self.k_list.is_empty() {
            model.attach_pseudo_heads(&self.k_list);
        }
        if let Some(k) = self.num_classes {
            model.attach_classifier(k);
        }
        for p in model.params_mut() {
            let stored = self.params.get(&p.name).ok_or_else(|| {
                Error::Config(format!("checkpoint missing parameter {:?}", p.name))
            })?;
            let arr = stored.to_array()?;
            if arr.shape() != p.value.shape() {
                return Err(Error::Config(format!(
                    "checkpoint parameter {:?} has shape {:?}, model expects {:?}",
                    p.name,
                    arr.shape(),
                    p.value.shape()
                )));
            }
            p.value = arr;
        }
        for bn in model.bn_layers() {
            let branches = self.bn_stats.get(&bn.name).ok_or_else(|| {
                Error::Config(format!("checkpoint missing BN stats for {:?}", bn.name))
            })?;
            for route in BnRoute::ALL {
                let b = branches.get(route_key(route)).ok_or_else(|| {
                    Error::Config(format!("missing branch {:?}", route_key(route)))
                })?;
                bn.set_stats(
                    route,
                    BnStats {
                        mean: Array1::from_vec(b.mean.clone()),
                        var: Array1::from_vec(b.var.clone()),
                    },
                );
            }
        }
        Ok(model)
    }

    /// SHA-256 fingerprint of the serialized state.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("checkpoint serialization");
        format!("{:x}", Sha256::digest(bytes))
    }
}

pub fn save_model(model: &RobustModel, config_hash: &str, path: &Path) -> Result<String> {
    let state = ModelState::capture(model, config_hash);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let file = std::fs::File::create(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    serde_json::to_writer(std::io::BufWriter::new(file), &state)?;
    Ok(state.fingerprint())
}

pub fn load_model(path: &Path) -> Result<(RobustModel, ModelState)> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let state: ModelState = serde_json::from_reader(std::io::BufReader::new(file))?;
    let model = state.restore()?;
    Ok((model, state))
}
