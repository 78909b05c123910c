//! Versioned JSON checkpoints.
//!
//! Layout:
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "architecture": { "input_dim": 16, "hidden": [64, 64], "num_classes": 10,
//!                     "norm": "bn", "groups": 8 },
//!   "layers": [
//!     { "type": "linear", "weight": { "rows": 16, "cols": 64, "data": [...] }, "bias": [...] },
//!     { "type": "norm", "kind": "bn", "gamma": [...], "beta": [...],
//!       "running_mean": [...], "running_var": [...], "eps": 1e-5, "momentum": 0.01,
//!       "r_max": 3.0, "d_max": 5.0, "groups": 1 },
//!     { "type": "relu" },
//!     ...
//!   ]
//! }
//! ```
//!
//! Floats are written in shortest round-trip decimal form, so
//! load → save reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchSpec, Layer, ModelState};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub architecture: ArchSpec,
    pub layers: Vec<Layer>,
}

impl Checkpoint {
    pub fn to_json(model: &ModelState) -> Result<String> {
        let ckpt = Checkpoint {
            format_version: FORMAT_VERSION,
            architecture: model.arch.clone(),
            layers: model.layers.clone(),
        };
        let mut s = serde_json::to_string_pretty(&ckpt)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<ModelState> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Decode(e.to_string()))?;
        match value.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(FORMAT_VERSION) => {}
            Some(v) => {
                return Err(Error::Decode(format!(
                    "unsupported format_version {v}, expected {FORMAT_VERSION}"
                )))
            }
            None => return Err(Error::Decode("missing format_version".into())),
        }
        let ckpt: Checkpoint =
            serde_json::from_value(value).map_err(|e| Error::Decode(e.to_string()))?;
        let model = ModelState {
            arch: ckpt.architecture,
            layers: ckpt.layers,
        };
        model
            .validate()
            .map_err(|e| Error::Decode(format!("inconsistent checkpoint: {e}")))?;
        Ok(model)
    }
}

/// Writes `model` to `path` via a temporary sibling file and a rename.
pub fn save_checkpoint(model: &ModelState, path: &Path) -> Result<()> {
    let text = Checkpoint::to_json(model)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    Checkpoint::from_json(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchSpec, NormKind};

    fn model(norm: NormKind) -> ModelState {
        let mut m = ModelState::init(ArchSpec::desk(4, 3, norm), 11).unwrap();
        // Make the floats awkward.
        for n in m.norm_layers_mut() {
            n.gamma[0] = 0.1 + 0.2;
            n.running_var[1] = 1.0 / 3.0;
        }
        m
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        for kind in NormKind::ALL {
            let m = model(kind);
            let p = dir.path().join(format!("{kind}.json"));
            save_checkpoint(&m, &p).unwrap();
            assert_eq!(load_checkpoint(&p).unwrap(), m);
        }
    }

    #[test]
    fn resave_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        save_checkpoint(&model(NormKind::Bn), &a).unwrap();
        save_checkpoint(&load_checkpoint(&a).unwrap(), &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn truncated_file_is_decode_error() {
        let text = Checkpoint::to_json(&model(NormKind::Gn)).unwrap();
        let cut = &text[..text.len() / 2];
        assert!(matches!(Checkpoint::from_json(cut), Err(Error::Decode(_))));
    }

    #[test]
    fn version_mismatch_is_decode_error() {
        let text = Checkpoint::to_json(&model(NormKind::Ln)).unwrap();
        let bumped = text.replacen("\"format_version\": 1", "\"format_version\": 2", 1);
        let err = Checkpoint::from_json(&bumped).unwrap_err();
        assert!(err.to_string().contains("format_version 2"));
    }

    #[test]
    fn inconsistent_shapes_rejected() {
        let mut m = model(NormKind::Bn);
        m.arch.num_classes = 7;
        let text = serde_json::to_string(&Checkpoint {
            format_version: FORMAT_VERSION,
            architecture: m.arch.clone(),
            layers: m.layers.clone(),
        })
        .unwrap();
        assert!(matches!(Checkpoint::from_json(&text), Err(Error::Decode(_))));
    }

    #[test]
    fn missing_file_reported() {
        let err = load_checkpoint(Path::new("/nonexistent/ckpt.json")).unwrap_err();
        assert!(matches!(err, Error::MissingCheckpoint(_)));
    }
}
