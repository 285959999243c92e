use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::io::{ensure_dir, read_blob, read_json, write_blob, write_json};

pub const CHECKPOINT_FORMAT: &str = "vin-checkpoint/1";

/// Where a parameter lives inside `params.bin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// `manifest.json` of a checkpoint directory.
///
/// `family` is `"state"` or `"pixel"`; `kind` names the dynamics model (or
/// `vae2d`). Anything model specific goes in `extra`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub family: String,
    pub kind: String,
    pub system: String,
    pub n_q: usize,
    pub hidden: usize,
    pub h: f64,
    pub fixed_mass: bool,
    #[serde(default)]
    pub extra: serde_json::Value,
    #[serde(default)]
    pub params: Vec<ParamEntry>,
}

impl CheckpointHeader {
    pub fn new(
        family: &str,
        kind: &str,
        system: &str,
        n_q: usize,
        hidden: usize,
        h: f64,
        fixed_mass: bool,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            family: family.to_string(),
            kind: kind.to_string(),
            system: system.to_string(),
            n_q,
            hidden,
            h,
            fixed_mass,
            extra: serde_json::Value::Null,
            params: Vec::new(),
        }
    }
}

/// Writes `manifest.json` and `params.bin` into `dir`; the parameter
/// table in `header` is rebuilt from `params`.
pub fn save_checkpoint(
    dir: &Path,
    header: &CheckpointHeader,
    params: &[(String, Tensor)],
) -> Result<()> {
    ensure_dir(dir)?;
    let mut header = header.clone();
    header.format = CHECKPOINT_FORMAT.to_string();
    header.params.clear();
    let mut blob = Vec::new();
    for (name, t) in params {
        header.params.push(ParamEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        blob.extend_from_slice(t.data());
    }
    write_blob(&dir.join("params.bin"), &blob)?;
    write_json(&dir.join("manifest.json"), &header)
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointHeader, Vec<(String, Tensor)>)> {
    let manifest = dir.join("manifest.json");
    let header: CheckpointHeader = read_json(&manifest)?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::format(
            &manifest,
            format!(
                "expected format `{CHECKPOINT_FORMAT}`, found `{}`",
                header.format
            ),
        ));
    }
    let total: usize = header
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum();
    let blob = read_blob(&dir.join("params.bin"), total)?;
    let mut out = Vec::with_capacity(header.params.len());
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        let data = blob.get(p.offset..p.offset + n).ok_or_else(|| {
            Error::format(&manifest, format!("parameter `{}` out of range", p.name))
        })?;
        out.push((p.name.clone(), Tensor::new(p.shape.clone(), data.to_vec())?));
    }
    Ok((header, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Trainable;
    use crate::models::{Dynamics, ModelKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_restores_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = Dynamics::<f64>::new(ModelKind::VinVv, 1, 6, 0.1, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let header = CheckpointHeader::new("state", "vin_vv", "pendulum", 1, 6, 0.1, false);
        save_checkpoint(dir.path(), &header, &d.snapshot()).unwrap();
        let (h2, params) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(h2.params.len(), 5);
        let mut fresh = Dynamics::<f64>::new(ModelKind::VinVv, 1, 6, 0.1, &mut rng);
        fresh.restore(&params).unwrap();
        assert_eq!(fresh.snapshot(), d.snapshot());
    }

    #[test]
    fn wrong_format_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut header = CheckpointHeader::new("state", "nn", "pendulum", 1, 6, 0.1, false);
        save_checkpoint(dir.path(), &header, &[]).unwrap();
        header.format = "other/9".into();
        write_json(&dir.path().join("manifest.json"), &header).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::Format { .. })
        ));
    }
}
