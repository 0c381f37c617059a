//! Parameter checkpoints: a flat little-endian f64 binary next to a JSON
//! sidecar that names every tensor and its length.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::{ModelConfig, ToyModel};
use crate::error::{Error, Result};
use crate::fusion::GateParams;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const MODEL_KIND: &str = "toy_model";
pub const GATE_KIND: &str = "gate_params";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

/// The JSON half of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub format_version: u32,
    pub kind: String,
    /// File name of the binary, relative to the sidecar.
    pub data: String,
    pub tensors: Vec<TensorEntry>,
    pub total_values: usize,
    /// FNV-1a 64 of the binary, lower-case hex.
    pub checksum: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<GateMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateMeta {
    pub rows: usize,
    pub lambda_reg: f64,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Sidecar and binary paths for a checkpoint given either of them.
pub fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    if path.extension().is_some_and(|e| e == "json") {
        (path.to_path_buf(), path.with_extension("bin"))
    } else {
        (path.with_extension("json"), path.to_path_buf())
    }
}

fn encode(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn write(path: &Path, kind: &str, tensors: Vec<(&str, &[f64])>, fill: impl FnOnce(&mut Sidecar)) -> Result<()> {
    let (json, bin) = checkpoint_paths(path);
    let flat: Vec<f64> = tensors.iter().flat_map(|(_, t)| t.iter().copied()).collect();
    let bytes = encode(&flat);
    let mut sidecar = Sidecar {
        format_version: CHECKPOINT_FORMAT_VERSION,
        kind: kind.to_string(),
        data: bin
            .file_name()
            .ok_or_else(|| Error::arg(format!("{} has no file name", bin.display())))?
            .to_string_lossy()
            .into_owned(),
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: (*n).to_string(),
                len: t.len(),
            })
            .collect(),
        total_values: flat.len(),
        checksum: format!("{:016x}", fnv1a64(&bytes)),
        model: None,
        gate: None,
    };
    fill(&mut sidecar);
    crate::io::write_atomic(&bin, &bytes)?;
    crate::io::write_json(&json, &sidecar)
}

/// Read and cross-check a checkpoint; returns the sidecar and the values.
pub fn read_checkpoint(path: &Path) -> Result<(Sidecar, Vec<f64>)> {
    let (json, _) = checkpoint_paths(path);
    let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let sidecar: Sidecar =
        serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", json.display())))?;
    if sidecar.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::data(format!(
            "{}: unsupported format_version {}",
            json.display(),
            sidecar.format_version
        )));
    }
    let bin = json.with_file_name(&sidecar.data);
    let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::data(format!("{}: length {} is not a multiple of 8", bin.display(), bytes.len())));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let declared: usize = sidecar.tensors.iter().map(|t| t.len).sum();
    if declared != sidecar.total_values || values.len() != declared {
        return Err(Error::data(format!(
            "{}: sidecar declares {} values ({} by tensor), binary holds {}",
            json.display(),
            sidecar.total_values,
            declared,
            values.len()
        )));
    }
    let sum = format!("{:016x}", fnv1a64(&bytes));
    if sum != sidecar.checksum {
        return Err(Error::data(format!(
            "{}: checksum {sum} does not match sidecar {}",
            bin.display(),
            sidecar.checksum
        )));
    }
    Ok((sidecar, values))
}

fn expect_kind(s: &Sidecar, kind: &str) -> Result<()> {
    if s.kind != kind {
        return Err(Error::data(format!("checkpoint kind is {:?}, expected {kind:?}", s.kind)));
    }
    Ok(())
}

fn check_layout(s: &Sidecar, want: &[(&str, usize)]) -> Result<()> {
    let got: Vec<(&str, usize)> = s.tensors.iter().map(|t| (t.name.as_str(), t.len)).collect();
    if got != want {
        return Err(Error::data(format!("checkpoint tensors {got:?} do not match expected {want:?}")));
    }
    Ok(())
}

pub fn save_model(path: &Path, model: &ToyModel) -> Result<()> {
    let config = model.config.clone();
    write(path, MODEL_KIND, model.params(), |s| s.model = Some(config))
}

pub fn load_model(path: &Path) -> Result<ToyModel> {
    let (s, values) = read_checkpoint(path)?;
    expect_kind(&s, MODEL_KIND)?;
    let config = s
        .model
        .clone()
        .ok_or_else(|| Error::data("model checkpoint has no model config"))?;
    let mut model = ToyModel::zeros(config).map_err(|e| Error::data(e.to_string()))?;
    let want: Vec<(&str, usize)> = model.params().iter().map(|(n, p)| (*n, p.len())).collect();
    check_layout(&s, &want)?;
    model.set_flat_params(&values)?;
    Ok(model)
}

pub fn save_gate(path: &Path, gate: &GateParams) -> Result<()> {
    gate.validate()?;
    let meta = GateMeta {
        rows: gate.rows,
        lambda_reg: gate.lambda_reg,
    };
    write(
        path,
        GATE_KIND,
        vec![("w", &gate.w[..]), ("sigma", std::slice::from_ref(&gate.sigma))],
        |s| s.gate = Some(meta),
    )
}

pub fn load_gate(path: &Path) -> Result<GateParams> {
    let (s, values) = read_checkpoint(path)?;
    expect_kind(&s, GATE_KIND)?;
    let meta = s.gate.clone().ok_or_else(|| Error::data("gate checkpoint has no gate metadata"))?;
    check_layout(&s, &[("w", meta.rows * 2), ("sigma", 1)])?;
    let gate = GateParams {
        rows: meta.rows,
        w: values[..meta.rows * 2].to_vec(),
        sigma: values[meta.rows * 2],
        lambda_reg: meta.lambda_reg,
    };
    gate.validate().map_err(|e| Error::data(e.to_string()))?;
    Ok(gate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn model_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = ToyModel::init(ModelConfig::default(), &mut seed::stream(3, seed::INIT)).unwrap();
        let p = dir.path().join("m.bin");
        save_model(&p, &m).unwrap();
        let back = load_model(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(load_model(&dir.path().join("m.json")).unwrap(), m);
    }

    #[test]
    fn gate_round_trip_and_shape_check() {
        let dir = tempfile::tempdir().unwrap();
        let g = GateParams {
            rows: 3,
            w: vec![0.1, -0.2, 0.3, 1e-300, -0.0, 7.5],
            sigma: 0.1,
            lambda_reg: 0.5,
        };
        let p = dir.path().join("g.bin");
        save_gate(&p, &g).unwrap();
        let back = load_gate(&p).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.w[4].to_bits(), (-0.0f64).to_bits());

        // a sidecar that disagrees with the binary is rejected
        let json = dir.path().join("g.json");
        let text = std::fs::read_to_string(&json).unwrap().replace("\"rows\": 3", "\"rows\": 2");
        std::fs::write(&json, text).unwrap();
        assert!(load_gate(&p).unwrap_err().is_data_error());
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.bin");
        save_gate(&p, &GateParams::zeros(2)).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load_gate(&p).unwrap_err().is_data_error());
        assert!(load_model(&p).is_err());
    }
}
