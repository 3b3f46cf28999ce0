//! Model checkpoints ("SDTC"): a JSON header with the architecture and
//! inference metadata, then every parameter tensor as f64 little-endian in
//! layer order (weights, then biases, per layer).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{json_error, read_bytes, write_bytes, Reader};
use crate::error::{Error, Result};
use crate::net::{ArchitectureSpec, MlpParams, Model, NetworkParams, Parameters, TargetKind, TrainedModel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SDTC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything in a checkpoint except the parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// "cnn" or "mlp".
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<ArchitectureSpec>,
    /// Layer widths of the "mlp" model, input first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sizes: Option<Vec<usize>>,
    pub kind: TargetKind,
    pub include_b0: bool,
    pub n_weighted: usize,
    pub target_divisor: f64,
    pub patch_size: usize,
    pub patch_stride: usize,
    /// Total f64 values that follow the header.
    pub param_count: usize,
}

fn tensors(model: &Model) -> Vec<&[f64]> {
    match model {
        Model::Cnn(p) => p.tensors(),
        Model::Mlp(p) => p.tensors(),
    }
}

impl CheckpointHeader {
    pub fn of(m: &TrainedModel) -> Self {
        let (arch, sizes) = match &m.model {
            Model::Cnn(p) => (Some(p.arch.clone()), None),
            Model::Mlp(p) => (None, Some(p.sizes.clone())),
        };
        CheckpointHeader {
            method: m.model.method().into(),
            arch,
            sizes,
            kind: m.kind,
            include_b0: m.include_b0,
            n_weighted: m.n_weighted,
            target_divisor: m.target_divisor,
            patch_size: m.patch_size,
            patch_stride: m.patch_stride,
            param_count: tensors(&m.model).iter().map(|t| t.len()).sum(),
        }
    }

    /// Zero-valued model with the header's shapes.
    fn empty_model(&self) -> Result<Model> {
        match (self.method.as_str(), &self.arch, &self.sizes) {
            ("cnn", Some(arch), _) => {
                arch.validate()?;
                Ok(Model::Cnn(NetworkParams::zeros(arch)))
            }
            ("mlp", _, Some(sizes)) => Ok(Model::Mlp(MlpParams::zeros(sizes)?)),
            (m, _, _) => Err(Error::InvalidArgument(format!("checkpoint method '{m}' lacks its shape description"))),
        }
    }
}

pub fn checkpoint_bytes(m: &TrainedModel) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&CheckpointHeader::of(m))?;
    let len = u32::try_from(header.len()).map_err(|_| Error::InvalidArgument("checkpoint header too large".into()))?;
    let mut out = Vec::with_capacity(12 + header.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&header);
    for t in tensors(&m.model) {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(path: &Path, bytes: &[u8]) -> Result<TrainedModel> {
    let mut r = Reader::new(path, bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let len = r.u32("header length")? as usize;
    let start = r.pos;
    let json = r.take(len, "header")?;
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| {
        let inner = json_error(path, json, &e);
        match inner {
            Error::Parse { offset, message, .. } => Error::parse(path, start as u64 + offset, message),
            other => other,
        }
    })?;
    let mut model = header.empty_model().map_err(|e| Error::parse(path, start as u64, e.to_string()))?;
    let expected: usize = tensors(&model).iter().map(|t| t.len()).sum();
    if expected != header.param_count {
        return Err(Error::parse(
            path,
            start as u64,
            format!("header declares {} parameters but the shapes hold {expected}", header.param_count),
        ));
    }
    let slots = match &mut model {
        Model::Cnn(p) => p.tensors_mut(),
        Model::Mlp(p) => p.tensors_mut(),
    };
    for t in slots {
        r.f64_into(t, "parameters")?;
    }
    r.finish()?;
    Ok(TrainedModel {
        model,
        kind: header.kind,
        include_b0: header.include_b0,
        n_weighted: header.n_weighted,
        target_divisor: header.target_divisor,
        patch_size: header.patch_size,
        patch_stride: header.patch_stride,
    })
}

pub fn write_checkpoint(m: &TrainedModel, path: &Path) -> Result<()> {
    write_bytes(path, &checkpoint_bytes(m)?)
}

pub fn read_checkpoint(path: &Path) -> Result<TrainedModel> {
    checkpoint_from_bytes(path, &read_bytes(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cnn() -> TrainedModel {
        let arch = ArchitectureSpec::encoder_decoder(3, 1, 4, 10).unwrap();
        TrainedModel {
            model: Model::Cnn(NetworkParams::init(&arch, 5)),
            kind: TargetKind::Fa,
            include_b0: true,
            n_weighted: 2,
            target_divisor: 1.0,
            patch_size: 21,
            patch_stride: 7,
        }
    }

    #[test]
    fn cnn_and_mlp_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.sdtc");
        let m = cnn();
        write_checkpoint(&m, &p).unwrap();
        assert_eq!(read_checkpoint(&p).unwrap(), m);
        let mlp = TrainedModel {
            model: Model::Mlp(MlpParams::baseline(7, 3, 2).unwrap()),
            kind: TargetKind::Colormap,
            target_divisor: 0.75,
            ..m
        };
        write_checkpoint(&mlp, &p).unwrap();
        let back = read_checkpoint(&p).unwrap();
        assert_eq!(back, mlp);
        assert_eq!(checkpoint_bytes(&back).unwrap(), std::fs::read(&p).unwrap());
    }

    #[test]
    fn layout_is_header_then_f64_values() {
        let m = cnn();
        let bytes = checkpoint_bytes(&m).unwrap();
        assert_eq!(&bytes[..4], b"SDTC");
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let n = CheckpointHeader::of(&m).param_count;
        assert_eq!(bytes.len(), 12 + len + 8 * n);
        let Model::Cnn(p) = &m.model else { unreachable!() };
        let first = f64::from_le_bytes(bytes[12 + len..20 + len].try_into().unwrap());
        assert_eq!(first.to_bits(), p.weights[0][0].to_bits());
    }

    #[test]
    fn truncation_and_bad_header_are_located() {
        let p = Path::new("m.sdtc");
        let bytes = checkpoint_bytes(&cnn()).unwrap();
        let e = checkpoint_from_bytes(p, &bytes[..bytes.len() - 3]).unwrap_err().to_string();
        assert!(e.contains("truncated parameters"), "{e}");
        let mut bad = bytes.clone();
        bad[12] = b'[';
        match checkpoint_from_bytes(p, &bad) {
            Err(Error::Parse { offset, .. }) => assert!(offset >= 12),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes;
        bad[5] = 1;
        assert!(checkpoint_from_bytes(p, &bad).unwrap_err().to_string().contains("unsupported version"));
    }
}
