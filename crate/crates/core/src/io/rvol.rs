//! RVOL: a fixed 52-byte little-endian header followed by the raw payload.
//!
//! ```text
//! 0  "RVOL"
//! 4  u16 version (1)
//! 6  u8  dtype: 1 = f32, 2 = u16
//! 7  u8  kind: 0 scalar, 1 labels, 2 velocity, 3 displacement, 4 deformation
//! 8  u32 nx, ny, nz, channels
//! 24 f64 spacing x, y, z
//! 48 u32 label count (0 unless labels)
//! ```

use std::path::Path;

use super::{read_file, write_atomic};
use crate::error::{Error, Result};
use crate::volume::{FieldKind, LabelVolume, ScalarVolume, Shape3, VectorField};

const MAGIC: &[u8; 4] = b"RVOL";
const VERSION: u16 = 1;
const HEADER: usize = 52;

#[derive(Debug, Clone, PartialEq)]
pub enum Rvol {
    Scalar(ScalarVolume),
    Labels(LabelVolume),
    Field(VectorField),
}

impl Rvol {
    pub fn shape(&self) -> Shape3 {
        match self {
            Rvol::Scalar(v) => v.shape(),
            Rvol::Labels(v) => v.shape(),
            Rvol::Field(v) => v.shape(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Rvol::Scalar(_) => "scalar",
            Rvol::Labels(_) => "labels",
            Rvol::Field(f) => f.kind().name(),
        }
    }

    pub fn into_scalar(self, path: &Path) -> Result<ScalarVolume> {
        match self {
            Rvol::Scalar(v) => Ok(v),
            other => Err(kind_err(path, "scalar", other.kind_name())),
        }
    }

    pub fn into_labels(self, path: &Path) -> Result<LabelVolume> {
        match self {
            Rvol::Labels(v) => Ok(v),
            other => Err(kind_err(path, "labels", other.kind_name())),
        }
    }

    pub fn into_field(self, path: &Path) -> Result<VectorField> {
        match self {
            Rvol::Field(v) => Ok(v),
            other => Err(kind_err(path, "vector field", other.kind_name())),
        }
    }
}

fn kind_err(path: &Path, want: &str, got: &str) -> Error {
    Error::Parse { path: path.into(), line: 0, msg: format!("expected {want} volume, found {got}") }
}

pub fn encode(v: &Rvol) -> Vec<u8> {
    let dims = v.shape().dims();
    let (dtype, kind, channels, spacing, labels) = match v {
        Rvol::Scalar(s) => (1u8, 0u8, 1u32, s.spacing, 0u32),
        Rvol::Labels(l) => (2, 1, 1, l.spacing, l.label_count() as u32),
        Rvol::Field(f) => {
            let k = match f.kind() {
                FieldKind::Velocity => 2,
                FieldKind::Displacement => 3,
                FieldKind::Deformation => 4,
            };
            (1, k, 3, [1.0; 3], 0)
        }
    };
    let mut b = Vec::with_capacity(HEADER + 4 * channels as usize * v.shape().len());
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.push(dtype);
    b.push(kind);
    for d in [dims[0] as u32, dims[1] as u32, dims[2] as u32, channels] {
        b.extend_from_slice(&d.to_le_bytes());
    }
    for s in spacing {
        b.extend_from_slice(&s.to_le_bytes());
    }
    b.extend_from_slice(&labels.to_le_bytes());
    match v {
        Rvol::Scalar(s) => s.data().iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
        Rvol::Labels(l) => l.data().iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
        Rvol::Field(f) => f.data().iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
    }
    b
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Rvol> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::WrongMagic { path: path.into(), found: bytes[..bytes.len().min(4)].to_vec() });
    }
    if bytes.len() < HEADER {
        return Err(Error::Truncated { path: path.into(), expected: HEADER, got: bytes.len() });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion { path: path.into(), version: version as u32 });
    }
    let (dtype, kind) = (bytes[6], bytes[7]);
    let dims = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
    let channels = u32_at(20) as usize;
    let spacing = [0, 1, 2].map(|a| f64::from_le_bytes(bytes[24 + 8 * a..32 + 8 * a].try_into().expect("8 bytes")));
    let label_count = u32_at(48);
    let shape = Shape3::from_dims(dims)?;
    let bad = |msg: String| Error::Parse { path: path.into(), line: 0, msg };
    let width = match dtype {
        1 => 4,
        2 => 2,
        d => return Err(bad(format!("unknown dtype code {d}"))),
    };
    let expected_channels = match kind {
        0 | 1 => 1,
        2..=4 => 3,
        k => return Err(bad(format!("unknown kind code {k}"))),
    };
    if channels != expected_channels || (kind == 1) != (dtype == 2) {
        return Err(bad(format!("inconsistent header: kind {kind}, dtype {dtype}, channels {channels}")));
    }
    let payload = &bytes[HEADER..];
    let need = width * channels * shape.len();
    if payload.len() != need {
        return Err(Error::Truncated { path: path.into(), expected: need, got: payload.len() });
    }
    let floats =
        || -> Vec<f32> { payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect() };
    Ok(match kind {
        0 => Rvol::Scalar(ScalarVolume::from_vec(shape, floats())?.with_spacing(spacing)),
        1 => {
            let data = payload.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
            let count = u16::try_from(label_count).map_err(|_| bad(format!("label count {label_count}")))?;
            Rvol::Labels(LabelVolume::from_vec(shape, data, count)?.with_spacing(spacing))
        }
        k => {
            let fk = match k {
                2 => FieldKind::Velocity,
                3 => FieldKind::Displacement,
                _ => FieldKind::Deformation,
            };
            Rvol::Field(VectorField::from_vec(shape, floats(), fk)?)
        }
    })
}

pub fn write_rvol(path: &Path, v: &Rvol) -> Result<()> {
    write_atomic(path, &encode(v))
}

pub fn read_rvol(path: &Path) -> Result<Rvol> {
    decode(&read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_every_kind() {
        let s = Shape3::new(3, 4, 5).unwrap();
        let scalar = ScalarVolume::from_fn(s, |[i, j, k]| (i * 7 + j * 3 + k) as f32 * 0.37 - 1.0)
            .with_spacing([0.5, 1.25, 2.0]);
        let labels = LabelVolume::from_vec(s, (0..s.len()).map(|i| (i % 5) as u16).collect(), 5).unwrap();
        let field = VectorField::from_fn(s, FieldKind::Displacement, |[i, j, k]| {
            [i as f32 * 0.1, -(j as f32), f32::MIN_POSITIVE * k as f32]
        });
        for v in [Rvol::Scalar(scalar), Rvol::Labels(labels), Rvol::Field(field)] {
            let bytes = encode(&v);
            let back = decode(&bytes, Path::new("mem")).unwrap();
            assert_eq!(back, v);
            assert_eq!(encode(&back), bytes);
        }
    }

    #[test]
    fn detects_corruption() {
        let s = Shape3::cube(2).unwrap();
        let bytes = encode(&Rvol::Scalar(ScalarVolume::zeros(s)));
        assert!(matches!(decode(&bytes[..bytes.len() - 1], Path::new("x")), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[1] = b'x';
        assert!(matches!(decode(&bad, Path::new("x")), Err(Error::WrongMagic { .. })));
    }
}
