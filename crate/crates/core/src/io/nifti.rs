//! Single-file NIfTI-1 (`.nii`), uncompressed. Reading accepts either byte
//! order and datatypes int16, int32, float32 and float64; writing emits
//! little-endian float32 only.

use std::path::Path;

use super::{read_file, write_atomic};
use crate::error::{Error, Result};
use crate::volume::{LabelVolume, ScalarVolume, Shape3};

const HEADER_SIZE: i32 = 348;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

/// Voxel values after intensity scaling, in file order, with geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiVolume {
    pub shape: Shape3,
    pub spacing: [f64; 3],
    pub datatype: i16,
    pub values: Vec<f64>,
}

impl NiftiVolume {
    pub fn into_scalar(self) -> ScalarVolume {
        let data = self.values.iter().map(|&v| v as f32).collect();
        ScalarVolume::from_vec(self.shape, data).expect("header shape").with_spacing(self.spacing)
    }

    /// Interprets integral values as labels; `label_count` defaults to max + 1.
    pub fn into_labels(self, label_count: Option<u16>) -> Result<LabelVolume> {
        let mut data = Vec::with_capacity(self.values.len());
        for &v in &self.values {
            if v.fract() != 0.0 || !(0.0..=u16::MAX as f64).contains(&v) {
                return Err(Error::InvalidConfig(format!("value {v} is not a label")));
            }
            data.push(v as u16);
        }
        let count = match label_count {
            Some(c) => c,
            None => data
                .iter()
                .copied()
                .max()
                .unwrap_or(0)
                .checked_add(1)
                .ok_or_else(|| Error::InvalidConfig("label 65535 leaves no room for a label count".into()))?,
        };
        Ok(LabelVolume::from_vec(self.shape, data, count)?.with_spacing(self.spacing))
    }
}

pub fn read_nifti1(path: &Path) -> Result<NiftiVolume> {
    decode(&read_file(path)?, path)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<NiftiVolume> {
    if bytes.len() < HEADER_SIZE as usize {
        return Err(Error::Truncated { path: path.into(), expected: HEADER_SIZE as usize, got: bytes.len() });
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes"));
    let be = i32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes"));
    let little = if le == HEADER_SIZE {
        true
    } else if be == HEADER_SIZE {
        false
    } else {
        return Err(Error::BadHeaderSize(le));
    };
    let i16_at = |o: usize| {
        let b = [bytes[o], bytes[o + 1]];
        if little {
            i16::from_le_bytes(b)
        } else {
            i16::from_be_bytes(b)
        }
    };
    let f32_at = |o: usize| {
        let b: [u8; 4] = bytes[o..o + 4].try_into().expect("4 bytes");
        if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    };
    match &bytes[344..348] {
        b"n+1\0" => {}
        b"ni1\0" => return Err(Error::DetachedNifti),
        other => return Err(Error::WrongMagic { path: path.into(), found: other.to_vec() }),
    }
    let datatype = i16_at(70);
    let width = match datatype {
        DT_INT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        d => return Err(Error::UnsupportedDatatype(d)),
    };
    let rank = i16_at(40);
    let mut dims = [1usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        if (a as i16) < rank {
            let v = i16_at(42 + 2 * a);
            *d = v.max(1) as usize;
        }
    }
    for a in 3..rank.clamp(3, 7) as usize {
        if i16_at(42 + 2 * a) > 1 {
            return Err(Error::Parse { path: path.into(), line: 0, msg: "only 3D volumes are supported".into() });
        }
    }
    let shape = Shape3::from_dims(dims)?;
    let spacing = [0, 1, 2].map(|a| {
        let s = f32_at(80 + 4 * a).abs() as f64;
        if s > 0.0 {
            s
        } else {
            1.0
        }
    });
    let offset = (f32_at(108) as usize).max(HEADER_SIZE as usize);
    let n = shape.len();
    let need = offset + n * width;
    if bytes.len() < need {
        return Err(Error::Truncated { path: path.into(), expected: need, got: bytes.len() });
    }
    let payload = &bytes[offset..need];
    let mut values: Vec<f64> = payload
        .chunks_exact(width)
        .map(|c| match (datatype, little) {
            (DT_INT16, true) => i16::from_le_bytes([c[0], c[1]]) as f64,
            (DT_INT16, false) => i16::from_be_bytes([c[0], c[1]]) as f64,
            (DT_INT32, true) => i32::from_le_bytes(c.try_into().expect("4")) as f64,
            (DT_INT32, false) => i32::from_be_bytes(c.try_into().expect("4")) as f64,
            (DT_FLOAT32, true) => f32::from_le_bytes(c.try_into().expect("4")) as f64,
            (DT_FLOAT32, false) => f32::from_be_bytes(c.try_into().expect("4")) as f64,
            (_, true) => f64::from_le_bytes(c.try_into().expect("8")),
            (_, false) => f64::from_be_bytes(c.try_into().expect("8")),
        })
        .collect();
    let (slope, inter) = (f32_at(112) as f64, f32_at(116) as f64);
    if slope != 0.0 && !(slope == 1.0 && inter == 0.0) {
        values.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    Ok(NiftiVolume { shape, spacing, datatype, values })
}

pub fn encode(v: &ScalarVolume) -> Vec<u8> {
    let mut h = vec![0u8; 352];
    let dims = v.shape().dims();
    h[0..4].copy_from_slice(&HEADER_SIZE.to_le_bytes());
    let dim: [i16; 8] = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    h[70..72].copy_from_slice(&DT_FLOAT32.to_le_bytes());
    h[72..74].copy_from_slice(&32i16.to_le_bytes());
    let pixdim = [1.0f32, v.spacing[0] as f32, v.spacing[1] as f32, v.spacing[2] as f32, 0.0, 0.0, 0.0, 0.0];
    for (i, p) in pixdim.iter().enumerate() {
        h[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
    }
    h[108..112].copy_from_slice(&352f32.to_le_bytes());
    // xyzt_units: mm
    h[123] = 2;
    h[344..348].copy_from_slice(b"n+1\0");
    h.reserve(4 * v.data().len());
    for x in v.data() {
        h.extend_from_slice(&x.to_le_bytes());
    }
    h
}

pub fn write_nifti1(path: &Path, v: &ScalarVolume) -> Result<()> {
    write_atomic(path, &encode(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ScalarVolume {
        let s = Shape3::new(4, 3, 2).unwrap();
        ScalarVolume::from_fn(s, |[i, j, k]| (i as f32 - 1.5) * 0.3 + j as f32 * 1e-7 + k as f32 * 1e6)
            .with_spacing([0.5, 2.0, 1.5])
    }

    #[test]
    fn f32_round_trip_is_exact() {
        let v = sample();
        let back = decode(&encode(&v), Path::new("mem")).unwrap().into_scalar();
        assert_eq!(back, v);
    }

    /// Builds a big-endian int16 file with scaling by swapping every header field.
    #[test]
    fn big_endian_int16_with_scaling() {
        let mut h = vec![0u8; 352];
        h[0..4].copy_from_slice(&348i32.to_be_bytes());
        for (i, d) in [3i16, 2, 2, 2].iter().enumerate() {
            h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_be_bytes());
        }
        h[70..72].copy_from_slice(&DT_INT16.to_be_bytes());
        h[80..84].copy_from_slice(&1.0f32.to_be_bytes());
        h[108..112].copy_from_slice(&352f32.to_be_bytes());
        h[112..116].copy_from_slice(&2.0f32.to_be_bytes());
        h[116..120].copy_from_slice(&1.0f32.to_be_bytes());
        h[344..348].copy_from_slice(b"n+1\0");
        for x in 0..8i16 {
            h.extend_from_slice(&(x - 3).to_be_bytes());
        }
        let v = decode(&h, Path::new("be")).unwrap();
        assert_eq!(v.values, (0..8).map(|x| 2.0 * (x - 3) as f64 + 1.0).collect::<Vec<_>>());
        assert_eq!(v.spacing, [1.0; 3]);
    }

    #[test]
    fn distinct_errors() {
        let good = encode(&sample());
        let mut ni1 = good.clone();
        ni1[344..348].copy_from_slice(b"ni1\0");
        assert!(matches!(decode(&ni1, Path::new("x")), Err(Error::DetachedNifti)));
        let mut magic = good.clone();
        magic[345] = b'?';
        assert!(matches!(decode(&magic, Path::new("x")), Err(Error::WrongMagic { .. })));
        let mut dt = good.clone();
        dt[70..72].copy_from_slice(&2i16.to_le_bytes());
        assert!(matches!(decode(&dt, Path::new("x")), Err(Error::UnsupportedDatatype(2))));
        assert!(matches!(decode(&good[..good.len() - 1], Path::new("x")), Err(Error::Truncated { .. })));
        let mut size = good;
        size[0..4].copy_from_slice(&540i32.to_le_bytes());
        assert!(matches!(decode(&size, Path::new("x")), Err(Error::BadHeaderSize(540))));
    }

    #[test]
    fn labels_from_integers() {
        let v = NiftiVolume {
            shape: Shape3::cube(2).unwrap(),
            spacing: [1.0; 3],
            datatype: DT_INT16,
            values: vec![0.0, 1.0, 2.0, 3.0, 0.0, 1.0, 2.0, 3.0],
        };
        assert_eq!(v.clone().into_labels(None).unwrap().label_count(), 4);
        let frac = NiftiVolume { values: vec![0.5; 8], ..v };
        assert!(frac.into_labels(None).is_err());
    }
}
