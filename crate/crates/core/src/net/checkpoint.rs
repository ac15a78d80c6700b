//! `RREG` checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "RREG" | u32 version | u32 n | n bytes of `key=value` config lines
//! u32 seed count | { u16 len, name, u64 seed }*
//! u32 entry count | { u16 len, name, u8 rank, u32 dim* }*
//! f32 values of every entry, in table order
//! ```

use std::path::Path;

use super::params::ParamEntry;
use super::{ModelConfig, ModelMode, RegistrationModel};
use crate::error::{Error, Result};
use crate::real::Real;

const MAGIC: &[u8; 4] = b"RREG";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seeds: Vec<(String, u64)>,
    pub entries: Vec<ParamEntry>,
    pub values: Vec<f32>,
}

impl Checkpoint {
    pub fn from_model<T: Real>(model: &RegistrationModel<T>) -> Self {
        Checkpoint {
            config: *model.config(),
            seeds: vec![("init".into(), model.seed())],
            entries: model.params().entries().to_vec(),
            values: model.params().values().iter().map(|v| v.f64() as f32).collect(),
        }
    }

    pub fn with_seed(mut self, name: &str, seed: u64) -> Self {
        self.seeds.retain(|(n, _)| n != name);
        self.seeds.push((name.to_string(), seed));
        self
    }

    pub fn seed(&self, name: &str) -> Option<u64> {
        self.seeds.iter().find(|(n, _)| n == name).map(|(_, s)| *s)
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.entries.iter().find(|e| e.name == name).map(|e| &self.values[e.range()])
    }

    pub fn to_model<T: Real>(&self) -> Result<RegistrationModel<T>> {
        let mut model = RegistrationModel::<T>::layout(self.config, self.seed("init").unwrap_or(0))?;
        if model.params().entries() != self.entries.as_slice() {
            return Err(Error::ConfigMismatch("parameter table does not match the configuration".into()));
        }
        for (d, s) in model.params_mut().values_mut().iter_mut().zip(&self.values) {
            *d = T::of(*s as f64);
        }
        Ok(model)
    }

    /// Copies this checkpoint's encoder into `backbone`; every other
    /// parameter keeps its value and nothing is frozen.
    pub fn transfer_encoder<T: Real>(&self, backbone: &mut RegistrationModel<T>) -> Result<()> {
        let source = self.to_model::<f32>()?;
        backbone.transfer_encoder_from(&source)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(64 + 4 * self.values.len());
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = config_text(&self.config);
        b.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        b.extend_from_slice(cfg.as_bytes());
        b.extend_from_slice(&(self.seeds.len() as u32).to_le_bytes());
        for (name, seed) in &self.seeds {
            put_name(&mut b, name);
            b.extend_from_slice(&seed.to_le_bytes());
        }
        b.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            put_name(&mut b, &e.name);
            b.push(e.shape.len() as u8);
            for &d in &e.shape {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for v in &self.values {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::WrongMagic { path: path.into(), found: magic.to_vec() });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion { path: path.into(), version });
        }
        let n = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(n)?).map_err(|e| r.parse_err(e.to_string()))?;
        let config = parse_config(text, path)?;
        let mut seeds = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.name()?;
            seeds.push((name, r.u64()?));
        }
        let mut entries = Vec::new();
        let mut offset = 0;
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let e = ParamEntry { name, shape, offset };
            offset += e.len();
            entries.push(e);
        }
        let payload = r.rest();
        if payload.len() != 4 * offset {
            return Err(Error::Truncated { path: path.into(), expected: 4 * offset, got: payload.len() });
        }
        let values = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Checkpoint { config, seeds, entries, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_name(b: &mut Vec<u8>, name: &str) {
    b.extend_from_slice(&(name.len() as u16).to_le_bytes());
    b.extend_from_slice(name.as_bytes());
}

fn config_text(c: &ModelConfig) -> String {
    format!(
        "mode={}\nstages={}\nbase_channels={}\ndecoder_channels={}\nss_steps={}\n",
        c.mode.name(),
        c.stages,
        c.base_channels,
        c.decoder_channels,
        c.ss_steps
    )
}

fn parse_config(text: &str, path: &Path) -> Result<ModelConfig> {
    let mut c = ModelConfig::default();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Parse { path: path.into(), line: i + 1, msg };
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
        let num = || v.parse::<usize>().map_err(|e| err(format!("{k}: {e}")));
        match k {
            "mode" => c.mode = ModelMode::parse(v).ok_or_else(|| err(format!("unknown mode {v:?}")))?,
            "stages" => c.stages = num()?,
            "base_channels" => c.base_channels = num()?,
            "decoder_channels" => c.decoder_channels = num()?,
            "ss_steps" => c.ss_steps = num()? as u32,
            _ => return Err(err(format!("unknown key {k:?}"))),
        }
    }
    c.validate()?;
    Ok(c)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated { path: self.path.into(), expected: self.pos + n, got: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> Result<String> {
        let n = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| self.parse_err(e.to_string()))
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        s
    }

    fn parse_err(&self, msg: String) -> Error {
        Error::Parse { path: self.path.into(), line: 0, msg }
    }
}
