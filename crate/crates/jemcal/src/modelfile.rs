//! Binary checkpoint format for trained models.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! b"JEMCALMF"  u32 version
//! u8 activation (0 leaky ReLU, 1 tanh)  f64 slope  f64 temperature  u8 mode (0 softmax, 1 JEM)
//! u32 layers, then per layer: u32 in, u32 out, in*out f64 weights, out f64 biases
//! u8 has_normalization [u32 raw_dim, u32 kept, kept u32 indices, kept f64 means,
//!                       kept f64 stds, u8 has_clip [f64 low, f64 high]]
//! [u8; 32] config digest
//! u8 has_buffer [u64 capacity, u32 dim, f64 low, f64 high, u64 rows, rows*dim f64]
//! ```

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use jemcal_core::data::Normalization;
use jemcal_core::model::{EnergyModel, Layer};
use jemcal_core::sgld::{DataBox, ReplayBuffer};
use jemcal_core::training::Mode;
use jemcal_core::{Activation, Tensor};

pub const MAGIC: &[u8; 8] = b"JEMCALMF";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelFileError {
    #[error("not a model file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported model file version {0} (expected {VERSION})")]
    BadVersion(u32),
    #[error("model file is truncated")]
    Truncated,
    #[error("model file has {0} unexpected trailing bytes")]
    Trailing(usize),
    #[error("corrupt model file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(std::io::Error),
}

impl From<std::io::Error> for ModelFileError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            ModelFileError::Truncated
        } else {
            ModelFileError::Io(e)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub model: EnergyModel,
    pub mode: Mode,
    /// Feature statistics the model was trained under.
    pub normalization: Option<Normalization>,
    pub config_hash: [u8; 32],
    pub buffer: Option<ReplayBuffer>,
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> std::io::Result<()> {
    xs.iter().try_for_each(|&x| w.write_f64::<LE>(x))
}

fn write_len<W: Write>(w: &mut W, n: usize) -> std::io::Result<()> {
    let n = u32::try_from(n).map_err(|_| std::io::Error::other("dimension exceeds u32"))?;
    w.write_u32::<LE>(n)
}

impl ModelFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        self.write(&mut w).expect("writing to a Vec cannot fail");
        w
    }

    pub fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(VERSION)?;
        match self.model.activation() {
            Activation::LeakyRelu { slope } => {
                w.write_u8(0)?;
                w.write_f64::<LE>(slope)?;
            }
            Activation::Tanh => {
                w.write_u8(1)?;
                w.write_f64::<LE>(0.0)?;
            }
        }
        w.write_f64::<LE>(self.model.temperature())?;
        w.write_u8(match self.mode {
            Mode::Softmax => 0,
            Mode::Jem => 1,
        })?;
        write_len(w, self.model.layers().len())?;
        for l in self.model.layers() {
            write_len(w, l.in_dim())?;
            write_len(w, l.out_dim())?;
            write_f64s(w, l.weight.data())?;
            write_f64s(w, l.bias.data())?;
        }
        match &self.normalization {
            None => w.write_u8(0)?,
            Some(n) => {
                w.write_u8(1)?;
                write_len(w, n.raw_dim)?;
                write_len(w, n.kept.len())?;
                for &k in &n.kept {
                    write_len(w, k)?;
                }
                write_f64s(w, &n.mean)?;
                write_f64s(w, &n.std)?;
                match n.clip {
                    None => w.write_u8(0)?,
                    Some(b) => {
                        w.write_u8(1)?;
                        write_f64s(w, &[b.low, b.high])?;
                    }
                }
            }
        }
        w.write_all(&self.config_hash)?;
        match &self.buffer {
            None => w.write_u8(0)?,
            Some(b) => {
                w.write_u8(1)?;
                w.write_u64::<LE>(b.capacity() as u64)?;
                write_len(w, b.dim())?;
                write_f64s(w, &[b.bounds().low, b.bounds().high])?;
                w.write_u64::<LE>(b.len() as u64)?;
                write_f64s(w, b.entries())?;
            }
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelFileError> {
        let mut r = Reader(Cursor::new(bytes));
        let mut magic = [0u8; 8];
        r.0.read_exact(&mut magic).map_err(|_| ModelFileError::BadMagic)?;
        if &magic != MAGIC {
            return Err(ModelFileError::BadMagic);
        }
        let version = r.0.read_u32::<LE>()?;
        if version != VERSION {
            return Err(ModelFileError::BadVersion(version));
        }
        let tag = r.0.read_u8()?;
        let slope = r.0.read_f64::<LE>()?;
        let activation = match tag {
            0 => Activation::LeakyRelu { slope },
            1 => Activation::Tanh,
            t => return Err(ModelFileError::Corrupt(format!("unknown activation tag {t}"))),
        };
        let temperature = r.0.read_f64::<LE>()?;
        let mode = match r.0.read_u8()? {
            0 => Mode::Softmax,
            1 => Mode::Jem,
            t => return Err(ModelFileError::Corrupt(format!("unknown mode tag {t}"))),
        };
        let n_layers = r.len()?;
        let mut layers = Vec::new();
        for _ in 0..n_layers {
            let (i, o) = (r.len()?, r.len()?);
            let weight = r.f64s(i * o)?;
            let bias = r.f64s(o)?;
            layers.push(Layer {
                weight: Tensor::new(&[i, o], weight).map_err(corrupt)?,
                bias: Tensor::new(&[o], bias).map_err(corrupt)?,
            });
        }
        let model = EnergyModel::new(layers, activation, temperature).map_err(corrupt)?;
        let normalization = match r.flag()? {
            false => None,
            true => {
                let raw_dim = r.len()?;
                let k = r.len()?;
                let kept = (0..k).map(|_| r.len()).collect::<Result<Vec<_>, _>>()?;
                let mean = r.f64s(k)?;
                let std = r.f64s(k)?;
                let clip = match r.flag()? {
                    false => None,
                    true => {
                        let b = r.f64s(2)?;
                        Some(DataBox { low: b[0], high: b[1] })
                    }
                };
                if kept.iter().any(|&j| j >= raw_dim) || k != model.input_dim() {
                    return Err(ModelFileError::Corrupt("normalization does not match the model".into()));
                }
                Some(Normalization {
                    raw_dim,
                    kept,
                    mean,
                    std,
                    clip,
                })
            }
        };
        let mut config_hash = [0u8; 32];
        r.0.read_exact(&mut config_hash)?;
        let buffer = match r.flag()? {
            false => None,
            true => {
                let capacity = r.0.read_u64::<LE>()? as usize;
                let dim = r.len()?;
                let b = r.f64s(2)?;
                let rows = r.0.read_u64::<LE>()? as usize;
                let entries = r.f64s(rows.checked_mul(dim).ok_or(ModelFileError::Truncated)?)?;
                let bounds = DataBox { low: b[0], high: b[1] };
                Some(ReplayBuffer::from_entries(capacity, dim, bounds, entries).map_err(corrupt)?)
            }
        };
        let rest = bytes.len() - r.0.position() as usize;
        if rest != 0 {
            return Err(ModelFileError::Trailing(rest));
        }
        Ok(Self {
            model,
            mode,
            normalization,
            config_hash,
            buffer,
        })
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, ModelFileError> {
        Self::from_bytes(&std::fs::read(path).map_err(ModelFileError::Io)?)
    }
}

fn corrupt(e: jemcal_core::Error) -> ModelFileError {
    ModelFileError::Corrupt(e.to_string())
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn remaining(&self) -> usize {
        self.0.get_ref().len() - self.0.position() as usize
    }

    fn len(&mut self) -> Result<usize, ModelFileError> {
        Ok(self.0.read_u32::<LE>()? as usize)
    }

    fn flag(&mut self) -> Result<bool, ModelFileError> {
        match self.0.read_u8()? {
            0 => Ok(false),
            1 => Ok(true),
            t => Err(ModelFileError::Corrupt(format!("bad flag byte {t}"))),
        }
    }

    /// Checks the length against what is left so a corrupt count cannot
    /// trigger a huge allocation.
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, ModelFileError> {
        if n.checked_mul(8).is_none_or(|b| b > self.remaining()) {
            return Err(ModelFileError::Truncated);
        }
        (0..n).map(|_| Ok(self.0.read_f64::<LE>()?)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use jemcal_core::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> ModelFile {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = ModelConfig {
            hidden: vec![5, 3],
            activation: Activation::LeakyRelu { slope: 0.1 },
            temperature: 1.5,
        };
        let model = EnergyModel::init(4, 3, &cfg, &mut rng).unwrap();
        let bounds = DataBox { low: -3.0, high: 3.0 };
        let buffer = ReplayBuffer::from_entries(10, 4, bounds, (0..12).map(|i| i as f64 / 10.0).collect()).unwrap();
        ModelFile {
            model,
            mode: Mode::Jem,
            normalization: Some(Normalization {
                raw_dim: 5,
                kept: vec![0, 1, 3, 4],
                mean: vec![0.5, -1.0, 2.0, 0.0],
                std: vec![1.0, 2.0, 0.5, 3.0],
                clip: Some(bounds),
            }),
            config_hash: [7; 32],
            buffer: Some(buffer),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let m = sample();
        let bytes = m.to_bytes();
        assert_eq!(ModelFile::from_bytes(&bytes).unwrap(), m);
        let mut bare = m.clone();
        bare.normalization = None;
        bare.buffer = None;
        bare.mode = Mode::Softmax;
        assert_eq!(ModelFile::from_bytes(&bare.to_bytes()).unwrap(), bare);
    }

    #[test]
    fn header_errors_are_distinguished() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ModelFile::from_bytes(&bad), Err(ModelFileError::BadMagic)));
        assert!(matches!(ModelFile::from_bytes(b"JEM"), Err(ModelFileError::BadMagic)));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(ModelFile::from_bytes(&bad), Err(ModelFileError::BadVersion(9))));
    }

    #[test]
    fn every_truncation_is_reported() {
        let bytes = sample().to_bytes();
        for cut in 12..bytes.len() {
            assert!(
                matches!(ModelFile::from_bytes(&bytes[..cut]), Err(ModelFileError::Truncated)),
                "cut at {cut}"
            );
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(ModelFile::from_bytes(&long), Err(ModelFileError::Trailing(1))));
    }
}
