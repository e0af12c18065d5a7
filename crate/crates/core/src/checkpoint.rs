//! HXCK checkpoints: a configuration echo plus a table of named f32 tensors.
//!
//! Layout, all integers little-endian: `"HXCK"`, u32 version (1),
//! u64 next epoch, u64 global step, u32 config length + UTF-8 config text,
//! u32 tensor count, then per tensor: u16 name length + name, u8 rank,
//! u32 per dimension, f32 payload.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{HexaError, Result, ResultExt};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HXCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Epoch the resumed run starts with.
    pub epoch: usize,
    pub global_step: usize,
    /// The run configuration in `key = value` form.
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

/// Byte-counting reader so format errors can name an offset.
struct Counted<R> {
    inner: R,
    pos: u64,
}

impl<R: Read> Read for Counted<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.pos += n as u64;
        Ok(n)
    }
}

impl<R: Read> Counted<R> {
    fn truncated(&self, what: &str) -> HexaError {
        HexaError::format(self.pos, format!("truncated {what}"))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        self.read_u8().map_err(|_| self.truncated(what))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        self.read_u16::<LittleEndian>().map_err(|_| self.truncated(what))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        self.read_u32::<LittleEndian>().map_err(|_| self.truncated(what))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        self.read_u64::<LittleEndian>().map_err(|_| self.truncated(what))
    }

    fn take_bytes(&mut self, len: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let got = self.by_ref().take(len as u64).read_to_end(&mut buf)?;
        if got != len {
            return Err(self.truncated(what));
        }
        Ok(buf)
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| HexaError::Architecture(format!("checkpoint has no tensor {name:?}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n == name)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u64::<LittleEndian>(self.epoch as u64)?;
        w.write_u64::<LittleEndian>(self.global_step as u64)?;
        w.write_u32::<LittleEndian>(self.config.len() as u32)?;
        w.write_all(self.config.as_bytes())?;
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            w.write_u16::<LittleEndian>(name.len() as u16)?;
            w.write_all(name.as_bytes())?;
            w.write_u8(t.shape().len() as u8)?;
            for &d in t.shape() {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in t.data() {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = Counted { inner: r, pos: 0 };
        let magic = r.take_bytes(4, "magic")?;
        if magic != MAGIC {
            return Err(HexaError::format(0, "bad magic, expected \"HXCK\""));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(HexaError::format(4, format!("unsupported checkpoint version {version}")));
        }
        let epoch = r.u64("epoch")? as usize;
        let global_step = r.u64("global step")? as usize;
        let len = r.u32("config length")? as usize;
        let at = r.pos;
        let config = String::from_utf8(r.take_bytes(len, "config text")?)
            .map_err(|_| HexaError::format(at, "config text is not UTF-8"))?;
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let at = r.pos;
            let n = r.u16("tensor name length")? as usize;
            let name = String::from_utf8(r.take_bytes(n, "tensor name")?)
                .map_err(|_| HexaError::format(at, "tensor name is not UTF-8"))?;
            let rank = r.u8("tensor rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("tensor shape").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take_bytes(numel * 4, &format!("payload of {name}"))?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(HexaError::format(r.pos - 1, "trailing bytes after tensor table"));
        }
        Ok(Checkpoint {
            epoch,
            global_step,
            config,
            tensors,
        })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let file = std::fs::File::create(&tmp)
                .map_err(HexaError::from)
                .context(format!("creating {}", tmp.display()))?;
            let mut w = std::io::BufWriter::new(file);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)
            .map_err(HexaError::from)
            .context(format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(HexaError::from)
            .context(format!("opening checkpoint {}", path.display()))?;
        Checkpoint::read_from(std::io::BufReader::new(file)).context(format!("reading checkpoint {}", path.display()))
    }
}

/// Integer indices stored exactly as f32 (valid below 2^24).
pub fn indices_to_tensor(idx: &[usize]) -> Tensor {
    Tensor::new(&[idx.len()], idx.iter().map(|&i| i as f32).collect()).expect("vector shape")
}

pub fn tensor_to_indices(t: &Tensor) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < (1u32 << 24) as f32 {
                Ok(v as usize)
            } else {
                Err(HexaError::Architecture(format!("invalid stored index {v}")))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            epoch: 3,
            global_step: 117,
            config: "pretext = moco\n".into(),
            tensors: vec![
                ("a".into(), Tensor::new(&[2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap()),
                ("empty".into(), Tensor::zeros(&[0, 4])),
                ("idx".into(), indices_to_tensor(&[0, 7, 29])),
            ],
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.config, c.config);
        for ((na, ta), (nb, tb)) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb));
        }
        assert_eq!(tensor_to_indices(back.get("idx").unwrap()).unwrap(), vec![0, 7, 29]);
        assert!(matches!(back.get("missing"), Err(HexaError::Architecture(_))));
    }

    #[test]
    fn truncation_is_a_format_error() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        for cut in [2, 10, 30, buf.len() - 1] {
            let err = Checkpoint::read_from(&buf[..cut]).unwrap_err();
            assert!(matches!(err, HexaError::Format { .. }), "{cut}: {err}");
        }
    }
}
