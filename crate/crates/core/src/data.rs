//! Image datasets: the HXDS binary format and the bundled synthetic
//! generators.
//!
//! HXDS layout, all integers little-endian:
//! `"HXDS"`, u32 version (1), u32 count, u16 height, u16 width, u16 channels,
//! `count·H·W·C` u8 pixels (each image row-major, channels interleaved),
//! then `count` u16 labels.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{HexaError, Result, ResultExt};
use crate::eval::LabeledSet;
use crate::rng::RngStreams;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HXDS";
pub const VERSION: u32 = 1;
const HEADER_LEN: u64 = 18;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `count·H·W·C` bytes, channels interleaved.
    pub pixels: Vec<u8>,
    pub labels: Vec<u16>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Images as an `N×C×H×W` tensor with `u8 / 255` pixel values.
    pub fn images(&self) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut data = vec![0.0f32; self.pixels.len()];
        for (n, img) in self.pixels.chunks(self.image_len().max(1)).enumerate() {
            let out = &mut data[n * h * w * c..(n + 1) * h * w * c];
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        out[ch * h * w + y * w + x] = img[(y * w + x) * c + ch] as f32 / 255.0;
                    }
                }
            }
        }
        Tensor::new(&[self.len(), c, h, w], data).expect("dataset tensor shape")
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    pub fn to_labeled(&self) -> LabeledSet {
        LabeledSet {
            images: self.images(),
            labels: self.labels_usize(),
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let len = self.image_len();
        Dataset {
            height: self.height,
            width: self.width,
            channels: self.channels,
            pixels: idx.iter().flat_map(|&i| self.pixels[i * len..(i + 1) * len].iter().copied()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u32::<LittleEndian>(self.len() as u32)?;
        for dim in [self.height, self.width, self.channels] {
            let v = u16::try_from(dim).map_err(|_| HexaError::config(format!("dimension {dim} exceeds u16")))?;
            w.write_u16::<LittleEndian>(v)?;
        }
        w.write_all(&self.pixels)?;
        for &l in &self.labels {
            w.write_u16::<LittleEndian>(l)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, 0, "magic")?;
        if &magic != MAGIC {
            return Err(HexaError::format(0, format!("bad magic {magic:?}, expected \"HXDS\"")));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|_| HexaError::format(4, "truncated header"))?;
        if version != VERSION {
            return Err(HexaError::format(4, format!("unsupported version {version}")));
        }
        let mut header = [0u8; 10];
        read_exact(&mut r, &mut header, 8, "header")?;
        let count = u32::from_le_bytes(header[0..4].try_into().expect("4 bytes")) as usize;
        let h = u16::from_le_bytes([header[4], header[5]]) as usize;
        let w = u16::from_le_bytes([header[6], header[7]]) as usize;
        let c = u16::from_le_bytes([header[8], header[9]]) as usize;
        let mut pixels = Vec::new();
        let want = (count * h * w * c) as u64;
        let got = r.by_ref().take(want).read_to_end(&mut pixels)? as u64;
        if got != want {
            return Err(HexaError::format(
                HEADER_LEN + got,
                format!("pixel payload truncated: {got} of {want} bytes for count={count}"),
            ));
        }
        let mut raw = Vec::new();
        let label_bytes = 2 * count as u64;
        let got = r.by_ref().take(label_bytes).read_to_end(&mut raw)? as u64;
        if got != label_bytes {
            return Err(HexaError::format(
                HEADER_LEN + want + got,
                format!("label payload truncated: {} of {count} labels", got / 2),
            ));
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(HexaError::format(
                HEADER_LEN + want + label_bytes,
                format!("trailing bytes after {count} records"),
            ));
        }
        let labels = raw.chunks(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
        Ok(Dataset {
            height: h,
            width: w,
            channels: c,
            pixels,
            labels,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(HexaError::from).context(format!("opening dataset {}", path.display()))?;
        Dataset::read_from(std::io::BufReader::new(file)).context(format!("reading dataset {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(HexaError::from).context(format!("creating {}", path.display()))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], offset: u64, what: &str) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 => {
                return Err(HexaError::format(offset + filled as u64, format!("truncated {what}")));
            }
            n => filled += n,
        }
    }
    Ok(())
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub const SHAPE_CLASSES: [&str; 10] = [
    "disk", "square", "triangle", "plus", "ring", "diamond", "cross", "bar", "dots", "frame",
];

/// Whether `(u, v)`, in shape-local coordinates scaled to `[-1, 1]`, lies
/// inside shape `class`.
fn inside(class: usize, u: f32, v: f32) -> bool {
    let r2 = u * u + v * v;
    let box_norm = u.abs().max(v.abs());
    match class {
        0 => r2 <= 1.0,
        1 => box_norm <= 0.8,
        2 => (-0.8..=0.8).contains(&v) && u.abs() <= (v + 0.8) / 1.6 * 0.9,
        3 => (u.abs() <= 0.25 && v.abs() <= 0.9) || (v.abs() <= 0.25 && u.abs() <= 0.9),
        4 => (0.3..=1.0).contains(&r2),
        5 => u.abs() + v.abs() <= 1.0,
        6 => ((u - v).abs() <= 0.3 || (u + v).abs() <= 0.3) && box_norm <= 0.9,
        7 => v.abs() <= 0.3 && u.abs() <= 1.0,
        8 => (u + 0.5).powi(2) + v * v <= 0.16 || (u - 0.5).powi(2) + v * v <= 0.16,
        _ => (0.6..=0.9).contains(&box_norm),
    }
}

/// Colored geometric shapes on noisy backgrounds, 10 balanced classes.
/// Image `i` has class `i % 10` and is a pure function of `(seed, i)`.
pub fn generate_shapes(count: usize, size: usize, seed: u64) -> Dataset {
    let streams = RngStreams::new(seed);
    let c = 3;
    let mut pixels = Vec::with_capacity(count * size * size * c);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % SHAPE_CLASSES.len();
        let mut rng = streams.stream("shapes", 0, i as u64);
        let s = size as f32;
        let radius = s * rng.random_range(0.22..0.36);
        let cx = s / 2.0 + rng.random_range(-0.12..0.12) * s;
        let cy = s / 2.0 + rng.random_range(-0.12..0.12) * s;
        let color: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.45..1.0));
        let dark = rng.random_range(0..3);
        let bg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.35));
        for y in 0..size {
            for x in 0..size {
                let u = (x as f32 + 0.5 - cx) / radius;
                let v = (y as f32 + 0.5 - cy) / radius;
                let hit = inside(class, u, v);
                for ch in 0..c {
                    let noise = rng.random_range(-0.08..0.08);
                    let base = if hit {
                        if ch == dark {
                            color[ch] * 0.4
                        } else {
                            color[ch]
                        }
                    } else {
                        bg[ch]
                    };
                    pixels.push(quantize(base + noise));
                }
            }
        }
        labels.push(class as u16);
    }
    Dataset {
        height: size,
        width: size,
        channels: c,
        pixels,
        labels,
    }
}

/// Gaussian blobs in pixel space: every class has a fixed random mean image
/// and samples add isotropic noise. Image `i` has class `i % classes`.
pub fn generate_blobs(count: usize, classes: usize, size: usize, channels: usize, noise: f32, seed: u64) -> Dataset {
    let streams = RngStreams::new(seed);
    let len = size * size * channels;
    let means: Vec<Vec<f32>> = (0..classes)
        .map(|k| {
            let mut rng = streams.stream("blob-mean", 0, k as u64);
            (0..len).map(|_| rng.random_range(0.15..0.85)).collect()
        })
        .collect();
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite noise level");
    let mut pixels = Vec::with_capacity(count * len);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let k = i % classes.max(1);
        let mut rng = streams.stream("blob", 0, i as u64);
        pixels.extend(means[k].iter().map(|&m| quantize(m + normal.sample(&mut rng))));
        labels.push(k as u16);
    }
    Dataset {
        height: size,
        width: size,
        channels,
        pixels,
        labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let d = generate_blobs(7, 3, 4, 3, 0.1, 1);
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        assert_eq!(buf.len() as u64, HEADER_LEN + 7 * 48 + 14);
        assert_eq!(Dataset::read_from(buf.as_slice()).unwrap(), d);
    }

    #[test]
    fn empty_file_is_valid() {
        let d = Dataset {
            height: 2,
            width: 2,
            channels: 1,
            pixels: vec![],
            labels: vec![],
        };
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        let back = Dataset::read_from(buf.as_slice()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.images().shape(), &[0, 1, 2, 2]);
    }

    #[test]
    fn max_pixel_is_exactly_one() {
        let d = Dataset {
            height: 1,
            width: 2,
            channels: 1,
            pixels: vec![255, 0],
            labels: vec![0],
        };
        assert_eq!(d.images().data(), &[1.0, 0.0]);
    }

    #[test]
    fn channels_are_deinterleaved() {
        let d = Dataset {
            height: 1,
            width: 2,
            channels: 2,
            pixels: vec![10, 20, 30, 40],
            labels: vec![0],
        };
        let t = d.images();
        let expect: Vec<f32> = [10, 30, 20, 40].iter().map(|&v| v as f32 / 255.0).collect();
        assert_eq!(t.data(), expect.as_slice());
    }

    #[test]
    fn malformed_files_report_offsets() {
        let d = generate_blobs(2, 2, 2, 1, 0.1, 0);
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::read_from(bad.as_slice()), Err(HexaError::Format { offset: 0, .. })));

        let cut = &buf[..HEADER_LEN as usize + 3];
        assert!(matches!(Dataset::read_from(cut), Err(HexaError::Format { offset: 21, .. })));

        let cut = &buf[..buf.len() - 1];
        assert!(matches!(Dataset::read_from(cut), Err(HexaError::Format { .. })));

        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(Dataset::read_from(long.as_slice()), Err(HexaError::Format { .. })));
    }

    #[test]
    fn shapes_are_balanced_and_deterministic() {
        let a = generate_shapes(30, 32, 4);
        assert_eq!(a, generate_shapes(30, 32, 4));
        for k in 0..10 {
            assert_eq!(a.labels.iter().filter(|&&l| l == k).count(), 3);
        }
        assert_ne!(a.pixels, generate_shapes(30, 32, 5).pixels);
    }
}
