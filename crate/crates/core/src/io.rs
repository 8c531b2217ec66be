//! Binary file formats: RFTN tensors, RFCK checkpoints, and IDX datasets.
//!
//! RFTN: magic `RFTN`, version byte (1), dtype byte (0 = f32, 1 = f64),
//! rank byte, rank little-endian u64 dims, then the raw little-endian
//! payload.
//!
//! RFCK: magic `RFCK`, version byte (1), u32 LE record count, then records
//! of (name length u16 LE, UTF-8 name, embedded RFTN tensor). Step counter,
//! master seed and the resolved config snapshot ride along as `__meta__/*`
//! records encoded as tensors.
//!
//! IDX: the big-endian ubyte dataset format (image magic 2051, label magic
//! 2049); pixel bytes scale to [0, 1] on load.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use crate::tensor::{elem, Dtype, Element, Tensor};
use crate::{Error, Result};

pub const RFTN_MAGIC: [u8; 4] = *b"RFTN";
pub const RFCK_MAGIC: [u8; 4] = *b"RFCK";
pub const FORMAT_VERSION: u8 = 1;

/// A tensor of either supported dtype, as read from disk.
#[derive(Debug, Clone)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
        }
    }

    pub fn into_f32(self) -> Tensor<f32> {
        match self {
            TensorData::F32(t) => t,
            TensorData::F64(t) => t.cast(),
        }
    }

    pub fn into_f64(self) -> Tensor<f64> {
        match self {
            TensorData::F32(t) => t.cast(),
            TensorData::F64(t) => t,
        }
    }

    pub fn into_elem<T: Element>(self) -> Tensor<T> {
        match self {
            TensorData::F32(t) => t.cast(),
            TensorData::F64(t) => t.cast(),
        }
    }
}

pub fn write_rftn_to<T: Element>(w: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    w.write_all(&RFTN_MAGIC)?;
    w.write_all(&[FORMAT_VERSION, T::DTYPE.tag()])?;
    let rank = t.rank();
    if rank > u8::MAX as usize {
        return Err(Error::format(format!("rank {rank} exceeds format limit")));
    }
    w.write_all(&[rank as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match T::DTYPE {
        Dtype::F32 => {
            for v in t.data() {
                w.write_all(&(v.to_f64().unwrap() as f32).to_le_bytes())?;
            }
        }
        Dtype::F64 => {
            for v in t.data() {
                w.write_all(&v.to_f64().unwrap().to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn write_rftn<T: Element>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_rftn_to(&mut f, t)
}

fn read_exact_at(r: &mut impl Read, buf: &mut [u8], offset: &mut usize, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| {
        Error::format(format!("truncated file at byte offset {offset} reading {what}"))
    })?;
    *offset += buf.len();
    Ok(())
}

pub fn read_rftn_from(r: &mut impl Read) -> Result<TensorData> {
    let mut offset = 0usize;
    let mut magic = [0u8; 4];
    read_exact_at(r, &mut magic, &mut offset, "magic")?;
    if magic != RFTN_MAGIC {
        return Err(Error::format(format!(
            "bad RFTN magic {magic:02x?} at byte offset 0"
        )));
    }
    let mut hdr = [0u8; 3];
    read_exact_at(r, &mut hdr, &mut offset, "header")?;
    if hdr[0] != FORMAT_VERSION {
        return Err(Error::format(format!("unsupported RFTN version {}", hdr[0])));
    }
    let dtype = Dtype::from_tag(hdr[1])?;
    let rank = hdr[2] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut dim = [0u8; 8];
        read_exact_at(r, &mut dim, &mut offset, "dimension")?;
        shape.push(u64::from_le_bytes(dim) as usize);
    }
    let n: usize = shape.iter().product();
    match dtype {
        Dtype::F32 => {
            let mut data = Vec::with_capacity(n);
            let mut b = [0u8; 4];
            for _ in 0..n {
                read_exact_at(r, &mut b, &mut offset, "payload")?;
                data.push(f32::from_le_bytes(b));
            }
            Ok(TensorData::F32(Tensor::from_vec(&shape, data)?))
        }
        Dtype::F64 => {
            let mut data = Vec::with_capacity(n);
            let mut b = [0u8; 8];
            for _ in 0..n {
                read_exact_at(r, &mut b, &mut offset, "payload")?;
                data.push(f64::from_le_bytes(b));
            }
            Ok(TensorData::F64(Tensor::from_vec(&shape, data)?))
        }
    }
}

pub fn read_rftn(path: &Path) -> Result<TensorData> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_rftn_from(&mut f)
}

/// Everything a training run needs to resume or reproduce: named weights,
/// optimizer moments, step counter, master seed, resolved config text.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
    pub opt_m: Vec<Tensor<T>>,
    pub opt_v: Vec<Tensor<T>>,
    pub step: u64,
    pub seed: u64,
    pub config_text: String,
}

fn write_record<T: Element>(w: &mut impl Write, name: &str, t: &Tensor<T>) -> Result<()> {
    let bytes = name.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(Error::format(format!("record name too long: {name}")));
    }
    w.write_all(&(bytes.len() as u16).to_le_bytes())?;
    w.write_all(bytes)?;
    write_rftn_to(w, t)
}

impl<T: Element> Checkpoint<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(&RFCK_MAGIC)?;
        w.write_all(&[FORMAT_VERSION])?;
        let count = self.names.len() * 3 + 3;
        w.write_all(&(count as u32).to_le_bytes())?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            write_record(&mut w, &format!("param/{name}"), t)?;
        }
        for (name, t) in self.names.iter().zip(&self.opt_m) {
            write_record(&mut w, &format!("opt.m/{name}"), t)?;
        }
        for (name, t) in self.names.iter().zip(&self.opt_v) {
            write_record(&mut w, &format!("opt.v/{name}"), t)?;
        }
        write_record(
            &mut w,
            "__meta__/step",
            &Tensor::<f64>::scalar(self.step as f64),
        )?;
        let seed_halves = Tensor::<f64>::from_vec(
            &[2],
            vec![(self.seed >> 32) as f64, (self.seed & 0xFFFF_FFFF) as f64],
        )?;
        write_record(&mut w, "__meta__/seed", &seed_halves)?;
        let cfg_bytes: Vec<f32> = self.config_text.bytes().map(|b| b as f32).collect();
        let cfg_tensor = if cfg_bytes.is_empty() {
            Tensor::<f32>::zeros(&[1])
        } else {
            Tensor::<f32>::from_vec(&[cfg_bytes.len()], cfg_bytes)?
        };
        write_record(&mut w, "__meta__/config", &cfg_tensor)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format("truncated checkpoint reading magic".to_string()))?;
        if magic != RFCK_MAGIC {
            return Err(Error::format(format!("bad RFCK magic {magic:02x?}")));
        }
        let mut v = [0u8; 1];
        r.read_exact(&mut v)
            .map_err(|_| Error::format("truncated checkpoint reading version".to_string()))?;
        if v[0] != FORMAT_VERSION {
            return Err(Error::format(format!("unsupported RFCK version {}", v[0])));
        }
        let mut cb = [0u8; 4];
        r.read_exact(&mut cb)
            .map_err(|_| Error::format("truncated checkpoint reading count".to_string()))?;
        let count = u32::from_le_bytes(cb) as usize;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        let mut m_map = std::collections::BTreeMap::new();
        let mut v_map = std::collections::BTreeMap::new();
        let mut step = 0u64;
        let mut seed = 0u64;
        let mut config_text = String::new();
        for _ in 0..count {
            let mut lb = [0u8; 2];
            r.read_exact(&mut lb)
                .map_err(|_| Error::format("truncated checkpoint reading record name".to_string()))?;
            let len = u16::from_le_bytes(lb) as usize;
            let mut nb = vec![0u8; len];
            r.read_exact(&mut nb)
                .map_err(|_| Error::format("truncated checkpoint reading record name".to_string()))?;
            let name = String::from_utf8(nb)
                .map_err(|_| Error::format("record name is not UTF-8".to_string()))?;
            let tensor = read_rftn_from(&mut r)?;
            if let Some(p) = name.strip_prefix("param/") {
                names.push(p.to_string());
                tensors.push(tensor.into_elem::<T>());
            } else if let Some(p) = name.strip_prefix("opt.m/") {
                m_map.insert(p.to_string(), tensor.into_elem::<T>());
            } else if let Some(p) = name.strip_prefix("opt.v/") {
                v_map.insert(p.to_string(), tensor.into_elem::<T>());
            } else if name == "__meta__/step" {
                step = tensor.into_f64().data()[0] as u64;
            } else if name == "__meta__/seed" {
                let halves = tensor.into_f64();
                seed = ((halves.data()[0] as u64) << 32) | halves.data()[1] as u64;
            } else if name == "__meta__/config" {
                let bytes: Vec<u8> = tensor
                    .into_f32()
                    .data()
                    .iter()
                    .map(|&v| v as u8)
                    .collect();
                config_text = String::from_utf8_lossy(&bytes).into_owned();
                // the empty-config placeholder is a single zero byte
                if config_text == "\0" {
                    config_text = String::new();
                }
            } else {
                return Err(Error::format(format!("unknown checkpoint record `{name}`")));
            }
        }
        let opt_m = names
            .iter()
            .map(|n| {
                m_map
                    .remove(n)
                    .ok_or_else(|| Error::format(format!("missing opt.m record for `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let opt_v = names
            .iter()
            .map(|n| {
                v_map
                    .remove(n)
                    .ok_or_else(|| Error::format(format!("missing opt.v record for `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint {
            names,
            tensors,
            opt_m,
            opt_v,
            step,
            seed,
            config_text,
        })
    }
}

pub const IDX_IMAGE_MAGIC: u32 = 2051;
pub const IDX_LABEL_MAGIC: u32 = 2049;

fn read_be_u32(r: &mut impl Read, offset: &mut usize, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_at(r, &mut b, offset, what)?;
    Ok(u32::from_be_bytes(b))
}

/// Reads an IDX image file into raw bytes plus geometry.
pub fn read_idx_images_raw(path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut offset = 0usize;
    let magic = read_be_u32(&mut r, &mut offset, "magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::format(format!(
            "bad IDX image magic {magic} (expected {IDX_IMAGE_MAGIC}) at byte offset 0"
        )));
    }
    let count = read_be_u32(&mut r, &mut offset, "count")? as usize;
    let rows = read_be_u32(&mut r, &mut offset, "rows")? as usize;
    let cols = read_be_u32(&mut r, &mut offset, "cols")? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    read_exact_at(&mut r, &mut pixels, &mut offset, "pixels")?;
    Ok((pixels, count, rows, cols))
}

/// Reads an IDX image file into per-sample (1, H, W) tensors scaled to
/// [0, 1].
pub fn read_idx_images(path: &Path) -> Result<Vec<Tensor<f32>>> {
    let (pixels, count, rows, cols) = read_idx_images_raw(path)?;
    let hw = rows * cols;
    Ok((0..count)
        .map(|i| {
            Tensor::from_fn(&[1, rows, cols], |j| {
                elem::<f32>(pixels[i * hw + j] as f64 / 255.0)
            })
        })
        .collect())
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut offset = 0usize;
    let magic = read_be_u32(&mut r, &mut offset, "magic")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::format(format!(
            "bad IDX label magic {magic} (expected {IDX_LABEL_MAGIC}) at byte offset 0"
        )));
    }
    let count = read_be_u32(&mut r, &mut offset, "count")? as usize;
    let mut labels = vec![0u8; count];
    read_exact_at(&mut r, &mut labels, &mut offset, "labels")?;
    Ok(labels)
}

pub fn write_idx_images(path: &Path, pixels: &[u8], count: usize, rows: usize, cols: usize) -> Result<()> {
    if pixels.len() != count * rows * cols {
        return Err(Error::format(format!(
            "pixel buffer length {} does not match {count}x{rows}x{cols}",
            pixels.len()
        )));
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&IDX_IMAGE_MAGIC.to_be_bytes())?;
    w.write_all(&(count as u32).to_be_bytes())?;
    w.write_all(&(rows as u32).to_be_bytes())?;
    w.write_all(&(cols as u32).to_be_bytes())?;
    w.write_all(pixels)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&IDX_LABEL_MAGIC.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    w.write_all(labels)?;
    Ok(())
}

/// Loads a paired IDX image/label dataset with the count consistency check.
pub fn load_idx_dataset(images: &Path, labels: &Path) -> Result<(Vec<Tensor<f32>>, Vec<u8>)> {
    let imgs = read_idx_images(images)?;
    let lbls = read_idx_labels(labels)?;
    if imgs.len() != lbls.len() {
        return Err(Error::format(format!(
            "label count {} does not match image count {}",
            lbls.len(),
            imgs.len()
        )));
    }
    Ok((imgs, lbls))
}

/// Line-oriented helper: reads non-empty, non-comment lines.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        out.push(line);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn rftn_header_arithmetic() {
        // rank-1 length-2 f32 tensor: 4 + 1 + 1 + 1 + 8 + 8 = 23 bytes
        let t = Tensor::<f32>::from_vec(&[2], vec![1.5, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_rftn_to(&mut buf, &t).unwrap();
        assert_eq!(buf.len(), 23);
        assert_eq!(&buf[0..4], b"RFTN");
        assert_eq!(buf[4], 1); // version
        assert_eq!(buf[5], 0); // f32
        assert_eq!(buf[6], 1); // rank
    }

    #[test]
    fn rftn_roundtrip_both_dtypes() {
        let dir = tempfile::tempdir().unwrap();
        let t32: Tensor<f32> = Rng::new(1, 1).tensor_uniform(&[3, 4], -1.0, 1.0);
        let p32 = dir.path().join("a.rftn");
        write_rftn(&p32, &t32).unwrap();
        match read_rftn(&p32).unwrap() {
            TensorData::F32(back) => assert_eq!(back, t32),
            _ => panic!("dtype mismatch"),
        }
        let t64: Tensor<f64> = Rng::new(2, 2).tensor_uniform(&[5], -1.0, 1.0);
        let p64 = dir.path().join("b.rftn");
        write_rftn(&p64, &t64).unwrap();
        match read_rftn(&p64).unwrap() {
            TensorData::F64(back) => assert_eq!(back, t64),
            _ => panic!("dtype mismatch"),
        }
    }

    #[test]
    fn rftn_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.rftn");
        std::fs::write(&p, b"NOPE").unwrap();
        assert!(matches!(read_rftn(&p), Err(Error::Format(_))));
        let t: Tensor<f32> = Tensor::zeros(&[4]);
        let mut buf = Vec::new();
        write_rftn_to(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 3);
        std::fs::write(&p, &buf).unwrap();
        let err = read_rftn(&p).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("byte offset"), "missing offset in `{msg}`");
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.rfck");
        let ck = Checkpoint::<f32> {
            names: vec!["embed.w".into(), "enc.b".into()],
            tensors: vec![
                Rng::new(3, 1).tensor_uniform(&[4, 2], -1.0, 1.0),
                Rng::new(3, 2).tensor_uniform(&[4], -1.0, 1.0),
            ],
            opt_m: vec![Tensor::zeros(&[4, 2]), Tensor::zeros(&[4])],
            opt_v: vec![
                Rng::new(3, 3).tensor_uniform(&[4, 2], 0.0, 1.0),
                Tensor::zeros(&[4]),
            ],
            step: 1234,
            seed: 0xDEAD_BEEF_CAFE_F00D,
            config_text: "model.variant = RF-OA\nrun.seed = 7\n".into(),
        };
        ck.save(&p).unwrap();
        let back = Checkpoint::<f32>::load(&p).unwrap();
        assert_eq!(back.names, ck.names);
        for (a, b) in back.tensors.iter().zip(&ck.tensors) {
            assert_eq!(a, b);
        }
        for (a, b) in back.opt_v.iter().zip(&ck.opt_v) {
            assert_eq!(a, b);
        }
        assert_eq!(back.step, 1234);
        assert_eq!(back.seed, ck.seed);
        assert_eq!(back.config_text, ck.config_text);
    }

    #[test]
    fn idx_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = dir.path().join("images.idx");
        let lbls = dir.path().join("labels.idx");
        // 4 synthetic 2x2 images
        let pixels: Vec<u8> = (0..16).map(|i| (i * 16) as u8).collect();
        write_idx_images(&imgs, &pixels, 4, 2, 2).unwrap();
        write_idx_labels(&lbls, &[0, 1, 2, 3]).unwrap();
        let (back, count, rows, cols) = read_idx_images_raw(&imgs).unwrap();
        assert_eq!((count, rows, cols), (4, 2, 2));
        assert_eq!(back, pixels);
        let labels = read_idx_labels(&lbls).unwrap();
        assert_eq!(labels, vec![0, 1, 2, 3]);
        // byte 255 -> 1.0
        write_idx_images(&imgs, &[255, 0, 128, 64], 1, 2, 2).unwrap();
        let tensors = read_idx_images(&imgs).unwrap();
        assert_eq!(tensors[0].data()[0], 1.0);
    }

    #[test]
    fn idx_count_mismatch_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = dir.path().join("images.idx");
        let lbls = dir.path().join("labels.idx");
        write_idx_images(&imgs, &[0; 8], 2, 2, 2).unwrap();
        write_idx_labels(&lbls, &[1, 2, 3]).unwrap();
        assert!(matches!(
            load_idx_dataset(&imgs, &lbls),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn idx_magic_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.idx");
        write_idx_labels(&p, &[1]).unwrap();
        assert!(matches!(read_idx_images_raw(&p), Err(Error::Format(_))));
    }
}
