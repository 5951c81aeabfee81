//! Versioned binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "CMATCHCK"
//! version  u32 LE
//! kind     u32 LE length + UTF-8
//! meta     u32 LE count, then (key, value) strings as u32 length + UTF-8
//! tensors  u32 LE count, then per tensor:
//!            name   u32 length + UTF-8
//!            ndim   u32, dims u64 x ndim
//!            data   f64 LE x prod(dims)
//! ```
//!
//! Values are stored bit-exactly, so a reload reproduces encoder outputs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::encoder::{EmbeddingModel, EncoderConfig, Projector};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CMATCHCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn from_array2(a: &Array2<f64>) -> Self {
        Self {
            shape: vec![a.nrows(), a.ncols()],
            data: a.iter().copied().collect(),
        }
    }

    pub fn from_array1(a: &Array1<f64>) -> Self {
        Self {
            shape: vec![a.len()],
            data: a.to_vec(),
        }
    }

    pub fn to_array2(&self) -> Result<Array2<f64>> {
        match self.shape.as_slice() {
            &[r, c] => Array2::from_shape_vec((r, c), self.data.clone()).map_err(|e| Error::Checkpoint(e.to_string())),
            s => Err(Error::Checkpoint(format!("expected a matrix, found shape {s:?}"))),
        }
    }

    pub fn to_array1(&self) -> Result<Array1<f64>> {
        match self.shape.as_slice() {
            &[_] => Ok(Array1::from(self.data.clone())),
            s => Err(Error::Checkpoint(format!("expected a vector, found shape {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Checkpoint(e.to_string()))
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            ..Default::default()
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n == name)
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{key}`")))?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("metadata `{key}` is not an integer")))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_str(w, &self.kind)?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for (k, v) in &self.meta {
            write_str(w, k)?;
            write_str(w, v)?;
        }
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_str(w, name)?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for d in &t.shape {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let kind = read_str(r)?;
        let mut meta = BTreeMap::new();
        for _ in 0..read_u32(r)? {
            let k = read_str(r)?;
            let v = read_str(r)?;
            meta.insert(k, v);
        }
        let mut tensors = Vec::new();
        for _ in 0..read_u32(r)? {
            let name = read_str(r)?;
            let ndim = read_u32(r)? as usize;
            let shape = (0..ndim)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor { shape, data }));
        }
        Ok(Self { kind, meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

pub const KIND_ENCODER: &str = "encoder";

/// Store encoder parameters (and optionally the projector) under `prefix`.
pub fn put_encoder(ck: &mut Checkpoint, model: &EmbeddingModel) {
    let c = model.config;
    ck.meta.insert("vocab_size".into(), c.vocab_size.to_string());
    ck.meta.insert("embed_dim".into(), c.embed_dim.to_string());
    ck.meta.insert("hidden_dim".into(), c.hidden_dim.to_string());
    ck.meta.insert("output_dim".into(), c.output_dim.to_string());
    ck.push("encoder.table", Tensor::from_array2(&model.table));
    ck.push("encoder.w1", Tensor::from_array2(&model.w1));
    ck.push("encoder.b1", Tensor::from_array1(&model.b1));
    ck.push("encoder.w2", Tensor::from_array2(&model.w2));
    ck.push("encoder.b2", Tensor::from_array1(&model.b2));
}

pub fn take_encoder(ck: &Checkpoint) -> Result<EmbeddingModel> {
    let config = EncoderConfig {
        vocab_size: ck.meta_usize("vocab_size")?,
        embed_dim: ck.meta_usize("embed_dim")?,
        hidden_dim: ck.meta_usize("hidden_dim")?,
        output_dim: ck.meta_usize("output_dim")?,
    };
    EmbeddingModel::from_parts(
        config,
        ck.get("encoder.table")?.to_array2()?,
        ck.get("encoder.w1")?.to_array2()?,
        ck.get("encoder.b1")?.to_array1()?,
        ck.get("encoder.w2")?.to_array2()?,
        ck.get("encoder.b2")?.to_array1()?,
    )
    .map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn put_projector(ck: &mut Checkpoint, p: &Projector) {
    ck.push("projector.w", Tensor::from_array2(&p.w));
    ck.push("projector.b", Tensor::from_array1(&p.b));
}

pub fn take_projector(ck: &Checkpoint) -> Result<Option<Projector>> {
    if !ck.has("projector.w") {
        return Ok(None);
    }
    Projector::from_parts(ck.get("projector.w")?.to_array2()?, ck.get("projector.b")?.to_array1()?).map(Some)
}

/// Save an encoder checkpoint, with the projector if given.
pub fn save_encoder(path: &Path, model: &EmbeddingModel, projector: Option<&Projector>) -> Result<()> {
    let mut ck = Checkpoint::new(KIND_ENCODER);
    put_encoder(&mut ck, model);
    if let Some(p) = projector {
        put_projector(&mut ck, p);
    }
    ck.save(path)
}

pub fn load_encoder(path: &Path) -> Result<(EmbeddingModel, Option<Projector>)> {
    let ck = Checkpoint::load(path)?;
    Ok((take_encoder(&ck)?, take_projector(&ck)?))
}
