//! Little-endian tensor container shared by model weights, quantized
//! weights, feature patches and datasets.
//!
//! ```text
//! header  : magic "TSED" (4 bytes) | version u16 | tensor count u32
//! tensor  : name length u16 | name (UTF-8) | dtype u8 (0 = f32, 1 = i8)
//!           | rank u8 | dims u32 x rank | raw data (f32 LE or i8)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TSED";
pub const VERSION: u16 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_I8: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    I8(Tensor<i8>),
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::I8(t) => t.shape(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn f32(name: impl Into<String>, t: Tensor<f32>) -> Self {
        Self { name: name.into(), data: TensorData::F32(t) }
    }

    pub fn i8(name: impl Into<String>, t: Tensor<i8>) -> Self {
        Self { name: name.into(), data: TensorData::I8(t) }
    }
}

pub fn write_tensors<W: Write>(mut w: W, tensors: &[NamedTensor]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(tensors.len()).map_err(|_| Error::InvalidArgument("too many tensors".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidArgument(format!("tensor name `{}` too long", t.name)))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name)?;
        let (tag, shape) = match &t.data {
            TensorData::F32(x) => (DTYPE_F32, x.shape()),
            TensorData::I8(x) => (DTYPE_I8, x.shape()),
        };
        w.write_all(&[tag])?;
        let rank = u8::try_from(shape.len())
            .map_err(|_| Error::InvalidArgument(format!("tensor `{}` rank too large", t.name)))?;
        w.write_all(&[rank])?;
        for &d in shape {
            let d =
                u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("tensor `{}` dim too large", t.name)))?;
            w.write_all(&d.to_le_bytes())?;
        }
        match &t.data {
            TensorData::F32(x) => {
                let mut buf = Vec::with_capacity(x.len() * 4);
                for v in x.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
            TensorData::I8(x) => {
                let buf: Vec<u8> = x.data().iter().map(|&v| v as u8).collect();
                w.write_all(&buf)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::Malformed("truncated payload".into()),
        _ => Error::Io(e),
    })
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<NamedTensor>> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Malformed("bad magic".into()));
    }
    let version = read_u16(&mut r)?;
    if version != VERSION {
        return Err(Error::Version { found: version, expected: VERSION });
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u16(&mut r)? as usize;
        let mut name = vec![0u8; len];
        read_exact(&mut r, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?;
        let tag = read_u8(&mut r)?;
        let rank = read_u8(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Malformed(format!("tensor `{name}` is too large")))?;
        let data = match tag {
            DTYPE_F32 => {
                let mut raw = vec![0u8; n.checked_mul(4).ok_or_else(|| Error::Malformed("size overflow".into()))?];
                read_exact(&mut r, &mut raw)?;
                let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
                TensorData::F32(Tensor::new(shape, values)?)
            }
            DTYPE_I8 => {
                let mut raw = vec![0u8; n];
                read_exact(&mut r, &mut raw)?;
                TensorData::I8(Tensor::new(shape, raw.into_iter().map(|b| b as i8).collect())?)
            }
            other => return Err(Error::Malformed(format!("unknown dtype tag {other}"))),
        };
        out.push(NamedTensor { name, data });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Malformed("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

pub fn save_tensors(path: impl AsRef<Path>, tensors: &[NamedTensor]) -> Result<()> {
    write_tensors(BufWriter::new(File::create(path)?), tensors)
}

pub fn load_tensors(path: impl AsRef<Path>) -> Result<Vec<NamedTensor>> {
    read_tensors(BufReader::new(File::open(path)?))
}

/// Looks up a tensor by name.
pub fn find<'a>(tensors: &'a [NamedTensor], name: &str) -> Result<&'a TensorData> {
    tensors
        .iter()
        .find(|t| t.name == name)
        .map(|t| &t.data)
        .ok_or_else(|| Error::Malformed(format!("missing tensor `{name}`")))
}

pub fn find_f32<'a>(tensors: &'a [NamedTensor], name: &str) -> Result<&'a Tensor<f32>> {
    match find(tensors, name)? {
        TensorData::F32(t) => Ok(t),
        TensorData::I8(_) => Err(Error::Malformed(format!("tensor `{name}` is i8, expected f32"))),
    }
}

pub fn find_i8<'a>(tensors: &'a [NamedTensor], name: &str) -> Result<&'a Tensor<i8>> {
    match find(tensors, name)? {
        TensorData::I8(t) => Ok(t),
        TensorData::F32(_) => Err(Error::Malformed(format!("tensor `{name}` is f32, expected i8"))),
    }
}
