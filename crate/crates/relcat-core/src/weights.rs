//! Bit-exact weight persistence.
//!
//! Layout: magic `RELCAT01` (8 bytes), u32 LE tensor count, then per tensor:
//! u16 LE name length, UTF-8 name, u8 rank, rank x u32 LE dims, and the
//! row-major 32-bit little-endian IEEE-754 payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::ParamSet;
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"RELCAT01";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

pub fn save_weights(path: impl AsRef<Path>, tensors: &[NamedTensor]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        f.write_all(&(name.len() as u16).to_le_bytes())?;
        f.write_all(name)?;
        f.write_all(&[t.dims.len() as u8])?;
        let mut expected = 1usize;
        for &d in &t.dims {
            f.write_all(&d.to_le_bytes())?;
            expected *= d as usize;
        }
        assert_eq!(expected, t.data.len(), "tensor payload matches dims");
        for &v in &t.data {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], context: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::WeightTruncated {
                context: context.to_string(),
            }
        } else {
            Error::Io(e)
        }
    })
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Vec<NamedTensor>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact(&mut f, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::WeightMagicMismatch {
            found: magic.to_vec(),
        });
    }
    let mut count_buf = [0u8; 4];
    read_exact(&mut f, &mut count_buf, "tensor count")?;
    let count = u32::from_le_bytes(count_buf) as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let mut len_buf = [0u8; 2];
        read_exact(&mut f, &mut len_buf, &format!("tensor {i} name length"))?;
        let name_len = u16::from_le_bytes(len_buf) as usize;
        let mut name_buf = vec![0u8; name_len];
        read_exact(&mut f, &mut name_buf, &format!("tensor {i} name"))?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Other(format!("tensor {i} name is not UTF-8")))?;
        let mut rank_buf = [0u8; 1];
        read_exact(&mut f, &mut rank_buf, &format!("tensor `{name}` rank"))?;
        let rank = rank_buf[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        let mut n = 1usize;
        for d in 0..rank {
            let mut dim_buf = [0u8; 4];
            read_exact(&mut f, &mut dim_buf, &format!("tensor `{name}` dim {d}"))?;
            let dim = u32::from_le_bytes(dim_buf);
            dims.push(dim);
            n = n.saturating_mul(dim as usize);
        }
        let mut payload = vec![0u8; n * 4];
        read_exact(&mut f, &mut payload, &format!("tensor `{name}` payload"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(NamedTensor { name, dims, data });
    }
    Ok(tensors)
}

/// Persist a parameter set in canonical order (all tensors rank 2).
pub fn save_param_set(path: impl AsRef<Path>, params: &ParamSet<f32>) -> Result<()> {
    let tensors: Vec<NamedTensor> = params
        .iter()
        .map(|(name, m)| NamedTensor {
            name: name.to_string(),
            dims: vec![m.rows() as u32, m.cols() as u32],
            data: m.data().to_vec(),
        })
        .collect();
    save_weights(path, &tensors)
}

/// Load a weight file into an existing parameter skeleton. Shape mismatches
/// are reported for the first offending tensor in canonical order; missing
/// and unexpected tensors are distinct errors.
pub fn load_into_param_set(path: impl AsRef<Path>, params: &mut ParamSet<f32>) -> Result<()> {
    let tensors = load_weights(path)?;
    let as_matrices: Vec<(String, Matrix<f32>)> = tensors
        .into_iter()
        .map(|t| {
            if t.dims.len() != 2 {
                return Err(Error::WeightShapeMismatch {
                    name: t.name.clone(),
                    expected: vec![0, 0],
                    found: t.dims.iter().map(|&d| d as usize).collect(),
                });
            }
            Ok((
                t.name,
                Matrix::from_vec(t.dims[0] as usize, t.dims[1] as usize, t.data),
            ))
        })
        .collect::<Result<_>>()?;
    params.load_from(&as_matrices)
}
