//! Network checkpoint encoding.
//!
//! Layout (little-endian): magic `ITOSRNN1`, `u32` layer count, then per layer
//! `u32 in_dim, u32 out_dim, u8 activation`, then per layer the weights
//! (row-major, `in x out`) followed by the bias, all as `f64`.

use std::io::{Read, Write};

use super::{Activation, DenseLayer, DenseNet, NnError};
use crate::matrix::Matrix;

pub const NET_MAGIC: &[u8; 8] = b"ITOSRNN1";

fn io_err(e: std::io::Error) -> NnError {
    NnError::Checkpoint(e.to_string())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>, NnError> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(io_err)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

impl DenseNet {
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<(), NnError> {
        let mut out = Vec::with_capacity(16 + self.param_count() * 8);
        out.extend_from_slice(NET_MAGIC);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.in_dim() as u32).to_le_bytes());
            out.extend_from_slice(&(l.out_dim() as u32).to_le_bytes());
            out.push(l.activation.tag());
        }
        for l in &self.layers {
            for v in l.weight.as_slice().iter().chain(&l.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&out).map_err(io_err)
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self, NnError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != NET_MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let count = read_u32(r)? as usize;
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let i = read_u32(r)? as usize;
            let o = read_u32(r)? as usize;
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag).map_err(io_err)?;
            let act = Activation::from_tag(tag[0])
                .ok_or_else(|| NnError::Checkpoint(format!("unknown activation tag {}", tag[0])))?;
            shapes.push((i, o, act));
        }
        let mut layers = Vec::with_capacity(count);
        for (i, o, activation) in shapes {
            let weight = Matrix::from_vec(i, o, read_f64s(r, i * o)?).expect("sized read");
            let bias = read_f64s(r, o)?;
            layers.push(DenseLayer {
                weight,
                bias,
                activation,
            });
        }
        DenseNet::from_layers(layers)
    }
}
