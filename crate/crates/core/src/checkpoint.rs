//! Little-endian binary checkpoints of the component pool and adapters.
//!
//! Layout:
//!
//! ```text
//! "DOCPCA1\0"                      8 bytes
//! dim, count, k_max                u32 each
//! amnesic, eps, delta              f64 each
//! count x { age u32, task u32, dim x f64 }
//! adapter_count                    u32
//! adapter_count x { m u32, n u32, r u32, W (m*n f64), B (m*r f64), A (r*n f64) }
//! ```
//!
//! Matrices are row-major. The adapter section is optional when reading a
//! bare pool via [`decode_pool`].

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::adapter::{Activation, LoraAdapter, ToyNetwork};
use crate::error::{Error, Result};
use crate::pca::{ComponentPool, PcaParams};

pub const MAGIC: &[u8; 8] = b"DOCPCA1\0";

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Validation(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_matrix(buf: &mut Vec<u8>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            put_f64(buf, m[(i, j)]);
        }
    }
}

pub fn encode_pool(pool: &ComponentPool, buf: &mut Vec<u8>) -> Result<()> {
    buf.extend_from_slice(MAGIC);
    put_u32(buf, pool.dim())?;
    put_u32(buf, pool.len())?;
    put_u32(buf, pool.k_max())?;
    let p = pool.params();
    put_f64(buf, p.amnesic);
    put_f64(buf, p.tracking_eps);
    put_f64(buf, p.residual_delta);
    for ((v, &age), &task) in pool.components().iter().zip(pool.ages()).zip(pool.creation_tasks()) {
        put_u32(buf, age as usize)?;
        put_u32(buf, task as usize)?;
        for &x in v.iter() {
            put_f64(buf, x);
        }
    }
    Ok(())
}

pub fn encode_checkpoint(net: &ToyNetwork, pool: &ComponentPool) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    encode_pool(pool, &mut buf)?;
    put_u32(&mut buf, net.module_count())?;
    for ad in net.adapters() {
        put_u32(&mut buf, ad.out_dim())?;
        put_u32(&mut buf, ad.in_dim())?;
        put_u32(&mut buf, ad.rank())?;
        put_matrix(&mut buf, ad.base_weight());
        put_matrix(&mut buf, ad.factor_b());
        put_matrix(&mut buf, ad.factor_a());
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.offset.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.offset..end];
                self.offset = end;
                Ok(s)
            }
            None => Err(Error::Format {
                offset: self.offset,
                message: format!("truncated while reading {what}"),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<DMatrix<f64>> {
        let needed = rows.checked_mul(cols).and_then(|c| c.checked_mul(8));
        if needed.is_none_or(|n| self.offset + n > self.bytes.len()) {
            return Err(Error::Format {
                offset: self.offset,
                message: format!("truncated while reading {what} ({rows}x{cols})"),
            });
        }
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = self.f64(what)?;
            }
        }
        Ok(m)
    }

    fn format_err(&self, at: usize, message: impl Into<String>) -> Error {
        Error::Format {
            offset: at,
            message: message.into(),
        }
    }
}

fn read_pool(r: &mut Reader<'_>) -> Result<ComponentPool> {
    let magic = r.take(8, "magic")?;
    if magic != MAGIC {
        return Err(r.format_err(0, "bad magic"));
    }
    let dim = r.u32("dim")?;
    let count = r.u32("component count")?;
    let k_max = r.u32("k_max")?;
    let params_at = r.offset;
    let params = PcaParams {
        amnesic: r.f64("amnesic factor")?,
        tracking_eps: r.f64("tracking factor")?,
        residual_delta: r.f64("residual threshold")?,
        ..PcaParams::default()
    };
    params
        .validate()
        .map_err(|e| r.format_err(params_at, e.to_string()))?;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for k in 0..count {
        let at = r.offset;
        let age = r.u32("component age")? as u32;
        let task = r.u32("component task")? as u32;
        let mut v = DVector::zeros(dim);
        for i in 0..dim {
            v[i] = r.f64("component data")?;
        }
        if !(v.norm() > 0.0) {
            return Err(r.format_err(at, format!("component {k} has zero norm")));
        }
        entries.push((age, task, v));
    }
    ComponentPool::from_parts(dim, k_max, params, entries).map_err(|e| r.format_err(r.offset, e.to_string()))
}

/// Reads only the pool section; trailing bytes are ignored.
pub fn decode_pool(bytes: &[u8]) -> Result<ComponentPool> {
    read_pool(&mut Reader { bytes, offset: 0 })
}

pub fn decode_checkpoint(bytes: &[u8], activation: Activation) -> Result<(ToyNetwork, ComponentPool)> {
    let mut r = Reader { bytes, offset: 0 };
    let pool = read_pool(&mut r)?;
    let count = r.u32("adapter count")?;
    let mut adapters = Vec::with_capacity(count.min(1 << 10));
    for idx in 0..count {
        let at = r.offset;
        let m = r.u32("adapter m_dim")?;
        let n = r.u32("adapter n_dim")?;
        let rank = r.u32("adapter rank")?;
        let w = r.matrix(m, n, "base weight")?;
        let b = r.matrix(m, rank, "factor B")?;
        let a = r.matrix(rank, n, "factor A")?;
        adapters.push(LoraAdapter::new(w, b, a, idx).map_err(|e| r.format_err(at, e.to_string()))?);
    }
    if r.offset != bytes.len() {
        return Err(r.format_err(r.offset, "trailing bytes after last adapter"));
    }
    let net = ToyNetwork::from_adapters(adapters, activation).map_err(|e| r.format_err(r.offset, e.to_string()))?;
    if net.module_out_dims().iter().sum::<usize>() != pool.dim() {
        return Err(r.format_err(0, "pool dimension does not match adapter outputs"));
    }
    Ok((net, pool))
}

pub fn save_checkpoint(net: &ToyNetwork, pool: &ComponentPool, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_checkpoint(net, pool)?;
    std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn load_checkpoint(path: impl AsRef<Path>, activation: Activation) -> Result<(ToyNetwork, ComponentPool)> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    decode_checkpoint(&bytes, activation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::NetworkShape;

    fn sample() -> (ToyNetwork, ComponentPool) {
        let shape = NetworkShape {
            input_dim: 5,
            hidden_dim: 6,
            hidden_layers: 1,
            class_count: 3,
            rank: 2,
            activation: Activation::Tanh,
        };
        let mut net = ToyNetwork::init(&shape, 11).unwrap();
        net.adapters_mut()[1].factor_b_mut()[(0, 1)] = 0.125;
        let mut pool = ComponentPool::new(9, 48, PcaParams::default());
        pool.update_vector(&DVector::from_fn(9, |i, _| i as f64 - 3.3), 0).unwrap();
        pool.update_vector(&DVector::from_fn(9, |i, _| (i as f64).sin()), 1).unwrap();
        pool.set_tracking_eps(0.0625);
        (net, pool)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (net, pool) = sample();
        let bytes = encode_checkpoint(&net, &pool).unwrap();
        let (net2, pool2) = decode_checkpoint(&bytes, Activation::Tanh).unwrap();
        assert_eq!(net2, net);
        assert_eq!(pool2, pool);
        assert_eq!(encode_checkpoint(&net2, &pool2).unwrap(), bytes);
        assert_eq!(&bytes[..8], MAGIC);
    }

    #[test]
    fn truncation_reports_offset() {
        let (net, pool) = sample();
        let bytes = encode_checkpoint(&net, &pool).unwrap();
        for cut in [0, 7, 12, 40, bytes.len() - 1] {
            match decode_checkpoint(&bytes[..cut], Activation::Tanh) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut),
                other => panic!("expected format error at {cut}, got {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let (net, pool) = sample();
        let mut bytes = encode_checkpoint(&net, &pool).unwrap();
        bytes[3] = b'X';
        assert!(matches!(decode_checkpoint(&bytes, Activation::Tanh), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn header_layout() {
        let (_, pool) = sample();
        let mut buf = Vec::new();
        encode_pool(&pool, &mut buf).unwrap();
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 9);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), pool.len() as u32);
        assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()), 48);
        assert_eq!(f64::from_le_bytes(buf[20..28].try_into().unwrap()), 2.0);
        assert_eq!(f64::from_le_bytes(buf[28..36].try_into().unwrap()), 0.0625);
        assert_eq!(f64::from_le_bytes(buf[36..44].try_into().unwrap()), 0.1);
        assert_eq!(buf.len(), 44 + pool.len() * (8 + 9 * 8));
        assert_eq!(decode_pool(&buf).unwrap(), pool);
    }
}
