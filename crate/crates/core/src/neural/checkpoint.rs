//! Flat weight checkpoint: per tensor, name length u16, name bytes, rank u8,
//! dims u32 each, f32 payload. Little-endian, no header.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::scalar::{f, s, Scalar};
use crate::tensor::Tensor;

use super::Parameterized;

pub fn write_checkpoint<T: Scalar>(module: &dyn Parameterized<T>, mut out: impl Write) -> Result<()> {
    let mut buf = Vec::new();
    let mut err = None;
    module.visit("", &mut |name, t| {
        if err.is_some() {
            return;
        }
        if name.len() > u16::MAX as usize || t.rank() > u8::MAX as usize {
            err = Some(Error::Format(format!("tensor {name} does not fit the checkpoint format")));
            return;
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.rank() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&(f(v) as f32).to_le_bytes());
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Parses every record into f64 tensors keyed by name.
pub fn read_checkpoint(mut input: impl Read) -> Result<BTreeMap<String, Tensor<f64>>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = at.checked_add(n).filter(|&e| e <= bytes.len());
        match end {
            Some(e) => {
                let s = &bytes[at..e];
                at = e;
                Ok(s)
            }
            None => Err(Error::Format("truncated checkpoint".into())),
        }
    };
    let mut out = BTreeMap::new();
    loop {
        let len = match take(2) {
            Ok(b) => u16::from_le_bytes([b[0], b[1]]) as usize,
            Err(_) => break,
        };
        let name = String::from_utf8(take(len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
        let rank = take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let b = take(4)?;
            shape.push(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize);
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if out.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    Ok(out)
}

/// Overwrites every parameter of `module` from the checkpoint. Names and
/// shapes must match exactly.
pub fn load_checkpoint<T: Scalar>(module: &mut dyn Parameterized<T>, input: impl Read) -> Result<()> {
    let mut stored = read_checkpoint(input)?;
    let mut err = None;
    module.visit_mut("", &mut |name, t| {
        if err.is_some() {
            return;
        }
        match stored.remove(&name) {
            Some(src) if src.shape() == t.shape() => {
                for (d, &v) in t.data_mut().iter_mut().zip(src.data()) {
                    *d = s(v);
                }
            }
            Some(src) => {
                err = Some(Error::ShapeMismatch {
                    left: src.shape().to_vec(),
                    right: t.shape().to_vec(),
                    context: "checkpoint tensor",
                })
            }
            None => err = Some(Error::Format(format!("checkpoint lacks tensor {name}"))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(extra) = stored.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra} in checkpoint")));
    }
    Ok(())
}
