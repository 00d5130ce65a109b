//! Model parameters: the flat, ordered tensor collection FedAvg aggregates,
//! the SGD update, and the FPM1 on-disk container.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Real, Tensor};
use crate::error::{Error, ParseError, Result};

pub const FPM_MAGIC: &[u8; 4] = b"FPM1";

/// One named parameter tensor with its gradient buffer.
#[derive(Debug, Clone)]
pub struct Param<R> {
    pub name: String,
    pub value: Tensor<R>,
    pub grad: Option<Tensor<R>>,
}

/// Flat, ordered collection of parameter tensors. Order is the identity used
/// by aggregation and serialization.
#[derive(Debug, Clone, Default)]
pub struct ModelParams<R> {
    params: Vec<Param<R>>,
}

impl<R: Real> ModelParams<R> {
    pub fn new() -> Self {
        ModelParams { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<R>) {
        self.params.push(Param { name: name.into(), value, grad: None });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<R>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<R>> {
        self.params.iter_mut()
    }

    pub fn get(&self, i: usize) -> &Param<R> {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Param<R> {
        &mut self.params[i]
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Accumulate a gradient for parameter `i` (adds if one is present).
    pub fn accumulate_grad(&mut self, i: usize, g: &Tensor<R>) -> Result<()> {
        let p = &mut self.params[i];
        if g.shape() != p.value.shape() {
            return Err(Error::Dimension(format!(
                "gradient shape {:?} does not match parameter {} shape {:?}",
                g.shape(),
                p.name,
                p.value.shape()
            )));
        }
        match &mut p.grad {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + b;
                }
            }
            None => p.grad = Some(g.clone()),
        }
        Ok(())
    }

    /// θ ← θ − lr·∇θ, elementwise; gradients are cleared afterwards.
    /// Every parameter must hold a gradient.
    pub fn sgd_step(&mut self, lr: R) -> Result<()> {
        for p in &self.params {
            if p.grad.is_none() {
                return Err(Error::Contract(format!(
                    "sgd_step: parameter {} has no gradient",
                    p.name
                )));
            }
        }
        for p in &mut self.params {
            let g = p.grad.take().unwrap();
            for (v, &d) in p.value.data_mut().iter_mut().zip(g.data()) {
                *v = *v - lr * d;
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    pub fn cast<S: Real>(&self) -> ModelParams<S> {
        ModelParams {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), grad: None })
                .collect(),
        }
    }

    /// Order-sensitive checksum over parameter value bits. Used to assert
    /// that read-only paths did not mutate the model.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64; // FNV-1a offset basis
        let mut absorb = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        };
        for p in &self.params {
            absorb(p.name.as_bytes());
            for &v in p.value.data() {
                let f: f64 = v.into();
                absorb(&f.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Write parameters as an FPM1 container: magic, tensor count, then per
/// tensor rank + extents and a little-endian f32 payload.
pub fn write_fpm<R: Real>(path: &Path, params: &ModelParams<R>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FPM_MAGIC)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params.iter() {
        w.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in p.value.data() {
            let f: f64 = v.into();
            w.write_all(&(f as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read an FPM1 container. Tensor names are positional (`t0`, `t1`, ...);
/// callers that know the architecture re-attach meaningful names.
pub fn read_fpm(path: &Path) -> Result<ModelParams<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut magic, 4)?;
    if &magic != FPM_MAGIC {
        return Err(ParseError::BadMagic {
            expected: String::from_utf8_lossy(FPM_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        }
        .into());
    }
    let count = read_u32(&mut r)? as usize;
    if count > 1 << 20 {
        return Err(ParseError::DimsOverflow(format!("tensor count {count}")).into());
    }
    let mut params = ModelParams::new();
    for i in 0..count {
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(ParseError::DimsOverflow(format!("tensor rank {rank}")).into());
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = read_u32(&mut r)? as u64;
            numel = numel.saturating_mul(d);
            shape.push(d as usize);
        }
        if numel > 1 << 31 {
            return Err(ParseError::DimsOverflow(format!("tensor numel {numel}")).into());
        }
        let mut data = vec![0f32; numel as usize];
        let mut buf = [0u8; 4];
        for v in data.iter_mut() {
            read_exact_or_truncated(&mut r, &mut buf, 4)?;
            *v = f32::from_le_bytes(buf);
        }
        params.push(format!("t{i}"), Tensor::new(shape, data)?);
    }
    Ok(params)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact_or_truncated(r, &mut buf, 4)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8], needed: u64) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Parse(ParseError::Truncated { needed, found: 0 })
        } else {
            Error::Io(e)
        }
    })
}
