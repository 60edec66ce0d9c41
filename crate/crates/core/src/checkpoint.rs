//! Binary checkpoint codec.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "LFC1"  u8 role
//! u32 in_channels  u32 num_classes  u32 base_width  u32 depth
//! u32 n_params   { u16 name_len, name, u32 n, u32 c, u32 h, u32 w, u64 bytes, f64 × len }
//! u32 n_bn       { u16 name_len, name, f64 eps, f64 momentum,
//!                  u32 len, u64 bytes, f64 × len (running mean),
//!                  u32 len, u64 bytes, f64 × len (running variance) }
//! ```
//!
//! Only values and statistics are stored; optimizer moments are not.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{CheckpointError, Result};
use crate::model::{ModelBranch, Role, SegNetConfig};
use crate::optim::Parameter;
use crate::tensor::{Shape, Tensor4};

pub const MAGIC: &[u8; 4] = b"LFC1";

fn role_byte(role: Role) -> u8 {
    match role {
        Role::Source => 0,
        Role::Target => 1,
        Role::Momentum => 2,
    }
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.extend_from_slice(&((values.len() * 8) as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(model: &ModelBranch) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(role_byte(model.role));
    let c = model.config;
    for v in [c.in_channels, c.num_classes, c.base_width, c.depth] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(model.parameters().len() as u32).to_le_bytes());
    for p in model.parameters() {
        put_name(&mut out, &p.name);
        for d in p.value.shape().dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f64s(&mut out, p.value.data());
    }
    out.extend_from_slice(&(model.bn_states().len() as u32).to_le_bytes());
    for s in model.bn_states() {
        put_name(&mut out, &s.name);
        out.extend_from_slice(&s.eps.to_le_bytes());
        out.extend_from_slice(&s.momentum.to_le_bytes());
        for stats in [&s.running_mean, &s.running_var] {
            out.extend_from_slice(&(stats.len() as u32).to_le_bytes());
            put_f64s(&mut out, stats);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let slice = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(slice)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn name(&mut self) -> Result<String, CheckpointError> {
        let len = self.u16()? as usize;
        let raw = self.take(len)?;
        core::str::from_utf8(raw)
            .map(String::from)
            .map_err(|_| CheckpointError::Malformed(String::from("layer name is not UTF-8")))
    }

    /// Reads a byte-count header and `expected` values, checking that the
    /// header agrees with the declared shape.
    fn f64s(&mut self, expected: usize, name: &str) -> Result<Vec<f64>, CheckpointError> {
        let bytes = self.u64()?;
        if bytes != (expected as u64) * 8 {
            return Err(CheckpointError::ShapeMismatch { name: name.into() });
        }
        let raw = self.take(expected * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
}

fn expect_name(found: &str, expected: &str) -> Result<(), CheckpointError> {
    if found != expected {
        return Err(CheckpointError::Malformed(format!(
            "expected layer `{expected}`, found `{found}`"
        )));
    }
    Ok(())
}

pub fn decode(bytes: &[u8]) -> Result<ModelBranch> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let role = match r.array::<1>()?[0] {
        0 => Role::Source,
        1 => Role::Target,
        2 => Role::Momentum,
        other => return Err(CheckpointError::Malformed(format!("unknown role {other}")).into()),
    };
    let config = SegNetConfig {
        in_channels: r.u32()?,
        num_classes: r.u32()?,
        base_width: r.u32()?,
        depth: r.u32()?,
    };
    if config.depth > 16 || config.base_width << config.depth > 1 << 16 {
        return Err(CheckpointError::Malformed(format!("implausible network config {config:?}")).into());
    }
    let skeleton = ModelBranch::build(config, 0)
        .map_err(|e| CheckpointError::Malformed(format!("{e}")))?;

    let n_params = r.u32()?;
    if n_params != skeleton.parameters().len() {
        return Err(CheckpointError::Malformed(format!(
            "expected {} parameter arrays, found {n_params}",
            skeleton.parameters().len()
        ))
        .into());
    }
    let mut params = Vec::with_capacity(n_params);
    for want in skeleton.parameters() {
        let name = r.name()?;
        expect_name(&name, &want.name)?;
        let shape = Shape::new(r.u32()?, r.u32()?, r.u32()?, r.u32()?);
        if shape != want.value.shape() {
            return Err(CheckpointError::ShapeMismatch { name }.into());
        }
        let data = r.f64s(shape.len(), &name)?;
        params.push(Parameter::new(name, Tensor4::from_vec(shape, data)?));
    }

    let n_bn = r.u32()?;
    if n_bn != skeleton.bn_states().len() {
        return Err(CheckpointError::Malformed(format!(
            "expected {} batch-norm layers, found {n_bn}",
            skeleton.bn_states().len()
        ))
        .into());
    }
    let mut bn = Vec::with_capacity(n_bn);
    for want in skeleton.bn_states() {
        let name = r.name()?;
        expect_name(&name, &want.name)?;
        let mut state = want.clone();
        state.eps = r.f64()?;
        state.momentum = r.f64()?;
        for slot in [&mut state.running_mean, &mut state.running_var] {
            let len = r.u32()?;
            if len != want.channels() {
                return Err(CheckpointError::ShapeMismatch { name }.into());
            }
            *slot = r.f64s(len, &name)?;
        }
        bn.push(state);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)).into());
    }
    Ok(ModelBranch::from_parts(config, role, params, bn))
}
