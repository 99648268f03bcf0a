use std::collections::BTreeMap;
use std::path::Path;

use crate::binio::{FormatError, Reader, Writer};
use crate::net::{NetError, NetSpec, Plan};

use super::{ActParams, Int8Store, QuantLayer, QuantParams, Result};

pub const PSQ1_MAGIC: &[u8; 4] = b"PSQ1";
pub const PSQ1_VERSION: u32 = 1;

pub fn encode_int8(store: &Int8Store, params: &QuantParams) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(PSQ1_MAGIC);
    w.u32(PSQ1_VERSION);
    w.u64(store.fingerprint);
    w.u32(params.activations.len() as u32);
    for (name, p) in &params.activations {
        w.name(name);
        w.f32(p.scale);
        w.i32(p.zero_point);
    }
    w.u32(store.layers.len() as u32);
    for layer in &store.layers {
        w.name(&layer.name);
        w.u32(layer.scales.len() as u32);
        w.f32s(&layer.scales);
        w.bytes(&layer.codes.iter().map(|&q| q as u8).collect::<Vec<_>>());
    }
    w.into_inner()
}

/// Payload lengths are not stored; layer shapes come from `spec`.
pub fn decode_int8(bytes: &[u8], spec: &NetSpec) -> Result<(Int8Store, QuantParams)> {
    let mut r = Reader::new(bytes);
    r.magic(PSQ1_MAGIC)?;
    let version = r.u32()?;
    if version != PSQ1_VERSION {
        return Err(FormatError::Version(version).into());
    }
    let fingerprint = r.u64()?;
    let expected = spec.fingerprint();
    if fingerprint != expected {
        return Err(NetError::FingerprintMismatch {
            expected,
            found: fingerprint,
        }
        .into());
    }
    let shapes: BTreeMap<String, [usize; 4]> = Plan::new(spec)?.parameters().into_iter().collect();

    let sites = r.u32()? as usize;
    let mut activations = BTreeMap::new();
    for _ in 0..sites {
        let name = r.name()?;
        let scale = r.f32()?;
        let zero_point = r.i32()?;
        if !(scale > 0.0 && scale.is_finite()) || !(-128..=127).contains(&zero_point) {
            return Err(FormatError::Malformed(format!(
                "site {name}: scale {scale}, zero-point {zero_point}"
            ))
            .into());
        }
        activations.insert(name, ActParams { scale, zero_point });
    }

    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(shapes.len()));
    for _ in 0..count {
        let name = r.name()?;
        let shape = *shapes
            .get(&name)
            .ok_or_else(|| NetError::UnexpectedLayer(name.clone()))?;
        let channels = r.u32()? as usize;
        if channels != shape[0] {
            return Err(FormatError::Malformed(format!(
                "layer {name}: {channels} channel scales for {} channels",
                shape[0]
            ))
            .into());
        }
        let scales = r.f32s(channels)?;
        if scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(FormatError::Malformed(format!("layer {name}: invalid scale")).into());
        }
        let len = shape.iter().product();
        let codes = r.take(len)?.iter().map(|&b| b as i8).collect();
        layers.push(QuantLayer {
            name,
            shape,
            scales,
            codes,
        });
    }
    r.finish()?;
    Ok((
        Int8Store {
            fingerprint,
            layers,
        },
        QuantParams { activations },
    ))
}

pub fn export_int8(store: &Int8Store, params: &QuantParams, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_int8(store, params))?;
    Ok(())
}

pub fn import_int8(path: impl AsRef<Path>, spec: &NetSpec) -> Result<(Int8Store, QuantParams)> {
    decode_int8(&std::fs::read(path)?, spec)
}
