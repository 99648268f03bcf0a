use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{FormatError, Reader, Writer};
use crate::tensor::Tensor;

use super::plan::Plan;
use super::{NetError, NetSpec};

pub const PSW1_MAGIC: &[u8; 4] = b"PSW1";
pub const PSW1_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Named float parameters in build order, tagged with the layout fingerprint.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore {
    fingerprint: u64,
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl WeightStore {
    pub fn new(fingerprint: u64, entries: Vec<(String, Tensor)>) -> Result<Self, NetError> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (name, _)) in entries.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(NetError::DuplicateLayer(name.clone()));
            }
        }
        Ok(Self {
            fingerprint,
            entries,
            index,
        })
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, NetError> {
        self.get(name)
            .ok_or_else(|| NetError::MissingLayer(name.to_owned()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    /// Replaces a tensor, keeping its position. The shape must not change.
    pub fn replace(&mut self, name: &str, tensor: Tensor) -> Result<(), NetError> {
        let slot = self
            .get_mut(name)
            .ok_or_else(|| NetError::MissingLayer(name.to_owned()))?;
        if slot.shape() != tensor.shape() {
            return Err(NetError::ShapeMismatch {
                layer: name.to_owned(),
                expected: slot.shape().to_vec(),
                actual: tensor.shape().to_vec(),
            });
        }
        *slot = tensor;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Copy with every value replaced by `f(name, value)`.
    pub fn map(&self, f: impl Fn(&str, f32) -> f32) -> WeightStore {
        let entries = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), t.map(|v| f(n, v))))
            .collect();
        WeightStore {
            fingerprint: self.fingerprint,
            entries,
            index: self.index.clone(),
        }
    }

    /// Checks that the store carries exactly the layers `spec` demands.
    pub fn validate(&self, spec: &NetSpec) -> Result<(), NetError> {
        let expected = spec.fingerprint();
        if self.fingerprint != expected {
            return Err(NetError::FingerprintMismatch {
                expected,
                found: self.fingerprint,
            });
        }
        let params = Plan::new(spec)?.parameters();
        for (name, shape) in &params {
            let t = self.require(name)?;
            if t.shape() != *shape {
                return Err(NetError::ShapeMismatch {
                    layer: name.clone(),
                    expected: shape.to_vec(),
                    actual: t.shape().to_vec(),
                });
            }
        }
        if params.len() != self.entries.len() {
            let known: std::collections::HashSet<_> = params.iter().map(|(n, _)| n).collect();
            let extra = self
                .entries
                .iter()
                .find(|(n, _)| !known.contains(n))
                .map(|(n, _)| n.clone())
                .unwrap_or_default();
            return Err(NetError::UnexpectedLayer(extra));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(PSW1_MAGIC);
        w.u32(PSW1_VERSION);
        w.u64(self.fingerprint);
        w.u32(self.entries.len() as u32);
        for (name, t) in &self.entries {
            w.name(name);
            w.u8(DTYPE_F32);
            let dims = natural_dims(t.shape());
            w.u8(dims.len() as u8);
            for d in &dims {
                w.u32(*d as u32);
            }
            w.f32s(t.data());
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetError> {
        let mut r = Reader::new(bytes);
        r.magic(PSW1_MAGIC)?;
        let version = r.u32()?;
        if version != PSW1_VERSION {
            return Err(FormatError::Version(version).into());
        }
        let fingerprint = r.u64()?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.name()?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(FormatError::Malformed(format!("layer {name}: dtype {dtype}")).into());
            }
            let rank = r.u8()? as usize;
            if !(1..=4).contains(&rank) {
                return Err(FormatError::Malformed(format!("layer {name}: rank {rank}")).into());
            }
            let mut shape = [1usize; 4];
            for d in shape.iter_mut().take(rank) {
                *d = r.u32()? as usize;
            }
            let len: usize = shape.iter().product();
            let data = r.f32s(len)?;
            let t = Tensor::new(shape, data)
                .map_err(|e| FormatError::Malformed(format!("layer {name}: {e}")))?;
            entries.push((name, t));
        }
        r.finish()?;
        Self::new(fingerprint, entries)
    }
}

/// Tensor extents with trailing unit axes dropped (at least rank 1).
fn natural_dims(shape: [usize; 4]) -> Vec<usize> {
    let mut dims = shape.to_vec();
    while dims.len() > 1 && dims.last() == Some(&1) {
        dims.pop();
    }
    dims
}

/// Seeded He-uniform kernels (`bound = sqrt(6 / fan_in)`) and zero biases.
pub fn build(spec: &NetSpec, seed: u64) -> Result<WeightStore, NetError> {
    let plan = Plan::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = plan
        .parameters()
        .into_iter()
        .map(|(name, shape)| {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
                let bound = (6.0 / fan_in).sqrt();
                let data = (0..shape.iter().product::<usize>())
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Tensor::new(shape, data).expect("shape and data agree")
            };
            (name, t)
        })
        .collect();
    WeightStore::new(spec.fingerprint(), entries)
}

pub fn save_weights(store: &WeightStore, path: impl AsRef<Path>) -> Result<(), NetError> {
    std::fs::write(path, store.to_bytes())?;
    Ok(())
}

/// Reads a PSW1 file without checking it against any spec.
pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightStore, NetError> {
    WeightStore::from_bytes(&std::fs::read(path)?)
}

/// Reads a PSW1 file and checks fingerprint and layer shapes against `spec`.
pub fn load_weights_for(path: impl AsRef<Path>, spec: &NetSpec) -> Result<WeightStore, NetError> {
    let store = load_weights(path)?;
    store.validate(spec)?;
    Ok(store)
}
