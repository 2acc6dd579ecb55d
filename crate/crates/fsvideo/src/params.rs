//! Named parameter store, tape binding, and the FSVM checkpoint container.
//!
//! Models own [`ParamId`] handles into a [`ParamSet`]; each training step
//! binds the whole set onto a fresh tape, runs forward/backward, and feeds
//! the collected gradients to the optimizer. Checkpoints serialize the set
//! as a manifest of parameter names with one FSVT record per entry.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::fsvt;
use crate::numerics::rng::SplitRng;
use crate::numerics::tape::{Tape, Value};
use crate::numerics::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 4] = b"FSVM";
const MAX_NAME_LEN: u32 = 4096;
const MAX_ENTRIES: u32 = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Default, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(id)
    }

    /// Parameter initialized from a stream derived from the name, so models
    /// built with the same seed share values wherever names and shapes match.
    pub fn add_normal(&mut self, name: &str, shape: &[usize], std: f64, seed: u64) -> ParamId {
        let mut rng = SplitRng::new(seed, 0).split_named(name);
        let t = Tensor::randn(shape, &mut rng).map(|v| v * std);
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    /// Handle for the `ord`-th parameter in insertion order.
    pub fn id_of_ordinal(&self, ord: usize) -> ParamId {
        assert!(ord < self.tensors.len());
        ParamId(ord)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    /// Total scalar count across all parameters.
    pub fn total_elems(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Total scalar count over parameters whose name passes `pred`.
    pub fn elems_matching(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.iter()
            .filter(|(n, _)| pred(n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Bind every parameter onto `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        Binding {
            values: self.tensors.iter().map(|t| tape.param(t.clone())).collect(),
        }
    }

    /// Bind every parameter as a constant (frozen) leaf.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Binding {
        Binding {
            values: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, tensor) in self.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            fsvt::write_tensor(&mut w, tensor)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<ParamSet> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::malformed("checkpoint", "truncated magic"))?;
        if &magic != CKPT_MAGIC {
            return Err(Error::malformed("checkpoint", "bad magic bytes"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)
            .map_err(|_| Error::malformed("checkpoint", "truncated entry count"))?;
        let count = u32::from_le_bytes(b4);
        if count > MAX_ENTRIES {
            return Err(Error::malformed("checkpoint", format!("entry count {count} too large")));
        }
        let mut set = ParamSet::new();
        for _ in 0..count {
            r.read_exact(&mut b4)
                .map_err(|_| Error::malformed("checkpoint", "truncated name length"))?;
            let name_len = u32::from_le_bytes(b4);
            if name_len > MAX_NAME_LEN {
                return Err(Error::malformed("checkpoint", format!("name length {name_len} too large")));
            }
            let mut name_bytes = vec![0u8; name_len as usize];
            r.read_exact(&mut name_bytes)
                .map_err(|_| Error::malformed("checkpoint", "truncated name"))?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::malformed("checkpoint", "parameter name is not UTF-8"))?;
            if set.index.contains_key(&name) {
                return Err(Error::malformed("checkpoint", format!("duplicate parameter `{name}`")));
            }
            let tensor = fsvt::read_tensor(r)?;
            set.add(name, tensor);
        }
        Ok(set)
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<ParamSet> {
        let mut r = BufReader::new(File::open(path)?);
        let set = Self::read(&mut r)?;
        let mut rest = [0u8; 1];
        match r.read(&mut rest)? {
            0 => Ok(set),
            _ => Err(Error::malformed("checkpoint", "trailing bytes")),
        }
    }

    /// Manifest: the ordered list of parameter names.
    pub fn manifest(&self) -> Vec<String> {
        self.names.clone()
    }
}

/// Tape handles for a bound [`ParamSet`].
pub struct Binding {
    values: Vec<Value>,
}

impl Binding {
    pub fn get(&self, id: ParamId) -> Value {
        self.values[id.0]
    }

    /// Gradients per parameter ordinal after a backward pass; `None` where
    /// no gradient reached the leaf.
    pub fn grads(&self, tape: &Tape) -> Vec<Option<Tensor>> {
        self.values.iter().map(|&v| tape.grad(v).cloned()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_init_is_shared_across_sets() {
        let mut a = ParamSet::new();
        let mut b = ParamSet::new();
        a.add_normal("block.0.w", &[3, 3], 0.1, 7);
        a.add_normal("block.1.w", &[2], 0.1, 7);
        b.add_normal("block.1.w", &[2], 0.1, 7);
        b.add_normal("block.0.w", &[3, 3], 0.1, 7);
        let ida = a.id_of("block.0.w").unwrap();
        let idb = b.id_of("block.0.w").unwrap();
        assert_eq!(a.tensor(ida).data(), b.tensor(idb).data());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_manifest_and_bits() {
        let mut set = ParamSet::new();
        set.add_normal("enc.w", &[2, 3], 0.5, 1);
        set.add_normal("enc.b", &[3], 0.5, 1);
        set.add("meta.steps", Tensor::scalar(123.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.fsvm");
        set.save(&path).unwrap();
        let back = ParamSet::load(&path).unwrap();
        assert_eq!(back.manifest(), vec!["enc.w", "enc.b", "meta.steps"]);
        for (name, tensor) in set.iter() {
            let id = back.id_of(name).unwrap();
            assert_eq!(back.tensor(id), tensor);
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        assert!(ParamSet::read(&mut &b"XXXX"[..]).is_err());
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&(u32::MAX).to_le_bytes());
        assert!(ParamSet::read(&mut buf.as_slice()).is_err());
    }
}
