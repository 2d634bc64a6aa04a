//! Named parameters, initialisation, and the checkpoint container.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::config::KvConfig;
use crate::error::{dim_err, Error, Result};
use crate::tensor::{read_u32, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

/// Insertion-ordered parameter table with name lookup.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::State(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter { name: name.to_string(), value, frozen: false });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::State(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let p = self
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name}")))?;
        p.frozen = frozen;
        Ok(())
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
            n += 1;
        }
        n
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Overwrites values from `(name, tensor)` entries. Every parameter of the
    /// store must be present with a matching shape; extra entries are ignored.
    pub fn load_entries(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for p in &mut self.params {
            let t = lookup
                .get(p.name.as_str())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(dim_err!(
                    "parameter {} has shape {:?}, checkpoint has {:?}",
                    p.name,
                    p.value.shape(),
                    t.shape()
                ));
            }
            p.value = (*t).clone();
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }
}

/// Uniform fan-in scaled initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn kaiming_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    uniform(rng, shape, bound)
}

pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OMCK";
const CHECKPOINT_VERSION: u32 = 1;

/// A named-parameter table plus a key=value metadata block.
///
/// Layout: `OMCK`, `u32` version, `u32` metadata length, metadata bytes,
/// `u32` entry count, then per entry a `u32` name length, the UTF-8 name and
/// the tensor in its `OMTN` encoding.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub metadata: KvConfig,
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(metadata: KvConfig, entries: Vec<(String, Tensor)>) -> Self {
        Self { metadata, entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let meta = self.metadata.to_text();
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(meta.as_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&entry_bytes(name, t))?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta = read_string(r)?;
        let metadata = KvConfig::parse(&meta)?;
        let count = read_u32(r)? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = read_string(r)?;
            entries.push((name, Tensor::read_from(r)?));
        }
        Ok(Self { metadata, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// Serialized bytes of every entry whose name starts with `prefix`, in
    /// table order. Used to compare sub-models across checkpoints.
    pub fn entry_bytes_with_prefix(&self, prefix: &str) -> Vec<u8> {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .flat_map(|(n, t)| entry_bytes(n, t))
            .collect()
    }

    pub fn hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

fn entry_bytes(name: &str, t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + name.len() + t.len() * 4);
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&t.to_bytes());
    out
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("invalid UTF-8 in checkpoint".into()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[1])).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_order_and_metadata() {
        let mut meta = KvConfig::default();
        meta.set("kind", "ae");
        let ck = Checkpoint::new(
            meta,
            vec![
                ("b.w".into(), Tensor::new(vec![2], vec![1.5, -2.0]).unwrap()),
                ("a.w".into(), Tensor::zeros(&[1, 3])),
            ],
        );
        let back = Checkpoint::read_from(&mut ck.to_bytes().as_slice()).unwrap();
        assert_eq!(back.metadata.get("kind"), Some("ae"));
        assert_eq!(back.entries, ck.entries);
        assert_eq!(back.hash(), ck.hash());
    }

    #[test]
    fn load_entries_checks_shapes() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2, 2])).unwrap();
        let bad = vec![("w".to_string(), Tensor::zeros(&[4]))];
        assert!(s.load_entries(&bad).is_err());
        assert!(s.load_entries(&[]).is_err());
    }

    #[test]
    fn kaiming_bound_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = kaiming_uniform(&mut rng, &[16, 16], 16);
        assert!(t.data().iter().all(|v| v.abs() <= 0.25));
    }
}
