//! Named-tensor checkpoint container.
//!
//! Layout: the 8-byte magic `NASBNNCK`, a little-endian `u32` version, a
//! `u64` header length, a JSON header, then each tensor's `f32` values in
//! little-endian order in header order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::searchspace::{Architecture, SearchSpace};
use crate::supernet::{NetConfig, Subnet, Supernet};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"NASBNNCK";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Supernet,
    Subnet,
}

/// Seed and position of the counter-based training RNG.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: CheckpointKind,
    pub space_id: String,
    pub epoch: usize,
    pub rng_state: RngState,
    pub config_hash: String,
    pub space: SearchSpace,
    pub net_config: NetConfig,
    /// The architecture of an extracted subnet.
    #[serde(default)]
    pub arch: Option<Architecture>,
    /// Free-form metadata (optimizer step count, accuracies, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    fn new(kind: CheckpointKind, net: &Supernet, space: &SearchSpace, arch: Option<Architecture>) -> Self {
        let named = net.named_tensors();
        let tensors_meta = named
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect();
        let tensors = named.into_iter().map(|(n, t)| (n, t.clone())).collect();
        Self {
            header: Header {
                kind,
                space_id: space.id.clone(),
                epoch: 0,
                rng_state: RngState::default(),
                config_hash: String::new(),
                space: space.clone(),
                net_config: *net.config(),
                arch,
                extra: serde_json::Value::Null,
                tensors: tensors_meta,
            },
            tensors,
        }
    }

    pub fn from_supernet(net: &Supernet) -> Self {
        Self::new(CheckpointKind::Supernet, net, net.space(), None)
    }

    /// The subnet's tensors, keyed to its source space and architecture.
    pub fn from_subnet(sub: &Subnet) -> Self {
        Self::new(
            CheckpointKind::Subnet,
            &sub.net,
            &sub.source_space,
            Some(sub.arch.clone()),
        )
    }

    /// Adds a tensor that is not part of the network (e.g. optimizer state).
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        self.header.tensors.retain(|e| e.name != name);
        self.header.tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
        });
        self.tensors.insert(name, t);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let io = |e| Error::io(path, e);
        let header = serde_json::to_vec(&self.header)?;
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
            w.write_all(MAGIC).map_err(io)?;
            w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
            w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
            w.write_all(&header).map_err(io)?;
            for e in &self.header.tensors {
                for v in self.tensors[&e.name].data() {
                    w.write_all(&v.to_le_bytes()).map_err(io)?;
                }
            }
            w.flush().map_err(io)?;
        }
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(io)?;
        if u32::from_le_bytes(b4) != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {}",
                u32::from_le_bytes(b4)
            )));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(io)?;
        let mut header = vec![0u8; u64::from_le_bytes(b8) as usize];
        r.read_exact(&mut header).map_err(io)?;
        let header: Header = serde_json::from_slice(&header)?;
        let mut tensors = BTreeMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)
                .map_err(|_| Error::Checkpoint(format!("truncated data for {}", e.name)))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(e.name.clone(), Tensor::from_vec(&e.shape, data)?);
        }
        Ok(Self { header, tensors })
    }

    pub fn to_supernet(&self) -> Result<Supernet> {
        if self.header.kind != CheckpointKind::Supernet {
            return Err(Error::Checkpoint("expected a supernet checkpoint".into()));
        }
        let mut net = Supernet::build(&self.header.space, self.header.net_config)?;
        net.load_tensors(&self.tensors)?;
        Ok(net)
    }

    pub fn to_subnet(&self) -> Result<Subnet> {
        if self.header.kind != CheckpointKind::Subnet {
            return Err(Error::Checkpoint("expected an extracted subnet bundle".into()));
        }
        let arch = self
            .header
            .arch
            .clone()
            .ok_or_else(|| Error::Checkpoint("bundle has no architecture".into()))?;
        // Extracting from a freshly built supernet gives the right shapes.
        let shell = Supernet::build(&self.header.space, self.header.net_config)?;
        let mut sub = shell.extract(&arch)?;
        sub.net.load_tensors(&self.tensors)?;
        Ok(sub)
    }

    /// Rejects an architecture meant for another space.
    pub fn check_arch(&self, arch: &Architecture) -> Result<()> {
        if arch.space_id != self.header.space_id {
            return Err(Error::SpaceMismatch {
                arch: arch.space_id.clone(),
                checkpoint: self.header.space_id.clone(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::BnMode;
    use crate::presets::tiny_space;
    use crate::searchspace::sample_uniform_seeded;
    use crate::supernet::ExecMode;

    #[test]
    fn supernet_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let space = tiny_space();
        let net = Supernet::build(
            &space,
            NetConfig {
                init_seed: 9,
                ..NetConfig::default()
            },
        )
        .unwrap();
        let mut ck = Checkpoint::from_supernet(&net);
        ck.header.epoch = 3;
        ck.insert("adam.t", Tensor::full(&[1], 7.0));
        let path = dir.path().join("a.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.header, ck.header);
        let net2 = back.to_supernet().unwrap();
        for ((_, a), (_, b)) in net.named_tensors().into_iter().zip(net2.named_tensors()) {
            assert_eq!(a, b);
        }
        assert!(back.to_subnet().is_err());
    }

    #[test]
    fn subnet_bundle_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let space = tiny_space();
        let mut net = Supernet::build(&space, NetConfig::default()).unwrap();
        let arch = sample_uniform_seeded(&space, 4, true).unwrap();
        let x = Tensor::full(&[2, 3, 12, 12], 0.3);
        net.activate(&arch).unwrap();
        net.forward(&x, ExecMode::Bwba, BnMode::Train).unwrap();
        let mut sub = net.extract(&arch).unwrap();
        let path = dir.path().join("b.ckpt");
        Checkpoint::from_subnet(&sub).save(&path).unwrap();
        let mut back = Checkpoint::load(&path).unwrap().to_subnet().unwrap();
        assert_eq!(back.arch, arch);
        let a = sub.forward(&x, ExecMode::Bwba, BnMode::Eval).unwrap();
        let b = back.forward(&x, ExecMode::Bwba, BnMode::Eval).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn rejects_foreign_files_and_space_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
        let net = Supernet::build(&tiny_space(), NetConfig::default()).unwrap();
        let ck = Checkpoint::from_supernet(&net);
        let mut arch = crate::searchspace::largest(&tiny_space());
        arch.space_id = "paper".into();
        assert!(matches!(ck.check_arch(&arch), Err(Error::SpaceMismatch { .. })));
    }
}
