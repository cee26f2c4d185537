//! Binary checkpoint format.
//!
//! All integers are little-endian `u32`; values are little-endian `f32`.
//!
//! ```text
//! "MINC"                      magic, 4 bytes
//! version                     u32 (= 1)
//! topology hash               32 bytes, SHA-256 over (name, op kind, shape)
//! entry count                 u32
//! per entry:
//!   name length, name bytes   u32 + UTF-8
//!   rank, dims                u32 + rank × u32
//!   values                    product(dims) × f32
//! ```
//!
//! Entries are every parameter and batch-norm running statistic, in
//! [`Graph::named_tensors`] order. Loading parses and validates the whole file
//! before touching the graph, so a failed load leaves the graph unchanged.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{topology_digest, Graph};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MINC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub topology_hash: [u8; 32],
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn from_graph(graph: &Graph) -> Self {
        Checkpoint {
            version: VERSION,
            topology_hash: graph.topology_hash(),
            entries: graph
                .named_tensors()
                .into_iter()
                .map(|(name, t)| CheckpointEntry {
                    name,
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.topology_hash);
        put_u32(&mut out, self.entries.len());
        for e in &self.entries {
            put_u32(&mut out, e.name.len());
            out.extend_from_slice(e.name.as_bytes());
            put_u32(&mut out, e.shape.len());
            for &d in &e.shape {
                put_u32(&mut out, d);
            }
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::IncompatibleCheckpoint(format!(
                "format version {version}, this build reads {VERSION}"
            )));
        }
        let topology_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::CorruptCheckpoint("entry name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::CorruptCheckpoint(format!("entry `{name}` has an absurd shape")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::CorruptCheckpoint("overflow".into()))?)?;
            let values = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            entries.push(CheckpointEntry { name, shape, values });
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} trailing bytes after the last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            version,
            topology_hash,
            entries,
        })
    }

    /// Copies every entry into `graph`, which must have the same topology.
    pub fn restore(&self, graph: &mut Graph) -> Result<()> {
        if self.topology_hash != graph.topology_hash() {
            return Err(Error::IncompatibleCheckpoint(
                "topology hash does not match the model".into(),
            ));
        }
        self.copy_into(graph, None)
    }

    /// Imports a checkpoint taken from a bare trunk (see
    /// [`crate::arch::build_trunk`]) into a graph that extends that trunk. The
    /// hash is checked against the graph's tensors up to its trunk boundary.
    pub fn restore_trunk(&self, graph: &mut Graph) -> Result<()> {
        let boundary = graph
            .trunk_boundary()
            .and_then(|b| graph.node_index(b))
            .ok_or_else(|| Error::IncompatibleCheckpoint("model has no trunk boundary".into()))?;
        let owners: Vec<usize> = graph
            .nodes()
            .iter()
            .enumerate()
            .flat_map(|(i, n)| std::iter::repeat_n(i, n.op.params().len() + n.op.buffers().len()))
            .collect();
        let tensors = graph.named_tensors();
        let kinds = graph.named_tensor_kinds();
        let hash = topology_digest(
            tensors
                .iter()
                .zip(&kinds)
                .zip(&owners)
                .filter(|(_, &owner)| owner <= boundary)
                .map(|(((name, t), kind), _)| (name.as_str(), *kind, t.shape())),
        );
        if hash != self.topology_hash {
            return Err(Error::IncompatibleCheckpoint(
                "topology hash does not match the model trunk".into(),
            ));
        }
        let trunk_names: Vec<String> = tensors
            .iter()
            .zip(&owners)
            .filter(|(_, &o)| o <= boundary)
            .map(|((n, _), _)| n.clone())
            .collect();
        self.copy_into(graph, Some(&trunk_names))
    }

    fn copy_into(&self, graph: &mut Graph, subset: Option<&[String]>) -> Result<()> {
        let mut targets = graph.named_tensors_mut();
        if let Some(names) = subset {
            targets.retain(|(n, _)| names.contains(n));
        }
        if targets.len() != self.entries.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint has {} entries, model expects {}",
                self.entries.len(),
                targets.len()
            )));
        }
        for ((name, t), e) in targets.iter().zip(&self.entries) {
            if *name != e.name || t.shape() != e.shape.as_slice() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "entry `{}` {:?} does not match model tensor `{name}` {:?}",
                    e.name,
                    e.shape,
                    t.shape()
                )));
            }
        }
        for ((_, t), e) in targets.iter_mut().zip(&self.entries) {
            **t = Tensor::new(e.shape.clone(), e.values.clone())?;
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::CorruptCheckpoint(format!(
                "file truncated: needed {n} bytes at offset {}, {} available",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("checkpoint field exceeds u32");
    out.extend_from_slice(&v.to_le_bytes());
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Validation(format!("`{}` is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(graph: &Graph, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &Checkpoint::from_graph(graph).to_bytes())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

pub fn load_checkpoint(graph: &mut Graph, path: impl AsRef<Path>) -> Result<()> {
    read_checkpoint(path)?.restore(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_inception, build_trunk, InceptionConfig};

    fn small() -> Graph {
        build_inception(8, &InceptionConfig::MODULE_1, 3).unwrap()
    }

    #[test]
    fn layout_starts_with_magic_and_version() {
        let bytes = Checkpoint::from_graph(&small()).to_bytes();
        assert_eq!(&bytes[..4], b"MINC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let count = u32::from_le_bytes(bytes[40..44].try_into().unwrap()) as usize;
        assert_eq!(count, small().named_tensors().len());
        let name_len = u32::from_le_bytes(bytes[44..48].try_into().unwrap()) as usize;
        assert_eq!(&bytes[48..48 + name_len], b"inception.b1_1x1.weight");
    }

    #[test]
    fn bytes_round_trip() {
        let ck = Checkpoint::from_graph(&small());
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
    }

    #[test]
    fn truncation_is_corruption_and_leaves_graph_alone() {
        let src = build_inception(8, &InceptionConfig::MODULE_1, 4).unwrap();
        let bytes = Checkpoint::from_graph(&src).to_bytes();
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::CorruptCheckpoint(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn topology_mismatch_is_incompatible() {
        let ck = Checkpoint::from_graph(&small());
        let mut other = build_inception(16, &InceptionConfig::MODULE_1, 3).unwrap();
        let before = other.clone();
        assert!(matches!(ck.restore(&mut other), Err(Error::IncompatibleCheckpoint(_))));
        assert_eq!(other, before);
    }

    #[test]
    fn restore_overwrites_parameters() {
        let ck = Checkpoint::from_graph(&small());
        let mut g = build_inception(8, &InceptionConfig::MODULE_1, 99).unwrap();
        assert_ne!(g, small());
        ck.restore(&mut g).unwrap();
        assert_eq!(g, small());
    }

    #[test]
    fn trunk_import() {
        let trunk = build_trunk(0.35, 5).unwrap();
        let ck = Checkpoint::from_graph(&trunk);
        let mut full = crate::arch::MobIncConfig {
            trunk: crate::arch::TrunkConfig {
                width_multiplier: 0.35,
                ..Default::default()
            },
            ..Default::default()
        }
        .build(6)
        .unwrap();
        ck.restore_trunk(&mut full).unwrap();
        let w = |g: &Graph| g.node("block_12.project").unwrap().op.params()[0].1.clone();
        assert_eq!(w(&full), w(&trunk));
        // A full-model checkpoint is not a trunk checkpoint.
        assert!(Checkpoint::from_graph(&full).restore_trunk(&mut full.clone()).is_err());
    }
}
