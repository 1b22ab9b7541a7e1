//! Single-file network checkpoints.
//!
//! Layout: magic `M2MD`, format version, length-prefixed JSON architecture
//! descriptor, then a tensor directory of `(name, dtype, rank, extents,
//! raw little-endian payload)` records covering parameters and running
//! statistics. The descriptor makes the file self-describing: loading
//! rebuilds the graph skeleton first and then fills it by name, so a
//! mismatched or truncated file fails loudly instead of yielding a
//! half-initialized network.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use trimnet_tensor::{DType, Element, Tensor};

use crate::graph::{ArchGraph, BlockBody, BlockSpec, ConvBn, Head, PoolArgs, Stage, Stem};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"M2MD";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConvBnDesc {
    out: usize,
    in_per_group: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    groups: usize,
}

impl ConvBnDesc {
    fn of<E: Element>(cb: &ConvBn<E>) -> Self {
        let d = cb.weight.dims();
        ConvBnDesc {
            out: d[0],
            in_per_group: d[1],
            kh: d[2],
            kw: d[3],
            stride: cb.stride,
            padding: cb.padding,
            groups: cb.groups,
        }
    }

    fn build<E: Element>(&self) -> ConvBn<E> {
        ConvBn::zeros(self.out, self.in_per_group, self.kh, self.kw, self.stride, self.padding, self.groups)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum BodyDesc {
    Basic {
        conv1: ConvBnDesc,
        conv2: ConvBnDesc,
        downsample: Option<ConvBnDesc>,
    },
    Inverted {
        expand: Option<ConvBnDesc>,
        depthwise: ConvBnDesc,
        project: ConvBnDesc,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlockDesc {
    name: String,
    stride: usize,
    in_channels: usize,
    mid_channels: usize,
    out_channels: usize,
    body: BodyDesc,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StageDesc {
    name: String,
    blocks: Vec<BlockDesc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArchDescriptor {
    family: String,
    input_channels: usize,
    num_classes: usize,
    dtype: u8,
    stem: ConvBnDesc,
    stem_pool: Option<PoolArgs>,
    stages: Vec<StageDesc>,
    head_conv: Option<ConvBnDesc>,
    fc_features: usize,
}

fn describe<E: Element>(graph: &ArchGraph<E>) -> ArchDescriptor {
    let stages = graph
        .stages
        .iter()
        .map(|s| StageDesc {
            name: s.name.clone(),
            blocks: s
                .blocks
                .iter()
                .map(|b| BlockDesc {
                    name: b.name.clone(),
                    stride: b.stride,
                    in_channels: b.in_channels,
                    mid_channels: b.mid_channels,
                    out_channels: b.out_channels,
                    body: match &b.body {
                        BlockBody::Basic { conv1, conv2, downsample } => BodyDesc::Basic {
                            conv1: ConvBnDesc::of(conv1),
                            conv2: ConvBnDesc::of(conv2),
                            downsample: downsample.as_ref().map(ConvBnDesc::of),
                        },
                        BlockBody::Inverted { expand, depthwise, project } => BodyDesc::Inverted {
                            expand: expand.as_ref().map(ConvBnDesc::of),
                            depthwise: ConvBnDesc::of(depthwise),
                            project: ConvBnDesc::of(project),
                        },
                    },
                })
                .collect(),
        })
        .collect();
    ArchDescriptor {
        family: graph.family.clone(),
        input_channels: graph.input_channels,
        num_classes: graph.num_classes,
        dtype: E::DTYPE.code(),
        stem: ConvBnDesc::of(&graph.stem.conv),
        stem_pool: graph.stem.max_pool,
        stages,
        head_conv: graph.head.pre_conv.as_ref().map(ConvBnDesc::of),
        fc_features: graph.head.fc_weight.dims()[1],
    }
}

/// Zero-weight graph with the descriptor's shapes, ready to be filled.
fn skeleton<E: Element>(d: &ArchDescriptor) -> ArchGraph<E> {
    let stages = d
        .stages
        .iter()
        .map(|s| Stage {
            name: s.name.clone(),
            blocks: s
                .blocks
                .iter()
                .map(|b| BlockSpec {
                    name: b.name.clone(),
                    stride: b.stride,
                    in_channels: b.in_channels,
                    mid_channels: b.mid_channels,
                    out_channels: b.out_channels,
                    body: match &b.body {
                        BodyDesc::Basic { conv1, conv2, downsample } => BlockBody::Basic {
                            conv1: conv1.build(),
                            conv2: conv2.build(),
                            downsample: downsample.as_ref().map(ConvBnDesc::build),
                        },
                        BodyDesc::Inverted { expand, depthwise, project } => BlockBody::Inverted {
                            expand: expand.as_ref().map(ConvBnDesc::build),
                            depthwise: depthwise.build(),
                            project: project.build(),
                        },
                    },
                })
                .collect(),
        })
        .collect();
    ArchGraph {
        family: d.family.clone(),
        input_channels: d.input_channels,
        num_classes: d.num_classes,
        stem: Stem { conv: d.stem.build(), max_pool: d.stem_pool },
        stages,
        head: Head {
            pre_conv: d.head_conv.as_ref().map(ConvBnDesc::build),
            fc_weight: Tensor::zeros(vec![d.num_classes, d.fc_features]),
            fc_bias: Tensor::zeros(vec![d.num_classes]),
        },
    }
}

fn write_tensor<E: Element>(w: &mut impl Write, name: &str, t: &Tensor<E>) -> std::io::Result<()> {
    let nb = name.as_bytes();
    w.write_all(&(nb.len() as u16).to_le_bytes())?;
    w.write_all(nb)?;
    w.write_all(&[E::DTYPE.code()])?;
    w.write_all(&[t.dims().len() as u8])?;
    for &d in t.dims() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * E::DTYPE.size_in_bytes());
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)
}

/// Serializes the graph (structure, parameters, running statistics).
pub fn save<E: Element>(graph: &ArchGraph<E>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |r: std::io::Result<()>| r.map_err(|e| Error::io(path, e));

    io(w.write_all(MAGIC))?;
    io(w.write_all(&VERSION.to_le_bytes()))?;
    let desc = serde_json::to_vec(&describe(graph))?;
    io(w.write_all(&(desc.len() as u32).to_le_bytes()))?;
    io(w.write_all(&desc))?;

    let mut count = 0u32;
    graph.visit_params(&mut |_, _| count += 1);
    graph.visit_buffers(&mut |_, _| count += 1);
    io(w.write_all(&count.to_le_bytes()))?;

    let mut status = Ok(());
    graph.visit_params(&mut |name, t| {
        if status.is_ok() {
            status = write_tensor(&mut w, name, t);
        }
    });
    graph.visit_buffers(&mut |name, t| {
        if status.is_ok() {
            status = write_tensor(&mut w, name, t);
        }
    });
    io(status)?;
    io(w.flush())
}

struct Reader<'p, R> {
    inner: R,
    path: &'p Path,
}

impl<'p, R: Read> Reader<'p, R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::io(self.path, e))?;
        Ok(buf)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }
}

fn read_tensor<E: Element>(r: &mut Reader<'_, impl Read>) -> Result<(String, Tensor<E>)> {
    let name_len = r.u16()? as usize;
    let name = String::from_utf8(r.bytes(name_len)?)
        .map_err(|_| Error::format(r.path, "tensor name is not valid UTF-8"))?;
    let code = r.u8()?;
    let dtype = DType::from_code(code)
        .ok_or_else(|| Error::format(r.path, format!("tensor `{name}`: unknown dtype code {code}")))?;
    if dtype != E::DTYPE {
        return Err(Error::format(
            r.path,
            format!("tensor `{name}` is {dtype}, expected {}", E::DTYPE),
        ));
    }
    let rank = r.u8()? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u64()? as usize);
    }
    let numel: usize = dims.iter().product();
    let raw = r.bytes(numel * E::DTYPE.size_in_bytes())?;
    let data: Vec<E> = raw
        .chunks_exact(E::DTYPE.size_in_bytes())
        .map(E::read_le)
        .collect();
    Ok((name, Tensor::new(dims, data)?))
}

/// Loads a checkpoint saved by [`save`]. The element type must match the
/// file's dtype; every stored tensor must land on exactly one graph slot.
pub fn load<E: Element>(path: &Path) -> Result<ArchGraph<E>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { inner: BufReader::new(file), path };

    if r.bytes(4)? != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("format version {version}, reader supports {VERSION}")));
    }
    let desc_len = r.u32()? as usize;
    let desc: ArchDescriptor = serde_json::from_slice(&r.bytes(desc_len)?)?;
    if desc.dtype != E::DTYPE.code() {
        let found = DType::from_code(desc.dtype)
            .map(|d| d.to_string())
            .unwrap_or_else(|| format!("code {}", desc.dtype));
        return Err(Error::format(path, format!("checkpoint holds {found} tensors, expected {}", E::DTYPE)));
    }

    let count = r.u32()? as usize;
    let mut loaded: BTreeMap<String, Tensor<E>> = BTreeMap::new();
    for _ in 0..count {
        let (name, t) = read_tensor(&mut r)?;
        if loaded.insert(name.clone(), t).is_some() {
            return Err(Error::format(path, format!("duplicate tensor `{name}`")));
        }
    }

    let mut graph = skeleton::<E>(&desc);
    let mut fill_err: Option<Error> = None;
    let mut fill = |name: &str, slot: &mut Tensor<E>, loaded: &mut BTreeMap<String, Tensor<E>>| {
        if fill_err.is_some() {
            return;
        }
        match loaded.remove(name) {
            Some(t) if t.dims() == slot.dims() => *slot = t,
            Some(t) => {
                fill_err = Some(Error::format(
                    path,
                    format!("tensor `{name}` has shape {:?}, graph expects {:?}", t.dims(), slot.dims()),
                ));
            }
            None => fill_err = Some(Error::format(path, format!("missing tensor `{name}`"))),
        }
    };
    graph.visit_params_mut(&mut |name, slot| fill(name, slot, &mut loaded));
    graph.visit_buffers_mut(&mut |name, slot| fill(name, slot, &mut loaded));
    if let Some(e) = fill_err {
        return Err(e);
    }
    if let Some(name) = loaded.keys().next() {
        return Err(Error::format(path, format!("tensor `{name}` does not belong to this architecture")));
    }

    let violations = crate::graph::check_residual_invariants(&graph);
    if !violations.is_empty() {
        return Err(Error::format(
            path,
            format!("descriptor violates structural invariants: {}", violations[0]),
        ));
    }
    Ok(graph)
}

/// Hex SHA-256 of a file, used to fingerprint checkpoints in run manifests.
pub fn file_sha256(path: &Path) -> Result<String> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = reader.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex(&hasher.finalize()))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
