//! NCW1 weight files: little-endian binary with magic bytes, a format
//! version, the full node/shape table, then raw f32 parameter payloads in
//! index order. Enough topology is stored to rebuild the spec outright.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{Activation, LayerKind, LayerNode, NetworkSpec};

const MAGIC: &[u8; 4] = b"NCW1";
const VERSION: u32 = 1;

fn kind_code(kind: LayerKind) -> (u8, u32, u32) {
    match kind {
        LayerKind::Input => (0, 0, 0),
        LayerKind::Output => (1, 0, 0),
        LayerKind::Conv { stride, padding } => (2, stride as u32, padding as u32),
        LayerKind::ConvT { stride } => (3, stride as u32, 0),
        LayerKind::MaxPool { window } => (4, window as u32, 0),
        LayerKind::AvgPool { window } => (5, window as u32, 0),
        LayerKind::GlobalAvgPool => (6, 0, 0),
        LayerKind::Dense => (7, 0, 0),
        LayerKind::Activation(Activation::Relu) => (8, 0, 0),
        LayerKind::Activation(Activation::Sigmoid) => (8, 1, 0),
        LayerKind::Activation(Activation::Softmax) => (8, 2, 0),
        LayerKind::BatchNorm => (9, 0, 0),
        LayerKind::Concat => (10, 0, 0),
        LayerKind::Add => (11, 0, 0),
    }
}

fn decode_kind(node: usize, tag: u8, a: u32, b: u32) -> Result<LayerKind> {
    Ok(match tag {
        0 => LayerKind::Input,
        1 => LayerKind::Output,
        2 => LayerKind::Conv { stride: a as usize, padding: b as usize },
        3 => LayerKind::ConvT { stride: a as usize },
        4 => LayerKind::MaxPool { window: a as usize },
        5 => LayerKind::AvgPool { window: a as usize },
        6 => LayerKind::GlobalAvgPool,
        7 => LayerKind::Dense,
        8 => LayerKind::Activation(match a {
            0 => Activation::Relu,
            1 => Activation::Sigmoid,
            2 => Activation::Softmax,
            other => {
                return Err(Error::Format(format!(
                    "node {node}: unknown activation code {other}"
                )))
            }
        }),
        9 => LayerKind::BatchNorm,
        10 => LayerKind::Concat,
        11 => LayerKind::Add,
        other => return Err(Error::Format(format!("node {node}: unknown kind tag {other}"))),
    })
}

struct Reader<R: Read> {
    inner: R,
    context: usize, // current node index, for error messages
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| {
            Error::Format(format!("truncated weight file at node {}", self.context))
        })?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}

/// Saves all parameters (including batchnorm running statistics), the
/// freeze point and the graph topology.
pub fn save_weights<T: Scalar>(spec: &NetworkSpec<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(spec.nodes.len() as u32).to_le_bytes())?;
    w.write_all(&(spec.head_index as u32).to_le_bytes())?;
    w.write_all(&(spec.freeze_point as u32).to_le_bytes())?;
    w.write_all(&(spec.pool_factor as u32).to_le_bytes())?;
    let fam = spec.family.as_bytes();
    w.write_all(&(fam.len() as u32).to_le_bytes())?;
    w.write_all(fam)?;
    for node in &spec.nodes {
        let (tag, a, b) = kind_code(node.kind);
        w.write_all(&(node.index as u32).to_le_bytes())?;
        w.write_all(&[tag])?;
        w.write_all(&a.to_le_bytes())?;
        w.write_all(&b.to_le_bytes())?;
        w.write_all(&[node.trainable as u8])?;
        w.write_all(&[node.inputs.len() as u8])?;
        for &i in &node.inputs {
            w.write_all(&(i as u32).to_le_bytes())?;
        }
        w.write_all(&[node.params.len() as u8])?;
        for p in &node.params {
            w.write_all(&[p.ndim() as u8])?;
            for &d in p.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            w.write_all(&((p.len() * 4) as u64).to_le_bytes())?;
        }
    }
    for node in &spec.nodes {
        for p in &node.params {
            for v in p.data().iter() {
                w.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Rebuilds a [`NetworkSpec`] from an NCW1 file.
pub fn load_weights<T: Scalar>(path: &Path) -> Result<NetworkSpec<T>> {
    let mut r = Reader { inner: BufReader::new(File::open(path)?), context: 0 };
    let magic = r.bytes(4)?;
    if magic != MAGIC {
        return Err(Error::Format("bad magic bytes, not an NCW1 weight file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let n_nodes = r.u32()? as usize;
    let head_index = r.u32()? as usize;
    let freeze_point = r.u32()? as usize;
    let pool_factor = r.u32()? as usize;
    let fam_len = r.u32()? as usize;
    let family = String::from_utf8(r.bytes(fam_len)?)
        .map_err(|_| Error::Format("family tag is not utf-8".into()))?;

    struct NodeHeader {
        kind: LayerKind,
        trainable: bool,
        inputs: Vec<usize>,
        shapes: Vec<Vec<usize>>,
        byte_lens: Vec<u64>,
    }
    let mut headers = Vec::with_capacity(n_nodes);
    for i in 0..n_nodes {
        r.context = i;
        let index = r.u32()? as usize;
        if index != i {
            return Err(Error::Format(format!("node {i}: table carries index {index}")));
        }
        let tag = r.u8()?;
        let a = r.u32()?;
        let b = r.u32()?;
        let kind = decode_kind(i, tag, a, b)?;
        let trainable = r.u8()? != 0;
        let n_inputs = r.u8()? as usize;
        let mut inputs = Vec::with_capacity(n_inputs);
        for _ in 0..n_inputs {
            inputs.push(r.u32()? as usize);
        }
        let n_params = r.u8()? as usize;
        let mut shapes = Vec::with_capacity(n_params);
        let mut byte_lens = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let blen = r.u64()?;
            let n: usize = shape.iter().product();
            if blen != (n * 4) as u64 {
                return Err(Error::Format(format!(
                    "node {i}: payload length {blen} does not match shape {shape:?}"
                )));
            }
            shapes.push(shape);
            byte_lens.push(blen);
        }
        headers.push(NodeHeader { kind, trainable, inputs, shapes, byte_lens });
    }

    let mut nodes = Vec::with_capacity(n_nodes);
    for (i, h) in headers.iter().enumerate() {
        r.context = i;
        let mut params = Vec::with_capacity(h.shapes.len());
        for (shape, &blen) in h.shapes.iter().zip(&h.byte_lens) {
            let raw = r.bytes(blen as usize)?;
            let data: Vec<T> = raw
                .chunks_exact(4)
                .map(|c| T::cast_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect();
            params.push(Tensor::from_vec(shape, data).map_err(|e| {
                Error::Format(format!("node {i}: {e}"))
            })?);
        }
        nodes.push(LayerNode { index: i, kind: h.kind, params, trainable: h.trainable, inputs: h.inputs.clone() });
    }

    let mut spec = NetworkSpec { nodes, head_index, freeze_point, family, pool_factor };
    spec.validate_indices().map_err(|e| Error::Format(e.to_string()))?;
    // re-derive trainable/requires_grad flags from the stored freeze point
    spec.set_freeze_point(freeze_point)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(spec)
}

impl<T: Scalar> NetworkSpec<T> {
    /// Loads parameter payloads from `path` into this spec, requiring the
    /// stored topology and shape table to match exactly.
    pub fn load_params_from(&mut self, path: &Path) -> Result<()> {
        let loaded: NetworkSpec<T> = load_weights(path)?;
        if loaded.nodes.len() != self.nodes.len() {
            return Err(Error::Format(format!(
                "node count mismatch: file has {}, spec has {}",
                loaded.nodes.len(),
                self.nodes.len()
            )));
        }
        for (mine, theirs) in self.nodes.iter().zip(&loaded.nodes) {
            if mine.kind != theirs.kind || mine.params.len() != theirs.params.len() {
                return Err(Error::Format(format!("node {}: kind/table mismatch", mine.index)));
            }
            for (p, q) in mine.params.iter().zip(&theirs.params) {
                if p.shape() != q.shape() {
                    return Err(Error::Format(format!(
                        "node {}: shape mismatch {:?} vs {:?}",
                        mine.index,
                        p.shape(),
                        q.shape()
                    )));
                }
            }
        }
        for (mine, theirs) in self.nodes.iter_mut().zip(&loaded.nodes) {
            for (p, q) in mine.params.iter().zip(&theirs.params) {
                p.data_mut().copy_from_slice(&q.data());
            }
        }
        self.set_freeze_point(loaded.freeze_point)?;
        Ok(())
    }
}
