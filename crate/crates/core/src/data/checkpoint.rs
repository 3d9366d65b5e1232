//! Binary checkpoint format.
//!
//! ```text
//! "LSLU" | u32 version | u32 tensor count
//! per tensor: u16 name length | name (UTF-8) | u8 dtype | u8 rank | u32 extents | raw values
//! ```
//!
//! All integers and values are little-endian. Dtype codes: 0 = f32,
//! 1 = f64, 2 = u8. Run metadata (including a structural description of the
//! graph) is stored as JSON in a u8 tensor named [`META_TENSOR`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Normalization;
use crate::error::{Error, Result};
use crate::networks::{Activation, LayerGraph, Node, NodeKind, Projection};
use crate::nn::{BaseActivation, BatchNormState, ConvLayer, Linear, Mode, Param};
use crate::series::{SeriesActivationParams, SeriesParamKind};
use crate::tensor::{DType, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LSLU";
pub const CHECKPOINT_VERSION: u32 = 1;
const META_TENSOR: &str = "__meta__";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WireDType {
    F32,
    F64,
    U8,
}

impl WireDType {
    fn code(self) -> u8 {
        match self {
            WireDType::F32 => DType::F32.code(),
            WireDType::F64 => DType::F64.code(),
            WireDType::U8 => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            2 => Some(WireDType::U8),
            c => DType::from_code(c).map(Self::from),
        }
    }

    fn size(self) -> usize {
        match self {
            WireDType::F32 => 4,
            WireDType::F64 => 8,
            WireDType::U8 => 1,
        }
    }
}

impl From<DType> for WireDType {
    fn from(d: DType) -> Self {
        match d {
            DType::F32 => WireDType::F32,
            DType::F64 => WireDType::F64,
        }
    }
}

/// A named tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub dtype: WireDType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl RawTensor {
    pub fn from_tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.size());
        for &v in t.data() {
            v.to_le_bytes(&mut bytes);
        }
        RawTensor {
            name: name.into(),
            dtype: T::DTYPE.into(),
            shape: t.shape().to_vec(),
            bytes,
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        if self.dtype != WireDType::from(T::DTYPE) {
            return Err(Error::CheckpointShape {
                name: self.name.clone(),
                detail: format!("stored as {:?}, requested {:?}", self.dtype, T::DTYPE),
            });
        }
        let size = T::DTYPE.size();
        let data = self.bytes.chunks_exact(size).map(T::from_le_slice).collect();
        Tensor::new(self.shape.clone(), data)
    }
}

/// Run metadata stored alongside the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Completed training epochs.
    pub epoch: usize,
    pub config_hash: String,
    /// Master seed; every random stream is derived from it and the epoch.
    pub seed: u64,
    pub dtype: DType,
    pub normalization: Normalization,
    /// The run configuration as JSON.
    pub config: serde_json::Value,
    graph: GraphSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BnSpec {
    eps: f64,
    momentum: f64,
    tracked: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum NodeSpec {
    Conv { stride: usize, pad: usize },
    BatchNorm(BnSpec),
    Base { base: BaseActivation },
    Series { base: BaseActivation },
    Blend { base: BaseActivation, lambda: f64 },
    MaxPool { k: usize, stride: usize },
    AvgPool { k: usize, stride: usize },
    GlobalAvgPool,
    Linear,
    Dropout { p: f64 },
    ResidualBegin,
    ResidualEnd { projection: Option<ProjectionSpec> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ProjectionSpec {
    stride: usize,
    pad: usize,
    bn: Option<BnSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct GraphSpec {
    input_shape: [usize; 3],
    classes: usize,
    nodes: Vec<(String, NodeSpec)>,
}

fn bn_spec<T: Real>(bn: &BatchNormState<T>) -> BnSpec {
    BnSpec {
        eps: bn.eps,
        momentum: bn.momentum,
        tracked: bn.tracked,
    }
}

impl GraphSpec {
    fn of<T: Real>(g: &LayerGraph<T>) -> Self {
        let nodes = g
            .nodes
            .iter()
            .map(|n| {
                let spec = match &n.kind {
                    NodeKind::Conv(c) => NodeSpec::Conv {
                        stride: c.stride,
                        pad: c.pad,
                    },
                    NodeKind::BatchNorm(bn) => NodeSpec::BatchNorm(bn_spec(bn)),
                    NodeKind::Activation(Activation::Base(base)) => NodeSpec::Base { base: *base },
                    NodeKind::Activation(Activation::Series(p)) => NodeSpec::Series { base: p.base },
                    NodeKind::Activation(Activation::Blend { base, lambda }) => NodeSpec::Blend {
                        base: *base,
                        lambda: *lambda,
                    },
                    NodeKind::MaxPool { k, stride } => NodeSpec::MaxPool { k: *k, stride: *stride },
                    NodeKind::AvgPool { k, stride } => NodeSpec::AvgPool { k: *k, stride: *stride },
                    NodeKind::GlobalAvgPool => NodeSpec::GlobalAvgPool,
                    NodeKind::Linear(_) => NodeSpec::Linear,
                    NodeKind::Dropout { p } => NodeSpec::Dropout { p: *p },
                    NodeKind::ResidualBegin => NodeSpec::ResidualBegin,
                    NodeKind::ResidualEnd { projection } => NodeSpec::ResidualEnd {
                        projection: projection.as_ref().map(|p| ProjectionSpec {
                            stride: p.conv.stride,
                            pad: p.conv.pad,
                            bn: p.bn.as_ref().map(bn_spec),
                        }),
                    },
                };
                (n.name.clone(), spec)
            })
            .collect();
        GraphSpec {
            input_shape: g.input_shape,
            classes: g.classes,
            nodes,
        }
    }
}

impl CheckpointMeta {
    pub fn new<T: Real>(
        g: &LayerGraph<T>,
        epoch: usize,
        config_hash: String,
        seed: u64,
        normalization: Normalization,
        config: serde_json::Value,
    ) -> Self {
        CheckpointMeta {
            epoch,
            config_hash,
            seed,
            dtype: T::DTYPE,
            normalization,
            config,
            graph: GraphSpec::of(g),
        }
    }
}

/// Decoded checkpoint: every stored tensor plus the parsed metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<RawTensor>,
    pub meta: CheckpointMeta,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Corrupt(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

impl Checkpoint {
    /// Snapshot of every parameter and batch-norm statistic of `g`.
    pub fn from_graph<T: Real>(g: &LayerGraph<T>, meta: CheckpointMeta) -> Self {
        let mut tensors: Vec<RawTensor> = g
            .params()
            .iter()
            .map(|p| RawTensor::from_tensor(p.name.clone(), &p.param.value))
            .collect();
        tensors.extend(
            g.buffers()
                .iter()
                .map(|b| RawTensor::from_tensor(b.name.clone(), b.tensor)),
        );
        Checkpoint { tensors, meta }
    }

    pub fn get(&self, name: &str) -> Option<&RawTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::CheckpointShape {
                name: name.to_string(),
                detail: "missing from checkpoint".into(),
            })?
            .to_tensor()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let meta_raw = RawTensor {
            name: META_TENSOR.into(),
            dtype: WireDType::U8,
            shape: vec![meta.len()],
            bytes: meta,
        };
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let count = u32::try_from(self.tensors.len() + 1).map_err(|_| Error::Corrupt("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for t in std::iter::once(&meta_raw).chain(&self.tensors) {
            let name = t.name.as_bytes();
            let len = u16::try_from(name.len()).map_err(|_| Error::Corrupt(format!("name too long: {}", t.name)))?;
            let rank = u8::try_from(t.shape.len()).map_err(|_| Error::Corrupt(format!("rank too high: {}", t.name)))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(t.dtype.code());
            out.push(rank);
            for &e in &t.shape {
                let e = u32::try_from(e).map_err(|_| Error::Corrupt(format!("extent too large: {}", t.name)))?;
                out.extend_from_slice(&e.to_le_bytes());
            }
            out.extend_from_slice(&t.bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Corrupt("bad magic".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let code = r.u8("dtype")?;
            let dtype =
                WireDType::from_code(code).ok_or_else(|| Error::Corrupt(format!("{name}: dtype code {code}")))?;
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .and_then(|n| n.checked_mul(dtype.size()))
                .ok_or_else(|| Error::Corrupt(format!("{name}: extents overflow")))?;
            let data = r.take(numel, &name)?.to_vec();
            tensors.push(RawTensor {
                name,
                dtype,
                shape,
                bytes: data,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let pos = tensors
            .iter()
            .position(|t| t.name == META_TENSOR)
            .ok_or_else(|| Error::Corrupt("no metadata tensor".into()))?;
        let meta_raw = tensors.remove(pos);
        let meta = serde_json::from_slice(&meta_raw.bytes).map_err(|e| Error::Corrupt(format!("metadata: {e}")))?;
        Ok(Checkpoint { tensors, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::FileMissing(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Overwrites the parameters and statistics of an existing graph. Every
    /// tensor must be present with the same shape, and the checkpoint must
    /// hold nothing the graph lacks.
    pub fn restore_into<T: Real>(&self, g: &mut LayerGraph<T>) -> Result<()> {
        let mut used = 0;
        let mut fetch = |name: &str, current: &[usize]| -> Result<Tensor<T>> {
            let t = self.tensor::<T>(name)?;
            if t.shape() != current {
                return Err(Error::CheckpointShape {
                    name: name.to_string(),
                    detail: format!("checkpoint has {:?}, graph expects {:?}", t.shape(), current),
                });
            }
            used += 1;
            Ok(t)
        };
        for p in g.params_mut() {
            p.param.value = fetch(&p.name, p.param.value.shape())?;
            p.param.grad = None;
        }
        let tracked: BTreeMap<String, u64> = self
            .meta
            .graph
            .nodes
            .iter()
            .flat_map(|(name, spec)| match spec {
                NodeSpec::BatchNorm(b) => vec![(name.clone(), b.tracked)],
                NodeSpec::ResidualEnd {
                    projection: Some(ProjectionSpec { bn: Some(b), .. }),
                } => vec![(format!("{name}.proj_bn"), b.tracked)],
                _ => vec![],
            })
            .collect();
        for (prefix, bn) in g.batch_norms_mut() {
            bn.running_mean = fetch(&format!("{prefix}.running_mean"), bn.running_mean.shape())?;
            bn.running_var = fetch(&format!("{prefix}.running_var"), bn.running_var.shape())?;
            bn.tracked = tracked.get(&prefix).copied().unwrap_or(bn.tracked);
        }
        if used != self.tensors.len() {
            let known: Vec<String> = g
                .params()
                .iter()
                .map(|p| p.name.clone())
                .chain(g.buffers().iter().map(|b| b.name.clone()))
                .collect();
            let extra = self
                .tensors
                .iter()
                .find(|t| !known.contains(&t.name))
                .map_or_else(|| "?".to_string(), |t| t.name.clone());
            return Err(Error::CheckpointShape {
                name: extra,
                detail: "not present in the target graph".into(),
            });
        }
        Ok(())
    }

    /// Rebuilds the stored graph (in eval mode) from its structural
    /// description and tensors.
    pub fn to_graph<T: Real>(&self) -> Result<LayerGraph<T>> {
        if self.meta.dtype != T::DTYPE {
            return Err(Error::CheckpointShape {
                name: META_TENSOR.into(),
                detail: format!("checkpoint is {:?}, requested {:?}", self.meta.dtype, T::DTYPE),
            });
        }
        let spec = &self.meta.graph;
        let p = |name: String| -> Result<Param<T>> { Ok(Param::new(self.tensor(&name)?)) };
        let conv = |prefix: &str, stride: usize, pad: usize| -> Result<ConvLayer<T>> {
            ConvLayer::new(
                self.tensor(&format!("{prefix}.weight"))?,
                self.tensor(&format!("{prefix}.bias"))?,
                stride,
                pad,
            )
        };
        let bn = |prefix: &str, s: &BnSpec| -> Result<BatchNormState<T>> {
            Ok(BatchNormState {
                gamma: p(format!("{prefix}.gamma"))?,
                beta: p(format!("{prefix}.beta"))?,
                running_mean: self.tensor(&format!("{prefix}.running_mean"))?,
                running_var: self.tensor(&format!("{prefix}.running_var"))?,
                eps: s.eps,
                momentum: s.momentum,
                tracked: s.tracked,
            })
        };
        let mut nodes = Vec::with_capacity(spec.nodes.len());
        for (name, ns) in &spec.nodes {
            let kind = match ns {
                NodeSpec::Conv { stride, pad } => NodeKind::Conv(conv(name, *stride, *pad)?),
                NodeSpec::BatchNorm(s) => NodeKind::BatchNorm(bn(name, s)?),
                NodeSpec::Base { base } => NodeKind::Activation(Activation::Base(*base)),
                NodeSpec::Series { base } => {
                    let get = |k: SeriesParamKind| p(format!("{name}.{}", k.as_str()));
                    NodeKind::Activation(Activation::Series(SeriesActivationParams {
                        base: *base,
                        theta: get(SeriesParamKind::Theta)?,
                        omega: get(SeriesParamKind::Omega)?,
                        alpha: get(SeriesParamKind::Alpha)?,
                        shift: get(SeriesParamKind::Shift)?,
                    }))
                }
                NodeSpec::Blend { base, lambda } => NodeKind::Activation(Activation::Blend {
                    base: *base,
                    lambda: *lambda,
                }),
                NodeSpec::MaxPool { k, stride } => NodeKind::MaxPool { k: *k, stride: *stride },
                NodeSpec::AvgPool { k, stride } => NodeKind::AvgPool { k: *k, stride: *stride },
                NodeSpec::GlobalAvgPool => NodeKind::GlobalAvgPool,
                NodeSpec::Linear => NodeKind::Linear(Linear {
                    weight: p(format!("{name}.weight"))?,
                    bias: p(format!("{name}.bias"))?,
                }),
                NodeSpec::Dropout { p } => NodeKind::Dropout { p: *p },
                NodeSpec::ResidualBegin => NodeKind::ResidualBegin,
                NodeSpec::ResidualEnd { projection } => NodeKind::ResidualEnd {
                    projection: match projection {
                        None => None,
                        Some(ps) => Some(Projection {
                            conv: conv(&format!("{name}.proj"), ps.stride, ps.pad)?,
                            bn: ps.bn.as_ref().map(|s| bn(&format!("{name}.proj_bn"), s)).transpose()?,
                        }),
                    },
                },
            };
            nodes.push(Node {
                name: name.clone(),
                kind,
            });
        }
        let g = LayerGraph {
            nodes,
            mode: Mode::Eval,
            input_shape: spec.input_shape,
            classes: spec.classes,
        };
        g.shapes()?;
        let stored = g.params().len() + g.buffers().len();
        if stored != self.tensors.len() {
            return Err(Error::Corrupt(format!(
                "graph description uses {stored} tensors, file holds {}",
                self.tensors.len()
            )));
        }
        Ok(g)
    }
}
