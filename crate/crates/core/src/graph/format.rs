//! On-disk model format: `<name>.json` manifest plus `<name>.bin` blob.
//!
//! The blob holds raw little-endian f32 values; manifest offsets are in bytes.
//! [`encode`] lays tensors out contiguously in node order (weight, bias for
//! weighted layers; scale, shift for affine layers), so saving a loaded
//! canonical model reproduces both files byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ConvGeometry, Layer, LayerKind, LayerNode, NodeId, Shape, WeightGraph};
use crate::error::{Error, Result};
use crate::tensor::{AffineParams, WeightTensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    /// Model input as [channels, height, width].
    pub input_shape: [usize; 3],
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<[u32; 2]>,
    pub inputs: Vec<u32>,
    pub outputs: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeRecord {
    pub id: u32,
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cols: Option<usize>,
    #[serde(default, skip_serializing_if = "NodeMeta::is_empty")]
    pub meta: NodeMeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_offset: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_offset: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_offset: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift_offset: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_h: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_w: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spatial_area: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
}

impl NodeMeta {
    fn is_empty(&self) -> bool {
        *self == NodeMeta::default()
    }
}

/// Path of the blob belonging to a manifest.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<WeightGraph> {
    let path = path.as_ref();
    let manifest = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let blob_file = blob_path(path);
    let blob = fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
    decode(&manifest, &blob)
}

pub fn save_graph(g: &WeightGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (manifest, blob) = encode(g)?;
    fs::write(path, manifest).map_err(|e| Error::io(path, e))?;
    let blob_file = blob_path(path);
    fs::write(&blob_file, blob).map_err(|e| Error::io(&blob_file, e))?;
    Ok(())
}

/// Serializes a graph to manifest text and blob bytes.
pub fn encode(g: &WeightGraph) -> Result<(String, Vec<u8>)> {
    let mut blob = Vec::new();
    let mut put = |values: &[f32]| -> u64 {
        let offset = blob.len() as u64;
        for v in values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset
    };

    let mut nodes = Vec::with_capacity(g.nodes().len());
    for node in g.nodes() {
        let mut rec = NodeRecord {
            id: node.id.0,
            kind: node.kind(),
            rows: None,
            cols: None,
            meta: NodeMeta::default(),
            weight_offset: None,
            bias_offset: None,
            scale_offset: None,
            shift_offset: None,
        };
        match &node.layer {
            Layer::Linear { weight } | Layer::Conv2d { weight, .. } => {
                rec.rows = Some(weight.rows());
                rec.cols = Some(weight.cols());
                rec.weight_offset = Some(put(weight.data()));
                rec.bias_offset = weight.bias().map(&mut put);
            }
            Layer::PerChannelAffine { params } => {
                rec.meta.channels = Some(params.channels());
                rec.scale_offset = Some(put(&params.scale));
                rec.shift_offset = Some(put(&params.shift));
            }
            _ => {}
        }
        match &node.layer {
            Layer::Conv2d { geometry: c, .. } => {
                rec.meta.in_channels = Some(c.in_channels);
                rec.meta.out_channels = Some(c.out_channels);
                rec.meta.kernel_h = Some(c.kernel_h);
                rec.meta.kernel_w = Some(c.kernel_w);
                rec.meta.stride = Some(c.stride);
                rec.meta.padding = Some(c.padding);
            }
            Layer::Pool { window, stride } => {
                rec.meta.window = Some(*window);
                rec.meta.stride = Some(*stride);
            }
            Layer::Flatten { spatial_area } => rec.meta.spatial_area = Some(*spatial_area),
            _ => {}
        }
        nodes.push(rec);
    }

    let s = g.input_shape();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        input_shape: [s.channels, s.height, s.width],
        nodes,
        edges: g.edges().iter().map(|(a, b)| [a.0, b.0]).collect(),
        inputs: g.inputs().iter().map(|id| id.0).collect(),
        outputs: g.outputs().iter().map(|id| id.0).collect(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Invariant(format!("manifest serialization failed: {e}")))?;
    text.push('\n');
    Ok((text, blob))
}

/// Parses manifest text against its blob and validates the resulting graph.
pub fn decode(manifest: &str, blob: &[u8]) -> Result<WeightGraph> {
    let m: Manifest =
        serde_json::from_str(manifest).map_err(|e| Error::Parse(format!("manifest: {e}")))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Parse(format!(
            "unsupported format_version {} (expected {FORMAT_VERSION})",
            m.format_version
        )));
    }
    if !blob.len().is_multiple_of(4) {
        return Err(Error::Shape(format!(
            "blob length {} is not a multiple of 4",
            blob.len()
        )));
    }

    let mut reader = BlobReader { blob, extent: 0 };
    let mut nodes = Vec::with_capacity(m.nodes.len());
    for rec in &m.nodes {
        nodes.push(LayerNode::new(rec.id, decode_layer(rec, &mut reader)?));
    }
    if reader.extent != blob.len() {
        return Err(Error::Shape(format!(
            "blob has {} bytes but the manifest references {}",
            blob.len(),
            reader.extent
        )));
    }

    let [c, h, w] = m.input_shape;
    WeightGraph::new(
        nodes,
        m.edges
            .iter()
            .map(|&[a, b]| (NodeId(a), NodeId(b)))
            .collect(),
        m.inputs.into_iter().map(NodeId).collect(),
        m.outputs.into_iter().map(NodeId).collect(),
        Shape::new(c, h, w),
    )
}

struct BlobReader<'a> {
    blob: &'a [u8],
    extent: usize,
}

impl BlobReader<'_> {
    fn read(&mut self, id: u32, what: &str, offset: u64, count: usize) -> Result<Vec<f32>> {
        let start = usize::try_from(offset)
            .map_err(|_| Error::Shape(format!("node {id}: {what} offset too large")))?;
        let end = count
            .checked_mul(4)
            .and_then(|n| n.checked_add(start))
            .filter(|&end| end <= self.blob.len())
            .ok_or_else(|| {
                Error::Shape(format!(
                    "node {id}: {what} needs {count} values at byte {start}, blob has {} bytes",
                    self.blob.len()
                ))
            })?;
        self.extent = self.extent.max(end);
        Ok(self.blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }
}

fn need<T: Copy>(value: Option<T>, id: u32, field: &str) -> Result<T> {
    value.ok_or_else(|| Error::Parse(format!("node {id}: missing {field}")))
}

fn decode_layer(rec: &NodeRecord, blob: &mut BlobReader<'_>) -> Result<Layer> {
    let id = rec.id;
    let meta = &rec.meta;
    let weight = |blob: &mut BlobReader<'_>| -> Result<WeightTensor> {
        let rows = need(rec.rows, id, "rows")?;
        let cols = need(rec.cols, id, "cols")?;
        let data = blob.read(
            id,
            "weight",
            need(rec.weight_offset, id, "weight_offset")?,
            rows * cols,
        )?;
        let bias = rec
            .bias_offset
            .map(|off| blob.read(id, "bias", off, rows))
            .transpose()?;
        WeightTensor::new(rows, cols, data, bias)
    };
    Ok(match rec.kind {
        LayerKind::Linear => Layer::Linear {
            weight: weight(blob)?,
        },
        LayerKind::Conv2d => Layer::Conv2d {
            weight: weight(blob)?,
            geometry: ConvGeometry {
                in_channels: need(meta.in_channels, id, "meta.in_channels")?,
                out_channels: need(meta.out_channels, id, "meta.out_channels")?,
                kernel_h: need(meta.kernel_h, id, "meta.kernel_h")?,
                kernel_w: need(meta.kernel_w, id, "meta.kernel_w")?,
                stride: meta.stride.unwrap_or(1),
                padding: meta.padding.unwrap_or(0),
            },
        },
        LayerKind::Relu => Layer::Relu,
        LayerKind::Add => Layer::Add,
        LayerKind::Pool => {
            let window = need(meta.window, id, "meta.window")?;
            Layer::Pool {
                window,
                stride: meta.stride.unwrap_or(window),
            }
        }
        LayerKind::Flatten => Layer::Flatten {
            spatial_area: need(meta.spatial_area, id, "meta.spatial_area")?,
        },
        LayerKind::PerChannelAffine => {
            let channels = need(meta.channels, id, "meta.channels")?;
            let scale = blob.read(
                id,
                "scale",
                need(rec.scale_offset, id, "scale_offset")?,
                channels,
            )?;
            let shift = blob.read(
                id,
                "shift",
                need(rec.shift_offset, id, "shift_offset")?,
                channels,
            )?;
            Layer::PerChannelAffine {
                params: AffineParams::new(scale, shift)?,
            }
        }
    })
}
