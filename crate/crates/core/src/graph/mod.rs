//! Layer DAG: node types, validation, and shape inference.

mod builder;
pub mod format;
pub mod groups;

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{AffineParams, WeightTensor};

pub use builder::GraphBuilder;
pub use format::{load_graph, save_graph};
pub use groups::{
    build_layer_groups, merge_parent_sets, FeatureLink, ForbidReason, GroupStatus, LayerGroup,
    ParentRef,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Linear,
    Conv2d,
    Relu,
    Add,
    Pool,
    Flatten,
    PerChannelAffine,
}

impl LayerKind {
    pub fn is_weighted(self) -> bool {
        matches!(self, LayerKind::Linear | LayerKind::Conv2d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn square(in_channels: usize, out_channels: usize, kernel: usize, padding: usize) -> Self {
        ConvGeometry {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            padding,
        }
    }

    pub fn kernel_area(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    pub fn lowered_cols(&self) -> usize {
        self.in_channels * self.kernel_area()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear {
        weight: WeightTensor,
    },
    Conv2d {
        weight: WeightTensor,
        geometry: ConvGeometry,
    },
    Relu,
    Add,
    /// Max pooling over `window x window` patches.
    Pool {
        window: usize,
        stride: usize,
    },
    Flatten {
        spatial_area: usize,
    },
    PerChannelAffine {
        params: AffineParams,
    },
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Linear { .. } => LayerKind::Linear,
            Layer::Conv2d { .. } => LayerKind::Conv2d,
            Layer::Relu => LayerKind::Relu,
            Layer::Add => LayerKind::Add,
            Layer::Pool { .. } => LayerKind::Pool,
            Layer::Flatten { .. } => LayerKind::Flatten,
            Layer::PerChannelAffine { .. } => LayerKind::PerChannelAffine,
        }
    }

    pub fn weight(&self) -> Option<&WeightTensor> {
        match self {
            Layer::Linear { weight } | Layer::Conv2d { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub(crate) fn weight_mut(&mut self) -> Option<&mut WeightTensor> {
        match self {
            Layer::Linear { weight } | Layer::Conv2d { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn affine(&self) -> Option<&AffineParams> {
        match self {
            Layer::PerChannelAffine { params } => Some(params),
            _ => None,
        }
    }

    pub(crate) fn affine_mut(&mut self) -> Option<&mut AffineParams> {
        match self {
            Layer::PerChannelAffine { params } => Some(params),
            _ => None,
        }
    }

    fn check(&self, id: NodeId) -> Result<()> {
        match self {
            Layer::Linear { .. } | Layer::Relu | Layer::Add => Ok(()),
            Layer::Conv2d { weight, geometry } => {
                let g = geometry;
                if g.kernel_h == 0 || g.kernel_w == 0 || g.stride == 0 {
                    return Err(Error::Shape(format!("conv {id}: zero kernel or stride")));
                }
                if weight.rows() != g.out_channels || weight.cols() != g.lowered_cols() {
                    return Err(Error::Shape(format!(
                        "conv {id}: weight is {}x{}, geometry implies {}x{}",
                        weight.rows(),
                        weight.cols(),
                        g.out_channels,
                        g.lowered_cols()
                    )));
                }
                Ok(())
            }
            Layer::Pool { window, stride } => {
                if *window == 0 || *stride == 0 {
                    return Err(Error::Shape(format!("pool {id}: zero window or stride")));
                }
                Ok(())
            }
            Layer::Flatten { spatial_area } => {
                if *spatial_area == 0 {
                    return Err(Error::Shape(format!("flatten {id}: zero spatial_area")));
                }
                Ok(())
            }
            Layer::PerChannelAffine { params } => {
                if params.channels() == 0 {
                    return Err(Error::Shape(format!("affine {id}: no channels")));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub id: NodeId,
    pub layer: Layer,
}

impl LayerNode {
    pub fn new(id: u32, layer: Layer) -> Self {
        LayerNode {
            id: NodeId(id),
            layer,
        }
    }

    pub fn kind(&self) -> LayerKind {
        self.layer.kind()
    }
}

/// Activation shape in channel-major (C, H, W) order. Feature vectors use H = W = 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape {
            channels,
            height,
            width,
        }
    }

    pub fn vector(len: usize) -> Self {
        Shape::new(len, 1, 1)
    }

    pub fn spatial_area(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.channels * self.spatial_area()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_vector(&self) -> bool {
        self.height == 1 && self.width == 1
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// A validated layer DAG.
///
/// Every node other than the model inputs has at least one producer, so every
/// node is reachable from an input once acyclicity holds. Construction runs
/// shape inference, which is where producer/consumer width mismatches surface.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGraph {
    nodes: Vec<LayerNode>,
    edges: Vec<(NodeId, NodeId)>,
    inputs: Vec<NodeId>,
    outputs: Vec<NodeId>,
    input_shape: Shape,
    index: BTreeMap<NodeId, usize>,
    preds: Vec<Vec<usize>>,
    succs: Vec<Vec<usize>>,
    topo: Vec<usize>,
    out_shapes: Vec<Shape>,
}

impl WeightGraph {
    pub fn new(
        nodes: Vec<LayerNode>,
        edges: Vec<(NodeId, NodeId)>,
        inputs: Vec<NodeId>,
        outputs: Vec<NodeId>,
        input_shape: Shape,
    ) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.id, i).is_some() {
                return Err(Error::Topology(format!("duplicate node id {}", n.id)));
            }
            n.layer.check(n.id)?;
        }
        let lookup = |id: NodeId, what: &str| {
            index
                .get(&id)
                .copied()
                .ok_or_else(|| Error::Topology(format!("{what} references unknown node {id}")))
        };

        let mut preds = vec![Vec::new(); nodes.len()];
        let mut succs = vec![Vec::new(); nodes.len()];
        for &(src, dst) in &edges {
            let s = lookup(src, "edge")?;
            let d = lookup(dst, "edge")?;
            if s == d {
                return Err(Error::Topology(format!("self-loop on node {src}")));
            }
            if preds[d].contains(&s) {
                return Err(Error::Topology(format!("duplicate edge {src} -> {dst}")));
            }
            preds[d].push(s);
            succs[s].push(d);
        }

        if inputs.is_empty() || outputs.is_empty() {
            return Err(Error::Topology(
                "graph needs at least one input and one output".into(),
            ));
        }
        let mut is_input = vec![false; nodes.len()];
        for &id in &inputs {
            let i = lookup(id, "inputs")?;
            if std::mem::replace(&mut is_input[i], true) {
                return Err(Error::Topology(format!("node {id} listed twice in inputs")));
            }
        }
        let mut is_output = vec![false; nodes.len()];
        for &id in &outputs {
            let i = lookup(id, "outputs")?;
            if std::mem::replace(&mut is_output[i], true) {
                return Err(Error::Topology(format!(
                    "node {id} listed twice in outputs"
                )));
            }
        }

        for (i, n) in nodes.iter().enumerate() {
            let arity = preds[i].len();
            let ok = match (is_input[i], n.kind()) {
                (true, LayerKind::Add) => false,
                (true, _) => arity == 0,
                (false, LayerKind::Add) => arity >= 2,
                (false, _) => arity == 1,
            };
            if !ok {
                return Err(Error::Topology(format!(
                    "node {} ({:?}{}) has {arity} producers",
                    n.id,
                    n.kind(),
                    if is_input[i] { ", model input" } else { "" }
                )));
            }
        }

        // Kahn's algorithm, ties resolved by node order.
        let mut indegree: Vec<usize> = preds.iter().map(Vec::len).collect();
        let mut ready: VecDeque<usize> = (0..nodes.len()).filter(|&i| indegree[i] == 0).collect();
        let mut topo = Vec::with_capacity(nodes.len());
        while let Some(i) = ready.pop_front() {
            topo.push(i);
            for &s in &succs[i] {
                indegree[s] -= 1;
                if indegree[s] == 0 {
                    ready.push_back(s);
                }
            }
        }
        if topo.len() != nodes.len() {
            return Err(Error::Topology("graph contains a cycle".into()));
        }

        let mut out_shapes = vec![Shape::vector(0); nodes.len()];
        for &i in &topo {
            let ins: Vec<Shape> = if is_input[i] {
                vec![input_shape]
            } else {
                preds[i].iter().map(|&p| out_shapes[p]).collect()
            };
            out_shapes[i] = infer_shape(&nodes[i], &ins)?;
        }

        Ok(WeightGraph {
            nodes,
            edges,
            inputs,
            outputs,
            input_shape,
            index,
            preds,
            succs,
            topo,
            out_shapes,
        })
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(NodeId, NodeId)] {
        &self.edges
    }

    pub fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn node(&self, id: NodeId) -> Option<&LayerNode> {
        self.index.get(&id).map(|&i| &self.nodes[i])
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.index.contains_key(&id)
    }

    /// Output activation shape of a node.
    pub fn output_shape(&self, id: NodeId) -> Option<Shape> {
        self.index.get(&id).map(|&i| self.out_shapes[i])
    }

    /// Producers of `id`, in edge order.
    pub fn predecessors(&self, id: NodeId) -> Vec<NodeId> {
        self.index
            .get(&id)
            .map(|&i| self.preds[i].iter().map(|&p| self.nodes[p].id).collect())
            .unwrap_or_default()
    }

    pub fn successors(&self, id: NodeId) -> Vec<NodeId> {
        self.index
            .get(&id)
            .map(|&i| self.succs[i].iter().map(|&s| self.nodes[s].id).collect())
            .unwrap_or_default()
    }

    pub fn topo_order(&self) -> impl Iterator<Item = &LayerNode> + '_ {
        self.topo.iter().map(move |&i| &self.nodes[i])
    }

    pub fn is_input(&self, id: NodeId) -> bool {
        self.inputs.contains(&id)
    }

    pub fn weighted_nodes(&self) -> impl Iterator<Item = (NodeId, &WeightTensor)> + '_ {
        self.nodes
            .iter()
            .filter_map(|n| n.layer.weight().map(|w| (n.id, w)))
    }

    pub fn weight(&self, id: NodeId) -> Option<&WeightTensor> {
        self.node(id).and_then(|n| n.layer.weight())
    }

    pub fn total_weight_elements(&self) -> usize {
        self.weighted_nodes().map(|(_, w)| w.len()).sum()
    }

    pub(crate) fn index_of(&self, id: NodeId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub(crate) fn pred_indices(&self, i: usize) -> &[usize] {
        &self.preds[i]
    }

    pub(crate) fn topo_indices(&self) -> &[usize] {
        &self.topo
    }

    /// Mutable access to parameters. Callers must not change any dimension.
    pub(crate) fn layer_mut(&mut self, id: NodeId) -> Option<&mut Layer> {
        let i = *self.index.get(&id)?;
        Some(&mut self.nodes[i].layer)
    }

    /// True when both graphs have the same nodes, kinds, dimensions and edges,
    /// ignoring parameter values.
    pub fn same_architecture(&self, other: &WeightGraph) -> bool {
        self.edges == other.edges
            && self.inputs == other.inputs
            && self.outputs == other.outputs
            && self.input_shape == other.input_shape
            && self.nodes.len() == other.nodes.len()
            && self
                .nodes
                .iter()
                .zip(&other.nodes)
                .all(|(a, b)| a.id == b.id && same_layer_shape(&a.layer, &b.layer))
    }
}

fn same_layer_shape(a: &Layer, b: &Layer) -> bool {
    match (a, b) {
        (Layer::Linear { weight: x }, Layer::Linear { weight: y }) => {
            x.rows() == y.rows() && x.cols() == y.cols() && x.bias().is_some() == y.bias().is_some()
        }
        (
            Layer::Conv2d {
                weight: x,
                geometry: gx,
            },
            Layer::Conv2d {
                weight: y,
                geometry: gy,
            },
        ) => gx == gy && x.bias().is_some() == y.bias().is_some(),
        (Layer::PerChannelAffine { params: x }, Layer::PerChannelAffine { params: y }) => {
            x.channels() == y.channels()
        }
        (x, y) => x == y,
    }
}

fn infer_shape(node: &LayerNode, ins: &[Shape]) -> Result<Shape> {
    let id = node.id;
    let mismatch = |expected: String, got: Shape| {
        Err(Error::Topology(format!(
            "width mismatch at node {id} ({:?}): expects {expected}, receives {got}",
            node.kind()
        )))
    };
    let x = ins[0];
    match &node.layer {
        Layer::Linear { weight } => {
            if !x.is_vector() || x.channels != weight.cols() {
                return mismatch(format!("vector of {}", weight.cols()), x);
            }
            Ok(Shape::vector(weight.rows()))
        }
        Layer::Conv2d { geometry: g, .. } => {
            let (ph, pw) = (x.height + 2 * g.padding, x.width + 2 * g.padding);
            if x.channels != g.in_channels || ph < g.kernel_h || pw < g.kernel_w {
                return mismatch(
                    format!(
                        "{} channels with spatial >= {}x{}",
                        g.in_channels, g.kernel_h, g.kernel_w
                    ),
                    x,
                );
            }
            Ok(Shape::new(
                g.out_channels,
                (ph - g.kernel_h) / g.stride + 1,
                (pw - g.kernel_w) / g.stride + 1,
            ))
        }
        Layer::Relu => Ok(x),
        Layer::Add => {
            if let Some(&bad) = ins.iter().find(|&&s| s != x) {
                return mismatch(format!("all summands shaped {x}"), bad);
            }
            Ok(x)
        }
        Layer::Pool { window, stride } => {
            if x.height < *window || x.width < *window {
                return mismatch(format!("spatial >= {window}x{window}"), x);
            }
            Ok(Shape::new(
                x.channels,
                (x.height - window) / stride + 1,
                (x.width - window) / stride + 1,
            ))
        }
        Layer::Flatten { spatial_area } => {
            if x.spatial_area() != *spatial_area {
                return mismatch(format!("spatial area {spatial_area}"), x);
            }
            Ok(Shape::vector(x.len()))
        }
        Layer::PerChannelAffine { params } => {
            if x.channels != params.channels() {
                return mismatch(format!("{} channels", params.channels()), x);
            }
            Ok(x)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(id: u32, rows: usize, cols: usize) -> LayerNode {
        LayerNode::new(
            id,
            Layer::Linear {
                weight: WeightTensor::zeros(rows, cols),
            },
        )
    }

    #[test]
    fn two_node_chain() {
        let g = WeightGraph::new(
            vec![linear(0, 4, 4), LayerNode::new(1, Layer::Relu)],
            vec![(NodeId(0), NodeId(1))],
            vec![NodeId(0)],
            vec![NodeId(1)],
            Shape::vector(4),
        )
        .unwrap();
        assert_eq!(g.nodes().len(), 2);
        assert_eq!(g.edges().len(), 1);
        assert_eq!(g.output_shape(NodeId(1)), Some(Shape::vector(4)));
    }

    #[test]
    fn unknown_edge_endpoint() {
        let err = WeightGraph::new(
            vec![linear(0, 4, 4), LayerNode::new(1, Layer::Relu)],
            vec![(NodeId(0), NodeId(99))],
            vec![NodeId(0)],
            vec![NodeId(1)],
            Shape::vector(4),
        )
        .unwrap_err();
        assert!(
            matches!(err, Error::Topology(ref m) if m.contains("99")),
            "{err}"
        );
    }

    #[test]
    fn cycle_is_rejected() {
        let err = WeightGraph::new(
            vec![
                linear(0, 4, 4),
                LayerNode::new(1, Layer::Add),
                LayerNode::new(2, Layer::Relu),
            ],
            vec![
                (NodeId(0), NodeId(1)),
                (NodeId(2), NodeId(1)),
                (NodeId(1), NodeId(2)),
            ],
            vec![NodeId(0)],
            vec![NodeId(2)],
            Shape::vector(4),
        )
        .unwrap_err();
        assert!(
            matches!(err, Error::Topology(ref m) if m.contains("cycle")),
            "{err}"
        );
    }

    #[test]
    fn width_mismatch() {
        let err = WeightGraph::new(
            vec![linear(0, 4, 4), linear(1, 2, 3)],
            vec![(NodeId(0), NodeId(1))],
            vec![NodeId(0)],
            vec![NodeId(1)],
            Shape::vector(4),
        )
        .unwrap_err();
        assert!(
            matches!(err, Error::Topology(ref m) if m.contains("width")),
            "{err}"
        );
    }

    #[test]
    fn orphan_node_is_rejected() {
        let err = WeightGraph::new(
            vec![linear(0, 4, 4), linear(1, 4, 4)],
            vec![],
            vec![NodeId(0)],
            vec![NodeId(0)],
            Shape::vector(4),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Topology(_)));
    }

    #[test]
    fn conv_geometry_must_match_weight() {
        let err = WeightGraph::new(
            vec![LayerNode::new(
                0,
                Layer::Conv2d {
                    weight: WeightTensor::zeros(4, 10),
                    geometry: ConvGeometry::square(1, 4, 3, 1),
                },
            )],
            vec![],
            vec![NodeId(0)],
            vec![NodeId(0)],
            Shape::new(1, 5, 5),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn conv_pool_flatten_shapes() {
        let g = WeightGraph::new(
            vec![
                LayerNode::new(
                    0,
                    Layer::Conv2d {
                        weight: WeightTensor::zeros(4, 18),
                        geometry: ConvGeometry::square(2, 4, 3, 1),
                    },
                ),
                LayerNode::new(
                    1,
                    Layer::Pool {
                        window: 2,
                        stride: 2,
                    },
                ),
                LayerNode::new(2, Layer::Flatten { spatial_area: 4 }),
                linear(3, 3, 16),
            ],
            vec![
                (NodeId(0), NodeId(1)),
                (NodeId(1), NodeId(2)),
                (NodeId(2), NodeId(3)),
            ],
            vec![NodeId(0)],
            vec![NodeId(3)],
            Shape::new(2, 4, 4),
        )
        .unwrap();
        assert_eq!(g.output_shape(NodeId(0)), Some(Shape::new(4, 4, 4)));
        assert_eq!(g.output_shape(NodeId(1)), Some(Shape::new(4, 2, 2)));
        assert_eq!(g.output_shape(NodeId(2)), Some(Shape::vector(16)));
    }
}
