use super::{Layer, LayerNode, NodeId, Shape, WeightGraph};
use crate::error::Result;

/// Incremental construction with sequential ids.
///
/// ```
/// use tilewise::graph::{GraphBuilder, Layer, Shape};
/// use tilewise::tensor::WeightTensor;
///
/// let mut b = GraphBuilder::new(Shape::vector(2));
/// let a = b.input(Layer::Linear { weight: WeightTensor::zeros(3, 2) });
/// let r = b.push(Layer::Relu, &[a]);
/// b.output(r);
/// let g = b.build().unwrap();
/// assert_eq!(g.nodes().len(), 2);
/// ```
#[derive(Debug)]
pub struct GraphBuilder {
    input_shape: Shape,
    nodes: Vec<LayerNode>,
    edges: Vec<(NodeId, NodeId)>,
    inputs: Vec<NodeId>,
    outputs: Vec<NodeId>,
}

impl GraphBuilder {
    pub fn new(input_shape: Shape) -> Self {
        GraphBuilder {
            input_shape,
            nodes: Vec::new(),
            edges: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn next_id(&self) -> NodeId {
        NodeId(self.nodes.len() as u32)
    }

    /// Adds a node fed by the model input.
    pub fn input(&mut self, layer: Layer) -> NodeId {
        let id = self.next_id();
        self.nodes.push(LayerNode { id, layer });
        self.inputs.push(id);
        id
    }

    /// Adds a node consuming the given producers, in order.
    pub fn push(&mut self, layer: Layer, from: &[NodeId]) -> NodeId {
        let id = self.next_id();
        self.nodes.push(LayerNode { id, layer });
        self.edges.extend(from.iter().map(|&src| (src, id)));
        id
    }

    pub fn output(&mut self, id: NodeId) -> &mut Self {
        self.outputs.push(id);
        self
    }

    pub fn build(self) -> Result<WeightGraph> {
        WeightGraph::new(
            self.nodes,
            self.edges,
            self.inputs,
            self.outputs,
            self.input_shape,
        )
    }
}
