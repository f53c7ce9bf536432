//! Parent/child analysis and layer groups.
//!
//! A weighted layer's parents are its nearest weighted ancestors: traversal
//! passes through relu, pool, flatten, add and per-channel affine nodes. All
//! parents of one consumer must share a transformation, so parent sets that
//! intersect are merged into layer groups.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::mem;

use serde::{Deserialize, Serialize};

use super::{Layer, LayerKind, NodeId, WeightGraph};
use crate::error::{Error, Result};

/// A parent in the effective-parent relation: a weighted node or the model input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParentRef {
    Input,
    Node(NodeId),
}

impl fmt::Display for ParentRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParentRef::Input => f.write_str("INPUT"),
            ParentRef::Node(id) => write!(f, "{id}"),
        }
    }
}

/// A parent reference together with the number of consecutive consumer
/// features each parent feature expands to (flatten spatial areas along the path).
type Link = (ParentRef, usize);

pub(crate) struct Lineage {
    /// Effective parents of each node (by node index), with expansion factors.
    parents: Vec<BTreeSet<Link>>,
    /// Weighted nodes (or INPUT) whose features reach a model output unweighted.
    output_sources: BTreeSet<ParentRef>,
}

impl Lineage {
    pub(crate) fn new(g: &WeightGraph) -> Self {
        let n = g.nodes.len();
        let mut parents: Vec<BTreeSet<Link>> = vec![BTreeSet::new(); n];
        // Features flowing out of each node, traced back to their weighted origin.
        let mut sources: Vec<BTreeSet<Link>> = vec![BTreeSet::new(); n];
        for &i in g.topo_indices() {
            let node = &g.nodes[i];
            let mut ps = BTreeSet::new();
            if g.is_input(node.id) {
                ps.insert((ParentRef::Input, 1));
            }
            for &p in g.pred_indices(i) {
                ps.extend(sources[p].iter().copied());
            }
            sources[i] = match &node.layer {
                Layer::Linear { .. } | Layer::Conv2d { .. } => {
                    BTreeSet::from([(ParentRef::Node(node.id), 1)])
                }
                Layer::Flatten { spatial_area } => {
                    ps.iter().map(|&(p, b)| (p, b * spatial_area)).collect()
                }
                _ => ps.clone(),
            };
            parents[i] = ps;
        }
        let output_sources = g
            .outputs
            .iter()
            .filter_map(|&id| g.index_of(id))
            .flat_map(|i| sources[i].iter().map(|&(p, _)| p))
            .collect();
        Lineage {
            parents,
            output_sources,
        }
    }

    pub(crate) fn links(&self, index: usize) -> &BTreeSet<Link> {
        &self.parents[index]
    }

    fn parent_set(&self, index: usize) -> BTreeSet<ParentRef> {
        self.parents[index].iter().map(|&(p, _)| p).collect()
    }
}

impl WeightGraph {
    /// Nearest weighted ancestors of `id`, or `INPUT` where the model input
    /// reaches it without passing a weighted layer.
    pub fn effective_parents(&self, id: NodeId) -> Result<BTreeSet<ParentRef>> {
        let i = self
            .index_of(id)
            .ok_or_else(|| Error::Topology(format!("unknown node {id}")))?;
        Ok(Lineage::new(self).parent_set(i))
    }

    /// Weighted nodes that have `id` among their effective parents.
    pub fn effective_children(&self, id: NodeId) -> Result<BTreeSet<NodeId>> {
        if !self.contains(id) {
            return Err(Error::Topology(format!("unknown node {id}")));
        }
        let lineage = Lineage::new(self);
        Ok(self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.kind().is_weighted())
            .filter(|&(i, _)| lineage.parent_set(i).contains(&ParentRef::Node(id)))
            .map(|(_, n)| n.id)
            .collect())
    }
}

/// A consumer whose columns (or an affine node whose channels) are indexed by
/// a group's output features, `block` consecutive entries per feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FeatureLink {
    pub id: NodeId,
    pub block: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForbidReason {
    /// The group shares features with the model input, or a member reads it directly.
    ModelInput,
    /// A member's features reach a model output without a weighted layer in between.
    ModelOutput,
    /// Members disagree on their row count.
    RowMismatch,
    /// A child or affine node cannot be expanded at a single consistent block size.
    BlockMismatch { node: NodeId },
}

impl fmt::Display for ForbidReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ForbidReason::ModelInput => f.write_str("touches model input"),
            ForbidReason::ModelOutput => f.write_str("touches model output"),
            ForbidReason::RowMismatch => f.write_str("members have different row counts"),
            ForbidReason::BlockMismatch { node } => {
                write!(f, "incompatible block expansion at node {node}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GroupStatus {
    Free,
    Forbidden(ForbidReason),
}

/// Weighted layers that must share one row transformation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerGroup {
    /// Sorted ascending.
    pub members: Vec<NodeId>,
    /// Weighted consumers of the members' outputs, sorted by id.
    pub children: Vec<FeatureLink>,
    /// Per-channel affine nodes indexed by the members' output features.
    pub affines: Vec<FeatureLink>,
    /// Row count shared by the members (the first member's when they disagree).
    pub features: usize,
    pub status: GroupStatus,
}

impl LayerGroup {
    pub fn is_free(&self) -> bool {
        self.status == GroupStatus::Free
    }
}

#[derive(Debug)]
struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    fn new(len: usize) -> Self {
        UnionFind {
            parent: (0..len).collect(),
            size: vec![1; len],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, x: usize, y: usize) {
        let (mut a, mut b) = (self.find(x), self.find(y));
        if a == b {
            return;
        }
        if self.size[a] < self.size[b] {
            mem::swap(&mut a, &mut b);
        }
        self.parent[b] = a;
        self.size[a] += self.size[b];
    }
}

/// Merges intersecting sets until no two results intersect.
///
/// Output sets are sorted by their smallest element; empty inputs vanish.
pub fn merge_parent_sets<T: Ord + Copy>(sets: &[BTreeSet<T>]) -> Vec<BTreeSet<T>> {
    let universe: Vec<T> = sets
        .iter()
        .flatten()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let pos = |x: &T| universe.binary_search(x).expect("element in universe");
    let mut uf = UnionFind::new(universe.len());
    for set in sets {
        let mut it = set.iter();
        if let Some(first) = it.next() {
            let f = pos(first);
            for x in it {
                uf.union(f, pos(x));
            }
        }
    }
    let mut by_root: BTreeMap<usize, BTreeSet<T>> = BTreeMap::new();
    for (i, &x) in universe.iter().enumerate() {
        by_root.entry(uf.find(i)).or_default().insert(x);
    }
    let mut merged: Vec<BTreeSet<T>> = by_root.into_values().collect();
    merged.sort_by(|a, b| a.first().cmp(&b.first()));
    merged
}

/// Partitions the weighted nodes into layer groups, canonically ordered by
/// smallest member id.
pub fn build_layer_groups(g: &WeightGraph) -> Vec<LayerGroup> {
    let lineage = Lineage::new(g);

    // Every node's parent set, weightless ones included: an add feeding only a
    // model output still ties its branches together.
    let mut sets: Vec<BTreeSet<ParentRef>> = Vec::new();
    for (i, node) in g.nodes.iter().enumerate() {
        sets.push(lineage.parent_set(i));
        if node.kind().is_weighted() {
            sets.push(BTreeSet::from([ParentRef::Node(node.id)]));
        }
    }

    let mut groups = Vec::new();
    for set in merge_parent_sets(&sets) {
        let members: Vec<NodeId> = set
            .iter()
            .filter_map(|p| match p {
                ParentRef::Node(id) => Some(*id),
                ParentRef::Input => None,
            })
            .collect();
        if members.is_empty() {
            continue;
        }
        groups.push(describe_group(
            g,
            &lineage,
            members,
            set.contains(&ParentRef::Input),
        ));
    }
    groups.sort_by_key(|grp| grp.members[0]);
    groups
}

fn describe_group(
    g: &WeightGraph,
    lineage: &Lineage,
    members: Vec<NodeId>,
    shares_input: bool,
) -> LayerGroup {
    let rows: Vec<usize> = members
        .iter()
        .map(|&m| g.weight(m).map_or(0, |w| w.rows()))
        .collect();
    let features = rows[0];
    let member_set: BTreeSet<ParentRef> = members.iter().map(|&m| ParentRef::Node(m)).collect();

    let mut children = Vec::new();
    let mut affines = Vec::new();
    let mut block_conflict = None;
    for (i, node) in g.nodes.iter().enumerate() {
        // Lowered conv columns hold a full kernel window per input channel.
        let (width, unit) = match &node.layer {
            Layer::Linear { weight } => (weight.cols(), 1),
            Layer::Conv2d { weight, geometry } => (weight.cols(), geometry.kernel_area()),
            Layer::PerChannelAffine { params } => (params.channels(), 1),
            _ => continue,
        };
        let blocks: BTreeSet<usize> = lineage
            .links(i)
            .iter()
            .filter(|(p, _)| member_set.contains(p))
            .map(|&(_, b)| b * unit)
            .collect();
        let Some(&block) = blocks.first() else {
            continue;
        };
        if blocks.len() > 1 || width != features * block {
            block_conflict.get_or_insert(node.id);
        }
        let link = FeatureLink { id: node.id, block };
        if node.kind() == LayerKind::PerChannelAffine {
            affines.push(link);
        } else {
            children.push(link);
        }
    }

    let reads_input = members.iter().any(|&m| {
        g.index_of(m)
            .is_some_and(|i| lineage.links(i).iter().any(|(p, _)| *p == ParentRef::Input))
    });
    let feeds_output = members
        .iter()
        .any(|&m| lineage.output_sources.contains(&ParentRef::Node(m)));

    let status = if shares_input || reads_input {
        GroupStatus::Forbidden(ForbidReason::ModelInput)
    } else if feeds_output {
        GroupStatus::Forbidden(ForbidReason::ModelOutput)
    } else if rows.iter().any(|&r| r != features) {
        GroupStatus::Forbidden(ForbidReason::RowMismatch)
    } else if let Some(node) = block_conflict {
        GroupStatus::Forbidden(ForbidReason::BlockMismatch { node })
    } else {
        GroupStatus::Free
    };

    LayerGroup {
        members,
        children,
        affines,
        features,
        status,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphBuilder, Shape};
    use crate::tensor::WeightTensor;

    fn lin(n: usize) -> Layer {
        Layer::Linear {
            weight: WeightTensor::zeros(n, n),
        }
    }

    fn ids(v: &[u32]) -> Vec<NodeId> {
        v.iter().map(|&i| NodeId(i)).collect()
    }

    fn parents(v: &[u32]) -> BTreeSet<ParentRef> {
        v.iter().map(|&i| ParentRef::Node(NodeId(i))).collect()
    }

    #[test]
    fn chain_parent_is_previous_layer() {
        let mut b = GraphBuilder::new(Shape::vector(3));
        let a = b.input(lin(3));
        let r = b.push(Layer::Relu, &[a]);
        let c = b.push(lin(3), &[r]);
        b.output(c);
        let g = b.build().unwrap();
        assert_eq!(g.effective_parents(c).unwrap(), parents(&[0]));
        assert_eq!(
            g.effective_parents(a).unwrap(),
            BTreeSet::from([ParentRef::Input])
        );
        assert_eq!(g.effective_children(a).unwrap(), BTreeSet::from([c]));
    }

    #[test]
    fn three_linear_chain_groups() {
        let mut b = GraphBuilder::new(Shape::vector(3));
        let a = b.input(lin(3));
        let m = b.push(lin(3), &[a]);
        let z = b.push(lin(3), &[m]);
        b.output(z);
        let groups = build_layer_groups(&b.build().unwrap());
        assert_eq!(groups.len(), 3);
        assert_eq!(groups[0].members, ids(&[0]));
        assert_eq!(
            groups[0].status,
            GroupStatus::Forbidden(ForbidReason::ModelInput)
        );
        assert_eq!(groups[1].members, ids(&[1]));
        assert!(groups[1].is_free());
        assert_eq!(
            groups[1].children,
            vec![FeatureLink {
                id: NodeId(2),
                block: 1
            }]
        );
        assert_eq!(
            groups[2].status,
            GroupStatus::Forbidden(ForbidReason::ModelOutput)
        );
    }

    #[test]
    fn output_through_relu_is_forbidden() {
        let mut b = GraphBuilder::new(Shape::vector(3));
        let s = b.input(lin(3));
        let a = b.push(lin(3), &[s]);
        let r = b.push(Layer::Relu, &[a]);
        b.output(r);
        let groups = build_layer_groups(&b.build().unwrap());
        assert_eq!(
            groups[1].status,
            GroupStatus::Forbidden(ForbidReason::ModelOutput)
        );
    }

    #[test]
    fn residual_shortcut_from_input_forbids_group() {
        let mut b = GraphBuilder::new(Shape::vector(3));
        let r = b.input(Layer::Relu);
        let a = b.push(lin(3), &[r]);
        let s = b.push(Layer::Add, &[r, a]);
        let z = b.push(lin(3), &[s]);
        b.output(z);
        let g = b.build().unwrap();
        assert_eq!(
            g.effective_parents(z).unwrap(),
            BTreeSet::from([ParentRef::Input, ParentRef::Node(a)])
        );
        let groups = build_layer_groups(&g);
        assert_eq!(groups[0].members, vec![a]);
        assert_eq!(
            groups[0].status,
            GroupStatus::Forbidden(ForbidReason::ModelInput)
        );
    }

    #[test]
    fn flatten_sets_block_size() {
        use crate::graph::ConvGeometry;
        let mut b = GraphBuilder::new(Shape::new(1, 3, 3));
        let c0 = b.input(Layer::Conv2d {
            weight: WeightTensor::zeros(2, 9),
            geometry: ConvGeometry::square(1, 2, 3, 1),
        });
        let c1 = b.push(
            Layer::Conv2d {
                weight: WeightTensor::zeros(4, 18),
                geometry: ConvGeometry::square(2, 4, 3, 1),
            },
            &[c0],
        );
        let bn = b.push(
            Layer::PerChannelAffine {
                params: crate::tensor::AffineParams::new(vec![1.0; 4], vec![0.0; 4]).unwrap(),
            },
            &[c1],
        );
        let f = b.push(Layer::Flatten { spatial_area: 9 }, &[bn]);
        let l = b.push(
            Layer::Linear {
                weight: WeightTensor::zeros(2, 36),
            },
            &[f],
        );
        b.output(l);
        let groups = build_layer_groups(&b.build().unwrap());
        let g1 = &groups[1];
        assert_eq!(g1.members, vec![c1]);
        assert!(g1.is_free());
        assert_eq!(g1.children, vec![FeatureLink { id: l, block: 9 }]);
        assert_eq!(g1.affines, vec![FeatureLink { id: bn, block: 1 }]);
        // conv child of the first conv expands by kernel area
        assert_eq!(groups[0].children, vec![FeatureLink { id: c1, block: 9 }]);
    }

    #[test]
    fn merge_is_idempotent_on_example() {
        let sets = vec![
            BTreeSet::from([1, 2]),
            BTreeSet::from([2, 3]),
            BTreeSet::from([7]),
            BTreeSet::from([5, 7]),
            BTreeSet::new(),
        ];
        let once = merge_parent_sets(&sets);
        assert_eq!(
            once,
            vec![BTreeSet::from([1, 2, 3]), BTreeSet::from([5, 7])]
        );
        assert_eq!(merge_parent_sets(&once), once);
    }
}
