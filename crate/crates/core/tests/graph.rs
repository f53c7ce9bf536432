use std::collections::BTreeSet;

use proptest::prelude::*;

use tilewise::fixtures::{self, WeightInit};
use tilewise::graph::format::{decode, encode};
use tilewise::graph::{
    build_layer_groups, load_graph, merge_parent_sets, save_graph, FeatureLink, ForbidReason,
    GroupStatus, LayerKind, NodeId, ParentRef,
};
use tilewise::tensor::WeightTensor;
use tilewise::Error;

fn ids(v: &[u32]) -> Vec<NodeId> {
    v.iter().map(|&i| NodeId(i)).collect()
}

fn links(v: &[(u32, usize)]) -> Vec<FeatureLink> {
    v.iter()
        .map(|&(id, block)| FeatureLink {
            id: NodeId(id),
            block,
        })
        .collect()
}

const CHAIN: &str = r#"{
  "format_version": 1,
  "input_shape": [4, 1, 1],
  "nodes": [
    {"id": 0, "kind": "linear", "rows": 4, "cols": 4, "weight_offset": 0},
    {"id": 1, "kind": "relu"}
  ],
  "edges": [[0, 1]],
  "inputs": [0],
  "outputs": [1]
}"#;

#[test]
fn two_node_chain_manifest() {
    let blob: Vec<u8> = (0..16).flat_map(|i| (i as f32).to_le_bytes()).collect();
    let g = decode(CHAIN, &blob).unwrap();
    assert_eq!(g.nodes().len(), 2);
    assert_eq!(g.edges().len(), 1);
    assert_eq!(g.weight(NodeId(0)).unwrap().get(1, 2), 6.0);
}

#[test]
fn edge_to_unknown_node_is_topology_error() {
    let text = CHAIN.replace("[[0, 1]]", "[[0, 99]]");
    let blob = vec![0u8; 64];
    assert!(matches!(decode(&text, &blob), Err(Error::Topology(_))));
}

#[test]
fn alexnet_fixture_counts() {
    let g = fixtures::alexnet_like(WeightInit::Gaussian, 0).unwrap();
    let count = |k: LayerKind| g.nodes().iter().filter(|n| n.kind() == k).count();
    assert_eq!(count(LayerKind::Conv2d), 5);
    assert_eq!(count(LayerKind::Linear), 3);
    assert_eq!(count(LayerKind::Add), 0);
}

#[test]
fn residual_example_parents_and_groups() {
    let (g, ex) = fixtures::residual_example_random(4, WeightInit::Gaussian, 0).unwrap();
    let node = |id: NodeId| ParentRef::Node(id);
    assert_eq!(
        g.effective_parents(ex.d).unwrap(),
        BTreeSet::from([node(ex.a), node(ex.c)])
    );
    assert_eq!(
        g.effective_parents(ex.c).unwrap(),
        BTreeSet::from([node(ex.b)])
    );
    assert_eq!(
        g.effective_parents(ex.stem).unwrap(),
        BTreeSet::from([ParentRef::Input])
    );

    let groups = build_layer_groups(&g);
    let ac = groups
        .iter()
        .find(|grp| grp.members == vec![ex.a, ex.c])
        .unwrap();
    assert_eq!(ac.children, links(&[(ex.b.0, 1), (ex.d.0, 1)]));
    assert!(ac.is_free());
    let b = groups.iter().find(|grp| grp.members == vec![ex.b]).unwrap();
    assert_eq!(b.children, links(&[(ex.c.0, 1)]));
    assert!(b.is_free());
    let d = groups.iter().find(|grp| grp.members == vec![ex.d]).unwrap();
    assert_eq!(d.status, GroupStatus::Forbidden(ForbidReason::ModelOutput));
    let s = groups
        .iter()
        .find(|grp| grp.members == vec![ex.stem])
        .unwrap();
    assert_eq!(s.status, GroupStatus::Forbidden(ForbidReason::ModelInput));
}

#[test]
fn three_linear_chain_forbids_ends() {
    let g = fixtures::mlp(&[4, 4, 4, 4], WeightInit::Gaussian, 0).unwrap();
    let groups = build_layer_groups(&g);
    let statuses: Vec<_> = groups.iter().map(|grp| grp.status.clone()).collect();
    assert_eq!(
        statuses,
        vec![
            GroupStatus::Forbidden(ForbidReason::ModelInput),
            GroupStatus::Free,
            GroupStatus::Forbidden(ForbidReason::ModelOutput),
        ]
    );
}

// Node ids follow the fixture's construction order:
// stem 0, entry conv 3, block convs 6/9 and 13/16, projection block 20/23 with shortcut 25, head 31.
#[test]
fn resnet_block_exits_share_one_group() {
    let g = fixtures::resnet_like(WeightInit::Gaussian, 0).unwrap();
    let groups = build_layer_groups(&g);
    let members: Vec<Vec<NodeId>> = groups.iter().map(|grp| grp.members.clone()).collect();
    assert_eq!(
        members,
        vec![
            ids(&[0]),
            ids(&[3, 9, 16]),
            ids(&[6]),
            ids(&[13]),
            ids(&[20]),
            ids(&[23, 25]),
            ids(&[31]),
        ]
    );
    let trunk = &groups[1];
    assert!(trunk.is_free());
    assert_eq!(trunk.children, links(&[(6, 9), (13, 9), (20, 9), (25, 1)]));
    assert_eq!(trunk.affines, links(&[(4, 1), (10, 1), (17, 1)]));
    assert_eq!(groups[5].children, links(&[(31, 16)]));
    assert_eq!(
        groups[0].status,
        GroupStatus::Forbidden(ForbidReason::ModelInput)
    );
    assert_eq!(
        groups[6].status,
        GroupStatus::Forbidden(ForbidReason::ModelOutput)
    );
}

#[test]
fn branches_into_one_add_share_a_group() {
    let mut b = tilewise::graph::GraphBuilder::new(tilewise::graph::Shape::vector(4));
    let lin = |r, c| tilewise::graph::Layer::Linear {
        weight: WeightTensor::zeros(r, c),
    };
    let stem = b.input(lin(4, 4));
    let x = b.push(lin(3, 4), &[stem]);
    let y = b.push(lin(3, 4), &[stem]);
    let s = b.push(tilewise::graph::Layer::Add, &[x, y]);
    let out = b.push(lin(2, 3), &[s]);
    b.output(out);
    let g = b.build().unwrap();
    let groups = build_layer_groups(&g);
    assert_eq!(groups[1].members, vec![x, y]);
    assert!(groups[1].is_free());
}

#[test]
fn width_mismatch_is_rejected_at_build() {
    let mut b = tilewise::graph::GraphBuilder::new(tilewise::graph::Shape::vector(4));
    let a = b.input(tilewise::graph::Layer::Linear {
        weight: WeightTensor::zeros(3, 4),
    });
    let c = b.push(
        tilewise::graph::Layer::Linear {
            weight: WeightTensor::zeros(2, 4),
        },
        &[a],
    );
    b.output(c);
    match b.build() {
        Err(Error::Topology(msg)) => assert!(msg.contains("width mismatch"), "{msg}"),
        other => panic!("expected topology error, got {other:?}"),
    }
}

#[test]
fn group_lists_are_deterministic() {
    for seed in 0..10 {
        let g = fixtures::random_residual_dag(seed, 20, WeightInit::Gaussian).unwrap();
        let (m, blob) = encode(&g).unwrap();
        let h = decode(&m, &blob).unwrap();
        assert_eq!(build_layer_groups(&g), build_layer_groups(&h));
    }
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let g = fixtures::resnet_like(WeightInit::Gaussian, 3).unwrap();
    let p1 = dir.path().join("a.json");
    let p2 = dir.path().join("b.json");
    save_graph(&g, &p1).unwrap();
    save_graph(&load_graph(&p1).unwrap(), &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(
        std::fs::read(dir.path().join("a.bin")).unwrap(),
        std::fs::read(dir.path().join("b.bin")).unwrap()
    );
}

#[test]
fn missing_model_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_graph(dir.path().join("nope.json")),
        Err(Error::Io { .. })
    ));
}

proptest! {
    #[test]
    fn groups_partition_weighted_nodes(seed in 0u64..5000) {
        let g = fixtures::random_residual_dag(seed, 20, WeightInit::Gaussian).unwrap();
        let groups = build_layer_groups(&g);
        let mut seen = BTreeSet::new();
        for grp in &groups {
            for &m in &grp.members {
                prop_assert!(seen.insert(m));
            }
        }
        let weighted: BTreeSet<NodeId> = g.weighted_nodes().map(|(id, _)| id).collect();
        prop_assert_eq!(seen, weighted);
        let firsts: Vec<NodeId> = groups.iter().map(|grp| grp.members[0]).collect();
        prop_assert!(firsts.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn merge_is_idempotent(sets in prop::collection::vec(prop::collection::btree_set(0u8..30, 0..5), 0..12)) {
        let once = merge_parent_sets(&sets);
        prop_assert_eq!(merge_parent_sets(&once), once.clone());
        for s in &sets {
            prop_assert!(s.is_empty() || once.iter().filter(|m| s.is_subset(m)).count() == 1);
        }
        for (i, a) in once.iter().enumerate() {
            for b in &once[i + 1..] {
                prop_assert!(a.is_disjoint(b));
            }
        }
    }
}
