//! Permutation reparameterization.
//!
//! Every free layer group gets one permutation of its output features. The
//! members' rows (and biases, and any per-channel affine parameters indexed by
//! those features) are reordered by it; each child reorders its column blocks
//! the same way, so the composed function is unchanged.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_layer_groups, FeatureLink, GroupStatus, LayerGroup, NodeId, WeightGraph};
use crate::importance::Criterion;
use crate::tensor::WeightTensor;

/// A bijection on `0..n`: destination `i` receives source `forward[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation {
    forward: Vec<usize>,
}

impl Permutation {
    pub fn new(forward: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; forward.len()];
        for &i in &forward {
            match seen.get_mut(i) {
                Some(s) if !*s => *s = true,
                Some(_) => return Err(Error::Permutation(format!("index {i} repeated"))),
                None => {
                    return Err(Error::Permutation(format!(
                        "index {i} out of range for size {}",
                        forward.len()
                    )))
                }
            }
        }
        Ok(Permutation { forward })
    }

    pub fn identity(n: usize) -> Self {
        Permutation {
            forward: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    pub fn is_identity(&self) -> bool {
        self.forward.iter().enumerate().all(|(i, &f)| i == f)
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.forward.len()];
        for (dst, &src) in self.forward.iter().enumerate() {
            inv[src] = dst;
        }
        Permutation { forward: inv }
    }

    /// Reorders `values` so that position `i` holds `values[forward[i]]`.
    pub fn apply<T: Copy>(&self, values: &[T]) -> Vec<T> {
        self.forward.iter().map(|&i| values[i]).collect()
    }

    pub fn permute_rows(&self, w: &WeightTensor) -> Result<WeightTensor> {
        if w.rows() != self.len() {
            return Err(Error::Permutation(format!(
                "permutation of size {} applied to {} rows",
                self.len(),
                w.rows()
            )));
        }
        let mut out = w.clone();
        out.gather_rows(&self.forward);
        Ok(out)
    }

    pub fn permute_col_blocks(&self, w: &WeightTensor, block: usize) -> Result<WeightTensor> {
        if w.cols() != self.len() * block {
            return Err(Error::Permutation(format!(
                "permutation of size {} with block {block} applied to {} columns",
                self.len(),
                w.cols()
            )));
        }
        let mut out = w.clone();
        out.gather_col_blocks(&self.forward, block);
        Ok(out)
    }

    /// Ordering of `scores` by descending value; ties keep ascending index.
    pub fn sorting_descending(scores: &[f64]) -> Permutation {
        let mut forward: Vec<usize> = (0..scores.len()).collect();
        forward.sort_by(|&x, &y| scores[y].total_cmp(&scores[x]).then(x.cmp(&y)));
        Permutation { forward }
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Permutation::new(v)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.forward
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformMode {
    /// Permutation chosen from the members' rows (parents to children).
    #[default]
    Row,
    /// Permutation chosen from the children's column blocks (children to parents).
    Column,
}

impl fmt::Display for TransformMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransformMode::Row => "row",
            TransformMode::Column => "column",
        })
    }
}

impl FromStr for TransformMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "row" => Ok(TransformMode::Row),
            "column" | "col" => Ok(TransformMode::Column),
            other => Err(Error::Config(format!("unknown transform mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanGroup {
    pub members: Vec<NodeId>,
    pub children: Vec<FeatureLink>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub affines: Vec<FeatureLink>,
    pub forward: Permutation,
    /// Why the group was left untouched, when it was.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformPlan {
    pub mode: TransformMode,
    pub groups: Vec<PlanGroup>,
}

impl TransformPlan {
    /// Plan that undoes this one.
    pub fn inverse(&self) -> TransformPlan {
        TransformPlan {
            mode: self.mode,
            groups: self
                .groups
                .iter()
                .map(|grp| PlanGroup {
                    forward: grp.forward.inverse(),
                    ..grp.clone()
                })
                .collect(),
        }
    }

    pub fn active_groups(&self) -> impl Iterator<Item = &PlanGroup> + '_ {
        self.groups.iter().filter(|grp| !grp.forward.is_identity())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Invariant(format!("plan serialization failed: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("transform plan: {e}")))
    }
}

fn member_weight(g: &WeightGraph, id: NodeId, features: usize) -> Result<&WeightTensor> {
    let w = g
        .weight(id)
        .ok_or_else(|| Error::PlanMismatch(format!("node {id} has no weight")))?;
    if w.rows() != features {
        return Err(Error::RowMismatch {
            node: id,
            expected: features,
            found: w.rows(),
        });
    }
    Ok(w)
}

fn child_weight(g: &WeightGraph, link: FeatureLink, features: usize) -> Result<&WeightTensor> {
    let w = g
        .weight(link.id)
        .ok_or_else(|| Error::PlanMismatch(format!("child {} has no weight", link.id)))?;
    if link.block == 0 || w.cols() != features * link.block {
        return Err(Error::BlockSize {
            node: link.id,
            cols: w.cols(),
            features,
            block: link.block,
        });
    }
    Ok(w)
}

/// Row permutation sorting the group's concatenated rows by descending mean importance.
pub fn build_trans(group: &LayerGroup, g: &WeightGraph, c: Criterion) -> Result<Permutation> {
    let n = group.features;
    let mut sums = vec![0.0f64; n];
    let mut width = 0usize;
    for &m in &group.members {
        let w = member_weight(g, m, n)?;
        for (r, sum) in sums.iter_mut().enumerate() {
            *sum += w.row(r).iter().map(|&x| c.score(x)).sum::<f64>();
        }
        width += w.cols();
    }
    let means: Vec<f64> = sums.iter().map(|s| s / width.max(1) as f64).collect();
    Ok(Permutation::sorting_descending(&means))
}

/// Row permutation of a single matrix, sorting rows by descending mean importance.
pub fn sort_rows_by_importance(w: &WeightTensor, c: Criterion) -> Permutation {
    let means: Vec<f64> = (0..w.rows())
        .map(|r| w.row(r).iter().map(|&x| c.score(x)).sum::<f64>() / w.cols().max(1) as f64)
        .collect();
    Permutation::sorting_descending(&means)
}

/// Feature permutation sorting the children's column blocks by descending mean importance.
pub fn build_column_trans(
    group: &LayerGroup,
    g: &WeightGraph,
    c: Criterion,
) -> Result<Permutation> {
    let n = group.features;
    let mut sums = vec![0.0f64; n];
    let mut count = 0usize;
    for &link in &group.children {
        let w = child_weight(g, link, n)?;
        for r in 0..w.rows() {
            for (f, chunk) in w.row(r).chunks_exact(link.block).enumerate() {
                sums[f] += chunk.iter().map(|&x| c.score(x)).sum::<f64>();
            }
        }
        count += w.rows() * link.block;
    }
    let means: Vec<f64> = sums.iter().map(|s| s / count.max(1) as f64).collect();
    Ok(Permutation::sorting_descending(&means))
}

/// Applies every non-identity group of `plan`. The plan's groups must match
/// the graph's own free layer groups (members, children and affine links).
pub fn apply_transform(g: &WeightGraph, plan: &TransformPlan) -> Result<WeightGraph> {
    let groups = build_layer_groups(g);
    let mut seen = BTreeSet::new();
    for grp in &plan.groups {
        for &m in &grp.members {
            if !seen.insert(m) {
                return Err(Error::PlanMismatch(format!(
                    "node {m} appears in two groups"
                )));
            }
        }
    }

    for grp in &plan.groups {
        let n = grp.forward.len();
        let actual = groups
            .iter()
            .find(|lg| lg.members == grp.members)
            .ok_or_else(|| {
                Error::PlanMismatch(format!(
                    "members {:?} do not form a layer group",
                    grp.members
                ))
            })?;
        if actual.children != grp.children || actual.affines != grp.affines {
            return Err(Error::PlanMismatch(format!(
                "group {:?}: children or affine links differ from the graph",
                grp.members
            )));
        }
        if grp.forward.is_identity() {
            continue;
        }
        for &m in &grp.members {
            member_weight(g, m, n)?;
        }
        for &link in &grp.children {
            child_weight(g, link, n)?;
        }
        if let GroupStatus::Forbidden(reason) = &actual.status {
            return Err(Error::PlanMismatch(format!(
                "group {:?} may not be transformed: {reason}",
                grp.members
            )));
        }
    }

    let mut out = g.clone();
    for grp in plan.active_groups() {
        let order = grp.forward.forward();
        for &m in &grp.members {
            if let Some(w) = out.layer_mut(m).and_then(|l| l.weight_mut()) {
                w.gather_rows(order);
            }
        }
        for link in &grp.affines {
            if let Some(p) = out.layer_mut(link.id).and_then(|l| l.affine_mut()) {
                p.gather_blocks(order, link.block);
            }
        }
        // Rows first, then columns, for tensors that are both member and child.
        for link in &grp.children {
            if let Some(w) = out.layer_mut(link.id).and_then(|l| l.weight_mut()) {
                w.gather_col_blocks(order, link.block);
            }
        }
    }
    Ok(out)
}

/// Builds one permutation per free layer group and applies them all.
pub fn tiletrans(
    g: &WeightGraph,
    c: Criterion,
    mode: TransformMode,
) -> Result<(WeightGraph, TransformPlan)> {
    let mut groups = Vec::new();
    for lg in build_layer_groups(g) {
        let (forward, skipped) = match &lg.status {
            GroupStatus::Free => {
                let perm = match mode {
                    TransformMode::Row => build_trans(&lg, g, c)?,
                    TransformMode::Column => build_column_trans(&lg, g, c)?,
                };
                (perm, None)
            }
            GroupStatus::Forbidden(reason) => {
                (Permutation::identity(lg.features), Some(reason.to_string()))
            }
        };
        groups.push(PlanGroup {
            members: lg.members,
            children: lg.children,
            affines: lg.affines,
            forward,
            skipped,
        });
    }
    let plan = TransformPlan { mode, groups };
    let out = apply_transform(g, &plan)?;
    Ok((out, plan))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphBuilder, Layer, Shape};

    #[test]
    fn permutation_validation() {
        assert!(Permutation::new(vec![1, 0, 2]).is_ok());
        assert!(Permutation::new(vec![0, 0]).is_err());
        assert!(Permutation::new(vec![0, 2]).is_err());
        let p = Permutation::new(vec![2, 0, 1]).unwrap();
        assert_eq!(p.inverse().forward(), &[1, 2, 0]);
        assert!(p.apply(&p.inverse().apply(&[7, 8, 9])) == vec![7, 8, 9]);
    }

    #[test]
    fn permutation_json_rejects_non_bijection() {
        assert!(serde_json::from_str::<Permutation>("[1,1]").is_err());
        let p: Permutation = serde_json::from_str("[1,0]").unwrap();
        assert_eq!(serde_json::to_string(&p).unwrap(), "[1,0]");
    }

    fn single_group(w: WeightTensor) -> (WeightGraph, LayerGroup) {
        let n = w.rows();
        let cols = w.cols();
        let mut b = GraphBuilder::new(Shape::vector(cols));
        let s = b.input(Layer::Linear {
            weight: WeightTensor::zeros(cols, cols),
        });
        let m = b.push(Layer::Linear { weight: w }, &[s]);
        let z = b.push(
            Layer::Linear {
                weight: WeightTensor::zeros(1, n),
            },
            &[m],
        );
        b.output(z);
        let g = b.build().unwrap();
        let grp = build_layer_groups(&g)
            .into_iter()
            .find(|lg| lg.members == vec![m])
            .unwrap();
        (g, grp)
    }

    #[test]
    fn sorts_rows_by_descending_mean() {
        let w = WeightTensor::new(3, 2, vec![1.0, 1.0, 3.0, 3.0, 2.0, 2.0], None).unwrap();
        let (g, grp) = single_group(w);
        let p = build_trans(&grp, &g, Criterion::L1).unwrap();
        assert_eq!(p.forward(), &[1, 2, 0]);
    }

    #[test]
    fn sorted_matrix_gives_identity() {
        let w = WeightTensor::new(3, 1, vec![-5.0, 4.0, 0.5], None).unwrap();
        let (g, grp) = single_group(w);
        assert!(build_trans(&grp, &g, Criterion::L1).unwrap().is_identity());
    }

    #[test]
    fn bad_block_is_reported() {
        let w = WeightTensor::zeros(2, 6);
        let p = Permutation::identity(2);
        assert!(p.permute_col_blocks(&w, 3).is_ok());
        assert!(p.permute_col_blocks(&w, 2).is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("row".parse::<TransformMode>().unwrap(), TransformMode::Row);
        assert_eq!(
            "Column".parse::<TransformMode>().unwrap(),
            TransformMode::Column
        );
        assert!("diag".parse::<TransformMode>().is_err());
    }
}
