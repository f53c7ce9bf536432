//! Global tile pruning: one pool of tiles across all weighted layers, one threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NodeId, WeightGraph};
use crate::importance::{score_graph, tile_scores, Criterion, ScoredLayer, TileShape};

/// Slack when converting a sparsity fraction to an element count, so that
/// e.g. 0.29 x 100 counts as 29 rather than 28.999999999999996.
const BUDGET_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub tile: TileShape,
    pub sparsity: f64,
    pub criterion: Criterion,
}

impl PrunePlan {
    pub fn new(tile: TileShape, sparsity: f64, criterion: Criterion) -> Result<Self> {
        check_sparsity(sparsity)?;
        TileShape::new(tile.a, tile.b)?;
        Ok(PrunePlan {
            tile,
            sparsity,
            criterion,
        })
    }
}

pub(crate) fn check_sparsity(s: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Config(format!("sparsity {s} outside [0, 1]")));
    }
    Ok(())
}

/// Largest element count not exceeding `s * total`.
pub fn element_budget(s: f64, total: usize) -> usize {
    ((s * total as f64 + BUDGET_EPS).floor() as usize).min(total)
}

/// Tile-level keep flags for one layer, row-major over the tile grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    pub id: NodeId,
    pub rows: usize,
    pub cols: usize,
    pub tile: TileShape,
    keep: Vec<bool>,
}

impl LayerMask {
    pub fn all(id: NodeId, rows: usize, cols: usize, tile: TileShape, keep: bool) -> Self {
        let n = rows.div_ceil(tile.a) * cols.div_ceil(tile.b);
        LayerMask {
            id,
            rows,
            cols,
            tile,
            keep: vec![keep; n],
        }
    }

    pub fn tile_rows(&self) -> usize {
        self.rows.div_ceil(self.tile.a)
    }

    pub fn tile_cols(&self) -> usize {
        self.cols.div_ceil(self.tile.b)
    }

    pub fn tile_keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn is_tile_kept(&self, tile_row: usize, tile_col: usize) -> bool {
        self.keep[tile_row * self.tile_cols() + tile_col]
    }

    pub fn is_kept(&self, r: usize, c: usize) -> bool {
        self.is_tile_kept(r / self.tile.a, c / self.tile.b)
    }

    /// Row-major element mask, `true` = keep.
    pub fn element_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(self.is_kept(r, c));
            }
        }
        out
    }

    pub fn kept_tiles(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&i| self.keep[i]).collect()
    }

    pub fn deleted_elements(&self) -> usize {
        self.element_mask().iter().filter(|&&k| !k).count()
    }

    fn tile_elements(&self, tile_row: usize, tile_col: usize) -> usize {
        let h = (self.rows - tile_row * self.tile.a).min(self.tile.a);
        let w = (self.cols - tile_col * self.tile.b).min(self.tile.b);
        h * w
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    pub tile: TileShape,
    pub layers: Vec<LayerMask>,
}

impl PruneMask {
    pub fn layer(&self, id: NodeId) -> Option<&LayerMask> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn total_elements(&self) -> usize {
        self.layers.iter().map(|l| l.rows * l.cols).sum()
    }

    pub fn deleted_elements(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                (0..l.tile_rows())
                    .flat_map(|tr| (0..l.tile_cols()).map(move |tc| (tr, tc)))
                    .filter(|&(tr, tc)| !l.is_tile_kept(tr, tc))
                    .map(|(tr, tc)| l.tile_elements(tr, tc))
                    .sum::<usize>()
            })
            .sum()
    }

    pub fn achieved_sparsity(&self) -> f64 {
        let total = self.total_elements();
        if total == 0 {
            0.0
        } else {
            self.deleted_elements() as f64 / total as f64
        }
    }

    /// Deleted tiles as (layer id, tile row, tile col), in layer order.
    pub fn deleted_tiles(&self) -> Vec<(NodeId, usize, usize)> {
        let mut out = Vec::new();
        for l in &self.layers {
            for tr in 0..l.tile_rows() {
                for tc in 0..l.tile_cols() {
                    if !l.is_tile_kept(tr, tc) {
                        out.push((l.id, tr, tc));
                    }
                }
            }
        }
        out
    }
}

struct PoolEntry {
    mean: f64,
    id: NodeId,
    tile_row: usize,
    tile_col: usize,
    count: usize,
    layer: usize,
    index: usize,
}

/// Deletes the lowest-mean tiles, in pooled order, while the deleted element
/// count stays within `budget`.
pub fn prune_scores_to_count(layers: &[ScoredLayer], t: TileShape, budget: usize) -> PruneMask {
    let mut masks = Vec::with_capacity(layers.len());
    let mut pool = Vec::new();
    for (li, layer) in layers.iter().enumerate() {
        let grid = tile_scores(&layer.scores, t);
        masks.push(LayerMask::all(layer.id, grid.rows, grid.cols, t, true));
        pool.extend(
            grid.tiles
                .iter()
                .enumerate()
                .map(|(index, tile)| PoolEntry {
                    mean: tile.mean,
                    id: layer.id,
                    tile_row: tile.tile_row,
                    tile_col: tile.tile_col,
                    count: tile.count,
                    layer: li,
                    index,
                }),
        );
    }
    pool.sort_unstable_by(|x, y| {
        x.mean
            .total_cmp(&y.mean)
            .then(x.id.cmp(&y.id))
            .then(x.tile_row.cmp(&y.tile_row))
            .then(x.tile_col.cmp(&y.tile_col))
    });

    let mut deleted = 0;
    for entry in &pool {
        if deleted + entry.count > budget {
            break;
        }
        deleted += entry.count;
        masks[entry.layer].keep[entry.index] = false;
    }
    PruneMask {
        tile: t,
        layers: masks,
    }
}

/// Prunes pooled tiles to sparsity `s` over all elements, never exceeding it.
pub fn prune_scores(layers: &[ScoredLayer], t: TileShape, s: f64) -> Result<PruneMask> {
    check_sparsity(s)?;
    let total: usize = layers
        .iter()
        .map(|l| l.scores.rows() * l.scores.cols())
        .sum();
    Ok(prune_scores_to_count(layers, t, element_budget(s, total)))
}

pub fn tile_prune(g: &WeightGraph, p: &PrunePlan) -> Result<PruneMask> {
    prune_scores(&score_graph(g, p.criterion), p.tile, p.sparsity)
}

/// Element-granularity pruning; the plan's tile shape is ignored.
pub fn unstructured_prune(g: &WeightGraph, p: &PrunePlan) -> Result<PruneMask> {
    prune_scores(&score_graph(g, p.criterion), TileShape::UNIT, p.sparsity)
}

/// Zeroes every deleted weight element; biases and everything else are untouched.
pub fn apply_mask(g: &WeightGraph, m: &PruneMask) -> Result<WeightGraph> {
    let weighted: Vec<NodeId> = g.weighted_nodes().map(|(id, _)| id).collect();
    if weighted.len() != m.layers.len() {
        return Err(Error::Shape(format!(
            "mask covers {} layers, graph has {} weighted layers",
            m.layers.len(),
            weighted.len()
        )));
    }
    let mut out = g.clone();
    for lm in &m.layers {
        let w = out
            .layer_mut(lm.id)
            .and_then(|l| l.weight_mut())
            .ok_or_else(|| Error::Shape(format!("mask names unknown weighted layer {}", lm.id)))?;
        if w.rows() != lm.rows || w.cols() != lm.cols {
            return Err(Error::Shape(format!(
                "mask for layer {} is {}x{}, weight is {}x{}",
                lm.id,
                lm.rows,
                lm.cols,
                w.rows(),
                w.cols()
            )));
        }
        for (x, keep) in w.data_mut().iter_mut().zip(lm.element_mask()) {
            if !keep {
                *x = 0.0;
            }
        }
    }
    Ok(out)
}

/// JSON mask document: the plan plus kept-tile indices per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskFile {
    pub plan: PrunePlan,
    pub achieved_sparsity: f64,
    pub layers: Vec<MaskFileLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskFileLayer {
    pub id: NodeId,
    pub rows: usize,
    pub cols: usize,
    /// Row-major tile indices that survive pruning.
    pub kept: Vec<usize>,
}

impl MaskFile {
    pub fn new(plan: PrunePlan, mask: &PruneMask) -> Self {
        MaskFile {
            plan,
            achieved_sparsity: mask.achieved_sparsity(),
            layers: mask
                .layers
                .iter()
                .map(|l| MaskFileLayer {
                    id: l.id,
                    rows: l.rows,
                    cols: l.cols,
                    kept: l.kept_tiles(),
                })
                .collect(),
        }
    }

    pub fn to_mask(&self) -> Result<PruneMask> {
        let tile = self.plan.tile;
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let mut lm = LayerMask::all(l.id, l.rows, l.cols, tile, false);
            for &k in &l.kept {
                *lm.keep.get_mut(k).ok_or_else(|| {
                    Error::Parse(format!("mask layer {}: tile index {k} out of range", l.id))
                })? = true;
            }
            layers.push(lm);
        }
        Ok(PruneMask { tile, layers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::ScoreMatrix;

    fn layer(id: u32, rows: usize, cols: usize, v: Vec<f64>) -> ScoredLayer {
        ScoredLayer {
            id: NodeId(id),
            scores: ScoreMatrix::new(rows, cols, v).unwrap(),
        }
    }

    #[test]
    fn zero_and_full_sparsity() {
        let ls = vec![layer(0, 3, 3, (0..9).map(f64::from).collect())];
        let t = TileShape::new(2, 2).unwrap();
        let none = prune_scores(&ls, t, 0.0).unwrap();
        assert_eq!(none.deleted_elements(), 0);
        assert_eq!(none.achieved_sparsity(), 0.0);
        let all = prune_scores(&ls, t, 1.0).unwrap();
        assert_eq!(all.deleted_elements(), 9);
        assert!(all.layers[0].tile_keep().iter().all(|&k| !k));
    }

    #[test]
    fn two_layers_lower_layer_goes_first() {
        let ls = vec![layer(0, 4, 4, vec![1.0; 16]), layer(1, 4, 4, vec![2.0; 16])];
        let m = prune_scores(&ls, TileShape::new(2, 2).unwrap(), 0.5).unwrap();
        assert!(m.layers[0].tile_keep().iter().all(|&k| !k));
        assert!(m.layers[1].tile_keep().iter().all(|&k| k));
    }

    #[test]
    fn unstructured_deletes_smallest() {
        let ls = vec![layer(0, 1, 4, vec![4.0, 3.0, 2.0, 1.0])];
        let m = prune_scores(&ls, TileShape::UNIT, 0.5).unwrap();
        assert_eq!(m.layers[0].element_mask(), vec![true, true, false, false]);
    }

    #[test]
    fn ties_follow_position() {
        let ls = vec![layer(0, 2, 2, vec![1.0; 4])];
        let m = prune_scores(&ls, TileShape::UNIT, 0.5).unwrap();
        assert_eq!(m.layers[0].element_mask(), vec![false, false, true, true]);
    }

    #[test]
    fn never_exceeds_budget_with_edge_tiles() {
        // 3x3 with 2x2 tiles: counts 4,2,2,1. Budget 0.5 -> 4 elements.
        let ls = vec![layer(
            0,
            3,
            3,
            vec![0.0, 0.0, 5.0, 0.0, 0.0, 5.0, 1.0, 1.0, 9.0],
        )];
        let m = prune_scores(&ls, TileShape::new(2, 2).unwrap(), 0.5).unwrap();
        assert_eq!(m.deleted_elements(), 4);
        // 0.7 -> 6 elements: top-left (4) then bottom-left (2, mean 1).
        let m = prune_scores(&ls, TileShape::new(2, 2).unwrap(), 0.7).unwrap();
        assert_eq!(m.deleted_elements(), 6);
        assert_eq!(
            m.deleted_tiles(),
            vec![(NodeId(0), 0, 0), (NodeId(0), 1, 0)]
        );
    }

    #[test]
    fn budget_rounding() {
        assert_eq!(element_budget(0.29, 100), 29);
        assert_eq!(element_budget(0.5, 9), 4);
        assert_eq!(element_budget(1.0, 7), 7);
    }

    #[test]
    fn rejects_bad_sparsity() {
        let ls = vec![layer(0, 1, 1, vec![1.0])];
        assert!(prune_scores(&ls, TileShape::UNIT, 1.5).is_err());
        assert!(prune_scores(&ls, TileShape::UNIT, -0.1).is_err());
        assert!(PrunePlan::new(TileShape::UNIT, f64::NAN, Criterion::L1).is_err());
    }

    #[test]
    fn mask_file_round_trip() {
        let ls = vec![layer(3, 3, 5, (0..15).map(f64::from).collect())];
        let plan = PrunePlan::new(TileShape::new(2, 2).unwrap(), 0.4, Criterion::L1).unwrap();
        let m = prune_scores(&ls, plan.tile, plan.sparsity).unwrap();
        let file = MaskFile::new(plan, &m);
        let text = serde_json::to_string(&file).unwrap();
        let back: MaskFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_mask().unwrap(), m);
    }
}
