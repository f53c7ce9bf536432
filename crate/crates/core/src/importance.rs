//! Importance scores, tile grids, and pruning loss.
//!
//! Scores are f64 even though weights are f32. Every loss is summed in a
//! canonical order (ascending by value), so a loss depends only on the
//! multiset of deleted scores and not on where a permutation put them.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NodeId, WeightGraph};
use crate::pruner::{self, PruneMask};
use crate::tensor::WeightTensor;

/// Magnitude-based importance criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    /// `|w|`
    #[default]
    L1,
    /// `w^2`
    L2,
}

impl Criterion {
    pub fn score(self, w: f32) -> f64 {
        let w = f64::from(w);
        match self {
            Criterion::L1 => w.abs(),
            Criterion::L2 => w * w,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Criterion::L1 => "l1",
            Criterion::L2 => "l2",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Criterion::L1),
            "l2" => Ok(Criterion::L2),
            other => Err(Error::Config(format!(
                "unknown criterion {other:?} (expected l1 or l2)"
            ))),
        }
    }
}

/// Row-major matrix of importance scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "score data has {} elements, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(ScoreMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

pub fn element_scores(w: &WeightTensor, c: Criterion) -> ScoreMatrix {
    ScoreMatrix {
        rows: w.rows(),
        cols: w.cols(),
        data: w.data().iter().map(|&x| c.score(x)).collect(),
    }
}

/// Tile height `a` (rows) by width `b` (columns).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileShape {
    pub a: usize,
    pub b: usize,
}

impl TileShape {
    pub const UNIT: TileShape = TileShape { a: 1, b: 1 };

    pub fn new(a: usize, b: usize) -> Result<Self> {
        if a == 0 || b == 0 {
            return Err(Error::Config(format!(
                "tile shape {a}x{b} must be at least 1x1"
            )));
        }
        Ok(TileShape { a, b })
    }

    pub fn area(&self) -> usize {
        self.a * self.b
    }
}

impl fmt::Display for TileShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.a, self.b)
    }
}

impl FromStr for TileShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("tile shape {s:?} is not of the form AxB"));
        let (a, b) = s.trim().split_once(['x', 'X']).ok_or_else(bad)?;
        let a = a.trim().parse().map_err(|_| bad())?;
        let b = b.trim().parse().map_err(|_| bad())?;
        TileShape::new(a, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    /// Tile coordinates within the grid.
    pub tile_row: usize,
    pub tile_col: usize,
    pub rows: Range<usize>,
    pub cols: Range<usize>,
    pub count: usize,
    pub sum: f64,
    pub mean: f64,
}

/// Partition of a matrix into `a x b` tiles, row-major over tiles.
/// Edge tiles are smaller when the shape does not divide the matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TileGrid {
    pub rows: usize,
    pub cols: usize,
    pub shape: TileShape,
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub tiles: Vec<Tile>,
}

pub fn tile_scores(scores: &ScoreMatrix, t: TileShape) -> TileGrid {
    let tile_rows = scores.rows.div_ceil(t.a);
    let tile_cols = scores.cols.div_ceil(t.b);
    let mut tiles = Vec::with_capacity(tile_rows * tile_cols);
    for tr in 0..tile_rows {
        let rows = tr * t.a..((tr + 1) * t.a).min(scores.rows);
        for tc in 0..tile_cols {
            let cols = tc * t.b..((tc + 1) * t.b).min(scores.cols);
            let mut sum = 0.0;
            for r in rows.clone() {
                sum += scores.row(r)[cols.clone()].iter().sum::<f64>();
            }
            let count = rows.len() * cols.len();
            tiles.push(Tile {
                tile_row: tr,
                tile_col: tc,
                rows: rows.clone(),
                cols,
                count,
                sum,
                mean: sum / count as f64,
            });
        }
    }
    TileGrid {
        rows: scores.rows,
        cols: scores.cols,
        shape: t,
        tile_rows,
        tile_cols,
        tiles,
    }
}

/// Sums values in ascending order, making the result independent of input order.
pub fn canonical_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().collect();
    v.sort_unstable_by(f64::total_cmp);
    v.into_iter().sum()
}

/// Importance scores of one weighted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredLayer {
    pub id: NodeId,
    pub scores: ScoreMatrix,
}

pub fn score_layers<'a>(
    weights: impl IntoIterator<Item = (NodeId, &'a WeightTensor)>,
    c: Criterion,
) -> Vec<ScoredLayer> {
    weights
        .into_iter()
        .map(|(id, w)| ScoredLayer {
            id,
            scores: element_scores(w, c),
        })
        .collect()
}

pub fn score_graph(g: &WeightGraph, c: Criterion) -> Vec<ScoredLayer> {
    score_layers(g.weighted_nodes(), c)
}

fn split_by_mask(layers: &[ScoredLayer], mask: &PruneMask) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut deleted = Vec::new();
    let mut kept = Vec::new();
    for layer in layers {
        let lm = mask
            .layer(layer.id)
            .ok_or_else(|| Error::Shape(format!("mask has no entry for layer {}", layer.id)))?;
        if lm.rows != layer.scores.rows || lm.cols != layer.scores.cols {
            return Err(Error::Shape(format!(
                "mask for layer {} is {}x{}, scores are {}x{}",
                layer.id, lm.rows, lm.cols, layer.scores.rows, layer.scores.cols
            )));
        }
        for (keep, &s) in lm.element_mask().into_iter().zip(&layer.scores.data) {
            if keep {
                kept.push(s);
            } else {
                deleted.push(s);
            }
        }
    }
    if mask.layers.len() != layers.len() {
        return Err(Error::Shape(format!(
            "mask covers {} layers, scores cover {}",
            mask.layers.len(),
            layers.len()
        )));
    }
    Ok((deleted, kept))
}

/// Sum of importance scores at deleted positions (total minus retained).
pub fn pruning_loss(layers: &[ScoredLayer], mask: &PruneMask) -> Result<f64> {
    let (deleted, _) = split_by_mask(layers, mask)?;
    Ok(canonical_sum(deleted))
}

/// Tile pruning loss set against unstructured pruning of the same number of elements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub retained: f64,
    pub loss: f64,
    pub baseline_loss: f64,
    pub difference: f64,
    pub achieved_sparsity: f64,
}

/// Tile-prunes `layers` at sparsity `s` and compares with the unstructured
/// optimum deleting the same element count.
pub fn loss_report(layers: &[ScoredLayer], t: TileShape, s: f64) -> Result<LossReport> {
    let tile_mask = pruner::prune_scores(layers, t, s)?;
    let deleted = tile_mask.deleted_elements();
    let baseline_mask = pruner::prune_scores_to_count(layers, TileShape::UNIT, deleted);
    if baseline_mask.deleted_elements() != deleted {
        return Err(Error::Invariant(format!(
            "unstructured baseline deleted {} elements, expected {deleted}",
            baseline_mask.deleted_elements()
        )));
    }
    let (del, kept) = split_by_mask(layers, &tile_mask)?;
    let total = canonical_sum(del.iter().chain(&kept).copied());
    let loss = canonical_sum(del);
    let retained = canonical_sum(kept);
    let baseline_loss = pruning_loss(layers, &baseline_mask)?;
    Ok(LossReport {
        total,
        retained,
        loss,
        baseline_loss,
        difference: loss - baseline_loss,
        achieved_sparsity: tile_mask.achieved_sparsity(),
    })
}

pub fn loss_difference<'a>(
    weights: impl IntoIterator<Item = (NodeId, &'a WeightTensor)>,
    t: TileShape,
    s: f64,
    c: Criterion,
) -> Result<LossReport> {
    loss_report(&score_layers(weights, c), t, s)
}

/// One line of a loss report CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub layer_set: String,
    pub tile_a: usize,
    pub tile_b: usize,
    pub sparsity: f64,
    pub criterion: Criterion,
    pub loss: f64,
    pub baseline_loss: f64,
    pub difference: f64,
    pub transformed: bool,
}

pub const REPORT_HEADER: [&str; 10] = [
    "model",
    "layer_set",
    "tile_a",
    "tile_b",
    "sparsity",
    "criterion",
    "loss",
    "baseline_loss",
    "difference",
    "transformed",
];

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> ScoreMatrix {
        ScoreMatrix::new(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn l1_and_l2_scores() {
        let w = WeightTensor::new(1, 2, vec![-2.0, 3.0], None).unwrap();
        assert_eq!(element_scores(&w, Criterion::L1).data(), &[2.0, 3.0]);
        assert_eq!(element_scores(&w, Criterion::L2).data(), &[4.0, 9.0]);
        let z = WeightTensor::zeros(3, 3);
        assert!(element_scores(&z, Criterion::L1)
            .data()
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn constant_grid() {
        let g = tile_scores(&m(4, 4, &[1.0; 16]), TileShape::new(2, 2).unwrap());
        assert_eq!(g.tiles.len(), 4);
        assert!(g.tiles.iter().all(|t| t.mean == 1.0 && t.count == 4));
    }

    #[test]
    fn edge_tiles_use_true_counts() {
        let g = tile_scores(&m(3, 3, &[1.0; 9]), TileShape::new(2, 2).unwrap());
        let counts: Vec<usize> = g.tiles.iter().map(|t| t.count).collect();
        assert_eq!(counts, vec![4, 2, 2, 1]);
        assert!(g.tiles.iter().all(|t| t.mean == 1.0));
    }

    #[test]
    fn single_tile_mean() {
        let g = tile_scores(
            &m(2, 2, &[1.0, 2.0, 3.0, 4.0]),
            TileShape::new(2, 2).unwrap(),
        );
        assert_eq!(g.tiles.len(), 1);
        assert_eq!(g.tiles[0].mean, 2.5);
    }

    #[test]
    fn parse_tile_shape() {
        assert_eq!(
            "16x16".parse::<TileShape>().unwrap(),
            TileShape { a: 16, b: 16 }
        );
        assert_eq!(
            "256X1".parse::<TileShape>().unwrap(),
            TileShape { a: 256, b: 1 }
        );
        assert!("0x4".parse::<TileShape>().is_err());
        assert!("4".parse::<TileShape>().is_err());
        assert!("axb".parse::<TileShape>().is_err());
    }

    #[test]
    fn parse_criterion() {
        assert_eq!("L1".parse::<Criterion>().unwrap(), Criterion::L1);
        assert_eq!("l2".parse::<Criterion>().unwrap(), Criterion::L2);
        assert!("hessian".parse::<Criterion>().is_err());
    }

    #[test]
    fn canonical_sum_ignores_order() {
        let a = [1e16, 1.0, -1e16, 3.5];
        let b = [3.5, -1e16, 1.0, 1e16];
        assert_eq!(canonical_sum(a), canonical_sum(b));
    }
}
