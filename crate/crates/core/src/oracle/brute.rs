//! Exhaustive search for the row permutation minimizing tile-vs-unstructured difference.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::importance::{
    element_scores, loss_report, Criterion, ScoreMatrix, ScoredLayer, TileShape,
};
use crate::reparam::Permutation;
use crate::tensor::WeightTensor;

/// 8! = 40320 candidates.
pub const BRUTE_FORCE_ROW_LIMIT: usize = 8;

fn permuted(scores: &ScoreMatrix, order: &[usize]) -> ScoreMatrix {
    let data = order
        .iter()
        .flat_map(|&r| scores.row(r).iter().copied())
        .collect();
    ScoreMatrix::new(scores.rows(), scores.cols(), data).expect("same dimensions")
}

fn difference_of(scores: &ScoreMatrix, order: &[usize], t: TileShape, s: f64) -> Result<f64> {
    let layer = ScoredLayer {
        id: NodeId(0),
        scores: permuted(scores, order),
    };
    Ok(loss_report(std::slice::from_ref(&layer), t, s)?.difference)
}

/// Tile-minus-unstructured difference of `w` after reordering its rows by `perm`.
pub fn permutation_difference(
    w: &WeightTensor,
    perm: &Permutation,
    t: TileShape,
    s: f64,
    c: Criterion,
) -> Result<f64> {
    if perm.len() != w.rows() {
        return Err(Error::Permutation(format!(
            "permutation of size {} for {} rows",
            perm.len(),
            w.rows()
        )));
    }
    difference_of(&element_scores(w, c), perm.forward(), t, s)
}

/// Advances `v` to the next lexicographic permutation; false after the last.
fn next_permutation(v: &mut [usize]) -> bool {
    let Some(i) = v.windows(2).rposition(|w| w[0] < w[1]) else {
        return false;
    };
    let j = v.iter().rposition(|&x| x > v[i]).expect("successor exists");
    v.swap(i, j);
    v[i + 1..].reverse();
    true
}

/// Evaluates every row permutation and returns a minimizer with its difference.
/// Ties go to the lexicographically smallest permutation.
pub fn brute_force_best_perm(
    w: &WeightTensor,
    t: TileShape,
    s: f64,
    c: Criterion,
) -> Result<(Permutation, f64)> {
    let n = w.rows();
    if n > BRUTE_FORCE_ROW_LIMIT {
        return Err(Error::TooManyRows {
            rows: n,
            limit: BRUTE_FORCE_ROW_LIMIT,
        });
    }
    if n == 0 {
        return Ok((Permutation::identity(0), 0.0));
    }
    let scores = element_scores(w, c);

    // Each worker owns the permutations starting with one fixed row.
    let best = (0..n)
        .into_par_iter()
        .map(|first| -> Result<(f64, Vec<usize>)> {
            let mut order: Vec<usize> = std::iter::once(first)
                .chain((0..n).filter(|&r| r != first))
                .collect();
            let mut best = (difference_of(&scores, &order, t, s)?, order.clone());
            while next_permutation(&mut order[1..]) {
                let d = difference_of(&scores, &order, t, s)?;
                if d < best.0 {
                    best = (d, order.clone());
                }
            }
            Ok(best)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)))
        .expect("n > 0");
    Ok((Permutation::new(best.1)?, best.0))
}
