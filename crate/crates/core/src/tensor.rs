//! Two-dimensional weight views and per-channel parameter vectors.

use crate::error::{Error, Result};

/// A layer's weights in lowered 2D form.
///
/// Rows are output features (output channels for convolutions), columns are
/// the lowered input features in channel-major order. Data is row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
    bias: Option<Vec<f32>>,
}

impl WeightTensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>, bias: Option<Vec<f32>>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "weight data has {} elements, expected {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != rows {
                return Err(Error::Shape(format!(
                    "bias has {} elements, expected {rows}",
                    b.len()
                )));
            }
        }
        Ok(WeightTensor {
            rows,
            cols,
            data,
            bias,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        WeightTensor {
            rows,
            cols,
            data,
            bias: None,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        WeightTensor::from_fn(rows, cols, |_, _| 0.0)
    }

    pub fn with_bias(mut self, bias: Vec<f32>) -> Result<Self> {
        if bias.len() != self.rows {
            return Err(Error::Shape(format!(
                "bias has {} elements, expected {}",
                bias.len(),
                self.rows
            )));
        }
        self.bias = Some(bias);
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn bias(&self) -> Option<&[f32]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut [f32]> {
        self.bias.as_deref_mut()
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Reorders rows so that new row `i` is old row `order[i]`. Bias follows.
    pub(crate) fn gather_rows(&mut self, order: &[usize]) {
        debug_assert_eq!(order.len(), self.rows);
        let mut out = Vec::with_capacity(self.data.len());
        for &src in order {
            out.extend_from_slice(&self.data[src * self.cols..(src + 1) * self.cols]);
        }
        self.data = out;
        if let Some(b) = &mut self.bias {
            *b = gather_blocks(b, order, 1);
        }
    }

    /// Reorders column blocks of width `block` so that new block `i` is old block `order[i]`.
    pub(crate) fn gather_col_blocks(&mut self, order: &[usize], block: usize) {
        debug_assert_eq!(order.len() * block, self.cols);
        for r in 0..self.rows {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            let permuted = gather_blocks(row, order, block);
            row.copy_from_slice(&permuted);
        }
    }
}

/// Per-channel `scale * x + shift` parameters (normalization folded to an affine map).
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
}

impl AffineParams {
    pub fn new(scale: Vec<f32>, shift: Vec<f32>) -> Result<Self> {
        if scale.len() != shift.len() {
            return Err(Error::Shape(format!(
                "affine scale has {} channels but shift has {}",
                scale.len(),
                shift.len()
            )));
        }
        Ok(AffineParams { scale, shift })
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub(crate) fn gather_blocks(&mut self, order: &[usize], block: usize) {
        self.scale = gather_blocks(&self.scale, order, block);
        self.shift = gather_blocks(&self.shift, order, block);
    }
}

pub(crate) fn gather_blocks<T: Copy>(src: &[T], order: &[usize], block: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for &b in order {
        out.extend_from_slice(&src[b * block..(b + 1) * block]);
    }
    out
}
