//! Naive f64 reference forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Layer, Shape, WeightGraph};
use crate::tensor::WeightTensor;

/// A dense activation in channel-major (C, H, W) layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    pub shape: Shape,
    pub data: Vec<f64>,
}

/// Values fed to every model-input node.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalInput {
    pub shape: Shape,
    pub values: Vec<f64>,
}

impl EvalInput {
    pub fn new(shape: Shape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::Shape(format!(
                "input has {} values, shape {shape} needs {}",
                values.len(),
                shape.len()
            )));
        }
        Ok(EvalInput { shape, values })
    }

    /// Uniform values in [-1, 1).
    pub fn random(shape: Shape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..shape.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        EvalInput { shape, values }
    }

    /// Integers in [-bound, bound].
    pub fn random_integers(shape: Shape, seed: u64, bound: i32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..shape.len())
            .map(|_| f64::from(rng.random_range(-bound..=bound)))
            .collect();
        EvalInput { shape, values }
    }
}

/// Runs the graph in topological order and returns one activation per model output.
pub fn evaluate(g: &WeightGraph, x: &EvalInput) -> Result<Vec<Activation>> {
    if x.shape != g.input_shape() || x.values.len() != x.shape.len() {
        return Err(Error::Shape(format!(
            "input shaped {} does not match model input {}",
            x.shape,
            g.input_shape()
        )));
    }
    let model_input = Activation {
        shape: x.shape,
        data: x.values.clone(),
    };
    let mut acts: Vec<Option<Activation>> = vec![None; g.nodes().len()];
    for &i in g.topo_indices() {
        let node = &g.nodes()[i];
        let ins: Vec<&Activation> = if g.is_input(node.id) {
            vec![&model_input]
        } else {
            g.pred_indices(i)
                .iter()
                .map(|&p| acts[p].as_ref().expect("producer evaluated first"))
                .collect()
        };
        let out = run_layer(&node.layer, &ins)
            .map_err(|e| Error::Shape(format!("node {}: {e}", node.id)))?;
        let expected = g.output_shape(node.id).expect("node exists");
        if out.shape != expected || out.data.len() != expected.len() {
            return Err(Error::Shape(format!(
                "node {} produced {}, expected {expected}",
                node.id, out.shape
            )));
        }
        acts[i] = Some(out);
    }
    Ok(g.outputs()
        .iter()
        .map(|&id| {
            acts[g.index_of(id).expect("output exists")]
                .clone()
                .expect("evaluated")
        })
        .collect())
}

fn run_layer(layer: &Layer, ins: &[&Activation]) -> std::result::Result<Activation, String> {
    let x = ins[0];
    let s = x.shape;
    Ok(match layer {
        Layer::Linear { weight } => {
            if x.data.len() != weight.cols() {
                return Err(format!(
                    "linear expects {} inputs, got {}",
                    weight.cols(),
                    x.data.len()
                ));
            }
            let data = (0..weight.rows())
                .map(|r| dot(weight, r, &x.data) + bias(weight, r))
                .collect();
            Activation {
                shape: Shape::vector(weight.rows()),
                data,
            }
        }
        Layer::Conv2d {
            weight,
            geometry: k,
        } => {
            if s.channels != k.in_channels {
                return Err(format!(
                    "conv expects {} channels, got {}",
                    k.in_channels, s.channels
                ));
            }
            let oh = (s.height + 2 * k.padding - k.kernel_h) / k.stride + 1;
            let ow = (s.width + 2 * k.padding - k.kernel_w) / k.stride + 1;
            let mut data = vec![0.0; k.out_channels * oh * ow];
            let mut patch = vec![0.0; k.lowered_cols()];
            for oy in 0..oh {
                for ox in 0..ow {
                    // im2col: one lowered column per output position
                    let mut col = 0;
                    for c in 0..s.channels {
                        for ky in 0..k.kernel_h {
                            for kx in 0..k.kernel_w {
                                let iy = (oy * k.stride + ky) as isize - k.padding as isize;
                                let ix = (ox * k.stride + kx) as isize - k.padding as isize;
                                patch[col] = if iy >= 0
                                    && ix >= 0
                                    && (iy as usize) < s.height
                                    && (ix as usize) < s.width
                                {
                                    x.data[(c * s.height + iy as usize) * s.width + ix as usize]
                                } else {
                                    0.0
                                };
                                col += 1;
                            }
                        }
                    }
                    for o in 0..k.out_channels {
                        data[(o * oh + oy) * ow + ox] = dot(weight, o, &patch) + bias(weight, o);
                    }
                }
            }
            Activation {
                shape: Shape::new(k.out_channels, oh, ow),
                data,
            }
        }
        Layer::Relu => Activation {
            shape: s,
            data: x.data.iter().map(|&v| v.max(0.0)).collect(),
        },
        Layer::Add => {
            let mut data = x.data.clone();
            for other in &ins[1..] {
                if other.shape != s {
                    return Err(format!("add of {} and {}", s, other.shape));
                }
                for (d, v) in data.iter_mut().zip(&other.data) {
                    *d += v;
                }
            }
            Activation { shape: s, data }
        }
        Layer::Pool { window, stride } => {
            let oh = (s.height - window) / stride + 1;
            let ow = (s.width - window) / stride + 1;
            let mut data = Vec::with_capacity(s.channels * oh * ow);
            for c in 0..s.channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        for dy in 0..*window {
                            for dx in 0..*window {
                                let v = x.data[(c * s.height + oy * stride + dy) * s.width
                                    + ox * stride
                                    + dx];
                                best = best.max(v);
                            }
                        }
                        data.push(best);
                    }
                }
            }
            Activation {
                shape: Shape::new(s.channels, oh, ow),
                data,
            }
        }
        Layer::Flatten { .. } => Activation {
            shape: Shape::vector(s.len()),
            data: x.data.clone(),
        },
        Layer::PerChannelAffine { params } => {
            let area = s.spatial_area();
            let data = x
                .data
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let c = i / area;
                    f64::from(params.scale[c]) * v + f64::from(params.shift[c])
                })
                .collect();
            Activation { shape: s, data }
        }
    })
}

fn dot(w: &WeightTensor, row: usize, x: &[f64]) -> f64 {
    w.row(row)
        .iter()
        .zip(x)
        .map(|(&a, &b)| f64::from(a) * b)
        .sum()
}

fn bias(w: &WeightTensor, row: usize) -> f64 {
    w.bias().map_or(0.0, |b| f64::from(b[row]))
}

/// Largest elementwise relative error `|a - b| / max(|a|, |b|)` over all outputs
/// (0 where both are exactly equal).
pub fn max_relative_error(a: &[Activation], b: &[Activation]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        if x.shape != y.shape {
            return f64::INFINITY;
        }
        for (&u, &v) in x.data.iter().zip(&y.data) {
            if u == v {
                continue;
            }
            let err = (u - v).abs() / u.abs().max(v.abs());
            worst = if err.is_nan() {
                f64::INFINITY
            } else {
                worst.max(err)
            };
        }
    }
    worst
}

/// Result of comparing two models on shared random inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Equivalence {
    pub samples: usize,
    pub max_relative_error: f64,
    /// Samples whose outputs matched bit for bit.
    pub exact_samples: usize,
}

impl Equivalence {
    pub fn within(&self, rtol: f64) -> bool {
        self.max_relative_error <= rtol
    }

    pub fn is_exact(&self) -> bool {
        self.exact_samples == self.samples
    }
}

/// Evaluates both graphs on `samples` seeded inputs and records the worst disagreement.
/// With `integer_bound`, inputs are small integers instead of uniform reals.
pub fn compare_models(
    a: &WeightGraph,
    b: &WeightGraph,
    samples: usize,
    seed: u64,
    integer_bound: Option<i32>,
) -> Result<Equivalence> {
    if a.input_shape() != b.input_shape() {
        return Err(Error::Shape(format!(
            "models take different inputs: {} vs {}",
            a.input_shape(),
            b.input_shape()
        )));
    }
    let mut worst = 0.0f64;
    let mut exact = 0;
    for k in 0..samples {
        let s = seed.wrapping_add(k as u64);
        let x = match integer_bound {
            Some(bound) => EvalInput::random_integers(a.input_shape(), s, bound),
            None => EvalInput::random(a.input_shape(), s),
        };
        let ya = evaluate(a, &x)?;
        let yb = evaluate(b, &x)?;
        if ya == yb {
            exact += 1;
        }
        worst = worst.max(max_relative_error(&ya, &yb));
    }
    Ok(Equivalence {
        samples,
        max_relative_error: worst,
        exact_samples: exact,
    })
}
