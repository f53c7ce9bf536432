//! Model fixtures: small AlexNet- and ResNet-shaped graphs, the four-layer
//! residual example, plain chains, synthetic MLPs, and random residual DAGs.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::graph::{ConvGeometry, GraphBuilder, Layer, NodeId, Shape, WeightGraph};
use crate::oracle::{gen_synthetic, SyntheticSpec};
use crate::tensor::{AffineParams, WeightTensor};

/// How fixture parameters are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightInit {
    /// Gaussian weights scaled by `1/sqrt(fan_in)`, small biases.
    Gaussian,
    /// Weights in {-1, 0, 1}, integer biases and affine parameters. Forward
    /// passes on integer inputs stay exact in f64.
    SmallIntegers,
}

struct Params {
    init: WeightInit,
    rng: ChaCha8Rng,
}

impl Params {
    fn new(init: WeightInit, seed: u64) -> Self {
        Params {
            init,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn value(&mut self, scale: f64) -> f32 {
        match self.init {
            WeightInit::Gaussian => {
                let n: f64 = Normal::new(0.0, scale)
                    .expect("finite scale")
                    .sample(&mut self.rng);
                n as f32
            }
            WeightInit::SmallIntegers => self.rng.random_range(-1i32..=1) as f32,
        }
    }

    fn weight(&mut self, rows: usize, cols: usize) -> WeightTensor {
        let scale = 1.0 / (cols as f64).sqrt();
        let w = WeightTensor::from_fn(rows, cols, |_, _| self.value(scale));
        let bias = (0..rows).map(|_| self.value(0.1)).collect();
        w.with_bias(bias).expect("bias length matches rows")
    }

    fn linear(&mut self, out: usize, inp: usize) -> Layer {
        Layer::Linear {
            weight: self.weight(out, inp),
        }
    }

    fn conv(&mut self, inp: usize, out: usize, kernel: usize, padding: usize) -> Layer {
        let geometry = ConvGeometry::square(inp, out, kernel, padding);
        Layer::Conv2d {
            weight: self.weight(out, geometry.lowered_cols()),
            geometry,
        }
    }

    fn affine(&mut self, channels: usize) -> Layer {
        let (scale, shift) = match self.init {
            WeightInit::Gaussian => (
                (0..channels).map(|_| 1.0 + self.value(0.2)).collect(),
                (0..channels).map(|_| self.value(0.1)).collect(),
            ),
            WeightInit::SmallIntegers => (
                (0..channels)
                    .map(|_| self.rng.random_range(1i32..=2) as f32)
                    .collect(),
                (0..channels)
                    .map(|_| self.rng.random_range(-1i32..=1) as f32)
                    .collect(),
            ),
        };
        Layer::PerChannelAffine {
            params: AffineParams::new(scale, shift).expect("equal lengths"),
        }
    }
}

/// Five 3x3 convolutions and three linear layers on a 3x16x16 input, with
/// relu after every hidden layer and three 2x2 max pools.
pub fn alexnet_like(init: WeightInit, seed: u64) -> Result<WeightGraph> {
    let mut p = Params::new(init, seed);
    let mut b = GraphBuilder::new(Shape::new(3, 16, 16));
    let c1 = b.input(p.conv(3, 8, 3, 1));
    let r1 = b.push(Layer::Relu, &[c1]);
    let p1 = b.push(
        Layer::Pool {
            window: 2,
            stride: 2,
        },
        &[r1],
    );
    let c2 = b.push(p.conv(8, 16, 3, 1), &[p1]);
    let r2 = b.push(Layer::Relu, &[c2]);
    let p2 = b.push(
        Layer::Pool {
            window: 2,
            stride: 2,
        },
        &[r2],
    );
    let c3 = b.push(p.conv(16, 24, 3, 1), &[p2]);
    let r3 = b.push(Layer::Relu, &[c3]);
    let c4 = b.push(p.conv(24, 24, 3, 1), &[r3]);
    let r4 = b.push(Layer::Relu, &[c4]);
    let c5 = b.push(p.conv(24, 16, 3, 1), &[r4]);
    let r5 = b.push(Layer::Relu, &[c5]);
    let p5 = b.push(
        Layer::Pool {
            window: 2,
            stride: 2,
        },
        &[r5],
    );
    let f = b.push(Layer::Flatten { spatial_area: 4 }, &[p5]);
    let l1 = b.push(p.linear(64, 64), &[f]);
    let r6 = b.push(Layer::Relu, &[l1]);
    let l2 = b.push(p.linear(32, 64), &[r6]);
    let r7 = b.push(Layer::Relu, &[l2]);
    let l3 = b.push(p.linear(10, 32), &[r7]);
    b.output(l3);
    b.build()
}

/// Stem, an entry convolution, two identity residual blocks, one projection
/// block, then pool, flatten and a linear head. Every convolution is followed
/// by a per-channel affine (folded batch norm).
pub fn resnet_like(init: WeightInit, seed: u64) -> Result<WeightGraph> {
    let mut p = Params::new(init, seed);
    let mut b = GraphBuilder::new(Shape::new(3, 8, 8));

    let conv_bn = |b: &mut GraphBuilder, p: &mut Params, from: NodeId, inp, out, k, pad| {
        let c = b.push(p.conv(inp, out, k, pad), &[from]);
        b.push(p.affine(out), &[c])
    };

    let stem = b.input(p.conv(3, 8, 3, 1));
    let bn = b.push(p.affine(8), &[stem]);
    let x = b.push(Layer::Relu, &[bn]);
    let e = conv_bn(&mut b, &mut p, x, 8, 8, 3, 1);
    let mut x = b.push(Layer::Relu, &[e]);

    for _ in 0..2 {
        let a = conv_bn(&mut b, &mut p, x, 8, 8, 3, 1);
        let a = b.push(Layer::Relu, &[a]);
        let c = conv_bn(&mut b, &mut p, a, 8, 8, 3, 1);
        let s = b.push(Layer::Add, &[x, c]);
        x = b.push(Layer::Relu, &[s]);
    }

    let a = conv_bn(&mut b, &mut p, x, 8, 12, 3, 1);
    let a = b.push(Layer::Relu, &[a]);
    let c = conv_bn(&mut b, &mut p, a, 12, 12, 3, 1);
    let proj = conv_bn(&mut b, &mut p, x, 8, 12, 1, 0);
    let s = b.push(Layer::Add, &[c, proj]);
    let x = b.push(Layer::Relu, &[s]);

    let pool = b.push(
        Layer::Pool {
            window: 2,
            stride: 2,
        },
        &[x],
    );
    let f = b.push(Layer::Flatten { spatial_area: 16 }, &[pool]);
    let head = b.push(p.linear(10, 12 * 16), &[f]);
    b.output(head);
    b.build()
}

/// Handles of the four-layer residual example plus its stem.
#[derive(Debug, Clone, Copy)]
pub struct ResidualExample {
    pub stem: NodeId,
    pub a: NodeId,
    pub b: NodeId,
    pub c: NodeId,
    pub d: NodeId,
}

/// `S -> A`, `A -> B -> relu -> C`, `D(A + C)`, all linear of width `n`.
/// The stem keeps A off the model input so that {A, C} stays transformable.
pub fn residual_example(
    n: usize,
    weights: [WeightTensor; 5],
) -> Result<(WeightGraph, ResidualExample)> {
    let [ws, wa, wb, wc, wd] = weights;
    let mut b = GraphBuilder::new(Shape::vector(n));
    let stem = b.input(Layer::Linear { weight: ws });
    let a = b.push(Layer::Linear { weight: wa }, &[stem]);
    let lb = b.push(Layer::Linear { weight: wb }, &[a]);
    let r = b.push(Layer::Relu, &[lb]);
    let c = b.push(Layer::Linear { weight: wc }, &[r]);
    let s = b.push(Layer::Add, &[a, c]);
    let d = b.push(Layer::Linear { weight: wd }, &[s]);
    b.output(d);
    Ok((
        b.build()?,
        ResidualExample {
            stem,
            a,
            b: lb,
            c,
            d,
        },
    ))
}

pub fn residual_example_random(
    n: usize,
    init: WeightInit,
    seed: u64,
) -> Result<(WeightGraph, ResidualExample)> {
    let mut p = Params::new(init, seed);
    let ws = [(); 5].map(|_| p.weight(n, n));
    residual_example(n, ws)
}

/// `depth` linear layers of the given widths with relu in between.
/// `widths` has `depth + 1` entries: input width first.
pub fn mlp(widths: &[usize], init: WeightInit, seed: u64) -> Result<WeightGraph> {
    let mut p = Params::new(init, seed);
    let mut b = GraphBuilder::new(Shape::vector(widths[0]));
    let mut prev = b.input(p.linear(widths[1], widths[0]));
    for pair in widths[1..].windows(2) {
        let r = b.push(Layer::Relu, &[prev]);
        prev = b.push(p.linear(pair[1], pair[0]), &[r]);
    }
    b.output(prev);
    b.build()
}

/// A chain of `depth` square linear layers whose weights follow `template`
/// (row means normal, flat rows), layer `i` seeded with `template.seed + i`.
pub fn synthetic_mlp(depth: usize, template: SyntheticSpec) -> Result<WeightGraph> {
    let n = template.rows;
    let mut b = GraphBuilder::new(Shape::vector(template.cols));
    let mut prev = None;
    for i in 0..depth {
        let spec = SyntheticSpec {
            cols: if i == 0 { template.cols } else { n },
            seed: template.seed.wrapping_add(i as u64),
            ..template
        };
        let layer = Layer::Linear {
            weight: gen_synthetic(&spec)?,
        };
        prev = Some(match prev {
            None => b.input(layer),
            Some(p) => {
                let r = b.push(Layer::Relu, &[p]);
                b.push(layer, &[r])
            }
        });
    }
    b.output(prev.expect("depth >= 1"));
    b.build()
}

/// A random DAG of at most `max_nodes` nodes over vectors of one width: a
/// linear stem, then linear layers, relus, per-channel affines, and residual adds of earlier
/// outputs. Nodes left without consumers are summed into a linear head,
/// the single model output.
pub fn random_residual_dag(seed: u64, max_nodes: usize, init: WeightInit) -> Result<WeightGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::new(init, seed ^ 0x5eed);
    let width = rng.random_range(2..=6);
    // Stem (linear, relu) and the final add and head take four nodes.
    let target = rng.random_range(3..=max_nodes.saturating_sub(4).max(3));
    let mut b = GraphBuilder::new(Shape::vector(width));
    let stem = b.input(p.linear(width, width));
    let stem = b.push(Layer::Relu, &[stem]);
    let mut avail = vec![b.push(p.linear(width, width), &[stem])];
    if rng.random_bool(0.15) {
        avail.push(b.input(Layer::Relu));
    }
    let mut consumed = BTreeSet::new();
    while avail.len() < target {
        let pick = |rng: &mut ChaCha8Rng| avail[rng.random_range(0..avail.len())];
        let roll: f64 = rng.random();
        let id = if roll < 0.3 && avail.len() >= 2 {
            let k = rng.random_range(2..=avail.len().min(3));
            let mut from = Vec::with_capacity(k);
            while from.len() < k {
                let c = pick(&mut rng);
                if !from.contains(&c) {
                    from.push(c);
                }
            }
            consumed.extend(from.iter().copied());
            b.push(Layer::Add, &from)
        } else {
            let from = pick(&mut rng);
            consumed.insert(from);
            let layer = if roll < 0.75 {
                p.linear(width, width)
            } else if roll < 0.9 {
                Layer::Relu
            } else {
                p.affine(width)
            };
            b.push(layer, &[from])
        };
        avail.push(id);
    }
    let dangling: Vec<NodeId> = avail
        .iter()
        .copied()
        .filter(|id| !consumed.contains(id))
        .collect();
    let tail = match dangling[..] {
        [only] => only,
        _ => b.push(Layer::Add, &dangling),
    };
    let head = b.push(p.linear(width, width), &[tail]);
    b.output(head);
    b.build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::LayerKind;

    #[test]
    fn alexnet_counts() {
        let g = alexnet_like(WeightInit::Gaussian, 0).unwrap();
        let weighted = g.nodes().iter().filter(|n| n.kind().is_weighted()).count();
        let adds = g
            .nodes()
            .iter()
            .filter(|n| n.kind() == LayerKind::Add)
            .count();
        assert_eq!(weighted, 8);
        assert_eq!(adds, 0);
    }

    #[test]
    fn fixtures_build() {
        resnet_like(WeightInit::SmallIntegers, 1).unwrap();
        residual_example_random(4, WeightInit::Gaussian, 2).unwrap();
        mlp(&[4, 4, 4, 4], WeightInit::Gaussian, 3).unwrap();
        synthetic_mlp(3, SyntheticSpec::new(8, 8, 4)).unwrap();
        for seed in 0..20 {
            let g = random_residual_dag(seed, 20, WeightInit::Gaussian).unwrap();
            assert!(g.nodes().len() <= 20);
        }
    }
}
