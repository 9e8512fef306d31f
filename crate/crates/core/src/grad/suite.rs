//! Finite-difference checks for every graph primitive.
//!
//! Each primitive's output is contracted with a fixed random weight matrix
//! so that every output coordinate contributes to the checked scalar.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::check::{gradient_check, DEFAULT_STEP};
use super::graph::{Axis2, Graph, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
enum Domain {
    Normal,
    /// Open unit interval, for probabilities.
    Unit,
}

type Op = fn(&mut Graph, &[Var]) -> Result<Var>;

struct Case {
    name: &'static str,
    shapes: &'static [(usize, usize)],
    domain: Domain,
    op: Op,
}

fn bce_targets(shape: (usize, usize)) -> Tensor {
    Tensor::from_shape_fn(shape, |(i, j)| ((i + 2 * j) % 3 == 0) as u8 as f64)
}

const CASES: &[Case] = &[
    Case {
        name: "matmul",
        shapes: &[(3, 4), (4, 2)],
        domain: Domain::Normal,
        op: |g, x| g.matmul(x[0], x[1]),
    },
    Case {
        name: "matmul_t",
        shapes: &[(3, 4), (2, 4)],
        domain: Domain::Normal,
        op: |g, x| g.matmul_t(x[0], x[1]),
    },
    Case {
        name: "transpose",
        shapes: &[(3, 2)],
        domain: Domain::Normal,
        op: |g, x| Ok(g.transpose(x[0])),
    },
    Case {
        name: "add_broadcast",
        shapes: &[(3, 4), (1, 4)],
        domain: Domain::Normal,
        op: |g, x| g.add(x[0], x[1]),
    },
    Case {
        name: "sub",
        shapes: &[(3, 4), (3, 4)],
        domain: Domain::Normal,
        op: |g, x| g.sub(x[0], x[1]),
    },
    Case {
        name: "mul_broadcast",
        shapes: &[(3, 4), (3, 1)],
        domain: Domain::Normal,
        op: |g, x| g.mul(x[0], x[1]),
    },
    Case {
        name: "scale",
        shapes: &[(2, 3)],
        domain: Domain::Normal,
        op: |g, x| Ok(g.scale(x[0], -1.7)),
    },
    Case {
        name: "offset",
        shapes: &[(2, 3)],
        domain: Domain::Normal,
        op: |g, x| Ok(g.offset(x[0], 0.3)),
    },
    Case {
        name: "concat_cols",
        shapes: &[(3, 2), (3, 3)],
        domain: Domain::Normal,
        op: |g, x| g.concat(&[x[0], x[1]], Axis2::Cols),
    },
    Case {
        name: "concat_rows",
        shapes: &[(2, 3), (1, 3)],
        domain: Domain::Normal,
        op: |g, x| g.concat(&[x[0], x[1]], Axis2::Rows),
    },
    Case {
        name: "slice_rows",
        shapes: &[(5, 3)],
        domain: Domain::Normal,
        op: |g, x| g.slice_rows(x[0], 1, 4),
    },
    Case {
        name: "layer_norm",
        shapes: &[(3, 5)],
        domain: Domain::Normal,
        op: |g, x| Ok(g.layer_norm(x[0], 1e-5)),
    },
    Case {
        name: "batch_norm",
        shapes: &[(4, 3)],
        domain: Domain::Normal,
        op: |g, x| Ok(g.batch_norm(x[0], 1e-5)),
    },
    Case {
        name: "leaky_relu",
        shapes: &[(3, 4)],
        domain: Domain::Normal,
        op: |g, x| Ok(g.leaky_relu(x[0], 0.01)),
    },
    Case {
        name: "sigmoid",
        shapes: &[(3, 4)],
        domain: Domain::Normal,
        op: |g, x| Ok(g.sigmoid(x[0])),
    },
    Case {
        name: "relu",
        shapes: &[(3, 4)],
        domain: Domain::Normal,
        op: |g, x| Ok(g.relu(x[0])),
    },
    Case {
        name: "hinge",
        shapes: &[(1, 1)],
        domain: Domain::Normal,
        op: |g, x| Ok(g.hinge(x[0])),
    },
    Case {
        name: "softmax_cols",
        shapes: &[(3, 4)],
        domain: Domain::Normal,
        op: |g, x| Ok(g.softmax(x[0], Axis2::Cols, 1.5)),
    },
    Case {
        name: "softmax_rows",
        shapes: &[(4, 3)],
        domain: Domain::Normal,
        op: |g, x| Ok(g.softmax(x[0], Axis2::Rows, 0.7)),
    },
    Case {
        name: "l2_normalize_cols",
        shapes: &[(3, 4)],
        domain: Domain::Normal,
        op: |g, x| Ok(g.l2_normalize(x[0], Axis2::Cols)),
    },
    Case {
        name: "l2_normalize_rows",
        shapes: &[(4, 3)],
        domain: Domain::Normal,
        op: |g, x| Ok(g.l2_normalize(x[0], Axis2::Rows)),
    },
    Case {
        name: "cosine_rows",
        shapes: &[(3, 4), (3, 4)],
        domain: Domain::Normal,
        op: |g, x| g.cosine_rows(x[0], x[1]),
    },
    Case {
        name: "sum_all",
        shapes: &[(3, 4)],
        domain: Domain::Normal,
        op: |g, x| Ok(g.sum(x[0], None)),
    },
    Case {
        name: "sum_rows",
        shapes: &[(3, 4)],
        domain: Domain::Normal,
        op: |g, x| Ok(g.sum(x[0], Some(Axis2::Rows))),
    },
    Case {
        name: "sum_cols",
        shapes: &[(3, 4)],
        domain: Domain::Normal,
        op: |g, x| Ok(g.sum(x[0], Some(Axis2::Cols))),
    },
    Case {
        name: "mean",
        shapes: &[(3, 4)],
        domain: Domain::Normal,
        op: |g, x| Ok(g.mean(x[0], None)),
    },
    Case {
        name: "bce",
        shapes: &[(3, 5)],
        domain: Domain::Unit,
        op: |g, x| {
            let t = bce_targets(g.shape(x[0]));
            g.bce(x[0], &t, 1e-7)
        },
    },
];

/// Worst relative error of one primitive over its random points.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub max_error: f64,
}

pub fn primitive_names() -> Vec<&'static str> {
    CASES.iter().map(|c| c.name).collect()
}

fn sample(rng: &mut ChaCha8Rng, shape: (usize, usize), domain: Domain) -> Tensor {
    Tensor::from_shape_simple_fn(shape, || match domain {
        Domain::Normal => rng.random_range(-2.0..2.0),
        Domain::Unit => rng.random_range(0.05..0.95),
    })
}

/// Check every primitive at `points` random inputs drawn from `seed`.
pub fn check_primitives(points: usize, seed: u64) -> Result<Vec<PrimitiveCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(CASES.len());
    for case in CASES {
        let mut worst = 0.0f64;
        for _ in 0..points {
            let inputs: Vec<Tensor> = case
                .shapes
                .iter()
                .map(|&s| sample(&mut rng, s, case.domain))
                .collect();
            let out_shape = {
                let mut g = Graph::new();
                let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
                let y = (case.op)(&mut g, &leaves)?;
                g.shape(y)
            };
            let weights = sample(&mut rng, out_shape, Domain::Normal);
            let err = gradient_check(
                |g, x| {
                    let y = (case.op)(g, x)?;
                    let w = g.leaf(weights.clone());
                    let p = g.mul(y, w)?;
                    Ok(g.sum(p, None))
                },
                &inputs,
                DEFAULT_STEP,
            )?;
            worst = worst.max(err);
        }
        out.push(PrimitiveCheck {
            name: case.name,
            max_error: worst,
        });
    }
    Ok(out)
}
