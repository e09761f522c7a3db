//! Central-difference verification of backward rules in 64-bit mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, NodeId, OpKind, Segment};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Largest `|analytic - numeric| / (|analytic| + 1e-8)` over every entry of
/// every input, where `build` maps the inputs to a single-element output.
pub fn max_relative_error<F>(inputs: &[Tensor<f64>], eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::Config(format!("epsilon {eps} outside [1e-6, 1e-4]")));
    }
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    let grads = g.backward(out)?;

    let eval = |pert: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = pert.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &ids)?;
        Ok(g.value(out).item())
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, id) in ids.iter().enumerate() {
        let zero = Tensor::zeros(inputs[i].shape().to_vec());
        let analytic = grads.get(*id).unwrap_or(&zero);
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[j];
            worst = worst.max((a - numeric).abs() / (a.abs() + 1e-8));
        }
    }
    Ok(worst)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Reduces any output to a scalar through a fixed random weighting, so that
/// every output entry contributes a distinct coefficient.
fn weighted_sum(g: &mut Graph<f64>, out: NodeId, seed: u64) -> Result<NodeId> {
    let shape = g.value(out).shape().to_vec();
    if g.value(out).numel() == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = g.constant(random(&mut rng, &shape, -1.0, 1.0));
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// Checks the backward rule of a single primitive at a random point drawn
/// from `seed`. `Leaf` and `Custom` have no generic sample and report 0.
pub fn finite_difference_check(kind: OpKind, seed: u64, eps: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let (inputs, build): (Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>>) =
        match kind {
            OpKind::Leaf | OpKind::Custom => return Ok(0.0),
            OpKind::MatMul => (
                vec![random(r, &[3, 3], -1.0, 1.0), random(r, &[3, 3], -1.0, 1.0)],
                Box::new(|g, x| Ok(g.matmul(x[0], x[1])?)),
            ),
            OpKind::Add => (
                vec![random(r, &[2, 3], -1.0, 1.0), random(r, &[2, 3], -1.0, 1.0)],
                Box::new(|g, x| Ok(g.add(x[0], x[1])?)),
            ),
            OpKind::Sub => (
                vec![random(r, &[2, 3], -1.0, 1.0), random(r, &[2, 3], -1.0, 1.0)],
                Box::new(|g, x| Ok(g.sub(x[0], x[1])?)),
            ),
            OpKind::Mul => (
                vec![random(r, &[2, 3], -1.0, 1.0), random(r, &[2, 3], -1.0, 1.0)],
                Box::new(|g, x| Ok(g.mul(x[0], x[1])?)),
            ),
            OpKind::AddBias => (
                vec![random(r, &[4, 3], -1.0, 1.0), random(r, &[3], -1.0, 1.0)],
                Box::new(|g, x| Ok(g.add_bias(x[0], x[1])?)),
            ),
            OpKind::Scale => (
                vec![random(r, &[2, 3], -1.0, 1.0)],
                Box::new(|g, x| Ok(g.scale(x[0], -1.7))),
            ),
            OpKind::Transpose => (
                vec![random(r, &[2, 3], -1.0, 1.0)],
                Box::new(|g, x| Ok(g.transpose(x[0])?)),
            ),
            OpKind::SliceRows => (
                vec![random(r, &[5, 3], -1.0, 1.0)],
                Box::new(|g, x| Ok(g.slice_rows(x[0], 1, 4)?)),
            ),
            OpKind::GatherRows => (
                vec![random(r, &[5, 3], -1.0, 1.0)],
                Box::new(|g, x| Ok(g.gather_rows(x[0], &[4, 0, 4, 2])?)),
            ),
            OpKind::ConcatRows => (
                vec![random(r, &[2, 3], -1.0, 1.0), random(r, &[3, 3], -1.0, 1.0)],
                Box::new(|g, x| Ok(g.concat_rows(&[x[0], x[1], x[0]])?)),
            ),
            OpKind::Reshape => (
                vec![random(r, &[2, 6], -1.0, 1.0)],
                Box::new(|g, x| Ok(g.reshape(x[0], [4, 3])?)),
            ),
            OpKind::Sum => (vec![random(r, &[3, 4], -1.0, 1.0)], Box::new(|g, x| Ok(g.sum(x[0])))),
            OpKind::Mean => (vec![random(r, &[3, 4], -1.0, 1.0)], Box::new(|g, x| Ok(g.mean(x[0])))),
            OpKind::Gelu => (vec![random(r, &[3, 4], -3.0, 3.0)], Box::new(|g, x| Ok(g.gelu(x[0])))),
            OpKind::LayerNorm => (
                vec![
                    random(r, &[1, 8], -2.0, 2.0),
                    random(r, &[8], 0.5, 1.5),
                    random(r, &[8], -0.5, 0.5),
                ],
                Box::new(|g, x| Ok(g.layer_norm(x[0], x[1], x[2])?)),
            ),
            OpKind::Softmax => (
                vec![random(r, &[3, 5], -2.0, 2.0)],
                Box::new(|g, x| Ok(g.softmax(x[0])?)),
            ),
            OpKind::LogSoftmax => (
                vec![random(r, &[3, 5], -2.0, 2.0)],
                Box::new(|g, x| Ok(g.log_softmax(x[0])?)),
            ),
            OpKind::Mse => (
                vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[3, 4], -1.0, 1.0)],
                Box::new(|g, x| Ok(g.mse(x[0], x[1])?)),
            ),
            OpKind::RowCosine => (
                vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[3, 4], -1.0, 1.0)],
                Box::new(|g, x| Ok(g.row_cosine(x[0], x[1])?)),
            ),
            OpKind::Exp => (vec![random(r, &[2, 3], -2.0, 2.0)], Box::new(|g, x| Ok(g.exp(x[0])))),
            OpKind::Log => (vec![random(r, &[2, 3], 0.2, 3.0)], Box::new(|g, x| Ok(g.log(x[0])))),
            OpKind::ReplaceRows => (
                vec![random(r, &[5, 3], -1.0, 1.0), random(r, &[3], -1.0, 1.0)],
                Box::new(|g, x| Ok(g.replace_rows(x[0], x[1], &[1, 3])?)),
            ),
            OpKind::Attention => (
                vec![
                    random(r, &[5, 4], -1.0, 1.0),
                    random(r, &[5, 4], -1.0, 1.0),
                    random(r, &[5, 4], -1.0, 1.0),
                ],
                Box::new(|g, x| {
                    let segs = [Segment::new(0, 2), Segment::new(2, 3)];
                    Ok(g.attention(x[0], x[1], x[2], &segs, 2)?)
                }),
            ),
        };
    max_relative_error(&inputs, eps, |g, ids| {
        let out = build(g, ids)?;
        weighted_sum(g, out, seed)
    })
}

/// Every primitive with a generic sample point.
pub const CHECKED_PRIMITIVES: &[OpKind] = &[
    OpKind::MatMul,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::AddBias,
    OpKind::Scale,
    OpKind::Transpose,
    OpKind::SliceRows,
    OpKind::GatherRows,
    OpKind::ConcatRows,
    OpKind::Reshape,
    OpKind::Sum,
    OpKind::Mean,
    OpKind::Gelu,
    OpKind::LayerNorm,
    OpKind::Softmax,
    OpKind::LogSoftmax,
    OpKind::Mse,
    OpKind::RowCosine,
    OpKind::Exp,
    OpKind::Log,
    OpKind::ReplaceRows,
    OpKind::Attention,
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_point() {
        assert!(finite_difference_check(OpKind::MatMul, 3, 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn layer_norm_point() {
        assert!(finite_difference_check(OpKind::LayerNorm, 4, 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn gelu_at_half() {
        let x = Tensor::scalar(0.5);
        let err = max_relative_error(&[x], 1e-5, |g, ids| Ok(g.gelu(ids[0]))).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn epsilon_range_enforced() {
        assert!(finite_difference_check(OpKind::Exp, 0, 1e-2).is_err());
    }
}
