use super::graph::{Graph, NodeId};
use crate::error::{Error, Result};

/// Mean over masked-in positions of `-log softmax(logits)[target]`.
///
/// `logits` is `[N×L×K]` (any leading shape); `targets` and `mask` are
/// flattened over the leading dimensions.
pub fn masked_cross_entropy(
    g: &mut Graph,
    logits: NodeId,
    targets: &[usize],
    mask: &[bool],
) -> Result<NodeId> {
    let weights = cross_entropy_weights(g, logits, targets, mask, |_| 1.0)?;
    let logp = g.log_softmax_temp(logits, 1.0)?;
    g.weighted_sum(logp, weights)
}

/// Sparse weight array selecting `-w_r / M` at each masked-in target, where
/// `M` is the number of masked-in positions.
pub(crate) fn cross_entropy_weights(
    g: &Graph,
    logits: NodeId,
    targets: &[usize],
    mask: &[bool],
    token_weight: impl Fn(usize) -> f64,
) -> Result<Vec<f64>> {
    let value = g.value(logits);
    let (rows, k) = (value.rows(), value.last_dim());
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::Shape {
            op: "masked_cross_entropy",
            lhs: value.shape().to_vec(),
            rhs: vec![targets.len(), mask.len()],
        });
    }
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(Error::DegenerateBatch("mask selects no tokens".into()));
    }
    let denom = count as f64;
    let mut weights = vec![0.0; rows * k];
    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        if t >= k {
            return Err(Error::Index {
                op: "masked_cross_entropy",
                index: t,
                bound: k,
            });
        }
        weights[r * k + t] = -token_weight(r) / denom;
    }
    Ok(weights)
}
