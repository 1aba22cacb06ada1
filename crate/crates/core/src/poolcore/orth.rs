use super::ModelError;
use crate::diffengine::{Graph, GraphError, Tensor, Var};

/// Sum of within-class pairwise cosines of slot distributions, divided by `C·K`.
///
/// `dists` is the `[C·K, M]` matrix of slot distributions, class-major.
pub fn orthogonality_loss(graph: &mut Graph, dists: Var, classes: usize, slots: usize) -> Result<Var, GraphError> {
    let shape = graph.shape(dists).to_vec();
    if shape.len() != 2 || shape[0] != classes * slots {
        return Err(GraphError::Shape(format!(
            "orthogonality: {shape:?} is not [{}, M]",
            classes * slots
        )));
    }
    let (left, right) = slot_pairs(classes, slots);
    if left.is_empty() {
        return graph.constant(Tensor::scalar(0.0));
    }
    let unit = graph.l2_normalize_rows(dists)?;
    let a = graph.index_rows(unit, left)?;
    let b = graph.index_rows(unit, right)?;
    let prod = graph.mul(a, b)?;
    let total = graph.sum_all(prod)?;
    graph.mul_scalar(total, 1.0 / (classes * slots) as f64)
}

/// Row indices of every within-class slot pair `i < j`.
fn slot_pairs(classes: usize, slots: usize) -> (Vec<usize>, Vec<usize>) {
    let mut left = Vec::new();
    let mut right = Vec::new();
    for c in 0..classes {
        for i in 0..slots {
            for j in i + 1..slots {
                left.push(c * slots + i);
                right.push(c * slots + j);
            }
        }
    }
    (left, right)
}

/// Same quantity as [`orthogonality_loss`] computed directly from values.
pub fn orthogonality_loss_value(dists: &[f64], classes: usize, slots: usize, pool: usize) -> Result<f64, ModelError> {
    if dists.len() != classes * slots * pool || pool == 0 {
        return Err(ModelError::Dim(format!(
            "{} entries for {classes}x{slots}x{pool} slot distributions",
            dists.len()
        )));
    }
    let row = |c: usize, k: usize| &dists[(c * slots + k) * pool..(c * slots + k + 1) * pool];
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut total = 0.0;
    for c in 0..classes {
        for i in 0..slots {
            let qi = row(c, i);
            let ni = norm(qi);
            if ni == 0.0 {
                return Err(ModelError::Numeric(format!("zero-norm slot distribution ({c}, {i})")));
            }
            for j in i + 1..slots {
                let qj = row(c, j);
                let nj = norm(qj);
                if nj == 0.0 {
                    return Err(ModelError::Numeric(format!("zero-norm slot distribution ({c}, {j})")));
                }
                let dot: f64 = qi.iter().zip(qj).map(|(a, b)| a * b).sum();
                total += dot / (ni * nj);
            }
        }
    }
    Ok(total / (classes * slots) as f64)
}
