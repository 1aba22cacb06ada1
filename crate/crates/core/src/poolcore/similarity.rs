use super::{FeatureMap, ModelError, PrototypePool};
use crate::diffengine::{Graph, GraphError, ReduceOp, Tensor, Var};

pub const DEFAULT_EPSILON: f64 = 1e-4;

/// `log((d + 1) / (d + ε))` applied elementwise to squared distances.
pub fn base_similarity(graph: &mut Graph, dist2: Var, epsilon: f64) -> Result<Var, GraphError> {
    let num = graph.add_scalar(dist2, 1.0)?;
    let num = graph.log(num)?;
    let den = graph.add_scalar(dist2, epsilon)?;
    let den = graph.log(den)?;
    graph.sub(num, den)
}

pub fn base_similarity_value(dist2: f64, epsilon: f64) -> f64 {
    (dist2 + 1.0).ln() - (dist2 + epsilon).ln()
}

/// Max-minus-mean pooling of a similarity tensor along `axis`.
///
/// With `focal = false` only the max is kept (plain max pooling).
pub(crate) fn pool_locations(graph: &mut Graph, sims: Var, axis: usize, focal: bool) -> Result<Var, GraphError> {
    let max = graph.reduce(ReduceOp::Max, sims, axis)?;
    if !focal {
        return Ok(max);
    }
    let mean = graph.reduce(ReduceOp::Mean, sims, axis)?;
    graph.sub(max, mean)
}

/// Focal similarity of one prototype `p: [D]` against the locations `z: [HW, D]`.
pub fn focal_similarity(graph: &mut Graph, z: Var, p: Var, epsilon: f64) -> Result<Var, GraphError> {
    let d2 = graph.sq_dist_map(z, p)?;
    let g = base_similarity(graph, d2, epsilon)?;
    pool_locations(graph, g, 0, true)
}

/// Per-prototype focal similarities `[M]` of a feature map against a pool.
pub(crate) fn pool_focal(graph: &mut Graph, z: Var, prototypes: Var, epsilon: f64, focal: bool) -> Result<Var, GraphError> {
    let d2 = graph.pairwise_sq_dist(z, prototypes)?;
    let g = base_similarity(graph, d2, epsilon)?;
    pool_locations(graph, g, 0, focal)
}

pub fn focal_similarity_value(z: &FeatureMap, p: &[f64], epsilon: f64) -> Result<f64, ModelError> {
    if p.len() != z.depth() {
        return Err(ModelError::Dim(format!("prototype depth {} vs map depth {}", p.len(), z.depth())));
    }
    let mut g = Graph::new();
    let zv = g.constant(z.as_tensor())?;
    let pv = g.constant(Tensor::vector(p.to_vec())?)?;
    let out = focal_similarity(&mut g, zv, pv, epsilon)?;
    Ok(g.value(out).item())
}

/// Expected focal similarity under the slot distribution `q` over the pool.
pub fn slot_similarity(z: &FeatureMap, q: &[f64], pool: &PrototypePool, epsilon: f64) -> Result<f64, ModelError> {
    if q.len() != pool.len() {
        return Err(ModelError::Dim(format!("distribution over {} vs pool of {}", q.len(), pool.len())));
    }
    if pool.depth() != z.depth() {
        return Err(ModelError::Dim(format!("pool depth {} vs map depth {}", pool.depth(), z.depth())));
    }
    let mut g = Graph::new();
    let zv = g.constant(z.as_tensor())?;
    let pv = g.constant(pool.as_tensor())?;
    let focal = pool_focal(&mut g, zv, pv, epsilon, true)?;
    let m = pool.len();
    let row = g.reshape(focal, vec![1, m])?;
    let col = g.constant(Tensor::new(vec![m, 1], q.to_vec())?)?;
    let out = g.matmul(row, col)?;
    Ok(g.value(out).item())
}

/// Per-location base similarity to `p`, laid out as `H × W` row-major.
pub fn activation_map(z: &FeatureMap, p: &[f64], epsilon: f64) -> Result<Vec<f64>, ModelError> {
    if p.len() != z.depth() {
        return Err(ModelError::Dim(format!("prototype depth {} vs map depth {}", p.len(), z.depth())));
    }
    Ok(z.locations()
        .map(|loc| {
            let d2: f64 = loc.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
            base_similarity_value(d2, epsilon)
        })
        .collect())
}
