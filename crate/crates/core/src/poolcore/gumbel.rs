use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::ModelError;
use crate::diffengine::{Graph, GraphError, Tensor, Var};

const U_MIN: f64 = 1e-12;

/// Which Gumbel-Softmax formula is used for slot relaxation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GumbelVariant {
    /// `y ∝ exp((q + η) / τ)`
    Classic,
    /// `y ∝ exp(q / τ + η)`: noise is not amplified as τ shrinks.
    Paper,
}

/// How slot distributions are produced from their logits during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotRelaxation {
    Gumbel(GumbelVariant),
    /// Plain `softmax(q)`, no temperature and no noise.
    Softmax,
}

impl SlotRelaxation {
    pub fn uses_noise(self) -> bool {
        matches!(self, SlotRelaxation::Gumbel(_))
    }
}

impl Default for SlotRelaxation {
    fn default() -> Self {
        SlotRelaxation::Gumbel(GumbelVariant::Paper)
    }
}

impl fmt::Display for SlotRelaxation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SlotRelaxation::Gumbel(GumbelVariant::Paper) => "paper",
            SlotRelaxation::Gumbel(GumbelVariant::Classic) => "classic",
            SlotRelaxation::Softmax => "off",
        })
    }
}

impl FromStr for SlotRelaxation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(SlotRelaxation::Gumbel(GumbelVariant::Paper)),
            "classic" => Ok(SlotRelaxation::Gumbel(GumbelVariant::Classic)),
            "off" => Ok(SlotRelaxation::Softmax),
            other => Err(format!("unknown gumbel mode '{other}' (expected paper, classic or off)")),
        }
    }
}

/// Inverse-CDF transform of a uniform draw to a standard Gumbel sample.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(U_MIN, 1.0 - U_MIN);
    -(-u.ln()).ln()
}

pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| gumbel_from_uniform(rng.random::<f64>())).collect()
}

/// Relaxed categorical sample over the pool for one slot.
pub fn gumbel_softmax(q: &[f64], tau: f64, eta: &[f64], variant: GumbelVariant) -> Result<Vec<f64>, ModelError> {
    if !(tau > 0.0) {
        return Err(ModelError::Param(format!("temperature must be positive, got {tau}")));
    }
    if q.len() != eta.len() || q.is_empty() {
        return Err(ModelError::Dim(format!("{} logits vs {} noise values", q.len(), eta.len())));
    }
    let scores: Vec<f64> = match variant {
        GumbelVariant::Classic => q.iter().zip(eta).map(|(a, e)| (a + e) / tau).collect(),
        GumbelVariant::Paper => q.iter().zip(eta).map(|(a, e)| a / tau + e).collect(),
    };
    Ok(softmax_slice(&scores))
}

pub(crate) fn softmax_slice(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// One-hot vector at the argmax of `q` (lowest index on ties).
pub fn harden(q: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; q.len()];
    if !q.is_empty() {
        out[argmax(q)] = 1.0;
    }
    out
}

/// Differentiable relaxation of a `[rows, M]` logit matrix, row by row.
///
/// `noise` must have the same length as the logits when given; `None` means
/// η = 0. `Softmax` ignores both the temperature and the noise.
pub(crate) fn relax_rows(
    graph: &mut Graph,
    logits: Var,
    tau: f64,
    noise: Option<&[f64]>,
    relaxation: SlotRelaxation,
) -> Result<Var, GraphError> {
    let shape = graph.shape(logits).to_vec();
    let noise_leaf = |graph: &mut Graph| -> Result<Option<Var>, GraphError> {
        noise
            .map(|n| graph.constant(Tensor::new(shape.clone(), n.to_vec())?))
            .transpose()
    };
    let scores = match relaxation {
        SlotRelaxation::Softmax => logits,
        SlotRelaxation::Gumbel(GumbelVariant::Paper) => {
            let scaled = graph.mul_scalar(logits, 1.0 / tau)?;
            match noise_leaf(graph)? {
                Some(eta) => graph.add(scaled, eta)?,
                None => scaled,
            }
        }
        SlotRelaxation::Gumbel(GumbelVariant::Classic) => {
            let noisy = match noise_leaf(graph)? {
                Some(eta) => graph.add(logits, eta)?,
                None => logits,
            };
            graph.mul_scalar(noisy, 1.0 / tau)?
        }
    };
    graph.softmax(scores, 1)
}
