use crate::diffengine::{Graph, ReduceOp, Tensor, Var};
use crate::poolcore::{orthogonality_loss, ForwardVars, ModelConfig, ModelError, ParamVars};

use super::TrainError;

/// Weights of the loss components. `orth = 0` drops the term from the total
/// (its value is still reported).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub entropy: f64,
    pub clst: f64,
    pub sep: f64,
    pub orth: f64,
    pub l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            entropy: 1.0,
            clst: 0.8,
            sep: -0.08,
            orth: 1.0,
            l1: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainError> {
        let all = [self.entropy, self.clst, self.sep, self.orth, self.l1];
        if all.iter().any(|w| !w.is_finite()) {
            return Err(TrainError::Config("loss weights must be finite".into()));
        }
        Ok(())
    }
}

/// Unweighted component values of one loss evaluation plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub clst: f64,
    pub sep: f64,
    pub orth: f64,
    pub l1: f64,
}

impl LossBreakdown {
    fn components(&self) -> [(&'static str, f64); 6] {
        [
            ("total", self.total),
            ("ce", self.ce),
            ("clst", self.clst),
            ("sep", self.sep),
            ("orth", self.orth),
            ("l1", self.l1),
        ]
    }

    /// Name of the first non-finite component.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.components().iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
    }

    pub(crate) fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.total += weight * other.total;
        self.ce += weight * other.ce;
        self.clst += weight * other.clst;
        self.sep += weight * other.sep;
        self.orth += weight * other.orth;
        self.l1 += weight * other.l1;
    }
}

/// Loss nodes inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub clst: Var,
    pub sep: Var,
    pub orth: Var,
    pub l1: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Var| g.value(x).item();
        LossBreakdown {
            total: v(self.total),
            ce: v(self.ce),
            clst: v(self.clst),
            sep: v(self.sep),
            orth: v(self.orth),
            l1: v(self.l1),
        }
    }
}

/// Builds the weighted training loss on top of a forward pass.
///
/// * `ce`: mean cross-entropy of the class logits.
/// * `clst`: minus the batch mean of the best true-class slot score.
/// * `sep`: minus the batch mean of the best other-class slot score; with a
///   negative weight this penalizes similarity to other classes' prototypes.
/// * `orth`: within-class cosine of the slot distributions.
/// * `l1`: absolute sum of the off-block head weights.
pub fn assemble_loss(
    g: &mut Graph,
    config: &ModelConfig,
    params: &ParamVars,
    out: &ForwardVars,
    labels: &[usize],
    weights: &LossWeights,
) -> Result<LossVars, ModelError> {
    let (c, k) = (config.classes, config.slots);
    let b = labels.len();
    if b == 0 {
        return Err(ModelError::Dim("empty batch".into()));
    }
    if g.shape(out.logits) != [b, c] {
        return Err(ModelError::Dim(format!("{} labels for logits {:?}", b, g.shape(out.logits))));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(ModelError::Dim(format!("label {bad} with {c} classes")));
    }

    let logp = g.log_softmax(out.logits, 1)?;
    let picked = g.gather_cols(logp, labels.to_vec())?;
    let mean_logp = g.mean_all(picked)?;
    let ce = g.neg(mean_logp)?;

    let own: Vec<usize> = labels.iter().flat_map(|&y| y * k..(y + 1) * k).collect();
    let own_scores = g.gather_cols(out.slot_scores, own)?;
    let own_best = g.reduce(ReduceOp::Max, own_scores, 1)?;
    let own_mean = g.mean_all(own_best)?;
    let clst = g.neg(own_mean)?;

    let sep = if c > 1 {
        let other: Vec<usize> = labels
            .iter()
            .flat_map(|&y| (0..c * k).filter(move |col| col / k != y))
            .collect();
        let other_scores = g.gather_cols(out.slot_scores, other)?;
        let other_best = g.reduce(ReduceOp::Max, other_scores, 1)?;
        let other_mean = g.mean_all(other_best)?;
        g.neg(other_mean)?
    } else {
        g.constant(Tensor::scalar(0.0))?
    };

    let orth = orthogonality_loss(g, out.distributions, c, k)?;

    let mask_t = Tensor::new(vec![c * k, c], off_block_mask(c, k))?;
    let mask = g.constant(mask_t)?;
    let off = g.mul(params.head, mask)?;
    let pos = g.relu(off)?;
    let neg_off = g.neg(off)?;
    let negp = g.relu(neg_off)?;
    let abs = g.add(pos, negp)?;
    let l1 = g.sum_all(abs)?;

    let mut total = g.mul_scalar(ce, weights.entropy)?;
    for (v, w) in [(clst, weights.clst), (sep, weights.sep), (orth, weights.orth), (l1, weights.l1)] {
        if w != 0.0 {
            let term = g.mul_scalar(v, w)?;
            total = g.add(total, term)?;
        }
    }
    Ok(LossVars { total, ce, clst, sep, orth, l1 })
}

fn off_block_mask(classes: usize, slots: usize) -> Vec<f64> {
    (0..classes * slots)
        .flat_map(|row| (0..classes).map(move |col| if row / slots == col { 0.0 } else { 1.0 }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poolcore::{FeatureMap, ForwardMode, ProtoPoolModel, Trainable};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn defaults_match_weighting_schema() {
        let w = LossWeights::default();
        assert_eq!((w.entropy, w.clst, w.sep, w.orth, w.l1), (1.0, 0.8, -0.08, 1.0, 1e-4));
    }

    #[test]
    fn orth_only_identical_one_hots() {
        let mut cfg = ModelConfig::new(1, 2, 3, 2);
        cfg.addon = false;
        cfg.input_depth = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = ProtoPoolModel::init(cfg.clone(), &mut rng).unwrap();
        model.set_hard_assignment(&[1, 1]).unwrap();
        let z = FeatureMap::new(2, 1, 2, vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        let mut bg = model.build_graph(&[&z], ForwardMode::Eval, Trainable::NONE).unwrap();
        let weights = LossWeights {
            entropy: 0.0,
            clst: 0.0,
            sep: 0.0,
            orth: 1.0,
            l1: 0.0,
        };
        let lv = assemble_loss(&mut bg.graph, &cfg, &bg.params, &bg.out, &[0], &weights).unwrap();
        let br = lv.breakdown(&bg.graph);
        assert!((br.total - 0.5).abs() < 1e-12);
        assert_eq!(br.sep, 0.0);
    }

    #[test]
    fn confident_prediction_has_near_zero_ce() {
        let mut cfg = ModelConfig::new(2, 1, 2, 2);
        cfg.addon = false;
        cfg.input_depth = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = ProtoPoolModel::init(cfg.clone(), &mut rng).unwrap();
        model.set_hard_assignment(&[0, 1]).unwrap();
        model.pool.set_prototype(0, &[0.0, 0.0]);
        model.pool.set_prototype(1, &[50.0, 50.0]);
        for w in model.head.weights_mut() {
            *w *= 10.0;
        }
        // location 0 matches prototype 0 exactly, location 1 is far from both
        let z = FeatureMap::new(2, 1, 2, vec![0.0, 0.0, -50.0, 50.0]).unwrap();
        let mut bg = model.build_graph(&[&z], ForwardMode::Eval, Trainable::NONE).unwrap();
        let weights = LossWeights {
            clst: 0.0,
            sep: 0.0,
            orth: 0.0,
            l1: 0.0,
            ..LossWeights::default()
        };
        let lv = assemble_loss(&mut bg.graph, &cfg, &bg.params, &bg.out, &[0], &weights).unwrap();
        assert!(lv.breakdown(&bg.graph).total < 1e-6);
    }

    #[test]
    fn l1_counts_only_off_block() {
        let mut cfg = ModelConfig::new(2, 2, 3, 2);
        cfg.addon = false;
        cfg.input_depth = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = ProtoPoolModel::init(cfg.clone(), &mut rng).unwrap();
        let w = model.head.weights_mut();
        w[1] = -0.5; // row 0 (class 0) to class 1
        w[0] = 7.0; // on-block
        let z = FeatureMap::new(1, 2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut bg = model.build_graph(&[&z], ForwardMode::Eval, Trainable::NONE).unwrap();
        let lv = assemble_loss(&mut bg.graph, &cfg, &bg.params, &bg.out, &[1], &LossWeights::default()).unwrap();
        assert_eq!(lv.breakdown(&bg.graph).l1, 0.5);
    }

    #[test]
    fn bad_labels_rejected() {
        let mut cfg = ModelConfig::new(2, 1, 2, 2);
        cfg.addon = false;
        cfg.input_depth = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = ProtoPoolModel::init(cfg.clone(), &mut rng).unwrap();
        let z = FeatureMap::new(1, 1, 2, vec![0.1, 0.2]).unwrap();
        let mut bg = model.build_graph(&[&z], ForwardMode::Eval, Trainable::NONE).unwrap();
        assert!(assemble_loss(&mut bg.graph, &cfg, &bg.params, &bg.out, &[2], &LossWeights::default()).is_err());
        assert!(assemble_loss(&mut bg.graph, &cfg, &bg.params, &bg.out, &[0, 1], &LossWeights::default()).is_err());
    }
}
