use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::gumbel::{argmax, gumbel_noise, harden, relax_rows, softmax_slice, SlotRelaxation};
use super::similarity::{pool_focal, DEFAULT_EPSILON};
use super::ModelError;
use crate::diffengine::{Graph, Tensor, Var};

pub const MAX_SLOTS: usize = 10;

/// One image's latent grid: `H·W` location vectors of depth `D`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    depth: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, depth: usize, data: Vec<f64>) -> Result<Self, ModelError> {
        if height == 0 || width == 0 || depth == 0 {
            return Err(ModelError::Dim(format!("empty feature map {height}x{width}x{depth}")));
        }
        if data.len() != height * width * depth {
            return Err(ModelError::Dim(format!(
                "{} values for a {height}x{width}x{depth} map",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Numeric("non-finite feature value".into()));
        }
        Ok(Self { height, width, depth, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn num_locations(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn location(&self, index: usize) -> &[f64] {
        &self.data[index * self.depth..(index + 1) * self.depth]
    }

    pub fn locations(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.depth)
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(vec![self.num_locations(), self.depth], self.data.clone())
            .expect("feature map dimensions validated at construction")
    }
}

/// The shared pool of `M` trainable prototypes in `R^D`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypePool {
    size: usize,
    depth: usize,
    data: Vec<f64>,
}

impl PrototypePool {
    pub fn new(size: usize, depth: usize, data: Vec<f64>) -> Result<Self, ModelError> {
        if size == 0 || depth == 0 || data.len() != size * depth {
            return Err(ModelError::Dim(format!("{} values for a {size}x{depth} pool", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Numeric("non-finite prototype".into()));
        }
        Ok(Self { size, depth, data })
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn prototype(&self, i: usize) -> &[f64] {
        &self.data[i * self.depth..(i + 1) * self.depth]
    }

    pub fn set_prototype(&mut self, i: usize, value: &[f64]) {
        self.data[i * self.depth..(i + 1) * self.depth].copy_from_slice(value);
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(vec![self.size, self.depth], self.data.clone()).expect("pool dimensions validated")
    }
}

/// Per-class, per-slot assignment logits over the pool (`C × K × M`).
#[derive(Clone, Debug, PartialEq)]
pub struct SlotBank {
    classes: usize,
    slots: usize,
    pool: usize,
    logits: Vec<f64>,
    pub tau: f64,
    pub noise_enabled: bool,
}

impl SlotBank {
    pub fn new(classes: usize, slots: usize, pool: usize, logits: Vec<f64>) -> Result<Self, ModelError> {
        if classes == 0 || slots == 0 || pool == 0 || logits.len() != classes * slots * pool {
            return Err(ModelError::Dim(format!(
                "{} logits for {classes}x{slots}x{pool} slots",
                logits.len()
            )));
        }
        Ok(Self {
            classes,
            slots,
            pool,
            logits,
            tau: 1.0,
            noise_enabled: true,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn pool_size(&self) -> usize {
        self.pool
    }

    pub fn num_rows(&self) -> usize {
        self.classes * self.slots
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn row(&self, class: usize, slot: usize) -> &[f64] {
        let r = class * self.slots + slot;
        &self.logits[r * self.pool..(r + 1) * self.pool]
    }

    /// Noise-free training distributions at the current temperature,
    /// `[C·K, M]` row-major.
    pub fn relaxed(&self, relaxation: SlotRelaxation) -> Vec<f64> {
        let scale = match relaxation {
            SlotRelaxation::Softmax => 1.0,
            SlotRelaxation::Gumbel(_) => 1.0 / self.tau,
        };
        self.logits
            .chunks(self.pool)
            .flat_map(|row| softmax_slice(&row.iter().map(|q| q * scale).collect::<Vec<_>>()))
            .collect()
    }

    /// One-hot distributions at each row's argmax, `[C·K, M]` row-major.
    pub fn hardened(&self) -> Vec<f64> {
        self.logits.chunks(self.pool).flat_map(harden).collect()
    }

    /// Prototype index selected by each slot (class-major).
    pub fn assignment(&self) -> Vec<usize> {
        self.logits.chunks(self.pool).map(argmax).collect()
    }
}

/// Dense `(C·K) × C` last layer mapping slot scores to class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    classes: usize,
    slots: usize,
    weights: Vec<f64>,
}

impl ClassifierHead {
    /// Weight 1 between each class and its own slots, 0 elsewhere.
    pub fn block_init(classes: usize, slots: usize) -> Self {
        let cols = classes;
        let mut weights = vec![0.0; classes * slots * cols];
        for c in 0..classes {
            for k in 0..slots {
                weights[(c * slots + k) * cols + c] = 1.0;
            }
        }
        Self { classes, slots, weights }
    }

    pub fn from_weights(classes: usize, slots: usize, weights: Vec<f64>) -> Result<Self, ModelError> {
        if weights.len() != classes * slots * classes {
            return Err(ModelError::Dim(format!(
                "{} head weights for {classes} classes x {slots} slots",
                weights.len()
            )));
        }
        Ok(Self { classes, slots, weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// 1 on connections between a slot and a foreign class, 0 on own-class ones.
    pub fn off_block_mask(&self) -> Vec<f64> {
        let mut mask = vec![1.0; self.weights.len()];
        for c in 0..self.classes {
            for k in 0..self.slots {
                mask[(c * self.slots + k) * self.classes + c] = 0.0;
            }
        }
        mask
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(vec![self.classes * self.slots, self.classes], self.weights.clone()).expect("head dims")
    }
}

/// Trainable per-location linear map standing in for a 1×1 convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct AddOn {
    in_depth: usize,
    out_depth: usize,
    weights: Vec<f64>,
}

impl AddOn {
    pub fn new(in_depth: usize, out_depth: usize, weights: Vec<f64>) -> Result<Self, ModelError> {
        if in_depth == 0 || out_depth == 0 || weights.len() != in_depth * out_depth {
            return Err(ModelError::Dim(format!(
                "{} add-on weights for {in_depth}->{out_depth}",
                weights.len()
            )));
        }
        Ok(Self { in_depth, out_depth, weights })
    }

    pub fn in_depth(&self) -> usize {
        self.in_depth
    }

    pub fn out_depth(&self) -> usize {
        self.out_depth
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(vec![self.in_depth, self.out_depth], self.weights.clone()).expect("add-on dims")
    }

    pub fn apply(&self, z: &FeatureMap) -> FeatureMap {
        let data = crate::diffengine::matmul_raw(
            z.data(),
            &self.weights,
            z.num_locations(),
            self.in_depth,
            self.out_depth,
        );
        FeatureMap {
            height: z.height,
            width: z.width,
            depth: self.out_depth,
            data,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub classes: usize,
    pub slots: usize,
    pub prototypes: usize,
    /// Latent depth of prototypes.
    pub depth: usize,
    /// Depth of the incoming features.
    pub input_depth: usize,
    pub epsilon: f64,
    pub relaxation: SlotRelaxation,
    /// Max-minus-mean pooling when true, plain max pooling otherwise.
    pub focal: bool,
    pub addon: bool,
}

impl ModelConfig {
    pub fn new(classes: usize, slots: usize, prototypes: usize, depth: usize) -> Self {
        Self {
            classes,
            slots,
            prototypes,
            depth,
            input_depth: depth,
            epsilon: DEFAULT_EPSILON,
            relaxation: SlotRelaxation::default(),
            focal: true,
            addon: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.classes == 0 || self.prototypes == 0 || self.depth == 0 || self.input_depth == 0 {
            return Err(ModelError::Param("all model dimensions must be positive".into()));
        }
        if !(1..=MAX_SLOTS).contains(&self.slots) {
            return Err(ModelError::Param(format!("slots per class must be in 1..={MAX_SLOTS}, got {}", self.slots)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(ModelError::Param(format!("epsilon must be in (0, 1), got {}", self.epsilon)));
        }
        if !self.addon && self.depth != self.input_depth {
            return Err(ModelError::Param(format!(
                "without an add-on layer the latent depth {} must equal the input depth {}",
                self.depth, self.input_depth
            )));
        }
        Ok(())
    }
}

/// How slot distributions enter a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum ForwardMode<'a> {
    /// Relaxed distributions; `noise` is the `C·K·M` Gumbel sample (η = 0 when `None`).
    Train { noise: Option<&'a [f64]> },
    /// One-hot distributions at each slot's argmax, no noise.
    Eval,
}

/// Which leaves of a forward graph receive gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Trainable {
    pub addon: bool,
    pub prototypes: bool,
    pub slots: bool,
    pub head: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable {
        addon: false,
        prototypes: false,
        slots: false,
        head: false,
    };
    pub const ALL: Trainable = Trainable {
        addon: true,
        prototypes: true,
        slots: true,
        head: true,
    };
}

/// Leaves holding the model parameters inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct ParamVars {
    pub addon: Option<Var>,
    pub prototypes: Var,
    /// `[C·K, M]` slot logits.
    pub slot_logits: Var,
    /// `[C·K, C]` head weights.
    pub head: Var,
}

/// Nodes produced by a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[B, C]` class logits.
    pub logits: Var,
    /// `[B, C·K]` expected focal similarity per slot.
    pub slot_scores: Var,
    /// `[C·K, M]` slot distributions used in this pass.
    pub distributions: Var,
}

/// A forward pass over a batch together with its graph.
pub struct BatchGraph {
    pub graph: Graph,
    pub params: ParamVars,
    pub out: ForwardVars,
}

/// Prototype pool layer plus the classification head.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtoPoolModel {
    pub config: ModelConfig,
    pub addon: Option<AddOn>,
    pub pool: PrototypePool,
    pub slots: SlotBank,
    pub head: ClassifierHead,
}

fn xavier_normal<R: Rng + ?Sized>(rng: &mut R, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

impl ProtoPoolModel {
    /// Xavier-normal parameters, block-structured head.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let ModelConfig { classes: c, slots: k, prototypes: m, depth: d, input_depth: d_in, .. } = config;
        let addon = if config.addon {
            Some(AddOn::new(d_in, d, xavier_normal(rng, d_in * d, d_in, d))?)
        } else {
            None
        };
        let pool = PrototypePool::new(m, d, xavier_normal(rng, m * d, d, m))?;
        // fans of a (C, M, K) tensor
        let slots = SlotBank::new(c, k, m, xavier_normal(rng, c * k * m, m * k, c * k))?;
        let head = ClassifierHead::block_init(c, k);
        Ok(Self { config, addon, pool, slots, head })
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    /// Fresh Gumbel noise for one training forward pass, or `None` when the
    /// relaxation is noiseless or noise is disabled.
    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<Vec<f64>> {
        (self.config.relaxation.uses_noise() && self.slots.noise_enabled)
            .then(|| gumbel_noise(rng, self.slots.logits().len()))
    }

    /// Maps raw features through the add-on layer (identity without one).
    pub fn latent(&self, z: &FeatureMap) -> FeatureMap {
        match &self.addon {
            Some(a) => a.apply(z),
            None => z.clone(),
        }
    }

    fn check_map(&self, z: &FeatureMap, hw: usize) -> Result<(), ModelError> {
        if z.depth() != self.config.input_depth {
            return Err(ModelError::Dim(format!(
                "feature depth {} vs model input depth {}",
                z.depth(),
                self.config.input_depth
            )));
        }
        if z.num_locations() != hw {
            return Err(ModelError::Dim("feature maps in a batch must share H and W".into()));
        }
        Ok(())
    }

    /// Inserts the parameters as leaves; trainable ones receive gradients.
    pub fn param_leaves(&self, g: &mut Graph, trainable: Trainable) -> Result<ParamVars, ModelError> {
        let (c, k, m) = (self.config.classes, self.config.slots, self.config.prototypes);
        let leaf = |g: &mut Graph, t: Tensor, train: bool| if train { g.param(t) } else { g.constant(t) };
        let addon = match &self.addon {
            Some(a) => Some(leaf(g, a.as_tensor(), trainable.addon)?),
            None => None,
        };
        Ok(ParamVars {
            addon,
            prototypes: leaf(g, self.pool.as_tensor(), trainable.prototypes)?,
            slot_logits: leaf(g, Tensor::new(vec![c * k, m], self.slots.logits().to_vec())?, trainable.slots)?,
            head: leaf(g, self.head.as_tensor(), trainable.head)?,
        })
    }

    /// Forward pass of a batch over the given parameter leaves. Hyperparameters
    /// (temperature, ε, pooling) come from `self`; in eval mode the hardened
    /// assignment of `self.slots` replaces `params.slot_logits`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        params: &ParamVars,
        batch: &[&FeatureMap],
        mode: ForwardMode<'_>,
    ) -> Result<ForwardVars, ModelError> {
        let Some(first) = batch.first() else {
            return Err(ModelError::Dim("empty batch".into()));
        };
        let hw = first.num_locations();
        for z in batch {
            self.check_map(z, hw)?;
        }
        let (c, k, m) = (self.config.classes, self.config.slots, self.config.prototypes);
        let b = batch.len();

        let mut flat = Vec::with_capacity(b * hw * self.config.input_depth);
        for z in batch {
            flat.extend_from_slice(z.data());
        }
        let x = g.constant(Tensor::new(vec![b * hw, self.config.input_depth], flat)?)?;
        let z = match params.addon {
            Some(w) => g.matmul(x, w)?,
            None => x,
        };
        let d2 = g.pairwise_sq_dist(z, params.prototypes)?;
        let sims = super::similarity::base_similarity(g, d2, self.config.epsilon)?;
        let sims = g.reshape(sims, vec![b, hw, m])?;
        let focal = super::similarity::pool_locations(g, sims, 1, self.config.focal)?;

        let distributions = match mode {
            ForwardMode::Eval => g.constant(Tensor::new(vec![c * k, m], self.slots.hardened())?)?,
            ForwardMode::Train { noise } => {
                if let Some(n) = noise {
                    if n.len() != c * k * m {
                        return Err(ModelError::Dim(format!("{} noise values for {} slot entries", n.len(), c * k * m)));
                    }
                }
                relax_rows(g, params.slot_logits, self.slots.tau, noise, self.config.relaxation)?
            }
        };
        let dist_t = g.transpose(distributions)?;
        let slot_scores = g.matmul(focal, dist_t)?;
        let logits = g.matmul(slot_scores, params.head)?;
        Ok(ForwardVars {
            logits,
            slot_scores,
            distributions,
        })
    }

    /// Builds the forward graph of a batch.
    pub fn build_graph(&self, batch: &[&FeatureMap], mode: ForwardMode<'_>, trainable: Trainable) -> Result<BatchGraph, ModelError> {
        let mut graph = Graph::new();
        let params = self.param_leaves(&mut graph, trainable)?;
        let out = self.forward_graph(&mut graph, &params, batch, mode)?;
        Ok(BatchGraph { graph, params, out })
    }

    /// Class logits for a batch, `[B × C]` row-major.
    pub fn forward_batch(&self, batch: &[&FeatureMap], mode: ForwardMode<'_>) -> Result<Vec<f64>, ModelError> {
        let bg = self.build_graph(batch, mode, Trainable::NONE)?;
        Ok(bg.graph.data(bg.out.logits).to_vec())
    }

    pub fn forward(&self, z: &FeatureMap, mode: ForwardMode<'_>) -> Result<Vec<f64>, ModelError> {
        self.forward_batch(&[z], mode)
    }

    /// Training-mode forward with a freshly drawn noise sample.
    pub fn forward_train<R: Rng + ?Sized>(&self, z: &FeatureMap, rng: &mut R) -> Result<Vec<f64>, ModelError> {
        let noise = self.sample_noise(rng);
        self.forward(z, ForwardMode::Train { noise: noise.as_deref() })
    }

    /// Focal (or max) similarity of every prototype against `z`, in latent space.
    pub fn prototype_scores(&self, z: &FeatureMap) -> Result<Vec<f64>, ModelError> {
        self.check_map(z, z.num_locations())?;
        let lat = self.latent(z);
        let mut g = Graph::new();
        let zv = g.constant(lat.as_tensor())?;
        let pv = g.constant(self.pool.as_tensor())?;
        let f = pool_focal(&mut g, zv, pv, self.config.epsilon, self.config.focal)?;
        Ok(g.data(f).to_vec())
    }

    /// Fixes every slot to its argmax prototype by saturating the logits.
    pub fn set_hard_assignment(&mut self, assignment: &[usize]) -> Result<(), ModelError> {
        let m = self.config.prototypes;
        if assignment.len() != self.slots.num_rows() || assignment.iter().any(|&a| a >= m) {
            return Err(ModelError::Dim("assignment does not match the slot bank".into()));
        }
        for (row, &a) in self.slots.logits_mut().chunks_mut(m).zip(assignment) {
            row.iter_mut().for_each(|v| *v = 0.0);
            row[a] = 1.0;
        }
        Ok(())
    }
}
