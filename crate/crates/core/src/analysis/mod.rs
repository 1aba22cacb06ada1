//! Post-hoc exports over a trained model: slot assignments, q-value
//! histograms, prototype sharing, class similarity graph and activation maps.
//! Everything here is a pure function of the model.

mod stats;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub use stats::{pearson, ranks, spearman};

use crate::dataio::GroundTruthManifest;
use crate::poolcore::{activation_map, FeatureMap, ProtoPoolModel};

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] crate::poolcore::ModelError),
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), AnalysisError> {
    fs::write(path, bytes).map_err(|source| AnalysisError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Which slot distributions to read off a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Distributions {
    /// Noise-free relaxation at the model's current temperature.
    #[default]
    Relaxed,
    /// One-hot at each slot's argmax.
    Hardened,
}

/// `(C·K) × M` slot distributions, class-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMatrix {
    pub classes: usize,
    pub slots: usize,
    pub prototypes: usize,
    pub values: Vec<f64>,
}

impl AssignmentMatrix {
    pub fn row(&self, class: usize, slot: usize) -> &[f64] {
        let r = class * self.slots + slot;
        &self.values[r * self.prototypes..(r + 1) * self.prototypes]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,slot");
        for m in 0..self.prototypes {
            let _ = write!(out, ",proto_{m}");
        }
        out.push('\n');
        for c in 0..self.classes {
            for k in 0..self.slots {
                let _ = write!(out, "{c},{k}");
                for v in self.row(c, k) {
                    let _ = write!(out, ",{v}");
                }
                out.push('\n');
            }
        }
        out
    }
}

pub fn assignment_matrix(model: &ProtoPoolModel, kind: Distributions) -> AssignmentMatrix {
    let values = match kind {
        Distributions::Relaxed => model.slots.relaxed(model.config.relaxation),
        Distributions::Hardened => model.slots.hardened(),
    };
    AssignmentMatrix {
        classes: model.config.classes,
        slots: model.config.slots,
        prototypes: model.config.prototypes,
        values,
    }
}

/// Equal-width histogram over `[0, 1]`; 1.0 falls in the last bin.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", self.edges[i], self.edges[i + 1], c);
        }
        out
    }
}

/// Histogram of every entry of every slot distribution.
pub fn q_histogram(model: &ProtoPoolModel, bins: usize, kind: Distributions) -> Result<Histogram, AnalysisError> {
    if bins < 2 {
        return Err(AnalysisError::Invalid(format!("need at least 2 bins, got {bins}")));
    }
    let edges: Vec<f64> = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    let mut counts = vec![0usize; bins];
    for v in assignment_matrix(model, kind).values {
        let b = ((v * bins as f64).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// Distinct classes using each prototype under the hardened assignment.
pub fn class_sets(model: &ProtoPoolModel) -> Vec<Vec<usize>> {
    crate::training::class_sets(model)
}

/// How many classes share each prototype.
#[derive(Clone, Debug, PartialEq)]
pub struct SharingStats {
    /// Class count of every prototype (0 for unassigned ones).
    pub counts: Vec<usize>,
    /// `histogram[n]` = number of prototypes used by exactly `n` classes, `n ≥ 1`
    /// (index 0 is unused and kept at 0).
    pub histogram: Vec<usize>,
    pub unassigned: Vec<usize>,
    /// Mean and standard deviation over assigned prototypes.
    pub mean: f64,
    pub std: f64,
    /// Mean and standard deviation over class slots: each slot contributes the
    /// class count of its prototype.
    pub slot_mean: f64,
    pub slot_std: f64,
}

impl SharingStats {
    pub fn assigned(&self) -> usize {
        self.counts.len() - self.unassigned.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("proto_id,class_count\n");
        for (p, c) in self.counts.iter().enumerate() {
            let _ = writeln!(out, "{p},{c}");
        }
        out
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

pub fn sharing_stats(model: &ProtoPoolModel) -> SharingStats {
    let counts: Vec<usize> = class_sets(model).iter().map(Vec::len).collect();
    let mut histogram = vec![0usize; model.config.classes + 1];
    let mut unassigned = Vec::new();
    for (p, &c) in counts.iter().enumerate() {
        if c == 0 {
            unassigned.push(p);
        } else {
            histogram[c] += 1;
        }
    }
    let (mean, std) = mean_std(counts.iter().filter(|&&c| c > 0).map(|&c| c as f64));
    let assignment = model.slots.assignment();
    let (slot_mean, slot_std) = mean_std(assignment.iter().map(|&p| counts[p] as f64));
    SharingStats {
        counts,
        histogram,
        unassigned,
        mean,
        std,
        slot_mean,
        slot_std,
    }
}

/// Classes linked by the number of prototypes they both use.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassGraph {
    pub classes: usize,
    /// `(a, b, weight)` with `a < b` and `weight > 0`, sorted.
    pub edges: Vec<(usize, usize, usize)>,
}

impl ClassGraph {
    pub fn weight(&self, a: usize, b: usize) -> usize {
        let key = (a.min(b), a.max(b));
        self.edges
            .iter()
            .find(|(x, y, _)| (*x, *y) == key)
            .map_or(0, |e| e.2)
    }

    pub fn total_weight(&self) -> usize {
        self.edges.iter().map(|e| e.2).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_a,class_b,weight\n");
        for (a, b, w) in &self.edges {
            let _ = writeln!(out, "{a},{b},{w}");
        }
        out
    }
}

pub fn class_graph(model: &ProtoPoolModel) -> ClassGraph {
    let c = model.config.classes;
    let mut weights = vec![0usize; c * c];
    for set in class_sets(model) {
        for (i, &a) in set.iter().enumerate() {
            for &b in &set[i + 1..] {
                let (a, b) = (a.min(b), a.max(b));
                weights[a * c + b] += 1;
            }
        }
    }
    let mut edges = Vec::new();
    for a in 0..c {
        for b in a + 1..c {
            if weights[a * c + b] > 0 {
                edges.push((a, b, weights[a * c + b]));
            }
        }
    }
    ClassGraph { classes: c, edges }
}

/// Spearman correlation, over all class pairs, between the number of
/// prototypes two classes share and the number of planted parts they share.
pub fn sharing_correlation(model: &ProtoPoolModel, manifest: &GroundTruthManifest) -> Result<f64, AnalysisError> {
    let c = model.config.classes;
    if manifest.class_parts.len() != c {
        return Err(AnalysisError::Invalid(format!(
            "manifest has {} classes, model {c}",
            manifest.class_parts.len()
        )));
    }
    let graph = class_graph(model);
    let mut learned = Vec::new();
    let mut planted = Vec::new();
    for a in 0..c {
        for b in a + 1..c {
            learned.push(graph.weight(a, b) as f64);
            planted.push(manifest.shared_parts(a, b) as f64);
        }
    }
    Ok(spearman(&learned, &planted))
}

/// Activation of one prototype over a map, in the model's latent space.
pub fn prototype_activation(model: &ProtoPoolModel, sample: &FeatureMap, prototype: usize) -> Result<Vec<f64>, AnalysisError> {
    if prototype >= model.config.prototypes {
        return Err(AnalysisError::Invalid(format!(
            "prototype {prototype} out of range (pool of {})",
            model.config.prototypes
        )));
    }
    if sample.depth() != model.config.input_depth {
        return Err(AnalysisError::Invalid(format!(
            "sample depth {} vs model input depth {}",
            sample.depth(),
            model.config.input_depth
        )));
    }
    let latent = model.latent(sample);
    Ok(activation_map(&latent, model.pool.prototype(prototype), model.config.epsilon)?)
}

/// Binary PGM of `values` (row-major `height × width`) after min-max scaling;
/// a constant map becomes mid gray.
pub fn to_pgm(values: &[f64], height: usize, width: usize) -> Vec<u8> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if hi > lo {
            (255.0 * (v - lo) / (hi - lo)).round() as u8
        } else {
            128
        }
    }));
    out
}

pub fn activation_csv(values: &[f64], width: usize) -> String {
    let mut out = String::from("row,col,value\n");
    for (i, v) in values.iter().enumerate() {
        let _ = writeln!(out, "{},{},{}", i / width, i % width, v);
    }
    out
}

/// Writes `<base>.pgm` and `<base>.csv` for one prototype over one sample.
pub fn export_activation(
    model: &ProtoPoolModel,
    sample: &FeatureMap,
    prototype: usize,
    base: &Path,
) -> Result<(PathBuf, PathBuf), AnalysisError> {
    let values = prototype_activation(model, sample, prototype)?;
    let pgm = base.with_extension("pgm");
    let csv = base.with_extension("csv");
    write_file(&pgm, &to_pgm(&values, sample.height(), sample.width()))?;
    write_file(&csv, activation_csv(&values, sample.width()).as_bytes())?;
    Ok((pgm, csv))
}

/// Writes a CSV export, mapping I/O failures to [`AnalysisError`].
pub fn write_csv(path: &Path, contents: &str) -> Result<(), AnalysisError> {
    write_file(path, contents.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poolcore::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(c: usize, k: usize, m: usize) -> ProtoPoolModel {
        let mut cfg = ModelConfig::new(c, k, m, 2);
        cfg.addon = false;
        cfg.input_depth = 2;
        ProtoPoolModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
    }

    #[test]
    fn hardened_rows_are_one_hot() {
        let mdl = model(3, 2, 5);
        let a = assignment_matrix(&mdl, Distributions::Hardened);
        for r in a.values.chunks(5) {
            assert_eq!(r.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(r.iter().filter(|&&v| v == 0.0).count(), 4);
        }
        let relaxed = assignment_matrix(&mdl, Distributions::Relaxed);
        for r in relaxed.values.chunks(5) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let csv = a.to_csv();
        assert!(csv.starts_with("class,slot,proto_0,proto_1,proto_2,proto_3,proto_4\n0,0,"));
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn histogram_of_hardened_and_uniform() {
        let mdl = model(2, 2, 4);
        let h = q_histogram(&mdl, 10, Distributions::Hardened).unwrap();
        let nonzero: Vec<usize> = (0..10).filter(|&i| h.counts[i] > 0).collect();
        assert_eq!(nonzero, vec![0, 9]);
        assert_eq!(h.counts[9], 4);
        assert_eq!(h.counts[0], 12);

        let mut uni = model(1, 1, 200);
        uni.slots.logits_mut().iter_mut().for_each(|v| *v = 0.0);
        uni.slots.tau = 1.0;
        let h = q_histogram(&uni, 100, Distributions::Relaxed).unwrap();
        assert_eq!(h.counts[0], 200);
        assert!(q_histogram(&uni, 1, Distributions::Relaxed).is_err());
    }

    #[test]
    fn sharing_and_graph_examples() {
        let mut mdl = model(2, 3, 6);
        mdl.set_hard_assignment(&[0, 1, 2, 3, 4, 5]).unwrap();
        let s = sharing_stats(&mdl);
        assert_eq!(s.mean, 1.0);
        assert_eq!(s.counts, vec![1; 6]);
        assert!(class_graph(&mdl).edges.is_empty());

        mdl.set_hard_assignment(&[0, 1, 2, 0, 1, 2]).unwrap();
        let s = sharing_stats(&mdl);
        assert_eq!(s.counts, vec![2, 2, 2, 0, 0, 0]);
        assert_eq!(s.unassigned, vec![3, 4, 5]);
        assert_eq!(s.histogram[2], 3);
        assert_eq!(s.mean, 2.0);
        let g = class_graph(&mdl);
        assert_eq!(g.edges, vec![(0, 1, 3)]);
        assert_eq!(g.weight(1, 0), 3);
    }

    #[test]
    fn slot_weighted_mean_differs_from_prototype_mean() {
        let mut mdl = model(3, 1, 3);
        mdl.set_hard_assignment(&[0, 0, 1]).unwrap();
        let s = sharing_stats(&mdl);
        assert_eq!(s.mean, 1.5);
        assert!((s.slot_mean - 5.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn pgm_of_constant_map_is_uniform() {
        let bytes = to_pgm(&[0.3; 6], 2, 3);
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert!(bytes[header.len()..].iter().all(|&b| b == 128));
        let bytes = to_pgm(&[0.0, 1.0, 0.5], 1, 3);
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 255, 128]);
    }

    #[test]
    fn activation_range_checked() {
        let mdl = model(1, 1, 2);
        let z = FeatureMap::new(1, 1, 2, vec![0.0, 0.0]).unwrap();
        assert!(prototype_activation(&mdl, &z, 2).is_err());
        assert_eq!(prototype_activation(&mdl, &z, 1).unwrap().len(), 1);
    }
}
