use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{stream_rng, RngStream, DataError, FeatureMapDataset, Sample};
use crate::poolcore::FeatureMap;

/// Parameters of the planted-part generator.
///
/// Each class owns `parts_per_class` part vectors. A `shared_fraction` of
/// them come from a set shared by all classes of the same group; the rest
/// are private to the class. Every sample is Gaussian background with the
/// class's parts (plus jitter) written at distinct random grid cells.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    /// Number of ground-truth part vectors available.
    pub parts: usize,
    pub parts_per_class: usize,
    pub shared_fraction: f64,
    /// Per-coordinate standard deviation of the background.
    pub sigma: f64,
    /// Norm of the background mean, a fixed random direction shared by all samples.
    pub background_offset: f64,
    /// Per-coordinate standard deviation added to planted parts.
    pub jitter: f64,
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 20,
            parts: 30,
            parts_per_class: 3,
            shared_fraction: 0.5,
            sigma: 0.1,
            background_offset: 1.5,
            jitter: 0.05,
            height: 7,
            width: 7,
            depth: 16,
            samples_per_class: 50,
            seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartPlacement {
    pub sample_id: usize,
    pub part_id: usize,
    pub row: usize,
    pub col: usize,
}

/// Ground truth emitted alongside a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthManifest {
    /// Part ids of every class, in planting order.
    pub class_parts: Vec<Vec<usize>>,
    pub placements: Vec<PartPlacement>,
    /// Part vectors; empty when the manifest was read back from CSV.
    pub part_vectors: Vec<Vec<f64>>,
}

impl GroundTruthManifest {
    /// Number of part ids two classes have in common.
    pub fn shared_parts(&self, a: usize, b: usize) -> usize {
        self.class_parts[a]
            .iter()
            .filter(|p| self.class_parts[b].contains(p))
            .count()
    }
}

struct Layout {
    shared: usize,
    groups: usize,
}

fn layout(spec: &SyntheticSpec) -> Result<Layout, DataError> {
    let ppc = spec.parts_per_class;
    let shared = (spec.shared_fraction * ppc as f64).round() as usize;
    let private = ppc - shared;
    let private_total = spec.classes * private;
    if private_total > spec.parts {
        return Err(DataError::Spec(format!(
            "{} private parts needed but only {} available",
            private_total, spec.parts
        )));
    }
    let groups = if shared == 0 {
        0
    } else {
        let fit = (spec.parts - private_total) / shared;
        let most = (spec.classes / 2).max(1);
        if fit == 0 {
            return Err(DataError::Spec(format!(
                "no room for a shared set of {shared} parts among {} parts",
                spec.parts
            )));
        }
        fit.min(most)
    };
    Ok(Layout { shared, groups })
}

fn validate(spec: &SyntheticSpec) -> Result<(), DataError> {
    if spec.classes == 0 || spec.height == 0 || spec.width == 0 || spec.depth == 0 || spec.samples_per_class == 0 {
        return Err(DataError::Spec("classes, grid extents, depth and samples per class must be positive".into()));
    }
    if spec.parts_per_class == 0 || spec.parts_per_class > spec.parts {
        return Err(DataError::Spec(format!(
            "parts_per_class {} must be in 1..={}",
            spec.parts_per_class, spec.parts
        )));
    }
    if spec.parts_per_class > spec.height * spec.width {
        return Err(DataError::Spec(format!(
            "{} parts do not fit on a {}x{} grid",
            spec.parts_per_class, spec.height, spec.width
        )));
    }
    if !(0.0..=1.0).contains(&spec.shared_fraction) {
        return Err(DataError::Spec(format!("shared_fraction {} outside [0, 1]", spec.shared_fraction)));
    }
    let scales = [spec.sigma, spec.jitter, spec.background_offset];
    if scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(DataError::Spec("sigma, jitter and background_offset must be finite and non-negative".into()));
    }
    Ok(())
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(FeatureMapDataset, GroundTruthManifest), DataError> {
    validate(spec)?;
    let Layout { shared, groups } = layout(spec)?;
    let mut rng = stream_rng(spec.seed, RngStream::Synthetic);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let unit_vector = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let v: Vec<f64> = (0..spec.depth).map(|_| unit.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.into_iter().map(|x| x / norm).collect()
    };
    let part_vectors: Vec<Vec<f64>> = (0..spec.parts).map(|_| unit_vector(&mut rng)).collect();
    let background: Vec<f64> = unit_vector(&mut rng).into_iter().map(|x| x * spec.background_offset).collect();

    // shared sets occupy the first `groups * shared` ids, private parts follow
    let private = spec.parts_per_class - shared;
    let first_private = groups * shared;
    let class_parts: Vec<Vec<usize>> = (0..spec.classes)
        .map(|c| {
            let mut ids: Vec<usize> = if shared > 0 {
                let g = c % groups;
                (g * shared..(g + 1) * shared).collect()
            } else {
                Vec::new()
            };
            ids.extend(first_private + c * private..first_private + (c + 1) * private);
            ids
        })
        .collect();

    let cells = spec.height * spec.width;
    let d = spec.depth;
    let mut samples = Vec::with_capacity(spec.classes * spec.samples_per_class);
    let mut placements = Vec::new();
    for (class, parts) in class_parts.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let sample_id = samples.len();
            let mut data: Vec<f64> = (0..cells * d)
                .map(|i| background[i % d] + spec.sigma * unit.sample(&mut rng))
                .collect();
            let spots = sample_indices(&mut rng, cells, parts.len());
            for (&part_id, cell) in parts.iter().zip(spots.iter()) {
                for (e, &pv) in part_vectors[part_id].iter().enumerate() {
                    data[cell * d + e] = pv + spec.jitter * unit.sample(&mut rng);
                }
                placements.push(PartPlacement {
                    sample_id,
                    part_id,
                    row: cell / spec.width,
                    col: cell % spec.width,
                });
            }
            let data = data.into_iter().map(|v| f64::from(v as f32)).collect();
            let map = FeatureMap::new(spec.height, spec.width, d, data).map_err(|e| DataError::Invalid(e.to_string()))?;
            samples.push(Sample { label: class, map });
        }
    }
    let ds = FeatureMapDataset::new(samples)?;
    Ok((
        ds,
        GroundTruthManifest {
            class_parts,
            placements,
            part_vectors,
        },
    ))
}

/// Accuracy of a classifier that knows the true part vectors: each sample
/// goes to the class whose parts have the smallest summed nearest-patch
/// squared distance.
pub fn nearest_part_oracle_accuracy(ds: &FeatureMapDataset, manifest: &GroundTruthManifest) -> f64 {
    if ds.is_empty() || manifest.part_vectors.is_empty() {
        return 0.0;
    }
    let correct = ds
        .samples()
        .iter()
        .filter(|s| {
            let nearest: Vec<f64> = manifest
                .part_vectors
                .iter()
                .map(|p| {
                    s.map
                        .locations()
                        .map(|z| z.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            let score = |c: usize| manifest.class_parts[c].iter().map(|&p| nearest[p]).sum::<f64>();
            let best = (0..manifest.class_parts.len())
                .min_by(|&a, &b| score(a).total_cmp(&score(b)))
                .expect("at least one class");
            best == s.label
        })
        .count();
    correct as f64 / ds.len() as f64
}

fn manifest_paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("class_parts.csv"), base.with_extension("sample_parts.csv"))
}

/// Writes `<base>.class_parts.csv` and `<base>.sample_parts.csv` next to `base`.
pub fn write_manifest(manifest: &GroundTruthManifest, base: &Path) -> Result<(PathBuf, PathBuf), DataError> {
    let (classes_path, samples_path) = manifest_paths(base);
    let mut out = String::from("class_id,part_id\n");
    for (c, parts) in manifest.class_parts.iter().enumerate() {
        for p in parts {
            writeln!(out, "{c},{p}").expect("string write");
        }
    }
    fs::write(&classes_path, out).map_err(|e| DataError::io(&classes_path, e))?;

    let mut out = String::from("sample_id,part_id,row,col\n");
    for p in &manifest.placements {
        writeln!(out, "{},{},{},{}", p.sample_id, p.part_id, p.row, p.col).expect("string write");
    }
    fs::write(&samples_path, out).map_err(|e| DataError::io(&samples_path, e))?;
    Ok((classes_path, samples_path))
}

fn parse_rows(text: &str, header: &str, width: usize) -> Result<Vec<Vec<usize>>, DataError> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(header) {
        return Err(DataError::Manifest(format!("expected header '{header}'")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let row: Result<Vec<usize>, _> = line.split(',').map(|f| f.trim().parse::<usize>()).collect();
            match row {
                Ok(r) if r.len() == width => Ok(r),
                _ => Err(DataError::Manifest(format!("line {}: '{line}'", i + 2))),
            }
        })
        .collect()
}

pub fn read_manifest(base: &Path) -> Result<GroundTruthManifest, DataError> {
    let (classes_path, samples_path) = manifest_paths(base);
    let text = fs::read_to_string(&classes_path).map_err(|e| DataError::io(&classes_path, e))?;
    let mut class_parts: Vec<Vec<usize>> = Vec::new();
    for r in parse_rows(&text, "class_id,part_id", 2)? {
        if class_parts.len() <= r[0] {
            class_parts.resize(r[0] + 1, Vec::new());
        }
        class_parts[r[0]].push(r[1]);
    }
    let text = fs::read_to_string(&samples_path).map_err(|e| DataError::io(&samples_path, e))?;
    let placements = parse_rows(&text, "sample_id,part_id,row,col", 4)?
        .into_iter()
        .map(|r| PartPlacement {
            sample_id: r[0],
            part_id: r[1],
            row: r[2],
            col: r[3],
        })
        .collect();
    Ok(GroundTruthManifest {
        class_parts,
        placements,
        part_vectors: Vec::new(),
    })
}
