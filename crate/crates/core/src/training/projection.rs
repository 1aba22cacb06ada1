use crate::dataio::FeatureMapDataset;
use crate::poolcore::{ModelError, ProtoPoolModel};

/// Where a prototype was moved to.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionEntry {
    pub prototype: usize,
    pub sample: usize,
    pub row: usize,
    pub col: usize,
    /// Euclidean distance between the old prototype and the chosen patch.
    pub distance: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProjectionReport {
    pub entries: Vec<ProjectionEntry>,
    /// Prototypes no slot is assigned to; left unchanged.
    pub unused: Vec<usize>,
    /// Prototypes whose classes have no samples in the dataset; left unchanged.
    pub no_candidates: Vec<usize>,
}

/// Classes that have a slot whose hardened assignment is `p`, for every `p`.
pub fn class_sets(model: &ProtoPoolModel) -> Vec<Vec<usize>> {
    let k = model.config.slots;
    let mut sets = vec![Vec::new(); model.config.prototypes];
    for (row, &p) in model.slots.assignment().iter().enumerate() {
        let class = row / k;
        if sets[p].last() != Some(&class) {
            sets[p].push(class);
        }
    }
    sets
}

/// Replaces each used prototype by its nearest latent training patch drawn
/// from images of the classes that use it. Ties go to the lowest sample
/// index, then the lowest location.
pub fn project_prototypes(model: &mut ProtoPoolModel, train: &FeatureMapDataset) -> Result<ProjectionReport, ModelError> {
    let (_, w, d_in) = train.dims();
    if !train.is_empty() && d_in != model.config.input_depth {
        return Err(ModelError::Dim(format!(
            "dataset depth {d_in} vs model input depth {}",
            model.config.input_depth
        )));
    }
    let sets = class_sets(model);
    let latents: Vec<_> = train.samples().iter().map(|s| model.latent(&s.map)).collect();
    let labels = train.labels();

    let mut report = ProjectionReport::default();
    for (p, classes) in sets.iter().enumerate() {
        if classes.is_empty() {
            report.unused.push(p);
            continue;
        }
        let proto = model.pool.prototype(p).to_vec();
        let mut best: Option<(f64, usize, usize)> = None;
        for (i, lat) in latents.iter().enumerate() {
            if !classes.contains(&labels[i]) {
                continue;
            }
            for (loc, z) in lat.locations().enumerate() {
                let d2: f64 = z.iter().zip(&proto).map(|(a, b)| (a - b) * (a - b)).sum();
                if best.is_none_or(|(bd, _, _)| d2 < bd) {
                    best = Some((d2, i, loc));
                }
            }
        }
        match best {
            Some((d2, i, loc)) => {
                model.pool.set_prototype(p, latents[i].location(loc));
                report.entries.push(ProjectionEntry {
                    prototype: p,
                    sample: i,
                    row: loc / w,
                    col: loc % w,
                    distance: d2.sqrt(),
                });
            }
            None => report.no_candidates.push(p),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Sample;
    use crate::poolcore::{FeatureMap, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(classes: usize, slots: usize, m: usize, d: usize) -> ProtoPoolModel {
        let mut cfg = ModelConfig::new(classes, slots, m, d);
        cfg.addon = false;
        cfg.input_depth = d;
        ProtoPoolModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn picks_nearest_patch_from_class_set() {
        let mut mdl = model(2, 1, 3, 1);
        mdl.set_hard_assignment(&[0, 1]).unwrap();
        mdl.pool.data_mut().copy_from_slice(&[0.0, 10.0, 5.0]);
        // class 0 patches at squared distances 4, 1, 9 from prototype 0
        let ds = FeatureMapDataset::new(vec![
            Sample {
                label: 0,
                map: FeatureMap::new(1, 3, 1, vec![2.0, -1.0, 3.0]).unwrap(),
            },
            Sample {
                label: 1,
                map: FeatureMap::new(1, 3, 1, vec![0.5, 9.0, 12.0]).unwrap(),
            },
        ])
        .unwrap();
        let report = project_prototypes(&mut mdl, &ds).unwrap();
        assert_eq!(mdl.pool.data(), &[-1.0, 9.0, 5.0]);
        assert_eq!(report.entries[0], ProjectionEntry { prototype: 0, sample: 0, row: 0, col: 1, distance: 1.0 });
        assert_eq!(report.entries[1].sample, 1);
        assert_eq!(report.unused, vec![2]);
    }

    #[test]
    fn fixed_point_has_zero_distance() {
        let mut mdl = model(1, 1, 1, 2);
        mdl.set_hard_assignment(&[0]).unwrap();
        mdl.pool.data_mut().copy_from_slice(&[0.25, -0.5]);
        let ds = FeatureMapDataset::new(vec![Sample {
            label: 0,
            map: FeatureMap::new(1, 2, 2, vec![1.0, 1.0, 0.25, -0.5]).unwrap(),
        }])
        .unwrap();
        let report = project_prototypes(&mut mdl, &ds).unwrap();
        assert_eq!(report.entries[0].distance, 0.0);
        assert_eq!(mdl.pool.data(), &[0.25, -0.5]);
    }

    #[test]
    fn shared_prototype_class_set() {
        let mut mdl = model(3, 2, 4, 1);
        mdl.set_hard_assignment(&[0, 1, 0, 2, 3, 3]).unwrap();
        let sets = class_sets(&mdl);
        assert_eq!(sets, vec![vec![0, 1], vec![0], vec![1], vec![2]]);
    }
}
