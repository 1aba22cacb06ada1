use rand::seq::SliceRandom;

use super::{stream_rng, DataError, FeatureMapDataset, RngStream};

/// Stratified train/validation index split.
///
/// Each class contributes `round(n · val_fraction)` samples to validation,
/// clamped so both sides keep at least one. Indices come back sorted.
pub fn split_indices(ds: &FeatureMapDataset, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DataError::Invalid(format!("validation fraction must be in (0, 1), got {val_fraction}")));
    }
    let mut rng = stream_rng(seed, RngStream::Split);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (class, mut idx) in ds.class_indices().into_iter().enumerate() {
        let n = idx.len();
        if n < 2 {
            return Err(DataError::Invalid(format!("class {class} has {n} sample(s); splitting needs at least 2")));
        }
        idx.shuffle(&mut rng);
        let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

pub fn split(ds: &FeatureMapDataset, val_fraction: f64, seed: u64) -> Result<(FeatureMapDataset, FeatureMapDataset), DataError> {
    let (train, val) = split_indices(ds, val_fraction, seed)?;
    Ok((ds.subset(&train)?, ds.subset(&val)?))
}
