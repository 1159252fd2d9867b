use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::GraphError;

/// Share of every class held out for testing.
pub const TEST_FRACTION: f64 = 0.3;
/// Share of every class's training part held out for validation.
pub const VAL_FRACTION: f64 = 0.15;

/// Index sets into the sample list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified 7:3 train/test split, then 15% of each class's training part
/// becomes validation. Index lists come back sorted.
pub fn stratified_split(labels: &[usize], seed: u64) -> Result<Split, GraphError> {
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for c in 0..k {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * TEST_FRACTION).round() as usize;
        let rest = idx.len() - n_test;
        let n_val = (rest as f64 * VAL_FRACTION).round() as usize;
        split.test.extend_from_slice(&idx[..n_test]);
        split.val.extend_from_slice(&idx[n_test..n_test + n_val]);
        split.train.extend_from_slice(&idx[n_test + n_val..]);
    }
    for part in [&mut split.train, &mut split.val, &mut split.test] {
        part.sort_unstable();
    }
    if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
        return Err(GraphError::Config(format!(
            "{} samples are too few for a train/validation/test split",
            labels.len()
        )));
    }
    Ok(split)
}
