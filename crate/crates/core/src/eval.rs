//! Set-level evaluation metrics: playable ratio, duplicate ratio, hamming
//! diversity, and per-tile-kind count distributions.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::level::{self, LevelGrid, TileId, TILE_COUNT};
use crate::playability;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("empty input set")]
    EmptyInput,
    #[error("levels have mixed dimensions")]
    MixedDimensions,
}

/// Mean/std plus a count histogram (count value -> number of levels).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub mean: f64,
    pub std: f64,
    pub histogram: BTreeMap<usize, usize>,
}

/// Tile classes reported by the distribution metrics. The three enemy kinds
/// aggregate into one class; avatar, key, and door are excluded because they
/// are exactly 1 in every playable level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TileClass {
    Empty,
    Wall,
    Enemy,
}

impl TileClass {
    fn count_in(&self, features: &[u32; TILE_COUNT]) -> usize {
        match self {
            TileClass::Empty => features[TileId::Empty.index()] as usize,
            TileClass::Wall => features[TileId::Wall.index()] as usize,
            TileClass::Enemy => (features[4] + features[5] + features[6]) as usize,
        }
    }
}

/// Failure counts per heuristic over a level set.
pub type HeuristicFailures = BTreeMap<String, usize>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileDistributions {
    pub empty: DistributionSummary,
    pub wall: DistributionSummary,
    pub enemy: DistributionSummary,
}

/// Full evaluation of one level set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_levels: usize,
    pub playable_ratio: f64,
    pub duplicate_ratio: f64,
    /// Mean over playable levels of their mean hamming distance to the
    /// other playable levels.
    pub hamming_mean: f64,
    pub hamming_std: f64,
    pub tile_distributions: TileDistributions,
    pub heuristic_failures: HeuristicFailures,
}

fn population_std(values: &[f64], mean: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    var.sqrt()
}

/// Per-level mean hamming distances to the other levels of the set, via
/// per-position tile counts: one pass to count, one pass to score. Matches
/// the naive pairwise double loop.
pub fn mean_hamming_per_level(levels: &[&LevelGrid]) -> Vec<f64> {
    let n = levels.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let cells = levels[0].height() * levels[0].width();
    let mut counts = vec![[0u32; TILE_COUNT]; cells];
    for level in levels {
        for (pos, &tile) in level.cells().iter().enumerate() {
            counts[pos][tile.index()] += 1;
        }
    }
    levels
        .iter()
        .map(|level| {
            let mut differing = 0u64;
            for (pos, &tile) in level.cells().iter().enumerate() {
                differing += (n as u32 - counts[pos][tile.index()]) as u64;
            }
            differing as f64 / (n - 1) as f64
        })
        .collect()
}

/// Evaluates a level set; duplicates are exact cell-for-cell matches, also
/// counted against `reference` when one is given. Hamming statistics cover
/// the playable levels only.
pub fn evaluate_set(
    levels: &[LevelGrid],
    reference: Option<&[LevelGrid]>,
) -> Result<EvalReport, EvalError> {
    if levels.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let (h, w) = (levels[0].height(), levels[0].width());
    if levels.iter().any(|l| l.height() != h || l.width() != w) {
        return Err(EvalError::MixedDimensions);
    }

    let reports = playability::check_many(levels);
    let playable_count = reports.iter().filter(|r| r.playable).count();

    let mut failures: HeuristicFailures = BTreeMap::new();
    for name in playability::PlayabilityReport::HEURISTIC_NAMES {
        failures.insert(name.to_string(), 0);
    }
    for report in &reports {
        for (name, ok) in playability::PlayabilityReport::HEURISTIC_NAMES
            .iter()
            .zip(report.verdicts())
        {
            if !ok {
                *failures.get_mut(*name).unwrap() += 1;
            }
        }
    }

    // A level is distinct when it is the first occurrence within the set and
    // (when a reference corpus is given) absent from the reference.
    let mut seen: HashMap<&[TileId], ()> = HashMap::new();
    if let Some(reference) = reference {
        for r in reference {
            seen.insert(r.cells(), ());
        }
    }
    let mut distinct = 0usize;
    for level in levels {
        if seen.insert(level.cells(), ()).is_none() {
            distinct += 1;
        }
    }
    let duplicate_ratio = 1.0 - distinct as f64 / levels.len() as f64;

    let playable: Vec<&LevelGrid> = levels
        .iter()
        .zip(reports.iter())
        .filter(|(_, r)| r.playable)
        .map(|(l, _)| l)
        .collect();
    let per_level = mean_hamming_per_level(&playable);
    let hamming_mean = if per_level.is_empty() {
        0.0
    } else {
        per_level.iter().sum::<f64>() / per_level.len() as f64
    };
    let hamming_std = population_std(&per_level, hamming_mean);

    Ok(EvalReport {
        n_levels: levels.len(),
        playable_ratio: playable_count as f64 / levels.len() as f64,
        duplicate_ratio,
        hamming_mean,
        hamming_std,
        tile_distributions: TileDistributions {
            empty: tile_distribution(levels, TileClass::Empty)?,
            wall: tile_distribution(levels, TileClass::Wall)?,
            enemy: tile_distribution(levels, TileClass::Enemy)?,
        },
        heuristic_failures: failures,
    })
}

/// Distribution of one tile class's per-level counts.
pub fn tile_distribution(
    levels: &[LevelGrid],
    class: TileClass,
) -> Result<DistributionSummary, EvalError> {
    if levels.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let counts: Vec<usize> = levels
        .iter()
        .map(|l| class.count_in(&level::extract_features(l).counts))
        .collect();
    let values: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let std = population_std(&values, mean);
    let mut histogram = BTreeMap::new();
    for c in counts {
        *histogram.entry(c).or_insert(0) += 1;
    }
    Ok(DistributionSummary {
        mean,
        std,
        histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::level::parse_level;

    fn playable() -> LevelGrid {
        parse_level("wwwww\nw...w\nwA+gw\nw...w\nwwwww").unwrap()
    }

    #[test]
    fn identical_playable_set() {
        let levels = vec![playable(); 4];
        let report = evaluate_set(&levels, None).unwrap();
        assert_eq!(report.playable_ratio, 1.0);
        assert!((report.duplicate_ratio - 0.75).abs() < 1e-12);
        assert_eq!(report.hamming_mean, 0.0);
        assert_eq!(report.hamming_std, 0.0);
    }

    #[test]
    fn distinct_set_has_zero_duplicates() {
        let mut b = playable();
        b.set(1, 1, TileId::Wall);
        let mut c = playable();
        c.set(3, 1, TileId::Wall);
        let report = evaluate_set(&[playable(), b, c], None).unwrap();
        assert_eq!(report.duplicate_ratio, 0.0);
    }

    #[test]
    fn reference_counts_as_duplicate() {
        let reference = vec![playable()];
        let report = evaluate_set(&[playable()], Some(&reference)).unwrap();
        assert_eq!(report.duplicate_ratio, 1.0);
    }

    #[test]
    fn empty_input_rejected() {
        assert_eq!(evaluate_set(&[], None).unwrap_err(), EvalError::EmptyInput);
    }

    #[test]
    fn mixed_dimensions_rejected() {
        let a = playable();
        let b = LevelGrid::filled(3, 3, TileId::Wall).unwrap();
        assert_eq!(
            evaluate_set(&[a, b], None).unwrap_err(),
            EvalError::MixedDimensions
        );
    }

    #[test]
    fn hamming_matches_naive_double_loop() {
        let mut levels = vec![playable()];
        for i in 1..4 {
            let mut l = playable();
            l.set(1, i, TileId::Enemy2);
            l.set(3, i, TileId::Wall);
            levels.push(l);
        }
        let refs: Vec<&LevelGrid> = levels.iter().collect();
        let fast = mean_hamming_per_level(&refs);
        for (i, a) in levels.iter().enumerate() {
            let mut sum = 0usize;
            for (j, b) in levels.iter().enumerate() {
                if i != j {
                    sum += crate::bootstrap::hamming(a, b).unwrap();
                }
            }
            let naive = sum as f64 / (levels.len() - 1) as f64;
            assert!((fast[i] - naive).abs() < 1e-9);
        }
    }

    #[test]
    fn permutation_invariant() {
        let mut b = playable();
        b.set(1, 1, TileId::Enemy1);
        let mut c = playable();
        c.set(1, 2, TileId::Wall);
        let set_a = vec![playable(), b.clone(), c.clone(), playable()];
        let set_b = vec![c, playable(), playable(), b];
        let ra = evaluate_set(&set_a, None).unwrap();
        let rb = evaluate_set(&set_b, None).unwrap();
        assert_eq!(ra.playable_ratio, rb.playable_ratio);
        assert_eq!(ra.duplicate_ratio, rb.duplicate_ratio);
        assert!((ra.hamming_mean - rb.hamming_mean).abs() < 1e-12);
        assert!((ra.hamming_std - rb.hamming_std).abs() < 1e-12);
    }

    #[test]
    fn playable_ratio_matches_batch_api() {
        let mut unplayable = playable();
        unplayable.set(2, 1, TileId::Empty); // remove the avatar
        let levels = vec![playable(), unplayable, playable()];
        let report = evaluate_set(&levels, None).unwrap();
        let count = playability::check_many(&levels)
            .iter()
            .filter(|r| r.playable)
            .count();
        assert_eq!(report.playable_ratio, count as f64 / levels.len() as f64);
    }

    #[test]
    fn wall_distribution_of_uniform_walls() {
        let levels = vec![LevelGrid::filled(9, 13, TileId::Wall).unwrap(); 3];
        let dist = tile_distribution(&levels, TileClass::Wall).unwrap();
        assert_eq!(dist.mean, 117.0);
        assert_eq!(dist.std, 0.0);
        assert_eq!(dist.histogram.get(&117), Some(&3));
    }

    #[test]
    fn enemy_class_aggregates_three_kinds() {
        let mut l = playable();
        l.set(1, 1, TileId::Enemy1);
        l.set(1, 2, TileId::Enemy2);
        l.set(1, 3, TileId::Enemy3);
        let dist = tile_distribution(&[l], TileClass::Enemy).unwrap();
        assert_eq!(dist.mean, 3.0);
    }

    #[test]
    fn distribution_matches_extract_features() {
        let levels = vec![playable()];
        let features = level::extract_features(&levels[0]);
        let empty = tile_distribution(&levels, TileClass::Empty).unwrap();
        assert_eq!(empty.mean, features.counts[1] as f64);
    }
}
