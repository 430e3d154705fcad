//! Corpus bootstrapping: periodically sample the generator, keep playable
//! non-duplicate levels, and grow the training set.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::level::{FeatureVector, LevelGrid, TileId};
use crate::net::{self, ConditioningSource, NetworkParams};
use crate::playability;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BootstrapError {
    #[error("grid dimensions differ: {a_h}x{a_w} vs {b_h}x{b_w}")]
    DimensionMismatch {
        a_h: usize,
        a_w: usize,
        b_h: usize,
        b_w: usize,
    },
    #[error("invalid bootstrap config: {0}")]
    InvalidConfig(String),
    #[error("corpus levels have mixed dimensions")]
    MixedDimensions,
    #[error("corpus is empty")]
    EmptyCorpus,
}

/// Bootstrapping schedule and filters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    /// Iterations between rounds.
    pub cadence: u64,
    /// Levels sampled from the generator each round.
    pub candidates_per_round: usize,
    /// Corpus size cap; 0 means unlimited. Nothing is ever evicted — the
    /// round just stops appending.
    pub max_corpus_size: usize,
    /// Minimum hamming distance to every stored level for a candidate to
    /// count as new.
    pub min_hamming_to_corpus: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            cadence: 100,
            candidates_per_round: 32,
            max_corpus_size: 500,
            min_hamming_to_corpus: 1,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<(), BootstrapError> {
        if self.cadence < 1 {
            return Err(BootstrapError::InvalidConfig("cadence must be >= 1".into()));
        }
        if self.candidates_per_round < 1 {
            return Err(BootstrapError::InvalidConfig(
                "candidates_per_round must be >= 1".into(),
            ));
        }
        if self.min_hamming_to_corpus < 1 {
            return Err(BootstrapError::InvalidConfig(
                "min_hamming_to_corpus must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Where a corpus level came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Origin {
    Human,
    Bootstrapped { round: u64 },
}

/// The training corpus: ordered levels, their origins, and a hash set of
/// cell data for exact-duplicate detection. No two stored levels are
/// identical, and human levels are never removed.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusState {
    levels: Vec<LevelGrid>,
    origins: Vec<Origin>,
    seen: HashSet<Vec<TileId>>,
}

impl CorpusState {
    /// Builds the initial corpus from human levels. Exact duplicates in the
    /// input are dropped (keeping the first); dimensions must be uniform.
    pub fn from_human(levels: Vec<LevelGrid>) -> Result<CorpusState, BootstrapError> {
        if levels.is_empty() {
            return Err(BootstrapError::EmptyCorpus);
        }
        let (h, w) = (levels[0].height(), levels[0].width());
        if levels.iter().any(|l| l.height() != h || l.width() != w) {
            return Err(BootstrapError::MixedDimensions);
        }
        let mut corpus = CorpusState {
            levels: Vec::new(),
            origins: Vec::new(),
            seen: HashSet::new(),
        };
        for level in levels {
            if corpus.seen.insert(level.cells().to_vec()) {
                corpus.levels.push(level);
                corpus.origins.push(Origin::Human);
            }
        }
        Ok(corpus)
    }

    /// Rebuilds a corpus from persisted levels and origin tags.
    pub fn from_parts(
        levels: Vec<LevelGrid>,
        origins: Vec<Origin>,
    ) -> Result<CorpusState, BootstrapError> {
        if levels.len() != origins.len() {
            return Err(BootstrapError::InvalidConfig(
                "levels and origins length mismatch".into(),
            ));
        }
        if levels.is_empty() {
            return Err(BootstrapError::EmptyCorpus);
        }
        let (h, w) = (levels[0].height(), levels[0].width());
        if levels.iter().any(|l| l.height() != h || l.width() != w) {
            return Err(BootstrapError::MixedDimensions);
        }
        let seen: HashSet<Vec<TileId>> = levels.iter().map(|l| l.cells().to_vec()).collect();
        Ok(CorpusState {
            levels,
            origins,
            seen,
        })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn levels(&self) -> &[LevelGrid] {
        &self.levels
    }

    pub fn origins(&self) -> &[Origin] {
        &self.origins
    }

    pub fn height(&self) -> usize {
        self.levels[0].height()
    }

    pub fn width(&self) -> usize {
        self.levels[0].width()
    }

    /// Feature vectors of every stored level, in order.
    pub fn features(&self) -> Vec<FeatureVector> {
        self.levels.iter().map(crate::level::extract_features).collect()
    }

    /// Feature vectors of the human-origin levels only.
    pub fn human_features(&self) -> Vec<FeatureVector> {
        self.levels
            .iter()
            .zip(self.origins.iter())
            .filter(|(_, o)| matches!(o, Origin::Human))
            .map(|(l, _)| crate::level::extract_features(l))
            .collect()
    }

    fn contains_exact(&self, level: &LevelGrid) -> bool {
        self.seen.contains(level.cells())
    }

    fn push(&mut self, level: LevelGrid, origin: Origin) {
        self.seen.insert(level.cells().to_vec());
        self.levels.push(level);
        self.origins.push(origin);
    }
}

/// Cell-wise difference count between two equally sized grids.
pub fn hamming(a: &LevelGrid, b: &LevelGrid) -> Result<usize, BootstrapError> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(BootstrapError::DimensionMismatch {
            a_h: a.height(),
            a_w: a.width(),
            b_h: b.height(),
            b_w: b.width(),
        });
    }
    Ok(a.cells()
        .iter()
        .zip(b.cells().iter())
        .filter(|(x, y)| x != y)
        .count())
}

/// Outcome of one bootstrap round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u64,
    pub iteration: u64,
    pub candidates: usize,
    pub survivors: usize,
    pub rejected_unplayable: usize,
    pub rejected_duplicate_corpus: usize,
    pub rejected_duplicate_round: usize,
    pub rejected_corpus_full: usize,
    pub corpus_size: usize,
}

/// Filters a candidate batch and appends the survivors.
///
/// A candidate survives when it (a) passes the playability oracle, (b) is at
/// least `min_hamming_to_corpus` tiles away from every stored level, and
/// (c) is equally far from every candidate already accepted this round.
/// Survivors append in order until `max_corpus_size`. Candidates are counted
/// under the first filter they fail.
pub fn commit_candidates(
    candidates: Vec<LevelGrid>,
    corpus: &mut CorpusState,
    config: &BootstrapConfig,
    round: u64,
    iteration: u64,
) -> RoundReport {
    let mut report = RoundReport {
        round,
        iteration,
        candidates: candidates.len(),
        survivors: 0,
        rejected_unplayable: 0,
        rejected_duplicate_corpus: 0,
        rejected_duplicate_round: 0,
        rejected_corpus_full: 0,
        corpus_size: corpus.len(),
    };
    let mut accepted: Vec<LevelGrid> = Vec::new();
    for candidate in candidates {
        if candidate.height() != corpus.height() || candidate.width() != corpus.width() {
            // Off-size generator output cannot join the corpus.
            report.rejected_unplayable += 1;
            continue;
        }
        if !playability::check_playability(&candidate).playable {
            report.rejected_unplayable += 1;
            continue;
        }
        let min_h = config.min_hamming_to_corpus;
        let too_close_corpus = if min_h == 1 {
            corpus.contains_exact(&candidate)
        } else {
            corpus
                .levels
                .iter()
                .any(|l| hamming(l, &candidate).unwrap() < min_h)
        };
        if too_close_corpus {
            report.rejected_duplicate_corpus += 1;
            continue;
        }
        if accepted
            .iter()
            .any(|l| hamming(l, &candidate).unwrap() < min_h)
        {
            report.rejected_duplicate_round += 1;
            continue;
        }
        if config.max_corpus_size > 0
            && corpus.len() + accepted.len() >= config.max_corpus_size
        {
            report.rejected_corpus_full += 1;
            continue;
        }
        accepted.push(candidate);
    }
    report.survivors = accepted.len();
    for level in accepted {
        corpus.push(level, Origin::Bootstrapped { round });
    }
    report.corpus_size = corpus.len();
    report
}

/// Runs one full round: sample candidates from the generator (eval-mode
/// batchnorm, conditioning drawn from human-origin features), then filter
/// and append. An empty round is a valid outcome; generation failures count
/// every candidate as unplayable.
pub fn bootstrap_round(
    net: &mut NetworkParams,
    corpus: &mut CorpusState,
    config: &BootstrapConfig,
    round: u64,
    iteration: u64,
    rng: &mut impl Rng,
) -> RoundReport {
    let pool = corpus.human_features();
    let sampled = net::generate_levels(
        net,
        config.candidates_per_round,
        ConditioningSource::Pool(&pool),
        rng,
    );
    match sampled {
        Ok(pairs) => {
            let candidates: Vec<LevelGrid> = pairs.into_iter().map(|(l, _)| l).collect();
            commit_candidates(candidates, corpus, config, round, iteration)
        }
        Err(_) => RoundReport {
            round,
            iteration,
            candidates: config.candidates_per_round,
            survivors: 0,
            rejected_unplayable: config.candidates_per_round,
            rejected_duplicate_corpus: 0,
            rejected_duplicate_round: 0,
            rejected_corpus_full: 0,
            corpus_size: corpus.len(),
        },
    }
}
