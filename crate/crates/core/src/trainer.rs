//! Alternating adversarial training loop.
//!
//! Each iteration samples a batch of real levels with replacement, runs the
//! discriminator update on hinge losses, then the generator update, and
//! finally fires a bootstrap round when one is due. Everything is driven by
//! a single seeded ChaCha stream, so a run is fully reproducible from its
//! config.
//!
//! Random draws per iteration, in order: real batch indices, the
//! discriminator-step latent batch (both repeated for extra discriminator
//! steps), the generator-step latent batch, then any bootstrap-round draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{BufPool, DiffError, Mode, Tape, TensorId};
use crate::bootstrap::{self, BootstrapConfig, BootstrapError, CorpusState, RoundReport};
use crate::level::LevelGrid;
use crate::losses;
use crate::net::{self, GanConfig, NetError, NetworkParams};
use crate::optim::RmsProp;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("training corpus has mixed dimensions")]
    MixedDimensions,
    #[error("corpus is {got_h}x{got_w} but the network expects {want_h}x{want_w}")]
    GridSizeMismatch {
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

impl From<BootstrapError> for TrainError {
    fn from(e: BootstrapError) -> TrainError {
        match e {
            BootstrapError::EmptyCorpus => TrainError::EmptyCorpus,
            BootstrapError::MixedDimensions => TrainError::MixedDimensions,
            other => TrainError::InvalidConfig(other.to_string()),
        }
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub total_iterations: u64,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
    pub d_steps_per_g_step: u32,
    pub seed: u64,
    /// Checkpoint cadence used by callers that persist snapshots.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-4,
            total_iterations: 10_000,
            rmsprop_decay: 0.99,
            rmsprop_epsilon: 1e-8,
            d_steps_per_g_step: 1,
            seed: 0,
            checkpoint_every: 1_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 1 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig(
                "learning_rate must be > 0".into(),
            ));
        }
        if self.total_iterations < 1 {
            return Err(TrainError::InvalidConfig(
                "total_iterations must be >= 1".into(),
            ));
        }
        if !(self.rmsprop_decay > 0.0 && self.rmsprop_decay < 1.0) {
            return Err(TrainError::InvalidConfig(
                "rmsprop_decay must be in (0, 1)".into(),
            ));
        }
        if !(self.rmsprop_epsilon > 0.0) {
            return Err(TrainError::InvalidConfig(
                "rmsprop_epsilon must be > 0".into(),
            ));
        }
        if self.d_steps_per_g_step < 1 {
            return Err(TrainError::InvalidConfig(
                "d_steps_per_g_step must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogRecord {
    Iteration(IterationRecord),
    BootstrapRound(RoundReport),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub real_score_mean: f64,
    pub fake_score_mean: f64,
    pub corpus_size: usize,
}

/// Serializes log records as JSON lines.
pub fn log_to_jsonl(records: &[LogRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("log record serializes"));
        out.push('\n');
    }
    out
}

/// Owns all mutable training state and advances it one iteration at a time.
pub struct Trainer {
    cfg: TrainConfig,
    bootstrap_cfg: Option<BootstrapConfig>,
    net: NetworkParams,
    corpus: CorpusState,
    opt_g: RmsProp,
    opt_d: RmsProp,
    rng: ChaCha8Rng,
    iteration: u64,
    round: u64,
    log: Vec<LogRecord>,
    /// Recycled tape buffers; keeps per-step allocations warm.
    buf_pool: BufPool,
}

impl Trainer {
    pub fn new(
        levels: Vec<LevelGrid>,
        gan: GanConfig,
        cfg: TrainConfig,
        bootstrap_cfg: Option<BootstrapConfig>,
    ) -> Result<Trainer, TrainError> {
        cfg.validate()?;
        if let Some(b) = &bootstrap_cfg {
            b.validate().map_err(TrainError::from)?;
        }
        let corpus = CorpusState::from_human(levels)?;
        if corpus.height() != gan.height || corpus.width() != gan.width {
            return Err(TrainError::GridSizeMismatch {
                got_h: corpus.height(),
                got_w: corpus.width(),
                want_h: gan.height,
                want_w: gan.width,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let net = NetworkParams::init(gan, &mut rng)?;
        let opt_g = RmsProp::new(&net.generator);
        let opt_d = RmsProp::new(&net.discriminator);
        Ok(Trainer {
            cfg,
            bootstrap_cfg,
            net,
            corpus,
            opt_g,
            opt_d,
            rng,
            iteration: 0,
            round: 0,
            log: Vec::new(),
            buf_pool: BufPool::default(),
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.cfg.total_iterations
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn network(&self) -> &NetworkParams {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut NetworkParams {
        &mut self.net
    }

    pub fn corpus(&self) -> &CorpusState {
        &self.corpus
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Runs one iteration (plus a bootstrap round when due) and returns the
    /// index range of the log records it appended.
    pub fn step(&mut self) -> Result<std::ops::Range<usize>, TrainError> {
        let start = self.log.len();
        self.iteration += 1;

        let mut d_loss = 0.0;
        let mut real_mean = 0.0;
        let mut fake_mean = 0.0;
        let mut batch_indices = Vec::new();
        for _ in 0..self.cfg.d_steps_per_g_step {
            batch_indices = self.sample_batch_indices();
            let (loss, real, fake) = self.d_step(&batch_indices)?;
            d_loss = loss;
            real_mean = real;
            fake_mean = fake;
        }
        let g_loss = self.g_step(&batch_indices)?;

        self.log.push(LogRecord::Iteration(IterationRecord {
            iteration: self.iteration,
            d_loss,
            g_loss,
            real_score_mean: real_mean,
            fake_score_mean: fake_mean,
            corpus_size: self.corpus.len(),
        }));

        if let Some(bcfg) = self.bootstrap_cfg.clone() {
            if self.iteration % bcfg.cadence == 0 {
                self.round += 1;
                let report = bootstrap::bootstrap_round(
                    &mut self.net,
                    &mut self.corpus,
                    &bcfg,
                    self.round,
                    self.iteration,
                    &mut self.rng,
                );
                self.log.push(LogRecord::BootstrapRound(report));
            }
        }
        Ok(start..self.log.len())
    }

    /// Runs every remaining iteration.
    pub fn run(&mut self) -> Result<(), TrainError> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(())
    }

    fn sample_batch_indices(&mut self) -> Vec<usize> {
        (0..self.cfg.batch_size)
            .map(|_| self.rng.gen_range(0..self.corpus.len()))
            .collect()
    }

    /// Builds the real batch and its conditioning tensor on a tape.
    fn batch_leaves(&mut self, tape: &mut Tape, indices: &[usize]) -> (TensorId, Option<TensorId>) {
        let levels: Vec<&LevelGrid> = indices.iter().map(|&i| &self.corpus.levels()[i]).collect();
        let real = tape.leaf(net::levels_tensor(&levels), false);
        let u = if self.net.config.conditioning {
            let us: Vec<_> = levels
                .iter()
                .map(|l| crate::level::extract_features(l))
                .collect();
            Some(tape.leaf(
                net::features_tensor(&us, self.net.config.height, self.net.config.width),
                false,
            ))
        } else {
            None
        };
        (real, u)
    }

    fn d_step(&mut self, indices: &[usize]) -> Result<(f64, f64, f64), TrainError> {
        let cfg = self.net.config.clone();
        let z = net::sample_latent(self.cfg.batch_size, cfg.latent_dim, &mut self.rng);

        let mut tape = Tape::with_pool(std::mem::take(&mut self.buf_pool));
        let d_leaves = self.net.discriminator.insert_leaves(&mut tape, true);
        let g_leaves = self.net.generator.insert_leaves(&mut tape, false);
        let (real, u) = self.batch_leaves(&mut tape, indices);
        let z_id = tape.leaf(z, false);

        let logits = net::generator_forward(
            &mut tape,
            &mut self.net.generator,
            &g_leaves,
            &cfg,
            z_id,
            u,
            Mode::Train,
        )?;
        // Continuous relaxation of the one-hot encoding, detached so the
        // discriminator step leaves the generator untouched.
        let fake_soft = tape.softmax_channels(logits)?;
        let fake_input = tape.detach(fake_soft);

        let real_scores = net::discriminator_forward(
            &mut tape,
            &mut self.net.discriminator,
            &d_leaves,
            &cfg,
            real,
            u,
            Mode::Train,
        )?;
        let fake_scores = net::discriminator_forward(
            &mut tape,
            &mut self.net.discriminator,
            &d_leaves,
            &cfg,
            fake_input,
            u,
            Mode::Train,
        )?;
        let loss = losses::discriminator_loss(&mut tape, real_scores, fake_scores)?;
        tape.backward(loss)?;
        self.opt_d.step(
            &mut self.net.discriminator,
            &tape,
            &d_leaves,
            self.cfg.learning_rate,
            self.cfg.rmsprop_decay,
            self.cfg.rmsprop_epsilon,
        );

        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let out = (
            tape.data(loss)[0],
            mean(tape.data(real_scores)),
            mean(tape.data(fake_scores)),
        );
        self.buf_pool = tape.into_pool();
        Ok(out)
    }

    fn g_step(&mut self, indices: &[usize]) -> Result<f64, TrainError> {
        let cfg = self.net.config.clone();
        let z = net::sample_latent(self.cfg.batch_size, cfg.latent_dim, &mut self.rng);

        let mut tape = Tape::with_pool(std::mem::take(&mut self.buf_pool));
        let g_leaves = self.net.generator.insert_leaves(&mut tape, true);
        let d_leaves = self.net.discriminator.insert_leaves(&mut tape, false);
        let (_, u) = self.batch_leaves(&mut tape, indices);
        let z_id = tape.leaf(z, false);

        let logits = net::generator_forward(
            &mut tape,
            &mut self.net.generator,
            &g_leaves,
            &cfg,
            z_id,
            u,
            Mode::Train,
        )?;
        let fake_soft = tape.softmax_channels(logits)?;
        let fake_scores = net::discriminator_forward(
            &mut tape,
            &mut self.net.discriminator,
            &d_leaves,
            &cfg,
            fake_soft,
            u,
            Mode::Train,
        )?;
        let loss = losses::generator_loss(&mut tape, fake_scores);
        tape.backward(loss)?;
        self.opt_g.step(
            &mut self.net.generator,
            &tape,
            &g_leaves,
            self.cfg.learning_rate,
            self.cfg.rmsprop_decay,
            self.cfg.rmsprop_epsilon,
        );
        let out = tape.data(loss)[0];
        self.buf_pool = tape.into_pool();
        Ok(out)
    }
}

/// Convenience wrapper: trains to completion and returns the final state.
pub fn train(
    levels: Vec<LevelGrid>,
    gan: GanConfig,
    cfg: TrainConfig,
    bootstrap_cfg: Option<BootstrapConfig>,
) -> Result<(NetworkParams, CorpusState, Vec<LogRecord>), TrainError> {
    let mut trainer = Trainer::new(levels, gan, cfg, bootstrap_cfg)?;
    trainer.run()?;
    let Trainer {
        net, corpus, log, ..
    } = trainer;
    Ok((net, corpus, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::level::parse_level;

    fn tiny_corpus() -> Vec<LevelGrid> {
        vec![
            parse_level("wwwww\nw...w\nwA+gw\nw...w\nwwwww").unwrap(),
            parse_level("wwwww\nwA..w\nw.+.w\nw..gw\nwwwww").unwrap(),
        ]
    }

    fn tiny_gan() -> GanConfig {
        GanConfig {
            height: 5,
            width: 5,
            latent_dim: 4,
            channels: 8,
            embed_hidden: 8,
            attention: true,
            conditioning: true,
        }
    }

    fn tiny_cfg(iters: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            total_iterations: iters,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn rejects_empty_corpus() {
        assert!(matches!(
            Trainer::new(vec![], tiny_gan(), tiny_cfg(1), None),
            Err(TrainError::EmptyCorpus)
        ));
    }

    #[test]
    fn rejects_mixed_dimensions() {
        let mut levels = tiny_corpus();
        levels.push(parse_level("wwww\nwA+w\nw.gw\nwwww").unwrap());
        assert!(matches!(
            Trainer::new(levels, tiny_gan(), tiny_cfg(1), None),
            Err(TrainError::MixedDimensions)
        ));
    }

    #[test]
    fn rejects_config_grid_mismatch() {
        let gan = GanConfig {
            height: 9,
            width: 13,
            ..tiny_gan()
        };
        assert!(matches!(
            Trainer::new(tiny_corpus(), gan, tiny_cfg(1), None),
            Err(TrainError::GridSizeMismatch { .. })
        ));
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = tiny_cfg(1);
        cfg.learning_rate = 0.0;
        assert!(matches!(
            Trainer::new(tiny_corpus(), tiny_gan(), cfg, None),
            Err(TrainError::InvalidConfig(_))
        ));
    }

    #[test]
    fn short_run_is_finite_and_logged() {
        let mut trainer = Trainer::new(tiny_corpus(), tiny_gan(), tiny_cfg(8), None).unwrap();
        trainer.run().unwrap();
        assert_eq!(trainer.log().len(), 8);
        for record in trainer.log() {
            match record {
                LogRecord::Iteration(r) => {
                    assert!(r.d_loss.is_finite());
                    assert!(r.g_loss.is_finite());
                    assert!(r.real_score_mean.is_finite());
                    assert!(r.fake_score_mean.is_finite());
                }
                LogRecord::BootstrapRound(_) => panic!("no bootstrap configured"),
            }
        }
    }

    #[test]
    fn same_seed_same_run() {
        let run = || {
            let (net, _, log) =
                train(tiny_corpus(), tiny_gan(), tiny_cfg(6), None).unwrap();
            (net, log)
        };
        let (net_a, log_a) = run();
        let (net_b, log_b) = run();
        assert_eq!(log_to_jsonl(&log_a), log_to_jsonl(&log_b));
        assert_eq!(net_a, net_b);
    }

    #[test]
    fn bootstrap_prefix_matches_plain_run() {
        let bcfg = BootstrapConfig {
            cadence: 4,
            candidates_per_round: 2,
            ..BootstrapConfig::default()
        };
        let mut plain = Trainer::new(tiny_corpus(), tiny_gan(), tiny_cfg(4), None).unwrap();
        let mut boot =
            Trainer::new(tiny_corpus(), tiny_gan(), tiny_cfg(4), Some(bcfg)).unwrap();
        // Identical until the first round fires after iteration 4.
        for _ in 0..3 {
            plain.step().unwrap();
            boot.step().unwrap();
        }
        assert_eq!(plain.log(), boot.log());
        assert_eq!(plain.network(), boot.network());
    }

    #[test]
    fn corpus_size_nondecreasing_under_bootstrap() {
        let bcfg = BootstrapConfig {
            cadence: 2,
            candidates_per_round: 4,
            ..BootstrapConfig::default()
        };
        let mut trainer =
            Trainer::new(tiny_corpus(), tiny_gan(), tiny_cfg(10), Some(bcfg)).unwrap();
        trainer.run().unwrap();
        let mut last = 0usize;
        for record in trainer.log() {
            let size = match record {
                LogRecord::Iteration(r) => r.corpus_size,
                LogRecord::BootstrapRound(r) => r.corpus_size,
            };
            assert!(size >= last);
            last = size;
        }
    }

    #[test]
    fn log_serializes_as_tagged_json_lines() {
        let record = LogRecord::Iteration(IterationRecord {
            iteration: 3,
            d_loss: 1.5,
            g_loss: -0.25,
            real_score_mean: 0.1,
            fake_score_mean: -0.2,
            corpus_size: 5,
        });
        let line = serde_json::to_string(&record).unwrap();
        assert!(line.starts_with("{\"type\":\"iteration\""));
        let parsed: LogRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(parsed, record);
    }
}
