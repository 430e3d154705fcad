//! Generator and discriminator architecture.
//!
//! Both networks share the same skeleton: 1x1 convolution blocks with
//! batchnorm and ReLU, a single self-attention layer after the last hidden
//! block, and an embedded feature-count vector broadcast over space and
//! concatenated onto the attention output. The generator maps a latent
//! vector to 8 tile-logit channels; the discriminator pools to a single raw
//! score for the hinge loss. Attention and conditioning can each be disabled
//! to recover a plain convolutional baseline.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{DiffError, Mode, RunningStats, Tape, Tensor, TensorId};
use crate::level::{self, FeatureVector, LevelGrid, TILE_COUNT};
use crate::params::{LeafMap, ParamStore};

/// Batchnorm epsilon; conventional, recorded here rather than configurable.
pub const BN_EPS: f64 = 1e-5;
/// Running-stat momentum: `running = 0.9 * running + 0.1 * batch`.
pub const BN_MOMENTUM: f64 = 0.9;
/// Standard deviation of the zero-mean normal weight initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid network config: {0}")]
    BadConfig(String),
    #[error("conditioning is enabled but no feature vector was supplied")]
    MissingConditioning,
    #[error("generator produced non-finite logits")]
    NonFiniteOutput,
    #[error("conditioning pool is empty")]
    EmptyConditioningPool,
}

/// Architecture hyperparameters. Checkpoints embed this and loading
/// verifies compatibility.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GanConfig {
    pub height: usize,
    pub width: usize,
    pub latent_dim: usize,
    pub channels: usize,
    pub embed_hidden: usize,
    pub attention: bool,
    pub conditioning: bool,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            height: 9,
            width: 13,
            latent_dim: 32,
            channels: 32,
            embed_hidden: 16,
            attention: true,
            conditioning: true,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.height < 3 || self.width < 3 {
            return Err(NetError::BadConfig(format!(
                "grid {}x{} is below the 3x3 minimum",
                self.height, self.width
            )));
        }
        if self.latent_dim == 0 || self.channels == 0 || self.embed_hidden == 0 {
            return Err(NetError::BadConfig(
                "latent_dim, channels, and embed_hidden must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Query/key channel reduction: `channels / 8`, floored at 1.
    pub fn attn_reduced(&self) -> usize {
        (self.channels / 8).max(1)
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Channels entering the output head, after the optional concat.
    fn head_in(&self) -> usize {
        self.channels + if self.conditioning { TILE_COUNT } else { 0 }
    }
}

/// All learnable weights and running statistics of both networks.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub config: GanConfig,
    pub generator: ParamStore,
    pub discriminator: ParamStore,
}

impl NetworkParams {
    /// Initializes both networks: weights from N(0, 0.02), biases zero,
    /// batchnorm gamma one and beta zero, attention merge weight zero.
    /// Draw order is fixed by entry insertion order.
    pub fn init(config: GanConfig, rng: &mut impl Rng) -> Result<NetworkParams, NetError> {
        config.validate()?;
        let generator = init_generator(&config, rng);
        let discriminator = init_discriminator(&config, rng);
        Ok(NetworkParams {
            config,
            generator,
            discriminator,
        })
    }
}

fn normal_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, INIT_STD).unwrap();
    let numel = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).unwrap()
}

fn add_bn(store: &mut ParamStore, prefix: &str, channels: usize) {
    store
        .add_param(&format!("{prefix}.gamma"), Tensor::filled(vec![channels], 1.0))
        .unwrap();
    store
        .add_param(&format!("{prefix}.beta"), Tensor::zeros(vec![channels]))
        .unwrap();
    store
        .add_stats(&format!("{prefix}.stats"), RunningStats::new(channels))
        .unwrap();
}

fn add_attention(store: &mut ParamStore, prefix: &str, cfg: &GanConfig, rng: &mut impl Rng) {
    let (c, c8) = (cfg.channels, cfg.attn_reduced());
    store
        .add_param(&format!("{prefix}.wf"), normal_tensor(vec![c8, c], rng))
        .unwrap();
    store
        .add_param(&format!("{prefix}.wg"), normal_tensor(vec![c8, c], rng))
        .unwrap();
    store
        .add_param(&format!("{prefix}.wh"), normal_tensor(vec![c, c], rng))
        .unwrap();
    store
        .add_param(&format!("{prefix}.wv"), normal_tensor(vec![c, c], rng))
        .unwrap();
    // Zero merge weight: the layer starts as an identity map.
    store
        .add_param(&format!("{prefix}.merge"), Tensor::scalar(0.0))
        .unwrap();
}

fn add_embedding(store: &mut ParamStore, prefix: &str, cfg: &GanConfig, rng: &mut impl Rng) {
    let h = cfg.embed_hidden;
    store
        .add_param(&format!("{prefix}.w1"), normal_tensor(vec![h, TILE_COUNT], rng))
        .unwrap();
    store
        .add_param(&format!("{prefix}.b1"), Tensor::zeros(vec![h]))
        .unwrap();
    store
        .add_param(&format!("{prefix}.w2"), normal_tensor(vec![TILE_COUNT, h], rng))
        .unwrap();
    store
        .add_param(&format!("{prefix}.b2"), Tensor::zeros(vec![TILE_COUNT]))
        .unwrap();
}

fn init_generator(cfg: &GanConfig, rng: &mut impl Rng) -> ParamStore {
    let mut s = ParamStore::new();
    let c = cfg.channels;
    let proj_out = c * cfg.plane();
    s.add_param("g.proj.w", normal_tensor(vec![proj_out, cfg.latent_dim], rng))
        .unwrap();
    s.add_param("g.proj.b", Tensor::zeros(vec![proj_out])).unwrap();
    add_bn(&mut s, "g.bn0", c);
    s.add_param("g.conv1.w", normal_tensor(vec![c, c], rng)).unwrap();
    s.add_param("g.conv1.b", Tensor::zeros(vec![c])).unwrap();
    add_bn(&mut s, "g.bn1", c);
    s.add_param("g.conv2.w", normal_tensor(vec![c, c], rng)).unwrap();
    s.add_param("g.conv2.b", Tensor::zeros(vec![c])).unwrap();
    add_bn(&mut s, "g.bn2", c);
    if cfg.attention {
        add_attention(&mut s, "g.attn", cfg, rng);
    }
    if cfg.conditioning {
        add_embedding(&mut s, "g.embed", cfg, rng);
    }
    s.add_param("g.out.w", normal_tensor(vec![TILE_COUNT, cfg.head_in()], rng))
        .unwrap();
    s.add_param("g.out.b", Tensor::zeros(vec![TILE_COUNT])).unwrap();
    s
}

fn init_discriminator(cfg: &GanConfig, rng: &mut impl Rng) -> ParamStore {
    let mut s = ParamStore::new();
    let c = cfg.channels;
    s.add_param("d.conv1.w", normal_tensor(vec![c, TILE_COUNT], rng))
        .unwrap();
    s.add_param("d.conv1.b", Tensor::zeros(vec![c])).unwrap();
    add_bn(&mut s, "d.bn1", c);
    s.add_param("d.conv2.w", normal_tensor(vec![c, c], rng)).unwrap();
    s.add_param("d.conv2.b", Tensor::zeros(vec![c])).unwrap();
    add_bn(&mut s, "d.bn2", c);
    if cfg.attention {
        add_attention(&mut s, "d.attn", cfg, rng);
    }
    if cfg.conditioning {
        add_embedding(&mut s, "d.embed", cfg, rng);
    }
    s.add_param("d.conv3.w", normal_tensor(vec![c, cfg.head_in()], rng))
        .unwrap();
    s.add_param("d.conv3.b", Tensor::zeros(vec![c])).unwrap();
    add_bn(&mut s, "d.bn3", c);
    s.add_param("d.head.w", normal_tensor(vec![1, c], rng)).unwrap();
    s.add_param("d.head.b", Tensor::zeros(vec![1])).unwrap();
    s
}

// ============================================================
// Forward passes
// ============================================================

/// Tape ids of one attention layer's weights.
pub struct AttentionLeaves {
    pub wf: TensorId,
    pub wg: TensorId,
    pub wh: TensorId,
    pub wv: TensorId,
    pub merge: TensorId,
}

impl AttentionLeaves {
    fn from_map(leaves: &LeafMap, prefix: &str) -> AttentionLeaves {
        AttentionLeaves {
            wf: leaves.get(&format!("{prefix}.wf")),
            wg: leaves.get(&format!("{prefix}.wg")),
            wh: leaves.get(&format!("{prefix}.wh")),
            wv: leaves.get(&format!("{prefix}.wv")),
            merge: leaves.get(&format!("{prefix}.merge")),
        }
    }
}

/// Self-attention over one sample `x[c,h,w]`.
///
/// Spatial positions are flattened to N = h*w. Query/key scores
/// `s[i,j] = f(x_i) . g(x_j)` are normalized over the attended-from
/// positions i, so each output position's weights sum to 1; the output is
/// `x + merge * v(sum_i beta[j,i] h(x_i))`.
pub fn self_attention(
    tape: &mut Tape,
    x: TensorId,
    p: &AttentionLeaves,
) -> Result<TensorId, DiffError> {
    let shape = tape.shape(x).to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let n = h * w;
    let x_flat = tape.reshape(x, vec![c, n])?;
    let f = tape.matmul(p.wf, x_flat)?;
    let g = tape.matmul(p.wg, x_flat)?;
    let hmap = tape.matmul(p.wh, x_flat)?;
    // logits[j,i] = g_j . f_i = s[i,j]; row-softmax then normalizes over i.
    let g_t = tape.transpose2d(g)?;
    let logits = tape.matmul(g_t, f)?;
    let beta = tape.softmax_rows(logits)?;
    let beta_t = tape.transpose2d(beta)?;
    let weighted = tape.matmul(hmap, beta_t)?;
    let o = tape.matmul(p.wv, weighted)?;
    let merged = tape.scale_add(x_flat, o, p.merge)?;
    tape.reshape(merged, vec![c, h, w])
}

/// The attention map `beta[j,i]` for one sample, for inspection in tests.
pub fn attention_map(
    tape: &mut Tape,
    x: TensorId,
    p: &AttentionLeaves,
) -> Result<TensorId, DiffError> {
    let shape = tape.shape(x).to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let n = h * w;
    let x_flat = tape.reshape(x, vec![c, n])?;
    let f = tape.matmul(p.wf, x_flat)?;
    let g = tape.matmul(p.wg, x_flat)?;
    let g_t = tape.transpose2d(g)?;
    let logits = tape.matmul(g_t, f)?;
    tape.softmax_rows(logits)
}

/// Applies per-sample attention across a `[n,c,h,w]` batch.
fn attention_batched(
    tape: &mut Tape,
    x: TensorId,
    p: &AttentionLeaves,
) -> Result<TensorId, DiffError> {
    let n = tape.shape(x)[0];
    let mut outs = Vec::with_capacity(n);
    for s in 0..n {
        let xi = tape.slice_batch(x, s)?;
        outs.push(self_attention(tape, xi, p)?);
    }
    tape.stack_batch(&outs)
}

/// Embedding MLP over normalized feature counts `u[n,8] -> [n,8]`.
fn embed_forward(
    tape: &mut Tape,
    leaves: &LeafMap,
    prefix: &str,
    u: TensorId,
) -> Result<TensorId, DiffError> {
    let h1 = tape.linear(
        u,
        leaves.get(&format!("{prefix}.w1")),
        leaves.get(&format!("{prefix}.b1")),
    )?;
    let a1 = tape.relu(h1);
    tape.linear(
        a1,
        leaves.get(&format!("{prefix}.w2")),
        leaves.get(&format!("{prefix}.b2")),
    )
}

/// Broadcasts the embedding over space and concatenates it as channels.
fn concat_embedding(
    tape: &mut Tape,
    leaves: &LeafMap,
    prefix: &str,
    x: TensorId,
    u: TensorId,
    h: usize,
    w: usize,
) -> Result<TensorId, DiffError> {
    let emb = embed_forward(tape, leaves, prefix, u)?;
    let spatial = tape.broadcast_spatial(emb, h, w)?;
    tape.concat_channels(x, spatial)
}

fn bn_block(
    tape: &mut Tape,
    store: &mut ParamStore,
    leaves: &LeafMap,
    prefix: &str,
    x: TensorId,
    mode: Mode,
) -> Result<TensorId, DiffError> {
    let gamma = leaves.get(&format!("{prefix}.gamma"));
    let beta = leaves.get(&format!("{prefix}.beta"));
    let stats = store.stats_mut(&format!("{prefix}.stats"));
    let normed = tape.batchnorm(x, gamma, beta, stats, mode, BN_EPS, BN_MOMENTUM)?;
    Ok(tape.relu(normed))
}

/// Generator: latent batch `z[n,latent]` (plus conditioning `u[n,8]` when
/// enabled) to tile logits `[n,8,h,w]`.
pub fn generator_forward(
    tape: &mut Tape,
    store: &mut ParamStore,
    leaves: &LeafMap,
    cfg: &GanConfig,
    z: TensorId,
    u: Option<TensorId>,
    mode: Mode,
) -> Result<TensorId, NetError> {
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let n = tape.shape(z)[0];
    let proj = tape.linear(z, leaves.get("g.proj.w"), leaves.get("g.proj.b"))?;
    let x = tape.reshape(proj, vec![n, c, h, w])?;
    let x = bn_block(tape, store, leaves, "g.bn0", x, mode)?;
    let x = tape.conv1x1(x, leaves.get("g.conv1.w"), leaves.get("g.conv1.b"))?;
    let x = bn_block(tape, store, leaves, "g.bn1", x, mode)?;
    let x = tape.conv1x1(x, leaves.get("g.conv2.w"), leaves.get("g.conv2.b"))?;
    let mut x = bn_block(tape, store, leaves, "g.bn2", x, mode)?;
    if cfg.attention {
        let attn = AttentionLeaves::from_map(leaves, "g.attn");
        x = attention_batched(tape, x, &attn)?;
    }
    if cfg.conditioning {
        let u = u.ok_or(NetError::MissingConditioning)?;
        x = concat_embedding(tape, leaves, "g.embed", x, u, h, w)?;
    }
    Ok(tape.conv1x1(x, leaves.get("g.out.w"), leaves.get("g.out.b"))?)
}

/// Discriminator: level representation `x[n,8,h,w]` (one-hot or relaxed
/// generator output) to one raw score per sample, `[n,1]`.
pub fn discriminator_forward(
    tape: &mut Tape,
    store: &mut ParamStore,
    leaves: &LeafMap,
    cfg: &GanConfig,
    x: TensorId,
    u: Option<TensorId>,
    mode: Mode,
) -> Result<TensorId, NetError> {
    let (h, w) = (cfg.height, cfg.width);
    let x = tape.conv1x1(x, leaves.get("d.conv1.w"), leaves.get("d.conv1.b"))?;
    let x = bn_block(tape, store, leaves, "d.bn1", x, mode)?;
    let x = tape.conv1x1(x, leaves.get("d.conv2.w"), leaves.get("d.conv2.b"))?;
    let mut x = bn_block(tape, store, leaves, "d.bn2", x, mode)?;
    if cfg.attention {
        let attn = AttentionLeaves::from_map(leaves, "d.attn");
        x = attention_batched(tape, x, &attn)?;
    }
    if cfg.conditioning {
        let u = u.ok_or(NetError::MissingConditioning)?;
        x = concat_embedding(tape, leaves, "d.embed", x, u, h, w)?;
    }
    let x = tape.conv1x1(x, leaves.get("d.conv3.w"), leaves.get("d.conv3.b"))?;
    let x = bn_block(tape, store, leaves, "d.bn3", x, mode)?;
    let pooled = tape.global_avg_pool(x)?;
    // Raw score, no activation: the hinge loss wants an unbounded margin.
    Ok(tape.linear(pooled, leaves.get("d.head.w"), leaves.get("d.head.b"))?)
}

// ============================================================
// Inputs and sampling
// ============================================================

/// Builds the `[n,8]` normalized conditioning tensor from feature vectors.
pub fn features_tensor(us: &[FeatureVector], height: usize, width: usize) -> Tensor {
    let mut data = Vec::with_capacity(us.len() * TILE_COUNT);
    for u in us {
        data.extend_from_slice(&u.normalized(height, width));
    }
    Tensor::new(vec![us.len(), TILE_COUNT], data).unwrap()
}

/// Builds the `[n,8,h,w]` one-hot tensor for a batch of levels.
pub fn levels_tensor(levels: &[&LevelGrid]) -> Tensor {
    let (h, w) = (levels[0].height(), levels[0].width());
    let chunk = TILE_COUNT * h * w;
    let mut data = Vec::with_capacity(levels.len() * chunk);
    for level in levels {
        data.extend_from_slice(&level::encode_onehot(level).data);
    }
    Tensor::new(vec![levels.len(), TILE_COUNT, h, w], data).unwrap()
}

/// Samples a latent batch `[n,latent]` uniformly from [-1, 1].
pub fn sample_latent(n: usize, latent_dim: usize, rng: &mut impl Rng) -> Tensor {
    let data: Vec<f64> = (0..n * latent_dim)
        .map(|_| rng.gen_range(-1.0..=1.0))
        .collect();
    Tensor::new(vec![n, latent_dim], data).unwrap()
}

/// Deterministic embedding of one feature vector through a stored MLP,
/// for inspection and tests. `prefix` is `"g.embed"` or `"d.embed"`.
pub fn embed_features(
    store: &ParamStore,
    prefix: &str,
    cfg: &GanConfig,
    u: &FeatureVector,
) -> Vec<f64> {
    let mut tape = Tape::new();
    let leaves = store.insert_leaves(&mut tape, false);
    let u_id = tape.leaf(features_tensor(&[*u], cfg.height, cfg.width), false);
    let out = embed_forward(&mut tape, &leaves, prefix, u_id).expect("embedding forward");
    tape.data(out).to_vec()
}

/// How generation picks the conditioning vector for each sample.
pub enum ConditioningSource<'a> {
    /// Draw uniformly from a pool of feature vectors.
    Pool(&'a [FeatureVector]),
    /// Use one fixed feature vector for every sample.
    Fixed(FeatureVector),
}

/// Samples `n` levels from the generator with eval-mode batchnorm and
/// decodes them by argmax. Returns each level with the feature vector it
/// was conditioned on.
pub fn generate_levels(
    net: &mut NetworkParams,
    n: usize,
    conditioning: ConditioningSource<'_>,
    rng: &mut impl Rng,
) -> Result<Vec<(LevelGrid, FeatureVector)>, NetError> {
    let cfg = net.config.clone();
    let (h, w) = (cfg.height, cfg.width);
    let plane = TILE_COUNT * h * w;
    let mut out = Vec::with_capacity(n);
    // Chunked batches bound tape memory; eval-mode batchnorm keeps samples
    // independent, so chunking does not change the result.
    const CHUNK: usize = 64;
    let mut remaining = n;
    while remaining > 0 {
        let b = remaining.min(CHUNK);
        let z = sample_latent(b, cfg.latent_dim, rng);
        let us: Vec<FeatureVector> = (0..b)
            .map(|_| match &conditioning {
                ConditioningSource::Pool(pool) => {
                    if pool.is_empty() {
                        return Err(NetError::EmptyConditioningPool);
                    }
                    Ok(pool[rng.gen_range(0..pool.len())])
                }
                ConditioningSource::Fixed(u) => Ok(*u),
            })
            .collect::<Result<_, _>>()?;
        let mut tape = Tape::new();
        let leaves = net.generator.insert_leaves(&mut tape, false);
        let z_id = tape.leaf(z, false);
        let u_id = if cfg.conditioning {
            Some(tape.leaf(features_tensor(&us, h, w), false))
        } else {
            None
        };
        let logits = generator_forward(
            &mut tape,
            &mut net.generator,
            &leaves,
            &cfg,
            z_id,
            u_id,
            Mode::Eval,
        )?;
        let data = tape.data(logits);
        for (s, u) in us.iter().enumerate() {
            let grid = level::decode_onehot(&data[s * plane..(s + 1) * plane], h, w)
                .map_err(|_| NetError::NonFiniteOutput)?;
            out.push((grid, *u));
        }
        remaining -= b;
    }
    Ok(out)
}
