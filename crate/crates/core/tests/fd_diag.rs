mod common;
use common::load_fixtures;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tilegan::autodiff::{Mode, Tape};
use tilegan::level::{extract_features, FeatureVector, LevelGrid};
use tilegan::losses::discriminator_loss;
use tilegan::net::{self, GanConfig, NetworkParams};

#[test]
fn diagnose_component() {
    let cfg = GanConfig::default();
    let base = NetworkParams::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let fixtures = load_fixtures();
    let levels: Vec<&LevelGrid> = vec![&fixtures[0], &fixtures[1]];
    let real = net::levels_tensor(&levels);
    let us: Vec<FeatureVector> = levels.iter().map(|l| extract_features(l)).collect();
    let u_tensor = net::features_tensor(&us, cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    // consume the same draws as the op cases would... simpler: fresh z
    let z = net::sample_latent(2, cfg.latent_dim, &mut rng);

    let eval = |delta: f64| -> f64 {
        let mut g_store = base.generator.clone();
        let mut d_store = base.discriminator.clone();
        d_store.param_mut("d.conv1.w").data_mut()[91] += delta;
        let mut tape = Tape::new();
        let d_leaves = d_store.insert_leaves(&mut tape, true);
        let g_leaves = g_store.insert_leaves(&mut tape, false);
        let real_id = tape.leaf(real.clone(), false);
        let u_id = tape.leaf(u_tensor.clone(), false);
        let z_id = tape.leaf(z.clone(), false);
        let logits = net::generator_forward(&mut tape, &mut g_store, &g_leaves, &cfg, z_id, Some(u_id), Mode::Train).unwrap();
        let soft = tape.softmax_channels(logits).unwrap();
        let fake = tape.detach(soft);
        let rs = net::discriminator_forward(&mut tape, &mut d_store, &d_leaves, &cfg, real_id, Some(u_id), Mode::Train).unwrap();
        let fs = net::discriminator_forward(&mut tape, &mut d_store, &d_leaves, &cfg, fake, Some(u_id), Mode::Train).unwrap();
        let loss = discriminator_loss(&mut tape, rs, fs).unwrap();
        tape.data(loss)[0]
    };
    for h in [1e-3, 1e-4, 1e-5, 1e-6, 1e-7] {
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        eprintln!("h={h:.0e}: fd = {fd:.9}");
    }
}
