use criterion::{black_box, criterion_group, criterion_main, Criterion};
use gmn_core::data::{sample_episode, synthetic_glyphs, Split};
use gmn_core::eval::{draw_noise, is_conditional_nll_with_noise};
use gmn_core::matching::{attention_weights, interpolate_prototypes};
use gmn_core::model::standard_noise;
use gmn_core::{Gmn, GmnConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup(config: GmnConfig) -> (Gmn<f32>, Vec<gmn_core::BinaryImage>) {
    let data = synthetic_glyphs(8, 20, 0, Split::Train, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let len = config.episode_len;
    let episode = sample_episode(&data, len, config.max_classes, &mut rng).unwrap();
    (Gmn::new(config, 1).unwrap(), episode.images().into_iter().cloned().collect())
}

fn episode_step(c: &mut Criterion) {
    for (name, config) in [("tiny", GmnConfig::tiny()), ("reduced", GmnConfig::reduced())] {
        let (model, images) = setup(config);
        let refs: Vec<_> = images.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows = model.episode_positions(refs.len()).len();
        let eps = standard_noise::<f32, _>(&mut rng, rows, model.config().latent_dim);
        c.bench_function(&format!("episode_fwd_bwd/{name}"), |b| {
            b.iter(|| model.evaluate_episode(black_box(&refs), black_box(&eps), true).unwrap())
        });
    }
}

fn importance_sampling(c: &mut Criterion) {
    let (model, images) = setup(GmnConfig::tiny());
    let model = model.cast::<f64>();
    let cond: Vec<_> = images[..2].iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let noise = draw_noise(&mut rng, 200, model.config().latent_dim);
    c.bench_function("is_nll/tiny/S=200", |b| {
        b.iter(|| is_conditional_nll_with_noise(black_box(&images[2]), &cond, &model, &noise).unwrap())
    });
}

fn matching(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut vec = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let query = vec(200);
    let keys: Vec<_> = (0..20).map(|_| vec(200)).collect();
    let protos: Vec<_> = (0..20).map(|_| vec(200)).collect();
    c.bench_function("attention/n=20/d=200", |b| {
        b.iter(|| {
            let w = attention_weights(black_box(&query), black_box(&keys)).unwrap();
            interpolate_prototypes(&w, &protos).unwrap()
        })
    });
}

criterion_group!(benches, episode_step, importance_sampling, matching);
criterion_main!(benches);
