use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::params::ParameterStore;

fn tiny(pseudo: usize, seed: u64) -> (Network, ParameterStore<f64>) {
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::build(&crate::nn::Architecture::tiny(), 2, pseudo, &mut store, &mut rng).unwrap();
    (net, store)
}

fn images(rng: &mut ChaCha8Rng, n: usize) -> Vec<BinaryImage> {
    (0..n).map(|_| BinaryImage::from_fn(|_, _| rng.random_bool(0.25))).collect()
}

fn softmax_oracle(logits: &[f64]) -> Vec<f64> {
    let total: f64 = logits.iter().map(|l| l.exp()).sum();
    logits.iter().map(|l| l.exp() / total).collect()
}

#[test]
fn identical_keys_give_uniform_weights() {
    let k = vec![0.3, -1.2, 2.0];
    let w = attention_weights(&[1.0, 0.5, -0.2], &vec![k; 4]).unwrap();
    assert!(w.as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let single = attention_weights(&[5.0, 5.0, 5.0], &[vec![1.0, 2.0, 3.0]]).unwrap();
    assert_eq!(single.as_slice(), &[1.0]);
}

#[test]
fn two_key_softmax_matches_closed_form() {
    let w = attention_weights(&[1.0], &[vec![2f64.ln()], vec![0.0]]).unwrap();
    assert!((w.as_slice()[0] - 2.0 / 3.0).abs() < 1e-12);
    assert!((w.as_slice()[1] - 1.0 / 3.0).abs() < 1e-12);
    let oracle = softmax_oracle(&[2f64.ln(), 0.0]);
    assert!((w.as_slice()[0] - oracle[0]).abs() < 1e-15);
}

#[test]
fn empty_key_set_is_a_contract_error() {
    assert!(matches!(attention_weights(&[1.0], &[]), Err(GmnError::Contract(_))));
}

#[test]
fn huge_similarities_do_not_overflow() {
    let w = attention_weights(&[1.0], &[vec![1e4], vec![1e4 - 1.0], vec![-1e4]]).unwrap();
    assert!(w.as_slice().iter().all(|v| v.is_finite()));
    assert!((w.as_slice()[0] - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-12);
}

#[test]
fn interpolation_cases() {
    let protos = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
    let w = AttentionWeights(vec![0.25, 0.75]);
    assert_eq!(interpolate_prototypes(&w, &protos).unwrap(), vec![0.25, 0.75, 0.0]);
    let onehot = AttentionWeights(vec![0.0, 1.0]);
    assert_eq!(interpolate_prototypes(&onehot, &protos).unwrap(), protos[1]);
    let uniform = AttentionWeights(vec![0.5, 0.5]);
    assert_eq!(interpolate_prototypes(&uniform, &[vec![2.0, 4.0], vec![4.0, 8.0]]).unwrap(), vec![3.0, 6.0]);
    assert!(matches!(interpolate_prototypes(&uniform, &protos[..1]), Err(GmnError::Contract(_))));
}

fn vectors(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    proptest::collection::vec(proptest::collection::vec(-5.0..5.0f64, d), n)
}

proptest! {
    #[test]
    fn weights_lie_on_the_simplex(q in proptest::collection::vec(-5.0..5.0f64, 4), keys in (1usize..12).prop_flat_map(|n| vectors(n, 4))) {
        let w = attention_weights(&q, &keys).unwrap();
        prop_assert!(w.as_slice().iter().all(|&v| v >= 0.0));
        prop_assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn shifting_all_similarities_leaves_weights(logits in proptest::collection::vec(-20.0..20.0f64, 1..10), shift in -50.0..50.0f64) {
        // one-dimensional keys with query 1 make the keys the similarities
        let keys: Vec<Vec<f64>> = logits.iter().map(|&l| vec![l]).collect();
        let shifted: Vec<Vec<f64>> = logits.iter().map(|&l| vec![l + shift]).collect();
        let a = attention_weights(&[1.0], &keys).unwrap();
        let b = attention_weights(&[1.0], &shifted).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn raising_one_similarity_moves_weight_to_it(logits in proptest::collection::vec(-5.0..5.0f64, 2..8), pick in 0usize..8, bump in 0.01..3.0f64) {
        let i = pick % logits.len();
        let keys: Vec<Vec<f64>> = logits.iter().map(|&l| vec![l]).collect();
        let mut raised = keys.clone();
        raised[i][0] += bump;
        let a = attention_weights(&[1.0], &keys).unwrap();
        let b = attention_weights(&[1.0], &raised).unwrap();
        for j in 0..logits.len() {
            if j == i {
                prop_assert!(b.as_slice()[j] > a.as_slice()[j]);
            } else {
                prop_assert!(b.as_slice()[j] < a.as_slice()[j]);
            }
        }
    }
}

struct Outcome {
    r: Vec<f64>,
    h: Vec<f64>,
    steps: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>,
}

fn run_match(
    net: &Network,
    store: &ParameterStore<f64>,
    query: Option<&BinaryImage>,
    set: &[&BinaryImage],
    steps: usize,
    kernel: Kernel,
) -> Result<Outcome> {
    let mut tape = Tape::new(store);
    let cond = ConditioningSetEmbedding::encode(net, &mut tape, set, 1)?.augment_with_pseudo(net);
    let m = match query {
        Some(x) => {
            let b = Network::image_batch(&mut tape, &[x])?;
            let f = net.encode(&mut tape, b)?;
            full_context_match(net, &mut tape, MatchQuery::Features(f), &cond, steps, Controller::Shared, kernel)?
        }
        None => prior_match(net, &mut tape, &cond, steps, kernel)?,
    };
    Ok(Outcome {
        r: tape.value(m.r).to_vec(),
        h: tape.value(m.h).to_vec(),
        steps: m
            .steps
            .iter()
            .map(|s| (tape.value(s.h).to_vec(), tape.value(s.weights).to_vec(), tape.value(s.r).to_vec()))
            .collect(),
    })
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn zero_steps_is_a_contract_error() {
    let (net, store) = tiny(1, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let imgs = images(&mut rng, 2);
    let set: Vec<&BinaryImage> = imgs.iter().collect();
    assert!(matches!(run_match(&net, &store, Some(&imgs[0]), &set, 0, Kernel::Softmax), Err(GmnError::Contract(_))));
}

#[test]
fn permuting_the_set_leaves_outputs_unchanged() {
    let (net, store) = tiny(1, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let imgs = images(&mut rng, 6);
        let x = &imgs[5];
        let set: Vec<&BinaryImage> = imgs[..5].iter().collect();
        let mut shuffled = set.clone();
        shuffled.rotate_left(2);
        shuffled.swap(0, 3);
        for query in [Some(x), None] {
            let a = run_match(&net, &store, query, &set, 4, Kernel::Softmax).unwrap();
            let b = run_match(&net, &store, query, &shuffled, 4, Kernel::Softmax).unwrap();
            assert!(max_diff(&a.r, &b.r) < 1e-5 && max_diff(&a.h, &b.h) < 1e-5);
        }
    }
}

#[test]
fn single_element_set_returns_its_prototype() {
    let (net, store) = tiny(0, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let imgs = images(&mut rng, 2);
    for query in [Some(&imgs[1]), None] {
        let out = run_match(&net, &store, query, &[&imgs[0]], 3, Kernel::Softmax).unwrap();
        for (h, w, r) in &out.steps {
            assert_eq!(w, &vec![1.0]);
            let mut tape = Tape::new(&store);
            let b = Network::image_batch(&mut tape, &[&imgs[0]]).unwrap();
            let f = net.encode(&mut tape, b).unwrap();
            let hv = tape.constant_from(vec![1, 8], h.clone()).unwrap();
            let p = net.embedding_head(&mut tape, HeadRole::Prototype, Some(f), Some(hv)).unwrap();
            assert!(max_diff(tape.value(p), r) < 1e-12);
        }
    }
}

#[test]
fn empty_set_with_pseudo_attends_to_it_alone() {
    let (net, store) = tiny(1, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = images(&mut rng, 1).remove(0);
    let pseudo_proto = store.get(net.pseudo().unwrap().proto).data().to_vec();
    for query in [Some(&x), None] {
        let out = run_match(&net, &store, query, &[], 2, Kernel::Softmax).unwrap();
        for (_, w, r) in &out.steps {
            assert_eq!(w, &vec![1.0]);
            assert_eq!(r, &pseudo_proto);
        }
    }
}

#[test]
fn empty_set_without_pseudo_is_rejected() {
    let (net, store) = tiny(0, 9);
    let x = BinaryImage::zeros();
    for kernel in [Kernel::Softmax, Kernel::Uniform] {
        assert!(matches!(run_match(&net, &store, Some(&x), &[], 1, kernel), Err(GmnError::Contract(_))));
        assert!(matches!(run_match(&net, &store, None, &[], 1, kernel), Err(GmnError::Contract(_))));
    }
}

#[test]
fn pseudo_adds_one_element() {
    let (net, store) = tiny(1, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let imgs = images(&mut rng, 5);
    let set: Vec<&BinaryImage> = imgs.iter().collect();
    let mut tape = Tape::new(&store);
    let cond = ConditioningSetEmbedding::encode(&net, &mut tape, &set, 1).unwrap();
    assert_eq!(cond.element_count(), 5);
    let cond = cond.augment_with_pseudo(&net);
    assert_eq!(cond.element_count(), 6);
    let out = run_match(&net, &store, Some(&imgs[0]), &set, 1, Kernel::Softmax).unwrap();
    assert_eq!(out.steps[0].1.len(), 6);
}

#[test]
fn uniform_kernel_averages_visible_elements() {
    let (net, store) = tiny(1, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let imgs = images(&mut rng, 3);
    let set: Vec<&BinaryImage> = imgs.iter().collect();
    let out = run_match(&net, &store, Some(&imgs[0]), &set, 2, Kernel::Uniform).unwrap();
    for (_, w, _) in &out.steps {
        assert!(w.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}

/// Plain-vector evaluation of one head: `PReLU(Wᵀ[f; h] + b)`.
fn head_by_hand(store: &ParameterStore<f64>, net: &Network, role: HeadRole, f: &[f64], h: &[f64]) -> Vec<f64> {
    let head = net.head(role);
    let w = store.get(head.w).data();
    let b = store.get(head.b).data();
    let a = store.get(head.slope).data();
    let e = b.len();
    let input: Vec<f64> = f.iter().chain(h).copied().collect();
    (0..e)
        .map(|j| {
            let rows = head.feature_width + head.state_width;
            let pre: f64 = b[j]
                + input
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        // a latent query uses only the leading rows of the feature block
                        let row = if i < f.len() { i } else { head.feature_width + (i - f.len()) };
                        debug_assert!(row < rows);
                        v * w[row * e + j]
                    })
                    .sum::<f64>();
            crate::nn::prelu(pre, a[j])
        })
        .collect()
}

fn gru_by_hand(store: &ParameterStore<f64>, net: &Network, which: Controller, h: &[f64], x: &[f64]) -> Vec<f64> {
    let cell = net.controller(which);
    let hd = cell.hidden;
    let w = store.get(cell.w_in).data();
    let ug = store.get(cell.u_gates).data();
    let un = store.get(cell.u_cand).data();
    let b = store.get(cell.bias).data();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let xw = |c: usize| b[c] + x.iter().enumerate().map(|(i, v)| v * w[i * 3 * hd + c]).sum::<f64>();
    let hu = |c: usize| h.iter().enumerate().map(|(i, v)| v * ug[i * 2 * hd + c]).sum::<f64>();
    let z: Vec<f64> = (0..hd).map(|j| sig(xw(j) + hu(j))).collect();
    let r: Vec<f64> = (0..hd).map(|j| sig(xw(hd + j) + hu(hd + j))).collect();
    (0..hd)
        .map(|j| {
            let n = (xw(2 * hd + j) + (0..hd).map(|i| r[i] * h[i] * un[i * hd + j]).sum::<f64>()).tanh();
            z[j] * h[j] + (1.0 - z[j]) * n
        })
        .collect()
}

fn features_of(net: &Network, store: &ParameterStore<f64>, imgs: &[&BinaryImage]) -> Vec<Vec<f64>> {
    let mut tape = Tape::new(store);
    let b = Network::image_batch(&mut tape, imgs).unwrap();
    let f = net.encode(&mut tape, b).unwrap();
    tape.value(f).chunks(net.feature_dim()).map(|c| c.to_vec()).collect()
}

#[test]
fn one_step_matches_hand_computation() {
    let (net, mut store) = tiny(0, 14);
    let h0 = net.controller(Controller::Shared).h0;
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let h0v: Vec<f64> = (0..8).map(|_| rng.random_range(-0.5..0.5)).collect();
    store.set(h0, &h0v).unwrap();
    let imgs = images(&mut rng, 3);
    let feats = features_of(&net, &store, &[&imgs[0], &imgs[1], &imgs[2]]);

    let q = head_by_hand(&store, &net, HeadRole::Query, &feats[2], &h0v);
    let keys: Vec<Vec<f64>> = feats[..2].iter().map(|f| head_by_hand(&store, &net, HeadRole::Key, f, &h0v)).collect();
    let protos: Vec<Vec<f64>> = feats[..2].iter().map(|f| head_by_hand(&store, &net, HeadRole::Prototype, f, &h0v)).collect();
    let w = attention_weights(&q, &keys).unwrap();
    let r = interpolate_prototypes(&w, &protos).unwrap();
    let h1 = gru_by_hand(&store, &net, Controller::Shared, &h0v, &r);

    let out = run_match(&net, &store, Some(&imgs[2]), &[&imgs[0], &imgs[1]], 1, Kernel::Softmax).unwrap();
    assert!(max_diff(&out.steps[0].1, w.as_slice()) < 1e-12);
    assert!(max_diff(&out.r, &r) < 1e-12);
    assert!(max_diff(&out.h, &h1) < 1e-12);
}

#[test]
fn latent_query_matches_hand_computation() {
    let (net, store) = tiny(1, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let imgs = images(&mut rng, 2);
    let feats = features_of(&net, &store, &[&imgs[0], &imgs[1]]);
    let z = vec![0.7, -1.1];
    let h0 = store.get(net.controller(Controller::Shared).h0).data().to_vec();
    let q = head_by_hand(&store, &net, HeadRole::Query, &z, &h0);
    let mut keys: Vec<Vec<f64>> = feats.iter().map(|f| head_by_hand(&store, &net, HeadRole::Key, f, &h0)).collect();
    let mut protos: Vec<Vec<f64>> = feats.iter().map(|f| head_by_hand(&store, &net, HeadRole::Prototype, f, &h0)).collect();
    keys.push(store.get(net.pseudo().unwrap().key).data().to_vec());
    protos.push(store.get(net.pseudo().unwrap().proto).data().to_vec());
    let r = interpolate_prototypes(&attention_weights(&q, &keys).unwrap(), &protos).unwrap();

    let mut tape = Tape::new(&store);
    let cond = ConditioningSetEmbedding::encode(&net, &mut tape, &[&imgs[0], &imgs[1]], 1).unwrap().augment_with_pseudo(&net);
    let zv = tape.constant_from(vec![1, 2], z).unwrap();
    let m = full_context_match(&net, &mut tape, MatchQuery::Latent(zv), &cond, 1, Controller::Shared, Kernel::Softmax).unwrap();
    assert!(max_diff(tape.value(m.r), &r) < 1e-12);
}

#[test]
fn frozen_controller_repeats_basic_matching() {
    let (net, mut store) = tiny(1, 18);
    for which in [Controller::Shared, Controller::Prior] {
        let cell = net.controller(which).clone();
        for id in [cell.w_in, cell.u_gates, cell.u_cand] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut bias = vec![0.0; 24];
        bias[..8].iter_mut().for_each(|b| *b = 60.0);
        store.set(cell.bias, &bias).unwrap();
        store.set(cell.h0, &[0.3, -0.2, 0.1, 0.0, 0.5, -0.4, 0.2, 0.9]).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let imgs = images(&mut rng, 4);
    let set: Vec<&BinaryImage> = imgs[..3].iter().collect();
    for query in [Some(&imgs[3]), None] {
        let out = run_match(&net, &store, query, &set, 4, Kernel::Softmax).unwrap();
        let first = &out.steps[0];
        for s in &out.steps[1..] {
            assert_eq!(s, first);
        }
        assert_eq!(out.h, first.0);
    }
}

#[test]
fn prefix_rows_match_separate_evaluations() {
    let (net, store) = tiny(1, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let imgs = images(&mut rng, 4);
    let all: Vec<&BinaryImage> = imgs.iter().collect();
    let mut tape = Tape::new(&store);
    let batch = Network::image_batch(&mut tape, &all).unwrap();
    let feats = net.encode(&mut tape, batch).unwrap();
    let cond = ConditioningSetEmbedding::with_prefixes(Some(feats), 4, vec![0, 1, 2, 3]).augment_with_pseudo(&net);
    let m = full_context_match(&net, &mut tape, MatchQuery::Features(feats), &cond, 3, Controller::Shared, Kernel::Softmax).unwrap();
    let p = prior_match(&net, &mut tape, &cond, 1, Kernel::Softmax).unwrap();
    for t in 0..4 {
        let single = run_match(&net, &store, Some(&imgs[t]), &all[..t], 3, Kernel::Softmax).unwrap();
        assert!(max_diff(&tape.value(m.r)[t * 8..(t + 1) * 8], &single.r) < 1e-12);
        assert!(max_diff(&tape.value(m.h)[t * 8..(t + 1) * 8], &single.h) < 1e-12);
        let prior = run_match(&net, &store, None, &all[..t], 1, Kernel::Softmax).unwrap();
        assert!(max_diff(&tape.value(p.r)[t * 8..(t + 1) * 8], &prior.r) < 1e-12);
    }
}
