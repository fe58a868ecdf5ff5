use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{numeric_gradient, relative_error, DEFAULT_EPS};

const TOL: f64 = 1e-3;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    // keep away from the PReLU/clamp kinks at zero
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Checks d/d(inputs) of `Σ out ⊙ R` for a fixed random `R`.
fn check_op(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) {
    let store = ParameterStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe_weights = {
        let mut tape = Tape::new(&store);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        rand_tensor(&mut rng, tape.shape(out).to_vec())
    };
    let loss_of = |tape: &mut Tape<f64>, vars: &[Var]| -> Var {
        let out = build(tape, vars).unwrap();
        let r = tape.constant(probe_weights.clone());
        let prod = tape.mul(out, r).unwrap();
        tape.sum_all(prod)
    };

    let mut tape = Tape::new(&store);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = loss_of(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();

    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).map(|g| g.to_vec()).unwrap_or(vec![0.0; input.numel()]);
        let numeric = numeric_gradient(
            |x| {
                let mut tape = Tape::new(&store);
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        if j == k {
                            tape.constant(Tensor::new(t.shape().to_vec(), x.to_vec()).unwrap())
                        } else {
                            tape.constant(t.clone())
                        }
                    })
                    .collect();
                let l = loss_of(&mut tape, &vars);
                tape.scalar(l)
            },
            input.data(),
            DEFAULT_EPS,
        );
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let err = relative_error(*a, *n, 1e-6);
            assert!(err < TOL, "input {k} element {i}: analytic {a} numeric {n} (rel {err})");
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn matmul_gradients() {
    let mut r = rng();
    check_op(vec![rand_tensor(&mut r, vec![3, 4]), rand_tensor(&mut r, vec![4, 5])], |t, v| t.matmul(v[0], v[1]));
}

#[test]
fn elementwise_gradients() {
    let mut r = rng();
    let a = rand_tensor(&mut r, vec![2, 3]);
    let b = rand_tensor(&mut r, vec![2, 3]);
    check_op(vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    check_op(vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
    check_op(vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    check_op(vec![a.clone()], |t, v| Ok(t.scale(v[0], 1.7)));
    check_op(vec![a.clone()], |t, v| Ok(t.add_scalar(v[0], -0.3)));
    check_op(vec![a.clone()], |t, v| Ok(t.sigmoid(v[0])));
    check_op(vec![a.clone()], |t, v| Ok(t.tanh(v[0])));
    check_op(vec![a.clone()], |t, v| Ok(t.exp(v[0])));
    check_op(vec![a.clone()], |t, v| Ok(t.square(v[0])));
    check_op(vec![a], |t, v| Ok(t.clamp(v[0], -0.5, 0.5)));
}

#[test]
fn channel_ops_gradients() {
    let mut r = rng();
    let x = rand_tensor(&mut r, vec![2, 3, 2, 2]);
    let c = rand_tensor(&mut r, vec![3]);
    check_op(vec![x.clone(), c.clone()], |t, v| t.add_channel_bias(v[0], v[1], 1));
    check_op(vec![x.clone(), c.clone()], |t, v| t.prelu(v[0], v[1], 1));
    let m = rand_tensor(&mut r, vec![4, 3]);
    check_op(vec![m, c], |t, v| t.prelu(v[0], v[1], 1));
    check_op(vec![x.clone()], |t, v| t.sum_axis(v[0], 1));
    check_op(vec![x], |t, v| t.reshape(v[0], vec![2, 12]));
}

#[test]
fn structural_gradients() {
    let mut r = rng();
    let a = rand_tensor(&mut r, vec![2, 3]);
    let b = rand_tensor(&mut r, vec![2, 4]);
    check_op(vec![a.clone(), b], |t, v| t.concat(v[0], v[1], 1));
    let c = rand_tensor(&mut r, vec![1, 2, 3]);
    let d = rand_tensor(&mut r, vec![4, 2, 3]);
    check_op(vec![c.clone(), d], |t, v| t.concat(v[0], v[1], 0));
    check_op(vec![c], |t, v| t.repeat(v[0], 3));
    let e = rand_tensor(&mut r, vec![4, 3]);
    check_op(vec![e.clone()], |t, v| t.gather_rows(v[0], vec![2, 0, 2]));
    check_op(vec![e], |t, v| t.slice_cols(v[0], 1, 2));
}

#[test]
fn matching_primitive_gradients() {
    let mut r = rng();
    let a = rand_tensor(&mut r, vec![2, 3]);
    let c = rand_tensor(&mut r, vec![4, 3]);
    check_op(vec![a.clone(), c], |t, v| t.outer_add(v[0], v[1]));
    let k = rand_tensor(&mut r, vec![2, 4, 3]);
    check_op(vec![a.clone(), k.clone()], |t, v| t.batched_dot(v[0], v[1]));
    let s = rand_tensor(&mut r, vec![2, 4]);
    let mask = vec![true, false, true, true, true, true, false, false];
    check_op(vec![s.clone()], |t, v| t.masked_softmax(v[0], mask.clone()));
    check_op(vec![s, k], |t, v| t.weighted_sum(v[0], v[1]));
}

#[test]
fn spatial_gradients() {
    let mut r = rng();
    let x = rand_tensor(&mut r, vec![2, 2, 7, 6]);
    let w = rand_tensor(&mut r, vec![3, 2, 3, 2]);
    check_op(vec![x.clone(), w], |t, v| t.conv2d(v[0], v[1], 2, (1, 0, 1, 1)));
    let xt = rand_tensor(&mut r, vec![2, 2, 3, 3]);
    let wt = rand_tensor(&mut r, vec![2, 3, 4, 3]);
    check_op(vec![xt.clone(), wt], |t, v| t.conv_transpose2d(v[0], v[1], 2));
    check_op(vec![x], |t, v| t.avg_pool(v[0], 3, 2, 2));
    check_op(vec![xt], |t, v| t.bilinear_resize(v[0], 6, 7));
}

#[test]
fn bernoulli_gradients() {
    let mut r = rng();
    let logits = rand_tensor(&mut r, vec![2, 5]);
    let targets: Vec<f64> = (0..10).map(|i| (i % 3 == 0) as u8 as f64).collect();
    check_op(vec![logits], |t, v| t.bernoulli_loglik(v[0], targets.clone()));
}

/// Direct nested-loop cross-correlation.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: (usize, usize, usize, usize)) -> (Vec<usize>, Vec<f64>) {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + pad.0 + pad.2 - kh) / stride + 1;
    let ow = (wd + pad.1 + pad.3 - kw) / stride + 1;
    let mut out = vec![0.0; b * co * oh * ow];
    for n in 0..b {
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad.0 as isize;
                                let ix = (xo * stride + kx) as isize - pad.1 as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((n * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * c + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((n * co + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    (vec![b, co, oh, ow], out)
}

/// Scatter-add definition of the transposed convolution.
fn conv_transpose_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize) -> (Vec<usize>, Vec<f64>) {
    let (b, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w.shape()[1], w.shape()[2], w.shape()[3]);
    let oh = (h - 1) * stride + kh;
    let ow = (wd - 1) * stride + kw;
    let mut out = vec![0.0; b * co * oh * ow];
    for n in 0..b {
        for c in 0..ci {
            for y in 0..h {
                for xi in 0..wd {
                    let v = x.data()[((n * ci + c) * h + y) * wd + xi];
                    for o in 0..co {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                out[((n * co + o) * oh + y * stride + ky) * ow + xi * stride + kx] +=
                                    v * w.data()[((c * co + o) * kh + ky) * kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    (vec![b, co, oh, ow], out)
}

#[test]
fn conv2d_matches_nested_loop_oracle() {
    let mut r = rng();
    let store = ParameterStore::<f64>::new();
    for (shape, wshape, stride, pad) in [
        (vec![1, 1, 28, 28], vec![3, 1, 4, 4], 2, (0, 0, 0, 0)),
        (vec![2, 3, 13, 13], vec![4, 3, 3, 3], 1, (1, 1, 1, 1)),
        (vec![1, 2, 3, 3], vec![2, 2, 2, 2], 1, (0, 0, 1, 1)),
    ] {
        let x = rand_tensor(&mut r, shape);
        let w = rand_tensor(&mut r, wshape);
        let mut tape = Tape::new(&store);
        let (vx, vw) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let y = tape.conv2d(vx, vw, stride, pad).unwrap();
        let (oshape, expect) = conv_oracle(&x, &w, stride, pad);
        assert_eq!(tape.shape(y), &oshape[..]);
        for (a, b) in tape.value(y).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn first_encoder_window_gives_side_13() {
    let store = ParameterStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let x = tape.zeros(vec![1, 1, 28, 28]);
    let w = tape.zeros(vec![16, 1, 4, 4]);
    let y = tape.conv2d(x, w, 2, (0, 0, 0, 0)).unwrap();
    assert_eq!(tape.shape(y), &[1, 16, 13, 13]);
}

#[test]
fn conv_transpose_matches_scatter_add_oracle() {
    let mut r = rng();
    let store = ParameterStore::<f64>::new();
    for (side, k) in [(3, 2), (6, 3), (13, 4)] {
        let x = rand_tensor(&mut r, vec![2, 2, side, side]);
        let w = rand_tensor(&mut r, vec![2, 3, k, k]);
        let mut tape = Tape::new(&store);
        let (vx, vw) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let y = tape.conv_transpose2d(vx, vw, 2).unwrap();
        let (oshape, expect) = conv_transpose_oracle(&x, &w, 2);
        assert_eq!(tape.shape(y), &oshape[..]);
        for (a, b) in tape.value(y).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn transposed_side_chain_3_6_13_28() {
    let store = ParameterStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let mut x = tape.zeros(vec![1, 1, 3, 3]);
    let mut sides = vec![];
    for k in [2, 3, 4] {
        let w = tape.zeros(vec![1, 1, k, k]);
        x = tape.conv_transpose2d(x, w, 2).unwrap();
        sides.push(tape.shape(x)[2]);
    }
    assert_eq!(sides, vec![6, 13, 28]);
}

#[test]
fn masked_softmax_rejects_empty_rows() {
    let store = ParameterStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let x = tape.zeros(vec![1, 2]);
    assert!(matches!(tape.masked_softmax(x, vec![false, false]), Err(GmnError::Contract(_))));
}

#[test]
fn shape_errors_are_reported() {
    let store = ParameterStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let a = tape.zeros(vec![2, 3]);
    let b = tape.zeros(vec![2, 3]);
    assert!(matches!(tape.matmul(a, b), Err(GmnError::Shape(_))));
    let c = tape.zeros(vec![3, 2]);
    assert!(matches!(tape.add(a, c), Err(GmnError::Shape(_))));
}

#[test]
fn parameter_gradients_accumulate_across_uses() {
    let mut rng = rng();
    let mut store = ParameterStore::<f64>::new();
    let id = store
        .register("w", crate::params::ParamGroup::Heads, vec![2], crate::params::Init::Normal { std: 1.0 }, &mut rng)
        .unwrap();
    let mut tape = Tape::new(&store);
    let w1 = tape.param(id);
    let w2 = tape.param(id);
    assert_eq!(w1, w2);
    let y = tape.mul(w1, w2).unwrap();
    let s = tape.sum_all(y);
    let g = tape.backward(s).unwrap();
    let expect: Vec<f64> = store.get(id).data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(g.params().get(id).unwrap(), &expect[..]);
}

#[test]
fn stable_helpers() {
    assert_eq!(softplus(1000.0f64), 1000.0);
    assert!(softplus(-1000.0f64) >= 0.0 && softplus(-1000.0f64) < 1e-300);
    assert_eq!(sigmoid(-1000.0f64), 0.0);
    assert_eq!(sigmoid(1000.0f64), 1.0);
}
