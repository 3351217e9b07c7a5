//! Finite-difference checks of every differentiable operation.

use jointok_autograd::{ConvSpec, Graph, ParamStore, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Build = dyn for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>;

fn eval(inputs: &[Tensor<f64>], f: &Build) -> f64 {
    let g = Graph::inference();
    let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    f(&g, &vars).item()
}

/// Compares analytic and central-difference gradients for every input.
fn check(inputs: Vec<Tensor<f64>>, f: &Build, tol: f64) {
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&g, &vars);
    let grads = g.backward(out);
    let h = 1e-6;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus, f) - eval(&minus, f)) / (2.0 * h);
            let a = analytic.data()[j];
            let scale = 1.0f64.max(numeric.abs()).max(a.abs());
            assert!(
                (a - numeric).abs() / scale < tol,
                "input {i} element {j}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape.to_vec(), 1.0, &mut rng)
}

/// Weighted sum so every output element receives a distinct upstream gradient.
fn probe<'g>(g: &'g Graph<f64>, v: Var<'g, f64>) -> Var<'g, f64> {
    let shape = v.shape();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
    (v * g.constant(Tensor::from_vec(shape, w))).sum_all()
}

#[test]
fn elementwise_binary_with_broadcast() {
    let a = rand_tensor(&[2, 3, 4], 1);
    let b = rand_tensor(&[3, 1], 2);
    let c = rand_tensor(&[4], 3).map(|v| v.abs() + 0.5);
    check(vec![a, b, c], &|g, x| probe(g, (x[0] + x[1]) * x[0] - x[1] / x[2] - x[0] / x[2]), 1e-6);
}

#[test]
fn unary_functions() {
    let x = rand_tensor(&[3, 5], 4).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    let pos = x.map(|v| v.abs() + 0.3);
    check(
        vec![x, pos],
        &|g, v| {
            let a = v[0].exp() + v[0].tanh() + v[0].sigmoid() + v[0].silu() + v[0].gelu();
            let b = v[0].relu() + v[0].leaky_relu(0.2) + v[0].abs() + v[0].square().scale(0.3);
            let c = v[1].log() + v[1].sqrt() + v[0].clamp(-0.5, 0.5).add_scalar(2.0) - v[0].neg();
            probe(g, a + b + c)
        },
        1e-5,
    );
}

#[test]
fn matmul_variants() {
    let a = rand_tensor(&[2, 3, 4], 5);
    let b = rand_tensor(&[2, 4, 5], 6);
    let w = rand_tensor(&[4, 5], 7);
    let wt = rand_tensor(&[5, 4], 8);
    let at = rand_tensor(&[2, 4, 3], 9);
    check(
        vec![a, b, w, wt, at],
        &|g, v| {
            let p = v[0].matmul(v[1]) + v[0].matmul(v[2]) + v[0].matmul_t(v[3]);
            let q = v[4].matmul_ex(v[1], true, false) + v[4].matmul_ex(v[2], true, false);
            probe(g, p + q)
        },
        1e-6,
    );
}

#[test]
fn reductions_and_normalizations() {
    let x = rand_tensor(&[2, 3, 6], 10);
    check(
        vec![x],
        &|g, v| {
            let s = probe(g, v[0].sum_axis(1, true)) + probe(g, v[0].mean_axis(2, false)) + v[0].mean_all();
            let n = probe(g, v[0].softmax_last()) + probe(g, v[0].log_softmax_last());
            let l = probe(g, v[0].layer_norm(1e-5)) + probe(g, v[0].rms_norm(1e-6));
            s + n + l
        },
        1e-5,
    );
}

#[test]
fn shape_operations() {
    let x = rand_tensor(&[2, 3, 4], 11);
    let y = rand_tensor(&[2, 2, 4], 12);
    let z = rand_tensor(&[1, 4], 13);
    check(
        vec![x, y, z],
        &|g, v| {
            let c = g.concat(&[v[0], v[1]], 1);
            let p = c.permute(&[2, 0, 1]).reshape(vec![4, 10]);
            let n = v[0].narrow(1, 1, 2).transpose_last2();
            let b = v[2].broadcast_to(vec![3, 4]);
            let s = v[0].reshape(vec![6, 4]).index_select(&[5, 0, 5, 2]);
            probe(g, p) + probe(g, n) + probe(g, b) + probe(g, s)
        },
        1e-6,
    );
}

#[test]
fn conv2d_strided_and_padded() {
    let x = rand_tensor(&[2, 5, 6, 3], 14);
    let w3 = rand_tensor(&[27, 4], 15);
    let w4 = rand_tensor(&[48, 2], 16);
    check(
        vec![x, w3, w4],
        &|g, v| {
            let a = v[0].conv2d(v[1], ConvSpec { kernel: 3, stride: 1, pad: 1 });
            let b = v[0].conv2d(v[2], ConvSpec { kernel: 4, stride: 2, pad: 1 });
            probe(g, a) + probe(g, b)
        },
        1e-6,
    );
}

#[test]
fn conv2d_matches_direct_convolution() {
    let x = rand_tensor(&[1, 4, 4, 2], 17);
    let w = rand_tensor(&[18, 3], 18);
    let g = Graph::inference();
    let y = g.constant(x.clone()).conv2d(g.constant(w.clone()), ConvSpec { kernel: 3, stride: 1, pad: 1 });
    let y = y.value();
    for oy in 0..4 {
        for ox in 0..4 {
            for co in 0..3 {
                let mut acc = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                        if !(0..4).contains(&iy) || !(0..4).contains(&ix) {
                            continue;
                        }
                        for c in 0..2 {
                            let xv = x.data()[((iy as usize) * 4 + ix as usize) * 2 + c];
                            acc += xv * w.data()[((ky * 3 + kx) * 2 + c) * 3 + co];
                        }
                    }
                }
                let got = y.data()[(oy * 4 + ox) * 3 + co];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn cross_entropy_gradient_and_value() {
    let logits = rand_tensor(&[4, 5], 19);
    check(vec![logits.clone()], &|_, v| v[0].cross_entropy(&[0, 4, 2, 2]).scale(1.7), 1e-6);
    // value equals the composite log-softmax form
    let g = Graph::inference();
    let l = g.constant(logits);
    let fused = l.cross_entropy(&[0, 4, 2, 2]).item();
    let onehot = g.constant(Tensor::one_hot(&[0, 4, 2, 2], 5));
    let composite = (l.log_softmax_last() * onehot).sum_all().scale(-0.25).item();
    assert!((fused - composite).abs() < 1e-12);
}

#[test]
fn detach_blocks_gradient() {
    let g = Graph::new();
    let x = g.input(Tensor::from_vec(vec![2], vec![1.0f64, 2.0]));
    let y = (x * x.detach()).sum_all();
    let grads = g.backward(y);
    assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn shared_param_leaf_accumulates() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::from_vec(vec![1], vec![3.0]));
    let g = Graph::new();
    let a = g.param(&store, id);
    let b = g.param(&store, id);
    assert_eq!(a.id(), b.id());
    let y = (a * b).sum_all();
    let grads = g.backward(y);
    assert_eq!(grads.param(&store, id).unwrap().data(), &[6.0]);
}

#[test]
fn f32_and_f64_agree_on_a_small_network() {
    let x64 = rand_tensor(&[3, 4], 20);
    let w64 = rand_tensor(&[4, 2], 21);
    let run32 = {
        let g = Graph::<f32>::new();
        let x = g.input(x64.cast());
        let w = g.input(w64.cast());
        let y = x.matmul(w).gelu().layer_norm(1e-5).square().sum_all();
        let gr = g.backward(y);
        (y.item() as f64, gr.wrt(w).unwrap().to_f64_vec())
    };
    let g = Graph::<f64>::new();
    let x = g.input(x64);
    let w = g.input(w64);
    let y = x.matmul(w).gelu().layer_norm(1e-5).square().sum_all();
    let gr = g.backward(y);
    assert!((run32.0 - y.item()).abs() < 1e-4);
    for (a, b) in run32.1.iter().zip(gr.wrt(w).unwrap().data()) {
        assert!((a - b).abs() < 1e-3);
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-30.0f64..30.0, 12)) {
        let g = Graph::inference();
        let s = g.constant(Tensor::from_vec(vec![3, 4], values)).softmax_last().value();
        for row in s.rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn permute_round_trips(values in prop::collection::vec(-1.0f64..1.0, 24)) {
        let t = Tensor::from_vec(vec![2, 3, 4], values);
        let back = t.permute(&[1, 2, 0]).permute(&[2, 0, 1]);
        prop_assert_eq!(back, t);
    }

    #[test]
    fn layer_norm_rows_are_standardized(values in prop::collection::vec(-5.0f64..5.0, 16)) {
        prop_assume!(values.chunks(8).all(|r| r.iter().any(|&v| (v - r[0]).abs() > 1e-3)));
        let g = Graph::inference();
        let y = g.constant(Tensor::from_vec(vec![2, 8], values)).layer_norm(1e-12).value();
        for row in y.rows() {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }
}
