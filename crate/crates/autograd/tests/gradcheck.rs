//! Central finite-difference checks for every differentiable op.

use tgqn_autograd::{Graph, Tensor, Var};

/// Deterministic pseudo-random values in [-1, 1).
fn values(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

fn tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::new(shape, values(shape.iter().product(), seed))
}

/// Builds a scalar from the given leaves. A fixed random projection is
/// applied to non-scalar outputs so every output element matters.
fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let eval = |inputs: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let proj = g.constant(tensor(g.shape(out), 99));
        let prod = g.mul(out, proj);
        let loss = g.sum_all(prod);
        let grads = g.backward(loss);
        let gs = vars
            .iter()
            .map(|&v| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.shape(v)))
            })
            .collect();
        (g.value(loss).item(), gs)
    };
    let (_, analytic) = eval(&inputs);
    let eps = 1e-6;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += eps;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= eps;
            let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                err < 1e-5,
                "input {i} element {j}: analytic {a} numeric {numeric}"
            );
        }
    }
}

#[test]
fn elementwise_ops() {
    check(vec![tensor(&[2, 3], 1), tensor(&[2, 3], 2)], |g, v| {
        let a = g.add(v[0], v[1]);
        let s = g.sub(a, v[1]);
        let m = g.mul(s, v[1]);
        let t = g.tanh(m);
        let e = g.exp(t);
        let sg = g.sigmoid(e);
        g.scale(sg, 1.7)
    });
}

#[test]
fn relu_and_clamp_away_from_kinks() {
    let x = Tensor::new(&[4], vec![-0.8, 0.3, 0.9, -0.2]);
    check(vec![x.clone()], |g, v| g.relu(v[0]));
    check(vec![x], |g, v| g.clamp(v[0], -0.5, 0.5));
}

#[test]
fn linear_layer() {
    check(
        vec![tensor(&[2, 3, 4], 3), tensor(&[5, 4], 4), tensor(&[5], 5)],
        |g, v| g.linear(v[0], v[1], Some(v[2])),
    );
}

#[test]
fn conv2d_strided_and_padded() {
    check(
        vec![
            tensor(&[2, 3, 5, 5], 6),
            tensor(&[4, 3, 3, 3], 7),
            tensor(&[4], 8),
        ],
        |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1),
    );
    check(
        vec![tensor(&[1, 2, 4, 4], 9), tensor(&[3, 2, 2, 2], 10)],
        |g, v| g.conv2d(v[0], v[1], None, 2, 0),
    );
}

#[test]
fn conv_transpose2d() {
    check(
        vec![
            tensor(&[2, 3, 2, 2], 11),
            tensor(&[3, 2, 4, 4], 12),
            tensor(&[2], 13),
        ],
        |g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), 4, 0),
    );
    check(
        vec![tensor(&[1, 2, 3, 3], 14), tensor(&[2, 3, 3, 3], 15)],
        |g, v| g.conv_transpose2d(v[0], v[1], None, 2, 1),
    );
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x; w), y> == <x, conv_t(y; w)> with the same weights.
    let x = tensor(&[2, 3, 5, 5], 16);
    let w = tensor(&[4, 3, 3, 3], 17);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let cx = g.conv2d(xv, wv, None, 2, 1);
    let y = tensor(g.shape(cx), 18);
    let lhs: f64 = g
        .value(cx)
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| a * b)
        .sum();
    let yv = g.constant(y);
    let ty = g.conv_transpose2d(yv, wv, None, 2, 1);
    assert_eq!(g.shape(ty), x.shape());
    let rhs: f64 = g
        .value(ty)
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| a * b)
        .sum();
    assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
}

#[test]
fn shape_ops() {
    check(
        vec![tensor(&[2, 2, 3, 3], 19), tensor(&[2, 3, 3, 3], 20)],
        |g, v| {
            let c = g.concat(&[v[0], v[1]]);
            g.slice(c, 1, 3)
        },
    );
    check(
        vec![tensor(&[2, 3, 2, 2], 21), tensor(&[2, 3], 22)],
        |g, v| {
            let t = g.tile_spatial(v[1], 2, 2);
            let s = g.add_spatial(v[0], v[1]);
            let m = g.mul(s, t);
            g.mean_spatial(m)
        },
    );
    check(
        vec![
            tensor(&[2, 4], 23),
            tensor(&[2, 4], 24),
            tensor(&[2, 4], 25),
        ],
        |g, v| {
            let st = g.stack(v);
            let r = g.reshape(st, &[6, 4]);
            let r = g.reshape(r, &[2, 3, 4]);
            let a = g.select(r, 0);
            let b = g.select(r, 2);
            g.mul(a, b)
        },
    );
}

#[test]
fn layer_norm() {
    check(
        vec![tensor(&[3, 5], 26), tensor(&[5], 27), tensor(&[5], 28)],
        |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
    );
}

#[test]
fn attention_masked_and_unmasked() {
    let mask_causal = [true, false, false, true, true, false, true, true, true];
    let mask_full = [true; 9];
    for mask in [mask_causal, mask_full] {
        check(
            vec![
                tensor(&[2, 3, 4], 29),
                tensor(&[2, 3, 4], 30),
                tensor(&[2, 3, 4], 31),
            ],
            |g, v| g.attention(v[0], v[1], v[2], 2, &mask),
        );
    }
}

#[test]
fn attention_rows_are_stochastic_and_respect_mask() {
    let mut g = Graph::<f64>::new();
    let q = g.constant(tensor(&[1, 3, 4], 32));
    let k = g.constant(tensor(&[1, 3, 4], 33));
    let v = g.constant(tensor(&[1, 3, 4], 34));
    let mask = [true, false, false, true, true, false, true, true, true];
    let out = g.attention(q, k, v, 2, &mask);
    let probs = g.attention_probs(out).unwrap();
    for (r, row) in probs.data().chunks(3).enumerate() {
        let i = r % 3;
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for j in 0..3 {
            if !mask[i * 3 + j] {
                assert_eq!(row[j], 0.0);
            }
        }
    }
}

#[test]
fn losses() {
    let target = tensor(&[2, 3, 2, 2], 35);
    check(vec![tensor(&[2, 3, 2, 2], 36)], move |g, v| {
        g.gaussian_nll(v[0], &target, 0.7)
    });
    check(
        vec![
            tensor(&[2, 2, 2, 2], 37),
            tensor(&[2, 2, 2, 2], 38),
            tensor(&[2, 2, 2, 2], 39),
            tensor(&[2, 2, 2, 2], 40),
        ],
        |g, v| g.kl_diag(v[0], v[1], v[2], v[3]),
    );
}

#[test]
fn f32_matches_f64_forward() {
    let x = tensor(&[1, 2, 4, 4], 41);
    let w = tensor(&[3, 2, 3, 3], 42);
    let mut g64 = Graph::new();
    let (a, b) = (g64.constant(x.clone()), g64.constant(w.clone()));
    let y64 = g64.conv2d(a, b, None, 1, 1);
    let mut g32 = Graph::<f32>::new();
    let (a, b) = (g32.constant(x.cast()), g32.constant(w.cast()));
    let y32 = g32.conv2d(a, b, None, 1, 1);
    for (p, q) in g64.value(y64).data().iter().zip(g32.value(y32).data()) {
        assert!((p - *q as f64).abs() < 1e-5);
    }
}

#[test]
fn exact_sum_op() {
    check(
        vec![
            tensor(&[2, 3], 43),
            tensor(&[2, 3], 44),
            tensor(&[2, 3], 45),
        ],
        |g, v| g.sum_exact(v),
    );
}
