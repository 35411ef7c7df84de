use super::*;

fn t64(shape: &[usize], rng: &mut PortableRng) -> Tensor<f64> {
    rng.normal_tensor(shape)
}

/// Quadruple-loop cross-correlation.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (k, _, kh, kw) = w.dims4().unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros([n, k, ho, wo]);
    for ni in 0..n {
        for ki in 0..k {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[ki];
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * stride + i) as isize - pad as isize;
                                let ix = (ox * stride + j) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((ki * c + ci) * kh + i) * kw + j];
                                }
                            }
                        }
                    }
                    out.data_mut()[((ni * k + ki) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_sum_of_ones() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::full([1, 1, 2, 2], 1.0));
    let w = g.input(Tensor::full([1, 1, 2, 2], 1.0));
    let b = g.input(Tensor::zeros([1]));
    let y = g.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).data(), &[4.0]);
}

#[test]
fn conv2d_identity_kernel() {
    let mut rng = PortableRng::new(3);
    let xt: Tensor<f32> = rng.normal_tensor(&[2, 1, 5, 4]);
    let mut g = Graph::<f32>::new();
    let x = g.input(xt.clone());
    let w = g.input(Tensor::full([1, 1, 1, 1], 1.0));
    let b = g.input(Tensor::zeros([1]));
    let y = g.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(g.value(y), &xt);
}

#[test]
fn conv2d_matches_loop_oracle() {
    for seed in 0..5 {
        let mut rng = PortableRng::new(seed);
        let xt = t64(&[1, 2, 5, 5], &mut rng);
        let wt = t64(&[3, 2, 3, 3], &mut rng);
        let bt = t64(&[3], &mut rng);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let mut g = Graph::<f64>::new();
            let (x, w, b) = (g.input(xt.clone()), g.input(wt.clone()), g.input(bt.clone()));
            let y = g.conv2d(x, w, b, stride, pad).unwrap();
            let oracle = conv_oracle(&xt, &wt, bt.data(), stride, pad);
            assert!(g.value(y).max_abs_diff(&oracle).unwrap() <= 1e-6);
        }
    }
}

#[test]
fn conv2d_f32_matches_oracle() {
    let mut rng = PortableRng::new(11);
    let xt = t64(&[2, 2, 5, 5], &mut rng);
    let wt = t64(&[3, 2, 3, 3], &mut rng);
    let bt = t64(&[3], &mut rng);
    let mut g = Graph::<f32>::new();
    let (x, w, b) = (g.input(xt.cast()), g.input(wt.cast()), g.input(bt.cast()));
    let y = g.conv2d(x, w, b, 1, 1).unwrap();
    let oracle = conv_oracle(&xt, &wt, bt.data(), 1, 1);
    assert!(g.value(y).cast::<f64>().max_abs_diff(&oracle).unwrap() <= 1e-5);
}

#[test]
fn conv2d_shape_errors() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros([1, 2, 4, 4]));
    let w = g.input(Tensor::zeros([1, 3, 3, 3]));
    let b = g.input(Tensor::zeros([1]));
    assert!(g.conv2d(x, w, b, 1, 1).unwrap_err().to_string().contains("channels"));
    let w = g.input(Tensor::zeros([1, 2, 3, 3]));
    assert!(g.conv2d(x, w, b, 2, 0).is_err());
}

#[test]
fn linear_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::new([1, 2], vec![1.0, 2.0]).unwrap());
    let w = g.input(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let b = g.input(Tensor::new([2], vec![3.0, 4.0]).unwrap());
    let y = g.linear(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[4.0, 6.0]);

    let z = g.input(Tensor::zeros([2]));
    let y = g.linear(x, w, z).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0]);

    let bad = g.input(Tensor::zeros([3, 2]));
    assert!(g.linear(x, bad, b).is_err());
}

#[test]
fn linear_matches_loop_oracle() {
    let mut rng = PortableRng::new(5);
    let (xt, wt, bt) = (t64(&[4, 8], &mut rng), t64(&[8, 3], &mut rng), t64(&[3], &mut rng));
    let mut g = Graph::<f64>::new();
    let (x, w, b) = (g.input(xt.clone()), g.input(wt.clone()), g.input(bt.clone()));
    let y = g.linear(x, w, b).unwrap();
    for i in 0..4 {
        for j in 0..3 {
            let mut acc = bt.data()[j];
            for k in 0..8 {
                acc += xt.data()[i * 8 + k] * wt.data()[k * 3 + j];
            }
            assert!((g.value(y).data()[i * 3 + j] - acc).abs() <= 1e-6);
        }
    }
}

#[test]
fn group_norm_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::full([1, 4, 3, 3], 2.5));
    let one = g.input(Tensor::full([4], 1.0));
    let zero = g.input(Tensor::zeros([4]));
    let y = g.group_norm(x, 2, one, zero, 1e-5).unwrap();
    assert!(g.value(y).max_abs() == 0.0);

    let gamma0 = g.input(Tensor::zeros([4]));
    let c = g.input(Tensor::full([4], 0.75));
    let mut rng = PortableRng::new(1);
    let xr = g.input(t64(&[1, 4, 3, 3], &mut rng));
    let y = g.group_norm(xr, 2, gamma0, c, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.75));

    assert!(g.group_norm(xr, 3, one, zero, 1e-5).is_err());
}

#[test]
fn group_norm_statistics_oracle() {
    let mut rng = PortableRng::new(9);
    let xt = t64(&[2, 4, 5, 5], &mut rng).map(|v| 3.0 * v + 1.5);
    let mut g = Graph::<f64>::new();
    let x = g.input(xt);
    let one = g.input(Tensor::full([4], 1.0));
    let zero = g.input(Tensor::zeros([4]));
    let y = g.group_norm(x, 2, one, zero, 1e-5).unwrap();
    for group in g.value(y).data().chunks(2 * 25) {
        let mean = group.iter().sum::<f64>() / group.len() as f64;
        let var = group.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / group.len() as f64;
        assert!(mean.abs() <= 1e-5);
        assert!((var - 1.0).abs() <= 1e-3);
    }
}

#[test]
fn scalar_function_examples() {
    let mut g = Graph::<f64>::new();
    let z = g.input(Tensor::zeros([1, 3]));
    let s = g.silu(z);
    assert_eq!(g.value(s).data(), &[0.0; 3]);
    let row = g.input(Tensor::full([2, 4], 1.7));
    let sm = g.softmax(row, 1).unwrap();
    assert!(g.value(sm).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let a = g.input(Tensor::new([2], vec![0.0, 0.0]).unwrap());
    let b = g.input(Tensor::new([2], vec![2.0, 0.0]).unwrap());
    let m = g.mse_loss(a, b).unwrap();
    assert_eq!(g.value(m).data(), &[2.0]);
    let m = g.mse_loss(a, a).unwrap();
    assert_eq!(g.value(m).data(), &[0.0]);
    let c = g.input(Tensor::zeros([3]));
    assert!(g.mse_loss(a, c).is_err());

    let k = g.kl_normal(z, z).unwrap();
    assert_eq!(g.value(k).data(), &[0.0]);
    let mu = g.input(Tensor::full([1, 3], 1.0));
    let k = g.kl_normal(mu, z).unwrap();
    // ½(1 + e⁰ − 1 − 0) per element
    assert!((g.value(k).data()[0] - 0.5).abs() < 1e-15);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = PortableRng::new(2);
    let mut g = Graph::<f64>::new();
    let x = g.input(t64(&[3, 4, 5], &mut rng));
    for axis in 0..3 {
        let s = g.softmax(x, axis).unwrap();
        let shape = g.shape(s).to_vec();
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let total: f64 = (0..shape[axis]).map(|j| g.value(s).data()[(o * shape[axis] + j) * inner + i]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}

fn attention_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Vec<f64> {
    let (n, l, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let mut out = vec![0.0; n * l * d];
    for b in 0..n {
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| (0..d).map(|c| q.data()[(b * l + i) * d + c] * k.data()[(b * l + j) * d + c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..d {
                out[(b * l + i) * d + c] = (0..l).map(|j| e[j] / z * v.data()[(b * l + j) * d + c]).sum();
            }
        }
    }
    out
}

#[test]
fn attention_examples() {
    let mut rng = PortableRng::new(4);
    let mut g = Graph::<f64>::new();
    let q1 = g.input(t64(&[2, 1, 3], &mut rng));
    let k1 = g.input(t64(&[2, 1, 3], &mut rng));
    let v1t = t64(&[2, 1, 3], &mut rng);
    let v1 = g.input(v1t.clone());
    let o = g.attention_single_head(q1, k1, v1).unwrap();
    assert_eq!(g.value(o), &v1t);

    let q = g.input(t64(&[1, 3, 2], &mut rng));
    let row = [0.3, -0.8];
    let k = g.input(Tensor::from_fn([1, 3, 2], |i| row[i % 2]));
    let vt = t64(&[1, 3, 2], &mut rng);
    let v = g.input(vt.clone());
    let o = g.attention_single_head(q, k, v).unwrap();
    for c in 0..2 {
        let mean = (0..3).map(|j| vt.data()[j * 2 + c]).sum::<f64>() / 3.0;
        for i in 0..3 {
            assert!((g.value(o).data()[i * 2 + c] - mean).abs() < 1e-12);
        }
    }

    let bad = g.input(t64(&[1, 2, 2], &mut rng));
    assert!(g.attention_single_head(q, bad, v).is_err());
}

#[test]
fn attention_matches_loop_oracle() {
    for seed in 0..5 {
        let mut rng = PortableRng::new(100 + seed);
        let (qt, kt, vt) = (t64(&[1, 3, 2], &mut rng), t64(&[1, 3, 2], &mut rng), t64(&[1, 3, 2], &mut rng));
        let mut g = Graph::<f64>::new();
        let (q, k, v) = (g.input(qt.clone()), g.input(kt.clone()), g.input(vt.clone()));
        let o = g.attention_single_head(q, k, v).unwrap();
        let oracle = attention_oracle(&qt, &kt, &vt);
        for (a, b) in g.value(o).data().iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-6);
        }
    }
}

// ---- gradient checks ------------------------------------------------------

const FD_EPS: f64 = 1e-4;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, crate::Error> {
    let r = PortableRng::new(seed ^ 0xABCD).normal_tensor(g.shape(y));
    g.dot_const(y, &r)
}

fn check_seeds(name: &str, build: impl Fn(u64) -> f64) {
    for seed in 0..SEEDS {
        let err = build(seed);
        assert!(err <= TOL, "{name}: seed {seed} relative error {err:e}");
    }
}

#[test]
fn grad_check_linear_layer() {
    check_seeds("linear", |seed| {
        let mut rng = PortableRng::new(seed);
        let inputs = [t64(&[3, 4], &mut rng), t64(&[4, 2], &mut rng), t64(&[2], &mut rng)];
        grad_check(
            |g, v| {
                let y = g.linear(v[0], v[1], v[2])?;
                probe(g, y, seed)
            },
            &inputs,
            FD_EPS,
        )
        .unwrap()
    });
}

#[test]
fn grad_check_conv_silu_mse_chain() {
    check_seeds("conv+silu+mse", |seed| {
        let mut rng = PortableRng::new(seed);
        let inputs = [
            t64(&[2, 2, 5, 5], &mut rng),
            t64(&[3, 2, 3, 3], &mut rng),
            t64(&[3], &mut rng),
            t64(&[2, 3, 3, 3], &mut rng),
        ];
        let err = grad_check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], 2, 1)?;
                let y = g.silu(y);
                g.mse_loss(y, v[3])
            },
            &inputs,
            FD_EPS,
        )
        .unwrap();
        assert!(err <= 1e-5);
        err
    });
}

#[test]
fn grad_check_group_norm() {
    check_seeds("group_norm", |seed| {
        let mut rng = PortableRng::new(seed);
        let inputs = [t64(&[2, 4, 3, 3], &mut rng), t64(&[4], &mut rng), t64(&[4], &mut rng)];
        grad_check(
            |g, v| {
                let y = g.group_norm(v[0], 2, v[1], v[2], 1e-5)?;
                probe(g, y, seed)
            },
            &inputs,
            FD_EPS,
        )
        .unwrap()
    });
}

#[test]
fn grad_check_elementwise_and_shape_ops() {
    check_seeds("elementwise", |seed| {
        let mut rng = PortableRng::new(seed);
        let inputs = [t64(&[2, 2, 2, 2], &mut rng), t64(&[2, 2, 2, 2], &mut rng), t64(&[2, 2], &mut rng)];
        grad_check(
            |g, v| {
                let a = g.tanh(v[0]);
                let b = g.exp(v[1]);
                let c = g.mul(a, b)?;
                let c = g.sub(c, v[0])?;
                let c = g.add_channel(c, v[2])?;
                let c = g.scale(c, 0.7);
                let c = g.clamp(c, -2.5, 2.5);
                let u = g.upsample2x(c)?;
                let cat = g.concat(u, u)?;
                let s = g.slice_channels(cat, 1, 2)?;
                let s = g.add(s, u)?;
                let m = g.mean_spatial(s)?;
                probe(g, m, seed)
            },
            &inputs,
            FD_EPS,
        )
        .unwrap()
    });
}

#[test]
fn grad_check_softmax_and_attention() {
    check_seeds("attention", |seed| {
        let mut rng = PortableRng::new(seed);
        let inputs = [t64(&[2, 3, 4], &mut rng), t64(&[2, 3, 4], &mut rng), t64(&[2, 3, 4], &mut rng)];
        grad_check(
            |g, v| {
                let o = g.attention_single_head(v[0], v[1], v[2])?;
                let o = g.swap_last2(o)?;
                let o = g.reshape(o, &[2, 12])?;
                let o = g.softmax(o, 1)?;
                probe(g, o, seed)
            },
            &inputs,
            FD_EPS,
        )
        .unwrap()
    });
}

#[test]
fn grad_check_losses() {
    check_seeds("losses", |seed| {
        let mut rng = PortableRng::new(seed);
        let inputs = [t64(&[3, 4], &mut rng), t64(&[3, 4], &mut rng), t64(&[4, 3], &mut rng)];
        grad_check(
            |g, v| {
                let kl = g.kl_normal(v[0], v[1])?;
                let rows = g.gather(v[2], &[2, 0, 2])?;
                let ce = g.cross_entropy(rows, &[1, 0, 2])?;
                let total = g.add(kl, ce)?;
                let s = g.sum(v[0]);
                let s = g.scale(s, 0.01);
                g.add(total, s)
            },
            &inputs,
            FD_EPS,
        )
        .unwrap()
    });
}

#[test]
fn grad_check_constant_output_is_zero() {
    let inputs = [Tensor::<f64>::full([2, 2], 1.0)];
    let err = grad_check(
        |g, v| {
            let z = g.scale(v[0], 0.0);
            Ok(g.sum(z))
        },
        &inputs,
        FD_EPS,
    )
    .unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn grad_check_rejects_non_scalar() {
    let inputs = [Tensor::<f64>::full([2, 2], 1.0)];
    assert!(grad_check(|g, v| Ok(g.silu(v[0])), &inputs, FD_EPS).is_err());
}

#[test]
fn ops_are_deterministic() {
    let run = || {
        let mut rng = PortableRng::new(77);
        let mut g = Graph::<f32>::new();
        let x = g.variable(rng.normal_tensor(&[2, 3, 6, 6]));
        let w = g.variable(rng.normal_tensor(&[4, 3, 3, 3]));
        let b = g.variable(rng.normal_tensor(&[4]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        let y = g.silu(y);
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        (g.value(y).clone(), grads.get(w).unwrap())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(ga, gb);
}

#[test]
fn frozen_parameters_get_no_gradient() {
    let mut store = ParamStore::new();
    store.insert("a", Tensor::full([2], 1.5)).unwrap();
    store.insert("b", Tensor::full([2], -0.5)).unwrap();
    store.set_frozen("b", true);
    let mut g = Graph::<f32>::new();
    let a = g.param(&store, "a").unwrap();
    let b = g.param(&store, "b").unwrap();
    let c = g.mul(a, b).unwrap();
    let loss = g.sum(c);
    let grads = g.backward(loss).unwrap();
    store.accumulate_grads(&g, &grads);
    assert!(store.get("a").unwrap().grad.is_some());
    assert!(store.get("b").unwrap().grad.is_none());
    assert!(grads.get(b).is_none());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn conv_agrees_with_oracle(seed in any::<u64>(), c in 1usize..3, k in 1usize..4, h in 3usize..7, stride in 1usize..3) {
            let mut rng = PortableRng::new(seed);
            let xt = t64(&[1, c, h, h], &mut rng);
            let wt = t64(&[k, c, 3, 3], &mut rng);
            let bt = t64(&[k], &mut rng);
            let mut g = Graph::<f64>::new();
            let (x, w, b) = (g.input(xt.clone()), g.input(wt.clone()), g.input(bt.clone()));
            if let Ok(y) = g.conv2d(x, w, b, stride, 1) {
                let oracle = conv_oracle(&xt, &wt, bt.data(), stride, 1);
                prop_assert!(g.value(y).max_abs_diff(&oracle).unwrap() <= 1e-6);
            } else {
                prop_assert!((h + 2 - 3) % stride != 0);
            }
        }

        #[test]
        fn linear_agrees_with_oracle(seed in any::<u64>(), n in 1usize..5, d in 1usize..6, e in 1usize..5) {
            let mut rng = PortableRng::new(seed);
            let (xt, wt, bt) = (t64(&[n, d], &mut rng), t64(&[d, e], &mut rng), t64(&[e], &mut rng));
            let mut g = Graph::<f64>::new();
            let (x, w, b) = (g.input(xt.clone()), g.input(wt.clone()), g.input(bt.clone()));
            let y = g.linear(x, w, b).unwrap();
            for i in 0..n {
                for j in 0..e {
                    let acc: f64 = bt.data()[j] + (0..d).map(|k| xt.data()[i * d + k] * wt.data()[k * e + j]).sum::<f64>();
                    prop_assert!((g.value(y).data()[i * e + j] - acc).abs() <= 1e-6);
                }
            }
        }

        #[test]
        fn attention_agrees_with_oracle(seed in any::<u64>(), l in 1usize..5, d in 1usize..5) {
            let mut rng = PortableRng::new(seed);
            let (qt, kt, vt) = (t64(&[2, l, d], &mut rng), t64(&[2, l, d], &mut rng), t64(&[2, l, d], &mut rng));
            let mut g = Graph::<f64>::new();
            let (q, k, v) = (g.input(qt.clone()), g.input(kt.clone()), g.input(vt.clone()));
            let o = g.attention_single_head(q, k, v).unwrap();
            for (a, b) in g.value(o).data().iter().zip(attention_oracle(&qt, &kt, &vt)) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}
