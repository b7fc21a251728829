use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check_gradients;
use super::*;

fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(&[rows, cols], data).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn matmul_hand_computed() {
    let mut tape = Tape::new();
    let a = tape.constant(t2(2, 2, &[1., 2., 3., 4.]));
    let b = tape.constant(t2(2, 2, &[5., 6., 7., 8.]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[19., 22., 43., 50.]);
}

#[test]
fn matmul_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let a = random(&[3, 3], &mut rng);
    let i = tape.constant(Tensor::from_fn(&[3, 3], |k| if k / 3 == k % 3 { 1.0 } else { 0.0 }));
    let av = tape.constant(a.clone());
    let c = tape.matmul(i, av).unwrap();
    assert_eq!(tape.value(c), &a);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 2]));
    let err = tape.matmul(a, b).unwrap_err();
    assert_eq!(err, KernelError::Shape { op: "matmul", lhs: vec![2, 3], rhs: vec![4, 2] });
    assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[4, 2]"));
}

#[test]
fn batched_matmul_matches_per_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[2, 4, 5], &mut rng);
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(av, bv).unwrap();
    for blk in 0..2 {
        for i in 0..3 {
            for j in 0..5 {
                let expect: f64 = (0..4).map(|p| a.data()[blk * 12 + i * 4 + p] * b.data()[blk * 20 + p * 5 + j]).sum();
                let got = tape.value(c).data()[blk * 15 + i * 5 + j];
                assert!((expect - got).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t2(1, 2, &[0., 0.]));
    let y = tape.softmax(x);
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

    let x = tape.constant(t2(1, 2, &[1000., 0.]));
    let y = tape.softmax(x);
    let d = tape.value(y).data();
    assert!((d[0] - 1.0).abs() < 1e-6 && d[1].abs() < 1e-6);

    let base = [0.3, -1.2, 2.5, 0.0];
    let shifted: Vec<f64> = base.iter().map(|v| v + 37.0).collect();
    let a = tape.constant(t2(1, 4, &base));
    let b = tape.constant(t2(1, 4, &shifted));
    let (ya, yb) = (tape.softmax(a), tape.softmax(b));
    assert!(tape.value(ya).max_abs_diff(tape.value(yb)) < 1e-6);
    let sum: f64 = tape.value(ya).data().iter().sum();
    assert!((sum - 1.0).abs() < 1e-6);
}

#[test]
fn softmax_and_cross_entropy_stable_at_large_magnitude() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits = Tensor::from_fn(&[4, 6], |_| rng.random_range(-1e4..1e4));
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(logits);
    let s = tape.softmax(l);
    assert!(tape.value(s).is_finite());
    let ce = tape.cross_entropy_masked(l, &[0, 1, 2, 3], &[1., 1., 1., 1.]).unwrap();
    assert!(tape.value(ce).is_finite());
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::full(&[2], 1.0));
    let b = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(t2(1, 2, &[1., 3.]));
    let y = tape.layer_norm(x, g, b).unwrap();
    let d = tape.value(y).data();
    assert!((d[0] + 1.0).abs() < 1e-5 && (d[1] - 1.0).abs() < 1e-5);

    let g3 = tape.constant(Tensor::full(&[3], 2.0));
    let b3 = tape.constant(Tensor::from_f64(&[3], &[0.5, 0.5, 0.5]).unwrap());
    let z3 = tape.constant(Tensor::zeros(&[3]));
    let x = tape.constant(t2(1, 3, &[4., 4., 4.]));
    let y = tape.layer_norm(x, g3, z3).unwrap();
    assert!(tape.value(y).data().iter().all(|v| *v == 0.0));

    let x = tape.constant(t2(2, 3, &[1., 2., 7., -3., 0., 5.]));
    let y = tape.layer_norm(x, g3, b3).unwrap();
    for row in tape.value(y).data().chunks(3) {
        let mean: f64 = row.iter().sum::<f64>() / 3.0;
        assert!((mean - 0.5).abs() < 1e-5);
    }
}

/// Unfold into `[patches, p·p·C]` then multiply by the kernel.
fn unfold_matmul_oracle(img: &Tensor<f64>, ker: &Tensor<f64>, p: usize) -> Vec<f64> {
    let [b, h, w, c] = [img.shape()[0], img.shape()[1], img.shape()[2], img.shape()[3]];
    let d = ker.shape()[1];
    let mut unfolded = Vec::new();
    for bi in 0..b {
        for py in 0..h / p {
            for px in 0..w / p {
                for dy in 0..p {
                    for dx in 0..p {
                        for ch in 0..c {
                            let y = py * p + dy;
                            let x = px * p + dx;
                            unfolded.push(img.data()[((bi * h + y) * w + x) * c + ch]);
                        }
                    }
                }
            }
        }
    }
    let rows = unfolded.len() / (p * p * c);
    let mut out = vec![0.0; rows * d];
    for r in 0..rows {
        for o in 0..d {
            out[r * d + o] = (0..p * p * c).map(|q| unfolded[r * p * p * c + q] * ker.data()[q * d + o]).sum();
        }
    }
    out
}

#[test]
fn conv_patchify_matches_unfold_oracle() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::from_fn(&[2, 8, 8, 3], |_| rng.random_range(0.0..1.0));
        let ker = random(&[4 * 4 * 3, 5], &mut rng);
        let mut tape = Tape::new();
        let (iv, kv) = (tape.constant(img.clone()), tape.constant(ker.clone()));
        let out = tape.conv_patchify(iv, kv, 4).unwrap();
        assert_eq!(tape.shape(out), &[2 * 4, 5]);
        let oracle = unfold_matmul_oracle(&img, &ker, 4);
        let diff = tape.value(out).data().iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-5, "seed {seed}: {diff}");
    }
}

#[test]
fn conv_patchify_counts_and_divisibility() {
    let mut tape = Tape::<f64>::new();
    let img = tape.constant(Tensor::zeros(&[1, 8, 8, 3]));
    let ker = tape.constant(Tensor::zeros(&[48, 6]));
    let out = tape.conv_patchify(img, ker, 4).unwrap();
    assert_eq!(tape.shape(out)[0], 4);
    let bad = tape.constant(Tensor::zeros(&[1, 7, 8, 3]));
    assert!(matches!(tape.conv_patchify(bad, ker, 4), Err(KernelError::Shape { .. })));
}

#[test]
fn attention_single_position_returns_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::new();
    let q = tape.constant(random(&[1, 4], &mut rng));
    let k = tape.constant(random(&[1, 4], &mut rng));
    let v_val = random(&[1, 4], &mut rng);
    let v = tape.constant(v_val.clone());
    let out = tape.attention(q, k, v, &Tensor::zeros(&[1, 1, 1]), 2).unwrap();
    assert!(tape.value(out).max_abs_diff(&v_val) < 1e-12);
}

#[test]
fn attention_uniform_scores_average_unmasked_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::full(&[2, 4], 0.3));
    let k = tape.constant(Tensor::full(&[3, 4], -0.7));
    let v_val = random(&[3, 4], &mut rng);
    let v = tape.constant(v_val.clone());
    let mut mask = Tensor::zeros(&[1, 2, 3]);
    mask.data_mut()[2] = f64::NEG_INFINITY;
    mask.data_mut()[5] = f64::NEG_INFINITY;
    let out = tape.attention(q, k, v, &mask, 2).unwrap();
    for i in 0..2 {
        for j in 0..4 {
            let mean = (v_val.data()[j] + v_val.data()[4 + j]) / 2.0;
            assert!((tape.value(out).data()[i * 4 + j] - mean).abs() < 1e-6);
        }
    }
}

#[test]
fn causal_attention_ignores_future_tokens_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let t = 5;
    let base = random(&[t, 8], &mut rng);
    let run = |x: &Tensor<f64>| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = tape.attention(xv, xv, xv, &causal_mask(1, t), 2).unwrap();
        tape.value(out).clone()
    };
    let reference = run(&base);
    for tok in 1..t {
        let mut perturbed = base.clone();
        for j in 0..8 {
            perturbed.data_mut()[tok * 8 + j] += 0.37;
        }
        let out = run(&perturbed);
        assert_eq!(&out.data()[..tok * 8], &reference.data()[..tok * 8]);
    }
}

#[test]
fn cross_entropy_examples() {
    let v = 7;
    let mut tape = Tape::new();
    let uniform = tape.constant(Tensor::zeros(&[3, v]));
    let l = tape.cross_entropy_masked(uniform, &[0, 3, 6], &[1., 1., 1.]).unwrap();
    assert!((tape.value(l).item() - (v as f64).ln()).abs() < 1e-6);

    let confident = tape.constant(Tensor::from_fn(&[2, v], |i| if i % v == 2 { 1e3 } else { 0.0 }));
    let l = tape.cross_entropy_masked(confident, &[2, 2], &[1., 1.]).unwrap();
    assert!(tape.value(l).item() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&[3, v], &mut rng);
    let mut b = a.clone();
    for j in 0..v {
        b.data_mut()[v + j] += 5.0 * j as f64;
    }
    let (av, bv) = (tape.constant(a), tape.constant(b));
    let la = tape.cross_entropy_masked(av, &[1, 4, 5], &[1., 0., 1.]).unwrap();
    let lb = tape.cross_entropy_masked(bv, &[1, 4, 5], &[1., 0., 1.]).unwrap();
    assert_eq!(tape.value(la).item(), tape.value(lb).item());

    let err = tape.cross_entropy_masked(av, &[1, 4, 5], &[0., 0., 0.]);
    assert_eq!(err.unwrap_err(), KernelError::EmptyMask);
}

#[test]
fn backward_scalar_product_and_accumulation() {
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", Tensor::scalar(3.0));
    let y = store.add("y", Tensor::scalar(-2.0));
    for round in 1..=2 {
        let mut tape = Tape::new();
        let (xv, yv) = (tape.param(&store, x), tape.param(&store, y));
        let p = tape.mul(xv, yv).unwrap();
        tape.backward(p, &mut store).unwrap();
        assert_eq!(store.grad(x).item(), -2.0 * round as f64);
        assert_eq!(store.grad(y).item(), 3.0 * round as f64);
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let mut store = ParamStore::<f64>::new();
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::zeros(&[2]));
    assert_eq!(tape.backward(v, &mut store).err(), Some(KernelError::NonScalar(vec![2])));
}

#[test]
fn masked_positions_get_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::<f64>::new();
    let id = store.add("logits", random(&[3, 5], &mut rng));
    let mut tape = Tape::new();
    let l = tape.param(&store, id);
    let loss = tape.cross_entropy_masked(l, &[0, 1, 2], &[1., 0., 1.]).unwrap();
    tape.backward(loss, &mut store).unwrap();
    assert!(store.grad(id).data()[5..10].iter().all(|g| *g == 0.0));
}

/// Registers each input as a parameter and reduces the op output with a
/// fixed random projection.
fn check_op(seed: u64, inputs: Vec<Tensor<f64>>, op: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919));
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs.into_iter().enumerate().map(|(i, t)| store.add(format!("in{i}"), t)).collect();
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<_> = ids.iter().map(|&id| tape.param(&store, id)).collect();
        let out = op(&mut tape, &vars);
        random(tape.shape(out), &mut rng)
    };
    let report = check_gradients(&mut store, 1e-5, |tape, s| {
        let vars: Vec<_> = ids.iter().map(|&id| tape.param(s, id)).collect();
        let out = op(tape, &vars);
        let r = tape.constant(probe.clone());
        let prod = tape.mul(out, r)?;
        Ok(tape.sum_all(prod))
    })
    .unwrap();
    report.max_rel_err
}

fn assert_gradcheck(name: &str, shapes: &[&[usize]], op: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = shapes.iter().map(|s| random(s, &mut rng)).collect();
        let err = check_op(seed, inputs, &op);
        assert!(err < 1e-4, "{name} seed {seed}: rel err {err}");
    }
}

#[test]
fn gradcheck_matmul() {
    assert_gradcheck("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]).unwrap());
    assert_gradcheck("batched matmul", &[&[2, 3, 4], &[2, 4, 2]], |t, v| t.matmul(v[0], v[1]).unwrap());
    assert_gradcheck("broadcast matmul", &[&[2, 3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]).unwrap());
}

#[test]
fn gradcheck_elementwise() {
    assert_gradcheck("add", &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1]).unwrap());
    assert_gradcheck("add_row", &[&[3, 4], &[4]], |t, v| t.add_row(v[0], v[1]).unwrap());
    assert_gradcheck("mul", &[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1]).unwrap());
    assert_gradcheck("scale", &[&[3, 4]], |t, v| t.scale(v[0], -1.7));
    assert_gradcheck("relu", &[&[3, 4]], |t, v| t.relu(v[0]));
    assert_gradcheck("transpose", &[&[3, 4]], |t, v| t.transpose(v[0]).unwrap());
}

#[test]
fn gradcheck_softmax_layer_norm() {
    assert_gradcheck("softmax", &[&[3, 5]], |t, v| t.softmax(v[0]));
    assert_gradcheck("layer_norm", &[&[3, 6], &[6], &[6]], |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap());
}

#[test]
fn gradcheck_gather_concat() {
    assert_gradcheck("gather", &[&[5, 3]], |t, v| t.gather(v[0], &[4, 0, 4, 2]).unwrap());
    assert_gradcheck("concat_batched", &[&[4, 3], &[6, 3]], |t, v| t.concat_batched(v[0], v[1], 2).unwrap());
}

#[test]
fn gradcheck_conv_patchify() {
    assert_gradcheck("conv_patchify", &[&[2, 4, 4, 3], &[12, 5]], |t, v| t.conv_patchify(v[0], v[1], 2).unwrap());
}

#[test]
fn gradcheck_attention() {
    let mut mask = Tensor::zeros(&[2, 3, 4]);
    mask.data_mut()[3] = f64::NEG_INFINITY;
    mask.data_mut()[20] = f64::NEG_INFINITY;
    assert_gradcheck("attention", &[&[6, 4], &[8, 4], &[8, 4]], |t, v| {
        t.attention(v[0], v[1], v[2], &mask, 2).unwrap()
    });
    let causal = causal_mask(1, 4);
    assert_gradcheck("causal attention", &[&[4, 6]], |t, v| t.attention(v[0], v[0], v[0], &causal, 3).unwrap());
}

#[test]
fn gradcheck_cross_entropy() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let id = store.add("logits", random(&[4, 6], &mut rng));
        let report = check_gradients(&mut store, 1e-5, |tape, s| {
            let l = tape.param(s, id);
            tape.cross_entropy_masked(l, &[0, 5, 2, 3], &[1., 1., 0., 1.])
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{}", report.max_rel_err);
    }
}

#[test]
fn op_suite_passes() {
    for seed in 0..2 {
        for c in super::gradcheck::op_suite(seed).unwrap() {
            assert!(c.max_rel_err < 1e-4, "{c:?}");
        }
    }
}

#[test]
fn gradcheck_reprobes_across_relu_kink() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::from_f64(&[2], &[3e-6, 0.5]).unwrap());
    let report = check_gradients(&mut store, 1e-5, |tape, s| {
        let w = tape.param(s, id);
        let r = tape.relu(w);
        Ok(tape.sum_all(r))
    })
    .unwrap();
    assert_eq!(report.kink_retries, 1);
    assert!(report.max_rel_err < 1e-9, "{}", report.max_rel_err);
}

#[test]
fn gradcheck_still_flags_wrong_gradient_near_kink() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::from_f64(&[1], &[3e-6]).unwrap());
    // The constant copy of `w` hides half the true slope from backward.
    let report = check_gradients(&mut store, 1e-5, |tape, s| {
        let w = tape.param(s, id);
        let r = tape.relu(w);
        let v = tape.value(w).clone();
        let shifted = tape.constant(v);
        let sum = tape.add(r, shifted)?;
        Ok(tape.sum_all(sum))
    })
    .unwrap();
    assert_eq!(report.kink_retries, 1);
    assert!(report.max_rel_err > 0.4, "{}", report.max_rel_err);
}
