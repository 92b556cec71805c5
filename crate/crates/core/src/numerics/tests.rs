use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_gradients, Tolerance};
use super::*;

fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = a.dims2();
    let (_, n) = b.dims2();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.get2(i, p) * b.get2(p, j);
            }
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

/// erf by its Maclaurin series; converges quickly for |x| ≤ 3.
fn erf_series(x: f64) -> f64 {
    let mut sum = 0.0;
    let mut term = x;
    let mut n = 0.0;
    while term.abs() > 1e-18 || n < 5.0 {
        sum += term / (2.0 * n + 1.0);
        n += 1.0;
        term *= -x * x / n;
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

#[test]
fn matmul_identity_and_orthogonal() {
    let mut g = Graph::new();
    let i2 = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    let m = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let out = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]));
    let b = g.constant(Tensor::from_rows(&[vec![0.0], vec![1.0]]));
    let out = g.matmul(a, b).unwrap();
    assert_eq!(g.value(out).data(), &[0.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = g.matmul(va, vb).unwrap();
    assert!(g.value(out).max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap());
    let y = g.softmax(x, 0).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let x = g.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
    let y = g.softmax(x, 0).unwrap();
    assert!((g.value(y).data()[0] - 1.0).abs() < 1e-12);
    assert!(g.value(y).data()[1].abs() < 1e-12);

    let x = g.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let y = g.softmax(x, 0).unwrap();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, &v) in g.value(y).data().iter().enumerate() {
        assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-15);
    }
}

#[test]
fn softmax_rows_sum_to_one_on_any_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = Tensor::from_fn(&[3, 4, 5], |_| rng.random_range(-30.0..30.0));
    for axis in 0..3 {
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let y = g.softmax(x, axis).unwrap();
        let shape = [3, 4, 5];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..shape[axis])
                    .map(|j| g.value(y).data()[(o * shape[axis] + j) * inner + i])
                    .sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }
    let mut g = Graph::new();
    let x = g.constant(t);
    assert!(g.softmax(x, 3).is_err());
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gain = g.constant(Tensor::ones(&[4]));
    let bias = g.constant(Tensor::zeros(&[4]));
    let x = g.constant(Tensor::from_rows(&[vec![2.0; 4]]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));

    let gain = g.constant(Tensor::ones(&[2]));
    let bias = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(Tensor::from_rows(&[vec![1.0, -1.0]]));
    let y = g.layer_norm(x, gain, bias, 1e-15).unwrap();
    assert!((g.value(y).data()[0] - 1.0).abs() < 1e-12);
    assert!((g.value(y).data()[1] + 1.0).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let row = random(&mut rng, &[1, 16]);
    let gain = g.constant(Tensor::ones(&[16]));
    let bias = g.constant(Tensor::zeros(&[16]));
    let x = g.constant(row);
    let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
    let d = g.value(y).data();
    let mean = d.iter().sum::<f64>() / 16.0;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
    assert!(mean.abs() < 1e-6);
    assert!((var - 1.0).abs() < 1e-5);
}

#[test]
fn gelu_examples() {
    assert_eq!(gelu(0.0, GeluKind::Erf), 0.0);
    assert!((gelu(10.0, GeluKind::Erf) - 10.0).abs() < 1e-6);
    let oracle = 0.5 * (1.0 + erf_series(1.0 / std::f64::consts::SQRT_2));
    assert!((gelu(1.0, GeluKind::Erf) - oracle).abs() < 1e-15);
    for x in [0.1, 0.5, 1.0, 2.0, 4.0] {
        assert!(gelu(x, GeluKind::Erf) <= x);
    }
    assert!((gelu(1.0, GeluKind::Tanh) - oracle).abs() < 1e-3);
}

#[test]
fn backward_sum_gives_ones() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).data().iter().all(|&v| v == 1.0));
}

#[test]
fn backward_scalar_square_closed_form() {
    let (w0, x0, y0) = (0.7, -1.3, 0.4);
    let mut g = Graph::new();
    let w = g.leaf(Tensor::from_rows(&[vec![w0]]));
    let x = g.constant(Tensor::from_rows(&[vec![x0]]));
    let y = g.constant(Tensor::from_rows(&[vec![y0]]));
    let wx = g.matmul(w, x).unwrap();
    let r = g.sub(wx, y).unwrap();
    let sq = g.mul(r, r).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    let expected = 2.0 * (w0 * x0 - y0) * x0;
    assert!((grads.get(w).item() - expected).abs() < 1e-15);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2]));
    assert!(matches!(
        g.backward(x),
        Err(NumericsError::NonScalarLoss(_))
    ));
}

#[test]
fn detached_leaf_gets_zero_grad() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::ones(&[1, 2]));
    let c = g.constant(Tensor::ones(&[1, 2]));
    let unused = g.leaf(Tensor::ones(&[3]));
    let p = g.mul(x, c).unwrap();
    let s = g.sum(p).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(c).data(), &[0.0, 0.0]);
    assert_eq!(grads.get(unused).data(), &[0.0; 3]);
}

#[test]
fn gradients_accumulate_across_paths() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_rows(&[vec![3.0]]));
    let a = g.add(x, x).unwrap();
    let b = g.mul(a, x).unwrap(); // 2x²
    let s = g.sum(b).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).item(), 12.0);
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![f64::MAX]]));
    assert!(matches!(
        g.scale(x, 10.0),
        Err(NumericsError::NonFinite { .. })
    ));
}

#[test]
fn dropout_eval_identity_and_train_scaling() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[4, 8]));
    assert_eq!(g.dropout(x, 0.5).unwrap(), x);

    let mut g = Graph::training(9);
    let x = g.leaf(Tensor::ones(&[100, 100]));
    let y = g.dropout(x, 0.25).unwrap();
    let data = g.value(y).data();
    assert!(data
        .iter()
        .all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15));
    let kept = data.iter().filter(|&&v| v != 0.0).count() as f64 / 1e4;
    assert!((kept - 0.75).abs() < 0.02);
    let mean = data.iter().sum::<f64>() / 1e4;
    assert!((mean - 1.0).abs() < 0.03);
}

#[test]
fn cross_entropy_uniform_is_ln_c() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(&[3, 7]));
    let l = g.cross_entropy(z, &[0, 3, 6]).unwrap();
    assert!((g.value(l).item() - 7f64.ln()).abs() < 1e-14);
}

#[test]
fn bce_at_zero_logit_is_ln2() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(&[4, 1]));
    let l = g.bce_with_logits(z, &[0.0, 1.0, 1.0, 0.0]).unwrap();
    assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn signed_log_is_odd() {
    for v in [0.3, 5.0, 1e4] {
        assert_eq!(signed_log(-v, 1e-6), -signed_log(v, 1e-6));
    }
    assert_eq!(signed_log(0.0, 1e-6), 0.0);
}

#[test]
fn sparse_attention_single_token_returns_value_row() {
    let mut g = Graph::new();
    let q = g.constant(Tensor::from_rows(&[vec![0.3, -0.2, 0.9, 1.0]]));
    let k = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]));
    let v = g.constant(Tensor::from_rows(&[vec![5.0, 6.0, 7.0, 8.0]]));
    let keys = Arc::new(KeySets::from_lists(&[vec![0]]));
    let out = g.sparse_attention(q, k, v, 2, keys).unwrap();
    assert_eq!(g.value(out).data(), &[5.0, 6.0, 7.0, 8.0]);
}

// --- randomized finite-difference checks ---------------------------------

fn run_checks(name: &str, instances: usize, mut build: impl FnMut(&mut ChaCha8Rng) -> bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    for i in 0..instances {
        assert!(
            build(&mut rng),
            "{name}: instance {i} failed gradient check"
        );
    }
}

fn small_shape(rng: &mut impl Rng) -> [usize; 2] {
    [rng.random_range(1..=5), rng.random_range(1..=5)]
}

fn passes<F>(inputs: &[Tensor], f: F) -> bool
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NumericsError>,
{
    let report = check_gradients(inputs, f, 1e-5, Tolerance::default(), Some(5)).unwrap();
    if !report.passed() {
        eprintln!("{:?}", &report.failures[..report.failures.len().min(3)]);
    }
    report.passed()
}

#[test]
fn gradcheck_elementwise_ops() {
    run_checks("elementwise", 20, |rng| {
        let s = small_shape(rng);
        let a = random(rng, &s);
        let b = random(rng, &s);
        let w = random(rng, &s);
        passes(&[a, b], move |g, v| {
            let wv = g.constant(w.clone());
            let sum = g.add(v[0], v[1])?;
            let prod = g.mul(sum, v[1])?;
            let diff = g.sub(prod, v[0])?;
            let sg = g.sigmoid(diff)?;
            let th = g.tanh(sg)?;
            let sn = g.sin(th)?;
            let ge = g.gelu(sn)?;
            let sl = g.signed_log(ge, 1e-6)?;
            let sc = g.scale(sl, 1.7)?;
            let weighted = g.mul(sc, wv)?;
            g.sum(weighted)
        })
    });
}

#[test]
fn gradcheck_matmul_bias_layernorm() {
    run_checks("matmul", 20, |rng| {
        let (m, k, n) = (
            rng.random_range(1..=5),
            rng.random_range(1..=5),
            rng.random_range(2..=6),
        );
        let a = random(rng, &[m, k]);
        let b = random(rng, &[k, n]);
        let bias = random(rng, &[n]);
        let gain = random(rng, &[n]);
        let beta = random(rng, &[n]);
        let w = random(rng, &[m, n]);
        passes(&[a, b, bias, gain, beta], move |g, v| {
            let wv = g.constant(w.clone());
            let y = g.matmul(v[0], v[1])?;
            let y = g.add_bias(y, v[2])?;
            let y = g.layer_norm(y, v[3], v[4], 1e-5)?;
            let y = g.mul(y, wv)?;
            g.mean(y)
        })
    });
}

#[test]
fn gradcheck_shape_ops() {
    run_checks("shape", 20, |rng| {
        let m = rng.random_range(2..=5);
        let a = random(rng, &[m, 3]);
        let b = random(rng, &[m, 2]);
        let col = random(rng, &[m, 1]);
        let s = random(rng, &[1]);
        let rep = random(rng, &[1, 5]);
        let table = random(rng, &[6, 5]);
        let flags: Vec<bool> = (0..m).map(|_| rng.random_bool(0.5)).collect();
        let factors: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..2.0)).collect();
        let rows: Vec<usize> = (0..4).map(|_| rng.random_range(0..m)).collect();
        let ids: Vec<usize> = (0..m).map(|_| rng.random_range(0..6)).collect();
        let w = random(rng, &[4, 5]);
        passes(&[a, b, col, s, rep, table], move |g, v| {
            let cat = g.concat_cols(&[v[0], v[1]])?;
            let cat = g.mul_col(cat, v[2])?;
            let cat = g.mul_scalar(cat, v[3])?;
            let emb = g.embedding(v[5], &ids)?;
            let cat = g.add(cat, emb)?;
            let cat = g.replace_rows(cat, v[4], &flags)?;
            let cat = g.scale_rows(cat, &factors)?;
            let t = g.transpose(cat)?;
            let t = g.transpose(t)?;
            let sel = g.select_rows(t, &rows)?;
            let left = g.slice_cols(sel, 1, 4)?;
            let right = g.slice_cols(sel, 0, 2)?;
            let both = g.concat_cols(&[left, right])?;
            let stacked = g.concat_rows(&[both, sel])?;
            let top = g.select_rows(stacked, &[0, 1, 2, 3])?;
            let wv = g.constant(w.clone());
            let prod = g.mul(top, wv)?;
            g.sum(prod)
        })
    });
}

#[test]
fn gradcheck_softmax_any_axis() {
    run_checks("softmax", 20, |rng| {
        let t = random(rng, &[3, 4]);
        let w = random(rng, &[3, 4]);
        let axis = rng.random_range(0..2);
        passes(&[t], move |g, v| {
            let y = g.softmax(v[0], axis)?;
            let wv = g.constant(w.clone());
            let y = g.mul(y, wv)?;
            g.sum(y)
        })
    });
}

#[test]
fn gradcheck_losses() {
    run_checks("losses", 20, |rng| {
        let n = rng.random_range(1..=5);
        let c = rng.random_range(2..=6);
        let logits = random(rng, &[n, c]);
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let bin = random(rng, &[n, 1]);
        let ys: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
            .collect();
        let pred = random(rng, &[n, 2]);
        let target = random(rng, &[n, 2]);
        passes(&[logits, bin, pred], move |g, v| {
            let ce = g.cross_entropy(v[0], &targets)?;
            let bce = g.bce_with_logits(v[1], &ys)?;
            let mse = g.mse(v[2], &target)?;
            let s = g.add(ce, bce)?;
            g.add(s, mse)
        })
    });
}

#[test]
fn gradcheck_dropout_train_mode() {
    run_checks("dropout", 10, |rng| {
        let x = random(rng, &[4, 6]);
        let w = random(rng, &[4, 6]);
        passes(&[x], move |g, v| {
            let y = g.dropout(v[0], 0.3)?;
            let wv = g.constant(w.clone());
            let y = g.mul(y, wv)?;
            g.sum(y)
        })
    });
}

#[test]
fn gradcheck_sparse_attention() {
    run_checks("attention", 20, |rng| {
        let t = rng.random_range(1..=7);
        let heads = rng.random_range(1..=2);
        let d = heads * rng.random_range(1..=3);
        let q = random(rng, &[t, d]);
        let k = random(rng, &[t, d]);
        let v = random(rng, &[t, d]);
        let w = random(rng, &[t, d]);
        let lists: Vec<Vec<usize>> = (0..t)
            .map(|_| (0..t).filter(|_| rng.random_bool(0.6)).collect())
            .collect();
        let keys = Arc::new(KeySets::from_lists(&lists));
        passes(&[q, k, v], move |g, vars| {
            let out = g.sparse_attention(vars[0], vars[1], vars[2], heads, Arc::clone(&keys))?;
            let wv = g.constant(w.clone());
            let out = g.mul(out, wv)?;
            g.sum(out)
        })
    });
}

#[test]
fn adamw_decreases_convex_quadratic() {
    // f(θ) = Σ cᵢ (θᵢ − tᵢ)², with zero weight decay.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut store = ParamStore::new();
    let id = store.add(
        "theta",
        &[8],
        Init::TruncatedNormal(1.0),
        ParamGroup::Backbone,
        &mut rng,
    );
    let target: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
    let curv: Vec<f64> = (0..8).map(|_| rng.random_range(0.5..3.0)).collect();
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut state = OptimizerState::new(&store, cfg);
    let loss_of = |s: &ParamStore| -> f64 {
        s.get(id)
            .data()
            .iter()
            .zip(&target)
            .zip(&curv)
            .map(|((x, t), c)| c * (x - t) * (x - t))
            .sum()
    };
    let mut losses = vec![loss_of(&store)];
    for _ in 0..200 {
        let mut grads = GradBuffer::zeros_like(&store);
        let g: Vec<f64> = store
            .get(id)
            .data()
            .iter()
            .zip(&target)
            .zip(&curv)
            .map(|((x, t), c)| 2.0 * c * (x - t))
            .collect();
        grads.add(id, &g);
        adamw_step(&mut store, &grads, &mut state, 1e-3).unwrap();
        losses.push(loss_of(&store));
    }
    for w in losses[5..].windows(2) {
        assert!(w[1] < w[0], "loss increased: {} -> {}", w[0], w[1]);
    }
}
