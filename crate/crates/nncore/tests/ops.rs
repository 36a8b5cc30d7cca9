use nncore::gradcheck::{check_primitives, compare_gradients, analytic_gradients, grad_check};
use nncore::layers::{Embedding, LayerNorm, Linear};
use nncore::optim::{Adam, WeightDecay};
use nncore::{Graph, NnError, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn identity_matmul_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&[3, 3], &mut rng);
    let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let mut g = Graph::new();
    let (i, xv) = (g.constant(eye), g.constant(x.clone()));
    let y = g.matmul(i, xv).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn transpose_of_product_matches_reversed_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (a, b) = (rand_tensor(&[3, 4], &mut rng), rand_tensor(&[4, 2], &mut rng));
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let ab = g.matmul(av, bv).unwrap();
    let abt = g.transpose(ab).unwrap();
    let (at, bt) = (g.transpose(av).unwrap(), g.transpose(bv).unwrap());
    let btat = g.matmul(bt, at).unwrap();
    // direct recomputation: (ab)^T[j][i] = sum_p a[i][p] b[p][j]
    let mut want = vec![0.0; 6];
    for i in 0..3 {
        for j in 0..2 {
            want[j * 3 + i] = (0..4).map(|p| a.data()[i * 4 + p] * b.data()[p * 2 + j]).sum();
        }
    }
    assert!(close(g.value(abt).data(), &want, 1e-12));
    assert!(close(g.value(btat).data(), &want, 1e-12));
}

#[test]
fn grad_of_summed_product_is_ones_times_b_transposed() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let a = store.add("a", rand_tensor(&[3, 4], &mut rng));
    let b = rand_tensor(&[4, 2], &mut rng);
    let mut g = Graph::new();
    let av = g.param(&store, a);
    let bv = g.constant(b.clone());
    let y = g.matmul(av, bv).unwrap();
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    let row_sums: Vec<f64> = (0..4).map(|p| b.data()[p * 2] + b.data()[p * 2 + 1]).collect();
    let want: Vec<f64> = (0..3).flat_map(|_| row_sums.clone()).collect();
    assert!(close(grads.wrt(av).unwrap(), &want, 1e-12));
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 5]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
    let s = g.softmax(a).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);

    let b = g.constant(Tensor::new(vec![1, 2], vec![3.7, f64::NEG_INFINITY]).unwrap());
    let s = g.softmax(b).unwrap();
    assert_eq!(g.value(s).data(), &[1.0, 0.0]);

    let c = g.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let s = g.softmax(c).unwrap();
    let z: f64 = [1f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
    let want: Vec<f64> = [1f64, 2.0, 3.0].iter().map(|x| x.exp() / z).collect();
    assert!(close(g.value(s).data(), &want, 1e-12));
}

#[test]
fn fully_masked_softmax_row_is_rejected() {
    let mut g = Graph::new();
    let ninf = f64::NEG_INFINITY;
    let a = g.constant(Tensor::new(vec![2, 2], vec![0.0, 1.0, ninf, ninf]).unwrap());
    assert!(matches!(g.softmax(a), Err(NnError::FullyMaskedRow { row: 1 })));
}

proptest! {
    #[test]
    fn softmax_rows_are_stochastic_and_shift_invariant(
        row in prop::collection::vec(-30.0f64..30.0, 1..12),
        shift in -50.0f64..50.0,
    ) {
        let n = row.len();
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![1, n], row.clone()).unwrap());
        let b = g.constant(Tensor::new(vec![1, n], row.iter().map(|x| x + shift).collect()).unwrap());
        let (sa, sb) = (g.softmax(a).unwrap(), g.softmax(b).unwrap());
        let total: f64 = g.value(sa).data().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert!(close(g.value(sa).data(), g.value(sb).data(), 1e-12));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(values in prop::collection::vec(any::<f64>(), 1..40)) {
        let mut store = ParamStore::new();
        let n = values.len();
        store.add("layer.weight", Tensor::new(vec![n], values).unwrap());
        store.add("layer.bias", Tensor::new(vec![1, 2], vec![-0.0, f64::MIN_POSITIVE]).unwrap());
        let m = nncore::checkpoint::Manifest::from_store(&store);
        let back = nncore::checkpoint::Manifest::read_from(&m.to_bytes()[..]).unwrap();
        prop_assert_eq!(back.to_bytes(), m.to_bytes());
    }
}

#[test]
fn checkpoint_file_round_trip_restores_store() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    Linear::new(&mut store, "fc", 3, 2, true, &mut rng);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    nncore::checkpoint::Manifest::from_store(&store).save(&path).unwrap();
    let mut other = ParamStore::new();
    Linear::new(&mut other, "fc", 3, 2, true, &mut ChaCha8Rng::seed_from_u64(99));
    nncore::checkpoint::Manifest::load(&path).unwrap().load_into(&mut other).unwrap();
    for (a, b) in store.iter().zip(other.iter()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn layer_norm_examples() {
    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", 4);
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 4], 7.5));
    let y = ln.forward(&mut g, &store, x).unwrap();
    assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-12));

    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", 2);
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap());
    let y = ln.forward(&mut g, &store, x).unwrap();
    // population variance 1, eps 1e-5
    let s = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!(close(g.value(y).data(), &[-s, s], 1e-15));
    assert!(close(g.value(y).data(), &[-1.0, 1.0], 1e-5));
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let x = store.add("x", rand_tensor(&[4, 6], &mut rng));
    let ln = LayerNorm::new(&mut store, "ln", 6);
    store.value_mut(ln.gain).data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
    let r = rand_tensor(&[4, 6], &mut rng);
    let report = grad_check(&mut store, &[], 1e-4, |g, s| {
        let xv = g.param(s, x);
        let y = ln.forward(g, s, xv)?;
        let rv = g.constant(r.clone());
        let p = g.mul(y, rv)?;
        Ok(g.sum(p))
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

#[test]
fn activations() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![2], vec![-2.0, 3.0]).unwrap());
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 3.0]);
    let l = g.leaky_relu(x, 0.2);
    assert!(close(g.value(l).data(), &[-0.4, 3.0], 1e-15));

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let t = rand_tensor(&[50], &mut rng);
    let v = g.constant(t.clone());
    let (r, l) = (g.relu(v), g.leaky_relu(v, 0.1));
    for (i, &x) in t.data().iter().enumerate() {
        assert_eq!(g.value(r).data()[i], if x > 0.0 { x } else { 0.0 });
        assert_eq!(g.value(l).data()[i], if x > 0.0 { x } else { 0.1 * x });
    }
}

#[test]
fn dropout_modes() {
    let t = Tensor::from_fn(&[10], |i| i as f64);
    let mut g = Graph::training(7);
    let x = g.constant(t.clone());
    let y = g.dropout(x, 0.0).unwrap();
    assert_eq!(g.value(y), &t);

    let mut g = Graph::new();
    let x = g.constant(t.clone());
    let y = g.dropout(x, 0.5).unwrap();
    assert_eq!(g.value(y), &t);

    let mut g = Graph::training(7);
    let x = g.constant(t);
    assert!(g.dropout(x, 1.0).is_err());
}

#[test]
fn dropout_preserves_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let t = Tensor::from_fn(&[10_000], |_| rng.random_range(0.5..1.5));
    let mean_in = t.data().iter().sum::<f64>() / 10_000.0;
    let mut g = Graph::training(9);
    let x = g.constant(t);
    let y = g.dropout(x, 0.1).unwrap();
    let mean_out = g.value(y).data().iter().sum::<f64>() / 10_000.0;
    assert!((mean_out - mean_in).abs() / mean_in < 0.02, "{mean_in} vs {mean_out}");

    let draw = |seed| {
        let mut g = Graph::training(seed);
        let x = g.constant(Tensor::ones(&[64]));
        let y = g.dropout(x, 0.3).unwrap();
        g.value(y).clone()
    };
    assert_eq!(draw(3), draw(3));
}

#[test]
fn embedding_gather_and_scatter() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    let emb = Embedding::new(&mut store, "emb", 5, 3, &mut rng);
    let table = store.value(emb.table).clone();
    let mut g = Graph::new();
    let tokens = [0, 3, 3, 1];
    let y = emb.forward(&mut g, &store, &tokens).unwrap();
    for (r, &t) in tokens.iter().enumerate() {
        assert_eq!(g.value(y).row(r), table.row(t));
    }
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    g.accumulate_param_grads(&grads, &mut store);
    let grad = store.get(emb.table).grad.clone();
    assert_eq!(grad.row(3), &[2.0, 2.0, 2.0]);
    assert_eq!(grad.row(0), &[1.0, 1.0, 1.0]);
    assert_eq!(grad.row(2), &[0.0, 0.0, 0.0]);

    assert!(matches!(
        emb.forward(&mut g, &store, &[5]),
        Err(NnError::IndexOutOfRange { index: 5, rows: 5 })
    ));
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let uniform = g.constant(Tensor::zeros(&[2, 4]));
    let l = g.cross_entropy(uniform, &[1, 3], None).unwrap();
    assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-15);

    let peaked = g.constant(Tensor::new(vec![1, 3], vec![0.0, 800.0, 0.0]).unwrap());
    let l = g.cross_entropy(peaked, &[1], None).unwrap();
    assert!(g.value(l).data()[0] < 1e-300);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let logits = rand_tensor(&[5, 6], &mut rng).map(|x| 4.0 * x);
    let targets = [2, 0, 5, 0, 1];
    let v = g.constant(logits.clone());
    let l = g.cross_entropy(v, &targets, Some(0)).unwrap();
    let mut total = 0.0;
    let mut n = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t == 0 {
            continue;
        }
        let z: f64 = logits.row(r).iter().map(|x| x.exp()).sum();
        total += -(logits.row(r)[t].exp() / z).ln();
        n += 1.0;
    }
    assert!((g.value(l).data()[0] - total / n).abs() < 1e-10);

    assert!(matches!(
        g.cross_entropy(v, &[0; 5], Some(0)),
        Err(NnError::AllTargetsIgnored)
    ));
}

#[test]
fn adam_descends_a_quadratic_bowl_monotonically() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::new(vec![3], vec![2.0, -1.5, 0.7]).unwrap());
    let centre = Tensor::new(vec![3], vec![0.5, 0.5, 0.5]).unwrap();
    let adam = Adam::with_weight_decay(WeightDecay::Decoupled(0.0));
    let loss_of = |store: &ParamStore| -> (f64, Graph, nncore::Var) {
        let mut g = Graph::new();
        let pv = g.param(store, p);
        let c = g.constant(centre.clone().map(|x| -x));
        let d = g.add(pv, c).unwrap();
        let sq = g.mul(d, d).unwrap();
        let l = g.sum(sq);
        (g.value(l).data()[0], g, l)
    };
    let mut prev = f64::INFINITY;
    for _ in 0..10 {
        let (loss, g, l) = loss_of(&store);
        assert!(loss < prev, "{loss} !< {prev}");
        prev = loss;
        store.zero_grad();
        let grads = g.backward(l).unwrap();
        g.accumulate_param_grads(&grads, &mut store);
        adam.step(&mut store, 0.05).unwrap();
    }
}

#[test]
fn linear_layer_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let fc = Linear::new(&mut store, "fc", 4, 3, true, &mut rng);
    let x = rand_tensor(&[5, 4], &mut rng);
    let r = rand_tensor(&[5, 3], &mut rng);
    let report = grad_check(&mut store, &[], 1e-4, |g, s| {
        let xv = g.constant(x.clone());
        let y = fc.forward(g, s, xv)?;
        let rv = g.constant(r.clone());
        let p = g.mul(y, rv)?;
        Ok(g.sum(p))
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-7, "{report:?}");
}

#[test]
fn corrupted_gradient_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let fc = Linear::new(&mut store, "fc", 3, 2, false, &mut rng);
    let x = rand_tensor(&[4, 3], &mut rng);
    let mut f = |g: &mut Graph, s: &ParamStore| {
        let xv = g.constant(x.clone());
        let y = fc.forward(g, s, xv)?;
        let t = g.mul(y, y)?;
        Ok(g.sum(t))
    };
    let ids = [fc.weight];
    let mut analytic = analytic_gradients(&store, &ids, &mut f).unwrap();
    analytic[0][2] *= 1.1;
    let report = compare_gradients(&mut store, &ids, &analytic, 1e-4, &mut f).unwrap();
    assert!(report.max_rel_err > 1e-2, "{report:?}");
    assert_eq!(report.worst, Some(("fc.weight".to_string(), 2)));
}

#[test]
fn every_primitive_passes_gradient_check() {
    for (name, report) in check_primitives(42, 1e-4).unwrap() {
        assert!(report.max_rel_err < 1e-4, "{name}: {report:?}");
        assert!(report.coordinates > 0, "{name}");
    }
}

#[test]
fn training_is_bit_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut store = ParamStore::new();
        let fc = Linear::new(&mut store, "fc", 4, 4, true, &mut rng);
        let x = rand_tensor(&[6, 4], &mut rng);
        let adam = Adam::with_weight_decay(WeightDecay::Decoupled(0.01));
        for step in 0..20u64 {
            let mut g = Graph::training(step);
            let xv = g.constant(x.clone());
            let y = fc.forward(&mut g, &store, xv).unwrap();
            let y = g.dropout(y, 0.1).unwrap();
            let l = g.cross_entropy(y, &[0, 1, 2, 3, 1, 2], None).unwrap();
            store.zero_grad();
            let grads = g.backward(l).unwrap();
            g.accumulate_param_grads(&grads, &mut store);
            adam.step(&mut store, 0.01).unwrap();
        }
        nncore::checkpoint::Manifest::from_store(&store).to_bytes()
    };
    assert_eq!(run(), run());
}
