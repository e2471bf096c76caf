use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DiffError, Graph, Tensor};

#[test]
fn forward_examples() {
    // sum(x * x) at x = [1, 2] -> 5
    let mut g = Graph::new();
    let x = g.var("x", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    assert_eq!(g.value(s).item(), 5.0);

    // identity matmul
    let mut g = Graph::new();
    let eye = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let v = g.constant(Tensor::from_vec(vec![3.0, -4.0]));
    let out = g.matmul(eye, v).unwrap();
    assert_eq!(g.value(out).data(), &[3.0, -4.0]);

    // tanh(0) = 0
    let mut g = Graph::new();
    let z = g.constant(Tensor::scalar(0.0));
    let t = g.tanh(z).unwrap();
    assert_eq!(g.value(t).item(), 0.0);
}

#[test]
fn backward_examples() {
    // d/dx sum(x * x) = 2x
    let mut g = Graph::new();
    let x = g.var("x", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads["x"].data(), &[2.0, 4.0]);

    // d/dc sum(c + x) = ones of c's shape; an unused leaf gets zeros
    let mut g = Graph::new();
    let c = g.var("c", Tensor::from_vec(vec![0.5, 0.5, 0.5])).unwrap();
    let x = g.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let unused = g.var("unused", Tensor::zeros(&[2, 2])).unwrap();
    let _ = unused;
    let sum = g.add(c, x).unwrap();
    let s = g.sum(sum).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads["c"].data(), &[1.0, 1.0, 1.0]);
    assert_eq!(grads["unused"], Tensor::zeros(&[2, 2]));
}

#[test]
fn gradient_accumulates_over_fanout() {
    // y = x + x -> dy/dx = 2
    let mut g = Graph::new();
    let x = g.var("x", Tensor::from_vec(vec![3.0])).unwrap();
    let y = g.add(x, x).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads["x"].data(), &[2.0]);
}

#[test]
fn tanh_chain_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let w = Tensor::from_fn(&[3, 3], |_| rng.gen_range(-1.0..1.0));
    let x0 = Tensor::from_fn(&[3], |_| rng.gen_range(-1.0..1.0));

    let mut g = Graph::new();
    let x = g.var("x", x0.clone()).unwrap();
    let wc = g.constant(w.clone());
    let wx = g.matmul(wc, x).unwrap();
    let t = g.tanh(wx).unwrap();
    let root = g.sum(t).unwrap();
    let analytic = g.backward(root).unwrap()["x"].clone();

    let h = 1e-5;
    for i in 0..3 {
        let mut plus = x0.clone();
        plus.data_mut()[i] += h;
        let mut minus = x0.clone();
        minus.data_mut()[i] -= h;
        let f = |t: Tensor, g: &mut Graph| {
            let mut b = HashMap::new();
            b.insert("x".to_string(), t);
            g.forward(&b).unwrap().item()
        };
        let fd = (f(plus, &mut g) - f(minus, &mut g)) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / fd.abs().max(1e-12);
        assert!(rel <= 1e-6, "component {i}: analytic {a}, fd {fd}");
    }
}

#[test]
fn forward_is_deterministic_and_rebindable() {
    let build = || {
        let mut g = Graph::new();
        let x = g.var("x", Tensor::from_vec(vec![0.3, -0.7])).unwrap();
        let e = g.exp(x).unwrap();
        let s = g.sum(e).unwrap();
        (g, s)
    };
    let (g1, s1) = build();
    let (g2, s2) = build();
    assert_eq!(g1.value(s1).item().to_bits(), g2.value(s2).item().to_bits());

    // rebinding re-evaluates the whole tape
    let (mut g, s) = build();
    let mut bindings = HashMap::new();
    bindings.insert("x".to_string(), Tensor::from_vec(vec![0.0, 0.0]));
    let out = g.forward(&bindings).unwrap();
    assert_eq!(out.item(), 2.0);
    assert_eq!(g.value(s).item(), 2.0);
}

#[test]
fn error_paths() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2]));
    let b = g.constant(Tensor::zeros(&[3]));
    assert!(matches!(g.add(a, b), Err(DiffError::ShapeMismatch { .. })));

    let neg = g.constant(Tensor::from_vec(vec![-1.0]));
    assert!(matches!(g.log(neg), Err(DiffError::Domain { .. })));
    assert!(matches!(g.sqrt(neg), Err(DiffError::Domain { .. })));

    let p = g.constant(Tensor::from_vec(vec![1.5]));
    assert!(matches!(g.probit(p), Err(DiffError::Domain { .. })));

    // non-scalar backward root
    let v = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(matches!(g.backward(v), Err(DiffError::NonScalarRoot(_))));

    // duplicate leaf names and unknown rebinds
    let mut g = Graph::new();
    g.var("x", Tensor::scalar(1.0)).unwrap();
    assert!(matches!(
        g.var("x", Tensor::scalar(2.0)),
        Err(DiffError::DuplicateLeaf(_))
    ));
    let mut bindings = HashMap::new();
    bindings.insert("y".to_string(), Tensor::scalar(0.0));
    assert!(matches!(
        g.forward(&bindings),
        Err(DiffError::UnknownLeaf(_))
    ));

    // a non-finite intermediate is an error state
    let mut g = Graph::new();
    let big = g.constant(Tensor::from_vec(vec![1e308]));
    let double = g.add(big, big);
    assert!(matches!(double, Err(DiffError::NonFinite { .. })));
}

#[test]
fn softplus_is_stable_at_extremes() {
    let mut g = Graph::new();
    let x = g
        .var("x", Tensor::from_vec(vec![800.0, -800.0, 0.0]))
        .unwrap();
    let s = g.softplus(x).unwrap();
    let v = g.value(s).data().to_vec();
    assert_eq!(v[0], 800.0);
    assert_eq!(v[1], 0.0);
    assert!((v[2] - 2.0f64.ln()).abs() < 1e-15);
    let root = g.sum(s).unwrap();
    let grads = g.backward(root).unwrap();
    assert!((grads["x"].data()[0] - 1.0).abs() < 1e-12);
    assert_eq!(grads["x"].data()[1], 0.0);
    assert!((grads["x"].data()[2] - 0.5).abs() < 1e-15);
}

#[test]
fn inverse_and_logdet_are_consistent() {
    let a = Tensor::from_rows(&[vec![2.0, 0.5], vec![0.3, 1.5]]).unwrap();
    let mut g = Graph::new();
    let an = g.constant(a.clone());
    let inv = g.inverse(an).unwrap();
    // A * A^-1 = I
    let prod = g.matmul(an, inv).unwrap();
    let v = g.value(prod);
    for i in 0..2 {
        for j in 0..2 {
            let expect = if i == j { 1.0 } else { 0.0 };
            assert!((v.at2(i, j) - expect).abs() < 1e-12);
        }
    }
    let ld = g.logdet(an).unwrap();
    let det: f64 = 2.0 * 1.5 - 0.5 * 0.3;
    assert!((g.value(ld).item() - det.ln()).abs() < 1e-12);

    // non-positive determinant is a domain error
    let flipped = g.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap());
    assert!(matches!(g.logdet(flipped), Err(DiffError::Domain { .. })));
    let singular = g.constant(Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap());
    assert!(matches!(g.inverse(singular), Err(DiffError::Singular(_))));
}

#[test]
fn broadcast_slice_concat_round_trip() {
    let mut g = Graph::new();
    let x = g.var("x", Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
    let b = g.broadcast(x, 4).unwrap();
    assert_eq!(g.shape(b), &[4, 3]);
    let row = g.slice(b, 0, 1, 2).unwrap();
    let col = g.slice(b, 1, 0, 2).unwrap();
    assert_eq!(g.shape(row), &[1, 3]);
    assert_eq!(g.shape(col), &[4, 2]);
    let cat = g.concat(&[col, col], 1).unwrap();
    assert_eq!(g.shape(cat), &[4, 4]);
    let root = g.sum(cat).unwrap();
    let grads = g.backward(root).unwrap();
    // each of the first two components feeds 4 copies x 2 concat arms
    assert_eq!(grads["x"].data(), &[8.0, 8.0, 0.0]);
}

#[test]
fn clamp_gradient_masks_outside() {
    let mut g = Graph::new();
    let x = g.var("x", Tensor::from_vec(vec![-2.0, 0.3, 2.0])).unwrap();
    let c = g.clamp(x, -1.0, 1.0).unwrap();
    assert_eq!(g.value(c).data(), &[-1.0, 0.3, 1.0]);
    let root = g.sum(c).unwrap();
    let grads = g.backward(root).unwrap();
    assert_eq!(grads["x"].data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn mean_axis0_and_tile_cols_composites() {
    let mut g = Graph::new();
    let x = g
        .var(
            "x",
            Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap(),
        )
        .unwrap();
    let m = g.mean_axis0(x).unwrap();
    assert_eq!(g.value(m).data(), &[3.0, 4.0]);
    let tiled = g.tile_cols(m, 3).unwrap();
    assert_eq!(g.shape(tiled), &[2, 3]);
    assert_eq!(g.value(tiled).row(0), &[3.0, 3.0, 3.0]);
    let root = g.sum(tiled).unwrap();
    let grads = g.backward(root).unwrap();
    // every input element contributes 3/3 = 1 through the mean+tile chain
    for v in grads["x"].data() {
        assert!((v - 1.0).abs() < 1e-15);
    }
}
