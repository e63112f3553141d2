use convformer::gradcheck::{self, DEFAULT_STEP, DEFAULT_TOLERANCE};
use convformer::{rng, Error, Graph, Tensor};
use proptest::prelude::*;

mod common;
use common::naive_conv_same;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv1d_same_matches_naive_loops(seed in any::<u64>(), cin in 1usize..5, cout in 1usize..5, len in 1usize..12, half in 0usize..4) {
        let kernel = 2 * half + 1;
        let mut r = rng::seeded(seed);
        let x = Tensor::randn([cin, len], 1.0, &mut r);
        let w = Tensor::randn([cout, cin, kernel], 1.0, &mut r);
        let b = Tensor::randn([cout], 1.0, &mut r);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv1d_same(xv, wv, bv).unwrap();
        prop_assert!(g.value(y).max_abs_diff(&naive_conv_same(&x, &w, &b)) < 1e-12);
    }

    #[test]
    fn unit_kernel_identity_conv_is_the_identity(seed in any::<u64>(), c in 1usize..6, len in 1usize..10) {
        let x = Tensor::randn([2, c, len], 1.0, &mut rng::seeded(seed));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let w = g.constant(Tensor::eye(c).reshape([c, c, 1]).unwrap());
        let b = g.constant(Tensor::zeros([c]));
        let y = g.conv1d_same(xv, w, b).unwrap();
        prop_assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9, spread in 0.1f64..50.0) {
        let x = Tensor::randn([rows, cols], spread, &mut rng::seeded(seed));
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = g.softmax(xv);
        for row in g.value(y).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn softmax_ignores_a_row_shift(seed in any::<u64>(), cols in 1usize..9, shift in -100.0f64..100.0) {
        let x = Tensor::randn([3, cols], 2.0, &mut rng::seeded(seed));
        let shifted = Tensor::new([3, cols], x.data().iter().map(|v| v + shift).collect()).unwrap();
        let mut g = Graph::new();
        let (a, b) = (g.constant(x), g.constant(shifted));
        let (ya, yb) = (g.softmax(a), g.softmax(b));
        prop_assert!(g.value(ya).max_abs_diff(g.value(yb)) < 1e-12);
    }

    #[test]
    fn split_undoes_concat(seed in any::<u64>(), sizes in prop::collection::vec(1usize..5, 1..4), axis in 0usize..3) {
        let mut r = rng::seeded(seed);
        let parts: Vec<Tensor> = sizes
            .iter()
            .map(|&s| {
                let mut shape = vec![2, 3, 4];
                shape[axis] = s;
                Tensor::randn(shape, 1.0, &mut r)
            })
            .collect();
        let mut g = Graph::new();
        let vars: Vec<_> = parts.iter().map(|t| g.constant(t.clone())).collect();
        let joined = g.concat(&vars, axis).unwrap();
        let back = g.split(joined, axis, &sizes).unwrap();
        for (v, t) in back.iter().zip(&parts) {
            prop_assert_eq!(g.value(*v), t);
        }
    }
}

#[test]
fn second_backward_is_a_usage_error() {
    let mut g = Graph::new();
    let x = g.param(Tensor::full([3], 2.0));
    let y = g.mul(x, x).unwrap();
    let loss = g.sum(y);
    g.backward(loss).unwrap();
    let first = g.grad(x).unwrap().to_vec();
    assert!(matches!(g.backward(loss), Err(Error::Usage(_))));
    // the first pass's gradients are left untouched
    assert_eq!(g.grad(x).unwrap(), first.as_slice());
    assert_eq!(first, vec![4.0; 3]);
}

#[test]
fn every_op_passes_gradcheck_over_twenty_seeds() {
    let reports = gradcheck::run(&gradcheck::op_suite(), 20, DEFAULT_STEP).unwrap();
    for r in &reports {
        assert!(r.passed(DEFAULT_TOLERANCE), "{} rel err {:e}", r.name, r.max_rel_error);
    }
}
