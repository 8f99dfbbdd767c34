use biocast_autograd::{Graph, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-3.0f64..3.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_naive_loop((a, b) in (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(m, k, n)| (tensor(vec![m, k]), tensor(vec![k, n])))) {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(va, vb).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                prop_assert_eq!(g.value(c).data()[i * n + j], s);
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(x in (1usize..5, 1usize..7).prop_flat_map(|(r, c)| tensor(vec![r, c]))) {
        let cols = x.shape()[1];
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.softmax(v);
        for row in g.value(s).data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| p > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_round_trips(x in tensor(vec![2, 3, 4]), perm in Just(vec![0usize, 1, 2]).prop_shuffle()) {
        let mut inverse = [0usize; 3];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let p = g.permute(v, &perm).unwrap();
        let back = g.permute(p, &inverse).unwrap();
        prop_assert_eq!(g.value(back), &x);
    }

    #[test]
    fn sum_gradient_is_ones(x in (1usize..5, 1usize..5).prop_flat_map(|(r, c)| tensor(vec![r, c]))) {
        let mut g = Graph::new();
        let v = g.leaf(x.clone(), true);
        let s = g.sum(v);
        let grads = g.backward(s).unwrap();
        prop_assert!(grads.get(v).unwrap().data().iter().all(|&d| d == 1.0));
    }
}
