use proptest::prelude::*;
use tensor::{Graph, Rng, Tensor};

proptest! {
    #[test]
    fn masked_softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..8) {
        let mut rng = Rng::new(seed);
        let x = rng.normal_tensor(&[rows, cols]).map(|v| 20.0 * v);
        let mask: Vec<f64> = (0..rows * cols)
            .map(|_| if rng.bernoulli(0.4) { f64::NEG_INFINITY } else { 0.0 })
            .collect();
        let mask = Tensor::new(&[rows, cols], mask).unwrap();
        let mut g = Graph::new();
        let v = g.constant(x).unwrap();
        let y = g.masked_softmax(v, Some(&mask)).unwrap();
        let y = g.value(y);
        for r in 0..rows {
            let open = (0..cols).filter(|&c| mask.at(r, c) == 0.0).count();
            let sum: f64 = (0..cols).map(|c| y.at(r, c)).sum();
            for c in 0..cols {
                if mask.at(r, c) != 0.0 {
                    prop_assert_eq!(y.at(r, c), 0.0);
                }
            }
            if open > 0 {
                prop_assert!((sum - 1.0).abs() < 1e-12);
            } else {
                prop_assert_eq!(sum, 0.0);
            }
        }
    }

    #[test]
    fn matmul_distributes_over_add(seed in any::<u64>(), n in 1usize..5, k in 1usize..5, m in 1usize..5) {
        let mut rng = Rng::new(seed);
        let (a, b, c) = (rng.normal_tensor(&[n, k]), rng.normal_tensor(&[k, m]), rng.normal_tensor(&[k, m]));
        let mut g = Graph::new();
        let (a, b, c) = (g.constant(a).unwrap(), g.constant(b).unwrap(), g.constant(c).unwrap());
        let bc = g.add(b, c).unwrap();
        let lhs = g.matmul(a, bc).unwrap();
        let ab = g.matmul(a, b).unwrap();
        let ac = g.matmul(a, c).unwrap();
        let rhs = g.add(ab, ac).unwrap();
        for (x, y) in g.value(lhs).data().iter().zip(g.value(rhs).data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rng_streams_are_reproducible(seed in any::<u64>(), stream in any::<u64>()) {
        let a: Vec<u64> = { let mut r = Rng::with_stream(seed, stream); (0..8).map(|_| r.next_u64()).collect() };
        let b: Vec<u64> = { let mut r = Rng::with_stream(seed, stream); (0..8).map(|_| r.next_u64()).collect() };
        let c: Vec<u64> = { let mut r = Rng::with_stream(seed, stream.wrapping_add(1)); (0..8).map(|_| r.next_u64()).collect() };
        prop_assert_eq!(&a, &b);
        prop_assert_ne!(&a, &c);
    }
}
