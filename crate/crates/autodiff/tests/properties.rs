use autodiff::{cross_entropy, entropy, softmax_temp, NdArray};
use proptest::prelude::*;

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

proptest! {
    #[test]
    fn softmax_slices_sum_to_one(
        logits in proptest::collection::vec(-30.0f64..30.0, 2..24),
        tau in 0.04f64..10.0,
    ) {
        let c = logits.len();
        let x = NdArray::from_vec(&[c], logits).unwrap();
        let p = softmax_temp(&x, tau).unwrap();
        let sum: f64 = p.data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        prop_assert!(p.data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn temperature_never_moves_the_mode(
        logits in proptest::collection::vec(-10.0f64..10.0, 2..16),
        tau in 0.04f64..10.0,
    ) {
        let c = logits.len();
        let x = NdArray::from_vec(&[c], logits.clone()).unwrap();
        let p = softmax_temp(&x, tau).unwrap();
        prop_assert_eq!(argmax(p.data()), argmax(&logits));
    }

    #[test]
    fn cross_entropy_dominates_entropy(
        raw_q in proptest::collection::vec(0.01f64..1.0, 4),
        raw_p in proptest::collection::vec(0.01f64..1.0, 4),
    ) {
        let qs: f64 = raw_q.iter().sum();
        let ps: f64 = raw_p.iter().sum();
        let q = NdArray::from_vec(&[4], raw_q.iter().map(|v| v / qs).collect()).unwrap();
        let p = NdArray::from_vec(&[4], raw_p.iter().map(|v| v / ps).collect()).unwrap();
        let ce = cross_entropy(&q, &p).unwrap();
        prop_assert!(ce - entropy(&q) >= -1e-7);
    }
}
