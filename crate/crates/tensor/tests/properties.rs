use proptest::prelude::*;
use rigid_tensor::{check_gradients, GradCheck, Tensor};

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn matmul_transpose_identity(a in values(6), b in values(8)) {
        // (A B)^T == B^T A^T
        let a = Tensor::new(&[3, 2], a);
        let b = Tensor::new(&[2, 4], b);
        let mut tape = rigid_tensor::Tape::new();
        let (va, vb) = (tape.constant(a), tape.constant(b));
        let ab = tape.matmul(va, vb);
        let lhs = tape.transpose(ab);
        let (ta, tb) = (tape.transpose(va), tape.transpose(vb));
        let rhs = tape.matmul(tb, ta);
        let (l, r) = (tape.value(lhs).clone(), tape.value(rhs).clone());
        prop_assert_eq!(l.shape(), r.shape());
        for (x, y) in l.data().iter().zip(r.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn elementwise_gradients_match_differences(a in values(5), b in values(5)) {
        let a = Tensor::new(&[5], a);
        let b = Tensor::new(&[5], b);
        let errs = check_gradients(&[a, b], GradCheck::default(), |t, v| {
            let p = t.mul(v[0], v[1]);
            let s = t.add(p, v[0]);
            let y = t.tanh(s);
            t.sum(y)
        });
        prop_assert!(errs.iter().all(|&e| e < 1e-4), "{:?}", errs);
    }
}
