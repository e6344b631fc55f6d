use hazekit_tape::{Graph, Tensor};
use proptest::prelude::*;

fn config() -> ProptestConfig {
    ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() }
}

#[test]
fn zero_row_normalizes_to_zero() {
    let mut g = Graph::<f32>::new();
    let x = g.variable(Tensor::new(vec![2, 3], vec![0.0, 0.0, 0.0, 3.0, 0.0, 4.0]));
    let y = g.normalize_rows(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0, 0.6, 0.0, 0.8]);
    let s = g.sum(y);
    let grads = g.backward(s);
    assert!(grads.get(x).unwrap().is_finite());
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn softmax_rows_sum_to_one(v in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![3, 4], v));
        let p = g.softmax_rows(x);
        for row in g.value(p).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&q| (0.0..=1.0).contains(&q)));
        }
    }

    #[test]
    fn normalized_rows_have_unit_norm(v in prop::collection::vec(0.01f64..5.0, 8), signs in prop::collection::vec(any::<bool>(), 8)) {
        let v: Vec<f64> = v.iter().zip(&signs).map(|(a, s)| if *s { *a } else { -a }).collect();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![2, 4], v));
        let y = g.normalize_rows(x);
        for row in g.value(y).data().chunks(4) {
            prop_assert!((row.iter().map(|a| a * a).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_is_linear_in_the_input(a in prop::collection::vec(-1.0f64..1.0, 32), b in prop::collection::vec(-1.0f64..1.0, 32), w in prop::collection::vec(-1.0f64..1.0, 36), k in -2.0f64..2.0) {
        let conv = |x: Vec<f64>| {
            let mut g = Graph::<f64>::new();
            let xv = g.constant(Tensor::new(vec![1, 2, 4, 4], x));
            let wv = g.constant(Tensor::new(vec![2, 2, 3, 3], w.clone()));
            let y = g.conv2d(xv, wv, None, 1, 1);
            g.value(y).data().to_vec()
        };
        let mixed: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p + k * q).collect();
        let (ya, yb, ym) = (conv(a), conv(b), conv(mixed));
        for i in 0..ym.len() {
            prop_assert!((ym[i] - (ya[i] + k * yb[i])).abs() < 1e-12);
        }
    }
}
