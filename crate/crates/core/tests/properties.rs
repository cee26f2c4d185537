use mobinc::arch::{build_inception, InceptionConfig};
use mobinc::data::{split_counts, SplitRatios};
use mobinc::ops::{concat_channels, conv2d, softmax, softmax_cross_entropy, split_channels, ConvParams};
use mobinc::train::{compute_metrics, ConfusionMatrix};
use mobinc::{Padding, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-3.0f32..3.0, n).prop_map(move |v| Tensor::new(shape.clone(), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn inception_width_is_branch_sum(f in prop::array::uniform6(1usize..12), h in 1usize..7, w in 1usize..7) {
        let cfg = InceptionConfig { b1_1x1: f[0], b2_reduce: f[1], b2_3x3: f[2], b3_reduce: f[3], b3_5x5: f[4], b4_proj: f[5] };
        let g = build_inception(5, &cfg, 0).unwrap();
        let y = g.predict(&Tensor::full([1, h, w, 5], 0.25)).unwrap();
        prop_assert_eq!(y.shape(), &[1, h, w, f[0] + f[2] + f[4] + f[5]]);
    }

    #[test]
    fn same_padding_output_extent(h in 1usize..12, w in 1usize..12, k in prop::sample::select(vec![1usize, 3, 5]), s in 1usize..4) {
        let p = ConvParams::new(Tensor::full([k, k, 2, 3], 0.1), None, s, Padding::Same).unwrap();
        let y = conv2d(&Tensor::zeros([1, h, w, 2]), &p).unwrap();
        prop_assert_eq!(y.shape(), &[1, h.div_ceil(s), w.div_ceil(s), 3]);
    }

    #[test]
    fn softmax_rows_are_distributions(x in tensor(vec![3, 4])) {
        let p = softmax(&x).unwrap();
        for row in p.data().chunks(4) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let labels = Tensor::from_fn([3, 4], |i| if i % 4 == i / 4 { 1.0 } else { 0.0 });
        prop_assert!(softmax_cross_entropy(&x, &labels).unwrap().0 >= 0.0);
    }

    #[test]
    fn split_undoes_concat(a in tensor(vec![2, 3, 2, 1]), b in tensor(vec![2, 3, 2, 4])) {
        let cat = concat_channels(&[&a, &b]).unwrap();
        let parts = split_channels(&cat, &[1, 4]).unwrap();
        prop_assert_eq!(&parts[0], &a);
        prop_assert_eq!(&parts[1], &b);
    }

    #[test]
    fn split_counts_partition(n in 0usize..5000) {
        let (tr, va, te) = split_counts(n, &SplitRatios::default());
        prop_assert_eq!(tr + va + te, n);
        prop_assert_eq!(tr, n * 7 / 10);
        prop_assert_eq!(va, n / 10);
    }

    #[test]
    fn metrics_are_fractions(m in prop::array::uniform4(prop::array::uniform4(0i64..50))) {
        prop_assume!(m.iter().flatten().any(|&v| v > 0));
        let cm = ConfusionMatrix::from_counts(m).unwrap();
        prop_assert!((0.0..=1.0).contains(&cm.accuracy()));
        for c in compute_metrics(&cm).unwrap() {
            for v in [c.precision, c.sensitivity, c.specificity, c.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
