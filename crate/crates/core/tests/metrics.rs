use mobinc::data::{one_hot, BatchLoader, Class, Sample};
use mobinc::train::{compute_metrics, evaluate_with, ConfusionMatrix};
use mobinc::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One-vs-rest counts recomputed by walking every cell.
fn oracle(m: &[[i64; 4]; 4], c: usize) -> (f64, f64, f64, f64) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0.0, 0.0, 0.0, 0.0);
    for (t, row) in m.iter().enumerate() {
        for (p, &v) in row.iter().enumerate() {
            let v = v as f64;
            match (t == c, p == c) {
                (true, true) => tp += v,
                (false, true) => fp += v,
                (true, false) => fn_ += v,
                (false, false) => tn += v,
            }
        }
    }
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let precision = div(tp, tp + fp);
    let sensitivity = div(tp, tp + fn_);
    let f1 = div(2.0 * precision * sensitivity, precision + sensitivity);
    (precision, sensitivity, div(tn, tn + fp), f1)
}

fn random_matrix(rng: &mut impl Rng) -> [[i64; 4]; 4] {
    let sparse = rng.random_bool(0.2);
    std::array::from_fn(|_| {
        std::array::from_fn(|_| {
            if sparse && rng.random_bool(0.5) {
                0
            } else {
                rng.random_range(0..500)
            }
        })
    })
}

#[test]
fn agrees_with_cell_walk_on_1000_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut checked = 0;
    while checked < 1000 {
        let m = random_matrix(&mut rng);
        if m.iter().flatten().all(|&v| v == 0) {
            continue;
        }
        let got = compute_metrics(&ConfusionMatrix::from_counts(m).unwrap()).unwrap();
        for (c, g) in got.iter().enumerate() {
            let (p, s, sp, f) = oracle(&m, c);
            for (name, a, b) in [("precision", g.precision, p), ("sensitivity", g.sensitivity, s), ("specificity", g.specificity, sp), ("f1", g.f1, f)] {
                assert!((a - b).abs() <= 1e-12, "{name} of class {c} in {m:?}: {a} vs {b}");
            }
        }
        checked += 1;
    }
}

#[test]
fn scaling_counts_leaves_metrics_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..100 {
        let m = random_matrix(&mut rng);
        if m.iter().flatten().all(|&v| v == 0) {
            continue;
        }
        let k = rng.random_range(2..20);
        let scaled = m.map(|r| r.map(|v| v * k));
        let a = compute_metrics(&ConfusionMatrix::from_counts(m).unwrap()).unwrap();
        let b = compute_metrics(&ConfusionMatrix::from_counts(scaled).unwrap()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.precision - y.precision).abs() < 1e-12);
            assert!((x.specificity - y.specificity).abs() < 1e-12);
            assert!((x.f1 - y.f1).abs() < 1e-12);
        }
    }
}

/// Rows and columns in Healthy, NLB, GLS, CR order, chosen so the rounded
/// one-vs-rest metrics land on the published table.
const TABLE_FIXTURE: [[i64; 4]; 4] = [[155, 0, 0, 0], [0, 414, 34, 1], [0, 5, 308, 3], [0, 10, 6, 263]];

fn round_to(v: f64, places: i32) -> f64 {
    let s = 10f64.powi(places);
    (v * s).round() / s
}

#[test]
fn published_table_as_regression_fixture() {
    let m = compute_metrics(&ConfusionMatrix::from_counts(TABLE_FIXTURE).unwrap()).unwrap();
    // (class, precision, sensitivity, f1, specificity in percent)
    let table = [
        (Class::GrayLeafSpot, 0.89, 0.97, 0.93, 95.47),
        (Class::CommonRust, 0.99, 0.94, 0.96, 99.57),
        (Class::NorthernLeafBlight, 0.97, 0.92, 0.94, 98.00),
    ];
    for (c, p, s, f, sp) in table {
        let g = &m[c.index()];
        assert_eq!(round_to(g.precision, 2), p, "{c} precision");
        assert_eq!(round_to(g.sensitivity, 2), s, "{c} sensitivity");
        assert_eq!(round_to(g.f1, 2), f, "{c} f1");
        assert_eq!(round_to(100.0 * g.specificity, 2), sp, "{c} specificity");
    }
    let h = &m[Class::Healthy.index()];
    assert_eq!((round_to(h.precision, 2), round_to(h.sensitivity, 2), round_to(h.f1, 2)), (1.0, 1.0, 1.0));
    // Precision 1.00 forces zero false positives, so specificity is exactly
    // 1 and the published 99.57 cannot be matched alongside it.
    assert_eq!(h.specificity, 1.0);
}

fn samples_per_class(n: usize) -> Vec<Sample> {
    Class::ALL
        .iter()
        .flat_map(|&class| {
            (0..n).map(move |i| Sample {
                path: format!("unused/{}/{i}.png", class.name()).into(),
                class,
                forced_augment: false,
            })
        })
        .collect()
}

/// Drives the accumulation path without touching the file system: the
/// logit source only looks at the labels.
fn confusion_from(n: usize, mut logits: impl FnMut(&[Class]) -> Tensor) -> ConfusionMatrix {
    let loader = BatchLoader::new(samples_per_class(n), 32).unwrap();
    let mut cm = ConfusionMatrix::new();
    for chunk in loader.samples().chunks(32) {
        let classes: Vec<Class> = chunk.iter().map(|s| s.class).collect();
        cm.record_logits(&logits(&classes), &classes).unwrap();
    }
    cm
}

#[test]
fn label_oracle_gives_scaled_identity() {
    let cm = confusion_from(7, one_hot);
    for (i, row) in cm.counts().iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            assert_eq!(v, if i == j { 7 } else { 0 });
        }
    }
    assert_eq!(cm.accuracy(), 1.0);
}

#[test]
fn uniform_random_predictor_near_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let cm = confusion_from(250, |classes| Tensor::from_fn([classes.len(), 4], |_| rng.random::<f32>()));
    assert_eq!(cm.total(), 1000);
    // Binomial(1000, 1/4): σ ≈ 0.0137, so ±0.05 is more than 3.6σ.
    assert!((cm.accuracy() - 0.25).abs() <= 0.05, "accuracy {}", cm.accuracy());
    for c in 0..4 {
        assert_eq!(cm.row_sum(c), 250);
    }
}

#[test]
fn evaluate_with_surfaces_missing_images() {
    let loader = BatchLoader::new(samples_per_class(1), 4).unwrap();
    let err = evaluate_with(&loader, |b| Ok(b.labels.clone())).unwrap_err();
    assert!(err.to_string().contains("unused"), "{err}");
}
