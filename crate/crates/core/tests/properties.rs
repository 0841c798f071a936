use modelwatch_core::client::FnModel;
use modelwatch_core::drift::{correct_bonferroni, correct_fdr_bh, ks_statistic, mmd2_unbiased, permutation_pvalue, rbf};
use modelwatch_core::explain::{anchor_search, coverage, discretize, estimate_precision, ExplainError, ExplainerConfig};
use modelwatch_core::model::{validate_record, FeatureSchema, FeatureSpec, RawValue, Record, ReferenceSet, Target, Value};
use modelwatch_core::outlier::{KnnDetector, MahalanobisState};
use modelwatch_core::performance::{classification_report, ConfusionMatrix, PerformanceState};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn points(dim: usize, max: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-10.0f64..10.0, dim), 2..max)
}

fn naive_mmd(x: &[Vec<f64>], y: &[Vec<f64>], s2: f64) -> f64 {
    let (n, m) = (x.len() as f64, y.len() as f64);
    let mut xx = 0.0;
    for (i, a) in x.iter().enumerate() {
        for (j, b) in x.iter().enumerate() {
            if i != j {
                xx += rbf(a, b, s2);
            }
        }
    }
    let mut yy = 0.0;
    for (i, a) in y.iter().enumerate() {
        for (j, b) in y.iter().enumerate() {
            if i != j {
                yy += rbf(a, b, s2);
            }
        }
    }
    let mut xy = 0.0;
    for a in x {
        for b in y {
            xy += rbf(a, b, s2);
        }
    }
    xx / (n * (n - 1.0)) + yy / (m * (m - 1.0)) - 2.0 * xy / (n * m)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ks_symmetric(a in prop::collection::vec(-100.0f64..100.0, 1..60), b in prop::collection::vec(-100.0f64..100.0, 1..60)) {
        prop_assert_eq!(ks_statistic(&a, &b).unwrap(), ks_statistic(&b, &a).unwrap());
    }

    #[test]
    fn ks_invariant_under_increasing_transform(a in prop::collection::vec(-5.0f64..5.0, 1..60), b in prop::collection::vec(-5.0f64..5.0, 1..60)) {
        let f = |v: &Vec<f64>| v.iter().map(|x| x.exp() * 3.0 + 1.0).collect::<Vec<_>>();
        let d = ks_statistic(&a, &b).unwrap();
        let dt = ks_statistic(&f(&a), &f(&b)).unwrap();
        prop_assert!((d - dt).abs() < 1e-12);
    }

    #[test]
    fn mmd_matches_double_loop(x in points(3, 50), y in points(3, 50), s2 in 0.1f64..50.0) {
        let fast = mmd2_unbiased(&x, &y, s2).unwrap();
        prop_assert!((fast - naive_mmd(&x, &y, s2)).abs() <= 1e-12);
    }

    #[test]
    fn mmd_invariant_under_within_sample_permutation(x in points(2, 30), y in points(2, 30), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut xp, mut yp) = (x.clone(), y.clone());
        xp.shuffle(&mut rng);
        yp.shuffle(&mut rng);
        let a = mmd2_unbiased(&x, &y, 2.0).unwrap();
        let b = mmd2_unbiased(&xp, &yp, 2.0).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn permutation_pvalue_reproducible_and_bounded(
        x in prop::collection::vec(-3.0f64..3.0, 2..25),
        y in prop::collection::vec(-3.0f64..3.0, 2..25),
        n_perm in 1usize..60,
        seed in any::<u64>(),
    ) {
        let stat = |a: &[f64], b: &[f64]| ks_statistic(a, b).unwrap();
        let p1 = permutation_pvalue(&x, &y, stat, n_perm, seed);
        let p2 = permutation_pvalue(&x, &y, stat, n_perm, seed);
        prop_assert_eq!(p1.to_bits(), p2.to_bits());
        prop_assert!(p1 >= 1.0 / (1.0 + n_perm as f64) && p1 <= 1.0);
    }

    #[test]
    fn bonferroni_subset_of_bh(ps in prop::collection::vec(0.0f64..=1.0, 1..40), alpha in 0.001f64..0.5) {
        let bonf = correct_bonferroni(&ps, alpha);
        let bh = correct_fdr_bh(&ps, alpha);
        for (b, h) in bonf.iter().zip(&bh) {
            prop_assert!(!b || *h);
        }
    }

    #[test]
    fn confusion_totals_and_accuracy(pairs in prop::collection::vec((0u64..4, 0u64..4), 1..300)) {
        let mut m = ConfusionMatrix::new(4);
        for &(p, t) in &pairs {
            m.ingest(p, t).unwrap();
        }
        let sum: u64 = m.rows().iter().flatten().sum();
        prop_assert_eq!(sum, pairs.len() as u64);
        let snap = classification_report(&m, 0).unwrap();
        prop_assert_eq!(snap.value("accuracy").unwrap(), m.trace() as f64 / m.total() as f64);
    }

    #[test]
    fn report_equals_recomputation_from_log(pairs in prop::collection::vec((0u64..3, 0u64..3), 1..200)) {
        let mut state = PerformanceState::classification(3);
        for &(p, t) in &pairs {
            state.ingest(Target::Class(p), Target::Class(t)).unwrap();
        }
        let PerformanceState::Classification(m) = &state else { unreachable!() };
        let snap = classification_report(m, 0).unwrap();
        let correct = pairs.iter().filter(|(p, t)| p == t).count() as f64;
        prop_assert_eq!(snap.value("accuracy").unwrap(), correct / pairs.len() as f64);
        let mut f1s = Vec::new();
        for c in 0..3u64 {
            let tp = pairs.iter().filter(|&&(p, t)| p == c && t == c).count() as f64;
            let pred = pairs.iter().filter(|&&(p, _)| p == c).count() as f64;
            let truth = pairs.iter().filter(|&&(_, t)| t == c).count() as f64;
            let prec = (pred > 0.0).then(|| tp / pred);
            let rec = (truth > 0.0).then(|| tp / truth);
            prop_assert_eq!(snap.values[&format!("precision_{c}")], prec);
            prop_assert_eq!(snap.values[&format!("recall_{c}")], rec);
            if let (Some(p), Some(r)) = (prec, rec) {
                let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
                let got = snap.values[&format!("f1_{c}")].unwrap();
                prop_assert!((got - f).abs() < 1e-12);
                f1s.push(f);
            }
        }
        if !f1s.is_empty() {
            let mac = f1s.iter().sum::<f64>() / f1s.len() as f64;
            prop_assert!((snap.value("macro_f1").unwrap() - mac).abs() < 1e-12);
        }
    }

    #[test]
    fn online_covariance_matches_batch(stream in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 3), 2..120)) {
        let mut s = MahalanobisState::new(3, 1e-6);
        for x in &stream {
            s.update(x).unwrap();
        }
        let n = stream.len() as f64;
        let mean: Vec<f64> = (0..3).map(|j| stream.iter().map(|x| x[j]).sum::<f64>() / n).collect();
        let cov = s.covariance().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let batch = stream.iter().map(|x| (x[i] - mean[i]) * (x[j] - mean[j])).sum::<f64>() / (n - 1.0);
                let scale = batch.abs().max(1.0);
                prop_assert!((cov[i * 3 + j] - batch).abs() <= 1e-8 * scale, "{} vs {}", cov[i * 3 + j], batch);
            }
        }
    }

    #[test]
    fn mahalanobis_affine_invariant(seed in any::<u64>(), a in prop::array::uniform4(-3.0f64..3.0), shift in prop::array::uniform2(-100.0f64..100.0)) {
        let det = a[0] * a[3] - a[1] * a[2];
        prop_assume!(det.abs() > 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<Vec<f64>> = (0..60).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-1.0..3.0)]).collect();
        let query = vec![rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
        let t = |x: &Vec<f64>| vec![a[0] * x[0] + a[1] * x[1] + shift[0], a[2] * x[0] + a[3] * x[1] + shift[1]];
        let mut s1 = MahalanobisState::new(2, 0.0);
        let mut s2 = MahalanobisState::new(2, 0.0);
        for x in &data {
            s1.update(x).unwrap();
            s2.update(&t(x)).unwrap();
        }
        let d1 = s1.score(&query).unwrap();
        let d2 = s2.score(&t(&query)).unwrap();
        prop_assert!((d1 - d2).abs() <= 1e-6 * d1.max(1.0), "{d1} vs {d2}");
    }

    #[test]
    fn knn_zero_iff_k_coincident(dups in 0usize..6, seed in any::<u64>()) {
        let k = 3;
        let schema = FeatureSchema::new(vec![FeatureSpec::numerical("a"), FeatureSpec::numerical("b")]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = [0.25, -0.75];
        let mut rows: Vec<Record> = (0..30)
            .map(|_| rec2(&schema, rng.random_range(1.0..5.0), rng.random_range(1.0..5.0)))
            .collect();
        for _ in 0..dups {
            rows.push(rec2(&schema, target[0], target[1]));
        }
        let det = KnnDetector::fit(&ReferenceSet::new(schema.clone(), rows).unwrap(), k).unwrap();
        let s = det.score(&rec2(&schema, target[0], target[1])).unwrap();
        prop_assert_eq!(s == 0.0, dups >= k);
        let nudged = det.score(&rec2(&schema, target[0] + 1e-9, target[1])).unwrap();
        prop_assert!((nudged - s).abs() < 1e-6);
    }
}

fn rec2(schema: &FeatureSchema, a: f64, b: f64) -> Record {
    validate_record(&[RawValue::Number(a), RawValue::Number(b)], schema).unwrap()
}

fn anchor_fixture(seed: u64) -> (ReferenceSet, Record) {
    let schema = FeatureSchema::new(vec![
        FeatureSpec::numerical("x0"),
        FeatureSpec::numerical("x1"),
        FeatureSpec::numerical("x2"),
        FeatureSpec::categorical("c", ["a", "b", "c"]),
    ])
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cats = ["a", "b", "c"];
    let row = |rng: &mut ChaCha8Rng| {
        validate_record(
            &[
                RawValue::Number(rng.random()),
                RawValue::Number(rng.random()),
                RawValue::Number(rng.random()),
                cats[rng.random_range(0..3)].into(),
            ],
            &schema,
        )
        .unwrap()
    };
    let records = (0..300).map(|_| row(&mut rng)).collect();
    let instance = row(&mut rng);
    (ReferenceSet::new(schema, records).unwrap(), instance)
}

fn conjunction_model(r: &Record) -> Vec<f64> {
    let x = |i: usize| r.get(i).and_then(Value::as_f64).unwrap();
    let hit = x(0) > 0.4 && x(1) < 0.7 && r.get(3).and_then(Value::as_token) != Some("c");
    if hit {
        vec![0.1, 0.9]
    } else {
        vec![0.9, 0.1]
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn coverage_non_increasing_and_full_anchor_exact(seed in any::<u64>()) {
        let (reference, instance) = anchor_fixture(seed);
        let preds = discretize(&instance, &reference);
        let mut prev = coverage(&[], &reference);
        for i in 1..=preds.len() {
            let c = coverage(&preds[..i], &reference);
            prop_assert!(c <= prev);
            prev = c;
        }
        let model = FnModel(conjunction_model);
        let target = modelwatch_core::explain::predicted_class(&conjunction_model(&instance)).unwrap();
        let full = estimate_precision(&preds, &instance, target, &model, &reference, 100, seed).unwrap();
        prop_assert_eq!(full.precision, 1.0);
    }

    #[test]
    fn queries_never_exceed_budget(seed in any::<u64>(), budget in 1usize..3000, n_samples in 1usize..200) {
        use std::sync::atomic::{AtomicUsize, Ordering};
        use modelwatch_core::client::{ModelClient, ModelError};
        struct Counting(AtomicUsize);
        impl ModelClient for Counting {
            fn predict(&self, rs: &[Record]) -> Result<Vec<Vec<f64>>, ModelError> {
                self.0.fetch_add(rs.len(), Ordering::SeqCst);
                Ok(rs.iter().map(conjunction_model).collect())
            }
        }
        let (reference, instance) = anchor_fixture(seed);
        let model = Counting(AtomicUsize::new(0));
        let config = ExplainerConfig { budget, n_samples, seed, ..ExplainerConfig::default() };
        let used = match anchor_search(&instance, &model, &reference, &config) {
            Ok(e) => Some(e.queries_used),
            Err(ExplainError::BudgetExhausted(e)) => Some(e.queries_used),
            Err(ExplainError::BudgetTooSmall { .. }) => None,
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        let issued = model.0.load(Ordering::SeqCst);
        prop_assert!(issued <= budget);
        if let Some(u) = used {
            prop_assert_eq!(u, issued);
        }
    }
}

#[test]
fn precision_non_decreasing_in_expectation() {
    let model = FnModel(conjunction_model);
    let trials = 40;
    let mut sums = Vec::new();
    let mut counted = 0;
    for seed in 0..200u64 {
        let (reference, instance) = anchor_fixture(seed);
        let target = modelwatch_core::explain::predicted_class(&conjunction_model(&instance)).unwrap();
        if target != 1 {
            continue;
        }
        let preds = discretize(&instance, &reference);
        let order = [0usize, 1, 3, 2];
        let row: Vec<f64> = (0..=order.len())
            .map(|i| {
                let anchor: Vec<_> = order[..i].iter().map(|&j| preds[j].clone()).collect();
                estimate_precision(&anchor, &instance, target, &model, &reference, 200, seed).unwrap().precision
            })
            .collect();
        if sums.is_empty() {
            sums = vec![0.0; row.len()];
        }
        for (s, p) in sums.iter_mut().zip(&row) {
            *s += p;
        }
        counted += 1;
        if counted == trials {
            break;
        }
    }
    assert_eq!(counted, trials);
    for w in sums.windows(2) {
        assert!(w[1] + 1e-9 >= w[0], "{sums:?}");
    }
}
