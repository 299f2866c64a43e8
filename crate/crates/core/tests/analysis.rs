use exitaudit::analysis::{
    histogram_pair, js_divergence, nonmember_ratio, overfitting_gap, per_exit_js, spearman, AuditReport,
    ExitStealSummary, LossView, DEFAULT_BINS, DEFAULT_EPSILON, REPORT_SCHEMA_VERSION,
};
use exitaudit::data::{synth_generate, SynthConfig, TabularDataset};
use exitaudit::defense::{TradeoffRow, TradeoffTable};
use exitaudit::nn::{train_joint, Architecture, MultiExitModel, TrainConfig};
use exitaudit::seed::rng_from;
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn js(p: &[f64], q: &[f64]) -> f64 {
    js_divergence(p, q, DEFAULT_BINS, DEFAULT_EPSILON).unwrap()
}

fn gaussian(n: usize, mu: f64, seed: u64) -> Vec<f64> {
    let mut rng = rng_from(seed);
    (0..n).map(|_| mu + rng.sample::<f64, _>(StandardNormal)).collect()
}

/// JS divergence of N(0,1) and N(d,1) in bits by the trapezoid rule.
fn js_quadrature(d: f64) -> f64 {
    let pdf = |x: f64, m: f64| (-(x - m) * (x - m) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let (a, b, steps) = (-12.0, d + 12.0, 200_000);
    let h = (b - a) / steps as f64;
    let f = |x: f64| {
        let (p, q) = (pdf(x, 0.0), pdf(x, d));
        let m = (p + q) / 2.0;
        let t = |v: f64| if v > 0.0 { v * (v / m).log2() } else { 0.0 };
        0.5 * t(p) + 0.5 * t(q)
    };
    (0..=steps).map(|i| f(a + h * i as f64) * if i == 0 || i == steps { 0.5 } else { 1.0 }).sum::<f64>() * h
}

#[test]
fn identical_samples_have_zero_divergence() {
    let p = gaussian(1000, 2.0, 1);
    assert!(js(&p, &p).abs() < 1e-12);
}

#[test]
fn disjoint_supports_reach_one_bit() {
    let p: Vec<f64> = (0..500).map(|i| i as f64 * 0.001).collect();
    let q: Vec<f64> = (0..500).map(|i| 10.0 + i as f64 * 0.001).collect();
    assert!((js(&p, &q) - 1.0).abs() < 1e-9, "{}", js(&p, &q));
}

#[test]
fn two_gaussians_match_quadrature() {
    let oracle = js_quadrature(3.0);
    let est = js(&gaussian(100_000, 0.0, 2), &gaussian(100_000, 3.0, 3));
    assert!((est - oracle).abs() < 0.01, "{est} vs {oracle}");
}

#[test]
fn histogram_inputs_are_validated() {
    assert!(histogram_pair(&[], &[1.0], 10, 0.0).is_err());
    assert!(histogram_pair(&[1.0], &[1.0], 0, 0.0).is_err());
    assert!(histogram_pair(&[1.0], &[f64::NAN], 10, 0.0).is_err());
    let h = histogram_pair(&[0.5, 1.0], &[2.0, 100.0], 10, 1e-6).unwrap();
    assert_eq!(h.edges.len(), 11);
    assert_eq!(h.edges[0], 0.0);
}

#[test]
fn spearman_values() {
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 0.0]), Some(-1.0));
    assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
    // ranks with ties: x = (0.5, 0.5, 2), y = (0, 1, 2)
    let r = spearman(&[5.0, 5.0, 9.0], &[1.0, 2.0, 3.0]).unwrap();
    assert!((r - 0.75f64.sqrt()).abs() < 1e-12, "{r}");
}

#[test]
fn ratio_weighted_by_population_is_one_half() {
    let mut rng = rng_from(4);
    let n = 300;
    let exits: Vec<usize> = (0..2 * n).map(|_| rng.gen_range(0..4)).collect();
    let member: Vec<bool> = (0..2 * n).map(|i| i < n).collect();
    let ratios = nonmember_ratio(&exits, &member, 5);
    assert_eq!(ratios[4], None);
    let weighted: f64 = (0..4).map(|e| ratios[e].unwrap() * exits.iter().filter(|&&x| x == e).count() as f64).sum();
    assert!((weighted / (2 * n) as f64 - 0.5).abs() < 1e-12);
}

fn trained(n_exits: usize, tau: f64, ds: &TabularDataset, epochs: usize, seed: u64) -> MultiExitModel {
    let mut arch = Architecture::new(ds.n_features(), ds.n_classes, 64, 5, n_exits);
    arch.head_hidden = 16;
    let mut m = MultiExitModel::new(arch, tau, &mut rng_from(seed)).unwrap();
    train_joint(&mut m, ds.view(), &ds.labels, &TrainConfig { epochs, seed, ..Default::default() }).unwrap();
    m
}

#[test]
fn memorized_training_set_gives_a_gap_near_one() {
    let mut rng = rng_from(5);
    let k = 100;
    let train = TabularDataset::new(
        "mem",
        Array2::from_shape_fn((100, 200), |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }),
        (0..100).collect(),
        k,
    )
    .unwrap();
    let test = TabularDataset::new(
        "rand",
        Array2::from_shape_fn((1000, 200), |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }),
        (0..1000).map(|_| rng.gen_range(0..k)).collect(),
        k,
    )
    .unwrap();
    let m = trained(1, 1.0, &train, 150, 1);
    let train_acc = m.early_exit_accuracy(train.view(), &train.labels).unwrap();
    let test_acc = m.early_exit_accuracy(test.view(), &test.labels).unwrap();
    let gap = overfitting_gap(&m, &train, &test).unwrap();
    assert_eq!(gap, train_acc - test_acc);
    assert_eq!(train_acc, 1.0);
    assert!((gap - 0.99).abs() < 0.02, "{gap}");
    assert_eq!(overfitting_gap(&m, &test, &test).unwrap(), 0.0);
}

fn small_task(seed: u64) -> (TabularDataset, TabularDataset) {
    let cfg = SynthConfig { name: "t".into(), n_classes: 10, n_features: 80, samples_per_class: 40, flip_prob: 0.3, seed };
    let ds = synth_generate(&cfg).unwrap();
    let idx: Vec<usize> = (0..ds.len()).collect();
    (ds.subset(&idx[..200]), ds.subset(&idx[200..]))
}

#[test]
fn single_exit_model_has_one_js_bucket() {
    let (train, test) = small_task(6);
    let m = trained(1, 1.0, &train, 5, 2);
    let js = per_exit_js(&m, &train, &test).unwrap();
    assert_eq!(js.values.len(), 1);
    assert_eq!(js.member_counts[0], 200);
}

#[test]
fn final_exit_only_gives_a_single_even_ratio() {
    let (train, test) = small_task(7);
    let m = trained(3, 1.0, &train, 5, 3);
    let view = LossView::from_model(&m, &train, &test).unwrap();
    let r = view.nonmember_ratio();
    assert_eq!(r, vec![None, None, Some(0.5)]);
    assert!(view.js().unwrap() >= 0.0 && view.js().unwrap() <= 1.0);
}

fn arb_opt_f64() -> impl Strategy<Value = Option<f64>> {
    prop::option::of(-1e6f64..1e6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn js_is_symmetric_and_bounded(
        p in prop::collection::vec(0.0f64..50.0, 1..200),
        q in prop::collection::vec(0.0f64..50.0, 1..200),
    ) {
        let a = js(&p, &q);
        prop_assert_eq!(a, js(&q, &p));
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn histograms_sum_to_one(
        p in prop::collection::vec(-5.0f64..50.0, 1..100),
        q in prop::collection::vec(-5.0f64..50.0, 1..100),
        bins in 1usize..40,
    ) {
        let h = histogram_pair(&p, &q, bins, 1e-10).unwrap();
        prop_assert!((h.member_hist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!((h.nonmember_hist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert_eq!(h.member_hist.len(), bins + 1);
    }

    #[test]
    fn report_json_round_trip(
        asrs in prop::collection::vec(0.0f64..=1.0, 0..8),
        gap in arb_opt_f64(),
        js_overall in prop::option::of(0.0f64..1.0),
        ratios in prop::option::of(prop::collection::vec(prop::option::of(0.0f64..=1.0), 1..6)),
        steal in prop::option::of((1usize..7, 0.0f64..=1.0, 1usize..100)),
        sweep in prop::option::of(prop::collection::vec((0.0f64..50.0, 0.0f64..=1.0, 80.0f64..200.0), 1..5)),
        tau in 0.0f64..=1.0,
    ) {
        let arch = Architecture::new(30, 5, 16, 5, 3);
        let mut r = AuditReport::new("prop", arch, tau, vec![10, 20, 30]);
        for (i, a) in asrs.iter().enumerate() {
            r.push_asr("score", &format!("adv{i}"), if i % 2 == 0 { "original" } else { "hybrid" }, *a);
        }
        r.overfitting_gap = gap;
        r.js_overall = js_overall;
        r.nonmember_ratio = ratios;
        r.exit_steal = steal.map(|(n, acc, q)| ExitStealSummary {
            predicted_n_exits: n, accuracy: acc, n_queries: q, noise_sigma: 1.5, unobserved_exits: vec![],
        });
        r.defense = sweep.map(|rows| TradeoffTable {
            rows: rows.iter().map(|&(s, a, t)| TradeoffRow {
                sigma: s, hybrid_asr: a, original_asr: 0.6, mean_response_ms: t, predicted_n_exits: 2, exit_accuracy: 0.5,
            }).collect(),
            crossing_sigma: None,
            max_delay_ms: 200.0,
            epsilon: 0.01,
        });
        let back = AuditReport::from_json(&r.to_json().unwrap()).unwrap();
        prop_assert_eq!(back.schema_version, REPORT_SCHEMA_VERSION);
        prop_assert_eq!(back, r);
    }
}

#[test]
fn out_of_range_asr_is_rejected() {
    let mut r = AuditReport::new("x", Architecture::new(3, 2, 4, 2, 1), 0.5, vec![1]);
    r.push_asr("score", "a1", "original", 1.5);
    assert!(AuditReport::from_json(&r.to_json().unwrap()).is_err());
}
