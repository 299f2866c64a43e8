//! Acceptance checks, one line per criterion. Run with
//! `cargo test -p exitaudit --test acceptance`.

mod common;

use std::time::Instant;

use exitaudit::analysis::{js_divergence, LossView, DEFAULT_BINS, DEFAULT_EPSILON};
use exitaudit::attacks::{
    adaptive_exit_classifier, asr_of, build_attack_dataset, train_attack_model, AttackMode, ExitSource,
    RecordOptions,
};
use exitaudit::data::{shifted_variant, split_four, synth_generate, SynthConfig};
use exitaudit::defense::{
    delayed_batch, observe_defended, timeguard_delay, tradeoff_sweep, AttackSuite, DefenseMode, SecretSeed,
    TimeGuardConfig, TradeoffTable,
};
use exitaudit::nn::{Architecture, MultiExitModel, TrainConfig};
use exitaudit::pipeline::{perturb_config, train_model, AsrPair, ExperimentConfig, LabelOnlyRun, Splits, TrainedAttack};
use exitaudit::seed::{child_rng, derive_seed, rng_from};
use exitaudit::timing::{plan_queries, steal_exit_depths, steal_from_trace, TimingModel};
use rand::Rng;
use rand_distr::StandardNormal;

const SEEDS: u64 = 5;
const EXITS: std::ops::RangeInclusive<usize> = 1..=6;
/// Architecture used where a single multi-exit target is needed.
const DEFAULT_EXITS: usize = 4;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn arch(cfg: &ExperimentConfig, d: usize, k: usize, width: usize, n_exits: usize) -> Architecture {
    Architecture {
        head_hidden: cfg.model.head_hidden,
        ..Architecture::new(d, k, width, cfg.model.n_blocks, n_exits)
    }
}

/// One target/shadow pair of the shared grid.
struct Cell {
    n_exits: usize,
    target: MultiExitModel,
    shadow: MultiExitModel,
    score: AsrPair,
    label_only: AsrPair,
    js_depth: Option<f64>,
    js_overall: f64,
    ratios: Vec<Option<f64>>,
    adaptive: Option<(f64, f64)>,
    attack: TrainedAttack,
}

struct SeedRun {
    seed: u64,
    cfg: ExperimentConfig,
    splits: Splits,
    shifted: Splits,
    cells: Vec<Cell>,
}

impl SeedRun {
    fn cell(&self, n_exits: usize) -> &Cell {
        self.cells.iter().find(|c| c.n_exits == n_exits).expect("grid cell")
    }
}

fn run_seed(seed: u64) -> SeedRun {
    let cfg = ExperimentConfig { seed, ..Default::default() };
    let synth = cfg.dataset.synth(derive_seed(seed, "data")).unwrap();
    let ds = synth_generate(&synth).unwrap();
    let split = split_four(ds.len(), derive_seed(seed, "split")).unwrap();
    let splits = Splits::new(&ds, &split);
    let shifted = Splits::new(&shifted_variant(&synth, derive_seed(seed, "shift")).unwrap(), &split);
    let tau = cfg.fixed_tau().expect("preset tau");
    let (d, k) = (ds.n_features(), ds.n_classes);
    let master = derive_seed(seed, "models");
    let atk_cfg = cfg.attack.train_config(derive_seed(seed, "attack-score"));
    let a = &cfg.attack;
    let perturb = perturb_config(&splits.shadow_train, a.perturb_directions, a.bisection_steps, derive_seed(seed, "label-only"));
    let probes = splits.shadow_probes(cfg.adversary.n_probes);

    let mut cells = Vec::new();
    for n_exits in EXITS {
        let t = if n_exits == 1 { 1.0 } else { tau };
        let ar = arch(&cfg, d, k, cfg.model.width, n_exits);
        let (target, _) = train_model(ar.clone(), t, &splits.target_train, &cfg.training, master, &format!("target-{n_exits}")).unwrap();
        let (shadow, _) = train_model(ar, t, &splits.shadow_train, &cfg.training, master, &format!("shadow-{n_exits}")).unwrap();
        let attack =
            TrainedAttack::fit(&shadow, &splits.shadow_train, &splits.shadow_test, AttackMode::ScoreBased, &atk_cfg).unwrap();
        let score = if n_exits == 1 {
            let v = attack.evaluate_original(&target, &splits.target_train, &splits.target_test).unwrap();
            AsrPair { original: v, hybrid: v }
        } else {
            attack.evaluate(&target, &splits.target_train, &splits.target_test, &ExitSource::Direct).unwrap()
        };
        let lo = LabelOnlyRun::measure(
            &shadow,
            &splits.shadow_train,
            &splits.shadow_test,
            &target,
            &splits.target_train,
            &splits.target_test,
            a.label_only_samples,
            perturb.clone(),
        )
        .unwrap();
        let label_only = lo.asr(None).unwrap();
        let view = LossView::from_model(&target, &splits.target_train, &splits.target_test).unwrap();
        let adaptive = (n_exits > 1).then(|| {
            let tc = TrainConfig { epochs: a.epochs, seed: derive_seed(seed, "exit-classifier"), ..Default::default() };
            let c = adaptive_exit_classifier(&shadow, probes.view(), &tc).unwrap();
            (c.holdout_accuracy, c.majority_baseline)
        });
        cells.push(Cell {
            n_exits,
            score,
            label_only,
            js_depth: view.per_exit_js().depth_correlation(),
            js_overall: view.js().unwrap(),
            ratios: view.nonmember_ratio(),
            adaptive,
            target,
            shadow,
            attack,
        });
    }
    SeedRun { seed, cfg, splits, shifted, cells }
}

fn c1_gradients() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..20 {
        let (mut m, x, y) = common::random_small_model(1000 + seed);
        let r = common::check_all_gradients(&mut m, &x, &y, 1e-4);
        worst = worst.max(r.max_rel_err);
        checked += r.checked;
    }
    outcome(worst < 1e-4 && checked > 0, format!("20 models, {checked} coordinates, max rel err {worst:.2e}"))
}

fn c2_planner() -> Outcome {
    let closed = |dt: f64, s: f64| -> u64 {
        let v = 2.0 * (1.96 * s / dt).powi(2);
        (v.ceil() as u64).max(1)
    };
    let n = |dt: f64, s: f64| plan_queries(dt, s, 0.95).unwrap().n_required;
    let spot = (n(3.0, 10.0), n(11.0, 10.0));
    let dts: Vec<f64> = (1..=20).map(|i| 0.75 * i as f64).collect();
    let sigmas: Vec<f64> = (0..20).map(|i| 2.0 * i as f64).collect();
    let mut exact = true;
    let mut monotone = true;
    for (i, &dt) in dts.iter().enumerate() {
        for (j, &s) in sigmas.iter().enumerate() {
            exact &= n(dt, s) == closed(dt, s);
            if i > 0 {
                monotone &= n(dt, s) <= n(dts[i - 1], s);
            }
            if j > 0 {
                monotone &= n(dt, s) >= n(dt, sigmas[j - 1]);
            }
        }
    }
    outcome(
        spot == (86, 7) && exact && monotone,
        format!("N(3,10)={} N(11,10)={}, closed form {exact}, monotone {monotone}", spot.0, spot.1),
    )
}

fn c3_clean_stealing(grid: &[SeedRun]) -> Outcome {
    let mut worst_acc: f64 = 1.0;
    let mut failures = Vec::new();
    let mut runs = 0;
    for task in ["purchases", "locations", "texas"] {
        let cfg = ExperimentConfig { seed: 0, ..Default::default() };
        let tau = SynthConfig::preset_tau(task).unwrap();
        let owned;
        let (splits, models): (&Splits, Vec<(usize, &MultiExitModel)>) = if task == "purchases" {
            let r = &grid[0];
            (&r.splits, r.cells.iter().filter(|c| c.n_exits > 1).map(|c| (c.n_exits, &c.target)).collect())
        } else {
            let synth = SynthConfig::preset(task, derive_seed(0, "data")).unwrap();
            let ds = synth_generate(&synth).unwrap();
            let sp = Splits::new(&ds, &split_four(ds.len(), derive_seed(0, "split")).unwrap());
            let master = derive_seed(0, "models");
            let ms: Vec<(usize, MultiExitModel)> = (2..=6)
                .map(|e| {
                    let ar = arch(&cfg, ds.n_features(), ds.n_classes, cfg.model.width, e);
                    (e, train_model(ar, tau, &sp.target_train, &cfg.training, master, &format!("target-{e}")).unwrap().0)
                })
                .collect();
            owned = (sp, ms);
            (&owned.0, owned.1.iter().map(|(e, m)| (*e, m)).collect())
        };
        let probes = splits.shadow_probes(2000);
        for (e, m) in models {
            let timing = TimingModel::for_model(m, 0.0, 0.0).unwrap();
            let r = steal_exit_depths(&timing, m, probes.view(), 1, &mut child_rng(0, "steal-channel")).unwrap();
            runs += 1;
            worst_acc = worst_acc.min(r.accuracy);
            if r.predicted_n_exits != e || r.accuracy < 0.99 {
                failures.push(format!("{task}/{e}: {} exits, acc {:.4}, unobserved {:?}", r.predicted_n_exits, r.accuracy, r.unobserved_exits));
            }
        }
    }
    let mut d = format!("{runs} models, min accuracy {worst_acc:.4}");
    if !failures.is_empty() {
        d += &format!("; {}", failures.join("; "));
    }
    outcome(failures.is_empty() && runs == 15, d)
}

fn c4_vanilla_vs_multi(grid: &[SeedRun]) -> Outcome {
    let vanilla: Vec<f64> = grid.iter().map(|r| r.cell(1).score.original).collect();
    let multi: Vec<f64> =
        grid.iter().map(|r| mean(&r.cells.iter().filter(|c| c.n_exits > 1).map(|c| c.score.original).collect::<Vec<_>>())).collect();
    let (v, m) = (mean(&vanilla), mean(&multi));
    outcome(v - m >= 0.02, format!("vanilla {v:.4}, multi-exit {m:.4}, gap {:.4}", v - m))
}

fn c5_hybrid_gain(grid: &[SeedRun]) -> Outcome {
    let mut worst = f64::INFINITY;
    let mut gains = Vec::new();
    for r in grid {
        for c in r.cells.iter().filter(|c| c.n_exits > 1) {
            for p in [c.score, c.label_only] {
                worst = worst.min(p.hybrid - p.original);
                gains.push(p.hybrid - p.original);
            }
        }
    }
    let g = mean(&gains);
    outcome(worst >= -0.01 && g > 0.0, format!("{} runs, worst gain {worst:.4}, mean gain {g:.4}", gains.len()))
}

fn c6_js(grid: &[SeedRun]) -> Outcome {
    let p: Vec<f64> = {
        let mut rng = rng_from(61);
        (0..5000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    };
    let same = js_divergence(&p, &p, DEFAULT_BINS, DEFAULT_EPSILON).unwrap();
    let q: Vec<f64> = p.iter().map(|v| v + 100.0).collect();
    let disjoint = js_divergence(&p.iter().map(|v| v.abs()).collect::<Vec<_>>(), &q, DEFAULT_BINS, DEFAULT_EPSILON).unwrap();
    let oracle = js_quadrature(3.0);
    let gauss = {
        let mut rng = rng_from(62);
        let a: Vec<f64> = (0..100_000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let b: Vec<f64> = (0..100_000).map(|_| 3.0 + rng.sample::<f64, _>(StandardNormal)).collect();
        js_divergence(&a, &b, DEFAULT_BINS, DEFAULT_EPSILON).unwrap()
    };
    let depth: Vec<f64> = grid.iter().filter_map(|r| r.cell(6).js_depth).collect();
    let rho = if depth.is_empty() { f64::NAN } else { mean(&depth) };
    let pass = same == 0.0 && (disjoint - 1.0).abs() <= 1e-9 && (gauss - oracle).abs() < 0.01 && rho > 0.0;
    outcome(
        pass,
        format!(
            "JS(P,P)={same}, disjoint {disjoint:.12}, gaussians {gauss:.4} vs {oracle:.4}, depth Spearman {rho:.3} over {} seeds",
            depth.len()
        ),
    )
}

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

fn c7_ratios(grid: &[SeedRun]) -> Outcome {
    let mut wins = 0;
    let mut pairs = Vec::new();
    let mut worst_identity: f64 = 0.0;
    for r in grid {
        for c in r.cells.iter().filter(|c| c.n_exits > 1) {
            // population-weighted mean of the ratios over a balanced stack
            let exits = exitaudit::attacks::build_attack_dataset(
                &c.target,
                &r.splits.target_train,
                &r.splits.target_test,
                &ExitSource::None,
                RecordOptions::default(),
            )
            .unwrap()
            .taken_exit;
            let w: f64 = (0..c.n_exits)
                .map(|e| c.ratios[e].unwrap_or(0.0) * exits.iter().filter(|&&x| x == e).count() as f64)
                .sum::<f64>()
                / exits.len() as f64;
            worst_identity = worst_identity.max((w - 0.5).abs());
        }
        let c = r.cell(DEFAULT_EXITS);
        let (first, last) = (c.ratios[0], c.ratios[c.n_exits - 1]);
        pairs.push(format!("{:.3}/{:.3}", first.unwrap_or(f64::NAN), last.unwrap_or(f64::NAN)));
        if let (Some(f), Some(l)) = (first, last) {
            wins += usize::from(l > f);
        }
    }
    outcome(
        wins >= 4 && worst_identity <= 1e-9,
        format!("last > first in {wins}/5 seeds (first/last {}), weighted mean off by {worst_identity:.1e}", pairs.join(" ")),
    )
}

fn secret() -> SecretSeed {
    SecretSeed::from_bytes(*b"acceptance-timeguard-secret-0001")
}

const SWEEP: [f64; 6] = [0.0, 2.0, 5.0, 10.0, 20.0, 40.0];

fn sweep_seed(r: &SeedRun) -> TradeoffTable {
    let c = r.cell(DEFAULT_EXITS);
    let timing = TimingModel::for_model(&c.target, 0.0, 0.0).unwrap();
    let suite = AttackSuite {
        hybrid: &c.attack.hybrid,
        original_asr: c.score.original,
        members: &r.splits.target_train,
        nonmembers: &r.splits.target_test,
        timing: &timing,
        n_queries: 1,
        seed: derive_seed(r.seed, "sweep"),
    };
    tradeoff_sweep(&c.target, &suite, &SWEEP, &secret()).unwrap()
}

fn c8_timeguard(grid: &[SeedRun]) -> Outcome {
    let r = &grid[0];
    let c = r.cell(DEFAULT_EXITS);
    let timing = TimingModel::for_model(&c.target, 0.0, 0.0).unwrap();
    let cfg = TimeGuardConfig::new(10.0, DefenseMode::GaussianDelay, secret()).unwrap();
    let mut deterministic = true;
    for row in 0..20 {
        let x = r.splits.target_test.features.row(row).to_vec();
        let first = timeguard_delay(&x, &c.target, &timing, &cfg).unwrap();
        deterministic &= (0..100).all(|_| timeguard_delay(&x, &c.target, &timing, &cfg).unwrap() == first);
    }
    let zero = TimeGuardConfig::new(0.0, DefenseMode::GaussianDelay, secret()).unwrap();
    let (delayed, exits) = delayed_batch(r.splits.target_test.view(), &c.target, &timing, &zero).unwrap();
    let identity = delayed.iter().zip(&exits).all(|(d, &e)| d.delay_time == timing.clean_time(e));

    let tables: Vec<TradeoffTable> = grid.iter().map(sweep_seed).collect();
    let avg = |f: &dyn Fn(&exitaudit::defense::TradeoffRow) -> f64| -> Vec<f64> {
        (0..SWEEP.len()).map(|i| mean(&tables.iter().map(|t| f(&t.rows[i])).collect::<Vec<_>>())).collect()
    };
    let asr = avg(&|row| row.hybrid_asr);
    let time = avg(&|row| row.mean_response_ms);
    let asr_ok = asr.windows(2).all(|w| w[1] <= w[0] + 0.02);
    let time_ok = time.windows(2).all(|w| w[1] >= w[0] - 0.02);
    let crossings: Vec<String> = tables
        .iter()
        .map(|t| match t.crossing_row() {
            Some(row) => format!("{}@{:.1}/{:.1}ms", row.sigma, row.mean_response_ms, t.max_delay_ms),
            None => "none".into(),
        })
        .collect();
    let crossing_ok =
        tables.iter().all(|t| t.crossing_row().is_some_and(|row| row.mean_response_ms < t.max_delay_ms));
    outcome(
        deterministic && identity && asr_ok && time_ok && crossing_ok,
        format!(
            "deterministic {deterministic}, sigma 0 identity {identity}, mean hybrid ASR {}, mean time {}, crossings {}",
            fmt_list(&asr),
            fmt_list(&time),
            crossings.join(" ")
        ),
    )
}

fn fmt_list(v: &[f64]) -> String {
    format!("[{}]", v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", "))
}

fn c9_max_delay(grid: &[SeedRun]) -> Outcome {
    let mut single = true;
    for r in grid {
        for c in r.cells.iter().filter(|c| c.n_exits > 1) {
            let timing = TimingModel::for_model(&c.target, 0.0, 0.0).unwrap();
            let cfg = TimeGuardConfig::new(0.0, DefenseMode::MaxDelay, secret()).unwrap();
            let (x, _) = r.splits.target_eval();
            let (delayed, exits) = delayed_batch(x.view(), &c.target, &timing, &cfg).unwrap();
            let trace = observe_defended(&delayed, &exits, &timing, 1, &mut rng_from(r.seed)).unwrap();
            single &= steal_from_trace(trace, c.n_exits, 8).unwrap().predicted_n_exits == 1;
        }
    }
    let acc: Vec<f64> = (2..=6)
        .map(|e| mean(&grid.iter().map(|r| r.cell(e).adaptive.unwrap().0).collect::<Vec<_>>()))
        .collect();
    let above_chance = acc[0] > 0.5;
    let declines = acc[4] < acc[0];
    let majority: Vec<f64> = (2..=6)
        .map(|e| mean(&grid.iter().map(|r| r.cell(e).adaptive.unwrap().1).collect::<Vec<_>>()))
        .collect();
    outcome(
        single && above_chance && declines,
        format!(
            "max-delay single cluster {single}; adaptive accuracy 2..6 exits {} (majority {})",
            fmt_list(&acc),
            fmt_list(&majority)
        ),
    )
}

fn c10_mismatched(grid: &[SeedRun]) -> Outcome {
    let mut width_wins = 0;
    let mut shift_wins = 0;
    let mut detail = Vec::new();
    for r in grid {
        let cfg = &r.cfg;
        let c = r.cell(DEFAULT_EXITS);
        let master = derive_seed(r.seed, "models");
        let (d, k) = (r.splits.target_train.n_features(), r.splits.target_train.n_classes);
        let atk_cfg = cfg.attack.train_config(derive_seed(r.seed, "attack-score"));
        let width = cfg.adversary.shadow_width.unwrap_or(cfg.model.width / 2);
        let (sw, _) = train_model(
            arch(cfg, d, k, width, DEFAULT_EXITS),
            c.target.tau,
            &r.splits.shadow_train,
            &cfg.training,
            master,
            "shadow-width",
        )
        .unwrap();
        let (ss, _) = train_model(
            arch(cfg, d, k, cfg.model.width, DEFAULT_EXITS),
            c.target.tau,
            &r.shifted.shadow_train,
            &cfg.training,
            master,
            "shadow-shifted",
        )
        .unwrap();
        let eval = |shadow: &MultiExitModel, sp: &Splits| {
            let atk =
                TrainedAttack::fit(shadow, &sp.shadow_train, &sp.shadow_test, AttackMode::ScoreBased, &atk_cfg).unwrap();
            atk.evaluate(&c.target, &r.splits.target_train, &r.splits.target_test, &ExitSource::Direct).unwrap()
        };
        let w = eval(&sw, &r.splits);
        let s = eval(&ss, &r.shifted);
        width_wins += usize::from(w.hybrid > w.original);
        shift_wins += usize::from(s.hybrid > s.original);
        detail.push(format!("{:.3}>{:.3} {:.3}>{:.3}", w.hybrid, w.original, s.hybrid, s.original));
    }
    outcome(
        width_wins >= 4 && shift_wins >= 4,
        format!("width {width_wins}/5, shifted {shift_wins}/5 (hybrid>original width, shifted: {})", detail.join("; ")),
    )
}

fn c11_null(grid: &[SeedRun]) -> Outcome {
    let r = &grid[0];
    let c = r.cell(DEFAULT_EXITS);
    let opts = RecordOptions::default();
    let shadow = build_attack_dataset(&c.shadow, &r.splits.shadow_train, &r.splits.shadow_test, &ExitSource::None, opts)
        .unwrap()
        .permuted_membership(derive_seed(r.seed, "permute"));
    let atk = train_attack_model(&shadow, AttackMode::ScoreBased, &r.cfg.attack.train_config(derive_seed(r.seed, "null")))
        .unwrap();
    let target =
        build_attack_dataset(&c.target, &r.splits.target_train, &r.splits.target_test, &ExitSource::None, opts).unwrap();
    let permuted = atk.asr(&target).unwrap();
    let mut rng = rng_from(derive_seed(r.seed, "coin"));
    let member: Vec<bool> = (0..2000).map(|i| i < 1000).collect();
    let coin: Vec<bool> = (0..2000).map(|_| rng.gen_bool(0.5)).collect();
    let flip = asr_of(&coin, &member);
    outcome(
        (permuted - 0.5).abs() <= 0.05 && (flip - 0.5).abs() <= 0.02,
        format!("permuted-label ASR {permuted:.4}, coin flip {flip:.4}"),
    )
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    results.push((1, "gradient correctness", c1_gradients()));
    results.push((2, "query planner", c2_planner()));

    let grid: Vec<SeedRun> = (0..SEEDS)
        .map(|s| {
            let t = Instant::now();
            let r = run_seed(s);
            eprintln!("grid seed {s} done in {:.0}s", t.elapsed().as_secs_f64());
            r
        })
        .collect();
    let summary: Vec<String> = grid
        .iter()
        .flat_map(|r| {
            r.cells.iter().map(move |c| {
                format!(
                    "seed {} exits {}: score {:.3}/{:.3} label-only {:.3}/{:.3} js {:.3}",
                    r.seed, c.n_exits, c.score.original, c.score.hybrid, c.label_only.original, c.label_only.hybrid, c.js_overall
                )
            })
        })
        .collect();
    for line in &summary {
        eprintln!("{line}");
    }

    type Check = fn(&[SeedRun]) -> Outcome;
    let checks: [(u32, &str, Check); 9] = [
        (3, "clean-channel exit stealing", c3_clean_stealing),
        (4, "multi-exit below vanilla", c4_vanilla_vs_multi),
        (5, "hybrid at least original", c5_hybrid_gain),
        (6, "JS machinery", c6_js),
        (7, "exit-population asymmetry", c7_ratios),
        (8, "TimeGuard trade-off", c8_timeguard),
        (9, "max-delay and score-only stealing", c9_max_delay),
        (10, "mismatched shadow", c10_mismatched),
        (11, "null signal", c11_null),
    ];
    for (id, name, f) in checks {
        let t = Instant::now();
        let o = f(&grid);
        eprintln!("criterion {id} took {:.0}s", t.elapsed().as_secs_f64());
        results.push((id, name, o));
    }

    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (id, name, o) in &results {
        println!("{} #{id} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed in {:.0}s", results.len() - failed, results.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
