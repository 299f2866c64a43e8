use std::path::Path;
use std::process::{Command, Output};

use exitaudit::analysis::AuditReport;
use exitaudit::defense::TradeoffTable;
use exitaudit::pipeline::{sha256_file, Manifest};

const SMALL: &str = r#"
seed = 3

[dataset]
source = "synthetic"
n_classes = 10
n_features = 60
samples_per_class = 80
flip_prob = 0.2

[model]
width = 24
head_hidden = 8
n_blocks = 5
n_exits = 3
tau = 0.7

[training]
epochs = 8

[attack]
epochs = 3
encoder_width = 16
head_widths = [32, 16, 8]
label_only_samples = 30
perturb_directions = 3
bisection_steps = 8

[adversary]
n_probes = 200
sigma_probes = 20

[defense]
sigma = 10.0
sweep_sigmas = [0.0, 5.0, 10.0, 20.0, 40.0]
"#;

fn exitaudit(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exitaudit"))
        .args(args)
        .current_dir(dir)
        .env("EXITAUDIT_TIMEGUARD_SECRET", "11".repeat(32))
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\n{}", o.status.code(), String::from_utf8_lossy(&o.stderr));
}

#[test]
fn full_pipeline_is_reproducible_and_fully_listed() {
    let dir = setup();
    let run = |out: &str| {
        for cmd in ["gen-data", "train", "audit", "steal", "defend", "sweep", "report"] {
            ok(&exitaudit(&["--config", "small.toml", "--out", out, "-q", cmd], dir.path()));
        }
    };
    run("a");
    run("b");
    let a = std::fs::read(dir.path().join("a/report/audit_report.json")).unwrap();
    let b = std::fs::read(dir.path().join("b/report/audit_report.json")).unwrap();
    assert_eq!(a, b);

    let report = AuditReport::from_json(std::str::from_utf8(&a).unwrap()).unwrap();
    for attack in ["score", "gradient", "label_only"] {
        for adv in ["a1_direct_exit", "a2_timing_exit", "a3_width", "a3_shifted"] {
            for variant in ["original", "hybrid"] {
                assert!(report.find_asr(attack, adv, variant).is_some(), "{attack} {adv} {variant}");
            }
        }
    }
    assert_eq!(report.defense.as_ref().unwrap().rows.len(), 5);

    let root = dir.path().join("a");
    let manifest = Manifest::load(&root).unwrap();
    assert!(manifest.verify(&root).unwrap().is_empty());
    let mut listed = std::collections::BTreeMap::new();
    for entry in manifest.commands.values() {
        for f in &entry.artifacts {
            listed.insert(f.path.clone(), f.sha256.clone());
        }
    }
    let mut files = Vec::new();
    let mut stack = vec![root.clone()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "manifest.json" {
                files.push(p);
            }
        }
    }
    assert!(files.len() >= 15);
    for p in files {
        let rel = p.strip_prefix(&root).unwrap().to_string_lossy().replace('\\', "/");
        assert_eq!(listed.get(&rel), Some(&sha256_file(&p).unwrap()), "{rel}");
    }
    assert!(!String::from_utf8_lossy(&std::fs::read(root.join("manifest.json")).unwrap()).contains(&"11".repeat(32)));

    let sweep: TradeoffTable =
        serde_json::from_slice(&std::fs::read(root.join("sweep/tradeoff.json")).unwrap()).unwrap();
    assert_eq!(sweep.rows.iter().map(|r| r.sigma).collect::<Vec<_>>(), vec![0.0, 5.0, 10.0, 20.0, 40.0]);
    let csv = std::fs::read_to_string(root.join("sweep/fig16_tradeoff.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn missing_upstream_artifact_names_the_command() {
    let dir = setup();
    let o = exitaudit(&["--config", "small.toml", "--out", "x", "audit"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("run `gen-data` first") || err.contains("run `train` first"), "{err}");
}

#[test]
fn bad_config_field_reports_its_path() {
    let dir = setup();
    std::fs::write(dir.path().join("bad.toml"), "[model]\nn_exits = \"four\"\n").unwrap();
    let o = exitaudit(&["--config", "bad.toml", "show-config"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.n_exits"), "{}", String::from_utf8_lossy(&o.stderr));

    std::fs::write(dir.path().join("typo.toml"), "[defense]\nsigmaa = 3.0\n").unwrap();
    let o = exitaudit(&["--config", "typo.toml", "show-config"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sigmaa"));

    let o = exitaudit(&["--override", "model.n_exits=0", "show-config"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = exitaudit(&["--config", "nope.toml", "show-config"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = exitaudit(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn overrides_and_flags_reach_the_resolved_config() {
    let dir = setup();
    let o = exitaudit(
        &["--config", "small.toml", "--seed", "42", "--override", "model.n_exits=5", "--override", "defense.mode=\"max_delay\"", "show-config"],
        dir.path(),
    );
    ok(&o);
    let text = String::from_utf8_lossy(&o.stdout);
    let v: toml::Table = text.parse().unwrap();
    assert_eq!(v["seed"].as_integer(), Some(42));
    assert_eq!(v["model"]["n_exits"].as_integer(), Some(5));
    assert_eq!(v["defense"]["mode"].as_str(), Some("max_delay"));
}
