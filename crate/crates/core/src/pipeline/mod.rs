//! Config-driven experiment pipeline: each command reads the artifacts of the
//! previous ones from the output directory and records what it wrote in the
//! run manifest.
//!
//! Layout of an output directory:
//!
//! ```text
//! data/dataset.csv  data/shifted.csv  data/split.json        gen-data
//! models/*.json  models/train_summary.json                   train
//! audit/report.json  audit/attack_records.csv  audit/fig*.csv audit
//! steal/steal.json  steal/timing_trace.csv                   steal
//! defend/defend.json  defend/defended_times.csv              defend
//! sweep/tradeoff.json  sweep/fig16_tradeoff.csv               sweep
//! report/audit_report.json  report/fig*.csv                   report
//! manifest.json
//! ```

mod config;
mod experiment;
mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use config::{
    apply_override, AdversarySection, AttackConfig, DataSource, DatasetConfig, DefenseSection, ExperimentConfig,
    ModelConfig, TauSetting,
};
pub use experiment::{balanced_prefix, perturb_config, train_model, AsrPair, LabelOnlyRun, Splits, TrainedAttack};
pub use manifest::{sha256_bytes, sha256_file, CommandEntry, FileHash, Manifest, MANIFEST_FILE};

use crate::analysis::{AuditReport, ExitStealSummary, LossView};
use crate::attacks::{adaptive_exit_classifier, count_exits, AttackMode, ExitSource};
use crate::data::{self, FourWaySplit};
use crate::defense::{
    delayed_batch, observe_defended, tradeoff_sweep, AttackSuite, SecretSeed, TimeGuardConfig, TradeoffTable,
};
use crate::error::{Error, Result};
use crate::nn::{load_model, save_model, select_threshold, Architecture, MultiExitModel, DEFAULT_SLACK};
use crate::seed::{child_rng, derive_seed};
use crate::timing::{
    estimate_sigma, measure_batch, plan_queries, steal_from_trace, QueryPlan, TimingModel, DEFAULT_MAX_CLUSTERS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    Audit,
    Steal,
    Defend,
    Sweep,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Audit => "audit",
            Command::Steal => "steal",
            Command::Defend => "defend",
            Command::Sweep => "sweep",
            Command::Report => "report",
        }
    }
}

/// 1 for problems with the invocation, config or inputs; 2 for failures
/// while running.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::MissingArtifact { .. }
        | Error::CsvParse { .. }
        | Error::MissingValue { .. }
        | Error::InvalidSigma(_) => 1,
        _ => 2,
    }
}

const DATASET: &str = "data/dataset.csv";
const SHIFTED: &str = "data/shifted.csv";
const SPLIT: &str = "data/split.json";
const TARGET: &str = "models/target.json";
const SHADOW: &str = "models/shadow.json";
const VANILLA_TARGET: &str = "models/vanilla_target.json";
const VANILLA_SHADOW: &str = "models/vanilla_shadow.json";
const SHADOW_WIDTH: &str = "models/shadow_width.json";
const SHADOW_SHIFTED: &str = "models/shadow_shifted.json";
const TRAIN_SUMMARY: &str = "models/train_summary.json";
const AUDIT_REPORT: &str = "audit/report.json";
const STEAL_JSON: &str = "steal/steal.json";
const DEFEND_JSON: &str = "defend/defend.json";
const SWEEP_JSON: &str = "sweep/tradeoff.json";
const FINAL_REPORT: &str = "report/audit_report.json";

/// A config bound to its output directory.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    entry: CommandEntry,
    quiet: bool,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> Self {
        let out = cfg.out_dir.clone();
        Pipeline { cfg, out, entry: CommandEntry::default(), quiet: false }
    }

    pub fn quiet(mut self, quiet: bool) -> Self {
        self.quiet = quiet;
        self
    }

    fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn seed(&mut self, label: &str) -> u64 {
        let s = derive_seed(self.cfg.seed, label);
        self.entry.seeds.insert(label.to_string(), s);
        s
    }

    /// Path of an upstream artifact, recorded as an input.
    fn input(&mut self, rel: &str, producer: &'static str) -> Result<PathBuf> {
        let p = self.path(rel);
        if !p.is_file() {
            return Err(Error::MissingArtifact { path: p, command: producer });
        }
        self.entry.inputs.push(FileHash { path: rel.to_string(), sha256: sha256_file(&p)? });
        Ok(p)
    }

    fn output(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        self.entry.artifacts.push(FileHash { path: rel.to_string(), sha256: String::new() });
        Ok(p)
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let p = self.output(rel)?;
        std::fs::write(p, serde_json::to_string_pretty(value)? + "\n")?;
        Ok(())
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&mut self, rel: &str, producer: &'static str) -> Result<T> {
        let p = self.input(rel, producer)?;
        Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?)
    }

    fn note(&mut self, key: &str, value: impl ToString) {
        self.entry.notes.insert(key.to_string(), value.to_string());
    }

    /// Runs one command and rewrites its manifest entry.
    pub fn run(&mut self, cmd: Command) -> Result<()> {
        self.entry = CommandEntry {
            config_sha256: sha256_bytes(self.cfg.to_toml_string()?.as_bytes()),
            master_seed: self.cfg.seed,
            ..Default::default()
        };
        std::fs::create_dir_all(&self.out)?;
        match cmd {
            Command::GenData => self.gen_data()?,
            Command::Train => self.train()?,
            Command::Audit => self.audit()?,
            Command::Steal => self.steal()?,
            Command::Defend => self.defend()?,
            Command::Sweep => self.sweep()?,
            Command::Report => self.report()?,
        }
        let mut entry = std::mem::take(&mut self.entry);
        for f in &mut entry.artifacts {
            f.sha256 = sha256_file(&self.out.join(&f.path))?;
        }
        let mut manifest = Manifest::load(&self.out)?;
        manifest.commands.insert(cmd.name().to_string(), entry);
        manifest.save(&self.out)
    }

    /// Every command in order.
    pub fn run_all(&mut self) -> Result<()> {
        for c in [
            Command::GenData,
            Command::Train,
            Command::Audit,
            Command::Steal,
            Command::Defend,
            Command::Sweep,
            Command::Report,
        ] {
            self.log(format!("== {}", c.name()));
            self.run(c)?;
        }
        Ok(())
    }

    fn synthetic(&self) -> bool {
        self.cfg.dataset.source == DataSource::Synthetic
    }

    fn gen_data(&mut self) -> Result<()> {
        let d = self.cfg.dataset.clone();
        let ds = match d.source {
            DataSource::Synthetic => {
                let synth = d.synth(self.seed("data"))?;
                let ds = data::synth_generate(&synth)?;
                if self.cfg.adversary.shifted_shadow {
                    let shifted = data::shifted_variant(&synth, self.seed("shift"))?;
                    let p = self.output(SHIFTED)?;
                    data::write_csv(&shifted, &p, &d.label_column)?;
                }
                ds
            }
            DataSource::Csv => {
                let path = d.path.clone().expect("validated");
                let ds = data::load_csv(&path, &d.label_column)?;
                self.entry.inputs.push(FileHash { path: path.display().to_string(), sha256: sha256_file(&path)? });
                ds
            }
        };
        let split = data::split_four(ds.len(), self.seed("split"))?;
        let p = self.output(DATASET)?;
        data::write_csv(&ds, &p, &d.label_column)?;
        self.write_json(SPLIT, &split)?;
        self.note("rows", ds.len());
        self.note("features", ds.n_features());
        self.note("classes", ds.n_classes);
        self.log(format!("{} rows, {} features, {} classes", ds.len(), ds.n_features(), ds.n_classes));
        Ok(())
    }

    fn load_splits(&mut self) -> Result<(Splits, Option<Splits>)> {
        let label = self.cfg.dataset.label_column.clone();
        let p = self.input(DATASET, "gen-data")?;
        let mut ds = data::load_csv(&p, &label)?;
        ds.name = self.task_name();
        let split: FourWaySplit = self.read_json(SPLIT, "gen-data")?;
        if !data::check_split(&split, ds.len()) {
            return Err(Error::Config(format!("{SPLIT} does not partition {DATASET}")));
        }
        let shifted = if self.synthetic() && self.cfg.adversary.shifted_shadow {
            let p = self.input(SHIFTED, "gen-data")?;
            let sh = data::load_csv(&p, &label)?;
            Some(Splits::new(&sh, &split))
        } else {
            None
        };
        Ok((Splits::new(&ds, &split), shifted))
    }

    fn task_name(&self) -> String {
        match self.cfg.dataset.source {
            DataSource::Synthetic => self.cfg.dataset.preset.clone(),
            DataSource::Csv => {
                let p = self.cfg.dataset.path.as_ref().expect("validated");
                p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "csv".into())
            }
        }
    }

    fn architecture(&self, input_dim: usize, n_classes: usize, width: usize, n_exits: usize) -> Architecture {
        let m = &self.cfg.model;
        Architecture { head_hidden: m.head_hidden, ..Architecture::new(input_dim, n_classes, width, m.n_blocks, n_exits) }
    }

    fn train(&mut self) -> Result<()> {
        let (sp, shifted) = self.load_splits()?;
        let (d, k) = (sp.target_train.n_features(), sp.target_train.n_classes);
        let m = self.cfg.model.clone();
        let tc = self.cfg.training.clone();
        let master = self.seed("models");
        let arch = self.architecture(d, k, m.width, m.n_exits);
        let vanilla_arch = self.architecture(d, k, m.width, 1);
        let mut summary = TrainSummary::default();

        self.log("training vanilla target");
        let (vt, vt_log) = train_model(vanilla_arch.clone(), 1.0, &sp.target_train, &tc, master, "vanilla-target")?;
        let vanilla_acc = vt.early_exit_accuracy(sp.target_test.view(), &sp.target_test.labels)?;
        self.log("training target");
        let (mut target, t_log) = train_model(arch.clone(), 0.0, &sp.target_train, &tc, master, "target")?;
        let (tau, source) = match self.cfg.fixed_tau() {
            Some(t) => (t, "config"),
            None => {
                let c = select_threshold(
                    &target,
                    sp.target_test.view(),
                    &sp.target_test.labels,
                    vanilla_acc,
                    DEFAULT_SLACK,
                )?;
                (c.tau, "auto")
            }
        };
        target.tau = tau;
        summary.tau = tau;
        summary.tau_source = source.into();

        self.log("training shadow models");
        let (shadow, s_log) = train_model(arch.clone(), tau, &sp.shadow_train, &tc, master, "shadow")?;
        let (vs, vs_log) = train_model(vanilla_arch, 1.0, &sp.shadow_train, &tc, master, "vanilla-shadow")?;
        let sw = self.cfg.adversary.shadow_width.unwrap_or((m.width / 2).max(1));
        let (shadow_w, sw_log) =
            train_model(self.architecture(d, k, sw, m.n_exits), tau, &sp.shadow_train, &tc, master, "shadow-width")?;

        let mut models: Vec<(&str, &MultiExitModel, &crate::nn::TrainLog, &Splits)> = vec![
            (VANILLA_TARGET, &vt, &vt_log, &sp),
            (TARGET, &target, &t_log, &sp),
            (SHADOW, &shadow, &s_log, &sp),
            (VANILLA_SHADOW, &vs, &vs_log, &sp),
            (SHADOW_WIDTH, &shadow_w, &sw_log, &sp),
        ];
        let shifted_model = match &shifted {
            Some(sh) => Some(train_model(arch, tau, &sh.shadow_train, &tc, master, "shadow-shifted")?),
            None => None,
        };
        if let (Some((mdl, log)), Some(sh)) = (&shifted_model, &shifted) {
            models.push((SHADOW_SHIFTED, mdl, log, sh));
        }
        for (rel, model, log, splits) in models {
            let shadow_side = rel != TARGET && rel != VANILLA_TARGET;
            let (tr, te) =
                if shadow_side { (&splits.shadow_train, &splits.shadow_test) } else { (&splits.target_train, &splits.target_test) };
            let p = self.output(rel)?;
            save_model(model, &p)?;
            summary.models.insert(
                rel.to_string(),
                ModelSummary {
                    width: model.arch.width,
                    n_exits: model.n_exits(),
                    tau: model.tau,
                    final_loss: log.epoch_loss.last().copied().unwrap_or(f64::NAN),
                    train_accuracy: model.early_exit_accuracy(tr.view(), &tr.labels)?,
                    test_accuracy: model.early_exit_accuracy(te.view(), &te.labels)?,
                },
            );
        }
        self.log(format!("tau = {tau} ({source}); vanilla test accuracy {vanilla_acc:.3}"));
        self.write_json(TRAIN_SUMMARY, &summary)
    }

    fn load(&mut self, rel: &str) -> Result<MultiExitModel> {
        let p = self.input(rel, "train")?;
        load_model(&p)
    }

    fn timing_for(&self, model: &MultiExitModel) -> Result<TimingModel> {
        let a = &self.cfg.adversary;
        TimingModel::new(&model.ops_per_exit, a.base_time_ms, a.time_per_op_ms, a.noise_mu, a.noise_sigma)
    }

    fn audit(&mut self) -> Result<()> {
        let (sp, shifted) = self.load_splits()?;
        let target = self.load(TARGET)?;
        let shadow = self.load(SHADOW)?;
        let vt = self.load(VANILLA_TARGET)?;
        let vs = self.load(VANILLA_SHADOW)?;
        let shadow_w = self.load(SHADOW_WIDTH)?;
        let shadow_sh = if shifted.is_some() { Some(self.load(SHADOW_SHIFTED)?) } else { None };
        let ac = self.cfg.attack.clone();
        let (tr, te) = (&sp.target_train, &sp.target_test);
        let n_exits = target.n_exits();

        let mut report = AuditReport::new(self.task_name(), target.arch.clone(), target.tau, target.ops_per_exit.clone());
        report.vanilla_test_accuracy = Some(vt.early_exit_accuracy(te.view(), &te.labels)?);
        report.multi_exit_test_accuracy = Some(target.early_exit_accuracy(te.view(), &te.labels)?);
        let test_exits: Vec<usize> = target.predict_early_batch(te.view())?.iter().map(|p| p.exit).collect();
        report.mean_ops =
            Some(test_exits.iter().map(|&e| target.ops_per_exit[e] as f64).sum::<f64>() / test_exits.len() as f64);

        self.log("analysis");
        let lv = LossView::from_model(&target, tr, te)?;
        report.overfitting_gap = Some(crate::analysis::overfitting_gap(&target, tr, te)?);
        report.js_overall = Some(lv.js()?);
        report.js_per_exit = Some(lv.per_exit_js());
        report.nonmember_ratio = Some(lv.nonmember_ratio());
        report.loss_histograms = Some(lv.histograms()?);

        // exits recovered from timing, for the second adversary
        let timing = self.timing_for(&target)?;
        let (x_eval, n_eval) = sp.target_eval();
        let mut rng = child_rng(self.seed("audit-channel"), "eval");
        let trace = measure_batch(&timing, &target, x_eval.view(), self.cfg.adversary.n_queries, &mut rng)?;
        let stolen = steal_from_trace(trace, n_exits, DEFAULT_MAX_CLUSTERS)?;
        let observed = stolen.predicted_exits();
        let timing_source = ExitSource::Observed {
            member: observed[..n_eval].to_vec(),
            nonmember: observed[n_eval..].to_vec(),
            n_exits,
        };
        self.note("a2_exit_accuracy", stolen.accuracy);

        let mut modes = vec![(AttackMode::ScoreBased, "score")];
        if ac.gradient {
            modes.push((AttackMode::GradientBased, "gradient"));
        }
        for (mode, name) in modes {
            let seed = self.seed(&format!("attack-{name}"));
            let acfg = ac.train_config(seed);
            self.log(format!("{name} attack"));
            let a1 = TrainedAttack::fit(&shadow, &sp.shadow_train, &sp.shadow_test, mode, &acfg)?;
            let direct = a1.evaluate(&target, tr, te, &ExitSource::Direct)?;
            push_pair(&mut report, name, "a1_direct_exit", direct);
            let timed = a1.evaluate(&target, tr, te, &timing_source)?;
            push_pair(&mut report, name, "a2_timing_exit", timed);
            let aw = TrainedAttack::fit(&shadow_w, &sp.shadow_train, &sp.shadow_test, mode, &acfg)?;
            push_pair(&mut report, name, "a3_width", aw.evaluate(&target, tr, te, &ExitSource::Direct)?);
            if let (Some(m), Some(sh)) = (&shadow_sh, &shifted) {
                let ash = TrainedAttack::fit(m, &sh.shadow_train, &sh.shadow_test, mode, &acfg)?;
                push_pair(&mut report, name, "a3_shifted", ash.evaluate(&target, tr, te, &ExitSource::Direct)?);
            }
            let van = TrainedAttack::fit(&vs, &sp.shadow_train, &sp.shadow_test, mode, &acfg)?;
            report.push_asr(name, "vanilla", "original", van.evaluate_original(&vt, tr, te)?);
        }

        self.log("label-only attack");
        let seed = self.seed("label-only");
        let pc = perturb_config(&sp.shadow_train, ac.perturb_directions, ac.bisection_steps, seed);
        let m = ac.label_only_samples;
        let lo = LabelOnlyRun::measure(&shadow, &sp.shadow_train, &sp.shadow_test, &target, tr, te, m, pc.clone())?;
        push_pair(&mut report, "label_only", "a1_direct_exit", lo.asr(None)?);
        let stolen_lo = balanced_prefix(&observed, n_eval, m);
        push_pair(&mut report, "label_only", "a2_timing_exit", lo.asr(Some(&stolen_lo))?);
        let lw = LabelOnlyRun::measure(&shadow_w, &sp.shadow_train, &sp.shadow_test, &target, tr, te, m, pc.clone())?;
        push_pair(&mut report, "label_only", "a3_width", lw.asr(None)?);
        if let (Some(mdl), Some(sh)) = (&shadow_sh, &shifted) {
            let pcs = perturb_config(&sh.shadow_train, ac.perturb_directions, ac.bisection_steps, seed);
            let ls = LabelOnlyRun::measure(mdl, &sh.shadow_train, &sh.shadow_test, &target, tr, te, m, pcs)?;
            push_pair(&mut report, "label_only", "a3_shifted", ls.asr(None)?);
        }
        let pcv = perturb_config(&sp.shadow_train, ac.perturb_directions, ac.bisection_steps, seed);
        let lv = LabelOnlyRun::measure(&vs, &sp.shadow_train, &sp.shadow_test, &vt, tr, te, m, pcv)?;
        report.push_asr("label_only", "vanilla", "original", lv.asr(None)?.original);

        self.log("exit stealing");
        let probes = sp.shadow_probes(self.cfg.adversary.n_probes);
        report.exit_count = Some(count_exits(&target, probes.view())?.n_exits);
        let clf_cfg = crate::nn::TrainConfig { epochs: ac.epochs, seed: self.seed("exit-classifier"), ..Default::default() };
        let clf = adaptive_exit_classifier(&shadow, probes.view(), &clf_cfg)?;
        let tpred = target.predict_early_batch(x_eval.view())?;
        let scores = Array2::from_shape_fn((tpred.len(), target.n_classes()), |(r, c)| tpred[r].probs[c]);
        let guess = clf.predict(scores.view());
        let hits = guess.iter().zip(&tpred).filter(|(g, p)| **g == p.exit).count();
        report.adaptive_exit_accuracy = Some(hits as f64 / tpred.len() as f64);
        self.note("adaptive_shadow_holdout_accuracy", clf.holdout_accuracy);
        self.note("adaptive_majority_baseline", clf.majority_baseline);

        let records = crate::attacks::build_attack_dataset(&target, tr, te, &ExitSource::Direct, Default::default())?;
        let p = self.output("audit/attack_records.csv")?;
        records.write_csv(&p)?;
        self.finish_report(&report, "audit")?;
        self.write_json(AUDIT_REPORT, &report)?;
        print_summary(&report);
        Ok(())
    }

    /// Writes the report's figure CSVs into `dir` and lists them.
    fn finish_report(&mut self, report: &AuditReport, dir: &str) -> Result<()> {
        report.validate()?;
        let d = self.path(dir);
        std::fs::create_dir_all(&d)?;
        for p in report.write_figure_csvs(&d)? {
            let name = p.file_name().expect("file").to_string_lossy().into_owned();
            self.entry.artifacts.push(FileHash { path: format!("{dir}/{name}"), sha256: String::new() });
        }
        Ok(())
    }

    fn steal(&mut self) -> Result<()> {
        let (sp, _) = self.load_splits()?;
        let target = self.load(TARGET)?;
        let timing = self.timing_for(&target)?;
        let a = self.cfg.adversary.clone();
        let probes = sp.shadow_probes(a.n_probes);
        let mut rng = child_rng(self.seed("steal-channel"), "probes");
        let est = estimate_sigma(&timing, &target, &probes.row(0).to_vec(), a.sigma_probes, &mut rng)?;
        let plan = match timing.min_gap() {
            Some(gap) => Some(plan_queries(gap, est, a.confidence)?),
            None => None,
        };
        let trace = measure_batch(&timing, &target, probes.view(), a.n_queries, &mut rng)?;
        let result = steal_from_trace(trace, target.n_exits(), DEFAULT_MAX_CLUSTERS)?;
        let out = StealOutput {
            summary: ExitStealSummary {
                predicted_n_exits: result.predicted_n_exits,
                accuracy: result.accuracy,
                n_queries: a.n_queries,
                noise_sigma: a.noise_sigma,
                unobserved_exits: result.unobserved_exits.clone(),
            },
            true_n_exits: target.n_exits(),
            clean_times_ms: timing.clean_times.clone(),
            estimated_sigma: est,
            plan,
            bandwidth: result.clustering.bandwidth,
        };
        self.log(format!(
            "predicted {} exits (true {}), depth accuracy {:.4}",
            out.summary.predicted_n_exits, out.true_n_exits, out.summary.accuracy
        ));
        let p = self.output("steal/timing_trace.csv")?;
        result.trace.write_csv(&p)?;
        self.write_json(STEAL_JSON, &out)
    }

    fn secret(&mut self) -> Result<SecretSeed> {
        let var = self.cfg.defense.secret_env.clone();
        match std::env::var(&var) {
            Ok(v) => {
                self.note("secret_source", format!("env:{var}"));
                SecretSeed::from_hex(&v)
            }
            Err(_) => {
                self.log(format!("warning: {var} is not set; using a secret derived from the master seed"));
                self.note("secret_source", "derived-from-seed");
                let d = <sha2::Sha256 as sha2::Digest>::digest(format!("timeguard-secret/{}", self.cfg.seed));
                Ok(SecretSeed::from_bytes(d.into()))
            }
        }
    }

    fn require_defense(&self, cmd: &str) -> Result<()> {
        if !self.cfg.defense.enabled {
            return Err(Error::Config(format!("`{cmd}` needs defense.enabled = true")));
        }
        Ok(())
    }

    fn defend(&mut self) -> Result<()> {
        self.require_defense("defend")?;
        let (sp, _) = self.load_splits()?;
        let target = self.load(TARGET)?;
        let shadow = self.load(SHADOW)?;
        let timing = self.timing_for(&target)?;
        let d = self.cfg.defense.clone();
        let cfg = TimeGuardConfig::new(d.sigma, d.mode, self.secret()?)?;
        let (x_eval, n_eval) = sp.target_eval();
        let (delayed, exits) = delayed_batch(x_eval.view(), &target, &timing, &cfg)?;
        let plain = target.predict_early_batch(x_eval.view())?;
        let unchanged = plain.iter().zip(&delayed).all(|(p, q)| p.label == q.label && p.probs == q.probs);
        let mut rng = child_rng(self.seed("defend-channel"), "eval");
        let trace = observe_defended(&delayed, &exits, &timing, self.cfg.adversary.n_queries, &mut rng)?;
        let stolen = steal_from_trace(trace, target.n_exits(), usize::MAX)?;
        let observed = stolen.predicted_exits();
        let seed = self.seed("attack-score");
        let acfg = self.cfg.attack.train_config(seed);
        let atk = TrainedAttack::fit(&shadow, &sp.shadow_train, &sp.shadow_test, AttackMode::ScoreBased, &acfg)?;
        let source = ExitSource::Observed {
            member: observed[..n_eval].to_vec(),
            nonmember: observed[n_eval..].to_vec(),
            n_exits: target.n_exits(),
        };
        let asr = atk.evaluate(&target, &sp.target_train, &sp.target_test, &source)?;
        let out = DefendOutput {
            mode: d.mode,
            sigma: d.sigma,
            predictions_unchanged: unchanged,
            predicted_n_exits: stolen.predicted_n_exits,
            exit_accuracy: stolen.accuracy,
            mean_response_ms: delayed.iter().map(|p| p.delay_time).sum::<f64>() / delayed.len() as f64,
            undefended_mean_ms: exits.iter().map(|&e| timing.clean_time(e)).sum::<f64>() / exits.len() as f64,
            max_delay_ms: timing.final_time(),
            hybrid_asr: asr.hybrid,
            original_asr: asr.original,
        };
        self.log(format!(
            "{:?} sigma {}: {} clusters, hybrid ASR {:.4} vs original {:.4}, mean response {:.3} ms",
            out.mode, out.sigma, out.predicted_n_exits, out.hybrid_asr, out.original_asr, out.mean_response_ms
        ));
        let p = self.output("defend/defended_times.csv")?;
        stolen.trace.write_csv(&p)?;
        self.write_json(DEFEND_JSON, &out)
    }

    fn sweep(&mut self) -> Result<()> {
        self.require_defense("sweep")?;
        let (sp, _) = self.load_splits()?;
        let target = self.load(TARGET)?;
        let shadow = self.load(SHADOW)?;
        let timing = self.timing_for(&target)?;
        let secret = self.secret()?;
        let seed = self.seed("attack-score");
        let acfg = self.cfg.attack.train_config(seed);
        let atk = TrainedAttack::fit(&shadow, &sp.shadow_train, &sp.shadow_test, AttackMode::ScoreBased, &acfg)?;
        let original = atk.evaluate(&target, &sp.target_train, &sp.target_test, &ExitSource::Direct)?.original;
        let suite = AttackSuite {
            hybrid: &atk.hybrid,
            original_asr: original,
            members: &sp.target_train,
            nonmembers: &sp.target_test,
            timing: &timing,
            n_queries: self.cfg.adversary.n_queries,
            seed: self.seed("sweep"),
        };
        let sigmas = self.cfg.defense.sweep_sigmas.clone();
        let table = tradeoff_sweep(&target, &suite, &sigmas, &secret)?;
        for r in &table.rows {
            self.log(format!(
                "sigma {:>6}: hybrid {:.4} original {:.4} mean {:.3} ms ({} clusters)",
                r.sigma, r.hybrid_asr, r.original_asr, r.mean_response_ms, r.predicted_n_exits
            ));
        }
        let p = self.output("sweep/fig16_tradeoff.csv")?;
        crate::analysis::write_tradeoff_csv(&table, &p)?;
        self.write_json(SWEEP_JSON, &table)
    }

    fn report(&mut self) -> Result<()> {
        let mut report: AuditReport = self.read_json(AUDIT_REPORT, "audit")?;
        if self.path(STEAL_JSON).is_file() {
            let s: StealOutput = self.read_json(STEAL_JSON, "steal")?;
            report.exit_steal = Some(s.summary);
        }
        if self.path(SWEEP_JSON).is_file() {
            let t: TradeoffTable = self.read_json(SWEEP_JSON, "sweep")?;
            report.defense = Some(t);
        }
        self.finish_report(&report, "report")?;
        self.write_json(FINAL_REPORT, &report)?;
        print_summary(&report);
        Ok(())
    }
}

fn push_pair(report: &mut AuditReport, attack: &str, adversary: &str, p: AsrPair) {
    report.push_asr(attack, adversary, "original", p.original);
    report.push_asr(attack, adversary, "hybrid", p.hybrid);
}

fn print_summary(r: &AuditReport) {
    println!("task {}  exits {}  tau {}", r.task, r.n_exits, r.tau);
    if let (Some(v), Some(m)) = (r.vanilla_test_accuracy, r.multi_exit_test_accuracy) {
        println!("test accuracy: vanilla {v:.4}  multi-exit {m:.4}");
    }
    println!("{:<12} {:<16} {:>9} {:>9}", "attack", "adversary", "original", "hybrid");
    let mut rows: BTreeMap<(String, String), (Option<f64>, Option<f64>)> = BTreeMap::new();
    for e in &r.asr {
        let slot = rows.entry((e.attack.clone(), e.adversary.clone())).or_default();
        if e.variant == "hybrid" {
            slot.1 = Some(e.asr);
        } else {
            slot.0 = Some(e.asr);
        }
    }
    let cell = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
    for ((a, adv), (o, h)) in rows {
        println!("{a:<12} {adv:<16} {:>9} {:>9}", cell(o), cell(h));
    }
    if let Some(t) = &r.defense {
        match t.crossing_row() {
            Some(c) => println!("defense crossing at sigma {} (mean {:.3} ms, max-delay {:.3} ms)", c.sigma, c.mean_response_ms, t.max_delay_ms),
            None => println!("defense: no crossing within the swept sigmas"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub width: usize,
    pub n_exits: usize,
    pub tau: f64,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub tau: f64,
    pub tau_source: String,
    pub models: BTreeMap<String, ModelSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StealOutput {
    pub summary: ExitStealSummary,
    pub true_n_exits: usize,
    pub clean_times_ms: Vec<f64>,
    pub estimated_sigma: f64,
    /// Queries per sample needed to separate the closest two exits.
    pub plan: Option<QueryPlan>,
    pub bandwidth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefendOutput {
    pub mode: crate::defense::DefenseMode,
    pub sigma: f64,
    pub predictions_unchanged: bool,
    pub predicted_n_exits: usize,
    pub exit_accuracy: f64,
    pub mean_response_ms: f64,
    pub undefended_mean_ms: f64,
    pub max_delay_ms: f64,
    pub hybrid_asr: f64,
    pub original_asr: f64,
}

/// Loads the config, applying `--out` and `--seed` after the overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String], out: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path, overrides)?;
    if let Some(o) = out {
        cfg.out_dir = o.to_path_buf();
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}
