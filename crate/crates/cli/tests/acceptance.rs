//! Acceptance suite. One test per criterion; each prints a single
//! `criterion N PASS|FAIL` line to stderr (uncaptured) and then asserts.
//!
//! Criteria 5, 6 and 8 share one run of the default suite over seeds 0..3.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use milda::gradcheck::{check_bag_predict, check_instance_predict};
use milda::losses::{discrepancy_loss, BagInput, Objective, Step2Batch};
use milda::metrics::pr_auc;
use milda::model::ModelBundle;
use milda::pseudo::{mix_scores, schedule_tau, ConfidencePair, MixRule, ScheduleConfig};
use milda::synth::measure_bag_label_confidence;
use milda::trainer::{
    init_twin_heads, objective_step, run_step1, run_step3, Labeler, ScopedOptimizer, TrainingHistory,
};
use milda::{validate_bag_consistency, LabelOrigin};
use milda_harness::config::SuiteConfig;
use milda_harness::data::{build_data, Prepared};
use milda_harness::methods::MethodName;
use milda_harness::plots::label_plot_rows;
use milda_harness::report::find;
use milda_harness::suite::{run_suite, SuiteReport};
use serde_json::json;

const SEEDS: [u64; 3] = [0, 1, 2];

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {n} {} {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

struct Comparison {
    report: SuiteReport,
    elapsed: Duration,
}

fn comparison() -> &'static Comparison {
    static CELL: OnceLock<Comparison> = OnceLock::new();
    CELL.get_or_init(|| {
        let t = Instant::now();
        let report = run_suite(&SuiteConfig::default(), &MethodName::COMPARISON, &SEEDS, 1, None).unwrap();
        Comparison {
            report,
            elapsed: t.elapsed(),
        }
    })
}

fn ablations() -> &'static SuiteReport {
    static CELL: OnceLock<SuiteReport> = OnceLock::new();
    CELL.get_or_init(|| {
        let methods: Vec<MethodName> =
            MethodName::ABLATION.into_iter().filter(|&m| m != MethodName::Ours).collect();
        let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
        run_suite(&SuiteConfig::default(), &methods, &SEEDS, jobs, None).unwrap()
    })
}

fn pr_mean(report: &SuiteReport, m: MethodName) -> f64 {
    find(&report.aggregates, m)
        .unwrap_or_else(|| panic!("{m} missing from the report"))
        .pr_auc_mean
}

#[test]
fn criterion_1_unit_oracles() {
    let t = Instant::now();
    let cfg = ScheduleConfig {
        ramp_epochs: 20,
        n_min: 10,
        n_max: 40,
        a_p: 1,
        a_n: 1,
    };
    let taus = [schedule_tau(0, &cfg), schedule_tau(10, &cfg), schedule_tau(20, &cfg), schedule_tau(35, &cfg)];
    let adv = discrepancy_loss(&[[1.0, 0.0]], &[[0.0, 1.0]]);
    let mix = mix_scores(&[0.9], &[[0.7, 0.3]], ConfidencePair { c_b: 0.8, c_i: 0.4 }, MixRule::Confidence)[0][1];
    let ap = pr_auc(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0]).unwrap();
    let pass = taus == [10, 25, 40, 40]
        && (adv - 1.0).abs() <= 1e-9
        && (mix - 0.7).abs() <= 1e-9
        && (ap - 5.0 / 6.0).abs() <= 1e-9
        && t.elapsed() < Duration::from_secs(1);
    verdict(
        1,
        "unit oracles",
        pass,
        &format!("tau {taus:?}, L_adv {adv}, p_M(1) {mix:.12}, AP {ap:.12}, {:?}", t.elapsed()),
    );
}

#[test]
fn criterion_2_gradient_checks() {
    let t = Instant::now();
    let mut worst = (0.0f64, 0.0f64);
    for seed in 0..20 {
        worst.0 = worst.0.max(check_bag_predict(seed).relative_error);
        worst.1 = worst.1.max(check_instance_predict(seed).relative_error);
    }
    let pass = worst.0 <= 1e-4 && worst.1 <= 1e-4 && t.elapsed() < Duration::from_secs(30);
    verdict(
        2,
        "gradient checks",
        pass,
        &format!(
            "20 configs, worst relative error bag {:.2e} instance {:.2e}, {:?}",
            worst.0,
            worst.1,
            t.elapsed()
        ),
    );
}

#[test]
fn criterion_3_mil_definition() {
    let t = Instant::now();
    let mut violations = 0usize;
    let mut prep = None;
    for seed in [2024, 7, 8] {
        let mut cfg = SuiteConfig::default();
        cfg.generator.seed = seed;
        let data = build_data(&cfg).unwrap();
        for ds in [&data.source_train, &data.source_val, &data.target_train, &data.target_test] {
            violations += validate_bag_consistency(ds).len();
        }
        if prep.is_none() {
            prep = Some(Prepared::new(data).unwrap());
        }
    }
    let prep = prep.unwrap();
    let td = &prep.training;
    let cfg = SuiteConfig::default().train_config(0);
    let cfg = milda::trainer::TrainConfig {
        epochs_step1: 10,
        ..cfg
    };
    let mut model = ModelBundle::init(&cfg.arch, 0).unwrap();
    run_step1(&mut model, td, &cfg, &mut TrainingHistory::default()).unwrap();
    let schedule = cfg.schedule_for(td.n_tpi());
    let bag_label: BTreeMap<u64, u8> = prep.data.target_train.bags().iter().map(|b| (b.id(), b.label())).collect();

    let (mut neg_total, mut neg_wrong, mut pos_outside) = (0usize, 0usize, 0usize);
    for epoch in [0, 5, 10, 20, 40] {
        for labeler in [Labeler::Mix(MixRule::Confidence), Labeler::Centroid] {
            let out = run_step3(&model, td, &schedule, labeler, epoch, 0).unwrap();
            for a in &out.assignments {
                let row = td.target_row(&a.instance).unwrap();
                let from_negative_bag = bag_label[&a.instance.bag_id] == 0;
                if from_negative_bag || a.origin == LabelOrigin::NegativeBag {
                    neg_total += 1;
                    neg_wrong += usize::from(!(a.label == 0 && prep.target_train_y[row] == 0));
                }
                if a.label == 1 && from_negative_bag {
                    pos_outside += 1;
                }
            }
        }
    }
    let pass = violations == 0 && neg_total > 0 && neg_wrong == 0 && pos_outside == 0 && t.elapsed() < Duration::from_secs(10);
    verdict(
        3,
        "MIL definition",
        pass,
        &format!(
            "{violations} consistency violations, {neg_wrong}/{neg_total} wrong negative-bag labels, \
             {pos_outside} positives outside positive bags, {:?}",
            t.elapsed()
        ),
    );
}

#[test]
fn criterion_4_parameter_scopes() {
    let t = Instant::now();
    let cfg = SuiteConfig::from_json_patch(json!({
        "generator": {"n_source_instances": 700, "n_target_instances": 900},
        "bags": {"splits": {"source_train_bags": 24, "source_val_bags": 10, "target_train_bags": 24, "target_test_bags": 10}}
    }))
    .unwrap();
    let prep = Prepared::build(&cfg).unwrap();
    let td = &prep.training;
    let tc = cfg.train_config(0);
    let mut model = ModelBundle::init(&tc.arch, 0).unwrap();
    init_twin_heads(&mut model, 0);
    let rows: Vec<usize> = (0..64).collect();
    let lx = td.source_x.select(ndarray::Axis(0), &rows);
    let ly: Vec<u8> = rows.iter().map(|&r| td.source_y[r]).collect();
    let tx = td.target_x.select(ndarray::Axis(0), &rows);
    let sb: Vec<&BagInput> = td.source_bags.iter().take(2).collect();
    let tb: Vec<&BagInput> = td.target_bags.iter().take(2).collect();
    let batch = Step2Batch {
        labeled_x: lx.view(),
        labels: &ly,
        target_x: tx.view(),
        source_bags: &sb,
        target_bags: &tb,
    };
    let hashes = |m: &ModelBundle| (m.encoder_hash(), m.bag_head_hash(), m.heads_hash());
    let before = hashes(&model);

    let mut heads_step = model.clone();
    objective_step(&mut heads_step, Objective::HeadDiscrepancy, &batch, 0.5, &mut ScopedOptimizer::new(1e-3)).unwrap();
    let after6 = hashes(&heads_step);
    let eq6_ok = after6.0 == before.0 && after6.1 == before.1 && after6.2 != before.2;

    let mut enc_step = model.clone();
    objective_step(&mut enc_step, Objective::EncoderDiscrepancy, &batch, 0.5, &mut ScopedOptimizer::new(1e-3)).unwrap();
    let after7 = hashes(&enc_step);
    let eq7_ok = after7.0 != before.0 && after7.1 == before.1 && after7.2 == before.2;

    let pass = eq6_ok && eq7_ok && t.elapsed() < Duration::from_secs(10);
    verdict(
        4,
        "parameter-scope audit",
        pass,
        &format!("head objective touches heads only: {eq6_ok}; encoder objective touches encoder only: {eq7_ok}"),
    );
}

#[test]
fn criterion_5_comparison_ordering() {
    let c = comparison();
    let r = &c.report;
    assert!(r.failures.is_empty(), "{:?}", r.failures);
    assert_eq!(r.rows.len(), 21);
    let m = |x| pr_mean(r, x);
    let ours = m(MethodName::Ours);
    let ideal = m(MethodName::IdealCase);
    let others = [
        MethodName::OursStep1,
        MethodName::Plda,
        MethodName::SourceOnly,
        MethodName::AttentionMil,
        MethodName::Mcdda,
    ];
    let best_other = others.iter().map(|&x| m(x)).fold(f64::NEG_INFINITY, f64::max);
    let gap_src = 100.0 * (ours - m(MethodName::SourceOnly));
    let gap_att = 100.0 * (ours - m(MethodName::AttentionMil));
    let pass = ideal >= ours
        && ours > best_other
        && gap_src >= 5.0
        && gap_att >= 5.0
        && c.elapsed <= Duration::from_secs(30 * 60);
    let table: Vec<String> = r
        .aggregates
        .iter()
        .map(|a| format!("{} {:.1}", a.method, 100.0 * a.pr_auc_mean))
        .collect();
    verdict(
        5,
        "comparison ordering",
        pass,
        &format!(
            "[{}]; ours - source_only {gap_src:.1}, ours - attention_mil {gap_att:.1} points; suite {:.0}s",
            table.join(", "),
            c.elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_6_ablation_ordering() {
    let base = &comparison().report;
    let abl = ablations();
    assert!(abl.failures.is_empty(), "{:?}", abl.failures);
    assert!(abl.rows.iter().all(|r| r.dataset_hash == base.dataset_hash));
    let ours = pr_mean(base, MethodName::Ours);
    let checked = [
        MethodName::AblationNoPseudo,
        MethodName::AblationNoMatching,
        MethodName::AblationNoConf,
        MethodName::AblationPfan,
    ];
    let mut shortfalls = Vec::new();
    let mut parts = Vec::new();
    for m in checked {
        let v = pr_mean(abl, m);
        parts.push(format!("{m} {:.1}", 100.0 * v));
        if v > ours {
            shortfalls.push(100.0 * (v - ours));
        }
    }
    for m in [MethodName::AblationFiOnly, MethodName::AblationFbOnly] {
        parts.push(format!("{m} {:.1}", 100.0 * pr_mean(abl, m)));
    }
    let pass = shortfalls.is_empty() || (shortfalls.len() == 1 && shortfalls[0] <= 1.0);
    verdict(
        6,
        "ablation ordering",
        pass,
        &format!("ours {:.1}; {}; shortfalls {shortfalls:?}", 100.0 * ours, parts.join(", ")),
    );
}

#[test]
fn criterion_7_clustered_bag_confidence() {
    let t = Instant::now();
    let patch = include_str!("../../../configs/clustered.json");
    let cfg = SuiteConfig::from_json_patch(serde_json::from_str(patch).unwrap()).unwrap();
    let data = build_data(&cfg).unwrap();
    let train = measure_bag_label_confidence(data.target_train.bags()).unwrap();
    let test = measure_bag_label_confidence(data.target_test.bags()).unwrap();
    let sizes_ok = data
        .target_train
        .bags()
        .iter()
        .chain(data.target_test.bags())
        .all(|b| b.len() == 30);
    let pass = train >= 0.90 && test >= 0.90 && sizes_ok && t.elapsed() < Duration::from_secs(60);
    verdict(
        7,
        "clustered bag confidence",
        pass,
        &format!("train {train:.3}, test {test:.3}, bags of 30: {sizes_ok}, {:?}", t.elapsed()),
    );
}

#[test]
fn criterion_8_pseudo_label_trajectory() {
    let r = &comparison().report;
    let cfg = SuiteConfig::default();
    let n_tpi = Prepared::build(&cfg).unwrap().training.n_tpi();
    let schedule = cfg.train_config(0).schedule_for(n_tpi);
    let cap = (schedule.a_p + schedule.a_n) * schedule.n_max;
    let mut details = Vec::new();
    let mut pass = true;
    for seed in SEEDS {
        let run = r.run(MethodName::Ours, seed).expect("ours run");
        let rows = label_plot_rows(&run.history);
        let at_m = rows.get(schedule.ramp_epochs).map(|r| r.labeled()).unwrap_or(0);
        let min_precision = rows
            .iter()
            .skip(10)
            .filter_map(|r| r.precision)
            .fold(f64::INFINITY, f64::min);
        let logged = rows.iter().all(|r| r.precision.is_some() && r.tau.is_some());
        pass &= at_m == cap && min_precision >= 0.8 && logged;
        details.push(format!("seed {seed}: {at_m}/{cap} labeled at m={}, min precision {min_precision:.3}", schedule.ramp_epochs));
    }
    verdict(8, "pseudo-label trajectory", pass, &details.join("; "));
}

#[test]
fn criterion_9_determinism() {
    let cfg = SuiteConfig::from_json_patch(json!({
        "generator": {"n_source_instances": 700, "n_target_instances": 900},
        "bags": {"splits": {"source_train_bags": 24, "source_val_bags": 10, "target_train_bags": 24, "target_test_bags": 10}},
        "train": {
            "epochs_step1": 3,
            "epochs_step23": 4,
            "arch": {"encoder_hidden": [8], "feature_dim": 8, "attention_dim": 8, "head_hidden": 4}
        }
    }))
    .unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let seeds = [0, 1];
    let ra = run_suite(&cfg, &MethodName::ALL, &seeds, 1, Some(a.path())).unwrap();
    let rb = run_suite(&cfg, &MethodName::ALL, &seeds, 2, Some(b.path())).unwrap();
    assert!(ra.failures.is_empty() && rb.failures.is_empty());
    let mut compared = 0usize;
    let mut differing = Vec::new();
    for p in &ra.artifacts {
        let rel = p.strip_prefix(a.path()).unwrap();
        if p.extension().is_some_and(|e| e == "csv") {
            compared += 1;
            if std::fs::read(p).unwrap() != std::fs::read(b.path().join(rel)).unwrap() {
                differing.push(rel.display().to_string());
            }
        }
    }
    let pass = differing.is_empty() && compared > 0 && ra.rows.len() == 26;
    verdict(
        9,
        "determinism",
        pass,
        &format!("{compared} CSV files compared across 1 and 2 workers, differing: {differing:?}"),
    );
}
