//! The run matrix: methods × seeds on one generated dataset, executed on a
//! bounded worker pool, then written out in a fixed order.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use log::{error, info};
use milda::metrics::{export_score_map, ScoredPoint};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::SuiteConfig;
use crate::data::Prepared;
use crate::methods::{run_method, MethodName, MethodRun, MetricRow};
use crate::plots::{label_plot_rows, label_plot_svg, score_map_svg, ScoreMapPoint};
use crate::report::{aggregate, render_summary, sort_rows, write_csv, Aggregate};
use crate::HarnessError;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct JobFailure {
    pub method: MethodName,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, Serialize)]
struct JobTiming {
    method: MethodName,
    seed: u64,
    seconds: f64,
}

pub struct SuiteReport {
    pub rows: Vec<MetricRow>,
    pub aggregates: Vec<Aggregate>,
    pub failures: Vec<JobFailure>,
    /// Finished runs, sorted like `rows`.
    pub runs: Vec<MethodRun>,
    pub dataset_hash: String,
    pub artifacts: Vec<PathBuf>,
}

impl SuiteReport {
    pub fn run(&self, method: MethodName, seed: u64) -> Option<&MethodRun> {
        self.runs.iter().find(|r| r.row.method == method && r.row.seed == seed)
    }
}

type JobResult = (MethodName, u64, f64, Result<MethodRun, HarnessError>);

/// Runs every (method, seed) pair on `jobs` worker threads.
pub fn run_matrix(
    cfg: &SuiteConfig,
    prep: &Prepared,
    methods: &[MethodName],
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<JobResult>, HarnessError> {
    let pairs: Vec<(MethodName, u64)> = methods.iter().flat_map(|&m| seeds.iter().map(move |&s| (m, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| HarnessError::Config(format!("worker pool: {e}")))?;
    let mut results: Vec<JobResult> = pool.install(|| {
        pairs
            .par_iter()
            .map(|&(m, s)| {
                let t = Instant::now();
                let res = run_method(m, prep, &cfg.train_config(s));
                let secs = t.elapsed().as_secs_f64();
                match &res {
                    Ok(r) => info!("{m} seed {s}: PR-AUC {:.4} acc {:.4} ({secs:.1}s)", r.row.pr_auc, r.row.accuracy),
                    Err(e) => error!("{m} seed {s} failed: {e}"),
                }
                (m, s, secs, res)
            })
            .collect()
    });
    results.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(results)
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn score_map(prep: &Prepared, run: &MethodRun) -> Result<Vec<ScoreMapPoint>, HarnessError> {
    let points: Vec<ScoredPoint> = prep
        .data
        .target_test
        .instances()
        .zip(&run.test_scores)
        .zip(&prep.test_y)
        .map(|((inst, &score), &y)| ScoredPoint {
            bag_id: inst.bag_id(),
            index_in_bag: inst.index_in_bag(),
            features: inst.features(),
            score,
            oracle_label: Some(y),
        })
        .collect();
    Ok(export_score_map(&points)?
        .into_iter()
        .map(|r| ScoreMapPoint {
            bag_id: r.bag_id,
            index_in_bag: r.index_in_bag,
            x: r.x,
            y: r.y,
            score: r.score,
            oracle_label: r.oracle_label,
        })
        .collect())
}

/// Per-run artifacts: history, score map, label plot, checkpoints.
fn write_run(out: &Path, prep: &Prepared, run: &MethodRun) -> Result<Vec<PathBuf>, HarnessError> {
    let stem = format!("{}_seed{}", run.row.method, run.row.seed);
    let mut paths = Vec::new();
    let mut push = |p: PathBuf| {
        paths.push(p.clone());
        p
    };

    let p = push(out.join("histories").join(format!("{stem}.csv")));
    write_csv(&p, &run.history.records)?;

    let points = score_map(prep, run)?;
    let p = push(out.join("plots").join(format!("score_map_{stem}.csv")));
    write_csv(&p, &points)?;
    let p = push(out.join("plots").join(format!("score_map_{stem}.svg")));
    std::fs::write(&p, score_map_svg(&points, &stem))?;

    if run.history.records.iter().any(|r| r.tau.is_some()) {
        let rows = label_plot_rows(&run.history);
        let p = push(out.join("plots").join(format!("label_plot_{stem}.csv")));
        write_csv(&p, &rows)?;
        let p = push(out.join("plots").join(format!("label_plot_{stem}.svg")));
        std::fs::write(&p, label_plot_svg(&rows, &stem))?;
    }

    let p = push(out.join("checkpoints").join(format!("{stem}_final.json")));
    run.model.save_checkpoint(&p)?;
    if let Some(pre) = &run.pretrained {
        let p = push(out.join("checkpoints").join(format!("{stem}_step1.json")));
        pre.save_checkpoint(&p)?;
    }
    Ok(paths)
}

/// Generates the datasets once, runs `methods × seeds`, and writes the
/// tables and plots under `out` when given. Job failures are recorded and
/// do not stop the other jobs.
pub fn run_suite(
    cfg: &SuiteConfig,
    methods: &[MethodName],
    seeds: &[u64],
    jobs: usize,
    out: Option<&Path>,
) -> Result<SuiteReport, HarnessError> {
    let started = unix_now();
    let t = Instant::now();
    let prep = Prepared::build(cfg)?;
    info!(
        "datasets ready: {} source / {} target training instances, hash {}",
        prep.training.source_y.len(),
        prep.training.target_refs.len(),
        &prep.dataset_hash[..12]
    );
    let results = run_matrix(cfg, &prep, methods, seeds, jobs)?;

    let mut rows = Vec::new();
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    let mut timings = Vec::new();
    for (method, seed, seconds, res) in results {
        timings.push(JobTiming { method, seed, seconds });
        match res {
            Ok(run) => {
                rows.push(run.row.clone());
                runs.push(run);
            }
            Err(e) => failures.push(JobFailure {
                method,
                seed,
                error: e.to_string(),
            }),
        }
    }
    sort_rows(&mut rows);
    let aggregates = aggregate(&rows);

    let mut artifacts = Vec::new();
    if let Some(out) = out {
        for sub in ["histories", "plots", "checkpoints"] {
            std::fs::create_dir_all(out.join(sub))?;
        }
        let p = out.join("metrics.csv");
        write_csv(&p, &rows)?;
        artifacts.push(p);
        let p = out.join("summary.csv");
        write_csv(&p, &aggregates)?;
        artifacts.push(p);
        let p = out.join("summary.txt");
        std::fs::write(&p, render_summary(&aggregates, Some(&prep.dataset_hash)))?;
        artifacts.push(p);
        if !failures.is_empty() {
            let p = out.join("failures.csv");
            write_csv(&p, &failures)?;
            artifacts.push(p);
        }
        for run in &runs {
            artifacts.extend(write_run(out, &prep, run)?);
        }
        let manifest = serde_json::json!({
            "config": cfg,
            "methods": methods,
            "seeds": seeds,
            "jobs": jobs,
            "dataset_hash": prep.dataset_hash,
            "started_unix": started,
            "finished_unix": unix_now(),
            "wall_seconds": t.elapsed().as_secs_f64(),
            "job_seconds": timings,
            "failures": failures,
        });
        let p = out.join("manifest.json");
        std::fs::write(&p, serde_json::to_string_pretty(&manifest)?)?;
        artifacts.push(p);
    }
    Ok(SuiteReport {
        rows,
        aggregates,
        failures,
        runs,
        dataset_hash: prep.dataset_hash,
        artifacts,
    })
}
