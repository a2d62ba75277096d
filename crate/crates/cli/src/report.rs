//! Aggregate tables from sweep points and run logs: budget-bucket error
//! summaries, pre/post-shift error splits, and τ–accuracy correlations.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use consensus_core::harness::{
    bucket_for, format_bucket, tau_accuracy_correlation, EpisodeLog, BUDGET_BUCKETS,
};

fn mean_stderr(values: &[f64]) -> (Option<f64>, Option<f64>) {
    match values.len() {
        0 => (None, None),
        1 => (Some(values[0]), None),
        n => {
            let mean = values.iter().sum::<f64>() / n as f64;
            let var =
                values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            (Some(mean), Some((var / n as f64).sqrt()))
        }
    }
}

fn na(v: Option<f64>) -> String {
    v.map_or("NA".into(), |x| format!("{x}"))
}

/// Parsed sweep point (only rows with `status == ok`).
struct Point {
    policy: String,
    mean_cost: f64,
    error_rate: f64,
}

fn read_points(points: &Path) -> Result<Vec<Point>> {
    let mut rdr = csv::Reader::from_path(points)
        .with_context(|| format!("reading {}", points.display()))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if &rec[6] != "ok" {
            continue;
        }
        out.push(Point {
            policy: rec[0].to_string(),
            mean_cost: rec[3].parse().context("mean_cost column")?,
            error_rate: rec[4].parse().context("error_rate column")?,
        });
    }
    Ok(out)
}

fn read_logs(logs_dir: &Path) -> Result<Vec<EpisodeLog>> {
    let mut logs = Vec::new();
    let mut paths: Vec<PathBuf> = fs::read_dir(logs_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    for p in paths {
        let file = fs::File::open(&p).with_context(|| format!("opening {}", p.display()))?;
        logs.push(
            EpisodeLog::read_jsonl(BufReader::new(file))
                .with_context(|| format!("parsing {}", p.display()))?,
        );
    }
    Ok(logs)
}

/// Emit `buckets.csv`, `shift.csv`, and `tau_correlation.csv` under `out_dir`.
pub fn cmd_report(points: &Path, logs_dir: &Path, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;

    // --- budget buckets from sweep points -------------------------------
    let pts = read_points(points)?;
    let mut by_policy: BTreeMap<String, Vec<&Point>> = BTreeMap::new();
    for p in &pts {
        by_policy.entry(p.policy.clone()).or_default().push(p);
    }
    let bucket_path = out_dir.join("buckets.csv");
    let mut w = csv::Writer::from_path(&bucket_path)?;
    w.write_record(["policy", "bucket", "n_runs", "mean_error", "stderr_error", "mean_cost"])?;
    for (policy, points) in &by_policy {
        for b in BUDGET_BUCKETS {
            let tag = format_bucket(b);
            // same bucket rule as metrics()
            let in_bucket: Vec<&&Point> = points
                .iter()
                .filter(|p| bucket_for(p.mean_cost).as_deref() == Some(tag.as_str()))
                .collect();
            let errors: Vec<f64> = in_bucket.iter().map(|p| p.error_rate).collect();
            let costs: Vec<f64> = in_bucket.iter().map(|p| p.mean_cost).collect();
            let (mean_err, se) = mean_stderr(&errors);
            let (mean_cost, _) = mean_stderr(&costs);
            w.write_record([
                policy.clone(),
                tag,
                format!("{}", in_bucket.len()),
                na(mean_err),
                na(se),
                na(mean_cost),
            ])?;
        }
    }
    w.flush()?;

    // --- pre/post shift errors from logs --------------------------------
    let logs = read_logs(logs_dir)?;
    let shift_path = out_dir.join("shift.csv");
    let mut w = csv::Writer::from_path(&shift_path)?;
    w.write_record([
        "policy",
        "bucket",
        "n_runs",
        "pre_shift_error",
        "pre_stderr",
        "post_shift_error",
        "post_stderr",
    ])?;
    let mut shift_groups: BTreeMap<(String, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for log in &logs {
        if let (Some(pre), Some(post)) =
            (log.summary.pre_shift_error, log.summary.post_shift_error)
        {
            let bucket = log.summary.bucket.clone().unwrap_or_else(|| "NA".into());
            let entry = shift_groups
                .entry((log.summary.policy.clone(), bucket))
                .or_default();
            entry.0.push(pre);
            entry.1.push(post);
        }
    }
    for ((policy, bucket), (pre, post)) in &shift_groups {
        let (pre_m, pre_se) = mean_stderr(pre);
        let (post_m, post_se) = mean_stderr(post);
        w.write_record([
            policy.clone(),
            bucket.clone(),
            format!("{}", pre.len()),
            na(pre_m),
            na(pre_se),
            na(post_m),
            na(post_se),
        ])?;
    }
    w.flush()?;

    // --- τ–accuracy correlations from logs ------------------------------
    let tau_path = out_dir.join("tau_correlation.csv");
    let mut w = csv::Writer::from_path(&tau_path)?;
    w.write_record(["policy", "seed", "pearson"])?;
    for log in &logs {
        if let Some(params) = &log.summary.final_params {
            if params.num_classes() < 3 {
                continue;
            }
            let value = tau_accuracy_correlation(params, &log.summary.model_per_class_acc)
                .map(|r| format!("{r}"))
                .unwrap_or_else(|_| "NA".into());
            w.write_record([
                log.summary.policy.clone(),
                format!("{}", log.summary.seed),
                value,
            ])?;
        }
    }
    w.flush()?;

    println!(
        "report: {} -> {}, {}, {}",
        points.display(),
        bucket_path.display(),
        shift_path.display(),
        tau_path.display()
    );
    Ok(())
}
