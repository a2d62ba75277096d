//! Online replay engine: consensus ground truth, the query loop, cost
//! accounting, windowed refits of Θ, the two-phase and distribution-shift
//! protocols, and run metrics.
//!
//! Every random stream inside a run is derived from `(run seed, tag, t, …)`,
//! never from a shared mutable generator, so:
//!
//! - policies with different query counts see aligned vote orders per sample,
//! - ground-truth and prediction tie-breaks are replayable in isolation,
//! - identical (stream, policy config, seed) runs are byte-identical.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::distributions::{draw_vote_without_replacement, plurality, CountVector, Simplex};
use crate::error::{Error, Result};
use crate::likelihood::{optimize_map, ObservationRecord, OptimizerConfig, WindowDataset};
use crate::policies::{
    entropy_beta, model_picker_beta, model_picker_update, pick_uniform, random_draw_count,
    threshold_decide, threshold_posterior, Decision, PolicyKind, PolicyState,
};
use crate::prior::PriorParams;
use crate::rng::SplitRng;

// Stream-id tags for derived generators.
const TAG_VOTE: u64 = 1;
const TAG_GT: u64 = 2;
const TAG_DECIDE: u64 = 3;
const TAG_Q: u64 = 4;
const TAG_PRED: u64 = 5;
const TAG_OPT: u64 = 6;
const TAG_SHUFFLE: u64 = 7;

/// Budget buckets used for aggregate reporting.
pub const BUDGET_BUCKETS: [f64; 4] = [0.5, 1.0, 2.0, 3.0];

/// Width of the simple moving averages in [`metrics`].
pub const MOVING_AVERAGE_WINDOW: usize = 100;

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// One stream element: classifier output plus the hidden full expert votes.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamSample {
    id: String,
    f: Simplex,
    vote_pool: Vec<usize>,
}

impl StreamSample {
    pub fn new(id: String, f: Simplex, vote_pool: Vec<usize>) -> Result<Self> {
        if vote_pool.is_empty() {
            return Err(Error::Validation(format!("sample {id} has an empty vote pool")));
        }
        if let Some(&bad) = vote_pool.iter().find(|&&v| v >= f.len()) {
            return Err(Error::Validation(format!(
                "sample {id} has vote {bad} outside [0, {})",
                f.len()
            )));
        }
        Ok(StreamSample { id, f, vote_pool })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn classifier(&self) -> &Simplex {
        &self.f
    }

    pub fn vote_pool(&self) -> &[usize] {
        &self.vote_pool
    }

    pub fn num_classes(&self) -> usize {
        self.f.len()
    }

    /// Histogram of the full pool (defines the consensus target).
    pub fn histogram(&self) -> CountVector {
        let mut h = CountVector::zeros(self.f.len());
        for &v in &self.vote_pool {
            h.increment(v);
        }
        h
    }
}

/// One timestep of an episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub n_queried: u32,
    pub prediction: usize,
    pub ground_truth: usize,
    pub correct: bool,
    pub cum_cost: u64,
    /// Posterior consensus probability at commit time (threshold policies).
    pub acc_commit: Option<f64>,
    /// Digest of Θ when the prediction was made (threshold policies).
    pub theta_hash: Option<String>,
}

/// Run-level metadata and results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub policy: String,
    pub mode: String,
    pub n_experts: u32,
    pub len: usize,
    pub error_rate: f64,
    pub mean_cost: f64,
    pub bucket: Option<String>,
    pub pre_shift_error: Option<f64>,
    pub post_shift_error: Option<f64>,
    pub valid: bool,
    pub abort: Option<String>,
    /// Final Θ of learnable threshold policies.
    pub final_params: Option<PriorParams>,
    /// Accuracy of argmax f against the consensus, per consensus class.
    pub model_per_class_acc: Vec<f64>,
}

/// Full episode log: per-timestep records plus the summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub records: Vec<StepRecord>,
    pub summary: RunSummary,
}

impl EpisodeLog {
    /// Serialize as JSON lines: one object per timestep, then
    /// `{"summary": …}`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.records {
            out.push_str(&serde_json::to_string(rec).expect("serializable record"));
            out.push('\n');
        }
        out.push_str(
            &serde_json::to_string(&serde_json::json!({ "summary": self.summary }))
                .expect("serializable summary"),
        );
        out.push('\n');
        out
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        w.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<EpisodeLog> {
        #[derive(Deserialize)]
        struct SummaryLine {
            summary: RunSummary,
        }
        let mut records = Vec::new();
        let mut summary = None;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if line.starts_with("{\"summary\"") {
                let s: SummaryLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })?;
                summary = Some(s.summary);
            } else {
                let rec: StepRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })?;
                records.push(rec);
            }
        }
        let summary = summary.ok_or_else(|| Error::Parse {
            line: 0,
            msg: "missing summary line".into(),
        })?;
        Ok(EpisodeLog { records, summary })
    }
}

/// Replay settings shared by all run modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub n_experts: u32,
    pub window: usize,
    /// Monte-Carlo samples per query decision.
    pub mc_samples: usize,
    pub optimizer: OptimizerConfig,
    /// First timestep of the query-free phase in two-phase runs.
    pub phase_boundary: usize,
    /// Boundary for pre/post error splits in shift runs.
    pub shift_boundary: Option<usize>,
    pub seed: u64,
}

impl RunConfig {
    pub fn new(n_experts: u32, seed: u64) -> Self {
        RunConfig {
            n_experts,
            window: crate::likelihood::DEFAULT_WINDOW,
            mc_samples: crate::inference::DEFAULT_INFERENCE_SAMPLES,
            optimizer: OptimizerConfig::default(),
            phase_boundary: 1000,
            shift_boundary: None,
            seed,
        }
    }
}

// ---------------------------------------------------------------------------
// Ground truth and replay
// ---------------------------------------------------------------------------

/// Consensus of the full expert pool; ties broken uniformly by `rng`.
pub fn ground_truth(sample: &StreamSample, rng: &mut SplitRng) -> usize {
    plurality(&sample.histogram(), rng)
}

/// Replay a stream under a policy: per sample, query votes one at a time
/// until the policy commits; append purchased records to the window; refit Θ
/// every `refit_interval` committed samples for learnable policies.
pub fn run_sequence(
    stream: &[StreamSample],
    policy: &mut PolicyState,
    cfg: &RunConfig,
) -> EpisodeLog {
    run_impl(stream, policy, cfg, None)
}

/// Two-phase replay: standard behaviour with an unbounded window before the
/// phase boundary; after it querying is forbidden (N_t = 0) and predictions
/// come from the frozen Θ* through the regime's zero-vote posterior.
pub fn run_two_phase(
    stream: &[StreamSample],
    policy: &mut PolicyState,
    cfg: &RunConfig,
) -> EpisodeLog {
    run_impl(stream, policy, cfg, Some(cfg.phase_boundary))
}

fn run_impl(
    stream: &[StreamSample],
    policy: &mut PolicyState,
    cfg: &RunConfig,
    phase_boundary: Option<usize>,
) -> EpisodeLog {
    assert!(!stream.is_empty(), "cannot replay an empty stream");
    let k = stream[0].num_classes();
    let n_pool = cfg.n_experts;
    let seed = cfg.seed;
    let two_phase = phase_boundary.is_some();
    let mut window = if two_phase {
        WindowDataset::unbounded(n_pool)
    } else {
        WindowDataset::new(cfg.window, n_pool)
    };
    let mut records = Vec::with_capacity(stream.len());
    let mut cum_cost = 0u64;
    let mut abort: Option<String> = None;

    // consensus / model-accuracy tallies per class
    let mut class_total = vec![0u64; k];
    let mut class_hit = vec![0u64; k];

    'stream: for (t, sample) in stream.iter().enumerate() {
        debug_assert_eq!(sample.num_classes(), k, "inconsistent class count");
        debug_assert_eq!(sample.vote_pool().len(), n_pool as usize, "pool size mismatch");
        let tt = t as u64;
        let gt = ground_truth(sample, &mut SplitRng::derive(seed, &[TAG_GT, tt]));
        class_total[gt] += 1;
        if sample.classifier().argmax_set()[0] == gt {
            class_hit[gt] += 1;
        }
        let query_free = phase_boundary.map_or(false, |b| t >= b);

        let mut queried = CountVector::zeros(k);
        let mut remaining = sample.histogram();
        let is_threshold = matches!(policy.kind(), PolicyKind::Threshold { .. });

        let (prediction, acc_commit) = if is_threshold {
            let mut outcome = None;
            while outcome.is_none() {
                let n = queried.sum() as u64;
                let mut mc_rng = SplitRng::derive(seed, &[TAG_DECIDE, tt, n]);
                let mut pred_rng = SplitRng::derive(seed, &[TAG_PRED, tt]);
                if query_free {
                    // zero-vote posterior under the frozen Θ*
                    let posterior =
                        threshold_posterior(&queried, sample.classifier(), policy, &mut mc_rng);
                    let class = crate::inference::predict(&posterior, &mut pred_rng);
                    outcome = Some((class, Some(posterior.acc())));
                    break;
                }
                match threshold_decide(
                    &queried,
                    sample.classifier(),
                    policy,
                    &mut mc_rng,
                    &mut pred_rng,
                ) {
                    Decision::Commit { class, acc } => outcome = Some((class, Some(acc))),
                    Decision::Query => {
                        let i = queried.sum() as u64;
                        let mut vote_rng = SplitRng::derive(seed, &[TAG_VOTE, tt, i]);
                        match draw_vote_without_replacement(&remaining, &mut vote_rng) {
                            Ok(class) => {
                                remaining.decrement(class);
                                queried.increment(class);
                            }
                            Err(e) => {
                                abort = Some(format!("policy failure at t={t}: {e}"));
                                break 'stream;
                            }
                        }
                    }
                }
            }
            outcome.expect("loop sets outcome")
        } else {
            // binomial-budget baselines
            let planned = if query_free {
                0
            } else {
                let beta = match *policy.kind() {
                    PolicyKind::Random { beta } => beta,
                    PolicyKind::Entropy { v } => entropy_beta(sample.classifier(), v),
                    PolicyKind::ModelPicker { .. } => {
                        model_picker_beta(sample.classifier(), policy)
                    }
                    PolicyKind::Threshold { .. } => unreachable!(),
                };
                random_draw_count(beta, n_pool, &mut SplitRng::derive(seed, &[TAG_Q, tt]))
            };
            let mut drawn = 0u32;
            while drawn < planned {
                // stop early once the plurality within the planned budget is
                // mathematically settled
                let (top, second) = queried.top_two_counts();
                if (top - second) as u64 > (planned - drawn) as u64 {
                    break;
                }
                let mut vote_rng = SplitRng::derive(seed, &[TAG_VOTE, tt, drawn as u64]);
                match draw_vote_without_replacement(&remaining, &mut vote_rng) {
                    Ok(class) => {
                        remaining.decrement(class);
                        queried.increment(class);
                        drawn += 1;
                    }
                    Err(e) => {
                        abort = Some(format!("policy failure at t={t}: {e}"));
                        break 'stream;
                    }
                }
            }
            let mut pred_rng = SplitRng::derive(seed, &[TAG_PRED, tt]);
            let prediction = if queried.sum() >= 1 {
                plurality(&queried, &mut pred_rng)
            } else {
                pick_uniform(&sample.classifier().argmax_set(), &mut pred_rng)
            };
            if matches!(policy.kind(), PolicyKind::ModelPicker { .. }) && queried.sum() >= 1 {
                // same derived stream as the prediction, so the tracked
                // plurality matches the logged one on ties
                let mut mp_rng = SplitRng::derive(seed, &[TAG_PRED, tt]);
                model_picker_update(policy, &queried, &mut mp_rng);
            }
            (prediction, None)
        };

        let n_queried = queried.sum();
        cum_cost += n_queried as u64;
        records.push(StepRecord {
            t,
            n_queried,
            prediction,
            ground_truth: gt,
            correct: prediction == gt,
            cum_cost,
            acc_commit,
            theta_hash: is_threshold.then(|| policy.params().digest()),
        });

        if !query_free && n_queried >= 1 {
            let rec = ObservationRecord::new(sample.classifier().clone(), queried)
                .expect("n_queried >= 1");
            if let Err(e) = window.push(rec) {
                abort = Some(format!("window failure at t={t}: {e}"));
                break;
            }
        }

        if !query_free
            && policy.learnable()
            && (t + 1) % cfg.optimizer.refit_interval == 0
            && !window.is_empty()
        {
            let mut opt_rng = SplitRng::derive(seed, &[TAG_OPT, tt]);
            match optimize_map(&window, policy.hyper(), &cfg.optimizer, policy.params(), &mut opt_rng)
            {
                Ok(p) => policy.set_params(p),
                Err(e) => {
                    abort = Some(format!("refit failure at t={t}: {e}"));
                    break;
                }
            }
        }
    }

    let model_per_class_acc = class_total
        .iter()
        .zip(&class_hit)
        .map(|(&n, &h)| if n == 0 { 0.0 } else { h as f64 / n as f64 })
        .collect();

    let m = summarize(&records);
    let (pre, post) = match cfg.shift_boundary {
        Some(b) if b > 0 && b < records.len() => {
            let pre_err = error_rate(&records[..b]);
            let post_err = error_rate(&records[b..]);
            (Some(pre_err), Some(post_err))
        }
        _ => (None, None),
    };
    let summary = RunSummary {
        seed,
        policy: policy.describe(),
        mode: if two_phase { "two-phase" } else { "standard" }.into(),
        n_experts: n_pool,
        len: records.len(),
        error_rate: m.error_rate,
        mean_cost: m.mean_cost,
        bucket: m.bucket,
        pre_shift_error: pre,
        post_shift_error: post,
        valid: abort.is_none(),
        abort,
        final_params: matches!(policy.kind(), PolicyKind::Threshold { .. })
            .then(|| policy.params().clone()),
        model_per_class_acc,
    };
    EpisodeLog { records, summary }
}

/// Concatenate independently shuffled clean and noisy halves.
pub fn make_shift_stream(
    clean: &[StreamSample],
    noisy: &[StreamSample],
    seed: u64,
) -> Vec<StreamSample> {
    assert!(!clean.is_empty() && !noisy.is_empty(), "both halves required");
    let mut out = Vec::with_capacity(clean.len() + noisy.len());
    out.extend_from_slice(clean);
    shuffle(&mut out[..], &mut SplitRng::derive(seed, &[TAG_SHUFFLE, 0]));
    let start = out.len();
    out.extend_from_slice(noisy);
    shuffle(
        &mut out[start..],
        &mut SplitRng::derive(seed, &[TAG_SHUFFLE, 1]),
    );
    out
}

/// Reorder a stream with the run seed (the per-seed "sequence drawn in random
/// order" step of every experiment).
pub fn shuffle_stream(stream: &mut [StreamSample], seed: u64) {
    shuffle(stream, &mut SplitRng::derive(seed, &[TAG_SHUFFLE, 2]));
}

pub(crate) fn shuffle<T>(xs: &mut [T], rng: &mut SplitRng) {
    use rand::Rng;
    for i in (1..xs.len()).rev() {
        xs.swap(i, rng.gen_range(0..=i));
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Aggregate statistics of a replayed episode.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSummary {
    pub error_rate: f64,
    pub mean_cost: f64,
    /// Simple moving average of the per-step error, window 100.
    pub moving_error: Vec<f64>,
    /// Simple moving average of the per-step query count, window 100.
    pub moving_cost: Vec<f64>,
    pub bucket: Option<String>,
}

fn error_rate(records: &[StepRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| !r.correct).count() as f64 / records.len() as f64
}

fn summarize(records: &[StepRecord]) -> MetricsSummary {
    let len = records.len();
    let error_rate = error_rate(records);
    let mean_cost = if len == 0 {
        0.0
    } else {
        records.last().map_or(0, |r| r.cum_cost) as f64 / len as f64
    };
    MetricsSummary {
        error_rate,
        mean_cost,
        moving_error: moving_average(records.iter().map(|r| !r.correct as u8 as f64)),
        moving_cost: moving_average(records.iter().map(|r| r.n_queried as f64)),
        bucket: bucket_for(mean_cost),
    }
}

/// Per-timestep error rate, mean cost, moving averages, and budget bucket.
pub fn metrics(log: &EpisodeLog) -> MetricsSummary {
    summarize(&log.records)
}

fn moving_average(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let values: Vec<f64> = values.collect();
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= MOVING_AVERAGE_WINDOW {
            sum -= values[i - MOVING_AVERAGE_WINDOW];
        }
        let width = (i + 1).min(MOVING_AVERAGE_WINDOW);
        out.push(sum / width as f64);
    }
    out
}

/// Budget bucket tag: the b ∈ {0.5, 1, 2, 3} with |mean_cost − b|/b ≤ 0.1.
pub fn bucket_for(mean_cost: f64) -> Option<String> {
    for b in BUDGET_BUCKETS {
        if ((mean_cost - b) / b).abs() <= 0.1 {
            return Some(format_bucket(b));
        }
    }
    None
}

pub fn format_bucket(b: f64) -> String {
    if b == 0.5 {
        "0.5".into()
    } else {
        format!("{}", b as i64)
    }
}

/// Pearson correlation between the learned per-class calibration τ* and the
/// classifier's per-class accuracy against consensus.
pub fn tau_accuracy_correlation(theta_star: &PriorParams, per_class_acc: &[f64]) -> Result<f64> {
    let k = theta_star.num_classes();
    if k < 3 {
        return Err(Error::Validation(format!(
            "correlation needs at least 3 classes, got {k}"
        )));
    }
    if per_class_acc.len() != k {
        return Err(Error::Mismatch(format!(
            "τ has {k} entries, accuracy vector has {}",
            per_class_acc.len()
        )));
    }
    pearson(theta_star.tau(), per_class_acc)
}

pub(crate) fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::UndefinedCorrelation(
            "an input vector has zero variance".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}
