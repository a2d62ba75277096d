//! Experiment driver for online consensus prediction: single runs,
//! hyperparameter sweeps, synthetic dataset generation, and aggregate
//! reports. All behaviour is a pure function of the JSON config file plus
//! explicit flag overrides; environment variables are never consulted.

pub mod report;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use consensus_core::datagen::{generate_stream, load_dataset, subsample_experts, SyntheticConfig};
use consensus_core::harness::{
    make_shift_stream, run_sequence, run_two_phase, shuffle_stream, EpisodeLog, RunConfig,
    StreamSample,
};
use consensus_core::likelihood::OptimizerConfig;
use consensus_core::policies::{PolicyKind, PolicyState, ThresholdRegime};

/// Where the stream comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// A dataset file (JSON header line + CSV rows).
    Path(PathBuf),
    /// Generated on the fly.
    Synthetic(SyntheticConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    #[default]
    Standard,
    TwoPhase,
    Shift,
}

impl RunMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(RunMode::Standard),
            "two-phase" | "two_phase" => Ok(RunMode::TwoPhase),
            "shift" => Ok(RunMode::Shift),
            other => bail!("unknown mode {other:?} (standard | two-phase | shift)"),
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![3, 4, 5]
}

fn default_window() -> usize {
    consensus_core::likelihood::DEFAULT_WINDOW
}

fn default_mc() -> usize {
    consensus_core::inference::DEFAULT_INFERENCE_SAMPLES
}

fn default_phase_boundary() -> usize {
    1000
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// The experiment configuration file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DataSource,
    /// Second (noisy) source for shift mode.
    #[serde(default)]
    pub shift_dataset: Option<DataSource>,
    pub policy: PolicyKind,
    /// Hyperparameter grid for `sweep` (replaces the policy's parameter).
    #[serde(default)]
    pub sweep: Option<Vec<f64>>,
    /// Subsample the expert pool to this size (≤ the source's pool).
    #[serde(default)]
    pub n_experts: Option<u32>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub mode: RunMode,
    #[serde(default = "default_window")]
    pub window: usize,
    /// Monte-Carlo samples per query decision.
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_phase_boundary")]
    pub phase_boundary: usize,
    /// Pre/post split index for shift mode; defaults to the clean half's length.
    #[serde(default)]
    pub shift_boundary: Option<usize>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Sweep worker threads (defaults to the rayon global pool).
    #[serde(default)]
    pub workers: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(cfg)
    }
}

/// Flag overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub policy: Option<String>,
    pub rho: Option<f64>,
    pub beta: Option<f64>,
    pub scale: Option<f64>,
    pub seed: Option<u64>,
    pub experts: Option<u32>,
    pub mc: Option<usize>,
    pub window: Option<usize>,
    pub mode: Option<String>,
    pub out: Option<PathBuf>,
}

pub fn apply_overrides(cfg: &mut ExperimentConfig, ov: &Overrides) -> Result<()> {
    if let Some(name) = &ov.policy {
        cfg.policy = policy_from_name(name, &cfg.policy)?;
    }
    if let Some(rho) = ov.rho {
        match &mut cfg.policy {
            PolicyKind::Threshold { rho: r, .. } => *r = rho,
            other => bail!("--rho applies to threshold policies, not {other:?}"),
        }
    }
    if let Some(beta) = ov.beta {
        match &mut cfg.policy {
            PolicyKind::Random { beta: b } => *b = beta,
            other => bail!("--beta applies to the random policy, not {other:?}"),
        }
    }
    if let Some(scale) = ov.scale {
        match &mut cfg.policy {
            PolicyKind::Entropy { v } => *v = scale,
            PolicyKind::ModelPicker { scale: s, .. } => *s = scale,
            other => bail!("--scale applies to entropy/model-picker, not {other:?}"),
        }
    }
    if let Some(seed) = ov.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(n) = ov.experts {
        cfg.n_experts = Some(n);
    }
    if let Some(mc) = ov.mc {
        cfg.mc_samples = mc;
    }
    if let Some(w) = ov.window {
        cfg.window = w;
    }
    if let Some(mode) = &ov.mode {
        cfg.mode = RunMode::parse(mode)?;
    }
    if let Some(out) = &ov.out {
        cfg.out_dir = out.clone();
    }
    Ok(())
}

fn policy_from_name(name: &str, current: &PolicyKind) -> Result<PolicyKind> {
    let threshold = |regime| {
        let rho = match current {
            PolicyKind::Threshold { rho, .. } => *rho,
            _ => 0.9,
        };
        PolicyKind::Threshold { rho, regime }
    };
    Ok(match name {
        "finexp" => threshold(ThresholdRegime::FinExp),
        "infexp" => threshold(ThresholdRegime::InfExp),
        "fixed-fin" | "fixed_fin" => threshold(ThresholdRegime::FixedFin),
        "fixed-inf" | "fixed_inf" => threshold(ThresholdRegime::FixedInf),
        "random" => PolicyKind::Random {
            beta: match current {
                PolicyKind::Random { beta } => *beta,
                _ => 0.5,
            },
        },
        "entropy" => PolicyKind::Entropy {
            v: match current {
                PolicyKind::Entropy { v } => *v,
                _ => 1.0,
            },
        },
        "model-picker" | "model_picker" | "mp" => PolicyKind::ModelPicker {
            scale: match current {
                PolicyKind::ModelPicker { scale, .. } => *scale,
                _ => 1.0,
            },
            eta: consensus_core::policies::DEFAULT_MP_ETA,
        },
        other => bail!("unknown policy {other:?}"),
    })
}

// ---------------------------------------------------------------------------
// Stream assembly
// ---------------------------------------------------------------------------

fn base_stream(src: &DataSource) -> Result<(Vec<StreamSample>, usize, u32)> {
    match src {
        DataSource::Path(p) => {
            load_dataset(p).with_context(|| format!("loading {}", p.display()))
        }
        DataSource::Synthetic(s) => {
            let stream = generate_stream(s)?;
            Ok((stream, s.k, s.n_experts))
        }
    }
}

fn to_pool_size(
    stream: Vec<StreamSample>,
    available: u32,
    wanted: Option<u32>,
    seed: u64,
) -> Result<(Vec<StreamSample>, u32)> {
    match wanted {
        None => Ok((stream, available)),
        Some(n) if n == available => Ok((stream, n)),
        Some(n) if n < available => Ok((subsample_experts(&stream, n, seed)?, n)),
        Some(n) => bail!("requested {n} experts but the source only has {available}"),
    }
}

/// Build the per-seed stream for a config: load/generate, subsample experts,
/// and order samples (shuffle, or shuffled clean ++ shuffled noisy halves in
/// shift mode). Returns (stream, K, N, shift boundary).
pub fn prepare_stream(
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(Vec<StreamSample>, usize, u32, Option<usize>)> {
    let (clean, k, n_avail) = base_stream(&cfg.dataset)?;
    let (mut clean, n) = to_pool_size(clean, n_avail, cfg.n_experts, seed)?;
    match cfg.mode {
        RunMode::Standard | RunMode::TwoPhase => {
            shuffle_stream(&mut clean, seed);
            Ok((clean, k, n, None))
        }
        RunMode::Shift => {
            let src = cfg
                .shift_dataset
                .as_ref()
                .ok_or_else(|| anyhow!("shift mode needs a shift_dataset"))?;
            let (noisy, k2, n2) = base_stream(src)?;
            if k2 != k {
                bail!("shift dataset has {k2} classes, clean one has {k}");
            }
            let (noisy, n_noisy) = to_pool_size(noisy, n2, cfg.n_experts, seed)?;
            if n_noisy != n {
                bail!("shift dataset has a pool of {n_noisy}, clean one {n}");
            }
            let boundary = cfg.shift_boundary.unwrap_or(clean.len());
            let stream = make_shift_stream(&clean, &noisy, seed);
            Ok((stream, k, n, Some(boundary)))
        }
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// Execute one seeded run of a policy kind under a config.
pub fn run_one(cfg: &ExperimentConfig, kind: PolicyKind, seed: u64) -> Result<EpisodeLog> {
    let (stream, k, n, shift_boundary) = prepare_stream(cfg, seed)?;
    let mut run_cfg = RunConfig::new(n, seed);
    run_cfg.window = cfg.window;
    run_cfg.mc_samples = cfg.mc_samples;
    run_cfg.optimizer = cfg.optimizer;
    run_cfg.phase_boundary = cfg.phase_boundary;
    run_cfg.shift_boundary = shift_boundary;
    let mut policy = PolicyState::with_mc_samples(kind, k, n, cfg.mc_samples)?;
    let log = match cfg.mode {
        RunMode::TwoPhase => run_two_phase(&stream, &mut policy, &run_cfg),
        _ => run_sequence(&stream, &mut policy, &run_cfg),
    };
    Ok(log)
}

/// `run`: one episode per configured seed; writes JSONL logs and prints one
/// summary line per run.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(&cfg.out_dir)?;
    let mut written = Vec::new();
    for &seed in &cfg.seeds {
        let log = run_one(cfg, cfg.policy, seed)?;
        let path = cfg.out_dir.join(format!("run_seed{seed}.jsonl"));
        log.write_jsonl(fs::File::create(&path)?)?;
        println!(
            "policy={} seed={seed} error={:.6} cost={:.6}{}",
            log.summary.policy,
            log.summary.error_rate,
            log.summary.mean_cost,
            match (log.summary.pre_shift_error, log.summary.post_shift_error) {
                (Some(pre), Some(post)) => format!(" pre_shift={pre:.6} post_shift={post:.6}"),
                _ => String::new(),
            }
        );
        written.push(path);
    }
    Ok(written)
}

/// One sweep row: a (hyperparameter, seed) run's scatter point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub policy: String,
    pub param: f64,
    pub seed: u64,
    pub mean_cost: Option<f64>,
    pub error_rate: Option<f64>,
    pub bucket: Option<String>,
    pub status: String,
}

fn kind_with_param(kind: &PolicyKind, param: f64) -> PolicyKind {
    match *kind {
        PolicyKind::Threshold { regime, .. } => PolicyKind::Threshold { rho: param, regime },
        PolicyKind::Random { .. } => PolicyKind::Random { beta: param },
        PolicyKind::Entropy { .. } => PolicyKind::Entropy { v: param },
        PolicyKind::ModelPicker { eta, .. } => PolicyKind::ModelPicker { scale: param, eta },
    }
}

fn sweep_range(kind: &PolicyKind) -> (f64, f64) {
    match kind {
        PolicyKind::Threshold { .. } | PolicyKind::Random { .. } => (0.0, 1.0),
        PolicyKind::Entropy { .. } | PolicyKind::ModelPicker { .. } => (0.0, 1000.0),
    }
}

fn policy_family(kind: &PolicyKind) -> String {
    match kind {
        PolicyKind::Threshold { regime, .. } => match regime {
            ThresholdRegime::FinExp => "threshold:finexp".into(),
            ThresholdRegime::InfExp => "threshold:infexp".into(),
            ThresholdRegime::FixedFin => "threshold:fixed_fin".into(),
            ThresholdRegime::FixedInf => "threshold:fixed_inf".into(),
        },
        PolicyKind::Random { .. } => "random".into(),
        PolicyKind::Entropy { .. } => "entropy".into(),
        PolicyKind::ModelPicker { .. } => "model_picker".into(),
    }
}

/// `sweep`: run every (grid value × seed) combination in parallel and emit
/// one scatter-point row per run, plus the per-run JSONL logs.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let grid = cfg
        .sweep
        .as_ref()
        .filter(|g| !g.is_empty())
        .ok_or_else(|| anyhow!("sweep needs a non-empty `sweep` grid in the config"))?;
    let (lo, hi) = sweep_range(&cfg.policy);
    if let Some(bad) = grid.iter().find(|p| !(**p >= lo && **p <= hi)) {
        bail!(
            "sweep value {bad} outside the {}'s range [{lo}, {hi}]",
            policy_family(&cfg.policy)
        );
    }
    fs::create_dir_all(&cfg.out_dir)?;
    let logs_dir = cfg.out_dir.join("logs");
    fs::create_dir_all(&logs_dir)?;

    let jobs: Vec<(usize, f64, u64)> = grid
        .iter()
        .enumerate()
        .flat_map(|(i, &p)| cfg.seeds.iter().map(move |&s| (i, p, s)))
        .collect();
    let family = policy_family(&cfg.policy);

    let execute = |&(idx, param, seed): &(usize, f64, u64)| -> SweepRow {
        match run_one(cfg, kind_with_param(&cfg.policy, param), seed) {
            Ok(log) => {
                let path = logs_dir.join(format!("sweep_p{idx:03}_seed{seed}.jsonl"));
                let status = match fs::File::create(&path)
                    .map_err(anyhow::Error::from)
                    .and_then(|f| log.write_jsonl(f).map_err(anyhow::Error::from))
                {
                    Ok(()) if log.summary.valid => "ok".to_string(),
                    Ok(()) => format!(
                        "error:{}",
                        log.summary.abort.clone().unwrap_or_else(|| "invalid".into())
                    ),
                    Err(e) => format!("error:{e}"),
                };
                SweepRow {
                    policy: family.clone(),
                    param,
                    seed,
                    mean_cost: Some(log.summary.mean_cost),
                    error_rate: Some(log.summary.error_rate),
                    bucket: log.summary.bucket.clone(),
                    status,
                }
            }
            Err(e) => SweepRow {
                policy: family.clone(),
                param,
                seed,
                mean_cost: None,
                error_rate: None,
                bucket: None,
                status: format!("error:{e}"),
            },
        }
    };

    use rayon::prelude::*;
    let mut rows: Vec<SweepRow> = match cfg.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()?
            .install(|| jobs.par_iter().map(execute).collect()),
        None => jobs.par_iter().map(execute).collect(),
    };
    rows.sort_by(|a, b| {
        a.param
            .partial_cmp(&b.param)
            .unwrap()
            .then(a.seed.cmp(&b.seed))
    });

    let path = cfg.out_dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["policy", "param", "seed", "mean_cost", "error_rate", "bucket", "status"])?;
    for r in &rows {
        w.write_record([
            r.policy.clone(),
            format!("{}", r.param),
            format!("{}", r.seed),
            r.mean_cost.map_or("NA".into(), |v| format!("{v}")),
            r.error_rate.map_or("NA".into(), |v| format!("{v}")),
            r.bucket.clone().unwrap_or_else(|| "NA".into()),
            r.status.clone(),
        ])?;
    }
    w.flush()?;
    println!(
        "sweep: {} rows ({} grid points x {} seeds) -> {}",
        rows.len(),
        grid.len(),
        cfg.seeds.len(),
        path.display()
    );
    Ok(path)
}

/// `synth`: generate a synthetic dataset file.
pub fn cmd_synth(synth: &SyntheticConfig, out: &Path) -> Result<()> {
    let stream = generate_stream(synth)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    consensus_core::datagen::write_dataset(&stream, out)?;
    println!(
        "synth: wrote {} samples (K={}, N={}) -> {}",
        stream.len(),
        synth.k,
        synth.n_experts,
        out.display()
    );
    Ok(())
}
