//! Synthetic stream generation with known ground-truth parameters, plus the
//! on-disk dataset container (a JSON header line followed by CSV rows).
//!
//! The generator instantiates the model's own assumptions so that parameter
//! recovery is testable: a true class `z_t` is drawn, the expert population
//! belief comes from `Dirichlet(κ·onehot(z_t) + b·1)`, votes are iid draws
//! from it, and the classifier output is synthesized from a confusion matrix
//! row with per-class temperatures controlling miscalibration:
//!
//! - `c_t ~ Categorical(confusion[z_t])` (the classifier's predicted class),
//! - `f_raw = (onehot(c_t) + confusion[z_t]) / 2` (argmax is always `c_t`),
//! - `f_t ∝ f_raw_k^(1/temperature_k)`, renormalized.
//!
//! Temperatures far from 1 can flip the argmax across classes, which is
//! exactly the miscalibration the τ parameters are meant to learn away.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{dirichlet_sample, ConcentrationVector, Simplex};
use crate::error::{Error, Result};
use crate::harness::{shuffle, StreamSample};
use crate::rng::SplitRng;

const TAG_GEN: u64 = 10;
const TAG_COLS: u64 = 11;
const TAG_SUBSHUF: u64 = 12;

const FORMAT_VERSION: u32 = 1;

/// Parameters of the synthetic stream generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub k: usize,
    pub n_experts: u32,
    pub len: usize,
    /// Distribution of the true class z_t.
    pub class_dist: Vec<f64>,
    /// Expert agreement: π_t ~ Dirichlet(κ·onehot(z_t) + base·1).
    pub kappa: f64,
    pub base: f64,
    /// Row-stochastic K×K matrix; row z is the classifier's label
    /// distribution given true class z.
    pub confusion: Vec<Vec<f64>>,
    /// Per-class temperatures applied to the classifier output.
    pub temperature: Vec<f64>,
    pub seed: u64,
}

impl SyntheticConfig {
    /// Uniform classes, identity confusion, unit temperatures.
    pub fn plain(k: usize, n_experts: u32, len: usize, seed: u64) -> Self {
        SyntheticConfig {
            k,
            n_experts,
            len,
            class_dist: vec![1.0 / k as f64; k],
            kappa: 5.0,
            base: 0.5,
            confusion: (0..k)
                .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
            temperature: vec![1.0; k],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Validation("need at least 2 classes".into()));
        }
        if self.n_experts == 0 || self.len == 0 {
            return Err(Error::Validation(
                "need at least one expert and one sample".into(),
            ));
        }
        check_distribution("class_dist", &self.class_dist, self.k)?;
        if !(self.kappa > 0.0) || !(self.base > 0.0) {
            return Err(Error::Validation(format!(
                "kappa and base must be positive, got {} and {}",
                self.kappa, self.base
            )));
        }
        if self.confusion.len() != self.k {
            return Err(Error::Validation(format!(
                "confusion matrix needs {} rows, got {}",
                self.k,
                self.confusion.len()
            )));
        }
        for (i, row) in self.confusion.iter().enumerate() {
            check_distribution(&format!("confusion row {i}"), row, self.k)?;
        }
        if self.temperature.len() != self.k
            || self.temperature.iter().any(|t| !(t.is_finite() && *t > 0.0))
        {
            return Err(Error::Validation(
                "temperature must hold one positive value per class".into(),
            ));
        }
        Ok(())
    }
}

fn check_distribution(what: &str, p: &[f64], k: usize) -> Result<()> {
    if p.len() != k {
        return Err(Error::Validation(format!(
            "{what} needs {k} entries, got {}",
            p.len()
        )));
    }
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::Validation(format!(
            "{what} entries must be finite and non-negative"
        )));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Validation(format!(
            "{what} sums to {sum}, expected 1 within 1e-6"
        )));
    }
    Ok(())
}

fn categorical(weights: &[f64], rng: &mut SplitRng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Generate a synthetic stream; deterministic in the config's seed.
pub fn generate_stream(cfg: &SyntheticConfig) -> Result<Vec<StreamSample>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.len);
    for t in 0..cfg.len {
        let mut rng = SplitRng::derive(cfg.seed, &[TAG_GEN, t as u64]);
        let z = categorical(&cfg.class_dist, &mut rng);
        let alpha = ConcentrationVector::new(
            (0..cfg.k)
                .map(|j| if j == z { cfg.kappa + cfg.base } else { cfg.base })
                .collect(),
        )
        .expect("positive concentration");
        let pi = dirichlet_sample(&alpha, &mut rng);
        let pool: Vec<usize> = (0..cfg.n_experts)
            .map(|_| categorical(pi.probs(), &mut rng))
            .collect();
        let c = categorical(&cfg.confusion[z], &mut rng);
        let raw: Vec<f64> = cfg.confusion[z]
            .iter()
            .enumerate()
            .map(|(j, r)| (r + if j == c { 1.0 } else { 0.0 }) / 2.0)
            .collect();
        let tempered: Vec<f64> = raw
            .iter()
            .zip(&cfg.temperature)
            .map(|(x, t)| x.powf(1.0 / t))
            .collect();
        let f = Simplex::normalized(tempered)?;
        out.push(StreamSample::new(format!("s{t:05}"), f, pool)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    k: usize,
    n_experts: u32,
    version: u32,
}

/// Write samples as a dataset file: a JSON header line, a CSV column row,
/// then one row per sample (`id, p0..p{K-1}, v0..v{N-1}`). Floats use
/// shortest round-trip formatting, so files are byte-stable per seed.
pub fn write_dataset(samples: &[StreamSample], path: &Path) -> Result<()> {
    let first = samples
        .first()
        .ok_or_else(|| Error::EmptyData("cannot write an empty dataset".into()))?;
    let k = first.num_classes();
    let n = first.vote_pool().len();
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(
        &mut w,
        &DatasetHeader {
            k,
            n_experts: n as u32,
            version: FORMAT_VERSION,
        },
    )?;
    w.write_all(b"\n")?;
    let mut csv = csv::Writer::from_writer(w);
    let mut columns = vec!["id".to_string()];
    columns.extend((0..k).map(|i| format!("p{i}")));
    columns.extend((0..n).map(|i| format!("v{i}")));
    csv.write_record(&columns)?;
    for s in samples {
        if s.num_classes() != k || s.vote_pool().len() != n {
            return Err(Error::Validation(format!(
                "sample {} disagrees with the dataset shape",
                s.id()
            )));
        }
        let mut row = vec![s.id().to_string()];
        row.extend(s.classifier().probs().iter().map(|p| format!("{p}")));
        row.extend(s.vote_pool().iter().map(|v| format!("{v}")));
        csv.write_record(&row)
            .map_err(|e| Error::Validation(format!("csv write failed: {e}")))?;
    }
    csv.flush()?;
    Ok(())
}

/// Load a dataset file; returns (samples, K, N).
pub fn load_dataset(path: &Path) -> Result<(Vec<StreamSample>, usize, u32)> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut header_line = String::new();
    reader.read_line(&mut header_line)?;
    let header: DatasetHeader =
        serde_json::from_str(header_line.trim()).map_err(|e| Error::Parse {
            line: 1,
            msg: format!("bad dataset header: {e}"),
        })?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Validation(format!(
            "unsupported dataset version {}",
            header.version
        )));
    }
    if header.k < 2 || header.n_experts == 0 {
        return Err(Error::Validation(
            "dataset header must declare k ≥ 2 and n_experts ≥ 1".into(),
        ));
    }
    let k = header.k;
    let n = header.n_experts as usize;
    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut samples = Vec::new();
    for record in csv.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e
                .position()
                .map(|p| p.line() as usize + 1)
                .unwrap_or_default(),
            msg: e.to_string(),
        })?;
        // +1 for the JSON header line that precedes the CSV segment
        let line = record.position().map(|p| p.line() as usize + 1).unwrap_or_default();
        if record.len() != 1 + k + n {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", 1 + k + n, record.len()),
            });
        }
        let id = record[0].to_string();
        let mut probs = Vec::with_capacity(k);
        for i in 0..k {
            let p: f64 = record[1 + i].parse().map_err(|e| Error::Parse {
                line,
                msg: format!("bad probability {:?}: {e}", &record[1 + i]),
            })?;
            probs.push(p);
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!(
                "row {id}: probabilities sum to {sum}, expected 1 within 1e-6"
            )));
        }
        let mut pool = Vec::with_capacity(n);
        for i in 0..n {
            let v: usize = record[1 + k + i].parse().map_err(|e| Error::Parse {
                line,
                msg: format!("bad vote {:?}: {e}", &record[1 + k + i]),
            })?;
            if v >= k {
                return Err(Error::Validation(format!(
                    "row {id}: vote {v} outside [0, {k})"
                )));
            }
            pool.push(v);
        }
        let f = Simplex::normalized(probs)
            .map_err(|e| Error::Validation(format!("row {id}: {e}")))?;
        samples.push(StreamSample::new(id, f, pool)?);
    }
    if samples.is_empty() {
        return Err(Error::EmptyData(format!("{} holds no samples", path.display())));
    }
    Ok((samples, k, header.n_experts))
}

/// Keep `n_sub` expert columns chosen once for the whole stream, then
/// reshuffle every sample's vote order with the run seed.
pub fn subsample_experts(
    samples: &[StreamSample],
    n_sub: u32,
    seed: u64,
) -> Result<Vec<StreamSample>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::EmptyData("cannot subsample an empty stream".into()))?;
    let n = first.vote_pool().len();
    if n_sub == 0 || n_sub as usize > n {
        return Err(Error::Validation(format!(
            "cannot keep {n_sub} of {n} experts"
        )));
    }
    let mut columns: Vec<usize> = (0..n).collect();
    shuffle(&mut columns, &mut SplitRng::derive(seed, &[TAG_COLS]));
    columns.truncate(n_sub as usize);
    samples
        .iter()
        .enumerate()
        .map(|(t, s)| {
            if s.vote_pool().len() != n {
                return Err(Error::Validation(format!(
                    "sample {} has {} votes, expected {n}",
                    s.id(),
                    s.vote_pool().len()
                )));
            }
            let mut pool: Vec<usize> = columns.iter().map(|&c| s.vote_pool()[c]).collect();
            shuffle(&mut pool, &mut SplitRng::derive(seed, &[TAG_SUBSHUF, t as u64]));
            StreamSample::new(s.id().to_string(), s.classifier().clone(), pool)
        })
        .collect()
}
