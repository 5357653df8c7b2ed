//! Streaming per-device datasets: corpus partitioning, arrival-time
//! assignment, and windowed delivery of newly arrived samples.
//!
//! Streams are built once, then read-only; all window queries are
//! idempotent. Windows are half-open `(lo, hi]`, so a sample's arrival time
//! must be strictly positive to ever arrive.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::config::{ArrivalModel, PartitionModel};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("infeasible partition: {0}")]
    InfeasiblePartition(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One labeled training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f32>,
    pub label: usize,
}

/// A sample together with the wall-clock time at which it becomes available.
#[derive(Debug, Clone)]
pub struct StreamEntry {
    pub sample: Sample,
    pub arrival_time: f64,
}

/// A half-open round interval `(since_round, until_round]` on the wall
/// clock; empty when the bounds coincide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundWindow {
    pub since_round: usize,
    pub until_round: usize,
}

impl RoundWindow {
    pub fn new(since_round: usize, until_round: usize) -> Self {
        debug_assert!(since_round <= until_round);
        Self {
            since_round,
            until_round,
        }
    }

    /// Maps the round interval to wall-clock seconds, each round spanning
    /// exactly `round_latency`.
    pub fn wall_clock(&self, round_latency: f64) -> (f64, f64) {
        (
            self.since_round as f64 * round_latency,
            self.until_round as f64 * round_latency,
        )
    }
}

/// One device's full arrival schedule, sorted by arrival time.
#[derive(Debug, Clone, Default)]
pub struct DeviceStream {
    entries: Vec<StreamEntry>,
    classes: usize,
    /// Prefix label histograms: row i holds counts over entries[..i].
    cum_hist: Vec<u32>,
}

impl DeviceStream {
    /// Builds a stream from `(sample, arrival_time)` pairs. Times must be
    /// nondecreasing and finite; labels must fall in `[0, classes)`.
    pub fn new(entries: Vec<StreamEntry>, classes: usize) -> Result<Self, DataError> {
        let mut prev = f64::NEG_INFINITY;
        for e in &entries {
            if !e.arrival_time.is_finite() || e.arrival_time < prev {
                return Err(DataError::Format(
                    "arrival times must be finite and nondecreasing".into(),
                ));
            }
            if e.sample.label >= classes {
                return Err(DataError::Format(format!(
                    "label {} outside [0, {classes})",
                    e.sample.label
                )));
            }
            prev = e.arrival_time;
        }
        let mut cum_hist = vec![0u32; (entries.len() + 1) * classes];
        for (i, e) in entries.iter().enumerate() {
            let (src, dst) = (i * classes, (i + 1) * classes);
            cum_hist.copy_within(src..dst, dst);
            cum_hist[dst + e.sample.label] += 1;
        }
        Ok(Self {
            entries,
            classes,
            cum_hist,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn entries(&self) -> &[StreamEntry] {
        &self.entries
    }

    /// Number of entries with arrival time <= t.
    fn upper(&self, t: f64) -> usize {
        self.entries.partition_point(|e| e.arrival_time <= t)
    }

    /// Samples with arrival time in `(t_lo, t_hi]`.
    pub fn arrived_between(&self, t_lo: f64, t_hi: f64) -> &[StreamEntry] {
        debug_assert!(t_lo <= t_hi);
        &self.entries[self.upper(t_lo)..self.upper(t_hi)]
    }

    /// The cumulative sample set available at time `t`.
    pub fn available_at(&self, t: f64) -> &[StreamEntry] {
        self.arrived_between(0.0, t)
    }

    pub fn count_between(&self, t_lo: f64, t_hi: f64) -> usize {
        self.arrived_between(t_lo, t_hi).len()
    }

    /// Label histogram of the samples arrived in `(t_lo, t_hi]`.
    pub fn hist_between(&self, t_lo: f64, t_hi: f64) -> Vec<u32> {
        let lo = self.upper(t_lo.min(t_hi));
        let hi = self.upper(t_hi);
        let mut out = vec![0u32; self.classes];
        for c in 0..self.classes {
            out[c] = self.cum_hist[hi * self.classes + c] - self.cum_hist[lo * self.classes + c];
        }
        out
    }

    /// Label histogram of the samples available at time `t`.
    pub fn hist_at(&self, t: f64) -> Vec<u32> {
        self.hist_between(0.0, t)
    }
}

/// Splits a corpus into `k` disjoint, equally sized device datasets.
///
/// The corpus is shuffled first and truncated to the largest prefix
/// divisible by `k`. Under `Shards(m)` each device receives samples from at
/// most `m` distinct labels, dealt in chunks from the largest remaining
/// label pools.
pub fn partition<R: Rng + ?Sized>(
    mut corpus: Vec<Sample>,
    model: PartitionModel,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Vec<Sample>>, DataError> {
    assert!(k > 0, "device count must be positive");
    corpus.shuffle(rng);
    let quota = corpus.len() / k;
    corpus.truncate(quota * k);
    match model {
        PartitionModel::Iid => Ok(corpus
            .chunks(quota.max(1))
            .map(|c| c.to_vec())
            .chain(std::iter::repeat_with(Vec::new))
            .take(k)
            .collect()),
        PartitionModel::Shards {
            max_labels_per_device: m,
        } => {
            if m == 0 {
                return Err(DataError::InfeasiblePartition(
                    "shards(0) cannot hold any label".into(),
                ));
            }
            let classes = corpus.iter().map(|s| s.label).max().map_or(0, |l| l + 1);
            let mut pools: Vec<Vec<Sample>> = vec![Vec::new(); classes];
            for s in corpus {
                pools[s.label].push(s);
            }
            // Lay the pools out as one label-sorted tape (label order
            // shuffled, sample order from the corpus shuffle) and cut it
            // into k contiguous quota slices. A slice spans at most two
            // labels whenever every pool holds at least one quota, so the
            // cap is checked rather than steered.
            let mut label_order: Vec<usize> = (0..classes).collect();
            label_order.shuffle(rng);
            let mut tape = Vec::with_capacity(quota * k);
            for &c in &label_order {
                tape.append(&mut pools[c]);
            }
            let mut device_order: Vec<usize> = (0..k).collect();
            device_order.shuffle(rng);
            let mut devices = vec![Vec::new(); k];
            for (i, chunk) in tape.chunks(quota.max(1)).enumerate().take(k) {
                let distinct: std::collections::HashSet<usize> =
                    chunk.iter().map(|s| s.label).collect();
                if distinct.len() > m {
                    return Err(DataError::InfeasiblePartition(format!(
                        "a device quota of {quota} cannot be covered by {m} of {classes} labels"
                    )));
                }
                devices[device_order[i]] = chunk.to_vec();
            }
            Ok(devices)
        }
    }
}

/// Arrival-time model parameters for one run.
#[derive(Debug, Clone, Copy)]
pub struct ArrivalParams {
    pub model: ArrivalModel,
    /// Total wall-clock horizon.
    pub t_tot: f64,
    /// Std of the truncated-normal timing draw.
    pub sigma: f64,
}

/// Orders a device's samples by label (starting from a random cyclic
/// rotation) and assigns sorted arrival timestamps positionally, so label
/// order is preserved in time.
pub fn assign_arrivals<R: Rng + ?Sized>(
    samples: Vec<Sample>,
    params: &ArrivalParams,
    classes: usize,
    rng: &mut R,
) -> Result<DeviceStream, DataError> {
    if samples.is_empty() {
        return DeviceStream::new(Vec::new(), classes);
    }
    let n = samples.len();
    let mut buckets: Vec<Vec<Sample>> = vec![Vec::new(); classes];
    for s in samples {
        buckets[s.label].push(s);
    }
    let start = rng.random_range(0..classes);
    let mut ordered = Vec::with_capacity(n);
    for i in 0..classes {
        ordered.append(&mut buckets[(start + i) % classes]);
    }

    let mut times = Vec::with_capacity(n);
    // Windows are open at zero, so clip just above it.
    let floor = params.t_tot * 1e-12;
    match params.model {
        ArrivalModel::TruncatedNormal => {
            let mu = rng.random_range(0.0..params.t_tot);
            let normal = Normal::new(mu, params.sigma)
                .map_err(|e| DataError::Format(format!("bad arrival sigma: {e}")))?;
            times.extend((0..n).map(|_| normal.sample(rng).clamp(floor, params.t_tot)));
        }
        ArrivalModel::Uniform => {
            times.extend((0..n).map(|_| rng.random_range(0.0..params.t_tot).max(floor)));
        }
    }
    times.sort_by(f64::total_cmp);

    let entries = ordered
        .into_iter()
        .zip(times)
        .map(|(sample, arrival_time)| StreamEntry {
            sample,
            arrival_time,
        })
        .collect();
    DeviceStream::new(entries, classes)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(buf: &[u8], at: usize, what: &str) -> Result<u32, DataError> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Format(format!("truncated header reading {what}")))
}

/// Loads a labeled image corpus from big-endian IDX files, scaling pixels
/// to [0, 1]. Labels must be digits in [0, 10).
pub fn load_idx_corpus(images_path: &Path, labels_path: &Path) -> Result<Vec<Sample>, DataError> {
    let img = std::fs::read(images_path)?;
    let lab = std::fs::read(labels_path)?;

    if be_u32(&img, 0, "image magic")? != IDX_IMAGES_MAGIC {
        return Err(DataError::Format("bad image magic number".into()));
    }
    let count = be_u32(&img, 4, "image count")? as usize;
    let rows = be_u32(&img, 8, "rows")? as usize;
    let cols = be_u32(&img, 12, "cols")? as usize;
    let feature_dim = rows * cols;
    if img.len() != 16 + count * feature_dim {
        return Err(DataError::Format(format!(
            "image payload holds {} bytes, header promises {}",
            img.len() - 16.min(img.len()),
            count * feature_dim
        )));
    }

    if be_u32(&lab, 0, "label magic")? != IDX_LABELS_MAGIC {
        return Err(DataError::Format("bad label magic number".into()));
    }
    let lab_count = be_u32(&lab, 4, "label count")? as usize;
    if lab_count != count {
        return Err(DataError::Format(format!(
            "{count} images but {lab_count} labels"
        )));
    }
    if lab.len() != 8 + count {
        return Err(DataError::Format("truncated label payload".into()));
    }

    let mut corpus = Vec::with_capacity(count);
    for i in 0..count {
        let label = lab[8 + i] as usize;
        if label >= 10 {
            return Err(DataError::Format(format!(
                "label {label} outside [0, 10) at index {i}"
            )));
        }
        let at = 16 + i * feature_dim;
        let features = img[at..at + feature_dim]
            .iter()
            .map(|&p| p as f32 / 255.0)
            .collect();
        corpus.push(Sample { features, label });
    }
    Ok(corpus)
}

/// Generates a balanced class-conditional Gaussian corpus with unit noise
/// and class means `separation` apart (exactly when `feature_dim >=
/// classes`, in expectation otherwise).
pub fn synth_corpus<R: Rng + ?Sized>(
    classes: usize,
    n: usize,
    feature_dim: usize,
    separation: f64,
    rng: &mut R,
) -> Vec<Sample> {
    assert!(classes >= 1 && feature_dim >= 1);
    let scale = separation / 2f64.sqrt();
    let means: Vec<Vec<f64>> = if feature_dim >= classes {
        (0..classes)
            .map(|c| {
                let mut m = vec![0.0; feature_dim];
                m[c] = scale;
                m
            })
            .collect()
    } else {
        let sd = scale / (feature_dim as f64).sqrt();
        let normal = Normal::new(0.0, sd).expect("finite std");
        (0..classes)
            .map(|_| (0..feature_dim).map(|_| normal.sample(rng)).collect())
            .collect()
    };

    let noise = Normal::new(0.0, 1.0).expect("unit std");
    let base = n / classes;
    let extra = n % classes;
    let mut corpus = Vec::with_capacity(n);
    for label in 0..classes {
        let count = base + usize::from(label < extra);
        for _ in 0..count {
            let features = means[label]
                .iter()
                .map(|&m| (m + noise.sample(rng)) as f32)
                .collect();
            corpus.push(Sample { features, label });
        }
    }
    corpus
}
