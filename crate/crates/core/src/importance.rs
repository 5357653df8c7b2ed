//! Per-device data-importance scoring: share of newly arrived data plus
//! label-distribution dissimilarity against the already-utilized data.

use thiserror::Error;

use crate::sim::DeviceId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ImportanceError {
    /// A feature vector cannot be built from an empty sample set.
    #[error("empty sample set")]
    EmptySet,
}

/// Which window defines a device's "newly arrived" data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NewDataWindow {
    /// Everything since the device's last scheduled round (since the start
    /// for never-scheduled devices).
    SinceLastScheduled,
    /// Only the previous round's arrivals.
    PerRound,
}

/// Which terms of the importance metric are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceVariant {
    Combined,
    AmountOnly,
    DistributionOnly,
}

/// Mean-centered, mean-normalized label distribution; entries sum to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }
}

/// Builds the feature vector `(l_i - mean) / mean` from a label histogram.
pub fn feature_vector(hist: &[u32]) -> Result<FeatureVector, ImportanceError> {
    let total: u64 = hist.iter().map(|&c| c as u64).sum();
    if total == 0 {
        return Err(ImportanceError::EmptySet);
    }
    let mean = total as f64 / hist.len() as f64;
    Ok(FeatureVector(
        hist.iter().map(|&c| (c as f64 - mean) / mean).collect(),
    ))
}

/// Normalized squared Euclidean distance between two feature vectors, in
/// [0, 2]. Two zero vectors (both histograms uniform) compare as identical.
pub fn dissimilarity(x: &FeatureVector, y: &FeatureVector) -> f64 {
    let denom = x.norm_sq() + y.norm_sq();
    if denom == 0.0 {
        return 0.0;
    }
    let dist_sq: f64 = x
        .0
        .iter()
        .zip(&y.0)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    dist_sq / denom
}

/// Everything the importance metric needs for one round, restricted to the
/// candidate (feasible) device set.
#[derive(Debug, Clone)]
pub struct ImportanceInputs {
    pub round: usize,
    /// Candidate devices, ascending.
    pub candidates: Vec<DeviceId>,
    /// Newly-arrived sample counts, aligned with `candidates`.
    pub new_counts: Vec<u64>,
    /// Newly-arrived label histograms, aligned with `candidates`.
    pub new_hists: Vec<Vec<u32>>,
    /// Label histogram of all data already utilized in aggregation.
    pub utilized_hist: Vec<u32>,
}

/// Computes the importance score for every candidate device.
///
/// The amount term distributes `|candidates|` units of mass proportionally
/// to the new-data counts (zero for everyone when nothing arrived). The
/// distribution term is the feature dissimilarity to the utilized data,
/// zero in the first round, for devices without new data, and while nothing
/// has been utilized yet.
pub fn importance(inputs: &ImportanceInputs, variant: ImportanceVariant) -> Vec<f64> {
    let n = inputs.candidates.len();
    debug_assert_eq!(inputs.new_counts.len(), n);
    debug_assert_eq!(inputs.new_hists.len(), n);

    let total_new: u64 = inputs.new_counts.iter().sum();
    let utilized = feature_vector(&inputs.utilized_hist).ok();

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let amount = if total_new == 0 {
            0.0
        } else {
            n as f64 * inputs.new_counts[i] as f64 / total_new as f64
        };
        let distribution = match (&utilized, inputs.round > 1, inputs.new_counts[i] > 0) {
            (Some(x), true, true) => {
                let y = feature_vector(&inputs.new_hists[i]).expect("count > 0");
                dissimilarity(x, &y)
            }
            _ => 0.0,
        };
        out.push(match variant {
            ImportanceVariant::Combined => amount + distribution,
            ImportanceVariant::AmountOnly => amount,
            ImportanceVariant::DistributionOnly => distribution,
        });
    }
    out
}
