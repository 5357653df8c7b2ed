//! System constants, distributions, and experiment knobs.
//!
//! All physical quantities are stored in SI units (Hz, W, J, s, bits).
//! dBm/dB appear only at the config-file boundary.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::importance::NewDataWindow;
use crate::learner::SgdConfig;

/// Error produced by config parsing or validation. Identifies the first
/// violated field.
#[derive(Debug, Clone, Error, PartialEq)]
#[error("config field `{field}`: {reason}")]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

/// Converts a power level in dBm to linear watts.
pub fn dbm_to_watts(p_dbm: f64) -> f64 {
    10f64.powf(p_dbm / 10.0) / 1000.0
}

/// Converts a ratio in dB to a linear factor.
pub fn db_to_linear(x_db: f64) -> f64 {
    10f64.powf(x_db / 10.0)
}

/// Converts a linear factor to dB.
pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// How sample arrival timestamps are drawn over the run's wall clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalModel {
    /// Per-device normal with mean uniform over the full horizon, clipped
    /// into the horizon.
    TruncatedNormal,
    /// Uniform over the full horizon.
    Uniform,
}

/// How the labeled corpus is split across devices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionModel {
    /// Uniform random split without replacement.
    Iid,
    /// Label-restricted split: each device sees at most this many distinct
    /// labels.
    Shards { max_labels_per_device: usize },
}

/// Physical, algorithmic, and experiment constants for one run.
///
/// Immutable after validation; safe to share across threads.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemConfig {
    /// Number of edge devices K.
    pub num_devices: usize,
    /// Model dimension d used for communication/computation accounting.
    pub model_dim: usize,
    /// Total uplink bandwidth B in Hz.
    pub bandwidth: f64,
    /// Noise power term N0 in W (multiplies B in the SNR denominator).
    pub noise_density: f64,
    /// Effective received power P0 in W.
    pub eff_rx_power_p0: f64,
    /// Power coefficient of the CPU energy model.
    pub power_coeff: f64,
    /// CPU cycles per local update round.
    pub cycles_c: f64,
    /// Bits per transmitted model update.
    pub update_bits: f64,
    /// Per-round latency bound T_rd in seconds.
    pub round_latency: f64,
    /// Per-device per-round energy budget in J.
    pub avg_energy: f64,
    /// Tradeoff weight V between queue stability and data importance.
    pub tradeoff_v: f64,
    /// Rate margin gamma in (0, 1] applied to the surrogate rate.
    pub rate_margin: f64,
    /// Target number of scheduled devices per round.
    pub sched_cardinality: usize,
    /// CPU frequency draw range [f_lo, f_hi] in Hz.
    pub cpu_freq_range: (f64, f64),
    /// Large-scale fading draw range [lo, hi] in dB.
    pub fading_db_range: (f64, f64),
    pub arrival_model: ArrivalModel,
    pub partition_model: PartitionModel,
    /// Number of simulated rounds T.
    pub total_rounds: usize,
    pub seed: u64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        let d = 21840usize;
        Self {
            num_devices: 40,
            model_dim: d,
            bandwidth: 2e7,
            noise_density: 1e-13,
            eff_rx_power_p0: dbm_to_watts(28.0),
            power_coeff: 1e-27,
            cycles_c: 600.0 * 32.0 * d as f64,
            update_bits: 32.0 * d as f64,
            round_latency: 4.0,
            avg_energy: 5e-4,
            tradeoff_v: 0.05,
            rate_margin: 0.8,
            sched_cardinality: 2,
            cpu_freq_range: (0.02e9, 1.52e9),
            fading_db_range: (-5.0, 3.0),
            arrival_model: ArrivalModel::TruncatedNormal,
            partition_model: PartitionModel::Iid,
            total_rounds: 300,
            seed: 1,
        }
    }
}

impl SystemConfig {
    /// Wall-clock horizon covered by the run, in seconds.
    pub fn total_time(&self) -> f64 {
        self.total_rounds as f64 * self.round_latency
    }

    /// Checks every invariant, reporting the first violated field.
    pub fn validate(&self) -> Result<(), ConfigError> {
        fn positive(field: &str, v: f64) -> Result<(), ConfigError> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(ConfigError::new(field, format!("must be positive, got {v}")))
            }
        }
        if self.num_devices == 0 {
            return Err(ConfigError::new("num_devices", "must be at least 1"));
        }
        if self.model_dim == 0 {
            return Err(ConfigError::new("model_dim", "must be at least 1"));
        }
        positive("bandwidth", self.bandwidth)?;
        positive("noise_density", self.noise_density)?;
        positive("eff_rx_power_P0", self.eff_rx_power_p0)?;
        positive("power_coeff", self.power_coeff)?;
        positive("cycles_c", self.cycles_c)?;
        positive("update_bits", self.update_bits)?;
        positive("round_latency", self.round_latency)?;
        positive("avg_energy", self.avg_energy)?;
        if !self.tradeoff_v.is_finite() || self.tradeoff_v < 0.0 {
            return Err(ConfigError::new("tradeoff_V", "must be finite and >= 0"));
        }
        if !(self.rate_margin > 0.0 && self.rate_margin <= 1.0) {
            return Err(ConfigError::new("rate_margin", "must lie in (0, 1]"));
        }
        if self.sched_cardinality == 0 || self.sched_cardinality > self.num_devices {
            return Err(ConfigError::new(
                "sched_cardinality",
                format!("must lie in [1, {}]", self.num_devices),
            ));
        }
        let (f_lo, f_hi) = self.cpu_freq_range;
        if !(f_lo.is_finite() && f_hi.is_finite() && f_lo > 0.0 && f_lo <= f_hi) {
            return Err(ConfigError::new(
                "cpu_freq_range",
                "bounds must be positive, finite, and ordered",
            ));
        }
        // Even the fastest CPU must fit the computation inside one round.
        if self.cycles_c / f_hi >= self.round_latency {
            return Err(ConfigError::new(
                "cpu_freq_range",
                format!(
                    "cycles_c / f_hi = {} s does not fit within round_latency = {} s",
                    self.cycles_c / f_hi,
                    self.round_latency
                ),
            ));
        }
        let (b_lo, b_hi) = self.fading_db_range;
        if !(b_lo.is_finite() && b_hi.is_finite() && b_lo <= b_hi) {
            return Err(ConfigError::new(
                "fading_dB_range",
                "bounds must be finite and ordered",
            ));
        }
        if let PartitionModel::Shards {
            max_labels_per_device,
        } = self.partition_model
        {
            if max_labels_per_device == 0 {
                return Err(ConfigError::new(
                    "partition_model",
                    "shards(m) requires m >= 1",
                ));
            }
        }
        if self.total_rounds == 0 {
            return Err(ConfigError::new("total_rounds", "must be at least 1"));
        }
        Ok(())
    }
}

/// Shared classifier architecture trained by the devices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Softmax,
    Mlp { hidden: usize },
}

/// Where the labeled corpus comes from.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synth {
        classes: usize,
        samples: usize,
        feature_dim: usize,
        separation: f64,
        test_samples: usize,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
    },
}

impl DataSource {
    pub fn feature_dim(&self) -> usize {
        match self {
            DataSource::Synth { feature_dim, .. } => *feature_dim,
            DataSource::Idx { .. } => 784,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            DataSource::Synth { classes, .. } => *classes,
            DataSource::Idx { .. } => 10,
        }
    }
}

/// Full experiment configuration: system constants plus data, learner, and
/// harness knobs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub system: SystemConfig,
    pub sgd: SgdConfig,
    pub learner: LearnerKind,
    pub data: DataSource,
    /// Std of the truncated-normal arrival times, as a fraction of the
    /// total horizon.
    pub arrival_sigma_frac: f64,
    /// Window used for the "newly arrived data" statistics.
    pub new_data_window: NewDataWindow,
    /// When set, devices whose selection score is positive are dropped
    /// instead of padding the scheduled set to the target cardinality.
    pub allow_shrink: bool,
    /// Evaluate the global model every this many rounds (0 = never).
    pub eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DataSource::Synth {
            classes: 10,
            samples: 4000,
            feature_dim: 16,
            separation: 3.0,
            test_samples: 2000,
        };
        Self {
            system: SystemConfig::default(),
            sgd: SgdConfig::default(),
            learner: LearnerKind::Softmax,
            data,
            arrival_sigma_frac: 0.1,
            new_data_window: NewDataWindow::SinceLastScheduled,
            allow_shrink: false,
            eval_every: 1,
        }
    }
}

impl RunConfig {
    /// Parameter count of the configured learner on the configured data.
    pub fn learner_dim(&self) -> usize {
        let fd = self.data.feature_dim();
        let c = self.data.classes();
        match self.learner {
            LearnerKind::Softmax => fd * c + c,
            LearnerKind::Mlp { hidden } => hidden * fd + hidden + c * hidden + c,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.system.validate()?;
        if self.sgd.local_steps == 0 {
            return Err(ConfigError::new("sgd_local_steps", "must be at least 1"));
        }
        if self.sgd.batch_size == 0 {
            return Err(ConfigError::new("sgd_batch_size", "must be at least 1"));
        }
        if !(self.sgd.learning_rate.is_finite() && self.sgd.learning_rate >= 0.0) {
            return Err(ConfigError::new(
                "sgd_learning_rate",
                "must be finite and >= 0",
            ));
        }
        if !(self.arrival_sigma_frac.is_finite() && self.arrival_sigma_frac > 0.0) {
            return Err(ConfigError::new("arrival_sigma_frac", "must be positive"));
        }
        if let LearnerKind::Mlp { hidden } = self.learner {
            if hidden == 0 {
                return Err(ConfigError::new("learner", "mlp hidden width must be >= 1"));
            }
        }
        match &self.data {
            DataSource::Synth {
                classes,
                samples,
                feature_dim,
                separation,
                test_samples,
            } => {
                if *classes == 0 || *samples == 0 || *feature_dim == 0 {
                    return Err(ConfigError::new(
                        "data",
                        "synth classes, samples, and feature_dim must be >= 1",
                    ));
                }
                if !(separation.is_finite() && *separation >= 0.0) {
                    return Err(ConfigError::new(
                        "synth_separation",
                        "must be finite and >= 0",
                    ));
                }
                if *test_samples == 0 {
                    return Err(ConfigError::new("synth_test_samples", "must be >= 1"));
                }
            }
            DataSource::Idx {
                test_images,
                test_labels,
                ..
            } => {
                if test_images.is_some() != test_labels.is_some() {
                    return Err(ConfigError::new(
                        "idx_test_images",
                        "test images and labels must be given together",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Parses the flat `key = value` config format into a key/value map.
///
/// Lines starting with `#` and blank lines are ignored.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            ConfigError::new(
                format!("line {}", lineno + 1),
                format!("expected `key = value`, got `{line}`"),
            )
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

/// Reads a config file and applies `key=value` overrides on top.
pub fn load_run_config(
    path: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<RunConfig, ConfigError> {
    let mut map = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                ConfigError::new("config", format!("cannot read {}: {e}", p.display()))
            })?;
            parse_kv(&text)?
        }
        None => BTreeMap::new(),
    };
    for (k, v) in overrides {
        map.insert(k.clone(), v.clone());
    }
    build_run_config(&map)
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| ConfigError::new(key, format!("cannot parse `{v}`: {e}")))
}

fn parse_pair(key: &str, v: &str) -> Result<(f64, f64), ConfigError> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(ConfigError::new(
            key,
            format!("expected `lo, hi`, got `{v}`"),
        ));
    }
    Ok((parse_num(key, parts[0])?, parse_num(key, parts[1])?))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::new(key, format!("expected bool, got `{v}`"))),
    }
}

/// Extracts the argument of a `name(arg)` value.
fn paren_arg<'a>(key: &str, v: &'a str, name: &str) -> Result<&'a str, ConfigError> {
    v.strip_prefix(name)
        .and_then(|rest| rest.trim().strip_prefix('('))
        .and_then(|rest| rest.strip_suffix(')'))
        .map(str::trim)
        .ok_or_else(|| ConfigError::new(key, format!("expected `{name}(...)`, got `{v}`")))
}

const KNOWN_KEYS: &[&str] = &[
    "num_devices",
    "model_dim",
    "bandwidth",
    "noise_density",
    "eff_rx_power_P0",
    "power_coeff",
    "cycles_c",
    "update_bits",
    "round_latency",
    "avg_energy",
    "tradeoff_V",
    "rate_margin",
    "sched_cardinality",
    "cpu_freq_range",
    "fading_dB_range",
    "arrival_model",
    "partition_model",
    "total_rounds",
    "seed",
    "sgd_local_steps",
    "sgd_batch_size",
    "sgd_learning_rate",
    "learner",
    "data",
    "synth_classes",
    "synth_samples",
    "synth_feature_dim",
    "synth_separation",
    "synth_test_samples",
    "idx_images",
    "idx_labels",
    "idx_test_images",
    "idx_test_labels",
    "arrival_sigma_frac",
    "new_data_window",
    "allow_shrink",
    "eval_every",
];

/// Builds a validated [`RunConfig`] from a flat key/value map.
///
/// Keys match the documented config-file keys. `eff_rx_power_P0` is given in
/// dBm and stored in watts. `model_dim` defaults to the learner's parameter
/// count; `cycles_c` and `update_bits` default to `600*32*model_dim` and
/// `32*model_dim`.
pub fn build_run_config(map: &BTreeMap<String, String>) -> Result<RunConfig, ConfigError> {
    for key in map.keys() {
        if !KNOWN_KEYS.contains(&key.as_str()) && !key.starts_with("line ") {
            return Err(ConfigError::new(key.clone(), "unknown config key"));
        }
    }
    let get = |k: &str| map.get(k).map(String::as_str);

    let data = match get("data").unwrap_or("synth") {
        "synth" => {
            let d = RunConfig::default();
            let DataSource::Synth {
                classes,
                samples,
                feature_dim,
                separation,
                test_samples,
            } = d.data
            else {
                unreachable!()
            };
            DataSource::Synth {
                classes: match get("synth_classes") {
                    Some(v) => parse_num("synth_classes", v)?,
                    None => classes,
                },
                samples: match get("synth_samples") {
                    Some(v) => parse_num("synth_samples", v)?,
                    None => samples,
                },
                feature_dim: match get("synth_feature_dim") {
                    Some(v) => parse_num("synth_feature_dim", v)?,
                    None => feature_dim,
                },
                separation: match get("synth_separation") {
                    Some(v) => parse_num("synth_separation", v)?,
                    None => separation,
                },
                test_samples: match get("synth_test_samples") {
                    Some(v) => parse_num("synth_test_samples", v)?,
                    None => test_samples,
                },
            }
        }
        "idx" => {
            let images = get("idx_images")
                .ok_or_else(|| ConfigError::new("idx_images", "required when data = idx"))?;
            let labels = get("idx_labels")
                .ok_or_else(|| ConfigError::new("idx_labels", "required when data = idx"))?;
            DataSource::Idx {
                images: PathBuf::from(images),
                labels: PathBuf::from(labels),
                test_images: get("idx_test_images").map(PathBuf::from),
                test_labels: get("idx_test_labels").map(PathBuf::from),
            }
        }
        other => {
            return Err(ConfigError::new(
                "data",
                format!("expected `synth` or `idx`, got `{other}`"),
            ))
        }
    };

    let learner = match get("learner").unwrap_or("softmax") {
        "softmax" => LearnerKind::Softmax,
        v if v.starts_with("mlp") => LearnerKind::Mlp {
            hidden: parse_num("learner", paren_arg("learner", v, "mlp")?)?,
        },
        other => {
            return Err(ConfigError::new(
                "learner",
                format!("expected `softmax` or `mlp(width)`, got `{other}`"),
            ))
        }
    };

    let fd = data.feature_dim();
    let classes = data.classes();
    let learner_dim = match learner {
        LearnerKind::Softmax => fd * classes + classes,
        LearnerKind::Mlp { hidden } => hidden * fd + hidden + classes * hidden + classes,
    };

    let model_dim = match get("model_dim") {
        Some(v) => parse_num("model_dim", v)?,
        None => learner_dim,
    };
    let cycles_c = match get("cycles_c") {
        Some(v) => parse_num("cycles_c", v)?,
        None => 600.0 * 32.0 * model_dim as f64,
    };
    let update_bits = match get("update_bits") {
        Some(v) => parse_num("update_bits", v)?,
        None => 32.0 * model_dim as f64,
    };

    let defaults = SystemConfig::default();
    let num_devices = match get("num_devices") {
        Some(v) => parse_num("num_devices", v)?,
        None => defaults.num_devices,
    };
    let system = SystemConfig {
        num_devices,
        model_dim,
        bandwidth: match get("bandwidth") {
            Some(v) => parse_num("bandwidth", v)?,
            None => defaults.bandwidth,
        },
        noise_density: match get("noise_density") {
            Some(v) => parse_num("noise_density", v)?,
            None => defaults.noise_density,
        },
        eff_rx_power_p0: match get("eff_rx_power_P0") {
            Some(v) => dbm_to_watts(parse_num("eff_rx_power_P0", v)?),
            None => defaults.eff_rx_power_p0,
        },
        power_coeff: match get("power_coeff") {
            Some(v) => parse_num("power_coeff", v)?,
            None => defaults.power_coeff,
        },
        cycles_c,
        update_bits,
        round_latency: match get("round_latency") {
            Some(v) => parse_num("round_latency", v)?,
            None => defaults.round_latency,
        },
        avg_energy: match get("avg_energy") {
            Some(v) => parse_num("avg_energy", v)?,
            None => defaults.avg_energy,
        },
        tradeoff_v: match get("tradeoff_V") {
            Some(v) => parse_num("tradeoff_V", v)?,
            None => defaults.tradeoff_v,
        },
        rate_margin: match get("rate_margin") {
            Some(v) => parse_num("rate_margin", v)?,
            None => defaults.rate_margin,
        },
        sched_cardinality: match get("sched_cardinality") {
            Some(v) => parse_num("sched_cardinality", v)?,
            None => defaults.sched_cardinality.min(num_devices),
        },
        cpu_freq_range: match get("cpu_freq_range") {
            Some(v) => parse_pair("cpu_freq_range", v)?,
            None => defaults.cpu_freq_range,
        },
        fading_db_range: match get("fading_dB_range") {
            Some(v) => parse_pair("fading_dB_range", v)?,
            None => defaults.fading_db_range,
        },
        arrival_model: match get("arrival_model") {
            Some("truncated_normal") => ArrivalModel::TruncatedNormal,
            Some("uniform") => ArrivalModel::Uniform,
            Some(other) => {
                return Err(ConfigError::new(
                    "arrival_model",
                    format!("expected `truncated_normal` or `uniform`, got `{other}`"),
                ))
            }
            None => defaults.arrival_model,
        },
        partition_model: match get("partition_model") {
            Some("iid") => PartitionModel::Iid,
            Some(v) if v.starts_with("shards") => PartitionModel::Shards {
                max_labels_per_device: parse_num(
                    "partition_model",
                    paren_arg("partition_model", v, "shards")?,
                )?,
            },
            Some(other) => {
                return Err(ConfigError::new(
                    "partition_model",
                    format!("expected `iid` or `shards(m)`, got `{other}`"),
                ))
            }
            None => defaults.partition_model,
        },
        total_rounds: match get("total_rounds") {
            Some(v) => parse_num("total_rounds", v)?,
            None => defaults.total_rounds,
        },
        seed: match get("seed") {
            Some(v) => parse_num("seed", v)?,
            None => defaults.seed,
        },
    };

    let base = RunConfig::default();
    let cfg = RunConfig {
        system,
        sgd: SgdConfig {
            local_steps: match get("sgd_local_steps") {
                Some(v) => parse_num("sgd_local_steps", v)?,
                None => base.sgd.local_steps,
            },
            batch_size: match get("sgd_batch_size") {
                Some(v) => parse_num("sgd_batch_size", v)?,
                None => base.sgd.batch_size,
            },
            learning_rate: match get("sgd_learning_rate") {
                Some(v) => parse_num("sgd_learning_rate", v)?,
                None => base.sgd.learning_rate,
            },
        },
        learner,
        data,
        arrival_sigma_frac: match get("arrival_sigma_frac") {
            Some(v) => parse_num("arrival_sigma_frac", v)?,
            None => base.arrival_sigma_frac,
        },
        new_data_window: match get("new_data_window") {
            Some("since_last_scheduled") => NewDataWindow::SinceLastScheduled,
            Some("per_round") => NewDataWindow::PerRound,
            Some(other) => {
                return Err(ConfigError::new(
                    "new_data_window",
                    format!("expected `since_last_scheduled` or `per_round`, got `{other}`"),
                ))
            }
            None => base.new_data_window,
        },
        allow_shrink: match get("allow_shrink") {
            Some(v) => parse_bool("allow_shrink", v)?,
            None => base.allow_shrink,
        },
        eval_every: match get("eval_every") {
            Some(v) => parse_num("eval_every", v)?,
            None => base.eval_every,
        },
    };
    cfg.validate()?;
    Ok(cfg)
}
