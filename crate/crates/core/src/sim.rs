//! Round-loop orchestration: feasibility, importance, scheduling, local
//! training, pruning, energy accounting, queue updates, and aggregation.
//!
//! One coordinator drives rounds sequentially; within a round, per-device
//! local training fans out to workers and joins before aggregation. All
//! randomness flows through keyed substreams, so logs are bit-identical
//! across repeats and across sequential/parallel execution.

use rand::Rng;
use thiserror::Error;

use crate::config::{db_to_linear, ConfigError, DataSource, LearnerKind, RunConfig};
use crate::data::{
    assign_arrivals, load_idx_corpus, partition, synth_corpus, ArrivalParams, DataError,
    DeviceStream, RoundWindow, Sample,
};
use crate::exec::{self, ExecMode};
use crate::importance::{importance, ImportanceInputs, ImportanceVariant, NewDataWindow};
use crate::learner::{
    aggregate, batch_loss, evaluate_with_mode, local_train, Architecture, GlobalModel,
    LearnerError, LocalUpdate,
};
use crate::physics::{
    achievable_rate, compute_energy, compute_time, draw_channel, transmission, tx_power_for,
    PhysicsError,
};
use crate::rng::{RngFactory, StreamPurpose};
use crate::scheduler::{feasible_set, per_device_score, prune, queue_update, schedule};

pub type DeviceId = usize;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
}

/// Which selection rule fills the per-round device set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulerKind {
    /// Drift-plus-penalty selection with the given importance variant.
    Proposed(ImportanceVariant),
    /// Uniform choice among the feasible devices; same feasibility filter
    /// and pruning as the proposed rule, so comparisons isolate selection.
    RandomFeasible,
}

impl SchedulerKind {
    pub fn label(&self) -> &'static str {
        match self {
            SchedulerKind::Proposed(ImportanceVariant::Combined) => "proposed",
            SchedulerKind::Proposed(ImportanceVariant::AmountOnly) => "amount-only",
            SchedulerKind::Proposed(ImportanceVariant::DistributionOnly) => "distribution-only",
            SchedulerKind::RandomFeasible => "random",
        }
    }
}

impl std::fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for SchedulerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "proposed" => Ok(SchedulerKind::Proposed(ImportanceVariant::Combined)),
            "amount-only" => Ok(SchedulerKind::Proposed(ImportanceVariant::AmountOnly)),
            "distribution-only" => {
                Ok(SchedulerKind::Proposed(ImportanceVariant::DistributionOnly))
            }
            "random" => Ok(SchedulerKind::RandomFeasible),
            other => Err(format!(
                "unknown scheduler `{other}` (expected proposed, amount-only, \
                 distribution-only, or random)"
            )),
        }
    }
}

/// Per-device record for one round. Energies and times are the *charged*
/// values: computation is charged to scheduled devices, transmission only
/// to devices that survived pruning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceRound {
    pub feasible: bool,
    pub scheduled: bool,
    pub transmitted: bool,
    pub importance: f64,
    pub score: f64,
    pub queue_before: f64,
    pub queue_after: f64,
    pub cpu_freq: f64,
    pub gain_sq: f64,
    pub t_cmp: f64,
    pub t_tr: f64,
    pub e_cmp: f64,
    pub e_tr: f64,
}

/// Full record of one simulated round.
#[derive(Debug, Clone)]
pub struct RoundLog {
    pub round: usize,
    pub feasible: Vec<DeviceId>,
    pub scheduled: Vec<DeviceId>,
    pub transmitted: Vec<DeviceId>,
    pub devices: Vec<DeviceRound>,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    /// Mean loss over the union of all data available this round.
    pub train_loss: Option<f64>,
    /// Cumulative mean energy per device up to and including this round.
    pub cum_mean_energy: f64,
}

/// A fully prepared run: config, device streams, evaluation set, and the
/// selection rule.
pub struct Simulation {
    cfg: RunConfig,
    kind: SchedulerKind,
    streams: Vec<DeviceStream>,
    test_set: Vec<Sample>,
    mode: ExecMode,
}

impl Simulation {
    /// Builds corpus, partition, and arrival schedules from the config.
    pub fn from_config(cfg: &RunConfig, kind: SchedulerKind) -> Result<Self, SimError> {
        cfg.validate()?;
        let factory = RngFactory::new(cfg.system.seed);
        let classes = cfg.data.classes();

        let (train, test_set) = match &cfg.data {
            DataSource::Synth {
                classes,
                samples,
                feature_dim,
                separation,
                test_samples,
            } => {
                // One draw covers train and test so both share class means.
                let mut rng = factory.stream(StreamPurpose::SynthCorpus, 0, 0);
                let combined =
                    synth_corpus(*classes, samples + test_samples, *feature_dim, *separation, &mut rng);
                split_holdout(combined, *classes, *test_samples)
            }
            DataSource::Idx {
                images,
                labels,
                test_images,
                test_labels,
            } => {
                let train = load_idx_corpus(images, labels).map_err(SimError::Data)?;
                match (test_images, test_labels) {
                    (Some(ti), Some(tl)) => {
                        (train, load_idx_corpus(ti, tl).map_err(SimError::Data)?)
                    }
                    _ => {
                        // No test files: hold out a seeded shuffled sixth.
                        use rand::seq::SliceRandom;
                        let mut train = train;
                        train.shuffle(&mut factory.stream(StreamPurpose::TestSplit, 0, 0));
                        let at = train.len() - train.len() / 6;
                        let test = train.split_off(at);
                        (train, test)
                    }
                }
            }
        };

        let parts = partition(
            train,
            cfg.system.partition_model,
            cfg.system.num_devices,
            &mut factory.stream(StreamPurpose::Partition, 0, 0),
        )?;
        let t_tot = cfg.system.total_time();
        let params = ArrivalParams {
            model: cfg.system.arrival_model,
            t_tot,
            sigma: cfg.arrival_sigma_frac * t_tot,
        };
        let streams = parts
            .into_iter()
            .enumerate()
            .map(|(d, p)| {
                assign_arrivals(
                    p,
                    &params,
                    classes,
                    &mut factory.stream(StreamPurpose::Arrival, d as u64, 0),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;

        Ok(Self {
            cfg: cfg.clone(),
            kind,
            streams,
            test_set,
            mode: ExecMode::default(),
        })
    }

    /// Builds a run from pre-made streams and evaluation set.
    pub fn from_parts(
        cfg: &RunConfig,
        kind: SchedulerKind,
        streams: Vec<DeviceStream>,
        test_set: Vec<Sample>,
    ) -> Result<Self, SimError> {
        cfg.validate()?;
        assert_eq!(streams.len(), cfg.system.num_devices);
        Ok(Self {
            cfg: cfg.clone(),
            kind,
            streams,
            test_set,
            mode: ExecMode::default(),
        })
    }

    pub fn with_exec_mode(mut self, mode: ExecMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    /// Runs every round and returns the per-round logs.
    pub fn run(&self) -> Result<Vec<RoundLog>, SimError> {
        let sys = &self.cfg.system;
        let k = sys.num_devices;
        let classes = self.cfg.data.classes();
        let factory = RngFactory::new(sys.seed);
        let trd = sys.round_latency;
        let n_target = sys.sched_cardinality;

        // Per-device large-scale fading, fixed for the whole run.
        let betas: Vec<f64> = (0..k)
            .map(|d| {
                let mut rng = factory.stream(StreamPurpose::FadingBeta, d as u64, 0);
                let (lo, hi) = sys.fading_db_range;
                db_to_linear(rng.random_range(lo..=hi))
            })
            .collect();

        let arch = match self.cfg.learner {
            LearnerKind::Softmax => Architecture::SoftmaxLinear {
                feature_dim: self.cfg.data.feature_dim(),
                classes,
            },
            LearnerKind::Mlp { hidden } => Architecture::Mlp {
                feature_dim: self.cfg.data.feature_dim(),
                hidden,
                classes,
            },
        };
        let mut model = GlobalModel::random_init(
            arch,
            0.01,
            &mut factory.stream(StreamPurpose::ModelInit, 0, 0),
        );

        let mut queues = vec![0.0f64; k];
        let mut last_sched: Vec<Option<usize>> = vec![None; k];
        let mut utilized_dev_hist: Vec<Vec<u32>> = vec![vec![0; classes]; k];
        let mut utilized_total = vec![0u32; classes];
        let mut cum_energy = 0.0f64;
        let test_refs: Vec<&Sample> = self.test_set.iter().collect();
        let mut logs = Vec::with_capacity(sys.total_rounds);

        for t in 1..=sys.total_rounds {
            let now = t as f64 * trd;

            let freqs: Vec<f64> = (0..k)
                .map(|d| {
                    let mut rng = factory.stream(StreamPurpose::CpuFreq, d as u64, t as u64);
                    let (lo, hi) = sys.cpu_freq_range;
                    rng.random_range(lo..=hi)
                })
                .collect();

            let feasible = feasible_set(&freqs, n_target, sys);

            let mut new_counts = Vec::with_capacity(feasible.len());
            let mut new_hists = Vec::with_capacity(feasible.len());
            for &d in &feasible {
                let window = match self.cfg.new_data_window {
                    NewDataWindow::SinceLastScheduled => {
                        RoundWindow::new(last_sched[d].unwrap_or(0), t - 1)
                    }
                    NewDataWindow::PerRound => RoundWindow::new(t.saturating_sub(2).min(t - 1), t - 1),
                };
                let (lo, hi) = window.wall_clock(trd);
                new_counts.push(self.streams[d].count_between(lo, hi) as u64);
                new_hists.push(self.streams[d].hist_between(lo, hi));
            }
            let variant = match self.kind {
                SchedulerKind::Proposed(v) => v,
                SchedulerKind::RandomFeasible => ImportanceVariant::Combined,
            };
            let inputs = ImportanceInputs {
                round: t,
                candidates: feasible.clone(),
                new_counts,
                new_hists,
                utilized_hist: utilized_total.clone(),
            };
            let importances = importance(&inputs, variant);

            let decision = match self.kind {
                SchedulerKind::Proposed(_) => schedule(
                    &feasible,
                    &queues,
                    &freqs,
                    &importances,
                    &betas,
                    n_target,
                    self.cfg.allow_shrink,
                    sys,
                ),
                SchedulerKind::RandomFeasible => {
                    let scores = feasible
                        .iter()
                        .zip(&importances)
                        .map(|(&d, &i)| {
                            per_device_score(queues[d], freqs[d], i, betas[d], n_target, sys)
                        })
                        .collect();
                    let m = n_target.min(feasible.len());
                    let mut rng = factory.stream(StreamPurpose::BaselineSelect, 0, t as u64);
                    let mut picked: Vec<DeviceId> =
                        rand::seq::index::sample(&mut rng, feasible.len(), m)
                            .iter()
                            .map(|i| feasible[i])
                            .collect();
                    picked.sort_unstable();
                    crate::scheduler::SchedulingDecision {
                        feasible: feasible.clone(),
                        scheduled: picked,
                        scores,
                        importances: importances.clone(),
                    }
                }
            };
            let scheduled = decision.scheduled;

            // Local training for the scheduled set, on everything arrived
            // by this round's boundary. Devices without data contribute a
            // zero-weight update.
            let updates: Vec<Option<LocalUpdate>> = exec::map_collect(self.mode, &scheduled, |&d| {
                let avail = self.streams[d].available_at(now);
                if avail.is_empty() {
                    return None;
                }
                let data: Vec<&Sample> = avail.iter().map(|e| &e.sample).collect();
                let mut rng = factory.stream(StreamPurpose::LocalTrain, d as u64, t as u64);
                Some(local_train(&model, &data, &self.cfg.sgd, &mut rng).expect("data nonempty"))
            });

            // Channel gains are realized only after local training, and
            // only for scheduled devices.
            let mut gains = vec![0.0f64; k];
            let mut t_cmp = vec![0.0f64; k];
            let mut e_cmp = vec![0.0f64; k];
            for &d in &scheduled {
                let mut rng = factory.stream(StreamPurpose::ChannelGain, d as u64, t as u64);
                gains[d] = draw_channel(betas[d], &mut rng);
                t_cmp[d] = compute_time(freqs[d], sys);
                e_cmp[d] = compute_energy(freqs[d], sys);
            }

            let pruned = prune(&scheduled, &gains, &betas, &t_cmp, sys);
            let transmitted = pruned.kept;

            let mut t_tr = vec![0.0f64; k];
            let mut e_tr = vec![0.0f64; k];
            if !transmitted.is_empty() {
                let rho = 1.0 / transmitted.len() as f64;
                for &d in &transmitted {
                    let p = tx_power_for(betas[d], sys);
                    let rate = achievable_rate(rho, p, gains[d], sys);
                    let (tt, et) = transmission(rate, p, sys)?;
                    t_tr[d] = tt;
                    e_tr[d] = et;
                }
            }

            let mut is_feasible = vec![false; k];
            let mut is_scheduled = vec![false; k];
            let mut is_transmitted = vec![false; k];
            for &d in &feasible {
                is_feasible[d] = true;
            }
            for &d in &scheduled {
                is_scheduled[d] = true;
            }
            for &d in &transmitted {
                is_transmitted[d] = true;
            }
            debug_assert!(scheduled.iter().all(|&d| is_feasible[d]));
            debug_assert!(transmitted.iter().all(|&d| is_scheduled[d]));

            let mut device_rows = Vec::with_capacity(k);
            let mut round_energy = 0.0;
            for d in 0..k {
                let energy = if is_transmitted[d] {
                    e_cmp[d] + e_tr[d]
                } else if is_scheduled[d] {
                    e_cmp[d]
                } else {
                    0.0
                };
                round_energy += energy;
                let queue_before = queues[d];
                queues[d] = queue_update(queue_before, is_scheduled[d], energy, sys.avg_energy);
                let fi = feasible.binary_search(&d).ok();
                device_rows.push(DeviceRound {
                    feasible: is_feasible[d],
                    scheduled: is_scheduled[d],
                    transmitted: is_transmitted[d],
                    importance: fi.map_or(0.0, |i| decision.importances[i]),
                    score: fi.map_or(0.0, |i| decision.scores[i]),
                    queue_before,
                    queue_after: queues[d],
                    cpu_freq: freqs[d],
                    gain_sq: gains[d],
                    t_cmp: if is_scheduled[d] { t_cmp[d] } else { 0.0 },
                    t_tr: t_tr[d],
                    e_cmp: if is_scheduled[d] { e_cmp[d] } else { 0.0 },
                    e_tr: e_tr[d],
                });
            }
            cum_energy += round_energy;

            let agg: Vec<LocalUpdate> = scheduled
                .iter()
                .enumerate()
                .filter(|&(_, &d)| is_transmitted[d])
                .filter_map(|(i, _)| updates[i].clone())
                .collect();
            if !agg.is_empty() {
                model = aggregate(&model, &agg)?;
            }

            // Bookkeeping feeds the *next* rounds' importance windows.
            for &d in &scheduled {
                let hist = self.streams[d].hist_at(now);
                for c in 0..classes {
                    utilized_total[c] += hist[c] - utilized_dev_hist[d][c];
                }
                utilized_dev_hist[d] = hist;
                last_sched[d] = Some(t);
            }

            let do_eval =
                self.cfg.eval_every > 0 && (t % self.cfg.eval_every == 0 || t == sys.total_rounds);
            let (test_loss, test_accuracy) = if do_eval && !test_refs.is_empty() {
                let (l, a) = evaluate_with_mode(&model, &test_refs, self.mode)?;
                (Some(l), Some(a))
            } else {
                (None, None)
            };
            let train_loss = if do_eval {
                union_loss(&model, &self.streams, now, self.mode)
            } else {
                None
            };

            logs.push(RoundLog {
                round: t,
                feasible,
                scheduled,
                transmitted,
                devices: device_rows,
                test_loss,
                test_accuracy,
                train_loss,
                cum_mean_energy: cum_energy / k as f64,
            });
        }
        Ok(logs)
    }
}

/// Mean loss over the union of all devices' available data (device sets
/// are disjoint, so the size-weighted global loss is the plain mean).
fn union_loss(
    model: &GlobalModel,
    streams: &[DeviceStream],
    now: f64,
    mode: ExecMode,
) -> Option<f64> {
    let per_device: Vec<(f64, usize)> = exec::map_collect(mode, streams, |stream| {
        let avail = stream.available_at(now);
        if avail.is_empty() {
            return (0.0, 0);
        }
        let refs: Vec<&Sample> = avail.iter().map(|e| &e.sample).collect();
        (
            batch_loss(model.arch(), model.params(), &refs) * refs.len() as f64,
            refs.len(),
        )
    });
    let (total, count) = per_device
        .into_iter()
        .fold((0.0, 0usize), |(l, n), (pl, pn)| (l + pl, n + pn));
    (count > 0).then(|| total / count as f64)
}

fn split_holdout(combined: Vec<Sample>, classes: usize, test_samples: usize) -> (Vec<Sample>, Vec<Sample>) {
    // Peel a balanced test split off each class block.
    let mut want = vec![0usize; classes];
    for (c, w) in want.iter_mut().enumerate() {
        *w = test_samples / classes + usize::from(c < test_samples % classes);
    }
    let mut train = Vec::with_capacity(combined.len() - test_samples);
    let mut test = Vec::with_capacity(test_samples);
    for s in combined {
        if want[s.label] > 0 {
            want[s.label] -= 1;
            test.push(s);
        } else {
            train.push(s);
        }
    }
    (train, test)
}

/// Convenience wrapper: build from config and run.
pub fn run(cfg: &RunConfig, kind: SchedulerKind) -> Result<Vec<RoundLog>, SimError> {
    Simulation::from_config(cfg, kind)?.run()
}

/// Aggregate statistics over a run's logs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub rounds: usize,
    pub total_energy: f64,
    /// Mean charged energy per device per round, in J.
    pub time_avg_energy_per_device: f64,
    pub final_test_accuracy: Option<f64>,
    /// Mean test accuracy over the last `window` evaluation checkpoints.
    pub rolling_test_accuracy: Option<f64>,
    pub max_queue_per_device: Vec<f64>,
    pub sched_counts: Vec<usize>,
}

/// Summarizes a nonempty log sequence.
pub fn summarize(logs: &[RoundLog], window: usize) -> RunSummary {
    assert!(!logs.is_empty(), "cannot summarize an empty run");
    let k = logs[0].devices.len();
    let rounds = logs.len();
    let total_energy = logs.last().unwrap().cum_mean_energy * k as f64;
    let mut max_queue_per_device = vec![0.0f64; k];
    let mut sched_counts = vec![0usize; k];
    for log in logs {
        for (d, row) in log.devices.iter().enumerate() {
            max_queue_per_device[d] = max_queue_per_device[d].max(row.queue_after);
            sched_counts[d] += usize::from(row.scheduled);
        }
    }
    let checkpoints: Vec<f64> = logs.iter().filter_map(|l| l.test_accuracy).collect();
    let final_test_accuracy = checkpoints.last().copied();
    let rolling_test_accuracy = (!checkpoints.is_empty()).then(|| {
        let tail = &checkpoints[checkpoints.len().saturating_sub(window.max(1))..];
        tail.iter().sum::<f64>() / tail.len() as f64
    });
    RunSummary {
        rounds,
        total_energy,
        time_avg_energy_per_device: total_energy / (k * rounds) as f64,
        final_test_accuracy,
        rolling_test_accuracy,
        max_queue_per_device,
        sched_counts,
    }
}
