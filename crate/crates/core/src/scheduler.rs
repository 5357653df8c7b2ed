//! Virtual energy queues, latency feasibility filtering, drift-plus-penalty
//! subset selection, and channel-aware pruning after local training.

use crate::config::SystemConfig;
use crate::physics::{compute_energy, surrogate_rate, tx_power_for};
use crate::sim::DeviceId;

/// Virtual-queue step: backlog grows by the energy charged above the
/// per-round budget and is clamped at zero.
pub fn queue_update(q: f64, scheduled: bool, energy: f64, e_avg: f64) -> f64 {
    debug_assert!(q >= 0.0 && energy >= 0.0);
    let s = f64::from(scheduled);
    (q + s * energy - e_avg).max(0.0)
}

/// Latency bound check used before training: computation time plus the
/// surrogate transmission time at cardinality `n_target` must fit in the
/// round.
fn surrogate_feasible(f: f64, n_target: usize, cfg: &SystemConfig) -> bool {
    let t_cmp = cfg.cycles_c / f;
    let t_tr = cfg.update_bits / surrogate_rate(n_target, cfg);
    t_cmp + t_tr <= cfg.round_latency
}

/// Devices whose per-round latency bound holds under the surrogate rate
/// evaluated at `n_target` scheduled devices.
pub fn feasible_set(freqs: &[f64], n_target: usize, cfg: &SystemConfig) -> Vec<DeviceId> {
    debug_assert!(n_target >= 1);
    (0..freqs.len())
        .filter(|&k| surrogate_feasible(freqs[k], n_target, cfg))
        .collect()
}

/// The drift-plus-penalty summand for one device: queue-weighted expected
/// energy (computation plus transmission at the surrogate rate) minus the
/// importance payoff.
pub fn per_device_score(
    q: f64,
    f: f64,
    importance: f64,
    beta: f64,
    n: usize,
    cfg: &SystemConfig,
) -> f64 {
    let e_cmp = compute_energy(f, cfg);
    let e_tr = tx_power_for(beta, cfg) * cfg.update_bits / surrogate_rate(n, cfg);
    q * (e_cmp + e_tr) - cfg.tradeoff_v * importance
}

/// The per-round scheduling decision and the evidence behind it.
#[derive(Debug, Clone)]
pub struct SchedulingDecision {
    /// Feasible candidates, ascending.
    pub feasible: Vec<DeviceId>,
    /// Scheduled devices, ascending.
    pub scheduled: Vec<DeviceId>,
    /// Selection scores aligned with `feasible`.
    pub scores: Vec<f64>,
    /// Importance values aligned with `feasible`.
    pub importances: Vec<f64>,
}

/// Picks the devices minimizing the drift-plus-penalty objective at fixed
/// cardinality `min(n_target, |feasible|)`.
///
/// With fixed cardinality the objective is separable, so the minimum is the
/// lowest-score devices; ties break toward lower device ids. Scores are
/// evaluated at `n = n_target` regardless of how many candidates remain.
/// With `allow_shrink`, positive-score devices are dropped instead of
/// padding the set.
#[allow(clippy::too_many_arguments)]
pub fn schedule(
    feasible: &[DeviceId],
    queues: &[f64],
    freqs: &[f64],
    importances: &[f64],
    betas: &[f64],
    n_target: usize,
    allow_shrink: bool,
    cfg: &SystemConfig,
) -> SchedulingDecision {
    debug_assert_eq!(feasible.len(), importances.len());
    let scores: Vec<f64> = feasible
        .iter()
        .zip(importances)
        .map(|(&k, &imp)| per_device_score(queues[k], freqs[k], imp, betas[k], n_target, cfg))
        .collect();

    let m = n_target.min(feasible.len());
    let mut order: Vec<usize> = (0..feasible.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(feasible[a].cmp(&feasible[b])));
    let mut scheduled: Vec<DeviceId> = order[..m]
        .iter()
        .filter(|&&i| !allow_shrink || scores[i] <= 0.0)
        .map(|&i| feasible[i])
        .collect();
    scheduled.sort_unstable();

    SchedulingDecision {
        feasible: feasible.to_vec(),
        scheduled,
        scores,
        importances: importances.to_vec(),
    }
}

/// Scheduled devices whose realized channel is too weak to finish
/// transmission inside the round, with a factor-3 safety margin.
///
/// The threshold is per-device: it depends on each device's own remaining
/// time after computation.
pub fn infeasible_after_training(
    set: &[DeviceId],
    gains: &[f64],
    betas: &[f64],
    t_cmp: &[f64],
    cfg: &SystemConfig,
) -> Vec<DeviceId> {
    set.iter()
        .copied()
        .filter(|&k| gains[k] < prune_threshold(k, set.len(), betas, t_cmp, cfg))
        .collect()
}

fn prune_threshold(
    k: DeviceId,
    set_size: usize,
    betas: &[f64],
    t_cmp: &[f64],
    cfg: &SystemConfig,
) -> f64 {
    let remaining = cfg.round_latency - t_cmp[k];
    if remaining <= 0.0 {
        return f64::INFINITY;
    }
    let n = set_size as f64;
    let c1 = (cfg.update_bits * n / (cfg.bandwidth * remaining)).exp2() - 1.0;
    3.0 * c1 * betas[k] * cfg.bandwidth * cfg.noise_density / (n * cfg.eff_rx_power_p0)
}

/// One pruning step's removal record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneRemoval {
    pub device: DeviceId,
    /// Realized squared channel gain at removal time.
    pub gain_sq: f64,
    /// The threshold the gain fell short of, at the set size then in force.
    pub threshold: f64,
}

/// Outcome of the aggregation-phase pruning loop.
#[derive(Debug, Clone)]
pub struct PruneResult {
    /// Surviving devices, ascending.
    pub kept: Vec<DeviceId>,
    /// Removed devices in removal order.
    pub removed: Vec<PruneRemoval>,
}

/// Iteratively removes the infeasible device with the weakest normalized
/// channel (lowest `gain/beta`, ties toward lower id), recomputing the
/// threshold at each shrunken set size, until every survivor passes.
pub fn prune(
    set: &[DeviceId],
    gains: &[f64],
    betas: &[f64],
    t_cmp: &[f64],
    cfg: &SystemConfig,
) -> PruneResult {
    let mut kept: Vec<DeviceId> = set.to_vec();
    kept.sort_unstable();
    let mut removed = Vec::new();
    loop {
        let bad = infeasible_after_training(&kept, gains, betas, t_cmp, cfg);
        if bad.is_empty() {
            break;
        }
        let victim = bad
            .iter()
            .copied()
            .min_by(|&a, &b| {
                (gains[a] / betas[a])
                    .total_cmp(&(gains[b] / betas[b]))
                    .then(a.cmp(&b))
            })
            .expect("nonempty");
        removed.push(PruneRemoval {
            device: victim,
            gain_sq: gains[victim],
            threshold: prune_threshold(victim, kept.len(), betas, t_cmp, cfg),
        });
        kept.retain(|&k| k != victim);
    }
    PruneResult { kept, removed }
}


#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> SystemConfig {
        SystemConfig::default()
    }

    #[test]
    fn queue_update_arithmetic() {
        assert!((queue_update(0.01, true, 0.0003, 0.0005) - 0.0098).abs() < 1e-15);
        assert_eq!(queue_update(0.0, false, 0.0, 0.0005), 0.0);
        assert!((queue_update(0.0, true, 0.001, 0.0005) - 0.0005).abs() < 1e-15);
    }

    #[test]
    fn feasibility_worked_example() {
        let c = SystemConfig {
            rate_margin: 1.0,
            ..cfg()
        };
        // t_cmp = 0.419328 s, surrogate transmission ~ 0.0036 s, bound 4 s
        assert!(surrogate_feasible(1e9, 2, &c));
        // computation alone exceeds the bound
        assert!(!surrogate_feasible(c.cycles_c / 5.0, 2, &c));
        // vanishing margin blows up the transmission term
        let tiny = SystemConfig {
            rate_margin: 1e-9,
            ..cfg()
        };
        assert!(feasible_set(&[1e9, 1.5e9], 2, &tiny).is_empty());
    }

    #[test]
    fn score_worked_example() {
        let c = SystemConfig {
            rate_margin: 1.0,
            ..cfg()
        };
        let s = per_device_score(0.01, 1e9, 1.0, 1.0, 2, &c);
        assert!((s - (-0.045783833238727437)).abs() < 1e-12, "got {s}");
        // queue term vanishes
        let pure_imp = per_device_score(0.0, 1e9, 1.0, 1.0, 2, &c);
        assert_eq!(pure_imp, -c.tradeoff_v * 1.0);
        // pure energy penalty
        let no_v = SystemConfig {
            tradeoff_v: 0.0,
            ..c
        };
        assert!(per_device_score(0.01, 1e9, 1.0, 1.0, 2, &no_v) > 0.0);
    }

    #[test]
    fn schedule_tie_breaks_by_id() {
        let c = cfg();
        let k = 6;
        let feasible: Vec<usize> = (0..k).collect();
        let dec = schedule(
            &feasible,
            &vec![0.0; k],
            &vec![1e9; k],
            &vec![1.0; k],
            &vec![1.0; k],
            2,
            false,
            &c,
        );
        assert_eq!(dec.scheduled, vec![0, 1]);
    }

    #[test]
    fn schedule_clamps_to_feasible() {
        let c = cfg();
        let dec = schedule(&[4], &vec![0.0; 6], &vec![1e9; 6], &[1.0], &vec![1.0; 6], 3, false, &c);
        assert_eq!(dec.scheduled, vec![4]);
        let empty = schedule(&[], &[], &[1e9], &[], &[1.0], 2, false, &c);
        assert!(empty.scheduled.is_empty());
    }

    #[test]
    fn schedule_matches_brute_force() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let k = rng.random_range(2..=8usize);
            let queues: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..0.1)).collect();
            let freqs: Vec<f64> = (0..k).map(|_| rng.random_range(0.02e9..1.52e9)).collect();
            let imps: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..3.0)).collect();
            let betas: Vec<f64> = (0..k).map(|_| rng.random_range(0.316..1.995)).collect();
            let n_target = rng.random_range(1..=3usize);
            let feasible: Vec<usize> = (0..k).collect();
            let dec = schedule(&feasible, &queues, &freqs, &imps, &betas, n_target, false, &c);
            let oracle = oracle::brute_force_schedule(
                &feasible, &queues, &freqs, &imps, &betas, n_target, &c,
            );
            assert_eq!(dec.scheduled, oracle);
        }
    }

    #[test]
    fn allow_shrink_drops_positive_scores() {
        let c = SystemConfig {
            tradeoff_v: 0.0,
            ..cfg()
        };
        // with V = 0 all scores are nonnegative; queued devices score > 0
        let feasible = vec![0, 1, 2];
        let dec = schedule(
            &feasible,
            &[0.5, 0.0, 0.5],
            &[1e9, 1e9, 1e9],
            &[0.0, 0.0, 0.0],
            &[1.0, 1.0, 1.0],
            2,
            true,
            &c,
        );
        assert_eq!(dec.scheduled, vec![1]);
    }

    #[test]
    fn g_set_worked_example() {
        // C1 = 2^(S/(B*3.58)) - 1, threshold = 3*C1*B*N0/P0 ~ 6.46e-8
        let c = cfg();
        let t_cmp = vec![0.42]; // remaining time 3.58 s
        let betas = vec![1.0];
        let thr = prune_threshold(0, 1, &betas, &t_cmp, &c);
        assert!((thr - 6.455595210641572e-8).abs() / thr < 1e-9, "got {thr}");
        assert!(infeasible_after_training(&[0], &[1.0], &betas, &t_cmp, &c).is_empty());
        assert_eq!(
            infeasible_after_training(&[0], &[1e-9], &betas, &t_cmp, &c),
            vec![0]
        );
        assert_eq!(
            infeasible_after_training(&[0], &[0.0], &betas, &t_cmp, &c),
            vec![0]
        );
    }

    #[test]
    fn prune_keeps_good_sets() {
        let c = cfg();
        let set = vec![0, 1, 2];
        let gains = vec![1.0, 2.0, 0.5];
        let betas = vec![1.0, 1.0, 1.0];
        let t_cmp = vec![0.4, 0.4, 0.4];
        let res = prune(&set, &gains, &betas, &t_cmp, &c);
        assert_eq!(res.kept, set);
        assert!(res.removed.is_empty());
    }

    #[test]
    fn prune_removes_exactly_the_dead_channel() {
        let c = cfg();
        let set = vec![0, 1, 2];
        let gains = vec![1.0, 0.0, 0.5];
        let betas = vec![1.0, 1.0, 1.0];
        let t_cmp = vec![0.4, 0.4, 0.4];
        let res = prune(&set, &gains, &betas, &t_cmp, &c);
        assert_eq!(res.kept, vec![0, 2]);
        assert_eq!(res.removed.len(), 1);
        assert_eq!(res.removed[0].device, 1);
        // survivors re-verified at the smaller set size
        assert!(infeasible_after_training(&res.kept, &gains, &betas, &t_cmp, &c).is_empty());
    }

    #[test]
    fn prune_total_loss_in_id_order() {
        let c = cfg();
        let set = vec![0, 1, 2, 3];
        let gains = vec![0.0; 4];
        let betas = vec![1.0; 4];
        let t_cmp = vec![0.4; 4];
        let res = prune(&set, &gains, &betas, &t_cmp, &c);
        assert!(res.kept.is_empty());
        let order: Vec<usize> = res.removed.iter().map(|r| r.device).collect();
        assert_eq!(order, vec![0, 1, 2, 3]);
    }

    /// Survivors of the prune loop meet the realized latency bound at
    /// rho = 1 / |kept|: the factor-3 margin implies the factor-1 condition.
    #[test]
    fn prune_survivors_meet_realized_latency() {
        use crate::physics::{achievable_rate, tx_power_for};
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..300 {
            let k = rng.random_range(1..=8usize);
            let set: Vec<usize> = (0..k).collect();
            let gains: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..2e-7)).collect();
            let betas: Vec<f64> = (0..k).map(|_| rng.random_range(0.316..1.995)).collect();
            let t_cmp: Vec<f64> = (0..k).map(|_| rng.random_range(0.3..3.9)).collect();
            let res = prune(&set, &gains, &betas, &t_cmp, &c);
            assert!(res.removed.len() <= k);
            if res.kept.is_empty() {
                continue;
            }
            let rho = 1.0 / res.kept.len() as f64;
            for &d in &res.kept {
                let p = tx_power_for(betas[d], &c);
                let rate = achievable_rate(rho, p, gains[d], &c);
                let t_tr = c.update_bits / rate;
                assert!(
                    t_cmp[d] + t_tr <= c.round_latency,
                    "latency violated: {} + {t_tr}",
                    t_cmp[d]
                );
            }
        }
    }

    proptest! {
        #[test]
        fn queue_nonnegative_and_bounded_decrease(
            q in 0.0..1.0f64,
            e in 0.0..0.5f64,
            e_avg in 1e-6..0.1f64,
            s in prop::bool::ANY,
        ) {
            let next = queue_update(q, s, e, e_avg);
            prop_assert!(next >= 0.0);
            prop_assert!(next >= q - e_avg);
        }

        /// Scaling queues and the tradeoff weight together leaves the
        /// argmin set unchanged.
        #[test]
        fn schedule_scale_invariance(
            seed in 0u64..500,
            scale in 0.1..10.0f64,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = 6;
            let queues: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..0.1)).collect();
            let freqs: Vec<f64> = (0..k).map(|_| rng.random_range(0.1e9..1.5e9)).collect();
            let imps: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..3.0)).collect();
            let betas: Vec<f64> = (0..k).map(|_| rng.random_range(0.316..1.995)).collect();
            let feasible: Vec<usize> = (0..k).collect();
            let c = cfg();
            let scaled_cfg = SystemConfig { tradeoff_v: c.tradeoff_v * scale, ..c.clone() };
            let scaled_q: Vec<f64> = queues.iter().map(|q| q * scale).collect();
            let a = schedule(&feasible, &queues, &freqs, &imps, &betas, 2, false, &c);
            let b = schedule(&feasible, &scaled_q, &freqs, &imps, &betas, 2, false, &scaled_cfg);
            prop_assert_eq!(a.scheduled, b.scheduled);
        }
    }
}
