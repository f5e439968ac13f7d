//! Cluster-update scheduler: turns the announced global update instant into
//! a training budget, an epoch count and source/sink choices for one orbit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gu::ClusterTiming;
use crate::orbital::{ClusterVisibility, SatelliteId, Subject, VisibilityPattern};

/// Time the cluster may spend between receiving the global model at
/// `receive_s` and its last usable ground contact before `global_update_s`.
pub fn available_time(pattern: &VisibilityPattern, global_update_s: f64, receive_s: f64) -> Result<f64> {
    if receive_s >= global_update_s {
        return Err(Error::Scheduling(format!(
            "model received at {receive_s:.3} s, not before the global update at {global_update_s:.3} s"
        )));
    }
    if pattern.is_visible(global_update_s) {
        return Ok(global_update_s - receive_s);
    }
    match pattern.last_set_at_or_before(global_update_s) {
        Some(set) if set > receive_s => Ok(set - receive_s),
        _ => Err(Error::Scheduling(format!(
            "{} has no set time in ({receive_s:.3}, {global_update_s:.3}] and is not visible at the global update",
            pattern.subject
        ))),
    }
}

/// Slack absorbing floating-point roundoff in the epoch floor.
pub const BUDGET_TOLERANCE_S: f64 = 1e-6;

/// Upper bound on one distribution or collection sweep: ⌈K/2⌉ hops.
pub fn isl_round_time(sats: usize, hop_s: f64) -> f64 {
    sats.div_ceil(2) as f64 * hop_s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochBudget {
    pub epochs: u32,
    /// Floor before clamping; may be zero or negative.
    pub raw: i64,
}

impl EpochBudget {
    pub fn clamped(&self) -> bool {
        self.raw < 1
    }
}

/// Largest epoch count that fits into `available_s` after both ring sweeps and
/// the uplink. Clamped to one so the cluster still takes part in the round.
pub fn local_epochs(available_s: f64, isl_round_s: f64, uplink_s: f64, epoch_s: f64) -> EpochBudget {
    let raw = ((available_s - 2.0 * isl_round_s - uplink_s + BUDGET_TOLERANCE_S) / epoch_s).floor();
    let raw = if raw.is_finite() { raw as i64 } else { i64::MIN };
    if raw < 1 {
        log::warn!(
            "epoch budget {raw} below one (available {available_s:.3} s, epoch {epoch_s:.3} s); clamping to 1"
        );
    }
    EpochBudget {
        epochs: raw.clamp(1, u32::MAX as i64) as u32,
        raw,
    }
}

/// Visible member with the longest remaining pass at `at_s`; ties go to the
/// lowest slot index.
pub fn select_sink(cluster: &ClusterVisibility, at_s: f64) -> Result<SatelliteId> {
    cluster
        .members
        .iter()
        .filter_map(|m| {
            let Subject::Satellite(id) = m.subject else {
                return None;
            };
            m.interval_at(at_s).map(|iv| (id, iv.set_s - at_s))
        })
        .fold(None, |best: Option<(SatelliteId, f64)>, (id, rem)| match best {
            Some((bid, brem)) if brem > rem || (brem == rem && bid.slot < id.slot) => Some((bid, brem)),
            _ => Some((id, rem)),
        })
        .map(|(id, _)| id)
        .ok_or_else(|| {
            Error::Scheduling(format!(
                "no satellite of cluster {} is visible at {at_s:.3} s",
                cluster.orbit
            ))
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPlan {
    pub slot: u32,
    pub cluster: usize,
    /// Instant the source holds the global model.
    pub t_x: f64,
    /// Training plus intra-cluster communication budget.
    pub t_a: f64,
    pub epochs: u32,
    pub raw_epochs: i64,
    pub source: SatelliteId,
    pub sink: SatelliteId,
}

impl ClusterPlan {
    /// Last ground contact instant the plan relies on.
    pub fn contact_s(&self) -> f64 {
        self.t_x + self.t_a
    }
}

/// Plan of one cluster for a slot whose global update is at `global_update_s`
/// and whose ground transmission to the cluster starts at `rise_s`.
pub fn plan_cluster(
    slot: u32,
    cluster: &ClusterVisibility,
    timing: &ClusterTiming,
    rise_s: f64,
    global_update_s: f64,
) -> Result<ClusterPlan> {
    let source = select_sink(cluster, rise_s)?;
    let t_x = rise_s + timing.gs_to_cluster_s;
    let t_a = available_time(&cluster.pattern, global_update_s, t_x)?;
    let budget = local_epochs(t_a, timing.isl_round_s, timing.cluster_to_gs_s, timing.epoch_s);
    let sink = select_sink(cluster, t_x + t_a)?;
    Ok(ClusterPlan {
        slot,
        cluster: cluster.orbit,
        t_x,
        t_a,
        epochs: budget.epochs,
        raw_epochs: budget.raw,
        source,
        sink,
    })
}
