//! Global-update scheduler: the ground station's choice of the instant `t_n`
//! at which every cluster's aggregate can have arrived.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::orbital::VisibilityPattern;

/// Per-cluster communication and compute durations, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterTiming {
    /// Ground station to source satellite.
    pub gs_to_cluster_s: f64,
    /// Sink satellite to ground station.
    pub cluster_to_gs_s: f64,
    /// One full distribution (or collection) sweep over the ring.
    pub isl_round_s: f64,
    /// Minimum training duration demanded per slot.
    pub min_learning_s: f64,
    /// Duration of one local epoch.
    pub epoch_s: f64,
}

impl ClusterTiming {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("gs_to_cluster_s", self.gs_to_cluster_s),
            ("cluster_to_gs_s", self.cluster_to_gs_s),
            ("isl_round_s", self.isl_round_s),
            ("min_learning_s", self.min_learning_s),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(self.epoch_s > 0.0 && self.epoch_s.is_finite()) {
            return Err(Error::Config(format!("epoch_s must be positive, got {}", self.epoch_s)));
        }
        Ok(())
    }
}

/// How the visible branch of the feasible-time rule treats an uplink that
/// would outlast the current visibility window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeasibilityMode {
    /// Visibility at the start of the uplink suffices.
    #[default]
    Literal,
    /// The whole uplink must fit inside one visibility window.
    Strict,
}

/// First instant at or after `after_s` at which the ground station can reach
/// the cluster: `after_s` itself during a pass, otherwise the next rise.
pub fn first_rise(pattern: &VisibilityPattern, after_s: f64) -> Result<f64> {
    pattern
        .first_visible_at_or_after(after_s)
        .ok_or(Error::HorizonExhausted {
            after_s,
            horizon_s: pattern.horizon_s,
        })
}

/// Instant by which receive, distribute, train and collect can all be done.
pub fn demand_time(pattern: &VisibilityPattern, slot_start_s: f64, timing: &ClusterTiming) -> Result<f64> {
    let rise = first_rise(pattern, slot_start_s)?;
    Ok(demand_from_rise(rise, timing))
}

fn demand_from_rise(rise: f64, timing: &ClusterTiming) -> f64 {
    rise + timing.gs_to_cluster_s + timing.isl_round_s + timing.min_learning_s + timing.isl_round_s
}

/// Earliest instant the cluster aggregate can be at the ground station given
/// it is ready at `demand_s`.
pub fn feasible_time(
    pattern: &VisibilityPattern,
    demand_s: f64,
    timing: &ClusterTiming,
    mode: FeasibilityMode,
) -> Result<f64> {
    let uplink = timing.cluster_to_gs_s;
    let exhausted = || Error::HorizonExhausted {
        after_s: demand_s,
        horizon_s: pattern.horizon_s,
    };
    match mode {
        FeasibilityMode::Literal => {
            if pattern.is_visible(demand_s) {
                Ok(demand_s + uplink)
            } else {
                pattern
                    .next_rise(demand_s)
                    .map(|iv| iv.rise_s + uplink)
                    .ok_or_else(exhausted)
            }
        }
        FeasibilityMode::Strict => pattern
            .intervals
            .iter()
            .filter(|iv| iv.set_s >= demand_s)
            .find_map(|iv| {
                let start = iv.rise_s.max(demand_s);
                (start + uplink <= iv.set_s).then_some(start + uplink)
            })
            .ok_or_else(exhausted),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSchedule {
    pub cluster: usize,
    pub rise_s: f64,
    pub demand_s: f64,
    pub feasible_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotSchedule {
    pub slot: u32,
    pub slot_start_s: f64,
    pub global_update_s: f64,
    pub clusters: Vec<ClusterSchedule>,
}

/// A cluster as seen by the ground station.
#[derive(Debug, Clone, Copy)]
pub struct ClusterInput<'a> {
    pub cluster: usize,
    pub pattern: &'a VisibilityPattern,
    pub timing: ClusterTiming,
}

/// Global update instant of slot `slot` starting at `slot_start_s`.
pub fn next_global_update(
    slot: u32,
    clusters: &[ClusterInput<'_>],
    slot_start_s: f64,
    mode: FeasibilityMode,
) -> Result<SlotSchedule> {
    if clusters.is_empty() {
        return Err(Error::Config("no clusters to schedule".into()));
    }
    let per_cluster = clusters
        .iter()
        .map(|c| {
            if c.pattern.is_empty() {
                return Err(Error::Infeasible(format!(
                    "cluster {} in slot {slot}: never visible within {:.0} s",
                    c.cluster, c.pattern.horizon_s
                )));
            }
            let rise = first_rise(c.pattern, slot_start_s)?;
            let demand = demand_from_rise(rise, &c.timing);
            let feasible = feasible_time(c.pattern, demand, &c.timing, mode)?;
            Ok(ClusterSchedule {
                cluster: c.cluster,
                rise_s: rise,
                demand_s: demand,
                feasible_s: feasible,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let global_update_s = per_cluster
        .iter()
        .map(|c| c.feasible_s)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(SlotSchedule {
        slot,
        slot_start_s,
        global_update_s,
        clusters: per_cluster,
    })
}
