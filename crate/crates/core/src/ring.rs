//! Parameter distribution and in-ring aggregation over the intra-orbit ring.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::orbital::{ClusterVisibility, SatelliteId};

#[derive(Debug, Clone, PartialEq)]
pub struct RingTopology {
    pub orbit: usize,
    /// Cyclic order; neighbours are adjacent entries.
    pub sats: Vec<SatelliteId>,
    pub hop_s: f64,
}

impl RingTopology {
    pub fn new(orbit: usize, sats: Vec<SatelliteId>, hop_s: f64) -> Result<Self> {
        if sats.is_empty() {
            return Err(Error::Config(format!("ring of orbit {orbit} has no satellites")));
        }
        if !(hop_s >= 0.0 && hop_s.is_finite()) {
            return Err(Error::Config(format!("hop time must be non-negative, got {hop_s}")));
        }
        Ok(RingTopology { orbit, sats, hop_s })
    }

    /// Ring of `sats` satellites with slots 1..=sats in order.
    pub fn uniform(orbit: usize, sats: usize, hop_s: f64) -> Result<Self> {
        Self::new(orbit, (1..=sats).map(|k| SatelliteId::new(orbit, k)).collect(), hop_s)
    }

    pub fn len(&self) -> usize {
        self.sats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sats.is_empty()
    }

    pub fn position(&self, sat: SatelliteId) -> Result<usize> {
        self.sats
            .iter()
            .position(|&s| s == sat)
            .ok_or_else(|| Error::Protocol(format!("satellite {sat} is not on the ring of orbit {}", self.orbit)))
    }

    /// Satellite `offset` steps clockwise from position `i`.
    fn at(&self, i: usize, offset: isize) -> usize {
        let k = self.len() as isize;
        ((i as isize + offset).rem_euclid(k)) as usize
    }

    /// Hop count of the shorter arc between two positions.
    pub fn distance(&self, a: usize, b: usize) -> usize {
        let d = (b + self.len() - a) % self.len();
        d.min(self.len() - d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HopKind {
    Downlink,
    Distribute,
    Collect,
    Uplink,
    Fallback,
}

impl fmt::Display for HopKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HopKind::Downlink => "downlink",
            HopKind::Distribute => "distribute",
            HopKind::Collect => "collect",
            HopKind::Uplink => "uplink",
            HopKind::Fallback => "fallback",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Endpoint {
    Sat(SatelliteId),
    Gs,
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Sat(id) => write!(f, "{id}"),
            Endpoint::Gs => f.write_str("gs"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HopEvent {
    /// Delivery instant.
    pub time_s: f64,
    pub sent_s: f64,
    pub from: Endpoint,
    pub to: Endpoint,
    pub kind: HopKind,
    pub payload_bits: u64,
    pub cluster: usize,
}

impl HopEvent {
    fn hop(ring: &RingTopology, kind: HopKind, from: usize, to: usize, sent_s: f64, bits: u64) -> Self {
        HopEvent {
            time_s: sent_s + ring.hop_s,
            sent_s,
            from: Endpoint::Sat(ring.sats[from]),
            to: Endpoint::Sat(ring.sats[to]),
            kind,
            payload_bits: bits,
            cluster: ring.orbit,
        }
    }
}

/// Forward the payload from `source` in both directions. Each satellite
/// relays away from the side it first heard from; one that hears from both
/// sides at once stops. Returns the events and the last delivery instant.
pub fn distribute(ring: &RingTopology, source: SatelliteId, payload_bits: u64, start_s: f64) -> Result<(Vec<HopEvent>, f64)> {
    let s = ring.position(source)?;
    let k = ring.len();
    let mut events = Vec::new();
    if k == 1 {
        return Ok((events, start_s));
    }
    // clockwise wave: offset d relays while it is strictly the nearer side
    // sends chain off the previous delivery so receipt and relay times agree exactly
    let mut sent = start_s;
    for d in 0..k {
        if d == 0 || 2 * d < k {
            let e = HopEvent::hop(ring, HopKind::Distribute, ring.at(s, d as isize), ring.at(s, d as isize + 1), sent, payload_bits);
            sent = e.time_s;
            events.push(e);
        }
    }
    // counter-clockwise wave; with two satellites the single neighbour is already served
    if k > 2 {
        let mut sent = start_s;
        for d in 0..k {
            if d == 0 || 2 * d < k {
                let e = HopEvent::hop(ring, HopKind::Distribute, ring.at(s, -(d as isize)), ring.at(s, -(d as isize) - 1), sent, payload_bits);
                sent = e.time_s;
                events.push(e);
            }
        }
    }
    events.sort_by(|a, b| a.time_s.total_cmp(&b.time_s));
    let completion = events.iter().map(|e| e.time_s).fold(start_s, f64::max);
    Ok((events, completion))
}

/// Running weighted sum with an exact integer weight.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialAggregate {
    pub weighted_sum: Vec<f64>,
    pub weight: u64,
    pub contributors: BTreeSet<SatelliteId>,
}

impl PartialAggregate {
    pub fn new(dim: usize) -> Self {
        PartialAggregate {
            weighted_sum: vec![0.0; dim],
            weight: 0,
            contributors: BTreeSet::new(),
        }
    }

    pub fn add(&mut self, sat: SatelliteId, samples: u64, params: &[f64]) -> Result<()> {
        if params.len() != self.weighted_sum.len() {
            return Err(Error::Protocol(format!(
                "satellite {sat} sent {} parameters, expected {}",
                params.len(),
                self.weighted_sum.len()
            )));
        }
        if !self.contributors.insert(sat) {
            return Err(Error::Protocol(format!("satellite {sat} contributed twice")));
        }
        let d = samples as f64;
        for (acc, w) in self.weighted_sum.iter_mut().zip(params) {
            *acc += d * w;
        }
        self.weight += samples;
        Ok(())
    }

    pub fn merge(&mut self, other: &PartialAggregate) -> Result<()> {
        if other.weighted_sum.len() != self.weighted_sum.len() {
            return Err(Error::Protocol("partial aggregates differ in dimension".into()));
        }
        if let Some(dup) = self.contributors.intersection(&other.contributors).next() {
            return Err(Error::Protocol(format!("satellite {dup} counted twice while merging")));
        }
        for (acc, w) in self.weighted_sum.iter_mut().zip(&other.weighted_sum) {
            *acc += w;
        }
        self.weight += other.weight;
        self.contributors.extend(other.contributors.iter().copied());
        Ok(())
    }

    pub fn finalize(&self) -> Result<Vec<f64>> {
        if self.weight == 0 {
            return Err(Error::Protocol("aggregate has zero weight".into()));
        }
        let w = self.weight as f64;
        Ok(self.weighted_sum.iter().map(|x| x / w).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub sat: SatelliteId,
    pub samples: u64,
    pub params: Vec<f64>,
    /// Instant local training finished.
    pub ready_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Collected {
    pub events: Vec<HopEvent>,
    pub aggregate: PartialAggregate,
    pub completion_s: f64,
}

/// Aggregate toward `sink` along both arcs. A satellite forwards once it has
/// finished training and heard from its upstream neighbour, adding its own
/// weighted parameters first.
pub fn collect(ring: &RingTopology, sink: SatelliteId, locals: &[LocalUpdate], start_s: f64, payload_bits: u64) -> Result<Collected> {
    let k = ring.len();
    let sink_pos = ring.position(sink)?;
    let dim = locals.first().map(|l| l.params.len()).unwrap_or(0);
    let mut by_pos: Vec<Option<&LocalUpdate>> = vec![None; k];
    for l in locals {
        let i = ring.position(l.sat)?;
        if by_pos[i].replace(l).is_some() {
            return Err(Error::Protocol(format!("two local updates from satellite {}", l.sat)));
        }
    }
    let local = |i: usize| by_pos[i].ok_or(Error::MissingLocal(ring.sats[i]));

    // parent of the satellite `d` steps clockwise from the sink
    let parent = |d: usize| -> usize {
        let i = ring.at(sink_pos, d as isize);
        if 2 * d < k {
            ring.at(i, -1)
        } else if 2 * d > k {
            ring.at(i, 1)
        } else {
            ring.at(i, -1).min(ring.at(i, 1))
        }
    };

    let mut partial: Vec<PartialAggregate> = (0..k).map(|_| PartialAggregate::new(dim)).collect();
    let mut inbound = vec![f64::NEG_INFINITY; k];
    let mut events = Vec::new();
    // farthest first so every child is done before its parent
    let mut order: Vec<usize> = (1..k).collect();
    order.sort_by_key(|&d| std::cmp::Reverse(d.min(k - d)));
    for d in order {
        let i = ring.at(sink_pos, d as isize);
        let own = local(i)?;
        partial[i].add(own.sat, own.samples, &own.params)?;
        let sent = own.ready_s.max(start_s).max(inbound[i]);
        let p = parent(d);
        let ev = HopEvent::hop(ring, HopKind::Collect, i, p, sent, payload_bits);
        inbound[p] = inbound[p].max(ev.time_s);
        events.push(ev);
        let done = std::mem::replace(&mut partial[i], PartialAggregate::new(0));
        partial[p].merge(&done)?;
    }
    let own = local(sink_pos)?;
    let mut aggregate = std::mem::replace(&mut partial[sink_pos], PartialAggregate::new(0));
    // sink adds its own update last so the merge order is fixed
    let mut sink_part = PartialAggregate::new(dim);
    sink_part.add(own.sat, own.samples, &own.params)?;
    aggregate.merge(&sink_part)?;
    let completion_s = own.ready_s.max(start_s).max(inbound[sink_pos]);
    events.sort_by(|a, b| a.time_s.total_cmp(&b.time_s));
    Ok(Collected {
        events,
        aggregate,
        completion_s,
    })
}

/// Earliest instant at or after `ready_s + uplink_s` at which `pattern`'s
/// satellite is visible; an uplink counts once it lands during a pass.
pub fn uplink_arrival(pattern: &crate::orbital::VisibilityPattern, ready_s: f64, uplink_s: f64) -> Option<f64> {
    pattern.first_visible_at_or_after(ready_s + uplink_s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Handoff {
    pub events: Vec<HopEvent>,
    pub relay: SatelliteId,
    pub arrival_s: f64,
}

/// Route the aggregate held by a sink that cannot see the ground station at
/// `t_s` to the ring member with the earliest reachable uplink, then uplink.
/// Returns `None` when the sink itself can deliver directly.
pub fn fallback_handoff(
    ring: &RingTopology,
    sink: SatelliteId,
    visibility: &ClusterVisibility,
    t_s: f64,
    uplink_s: f64,
    payload_bits: u64,
) -> Result<Option<Handoff>> {
    let sink_pos = ring.position(sink)?;
    let sink_pat = visibility
        .member(sink)
        .ok_or_else(|| Error::Protocol(format!("no visibility pattern for satellite {sink}")))?;
    if sink_pat.is_visible(t_s) {
        return Ok(None);
    }
    let k = ring.len();
    let mut best: Option<(f64, usize, usize)> = None;
    for j in 0..k {
        let hops = ring.distance(sink_pos, j);
        let Some(pat) = visibility.member(ring.sats[j]) else {
            continue;
        };
        let Some(arrival) = uplink_arrival(pat, t_s + hops as f64 * ring.hop_s, uplink_s) else {
            continue;
        };
        let better = match best {
            None => true,
            Some((a, h, p)) => (arrival, hops, j) < (a, h, p),
        };
        if better {
            best = Some((arrival, hops, j));
        }
    }
    let (arrival_s, hops, j) = best.ok_or_else(|| {
        Error::Infeasible(format!(
            "no satellite of orbit {} becomes visible after {t_s:.3} s",
            ring.orbit
        ))
    })?;
    // walk the shorter arc; on a tie go toward the lower position
    let cw = (j + k - sink_pos) % k;
    let step: isize = if cw < k - cw || (cw == k - cw && ring.at(sink_pos, 1) < ring.at(sink_pos, -1)) {
        1
    } else {
        -1
    };
    let mut events = Vec::with_capacity(hops + 1);
    let mut at = sink_pos;
    for h in 0..hops {
        let next = ring.at(at, step);
        events.push(HopEvent::hop(ring, HopKind::Fallback, at, next, t_s + h as f64 * ring.hop_s, payload_bits));
        at = next;
    }
    events.push(HopEvent {
        time_s: arrival_s,
        sent_s: arrival_s - uplink_s,
        from: Endpoint::Sat(ring.sats[j]),
        to: Endpoint::Gs,
        kind: HopKind::Uplink,
        payload_bits,
        cluster: ring.orbit,
    });
    Ok(Some(Handoff {
        events,
        relay: ring.sats[j],
        arrival_s,
    }))
}
