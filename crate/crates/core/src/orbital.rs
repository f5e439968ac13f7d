//! Circular two-body propagation of Walker constellations and ground-station
//! visibility.
//!
//! Frames: satellites live in an Earth-centred inertial frame, the ground
//! station rotates with a spherical Earth. At absolute time zero the prime
//! meridian lies on +x. Simulation time `t` maps to absolute time
//! `t + epoch_offset_s`, so one knob shifts the whole geometry.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard gravitational parameter of the Earth, m³/s².
pub const EARTH_MU: f64 = 3.986004418e14;
/// Mean spherical Earth radius, m.
pub const EARTH_RADIUS_M: f64 = 6.371e6;
/// Sidereal rotation rate, rad/s.
pub const EARTH_ROTATION_RAD_S: f64 = 7.2921159e-5;

/// Coarsest sampling step accepted by [`visibility_pattern`].
pub const MAX_VISIBILITY_STEP_S: f64 = 30.0;
/// Boundary refinement target for rise and set instants.
pub const BOUNDARY_TOLERANCE_S: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundStation {
    pub name: String,
    pub latitude_deg: f64,
    pub longitude_deg: f64,
}

impl GroundStation {
    pub fn new(name: impl Into<String>, latitude_deg: f64, longitude_deg: f64) -> Result<Self> {
        let gs = GroundStation {
            name: name.into(),
            latitude_deg,
            longitude_deg,
        };
        gs.validate()?;
        Ok(gs)
    }

    /// Bremen, Germany (53.073° N, 8.806° E).
    pub fn bremen() -> Self {
        GroundStation {
            name: "Bremen".into(),
            latitude_deg: 53.073,
            longitude_deg: 8.806,
        }
    }

    /// São Paulo, Brazil (23.55° S, 46.633° W).
    pub fn sao_paulo() -> Self {
        GroundStation {
            name: "Sao Paulo".into(),
            latitude_deg: -23.55,
            longitude_deg: -46.633,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.latitude_deg) {
            return Err(Error::Config(format!(
                "latitude_deg {} outside [-90, 90]",
                self.latitude_deg
            )));
        }
        if !(self.longitude_deg > -180.0 && self.longitude_deg <= 180.0) {
            return Err(Error::Config(format!(
                "longitude_deg {} outside (-180, 180]",
                self.longitude_deg
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WalkerPattern {
    /// Ascending nodes spread over 360°.
    Delta,
    /// Ascending nodes spread over 180°.
    Star,
}

impl WalkerPattern {
    pub fn raan_spread_rad(self) -> f64 {
        match self {
            WalkerPattern::Delta => TAU,
            WalkerPattern::Star => PI,
        }
    }
}

/// One orbital plane: `sats` equidistant satellites on a circular orbit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrbitalPlane {
    pub sats: usize,
    pub altitude_m: f64,
    pub inclination_deg: f64,
}

impl OrbitalPlane {
    pub fn radius_m(&self) -> f64 {
        EARTH_RADIUS_M + self.altitude_m
    }

    pub fn period_s(&self) -> f64 {
        orbital_period_s(self.altitude_m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstellationConfig {
    pub planes: Vec<OrbitalPlane>,
    pub pattern: WalkerPattern,
    pub phasing_factor: i64,
    pub epoch_offset_s: f64,
}

impl ConstellationConfig {
    /// Uniform Walker constellation with phasing factor 1 and zero epoch offset.
    pub fn walker(
        pattern: WalkerPattern,
        orbits: usize,
        sats_per_orbit: usize,
        altitude_m: f64,
        inclination_deg: f64,
    ) -> Self {
        ConstellationConfig {
            planes: vec![
                OrbitalPlane {
                    sats: sats_per_orbit,
                    altitude_m,
                    inclination_deg,
                };
                orbits
            ],
            pattern,
            phasing_factor: 1,
            epoch_offset_s: 0.0,
        }
    }

    pub fn with_epoch_offset(mut self, epoch_offset_s: f64) -> Self {
        self.epoch_offset_s = epoch_offset_s;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.planes.is_empty() {
            return Err(Error::Config("constellation needs at least one orbit".into()));
        }
        for (i, plane) in self.planes.iter().enumerate() {
            if plane.sats == 0 {
                return Err(Error::Config(format!("orbit {} has no satellites", i + 1)));
            }
            if !(plane.altitude_m > 0.0 && plane.altitude_m.is_finite()) {
                return Err(Error::Config(format!(
                    "orbit {} altitude_m must be positive, got {}",
                    i + 1,
                    plane.altitude_m
                )));
            }
            if !plane.inclination_deg.is_finite() {
                return Err(Error::Config(format!("orbit {} inclination is not finite", i + 1)));
            }
        }
        if !self.epoch_offset_s.is_finite() {
            return Err(Error::Config("epoch_offset_s is not finite".into()));
        }
        Ok(())
    }

    pub fn orbit_count(&self) -> usize {
        self.planes.len()
    }

    pub fn total_sats(&self) -> usize {
        self.planes.iter().map(|p| p.sats).sum()
    }

    /// Plane of 1-based orbit `p`.
    pub fn plane(&self, p: usize) -> Result<&OrbitalPlane> {
        if p == 0 {
            return Err(Error::Config("orbit indices start at 1".into()));
        }
        self.planes
            .get(p - 1)
            .ok_or_else(|| Error::Config(format!("orbit {p} does not exist (P = {})", self.planes.len())))
    }

    pub fn check_sat(&self, sat: SatelliteId) -> Result<&OrbitalPlane> {
        let plane = self.plane(sat.orbit)?;
        if sat.slot == 0 || sat.slot > plane.sats {
            return Err(Error::Config(format!(
                "satellite {sat} does not exist (orbit {} has {} satellites)",
                sat.orbit, plane.sats
            )));
        }
        Ok(plane)
    }

    /// Satellites of orbit `p` in ring order.
    pub fn members(&self, p: usize) -> Result<Vec<SatelliteId>> {
        let plane = self.plane(p)?;
        Ok((1..=plane.sats).map(|slot| SatelliteId::new(p, slot)).collect())
    }

    pub fn satellites(&self) -> impl Iterator<Item = SatelliteId> + '_ {
        self.planes
            .iter()
            .enumerate()
            .flat_map(|(i, plane)| (1..=plane.sats).map(move |slot| SatelliteId::new(i + 1, slot)))
    }

    fn track(&self, sat: SatelliteId) -> Result<Track> {
        let plane = self.check_sat(sat)?;
        let orbit_idx = (sat.orbit - 1) as f64;
        let raan = orbit_idx * self.pattern.raan_spread_rad() / self.planes.len() as f64;
        let total = self.total_sats() as f64;
        let phase = TAU * (sat.slot - 1) as f64 / plane.sats as f64
            + TAU * self.phasing_factor as f64 * orbit_idx / total;
        let radius = plane.radius_m();
        let inc = plane.inclination_deg.to_radians();
        Ok(Track {
            radius,
            mean_motion: (EARTH_MU / radius.powi(3)).sqrt(),
            phase,
            cos_raan: raan.cos(),
            sin_raan: raan.sin(),
            cos_inc: inc.cos(),
            sin_inc: inc.sin(),
            epoch_offset_s: self.epoch_offset_s,
        })
    }
}

/// 1-based (orbit, slot) pair naming satellite k_{p,slot}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct SatelliteId {
    pub orbit: usize,
    pub slot: usize,
}

impl SatelliteId {
    pub const fn new(orbit: usize, slot: usize) -> Self {
        SatelliteId { orbit, slot }
    }
}

impl fmt::Display for SatelliteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.orbit, self.slot)
    }
}

impl FromStr for SatelliteId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("satellite id `{s}` is not of the form <orbit>-<slot>"));
        let (p, k) = s.split_once('-').ok_or_else(bad)?;
        let orbit = p.trim().parse().map_err(|_| bad())?;
        let slot = k.trim().parse().map_err(|_| bad())?;
        Ok(SatelliteId { orbit, slot })
    }
}

impl From<SatelliteId> for String {
    fn from(id: SatelliteId) -> String {
        id.to_string()
    }
}

impl TryFrom<String> for SatelliteId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateVector {
    /// Inertial position, m.
    pub position: [f64; 3],
    /// Simulation time, s.
    pub time_s: f64,
}

impl StateVector {
    pub fn norm(&self) -> f64 {
        norm(self.position)
    }
}

#[derive(Debug, Clone, Copy)]
struct Track {
    radius: f64,
    mean_motion: f64,
    phase: f64,
    cos_raan: f64,
    sin_raan: f64,
    cos_inc: f64,
    sin_inc: f64,
    epoch_offset_s: f64,
}

impl Track {
    fn position(&self, t: f64) -> [f64; 3] {
        let u = self.phase + self.mean_motion * (t + self.epoch_offset_s);
        let (su, cu) = u.sin_cos();
        [
            self.radius * (self.cos_raan * cu - self.sin_raan * su * self.cos_inc),
            self.radius * (self.sin_raan * cu + self.cos_raan * su * self.cos_inc),
            self.radius * su * self.sin_inc,
        ]
    }
}

#[derive(Debug, Clone, Copy)]
struct Site {
    cos_lat: f64,
    sin_lat: f64,
    lon: f64,
}

impl Site {
    fn new(gs: &GroundStation) -> Self {
        let lat = gs.latitude_deg.to_radians();
        Site {
            cos_lat: lat.cos(),
            sin_lat: lat.sin(),
            lon: gs.longitude_deg.to_radians(),
        }
    }

    /// Position at absolute time `t_abs`.
    fn position(&self, t_abs: f64) -> [f64; 3] {
        let (s, c) = (self.lon + EARTH_ROTATION_RAD_S * t_abs).sin_cos();
        [
            EARTH_RADIUS_M * self.cos_lat * c,
            EARTH_RADIUS_M * self.cos_lat * s,
            EARTH_RADIUS_M * self.sin_lat,
        ]
    }
}

pub fn orbital_period_s(altitude_m: f64) -> f64 {
    TAU * ((EARTH_RADIUS_M + altitude_m).powi(3) / EARTH_MU).sqrt()
}

fn check_time(t: f64) -> Result<()> {
    if t.is_finite() && t >= 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("time must be finite and non-negative, got {t}")))
    }
}

/// Inertial position of `sat` at simulation time `t`.
pub fn propagate(config: &ConstellationConfig, sat: SatelliteId, t: f64) -> Result<StateVector> {
    check_time(t)?;
    let track = config.track(sat)?;
    Ok(StateVector {
        position: track.position(t),
        time_s: t,
    })
}

/// Inertial position of the ground station at absolute time `t`.
pub fn gs_position(gs: &GroundStation, t: f64) -> StateVector {
    StateVector {
        position: Site::new(gs).position(t),
        time_s: t,
    }
}

/// Ground-station position at simulation time `t` of `config`'s epoch.
pub fn gs_position_at(config: &ConstellationConfig, gs: &GroundStation, t: f64) -> StateVector {
    StateVector {
        position: Site::new(gs).position(t + config.epoch_offset_s),
        time_s: t,
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

/// Elevation of `sat_pos` above the local horizon of `gs_pos`, in radians.
pub fn elevation_rad(sat_pos: &StateVector, gs_pos: &StateVector) -> Result<f64> {
    elevation_raw(sat_pos.position, gs_pos.position)
}

fn elevation_raw(sat: [f64; 3], gs: [f64; 3]) -> Result<f64> {
    let los = sub(sat, gs);
    let (n_los, n_gs) = (norm(los), norm(gs));
    if n_los == 0.0 || n_gs == 0.0 {
        return Err(Error::Domain("zero-length line of sight".into()));
    }
    // π/2 − ∠(r_gs, r_k − r_gs) = asin(cos ∠)
    Ok((dot(gs, los) / (n_los * n_gs)).clamp(-1.0, 1.0).asin())
}

pub fn is_visible_gs(sat_pos: &StateVector, gs_pos: &StateVector, min_elevation_deg: f64) -> Result<bool> {
    Ok(elevation_rad(sat_pos, gs_pos)? >= min_elevation_deg.to_radians())
}

/// Maximum line-of-sight distance between two satellites over a spherical Earth.
pub fn max_slant_range_m(h_k: f64, h_i: f64) -> f64 {
    let half = |h: f64| (h * h + 2.0 * EARTH_RADIUS_M * h).sqrt();
    half(h_k) + half(h_i)
}

pub fn is_visible_isl(pos_k: &StateVector, pos_i: &StateVector, h_k: f64, h_i: f64) -> bool {
    norm(sub(pos_k.position, pos_i.position)) < max_slant_range_m(h_k, h_i)
}

/// Longest ground-station distance at which a satellite at `altitude_m` still
/// clears `min_elevation_deg`.
pub fn max_gs_distance_m(altitude_m: f64, min_elevation_deg: f64) -> f64 {
    let r = EARTH_RADIUS_M + altitude_m;
    let (s, c) = min_elevation_deg.to_radians().sin_cos();
    (r * r - (EARTH_RADIUS_M * c).powi(2)).sqrt() - EARTH_RADIUS_M * s
}

/// Closed rise/set interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisibilityInterval {
    pub rise_s: f64,
    pub set_s: f64,
}

impl VisibilityInterval {
    pub fn new(rise_s: f64, set_s: f64) -> Result<Self> {
        if !(rise_s.is_finite() && set_s.is_finite() && rise_s < set_s) {
            return Err(Error::Domain(format!("interval needs rise < set, got [{rise_s}, {set_s}]")));
        }
        Ok(VisibilityInterval { rise_s, set_s })
    }

    pub fn contains(&self, t: f64) -> bool {
        self.rise_s <= t && t <= self.set_s
    }

    pub fn duration_s(&self) -> f64 {
        self.set_s - self.rise_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Subject {
    Satellite(SatelliteId),
    Cluster(usize),
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subject::Satellite(id) => write!(f, "sat_{}_{}", id.orbit, id.slot),
            Subject::Cluster(p) => write!(f, "cluster_{p}"),
        }
    }
}

/// Sorted, pairwise disjoint visibility intervals over `[0, horizon_s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityPattern {
    pub subject: Subject,
    pub horizon_s: f64,
    pub intervals: Vec<VisibilityInterval>,
}

impl VisibilityPattern {
    pub fn new(subject: Subject, horizon_s: f64, intervals: Vec<VisibilityInterval>) -> Result<Self> {
        if !(horizon_s > 0.0 && horizon_s.is_finite()) {
            return Err(Error::Domain(format!("horizon must be positive, got {horizon_s}")));
        }
        for w in intervals.windows(2) {
            if w[0].set_s >= w[1].rise_s {
                return Err(Error::Domain(format!(
                    "intervals [{}, {}] and [{}, {}] are unsorted or overlap",
                    w[0].rise_s, w[0].set_s, w[1].rise_s, w[1].set_s
                )));
            }
        }
        for iv in &intervals {
            if iv.rise_s < 0.0 || iv.set_s > horizon_s || iv.rise_s >= iv.set_s {
                return Err(Error::Domain(format!(
                    "interval [{}, {}] outside [0, {horizon_s}]",
                    iv.rise_s, iv.set_s
                )));
            }
        }
        Ok(VisibilityPattern {
            subject,
            horizon_s,
            intervals,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    /// Index of the last interval with `rise_s <= t`.
    fn last_rise_at_or_before(&self, t: f64) -> Option<usize> {
        self.intervals.partition_point(|iv| iv.rise_s <= t).checked_sub(1)
    }

    /// Interval containing `t` (closed).
    pub fn interval_at(&self, t: f64) -> Option<&VisibilityInterval> {
        self.last_rise_at_or_before(t)
            .map(|i| &self.intervals[i])
            .filter(|iv| t <= iv.set_s)
    }

    pub fn is_visible(&self, t: f64) -> bool {
        self.interval_at(t).is_some()
    }

    /// First interval whose rise is at or after `t`.
    pub fn next_rise(&self, t: f64) -> Option<&VisibilityInterval> {
        let i = self.intervals.partition_point(|iv| iv.rise_s < t);
        self.intervals.get(i)
    }

    /// Earliest visible instant at or after `t`.
    pub fn first_visible_at_or_after(&self, t: f64) -> Option<f64> {
        if self.is_visible(t) {
            Some(t)
        } else {
            self.next_rise(t).map(|iv| iv.rise_s)
        }
    }

    /// Latest set time at or before `t`.
    pub fn last_set_at_or_before(&self, t: f64) -> Option<f64> {
        let i = self.intervals.partition_point(|iv| iv.set_s <= t);
        i.checked_sub(1).map(|i| self.intervals[i].set_s)
    }

    /// Union of `patterns`, merging overlapping and abutting intervals.
    pub fn union(subject: Subject, patterns: &[&VisibilityPattern]) -> Result<Self> {
        let horizon_s = patterns
            .iter()
            .map(|p| p.horizon_s)
            .fold(f64::NAN, f64::max);
        let mut all: Vec<VisibilityInterval> = patterns.iter().flat_map(|p| p.intervals.iter().copied()).collect();
        all.sort_by(|a, b| a.rise_s.total_cmp(&b.rise_s));
        let mut merged: Vec<VisibilityInterval> = Vec::with_capacity(all.len());
        for iv in all {
            match merged.last_mut() {
                Some(last) if iv.rise_s <= last.set_s => last.set_s = last.set_s.max(iv.set_s),
                _ => merged.push(iv),
            }
        }
        VisibilityPattern::new(subject, horizon_s, merged)
    }

    pub fn total_visible_s(&self) -> f64 {
        self.intervals.iter().map(VisibilityInterval::duration_s).sum()
    }
}

/// Sampling parameters for pattern extraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisibilityQuery {
    pub min_elevation_deg: f64,
    pub horizon_s: f64,
    pub step_s: f64,
}

impl VisibilityQuery {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon_s > 0.0 && self.horizon_s.is_finite()) {
            return Err(Error::Config(format!("horizon_s must be positive, got {}", self.horizon_s)));
        }
        // Passes shorter than the step are still caught by peak detection, but
        // that relies on the elevation being unimodal across two steps.
        if !(self.step_s > 0.0 && self.step_s <= MAX_VISIBILITY_STEP_S) {
            return Err(Error::Config(format!(
                "step_s must lie in (0, {MAX_VISIBILITY_STEP_S}], got {}",
                self.step_s
            )));
        }
        if !(-90.0..90.0).contains(&self.min_elevation_deg) {
            return Err(Error::Config(format!(
                "min_elevation_deg {} outside [-90, 90)",
                self.min_elevation_deg
            )));
        }
        Ok(())
    }
}

/// Visibility of a satellite against one site, as a function of simulation time.
struct Margin {
    track: Track,
    site: Site,
    min_elevation_rad: f64,
}

impl Margin {
    fn at(&self, t: f64) -> f64 {
        let gs = self.site.position(t + self.track.epoch_offset_s);
        // A satellite never coincides with the ground station.
        elevation_raw(self.track.position(t), gs).unwrap_or(-PI) - self.min_elevation_rad
    }

    /// Boundary between `lo` and `hi` whose margins differ in sign. Returns the
    /// endpoint on the visible side once the bracket is within tolerance.
    fn bisect(&self, mut lo: f64, mut hi: f64) -> f64 {
        let lo_visible = self.at(lo) >= 0.0;
        while hi - lo > BOUNDARY_TOLERANCE_S {
            let mid = 0.5 * (lo + hi);
            if (self.at(mid) >= 0.0) == lo_visible {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        if lo_visible {
            lo
        } else {
            hi
        }
    }

    /// Golden-section maximisation of the margin on `[a, b]`.
    fn peak(&self, mut a: f64, mut b: f64) -> (f64, f64) {
        const INV_PHI: f64 = 0.618_033_988_749_894_9;
        let mut c = b - INV_PHI * (b - a);
        let mut d = a + INV_PHI * (b - a);
        let (mut fc, mut fd) = (self.at(c), self.at(d));
        while b - a > BOUNDARY_TOLERANCE_S {
            if fc >= fd {
                b = d;
                d = c;
                fd = fc;
                c = b - INV_PHI * (b - a);
                fc = self.at(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + INV_PHI * (b - a);
                fd = self.at(d);
            }
        }
        if fc >= fd {
            (c, fc)
        } else {
            (d, fd)
        }
    }

    fn intervals(&self, horizon_s: f64, step_s: f64) -> Vec<VisibilityInterval> {
        let n = (horizon_s / step_s).ceil() as usize;
        let times: Vec<f64> = (0..=n).map(|i| (i as f64 * step_s).min(horizon_s)).collect();
        let f: Vec<f64> = times.iter().map(|&t| self.at(t)).collect();

        let mut found = Vec::new();
        let mut rise = (f[0] >= 0.0).then_some(0.0);
        for i in 1..=n {
            match (f[i - 1] >= 0.0, f[i] >= 0.0) {
                (false, true) => rise = Some(self.bisect(times[i - 1], times[i])),
                (true, false) => {
                    let set = self.bisect(times[i - 1], times[i]);
                    found.push((rise.take().unwrap_or(0.0), set));
                }
                _ => {}
            }
        }
        if let Some(r) = rise {
            found.push((r, horizon_s));
        }

        // A pass shorter than one step can leave every sample below the mask.
        // Search around each sampled local maximum whose neighbours are all
        // below the mask as well.
        for i in 0..=n {
            if f[i] >= 0.0 {
                continue;
            }
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n);
            if f[lo] > f[i] || f[hi] > f[i] || f[lo] >= 0.0 || f[hi] >= 0.0 {
                continue;
            }
            if let Some(pass) = self.hidden_pass(times[lo], times[hi]) {
                found.push(pass);
            }
        }

        found.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut out = Vec::with_capacity(found.len());
        for (r, s) in found {
            push_interval(&mut out, r, s);
        }
        out
    }

    fn hidden_pass(&self, a: f64, b: f64) -> Option<(f64, f64)> {
        if b <= a {
            return None;
        }
        let (t_peak, f_peak) = self.peak(a, b);
        (f_peak >= 0.0).then(|| (self.bisect(a, t_peak), self.bisect(t_peak, b)))
    }
}

fn push_interval(out: &mut Vec<VisibilityInterval>, rise: f64, set: f64) {
    if set <= rise {
        return;
    }
    match out.last_mut() {
        Some(last) if rise <= last.set_s => last.set_s = last.set_s.max(set),
        _ => out.push(VisibilityInterval { rise_s: rise, set_s: set }),
    }
}

pub fn satellite_pattern(
    config: &ConstellationConfig,
    sat: SatelliteId,
    gs: &GroundStation,
    query: &VisibilityQuery,
) -> Result<VisibilityPattern> {
    query.validate()?;
    let margin = Margin {
        track: config.track(sat)?,
        site: Site::new(gs),
        min_elevation_rad: query.min_elevation_deg.to_radians(),
    };
    let intervals = margin.intervals(query.horizon_s, query.step_s);
    VisibilityPattern::new(Subject::Satellite(sat), query.horizon_s, intervals)
}

/// Cumulative pattern of orbit `p` together with its members' own patterns.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterVisibility {
    pub orbit: usize,
    pub pattern: VisibilityPattern,
    pub members: Vec<VisibilityPattern>,
}

impl ClusterVisibility {
    pub fn from_members(orbit: usize, members: Vec<VisibilityPattern>) -> Result<Self> {
        let refs: Vec<&VisibilityPattern> = members.iter().collect();
        let pattern = VisibilityPattern::union(Subject::Cluster(orbit), &refs)?;
        Ok(ClusterVisibility {
            orbit,
            pattern,
            members,
        })
    }

    pub fn member(&self, sat: SatelliteId) -> Option<&VisibilityPattern> {
        self.members
            .iter()
            .find(|m| m.subject == Subject::Satellite(sat))
    }
}

pub fn cluster_visibility(
    config: &ConstellationConfig,
    orbit: usize,
    gs: &GroundStation,
    query: &VisibilityQuery,
) -> Result<ClusterVisibility> {
    let members = config
        .members(orbit)?
        .into_iter()
        .map(|sat| satellite_pattern(config, sat, gs, query))
        .collect::<Result<Vec<_>>>()?;
    ClusterVisibility::from_members(orbit, members)
}

/// Pattern of a satellite, or the cumulative pattern of a cluster.
pub fn visibility_pattern(
    config: &ConstellationConfig,
    subject: Subject,
    gs: &GroundStation,
    query: &VisibilityQuery,
) -> Result<VisibilityPattern> {
    match subject {
        Subject::Satellite(sat) => satellite_pattern(config, sat, gs, query),
        Subject::Cluster(p) => cluster_visibility(config, p, gs, query).map(|c| c.pattern),
    }
}

/// CSV rows `subject,rise_s,set_s` with millisecond precision.
pub fn write_patterns_csv<W: std::io::Write>(out: W, patterns: &[&VisibilityPattern]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["subject", "rise_s", "set_s"]).map_err(csv_err)?;
    for pattern in patterns {
        let subject = pattern.subject.to_string();
        for iv in &pattern.intervals {
            w.write_record([
                subject.as_str(),
                &format!("{:.3}", iv.rise_s),
                &format!("{:.3}", iv.set_s),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_delta() -> ConstellationConfig {
        ConstellationConfig::walker(WalkerPattern::Delta, 5, 8, 2.0e6, 60.0)
    }

    #[test]
    fn radius_is_altitude_above_sphere() {
        let cfg = reference_delta();
        for sat in cfg.satellites() {
            let sv = propagate(&cfg, sat, 0.0).unwrap();
            assert!((sv.norm() - 8.371e6).abs() < 1e-6 * 8.371e6);
        }
    }

    #[test]
    fn period_at_2000_km() {
        // 2π·sqrt((8.371e6)³/μ), evaluated with 40-digit arithmetic.
        assert!((orbital_period_s(2.0e6) - 7_622.141_262_852_221).abs() < 1e-6);
    }

    #[test]
    fn orbit_is_periodic() {
        let cfg = reference_delta();
        let sat = SatelliteId::new(1, 1);
        let t_orb = orbital_period_s(2.0e6);
        let a = propagate(&cfg, sat, 0.0).unwrap().position;
        let b = propagate(&cfg, sat, t_orb).unwrap().position;
        assert!(norm(sub(a, b)) < 1e-6);
    }

    #[test]
    fn ring_phase_and_plane_spacing() {
        let cfg = reference_delta();
        let r = cfg.planes[0].radius_m();
        let a = propagate(&cfg, SatelliteId::new(1, 1), 0.0).unwrap().position;
        let b = propagate(&cfg, SatelliteId::new(1, 2), 0.0).unwrap().position;
        let chord = 2.0 * r * (PI / 8.0).sin();
        assert!((norm(sub(a, b)) - chord).abs() < 1e-6);

        // orbit normals of adjacent planes are RAAN-separated by 72°
        let normal = |p: usize| {
            let inc = 60f64.to_radians();
            let raan = (p as f64 - 1.0) * TAU / 5.0;
            [raan.sin() * inc.sin(), -raan.cos() * inc.sin(), inc.cos()]
        };
        for p in 1..=5 {
            for slot in 1..=8 {
                let pos = propagate(&cfg, SatelliteId::new(p, slot), 123.0).unwrap().position;
                assert!(dot(pos, normal(p)).abs() < 1e-6 * r, "sat {p}-{slot} off its plane");
            }
        }
    }

    #[test]
    fn invalid_satellite_is_config_error() {
        let cfg = reference_delta();
        assert!(matches!(propagate(&cfg, SatelliteId::new(6, 1), 0.0), Err(Error::Config(_))));
        assert!(matches!(propagate(&cfg, SatelliteId::new(1, 9), 0.0), Err(Error::Config(_))));
        assert!(matches!(propagate(&cfg, SatelliteId::new(0, 1), 0.0), Err(Error::Config(_))));
        assert!(matches!(propagate(&cfg, SatelliteId::new(1, 1), -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn gs_frame_convention() {
        let gs = GroundStation::new("null island", 0.0, 0.0).unwrap();
        let p = gs_position(&gs, 0.0).position;
        assert!(norm(sub(p, [EARTH_RADIUS_M, 0.0, 0.0])) < 1e-9);
        let day = TAU / EARTH_ROTATION_RAD_S;
        let q = gs_position(&gs, day).position;
        assert!(norm(sub(q, [EARTH_RADIUS_M, 0.0, 0.0])) < 1e-6);
        for t in [0.0, 1234.5, 86_400.0] {
            let b = gs_position(&GroundStation::bremen(), t);
            assert!((b.norm() - EARTH_RADIUS_M).abs() < 1e-6);
        }
    }

    #[test]
    fn gs_bounds_are_validated() {
        assert!(GroundStation::new("x", 91.0, 0.0).is_err());
        assert!(GroundStation::new("x", 0.0, -180.0).is_err());
        assert!(GroundStation::new("x", 0.0, 180.0).is_ok());
    }

    #[test]
    fn zenith_and_antipode() {
        let gs = gs_position(&GroundStation::bremen(), 500.0);
        let u = gs.position.map(|c| c / EARTH_RADIUS_M);
        let zenith = StateVector {
            position: u.map(|c| c * (EARTH_RADIUS_M + 2.0e6)),
            time_s: 500.0,
        };
        assert!(is_visible_gs(&zenith, &gs, 10.0).unwrap());
        assert!((elevation_rad(&zenith, &gs).unwrap() - PI / 2.0).abs() < 1e-9);
        let antipode = StateVector {
            position: u.map(|c| -c * (EARTH_RADIUS_M + 2.0e6)),
            time_s: 500.0,
        };
        assert!(!is_visible_gs(&antipode, &gs, 10.0).unwrap());
        assert!(matches!(elevation_rad(&gs, &gs), Err(Error::Domain(_))));
    }

    #[test]
    fn isl_slant_range() {
        // sqrt((2e6)² + 2·6.371e6·2e6), doubled
        let ds = max_slant_range_m(2.0e6, 2.0e6);
        assert!((ds - 10_859_834.252_878_816).abs() < 1e-6);
        let p = StateVector {
            position: [8.371e6, 0.0, 0.0],
            time_s: 0.0,
        };
        assert!(is_visible_isl(&p, &p, 2.0e6, 2.0e6));
        let q = StateVector {
            position: [-8.371e6, 0.0, 0.0],
            time_s: 0.0,
        };
        assert!(!is_visible_isl(&p, &q, 2.0e6, 2.0e6));
    }

    /// Sweep of the Earth-central angle at 0.01° steps; the last angle whose
    /// elevation still clears the mask bounds the visible distance.
    fn swept_max_distance(h: f64, mask_deg: f64) -> (f64, f64) {
        let r = EARTH_RADIUS_M + h;
        let gs = [EARTH_RADIUS_M, 0.0, 0.0];
        let mut best = (0.0, 0.0);
        let mut k = 0;
        loop {
            let g = (k as f64 * 0.01).to_radians();
            let sat = [r * g.cos(), r * g.sin(), 0.0];
            let el = elevation_raw(sat, gs).unwrap().to_degrees();
            if el < mask_deg {
                let g_next = sat;
                return (best.0, norm(sub(g_next, gs)));
            }
            best = (norm(sub(sat, gs)), 0.0);
            k += 1;
        }
    }

    #[test]
    fn max_gs_distance_matches_sweep() {
        for (h, mask) in [(2.0e6, 10.0), (5.5e5, 25.0), (1.2e6, 0.0)] {
            let (below, above) = swept_max_distance(h, mask);
            let d = max_gs_distance_m(h, mask);
            assert!(below <= d + 1e-6 && d <= above + 1e-6, "h={h}: {below} <= {d} <= {above}");
        }
        // zenith-only mask collapses to the altitude
        assert!((max_gs_distance_m(2.0e6, 89.9) - 2.0e6).abs() < 1e3);
    }

    #[test]
    fn union_merges_overlaps() {
        let a = VisibilityPattern::new(
            Subject::Satellite(SatelliteId::new(1, 1)),
            1000.0,
            vec![VisibilityInterval::new(100.0, 200.0).unwrap()],
        )
        .unwrap();
        let b = VisibilityPattern::new(
            Subject::Satellite(SatelliteId::new(1, 2)),
            1000.0,
            vec![
                VisibilityInterval::new(150.0, 300.0).unwrap(),
                VisibilityInterval::new(400.0, 410.0).unwrap(),
            ],
        )
        .unwrap();
        let u = VisibilityPattern::union(Subject::Cluster(1), &[&a, &b]).unwrap();
        assert_eq!(
            u.intervals,
            vec![
                VisibilityInterval { rise_s: 100.0, set_s: 300.0 },
                VisibilityInterval { rise_s: 400.0, set_s: 410.0 }
            ]
        );
        // abutting intervals merge too
        let c = VisibilityPattern::new(
            Subject::Satellite(SatelliteId::new(1, 3)),
            1000.0,
            vec![VisibilityInterval::new(300.0, 400.0).unwrap()],
        )
        .unwrap();
        let u = VisibilityPattern::union(Subject::Cluster(1), &[&u, &c]).unwrap();
        assert_eq!(u.intervals, vec![VisibilityInterval { rise_s: 100.0, set_s: 410.0 }]);
    }

    #[test]
    fn pattern_rejects_overlap() {
        let r = VisibilityPattern::new(
            Subject::Cluster(1),
            1000.0,
            vec![
                VisibilityInterval { rise_s: 0.0, set_s: 10.0 },
                VisibilityInterval { rise_s: 5.0, set_s: 20.0 },
            ],
        );
        assert!(r.is_err());
    }

    #[test]
    fn single_satellite_cluster_equals_member() {
        let cfg = ConstellationConfig::walker(WalkerPattern::Delta, 1, 1, 2.0e6, 60.0);
        let q = VisibilityQuery {
            min_elevation_deg: 10.0,
            horizon_s: 86_400.0,
            step_s: 10.0,
        };
        let gs = GroundStation::bremen();
        let sat = satellite_pattern(&cfg, SatelliteId::new(1, 1), &gs, &q).unwrap();
        let cl = visibility_pattern(&cfg, Subject::Cluster(1), &gs, &q).unwrap();
        assert!(!sat.is_empty());
        assert_eq!(sat.intervals, cl.intervals);
    }

    #[test]
    fn boundaries_flip_visibility() {
        let cfg = reference_delta();
        let gs = GroundStation::bremen();
        let q = VisibilityQuery {
            min_elevation_deg: 10.0,
            horizon_s: 43_200.0,
            step_s: 10.0,
        };
        let sat = SatelliteId::new(2, 3);
        let pat = satellite_pattern(&cfg, sat, &gs, &q).unwrap();
        let vis = |t: f64| {
            let s = propagate(&cfg, sat, t).unwrap();
            let g = gs_position_at(&cfg, &gs, t);
            is_visible_gs(&s, &g, 10.0).unwrap()
        };
        assert!(!pat.is_empty());
        for iv in &pat.intervals {
            if iv.rise_s > 0.0 {
                assert!(!vis(iv.rise_s - 1e-2) && vis(iv.rise_s + 1e-2));
            }
            if iv.set_s < q.horizon_s {
                assert!(vis(iv.set_s - 1e-2) && !vis(iv.set_s + 1e-2));
            }
        }
    }

    #[test]
    fn step_contract_is_enforced() {
        let cfg = reference_delta();
        let q = VisibilityQuery {
            min_elevation_deg: 10.0,
            horizon_s: 1000.0,
            step_s: 31.0,
        };
        assert!(satellite_pattern(&cfg, SatelliteId::new(1, 1), &GroundStation::bremen(), &q).is_err());
    }

    #[test]
    fn pattern_queries() {
        let pat = VisibilityPattern::new(
            Subject::Cluster(1),
            1000.0,
            vec![
                VisibilityInterval { rise_s: 100.0, set_s: 200.0 },
                VisibilityInterval { rise_s: 400.0, set_s: 500.0 },
            ],
        )
        .unwrap();
        assert!(pat.is_visible(100.0) && pat.is_visible(200.0) && !pat.is_visible(200.1));
        assert_eq!(pat.next_rise(150.0).map(|iv| iv.rise_s), Some(400.0));
        assert_eq!(pat.first_visible_at_or_after(150.0), Some(150.0));
        assert_eq!(pat.first_visible_at_or_after(250.0), Some(400.0));
        assert_eq!(pat.first_visible_at_or_after(501.0), None);
        assert_eq!(pat.last_set_at_or_before(450.0), Some(200.0));
        assert_eq!(pat.last_set_at_or_before(50.0), None);
    }

    #[test]
    fn csv_export_format() {
        let pat = VisibilityPattern::new(
            Subject::Cluster(2),
            1000.0,
            vec![VisibilityInterval { rise_s: 1.0 / 3.0, set_s: 12.5 }],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_patterns_csv(&mut buf, &[&pat]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "subject,rise_s,set_s\ncluster_2,0.333,12.500\n");
    }

    #[test]
    fn satellite_id_text_form() {
        let id: SatelliteId = "3-7".parse().unwrap();
        assert_eq!(id, SatelliteId::new(3, 7));
        assert_eq!(id.to_string(), "3-7");
        assert!("37".parse::<SatelliteId>().is_err());
    }
}
