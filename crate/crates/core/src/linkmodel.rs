//! Free-space link budget, Shannon rate and one-hop delivery time for
//! inter-satellite and ground-station links.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::orbital::{max_gs_distance_m, max_slant_range_m, ConstellationConfig, OrbitalPlane, VisibilityPattern};

/// Boltzmann constant, J/K.
pub const BOLTZMANN: f64 = 1.380649e-23;
/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 2.99792458e8;
/// Bits per serialized model parameter (single precision).
pub const BITS_PER_PARAM: u64 = 32;

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    db_to_linear(dbm) / 1000.0
}

pub fn watts_to_dbm(w: f64) -> f64 {
    linear_to_db(w * 1000.0)
}

/// Payload size of a model with `params` parameters.
pub fn model_bits(params: u64) -> u64 {
    params * BITS_PER_PARAM
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    pub tx_power_w: f64,
    /// Applied at both ends of the link.
    pub antenna_gain_linear: f64,
    pub bandwidth_hz: f64,
    pub carrier_hz: f64,
    pub system_temp_k: f64,
}

impl LinkBudget {
    pub fn from_db(
        tx_power_dbm: f64,
        antenna_gain_dbi: f64,
        bandwidth_hz: f64,
        carrier_hz: f64,
        system_temp_k: f64,
    ) -> Result<Self> {
        let budget = LinkBudget {
            tx_power_w: dbm_to_watts(tx_power_dbm),
            antenna_gain_linear: db_to_linear(antenna_gain_dbi),
            bandwidth_hz,
            carrier_hz,
            system_temp_k,
        };
        budget.validate()?;
        Ok(budget)
    }

    /// 40 dBm, 32.13 dBi, 500 MHz at 20 GHz, 354 K.
    pub fn ka_band() -> Self {
        LinkBudget {
            tx_power_w: dbm_to_watts(40.0),
            antenna_gain_linear: db_to_linear(32.13),
            bandwidth_hz: 500e6,
            carrier_hz: 20e9,
            system_temp_k: 354.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("tx_power", self.tx_power_w),
            ("antenna_gain", self.antenna_gain_linear),
            ("bandwidth_hz", self.bandwidth_hz),
            ("carrier_hz", self.carrier_hz),
            ("system_temp_k", self.system_temp_k),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("link {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Received SNR at distance `d` metres.
    pub fn snr(&self, d: f64) -> f64 {
        let g2 = self.antenna_gain_linear * self.antenna_gain_linear;
        self.tx_power_w * g2 * SPEED_OF_LIGHT * SPEED_OF_LIGHT
            / (16.0 * PI * PI * d * d * self.carrier_hz * self.carrier_hz * noise_power(self.bandwidth_hz, self.system_temp_k))
    }
}

/// Thermal noise power k_B·B·T in watts.
pub fn noise_power(bandwidth_hz: f64, temp_k: f64) -> f64 {
    BOLTZMANN * bandwidth_hz * temp_k
}

/// Shannon rate of the free-space link at distance `d` metres, bit/s.
pub fn data_rate(budget: &LinkBudget, d: f64) -> Result<f64> {
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::Domain(format!("link distance must be positive, got {d}")));
    }
    Ok(budget.bandwidth_hz * budget.snr(d).ln_1p() / std::f64::consts::LN_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HopTiming {
    pub rate_bps: f64,
    /// Transmission plus propagation.
    pub transfer_s: f64,
    pub propagation_s: f64,
}

impl HopTiming {
    pub const ZERO: HopTiming = HopTiming {
        rate_bps: f64::INFINITY,
        transfer_s: 0.0,
        propagation_s: 0.0,
    };
}

/// Time to deliver `bits` over a link of length `d`.
pub fn transfer_time(bits: f64, budget: &LinkBudget, d: f64) -> Result<HopTiming> {
    if !(bits >= 0.0 && bits.is_finite()) {
        return Err(Error::Domain(format!("payload must be non-negative, got {bits}")));
    }
    let rate_bps = data_rate(budget, d)?;
    let propagation_s = d / SPEED_OF_LIGHT;
    Ok(HopTiming {
        rate_bps,
        transfer_s: bits / rate_bps + propagation_s,
        propagation_s,
    })
}

/// Chord between ring neighbours of an equidistant plane.
pub fn isl_hop_distance_m(plane: &OrbitalPlane) -> f64 {
    2.0 * plane.radius_m() * (PI / plane.sats as f64).sin()
}

/// Per-hop delivery time on the intra-orbit ring of `plane`.
///
/// A single-satellite plane has no hops. Rings whose neighbour chord exceeds
/// the slant range are blocked by the Earth.
pub fn ring_hop_timing(plane: &OrbitalPlane, budget: &LinkBudget, bits: f64) -> Result<HopTiming> {
    if plane.sats == 1 {
        return Ok(HopTiming::ZERO);
    }
    let chord = isl_hop_distance_m(plane);
    let slant = max_slant_range_m(plane.altitude_m, plane.altitude_m);
    if chord >= slant {
        return Err(Error::Infeasible(format!(
            "ring neighbours {:.0} m apart exceed the {:.0} m slant range ({} satellites at {:.0} m)",
            chord, slant, plane.sats, plane.altitude_m
        )));
    }
    transfer_time(bits, budget, chord)
}

/// Ground-link durations of one cluster, computed at the worst-case distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GsLinkTiming {
    pub distance_m: f64,
    pub gs_to_cluster: HopTiming,
    pub cluster_to_gs: HopTiming,
}

/// Both ground-link directions evaluated at the longest distance a satellite
/// of orbit `p` can have while clearing the elevation mask.
pub fn worst_case_gs_timing(
    config: &ConstellationConfig,
    p: usize,
    cluster_pattern: &VisibilityPattern,
    min_elevation_deg: f64,
    budget: &LinkBudget,
    bits: f64,
) -> Result<GsLinkTiming> {
    let plane = config.plane(p)?;
    if cluster_pattern.is_empty() {
        return Err(Error::Infeasible(format!(
            "cluster {p} is never visible within {:.0} s",
            cluster_pattern.horizon_s
        )));
    }
    let distance_m = max_gs_distance_m(plane.altitude_m, min_elevation_deg);
    let down = transfer_time(bits, budget, distance_m)?;
    // Same budget in both directions.
    Ok(GsLinkTiming {
        distance_m,
        gs_to_cluster: down,
        cluster_to_gs: down,
    })
}
