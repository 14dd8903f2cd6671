//! Drone-to-base-station uplink model and round timing.
//!
//! Elevation angles are in degrees throughout. Path losses are a
//! free-space term plus a fixed LoS/NLoS excess, mixed by the elevation
//! dependent LoS probability. Downlink time is not modelled.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Environment and radio constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    /// Environment constant `a` of the LoS logistic.
    pub a: f64,
    /// Environment constant `b` of the LoS logistic.
    pub b: f64,
    /// Excess loss for LoS links, dB.
    pub psi_los_db: f64,
    /// Excess loss for NLoS links, dB.
    pub psi_nlos_db: f64,
    /// Carrier frequency, Hz.
    pub carrier_hz: f64,
    /// Bandwidth, Hz.
    pub bandwidth_hz: f64,
    /// Noise power spectral density, dBm/Hz.
    pub noise_dbm_per_hz: f64,
    /// Speed of light, m/s.
    pub light_speed: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            a: 9.6,
            b: 0.28,
            psi_los_db: 1.0,
            psi_nlos_db: 20.0,
            carrier_hz: 2e9,
            bandwidth_hz: 2e6,
            noise_dbm_per_hz: -174.0,
            light_speed: 3e8,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("a", self.a),
            ("b", self.b),
            ("carrier_hz", self.carrier_hz),
            ("bandwidth_hz", self.bandwidth_hz),
            ("light_speed", self.light_speed),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("channel {name} must be > 0")));
            }
        }
        if !self.noise_dbm_per_hz.is_finite()
            || !self.psi_los_db.is_finite()
            || !self.psi_nlos_db.is_finite()
        {
            return Err(Error::InvalidConfig(
                "channel dB values must be finite".into(),
            ));
        }
        Ok(())
    }

    /// Noise density in W/Hz.
    pub fn noise_w_per_hz(&self) -> f64 {
        dbm_to_watts(self.noise_dbm_per_hz)
    }
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }
}

/// Slant distance (m) and elevation angle (degrees) from a ground station
/// to a drone. A drone straight overhead sits at 90°.
pub fn geometry(drone: Position, bs: Position) -> Result<(f64, f64)> {
    let height = drone.z - bs.z;
    if !(height > 0.0) {
        return Err(Error::OutOfRange(format!(
            "drone height {height} must be > 0"
        )));
    }
    let horiz = (drone.x - bs.x).hypot(drone.y - bs.y);
    let d = horiz.hypot(height);
    let phi = if horiz == 0.0 {
        90.0
    } else {
        (height / horiz).atan().to_degrees()
    };
    Ok((d, phi))
}

/// LoS probability `1 / (1 + a·exp(−b(φ − a)))` for φ in degrees.
pub fn p_los(phi_deg: f64, params: &ChannelParams) -> f64 {
    1.0 / (1.0 + params.a * (-params.b * (phi_deg - params.a)).exp())
}

/// Free-space path loss in dB.
pub fn free_space_loss_db(d: f64, params: &ChannelParams) -> f64 {
    20.0 * (4.0 * std::f64::consts::PI * params.carrier_hz * d / params.light_speed).log10()
}

pub fn path_loss(d: f64, params: &ChannelParams, line_of_sight: bool) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::OutOfRange(format!("distance {d} must be > 0")));
    }
    let psi = if line_of_sight {
        params.psi_los_db
    } else {
        params.psi_nlos_db
    };
    Ok(free_space_loss_db(d, params) + psi)
}

/// Per-drone uplink quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    pub elevation_deg: f64,
    pub distance_m: f64,
    pub p_los: f64,
    pub p_nlos: f64,
    pub pl_los_db: f64,
    pub pl_nlos_db: f64,
    pub pl_avg_db: f64,
    /// Linear channel gain `10^(−PL_avg/10)`.
    pub gain: f64,
    /// Shannon rate, bits/s.
    pub rate_bps: f64,
}

pub fn link_budget(
    drone: Position,
    bs: Position,
    params: &ChannelParams,
    tx_power_w: f64,
) -> Result<LinkBudget> {
    if !(tx_power_w > 0.0) {
        return Err(Error::OutOfRange(format!(
            "tx power {tx_power_w} must be > 0"
        )));
    }
    let (d, phi) = geometry(drone, bs)?;
    let pl = p_los(phi, params);
    let pn = 1.0 - pl;
    let pl_los = path_loss(d, params, true)?;
    let pl_nlos = path_loss(d, params, false)?;
    let pl_avg = pl * pl_los + pn * pl_nlos;
    let gain = 10f64.powf(-pl_avg / 10.0);
    let snr = tx_power_w * gain / (params.noise_w_per_hz() * params.bandwidth_hz);
    let rate = params.bandwidth_hz * snr.ln_1p() / std::f64::consts::LN_2;
    Ok(LinkBudget {
        elevation_deg: phi,
        distance_m: d,
        p_los: pl,
        p_nlos: pn,
        pl_los_db: pl_los,
        pl_nlos_db: pl_nlos,
        pl_avg_db: pl_avg,
        gain,
        rate_bps: rate,
    })
}

/// Upload time in seconds for `bytes` at `rate_bps`.
pub fn comm_time(bytes: usize, rate_bps: f64) -> Result<f64> {
    if !(rate_bps > 0.0) {
        return Err(Error::OutOfRange(format!("rate {rate_bps} must be > 0")));
    }
    Ok(8.0 * bytes as f64 / rate_bps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ComputeModel {
    /// `samples · episodes · flops_per_sample / flops_per_sec`. When
    /// `per_drone_flops_per_sec` is nonempty it overrides the shared rate,
    /// indexed by client id.
    Modeled {
        flops_per_sample: f64,
        drone_flops_per_sec: f64,
        #[serde(default)]
        per_drone_flops_per_sec: Vec<f64>,
    },
    /// Wall-clock time of the client's training calls.
    Measured,
}

impl Default for ComputeModel {
    fn default() -> Self {
        ComputeModel::Modeled {
            flops_per_sample: 0.0,
            drone_flops_per_sec: 1e9,
            per_drone_flops_per_sec: Vec::new(),
        }
    }
}

impl ComputeModel {
    pub fn validate(&self) -> Result<()> {
        if let ComputeModel::Modeled {
            flops_per_sample,
            drone_flops_per_sec,
            per_drone_flops_per_sec,
        } = self
        {
            if !(flops_per_sample.is_finite() && *flops_per_sample >= 0.0) {
                return Err(Error::InvalidConfig("flops_per_sample must be >= 0".into()));
            }
            if !(*drone_flops_per_sec > 0.0) || per_drone_flops_per_sec.iter().any(|r| !(*r > 0.0))
            {
                return Err(Error::InvalidConfig("drone FLOP rates must be > 0".into()));
            }
        }
        Ok(())
    }

    /// Local computation time of `client` processing `samples` per episode.
    /// `measured_secs` is used only in measured mode.
    pub fn compute_time(
        &self,
        client: usize,
        samples: usize,
        episodes: usize,
        measured_secs: f64,
    ) -> f64 {
        match self {
            ComputeModel::Modeled {
                flops_per_sample,
                drone_flops_per_sec,
                per_drone_flops_per_sec,
            } => {
                let rate = per_drone_flops_per_sec
                    .get(client)
                    .copied()
                    .unwrap_or(*drone_flops_per_sec);
                samples as f64 * episodes as f64 * flops_per_sample / rate
            }
            ComputeModel::Measured => measured_secs,
        }
    }
}

/// Round makespan `max_k (t_c + t_w)`.
pub fn round_time(per_client: &[(f64, f64)]) -> Result<f64> {
    per_client
        .iter()
        .map(|(c, w)| c + w)
        .reduce(f64::max)
        .ok_or_else(|| Error::EmptyInput("no client timings".into()))
}
