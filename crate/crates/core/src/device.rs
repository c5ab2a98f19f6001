//! Device tiers and the simulated cost model.

use crate::imaging::QualityTier;
use crate::nn::Network;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Nominal battery voltage used to convert mAh into energy.
pub const BATTERY_VOLTS: f64 = 3.7;

#[derive(Debug, Error, PartialEq)]
pub enum DeviceError {
    #[error("battery capacity must be positive, got {0} mAh")]
    ZeroBattery(f64),
    #[error("negative input {name} = {value}")]
    Negative { name: &'static str, value: f64 },
    #[error("bandwidth must be positive, got {0} Mbps")]
    ZeroBandwidth(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub tier: QualityTier,
    pub ram_mb: u32,
    pub cpu_cores: u32,
    pub bandwidth_mbps: f64,
    pub battery_mah: f64,
    pub max_model_mb: f64,
    pub max_batch: usize,
    pub max_epochs: usize,
    pub power_mw: f64,
    /// Simulated seconds per training batch.
    pub batch_cost_s: f64,
}

impl DeviceProfile {
    pub fn default_for(tier: QualityTier) -> Self {
        match tier {
            QualityTier::Low => Self {
                tier,
                ram_mb: 512,
                cpu_cores: 2,
                bandwidth_mbps: 1.0,
                battery_mah: 2000.0,
                max_model_mb: 5.0,
                max_batch: 8,
                max_epochs: 2,
                power_mw: 800.0,
                batch_cost_s: 0.29283,
            },
            QualityTier::Medium => Self {
                tier,
                ram_mb: 2048,
                cpu_cores: 4,
                bandwidth_mbps: 10.0,
                battery_mah: 3000.0,
                max_model_mb: 20.0,
                max_batch: 16,
                max_epochs: 3,
                power_mw: 1500.0,
                batch_cost_s: 0.46722,
            },
            QualityTier::High => Self {
                tier,
                ram_mb: 6144,
                cpu_cores: 8,
                bandwidth_mbps: 50.0,
                battery_mah: 4000.0,
                max_model_mb: 50.0,
                max_batch: 32,
                max_epochs: 5,
                power_mw: 2500.0,
                batch_cost_s: 0.672,
            },
        }
    }
}

/// The three default profiles, indexed by [`QualityTier::index`].
pub fn default_profiles() -> [DeviceProfile; 3] {
    QualityTier::ALL.map(DeviceProfile::default_for)
}

/// Battery drain in percent of capacity: `P·T / (mAh·3.7) · 100`, with `P` in
/// mW and `T` in hours.
pub fn battery_impact(power_mw: f64, train_time_h: f64, battery_mah: f64) -> Result<f64, DeviceError> {
    if battery_mah <= 0.0 {
        return Err(DeviceError::ZeroBattery(battery_mah));
    }
    if power_mw < 0.0 {
        return Err(DeviceError::Negative { name: "power_mw", value: power_mw });
    }
    if train_time_h < 0.0 {
        return Err(DeviceError::Negative { name: "train_time_h", value: train_time_h });
    }
    Ok(power_mw * train_time_h / (battery_mah * BATTERY_VOLTS) * 100.0)
}

/// Simulated training time: `epochs · n_batches · batch_cost_s`.
pub fn simulate_train_time(profile: &DeviceProfile, n_batches: usize, epochs: usize) -> f64 {
    (epochs * n_batches) as f64 * profile.batch_cost_s
}

/// Seconds to move `bytes` over a `bandwidth_mbps` link (decimal megabits).
pub fn transfer_time(bytes: u64, bandwidth_mbps: f64) -> Result<f64, DeviceError> {
    if bandwidth_mbps <= 0.0 {
        return Err(DeviceError::ZeroBandwidth(bandwidth_mbps));
    }
    Ok(8.0 * bytes as f64 / (bandwidth_mbps * 1e6))
}

/// Parameter bytes plus the largest activation at `batch` items, in MiB.
pub fn peak_memory_mb(net: &Network, batch: usize) -> f64 {
    let values = net.param_count() + net.buffer_count() + net.peak_activation_len() * batch;
    (values * std::mem::size_of::<f32>()) as f64 / (1u64 << 20) as f64
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub train_time_s: f64,
    pub battery_pct: f64,
    pub peak_memory_mb: f64,
    pub bytes_up: u64,
}
