use serde::{Deserialize, Serialize};

use super::{MemoryLocation, ScheduleError, TileShape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierSpec {
    pub name: String,
    pub capacity_bytes: u64,
    /// Bytes moved per unit time.
    pub bandwidth: f64,
}

/// Hardware description: base tile, per-tier capacities and the analytic cost
/// parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceConfig {
    pub basetile: TileShape,
    /// REGISTER, SHARED, GLOBAL in that order.
    pub tiers: Vec<TierSpec>,
    /// Floating-point operations per unit time.
    pub throughput_flops: f64,
    pub max_stages: u32,
    #[serde(default = "default_element_bytes")]
    pub element_bytes: u32,
}

fn default_element_bytes() -> u32 {
    2
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(dead_code)]
struct RawTile {
    m: usize,
    n: usize,
}

impl DeviceConfig {
    /// A single-SM-like device with 64x64 base tiles.
    pub fn default_device() -> DeviceConfig {
        DeviceConfig {
            basetile: TileShape { m: 64, n: 64 },
            tiers: vec![
                TierSpec { name: "REGISTER".into(), capacity_bytes: 128 * 1024, bandwidth: 128.0 },
                TierSpec { name: "SHARED".into(), capacity_bytes: 224 * 1024, bandwidth: 32.0 },
                TierSpec { name: "GLOBAL".into(), capacity_bytes: 80 << 30, bandwidth: 4.0 },
            ],
            throughput_flops: 256.0,
            max_stages: 4,
            element_bytes: 2,
        }
    }

    pub fn capacity(&self, tier: MemoryLocation) -> u64 {
        self.tiers[tier.index()].capacity_bytes
    }

    pub fn bandwidth(&self, tier: MemoryLocation) -> f64 {
        self.tiers[tier.index()].bandwidth
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        let bad = |m: String| Err(ScheduleError::InvalidDevice(m));
        if self.basetile.m == 0 || self.basetile.n == 0 {
            return bad(format!("basetile {} must have positive extents", self.basetile));
        }
        if self.tiers.len() != 3 {
            return bad(format!("expected 3 tiers (REGISTER, SHARED, GLOBAL), found {}", self.tiers.len()));
        }
        for (i, (t, want)) in self.tiers.iter().zip(MemoryLocation::ALL).enumerate() {
            if !t.name.eq_ignore_ascii_case(want.name()) {
                return bad(format!("tiers[{i}].name is `{}`, expected `{}`", t.name, want.name()));
            }
            if !(t.bandwidth.is_finite() && t.bandwidth > 0.0) {
                return bad(format!("tiers[{i}].bandwidth must be a positive number, got {}", t.bandwidth));
            }
        }
        for w in self.tiers.windows(2) {
            if w[0].capacity_bytes > w[1].capacity_bytes {
                return bad(format!(
                    "capacity of {} ({}) exceeds capacity of {} ({})",
                    w[0].name, w[0].capacity_bytes, w[1].name, w[1].capacity_bytes
                ));
            }
        }
        if !(self.throughput_flops.is_finite() && self.throughput_flops > 0.0) {
            return bad(format!("throughput_flops must be a positive number, got {}", self.throughput_flops));
        }
        if self.max_stages == 0 {
            return bad("max_stages must be at least 1".into());
        }
        if self.element_bytes == 0 {
            return bad("element_bytes must be positive".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<DeviceConfig, ScheduleError> {
        // Reject a malformed basetile with its own message before the struct parse.
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ScheduleError::InvalidDevice(e.to_string()))?;
        if let Some(b) = value.get("basetile") {
            serde_json::from_value::<RawTile>(b.clone())
                .map_err(|e| ScheduleError::InvalidDevice(format!("basetile: {e}")))?;
        }
        let dev: DeviceConfig =
            serde_json::from_value(value).map_err(|e| ScheduleError::InvalidDevice(e.to_string()))?;
        dev.validate()?;
        Ok(dev)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("device serializes")
    }
}
