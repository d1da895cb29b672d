//! Devices, the host link, and the roofline/transfer primitives.
//!
//! Every latency in the crate bottoms out in one of two formulas: a roofline
//! bound `max(bytes / bandwidth, flops / peak)` for work executed on a device,
//! or `bytes / bandwidth` for data crossing the host link. Quantities are
//! `f64` throughout since byte and FLOP counts reach 1e14 and beyond.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which side of the host link a piece of work runs on.
///
/// Ordered `Cpu < Gpu` so that placements enumerate lexicographically with
/// the CPU first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    Cpu,
    Gpu,
}

impl Device {
    pub const ALL: [Device; 2] = [Device::Cpu, Device::Gpu];

    pub fn other(self) -> Device {
        match self {
            Device::Cpu => Device::Gpu,
            Device::Gpu => Device::Cpu,
        }
    }

    pub fn letter(self) -> char {
        match self {
            Device::Cpu => 'c',
            Device::Gpu => 'g',
        }
    }
}

impl std::fmt::Display for Device {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Device::Cpu => "cpu",
            Device::Gpu => "gpu",
        })
    }
}

impl std::str::FromStr for Device {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cpu" | "c" | "0" => Ok(Device::Cpu),
            "gpu" | "g" | "1" => Ok(Device::Gpu),
            other => Err(format!("unknown device `{other}` (expected cpu or gpu)")),
        }
    }
}

/// A compute device under the flat roofline model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub name: String,
    /// Bytes per second.
    pub mem_bandwidth: f64,
    /// FLOP per second.
    pub peak_compute: f64,
    /// VRAM for the GPU, host DRAM for the CPU.
    pub mem_capacity: f64,
}

fn positive_finite(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::config(key, format!("must be finite and > 0, got {v}")))
    }
}

impl DeviceSpec {
    pub fn new(
        name: impl Into<String>,
        mem_bandwidth: f64,
        peak_compute: f64,
        mem_capacity: f64,
    ) -> Result<Self> {
        let spec = DeviceSpec {
            name: name.into(),
            mem_bandwidth,
            peak_compute,
            mem_capacity,
        };
        spec.validate("device")?;
        Ok(spec)
    }

    /// Checks the invariants, reporting keys under `prefix` (e.g. `gpu`).
    pub fn validate(&self, prefix: &str) -> Result<()> {
        positive_finite(&format!("{prefix}.bw_bytes_per_s"), self.mem_bandwidth)?;
        positive_finite(&format!("{prefix}.tflops"), self.peak_compute)?;
        // A zero-capacity GPU is a legitimate planning input (nothing fits).
        if !(self.mem_capacity.is_finite() && self.mem_capacity >= 0.0) {
            let key = match prefix {
                "gpu" => "vram_bytes",
                "cpu" => "dram_bytes",
                _ => "capacity",
            };
            return Err(Error::config(
                format!("{prefix}.{key}"),
                format!("must be finite and >= 0, got {}", self.mem_capacity),
            ));
        }
        Ok(())
    }

    /// Operational intensity (FLOP/byte) at which both roofline terms meet.
    pub fn ridge_point(&self) -> f64 {
        self.peak_compute / self.mem_bandwidth
    }
}

/// The host link between CPU and GPU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    /// Nominal bytes per second in each direction.
    pub bandwidth: f64,
    /// Whether host-to-device and device-to-host transfers run concurrently.
    pub duplex: bool,
    /// Achievable fraction of nominal bandwidth, in (0, 1].
    pub efficiency: f64,
}

impl LinkSpec {
    pub fn new(bandwidth: f64, duplex: bool) -> Result<Self> {
        let link = LinkSpec {
            bandwidth,
            duplex,
            efficiency: 1.0,
        };
        link.validate()?;
        Ok(link)
    }

    pub fn with_efficiency(mut self, efficiency: f64) -> Result<Self> {
        self.efficiency = efficiency;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        positive_finite("link.bw_bytes_per_s", self.bandwidth)?;
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(Error::config(
                "link.efficiency",
                format!("must be in (0, 1], got {}", self.efficiency),
            ));
        }
        Ok(())
    }

    pub fn effective_bandwidth(&self) -> f64 {
        self.bandwidth * self.efficiency
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub gpu: DeviceSpec,
    pub cpu: DeviceSpec,
    pub link: LinkSpec,
}

impl SystemSpec {
    pub fn new(gpu: DeviceSpec, cpu: DeviceSpec, link: LinkSpec) -> Result<Self> {
        let sys = SystemSpec { gpu, cpu, link };
        sys.validate()?;
        Ok(sys)
    }

    pub fn validate(&self) -> Result<()> {
        self.gpu.validate("gpu")?;
        self.cpu.validate("cpu")?;
        self.link.validate()?;
        if self.gpu.name == self.cpu.name {
            return Err(Error::config(
                "gpu.name",
                format!("gpu and cpu must have different names (both `{}`)", self.gpu.name),
            ));
        }
        Ok(())
    }

    pub fn device(&self, device: Device) -> &DeviceSpec {
        match device {
            Device::Cpu => &self.cpu,
            Device::Gpu => &self.gpu,
        }
    }

    pub fn vram_capacity(&self) -> f64 {
        self.gpu.mem_capacity
    }
}

/// Which roofline term limits a piece of work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bound {
    MemoryBound,
    ComputeBound,
    Balanced,
}

/// `max(bytes / BW, flops / TF)` on `dev`.
pub fn roofline_time(bytes: f64, flops: f64, dev: &DeviceSpec) -> f64 {
    debug_assert!(bytes >= 0.0 && flops >= 0.0);
    let mem = bytes / dev.mem_bandwidth;
    let comp = flops / dev.peak_compute;
    mem.max(comp)
}

/// Time to move `bytes` across the link at its effective bandwidth.
pub fn transfer_time(bytes: f64, link: &LinkSpec) -> f64 {
    debug_assert!(bytes >= 0.0);
    bytes / link.effective_bandwidth()
}

pub fn classify_bound(bytes: f64, flops: f64, dev: &DeviceSpec) -> Result<Bound> {
    if bytes == 0.0 && flops == 0.0 {
        return Err(Error::UndefinedBound);
    }
    let mem = bytes / dev.mem_bandwidth;
    let comp = flops / dev.peak_compute;
    Ok(match mem.partial_cmp(&comp) {
        Some(std::cmp::Ordering::Greater) => Bound::MemoryBound,
        Some(std::cmp::Ordering::Less) => Bound::ComputeBound,
        _ => Bound::Balanced,
    })
}
