//! TOML configuration files and `key=value` overrides.
//!
//! Three file kinds exist. A system file has `[gpu]`, `[cpu]` and `[link]`
//! tables; model and batch files are flat tables of the config fields.
//! Overrides address a file by kind, e.g. `system.gpu.vram_bytes=24e9` or
//! `model.top_k=4`, and are applied to the parsed tree before
//! deserialization so they are validated exactly like file contents.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hwmodel::{DeviceSpec, LinkSpec, SystemSpec};
use crate::workload::{BatchConfig, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfigKind {
    System,
    Model,
    Batch,
}

impl ConfigKind {
    pub fn name(self) -> &'static str {
        match self {
            ConfigKind::System => "system",
            ConfigKind::Model => "model",
            ConfigKind::Batch => "batch",
        }
    }
}

/// One `--set` assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub kind: ConfigKind,
    pub path: Vec<String>,
    pub value: toml::Value,
}

impl std::str::FromStr for Override {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| Error::config(s, "expected key=value"))?;
        let mut parts = key.trim().split('.');
        let kind = match parts.next() {
            Some("system") => ConfigKind::System,
            Some("model") => ConfigKind::Model,
            Some("batch") => ConfigKind::Batch,
            _ => {
                return Err(Error::config(
                    key,
                    "override keys start with system., model. or batch.",
                ))
            }
        };
        let path: Vec<String> = parts.map(str::to_owned).collect();
        if path.is_empty() || path.iter().any(String::is_empty) {
            return Err(Error::config(key, "missing field name"));
        }
        let raw = raw.trim();
        // Anything that is not a TOML literal is taken as a bare string.
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
        Ok(Override { kind, path, value })
    }
}

fn apply(table: &mut toml::Table, ov: &Override) -> Result<()> {
    let key = format!("{}.{}", ov.kind.name(), ov.path.join("."));
    let (last, parents) = ov.path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(&key, format!("`{p}` is not a table")))?;
    }
    cur.insert(last.clone(), ov.value.clone());
    Ok(())
}

fn load<T: DeserializeOwned>(text: &str, kind: ConfigKind, overrides: &[Override]) -> Result<T> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| {
        let key = match e.span() {
            Some(span) => format!("{} (line {})", kind.name(), line_of(text, span.start)),
            None => kind.name().to_owned(),
        };
        Error::config(key, e.message().to_owned())
    })?;
    for ov in overrides.iter().filter(|o| o.kind == kind) {
        apply(&mut table, ov)?;
    }
    serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        let key = if path == "." {
            kind.name().to_owned()
        } else {
            format!("{}.{path}", kind.name())
        };
        Error::config(key, e.into_inner().to_string())
    })
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GpuSection {
    name: String,
    bw_bytes_per_s: f64,
    tflops: f64,
    vram_bytes: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CpuSection {
    name: String,
    bw_bytes_per_s: f64,
    tflops: f64,
    dram_bytes: f64,
}

fn yes() -> bool {
    true
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkSection {
    bw_bytes_per_s: f64,
    #[serde(default = "yes")]
    duplex: bool,
    #[serde(default = "one")]
    efficiency: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemFile {
    gpu: GpuSection,
    cpu: CpuSection,
    link: LinkSection,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    num_layers: usize,
    hidden_dim: usize,
    expert_dim: usize,
    experts_per_layer: usize,
    top_k: usize,
    #[serde(default = "bf16")]
    dtype_bytes: usize,
}

fn bf16() -> usize {
    2
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BatchFile {
    batch_size: usize,
    input_len: usize,
    output_len: usize,
}

fn prefixed(e: Error, prefix: &str) -> Error {
    match e {
        Error::InvalidConfig { key, reason } => Error::InvalidConfig {
            key: format!("{prefix}.{key}"),
            reason,
        },
        other => other,
    }
}

pub fn parse_system(text: &str, overrides: &[Override]) -> Result<SystemSpec> {
    let f: SystemFile = load(text, ConfigKind::System, overrides)?;
    let gpu = DeviceSpec {
        name: f.gpu.name,
        mem_bandwidth: f.gpu.bw_bytes_per_s,
        peak_compute: f.gpu.tflops * 1e12,
        mem_capacity: f.gpu.vram_bytes,
    };
    gpu.validate("gpu").map_err(|e| prefixed(e, "system"))?;
    let cpu = DeviceSpec {
        name: f.cpu.name,
        mem_bandwidth: f.cpu.bw_bytes_per_s,
        peak_compute: f.cpu.tflops * 1e12,
        mem_capacity: f.cpu.dram_bytes,
    };
    cpu.validate("cpu").map_err(|e| prefixed(e, "system"))?;
    let link = LinkSpec {
        bandwidth: f.link.bw_bytes_per_s,
        duplex: f.link.duplex,
        efficiency: f.link.efficiency,
    };
    SystemSpec::new(gpu, cpu, link).map_err(|e| prefixed(e, "system"))
}

/// The system file equivalent of `spec`, for round trips and reports.
pub fn system_to_toml(spec: &SystemSpec) -> String {
    let f = SystemFile {
        gpu: GpuSection {
            name: spec.gpu.name.clone(),
            bw_bytes_per_s: spec.gpu.mem_bandwidth,
            tflops: spec.gpu.peak_compute / 1e12,
            vram_bytes: spec.gpu.mem_capacity,
        },
        cpu: CpuSection {
            name: spec.cpu.name.clone(),
            bw_bytes_per_s: spec.cpu.mem_bandwidth,
            tflops: spec.cpu.peak_compute / 1e12,
            dram_bytes: spec.cpu.mem_capacity,
        },
        link: LinkSection {
            bw_bytes_per_s: spec.link.bandwidth,
            duplex: spec.link.duplex,
            efficiency: spec.link.efficiency,
        },
    };
    toml::to_string(&f).expect("plain tables serialize")
}

pub fn parse_model(text: &str, overrides: &[Override]) -> Result<ModelConfig> {
    let f: ModelFile = load(text, ConfigKind::Model, overrides)?;
    let m = ModelConfig {
        num_layers: f.num_layers,
        hidden_dim: f.hidden_dim,
        expert_dim: f.expert_dim,
        experts_per_layer: f.experts_per_layer,
        top_k: f.top_k,
        dtype_bytes: f.dtype_bytes,
    };
    m.validate()?;
    Ok(m)
}

pub fn parse_batch(text: &str, overrides: &[Override]) -> Result<BatchConfig> {
    let f: BatchFile = load(text, ConfigKind::Batch, overrides)?;
    let b = BatchConfig {
        batch_size: f.batch_size,
        input_len: f.input_len,
        output_len: f.output_len,
    };
    b.validate()?;
    Ok(b)
}
