use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub num_layers: usize,
    pub experts_per_layer: usize,
    pub embedding_dim: usize,
}

/// One workload sample: its embedding and, per layer, the experts its tokens
/// were routed to with token counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub embedding: Vec<f64>,
    pub layers: Vec<Vec<(usize, u64)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTrace {
    pub meta: TraceMeta,
    pub samples: Vec<TraceSample>,
}

impl RoutingTrace {
    pub fn new(meta: TraceMeta, samples: Vec<TraceSample>) -> Result<Self> {
        let t = RoutingTrace { meta, samples };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.meta;
        if m.num_layers == 0 || m.experts_per_layer == 0 {
            return Err(Error::InvalidTrace(
                "num_layers and experts_per_layer must be >= 1".into(),
            ));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.embedding.len() != m.embedding_dim {
                return Err(Error::InvalidTrace(format!(
                    "sample {i}: embedding has {} dims, expected {}",
                    s.embedding.len(),
                    m.embedding_dim
                )));
            }
            if s.embedding.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidTrace(format!("sample {i}: non-finite embedding")));
            }
            if s.layers.len() != m.num_layers {
                return Err(Error::InvalidTrace(format!(
                    "sample {i}: {} layers, expected {}",
                    s.layers.len(),
                    m.num_layers
                )));
            }
            for (l, acts) in s.layers.iter().enumerate() {
                for &(e, c) in acts {
                    if e >= m.experts_per_layer {
                        return Err(Error::InvalidTrace(format!(
                            "sample {i} layer {l}: expert {e} >= {}",
                            m.experts_per_layer
                        )));
                    }
                    if c == 0 {
                        return Err(Error::InvalidTrace(format!(
                            "sample {i} layer {l}: zero token count for expert {e}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Record {
    Header { v: u32, meta: TraceMeta },
    Sample {
        v: u32,
        embedding: Vec<f64>,
        layers: Vec<Vec<(usize, u64)>>,
    },
}

/// Writes the trace as line-delimited JSON: a header line with the trace
/// dimensions, then one line per sample.
pub fn write_trace<W: Write>(trace: &RoutingTrace, mut out: W) -> std::io::Result<()> {
    let header = Record::Header {
        v: TRACE_VERSION,
        meta: trace.meta,
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for s in &trace.samples {
        let rec = Record::Sample {
            v: TRACE_VERSION,
            embedding: s.embedding.clone(),
            layers: s.layers.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a trace written by [`write_trace`]. Without a header line the
/// dimensions are inferred from the samples. Errors carry 1-based line
/// numbers.
pub fn read_trace<R: BufRead>(input: R) -> Result<RoutingTrace> {
    let mut meta: Option<TraceMeta> = None;
    let mut samples = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::InvalidTrace(format!("line {lineno}: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidTrace(format!("line {lineno}: {e}")))?;
        let v = match &rec {
            Record::Header { v, .. } | Record::Sample { v, .. } => *v,
        };
        if v != TRACE_VERSION {
            return Err(Error::InvalidTrace(format!(
                "line {lineno}: unsupported trace version {v}"
            )));
        }
        match rec {
            Record::Header { meta: m, .. } => {
                if meta.is_some() || !samples.is_empty() {
                    return Err(Error::InvalidTrace(format!(
                        "line {lineno}: header must be the first record"
                    )));
                }
                meta = Some(m);
            }
            Record::Sample {
                embedding, layers, ..
            } => samples.push(TraceSample { embedding, layers }),
        }
    }
    let meta = match meta {
        Some(m) => m,
        None => {
            let first = samples
                .first()
                .ok_or_else(|| Error::InvalidTrace("trace has no samples".into()))?;
            let max_expert = samples
                .iter()
                .flat_map(|s| s.layers.iter().flatten())
                .map(|&(e, _)| e)
                .max()
                .unwrap_or(0);
            TraceMeta {
                num_layers: first.layers.len(),
                experts_per_layer: max_expert + 1,
                embedding_dim: first.embedding.len(),
            }
        }
    };
    RoutingTrace::new(meta, samples)
}
