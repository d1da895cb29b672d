//! Model and batch descriptions, and the per-operation data sizes and FLOP
//! counts of one decoder layer.
//!
//! A layer is four operation units: QKV projection, attention, output
//! projection, and the routed expert FFNs. For each we report the bytes of
//! the two matrix operands (`d_x`, `d_y`) and the FLOPs, per micro-batch of
//! `m` sequences (per coalesced batch `B` for the expert stage).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub expert_dim: usize,
    pub experts_per_layer: usize,
    pub top_k: usize,
    pub dtype_bytes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("expert_dim", self.expert_dim),
            ("experts_per_layer", self.experts_per_layer),
            ("top_k", self.top_k),
        ] {
            if v == 0 {
                return Err(Error::config(format!("model.{key}"), "must be >= 1"));
            }
        }
        if self.top_k > self.experts_per_layer {
            return Err(Error::config(
                "model.top_k",
                format!(
                    "top_k ({}) exceeds experts_per_layer ({})",
                    self.top_k, self.experts_per_layer
                ),
            ));
        }
        if ![1, 2, 4].contains(&self.dtype_bytes) {
            return Err(Error::config(
                "model.dtype_bytes",
                format!("must be 1, 2 or 4, got {}", self.dtype_bytes),
            ));
        }
        Ok(())
    }

    /// Distinct experts a layer activates for `tokens` routed tokens under
    /// top-k routing with no knowledge of the router.
    pub fn activated_experts(&self, tokens: usize) -> usize {
        tokens.saturating_mul(self.top_k).min(self.experts_per_layer)
    }

    fn dt(&self) -> f64 {
        self.dtype_bytes as f64
    }

    fn dh(&self) -> f64 {
        self.hidden_dim as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub input_len: usize,
    pub output_len: usize,
}

impl BatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch.batch_size", "must be >= 1"));
        }
        if self.input_len == 0 {
            return Err(Error::config("batch.input_len", "must be >= 1"));
        }
        Ok(())
    }

    /// Number of micro-batches for micro-batch size `m`.
    pub fn num_micro_batches(&self, m: usize) -> usize {
        self.batch_size.div_ceil(m.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseKind {
    Prefill,
    Decode,
}

impl std::fmt::Display for PhaseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PhaseKind::Prefill => "prefill",
            PhaseKind::Decode => "decode",
        })
    }
}

/// One forward pass: the whole prompt, or one generated token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub kind: PhaseKind,
    /// Tokens per sequence processed in this pass (1 when decoding).
    pub seq_len: usize,
    /// Cached tokens the pass attends over (0 for prefill).
    pub kv_len: usize,
}

impl Phase {
    pub fn prefill(input_len: usize) -> Phase {
        Phase {
            kind: PhaseKind::Prefill,
            seq_len: input_len,
            kv_len: 0,
        }
    }

    pub fn decode(kv_len: usize) -> Phase {
        Phase {
            kind: PhaseKind::Decode,
            seq_len: 1,
            kv_len,
        }
    }

    /// Decode step `t` (1-based) of `batch`: attends over `input_len + t - 1`
    /// cached positions.
    pub fn decode_step(batch: &BatchConfig, t: usize) -> Phase {
        assert!(t >= 1, "decode steps are 1-based");
        Phase::decode(batch.input_len + t - 1)
    }

    /// Key positions each query attends over.
    pub fn attended_len(&self) -> usize {
        match self.kind {
            PhaseKind::Prefill => self.seq_len,
            PhaseKind::Decode => self.kv_len,
        }
    }
}

/// The four operation units of a decoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Qkv = 0,
    Attention = 1,
    OutProj = 2,
    Experts = 3,
}

impl Op {
    pub const ALL: [Op; 4] = [Op::Qkv, Op::Attention, Op::OutProj, Op::Experts];
    /// The operations placed as a whole on one device.
    pub const NON_EXPERT: [Op; 3] = [Op::Qkv, Op::Attention, Op::OutProj];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Op::Qkv => "qkv",
            Op::Attention => "attention",
            Op::OutProj => "out_proj",
            Op::Experts => "experts",
        }
    }
}

impl TryFrom<usize> for Op {
    type Error = Error;

    fn try_from(i: usize) -> Result<Op> {
        Op::ALL.get(i).copied().ok_or(Error::OpIndexOutOfRange(i))
    }
}

/// Operand bytes and FLOPs of one operation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OpCost {
    pub d_x: f64,
    pub d_y: f64,
    pub flops: f64,
}

impl OpCost {
    pub fn bytes(&self) -> f64 {
        self.d_x + self.d_y
    }
}

/// Operand sizes and FLOPs of `op` for a micro-batch of `m` sequences.
///
/// For [`Op::Experts`] pass the full batch as `m` and the number of
/// activated experts as `activated`; the result is per activated expert
/// under a uniform token split.
pub fn op_cost(op: Op, phase: &Phase, model: &ModelConfig, m: usize, activated: usize) -> Result<OpCost> {
    if m == 0 {
        return Err(Error::InvalidStrategy("micro-batch size must be >= 1".into()));
    }
    let dt = model.dt();
    let dh = model.dh();
    let mf = m as f64;
    let l = phase.seq_len as f64;
    Ok(match op {
        Op::Qkv => OpCost {
            d_x: dt * mf * l * dh,
            d_y: 3.0 * dt * dh * dh,
            flops: 6.0 * mf * l * dh * dh,
        },
        Op::Attention => match phase.kind {
            PhaseKind::Prefill => OpCost {
                d_x: dt * mf * l * dh,
                d_y: 2.0 * dt * mf * l * dh,
                flops: 4.0 * mf * l * l * dh,
            },
            PhaseKind::Decode => {
                let lkv = phase.kv_len as f64;
                OpCost {
                    d_x: dt * mf * dh,
                    d_y: 2.0 * dt * mf * lkv * dh,
                    flops: 4.0 * mf * lkv * dh,
                }
            }
        },
        Op::OutProj => OpCost {
            d_x: dt * mf * l * dh,
            d_y: dt * dh * dh,
            flops: 2.0 * mf * l * dh * dh,
        },
        Op::Experts => {
            if activated == 0 {
                return Err(Error::NoActivatedExperts);
            }
            let e = activated as f64;
            let de = model.expert_dim as f64;
            OpCost {
                d_x: dt * mf * l * dh / e,
                d_y: 3.0 * dt * dh * de,
                flops: 6.0 * mf * l * dh * de / e,
            }
        }
    })
}

/// Expert-stage cost of one expert receiving `share` of the `batch` sequences'
/// tokens. With `share = 1/E` this is the uniform per-expert row.
pub fn expert_share_cost(phase: &Phase, model: &ModelConfig, batch: usize, share: f64) -> OpCost {
    let tokens = batch as f64 * phase.seq_len as f64;
    let dt = model.dt();
    let dh = model.dh();
    let de = model.expert_dim as f64;
    OpCost {
        d_x: dt * tokens * dh * share,
        d_y: 3.0 * dt * dh * de,
        flops: 6.0 * tokens * dh * de * share,
    }
}

/// Bytes of K and V produced by the QKV projection for one micro-batch.
pub fn kv_store_bytes(model: &ModelConfig, m: usize, seq_len: usize) -> Result<f64> {
    if m == 0 || seq_len == 0 {
        return Err(Error::InvalidStrategy(
            "KV size needs m >= 1 and seq_len >= 1".into(),
        ));
    }
    Ok(2.0 * model.dt() * m as f64 * seq_len as f64 * model.dh())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightBytes {
    /// QKV and output projection weights of one layer.
    pub non_expert_per_layer: f64,
    /// Gate, up and down matrices of one expert.
    pub per_expert: f64,
}

pub fn weight_bytes(model: &ModelConfig) -> WeightBytes {
    let dt = model.dt();
    let dh = model.dh();
    WeightBytes {
        non_expert_per_layer: 4.0 * dt * dh * dh,
        per_expert: 3.0 * dt * dh * model.expert_dim as f64,
    }
}

/// Weight bytes of a single non-expert op (zero for attention).
pub fn op_weight_bytes(op: Op, model: &ModelConfig) -> f64 {
    let dt = model.dt();
    let dh = model.dh();
    match op {
        Op::Qkv => 3.0 * dt * dh * dh,
        Op::OutProj => dt * dh * dh,
        Op::Attention | Op::Experts => 0.0,
    }
}

/// Peak activation footprint of running the non-expert ops marked in
/// `on_gpu` at micro-batch `m`.
///
/// Takes the largest per-op live set (activation operands plus output;
/// weights are accounted separately) and adds the attention score matrix
/// when attention runs on the GPU.
pub fn intermediate_bytes(model: &ModelConfig, phase: &Phase, m: usize, on_gpu: [bool; 3]) -> f64 {
    let dt = model.dt();
    let dh = model.dh();
    let tokens = m as f64 * phase.seq_len as f64;
    let row = dt * tokens * dh;
    let kv_positions = match phase.kind {
        PhaseKind::Prefill => phase.seq_len,
        PhaseKind::Decode => phase.kv_len,
    } as f64;
    let per_op = [
        // input + Q, K, V
        row + 3.0 * row,
        // Q + K, V operand + context output
        row + 2.0 * dt * m as f64 * kv_positions * dh + row,
        // input + projected output
        row + row,
    ];
    let peak = per_op
        .iter()
        .zip(on_gpu)
        .filter(|(_, g)| *g)
        .map(|(b, _)| *b)
        .fold(0.0, f64::max);
    let scores = if on_gpu[1] {
        dt * tokens * phase.attended_len() as f64
    } else {
        0.0
    };
    peak + scores
}
