//! Analytical per-layer and end-to-end latency of an allocation strategy.
//!
//! A decoder layer is evaluated as a strict sequence of four operation
//! units, each costing `load + compute + store`:
//!
//! * load: activations crossing the host link when an op runs on a
//!   different device than its predecessor,
//! * compute: `M` micro-batches of a roofline bound on the op's device,
//! * store: the KV cache produced on the GPU shipped to the host when
//!   attention runs on the CPU.
//!
//! The expert stage always runs over the whole batch (coalesced) and is
//! split three ways: resident experts and migrated experts run on the GPU,
//! the rest on the CPU, both devices in parallel.

use serde::{Deserialize, Serialize};

use crate::eas::{experts_by_heat, ActivationMap, ResidencyPlan};
use crate::error::{Error, Result};
use crate::hwmodel::{roofline_time, transfer_time, Device, SystemSpec};
use crate::workload::{
    expert_share_cost, intermediate_bytes, kv_store_bytes, op_cost, op_weight_bytes, weight_bytes,
    BatchConfig, ModelConfig, Op, Phase, PhaseKind,
};

/// Devices of the QKV projection, attention and output projection.
pub type Placement = [Device; 3];

/// All eight placements in lexicographic order (CPU before GPU).
pub fn all_placements() -> [Placement; 8] {
    let mut out = [[Device::Cpu; 3]; 8];
    for (bits, p) in out.iter_mut().enumerate() {
        for (i, d) in p.iter_mut().enumerate() {
            *d = if bits >> (2 - i) & 1 == 1 {
                Device::Gpu
            } else {
                Device::Cpu
            };
        }
    }
    out
}

pub fn placement_label(p: &Placement) -> String {
    p.iter().map(|d| d.letter()).collect()
}

/// One point of the search space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AllocationStrategy {
    pub placement: Placement,
    /// Micro-batch size of the non-expert ops.
    pub m: usize,
    /// Activated experts that are resident in VRAM.
    pub exp_r: usize,
    /// Activated experts fetched to the GPU over the link each pass.
    pub exp_m: usize,
    /// Activated experts computed on the CPU.
    pub exp_c: usize,
    /// Experts per layer preloaded in VRAM. At least `exp_r`; larger when
    /// fewer experts are activated in this phase than are resident.
    pub resident: usize,
}

impl AllocationStrategy {
    pub fn new(placement: Placement, m: usize, exp_r: usize, exp_m: usize, exp_c: usize) -> Self {
        AllocationStrategy {
            placement,
            m,
            exp_r,
            exp_m,
            exp_c,
            resident: exp_r,
        }
    }

    pub fn with_resident(mut self, resident: usize) -> Self {
        self.resident = resident;
        self
    }

    pub fn device(&self, op: Op) -> Device {
        match op {
            Op::Qkv | Op::Attention | Op::OutProj => self.placement[op.index()],
            // The expert stage merges its outputs where the residual stream
            // lives, i.e. on the output projection's device.
            Op::Experts => self.placement[2],
        }
    }

    /// Device feeding `op`. The QKV projection consumes the previous
    /// layer's expert output, which sits on that layer's `placement[2]`.
    pub fn prev_device(&self, op: Op) -> Device {
        match op {
            Op::Qkv => self.placement[2],
            Op::Attention => self.placement[0],
            Op::OutProj => self.placement[1],
            Op::Experts => self.placement[2],
        }
    }

    pub fn gpu_experts(&self) -> usize {
        self.exp_r + self.exp_m
    }

    pub fn activated(&self) -> usize {
        self.exp_r + self.exp_m + self.exp_c
    }

    pub fn label(&self) -> String {
        format!(
            "{} m={} r={} m_exp={} c={}",
            placement_label(&self.placement),
            self.m,
            self.exp_r,
            self.exp_m,
            self.exp_c
        )
    }
}

/// How the expert stage is batched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpertMode {
    /// One pass over the whole batch.
    #[default]
    Coalesced,
    /// One pass per micro-batch, re-reading expert weights every time.
    MicroBatched,
}

/// Lifetime of experts fetched over the link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MigrationPolicy {
    /// Fetched every forward pass, never cached.
    #[default]
    PerPass,
    /// Fetched on the first decode step and kept in VRAM for the rest.
    ReuseAcrossDecode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostOptions {
    pub expert_mode: ExpertMode,
    pub migration: MigrationPolicy,
    /// VRAM reserved for kernel workspace, as a fraction of capacity.
    pub workspace_fraction: f64,
}

impl Default for CostOptions {
    fn default() -> Self {
        CostOptions {
            expert_mode: ExpertMode::Coalesced,
            migration: MigrationPolicy::PerPass,
            workspace_fraction: 0.05,
        }
    }
}

/// Token shares of the activated experts, in residency priority order:
/// the first `exp_r` entries are the resident experts, the next `exp_m`
/// migrate, the rest run on the CPU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertProfile {
    shares: Vec<f64>,
}

impl ExpertProfile {
    pub fn uniform(activated: usize) -> Self {
        let share = 1.0 / activated as f64;
        ExpertProfile {
            shares: vec![share; activated],
        }
    }

    /// Shares from explicit weights; zero-weight entries are dropped.
    // The negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidTrace(
                "expert weights must be >= 0 with a positive sum".into(),
            ));
        }
        Ok(ExpertProfile {
            shares: weights.iter().filter(|&&w| w > 0.0).map(|w| w / total).collect(),
        })
    }

    /// Hottest-first profile of a map, pooled over layers: position `j`
    /// carries the share of every layer's `j`-th hottest expert.
    pub fn from_map(map: &ActivationMap) -> Result<Self> {
        Self::pooled(map, |layer| experts_by_heat(map, layer))
    }

    /// Like [`from_map`](Self::from_map), but each layer lists its resident
    /// experts first, so that the first `capacity` shares are exactly the
    /// events a residency plan serves from VRAM.
    pub fn from_map_with_residency(map: &ActivationMap, plan: &ResidencyPlan) -> Result<Self> {
        if plan.layers.len() != map.num_layers() {
            return Err(Error::LayerMismatch {
                map: map.num_layers(),
                model: plan.layers.len(),
            });
        }
        Self::pooled(map, |layer| {
            let heat = experts_by_heat(map, layer);
            let (mut resident, rest): (Vec<usize>, Vec<usize>) =
                heat.into_iter().partition(|&e| plan.is_resident(layer, e));
            resident.extend(rest);
            resident
        })
    }

    fn pooled(map: &ActivationMap, order: impl Fn(usize) -> Vec<usize>) -> Result<Self> {
        map.validate()?;
        let n = map.experts_per_layer();
        let mut pooled = vec![0u64; n];
        for layer in 0..map.num_layers() {
            for (pos, e) in order(layer).into_iter().enumerate() {
                pooled[pos] += map.counts[layer][e];
            }
        }
        let total: u64 = pooled.iter().sum();
        if total == 0 {
            return Err(Error::InvalidTrace("activation map has no events".into()));
        }
        // Positions that no layer ever activates are not activated experts.
        // A resident-first ordering can leave zero-count gaps in the
        // middle; those resident experts still count as activated slots.
        let last = pooled.iter().rposition(|&c| c > 0).unwrap_or(0);
        let shares = pooled[..=last]
            .iter()
            .map(|&c| c as f64 / total as f64)
            .collect();
        Ok(ExpertProfile { shares })
    }

    pub fn len(&self) -> usize {
        self.shares.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shares.is_empty()
    }

    pub fn shares(&self) -> &[f64] {
        &self.shares
    }

    /// The `n` highest-priority experts, renormalized.
    pub fn truncated(&self, n: usize) -> ExpertProfile {
        if n >= self.shares.len() {
            return self.clone();
        }
        let head = &self.shares[..n];
        let total: f64 = head.iter().sum();
        ExpertProfile {
            shares: head.iter().map(|s| s / total).collect(),
        }
    }
}

/// Load/compute/store times of one operation unit.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OpTimes {
    pub t_load: f64,
    pub t_comp: f64,
    pub t_store: f64,
}

impl OpTimes {
    pub fn total(&self) -> f64 {
        self.t_load + self.t_comp + self.t_store
    }
}

/// Latency breakdown of one decoder layer.
///
/// For the expert stage, `t_load` is activation hand-off plus expert
/// migration and `t_store` is the return of partial outputs computed away
/// from the merge device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub ops: [OpTimes; 4],
    pub total: f64,
}

impl LayerCost {
    fn from_ops(ops: [OpTimes; 4]) -> Self {
        let total = ops.iter().fold(0.0, |acc, o| acc + o.t_load + o.t_comp + o.t_store);
        LayerCost { ops, total }
    }

    pub fn non_expert(&self) -> f64 {
        self.ops[..3].iter().map(OpTimes::total).sum()
    }

    pub fn expert(&self) -> f64 {
        self.ops[3].total()
    }
}

/// Expert-stage timing detail.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ExpertStage {
    /// Activations shipped to the non-merge device plus migrated weights.
    pub t_load: f64,
    /// `max(gpu_latency, cpu_latency)`.
    pub t_comp: f64,
    /// Partial outputs shipped back to the merge device.
    pub t_return: f64,
    pub gpu_latency: f64,
    pub cpu_latency: f64,
    /// Activation bytes crossing the link towards the expert devices.
    pub handoff_bytes: f64,
    /// Expert weight bytes fetched over the link.
    pub migration_bytes: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TotalLatency {
    pub prefill_s: f64,
    pub decode_s: f64,
    pub total_s: f64,
}

/// VRAM consumption of a strategy, component by component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VramBudget {
    pub resident_expert_bytes: f64,
    pub non_moe_weight_bytes: f64,
    pub intermediate_bytes: f64,
    pub kv_cache_bytes: f64,
    pub workspace_bytes: f64,
    pub capacity: f64,
}

impl VramBudget {
    pub fn used(&self) -> f64 {
        self.resident_expert_bytes
            + self.non_moe_weight_bytes
            + self.intermediate_bytes
            + self.kv_cache_bytes
            + self.workspace_bytes
    }

    pub fn feasible(&self) -> bool {
        self.used() <= self.capacity
    }
}

/// Decode throughput in generated tokens per second: `B * L_out / total_s`.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn throughput(latency: &TotalLatency, batch: &BatchConfig) -> Result<f64> {
    if !(latency.total_s > 0.0) {
        return Err(Error::UndefinedThroughput("total latency must be > 0"));
    }
    if batch.output_len == 0 {
        return Err(Error::UndefinedThroughput("no tokens are generated (output_len = 0)"));
    }
    Ok((batch.batch_size * batch.output_len) as f64 / latency.total_s)
}

/// Evaluates strategies for one system, model and batch.
#[derive(Debug, Clone, Copy)]
pub struct CostModel<'a> {
    pub system: &'a SystemSpec,
    pub model: &'a ModelConfig,
    pub batch: &'a BatchConfig,
    pub options: CostOptions,
    pub profile: Option<&'a ExpertProfile>,
}

impl<'a> CostModel<'a> {
    pub fn new(system: &'a SystemSpec, model: &'a ModelConfig, batch: &'a BatchConfig) -> Self {
        CostModel {
            system,
            model,
            batch,
            options: CostOptions::default(),
            profile: None,
        }
    }

    pub fn with_options(mut self, options: CostOptions) -> Self {
        self.options = options;
        self
    }

    pub fn with_profile(mut self, profile: Option<&'a ExpertProfile>) -> Self {
        self.profile = profile;
        self
    }

    fn tokens(&self, phase: &Phase) -> usize {
        self.batch.batch_size * phase.seq_len
    }

    /// Distinct experts a layer activates in `phase`.
    pub fn activated(&self, phase: &Phase) -> usize {
        let routed = self.tokens(phase).saturating_mul(self.model.top_k);
        match self.profile {
            Some(p) => p.len().min(routed),
            None => self.model.activated_experts(self.tokens(phase)),
        }
    }

    /// Token shares of the activated experts in priority order.
    pub fn expert_shares(&self, phase: &Phase) -> ExpertProfile {
        let n = self.activated(phase);
        match self.profile {
            Some(p) => p.truncated(n),
            None => ExpertProfile::uniform(n),
        }
    }

    fn micro_batches(&self, s: &AllocationStrategy) -> f64 {
        self.batch.num_micro_batches(s.m) as f64
    }

    fn check_strategy(&self, s: &AllocationStrategy, phase: &Phase) -> Result<()> {
        if s.m == 0 {
            return Err(Error::InvalidStrategy("micro-batch size must be >= 1".into()));
        }
        if s.resident < s.exp_r {
            return Err(Error::InvalidStrategy(format!(
                "resident pool {} is smaller than exp_r {}",
                s.resident, s.exp_r
            )));
        }
        let activated = self.activated(phase);
        if s.activated() != activated {
            return Err(Error::PartitionMismatch {
                exp_r: s.exp_r,
                exp_m: s.exp_m,
                exp_c: s.exp_c,
                activated,
            });
        }
        Ok(())
    }

    fn non_expert(op: Op) -> Result<()> {
        if op == Op::Experts {
            Err(Error::InvalidStrategy(
                "the expert stage is costed by expert_stage_time".into(),
            ))
        } else {
            Ok(())
        }
    }

    /// Activation transfer into `op` when it changes device.
    pub fn op_load_time(&self, op: Op, s: &AllocationStrategy, phase: &Phase) -> Result<f64> {
        Self::non_expert(op)?;
        if s.device(op) == s.prev_device(op) {
            return Ok(0.0);
        }
        let c = op_cost(op, phase, self.model, s.m, 0)?;
        Ok(self.micro_batches(s) * transfer_time(c.d_x, &self.system.link))
    }

    pub fn op_compute_time(&self, op: Op, s: &AllocationStrategy, phase: &Phase) -> Result<f64> {
        Self::non_expert(op)?;
        let c = op_cost(op, phase, self.model, s.m, 0)?;
        let dev = self.system.device(s.device(op));
        Ok(self.micro_batches(s) * roofline_time(c.bytes(), c.flops, dev))
    }

    /// KV cache shipped to the host when QKV runs on the GPU and attention
    /// on the CPU. Zero for every other op and placement.
    pub fn op_store_time(&self, op: Op, s: &AllocationStrategy, phase: &Phase) -> Result<f64> {
        if op == Op::Attention && s.placement[0] == Device::Gpu && s.placement[1] == Device::Cpu {
            let kv = kv_store_bytes(self.model, s.m, phase.seq_len)?;
            Ok(self.micro_batches(s) * transfer_time(kv, &self.system.link))
        } else {
            Ok(0.0)
        }
    }

    fn migration_charged(&self, phase: &Phase) -> bool {
        match (self.options.migration, phase.kind) {
            (MigrationPolicy::PerPass, _) | (_, PhaseKind::Prefill) => true,
            // Decode step 1 attends over exactly `input_len` positions.
            (MigrationPolicy::ReuseAcrossDecode, PhaseKind::Decode) => {
                phase.kv_len <= self.batch.input_len
            }
        }
    }

    /// Coalesced (or, in the test mode, micro-batched) expert stage.
    pub fn expert_stage_time(&self, s: &AllocationStrategy, phase: &Phase) -> Result<ExpertStage> {
        self.check_strategy(s, phase)?;
        let shares = self.expert_shares(phase);
        Ok(self.expert_stage_with(s, phase, shares.shares()))
    }

    /// Expert stage for an already validated partition of `shares`.
    pub(crate) fn expert_stage_with(
        &self,
        s: &AllocationStrategy,
        phase: &Phase,
        shares: &[f64],
    ) -> ExpertStage {
        let gpu_n = s.gpu_experts();
        let share_gpu: f64 = shares[..gpu_n].iter().sum();
        let share_cpu: f64 = shares[gpu_n..].iter().sum();

        let unit = expert_share_cost(phase, self.model, self.batch.batch_size, 1.0);
        let per_expert_weights = unit.d_y;
        let link = &self.system.link;

        let device_latency = |dev: Device, n: usize, share: f64| -> f64 {
            if n == 0 {
                return 0.0;
            }
            let spec = self.system.device(dev);
            let x = unit.d_x * share;
            let w = n as f64 * per_expert_weights;
            let c = unit.flops * share;
            match self.options.expert_mode {
                ExpertMode::Coalesced => roofline_time(x + w, c, spec),
                ExpertMode::MicroBatched => {
                    let mb = self.micro_batches(s);
                    mb * roofline_time(x / mb + w, c / mb, spec)
                }
            }
        };
        let gpu_latency = device_latency(Device::Gpu, gpu_n, share_gpu);
        let cpu_latency = device_latency(Device::Cpu, s.exp_c, share_cpu);

        let away_share = match s.device(Op::Experts) {
            Device::Gpu => share_cpu,
            Device::Cpu => share_gpu,
        };
        let handoff_bytes = unit.d_x * away_share;
        let migration_bytes = if self.migration_charged(phase) {
            s.exp_m as f64 * per_expert_weights
        } else {
            0.0
        };
        ExpertStage {
            t_load: transfer_time(handoff_bytes + migration_bytes, link),
            t_comp: gpu_latency.max(cpu_latency),
            t_return: transfer_time(handoff_bytes, link),
            gpu_latency,
            cpu_latency,
            handoff_bytes,
            migration_bytes,
        }
    }

    pub fn layer_latency(&self, s: &AllocationStrategy, phase: &Phase) -> Result<LayerCost> {
        let mut ops = [OpTimes::default(); 4];
        for op in Op::NON_EXPERT {
            ops[op.index()] = OpTimes {
                t_load: self.op_load_time(op, s, phase)?,
                t_comp: self.op_compute_time(op, s, phase)?,
                t_store: self.op_store_time(op, s, phase)?,
            };
        }
        let e = self.expert_stage_time(s, phase)?;
        ops[3] = OpTimes {
            t_load: e.t_load,
            t_comp: e.t_comp,
            t_store: e.t_return,
        };
        Ok(LayerCost::from_ops(ops))
    }

    /// All `N` layers of the prefill pass.
    pub fn prefill_latency(&self, s: &AllocationStrategy) -> Result<f64> {
        let layer = self.layer_latency(s, &Phase::prefill(self.batch.input_len))?;
        Ok(self.model.num_layers as f64 * layer.total)
    }

    /// Exact sum over every decode step of `N` layers each.
    pub fn decode_latency(&self, s: &AllocationStrategy) -> Result<f64> {
        let n = self.model.num_layers as f64;
        let mut sum = 0.0;
        for t in 1..=self.batch.output_len {
            let layer = self.layer_latency(s, &Phase::decode_step(self.batch, t))?;
            sum += n * layer.total;
        }
        Ok(sum)
    }

    pub fn total_latency(
        &self,
        prefill: &AllocationStrategy,
        decode: &AllocationStrategy,
    ) -> Result<TotalLatency> {
        let prefill_s = self.prefill_latency(prefill)?;
        let decode_s = self.decode_latency(decode)?;
        Ok(TotalLatency {
            prefill_s,
            decode_s,
            total_s: prefill_s + decode_s,
        })
    }

    /// Tokens the KV cache holds on the GPU by the end of `phase`.
    fn kv_positions(&self, phase: &Phase) -> usize {
        match phase.kind {
            PhaseKind::Prefill => self.batch.input_len,
            PhaseKind::Decode => self.batch.input_len + self.batch.output_len,
        }
    }

    /// VRAM consumed by `s` in `phase`. Infeasibility is reported through
    /// [`VramBudget::feasible`], not as an error.
    pub fn vram_usage(&self, s: &AllocationStrategy, phase: &Phase) -> VramBudget {
        let n = self.model.num_layers as f64;
        let w = weight_bytes(self.model);
        let on_gpu = s.placement.map(|d| d == Device::Gpu);

        let reuse = self.options.migration == MigrationPolicy::ReuseAcrossDecode
            && phase.kind == PhaseKind::Decode;
        let resident_count = s.resident + if reuse { s.exp_m } else { 0 };
        let resident_expert_bytes = resident_count as f64 * w.per_expert * n;

        let non_moe_weight_bytes = Op::NON_EXPERT
            .iter()
            .filter(|op| on_gpu[op.index()])
            .map(|&op| op_weight_bytes(op, self.model) * n)
            .sum();

        // One layer's worth of migrated weights is staged at a time.
        let staging = if reuse {
            0.0
        } else {
            s.exp_m as f64 * w.per_expert
        };
        let intermediate = intermediate_bytes(self.model, phase, s.m.max(1), on_gpu) + staging;

        let kv_cache_bytes = if on_gpu[1] {
            2.0 * self.model.dtype_bytes as f64
                * self.batch.batch_size as f64
                * self.kv_positions(phase) as f64
                * self.model.hidden_dim as f64
                * n
        } else {
            0.0
        };

        let capacity = self.system.vram_capacity();
        VramBudget {
            resident_expert_bytes,
            non_moe_weight_bytes,
            intermediate_bytes: intermediate,
            kv_cache_bytes,
            workspace_bytes: self.options.workspace_fraction * capacity,
            capacity,
        }
    }
}
