//! Exhaustive search for the fastest VRAM-feasible pair of prefill and
//! decode strategies.
//!
//! Expert residency is shared by both phases because weights are preloaded
//! once, so the search fixes the resident pool size `R` in an outer loop and
//! optimizes each phase independently inside it. Per-step costs are cached
//! as the non-expert part of a layer (depends on placement and `m`) and the
//! expert stage (depends on the merge device and the expert split), then
//! combined in exactly the order [`CostModel::layer_latency`] uses, so every
//! predicted latency is bit-identical to a direct evaluation.

use std::cmp::{Ordering, Reverse};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costmodel::{
    all_placements, throughput, AllocationStrategy, CostModel, CostOptions, ExpertMode,
    ExpertProfile, ExpertStage, Placement, TotalLatency, VramBudget,
};
use crate::eas::{ActivationMap, ResidencyPlan};
use crate::error::{Error, Result};
use crate::hwmodel::{Device, SystemSpec};
use crate::workload::{BatchConfig, ModelConfig, Op, Phase, PhaseKind};

/// Search-space ceiling of [`brute_force_plan`].
pub const DEFAULT_BRUTE_FORCE_CEILING: u128 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Constraints {
    /// Fraction of VRAM that must stay free on top of the budget.
    pub vram_slack_fraction: f64,
    pub forbid_cpu_attention: bool,
    /// Per-op device overrides for QKV, attention and output projection.
    pub force_placement: [Option<Device>; 3],
    /// Pin the resident pool to this many experts per layer.
    pub fixed_resident: Option<usize>,
}

impl Constraints {
    fn admits(&self, p: &Placement) -> bool {
        if self.forbid_cpu_attention && p[1] == Device::Cpu {
            return false;
        }
        self.force_placement
            .iter()
            .zip(p)
            .all(|(f, d)| f.is_none_or(|f| f == *d))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRequest {
    pub system: SystemSpec,
    pub model: ModelConfig,
    pub batch: BatchConfig,
    /// Expert token shares in residency priority order; uniform if absent.
    pub profile: Option<ExpertProfile>,
    pub m_candidates: Vec<usize>,
    pub constraints: Constraints,
    pub options: CostOptions,
}

impl PlanRequest {
    /// Request with the default micro-batch candidates and no constraints.
    pub fn new(system: SystemSpec, model: ModelConfig, batch: BatchConfig) -> Self {
        let m_candidates = default_m_candidates(batch.batch_size);
        PlanRequest {
            system,
            model,
            batch,
            profile: None,
            m_candidates,
            constraints: Constraints::default(),
            options: CostOptions::default(),
        }
    }

    /// Weights expert costs by a measured activation map, hottest first.
    pub fn with_activation_map(mut self, map: &ActivationMap) -> Result<Self> {
        self.check_map(map)?;
        self.profile = Some(ExpertProfile::from_map(map)?);
        Ok(self)
    }

    /// Weights expert costs by a map, with the plan's residents first.
    pub fn with_residency(mut self, map: &ActivationMap, plan: &ResidencyPlan) -> Result<Self> {
        self.check_map(map)?;
        self.profile = Some(ExpertProfile::from_map_with_residency(map, plan)?);
        Ok(self)
    }

    fn check_map(&self, map: &ActivationMap) -> Result<()> {
        if map.num_layers() != self.model.num_layers {
            return Err(Error::LayerMismatch {
                map: map.num_layers(),
                model: self.model.num_layers,
            });
        }
        if map.experts_per_layer() != self.model.experts_per_layer {
            return Err(Error::InvalidRequest(format!(
                "activation map has {} experts per layer, model has {}",
                map.experts_per_layer(),
                self.model.experts_per_layer
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.model.validate()?;
        self.batch.validate()?;
        if self.m_candidates.is_empty() {
            return Err(Error::InvalidRequest("m_candidates is empty".into()));
        }
        if let Some(&m) = self
            .m_candidates
            .iter()
            .find(|&&m| m == 0 || m > self.batch.batch_size)
        {
            return Err(Error::InvalidRequest(format!(
                "micro-batch size {m} is outside 1..={}",
                self.batch.batch_size
            )));
        }
        let c = &self.constraints;
        if !(0.0..1.0).contains(&c.vram_slack_fraction) {
            return Err(Error::InvalidRequest(
                "vram_slack_fraction must be in [0, 1)".into(),
            ));
        }
        if let Some(r) = c.fixed_resident {
            if r > self.model.experts_per_layer {
                return Err(Error::InvalidRequest(format!(
                    "fixed_resident {r} exceeds {} experts per layer",
                    self.model.experts_per_layer
                )));
            }
        }
        if let Some(p) = &self.profile {
            if p.is_empty() || p.len() > self.model.experts_per_layer {
                return Err(Error::InvalidRequest(format!(
                    "expert profile has {} entries for {} experts per layer",
                    p.len(),
                    self.model.experts_per_layer
                )));
            }
        }
        if !(0.0..1.0).contains(&self.options.workspace_fraction) {
            return Err(Error::InvalidRequest(
                "workspace_fraction must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn cost_model(&self) -> CostModel<'_> {
        CostModel::new(&self.system, &self.model, &self.batch)
            .with_options(self.options)
            .with_profile(self.profile.as_ref())
    }

    fn sorted_m(&self) -> Vec<usize> {
        let mut m = self.m_candidates.clone();
        m.sort_unstable();
        m.dedup();
        m
    }

    fn resident_range(&self) -> Vec<usize> {
        match self.constraints.fixed_resident {
            Some(r) => vec![r],
            None => (0..=self.model.experts_per_layer).collect(),
        }
    }
}

/// Powers of two up to `batch_size`, plus `batch_size` itself.
pub fn default_m_candidates(batch_size: usize) -> Vec<usize> {
    let mut out: Vec<usize> = std::iter::successors(Some(1usize), |m| m.checked_mul(2))
        .take_while(|&m| m <= batch_size)
        .collect();
    if out.last() != Some(&batch_size) && batch_size > 0 {
        out.push(batch_size);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub prefill_s: f64,
    pub decode_s: f64,
    pub total_s: f64,
    /// Generated tokens per second; absent when nothing is generated.
    pub tokens_per_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    pub candidates_enumerated: u64,
    pub feasible_count: u64,
    #[serde(skip)]
    pub elapsed: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub prefill_strategy: AllocationStrategy,
    pub decode_strategy: AllocationStrategy,
    /// Experts per layer preloaded in VRAM for both phases.
    pub resident_experts: usize,
    pub predicted: Prediction,
    pub vram_prefill: VramBudget,
    pub vram_decode: VramBudget,
    pub search_stats: SearchStats,
}

impl Plan {
    /// Chosen strategies and predictions, ignoring search statistics.
    pub fn same_choice(&self, other: &Plan) -> bool {
        self.prefill_strategy == other.prefill_strategy
            && self.decode_strategy == other.decode_strategy
            && self.resident_experts == other.resident_experts
            && self.predicted == other.predicted
    }
}

/// Ordering of two phase candidates: cost, then fewer migrated experts, then
/// larger `m`, then placement.
type PhaseKey = (f64, usize, Reverse<usize>, Placement);

fn phase_key(cost: f64, s: &AllocationStrategy) -> PhaseKey {
    (cost, s.exp_m, Reverse(s.m), s.placement)
}

fn cmp_phase(a: &PhaseKey, b: &PhaseKey) -> Ordering {
    a.0.total_cmp(&b.0)
        .then(a.1.cmp(&b.1))
        .then(a.2.cmp(&b.2))
        .then(a.3.cmp(&b.3))
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    strategy: AllocationStrategy,
    cost: f64,
}

impl Candidate {
    fn key(&self) -> PhaseKey {
        phase_key(self.cost, &self.strategy)
    }
}

#[derive(Debug, Clone, Copy)]
struct Pair {
    resident: usize,
    prefill: Candidate,
    decode: Candidate,
    total: f64,
}

fn cmp_pair(a: &Pair, b: &Pair) -> Ordering {
    a.total
        .total_cmp(&b.total)
        .then(a.prefill.cost.total_cmp(&b.prefill.cost))
        .then(a.decode.cost.total_cmp(&b.decode.cost))
        .then(a.resident.cmp(&b.resident))
        .then(cmp_phase(&a.prefill.key(), &b.prefill.key()))
        .then(cmp_phase(&a.decode.key(), &b.decode.key()))
}

/// Cached costs of one phase.
struct PhaseEval<'a> {
    cm: CostModel<'a>,
    constraints: &'a Constraints,
    steps: Vec<Phase>,
    /// Phase whose VRAM footprint is the largest (last decode step).
    vram_phase: Phase,
    activated: usize,
    shares: ExpertProfile,
    n_layers: f64,
    placements: Vec<Placement>,
    m: Vec<usize>,
    /// Non-expert part of a layer: `[placement][m][step]`.
    non_expert: Vec<Vec<Vec<f64>>>,
}

impl<'a> PhaseEval<'a> {
    fn new(req: &'a PlanRequest, kind: PhaseKind) -> Result<Self> {
        let cm = req.cost_model();
        let b = &req.batch;
        let steps: Vec<Phase> = match kind {
            PhaseKind::Prefill => vec![Phase::prefill(b.input_len)],
            PhaseKind::Decode => (1..=b.output_len).map(|t| Phase::decode_step(b, t)).collect(),
        };
        let vram_phase = Self::vram_phase_of(req, kind);
        let activated = cm.activated(&vram_phase);
        if activated == 0 {
            return Err(Error::NoActivatedExperts);
        }
        let shares = cm.expert_shares(&vram_phase);
        let placements: Vec<Placement> = all_placements()
            .into_iter()
            .filter(|p| req.constraints.admits(p))
            .collect();
        let m = req.sorted_m();
        let mut non_expert = Vec::with_capacity(placements.len());
        for p in &placements {
            let mut rows = Vec::with_capacity(m.len());
            for &mb in &m {
                let s = AllocationStrategy::new(*p, mb, 0, 0, activated);
                let row = steps
                    .iter()
                    .map(|ph| {
                        let mut acc = 0.0;
                        for op in Op::NON_EXPERT {
                            acc = acc
                                + cm.op_load_time(op, &s, ph)?
                                + cm.op_compute_time(op, &s, ph)?
                                + cm.op_store_time(op, &s, ph)?;
                        }
                        Ok(acc)
                    })
                    .collect::<Result<Vec<f64>>>()?;
                rows.push(row);
            }
            non_expert.push(rows);
        }
        Ok(PhaseEval {
            cm,
            constraints: &req.constraints,
            steps,
            vram_phase,
            activated,
            shares,
            n_layers: req.model.num_layers as f64,
            placements,
            m,
            non_expert,
        })
    }

    fn exp_r(&self, resident: usize) -> usize {
        resident.min(self.activated)
    }

    fn raw_count(&self, resident: usize) -> u128 {
        let splits = (self.activated - self.exp_r(resident) + 1) as u128;
        self.placements.len() as u128 * self.m.len() as u128 * splits
    }

    /// Expert stage per step, `[merge device][exp_m][step]`.
    fn expert_table(&self, resident: usize) -> [Vec<Vec<ExpertStage>>; 2] {
        let exp_r = self.exp_r(resident);
        let free = self.activated - exp_r;
        let table = |merge: Device| {
            (0..=free)
                .map(|exp_m| {
                    let s = AllocationStrategy::new([merge; 3], 1, exp_r, exp_m, free - exp_m);
                    self.steps
                        .iter()
                        .map(|ph| self.cm.expert_stage_with(&s, ph, self.shares.shares()))
                        .collect()
                })
                .collect()
        };
        [table(Device::Cpu), table(Device::Gpu)]
    }

    fn phase_cost(&self, ne: &[f64], ex: &[ExpertStage]) -> f64 {
        let mut sum = 0.0;
        for (a, e) in ne.iter().zip(ex) {
            let layer = a + e.t_load + e.t_comp + e.t_return;
            sum += self.n_layers * layer;
        }
        sum
    }

    fn feasible(&self, s: &AllocationStrategy) -> bool {
        let v = self.cm.vram_usage(s, &self.vram_phase);
        v.used() <= v.capacity * (1.0 - self.constraints.vram_slack_fraction)
    }

    /// Every feasible candidate for resident pool `resident`, in
    /// enumeration order, plus the raw count.
    fn candidates(&self, resident: usize) -> (Vec<Candidate>, u64) {
        let exp_r = self.exp_r(resident);
        let free = self.activated - exp_r;
        let table = self.expert_table(resident);
        let mut out = Vec::new();
        let mut raw = 0u64;
        for (pi, p) in self.placements.iter().enumerate() {
            let ex = &table[(p[2] == Device::Gpu) as usize];
            for (mi, &m) in self.m.iter().enumerate() {
                #[allow(clippy::needless_range_loop)]
                for exp_m in 0..=free {
                    raw += 1;
                    let strategy = AllocationStrategy::new(*p, m, exp_r, exp_m, free - exp_m)
                        .with_resident(resident);
                    if !self.feasible(&strategy) {
                        continue;
                    }
                    let cost = self.phase_cost(&self.non_expert[pi][mi], &ex[exp_m]);
                    out.push(Candidate { strategy, cost });
                }
            }
        }
        (out, raw)
    }

    fn best(&self, resident: usize) -> (Option<Candidate>, u64, u64) {
        let (cands, raw) = self.candidates(resident);
        let feasible = cands.len() as u64;
        let best = cands
            .into_iter()
            .min_by(|a, b| cmp_phase(&a.key(), &b.key()));
        (best, raw, feasible)
    }
}

/// Every VRAM-feasible strategy of one phase, with `exp_r` ranging over all
/// activated experts and the resident pool equal to `exp_r`. Ordered by
/// `(x0, x1, x2, m, exp_r, exp_m)`.
pub fn enumerate_strategies(req: &PlanRequest, phase: PhaseKind) -> Result<Vec<AllocationStrategy>> {
    req.validate()?;
    let eval = PhaseEval::new(req, phase)?;
    let mut out = Vec::new();
    for p in &eval.placements {
        for &m in &eval.m {
            for exp_r in 0..=eval.activated {
                let free = eval.activated - exp_r;
                for exp_m in 0..=free {
                    let s = AllocationStrategy::new(*p, m, exp_r, exp_m, free - exp_m);
                    if eval.feasible(&s) {
                        out.push(s);
                    }
                }
            }
        }
    }
    Ok(out)
}

fn finish(req: &PlanRequest, best: Pair, stats: SearchStats) -> Result<Plan> {
    let cm = req.cost_model();
    let latency: TotalLatency = cm.total_latency(&best.prefill.strategy, &best.decode.strategy)?;
    let pre = PhaseEval::vram_phase_of(req, PhaseKind::Prefill);
    let dec = PhaseEval::vram_phase_of(req, PhaseKind::Decode);
    Ok(Plan {
        prefill_strategy: best.prefill.strategy,
        decode_strategy: best.decode.strategy,
        resident_experts: best.resident,
        predicted: Prediction {
            prefill_s: latency.prefill_s,
            decode_s: latency.decode_s,
            total_s: latency.total_s,
            tokens_per_s: throughput(&latency, &req.batch).ok(),
        },
        vram_prefill: cm.vram_usage(&best.prefill.strategy, &pre),
        vram_decode: cm.vram_usage(&best.decode.strategy, &dec),
        search_stats: stats,
    })
}

impl PhaseEval<'_> {
    fn vram_phase_of(req: &PlanRequest, kind: PhaseKind) -> Phase {
        let b = &req.batch;
        match kind {
            PhaseKind::Prefill => Phase::prefill(b.input_len),
            PhaseKind::Decode if b.output_len == 0 => Phase::decode(b.input_len),
            PhaseKind::Decode => Phase::decode_step(b, b.output_len),
        }
    }
}

/// Fastest feasible strategy pair.
pub fn plan(req: &PlanRequest) -> Result<Plan> {
    let start = Instant::now();
    req.validate()?;
    let pre = PhaseEval::new(req, PhaseKind::Prefill)?;
    let dec = PhaseEval::new(req, PhaseKind::Decode)?;
    let per_r: Vec<(Option<Pair>, u64, u64)> = req
        .resident_range()
        .into_par_iter()
        .map(|r| {
            let (p, praw, pfeas) = pre.best(r);
            let (d, draw, dfeas) = dec.best(r);
            let pair = p.zip(d).map(|(prefill, decode)| Pair {
                resident: r,
                prefill,
                decode,
                total: prefill.cost + decode.cost,
            });
            (pair, praw + draw, pfeas + dfeas)
        })
        .collect();
    let mut stats = SearchStats {
        candidates_enumerated: 0,
        feasible_count: 0,
        elapsed: Duration::ZERO,
    };
    let mut best: Option<Pair> = None;
    for (pair, raw, feasible) in per_r {
        stats.candidates_enumerated += raw;
        stats.feasible_count += feasible;
        if let Some(p) = pair {
            if best.is_none_or(|b| cmp_pair(&p, &b) == Ordering::Less) {
                best = Some(p);
            }
        }
    }
    let best = best.ok_or(Error::NoFeasiblePlan)?;
    stats.elapsed = start.elapsed();
    finish(req, best, stats)
}

/// Reference search over every `(R, prefill, decode)` triple with no
/// decomposition. Same tie-break as [`plan`].
pub fn brute_force_plan(req: &PlanRequest) -> Result<Plan> {
    brute_force_plan_with_ceiling(req, DEFAULT_BRUTE_FORCE_CEILING)
}

pub fn brute_force_plan_with_ceiling(req: &PlanRequest, ceiling: u128) -> Result<Plan> {
    let start = Instant::now();
    req.validate()?;
    let pre = PhaseEval::new(req, PhaseKind::Prefill)?;
    let dec = PhaseEval::new(req, PhaseKind::Decode)?;
    let size: u128 = req
        .resident_range()
        .iter()
        .map(|&r| pre.raw_count(r) * dec.raw_count(r))
        .sum();
    if size > ceiling {
        return Err(Error::SpaceTooLarge { size, ceiling });
    }
    let mut stats = SearchStats {
        candidates_enumerated: 0,
        feasible_count: 0,
        elapsed: Duration::ZERO,
    };
    let mut best: Option<Pair> = None;
    for r in req.resident_range() {
        let (ps, praw) = pre.candidates(r);
        let (ds, draw) = dec.candidates(r);
        stats.candidates_enumerated += praw * draw;
        for prefill in &ps {
            for decode in &ds {
                stats.feasible_count += 1;
                let pair = Pair {
                    resident: r,
                    prefill: *prefill,
                    decode: *decode,
                    total: prefill.cost + decode.cost,
                };
                if best.is_none_or(|b| cmp_pair(&pair, &b) == Ordering::Less) {
                    best = Some(pair);
                }
            }
        }
    }
    let best = best.ok_or(Error::NoFeasiblePlan)?;
    stats.elapsed = start.elapsed();
    finish(req, best, stats)
}

/// Where activated experts that are not resident go in a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RestPolicy {
    Cpu,
    Migrate,
}

/// Fixed strategy shape evaluated across micro-batch sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub placement: Placement,
    pub resident: usize,
    pub rest: RestPolicy,
    pub phase: PhaseKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: usize,
    pub expert_s: f64,
    pub nonexpert_s: f64,
    pub total_s: f64,
}

/// Phase latency split into expert and non-expert time for every
/// micro-batch candidate, with the expert stage batched per `mode`.
/// Feasibility is not checked.
pub fn sweep_microbatch(req: &PlanRequest, spec: &SweepSpec, mode: ExpertMode) -> Result<Vec<SweepRow>> {
    req.validate()?;
    let cm = req.cost_model().with_options(CostOptions {
        expert_mode: mode,
        ..req.options
    });
    let steps: Vec<Phase> = match spec.phase {
        PhaseKind::Prefill => vec![Phase::prefill(req.batch.input_len)],
        PhaseKind::Decode => (1..=req.batch.output_len)
            .map(|t| Phase::decode_step(&req.batch, t))
            .collect(),
    };
    let n = req.model.num_layers as f64;
    req.sorted_m()
        .into_iter()
        .map(|m| {
            let mut row = SweepRow {
                m,
                expert_s: 0.0,
                nonexpert_s: 0.0,
                total_s: 0.0,
            };
            for ph in &steps {
                let activated = cm.activated(ph);
                let exp_r = spec.resident.min(activated);
                let rest = activated - exp_r;
                let (exp_m, exp_c) = match spec.rest {
                    RestPolicy::Cpu => (0, rest),
                    RestPolicy::Migrate => (rest, 0),
                };
                let s = AllocationStrategy::new(spec.placement, m, exp_r, exp_m, exp_c)
                    .with_resident(spec.resident.max(exp_r));
                let lc = cm.layer_latency(&s, ph)?;
                row.expert_s += n * lc.expert();
                row.nonexpert_s += n * lc.non_expert();
                row.total_s += n * lc.total;
            }
            Ok(row)
        })
        .collect()
}
