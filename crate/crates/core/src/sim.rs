//! Discrete-event replay of one decoder layer on GPU, CPU and the two link
//! directions, with transfers overlapping compute.
//!
//! Each resource runs its tasks one at a time in a static priority order,
//! `(topological level, id)`, without backfilling: a task starts once its
//! dependencies are done and every higher-priority task on its resource
//! has finished. Start times are therefore longest paths through the task
//! graph plus the per-resource order, which keeps the schedule
//! deterministic and the makespan monotone in every task duration.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::costmodel::{AllocationStrategy, CostModel, ExpertMode};
use crate::error::{Error, Result};
use crate::hwmodel::{roofline_time, transfer_time, Device};
use crate::planner::{Plan, PlanRequest};
use crate::workload::{kv_store_bytes, op_cost, Op, Phase};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Resource {
    Gpu,
    Cpu,
    LinkH2D,
    LinkD2H,
}

impl Resource {
    pub const ALL: [Resource; 4] = [
        Resource::Gpu,
        Resource::Cpu,
        Resource::LinkH2D,
        Resource::LinkD2H,
    ];

    pub fn compute(device: Device) -> Resource {
        match device {
            Device::Gpu => Resource::Gpu,
            Device::Cpu => Resource::Cpu,
        }
    }

    /// Link direction carrying data onto `dest`.
    pub fn link_to(dest: Device) -> Resource {
        match dest {
            Device::Gpu => Resource::LinkH2D,
            Device::Cpu => Resource::LinkD2H,
        }
    }

    /// Index of the exclusive unit executing this resource's tasks. A
    /// half-duplex link is a single unit for both directions.
    fn unit(self, duplex: bool) -> usize {
        match self {
            Resource::Gpu => 0,
            Resource::Cpu => 1,
            Resource::LinkH2D => 2,
            Resource::LinkD2H if duplex => 3,
            Resource::LinkD2H => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Resource::Gpu => "gpu",
            Resource::Cpu => "cpu",
            Resource::LinkH2D => "h2d",
            Resource::LinkD2H => "d2h",
        }
    }
}

impl fmt::Display for Resource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: usize,
    pub name: String,
    pub resource: Resource,
    pub duration: f64,
    pub deps: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskGraph {
    pub tasks: Vec<Task>,
}

impl TaskGraph {
    pub fn new() -> Self {
        TaskGraph::default()
    }

    /// Appends a task and returns its id.
    pub fn add(
        &mut self,
        name: impl Into<String>,
        resource: Resource,
        duration: f64,
        deps: impl IntoIterator<Item = usize>,
    ) -> usize {
        let id = self.tasks.len();
        self.tasks.push(Task {
            id,
            name: name.into(),
            resource,
            duration,
            deps: deps.into_iter().collect(),
        });
        id
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn total_duration(&self) -> f64 {
        self.tasks.iter().map(|t| t.duration).sum()
    }

    fn check(&self) -> Result<()> {
        for (i, t) in self.tasks.iter().enumerate() {
            if t.id != i {
                return Err(Error::InvalidTaskGraph(format!("task at index {i} has id {}", t.id)));
            }
            if !(t.duration >= 0.0 && t.duration.is_finite()) {
                return Err(Error::InvalidTaskGraph(format!(
                    "task {} ({}) has duration {}",
                    i, t.name, t.duration
                )));
            }
            if let Some(d) = t.deps.iter().find(|&&d| d >= self.tasks.len()) {
                return Err(Error::InvalidTaskGraph(format!(
                    "task {i} depends on unknown task {d}"
                )));
            }
        }
        Ok(())
    }

    /// Longest dependency chain (in tasks) ending at each task.
    pub fn levels(&self) -> Result<Vec<usize>> {
        self.check()?;
        let n = self.tasks.len();
        let mut indegree = vec![0usize; n];
        let mut succ = vec![Vec::new(); n];
        for t in &self.tasks {
            for &d in &t.deps {
                indegree[t.id] += 1;
                succ[d].push(t.id);
            }
        }
        let mut level = vec![0usize; n];
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut seen = 0;
        while let Some(i) = queue.pop_front() {
            seen += 1;
            for &s in &succ[i] {
                level[s] = level[s].max(level[i] + 1);
                indegree[s] -= 1;
                if indegree[s] == 0 {
                    queue.push_back(s);
                }
            }
        }
        if seen != n {
            return Err(Error::CycleDetected);
        }
        Ok(level)
    }

    /// Longest duration-weighted path.
    pub fn critical_path(&self) -> Result<f64> {
        let order = self.priority_order()?;
        let mut end = vec![0.0f64; self.tasks.len()];
        for i in order {
            let t = &self.tasks[i];
            let start = t.deps.iter().map(|&d| end[d]).fold(0.0, f64::max);
            end[i] = start + t.duration;
        }
        Ok(end.into_iter().fold(0.0, f64::max))
    }

    fn priority_order(&self) -> Result<Vec<usize>> {
        let level = self.levels()?;
        let mut order: Vec<usize> = (0..self.tasks.len()).collect();
        order.sort_by_key(|&i| (level[i], i));
        Ok(order)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub id: usize,
    pub name: String,
    pub resource: Resource,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    /// One entry per task, in task id order.
    pub entries: Vec<TimelineEntry>,
    pub makespan: f64,
}

impl Timeline {
    /// Busy time of each resource.
    pub fn utilization(&self) -> Vec<(Resource, f64)> {
        Resource::ALL
            .iter()
            .map(|&r| {
                let busy: f64 = self
                    .entries
                    .iter()
                    .filter(|e| e.resource == r)
                    .map(|e| e.end - e.start)
                    .sum();
                (r, busy)
            })
            .collect()
    }

    /// Trace-event record: complete events with times in microseconds.
    pub fn to_trace_events(&self) -> serde_json::Value {
        let events: Vec<serde_json::Value> = self
            .entries
            .iter()
            .map(|e| {
                serde_json::json!({
                    "name": e.name,
                    "res": e.resource.name(),
                    "ts": e.start * 1e6,
                    "dur": (e.end - e.start) * 1e6,
                    "ph": "X",
                    "pid": 0,
                    "tid": e.resource.name(),
                })
            })
            .collect();
        serde_json::json!({ "traceEvents": events, "displayTimeUnit": "ms" })
    }
}

/// Schedules `graph` on the four resources.
pub fn simulate(graph: &TaskGraph, duplex: bool) -> Result<Timeline> {
    let order = graph.priority_order()?;
    let mut free = [0.0f64; 4];
    let mut start = vec![0.0f64; graph.len()];
    let mut end = vec![0.0f64; graph.len()];
    for i in order {
        let t = &graph.tasks[i];
        let unit = t.resource.unit(duplex);
        let ready = t.deps.iter().map(|&d| end[d]).fold(0.0, f64::max);
        start[i] = ready.max(free[unit]);
        end[i] = start[i] + t.duration;
        free[unit] = end[i];
    }
    let entries = graph
        .tasks
        .iter()
        .map(|t| TimelineEntry {
            id: t.id,
            name: t.name.clone(),
            resource: t.resource,
            start: start[t.id],
            end: end[t.id],
        })
        .collect();
    let makespan = end.iter().copied().fold(0.0, f64::max);
    Ok(Timeline { entries, makespan })
}

/// Checks every timeline invariant; returns a description of the first
/// violation.
pub fn validate_timeline(graph: &TaskGraph, timeline: &Timeline, duplex: bool) -> std::result::Result<(), String> {
    if timeline.entries.len() != graph.len() {
        return Err(format!(
            "{} entries for {} tasks",
            timeline.entries.len(),
            graph.len()
        ));
    }
    for (t, e) in graph.tasks.iter().zip(&timeline.entries) {
        if e.id != t.id || e.resource != t.resource {
            return Err(format!("entry {} does not match task {}", e.id, t.id));
        }
        if e.start < 0.0 || e.end != e.start + t.duration {
            return Err(format!("task {} spans [{}, {}] for duration {}", t.id, e.start, e.end, t.duration));
        }
        for &d in &t.deps {
            if e.start < timeline.entries[d].end {
                return Err(format!("task {} starts before dependency {} ends", t.id, d));
            }
        }
    }
    for unit in 0..4 {
        let mut spans: Vec<(f64, f64, usize)> = timeline
            .entries
            .iter()
            .filter(|e| e.resource.unit(duplex) == unit && e.end > e.start)
            .map(|e| (e.start, e.end, e.id))
            .collect();
        spans.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(format!("tasks {} and {} overlap", w[0].2, w[1].2));
            }
        }
    }
    let max_end = timeline.entries.iter().map(|e| e.end).fold(0.0, f64::max);
    if timeline.makespan != max_end {
        return Err(format!("makespan {} but last end {}", timeline.makespan, max_end));
    }
    Ok(())
}

/// Task graph of one layer of `phase` under strategy `s`.
///
/// Non-expert ops run per micro-batch, chained within a micro-batch through
/// their activation transfers. Expert weights migrate on the host-to-device
/// link from the start. Each device's expert task waits for every
/// micro-batch's output projection plus its own inputs; partial outputs
/// computed away from the merge device travel back before the merge.
pub fn build_task_graph(cm: &CostModel, s: &AllocationStrategy, phase: &Phase) -> Result<TaskGraph> {
    if cm.options.expert_mode != ExpertMode::Coalesced {
        return Err(Error::InvalidStrategy(
            "the simulator only models coalesced expert execution".into(),
        ));
    }
    let budget = cm.vram_usage(s, phase);
    if !budget.feasible() {
        return Err(Error::InvalidStrategy(format!(
            "strategy needs {:.3e} bytes of VRAM, capacity is {:.3e}",
            budget.used(),
            budget.capacity
        )));
    }
    let expert = cm.expert_stage_time(s, phase)?;
    let system = cm.system;
    let link = &system.link;
    let mbs = cm.batch.num_micro_batches(s.m);
    let mut g = TaskGraph::new();

    let mut op2_outputs = Vec::with_capacity(mbs);
    for mb in 0..mbs {
        let mut prev: Option<usize> = None;
        let mut qkv: Option<usize> = None;
        for op in Op::NON_EXPERT {
            let dev = s.device(op);
            let cost = op_cost(op, phase, cm.model, s.m, 0)?;
            let mut deps: Vec<usize> = prev.into_iter().collect();
            if dev != s.prev_device(op) {
                let load = g.add(
                    format!("mb{mb}/{}.load", op.name()),
                    Resource::link_to(dev),
                    transfer_time(cost.d_x, link),
                    prev,
                );
                deps = vec![load];
            }
            if op == Op::Attention && s.placement[0] == Device::Gpu && dev == Device::Cpu {
                let kv = kv_store_bytes(cm.model, s.m, phase.seq_len)?;
                let store = g.add(
                    format!("mb{mb}/{}.kv_store", op.name()),
                    Resource::LinkD2H,
                    transfer_time(kv, link),
                    qkv,
                );
                deps.push(store);
            }
            let id = g.add(
                format!("mb{mb}/{}", op.name()),
                Resource::compute(dev),
                roofline_time(cost.bytes(), cost.flops, system.device(dev)),
                deps,
            );
            if op == Op::Qkv {
                qkv = Some(id);
            }
            prev = Some(id);
        }
        op2_outputs.extend(prev);
    }

    let merge_dev = s.device(Op::Experts);
    let away = merge_dev.other();
    let migrate = (expert.migration_bytes > 0.0).then(|| {
        g.add(
            "experts.migrate",
            Resource::LinkH2D,
            transfer_time(expert.migration_bytes, link),
            [],
        )
    });
    let has_experts = |dev: Device| match dev {
        Device::Gpu => s.gpu_experts() > 0,
        Device::Cpu => s.exp_c > 0,
    };
    let handoff = (has_experts(away) && expert.handoff_bytes > 0.0).then(|| {
        g.add(
            "experts.handoff",
            Resource::link_to(away),
            transfer_time(expert.handoff_bytes, link),
            op2_outputs.clone(),
        )
    });

    let mut merge_deps = op2_outputs.clone();
    for dev in [Device::Gpu, Device::Cpu] {
        if !has_experts(dev) {
            continue;
        }
        let mut deps = op2_outputs.clone();
        if dev == away {
            deps.extend(handoff);
        }
        if dev == Device::Gpu {
            deps.extend(migrate);
        }
        let latency = match dev {
            Device::Gpu => expert.gpu_latency,
            Device::Cpu => expert.cpu_latency,
        };
        let id = g.add(
            format!("experts.{}", dev),
            Resource::compute(dev),
            latency,
            deps,
        );
        if dev == away {
            let ret = g.add(
                "experts.return",
                Resource::link_to(merge_dev),
                transfer_time(expert.handoff_bytes, link),
                [id],
            );
            merge_deps.push(ret);
        } else {
            merge_deps.push(id);
        }
    }
    g.add("merge", Resource::compute(merge_dev), 0.0, merge_deps);
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Sequential per-layer latency from the cost model.
    pub analytical_s: f64,
    /// Makespan of the overlapped schedule.
    pub simulated_s: f64,
    /// `simulated_s / analytical_s`, or 1 when both are zero.
    pub ratio: f64,
}

impl Comparison {
    pub fn new(analytical_s: f64, simulated_s: f64) -> Self {
        let ratio = if analytical_s == 0.0 && simulated_s == 0.0 {
            1.0
        } else {
            simulated_s / analytical_s
        };
        Comparison {
            analytical_s,
            simulated_s,
            ratio,
        }
    }
}

/// One simulated layer next to its analytical latency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSimulation {
    pub graph: TaskGraph,
    pub timeline: Timeline,
    pub comparison: Comparison,
}

pub fn compare_to_model(cm: &CostModel, s: &AllocationStrategy, phase: &Phase) -> Result<LayerSimulation> {
    let graph = build_task_graph(cm, s, phase)?;
    let timeline = simulate(&graph, cm.system.link.duplex)?;
    let analytical = cm.layer_latency(s, phase)?.total;
    let comparison = Comparison::new(analytical, timeline.makespan);
    Ok(LayerSimulation {
        graph,
        timeline,
        comparison,
    })
}

/// Which part of a plan to replay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimTarget {
    Prefill,
    /// Decode step `t`, 1-based.
    Decode(usize),
}

pub fn simulate_plan(req: &PlanRequest, plan: &Plan, target: SimTarget) -> Result<LayerSimulation> {
    let cm = req.cost_model();
    let (s, phase) = match target {
        SimTarget::Prefill => (&plan.prefill_strategy, Phase::prefill(req.batch.input_len)),
        SimTarget::Decode(t) => {
            if t == 0 || t > req.batch.output_len {
                return Err(Error::InvalidRequest(format!(
                    "decode step {t} is outside 1..={}",
                    req.batch.output_len
                )));
            }
            (&plan.decode_strategy, Phase::decode_step(&req.batch, t))
        }
    };
    compare_to_model(&cm, s, &phase)
}

/// Whole-inference comparison: every layer of prefill and of every decode
/// step simulated and summed.
pub fn simulate_plan_total(req: &PlanRequest, plan: &Plan) -> Result<Comparison> {
    let n = req.model.num_layers as f64;
    let pre = simulate_plan(req, plan, SimTarget::Prefill)?.comparison;
    let mut analytical = n * pre.analytical_s;
    let mut simulated = n * pre.simulated_s;
    for t in 1..=req.batch.output_len {
        let c = simulate_plan(req, plan, SimTarget::Decode(t))?.comparison;
        analytical += n * c.analytical_s;
        simulated += n * c.simulated_s;
    }
    Ok(Comparison::new(analytical, simulated))
}
