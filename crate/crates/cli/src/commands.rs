use std::fmt::Write as _;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use moesched_core::config::{parse_batch, parse_model, parse_system, Override};
use moesched_core::costmodel::{ExpertMode, LayerCost, MigrationPolicy, VramBudget};
use moesched_core::eas::{
    exact_map, hit_ratio_curve, hit_ratio_on_map, read_trace, select_resident_experts, stratify,
    write_trace, ActivationMap, RoutingTrace, StratificationConfig, SyntheticTraceConfig,
};
use moesched_core::planner::{
    plan, sweep_microbatch, Plan, PlanRequest, RestPolicy, SweepRow, SweepSpec,
};
use moesched_core::sim::{simulate_plan, simulate_plan_total, SimTarget};
use moesched_core::{
    AllocationStrategy, BatchConfig, Device, ModelConfig, Op, Phase, PhaseKind, SystemSpec,
};
use serde_json::{json, Value};

use crate::error::{exit, CliError, CliResult};
use crate::report::{now_unix, sha256_hex, InputFile, Report, RunManifest, SCHEMA_VERSION};
use crate::{
    Cli, Command, ConfigArgs, HitratioArgs, Migration, ModeArg, Output, PhaseArg, PlanArgs,
    ReportArgs, RestArg, SearchArgs, SimulateArgs, StratArgs, StratifyArgs, SweepArgs,
    TracegenArgs,
};

pub const THROUGHPUT_DEFINITION: &str =
    "generated tokens (batch_size * output_len) per second of total prefill + decode latency";

/// Reads inputs and remembers their hashes for the manifest.
#[derive(Default)]
struct Ctx {
    inputs: Vec<InputFile>,
}

impl Ctx {
    fn read(&mut self, path: &Path, missing_code: i32) -> CliResult<Vec<u8>> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::new(missing_code, format!("{}: {e}", path.display())))?;
        self.inputs.push(InputFile {
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
        });
        Ok(bytes)
    }

    fn read_config(&mut self, path: &Path) -> CliResult<String> {
        let bytes = self.read(path, exit::CONFIG)?;
        String::from_utf8(bytes)
            .map_err(|_| CliError::new(exit::CONFIG, format!("{}: not UTF-8", path.display())))
    }

    fn read_trace(&mut self, path: &Path) -> CliResult<RoutingTrace> {
        let bytes = self.read(path, exit::GENERIC)?;
        read_trace(BufReader::new(bytes.as_slice())).map_err(|e| CliError::in_file(path, e))
    }
}

struct Produced {
    human: String,
    result: Value,
    files: Vec<(PathBuf, Vec<u8>)>,
    report_path: Option<PathBuf>,
}

pub fn execute(cli: &Cli, args: Vec<String>) -> CliResult<Output> {
    let mut ctx = Ctx::default();
    let seed = cli.seed;
    let produced = match &cli.command {
        Command::Plan(a) => cmd_plan(&mut ctx, a, seed)?,
        Command::Sweep(a) => cmd_sweep(&mut ctx, a)?,
        Command::Tracegen(a) => cmd_tracegen(a, seed)?,
        Command::Stratify(a) => cmd_stratify(&mut ctx, a, seed)?,
        Command::Hitratio(a) => cmd_hitratio(&mut ctx, a, seed)?,
        Command::Simulate(a) => cmd_simulate(&mut ctx, a)?,
        Command::Report(a) => return cmd_report(a),
    };
    let report = Report {
        schema_version: SCHEMA_VERSION,
        manifest: RunManifest {
            command: cli.command.name().to_owned(),
            args,
            inputs: ctx.inputs,
            seed,
            version: env!("CARGO_PKG_VERSION").to_owned(),
            timestamp_unix: now_unix(),
        },
        result: produced.result,
    };
    let mut files = produced.files;
    if let Some(path) = produced.report_path {
        files.push((path, report.to_pretty().into_bytes()));
    }
    Ok(Output {
        human: produced.human,
        report: Some(report),
        files,
    })
}

fn overrides(raw: &[String]) -> CliResult<Vec<Override>> {
    raw.iter()
        .map(|s| s.parse().map_err(|e| CliError::usage(format!("--set {s}: {e}"))))
        .collect()
}

fn load_configs(
    ctx: &mut Ctx,
    system: &Path,
    model: &Path,
    batch: &Path,
    raw_overrides: &[String],
) -> CliResult<(SystemSpec, ModelConfig, BatchConfig)> {
    let ov = overrides(raw_overrides)?;
    let text = ctx.read_config(system)?;
    let system_spec = parse_system(&text, &ov).map_err(|e| CliError::in_file(system, e))?;
    let text = ctx.read_config(model)?;
    let model_cfg = parse_model(&text, &ov).map_err(|e| CliError::in_file(model, e))?;
    let text = ctx.read_config(batch)?;
    let batch_cfg = parse_batch(&text, &ov).map_err(|e| CliError::in_file(batch, e))?;
    Ok((system_spec, model_cfg, batch_cfg))
}

fn load_config_args(ctx: &mut Ctx, c: &ConfigArgs) -> CliResult<(SystemSpec, ModelConfig, BatchConfig)> {
    load_configs(ctx, &c.system, &c.model, &c.batch, &c.overrides)
}

fn parse_force(raw: &str) -> CliResult<(usize, Device)> {
    let bad = || CliError::usage(format!("--force {raw}: expected x0|x1|x2=cpu|gpu"));
    let (k, v) = raw.split_once('=').ok_or_else(bad)?;
    let idx = match k.trim() {
        "x0" => 0,
        "x1" => 1,
        "x2" => 2,
        _ => return Err(bad()),
    };
    let dev: Device = v.trim().parse().map_err(|_| bad())?;
    Ok((idx, dev))
}

fn stratification_config(s: &StratArgs, seed: u64) -> StratificationConfig {
    StratificationConfig {
        num_clusters: s.clusters,
        sample_ratio: s.ratio,
        seed,
        max_kmeans_iters: s.max_iters,
        ..Default::default()
    }
}

fn apply_search(req: &mut PlanRequest, s: &SearchArgs) -> CliResult<()> {
    if !s.m.is_empty() {
        req.m_candidates = s.m.clone();
    }
    for f in &s.force {
        let (i, d) = parse_force(f)?;
        req.constraints.force_placement[i] = Some(d);
    }
    req.constraints.forbid_cpu_attention = s.forbid_cpu_attention;
    req.constraints.vram_slack_fraction = s.vram_slack;
    req.constraints.fixed_resident = s.resident;
    req.options.migration = match s.migration {
        Migration::PerPass => MigrationPolicy::PerPass,
        Migration::ReuseAcrossDecode => MigrationPolicy::ReuseAcrossDecode,
    };
    req.options.workspace_fraction = s.workspace_fraction;
    Ok(())
}

fn layer_breakdown(req: &PlanRequest, p: &Plan) -> CliResult<Value> {
    let cm = req.cost_model();
    let prefill = cm.layer_latency(&p.prefill_strategy, &Phase::prefill(req.batch.input_len))?;
    let decode = if req.batch.output_len > 0 {
        let first = cm.layer_latency(&p.decode_strategy, &Phase::decode_step(&req.batch, 1))?;
        let last = cm.layer_latency(
            &p.decode_strategy,
            &Phase::decode_step(&req.batch, req.batch.output_len),
        )?;
        json!({ "first_step": first, "last_step": last })
    } else {
        Value::Null
    };
    Ok(json!({ "prefill": prefill, "decode": decode }))
}

fn cmd_plan(ctx: &mut Ctx, a: &PlanArgs, seed: u64) -> CliResult<Produced> {
    let (system, model, batch) = load_config_args(ctx, &a.config)?;
    let mut req = PlanRequest::new(system, model, batch);
    apply_search(&mut req, &a.search)?;
    let mut map_source = Value::Null;
    if let Some(path) = &a.trace {
        let trace = ctx.read_trace(path)?;
        let strat = stratify(&trace, &stratification_config(&a.strat, seed))
            .map_err(|e| CliError::in_file(path, e))?;
        req = req
            .with_activation_map(&strat.probed)
            .map_err(|e| CliError::in_file(path, e))?;
        map_source = json!({ "trace": path, "prototypes": strat.prototypes.len() });
    } else if let Some(path) = &a.map {
        let bytes = ctx.read(path, exit::GENERIC)?;
        let map: ActivationMap = serde_json::from_slice(&bytes).map_err(|e| {
            CliError::new(exit::PARSE, format!("{}: line {}: {e}", path.display(), e.line()))
        })?;
        req = req.with_activation_map(&map).map_err(|e| CliError::in_file(path, e))?;
        map_source = json!({ "map": path });
    }
    let p = plan(&req)?;
    let layers = layer_breakdown(&req, &p)?;
    let human = format_plan(&req, &p, &layers);
    let result = json!({
        "request": req,
        "plan": p,
        "layers": layers,
        "activation_map": map_source,
        "throughput_definition": THROUGHPUT_DEFINITION,
    });
    Ok(Produced {
        human,
        result,
        files: vec![],
        report_path: a.out.clone(),
    })
}

fn strategy_line(s: &AllocationStrategy) -> String {
    let dev = |d: Device| d.to_string().to_uppercase();
    format!(
        "qkv={} attn={} out={}  m={}  experts: resident={} migrated={} cpu={}",
        dev(s.placement[0]),
        dev(s.placement[1]),
        dev(s.placement[2]),
        s.m,
        s.exp_r,
        s.exp_m,
        s.exp_c
    )
}

fn format_layer(out: &mut String, title: &str, lc: &LayerCost) {
    let _ = writeln!(out, "  {title}");
    let _ = writeln!(out, "    {:<12} {:>12} {:>12} {:>12}", "op", "load_s", "comp_s", "store_s");
    for (op, t) in Op::ALL.iter().zip(&lc.ops) {
        let _ = writeln!(
            out,
            "    {:<12} {:>12.4e} {:>12.4e} {:>12.4e}",
            op.name(),
            t.t_load,
            t.t_comp,
            t.t_store
        );
    }
    let _ = writeln!(out, "    {:<12} {:>12.4e}", "total", lc.total);
}

fn format_vram(out: &mut String, title: &str, v: &VramBudget) {
    let gb = |b: f64| b / 1e9 + 0.0;
    let _ = writeln!(
        out,
        "  {title:<8} experts {:>8.3}  weights {:>8.3}  buffers {:>8.3}  kv {:>8.3}  workspace {:>8.3}  = {:>8.3} / {:.3} GB",
        gb(v.resident_expert_bytes),
        gb(v.non_moe_weight_bytes),
        gb(v.intermediate_bytes),
        gb(v.kv_cache_bytes),
        gb(v.workspace_bytes),
        gb(v.used()),
        gb(v.capacity)
    );
}

fn format_plan(req: &PlanRequest, p: &Plan, layers: &Value) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "prefill  {}", strategy_line(&p.prefill_strategy));
    let _ = writeln!(out, "decode   {}", strategy_line(&p.decode_strategy));
    let _ = writeln!(out, "resident experts per layer: {}", p.resident_experts);
    let _ = writeln!(out);
    let _ = writeln!(out, "per-layer latency");
    if let Ok(lc) = serde_json::from_value::<LayerCost>(layers["prefill"].clone()) {
        format_layer(&mut out, "prefill", &lc);
    }
    if let Ok(lc) = serde_json::from_value::<LayerCost>(layers["decode"]["first_step"].clone()) {
        format_layer(&mut out, "decode step 1", &lc);
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "VRAM");
    format_vram(&mut out, "prefill", &p.vram_prefill);
    format_vram(&mut out, "decode", &p.vram_decode);
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "predicted: prefill {:.4} s, decode {:.4} s, total {:.4} s",
        p.predicted.prefill_s, p.predicted.decode_s, p.predicted.total_s
    );
    match p.predicted.tokens_per_s {
        Some(t) => {
            let _ = writeln!(out, "throughput: {t:.2} tokens/s ({THROUGHPUT_DEFINITION})");
        }
        None => {
            let _ = writeln!(out, "throughput: undefined (output_len = {})", req.batch.output_len);
        }
    }
    let _ = writeln!(
        out,
        "searched {} candidates, {} feasible",
        p.search_stats.candidates_enumerated, p.search_stats.feasible_count
    );
    out
}

fn parse_placement(raw: &str) -> CliResult<[Device; 3]> {
    let devs: Vec<Device> = raw
        .chars()
        .map(|c| c.to_string().parse::<Device>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::usage(format!("--placement {raw}: expected three of G/C")))?;
    devs.try_into()
        .map_err(|_| CliError::usage(format!("--placement {raw}: expected three of G/C")))
}

pub fn sweep_csv(rows: &[SweepRow]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory CSV");
    }
    if rows.is_empty() {
        w.write_record(["m", "expert_s", "nonexpert_s", "total_s"]).expect("in-memory CSV");
    }
    w.into_inner().expect("in-memory CSV")
}

fn cmd_sweep(ctx: &mut Ctx, a: &SweepArgs) -> CliResult<Produced> {
    let (system, model, batch) = load_config_args(ctx, &a.config)?;
    let experts = model.experts_per_layer;
    let mut req = PlanRequest::new(system, model, batch);
    if !a.m.is_empty() {
        req.m_candidates = a.m.clone();
    }
    let spec = SweepSpec {
        placement: parse_placement(&a.placement)?,
        resident: a.resident.unwrap_or(experts),
        rest: match a.rest {
            RestArg::Cpu => RestPolicy::Cpu,
            RestArg::Migrate => RestPolicy::Migrate,
        },
        phase: match a.phase {
            PhaseArg::Prefill => PhaseKind::Prefill,
            PhaseArg::Decode => PhaseKind::Decode,
        },
    };
    let mode = match a.mode {
        ModeArg::Coalesced => ExpertMode::Coalesced,
        ModeArg::Microbatched => ExpertMode::MicroBatched,
    };
    let rows = sweep_microbatch(&req, &spec, mode)?;
    let csv = sweep_csv(&rows);
    let mut files = vec![];
    let human = match &a.out {
        Some(path) => {
            files.push((path.clone(), csv));
            format!("wrote {} rows to {}\n", rows.len(), path.display())
        }
        None => String::from_utf8(csv).expect("CSV is UTF-8"),
    };
    Ok(Produced {
        human,
        result: json!({ "mode": mode, "spec": spec, "rows": rows }),
        files,
        report_path: a.report.clone(),
    })
}

fn cmd_tracegen(a: &TracegenArgs, seed: u64) -> CliResult<Produced> {
    let cfg = SyntheticTraceConfig {
        num_samples: a.samples,
        embedding_dim: a.dim,
        num_layers: a.layers,
        experts_per_layer: a.experts,
        top_k: a.top_k,
        num_latent_topics: a.topics,
        zipf_exponent: a.zipf,
        seed,
        tokens_per_sample: a.tokens,
        topic_spread: a.topic_spread,
        rank_jitter: a.rank_jitter,
    };
    let trace = moesched_core::eas::generate_synthetic_trace(&cfg).map_err(|e| {
        let mut err = CliError::from(e);
        err.code = exit::USAGE;
        err
    })?;
    let mut bytes = Vec::new();
    write_trace(&trace, &mut bytes).expect("in-memory write");
    let sha = sha256_hex(&bytes);
    let human = format!(
        "wrote {} samples ({} layers x {} experts) to {}\n",
        trace.samples.len(),
        cfg.num_layers,
        cfg.experts_per_layer,
        a.out.display()
    );
    Ok(Produced {
        human,
        result: json!({ "config": cfg, "samples": trace.samples.len(), "trace_sha256": sha }),
        files: vec![(a.out.clone(), bytes)],
        report_path: a.report.clone(),
    })
}

/// Largest per-expert frequency difference between two maps.
fn max_frequency_gap(a: &ActivationMap, b: &ActivationMap) -> f64 {
    (0..a.num_layers())
        .flat_map(|l| {
            a.frequencies(l)
                .into_iter()
                .zip(b.frequencies(l))
                .map(|(x, y)| (x - y).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

fn cmd_stratify(ctx: &mut Ctx, a: &StratifyArgs, seed: u64) -> CliResult<Produced> {
    let trace = ctx.read_trace(&a.trace)?;
    let cfg = stratification_config(&a.strat, seed);
    let strat = stratify(&trace, &cfg).map_err(|e| CliError::in_file(&a.trace, e))?;
    let exact = exact_map(&trace);
    let experts = exact.experts_per_layer();
    let capacity = a.capacity.unwrap_or(experts / 4).min(experts);
    let residency = strat.residency(capacity);
    let gap = max_frequency_gap(&strat.probed, &exact);
    let hit = hit_ratio_on_map(&exact, &residency);
    let oracle = hit_ratio_on_map(&exact, &select_resident_experts(&exact, capacity));
    let human = format!(
        "{} clusters, {} prototypes of {} samples\nmax frequency gap vs exact map: {gap:.6}\n\
         capacity {capacity}/{experts}: hit ratio {hit:.4} (exact-map optimum {oracle:.4})\n",
        cfg.num_clusters,
        strat.prototypes.len(),
        trace.samples.len()
    );
    let result = json!({
        "config": cfg,
        "iterations": strat.clustering.iterations,
        "distortion": strat.clustering.distortion(),
        "prototypes": strat.prototypes,
        "probed_map": strat.probed,
        "max_frequency_gap": gap,
        "capacity": capacity,
        "residency": residency,
        "hit_ratio": hit,
        "oracle_hit_ratio": oracle,
    });
    Ok(Produced {
        human,
        result,
        files: vec![],
        report_path: a.out.clone(),
    })
}

fn cmd_hitratio(ctx: &mut Ctx, a: &HitratioArgs, seed: u64) -> CliResult<Produced> {
    let trace = ctx.read_trace(&a.trace)?;
    let cfg = stratification_config(&a.strat, seed);
    let strat = stratify(&trace, &cfg).map_err(|e| CliError::in_file(&a.trace, e))?;
    let experts = trace.meta.experts_per_layer;
    let mut caps = if a.capacities.is_empty() {
        vec![0, experts / 4, experts / 2, 3 * experts / 4, experts]
    } else {
        a.capacities.clone()
    };
    caps.sort_unstable();
    caps.dedup();
    let points = hit_ratio_curve(&trace, &strat, &caps, a.baseline_seeds, seed);
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in &points {
        w.serialize(p).expect("in-memory CSV");
    }
    let csv = w.into_inner().expect("in-memory CSV");
    let mut human = format!("{:>9} {:>8} {:>12} {:>8}\n", "capacity", "eas", "random_mean", "oracle");
    for p in &points {
        let _ = writeln!(
            human,
            "{:>9} {:>8.4} {:>12.4} {:>8.4}",
            p.capacity, p.eas, p.random_mean, p.oracle
        );
    }
    let mut files = vec![];
    if let Some(path) = &a.out {
        files.push((path.clone(), csv));
    }
    Ok(Produced {
        human,
        result: json!({ "config": cfg, "baseline_seeds": a.baseline_seeds, "points": points }),
        files,
        report_path: a.report.clone(),
    })
}

fn cmd_simulate(ctx: &mut Ctx, a: &SimulateArgs) -> CliResult<Produced> {
    let (req, p) = match &a.plan {
        Some(path) => {
            let bytes = ctx.read(path, exit::GENERIC)?;
            let malformed = |e: serde_json::Error| {
                CliError::new(
                    exit::PARSE,
                    format!("{}: malformed plan report at line {}: {e}", path.display(), e.line()),
                )
            };
            let report: Report = serde_json::from_slice(&bytes).map_err(malformed)?;
            let req: PlanRequest =
                serde_json::from_value(report.result["request"].clone()).map_err(malformed)?;
            let p: Plan = serde_json::from_value(report.result["plan"].clone()).map_err(malformed)?;
            (req, p)
        }
        None => {
            let need = |p: &Option<PathBuf>, flag: &str| {
                p.clone()
                    .ok_or_else(|| CliError::usage(format!("--{flag} is required without --plan")))
            };
            let (system, model, batch) = load_configs(
                ctx,
                &need(&a.system, "system")?,
                &need(&a.model, "model")?,
                &need(&a.batch, "batch")?,
                &a.overrides,
            )?;
            let req = PlanRequest::new(system, model, batch);
            let p = plan(&req)?;
            (req, p)
        }
    };
    let target = match a.phase {
        PhaseArg::Prefill => SimTarget::Prefill,
        PhaseArg::Decode => SimTarget::Decode(a.step),
    };
    let sim = simulate_plan(&req, &p, target).map_err(|e| {
        let mut err = CliError::from(e);
        if matches!(err.code, exit::GENERIC) {
            err.code = exit::USAGE;
        }
        err
    })?;
    let total = if a.all_steps {
        Some(simulate_plan_total(&req, &p)?)
    } else {
        None
    };
    let c = sim.comparison;
    let mut human = format!(
        "{} tasks, makespan {:.6e} s vs sequential model {:.6e} s (ratio {:.4})\n",
        sim.graph.len(),
        c.simulated_s,
        c.analytical_s,
        c.ratio
    );
    for (r, busy) in sim.timeline.utilization() {
        let frac = if c.simulated_s > 0.0 { busy / c.simulated_s } else { 0.0 };
        let _ = writeln!(human, "  {:<4} busy {:.6e} s ({:.1}%)", r.name(), busy, 100.0 * frac);
    }
    if let Some(t) = &total {
        let _ = writeln!(
            human,
            "all steps: simulated {:.6e} s vs model {:.6e} s (ratio {:.4})",
            t.simulated_s, t.analytical_s, t.ratio
        );
    }
    let mut files = vec![];
    if let Some(path) = &a.timeline {
        let mut bytes = serde_json::to_vec_pretty(&sim.timeline.to_trace_events()).expect("serializes");
        bytes.push(b'\n');
        files.push((path.clone(), bytes));
    }
    let result = json!({
        "target": target,
        "comparison": c,
        "utilization": sim.timeline.utilization(),
        "timeline": sim.timeline,
        "all_steps": total,
    });
    Ok(Produced {
        human,
        result,
        files,
        report_path: a.out.clone(),
    })
}

fn cmd_report(a: &ReportArgs) -> CliResult<Output> {
    let report = Report::load(&a.file)?;
    let m = &report.manifest;
    let mut human = format!(
        "{} report (schema {}), moesched {}, seed {}\n  args: {}\n",
        m.command,
        report.schema_version,
        m.version,
        m.seed,
        m.args.join(" ")
    );
    let mut changed = vec![];
    for input in &m.inputs {
        let state = match std::fs::read(&input.path) {
            Ok(bytes) if sha256_hex(&bytes) == input.sha256 => "unchanged",
            Ok(_) => {
                changed.push(input.path.display().to_string());
                "CHANGED"
            }
            Err(_) => {
                changed.push(input.path.display().to_string());
                "MISSING"
            }
        };
        let _ = writeln!(human, "  input {} {}", input.path.display(), state);
    }
    if a.verify {
        if !changed.is_empty() {
            return Err(CliError::new(
                exit::GENERIC,
                format!("cannot verify: inputs differ from the manifest: {}", changed.join(", ")),
            ));
        }
        if m.version != env!("CARGO_PKG_VERSION") {
            let _ = writeln!(human, "  note: report was written by version {}", m.version);
        }
        let argv = std::iter::once("moesched".to_owned()).chain(m.args.iter().cloned());
        let rerun = crate::run(argv)?;
        let fresh = rerun
            .report
            .ok_or_else(|| CliError::new(exit::GENERIC, "manifest command produced no report"))?;
        if fresh.canonical() != report.canonical() {
            return Err(CliError::new(
                exit::GENERIC,
                format!("{}: re-running the manifest gives a different result", a.file.display()),
            ));
        }
        let _ = writeln!(human, "verified: re-run reproduces the report");
    }
    Ok(Output {
        human,
        report: None,
        files: vec![],
    })
}
