//! One scenario end to end: plan, cost model, optional execution, report.

use std::io::Write;
use std::path::Path;

use lowrank_tp::ckpt::{run_with_ckpt, CkptPolicy, CkptReport};
use lowrank_tp::cost::{block_volume_for, ratio_report, CostReport, Exact};
use lowrank_tp::model::{build_stack, input_activations, reference_forward, DecoderBlockWeights};
use lowrank_tp::plan::{enumerate_collectives, NormStrategy, Step, FINALE};
use lowrank_tp::sim::{execute_forward, execute_stack, Execution};
use lowrank_tp::{
    plan, CollectiveRecord, ModelConfig, Pass, PlanOptions, RunShape, ShardPlan, Strategy, Tag, Tensor, Trace,
    Variant,
};
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::scenario::{Fault, Flags, Resolved};

pub const SCHEMA_VERSION: u32 = 1;
pub const TOLERANCE: f64 = 1e-9;
pub const SKIPPED_NOTE: &str = "simulation skipped: dims exceed cap";

#[derive(Debug, Clone, Serialize)]
pub struct Metadata {
    pub flags: Flags,
    pub strategy: Strategy,
    pub variant: Variant,
    pub preset: Option<String>,
    pub model: ModelConfig,
    pub shape: RunShape,
    pub seed: u64,
    pub element_bytes: usize,
    pub exec_cap: usize,
    pub fault: Option<Fault>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PlanSummary {
    /// Options in effect after fallbacks.
    pub options: PlanOptions,
    pub norm: NormStrategy,
    pub layout: Vec<String>,
    pub gemm_launches_per_block: u64,
    pub collectives_per_block: usize,
    pub stat_collectives_per_block: usize,
    pub planned_block_volume: u64,
    pub formula_block_volume: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationSummary {
    pub executed: bool,
    pub note: Option<String>,
    pub layers: usize,
    pub traced_block_volume: Option<u64>,
    pub volume_matches_formula: Option<bool>,
    pub forward_collectives: Option<usize>,
    pub stat_collectives: Option<usize>,
    pub gemm_launches: Option<u64>,
    pub gemm_flops: Option<u64>,
    pub max_abs_error: Option<f64>,
    pub tolerance: f64,
    pub oracle_pass: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckpointSummary {
    #[serde(flatten)]
    pub report: CkptReport,
    pub eff: Option<Exact>,
    pub eff_flops_only: Option<Exact>,
    pub output_bit_identical: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub scenario: String,
    pub metadata: Metadata,
    pub warnings: Vec<String>,
    pub plan: PlanSummary,
    pub cost: CostReport,
    pub simulation: SimulationSummary,
    pub checkpoint: Option<CheckpointSummary>,
}

impl Report {
    /// The simulation contradicts the oracle or the volume formula.
    pub fn mismatch(&self) -> Option<String> {
        let s = &self.simulation;
        if s.oracle_pass == Some(false) {
            return Some(format!(
                "output differs from the reference by {:e} (tolerance {:e})",
                s.max_abs_error.unwrap_or(f64::NAN),
                s.tolerance
            ));
        }
        if s.volume_matches_formula == Some(false) {
            return Some(format!(
                "traced block volume {} differs from formula {}",
                s.traced_block_volume.unwrap_or(0),
                self.plan.formula_block_volume
            ));
        }
        None
    }
}

/// Simulated stack output with the oracle it is judged against.
pub struct Simulated {
    pub exec: Execution,
    pub reference: Tensor,
    pub blocks: Vec<DecoderBlockWeights>,
    pub x: Tensor,
}

pub struct Analysis {
    pub report: Report,
    /// Forward trace of the stack, followed by any re-forward records.
    pub trace: Trace,
    pub plan: ShardPlan,
    pub simulated: Option<Simulated>,
}

/// Build the plan for a scenario, with any injected plan fault applied.
pub fn build_plan(r: &Resolved) -> Result<ShardPlan> {
    let mut p = plan(r.strategy, r.variant, &r.cfg, &r.shape, r.options)?.with_element_bytes(r.element_bytes);
    if r.fault == Some(Fault::CorruptPlan) {
        p.epilogue.push(Step::Gather {
            src: "x".into(),
            dst: "x.extra".into(),
            width: r.cfg.d,
            tag: Tag::Block,
        });
    }
    Ok(p)
}

pub fn executes(r: &Resolved) -> bool {
    r.cfg.d <= r.exec_cap
}

/// Chained single-device forward over a stack.
pub fn reference_stack(blocks: &[DecoderBlockWeights], x: &Tensor) -> Result<Tensor> {
    let mut y = x.clone();
    let mut h = None;
    for b in blocks {
        let (out, next) = reference_forward(b, &y, h.as_ref())?;
        y = out;
        h = next;
    }
    Ok(y)
}

pub fn simulate(r: &Resolved, p: &ShardPlan) -> Result<Simulated> {
    let blocks = build_stack(&r.cfg, r.variant, r.seed);
    let x = input_activations(&r.cfg, &r.shape, r.seed);
    let fed = match r.fault {
        Some(Fault::PerturbInput) => x.map(|v| v + 1e-6),
        _ => x.clone(),
    };
    let exec = execute_stack(p, &blocks, &fed)?;
    let reference = reference_stack(&blocks, &x)?;
    Ok(Simulated {
        exec,
        reference,
        blocks,
        x,
    })
}

fn block_records(p: &ShardPlan) -> Vec<CollectiveRecord> {
    enumerate_collectives(p).into_iter().filter(|c| c.chunk_id != FINALE).collect()
}

/// Forward records a stack run should emit: every block's collectives in
/// order, then the finale.
pub fn expected_stack_records(p: &ShardPlan) -> Vec<CollectiveRecord> {
    let all = enumerate_collectives(p);
    let (block, finale): (Vec<_>, Vec<_>) = all.into_iter().partition(|c| c.chunk_id != FINALE);
    let mut out = Vec::new();
    for _ in 0..p.cfg.layers {
        out.extend(block.iter().cloned());
    }
    out.extend(finale);
    out
}

pub fn stat_calls(records: &[CollectiveRecord]) -> usize {
    records.iter().filter(|c| c.tag == Tag::Stat).count()
}

fn block_volume_of(records: &[CollectiveRecord]) -> u64 {
    records
        .iter()
        .filter(|c| c.tag == Tag::Block && c.chunk_id != FINALE && c.pass == Pass::Forward)
        .map(|c| c.elements)
        .sum()
}

pub fn traced_block_volume(trace: &Trace, layers: usize) -> u64 {
    block_volume_of(&trace.records) / layers as u64
}

/// Checkpoint the first block and compare against its plain forward.
pub fn checkpoint(p: &ShardPlan, sim: &Simulated) -> Result<(CheckpointSummary, Trace)> {
    let block = &sim.blocks[0];
    let plain = execute_forward(p, block, &sim.x)?;
    let (y, trace, report) = run_with_ckpt(p, block, &sim.x, CkptPolicy::LowRankBoundary)?;
    let summary = CheckpointSummary {
        eff: report.eff().ok().map(Exact::from),
        eff_flops_only: report.eff_flops_only().ok().map(Exact::from),
        output_bit_identical: y.bit_eq(&plain.y),
        report,
    };
    Ok((summary, trace))
}

pub fn analyze(r: &Resolved) -> Result<Analysis> {
    let p = build_plan(r)?;
    // a corrupted fixture stands for a plan damaged after validation
    if r.fault != Some(Fault::CorruptPlan) {
        p.validate()?;
    }
    let mut warnings = r.warnings.clone();
    warnings.extend(p.warnings.iter().cloned());
    let cost = ratio_report(&r.cfg, &r.shape, r.element_bytes)?;
    let formula = block_volume_for(r.strategy, &r.cfg, &r.shape);
    let planned = block_records(&p);
    let plan_summary = PlanSummary {
        options: p.options,
        norm: p.norm,
        layout: p.to_string().lines().map(str::to_string).collect(),
        gemm_launches_per_block: p.gemm_launches_per_block(),
        collectives_per_block: planned.len(),
        stat_collectives_per_block: stat_calls(&planned),
        planned_block_volume: block_volume_of(&planned),
        formula_block_volume: formula,
    };
    let layers = r.cfg.layers;
    let mut simulation = SimulationSummary {
        executed: false,
        note: None,
        layers,
        traced_block_volume: None,
        volume_matches_formula: None,
        forward_collectives: None,
        stat_collectives: None,
        gemm_launches: None,
        gemm_flops: None,
        max_abs_error: None,
        tolerance: TOLERANCE,
        oracle_pass: None,
    };
    let mut checkpoint_summary = None;
    let mut trace = Trace {
        records: expected_stack_records(&p),
        ..Trace::default()
    };
    let mut simulated = None;
    if executes(r) {
        let sim = simulate(r, &p)?;
        let traced = traced_block_volume(&sim.exec.trace, layers);
        let err = sim.exec.y.max_abs_diff(&sim.reference)?;
        simulation = SimulationSummary {
            executed: true,
            traced_block_volume: Some(traced),
            volume_matches_formula: Some(block_volume_of(&sim.exec.trace.records) == formula * layers as u64),
            forward_collectives: Some(sim.exec.trace.collective_count(Pass::Forward)),
            stat_collectives: Some(stat_calls(&sim.exec.trace.records)),
            gemm_launches: Some(sim.exec.trace.forward.gemm_launches),
            gemm_flops: Some(sim.exec.trace.forward.gemm_flops),
            max_abs_error: Some(err),
            oracle_pass: Some(err <= TOLERANCE),
            ..simulation
        };
        trace = sim.exec.trace.clone();
        if p.options.lowrank_ckpt {
            let (summary, ck) = checkpoint(&p, &sim)?;
            trace.records.extend(ck.records.into_iter().filter(|c| c.pass == Pass::Reforward));
            trace.reforward = ck.reforward;
            checkpoint_summary = Some(summary);
        }
        simulated = Some(sim);
    } else {
        simulation.note = Some(SKIPPED_NOTE.into());
        if p.options.lowrank_ckpt {
            warnings.push("checkpoint efficiency needs an executed run; skipped".into());
        }
    }
    let report = Report {
        schema_version: SCHEMA_VERSION,
        scenario: r.name.clone(),
        metadata: Metadata {
            flags: r.flags,
            strategy: r.strategy,
            variant: r.variant,
            preset: r.preset.clone(),
            model: r.cfg,
            shape: r.shape,
            seed: r.seed,
            element_bytes: r.element_bytes,
            exec_cap: r.exec_cap,
            fault: r.fault,
        },
        warnings,
        plan: plan_summary,
        cost,
        simulation,
        checkpoint: checkpoint_summary,
    };
    Ok(Analysis {
        report,
        trace,
        plan: p,
        simulated,
    })
}

pub fn report_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write_trace_csv(trace: &Trace, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    if trace.records.is_empty() {
        w.write_record(lowrank_tp::comm::TRACE_COLUMNS).map_err(|e| CliError::Io(e.to_string()))?;
    }
    for row in trace.csv_rows() {
        w.serialize(row).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Write `report.json` and `trace.csv` under `out`.
pub fn write_outputs(a: &Analysis, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    write_text(&out.join("report.json"), &report_json(&a.report)?)?;
    write_trace_csv(&a.trace, &out.join("trace.csv"))
}
