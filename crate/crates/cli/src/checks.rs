//! Property suite behind `validate`.

use std::fmt;

use lowrank_tp::cost::block_volume_for;
use lowrank_tp::norm::recovery_identity_gap;
use lowrank_tp::plan::{apply_grouping, NormStrategy};
use lowrank_tp::tensor::{derive_seed, seeded_fill, split_axis};
use lowrank_tp::{Pass, PlanOptions, Strategy};

use crate::analysis::{
    analyze, build_plan, checkpoint, executes, expected_stack_records, simulate, stat_calls, traced_block_volume,
    TOLERANCE,
};
use crate::error::{CliError, Result};
use crate::scenario::Resolved;

pub const IDENTITY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    /// Names the invariant when it holds and the violation when it does not.
    pub label: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(pass: bool, holds: &str, broken: &str, detail: String) -> Self {
        Self {
            label: if pass { holds } else { broken }.to_string(),
            pass,
            detail,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        if self.detail.is_empty() {
            write!(f, "{}: {verdict}", self.label)
        } else {
            write!(f, "{}: {verdict} ({})", self.label, self.detail)
        }
    }
}

/// Run every property that applies to the scenario.
pub fn validate(r: &Resolved) -> Result<Vec<Check>> {
    if !executes(r) {
        return Err(CliError::Plan(format!(
            "validate needs an executable scenario: d={} exceeds the execution cap {}",
            r.cfg.d, r.exec_cap
        )));
    }
    let a = analyze(r)?;
    let p = &a.plan;
    let sim = a.simulated.as_ref().expect("executed scenario");
    let trace = &sim.exec.trace;
    let layers = r.cfg.layers;
    let mut out = Vec::new();

    let err = sim.exec.y.max_abs_diff(&sim.reference)?;
    out.push(Check::new(
        err <= TOLERANCE,
        "oracle equivalence",
        "oracle≠simulation",
        format!("max abs error {err:.3e}"),
    ));

    let traced = traced_block_volume(trace, layers);
    let formula = block_volume_for(r.strategy, &r.cfg, &r.shape);
    out.push(Check::new(
        traced == formula,
        "trace == formula",
        "trace≠formula",
        format!("traced {traced}, formula {formula}"),
    ));

    let expected = expected_stack_records(p);
    out.push(Check::new(
        trace.records == expected,
        "trace == planned collectives",
        "trace≠plan",
        format!("{} traced, {} planned", trace.records.len(), expected.len()),
    ));

    let stats = stat_calls(&trace.records);
    let want = if p.norm == NormStrategy::Sync { 2 * layers } else { 0 };
    out.push(Check::new(
        stats == want,
        &format!("standalone stat collectives == {want}"),
        &format!("standalone stat collectives != {want}"),
        format!("{stats} traced"),
    ));

    let x = sim.x.as_matrix();
    let w = seeded_fill(&[r.cfg.d / r.shape.tp, r.cfg.r], derive_seed(r.seed, 41));
    let mut gap = 0.0f64;
    for shard in split_axis(&x, 1, r.shape.tp)? {
        gap = gap.max(recovery_identity_gap(&shard, &x, &w)?);
    }
    out.push(Check::new(
        gap <= IDENTITY_TOLERANCE,
        "online norm recovery identity",
        "online norm recovery identity broken",
        format!("gap {gap:.3e}"),
    ));

    if p.options.lowrank_ckpt {
        let (ck, ck_trace) = checkpoint(p, sim)?;
        let n = ck.report.reforward_collectives;
        let counted = ck_trace.collective_count(Pass::Reforward) as u64;
        if r.strategy == Strategy::Btp {
            out.push(Check::new(
                n == 0 && counted == 0,
                "reforward collectives == 0",
                "reforward collectives != 0",
                String::new(),
            ));
        } else {
            out.push(Check::new(
                n >= 1 && counted == n,
                "reforward collectives >= 1",
                "reforward collectives == 0",
                format!("{n} collectives"),
            ));
        }
        out.push(Check::new(
            ck.output_bit_identical,
            "checkpointed output bit-identical",
            "checkpointed output differs",
            String::new(),
        ));
    }

    if p.options.grouping {
        let ungrouped = Resolved {
            options: PlanOptions {
                grouping: false,
                ..r.options
            },
            ..r.clone()
        };
        let base = build_plan(&ungrouped)?;
        let base_sim = simulate(&ungrouped, &base)?;
        let gap = sim.exec.y.max_abs_diff(&base_sim.exec.y)?;
        out.push(Check::new(
            gap <= TOLERANCE,
            "grouped output matches ungrouped",
            "grouped output differs",
            format!("max abs {gap:.3e}"),
        ));
        let (gv, bv) = (traced, traced_block_volume(&base_sim.exec.trace, layers));
        out.push(Check::new(gv == bv, "grouped volume unchanged", "grouped volume changed", format!("{gv} vs {bv}")));
        let regrouped = apply_grouping(&base)?;
        let (gl, bl) = (regrouped.gemm_launches_per_block(), base.gemm_launches_per_block());
        out.push(Check::new(
            gl < bl,
            "grouped GEMM launches lower",
            "grouped GEMM launches not lower",
            format!("{gl} vs {bl}"),
        ));
    }

    let again = simulate(r, p)?;
    out.push(Check::new(
        again.exec.y.bit_eq(&sim.exec.y) && again.exec.trace == *trace,
        "rerun bit-identical",
        "rerun differs",
        String::new(),
    ));
    Ok(out)
}
