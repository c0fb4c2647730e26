//! Side-by-side table over several scenarios.

use std::path::Path;

use lowrank_tp::cost::{block_volume_for, Exact};
use lowrank_tp::Strategy;
use serde::Serialize;

use crate::analysis::{analyze, report_json, write_text, Analysis};
use crate::error::{CliError, Result};
use crate::scenario::Resolved;

/// One row per scenario, flat so it serializes to CSV unchanged.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub scenario: String,
    pub strategy: String,
    pub variant: String,
    pub d: usize,
    pub d_ff: usize,
    pub r: usize,
    pub b: usize,
    pub s: usize,
    pub tp: usize,
    pub grouping: bool,
    pub norm: String,
    pub ckpt: bool,
    pub compatible: bool,
    pub executed: bool,
    pub block_volume: u64,
    pub traced_block_volume: Option<u64>,
    pub collectives_per_block: usize,
    pub stat_collectives_per_block: usize,
    pub gemm_launches_per_block: u64,
    pub dp_iter_volume: u64,
    pub mlp_ai: f64,
    pub volume_over_full: String,
    pub volume_over_full_value: f64,
    pub volume_over_btp: String,
    pub volume_over_btp_value: f64,
    pub eff_ckpt: Option<f64>,
    pub reforward_collectives: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub schema_version: u32,
    pub rows: Vec<Row>,
    /// Scenarios whose model or shape differ from the first one.
    pub incompatible: Vec<String>,
    pub warnings: Vec<String>,
}

fn fraction(e: &Exact) -> String {
    format!("{}/{}", e.num, e.den)
}

fn row(r: &Resolved, a: &Analysis, compatible: bool) -> Row {
    let rep = &a.report;
    let v = |s: Strategy| block_volume_for(s, &r.cfg, &r.shape);
    let own = v(r.strategy);
    let over_full = Exact::of(own, v(Strategy::FullRankTp));
    let over_btp = Exact::of(own, v(Strategy::Btp));
    let cost = rep.cost.get(r.strategy);
    Row {
        scenario: r.name.clone(),
        strategy: r.strategy.to_string(),
        variant: r.variant.to_string(),
        d: r.cfg.d,
        d_ff: r.cfg.d_ff,
        r: r.cfg.r,
        b: r.shape.b,
        s: r.shape.s,
        tp: r.shape.tp,
        grouping: rep.plan.options.grouping,
        norm: serde_json::to_value(rep.plan.norm)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default(),
        ckpt: rep.plan.options.lowrank_ckpt,
        compatible,
        executed: rep.simulation.executed,
        block_volume: own,
        traced_block_volume: rep.simulation.traced_block_volume,
        collectives_per_block: rep.plan.collectives_per_block,
        stat_collectives_per_block: rep.plan.stat_collectives_per_block,
        gemm_launches_per_block: rep.plan.gemm_launches_per_block,
        dp_iter_volume: cost.dp_iter_volume,
        mlp_ai: cost.mlp_ai,
        volume_over_full: fraction(&over_full),
        volume_over_full_value: over_full.to_f64(),
        volume_over_btp: fraction(&over_btp),
        volume_over_btp_value: over_btp.to_f64(),
        eff_ckpt: rep.checkpoint.as_ref().and_then(|c| c.eff.map(|e| e.to_f64())),
        reforward_collectives: rep.checkpoint.as_ref().map(|c| c.report.reforward_collectives),
    }
}

/// Analyze every scenario, one thread each, and assemble rows in input order.
pub fn compare(scenarios: &[Resolved]) -> Result<Comparison> {
    if scenarios.len() < 2 {
        return Err(CliError::Config(format!(
            "compare needs at least two scenarios, got {}",
            scenarios.len()
        )));
    }
    let analyses: Vec<Result<Analysis>> = std::thread::scope(|scope| {
        let handles: Vec<_> = scenarios.iter().map(|r| scope.spawn(move || analyze(r))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(CliError::Plan("scenario thread panicked".into()))))
            .collect()
    });
    let first = &scenarios[0];
    let mut rows = Vec::new();
    let mut incompatible = Vec::new();
    let mut warnings = Vec::new();
    for (r, a) in scenarios.iter().zip(analyses) {
        let a = a?;
        let compatible = r.cfg == first.cfg && r.shape == first.shape;
        if !compatible {
            incompatible.push(r.name.clone());
        }
        warnings.extend(a.report.warnings.iter().map(|w| format!("{}: {w}", r.name)));
        rows.push(row(r, &a, compatible));
    }
    Ok(Comparison {
        schema_version: crate::analysis::SCHEMA_VERSION,
        rows,
        incompatible,
        warnings,
    })
}

/// Write `comparison.json` and `comparison.csv` under `out`.
pub fn write_comparison(c: &Comparison, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    write_text(&out.join("comparison.json"), &report_json(c)?)?;
    let path = out.join("comparison.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    for r in &c.rows {
        w.serialize(r).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::Scenario;

    fn resolved(name: &str, text: &str) -> Resolved {
        Scenario::parse(text, name, false).unwrap().resolve(name, name, text).unwrap()
    }

    #[test]
    fn seven_b_ratios() {
        let base = "preset = \"7B\"\nshape = { b = 1, s = 2048, tp = 8 }\n";
        let c = compare(&[
            resolved("full", base),
            resolved("vanilla", &format!("{base}lowrank-architecture-type = \"svd\"\n")),
            resolved("btp", &format!("{base}lowrank-architecture-type = \"svd\"\nenable-btp = true\n")),
        ])
        .unwrap();
        assert!(c.incompatible.is_empty());
        let v = &c.rows[1];
        // d_ff / d = 11008 / 4096, so 5/2 + 11008/4096
        assert!(v.volume_over_full_value > 5.0 && v.volume_over_full_value < 6.5);
        assert_eq!(c.rows[0].volume_over_btp, "8/7");
        assert_eq!(c.rows[2].volume_over_full, "7/8");
    }

    #[test]
    fn stat_collectives_sync_vs_online() {
        let base = "model = { layers = 1, heads = 4, d = 16, d_ff = 40, r = 4 }\n\
                    lowrank-architecture-type = \"svd\"\nenable-btp = true\n";
        let c = compare(&[
            resolved("sync", base),
            resolved("online", &format!("{base}enable-online-rmsnorm = true\n")),
        ])
        .unwrap();
        assert_eq!(c.rows[0].stat_collectives_per_block, 2);
        assert_eq!(c.rows[1].stat_collectives_per_block, 0);
    }

    #[test]
    fn mismatched_shapes_flagged_but_emitted() {
        let c = compare(&[
            resolved("a", "preset = \"1B\"\n"),
            resolved("b", "preset = \"3B\"\n"),
        ])
        .unwrap();
        assert_eq!(c.rows.len(), 2);
        assert_eq!(c.incompatible, ["b"]);
    }

    #[test]
    fn single_scenario_rejected() {
        let e = compare(&[resolved("a", "preset = \"1B\"\n")]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }
}
